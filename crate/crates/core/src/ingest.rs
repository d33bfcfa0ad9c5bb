//! Grouping of click windows into compound samples, histograms and
//! window-shift correlations.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::model::{JointDist, Kind};
use crate::simulate::ClickStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum GroupMode {
    #[default]
    Sliding,
    Disjoint,
}

impl std::str::FromStr for GroupMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sliding" => Ok(GroupMode::Sliding),
            "disjoint" => Ok(GroupMode::Disjoint),
            other => invalid(format!("unknown grouping mode {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupingPolicy {
    pub n: usize,
    pub mode: GroupMode,
}

impl GroupingPolicy {
    pub fn new(n: usize, mode: GroupMode) -> Self {
        GroupingPolicy { n, mode }
    }

    pub fn disjoint(n: usize) -> Self {
        GroupingPolicy { n, mode: GroupMode::Disjoint }
    }

    pub fn sliding(n: usize) -> Self {
        GroupingPolicy { n, mode: GroupMode::Sliding }
    }

    pub fn n_groups(&self, len: usize) -> usize {
        match self.mode {
            GroupMode::Sliding => len + 1 - self.n,
            GroupMode::Disjoint => len / self.n,
        }
    }

    fn check(&self, len: usize) -> Result<()> {
        if self.n == 0 {
            return invalid("group size N must be >= 1");
        }
        if len < self.n {
            return Err(Error::StreamTooShort { len, need: self.n });
        }
        Ok(())
    }
}

/// Photocount histogram over (c_s, c_i) in 0..=N.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointHistogram {
    counts: Vec<u64>,
    pub n_groups: u64,
    pub policy: GroupingPolicy,
}

impl JointHistogram {
    pub fn from_counts(policy: GroupingPolicy, counts: Vec<u64>) -> Result<Self> {
        let side = policy.n + 1;
        if counts.len() != side * side {
            return invalid(format!("histogram needs {} cells, got {}", side * side, counts.len()));
        }
        let n_groups = counts.iter().sum();
        Ok(JointHistogram { counts, n_groups, policy })
    }

    pub fn side(&self) -> usize {
        self.policy.n + 1
    }

    #[inline]
    pub fn get(&self, cs: usize, ci: usize) -> u64 {
        self.counts[cs * self.side() + ci]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn column_total(&self, cs: usize) -> u64 {
        (0..self.side()).map(|ci| self.get(cs, ci)).sum()
    }

    /// Normalized photocount distribution trimmed of empty trailing rows/columns.
    pub fn to_dist(&self) -> JointDist {
        let side = self.side();
        let t = self.n_groups.max(1) as f64;
        let table = self.counts.iter().map(|&c| c as f64 / t).collect();
        let mut d = JointDist::new(side, side, table, 0.0, Kind::Photocount).expect("square table");
        d.trim(0.0);
        d.tail_mass = 0.0;
        d
    }
}

fn arm_bit(w: u8, arm: Arm) -> u32 {
    match arm {
        Arm::S => (w & 1) as u32,
        Arm::I => ((w >> 1) & 1) as u32,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arm {
    S,
    I,
}

impl std::str::FromStr for Arm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "s" | "signal" => Ok(Arm::S),
            "i" | "idler" => Ok(Arm::I),
            other => invalid(format!("unknown arm {other:?}")),
        }
    }
}

const GROUP_CHUNK: usize = 1 << 18;

/// Per-group (c_s, c_i) sums in group order.
pub fn group_sums(stream: &ClickStream, policy: &GroupingPolicy) -> Result<Vec<(u32, u32)>> {
    policy.check(stream.len())?;
    let w = &stream.windows;
    let n = policy.n;
    let groups = policy.n_groups(w.len());
    let chunks: Vec<usize> = (0..groups).step_by(GROUP_CHUNK).collect();
    let parts: Vec<Vec<(u32, u32)>> = chunks
        .par_iter()
        .map(|&g0| {
            let g1 = (g0 + GROUP_CHUNK).min(groups);
            let mut out = Vec::with_capacity(g1 - g0);
            match policy.mode {
                GroupMode::Disjoint => {
                    for g in g0..g1 {
                        let s = g * n;
                        let (mut a, mut b) = (0u32, 0u32);
                        for &x in &w[s..s + n] {
                            a += (x & 1) as u32;
                            b += ((x >> 1) & 1) as u32;
                        }
                        out.push((a, b));
                    }
                }
                GroupMode::Sliding => {
                    let (mut a, mut b) = (0u32, 0u32);
                    for &x in &w[g0..g0 + n] {
                        a += (x & 1) as u32;
                        b += ((x >> 1) & 1) as u32;
                    }
                    out.push((a, b));
                    for g in g0 + 1..g1 {
                        let (old, new) = (w[g - 1], w[g + n - 1]);
                        a = a + (new & 1) as u32 - (old & 1) as u32;
                        b = b + ((new >> 1) & 1) as u32 - ((old >> 1) & 1) as u32;
                        out.push((a, b));
                    }
                }
            }
            out
        })
        .collect();
    Ok(parts.concat())
}

pub fn group_histogram(stream: &ClickStream, policy: &GroupingPolicy) -> Result<JointHistogram> {
    let sums = group_sums(stream, policy)?;
    let side = policy.n + 1;
    let mut counts = vec![0u64; side * side];
    for (a, b) in sums {
        counts[a as usize * side + b as usize] += 1;
    }
    JointHistogram::from_counts(*policy, counts)
}

/// Grouped counts of a single-arm bit sequence (entries 0/1).
pub fn grouped_counts(bits: &[u8], policy: &GroupingPolicy) -> Result<Vec<u32>> {
    policy.check(bits.len())?;
    let n = policy.n;
    let groups = policy.n_groups(bits.len());
    Ok(match policy.mode {
        GroupMode::Disjoint => bits.chunks_exact(n).map(|c| c.iter().map(|&b| b as u32).sum()).collect(),
        GroupMode::Sliding => {
            let mut out = Vec::with_capacity(groups);
            let mut a: u32 = bits[..n].iter().map(|&b| b as u32).sum();
            out.push(a);
            for g in 1..groups {
                a = a + bits[g + n - 1] as u32 - bits[g - 1] as u32;
                out.push(a);
            }
            out
        }
    })
}

pub fn arm_bits(stream: &ClickStream, arm: Arm) -> Vec<u8> {
    stream.windows.iter().map(|&w| arm_bit(w, arm) as u8).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionedSequences {
    pub reference_s: Vec<u8>,
    pub reference_i: Vec<u8>,
    /// Signal bits of windows with an idler click.
    pub conditioned_s: Vec<u8>,
    /// Idler bits of windows with a signal click.
    pub conditioned_i: Vec<u8>,
}

pub fn conditioned_sequences(stream: &ClickStream) -> ConditionedSequences {
    let reference_s = arm_bits(stream, Arm::S);
    let reference_i = arm_bits(stream, Arm::I);
    let conditioned_i = stream.windows.iter().filter(|&&w| w & 1 == 1).map(|&w| (w >> 1) & 1).collect();
    let conditioned_s = stream.windows.iter().filter(|&&w| w & 2 == 2).map(|&w| w & 1).collect();
    ConditionedSequences { reference_s, reference_i, conditioned_s, conditioned_i }
}

/// Normalized correlation of photocount fluctuations versus window shift,
/// K[dj] = L sum_j dc_j dc_{j+dj} / (sum_j c_j)^2, sums truncated at the record end.
pub fn window_correlation(stream: &ClickStream, arm: Arm, dj_max: usize) -> Result<Vec<f64>> {
    let bits = arm_bits(stream, arm);
    bit_correlation(&bits, dj_max)
}

pub fn bit_correlation(bits: &[u8], dj_max: usize) -> Result<Vec<f64>> {
    let len = bits.len();
    let clicks: Vec<usize> = bits.iter().enumerate().filter(|(_, &b)| b != 0).map(|(j, _)| j).collect();
    let total = clicks.len() as f64;
    if clicks.is_empty() {
        return Err(Error::DegenerateStream("no clicks in arm".into()));
    }
    if dj_max >= len {
        return invalid("dj_max must be smaller than the stream length");
    }
    // pair counts sum_j c_j c_{j+dj}
    let mut pairs = vec![0u64; dj_max + 1];
    for (k, &a) in clicks.iter().enumerate() {
        for &b in &clicks[k..] {
            let d = b - a;
            if d > dj_max {
                break;
            }
            pairs[d] += 1;
        }
    }
    // prefix sums of clicks to get the partial sums of both shifted ranges
    let mut prefix = vec![0u64; len + 1];
    for j in 0..len {
        prefix[j + 1] = prefix[j] + bits[j] as u64;
    }
    let mu = total / len as f64;
    let lf = len as f64;
    Ok((0..=dj_max)
        .map(|d| {
            let m = (len - d) as f64;
            let head = prefix[len - d] as f64;
            let tail = (prefix[len] - prefix[d]) as f64;
            let s = pairs[d] as f64 - mu * (head + tail) + m * mu * mu;
            lf * s / (total * total)
        })
        .collect())
}

/// Centered moving average over 2 delta_j + 1 entries; edges use what is available.
pub fn averaged_correlation(k: &[f64], delta_j: usize) -> Vec<f64> {
    let n = k.len();
    let mut prefix = vec![0.0; n + 1];
    for j in 0..n {
        prefix[j + 1] = prefix[j] + k[j];
    }
    (0..n)
        .map(|j| {
            let lo = j.saturating_sub(delta_j);
            let hi = (j + delta_j + 1).min(n);
            (prefix[hi] - prefix[lo]) / (hi - lo) as f64
        })
        .collect()
}
