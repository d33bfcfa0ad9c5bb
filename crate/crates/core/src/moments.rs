//! Moments, normally- and s-ordered intensity moments, non-classicality
//! identifiers and non-classicality depths.

use std::ops::{Add, Mul};

use num_traits::{FromPrimitive, Zero};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::ingest::JointHistogram;
use crate::model::{JointDist, Kind};

/// Largest order of the exact coefficient tables.
pub const MAX_ORDER: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "flavor", content = "s")]
pub enum Flavor {
    Raw,
    NormallyOrdered,
    SOrdered(f64),
}

/// Mixed moments m[k][l] for k + l <= order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentTable {
    pub order: usize,
    data: Vec<f64>,
    pub flavor: Flavor,
    pub kind: Kind,
}

impl MomentTable {
    pub fn from_fn(order: usize, flavor: Flavor, kind: Kind, f: impl Fn(usize, usize) -> f64) -> Self {
        let w = order + 1;
        let mut data = vec![0.0; w * w];
        for k in 0..=order {
            for l in 0..=order - k {
                data[k * w + l] = f(k, l);
            }
        }
        MomentTable { order, data, flavor, kind }
    }

    #[inline]
    pub fn get(&self, k: usize, l: usize) -> f64 {
        assert!(k + l <= self.order, "moment ({k},{l}) beyond order {}", self.order);
        self.data[k * (self.order + 1) + l]
    }

    fn need(&self, order: usize) -> Result<()> {
        if self.order < order {
            return Err(Error::InsufficientOrder { have: self.order, need: order });
        }
        Ok(())
    }
}

/// Raw moments by direct summation, normalized by the stored mass.
pub fn moments(d: &JointDist, order: usize) -> Result<MomentTable> {
    if order == 0 || order > MAX_ORDER {
        return invalid(format!("moment order must be in 1..={MAX_ORDER}"));
    }
    let w = order + 1;
    let mut acc = vec![0.0; w * w];
    let ps: Vec<Vec<f64>> = (0..d.rows()).map(|a| (0..=order).map(|k| (a as f64).powi(k as i32)).collect()).collect();
    let pi: Vec<Vec<f64>> = (0..d.cols()).map(|b| (0..=order).map(|l| (b as f64).powi(l as i32)).collect()).collect();
    for a in 0..d.rows() {
        for (b, &p) in d.row(a).iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            for k in 0..=order {
                let x = p * ps[a][k];
                for l in 0..=order - k {
                    acc[k * w + l] += x * pi[b][l];
                }
            }
        }
    }
    let t = acc[0];
    Ok(MomentTable::from_fn(order, Flavor::Raw, d.kind, |k, l| acc[k * w + l] / t))
}

/// Signed Stirling numbers of the first kind s(n,k).
pub fn stirling1(n: usize, k: usize) -> i64 {
    static TABLE: std::sync::OnceLock<Vec<Vec<i64>>> = std::sync::OnceLock::new();
    let t = TABLE.get_or_init(|| {
        let mut t = vec![vec![0i64; MAX_ORDER + 1]; MAX_ORDER + 1];
        t[0][0] = 1;
        for n in 1..=MAX_ORDER {
            for k in 1..=n {
                t[n][k] = t[n - 1][k - 1] - (n as i64 - 1) * t[n - 1][k];
            }
        }
        t
    });
    t[n][k]
}

/// Stirling numbers of the second kind S(n,k).
pub fn stirling2(n: usize, k: usize) -> i64 {
    static TABLE: std::sync::OnceLock<Vec<Vec<i64>>> = std::sync::OnceLock::new();
    let t = TABLE.get_or_init(|| {
        let mut t = vec![vec![0i64; MAX_ORDER + 1]; MAX_ORDER + 1];
        t[0][0] = 1;
        for n in 1..=MAX_ORDER {
            for k in 1..=n {
                t[n][k] = t[n - 1][k - 1] + k as i64 * t[n - 1][k];
            }
        }
        t
    });
    t[n][k]
}

/// Apply a lower-triangular coefficient table per arm to a moment array
/// indexed `[k][l]` with k + l <= order. Generic so it runs on exact integers.
pub fn transform_moments<T>(m: &[Vec<T>], order: usize, coef: impl Fn(usize, usize) -> i64) -> Vec<Vec<T>>
where
    T: Copy + Zero + Add<Output = T> + Mul<Output = T> + FromPrimitive,
{
    let mut out = vec![vec![T::zero(); order + 1]; order + 1];
    for k in 0..=order {
        for l in 0..=order - k {
            let mut acc = T::zero();
            for a in 0..=k {
                let ca = coef(k, a);
                if ca == 0 {
                    continue;
                }
                for b in 0..=l {
                    let cb = coef(l, b);
                    if cb == 0 {
                        continue;
                    }
                    acc = acc + T::from_i64(ca * cb).expect("coefficient fits") * m[a][b];
                }
            }
            out[k][l] = acc;
        }
    }
    out
}

fn to_nested(m: &MomentTable) -> Vec<Vec<f64>> {
    (0..=m.order).map(|k| (0..=m.order).map(|l| if k + l <= m.order { m.get(k, l) } else { 0.0 }).collect()).collect()
}

/// Normally-ordered intensity (factorial) moments from raw moments.
pub fn to_intensity_moments(m: &MomentTable) -> Result<MomentTable> {
    if m.flavor != Flavor::Raw {
        return invalid("intensity moments need raw moments");
    }
    let t = transform_moments(&to_nested(m), m.order, stirling1);
    Ok(MomentTable::from_fn(m.order, Flavor::NormallyOrdered, m.kind, |k, l| t[k][l]))
}

/// Raw moments back from normally-ordered ones.
pub fn from_intensity_moments(m: &MomentTable) -> Result<MomentTable> {
    if m.flavor != Flavor::NormallyOrdered {
        return invalid("expected normally-ordered moments");
    }
    let t = transform_moments(&to_nested(m), m.order, stirling2);
    Ok(MomentTable::from_fn(m.order, Flavor::Raw, m.kind, |k, l| t[k][l]))
}

/// Integer coefficient C(k,m)^2 (k-m)! of the s-ordering expansion.
pub fn s_order_coefficient(k: usize, m: usize) -> i64 {
    let binom = (0..m).fold(1i64, |acc, j| acc * (k - j) as i64 / (j + 1) as i64);
    let fact = (1..=(k - m) as i64).product::<i64>();
    binom * binom * fact
}

/// s-ordered moments: <W^k>_s = sum_m C(k,m)^2 (k-m)! ((1-s)/2)^(k-m) <W^m>, per arm.
pub fn to_s_ordered(m: &MomentTable, s: f64) -> Result<MomentTable> {
    if m.flavor != Flavor::NormallyOrdered {
        return invalid("s-ordering needs normally-ordered moments");
    }
    if !(s <= 1.0) {
        return invalid(format!("s must be <= 1, got {s}"));
    }
    let h = (1.0 - s) / 2.0;
    let c = |k: usize, a: usize| s_order_coefficient(k, a) as f64 * h.powi((k - a) as i32);
    Ok(MomentTable::from_fn(m.order, Flavor::SOrdered(s), m.kind, |k, l| {
        let mut acc = 0.0;
        for a in 0..=k {
            for b in 0..=l {
                acc += c(k, a) * c(l, b) * m.get(a, b);
            }
        }
        acc
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FanoNrpCov {
    pub f_s: f64,
    pub f_i: f64,
    pub r: f64,
    pub c: f64,
}

/// Fano factors, noise-reduction parameter and normalized correlation from raw moments.
pub fn fano_nrp_cov(m: &MomentTable) -> Result<FanoNrpCov> {
    m.need(2)?;
    let (ms, mi) = (m.get(1, 0), m.get(0, 1));
    if ms <= 0.0 {
        return Err(Error::ZeroMean("s"));
    }
    if mi <= 0.0 {
        return Err(Error::ZeroMean("i"));
    }
    let vs = m.get(2, 0) - ms * ms;
    let vi = m.get(0, 2) - mi * mi;
    let cov = m.get(1, 1) - ms * mi;
    Ok(FanoNrpCov {
        f_s: vs / ms,
        f_i: vi / mi,
        r: (vs + vi - 2.0 * cov) / (ms + mi),
        c: m.get(1, 1) / (m.get(2, 0) * m.get(0, 2)).sqrt(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Nci {
    E001,
    E101,
    E111,
    E211,
    M1001,
    M001001,
    L11,
    L21,
    L31,
    L41,
}

impl Nci {
    pub const ALL: [Nci; 10] =
        [Nci::E001, Nci::E101, Nci::E111, Nci::E211, Nci::M1001, Nci::M001001, Nci::L11, Nci::L21, Nci::L31, Nci::L41];

    pub fn name(&self) -> &'static str {
        match self {
            Nci::E001 => "E001",
            Nci::E101 => "E101",
            Nci::E111 => "E111",
            Nci::E211 => "E211",
            Nci::M1001 => "M1001",
            Nci::M001001 => "M001001",
            Nci::L11 => "L11",
            Nci::L21 => "L21",
            Nci::L31 => "L31",
            Nci::L41 => "L41",
        }
    }

    pub fn order(&self) -> usize {
        match self {
            Nci::E001 | Nci::M1001 | Nci::M001001 | Nci::L11 => 2,
            Nci::E101 | Nci::L21 => 3,
            Nci::E111 | Nci::L31 => 4,
            Nci::E211 | Nci::L41 => 5,
        }
    }

    fn is_marginal(&self) -> bool {
        matches!(self, Nci::L11 | Nci::L21 | Nci::L31 | Nci::L41)
    }
}

impl std::str::FromStr for Nci {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Nci::ALL
            .iter()
            .copied()
            .find(|n| n.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::InvalidParameter(format!("unknown identifier {s:?}")))
    }
}

/// Value of a non-classicality identifier; negative flags non-classicality.
/// The single-arm family uses `arm` (default idler).
pub fn nci_value(m: &MomentTable, id: Nci, arm: Option<crate::ingest::Arm>) -> Result<f64> {
    if m.flavor == Flavor::Raw {
        return invalid("identifiers need normally- or s-ordered moments");
    }
    m.need(id.order())?;
    let w = |k: usize, l: usize| m.get(k, l);
    let marg = |k: usize| match arm.unwrap_or(crate::ingest::Arm::I) {
        crate::ingest::Arm::S => w(k, 0),
        crate::ingest::Arm::I => w(0, k),
    };
    Ok(match id {
        Nci::E001 => w(2, 0) + w(0, 2) - 2.0 * w(1, 1),
        Nci::E101 => w(3, 0) + w(1, 2) - 2.0 * w(2, 1),
        Nci::E111 => w(3, 1) + w(1, 3) - 2.0 * w(2, 2),
        Nci::E211 => w(4, 1) + w(2, 3) - 2.0 * w(3, 2),
        Nci::M1001 => w(2, 0) * w(0, 2) - w(1, 1) * w(1, 1),
        Nci::M001001 => {
            w(2, 0) * w(0, 2) + 2.0 * w(1, 1) * w(1, 0) * w(0, 1)
                - w(1, 1) * w(1, 1)
                - w(2, 0) * w(0, 1) * w(0, 1)
                - w(1, 0) * w(1, 0) * w(0, 2)
        }
        Nci::L11 | Nci::L21 | Nci::L31 | Nci::L41 => {
            let k = id.order() - 1;
            marg(k + 1) - marg(k) * marg(1)
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NcdResult {
    pub identifier: String,
    pub tau: f64,
    pub s_threshold: f64,
    pub nonclassical: bool,
    /// Still violated at s = -1; tau reported as 1.
    pub saturated: bool,
    /// Sign changes seen on the coarse scan; more than one is reported, not fatal.
    pub sign_changes: usize,
    pub value_at_1: f64,
}

const SCAN_POINTS: usize = 64;
const BISECT_WIDTH: f64 = 1e-6;

/// Non-classicality depth tau = (1 - s_th)/2 of an identifier.
pub fn ncd(m: &MomentTable, id: Nci, arm: Option<crate::ingest::Arm>) -> Result<NcdResult> {
    if m.flavor != Flavor::NormallyOrdered {
        return invalid("depth needs normally-ordered moments");
    }
    if id.is_marginal() && arm.is_none() && m.order < id.order() {
        m.need(id.order())?;
    }
    let val = |s: f64| -> Result<f64> { nci_value(&to_s_ordered(m, s)?, id, arm) };
    let v1 = val(1.0)?;
    let mut res = NcdResult {
        identifier: id.name().to_string(),
        tau: 0.0,
        s_threshold: 1.0,
        nonclassical: false,
        saturated: false,
        sign_changes: 0,
        value_at_1: v1,
    };
    if v1 >= 0.0 {
        return Ok(res);
    }
    res.nonclassical = true;
    // scan from s = 1 down to s = -1
    let grid: Vec<f64> = (0..SCAN_POINTS).map(|j| 1.0 - 2.0 * j as f64 / (SCAN_POINTS - 1) as f64).collect();
    let vals: Vec<f64> = grid.iter().map(|&s| val(s)).collect::<Result<_>>()?;
    let mut first: Option<usize> = None;
    for j in 1..SCAN_POINTS {
        if (vals[j - 1] < 0.0) != (vals[j] < 0.0) {
            res.sign_changes += 1;
            if first.is_none() {
                first = Some(j);
            }
        }
    }
    let Some(j) = first else {
        res.saturated = true;
        res.tau = 1.0;
        res.s_threshold = -1.0;
        return Ok(res);
    };
    // negative at hi, non-negative at lo
    let (mut lo, mut hi) = (grid[j], grid[j - 1]);
    while hi - lo > BISECT_WIDTH {
        let mid = 0.5 * (lo + hi);
        if val(mid)? < 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    res.s_threshold = 0.5 * (lo + hi);
    res.tau = (1.0 - res.s_threshold) / 2.0;
    Ok(res)
}

/// Convenience: normally-ordered moments of a distribution.
pub fn intensity_moments(d: &JointDist, order: usize) -> Result<MomentTable> {
    to_intensity_moments(&moments(d, order)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BootstrapEstimate {
    pub value: f64,
    pub std_err: f64,
    pub resamples: usize,
}

/// Nonparametric bootstrap over groups: the histogram is resampled
/// multinomially with its own frequencies.
pub fn bootstrap(
    h: &JointHistogram,
    resamples: usize,
    seed: u64,
    stat: impl Fn(&JointHistogram) -> Result<f64>,
) -> Result<BootstrapEstimate> {
    let value = stat(h)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total = h.n_groups;
    let mut vals = Vec::with_capacity(resamples);
    for _ in 0..resamples {
        let mut left = total;
        let mut mass = 1.0f64;
        let mut counts = Vec::with_capacity(h.counts().len());
        for &c in h.counts() {
            let p = c as f64 / total as f64;
            let draw = if left == 0 || p <= 0.0 {
                0
            } else if p >= mass {
                left
            } else {
                Binomial::new(left, (p / mass).min(1.0)).map(|b| b.sample(&mut rng)).unwrap_or(0)
            };
            counts.push(draw);
            left -= draw;
            mass -= p;
        }
        let r = JointHistogram::from_counts(h.policy, counts)?;
        vals.push(stat(&r)?);
    }
    let mean = vals.iter().sum::<f64>() / resamples as f64;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (resamples.max(2) - 1) as f64;
    Ok(BootstrapEstimate { value, std_err: var.sqrt(), resamples })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{Arm, GroupingPolicy};
    use crate::model::{joint_twb_auto, TwbParams};

    #[test]
    fn point_moments() {
        let m = moments(&JointDist::delta(2, 3, Kind::Photon), 3).unwrap();
        assert_eq!(m.get(1, 0), 2.0);
        assert_eq!(m.get(0, 1), 3.0);
        assert_eq!(m.get(1, 1), 6.0);
    }

    #[test]
    fn stirling_tables() {
        assert_eq!(stirling1(1, 1), 1);
        assert_eq!((stirling1(2, 1), stirling1(2, 2)), (-1, 1));
        assert_eq!(stirling1(5, 2), -50);
        assert_eq!(stirling2(5, 2), 15);
        for n in 0..=MAX_ORDER {
            for k in 0..=MAX_ORDER {
                let id: i64 = (0..=MAX_ORDER).map(|j| stirling1(n, j) * stirling2(j, k)).sum();
                assert_eq!(id, (n == k) as i64);
            }
        }
    }

    #[test]
    fn first_moments_and_factorials() {
        let d = joint_twb_auto(&TwbParams::new(2.0, 1.0, 1.0, 0.4, 0.1, 0.2)).unwrap();
        let raw = moments(&d, 4).unwrap();
        let w = to_intensity_moments(&raw).unwrap();
        assert_eq!(w.get(1, 0), raw.get(1, 0));
        assert!((w.get(2, 0) - (raw.get(2, 0) - raw.get(1, 0))).abs() < 1e-13);
    }

    #[test]
    fn s_ordering_cases() {
        let vac = MomentTable::from_fn(4, Flavor::NormallyOrdered, Kind::Photon, |k, l| (k + l == 0) as u8 as f64);
        let s1 = to_s_ordered(&vac, 1.0).unwrap();
        for k in 0..=4 {
            for l in 0..=4 - k {
                assert_eq!(s1.get(k, l), vac.get(k, l));
            }
        }
        let s0 = to_s_ordered(&vac, 0.0).unwrap();
        assert!((s0.get(2, 0) - 0.5).abs() < 1e-15);
        let d = joint_twb_auto(&TwbParams::new(1.0, 1.0, 1.0, 0.1, 0.0, 0.0)).unwrap();
        let w = intensity_moments(&d, 3).unwrap();
        let s = -0.4;
        let ws = to_s_ordered(&w, s).unwrap();
        assert!((ws.get(1, 0) - (w.get(1, 0) + (1.0 - s) / 2.0)).abs() < 1e-14);
    }

    #[test]
    fn thermal_stays_thermal_under_s_ordering() {
        let b = 0.7f64;
        let w = MomentTable::from_fn(5, Flavor::NormallyOrdered, Kind::Photon, |k, l| {
            let f = |n: usize| (1..=n).product::<usize>() as f64;
            f(k) * f(l) * b.powi((k + l) as i32)
        });
        let s = -0.3;
        let ws = to_s_ordered(&w, s).unwrap();
        let bb = b + (1.0 - s) / 2.0;
        let f = |n: usize| (1..=n).product::<usize>() as f64;
        assert!((ws.get(3, 2) - f(3) * f(2) * bb.powi(5)).abs() < 1e-12);
    }

    #[test]
    fn fano_and_nrp_shot_noise() {
        let pois = |lam: f64| -> Vec<f64> {
            let mut p = vec![(-lam).exp()];
            for n in 1..80 {
                let v = p[n - 1] * lam / n as f64;
                p.push(v);
            }
            p
        };
        let (a, b) = (pois(3.0), pois(5.0));
        let d = JointDist::new(80, 80, a.iter().flat_map(|x| b.iter().map(move |y| x * y)).collect(), 0.0, Kind::Photocount)
            .unwrap();
        let r = fano_nrp_cov(&moments(&d, 2).unwrap()).unwrap();
        assert!((r.f_s - 1.0).abs() < 1e-10 && (r.f_i - 1.0).abs() < 1e-10 && (r.r - 1.0).abs() < 1e-10);
        let w = intensity_moments(&d, 5).unwrap();
        for id in [Nci::L11, Nci::L21, Nci::L31, Nci::L41] {
            assert!(nci_value(&w, id, Some(Arm::S)).unwrap().abs() < 1e-8);
        }
        assert!(nci_value(&w, Nci::M1001, None).unwrap().abs() < 1e-9);
        let diag = joint_twb_auto(&TwbParams::new(3.0, 1.0, 1.0, 0.5, 0.0, 0.0)).unwrap();
        assert!(fano_nrp_cov(&moments(&diag, 2).unwrap()).unwrap().r.abs() < 1e-12);
        let z = JointDist::delta(0, 1, Kind::Photon);
        assert!(matches!(fano_nrp_cov(&moments(&z, 2).unwrap()), Err(Error::ZeroMean("s"))));
    }

    #[test]
    fn paired_e001_value() {
        let d = joint_twb_auto(&TwbParams::new(3.0, 1.0, 1.0, 0.5, 0.0, 0.0)).unwrap();
        let w = intensity_moments(&d, 2).unwrap();
        let e = nci_value(&w, Nci::E001, None).unwrap();
        assert!((e + 2.0 * w.get(1, 0)).abs() < 1e-12);
        assert!(matches!(nci_value(&w, Nci::E211, None), Err(Error::InsufficientOrder { .. })));
    }

    #[test]
    fn classical_depth_is_zero() {
        let d = joint_twb_auto(&TwbParams::new(2.0, 2.0, 2.0, 0.0, 0.3, 0.3)).unwrap();
        let w = intensity_moments(&d, 5).unwrap();
        for id in [Nci::E001, Nci::E101, Nci::E111, Nci::E211] {
            let r = ncd(&w, id, None).unwrap();
            assert_eq!(r.tau, 0.0);
            assert!(!r.nonclassical);
        }
    }

    #[test]
    fn noiseless_pairs_have_depths_within_half() {
        let d = joint_twb_auto(&TwbParams::new(5.0, 1.0, 1.0, 0.2, 0.0, 0.0)).unwrap();
        let w = intensity_moments(&d, 5).unwrap();
        let r = ncd(&w, Nci::E001, None).unwrap();
        assert!(r.nonclassical && r.tau > 0.3 && r.tau <= 0.5 + 1e-6, "{r:?}");
        let v = nci_value(&to_s_ordered(&w, r.s_threshold).unwrap(), Nci::E001, None).unwrap();
        assert!(v.abs() < 1e-5);
    }

    #[test]
    fn bootstrap_spread() {
        let pol = GroupingPolicy::disjoint(1);
        let h = JointHistogram::from_counts(pol, vec![400, 100, 100, 400]).unwrap();
        let est = bootstrap(&h, 200, 1, |h| Ok(h.get(1, 1) as f64 / h.n_groups as f64)).unwrap();
        let expect = (0.4f64 * 0.6 / 1000.0).sqrt();
        assert!((est.std_err - expect).abs() < 0.3 * expect);
    }
}
