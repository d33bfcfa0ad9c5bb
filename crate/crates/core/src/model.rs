//! Photon-number models: Mandel-Rice components and the joint twin-beam law.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Default ceiling on truncated probability before a table counts as dirty.
pub const TAIL_CEILING: f64 = 1e-10;
/// Component tail bound used when truncation bounds are grown automatically.
pub const COMPONENT_TAIL: f64 = 1e-12;

/// Mode counts and per-mode mean photon numbers of the paired, signal-noise
/// and idler-noise components.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TwbParams {
    pub m_p: f64,
    pub m_s: f64,
    pub m_i: f64,
    pub b_p: f64,
    pub b_s: f64,
    pub b_i: f64,
}

impl TwbParams {
    pub fn new(m_p: f64, m_s: f64, m_i: f64, b_p: f64, b_s: f64, b_i: f64) -> Self {
        TwbParams { m_p, m_s, m_i, b_p, b_s, b_i }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, m) in [("M_p", self.m_p), ("M_s", self.m_s), ("M_i", self.m_i)] {
            if !(m.is_finite() && m > 0.0) {
                return invalid(format!("{name} must be finite and > 0, got {m}"));
            }
        }
        for (name, b) in [("B_p", self.b_p), ("B_s", self.b_s), ("B_i", self.b_i)] {
            if !(b.is_finite() && b >= 0.0) {
                return invalid(format!("{name} must be finite and >= 0, got {b}"));
            }
        }
        if !(self.mean_s().is_finite() && self.mean_i().is_finite()) {
            return invalid("component means overflow");
        }
        Ok(())
    }

    pub fn mean_pair(&self) -> f64 {
        self.m_p * self.b_p
    }

    pub fn mean_s(&self) -> f64 {
        self.m_p * self.b_p + self.m_s * self.b_s
    }

    pub fn mean_i(&self) -> f64 {
        self.m_p * self.b_p + self.m_i * self.b_i
    }

    /// Same beam occupying `n` windows: all mode counts multiplied by `n`.
    pub fn scaled(&self, n: usize) -> Self {
        let f = n as f64;
        TwbParams { m_p: self.m_p * f, m_s: self.m_s * f, m_i: self.m_i * f, ..*self }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Photon,
    Photocount,
}

/// One-dimensional truncated distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalDist {
    pub probs: Vec<f64>,
    pub tail_mass: f64,
    pub kind: Kind,
}

impl MarginalDist {
    pub fn delta(n: usize, kind: Kind) -> Self {
        let mut probs = vec![0.0; n + 1];
        probs[n] = 1.0;
        MarginalDist { probs, tail_mass: 0.0, kind }
    }

    pub fn total(&self) -> f64 {
        self.probs.iter().sum()
    }

    /// Raw moment of order `k` over the stored support, normalized by its mass.
    pub fn raw_moment(&self, k: u32) -> f64 {
        let t = self.total();
        self.probs.iter().enumerate().map(|(n, p)| p * (n as f64).powi(k as i32)).sum::<f64>() / t
    }

    pub fn mean(&self) -> f64 {
        self.raw_moment(1)
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        let t = self.total();
        self.probs
            .iter()
            .enumerate()
            .map(|(n, p)| p * (n as f64 - m).powi(2))
            .sum::<f64>()
            / t
    }

    pub fn fano(&self) -> Result<f64> {
        let m = self.mean();
        if m <= 0.0 {
            return Err(Error::ZeroMean("marginal"));
        }
        Ok(self.variance() / m)
    }

    /// Rescale to unit mass over the stored support.
    pub fn normalized(&self) -> Self {
        let t = self.total();
        MarginalDist { probs: self.probs.iter().map(|p| p / t).collect(), tail_mass: 0.0, kind: self.kind }
    }
}

/// Truncated joint (signal, idler) distribution stored row-major by signal count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointDist {
    rows: usize,
    cols: usize,
    table: Vec<f64>,
    pub tail_mass: f64,
    pub kind: Kind,
}

impl JointDist {
    pub fn new(rows: usize, cols: usize, table: Vec<f64>, tail_mass: f64, kind: Kind) -> Result<Self> {
        if rows == 0 || cols == 0 || table.len() != rows * cols {
            return invalid(format!("table of {} entries does not fit {rows}x{cols}", table.len()));
        }
        Ok(JointDist { rows, cols, table, tail_mass, kind })
    }

    pub fn zeros(rows: usize, cols: usize, kind: Kind) -> Self {
        JointDist { rows, cols, table: vec![0.0; rows * cols], tail_mass: 0.0, kind }
    }

    pub fn delta(ns: usize, ni: usize, kind: Kind) -> Self {
        let mut d = JointDist::zeros(ns + 1, ni + 1, kind);
        d.set(ns, ni, 1.0);
        d
    }

    /// Number of signal indices (n_s_max + 1).
    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Number of idler indices (n_i_max + 1).
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, ns: usize, ni: usize) -> f64 {
        if ns < self.rows && ni < self.cols {
            self.table[ns * self.cols + ni]
        } else {
            0.0
        }
    }

    #[inline]
    pub fn set(&mut self, ns: usize, ni: usize, v: f64) {
        self.table[ns * self.cols + ni] = v;
    }

    pub fn table(&self) -> &[f64] {
        &self.table
    }

    pub fn row(&self, ns: usize) -> &[f64] {
        &self.table[ns * self.cols..(ns + 1) * self.cols]
    }

    pub fn total(&self) -> f64 {
        self.table.iter().sum()
    }

    pub fn is_dirty(&self, ceiling: f64) -> bool {
        self.tail_mass > ceiling
    }

    pub fn transpose(&self) -> Self {
        let mut t = JointDist::zeros(self.cols, self.rows, self.kind);
        for a in 0..self.rows {
            for b in 0..self.cols {
                t.set(b, a, self.get(a, b));
            }
        }
        t.tail_mass = self.tail_mass;
        t
    }

    pub fn marginal_s(&self) -> MarginalDist {
        let probs = (0..self.rows).map(|a| self.row(a).iter().sum()).collect();
        MarginalDist { probs, tail_mass: self.tail_mass, kind: self.kind }
    }

    pub fn marginal_i(&self) -> MarginalDist {
        let mut probs = vec![0.0; self.cols];
        for a in 0..self.rows {
            for (b, v) in self.row(a).iter().enumerate() {
                probs[b] += v;
            }
        }
        MarginalDist { probs, tail_mass: self.tail_mass, kind: self.kind }
    }

    /// Rescale to unit mass over the stored support.
    pub fn normalized(&self) -> Self {
        let t = self.total();
        JointDist {
            table: self.table.iter().map(|v| v / t).collect(),
            tail_mass: 0.0,
            ..self.clone()
        }
    }

    /// Drop trailing rows and columns whose mass is at most `eps` each,
    /// booking the removed mass as tail.
    pub fn trim(&mut self, eps: f64) {
        loop {
            let mut changed = false;
            if self.rows > 1 {
                let m: f64 = self.row(self.rows - 1).iter().sum();
                if m <= eps {
                    self.table.truncate((self.rows - 1) * self.cols);
                    self.rows -= 1;
                    self.tail_mass += m;
                    changed = true;
                }
            }
            if self.cols > 1 {
                let c = self.cols - 1;
                let m: f64 = (0..self.rows).map(|a| self.get(a, c)).sum();
                if m <= eps {
                    let mut t = Vec::with_capacity(self.rows * c);
                    for a in 0..self.rows {
                        t.extend_from_slice(&self.row(a)[..c]);
                    }
                    self.table = t;
                    self.cols = c;
                    self.tail_mass += m;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }
    }
}

fn check_mb(m: f64, b: f64) -> Result<()> {
    if !(m.is_finite() && m > 0.0) {
        return invalid(format!("mode count must be finite and > 0, got {m}"));
    }
    if !(b.is_finite() && b >= 0.0) {
        return invalid(format!("mean per mode must be finite and >= 0, got {b}"));
    }
    Ok(())
}

/// Multi-mode thermal photon-number law with `m` modes of mean `b` each.
pub fn mandel_rice(m: f64, b: f64, n_max: usize) -> Result<MarginalDist> {
    check_mb(m, b)?;
    let mut probs = vec![0.0; n_max + 1];
    let ratio = b / (1.0 + b);
    let log_p0 = -m * b.ln_1p();
    if log_p0 > -700.0 {
        probs[0] = log_p0.exp();
        for n in 0..n_max {
            probs[n + 1] = probs[n] * (n as f64 + m) / (n as f64 + 1.0) * ratio;
        }
    } else {
        // p(0) underflows: same recurrence carried in logs.
        let lr = ratio.ln();
        let mut lp = log_p0;
        probs[0] = lp.exp();
        for n in 0..n_max {
            lp += ((n as f64 + m) / (n as f64 + 1.0)).ln() + lr;
            probs[n + 1] = lp.exp();
        }
    }
    let tail_mass = (1.0 - probs.iter().sum::<f64>()).max(0.0);
    Ok(MarginalDist { probs, tail_mass, kind: Kind::Photon })
}

/// Mandel-Rice law truncated where the tail drops below `tail_max`,
/// growing the bound by 1.5x from a moment-based first guess.
pub fn mandel_rice_auto(m: f64, b: f64, tail_max: f64) -> Result<MarginalDist> {
    check_mb(m, b)?;
    let mean = m * b;
    let sd = (m * b * (1.0 + b)).sqrt();
    let mut n_max = (mean + 10.0 * sd + 10.0).ceil() as usize;
    loop {
        let d = mandel_rice(m, b, n_max)?;
        if d.tail_mass <= tail_max {
            return Ok(d);
        }
        n_max = (n_max as f64 * 1.5).ceil() as usize;
    }
}

/// Joint signal-idler photon-number distribution: pairs convolved with
/// independent signal and idler noise.
pub fn joint_twb(params: &TwbParams, n_s_max: usize, n_i_max: usize) -> Result<JointDist> {
    params.validate()?;
    let pp = mandel_rice_auto(params.m_p, params.b_p, COMPONENT_TAIL)?;
    let ps = mandel_rice_auto(params.m_s, params.b_s, COMPONENT_TAIL)?;
    let pi = mandel_rice_auto(params.m_i, params.b_i, COMPONENT_TAIL)?;
    let lp = pp.probs.len() - 1;
    let rows = n_s_max.max(lp + ps.probs.len() - 1) + 1;
    let cols = n_i_max.max(lp + pi.probs.len() - 1) + 1;
    let mut d = JointDist::zeros(rows, cols, Kind::Photon);
    for (n, &w) in pp.probs.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        for (a, &x) in ps.probs.iter().enumerate() {
            let wx = w * x;
            if wx == 0.0 {
                continue;
            }
            let base = (n + a) * cols + n;
            for (b, &y) in pi.probs.iter().enumerate() {
                d.table[base + b] += wx * y;
            }
        }
    }
    d.tail_mass = (1.0 - d.total()).max(0.0);
    Ok(d)
}

/// Joint distribution with automatically chosen truncation.
pub fn joint_twb_auto(params: &TwbParams) -> Result<JointDist> {
    joint_twb(params, 0, 0)
}

/// Exact two-dimensional convolution.
pub fn convolve_joint(a: &JointDist, b: &JointDist) -> Result<JointDist> {
    if a.kind != b.kind {
        return Err(Error::KindMismatch(format!("{:?} vs {:?}", a.kind, b.kind)));
    }
    let rows = a.rows + b.rows - 1;
    let cols = a.cols + b.cols - 1;
    let mut d = JointDist::zeros(rows, cols, a.kind);
    for i in 0..a.rows {
        for j in 0..a.cols {
            let x = a.get(i, j);
            if x == 0.0 {
                continue;
            }
            for k in 0..b.rows {
                let base = (i + k) * cols + j;
                let brow = b.row(k);
                for (l, &y) in brow.iter().enumerate() {
                    d.table[base + l] += x * y;
                }
            }
        }
    }
    d.tail_mass = a.tail_mass + b.tail_mass - a.tail_mass * b.tail_mass;
    Ok(d)
}

/// `n`-fold self-convolution by binary exponentiation. After every product,
/// trailing rows/columns with mass at most `trim` are moved into the tail.
pub fn convolve_power(d: &JointDist, n: usize, trim: f64) -> Result<JointDist> {
    if n == 0 {
        return Ok(JointDist::delta(0, 0, d.kind));
    }
    let mut base = d.clone();
    let mut acc: Option<JointDist> = None;
    let mut k = n;
    loop {
        if k & 1 == 1 {
            let mut next = match &acc {
                None => base.clone(),
                Some(a) => convolve_joint(a, &base)?,
            };
            next.trim(trim);
            acc = Some(next);
        }
        k >>= 1;
        if k == 0 {
            break;
        }
        base = convolve_joint(&base, &base)?;
        base.trim(trim);
    }
    Ok(acc.expect("n >= 1"))
}

/// One-dimensional convolution of marginals.
pub fn convolve_marginal(a: &MarginalDist, b: &MarginalDist) -> MarginalDist {
    let mut probs = vec![0.0; a.probs.len() + b.probs.len() - 1];
    for (i, &x) in a.probs.iter().enumerate() {
        if x == 0.0 {
            continue;
        }
        for (j, &y) in b.probs.iter().enumerate() {
            probs[i + j] += x * y;
        }
    }
    MarginalDist { probs, tail_mass: a.tail_mass + b.tail_mass - a.tail_mass * b.tail_mass, kind: a.kind }
}

fn trim_marginal(d: &mut MarginalDist, eps: f64) {
    while d.probs.len() > 1 && *d.probs.last().unwrap() <= eps {
        d.tail_mass += d.probs.pop().unwrap();
    }
}

/// `n`-fold self-convolution of a marginal with tail trimming.
pub fn marginal_power(d: &MarginalDist, n: usize, trim: f64) -> MarginalDist {
    let mut acc = MarginalDist::delta(0, d.kind);
    let mut base = d.clone();
    let mut k = n;
    while k > 0 {
        if k & 1 == 1 {
            acc = convolve_marginal(&acc, &base);
            trim_marginal(&mut acc, trim);
        }
        k >>= 1;
        if k > 0 {
            base = convolve_marginal(&base, &base);
            trim_marginal(&mut base, trim);
        }
    }
    acc
}
