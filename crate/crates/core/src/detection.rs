//! Detection matrices of N-pixel on/off detectors and photocount forward models.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use num_bigint::BigInt;
use num_traits::{ToPrimitive, Zero};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::model::{
    joint_twb_auto, marginal_power, convolve_marginal, JointDist, Kind, MarginalDist, TwbParams,
};

/// Column-sum tolerance for a valid matrix.
pub const COLUMN_SUM_TOL: f64 = 1e-10;
/// Most negative entry accepted before clamping.
pub const NEGATIVE_TOL: f64 = -1e-12;
/// Bound on any entry left unevaluated above the dark-count reach.
pub const DARK_CUT: f64 = 1e-40;
/// Per-step trimming threshold in the compound convolution.
pub const COMPOUND_TRIM: f64 = 1e-17;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorSpec {
    pub eta: f64,
    pub dark: f64,
    pub pixels: usize,
}

impl DetectorSpec {
    pub fn new(eta: f64, dark: f64, pixels: usize) -> Self {
        DetectorSpec { eta, dark, pixels }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return invalid(format!("eta must lie in (0,1], got {}", self.eta));
        }
        if !(self.dark >= 0.0 && self.dark < 1.0) {
            return invalid(format!("dark must lie in [0,1), got {}", self.dark));
        }
        if self.pixels == 0 {
            return invalid("pixels must be >= 1");
        }
        Ok(())
    }

    pub fn with_pixels(&self, pixels: usize) -> Self {
        DetectorSpec { pixels, ..*self }
    }

    /// Probability of no click for `n` incident photons on one pixel.
    pub fn no_click(&self, n: usize) -> f64 {
        (1.0 - self.dark) * (1.0 - self.eta).powi(n as i32)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Alternating binomial sum in exact fixed-point integer arithmetic.
    ExactSum,
    /// Pixel-occupancy recurrence over incident photons, positive terms only.
    Recurrence,
}

#[derive(Debug, Clone, Copy)]
pub struct MatrixOptions {
    pub method: Method,
    /// Starting precision; `None` uses `max(256, ceil(2.5 N))`.
    pub precision_bits: Option<u32>,
    pub max_precision_bits: u32,
}

impl Default for MatrixOptions {
    fn default() -> Self {
        MatrixOptions { method: Method::ExactSum, precision_bits: None, max_precision_bits: 16384 }
    }
}

pub fn default_precision_bits(pixels: usize) -> u32 {
    256u32.max((2.5 * pixels as f64).ceil() as u32)
}

/// T[c][n]: probability of `c` fired pixels given `n` incident photons.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionMatrix {
    entries: Vec<f64>,
    n_max: usize,
    pub spec: DetectorSpec,
    pub precision_bits: u32,
    pub method: Method,
}

impl DetectionMatrix {
    pub fn from_parts(
        spec: DetectorSpec,
        n_max: usize,
        entries: Vec<f64>,
        precision_bits: u32,
        method: Method,
    ) -> Result<Self> {
        if entries.len() != (spec.pixels + 1) * (n_max + 1) {
            return invalid("matrix payload size does not match header");
        }
        Ok(DetectionMatrix { entries, n_max, spec, precision_bits, method })
    }

    pub fn pixels(&self) -> usize {
        self.spec.pixels
    }

    pub fn n_max(&self) -> usize {
        self.n_max
    }

    #[inline]
    pub fn get(&self, c: usize, n: usize) -> f64 {
        if c > self.spec.pixels || n > self.n_max {
            return 0.0;
        }
        self.entries[c * (self.n_max + 1) + n]
    }

    /// Row `c` over n = 0..=n_max.
    pub fn row(&self, c: usize) -> &[f64] {
        let w = self.n_max + 1;
        &self.entries[c * w..(c + 1) * w]
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn column_sum(&self, n: usize) -> f64 {
        (0..=self.spec.pixels).map(|c| self.get(c, n)).sum()
    }

    fn validate(&self) -> (bool, f64) {
        let mut worst = 0.0f64;
        let mut ok = true;
        for n in 0..=self.n_max {
            let s = self.column_sum(n);
            worst = worst.max((s - 1.0).abs());
            for c in 0..=self.spec.pixels {
                let v = self.get(c, n);
                if !v.is_finite() || v < NEGATIVE_TOL {
                    ok = false;
                    worst = f64::INFINITY;
                }
            }
        }
        (ok && worst <= COLUMN_SUM_TOL, worst)
    }

    fn clamp(&mut self) {
        for v in &mut self.entries {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
    }
}

pub fn detection_matrix(spec: &DetectorSpec, n_max: usize) -> Result<DetectionMatrix> {
    detection_matrix_with(spec, n_max, &MatrixOptions::default())
}

pub fn detection_matrix_with(spec: &DetectorSpec, n_max: usize, opts: &MatrixOptions) -> Result<DetectionMatrix> {
    spec.validate()?;
    match opts.method {
        Method::Recurrence => {
            let mut m = recurrence_matrix(spec, n_max);
            let (ok, worst) = m.validate();
            if !ok {
                return Err(Error::PrecisionExhausted { bits: 53, worst });
            }
            m.clamp();
            Ok(m)
        }
        Method::ExactSum => {
            let mut bits = opts.precision_bits.unwrap_or_else(|| default_precision_bits(spec.pixels));
            loop {
                let mut m = exact_matrix(spec, n_max, bits);
                let (ok, worst) = m.validate();
                if ok {
                    m.clamp();
                    return Ok(m);
                }
                if bits >= opts.max_precision_bits {
                    return Err(Error::PrecisionExhausted { bits, worst });
                }
                bits = (bits * 2).min(opts.max_precision_bits);
            }
        }
    }
}

type CacheKey = (u64, u64, usize, usize, Method);

fn cache() -> &'static Mutex<HashMap<CacheKey, Arc<DetectionMatrix>>> {
    static CACHE: OnceLock<Mutex<HashMap<CacheKey, Arc<DetectionMatrix>>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

/// Memoized matrix. A cached matrix with larger `n_max` is not reused.
pub fn cached_matrix(spec: &DetectorSpec, n_max: usize, method: Method) -> Result<Arc<DetectionMatrix>> {
    let key = (spec.eta.to_bits(), spec.dark.to_bits(), spec.pixels, n_max, method);
    if let Some(m) = cache().lock().unwrap().get(&key) {
        return Ok(m.clone());
    }
    let opts = MatrixOptions { method, ..Default::default() };
    let m = Arc::new(detection_matrix_with(spec, n_max, &opts)?);
    cache().lock().unwrap().insert(key, m.clone());
    Ok(m)
}

// fixed-point helpers: a value x is carried as floor(x * 2^p)

fn fixed_from_f64(x: f64, p: u32) -> BigInt {
    debug_assert!(x >= 0.0 && x.is_finite());
    if x == 0.0 {
        return BigInt::zero();
    }
    let bits = x.to_bits();
    let exp = ((bits >> 52) & 0x7ff) as i64;
    let frac = bits & ((1u64 << 52) - 1);
    let (mant, e) = if exp == 0 { (frac, -1074) } else { (frac | (1u64 << 52), exp - 1075) };
    let shift = p as i64 + e;
    if shift >= 0 {
        BigInt::from(mant) << (shift as usize)
    } else if -shift < 64 {
        BigInt::from(mant >> (-shift) as u32)
    } else {
        BigInt::zero()
    }
}

#[inline]
fn fixed_mul(a: &BigInt, b: &BigInt, p: u32) -> BigInt {
    (a * b) >> (p as usize)
}

fn fixed_pow(x: &BigInt, mut n: usize, p: u32) -> BigInt {
    let mut acc = BigInt::from(1u8) << (p as usize);
    let mut base = x.clone();
    while n > 0 {
        if n & 1 == 1 {
            acc = fixed_mul(&acc, &base, p);
        }
        n >>= 1;
        if n > 0 {
            base = fixed_mul(&base, &base, p);
        }
    }
    acc
}

fn ldexp(mut x: f64, mut e: i64) -> f64 {
    while e > 1000 {
        x *= 2f64.powi(1000);
        e -= 1000;
    }
    while e < -1000 {
        x *= 2f64.powi(-1000);
        e += 1000;
    }
    x * 2f64.powi(e as i32)
}

fn fixed_to_f64(v: &BigInt, p: u32) -> f64 {
    let bits = v.bits();
    // keep the leading 64 bits so small entries retain full relative precision
    let sh = bits.saturating_sub(64);
    let top = (v >> sh as usize).to_f64().unwrap_or(f64::NAN);
    ldexp(top, sh as i64 - p as i64)
}

/// Smallest k with C(N,k) D^k <= DARK_CUT: at most that many pixels beyond
/// the photon number can fire, up to the bound.
fn dark_reach(pixels: usize, dark: f64) -> usize {
    if dark == 0.0 {
        return 0;
    }
    let lim = DARK_CUT.ln();
    let ld = dark.ln();
    let mut lc = 0.0;
    for k in 0..=pixels {
        if lc + k as f64 * ld <= lim {
            return k;
        }
        lc += ((pixels - k) as f64 / (k + 1) as f64).ln();
    }
    pixels
}

/// Rows of the alternating sum for column `n`:
/// T(c,n) = C(N,c) sum_j (-1)^(c-j) C(c,j) g(j),  g(j) = (1-D)^(N-j) (1-eta (N-j)/N)^n,
/// i.e. C(N,c) times the c-th forward difference of g at 0.
fn exact_column(
    binom: &[BigInt],
    ypow: &[BigInt],
    xpow: &[BigInt],
    c_hi: usize,
    pixels: usize,
    p: u32,
) -> Vec<f64> {
    let mut col = vec![0.0; pixels + 1];
    let mut v: Vec<BigInt> = (0..=c_hi).map(|j| fixed_mul(&ypow[pixels - j], &xpow[j], p)).collect();
    col[0] = fixed_to_f64(&v[0], p);
    for k in 1..=c_hi {
        // after level k, v[j] = (-1)^k Delta^k g(j)
        for j in 0..=(c_hi - k) {
            let (lo, hi) = v.split_at_mut(j + 1);
            lo[j] -= &hi[0];
        }
        let mut t = &binom[k] * &v[0];
        if k % 2 == 1 {
            t = -t;
        }
        col[k] = fixed_to_f64(&t, p);
    }
    col
}

fn exact_matrix(spec: &DetectorSpec, n_max: usize, p: u32) -> DetectionMatrix {
    let nn = spec.pixels;
    let one = BigInt::from(1u8) << (p as usize);
    let y = &one - fixed_from_f64(spec.dark, p);
    let mut ypow = Vec::with_capacity(nn + 1);
    ypow.push(one.clone());
    for m in 1..=nn {
        let next = fixed_mul(&ypow[m - 1], &y, p);
        ypow.push(next);
    }
    let eta = fixed_from_f64(spec.eta, p);
    let reach = dark_reach(nn, spec.dark);
    let j_max = nn.min(n_max + reach);
    let x: Vec<BigInt> = (0..=j_max)
        .map(|j| &one - (&eta * BigInt::from(nn - j)) / BigInt::from(nn))
        .collect();
    let mut binom = Vec::with_capacity(nn + 1);
    binom.push(BigInt::from(1u8));
    for c in 0..nn {
        let next = &binom[c] * BigInt::from(nn - c) / BigInt::from(c + 1);
        binom.push(next);
    }

    const CHUNK: usize = 16;
    let starts: Vec<usize> = (0..=n_max).step_by(CHUNK).collect();
    let cols: Vec<Vec<f64>> = starts
        .par_iter()
        .flat_map_iter(|&n0| {
            let n1 = (n0 + CHUNK).min(n_max + 1);
            let mut xpow: Vec<BigInt> = x.iter().map(|xj| fixed_pow(xj, n0, p)).collect();
            let mut out = Vec::with_capacity(n1 - n0);
            for n in n0..n1 {
                let c_hi = nn.min(n + reach);
                out.push(exact_column(&binom, &ypow, &xpow, c_hi, nn, p));
                if n + 1 < n1 {
                    for (xp, xj) in xpow.iter_mut().zip(&x) {
                        *xp = fixed_mul(xp, xj, p);
                    }
                }
            }
            out
        })
        .collect();

    let w = n_max + 1;
    let mut entries = vec![0.0; (nn + 1) * w];
    for (n, col) in cols.iter().enumerate() {
        for (c, v) in col.iter().enumerate() {
            entries[c * w + n] = *v;
        }
    }
    DetectionMatrix { entries, n_max, spec: *spec, precision_bits: p, method: Method::ExactSum }
}

fn binomial_pmf(n: usize, q: f64) -> Vec<f64> {
    let mut out = vec![0.0; n + 1];
    if q == 0.0 {
        out[0] = 1.0;
        return out;
    }
    let lq = q.ln();
    let l1q = (-q).ln_1p();
    let mut lc = 0.0;
    for (k, o) in out.iter_mut().enumerate() {
        *o = (lc + k as f64 * lq + (n - k) as f64 * l1q).exp();
        if k < n {
            lc += ((n - k) as f64 / (k + 1) as f64).ln();
        }
    }
    out
}

fn recurrence_matrix(spec: &DetectorSpec, n_max: usize) -> DetectionMatrix {
    let nn = spec.pixels;
    let nf = nn as f64;
    let eta = spec.eta;
    let w = n_max + 1;
    let mut entries = vec![0.0; (nn + 1) * w];
    let mut col = binomial_pmf(nn, spec.dark);
    let stay: Vec<f64> = (0..=nn).map(|c| 1.0 - eta * (nn - c) as f64 / nf).collect();
    let fire: Vec<f64> = (0..=nn).map(|c| eta * (nn - c) as f64 / nf).collect();
    for n in 0..=n_max {
        for c in 0..=nn {
            entries[c * w + n] = col[c];
        }
        let mut next = vec![0.0; nn + 1];
        for c in 0..=nn {
            let mut v = stay[c] * col[c];
            if c > 0 {
                v += fire[c - 1] * col[c - 1];
            }
            next[c] = v;
        }
        col = next;
    }
    DetectionMatrix { entries, n_max, spec: *spec, precision_bits: 53, method: Method::Recurrence }
}

/// Photocount distribution of a photon-number distribution seen by two detectors.
pub fn forward_photocounts(p: &JointDist, spec_s: &DetectorSpec, spec_i: &DetectorSpec) -> Result<JointDist> {
    let ts = cached_matrix(spec_s, p.rows() - 1, Method::ExactSum)?;
    let ti = cached_matrix(spec_i, p.cols() - 1, Method::ExactSum)?;
    forward_with(p, &ts, &ti)
}

/// Forward model with explicit matrices.
pub fn forward_with(p: &JointDist, ts: &DetectionMatrix, ti: &DetectionMatrix) -> Result<JointDist> {
    if p.kind != Kind::Photon {
        return Err(Error::KindMismatch("forward model needs a photon distribution".into()));
    }
    if ts.n_max() + 1 < p.rows() || ti.n_max() + 1 < p.cols() {
        return Err(Error::SupportMismatch("matrix photon range smaller than distribution".into()));
    }
    let (ns, ni) = (p.rows(), p.cols());
    let (cs, ci) = (ts.pixels() + 1, ti.pixels() + 1);
    // tmp[n_s][c_i] = sum_ni p(n_s,n_i) T_i(c_i,n_i)
    let mut tmp = vec![0.0; ns * ci];
    for a in 0..ns {
        let prow = p.row(a);
        for c in 0..ci {
            let trow = &ti.row(c)[..ni];
            tmp[a * ci + c] = prow.iter().zip(trow).map(|(x, y)| x * y).sum();
        }
    }
    let mut f = JointDist::zeros(cs, ci, Kind::Photocount);
    for c in 0..cs {
        let trow = &ts.row(c)[..ns];
        for (a, &t) in trow.iter().enumerate() {
            if t == 0.0 {
                continue;
            }
            for b in 0..ci {
                let v = f.get(c, b) + t * tmp[a * ci + b];
                f.set(c, b, v);
            }
        }
    }
    f.tail_mass = p.tail_mass;
    f.trim(0.0);
    Ok(f)
}

/// Click probabilities of one window, [no s, s] x [no i, i], from generating functions.
pub fn window_probabilities(params: &TwbParams, spec_s: &DetectorSpec, spec_i: &DetectorSpec) -> Result<[[f64; 2]; 2]> {
    params.validate()?;
    spec_s.validate()?;
    spec_i.validate()?;
    let g = |m: f64, b: f64, z: f64| (-m * (b * (1.0 - z)).ln_1p()).exp();
    let zs = 1.0 - spec_s.eta;
    let zi = 1.0 - spec_i.eta;
    let p00 = (1.0 - spec_s.dark)
        * (1.0 - spec_i.dark)
        * g(params.m_p, params.b_p, zs * zi)
        * g(params.m_s, params.b_s, zs)
        * g(params.m_i, params.b_i, zi);
    let s0 = (1.0 - spec_s.dark) * g(params.m_p, params.b_p, zs) * g(params.m_s, params.b_s, zs);
    let i0 = (1.0 - spec_i.dark) * g(params.m_p, params.b_p, zi) * g(params.m_i, params.b_i, zi);
    let p01 = s0 - p00;
    let p10 = i0 - p00;
    let p11 = 1.0 - s0 - i0 + p00;
    Ok([[p00, p01], [p10, p11]])
}

/// Window photocount distribution as a 2x2 table.
pub fn constituting_photocounts(params: &TwbParams, spec_s: &DetectorSpec, spec_i: &DetectorSpec) -> Result<JointDist> {
    let w = window_probabilities(params, spec_s, spec_i)?;
    JointDist::new(2, 2, vec![w[0][0], w[0][1], w[1][0], w[1][1]], 0.0, Kind::Photocount)
}

fn window_kernel(f_w: &JointDist) -> Result<[[f64; 2]; 2]> {
    if f_w.kind != Kind::Photocount {
        return Err(Error::KindMismatch("compound model needs a photocount table".into()));
    }
    for a in 0..f_w.rows() {
        for b in 0..f_w.cols() {
            if (a > 1 || b > 1) && f_w.get(a, b) != 0.0 {
                return Err(Error::SupportViolation(format!("mass at ({a},{b}) outside {{0,1}}^2")));
            }
        }
    }
    Ok([[f_w.get(0, 0), f_w.get(0, 1)], [f_w.get(1, 0), f_w.get(1, 1)]])
}

fn compound_step(cur: &JointDist, k: &[[f64; 2]; 2]) -> JointDist {
    let (r, c) = (cur.rows(), cur.cols());
    let mut next = JointDist::zeros(r + 1, c + 1, Kind::Photocount);
    for a in 0..r {
        for (b, &v) in cur.row(a).iter().enumerate() {
            if v == 0.0 {
                continue;
            }
            next.set(a, b, next.get(a, b) + v * k[0][0]);
            next.set(a, b + 1, next.get(a, b + 1) + v * k[0][1]);
            next.set(a + 1, b, next.get(a + 1, b) + v * k[1][0]);
            next.set(a + 1, b + 1, next.get(a + 1, b + 1) + v * k[1][1]);
        }
    }
    next.tail_mass = cur.tail_mass;
    next.trim(COMPOUND_TRIM);
    next
}

/// N-fold convolution of a single-window photocount table.
pub fn compound_photocounts(f_w: &JointDist, n: usize) -> Result<JointDist> {
    Ok(compound_photocounts_series(f_w, &[n])?.pop().unwrap())
}

/// Compound tables for every N in `ns` (ascending) from one pass of convolutions.
pub fn compound_photocounts_series(f_w: &JointDist, ns: &[usize]) -> Result<Vec<JointDist>> {
    if ns.windows(2).any(|w| w[0] > w[1]) {
        return invalid("group sizes must be ascending");
    }
    let k = window_kernel(f_w)?;
    let mut cur = JointDist::delta(0, 0, Kind::Photocount);
    cur.tail_mass = 0.0;
    let mut done = 0;
    let mut out = Vec::with_capacity(ns.len());
    for &n in ns {
        while done < n {
            cur = compound_step(&cur, &k);
            done += 1;
        }
        let mut d = cur.clone();
        d.tail_mass = cur.tail_mass + f_w.tail_mass * n as f64;
        out.push(d);
    }
    Ok(out)
}

fn single_pixel_arm_weights(p_w: &JointDist, spec_s: &DetectorSpec) -> (MarginalDist, MarginalDist) {
    let t = p_w.total();
    let mut w0 = vec![0.0; p_w.cols()];
    let mut w1 = vec![0.0; p_w.cols()];
    for a in 0..p_w.rows() {
        let q0 = spec_s.no_click(a);
        for (b, &v) in p_w.row(a).iter().enumerate() {
            w0[b] += q0 * v / t;
            w1[b] += (1.0 - q0) * v / t;
        }
    }
    (
        MarginalDist { probs: w0, tail_mass: 0.0, kind: Kind::Photon },
        MarginalDist { probs: w1, tail_mass: 0.0, kind: Kind::Photon },
    )
}

/// Idler photon-number distribution over N windows given `c_s` signal clicks,
/// with the probability of the condition.
pub fn conditional_photon_dist_with_prob(
    p_w: &JointDist,
    spec_s: &DetectorSpec,
    c_s: usize,
    n: usize,
) -> Result<(MarginalDist, f64)> {
    spec_s.validate()?;
    if spec_s.pixels != 1 {
        return invalid("conditioning detector must have one pixel per window");
    }
    if p_w.kind != Kind::Photon {
        return Err(Error::KindMismatch("conditional model needs a photon distribution".into()));
    }
    if c_s > n {
        return invalid(format!("c_s = {c_s} exceeds N = {n}"));
    }
    let (w0, w1) = single_pixel_arm_weights(p_w, spec_s);
    let (s0, s1) = (w0.total(), w1.total());
    let lc = statrs::function::factorial::ln_binomial(n as u64, c_s as u64);
    let log_prob = lc
        + if c_s > 0 { c_s as f64 * s1.ln() } else { 0.0 }
        + if n > c_s { (n - c_s) as f64 * s0.ln() } else { 0.0 };
    let prob = log_prob.exp();
    if !(prob >= 1e-300) {
        return Err(Error::ZeroProbabilityCondition(prob));
    }
    let a = marginal_power(&w1.normalized(), c_s, COMPOUND_TRIM);
    let b = marginal_power(&w0.normalized(), n - c_s, COMPOUND_TRIM);
    let mut d = convolve_marginal(&a, &b);
    let t = d.total();
    for v in &mut d.probs {
        *v /= t;
    }
    d.tail_mass = 0.0;
    Ok((d, prob))
}

pub fn conditional_photon_dist(p_w: &JointDist, spec_s: &DetectorSpec, c_s: usize, n: usize) -> Result<MarginalDist> {
    conditional_photon_dist_with_prob(p_w, spec_s, c_s, n).map(|r| r.0)
}

/// Joint photocounts of one strong beam with N times the window's modes on N-pixel detectors.
pub fn genuine_pnrd_model(window: &TwbParams, spec_s: &DetectorSpec, spec_i: &DetectorSpec) -> Result<JointDist> {
    spec_s.validate()?;
    spec_i.validate()?;
    if spec_s.pixels != spec_i.pixels {
        return invalid("signal and idler detectors must have the same pixel count");
    }
    let p = joint_twb_auto(&window.scaled(spec_s.pixels))?;
    forward_photocounts(&p, spec_s, spec_i)
}
