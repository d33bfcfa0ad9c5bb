//! Joint quasi-distributions of integrated intensities on a rectangular grid.
//!
//! P(W_s, W_i) = sum p(n_s, n_i) A_{n_s}(W_s) A_{n_i}(W_i) with the per-arm factor
//! A_n(W) = 2/(1-s) exp(-2W/(1-s)) r^n L_n(x), r = (s+1)/(s-1), x = 4W/(1-s^2).
//! Each factor is assembled in the log domain from a rescaled Laguerre recurrence.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{invalid, Error, Result};
use crate::model::{JointDist, Kind};
use crate::moments::{intensity_moments, to_s_ordered};

pub const DEFAULT_STEPS: usize = 256;
const SD_SPAN: f64 = 10.0;
/// Edge-term share of max |P| above which the series is flagged.
pub const EDGE_TOLERANCE: f64 = 1e-3;
/// Largest admissible rounding error of the summed terms, in units of the
/// mean density 1/(w_max_s w_max_i) of a unit mass spread over the grid.
pub const CANCELLATION_TOLERANCE: f64 = 1e-3;
/// Largest admissible deviation of the grid mass from the input mass.
pub const MASS_TOLERANCE: f64 = 1e-2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub steps: usize,
    pub w_max_s: Option<f64>,
    pub w_max_i: Option<f64>,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec { steps: DEFAULT_STEPS, w_max_s: None, w_max_i: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntensityGrid {
    pub s: f64,
    pub w_max_s: f64,
    pub w_max_i: f64,
    pub steps: usize,
    /// Row-major, signal index first; sampled at cell centers.
    pub values: Vec<f64>,
    /// Largest support-edge contribution relative to max |P|.
    pub edge_ratio: f64,
    /// Largest sum of absolute terms times the grid area.
    pub cancellation_ratio: f64,
    pub divergent: bool,
}

impl IntensityGrid {
    pub fn step_s(&self) -> f64 {
        self.w_max_s / self.steps as f64
    }

    pub fn step_i(&self) -> f64 {
        self.w_max_i / self.steps as f64
    }

    pub fn center_s(&self, j: usize) -> f64 {
        (j as f64 + 0.5) * self.step_s()
    }

    pub fn center_i(&self, j: usize) -> f64 {
        (j as f64 + 0.5) * self.step_i()
    }

    #[inline]
    pub fn get(&self, js: usize, ji: usize) -> f64 {
        self.values[js * self.steps + ji]
    }

    pub fn min_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Values e^{-x/2} L_n(x) for n = 0..=n_max as (ln|v|, sign).
pub fn log_damped_laguerre(n_max: usize, x: f64) -> Vec<(f64, f64)> {
    const BIG: f64 = 1e100;
    let mut out = Vec::with_capacity(n_max + 1);
    let mut ls = -x / 2.0;
    let push = |out: &mut Vec<(f64, f64)>, v: f64, ls: f64| {
        if v == 0.0 {
            out.push((f64::NEG_INFINITY, 0.0));
        } else {
            out.push((v.abs().ln() + ls, v.signum()));
        }
    };
    let (mut a, mut b) = (1.0f64, 1.0 - x);
    push(&mut out, a, ls);
    if n_max == 0 {
        return out;
    }
    push(&mut out, b, ls);
    for n in 1..n_max {
        let nf = n as f64;
        let mut c = ((2.0 * nf + 1.0 - x) * b - nf * a) / (nf + 1.0);
        if c.abs() > BIG || b.abs() > BIG {
            b /= BIG;
            c /= BIG;
            ls += BIG.ln();
        }
        push(&mut out, c, ls);
        a = b;
        b = c;
    }
    out
}

/// e^{-x/2} L_n(x) in plain f64.
pub fn damped_laguerre(n_max: usize, x: f64) -> Vec<f64> {
    log_damped_laguerre(n_max, x).into_iter().map(|(l, sg)| sg * l.exp()).collect()
}

/// Per-arm factors A_n(W) for n = 0..=n_max.
pub fn arm_factors(n_max: usize, w: f64, s: f64) -> Vec<f64> {
    if s == -1.0 {
        return (0..=n_max)
            .map(|n| {
                if w == 0.0 {
                    (n == 0) as u8 as f64
                } else {
                    (-w + n as f64 * w.ln() - ln_gamma(n as f64 + 1.0)).exp()
                }
            })
            .collect();
    }
    let x = 4.0 * w / (1.0 - s * s);
    let r = (s + 1.0) / (s - 1.0);
    let pre = (2.0 / (1.0 - s)).ln();
    // exp(-2W/(1-s)) = exp(-x/2) exp(-x s/2)
    let extra = -x * s / 2.0;
    let lr = r.abs().ln();
    log_damped_laguerre(n_max, x)
        .into_iter()
        .enumerate()
        .map(|(n, (l, sg))| {
            if sg == 0.0 {
                return 0.0;
            }
            let rs = if r < 0.0 && n % 2 == 1 { -1.0 } else { 1.0 };
            let lrn = if n == 0 { 0.0 } else { n as f64 * lr };
            rs * sg * (pre + l + extra + lrn).exp()
        })
        .collect()
}

fn default_w_max(p: &JointDist, s: f64) -> Result<(f64, f64)> {
    let w = to_s_ordered(&intensity_moments(p, 2)?, s)?;
    let span = |m1: f64, m2: f64| m1 + SD_SPAN * (m2 - m1 * m1).max(0.0).sqrt();
    Ok((span(w.get(1, 0), w.get(2, 0)), span(w.get(0, 1), w.get(0, 2))))
}

/// Evaluates the quasi-distribution of a photon-number distribution.
pub fn quasi_distribution(p: &JointDist, s: f64, spec: GridSpec) -> Result<IntensityGrid> {
    if !(s < 1.0) {
        return invalid(format!("ordering parameter must be < 1, got {s}"));
    }
    if p.kind != Kind::Photon {
        return Err(Error::KindMismatch("quasi-distributions need a photon-number distribution".into()));
    }
    if spec.steps == 0 {
        return invalid("grid needs at least one step");
    }
    let (ds, di) = default_w_max(p, s)?;
    let w_max_s = spec.w_max_s.unwrap_or(ds);
    let w_max_i = spec.w_max_i.unwrap_or(di);
    if !(w_max_s > 0.0 && w_max_i > 0.0) {
        return invalid("grid extent must be positive");
    }
    let n = spec.steps;
    let (rows, cols) = (p.rows(), p.cols());
    let (hs, hi) = (w_max_s / n as f64, w_max_i / n as f64);
    // factor matrices: [grid][n]
    let fs: Vec<Vec<f64>> = (0..n).into_par_iter().map(|j| arm_factors(rows - 1, (j as f64 + 0.5) * hs, s)).collect();
    let fi: Vec<Vec<f64>> = (0..n).into_par_iter().map(|j| arm_factors(cols - 1, (j as f64 + 0.5) * hi, s)).collect();
    // t[a][ji] = sum_b p(a,b) A_b(W_i)
    let (t, t_abs): (Vec<Vec<f64>>, Vec<Vec<f64>>) = (0..rows)
        .into_par_iter()
        .map(|a| {
            let row = p.row(a);
            let v = fi.iter().map(|f| row.iter().zip(f).map(|(x, y)| x * y).sum()).collect();
            let va = fi.iter().map(|f| row.iter().zip(f).map(|(x, y)| (x * y).abs()).sum()).collect();
            (v, va)
        })
        .unzip();
    let (values, stats): (Vec<Vec<f64>>, Vec<(f64, f64)>) = (0..n)
        .into_par_iter()
        .map(|js| {
            let f = &fs[js];
            let mut out = vec![0.0; n];
            let mut abs_sum = vec![0.0; n];
            let mut edge = 0.0f64;
            for (a, (ta, tb)) in t.iter().zip(&t_abs).enumerate() {
                let fa = f[a];
                if fa == 0.0 {
                    continue;
                }
                for ji in 0..n {
                    out[ji] += fa * ta[ji];
                    abs_sum[ji] += fa.abs() * tb[ji];
                }
            }
            let col_s: f64 = (0..rows).map(|a| f[a] * p.get(a, cols - 1)).sum();
            // a single-row or single-column support has no truncated edge
            for ji in 0..n {
                if rows > 1 {
                    edge = edge.max((f[rows - 1] * t[rows - 1][ji]).abs());
                }
                if cols > 1 {
                    edge = edge.max((col_s * fi[ji][cols - 1]).abs());
                }
            }
            let big = abs_sum.iter().copied().fold(0.0, f64::max);
            (out, (edge, big))
        })
        .unzip();
    let values: Vec<f64> = values.into_iter().flatten().collect();
    let peak = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let (edge, big) = stats.into_iter().fold((0.0f64, 0.0f64), |(e, b), (x, y)| (e.max(x), b.max(y)));
    let ratio = |x: f64| if peak > 0.0 { x / peak } else { f64::INFINITY };
    let edge_ratio = ratio(edge);
    let cancellation_ratio = big * w_max_s * w_max_i;
    let finite = values.iter().all(|v| v.is_finite());
    let mut g = IntensityGrid { s, w_max_s, w_max_i, steps: n, values, edge_ratio, cancellation_ratio, divergent: false };
    // oscillations finer than the grid show up as a wrong midpoint mass
    let total = p.total();
    let mass_off = (grid_moments(&g, 0, 0) - total).abs() > MASS_TOLERANCE * total.max(f64::MIN_POSITIVE);
    g.divergent = !finite
        || mass_off
        || edge_ratio > EDGE_TOLERANCE
        || cancellation_ratio * f64::EPSILON > CANCELLATION_TOLERANCE;
    Ok(g)
}

/// Midpoint-rule moment of the grid.
pub fn grid_moments(g: &IntensityGrid, k: u32, l: u32) -> f64 {
    let (hs, hi) = (g.step_s(), g.step_i());
    let wi: Vec<f64> = (0..g.steps).map(|j| g.center_i(j).powi(l as i32)).collect();
    let mut acc = 0.0;
    for js in 0..g.steps {
        let ws = g.center_s(js).powi(k as i32);
        let row = &g.values[js * g.steps..(js + 1) * g.steps];
        acc += ws * row.iter().zip(&wi).map(|(v, w)| v * w).sum::<f64>();
    }
    acc * hs * hi
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{joint_twb_auto, TwbParams};

    #[test]
    fn vacuum_value_at_origin() {
        let g = quasi_distribution(&JointDist::delta(0, 0, Kind::Photon), 0.0, GridSpec::default()).unwrap();
        let w = g.center_s(0) + g.center_i(0);
        assert!((g.get(0, 0) - 4.0 * (-2.0 * w).exp()).abs() < 1e-12);
        assert!(!g.divergent);
    }

    #[test]
    fn vacuum_normalization_any_s() {
        for s in [-1.0, -0.5, 0.0, 0.5, 0.8] {
            let g = quasi_distribution(&JointDist::delta(0, 0, Kind::Photon), s, GridSpec::default()).unwrap();
            assert!((grid_moments(&g, 0, 0) - 1.0).abs() < 1e-3, "s={s}");
            assert!((grid_moments(&g, 1, 0) - (1.0 - s) / 2.0).abs() < 1e-3, "s={s}");
        }
    }

    #[test]
    fn laguerre_low_orders() {
        let x = 1.7;
        let v = damped_laguerre(3, x);
        let e = (-x / 2.0f64).exp();
        assert!((v[2] - e * (x * x - 4.0 * x + 2.0) / 2.0).abs() < 1e-14);
        assert!((v[3] - e * (-x.powi(3) + 9.0 * x * x - 18.0 * x + 6.0) / 6.0).abs() < 1e-14);
    }

    #[test]
    fn antinormal_limit_is_continuous() {
        let a = arm_factors(6, 1.3, -1.0);
        let b = arm_factors(6, 1.3, -1.0 + 1e-7);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-5, "{x} {y}");
        }
    }

    #[test]
    fn coarse_grid_flagged() {
        let d = joint_twb_auto(&TwbParams::new(3.77, 1.0, 1.0, 0.27, 0.0, 0.0)).unwrap();
        let spec = |steps| GridSpec { steps, ..Default::default() };
        assert!(quasi_distribution(&d, 0.36, spec(160)).unwrap().divergent);
        assert!(!quasi_distribution(&d, 0.0, spec(160)).unwrap().divergent);
    }

    #[test]
    fn symmetric_input_symmetric_grid() {
        let d = joint_twb_auto(&TwbParams::new(1.0, 1.0, 1.0, 0.5, 0.2, 0.2)).unwrap();
        let g = quasi_distribution(&d, 0.0, GridSpec { steps: 64, ..Default::default() }).unwrap();
        for a in 0..64 {
            for b in 0..64 {
                assert!((g.get(a, b) - g.get(b, a)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_bad_input() {
        let d = JointDist::delta(0, 0, Kind::Photon);
        assert!(quasi_distribution(&d, 1.0, GridSpec::default()).is_err());
        let c = JointDist::delta(0, 0, Kind::Photocount);
        assert!(matches!(quasi_distribution(&c, 0.0, GridSpec::default()), Err(Error::KindMismatch(_))));
    }
}
