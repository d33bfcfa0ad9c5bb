//! Maximum-likelihood (EM) reconstruction of photon-number distributions.

use serde::{Deserialize, Serialize};

use crate::detection::{cached_matrix, DetectionMatrix, DetectorSpec, Method};
use crate::error::{invalid, Error, Result};
use crate::ingest::JointHistogram;
use crate::model::{JointDist, Kind, MarginalDist};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmConfig {
    pub max_iters: usize,
    pub tol: f64,
    /// Photon-number truncation; `None` picks [`default_n_max`].
    pub n_max: Option<usize>,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig { max_iters: 10_000, tol: 1e-9, n_max: None }
    }
}

impl EmConfig {
    fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) || self.max_iters == 0 {
            return invalid("EM needs tol > 0 and max_iters >= 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmOutcome<T> {
    pub dist: T,
    pub iterations: usize,
    /// False when stopped by `max_iters`.
    pub converged: bool,
    pub max_change: f64,
    /// Log-likelihood of every iterate, starting with the initial guess.
    pub loglik: Vec<f64>,
}

impl<T> EmOutcome<T> {
    /// Largest decrease of the log-likelihood between consecutive iterates.
    pub fn worst_loglik_drop(&self) -> f64 {
        self.loglik.windows(2).map(|w| w[0] - w[1]).fold(0.0, f64::max)
    }
}

pub fn default_n_max(c_max: usize, eta_min: f64) -> usize {
    (3.0 * (c_max as f64 + 5.0) / eta_min).ceil() as usize
}

fn ll_tol(ll: f64) -> f64 {
    1e-12 * ll.abs().max(1.0)
}

/// Joint EM: p <- p * T_s^T (f / (T_s p T_i^T)) T_i.
pub fn em_joint(f: &JointDist, ts: &DetectionMatrix, ti: &DetectionMatrix, cfg: &EmConfig) -> Result<EmOutcome<JointDist>> {
    cfg.validate()?;
    let f = f.normalized();
    let (r, q) = (f.rows(), f.cols());
    if r > ts.pixels() + 1 || q > ti.pixels() + 1 {
        return Err(Error::SupportMismatch("histogram exceeds detector pixel range".into()));
    }
    let n_max = cfg
        .n_max
        .unwrap_or_else(|| default_n_max(r.max(q) - 1, ts.spec.eta.min(ti.spec.eta)));
    if ts.n_max() < n_max || ti.n_max() < n_max {
        return Err(Error::SupportMismatch(format!(
            "matrices cover n <= {}/{}, need {n_max}",
            ts.n_max(),
            ti.n_max()
        )));
    }
    let ns = n_max + 1;
    let a: Vec<f64> = (0..r).flat_map(|c| ts.row(c)[..ns].to_vec()).collect();
    let b: Vec<f64> = (0..q).flat_map(|c| ti.row(c)[..ns].to_vec()).collect();
    let mut bt = vec![0.0; ns * q];
    for c in 0..q {
        for n in 0..ns {
            bt[n * q + c] = b[c * ns + n];
        }
    }
    let fv = f.table().to_vec();
    let mut p = vec![1.0 / (ns * ns) as f64; ns * ns];
    let mut x = vec![0.0; ns * q];
    let mut qm = vec![0.0; r * q];
    let mut y = vec![0.0; ns * q];
    let mut loglik = Vec::new();
    let mut iterations = 0;
    let mut converged = false;
    let mut max_change = f64::INFINITY;

    let forward = |p: &[f64], x: &mut [f64], qm: &mut [f64]| {
        x.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..ns {
            let xr = &mut x[i * q..(i + 1) * q];
            for j in 0..ns {
                let pv = p[i * ns + j];
                if pv == 0.0 {
                    continue;
                }
                let br = &bt[j * q..(j + 1) * q];
                for c in 0..q {
                    xr[c] += pv * br[c];
                }
            }
        }
        qm.iter_mut().for_each(|v| *v = 0.0);
        for k in 0..r {
            let qr = &mut qm[k * q..(k + 1) * q];
            for i in 0..ns {
                let av = a[k * ns + i];
                if av == 0.0 {
                    continue;
                }
                let xr = &x[i * q..(i + 1) * q];
                for c in 0..q {
                    qr[c] += av * xr[c];
                }
            }
        }
        let mut ll = 0.0;
        for (fv, qv) in fv.iter().zip(qm.iter()) {
            if *fv > 0.0 {
                ll += fv * qv.ln();
            }
        }
        ll
    };

    loglik.push(forward(&p, &mut x, &mut qm));
    while iterations < cfg.max_iters {
        // ratio f / q, empty cells skipped
        for (qv, fv) in qm.iter_mut().zip(fv.iter()) {
            *qv = if *fv > 0.0 { fv / *qv } else { 0.0 };
        }
        y.iter_mut().for_each(|v| *v = 0.0);
        for k in 0..r {
            let rr = &qm[k * q..(k + 1) * q];
            for i in 0..ns {
                let av = a[k * ns + i];
                if av == 0.0 {
                    continue;
                }
                let yr = &mut y[i * q..(i + 1) * q];
                for c in 0..q {
                    yr[c] += av * rr[c];
                }
            }
        }
        max_change = 0.0;
        for i in 0..ns {
            let yr = &y[i * q..(i + 1) * q];
            let pr = &mut p[i * ns..(i + 1) * ns];
            let mut u = vec![0.0; ns];
            for c in 0..q {
                let yv = yr[c];
                if yv == 0.0 {
                    continue;
                }
                let brow = &b[c * ns..(c + 1) * ns];
                for j in 0..ns {
                    u[j] += yv * brow[j];
                }
            }
            for j in 0..ns {
                let nv = pr[j] * u[j];
                max_change = max_change.max((nv - pr[j]).abs());
                pr[j] = nv;
            }
        }
        iterations += 1;
        let ll = forward(&p, &mut x, &mut qm);
        debug_assert!(ll >= loglik[loglik.len() - 1] - ll_tol(ll), "EM log-likelihood decreased");
        loglik.push(ll);
        if max_change < cfg.tol {
            converged = true;
            break;
        }
    }
    let dist = JointDist::new(ns, ns, p, 0.0, Kind::Photon)?;
    Ok(EmOutcome { dist, iterations, converged, max_change, loglik })
}

/// Joint EM from a histogram, with memoized matrices of the N-pixel detectors.
pub fn em_histogram(
    h: &JointHistogram,
    spec_s: &DetectorSpec,
    spec_i: &DetectorSpec,
    cfg: &EmConfig,
) -> Result<EmOutcome<JointDist>> {
    let f = h.to_dist();
    let n = h.policy.n;
    let s = spec_s.with_pixels(n);
    let i = spec_i.with_pixels(n);
    let n_max = cfg
        .n_max
        .unwrap_or_else(|| default_n_max(f.rows().max(f.cols()) - 1, s.eta.min(i.eta)));
    let ts = cached_matrix(&s, n_max, Method::ExactSum)?;
    let ti = cached_matrix(&i, n_max, Method::ExactSum)?;
    em_joint(&f, &ts, &ti, &EmConfig { n_max: Some(n_max), ..*cfg })
}

/// One-dimensional EM for a conditional idler photocount distribution.
pub fn em_conditional(f: &MarginalDist, ti: &DetectionMatrix, cfg: &EmConfig) -> Result<EmOutcome<MarginalDist>> {
    cfg.validate()?;
    let f = f.normalized();
    let mut r = f.probs.len();
    while r > 1 && f.probs[r - 1] == 0.0 {
        r -= 1;
    }
    if r > ti.pixels() + 1 {
        return Err(Error::SupportMismatch("distribution exceeds detector pixel range".into()));
    }
    let n_max = cfg.n_max.unwrap_or_else(|| default_n_max(r - 1, ti.spec.eta));
    if ti.n_max() < n_max {
        return Err(Error::SupportMismatch(format!("matrix covers n <= {}, need {n_max}", ti.n_max())));
    }
    let ns = n_max + 1;
    let mut p = vec![1.0 / ns as f64; ns];
    let mut qv = vec![0.0; r];
    let ll_of = |p: &[f64], qv: &mut [f64]| {
        let mut ll = 0.0;
        for (c, q) in qv.iter_mut().enumerate() {
            *q = ti.row(c)[..ns].iter().zip(p).map(|(t, x)| t * x).sum();
            if f.probs[c] > 0.0 {
                ll += f.probs[c] * q.ln();
            }
        }
        ll
    };
    let mut loglik = vec![ll_of(&p, &mut qv)];
    let mut iterations = 0;
    let mut converged = false;
    let mut max_change = f64::INFINITY;
    while iterations < cfg.max_iters {
        let ratio: Vec<f64> = (0..r).map(|c| if f.probs[c] > 0.0 { f.probs[c] / qv[c] } else { 0.0 }).collect();
        max_change = 0.0;
        for (n, pv) in p.iter_mut().enumerate() {
            let u: f64 = (0..r).map(|c| ti.get(c, n) * ratio[c]).sum();
            let nv = *pv * u;
            max_change = max_change.max((nv - *pv).abs());
            *pv = nv;
        }
        iterations += 1;
        let ll = ll_of(&p, &mut qv);
        debug_assert!(ll >= loglik[loglik.len() - 1] - ll_tol(ll), "EM log-likelihood decreased");
        loglik.push(ll);
        if max_change < cfg.tol {
            converged = true;
            break;
        }
    }
    let dist = MarginalDist { probs: p, tail_mass: 0.0, kind: Kind::Photon };
    Ok(EmOutcome { dist, iterations, converged, max_change, loglik })
}

/// Idler photocount distribution in groups with `c_s` signal counts.
pub fn conditional_histogram(h: &JointHistogram, c_s: usize) -> Result<MarginalDist> {
    if c_s >= h.side() {
        return Err(Error::EmptyCondition(c_s));
    }
    let tot = h.column_total(c_s);
    if tot == 0 {
        return Err(Error::EmptyCondition(c_s));
    }
    let mut probs: Vec<f64> = (0..h.side()).map(|ci| h.get(c_s, ci) as f64 / tot as f64).collect();
    while probs.len() > 1 && *probs.last().unwrap() == 0.0 {
        probs.pop();
    }
    Ok(MarginalDist { probs, tail_mass: 0.0, kind: Kind::Photocount })
}
