//! Effective efficiencies, post-selected sub-Poissonian fields and
//! sub-shot-noise precision estimators.

use rayon::prelude::*;
use serde::Serialize;

use crate::detection::DetectorSpec;
use crate::error::{invalid, Error, Result};
use crate::ingest::{conditioned_sequences, grouped_counts, Arm, GroupingPolicy, JointHistogram};
use crate::model::TwbParams;
use crate::moments::{moments, Flavor, MomentTable};
use crate::reconstruct::conditional_histogram;
use crate::simulate::ClickStream;

pub const DEFAULT_MIN_EVENTS: u64 = 100;
/// Below this many full blocks a report is marked as partial coverage.
pub const MIN_BLOCKS: usize = 10;

/// eta_a^eff = cov(c_s, c_i) / <c_b> with b the complementary arm, from raw moments.
/// `dark_mean` is subtracted from the denominator first.
pub fn effective_efficiency_moments(m: &MomentTable, arm: Arm, dark_mean: f64) -> Result<f64> {
    if m.flavor != Flavor::Raw {
        return invalid("effective efficiency needs raw moments");
    }
    let cov = m.get(1, 1) - m.get(1, 0) * m.get(0, 1);
    let other = match arm {
        Arm::S => m.get(0, 1),
        Arm::I => m.get(1, 0),
    } - dark_mean;
    if !(other > 0.0) {
        return Err(Error::ZeroDenominator(format!("complementary mean {other}")));
    }
    Ok(cov / other)
}

/// Effective efficiency of `arm` from a photocount histogram. `subtract_dark` is the
/// complementary arm's detector; its per-group dark mean N*D*pixels is removed.
pub fn effective_efficiency(h: &JointHistogram, arm: Arm, subtract_dark: Option<&DetectorSpec>) -> Result<f64> {
    let m = moments(&h.to_dist(), 2)?;
    let dark = subtract_dark.map_or(0.0, |d| h.policy.n as f64 * d.dark * d.pixels as f64);
    effective_efficiency_moments(&m, arm, dark)
}

struct Compound {
    wp: f64,
    var_p: f64,
    var_s: f64,
    var_i: f64,
    ws: f64,
    wi: f64,
    pump: f64,
}

fn compound(params: &TwbParams, k: f64, n: usize) -> Compound {
    let nf = n as f64;
    let ww = params.m_p * params.b_p;
    Compound {
        wp: nf * ww,
        var_p: nf * params.m_p * params.b_p * params.b_p,
        var_s: nf * params.m_s * params.b_s * params.b_s,
        var_i: nf * params.m_i * params.b_i * params.b_i,
        ws: nf * params.m_s * params.b_s,
        wi: nf * params.m_i * params.b_i,
        pump: k * nf * (nf - 1.0) * ww * ww,
    }
}

/// Model effective efficiency of `arm` for N grouped windows of `params` with pump
/// correlation K.
pub fn effective_efficiency_model(params: &TwbParams, arm: Arm, eta: f64, k: f64, n: usize) -> f64 {
    let c = compound(params, k, n);
    let noise = match arm {
        Arm::S => c.wi,
        Arm::I => c.ws,
    };
    eta * (c.wp + c.var_p + c.pump) / (c.wp + noise)
}

/// Model photocount Fano factor of `arm`; eta = 1 gives the photon-number value.
pub fn fano_model(params: &TwbParams, arm: Arm, eta: f64, k: f64, n: usize) -> f64 {
    let c = compound(params, k, n);
    let (var_n, w_n) = match arm {
        Arm::S => (c.var_s, c.ws),
        Arm::I => (c.var_i, c.wi),
    };
    1.0 + eta * (c.var_p + var_n + c.pump) / (c.wp + w_n)
}

/// Model noise-reduction parameter.
pub fn nrp_model(params: &TwbParams, eta_s: f64, eta_i: f64, k: f64, n: usize) -> f64 {
    let c = compound(params, k, n);
    let d = eta_s - eta_i;
    let num = d * d * (c.var_p + c.pump) - 2.0 * eta_s * eta_i * c.wp + eta_s * eta_s * c.var_s + eta_i * eta_i * c.var_i;
    let den = (eta_s + eta_i) * c.wp + eta_s * c.ws + eta_i * c.wi;
    1.0 + num / den
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PostSelectionResult {
    pub c_s_opt: usize,
    pub fano_min: f64,
    pub mean_conditional: f64,
    pub p_success: f64,
    pub events: u64,
}

/// Signal photocount minimizing the conditional idler Fano factor.
pub fn optimal_postselection(h: &JointHistogram, min_events: u64) -> Result<PostSelectionResult> {
    if h.n_groups == 0 {
        return invalid("empty histogram");
    }
    let mut best: Option<PostSelectionResult> = None;
    for cs in 0..h.side() {
        let events = h.column_total(cs);
        if events < min_events.max(1) {
            continue;
        }
        let d = conditional_histogram(h, cs)?;
        let Ok(f) = d.fano() else { continue };
        if best.is_none_or(|b| f < b.fano_min) {
            best = Some(PostSelectionResult {
                c_s_opt: cs,
                fano_min: f,
                mean_conditional: d.mean(),
                p_success: events as f64 / h.n_groups as f64,
                events,
            });
        }
    }
    best.ok_or(Error::NoEligibleColumn(min_events))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PrecisionReport {
    pub mean: f64,
    pub rel_err: f64,
    pub rel_err_classical: f64,
    pub normalized: f64,
    pub n_groups: usize,
    pub n_m: usize,
    pub n_blocks: usize,
    pub partial_coverage: bool,
}

/// Block-averaged relative error of a grouped-count sequence against the
/// Poissonian reference at the same mean.
pub fn relative_error(seq: &[u32], n_m: usize) -> Result<PrecisionReport> {
    if n_m < 2 {
        return invalid("blocks need at least two groups");
    }
    if seq.len() < n_m {
        return Err(Error::InsufficientData(format!("{} groups, block needs {n_m}", seq.len())));
    }
    let n_blocks = seq.len() / n_m;
    let used = &seq[..n_blocks * n_m];
    let per_block: Vec<f64> = used
        .par_chunks(n_m)
        .map(|b| {
            let nf = b.len() as f64;
            let m = b.iter().map(|&c| c as f64).sum::<f64>() / nf;
            if m <= 0.0 {
                return Err(Error::ZeroMean("block"));
            }
            let v = b.iter().map(|&c| (c as f64 - m).powi(2)).sum::<f64>() / nf;
            Ok(v.sqrt() / m / nf.sqrt())
        })
        .collect::<Result<_>>()?;
    let rel_err = per_block.iter().sum::<f64>() / n_blocks as f64;
    let mean = used.iter().map(|&c| c as f64).sum::<f64>() / used.len() as f64;
    let rel_err_classical = 1.0 / (mean * n_m as f64).sqrt();
    Ok(PrecisionReport {
        mean,
        rel_err,
        rel_err_classical,
        normalized: rel_err / rel_err_classical,
        n_groups: used.len(),
        n_m,
        n_blocks,
        partial_coverage: n_blocks < MIN_BLOCKS,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PrecisionImprovement {
    pub s_cs: f64,
    pub s_ci: f64,
    pub reference_s: PrecisionReport,
    pub reference_i: PrecisionReport,
    pub conditioned_s: PrecisionReport,
    pub conditioned_i: PrecisionReport,
}

/// Ratios of conditioned to reference normalized errors per arm, on
/// disjoint N-groups of the (conditioned) bit sequences. A sequence with fewer
/// than `n_m` groups is reported as one block of all its groups, flagged
/// `partial_coverage`.
pub fn precision_improvement(stream: &ClickStream, n: usize, n_m: usize) -> Result<PrecisionImprovement> {
    let seqs = conditioned_sequences(stream);
    let pol = GroupingPolicy::disjoint(n);
    let report = |bits: &[u8]| -> Result<PrecisionReport> {
        let groups = grouped_counts(bits, &pol)?;
        if groups.len() >= n_m {
            return relative_error(&groups, n_m);
        }
        if groups.len() < 2 {
            return Err(Error::InsufficientData(format!("{} windows, need {} for one block", bits.len(), n * n_m)));
        }
        // one short block of every available group
        let mut r = relative_error(&groups, groups.len())?;
        r.partial_coverage = true;
        Ok(r)
    };
    let reference_s = report(&seqs.reference_s)?;
    let reference_i = report(&seqs.reference_i)?;
    let conditioned_s = report(&seqs.conditioned_s)?;
    let conditioned_i = report(&seqs.conditioned_i)?;
    Ok(PrecisionImprovement {
        s_cs: conditioned_s.normalized / reference_s.normalized,
        s_ci: conditioned_i.normalized / reference_i.normalized,
        reference_s,
        reference_i,
        conditioned_s,
        conditioned_i,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets;

    #[test]
    fn poisson_pair_model_gives_bare_efficiency() {
        let p = TwbParams::new(1e6, 1.0, 1.0, 1e-7, 0.0, 0.0);
        assert!((effective_efficiency_model(&p, Arm::S, 0.3, 0.0, 5) - 0.3).abs() < 1e-6);
        let noisy = TwbParams::new(1e6, 1.0, 1.0, 1e-7, 0.0, 0.05);
        assert!(effective_efficiency_model(&noisy, Arm::S, 0.3, 0.0, 5) < 0.3);
    }

    #[test]
    fn pump_term_scale() {
        let w = presets::window_params();
        let ww = w.m_p * w.b_p;
        let k = 1e-5 / (ww * ww);
        let c0 = compound(&w, 0.0, 1000);
        let c1 = compound(&w, k, 1000);
        assert!(((c1.pump - c0.pump) - 9.99).abs() < 1e-9);
        assert!(effective_efficiency_model(&w, Arm::S, 0.282, k, 1000) > effective_efficiency_model(&w, Arm::S, 0.282, 0.0, 1000));
    }

    #[test]
    fn models_flat_without_pump() {
        let w = presets::window_params();
        let r1 = nrp_model(&w, 0.3, 0.3, 0.0, 1);
        let r2 = nrp_model(&w, 0.3, 0.3, 0.0, 1000);
        assert!((r1 - r2).abs() < 1e-12);
        assert!((nrp_model(&w, 0.3, 0.3, 0.1, 1000) - r2).abs() < 1e-12);
        assert!((fano_model(&w, Arm::I, 0.33, 0.0, 1) - fano_model(&w, Arm::I, 0.33, 0.0, 700)).abs() < 1e-12);
    }

    #[test]
    fn diagonal_postselection() {
        let pol = GroupingPolicy::disjoint(3);
        let mut c = vec![0u64; 16];
        for k in 0..4 {
            c[k * 4 + k] = 200;
        }
        let h = JointHistogram::from_counts(pol, c).unwrap();
        let r = optimal_postselection(&h, 100).unwrap();
        assert_eq!(r.fano_min, 0.0);
        assert!((r.p_success - 0.25).abs() < 1e-15);
        assert!(matches!(optimal_postselection(&h, 1000), Err(Error::NoEligibleColumn(1000))));
    }

    #[test]
    fn relative_error_hand_case() {
        let seq = [1, 3, 1, 3];
        let r = relative_error(&seq, 2).unwrap();
        assert!((r.mean - 2.0).abs() < 1e-15);
        assert!((r.rel_err - 0.5 / 2f64.sqrt()).abs() < 1e-15);
        assert!((r.rel_err_classical - 0.5).abs() < 1e-15);
        assert!(r.partial_coverage);
        assert!(matches!(relative_error(&[0, 0, 1, 1], 2), Err(Error::ZeroMean(_))));
        assert!(matches!(relative_error(&[1], 2), Err(Error::InsufficientData(_))));
    }
}
