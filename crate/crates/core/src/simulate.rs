//! Monte Carlo click streams of weak twin beams on single-pixel detectors.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detection::DetectorSpec;
use crate::error::{invalid, Result};
use crate::model::TwbParams;

/// Windows generated per RNG stream.
pub const CHUNK: usize = 1 << 16;

const TAG_WINDOWS: u64 = 0x7769_6e64;
const TAG_PUMP: u64 = 0x7075_6d70;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PumpCorrelation {
    pub k: f64,
    pub block_len: usize,
}

impl PumpCorrelation {
    pub fn none() -> Self {
        PumpCorrelation { k: 0.0, block_len: 1 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.k.is_finite() && self.k >= 0.0) {
            return invalid(format!("K must be finite and >= 0, got {}", self.k));
        }
        if 3.0 * self.k.sqrt() >= 1.0 {
            return invalid("3 sqrt(K) must stay below 1");
        }
        if self.block_len == 0 {
            return invalid("block_len must be >= 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamMeta {
    pub params: TwbParams,
    pub spec_s: DetectorSpec,
    pub spec_i: DetectorSpec,
    pub pump: PumpCorrelation,
    pub seed: u64,
    pub n_windows: usize,
}

/// Per-window click bits: bit 0 signal, bit 1 idler.
#[derive(Debug, Clone, PartialEq)]
pub struct ClickStream {
    pub windows: Vec<u8>,
    pub meta: Option<StreamMeta>,
}

impl ClickStream {
    pub fn from_pairs(pairs: &[(u8, u8)]) -> Self {
        let windows = pairs.iter().map(|&(s, i)| (s & 1) | ((i & 1) << 1)).collect();
        ClickStream { windows, meta: None }
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    #[inline]
    pub fn signal(&self, j: usize) -> u8 {
        self.windows[j] & 1
    }

    #[inline]
    pub fn idler(&self, j: usize) -> u8 {
        (self.windows[j] >> 1) & 1
    }
}

fn keyed_rng(seed: u64, tag: u64, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&tag.to_le_bytes());
    key[16..24].copy_from_slice(&index.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// Common-mode Gaussian draw of pump block `b`.
fn pump_draw(seed: u64, b: u64) -> f64 {
    keyed_rng(seed, TAG_PUMP, b).sample(StandardNormal)
}

struct Sampler {
    pair: Option<Gamma<f64>>,
    sig: Option<Gamma<f64>>,
    idl: Option<Gamma<f64>>,
}

fn gamma(m: f64, b: f64) -> Option<Gamma<f64>> {
    if b > 0.0 {
        Some(Gamma::new(m, b).expect("validated shape and scale"))
    } else {
        None
    }
}

#[inline]
fn poisson<R: Rng>(rng: &mut R, lambda: f64) -> u32 {
    if lambda <= 0.0 {
        return 0;
    }
    Poisson::new(lambda).map(|d| d.sample(rng) as u32).unwrap_or(0)
}

#[inline]
fn click<R: Rng>(rng: &mut R, spec: &DetectorSpec, n: u32) -> u8 {
    let q = (1.0 - spec.dark) * (1.0 - spec.eta).powi(n as i32);
    (rng.random::<f64>() >= q) as u8
}

fn check(params: &TwbParams, s: &DetectorSpec, i: &DetectorSpec, pump: &PumpCorrelation) -> Result<()> {
    params.validate()?;
    s.validate()?;
    i.validate()?;
    pump.validate()?;
    if s.pixels != 1 || i.pixels != 1 {
        return invalid("simulated detectors must have one pixel");
    }
    Ok(())
}

fn generate(
    params: &TwbParams,
    spec_s: &DetectorSpec,
    spec_i: &DetectorSpec,
    pump: &PumpCorrelation,
    n_windows: usize,
    seed: u64,
    keep_photons: bool,
) -> (Vec<u8>, Vec<[u32; 2]>) {
    let sampler = Sampler {
        pair: gamma(params.m_p, params.b_p),
        sig: gamma(params.m_s, params.b_s),
        idl: gamma(params.m_i, params.b_i),
    };
    let root_k = pump.k.sqrt();
    let n_chunks = n_windows.div_ceil(CHUNK);
    let parts: Vec<(Vec<u8>, Vec<[u32; 2]>)> = (0..n_chunks)
        .into_par_iter()
        .map(|ci| {
            let lo = ci * CHUNK;
            let hi = (lo + CHUNK).min(n_windows);
            let mut rng = keyed_rng(seed, TAG_WINDOWS, ci as u64);
            let mut bits = Vec::with_capacity(hi - lo);
            let mut photons = if keep_photons { Vec::with_capacity(hi - lo) } else { Vec::new() };
            let mut block = u64::MAX;
            let mut scale = 1.0;
            for w in lo..hi {
                if pump.k > 0.0 {
                    let b = (w / pump.block_len) as u64;
                    if b != block {
                        block = b;
                        scale = (1.0 + root_k * pump_draw(seed, b)).max(0.0);
                    }
                }
                let lam_p = sampler.pair.as_ref().map_or(0.0, |g| g.sample(&mut rng) * scale);
                let lam_s = sampler.sig.as_ref().map_or(0.0, |g| g.sample(&mut rng));
                let lam_i = sampler.idl.as_ref().map_or(0.0, |g| g.sample(&mut rng));
                let np = poisson(&mut rng, lam_p);
                let ns = np + poisson(&mut rng, lam_s);
                let ni = np + poisson(&mut rng, lam_i);
                let cs = click(&mut rng, spec_s, ns);
                let c_i = click(&mut rng, spec_i, ni);
                bits.push(cs | (c_i << 1));
                if keep_photons {
                    photons.push([ns, ni]);
                }
            }
            (bits, photons)
        })
        .collect();
    let mut bits = Vec::with_capacity(n_windows);
    let mut photons = Vec::with_capacity(if keep_photons { n_windows } else { 0 });
    for (b, p) in parts {
        bits.extend_from_slice(&b);
        photons.extend_from_slice(&p);
    }
    (bits, photons)
}

/// Click stream of `n_windows` windows; identical for identical inputs.
pub fn sample_stream(
    params: &TwbParams,
    spec_s: &DetectorSpec,
    spec_i: &DetectorSpec,
    pump: &PumpCorrelation,
    n_windows: usize,
    seed: u64,
) -> Result<ClickStream> {
    sample_stream_with_photons(params, spec_s, spec_i, pump, n_windows, seed, false).map(|r| r.0)
}

/// As [`sample_stream`], also returning the incident photon numbers
/// (n_s, n_i) of every window when `keep_photons` is set.
pub fn sample_stream_with_photons(
    params: &TwbParams,
    spec_s: &DetectorSpec,
    spec_i: &DetectorSpec,
    pump: &PumpCorrelation,
    n_windows: usize,
    seed: u64,
    keep_photons: bool,
) -> Result<(ClickStream, Vec<[u32; 2]>)> {
    check(params, spec_s, spec_i, pump)?;
    if n_windows == 0 {
        return invalid("window count must be >= 1");
    }
    let (windows, photons) = generate(params, spec_s, spec_i, pump, n_windows, seed, keep_photons);
    let meta = StreamMeta { params: *params, spec_s: *spec_s, spec_i: *spec_i, pump: *pump, seed, n_windows };
    Ok((ClickStream { windows, meta: Some(meta) }, photons))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PumpMoments {
    pub w_all_mean: f64,
    pub w_all_sq: f64,
}

/// First two moments of the compound paired intensity over N windows with
/// correlated pump fluctuations.
pub fn pump_moment_model(window: &TwbParams, k: f64, n: usize) -> PumpMoments {
    let nf = n as f64;
    let w = window.m_p * window.b_p;
    let mean = nf * w;
    let modes = nf * window.m_p;
    let sq = mean * mean + modes * window.b_p * window.b_p + k * nf * (nf - 1.0) * w * w;
    PumpMoments { w_all_mean: mean, w_all_sq: sq }
}

/// Covariance between click indicators of two windows in the same pump block,
/// normalized by the squared click rate, for arm `spec`.
/// Evaluated by trapezoid quadrature over the common-mode draw.
pub fn same_block_click_correlation(window: &TwbParams, spec: &DetectorSpec, noise: (f64, f64), k: f64) -> f64 {
    let z = 1.0 - spec.eta;
    let g = |m: f64, b: f64| (-m * (b * (1.0 - z)).ln_1p()).exp();
    let noise_pgf = g(noise.0, noise.1);
    let p_click = |scale: f64| 1.0 - (1.0 - spec.dark) * g(window.m_p, window.b_p * scale) * noise_pgf;
    let (mut m1, mut m2, mut wsum) = (0.0, 0.0, 0.0);
    let steps = 4000;
    for j in 0..=steps {
        let x = -8.0 + 16.0 * j as f64 / steps as f64;
        let w = (-0.5 * x * x).exp();
        let p = p_click((1.0 + k.sqrt() * x).max(0.0));
        m1 += w * p;
        m2 += w * p * p;
        wsum += w;
    }
    let (m1, m2) = (m1 / wsum, m2 / wsum);
    (m2 - m1 * m1) / (m1 * m1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detection::window_probabilities;
    use crate::presets;

    #[test]
    fn dark_vacuum_is_silent() {
        let p = TwbParams::new(10.0, 10.0, 10.0, 0.0, 0.0, 0.0);
        let s = DetectorSpec::new(0.3, 0.0, 1);
        let st = sample_stream(&p, &s, &s, &PumpCorrelation::none(), 10_000, 1).unwrap();
        assert!(st.windows.iter().all(|&b| b == 0));
    }

    #[test]
    fn deterministic_given_seed() {
        let p = presets::window_params();
        let (s, i) = (presets::signal_apd(), presets::idler_apd());
        let pump = PumpCorrelation { k: 1e-3, block_len: 1000 };
        let a = sample_stream(&p, &s, &i, &pump, 200_000, 42).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let b = pool.install(|| sample_stream(&p, &s, &i, &pump, 200_000, 42).unwrap());
        assert_eq!(a.windows, b.windows);
        let c = sample_stream(&p, &s, &i, &pump, 200_000, 43).unwrap();
        assert_ne!(a.windows, c.windows);
    }

    #[test]
    fn click_rates_match_model() {
        let p = presets::window_params();
        let (s, i) = (presets::signal_apd(), presets::idler_apd());
        let n = 2_000_000;
        let st = sample_stream(&p, &s, &i, &PumpCorrelation::none(), n, 5).unwrap();
        let w = window_probabilities(&p, &s, &i).unwrap();
        let rs = st.windows.iter().filter(|&&b| b & 1 == 1).count() as f64 / n as f64;
        let ri = st.windows.iter().filter(|&&b| b & 2 == 2).count() as f64 / n as f64;
        let ps = w[1][0] + w[1][1];
        let pi = w[0][1] + w[1][1];
        assert!((rs - ps).abs() < 3.0 * (ps * (1.0 - ps) / n as f64).sqrt());
        assert!((ri - pi).abs() < 3.0 * (pi * (1.0 - pi) / n as f64).sqrt());
    }

    #[test]
    fn photon_record_consistent_with_clicks() {
        let p = presets::window_params();
        let s = DetectorSpec::new(1.0, 0.0, 1);
        let (st, ph) = sample_stream_with_photons(&p, &s, &s, &PumpCorrelation::none(), 50_000, 9, true).unwrap();
        for (b, n) in st.windows.iter().zip(&ph) {
            assert_eq!(b & 1, (n[0] > 0) as u8);
            assert_eq!((b >> 1) & 1, (n[1] > 0) as u8);
        }
    }

    #[test]
    fn pump_moments() {
        let p = presets::window_params();
        let base = pump_moment_model(&p, 0.0, 1000);
        let with = pump_moment_model(&p, 1e-5 / (p.m_p * p.b_p).powi(2), 1000);
        assert!((with.w_all_sq - base.w_all_sq - 9.99).abs() < 1e-9);
        let one = pump_moment_model(&p, 0.5, 1);
        assert_eq!(one.w_all_sq, pump_moment_model(&p, 0.0, 1).w_all_sq);
    }

    #[test]
    fn rejects_bad_input() {
        let p = presets::window_params();
        let s = presets::signal_apd();
        let pump = PumpCorrelation { k: 0.2, block_len: 10 };
        assert!(sample_stream(&p, &s, &s, &pump, 10, 1).is_err());
        assert!(sample_stream(&p, &s.with_pixels(2), &s, &PumpCorrelation::none(), 10, 1).is_err());
    }
}
