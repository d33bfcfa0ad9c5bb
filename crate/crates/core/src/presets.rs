//! Parameter sets of the reference experiment (one detection window).

use crate::detection::DetectorSpec;
use crate::model::TwbParams;

pub const MODES: f64 = 10.0;
pub const B_PAIR: f64 = 1.0185e-2;
pub const B_SIGNAL: f64 = 8e-5;
pub const B_IDLER: f64 = 2e-5;
pub const ETA_S: f64 = 0.282;
pub const ETA_I: f64 = 0.330;
pub const DARK_S: f64 = 2.8e-3;
pub const DARK_I: f64 = 3.8e-3;
/// Cross-window pump correlation strength.
pub const K_PUMP: f64 = 0.965e-3;

/// Constituting beam of one detection window.
pub fn window_params() -> TwbParams {
    TwbParams::new(MODES, MODES, MODES, B_PAIR, B_SIGNAL, B_IDLER)
}

pub fn signal_apd() -> DetectorSpec {
    DetectorSpec { eta: ETA_S, dark: DARK_S, pixels: 1 }
}

pub fn idler_apd() -> DetectorSpec {
    DetectorSpec { eta: ETA_I, dark: DARK_I, pixels: 1 }
}
