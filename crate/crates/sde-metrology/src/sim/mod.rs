//! Deterministic virtual laboratory.
//!
//! A [`SimScenario`] declares the ground truth of every instrument: laser
//! power and drift, per-setting attenuator transmissions, switch couplings,
//! the monitor meter's per-range polynomial response and range
//! discontinuities, the calibrated meter's factor, and the detector's
//! efficiency curve, dark rate, dead time, and polarization response.
//! The runners in this module execute the acquisition procedures against
//! that truth and emit the same session files the analysis modules consume,
//! plus a sealed ground-truth JSON under `truth/` that analysis code never
//! reads.
//!
//! Identical (scenario, seed) pairs produce byte-identical session bundles.

mod deadtime;
mod runner;
mod scenario;

pub use deadtime::{registered_fraction, GatedCounter};
pub use runner::{
    run_attenuator_cal, run_nonlin_acquisition, run_polscan, run_sde_session, run_stability,
    run_switch_cal, simulate_bundle, AttenCalRun, BiasGridSpec, BundleOptions, NonlinAcquisition,
    PolGridSpec, PolScanRun, SdeSessionRun, StabilitySpec, SwitchCalRun, GROUND_TRUTH_FILE,
};
pub use scenario::{
    AttenuatorTruth, CpmTruth, DarkTruth, DetectorTruth, DriftModel, GroundTruth, LaserTruth,
    MpmTruth, PolControllerTruth, RealizedTruth, SdeCurveTruth, SimScenario, SwitchTruth,
};

use rand_chacha::ChaCha8Rng;

pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent deterministic RNG stream for one acquisition phase.
pub(crate) fn stream_rng(seed: u64, tag: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    ChaCha8Rng::seed_from_u64(splitmix64(seed.wrapping_mul(0x9E37_79B9).wrapping_add(tag)))
}

/// Deterministic uniform draw in [0, 1) keyed by (seed, tags), independent
/// of call order.
pub(crate) fn hash_uniform(seed: u64, tags: &[u64]) -> f64 {
    let mut x = splitmix64(seed ^ 0xA076_1D64_78BD_642F);
    for t in tags {
        x = splitmix64(x ^ splitmix64(*t));
    }
    (x >> 11) as f64 / (1u64 << 53) as f64
}

/// Deterministic standard-normal draw keyed by (seed, tags).
pub(crate) fn hash_gauss(seed: u64, tags: &[u64]) -> f64 {
    let u1 = hash_uniform(seed, &[tags[0].wrapping_add(1), tags[tags.len() - 1]]);
    let mut tags2 = tags.to_vec();
    tags2.push(0x5bd1e995);
    let u2 = hash_uniform(seed, &tags2);
    let r = (-2.0 * (1.0 - u1).ln()).sqrt();
    r * (2.0 * std::f64::consts::PI * u2).cos()
}
