//! Shared scenario configurations and helpers for the integration and
//! acceptance suites. Tests may consult the simulator's ground truth; the
//! analysis code under test never does.

#![allow(dead_code)]

use sde_metrology::instrument::{switching_ratio, CalibrationBundle, CpmCalibration};
use sde_metrology::nonlin::{calibrate_nonlinearity, NonlinModel, RangeSetting};
use sde_metrology::sde::{group_by_bias, sde_curve, CountPhase, SdeResult, SdeSessionData};
use sde_metrology::sim::{
    run_nonlin_acquisition, run_sde_session, run_switch_cal, BiasGridSpec, DriftModel,
    RealizedTruth, SdeSessionRun, SimScenario,
};

/// Paper-scale scenario with a stationary source (drift belongs to the
/// stability analyses, not the calibration oracles).
pub fn stationary_scenario() -> SimScenario {
    let mut sc = SimScenario::paper_default();
    sc.laser.drift = DriftModel::None;
    sc
}

/// Scenario with the step attenuator pinned to exactly tau = 0.5.
pub fn tau_half_scenario() -> SimScenario {
    let mut sc = stationary_scenario();
    sc.attenuators[1].overrides.insert("0.000".into(), 0.98);
    sc.attenuators[1].overrides.insert("3.000".into(), 0.49);
    sc
}

/// End-to-end coverage scenario: detector truth 0.965 at 5 uA exactly,
/// polarization-flat response, no dead time (pile-up physics is validated
/// separately against the discrete-event oracle), stationary source.
pub fn coverage_scenario() -> SimScenario {
    let mut sc = tau_half_scenario();
    sc.detector.dead_time_s = 0.0;
    sc.detector.ps = 1.0;
    sc.detector.sde.plateau = 0.965 * (1.0 + (-(5.0 - 3.0) / 0.25f64).exp());
    sc
}

pub fn default_grid() -> BiasGridSpec {
    BiasGridSpec {
        vstop: 0.6,
        vstep: 0.1,
        vpol: 0.5,
    }
}

pub const COVERAGE_ATT_DB: f64 = 31.8;

pub fn fit_model(sc: &SimScenario, seed: u64) -> NonlinModel {
    let acq = run_nonlin_acquisition(sc, seed);
    calibrate_nonlinearity(&acq.records).expect("nonlinearity fit")
}

pub fn build_bundle(sc: &SimScenario, seed: u64, nonlin: NonlinModel) -> CalibrationBundle {
    let sw = run_switch_cal(sc, seed);
    let switch = switching_ratio(&sw.record).expect("switch calibration");
    let truth = RealizedTruth::new(sc, seed);
    let cpm = CpmCalibration::new(&[(
        sc.wavelength_nm,
        truth.cf_cpm_reported,
        sc.cpm.reported_rel_sigma,
    )])
    .expect("cpm table");
    CalibrationBundle {
        nonlin,
        switch,
        cpm,
    }
}

/// One full pipeline in memory: acquisition, calibration, counts, analysis.
pub fn run_full_pipeline(
    sc: &SimScenario,
    seed: u64,
    grid: &BiasGridSpec,
    att_db: f64,
) -> (SdeResult, SdeSessionRun) {
    let model = fit_model(sc, seed);
    let bundle = build_bundle(sc, seed, model);
    let run = run_sde_session(sc, seed, grid, att_db, RangeSetting::DbmM30);
    let session = SdeSessionData {
        wavelength_nm: sc.wavelength_nm,
        dark: group_by_bias(&run.counts, CountPhase::Dark).unwrap(),
        maxpol: group_by_bias(&run.counts, CountPhase::MaxPol).unwrap(),
        minpol: group_by_bias(&run.counts, CountPhase::MinPol).unwrap(),
        atten_cal: run.atten.records.clone(),
    };
    let result = sde_curve(&session, &bundle).expect("sde analysis");
    (result, run)
}

/// Inverts P(v) = v + sum c_k v^k at a target, independent of the library's
/// internals (test-side oracle arithmetic).
pub fn invert_truth_poly(coeffs: &[f64], target: f64) -> f64 {
    let mut v = target;
    for _ in 0..60 {
        let mut f = v - target;
        let mut df = 1.0;
        for (i, c) in coeffs.iter().enumerate() {
            let k = (i + 2) as i32;
            f += c * v.powi(k);
            df += c * k as f64 * v.powi(k - 1);
        }
        v -= f / df;
    }
    v
}
