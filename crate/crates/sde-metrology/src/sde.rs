//! System-detection-efficiency estimation with propagated uncertainty.
//!
//! The photon rate exiting the detector port is the corrected monitor power
//! scaled through the switch calibration and the three attenuator
//! transmissions, divided by the single-photon energy hc/lambda. The SDE at
//! each bias point is the dark-subtracted count rate over that photon rate;
//! because every factor is an [`UncertainValue`], the full error budget
//! falls out of the arithmetic with correlations intact.

use serde::{Deserialize, Serialize};

use crate::instrument::{
    calibrate_attenuator, AttenCalRecord, AttenCalResult, CalibrationBundle, InstrumentError,
    SwitchCalibration,
};
use crate::nonlin::{NonlinError, NonlinModel, RangeSetting};
use crate::stats;
use crate::uncertainty::{UncertainValue, UncertaintyError};

/// CODATA/SI exact values.
pub const PLANCK_J_S: f64 = 6.626_070_15e-34;
pub const SPEED_OF_LIGHT_M_S: f64 = 299_792_458.0;

/// Series resistor converting the programmed bias voltage to bias current.
pub const BIAS_SERIES_RESISTOR_OHMS: f64 = 100_000.0;

/// Counter gate length; count records are counts per one-second gate.
pub const GATE_SECONDS: f64 = 1.0;

#[derive(Debug, Clone, thiserror::Error)]
pub enum SdeError {
    #[error("calibration mismatch: {0}")]
    CalibrationMismatch(String),
    #[error("bias grid mismatch: {0}")]
    Alignment(String),
    #[error("incomplete session, missing: {}", missing.join(", "))]
    IncompleteSession { missing: Vec<String> },
    #[error("invalid input: {0}")]
    BadInput(String),
    #[error(transparent)]
    Uncertainty(#[from] UncertaintyError),
    #[error(transparent)]
    Nonlin(#[from] NonlinError),
    #[error(transparent)]
    Instrument(#[from] InstrumentError),
}

impl SdeError {
    pub fn exit_code(&self) -> i32 {
        match self {
            SdeError::CalibrationMismatch(_)
            | SdeError::Alignment(_)
            | SdeError::IncompleteSession { .. }
            | SdeError::BadInput(_) => crate::error::EXIT_DATA,
            SdeError::Uncertainty(_) => crate::error::EXIT_NUMERICAL,
            SdeError::Nonlin(e) => e.exit_code(),
            SdeError::Instrument(e) => e.exit_code(),
        }
    }
}

/// Measurement phase of a count record.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CountPhase {
    Dark,
    MaxPol,
    MinPol,
}

impl std::fmt::Display for CountPhase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            CountPhase::Dark => "dark",
            CountPhase::MaxPol => "maxpol",
            CountPhase::MinPol => "minpol",
        };
        write!(f, "{s}")
    }
}

impl std::str::FromStr for CountPhase {
    type Err = SdeError;
    fn from_str(s: &str) -> Result<Self, SdeError> {
        match s.trim().to_ascii_lowercase().as_str() {
            "dark" => Ok(CountPhase::Dark),
            "maxpol" => Ok(CountPhase::MaxPol),
            "minpol" => Ok(CountPhase::MinPol),
            other => Err(SdeError::BadInput(format!("unknown phase {other:?}"))),
        }
    }
}

/// One counter read: counts in a one-second gate at a bias setting.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct CountRecord {
    pub phase: CountPhase,
    pub bias_v: f64,
    pub rep: u32,
    pub counts: u64,
}

/// All gate reads taken at one bias setting.
#[derive(Clone, Debug)]
pub struct BiasCounts {
    pub bias_v: f64,
    pub reads: Vec<u64>,
}

/// Groups records of one phase by bias voltage, requiring a monotone scan.
pub fn group_by_bias(records: &[CountRecord], phase: CountPhase) -> Result<Vec<BiasCounts>, SdeError> {
    let mut out: Vec<BiasCounts> = Vec::new();
    let mut last = f64::NEG_INFINITY;
    for rec in records.iter().filter(|r| r.phase == phase) {
        if (rec.bias_v - last).abs() < 1e-9 {
            out.last_mut().unwrap().reads.push(rec.counts);
        } else {
            if rec.bias_v < last - 1e-9 {
                return Err(SdeError::BadInput(format!(
                    "bias scan not monotone in phase {phase}: {} V after {} V",
                    rec.bias_v, last
                )));
            }
            last = rec.bias_v;
            out.push(BiasCounts {
                bias_v: rec.bias_v,
                reads: vec![rec.counts],
            });
        }
    }
    Ok(out)
}

/// Count rate over the N gates at one bias: mean rate with sigma taken as
/// the quadrature of the Poisson deviation of the mean (sqrt of mean over
/// total gate time) and the numerical standard error of the N reads.
pub fn rate_from_gates(reads: &[u64]) -> Result<UncertainValue, SdeError> {
    if reads.is_empty() {
        return Err(SdeError::BadInput("no counter reads at bias point".into()));
    }
    let n = reads.len() as f64;
    let rates: Vec<f64> = reads.iter().map(|c| *c as f64 / GATE_SECONDS).collect();
    let mean = stats::mean(&rates);
    let poisson_var = mean / (n * GATE_SECONDS);
    let numeric_var = stats::sample_variance(&rates) / n;
    Ok(UncertainValue::lift(mean, (poisson_var + numeric_var).sqrt())?)
}

/// Net rate at one bias point together with its components.
#[derive(Clone, Debug, Serialize)]
pub struct NetRate {
    pub bias_v: f64,
    pub net: UncertainValue,
    pub light: UncertainValue,
    pub dark: UncertainValue,
}

/// Dark-subtracted count rates on a matching bias grid. Subtraction is per
/// bias point; dark rates are bias dependent.
pub fn net_count_rate(
    light: &[BiasCounts],
    dark: &[BiasCounts],
) -> Result<Vec<NetRate>, SdeError> {
    if light.len() != dark.len() {
        return Err(SdeError::Alignment(format!(
            "light scan has {} bias points, dark scan {}",
            light.len(),
            dark.len()
        )));
    }
    let mut out = Vec::with_capacity(light.len());
    for (l, d) in light.iter().zip(dark) {
        if (l.bias_v - d.bias_v).abs() > 1e-9 {
            return Err(SdeError::Alignment(format!(
                "bias {} V in light scan vs {} V in dark scan",
                l.bias_v, d.bias_v
            )));
        }
        let lr = rate_from_gates(&l.reads)?;
        let dr = rate_from_gates(&d.reads)?;
        out.push(NetRate {
            bias_v: l.bias_v,
            net: &lr - &dr,
            light: lr,
            dark: dr,
        });
    }
    Ok(out)
}

/// Absolute optical power exiting the detector port with the attenuators at
/// their zero settings.
///
/// The switch calibration transfers the absolute reference from the
/// calibrated meter to the monitor meter:
/// `P_DP = corrected(V_mpm) * R_SW * CF_NL(-10, V_mpm_cal) / CF_CPM`,
/// which equals `corrected(V_mpm) * (V_cpm / CF_CPM) / corrected(V_mpm_cal)`.
pub fn detector_port_power(
    mpm_mean: &UncertainValue,
    wavelength_nm: f64,
    model: &NonlinModel,
    range: RangeSetting,
    switch: &SwitchCalibration,
    cpm_factor: &UncertainValue,
) -> Result<UncertainValue, SdeError> {
    if (model.wavelength_nm - wavelength_nm).abs() > 1e-3 {
        return Err(SdeError::CalibrationMismatch(format!(
            "nonlinearity model at {} nm, session at {} nm",
            model.wavelength_nm, wavelength_nm
        )));
    }
    if (switch.wavelength_nm - wavelength_nm).abs() > 1e-3 {
        return Err(SdeError::CalibrationMismatch(format!(
            "switch calibration at {} nm, session at {} nm",
            switch.wavelength_nm, wavelength_nm
        )));
    }
    let live_corrected = model.corrected_reading(range, mpm_mean)?;
    let cal_correction = model.correction(switch.range, switch.mpm_mean.value())?;
    let p_dp = &(&live_corrected * &switch.ratio) * &cal_correction.factor.try_div(cpm_factor)?;
    Ok(p_dp)
}

/// Photon rate through the attenuation chain, with the constants that
/// convert power to photons per second.
#[derive(Clone, Debug, Serialize)]
pub struct PhotonFlux {
    pub rate_hz: UncertainValue,
    pub p_dp_w: UncertainValue,
    pub alphas: [UncertainValue; 3],
    pub wavelength_nm: f64,
}

/// rate = P_DP * a1 * a2 * a3 * lambda / (h c).
pub fn photon_rate(
    p_dp: &UncertainValue,
    alphas: &[UncertainValue; 3],
    wavelength_nm: f64,
) -> Result<PhotonFlux, SdeError> {
    if !(p_dp.value() > 0.0) {
        return Err(SdeError::BadInput(format!(
            "detector-port power must be positive, got {} W",
            p_dp.value()
        )));
    }
    if alphas.iter().any(|a| !(a.value() > 0.0)) {
        return Err(SdeError::BadInput("attenuations must be positive".into()));
    }
    if !(wavelength_nm > 0.0) {
        return Err(SdeError::BadInput("wavelength must be positive".into()));
    }
    let photon_energy_j = PLANCK_J_S * SPEED_OF_LIGHT_M_S / (wavelength_nm * 1e-9);
    let rate = &(&(&(p_dp * &alphas[0]) * &alphas[1]) * &alphas[2]) / photon_energy_j;
    Ok(PhotonFlux {
        rate_hz: rate,
        p_dp_w: p_dp.clone(),
        alphas: alphas.clone(),
        wavelength_nm,
    })
}

/// SDE = net rate / photon rate. The relative sigma picks up the counting
/// term, the detector-port power terms, and the three attenuator terms
/// automatically through the shared base variables.
pub fn sde_estimate(
    net: &UncertainValue,
    flux: &PhotonFlux,
) -> Result<UncertainValue, SdeError> {
    if !(flux.rate_hz.value() > 0.0) {
        return Err(SdeError::BadInput(format!(
            "photon rate must be positive, got {}",
            flux.rate_hz.value()
        )));
    }
    Ok(net.try_div(&flux.rate_hz)?)
}

/// Dead-time counter models for the pile-up bound.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeadTimeModel {
    Paralyzable,
    Nonparalyzable,
}

impl std::str::FromStr for DeadTimeModel {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "paralyzable" => Ok(DeadTimeModel::Paralyzable),
            "nonparalyzable" => Ok(DeadTimeModel::Nonparalyzable),
            other => Err(format!(
                "unknown dead-time model {other:?}; use paralyzable or nonparalyzable"
            )),
        }
    }
}

impl std::fmt::Display for DeadTimeModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DeadTimeModel::Paralyzable => write!(f, "paralyzable"),
            DeadTimeModel::Nonparalyzable => write!(f, "nonparalyzable"),
        }
    }
}

/// Maximum achievable SDE for a continuous input photon rate against a
/// dead-time counter: exp(-r*t) paralyzable, 1/(1 + r*t) nonparalyzable.
pub fn pileup_max_sde(rate_hz: f64, dead_time_s: f64, model: DeadTimeModel) -> f64 {
    let x = (rate_hz * dead_time_s).max(0.0);
    match model {
        DeadTimeModel::Paralyzable => (-x).exp(),
        DeadTimeModel::Nonparalyzable => 1.0 / (1.0 + x),
    }
}

/// Parsed inputs of one efficiency session: the three count phases plus the
/// embedded attenuator calibration run.
#[derive(Clone, Debug)]
pub struct SdeSessionData {
    pub wavelength_nm: f64,
    pub dark: Vec<BiasCounts>,
    pub maxpol: Vec<BiasCounts>,
    pub minpol: Vec<BiasCounts>,
    pub atten_cal: Vec<AttenCalRecord>,
}

/// One analyzed bias point.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SdePoint {
    pub phase: CountPhase,
    pub bias_v: f64,
    pub bias_ua: f64,
    pub sde: UncertainValue,
    pub net_rate_hz: UncertainValue,
    pub dark_rate_hz: UncertainValue,
}

/// One line of the error-budget table: a named source and its relative
/// standard uncertainty. The rows list each input separately; the total is
/// computed by the propagation engine with correlations included, so the
/// naive quadrature of rows need not reproduce it exactly.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BudgetRow {
    pub source: String,
    pub relative_sigma: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SdeResult {
    pub wavelength_nm: f64,
    pub p_dp_w: UncertainValue,
    pub alphas: Vec<UncertainValue>,
    pub photon_rate_hz: UncertainValue,
    pub points: Vec<SdePoint>,
    pub budget: Vec<BudgetRow>,
    /// Optional pile-up ceiling at the measured plateau rate.
    pub pileup_bound: Option<PileupBound>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PileupBound {
    pub model: DeadTimeModel,
    pub dead_time_s: f64,
    pub rate_hz: f64,
    pub max_sde: f64,
}

impl SdeResult {
    /// The point with the highest maxpol SDE, conventionally the plateau.
    pub fn plateau(&self) -> Option<&SdePoint> {
        self.points
            .iter()
            .filter(|p| p.phase == CountPhase::MaxPol)
            .max_by(|a, b| a.sde.value().partial_cmp(&b.sde.value()).unwrap())
    }

    /// Point nearest a bias current, per phase.
    pub fn at_bias_ua(&self, phase: CountPhase, bias_ua: f64) -> Option<&SdePoint> {
        self.points
            .iter()
            .filter(|p| p.phase == phase)
            .min_by(|a, b| {
                (a.bias_ua - bias_ua)
                    .abs()
                    .partial_cmp(&(b.bias_ua - bias_ua).abs())
                    .unwrap()
            })
    }
}

/// Full analysis of one efficiency session against a calibration bundle.
pub fn sde_curve(
    session: &SdeSessionData,
    calib: &CalibrationBundle,
) -> Result<SdeResult, SdeError> {
    let mut missing = Vec::new();
    if session.dark.is_empty() {
        missing.push("dark".to_string());
    }
    if session.maxpol.is_empty() {
        missing.push("maxpol".to_string());
    }
    if session.minpol.is_empty() {
        missing.push("minpol".to_string());
    }
    for id in 1u8..=3 {
        if !session.atten_cal.iter().any(|r| r.attenuator_id == id) {
            missing.push(format!("attenuator {id} calibration"));
        }
    }
    if !missing.is_empty() {
        return Err(SdeError::IncompleteSession { missing });
    }

    let mut cal_results: Vec<AttenCalResult> = Vec::new();
    for id in 1u8..=3 {
        let rec = session
            .atten_cal
            .iter()
            .find(|r| r.attenuator_id == id)
            .expect("presence checked above");
        cal_results.push(calibrate_attenuator(rec, &calib.nonlin)?);
    }
    let alphas: [UncertainValue; 3] = [
        cal_results[0].alpha.clone(),
        cal_results[1].alpha.clone(),
        cal_results[2].alpha.clone(),
    ];
    let zero_means: Vec<UncertainValue> =
        cal_results.iter().map(|c| c.zero_mean.clone()).collect();
    let mpm_zero = UncertainValue::mean_of(&zero_means);

    let cpm_factor = calib.cpm.factor(session.wavelength_nm)?;
    let p_dp = detector_port_power(
        &mpm_zero,
        session.wavelength_nm,
        &calib.nonlin,
        RangeSetting::DbmM10,
        &calib.switch,
        cpm_factor,
    )?;
    let flux = photon_rate(&p_dp, &alphas, session.wavelength_nm)?;

    let mut points = Vec::new();
    for (phase, counts) in [
        (CountPhase::MaxPol, &session.maxpol),
        (CountPhase::MinPol, &session.minpol),
    ] {
        for nr in net_count_rate(counts, &session.dark)? {
            let sde = sde_estimate(&nr.net, &flux)?;
            points.push(SdePoint {
                phase,
                bias_v: nr.bias_v,
                bias_ua: nr.bias_v / BIAS_SERIES_RESISTOR_OHMS * 1e6,
                sde,
                net_rate_hz: nr.net,
                dark_rate_hz: nr.dark,
            });
        }
    }

    let mut budget = Vec::new();
    let rel = |u: &UncertainValue| u.relative_sigma().unwrap_or(0.0);
    budget.push(BudgetRow {
        source: "calibrated power meter factor CF_CPM".into(),
        relative_sigma: rel(cpm_factor),
    });
    let cal_rec = &session.atten_cal[0];
    if let Ok(c) = calib
        .nonlin
        .correction(cal_rec.att_range, stats::mean(&cal_rec.att_readings_w))
    {
        budget.push(BudgetRow {
            source: format!("nonlinearity correction CF_NL @ {} dBm", cal_rec.att_range),
            relative_sigma: rel(&c.factor),
        });
    }
    budget.push(BudgetRow {
        source: "optical switching ratio R_SW".into(),
        relative_sigma: rel(&calib.switch.ratio),
    });
    for r in &cal_results {
        budget.push(BudgetRow {
            source: format!("attenuator {} transmission", r.attenuator_id),
            relative_sigma: rel(&r.alpha),
        });
    }
    budget.push(BudgetRow {
        source: "monitor power meter reading".into(),
        relative_sigma: rel(&mpm_zero),
    });
    let plateau = points
        .iter()
        .filter(|p| p.phase == CountPhase::MaxPol)
        .max_by(|a, b| a.sde.value().partial_cmp(&b.sde.value()).unwrap());
    if let Some(p) = plateau {
        budget.push(BudgetRow {
            source: format!("counting statistics @ {:.2} uA", p.bias_ua),
            relative_sigma: rel(&p.net_rate_hz),
        });
        budget.push(BudgetRow {
            source: "total SDE (propagated, correlations included)".into(),
            relative_sigma: rel(&p.sde),
        });
    }

    Ok(SdeResult {
        wavelength_nm: session.wavelength_nm,
        p_dp_w: p_dp,
        alphas: alphas.to_vec(),
        photon_rate_hz: flux.rate_hz,
        points,
        budget,
        pileup_bound: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pileup_at_zero_rate_is_unity() {
        assert_eq!(pileup_max_sde(0.0, 175e-9, DeadTimeModel::Paralyzable), 1.0);
        assert_eq!(
            pileup_max_sde(0.0, 175e-9, DeadTimeModel::Nonparalyzable),
            1.0
        );
    }

    #[test]
    fn pileup_at_paper_operating_point() {
        let p = pileup_max_sde(2e5, 175e-9, DeadTimeModel::Paralyzable);
        assert!((p - 0.9656054162575665).abs() < 1e-12);
        // Matches the quoted 96.5% within 0.15% absolute.
        assert!((p - 0.965).abs() < 0.0015);
        let np = pileup_max_sde(2e5, 175e-9, DeadTimeModel::Nonparalyzable);
        assert!((np - 1.0 / 1.035).abs() < 1e-12);
        assert!((np - 0.9662).abs() < 1e-4);
    }

    #[test]
    fn pileup_model_ordering() {
        for x in [1e3, 1e5, 5e5, 2e6] {
            let p = pileup_max_sde(x, 175e-9, DeadTimeModel::Paralyzable);
            let np = pileup_max_sde(x, 175e-9, DeadTimeModel::Nonparalyzable);
            assert!(p <= np, "exp(-x) <= 1/(1+x) violated at {x}");
        }
    }

    #[test]
    fn unit_photon_energy_gives_unit_rate() {
        let lambda = 1550.0;
        let p = UncertainValue::exact(PLANCK_J_S * SPEED_OF_LIGHT_M_S / (lambda * 1e-9));
        let ones = [
            UncertainValue::exact(1.0),
            UncertainValue::exact(1.0),
            UncertainValue::exact(1.0),
        ];
        let flux = photon_rate(&p, &ones, lambda).unwrap();
        assert!((flux.rate_hz.value() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn photon_rate_matches_direct_evaluation() {
        // 100 uW through three 31 dB attenuators at 1550 nm, evaluated
        // independently from the defining constants.
        let h = 6.62607015e-34;
        let c = 299792458.0;
        let expected = 100e-6 * 10f64.powf(-9.3) * 1550e-9 / (h * c);
        let p = UncertainValue::exact(100e-6);
        let a = UncertainValue::exact(10f64.powf(-3.1));
        let flux = photon_rate(&p, &[a.clone(), a.clone(), a], 1550.0).unwrap();
        assert!(
            ((flux.rate_hz.value() - expected) / expected).abs() < 1e-12,
            "rate {} vs {}",
            flux.rate_hz.value(),
            expected
        );
        assert!((expected - 3.91e5).abs() / 3.91e5 < 1e-3);
    }

    #[test]
    fn identical_dark_and_light_cancel() {
        let light = vec![BiasCounts {
            bias_v: 0.5,
            reads: vec![0, 0, 0],
        }];
        let dark = vec![BiasCounts {
            bias_v: 0.5,
            reads: vec![0, 0, 0],
        }];
        let nets = net_count_rate(&light, &dark).unwrap();
        assert_eq!(nets[0].net.value(), 0.0);
        assert_eq!(nets[0].net.sigma(), 0.0);
    }

    #[test]
    fn grid_mismatch_is_an_alignment_error() {
        let light = vec![BiasCounts {
            bias_v: 0.5,
            reads: vec![10],
        }];
        let dark = vec![BiasCounts {
            bias_v: 0.4,
            reads: vec![1],
        }];
        assert!(matches!(
            net_count_rate(&light, &dark),
            Err(SdeError::Alignment(_))
        ));
    }

    #[test]
    fn exact_inputs_give_exact_unity_sde() {
        let lambda = 1550.0;
        let p = UncertainValue::exact(PLANCK_J_S * SPEED_OF_LIGHT_M_S / (lambda * 1e-9));
        let ones = [
            UncertainValue::exact(1.0),
            UncertainValue::exact(1.0),
            UncertainValue::exact(1.0),
        ];
        let flux = photon_rate(&p, &ones, lambda).unwrap();
        let net = UncertainValue::exact(flux.rate_hz.value());
        let sde = sde_estimate(&net, &flux).unwrap();
        assert!((sde.value() - 1.0).abs() < 1e-12);
        assert_eq!(sde.sigma(), 0.0);
    }

    #[test]
    fn detector_port_power_relative_sigma_composition() {
        // Independent lifts at the budget-table values: MPM 0.1%,
        // R_SW 0.14%, CF_CPM 0.14%, CF_NL 0.075% -> 0.23%.
        let mpm = UncertainValue::lift(1.0, 0.001).unwrap();
        let rsw = UncertainValue::lift(1.0, 0.0014).unwrap();
        let cpm = UncertainValue::lift(1.0, 0.0014).unwrap();
        let cfnl = UncertainValue::lift(1.0, 0.00075).unwrap();
        let p_dp = &(&(&mpm / &cfnl) * &rsw) / &cpm;
        let rel = p_dp.relative_sigma().unwrap();
        let expect = (0.001f64.powi(2) + 0.0014f64.powi(2) + 0.0014f64.powi(2)
            + 0.00075f64.powi(2))
        .sqrt();
        assert!((rel - expect).abs() < 1e-12);
        assert!((expect - 0.0023414).abs() < 1e-6);
    }

    #[test]
    fn relative_variance_decomposes_for_independent_inputs() {
        // Squared relative sigma of SDE equals the sum over independent
        // inputs plus the counting term, to 1e-9 relative.
        let net = UncertainValue::lift(2.2e5, 214.5).unwrap();
        let p_dp = UncertainValue::lift(100e-6, 100e-6 * 0.00234).unwrap();
        let alphas = [
            UncertainValue::lift(7.943e-4, 7.943e-4 * 0.002).unwrap(),
            UncertainValue::lift(7.943e-4, 7.943e-4 * 0.002).unwrap(),
            UncertainValue::lift(7.943e-4, 7.943e-4 * 0.002).unwrap(),
        ];
        let flux = photon_rate(&p_dp, &alphas, 1550.0).unwrap();
        let sde = sde_estimate(&net, &flux).unwrap();
        let got = sde.relative_sigma().unwrap().powi(2);
        let expect = (214.5f64 / 2.2e5).powi(2)
            + 0.00234f64.powi(2)
            + 3.0 * 0.002f64.powi(2);
        assert!(
            ((got - expect) / expect).abs() < 1e-9,
            "{got} vs {expect}"
        );
    }

    #[test]
    fn doubling_power_doubles_rate_and_halves_sde() {
        let p = UncertainValue::exact(1e-6);
        let ones = [
            UncertainValue::exact(1.0),
            UncertainValue::exact(1.0),
            UncertainValue::exact(1.0),
        ];
        let f1 = photon_rate(&p, &ones, 1550.0).unwrap();
        let f2 = photon_rate(&(&p * 2.0), &ones, 1550.0).unwrap();
        assert!((f2.rate_hz.value() / f1.rate_hz.value() - 2.0).abs() < 1e-12);
        let net = UncertainValue::exact(1e5);
        let s1 = sde_estimate(&net, &f1).unwrap();
        let s2 = sde_estimate(&net, &f2).unwrap();
        assert!((s1.value() / s2.value() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn bias_grouping_requires_monotone_scan() {
        let recs = vec![
            CountRecord {
                phase: CountPhase::Dark,
                bias_v: 0.2,
                rep: 1,
                counts: 5,
            },
            CountRecord {
                phase: CountPhase::Dark,
                bias_v: 0.1,
                rep: 1,
                counts: 5,
            },
        ];
        assert!(group_by_bias(&recs, CountPhase::Dark).is_err());
    }
}
