//! Optical switch and attenuator calibration.
//!
//! The switch ratio compares the calibrated power meter (detector port)
//! against the monitoring power meter (monitor port) at classical light
//! levels. Attenuator transmissions come from corrected monitor readings
//! with and without the attenuation applied; the switch ratio and the
//! absolute calibration factor cancel out of that ratio entirely.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::nonlin::{NonlinError, NonlinModel, RangeSetting};
use crate::uncertainty::{UncertainValue, UncertaintyError};

/// Relative sigma floor on the switch ratio: the source stability over a
/// 10 s averaging window, which bounds how well the two routes can be
/// compared regardless of read scatter.
pub const SWITCH_STABILITY_FLOOR_REL: f64 = 9.3e-4;

/// Readings spanning more than this relative spread indicate an unstable
/// source during switch calibration.
pub const MAX_SWITCH_SPREAD_REL: f64 = 0.05;

#[derive(Debug, Clone, thiserror::Error)]
pub enum InstrumentError {
    #[error("invalid record: {0}")]
    BadRecord(String),
    #[error("unstable source: readings span {spread_rel:.3}% relative, above the 5% limit")]
    UnstableSource { spread_rel: f64 },
    #[error("calibrated attenuator gain {alpha} exceeds 1 by more than 3 sigma ({sigma})")]
    SuspiciousGain { alpha: f64, sigma: f64 },
    #[error("calibration dependency: {0}")]
    Dependency(String),
    #[error("no calibration factor at wavelength {0} nm")]
    MissingWavelength(f64),
    #[error(transparent)]
    Nonlin(#[from] NonlinError),
    #[error(transparent)]
    Uncertainty(#[from] UncertaintyError),
}

impl InstrumentError {
    pub fn exit_code(&self) -> i32 {
        match self {
            InstrumentError::BadRecord(_)
            | InstrumentError::UnstableSource { .. }
            | InstrumentError::MissingWavelength(_)
            | InstrumentError::Dependency(_) => crate::error::EXIT_DATA,
            InstrumentError::SuspiciousGain { .. } => crate::error::EXIT_NUMERICAL,
            InstrumentError::Nonlin(e) => e.exit_code(),
            InstrumentError::Uncertainty(_) => crate::error::EXIT_NUMERICAL,
        }
    }
}

/// Raw switch-calibration readings: the calibrated meter on the detector
/// port and the monitor meter on the monitor port, both at -10 dBm.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SwitchCalRecord {
    pub wavelength_nm: f64,
    pub cpm_readings_w: Vec<f64>,
    pub mpm_readings_w: Vec<f64>,
    pub range: RangeSetting,
}

impl SwitchCalRecord {
    fn validate(&self) -> Result<(), InstrumentError> {
        if self.cpm_readings_w.is_empty() || self.mpm_readings_w.is_empty() {
            return Err(InstrumentError::BadRecord(
                "switch calibration requires readings from both meters".into(),
            ));
        }
        if self
            .cpm_readings_w
            .iter()
            .chain(&self.mpm_readings_w)
            .any(|r| !(*r > 0.0))
        {
            return Err(InstrumentError::BadRecord(
                "switch calibration readings must be positive".into(),
            ));
        }
        if self.range != RangeSetting::DbmM10 {
            return Err(InstrumentError::BadRecord(format!(
                "switch calibration runs both meters at -10 dBm, got {} dBm",
                self.range
            )));
        }
        for list in [&self.cpm_readings_w, &self.mpm_readings_w] {
            let max = list.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let min = list.iter().cloned().fold(f64::INFINITY, f64::min);
            let mean = crate::stats::mean(list);
            let spread = (max - min) / mean;
            if spread > MAX_SWITCH_SPREAD_REL {
                return Err(InstrumentError::UnstableSource {
                    spread_rel: spread * 100.0,
                });
            }
        }
        Ok(())
    }
}

/// The switch-calibration product kept for detector-port power estimation:
/// the reading-level ratio and the monitor-meter mean it was taken against.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SwitchCalibration {
    pub wavelength_nm: f64,
    pub ratio: UncertainValue,
    pub mpm_mean: UncertainValue,
    pub range: RangeSetting,
}

/// Switching ratio R_SW = mean(CPM) / mean(MPM), with its relative sigma
/// floored at the source-stability bound.
pub fn switching_ratio(rec: &SwitchCalRecord) -> Result<SwitchCalibration, InstrumentError> {
    rec.validate()?;
    let cpm = UncertainValue::from_reads(&rec.cpm_readings_w)?;
    let mpm = UncertainValue::from_reads(&rec.mpm_readings_w)?;
    let mut ratio = cpm.try_div(&mpm)?;
    let floor = SWITCH_STABILITY_FLOOR_REL * ratio.value().abs();
    let sigma = ratio.sigma();
    if sigma < floor {
        let extra = (floor * floor - sigma * sigma).sqrt();
        ratio = &ratio + &UncertainValue::lift(0.0, extra)?;
    }
    Ok(SwitchCalibration {
        wavelength_nm: rec.wavelength_nm,
        ratio,
        mpm_mean: mpm,
        range: rec.range,
    })
}

/// One attenuator calibration: monitor readings with the attenuator at its
/// zero setting (-10 dBm range) and at the working setting (range `r`),
/// the other two attenuators held at zero throughout.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AttenCalRecord {
    pub attenuator_id: u8,
    pub zero_readings_w: Vec<f64>,
    pub zero_range: RangeSetting,
    pub att_readings_w: Vec<f64>,
    pub att_range: RangeSetting,
    pub nominal_db: f64,
    pub wavelength_nm: f64,
}

impl AttenCalRecord {
    fn validate(&self) -> Result<(), InstrumentError> {
        if !(1..=3).contains(&self.attenuator_id) {
            return Err(InstrumentError::BadRecord(format!(
                "attenuator id must be 1..=3, got {}",
                self.attenuator_id
            )));
        }
        if self.zero_readings_w.is_empty() || self.att_readings_w.is_empty() {
            return Err(InstrumentError::BadRecord(
                "attenuator calibration requires readings in both phases".into(),
            ));
        }
        if self
            .zero_readings_w
            .iter()
            .chain(&self.att_readings_w)
            .any(|r| !(*r > 0.0))
        {
            return Err(InstrumentError::BadRecord(
                "attenuator calibration readings must be positive".into(),
            ));
        }
        if self.zero_range != RangeSetting::DbmM10 {
            return Err(InstrumentError::BadRecord(format!(
                "zero-attenuation phase must run at -10 dBm, got {} dBm",
                self.zero_range
            )));
        }
        Ok(())
    }
}

/// Calibrated attenuator transmission together with the mean readings that
/// produced it, so downstream consumers share the same base variables.
#[derive(Clone, Debug)]
pub struct AttenCalResult {
    pub attenuator_id: u8,
    pub nominal_db: f64,
    /// Linear transmission of the working setting relative to the zero
    /// setting.
    pub alpha: UncertainValue,
    /// Mean raw monitor reading in the zero phase (watts, -10 dBm).
    pub zero_mean: UncertainValue,
    /// Mean raw monitor reading in the attenuated phase (watts, range r).
    pub att_mean: UncertainValue,
}

/// alpha_i = corrected(att phase) / corrected(zero phase). The switch ratio
/// and the calibrated-meter factor appear in both phases and cancel; what
/// remains is the monitor read scatter at the two ranges plus the two
/// nonlinearity-correction uncertainties.
///
/// The mean reading is corrected once at its mean value rather than read by
/// read; the correction factor is smooth enough that the two orderings
/// agree to better than 1e-6 (covered by a test).
pub fn calibrate_attenuator(
    rec: &AttenCalRecord,
    model: &NonlinModel,
) -> Result<AttenCalResult, InstrumentError> {
    rec.validate()?;
    if (model.wavelength_nm - rec.wavelength_nm).abs() > 1e-3 {
        return Err(InstrumentError::Dependency(format!(
            "nonlinearity model is for {} nm, records are at {} nm",
            model.wavelength_nm, rec.wavelength_nm
        )));
    }
    let zero_mean = UncertainValue::from_reads(&rec.zero_readings_w)?;
    let att_mean = UncertainValue::from_reads(&rec.att_readings_w)?;
    let zero_corr = model
        .corrected_reading(rec.zero_range, &zero_mean)
        .map_err(|e| match e {
            NonlinError::InsufficientData(m) => InstrumentError::Dependency(m),
            NonlinError::MissingRangeFactor(r) => {
                InstrumentError::Dependency(format!("model lacks RF for {r} dBm"))
            }
            other => InstrumentError::Nonlin(other),
        })?;
    let att_corr = model
        .corrected_reading(rec.att_range, &att_mean)
        .map_err(|e| match e {
            NonlinError::InsufficientData(m) => InstrumentError::Dependency(m),
            NonlinError::MissingRangeFactor(r) => {
                InstrumentError::Dependency(format!("model lacks RF for {r} dBm"))
            }
            other => InstrumentError::Nonlin(other),
        })?;
    let alpha = att_corr.try_div(&zero_corr)?;
    let sigma = alpha.sigma();
    if alpha.value() > 1.0 + 3.0 * sigma {
        return Err(InstrumentError::SuspiciousGain {
            alpha: alpha.value(),
            sigma,
        });
    }
    Ok(AttenCalResult {
        attenuator_id: rec.attenuator_id,
        nominal_db: rec.nominal_db,
        alpha,
        zero_mean,
        att_mean,
    })
}

/// Externally supplied calibration factors for the calibrated power meter,
/// one per wavelength. Factors are cached as uncertain values so repeated
/// use within a pipeline stays correlated.
#[derive(Clone, Debug, Default)]
pub struct CpmCalibration {
    factors: BTreeMap<i64, UncertainValue>,
}

fn wavelength_key(nm: f64) -> i64 {
    (nm * 1e3).round() as i64
}

impl CpmCalibration {
    pub fn new(entries: &[(f64, f64, f64)]) -> Result<Self, InstrumentError> {
        let mut factors = BTreeMap::new();
        for &(nm, cf, rel_sigma) in entries {
            if !(cf > 0.0) {
                return Err(InstrumentError::BadRecord(format!(
                    "calibration factor must be positive, got {cf} at {nm} nm"
                )));
            }
            factors.insert(wavelength_key(nm), UncertainValue::lift(cf, cf * rel_sigma)?);
        }
        Ok(CpmCalibration { factors })
    }

    pub fn factor(&self, wavelength_nm: f64) -> Result<&UncertainValue, InstrumentError> {
        self.factors
            .get(&wavelength_key(wavelength_nm))
            .ok_or(InstrumentError::MissingWavelength(wavelength_nm))
    }

    pub fn wavelengths_nm(&self) -> Vec<f64> {
        self.factors.keys().map(|k| *k as f64 / 1e3).collect()
    }
}

/// Everything the efficiency analysis needs from calibration: the fitted
/// nonlinearity model, the switch calibration, and the calibrated-meter
/// factor table.
#[derive(Clone, Debug)]
pub struct CalibrationBundle {
    pub nonlin: NonlinModel,
    pub switch: SwitchCalibration,
    pub cpm: CpmCalibration,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nonlin::{calibrate_nonlinearity, plan_nonlin_sweep, NonlinRecord, ADMITTED_RANGES};

    fn linear_model() -> NonlinModel {
        let mut records = Vec::new();
        for point in plan_nonlin_sweep(&ADMITTED_RANGES) {
            let att1 = point.att1_db.max(0.0);
            let p_w = 1e-4 * 10f64.powf(-att1 / 10.0) * if point.att2_db > 0.0 { 0.5 } else { 1.0 };
            for _ in 0..3 {
                records.push(NonlinRecord {
                    att1_db: att1,
                    att2_db: point.att2_db,
                    range: point.range,
                    reading_w: p_w,
                    wavelength_nm: 1550.0,
                });
            }
        }
        calibrate_nonlinearity(&records).unwrap()
    }

    #[test]
    fn identical_routes_give_unity_ratio() {
        let rec = SwitchCalRecord {
            wavelength_nm: 1550.0,
            cpm_readings_w: vec![1e-4; 5],
            mpm_readings_w: vec![1e-4; 5],
            range: RangeSetting::DbmM10,
        };
        let cal = switching_ratio(&rec).unwrap();
        assert_eq!(cal.ratio.value(), 1.0);
        // With zero read scatter the stability floor applies.
        assert!((cal.ratio.sigma() - SWITCH_STABILITY_FLOOR_REL).abs() < 1e-12);
        assert!(cal.ratio.relative_sigma().unwrap() <= 0.0014);
    }

    #[test]
    fn spread_beyond_limit_is_unstable() {
        let rec = SwitchCalRecord {
            wavelength_nm: 1550.0,
            cpm_readings_w: vec![1e-4, 1.06e-4],
            mpm_readings_w: vec![1e-4; 2],
            range: RangeSetting::DbmM10,
        };
        assert!(matches!(
            switching_ratio(&rec),
            Err(InstrumentError::UnstableSource { .. })
        ));
    }

    #[test]
    fn zero_attenuation_calibrates_to_unity() {
        let model = linear_model();
        let rec = AttenCalRecord {
            attenuator_id: 1,
            zero_readings_w: vec![0.8e-4; 5],
            zero_range: RangeSetting::DbmM10,
            att_readings_w: vec![0.8e-4; 5],
            att_range: RangeSetting::DbmM10,
            nominal_db: 0.0,
            wavelength_nm: 1550.0,
        };
        let result = calibrate_attenuator(&rec, &model).unwrap();
        assert!((result.alpha.value() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn attenuated_phase_recovers_transmission() {
        let model = linear_model();
        // 31 dB true attenuation: readings drop by 10^-3.1.
        let alpha_true = 10f64.powf(-3.1);
        let rec = AttenCalRecord {
            attenuator_id: 2,
            zero_readings_w: vec![0.9e-4; 5],
            zero_range: RangeSetting::DbmM10,
            att_readings_w: vec![0.9e-4 * alpha_true; 5],
            att_range: RangeSetting::DbmM40,
            nominal_db: 31.0,
            wavelength_nm: 1550.0,
        };
        let result = calibrate_attenuator(&rec, &model).unwrap();
        assert!(
            ((result.alpha.value() - alpha_true) / alpha_true).abs() < 1e-6,
            "alpha {}",
            result.alpha.value()
        );
    }

    #[test]
    fn gain_above_three_sigma_is_suspicious() {
        let model = linear_model();
        let rec = AttenCalRecord {
            attenuator_id: 1,
            zero_readings_w: vec![0.5e-4, 0.5001e-4, 0.4999e-4],
            zero_range: RangeSetting::DbmM10,
            att_readings_w: vec![0.6e-4, 0.6001e-4, 0.5999e-4],
            att_range: RangeSetting::DbmM10,
            nominal_db: 0.0,
            wavelength_nm: 1550.0,
        };
        assert!(matches!(
            calibrate_attenuator(&rec, &model),
            Err(InstrumentError::SuspiciousGain { .. })
        ));
    }

    #[test]
    fn correct_then_average_matches_average_then_correct() {
        let model = linear_model();
        let reads = [0.82e-4, 0.80e-4, 0.81e-4, 0.79e-4, 0.80e-4];
        let mean = UncertainValue::from_reads(&reads).unwrap();
        let avg_then_corr = model
            .corrected_reading(RangeSetting::DbmM10, &mean)
            .unwrap();
        let corr_each: Vec<f64> = reads
            .iter()
            .map(|r| {
                let c = model.correction(RangeSetting::DbmM10, *r).unwrap();
                r / c.factor.value()
            })
            .collect();
        let corr_then_avg = crate::stats::mean(&corr_each);
        assert!(
            ((avg_then_corr.value() - corr_then_avg) / corr_then_avg).abs() < 1e-6,
            "{} vs {}",
            avg_then_corr.value(),
            corr_then_avg
        );
    }

    #[test]
    fn cpm_table_lookups() {
        let cpm = CpmCalibration::new(&[(1550.0, 1.01, 0.0014)]).unwrap();
        let f = cpm.factor(1550.0).unwrap();
        assert_eq!(f.value(), 1.01);
        assert!((f.relative_sigma().unwrap() - 0.0014).abs() < 1e-12);
        assert!(matches!(
            cpm.factor(1310.0),
            Err(InstrumentError::MissingWavelength(_))
        ));
    }
}
