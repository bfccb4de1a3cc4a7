//! Polarization-sweep analysis: transmission correction and the
//! max-to-min sensitivity ratio.
//!
//! The free-space controller has a polarization-setting dependent
//! transmission, measured at classical light levels as the ratio of the two
//! power meters at every grid point. Corrected count rates divide the
//! dark-subtracted rate by that transmission factor, normalized to its grid
//! maximum. No smoothing is applied anywhere; the sensitivity is the ratio
//! of the extreme raw grid points.

use serde::{Deserialize, Serialize};

use crate::sde::rate_from_gates;
use crate::uncertainty::{UncertainValue, UncertaintyError};

/// The sweep covers a fixed 21 x 21 grid of waveplate settings.
pub const GRID_POINTS_PER_AXIS: usize = 21;

#[derive(Debug, Clone, thiserror::Error)]
pub enum PolError {
    #[error("invalid grid: {0}")]
    BadGrid(String),
    #[error("incomplete grid, missing {} points, first at (qwp {:.3} deg, hwp {:.3} deg)", missing.len(), missing.first().map(|p| p.0).unwrap_or(f64::NAN), missing.first().map(|p| p.1).unwrap_or(f64::NAN))]
    IncompleteGrid { missing: Vec<(f64, f64)> },
    #[error("degenerate grid: {0}")]
    DegenerateGrid(String),
    #[error(transparent)]
    Uncertainty(#[from] UncertaintyError),
    #[error(transparent)]
    Sde(#[from] Box<crate::sde::SdeError>),
}

/// One grid point: counter gates at the waveplate angles plus the
/// classical-level transmission readings taken at the same angles.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PolGridRecord {
    pub qwp_deg: f64,
    pub hwp_deg: f64,
    /// Counts per 1 s gate.
    pub counts: Vec<u64>,
    /// Per-setting dark gates, when the session recorded them.
    pub dark_counts: Option<Vec<u64>>,
    pub cpm_w: f64,
    pub mpm_w: f64,
}

/// A validated, complete 21 x 21 sweep.
#[derive(Clone, Debug)]
pub struct PolGrid {
    records: Vec<PolGridRecord>,
}

impl PolGrid {
    pub fn new(records: Vec<PolGridRecord>) -> Result<Self, PolError> {
        let n = GRID_POINTS_PER_AXIS * GRID_POINTS_PER_AXIS;
        for r in &records {
            if r.counts.is_empty() {
                return Err(PolError::BadGrid(format!(
                    "no counter gates at (qwp {}, hwp {})",
                    r.qwp_deg, r.hwp_deg
                )));
            }
            if !(r.cpm_w > 0.0) || !(r.mpm_w > 0.0) {
                return Err(PolError::BadGrid(format!(
                    "non-positive transmission readings at (qwp {}, hwp {})",
                    r.qwp_deg, r.hwp_deg
                )));
            }
        }
        let mut qwp: Vec<f64> = Vec::new();
        let mut hwp: Vec<f64> = Vec::new();
        for r in &records {
            if !qwp.iter().any(|q| (q - r.qwp_deg).abs() < 1e-6) {
                qwp.push(r.qwp_deg);
            }
            if !hwp.iter().any(|h| (h - r.hwp_deg).abs() < 1e-6) {
                hwp.push(r.hwp_deg);
            }
        }
        qwp.sort_by(|a, b| a.partial_cmp(b).unwrap());
        hwp.sort_by(|a, b| a.partial_cmp(b).unwrap());
        if qwp.len() != GRID_POINTS_PER_AXIS || hwp.len() != GRID_POINTS_PER_AXIS {
            return Err(PolError::BadGrid(format!(
                "expected a {GRID_POINTS_PER_AXIS} x {GRID_POINTS_PER_AXIS} grid, found {} x {} distinct angles",
                qwp.len(),
                hwp.len()
            )));
        }
        let mut missing = Vec::new();
        for q in &qwp {
            for h in &hwp {
                let found = records
                    .iter()
                    .filter(|r| (r.qwp_deg - q).abs() < 1e-6 && (r.hwp_deg - h).abs() < 1e-6)
                    .count();
                match found {
                    0 => missing.push((*q, *h)),
                    1 => {}
                    _ => {
                        return Err(PolError::BadGrid(format!(
                            "duplicate grid point at (qwp {q}, hwp {h})"
                        )))
                    }
                }
            }
        }
        if records.len() != n || !missing.is_empty() {
            return Err(PolError::IncompleteGrid { missing });
        }
        Ok(PolGrid { records })
    }

    pub fn records(&self) -> &[PolGridRecord] {
        &self.records
    }
}

/// A transmission-corrected grid point.
#[derive(Clone, Debug, Serialize)]
pub struct CorrectedPoint {
    pub qwp_deg: f64,
    pub hwp_deg: f64,
    /// Transmission factor normalized to the grid maximum.
    pub transmission: f64,
    pub rate_hz: UncertainValue,
}

/// Divides the dark-subtracted count rate at each point by the per-point
/// transmission factor t = cpm/mpm normalized to its grid maximum.
/// Per-setting dark gates are used when recorded; otherwise the supplied
/// session dark rate is subtracted everywhere.
pub fn transmission_correct(
    grid: &PolGrid,
    session_dark_rate: &UncertainValue,
) -> Result<Vec<CorrectedPoint>, PolError> {
    let t_raw: Vec<f64> = grid
        .records
        .iter()
        .map(|r| r.cpm_w / r.mpm_w)
        .collect();
    let t_max = t_raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(t_max > 0.0) {
        return Err(PolError::DegenerateGrid(
            "transmission factors are not positive".into(),
        ));
    }
    let mut out = Vec::with_capacity(grid.records.len());
    for (rec, t) in grid.records.iter().zip(&t_raw) {
        let rate = rate_from_gates(&rec.counts).map_err(Box::new)?;
        let dark = match &rec.dark_counts {
            Some(gates) if !gates.is_empty() => rate_from_gates(gates).map_err(Box::new)?,
            _ => session_dark_rate.clone(),
        };
        let t_norm = t / t_max;
        let corrected = &(&rate - &dark) / t_norm;
        out.push(CorrectedPoint {
            qwp_deg: rec.qwp_deg,
            hwp_deg: rec.hwp_deg,
            transmission: t_norm,
            rate_hz: corrected,
        });
    }
    Ok(out)
}

/// The extreme grid points (max, min) by corrected rate; ties keep the
/// first occurrence.
pub fn extremes(corrected: &[CorrectedPoint]) -> Option<(&CorrectedPoint, &CorrectedPoint)> {
    let first = corrected.first()?;
    let mut max = first;
    let mut min = first;
    for p in corrected {
        if p.rate_hz.value() > max.rate_hz.value() {
            max = p;
        }
        if p.rate_hz.value() < min.rate_hz.value() {
            min = p;
        }
    }
    Some((max, min))
}

/// Polarization sensitivity: the ratio of the maximum to the minimum
/// corrected rate over the raw grid points, uncertainties propagated from
/// the two extremes.
pub fn polarization_sensitivity(
    corrected: &[CorrectedPoint],
) -> Result<UncertainValue, PolError> {
    let (max, min) =
        extremes(corrected).ok_or_else(|| PolError::DegenerateGrid("empty grid".into()))?;
    if !(min.rate_hz.value() > 0.0) {
        return Err(PolError::DegenerateGrid(format!(
            "non-positive minimum corrected rate {} at (qwp {:.2}, hwp {:.2})",
            min.rate_hz.value(),
            min.qwp_deg,
            min.hwp_deg
        )));
    }
    Ok(max.rate_hz.try_div(&min.rate_hz)?)
}

/// Serializable polarization-sensitivity summary for one device session.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PsResult {
    pub wavelength_nm: f64,
    pub ps: UncertainValue,
    pub max_qwp_deg: f64,
    pub max_hwp_deg: f64,
    pub min_qwp_deg: f64,
    pub min_hwp_deg: f64,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform_grid(counts: u64, gates: usize, t: impl Fn(f64, f64) -> f64) -> Vec<PolGridRecord> {
        let mut out = Vec::new();
        for i in 0..GRID_POINTS_PER_AXIS {
            for j in 0..GRID_POINTS_PER_AXIS {
                let q = 180.0 * i as f64 / GRID_POINTS_PER_AXIS as f64;
                let h = 90.0 * j as f64 / GRID_POINTS_PER_AXIS as f64;
                out.push(PolGridRecord {
                    qwp_deg: q,
                    hwp_deg: h,
                    counts: vec![counts; gates],
                    dark_counts: None,
                    cpm_w: 1e-4 * t(q, h),
                    mpm_w: 1e-4,
                });
            }
        }
        out
    }

    #[test]
    fn constant_grid_has_unit_sensitivity() {
        let grid = PolGrid::new(uniform_grid(100_000, 3, |_, _| 1.0)).unwrap();
        let dark = UncertainValue::exact(0.0);
        let corrected = transmission_correct(&grid, &dark).unwrap();
        let ps = polarization_sensitivity(&corrected).unwrap();
        assert_eq!(ps.value(), 1.0);
    }

    #[test]
    fn uniform_transmission_is_identity_correction() {
        let grid = PolGrid::new(uniform_grid(50_000, 2, |_, _| 1.0)).unwrap();
        let dark = UncertainValue::exact(0.0);
        let corrected = transmission_correct(&grid, &dark).unwrap();
        for p in &corrected {
            assert_eq!(p.transmission, 1.0);
            assert_eq!(p.rate_hz.value(), 50_000.0);
        }
    }

    #[test]
    fn transmission_ripple_divides_out() {
        // Counts follow the transmission ripple exactly; correction must
        // flatten the grid.
        let ripple = |q: f64, h: f64| 1.0 - 0.02 * ((q / 180.0 + h / 90.0) * std::f64::consts::PI).sin().powi(2);
        let mut recs = uniform_grid(0, 1, ripple);
        for r in &mut recs {
            let t = r.cpm_w / r.mpm_w;
            r.counts = vec![(230_000.0 * t).round() as u64; 1];
        }
        let grid = PolGrid::new(recs).unwrap();
        let dark = UncertainValue::exact(0.0);
        let corrected = transmission_correct(&grid, &dark).unwrap();
        let ps = polarization_sensitivity(&corrected).unwrap();
        // Rounding counts to integers leaves ppm-level residue.
        assert!((ps.value() - 1.0).abs() < 1e-4, "ps {}", ps.value());
    }

    #[test]
    fn missing_point_is_reported_with_coordinates() {
        let mut recs = uniform_grid(1000, 1, |_, _| 1.0);
        recs.pop();
        match PolGrid::new(recs) {
            Err(PolError::IncompleteGrid { missing }) => assert_eq!(missing.len(), 1),
            other => panic!("expected IncompleteGrid, got {other:?}"),
        }
    }

    #[test]
    fn nonpositive_minimum_is_degenerate() {
        let mut recs = uniform_grid(1000, 1, |_, _| 1.0);
        recs[5].counts = vec![0];
        let grid = PolGrid::new(recs).unwrap();
        let dark = UncertainValue::lift(10.0, 1.0).unwrap();
        let corrected = transmission_correct(&grid, &dark).unwrap();
        assert!(matches!(
            polarization_sensitivity(&corrected),
            Err(PolError::DegenerateGrid(_))
        ));
    }

    proptest::proptest! {
        /// PS >= 1 always, and PS is invariant under global scaling.
        #[test]
        fn sensitivity_at_least_one_and_scale_invariant(
            seed in 0u64..1000, scale in 0.1f64..10.0
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let corrected: Vec<CorrectedPoint> = (0..441)
                .map(|i| CorrectedPoint {
                    qwp_deg: (i / 21) as f64,
                    hwp_deg: (i % 21) as f64,
                    transmission: 1.0,
                    rate_hz: UncertainValue::lift(
                        1e5 * (1.0 + 0.02 * rng.random::<f64>()),
                        300.0,
                    )
                    .unwrap(),
                })
                .collect();
            let scaled: Vec<CorrectedPoint> = corrected
                .iter()
                .map(|p| CorrectedPoint {
                    qwp_deg: p.qwp_deg,
                    hwp_deg: p.hwp_deg,
                    transmission: p.transmission,
                    rate_hz: &p.rate_hz * scale,
                })
                .collect();
            let ps = polarization_sensitivity(&corrected).unwrap();
            let ps_scaled = polarization_sensitivity(&scaled).unwrap();
            proptest::prop_assert!(ps.value() >= 1.0);
            proptest::prop_assert!(((ps.value() - ps_scaled.value()) / ps.value()).abs() < 1e-12);
        }
    }
}
