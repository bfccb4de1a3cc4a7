//! Monitoring-power-meter nonlinearity calibration.
//!
//! A sweep over attenuator settings records meter readings at every range
//! setting, both with and without a nominal 3 dB step applied by a second
//! attenuator. Per range, the mapping from reading `V` to linearized power
//! is modeled as `P_r(V) = V + sum_{k=2..N_r} b_k V^k` (linear coefficient
//! pinned to 1), and all ranges share the unknown true transmission `tau`
//! of the 3 dB step. The joint fit minimizes the weighted residuals of
//! `P_r(V_tau) - tau * P_r(V)` across every range simultaneously; the order
//! `N_r` is chosen per range by reduced chi-square. Readings taken at the
//! same attenuator settings across adjacent ranges then yield the range
//! discontinuity factors `RF` chained up to the -10 dBm range, and the full
//! correction for a reading `v` is `CF = v / P_r(v) * prod RF`. A reading
//! is corrected by dividing it by `CF`.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::stats;
use crate::uncertainty::{fmt_17, UncertainValue, UncertaintyError};

/// Number of consecutive meter reads taken at each sweep setting.
pub const READS_PER_SETTING: usize = 10;

/// Nominal attenuation (dB) of the binary on/off step attenuator.
pub const STEP_ATT_DB: f64 = 3.0;

const MAX_ORDER: usize = 5;
const TAU_SEARCH: (f64, f64) = (0.25, 0.75);
const TAU_SANITY: (f64, f64) = (0.3, 0.7);

#[derive(Debug, Clone, thiserror::Error)]
pub enum NonlinError {
    #[error("range setting {0} dBm is not one of the admitted values")]
    BadRange(i32),
    #[error("invalid record: {0}")]
    BadRecord(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("fit failed: {0}")]
    FitFailure(String),
    #[error("no overlapping (att1, att2) settings between ranges {low} and {high} dBm")]
    MissingOverlap { low: i32, high: i32 },
    #[error("reading {reading_w} W is beyond twice the calibrated span of range {range} dBm")]
    OutOfDomain { range: i32, reading_w: f64 },
    #[error("range {0} dBm has no discontinuity factor; run range_discontinuity first")]
    MissingRangeFactor(i32),
    #[error(transparent)]
    Uncertainty(#[from] UncertaintyError),
}

impl NonlinError {
    pub fn exit_code(&self) -> i32 {
        match self {
            NonlinError::BadRange(_)
            | NonlinError::BadRecord(_)
            | NonlinError::InsufficientData(_)
            | NonlinError::MissingOverlap { .. } => crate::error::EXIT_DATA,
            _ => crate::error::EXIT_NUMERICAL,
        }
    }
}

/// Power-meter range setting in dBm. Only the six instrument ranges are
/// representable.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "i32", into = "i32")]
pub enum RangeSetting {
    DbmM10,
    DbmM20,
    DbmM30,
    DbmM40,
    DbmM50,
    DbmM60,
}

pub const ADMITTED_RANGES: [RangeSetting; 6] = [
    RangeSetting::DbmM10,
    RangeSetting::DbmM20,
    RangeSetting::DbmM30,
    RangeSetting::DbmM40,
    RangeSetting::DbmM50,
    RangeSetting::DbmM60,
];

impl RangeSetting {
    pub fn dbm(self) -> i32 {
        match self {
            RangeSetting::DbmM10 => -10,
            RangeSetting::DbmM20 => -20,
            RangeSetting::DbmM30 => -30,
            RangeSetting::DbmM40 => -40,
            RangeSetting::DbmM50 => -50,
            RangeSetting::DbmM60 => -60,
        }
    }

    pub fn try_from_dbm(dbm: i32) -> Result<Self, NonlinError> {
        ADMITTED_RANGES
            .into_iter()
            .find(|r| r.dbm() == dbm)
            .ok_or(NonlinError::BadRange(dbm))
    }

    /// Nominal full scale of the range in watts (-10 dBm -> 100 uW).
    pub fn full_scale_w(self) -> f64 {
        10f64.powf(self.dbm() as f64 / 10.0) * 1e-3
    }

    /// The adjacent range 10 dB up, if any (-20 -> -10).
    pub fn next_higher(self) -> Option<RangeSetting> {
        RangeSetting::try_from_dbm(self.dbm() + 10).ok()
    }
}

impl TryFrom<i32> for RangeSetting {
    type Error = NonlinError;
    fn try_from(v: i32) -> Result<Self, NonlinError> {
        RangeSetting::try_from_dbm(v)
    }
}

impl From<RangeSetting> for i32 {
    fn from(r: RangeSetting) -> i32 {
        r.dbm()
    }
}

impl std::fmt::Display for RangeSetting {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.dbm())
    }
}

/// One raw meter read from the nonlinearity sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NonlinRecord {
    pub att1_db: f64,
    /// Either 0 or the nominal 3 dB step.
    pub att2_db: f64,
    pub range: RangeSetting,
    pub reading_w: f64,
    pub wavelength_nm: f64,
}

impl NonlinRecord {
    pub fn validate(&self) -> Result<(), NonlinError> {
        if !(self.reading_w > 0.0) || !self.reading_w.is_finite() {
            return Err(NonlinError::BadRecord(format!(
                "reading must be positive, got {} W",
                self.reading_w
            )));
        }
        if (self.att2_db - 0.0).abs() > 1e-9 && (self.att2_db - STEP_ATT_DB).abs() > 1e-9 {
            return Err(NonlinError::BadRecord(format!(
                "att2 setting must be 0 or {} dB, got {}",
                STEP_ATT_DB, self.att2_db
            )));
        }
        Ok(())
    }
}

/// One planned acquisition point: `att1` swept, `att2` toggled, at a range.
/// Negative att1 values can occur at the -10 dBm range; the instrument layer
/// clamps them to 0 dB at execution time.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepPoint {
    pub att1_db: f64,
    pub att2_db: f64,
    pub range: RangeSetting,
}

/// Reproduces the acquisition schedule: target levels 20, 15, 10..1.0 by
/// -0.5, 0.95 are converted to dB, rounded, shifted so the smallest is zero,
/// and offset per range by `-(r + 10) - 3` (the trailing 3 is a fixed offset
/// of the sweep).
pub fn plan_nonlin_sweep(ranges: &[RangeSetting]) -> Vec<SweepPoint> {
    let mut xlist = vec![20.0, 15.0];
    xlist.extend(arange_desc(10.0, 0.9, -0.5));
    xlist.extend(arange_desc(0.95, 0.5, -0.5));

    let base: Vec<f64> = xlist
        .iter()
        .map(|x| (10.0 - 10.0 * x.log10()).round())
        .collect();
    let min = base.iter().cloned().fold(f64::INFINITY, f64::min);

    let mut points = Vec::new();
    for &range in ranges {
        for b in &base {
            let att1 = (b - min) - (range.dbm() as f64 + 10.0) - 3.0;
            for att2 in [0.0, STEP_ATT_DB] {
                points.push(SweepPoint {
                    att1_db: att1,
                    att2_db: att2,
                    range,
                });
            }
        }
    }
    points
}

fn arange_desc(start: f64, stop: f64, step: f64) -> Vec<f64> {
    debug_assert!(step < 0.0);
    let mut out = Vec::new();
    let mut i = 0u32;
    loop {
        let x = start + step * i as f64;
        if x <= stop + 1e-12 {
            break;
        }
        out.push(x);
        i += 1;
    }
    out
}

/// Per-range polynomial in full-scale units together with the stored
/// rescaling transform and fitted data span.
#[derive(Clone, Debug)]
pub struct RangeModel {
    /// Polynomial order N_r (1 means purely linear).
    pub order: usize,
    /// Coefficients c_k for k = 2..=order, full-scale units.
    pub coeffs: Vec<UncertainValue>,
    /// Scale used to normalize readings (the range full scale, watts).
    pub scale_w: f64,
    /// Span of the fitted readings in full-scale units.
    pub span_fs: (f64, f64),
}

impl RangeModel {
    /// P'_r(v') = v' + sum c_k v'^k with coefficient uncertainties attached.
    pub fn eval_poly(&self, v_fs: f64) -> UncertainValue {
        let mut p = UncertainValue::exact(v_fs);
        for (i, c) in self.coeffs.iter().enumerate() {
            let k = (i + 2) as i32;
            p = &p + &(c * v_fs.powi(k));
        }
        p
    }
}

/// The result of evaluating the full nonlinearity correction at a reading.
#[derive(Clone, Debug)]
pub struct Correction {
    pub factor: UncertainValue,
    /// True when the reading fell outside the fitted span (but within the
    /// admissible 2x extrapolation window).
    pub extrapolated: bool,
}

/// Fitted nonlinearity model: per-range polynomials, the shared step
/// transmission tau, range discontinuity factors, and the fit covariance.
#[derive(Clone, Debug)]
pub struct NonlinModel {
    pub wavelength_nm: f64,
    ranges: BTreeMap<RangeSetting, RangeModel>,
    tau: UncertainValue,
    rf: BTreeMap<RangeSetting, UncertainValue>,
    pub reduced_chi2: f64,
    pub dof: usize,
    /// Parameter labels, matching rows/columns of `covariance`.
    pub param_names: Vec<String>,
    pub param_values: Vec<f64>,
    pub covariance: DMatrix<f64>,
    /// SHA-256 of the source session file, when fitted from disk.
    pub source_digest: Option<String>,
}

impl NonlinModel {
    pub fn tau(&self) -> &UncertainValue {
        &self.tau
    }

    pub fn range(&self, r: RangeSetting) -> Option<&RangeModel> {
        self.ranges.get(&r)
    }

    pub fn ranges(&self) -> impl Iterator<Item = (&RangeSetting, &RangeModel)> {
        self.ranges.iter()
    }

    /// Discontinuity factor for the boundary between `r` and `r + 10` dBm.
    /// Defined as exactly 1 for -10 dBm.
    pub fn rf(&self, r: RangeSetting) -> Option<&UncertainValue> {
        self.rf.get(&r)
    }

    pub fn has_rf(&self) -> bool {
        self.rf.len() > 1 || (self.rf.len() == 1 && self.ranges.len() == 1)
    }

    /// Full correction factor CF(lambda, r, v): a reading is corrected by
    /// dividing it by this factor.
    pub fn correction(&self, r: RangeSetting, reading_w: f64) -> Result<Correction, NonlinError> {
        let rm = self
            .ranges
            .get(&r)
            .ok_or_else(|| NonlinError::InsufficientData(format!("range {r} dBm not fitted")))?;
        let v_fs = reading_w / rm.scale_w;
        let (lo, hi) = rm.span_fs;
        if v_fs > 2.0 * hi || v_fs < 0.5 * lo {
            return Err(NonlinError::OutOfDomain {
                range: r.dbm(),
                reading_w,
            });
        }
        let extrapolated = v_fs < lo || v_fs > hi;
        let p = rm.eval_poly(v_fs);
        let mut factor = UncertainValue::exact(v_fs).try_div(&p)?;
        let mut cur = r;
        while cur != RangeSetting::DbmM10 {
            let f = self
                .rf
                .get(&cur)
                .ok_or(NonlinError::MissingRangeFactor(cur.dbm()))?;
            factor = &factor * f;
            cur = cur
                .next_higher()
                .ok_or(NonlinError::MissingRangeFactor(cur.dbm()))?;
        }
        Ok(Correction {
            factor,
            extrapolated,
        })
    }

    /// Reading divided by its correction factor.
    pub fn corrected_reading(
        &self,
        r: RangeSetting,
        reading: &UncertainValue,
    ) -> Result<UncertainValue, NonlinError> {
        let corr = self.correction(r, reading.value())?;
        Ok(reading.try_div(&corr.factor)?)
    }
}

/// Readings grouped by (range, att1): mean and standard error for both
/// att2 states, in full-scale units.
#[derive(Clone, Debug)]
struct SettingGroup {
    range: RangeSetting,
    att1_key: i64,
    v_mean: f64,
    v_se: f64,
    vt_mean: f64,
    vt_se: f64,
    weight: f64,
}

fn att1_key(att1_db: f64) -> i64 {
    (att1_db * 1e6).round() as i64
}

fn group_records(records: &[NonlinRecord]) -> Result<Vec<SettingGroup>, NonlinError> {
    for rec in records {
        rec.validate()?;
    }
    let mut by_key: BTreeMap<(RangeSetting, i64), (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for rec in records {
        let fs = rec.range.full_scale_w();
        let entry = by_key
            .entry((rec.range, att1_key(rec.att1_db)))
            .or_default();
        if rec.att2_db.abs() < 1e-9 {
            entry.0.push(rec.reading_w / fs);
        } else {
            entry.1.push(rec.reading_w / fs);
        }
    }
    let mut groups = Vec::new();
    for ((range, key), (v, vt)) in by_key {
        if v.is_empty() || vt.is_empty() {
            return Err(NonlinError::InsufficientData(format!(
                "setting att1={} dB at range {} dBm lacks one att2 state",
                key as f64 / 1e6,
                range
            )));
        }
        groups.push(SettingGroup {
            range,
            att1_key: key,
            v_mean: stats::mean(&v),
            v_se: stats::standard_error(&v),
            vt_mean: stats::mean(&vt),
            vt_se: stats::standard_error(&vt),
            weight: 0.0,
        });
    }
    Ok(groups)
}

/// Residual weights from the per-setting read scatter, with a floor so a
/// single lucky zero-scatter group cannot dominate. Falls back to uniform
/// weights when the data carries no scatter at all (synthetic input).
fn assign_weights(groups: &mut [SettingGroup]) {
    let tau0 = 0.5;
    let raw: Vec<f64> = groups
        .iter()
        .map(|g| (g.vt_se * g.vt_se + tau0 * tau0 * g.v_se * g.v_se).sqrt())
        .collect();
    let positive: Vec<f64> = raw.iter().copied().filter(|w| *w > 0.0).collect();
    if positive.is_empty() {
        for g in groups.iter_mut() {
            g.weight = 1.0;
        }
        return;
    }
    let floor = 0.05 * stats::median(&positive);
    for (g, w) in groups.iter_mut().zip(raw) {
        g.weight = w.max(floor);
    }
}

struct PreparedRange {
    range: RangeSetting,
    /// Index into `groups` for this range.
    idx: Vec<usize>,
    distinct_att1: usize,
    max_order: usize,
}

/// Weighted linear least squares for one range's coefficients at fixed tau.
/// Returns (coeffs c_2..c_order, chi2 contribution).
fn solve_range(
    groups: &[SettingGroup],
    idx: &[usize],
    order: usize,
    tau: f64,
) -> Result<(Vec<f64>, f64), NonlinError> {
    let n = idx.len();
    let p = order.saturating_sub(1);
    let resid0 = |g: &SettingGroup| (g.vt_mean - tau * g.v_mean) / g.weight;
    if p == 0 {
        let chi2 = idx
            .iter()
            .map(|&i| {
                let r = resid0(&groups[i]);
                r * r
            })
            .sum();
        return Ok((Vec::new(), chi2));
    }
    let mut a = DMatrix::zeros(n, p);
    let mut y = DVector::zeros(n);
    for (row, &i) in idx.iter().enumerate() {
        let g = &groups[i];
        y[row] = -resid0(g);
        for k in 2..=order {
            a[(row, k - 2)] =
                (g.vt_mean.powi(k as i32) - tau * g.v_mean.powi(k as i32)) / g.weight;
        }
    }
    let svd = a.clone().svd(true, true);
    let c = svd
        .solve(&y, 1e-14)
        .map_err(|e| NonlinError::FitFailure(format!("range solve: {e}")))?;
    let resid = &a * &c - &y;
    Ok((c.iter().copied().collect(), resid.norm_squared()))
}

fn chi2_at_tau(
    groups: &[SettingGroup],
    prepared: &[PreparedRange],
    orders: &BTreeMap<RangeSetting, usize>,
    tau: f64,
) -> Result<f64, NonlinError> {
    let mut chi2 = 0.0;
    for pr in prepared {
        let (_, c2) = solve_range(groups, &pr.idx, orders[&pr.range], tau)?;
        chi2 += c2;
    }
    Ok(chi2)
}

/// Coarse scan followed by golden-section refinement; deterministic for a
/// given dataset.
fn minimize_tau(
    groups: &[SettingGroup],
    prepared: &[PreparedRange],
    orders: &BTreeMap<RangeSetting, usize>,
) -> Result<f64, NonlinError> {
    let (lo, hi) = TAU_SEARCH;
    let n_scan = 26;
    let mut best = (lo, f64::INFINITY);
    for i in 0..=n_scan {
        let t = lo + (hi - lo) * i as f64 / n_scan as f64;
        let c = chi2_at_tau(groups, prepared, orders, t)?;
        if c < best.1 {
            best = (t, c);
        }
    }
    let step = (hi - lo) / n_scan as f64;
    let mut a = (best.0 - step).max(lo);
    let mut b = (best.0 + step).min(hi);
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = b - phi * (b - a);
    let mut x2 = a + phi * (b - a);
    let mut f1 = chi2_at_tau(groups, prepared, orders, x1)?;
    let mut f2 = chi2_at_tau(groups, prepared, orders, x2)?;
    for _ in 0..200 {
        if b - a < 1e-12 {
            break;
        }
        if f1 <= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - phi * (b - a);
            f1 = chi2_at_tau(groups, prepared, orders, x1)?;
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + phi * (b - a);
            f2 = chi2_at_tau(groups, prepared, orders, x2)?;
        }
    }
    let tau = 0.5 * (a + b);
    if tau - TAU_SEARCH.0 < 1e-6 || TAU_SEARCH.1 - tau < 1e-6 {
        return Err(NonlinError::FitFailure(format!(
            "tau converged to the search boundary ({tau:.6}); data does not constrain the step"
        )));
    }
    Ok(tau)
}

struct JointFit {
    tau: f64,
    coeffs: BTreeMap<RangeSetting, Vec<f64>>,
    chi2: f64,
    n_obs: usize,
    n_params: usize,
}

fn joint_fit(
    groups: &[SettingGroup],
    prepared: &[PreparedRange],
    orders: &BTreeMap<RangeSetting, usize>,
) -> Result<JointFit, NonlinError> {
    let tau = minimize_tau(groups, prepared, orders)?;
    let mut coeffs = BTreeMap::new();
    let mut chi2 = 0.0;
    let mut n_params = 1; // tau
    for pr in prepared {
        let order = orders[&pr.range];
        let (c, c2) = solve_range(groups, &pr.idx, order, tau)?;
        n_params += c.len();
        chi2 += c2;
        coeffs.insert(pr.range, c);
    }
    Ok(JointFit {
        tau,
        coeffs,
        chi2,
        n_obs: groups.len(),
        n_params,
    })
}

fn reduced_chi2(fit: &JointFit) -> f64 {
    let dof = fit.n_obs.saturating_sub(fit.n_params);
    if dof == 0 {
        f64::INFINITY
    } else {
        fit.chi2 / dof as f64
    }
}

/// Per-range polynomial order selection minimizing reduced chi-square, with
/// a one-standard-error parsimony band: among candidate orders whose reduced
/// chi-square is within sqrt(2/dof) of the minimum, the smallest order wins.
fn select_orders(
    groups: &[SettingGroup],
    prepared: &[PreparedRange],
) -> Result<BTreeMap<RangeSetting, usize>, NonlinError> {
    let mut orders: BTreeMap<RangeSetting, usize> =
        prepared.iter().map(|p| (p.range, 1usize)).collect();
    for _sweep in 0..3 {
        let mut changed = false;
        for pr in prepared {
            let mut cands: Vec<(usize, f64, usize)> = Vec::new();
            for order in 1..=pr.max_order {
                let mut trial = orders.clone();
                trial.insert(pr.range, order);
                let fit = joint_fit(groups, prepared, &trial)?;
                let dof = fit.n_obs.saturating_sub(fit.n_params);
                if dof == 0 {
                    continue;
                }
                cands.push((order, reduced_chi2(&fit), dof));
            }
            if cands.is_empty() {
                continue;
            }
            let (_, min_red, min_dof) = cands
                .iter()
                .copied()
                .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
                .unwrap();
            let band = min_red * (2.0 / min_dof as f64).sqrt() + 1e-12;
            let pick = cands
                .iter()
                .find(|(_, red, _)| *red <= min_red + band)
                .map(|(o, _, _)| *o)
                .unwrap();
            if orders[&pr.range] != pick {
                orders.insert(pr.range, pick);
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    Ok(orders)
}

/// Jointly fits the per-range polynomials and the shared step transmission.
///
/// The covariance over (all coefficients, tau) comes from the Jacobian at
/// the optimum, scaled by the reduced chi-square as `lmfit` does.
pub fn fit_nonlinearity(records: &[NonlinRecord]) -> Result<NonlinModel, NonlinError> {
    if records.is_empty() {
        return Err(NonlinError::InsufficientData("no records".into()));
    }
    let wavelength_nm = records[0].wavelength_nm;
    if records
        .iter()
        .any(|r| (r.wavelength_nm - wavelength_nm).abs() > 1e-6)
    {
        return Err(NonlinError::BadRecord(
            "records mix wavelengths; fit one wavelength at a time".into(),
        ));
    }
    let mut groups = group_records(records)?;
    assign_weights(&mut groups);

    let mut prepared: Vec<PreparedRange> = Vec::new();
    {
        let mut by_range: BTreeMap<RangeSetting, Vec<usize>> = BTreeMap::new();
        for (i, g) in groups.iter().enumerate() {
            by_range.entry(g.range).or_default().push(i);
        }
        for (range, idx) in by_range {
            let distinct = idx.len();
            if distinct < 2 {
                return Err(NonlinError::InsufficientData(format!(
                    "range {range} dBm has {distinct} distinct att1 settings; need at least 2"
                )));
            }
            // Order N_r requires at least N_r + 2 distinct settings.
            let max_order = MAX_ORDER.min(distinct.saturating_sub(2)).max(1);
            prepared.push(PreparedRange {
                range,
                idx,
                distinct_att1: distinct,
                max_order,
            });
        }
    }

    let orders = select_orders(&groups, &prepared)?;
    let fit = joint_fit(&groups, &prepared, &orders)?;

    if fit.tau <= TAU_SANITY.0 || fit.tau >= TAU_SANITY.1 {
        return Err(NonlinError::FitFailure(format!(
            "fitted tau {:.4} outside the sanity window ({}, {}) for a nominal 3 dB step",
            fit.tau, TAU_SANITY.0, TAU_SANITY.1
        )));
    }

    // Full Jacobian over (coefficients per range, tau) at the optimum.
    let n = groups.len();
    let p = fit.n_params;
    let mut col_of: BTreeMap<(RangeSetting, usize), usize> = BTreeMap::new();
    let mut param_names = Vec::new();
    let mut param_values = Vec::new();
    let mut col = 0usize;
    for pr in &prepared {
        let order = orders[&pr.range];
        for k in 2..=order {
            col_of.insert((pr.range, k), col);
            param_names.push(format!("b{}@{}", k, pr.range));
            param_values.push(fit.coeffs[&pr.range][k - 2]);
            col += 1;
        }
    }
    let tau_col = col;
    param_names.push("tau".to_string());
    param_values.push(fit.tau);

    let mut jac = DMatrix::zeros(n, p);
    for pr in &prepared {
        let order = orders[&pr.range];
        let cs = &fit.coeffs[&pr.range];
        for &i in &pr.idx {
            let g = &groups[i];
            let mut p_v = g.v_mean;
            for k in 2..=order {
                p_v += cs[k - 2] * g.v_mean.powi(k as i32);
            }
            for k in 2..=order {
                jac[(i, col_of[&(pr.range, k)])] =
                    (g.vt_mean.powi(k as i32) - fit.tau * g.v_mean.powi(k as i32)) / g.weight;
            }
            jac[(i, tau_col)] = -p_v / g.weight;
        }
    }
    let jtj = jac.transpose() * &jac;
    let dof = n.saturating_sub(p);
    let red = if dof > 0 { fit.chi2 / dof as f64 } else { 0.0 };
    let cov_unscaled = jtj.clone().try_inverse().ok_or_else(|| {
        NonlinError::FitFailure("singular normal matrix; parameters not identifiable".into())
    })?;
    let covariance = &cov_unscaled * red;

    let uvs = UncertainValue::correlated(&param_values, &covariance)?;

    let mut ranges = BTreeMap::new();
    for pr in &prepared {
        let order = orders[&pr.range];
        let mut coeffs = Vec::new();
        for k in 2..=order {
            coeffs.push(uvs[col_of[&(pr.range, k)]].clone());
        }
        let fs = pr.range.full_scale_w();
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &i in &pr.idx {
            let g = &groups[i];
            lo = lo.min(g.v_mean).min(g.vt_mean);
            hi = hi.max(g.v_mean).max(g.vt_mean);
        }
        ranges.insert(
            pr.range,
            RangeModel {
                order,
                coeffs,
                scale_w: fs,
                span_fs: (lo, hi),
            },
        );
        let _ = pr.distinct_att1;
    }

    let mut rf = BTreeMap::new();
    if ranges.contains_key(&RangeSetting::DbmM10) {
        rf.insert(RangeSetting::DbmM10, UncertainValue::exact(1.0));
    }

    Ok(NonlinModel {
        wavelength_nm,
        ranges,
        tau: uvs[tau_col].clone(),
        rf,
        reduced_chi2: red,
        dof,
        param_names,
        param_values,
        covariance,
        source_digest: None,
    })
}

/// Populates the range discontinuity factors from readings taken at the
/// same (att1, att2) settings across adjacent ranges. The factor at a
/// boundary is the unweighted mean of the corrected-reading ratios; its
/// uncertainty combines the standard error of that mean with the
/// model-covariance contribution.
pub fn range_discontinuity(
    mut model: NonlinModel,
    records: &[NonlinRecord],
) -> Result<NonlinModel, NonlinError> {
    let groups = group_records(records)?;
    let mut by_range: BTreeMap<RangeSetting, BTreeMap<i64, &SettingGroup>> = BTreeMap::new();
    for g in &groups {
        by_range.entry(g.range).or_default().insert(g.att1_key, g);
    }
    model
        .rf
        .insert(RangeSetting::DbmM10, UncertainValue::exact(1.0));

    let fitted: Vec<RangeSetting> = model.ranges.keys().copied().collect();
    for r in fitted {
        if r == RangeSetting::DbmM10 {
            continue;
        }
        let Some(higher) = r.next_higher() else {
            continue;
        };
        if !model.ranges.contains_key(&higher) {
            continue;
        }
        let (Some(low_groups), Some(high_groups)) = (by_range.get(&r), by_range.get(&higher))
        else {
            return Err(NonlinError::MissingOverlap {
                low: r.dbm(),
                high: higher.dbm(),
            });
        };
        let rm_low = &model.ranges[&r];
        let rm_high = &model.ranges[&higher];
        let mut ratios: Vec<UncertainValue> = Vec::new();
        let mut meas_ids = std::collections::BTreeSet::new();
        for (key, gl) in low_groups {
            let Some(gh) = high_groups.get(key) else {
                continue;
            };
            for (vl, sel, vh, seh) in [
                (gl.v_mean, gl.v_se, gh.v_mean, gh.v_se),
                (gl.vt_mean, gl.vt_se, gh.vt_mean, gh.vt_se),
            ] {
                let rl = UncertainValue::lift(vl, sel)?;
                let rh = UncertainValue::lift(vh, seh)?;
                meas_ids.extend(rl.base_ids());
                meas_ids.extend(rh.base_ids());
                let p_low = poly_uv(rm_low, &rl) * rm_low.scale_w;
                let p_high = poly_uv(rm_high, &rh) * rm_high.scale_w;
                ratios.push(p_low.try_div(&p_high)?);
            }
        }
        if ratios.is_empty() {
            return Err(NonlinError::MissingOverlap {
                low: r.dbm(),
                high: higher.dbm(),
            });
        }
        let mean = UncertainValue::mean_of(&ratios);
        let values: Vec<f64> = ratios.iter().map(|u| u.value()).collect();
        let scatter_se = stats::standard_error(&values);
        let explained = mean.sigma_restricted(&meas_ids);
        let excess = (scatter_se * scatter_se - explained * explained).max(0.0).sqrt();
        let rf = &mean + &UncertainValue::lift(0.0, excess)?;
        model.rf.insert(r, rf);
    }
    Ok(model)
}

/// Polynomial evaluated at an uncertain reading (chain rule through both
/// the reading and the coefficients).
fn poly_uv(rm: &RangeModel, v: &UncertainValue) -> UncertainValue {
    let mut p = v.clone();
    for (i, c) in rm.coeffs.iter().enumerate() {
        p = &p + &(c * &v.powi((i + 2) as i32));
    }
    p
}

/// Convenience: joint fit followed by discontinuity chaining on the same
/// sweep records.
pub fn calibrate_nonlinearity(records: &[NonlinRecord]) -> Result<NonlinModel, NonlinError> {
    let model = fit_nonlinearity(records)?;
    range_discontinuity(model, records)
}

// --- serialization -----------------------------------------------------

#[derive(Serialize, Deserialize)]
struct RangeModelFile {
    order: usize,
    scale_w: String,
    span_fs: [String; 2],
    coeffs: Vec<UncertainValue>,
}

#[derive(Serialize, Deserialize)]
struct NonlinModelFile {
    wavelength_nm: f64,
    tau: UncertainValue,
    reduced_chi2: String,
    dof: usize,
    ranges: BTreeMap<String, RangeModelFile>,
    rf: BTreeMap<String, UncertainValue>,
    param_names: Vec<String>,
    param_values: Vec<String>,
    covariance: Vec<Vec<String>>,
    source_digest: Option<String>,
}

impl Serialize for NonlinModel {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let file = NonlinModelFile {
            wavelength_nm: self.wavelength_nm,
            tau: self.tau.clone(),
            reduced_chi2: fmt_17(self.reduced_chi2),
            dof: self.dof,
            ranges: self
                .ranges
                .iter()
                .map(|(r, rm)| {
                    (
                        r.dbm().to_string(),
                        RangeModelFile {
                            order: rm.order,
                            scale_w: fmt_17(rm.scale_w),
                            span_fs: [fmt_17(rm.span_fs.0), fmt_17(rm.span_fs.1)],
                            coeffs: rm.coeffs.clone(),
                        },
                    )
                })
                .collect(),
            rf: self
                .rf
                .iter()
                .map(|(r, u)| (r.dbm().to_string(), u.clone()))
                .collect(),
            param_names: self.param_names.clone(),
            param_values: self.param_values.iter().map(|v| fmt_17(*v)).collect(),
            covariance: self
                .covariance
                .row_iter()
                .map(|row| row.iter().map(|v| fmt_17(*v)).collect())
                .collect(),
            source_digest: self.source_digest.clone(),
        };
        file.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for NonlinModel {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        use serde::de::Error;
        let file = NonlinModelFile::deserialize(deserializer)?;
        let parse = |s: &String| -> Result<f64, D::Error> {
            s.trim()
                .parse::<f64>()
                .map_err(|e| D::Error::custom(format!("bad float {s:?}: {e}")))
        };
        let n = file.param_names.len();
        if file.param_values.len() != n || file.covariance.len() != n {
            return Err(D::Error::custom("parameter/covariance size mismatch"));
        }
        let mut values = Vec::with_capacity(n);
        for v in &file.param_values {
            values.push(parse(v)?);
        }
        let mut cov = DMatrix::zeros(n, n);
        for (i, row) in file.covariance.iter().enumerate() {
            if row.len() != n {
                return Err(D::Error::custom("covariance row size mismatch"));
            }
            for (j, v) in row.iter().enumerate() {
                cov[(i, j)] = parse(v)?;
            }
        }
        let uvs = UncertainValue::correlated(&values, &cov)
            .map_err(|e| D::Error::custom(format!("covariance: {e}")))?;

        let mut ranges = BTreeMap::new();
        for (key, rmf) in &file.ranges {
            let dbm: i32 = key
                .parse()
                .map_err(|_| D::Error::custom(format!("bad range key {key:?}")))?;
            let range =
                RangeSetting::try_from_dbm(dbm).map_err(|e| D::Error::custom(e.to_string()))?;
            let mut coeffs = Vec::new();
            for k in 2..=rmf.order {
                let name = format!("b{k}@{dbm}");
                let idx = file
                    .param_names
                    .iter()
                    .position(|p| *p == name)
                    .ok_or_else(|| D::Error::custom(format!("missing parameter {name}")))?;
                coeffs.push(uvs[idx].clone());
            }
            ranges.insert(
                range,
                RangeModel {
                    order: rmf.order,
                    coeffs,
                    scale_w: parse(&rmf.scale_w)?,
                    span_fs: (parse(&rmf.span_fs[0])?, parse(&rmf.span_fs[1])?),
                },
            );
        }
        let tau_idx = file
            .param_names
            .iter()
            .position(|p| p == "tau")
            .ok_or_else(|| D::Error::custom("missing parameter tau"))?;
        let mut rf = BTreeMap::new();
        for (key, u) in &file.rf {
            let dbm: i32 = key
                .parse()
                .map_err(|_| D::Error::custom(format!("bad rf key {key:?}")))?;
            let range =
                RangeSetting::try_from_dbm(dbm).map_err(|e| D::Error::custom(e.to_string()))?;
            if range == RangeSetting::DbmM10 {
                rf.insert(range, UncertainValue::exact(1.0));
            } else {
                rf.insert(range, u.clone());
            }
        }
        Ok(NonlinModel {
            wavelength_nm: file.wavelength_nm,
            ranges,
            tau: uvs[tau_idx].clone(),
            rf,
            reduced_chi2: parse(&file.reduced_chi2)?,
            dof: file.dof,
            param_names: file.param_names,
            param_values: values,
            covariance: cov,
            source_digest: file.source_digest,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independently derived schedule for the -10 dBm range: the 22 target
    /// levels map to rounded dB offsets [-3,-2,0,0,0,1,1,1,2,2,2,3,3,3,4,
    /// 5,5,6,7,8,10,10] after the shift and range offset cancel.
    const EXPECTED_M10: [f64; 22] = [
        -3.0, -2.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 3.0, 3.0, 3.0, 4.0, 5.0, 5.0,
        6.0, 7.0, 8.0, 10.0, 10.0,
    ];

    #[test]
    fn sweep_schedule_matches_hand_derivation() {
        let plan = plan_nonlin_sweep(&[RangeSetting::DbmM10]);
        assert_eq!(plan.len(), 22 * 2);
        let att1: Vec<f64> = plan
            .iter()
            .filter(|p| p.att2_db == 0.0)
            .map(|p| p.att1_db)
            .collect();
        assert_eq!(att1, EXPECTED_M10);
        // x = 20 is the minimum element and maps to shifted base 0, so the
        // -10 dBm offset arithmetic lands on -3; x = 10 maps to shifted 3.
        assert_eq!(att1[0], -3.0);
        assert_eq!(att1[2], 0.0);
    }

    #[test]
    fn sweep_schedule_shifts_per_range() {
        let plan = plan_nonlin_sweep(&[RangeSetting::DbmM20]);
        let att1: Vec<f64> = plan
            .iter()
            .filter(|p| p.att2_db == 0.0)
            .map(|p| p.att1_db)
            .collect();
        let expect: Vec<f64> = EXPECTED_M10.iter().map(|a| a + 10.0).collect();
        assert_eq!(att1, expect);
    }

    /// Noise-free synthetic sweep through a meter with per-range polynomial
    /// response. The generator inverts the polynomial with Newton's method,
    /// independent of the fit path.
    fn synth_records(
        ranges: &[RangeSetting],
        coeffs: &BTreeMap<RangeSetting, Vec<f64>>,
        tau_true: f64,
        reads: usize,
    ) -> Vec<NonlinRecord> {
        let mut out = Vec::new();
        for point in plan_nonlin_sweep(ranges) {
            let att1 = point.att1_db.max(0.0);
            let p_w = 1e-4
                * 10f64.powf(-att1 / 10.0)
                * if point.att2_db > 0.0 { tau_true } else { 1.0 };
            let fs = point.range.full_scale_w();
            let target = p_w / fs;
            let cs = coeffs.get(&point.range).cloned().unwrap_or_default();
            let mut v = target;
            for _ in 0..40 {
                let mut f = v - target;
                let mut df = 1.0;
                for (i, c) in cs.iter().enumerate() {
                    let k = (i + 2) as i32;
                    f += c * v.powi(k);
                    df += c * k as f64 * v.powi(k - 1);
                }
                v -= f / df;
            }
            for _ in 0..reads {
                out.push(NonlinRecord {
                    att1_db: att1,
                    att2_db: point.att2_db,
                    range: point.range,
                    reading_w: v * fs,
                    wavelength_nm: 1550.0,
                });
            }
        }
        out
    }

    #[test]
    fn linear_meter_fits_identity() {
        let records = synth_records(&ADMITTED_RANGES, &BTreeMap::new(), 0.5, 3);
        let model = calibrate_nonlinearity(&records).unwrap();
        assert!((model.tau().value() - 0.5).abs() < 1e-6, "tau {}", model.tau().value());
        for (r, rm) in model.ranges() {
            assert_eq!(rm.order, 1, "range {r} should select the linear model");
            let corr = model.correction(*r, 0.5 * rm.scale_w).unwrap();
            assert!((corr.factor.value() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn quadratic_meter_recovers_coefficient_and_correction() {
        // c2 = 0.01 in full-scale units at -10 dBm; at a full-scale reading
        // the polynomial ratio is 1/(1 + 0.01) = 0.990099...
        let mut coeffs = BTreeMap::new();
        coeffs.insert(RangeSetting::DbmM10, vec![0.01]);
        let records = synth_records(&[RangeSetting::DbmM10], &coeffs, 0.5, 3);
        let model = calibrate_nonlinearity(&records).unwrap();
        let rm = model.range(RangeSetting::DbmM10).unwrap();
        assert_eq!(rm.order, 2);
        assert!((rm.coeffs[0].value() - 0.01).abs() < 1e-6);
        assert!((model.tau().value() - 0.5).abs() < 1e-8);
        let corr = model.correction(RangeSetting::DbmM10, 1e-4).unwrap();
        assert!(
            (corr.factor.value() - 0.9900990099009901).abs() < 1e-6,
            "CF {}",
            corr.factor.value()
        );
    }

    #[test]
    fn scale_change_rescales_coefficients_but_not_ratios() {
        let mut coeffs = BTreeMap::new();
        coeffs.insert(RangeSetting::DbmM20, vec![0.02, -0.005]);
        coeffs.insert(RangeSetting::DbmM10, vec![0.01]);
        let base = synth_records(
            &[RangeSetting::DbmM10, RangeSetting::DbmM20],
            &coeffs,
            0.5,
            3,
        );
        let c = 1.25;
        let scaled: Vec<NonlinRecord> = base
            .iter()
            .map(|r| {
                let mut r = r.clone();
                if r.range == RangeSetting::DbmM20 {
                    r.reading_w *= c;
                }
                r
            })
            .collect();
        let m0 = calibrate_nonlinearity(&base).unwrap();
        let m1 = calibrate_nonlinearity(&scaled).unwrap();
        // Corrected power ratio between two readings within the scaled range
        // is unchanged.
        let fs = RangeSetting::DbmM20.full_scale_w();
        let (va, vb) = (0.4 * fs, 0.9 * fs);
        let ratio0 = {
            let ca = m0.correction(RangeSetting::DbmM20, va).unwrap().factor;
            let cb = m0.correction(RangeSetting::DbmM20, vb).unwrap().factor;
            (va / ca.value()) / (vb / cb.value())
        };
        let ratio1 = {
            let ca = m1.correction(RangeSetting::DbmM20, va * c).unwrap().factor;
            let cb = m1.correction(RangeSetting::DbmM20, vb * c).unwrap().factor;
            (va * c / ca.value()) / (vb * c / cb.value())
        };
        assert!(
            ((ratio0 - ratio1) / ratio0).abs() < 1e-9,
            "{ratio0} vs {ratio1}"
        );
        // And the fitted c2 rescales as c^(1-k) = 1/c.
        let c2_0 = m0.range(RangeSetting::DbmM20).unwrap().coeffs[0].value();
        let c2_1 = m1.range(RangeSetting::DbmM20).unwrap().coeffs[0].value();
        assert!(((c2_0 / c - c2_1) / c2_0).abs() < 1e-6);
    }

    #[test]
    fn discontinuity_free_data_gives_unity_rf() {
        let records = synth_records(
            &[RangeSetting::DbmM10, RangeSetting::DbmM20, RangeSetting::DbmM30],
            &BTreeMap::new(),
            0.5,
            3,
        );
        let model = calibrate_nonlinearity(&records).unwrap();
        assert_eq!(model.rf(RangeSetting::DbmM10).unwrap().value(), 1.0);
        for r in [RangeSetting::DbmM20, RangeSetting::DbmM30] {
            let rf = model.rf(r).unwrap();
            assert!((rf.value() - 1.0).abs() < 1e-9, "rf {}", rf.value());
        }
    }

    #[test]
    fn rf_is_exactly_one_at_minus_10() {
        let records = synth_records(&ADMITTED_RANGES, &BTreeMap::new(), 0.5, 3);
        let model = calibrate_nonlinearity(&records).unwrap();
        let rf = model.rf(RangeSetting::DbmM10).unwrap();
        assert_eq!(rf.value(), 1.0);
        assert_eq!(rf.sigma(), 0.0);
    }

    #[test]
    fn missing_att2_state_is_reported() {
        let mut records = synth_records(&[RangeSetting::DbmM10], &BTreeMap::new(), 0.5, 2);
        records.retain(|r| !(r.att1_db == 10.0 && r.att2_db > 0.0));
        let err = fit_nonlinearity(&records).unwrap_err();
        assert!(matches!(err, NonlinError::InsufficientData(_)), "{err}");
    }

    #[test]
    fn out_of_domain_reading_is_rejected() {
        let records = synth_records(&[RangeSetting::DbmM10], &BTreeMap::new(), 0.5, 2);
        let model = calibrate_nonlinearity(&records).unwrap();
        let err = model
            .correction(RangeSetting::DbmM10, 10.0 * 1e-4)
            .unwrap_err();
        assert!(matches!(err, NonlinError::OutOfDomain { .. }));
    }

    #[test]
    fn model_json_roundtrip_preserves_values() {
        let mut coeffs = BTreeMap::new();
        coeffs.insert(RangeSetting::DbmM10, vec![0.01]);
        let records = synth_records(&[RangeSetting::DbmM10], &coeffs, 0.5, 3);
        let model = calibrate_nonlinearity(&records).unwrap();
        let json = serde_json::to_string_pretty(&model).unwrap();
        let back: NonlinModel = serde_json::from_str(&json).unwrap();
        assert_eq!(back.tau().value(), model.tau().value());
        let v = 0.8e-4;
        let c0 = model.correction(RangeSetting::DbmM10, v).unwrap().factor;
        let c1 = back.correction(RangeSetting::DbmM10, v).unwrap().factor;
        assert_eq!(c0.value(), c1.value());
        assert!((c0.sigma() - c1.sigma()).abs() <= 1e-18 + 1e-9 * c0.sigma());
    }
}
