//! Scenario schema: the declared ground truth of every virtual instrument.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::nonlin::RangeSetting;
use crate::sde::DeadTimeModel;
use crate::sim::{hash_gauss, hash_uniform};

/// Laser drift models. The random-walk default is sized so the Allan
/// deviation of fractional power at 10 s averaging is about 9.3e-4.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum DriftModel {
    None,
    LinearPpmPerHour { ppm_per_hour: f64 },
    RandomWalk { sigma_per_sqrt_s: f64 },
}

impl Default for DriftModel {
    fn default() -> Self {
        DriftModel::RandomWalk {
            sigma_per_sqrt_s: 5.0e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LaserTruth {
    pub power_w: f64,
    pub drift: DriftModel,
}

impl Default for LaserTruth {
    fn default() -> Self {
        LaserTruth {
            power_w: 1e-4,
            drift: DriftModel::default(),
        }
    }
}

/// True transmissions of one attenuator. Settings not overridden get the
/// nominal transmission perturbed by a deterministic per-setting deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttenuatorTruth {
    /// Transmission at the 0 dB setting (insertion loss).
    pub insertion: f64,
    /// Maximum fractional deviation of any setting from nominal.
    pub setting_deviation: f64,
    /// Explicit absolute transmissions per setting, keyed by dB formatted
    /// with three decimals (e.g. "31.000").
    pub overrides: BTreeMap<String, f64>,
}

impl Default for AttenuatorTruth {
    fn default() -> Self {
        AttenuatorTruth {
            insertion: 0.98,
            setting_deviation: 0.005,
            overrides: BTreeMap::new(),
        }
    }
}

pub fn setting_key(db: f64) -> String {
    format!("{db:.3}")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SwitchTruth {
    pub monitor_coupling: f64,
    pub detector_coupling: f64,
}

impl Default for SwitchTruth {
    fn default() -> Self {
        SwitchTruth {
            monitor_coupling: 0.98,
            detector_coupling: 0.97,
        }
    }
}

/// Monitor power meter truth: per-range polynomial response in full-scale
/// units, multiplicative discontinuity factors at each range boundary, read
/// noise, and zero offsets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MpmTruth {
    /// Coefficients [c2, c3, ...] of the linearized-power polynomial per
    /// range (keyed by dBm as a string).
    pub poly: BTreeMap<String, Vec<f64>>,
    /// Discontinuity factor at the boundary (r, r+10), keyed by the lower
    /// range r in dBm; -10 dBm is implicitly 1.
    pub boundary_factor: BTreeMap<String, f64>,
    /// Read noise relative to the reading.
    pub read_noise_rel: f64,
    /// Additive noise floor in full-scale units.
    pub noise_floor_fs: f64,
    /// Magnitude of the true zero offset per range, full-scale units.
    pub zero_offset_fs: f64,
    /// Global scale between "linearized power" units and watts; cancels in
    /// every calibrated quantity.
    pub gauge: f64,
}

impl Default for MpmTruth {
    fn default() -> Self {
        let mut poly = BTreeMap::new();
        poly.insert("-10".into(), vec![0.008]);
        poly.insert("-20".into(), vec![0.012, -0.004]);
        poly.insert("-30".into(), vec![0.015]);
        poly.insert("-40".into(), vec![0.012]);
        poly.insert("-50".into(), vec![0.01]);
        poly.insert("-60".into(), vec![0.014]);
        let mut boundary = BTreeMap::new();
        boundary.insert("-20".into(), 1.002);
        boundary.insert("-30".into(), 0.9975);
        boundary.insert("-40".into(), 1.004);
        boundary.insert("-50".into(), 0.997);
        boundary.insert("-60".into(), 1.003);
        MpmTruth {
            poly,
            boundary_factor: boundary,
            read_noise_rel: 1.0e-3,
            noise_floor_fs: 1.0e-4,
            zero_offset_fs: 5.0e-4,
            gauge: 1.03,
        }
    }
}

impl MpmTruth {
    pub fn poly_coeffs(&self, r: RangeSetting) -> Vec<f64> {
        self.poly
            .get(&r.dbm().to_string())
            .cloned()
            .unwrap_or_default()
    }

    pub fn boundary(&self, r: RangeSetting) -> f64 {
        if r == RangeSetting::DbmM10 {
            1.0
        } else {
            self.boundary_factor
                .get(&r.dbm().to_string())
                .copied()
                .unwrap_or(1.0)
        }
    }

    /// Cumulative discontinuity chain from `r` up to -20 dBm inclusive.
    pub fn chain(&self, r: RangeSetting) -> f64 {
        let mut f = 1.0;
        let mut cur = r;
        while cur != RangeSetting::DbmM10 {
            f *= self.boundary(cur);
            match cur.next_higher() {
                Some(h) => cur = h,
                None => break,
            }
        }
        f
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CpmTruth {
    /// True calibration factor (reading / actual power).
    pub cf_true: f64,
    pub read_noise_rel: f64,
    /// Relative sigma the external calibration certificate reports; the
    /// reported factor is drawn around truth with this sigma per seed.
    pub reported_rel_sigma: f64,
}

impl Default for CpmTruth {
    fn default() -> Self {
        CpmTruth {
            cf_true: 1.012,
            read_noise_rel: 5.0e-4,
            reported_rel_sigma: 0.0014,
        }
    }
}

/// Saturating efficiency-vs-bias curve: plateau / (1 + exp(-(i - mid)/w)).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SdeCurveTruth {
    pub plateau: f64,
    pub mid_ua: f64,
    pub width_ua: f64,
}

impl Default for SdeCurveTruth {
    fn default() -> Self {
        SdeCurveTruth {
            plateau: 0.965,
            mid_ua: 3.0,
            width_ua: 0.25,
        }
    }
}

impl SdeCurveTruth {
    pub fn at_ua(&self, bias_ua: f64) -> f64 {
        self.plateau / (1.0 + (-(bias_ua - self.mid_ua) / self.width_ua).exp())
    }
}

/// Dark rate, exponential in bias (a declared stand-in shape).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DarkTruth {
    pub rate_at_5ua_hz: f64,
    pub bias_scale_ua: f64,
}

impl Default for DarkTruth {
    fn default() -> Self {
        DarkTruth {
            rate_at_5ua_hz: 1.0e4,
            bias_scale_ua: 2.0,
        }
    }
}

impl DarkTruth {
    pub fn at_ua(&self, bias_ua: f64) -> f64 {
        self.rate_at_5ua_hz * ((bias_ua - 5.0) / self.bias_scale_ua).exp()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorTruth {
    pub sde: SdeCurveTruth,
    pub dark: DarkTruth,
    pub dead_time_s: f64,
    pub dead_time_model: DeadTimeModel,
    /// Polarization sensitivity (max/min over the sweep grid; >= 1).
    pub ps: f64,
    /// Orientation (deg) of the polarization response on the sweep grid.
    pub pol_phase_deg: (f64, f64),
}

impl Default for DetectorTruth {
    fn default() -> Self {
        DetectorTruth {
            sde: SdeCurveTruth::default(),
            dark: DarkTruth::default(),
            dead_time_s: 175e-9,
            dead_time_model: DeadTimeModel::Paralyzable,
            ps: 1.02,
            pol_phase_deg: (31.0, 17.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolControllerTruth {
    /// Overall transmission scale of the free-space controller.
    pub insertion: f64,
    /// Peak-to-peak fractional transmission ripple over the sweep.
    pub transmission_ripple: f64,
    pub ripple_phase_deg: (f64, f64),
}

impl Default for PolControllerTruth {
    fn default() -> Self {
        PolControllerTruth {
            insertion: 0.95,
            transmission_ripple: 0.02,
            ripple_phase_deg: (53.5, 28.25),
        }
    }
}

/// Full ground-truth description of the virtual laboratory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct SimScenario {
    pub seed: u64,
    pub wavelength_nm: f64,
    pub laser: LaserTruth,
    pub attenuators: [AttenuatorTruth; 3],
    pub switch: SwitchTruth,
    pub mpm: MpmTruth,
    pub cpm: CpmTruth,
    pub detector: DetectorTruth,
    pub pol_controller: PolControllerTruth,
}

impl SimScenario {
    /// Paper-scale defaults at 1550 nm.
    pub fn paper_default() -> Self {
        SimScenario {
            seed: 1,
            wavelength_nm: 1550.0,
            ..Default::default()
        }
    }

    pub fn from_json(json: &str) -> Result<Self, serde_json::Error> {
        let mut sc: SimScenario = serde_json::from_str(json)?;
        if sc.wavelength_nm == 0.0 {
            sc.wavelength_nm = 1550.0;
        }
        Ok(sc)
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.laser.power_w > 0.0) {
            return Err("laser power must be positive".into());
        }
        for (i, a) in self.attenuators.iter().enumerate() {
            if !(a.insertion > 0.0 && a.insertion <= 1.0) {
                return Err(format!("attenuator {} insertion must be in (0, 1]", i + 1));
            }
            for (k, t) in &a.overrides {
                if !(*t > 0.0 && *t <= 1.0) {
                    return Err(format!(
                        "attenuator {} override {k} must be in (0, 1]",
                        i + 1
                    ));
                }
            }
        }
        for c in [self.switch.monitor_coupling, self.switch.detector_coupling] {
            if !(c > 0.0 && c <= 1.0) {
                return Err("switch couplings must be in (0, 1]".into());
            }
        }
        if self.mpm.read_noise_rel < 0.0 || self.mpm.noise_floor_fs < 0.0 {
            return Err("noise sigmas must be >= 0".into());
        }
        if !(self.detector.sde.plateau >= 0.0 && self.detector.sde.plateau <= 1.0) {
            return Err("detector efficiency plateau must be in [0, 1]".into());
        }
        if self.detector.dead_time_s < 0.0 {
            return Err("dead time must be >= 0".into());
        }
        if self.detector.ps < 1.0 {
            return Err("polarization sensitivity must be >= 1".into());
        }
        if !(self.pol_controller.insertion > 0.0 && self.pol_controller.insertion <= 1.0) {
            return Err("controller insertion must be in (0, 1]".into());
        }
        Ok(())
    }
}

/// Seed-dependent realization of the scenario truth: the quantities that
/// are fixed within a session but vary between seeds.
#[derive(Clone, Debug)]
pub struct RealizedTruth {
    seed: u64,
    scenario: SimScenario,
    pub cf_cpm_reported: f64,
}

impl RealizedTruth {
    pub fn new(scenario: &SimScenario, seed: u64) -> Self {
        let cf_reported = scenario.cpm.cf_true
            * (1.0 + scenario.cpm.reported_rel_sigma * hash_gauss(seed, &[0xC0DE, 0x01]));
        RealizedTruth {
            seed,
            scenario: scenario.clone(),
            cf_cpm_reported: cf_reported,
        }
    }

    /// True absolute transmission of attenuator `idx` (0-based) at a
    /// setting; deterministic in (seed, idx, setting).
    pub fn attenuator_transmission(&self, idx: usize, setting_db: f64) -> f64 {
        let a = &self.scenario.attenuators[idx];
        if let Some(t) = a.overrides.get(&setting_key(setting_db)) {
            return *t;
        }
        let q = (setting_db * 1000.0).round() as i64 as u64;
        let dev = (2.0 * hash_uniform(self.seed, &[0xA77, idx as u64, q]) - 1.0)
            * a.setting_deviation;
        let nominal = 10f64.powf(-setting_db / 10.0);
        (a.insertion * nominal * (1.0 + dev)).min(1.0)
    }

    /// True transmission of a setting relative to the 0 dB setting.
    pub fn true_alpha(&self, idx: usize, setting_db: f64) -> f64 {
        self.attenuator_transmission(idx, setting_db) / self.attenuator_transmission(idx, 0.0)
    }

    /// True step transmission of the nonlinearity sweep (attenuator 2,
    /// 3 dB relative to 0 dB).
    pub fn tau_true(&self) -> f64 {
        self.true_alpha(1, crate::nonlin::STEP_ATT_DB)
    }

    /// True zero offset of the monitor meter at a range, full-scale units.
    pub fn mpm_zero_offset_fs(&self, r: RangeSetting) -> f64 {
        let mag = self.scenario.mpm.zero_offset_fs;
        mag * (2.0 * hash_uniform(self.seed, &[0x0FF5, r.dbm().unsigned_abs() as u64]) - 1.0)
    }
}

/// Sealed ground truth emitted next to a session bundle (under `truth/`,
/// outside the manifest; analysis code never reads it).
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct GroundTruth {
    pub seed: u64,
    pub scenario: SimScenario,
    pub cf_cpm_true: f64,
    pub cf_cpm_reported: f64,
    pub tau_true: f64,
    pub boundary_factors: BTreeMap<String, f64>,
    /// True alpha per attenuator at the session's working setting.
    pub alpha_true: Vec<f64>,
    /// Detector-port power (W) with attenuators at zero, at calibration time.
    pub p_dp_true_w: f64,
    /// Photon rate (1/s) at the detector with the working attenuations, at
    /// calibration time, at maximum polarization response.
    pub flux_true_hz: f64,
    pub sde_true_at_bias: Vec<(f64, f64)>,
    pub dark_rate_at_bias: Vec<(f64, f64)>,
    /// Max/min polarization response over the sweep grid.
    pub grid_ps_true: Option<f64>,
    /// Per grid point: (qwp, hwp, transmission, detector response).
    pub pol_grid_truth: Option<Vec<(f64, f64, f64, f64)>>,
}
