//! Executes the acquisition procedures against a scenario's ground truth.

use std::collections::BTreeMap;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::instrument::{AttenCalRecord, SwitchCalRecord};
use crate::nonlin::{plan_nonlin_sweep, NonlinRecord, RangeSetting, ADMITTED_RANGES, READS_PER_SETTING};
use crate::polarization::{PolGridRecord, GRID_POINTS_PER_AXIS};
use crate::sde::{CountPhase, CountRecord, PLANCK_J_S, SPEED_OF_LIGHT_M_S};
use crate::session::{self, CpmEntry, Role, SessionError, SessionManifest};
use crate::sim::deadtime::GatedCounter;
use crate::sim::scenario::{setting_key, DriftModel, GroundTruth, RealizedTruth, SimScenario};
use crate::sim::stream_rng;

pub const GROUND_TRUTH_FILE: &str = "truth/ground_truth.json";

const STREAM_NONLIN: u64 = 1;
const STREAM_SWITCH: u64 = 2;
const STREAM_ATTCAL: u64 = 3;
const STREAM_SDE: u64 = 4;
const STREAM_POLSCAN: u64 = 5;
const STREAM_STABILITY: u64 = 6;

const SET_S: f64 = 0.5;
const ZERO_S: f64 = 3.0;
const READ_S: f64 = 0.2;
const GATE_S: f64 = 1.0;
const MOVE_S: f64 = 0.7;
const OPT_GATE_S: f64 = 0.2;

#[derive(Clone, Copy, PartialEq)]
enum Route {
    Monitor,
    Detector,
}

/// The virtual bench: laser, three attenuators, switch, two meters, the
/// polarization controllers, and the detector, driven by one RNG stream.
struct VirtualLab {
    sc: SimScenario,
    truth: RealizedTruth,
    rng: ChaCha8Rng,
    clock_s: f64,
    drift_state: f64,
    att_db: [f64; 3],
    atts_enabled: bool,
    route: Route,
    mpm_range: RangeSetting,
    /// Residual additive offset per range in full-scale units; starts at
    /// the true offset and becomes the (small) zeroing error after zero().
    mpm_residual_fs: BTreeMap<RangeSetting, f64>,
    bias_v: f64,
    /// Detector polarization response factor in [1/PS, 1].
    pol_response: f64,
    /// Transmission of the polarization controller on the detector path.
    pol_transmission: f64,
    warnings: Vec<String>,
    zero_offsets: Vec<(String, i32, f64)>,
    context: &'static str,
}

impl VirtualLab {
    fn new(sc: &SimScenario, seed: u64, stream: u64, context: &'static str) -> Self {
        let mut residuals = BTreeMap::new();
        let truth = RealizedTruth::new(sc, seed);
        for r in ADMITTED_RANGES {
            residuals.insert(r, truth.mpm_zero_offset_fs(r));
        }
        VirtualLab {
            sc: sc.clone(),
            truth,
            rng: stream_rng(seed, stream),
            clock_s: 0.0,
            drift_state: 0.0,
            att_db: [0.0; 3],
            atts_enabled: true,
            route: Route::Monitor,
            mpm_range: RangeSetting::DbmM10,
            mpm_residual_fs: residuals,
            bias_v: 0.0,
            pol_response: 1.0,
            pol_transmission: 1.0,
            warnings: Vec::new(),
            zero_offsets: Vec::new(),
            context,
        }
    }

    fn gauss(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    fn advance(&mut self, dt_s: f64) {
        self.clock_s += dt_s;
        if let DriftModel::RandomWalk { sigma_per_sqrt_s } = self.sc.laser.drift {
            let z: f64 = self.gauss();
            self.drift_state += sigma_per_sqrt_s * dt_s.sqrt() * z;
        }
    }

    fn laser_power_w(&self) -> f64 {
        let factor = match self.sc.laser.drift {
            DriftModel::None => 1.0,
            DriftModel::LinearPpmPerHour { ppm_per_hour } => {
                1.0 + ppm_per_hour * 1e-6 * self.clock_s / 3600.0
            }
            DriftModel::RandomWalk { .. } => 1.0 + self.drift_state,
        };
        self.sc.laser.power_w * factor
    }

    fn set_att(&mut self, idx: usize, db: f64) {
        let applied = if db < 0.0 {
            let w = format!(
                "{}: attenuator {} scheduled at {:.1} dB clamped to 0 dB",
                self.context,
                idx + 1,
                db
            );
            if !self.warnings.contains(&w) {
                self.warnings.push(w);
            }
            0.0
        } else {
            db
        };
        self.att_db[idx] = applied;
        self.advance(SET_S);
    }

    fn set_all_atts(&mut self, db: f64) {
        for i in 0..3 {
            self.set_att(i, db);
        }
    }

    fn disable_atts(&mut self) {
        self.atts_enabled = false;
        self.advance(SET_S);
    }

    fn enable_atts(&mut self) {
        self.atts_enabled = true;
        self.advance(SET_S);
    }

    fn set_route(&mut self, route: Route) {
        self.route = route;
        self.advance(SET_S);
    }

    fn set_range(&mut self, r: RangeSetting) {
        self.mpm_range = r;
        self.advance(SET_S);
    }

    fn set_bias(&mut self, v: f64) {
        self.bias_v = v;
        self.advance(SET_S);
    }

    fn bias_ua(&self) -> f64 {
        self.bias_v / crate::sde::BIAS_SERIES_RESISTOR_OHMS * 1e6
    }

    /// Optical power arriving at a route, watts.
    fn incident_power_w(&self, route: Route) -> f64 {
        if !self.atts_enabled {
            return 0.0;
        }
        let mut p = self.laser_power_w();
        for i in 0..3 {
            p *= self.truth.attenuator_transmission(i, self.att_db[i]);
        }
        match route {
            Route::Monitor => p * self.sc.switch.monitor_coupling,
            Route::Detector => p * self.sc.switch.detector_coupling * self.pol_transmission,
        }
    }

    /// Zeroes the monitor meter at the current range (light must be
    /// blocked by the caller via disable_atts, as the procedures do). The
    /// meter averages 100 samples internally while zeroing.
    fn zero_mpm(&mut self) {
        self.advance(ZERO_S);
        let r = self.mpm_range;
        let fs = r.full_scale_w();
        let true_offset = self.truth.mpm_zero_offset_fs(r);
        let z: f64 = self.gauss();
        let eps = self.sc.mpm.noise_floor_fs / 10.0 * z;
        let measured = true_offset + eps;
        self.mpm_residual_fs.insert(r, true_offset - measured);
        self.zero_offsets
            .push((self.context.to_string(), r.dbm(), measured * fs));
    }

    /// One monitor reading in watts: polynomial meter response, range
    /// discontinuity chain, residual zero offset, and read noise.
    fn mpm_read(&mut self) -> f64 {
        self.advance(READ_S);
        let r = self.mpm_range;
        let fs = r.full_scale_w();
        let p = self.incident_power_w(Route::Monitor);
        let u = self.sc.mpm.gauge * (p / fs) * self.sc.mpm.chain(r);
        let coeffs = self.sc.mpm.poly_coeffs(r);
        let v = invert_poly(&coeffs, u);
        let z1: f64 = self.gauss();
        let z2: f64 = self.gauss();
        let resid = self.mpm_residual_fs.get(&r).copied().unwrap_or(0.0);
        let noisy = v
            + resid
            + self.sc.mpm.noise_floor_fs * z1
            + self.sc.mpm.read_noise_rel * v * z2;
        noisy.max(1e-9) * fs
    }

    /// One calibrated-meter reading in watts (detector route).
    fn cpm_read(&mut self) -> f64 {
        self.advance(READ_S);
        let p = self.incident_power_w(Route::Detector);
        let z: f64 = self.gauss();
        (p * self.sc.cpm.cf_true * (1.0 + self.sc.cpm.read_noise_rel * z)).max(1e-18)
    }

    /// Detector event rate at the current bench state.
    fn detector_rate_hz(&self) -> f64 {
        let bias_ua = self.bias_ua();
        let p = self.incident_power_w(Route::Detector);
        let photon_rate = p * self.sc.wavelength_nm * 1e-9 / (PLANCK_J_S * SPEED_OF_LIGHT_M_S);
        photon_rate * self.sc.detector.sde.at_ua(bias_ua) * self.pol_response
            + self.sc.detector.dark.at_ua(bias_ua)
    }

    fn count_gate(&mut self, counter: &mut GatedCounter, gate_s: f64) -> u64 {
        let rate = self.detector_rate_hz();
        self.advance(gate_s);
        counter.count_gate(&mut self.rng, rate, gate_s)
    }

    /// Response of the all-fiber controller paddles on the detector: a
    /// smooth factor in [1/PS, 1].
    fn fiber_response(&self, paddles: [f64; 3]) -> f64 {
        let delta = 1.0 - 1.0 / self.sc.detector.ps;
        let phi0 = self.sc.detector.pol_phase_deg.0.to_radians();
        let theta = 1.3 * paddles[0] + 0.7 * paddles[1] + 1.9 * paddles[2] + phi0;
        1.0 - delta * 0.5 * (1.0 + theta.cos())
    }

    /// Deterministic coordinate ascent over the paddle settings, counting
    /// at each candidate; ties keep the first-found extremum.
    fn optimize_polarization(&mut self, maximize: bool) -> [f64; 3] {
        let mut paddles = [0.0f64; 3];
        let mut counter = GatedCounter::new(
            self.sc.detector.dead_time_s,
            self.sc.detector.dead_time_model,
        );
        self.pol_response = self.fiber_response(paddles);
        let mut best = self.count_gate(&mut counter, OPT_GATE_S);
        for _sweep in 0..3 {
            for axis in 0..3 {
                for step in 0..24 {
                    let angle = 2.0 * std::f64::consts::PI * step as f64 / 24.0;
                    let mut cand = paddles;
                    cand[axis] = angle;
                    self.pol_response = self.fiber_response(cand);
                    let counts = self.count_gate(&mut counter, OPT_GATE_S);
                    let better = if maximize {
                        counts > best
                    } else {
                        counts < best
                    };
                    if better {
                        best = counts;
                        paddles = cand;
                    }
                }
            }
        }
        self.pol_response = self.fiber_response(paddles);
        paddles
    }
}

/// Newton inversion of P(v) = v + sum c_k v^k at target u.
fn invert_poly(coeffs: &[f64], u: f64) -> f64 {
    let mut v = u;
    for _ in 0..40 {
        let mut f = v - u;
        let mut df = 1.0;
        for (i, c) in coeffs.iter().enumerate() {
            let k = (i + 2) as i32;
            f += c * v.powi(k);
            df += c * k as f64 * v.powi(k - 1);
        }
        let step = f / df;
        v -= step;
        if step.abs() < 1e-16 * v.abs().max(1e-16) {
            break;
        }
    }
    v
}

pub struct NonlinAcquisition {
    pub records: Vec<NonlinRecord>,
    pub zero_offsets: Vec<(String, i32, f64)>,
    pub warnings: Vec<String>,
}

/// Runs the nonlinearity sweep: per range, zero the meter, then step the
/// sweep attenuator and toggle the 3 dB step, ten reads per setting.
pub fn run_nonlin_acquisition(sc: &SimScenario, seed: u64) -> NonlinAcquisition {
    let mut lab = VirtualLab::new(sc, seed, STREAM_NONLIN, "nonlin");
    lab.set_route(Route::Monitor);
    lab.set_att(2, 0.0);
    let mut records = Vec::new();
    let mut current_range: Option<RangeSetting> = None;
    for point in plan_nonlin_sweep(&ADMITTED_RANGES) {
        if current_range != Some(point.range) {
            lab.set_range(point.range);
            lab.disable_atts();
            lab.zero_mpm();
            lab.enable_atts();
            current_range = Some(point.range);
        }
        lab.set_att(0, point.att1_db);
        lab.set_att(1, point.att2_db);
        let applied_att1 = lab.att_db[0];
        for _ in 0..READS_PER_SETTING {
            let reading = lab.mpm_read();
            records.push(NonlinRecord {
                att1_db: applied_att1,
                att2_db: point.att2_db,
                range: point.range,
                reading_w: reading,
                wavelength_nm: sc.wavelength_nm,
            });
        }
    }
    NonlinAcquisition {
        records,
        zero_offsets: lab.zero_offsets,
        warnings: lab.warnings,
    }
}

pub struct SwitchCalRun {
    pub record: SwitchCalRecord,
}

/// Alternates the switch between the detector port (calibrated meter) and
/// the monitor port, attenuators at zero, both meters at -10 dBm.
pub fn run_switch_cal(sc: &SimScenario, seed: u64) -> SwitchCalRun {
    let mut lab = VirtualLab::new(sc, seed, STREAM_SWITCH, "switch_cal");
    lab.set_all_atts(0.0);
    lab.set_range(RangeSetting::DbmM10);
    lab.disable_atts();
    lab.zero_mpm();
    lab.enable_atts();
    let mut cpm = Vec::new();
    let mut mpm = Vec::new();
    for _ in 0..10 {
        lab.set_route(Route::Detector);
        cpm.push(lab.cpm_read());
        lab.set_route(Route::Monitor);
        mpm.push(lab.mpm_read());
    }
    SwitchCalRun {
        record: SwitchCalRecord {
            wavelength_nm: sc.wavelength_nm,
            cpm_readings_w: cpm,
            mpm_readings_w: mpm,
            range: RangeSetting::DbmM10,
        },
    }
}

pub struct AttenCalRun {
    pub records: Vec<AttenCalRecord>,
    pub zero_offsets: Vec<(String, i32, f64)>,
    /// True detector-port power with attenuators at zero, averaged over the
    /// zero phases (watts).
    pub p_dp_true_w: f64,
    /// True transmission of each attenuator at the working setting.
    pub alpha_true: Vec<f64>,
}

fn console_cal(lab: &mut VirtualLab, att_db: f64, range: RangeSetting) -> AttenCalRun {
    const N: usize = 5;
    lab.set_all_atts(0.0);
    let mut records = Vec::new();
    let mut p_dp_samples = Vec::new();
    let mut alpha_true = Vec::new();
    for idx in 0..3usize {
        lab.set_range(RangeSetting::DbmM10);
        lab.disable_atts();
        lab.zero_mpm();
        lab.enable_atts();
        let mut zero_reads = Vec::with_capacity(N);
        for _ in 0..N {
            zero_reads.push(lab.mpm_read());
            p_dp_samples.push(lab.incident_power_w(Route::Detector));
        }
        lab.set_att(idx, att_db);
        lab.set_range(range);
        lab.disable_atts();
        lab.zero_mpm();
        lab.enable_atts();
        let mut att_reads = Vec::with_capacity(N);
        for _ in 0..N {
            att_reads.push(lab.mpm_read());
        }
        lab.set_att(idx, 0.0);
        alpha_true.push(lab.truth.true_alpha(idx, att_db));
        records.push(AttenCalRecord {
            attenuator_id: (idx + 1) as u8,
            zero_readings_w: zero_reads,
            zero_range: RangeSetting::DbmM10,
            att_readings_w: att_reads,
            att_range: range,
            nominal_db: att_db,
            wavelength_nm: lab.sc.wavelength_nm,
        });
    }
    AttenCalRun {
        records,
        zero_offsets: std::mem::take(&mut lab.zero_offsets),
        p_dp_true_w: crate::stats::mean(&p_dp_samples),
        alpha_true,
    }
}

/// Standalone attenuator calibration (each attenuator in turn, the others
/// at zero; the switch routes to the monitor throughout).
pub fn run_attenuator_cal(
    sc: &SimScenario,
    seed: u64,
    att_db: f64,
    range: RangeSetting,
) -> AttenCalRun {
    let mut lab = VirtualLab::new(sc, seed, STREAM_ATTCAL, "atten_cal");
    lab.set_route(Route::Monitor);
    console_cal(&mut lab, att_db, range)
}

#[derive(Clone, Copy, Debug)]
pub struct BiasGridSpec {
    pub vstop: f64,
    pub vstep: f64,
    /// Bias used during polarization optimization.
    pub vpol: f64,
}

impl Default for BiasGridSpec {
    fn default() -> Self {
        BiasGridSpec {
            vstop: 0.8,
            vstep: 0.1,
            vpol: 0.5,
        }
    }
}

impl BiasGridSpec {
    pub fn biases(&self) -> Vec<f64> {
        let mut out = Vec::new();
        let mut k = 0u32;
        loop {
            let v = self.vstep * k as f64;
            if v > self.vstop + 1e-9 {
                break;
            }
            out.push(v);
            k += 1;
        }
        out
    }
}

pub struct SdeSessionRun {
    pub counts: Vec<CountRecord>,
    pub atten: AttenCalRun,
    pub warnings: Vec<String>,
    pub sde_true_at_bias: Vec<(f64, f64)>,
    pub dark_true_at_bias: Vec<(f64, f64)>,
    /// True photon rate at the detector during the light scans, photons/s,
    /// computed from the at-calibration-time port power.
    pub flux_true_hz: f64,
}

/// The full counts measurement: dark scan (attenuators disabled, switch on
/// the monitor port), polarization optimization, maxpol and minpol scans
/// with ten 1 s gates per bias point, then the embedded attenuator
/// calibration.
pub fn run_sde_session(
    sc: &SimScenario,
    seed: u64,
    grid: &BiasGridSpec,
    att_db: f64,
    cal_range: RangeSetting,
) -> SdeSessionRun {
    const N: usize = 10;
    let mut lab = VirtualLab::new(sc, seed, STREAM_SDE, "sde_session");
    let biases = grid.biases();
    let mut counts = Vec::new();

    lab.set_all_atts(att_db);
    lab.set_bias(0.0);

    // Dark scan.
    lab.set_route(Route::Monitor);
    lab.disable_atts();
    let mut counter = GatedCounter::new(sc.detector.dead_time_s, sc.detector.dead_time_model);
    for &v in &biases {
        lab.set_bias(v);
        for rep in 1..=N {
            let c = lab.count_gate(&mut counter, GATE_S);
            counts.push(CountRecord {
                phase: CountPhase::Dark,
                bias_v: v,
                rep: rep as u32,
                counts: c,
            });
        }
    }
    lab.set_bias(0.0);

    // Polarization optimization.
    lab.enable_atts();
    lab.set_route(Route::Detector);
    lab.set_bias(grid.vpol);
    let maxpol = lab.optimize_polarization(true);
    let minpol = lab.optimize_polarization(false);
    lab.set_bias(0.0);

    // Light scans.
    for (phase, settings) in [(CountPhase::MaxPol, maxpol), (CountPhase::MinPol, minpol)] {
        lab.pol_response = lab.fiber_response(settings);
        let mut counter = GatedCounter::new(sc.detector.dead_time_s, sc.detector.dead_time_model);
        for &v in &biases {
            lab.set_bias(v);
            for rep in 1..=N {
                let c = lab.count_gate(&mut counter, GATE_S);
                counts.push(CountRecord {
                    phase,
                    bias_v: v,
                    rep: rep as u32,
                    counts: c,
                });
            }
        }
        lab.set_bias(0.0);
    }

    // Embedded attenuator calibration.
    lab.set_route(Route::Monitor);
    lab.pol_response = 1.0;
    let atten = console_cal(&mut lab, att_db, cal_range);

    let sde_true: Vec<(f64, f64)> = biases
        .iter()
        .map(|v| {
            let ua = v / crate::sde::BIAS_SERIES_RESISTOR_OHMS * 1e6;
            (*v, sc.detector.sde.at_ua(ua))
        })
        .collect();
    let dark_true: Vec<(f64, f64)> = biases
        .iter()
        .map(|v| {
            let ua = v / crate::sde::BIAS_SERIES_RESISTOR_OHMS * 1e6;
            (*v, sc.detector.dark.at_ua(ua))
        })
        .collect();
    let alpha_product: f64 = atten.alpha_true.iter().product();
    let flux_true = atten.p_dp_true_w * alpha_product * sc.wavelength_nm * 1e-9
        / (PLANCK_J_S * SPEED_OF_LIGHT_M_S);

    SdeSessionRun {
        counts,
        atten,
        warnings: lab.warnings,
        sde_true_at_bias: sde_true,
        dark_true_at_bias: dark_true,
        flux_true_hz: flux_true,
    }
}

#[derive(Clone, Copy, Debug)]
pub struct PolGridSpec {
    pub qwp_span_deg: (f64, f64),
    pub hwp_span_deg: (f64, f64),
    pub gates_per_point: usize,
    /// Meter reads averaged per point during the transmission pass.
    pub transmission_reads: usize,
    pub att_db: f64,
    pub bias_v: f64,
}

impl Default for PolGridSpec {
    fn default() -> Self {
        PolGridSpec {
            qwp_span_deg: (0.0, 180.0),
            hwp_span_deg: (0.0, 90.0),
            gates_per_point: 3,
            transmission_reads: 3,
            att_db: 31.0,
            bias_v: 0.5,
        }
    }
}

impl PolGridSpec {
    pub fn angles(&self) -> (Vec<f64>, Vec<f64>) {
        let n = GRID_POINTS_PER_AXIS as f64;
        let q: Vec<f64> = (0..GRID_POINTS_PER_AXIS)
            .map(|i| self.qwp_span_deg.0 + (self.qwp_span_deg.1 - self.qwp_span_deg.0) * i as f64 / n)
            .collect();
        let h: Vec<f64> = (0..GRID_POINTS_PER_AXIS)
            .map(|i| self.hwp_span_deg.0 + (self.hwp_span_deg.1 - self.hwp_span_deg.0) * i as f64 / n)
            .collect();
        (q, h)
    }
}

pub struct PolScanRun {
    pub records: Vec<PolGridRecord>,
    pub dark_gates: Vec<u64>,
    pub grid_ps_true: f64,
    /// (qwp, hwp, transmission, detector response) per point.
    pub truth_rows: Vec<(f64, f64, f64, f64)>,
    pub duration_s: f64,
}

/// Smooth response surface over the waveplate grid. The doubled angular
/// frequencies reflect the 2-theta action of the waveplates on the
/// polarization state (period 90 deg in QWP, 45 deg in HWP).
fn pol_surface(q_deg: f64, h_deg: f64, phase: (f64, f64)) -> f64 {
    let a = 2.0 * std::f64::consts::PI * (q_deg - phase.0) / 90.0;
    let b = 2.0 * std::f64::consts::PI * (h_deg - phase.1) / 45.0;
    0.5 * (1.0 + a.sin() * b.cos())
}

/// Sweeps the free-space controller over the full grid: a dark block, the
/// counts pass, then the classical-level transmission pass.
pub fn run_polscan(sc: &SimScenario, seed: u64, spec: &PolGridSpec) -> PolScanRun {
    let mut lab = VirtualLab::new(sc, seed, STREAM_POLSCAN, "polscan");
    let (qs, hs) = spec.angles();
    let t0 = lab.clock_s;

    // Detector response normalized so the grid extremes realize PS exactly.
    let mut s_min = f64::INFINITY;
    let mut s_max = f64::NEG_INFINITY;
    for q in &qs {
        for h in &hs {
            let s = pol_surface(*q, *h, sc.detector.pol_phase_deg);
            s_min = s_min.min(s);
            s_max = s_max.max(s);
        }
    }
    let delta = 1.0 - 1.0 / sc.detector.ps;
    let response = |q: f64, h: f64| {
        if s_max > s_min {
            let s = (pol_surface(q, h, sc.detector.pol_phase_deg) - s_min) / (s_max - s_min);
            1.0 - delta * s
        } else {
            1.0
        }
    };
    let transmission = |q: f64, h: f64| {
        sc.pol_controller.insertion
            * (1.0
                - sc.pol_controller.transmission_ripple
                    * pol_surface(q, h, sc.pol_controller.ripple_phase_deg))
    };

    // Dark block at the scan bias.
    lab.set_all_atts(spec.att_db);
    lab.set_route(Route::Detector);
    lab.set_bias(spec.bias_v);
    lab.disable_atts();
    let mut counter = GatedCounter::new(sc.detector.dead_time_s, sc.detector.dead_time_model);
    let dark_gates: Vec<u64> = (0..10).map(|_| lab.count_gate(&mut counter, GATE_S)).collect();
    lab.enable_atts();

    // Counts pass.
    let mut counts_grid: Vec<Vec<u64>> = Vec::with_capacity(qs.len() * hs.len());
    let mut truth_rows = Vec::with_capacity(qs.len() * hs.len());
    let mut counter = GatedCounter::new(sc.detector.dead_time_s, sc.detector.dead_time_model);
    for q in &qs {
        for h in &hs {
            lab.advance(MOVE_S);
            lab.pol_transmission = transmission(*q, *h);
            lab.pol_response = response(*q, *h);
            let gates: Vec<u64> = (0..spec.gates_per_point)
                .map(|_| lab.count_gate(&mut counter, GATE_S))
                .collect();
            counts_grid.push(gates);
            truth_rows.push((*q, *h, lab.pol_transmission, lab.pol_response));
        }
    }

    // Transmission pass at classical light levels.
    lab.set_bias(0.0);
    lab.set_all_atts(0.0);
    lab.set_range(RangeSetting::DbmM10);
    lab.disable_atts();
    lab.zero_mpm();
    lab.enable_atts();
    let mut records = Vec::with_capacity(counts_grid.len());
    let mut i = 0usize;
    for q in &qs {
        for h in &hs {
            lab.advance(MOVE_S);
            lab.pol_transmission = transmission(*q, *h);
            let n = spec.transmission_reads.max(1);
            let cpm = crate::stats::mean(&(0..n).map(|_| lab.cpm_read()).collect::<Vec<_>>());
            let mpm = crate::stats::mean(&(0..n).map(|_| lab.mpm_read()).collect::<Vec<_>>());
            records.push(PolGridRecord {
                qwp_deg: *q,
                hwp_deg: *h,
                counts: counts_grid[i].clone(),
                dark_counts: None,
                cpm_w: cpm,
                mpm_w: mpm,
            });
            i += 1;
        }
    }

    let ps_true = if delta > 0.0 { sc.detector.ps } else { 1.0 };
    PolScanRun {
        records,
        dark_gates,
        grid_ps_true: ps_true,
        truth_rows,
        duration_s: lab.clock_s - t0,
    }
}

#[derive(Clone, Copy, Debug)]
pub struct StabilitySpec {
    pub duration_s: f64,
    pub sample_rate_hz: f64,
}

impl Default for StabilitySpec {
    fn default() -> Self {
        StabilitySpec {
            duration_s: 7200.0,
            sample_rate_hz: 4.118,
        }
    }
}

/// Samples the monitor meter at a fixed cadence with the bench idle.
pub fn run_stability(sc: &SimScenario, seed: u64, spec: &StabilitySpec) -> Vec<(f64, f64)> {
    let mut lab = VirtualLab::new(sc, seed, STREAM_STABILITY, "stability");
    lab.set_all_atts(0.0);
    lab.set_route(Route::Monitor);
    lab.set_range(RangeSetting::DbmM10);
    lab.disable_atts();
    lab.zero_mpm();
    lab.enable_atts();
    let dt = 1.0 / spec.sample_rate_hz;
    let n = (spec.duration_s * spec.sample_rate_hz).floor() as usize;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        lab.advance((dt - READ_S).max(0.0));
        let p = lab.mpm_read();
        out.push((i as f64 * dt, p));
    }
    out
}

#[derive(Clone, Debug)]
pub struct BundleOptions {
    pub bias: BiasGridSpec,
    pub att_db: f64,
    pub cal_range: RangeSetting,
    pub polscan: PolGridSpec,
    pub stability: StabilitySpec,
}

impl Default for BundleOptions {
    fn default() -> Self {
        BundleOptions {
            bias: BiasGridSpec::default(),
            att_db: 31.0,
            cal_range: RangeSetting::DbmM30,
            polscan: PolGridSpec::default(),
            stability: StabilitySpec {
                duration_s: 1800.0,
                sample_rate_hz: 4.118,
            },
        }
    }
}

/// Runs every acquisition and writes a complete session bundle: the CSVs,
/// the reported calibrated-meter table, the manifest with digests, and the
/// sealed ground truth under `truth/`.
pub fn simulate_bundle(
    sc: &SimScenario,
    seed: u64,
    opts: &BundleOptions,
    dir: &Path,
) -> Result<SessionManifest, SessionError> {
    let truth = RealizedTruth::new(sc, seed);
    let scenario_json = serde_json::to_string(sc).expect("scenario serializes");
    let session_id = {
        let digest = session::sha256_hex(format!("{scenario_json}|{seed}").as_bytes());
        digest[..16].to_string()
    };

    let nonlin = run_nonlin_acquisition(sc, seed);
    let switch = run_switch_cal(sc, seed);
    let sde = run_sde_session(sc, seed, &opts.bias, opts.att_db, opts.cal_range);
    let pol = run_polscan(sc, seed, &opts.polscan);
    let stability = run_stability(sc, seed, &opts.stability);

    session::write_nonlin_csv(&dir.join("nonlin.csv"), &nonlin.records)?;
    session::write_switch_csv(&dir.join("switch_cal.csv"), &switch.record)?;
    session::write_counts_csv(&dir.join("sde_counts.csv"), &sde.counts)?;
    session::write_atten_csv(&dir.join("atten_cal.csv"), &sde.atten.records)?;
    session::write_polscan_csv(&dir.join("polscan.csv"), &pol.records)?;
    session::write_polscan_dark_csv(&dir.join("polscan_dark.csv"), &pol.dark_gates)?;
    session::write_stability_csv(&dir.join("stability.csv"), &stability)?;
    let mut zero_rows = nonlin.zero_offsets.clone();
    zero_rows.extend(sde.atten.zero_offsets.clone());
    session::write_zero_offsets_csv(&dir.join("zero_offsets.csv"), &zero_rows)?;
    session::write_cpm_calibration(
        &dir.join("cpm_calibration.json"),
        &[CpmEntry {
            wavelength_nm: sc.wavelength_nm,
            factor: truth.cf_cpm_reported,
            relative_sigma: sc.cpm.reported_rel_sigma,
        }],
    )?;

    let mut manifest = SessionManifest::new(
        session_id,
        sc.wavelength_nm,
        opts.att_db,
        opts.cal_range.dbm(),
    );
    manifest.register(dir, Role::Nonlin, "nonlin.csv")?;
    manifest.register(dir, Role::SwitchCal, "switch_cal.csv")?;
    manifest.register(dir, Role::SdeCounts, "sde_counts.csv")?;
    manifest.register(dir, Role::AttenCal, "atten_cal.csv")?;
    manifest.register(dir, Role::PolScan, "polscan.csv")?;
    manifest.register(dir, Role::PolScanDark, "polscan_dark.csv")?;
    manifest.register(dir, Role::Stability, "stability.csv")?;
    manifest.register(dir, Role::ZeroOffsets, "zero_offsets.csv")?;
    manifest.register(dir, Role::CpmCalibration, "cpm_calibration.json")?;
    manifest.warnings = nonlin.warnings.clone();
    manifest.warnings.extend(sde.warnings.clone());
    manifest.save(dir)?;

    let ground_truth = GroundTruth {
        seed,
        scenario: sc.clone(),
        cf_cpm_true: sc.cpm.cf_true,
        cf_cpm_reported: truth.cf_cpm_reported,
        tau_true: truth.tau_true(),
        boundary_factors: sc.mpm.boundary_factor.clone(),
        alpha_true: sde.atten.alpha_true.clone(),
        p_dp_true_w: sde.atten.p_dp_true_w,
        flux_true_hz: sde.flux_true_hz,
        sde_true_at_bias: sde.sde_true_at_bias.clone(),
        dark_rate_at_bias: sde.dark_true_at_bias.clone(),
        grid_ps_true: Some(pol.grid_ps_true),
        pol_grid_truth: Some(pol.truth_rows.clone()),
    };
    let truth_path = dir.join(GROUND_TRUTH_FILE);
    if let Some(parent) = truth_path.parent() {
        std::fs::create_dir_all(parent)
            .map_err(|e| SessionError::MissingFile(format!("{}: {e}", parent.display())))?;
    }
    let json = serde_json::to_string_pretty(&ground_truth).expect("truth serializes");
    std::fs::write(&truth_path, json + "\n")
        .map_err(|e| SessionError::MissingFile(format!("{}: {e}", truth_path.display())))?;

    let _ = setting_key(opts.att_db);
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nonlin_acquisition_covers_all_ranges_and_states() {
        let mut sc = SimScenario::paper_default();
        sc.laser.drift = DriftModel::None;
        let acq = run_nonlin_acquisition(&sc, 3);
        assert_eq!(acq.records.len(), 6 * 22 * 2 * READS_PER_SETTING);
        for r in ADMITTED_RANGES {
            assert!(acq.records.iter().any(|x| x.range == r));
        }
        // The -10 dBm range schedules negative settings; they get clamped
        // and logged.
        assert!(acq.warnings.iter().any(|w| w.contains("clamped")));
        assert!(acq.records.iter().all(|r| r.att1_db >= 0.0));
        assert!(acq.records.iter().all(|r| r.reading_w > 0.0));
    }

    #[test]
    fn noiseless_linear_meter_reads_exact_products() {
        let mut sc = SimScenario::paper_default();
        sc.laser.drift = DriftModel::None;
        sc.mpm.poly.clear();
        sc.mpm.boundary_factor.clear();
        sc.mpm.read_noise_rel = 0.0;
        sc.mpm.noise_floor_fs = 0.0;
        sc.mpm.zero_offset_fs = 0.0;
        sc.mpm.gauge = 1.0;
        for a in &mut sc.attenuators {
            a.setting_deviation = 0.0;
            a.insertion = 1.0;
        }
        sc.switch.monitor_coupling = 1.0;
        let acq = run_nonlin_acquisition(&sc, 1);
        for rec in &acq.records {
            let expect = sc.laser.power_w
                * 10f64.powf(-rec.att1_db / 10.0)
                * 10f64.powf(-rec.att2_db / 10.0);
            assert!(
                ((rec.reading_w - expect) / expect).abs() < 1e-9,
                "reading {} vs {}",
                rec.reading_w,
                expect
            );
        }
    }

    #[test]
    fn bundles_are_byte_identical_for_fixed_seed() {
        let sc = SimScenario::paper_default();
        let opts = BundleOptions {
            stability: StabilitySpec {
                duration_s: 30.0,
                sample_rate_hz: 4.118,
            },
            polscan: PolGridSpec {
                gates_per_point: 1,
                ..Default::default()
            },
            bias: BiasGridSpec {
                vstop: 0.2,
                vstep: 0.1,
                vpol: 0.2,
            },
            ..Default::default()
        };
        let d1 = tempfile::TempDir::new().unwrap();
        let d2 = tempfile::TempDir::new().unwrap();
        simulate_bundle(&sc, 11, &opts, d1.path()).unwrap();
        simulate_bundle(&sc, 11, &opts, d2.path()).unwrap();
        for name in [
            "nonlin.csv",
            "switch_cal.csv",
            "sde_counts.csv",
            "atten_cal.csv",
            "polscan.csv",
            "polscan_dark.csv",
            "stability.csv",
            "zero_offsets.csv",
            "cpm_calibration.json",
            "manifest.json",
            GROUND_TRUTH_FILE,
        ] {
            let a = std::fs::read(d1.path().join(name)).unwrap();
            let b = std::fs::read(d2.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs between identical runs");
        }
    }

    #[test]
    fn sde_session_has_all_phases_and_cal() {
        let mut sc = SimScenario::paper_default();
        sc.laser.drift = DriftModel::None;
        sc.detector.dead_time_s = 0.0;
        let run = run_sde_session(
            &sc,
            5,
            &BiasGridSpec {
                vstop: 0.3,
                vstep: 0.1,
                vpol: 0.3,
            },
            31.0,
            RangeSetting::DbmM30,
        );
        for phase in [CountPhase::Dark, CountPhase::MaxPol, CountPhase::MinPol] {
            assert!(run.counts.iter().any(|c| c.phase == phase));
        }
        assert_eq!(run.atten.records.len(), 3);
        assert!(run.flux_true_hz > 0.0);
    }

    #[test]
    fn polscan_grid_truth_realizes_requested_ps() {
        let mut sc = SimScenario::paper_default();
        sc.laser.drift = DriftModel::None;
        sc.detector.ps = 1.02;
        let run = run_polscan(
            &sc,
            9,
            &PolGridSpec {
                gates_per_point: 1,
                ..Default::default()
            },
        );
        assert_eq!(run.records.len(), 441);
        let rhos: Vec<f64> = run.truth_rows.iter().map(|r| r.3).collect();
        let max = rhos.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min = rhos.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!((max / min - 1.02).abs() < 1e-12);
        assert!((run.grid_ps_true - 1.02).abs() < 1e-12);
    }
}
