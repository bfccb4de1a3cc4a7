//! Acceptance suite: one test per release criterion, each printing a
//! single PASS/FAIL line with the measured numbers.

mod common;

use common::*;
use rand::SeedableRng;
use rand_distr::Distribution;
use sde_metrology::nonlin::RangeSetting;
use sde_metrology::polarization::{polarization_sensitivity, transmission_correct, CorrectedPoint, PolGrid};
use sde_metrology::sde::{pileup_max_sde, rate_from_gates, CountPhase, DeadTimeModel};
use sde_metrology::sim::{registered_fraction, run_polscan, run_stability, PolGridSpec, SimScenario, StabilitySpec};
use sde_metrology::stability::{allan_deviation, StabilitySeries};
use sde_metrology::uncertainty::UncertainValue;

fn verdict(tag: &str, pass: bool, details: &str) {
    let status = if pass { "PASS" } else { "FAIL" };
    println!("ACCEPTANCE {tag}: {status} - {details}");
    assert!(pass, "{tag} failed: {details}");
}

/// C1: analytic pile-up bound against the quoted operating point and a
/// 1e8-arrival discrete-event simulation.
#[test]
fn criterion_1_pileup_bound() {
    let rate = 2e5;
    let dead = 175e-9;
    let par = pileup_max_sde(rate, dead, DeadTimeModel::Paralyzable);
    let nonpar = pileup_max_sde(rate, dead, DeadTimeModel::Nonparalyzable);
    let par_ok = (par - 0.965).abs() <= 0.0015;
    let nonpar_ok = (nonpar - 0.9662).abs() <= 1e-4;

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0xDEAD);
    let n = 100_000_000u64;
    let des_par = registered_fraction(&mut rng, rate, dead, DeadTimeModel::Paralyzable, n);
    let des_nonpar = registered_fraction(&mut rng, rate, dead, DeadTimeModel::Nonparalyzable, n);
    let des_par_ok = ((des_par - par) / par).abs() <= 5e-4;
    let des_nonpar_ok = ((des_nonpar - nonpar) / nonpar).abs() <= 5e-4;

    verdict(
        "C1 pile-up bound",
        par_ok && nonpar_ok && des_par_ok && des_nonpar_ok,
        &format!(
            "paralyzable {par:.6} (target 0.965 +/- 0.0015), nonparalyzable {nonpar:.6}, \
             DES(1e8) {des_par:.6}/{des_nonpar:.6} within 0.05%"
        ),
    );
}

/// C2: the four-term attenuator budget composes to 0.177%, the rounded
/// quoted value being 0.2%.
#[test]
fn criterion_2_attenuator_budget() {
    let p10 = UncertainValue::lift(1.0, 0.001).unwrap();
    let p30 = UncertainValue::lift(1.0, 0.001).unwrap();
    let cf10 = UncertainValue::lift(1.0, 0.00075).unwrap();
    let cf30 = UncertainValue::lift(1.0, 0.00075).unwrap();
    let alpha = (&p30 / &cf30) / (&p10 / &cf10);
    let rel = alpha.relative_sigma().unwrap();
    let exact_ok = (rel - 0.0017677669529663687).abs() < 1e-9;
    let rounded_ok = (rel - 0.002).abs() < 5e-4;
    verdict(
        "C2 attenuator budget",
        exact_ok && rounded_ok,
        &format!("sigma_alpha/alpha = {:.4}% (quadrature of 0.1/0.1/0.075/0.075%)", rel * 100.0),
    );
}

/// C3: the full efficiency budget composed from the table rows plus the
/// counting terms; any gap against the quoted totals is reported.
#[test]
fn criterion_3_error_budget_composition() {
    let total_at = |cr: f64| {
        let mpm = UncertainValue::lift(1.0, 0.001).unwrap();
        let rsw = UncertainValue::lift(1.0, 0.0014).unwrap();
        let cpm = UncertainValue::lift(1.0, 0.0014).unwrap();
        let cfnl = UncertainValue::lift(1.0, 0.00075).unwrap();
        let p_dp = &(&(&mpm / &cfnl) * &rsw) / &cpm;
        let alphas: Vec<UncertainValue> = (0..3)
            .map(|_| UncertainValue::lift(1.0, 0.002).unwrap())
            .collect();
        // Ten 1 s gates; sigma per rate is the quadrature of the Poisson
        // deviation of the mean and the numerical standard error, the
        // latter at its Poisson-expected size.
        let dcr = 1e4f64;
        let sigma_cr = (2.0 * cr / 10.0).sqrt();
        let sigma_dcr = (2.0 * dcr / 10.0).sqrt();
        let light = UncertainValue::lift(cr, sigma_cr).unwrap();
        let dark = UncertainValue::lift(dcr, sigma_dcr).unwrap();
        let net = &light - &dark;
        let flux = &(&(&p_dp * &alphas[0]) * &alphas[1]) * &alphas[2];
        let sde = &net / &(&flux * (cr - dcr));
        sde.relative_sigma().unwrap()
    };
    let rel_high = total_at(2.3e5);
    let rel_low = total_at(1.1e5);
    let band_ok = (0.0042..=0.0050).contains(&rel_high);
    let order_ok = rel_low > rel_high;
    verdict(
        "C3 error-budget composition",
        band_ok && order_ok,
        &format!(
            "2.3e5/s: {:.4}% (band 0.42..0.50%, quoted 0.46%, gap {:+.3}%); \
             1e5/s: {:.4}% (quoted 0.51%, gap {:+.3}%); low-rate case exceeds high-rate case",
            rel_high * 100.0,
            (rel_high - 0.0046) * 100.0,
            rel_low * 100.0,
            (rel_low - 0.0051) * 100.0
        ),
    );
}

/// C4: nonlinearity-calibration recovery over 100 seeds at paper-scale
/// noise: linearized within-range ratios to 0.05%, the step transmission to
/// 0.1%, and a fitted correction sigma at -30 dBm inside the quoted band.
#[test]
fn criterion_4_nonlinearity_recovery() {
    let sc = tau_half_scenario();
    let n_seeds = 100u64;
    let mut pass_seeds = 0;
    let mut cf_sigmas = Vec::new();
    let mut b2_hits = 0;
    for seed in 0..n_seeds {
        let model = match sde_metrology::nonlin::calibrate_nonlinearity(
            &sde_metrology::sim::run_nonlin_acquisition(&sc, seed).records,
        ) {
            Ok(m) => m,
            Err(_) => continue,
        };
        let tau_ok = ((model.tau().value() - 0.5) / 0.5).abs() <= 1e-3;

        // Within-range linearization accuracy on a noiseless probe grid:
        // the meter truth maps reading v to linearized power q(v), so
        // corrected-reading ratios must reproduce q(v) ratios.
        let mut worst = 0.0f64;
        for (r, rm) in model.ranges() {
            let truth = sc.mpm.poly_coeffs(*r);
            let q_true = |v: f64| {
                let mut p = v;
                for (i, c) in truth.iter().enumerate() {
                    p += c * v.powi((i + 2) as i32);
                }
                p
            };
            let (lo, hi) = rm.span_fs;
            let probes: Vec<f64> = [0.05, 0.3, 0.5, 0.7, 0.95]
                .iter()
                .map(|f| lo + f * (hi - lo))
                .collect();
            let corrected: Vec<f64> = probes
                .iter()
                .map(|v| {
                    let c = model.correction(*r, v * rm.scale_w).unwrap();
                    v / c.factor.value()
                })
                .collect();
            for i in 0..probes.len() {
                for j in (i + 1)..probes.len() {
                    let got = corrected[i] / corrected[j];
                    let want = q_true(probes[i]) / q_true(probes[j]);
                    worst = worst.max(((got - want) / want).abs());
                }
            }
        }
        let ratio_ok = worst <= 5e-4;
        if tau_ok && ratio_ok {
            pass_seeds += 1;
        }

        let rm30 = model.range(RangeSetting::DbmM30).unwrap();
        if rm30.order == 2 {
            let c2_true = sc.mpm.poly_coeffs(RangeSetting::DbmM30)[0];
            if (rm30.coeffs[0].value() - c2_true).abs() <= 3.0 * rm30.coeffs[0].sigma() {
                b2_hits += 1;
            }
        }
        // Correction sigma at the attenuator-calibration operating level
        // (a reading near 8% of full scale, ~80 nW at -30 dBm).
        let corr = model
            .correction(RangeSetting::DbmM30, 0.08 * RangeSetting::DbmM30.full_scale_w())
            .unwrap();
        cf_sigmas.push(corr.factor.relative_sigma().unwrap());
    }
    cf_sigmas.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let cf_median = cf_sigmas[cf_sigmas.len() / 2];
    let band_ok = (0.00061..=0.00075).contains(&cf_median);
    let recovery_ok = pass_seeds >= 95;
    verdict(
        "C4 nonlinearity recovery",
        recovery_ok && band_ok,
        &format!(
            "{pass_seeds}/{n_seeds} seeds within 0.05% ratio / 0.1% tau; \
             median CF sigma at -30 dBm = {:.4}% (band 0.061..0.075%); \
             injected curvature within 3 sigma in {b2_hits}/{n_seeds}",
            cf_median * 100.0
        ),
    );
}

/// C5: end-to-end efficiency recovery over 200 seeded pipelines with k=1
/// coverage in the 55-80% sanity band.
#[test]
fn criterion_5_end_to_end_coverage() {
    let sc = coverage_scenario();
    let grid = default_grid();
    let n_seeds = 200u64;
    let mut within1 = 0;
    let mut within3 = 0;
    let mut analyzed = 0;
    let sde_true = sc.detector.sde.at_ua(5.0);
    assert!((sde_true - 0.965).abs() < 1e-12);
    for seed in 0..n_seeds {
        let (result, _run) = run_full_pipeline(&sc, seed, &grid, COVERAGE_ATT_DB);
        let p = result.at_bias_ua(CountPhase::MaxPol, 5.0).unwrap();
        let z = (p.sde.value() - sde_true).abs() / p.sde.sigma();
        analyzed += 1;
        if z <= 1.0 {
            within1 += 1;
        }
        if z <= 3.0 {
            within3 += 1;
        }
    }
    let cov1_ok = within1 >= 110 && within1 <= 160;
    let cov3_ok = within3 >= 198;
    verdict(
        "C5 end-to-end SDE recovery",
        analyzed == 200 && cov1_ok && cov3_ok,
        &format!(
            "truth 0.965 at 5 uA: |err|<=1 sigma in {within1}/200 (band 110..160), \
             <=3 sigma in {within3}/200 (need >=198)"
        ),
    );
}

/// C6: polarization sensitivity 1.020 recovered within the quoted +/-0.008
/// in at least 90 of 100 sweeps; grid invariants hold.
#[test]
fn criterion_6_polarization_sensitivity() {
    let mut sc = stationary_scenario();
    sc.detector.dead_time_s = 0.0;
    sc.detector.ps = 1.02;
    let spec = PolGridSpec {
        att_db: 31.5,
        ..Default::default()
    };
    let n_seeds = 100u64;
    let mut hits = 0;
    let mut all_ge_one = true;
    let mut scale_invariant = true;
    for seed in 0..n_seeds {
        let run = run_polscan(&sc, seed, &spec);
        let grid = PolGrid::new(run.records.clone()).unwrap();
        let dark = rate_from_gates(&run.dark_gates).unwrap();
        let corrected = transmission_correct(&grid, &dark).unwrap();
        let ps = polarization_sensitivity(&corrected).unwrap();
        if (ps.value() - run.grid_ps_true).abs() <= 0.008 {
            hits += 1;
        }
        all_ge_one &= ps.value() >= 1.0;
        if seed == 0 {
            let scaled: Vec<CorrectedPoint> = corrected
                .iter()
                .map(|p| CorrectedPoint {
                    qwp_deg: p.qwp_deg,
                    hwp_deg: p.hwp_deg,
                    transmission: p.transmission,
                    rate_hz: &p.rate_hz * 7.5,
                })
                .collect();
            let ps_scaled = polarization_sensitivity(&scaled).unwrap();
            scale_invariant = ((ps.value() - ps_scaled.value()) / ps.value()).abs() < 1e-12;
        }
    }
    verdict(
        "C6 polarization sensitivity",
        hits >= 90 && all_ge_one && scale_invariant,
        &format!(
            "truth 1.020 recovered within +/-0.008 in {hits}/100; PS >= 1 everywhere; \
             scale-invariant to 1e-12"
        ),
    );
}

/// C7: Allan deviation: white-noise slope -1/2 and the drift default
/// reproducing the quoted 10 s deviation.
#[test]
fn criterion_7_allan_deviation() {
    let fs = 4.118;
    let normal = rand_distr::Normal::new(0.0, 1e-3).unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0xA11A);
    let readings: Vec<f64> = (0..40_000)
        .map(|_| 1e-4 * (1.0 + normal.sample(&mut rng)))
        .collect();
    let series = StabilitySeries::new(readings, fs).unwrap();
    let taus: Vec<f64> = [4usize, 8, 16, 32, 40].iter().map(|m| *m as f64 / fs).collect();
    let points = allan_deviation(&series, &taus).unwrap();
    // Least-squares slope in log-log.
    let xs: Vec<f64> = points.iter().map(|p| p.tau_s.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.adev.ln()).collect();
    let mx = xs.iter().sum::<f64>() / xs.len() as f64;
    let my = ys.iter().sum::<f64>() / ys.len() as f64;
    let slope = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (x - mx) * (y - my))
        .sum::<f64>()
        / xs.iter().map(|x| (x - mx) * (x - mx)).sum::<f64>();
    let slope_ok = (slope + 0.5).abs() <= 0.05;

    // Drift scenario at simulator defaults (random-walk source).
    let sc = SimScenario::paper_default();
    let samples = run_stability(
        &sc,
        0xD21F7,
        &StabilitySpec {
            duration_s: 7200.0,
            sample_rate_hz: fs,
        },
    );
    let series = StabilitySeries::new(samples.iter().map(|s| s.1).collect(), fs).unwrap();
    let adev10 = allan_deviation(&series, &[10.0]).unwrap()[0].adev;
    let drift_ok = ((adev10 - 9.28e-4) / 9.28e-4).abs() <= 0.20;
    verdict(
        "C7 Allan deviation",
        slope_ok && drift_ok,
        &format!(
            "white-noise log-log slope {slope:.3} (target -0.5 +/- 10%); \
             default drift ADEV(10 s) = {adev10:.3e} (target 9.28e-4 +/- 20%)"
        ),
    );
}

/// C8: the uncertainty engine against finite differences (1e-6 relative)
/// and Monte Carlo (2% at 1e6 samples) on 20 composite expressions.
#[test]
fn criterion_8_uncertainty_engine() {
    struct Expr {
        name: &'static str,
        inputs: Vec<(f64, f64)>,
        plain: fn(&[f64]) -> f64,
        uncertain: fn(&[UncertainValue]) -> UncertainValue,
    }
    let exprs: Vec<Expr> = vec![
        Expr { name: "sum", inputs: vec![(5.0, 0.05), (3.0, 0.03)], plain: |x| x[0] + x[1], uncertain: |x| &x[0] + &x[1] },
        Expr { name: "difference", inputs: vec![(5.0, 0.04), (3.0, 0.02)], plain: |x| x[0] - x[1], uncertain: |x| &x[0] - &x[1] },
        Expr { name: "product", inputs: vec![(2.0, 0.02), (7.0, 0.05)], plain: |x| x[0] * x[1], uncertain: |x| &x[0] * &x[1] },
        Expr { name: "quotient", inputs: vec![(9.0, 0.08), (4.0, 0.03)], plain: |x| x[0] / x[1], uncertain: |x| &x[0] / &x[1] },
        Expr { name: "scaled product over c", inputs: vec![(2.0, 0.01), (5.0, 0.04), (3.0, 0.02)], plain: |x| x[0] * x[1] / x[2], uncertain: |x| &(&x[0] * &x[1]) / &x[2] },
        Expr { name: "ratio of sums", inputs: vec![(4.0, 0.02), (2.0, 0.02), (5.0, 0.03), (1.0, 0.01)], plain: |x| (x[0] + x[1]) / (x[2] + x[3]), uncertain: |x| &(&x[0] + &x[1]) / &(&x[2] + &x[3]) },
        Expr { name: "square times b", inputs: vec![(3.0, 0.02), (2.0, 0.015)], plain: |x| x[0] * x[0] * x[1], uncertain: |x| &x[0].powi(2) * &x[1] },
        Expr { name: "real power", inputs: vec![(4.0, 0.03)], plain: |x| x[0].powf(1.7), uncertain: |x| x[0].try_powf(1.7).unwrap() },
        Expr { name: "log plus scaled", inputs: vec![(8.0, 0.05), (2.0, 0.01)], plain: |x| x[0].ln() + 0.5 * x[1], uncertain: |x| &x[0].try_ln().unwrap() + &(&x[1] * 0.5) },
        Expr { name: "sqrt of product", inputs: vec![(9.0, 0.05), (4.0, 0.02)], plain: |x| (x[0] * x[1]).sqrt(), uncertain: |x| (&x[0] * &x[1]).try_sqrt().unwrap() },
        Expr { name: "exp of small", inputs: vec![(0.5, 0.004)], plain: |x| x[0].exp(), uncertain: |x| x[0].exp() },
        Expr { name: "log10 times b", inputs: vec![(100.0, 0.8), (3.0, 0.02)], plain: |x| x[0].log10() * x[1], uncertain: |x| &x[0].try_log10().unwrap() * &x[1] },
        Expr { name: "asymmetry", inputs: vec![(5.0, 0.03), (3.0, 0.02)], plain: |x| (x[0] - x[1]) / (x[0] + x[1]), uncertain: |x| &(&x[0] - &x[1]) / &(&x[0] + &x[1]) },
        Expr { name: "four-factor product", inputs: vec![(1.0, 0.005), (1.0, 0.006), (1.0, 0.004), (1.0, 0.008)], plain: |x| x[0] * x[1] * x[2] * x[3], uncertain: |x| &(&(&x[0] * &x[1]) * &x[2]) * &x[3] },
        Expr { name: "double quotient", inputs: vec![(10.0, 0.05), (2.0, 0.01), (5.0, 0.04)], plain: |x| x[0] / x[1] / x[2], uncertain: |x| &(&x[0] / &x[1]) / &x[2] },
        Expr { name: "weighted mean times d", inputs: vec![(2.0, 0.01), (4.0, 0.02), (6.0, 0.03), (1.5, 0.01)], plain: |x| (x[0] + x[1] + x[2]) / 3.0 * x[3], uncertain: |x| &(&(&(&x[0] + &x[1]) + &x[2]) / 3.0) * &x[3] },
        Expr { name: "mixed inner products", inputs: vec![(2.0, 0.015), (3.0, 0.02), (4.0, 0.02), (5.0, 0.03), (7.0, 0.04)], plain: |x| (x[0] * x[1] + x[2] * x[3]) / x[4], uncertain: |x| &(&(&x[0] * &x[1]) + &(&x[2] * &x[3])) / &x[4] },
        // The attenuator budget: ratio of corrected readings at two ranges.
        Expr { name: "attenuator budget", inputs: vec![(1.0, 0.001), (1.0, 0.00075), (1.0, 0.001), (1.0, 0.00075)], plain: |x| (x[0] / x[1]) / (x[2] / x[3]), uncertain: |x| &(&x[0] / &x[1]) / &(&x[2] / &x[3]) },
        // The detector-port power: corrected monitor reading through the
        // switch ratio and the calibrated-meter factor.
        Expr { name: "port power", inputs: vec![(1.0, 0.001), (1.0, 0.00075), (1.0, 0.0014), (1.0, 0.0014)], plain: |x| x[0] / x[1] * x[2] / x[3], uncertain: |x| &(&(&x[0] / &x[1]) * &x[2]) / &x[3] },
        // The efficiency estimate: net rate over the attenuated photon rate.
        Expr { name: "efficiency estimate", inputs: vec![(2.2e5, 219.0), (1.0, 0.00234), (1.0, 0.002), (1.0, 0.002), (1.0, 0.002)], plain: |x| x[0] / (2.2e5 * x[1] * x[2] * x[3] * x[4]), uncertain: |x| &x[0] / &(&(&(&(&x[1] * &x[2]) * &x[3]) * &x[4]) * 2.2e5) },
    ];
    assert_eq!(exprs.len(), 20);

    let mut worst_fd = 0.0f64;
    let mut worst_mc = 0.0f64;
    for expr in &exprs {
        let values: Vec<f64> = expr.inputs.iter().map(|(v, _)| *v).collect();
        let lifted: Vec<UncertainValue> = expr
            .inputs
            .iter()
            .map(|(v, s)| UncertainValue::lift(*v, *s).unwrap())
            .collect();
        let engine = (expr.uncertain)(&lifted);

        // Central finite differences over the base variables.
        let mut fd_var = 0.0;
        for (i, (v, s)) in expr.inputs.iter().enumerate() {
            if *s == 0.0 {
                continue;
            }
            let h = 1e-5 * v.abs().max(1e-3);
            let mut hi = values.clone();
            let mut lo = values.clone();
            hi[i] = v + h;
            lo[i] = v - h;
            let d = ((expr.plain)(&hi) - (expr.plain)(&lo)) / (2.0 * h);
            fd_var += (d * s) * (d * s);
        }
        let fd_sigma = fd_var.sqrt();
        let fd_err = ((engine.sigma() - fd_sigma) / fd_sigma).abs();
        worst_fd = worst_fd.max(fd_err);
        assert!(
            fd_err < 1e-6,
            "{}: engine {} vs finite differences {}",
            expr.name,
            engine.sigma(),
            fd_sigma
        );

        // Monte Carlo with 1e6 normal draws.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0x4D43 ^ 77);
        let gauss = rand_distr::Normal::new(0.0, 1.0).unwrap();
        let n = 1_000_000usize;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        let mut sample = values.clone();
        for _ in 0..n {
            for (i, (v, s)) in expr.inputs.iter().enumerate() {
                sample[i] = v + s * gauss.sample(&mut rng);
            }
            let y = (expr.plain)(&sample);
            sum += y;
            sumsq += y * y;
        }
        let mean = sum / n as f64;
        let mc_sigma = (sumsq / n as f64 - mean * mean).sqrt();
        let mc_err = ((engine.sigma() - mc_sigma) / mc_sigma).abs();
        worst_mc = worst_mc.max(mc_err);
        assert!(
            mc_err < 0.02,
            "{}: engine {} vs Monte Carlo {}",
            expr.name,
            engine.sigma(),
            mc_sigma
        );
    }

    // Exact cancellation.
    let x = UncertainValue::lift(3.0, 0.3).unwrap();
    let d = &x - &x;
    let cancel_ok = d.value() == 0.0 && d.sigma() == 0.0;

    verdict(
        "C8 uncertainty engine",
        cancel_ok,
        &format!(
            "20 expressions: worst |engine-FD|/FD = {worst_fd:.2e} (tol 1e-6), \
             worst |engine-MC|/MC = {worst_mc:.3} (tol 0.02); x - x = 0 +/- 0 exactly"
        ),
    );
}
