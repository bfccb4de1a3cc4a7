// Temporary numeric probe (removed before release).
use sde_metrology::nonlin::{calibrate_nonlinearity, RangeSetting};
use sde_metrology::sim::{run_nonlin_acquisition, DriftModel, SimScenario};

fn main() {
    let mut sc = SimScenario::paper_default();
    sc.laser.drift = DriftModel::None;
    if std::env::var("NOFLOOR").is_ok() {
        sc.mpm.noise_floor_fs = 0.0;
        sc.mpm.zero_offset_fs = 0.0;
    }
    if let Ok(v) = std::env::var("FLOOR") {
        sc.mpm.noise_floor_fs = v.parse().unwrap();
    }
    if let Ok(v) = std::env::var("REL") {
        sc.mpm.read_noise_rel = v.parse().unwrap();
    }
    sc.attenuators[1]
        .overrides
        .insert("3.000".to_string(), 0.49);
    sc.attenuators[1]
        .overrides
        .insert("0.000".to_string(), 0.98);

    let mut tau_errs = Vec::new();
    let mut rf20_errs = Vec::new();
    let mut rf30_errs = Vec::new();
    let mut rf_sigmas = Vec::new();
    let mut cf_sigmas = Vec::new();
    let mut order_hits = 0;
    let mut order_total = 0;
    let n_seeds = 20;
    for seed in 0..n_seeds {
        let acq = run_nonlin_acquisition(&sc, seed);
        let model = match calibrate_nonlinearity(&acq.records) {
            Ok(m) => m,
            Err(e) => {
                println!("seed {seed}: FIT FAILED: {e}");
                continue;
            }
        };
        let tau_true = 0.5;
        tau_errs.push((model.tau().value() - tau_true) / tau_true);
        // CF sigma at -30 dBm, mid-scale reading (0.5 fs) and att-cal-level (0.08 fs)
        let fs = RangeSetting::DbmM30.full_scale_w();
        let c_mid = model.correction(RangeSetting::DbmM30, 0.6 * fs).unwrap();
        let c_low = model.correction(RangeSetting::DbmM30, 0.08 * fs).unwrap();
        cf_sigmas.push((
            c_mid.factor.relative_sigma().unwrap(),
            c_low.factor.relative_sigma().unwrap(),
            model.tau().sigma() / 0.5,
            model.reduced_chi2,
        ));
        {
            let rf30 = model.rf(RangeSetting::DbmM30).unwrap();
            let rf20 = model.rf(RangeSetting::DbmM20).unwrap();
            rf30_errs.push(rf30.value() - sc.mpm.boundary(RangeSetting::DbmM30));
            rf20_errs.push(rf20.value() - sc.mpm.boundary(RangeSetting::DbmM20));
            rf_sigmas.push((rf30.sigma(), rf20.sigma()));
        }
        // order selection vs injected
        for (r, rm) in model.ranges() {
            let injected = sc.mpm.poly_coeffs(*r).len() + 1;
            order_total += 1;
            if rm.order == injected {
                order_hits += 1;
            } else if seed < 3 {
                println!("seed {seed}: range {r} order {} vs injected {injected}", rm.order);
            }
        }
        if seed < 5 {
            let rf30 = model.rf(RangeSetting::DbmM30).unwrap();
            let rf20 = model.rf(RangeSetting::DbmM20).unwrap();
            println!(
                "seed {seed}: tau {:.7} (err {:.2e}, sig {:.2e}) redchi2 {:.3} cf30(mid) rel sig {:.5}% cf30(low) {:.5}% rf30 {:.6}+/-{:.2e} (true {:.4}) rf20 {:.6}+/-{:.2e} (true {:.4})",
                model.tau().value(),
                tau_errs.last().unwrap(),
                model.tau().sigma(),
                model.reduced_chi2,
                c_mid.factor.relative_sigma().unwrap() * 100.0,
                c_low.factor.relative_sigma().unwrap() * 100.0,
                rf30.value(), rf30.sigma(), sc.mpm.boundary("-30".parse::<i32>().ok().and_then(|d| RangeSetting::try_from_dbm(d).ok()).unwrap()),
                rf20.value(), rf20.sigma(), sc.mpm.boundary(RangeSetting::DbmM20),
            );
        }
    }
    // Within-range corrected-ratio accuracy on a noiseless probe grid.
    let mut worst_within: Vec<f64> = Vec::new();
    for seed in 200..260u64 {
        let acq = run_nonlin_acquisition(&sc, seed);
        let model = match calibrate_nonlinearity(&acq.records) {
            Ok(m) => m,
            Err(_) => continue,
        };
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
            let p_lo = lo.max(0.1);
            let p_hi = hi.min(1.0);
            let probes: Vec<f64> = [0.0, 0.25, 0.5, 0.75, 1.0]
                .iter()
                .map(|f| p_lo + f * (p_hi - p_lo))
                .collect();
            let corrected: Vec<f64> = probes
                .iter()
                .map(|v| v / model.correction(*r, v * rm.scale_w).unwrap().factor.value())
                .collect();
            for i in 0..probes.len() {
                for j in (i + 1)..probes.len() {
                    let got = corrected[i] / corrected[j];
                    let want = q_true(probes[i]) / q_true(probes[j]);
                    worst = worst.max(((got - want) / want).abs());
                }
            }
        }
        worst_within.push(worst);
    }
    worst_within.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = worst_within.len();
    println!(
        "within-range ratio worst err: median {:.2e}, p90 {:.2e}, p95 {:.2e}, max {:.2e}, frac<=5e-4 {:.2}",
        worst_within[n / 2],
        worst_within[(n as f64 * 0.9) as usize],
        worst_within[(n as f64 * 0.95) as usize],
        worst_within[n - 1],
        worst_within.iter().filter(|w| **w <= 5e-4).count() as f64 / n as f64
    );

    // Cross-range corrected-ratio accuracy against true incident powers.
    let mut worst_ratio_err: Vec<f64> = Vec::new();
    for seed in 100..120u64 {
        let acq = run_nonlin_acquisition(&sc, seed);
        let model = match calibrate_nonlinearity(&acq.records) {
            Ok(m) => m,
            Err(_) => continue,
        };
        let truth = sde_metrology::sim::RealizedTruth::new(&sc, seed);
        // group means per (range, att1, att2)
        use std::collections::BTreeMap;
        let mut groups: BTreeMap<(i32, i64, i64), Vec<f64>> = BTreeMap::new();
        for r in &acq.records {
            groups
                .entry((r.range.dbm(), (r.att1_db * 1e6) as i64, (r.att2_db * 1e6) as i64))
                .or_default()
                .push(r.reading_w);
        }
        let mut pts: Vec<(f64, f64)> = Vec::new(); // (corrected, true power)
        for ((dbm, a1, a2), reads) in &groups {
            let range = RangeSetting::try_from_dbm(*dbm).unwrap();
            let v: f64 = reads.iter().sum::<f64>() / reads.len() as f64;
            let corr = match model.correction(range, v) {
                Ok(c) => c,
                Err(_) => continue,
            };
            let p_true = sc.laser.power_w
                * truth.attenuator_transmission(0, *a1 as f64 / 1e6)
                * truth.attenuator_transmission(1, *a2 as f64 / 1e6)
                * truth.attenuator_transmission(2, 0.0)
                * sc.switch.monitor_coupling;
            pts.push((v / corr.factor.value(), p_true));
        }
        // all pairwise ratios (corrected_i/corrected_j) vs (true_i/true_j)
        let mut worst: f64 = 0.0;
        for i in 0..pts.len() {
            for j in (i + 1)..pts.len() {
                let got = pts[i].0 / pts[j].0;
                let want = pts[i].1 / pts[j].1;
                worst = worst.max(((got - want) / want).abs());
            }
        }
        worst_ratio_err.push(worst);
    }
    worst_ratio_err.sort_by(|a, b| a.partial_cmp(b).unwrap());
    println!(
        "cross-range corrected-ratio worst error: median {:.3e}, p95 {:.3e}, max {:.3e}",
        worst_ratio_err[worst_ratio_err.len() / 2],
        worst_ratio_err[(worst_ratio_err.len() as f64 * 0.95) as usize],
        worst_ratio_err.last().unwrap()
    );

    let mean_abs_tau: f64 =
        tau_errs.iter().map(|e| e.abs()).sum::<f64>() / tau_errs.len() as f64;
    let max_abs_tau = tau_errs.iter().map(|e| e.abs()).fold(0.0f64, f64::max);
    let mean_cf_mid: f64 = cf_sigmas.iter().map(|c| c.0).sum::<f64>() / cf_sigmas.len() as f64;
    let mean_cf_low: f64 = cf_sigmas.iter().map(|c| c.1).sum::<f64>() / cf_sigmas.len() as f64;
    let mean_red: f64 = cf_sigmas.iter().map(|c| c.3).sum::<f64>() / cf_sigmas.len() as f64;
    println!("--- {n_seeds} seeds ---");
    println!("tau: mean |err| {mean_abs_tau:.2e}, max {max_abs_tau:.2e}");
    println!(
        "CF_NL(-30) rel sigma: mid {:.5}%, low {:.5}%; mean redchi2 {:.3}",
        mean_cf_mid * 100.0,
        mean_cf_low * 100.0,
        mean_red
    );
    println!("order selection: {order_hits}/{order_total}");
    let rms = |v: &Vec<f64>| (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt();
    let mean_sig30: f64 = rf_sigmas.iter().map(|s| s.0).sum::<f64>() / rf_sigmas.len() as f64;
    let mean_sig20: f64 = rf_sigmas.iter().map(|s| s.1).sum::<f64>() / rf_sigmas.len() as f64;
    println!(
        "rf30 err rms {:.2e} (reported sigma {:.2e}); rf20 err rms {:.2e} (reported {:.2e})",
        rms(&rf30_errs), mean_sig30, rms(&rf20_errs), mean_sig20
    );
}
