// Temporary end-to-end probe (removed before release).
use sde_metrology::instrument::{switching_ratio, CalibrationBundle, CpmCalibration};
use sde_metrology::nonlin::{calibrate_nonlinearity, RangeSetting};
use sde_metrology::polarization::{polarization_sensitivity, transmission_correct, PolGrid};
use sde_metrology::sde::{group_by_bias, rate_from_gates, sde_curve, CountPhase, SdeSessionData};
use sde_metrology::sim::{
    run_nonlin_acquisition, run_polscan, run_sde_session, run_switch_cal, BiasGridSpec,
    DriftModel, PolGridSpec, SimScenario,
};

fn coverage_scenario() -> SimScenario {
    let mut sc = SimScenario::paper_default();
    sc.laser.drift = DriftModel::None;
    
    sc.detector.dead_time_s = 0.0;
    sc.detector.ps = 1.0;
    // sde(5 uA) = 0.965 exactly.
    sc.detector.sde.plateau = 0.965 * (1.0 + (-(5.0 - 3.0) / 0.25f64).exp());
    sc
}

fn main() {
    let sc = coverage_scenario();
    let grid = BiasGridSpec {
        vstop: 0.6,
        vstep: 0.1,
        vpol: 0.5,
    };
    let mut zs = Vec::new();
    let mut sigmas = Vec::new();
    let mut errs = Vec::new();
    for seed in 0..100u64 {
        let acq = run_nonlin_acquisition(&sc, seed);
        let model = match calibrate_nonlinearity(&acq.records) {
            Ok(m) => m,
            Err(e) => {
                println!("seed {seed}: fit failed: {e}");
                continue;
            }
        };
        let sw = run_switch_cal(&sc, seed);
        let switch = switching_ratio(&sw.record).unwrap();
        let run = run_sde_session(&sc, seed, &grid, 31.8, RangeSetting::DbmM30);
        let truth = sde_metrology::sim::RealizedTruth::new(&sc, seed);
        let cpm = CpmCalibration::new(&[(
            sc.wavelength_nm,
            truth.cf_cpm_reported,
            sc.cpm.reported_rel_sigma,
        )])
        .unwrap();
        let session = SdeSessionData {
            wavelength_nm: sc.wavelength_nm,
            dark: group_by_bias(&run.counts, CountPhase::Dark).unwrap(),
            maxpol: group_by_bias(&run.counts, CountPhase::MaxPol).unwrap(),
            minpol: group_by_bias(&run.counts, CountPhase::MinPol).unwrap(),
            atten_cal: run.atten.records.clone(),
        };
        let bundle = CalibrationBundle {
            nonlin: model,
            switch,
            cpm,
        };
        let result = sde_curve(&session, &bundle).unwrap();
        if seed < 0 {
            let truth_chain_30 = sc.mpm.boundary(RangeSetting::DbmM30) * sc.mpm.boundary(RangeSetting::DbmM20);
            let rf30 = bundle.nonlin.rf(RangeSetting::DbmM30).unwrap();
            let rf20 = bundle.nonlin.rf(RangeSetting::DbmM20).unwrap();
            println!(
                "  rf30 {:.6} (true {:.6}) rf20 {:.6} (true {:.6}) chain err {:+.3}%",
                rf30.value(), sc.mpm.boundary(RangeSetting::DbmM30),
                rf20.value(), sc.mpm.boundary(RangeSetting::DbmM20),
                (rf30.value() * rf20.value() / truth_chain_30 - 1.0) * 100.0
            );
            // corrected readings against true incident power, both phases of att 1
            let rec = &run.atten.records[0];
            let tr = sde_metrology::sim::RealizedTruth::new(&sc, seed);
            let p_zero_true = sc.laser.power_w
                * tr.attenuator_transmission(0, 0.0)
                * tr.attenuator_transmission(1, 0.0)
                * tr.attenuator_transmission(2, 0.0)
                * sc.switch.monitor_coupling;
            let p_att_true = p_zero_true / tr.attenuator_transmission(0, 0.0)
                * tr.attenuator_transmission(0, rec.nominal_db);
            let vz: f64 = rec.zero_readings_w.iter().sum::<f64>() / rec.zero_readings_w.len() as f64;
            let va: f64 = rec.att_readings_w.iter().sum::<f64>() / rec.att_readings_w.len() as f64;
            let cz = bundle.nonlin.correction(rec.zero_range, vz).unwrap();
            let ca = bundle.nonlin.correction(rec.att_range, va).unwrap();
            let gauge = sc.mpm.gauge;
            println!(
                "  corr(zero)/(g*P_true) {:+.4}%  corr(att)/(g*P_true) {:+.4}%  v_att_fs {:.4} extrap {} {}",
                ((vz / cz.factor.value()) / (gauge * p_zero_true) - 1.0) * 100.0,
                ((va / ca.factor.value()) / (gauge * p_att_true) - 1.0) * 100.0,
                va / RangeSetting::DbmM30.full_scale_w(),
                cz.extrapolated, ca.extrapolated
            );
            let p_dp_true = run.atten.p_dp_true_w;
            println!(
                "  P_DP est {:.5e} true {:.5e} (err {:+.3}%)",
                result.p_dp_w.value(),
                p_dp_true,
                (result.p_dp_w.value() / p_dp_true - 1.0) * 100.0
            );
            for (i, a) in result.alphas.iter().enumerate() {
                println!(
                    "  alpha{} est {:.6e} true {:.6e} (err {:+.3}%)",
                    i + 1,
                    a.value(),
                    run.atten.alpha_true[i],
                    (a.value() / run.atten.alpha_true[i] - 1.0) * 100.0
                );
            }
            println!(
                "  flux est {:.5e} true {:.5e} (err {:+.3}%)",
                result.photon_rate_hz.value(),
                run.flux_true_hz,
                (result.photon_rate_hz.value() / run.flux_true_hz - 1.0) * 100.0
            );
            let p5 = result.at_bias_ua(CountPhase::MaxPol, 5.0).unwrap();
            println!(
                "  net rate {:.5e}, flux_true*sde_true {:.5e} (err {:+.3}%)",
                p5.net_rate_hz.value(),
                run.flux_true_hz * sc.detector.sde.at_ua(5.0),
                (p5.net_rate_hz.value() / (run.flux_true_hz * sc.detector.sde.at_ua(5.0)) - 1.0) * 100.0
            );
        }
        let p = result.at_bias_ua(CountPhase::MaxPol, 5.0).unwrap();
        let sde_true = sc.detector.sde.at_ua(5.0);
        let err = p.sde.value() - sde_true;
        let z = err / p.sde.sigma();
        zs.push(z.abs());
        sigmas.push(p.sde.sigma() / p.sde.value());
        errs.push(err / sde_true);
        if seed < 0 {
            println!(
                "seed {seed}: sde {:.5} +/- {:.5} (rel {:.3}%), truth {:.5}, z = {:+.2}",
                p.sde.value(),
                p.sde.sigma(),
                p.sde.relative_sigma().unwrap() * 100.0,
                sde_true,
                err / p.sde.sigma()
            );
        }
    }
    let n = zs.len();
    let within1 = zs.iter().filter(|z| **z <= 1.0).count();
    let within3 = zs.iter().filter(|z| **z <= 3.0).count();
    let rms_err = (errs.iter().map(|e| e * e).sum::<f64>() / n as f64).sqrt();
    let mean_sig = sigmas.iter().sum::<f64>() / n as f64;
    println!("--- coverage over {n} seeds ---");
    println!("|z|<=1: {within1}/{n}  |z|<=3: {within3}/{n}");
    println!(
        "actual rel err rms {:.4}%, mean propagated rel sigma {:.4}%",
        rms_err * 100.0,
        mean_sig * 100.0
    );

    // PS recovery.
    let mut sc = SimScenario::paper_default();
    sc.laser.drift = DriftModel::None;
    sc.detector.dead_time_s = 0.0;
    sc.detector.ps = 1.02;
    let spec = PolGridSpec { att_db: 31.5, ..Default::default() };
    let mut ps_errs = Vec::new();
    for seed in 0..15u64 {
        let run = run_polscan(&sc, seed, &spec);
        let grid = PolGrid::new(run.records.clone()).unwrap();
        let dark = rate_from_gates(&run.dark_gates).unwrap();
        let corrected = transmission_correct(&grid, &dark).unwrap();
        let ps = polarization_sensitivity(&corrected).unwrap();
        ps_errs.push(ps.value() - run.grid_ps_true);
        if seed < 6 {
            println!(
                "seed {seed}: PS {:.4} +/- {:.4} truth {:.3} err {:+.4}",
                ps.value(),
                ps.sigma(),
                run.grid_ps_true,
                ps.value() - run.grid_ps_true
            );
        }
    }
    let worst = ps_errs.iter().map(|e| e.abs()).fold(0.0f64, f64::max);
    let mean: f64 = ps_errs.iter().sum::<f64>() / ps_errs.len() as f64;
    println!("--- PS over {} seeds: mean err {mean:+.4}, worst |err| {worst:.4}", ps_errs.len());
}
