//! Thin command-line front end over the library: simulate sessions, run the
//! calibrations and analyses, and render reports. Exit codes: 0 success,
//! 2 usage, 3 data error, 4 numerical error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sde_metrology::error::Error;
use sde_metrology::instrument::switching_ratio;
use sde_metrology::nonlin::{calibrate_nonlinearity, RangeSetting};
use sde_metrology::polarization::{
    extremes, polarization_sensitivity, transmission_correct, PsResult,
};
use sde_metrology::report::{render_report, PS_RESULT_FILE, SDE_RESULT_FILE};
use sde_metrology::sde::{pileup_max_sde, rate_from_gates, sde_curve, DeadTimeModel, PileupBound};
use sde_metrology::session::{
    self, file_digest, load_bundle, load_polscan, load_sde_session, read_nonlin_csv,
    read_switch_csv, AlphaEntry, BundleFile, FileEntry, Role, SessionManifest,
    SwitchCalibrationFile, OUTPUT_DIR,
};
use sde_metrology::sim::{simulate_bundle, BiasGridSpec, BundleOptions, PolGridSpec, SimScenario, StabilitySpec};
use sde_metrology::stability::{allan_deviation, default_taus};
use sde_metrology::uncertainty::UncertainValue;

#[derive(Parser)]
#[command(name = "sde-metrology", version, about = "Single-photon detector efficiency metrology toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct SessionArg {
    /// Session directory (defaults to $SDE_METROLOGY_DATA_DIR).
    #[arg(long, env = "SDE_METROLOGY_DATA_DIR", value_name = "DIR")]
    session: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Run the virtual laboratory and write a full session bundle.
    Simulate {
        /// Scenario JSON; paper-scale defaults when omitted.
        #[arg(long, value_name = "FILE")]
        scenario: Option<PathBuf>,
        /// Overrides the scenario's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[arg(long, value_name = "NM")]
        wavelength_nm: Option<f64>,
        /// Working attenuator setting for the counts session.
        #[arg(long, default_value_t = 31.0)]
        att_db: f64,
        /// Monitor range during attenuator calibration.
        #[arg(long, default_value_t = -30, allow_hyphen_values = true)]
        range_dbm: i32,
        /// Stability series length in seconds.
        #[arg(long, default_value_t = 1800.0)]
        stability_s: f64,
        /// Counter gates per polarization grid point.
        #[arg(long, default_value_t = 2)]
        polscan_gates: usize,
    },
    /// Fit the monitor power meter nonlinearity from a session sweep.
    CalNonlin {
        #[command(flatten)]
        session: SessionArg,
        /// Output model path (default: <session>/outputs/nonlin_model.json).
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Compute the switch ratio and start a calibration bundle.
    CalSwitch {
        #[command(flatten)]
        session: SessionArg,
        /// Calibration bundle to create or update
        /// (default: <session>/outputs/calibration.json).
        #[arg(long, value_name = "FILE")]
        calib: Option<PathBuf>,
    },
    /// Calibrate the three attenuators into an existing bundle.
    CalAtten {
        #[command(flatten)]
        session: SessionArg,
        #[arg(long, value_name = "FILE")]
        calib: Option<PathBuf>,
    },
    /// Analyze an efficiency session into an SDE-vs-bias result.
    Sde {
        #[command(flatten)]
        session: SessionArg,
        #[arg(long, value_name = "FILE")]
        calib: Option<PathBuf>,
        /// Output directory (default: <session>/outputs).
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
        /// Dead-time model for the optional pile-up ceiling.
        #[arg(long, default_value = "paralyzable")]
        model: DeadTimeModel,
        /// When set, report the pile-up ceiling for this dead time.
        #[arg(long, value_name = "NS")]
        dead_time_ns: Option<f64>,
    },
    /// Analyze a polarization sweep into a sensitivity result.
    Polscan {
        #[command(flatten)]
        session: SessionArg,
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Allan deviation of a stability series.
    Allan {
        /// Stability CSV (timestamp_s, power_w).
        #[arg(long = "in", value_name = "FILE")]
        input: PathBuf,
        /// Averaging time in seconds; repeatable. Octave spacing when omitted.
        #[arg(long)]
        tau: Vec<f64>,
        /// Optional output CSV.
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Render the session summary (text to stdout, JSON next to outputs).
    Report {
        #[command(flatten)]
        session: SessionArg,
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn out_dir(session: &Path, out: &Option<PathBuf>) -> PathBuf {
    out.clone().unwrap_or_else(|| session.join(OUTPUT_DIR))
}

fn default_bundle_path(session: &Path, calib: &Option<PathBuf>) -> PathBuf {
    calib
        .clone()
        .unwrap_or_else(|| session.join(OUTPUT_DIR).join("calibration.json"))
}

fn run(cmd: Command) -> Result<(), Error> {
    match cmd {
        Command::Simulate {
            scenario,
            seed,
            out,
            wavelength_nm,
            att_db,
            range_dbm,
            stability_s,
            polscan_gates,
        } => {
            let mut sc = match scenario {
                Some(path) => {
                    let text = std::fs::read_to_string(&path)?;
                    SimScenario::from_json(&text).map_err(|e| {
                        Error::Session(session::SessionError::Json {
                            file: path.display().to_string(),
                            message: e.to_string(),
                        })
                    })?
                }
                None => SimScenario::paper_default(),
            };
            if let Some(nm) = wavelength_nm {
                sc.wavelength_nm = nm;
            }
            sc.validate().map_err(|m| {
                Error::Session(session::SessionError::Json {
                    file: "scenario".into(),
                    message: m,
                })
            })?;
            let seed = seed.unwrap_or(sc.seed);
            let cal_range = RangeSetting::try_from_dbm(range_dbm).map_err(Error::Nonlin)?;
            let opts = BundleOptions {
                bias: BiasGridSpec::default(),
                att_db,
                cal_range,
                polscan: PolGridSpec {
                    gates_per_point: polscan_gates,
                    att_db,
                    ..Default::default()
                },
                stability: StabilitySpec {
                    duration_s: stability_s,
                    sample_rate_hz: 4.118,
                },
            };
            let manifest = simulate_bundle(&sc, seed, &opts, &out)?;
            println!(
                "simulated session {} at {} nm into {}",
                manifest.session_id,
                manifest.wavelength_nm,
                out.display()
            );
            for w in &manifest.warnings {
                println!("warning: {w}");
            }
            Ok(())
        }

        Command::CalNonlin { session, out } => {
            let dir = &session.session;
            let manifest = SessionManifest::load(dir)?;
            let path = manifest.verified_path(dir, Role::Nonlin)?;
            let records = read_nonlin_csv(&path)?;
            let mut model = calibrate_nonlinearity(&records)?;
            model.source_digest = Some(file_digest(&path)?);
            let out_path = out.unwrap_or_else(|| dir.join(OUTPUT_DIR).join("nonlin_model.json"));
            session::save_nonlin_model(&out_path, &model)?;
            println!(
                "fitted nonlinearity at {} nm: tau = {:.6} +/- {:.2e}, reduced chi2 = {:.3}",
                model.wavelength_nm,
                model.tau().value(),
                model.tau().sigma(),
                model.reduced_chi2
            );
            println!("model written to {}", out_path.display());
            Ok(())
        }

        Command::CalSwitch { session, calib } => {
            let dir = &session.session;
            let manifest = SessionManifest::load(dir)?;
            let switch_path = manifest.verified_path(dir, Role::SwitchCal)?;
            let record = read_switch_csv(&switch_path)?;
            let cal = switching_ratio(&record)?;
            let cpm_path = manifest.verified_path(dir, Role::CpmCalibration)?;
            let cpm_bytes = std::fs::read(&cpm_path)?;
            let cpm_entries: Vec<session::CpmEntry> =
                serde_json::from_slice(&cpm_bytes).map_err(|e| {
                    Error::Session(session::SessionError::Json {
                        file: cpm_path.display().to_string(),
                        message: e.to_string(),
                    })
                })?;
            let bundle_path = default_bundle_path(dir, &calib);
            let model_path = dir.join(OUTPUT_DIR).join("nonlin_model.json");
            if !model_path.exists() {
                return Err(Error::Session(session::SessionError::MissingFile(format!(
                    "{} (run cal-nonlin first)",
                    model_path.display()
                ))));
            }
            let model_rel = "nonlin_model.json".to_string();
            let bundle = BundleFile {
                wavelength_nm: cal.wavelength_nm,
                nonlin_model: FileEntry {
                    path: model_rel,
                    sha256: file_digest(&model_path)?,
                },
                switch: SwitchCalibrationFile {
                    wavelength_nm: cal.wavelength_nm,
                    ratio: cal.ratio.clone(),
                    mpm_mean: cal.mpm_mean.clone(),
                    range_dbm: cal.range.dbm(),
                },
                cpm: cpm_entries,
                alphas: Vec::new(),
            };
            session::save_bundle(&bundle_path, &bundle)?;
            println!(
                "switch ratio {:.6} +/- {:.2e} (rel {:.3}%); bundle written to {}",
                cal.ratio.value(),
                cal.ratio.sigma(),
                cal.ratio.relative_sigma().unwrap_or(0.0) * 100.0,
                bundle_path.display()
            );
            Ok(())
        }

        Command::CalAtten { session, calib } => {
            let dir = &session.session;
            let manifest = SessionManifest::load(dir)?;
            let atten_path = manifest.verified_path(dir, Role::AttenCal)?;
            let records = session::read_atten_csv(&atten_path)?;
            let bundle_path = default_bundle_path(dir, &calib);
            let mut bundle_file = session::load_bundle_file(&bundle_path)?;
            let bundle = load_bundle(&bundle_path)?;
            let mut alphas = Vec::new();
            for rec in &records {
                let result =
                    sde_metrology::instrument::calibrate_attenuator(rec, &bundle.nonlin)?;
                println!(
                    "attenuator {} at {:.3} dB: alpha = {:.6e} +/- {:.2e} (rel {:.3}%)",
                    result.attenuator_id,
                    result.nominal_db,
                    result.alpha.value(),
                    result.alpha.sigma(),
                    result.alpha.relative_sigma().unwrap_or(0.0) * 100.0
                );
                alphas.push(AlphaEntry {
                    attenuator_id: result.attenuator_id,
                    nominal_db: result.nominal_db,
                    alpha: result.alpha,
                });
            }
            bundle_file.alphas = alphas;
            session::save_bundle(&bundle_path, &bundle_file)?;
            println!("bundle updated: {}", bundle_path.display());
            Ok(())
        }

        Command::Sde {
            session,
            calib,
            out,
            model,
            dead_time_ns,
        } => {
            let dir = &session.session;
            let data = load_sde_session(dir)?;
            let bundle_path = default_bundle_path(dir, &calib);
            let bundle = load_bundle(&bundle_path)?;
            let mut result = sde_curve(&data, &bundle)?;
            if let Some(ns) = dead_time_ns {
                if let Some(p) = result.plateau() {
                    let rate = p.net_rate_hz.value();
                    result.pileup_bound = Some(PileupBound {
                        model,
                        dead_time_s: ns * 1e-9,
                        rate_hz: rate,
                        max_sde: pileup_max_sde(rate, ns * 1e-9, model),
                    });
                }
            }
            let out = out_dir(dir, &out);
            session::write_sde_result(&out.join(SDE_RESULT_FILE), &result)?;
            session::write_sde_flat_csv(&out.join("sde_result.csv"), &result)?;
            if let Some(p) = result.plateau() {
                println!(
                    "plateau SDE (maxpol) = {:.5} +/- {:.5} at {:.2} uA (rel {:.3}%)",
                    p.sde.value(),
                    p.sde.sigma(),
                    p.bias_ua,
                    p.sde.relative_sigma().unwrap_or(0.0) * 100.0
                );
            }
            println!("result written to {}", out.join(SDE_RESULT_FILE).display());
            Ok(())
        }

        Command::Polscan { session, out } => {
            let dir = &session.session;
            let (grid, dark_gates) = load_polscan(dir)?;
            let manifest = SessionManifest::load(dir)?;
            let dark = if dark_gates.is_empty() {
                UncertainValue::exact(0.0)
            } else {
                rate_from_gates(&dark_gates)?
            };
            let corrected = transmission_correct(&grid, &dark)?;
            let ps = polarization_sensitivity(&corrected)?;
            let (max, min) = extremes(&corrected).expect("non-empty grid");
            let result = PsResult {
                wavelength_nm: manifest.wavelength_nm,
                ps: ps.clone(),
                max_qwp_deg: max.qwp_deg,
                max_hwp_deg: max.hwp_deg,
                min_qwp_deg: min.qwp_deg,
                min_hwp_deg: min.hwp_deg,
            };
            let out = out_dir(dir, &out);
            let path = out.join(PS_RESULT_FILE);
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent)?;
            }
            std::fs::write(
                &path,
                serde_json::to_string_pretty(&result).map_err(|e| {
                    Error::Session(session::SessionError::Json {
                        file: path.display().to_string(),
                        message: e.to_string(),
                    })
                })? + "\n",
            )?;
            println!(
                "polarization sensitivity = {:.4} +/- {:.4}; written to {}",
                ps.value(),
                ps.sigma(),
                path.display()
            );
            Ok(())
        }

        Command::Allan { input, tau, out } => {
            let series = session::read_stability_csv(&input)?;
            let taus = if tau.is_empty() {
                default_taus(&series)
            } else {
                tau
            };
            let points = allan_deviation(&series, &taus)?;
            println!("tau_s,samples_per_bin,adev");
            for p in &points {
                println!("{:.6},{},{:.6e}", p.tau_s, p.samples_per_bin, p.adev);
            }
            if let Some(path) = out {
                session::write_adev_csv(&path, &points)?;
                println!("written to {}", path.display());
            }
            Ok(())
        }

        Command::Report { session, out } => {
            let dir = &session.session;
            let (text, json) = render_report(dir)?;
            println!("{text}");
            let path = out.unwrap_or_else(|| dir.join(OUTPUT_DIR).join("report.json"));
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent)?;
            }
            std::fs::write(&path, serde_json::to_string_pretty(&json).unwrap() + "\n")?;
            println!("report JSON written to {}", path.display());
            Ok(())
        }
    }
}
