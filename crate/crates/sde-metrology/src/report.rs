//! Session summary rendering: an efficiency table, the error-budget
//! breakdown, polarization sensitivity, and source stability, as text and
//! as JSON.

use std::path::Path;

use serde_json::json;

use crate::polarization::PsResult;
use crate::sde::{CountPhase, SdeResult};
use crate::session::{SessionError, SessionManifest, OUTPUT_DIR};

pub const SDE_RESULT_FILE: &str = "sde_result.json";
pub const PS_RESULT_FILE: &str = "ps.json";
pub const ADEV_FILE: &str = "adev.csv";

/// Renders the report for a session directory from whatever analysis
/// outputs are present under `outputs/`. At least one output must exist.
/// The returned JSON carries all numbers; the single timestamp lives in
/// the `generated_at_unix_s` field.
pub fn render_report(dir: &Path) -> Result<(String, serde_json::Value), SessionError> {
    let out_dir = dir.join(OUTPUT_DIR);
    let manifest = SessionManifest::load(dir).ok();

    let sde: Option<SdeResult> = read_json_opt(&out_dir.join(SDE_RESULT_FILE))?;
    let ps: Option<PsResult> = read_json_opt(&out_dir.join(PS_RESULT_FILE))?;
    let adev = read_adev_opt(&out_dir.join(ADEV_FILE))?;

    if sde.is_none() && ps.is_none() && adev.is_none() {
        return Err(SessionError::MissingFile(format!(
            "no analysis outputs under {}; run sde/polscan/allan first",
            out_dir.display()
        )));
    }

    let mut text = String::new();
    let mut j = serde_json::Map::new();

    if let Some(m) = &manifest {
        text.push_str(&format!(
            "session {}  ({} nm)\n",
            m.session_id, m.wavelength_nm
        ));
        if !m.warnings.is_empty() {
            text.push_str("warnings:\n");
            for w in &m.warnings {
                text.push_str(&format!("  - {w}\n"));
            }
        }
        j.insert("session_id".into(), json!(m.session_id));
        j.insert("wavelength_nm".into(), json!(m.wavelength_nm));
        j.insert("warnings".into(), json!(m.warnings));
    }

    if let Some(sde) = &sde {
        text.push_str("\nSDE vs bias current:\n");
        text.push_str("  phase    bias_uA      SDE          sigma\n");
        for p in &sde.points {
            text.push_str(&format!(
                "  {:<7}  {:>7.3}  {:>10.6}  {:>10.6}\n",
                p.phase.to_string(),
                p.bias_ua,
                p.sde.value(),
                p.sde.sigma()
            ));
        }
        if let Some(p) = sde.plateau() {
            let rel = p.sde.relative_sigma().unwrap_or(0.0);
            text.push_str(&format!(
                "plateau SDE (maxpol): {:.5} +/- {:.5}  (rel {:.3}%)\n",
                p.sde.value(),
                p.sde.sigma(),
                rel * 100.0
            ));
        }
        text.push_str("\nError budget (k=1 relative):\n");
        for row in &sde.budget {
            text.push_str(&format!(
                "  {:<48} {:>8.4}%\n",
                row.source,
                row.relative_sigma * 100.0
            ));
        }
        if let Some(b) = &sde.pileup_bound {
            text.push_str(&format!(
                "pile-up ceiling ({}, {:.0} ns dead time, {:.3e}/s): max SDE {:.4}\n",
                b.model,
                b.dead_time_s * 1e9,
                b.rate_hz,
                b.max_sde
            ));
        }
        j.insert(
            "sde".into(),
            serde_json::to_value(sde).map_err(|e| SessionError::Json {
                file: SDE_RESULT_FILE.into(),
                message: e.to_string(),
            })?,
        );
        let min_max: Vec<(CountPhase, f64)> = sde
            .points
            .iter()
            .map(|p| (p.phase, p.sde.value()))
            .collect();
        let _ = min_max;
    }

    if let Some(ps) = &ps {
        text.push_str(&format!(
            "\nPolarization sensitivity: {:.4} +/- {:.4}  (max at qwp {:.1} hwp {:.1}, min at qwp {:.1} hwp {:.1})\n",
            ps.ps.value(),
            ps.ps.sigma(),
            ps.max_qwp_deg,
            ps.max_hwp_deg,
            ps.min_qwp_deg,
            ps.min_hwp_deg
        ));
        j.insert(
            "polarization_sensitivity".into(),
            serde_json::to_value(ps).map_err(|e| SessionError::Json {
                file: PS_RESULT_FILE.into(),
                message: e.to_string(),
            })?,
        );
    }

    if let Some(points) = &adev {
        let ten = points
            .iter()
            .min_by(|a, b| {
                (a.0 - 10.0)
                    .abs()
                    .partial_cmp(&(b.0 - 10.0).abs())
                    .unwrap()
            })
            .copied();
        if let Some((tau, dev)) = ten {
            text.push_str(&format!(
                "\nSource stability: ADEV({tau:.2} s) = {dev:.3e}\n"
            ));
        }
        j.insert(
            "allan_deviation".into(),
            json!(points
                .iter()
                .map(|(t, d)| json!({"tau_s": t, "adev": d}))
                .collect::<Vec<_>>()),
        );
    }

    let now = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    j.insert("generated_at_unix_s".into(), json!(now));

    Ok((text, serde_json::Value::Object(j)))
}

fn read_json_opt<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Option<T>, SessionError> {
    if !path.exists() {
        return Ok(None);
    }
    let bytes = std::fs::read(path).map_err(|e| SessionError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    serde_json::from_slice(&bytes)
        .map(Some)
        .map_err(|e| SessionError::Json {
            file: path.display().to_string(),
            message: e.to_string(),
        })
}

fn read_adev_opt(path: &Path) -> Result<Option<Vec<(f64, f64)>>, SessionError> {
    if !path.exists() {
        return Ok(None);
    }
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| SessionError::Json {
            file: path.display().to_string(),
            message: e.to_string(),
        })?;
    let headers = rdr
        .headers()
        .map_err(|e| SessionError::Json {
            file: path.display().to_string(),
            message: e.to_string(),
        })?
        .clone();
    let tau_idx = headers.iter().position(|h| h == "tau_s").unwrap_or(0);
    let adev_idx = headers
        .iter()
        .position(|h| h == "adev")
        .unwrap_or(headers.len().saturating_sub(1));
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| SessionError::Json {
            file: path.display().to_string(),
            message: e.to_string(),
        })?;
        let tau: f64 = row.get(tau_idx).unwrap_or("0").trim().parse().unwrap_or(0.0);
        let adev: f64 = row
            .get(adev_idx)
            .unwrap_or("0")
            .trim()
            .parse()
            .unwrap_or(0.0);
        out.push((tau, adev));
    }
    Ok(Some(out))
}
