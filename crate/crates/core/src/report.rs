//! Report records and the CSV sidecar formats. All files carry a schema
//! version; CSV values are in base units (ps, counts).

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detection::ClickRecord;
use crate::electronics::{CountsSummary, Histogram};
use crate::error::{Error, Result};
use crate::estimators::{CorrectionFactors, EfficiencyEstimate, LsaFit, VisibilityScan};
use crate::scenario::MethodConfig;
use crate::timebase::TimeStamp;

pub const CSV_SCHEMA_LINE: &str = "# schema_version=1";

/// Detail block for conditional-rotation runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionalDetail {
    pub fit: LsaFit,
    /// Combined electrical live fraction applied to the visibility.
    pub pockels_live_fraction: f64,
    /// Raw trigger-detector rate during the scan, per second.
    pub trigger_rate: f64,
    /// Accepted Pockels trigger rate, per second.
    pub accepted_trigger_rate: f64,
}

/// Detail block for two-method comparison runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonDetail {
    /// conditional minus coincidence estimate.
    pub difference: f64,
    pub combined_sigma: f64,
    /// Fitted phase of the with-rotation coincidence curve.
    pub phase_with_deg: f64,
    pub phase_without_deg: f64,
    /// Circular separation of the two fitted phases (180 degree period).
    pub phase_separation_deg: f64,
    /// Pockels rotation efficiency inferred from the with-rotation
    /// coincidence extremes; diagnostic only.
    pub flip_efficiency_estimate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalogDetail {
    pub k_used: f64,
    /// Mean detected pairs per bin on the reference arm; the estimator is
    /// valid only when this is small.
    pub pair_rate_bin_product: f64,
}

/// One complete run: estimates plus everything needed to audit them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialReport {
    pub schema_version: u32,
    pub method: MethodConfig,
    pub seed: u64,
    pub gate_s: f64,
    /// Echoed from the config for validation runs; never an estimator input.
    pub ground_truth_eta: f64,
    pub estimates: Vec<EfficiencyEstimate>,
    /// Uncorrected ratio N_coincidence / N_trigger.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_eta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub counts: Option<CountsSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corrections: Option<CorrectionFactors>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conditional: Option<ConditionalDetail>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub comparison: Option<ComparisonDetail>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub analog: Option<AnalogDetail>,
    /// Sidecar files written next to the report.
    #[serde(default)]
    pub files: Vec<String>,
}

impl TrialReport {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)
            .map_err(|e| Error::invalid(format!("report serialize: {e}")))?;
        s.push('\n');
        Ok(s)
    }

    /// The estimate a multi-trial aggregation tracks for each method.
    pub fn primary_estimates(&self) -> &[EfficiencyEstimate] {
        &self.estimates
    }
}

/// Fig.-7-style coincidence curves: with and without the conditioned
/// rotation, per polarizer angle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fig7Curves {
    pub angles_deg: Vec<f64>,
    pub with_rotation: Vec<u64>,
    pub without_rotation: Vec<u64>,
}

/// Everything a run produced beyond the report record.
#[derive(Debug, Clone, Default)]
pub struct Artifacts {
    pub histogram: Option<Histogram>,
    pub tic_histograms: Vec<Histogram>,
    pub scan: Option<VisibilityScan>,
    pub background_scan: Option<VisibilityScan>,
    pub fig7: Option<Fig7Curves>,
    /// Main-acquisition click streams by detector name (single-gate methods
    /// only; scans would produce one stream per angle).
    pub clicks: Vec<(String, Vec<ClickRecord>)>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: TrialReport,
    pub artifacts: Artifacts,
}

pub fn histogram_to_csv(hist: &Histogram) -> String {
    let mut out = String::with_capacity(hist.counts.len() * 16 + 64);
    out.push_str(CSV_SCHEMA_LINE);
    out.push_str("\nbin_start_ps,count\n");
    for (i, &c) in hist.counts.iter().enumerate() {
        out.push_str(&format!("{},{}\n", hist.bin_start_ps(i), c));
    }
    out
}

pub fn clicks_to_csv(streams: &[(String, Vec<ClickRecord>)]) -> String {
    let mut out = String::new();
    out.push_str(CSV_SCHEMA_LINE);
    out.push_str("\ndetector_id,t_ps\n");
    for (name, clicks) in streams {
        for c in clicks {
            out.push_str(&format!("{},{}\n", name, c.t.as_ps()));
        }
    }
    out
}

/// Parses a click-stream CSV (as written by [`clicks_to_csv`] or an
/// external time tagger) into per-detector sorted timestamp lists.
pub fn clicks_from_csv(text: &str) -> Result<BTreeMap<String, Vec<TimeStamp>>> {
    let mut map: BTreeMap<String, Vec<TimeStamp>> = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with("detector_id") {
            continue;
        }
        let (name, t) = line
            .split_once(',')
            .ok_or_else(|| Error::invalid(format!("clicks csv line {}: no comma", lineno + 1)))?;
        let ticks: i64 = t
            .trim()
            .parse()
            .map_err(|e| Error::invalid(format!("clicks csv line {}: {e}", lineno + 1)))?;
        map.entry(name.trim().to_string())
            .or_default()
            .push(TimeStamp(ticks));
    }
    for stream in map.values_mut() {
        stream.sort();
    }
    Ok(map)
}

pub fn scan_to_csv(scan: &VisibilityScan, background: Option<&VisibilityScan>) -> String {
    let mut out = String::new();
    out.push_str(CSV_SCHEMA_LINE);
    out.push_str("\nangle_deg,counts,background_counts\n");
    for (i, (&a, &c)) in scan.angles_deg.iter().zip(&scan.counts).enumerate() {
        match background {
            Some(bg) => out.push_str(&format!("{},{},{}\n", a, c, bg.counts[i])),
            None => out.push_str(&format!("{},{},\n", a, c)),
        }
    }
    out
}

pub fn fig7_to_csv(curves: &Fig7Curves) -> String {
    let mut out = String::new();
    out.push_str(CSV_SCHEMA_LINE);
    out.push_str("\nangle_deg,coincidences_with_rotation,coincidences_without_rotation\n");
    for i in 0..curves.angles_deg.len() {
        out.push_str(&format!(
            "{},{},{}\n",
            curves.angles_deg[i], curves.with_rotation[i], curves.without_rotation[i]
        ));
    }
    out
}

/// Writes the report JSON and every artifact CSV into `dir`, fills in
/// `report.files`, and returns the list of files written.
pub fn write_run_output(out: &mut RunOutput, dir: &Path, prefix: &str) -> Result<Vec<String>> {
    std::fs::create_dir_all(dir)?;
    let mut files = Vec::new();
    let mut write = |name: String, contents: String| -> Result<()> {
        let path = dir.join(&name);
        let mut f = std::fs::File::create(&path)?;
        f.write_all(contents.as_bytes())?;
        files.push(name);
        Ok(())
    };

    if let Some(h) = &out.artifacts.histogram {
        write(format!("{prefix}_histogram.csv"), histogram_to_csv(h))?;
    }
    for (i, h) in out.artifacts.tic_histograms.iter().enumerate() {
        write(format!("{prefix}_tic_subsample_{i}.csv"), histogram_to_csv(h))?;
    }
    if let Some(scan) = &out.artifacts.scan {
        write(
            format!("{prefix}_scan.csv"),
            scan_to_csv(scan, out.artifacts.background_scan.as_ref()),
        )?;
    }
    if let Some(fig7) = &out.artifacts.fig7 {
        write(format!("{prefix}_coincidence_curves.csv"), fig7_to_csv(fig7))?;
    }
    if !out.artifacts.clicks.is_empty() {
        write(
            format!("{prefix}_clicks.csv"),
            clicks_to_csv(&out.artifacts.clicks),
        )?;
    }

    out.report.files = files.clone();
    let report_name = format!("{prefix}_report.json");
    let path = dir.join(&report_name);
    std::fs::write(&path, out.report.to_json()?)?;
    files.push(report_name);
    Ok(files)
}
