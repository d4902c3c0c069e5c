//! Deterministic writers for run artifacts.
//!
//! metrics.csv and final_distributions.json contain no timestamps and use
//! the standard shortest round-trip float formatting, so rerunning the same
//! config and seed reproduces them byte for byte. Only manifest.json
//! carries wall-clock information. CSV records end in CRLF and no field
//! ever needs quoting.
//!
//! Every artifact names the manifest it belongs to: CSV files carry the
//! manifest's config hash in a comment record under the schema row, and
//! JSON files carry it in a `manifest` field.

use std::fs;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;

use dvpo_core::trainer::{FinalDistributions, IterationMetrics, TrainConfig};

use crate::CliError;

/// Identifiers carried in the comment rows at the top of each CSV kind.
pub const METRICS_SCHEMA: &str = "dvpo-metrics-v1";
pub const SUMMARY_SCHEMA: &str = "dvpo-summary-v1";
pub const COMPARISON_SCHEMA: &str = "dvpo-comparison-v1";

pub const METRICS_COLUMNS: [&str; 20] = [
    "iteration",
    "true_return",
    "corrupted_return",
    "critic_total",
    "loss_qr",
    "loss_risk",
    "loss_cvar",
    "loss_gain",
    "loss_shift",
    "loss_shape",
    "loss_curv",
    "loss_consist",
    "clip_fraction",
    "entropy",
    "approx_kl",
    "probe_value_mean",
    "probe_across_lower_var",
    "probe_across_upper_var",
    "probe_dist_lower_var",
    "probe_dist_upper_var",
];

fn push_record(out: &mut String, fields: &[String]) {
    out.push_str(&fields.join(","));
    out.push_str("\r\n");
}

/// The two comment records opening every CSV artifact: the schema version
/// and the config hash of the manifest the file belongs to.
pub fn csv_preamble(schema: &str, manifest_hash: &str) -> String {
    let mut out = String::new();
    push_record(&mut out, &[format!("# schema: {schema}")]);
    push_record(&mut out, &[format!("# manifest: {manifest_hash}")]);
    out
}

pub fn metrics_csv(metrics: &[IterationMetrics], manifest_hash: &str) -> String {
    let mut out = csv_preamble(METRICS_SCHEMA, manifest_hash);
    push_record(
        &mut out,
        &METRICS_COLUMNS.map(str::to_string),
    );
    for m in metrics {
        let c = &m.critic;
        let p = &m.probe;
        let fields = [
            m.iteration.to_string(),
            m.true_return.to_string(),
            m.corrupted_return.to_string(),
            c.total.to_string(),
            c.qr.to_string(),
            c.risk.to_string(),
            c.cvar.to_string(),
            c.gain.to_string(),
            c.shift.to_string(),
            c.shape.to_string(),
            c.curv.to_string(),
            c.consist.to_string(),
            m.clip_fraction.to_string(),
            m.entropy.to_string(),
            m.approx_kl.to_string(),
            p.value_mean.to_string(),
            p.across_lower_var.to_string(),
            p.across_upper_var.to_string(),
            p.dist_lower_var.to_string(),
            p.dist_upper_var.to_string(),
        ];
        push_record(&mut out, &fields);
    }
    out
}

pub fn write_metrics(
    dir: &Path,
    metrics: &[IterationMetrics],
    manifest_hash: &str,
) -> Result<(), CliError> {
    write_file(&dir.join("metrics.csv"), &metrics_csv(metrics, manifest_hash))
}

/// final_distributions.json payload: the manifest's config hash plus the
/// distribution snapshot fields inlined at the top level.
#[derive(Serialize)]
struct DistributionsFile<'a> {
    manifest: &'a str,
    #[serde(flatten)]
    snapshot: &'a FinalDistributions,
}

pub fn write_distributions(
    dir: &Path,
    dists: &FinalDistributions,
    manifest_hash: &str,
) -> Result<(), CliError> {
    let file = DistributionsFile { manifest: manifest_hash, snapshot: dists };
    let json = serde_json::to_string_pretty(&file)
        .map_err(|e| CliError::Other(format!("distributions serialization: {e}")))?;
    write_file(&dir.join("final_distributions.json"), &(json + "\n"))
}

/// Diagnostic snapshot left behind when a run aborts on divergence.
#[derive(Debug, Serialize)]
pub struct DivergenceSnapshot {
    /// Config hash of the manifest this run belongs to.
    pub manifest: String,
    pub seed: u64,
    pub algorithm: String,
    pub iteration: Option<usize>,
    pub loss: Option<f64>,
    pub message: String,
}

pub fn write_divergence(dir: &Path, snap: &DivergenceSnapshot) -> Result<(), CliError> {
    let json = serde_json::to_string_pretty(snap)
        .map_err(|e| CliError::Other(format!("snapshot serialization: {e}")))?;
    write_file(&dir.join("divergence.json"), &(json + "\n"))
}

/// Outcome of one child training run, as recorded in the manifest.
#[derive(Debug, Clone, Serialize)]
pub struct RunRecord {
    pub seed: u64,
    pub algorithm: String,
    /// Swept parameter value, for sweep children.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub value: Option<String>,
    pub status: String,
    pub final_true_return: Option<f64>,
    pub output_dir: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Serialize)]
pub struct Manifest<'a> {
    pub command: &'a str,
    /// Root output directory as given on the command line.
    pub output_dir: String,
    pub started_unix: u64,
    pub created_unix: u64,
    /// Hash of the config snapshot below; the value every child artifact
    /// carries in its own manifest reference.
    pub config_hash: String,
    pub config: &'a TrainConfig,
    pub seeds: &'a [u64],
    pub results: &'a [RunRecord],
}

pub fn write_manifest(dir: &Path, manifest: &Manifest<'_>) -> Result<(), CliError> {
    let json = serde_json::to_string_pretty(manifest)
        .map_err(|e| CliError::Other(format!("manifest serialization: {e}")))?;
    write_file(&dir.join("manifest.json"), &(json + "\n"))
}

pub fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

pub fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir)
        .map_err(|e| CliError::Other(format!("cannot create {}: {e}", dir.display())))
}

pub fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents)
        .map_err(|e| CliError::Other(format!("cannot write {}: {e}", path.display())))
}
