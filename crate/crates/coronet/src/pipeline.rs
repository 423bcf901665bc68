//! The command pipeline: phantom → simulate → reconstruct → evaluate, plus
//! ASO comparison and aggregation of per-case metric tables.
//!
//! Every file location derives from the configuration's `output_dir`, so
//! the stages chain without manual wiring:
//!
//! ```text
//! <out>/phantom/phantom.raw            binary ground truth
//! <out>/projections/<views>/viewN.*    simulated inputs
//! <out>/<run-id>/                      one reconstruction
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use coronet_core::aso::{aso_test, AsoConfig};
use coronet_core::geometry::{BinaryVolume, ProjectionGeometry};
use coronet_core::metrics::{evaluate as evaluate_metrics, MetricsReport, Reference, SKELETON_METHOD};
use coronet_core::phantom::generate_phantom;
use coronet_core::projector::{forward_project, ProjectionImage};
use coronet_core::trainer::{binarize, Reconstructor, TrainRecord};
use coronet_core::field::EncoderConfig;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::checkpoint::{load_snapshot, save_hash_tables, save_mlp_weights, save_snapshot};
use crate::config::{EncoderKind, RunConfig, ViewSet};
use crate::error::{CliError, Result};
use crate::import::import_volume;
use crate::projection_io::{load_projections, save_projections};
use crate::volume_io::{save_volume, write_file, Volume};

pub const VOLUME_FINAL: &str = "volume_final.raw";
pub const METRICS_CSV: &str = "metrics.csv";
pub const LOSS_CSV: &str = "loss.csv";
pub const MANIFEST: &str = "manifest.json";
pub const EVALUATION_CSV: &str = "evaluation.csv";
pub const SNAPSHOT: &str = "snapshot.snap";

pub fn phantom_path(cfg: &RunConfig) -> PathBuf {
    cfg.output_dir.join("phantom").join("phantom.raw")
}

pub fn projections_dir(cfg: &RunConfig, views: ViewSet) -> PathBuf {
    cfg.output_dir.join("projections").join(views.name())
}

pub fn default_run_id(cfg: &RunConfig, views: ViewSet) -> String {
    format!("{}-{}-seed{}", cfg.encoder.kind.name(), views.name(), cfg.seed)
}

pub fn run_dir(cfg: &RunConfig, run_id: &str) -> PathBuf {
    cfg.output_dir.join(run_id)
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Generate the configured phantom and write it to `out` or the default path.
pub fn run_phantom(cfg: &RunConfig, out: Option<&Path>) -> Result<PathBuf> {
    let spec = cfg.phantom_spec()?;
    let vol = generate_phantom(&spec).map_err(|e| CliError::Config(format!("phantom: {e}")))?;
    let path = out.map(Path::to_path_buf).unwrap_or_else(|| phantom_path(cfg));
    save_volume(&path, &Volume::Binary(vol))?;
    log::info!("phantom written to {}", path.display());
    Ok(path)
}

/// Project `volume` (or the default phantom) into the selected view pair.
pub fn run_simulate(cfg: &RunConfig, views: ViewSet, volume: Option<&Path>, out: Option<&Path>) -> Result<PathBuf> {
    let src = volume.map(Path::to_path_buf).unwrap_or_else(|| phantom_path(cfg));
    let vol = import_volume(&src)?.to_f32();
    let geoms = cfg.geometries(views);
    for note in cfg.range_notes(views) {
        log::warn!("{note}");
    }
    let images = simulate_inputs(&vol, &geoms, cfg)?;
    let dir = out.map(Path::to_path_buf).unwrap_or_else(|| projections_dir(cfg, views));
    save_projections(&dir, &images, cfg.projector.noise_std)?;
    log::info!("{} projections written to {}", images.len(), dir.display());
    Ok(dir)
}

/// Noise-free line integrals, plus optional additive Gaussian noise.
pub fn simulate_inputs(
    vol: &coronet_core::geometry::VolumeGrid<f32>,
    geoms: &[ProjectionGeometry],
    cfg: &RunConfig,
) -> Result<Vec<ProjectionImage<f32>>> {
    let mut images = forward_project(vol, geoms, &cfg.projector_config(), &cfg.exec_config())?;
    if cfg.projector.noise_std > 0.0 {
        let normal = Normal::new(0.0, cfg.projector.noise_std).map_err(|e| CliError::Config(format!("projector.noise_std: {e}")))?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        for img in &mut images {
            for v in &mut img.data {
                *v += normal.sample(&mut rng) as f32;
            }
        }
    }
    Ok(images)
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub run_id: String,
    pub status: String,
    pub config_hash: String,
    pub seed: u64,
    pub encoder: String,
    pub views: String,
    pub deterministic: bool,
    pub threads: usize,
    pub precision: String,
    pub iterations_completed: usize,
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
    pub cached_operator: bool,
    pub skeleton_method: String,
    pub versions: BTreeMap<String, String>,
    pub inputs: BTreeMap<String, String>,
    pub reference: Option<String>,
    pub resumed_from: Option<String>,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub records: Vec<TrainRecord>,
    pub final_reports: Vec<MetricsReport>,
}

pub struct ReconstructOptions<'a> {
    pub views: ViewSet,
    pub run_id: Option<String>,
    /// Projection directory; the configured default when absent.
    pub inputs: Option<&'a Path>,
    /// Ground truth for metric logging; the default phantom if it exists.
    pub reference: Option<&'a Path>,
    pub resume: Option<&'a Path>,
    pub threads: usize,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

fn metrics_header() -> String {
    let mut h = String::from("iteration,loss");
    for name in MetricsReport::CSV_HEADER {
        h.push(',');
        h.push_str(name);
    }
    h.push('\n');
    h
}

fn metrics_row(iteration: usize, loss: f64, m: Option<&MetricsReport>) -> String {
    let mut row = format!("{iteration},{loss}");
    match m {
        Some(m) => m.values().iter().for_each(|v| {
            row.push(',');
            row.push_str(&fmt_opt(*v));
        }),
        None => row.push_str(&",".repeat(MetricsReport::CSV_HEADER.len())),
    }
    row.push('\n');
    row
}

/// Fit the field to the projections of one view pair and write the run
/// directory. A non-finite loss stops the run, keeps the last good
/// parameters in the snapshot, and returns [`CliError::NonFinite`].
pub fn run_reconstruct(cfg: &RunConfig, opts: &ReconstructOptions<'_>) -> Result<RunSummary> {
    let views = opts.views;
    let inputs_dir = opts.inputs.map(Path::to_path_buf).unwrap_or_else(|| projections_dir(cfg, views));
    let images = load_projections(&inputs_dir)?;
    let expected = cfg.geometries(views);
    if images.iter().map(|i| i.geometry).ne(expected.iter().copied()) {
        log::warn!("projection geometries in {} differ from the configuration; using the files", inputs_dir.display());
    }
    let reference_path = match opts.reference {
        Some(p) => Some(p.to_path_buf()),
        None => Some(phantom_path(cfg)).filter(|p| p.exists()),
    };
    let reference = match &reference_path {
        Some(p) => Some(import_volume(p)?.to_mask(0.5)),
        None => None,
    };
    let grid = cfg.grid()?;
    let field_cfg = cfg.field_config();
    let train_cfg = cfg.train_config();
    let exec = cfg.exec_config();
    let mut rec = Reconstructor::<f32>::new(field_cfg, grid, &images, &cfg.projector_config(), train_cfg.clone(), exec)?;
    if let Some(r) = &reference {
        rec = rec.with_reference(r.clone())?;
    }
    if let Some(snap) = opts.resume {
        rec.restore(load_snapshot(snap)?)?;
        log::info!("resumed from {} at iteration {}", snap.display(), rec.iteration());
    }

    let run_id = opts.run_id.clone().unwrap_or_else(|| default_run_id(cfg, views));
    let dir = run_dir(cfg, &run_id);
    std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    write_file(&dir.join("config.json"), cfg.to_json().as_bytes())?;

    let mut loss_csv = String::from("iteration,loss\n");
    let mut metrics_csv = metrics_header();
    let mut records = Vec::with_capacity(train_cfg.iterations);
    let mut failure = None;
    while rec.iteration() < train_cfg.iterations {
        match rec.step() {
            Ok(r) => {
                let _ = writeln!(loss_csv, "{},{}", r.iteration, r.loss);
                if r.iteration % train_cfg.log_every == 0 {
                    metrics_csv.push_str(&metrics_row(r.iteration, r.loss, r.metrics.as_ref()));
                    match &r.metrics {
                        Some(m) => log::info!("iteration {} loss {:.6e} dice {:.4}", r.iteration, r.loss, m.dice),
                        None => log::info!("iteration {} loss {:.6e}", r.iteration, r.loss),
                    }
                }
                records.push(r);
                if cfg.trainer.checkpoint_every > 0 && rec.iteration() % cfg.trainer.checkpoint_every == 0 {
                    save_snapshot(&dir.join(format!("snapshot_{:06}.snap", rec.iteration())), rec.state())?;
                }
            }
            Err(coronet_core::Error::NonFinite(m)) => {
                failure = Some(m);
                break;
            }
            Err(e) => return Err(e.into()),
        }
    }
    write_file(&dir.join(LOSS_CSV), loss_csv.as_bytes())?;
    write_file(&dir.join(METRICS_CSV), metrics_csv.as_bytes())?;
    save_snapshot(&dir.join(SNAPSHOT), rec.state())?;
    if let EncoderConfig::Hash(h) = field_cfg.encoder {
        save_hash_tables(&dir.join("theta.hgrd"), &h, &rec.params().theta)?;
    }
    save_mlp_weights(&dir.join("phi.mlpw"), &field_cfg.mlp.layer_shapes(), &rec.params().phi)?;

    let volume = rec.render()?;
    save_volume(&dir.join(VOLUME_FINAL), &Volume::Continuous(volume.clone()))?;
    for &t in &train_cfg.binarize_thresholds {
        save_volume(&dir.join(format!("volume_final_bin{t:.2}.raw")), &Volume::Binary(binarize(&volume, t)?))?;
    }
    let mut final_reports = Vec::new();
    if let Some(r) = &reference {
        final_reports = evaluate_all(&volume, r, &train_cfg.binarize_thresholds)?;
        write_evaluation(&dir.join(EVALUATION_CSV), &run_id, &final_reports)?;
    }

    let mut inputs = BTreeMap::new();
    for i in 0..images.len() {
        let p = inputs_dir.join(format!("view{i}.f32"));
        inputs.insert(p.display().to_string(), sha256_hex(&std::fs::read(&p).map_err(|e| CliError::io(&p, e))?));
    }
    let manifest = Manifest {
        run_id,
        status: if failure.is_some() { "non_finite".into() } else { "ok".into() },
        config_hash: cfg.hash(),
        seed: cfg.seed,
        encoder: cfg.encoder.kind.name().into(),
        views: views.name().into(),
        deterministic: cfg.deterministic,
        threads: opts.threads,
        precision: "f32".into(),
        iterations_completed: rec.iteration(),
        initial_loss: records.first().map(|r| r.loss),
        final_loss: records.last().map(|r| r.loss),
        cached_operator: rec.operator().is_cached(),
        skeleton_method: SKELETON_METHOD.into(),
        versions: BTreeMap::from([
            ("coronet".to_string(), env!("CARGO_PKG_VERSION").to_string()),
            ("coronet-core".to_string(), coronet_core::VERSION.to_string()),
        ]),
        inputs,
        reference: reference_path.map(|p| p.display().to_string()),
        resumed_from: opts.resume.map(|p| p.display().to_string()),
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_file(&dir.join(MANIFEST), text.as_bytes())?;
    if let Some(m) = failure {
        return Err(CliError::NonFinite(format!("{m}; last good parameters saved to {}", dir.join(SNAPSHOT).display())));
    }
    Ok(RunSummary { dir, records, final_reports })
}

pub fn evaluate_all(volume: &coronet_core::geometry::VolumeGrid<f32>, truth: &BinaryVolume, thresholds: &[f64]) -> Result<Vec<MetricsReport>> {
    let reference = Reference::new(truth.clone());
    thresholds.iter().map(|&t| Ok(evaluate_metrics(volume, &reference, t)?)).collect()
}

pub fn write_evaluation(path: &Path, case: &str, reports: &[MetricsReport]) -> Result<()> {
    let mut text = String::from("case");
    for name in MetricsReport::CSV_HEADER {
        text.push(',');
        text.push_str(name);
    }
    text.push('\n');
    for r in reports {
        text.push_str(case);
        for v in r.values() {
            text.push(',');
            text.push_str(&fmt_opt(v));
        }
        text.push('\n');
    }
    write_file(path, text.as_bytes())
}

/// Score a reconstructed volume against a reference at each threshold.
pub fn run_evaluate(volume: &Path, reference: &Path, thresholds: &[f64], case: &str, out: &Path) -> Result<Vec<MetricsReport>> {
    let vol = import_volume(volume)?.to_f32();
    let truth = import_volume(reference)?.to_mask(0.5);
    let reports = evaluate_all(&vol, &truth, thresholds)?;
    write_evaluation(out, case, &reports)?;
    Ok(reports)
}

/// One per-case metric table: rows of (case, threshold, metrics...).
#[derive(Debug, Clone, Default)]
pub struct MetricTable {
    pub columns: Vec<String>,
    /// (case, column -> value) rows.
    pub rows: Vec<(String, BTreeMap<String, Option<f64>>)>,
}

pub fn read_metric_tables(paths: &[PathBuf]) -> Result<MetricTable> {
    let mut table = MetricTable::default();
    for path in paths {
        let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
        let headers: Vec<String> = rdr.headers().map_err(|e| csv_err(path, e))?.iter().map(str::to_string).collect();
        if headers.first().map(String::as_str) != Some("case") || !headers.iter().any(|h| h == "threshold") {
            return Err(CliError::format(path, "header", "expected columns `case`, `threshold`, metrics..."));
        }
        if table.columns.is_empty() {
            table.columns = headers[1..].to_vec();
        }
        for rec in rdr.records() {
            let rec = rec.map_err(|e| csv_err(path, e))?;
            let mut row = BTreeMap::new();
            for (h, v) in headers.iter().zip(rec.iter()).skip(1) {
                let val = if v.is_empty() {
                    None
                } else {
                    Some(v.parse::<f64>().map_err(|_| CliError::format(path, h.clone(), format!("not a number: {v:?}")))?)
                };
                row.insert(h.clone(), val);
            }
            table.rows.push((rec.get(0).unwrap_or("").to_string(), row));
        }
    }
    Ok(table)
}

fn csv_err(path: &Path, e: csv::Error) -> CliError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => CliError::io(path, io),
        other => CliError::format(path, "csv", format!("{other:?}")),
    }
}

fn threshold_key(t: f64) -> String {
    format!("{t:.4}")
}

/// Mean and sample std per metric per threshold, one row
/// per threshold: `threshold,n,<metric>_mean,<metric>_std,...`.
pub fn aggregate(table: &MetricTable) -> String {
    let metrics: Vec<&String> = table.columns.iter().filter(|c| *c != "threshold").collect();
    let mut by_t: BTreeMap<String, Vec<&BTreeMap<String, Option<f64>>>> = BTreeMap::new();
    for (_, row) in &table.rows {
        if let Some(Some(t)) = row.get("threshold") {
            by_t.entry(threshold_key(*t)).or_default().push(row);
        }
    }
    let mut out = String::from("threshold,n");
    for m in &metrics {
        let _ = write!(out, ",{m}_mean,{m}_std");
    }
    out.push('\n');
    for (t, rows) in by_t {
        let _ = write!(out, "{t},{}", rows.len());
        for m in &metrics {
            let vals: Vec<f64> = rows.iter().filter_map(|r| r.get(*m).copied().flatten()).collect();
            let (mean, std) = mean_std(&vals);
            let _ = write!(out, ",{},{}", fmt_opt(mean), fmt_opt(std));
        }
        out.push('\n');
    }
    out
}

/// Mean and sample standard deviation (n - 1); std is 0 for one value.
pub fn mean_std(v: &[f64]) -> (Option<f64>, Option<f64>) {
    if v.is_empty() {
        return (None, None);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 { v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (Some(mean), Some(var.sqrt()))
}

pub fn run_aggregate(inputs: &[PathBuf], out: &Path) -> Result<String> {
    let text = aggregate(&read_metric_tables(inputs)?);
    write_file(out, text.as_bytes())?;
    Ok(text)
}

/// Metrics where larger is better; the rest are errors.
pub fn higher_is_better(metric: &str) -> bool {
    matches!(metric, "clDice" | "Dice" | "IoU")
}

#[derive(Debug, Clone, Serialize)]
pub struct AsoEntry {
    pub epsilon_min: Option<f64>,
    pub epsilon: Option<f64>,
    pub dominant: Option<bool>,
    pub higher_is_better: bool,
    pub n_a: usize,
    pub n_b: usize,
    pub note: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AsoSummary {
    pub threshold: f64,
    pub alpha: f64,
    pub tau: f64,
    pub n_bootstrap: usize,
    pub seed: u64,
    pub metrics: BTreeMap<String, AsoEntry>,
}

/// Does model A stochastically dominate model B on each metric?
///
/// Error metrics are negated before testing so that "dominant" always
/// means "A is better".
pub fn compare(a: &MetricTable, b: &MetricTable, threshold: f64, cfg: &AsoConfig) -> Result<AsoSummary> {
    let key = threshold_key(threshold);
    let pick = |t: &MetricTable, m: &str| -> Vec<f64> {
        t.rows
            .iter()
            .filter(|(_, r)| r.get("threshold").copied().flatten().map(threshold_key).as_deref() == Some(key.as_str()))
            .filter_map(|(_, r)| r.get(m).copied().flatten())
            .filter(|v| v.is_finite())
            .collect()
    };
    let mut metrics = BTreeMap::new();
    for m in a.columns.iter().filter(|c| *c != "threshold") {
        let sign = if higher_is_better(m) { 1.0 } else { -1.0 };
        let sa: Vec<f64> = pick(a, m).into_iter().map(|v| sign * v).collect();
        let sb: Vec<f64> = pick(b, m).into_iter().map(|v| sign * v).collect();
        let mut entry = AsoEntry {
            epsilon_min: None,
            epsilon: None,
            dominant: None,
            higher_is_better: sign > 0.0,
            n_a: sa.len(),
            n_b: sb.len(),
            note: None,
        };
        if sa.is_empty() || sb.is_empty() {
            entry.note = Some("no scores at this threshold".into());
        } else {
            match aso_test(&sa, &sb, cfg)? {
                Some(r) => {
                    entry.epsilon_min = Some(r.epsilon_min);
                    entry.epsilon = Some(r.epsilon);
                    entry.dominant = Some(r.dominant);
                }
                None => entry.note = Some("degenerate samples (both constant and equal)".into()),
            }
        }
        metrics.insert(m.clone(), entry);
    }
    Ok(AsoSummary { threshold, alpha: cfg.alpha, tau: cfg.tau, n_bootstrap: cfg.n_bootstrap, seed: cfg.seed, metrics })
}

pub fn run_aso(a: &[PathBuf], b: &[PathBuf], threshold: f64, cfg: &AsoConfig, out: &Path) -> Result<AsoSummary> {
    let summary = compare(&read_metric_tables(a)?, &read_metric_tables(b)?, threshold, cfg)?;
    write_file(out, serde_json::to_string_pretty(&summary).expect("summary serializes").as_bytes())?;
    Ok(summary)
}

/// Apply command-line overrides on top of the file configuration.
pub fn with_overrides(mut cfg: RunConfig, seed: Option<u64>, encoder: Option<EncoderKind>, deterministic: bool, threads: Option<usize>) -> RunConfig {
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(e) = encoder {
        cfg.encoder.kind = e;
    }
    if deterministic {
        cfg.deterministic = true;
    }
    if threads.is_some() {
        cfg.threads = threads;
    }
    cfg
}
