use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tjepa::analysis::{self, PairwiseMetric, DEFAULT_PAIR_CAP};
use tjepa::data::{csv_header, encode_rows, fit_preprocessor, load_csv, EncodedSample, FeatureSchema, Split, TabularDataset, UnseenTally};
use tjepa::downstream::{
    train_linear_probe, train_mlp_head, HeadKind, HeadSpec, ProbeInput, ProbeResult, ProjectionMode, Targets,
};
use tjepa::model::Checkpoint;
use tjepa::numeric::Tensor;
use tjepa::synthetic::{self, Task};
use tjepa::training::{self, checkpoint_name, TrainConfig, EPOCH_LOG, STEP_LOG};

use crate::manifest::ManifestBuilder;
use crate::{load_config, CliError};

pub const MANIFEST: &str = "manifest.json";
pub const ABLATION_REPORT: &str = "ablation.json";

/// Integer labels with at most this many distinct values are treated as
/// classes; other numeric labels as regression targets.
pub const MAX_CLASSES: usize = 32;

fn json_line(v: &impl Serialize) -> Result<String, CliError> {
    serde_json::to_string(v).map_err(CliError::internal)
}

/// Loads feature columns, dropping the configured target column when the
/// file has one.
pub fn load_features(path: &Path, cfg: &TrainConfig) -> Result<TabularDataset, CliError> {
    let target = match (&cfg.target_column, cfg.has_header) {
        (Some(t), true) if csv_header(path)?.iter().any(|h| h == t) => Some(t.as_str()),
        _ => None,
    };
    Ok(load_csv(path, cfg.has_header, target)?)
}

/// Label column of `path`: the configured target column, or the only column.
pub fn load_labels(path: &Path, cfg: &TrainConfig) -> Result<Vec<String>, CliError> {
    let ds = load_csv(path, cfg.has_header, None)?;
    let col = if ds.d() == 1 {
        0
    } else {
        let t = cfg.target_column.as_deref().unwrap_or("y");
        ds.feature_names
            .iter()
            .position(|n| n == t)
            .ok_or_else(|| CliError::user(format!("{}: no label column {t:?}", path.display())))?
    };
    Ok(ds.values.iter().map(|r| r[col].clone()).collect())
}

/// Classes when labels are non-numeric or integers with few distinct
/// values, regression targets otherwise.
pub fn targets_from_labels(labels: &[String]) -> Result<Targets, CliError> {
    let nums: Option<Vec<f64>> = labels.iter().map(|s| s.trim().parse::<f64>().ok()).collect();
    let distinct: BTreeMap<&str, usize> = labels.iter().map(|s| (s.trim(), 0)).collect();
    let integral = nums
        .as_ref()
        .is_some_and(|v| v.iter().all(|x| x.fract() == 0.0 && x.is_finite()));
    match nums {
        Some(v) if !(integral && distinct.len() <= MAX_CLASSES) => {
            if v.iter().any(|x| !x.is_finite()) {
                return Err(CliError::user("labels contain non-finite values"));
            }
            Ok(Targets::Values(v))
        }
        _ => {
            let mut keys: Vec<&str> = distinct.keys().copied().collect();
            if integral {
                keys.sort_by_key(|k| k.parse::<i64>().unwrap_or(0));
            }
            let index: BTreeMap<&str, usize> = keys.iter().enumerate().map(|(i, k)| (*k, i)).collect();
            Ok(Targets::Classes {
                labels: labels.iter().map(|s| index[s.trim()]).collect(),
                n_classes: keys.len(),
            })
        }
    }
}

/// Inputs and targets of the three splits.
#[derive(Debug, Clone)]
pub struct ProbeSplits {
    pub train: (ProbeInput, Targets),
    pub val: (ProbeInput, Targets),
    pub test: (ProbeInput, Targets),
}

fn split_rows(ds: &TabularDataset) -> [Vec<usize>; 3] {
    [Split::Train, Split::Val, Split::Test].map(|s| ds.rows_in(s))
}

/// Splits `ds` with `seed` and fits the preprocessor on its training rows.
pub fn fitted_dataset(ds: &TabularDataset, seed: u64) -> Result<(TabularDataset, FeatureSchema), CliError> {
    let mut ds = ds.clone();
    ds.assign_splits(seed)?;
    let schema = fit_preprocessor(&ds, Split::Train)?;
    Ok((ds, schema))
}

fn check_labels(ds: &TabularDataset, labels: &[String]) -> Result<Targets, CliError> {
    if labels.len() != ds.len() {
        return Err(CliError::user(format!("{} data rows but {} labels", ds.len(), labels.len())));
    }
    targets_from_labels(labels)
}

fn checkpoint_config(ckpt: &Checkpoint) -> Result<TrainConfig, CliError> {
    serde_json::from_value(ckpt.meta.config.clone())
        .map_err(|e| CliError::user(format!("checkpoint config: {e}")))
}

/// Checks that `ds` splits and standardizes exactly as the checkpoint's
/// training data did.
pub fn check_schema(ckpt: &Checkpoint, schema: &FeatureSchema) -> Result<(), CliError> {
    let data_hash = schema.hash();
    if data_hash != ckpt.meta.schema_hash {
        return Err(CliError::user(format!(
            "schema hash mismatch: checkpoint {} vs data {data_hash}",
            ckpt.meta.schema_hash
        )));
    }
    Ok(())
}

/// Frozen-encoder representations of every split.
pub fn representation_splits(ckpt: &Checkpoint, ds: &TabularDataset, labels: &[String]) -> Result<ProbeSplits, CliError> {
    let cfg = checkpoint_config(ckpt)?;
    let (ds, schema) = fitted_dataset(ds, cfg.seed)?;
    check_schema(ckpt, &schema)?;
    let targets = check_labels(&ds, labels)?;
    let (d, h) = (ckpt.state.d(), ckpt.state.config.hidden);
    let [tr, va, te] = split_rows(&ds).map(|rows| -> Result<(ProbeInput, Targets), CliError> {
        let samples: Vec<EncodedSample<f32>> = encode_rows(&ds, &schema, &rows, &mut UnseenTally::default())?;
        let x = analysis::representations(&ckpt.state, &samples, cfg.parallelism)?;
        let x = if rows.is_empty() { Tensor::zeros(&[0, d * h]) } else { x };
        Ok((ProbeInput::new(x, d, h)?, targets.select(&rows)))
    });
    Ok(ProbeSplits {
        train: tr?,
        val: va?,
        test: te?,
    })
}

/// Standardized (and one-hot) raw features of every split, split with `seed`.
pub fn raw_splits(ds: &TabularDataset, labels: &[String], seed: u64) -> Result<ProbeSplits, CliError> {
    let (ds, schema) = fitted_dataset(ds, seed)?;
    let targets = check_labels(&ds, labels)?;
    let width: usize = schema.cardinalities().iter().sum();
    let [tr, va, te] = split_rows(&ds).map(|rows| -> Result<(ProbeInput, Targets), CliError> {
        let samples: Vec<EncodedSample<f64>> = encode_rows(&ds, &schema, &rows, &mut UnseenTally::default())?;
        let data: Vec<f64> = samples.iter().flat_map(|s| s.features.concat()).collect();
        let x = Tensor::new(vec![rows.len(), width], data)?;
        Ok((ProbeInput::raw(x)?, targets.select(&rows)))
    });
    Ok(ProbeSplits {
        train: tr?,
        val: va?,
        test: te?,
    })
}

/// Trains the head on the training split and reports the test metric.
pub fn run_probe(spec: &HeadSpec, s: &ProbeSplits) -> Result<ProbeResult, CliError> {
    let r = match spec.head {
        HeadKind::Linear => train_linear_probe(spec, &s.train.0, &s.train.1, &s.test.0, &s.test.1, Split::Test)?,
        HeadKind::Mlp => train_mlp_head(
            spec,
            &s.train.0,
            &s.train.1,
            &s.val.0,
            &s.val.1,
            &s.test.0,
            &s.test.1,
            Split::Test,
        )?,
    };
    Ok(r)
}

fn pretrain_artifacts(out: &Path, checkpoints: &[PathBuf]) -> Vec<PathBuf> {
    let mut files = vec![out.join(STEP_LOG), out.join(EPOCH_LOG)];
    for c in checkpoints {
        files.push(c.clone());
        files.push(c.with_extension("bin"));
    }
    files
}

#[derive(Debug, Serialize)]
struct PretrainSummary {
    out: String,
    epochs: usize,
    steps: usize,
    final_loss: Option<f64>,
    final_uniformity: Option<f64>,
    checkpoints: usize,
    skipped_steps: u64,
}

fn pretrain_into(argv: &[String], config_path: &Path, cfg: &TrainConfig, data: &Path, out: &Path) -> Result<training::PretrainOutcome, CliError> {
    let ds = load_features(data, cfg)?;
    let echo = serde_json::to_value(cfg).map_err(CliError::internal)?;
    let builder = ManifestBuilder::start("pretrain", argv, echo, cfg.seed, &[config_path, data])?;
    let outcome = training::pretrain(&ds, cfg, Some(out))?;
    builder.finish(&out.join(MANIFEST), &pretrain_artifacts(out, &outcome.checkpoints))?;
    Ok(outcome)
}

fn summary(out: &Path, cfg: &TrainConfig, o: &training::PretrainOutcome) -> PretrainSummary {
    let last = o.epochs.last();
    PretrainSummary {
        out: out.to_string_lossy().into_owned(),
        epochs: cfg.epochs,
        steps: o.steps.len(),
        final_loss: last.and_then(|e| e.mean_loss),
        final_uniformity: last.and_then(|e| e.uniformity),
        checkpoints: o.checkpoints.len(),
        skipped_steps: o.skipped_steps,
    }
}

pub fn pretrain(argv: &[String], config: &Path, data: &Path, out: &Path, seed: Option<u64>) -> Result<String, CliError> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let o = pretrain_into(argv, config, &cfg, data, out)?;
    json_line(&summary(out, &cfg, &o))
}

pub fn probe(argv: &[String], checkpoint: &Path, data: &Path, labels: &Path, head: &str, projection: &str) -> Result<String, CliError> {
    let head: HeadKind = head.parse()?;
    let projection: ProjectionMode = projection.parse()?;
    let ckpt = Checkpoint::load(checkpoint)?;
    let cfg = checkpoint_config(&ckpt)?;
    let builder = ManifestBuilder::start("probe", argv, ckpt.meta.config.clone(), cfg.seed, &[checkpoint, data, labels])?;
    let ds = load_features(data, &cfg)?;
    let labels = load_labels(labels, &cfg)?;
    let splits = representation_splits(&ckpt, &ds, &labels)?;
    let spec = HeadSpec {
        head,
        projection,
        seed: cfg.seed,
        ..HeadSpec::default()
    };
    let result = run_probe(&spec, &splits)?;
    let line = json_line(&result)?;
    let stem = sidecar(checkpoint, &format!("probe-{}-{projection}", head_name(head)));
    let result_path = with_suffix(&stem, ".json");
    std::fs::write(&result_path, &line).map_err(|e| CliError::user(format!("{}: {e}", result_path.display())))?;
    builder.finish(&manifest_path(&stem), &[result_path])?;
    Ok(line)
}

fn head_name(h: HeadKind) -> &'static str {
    match h {
        HeadKind::Linear => "linear",
        HeadKind::Mlp => "mlp",
    }
}

/// `<dir>/<checkpoint stem>.<tag>` next to the checkpoint.
fn sidecar(checkpoint: &Path, tag: &str) -> PathBuf {
    let stem = checkpoint.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    checkpoint.with_file_name(format!("{stem}.{tag}"))
}

fn with_suffix(stem: &Path, suffix: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn manifest_path(stem: &Path) -> PathBuf {
    with_suffix(stem, ".manifest.json")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnalysisMetric {
    Kl,
    Uniformity,
    Dist,
    Variance,
}

pub fn parse_metrics(s: &str) -> Result<Vec<AnalysisMetric>, CliError> {
    let out: Vec<AnalysisMetric> = s
        .split(',')
        .map(str::trim)
        .filter(|m| !m.is_empty())
        .map(|m| match m {
            "kl" => Ok(AnalysisMetric::Kl),
            "uniformity" => Ok(AnalysisMetric::Uniformity),
            "dist" => Ok(AnalysisMetric::Dist),
            "variance" => Ok(AnalysisMetric::Variance),
            other => Err(CliError::user(format!(
                "unknown metric {other:?} (expected kl, uniformity, dist or variance)"
            ))),
        })
        .collect::<Result<_, _>>()?;
    if out.is_empty() {
        return Err(CliError::user("no metrics requested"));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisRow {
    pub checkpoint: String,
    pub epoch: usize,
    pub split: Split,
    pub n: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kl: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub uniformity: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dist: Option<f64>,
    /// Per-feature embedding variance averaged over samples.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub variance: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub t: f64,
    pub rows: Vec<AnalysisRow>,
}

/// Metrics of one checkpoint on the test split of `ds`.
pub fn analyze_checkpoint(ckpt: &Checkpoint, path: &Path, ds: &TabularDataset, metrics: &[AnalysisMetric], t: f64) -> Result<AnalysisRow, CliError> {
    let cfg = checkpoint_config(ckpt)?;
    let (ds, schema) = fitted_dataset(ds, cfg.seed)?;
    check_schema(ckpt, &schema)?;
    let rows = ds.rows_in(Split::Test);
    let samples: Vec<EncodedSample<f32>> = encode_rows(&ds, &schema, &rows, &mut UnseenTally::default())?;
    let pairwise = metrics.iter().any(|m| *m != AnalysisMetric::Variance);
    if pairwise && samples.len() < 2 {
        return Err(CliError::user(format!(
            "pairwise metrics need at least 2 samples, the test split has {}",
            samples.len()
        )));
    }
    let mut row = AnalysisRow {
        checkpoint: path.to_string_lossy().into_owned(),
        epoch: ckpt.meta.epoch,
        split: Split::Test,
        n: samples.len(),
        kl: None,
        uniformity: None,
        dist: None,
        variance: None,
    };
    let par = cfg.parallelism;
    let e = if pairwise {
        Some(analysis::representations(&ckpt.state, &samples, par)?)
    } else {
        None
    };
    for m in metrics {
        match (m, &e) {
            (AnalysisMetric::Kl, Some(e)) => {
                row.kl = Some(analysis::mean_pairwise(PairwiseMetric::Kl, e, DEFAULT_PAIR_CAP, cfg.seed, par)?)
            }
            (AnalysisMetric::Dist, Some(e)) => {
                row.dist = Some(analysis::mean_pairwise(PairwiseMetric::Euclidean, e, DEFAULT_PAIR_CAP, cfg.seed, par)?)
            }
            (AnalysisMetric::Uniformity, Some(e)) => {
                row.uniformity = Some(analysis::uniformity(e, t, DEFAULT_PAIR_CAP, cfg.seed, par)?)
            }
            (AnalysisMetric::Variance, _) => {
                row.variance = Some(analysis::rank_by_variance(&ckpt.state, &samples, par)?.scores)
            }
            _ => {}
        }
    }
    Ok(row)
}

pub fn analyze(argv: &[String], checkpoints: &[PathBuf], data: &Path, metrics: &str, t: f64) -> Result<String, CliError> {
    let metrics = parse_metrics(metrics)?;
    if !(t > 0.0 && t.is_finite()) {
        return Err(CliError::user(format!("--t must be positive, got {t}")));
    }
    let first = Checkpoint::load(&checkpoints[0])?;
    let cfg = checkpoint_config(&first)?;
    let mut inputs: Vec<&Path> = checkpoints.iter().map(PathBuf::as_path).collect();
    inputs.push(data);
    let builder = ManifestBuilder::start("analyze", argv, first.meta.config.clone(), cfg.seed, &inputs)?;
    let ds = load_features(data, &cfg)?;
    let mut rows = Vec::with_capacity(checkpoints.len());
    for (i, path) in checkpoints.iter().enumerate() {
        let ckpt = if i == 0 { first.clone() } else { Checkpoint::load(path)? };
        rows.push(analyze_checkpoint(&ckpt, path, &ds, &metrics, t)?);
    }
    let line = json_line(&AnalysisReport { t, rows })?;
    let stem = sidecar(&checkpoints[0], "analysis");
    let result_path = with_suffix(&stem, ".json");
    std::fs::write(&result_path, &line).map_err(|e| CliError::user(format!("{}: {e}", result_path.display())))?;
    builder.finish(&manifest_path(&stem), &[result_path])?;
    Ok(line)
}

pub fn parse_tokens(s: &str) -> Result<Vec<usize>, CliError> {
    let out: Vec<usize> = s
        .split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<usize>().map_err(|_| CliError::user(format!("invalid token count {t:?}"))))
        .collect::<Result<_, _>>()?;
    if out.is_empty() {
        return Err(CliError::user("token list is empty"));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationArm {
    pub n_reg_tokens: usize,
    pub dir: String,
    /// Mean loss of each training epoch, in epoch order.
    pub epoch_loss: Vec<f64>,
    pub step_loss: Vec<f64>,
    pub final_uniformity: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub tokens: Vec<usize>,
    pub seed: u64,
    pub arms: Vec<AblationArm>,
}

pub fn arm_dir(out: &Path, k: usize) -> PathBuf {
    out.join(format!("reg_{k}"))
}

pub fn ablate_reg(argv: &[String], config: &Path, data: &Path, tokens: &str, out: &Path) -> Result<String, CliError> {
    let tokens = parse_tokens(tokens)?;
    let cfg = load_config(config)?;
    let echo = serde_json::to_value(&cfg).map_err(CliError::internal)?;
    let builder = ManifestBuilder::start("ablate-reg", argv, echo, cfg.seed, &[config, data])?;
    let mut arms = Vec::with_capacity(tokens.len());
    let mut artifacts = Vec::new();
    for &k in &tokens {
        let arm_cfg = TrainConfig {
            n_reg_tokens: k,
            ..cfg.clone()
        };
        let dir = arm_dir(out, k);
        std::fs::create_dir_all(&dir).map_err(|e| CliError::user(format!("{}: {e}", dir.display())))?;
        let cfg_path = dir.join("config.json");
        let text = serde_json::to_vec_pretty(&arm_cfg).map_err(CliError::internal)?;
        std::fs::write(&cfg_path, text).map_err(|e| CliError::user(format!("{}: {e}", cfg_path.display())))?;
        let arm_argv: Vec<String> = [
            argv.first().map_or("tjepa", String::as_str),
            "pretrain",
            "--config",
            &cfg_path.to_string_lossy(),
            "--data",
            &data.to_string_lossy(),
            "--out",
            &dir.to_string_lossy(),
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        let o = pretrain_into(&arm_argv, &cfg_path, &arm_cfg, data, &dir)?;
        artifacts.push(dir.join(MANIFEST));
        arms.push(AblationArm {
            n_reg_tokens: k,
            dir: dir.to_string_lossy().into_owned(),
            epoch_loss: o.epochs.iter().filter_map(|e| e.mean_loss).collect(),
            step_loss: o.steps.iter().map(|s| s.loss).collect(),
            final_uniformity: o.epochs.last().and_then(|e| e.uniformity),
        });
    }
    let report = AblationReport {
        tokens,
        seed: cfg.seed,
        arms,
    };
    let path = out.join(ABLATION_REPORT);
    let text = serde_json::to_vec_pretty(&report).map_err(CliError::internal)?;
    std::fs::write(&path, text).map_err(|e| CliError::user(format!("{}: {e}", path.display())))?;
    artifacts.push(path);
    builder.finish(&out.join(MANIFEST), &artifacts)?;
    json_line(&report)
}

pub fn make_synthetic(argv: &[String], n: usize, d: usize, task: &str, seed: u64, out: &Path) -> Result<String, CliError> {
    let task: Task = task.parse()?;
    let echo = serde_json::json!({ "n": n, "d": d, "task": task, "seed": seed });
    let builder = ManifestBuilder::start("make-synthetic", argv, echo, seed, &[])?;
    let data = synthetic::generate(n, d, task, seed)?;
    if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::user(format!("{}: {e}", dir.display())))?;
    }
    data.write_csv(task, out)?;
    builder.finish(&manifest_path(out), &[out.to_path_buf()])?;
    json_line(&serde_json::json!({ "out": out, "rows": n, "columns": d + 1 }))
}

/// Path of the checkpoint written after `epoch` in a pretraining output.
pub fn checkpoint_path(out: &Path, epoch: usize) -> PathBuf {
    out.join(checkpoint_name(epoch))
}
