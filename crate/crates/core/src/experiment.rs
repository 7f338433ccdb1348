//! Training runs on disk: checkpoints, per-step diagnostics and marginal
//! metrics recorded in a run manifest.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::{FlowDataset, Label, Lineage};
use crate::eval::EvalOptions;
use crate::metrics::{similarity, sorted_comparison, MetricsError, DEFAULT_BINS};
use crate::policy::{evaluate_marginal, CheckpointMetrics, PolicyError, PoolEntry};
use crate::wgan::{train, Checkpoint, GanConfig, GanError, GenerateOptions, TrainStepReport};

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Gan(#[from] GanError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("manifest lists {0}, which is missing or unreadable: {1}")]
    MissingCheckpoint(String, String),
    #[error("manifest has no metrics to emit")]
    NoMetrics,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_DIR: &str = "checkpoints";

/// Hex SHA-256 of the canonical JSON form of `value`.
pub fn digest<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("serializable");
    Sha256::digest(&bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// How checkpoints are scored while training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalSpec {
    pub eval: EvalOptions,
    pub generate: GenerateOptions,
    pub bins: usize,
    /// Seed for per-checkpoint generation; combined with the step index.
    pub seed: u64,
}

impl Default for MarginalSpec {
    fn default() -> Self {
        MarginalSpec {
            eval: EvalOptions::default(),
            generate: GenerateOptions::default(),
            bins: DEFAULT_BINS,
            seed: 0,
        }
    }
}

/// Data needed to score checkpoints of one class.
pub struct MarginalData<'a> {
    /// Real training rows of the checkpoint's class.
    pub real_class: &'a FlowDataset,
    /// Real training rows of the other class.
    pub real_other: &'a FlowDataset,
    pub test: &'a FlowDataset,
}

fn step_seed(seed: u64, step: u64) -> u64 {
    seed ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Marginal macro-F1 and histogram metrics of one checkpoint. Deterministic
/// in `(spec.seed, ckpt.step)`.
pub fn score_checkpoint(
    ckpt: &Checkpoint,
    data: &MarginalData,
    spec: &MarginalSpec,
) -> Result<CheckpointMetrics, RunError> {
    let mut rng = ChaCha8Rng::seed_from_u64(step_seed(spec.seed, ckpt.step));
    let n = data.real_class.len();
    let synth = ckpt.generate(n, &spec.generate, &mut rng)?;
    let sim = similarity(data.real_class.view(), synth.view(), spec.bins)?;
    let report = evaluate_marginal(
        ckpt,
        data.real_other,
        data.test,
        n,
        &spec.generate,
        &spec.eval,
        &mut rng,
    )?;
    Ok(CheckpointMetrics {
        step: ckpt.step,
        macro_f1: Some(report.best_macro_f1()),
        l1: Some(sim.l1),
        jaccard: Some(sim.jaccard),
        jaccard_p1: Some(sim.jaccard_p1),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub label: Label,
    pub config_digest: String,
    pub config: GanConfig,
    pub seed: u64,
    pub steps: u64,
    pub data_source: Lineage,
    /// Real rows the generator was trained on.
    pub train_rows: usize,
    /// Paths relative to the run directory.
    pub checkpoints: Vec<String>,
    pub diagnostics: Vec<TrainStepReport>,
    pub metrics: Vec<CheckpointMetrics>,
    #[serde(default)]
    pub marginal: Option<MarginalSpec>,
    #[serde(default)]
    pub error: Option<String>,
}

impl RunManifest {
    pub fn save(&self, dir: &Path) -> Result<(), RunError> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(self)?)?;
        let mut diag = Vec::new();
        writeln!(diag, "{}", TrainStepReport::CSV_HEADER)?;
        for r in &self.diagnostics {
            writeln!(diag, "{}", r.csv_row())?;
        }
        fs::write(dir.join(DIAGNOSTICS_FILE), diag)?;
        if !self.metrics.is_empty() {
            let mut out = Vec::new();
            emit_metric_series(self, &mut out)?;
            fs::write(dir.join(METRICS_FILE), out)?;
        }
        Ok(())
    }

    /// Reads a manifest and checks that every checkpoint it lists loads.
    pub fn load(dir: &Path) -> Result<Self, RunError> {
        let m: RunManifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
        for c in &m.checkpoints {
            Checkpoint::load(dir.join(c))
                .map_err(|e| RunError::MissingCheckpoint(c.clone(), e.to_string()))?;
        }
        Ok(m)
    }

    /// Checkpoints with their recorded metrics.
    pub fn pool(&self, dir: &Path) -> Result<Vec<PoolEntry>, RunError> {
        self.checkpoints
            .iter()
            .map(|c| {
                let checkpoint = Checkpoint::load(dir.join(c))
                    .map_err(|e| RunError::MissingCheckpoint(c.clone(), e.to_string()))?;
                let metrics = self
                    .metrics
                    .iter()
                    .find(|m| m.step == checkpoint.step)
                    .copied();
                Ok(PoolEntry {
                    checkpoint,
                    metrics,
                })
            })
            .collect()
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| format!("{x:?}"))
}

/// `step,macro_f1,l1,jaccard,jaccard_p1` rows in step order.
pub fn emit_metric_series<W: Write>(manifest: &RunManifest, mut out: W) -> Result<(), RunError> {
    if manifest.metrics.is_empty() {
        return Err(RunError::NoMetrics);
    }
    let mut rows = manifest.metrics.clone();
    rows.sort_by_key(|m| m.step);
    writeln!(out, "step,macro_f1,l1,jaccard,jaccard_p1")?;
    for m in rows {
        writeln!(
            out,
            "{},{},{},{},{}",
            m.step,
            fmt_opt(m.macro_f1),
            fmt_opt(m.l1),
            fmt_opt(m.jaccard),
            fmt_opt(m.jaccard_p1)
        )?;
    }
    Ok(())
}

/// `rank,mass_real,mass_synth` over occupied cells, real mass ascending.
pub fn emit_histogram_compare<W: Write>(
    real: &FlowDataset,
    synth: &FlowDataset,
    bins: usize,
    mut out: W,
) -> Result<(), RunError> {
    let rows = sorted_comparison(real.view(), synth.view(), bins)?;
    writeln!(out, "rank,mass_real,mass_synth")?;
    for (rank, a, b) in rows {
        writeln!(out, "{rank},{a:?},{b:?}")?;
    }
    Ok(())
}

/// Result of [`run_training`].
pub struct RunOutput {
    pub manifest: RunManifest,
    pub pool: Vec<PoolEntry>,
}

/// Trains one class, scores every retained checkpoint when `marginal` is
/// given, and writes checkpoints plus manifest under `out_dir` if set.
#[allow(clippy::too_many_arguments)]
pub fn run_training(
    run_id: &str,
    config: &GanConfig,
    class_data: &FlowDataset,
    complementary: Option<&FlowDataset>,
    steps: u64,
    marginal: Option<(&MarginalData, &MarginalSpec)>,
    out_dir: Option<&Path>,
) -> Result<RunOutput, RunError> {
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir.join(CHECKPOINT_DIR))?;
    }
    let mut pool = Vec::new();
    let mut files = Vec::new();
    let mut failure: Option<RunError> = None;
    let outcome = train(config, class_data, complementary, steps, |ck| {
        if failure.is_some() {
            return;
        }
        let metrics = match marginal {
            Some((data, spec)) => match score_checkpoint(ck, data, spec) {
                Ok(m) => Some(m),
                Err(e) => {
                    failure = Some(e);
                    return;
                }
            },
            None => None,
        };
        if let Some(dir) = out_dir {
            let rel: PathBuf = Path::new(CHECKPOINT_DIR).join(ck.file_name());
            if let Err(e) = ck.save(dir.join(&rel)) {
                failure = Some(e.into());
                return;
            }
            files.push(rel.to_string_lossy().into_owned());
        }
        pool.push(PoolEntry {
            checkpoint: ck.clone(),
            metrics,
        });
    })?;
    if let Some(e) = failure {
        return Err(e);
    }
    let manifest = RunManifest {
        run_id: run_id.into(),
        label: outcome.state.label,
        config_digest: digest(config),
        config: config.clone(),
        seed: config.seed,
        steps,
        data_source: class_data.lineage().clone(),
        train_rows: class_data.len(),
        checkpoints: files,
        diagnostics: outcome.reports,
        metrics: pool.iter().filter_map(|p| p.metrics).collect(),
        marginal: marginal.map(|(_, s)| s.clone()),
        error: outcome.error.map(|e| e.to_string()),
    };
    if let Some(dir) = out_dir {
        manifest.save(dir)?;
    }
    Ok(RunOutput { manifest, pool })
}
