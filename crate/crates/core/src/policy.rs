//! Naive mean baseline, training-set assembly policies, elitism and the
//! sampled best-pair selection.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::distr::Distribution;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, FlowDataset, Label, Lineage};
use crate::eval::{evaluate_training_set, is_degenerate, EvalError, EvalOptions, EvalReport};
use crate::wgan::{Checkpoint, GanError, GenerateOptions};

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("class {label} has {rows} rows, need at least 2")]
    TooFewRows { label: Label, rows: usize },
    #[error("invalid policy: {0}")]
    InvalidPolicy(String),
    #[error("pool for label {label} has {size} checkpoints, policy needs {needed}")]
    PoolTooSmall {
        label: Label,
        size: usize,
        needed: usize,
    },
    #[error("checkpoint {0} has no {1} metric")]
    MissingMetric(String, &'static str),
    #[error("every draw failed; last error: {0}")]
    AllDrawsFailed(String),
    #[error(transparent)]
    Gan(#[from] GanError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Per-class, per-feature means and population variances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanBaseline {
    pub dimension: usize,
    pub means: [Vec<f64>; 2],
    pub variances: [Vec<f64>; 2],
}

pub fn fit_mean_baseline(real_train: &FlowDataset) -> Result<MeanBaseline, PolicyError> {
    let d = real_train.dimension();
    let mut means = [vec![0.0; d], vec![0.0; d]];
    let mut variances = [vec![0.0; d], vec![0.0; d]];
    for label in Label::ALL {
        let rows: Vec<&[f64]> = (0..real_train.len())
            .filter(|&i| real_train.label(i) == label)
            .map(|i| real_train.row(i))
            .collect();
        if rows.len() < 2 {
            return Err(PolicyError::TooFewRows {
                label,
                rows: rows.len(),
            });
        }
        let n = rows.len() as f64;
        for j in 0..d {
            let mean = rows.iter().map(|r| r[j]).sum::<f64>() / n;
            let var = rows.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n;
            means[label.index()][j] = mean;
            variances[label.index()][j] = var;
        }
    }
    Ok(MeanBaseline {
        dimension: d,
        means,
        variances,
    })
}

impl MeanBaseline {
    /// Independent normal draws per feature.
    pub fn sample<R: Rng + ?Sized>(&self, label: Label, n: usize, rng: &mut R) -> FlowDataset {
        let (mu, var) = (&self.means[label.index()], &self.variances[label.index()]);
        let mut rows = Vec::with_capacity(n * self.dimension);
        for _ in 0..n {
            for j in 0..self.dimension {
                let z: f64 = StandardNormal.sample(rng);
                rows.push(mu[j] + var[j].sqrt() * z);
            }
        }
        FlowDataset::single_class(
            self.dimension,
            rows,
            label,
            Lineage::synthetic(format!("mean-baseline:label{}", label.index())),
        )
        .expect("finite fitted moments")
    }

    /// Fully synthetic training set with `counts[l]` rows of label `l`.
    pub fn training_set<R: Rng + ?Sized>(&self, counts: [usize; 2], rng: &mut R) -> FlowDataset {
        let a = self.sample(Label::Normal, counts[0], rng);
        let b = self.sample(Label::Mining, counts[1], rng);
        a.concat(&b).expect("same dimension")
    }
}

pub fn sample_baseline<R: Rng + ?Sized>(
    b: &MeanBaseline,
    label: Label,
    n: usize,
    rng: &mut R,
) -> FlowDataset {
    b.sample(label, n, rng)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Policy {
    /// One generator per label, `N` and `M` rows.
    P1,
    /// Two generators per label, each contributing half.
    P2,
    /// One generator per label, balanced.
    P3,
}

impl FromStr for Policy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "P1" | "1" => Ok(Policy::P1),
            "P2" | "2" => Ok(Policy::P2),
            "P3" | "3" => Ok(Policy::P3),
            other => Err(format!("unknown policy {other}")),
        }
    }
}

impl Policy {
    fn per_label(self) -> usize {
        match self {
            Policy::P2 => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySpec {
    pub policy: Policy,
    /// Label-0 rows.
    pub n: usize,
    /// Label-1 rows.
    pub m: usize,
    pub draws: usize,
}

impl PolicySpec {
    pub fn new(policy: Policy, n: usize, m: usize, draws: usize) -> Self {
        PolicySpec {
            policy,
            n,
            m,
            draws,
        }
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.n == 0 || self.m == 0 {
            return Err(PolicyError::InvalidPolicy("counts must be positive".into()));
        }
        if self.policy == Policy::P3 && self.n != self.m {
            return Err(PolicyError::InvalidPolicy(format!(
                "P3 is balanced but N = {} and M = {}",
                self.n, self.m
            )));
        }
        if self.draws == 0 {
            return Err(PolicyError::InvalidPolicy("draws must be at least 1".into()));
        }
        Ok(())
    }

    pub fn count(&self, label: Label) -> usize {
        match label {
            Label::Normal => self.n,
            Label::Mining => self.m,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    None,
    F1,
    L1Distance,
    Jaccard,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ElitismSpec {
    pub criterion: Criterion,
    pub top_k: usize,
}

impl ElitismSpec {
    pub const NONE: ElitismSpec = ElitismSpec {
        criterion: Criterion::None,
        top_k: usize::MAX,
    };

    pub fn new(criterion: Criterion, top_k: usize) -> Self {
        ElitismSpec { criterion, top_k }
    }
}

impl FromStr for ElitismSpec {
    type Err = String;

    /// `none`, or `f1:10`, `l1:10`, `jaccard:10`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.eq_ignore_ascii_case("none") {
            return Ok(ElitismSpec::NONE);
        }
        let (c, k) = s
            .split_once(':')
            .ok_or_else(|| format!("expected criterion:top_k, got {s}"))?;
        let criterion = match c.to_ascii_lowercase().as_str() {
            "f1" => Criterion::F1,
            "l1" | "l1_distance" => Criterion::L1Distance,
            "jaccard" => Criterion::Jaccard,
            other => return Err(format!("unknown criterion {other}")),
        };
        let top_k: usize = k.parse().map_err(|e| format!("bad top_k {k}: {e}"))?;
        if top_k == 0 {
            return Err("top_k must be at least 1".into());
        }
        Ok(ElitismSpec { criterion, top_k })
    }
}

impl fmt::Display for ElitismSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.criterion {
            Criterion::None => write!(f, "none"),
            Criterion::F1 => write!(f, "f1:{}", self.top_k),
            Criterion::L1Distance => write!(f, "l1:{}", self.top_k),
            Criterion::Jaccard => write!(f, "jaccard:{}", self.top_k),
        }
    }
}

/// Quality measures of one checkpoint recorded during training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMetrics {
    pub step: u64,
    pub macro_f1: Option<f64>,
    pub l1: Option<f64>,
    pub jaccard: Option<f64>,
    pub jaccard_p1: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct PoolEntry {
    pub checkpoint: Checkpoint,
    pub metrics: Option<CheckpointMetrics>,
}

impl PoolEntry {
    pub fn id(&self) -> String {
        self.checkpoint.id()
    }

    pub fn step(&self) -> u64 {
        self.checkpoint.step
    }
}

/// Pool indices in rank order: by descending macro-F1, ascending L1 or
/// descending Jaccard, ties broken by step. `Criterion::None` keeps the
/// whole pool in step order.
pub fn rank_checkpoints(
    pool: &[PoolEntry],
    elitism: ElitismSpec,
) -> Result<Vec<usize>, PolicyError> {
    let mut idx: Vec<usize> = (0..pool.len()).collect();
    let key = |e: &PoolEntry| -> Result<f64, PolicyError> {
        let m = e.metrics.as_ref();
        let (v, name) = match elitism.criterion {
            Criterion::None => return Ok(0.0),
            Criterion::F1 => (m.and_then(|m| m.macro_f1).map(|v| -v), "macro_f1"),
            Criterion::L1Distance => (m.and_then(|m| m.l1), "l1"),
            Criterion::Jaccard => (m.and_then(|m| m.jaccard).map(|v| -v), "jaccard"),
        };
        v.ok_or_else(|| PolicyError::MissingMetric(e.id(), name))
    };
    let keys = pool.iter().map(key).collect::<Result<Vec<f64>, _>>()?;
    idx.sort_by(|&a, &b| {
        keys[a]
            .total_cmp(&keys[b])
            .then(pool[a].step().cmp(&pool[b].step()))
    });
    if elitism.criterion != Criterion::None {
        idx.truncate(elitism.top_k);
    }
    Ok(idx)
}

/// Synthetic rows drawn from a list of `(checkpoint, rows)` parts.
pub fn synthesize<R: Rng + ?Sized>(
    parts: &[(&Checkpoint, usize)],
    options: &GenerateOptions,
    rng: &mut R,
) -> Result<(FlowDataset, Vec<String>), PolicyError> {
    let mut out: Option<FlowDataset> = None;
    let mut ids = Vec::new();
    for (ck, rows) in parts {
        ids.push(ck.id());
        if *rows == 0 {
            continue;
        }
        let ds = ck.generate(*rows, options, rng)?;
        out = Some(match out {
            None => ds,
            Some(acc) => acc.concat(&ds)?,
        });
    }
    let ds = out.ok_or_else(|| PolicyError::InvalidPolicy("no rows requested".into()))?;
    Ok((ds, ids))
}

/// Chooses checkpoints for one training set and the rows each contributes.
fn choose_parts<'a, R: Rng + ?Sized>(
    spec: &PolicySpec,
    pools: [&'a [&'a PoolEntry]; 2],
    rng: &mut R,
) -> Result<Vec<(&'a Checkpoint, usize)>, PolicyError> {
    let k = spec.policy.per_label();
    let mut parts = Vec::new();
    for label in Label::ALL {
        let pool = pools[label.index()];
        if pool.len() < k {
            return Err(PolicyError::PoolTooSmall {
                label,
                size: pool.len(),
                needed: k,
            });
        }
        let count = spec.count(label);
        if k == 1 {
            parts.push((&pool[rng.random_range(0..pool.len())].checkpoint, count));
        } else {
            let mut picks = sample(rng, pool.len(), 2).into_vec();
            picks.sort_unstable();
            parts.push((&pool[picks[0]].checkpoint, count.div_ceil(2)));
            parts.push((&pool[picks[1]].checkpoint, count / 2));
        }
    }
    Ok(parts)
}

/// Draws checkpoints per the policy and generates the fully synthetic
/// training set.
pub fn assemble_policy_dataset<R: Rng + ?Sized>(
    spec: &PolicySpec,
    pool0: &[&PoolEntry],
    pool1: &[&PoolEntry],
    options: &GenerateOptions,
    rng: &mut R,
) -> Result<(FlowDataset, Vec<String>), PolicyError> {
    spec.validate()?;
    let parts = choose_parts(spec, [pool0, pool1], rng)?;
    synthesize(&parts, options, rng)
}

/// Trains on synthetic rows from `parts` and scores on real test data.
pub fn evaluate_parts<R: Rng + ?Sized>(
    parts: &[(&Checkpoint, usize)],
    real_test: &FlowDataset,
    generate: &GenerateOptions,
    eval: &EvalOptions,
    rng: &mut R,
) -> Result<EvalReport, PolicyError> {
    let (train, ids) = synthesize(parts, generate, rng)?;
    debug_assert!(!train.lineage().contains_real());
    let mut report = evaluate_training_set(&train, real_test, eval, ids)?;
    flag_degenerate(&mut report, parts, &train);
    Ok(report)
}

fn flag_degenerate(
    report: &mut EvalReport,
    parts: &[(&Checkpoint, usize)],
    train: &FlowDataset,
) {
    for label in Label::ALL {
        let idx: Vec<usize> = (0..train.len())
            .filter(|&i| train.label(i) == label)
            .collect();
        let class = train.select(&idx);
        if !class.lineage().contains_real() && is_degenerate(&class) {
            let ids: Vec<String> = parts
                .iter()
                .filter(|(c, _)| c.label == label)
                .map(|(c, _)| c.id())
                .collect();
            report
                .flags
                .push(format!("degenerate generation for label {label}: {}", ids.join("+")));
        }
    }
}

/// Fully synthetic pair evaluation: `n` label-0 rows from `ckpt0` and `m`
/// label-1 rows from `ckpt1`.
pub fn evaluate_pair<R: Rng + ?Sized>(
    ckpt0: &Checkpoint,
    ckpt1: &Checkpoint,
    sizes: (usize, usize),
    real_test: &FlowDataset,
    generate: &GenerateOptions,
    eval: &EvalOptions,
    rng: &mut R,
) -> Result<EvalReport, PolicyError> {
    if sizes.0 + sizes.1 == 0 {
        return Err(EvalError::EmptyTraining.into());
    }
    if ckpt0.label != Label::Normal || ckpt1.label != Label::Mining {
        return Err(PolicyError::InvalidPolicy(
            "pair needs a label-0 and a label-1 checkpoint".into(),
        ));
    }
    evaluate_parts(
        &[(ckpt0, sizes.0), (ckpt1, sizes.1)],
        real_test,
        generate,
        eval,
        rng,
    )
}

/// Synthetic rows of the checkpoint's class mixed with real rows of the
/// other class.
pub fn evaluate_marginal<R: Rng + ?Sized>(
    ckpt: &Checkpoint,
    real_other: &FlowDataset,
    real_test: &FlowDataset,
    size: usize,
    generate: &GenerateOptions,
    eval: &EvalOptions,
    rng: &mut R,
) -> Result<EvalReport, PolicyError> {
    let other = ckpt.label.other();
    if real_other.class_count(other) != real_other.len() {
        return Err(PolicyError::InvalidPolicy(format!(
            "marginal evaluation needs real rows of label {other} only"
        )));
    }
    let synth = ckpt.generate(size, generate, rng)?;
    let degenerate = is_degenerate(&synth);
    let train = synth.concat(real_other)?;
    let mut report = evaluate_training_set(&train, real_test, eval, vec![ckpt.id()])?;
    if degenerate {
        report
            .flags
            .push(format!("degenerate generation for label {}: {}", ckpt.label, ckpt.id()));
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeaderboardRow {
    pub draw: usize,
    pub ids0: Vec<String>,
    pub ids1: Vec<String>,
    /// Steps of the drawn checkpoints, label 0 first; used for tie-breaks.
    pub steps: Vec<u64>,
    pub best_threshold: f64,
    pub macro_f1: f64,
    #[serde(default)]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub policy: PolicySpec,
    pub elitism: [String; 2],
    pub chosen: LeaderboardRow,
    pub report: EvalReport,
    pub leaderboard: Vec<LeaderboardRow>,
}

impl SelectionResult {
    pub const CSV_HEADER: &'static str = "draw,ckpt0,ckpt1,best_threshold,macro_f1";

    pub fn write_leaderboard<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "{}", Self::CSV_HEADER)?;
        for r in &self.leaderboard {
            if r.error.is_some() {
                continue;
            }
            writeln!(
                out,
                "{},{},{},{},{:?}",
                r.draw,
                r.ids0.join("+"),
                r.ids1.join("+"),
                r.best_threshold,
                r.macro_f1
            )?;
        }
        Ok(())
    }

    /// Median best-threshold macro-F1 over successful draws.
    pub fn median_macro_f1(&self) -> f64 {
        let mut v: Vec<f64> = self
            .leaderboard
            .iter()
            .filter(|r| r.error.is_none())
            .map(|r| r.macro_f1)
            .collect();
        median(&mut v)
    }
}

pub fn median(v: &mut [f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

#[derive(Debug, Clone)]
pub struct SelectionSetup<'a> {
    pub policy: PolicySpec,
    pub elitism: [ElitismSpec; 2],
    pub real_test: &'a FlowDataset,
    pub generate: GenerateOptions,
    pub eval: EvalOptions,
    pub seed: u64,
    /// Evaluate every pair of the filtered pools instead of sampling.
    pub exhaustive: bool,
}

/// Samples `draws` training sets from the elitism-filtered pools, scores
/// each and returns the best one with the full leaderboard.
pub fn select_best(
    pool0: &[PoolEntry],
    pool1: &[PoolEntry],
    setup: &SelectionSetup,
) -> Result<SelectionResult, PolicyError> {
    setup.policy.validate()?;
    let filtered: [Vec<&PoolEntry>; 2] = [
        rank_checkpoints(pool0, setup.elitism[0])?
            .into_iter()
            .map(|i| &pool0[i])
            .collect(),
        rank_checkpoints(pool1, setup.elitism[1])?
            .into_iter()
            .map(|i| &pool1[i])
            .collect(),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(setup.seed);
    let plans: Vec<Vec<(&Checkpoint, usize)>> = if setup.exhaustive {
        if setup.policy.policy == Policy::P2 {
            return Err(PolicyError::InvalidPolicy(
                "exhaustive mode supports P1 and P3".into(),
            ));
        }
        let mut v = Vec::new();
        for a in &filtered[0] {
            for b in &filtered[1] {
                v.push(vec![
                    (&a.checkpoint, setup.policy.n),
                    (&b.checkpoint, setup.policy.m),
                ]);
            }
        }
        v
    } else {
        (0..setup.policy.draws)
            .map(|_| choose_parts(&setup.policy, [&filtered[0], &filtered[1]], &mut rng))
            .collect::<Result<_, _>>()?
    };
    // Each draw generates from its own stream so results do not depend on
    // evaluation order.
    let seeds: Vec<u64> = plans.iter().map(|_| rng.random()).collect();
    let mut leaderboard = Vec::with_capacity(plans.len());
    let mut best: Option<(usize, EvalReport)> = None;
    let mut last_err = String::new();
    for (draw, (parts, seed)) in plans.iter().zip(seeds).enumerate() {
        let ids = |l: Label| -> Vec<String> {
            parts
                .iter()
                .filter(|(c, _)| c.label == l)
                .map(|(c, _)| c.id())
                .collect()
        };
        let steps: Vec<u64> = parts.iter().map(|(c, _)| c.step).collect();
        let mut gen_rng = ChaCha8Rng::seed_from_u64(seed);
        let mut row = LeaderboardRow {
            draw,
            ids0: ids(Label::Normal),
            ids1: ids(Label::Mining),
            steps,
            best_threshold: f64::NAN,
            macro_f1: f64::NAN,
            error: None,
        };
        match evaluate_parts(parts, setup.real_test, &setup.generate, &setup.eval, &mut gen_rng) {
            Ok(report) => {
                let b = report.best();
                row.best_threshold = b.threshold;
                row.macro_f1 = b.scores.macro_f1;
                let better = match &best {
                    None => true,
                    Some((i, _)) => {
                        let cur: &LeaderboardRow = &leaderboard[*i];
                        row.macro_f1 > cur.macro_f1
                            || (row.macro_f1 == cur.macro_f1 && row.steps < cur.steps)
                    }
                };
                if better {
                    best = Some((draw, report));
                }
            }
            Err(e) => {
                log::warn!("draw {draw} failed: {e}");
                last_err = e.to_string();
                row.error = Some(last_err.clone());
            }
        }
        leaderboard.push(row);
    }
    let (i, report) = best.ok_or(PolicyError::AllDrawsFailed(last_err))?;
    Ok(SelectionResult {
        policy: setup.policy.clone(),
        elitism: [setup.elitism[0].to_string(), setup.elitism[1].to_string()],
        chosen: leaderboard[i].clone(),
        report,
        leaderboard,
    })
}
