//! One Wasserstein GAN per traffic class, trained with adaptive mini-batches
//! and optional noise, label-flip, latent-embedding and complementary-data
//! heuristics.
//!
//! Critic output above zero means "judged real" everywhere in this module.

use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use rand::distr::Distribution;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, FlowDataset, Label, Lineage, ScaleMode, ScalerParams};
use crate::metrics::percentile;
use crate::nn::{
    Activation, CriticRole, Mlp, MlpSnapshot, MlpSpec, Mode, NnError, OptimizerState,
};

#[derive(Debug, Error)]
pub enum GanError {
    #[error("invalid GAN config: {0}")]
    InvalidConfig(String),
    #[error("training data must hold a single class, found counts {0:?}")]
    NotSingleClass([usize; 2]),
    #[error("mini-batch size {size} from ratio {ratio} on {rows} rows is below 2")]
    BatchTooSmall { size: usize, ratio: f64, rows: usize },
    #[error("training diverged at step {step}: {reason}")]
    Diverged { step: u64, reason: String },
    #[error("{filter} accepted {accepted} of {drawn} generated rows, needed {needed}")]
    FilterStarved {
        filter: String,
        accepted: usize,
        drawn: usize,
        needed: usize,
    },
    #[error("requested zero rows")]
    ZeroRows,
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    Normal,
    Uniform,
}

/// Zero-mean noise with standard deviation `std`. Uniform noise is drawn
/// from `[-sqrt(3) std, sqrt(3) std]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub std: f64,
}

impl NoiseSpec {
    pub fn normal(std: f64) -> Self {
        NoiseSpec {
            kind: NoiseKind::Normal,
            std,
        }
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self.kind {
            NoiseKind::Normal => {
                let z: f64 = StandardNormal.sample(rng);
                self.std * z
            }
            NoiseKind::Uniform => {
                let h = 3f64.sqrt() * self.std;
                if h == 0.0 {
                    0.0
                } else {
                    rng.random_range(-h..h)
                }
            }
        }
    }

    fn validate(&self, what: &str) -> Result<(), String> {
        if self.std >= 0.0 && self.std.is_finite() {
            Ok(())
        } else {
            Err(format!("{what} std {} must be >= 0", self.std))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingSpec {
    pub categories: usize,
    #[serde(default)]
    pub trainable: bool,
    /// Standard deviation of the random initial centroids.
    #[serde(default = "one")]
    pub centroid_scale: f64,
    /// Explicit initial centroids (`categories x dimension`).
    #[serde(default)]
    pub centroids: Option<Vec<Vec<f64>>>,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentSpec {
    pub dimension: usize,
    pub noise_kind: NoiseKind,
    pub noise_scale: f64,
    #[serde(default)]
    pub embedding: Option<EmbeddingSpec>,
}

impl LatentSpec {
    pub fn normal(dimension: usize, noise_scale: f64) -> Self {
        LatentSpec {
            dimension,
            noise_kind: NoiseKind::Normal,
            noise_scale,
            embedding: None,
        }
    }

    fn noise(&self) -> NoiseSpec {
        NoiseSpec {
            kind: self.noise_kind,
            std: self.noise_scale,
        }
    }

    fn validate(&self) -> Result<(), String> {
        if self.dimension == 0 {
            return Err("latent dimension must be positive".into());
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(format!("noise_scale {} must be >= 0", self.noise_scale));
        }
        if let Some(e) = &self.embedding {
            if !(1..=20).contains(&e.categories) {
                return Err(format!("embedding categories {} outside [1, 20]", e.categories));
            }
            if let Some(c) = &e.centroids {
                if c.len() != e.categories || c.iter().any(|r| r.len() != self.dimension) {
                    return Err("centroid table must be categories x latent dimension".into());
                }
            }
        }
        Ok(())
    }

    /// Initial centroid table, if the embedding is enabled.
    pub fn initial_centroids<R: Rng + ?Sized>(&self, rng: &mut R) -> Option<Array2<f64>> {
        let e = self.embedding.as_ref()?;
        Some(match &e.centroids {
            Some(rows) => Array2::from_shape_vec(
                (e.categories, self.dimension),
                rows.concat(),
            )
            .expect("validated shape"),
            None => {
                let normal = Normal::new(0.0, e.centroid_scale).expect("finite scale");
                Array2::from_shape_simple_fn((e.categories, self.dimension), || {
                    normal.sample(rng)
                })
            }
        })
    }
}

/// Latent draws for `n` rows: noise alone, or a uniformly chosen centroid
/// plus noise when `centroids` is given. Returns the chosen categories too.
pub fn sample_latent<R: Rng + ?Sized>(
    latent: &LatentSpec,
    centroids: Option<&Array2<f64>>,
    n: usize,
    rng: &mut R,
) -> (Array2<f64>, Option<Vec<usize>>) {
    let noise = latent.noise();
    let mut z = Array2::from_shape_simple_fn((n, latent.dimension), || noise.draw(rng));
    let cats = centroids.map(|c| {
        let cats: Vec<usize> = (0..n).map(|_| rng.random_range(0..c.nrows())).collect();
        for (mut row, &k) in z.rows_mut().into_iter().zip(&cats) {
            row += &c.row(k);
        }
        cats
    });
    (z, cats)
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct NoiseHeuristics {
    #[serde(default)]
    pub fake_noise: Option<NoiseSpec>,
    #[serde(default)]
    pub all_noise: Option<NoiseSpec>,
    #[serde(default)]
    pub label_flip_ratio: f64,
}

/// Adds fake-side noise to rows labeled fake, noise to every row, then
/// inverts exactly `round(label_flip_ratio * n)` distinct labels.
pub fn perturb_inputs<R: Rng + ?Sized>(
    batch: &Array2<f64>,
    roles: &[CriticRole],
    noise: &NoiseHeuristics,
    rng: &mut R,
) -> (Array2<f64>, Vec<CriticRole>) {
    let mut out = batch.clone();
    let mut roles = roles.to_vec();
    if let Some(ns) = &noise.fake_noise {
        for (mut row, role) in out.rows_mut().into_iter().zip(&roles) {
            if *role == CriticRole::Fake {
                row.mapv_inplace(|v| v + ns.draw(rng));
            }
        }
    }
    if let Some(ns) = &noise.all_noise {
        out.mapv_inplace(|v| v + ns.draw(rng));
    }
    let n = roles.len();
    let flips = ((noise.label_flip_ratio * n as f64).round() as usize).min(n);
    if flips > 0 {
        for i in sample(rng, n, flips) {
            roles[i] = match roles[i] {
                CriticRole::Real => CriticRole::Fake,
                CriticRole::Fake => CriticRole::Real,
            };
        }
    }
    (out, roles)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveSpec {
    pub min_ratio_fake_pass: f64,
    pub min_ratio_tp: f64,
    pub min_ratio_tn: f64,
    #[serde(default = "default_max_extra")]
    pub max_extra_cycles: usize,
}

fn default_max_extra() -> usize {
    50
}

impl Default for AdaptiveSpec {
    fn default() -> Self {
        AdaptiveSpec {
            min_ratio_fake_pass: 0.3,
            min_ratio_tp: 0.01,
            min_ratio_tn: 0.01,
            max_extra_cycles: 50,
        }
    }
}

impl AdaptiveSpec {
    /// One discriminator and one generator cycle per step.
    pub fn standard() -> Self {
        AdaptiveSpec {
            min_ratio_fake_pass: 0.0,
            min_ratio_tp: 0.0,
            min_ratio_tn: 0.0,
            max_extra_cycles: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GanConfig {
    pub generator: MlpSpec,
    pub discriminator: MlpSpec,
    pub latent: LatentSpec,
    pub minibatch_ratio: f64,
    #[serde(default)]
    pub adaptive: AdaptiveSpec,
    #[serde(default)]
    pub noise_heuristics: NoiseHeuristics,
    #[serde(default)]
    pub complementary_ratio: f64,
    pub generator_lr: f64,
    pub discriminator_lr: f64,
    pub seed: u64,
    #[serde(default)]
    pub scale_mode: ScaleMode,
    /// Keep every k-th step as a checkpoint (the final step is always kept).
    #[serde(default = "one_usize")]
    pub checkpoint_every: usize,
}

fn one_usize() -> usize {
    1
}

impl GanConfig {
    /// A small reference-style config: mixed tanh/leaky hidden layers with
    /// batch norm in the generator, leaky critic with a linear output.
    pub fn small(dimension: usize, latent: usize, hidden: &[usize], seed: u64) -> Self {
        let mut gw = vec![latent];
        gw.extend_from_slice(hidden);
        gw.push(dimension);
        let mut dw = vec![dimension];
        dw.extend_from_slice(hidden);
        dw.push(1);
        let generator = MlpSpec::chain(
            &gw,
            Activation::MixedTanhLeaky {
                tanh_fraction: 0.15,
                alpha: 0.15,
            },
            Activation::Linear,
        )
        .with_hidden(true, 0.0);
        let discriminator = MlpSpec::chain(
            &dw,
            Activation::LeakyRelu { alpha: 0.2 },
            Activation::Linear,
        )
        .with_l2(1e-3);
        GanConfig {
            generator,
            discriminator,
            latent: LatentSpec::normal(latent, 1.0),
            minibatch_ratio: 0.01,
            adaptive: AdaptiveSpec::default(),
            noise_heuristics: NoiseHeuristics::default(),
            complementary_ratio: 0.0,
            generator_lr: 1e-4,
            discriminator_lr: 1e-4,
            seed,
            scale_mode: ScaleMode::ZScore,
            checkpoint_every: 1,
        }
    }

    pub fn from_json(text: &str) -> Result<Self, GanError> {
        let cfg: GanConfig = serde_json::from_str(text)?;
        cfg.validate(None)?;
        Ok(cfg)
    }

    pub fn validate(&self, data_dimension: Option<usize>) -> Result<(), GanError> {
        let bad = |m: String| Err(GanError::InvalidConfig(m));
        self.generator.validate()?;
        self.discriminator.validate()?;
        if let Err(m) = self.latent.validate() {
            return bad(m);
        }
        if self.generator.input_width() != self.latent.dimension {
            return bad(format!(
                "generator input {} differs from latent dimension {}",
                self.generator.input_width(),
                self.latent.dimension
            ));
        }
        if self.generator.output_width() != self.discriminator.input_width() {
            return bad("generator output width differs from discriminator input width".into());
        }
        if let Some(d) = data_dimension {
            if self.generator.output_width() != d {
                return bad(format!(
                    "generator output width {} differs from data dimension {d}",
                    self.generator.output_width()
                ));
            }
        }
        let last = self.discriminator.layers.last().expect("validated");
        if last.output_width != 1 || last.activation != Activation::Linear {
            return bad("critic must end in one linear unit".into());
        }
        if !(self.minibatch_ratio > 0.0 && self.minibatch_ratio <= 1.0) {
            return bad(format!("minibatch_ratio {} outside (0, 1]", self.minibatch_ratio));
        }
        let a = &self.adaptive;
        for (name, v) in [
            ("min_ratio_fake_pass", a.min_ratio_fake_pass),
            ("min_ratio_tp", a.min_ratio_tp),
            ("min_ratio_tn", a.min_ratio_tn),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} {v} outside [0, 1]"));
            }
        }
        let n = &self.noise_heuristics;
        if !(0.0..=0.2).contains(&n.label_flip_ratio) {
            return bad(format!("label_flip_ratio {} outside [0, 0.2]", n.label_flip_ratio));
        }
        for (what, spec) in [("fake_noise", &n.fake_noise), ("all_noise", &n.all_noise)] {
            if let Some(s) = spec {
                if let Err(m) = s.validate(what) {
                    return bad(m);
                }
            }
        }
        if !(0.0..=0.5).contains(&self.complementary_ratio) {
            return bad(format!(
                "complementary_ratio {} outside [0, 0.5]",
                self.complementary_ratio
            ));
        }
        for (name, lr) in [
            ("generator_lr", self.generator_lr),
            ("discriminator_lr", self.discriminator_lr),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                return bad(format!("{name} {lr} must be positive"));
            }
        }
        if self.checkpoint_every == 0 {
            return bad("checkpoint_every must be at least 1".into());
        }
        Ok(())
    }

    pub fn batch_size(&self, rows: usize) -> usize {
        (self.minibatch_ratio * rows as f64).ceil() as usize
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainStepReport {
    pub step: u64,
    pub d_cycles: usize,
    pub g_cycles: usize,
    pub ratio_tp: f64,
    pub ratio_tn: f64,
    pub ratio_fake_pass: f64,
    pub d_loss: f64,
    pub g_loss: f64,
    /// The discriminator loop stopped at `max_extra_cycles`.
    pub d_flagged: bool,
    /// The generator loop stopped at `max_extra_cycles`.
    pub g_flagged: bool,
}

impl TrainStepReport {
    pub fn flagged(&self) -> bool {
        self.d_flagged || self.g_flagged
    }

    pub const CSV_HEADER: &'static str =
        "step,d_loss,g_loss,d_cycles,g_cycles,ratio_tp,ratio_tn,ratio_fake_pass,flagged";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:?},{:?},{},{},{:?},{:?},{:?},{}",
            self.step,
            self.d_loss,
            self.g_loss,
            self.d_cycles,
            self.g_cycles,
            self.ratio_tp,
            self.ratio_tn,
            self.ratio_fake_pass,
            u8::from(self.flagged())
        )
    }
}

/// Live networks and optimizer state of one training run.
#[derive(Debug, Clone)]
pub struct GanState {
    pub config: GanConfig,
    pub label: Label,
    pub scaler: ScalerParams,
    /// Features whose training values are all non-negative.
    pub non_negative: Vec<bool>,
    pub generator: Mlp,
    pub discriminator: Mlp,
    pub g_opt: OptimizerState,
    pub d_opt: OptimizerState,
    pub centroids: Option<Array2<f64>>,
    centroid_opt: Option<OptimizerState>,
    pub step: u64,
    pub poisoned: bool,
    /// Skip discriminator updates (used to exercise the cycle bound).
    pub freeze_discriminator: bool,
}

impl GanState {
    pub fn new<R: Rng + ?Sized>(
        config: GanConfig,
        label: Label,
        scaler: ScalerParams,
        non_negative: Vec<bool>,
        rng: &mut R,
    ) -> Result<Self, GanError> {
        config.validate(Some(scaler.dimension()))?;
        let generator = Mlp::new(config.generator.clone(), rng)?;
        let discriminator = Mlp::new(config.discriminator.clone(), rng)?;
        let centroids = config.latent.initial_centroids(rng);
        let centroid_opt = config
            .latent
            .embedding
            .as_ref()
            .filter(|e| e.trainable)
            .map(|_| OptimizerState::adam(config.generator_lr));
        Ok(GanState {
            g_opt: OptimizerState::adam(config.generator_lr),
            d_opt: OptimizerState::rmsprop(config.discriminator_lr),
            label,
            scaler,
            non_negative,
            generator,
            discriminator,
            centroids,
            centroid_opt,
            config,
            step: 0,
            poisoned: false,
            freeze_discriminator: false,
        })
    }

    fn latent<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> (Array2<f64>, Option<Vec<usize>>) {
        sample_latent(&self.config.latent, self.centroids.as_ref(), n, rng)
    }

    /// Train-mode generator output for `n` fresh latent rows; folds the
    /// batch statistics into the running statistics.
    fn fakes<R: Rng + ?Sized>(&mut self, n: usize, rng: &mut R) -> Result<Array2<f64>, GanError> {
        let (z, _) = self.latent(n, rng);
        let acts = self.generator.forward(&z, Mode::Train, rng)?;
        self.generator.update_running_stats(&acts);
        Ok(acts.output)
    }

    fn critic(&self, x: &Array2<f64>) -> Result<Vec<f64>, GanError> {
        Ok(self.discriminator.infer(x)?.column(0).to_vec())
    }

    fn discriminator_cycle<R: Rng + ?Sized>(
        &mut self,
        real: &Array2<f64>,
        complementary: Option<&Array2<f64>>,
        rng: &mut R,
    ) -> Result<f64, GanError> {
        let n = real.nrows();
        let fake = self.fakes(n, rng)?;
        let mut parts = vec![real.view(), fake.view()];
        let mut roles = vec![CriticRole::Real; n];
        roles.extend(std::iter::repeat_n(CriticRole::Fake, n));
        if let Some(c) = complementary {
            parts.push(c.view());
            roles.extend(std::iter::repeat_n(CriticRole::Fake, c.nrows()));
        }
        let batch = ndarray::concatenate(Axis(0), &parts).expect("equal widths");
        let (batch, roles) = perturb_inputs(&batch, &roles, &self.config.noise_heuristics, rng);
        let acts = self.discriminator.forward(&batch, Mode::Train, rng)?;
        let n_real = roles.iter().filter(|r| **r == CriticRole::Real).count();
        let n_fake = roles.len() - n_real;
        let mut loss = 0.0;
        let mut grad = Array2::zeros((roles.len(), 1));
        for (i, role) in roles.iter().enumerate() {
            let group = if *role == CriticRole::Real { n_real } else { n_fake } as f64;
            let s = role.sign() / group;
            loss += s * acts.output[[i, 0]];
            grad[[i, 0]] = s;
        }
        if !loss.is_finite() {
            return Err(self.poison("non-finite discriminator loss"));
        }
        if !self.freeze_discriminator {
            let g = self.discriminator.backward(&acts, &grad)?;
            self.discriminator.update_running_stats(&acts);
            self.discriminator.apply_gradients(&mut self.d_opt, &g)?;
        }
        Ok(loss)
    }

    fn generator_cycle<R: Rng + ?Sized>(&mut self, n: usize, rng: &mut R) -> Result<f64, GanError> {
        let (z, cats) = self.latent(n, rng);
        let g_acts = self.generator.forward(&z, Mode::Train, rng)?;
        // The critic runs in train mode but its statistics are left alone.
        let d_acts = self.discriminator.forward(&g_acts.output, Mode::Train, rng)?;
        let (loss, grad) = crate::nn::wasserstein_loss(
            d_acts.output.column(0).as_slice().expect("column of n x 1"),
            CriticRole::Real,
        );
        if !loss.is_finite() {
            return Err(self.poison("non-finite generator loss"));
        }
        let grad = Array2::from_shape_vec((n, 1), grad).expect("n x 1");
        let d_grads = self.discriminator.backward(&d_acts, &grad)?;
        let g_grads = self.generator.backward(&g_acts, &d_grads.input)?;
        self.generator.update_running_stats(&g_acts);
        self.generator.apply_gradients(&mut self.g_opt, &g_grads)?;
        if let (Some(c), Some(opt), Some(cats)) =
            (self.centroids.as_mut(), self.centroid_opt.as_mut(), cats)
        {
            let mut gc = Array2::<f64>::zeros(c.dim());
            for (row, &k) in g_grads.input.rows().into_iter().zip(&cats) {
                let mut target = gc.row_mut(k);
                target += &row;
            }
            opt.step(
                &mut [c.as_slice_mut().expect("standard layout")],
                &[gc.as_slice().expect("standard layout")],
            )?;
        }
        Ok(loss)
    }

    fn poison(&mut self, reason: &str) -> GanError {
        self.poisoned = true;
        GanError::Diverged {
            step: self.step,
            reason: reason.into(),
        }
    }

    /// One adaptive mini-batch step on scaled rows.
    pub fn train_minibatch<R: Rng + ?Sized>(
        &mut self,
        real: &Array2<f64>,
        complementary: Option<&Array2<f64>>,
        rng: &mut R,
    ) -> Result<TrainStepReport, GanError> {
        if self.poisoned {
            return Err(GanError::Diverged {
                step: self.step,
                reason: "state already poisoned".into(),
            });
        }
        let result = self.adaptive_step(real, complementary, rng);
        if let Err(GanError::Nn(NnError::NonFinite { .. })) = &result {
            self.poisoned = true;
        }
        result
    }

    fn adaptive_step<R: Rng + ?Sized>(
        &mut self,
        real: &Array2<f64>,
        complementary: Option<&Array2<f64>>,
        rng: &mut R,
    ) -> Result<TrainStepReport, GanError> {
        let n = real.nrows();
        let a = self.config.adaptive.clone();
        let mut rep = TrainStepReport {
            step: self.step,
            ..Default::default()
        };
        loop {
            rep.d_loss = self.discriminator_cycle(real, complementary, rng)?;
            rep.d_cycles += 1;
            let on_real = self.critic(real)?;
            let probe = self.fakes(n, rng)?;
            let on_fake = self.critic(&probe)?;
            rep.ratio_tp = on_real.iter().filter(|&&v| v > 0.0).count() as f64 / n as f64;
            rep.ratio_tn = on_fake.iter().filter(|&&v| v <= 0.0).count() as f64 / n as f64;
            if rep.ratio_tp >= a.min_ratio_tp && rep.ratio_tn >= a.min_ratio_tn {
                break;
            }
            if rep.d_cycles > a.max_extra_cycles {
                rep.d_flagged = true;
                break;
            }
        }
        loop {
            rep.g_loss = self.generator_cycle(n, rng)?;
            rep.g_cycles += 1;
            let probe = self.fakes(n, rng)?;
            let on_fake = self.critic(&probe)?;
            rep.ratio_fake_pass = on_fake.iter().filter(|&&v| v > 0.0).count() as f64 / n as f64;
            if rep.ratio_fake_pass >= a.min_ratio_fake_pass {
                break;
            }
            if rep.g_cycles > a.max_extra_cycles {
                rep.g_flagged = true;
                break;
            }
        }
        self.step += 1;
        Ok(rep)
    }

    pub fn checkpoint(&self, diagnostics: TrainStepReport) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            step: diagnostics.step,
            label: self.label,
            generator: self.generator.snapshot(),
            discriminator: self.discriminator.snapshot(),
            scaler: self.scaler.clone(),
            non_negative: self.non_negative.clone(),
            latent: self.config.latent.clone(),
            centroids: self
                .centroids
                .as_ref()
                .map(|c| c.rows().into_iter().map(|r| r.to_vec()).collect()),
            diagnostics,
        }
    }
}

const CHECKPOINT_FORMAT: &str = "flowgan-checkpoint-v1";

/// Frozen generator and critic after one mini-batch step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub step: u64,
    pub label: Label,
    pub generator: MlpSnapshot,
    pub discriminator: MlpSnapshot,
    pub scaler: ScalerParams,
    pub non_negative: Vec<bool>,
    pub latent: LatentSpec,
    pub centroids: Option<Vec<Vec<f64>>>,
    pub diagnostics: TrainStepReport,
}

impl Checkpoint {
    pub fn id(&self) -> String {
        format!("label{}-step{:06}", self.label.index(), self.step)
    }

    pub fn file_name(&self) -> String {
        format!("{}.json", self.id())
    }

    pub fn to_json(&self) -> Result<String, GanError> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self, GanError> {
        let ckpt: Checkpoint = serde_json::from_str(text)?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(GanError::InvalidConfig(format!(
                "unknown checkpoint format {}",
                ckpt.format
            )));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), GanError> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, GanError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn networks(&self) -> Result<Generator<'_>, GanError> {
        Ok(Generator {
            generator: Mlp::from_snapshot(&self.generator)?,
            discriminator: Mlp::from_snapshot(&self.discriminator)?,
            centroids: self.centroids.as_ref().map(|rows| {
                Array2::from_shape_vec((rows.len(), self.latent.dimension), rows.concat())
                    .expect("centroid rows share the latent width")
            }),
            checkpoint: self,
        })
    }

    pub fn generate<R: Rng + ?Sized>(
        &self,
        n: usize,
        options: &GenerateOptions,
        rng: &mut R,
    ) -> Result<FlowDataset, GanError> {
        self.networks()?.generate(n, options, rng)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CriticFilter {
    #[default]
    Off,
    /// Keep rows with critic output above zero.
    Positive,
    /// Keep rows whose critic output exceeds this percentile of the critic
    /// outputs on a calibration batch.
    Percentile { p: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateOptions {
    #[serde(default)]
    pub filter: CriticFilter,
    /// Drop rows with a negative value in a feature that is non-negative in
    /// the training data.
    #[serde(default)]
    pub clip_negatives: bool,
    /// Latent rows drawn per round.
    #[serde(default = "default_round")]
    pub round_size: usize,
}

fn default_round() -> usize {
    4096
}

impl Default for GenerateOptions {
    fn default() -> Self {
        GenerateOptions {
            filter: CriticFilter::Off,
            clip_negatives: false,
            round_size: default_round(),
        }
    }
}

/// Minimum acceptance rate before filtered generation gives up.
pub const MIN_ACCEPTANCE: f64 = 1e-3;

/// Networks rebuilt from a checkpoint.
pub struct Generator<'a> {
    pub generator: Mlp,
    pub discriminator: Mlp,
    pub centroids: Option<Array2<f64>>,
    checkpoint: &'a Checkpoint,
}

impl Generator<'_> {
    /// Scaled generator outputs for explicit latent rows.
    pub fn scaled_output(&self, z: &Array2<f64>) -> Result<Array2<f64>, GanError> {
        Ok(self.generator.infer(z)?)
    }

    pub fn critic(&self, scaled: ArrayView2<f64>) -> Result<Vec<f64>, GanError> {
        Ok(self
            .discriminator
            .infer(&scaled.to_owned())?
            .column(0)
            .to_vec())
    }

    pub fn generate<R: Rng + ?Sized>(
        &self,
        n: usize,
        options: &GenerateOptions,
        rng: &mut R,
    ) -> Result<FlowDataset, GanError> {
        if n == 0 {
            return Err(GanError::ZeroRows);
        }
        let ck = self.checkpoint;
        let d = ck.scaler.dimension();
        let round = options.round_size.max(1);
        let cut = match options.filter {
            CriticFilter::Off => None,
            CriticFilter::Positive => Some(0.0),
            CriticFilter::Percentile { p } => {
                let (z, _) = sample_latent(&ck.latent, self.centroids.as_ref(), round.max(n), rng);
                let mut scores = self.critic(self.scaled_output(&z)?.view())?;
                Some(percentile(&mut scores, p))
            }
        };
        let filtering = cut.is_some() || options.clip_negatives;
        let budget = if filtering {
            ((n as f64 / MIN_ACCEPTANCE).ceil() as usize).max(round)
        } else {
            n
        };
        let mut rows: Vec<f64> = Vec::with_capacity(n * d);
        let mut accepted = 0;
        let mut drawn = 0;
        while accepted < n && drawn < budget {
            let m = if filtering { round } else { n - accepted }.min(budget - drawn);
            let (z, _) = sample_latent(&ck.latent, self.centroids.as_ref(), m, rng);
            let out = self.scaled_output(&z)?;
            drawn += m;
            let keep_score = match cut {
                Some(c) => self.critic(out.view())?.into_iter().map(|s| s > c).collect(),
                None => vec![true; m],
            };
            for (row, keep) in out.rows().into_iter().zip(keep_score) {
                if accepted == n {
                    break;
                }
                if !keep {
                    continue;
                }
                let mut r = row.to_vec();
                ck.scaler.invert_row(&mut r);
                if options.clip_negatives
                    && r.iter().zip(&ck.non_negative).any(|(v, nn)| *nn && *v < 0.0)
                {
                    continue;
                }
                rows.extend_from_slice(&r);
                accepted += 1;
            }
        }
        if accepted < n {
            let filter = match (options.filter, options.clip_negatives) {
                (CriticFilter::Off, _) => "negative-value clip".to_string(),
                (f, false) => format!("critic filter {f:?}"),
                (f, true) => format!("critic filter {f:?} with negative-value clip"),
            };
            return Err(GanError::FilterStarved {
                filter,
                accepted,
                drawn,
                needed: n,
            });
        }
        Ok(FlowDataset::single_class(
            d,
            rows,
            ck.label,
            Lineage::synthetic(ck.id()),
        )?)
    }
}

/// Everything produced by one training run.
pub struct TrainOutcome {
    pub checkpoints: Vec<Checkpoint>,
    pub reports: Vec<TrainStepReport>,
    /// Set when training stopped early; the lists above are then partial.
    pub error: Option<GanError>,
    pub state: GanState,
}

/// Trains on one class for `steps` mini-batch steps, calling `on_checkpoint`
/// for every retained checkpoint. `complementary` holds real rows of the
/// other class and is used only when `complementary_ratio > 0`.
pub fn train(
    config: &GanConfig,
    data: &FlowDataset,
    complementary: Option<&FlowDataset>,
    steps: u64,
    mut on_checkpoint: impl FnMut(&Checkpoint),
) -> Result<TrainOutcome, GanError> {
    let counts = [
        data.class_count(Label::Normal),
        data.class_count(Label::Mining),
    ];
    let label = match counts {
        [n, 0] if n > 0 => Label::Normal,
        [0, m] if m > 0 => Label::Mining,
        _ => return Err(GanError::NotSingleClass(counts)),
    };
    config.validate(Some(data.dimension()))?;
    let rows = data.len();
    let bs = config.batch_size(rows);
    if bs < 2 {
        return Err(GanError::BatchTooSmall {
            size: bs,
            ratio: config.minibatch_ratio,
            rows,
        });
    }
    let d = data.dimension();
    let scaler = ScalerParams::fit(data, config.scale_mode)?;
    let scaled = scaler.apply(data)?;
    let non_negative = (0..d)
        .map(|j| data.column(j).all(|v| v >= 0.0))
        .collect();
    let comp = match complementary {
        Some(c) if config.complementary_ratio > 0.0 && !c.is_empty() => Some(scaler.apply(c)?),
        _ => None,
    };
    let n_comp = (config.complementary_ratio * bs as f64).round() as usize;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut state = GanState::new(config.clone(), label, scaler, non_negative, &mut rng)?;
    let mut order: Vec<usize> = Vec::new();
    let mut pos = 0;
    let mut outcome_ck = Vec::new();
    let mut reports = Vec::new();
    let mut error = None;
    for step in 0..steps {
        if pos + bs > order.len() {
            order = sample(&mut rng, rows, rows).into_vec();
            pos = 0;
        }
        let batch = gather(&scaled, &order[pos..pos + bs]);
        pos += bs;
        let comp_batch = match &comp {
            Some(c) if n_comp > 0 => {
                let idx: Vec<usize> = (0..n_comp).map(|_| rng.random_range(0..c.len())).collect();
                Some(gather(c, &idx))
            }
            _ => None,
        };
        match state.train_minibatch(&batch, comp_batch.as_ref(), &mut rng) {
            Ok(rep) => {
                let keep = step % config.checkpoint_every as u64 == 0 || step + 1 == steps;
                reports.push(rep.clone());
                if keep {
                    let ck = state.checkpoint(rep);
                    on_checkpoint(&ck);
                    outcome_ck.push(ck);
                }
            }
            Err(e) => {
                log::warn!("training stopped at step {step}: {e}");
                error = Some(e);
                break;
            }
        }
    }
    Ok(TrainOutcome {
        checkpoints: outcome_ck,
        reports,
        error,
        state,
    })
}

fn gather(ds: &FlowDataset, idx: &[usize]) -> Array2<f64> {
    let d = ds.dimension();
    let mut out = Array2::zeros((idx.len(), d));
    for (mut row, &i) in out.rows_mut().into_iter().zip(idx) {
        row.assign(&ndarray::ArrayView1::from(ds.row(i)));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_fixture, FixtureSpec};

    fn tiny_config(seed: u64) -> GanConfig {
        let mut c = GanConfig::small(4, 6, &[8], seed);
        c.minibatch_ratio = 0.05;
        c
    }

    fn class0() -> FlowDataset {
        let ds = synth_fixture(&FixtureSpec::cryptomining_like(400, 0, 9)).unwrap();
        crate::data::split_by_label(&ds).remove(&Label::Normal).unwrap()
    }

    #[test]
    fn latent_single_centroid_without_noise() {
        let mut spec = LatentSpec::normal(3, 0.0);
        spec.embedding = Some(EmbeddingSpec {
            categories: 1,
            trainable: false,
            centroid_scale: 1.0,
            centroids: Some(vec![vec![1.0, -2.0, 0.5]]),
        });
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = spec.initial_centroids(&mut rng).unwrap();
        let (z, cats) = sample_latent(&spec, Some(&c), 7, &mut rng);
        assert!(cats.unwrap().iter().all(|&k| k == 0));
        for row in z.rows() {
            assert_eq!(row.to_vec(), vec![1.0, -2.0, 0.5]);
        }
    }

    #[test]
    fn perturb_identity_when_disabled() {
        let batch = Array2::from_shape_fn((5, 2), |(i, j)| (i * 2 + j) as f64);
        let roles = vec![CriticRole::Real, CriticRole::Fake, CriticRole::Fake, CriticRole::Real, CriticRole::Fake];
        let (b, r) = perturb_inputs(
            &batch,
            &roles,
            &NoiseHeuristics::default(),
            &mut ChaCha8Rng::seed_from_u64(0),
        );
        assert_eq!(b, batch);
        assert_eq!(r, roles);
    }

    #[test]
    fn fake_noise_touches_only_fake_rows() {
        let batch = Array2::zeros((4, 3));
        let roles = vec![CriticRole::Real, CriticRole::Fake, CriticRole::Real, CriticRole::Fake];
        let noise = NoiseHeuristics {
            fake_noise: Some(NoiseSpec::normal(1.0)),
            ..Default::default()
        };
        let (b, _) = perturb_inputs(&batch, &roles, &noise, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(b.row(0).iter().all(|&v| v == 0.0));
        assert!(b.row(1).iter().any(|&v| v != 0.0));
    }

    #[test]
    fn label_flip_count() {
        let batch = Array2::zeros((100, 1));
        let roles = vec![CriticRole::Real; 100];
        let noise = NoiseHeuristics {
            label_flip_ratio: 0.1,
            ..Default::default()
        };
        let (_, r) = perturb_inputs(&batch, &roles, &noise, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(r.iter().filter(|x| **x == CriticRole::Fake).count(), 10);
    }

    #[test]
    fn config_validation() {
        let mut c = tiny_config(0);
        c.latent.dimension = 5;
        assert!(c.validate(Some(4)).is_err());
        let c = tiny_config(0);
        assert!(c.validate(Some(3)).is_err());
        c.validate(Some(4)).unwrap();
        let mut c = tiny_config(0);
        c.noise_heuristics.label_flip_ratio = 0.3;
        assert!(c.validate(None).is_err());
        let text = serde_json::to_string(&tiny_config(3)).unwrap();
        assert_eq!(GanConfig::from_json(&text).unwrap(), tiny_config(3));
    }

    #[test]
    fn standard_step_runs_one_cycle_each() {
        let mut c = tiny_config(1);
        c.adaptive = AdaptiveSpec::standard();
        let out = train(&c, &class0(), None, 4, |_| {}).unwrap();
        assert!(out.error.is_none());
        for r in &out.reports {
            assert_eq!((r.d_cycles, r.g_cycles), (1, 1));
        }
    }

    #[test]
    fn one_checkpoint_per_step() {
        let out = train(&tiny_config(2), &class0(), None, 3, |_| {}).unwrap();
        let steps: Vec<u64> = out.checkpoints.iter().map(|c| c.step).collect();
        assert_eq!(steps, vec![0, 1, 2]);
    }

    #[test]
    fn thinned_checkpoints_keep_last() {
        let mut c = tiny_config(2);
        c.checkpoint_every = 3;
        let out = train(&c, &class0(), None, 7, |_| {}).unwrap();
        let steps: Vec<u64> = out.checkpoints.iter().map(|c| c.step).collect();
        assert_eq!(steps, vec![0, 3, 6]);
        let out = train(&c, &class0(), None, 5, |_| {}).unwrap();
        let steps: Vec<u64> = out.checkpoints.iter().map(|c| c.step).collect();
        assert_eq!(steps, vec![0, 3, 4]);
    }

    #[test]
    fn multi_class_data_rejected() {
        let ds = synth_fixture(&FixtureSpec::cryptomining_like(20, 20, 0)).unwrap();
        assert!(matches!(
            train(&tiny_config(0), &ds, None, 1, |_| {}),
            Err(GanError::NotSingleClass(_))
        ));
    }

    #[test]
    fn tiny_batch_rejected() {
        let mut c = tiny_config(0);
        c.minibatch_ratio = 0.001;
        assert!(matches!(
            train(&c, &class0(), None, 1, |_| {}),
            Err(GanError::BatchTooSmall { .. })
        ));
    }

    #[test]
    fn generate_exact_count_and_filter() {
        let out = train(&tiny_config(4), &class0(), None, 5, |_| {}).unwrap();
        let ck = out.checkpoints.last().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let ds = ck.generate(5, &GenerateOptions::default(), &mut rng).unwrap();
        assert_eq!(ds.len(), 5);
        assert_eq!(ds.class_count(Label::Normal), 5);
        let opts = GenerateOptions {
            filter: CriticFilter::Positive,
            ..Default::default()
        };
        if let Ok(ds) = ck.generate(50, &opts, &mut rng) {
            let nets = ck.networks().unwrap();
            let scaled = ck.scaler.apply(&ds).unwrap();
            assert!(nets.critic(scaled.view()).unwrap().iter().all(|&v| v > 0.0 || v.abs() < 1e-9));
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let out = train(&tiny_config(6), &class0(), None, 3, |_| {}).unwrap();
        let ck = out.checkpoints.last().unwrap();
        let back = Checkpoint::from_json(&ck.to_json().unwrap()).unwrap();
        assert_eq!(&back, ck);
        let z = sample_latent(&ck.latent, None, 16, &mut ChaCha8Rng::seed_from_u64(3)).0;
        let a = ck.networks().unwrap().scaled_output(&z).unwrap();
        let b = back.networks().unwrap().scaled_output(&z).unwrap();
        assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
