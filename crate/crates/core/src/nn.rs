//! Small fully-connected network engine: forward/backward with batch norm,
//! dropout and L2, Adam and RMSProp, the Wasserstein critic loss, and a
//! finite-difference gradient checker.
//!
//! Each layer computes `z = x W (+ b)`, optionally batch-normalizes `z`
//! (`y = gamma * z_hat + beta`), applies its activation, then inverted
//! dropout. A batch-normalized layer carries no bias of its own since `beta`
//! already absorbs any shift.

use ndarray::{Array1, Array2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const BATCH_NORM_MOMENTUM: f64 = 0.99;
pub const BATCH_NORM_EPSILON: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum NnError {
    #[error("width mismatch: expected {expected} columns, got {found}")]
    WidthMismatch { expected: usize, found: usize },
    #[error("layer {layer} produced a non-finite value")]
    NonFinite { layer: usize },
    #[error("activations were recorded at revision {recorded}, network is at {current}")]
    StaleActivations { recorded: u64, current: u64 },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
    #[error("unsupported snapshot: {0}")]
    Snapshot(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Activation {
    Linear,
    Tanh,
    LeakyRelu {
        alpha: f64,
    },
    /// The first `ceil(tanh_fraction * width)` units use tanh, the rest
    /// leaky ReLU.
    MixedTanhLeaky {
        tanh_fraction: f64,
        alpha: f64,
    },
    /// Leaky ReLU with a very small negative slope, used on generator outputs
    /// whose real-domain values are non-negative.
    CustomOutputLeaky {
        alpha_small: f64,
    },
}

impl Activation {
    pub const DEFAULT_ALPHA_SMALL: f64 = 0.01;

    pub fn custom_output() -> Self {
        Activation::CustomOutputLeaky {
            alpha_small: Self::DEFAULT_ALPHA_SMALL,
        }
    }

    fn validate(&self) -> Result<(), String> {
        match *self {
            Activation::LeakyRelu { alpha } | Activation::CustomOutputLeaky { alpha_small: alpha }
                if !(alpha >= 0.0 && alpha.is_finite()) =>
            {
                Err(format!("negative slope {alpha} must be >= 0"))
            }
            Activation::MixedTanhLeaky {
                tanh_fraction,
                alpha,
            } if !((0.0..=1.0).contains(&tanh_fraction) && alpha >= 0.0 && alpha.is_finite()) => {
                Err(format!(
                    "mixed activation needs tanh_fraction in [0,1] and alpha >= 0, got ({tanh_fraction}, {alpha})"
                ))
            }
            _ => Ok(()),
        }
    }

    fn unit_kinds(&self, width: usize) -> Vec<UnitKind> {
        match *self {
            Activation::Linear => vec![UnitKind::Linear; width],
            Activation::Tanh => vec![UnitKind::Tanh; width],
            Activation::LeakyRelu { alpha } => vec![UnitKind::Leaky(alpha); width],
            Activation::CustomOutputLeaky { alpha_small } => {
                vec![UnitKind::Leaky(alpha_small); width]
            }
            Activation::MixedTanhLeaky {
                tanh_fraction,
                alpha,
            } => {
                let n_tanh = ((tanh_fraction * width as f64).ceil() as usize).min(width);
                (0..width)
                    .map(|u| {
                        if u < n_tanh {
                            UnitKind::Tanh
                        } else {
                            UnitKind::Leaky(alpha)
                        }
                    })
                    .collect()
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum UnitKind {
    Linear,
    Tanh,
    Leaky(f64),
}

impl UnitKind {
    #[inline]
    fn apply(self, y: f64) -> f64 {
        match self {
            UnitKind::Linear => y,
            UnitKind::Tanh => y.tanh(),
            UnitKind::Leaky(a) => {
                if y > 0.0 {
                    y
                } else {
                    a * y
                }
            }
        }
    }

    #[inline]
    fn derivative(self, y: f64, a_out: f64) -> f64 {
        match self {
            UnitKind::Linear => 1.0,
            UnitKind::Tanh => 1.0 - a_out * a_out,
            UnitKind::Leaky(a) => {
                if y > 0.0 {
                    1.0
                } else {
                    a
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub input_width: usize,
    pub output_width: usize,
    pub activation: Activation,
    #[serde(default)]
    pub batch_norm: bool,
    #[serde(default)]
    pub dropout_rate: f64,
}

impl LayerSpec {
    pub fn new(input_width: usize, output_width: usize, activation: Activation) -> Self {
        LayerSpec {
            input_width,
            output_width,
            activation,
            batch_norm: false,
            dropout_rate: 0.0,
        }
    }

    pub fn with_batch_norm(mut self, on: bool) -> Self {
        self.batch_norm = on;
        self
    }

    pub fn with_dropout(mut self, rate: f64) -> Self {
        self.dropout_rate = rate;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layers: Vec<LayerSpec>,
    #[serde(default)]
    pub l2_coefficient: f64,
}

impl MlpSpec {
    /// Chains `widths` with `hidden` on every hidden layer and `output` on
    /// the last one.
    pub fn chain(widths: &[usize], hidden: Activation, output: Activation) -> Self {
        let n = widths.len().saturating_sub(1);
        let layers = (0..n)
            .map(|i| {
                let act = if i + 1 == n { output } else { hidden };
                LayerSpec::new(widths[i], widths[i + 1], act)
            })
            .collect();
        MlpSpec {
            layers,
            l2_coefficient: 0.0,
        }
    }

    /// Enables batch norm and dropout on every hidden layer.
    pub fn with_hidden(mut self, batch_norm: bool, dropout_rate: f64) -> Self {
        let n = self.layers.len();
        for l in self.layers.iter_mut().take(n.saturating_sub(1)) {
            l.batch_norm = batch_norm;
            l.dropout_rate = dropout_rate;
        }
        self
    }

    pub fn with_l2(mut self, l2: f64) -> Self {
        self.l2_coefficient = l2;
        self
    }

    pub fn input_width(&self) -> usize {
        self.layers.first().map_or(0, |l| l.input_width)
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map_or(0, |l| l.output_width)
    }

    pub fn validate(&self) -> Result<(), NnError> {
        let bad = |m: String| Err(NnError::InvalidSpec(m));
        if self.layers.is_empty() {
            return bad("no layers".into());
        }
        if !(self.l2_coefficient >= 0.0 && self.l2_coefficient.is_finite()) {
            return bad(format!("l2 coefficient {} must be >= 0", self.l2_coefficient));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.input_width == 0 || l.output_width == 0 {
                return bad(format!("layer {i} has a zero width"));
            }
            if !(0.0..1.0).contains(&l.dropout_rate) {
                return bad(format!("layer {i} dropout {} outside [0,1)", l.dropout_rate));
            }
            l.activation
                .validate()
                .map_err(|m| NnError::InvalidSpec(format!("layer {i}: {m}")))?;
            if i > 0 && self.layers[i - 1].output_width != l.input_width {
                return bad(format!(
                    "layer {} outputs {} but layer {i} expects {}",
                    i - 1,
                    self.layers[i - 1].output_width,
                    l.input_width
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
}

impl BatchNorm {
    fn new(width: usize) -> Self {
        BatchNorm {
            gamma: Array1::ones(width),
            beta: Array1::zeros(width),
            running_mean: Array1::zeros(width),
            running_var: Array1::ones(width),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    spec: LayerSpec,
    units: Vec<UnitKind>,
    /// `input_width x output_width`.
    pub weights: Array2<f64>,
    /// Zero-length when the layer is batch-normalized.
    pub bias: Array1<f64>,
    pub norm: Option<BatchNorm>,
}

impl Layer {
    fn new(spec: LayerSpec) -> Self {
        let units = spec.activation.unit_kinds(spec.output_width);
        let (bias, norm) = if spec.batch_norm {
            (Array1::zeros(0), Some(BatchNorm::new(spec.output_width)))
        } else {
            (Array1::zeros(spec.output_width), None)
        };
        Layer {
            weights: Array2::zeros((spec.input_width, spec.output_width)),
            units,
            bias,
            norm,
            spec,
        }
    }

    pub fn spec(&self) -> &LayerSpec {
        &self.spec
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics and sampled dropout masks.
    Train,
    /// Running statistics; dropout is the identity.
    Infer,
}

/// Per-layer dropout masks already scaled by `1 / (1 - rate)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMasks(pub Vec<Option<Array2<f64>>>);

#[derive(Debug, Clone)]
struct LayerCache {
    input: Array2<f64>,
    /// Normalized pre-activation, only for batch-normalized layers.
    z_hat: Option<Array2<f64>>,
    /// Per-unit `1 / sqrt(var + eps)` used for normalization.
    inv_std: Option<Array1<f64>>,
    batch_mean: Option<Array1<f64>>,
    batch_var: Option<Array1<f64>>,
    /// Input to the activation function.
    pre_activation: Array2<f64>,
    activated: Array2<f64>,
    mask: Option<Array2<f64>>,
}

/// Everything `backward` needs from one forward pass.
#[derive(Debug, Clone)]
pub struct Activations {
    revision: u64,
    mode: Mode,
    caches: Vec<LayerCache>,
    pub output: Array2<f64>,
}

impl Activations {
    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn masks(&self) -> DropoutMasks {
        DropoutMasks(self.caches.iter().map(|c| c.mask.clone()).collect())
    }

    /// Signs of every leaky-unit pre-activation, in layer/row/unit order.
    fn kink_pattern(&self, net: &Mlp) -> Vec<bool> {
        let mut out = Vec::new();
        for (layer, cache) in net.layers.iter().zip(&self.caches) {
            for row in cache.pre_activation.rows() {
                for (u, &y) in row.iter().enumerate() {
                    if let UnitKind::Leaky(_) = layer.units[u] {
                        out.push(y > 0.0);
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradients {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub gamma: Option<Array1<f64>>,
    pub beta: Option<Array1<f64>>,
}

/// Partial derivatives of a scalar loss, shaped like the network.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGradients>,
    /// Derivative with respect to the network input.
    pub input: Array2<f64>,
}

impl Gradients {
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for g in &self.layers {
            out.push(g.weights.as_slice().expect("standard layout"));
            out.push(g.bias.as_slice().expect("standard layout"));
            if let (Some(gm), Some(bt)) = (&g.gamma, &g.beta) {
                out.push(gm.as_slice().expect("standard layout"));
                out.push(bt.as_slice().expect("standard layout"));
            }
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

/// A multilayer perceptron with its weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    spec: MlpSpec,
    layers: Vec<Layer>,
    revision: u64,
}

impl Mlp {
    /// Zero weights, zero biases, unit batch-norm scale.
    pub fn zeros(spec: MlpSpec) -> Result<Self, NnError> {
        spec.validate()?;
        let layers = spec.layers.iter().cloned().map(Layer::new).collect();
        Ok(Mlp {
            spec,
            layers,
            revision: 0,
        })
    }

    /// Weights uniform in `±sqrt(6 / (fan_in + fan_out))`, biases zero.
    pub fn new<R: Rng + ?Sized>(spec: MlpSpec, rng: &mut R) -> Result<Self, NnError> {
        let mut net = Self::zeros(spec)?;
        for layer in &mut net.layers {
            let (fan_in, fan_out) = layer.weights.dim();
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            layer
                .weights
                .mapv_inplace(|_| rng.random_range(-limit..=limit));
        }
        Ok(net)
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        self.revision += 1;
        &mut self.layers
    }

    pub fn revision(&self) -> u64 {
        self.revision
    }

    pub fn input_width(&self) -> usize {
        self.spec.input_width()
    }

    pub fn output_width(&self) -> usize {
        self.spec.output_width()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| {
                l.weights.len() + l.bias.len() + l.norm.as_ref().map_or(0, |n| 2 * n.gamma.len())
            })
            .sum()
    }

    /// Forward pass. In train mode dropout masks are drawn from `rng`.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        x: &Array2<f64>,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Activations, NnError> {
        self.forward_impl(x, mode, &mut |layer: usize, shape: (usize, usize), rate: f64| {
            let _ = layer;
            let keep = 1.0 - rate;
            Some(Array2::from_shape_simple_fn(shape, || {
                if rng.random::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            }))
        })
    }

    /// Train-mode forward pass reusing previously drawn dropout masks.
    pub fn forward_with_masks(
        &self,
        x: &Array2<f64>,
        masks: &DropoutMasks,
    ) -> Result<Activations, NnError> {
        self.forward_impl(x, Mode::Train, &mut |layer: usize, shape, _| {
            masks
                .0
                .get(layer)
                .cloned()
                .flatten()
                .filter(|m| m.dim() == shape)
        })
    }

    /// Inference-mode output.
    pub fn infer(&self, x: &Array2<f64>) -> Result<Array2<f64>, NnError> {
        let acts = self.forward_impl(x, Mode::Infer, &mut |_, _, _| None)?;
        Ok(acts.output)
    }

    fn forward_impl(
        &self,
        x: &Array2<f64>,
        mode: Mode,
        mask_source: &mut dyn FnMut(usize, (usize, usize), f64) -> Option<Array2<f64>>,
    ) -> Result<Activations, NnError> {
        if x.ncols() != self.input_width() {
            return Err(NnError::WidthMismatch {
                expected: self.input_width(),
                found: x.ncols(),
            });
        }
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut current = x.clone();
        for (li, layer) in self.layers.iter().enumerate() {
            let mut z = current.dot(&layer.weights);
            if layer.norm.is_none() {
                z += &layer.bias;
            }
            let (mut z_hat, mut inv_std, mut batch_mean, mut batch_var) = (None, None, None, None);
            let pre = match &layer.norm {
                None => z,
                Some(bn) => {
                    let (mean, var) = match mode {
                        Mode::Train => {
                            let mean = z.mean_axis(Axis(0)).expect("non-empty batch");
                            let var = z.var_axis(Axis(0), 0.0);
                            batch_mean = Some(mean.clone());
                            batch_var = Some(var.clone());
                            (mean, var)
                        }
                        Mode::Infer => (bn.running_mean.clone(), bn.running_var.clone()),
                    };
                    let istd = var.mapv(|v| 1.0 / (v + BATCH_NORM_EPSILON).sqrt());
                    let zh = (&z - &mean) * &istd;
                    let y = &zh * &bn.gamma + &bn.beta;
                    z_hat = Some(zh);
                    inv_std = Some(istd);
                    y
                }
            };
            let mut activated = pre.clone();
            for mut row in activated.rows_mut() {
                for (v, unit) in row.iter_mut().zip(&layer.units) {
                    *v = unit.apply(*v);
                }
            }
            let mask = if mode == Mode::Train && layer.spec.dropout_rate > 0.0 {
                mask_source(li, activated.dim(), layer.spec.dropout_rate)
            } else {
                None
            };
            let output = match &mask {
                Some(m) => &activated * m,
                None => activated.clone(),
            };
            if output.iter().any(|v| !v.is_finite()) {
                return Err(NnError::NonFinite { layer: li });
            }
            caches.push(LayerCache {
                input: current,
                z_hat,
                inv_std,
                batch_mean,
                batch_var,
                pre_activation: pre,
                activated,
                mask,
            });
            current = output;
        }
        Ok(Activations {
            revision: self.revision,
            mode,
            caches,
            output: current,
        })
    }

    /// Backpropagates `loss_grad` (dLoss/dOutput). Weight gradients include
    /// the L2 term `l2_coefficient * W`.
    pub fn backward(
        &self,
        acts: &Activations,
        loss_grad: &Array2<f64>,
    ) -> Result<Gradients, NnError> {
        if acts.revision != self.revision || acts.caches.len() != self.layers.len() {
            return Err(NnError::StaleActivations {
                recorded: acts.revision,
                current: self.revision,
            });
        }
        if loss_grad.dim() != acts.output.dim() {
            return Err(NnError::ShapeMismatch(format!(
                "loss gradient {:?} vs output {:?}",
                loss_grad.dim(),
                acts.output.dim()
            )));
        }
        let l2 = self.spec.l2_coefficient;
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut upstream = loss_grad.clone();
        for (layer, cache) in self.layers.iter().zip(&acts.caches).rev() {
            if let Some(m) = &cache.mask {
                upstream *= m;
            }
            // d(activation input)
            let mut d_pre = upstream;
            Zip::from(d_pre.rows_mut())
                .and(cache.pre_activation.rows())
                .and(cache.activated.rows())
                .for_each(|mut g, y, a| {
                    for (u, gv) in g.iter_mut().enumerate() {
                        *gv *= layer.units[u].derivative(y[u], a[u]);
                    }
                });
            let (d_z, d_gamma, d_beta) = match (&layer.norm, &cache.z_hat, &cache.inv_std) {
                (Some(bn), Some(z_hat), Some(inv_std)) => {
                    let d_gamma = (&d_pre * z_hat).sum_axis(Axis(0));
                    let d_beta = d_pre.sum_axis(Axis(0));
                    let d_zhat = &d_pre * &bn.gamma;
                    let d_z = match acts.mode {
                        Mode::Train => {
                            let n = d_zhat.nrows() as f64;
                            let sum_d = d_zhat.sum_axis(Axis(0));
                            let sum_dx = (&d_zhat * z_hat).sum_axis(Axis(0));
                            let mut d_z = d_zhat * n - &sum_d - &(z_hat * &sum_dx);
                            d_z *= &(inv_std / n);
                            d_z
                        }
                        Mode::Infer => d_zhat * inv_std,
                    };
                    (d_z, Some(d_gamma), Some(d_beta))
                }
                _ => (d_pre, None, None),
            };
            let mut d_w = standard(cache.input.t().dot(&d_z));
            if l2 > 0.0 {
                d_w.scaled_add(l2, &layer.weights);
            }
            let d_b = if layer.norm.is_none() {
                d_z.sum_axis(Axis(0))
            } else {
                Array1::zeros(0)
            };
            upstream = d_z.dot(&layer.weights.t());
            grads.push(LayerGradients {
                weights: d_w,
                bias: d_b,
                gamma: d_gamma,
                beta: d_beta,
            });
        }
        grads.reverse();
        let out = Gradients {
            layers: grads,
            input: upstream,
        };
        if !out.all_finite() {
            return Err(NnError::NonFinite {
                layer: self.layers.len(),
            });
        }
        Ok(out)
    }

    /// Folds the batch statistics of a train-mode pass into the running
    /// statistics used at inference.
    pub fn update_running_stats(&mut self, acts: &Activations) {
        for (layer, cache) in self.layers.iter_mut().zip(&acts.caches) {
            if let (Some(bn), Some(mean), Some(var)) =
                (&mut layer.norm, &cache.batch_mean, &cache.batch_var)
            {
                let m = BATCH_NORM_MOMENTUM;
                Zip::from(&mut bn.running_mean)
                    .and(mean)
                    .for_each(|r, &b| *r = m * *r + (1.0 - m) * b);
                Zip::from(&mut bn.running_var)
                    .and(var)
                    .for_each(|r, &b| *r = m * *r + (1.0 - m) * b);
            }
        }
    }

    /// `0.5 * l2 * sum(W^2)`, the penalty whose gradient `backward` adds.
    pub fn l2_penalty(&self) -> f64 {
        let l2 = self.spec.l2_coefficient;
        if l2 == 0.0 {
            return 0.0;
        }
        0.5 * l2
            * self
                .layers
                .iter()
                .map(|l| l.weights.iter().map(|w| w * w).sum::<f64>())
                .sum::<f64>()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for l in &mut self.layers {
            if !l.weights.is_standard_layout() {
                l.weights = standard(std::mem::take(&mut l.weights));
            }
            out.push(l.weights.as_slice_mut().expect("standard layout"));
            out.push(l.bias.as_slice_mut().expect("standard layout"));
            if let Some(bn) = &mut l.norm {
                out.push(bn.gamma.as_slice_mut().expect("standard layout"));
                out.push(bn.beta.as_slice_mut().expect("standard layout"));
            }
        }
        out
    }

    /// One optimizer update. Invalidates outstanding activation records.
    pub fn apply_gradients(
        &mut self,
        opt: &mut OptimizerState,
        grads: &Gradients,
    ) -> Result<(), NnError> {
        let g = grads.tensors();
        let mut p = self.tensors_mut();
        opt.step(&mut p, &g)?;
        self.revision += 1;
        Ok(())
    }

    pub fn snapshot(&self) -> MlpSnapshot {
        MlpSnapshot {
            format: SNAPSHOT_FORMAT.into(),
            version: SNAPSHOT_VERSION,
            spec: self.spec.clone(),
            batch_norm_momentum: BATCH_NORM_MOMENTUM,
            batch_norm_epsilon: BATCH_NORM_EPSILON,
            layers: self
                .layers
                .iter()
                .map(|l| LayerSnapshot {
                    weights: l.weights.iter().copied().collect(),
                    bias: l.bias.to_vec(),
                    batch_norm: l.norm.as_ref().map(|bn| BatchNormSnapshot {
                        gamma: bn.gamma.to_vec(),
                        beta: bn.beta.to_vec(),
                        running_mean: bn.running_mean.to_vec(),
                        running_var: bn.running_var.to_vec(),
                    }),
                })
                .collect(),
        }
    }

    pub fn from_snapshot(snap: &MlpSnapshot) -> Result<Self, NnError> {
        if snap.format != SNAPSHOT_FORMAT || snap.version != SNAPSHOT_VERSION {
            return Err(NnError::Snapshot(format!(
                "{} v{} (expected {SNAPSHOT_FORMAT} v{SNAPSHOT_VERSION})",
                snap.format, snap.version
            )));
        }
        let mut net = Mlp::zeros(snap.spec.clone())?;
        if snap.layers.len() != net.layers.len() {
            return Err(NnError::Snapshot("layer count".into()));
        }
        for (i, (layer, s)) in net.layers.iter_mut().zip(&snap.layers).enumerate() {
            let shape = layer.weights.dim();
            layer.weights = Array2::from_shape_vec(shape, s.weights.clone())
                .map_err(|e| NnError::Snapshot(format!("layer {i} weights: {e}")))?;
            if s.bias.len() != layer.bias.len() {
                return Err(NnError::Snapshot(format!("layer {i} bias length")));
            }
            layer.bias = Array1::from(s.bias.clone());
            match (&mut layer.norm, &s.batch_norm) {
                (Some(bn), Some(sb)) => {
                    let w = bn.gamma.len();
                    for v in [&sb.gamma, &sb.beta, &sb.running_mean, &sb.running_var] {
                        if v.len() != w {
                            return Err(NnError::Snapshot(format!("layer {i} batch norm width")));
                        }
                    }
                    bn.gamma = Array1::from(sb.gamma.clone());
                    bn.beta = Array1::from(sb.beta.clone());
                    bn.running_mean = Array1::from(sb.running_mean.clone());
                    bn.running_var = Array1::from(sb.running_var.clone());
                }
                (None, None) => {}
                _ => return Err(NnError::Snapshot(format!("layer {i} batch norm flag"))),
            }
        }
        Ok(net)
    }
}

fn standard(a: Array2<f64>) -> Array2<f64> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

const SNAPSHOT_FORMAT: &str = "flowgan-mlp";
const SNAPSHOT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNormSnapshot {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSnapshot {
    /// Row-major `input_width x output_width`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub batch_norm: Option<BatchNormSnapshot>,
}

/// Versioned, serializable network weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSnapshot {
    pub format: String,
    pub version: u32,
    pub spec: MlpSpec,
    pub batch_norm_momentum: f64,
    pub batch_norm_epsilon: f64,
    pub layers: Vec<LayerSnapshot>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    RmsProp,
}

/// Optimizer hyperparameters plus per-parameter moment accumulators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// RMSProp decay of the squared-gradient average.
    pub rho: f64,
    pub epsilon: f64,
    pub step: u64,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn adam(learning_rate: f64) -> Self {
        Self::new(OptimizerKind::Adam, learning_rate)
    }

    pub fn rmsprop(learning_rate: f64) -> Self {
        Self::new(OptimizerKind::RmsProp, learning_rate)
    }

    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Self {
        OptimizerState {
            kind,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            rho: 0.9,
            epsilon: 1e-8,
            step: 0,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        }
    }

    /// Updates `params` in place. Accumulators are allocated on the first
    /// call and must keep the same shapes afterwards.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<(), NnError> {
        if params.len() != grads.len() {
            return Err(NnError::ShapeMismatch(format!(
                "{} parameter tensors, {} gradient tensors",
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() {
                return Err(NnError::ShapeMismatch(format!(
                    "tensor {i}: {} parameters, {} gradients",
                    p.len(),
                    g.len()
                )));
            }
        }
        if self.second_moment.is_empty() {
            self.second_moment = params.iter().map(|p| vec![0.0; p.len()]).collect();
            if self.kind == OptimizerKind::Adam {
                self.first_moment = self.second_moment.clone();
            }
        } else if self.second_moment.len() != params.len()
            || self
                .second_moment
                .iter()
                .zip(params.iter())
                .any(|(v, p)| v.len() != p.len())
        {
            return Err(NnError::ShapeMismatch(
                "accumulators do not match parameters".into(),
            ));
        }
        self.step += 1;
        let lr = self.learning_rate;
        let eps = self.epsilon;
        match self.kind {
            OptimizerKind::Adam => {
                let (b1, b2) = (self.beta1, self.beta2);
                let c1 = 1.0 - b1.powi(self.step as i32);
                let c2 = 1.0 - b2.powi(self.step as i32);
                for (t, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    let m = &mut self.first_moment[t];
                    let v = &mut self.second_moment[t];
                    for k in 0..p.len() {
                        m[k] = b1 * m[k] + (1.0 - b1) * g[k];
                        v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
                        let m_hat = m[k] / c1;
                        let v_hat = v[k] / c2;
                        p[k] -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
            OptimizerKind::RmsProp => {
                let rho = self.rho;
                for (t, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    let v = &mut self.second_moment[t];
                    for k in 0..p.len() {
                        v[k] = rho * v[k] + (1.0 - rho) * g[k] * g[k];
                        p[k] -= lr * g[k] / (v[k] + eps).sqrt();
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CriticRole {
    Real,
    Fake,
}

impl CriticRole {
    pub fn sign(self) -> f64 {
        match self {
            CriticRole::Real => -1.0,
            CriticRole::Fake => 1.0,
        }
    }
}

/// Wasserstein critic loss `mean(sign * out)` with sign -1 for real rows and
/// +1 for fake rows, and its gradient `sign / n`.
pub fn wasserstein_loss(critic_out: &[f64], role: CriticRole) -> (f64, Vec<f64>) {
    let n = critic_out.len();
    if n == 0 {
        return (0.0, Vec::new());
    }
    let s = role.sign();
    let loss = s * critic_out.iter().sum::<f64>() / n as f64;
    (loss, vec![s / n as f64; n])
}

/// Denominator floor of the relative error. Some gradients vanish exactly,
/// e.g. the shift of a layer whose output feeds a batch-normalized linear
/// layer; both estimates are then rounding noise and are compared
/// absolutely.
pub const GRAD_CHECK_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub checked: usize,
    /// Parameters skipped because the perturbation moved a leaky unit across
    /// its kink at zero.
    pub excluded_at_kink: usize,
}

/// Compares analytic gradients with central differences over every
/// parameter. `loss` maps the network output to `(loss, dLoss/dOutput)`;
/// the L2 penalty is added automatically. Dropout masks are drawn once from
/// `rng` and frozen for all evaluations.
pub fn grad_check<R, F>(
    net: &Mlp,
    batch: &Array2<f64>,
    loss: F,
    eps: f64,
    rng: &mut R,
) -> Result<GradCheckReport, NnError>
where
    R: Rng + ?Sized,
    F: Fn(&Array2<f64>) -> (f64, Array2<f64>),
{
    assert!(
        (1e-7..=1e-3).contains(&eps),
        "finite-difference step {eps} outside [1e-7, 1e-3]"
    );
    let acts = net.forward(batch, Mode::Train, rng)?;
    let masks = acts.masks();
    let (_, dl) = loss(&acts.output);
    let analytic = net.backward(&acts, &dl)?;
    let analytic: Vec<f64> = analytic
        .tensors()
        .iter()
        .flat_map(|t| t.iter().copied())
        .collect();

    let mut probe = net.clone();
    let eval = |p: &Mlp| -> Result<(f64, Vec<bool>), NnError> {
        let a = p.forward_with_masks(batch, &masks)?;
        Ok((loss(&a.output).0 + p.l2_penalty(), a.kink_pattern(p)))
    };
    let base_pattern = acts.kink_pattern(net);
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        checked: 0,
        excluded_at_kink: 0,
    };
    let mut flat = 0usize;
    let n_tensors = probe.tensors_mut().len();
    for t in 0..n_tensors {
        let len = probe.tensors_mut()[t].len();
        for k in 0..len {
            let orig = probe.tensors_mut()[t][k];
            probe.tensors_mut()[t][k] = orig + eps;
            let (plus, pat_plus) = eval(&probe)?;
            probe.tensors_mut()[t][k] = orig - eps;
            let (minus, pat_minus) = eval(&probe)?;
            probe.tensors_mut()[t][k] = orig;
            let a = analytic[flat];
            flat += 1;
            if pat_plus != base_pattern || pat_minus != base_pattern {
                report.excluded_at_kink += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let denom = a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
            let rel = (a - numeric).abs() / denom;
            report.max_relative_error = report.max_relative_error.max(rel);
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Sum of squared errors against `target`, halved.
pub fn squared_error(target: &Array2<f64>) -> impl Fn(&Array2<f64>) -> (f64, Array2<f64>) + '_ {
    move |out| {
        let diff = out - target;
        (0.5 * diff.iter().map(|d| d * d).sum::<f64>(), diff)
    }
}
