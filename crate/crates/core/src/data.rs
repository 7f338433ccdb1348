//! Labeled flow-feature records: CSV ingest, scaling, per-class splits and
//! seeded fixture synthesis.
//!
//! Records are stored row-major in one contiguous buffer so that the forest
//! and the networks can borrow rows without copying.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp, LogNormal, Normal, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Traffic class of a record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum Label {
    Normal = 0,
    Mining = 1,
}

impl Label {
    pub const ALL: [Label; 2] = [Label::Normal, Label::Mining];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn other(self) -> Label {
        match self {
            Label::Normal => Label::Mining,
            Label::Mining => Label::Normal,
        }
    }
}

impl From<Label> for u8 {
    fn from(l: Label) -> u8 {
        l as u8
    }
}

impl TryFrom<u8> for Label {
    type Error = String;

    fn try_from(v: u8) -> Result<Self, Self::Error> {
        match v {
            0 => Ok(Label::Normal),
            1 => Ok(Label::Mining),
            other => Err(format!("label {other} outside {{0,1}}")),
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", *self as u8)
    }
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("row {row} (line {line}): {reason}")]
    MalformedRow {
        row: usize,
        line: u64,
        reason: String,
    },
    #[error("record {index}: {reason}")]
    InvalidRecord { index: usize, reason: String },
    #[error("dimension must be positive")]
    ZeroDimension,
    #[error("dataset is empty")]
    Empty,
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("invalid fixture spec: {0}")]
    InvalidFixture(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Where the rows of a dataset came from. Used to prove that fully synthetic
/// training sets never contain observed traffic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Lineage {
    Real { source: String },
    Synthetic { source: String },
    Concat { parts: Vec<Lineage> },
}

impl Lineage {
    pub fn real(source: impl Into<String>) -> Self {
        Lineage::Real {
            source: source.into(),
        }
    }

    pub fn synthetic(source: impl Into<String>) -> Self {
        Lineage::Synthetic {
            source: source.into(),
        }
    }

    pub fn contains_real(&self) -> bool {
        match self {
            Lineage::Real { .. } => true,
            Lineage::Synthetic { .. } => false,
            Lineage::Concat { parts } => parts.iter().any(Lineage::contains_real),
        }
    }

    fn join(a: &Lineage, b: &Lineage) -> Lineage {
        let mut parts = Vec::new();
        for l in [a, b] {
            match l {
                Lineage::Concat { parts: p } => parts.extend(p.iter().cloned()),
                other => parts.push(other.clone()),
            }
        }
        Lineage::Concat { parts }
    }
}

/// One owned record, used for construction and inspection.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowRecord {
    pub features: Vec<f64>,
    pub label: Label,
}

/// Labeled collection of fixed-arity flow-feature records.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowDataset {
    dimension: usize,
    features: Vec<f64>,
    labels: Vec<Label>,
    class_counts: [usize; 2],
    lineage: Lineage,
}

impl FlowDataset {
    /// Builds a dataset from a row-major feature buffer.
    pub fn from_rows(
        dimension: usize,
        features: Vec<f64>,
        labels: Vec<Label>,
        lineage: Lineage,
    ) -> Result<Self, DataError> {
        if dimension == 0 {
            return Err(DataError::ZeroDimension);
        }
        if features.len() != labels.len() * dimension {
            return Err(DataError::DimensionMismatch {
                expected: labels.len() * dimension,
                found: features.len(),
            });
        }
        if let Some(pos) = features.iter().position(|v| !v.is_finite()) {
            return Err(DataError::InvalidRecord {
                index: pos / dimension,
                reason: format!("non-finite value in feature {}", pos % dimension + 1),
            });
        }
        let mut class_counts = [0; 2];
        for l in &labels {
            class_counts[l.index()] += 1;
        }
        Ok(FlowDataset {
            dimension,
            features,
            labels,
            class_counts,
            lineage,
        })
    }

    pub fn from_records(
        dimension: usize,
        records: &[FlowRecord],
        lineage: Lineage,
    ) -> Result<Self, DataError> {
        let mut features = Vec::with_capacity(records.len() * dimension);
        for (index, r) in records.iter().enumerate() {
            if r.features.len() != dimension {
                return Err(DataError::InvalidRecord {
                    index,
                    reason: format!("{} features, expected {dimension}", r.features.len()),
                });
            }
            features.extend_from_slice(&r.features);
        }
        let labels = records.iter().map(|r| r.label).collect();
        Self::from_rows(dimension, features, labels, lineage)
    }

    /// Single-class dataset from a row-major buffer.
    pub fn single_class(
        dimension: usize,
        features: Vec<f64>,
        label: Label,
        lineage: Lineage,
    ) -> Result<Self, DataError> {
        let n = if dimension == 0 {
            0
        } else {
            features.len() / dimension
        };
        Self::from_rows(dimension, features, vec![label; n], lineage)
    }

    pub fn empty(dimension: usize, lineage: Lineage) -> Self {
        FlowDataset {
            dimension,
            features: Vec::new(),
            labels: Vec::new(),
            class_counts: [0; 2],
            lineage,
        }
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dimension..(i + 1) * self.dimension]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.features.chunks_exact(self.dimension)
    }

    pub fn label(&self, i: usize) -> Label {
        self.labels[i]
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    /// Row-major feature buffer.
    pub fn features(&self) -> &[f64] {
        &self.features
    }

    /// Features as an `n x d` matrix view.
    pub fn view(&self) -> ndarray::ArrayView2<'_, f64> {
        ndarray::ArrayView2::from_shape((self.len(), self.dimension), &self.features)
            .expect("buffer length is n * d")
    }

    pub fn class_count(&self, label: Label) -> usize {
        self.class_counts[label.index()]
    }

    pub fn class_counts(&self) -> BTreeMap<Label, usize> {
        Label::ALL
            .iter()
            .filter(|l| self.class_counts[l.index()] > 0)
            .map(|&l| (l, self.class_counts[l.index()]))
            .collect()
    }

    pub fn lineage(&self) -> &Lineage {
        &self.lineage
    }

    pub fn record(&self, i: usize) -> FlowRecord {
        FlowRecord {
            features: self.row(i).to_vec(),
            label: self.labels[i],
        }
    }

    pub fn column(&self, j: usize) -> impl Iterator<Item = f64> + '_ {
        self.rows().map(move |r| r[j])
    }

    /// Rows `indices` in the given order.
    pub fn select(&self, indices: &[usize]) -> FlowDataset {
        let mut features = Vec::with_capacity(indices.len() * self.dimension);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        let mut class_counts = [0; 2];
        for l in &labels {
            class_counts[l.index()] += 1;
        }
        FlowDataset {
            dimension: self.dimension,
            features,
            labels,
            class_counts,
            lineage: self.lineage.clone(),
        }
    }

    /// Appends the rows of `other`; lineages are joined.
    pub fn concat(&self, other: &FlowDataset) -> Result<FlowDataset, DataError> {
        if self.dimension != other.dimension {
            return Err(DataError::DimensionMismatch {
                expected: self.dimension,
                found: other.dimension,
            });
        }
        let mut out = self.clone();
        out.features.extend_from_slice(&other.features);
        out.labels.extend_from_slice(&other.labels);
        out.class_counts[0] += other.class_counts[0];
        out.class_counts[1] += other.class_counts[1];
        out.lineage = if self.is_empty() {
            other.lineage.clone()
        } else if other.is_empty() {
            self.lineage.clone()
        } else {
            Lineage::join(&self.lineage, &other.lineage)
        };
        Ok(out)
    }

    pub fn with_lineage(mut self, lineage: Lineage) -> Self {
        self.lineage = lineage;
        self
    }

    /// Same rows with every label set to `label`.
    pub fn relabel(&self, label: Label) -> FlowDataset {
        let labels = vec![label; self.len()];
        let mut class_counts = [0; 2];
        class_counts[label.index()] = labels.len();
        FlowDataset {
            labels,
            class_counts,
            ..self.clone()
        }
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), DataError> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<String> = (1..=self.dimension).map(|j| format!("f{j}")).collect();
        header.push("label".into());
        w.write_record(&header)?;
        let mut buf = Vec::with_capacity(self.dimension + 1);
        for (i, row) in self.rows().enumerate() {
            buf.clear();
            buf.extend(row.iter().map(|v| format!("{v:?}")));
            buf.push(self.labels[i].to_string());
            w.write_record(&buf)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<(), DataError> {
        let file = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

/// Reads a CSV with header `f1,...,fd,label`. Row order is preserved.
pub fn read_dataset<R: Read>(
    reader: R,
    dimension: usize,
    source: &str,
) -> Result<FlowDataset, DataError> {
    if dimension == 0 {
        return Err(DataError::ZeroDimension);
    }
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (idx, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = idx + 1;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let bad = |reason: String| DataError::MalformedRow { row, line, reason };
        if rec.len() != dimension + 1 {
            return Err(bad(format!(
                "{} feature columns, expected {dimension}",
                rec.len().saturating_sub(1)
            )));
        }
        for j in 0..dimension {
            let v: f64 = rec[j]
                .parse()
                .map_err(|_| bad(format!("feature {} is not a number: {:?}", j + 1, &rec[j])))?;
            if !v.is_finite() {
                return Err(bad(format!("feature {} is not finite", j + 1)));
            }
            features.push(v);
        }
        let label: u8 = rec[dimension]
            .parse()
            .map_err(|_| bad(format!("label {:?} is not an integer", &rec[dimension])))?;
        labels.push(Label::try_from(label).map_err(bad)?);
    }
    FlowDataset::from_rows(dimension, features, labels, Lineage::real(source))
}

pub fn load_dataset(path: impl AsRef<Path>, dimension: usize) -> Result<FlowDataset, DataError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path)?;
    read_dataset(
        std::io::BufReader::new(file),
        dimension,
        &path.display().to_string(),
    )
}

/// Partition by label. Only labels present in the input appear in the map.
pub fn split_by_label(dataset: &FlowDataset) -> BTreeMap<Label, FlowDataset> {
    let mut out = BTreeMap::new();
    for label in Label::ALL {
        let idx: Vec<usize> = (0..dataset.len())
            .filter(|&i| dataset.label(i) == label)
            .collect();
        if !idx.is_empty() {
            out.insert(label, dataset.select(&idx));
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleMode {
    /// Per-feature z-score.
    #[default]
    ZScore,
    /// Divide by the standard deviation only, so that zero stays zero and
    /// non-negative features stay non-negative.
    ScaleOnly,
}

/// Per-feature affine map `x -> (x - shift) / scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalerParams {
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
    /// Features whose variance was zero; their scale was forced to 1.
    #[serde(default)]
    pub zero_variance: Vec<bool>,
}

impl ScalerParams {
    pub fn identity(dimension: usize) -> Self {
        ScalerParams {
            shift: vec![0.0; dimension],
            scale: vec![1.0; dimension],
            zero_variance: vec![false; dimension],
        }
    }

    pub fn fit(dataset: &FlowDataset, mode: ScaleMode) -> Result<Self, DataError> {
        if dataset.is_empty() {
            return Err(DataError::Empty);
        }
        let d = dataset.dimension();
        let n = dataset.len() as f64;
        let mut shift = vec![0.0; d];
        let mut scale = vec![1.0; d];
        let mut zero_variance = vec![false; d];
        for j in 0..d {
            let mean = dataset.column(j).sum::<f64>() / n;
            let var = dataset.column(j).map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let std = var.sqrt();
            if std > 0.0 && std.is_finite() {
                scale[j] = std;
            } else {
                zero_variance[j] = true;
            }
            if mode == ScaleMode::ZScore {
                shift[j] = mean;
            }
        }
        Ok(ScalerParams {
            shift,
            scale,
            zero_variance,
        })
    }

    pub fn dimension(&self) -> usize {
        self.shift.len()
    }

    pub fn has_warnings(&self) -> bool {
        self.zero_variance.iter().any(|&z| z)
    }

    pub fn apply_row(&self, row: &mut [f64]) {
        for ((v, s), c) in row.iter_mut().zip(&self.shift).zip(&self.scale) {
            *v = (*v - s) / c;
        }
    }

    pub fn invert_row(&self, row: &mut [f64]) {
        for ((v, s), c) in row.iter_mut().zip(&self.shift).zip(&self.scale) {
            *v = *v * c + s;
        }
    }

    pub fn apply(&self, dataset: &FlowDataset) -> Result<FlowDataset, DataError> {
        self.map(dataset, Self::apply_row)
    }

    pub fn invert(&self, dataset: &FlowDataset) -> Result<FlowDataset, DataError> {
        self.map(dataset, Self::invert_row)
    }

    fn map(
        &self,
        dataset: &FlowDataset,
        f: fn(&Self, &mut [f64]),
    ) -> Result<FlowDataset, DataError> {
        if dataset.dimension() != self.dimension() {
            return Err(DataError::DimensionMismatch {
                expected: self.dimension(),
                found: dataset.dimension(),
            });
        }
        let mut out = dataset.clone();
        for row in out.features.chunks_exact_mut(self.dimension()) {
            f(self, row);
        }
        Ok(out)
    }
}

/// Fits a z-score scaler on `dataset` and returns the scaled copy.
pub fn standardize(dataset: &FlowDataset) -> Result<(FlowDataset, ScalerParams), DataError> {
    let params = ScalerParams::fit(dataset, ScaleMode::ZScore)?;
    if params.has_warnings() {
        log::warn!(
            "zero-variance features left unscaled: {:?}",
            params
                .zero_variance
                .iter()
                .enumerate()
                .filter(|(_, &z)| z)
                .map(|(j, _)| j + 1)
                .collect::<Vec<_>>()
        );
    }
    Ok((params.apply(dataset)?, params))
}

/// Univariate distribution used by fixture synthesis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureDistribution {
    Exponential { rate: f64 },
    Lognormal { mu: f64, sigma: f64 },
    Uniform { low: f64, high: f64 },
    Normal { mean: f64, std: f64 },
}

impl FeatureDistribution {
    /// Lognormal parameterized by its arithmetic mean.
    pub fn lognormal_with_mean(mean: f64, sigma: f64) -> Self {
        FeatureDistribution::Lognormal {
            mu: mean.ln() - sigma * sigma / 2.0,
            sigma,
        }
    }

    pub fn mean(&self) -> f64 {
        match *self {
            FeatureDistribution::Exponential { rate } => 1.0 / rate,
            FeatureDistribution::Lognormal { mu, sigma } => (mu + sigma * sigma / 2.0).exp(),
            FeatureDistribution::Uniform { low, high } => (low + high) / 2.0,
            FeatureDistribution::Normal { mean, .. } => mean,
        }
    }

    fn validate(&self) -> Result<(), String> {
        let ok = match *self {
            FeatureDistribution::Exponential { rate } => rate > 0.0 && rate.is_finite(),
            FeatureDistribution::Lognormal { mu, sigma } => {
                mu.is_finite() && sigma > 0.0 && sigma.is_finite()
            }
            FeatureDistribution::Uniform { low, high } => {
                low.is_finite() && high.is_finite() && low < high
            }
            FeatureDistribution::Normal { mean, std } => {
                mean.is_finite() && std > 0.0 && std.is_finite()
            }
        };
        if ok {
            Ok(())
        } else {
            Err(format!("invalid parameters for {self:?}"))
        }
    }

    fn sampler(&self) -> Sampler {
        // Parameters were validated, so construction cannot fail.
        match *self {
            FeatureDistribution::Exponential { rate } => Sampler::Exp(Exp::new(rate).unwrap()),
            FeatureDistribution::Lognormal { mu, sigma } => {
                Sampler::LogNormal(LogNormal::new(mu, sigma).unwrap())
            }
            FeatureDistribution::Uniform { low, high } => {
                Sampler::Uniform(Uniform::new(low, high).unwrap())
            }
            FeatureDistribution::Normal { mean, std } => {
                Sampler::Normal(Normal::new(mean, std).unwrap())
            }
        }
    }
}

enum Sampler {
    Exp(Exp<f64>),
    LogNormal(LogNormal<f64>),
    Uniform(Uniform<f64>),
    Normal(Normal<f64>),
}

impl Sampler {
    fn sample<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            Sampler::Exp(d) => d.sample(rng),
            Sampler::LogNormal(d) => d.sample(rng),
            Sampler::Uniform(d) => d.sample(rng),
            Sampler::Normal(d) => d.sample(rng),
        }
    }
}

/// One mixture component: independent per-feature distributions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureComponent {
    #[serde(default = "one")]
    pub weight: f64,
    pub features: Vec<FeatureDistribution>,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub label: Label,
    pub count: usize,
    pub components: Vec<MixtureComponent>,
}

impl ClassSpec {
    pub fn analytic_means(&self) -> Vec<f64> {
        let total: f64 = self.components.iter().map(|c| c.weight).sum();
        let d = self.components.first().map_or(0, |c| c.features.len());
        (0..d)
            .map(|j| {
                self.components
                    .iter()
                    .map(|c| c.weight / total * c.features[j].mean())
                    .sum()
            })
            .collect()
    }
}

/// Seeded description of a synthetic ground-truth dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureSpec {
    pub seed: u64,
    pub classes: Vec<ClassSpec>,
}

impl FixtureSpec {
    pub fn dimension(&self) -> Option<usize> {
        self.classes
            .iter()
            .flat_map(|c| c.components.iter())
            .map(|c| c.features.len())
            .next()
    }

    /// Exponential-like traffic with near-equal class means. Normal traffic
    /// is i.i.d. exponential; mining traffic is an equal mixture of two tight
    /// lognormal clusters sitting either side of the same mean, the way a
    /// handful of mining protocols produce a few characteristic flow shapes.
    pub fn cryptomining_like(n_normal: usize, n_mining: usize, seed: u64) -> Self {
        let d = 4;
        let normal = MixtureComponent {
            weight: 1.0,
            features: vec![FeatureDistribution::Exponential { rate: 1.0 }; d],
        };
        let cluster = |mean| MixtureComponent {
            weight: 0.5,
            features: vec![FeatureDistribution::lognormal_with_mean(mean, 0.15); d],
        };
        FixtureSpec {
            seed,
            classes: vec![
                ClassSpec {
                    label: Label::Normal,
                    count: n_normal,
                    components: vec![normal],
                },
                ClassSpec {
                    label: Label::Mining,
                    count: n_mining,
                    components: vec![cluster(0.4), cluster(1.6)],
                },
            ],
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<usize, DataError> {
        let bad = |m: String| DataError::InvalidFixture(m);
        let d = self
            .dimension()
            .ok_or_else(|| bad("no mixture components".into()))?;
        if d == 0 {
            return Err(DataError::ZeroDimension);
        }
        for class in &self.classes {
            if class.components.is_empty() {
                return Err(bad(format!("class {} has no components", class.label)));
            }
            for comp in &class.components {
                if !(comp.weight > 0.0 && comp.weight.is_finite()) {
                    return Err(bad(format!(
                        "class {}: component weight {} must be positive",
                        class.label, comp.weight
                    )));
                }
                if comp.features.len() != d {
                    return Err(bad(format!(
                        "class {}: component has {} features, expected {d}",
                        class.label,
                        comp.features.len()
                    )));
                }
                for f in &comp.features {
                    f.validate().map_err(bad)?;
                }
            }
        }
        Ok(d)
    }

    pub fn from_json(text: &str) -> Result<Self, DataError> {
        let spec: FixtureSpec = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }
}

/// Draws the fixture dataset. Rows appear class by class in spec order.
pub fn synth_fixture(spec: &FixtureSpec) -> Result<FlowDataset, DataError> {
    let d = spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let total: usize = spec.classes.iter().map(|c| c.count).sum();
    let mut features = Vec::with_capacity(total * d);
    let mut labels = Vec::with_capacity(total);
    for class in &spec.classes {
        let samplers: Vec<Vec<Sampler>> = class
            .components
            .iter()
            .map(|c| c.features.iter().map(FeatureDistribution::sampler).collect())
            .collect();
        let picker = WeightedIndex::new(class.components.iter().map(|c| c.weight))
            .map_err(|e| DataError::InvalidFixture(e.to_string()))?;
        for _ in 0..class.count {
            let k = if samplers.len() == 1 {
                0
            } else {
                picker.sample(&mut rng)
            };
            for s in &samplers[k] {
                features.push(s.sample(&mut rng));
            }
            labels.push(class.label);
        }
    }
    FlowDataset::from_rows(
        d,
        features,
        labels,
        Lineage::real(format!("fixture:seed={}", spec.seed)),
    )
}
