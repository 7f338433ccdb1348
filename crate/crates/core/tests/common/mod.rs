//! Independent reference implementations used by the integration tests and
//! the acceptance run.
#![allow(dead_code)]

use ndarray::Array2;
use rand::Rng;

use flowgan::nn::{Activation, MlpSpec};

/// Confusion matrices `(tn, fp, fn, tp)` with the macro-F1 printed next to
/// them in published result tables.
pub const PUBLISHED_MATRICES: [(&str, [u64; 4], f64); 28] = [
    ("real 400K/4K best", [399817, 183, 459, 3929], 0.962),
    ("real 400K/4K default", [399877, 123, 1008, 3380], 0.928),
    ("real 4K/4K best", [398602, 1398, 197, 4191], 0.919),
    ("real 4K/4K default", [394172, 5828, 62, 4326], 0.793),
    ("mean 400K/4K best", [396318, 3682, 1894, 2493], 0.732),
    ("mean 400K/4K default", [390060, 9940, 1416, 2971], 0.664),
    ("mean 4K/4K best", [377352, 22648, 839, 3548], 0.601),
    ("mean 4K/4K default", [370528, 29472, 537, 3850], 0.583),
    ("wgan P1 best", [399926, 74, 927, 3461], 0.936),
    ("wgan P1 default", [399962, 38, 998, 3390], 0.933),
    ("wgan P2 best", [399449, 551, 701, 3687], 0.927),
    ("wgan P2 default", [399601, 399, 983, 3405], 0.915),
    ("wgan P3 best", [399030, 970, 1108, 3280], 0.878),
    ("wgan P3 default", [396381, 3619, 315, 4073], 0.835),
    ("custom P1 best", [382755, 17245, 241, 4146], 0.649),
    ("custom P1 default", [357385, 42615, 96, 4291], 0.555),
    ("custom P2 best", [377693, 22307, 163, 4224], 0.622),
    ("custom P2 default", [358897, 41103, 82, 4305], 0.559),
    ("custom P3 best", [345452, 54548, 21, 4366], 0.532),
    ("custom P3 default", [298568, 101432, 0, 4387], 0.467),
    ("filtered best", [399511, 489, 767, 3621], 0.925),
    ("filtered default", [399221, 779, 722, 3666], 0.914),
    ("top10 f1 best", [399800, 200, 608, 3780], 0.951),
    ("top10 f1 default", [399832, 168, 658, 3730], 0.950),
    ("top10 l1 best", [399491, 509, 1506, 2882], 0.869),
    ("top10 l1 default", [398536, 1464, 1094, 3294], 0.858),
    ("top10 jaccard best", [399033, 967, 1031, 3357], 0.884),
    ("top10 jaccard default", [396881, 3119, 720, 3668], 0.826),
];

/// Macro-F1 via the closed form `F1 = 2 tp / (2 tp + fp + fn)`.
pub fn macro_f1_closed_form([tn, fp, fn_, tp]: [u64; 4]) -> f64 {
    let f = |hit: u64, miss: u64| {
        if hit == 0 {
            0.0
        } else {
            2.0 * hit as f64 / (2.0 * hit as f64 + miss as f64)
        }
    };
    (f(tp, fp + fn_) + f(tn, fp + fn_)) / 2.0
}

/// Bin index of `x` by scanning the edges `lo + (hi - lo) k / w`.
fn scan_bin(x: f64, lo: f64, hi: f64, w: usize) -> usize {
    if lo == hi {
        return 0;
    }
    let mut k = 0;
    for e in 1..w {
        if x >= lo + (hi - lo) * e as f64 / w as f64 {
            k = e;
        }
    }
    k
}

/// Dense histograms over every cell of the shared grid: `(l1, jaccard)`.
pub fn dense_metrics(a: &Array2<f64>, b: &Array2<f64>, w: usize) -> (f64, f64) {
    let d = a.ncols();
    let mut lo = vec![f64::INFINITY; d];
    let mut hi = vec![f64::NEG_INFINITY; d];
    for row in a.rows().into_iter().chain(b.rows()) {
        for j in 0..d {
            lo[j] = lo[j].min(row[j]);
            hi[j] = hi[j].max(row[j]);
        }
    }
    let bins: Vec<usize> = (0..d).map(|j| if lo[j] == hi[j] { 1 } else { w }).collect();
    let cells: usize = bins.iter().product();
    let flat = |row: ndarray::ArrayView1<f64>| {
        let mut idx = 0;
        for j in 0..d {
            idx = idx * bins[j] + scan_bin(row[j], lo[j], hi[j], w);
        }
        idx
    };
    let hist = |s: &Array2<f64>| {
        let mut h = vec![0usize; cells];
        for row in s.rows() {
            h[flat(row)] += 1;
        }
        h
    };
    let (ha, hb) = (hist(a), hist(b));
    let (na, nb) = (a.nrows() as f64, b.nrows() as f64);
    let volume: f64 = (0..d)
        .filter(|&j| lo[j] != hi[j])
        .map(|j| (hi[j] - lo[j]) / w as f64)
        .product();
    let mut sum = 0.0;
    let (mut shared, mut union) = (0usize, 0usize);
    for k in 0..cells {
        sum += (ha[k] as f64 / na - hb[k] as f64 / nb).abs();
        if ha[k] > 0 || hb[k] > 0 {
            union += 1;
            if ha[k] > 0 && hb[k] > 0 {
                shared += 1;
            }
        }
    }
    (volume * sum, shared as f64 / union as f64)
}

/// Sample sets with repeated values and occasional constant columns, so
/// that points land exactly on edges and on the upper bound.
pub fn random_sample_pair<R: Rng>(rng: &mut R, d: usize) -> (Array2<f64>, Array2<f64>) {
    let na = rng.random_range(1..60);
    let nb = rng.random_range(1..60);
    let constant: Vec<bool> = (0..d).map(|_| rng.random_bool(0.1)).collect();
    let grid = rng.random_bool(0.5);
    let draw = |rng: &mut R, j: usize| {
        if constant[j] {
            1.5
        } else if grid {
            rng.random_range(0..8) as f64 * 0.25
        } else {
            rng.random_range(-3.0..3.0)
        }
    };
    let a = Array2::from_shape_fn((na, d), |(_, j)| draw(rng, j));
    let b = Array2::from_shape_fn((nb, d), |(_, j)| draw(rng, j));
    (a, b)
}

/// A random 3-layer MLP spec for gradient checking. `k` cycles through the
/// activations so every kind appears among consecutive indices.
pub fn random_mlp_spec<R: Rng>(rng: &mut R, k: usize) -> MlpSpec {
    let acts = [
        Activation::Linear,
        Activation::Tanh,
        Activation::LeakyRelu { alpha: 0.15 },
        Activation::MixedTanhLeaky {
            tanh_fraction: 0.5,
            alpha: 0.2,
        },
        Activation::custom_output(),
    ];
    // Three weight layers. Single-unit inputs are avoided: with batch norm
    // and linear units they make every hidden column collinear.
    let widths = [
        rng.random_range(2..5),
        rng.random_range(2..7),
        rng.random_range(2..7),
        rng.random_range(1..4),
    ];
    let hidden = acts[k % acts.len()];
    let output = acts[(k / acts.len()) % acts.len()];
    let bn = k % 2 == 0;
    let l2 = if (k / 2) % 2 == 0 { 0.0 } else { 0.03 };
    let dropout = if rng.random_bool(0.3) { 0.2 } else { 0.0 };
    MlpSpec::chain(&widths, hidden, output)
        .with_hidden(bn, dropout)
        .with_l2(l2)
}

pub fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}
