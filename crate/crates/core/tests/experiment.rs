mod common;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use flowgan::data::*;
use flowgan::eval::EvalOptions;
use flowgan::experiment::*;
use flowgan::policy::evaluate_marginal;
use flowgan::wgan::{GanConfig, GenerateOptions};

struct Fixture {
    train: FlowDataset,
    test: FlowDataset,
    parts: std::collections::BTreeMap<Label, FlowDataset>,
}

fn fixture() -> Fixture {
    let train = synth_fixture(&FixtureSpec::cryptomining_like(300, 80, 1)).unwrap();
    let test = synth_fixture(&FixtureSpec::cryptomining_like(300, 80, 2)).unwrap();
    let parts = split_by_label(&train);
    Fixture { train, test, parts }
}

fn config(seed: u64) -> GanConfig {
    let mut c = GanConfig::small(4, 6, &[10], seed);
    c.minibatch_ratio = 0.1;
    c
}

fn spec() -> MarginalSpec {
    MarginalSpec {
        eval: EvalOptions::default().with_trees(5, 3),
        generate: GenerateOptions::default(),
        bins: 10,
        seed: 17,
    }
}

#[test]
fn recorded_metrics_can_be_recomputed_independently() {
    let f = fixture();
    let class = &f.parts[&Label::Mining];
    let data = MarginalData {
        real_class: class,
        real_other: &f.parts[&Label::Normal],
        test: &f.test,
    };
    let sp = spec();
    let out = run_training("r1", &config(4), class, None, 4, Some((&data, &sp)), None).unwrap();
    assert_eq!(out.manifest.metrics.len(), 4);
    for entry in &out.pool {
        let m = entry.metrics.unwrap();
        let ck = &entry.checkpoint;
        // Replay the documented per-step stream.
        let seed = sp.seed ^ ck.step.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let synth = ck.generate(class.len(), &sp.generate, &mut rng).unwrap();
        let a = ndarray::Array2::from_shape_vec((class.len(), 4), class.features().to_vec()).unwrap();
        let b = ndarray::Array2::from_shape_vec((synth.len(), 4), synth.features().to_vec()).unwrap();
        let (l1, jac) = common::dense_metrics(&a, &b, sp.bins);
        assert_eq!(m.l1.unwrap(), l1);
        assert_eq!(m.jaccard.unwrap(), jac);
        let report = evaluate_marginal(
            ck,
            data.real_other,
            data.test,
            class.len(),
            &sp.generate,
            &sp.eval,
            &mut rng,
        )
        .unwrap();
        assert_eq!(m.macro_f1.unwrap(), report.best_macro_f1());
        assert!(m.jaccard_p1.unwrap() >= 0.0);
    }
}

#[test]
fn manifest_round_trips_through_disk() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let class = &f.parts[&Label::Normal];
    let out = run_training("r0", &config(1), class, None, 3, None, Some(dir.path())).unwrap();
    let m = RunManifest::load(dir.path()).unwrap();
    assert_eq!(m, out.manifest);
    assert_eq!(m.checkpoints.len(), 3);
    assert_eq!(m.train_rows, 300);
    assert_eq!(m.config_digest, digest(&config(1)));
    assert_eq!(m.config_digest.len(), 64);
    assert_ne!(digest(&config(1)), digest(&config(2)));
    let pool = m.pool(dir.path()).unwrap();
    assert_eq!(pool.len(), 3);
    assert!(pool.iter().all(|p| p.metrics.is_none()));
    assert!(matches!(emit_metric_series(&m, Vec::new()), Err(RunError::NoMetrics)));
    let diag = std::fs::read_to_string(dir.path().join(DIAGNOSTICS_FILE)).unwrap();
    assert_eq!(diag.lines().count(), 4);

    std::fs::remove_file(dir.path().join(&m.checkpoints[1])).unwrap();
    assert!(matches!(
        RunManifest::load(dir.path()),
        Err(RunError::MissingCheckpoint(..))
    ));
}

#[test]
fn runs_are_byte_identical() {
    let f = fixture();
    let class = &f.parts[&Label::Mining];
    let data = MarginalData {
        real_class: class,
        real_other: &f.parts[&Label::Normal],
        test: &f.test,
    };
    let sp = spec();
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        run_training("r", &config(8), class, None, 3, Some((&data, &sp)), Some(d.path())).unwrap();
    }
    let m = RunManifest::load(dirs[0].path()).unwrap();
    let mut files = vec![
        MANIFEST_FILE.to_string(),
        DIAGNOSTICS_FILE.to_string(),
        METRICS_FILE.to_string(),
    ];
    files.extend(m.checkpoints.iter().cloned());
    for name in files {
        let a = std::fs::read(dirs[0].path().join(&name)).unwrap();
        let b = std::fs::read(dirs[1].path().join(&name)).unwrap();
        assert_eq!(a, b, "{name}");
    }
}

#[test]
fn histogram_compare_lists_every_occupied_cell() {
    let f = fixture();
    let mut out = Vec::new();
    emit_histogram_compare(&f.train, &f.test, 6, &mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("rank,mass_real,mass_synth"));
    let rows: Vec<(f64, f64)> = lines
        .map(|l| {
            let v: Vec<&str> = l.split(',').collect();
            (v[1].parse().unwrap(), v[2].parse().unwrap())
        })
        .collect();
    let (sa, sb): (f64, f64) = rows.iter().fold((0.0, 0.0), |acc, r| (acc.0 + r.0, acc.1 + r.1));
    assert!((sa - 1.0).abs() < 1e-9 && (sb - 1.0).abs() < 1e-9);
    assert!(rows.iter().all(|r| r.0 > 0.0 || r.1 > 0.0));
}
