use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use flowgan::data::*;
use flowgan::nn::{Activation, CriticRole};
use flowgan::wgan::*;

fn class(n: usize, label: Label, seed: u64) -> FlowDataset {
    let spec = match label {
        Label::Normal => FixtureSpec::cryptomining_like(n, 0, seed),
        Label::Mining => FixtureSpec::cryptomining_like(0, n, seed),
    };
    synth_fixture(&spec).unwrap()
}

fn tiny(seed: u64) -> GanConfig {
    let mut c = GanConfig::small(4, 6, &[12], seed);
    c.minibatch_ratio = 0.1;
    c
}

fn fresh_state(config: GanConfig, data: &FlowDataset, rng: &mut ChaCha8Rng) -> (GanState, Array2<f64>) {
    let scaler = ScalerParams::fit(data, config.scale_mode).unwrap();
    let scaled = scaler.apply(data).unwrap();
    let x = Array2::from_shape_vec((data.len(), data.dimension()), scaled.features().to_vec()).unwrap();
    let state = GanState::new(config, data.label(0), scaler, vec![true; data.dimension()], rng).unwrap();
    (state, x)
}

fn stats(v: impl Iterator<Item = f64>) -> (f64, f64) {
    let v: Vec<f64> = v.collect();
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt())
}

#[test]
fn latent_noise_has_requested_moments() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for kind in [NoiseKind::Normal, NoiseKind::Uniform] {
        let spec = LatentSpec {
            noise_kind: kind,
            ..LatentSpec::normal(5, 0.7)
        };
        let (z, cats) = sample_latent(&spec, None, 40_000, &mut rng);
        assert!(cats.is_none());
        let (m, s) = stats(z.iter().copied());
        assert!(m.abs() < 0.01, "{kind:?} mean {m}");
        assert!((s - 0.7).abs() < 0.01, "{kind:?} std {s}");
        if kind == NoiseKind::Uniform {
            let h = 3f64.sqrt() * 0.7;
            assert!(z.iter().all(|v| v.abs() <= h));
        }
    }
}

#[test]
fn latent_rows_are_centroid_plus_noise() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let spec = LatentSpec::normal(3, 0.05);
    let centroids = ndarray::array![[10.0, 0.0, 0.0], [0.0, -10.0, 5.0]];
    let (z, cats) = sample_latent(&spec, Some(&centroids), 5000, &mut rng);
    let cats = cats.unwrap();
    for (row, &k) in z.rows().into_iter().zip(&cats) {
        for j in 0..3 {
            assert!((row[j] - centroids[[k, j]]).abs() < 0.05 * 6.0);
        }
    }
    let ones = cats.iter().filter(|&&k| k == 1).count() as f64 / 5000.0;
    assert!((ones - 0.5).abs() < 0.03);
}

#[test]
fn adaptive_contract_holds_on_random_steps() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let data = class(400, Label::Mining, 3);
    for trial in 0..20 {
        let mut cfg = tiny(trial);
        cfg.adaptive = AdaptiveSpec {
            min_ratio_fake_pass: rng.random_range(0.0..0.6),
            min_ratio_tp: rng.random_range(0.0..0.9),
            min_ratio_tn: rng.random_range(0.0..0.9),
            max_extra_cycles: rng.random_range(1..6),
        };
        let (mut state, x) = fresh_state(cfg.clone(), &data, &mut rng);
        let batch = x.slice(ndarray::s![0..40, ..]).to_owned();
        let rep = state.train_minibatch(&batch, None, &mut rng).unwrap();
        let a = &cfg.adaptive;
        assert!(rep.d_cycles >= 1 && rep.d_cycles <= a.max_extra_cycles + 1);
        assert!(rep.g_cycles >= 1 && rep.g_cycles <= a.max_extra_cycles + 1);
        if rep.d_flagged {
            assert_eq!(rep.d_cycles, a.max_extra_cycles + 1);
            assert!(rep.ratio_tp < a.min_ratio_tp || rep.ratio_tn < a.min_ratio_tn);
        } else {
            assert!(rep.ratio_tp >= a.min_ratio_tp && rep.ratio_tn >= a.min_ratio_tn);
        }
        if rep.g_flagged {
            assert_eq!(rep.g_cycles, a.max_extra_cycles + 1);
            assert!(rep.ratio_fake_pass < a.min_ratio_fake_pass);
        } else {
            assert!(rep.ratio_fake_pass >= a.min_ratio_fake_pass);
        }
        // Generator cycles leave the critic untouched, so its pass rate on
        // the real batch can be recomputed after the step.
        let critic = state.discriminator.infer(&batch).unwrap();
        let tp = critic.iter().filter(|&&v| v > 0.0).count() as f64 / 40.0;
        assert_eq!(tp, rep.ratio_tp, "trial {trial}");
        assert_eq!(state.step, 1);
    }
}

#[test]
fn frozen_discriminator_is_flagged_and_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let data = class(200, Label::Normal, 1);
    let mut cfg = tiny(1);
    cfg.adaptive = AdaptiveSpec {
        min_ratio_fake_pass: 0.0,
        min_ratio_tp: 1.0,
        min_ratio_tn: 1.0,
        max_extra_cycles: 4,
    };
    let (mut state, x) = fresh_state(cfg, &data, &mut rng);
    state.freeze_discriminator = true;
    let before = state.discriminator.snapshot();
    let rep = state.train_minibatch(&x, None, &mut rng).unwrap();
    assert!(rep.d_flagged);
    assert_eq!(rep.d_cycles, 5);
    assert_eq!(state.discriminator.snapshot(), before);
}

#[test]
fn perturbation_flips_exact_label_count() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let batch = Array2::zeros((20, 2));
    let roles = [vec![CriticRole::Real; 10], vec![CriticRole::Fake; 10]].concat();
    let noise = NoiseHeuristics {
        fake_noise: Some(NoiseSpec::normal(1.0)),
        all_noise: None,
        label_flip_ratio: 0.15,
    };
    let (out, flipped) = perturb_inputs(&batch, &roles, &noise, &mut rng);
    assert_eq!(roles.iter().zip(&flipped).filter(|(a, b)| a != b).count(), 3);
    assert!(out.rows().into_iter().take(10).all(|r| r.iter().all(|&v| v == 0.0)));
    assert!(out.rows().into_iter().skip(10).all(|r| r.iter().any(|&v| v != 0.0)));
}

#[test]
fn training_retains_every_kth_step_and_the_last() {
    let data = class(200, Label::Normal, 2);
    let mut cfg = tiny(5);
    cfg.checkpoint_every = 3;
    let mut seen = Vec::new();
    let out = train(&cfg, &data, None, 8, |c| seen.push(c.step)).unwrap();
    assert!(out.error.is_none());
    assert_eq!(seen, vec![0, 3, 6, 7]);
    assert_eq!(out.reports.len(), 8);
    let again = train(&cfg, &data, None, 8, |_| {}).unwrap();
    for (a, b) in out.checkpoints.iter().zip(&again.checkpoints) {
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
    }
}

#[test]
fn training_rejects_bad_inputs() {
    let mixed = synth_fixture(&FixtureSpec::cryptomining_like(20, 20, 1)).unwrap();
    assert!(matches!(
        train(&tiny(0), &mixed, None, 1, |_| {}),
        Err(GanError::NotSingleClass([20, 20]))
    ));
    let small = class(10, Label::Mining, 1);
    assert!(matches!(
        train(&tiny(0), &small, None, 1, |_| {}),
        Err(GanError::BatchTooSmall { .. })
    ));
    let mut cfg = tiny(0);
    cfg.discriminator.layers.last_mut().unwrap().activation = Activation::Tanh;
    assert!(matches!(cfg.validate(Some(4)), Err(GanError::InvalidConfig(_))));
    let text = serde_json::to_string(&tiny(0)).unwrap();
    assert_eq!(GanConfig::from_json(&text).unwrap(), tiny(0));
}

#[test]
fn generation_filters_hold_row_by_row() {
    let data = class(300, Label::Mining, 4);
    let out = train(&tiny(2), &data, None, 5, |_| {}).unwrap();
    let ck = out.checkpoints.last().unwrap();
    let back = Checkpoint::from_json(&ck.to_json().unwrap()).unwrap();
    assert_eq!(back.to_json().unwrap(), ck.to_json().unwrap());
    let nets = ck.networks().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);

    let opts = GenerateOptions {
        filter: CriticFilter::Positive,
        clip_negatives: true,
        round_size: 256,
    };
    let rows = ck.generate(200, &opts, &mut rng).unwrap();
    assert_eq!(rows.class_count(Label::Mining), 200);
    // Re-scale each kept row and ask the critic again.
    let rescaled = ck.scaler.apply(&rows).unwrap();
    let critic = nets.critic(rescaled.view()).unwrap();
    assert!(critic.iter().all(|&c| c > -1e-9));
    assert!(rows.features().iter().all(|&v| v >= 0.0));

    let plain = ck.generate(50, &GenerateOptions::default(), &mut rng).unwrap();
    assert_eq!(plain.len(), 50);
    assert!(matches!(ck.generate(0, &opts, &mut rng), Err(GanError::ZeroRows)));
}

#[test]
fn percentile_filter_keeps_upper_tail() {
    let data = class(300, Label::Normal, 5);
    let out = train(&tiny(3), &data, None, 3, |_| {}).unwrap();
    let ck = out.checkpoints.last().unwrap();
    let nets = ck.networks().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (z, _) = sample_latent(&ck.latent, None, 20_000, &mut rng);
    let mut all = nets.critic(nets.scaled_output(&z).unwrap().view()).unwrap();
    all.sort_by(f64::total_cmp);
    let p90 = all[18_000];
    let opts = GenerateOptions {
        filter: CriticFilter::Percentile { p: 90.0 },
        ..Default::default()
    };
    let rows = ck.generate(300, &opts, &mut rng).unwrap();
    let critic = nets.critic(ck.scaler.apply(&rows).unwrap().view()).unwrap();
    let above = critic.iter().filter(|&&c| c > p90 - 0.05 * (p90 - all[0]).abs()).count();
    assert!(above as f64 >= 0.95 * 300.0, "{above}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn flips_never_touch_features(ratio in 0.0..0.2f64, n in 1usize..60, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let batch = Array2::from_shape_fn((n, 3), |(i, j)| (i * 3 + j) as f64);
        let roles: Vec<CriticRole> = (0..n)
            .map(|i| if i % 2 == 0 { CriticRole::Real } else { CriticRole::Fake })
            .collect();
        let noise = NoiseHeuristics { label_flip_ratio: ratio, ..Default::default() };
        let (out, flipped) = perturb_inputs(&batch, &roles, &noise, &mut rng);
        prop_assert_eq!(out, batch);
        let changed = roles.iter().zip(&flipped).filter(|(a, b)| a != b).count();
        prop_assert_eq!(changed, (ratio * n as f64).round() as usize);
    }

    #[test]
    fn batch_size_is_ceiling(ratio in 0.001..1.0f64, rows in 1usize..100_000) {
        let mut c = tiny(0);
        c.minibatch_ratio = ratio;
        let b = c.batch_size(rows);
        prop_assert!(b as f64 >= ratio * rows as f64);
        prop_assert!((b as f64) < ratio * rows as f64 + 1.0);
    }
}
