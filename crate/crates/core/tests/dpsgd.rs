mod common;

use common::{brute_force_step, token_batch, TinyNet};
use privcap_core::dpsgd::{noise_stream, poisson_sample, privatize, schedule, AdamW, DpSgd, DpSgdConfig, RunManifest};
use privcap_core::nn::{Gradients, Model, ParamStore, Precision, Tensor};
use privcap_core::{Accountant, MechanismParams};
use proptest::prelude::*;

#[test]
fn poisson_full_rate_takes_everything() {
    assert_eq!(poisson_sample(10, 1.0, 0, 0), (0..10).collect::<Vec<_>>());
}

#[test]
fn poisson_sizes_follow_binomial() {
    let (n, q) = (100_000usize, 0.5);
    let sizes: Vec<f64> = (0..100).map(|s| poisson_sample(n, q, 42, s).len() as f64).collect();
    let mean = sizes.iter().sum::<f64>() / sizes.len() as f64;
    let sd = (n as f64 * q * (1.0 - q)).sqrt();
    assert!((mean - n as f64 * q).abs() < 3.0 * sd);
    // the mean of 100 draws is itself much tighter
    assert!((mean - n as f64 * q).abs() < 3.0 * sd / 10.0);
}

#[test]
fn poisson_inclusion_is_uniform_across_indices() {
    let (n, q, draws) = (40usize, 0.07, 20_000u64);
    let mut counts = vec![0u32; n];
    for s in 0..draws {
        let idx = poisson_sample(n, q, 9, s);
        assert!(idx.windows(2).all(|w| w[0] < w[1]));
        for i in idx {
            counts[i] += 1;
        }
    }
    let expect = draws as f64 * q;
    let sd = (draws as f64 * q * (1.0 - q)).sqrt();
    for c in counts {
        assert!((c as f64 - expect).abs() < 4.5 * sd, "{c} vs {expect}");
    }
}

#[test]
fn poisson_is_replayable() {
    assert_eq!(poisson_sample(5000, 0.01, 3, 17), poisson_sample(5000, 0.01, 3, 17));
}

fn grads_of(values: Vec<f64>) -> Gradients {
    let n = values.len();
    Gradients {
        tensors: vec![Tensor::from_vec(&[n], values).unwrap()],
    }
}

#[test]
fn zero_noise_gives_the_clipped_mean() {
    let sum = grads_of(vec![2.0, -4.0, 6.0]);
    let g = privatize(&sum, 1.0, 0.0, 4.0, &mut noise_stream(0, 0));
    assert_eq!(g.tensors[0].data(), &[0.5, -1.0, 1.5]);
}

#[test]
fn noise_variance_is_c_sigma_squared() {
    let sum = grads_of(vec![0.0; 10_000]);
    let g = privatize(&sum, 1.0, 1.0, 1.0, &mut noise_stream(5, 0));
    let v = g.tensors[0].data();
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
    assert!((var - 1.0).abs() < 0.05, "{var}");
}

#[test]
fn effective_noise_of_the_large_batch_run() {
    let sum = grads_of(vec![0.0; 20_000]);
    let (c, sigma, b) = (1.0, 0.728, 1.3e6);
    let g = privatize(&sum, c, sigma, b, &mut noise_stream(1, 0));
    let v = g.tensors[0].data();
    let sd = (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt();
    assert_eq!(format!("{:.1e}", c * sigma / b), "5.6e-7");
    assert!((sd / (c * 5.6e-7) - 1.0).abs() < 0.03, "{sd}");
}

fn scalar_store(v: f64) -> ParamStore {
    let mut s = ParamStore::new();
    s.add("p", Tensor::from_vec(&[1], vec![v]).unwrap());
    s
}

#[test]
fn adamw_zero_gradient_without_decay_is_a_no_op() {
    let cfg = DpSgdConfig {
        weight_decay: 0.0,
        ..Default::default()
    };
    let mut s = scalar_store(0.7);
    let mut opt = AdamW::new(&s, &cfg);
    for _ in 0..5 {
        opt.step(&mut s, &grads_of(vec![0.0]), 1e-2);
    }
    assert_eq!(s.values()[0].data()[0], 0.7);
}

#[test]
fn adamw_matches_hand_arithmetic() {
    let cfg = DpSgdConfig::default();
    let mut s = scalar_store(0.5);
    let mut opt = AdamW::new(&s, &cfg);
    let (g1, g2, lr) = (0.2, -0.1, 1e-3);
    opt.step(&mut s, &grads_of(vec![g1]), lr);
    opt.step(&mut s, &grads_of(vec![g2]), lr);

    let (b1, b2, eps, wd) = (0.9f64, 0.95f64, 1e-8, 0.05);
    let mut p = 0.5f64;
    let m1 = (1.0 - b1) * g1;
    let v1 = (1.0 - b2) * g1 * g1;
    p *= 1.0 - lr * wd;
    p -= lr * (m1 / (1.0 - b1)) / ((v1 / (1.0 - b2)).sqrt() + eps);
    let m2 = b1 * m1 + (1.0 - b1) * g2;
    let v2 = b2 * v1 + (1.0 - b2) * g2 * g2;
    p *= 1.0 - lr * wd;
    p -= lr * (m2 / (1.0 - b1 * b1)) / ((v2 / (1.0 - b2 * b2)).sqrt() + eps);
    assert_eq!(s.values()[0].data()[0], p);
}

#[test]
fn weight_decay_alone_shrinks_geometrically() {
    let cfg = DpSgdConfig::default();
    let mut s = scalar_store(2.0);
    let mut opt = AdamW::new(&s, &cfg);
    let lr = 0.01;
    let mut expect = 2.0;
    for _ in 0..3 {
        opt.step(&mut s, &grads_of(vec![0.0]), lr);
        expect *= 1.0 - lr * cfg.weight_decay;
    }
    assert!((s.values()[0].data()[0] - expect).abs() < 1e-15);
}

#[test]
fn schedule_anchor_points() {
    let cfg = DpSgdConfig::default();
    let total = 5708;
    assert_eq!(schedule(0, total, &cfg), 0.0);
    let warm = (0.4 * total as f64) as u64;
    assert!((schedule(warm, total, &cfg) / 5.12e-4 - 1.0).abs() < 1e-3);
    assert!((schedule(1000, 2500, &cfg) - 5.12e-4).abs() < 1e-18);
    assert!((schedule(2500, 2500, &cfg) - 0.7 * 5.12e-4).abs() < 1e-15);
    assert_eq!(schedule(10 * total, total, &cfg), 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn one_step_equals_brute_force_pipeline(
        n in 2usize..24,
        b_frac in 0.1f64..1.0,
        sigma in 0.0f64..3.0,
        clip in 0.05f64..5.0,
        seed in any::<u64>(),
        vocab in 2usize..8,
    ) {
        let batch_size = ((n as f64 * b_frac).ceil() as u64).max(1);
        let cfg = DpSgdConfig {
            clip_norm: clip,
            sigma,
            batch_size,
            dataset_size: n as u64,
            steps: 10,
            lr: 0.05,
            seed,
            ..Default::default()
        };
        let mut net = TinyNet::new(vocab, 4, 6, seed);
        let data = token_batch(vocab, 5, n, seed ^ 3);
        let expect = brute_force_step(&net, &data, &cfg);
        let mut opt = DpSgd::new(net.params(), cfg, Precision::Double, 1).unwrap();
        opt.step(&mut net, &data).unwrap();
        let got: Vec<f64> = net.params().values().iter().flat_map(|t| t.data().to_vec()).collect();
        for (g, e) in got.iter().zip(&expect) {
            prop_assert!((g - e).abs() <= 1e-10 * e.abs().max(1e-3), "{} vs {}", g, e);
        }
    }
}

#[test]
fn replay_is_bit_identical() {
    let cfg = DpSgdConfig {
        batch_size: 6,
        dataset_size: 20,
        steps: 8,
        lr: 0.01,
        seed: 77,
        ..Default::default()
    };
    let data = token_batch(5, 4, 20, 1);
    let run = || {
        let mut net = TinyNet::new(5, 4, 4, 2);
        let mut opt = DpSgd::new(net.params(), cfg.clone(), Precision::Double, 1).unwrap();
        for _ in 0..cfg.steps {
            opt.step(&mut net, &data).unwrap();
        }
        net.store
    };
    assert_eq!(run(), run());
}

#[test]
fn empty_batch_still_takes_a_noise_step() {
    let cfg = DpSgdConfig {
        batch_size: 1,
        dataset_size: 1_000_000,
        steps: 1,
        lr: 0.01,
        ..Default::default()
    };
    let mut net = TinyNet::new(4, 3, 3, 0);
    let data = token_batch(4, 3, 1_000_000, 0);
    let mut cfg = cfg;
    let mut seed = 0;
    // find a seed whose first batch is empty
    while !poisson_sample(data.len(), cfg.q(), seed, 0).is_empty() {
        seed += 1;
    }
    cfg.seed = seed;
    let before = net.store.clone();
    let mut opt = DpSgd::new(net.params(), cfg, Precision::Double, 1).unwrap();
    let (report, noisy, _) = opt.step(&mut net, &data).unwrap();
    assert_eq!(report.realized_batch, 0);
    assert!(report.mean_loss.is_nan());
    assert!(noisy.values.norm() > 0.0);
    assert_ne!(net.store, before);
    assert_eq!(opt.steps_done(), 1);
}

#[test]
fn manifest_epsilon_comes_from_the_accountant() {
    let cfg = DpSgdConfig::default();
    let acct = Accountant::default();
    let m = RunManifest::new(&cfg, None, &acct, serde_json::json!({})).unwrap();
    let direct = acct
        .epsilon(&MechanismParams::new(cfg.sigma, cfg.q(), cfg.steps, 1.0 / cfg.dataset_size as f64).unwrap())
        .unwrap();
    assert_eq!(m.epsilon, Some(direct.spec.epsilon));
    assert_eq!(m.q, cfg.q());
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("manifest.json");
    m.write(&p).unwrap();
    assert_eq!(RunManifest::read(&p).unwrap(), m);

    let free = RunManifest::new(&DpSgdConfig { sigma: 0.0, ..cfg }, None, &acct, serde_json::json!({})).unwrap();
    assert_eq!(free.epsilon, None);
}

#[test]
fn config_validation() {
    assert!(DpSgdConfig::default().validate().is_ok());
    for bad in [
        DpSgdConfig {
            clip_norm: 0.0,
            ..Default::default()
        },
        DpSgdConfig {
            batch_size: 3000,
            ..Default::default()
        },
        DpSgdConfig {
            sigma: -1.0,
            ..Default::default()
        },
        DpSgdConfig {
            warmup_frac: 1.5,
            ..Default::default()
        },
    ] {
        assert!(bad.validate().is_err());
    }
}
