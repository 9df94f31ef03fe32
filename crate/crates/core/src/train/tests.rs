use super::*;
use crate::data::{Sample, Split};
use crate::vision::Image;

fn tiny_base(classes: usize, seed: u64) -> SingleScale {
    init_single(BaseCnnConfig::new(1, &[4, 6], &[1, 2]).unwrap(), classes, seed)
}

/// Two classes told apart by which half of the image is bright.
fn halves(n: usize, side: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..n)
        .map(|i| {
            let label = i % 2;
            let data = (0..side * side)
                .map(|p| {
                    let left = p % side < side / 2;
                    let base = if left == (label == 0) { 0.8 } else { 0.2 };
                    base + rng.gen_range(-0.1..0.1)
                })
                .collect();
            Sample {
                image: Image::new(Tensor::new(vec![1, side, side], data).unwrap()).unwrap(),
                label,
            }
        })
        .collect();
    Dataset::new(samples, 2, Split::Train).unwrap()
}

fn quick_cfg(head: Head) -> TrainConfig {
    TrainConfig {
        lr0: 0.05,
        epochs: 3,
        batch_size: 4,
        scales: vec![(4, 4), (8, 8)],
        head,
        pretrain_epochs: 1,
        pretrain_lr: 0.05,
        augment: false,
        ..TrainConfig::desk()
    }
}

#[test]
fn reference_schedule_values() {
    let cfg = TrainConfig::imagenet();
    assert_eq!(lr_at_epoch(&cfg, 0), 0.001);
    assert_eq!(lr_at_epoch(&cfg, 30), 0.0001);
    assert_eq!(lr_at_epoch(&cfg, 60), 0.00001);
}

#[test]
fn schedule_is_piecewise_constant_and_non_increasing() {
    let cfg = TrainConfig::desk();
    let lrs: Vec<f64> = (0..60).map(|e| lr_at_epoch(&cfg, e)).collect();
    for e in 1..60 {
        assert!(lrs[e] <= lrs[e - 1]);
        assert_eq!(lrs[e] < lrs[e - 1], e % cfg.decay_every == 0);
    }
}

#[test]
fn config_invariants() {
    assert!(TrainConfig::imagenet().validate().is_ok());
    assert!(TrainConfig::desk().validate().is_ok());
    let broken = [
        TrainConfig {
            lr0: 0.0,
            ..TrainConfig::desk()
        },
        TrainConfig {
            momentum: 1.0,
            ..TrainConfig::desk()
        },
        TrainConfig {
            decay_factor: 1.0,
            ..TrainConfig::desk()
        },
        TrainConfig {
            epochs: 0,
            ..TrainConfig::desk()
        },
        TrainConfig {
            scales: vec![(32, 32), (16, 16)],
            ..TrainConfig::desk()
        },
    ];
    for cfg in broken {
        assert!(matches!(cfg.validate(), Err(Error::Config(_))), "{cfg:?}");
    }
}

#[test]
fn ensemble_heads_cannot_be_trained() {
    let ds = halves(4, 8, 0);
    for head in [Head::EnsLogit, Head::EnsProb] {
        let err = fit(&quick_cfg(head), &ds, &ds, tiny_base(2, 0)).unwrap_err();
        assert!(matches!(err, Error::Contract(_)), "{err}");
    }
}

#[test]
fn one_epoch_lowers_training_loss() {
    let ds = halves(4, 8, 1);
    let base = tiny_base(2, 3);
    let set = PreparedSet::new(&ds, &[(8, 8)]).unwrap();
    let before = set.mean_loss(&[0], |l| base.infer(l)).unwrap();
    let cfg = TrainConfig {
        epochs: 1,
        scales: vec![(8, 8)],
        ..quick_cfg(Head::Single)
    };
    let out = fit(&cfg, &ds, &ds, base).unwrap();
    let AnyModel::Single(trained) = &out.model else {
        panic!()
    };
    let after = set.mean_loss(&[0], |l| trained.infer(l)).unwrap();
    assert!(after < before, "{before} -> {after}");
}

#[test]
fn history_lr_follows_schedule() {
    let ds = halves(8, 8, 2);
    let cfg = TrainConfig {
        epochs: 5,
        decay_every: 2,
        ..quick_cfg(Head::SrnnVanilla)
    };
    let out = fit(&cfg, &ds, &ds, tiny_base(2, 0)).unwrap();
    assert_eq!(out.history.len(), 5);
    assert_eq!(out.pretrain_history.len(), 1);
    for r in &out.history {
        assert_eq!(r.lr, lr_at_epoch(&cfg, r.epoch));
        assert!(r.val_top1 >= r.val_top5);
    }
    assert!(matches!(out.model, AnyModel::Vanilla(_)));
}

#[test]
fn fit_is_reproducible() {
    let ds = halves(12, 8, 4);
    let cfg = TrainConfig {
        augment: true,
        ..quick_cfg(Head::SrnnHalfGru)
    };
    let a = fit(&cfg, &ds, &ds, tiny_base(2, 1)).unwrap();
    let b = fit(&cfg, &ds, &ds, tiny_base(2, 1)).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.model, b.model);
}

#[test]
fn gradient_is_independent_of_thread_count() {
    let ds = halves(20, 8, 5);
    let model = SrnnHalfGru::from_pretrained(&tiny_base(2, 2));
    let images: Vec<Image> = ds.samples().iter().map(|s| s.image.clone()).collect();
    let labels: Vec<usize> = ds.samples().iter().map(|s| s.label).collect();
    let run = |threads| {
        crate::exec::with_threads(threads, || {
            batch_gradient(&model, &images, &labels, &[(4, 4), (8, 8)]).unwrap()
        })
    };
    let (l1, g1) = run(1);
    let (l3, g3) = run(3);
    assert_eq!(l1.to_bits(), l3.to_bits());
    assert_eq!(g1, g3);
}

#[test]
fn sharded_gradient_matches_whole_batch() {
    let ds = halves(11, 8, 6);
    let model = SrnnVanilla::from_pretrained(&tiny_base(2, 2));
    let images: Vec<Image> = ds.samples().iter().map(|s| s.image.clone()).collect();
    let labels: Vec<usize> = ds.samples().iter().map(|s| s.label).collect();
    let sizes = [(4, 4), (8, 8)];
    let (loss, grads) = batch_gradient(&model, &images, &labels, &sizes).unwrap();
    let pyramids: Vec<_> = images.iter().map(|i| build_pyramid(i, &sizes).unwrap()).collect();
    let refs: Vec<_> = pyramids.iter().collect();
    let mut g = Graph::new();
    let levels: Vec<_> = pyramid_batch(&refs)
        .unwrap()
        .into_iter()
        .map(|t| g.constant(t))
        .collect();
    let out = model.forward(&mut g, &levels).unwrap();
    let l = g.cross_entropy(out.logits, &labels).unwrap();
    let whole = g.backward(l).unwrap();
    assert!((g.value(l).item() - loss).abs() < 1e-12);
    for (p, sharded) in out.params.iter().zip(&grads) {
        let w = whole.get(*p).unwrap();
        let diff = w.zip_map(sharded, "diff", |a, b| a - b).unwrap().max_abs();
        assert!(diff < 1e-12, "{diff}");
    }
}

#[test]
fn exploding_rate_reports_divergence() {
    let ds = halves(8, 8, 7);
    let cfg = TrainConfig {
        lr0: 1e200,
        momentum: 0.0,
        ..quick_cfg(Head::Single)
    };
    let err = fit(&cfg, &ds, &ds, tiny_base(2, 0)).unwrap_err();
    assert!(matches!(err, Error::Diverged { .. }), "{err}");
}

#[test]
fn vanilla_head_fits_small_two_class_task() {
    let ds = halves(50, 8, 8);
    let cfg = TrainConfig {
        lr0: 0.02,
        epochs: 200,
        decay_every: 100,
        batch_size: 10,
        pretrain_epochs: 0,
        augment: false,
        ..quick_cfg(Head::SrnnVanilla)
    };
    let out = fit(&cfg, &ds, &ds, tiny_base(2, 9)).unwrap();
    let set = PreparedSet::new(&ds, &cfg.scales).unwrap();
    let err = set
        .evaluate(&[0, 1], |l| out.model.predict(Head::SrnnVanilla, l))
        .unwrap();
    assert!(err.top1 < 5.0, "train error {}", err.top1);
}
