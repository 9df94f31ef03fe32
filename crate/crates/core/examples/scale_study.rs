//! One seed of the synthetic scale comparison, printed as a table.
//!
//! `cargo run --release --example scale_study -- [seed]`
//!
//! Defaults match the library's desk configuration. Environment overrides:
//! NOISE, AMP, TRAIN, EDGE, ROT, FG, BG for the task; CH, PRE, PRELR, FT,
//! FTLR, DECAY for the network and schedule; SEPONLY=1 stops after the
//! centroid separability check.

use std::time::Instant;

use srnn::data::{generate_scale_task, SyntheticSpec};
use srnn::model::{AnyModel, BaseCnnConfig, Head};
use srnn::train::{fine_tune, fit, init_single, PreparedSet, TrainConfig};

fn env<T: std::str::FromStr>(key: &str, default: T) -> T {
    std::env::var(key).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn main() -> srnn::Result<()> {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let d = SyntheticSpec::default();
    let desk = TrainConfig::desk();
    let spec = SyntheticSpec {
        seed,
        noise: env("NOISE", d.noise),
        texture_amplitude: env("AMP", d.texture_amplitude),
        train_per_class: env("TRAIN", d.train_per_class),
        edge_width: env("EDGE", d.edge_width),
        max_rotation: env("ROT", d.max_rotation),
        foreground: env("FG", d.foreground),
        background: env("BG", d.background),
        ..d
    };
    let (train, val) = generate_scale_task(&spec)?;
    println!("{:?}", srnn::data::separability(&spec, &train, &val)?);
    if env("SEPONLY", 0) == 1 {
        return Ok(());
    }
    let channels: Vec<usize> = env("CH", "16,32,64".to_string())
        .split(',')
        .map(|c| c.parse().unwrap())
        .collect();
    let strides = vec![2; channels.len()];
    let cnn = BaseCnnConfig::new(1, &channels, &strides)?;
    let cfg = TrainConfig {
        seed,
        head: Head::Single,
        epochs: env("PRE", desk.pretrain_epochs),
        lr0: env("PRELR", desk.pretrain_lr),
        decay_every: env("DECAY", desk.decay_every),
        ..desk.clone()
    };
    let t = Instant::now();
    let pre = fit(&cfg, &train, &val, init_single(cnn, spec.classes(), seed))?;
    for r in &pre.history {
        println!("pre {:>2} loss {:.3} val {:.1}", r.epoch, r.train_loss, r.val_top1);
    }
    println!("pretrain {:.1}s", t.elapsed().as_secs_f64());
    let base = AnyModel::Single(pre.pretrained.clone());
    let set = PreparedSet::new(&val, &cfg.scales)?;
    for l in 0..3 {
        println!(
            "single {:?}: {:.2}",
            cfg.scales[l],
            set.evaluate(&[l], |x| base.predict(Head::Single, x))?.top1
        );
    }
    for h in [Head::EnsProb, Head::EnsLogit] {
        println!("{h}: {:.2}", set.evaluate(&[0, 1, 2], |x| base.predict(h, x))?.top1);
    }
    for head in [Head::SrnnVanilla, Head::SrnnHalfGru] {
        let t = Instant::now();
        let fcfg = TrainConfig {
            seed,
            head,
            epochs: env("FT", desk.epochs),
            lr0: env("FTLR", desk.lr0),
            decay_every: env("DECAY", desk.decay_every),
            ..desk.clone()
        };
        let (m, hist) = fine_tune(&fcfg, &train, &val, &pre.pretrained)?;
        for r in &hist {
            println!("{head} {:>2} loss {:.3} val {:.1}", r.epoch, r.train_loss, r.val_top1);
        }
        println!(
            "{head}: {:.2} ({:.1}s)",
            set.evaluate(&[0, 1, 2], |x| m.predict(head, x))?.top1,
            t.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
