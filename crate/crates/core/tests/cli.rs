use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use srnn::cli::{checkpoint_save, eval_rows, RunConfig};
use srnn::data::generate_scale_task;
use srnn::model::AnyModel;
use srnn::train::init_single;

fn srnn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_srnn"))
        .args(args)
        .env_remove("SRNN_THREADS")
        .output()
        .expect("binary runs")
}

fn text(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

const TINY: &str = "\
shapes = 2
textures = 2
train_per_class = 4
val_per_class = 3
scales = 16x16, 32x32
cnn_channels = 4, 8
cnn_strides = 2, 2
batch_size = 4
pretrain_epochs = 1
pretrain_lr = 0.05
lr0 = 0.01
decay_every = 2
";

fn write_config(dir: &Path, name: &str, extra: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(
        &path,
        format!("{TINY}{extra}out_dir = {}\n", name.trim_end_matches(".cfg")),
    )
    .unwrap();
    path
}

#[test]
fn train_writes_one_metrics_row_per_epoch() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.cfg", "epochs = 3\nhead = srnn_halfgru\n");
    let out = srnn(&["train", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    let metrics = fs::read_to_string(dir.path().join("run/metrics.csv")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines[0], "epoch,lr,train_loss,val_top1,val_top5");
    assert_eq!(lines.len(), 1 + 3);
    assert!(dir.path().join("run/model.srnn").exists());
    assert!(dir.path().join("run/pretrained.srnn").exists());
    assert_eq!(
        fs::read_to_string(dir.path().join("run/pretrain_metrics.csv"))
            .unwrap()
            .lines()
            .count(),
        2
    );
}

#[test]
fn unknown_key_exits_2_with_line_and_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("typo.cfg");
    fs::write(&cfg, "epochs = 1\nmomentom = 0.9\n").unwrap();
    let out = srnn(&["train", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = text(&out.stderr);
    assert!(err.contains("momentom") && err.contains("line 2"), "{err}");
}

#[test]
fn divergence_exits_3_naming_the_epoch() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "boom.cfg",
        "head = single\nepochs = 2\nlr0 = 1e200\nmomentum = 0\n",
    );
    let out = srnn(&["train", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3), "{}", text(&out.stderr));
    assert!(text(&out.stderr).contains("epoch 0"), "{}", text(&out.stderr));
}

#[test]
fn repeated_train_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let a = write_config(dir.path(), "a.cfg", "epochs = 2\nhead = srnn_vanilla\n");
    let b = write_config(dir.path(), "b.cfg", "epochs = 2\nhead = srnn_vanilla\n");
    for cfg in [&a, &b] {
        assert_eq!(srnn(&["train", cfg.to_str().unwrap()]).status.code(), Some(0));
    }
    for file in ["metrics.csv", "model.srnn", "pretrained.srnn"] {
        let x = fs::read(dir.path().join("a").join(file)).unwrap();
        let y = fs::read(dir.path().join("b").join(file)).unwrap();
        assert_eq!(x, y, "{file}");
    }
}

#[test]
fn eval_of_untrained_model_is_at_chance() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("chance.cfg");
    fs::write(
        &cfg_path,
        "head = single\nval_per_class = 63\ntrain_per_class = 1\ncnn_channels = 4, 8\ncnn_strides = 2, 2\nout_dir = chance\n",
    )
    .unwrap();
    let cfg = RunConfig::load(&cfg_path).unwrap();
    let model = init_single(cfg.cnn_config(1).unwrap(), 16, 77);
    let ckpt = dir.path().join("random.srnn");
    checkpoint_save(&model, &ckpt).unwrap();
    let out = srnn(&["eval", ckpt.to_str().unwrap(), cfg_path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    let csv = fs::read_to_string(dir.path().join("chance/eval.csv")).unwrap();
    let rows: Vec<(String, f64)> = csv
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].to_string(), f[1].parse().unwrap())
        })
        .collect();
    let names: Vec<&str> = rows.iter().map(|r| r.0.as_str()).collect();
    assert_eq!(
        names,
        ["single@16x16", "single@32x32", "single@64x64", "ens_prob", "ens_logit"]
    );
    for (name, top1) in rows {
        assert!((top1 - 93.75).abs() <= 5.0, "{name}: {top1}");
    }
}

#[test]
fn eval_matches_direct_library_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write_config(dir.path(), "lib.cfg", "epochs = 2\nhead = srnn_vanilla\n");
    assert_eq!(srnn(&["train", cfg_path.to_str().unwrap()]).status.code(), Some(0));
    let run = dir.path().join("lib");
    let (pre, model) = (run.join("pretrained.srnn"), run.join("model.srnn"));
    let out = srnn(&[
        "eval",
        pre.to_str().unwrap(),
        model.to_str().unwrap(),
        cfg_path.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    let first = fs::read_to_string(run.join("eval.csv")).unwrap();
    let again = srnn(&[
        "eval",
        pre.to_str().unwrap(),
        model.to_str().unwrap(),
        cfg_path.to_str().unwrap(),
    ]);
    assert_eq!(text(&out.stdout), text(&again.stdout));
    assert_eq!(fs::read_to_string(run.join("eval.csv")).unwrap(), first);

    // bypass the binary: decode the checkpoints and evaluate in-process
    let cfg = RunConfig::load(&cfg_path).unwrap();
    let (_, val) = generate_scale_task(&cfg.synthetic_spec()).unwrap();
    let mut single = AnyModel::Single(init_single(cfg.cnn_config(1).unwrap(), 4, 0));
    srnn::cli::checkpoint_load(&mut single, &pre).unwrap();
    let AnyModel::Single(base) = &single else {
        unreachable!()
    };
    let mut vanilla = AnyModel::Vanilla(srnn::model::SrnnVanilla::from_pretrained(base));
    srnn::cli::checkpoint_load(&mut vanilla, &model).unwrap();
    let rows = eval_rows(&[single, vanilla], &val, &cfg.train.scales).unwrap();
    assert_eq!(srnn::cli::eval_csv(&rows), first);
    assert_eq!(rows.last().unwrap().name, "srnn_vanilla");
}

#[test]
fn eval_of_wrong_checkpoint_exits_4_listing_tensors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write_config(dir.path(), "m.cfg", "epochs = 1\nhead = single\n");
    assert_eq!(srnn(&["train", cfg_path.to_str().unwrap()]).status.code(), Some(0));
    let single = dir.path().join("m/model.srnn");
    let gru_cfg = write_config(dir.path(), "g.cfg", "head = srnn_halfgru\n");
    let out = srnn(&["bench", single.to_str().unwrap(), gru_cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(4));
    let err = text(&out.stderr);
    for name in ["srnn.U", "gate.Wz", "gate.Uz", "gate.bias"] {
        assert!(err.contains(name), "{err}");
    }
    let out = srnn(&["eval", single.to_str().unwrap(), gru_cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(4));

    let mut bytes = fs::read(&single).unwrap();
    bytes[20] ^= 1;
    let broken = dir.path().join("broken.srnn");
    fs::write(&broken, bytes).unwrap();
    let out = srnn(&["eval", broken.to_str().unwrap(), cfg_path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(4));
    assert!(text(&out.stderr).contains("CRC"), "{}", text(&out.stderr));
}

#[test]
fn bench_rows_are_monotone_in_cost_and_match_eval() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write_config(dir.path(), "b.cfg", "epochs = 1\nhead = srnn_halfgru\n");
    assert_eq!(srnn(&["train", cfg_path.to_str().unwrap()]).status.code(), Some(0));
    let model = dir.path().join("b/model.srnn");
    let out = srnn(&["bench", model.to_str().unwrap(), cfg_path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    let bench = fs::read_to_string(dir.path().join("b/bench.csv")).unwrap();
    let mut lines = bench.lines();
    assert_eq!(lines.next(), Some("scales_used,top1,mac_count"));
    let rows: Vec<Vec<String>> = lines.map(|l| l.split(',').map(str::to_string).collect()).collect();
    assert_eq!(rows.len(), 2);
    let macs: Vec<u64> = rows.iter().map(|r| r[2].parse().unwrap()).collect();
    assert!(macs[1] > macs[0]);

    assert_eq!(
        srnn(&["eval", model.to_str().unwrap(), cfg_path.to_str().unwrap()])
            .status
            .code(),
        Some(0)
    );
    let eval = fs::read_to_string(dir.path().join("b/eval.csv")).unwrap();
    let srnn_row = eval.lines().find(|l| l.starts_with("srnn_halfgru,")).unwrap();
    assert_eq!(srnn_row.split(',').nth(1).unwrap(), rows[1][1]);
}

#[test]
fn gradcheck_passes_and_catches_a_broken_rule() {
    let ok = srnn(&["gradcheck", "--seed", "3"]);
    assert_eq!(ok.status.code(), Some(0), "{}", text(&ok.stdout));
    assert!(text(&ok.stdout).contains("worst"));
    let bad = srnn(&["gradcheck", "--corrupt", "srnn.U"]);
    assert_eq!(bad.status.code(), Some(5));
    assert!(text(&bad.stderr).contains("srnn.U"), "{}", text(&bad.stderr));
}

#[test]
fn thread_count_does_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    let a = write_config(dir.path(), "t1.cfg", "epochs = 2\nhead = srnn_halfgru\n");
    let b = write_config(dir.path(), "t3.cfg", "epochs = 2\nhead = srnn_halfgru\n");
    let run = |cfg: &Path, threads: &str| {
        Command::new(env!("CARGO_BIN_EXE_srnn"))
            .args(["train", cfg.to_str().unwrap()])
            .env("SRNN_THREADS", threads)
            .output()
            .unwrap()
    };
    assert_eq!(run(&a, "1").status.code(), Some(0));
    assert_eq!(run(&b, "3").status.code(), Some(0));
    for file in ["metrics.csv", "model.srnn"] {
        assert_eq!(
            fs::read(dir.path().join("t1").join(file)).unwrap(),
            fs::read(dir.path().join("t3").join(file)).unwrap()
        );
    }
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

/// Values written by `make_fixtures.py`.
fn fixture_values(n: usize, offset: usize) -> Vec<f64> {
    (0..n).map(|i| ((i * 5 + offset) % 17) as f64 / 8.0 - 1.0).collect()
}

#[test]
fn independently_encoded_checkpoint_loads() {
    let base = init_single(srnn::model::BaseCnnConfig::new(1, &[2], &[1]).unwrap(), 2, 0);
    let mut model = AnyModel::Vanilla(srnn::model::SrnnVanilla::from_pretrained(&base));
    srnn::cli::checkpoint_load(&mut model, fixture("vanilla_micro.srnn")).unwrap();
    let expected = [
        ("cnn.stage0.weight", 18, 0),
        ("cnn.stage0.bias", 2, 1),
        ("fc.weight", 4, 2),
        ("fc.bias", 2, 3),
        ("srnn.U", 4, 4),
    ];
    let params = srnn::model::Parameterized::named_params(&model);
    assert_eq!(params.len(), expected.len());
    for ((name, t), (want, n, off)) in params.into_iter().zip(expected) {
        assert_eq!(name, want);
        assert_eq!(t.data(), fixture_values(n, off).as_slice(), "{name}");
    }
}

#[test]
fn cifar_fixtures_are_parsed_or_rejected() {
    use srnn::data::{load_cifar10_binary, Split};
    let ds = load_cifar10_binary(fixture("cifar_valid.bin"), Split::Val).unwrap();
    let labels: Vec<usize> = ds.samples().iter().map(|s| s.label).collect();
    assert_eq!(labels, [7, 0, 9]);
    let px = ds.samples()[1].image.pixels();
    assert_eq!(px.len(), 3072);
    assert_eq!(px[5], (31 + 5 * 7) as f64 / 255.0);
    for bad in ["cifar_truncated.bin", "cifar_bad_label.bin"] {
        let err = load_cifar10_binary(fixture(bad), Split::Val).unwrap_err();
        assert!(matches!(err, srnn::Error::Format { .. }), "{bad}: {err}");
    }
}
