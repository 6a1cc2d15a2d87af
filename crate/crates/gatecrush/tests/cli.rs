use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

const TOY: &str = r#"
seed = 11
[model]
arch = "toy"
classes = 4
resolution = 12
[data]
train_size = 400
test_size = 100
[baseline]
epochs = 3
lr = 0.05
[prune]
alpha = 2.0
efficiency = "flops"
epochs = 3
lr = 0.01
[finetune]
epochs = 3
lr = 0.01
"#;

fn gatecrush(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gatecrush"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = gatecrush(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn pipeline(dir: &Path, extra: &[&str]) {
    let cfg = dir.join("run.toml");
    std::fs::write(&cfg, TOY).unwrap();
    let out = dir.join("out");
    let base = [
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ];
    for cmd in ["train-baseline", "prune", "finetune", "report"] {
        let mut args: Vec<&str> = base.to_vec();
        args.extend_from_slice(extra);
        args.push(cmd);
        ok(&args);
    }
}

const ARTIFACTS: [&str; 17] = [
    "baseline.gckp",
    "baseline_history.csv",
    "baseline_metrics.csv",
    "gated.gckp",
    "prune_history.csv",
    "pruned.gckp",
    "pruned_kept.txt",
    "export_metrics.csv",
    "finetuned.gckp",
    "finetune_history.csv",
    "finetune_metrics.csv",
    "config.prune.toml",
    "report.csv",
    "curves.csv",
    "loss.svg",
    "efficiency.svg",
    "encoding.svg",
];

#[test]
fn smoke_run_writes_every_artifact_quickly() {
    let dir = tempfile::tempdir().unwrap();
    let t0 = Instant::now();
    pipeline(dir.path(), &[]);
    assert!(t0.elapsed().as_secs() < 120);
    for f in ARTIFACTS {
        assert!(dir.path().join("out").join(f).is_file(), "missing {f}");
    }
    let header = std::fs::read_to_string(dir.path().join("out/prune_history.csv")).unwrap();
    assert!(header.starts_with("epoch,train_loss,acc_loss,eff_value,predicted_latency_ms_or_flops,encoding,eval_accuracy\n"));
}

#[test]
fn reruns_are_bit_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pipeline(a.path(), &["--seed", "5"]);
    pipeline(b.path(), &["--seed", "5"]);
    for f in ARTIFACTS {
        let x = std::fs::read(a.path().join("out").join(f)).unwrap();
        let y = std::fs::read(b.path().join("out").join(f)).unwrap();
        assert!(x == y, "{f} differs between runs");
    }
}

#[test]
fn alpha_zero_keeps_efficiency_flat() {
    let dir = tempfile::tempdir().unwrap();
    pipeline(dir.path(), &["--alpha", "0"]);
    let out = dir.path().join("out");
    let base = std::fs::read_to_string(out.join("baseline_metrics.csv")).unwrap();
    let full: String = base.lines().find(|l| l.starts_with("flops,")).unwrap().into();
    let hist = std::fs::read_to_string(out.join("prune_history.csv")).unwrap();
    let full_m = full.trim_start_matches("flops,").parse::<f64>().unwrap() * 1e-6;
    for line in hist.lines().skip(1) {
        let eff: f64 = line.split(',').nth(4).unwrap().parse().unwrap();
        assert_eq!(eff, full_m, "{line}");
    }
    let export = std::fs::read_to_string(out.join("export_metrics.csv")).unwrap();
    assert!(export.contains(&full));
}

#[test]
fn latency_mode_names_missing_lpnet() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, TOY).unwrap();
    let out = dir.path().join("out");
    let args = ["--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
    let run = |extra: &[&str]| {
        let mut a = args.to_vec();
        a.extend_from_slice(extra);
        gatecrush(&a)
    };
    let missing = run(&["prune"]);
    assert!(!missing.status.success());
    assert!(String::from_utf8_lossy(&missing.stderr).contains("baseline.gckp"));
    assert!(run(&["train-baseline"]).status.success());
    let missing = run(&["--efficiency", "latency", "prune"]);
    assert!(!missing.status.success());
    let err = String::from_utf8_lossy(&missing.stderr);
    assert!(err.contains("lpnet.gckp") && err.contains("LPNet"), "{err}");
    let missing = run(&["finetune"]);
    assert!(String::from_utf8_lossy(&missing.stderr).contains("pruned.gckp"));
}

#[test]
fn flops_command_reports_vgg16_baseline() {
    let out = ok(&["flops", "--arch", "vgg16"]);
    let total: f64 = out
        .lines()
        .find(|l| l.starts_with("total,"))
        .unwrap()
        .rsplit(',')
        .next()
        .unwrap()
        .parse()
        .unwrap();
    assert!((total / 313e6 - 1.0).abs() < 0.02, "{total}");
    assert!(out.contains("313"));
    let enc = ok(&["flops", "--arch", "toy", "--encoding", "4,16"]);
    assert!(enc.contains("total,,,,,,"));
}

#[test]
fn unknown_config_keys_fail() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[prune]\nalhpa = 1.0\n").unwrap();
    let out = gatecrush(&["--config", cfg.to_str().unwrap(), "flops"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("alhpa"));
}

#[test]
fn resolved_config_reruns() {
    let dir = tempfile::tempdir().unwrap();
    pipeline(dir.path(), &["--alpha", "1.5"]);
    let resolved = dir.path().join("out/config.prune.toml");
    let text = std::fs::read_to_string(&resolved).unwrap();
    assert!(text.contains("alpha = 1.5"));
    let again = dir.path().join("again");
    ok(&["--config", resolved.to_str().unwrap(), "--out", again.to_str().unwrap(), "train-baseline"]);
    assert_eq!(
        std::fs::read(again.join("baseline.gckp")).unwrap(),
        std::fs::read(dir.path().join("out/baseline.gckp")).unwrap()
    );
}

fn fake_cifar(dir: &Path, per_file: usize) {
    std::fs::create_dir_all(dir).unwrap();
    let names = ["data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin", "data_batch_4.bin", "data_batch_5.bin", "test_batch.bin"];
    for (f, name) in names.iter().enumerate() {
        let mut bytes = Vec::new();
        for i in 0..per_file {
            let label = ((i + f) % 10) as u8;
            let pixels: Vec<u8> = (0..3072).map(|p| ((p * 7 + i * 13 + label as usize * 50) % 256) as u8).collect();
            bytes.extend(gatecrush_core::data::encode_cifar10_record(label, &pixels).unwrap());
        }
        std::fs::write(dir.join(name), bytes).unwrap();
    }
}

#[test]
fn cifar_source_runs_and_verifies_checksums() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("cifar");
    fake_cifar(&data, 20);
    let cfg = dir.path().join("run.toml");
    let body = format!(
        "[model]\narch = \"toy\"\nresolution = 32\n[data]\nsource = \"cifar10\"\ndir = {:?}\ntrain_size = 60\ntest_size = 15\n[baseline]\nepochs = 1\n",
        data
    );
    std::fs::write(&cfg, &body).unwrap();
    let out = dir.path().join("out");
    let stdout = ok(&["--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "train-baseline"]);
    assert!(stdout.contains("accuracy="));

    let bad = format!("{body}[data.checksums]\n\"test_batch.bin\" = \"{}\"\n", "0".repeat(64));
    std::fs::write(&cfg, bad).unwrap();
    let run = gatecrush(&["--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "train-baseline"]);
    assert!(!run.status.success());
    assert!(String::from_utf8_lossy(&run.stderr).contains("test_batch.bin"));

    std::fs::remove_file(data.join("data_batch_3.bin")).unwrap();
    let run = gatecrush(&["--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "train-baseline"]);
    assert!(String::from_utf8_lossy(&run.stderr).contains("data_batch_3.bin"));
}
