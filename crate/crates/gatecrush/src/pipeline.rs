//! The commands of the three-stage pipeline. Each command reads its
//! prerequisites from the run directory and writes its artifacts there.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use gatecrush_core::data::{synthetic, Dataset};
use gatecrush_core::efficiency::{
    flops_network_int, flops_per_layer, train_lpnet, EfficiencyEvaluator, Evaluator, FlopsEvaluator, GateL1Evaluator,
    LatencyEvaluator, LpNetConfig,
};
use gatecrush_core::models::{ArchitectureSpec, Model};
use gatecrush_core::pruner::{self, EfficiencyMode};
use gatecrush_core::Real;

use crate::checkpoint::{self, Checkpoint};
use crate::cifar::{load_cifar10, Split};
use crate::config::{DataSource, RunConfig};
use crate::error::{io_err, Error, Result};
use crate::latency::{self, LatencyDataset, SystemClock};
use crate::report::{join_encoding, write_history, write_metrics};

pub const BASELINE_CKPT: &str = "baseline.gckp";
pub const GATED_CKPT: &str = "gated.gckp";
pub const PRUNED_CKPT: &str = "pruned.gckp";
pub const PRUNED_KEPT: &str = "pruned_kept.txt";
pub const FINETUNED_CKPT: &str = "finetuned.gckp";
pub const LATENCY_DATA: &str = "latency.jsonl";
pub const LPNET_CKPT: &str = "lpnet.gckp";

/// Independent random streams per stage so stages can be re-run alone.
fn stage_rng(seed: u64, stage: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stage);
    rng
}

pub fn spec(cfg: &RunConfig) -> Result<ArchitectureSpec> {
    Ok(ArchitectureSpec::by_name(&cfg.model.arch, cfg.model.classes, cfg.model.resolution)?)
}

fn latency_spec(cfg: &RunConfig) -> Result<ArchitectureSpec> {
    let res = cfg.latency.resolution.unwrap_or(cfg.model.resolution);
    Ok(ArchitectureSpec::by_name(&cfg.model.arch, cfg.model.classes, res)?)
}

/// Train and test sets of the configured source.
pub fn load_data<T: Real>(cfg: &RunConfig) -> Result<(Dataset<T>, Dataset<T>)> {
    let d = &cfg.data;
    match d.source {
        DataSource::Synthetic => {
            let all = synthetic(d.train_size + d.test_size, cfg.model.classes, cfg.model.resolution, cfg.seed)?;
            Ok(all.split_at(d.train_size))
        }
        DataSource::Cifar10 => {
            let norm = cfg.normalization();
            let train = load_cifar10::<T>(&d.dir, Split::Train, &norm, &d.checksums)?;
            let test = load_cifar10::<T>(&d.dir, Split::Test, &norm, &d.checksums)?;
            Ok((train.take(d.train_size), test.take(d.test_size)))
        }
    }
}

fn require(path: PathBuf, what: &'static str) -> Result<PathBuf> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(Error::MissingArtifact { what, path })
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(io_err(path))
}

fn flops_of<T: Real>(model: &Model<T>) -> Result<u64> {
    Ok(flops_network_int(&model.spec.geometry()?, &model.widths)?)
}

fn model_metrics<T: Real>(model: &Model<T>, accuracy: f64) -> Result<Vec<(&'static str, String)>> {
    Ok(vec![
        ("accuracy", accuracy.to_string()),
        ("flops", flops_of(model)?.to_string()),
        ("params", model.param_count().to_string()),
        ("encoding", join_encoding(&model.widths)),
    ])
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageSummary {
    pub accuracy: f64,
    pub flops: u64,
    pub encoding: Vec<usize>,
}

pub fn train_baseline<T: Real>(cfg: &RunConfig, out: &Path) -> Result<StageSummary> {
    let spec = spec(cfg)?;
    let (train, test) = load_data::<T>(cfg)?;
    let mut rng = stage_rng(cfg.seed, 1);
    let mut model = Model::<T>::new(&spec, &mut rng)?;
    let tc = cfg.baseline.train_config();
    let history = pruner::train_baseline(&mut model, &train, Some(&test), &tc, &mut rng)?;
    let accuracy = match history.last().and_then(|h| h.eval_accuracy) {
        Some(a) => a,
        None => pruner::evaluate(&mut model, &test, tc.eval_batch)?,
    };
    checkpoint::model_checkpoint(&model, cfg.prune.gate_mode(), "baseline").save(&out.join(BASELINE_CKPT))?;
    write_history(&out.join("baseline_history.csv"), &history)?;
    write_metrics(&out.join("baseline_metrics.csv"), &model_metrics(&model, accuracy)?)?;
    Ok(StageSummary {
        accuracy,
        flops: flops_of(&model)?,
        encoding: model.widths.clone(),
    })
}

/// Measures `latency.samples` encodings into the run's latency dataset,
/// continuing an existing file with the same settings.
pub fn collect_latency(cfg: &RunConfig, out: &Path) -> Result<usize> {
    let spec = latency_spec(cfg)?;
    let timing = cfg.timing();
    let path = out.join(LATENCY_DATA);
    let want = latency::manifest(&spec, &timing, cfg.seed);
    let have = if path.is_file() {
        let ds = LatencyDataset::read(&path)?;
        if ds.host() != want["host"] {
            return Err(Error::HostMismatch(ds.host().into(), want["host"].clone()));
        }
        ds.check_manifest(&want)?;
        if ds.manifest.get("seed") != want.get("seed") {
            return Err(Error::ManifestMismatch("seed differs from the existing dataset".into()));
        }
        ds.samples.len()
    } else {
        LatencyDataset::new(want).create(&path)?;
        0
    };
    let todo = cfg.latency.samples.saturating_sub(have);
    let mut clock = SystemClock::new();
    latency::collect_dataset(&spec, todo, have, &timing, cfg.seed, &mut clock, |s| LatencyDataset::append(&path, s))?;
    Ok(have + todo)
}

pub fn lpnet_config(cfg: &RunConfig) -> LpNetConfig {
    LpNetConfig {
        hidden: cfg.latency.lpnet_hidden,
        epochs: cfg.latency.lpnet_epochs,
        batch_size: cfg.latency.lpnet_batch_size,
        lr: cfg.latency.lpnet_lr,
        ..LpNetConfig::default()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LpNetSummary {
    pub test_error: f64,
    pub train_error: f64,
    pub samples: usize,
}

/// Fits the latency predictor. The checkpoint is only written when the
/// held-out error is below `latency.max_test_error`.
pub fn train_lpnet_cmd(cfg: &RunConfig, out: &Path) -> Result<LpNetSummary> {
    let path = require(out.join(LATENCY_DATA), "latency dataset (run collect-latency)")?;
    let ds = LatencyDataset::read(&path)?;
    let spec = latency_spec(cfg)?;
    ds.check_manifest(&latency::manifest(&spec, &cfg.timing(), cfg.seed))?;
    let mut rng = stage_rng(cfg.seed, 2);
    let fit = train_lpnet(&spec.geometry()?, None, &ds.pairs(), &lpnet_config(cfg), &mut rng)?;
    write_metrics(
        &out.join("lpnet_metrics.csv"),
        &[
            ("test_error", fit.test_error.to_string()),
            ("train_error", fit.train_error.to_string()),
            ("train_samples", fit.train_len.to_string()),
            ("test_samples", fit.test_len.to_string()),
        ],
    )?;
    let limit = cfg.latency.max_test_error;
    if fit.test_error >= limit {
        return Err(Error::LpNetError {
            error: fit.test_error,
            limit,
        });
    }
    let mut meta = std::collections::BTreeMap::new();
    meta.insert("arch".into(), spec.name.clone());
    meta.insert("resolution".into(), spec.resolution.to_string());
    checkpoint::lpnet_checkpoint(&fit.net, meta).save(&out.join(LPNET_CKPT))?;
    Ok(LpNetSummary {
        test_error: fit.test_error,
        train_error: fit.train_error,
        samples: ds.samples.len(),
    })
}

pub fn evaluator(cfg: &RunConfig, out: &Path, spec: &ArchitectureSpec) -> Result<Evaluator> {
    let geometry = spec.geometry()?;
    Ok(match cfg.prune.mode()? {
        EfficiencyMode::Flops => Evaluator::Flops(FlopsEvaluator { geometry }),
        EfficiencyMode::L1 => Evaluator::L1(GateL1Evaluator::new(&geometry)),
        EfficiencyMode::Latency => {
            let path = require(out.join(LPNET_CKPT), "LPNet checkpoint for latency mode (run train-lpnet)")?;
            let net = checkpoint::lpnet_from_checkpoint(&Checkpoint::load(&path)?, &path)?;
            Evaluator::Latency(LatencyEvaluator::Network(net))
        }
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneSummary {
    pub export: StageSummary,
    pub efficiency: Option<f64>,
}

fn kept_manifest(kept: &[Vec<usize>]) -> String {
    let mut s = String::new();
    for (l, k) in kept.iter().enumerate() {
        let idx: Vec<String> = k.iter().map(usize::to_string).collect();
        let _ = writeln!(s, "layer {l} ({}): {}", k.len(), idx.join(","));
    }
    s
}

/// Gated training from the baseline followed by export of the slimmed net.
pub fn prune<T: Real>(cfg: &RunConfig, out: &Path) -> Result<PruneSummary> {
    let pcfg = cfg.prune_config()?;
    let base = require(out.join(BASELINE_CKPT), "baseline checkpoint (run train-baseline)")?;
    let (mut model, _) = checkpoint::load_model::<T>(&base)?;
    let eval = evaluator(cfg, out, &model.spec)?;
    let (train, test) = load_data::<T>(cfg)?;
    let mut rng = stage_rng(cfg.seed, 3);
    let mode = cfg.prune.gate_mode();
    model.clear_gates();
    model.min_open = pcfg.min_open_gates;
    let layers = model.gateable_layers();
    model.attach_gates_with(&layers, mode, cfg.prune.gate_bias, &mut rng)?;
    let history = pruner::prune_train(&mut model, &eval, &train, Some(&test), &pcfg, &mut rng)?;
    checkpoint::model_checkpoint(&model, mode, "gated").save(&out.join(GATED_CKPT))?;
    write_history(&out.join("prune_history.csv"), &history)?;

    let exported = pruner::export_pruned(&model)?;
    let mut slim = exported.model;
    let accuracy = pruner::evaluate(&mut slim, &test, pcfg.prune.eval_batch)?;
    checkpoint::model_checkpoint(&slim, mode, "pruned").save(&out.join(PRUNED_CKPT))?;
    write_text(&out.join(PRUNED_KEPT), &kept_manifest(&exported.kept))?;
    let efficiency = eval.evaluate(&slim.widths.iter().map(|&c| c as f64).collect::<Vec<_>>())?;
    let mut metrics = model_metrics(&slim, accuracy)?;
    metrics.push(("efficiency", efficiency.to_string()));
    metrics.push(("efficiency_mode", eval.name().to_string()));
    write_metrics(&out.join("export_metrics.csv"), &metrics)?;

    if pcfg.mode == EfficiencyMode::Latency {
        let lspec = latency_spec(cfg)?;
        let timing = cfg.timing();
        let m = latency::measure_encoding(&lspec, &slim.widths, &timing, cfg.seed, &mut SystemClock::new())?;
        write_metrics(
            &out.join("export_latency.csv"),
            &[("latency_ms", m.median_ms.to_string()), ("iqr_ms", m.iqr_ms.to_string())],
        )?;
    }
    Ok(PruneSummary {
        export: StageSummary {
            accuracy,
            flops: flops_of(&slim)?,
            encoding: slim.widths.clone(),
        },
        efficiency: Some(efficiency),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneSummary {
    pub post_export_accuracy: f64,
    pub accuracy: f64,
    pub flops: u64,
}

pub fn finetune<T: Real>(cfg: &RunConfig, out: &Path) -> Result<FinetuneSummary> {
    let path = require(out.join(PRUNED_CKPT), "pruned checkpoint (run prune)")?;
    let (mut model, mode) = checkpoint::load_model::<T>(&path)?;
    let (train, test) = load_data::<T>(cfg)?;
    let tc = cfg.finetune.train_config();
    let before = pruner::evaluate(&mut model, &test, tc.eval_batch)?;
    let mut rng = stage_rng(cfg.seed, 5);
    let (history, accuracy) = pruner::finetune(&mut model, &train, &test, &tc, &mut rng)?;
    checkpoint::model_checkpoint(&model, mode, "finetuned").save(&out.join(FINETUNED_CKPT))?;
    write_history(&out.join("finetune_history.csv"), &history)?;
    let mut metrics = model_metrics(&model, accuracy)?;
    metrics.push(("post_export_accuracy", before.to_string()));
    metrics.push(("delta", (accuracy - before).to_string()));
    write_metrics(&out.join("finetune_metrics.csv"), &metrics)?;
    Ok(FinetuneSummary {
        post_export_accuracy: before,
        accuracy,
        flops: flops_of(&model)?,
    })
}

/// Per-layer FLOPs table of `counts` on `spec`.
pub fn flops_table(spec: &ArchitectureSpec, counts: &[usize]) -> Result<(String, u64)> {
    let layers = spec.layers()?;
    let per = flops_per_layer(&spec.geometry()?, counts)?;
    let mut s = String::from("layer,role,out_hw,kernel,c_in,c_out,flops\n");
    for (l, (layer, f)) in layers.iter().zip(&per).enumerate() {
        let c_in = layer.source.map_or(spec.input_channels, |p| counts[p]);
        let _ = writeln!(
            s,
            "{l},{:?},{}x{},{}x{},{c_in},{},{f}",
            layer.role, layer.out_size, layer.out_size, layer.kernel, layer.kernel, counts[l]
        );
    }
    let total: u64 = per.iter().sum();
    let _ = writeln!(s, "total,,,,,,{total}");
    Ok((s, total))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vgg16_table_total() {
        let spec = ArchitectureSpec::vgg16(10);
        let full = spec.geometry().unwrap().full_width();
        let (table, total) = flops_table(&spec, &full).unwrap();
        assert!((total as f64 / 313e6 - 1.0).abs() < 0.02);
        assert_eq!(table.lines().count(), 2 + full.len());
        assert!(table.starts_with("layer,role"));
    }

    #[test]
    fn stage_streams_differ() {
        use rand::Rng;
        let a: u64 = stage_rng(1, 1).random();
        let b: u64 = stage_rng(1, 2).random();
        assert_ne!(a, b);
        assert_eq!(a, stage_rng(1, 1).random::<u64>());
    }
}
