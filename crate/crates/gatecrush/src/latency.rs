//! Host latency measurement of decoded encodings and the latency dataset
//! file format.
//!
//! Dataset files look like
//!
//! ```text
//! gatecrush-latency v1
//! # arch: resnet8
//! # host: linux x86_64 ...
//! {"encoding":[16,16,16,8,32,32,32,64,64],"latency_ms":1.234567,"iqr_ms":0.010000}
//! ```
//!
//! Records are only ever appended.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use gatecrush_core::efficiency::{sample_encodings, LatencySample};
use gatecrush_core::models::{ArchitectureSpec, Gating, Model};
use gatecrush_core::{BnMode, Tensor};

use crate::error::{format_err, io_err, Error, Result};

pub const HEADER: &str = "gatecrush-latency v1";
/// Largest accepted `iqr / median` of one measurement.
pub const STABILITY_BAND: f64 = 0.15;
/// Largest tolerated fraction of measurements failing the stability gate.
pub const MAX_FAILURE_RATE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimingConfig {
    pub batch_size: usize,
    pub warmup_runs: usize,
    pub timed_runs: usize,
}

impl TimingConfig {
    pub const PAPER_BATCH: usize = 100;

    pub fn validate(&self) -> Result<()> {
        if self.timed_runs < 3 || self.warmup_runs < 1 || self.batch_size == 0 {
            return Err(Error::Config(format!(
                "timing needs timed_runs >= 3, warmup_runs >= 1 and a positive batch (got {self:?})"
            )));
        }
        Ok(())
    }
}

impl Default for TimingConfig {
    fn default() -> Self {
        TimingConfig {
            batch_size: 16,
            warmup_runs: 5,
            timed_runs: 30,
        }
    }
}

/// Monotonic nanosecond clock.
pub trait Clock {
    fn now_ns(&mut self) -> u64;
    /// Smallest observable tick.
    fn granularity_ns(&self) -> u64;

    /// Waits before a retry.
    fn pause_ms(&mut self, ms: u64) {
        std::thread::sleep(std::time::Duration::from_millis(ms));
    }
}

pub struct SystemClock {
    origin: Instant,
    granularity: u64,
}

impl SystemClock {
    pub fn new() -> Self {
        let origin = Instant::now();
        let mut best = u64::MAX;
        for _ in 0..64 {
            let a = origin.elapsed().as_nanos() as u64;
            let mut b = a;
            while b == a {
                b = origin.elapsed().as_nanos() as u64;
            }
            best = best.min(b - a);
        }
        SystemClock {
            origin,
            granularity: best.max(1),
        }
    }
}

impl Default for SystemClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for SystemClock {
    fn now_ns(&mut self) -> u64 {
        self.origin.elapsed().as_nanos() as u64
    }

    fn granularity_ns(&self) -> u64 {
        self.granularity
    }
}

/// Linear-interpolated quantile of sorted data.
fn quantile_sorted(xs: &[f64], q: f64) -> f64 {
    let pos = q * (xs.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    xs[lo] + (xs[hi] - xs[lo]) * (pos - lo as f64)
}

fn sorted(xs: &[f64]) -> Vec<f64> {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

pub fn median(xs: &[f64]) -> f64 {
    quantile_sorted(&sorted(xs), 0.5)
}

pub fn iqr(xs: &[f64]) -> f64 {
    let s = sorted(xs);
    quantile_sorted(&s, 0.75) - quantile_sorted(&s, 0.25)
}

/// Rounds to the 6 decimals stored in dataset files.
pub fn round6(x: f64) -> f64 {
    format!("{x:.6}").parse().expect("formatted float parses")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Measurement {
    pub median_ms: f64,
    pub iqr_ms: f64,
    pub runs_ms: Vec<f64>,
}

impl Measurement {
    pub fn is_stable(&self) -> bool {
        self.iqr_ms <= STABILITY_BAND * self.median_ms
    }
}

/// Random input batch for timing a model of `spec`.
pub fn timing_batch(spec: &ArchitectureSpec, batch: usize, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = [batch, spec.input_channels, spec.resolution, spec.resolution];
    Tensor::from_fn(shape, |_| rng.random_range(-1.0f32..1.0))
}

fn check_resolution(med_ns: f64, granularity: u64) -> Result<()> {
    if med_ns < 10.0 * granularity as f64 {
        return Err(Error::TimingResolution {
            median_ns: med_ns as u64,
            granularity_ns: granularity,
        });
    }
    Ok(())
}

fn summarize(runs_ns: &[f64]) -> Measurement {
    let runs_ms: Vec<f64> = runs_ns.iter().map(|ns| ns * 1e-6).collect();
    Measurement {
        median_ms: round6(median(&runs_ms)),
        iqr_ms: round6(iqr(&runs_ms)),
        runs_ms,
    }
}

fn timed_forward<C: Clock>(model: &mut Model<f32>, x: &Tensor<f32>, clock: &mut C) -> Result<f64> {
    let t0 = clock.now_ns();
    std::hint::black_box(model.predict(std::hint::black_box(x), BnMode::Eval, Gating::Off)?);
    Ok(clock.now_ns().saturating_sub(t0) as f64)
}

/// Runs `warmup_runs` untimed and `timed_runs` timed eval-mode forwards of
/// `x`; the reported latency is the median run in milliseconds.
pub fn measure_latency<C: Clock>(model: &mut Model<f32>, x: &Tensor<f32>, cfg: &TimingConfig, clock: &mut C) -> Result<Measurement> {
    cfg.validate()?;
    for _ in 0..cfg.warmup_runs {
        std::hint::black_box(model.predict(x, BnMode::Eval, Gating::Off)?);
    }
    let runs_ns = (0..cfg.timed_runs)
        .map(|_| timed_forward(model, x, clock))
        .collect::<Result<Vec<_>>>()?;
    check_resolution(median(&runs_ns), clock.granularity_ns())?;
    Ok(summarize(&runs_ns))
}

/// As [`measure_latency`], alternating each run of `model` with a run of
/// `reference` so both see the same machine conditions.
pub fn measure_interleaved<C: Clock>(
    model: &mut Model<f32>,
    reference: &mut Model<f32>,
    x: &Tensor<f32>,
    cfg: &TimingConfig,
    clock: &mut C,
) -> Result<(Measurement, Measurement)> {
    cfg.validate()?;
    for _ in 0..cfg.warmup_runs {
        std::hint::black_box(model.predict(x, BnMode::Eval, Gating::Off)?);
        std::hint::black_box(reference.predict(x, BnMode::Eval, Gating::Off)?);
    }
    let mut a = Vec::with_capacity(cfg.timed_runs);
    let mut b = Vec::with_capacity(cfg.timed_runs);
    for _ in 0..cfg.timed_runs {
        a.push(timed_forward(model, x, clock)?);
        b.push(timed_forward(reference, x, clock)?);
    }
    check_resolution(median(&a), clock.granularity_ns())?;
    Ok((summarize(&a), summarize(&b)))
}

/// Base architecture with each layer narrowed to its count.
pub fn decode_network<R: Rng + ?Sized>(spec: &ArchitectureSpec, counts: &[usize], rng: &mut R) -> Result<Model<f32>> {
    Ok(Model::with_widths(spec, counts, rng)?)
}

pub fn host_descriptor() -> String {
    let cpu = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|m| m.trim().to_string())
        })
        .unwrap_or_else(|| "unknown-cpu".into());
    let cpus = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    format!("{} {} {cpu} cpus={cpus}", std::env::consts::OS, std::env::consts::ARCH)
}

/// Manifest of a collection run.
pub fn manifest(spec: &ArchitectureSpec, cfg: &TimingConfig, seed: u64) -> BTreeMap<String, String> {
    let mut m = BTreeMap::new();
    m.insert("arch".into(), spec.name.clone());
    m.insert("classes".into(), spec.num_classes.to_string());
    m.insert("resolution".into(), spec.resolution.to_string());
    m.insert("batch_size".into(), cfg.batch_size.to_string());
    m.insert("warmup_runs".into(), cfg.warmup_runs.to_string());
    m.insert("timed_runs".into(), cfg.timed_runs.to_string());
    m.insert("seed".into(), seed.to_string());
    m.insert("host".into(), host_descriptor());
    m.insert("toolkit".into(), format!("gatecrush {}", env!("CARGO_PKG_VERSION")));
    m
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CollectStats {
    pub measured: usize,
    pub retried: usize,
    pub failed: usize,
    /// Idle latency of the full-width reference model.
    pub reference_ms: f64,
}

/// Calibrated full-width model timed alongside every sample. Host
/// contention slows both models of an interleaved window alike, so each
/// sample run is rescaled by the reference's idle/observed ratio.
pub struct DriftGate {
    pub model: Model<f32>,
    pub idle_ms: f64,
}

/// Largest accepted relative deviation of the reference model.
pub const DRIFT_BAND: f64 = 0.5;
/// Measurement attempts per sample before it counts as failed.
pub const MAX_ATTEMPTS: usize = 6;

impl DriftGate {
    /// Idle latency is the median of five reference medians.
    pub fn calibrate<C: Clock>(spec: &ArchitectureSpec, x: &Tensor<f32>, cfg: &TimingConfig, seed: u64, clock: &mut C) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut model = decode_network(spec, &spec.geometry()?.full_width(), &mut rng)?;
        let medians = (0..5)
            .map(|_| measure_latency(&mut model, x, cfg, clock).map(|m| m.median_ms))
            .collect::<Result<Vec<_>>>()?;
        Ok(DriftGate {
            model,
            idle_ms: median(&medians),
        })
    }

    pub fn accepts(&self, reference: &Measurement) -> bool {
        (reference.median_ms / self.idle_ms - 1.0).abs() <= DRIFT_BAND
    }

    /// Drift-corrected latency of `model`, retried with a growing pause
    /// until it is stable and the reference is within [`DRIFT_BAND`].
    /// Returns `None` after [`MAX_ATTEMPTS`], plus the number of retries.
    pub fn measure<C: Clock>(
        &mut self,
        model: &mut Model<f32>,
        x: &Tensor<f32>,
        cfg: &TimingConfig,
        clock: &mut C,
    ) -> Result<(Option<Measurement>, usize)> {
        for attempt in 0..MAX_ATTEMPTS {
            if attempt > 0 {
                clock.pause_ms(100 * attempt as u64);
            }
            let (m, r) = measure_interleaved(model, &mut self.model, x, cfg, clock)?;
            let m = self.correct(&m, &r);
            if m.is_stable() && self.accepts(&r) {
                return Ok((Some(m), attempt));
            }
        }
        Ok((None, MAX_ATTEMPTS - 1))
    }

    /// Sample runs rescaled pairwise to idle machine conditions.
    pub fn correct(&self, sample: &Measurement, reference: &Measurement) -> Measurement {
        let runs_ms: Vec<f64> = sample
            .runs_ms
            .iter()
            .zip(&reference.runs_ms)
            .map(|(a, b)| a / b * self.idle_ms)
            .collect();
        Measurement {
            median_ms: round6(median(&runs_ms)),
            iqr_ms: round6(iqr(&runs_ms)),
            runs_ms,
        }
    }
}

/// Drift-corrected latency of one encoding, on the same input batch and
/// reference model as [`collect_dataset`] with this `seed`, so the value is
/// comparable with the dataset's samples.
pub fn measure_encoding<C: Clock>(
    spec: &ArchitectureSpec,
    counts: &[usize],
    cfg: &TimingConfig,
    seed: u64,
    clock: &mut C,
) -> Result<Measurement> {
    cfg.validate()?;
    let x = timing_batch(spec, cfg.batch_size, seed ^ 0x5eed);
    let mut gate = DriftGate::calibrate(spec, &x, cfg, seed, clock)?;
    let mut model = decode_network(spec, counts, &mut ChaCha8Rng::seed_from_u64(seed.wrapping_sub(1)))?;
    match gate.measure(&mut model, &x, cfg, clock)? {
        (Some(m), _) => Ok(m),
        (None, _) => Err(Error::Unstable { failed: 1, total: 1 }),
    }
}

/// Measures `n` encodings sampled from `spec`'s grid, skipping the first
/// `skip` encodings of the seeded stream. Every accepted sample is handed
/// to `sink` as soon as it is measured, in drift-corrected milliseconds.
/// A sample is retried with a growing pause while its corrected spread
/// exceeds [`STABILITY_BAND`] or the reference drifts past [`DRIFT_BAND`].
/// After [`MAX_ATTEMPTS`] it is dropped, and the run aborts once more than
/// 5% of the samples have been dropped.
pub fn collect_dataset<C: Clock>(
    spec: &ArchitectureSpec,
    n: usize,
    skip: usize,
    cfg: &TimingConfig,
    seed: u64,
    clock: &mut C,
    mut sink: impl FnMut(&LatencySample) -> Result<()>,
) -> Result<CollectStats> {
    cfg.validate()?;
    let geometry = spec.geometry()?;
    let mut enc_rng = ChaCha8Rng::seed_from_u64(seed);
    let x = timing_batch(spec, cfg.batch_size, seed ^ 0x5eed);
    let mut gate = DriftGate::calibrate(spec, &x, cfg, seed, clock)?;
    let mut stats = CollectStats {
        reference_ms: gate.idle_ms,
        ..CollectStats::default()
    };
    let encodings = sample_encodings(&geometry, skip + n, &mut enc_rng);
    for (i, enc) in encodings.into_iter().enumerate().skip(skip) {
        let mut wrng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1 + i as u64));
        let mut model = decode_network(spec, &enc.counts, &mut wrng)?;
        let (accepted, retries) = gate.measure(&mut model, &x, cfg, clock)?;
        stats.retried += retries;
        let Some(m) = accepted else {
            stats.failed += 1;
            if stats.failed as f64 > MAX_FAILURE_RATE * n as f64 {
                return Err(Error::Unstable {
                    failed: stats.failed,
                    total: stats.measured + stats.failed,
                });
            }
            continue;
        };
        stats.measured += 1;
        sink(&LatencySample {
            counts: enc.counts,
            latency_ms: m.median_ms,
            iqr_ms: m.iqr_ms,
        })?;
    }
    Ok(stats)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    encoding: Vec<usize>,
    latency_ms: f64,
    iqr_ms: f64,
}

pub fn format_record(s: &LatencySample) -> String {
    let enc: Vec<String> = s.counts.iter().map(usize::to_string).collect();
    format!(
        "{{\"encoding\":[{}],\"latency_ms\":{:.6},\"iqr_ms\":{:.6}}}",
        enc.join(","),
        s.latency_ms,
        s.iqr_ms
    )
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LatencyDataset {
    pub manifest: BTreeMap<String, String>,
    pub samples: Vec<LatencySample>,
}

impl LatencyDataset {
    pub fn new(manifest: BTreeMap<String, String>) -> Self {
        LatencyDataset {
            manifest,
            samples: Vec::new(),
        }
    }

    pub fn header_text(&self) -> String {
        let mut out = format!("{HEADER}\n");
        for (k, v) in &self.manifest {
            out.push_str(&format!("# {k}: {v}\n"));
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = self.header_text();
        for s in &self.samples {
            out.push_str(&format_record(s));
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h == HEADER => {}
            _ => return Err(format_err(path, format!("missing {HEADER:?} header"))),
        }
        let mut ds = LatencyDataset::default();
        for (i, line) in lines {
            if let Some(rest) = line.strip_prefix("# ") {
                if !ds.samples.is_empty() {
                    return Err(format_err(path, format!("line {}: manifest after records", i + 1)));
                }
                let (k, v) = rest
                    .split_once(": ")
                    .ok_or_else(|| format_err(path, format!("line {}: bad manifest line", i + 1)))?;
                ds.manifest.insert(k.into(), v.into());
            } else if !line.trim().is_empty() {
                let r: Record = serde_json::from_str(line).map_err(|e| format_err(path, format!("line {}: {e}", i + 1)))?;
                if !(r.latency_ms > 0.0) {
                    return Err(format_err(path, format!("line {}: latency must be positive", i + 1)));
                }
                ds.samples.push(LatencySample {
                    counts: r.encoding,
                    latency_ms: r.latency_ms,
                    iqr_ms: r.iqr_ms,
                });
            }
        }
        Ok(ds)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::parse(&text, path)
    }

    /// Creates a new file holding the header and the current samples.
    pub fn create(&self, path: &Path) -> Result<()> {
        let mut f = OpenOptions::new().write(true).create_new(true).open(path).map_err(io_err(path))?;
        f.write_all(self.to_text().as_bytes()).map_err(io_err(path))
    }

    /// Appends one record to an existing file.
    pub fn append(path: &Path, sample: &LatencySample) -> Result<()> {
        let mut f = OpenOptions::new().append(true).open(path).map_err(io_err(path))?;
        writeln!(f, "{}", format_record(sample)).map_err(io_err(path))
    }

    pub fn host(&self) -> &str {
        self.manifest.get("host").map(String::as_str).unwrap_or("")
    }

    /// Joins `other` into `self`; datasets from different hosts or
    /// different collection settings are refused.
    pub fn merge(&mut self, other: &LatencyDataset) -> Result<()> {
        if self.host() != other.host() {
            return Err(Error::HostMismatch(self.host().into(), other.host().into()));
        }
        self.check_manifest(&other.manifest)?;
        self.samples.extend(other.samples.iter().cloned());
        Ok(())
    }

    /// Fails when any setting other than host, seed and toolkit differs
    /// from `expected`.
    pub fn check_manifest(&self, expected: &BTreeMap<String, String>) -> Result<()> {
        for (k, v) in expected {
            if matches!(k.as_str(), "host" | "seed" | "toolkit") {
                continue;
            }
            match self.manifest.get(k) {
                Some(have) if have == v => {}
                have => {
                    return Err(Error::ManifestMismatch(format!(
                        "{k}: dataset has {:?}, requested {v:?}",
                        have.map(String::as_str).unwrap_or("<absent>")
                    )))
                }
            }
        }
        Ok(())
    }

    /// `(counts, latency)` pairs for LPNet training.
    pub fn pairs(&self) -> Vec<(Vec<f64>, f64)> {
        self.samples
            .iter()
            .map(|s| (s.counts.iter().map(|&c| c as f64).collect(), s.latency_ms))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct TickClock {
        t: u64,
        step: u64,
        granularity: u64,
    }

    impl Clock for TickClock {
        fn now_ns(&mut self) -> u64 {
            self.t += self.step;
            self.t
        }

        fn granularity_ns(&self) -> u64 {
            self.granularity
        }
    }

    fn sample(c: Vec<usize>, l: f64) -> LatencySample {
        LatencySample {
            counts: c,
            latency_ms: l,
            iqr_ms: 0.01,
        }
    }

    #[test]
    fn timing_config_limits() {
        assert!(TimingConfig::default().validate().is_ok());
        let bad = TimingConfig {
            timed_runs: 2,
            ..TimingConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TimingConfig {
            warmup_runs: 0,
            ..TimingConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn median_and_iqr() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_eq!(iqr(&[1.0, 2.0, 3.0, 4.0, 5.0]), 2.0);
    }

    #[test]
    fn coarse_clock_is_rejected() {
        let spec = ArchitectureSpec::toy(2, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = Model::new(&spec, &mut rng).unwrap();
        let x = timing_batch(&spec, 1, 0);
        let cfg = TimingConfig {
            batch_size: 1,
            warmup_runs: 1,
            timed_runs: 3,
        };
        let mut clock = TickClock {
            t: 0,
            step: 100,
            granularity: 1000,
        };
        assert!(matches!(
            measure_latency(&mut model, &x, &cfg, &mut clock),
            Err(Error::TimingResolution { .. })
        ));
        let mut fine = TickClock {
            t: 0,
            step: 100_000,
            granularity: 1,
        };
        let m = measure_latency(&mut model, &x, &cfg, &mut fine).unwrap();
        assert_eq!(m.median_ms, 0.1);
        assert_eq!(m.iqr_ms, 0.0);
    }

    #[test]
    fn collection_is_reproducible_with_a_steady_clock() {
        let spec = ArchitectureSpec::toy(2, 8);
        let cfg = TimingConfig {
            batch_size: 1,
            warmup_runs: 1,
            timed_runs: 3,
        };
        let run = |skip: usize, n: usize| {
            let mut clock = TickClock {
                t: 0,
                step: 50_000,
                granularity: 1,
            };
            let mut out = Vec::new();
            let stats = collect_dataset(&spec, n, skip, &cfg, 9, &mut clock, |s| {
                out.push(s.clone());
                Ok(())
            })
            .unwrap();
            assert_eq!((stats.measured, stats.failed, stats.retried), (n, 0, 0));
            out
        };
        let all = run(0, 5);
        assert_eq!(all, run(0, 5));
        assert_eq!(&all[2..], &run(2, 3)[..]);
        assert!(all.iter().all(|s| s.latency_ms == 0.05 && s.counts[1] == 16));
    }

    #[test]
    fn drift_gate_band() {
        let spec = ArchitectureSpec::toy(2, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let gate = DriftGate {
            model: Model::new(&spec, &mut rng).unwrap(),
            idle_ms: 2.0,
        };
        let m = |ms: f64| Measurement {
            median_ms: ms,
            iqr_ms: 0.0,
            runs_ms: vec![],
        };
        assert!(gate.accepts(&m(2.9)));
        assert!(gate.accepts(&m(1.1)));
        assert!(!gate.accepts(&m(3.1)));
        let slow = Measurement {
            median_ms: 0.0,
            iqr_ms: 0.0,
            runs_ms: vec![1.5, 3.0],
        };
        let reference = Measurement {
            median_ms: 0.0,
            iqr_ms: 0.0,
            runs_ms: vec![3.0, 6.0],
        };
        let fixed = gate.correct(&slow, &reference);
        assert_eq!(fixed.runs_ms, vec![1.0, 1.0]);
        assert_eq!((fixed.median_ms, fixed.iqr_ms), (1.0, 0.0));
    }

    #[test]
    fn decode_rejects_zero_width() {
        let spec = ArchitectureSpec::resnet(1, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut counts = spec.geometry().unwrap().full_width();
        assert!(decode_network(&spec, &counts, &mut rng).is_ok());
        counts[1] = 0;
        assert!(decode_network(&spec, &counts, &mut rng).is_err());
    }

    #[test]
    fn text_round_trip() {
        let mut ds = LatencyDataset::new(BTreeMap::from([("arch".into(), "toy".into()), ("host".into(), "h".into())]));
        ds.samples.push(sample(vec![4, 16], round6(1.0 / 3.0)));
        ds.samples.push(sample(vec![8, 16], 2.5));
        let back = LatencyDataset::parse(&ds.to_text(), Path::new("mem")).unwrap();
        assert_eq!(back, ds);
        assert!(ds.to_text().contains("\"latency_ms\":0.333333,"));
    }

    #[test]
    fn parse_errors() {
        let p = Path::new("mem");
        assert!(LatencyDataset::parse("nope\n", p).is_err());
        let neg = format!("{HEADER}\n{{\"encoding\":[1],\"latency_ms\":-1.0,\"iqr_ms\":0.0}}\n");
        assert!(LatencyDataset::parse(&neg, p).is_err());
        let late = format!("{HEADER}\n{{\"encoding\":[1],\"latency_ms\":1.0,\"iqr_ms\":0.0}}\n# a: b\n");
        assert!(LatencyDataset::parse(&late, p).is_err());
    }

    #[test]
    fn merge_refuses_other_hosts() {
        let m = |host: &str| BTreeMap::from([("arch".to_string(), "toy".to_string()), ("host".to_string(), host.to_string())]);
        let mut a = LatencyDataset::new(m("a"));
        let mut b = LatencyDataset::new(m("a"));
        b.samples.push(sample(vec![1], 1.0));
        a.merge(&b).unwrap();
        assert_eq!(a.samples.len(), 1);
        let c = LatencyDataset::new(m("c"));
        assert!(matches!(a.merge(&c), Err(Error::HostMismatch(..))));
    }

    #[test]
    fn manifest_check_ignores_host_and_seed() {
        let spec = ArchitectureSpec::toy(2, 8);
        let cfg = TimingConfig::default();
        let ds = LatencyDataset::new(manifest(&spec, &cfg, 1));
        let mut want = manifest(&spec, &cfg, 2);
        want.insert("host".into(), "elsewhere".into());
        ds.check_manifest(&want).unwrap();
        let other = TimingConfig {
            batch_size: 100,
            ..cfg
        };
        assert!(matches!(
            ds.check_manifest(&manifest(&spec, &other, 1)),
            Err(Error::ManifestMismatch(_))
        ));
    }

    #[test]
    fn file_is_append_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lat.jsonl");
        let ds = LatencyDataset::new(BTreeMap::from([("arch".into(), "toy".into())]));
        ds.create(&path).unwrap();
        assert!(ds.create(&path).is_err());
        LatencyDataset::append(&path, &sample(vec![3], 1.5)).unwrap();
        LatencyDataset::append(&path, &sample(vec![4], 2.5)).unwrap();
        let back = LatencyDataset::read(&path).unwrap();
        assert_eq!(back.samples.len(), 2);
        assert_eq!(back.manifest["arch"], "toy");
    }
}
