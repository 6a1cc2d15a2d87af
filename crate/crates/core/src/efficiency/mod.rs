//! Efficiency terms: analytic FLOPs and learned latency predictors.
//!
//! A network is described by its per-layer kept-filter counts `c_l` on a
//! fixed [`Geometry`]. Every evaluator maps counts to a nonnegative cost and
//! can record that map on a [`Graph`] so the cost is differentiable in the
//! counts.

mod lpnet;
mod sample;

use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{Graph, Var};
use crate::error::{invalid, Error, Result};
use crate::real::Real;

pub use lpnet::{block_latency_sum, train_lpnet, BlockLpNet, LatencySample, LpNet, LpNetConfig, LpNetFit};
pub use sample::{sample_encodings, width_grid};

/// Static shape of one convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGeometry {
    /// Output feature-map height and width: the number of kernel positions.
    pub out_h: usize,
    pub out_w: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub downsample: bool,
    /// Full width `C_l`.
    pub max_width: usize,
    /// Layer whose output feeds this one; `None` for the image.
    pub source: Option<usize>,
    /// Whether the layer carries gates (otherwise it is pinned at full width).
    pub gated: bool,
}

impl LayerGeometry {
    /// `M_h M_w K_h K_w`.
    pub fn positions(&self) -> u64 {
        (self.out_h * self.out_w * self.kernel_h * self.kernel_w) as u64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Geometry {
    pub input_channels: usize,
    pub layers: Vec<LayerGeometry>,
}

impl Geometry {
    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn full_width(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.max_width).collect()
    }

    pub fn gated_layers(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.layers[i].gated).collect()
    }

    fn check_len(&self, n: usize) -> Result<()> {
        if n != self.len() {
            return Err(Error::ShapeMismatch {
                op: "encoding",
                expected: vec![self.len()],
                got: vec![n],
            });
        }
        Ok(())
    }

    /// Checks `0 <= c_l <= C_l`.
    pub fn validate(&self, counts: &[f64]) -> Result<()> {
        self.check_len(counts.len())?;
        for (l, (&c, g)) in counts.iter().zip(&self.layers).enumerate() {
            if !(c >= 0.0 && c <= g.max_width as f64) {
                return Err(invalid(alloc::format!("encoding: c_{l} = {c} outside [0, {}]", g.max_width)));
            }
        }
        Ok(())
    }
}

/// Kept counts on a fixed geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkEncoding {
    pub geometry: Geometry,
    pub counts: Vec<usize>,
}

impl NetworkEncoding {
    pub fn new(geometry: Geometry, counts: Vec<usize>) -> Result<Self> {
        geometry.validate(&counts.iter().map(|&c| c as f64).collect::<Vec<_>>())?;
        Ok(NetworkEncoding { geometry, counts })
    }

    pub fn full(geometry: Geometry) -> Self {
        let counts = geometry.full_width();
        NetworkEncoding { geometry, counts }
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.counts.iter().map(|&c| c as f64).collect()
    }
}

/// `F_l = M_h M_w K_h K_w c_{l-1} c_l`.
pub fn flops_layer(layer: &LayerGeometry, c_prev: f64, c: f64) -> f64 {
    layer.positions() as f64 * c_prev * c
}

fn source_count<C: Copy>(geometry: &Geometry, counts: &[C], l: usize, image: C) -> C {
    match geometry.layers[l].source {
        Some(s) => counts[s],
        None => image,
    }
}

/// Total conv FLOPs (one multiply-accumulate counts as one).
pub fn flops_network(geometry: &Geometry, counts: &[f64]) -> Result<f64> {
    geometry.check_len(counts.len())?;
    let c0 = geometry.input_channels as f64;
    Ok((0..geometry.len())
        .map(|l| flops_layer(&geometry.layers[l], source_count(geometry, counts, l, c0), counts[l]))
        .sum())
}

/// Exact integer variant of [`flops_network`].
pub fn flops_network_int(geometry: &Geometry, counts: &[usize]) -> Result<u64> {
    geometry.check_len(counts.len())?;
    let c0 = geometry.input_channels;
    Ok((0..geometry.len())
        .map(|l| geometry.layers[l].positions() * (source_count(geometry, counts, l, c0) * counts[l]) as u64)
        .sum())
}

/// Per-layer FLOPs breakdown.
pub fn flops_per_layer(geometry: &Geometry, counts: &[usize]) -> Result<Vec<u64>> {
    geometry.check_len(counts.len())?;
    let c0 = geometry.input_channels;
    Ok((0..geometry.len())
        .map(|l| geometry.layers[l].positions() * (source_count(geometry, counts, l, c0) * counts[l]) as u64)
        .collect())
}

/// Records [`flops_network`] on `g`, scaled by `scale`. `counts` holds one
/// single-element var per layer.
pub fn flops_on_graph<T: Real>(g: &mut Graph<T>, geometry: &Geometry, counts: &[Var], scale: f64) -> Result<Var> {
    geometry.check_len(counts.len())?;
    let c0 = g.constant(T::from_f64(geometry.input_channels as f64))?;
    let mut terms = Vec::with_capacity(counts.len());
    for (l, layer) in geometry.layers.iter().enumerate() {
        let prev = source_count(geometry, counts, l, c0);
        let p = g.mul(prev, counts[l])?;
        terms.push(g.scale(p, T::from_f64(layer.positions() as f64 * scale))?);
    }
    let all = g.stack(&terms)?;
    g.sum(all)
}

/// Maps kept counts to a nonnegative cost. The pruning loop only sees this
/// interface, so evaluators are interchangeable.
pub trait EfficiencyEvaluator {
    fn name(&self) -> &'static str;

    fn num_layers(&self) -> usize;

    fn evaluate(&self, counts: &[f64]) -> Result<f64>;

    /// Records the cost on `g`; `counts` holds one single-element var per layer.
    fn evaluate_on<T: Real>(&self, g: &mut Graph<T>, counts: &[Var]) -> Result<Var>
    where
        Self: Sized;
}

/// FLOPs in millions.
#[derive(Debug, Clone, PartialEq)]
pub struct FlopsEvaluator {
    pub geometry: Geometry,
}

pub const MEGA: f64 = 1e-6;

impl EfficiencyEvaluator for FlopsEvaluator {
    fn name(&self) -> &'static str {
        "flops"
    }

    fn num_layers(&self) -> usize {
        self.geometry.len()
    }

    fn evaluate(&self, counts: &[f64]) -> Result<f64> {
        Ok(flops_network(&self.geometry, counts)? * MEGA)
    }

    fn evaluate_on<T: Real>(&self, g: &mut Graph<T>, counts: &[Var]) -> Result<Var> {
        flops_on_graph(g, &self.geometry, counts, MEGA)
    }
}

/// Number of open gates over the gated layers.
#[derive(Debug, Clone, PartialEq)]
pub struct GateL1Evaluator {
    pub gated: Vec<bool>,
}

impl GateL1Evaluator {
    pub fn new(geometry: &Geometry) -> Self {
        GateL1Evaluator {
            gated: geometry.layers.iter().map(|l| l.gated).collect(),
        }
    }
}

impl EfficiencyEvaluator for GateL1Evaluator {
    fn name(&self) -> &'static str {
        "l1"
    }

    fn num_layers(&self) -> usize {
        self.gated.len()
    }

    fn evaluate(&self, counts: &[f64]) -> Result<f64> {
        check_count_len(self.gated.len(), counts.len())?;
        Ok(counts.iter().zip(&self.gated).filter(|(_, &on)| on).map(|(c, _)| c).sum())
    }

    fn evaluate_on<T: Real>(&self, g: &mut Graph<T>, counts: &[Var]) -> Result<Var> {
        check_count_len(self.gated.len(), counts.len())?;
        let picked: Vec<Var> = counts.iter().zip(&self.gated).filter(|(_, &on)| on).map(|(&v, _)| v).collect();
        if picked.is_empty() {
            return g.constant(T::zero());
        }
        let all = g.stack(&picked)?;
        g.sum(all)
    }
}

/// Predicted latency in milliseconds.
#[derive(Debug, Clone, PartialEq)]
pub enum LatencyEvaluator {
    Network(LpNet),
    Blocks(BlockLpNet),
}

impl EfficiencyEvaluator for LatencyEvaluator {
    fn name(&self) -> &'static str {
        "latency"
    }

    fn num_layers(&self) -> usize {
        match self {
            LatencyEvaluator::Network(n) => n.num_layers(),
            LatencyEvaluator::Blocks(b) => b.num_layers(),
        }
    }

    fn evaluate(&self, counts: &[f64]) -> Result<f64> {
        match self {
            LatencyEvaluator::Network(n) => n.predict(counts),
            LatencyEvaluator::Blocks(b) => b.predict(counts),
        }
    }

    fn evaluate_on<T: Real>(&self, g: &mut Graph<T>, counts: &[Var]) -> Result<Var> {
        match self {
            LatencyEvaluator::Network(n) => n.predict_on(g, counts),
            LatencyEvaluator::Blocks(b) => b.predict_on(g, counts),
        }
    }
}

/// Any of the built-in evaluators.
#[derive(Debug, Clone, PartialEq)]
pub enum Evaluator {
    Flops(FlopsEvaluator),
    Latency(LatencyEvaluator),
    L1(GateL1Evaluator),
}

impl EfficiencyEvaluator for Evaluator {
    fn name(&self) -> &'static str {
        match self {
            Evaluator::Flops(e) => e.name(),
            Evaluator::Latency(e) => e.name(),
            Evaluator::L1(e) => e.name(),
        }
    }

    fn num_layers(&self) -> usize {
        match self {
            Evaluator::Flops(e) => e.num_layers(),
            Evaluator::Latency(e) => e.num_layers(),
            Evaluator::L1(e) => e.num_layers(),
        }
    }

    fn evaluate(&self, counts: &[f64]) -> Result<f64> {
        match self {
            Evaluator::Flops(e) => e.evaluate(counts),
            Evaluator::Latency(e) => e.evaluate(counts),
            Evaluator::L1(e) => e.evaluate(counts),
        }
    }

    fn evaluate_on<T: Real>(&self, g: &mut Graph<T>, counts: &[Var]) -> Result<Var> {
        match self {
            Evaluator::Flops(e) => e.evaluate_on(g, counts),
            Evaluator::Latency(e) => e.evaluate_on(g, counts),
            Evaluator::L1(e) => e.evaluate_on(g, counts),
        }
    }
}

pub(crate) fn check_count_len(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::ShapeMismatch {
            op: "encoding",
            expected: vec![expected],
            got: vec![got],
        });
    }
    Ok(())
}
