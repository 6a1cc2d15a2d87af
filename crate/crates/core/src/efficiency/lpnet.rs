//! Three-layer fully-connected latency predictor.

use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use rand::seq::SliceRandom;
use rand::Rng;

use super::{check_count_len, Geometry};
use crate::autodiff::{Graph, Var};
use crate::error::{invalid, Error, Result};
use crate::optim::Adam;
use crate::real::{matmul, Real};
use crate::tensor::Tensor;

/// Features per encoded layer: `c_l / C_l`, log feature-map area, downsample flag.
const FEATURES_PER_LAYER: usize = 3;

/// One measured `(encoding, latency)` pair.
#[derive(Debug, Clone, PartialEq)]
pub struct LatencySample {
    pub counts: Vec<usize>,
    pub latency_ms: f64,
    pub iqr_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LpNetConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub train_fraction: f64,
    pub min_samples: usize,
}

impl Default for LpNetConfig {
    fn default() -> Self {
        LpNetConfig {
            hidden: 64,
            epochs: 300,
            batch_size: 256,
            lr: 1e-3,
            train_fraction: 0.8,
            min_samples: 100,
        }
    }
}

/// `FC -> ReLU -> FC -> ReLU -> FC` over normalized encoding features.
/// Predictions are in the units of the training targets.
#[derive(Debug, Clone, PartialEq)]
pub struct LpNet {
    /// Encoding entries read by this net, in feature order.
    pub inputs: Vec<usize>,
    pub num_layers: usize,
    /// `1 / C_l` per input.
    pub feature_scale: Vec<f64>,
    /// Two constant features per input.
    pub static_features: Vec<f64>,
    /// Mean training latency; the net regresses `latency / target_scale`.
    pub target_scale: f64,
    pub w1: Tensor<f64>,
    pub b1: Tensor<f64>,
    pub w2: Tensor<f64>,
    pub b2: Tensor<f64>,
    pub w3: Tensor<f64>,
    pub b3: Tensor<f64>,
}

impl LpNet {
    /// All-zero net reading `inputs` of `geometry`.
    pub fn zeroed(geometry: &Geometry, inputs: Vec<usize>, hidden: usize) -> Result<Self> {
        if inputs.is_empty() || hidden == 0 {
            return Err(invalid("lpnet: needs at least one input and one hidden unit"));
        }
        if let Some(&bad) = inputs.iter().find(|&&l| l >= geometry.len()) {
            return Err(invalid(alloc::format!("lpnet: input layer {bad} out of range")));
        }
        let max_area = geometry
            .layers
            .iter()
            .map(|l| (l.out_h * l.out_w) as f64)
            .fold(1.0, f64::max);
        let mut feature_scale = Vec::with_capacity(inputs.len());
        let mut static_features = Vec::with_capacity(2 * inputs.len());
        for &l in &inputs {
            let g = &geometry.layers[l];
            feature_scale.push(1.0 / g.max_width as f64);
            static_features.push(Float::ln_1p((g.out_h * g.out_w) as f64) / Float::ln_1p(max_area));
            static_features.push(if g.downsample { 1.0 } else { 0.0 });
        }
        let f = FEATURES_PER_LAYER * inputs.len();
        Ok(LpNet {
            inputs,
            num_layers: geometry.len(),
            feature_scale,
            static_features,
            target_scale: 1.0,
            w1: Tensor::zeros([f, hidden]),
            b1: Tensor::zeros([hidden]),
            w2: Tensor::zeros([hidden, hidden]),
            b2: Tensor::zeros([hidden]),
            w3: Tensor::zeros([hidden, 1]),
            b3: Tensor::zeros([1]),
        })
    }

    /// Weights and biases drawn from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn init<R: Rng + ?Sized>(geometry: &Geometry, inputs: Vec<usize>, hidden: usize, rng: &mut R) -> Result<Self> {
        let mut net = Self::zeroed(geometry, inputs, hidden)?;
        for (w, b) in [(&mut net.w1, &mut net.b1), (&mut net.w2, &mut net.b2), (&mut net.w3, &mut net.b3)] {
            let bound = 1.0 / Float::sqrt(w.shape()[0] as f64);
            for v in w.data_mut().iter_mut().chain(b.data_mut().iter_mut()) {
                *v = rng.random_range(-bound..bound);
            }
        }
        Ok(net)
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    pub fn feature_len(&self) -> usize {
        FEATURES_PER_LAYER * self.inputs.len()
    }

    pub fn hidden(&self) -> usize {
        self.b1.numel()
    }

    pub fn features(&self, counts: &[f64]) -> Result<Vec<f64>> {
        check_count_len(self.num_layers, counts.len())?;
        let mut out = Vec::with_capacity(self.feature_len());
        for (j, &l) in self.inputs.iter().enumerate() {
            out.push(counts[l] * self.feature_scale[j]);
            out.push(self.static_features[2 * j]);
            out.push(self.static_features[2 * j + 1]);
        }
        Ok(out)
    }

    /// Normalized outputs for `n` stacked feature rows.
    fn forward_rows(&self, x: &[f64], n: usize) -> Vec<f64> {
        let (f, h) = (self.feature_len(), self.hidden());
        let layer = |input: &[f64], k: usize, w: &Tensor<f64>, b: &Tensor<f64>, out_w: usize, relu: bool| {
            let mut out = vec![0.0; n * out_w];
            matmul(n, k, out_w, input, w.data(), &mut out);
            for row in out.chunks_mut(out_w) {
                for (v, &bb) in row.iter_mut().zip(b.data()) {
                    *v += bb;
                    if relu && *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
            out
        };
        let h1 = layer(x, f, &self.w1, &self.b1, h, true);
        let h2 = layer(&h1, h, &self.w2, &self.b2, h, true);
        layer(&h2, h, &self.w3, &self.b3, 1, false)
    }

    pub fn predict(&self, counts: &[f64]) -> Result<f64> {
        let x = self.features(counts)?;
        Ok(self.forward_rows(&x, 1)[0] * self.target_scale)
    }

    pub fn predict_batch(&self, encodings: &[Vec<f64>]) -> Result<Vec<f64>> {
        let mut x = Vec::with_capacity(encodings.len() * self.feature_len());
        for e in encodings {
            x.extend(self.features(e)?);
        }
        Ok(self
            .forward_rows(&x, encodings.len())
            .into_iter()
            .map(|v| v * self.target_scale)
            .collect())
    }

    /// Records the prediction on `g` with the net's weights as constants.
    pub fn predict_on<T: Real>(&self, g: &mut Graph<T>, counts: &[Var]) -> Result<Var> {
        check_count_len(self.num_layers, counts.len())?;
        let mut parts = Vec::with_capacity(self.feature_len());
        for (j, &l) in self.inputs.iter().enumerate() {
            parts.push(g.scale(counts[l], T::from_f64(self.feature_scale[j]))?);
            parts.push(g.constant(T::from_f64(self.static_features[2 * j]))?);
            parts.push(g.constant(T::from_f64(self.static_features[2 * j + 1]))?);
        }
        let x = g.stack(&parts)?;
        let x = g.reshape(x, &[1, self.feature_len()])?;
        let p = [&self.w1, &self.b1, &self.w2, &self.b2, &self.w3, &self.b3]
            .iter()
            .map(|t| g.input(t.cast::<T>()))
            .collect::<Result<Vec<_>>>()?;
        let y = self.mlp_on(g, x, &p)?;
        let y = g.reshape(y, &[1])?;
        g.scale(y, T::from_f64(self.target_scale))
    }

    fn mlp_on<T: Real>(&self, g: &mut Graph<T>, x: Var, p: &[Var]) -> Result<Var> {
        let h = g.linear(x, p[0], Some(p[1]))?;
        let h = g.relu(h)?;
        let h = g.linear(h, p[2], Some(p[3]))?;
        let h = g.relu(h)?;
        g.linear(h, p[4], Some(p[5]))
    }

    fn params_mut(&mut self) -> [&mut Tensor<f64>; 6] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2, &mut self.w3, &mut self.b3]
    }

    /// Named parameter tensors in a fixed order.
    pub fn named_tensors(&self) -> Vec<(&'static str, &Tensor<f64>)> {
        vec![
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("w2", &self.w2),
            ("b2", &self.b2),
            ("w3", &self.w3),
            ("b3", &self.b3),
        ]
    }
}

/// A trained net plus its held-out mean relative error.
#[derive(Debug, Clone, PartialEq)]
pub struct LpNetFit {
    pub net: LpNet,
    pub test_error: f64,
    pub train_error: f64,
    pub train_len: usize,
    pub test_len: usize,
}

fn mean_relative_error(net: &LpNet, xs: &[Vec<f64>], ys: &[f64]) -> Result<f64> {
    if xs.is_empty() {
        return Ok(0.0);
    }
    let preds = net.predict_batch(xs)?;
    Ok(preds.iter().zip(ys).map(|(p, y)| (p - y).abs() / y).sum::<f64>() / ys.len() as f64)
}

/// Fits an [`LpNet`] reading `inputs` (all layers when `None`) to
/// `(counts, latency)` pairs with Adam on an MSE loss over mean-normalized
/// targets. A random `train_fraction` of the samples is used for training,
/// the rest for the returned test error.
pub fn train_lpnet<R: Rng + ?Sized>(
    geometry: &Geometry,
    inputs: Option<Vec<usize>>,
    samples: &[(Vec<f64>, f64)],
    cfg: &LpNetConfig,
    rng: &mut R,
) -> Result<LpNetFit> {
    if samples.len() < cfg.min_samples.max(2) {
        return Err(Error::DegenerateDataset(alloc::format!(
            "{} samples, need at least {}",
            samples.len(),
            cfg.min_samples.max(2)
        )));
    }
    if samples.iter().all(|(c, _)| c == &samples[0].0) {
        return Err(Error::DegenerateDataset("all encodings identical".into()));
    }
    if let Some((_, y)) = samples.iter().find(|(_, y)| !(y.is_finite() && *y > 0.0)) {
        return Err(invalid(alloc::format!("lpnet: latency {y} is not positive")));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 || !(cfg.train_fraction > 0.0 && cfg.train_fraction < 1.0) {
        return Err(invalid("lpnet: bad training configuration"));
    }
    let inputs = inputs.unwrap_or_else(|| (0..geometry.len()).collect());
    let mut net = LpNet::init(geometry, inputs, cfg.hidden, rng)?;

    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(rng);
    let n_train = (Float::round(samples.len() as f64 * cfg.train_fraction) as usize).clamp(1, samples.len() - 1);
    let (train_idx, test_idx) = order.split_at(n_train);
    let pick = |idx: &[usize]| -> (Vec<Vec<f64>>, Vec<f64>) {
        idx.iter().map(|&i| (samples[i].0.clone(), samples[i].1)).unzip()
    };
    let (train_x, train_y) = pick(train_idx);
    let (test_x, test_y) = pick(test_idx);
    net.target_scale = train_y.iter().sum::<f64>() / train_y.len() as f64;

    let f = net.feature_len();
    let feats: Vec<Vec<f64>> = train_x.iter().map(|c| net.features(c)).collect::<Result<_>>()?;
    let targets: Vec<f64> = train_y.iter().map(|y| y / net.target_scale).collect();

    let mut adam = Adam::new(cfg.lr);
    let mut perm: Vec<usize> = (0..n_train).collect();
    for _ in 0..cfg.epochs {
        perm.shuffle(rng);
        for chunk in perm.chunks(cfg.batch_size) {
            let b = chunk.len();
            let mut x = Vec::with_capacity(b * f);
            let mut neg_y = Vec::with_capacity(b);
            for &i in chunk {
                x.extend_from_slice(&feats[i]);
                neg_y.push(-targets[i]);
            }
            let mut g = Graph::<f64>::new();
            let xv = g.input(Tensor::new([b, f], x)?)?;
            let p = net
                .params_mut()
                .iter()
                .map(|t| g.leaf((**t).clone()))
                .collect::<Result<Vec<_>>>()?;
            let y = net.mlp_on(&mut g, xv, &p)?;
            let y = g.reshape(y, &[b])?;
            let t = g.input(Tensor::new([b], neg_y)?)?;
            let d = g.add(y, t)?;
            let sq = g.square(d)?;
            let s = g.sum(sq)?;
            let loss = g.scale(s, 1.0 / b as f64)?;
            g.backward(loss)?;
            adam.begin_step();
            for (k, (param, var)) in net.params_mut().into_iter().zip(&p).enumerate() {
                if let Some(grad) = g.grad(*var) {
                    adam.update(k, param.data_mut(), grad)?;
                }
            }
        }
    }
    let train_error = mean_relative_error(&net, &train_x, &train_y)?;
    let test_error = mean_relative_error(&net, &test_x, &test_y)?;
    Ok(LpNetFit {
        net,
        test_error,
        train_error,
        train_len: n_train,
        test_len: samples.len() - n_train,
    })
}

/// Sum of per-block predictions.
pub fn block_latency_sum(predictions: &[f64]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::EmptyBatch("block_latency_sum"));
    }
    Ok(predictions.iter().sum())
}

/// One [`LpNet`] per building block; the network latency is their sum.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockLpNet {
    pub blocks: Vec<LpNet>,
}

impl BlockLpNet {
    pub fn new(blocks: Vec<LpNet>) -> Result<Self> {
        let first = blocks.first().ok_or(Error::EmptyBatch("block lpnet"))?;
        if blocks.iter().any(|b| b.num_layers != first.num_layers) {
            return Err(invalid("block lpnet: blocks disagree on encoding length"));
        }
        Ok(BlockLpNet { blocks })
    }

    pub fn num_layers(&self) -> usize {
        self.blocks[0].num_layers
    }

    pub fn predict(&self, counts: &[f64]) -> Result<f64> {
        let preds = self.blocks.iter().map(|b| b.predict(counts)).collect::<Result<Vec<_>>>()?;
        block_latency_sum(&preds)
    }

    pub fn predict_on<T: Real>(&self, g: &mut Graph<T>, counts: &[Var]) -> Result<Var> {
        let parts = self
            .blocks
            .iter()
            .map(|b| b.predict_on(g, counts))
            .collect::<Result<Vec<_>>>()?;
        let all = g.stack(&parts)?;
        g.sum(all)
    }
}
