//! Base networks with optional weight-dependent gates.

mod arch;

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{BnMode, Graph, RunningStats, Var};
use crate::error::{invalid, Error, Result};
use crate::gates::{binary_activation_guarded, gate_activation, reshape_weights, sigmoid_gate_variant, GateMode, GateState, DEFAULT_GATE_BIAS};
use crate::optim::Sgd;
use crate::real::Real;
use crate::tensor::Tensor;

pub use arch::{ArchKind, ArchitectureSpec, ConvLayer, LayerRole, PlainItem, Stage};

/// How gates enter a forward pass.
#[derive(Debug, Clone, Copy)]
pub enum Gating<'a, T> {
    /// Gates ignored.
    Off,
    /// Gates computed from the current filters and scorers.
    Learned,
    /// Fixed per-layer gate vectors (`None` for ungated layers).
    Fixed(&'a [Option<Vec<T>>]),
}

/// Handles produced by [`Model::forward`].
#[derive(Debug, Clone)]
pub struct Forward {
    pub logits: Var,
    /// One var per parameter, in [`Model::param_names`] order.
    pub params: Vec<Var>,
    /// Gate vector applied at each conv layer.
    pub gates: Vec<Option<Var>>,
    /// Raw conv outputs.
    pub convs: Vec<Var>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub spec: ArchitectureSpec,
    pub layers: Vec<ConvLayer>,
    /// Actual output width of every conv.
    pub widths: Vec<usize>,
    /// `[out, in, k, k]` per conv.
    pub conv: Vec<Tensor<T>>,
    pub bn_gamma: Vec<Tensor<T>>,
    pub bn_beta: Vec<Tensor<T>>,
    pub bn_stats: Vec<RunningStats<T>>,
    /// `[C, classes]`.
    pub fc_w: Tensor<T>,
    pub fc_b: Tensor<T>,
    pub gates: Vec<Option<GateState<T>>>,
    pub min_open: usize,
}

impl<T: Real> Model<T> {
    /// Full-width model with He-normal convs, unit BN and a uniform classifier.
    pub fn new<R: Rng + ?Sized>(spec: &ArchitectureSpec, rng: &mut R) -> Result<Self> {
        let widths = spec.layers()?.iter().map(|l| l.out_channels).collect::<Vec<_>>();
        Self::with_widths(spec, &widths, rng)
    }

    /// Model with conv `l` narrowed to `widths[l]` filters. Layers that feed
    /// shortcuts (and the last conv of a plain net) must keep full width.
    pub fn with_widths<R: Rng + ?Sized>(spec: &ArchitectureSpec, widths: &[usize], rng: &mut R) -> Result<Self> {
        let layers = spec.layers()?;
        if widths.len() != layers.len() {
            return Err(Error::Undecodable(alloc::format!(
                "{} widths for {} conv layers",
                widths.len(),
                layers.len()
            )));
        }
        let last = layers.len() - 1;
        for (l, (&w, layer)) in widths.iter().zip(&layers).enumerate() {
            if w == 0 {
                return Err(Error::Undecodable(alloc::format!("layer {l} has zero filters")));
            }
            if w > layer.out_channels {
                return Err(Error::Undecodable(alloc::format!(
                    "layer {l}: {w} filters exceeds {}",
                    layer.out_channels
                )));
            }
            if !layer.gateable(l == last) && w != layer.out_channels {
                return Err(Error::Undecodable(alloc::format!("layer {l} must keep full width")));
            }
        }
        let in_width = |l: usize| layers[l].source.map_or(spec.input_channels, |s| widths[s]);
        let mut conv = Vec::with_capacity(layers.len());
        for (l, layer) in layers.iter().enumerate() {
            let k = layer.kernel;
            let fan_in = in_width(l) * k * k;
            let normal = Normal::new(0.0, num_traits::Float::sqrt(2.0 / fan_in as f64)).map_err(|_| invalid("bad init scale"))?;
            conv.push(Tensor::from_fn([widths[l], in_width(l), k, k], |_| T::from_f64(normal.sample(rng))));
        }
        let head = widths[last];
        let bound = 1.0 / num_traits::Float::sqrt(head as f64);
        let fc_w = Tensor::from_fn([head, spec.num_classes], |_| T::from_f64(rng.random_range(-bound..bound)));
        let fc_b = Tensor::from_fn([spec.num_classes], |_| T::from_f64(rng.random_range(-bound..bound)));
        Ok(Model {
            spec: spec.clone(),
            bn_gamma: widths.iter().map(|&w| Tensor::full([w], T::one())).collect(),
            bn_beta: widths.iter().map(|&w| Tensor::zeros([w])).collect(),
            bn_stats: widths.iter().map(|&w| RunningStats::new(w)).collect(),
            gates: vec![None; layers.len()],
            layers,
            widths: widths.to_vec(),
            conv,
            fc_w,
            fc_b,
            min_open: 1,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn in_width(&self, l: usize) -> usize {
        self.layers[l].source.map_or(self.spec.input_channels, |s| self.widths[s])
    }

    pub fn is_gateable(&self, l: usize) -> bool {
        l < self.layers.len() && self.layers[l].gateable(l + 1 == self.layers.len())
    }

    pub fn gateable_layers(&self) -> Vec<usize> {
        (0..self.layers.len()).filter(|&l| self.is_gateable(l)).collect()
    }

    /// Attaches scorers to `layers`. Each score bias starts at
    /// `DEFAULT_GATE_BIAS` above the most negative raw score, so every gate
    /// starts open.
    pub fn attach_gates<R: Rng + ?Sized>(&mut self, layers: &[usize], mode: GateMode, rng: &mut R) -> Result<()> {
        self.attach_gates_with(layers, mode, true, rng)
    }

    /// As [`Self::attach_gates`]; `bias = false` gives bias-free scorers
    /// `s = W* w_hat` whose gates may start closed.
    pub fn attach_gates_with<R: Rng + ?Sized>(&mut self, layers: &[usize], mode: GateMode, bias: bool, rng: &mut R) -> Result<()> {
        if let Some(&bad) = layers.iter().find(|&&l| !self.is_gateable(l)) {
            return Err(Error::UngatableLayer(bad));
        }
        for &l in layers {
            let dim = self.conv[l].numel() / self.widths[l];
            let mut gs = GateState::init(l, dim, bias, mode, rng);
            if bias {
                gs.bias = Some(Tensor::scalar(T::zero()));
                let raw = gs.filter_scores(&reshape_weights(&self.conv[l])?)?;
                let lowest = raw.iter().copied().fold(T::zero(), |a, b| a.min(b));
                gs.bias = Some(Tensor::scalar(T::from_f64(DEFAULT_GATE_BIAS) - lowest));
            }
            gs.refresh(&self.conv[l], self.min_open)?;
            self.gates[l] = Some(gs);
        }
        Ok(())
    }

    pub fn attach_all_gates<R: Rng + ?Sized>(&mut self, mode: GateMode, rng: &mut R) -> Result<()> {
        let layers = self.gateable_layers();
        self.attach_gates(&layers, mode, rng)
    }

    pub fn has_gates(&self) -> bool {
        self.gates.iter().any(Option::is_some)
    }

    pub fn clear_gates(&mut self) {
        self.gates.iter_mut().for_each(|g| *g = None);
    }

    /// Gates implied by the current filters and scorers.
    pub fn current_gates(&self) -> Result<Vec<Option<Vec<T>>>> {
        self.gates
            .iter()
            .enumerate()
            .map(|(l, gs)| match gs {
                None => Ok(None),
                Some(gs) => {
                    let scores = gs.filter_scores(&reshape_weights(&self.conv[l])?)?;
                    let gates = match gs.mode {
                        GateMode::Binary => binary_activation_guarded(&scores, self.min_open)?,
                        GateMode::Sigmoid { k } => sigmoid_gate_variant(&scores, T::from_f64(k))?,
                    };
                    Ok(Some(gates))
                }
            })
            .collect()
    }

    /// Recomputes the stored scores and gates of every scorer.
    pub fn refresh_gates(&mut self) -> Result<()> {
        for (l, gs) in self.gates.iter_mut().enumerate() {
            if let Some(gs) = gs {
                gs.refresh(&self.conv[l], self.min_open)?;
            }
        }
        Ok(())
    }

    /// Kept filters per layer: open gates on gated layers, width elsewhere.
    pub fn encoding(&self) -> Result<Vec<usize>> {
        let half = T::from_f64(0.5);
        Ok(self
            .current_gates()?
            .iter()
            .zip(&self.widths)
            .map(|(g, &w)| g.as_ref().map_or(w, |g| g.iter().filter(|&&v| v >= half).count()))
            .collect())
    }

    /// Checks a fixed gate pattern: gates only on gateable layers, one
    /// binary entry per filter and at least `min_open` open per layer.
    pub fn validate_pattern(&self, pattern: &[Option<Vec<T>>]) -> Result<()> {
        if pattern.len() != self.layers.len() {
            return Err(Error::InvalidGatePattern(alloc::format!(
                "{} entries for {} layers",
                pattern.len(),
                self.layers.len()
            )));
        }
        for (l, p) in pattern.iter().enumerate() {
            let Some(p) = p else { continue };
            if !self.is_gateable(l) {
                return Err(Error::UngatableLayer(l));
            }
            if p.len() != self.widths[l] {
                return Err(Error::InvalidGatePattern(alloc::format!(
                    "layer {l}: {} gates for {} filters",
                    p.len(),
                    self.widths[l]
                )));
            }
            crate::gates::layer_encoding(p)?;
            if p.iter().filter(|&&v| v == T::one()).count() < self.min_open {
                return Err(Error::InvalidGatePattern(alloc::format!("layer {l}: fewer than {} open gates", self.min_open)));
            }
        }
        Ok(())
    }

    /// Parameter names in registration order: conv/BN per layer, the
    /// classifier, then scorer weights and biases.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for l in 0..self.layers.len() {
            names.push(alloc::format!("conv{l}.weight"));
            names.push(alloc::format!("bn{l}.weight"));
            names.push(alloc::format!("bn{l}.bias"));
        }
        names.push("fc.weight".into());
        names.push("fc.bias".into());
        for (l, gs) in self.gates.iter().enumerate() {
            if let Some(gs) = gs {
                names.push(alloc::format!("gate.{l}.weights"));
                if gs.bias.is_some() {
                    names.push(alloc::format!("gate.{l}.bias"));
                }
            }
        }
        names
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        let mut out = Vec::new();
        for l in 0..self.layers.len() {
            out.push(&self.conv[l]);
            out.push(&self.bn_gamma[l]);
            out.push(&self.bn_beta[l]);
        }
        out.push(&self.fc_w);
        out.push(&self.fc_b);
        for gs in self.gates.iter().flatten() {
            out.push(&gs.weights);
            if let Some(b) = &gs.bias {
                out.push(b);
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for ((c, g), b) in self.conv.iter_mut().zip(&mut self.bn_gamma).zip(&mut self.bn_beta) {
            out.push(c);
            out.push(g);
            out.push(b);
        }
        out.push(&mut self.fc_w);
        out.push(&mut self.fc_b);
        for gs in self.gates.iter_mut().flatten() {
            out.push(&mut gs.weights);
            if let Some(b) = &mut gs.bias {
                out.push(b);
            }
        }
        out
    }

    /// Weight decay applies to conv and classifier weights only.
    pub fn decay_mask(&self) -> Vec<bool> {
        let mut mask = Vec::new();
        for _ in 0..self.layers.len() {
            mask.extend([true, false, false]);
        }
        mask.extend([true, false]);
        for gs in self.gates.iter().flatten() {
            mask.push(false);
            if gs.bias.is_some() {
                mask.push(false);
            }
        }
        mask
    }

    /// Conv, BN and classifier parameters (scorers excluded).
    pub fn param_count(&self) -> usize {
        self.conv.iter().map(Tensor::numel).sum::<usize>()
            + self.widths.iter().map(|w| 2 * w).sum::<usize>()
            + self.fc_w.numel()
            + self.fc_b.numel()
    }

    pub fn conv_param_count(&self) -> usize {
        self.conv.iter().map(Tensor::numel).sum()
    }

    /// Records a forward pass of `x: [N, C, H, W]` on `g`. Parameters become
    /// leaves when `trainable`, constants otherwise. Train-mode BN updates
    /// the running statistics.
    pub fn forward(&mut self, g: &mut Graph<T>, x: Var, mode: BnMode, gating: Gating<'_, T>, trainable: bool) -> Result<Forward> {
        if let Gating::Fixed(p) = gating {
            self.validate_pattern(p)?;
        }
        let params = self
            .params()
            .into_iter()
            .map(|t| if trainable { g.leaf(t.clone()) } else { g.input(t.clone()) })
            .collect::<Result<Vec<_>>>()?;
        let nl = self.layers.len();
        let mut gate_params = vec![None; nl];
        let mut next = 3 * nl + 2;
        for (l, gs) in self.gates.iter().enumerate() {
            if let Some(gs) = gs {
                let b = gs.bias.as_ref().map(|_| params[next + 1]);
                gate_params[l] = Some((params[next], b));
                next += 1 + usize::from(b.is_some());
            }
        }
        let mut run = Run {
            model: self,
            g,
            params: &params,
            gate_params: &gate_params,
            mode,
            gating,
            gates: vec![None; nl],
            convs: Vec::with_capacity(nl),
        };
        let h = match run.model.spec.kind {
            ArchKind::Plain => {
                let mut h = x;
                let mut l = 0;
                let items = run.model.spec.plain.clone();
                for item in items {
                    match item {
                        PlainItem::Conv(_) => {
                            h = run.conv_bn(l, h, true)?;
                            h = run.gate(l, h)?;
                            l += 1;
                        }
                        PlainItem::Pool => h = run.g.maxpool2d(h, 2)?,
                    }
                }
                h
            }
            ArchKind::BasicResidual => {
                let mut h = run.conv_bn(0, x, true)?;
                let mut l = 1;
                while l < nl {
                    let first = l;
                    let mut y = run.conv_bn(first, h, true)?;
                    y = run.gate(first, y)?;
                    l += 1;
                    let short = if run.model.layers[l].role == LayerRole::Projection {
                        l += 1;
                        run.conv_bn(l - 1, h, false)?
                    } else {
                        h
                    };
                    let z = run.conv_bn(l, y, false)?;
                    l += 1;
                    let sum = run.g.add(z, short)?;
                    h = run.g.relu(sum)?;
                }
                h
            }
        };
        let pooled = run.g.global_avgpool(h)?;
        let logits = run.g.linear(pooled, params[3 * nl], Some(params[3 * nl + 1]))?;
        let (gates, convs) = (run.gates, run.convs);
        Ok(Forward {
            logits,
            params,
            gates,
            convs,
        })
    }

    /// Logits of a constant input, without recording gradients.
    pub fn predict(&mut self, x: &Tensor<T>, mode: BnMode, gating: Gating<'_, T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let xv = g.input(x.clone())?;
        let out = self.forward(&mut g, xv, mode, gating, false)?;
        Ok(g.value(out.logits).clone())
    }

    /// One momentum-SGD step from the gradients left on `g`.
    pub fn apply_sgd(&mut self, g: &Graph<T>, fwd: &Forward, sgd: &mut Sgd<T>) -> Result<()> {
        let mask = self.decay_mask();
        for (k, (p, &v)) in self.params_mut().into_iter().zip(&fwd.params).enumerate() {
            if let Some(grad) = g.grad(v) {
                sgd.update(k, p.data_mut(), grad, mask[k])?;
            }
        }
        Ok(())
    }

    /// Multiply-accumulates performed by the convs of one single-image
    /// forward pass, counted from the recorded conv shapes.
    pub fn count_conv_macs(&mut self) -> Result<u64> {
        let s = self.spec.resolution;
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros([1, self.spec.input_channels, s, s]))?;
        let saved = self.bn_stats.clone();
        let out = self.forward(&mut g, x, BnMode::Eval, Gating::Off, false)?;
        self.bn_stats = saved;
        Ok(out
            .convs
            .iter()
            .zip(&self.conv)
            .map(|(&c, w)| (g.value(c).numel() * w.shape()[1] * w.shape()[2] * w.shape()[3]) as u64)
            .sum())
    }

    /// Physically removes filters: layer `l` keeps `kept[l]` (strictly
    /// increasing) and every consumer drops the matching input channels.
    /// The result carries no gates.
    pub fn slice(&self, kept: &[Vec<usize>]) -> Result<Model<T>> {
        if kept.len() != self.layers.len() {
            return Err(Error::InvalidGatePattern(alloc::format!(
                "{} kept lists for {} layers",
                kept.len(),
                self.layers.len()
            )));
        }
        for (l, k) in kept.iter().enumerate() {
            if k.is_empty() || k.windows(2).any(|w| w[0] >= w[1]) || k[k.len() - 1] >= self.widths[l] {
                return Err(Error::InvalidGatePattern(alloc::format!("layer {l}: kept indices must be nonempty, increasing and in range")));
            }
            if !self.is_gateable(l) && k.len() != self.widths[l] {
                return Err(Error::InvalidGatePattern(alloc::format!("layer {l} feeds a shortcut and must keep all filters")));
            }
        }
        let all_inputs: Vec<usize> = (0..self.spec.input_channels).collect();
        let mut out = self.clone();
        out.clear_gates();
        out.widths = kept.iter().map(Vec::len).collect();
        for (l, keep) in kept.iter().enumerate() {
            let ins = self.layers[l].source.map_or(&all_inputs, |s| &kept[s]);
            let w = &self.conv[l];
            let (cin, kk) = (w.shape()[1], w.shape()[2] * w.shape()[3]);
            let mut data = Vec::with_capacity(keep.len() * ins.len() * kk);
            for &o in keep {
                for &i in ins {
                    let base = (o * cin + i) * kk;
                    data.extend_from_slice(&w.data()[base..base + kk]);
                }
            }
            out.conv[l] = Tensor::new([keep.len(), ins.len(), w.shape()[2], w.shape()[3]], data)?;
            let pick = |t: &[T]| keep.iter().map(|&i| t[i]).collect::<Vec<T>>();
            out.bn_gamma[l] = Tensor::new([keep.len()], pick(self.bn_gamma[l].data()))?;
            out.bn_beta[l] = Tensor::new([keep.len()], pick(self.bn_beta[l].data()))?;
            out.bn_stats[l] = RunningStats {
                mean: pick(&self.bn_stats[l].mean),
                var: pick(&self.bn_stats[l].var),
            };
        }
        let head = &kept[self.layers.len() - 1];
        let classes = self.spec.num_classes;
        let mut fc = Vec::with_capacity(head.len() * classes);
        for &r in head {
            fc.extend_from_slice(&self.fc_w.data()[r * classes..(r + 1) * classes]);
        }
        out.fc_w = Tensor::new([head.len(), classes], fc)?;
        Ok(out)
    }

    /// Named tensors: parameters plus BN running statistics.
    pub fn named_state(&self) -> Vec<(String, Tensor<T>)> {
        let mut out: Vec<(String, Tensor<T>)> = self
            .param_names()
            .into_iter()
            .zip(self.params().into_iter().cloned())
            .collect();
        for (l, st) in self.bn_stats.iter().enumerate() {
            let w = st.mean.len();
            out.push((alloc::format!("bn{l}.running_mean"), Tensor::new([w], st.mean.clone()).expect("shape")));
            out.push((alloc::format!("bn{l}.running_var"), Tensor::new([w], st.var.clone()).expect("shape")));
        }
        out
    }

    /// Rebuilds a model from [`Self::named_state`] output. Layer widths are
    /// read from the conv weights; scorers are restored where present.
    pub fn from_state(spec: &ArchitectureSpec, state: &[(String, Tensor<T>)], mode: GateMode) -> Result<Self> {
        let find = |name: &str| -> Result<&Tensor<T>> {
            state
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::MissingParameter(name.into()))
        };
        let nl = spec.num_layers()?;
        let widths = (0..nl)
            .map(|l| find(&alloc::format!("conv{l}.weight")).map(|t| t.shape()[0]))
            .collect::<Result<Vec<_>>>()?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = Self::with_widths(spec, &widths, &mut rng)?;
        for l in 0..nl {
            if state.iter().any(|(n, _)| *n == alloc::format!("gate.{l}.weights")) {
                let w = find(&alloc::format!("gate.{l}.weights"))?.clone();
                let bias = state
                    .iter()
                    .find(|(n, _)| *n == alloc::format!("gate.{l}.bias"))
                    .map(|(_, t)| t.clone());
                if !model.is_gateable(l) {
                    return Err(Error::UngatableLayer(l));
                }
                model.gates[l] = Some(GateState {
                    layer: l,
                    weights: w,
                    bias,
                    mode,
                    scores: Vec::new(),
                    gates: Vec::new(),
                });
            }
        }
        let names = model.param_names();
        for (name, slot) in names.iter().zip(model.params_mut()) {
            let t = find(name)?;
            if t.shape() != slot.shape() {
                return Err(Error::ShapeMismatch {
                    op: "load_state",
                    expected: slot.shape().to_vec(),
                    got: t.shape().to_vec(),
                });
            }
            *slot = t.clone();
        }
        for l in 0..nl {
            let mean = find(&alloc::format!("bn{l}.running_mean"))?;
            let var = find(&alloc::format!("bn{l}.running_var"))?;
            if mean.numel() != widths[l] || var.numel() != widths[l] {
                return Err(invalid(alloc::format!("bn{l}: running statistics have the wrong width")));
            }
            model.bn_stats[l] = RunningStats {
                mean: mean.data().to_vec(),
                var: var.data().to_vec(),
            };
        }
        model.refresh_gates()?;
        Ok(model)
    }
}

struct Run<'m, 'g, 'p, T> {
    model: &'m mut Model<T>,
    g: &'g mut Graph<T>,
    params: &'p [Var],
    gate_params: &'p [Option<(Var, Option<Var>)>],
    mode: BnMode,
    gating: Gating<'p, T>,
    gates: Vec<Option<Var>>,
    convs: Vec<Var>,
}

impl<T: Real> Run<'_, '_, '_, T> {
    fn conv_bn(&mut self, l: usize, x: Var, relu: bool) -> Result<Var> {
        let layer = self.model.layers[l];
        let c = self.g.conv2d(x, self.params[3 * l], layer.stride, layer.padding)?;
        self.convs.push(c);
        let y = self.g.batchnorm(
            c,
            self.params[3 * l + 1],
            self.params[3 * l + 2],
            &mut self.model.bn_stats[l],
            self.mode,
        )?;
        if relu {
            self.g.relu(y)
        } else {
            Ok(y)
        }
    }

    fn gate(&mut self, l: usize, y: Var) -> Result<Var> {
        let gv = match self.gating {
            Gating::Off => return Ok(y),
            Gating::Fixed(p) => match &p[l] {
                Some(v) => self.g.input(Tensor::new([v.len()], v.clone())?)?,
                None => return Ok(y),
            },
            Gating::Learned => {
                let Some(gs) = &self.model.gates[l] else { return Ok(y) };
                let w = self.params[3 * l];
                let o = self.model.widths[l];
                let wstar = self.g.reshape(w, &[o, gs.dim()])?;
                let (s, _) = gs.score_on(self.g, wstar, self.gate_params[l])?;
                let mode = gs.mode;
                let gv = gate_activation(self.g, s, mode, self.model.min_open)?;
                let scores = self.g.data(s).to_vec();
                let gates = self.g.data(gv).to_vec();
                if let Some(gs) = &mut self.model.gates[l] {
                    gs.scores = scores;
                    gs.gates = gates;
                }
                gv
            }
        };
        self.gates[l] = Some(gv);
        self.g.channel_scale(y, gv)
    }
}
