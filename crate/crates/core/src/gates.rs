//! Weight-dependent filter gates.
//!
//! Each gated convolution owns a small fully-connected scorer. The layer's
//! filters `W: [C_out, C_in, K, K]` are flattened to `W*: [C_out, C_in*K*K]`
//! (input-channel major, then kernel rows, then kernel columns, which is the
//! row-major order of `W`), scored as `s = W* w_hat (+ b)`, and binarized
//! with `(sign(s) + 1) / 2`, taking `sign(0) = +1`. In backward the binary
//! step is replaced by the derivative of the piecewise-polynomial
//! [`surrogate_lambda`].

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Initial value of the optional score bias.
pub const DEFAULT_GATE_BIAS: f64 = 0.1;

/// Gate activation used in forward.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GateMode {
    /// Exact {0, 1} gates with the surrogate gradient.
    Binary,
    /// `1 / (1 + exp(-k s))` soft gates (ablation comparator).
    Sigmoid { k: f64 },
}

/// `0` below `-1/2`, `2x + 2x^2 + 1/2` on `[-1/2, 0)`, `2x - 2x^2 + 1/2` on
/// `[0, 1/2)` and `1` from `1/2` on.
pub fn surrogate_lambda<T: Real>(x: T) -> T {
    let half = T::from_f64(0.5);
    let two = T::from_f64(2.0);
    if x < -half {
        T::zero()
    } else if x < T::zero() {
        two * x + two * x * x + half
    } else if x < half {
        two * x - two * x * x + half
    } else {
        T::one()
    }
}

/// Derivative of [`surrogate_lambda`]: `2 + 4x` on `[-1/2, 0)`, `2 - 4x` on
/// `[0, 1/2)`, zero elsewhere.
pub fn surrogate_grad<T: Real>(x: T) -> T {
    let half = T::from_f64(0.5);
    let two = T::from_f64(2.0);
    let four = T::from_f64(4.0);
    if x >= -half && x < T::zero() {
        two + four * x
    } else if x >= T::zero() && x < half {
        two - four * x
    } else {
        T::zero()
    }
}

/// `(sign(s) + 1) / 2` elementwise with `sign(0) = +1`.
pub fn binary_activation<T: Real>(scores: &[T]) -> Result<Vec<T>> {
    scores
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            if s.is_nan() {
                Err(Error::NanScore(i))
            } else if s >= T::zero() {
                Ok(T::one())
            } else {
                Ok(T::zero())
            }
        })
        .collect()
}

/// [`binary_activation`] followed by the minimum-open guard: when fewer
/// than `min_open` gates are open, the highest-scoring closed gates are
/// opened (lowest index first on ties).
pub fn binary_activation_guarded<T: Real>(scores: &[T], min_open: usize) -> Result<Vec<T>> {
    let mut gates = binary_activation(scores)?;
    let open = gates.iter().filter(|&&g| g == T::one()).count();
    let want = min_open.min(scores.len());
    if open < want {
        let mut closed: Vec<usize> = (0..scores.len()).filter(|&i| gates[i] == T::zero()).collect();
        closed.sort_by(|&a, &b| {
            scores[b]
                .partial_cmp(&scores[a])
                .unwrap_or(core::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        for &i in closed.iter().take(want - open) {
            gates[i] = T::one();
        }
    }
    Ok(gates)
}

pub fn scaled_sigmoid<T: Real>(s: T, k: T) -> T {
    T::one() / (T::one() + (-k * s).exp())
}

/// Soft gates `1 / (1 + exp(-k s))`.
pub fn sigmoid_gate_variant<T: Real>(scores: &[T], k: T) -> Result<Vec<T>> {
    if k <= T::zero() {
        return Err(Error::InvalidArgument("sigmoid scale must be positive".into()));
    }
    Ok(scores.iter().map(|&s| scaled_sigmoid(s, k)).collect())
}

/// Flattens `[C_out, C_in, K, K]` filters into `[C_out, C_in*K*K]` rows.
pub fn reshape_weights<T: Real>(w: &Tensor<T>) -> Result<Tensor<T>> {
    match *w.shape() {
        [o, i, kh, kw] => Tensor::new([o, i * kh * kw], w.data().to_vec()),
        _ => Err(Error::WrongRank {
            op: "reshape_weights",
            expected: 4,
            got: w.shape().len(),
        }),
    }
}

/// Inverse of [`reshape_weights`] for a known filter geometry.
pub fn unreshape_weights<T: Real>(rows: &Tensor<T>, c_in: usize, kh: usize, kw: usize) -> Result<Tensor<T>> {
    match *rows.shape() {
        [o, d] if d == c_in * kh * kw => Tensor::new([o, c_in, kh, kw], rows.data().to_vec()),
        _ => Err(Error::ShapeMismatch {
            op: "unreshape_weights",
            expected: vec![rows.shape()[0], c_in * kh * kw],
            got: rows.shape().to_vec(),
        }),
    }
}

/// Number of open gates. In binary mode any entry other than 0 or 1 is an error.
pub fn layer_encoding<T: Real>(gates: &[T]) -> Result<usize> {
    let mut count = 0;
    for (i, &g) in gates.iter().enumerate() {
        if g == T::one() {
            count += 1;
        } else if g != T::zero() {
            return Err(Error::NonBinaryGate(i));
        }
    }
    Ok(count)
}

/// Multiplies channel `i` of `[N, C, H, W]` activations by `gates[i]`.
pub fn apply_gates<T: Real>(activations: &Tensor<T>, gates: &[T]) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let x = g.input(activations.clone())?;
    let gv = g.input(Tensor::new([gates.len()], gates.to_vec())?)?;
    let y = g.channel_scale(x, gv)?;
    Ok(g.value(y).clone())
}

/// Trainable scorer of one gated layer plus its most recent scores/gates.
#[derive(Debug, Clone, PartialEq)]
pub struct GateState<T> {
    pub layer: usize,
    /// Scorer weights, length `C_in * K * K`.
    pub weights: Tensor<T>,
    /// Optional scalar added to every score.
    pub bias: Option<Tensor<T>>,
    pub mode: GateMode,
    pub scores: Vec<T>,
    pub gates: Vec<T>,
}

impl<T: Real> GateState<T> {
    /// Scorer weights drawn from `U(-1/sqrt(D), 1/sqrt(D))`; bias at
    /// [`DEFAULT_GATE_BIAS`] when enabled.
    pub fn init<R: Rng + ?Sized>(layer: usize, dim: usize, bias: bool, mode: GateMode, rng: &mut R) -> Self {
        let bound = 1.0 / num_traits::Float::sqrt(dim as f64);
        let weights = Tensor::from_fn([dim], |_| T::from_f64(rng.random_range(-bound..bound)));
        GateState {
            layer,
            weights,
            bias: bias.then(|| Tensor::scalar(T::from_f64(DEFAULT_GATE_BIAS))),
            mode,
            scores: Vec::new(),
            gates: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.weights.numel()
    }

    /// `s = W* w_hat (+ b)`.
    pub fn filter_scores(&self, wstar: &Tensor<T>) -> Result<Vec<T>> {
        let mut g = Graph::new();
        let w = g.input(wstar.clone())?;
        let (s, _) = self.score_on(&mut g, w, None)?;
        Ok(g.data(s).to_vec())
    }

    /// Recomputes and stores scores and gates from the layer's filters.
    pub fn refresh(&mut self, filters: &Tensor<T>, min_open: usize) -> Result<()> {
        let wstar = reshape_weights(filters)?;
        self.scores = self.filter_scores(&wstar)?;
        self.gates = match self.mode {
            GateMode::Binary => binary_activation_guarded(&self.scores, min_open)?,
            GateMode::Sigmoid { k } => sigmoid_gate_variant(&self.scores, T::from_f64(k))?,
        };
        Ok(())
    }

    /// Kept-filter count; sigmoid gates are thresholded at 0.5.
    pub fn open_count(&self) -> usize {
        let half = T::from_f64(0.5);
        self.gates.iter().filter(|&&g| g >= half).count()
    }

    /// Records the scorer on `g`. `wstar` must be `[C_out, D]`. When
    /// `params` is given the scorer weights/bias are those leaves, otherwise
    /// they enter the graph as constants.
    pub fn score_on(&self, g: &mut Graph<T>, wstar: Var, params: Option<(Var, Option<Var>)>) -> Result<(Var, Option<Var>)> {
        let d = g.shape(wstar).get(1).copied().unwrap_or(0);
        if d != self.dim() {
            return Err(Error::ShapeMismatch {
                op: "filter_scores",
                expected: vec![g.shape(wstar)[0], self.dim()],
                got: g.shape(wstar).to_vec(),
            });
        }
        let (wv, bv) = match params {
            Some(p) => p,
            None => {
                let wv = g.input(self.weights.clone())?;
                let bv = match &self.bias {
                    Some(b) => Some(g.input(b.clone())?),
                    None => None,
                };
                (wv, bv)
            }
        };
        let s = g.matvec(wstar, wv)?;
        let s = match bv {
            Some(b) => g.add_scalar(s, b)?,
            None => s,
        };
        Ok((s, bv))
    }
}

/// Records gate activation of scores `s` on the graph.
pub fn gate_activation<T: Real>(g: &mut Graph<T>, s: Var, mode: GateMode, min_open: usize) -> Result<Var> {
    match mode {
        GateMode::Binary => g.binary_gate(s, min_open),
        GateMode::Sigmoid { k } => g.sigmoid_gate(s, T::from_f64(k)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn surrogate_values() {
        assert_eq!(surrogate_lambda(-1.0f64), 0.0);
        assert_eq!(surrogate_lambda(1.0f64), 1.0);
        assert_eq!(surrogate_lambda(0.0f64), 0.5);
        assert_eq!(surrogate_lambda(0.25f64), 0.875);
        assert_eq!(surrogate_lambda(-0.25f64), 0.125);
        assert_eq!(surrogate_lambda(-0.5f64), 0.0);
        assert_eq!(surrogate_lambda(0.5f64), 1.0);
    }

    #[test]
    fn surrogate_grad_values() {
        assert_eq!(surrogate_grad(0.0f64), 2.0);
        assert_eq!(surrogate_grad(0.25f64), 1.0);
        assert_eq!(surrogate_grad(-0.25f64), 1.0);
        assert_eq!(surrogate_grad(0.75f64), 0.0);
        assert_eq!(surrogate_grad(-0.75f64), 0.0);
    }

    #[test]
    fn surrogate_grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let h = 1e-6;
        let mut checked = 0;
        while checked < 1000 {
            let x: f64 = rng.random_range(-1.0..1.0);
            if [-0.5, 0.0, 0.5].iter().any(|b| (x - b).abs() < 0.01) {
                continue;
            }
            let fd = (surrogate_lambda(x + h) - surrogate_lambda(x - h)) / (2.0 * h);
            assert!((fd - surrogate_grad(x)).abs() < 1e-6, "x={x}");
            checked += 1;
        }
    }

    #[test]
    fn sign_zero_keeps_filter() {
        assert_eq!(binary_activation(&[-0.3f32, 0.5, 0.0]).unwrap(), vec![0.0, 1.0, 1.0]);
        assert_eq!(binary_activation(&[-1.0f32, -0.1]).unwrap(), vec![0.0, 0.0]);
        assert_eq!(binary_activation(&[f32::NAN]), Err(Error::NanScore(0)));
    }

    #[test]
    fn guard_opens_highest_score() {
        let g = binary_activation_guarded(&[-0.3f64, -0.1, -0.2], 1).unwrap();
        assert_eq!(g, vec![0.0, 1.0, 0.0]);
        let g = binary_activation_guarded(&[-0.3f64, -0.1, -0.2], 2).unwrap();
        assert_eq!(g, vec![0.0, 1.0, 1.0]);
        let g = binary_activation_guarded(&[0.3f64, -0.1], 1).unwrap();
        assert_eq!(g, vec![1.0, 0.0]);
    }

    #[test]
    fn sigmoid_values() {
        let g = sigmoid_gate_variant(&[0.0f64, 1.0, 50.0, -50.0], 4.0).unwrap();
        assert_eq!(g[0], 0.5);
        assert!((g[1] - 1.0 / (1.0 + (-4.0f64).exp())).abs() < 1e-15);
        assert!((g[1] - 0.982).abs() < 5e-4);
        assert!((g[2] - 1.0).abs() < 1e-6);
        assert!(g[3].abs() < 1e-6);
        assert!(sigmoid_gate_variant(&[0.0f64], 0.0).is_err());
    }

    #[test]
    fn reshape_examples() {
        let w = Tensor::new([2, 1, 1, 1], vec![3.0f32, 4.0]).unwrap();
        let r = reshape_weights(&w).unwrap();
        assert_eq!(r.shape(), &[2, 1]);
        assert_eq!(r.data(), &[3.0, 4.0]);
        let w = Tensor::from_fn([1, 2, 2, 2], |i| i as f32);
        let r = reshape_weights(&w).unwrap();
        assert_eq!(r.shape(), &[1, 8]);
        assert_eq!(r.data(), &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]);
        assert!(reshape_weights(&Tensor::<f32>::zeros([2, 2])).is_err());
    }

    #[test]
    fn score_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut gate = GateState::<f64>::init(0, 3, false, GateMode::Binary, &mut rng);
        gate.weights = Tensor::full([3], 1.0);
        let eye = Tensor::new([3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(gate.filter_scores(&eye).unwrap(), vec![1.0; 3]);
        gate.weights = Tensor::zeros([3]);
        assert_eq!(gate.filter_scores(&eye).unwrap(), vec![0.0; 3]);
        let wrong = Tensor::<f64>::zeros([3, 4]);
        assert!(gate.filter_scores(&wrong).is_err());
    }

    #[test]
    fn scores_match_dot_product_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let gate = GateState::<f64>::init(0, 12, true, GateMode::Binary, &mut rng);
        let wstar = Tensor::from_fn([5, 12], |_| rng.random_range(-1.0..1.0));
        let s = gate.filter_scores(&wstar).unwrap();
        for (i, &si) in s.iter().enumerate() {
            let dot: f64 = (0..12).map(|j| wstar.data()[i * 12 + j] * gate.weights.data()[j]).sum();
            assert!((si - (dot + DEFAULT_GATE_BIAS)).abs() < 1e-6);
        }
    }

    #[test]
    fn encoding_counts_open_gates() {
        assert_eq!(layer_encoding(&[1.0f32, 0.0, 1.0, 1.0]).unwrap(), 3);
        assert_eq!(layer_encoding(&[0.0f32; 4]).unwrap(), 0);
        assert_eq!(layer_encoding(&[0.5f32]), Err(Error::NonBinaryGate(0)));
    }

    #[test]
    fn apply_gates_masks_channels() {
        let x = Tensor::from_fn([2, 3, 2, 2], |i| i as f32 + 1.0);
        assert_eq!(apply_gates(&x, &[1.0, 1.0, 1.0]).unwrap().data(), x.data());
        assert!(apply_gates(&x, &[0.0; 3]).unwrap().data().iter().all(|&v| v == 0.0));
        let y = apply_gates(&x, &[1.0, 0.0, 1.0]).unwrap();
        for (i, (&a, &b)) in x.data().iter().zip(y.data()).enumerate() {
            let ch = (i / 4) % 3;
            assert_eq!(b, if ch == 1 { 0.0 } else { a });
        }
        assert!(apply_gates(&x, &[1.0; 2]).is_err());
    }
}
