//! Dense numerics kernel: the handful of differentiable operations the encoder
//! is built from, each with an explicit backward pass.
//!
//! Everything is generic over [`NdFloat`] so training runs in `f32` while
//! gradient checks run in `f64`.

use ndarray::{s, Array1, Array2, ArrayView2, Axis, NdFloat};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sequence::Visibility;

pub type Mat<F> = Array2<F>;

/// Score added to masked positions before the softmax.
pub const MASKED_SCORE: f64 = -1e9;

#[inline]
pub fn scalar<F: NdFloat>(x: f64) -> F {
    F::from(x).expect("representable constant")
}

/// How the visibility matrix enters attention.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// Masked scores get a large negative offset before the softmax.
    #[default]
    Additive,
    /// Softmax over all positions, multiply by the mask, renormalize rows.
    MultiplicativeRenorm,
}

/// Named trainable tensors, visited in a fixed order.
pub trait Params<F: NdFloat> {
    fn tensors(&self) -> Vec<(String, &Mat<F>)>;
    fn tensors_mut(&mut self) -> Vec<(String, &mut Mat<F>)>;

    fn zero_grad(&mut self) {
        for (_, t) in self.tensors_mut() {
            t.fill(F::zero());
        }
    }

    fn add_assign(&mut self, other: &Self)
    where
        Self: Sized,
    {
        for ((_, a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            *a += b;
        }
    }

    fn scale(&mut self, by: F) {
        for (_, t) in self.tensors_mut() {
            t.mapv_inplace(|x| x * by);
        }
    }

    fn sq_norm(&self) -> F {
        self.tensors()
            .into_iter()
            .map(|(_, t)| t.iter().fold(F::zero(), |acc, x| acc + *x * *x))
            .fold(F::zero(), |a, b| a + b)
    }

    fn first_non_finite(&self) -> Option<String> {
        self.tensors()
            .into_iter()
            .find(|(_, t)| t.iter().any(|x| !x.is_finite()))
            .map(|(name, _)| name)
    }

    fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }
}

pub fn normal_init<F: NdFloat, R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Mat<F> {
    let dist = Normal::new(0.0, std).expect("valid std");
    Array2::from_shape_simple_fn((rows, cols), || scalar(dist.sample(rng)))
}

/// Converts every element with `f64` as the go-between.
pub fn cast<A: NdFloat, B: NdFloat>(m: &Mat<A>) -> Mat<B> {
    m.mapv(|x| scalar(x.to_f64().expect("finite")))
}

// ---------------------------------------------------------------------------
// Linear

pub fn linear<F: NdFloat>(x: &ArrayView2<F>, w: &Mat<F>, b: &Mat<F>) -> Mat<F> {
    x.dot(w) + b
}

/// Accumulates weight and bias gradients; returns the input gradient.
pub fn linear_backward<F: NdFloat>(
    x: &ArrayView2<F>,
    w: &Mat<F>,
    dy: &Mat<F>,
    dw: &mut Mat<F>,
    db: &mut Mat<F>,
) -> Mat<F> {
    *dw += &x.t().dot(dy);
    *db += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
    dy.dot(&w.t())
}

// ---------------------------------------------------------------------------
// Layer norm

pub struct LayerNormCache<F> {
    xhat: Mat<F>,
    inv_std: Array1<F>,
}

pub fn layer_norm<F: NdFloat>(
    x: &Mat<F>,
    gamma: &Mat<F>,
    beta: &Mat<F>,
    eps: f64,
) -> (Mat<F>, LayerNormCache<F>) {
    let h = scalar::<F>(x.ncols() as f64);
    let mean = x.sum_axis(Axis(1)) / h;
    let centered = x - &mean.view().insert_axis(Axis(1));
    let var = centered.mapv(|v| v * v).sum_axis(Axis(1)) / h;
    let inv_std = var.mapv(|v| F::one() / (v + scalar(eps)).sqrt());
    let xhat = centered * &inv_std.view().insert_axis(Axis(1));
    let y = &xhat * gamma + beta;
    (y, LayerNormCache { xhat, inv_std })
}

pub fn layer_norm_backward<F: NdFloat>(
    cache: &LayerNormCache<F>,
    gamma: &Mat<F>,
    dy: &Mat<F>,
    dgamma: &mut Mat<F>,
    dbeta: &mut Mat<F>,
) -> Mat<F> {
    *dgamma += &(dy * &cache.xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
    *dbeta += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
    let dxhat = dy * gamma;
    let h = scalar::<F>(dy.ncols() as f64);
    let mean_d = dxhat.sum_axis(Axis(1)) / h;
    let mean_dx = (&dxhat * &cache.xhat).sum_axis(Axis(1)) / h;
    let mut dx = dxhat - &mean_d.view().insert_axis(Axis(1));
    dx -= &(&cache.xhat * &mean_dx.view().insert_axis(Axis(1)));
    dx * &cache.inv_std.view().insert_axis(Axis(1))
}

// ---------------------------------------------------------------------------
// GELU (tanh approximation)

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// `tanh` through a single `exp`, which is markedly cheaper than libm's.
fn tanh<F: NdFloat>(z: F) -> F {
    let two = scalar::<F>(2.0);
    F::one() - two / ((two * z).exp() + F::one())
}

pub fn gelu<F: NdFloat>(x: &Mat<F>) -> Mat<F> {
    let (c, a, half) = (scalar::<F>(GELU_C), scalar::<F>(GELU_A), scalar::<F>(0.5));
    x.mapv(|v| half * v * (F::one() + tanh(c * (v + a * v * v * v))))
}

pub fn gelu_backward<F: NdFloat>(x: &Mat<F>, dy: &Mat<F>) -> Mat<F> {
    let (c, a, half) = (scalar::<F>(GELU_C), scalar::<F>(GELU_A), scalar::<F>(0.5));
    let three = scalar::<F>(3.0);
    let mut dx = x.mapv(|v| {
        let t = tanh(c * (v + a * v * v * v));
        half * (F::one() + t) + half * v * (F::one() - t * t) * c * (F::one() + three * a * v * v)
    });
    dx *= dy;
    dx
}

// ---------------------------------------------------------------------------
// Softmax and attention

/// Row-wise softmax, in place. Entries whose exponential would underflow
/// the normal range are set to zero without calling `exp`.
pub fn softmax_rows<F: NdFloat>(x: &mut Mat<F>) {
    let floor = F::min_positive_value().ln();
    for mut row in x.rows_mut() {
        let max = row.fold(F::neg_infinity(), |m, v| m.max(*v));
        row.mapv_inplace(|v| {
            let d = v - max;
            if d < floor {
                F::zero()
            } else {
                d.exp()
            }
        });
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

/// 0 where visible, [`MASKED_SCORE`] elsewhere.
pub fn mask_bias<F: NdFloat>(mask: &Visibility) -> Mat<F> {
    let n = mask.len();
    let neg = scalar::<F>(MASKED_SCORE);
    Array2::from_shape_fn((n, n), |(i, j)| if mask.get(i, j) { F::zero() } else { neg })
}

pub fn check_shapes<F>(q: &ArrayView2<F>, k: &ArrayView2<F>, v: &ArrayView2<F>, n_mask: usize) -> Result<()> {
    let n = q.nrows();
    if k.dim() != q.dim() || v.nrows() != n || n_mask != n {
        return Err(Error::Shape(format!(
            "attention shapes q={:?} k={:?} v={:?} mask={n_mask}",
            q.dim(),
            k.dim(),
            v.dim()
        )));
    }
    Ok(())
}

/// Attention probabilities `softmax(QKᵀ/√d)` restricted to visible positions.
pub fn attention_probs<F: NdFloat>(
    q: &ArrayView2<F>,
    k: &ArrayView2<F>,
    mask: &Visibility,
    bias: &Mat<F>,
    mode: MaskMode,
) -> Mat<F> {
    let d = q.ncols();
    let scale = scalar::<F>(1.0 / (d as f64).sqrt());
    let mut scores = q.dot(&k.t()) * scale;
    match mode {
        MaskMode::Additive => {
            scores += bias;
            softmax_rows(&mut scores);
        }
        MaskMode::MultiplicativeRenorm => {
            softmax_rows(&mut scores);
            for ((i, j), p) in scores.indexed_iter_mut() {
                if !mask.get(i, j) {
                    *p = F::zero();
                }
            }
            for mut row in scores.rows_mut() {
                let sum = row.sum();
                row.mapv_inplace(|v| v / sum);
            }
        }
    }
    scores
}

/// Visibility-masked scaled dot-product attention. Returns the output and the
/// attention probabilities.
pub fn masked_attention<F: NdFloat>(
    q: &ArrayView2<F>,
    k: &ArrayView2<F>,
    v: &ArrayView2<F>,
    mask: &Visibility,
    mode: MaskMode,
) -> Result<(Mat<F>, Mat<F>)> {
    check_shapes(q, k, v, mask.len())?;
    let bias = mask_bias(mask);
    let probs = attention_probs(q, k, mask, &bias, mode);
    Ok((probs.dot(v), probs))
}

/// Gradients of masked attention with respect to Q, K and V. Masked score
/// entries have zero probability and so receive exactly zero gradient.
pub fn masked_attention_backward<F: NdFloat>(
    q: &ArrayView2<F>,
    k: &ArrayView2<F>,
    v: &ArrayView2<F>,
    probs: &Mat<F>,
    dout: &ArrayView2<F>,
) -> (Mat<F>, Mat<F>, Mat<F>) {
    let dscores = attention_score_grad(v, probs, dout);
    let scale = scalar::<F>(1.0 / (q.ncols() as f64).sqrt());
    let dq = dscores.dot(k) * scale;
    let dk = dscores.t().dot(q) * scale;
    let dv = probs.t().dot(dout);
    (dq, dk, dv)
}

/// Gradient with respect to the pre-softmax scores (before the 1/√d scale).
pub fn attention_score_grad<F: NdFloat>(v: &ArrayView2<F>, probs: &Mat<F>, dout: &ArrayView2<F>) -> Mat<F> {
    let dprobs = dout.dot(&v.t());
    let row_dot = (&dprobs * probs).sum_axis(Axis(1));
    (dprobs - &row_dot.view().insert_axis(Axis(1))) * probs
}

/// Inverted-dropout multiplier: 0 with probability `p`, else `1/(1-p)`.
pub fn dropout_mask<F: NdFloat, R: Rng + ?Sized>(rows: usize, cols: usize, p: f64, rng: &mut R) -> Mat<F> {
    let keep = scalar::<F>(1.0 / (1.0 - p));
    Array2::from_shape_simple_fn((rows, cols), || {
        if rng.random::<f64>() < p {
            F::zero()
        } else {
            keep
        }
    })
}

/// Columns `[head*d, (head+1)*d)`.
pub fn head_view<F>(m: &Mat<F>, head: usize, d: usize) -> ArrayView2<'_, F> {
    m.slice(s![.., head * d..(head + 1) * d])
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rows: usize, cols: usize, seed: u64) -> Mat<f64> {
        normal_init(rows, cols, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    /// Central differences of a scalar function of one matrix.
    fn numeric_grad(x: &Mat<f64>, f: impl Fn(&Mat<f64>) -> f64) -> Mat<f64> {
        let eps = 1e-6;
        let mut g = Mat::zeros(x.dim());
        let mut xp = x.clone();
        for idx in ndarray::indices(x.dim()) {
            let orig = xp[idx];
            xp[idx] = orig + eps;
            let fp = f(&xp);
            xp[idx] = orig - eps;
            let fm = f(&xp);
            xp[idx] = orig;
            g[idx] = (fp - fm) / (2.0 * eps);
        }
        g
    }

    fn max_abs_diff(a: &Mat<f64>, b: &Mat<f64>) -> f64 {
        (a - b).iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    #[test]
    fn layer_norm_gradient() {
        let x = rand_mat(3, 6, 1);
        let gamma = rand_mat(1, 6, 2);
        let beta = rand_mat(1, 6, 3);
        let w = rand_mat(3, 6, 4);
        let loss = |x: &Mat<f64>| (layer_norm(x, &gamma, &beta, 1e-6).0 * &w).sum();
        let (_, cache) = layer_norm(&x, &gamma, &beta, 1e-6);
        let (mut dg, mut db) = (Mat::zeros((1, 6)), Mat::zeros((1, 6)));
        let dx = layer_norm_backward(&cache, &gamma, &w, &mut dg, &mut db);
        assert!(max_abs_diff(&dx, &numeric_grad(&x, loss)) < 1e-7);
        let loss_g = |g: &Mat<f64>| (layer_norm(&x, g, &beta, 1e-6).0 * &w).sum();
        assert!(max_abs_diff(&dg, &numeric_grad(&gamma, loss_g)) < 1e-7);
    }

    #[test]
    fn gelu_gradient() {
        let x = rand_mat(4, 5, 5) * 2.0;
        let w = rand_mat(4, 5, 6);
        let dx = gelu_backward(&x, &w);
        let num = numeric_grad(&x, |x| (gelu(x) * &w).sum());
        assert!(max_abs_diff(&dx, &num) < 1e-8);
        assert!((gelu(&array![[0.0f64]])[[0, 0]]).abs() < 1e-15);
    }

    #[test]
    fn linear_gradient() {
        let x = rand_mat(3, 4, 7);
        let w = rand_mat(4, 2, 8);
        let b = rand_mat(1, 2, 9);
        let up = rand_mat(3, 2, 10);
        let (mut dw, mut db) = (Mat::zeros((4, 2)), Mat::zeros((1, 2)));
        let dx = linear_backward(&x.view(), &w, &up, &mut dw, &mut db);
        let num_x = numeric_grad(&x, |x| (linear(&x.view(), &w, &b) * &up).sum());
        let num_w = numeric_grad(&w, |w| (linear(&x.view(), w, &b) * &up).sum());
        assert!(max_abs_diff(&dx, &num_x) < 1e-8);
        assert!(max_abs_diff(&dw, &num_w) < 1e-8);
        assert!(max_abs_diff(&db, &up.sum_axis(Axis(0)).insert_axis(Axis(0))) < 1e-12);
    }

    #[test]
    fn multiplicative_mode_matches_additive() {
        let q = rand_mat(5, 4, 11);
        let k = rand_mat(5, 4, 12);
        let v = rand_mat(5, 4, 13);
        let mask = Visibility::from_fn(5, |i, j| i == j || (i + j) % 3 == 0);
        let (a, _) = masked_attention(&q.view(), &k.view(), &v.view(), &mask, MaskMode::Additive).unwrap();
        let (b, _) =
            masked_attention(&q.view(), &k.view(), &v.view(), &mask, MaskMode::MultiplicativeRenorm).unwrap();
        assert!(max_abs_diff(&a, &b) < 1e-12);
    }

    #[test]
    fn shape_mismatch() {
        let q = rand_mat(3, 4, 1);
        let k = rand_mat(2, 4, 2);
        let r = masked_attention(&q.view(), &k.view(), &q.view(), &Visibility::ones(3), MaskMode::Additive);
        assert!(matches!(r, Err(Error::Shape(_))));
    }

    #[test]
    fn dropout_scales_kept_units() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m: Mat<f64> = dropout_mask(100, 100, 0.25, &mut rng);
        let kept = m.iter().filter(|v| **v > 0.0).count() as f64 / 10_000.0;
        assert!((kept - 0.75).abs() < 0.02);
        assert!(m.iter().all(|v| *v == 0.0 || (*v - 1.0 / 0.75).abs() < 1e-12));
    }
}
