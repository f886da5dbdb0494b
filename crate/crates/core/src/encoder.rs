//! Post-LN transformer encoder with visibility-masked multi-head attention.

use ndarray::{s, NdFloat};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    attention_probs, attention_score_grad, dropout_mask, gelu, gelu_backward, head_view, layer_norm,
    layer_norm_backward, linear, linear_backward, mask_bias, normal_init, scalar, LayerNormCache, Mat, MaskMode,
    Params,
};
use crate::sequence::{Visibility, MAX_SEQ_LEN};

pub const LN_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub dropout: f64,
    pub max_seq: usize,
    pub mask_mode: MaskMode,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            hidden: 48,
            layers: 2,
            heads: 4,
            ffn_mult: 4,
            dropout: 0.1,
            max_seq: MAX_SEQ_LEN,
            mask_mode: MaskMode::Additive,
        }
    }
}

impl EncoderConfig {
    /// BERT-base sized preset.
    pub fn base() -> Self {
        EncoderConfig {
            hidden: 768,
            layers: 12,
            heads: 12,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.hidden == 0 || self.hidden % 12 != 0 {
            return bad(format!("hidden size {} must be a positive multiple of 12", self.hidden));
        }
        if self.heads == 0 || self.hidden % self.heads != 0 {
            return bad(format!("hidden size {} is not divisible by {} heads", self.hidden, self.heads));
        }
        if self.layers == 0 {
            return bad("encoder needs at least one layer".into());
        }
        if self.ffn_mult == 0 {
            return bad("ffn_mult must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.max_seq == 0 {
            return bad("max_seq must be positive".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights<F> {
    pub wq: Mat<F>,
    pub bq: Mat<F>,
    pub wk: Mat<F>,
    pub bk: Mat<F>,
    pub wv: Mat<F>,
    pub bv: Mat<F>,
    pub wo: Mat<F>,
    pub bo: Mat<F>,
    pub ln1_g: Mat<F>,
    pub ln1_b: Mat<F>,
    pub w1: Mat<F>,
    pub b1: Mat<F>,
    pub w2: Mat<F>,
    pub b2: Mat<F>,
    pub ln2_g: Mat<F>,
    pub ln2_b: Mat<F>,
}

impl<F: NdFloat> LayerWeights<F> {
    fn zeros(h: usize, ffn: usize) -> Self {
        let z = |r, c| Mat::zeros((r, c));
        let one = |c| Mat::from_elem((1, c), F::one());
        LayerWeights {
            wq: z(h, h),
            bq: z(1, h),
            wk: z(h, h),
            bk: z(1, h),
            wv: z(h, h),
            bv: z(1, h),
            wo: z(h, h),
            bo: z(1, h),
            ln1_g: one(h),
            ln1_b: z(1, h),
            w1: z(h, ffn),
            b1: z(1, ffn),
            w2: z(ffn, h),
            b2: z(1, h),
            ln2_g: one(h),
            ln2_b: z(1, h),
        }
    }

    fn named(&self) -> [(&'static str, &Mat<F>); 16] {
        [
            ("wq", &self.wq),
            ("bq", &self.bq),
            ("wk", &self.wk),
            ("bk", &self.bk),
            ("wv", &self.wv),
            ("bv", &self.bv),
            ("wo", &self.wo),
            ("bo", &self.bo),
            ("ln1_g", &self.ln1_g),
            ("ln1_b", &self.ln1_b),
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("w2", &self.w2),
            ("b2", &self.b2),
            ("ln2_g", &self.ln2_g),
            ("ln2_b", &self.ln2_b),
        ]
    }

    fn named_mut(&mut self) -> [(&'static str, &mut Mat<F>); 16] {
        [
            ("wq", &mut self.wq),
            ("bq", &mut self.bq),
            ("wk", &mut self.wk),
            ("bk", &mut self.bk),
            ("wv", &mut self.wv),
            ("bv", &mut self.bv),
            ("wo", &mut self.wo),
            ("bo", &mut self.bo),
            ("ln1_g", &mut self.ln1_g),
            ("ln1_b", &mut self.ln1_b),
            ("w1", &mut self.w1),
            ("b1", &mut self.b1),
            ("w2", &mut self.w2),
            ("b2", &mut self.b2),
            ("ln2_g", &mut self.ln2_g),
            ("ln2_b", &mut self.ln2_b),
        ]
    }
}

/// Encoder stack plus the output bias of the tied MLM head.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderWeights<F> {
    pub in_g: Mat<F>,
    pub in_b: Mat<F>,
    pub layers: Vec<LayerWeights<F>>,
    pub mlm_bias: Mat<F>,
}

struct LayerCache<F> {
    x: Mat<F>,
    q: Mat<F>,
    k: Mat<F>,
    v: Mat<F>,
    probs: Vec<Mat<F>>,
    ctx: Mat<F>,
    drop1: Option<Mat<F>>,
    ln1: LayerNormCache<F>,
    h1: Mat<F>,
    f1: Mat<F>,
    g: Mat<F>,
    drop2: Option<Mat<F>>,
    ln2: LayerNormCache<F>,
}

/// Activations kept for the backward pass.
pub struct ForwardCache<F> {
    input_ln: LayerNormCache<F>,
    layers: Vec<LayerCache<F>>,
}

fn ensure_finite<F: NdFloat>(m: &Mat<F>, what: &str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite {
            step: 0,
            what: what.to_string(),
        })
    }
}

impl<F: NdFloat> EncoderWeights<F> {
    pub fn zeros(cfg: &EncoderConfig, vocab: usize) -> Self {
        let h = cfg.hidden;
        EncoderWeights {
            in_g: Mat::from_elem((1, h), F::one()),
            in_b: Mat::zeros((1, h)),
            layers: (0..cfg.layers).map(|_| LayerWeights::zeros(h, cfg.ffn_mult * h)).collect(),
            mlm_bias: Mat::zeros((1, vocab)),
        }
    }

    /// Normal(0, 0.02) matrices, zero biases, unit layer-norm scales.
    pub fn init<R: Rng + ?Sized>(cfg: &EncoderConfig, vocab: usize, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut w = Self::zeros(cfg, vocab);
        for layer in &mut w.layers {
            for (name, t) in layer.named_mut() {
                if name.starts_with('w') {
                    *t = normal_init(t.nrows(), t.ncols(), crate::embedding::INIT_STD, rng);
                }
            }
        }
        Ok(w)
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.zero_grad();
        z
    }

    /// Forward pass. Dropout is active only when `rng` is given.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        x: &Mat<F>,
        mask: &Visibility,
        cfg: &EncoderConfig,
        mut rng: Option<&mut R>,
    ) -> Result<(Mat<F>, ForwardCache<F>)> {
        let (n, h) = x.dim();
        if h != cfg.hidden || mask.len() != n || n > cfg.max_seq || n == 0 {
            return Err(Error::Shape(format!(
                "encoder input {n}x{h}, mask {}, hidden {}, max_seq {}",
                mask.len(),
                cfg.hidden,
                cfg.max_seq
            )));
        }
        let d = cfg.head_dim();
        let bias = mask_bias::<F>(mask);
        let (mut cur, input_ln) = layer_norm(x, &self.in_g, &self.in_b, LN_EPS);
        let mut caches = Vec::with_capacity(self.layers.len());
        let p = cfg.dropout;
        for (li, lw) in self.layers.iter().enumerate() {
            let xv = cur.view();
            let q = linear(&xv, &lw.wq, &lw.bq);
            let k = linear(&xv, &lw.wk, &lw.bk);
            let v = linear(&xv, &lw.wv, &lw.bv);
            let mut ctx = Mat::zeros((n, h));
            let mut probs = Vec::with_capacity(cfg.heads);
            for a in 0..cfg.heads {
                let pa = attention_probs(&head_view(&q, a, d), &head_view(&k, a, d), mask, &bias, cfg.mask_mode);
                ctx.slice_mut(s![.., a * d..(a + 1) * d]).assign(&pa.dot(&head_view(&v, a, d)));
                probs.push(pa);
            }
            let mut attn = linear(&ctx.view(), &lw.wo, &lw.bo);
            let drop1 = match rng.as_deref_mut() {
                Some(r) if p > 0.0 => Some(dropout_mask(n, h, p, r)),
                _ => None,
            };
            if let Some(m) = &drop1 {
                attn *= m;
            }
            let (h1, ln1) = layer_norm(&(&cur + &attn), &lw.ln1_g, &lw.ln1_b, LN_EPS);
            let f1 = linear(&h1.view(), &lw.w1, &lw.b1);
            let g = gelu(&f1);
            let mut f2 = linear(&g.view(), &lw.w2, &lw.b2);
            let drop2 = match rng.as_deref_mut() {
                Some(r) if p > 0.0 => Some(dropout_mask(n, h, p, r)),
                _ => None,
            };
            if let Some(m) = &drop2 {
                f2 *= m;
            }
            let (h2, ln2) = layer_norm(&(&h1 + &f2), &lw.ln2_g, &lw.ln2_b, LN_EPS);
            ensure_finite(&h2, &format!("layer {li} activations"))?;
            caches.push(LayerCache {
                x: cur,
                q,
                k,
                v,
                probs,
                ctx,
                drop1,
                ln1,
                h1,
                f1,
                g,
                drop2,
                ln2,
            });
            cur = h2;
        }
        Ok((cur, ForwardCache { input_ln, layers: caches }))
    }

    /// Inference forward pass (no dropout).
    pub fn encode(&self, x: &Mat<F>, mask: &Visibility, cfg: &EncoderConfig) -> Result<Mat<F>> {
        Ok(self.forward::<rand_chacha::ChaCha8Rng>(x, mask, cfg, None)?.0)
    }

    /// Accumulates weight gradients into `grads`; returns the input gradient.
    pub fn backward(&self, cache: &ForwardCache<F>, dout: &Mat<F>, cfg: &EncoderConfig, grads: &mut Self) -> Mat<F> {
        let d = cfg.head_dim();
        let scale = scalar::<F>(1.0 / (d as f64).sqrt());
        let mut dcur = dout.clone();
        for ((lw, c), gw) in self.layers.iter().zip(&cache.layers).zip(grads.layers.iter_mut()).rev() {
            let dr2 = layer_norm_backward(&c.ln2, &lw.ln2_g, &dcur, &mut gw.ln2_g, &mut gw.ln2_b);
            let mut df2 = dr2.clone();
            if let Some(m) = &c.drop2 {
                df2 *= m;
            }
            let dg = linear_backward(&c.g.view(), &lw.w2, &df2, &mut gw.w2, &mut gw.b2);
            let df1 = gelu_backward(&c.f1, &dg);
            let dh1 = dr2 + linear_backward(&c.h1.view(), &lw.w1, &df1, &mut gw.w1, &mut gw.b1);
            let dr1 = layer_norm_backward(&c.ln1, &lw.ln1_g, &dh1, &mut gw.ln1_g, &mut gw.ln1_b);
            let mut dattn = dr1.clone();
            if let Some(m) = &c.drop1 {
                dattn *= m;
            }
            let dctx = linear_backward(&c.ctx.view(), &lw.wo, &dattn, &mut gw.wo, &mut gw.bo);
            let n = dctx.nrows();
            let mut dq = Mat::zeros((n, cfg.hidden));
            let mut dk = Mat::zeros((n, cfg.hidden));
            let mut dv = Mat::zeros((n, cfg.hidden));
            for a in 0..cfg.heads {
                let cols = s![.., a * d..(a + 1) * d];
                let dctx_a = dctx.slice(cols);
                let pa = &c.probs[a];
                let ds = attention_score_grad(&head_view(&c.v, a, d), pa, &dctx_a) * scale;
                dq.slice_mut(cols).assign(&ds.dot(&head_view(&c.k, a, d)));
                dk.slice_mut(cols).assign(&ds.t().dot(&head_view(&c.q, a, d)));
                dv.slice_mut(cols).assign(&pa.t().dot(&dctx_a));
            }
            let xv = c.x.view();
            let mut dx = dr1;
            dx += &linear_backward(&xv, &lw.wq, &dq, &mut gw.wq, &mut gw.bq);
            dx += &linear_backward(&xv, &lw.wk, &dk, &mut gw.wk, &mut gw.bk);
            dx += &linear_backward(&xv, &lw.wv, &dv, &mut gw.wv, &mut gw.bv);
            dcur = dx;
        }
        layer_norm_backward(&cache.input_ln, &self.in_g, &dcur, &mut grads.in_g, &mut grads.in_b)
    }
}

impl<F: NdFloat> Params<F> for EncoderWeights<F> {
    fn tensors(&self) -> Vec<(String, &Mat<F>)> {
        let mut v = vec![("in_g".to_string(), &self.in_g), ("in_b".to_string(), &self.in_b)];
        for (i, l) in self.layers.iter().enumerate() {
            v.extend(l.named().into_iter().map(|(n, t)| (format!("layer{i}.{n}"), t)));
        }
        v.push(("mlm_bias".into(), &self.mlm_bias));
        v
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut Mat<F>)> {
        let mut v = vec![("in_g".to_string(), &mut self.in_g), ("in_b".to_string(), &mut self.in_b)];
        for (i, l) in self.layers.iter_mut().enumerate() {
            v.extend(l.named_mut().into_iter().map(|(n, t)| (format!("layer{i}.{n}"), t)));
        }
        v.push(("mlm_bias".into(), &mut self.mlm_bias));
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::softmax_rows;
    use ndarray::Axis;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> EncoderConfig {
        EncoderConfig {
            hidden: 12,
            layers: 2,
            heads: 2,
            ffn_mult: 2,
            dropout: 0.0,
            ..Default::default()
        }
    }

    fn random_weights(cfg: &EncoderConfig, seed: u64) -> EncoderWeights<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = EncoderWeights::init(cfg, 5, &mut rng).unwrap();
        for (_, t) in w.tensors_mut() {
            *t += &normal_init(t.nrows(), t.ncols(), 0.3, &mut rng);
        }
        w
    }

    fn max_abs(a: &Mat<f64>, b: &Mat<f64>) -> f64 {
        (a - b).iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Textbook unmasked encoder used as an oracle.
    fn reference(w: &EncoderWeights<f64>, x: &Mat<f64>, cfg: &EncoderConfig) -> Mat<f64> {
        let ln = |x: &Mat<f64>, g: &Mat<f64>, b: &Mat<f64>| {
            let mut out = x.clone();
            for (mut r, xr) in out.rows_mut().into_iter().zip(x.rows()) {
                let mu = xr.mean().unwrap();
                let var = xr.mapv(|v| (v - mu).powi(2)).mean().unwrap();
                r.assign(&((&xr - mu) / (var + LN_EPS).sqrt()));
            }
            out * g + b
        };
        let d = cfg.head_dim();
        let mut h = ln(x, &w.in_g, &w.in_b);
        for l in &w.layers {
            let q = h.dot(&l.wq) + &l.bq;
            let k = h.dot(&l.wk) + &l.bk;
            let v = h.dot(&l.wv) + &l.bv;
            let mut ctx = Mat::zeros(h.dim());
            for a in 0..cfg.heads {
                let r = s![.., a * d..(a + 1) * d];
                let mut sc = q.slice(r).dot(&k.slice(r).t()) / (d as f64).sqrt();
                softmax_rows(&mut sc);
                ctx.slice_mut(r).assign(&sc.dot(&v.slice(r)));
            }
            let h1 = ln(&(&h + &(ctx.dot(&l.wo) + &l.bo)), &l.ln1_g, &l.ln1_b);
            let f = gelu(&(h1.dot(&l.w1) + &l.b1)).dot(&l.w2) + &l.b2;
            h = ln(&(&h1 + &f), &l.ln2_g, &l.ln2_b);
        }
        h
    }

    #[test]
    fn config_validation() {
        assert!(EncoderConfig::default().validate().is_ok());
        assert!(EncoderConfig::base().validate().is_ok());
        for bad in [
            EncoderConfig { hidden: 30, ..tiny() },
            EncoderConfig { heads: 5, ..tiny() },
            EncoderConfig { layers: 0, ..tiny() },
            EncoderConfig { dropout: 1.0, ..tiny() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn zero_weights_collapse_to_double_layer_norm() {
        let cfg = EncoderConfig { layers: 1, ..tiny() };
        let w = EncoderWeights::<f64>::zeros(&cfg, 5);
        let x = normal_init(4, 12, 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        let out = w.encode(&x, &Visibility::identity(4), &cfg).unwrap();
        let one = Mat::from_elem((1, 12), 1.0);
        let zero = Mat::zeros((1, 12));
        let l1 = layer_norm(&x, &one, &zero, LN_EPS).0;
        let l2 = layer_norm(&l1, &one, &zero, LN_EPS).0;
        let l3 = layer_norm(&l2, &one, &zero, LN_EPS).0;
        // Input norm, then one block whose two residual branches add zero.
        assert!(max_abs(&out, &l3) < 1e-9);
        assert!(max_abs(&l3, &l2) < 1e-6);
    }

    #[test]
    fn all_ones_mask_matches_reference() {
        let cfg = tiny();
        let w = random_weights(&cfg, 2);
        let x = normal_init(6, 12, 1.0, &mut ChaCha8Rng::seed_from_u64(3));
        let out = w.encode(&x, &Visibility::ones(6), &cfg).unwrap();
        assert!(max_abs(&out, &reference(&w, &x, &cfg)) < 1e-6);
    }

    #[test]
    fn permutation_equivariance() {
        let cfg = tiny();
        let w = random_weights(&cfg, 4);
        let n = 7;
        let x = normal_init(n, 12, 1.0, &mut ChaCha8Rng::seed_from_u64(5));
        let mask = Visibility::from_fn(n, |i, j| i == j || (i * j) % 3 == 1 || (i + j) % 4 == 0);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(6));
        let xp = x.select(Axis(0), &perm);
        let mp = Visibility::from_fn(n, |i, j| mask.get(perm[i], perm[j]));
        let out = w.encode(&x, &mask, &cfg).unwrap();
        let outp = w.encode(&xp, &mp, &cfg).unwrap();
        assert!(max_abs(&out.select(Axis(0), &perm), &outp) < 1e-12);
    }

    #[test]
    fn dropout_is_seeded() {
        let cfg = EncoderConfig { dropout: 0.2, ..tiny() };
        let w: EncoderWeights<f32> = EncoderWeights::init(&cfg, 5, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let x = normal_init(5, 12, 1.0, &mut ChaCha8Rng::seed_from_u64(8));
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            w.forward(&x, &Visibility::ones(5), &cfg, Some(&mut rng)).unwrap().0
        };
        assert_eq!(run(1), run(1));
        assert_ne!(run(1), run(2));
        assert_eq!(w.encode(&x, &Visibility::ones(5), &cfg).unwrap(), w.encode(&x, &Visibility::ones(5), &cfg).unwrap());
    }

    #[test]
    fn rejects_bad_shapes_and_non_finite() {
        let cfg = tiny();
        let w = random_weights(&cfg, 9);
        let x = Mat::zeros((3, 12));
        assert!(matches!(w.encode(&x, &Visibility::ones(4), &cfg), Err(Error::Shape(_))));
        let long = EncoderConfig { max_seq: 2, ..tiny() };
        assert!(matches!(w.encode(&x, &Visibility::ones(3), &long), Err(Error::Shape(_))));
        let mut nan = normal_init(3, 12, 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        nan[[1, 1]] = f64::NAN;
        assert!(matches!(w.encode(&nan, &Visibility::ones(3), &cfg), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let cfg = EncoderConfig { dropout: 0.3, ..tiny() };
        let w = random_weights(&cfg, 10);
        let n = 5;
        let x = normal_init(n, 12, 1.0, &mut ChaCha8Rng::seed_from_u64(11));
        let up = normal_init(n, 12, 1.0, &mut ChaCha8Rng::seed_from_u64(12));
        let mask = Visibility::from_fn(n, |i, j| i == j || (i + j) % 2 == 0);
        let loss = |w: &EncoderWeights<f64>, x: &Mat<f64>| {
            let mut rng = ChaCha8Rng::seed_from_u64(13);
            (w.forward(x, &mask, &cfg, Some(&mut rng)).unwrap().0 * &up).sum()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let (_, cache) = w.forward(&x, &mask, &cfg, Some(&mut rng)).unwrap();
        let mut g = w.zeros_like();
        let dx = w.backward(&cache, &up, &cfg, &mut g);
        let eps = 1e-5;
        let mut xp = x.clone();
        for idx in ndarray::indices(x.dim()) {
            xp[idx] = x[idx] + eps;
            let lp = loss(&w, &xp);
            xp[idx] = x[idx] - eps;
            let lm = loss(&w, &xp);
            xp[idx] = x[idx];
            let num = (lp - lm) / (2.0 * eps);
            assert!((num - dx[idx]).abs() < 1e-6 * (1.0 + num.abs()), "x{idx:?}: {num} vs {}", dx[idx]);
        }
        let mut wp = w.clone();
        let names: Vec<String> = g.tensors().into_iter().map(|(n, _)| n).collect();
        for (t, name) in names.iter().enumerate() {
            let shape = wp.tensors()[t].1.dim();
            for idx in ndarray::indices(shape).into_iter().step_by(7) {
                let orig = wp.tensors()[t].1[idx];
                wp.tensors_mut()[t].1[idx] = orig + eps;
                let lp = loss(&wp, &x);
                wp.tensors_mut()[t].1[idx] = orig - eps;
                let lm = loss(&wp, &x);
                wp.tensors_mut()[t].1[idx] = orig;
                let num = (lp - lm) / (2.0 * eps);
                let ana = g.tensors()[t].1[idx];
                assert!((num - ana).abs() < 1e-6 * (1.0 + num.abs()), "{name}{idx:?}: {num} vs {ana}");
            }
        }
    }
}
