//! Central-difference gradient checks.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::encoder::EncoderConfig;
use crate::error::Result;
use crate::featurize::{FeatureBits, NumberFeatures, TokenRecord, MASK, TYPE_COUNT};
use crate::nn::{Mat, MaskMode, Params};
use crate::pretrain::{instance_loss, Candidate, ClcTarget, LossScale, SegmentModel, TrainInstance};
use crate::sequence::{AblationFlags, Visibility};
use crate::table::{BiCoordinate, CoordPair};

/// Denominator floor for the relative error. Gradients that vanish exactly
/// (a key bias under softmax, say) are compared on this absolute scale.
pub const REL_FLOOR: f64 = 1e-6;

impl<F: ndarray::NdFloat> Params<F> for Mat<F> {
    fn tensors(&self) -> Vec<(String, &Mat<F>)> {
        vec![("x".into(), self)]
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut Mat<F>)> {
        vec![("x".into(), self)]
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&TensorCheck> {
        self.tensors
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

/// `|a - n| / max(|a|, |n|, REL_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares `analytic` against central differences of `loss` at `params`,
/// on up to `samples` random coordinates per tensor (all of them when the
/// tensor is smaller).
pub fn grad_check<P: Params<f64> + Clone>(
    params: &P,
    analytic: &P,
    loss: impl Fn(&P) -> f64,
    eps: f64,
    samples: usize,
    seed: u64,
) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = params.clone();
    let grads = analytic.tensors();
    let mut tensors = Vec::new();
    for (t, (name, g)) in grads.iter().enumerate() {
        let len = g.len();
        let picks: Vec<usize> = if len <= samples {
            (0..len).collect()
        } else {
            sample(&mut rng, len, samples).into_vec()
        };
        let cols = g.ncols();
        let mut worst = 0.0f64;
        for flat in &picks {
            let idx = (flat / cols, flat % cols);
            let orig = p.tensors()[t].1[idx];
            p.tensors_mut()[t].1[idx] = orig + eps;
            let lp = loss(&p);
            p.tensors_mut()[t].1[idx] = orig - eps;
            let lm = loss(&p);
            p.tensors_mut()[t].1[idx] = orig;
            let numeric = (lp - lm) / (2.0 * eps);
            worst = worst.max(relative_error(g[idx], numeric));
        }
        tensors.push(TensorCheck {
            name: name.clone(),
            checked: picks.len(),
            max_rel_error: worst,
        });
    }
    let max_rel_error = tensors.iter().fold(0.0f64, |m, t| m.max(t.max_rel_error));
    GradCheckReport { max_rel_error, tensors }
}

/// Configuration of a full-pipeline check.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct PipelineCheck {
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub tokens: usize,
    pub vocab: usize,
    pub positions: usize,
    pub dropout: f64,
    pub mask_mode: MaskMode,
    pub flags: AblationFlags,
    pub seed: u64,
}

impl Default for PipelineCheck {
    fn default() -> Self {
        PipelineCheck {
            hidden: 12,
            layers: 2,
            heads: 2,
            tokens: 8,
            vocab: 24,
            positions: 8,
            dropout: 0.1,
            mask_mode: MaskMode::Additive,
            flags: AblationFlags::none(),
            seed: 0,
        }
    }
}

fn random_record<R: Rng>(rng: &mut R, vocab: usize, positions: usize) -> TokenRecord {
    let number = rng.random_bool(0.4);
    let mut feat = FeatureBits::default();
    for k in 0..crate::featurize::FEATURE_BITS {
        if rng.random_bool(0.3) {
            feat = FeatureBits(feat.0 | (1 << k));
        }
    }
    let mut pair = || CoordPair::new(rng.random_range(0..positions), rng.random_range(0..positions));
    let coord = BiCoordinate {
        v: pair(),
        h: pair(),
        n: pair(),
    };
    TokenRecord {
        token_id: rng.random_range(6..vocab as u32),
        num: number.then(|| {
            NumberFeatures::new(
                rng.random_range(0..11),
                rng.random_range(0..11),
                rng.random_range(0..11),
                rng.random_range(0..11),
            )
        }),
        in_pos: rng.random_range(0..8),
        coord,
        feat,
        type_id: rng.random_range(0..TYPE_COUNT as u8),
    }
}

/// A random instance with two MLM targets and one cloze cell.
pub fn synthetic_instance(check: &PipelineCheck) -> TrainInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(check.seed);
    let n = check.tokens.max(5);
    let mut tokens: Vec<TokenRecord> = (0..n).map(|_| random_record(&mut rng, check.vocab, check.positions)).collect();
    let mut visibility = Visibility::from_fn(n, |i, j| i == j);
    for i in 0..n {
        for j in i + 1..n {
            let v = rng.random_bool(0.6);
            visibility.set(i, j, v);
            visibility.set(j, i, v);
        }
    }
    let mlm = vec![(1, tokens[1].token_id), (n - 1, tokens[n - 1].token_id)];
    tokens[1].token_id = MASK;
    let candidates = (0..3)
        .map(|c| Candidate {
            text: format!("candidate {c}"),
            records: (0..1 + c).map(|_| random_record(&mut rng, check.vocab, check.positions)).collect(),
        })
        .collect();
    for t in &mut tokens[2..4] {
        t.token_id = MASK;
        t.num = None;
    }
    TrainInstance {
        tokens,
        visibility,
        mlm,
        clc: vec![ClcTarget {
            cell: 0,
            positions: vec![2, 3],
            candidates,
            answer: 1,
        }],
        dropout_seed: (check.dropout > 0.0).then_some(check.seed + 1),
    }
}

/// Gradient check of embed → masked encoder → MLM + cloze loss at `f64`.
pub fn pipeline_grad_check(check: &PipelineCheck, samples: usize) -> Result<GradCheckReport> {
    let enc = EncoderConfig {
        hidden: check.hidden,
        layers: check.layers,
        heads: check.heads,
        ffn_mult: 2,
        dropout: check.dropout,
        max_seq: check.tokens.max(5),
        mask_mode: check.mask_mode,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(check.seed ^ 0xabcd);
    let mut model = SegmentModel::<f64>::init(&enc, check.vocab, check.positions, &mut rng)?;
    // Larger weights than the 0.02 init so every path carries signal.
    for (_, t) in model.tensors_mut() {
        *t += &crate::nn::normal_init(t.nrows(), t.ncols(), 0.2, &mut rng);
    }
    let inst = synthetic_instance(check);
    let scale = LossScale {
        mlm: 0.5,
        clc: 1.0,
        temperature: 5.0,
    };
    let mut grads = model.zeros_like();
    instance_loss(&model, &inst, &enc, check.flags, &scale, Some(&mut grads))?;
    let loss = |m: &SegmentModel<f64>| {
        instance_loss(m, &inst, &enc, check.flags, &scale, None)
            .expect("forward")
            .weighted(&scale)
    };
    Ok(grad_check(&model, &grads, loss, 1e-5, samples, check.seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::normal_init;

    #[test]
    fn quadratic_is_exact() {
        let w: Mat<f64> = normal_init::<f64, _>(20, 15, 1.0, &mut ChaCha8Rng::seed_from_u64(1)).mapv(|x| 1.0 + x.abs());
        let report = grad_check(&w, &w, |w| w.iter().map(|x| x * x).sum::<f64>() / 2.0, 1e-5, 200, 0);
        assert!(report.max_rel_error < 1e-8, "{}", report.max_rel_error);
        assert_eq!(report.tensors[0].checked, 200);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        let w: Mat<f64> = normal_init(3, 3, 1.0, &mut ChaCha8Rng::seed_from_u64(2));
        let wrong = &w * 1.1;
        let report = grad_check(&w, &wrong, |w| w.iter().map(|x| x * x).sum::<f64>() / 2.0, 1e-5, 200, 0);
        assert!(report.max_rel_error > 0.05);
    }

    #[test]
    fn pipeline_gradients() {
        let report = pipeline_grad_check(&PipelineCheck::default(), 200).unwrap();
        let worst = report.worst().unwrap();
        assert!(report.max_rel_error < 1e-4, "{} {}", worst.name, worst.max_rel_error);
    }
}
