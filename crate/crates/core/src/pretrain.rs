//! Segment-model pretraining: masked language modeling plus cell-level cloze,
//! optimized with Adam.

use std::collections::BTreeMap;
use std::time::Instant;

use ndarray::{s, Array1, Axis, NdFloat, Zip};
use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingWeights;
use crate::encoder::{EncoderConfig, EncoderWeights};
use crate::error::{Error, Result};
use crate::featurize::{Featurizer, TokenRecord, MASK, SPECIAL_TOKENS};
use crate::nn::{cast, scalar, Mat, Params};
use crate::sequence::{
    apply_ablation, build_sequences, AblationFlags, CellOrigin, SegmentKind, Slot, TokenSequence, Visibility,
};
use crate::table::{assign_coordinates, Table, DEFAULT_POSITIONS};

/// Embedding layer and encoder for one segment.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentModel<F> {
    pub embedding: EmbeddingWeights<F>,
    pub encoder: EncoderWeights<F>,
}

impl<F: NdFloat> SegmentModel<F> {
    pub fn init<R: Rng + ?Sized>(cfg: &EncoderConfig, vocab: usize, positions: usize, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        Ok(SegmentModel {
            embedding: EmbeddingWeights::init(vocab, cfg.hidden, positions, rng)?,
            encoder: EncoderWeights::init(cfg, vocab, rng)?,
        })
    }

    /// All-zero weights of the given shape.
    pub fn zeros(cfg: &EncoderConfig, vocab: usize, positions: usize) -> Result<Self> {
        cfg.validate()?;
        Ok(SegmentModel {
            embedding: EmbeddingWeights::zeros(vocab, cfg.hidden, positions)?,
            encoder: EncoderWeights::zeros(cfg, vocab),
        })
    }

    pub fn zeros_like(&self) -> Self {
        SegmentModel {
            embedding: self.embedding.zeros_like(),
            encoder: self.encoder.zeros_like(),
        }
    }

    pub fn hidden(&self) -> usize {
        self.embedding.hidden()
    }

    pub fn cast<G: NdFloat>(&self) -> SegmentModel<G> {
        let mut out = SegmentModel {
            embedding: EmbeddingWeights::<G>::zeros(
                self.embedding.vocab_size(),
                self.embedding.hidden(),
                self.embedding.positions(),
            )
            .expect("valid shape"),
            encoder: EncoderWeights::<G> {
                in_g: cast(&self.encoder.in_g),
                in_b: cast(&self.encoder.in_b),
                layers: Vec::new(),
                mlm_bias: cast(&self.encoder.mlm_bias),
            },
        };
        out.encoder.layers = self
            .encoder
            .layers
            .iter()
            .map(|l| crate::encoder::LayerWeights {
                wq: cast(&l.wq),
                bq: cast(&l.bq),
                wk: cast(&l.wk),
                bk: cast(&l.bk),
                wv: cast(&l.wv),
                bv: cast(&l.bv),
                wo: cast(&l.wo),
                bo: cast(&l.bo),
                ln1_g: cast(&l.ln1_g),
                ln1_b: cast(&l.ln1_b),
                w1: cast(&l.w1),
                b1: cast(&l.b1),
                w2: cast(&l.w2),
                b2: cast(&l.b2),
                ln2_g: cast(&l.ln2_g),
                ln2_b: cast(&l.ln2_b),
            })
            .collect();
        for ((_, dst), (_, src)) in out.embedding.tensors_mut().into_iter().zip(self.embedding.tensors()) {
            *dst = cast(src);
        }
        out
    }

    /// Hidden states for a token stream under the given ablations.
    pub fn hidden_states(
        &self,
        tokens: &[TokenRecord],
        visibility: &Visibility,
        cfg: &EncoderConfig,
        flags: AblationFlags,
    ) -> Result<Mat<F>> {
        let x = self.embedding.embed_sequence(tokens, flags)?;
        if flags.no_visibility {
            self.encoder.encode(&x, &Visibility::ones(tokens.len()), cfg)
        } else {
            self.encoder.encode(&x, visibility, cfg)
        }
    }

    pub fn encode_sequence(&self, seq: &TokenSequence, cfg: &EncoderConfig, flags: AblationFlags) -> Result<Mat<F>> {
        self.hidden_states(&seq.tokens, &seq.visibility, cfg, flags)
    }
}

impl<F: NdFloat> Params<F> for SegmentModel<F> {
    fn tensors(&self) -> Vec<(String, &Mat<F>)> {
        let mut v: Vec<_> = self
            .embedding
            .tensors()
            .into_iter()
            .map(|(n, t)| (format!("embedding.{n}"), t))
            .collect();
        v.extend(self.encoder.tensors().into_iter().map(|(n, t)| (format!("encoder.{n}"), t)));
        v
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut Mat<F>)> {
        let mut v: Vec<_> = self
            .embedding
            .tensors_mut()
            .into_iter()
            .map(|(n, t)| (format!("embedding.{n}"), t))
            .collect();
        v.extend(self.encoder.tensors_mut().into_iter().map(|(n, t)| (format!("encoder.{n}"), t)));
        v
    }
}

// ---------------------------------------------------------------------------
// Masking

/// What happens to a token selected for MLM.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskPolicy {
    /// Probability of `[MASK]`.
    pub mask: f64,
    /// Probability of a random vocabulary token; the rest stay unchanged.
    pub random: f64,
}

impl MaskPolicy {
    pub const BERT: MaskPolicy = MaskPolicy { mask: 0.8, random: 0.1 };
    pub const ALWAYS_MASK: MaskPolicy = MaskPolicy { mask: 1.0, random: 0.0 };
}

impl Default for MaskPolicy {
    fn default() -> Self {
        Self::BERT
    }
}

/// A masked token stream with MLM targets `(position, original id)`.
#[derive(Clone, Debug, PartialEq)]
pub struct MlmInstance {
    pub tokens: Vec<TokenRecord>,
    pub targets: Vec<(usize, u32)>,
}

fn mask_token(rec: &mut TokenRecord, id: u32) {
    rec.token_id = id;
    rec.num = None;
}

fn mlm_mask<R: Rng + ?Sized>(
    tokens: &mut [TokenRecord],
    maskable: &[usize],
    rate: f64,
    policy: MaskPolicy,
    vocab_size: usize,
    rng: &mut R,
) -> Vec<(usize, u32)> {
    let mut selected: Vec<usize> = maskable.iter().copied().filter(|_| rng.random::<f64>() < rate).collect();
    if selected.is_empty() && !maskable.is_empty() {
        selected.push(maskable[rng.random_range(0..maskable.len())]);
    }
    let specials = SPECIAL_TOKENS.len() as u32;
    let mut targets = Vec::with_capacity(selected.len());
    for pos in selected {
        targets.push((pos, tokens[pos].token_id));
        let r = rng.random::<f64>();
        if r < policy.mask {
            mask_token(&mut tokens[pos], MASK);
        } else if r < policy.mask + policy.random {
            let id = if vocab_size as u32 > specials {
                rng.random_range(specials..vocab_size as u32)
            } else {
                MASK
            };
            mask_token(&mut tokens[pos], id);
        }
    }
    targets
}

/// Selects each content token with probability `rate` (at least one) and
/// corrupts it per `policy`. Coordinates and feature bits are untouched.
pub fn make_mlm_instance<R: Rng + ?Sized>(
    seq: &TokenSequence,
    rate: f64,
    policy: MaskPolicy,
    vocab_size: usize,
    rng: &mut R,
) -> MlmInstance {
    let mut tokens = seq.tokens.clone();
    let maskable = seq.content_indices();
    let targets = mlm_mask(&mut tokens, &maskable, rate, policy, vocab_size, rng);
    MlmInstance { tokens, targets }
}

/// A cell string with its content tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub text: String,
    pub records: Vec<TokenRecord>,
}

/// One masked cell to recover.
#[derive(Clone, Debug, PartialEq)]
pub struct ClcTarget {
    pub cell: usize,
    pub positions: Vec<usize>,
    pub candidates: Vec<Candidate>,
    pub answer: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClcInstance {
    pub tokens: Vec<TokenRecord>,
    pub targets: Vec<ClcTarget>,
}

fn eligible_cells(seq: &TokenSequence) -> Vec<usize> {
    seq.cells
        .iter()
        .enumerate()
        .filter(|(_, c)| !c.tokens.is_empty() && !c.text.trim().is_empty())
        .map(|(i, _)| i)
        .collect()
}

/// Distinct non-empty cell strings of the given sequences, first occurrence wins.
pub fn candidate_pool<'a>(seqs: impl IntoIterator<Item = &'a TokenSequence>) -> Vec<Candidate> {
    let mut seen = std::collections::BTreeSet::new();
    let mut out = Vec::new();
    for seq in seqs {
        for c in &seq.cells {
            if c.tokens.is_empty() || c.text.trim().is_empty() || !seen.insert(c.text.clone()) {
                continue;
            }
            out.push(Candidate {
                text: c.text.clone(),
                records: seq.tokens[c.tokens.clone()].to_vec(),
            });
        }
    }
    out
}

/// Masks `k` whole cells. Each gets its own string plus up to
/// `max_candidates - 1` distinct other strings from `pool`, shuffled.
pub fn make_clc_instance<R: Rng + ?Sized>(
    seq: &TokenSequence,
    pool: &[Candidate],
    k: usize,
    max_candidates: usize,
    rng: &mut R,
) -> Result<ClcInstance> {
    let eligible = eligible_cells(seq);
    if eligible.len() < k + 1 {
        return Err(Error::TooFewCells {
            cells: eligible.len(),
            needed: k + 1,
        });
    }
    let mut tokens = seq.tokens.clone();
    let mut targets = Vec::with_capacity(k);
    let mut chosen: Vec<usize> = sample(rng, eligible.len(), k).into_iter().map(|i| eligible[i]).collect();
    chosen.sort_unstable();
    for cell in chosen {
        let c = &seq.cells[cell];
        let answer = Candidate {
            text: c.text.clone(),
            records: seq.tokens[c.tokens.clone()].to_vec(),
        };
        let others: Vec<&Candidate> = pool.iter().filter(|p| p.text != answer.text).collect();
        let take = others.len().min(max_candidates.saturating_sub(1));
        let mut candidates: Vec<Candidate> =
            sample(rng, others.len(), take).into_iter().map(|i| others[i].clone()).collect();
        let answer_idx = rng.random_range(0..=candidates.len());
        candidates.insert(answer_idx, answer);
        let positions: Vec<usize> = c.tokens.clone().collect();
        for &p in &positions {
            mask_token(&mut tokens[p], MASK);
        }
        targets.push(ClcTarget {
            cell,
            positions,
            candidates,
            answer: answer_idx,
        });
    }
    Ok(ClcInstance { tokens, targets })
}

/// Everything one forward/backward pass needs.
#[derive(Clone, Debug)]
pub struct TrainInstance {
    pub tokens: Vec<TokenRecord>,
    pub visibility: Visibility,
    pub mlm: Vec<(usize, u32)>,
    pub clc: Vec<ClcTarget>,
    pub dropout_seed: Option<u64>,
}

// ---------------------------------------------------------------------------
// Losses

/// Loss hyperparameters for one pass.
#[derive(Clone, Copy, Debug)]
pub struct LossScale {
    /// Multiplier on each MLM cross-entropy term.
    pub mlm: f64,
    /// Multiplier on each CLC cross-entropy term.
    pub clc: f64,
    pub temperature: f64,
}

/// Summed cross-entropies and their counts.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub mlm_sum: f64,
    pub mlm_count: usize,
    pub clc_sum: f64,
    pub clc_count: usize,
}

impl LossParts {
    pub fn weighted(&self, scale: &LossScale) -> f64 {
        scale.mlm * self.mlm_sum + scale.clc * self.clc_sum
    }

    fn add(&mut self, o: &LossParts) {
        self.mlm_sum += o.mlm_sum;
        self.mlm_count += o.mlm_count;
        self.clc_sum += o.clc_sum;
        self.clc_count += o.clc_count;
    }

    pub fn mlm_mean(&self) -> f64 {
        if self.mlm_count == 0 {
            0.0
        } else {
            self.mlm_sum / self.mlm_count as f64
        }
    }

    pub fn clc_mean(&self) -> f64 {
        if self.clc_count == 0 {
            0.0
        } else {
            self.clc_sum / self.clc_count as f64
        }
    }
}

/// Candidate encoding: mean of token plus number embeddings.
fn candidate_vector<F: NdFloat>(emb: &EmbeddingWeights<F>, records: &[TokenRecord]) -> Result<Array1<F>> {
    let mut acc = Array1::zeros(emb.hidden());
    for r in records {
        let c = emb.components(r)?;
        acc += &c.tok;
        acc += &c.num;
    }
    Ok(acc / scalar::<F>(records.len() as f64))
}

fn candidate_backward<F: NdFloat>(records: &[TokenRecord], d: &Array1<F>, grads: &mut EmbeddingWeights<F>) {
    let scaled = d / scalar::<F>(records.len() as f64);
    let q = scaled.len() / 4;
    for r in records {
        let mut row = grads.tok.row_mut(r.token_id as usize);
        row += &scaled;
        if let Some(nf) = r.num {
            let tables = [&mut grads.mag, &mut grads.pre, &mut grads.fst, &mut grads.lst];
            for (k, (t, v)) in tables.into_iter().zip(nf.as_array()).enumerate() {
                let mut row = t.row_mut(v as usize);
                row += &scaled.slice(s![k * q..(k + 1) * q]);
            }
        }
    }
}

fn norm<F: NdFloat>(v: &Array1<F>) -> F {
    v.dot(v).sqrt().max(scalar(1e-12))
}

/// Forward pass, losses and (when `grads` is given) accumulated gradients of
/// `scale.mlm * Σ MLM CE + scale.clc * Σ CLC CE`.
pub fn instance_loss<F: NdFloat>(
    model: &SegmentModel<F>,
    inst: &TrainInstance,
    cfg: &EncoderConfig,
    flags: AblationFlags,
    scale: &LossScale,
    grads: Option<&mut SegmentModel<F>>,
) -> Result<LossParts> {
    let x = model.embedding.embed_sequence(&inst.tokens, flags)?;
    let ones;
    let mask = if flags.no_visibility {
        ones = Visibility::ones(inst.tokens.len());
        &ones
    } else {
        &inst.visibility
    };
    let mut drop_rng = inst.dropout_seed.map(ChaCha8Rng::seed_from_u64);
    let (hid, cache) = model.encoder.forward(&x, mask, cfg, drop_rng.as_mut())?;
    let want_grad = grads.is_some();
    let mut dhid = Mat::<F>::zeros(hid.dim());
    let mut parts = LossParts::default();
    let w_tok = &model.embedding.tok;
    let mut d_tok: Option<Mat<F>> = None;
    let mut d_bias: Option<Mat<F>> = None;

    if !inst.mlm.is_empty() {
        let pos: Vec<usize> = inst.mlm.iter().map(|t| t.0).collect();
        let h_sel = hid.select(Axis(0), &pos);
        let mut logits = h_sel.dot(&w_tok.t()) + &model.encoder.mlm_bias;
        for (mut row, &(_, target)) in logits.rows_mut().into_iter().zip(&inst.mlm) {
            let max = row.fold(F::neg_infinity(), |m, v| m.max(*v));
            row.mapv_inplace(|v| (v - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|v| v / sum);
            let p = row[target as usize].max(scalar(1e-30));
            parts.mlm_sum -= p.ln().to_f64().unwrap();
            row[target as usize] -= F::one();
        }
        parts.mlm_count = inst.mlm.len();
        if want_grad {
            let dlogits = logits * scalar::<F>(scale.mlm);
            d_tok = Some(dlogits.t().dot(&h_sel));
            d_bias = Some(dlogits.sum_axis(Axis(0)).insert_axis(Axis(0)));
            let dh = dlogits.dot(w_tok);
            for (r, &p) in dh.rows().into_iter().zip(&pos) {
                let mut row = dhid.row_mut(p);
                row += &r;
            }
        }
    }

    let tau = scalar::<F>(scale.temperature);
    let mut cand_grads: Vec<(&[TokenRecord], Array1<F>)> = Vec::new();
    for t in &inst.clc {
        let sel = hid.select(Axis(0), &t.positions);
        let len = scalar::<F>(t.positions.len() as f64);
        let u = sel.sum_axis(Axis(0)) / len;
        let nu = norm(&u);
        let cands: Vec<Array1<F>> = t
            .candidates
            .iter()
            .map(|c| candidate_vector(&model.embedding, &c.records))
            .collect::<Result<_>>()?;
        let cos: Vec<F> = cands.iter().map(|c| u.dot(c) / (nu * norm(c))).collect();
        let logits: Vec<F> = cos.iter().map(|c| tau * *c).collect();
        let max = logits.iter().fold(F::neg_infinity(), |m, v| m.max(*v));
        let exps: Vec<F> = logits.iter().map(|l| (*l - max).exp()).collect();
        let z = exps.iter().fold(F::zero(), |a, b| a + *b);
        let probs: Vec<F> = exps.iter().map(|e| *e / z).collect();
        parts.clc_sum -= probs[t.answer].max(scalar(1e-30)).ln().to_f64().unwrap();
        parts.clc_count += 1;
        if want_grad {
            let mut du = Array1::<F>::zeros(u.len());
            for (j, c) in cands.iter().enumerate() {
                let onehot = if j == t.answer { F::one() } else { F::zero() };
                let dcos = (probs[j] - onehot) * tau * scalar::<F>(scale.clc);
                let nc = norm(c);
                du = du + &((c / (nu * nc) - &(&u * (cos[j] / (nu * nu)))) * dcos);
                let dc = (&u / (nu * nc) - &(c * (cos[j] / (nc * nc)))) * dcos;
                cand_grads.push((&t.candidates[j].records, dc));
            }
            let du = du / len;
            for &p in &t.positions {
                let mut row = dhid.row_mut(p);
                row += &du;
            }
        }
    }

    if let Some(g) = grads {
        let dx = model.encoder.backward(&cache, &dhid, cfg, &mut g.encoder);
        model.embedding.backward(&inst.tokens, flags, &dx, &mut g.embedding);
        if let Some(dt) = d_tok {
            g.embedding.tok += &dt;
        }
        if let Some(db) = d_bias {
            g.encoder.mlm_bias += &db;
        }
        for (records, dc) in cand_grads {
            candidate_backward(records, &dc, &mut g.embedding);
        }
    }
    Ok(parts)
}

// ---------------------------------------------------------------------------
// Optimizer

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam<F> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: SegmentModel<F>,
    v: SegmentModel<F>,
    t: i32,
}

impl<F: NdFloat> Adam<F> {
    pub fn new(model: &SegmentModel<F>, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: model.zeros_like(),
            v: model.zeros_like(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut SegmentModel<F>, grads: &SegmentModel<F>) {
        self.t += 1;
        let (b1, b2) = (scalar::<F>(self.beta1), scalar::<F>(self.beta2));
        let c1 = scalar::<F>(1.0 - self.beta1.powi(self.t));
        let c2 = scalar::<F>(1.0 - self.beta2.powi(self.t));
        let (lr, eps) = (scalar::<F>(self.lr), scalar::<F>(self.eps));
        let one = F::one();
        for ((((_, p), (_, g)), (_, m)), (_, v)) in params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut())
        {
            Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            });
        }
    }
}

// ---------------------------------------------------------------------------
// Training

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub mlm_rate: f64,
    pub mask_policy: MaskPolicy,
    pub clc_cells_per_seq: usize,
    pub clc_candidates: usize,
    pub clc_temperature: f64,
    pub mlm_weight: f64,
    pub clc_weight: f64,
    pub max_grad_norm: Option<f64>,
    /// Sequences in the fixed MLM probe set used to report loss progress.
    pub probe_size: usize,
    pub seed: u64,
    pub segment: SegmentKind,
    pub ablations: AblationFlags,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 50_000,
            batch_size: 12,
            lr: 2e-5,
            mlm_rate: 0.15,
            mask_policy: MaskPolicy::BERT,
            clc_cells_per_seq: 2,
            clc_candidates: 10,
            clc_temperature: 10.0,
            mlm_weight: 1.0,
            clc_weight: 1.0,
            max_grad_norm: Some(1.0),
            probe_size: 32,
            seed: 0,
            segment: SegmentKind::DataRow,
            ablations: AblationFlags::none(),
        }
    }
}

impl TrainConfig {
    /// Workstation-sized profile.
    pub fn desk() -> Self {
        TrainConfig {
            steps: 1000,
            batch_size: 8,
            lr: 1e-3,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.steps == 0 {
            return bad("steps must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.mlm_rate > 0.0 && self.mlm_rate < 1.0) {
            return bad(format!("mlm_rate {} outside (0, 1)", self.mlm_rate));
        }
        if !(self.lr > 0.0) {
            return bad(format!("learning rate {} must be positive", self.lr));
        }
        if self.mask_policy.mask < 0.0 || self.mask_policy.random < 0.0 || self.mask_policy.mask + self.mask_policy.random > 1.0 {
            return bad("mask policy probabilities must be nonnegative and sum to at most 1".into());
        }
        if self.clc_candidates == 0 || self.clc_temperature <= 0.0 {
            return bad("clc_candidates and clc_temperature must be positive".into());
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub mlm_loss: f64,
    pub clc_loss: f64,
    pub lr: f64,
    pub wall_ms: u64,
}

/// Segment sequences of each table, ablations applied.
pub fn segment_sequences(
    tables: &[Table],
    segment: SegmentKind,
    featurizer: &Featurizer,
    flags: AblationFlags,
    positions: usize,
    max_len: usize,
) -> Result<Vec<Vec<TokenSequence>>> {
    tables
        .iter()
        .map(|t| {
            let coords = assign_coordinates(t, positions)?;
            Ok(build_sequences(t, segment, &coords, featurizer, max_len)?
                .iter()
                .map(|s| apply_ablation(s, flags))
                .collect())
        })
        .collect()
}

/// Result of [`train`].
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: SegmentModel<f32>,
    pub log: Vec<LogRecord>,
    /// Mean MLM cross-entropy on the fixed probe set before training.
    pub probe_initial: f64,
    /// The same after training.
    pub probe_final: f64,
}

/// Fixed MLM instances for loss tracking.
pub fn mlm_probe(seqs: &[&TokenSequence], cfg: &TrainConfig, vocab_size: usize) -> Vec<TrainInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut idx: Vec<usize> = (0..seqs.len()).collect();
    idx.shuffle(&mut rng);
    idx.truncate(cfg.probe_size.max(1));
    idx.sort_unstable();
    idx.into_iter()
        .map(|i| {
            let m = make_mlm_instance(seqs[i], cfg.mlm_rate, cfg.mask_policy, vocab_size, &mut rng);
            TrainInstance {
                tokens: m.tokens,
                visibility: seqs[i].visibility.clone(),
                mlm: m.targets,
                clc: Vec::new(),
                dropout_seed: None,
            }
        })
        .collect()
}

/// Mean MLM cross-entropy over `probe`, dropout off.
pub fn probe_loss<F: NdFloat>(
    model: &SegmentModel<F>,
    probe: &[TrainInstance],
    enc: &EncoderConfig,
    flags: AblationFlags,
) -> Result<f64> {
    let scale = LossScale {
        mlm: 1.0,
        clc: 0.0,
        temperature: 1.0,
    };
    let parts: Vec<LossParts> = probe
        .par_iter()
        .map(|inst| instance_loss(model, inst, enc, flags, &scale, None))
        .collect::<Result<_>>()?;
    let mut total = LossParts::default();
    for p in &parts {
        total.add(p);
    }
    Ok(total.mlm_mean())
}

fn with_step(e: Error, step: usize) -> Error {
    match e {
        Error::NonFinite { what, .. } => Error::NonFinite { step, what },
        other => other,
    }
}

/// Pretrains one segment model. `on_log` sees every log record as it is made.
pub fn train(
    tables: &[Table],
    featurizer: &Featurizer,
    enc: &EncoderConfig,
    positions: usize,
    cfg: &TrainConfig,
    on_log: &mut dyn FnMut(&LogRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    enc.validate()?;
    let flags = cfg.ablations;
    let per_table = segment_sequences(tables, cfg.segment, featurizer, flags, positions, enc.max_seq)?;
    let mut seqs: Vec<(usize, &TokenSequence)> = Vec::new();
    for (ti, list) in per_table.iter().enumerate() {
        seqs.extend(list.iter().filter(|s| !s.content_indices().is_empty()).map(|s| (ti, s)));
    }
    if seqs.is_empty() {
        return Err(Error::NoSequences {
            segment: cfg.segment.name().to_string(),
        });
    }
    let pools: Vec<Vec<Candidate>> = per_table.iter().map(|l| candidate_pool(l)).collect();
    let vocab = featurizer.vocab.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = SegmentModel::<f32>::init(enc, vocab, positions, &mut rng)?;
    let mut adam = Adam::new(&model, cfg.lr);
    let plain: Vec<&TokenSequence> = seqs.iter().map(|s| s.1).collect();
    let probe = mlm_probe(&plain, cfg, vocab);
    let probe_initial = probe_loss(&model, &probe, enc, flags)?;

    let start = Instant::now();
    let mut order: Vec<usize> = Vec::new();
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            if order.is_empty() {
                order = (0..seqs.len()).collect();
                order.shuffle(&mut rng);
            }
            let (ti, seq) = seqs[order.pop().expect("refilled")];
            batch.push(build_instance(seq, &pools[ti], cfg, enc, vocab, &mut rng));
        }
        let mlm_total: usize = batch.iter().map(|b| b.mlm.len()).sum();
        let clc_total: usize = batch.iter().map(|b| b.clc.len()).sum();
        let scale = LossScale {
            mlm: if mlm_total > 0 { cfg.mlm_weight / mlm_total as f64 } else { 0.0 },
            clc: if clc_total > 0 { cfg.clc_weight / clc_total as f64 } else { 0.0 },
            temperature: cfg.clc_temperature,
        };
        let results: Vec<(LossParts, SegmentModel<f32>)> = batch
            .par_iter()
            .map(|inst| {
                let mut g = model.zeros_like();
                let parts = instance_loss(&model, inst, enc, flags, &scale, Some(&mut g))?;
                Ok((parts, g))
            })
            .collect::<Result<_>>()
            .map_err(|e| with_step(e, step))?;
        let mut totals = LossParts::default();
        let mut iter = results.into_iter();
        let (first_parts, mut grads) = iter.next().expect("nonempty batch");
        totals.add(&first_parts);
        for (p, g) in iter {
            totals.add(&p);
            grads.add_assign(&g);
        }
        if !totals.mlm_sum.is_finite() || !totals.clc_sum.is_finite() {
            return Err(Error::NonFinite {
                step,
                what: "loss".into(),
            });
        }
        if let Some(max) = cfg.max_grad_norm {
            let n = grads.sq_norm().sqrt() as f64;
            if n > max {
                grads.scale((max / n) as f32);
            }
        }
        adam.step(&mut model, &grads);
        if let Some(name) = model.first_non_finite() {
            return Err(Error::NonFinite { step, what: name });
        }
        let rec = LogRecord {
            step,
            mlm_loss: totals.mlm_mean(),
            clc_loss: totals.clc_mean(),
            lr: cfg.lr,
            wall_ms: start.elapsed().as_millis() as u64,
        };
        on_log(&rec);
        log.push(rec);
    }
    let probe_final = probe_loss(&model, &probe, enc, flags)?;
    Ok(TrainOutcome {
        model,
        log,
        probe_initial,
        probe_final,
    })
}

fn build_instance<R: Rng + ?Sized>(
    seq: &TokenSequence,
    pool: &[Candidate],
    cfg: &TrainConfig,
    enc: &EncoderConfig,
    vocab: usize,
    rng: &mut R,
) -> TrainInstance {
    let (mut tokens, clc) = if cfg.clc_cells_per_seq > 0 && cfg.clc_weight > 0.0 {
        match make_clc_instance(seq, pool, cfg.clc_cells_per_seq, cfg.clc_candidates, rng) {
            Ok(inst) => (inst.tokens, inst.targets),
            Err(_) => (seq.tokens.clone(), Vec::new()),
        }
    } else {
        (seq.tokens.clone(), Vec::new())
    };
    let cloze: std::collections::BTreeSet<usize> = clc.iter().flat_map(|t| t.positions.iter().copied()).collect();
    let maskable: Vec<usize> = seq
        .content_indices()
        .into_iter()
        .filter(|i| !cloze.contains(i))
        .collect();
    let mlm = mlm_mask(&mut tokens, &maskable, cfg.mlm_rate, cfg.mask_policy, vocab, rng);
    let dropout_seed = (enc.dropout > 0.0).then(|| rng.random::<u64>());
    TrainInstance {
        tokens,
        visibility: seq.visibility.clone(),
        mlm,
        clc,
        dropout_seed,
    }
}

// ---------------------------------------------------------------------------
// Bundles

/// Shapes and ablations shared by every model in a bundle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleConfig {
    pub encoder: EncoderConfig,
    pub positions: usize,
    pub ablations: AblationFlags,
    pub train: Option<TrainConfig>,
}

impl Default for BundleConfig {
    fn default() -> Self {
        BundleConfig {
            encoder: EncoderConfig::default(),
            positions: DEFAULT_POSITIONS,
            ablations: AblationFlags::none(),
            train: None,
        }
    }
}

/// Segment models sharing one featurizer.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub config: BundleConfig,
    pub featurizer: Featurizer,
    pub models: BTreeMap<SegmentKind, SegmentModel<f32>>,
}

impl ModelBundle {
    pub fn new(config: BundleConfig, featurizer: Featurizer) -> Self {
        ModelBundle {
            config,
            featurizer,
            models: BTreeMap::new(),
        }
    }

    /// Fresh untrained models for every segment.
    pub fn initialized(config: BundleConfig, featurizer: Featurizer, seed: u64) -> Result<Self> {
        let mut b = Self::new(config, featurizer);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for seg in SegmentKind::ALL {
            let m = SegmentModel::init(&b.config.encoder, b.featurizer.vocab.len(), b.config.positions, &mut rng)?;
            b.models.insert(seg, m);
        }
        Ok(b)
    }

    pub fn model(&self, segment: SegmentKind) -> Result<&SegmentModel<f32>> {
        self.models
            .get(&segment)
            .ok_or_else(|| Error::MissingModel(segment.name().to_string()))
    }

    pub fn hidden(&self) -> usize {
        self.config.encoder.hidden
    }

    /// Trains each requested segment with `cfg`, seeding segment `i` with
    /// `cfg.seed + i`.
    pub fn train_segments(
        config: BundleConfig,
        featurizer: Featurizer,
        tables: &[Table],
        cfg: &TrainConfig,
        segments: &[SegmentKind],
        on_log: &mut dyn FnMut(SegmentKind, &LogRecord),
    ) -> Result<(Self, BTreeMap<SegmentKind, TrainOutcome>)> {
        let mut bundle = Self::new(
            BundleConfig {
                ablations: cfg.ablations,
                train: Some(*cfg),
                ..config
            },
            featurizer,
        );
        let mut outcomes = BTreeMap::new();
        for (i, &seg) in segments.iter().enumerate() {
            let seg_cfg = TrainConfig {
                segment: seg,
                seed: cfg.seed.wrapping_add(i as u64),
                ..*cfg
            };
            let mut cb = |r: &LogRecord| on_log(seg, r);
            let out = train(
                tables,
                &bundle.featurizer,
                &bundle.config.encoder,
                bundle.config.positions,
                &seg_cfg,
                &mut cb,
            )?;
            bundle.models.insert(seg, out.model.clone());
            outcomes.insert(seg, out);
        }
        Ok((bundle, outcomes))
    }
}

/// True when no cell of the stream is a metadata or caption cell.
pub fn is_data_only(seqs: &[TokenSequence]) -> bool {
    seqs.iter().all(|s| {
        s.cells
            .iter()
            .all(|c| !matches!(c.origin, CellOrigin::Header | CellOrigin::Caption))
            && s.slots
                .iter()
                .all(|slot| !matches!(slot, Slot::Content { cell } if matches!(s.cells[*cell].origin, CellOrigin::Header)))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::featurize::{VocabConfig, Vocabulary, CLS, SEP};
    use crate::sequence::{single_cell_sequence, CellOrigin};
    use crate::table::{parse_table, Cell, HeaderTree};

    fn grid_table(rows: usize, cols: usize) -> Table {
        let labels: Vec<String> = (0..cols).map(|j| format!("col{}", (b'a' + j as u8) as char)).collect();
        let data = (0..rows)
            .map(|i| (0..cols).map(|j| Cell::text(format!("w{} v{}", i, j))).collect())
            .collect();
        Table::new("grid", HeaderTree::flat(labels), HeaderTree::default(), data).unwrap()
    }

    fn setup(t: &Table) -> (Featurizer, TokenSequence) {
        let f = Featurizer::new(Vocabulary::build([t], &VocabConfig::default()));
        let coords = assign_coordinates(t, DEFAULT_POSITIONS).unwrap();
        let s = build_sequences(t, SegmentKind::DataRow, &coords, &f, 256).unwrap().remove(0);
        (f, s)
    }

    #[test]
    fn full_rate_masks_everything() {
        let t = grid_table(3, 3);
        let (f, s) = setup(&t);
        let m = make_mlm_instance(&s, 1.0, MaskPolicy::ALWAYS_MASK, f.vocab.len(), &mut ChaCha8Rng::seed_from_u64(1));
        for i in s.content_indices() {
            assert_eq!(m.tokens[i].token_id, MASK);
            assert_eq!(m.tokens[i].coord, s.tokens[i].coord);
            assert_eq!(m.tokens[i].feat, s.tokens[i].feat);
        }
        assert_eq!(m.targets.len(), s.content_indices().len());
        assert!(m.tokens.iter().zip(&s.tokens).all(|(a, b)| a.token_id == MASK || a == b));
    }

    #[test]
    fn single_word_is_forced() {
        let f = Featurizer::new(Vocabulary::from_tokens(vec!["solo".into()], false));
        let recs = f.tokenize_label("solo", Default::default());
        let s = single_cell_sequence(recs, "solo", CellOrigin::Data, SegmentKind::DataRow, "", 0);
        for seed in 0..20 {
            let m = make_mlm_instance(&s, 0.01, MaskPolicy::ALWAYS_MASK, f.vocab.len(), &mut ChaCha8Rng::seed_from_u64(seed));
            assert_eq!(m.targets, vec![(1, f.vocab.id("solo").unwrap())]);
            assert_eq!(m.tokens[0].token_id, CLS);
            assert_eq!(m.tokens[2].token_id, SEP);
        }
    }

    #[test]
    fn clc_minimal_and_errors() {
        let t = grid_table(1, 2);
        let (f, s) = setup(&t);
        let _ = f;
        let pool = candidate_pool([&s]);
        let inst = make_clc_instance(&s, &pool, 1, 10, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let target = &inst.targets[0];
        assert_eq!(target.candidates.len(), 2);
        assert_eq!(target.candidates[target.answer].text, s.cells[target.cell].text);
        assert!(target.positions.iter().all(|&p| inst.tokens[p].token_id == MASK));
        assert!(matches!(
            make_clc_instance(&s, &pool, 2, 10, &mut ChaCha8Rng::seed_from_u64(2)),
            Err(Error::TooFewCells { cells: 2, needed: 3 })
        ));
    }

    #[test]
    fn train_config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { steps: 0, ..TrainConfig::desk() },
            TrainConfig { mlm_rate: 1.0, ..TrainConfig::desk() },
            TrainConfig { lr: 0.0, ..TrainConfig::desk() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn one_step_changes_weights() {
        let t = grid_table(3, 3);
        let (f, _) = setup(&t);
        let enc = EncoderConfig {
            hidden: 12,
            heads: 2,
            ffn_mult: 2,
            ..Default::default()
        };
        let cfg = TrainConfig {
            steps: 1,
            batch_size: 2,
            ..TrainConfig::desk()
        };
        let out = train(&[t], &f, &enc, 16, &cfg, &mut |_| {}).unwrap();
        let init = SegmentModel::<f32>::init(&enc, f.vocab.len(), 16, &mut ChaCha8Rng::seed_from_u64(cfg.seed)).unwrap();
        assert_ne!(out.model, init);
        assert_eq!(out.log.len(), 1);
        assert!(out.probe_initial.is_finite());
    }

    #[test]
    fn empty_vmd_has_no_sequences() {
        let t = parse_table(
            r#"{"version":"tabjson/1","caption":"c","hmd":[{"label":"a","children":[]}],"vmd":[],
                "data":[[{"kind":"string","text":"x"}]]}"#,
        )
        .unwrap();
        let f = Featurizer::new(Vocabulary::build([&t], &VocabConfig::default()));
        let enc = EncoderConfig {
            hidden: 12,
            heads: 2,
            ffn_mult: 1,
            ..Default::default()
        };
        let cfg = TrainConfig {
            steps: 1,
            batch_size: 1,
            segment: SegmentKind::Vmd,
            ..TrainConfig::desk()
        };
        let err = train(std::slice::from_ref(&t), &f, &enc, 16, &cfg, &mut |_| {}).unwrap_err();
        assert!(matches!(err, Error::NoSequences { ref segment } if segment == "vmd"));
        let hmd = TrainConfig { segment: SegmentKind::Hmd, ..cfg };
        assert!(train(&[t], &f, &enc, 16, &hmd, &mut |_| {}).is_ok());
    }
}
