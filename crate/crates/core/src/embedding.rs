//! The six-component token embedding: token, number, in-cell position,
//! bi-dimensional position, unit/nesting format and type, summed into one
//! H-dimensional vector.

use ndarray::{s, Array1, ArrayViewMut1, NdFloat};
use rand::Rng;

use crate::error::{Error, Result};
use crate::featurize::{TokenRecord, FEATURE_BITS, MAX_CELL_TOKENS, NUMBER_FEATURE_MAX, TYPE_COUNT};
use crate::nn::{normal_init, Mat, Params};
use crate::sequence::AblationFlags;

/// Rows in each number-feature table (values 0..=10).
pub const NUMBER_ROWS: usize = NUMBER_FEATURE_MAX as usize + 1;

pub const INIT_STD: f64 = 0.02;

/// Lookup tables and the format projection.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingWeights<F> {
    pub tok: Mat<F>,
    pub mag: Mat<F>,
    pub pre: Mat<F>,
    pub fst: Mat<F>,
    pub lst: Mat<F>,
    pub cpos: Mat<F>,
    /// v.row, v.col, h.row, h.col, n.row, n.col.
    pub tpos: [Mat<F>; 6],
    pub fmt: Mat<F>,
    pub fmt_bias: Mat<F>,
    pub typ: Mat<F>,
}

/// The six component vectors of one token.
#[derive(Clone, Debug, PartialEq)]
pub struct Components<F> {
    pub tok: Array1<F>,
    pub num: Array1<F>,
    pub cpos: Array1<F>,
    pub tpos: Array1<F>,
    pub fmt: Array1<F>,
    pub typ: Array1<F>,
}

impl<F: NdFloat> Components<F> {
    pub fn sum(&self) -> Array1<F> {
        &self.tok + &self.num + &self.cpos + &self.tpos + &self.typ + &self.fmt
    }
}

fn check_hidden(hidden: usize) -> Result<()> {
    if hidden == 0 || hidden % 12 != 0 {
        return Err(Error::Config(format!("hidden size {hidden} must be a positive multiple of 12")));
    }
    Ok(())
}

fn row<'a, F: NdFloat>(table: &'a Mat<F>, name: &'static str, index: usize) -> Result<ndarray::ArrayView1<'a, F>> {
    if index >= table.nrows() {
        return Err(Error::Index {
            table: name,
            index,
            rows: table.nrows(),
        });
    }
    Ok(table.row(index))
}

const TPOS_NAMES: [&str; 6] = ["pos_vr", "pos_vc", "pos_hr", "pos_hc", "pos_nr", "pos_nc"];

impl<F: NdFloat> EmbeddingWeights<F> {
    pub fn zeros(vocab: usize, hidden: usize, positions: usize) -> Result<Self> {
        check_hidden(hidden)?;
        let z = |r, c| Mat::zeros((r, c));
        Ok(EmbeddingWeights {
            tok: z(vocab, hidden),
            mag: z(NUMBER_ROWS, hidden / 4),
            pre: z(NUMBER_ROWS, hidden / 4),
            fst: z(NUMBER_ROWS, hidden / 4),
            lst: z(NUMBER_ROWS, hidden / 4),
            cpos: z(MAX_CELL_TOKENS, hidden),
            tpos: std::array::from_fn(|_| z(positions, hidden / 6)),
            fmt: z(FEATURE_BITS, hidden),
            fmt_bias: z(1, hidden),
            typ: z(TYPE_COUNT, hidden),
        })
    }

    /// Normal(0, 0.02) weights, zero bias.
    pub fn init<R: Rng + ?Sized>(vocab: usize, hidden: usize, positions: usize, rng: &mut R) -> Result<Self> {
        let mut w = Self::zeros(vocab, hidden, positions)?;
        for (name, t) in w.tensors_mut() {
            if name != "fmt_bias" {
                *t = normal_init(t.nrows(), t.ncols(), INIT_STD, rng);
            }
        }
        Ok(w)
    }

    pub fn hidden(&self) -> usize {
        self.tok.ncols()
    }

    pub fn vocab_size(&self) -> usize {
        self.tok.nrows()
    }

    pub fn positions(&self) -> usize {
        self.tpos[0].nrows()
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.vocab_size(), self.hidden(), self.positions()).expect("valid shape")
    }

    /// The six components of `rec`, without ablation.
    pub fn components(&self, rec: &TokenRecord) -> Result<Components<F>> {
        let h = self.hidden();
        let q = h / 4;
        let tok = row(&self.tok, "tok", rec.token_id as usize)?.to_owned();
        let mut num = Array1::zeros(h);
        if let Some(nf) = rec.num {
            let parts = [(&self.mag, "mag", nf.mag), (&self.pre, "pre", nf.pre), (&self.fst, "fst", nf.fst), (&self.lst, "lst", nf.lst)];
            for (k, (t, name, v)) in parts.into_iter().enumerate() {
                num.slice_mut(s![k * q..(k + 1) * q]).assign(&row(t, name, v as usize)?);
            }
        }
        let cpos = row(&self.cpos, "cpos", rec.in_pos as usize)?.to_owned();
        let sixth = h / 6;
        let mut tpos = Array1::zeros(h);
        for (k, v) in rec.coord.components().into_iter().enumerate() {
            tpos.slice_mut(s![k * sixth..(k + 1) * sixth])
                .assign(&row(&self.tpos[k], TPOS_NAMES[k], v as usize)?);
        }
        let mut fmt = self.fmt_bias.row(0).to_owned();
        for k in 0..FEATURE_BITS {
            if rec.feat.bit(k) {
                fmt += &self.fmt.row(k);
            }
        }
        let typ = row(&self.typ, "type", rec.type_id as usize)?.to_owned();
        Ok(Components { tok, num, cpos, tpos, fmt, typ })
    }

    /// Sum of the components with ablated ones removed: the type and
    /// unit/nesting components become zero, coordinates become Cartesian.
    pub fn embed_token(&self, rec: &TokenRecord, flags: AblationFlags) -> Result<Array1<F>> {
        let mut rec = *rec;
        flags.apply_record(&mut rec);
        let mut c = self.components(&rec)?;
        if flags.no_type {
            c.typ.fill(F::zero());
        }
        if flags.no_units_nesting {
            c.fmt.fill(F::zero());
        }
        Ok(c.sum())
    }

    /// Embeds a whole sequence, one row per token.
    pub fn embed_sequence(&self, records: &[TokenRecord], flags: AblationFlags) -> Result<Mat<F>> {
        let mut out = Mat::zeros((records.len(), self.hidden()));
        for (i, rec) in records.iter().enumerate() {
            out.row_mut(i).assign(&self.embed_token(rec, flags)?);
        }
        Ok(out)
    }

    /// Scatters the gradient of `embed_sequence` into `grads`.
    pub fn backward(&self, records: &[TokenRecord], flags: AblationFlags, d: &Mat<F>, grads: &mut Self) {
        let h = self.hidden();
        let (q, sixth) = (h / 4, h / 6);
        let add = |mut dst: ArrayViewMut1<F>, src: ndarray::ArrayView1<F>| dst += &src;
        for (i, rec) in records.iter().enumerate() {
            let mut rec = *rec;
            flags.apply_record(&mut rec);
            let di = d.row(i);
            add(grads.tok.row_mut(rec.token_id as usize), di);
            if let Some(nf) = rec.num {
                let parts = [nf.mag, nf.pre, nf.fst, nf.lst];
                let tables = [&mut grads.mag, &mut grads.pre, &mut grads.fst, &mut grads.lst];
                for (k, (t, v)) in tables.into_iter().zip(parts).enumerate() {
                    add(t.row_mut(v as usize), di.slice(s![k * q..(k + 1) * q]));
                }
            }
            add(grads.cpos.row_mut(rec.in_pos as usize), di);
            for (k, v) in rec.coord.components().into_iter().enumerate() {
                add(grads.tpos[k].row_mut(v as usize), di.slice(s![k * sixth..(k + 1) * sixth]));
            }
            if !flags.no_units_nesting {
                add(grads.fmt_bias.row_mut(0), di);
                for k in 0..FEATURE_BITS {
                    if rec.feat.bit(k) {
                        add(grads.fmt.row_mut(k), di);
                    }
                }
            }
            if !flags.no_type {
                add(grads.typ.row_mut(rec.type_id as usize), di);
            }
        }
    }
}

impl<F: NdFloat> Params<F> for EmbeddingWeights<F> {
    fn tensors(&self) -> Vec<(String, &Mat<F>)> {
        let mut v = vec![
            ("tok".to_string(), &self.tok),
            ("mag".into(), &self.mag),
            ("pre".into(), &self.pre),
            ("fst".into(), &self.fst),
            ("lst".into(), &self.lst),
            ("cpos".into(), &self.cpos),
        ];
        for (k, t) in self.tpos.iter().enumerate() {
            v.push((TPOS_NAMES[k].into(), t));
        }
        v.extend([
            ("fmt".to_string(), &self.fmt),
            ("fmt_bias".into(), &self.fmt_bias),
            ("type".into(), &self.typ),
        ]);
        v
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut Mat<F>)> {
        let mut v = vec![
            ("tok".to_string(), &mut self.tok),
            ("mag".into(), &mut self.mag),
            ("pre".into(), &mut self.pre),
            ("fst".into(), &mut self.fst),
            ("lst".into(), &mut self.lst),
            ("cpos".into(), &mut self.cpos),
        ];
        for (k, t) in self.tpos.iter_mut().enumerate() {
            v.push((TPOS_NAMES[k].into(), t));
        }
        v.extend([
            ("fmt".to_string(), &mut self.fmt),
            ("fmt_bias".into(), &mut self.fmt_bias),
            ("type".into(), &mut self.typ),
        ]);
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::featurize::{FeatureBits, NumberFeatures};
    use crate::table::{BiCoordinate, CoordPair, UnitClass};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn weights(seed: u64) -> EmbeddingWeights<f64> {
        let mut w = EmbeddingWeights::init(20, 12, 16, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        w.fmt_bias = normal_init(1, 12, 0.5, &mut ChaCha8Rng::seed_from_u64(seed + 100));
        w
    }

    fn number_record() -> TokenRecord {
        TokenRecord {
            token_id: 3,
            num: Some(NumberFeatures::new(2, 1, 2, 3)),
            in_pos: 2,
            coord: BiCoordinate {
                v: CoordPair::new(2, 3),
                h: CoordPair::new(1, 4),
                n: CoordPair::new(1, 1),
            },
            feat: FeatureBits::default().with_unit(UnitClass::Time).with_nested(),
            type_id: 5,
        }
    }

    #[test]
    fn hidden_must_divide_by_twelve() {
        assert!(EmbeddingWeights::<f32>::zeros(10, 18, 4).is_err());
        assert!(EmbeddingWeights::<f32>::zeros(10, 24, 4).is_ok());
    }

    #[test]
    fn zero_weights_give_zero_components() {
        let w = EmbeddingWeights::<f64>::zeros(20, 12, 16).unwrap();
        let c = w.components(&number_record()).unwrap();
        for v in [&c.tok, &c.num, &c.cpos, &c.tpos, &c.fmt, &c.typ] {
            assert!(v.iter().all(|x| *x == 0.0));
            assert_eq!(v.len(), 12);
        }
    }

    #[test]
    fn zero_features_give_bias() {
        let w = weights(1);
        let mut rec = number_record();
        rec.feat = FeatureBits::default();
        assert_eq!(w.components(&rec).unwrap().fmt, w.fmt_bias.row(0));
    }

    #[test]
    fn type_row_matches_one_hot_product() {
        let w = weights(2);
        let c = w.components(&number_record()).unwrap();
        let mut onehot = Array1::zeros(TYPE_COUNT);
        onehot[5] = 1.0;
        assert_eq!(c.typ, onehot.dot(&w.typ));
    }

    #[test]
    fn sum_and_ablation() {
        let w = weights(3);
        let rec = number_record();
        let c = w.components(&rec).unwrap();
        let mut expect = Array1::<f64>::zeros(12);
        for v in [&c.tok, &c.num, &c.cpos, &c.tpos, &c.typ, &c.fmt] {
            expect = expect + v;
        }
        assert_eq!(w.embed_token(&rec, AblationFlags::none()).unwrap(), expect);
        let flags = AblationFlags {
            no_type: true,
            no_units_nesting: true,
            ..Default::default()
        };
        let partial = &c.tok + &c.num + &c.cpos + &c.tpos;
        assert_eq!(w.embed_token(&rec, flags).unwrap(), partial);
    }

    #[test]
    fn non_number_ignores_number_tables() {
        let mut w = weights(4);
        let mut rec = number_record();
        rec.num = None;
        let before = w.embed_token(&rec, AblationFlags::none()).unwrap();
        w.mag.fill(7.0);
        w.lst.fill(-3.0);
        assert_eq!(w.embed_token(&rec, AblationFlags::none()).unwrap(), before);
    }

    #[test]
    fn out_of_range_index() {
        let w = weights(5);
        let mut rec = number_record();
        rec.type_id = TYPE_COUNT as u8;
        assert!(matches!(w.components(&rec), Err(Error::Index { table: "type", .. })));
        let mut rec = number_record();
        rec.coord.h = CoordPair::new(1, 16);
        assert!(matches!(w.components(&rec), Err(Error::Index { table: "pos_hc", .. })));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let w = weights(6);
        let recs = [number_record(), TokenRecord::special(1, BiCoordinate::default(), 0)];
        let up = normal_init::<f64, _>(2, 12, 1.0, &mut ChaCha8Rng::seed_from_u64(9));
        for flags in [AblationFlags::none(), AblationFlags::drop("units").unwrap(), AblationFlags::drop("type").unwrap()] {
            let loss = |w: &EmbeddingWeights<f64>| (w.embed_sequence(&recs, flags).unwrap() * &up).sum();
            let mut g = w.zeros_like();
            w.backward(&recs, flags, &up, &mut g);
            let mut wp = w.clone();
            let n = wp.tensors().len();
            for t in 0..n {
                let shape = wp.tensors()[t].1.dim();
                for idx in ndarray::indices(shape) {
                    let orig = wp.tensors()[t].1[idx];
                    wp.tensors_mut()[t].1[idx] = orig + 1e-5;
                    let lp = loss(&wp);
                    wp.tensors_mut()[t].1[idx] = orig - 1e-5;
                    let lm = loss(&wp);
                    wp.tensors_mut()[t].1[idx] = orig;
                    let num = (lp - lm) / 2e-5;
                    let ana = g.tensors()[t].1[idx];
                    assert!((num - ana).abs() < 1e-8, "{} {:?}: {num} vs {ana}", g.tensors()[t].0, idx);
                }
            }
        }
    }
}
