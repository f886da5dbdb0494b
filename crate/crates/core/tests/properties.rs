use std::collections::BTreeMap;

use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tabbin_core::composite::pool;
use tabbin_core::eval::{ap_at_k, cosine, map_mrr, topk_cluster};
use tabbin_core::featurize::number_features;
use tabbin_core::sequence::{apply_ablation, build_sequences, cartesian, CellOrigin, Slot, TokenSequence, MAX_SEQ_LEN};
use tabbin_core::table::{assign_coordinates, is_relational, parse_table, serialize_table, CellPos, DEFAULT_POSITIONS};
use tabbin_core::*;

fn corpus(n: usize, nonrel: f64, nested: f64, rows: usize, cols: usize, seed: u64) -> Vec<Table> {
    generate_corpus(&CorpusSpec {
        n_tables: n,
        n_topics: 2,
        fraction_nonrelational: nonrel,
        fraction_nested: nested.min(nonrel),
        rows: (1, rows),
        cols: (1, cols),
        seed,
        ..CorpusSpec::default()
    })
    .unwrap()
    .0
}

fn featurizer(tables: &[Table]) -> Featurizer {
    Featurizer::new(Vocabulary::build(tables.iter(), &VocabConfig::default()))
}

fn sequences(t: &Table, f: &Featurizer) -> Vec<TokenSequence> {
    let coords = assign_coordinates(t, DEFAULT_POSITIONS).unwrap();
    SegmentKind::ALL
        .iter()
        .flat_map(|&seg| build_sequences(t, seg, &coords, f, MAX_SEQ_LEN).unwrap())
        .collect()
}

/// Visibility re-derived from raw grid and header positions.
fn oracle_visible(seq: &TokenSequence, i: usize, j: usize) -> Option<bool> {
    let cell = |slot: Slot| match slot {
        Slot::Content { cell } | Slot::Sep { cell } => Some(cell),
        Slot::Cls { .. } => None,
    };
    let unit = |slot: Slot| match slot {
        Slot::Cls { unit } => unit,
        Slot::Content { cell } | Slot::Sep { cell } => seq.cells[cell].unit,
    };
    let (si, sj) = (seq.slots[i], seq.slots[j]);
    match (cell(si), cell(sj)) {
        (None, None) => Some(true),
        (None, Some(_)) | (Some(_), None) => Some(unit(si) == unit(sj)),
        (Some(a), Some(b)) if a == b => Some(true),
        (Some(a), Some(b)) => match (&seq.cells[a].pos, &seq.cells[b].pos) {
            (Some(CellPos::Data { row: r1, col: c1 }), Some(CellPos::Data { row: r2, col: c2 })) => {
                Some(r1 == r2 || c1 == c2)
            }
            (Some(CellPos::Header { axis: x1, path: p1 }), Some(CellPos::Header { axis: x2, path: p2 })) if x1 == x2 => {
                let ancestor = p1.starts_with(p2) || p2.starts_with(p1);
                let siblings = p1.len() == p2.len() && p1[..p1.len() - 1] == p2[..p2.len() - 1];
                Some(ancestor || siblings)
            }
            _ => None,
        },
    }
}

fn random_pool(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> BTreeMap<String, Vec<f32>> {
    (0..n)
        .map(|i| (format!("v{i:02}"), (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect()))
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn serialization_round_trips(seed in 0u64..10_000, nonrel in 0.0f64..1.0, nested in 0.0f64..1.0) {
        for t in corpus(4, nonrel, nested, 6, 6, seed) {
            let text = serialize_table(&t);
            let back = parse_table(&text).unwrap();
            prop_assert_eq!(&back, &t);
            prop_assert_eq!(serialize_table(&back), text);
        }
    }

    #[test]
    fn relational_tables_have_cartesian_coordinates(seed in 0u64..10_000) {
        for t in corpus(4, 0.0, 0.0, 8, 8, seed) {
            prop_assert!(is_relational(&t));
            let coords = assign_coordinates(&t, DEFAULT_POSITIONS).unwrap();
            for (pos, c) in &coords {
                prop_assert_eq!(cartesian(*c), *c);
                if let CellPos::Data { row, col } = pos {
                    prop_assert_eq!(c.v, CoordPair::new(0, row + 1));
                    prop_assert_eq!(c.h, CoordPair::new(1, col + 1));
                }
            }
            prop_assert_eq!(coords.len(), t.n_rows() * t.n_cols() + t.hmd.node_count());
        }
    }

    #[test]
    fn nested_pairs_only_inside_nested_cells(seed in 0u64..10_000) {
        for t in corpus(4, 1.0, 1.0, 5, 5, seed) {
            for (pos, c) in assign_coordinates(&t, DEFAULT_POSITIONS).unwrap() {
                let inside = matches!(pos, CellPos::NestedHeader { .. } | CellPos::NestedData { .. });
                prop_assert_eq!(!c.n.is_zero(), inside, "{:?}", pos);
            }
        }
    }

    #[test]
    fn visibility_matches_brute_force(seed in 0u64..10_000, nonrel in 0.0f64..1.0) {
        let tables = corpus(3, nonrel, 0.0, 4, 4, seed);
        let f = featurizer(&tables);
        for t in &tables {
            for seq in sequences(t, &f) {
                let m = &seq.visibility;
                prop_assert!(m.is_symmetric() && m.has_unit_diagonal());
                for i in 0..seq.len() {
                    for j in 0..seq.len() {
                        if let Some(want) = oracle_visible(&seq, i, j) {
                            prop_assert_eq!(m.get(i, j), want, "{:?} {:?}", seq.slots[i], seq.slots[j]);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn segments_stay_separate(seed in 0u64..10_000) {
        let tables = corpus(3, 0.7, 0.3, 6, 6, seed);
        let f = featurizer(&tables);
        for t in &tables {
            for seq in sequences(t, &f) {
                let meta = seq.cells.iter().any(|c| c.origin == CellOrigin::Header);
                prop_assert_eq!(meta, !seq.segment.is_data());
            }
        }
    }

    #[test]
    fn ablation_is_idempotent(seed in 0u64..10_000, bits in 0u8..16) {
        let flags = AblationFlags {
            no_visibility: bits & 1 != 0,
            no_type: bits & 2 != 0,
            no_units_nesting: bits & 4 != 0,
            no_bicoords: bits & 8 != 0,
        };
        let tables = corpus(2, 0.8, 0.5, 5, 5, seed);
        let f = featurizer(&tables);
        for t in &tables {
            for seq in sequences(t, &f) {
                let once = apply_ablation(&seq, flags);
                prop_assert_eq!(&apply_ablation(&once, flags), &once);
            }
        }
    }

    #[test]
    fn pooling_ignores_order(seed in 0u64..10_000, n in 1usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hidden = Array2::from_shape_fn((16, 6), |_| rng.random_range(-2.0f64..2.0));
        let unit: Vec<usize> = (0..n).map(|_| rng.random_range(0..16)).collect();
        let mut shuffled = unit.clone();
        for i in (1..shuffled.len()).rev() {
            shuffled.swap(i, rng.random_range(0..=i));
        }
        let a = pool(&hidden, &unit).unwrap();
        let b = pool(&hidden, &shuffled).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn metrics_stay_in_unit_interval(seed in 0u64..10_000, labels in 1usize..5, k in 1usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pool = random_pool(&mut rng, 15, 4);
        let truth = GroundTruth::new(
            pool.keys().map(|id| (id.clone(), format!("L{}", rng.random_range(0..labels)))).collect(),
        );
        let mut lists = Vec::new();
        for q in pool.keys() {
            let list = topk_cluster(q, &pool, k).unwrap();
            if let Ok(ap) = ap_at_k(&list, &truth, k) {
                prop_assert!((0.0..=1.0).contains(&ap));
            }
            lists.push(list);
        }
        let s = map_mrr(&lists, &truth, k).unwrap();
        prop_assert!((0.0..=1.0).contains(&s.map) && (0.0..=1.0).contains(&s.mrr));
    }

    #[test]
    fn rankings_ignore_positive_scaling(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pool = random_pool(&mut rng, 20, 5);
        // powers of two keep every float product exact
        let scaled: BTreeMap<String, Vec<f32>> = pool
            .iter()
            .map(|(id, v)| {
                let s = 2f32.powi(rng.random_range(-6..7));
                (id.clone(), v.iter().map(|x| x * s).collect())
            })
            .collect();
        for q in pool.keys() {
            let a: Vec<String> = topk_cluster(q, &pool, 10).unwrap().entries.into_iter().map(|e| e.0).collect();
            let b: Vec<String> = topk_cluster(q, &scaled, 10).unwrap().entries.into_iter().map(|e| e.0).collect();
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn self_similarity_is_one(v in prop::collection::vec(-100.0f32..100.0, 1..40)) {
        prop_assume!(v.iter().any(|x| *x != 0.0));
        prop_assert!((cosine(&v, &v).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn number_features_match_digit_strings(int in 0u64..1_000_000_000_000, frac in 0u32..1_000_000, places in 0usize..7) {
        let text = if places == 0 {
            int.to_string()
        } else {
            let f = format!("{:06}", frac);
            format!("{int}.{}", &f[..places])
        };
        let nf = number_features(&Decimal::parse(&text).unwrap());
        let (whole, fraction) = text.split_once('.').unwrap_or((&text, ""));
        let digits: String = format!("{whole}{fraction}");
        let first = digits.trim_start_matches('0').chars().next().map_or(0, |c| c.to_digit(10).unwrap());
        let last = digits.chars().last().unwrap().to_digit(10).unwrap();
        let magnitude = whole.len().min(10);
        let want = NumberFeatures::new(magnitude as u8, fraction.len().min(10) as u8, first as u8, last as u8);
        prop_assert_eq!(nf, want, "{}", text);
    }
}
