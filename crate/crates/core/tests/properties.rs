use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use symattn::attention::{asymmetry, attention_forward_with_weights, compat_scores, AttentionParams, OperatorKind};
use symattn::data::{is_special, mask_batch, MaskMode};
use symattn::graph::{self, Graph, IGNORE_INDEX};
use symattn::model::{build_model, count_params, ModelConfig};
use symattn::train::{lr_at, records_from_csv, records_to_csv, TraceRecord, TrainConfig};
use symattn::Tensor;

fn kind_strategy() -> impl Strategy<Value = OperatorKind> {
    prop_oneof![
        Just(OperatorKind::Original),
        Just(OperatorKind::Symmetric),
        Just(OperatorKind::Pairwise)
    ]
}

fn tensor(shape: Vec<usize>) -> impl Strategy<Value = Tensor> {
    let n: usize = shape.iter().product();
    prop::collection::vec(-2.0f64..2.0, n).prop_map(move |d| Tensor::new(&shape, d).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn symmetric_scores_are_symmetric(seed in any::<u64>(), heads in 1usize..4, d in 1usize..5, len in 1usize..6) {
        let h = heads * d;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = AttentionParams::init(&mut rng, h, heads, OperatorKind::Symmetric, 0.5).unwrap();
        let x = symattn::init::truncated_normal(&mut rng, &[2, len, h], 1.0);
        let s = compat_scores(&x, &p, OperatorKind::Symmetric).unwrap();
        prop_assert_eq!(asymmetry(&s), 0.0);
    }

    #[test]
    fn attention_weights_are_distributions_over_unmasked_keys(
        seed in any::<u64>(), kind in kind_strategy(), len in 1usize..6, mask_bits in any::<u8>()
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = AttentionParams::init(&mut rng, 8, 2, kind, 0.5).unwrap();
        let x = symattn::init::truncated_normal(&mut rng, &[1, len, 8], 1.0);
        let mut mask: Vec<u8> = (0..len).map(|i| (mask_bits >> i) & 1).collect();
        mask[0] = 1;
        let (_, w) = attention_forward_with_weights(&x, &p, kind, &mask).unwrap();
        for row in w.data().chunks(len) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for (t, &v) in row.iter().enumerate() {
                prop_assert!(v >= 0.0);
                if mask[t] == 0 { prop_assert!(v < 1e-300); }
            }
        }
    }

    #[test]
    fn softmax_rows_sum_to_one(x in tensor(vec![3, 7])) {
        let p = graph::softmax_rows(&x);
        for row in p.data().chunks(7) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-14);
            prop_assert!(row.iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn layer_norm_standardizes(x in tensor(vec![4, 9])) {
        let y = graph::layer_norm(&x, &Tensor::full(&[9], 1.0), &Tensor::zeros(&[9]), 1e-12).unwrap();
        for (row, src) in y.data().chunks(9).zip(x.data().chunks(9)) {
            let spread = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                - src.iter().cloned().fold(f64::INFINITY, f64::min);
            prop_assume!(spread > 1e-3);
            let mean = row.iter().sum::<f64>() / 9.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 9.0;
            prop_assert!(mean.abs() < 1e-12);
            prop_assert!((var - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn permute_roundtrip(x in tensor(vec![2, 3, 4, 5])) {
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let p = g.permute(v, &[2, 0, 3, 1]).unwrap();
        prop_assert_eq!(g.shape(p), &[4, 2, 5, 3]);
        let back = g.permute(p, &[1, 3, 0, 2]).unwrap();
        prop_assert_eq!(g.value(back), &x);
    }

    #[test]
    fn closed_form_count_equals_allocation(
        kind in kind_strategy(), heads in 1usize..4, d in 1usize..6, layers in 1usize..3,
        vocab in 5usize..40, inter in 1usize..20, maxpos in 1usize..10
    ) {
        let config = ModelConfig {
            vocab_size: vocab,
            max_positions: maxpos,
            n_layers: layers,
            n_heads: heads,
            hidden: heads * d,
            intermediate: inter,
            ..ModelConfig::tiny(kind)
        };
        let model = build_model(&config, 0).unwrap();
        prop_assert_eq!(model.allocated_scalars(), count_params(&config).unwrap());
    }

    #[test]
    fn schedule_bounded_and_peaks_at_warmup(steps in 1usize..2000, frac in 0.0f64..1.0, step_frac in 0.0f64..=1.0) {
        let warmup = (steps as f64 * frac) as usize;
        let cfg = TrainConfig { steps, warmup_steps: warmup, ..TrainConfig::default() };
        let step = (steps as f64 * step_frac) as usize;
        let lr = lr_at(step, &cfg).unwrap();
        prop_assert!((0.0..=cfg.peak_lr).contains(&lr));
        prop_assert_eq!(lr_at(warmup, &cfg).unwrap(), cfg.peak_lr);
        prop_assert!(lr_at(steps + 1, &cfg).is_err());
    }

    #[test]
    fn masking_only_touches_ordinary_tokens(
        seqs in prop::collection::vec(prop::collection::vec(0usize..20, 1..10), 1..6),
        prob in 0.0f64..0.99, seed in any::<u64>(), all_mask in any::<bool>()
    ) {
        let mode = if all_mask { MaskMode::AllMask } else { MaskMode::Bert };
        let b = mask_batch(&seqs, 20, prob, mode, seed).unwrap();
        let len = seqs.iter().map(Vec::len).max().unwrap();
        prop_assert_eq!(b.input_ids.len(), seqs.len() * len);
        for (r, seq) in seqs.iter().enumerate() {
            for pos in 0..len {
                let i = r * len + pos;
                match seq.get(pos) {
                    None => {
                        prop_assert_eq!(b.attention_mask[i], 0);
                        prop_assert_eq!(b.labels[i], IGNORE_INDEX);
                    }
                    Some(&orig) => {
                        prop_assert_eq!(b.attention_mask[i], 1);
                        if b.labels[i] == IGNORE_INDEX {
                            prop_assert_eq!(b.input_ids[i], orig);
                        } else {
                            prop_assert!(!is_special(orig));
                            prop_assert_eq!(b.labels[i], orig as i64);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn csv_keeps_ten_significant_digits(
        rows in prop::collection::vec((0.0f64..20.0, 0.0f64..20.0, 0.0f64..1e-2), 1..8)
    ) {
        let records: Vec<TraceRecord> = rows
            .iter()
            .enumerate()
            .map(|(i, &(t, e, lr))| TraceRecord { step: i * 10, train_loss: t, eval_loss: e, lr })
            .collect();
        let csv = records_to_csv(&records);
        prop_assert_eq!(records_to_csv(&records_from_csv(&csv).unwrap()), csv);
        for (a, b) in records_from_csv(&records_to_csv(&records)).unwrap().iter().zip(&records) {
            prop_assert!((a.eval_loss - b.eval_loss).abs() <= 5e-10 * b.eval_loss.abs());
        }
    }
}
