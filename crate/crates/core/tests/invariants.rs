use proptest::prelude::*;

use codchain::corpus::Vocabulary;
use codchain::model::{EncoderKind, ModelConfig, Seq2Seq};
use codchain::search::{beam_decode, greedy_decode, Conditioned};

const KINDS: [EncoderKind; 4] = [EncoderKind::Lstm, EncoderKind::Mean, EncoderKind::Brnn, EncoderKind::Transformer];

fn model(kind: EncoderKind, seed: u64) -> Seq2Seq {
    let mut c = ModelConfig { embed_dim: 6, hidden_dims: vec![6, 6], dec_hidden: 6, heads: 2, ff_dim: 8, seed, encoder: kind, ..ModelConfig::default() };
    match kind {
        EncoderKind::Brnn => c.hidden_dims = vec![3, 3],
        EncoderKind::Transformer => c.hidden_dims.clear(),
        _ => {}
    }
    let src = Vocabulary::from_tokens((0..8).map(|i| format!("S{i}")));
    let tgt = Vocabulary::from_tokens((0..5).map(|i| format!("T{i}")));
    Seq2Seq::new(c, src, tgt).unwrap()
}

fn src_ids() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(4usize..12, 1..7)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn attention_rows_are_distributions(kind in 0usize..4, seed in 0u64..50, src in src_ids(), prev in prop::collection::vec(4usize..9, 0..4)) {
        let m = model(KINDS[kind], seed);
        let enc = m.encode(&src).unwrap();
        let mut state = m.initial_state(&enc);
        for p in std::iter::once(Vocabulary::BOS).chain(prev) {
            let (out, next) = m.decode_step(p, &state, &enc);
            prop_assert_eq!(out.attention.len(), src.len());
            prop_assert!(out.attention.iter().all(|&a| a >= 0.0));
            prop_assert!((out.attention.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert_eq!(out.logits.len(), m.tgt_vocab.len());
            prop_assert!(out.logits.iter().all(|l| l.is_finite()));
            state = next;
        }
    }

    #[test]
    fn mean_summary_ignores_order(seed in 0u64..50, src in src_ids(), rot in 0usize..7) {
        let m = model(EncoderKind::Mean, seed);
        let mut shuffled = src.clone();
        let r = rot % src.len();
        shuffled.rotate_left(r);
        shuffled.reverse();
        let a = m.encode(&src).unwrap().summary;
        let b = m.encode(&shuffled).unwrap().summary;
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn untrained_loss_is_finite_and_positive(kind in 0usize..4, seed in 0u64..50, src in src_ids(), tgt in prop::collection::vec(4usize..9, 0..5)) {
        let m = model(KINDS[kind], seed);
        let loss = m.loss(&src, &tgt).unwrap();
        prop_assert!(loss.is_finite() && loss > 0.0);
    }
}

#[test]
fn lstm_summary_depends_on_order() {
    let m = model(EncoderKind::Lstm, 1);
    let a = m.encode(&[4, 5, 6]).unwrap().summary;
    let b = m.encode(&[6, 5, 4]).unwrap().summary;
    assert!(a.iter().zip(&b).any(|(x, y)| (x - y).abs() > 1e-6));
}

#[test]
fn beam_never_scores_below_greedy() {
    for kind in KINDS {
        for seed in 0..10 {
            let m = model(kind, seed);
            let src = [4 + seed as usize % 8, 7, 5];
            let cond = Conditioned::new(&m, &src).unwrap();
            let greedy = greedy_decode(&cond, 6, None);
            for k in [1, 2, 4, 8] {
                let top = &beam_decode(&cond, k, 6, None)[0];
                assert!(top.log_prob >= greedy.log_prob - 1e-12, "{kind:?} seed {seed} k {k}");
            }
        }
    }
}
