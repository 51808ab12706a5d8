use super::*;
use crate::nn::gradcheck::grad_check;
use crate::nn::ops::{log_softmax, softmax};

fn vocab(n: usize, prefix: &str) -> Vocabulary {
    Vocabulary::from_tokens((0..n).map(|i| format!("{prefix}{i:02}")))
}

pub(crate) fn tiny_config(kind: EncoderKind) -> ModelConfig {
    let mut c = ModelConfig {
        encoder: kind,
        embed_dim: 4,
        hidden_dims: vec![5, 5],
        dec_hidden: 5,
        layers: 2,
        heads: 2,
        ff_dim: 6,
        dropout: 0.0,
        input_feed: true,
        seed: 11,
    };
    match kind {
        EncoderKind::Mean => c.embed_dim = 5,
        EncoderKind::Brnn => c.hidden_dims = vec![3, 2],
        EncoderKind::Transformer => c.hidden_dims.clear(),
        EncoderKind::Lstm => {}
    }
    c
}

fn tiny(kind: EncoderKind) -> Seq2Seq {
    Seq2Seq::new(tiny_config(kind), vocab(5, "S"), vocab(4, "T")).unwrap()
}

/// Moves parameters away from the near-symmetric initial point, where some
/// gradients are too small for finite differences to resolve.
pub(crate) fn jitter(m: &mut Seq2Seq, seed: u64) {
    let mut rng = Rng64::new(seed);
    for t in m.params.tensors_mut() {
        for v in &mut t.values {
            *v += 0.2 * rng.normal();
        }
    }
}

#[test]
fn presets_validate() {
    for kind in EncoderKind::ALL {
        for preset in [Preset::Full, Preset::Desk] {
            ModelConfig::preset(kind, preset).validate().unwrap();
        }
        tiny_config(kind).validate().unwrap();
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let mut c = tiny_config(EncoderKind::Lstm);
    c.hidden_dims = vec![5, 6];
    assert!(c.validate().is_err());
    let mut c = tiny_config(EncoderKind::Mean);
    c.embed_dim = 4;
    assert!(c.validate().is_err());
    let mut c = tiny_config(EncoderKind::Transformer);
    c.heads = 3;
    assert!(c.validate().is_err());
    let mut c = tiny_config(EncoderKind::Lstm);
    c.dropout = 1.0;
    assert!(c.validate().is_err());
    assert!("cnn".parse::<EncoderKind>().is_err());
    assert_eq!("BRNN".parse::<EncoderKind>().unwrap(), EncoderKind::Brnn);
}

#[test]
fn gradients_match_finite_differences() {
    let src = [4, 6, 5, 8];
    let tgt = [5, 7, 4];
    for kind in EncoderKind::ALL {
        let mut m = tiny(kind);
        jitter(&mut m, 5);
        let (loss, g) = m.loss_and_grads(&src, &tgt, None).unwrap();
        assert!((loss - m.loss(&src, &tgt).unwrap()).abs() < 1e-12);
        let report = grad_check(|p| m.loss_with(p, &src, &tgt).unwrap(), &m.params, &g, 1e-4, 3000, 1).unwrap();
        assert!(report.max_relative_error < 1e-4, "{kind}: {report:?}");
    }
}

#[test]
fn gradients_without_input_feeding() {
    let mut c = tiny_config(EncoderKind::Lstm);
    c.input_feed = false;
    let mut m = Seq2Seq::new(c, vocab(5, "S"), vocab(4, "T")).unwrap();
    jitter(&mut m, 6);
    let (src, tgt) = ([4, 5, 6], [6, 4]);
    let (_, g) = m.loss_and_grads(&src, &tgt, None).unwrap();
    let report = grad_check(|p| m.loss_with(p, &src, &tgt).unwrap(), &m.params, &g, 1e-4, 3000, 2).unwrap();
    assert!(report.max_relative_error < 1e-4, "{report:?}");
}

#[test]
fn stepwise_decoding_matches_teacher_forcing() {
    let src = [5, 4, 8, 7, 6];
    let tgt = [6, 4, 7];
    for kind in EncoderKind::ALL {
        let m = tiny(kind);
        let forced = m.teacher_forced_logits(&src, &tgt).unwrap();
        let enc = m.encode(&src).unwrap();
        let mut state = m.initial_state(&enc);
        let mut prev = Vocabulary::BOS;
        let mut total = 0.0;
        for (t, row) in forced.iter().enumerate() {
            let (out, next) = m.decode_step(prev, &state, &enc);
            for (a, b) in out.logits.iter().zip(row) {
                assert!((a - b).abs() < 1e-10, "{kind} step {t}");
            }
            assert_eq!(out.attention.len(), src.len());
            assert!((out.attention.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let gold = tgt.get(t).copied().unwrap_or(Vocabulary::EOS);
            total -= log_softmax(&out.logits)[gold];
            state = next;
            prev = gold;
        }
        assert!((total - m.loss(&src, &tgt).unwrap()).abs() < 1e-9);
    }
}

#[test]
fn dropout_changes_loss_and_is_seeded() {
    let mut c = tiny_config(EncoderKind::Lstm);
    c.dropout = 0.5;
    let m = Seq2Seq::new(c, vocab(5, "S"), vocab(4, "T")).unwrap();
    let (src, tgt) = ([4, 5, 6], [6, 4]);
    let a = m.loss_and_grads(&src, &tgt, Some(&mut Rng64::new(3))).unwrap().0;
    let b = m.loss_and_grads(&src, &tgt, Some(&mut Rng64::new(3))).unwrap().0;
    assert_eq!(a.to_bits(), b.to_bits());
    assert_ne!(a, m.loss(&src, &tgt).unwrap());
}

#[test]
fn untrained_loss_is_near_uniform() {
    let m = Seq2Seq::new(ModelConfig::preset(EncoderKind::Lstm, Preset::Desk), vocab(46, "S"), vocab(26, "T")).unwrap();
    let src: Vec<usize> = (4..20).collect();
    let tgt = [4, 9, 13];
    let per_token = m.loss(&src, &tgt).unwrap() / 4.0;
    let ln_v = (m.tgt_vocab.len() as f64).ln();
    assert!((per_token - ln_v).abs() / ln_v < 0.2, "{per_token} vs {ln_v}");
    let p = softmax(&m.teacher_forced_logits(&src, &tgt).unwrap()[0]);
    assert!(p.iter().all(|&x| x > 0.0));
}

#[test]
fn rejects_bad_indices_and_empty_source() {
    let m = tiny(EncoderKind::Lstm);
    assert!(matches!(m.loss(&[4, 99], &[4]), Err(Error::OutOfVocabIndex { index: 99, .. })));
    assert!(matches!(m.loss(&[4], &[50]), Err(Error::OutOfVocabIndex { index: 50, .. })));
    assert!(m.encode(&[]).is_err());
}

#[test]
fn checkpoint_round_trip() {
    for kind in EncoderKind::ALL {
        let m = tiny(kind);
        let bytes = m.to_bytes().unwrap();
        assert_eq!(&bytes[..8], b"CODCHAIN");
        let back = Seq2Seq::from_bytes(&bytes).unwrap();
        assert_eq!(back.config, m.config);
        assert_eq!(back.tgt_vocab, m.tgt_vocab);
        assert_eq!(back.loss(&[4, 5], &[6]).unwrap().to_bits(), m.loss(&[4, 5], &[6]).unwrap().to_bits());
    }
    let mut bytes = tiny(EncoderKind::Mean).to_bytes().unwrap();
    bytes[3] ^= 1;
    assert!(Seq2Seq::from_bytes(&bytes).is_err());
}

#[test]
fn same_seed_same_parameters() {
    let a = tiny(EncoderKind::Transformer);
    let b = tiny(EncoderKind::Transformer);
    assert_eq!(a.params.tensors(), b.params.tensors());
    let mut c = tiny_config(EncoderKind::Transformer);
    c.seed = 12;
    let d = Seq2Seq::new(c, vocab(5, "S"), vocab(4, "T")).unwrap();
    assert_ne!(a.params.tensors(), d.params.tensors());
}

#[test]
fn training_reduces_loss_and_is_reproducible() {
    use crate::corpus::{Side, Vocabulary as V};
    use crate::icd::{normalize_code, CodeSystem};
    let recs: Vec<Record> = (0..24)
        .map(|i| Record {
            id: i.to_string(),
            src: vec![normalize_code(&format!("V0{}", i % 5), CodeSystem::Icd9).unwrap(), normalize_code("V10", CodeSystem::Icd9).unwrap()],
            tgt: vec![normalize_code(&format!("T0{}", i % 5), CodeSystem::Icd10).unwrap()],
        })
        .collect();
    let make = || {
        let c = tiny_config(EncoderKind::Lstm);
        Seq2Seq::new(c, V::build(&recs, Side::Src, 1), V::build(&recs, Side::Tgt, 1)).unwrap()
    };
    let cfg = TrainConfig { epochs: 25, batch_size: 8, learning_rate: 0.02, ..TrainConfig::default() };
    let before = evaluate_loss(&make(), &recs).unwrap();
    let run = || train(make(), &recs, &recs, &cfg, |_| {}).unwrap();
    let a = run();
    let b = run();
    assert_eq!(a.history, b.history);
    let after = evaluate_loss(&a.model, &recs).unwrap();
    assert!(after < 0.5 * before, "{before} -> {after}");
    assert_eq!(a.history.len(), 25);
    let best = a.history.iter().map(|m| m.valid_loss).fold(f64::INFINITY, f64::min);
    assert_eq!(a.history[a.best_epoch - 1].valid_loss, best);
    assert!((after - best).abs() < 1e-12);
    assert!(train(make(), &[], &recs, &cfg, |_| {}).is_err());
}
