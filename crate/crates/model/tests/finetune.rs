use candle_core::DType;
use simile_core::lm::{mask_logprobs, MaskedLm};
use simile_core::sentiment::{prepare_reviews, RawReview};
use simile_core::{SimileRecord, Source, Span, Spans};
use simile_model::head::{probe_sentiment, HeadConfig};
use simile_model::tokenizer::WordPiece;
use simile_model::train::LOG_FILE;
use simile_model::{finetune, KeVariant, ModelConfig, ModelError, Tokenizer, TrainConfig, Transformer};

const TOPICS: &[&str] = &["man", "toddler", "boy", "girl", "dog"];
const PAIRS: &[(&str, &str)] = &[("slow", "snail"), ("fast", "deer"), ("busy", "bee"), ("quiet", "mouse"), ("cold", "ice")];
const SUBJECTS: &[&str] = &["the", "that"];

fn vocab() -> Vec<&'static str> {
    let mut v = vec!["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]", "is", "as", "a", ".", "good", "bad", "movie", "plot"];
    v.extend(TOPICS);
    v.extend(SUBJECTS);
    for (p, veh) in PAIRS {
        v.push(p);
        v.push(veh);
    }
    v.sort();
    v.dedup();
    v
}

fn model(seed: u64) -> Transformer {
    let words = vocab();
    let tok = Tokenizer::WordPiece(WordPiece::from_tokens(&words).unwrap());
    Transformer::random(ModelConfig::tiny(words.len(), 16, 2, 2), tok, DType::F32, seed).unwrap()
}

fn records() -> Vec<SimileRecord> {
    let mut out = Vec::new();
    for det in SUBJECTS {
        for t in TOPICS {
            for (p, v) in PAIRS {
                let tokens: Vec<String> = [*det, *t, "is", "as", *p, "as", "a", *v, "."]
                    .iter()
                    .map(|s| s.to_string())
                    .collect();
                let spans = Spans {
                    topic: Span::single(1),
                    property: Span::single(4),
                    vehicle: Span::single(7),
                    event: Span::single(2),
                    comparator: vec![Span::single(3), Span::single(5)],
                };
                out.push(SimileRecord::new(tokens, spans, Source::Supervision).unwrap());
            }
        }
    }
    out
}

fn config(seed: u64, variant: KeVariant) -> TrainConfig {
    TrainConfig {
        alpha: 3.0,
        batch_size: 8,
        learning_rate: 1e-3,
        epochs: 2,
        seed,
        ke_variant: variant,
        ..TrainConfig::default()
    }
}

#[test]
fn toy_training_lowers_loss_for_some_seed() {
    let recs = records();
    assert_eq!(recs.len(), 50);
    let mut decreased = 0;
    for seed in 0..3 {
        let m = model(seed);
        let log = finetune(&m, &recs, &config(seed, KeVariant::Transe), None).unwrap();
        assert_eq!(log.epoch_loss.len(), 2);
        assert_eq!(log.steps.len(), 2 * 7);
        eprintln!("seed {seed}: epoch losses {:?}", log.epoch_loss);
        if log.epoch_loss[1] < log.epoch_loss[0] {
            decreased += 1;
        }
    }
    assert!(decreased >= 1);
}

#[test]
fn no_ke_variant_is_the_mlm_run() {
    let recs = records();
    let a = model(7);
    let b = model(7);
    let none = finetune(&a, &recs, &config(1, KeVariant::None), None).unwrap();
    let mlm = finetune(&b, &recs, &TrainConfig { alpha: 3.0, ..config(1, KeVariant::None) }, None).unwrap();
    assert_eq!(none.steps, mlm.steps);
    assert!(none.steps.iter().all(|s| s.ke_loss == 0.0 && s.total == s.mlm_loss));
    assert_eq!(a.parameter_checksum(), b.parameter_checksum());
}

#[test]
fn training_is_deterministic_and_checkpointed() {
    let recs = records();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("runs").join("ours").join("0");
    let a = model(3);
    let log = finetune(&a, &recs, &config(0, KeVariant::Transh), Some(&out)).unwrap();
    let b = model(3);
    assert_eq!(log, finetune(&b, &recs, &config(0, KeVariant::Transh), None).unwrap());
    let back = Transformer::load(&out).unwrap();
    assert_eq!(back.parameter_checksum(), a.parameter_checksum());
    let csv = std::fs::read_to_string(out.join(LOG_FILE)).unwrap();
    assert!(csv.starts_with("epoch,step,mlm_loss,ke_loss,total"));
    assert_eq!(csv.lines().count(), 1 + log.steps.len());
    let w: Vec<String> = "the dog is as [MASK] as a snail".split(' ').map(String::from).collect();
    assert_eq!(mask_logprobs(&a, &w).unwrap(), mask_logprobs(&back, &w).unwrap());
}

#[test]
fn divergence_restores_last_good_weights() {
    let recs = records();
    let m = model(2);
    let start = m.parameter_checksum();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("ckpt");
    let cfg = TrainConfig {
        learning_rate: 1e30,
        ..config(0, KeVariant::Transe)
    };
    match finetune(&m, &recs, &cfg, Some(&out)) {
        Err(ModelError::Diverged { epoch: 0, .. }) => {}
        other => panic!("expected divergence, got {other:?}"),
    }
    assert_eq!(m.parameter_checksum(), start);
    assert_eq!(Transformer::load(&out).unwrap().parameter_checksum(), start);
}

#[test]
fn multi_token_properties_are_skipped_and_reported() {
    let mut recs = records();
    recs[0].tokens[4] = "sluggish".into();
    let m = model(0);
    let log = finetune(&m, &recs, &config(0, KeVariant::Transe), None).unwrap();
    assert_eq!(log.skipped.len(), 1);
    assert_eq!(log.skipped[0].0, recs[0].id());
}

#[test]
fn sentiment_head_leaves_encoder_untouched() {
    let m = model(4);
    let raw: Vec<RawReview> = (0..40)
        .map(|i| RawReview {
            text: if i % 2 == 0 { "a good movie" } else { "a bad plot" }.into(),
            rating: if i % 2 == 0 { 5 } else { 1 },
        })
        .collect();
    let examples = prepare_reviews(&raw, 0).unwrap();
    let cfg = HeadConfig {
        epochs: 3,
        ..HeadConfig::default()
    };
    let before = m.parameter_checksum();
    let report = probe_sentiment(&m, &examples, &cfg).unwrap();
    assert_eq!(report.encoder_checksum, before);
    assert_eq!(m.parameter_checksum(), before);
    assert_eq!(report.sweep.len(), 3);
}
