//! The public pipeline end to end: generate, persist, reload, mask, train,
//! evaluate.

use sgvl_core::corpus::{generate_corpus, load_pairs, GeneratorConfig};
use sgvl_core::eval::{build_cloze_set, run_cloze, run_itm_eval, OracleCloze, OracleItm};
use sgvl_core::masking::MaskingAudit;
use sgvl_core::model::StreamConfig;
use sgvl_core::train::{train, Splits};
use sgvl_core::{MaskingPolicy, Model, ModelConfig, ParserLexicon, TrainConfig, Vocab};
use statrs::distribution::{Binomial, DiscreteCDF};

fn tiny_model() -> ModelConfig {
    let stream = StreamConfig { layers: 1, hidden: 16, heads: 2, ffn: 32 };
    ModelConfig { text: stream, visual: stream, co_attention: vec![(0, 0)], ..ModelConfig::default() }
}

fn splits_from_disk(dir: &std::path::Path, pairs: usize) -> Splits {
    let lexicon = ParserLexicon::bundled();
    let gen = GeneratorConfig { pairs, feature_dim: 8, ..GeneratorConfig::default() };
    let corpus = generate_corpus(&gen, &lexicon, 21).unwrap();
    corpus.save(dir).unwrap();
    let vocab = Vocab::build(corpus.captions.iter().map(|c| c.text.as_str()), &lexicon, 1000);
    vocab.save(&dir.join("vocab.txt")).unwrap();

    let paired = load_pairs(&dir.join("captions.jsonl"), &dir.join("images.jsonl")).unwrap();
    assert_eq!(paired.len(), pairs);
    let vocab = Vocab::load(&dir.join("vocab.txt")).unwrap();
    Splits::prepare(&paired, &lexicon, vocab).unwrap()
}

#[test]
fn reloaded_corpus_trains_and_evaluates() {
    let dir = tempfile::tempdir().unwrap();
    let splits = splits_from_disk(dir.path(), 150);
    assert!(!splits.heldout.is_empty() && splits.train.len() > splits.heldout.len());

    let mut audit = MaskingAudit::default();
    let policy = MaskingPolicy::default();
    for i in 0..splits.train.len() {
        let inst = splits.train.instance(i, &policy, i as u64).unwrap();
        let pair = splits.train.pair(i);
        audit.add(&inst, pair.graph, pair.aligned);
    }
    assert_eq!(audit.context_violations, 0);
    assert!(audit.negatives > 0 && audit.negatives < audit.instances);

    let model = splits.model_config(&tiny_model());
    let cfg = TrainConfig { steps: 6, batch_size: 4, calibration_instances: 50, ..TrainConfig::default() };
    let out = train(&splits.train, &model, &cfg, None).unwrap();
    assert_eq!(out.checkpoint.step, 6);
    assert_eq!(out.history.len(), 6);
    assert!(out.history.iter().all(|l| l.total.is_finite()));

    let items = build_cloze_set(&splits.heldout, 5, 0).unwrap();
    let report = run_cloze(&out.checkpoint.model, &splits.heldout, &items, 0, "t").unwrap();
    assert_eq!(report.overall.count, 15);
    for (_, row) in report.rows() {
        assert!(row.acc1 <= row.acc5);
    }
    let oracle = run_cloze(&OracleCloze, &splits.heldout, &items, 0, "oracle").unwrap();
    assert_eq!(oracle.overall.acc1, 1.0);
    assert_eq!(run_itm_eval(&OracleItm, &splits.heldout, 0.5, 0).unwrap().accuracy, 1.0);
}

#[test]
fn untrained_itm_is_at_chance() {
    let dir = tempfile::tempdir().unwrap();
    let splits = splits_from_disk(dir.path(), 600);
    let model = Model::<f32>::new(splits.model_config(&tiny_model()), 1).unwrap();
    let report = run_itm_eval(&model, &splits.heldout, 0.5, 3).unwrap();
    let chance = Binomial::new(0.5, report.pairs as u64).unwrap();
    let (lo, hi) = (chance.inverse_cdf(0.005), chance.inverse_cdf(0.995));
    assert!((lo..=hi).contains(&(report.correct as u64)), "{report:?} outside [{lo}, {hi}]");
}
