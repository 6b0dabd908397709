//! Shared fixtures for the criterion benches in `benches/`.

use sgvl_core::corpus::{generate_corpus, GeneratorConfig, SyntheticCorpus};
use sgvl_core::{Dataset, Model, ModelConfig, ParserLexicon, TrainConfig, Vocab};

/// A generated corpus with its prepared training split.
pub struct Fixture {
    pub lexicon: ParserLexicon,
    pub corpus: SyntheticCorpus,
    pub vocab: Vocab,
    pub data: Dataset,
    region_classes: usize,
}

impl Fixture {
    /// 400 pairs from the default generator, seed 1.
    pub fn small() -> Self {
        let lexicon = ParserLexicon::bundled();
        let gen = GeneratorConfig { pairs: 400, ..Default::default() };
        let corpus = generate_corpus(&gen, &lexicon, 1).expect("generator config is valid");
        let vocab = Vocab::build(corpus.captions.iter().map(|c| c.text.as_str()), &lexicon, 4000);
        let data = Dataset::prepare(&corpus.paired().split(false), &lexicon, vocab.clone()).expect("corpus is consistent");
        Fixture { lexicon, corpus, vocab, data, region_classes: gen.region_classes() }
    }

    /// The default desk model sized for this corpus.
    pub fn model(&self) -> Model<f32> {
        let mc = self.data.model_config(&ModelConfig::default(), self.region_classes);
        Model::new(mc, 0).expect("default config is valid")
    }

    pub fn train_config(&self, batch: usize) -> TrainConfig {
        TrainConfig { batch_size: batch, calibration_instances: 200, ..Default::default() }
    }
}
