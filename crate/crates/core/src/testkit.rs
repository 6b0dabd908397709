//! Small fixtures shared by unit tests.

use crate::corpus::{generate_corpus, GeneratorConfig};
use crate::model::{ModelConfig, StreamConfig};
use crate::scenegraph::ParserLexicon;
use crate::textproc::Vocab;
use crate::train::Dataset;

/// A synthetic dataset with 8-dim features and a 2+2 layer, width-16 model.
pub(crate) fn tiny_setup(pairs: usize) -> (Dataset, ModelConfig) {
    let lex = ParserLexicon::bundled();
    let gen = GeneratorConfig {
        pairs,
        feature_dim: 8,
        ..Default::default()
    };
    let corpus = generate_corpus(&gen, &lex, 5).unwrap();
    let vocab = Vocab::build(corpus.captions.iter().map(|c| c.text.as_str()), &lex, 400);
    let data = Dataset::prepare(&corpus.paired(), &lex, vocab).unwrap();
    let stream = StreamConfig {
        layers: 2,
        hidden: 16,
        heads: 2,
        ffn: 32,
    };
    let base = ModelConfig {
        text: stream,
        visual: stream,
        co_attention: vec![(0, 0)],
        dropout: 0.1,
        ..Default::default()
    };
    let cfg = data.model_config(&base, gen.region_classes());
    (data, cfg)
}
