//! Shared fixtures for the benchmarks in `benches/`.

use clozevar::synth::{gen_world, to_cloze_dataset};
use clozevar::tokenizer::train_merges;
use clozevar::{ClozeDataset, LmConfig, MergeTable, PromptTemplate, TinyLm, TokenId};

pub struct Fixture {
    pub dataset: ClozeDataset,
    pub table: MergeTable,
    pub model: TinyLm,
    /// Encoded context of the first item.
    pub context: Vec<TokenId>,
}

/// A synthetic dataset of `contexts` items with a 512-merge tokenizer and an
/// untrained model of the default size.
pub fn fixture(contexts: usize) -> Fixture {
    let world = gen_world(contexts, 32, 1.0, 7).expect("valid world");
    let dataset = to_cloze_dataset(&world, 40, 1).expect("valid dataset");
    let text = dataset.text_for_tokenizer(Some(&PromptTemplate::default()));
    let table = train_merges(&text, 512).expect("tokenizer trains");
    let model = TinyLm::init(table.vocab_size(), LmConfig::default(), 42).expect("valid model");
    let context = table.encode(&dataset.items[0].context).expect("in alphabet").0;
    Fixture { dataset, table, model, context }
}
