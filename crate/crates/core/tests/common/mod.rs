#![allow(dead_code)]

use std::collections::BTreeMap;

use commentwatch::embed::EmbeddingTable;
use commentwatch::ensemble::{self, CommentTokens, EnsembleSpec};
use commentwatch::nn::MlpModel;
use commentwatch::{seed, Category};
use rand::Rng;

pub const VOCAB: usize = 40;

pub fn word(i: usize) -> String {
    format!("w{i}")
}

fn table(name: &str, dim: usize, rng: &mut impl Rng) -> EmbeddingTable<f64> {
    let entries = (0..VOCAB).map(|i| (word(i), (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()));
    EmbeddingTable::from_entries(name, dim, entries).unwrap()
}

/// Five small random models over two random tables, bound the shipped way.
pub fn tiny_ensemble(seed_value: u64) -> EnsembleSpec<f64> {
    let mut rng = seed::rng(seed_value);
    let mut tables = BTreeMap::new();
    tables.insert("gensim".to_string(), table("gensim", 12, &mut rng));
    tables.insert("glove".to_string(), table("glove", 6, &mut rng));
    let models = Category::ALL
        .into_iter()
        .map(|c| {
            let (binding, doc_dim) = ensemble::default_binding(c);
            let mut m = MlpModel::<f64>::new(doc_dim, &[8], 0.0, seed_value + c.index() as u64).unwrap();
            m.meta.category = Some(c);
            m.meta.embedding = binding.into();
            m.meta.word_dim = tables[binding].dim();
            m.meta.projection_seed = 99;
            m
        })
        .collect();
    EnsembleSpec::from_models(tables, models).unwrap()
}

/// Comment `i` of a deterministic stream; every seventh one has an
/// out-of-vocabulary token and every thirteenth is empty.
pub fn comment(i: usize) -> CommentTokens {
    let mut tokens: Vec<String> = if i.is_multiple_of(13) {
        Vec::new()
    } else {
        (0..1 + i % 9).map(|k| word((i * 7 + k * 3) % VOCAB)).collect()
    };
    if i.is_multiple_of(7) {
        tokens.push("unseen".into());
    }
    CommentTokens {
        comment_id: format!("c{i}"),
        video_id: format!("v{}", i % 5),
        tokens,
    }
}
