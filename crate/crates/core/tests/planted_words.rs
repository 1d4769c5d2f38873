use std::collections::BTreeMap;

use commentwatch::embed::EmbeddingTable;
use commentwatch::ensemble::EnsembleSpec;
use commentwatch::nn::load_model;
use commentwatch::pipeline::{Overrides, Pipeline, Stage};
use commentwatch::{synthetic, text, Category};

#[test]
fn trained_models_score_planted_vocabulary_above_clean_text() {
    let dir = tempfile::tempdir().unwrap();
    let config = synthetic::write_fixture(dir.path(), &synthetic::fixture_config()).unwrap();
    let p = Pipeline::from_file(&config, &Overrides::default()).unwrap();
    p.run_stages(&[Stage::Preprocess, Stage::Train]).unwrap();

    let mut tables = BTreeMap::new();
    for name in ["gensim", "glove"] {
        let t = EmbeddingTable::<f64>::load(&dir.path().join(format!("data/{name}.txt")), name).unwrap();
        tables.insert(name.to_string(), t);
    }
    let models = Category::ALL
        .into_iter()
        .map(|c| load_model(&dir.path().join(format!("models/base/{}.model", c.name()))).unwrap())
        .collect();
    let spec = EnsembleSpec::from_models(tables, models).unwrap();

    let clean = text::tokenize(&text::normalize("what a great video thanks for sharing this with everyone"));
    for c in Category::ALL {
        let planted = synthetic::category_words(c, 3).join(" ");
        let dirty = text::tokenize(&text::normalize(&format!("what a great video {planted} for everyone")));
        let (d, k) = (spec.score_comment(&dirty).get(c), spec.score_comment(&clean).get(c));
        assert!(d > k, "{c}: planted {d} vs clean {k}");
    }
}
