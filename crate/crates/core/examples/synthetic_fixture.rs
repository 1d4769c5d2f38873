//! Writes the bundled synthetic fixture: planted-vocabulary corpora, two
//! embedding tables and a ready-to-run `pipeline.toml`.
//!
//! ```text
//! cargo run -p commentwatch --example synthetic_fixture -- fixture
//! commentwatch --config fixture/pipeline.toml preprocess
//! ```

use std::path::PathBuf;

use commentwatch::synthetic;

fn main() -> commentwatch::Result<()> {
    let dir = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| "fixture".into());
    let config = synthetic::write_fixture(&dir, &synthetic::fixture_config())?;
    println!("{}", config.display());
    Ok(())
}
