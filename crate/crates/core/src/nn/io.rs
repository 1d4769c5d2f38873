//! Versioned plain-text model files.
//!
//! ```text
//! commentwatch-model 1
//! category toxic
//! embedding gensim
//! word_dim 300
//! projection_seed 17
//! dims 50 128 128 1
//! trainable 1 1 1
//! dropout 0.2
//! threshold 0.52
//! weights 0
//! <out_dim rows of in_dim values>
//! biases 0
//! <out_dim values>
//! ...
//! checksum <sha256 of every preceding byte>
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use sha2::{Digest, Sha256};

use super::{check_dropout, DenseLayer, MlpModel, ModelMeta};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const FORMAT_VERSION: &str = "1";
const MAGIC: &str = "commentwatch-model";

pub fn save_model<T: Scalar>(model: &MlpModel<T>, path: &Path) -> Result<()> {
    fs::write(path, encode(model)).map_err(|e| Error::io(path, e))
}

pub fn load_model<T: Scalar>(path: &Path) -> Result<MlpModel<T>> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::ModelNotFound(path.to_owned()),
        _ => Error::io(path, e),
    })?;
    decode(&bytes)
}

pub(crate) fn encode<T: Scalar>(model: &MlpModel<T>) -> String {
    let m = &model.meta;
    let mut s = String::new();
    let join = |it: &mut dyn Iterator<Item = String>| it.collect::<Vec<_>>().join(" ");
    writeln!(s, "{MAGIC} {FORMAT_VERSION}").unwrap();
    writeln!(s, "category {}", m.category.map_or("none", |c| c.name())).unwrap();
    writeln!(s, "embedding {}", if m.embedding.is_empty() { "none" } else { &m.embedding }).unwrap();
    writeln!(s, "word_dim {}", m.word_dim).unwrap();
    writeln!(s, "projection_seed {}", m.projection_seed).unwrap();
    writeln!(s, "dims {}", join(&mut model.dims().into_iter().map(|d| d.to_string()))).unwrap();
    writeln!(
        s,
        "trainable {}",
        join(&mut model.layers.iter().map(|l| u8::from(l.trainable).to_string()))
    )
    .unwrap();
    writeln!(s, "dropout {}", model.dropout_rate).unwrap();
    match m.threshold {
        Some(t) => writeln!(s, "threshold {t}").unwrap(),
        None => writeln!(s, "threshold none").unwrap(),
    }
    for (i, l) in model.layers.iter().enumerate() {
        writeln!(s, "weights {i}").unwrap();
        for row in l.weights.rows() {
            writeln!(s, "{}", join(&mut row.iter().map(|v| v.to_string()))).unwrap();
        }
        writeln!(s, "biases {i}").unwrap();
        writeln!(s, "{}", join(&mut l.biases.iter().map(|v| v.to_string()))).unwrap();
    }
    let digest = hex::encode(Sha256::digest(s.as_bytes()));
    writeln!(s, "checksum {digest}").unwrap();
    s
}

pub(crate) fn decode<T: Scalar>(bytes: &[u8]) -> Result<MlpModel<T>> {
    let first = bytes.split(|&b| b == b'\n').next().unwrap_or_default();
    let first = String::from_utf8_lossy(first);
    match first.split_once(' ') {
        Some((MAGIC, v)) if v.trim() == FORMAT_VERSION => {}
        Some((MAGIC, v)) => {
            return Err(Error::Version {
                found: v.trim().to_owned(),
                expected: FORMAT_VERSION.to_owned(),
            })
        }
        _ => return Err(Error::ModelFormat("missing model header".into())),
    }

    let body_end = bytes
        .windows(10)
        .rposition(|w| w == b"\nchecksum ")
        .map(|p| p + 1)
        .ok_or_else(|| Error::ModelFormat("missing checksum line".into()))?;
    let (body, tail) = bytes.split_at(body_end);
    let stored = String::from_utf8_lossy(&tail[b"checksum ".len()..]).trim().to_owned();
    let computed = hex::encode(Sha256::digest(body));
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    let body = std::str::from_utf8(body).map_err(|e| Error::ModelFormat(e.to_string()))?;
    parse(body)
}

fn parse<T: Scalar>(body: &str) -> Result<MlpModel<T>> {
    let fail = |m: String| Error::ModelFormat(m);
    let mut lines = body.lines().skip(1);
    fn next_field<'a>(lines: &mut impl Iterator<Item = &'a str>, key: &str) -> Result<String> {
        let line = lines
            .next()
            .ok_or_else(|| Error::ModelFormat(format!("missing {key}")))?;
        match line.split_once(' ') {
            Some((k, v)) if k == key => Ok(v.to_owned()),
            _ => Err(Error::ModelFormat(format!("expected {key}, found {line:?}"))),
        }
    }
    let category = match next_field(&mut lines, "category")?.as_str() {
        "none" => None,
        c => Some(c.parse()?),
    };
    let embedding = match next_field(&mut lines, "embedding")?.as_str() {
        "none" => String::new(),
        e => e.to_owned(),
    };
    let word_dim = parse_num::<usize>(&next_field(&mut lines, "word_dim")?)?;
    let projection_seed = parse_num::<u64>(&next_field(&mut lines, "projection_seed")?)?;
    let dims = next_field(&mut lines, "dims")?
        .split(' ')
        .map(parse_num::<usize>)
        .collect::<Result<Vec<_>>>()?;
    let trainable = next_field(&mut lines, "trainable")?
        .split(' ')
        .map(|t| match t {
            "1" => Ok(true),
            "0" => Ok(false),
            _ => Err(fail(format!("bad trainable flag {t:?}"))),
        })
        .collect::<Result<Vec<_>>>()?;
    let dropout_rate = parse_num::<f64>(&next_field(&mut lines, "dropout")?)?;
    check_dropout(dropout_rate)?;
    let threshold = match next_field(&mut lines, "threshold")?.as_str() {
        "none" => None,
        t => Some(parse_num::<f64>(t)?),
    };
    if dims.len() < 2 || dims.contains(&0) || trainable.len() != dims.len() - 1 || dims.last() != Some(&1) {
        return Err(fail(format!("inconsistent dims {dims:?} / trainable {trainable:?}")));
    }

    let mut layers = Vec::with_capacity(dims.len() - 1);
    for (i, w) in dims.windows(2).enumerate() {
        let (in_dim, out_dim) = (w[0], w[1]);
        next_field(&mut lines, "weights").and_then(|v| expect_index(&v, i))?;
        let mut flat = Vec::with_capacity(in_dim * out_dim);
        for _ in 0..out_dim {
            let row = field_row::<T>(lines.next(), in_dim)?;
            flat.extend(row);
        }
        next_field(&mut lines, "biases").and_then(|v| expect_index(&v, i))?;
        let biases = field_row::<T>(lines.next(), out_dim)?;
        layers.push(DenseLayer {
            weights: Array2::from_shape_vec((out_dim, in_dim), flat).expect("shape checked"),
            biases: Array1::from_vec(biases),
            trainable: trainable[i],
        });
    }
    if lines.next().is_some() {
        return Err(fail("trailing content after parameters".into()));
    }
    Ok(MlpModel {
        layers,
        dropout_rate,
        meta: ModelMeta {
            category,
            embedding,
            word_dim,
            projection_seed,
            threshold,
        },
    })
}

fn expect_index(v: &str, i: usize) -> Result<()> {
    if v != i.to_string() {
        return Err(Error::ModelFormat(format!("expected block {i}, found {v:?}")));
    }
    Ok(())
}

fn field_row<T: Scalar>(line: Option<&str>, len: usize) -> Result<Vec<T>> {
    let line = line.ok_or_else(|| Error::ModelFormat("truncated parameter block".into()))?;
    let row = line
        .split(' ')
        .map(|v| {
            v.parse::<T>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| Error::ModelFormat(format!("bad parameter {v:?}")))
        })
        .collect::<Result<Vec<T>>>()?;
    if row.len() != len {
        return Err(Error::ModelFormat(format!("expected {len} values, found {}", row.len())));
    }
    Ok(row)
}

fn parse_num<N: std::str::FromStr>(s: &str) -> Result<N> {
    s.trim()
        .parse()
        .map_err(|_| Error::ModelFormat(format!("bad number {s:?}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Category;
    use crate::nn::Mode;
    use ndarray::Array1;
    use proptest::prelude::*;

    fn model(seed: u64) -> MlpModel<f64> {
        let mut m = MlpModel::new(5, &[4, 3], 0.2, seed).unwrap();
        m.meta = ModelMeta {
            category: Some(Category::Threat),
            embedding: "glove".into(),
            word_dim: 50,
            projection_seed: 99,
            threshold: Some(0.22),
        };
        m.layers[1].biases[2] = -1.0 / 3.0;
        m
    }

    #[test]
    fn corrupted_byte_fails_checksum() {
        let mut bytes = encode(&model(1)).into_bytes();
        let pos = bytes.len() / 2;
        bytes[pos] = if bytes[pos] == b'1' { b'2' } else { b'1' };
        assert!(matches!(decode::<f64>(&bytes), Err(Error::Checksum { .. })));
    }

    #[test]
    fn version_mismatch() {
        let text = encode(&model(1)).replacen("commentwatch-model 1", "commentwatch-model 9", 1);
        assert!(matches!(decode::<f64>(text.as_bytes()), Err(Error::Version { .. })));
        assert!(matches!(decode::<f64>(b"garbage"), Err(Error::ModelFormat(_))));
    }

    #[test]
    fn missing_file_is_model_not_found() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_model::<f64>(&dir.path().join("x.model")),
            Err(Error::ModelNotFound(_))
        ));
    }

    #[test]
    fn loaded_model_checks_input_dim() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.model");
        let mut m = MlpModel::<f64>::standard(50, 1).unwrap();
        m.meta.embedding = "gensim".into();
        save_model(&m, &p).unwrap();
        let back: MlpModel<f64> = load_model(&p).unwrap();
        let x = Array1::<f64>::zeros(100);
        assert!(matches!(
            back.forward(x.view(), Mode::Infer),
            Err(Error::DimensionMismatch { expected: 50, got: 100 })
        ));
    }

    #[test]
    fn f32_models_round_trip() {
        let m = MlpModel::<f32>::new(3, &[2], 0.0, 4).unwrap();
        assert_eq!(decode::<f32>(encode(&m).as_bytes()).unwrap(), m);
    }

    proptest! {
        #[test]
        fn save_load_is_identity(seed in any::<u64>(), frozen in any::<bool>(), threshold in proptest::option::of(0.0f64..1.0)) {
            let mut m = model(seed);
            if frozen {
                m.freeze_all_but_last();
            }
            m.meta.threshold = threshold;
            let back: MlpModel<f64> = decode(encode(&m).as_bytes()).unwrap();
            prop_assert_eq!(&back, &m);
            prop_assert_eq!(back.param_checksum(), m.param_checksum());
        }
    }
}
