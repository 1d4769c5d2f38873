//! Five per-category binary models combined into one multi-label verdict.
//!
//! A comment is inappropriate when any category score reaches its threshold
//! (`score >= threshold`).

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Category, LabelVector};
use crate::embed::{DocEmbedder, DocVectorConfig, EmbeddingTable, Projection};
use crate::error::{Error, Result};
use crate::nn::{MlpModel, Mode};
use crate::scalar::Scalar;

/// Shipped thresholds in [`Category::ALL`] order, used until calibration
/// replaces them.
pub const DEFAULT_THRESHOLDS: [f64; 5] = [0.520, 0.270, 0.210, 0.220, 0.140];

pub const DEFAULT_GRID_STEP: f64 = 0.01;

pub fn default_threshold(c: Category) -> f64 {
    DEFAULT_THRESHOLDS[c.index()]
}

/// Threat reads the 50-dimensional Glove-style table, projected to 100;
/// the rest read the 300-dimensional Gensim-style table, projected to 50.
pub fn default_binding(c: Category) -> (&'static str, usize) {
    match c {
        Category::Threat => ("glove", 100),
        _ => ("gensim", 50),
    }
}

pub struct EnsembleMember<T> {
    pub category: Category,
    pub model: MlpModel<T>,
    pub binding: String,
    pub doc_cfg: DocVectorConfig,
    pub threshold: f64,
    projection: Projection<T>,
}

impl<T: Scalar> EnsembleMember<T> {
    /// Reads binding, projection and threshold from the model's metadata.
    /// Without a stored threshold the category default applies.
    pub fn from_model(model: MlpModel<T>) -> Result<Self> {
        let category = model
            .meta
            .category
            .ok_or_else(|| Error::InvalidConfig("model has no category tag".into()))?;
        let doc_cfg = DocVectorConfig {
            word_dim: model.meta.word_dim,
            doc_dim: model.input_dim(),
            projection_seed: model.meta.projection_seed,
        };
        let threshold = model.meta.threshold.unwrap_or_else(|| default_threshold(category));
        if !(0.0..=1.0).contains(&threshold) {
            return Err(Error::InvalidConfig(format!(
                "{category} threshold {threshold} outside [0, 1]"
            )));
        }
        Ok(Self {
            category,
            binding: model.meta.embedding.clone(),
            projection: Projection::new(&doc_cfg)?,
            model,
            doc_cfg,
            threshold,
        })
    }
}

pub struct EnsembleSpec<T> {
    tables: BTreeMap<String, EmbeddingTable<T>>,
    members: Vec<EnsembleMember<T>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CategoryScores {
    pub scores: [f64; 5],
    /// Out-of-vocabulary share seen by each category's table.
    pub oov_fraction: [f64; 5],
}

impl CategoryScores {
    pub fn get(&self, c: Category) -> f64 {
        self.scores[c.index()]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Verdict {
    pub labels: LabelVector,
    pub inappropriate: bool,
}

impl Verdict {
    pub fn safe(&self) -> bool {
        !self.inappropriate
    }
}

impl<T: Scalar> EnsembleSpec<T> {
    /// Requires all five categories exactly once and a matching table for
    /// every binding.
    pub fn new(tables: BTreeMap<String, EmbeddingTable<T>>, members: Vec<EnsembleMember<T>>) -> Result<Self> {
        let mut slots: [Option<EnsembleMember<T>>; 5] = Default::default();
        for m in members {
            let slot = &mut slots[m.category.index()];
            if slot.is_some() {
                return Err(Error::InvalidConfig(format!("duplicate model for {}", m.category)));
            }
            let table = tables
                .get(&m.binding)
                .ok_or_else(|| Error::MissingTable(m.binding.clone()))?;
            if table.dim() != m.doc_cfg.word_dim {
                return Err(Error::DimensionMismatch {
                    expected: m.doc_cfg.word_dim,
                    got: table.dim(),
                });
            }
            *slot = Some(m);
        }
        let members = slots
            .into_iter()
            .enumerate()
            .map(|(i, m)| m.ok_or(Error::MissingCategory(Category::ALL[i].name())))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { tables, members })
    }

    pub fn from_models(tables: BTreeMap<String, EmbeddingTable<T>>, models: Vec<MlpModel<T>>) -> Result<Self> {
        let members = models
            .into_iter()
            .map(EnsembleMember::from_model)
            .collect::<Result<Vec<_>>>()?;
        Self::new(tables, members)
    }

    pub fn member(&self, c: Category) -> &EnsembleMember<T> {
        &self.members[c.index()]
    }

    pub fn thresholds(&self) -> [f64; 5] {
        std::array::from_fn(|i| self.members[i].threshold)
    }

    pub fn set_threshold(&mut self, c: Category, t: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::InvalidConfig(format!("{c} threshold {t} outside [0, 1]")));
        }
        let m = &mut self.members[c.index()];
        m.threshold = t;
        m.model.meta.threshold = Some(t);
        Ok(())
    }

    pub fn score_comment<S: AsRef<str>>(&self, tokens: &[S]) -> CategoryScores {
        let mut out = CategoryScores {
            scores: [0.0; 5],
            oov_fraction: [0.0; 5],
        };
        for m in &self.members {
            let table = &self.tables[&m.binding];
            let doc = pooled(table, &m.projection, tokens);
            let p = m
                .model
                .forward(doc.0.view(), Mode::Infer)
                .expect("member input dim equals projection output");
            out.scores[m.category.index()] = p.as_f64();
            out.oov_fraction[m.category.index()] = doc.1;
        }
        out
    }

    pub fn apply_thresholds(&self, scores: &CategoryScores) -> Verdict {
        apply_thresholds(scores, &self.thresholds())
    }

    pub fn classify(&self, input: &CommentTokens) -> PredictionRecord {
        let scores = self.score_comment(&input.tokens);
        let verdict = self.apply_thresholds(&scores);
        PredictionRecord {
            comment_id: input.comment_id.clone(),
            video_id: input.video_id.clone(),
            scores: scores.scores,
            labels: verdict.labels,
            inappropriate: verdict.inappropriate,
        }
    }
}

fn pooled<T: Scalar, S: AsRef<str>>(
    table: &EmbeddingTable<T>,
    projection: &Projection<T>,
    tokens: &[S],
) -> (ndarray::Array1<T>, f64) {
    let mut sum = ndarray::Array1::<T>::zeros(table.dim());
    let mut found = 0usize;
    for t in tokens {
        if let Some(v) = table.get(t.as_ref()) {
            sum += &v;
            found += 1;
        }
    }
    if found == 0 {
        return (ndarray::Array1::zeros(projection.output_dim()), 1.0);
    }
    sum /= T::from_usize(found).expect("count fits scalar");
    let oov = (tokens.len() - found) as f64 / tokens.len() as f64;
    (projection.apply(&sum), oov)
}

/// Flags each category with `score >= threshold`.
pub fn apply_thresholds(scores: &CategoryScores, thresholds: &[f64; 5]) -> Verdict {
    let labels = LabelVector::new(std::array::from_fn(|i| scores.scores[i] >= thresholds[i]));
    Verdict {
        inappropriate: labels.any(),
        labels,
    }
}

/// Document vectors for many token lists, one row each.
pub fn embed_rows<T: Scalar, S: AsRef<str> + Sync>(embedder: &DocEmbedder<'_, T>, docs: &[&[S]]) -> Array2<T> {
    let rows: Vec<_> = docs.par_iter().map(|d| embedder.embed(d).values).collect();
    let mut out = Array2::zeros((docs.len(), embedder.doc_dim()));
    for (mut row, v) in out.rows_mut().into_iter().zip(rows) {
        row.assign(&v);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub threshold: f64,
    pub tpr: f64,
    pub tnr: f64,
    /// Share of an unlabeled sample flagged at this threshold.
    pub detected: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdCurve {
    pub category: Option<Category>,
    pub points: Vec<CurvePoint>,
}

/// Grid thresholds `0, step, ..., 1`, followed by `1 + step`, at which
/// nothing is flagged.
pub fn threshold_grid(step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0 && step <= 1.0) {
        return Err(Error::InvalidConfig(format!("grid step must lie in (0, 1], got {step}")));
    }
    let n = (1.0 / step).round();
    let mut grid: Vec<f64> = if (n * step - 1.0).abs() < 1e-9 {
        let n = n as usize;
        (0..=n).map(|k| k as f64 / n as f64).collect()
    } else {
        let n = (1.0 / step).floor() as usize;
        (0..=n).map(|k| k as f64 * step).collect()
    };
    grid.push(1.0 + step);
    Ok(grid)
}

/// TPR, TNR and (optionally) detected share at every grid threshold.
pub fn sweep_thresholds(
    scores: &[f64],
    labels: &[bool],
    step: f64,
    unlabeled: Option<&[f64]>,
) -> Result<ThresholdCurve> {
    if scores.len() != labels.len() {
        return Err(Error::LengthMismatch {
            left: scores.len(),
            right: labels.len(),
        });
    }
    let sorted = |it: &mut dyn Iterator<Item = f64>| {
        let mut v: Vec<f64> = it.collect();
        v.sort_by(f64::total_cmp);
        v
    };
    let pos = sorted(&mut scores.iter().zip(labels).filter(|(_, &l)| l).map(|(&s, _)| s));
    let neg = sorted(&mut scores.iter().zip(labels).filter(|(_, &l)| !l).map(|(&s, _)| s));
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::SingleClass {
            positives: pos.len(),
            negatives: neg.len(),
        });
    }
    let unl = unlabeled.map(|u| sorted(&mut u.iter().copied()));
    let at_or_above = |v: &[f64], t: f64| v.len() - v.partition_point(|&s| s < t);

    let points = threshold_grid(step)?
        .into_iter()
        .map(|t| CurvePoint {
            threshold: t,
            tpr: at_or_above(&pos, t) as f64 / pos.len() as f64,
            tnr: (neg.len() - at_or_above(&neg, t)) as f64 / neg.len() as f64,
            detected: unl
                .as_ref()
                .filter(|u| !u.is_empty())
                .map(|u| at_or_above(u, t) as f64 / u.len() as f64),
        })
        .collect();
    Ok(ThresholdCurve { category: None, points })
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum ThresholdPolicy {
    /// Maximize `min(TPR, TNR)`.
    #[default]
    MaxMinRate,
    /// Maximize `TPR + TNR - 1`.
    Youden,
    Fixed(f64),
}

impl fmt::Display for ThresholdPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ThresholdPolicy::MaxMinRate => f.write_str("max_min_rate"),
            ThresholdPolicy::Youden => f.write_str("youden"),
            ThresholdPolicy::Fixed(t) => write!(f, "fixed:{t}"),
        }
    }
}

impl FromStr for ThresholdPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max_min_rate" => Ok(Self::MaxMinRate),
            "youden" => Ok(Self::Youden),
            _ => s
                .strip_prefix("fixed:")
                .and_then(|t| t.parse::<f64>().ok())
                .filter(|t| (0.0..=1.0).contains(t))
                .map(Self::Fixed)
                .ok_or_else(|| {
                    Error::InvalidConfig(format!(
                        "unknown threshold policy {s:?} (max_min_rate | youden | fixed:<t>)"
                    ))
                }),
        }
    }
}

impl Serialize for ThresholdPolicy {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ThresholdPolicy {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Picks a threshold from the curve. Ties go to the lower threshold, which
/// keeps the higher TPR.
pub fn select_threshold(curve: &ThresholdCurve, policy: ThresholdPolicy) -> Result<f64> {
    if curve.points.is_empty() {
        return Err(Error::EmptyInput("threshold curve"));
    }
    let objective = match policy {
        ThresholdPolicy::Fixed(t) => return Ok(t),
        ThresholdPolicy::MaxMinRate => |p: &CurvePoint| p.tpr.min(p.tnr),
        ThresholdPolicy::Youden => |p: &CurvePoint| p.tpr + p.tnr - 1.0,
    };
    let mut points: Vec<&CurvePoint> = curve.points.iter().collect();
    points.sort_by(|a, b| a.threshold.total_cmp(&b.threshold));
    let mut best = points[0];
    for p in &points[1..] {
        if objective(p) > objective(best) {
            best = p;
        }
    }
    Ok(best.threshold)
}

/// Input row for corpus classification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommentTokens {
    pub comment_id: String,
    pub video_id: String,
    pub tokens: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRecord {
    pub comment_id: String,
    pub video_id: String,
    pub scores: [f64; 5],
    pub labels: LabelVector,
    pub inappropriate: bool,
}

pub const PREDICTION_COLUMNS: [&str; 13] = [
    "comment_id",
    "video_id",
    "score_toxic",
    "score_obscene",
    "score_insult",
    "score_threat",
    "score_identity_hate",
    "flag_toxic",
    "flag_obscene",
    "flag_insult",
    "flag_threat",
    "flag_identity_hate",
    "inappropriate",
];

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ClassifySummary {
    pub total: usize,
    pub category_counts: BTreeMap<Category, usize>,
    pub inappropriate: usize,
}

impl ClassifySummary {
    pub fn add(&mut self, r: &PredictionRecord) {
        self.total += 1;
        for c in Category::ALL {
            *self.category_counts.entry(c).or_default() += usize::from(r.labels.get(c));
        }
        self.inappropriate += usize::from(r.inappropriate);
    }

    pub fn fraction(&self, c: Category) -> f64 {
        if self.total == 0 {
            return 0.0;
        }
        self.category_counts.get(&c).copied().unwrap_or(0) as f64 / self.total as f64
    }
}

const CHUNK: usize = 4096;

/// Scores a comment stream in chunks (in parallel within a chunk) and writes
/// prediction rows in input order.
pub fn classify_corpus<T, I, W>(spec: &EnsembleSpec<T>, input: I, out: W) -> Result<ClassifySummary>
where
    T: Scalar,
    I: IntoIterator<Item = Result<CommentTokens>>,
    W: Write,
{
    let mut writer = csv::Writer::from_writer(out);
    writer.write_record(PREDICTION_COLUMNS)?;
    let mut summary = ClassifySummary::default();
    for c in Category::ALL {
        summary.category_counts.insert(c, 0);
    }
    let mut chunk = Vec::with_capacity(CHUNK);
    let mut input = input.into_iter();
    loop {
        chunk.clear();
        for item in input.by_ref().take(CHUNK) {
            chunk.push(item?);
        }
        if chunk.is_empty() {
            break;
        }
        let records: Vec<PredictionRecord> = chunk.par_iter().map(|c| spec.classify(c)).collect();
        for r in &records {
            write_prediction(&mut writer, r)?;
            summary.add(r);
        }
    }
    writer.flush().map_err(|e| Error::io("<predictions>", e))?;
    Ok(summary)
}

fn write_prediction<W: Write>(w: &mut csv::Writer<W>, r: &PredictionRecord) -> Result<()> {
    let mut row: Vec<String> = Vec::with_capacity(PREDICTION_COLUMNS.len());
    row.push(r.comment_id.clone());
    row.push(r.video_id.clone());
    row.extend(r.scores.iter().map(|s| format!("{s:.6}")));
    row.extend(r.labels.flags().iter().map(|&f| u8::from(f).to_string()));
    row.push(u8::from(r.inappropriate).to_string());
    w.write_record(&row)?;
    Ok(())
}

/// Streams prediction rows back from a CSV written by [`classify_corpus`].
pub fn read_predictions(path: &Path) -> Result<impl Iterator<Item = Result<PredictionRecord>>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::Reader::from_reader(std::io::BufReader::new(file));
    let headers = reader.headers()?.clone();
    if headers.iter().ne(PREDICTION_COLUMNS) {
        return Err(Error::Schema {
            path: path.to_owned(),
            missing: PREDICTION_COLUMNS.iter().map(|s| s.to_string()).collect(),
        });
    }
    let path = path.to_owned();
    Ok(reader.into_records().map(move |rec| {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let bad = |m: &str| Error::Parse {
            path: path.clone(),
            line,
            message: m.to_owned(),
        };
        let flag = |i: usize| match &rec[i] {
            "1" => Ok(true),
            "0" => Ok(false),
            _ => Err(bad("flag must be 0 or 1")),
        };
        let mut scores = [0.0; 5];
        for (k, s) in scores.iter_mut().enumerate() {
            *s = rec[2 + k].parse().map_err(|_| bad("bad score"))?;
        }
        let mut flags = [false; 5];
        for (k, f) in flags.iter_mut().enumerate() {
            *f = flag(7 + k)?;
        }
        Ok(PredictionRecord {
            comment_id: rec[0].to_owned(),
            video_id: rec[1].to_owned(),
            scores,
            labels: LabelVector::new(flags),
            inappropriate: flag(12)?,
        })
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scores(s: [f64; 5]) -> CategoryScores {
        CategoryScores {
            scores: s,
            oov_fraction: [0.0; 5],
        }
    }

    #[test]
    fn toxic_above_its_threshold() {
        let v = apply_thresholds(&scores([0.60, 0.1, 0.1, 0.1, 0.1]), &DEFAULT_THRESHOLDS);
        assert!(v.labels.get(Category::Toxic));
        assert!(v.inappropriate);
        assert_eq!(v.labels.flags().iter().filter(|&&f| f).count(), 1);
    }

    #[test]
    fn near_zero_scores_are_safe() {
        let v = apply_thresholds(&scores([f64::EPSILON; 5]), &DEFAULT_THRESHOLDS);
        assert!(v.safe());
        assert!(v.labels.safe());
    }

    #[test]
    fn boundary_score_is_flagged() {
        let v = apply_thresholds(&scores([0.52, 0.27, 0.0, 0.0, 0.0]), &DEFAULT_THRESHOLDS);
        assert!(v.labels.get(Category::Toxic) && v.labels.get(Category::Obscene));
        assert!(!v.labels.get(Category::Insult));
    }

    #[test]
    fn grid_is_exact_for_hundredths() {
        let g = threshold_grid(0.01).unwrap();
        assert_eq!(g.len(), 102);
        assert_eq!(g[52], 0.52);
        assert_eq!(g[14], 0.14);
        assert_eq!(g[100], 1.0);
        assert_eq!(g[101], 1.01);
        assert!(threshold_grid(0.0).is_err());
        assert_eq!(threshold_grid(0.3).unwrap().len(), 5);
    }

    #[test]
    fn sweep_endpoints() {
        let c = sweep_thresholds(&[0.0, 0.3, 0.9, 1.0], &[true, false, true, false], 0.01, None).unwrap();
        let first = c.points.first().unwrap();
        let last = c.points.last().unwrap();
        assert_eq!((first.threshold, first.tpr, first.tnr), (0.0, 1.0, 0.0));
        assert_eq!((last.tpr, last.tnr), (0.0, 1.0));
        assert!(sweep_thresholds(&[0.2], &[true], 0.01, None).is_err());
    }

    #[test]
    fn sweep_reports_detected_share() {
        let c = sweep_thresholds(&[0.2, 0.8], &[false, true], 0.5, Some(&[0.1, 0.6, 0.7, 0.9])).unwrap();
        let d: Vec<f64> = c.points.iter().map(|p| p.detected.unwrap()).collect();
        assert_eq!(d, vec![1.0, 0.75, 0.0, 0.0]);
    }

    fn curve(points: &[(f64, f64, f64)]) -> ThresholdCurve {
        ThresholdCurve {
            category: None,
            points: points
                .iter()
                .map(|&(threshold, tpr, tnr)| CurvePoint {
                    threshold,
                    tpr,
                    tnr,
                    detected: None,
                })
                .collect(),
        }
    }

    #[test]
    fn selection_policies() {
        let c = curve(&[(0.2, 0.9, 0.6), (0.5, 0.8, 0.8), (0.8, 0.6, 0.9)]);
        assert_eq!(select_threshold(&c, ThresholdPolicy::MaxMinRate).unwrap(), 0.5);
        assert_eq!(select_threshold(&c, ThresholdPolicy::Youden).unwrap(), 0.5);
        assert_eq!(select_threshold(&c, ThresholdPolicy::Fixed(0.520)).unwrap(), 0.520);
        let tie = curve(&[(0.3, 0.8, 0.8), (0.4, 0.8, 0.8)]);
        assert_eq!(select_threshold(&tie, ThresholdPolicy::MaxMinRate).unwrap(), 0.3);
        assert_eq!(select_threshold(&tie, ThresholdPolicy::Youden).unwrap(), 0.3);
        assert!(select_threshold(&curve(&[]), ThresholdPolicy::Youden).is_err());
    }

    #[test]
    fn policy_parsing() {
        assert_eq!("max_min_rate".parse::<ThresholdPolicy>().unwrap(), ThresholdPolicy::MaxMinRate);
        assert_eq!("fixed:0.52".parse::<ThresholdPolicy>().unwrap(), ThresholdPolicy::Fixed(0.52));
        assert!("fixed:2".parse::<ThresholdPolicy>().is_err());
        assert!("best".parse::<ThresholdPolicy>().is_err());
    }

    proptest! {
        #[test]
        fn verdict_is_or_of_flags(s in proptest::array::uniform5(0.0f64..1.0), t in proptest::array::uniform5(0.0f64..1.0)) {
            let v = apply_thresholds(&scores(s), &t);
            let any = (0..5).any(|i| s[i] >= t[i]);
            prop_assert_eq!(v.inappropriate, any);
            prop_assert_eq!(v.safe(), !any);
            prop_assert_eq!(v.labels.safe(), !any);
        }

        #[test]
        fn selected_threshold_lies_on_grid(
            data in proptest::collection::vec((0.0f64..1.0, any::<bool>()), 2..200),
            youden in any::<bool>(),
        ) {
            let (s, mut l): (Vec<f64>, Vec<bool>) = data.into_iter().unzip();
            l[0] = true;
            l[1] = false;
            let c = sweep_thresholds(&s, &l, 0.01, None).unwrap();
            let policy = if youden { ThresholdPolicy::Youden } else { ThresholdPolicy::MaxMinRate };
            let t = select_threshold(&c, policy).unwrap();
            prop_assert!(threshold_grid(0.01).unwrap().contains(&t));
        }
    }
}
