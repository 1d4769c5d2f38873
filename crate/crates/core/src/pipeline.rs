//! The staged batch pipeline behind the command-line tool.
//!
//! Stages communicate only through files under the configured work, model
//! and report directories, so each can be rerun and inspected on its own:
//!
//! | stage        | reads                                | writes                                   |
//! |--------------|--------------------------------------|------------------------------------------|
//! | `preprocess` | corpora                              | `work/tokens/*.jsonl`, `work/drop_report.json` |
//! | `train`      | base tokens, tables                  | `models/base/<category>.model`           |
//! | `finetune`   | base models, domain tokens           | `models/finetuned/<category>.model`      |
//! | `calibrate`  | latest models, held-out tokens       | `models/calibrated/<category>.model`, `reports/curves/` |
//! | `evaluate`   | latest models, held-out tokens       | `reports/metrics.csv`                    |
//! | `classify`   | latest models, unlabeled tokens      | `reports/predictions.csv`                |
//! | `measure`    | predictions, videos, comments        | exposure reports, `reports/report.json`  |
//! | `report`     | everything above                     | `reports/summary.md`, `reports/report.json` |
//!
//! No stage overwrites its own inputs. All randomness derives from the single
//! configured seed.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::{info, warn};
use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{self, AgeBins, Category, Format, LabelVector};
use crate::embed::{DocEmbedder, DocVectorConfig, EmbeddingTable};
use crate::ensemble::{
    self, classify_corpus, default_binding, default_threshold, embed_rows, read_predictions, select_threshold,
    sweep_thresholds, CommentTokens, EnsembleSpec, ThresholdPolicy,
};
use crate::error::{Error, Result};
use crate::measure::{self, CommentCounts, Unresolved};
use crate::metrics::{binary_metrics, confusion_counts};
use crate::nn::{self, MlpModel, TrainConfig};
use crate::seed;
use crate::text::{self, DropReason, TokenizedDoc};

type Model = MlpModel<f64>;
type Table = EmbeddingTable<f64>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub seed: u64,
    /// Input format; inferred from each file's extension when absent.
    #[serde(default)]
    pub format: Option<Format>,
    /// Worker threads; 0 picks one per core.
    #[serde(default)]
    pub threads: usize,
    pub paths: PathsConfig,
    #[serde(default)]
    pub embeddings: BTreeMap<String, EmbeddingConfig>,
    #[serde(default)]
    pub training: TrainConfig,
    #[serde(default)]
    pub finetune: TrainConfig,
    #[serde(default)]
    pub categories: BTreeMap<Category, CategoryConfig>,
    #[serde(default)]
    pub calibration: CalibrationConfig,
    #[serde(default)]
    pub measure: MeasureConfig,
    #[serde(default)]
    pub age_groups: AgeBins,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    /// Labeled corpus for base training.
    pub base_corpus: PathBuf,
    /// Labeled in-domain corpus, split into fine-tuning and held-out halves.
    /// Without it the base corpus is split instead and fine-tuning is off.
    #[serde(default)]
    pub domain_corpus: Option<PathBuf>,
    pub unlabeled: PathBuf,
    pub videos: PathBuf,
    #[serde(default = "default_work_dir")]
    pub work_dir: PathBuf,
    #[serde(default = "default_model_dir")]
    pub model_dir: PathBuf,
    #[serde(default = "default_report_dir")]
    pub report_dir: PathBuf,
}

fn default_work_dir() -> PathBuf {
    "work".into()
}
fn default_model_dir() -> PathBuf {
    "models".into()
}
fn default_report_dir() -> PathBuf {
    "reports".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingConfig {
    pub path: PathBuf,
}

/// Per-category overrides. A training block here replaces the global one.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CategoryConfig {
    pub embedding: Option<String>,
    pub doc_dim: Option<usize>,
    pub training: Option<TrainConfig>,
    pub finetune: Option<TrainConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationConfig {
    pub policy: ThresholdPolicy,
    pub grid_step: f64,
    /// Share of the split corpus used for fitting; the rest is held out.
    pub split_fraction: f64,
    /// Unlabeled comments scored to report the detected share per threshold.
    pub unlabeled_sample: usize,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            policy: ThresholdPolicy::MaxMinRate,
            grid_step: ensemble::DEFAULT_GRID_STEP,
            split_fraction: 0.5,
            unlabeled_sample: 10_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MeasureConfig {
    pub top_channels: usize,
    pub top_words: usize,
    pub unresolved: Unresolved,
}

impl Default for MeasureConfig {
    fn default() -> Self {
        Self {
            top_channels: 20,
            top_words: 25,
            unresolved: Unresolved::Exclude,
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Preprocess,
    Train,
    Finetune,
    Calibrate,
    Evaluate,
    Classify,
    Measure,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Preprocess,
        Stage::Train,
        Stage::Finetune,
        Stage::Calibrate,
        Stage::Evaluate,
        Stage::Classify,
        Stage::Measure,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Preprocess => "preprocess",
            Stage::Train => "train",
            Stage::Finetune => "finetune",
            Stage::Calibrate => "calibrate",
            Stage::Evaluate => "evaluate",
            Stage::Classify => "classify",
            Stage::Measure => "measure",
            Stage::Report => "report",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown stage {s:?}")))
    }
}

/// Command-line overrides applied on top of the file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub format: Option<Format>,
    pub threads: Option<usize>,
    /// Restrict per-model stages to one category.
    pub category: Option<Category>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ModelStage {
    Base,
    Finetuned,
    Calibrated,
}

impl ModelStage {
    fn dir(self) -> &'static str {
        match self {
            ModelStage::Base => "base",
            ModelStage::Finetuned => "finetuned",
            ModelStage::Calibrated => "calibrated",
        }
    }
}

/// One line of a token file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenRecord {
    pub id: String,
    pub video_id: String,
    pub tokens: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dropped_reason: Option<DropReason>,
    /// Category flags (0/1) for labeled corpora.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<[u8; 5]>,
}

impl TokenRecord {
    fn new(id: &str, video_id: &str, text: &str, labels: Option<LabelVector>) -> Self {
        let doc = TokenizedDoc::from_text(id, text);
        Self {
            id: doc.comment_id,
            video_id: video_id.to_owned(),
            tokens: doc.tokens,
            dropped_reason: doc.dropped_reason,
            labels: labels.map(|l| l.flags().map(u8::from)),
        }
    }

    fn label(&self, c: Category) -> bool {
        self.labels.is_some_and(|l| l[c.index()] == 1)
    }

    fn label_vector(&self) -> LabelVector {
        LabelVector::new(std::array::from_fn(|i| self.labels.is_some_and(|l| l[i] == 1)))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropCounts {
    pub rows: usize,
    pub kept: usize,
    pub non_english: usize,
    pub empty_after_clean: usize,
    pub malformed: usize,
    pub hierarchy_violations: usize,
}

impl DropCounts {
    fn add(&mut self, r: &TokenRecord) {
        match r.dropped_reason {
            None => self.kept += 1,
            Some(DropReason::NonEnglish) => self.non_english += 1,
            Some(DropReason::EmptyAfterClean) => self.empty_after_clean += 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rows: Option<usize>,
}

/// `report.json`: every artifact with its checksum, sorted, no timestamps.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Manifest {
    pub seed: u64,
    pub wordlist: &'static str,
    pub model_format: &'static str,
    pub inputs: Vec<FileEntry>,
    pub models: Vec<FileEntry>,
    pub outputs: Vec<FileEntry>,
}

/// Category name, threshold, predicted flags, true flags.
type MetricsRow = (String, Option<f64>, Vec<bool>, Vec<bool>);

pub const MANIFEST: &str = "report.json";
pub const SUMMARY: &str = "summary.md";
pub const PREDICTIONS: &str = "predictions.csv";
pub const METRICS: &str = "metrics.csv";

pub struct Pipeline {
    cfg: PipelineConfig,
    root: PathBuf,
    category: Option<Category>,
}

struct Splits {
    train: Vec<TokenRecord>,
    tune: Option<Vec<TokenRecord>>,
    held_out: Vec<TokenRecord>,
}

struct Lock(PathBuf);

impl Drop for Lock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

impl Pipeline {
    /// Loads a config file. Relative paths inside it resolve against the
    /// file's directory.
    pub fn from_file(path: &Path, overrides: &Overrides) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg = PipelineConfig::from_toml(&text)?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::new(cfg, root, overrides)
    }

    /// Applies overrides and validates every referenced input before any
    /// stage can run.
    pub fn new(mut cfg: PipelineConfig, root: PathBuf, overrides: &Overrides) -> Result<Self> {
        if let Some(s) = overrides.seed {
            cfg.seed = s;
        }
        if let Some(f) = overrides.format {
            cfg.format = Some(f);
        }
        if let Some(t) = overrides.threads {
            cfg.threads = t;
        }
        let p = Self {
            cfg,
            root,
            category: overrides.category,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        for (what, path) in self.inputs() {
            if !path.is_file() {
                return bad(format!("{what} not found: {}", path.display()));
            }
        }
        for c in Category::ALL {
            let (name, doc_dim) = self.binding_name(c);
            if !self.cfg.embeddings.contains_key(&name) {
                return bad(format!("{c} is bound to embedding {name:?}, which is not configured"));
            }
            if doc_dim == 0 {
                return bad(format!("{c}: doc_dim must be positive"));
            }
            self.train_config(c, Stage::Train).validate()?;
            self.train_config(c, Stage::Finetune).validate()?;
        }
        let cal = &self.cfg.calibration;
        ensemble::threshold_grid(cal.grid_step)?;
        if !(cal.split_fraction > 0.0 && cal.split_fraction < 1.0) {
            return bad(format!("split_fraction must lie in (0, 1), got {}", cal.split_fraction));
        }
        if self.cfg.measure.top_words == 0 {
            return bad("measure.top_words must be at least 1".into());
        }
        Ok(())
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_owned()
        } else {
            self.root.join(p)
        }
    }

    /// Every configured input file, labeled for diagnostics.
    fn inputs(&self) -> Vec<(String, PathBuf)> {
        let p = &self.cfg.paths;
        let mut v = vec![("base corpus".to_owned(), self.resolve(&p.base_corpus))];
        if let Some(d) = &p.domain_corpus {
            v.push(("domain corpus".into(), self.resolve(d)));
        }
        v.push(("unlabeled comments".into(), self.resolve(&p.unlabeled)));
        v.push(("video metadata".into(), self.resolve(&p.videos)));
        for (name, e) in &self.cfg.embeddings {
            v.push((format!("embedding table {name:?}"), self.resolve(&e.path)));
        }
        v
    }

    fn format_of(&self, p: &Path) -> Format {
        self.cfg.format.unwrap_or_else(|| Format::from_path(p))
    }

    fn work(&self, rel: &str) -> PathBuf {
        self.resolve(&self.cfg.paths.work_dir).join(rel)
    }

    fn reports(&self, rel: &str) -> PathBuf {
        self.resolve(&self.cfg.paths.report_dir).join(rel)
    }

    fn model_path(&self, stage: ModelStage, c: Category) -> PathBuf {
        self.resolve(&self.cfg.paths.model_dir)
            .join(stage.dir())
            .join(format!("{}.model", c.name()))
    }

    fn categories(&self) -> Vec<Category> {
        match self.category {
            Some(c) => vec![c],
            None => Category::ALL.to_vec(),
        }
    }

    fn binding_name(&self, c: Category) -> (String, usize) {
        let (name, dim) = default_binding(c);
        let o = self.cfg.categories.get(&c);
        (
            o.and_then(|o| o.embedding.clone()).unwrap_or_else(|| name.to_owned()),
            o.and_then(|o| o.doc_dim).unwrap_or(dim),
        )
    }

    fn train_config(&self, c: Category, stage: Stage) -> TrainConfig {
        let o = self.cfg.categories.get(&c);
        let mut t = match stage {
            Stage::Finetune => o.and_then(|o| o.finetune).unwrap_or(self.cfg.finetune),
            _ => o.and_then(|o| o.training).unwrap_or(self.cfg.training),
        };
        t.seed = seed::derive(self.cfg.seed, &format!("{stage}:{}", c.name()));
        t
    }

    fn load_tables<'a>(&self, names: impl IntoIterator<Item = &'a str>) -> Result<BTreeMap<String, Table>> {
        let mut out = BTreeMap::new();
        for name in names {
            if out.contains_key(name) {
                continue;
            }
            let e = self
                .cfg
                .embeddings
                .get(name)
                .ok_or_else(|| Error::MissingTable(name.to_owned()))?;
            let t = Table::load(&self.resolve(&e.path), name)?;
            info!("embedding {name}: {} tokens, dim {}", t.len(), t.dim());
            out.insert(name.to_owned(), t);
        }
        Ok(out)
    }

    fn doc_config(&self, c: Category, table: &Table) -> DocVectorConfig {
        let (name, doc_dim) = self.binding_name(c);
        DocVectorConfig {
            word_dim: table.dim(),
            doc_dim,
            projection_seed: seed::derive(self.cfg.seed, &format!("projection:{name}:{doc_dim}")),
        }
    }

    fn lock(&self) -> Result<Lock> {
        let dir = self.resolve(&self.cfg.paths.work_dir);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let path = dir.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Lock(path))
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked(path)),
            Err(e) => Err(Error::io(&path, e)),
        }
    }

    fn log_inputs(&self, stage: Stage, paths: &[PathBuf]) -> Result<()> {
        info!("{stage}: seed {}", self.cfg.seed);
        for p in paths {
            info!("{stage}: input {} sha256 {}", p.display(), sha256_file(p)?);
        }
        Ok(())
    }

    pub fn run(&self, stage: Stage) -> Result<()> {
        let _lock = self.lock()?;
        info!("stage {stage} starting");
        match stage {
            Stage::Preprocess => self.preprocess(),
            Stage::Train => self.train(),
            Stage::Finetune => self.finetune(),
            Stage::Calibrate => self.calibrate(),
            Stage::Evaluate => self.evaluate(),
            Stage::Classify => self.classify(),
            Stage::Measure => self.measure(),
            Stage::Report => self.report(),
        }?;
        info!("stage {stage} done");
        Ok(())
    }

    pub fn run_stages(&self, stages: &[Stage]) -> Result<()> {
        stages.iter().try_for_each(|&s| self.run(s))
    }

    // ---- preprocess ----

    fn preprocess(&self) -> Result<()> {
        let p = &self.cfg.paths;
        let mut used = vec![self.resolve(&p.base_corpus), self.resolve(&p.unlabeled)];
        used.extend(p.domain_corpus.as_ref().map(|d| self.resolve(d)));
        self.log_inputs(Stage::Preprocess, &used)?;
        let dir = self.work("tokens");
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut report = BTreeMap::new();

        let mut labeled = vec![("base", self.resolve(&p.base_corpus))];
        labeled.extend(p.domain_corpus.as_ref().map(|d| ("domain", self.resolve(d))));
        for (name, path) in labeled {
            let ds = corpus::load_labeled_comments(&path, self.format_of(&path))?;
            let records: Vec<TokenRecord> = ds
                .records
                .par_iter()
                .map(|r| TokenRecord::new(&r.comment.id, &r.comment.video_id, &r.comment.text, Some(r.labels)))
                .collect();
            let mut counts = DropCounts {
                rows: ds.report.rows,
                malformed: ds.report.malformed,
                hierarchy_violations: ds.report.hierarchy_violations,
                ..DropCounts::default()
            };
            records.iter().for_each(|r| counts.add(r));
            write_jsonl(&dir.join(format!("{name}.jsonl")), records.iter())?;
            info!("{name}: kept {} of {} comments", counts.kept, counts.rows);
            report.insert(name.to_owned(), counts);
        }

        let path = self.resolve(&p.unlabeled);
        let mut stream = corpus::load_unlabeled_comments(&path, self.format_of(&path))?;
        let out_path = dir.join("unlabeled.jsonl");
        let mut out = BufWriter::new(File::create(&out_path).map_err(|e| Error::io(&out_path, e))?);
        let mut counts = DropCounts::default();
        let mut chunk = Vec::with_capacity(8192);
        loop {
            chunk.clear();
            for c in stream.by_ref().take(8192) {
                chunk.push(c?);
            }
            if chunk.is_empty() {
                break;
            }
            let records: Vec<TokenRecord> = chunk
                .par_iter()
                .map(|c| TokenRecord::new(&c.id, &c.video_id, &c.text, None))
                .collect();
            for r in &records {
                counts.add(r);
                write_json_line(&mut out, r, &out_path)?;
            }
        }
        out.flush().map_err(|e| Error::io(&out_path, e))?;
        counts.rows = stream.report().rows;
        counts.malformed = stream.report().malformed;
        info!("unlabeled: kept {} of {} comments", counts.kept, counts.rows);
        report.insert("unlabeled".to_owned(), counts);
        write_json(&self.work("drop_report.json"), &report)
    }

    fn read_tokens(&self, name: &str) -> Result<Vec<TokenRecord>> {
        token_stream(&self.work(&format!("tokens/{name}.jsonl")))?.collect()
    }

    fn kept_tokens(&self, name: &str) -> Result<Vec<TokenRecord>> {
        Ok(self.read_tokens(name)?.into_iter().filter(|r| r.dropped_reason.is_none()).collect())
    }

    fn splits(&self) -> Result<Splits> {
        let cal = &self.cfg.calibration;
        let split = |records: Vec<TokenRecord>| -> Result<(Vec<TokenRecord>, Vec<TokenRecord>)> {
            let (a, b) = corpus::split_indices(records.len(), cal.split_fraction, seed::derive(self.cfg.seed, "split"))?;
            let pick = |idx: &[usize]| idx.iter().map(|&i| records[i].clone()).collect::<Vec<_>>();
            Ok((pick(&a), pick(&b)))
        };
        if self.cfg.paths.domain_corpus.is_some() {
            let (tune, held_out) = split(self.kept_tokens("domain")?)?;
            Ok(Splits {
                train: self.kept_tokens("base")?,
                tune: Some(tune),
                held_out,
            })
        } else {
            let (train, held_out) = split(self.kept_tokens("base")?)?;
            Ok(Splits {
                train,
                tune: None,
                held_out,
            })
        }
    }

    fn features(&self, c: Category, table: &Table, records: &[TokenRecord]) -> Result<(Array2<f64>, Vec<bool>)> {
        let emb = DocEmbedder::new(table, &self.doc_config(c, table))?;
        let docs: Vec<&[String]> = records.iter().map(|r| r.tokens.as_slice()).collect();
        let labels = records.iter().map(|r| r.label(c)).collect();
        Ok((embed_rows(&emb, &docs), labels))
    }

    fn bound_tables(&self) -> Result<BTreeMap<String, Table>> {
        let names: Vec<String> = self.categories().iter().map(|&c| self.binding_name(c).0).collect();
        self.load_tables(names.iter().map(String::as_str))
    }

    // ---- train / finetune ----

    fn train(&self) -> Result<()> {
        self.log_inputs(Stage::Train, &[self.work("tokens/base.jsonl")])?;
        let splits = self.splits()?;
        let tables = self.bound_tables()?;
        let dir = self.model_path(ModelStage::Base, Category::Toxic);
        let dir = dir.parent().expect("model path has a parent");
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let reports = self
            .categories()
            .into_par_iter()
            .map(|c| {
                let (name, _) = self.binding_name(c);
                let table = &tables[&name];
                let (x, y) = self.features(c, table, &splits.train)?;
                let dc = self.doc_config(c, table);
                let mut model = Model::standard(dc.doc_dim, seed::derive(self.cfg.seed, &format!("init:{}", c.name())))?;
                model.meta = nn::ModelMeta {
                    category: Some(c),
                    embedding: name,
                    word_dim: dc.word_dim,
                    projection_seed: dc.projection_seed,
                    threshold: None,
                };
                let cfg = self.train_config(c, Stage::Train);
                info!("train {c}: {} rows, seed {}", y.len(), cfg.seed);
                let report = nn::train(&mut model, x.view(), &y, &cfg)?;
                nn::save_model(&model, &self.model_path(ModelStage::Base, c))?;
                Ok((c, report))
            })
            .collect::<Result<BTreeMap<_, _>>>()?;
        self.write_train_logs(Stage::Train, &reports)
    }

    fn write_train_logs(&self, stage: Stage, reports: &BTreeMap<Category, nn::TrainReport>) -> Result<()> {
        let dir = self.work("logs");
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (c, r) in reports {
            info!(
                "{stage} {c}: final loss {:.6}, {} steps, params {}",
                r.epoch_losses.last().copied().unwrap_or(f64::NAN),
                r.steps,
                &r.checksum[..16]
            );
            write_json(&dir.join(format!("{stage}_{}.json", c.name())), r)?;
        }
        Ok(())
    }

    fn finetune(&self) -> Result<()> {
        if self.cfg.paths.domain_corpus.is_none() {
            return Err(Error::Pipeline("finetune needs paths.domain_corpus".into()));
        }
        self.log_inputs(Stage::Finetune, &[self.work("tokens/domain.jsonl")])?;
        let tune = self.splits()?.tune.expect("domain corpus configured");
        let tables = self.bound_tables()?;
        let dir = self.model_path(ModelStage::Finetuned, Category::Toxic);
        let dir = dir.parent().expect("model path has a parent");
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let reports = self
            .categories()
            .into_par_iter()
            .map(|c| {
                let mut model: Model = nn::load_model(&self.model_path(ModelStage::Base, c))?;
                let table = self.model_table(&tables, &model)?;
                let (x, y) = self.features(c, table, &tune)?;
                let cfg = self.train_config(c, Stage::Finetune);
                info!("finetune {c}: {} rows, seed {}", y.len(), cfg.seed);
                let report = nn::fine_tune(&mut model, x.view(), &y, &cfg)?;
                nn::save_model(&model, &self.model_path(ModelStage::Finetuned, c))?;
                Ok((c, report))
            })
            .collect::<Result<BTreeMap<_, _>>>()?;
        self.write_train_logs(Stage::Finetune, &reports)
    }

    fn model_table<'a>(&self, tables: &'a BTreeMap<String, Table>, model: &Model) -> Result<&'a Table> {
        tables
            .get(&model.meta.embedding)
            .ok_or_else(|| Error::MissingTable(model.meta.embedding.clone()))
    }

    /// The most refined model available among `stages`, in order.
    fn latest_model(&self, c: Category, stages: &[ModelStage]) -> Result<Model> {
        for &s in stages {
            let p = self.model_path(s, c);
            if p.is_file() {
                info!("{c}: using {}", p.display());
                return nn::load_model(&p);
            }
        }
        Err(Error::ModelNotFound(self.model_path(ModelStage::Base, c)))
    }

    fn scores(&self, model: &Model, tables: &BTreeMap<String, Table>, records: &[TokenRecord]) -> Result<Vec<f64>> {
        let table = self.model_table(tables, model)?;
        let cfg = DocVectorConfig {
            word_dim: model.meta.word_dim,
            doc_dim: model.input_dim(),
            projection_seed: model.meta.projection_seed,
        };
        let emb = DocEmbedder::new(table, &cfg)?;
        let docs: Vec<&[String]> = records.iter().map(|r| r.tokens.as_slice()).collect();
        Ok(model.predict(embed_rows(&emb, &docs).view())?.to_vec())
    }

    fn models_and_tables(&self, stages: &[ModelStage]) -> Result<(Vec<Model>, BTreeMap<String, Table>)> {
        let models = self
            .categories()
            .into_iter()
            .map(|c| self.latest_model(c, stages))
            .collect::<Result<Vec<_>>>()?;
        let tables = self.load_tables(models.iter().map(|m| m.meta.embedding.as_str()))?;
        Ok((models, tables))
    }

    // ---- calibrate / evaluate ----

    fn calibrate(&self) -> Result<()> {
        self.log_inputs(Stage::Calibrate, &[])?;
        let (models, tables) = self.models_and_tables(&[ModelStage::Finetuned, ModelStage::Base])?;
        let held_out = self.splits()?.held_out;
        let sample_path = self.work("tokens/unlabeled.jsonl");
        let sample: Vec<TokenRecord> = if sample_path.is_file() && self.cfg.calibration.unlabeled_sample > 0 {
            token_stream(&sample_path)?
                .filter(|r| r.as_ref().map_or(true, |r| r.dropped_reason.is_none()))
                .take(self.cfg.calibration.unlabeled_sample)
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        let curves = self.reports("curves");
        fs::create_dir_all(&curves).map_err(|e| Error::io(&curves, e))?;
        let dir = self.model_path(ModelStage::Calibrated, Category::Toxic);
        let dir = dir.parent().expect("model path has a parent");
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

        for mut model in models {
            let c = model.meta.category.ok_or_else(|| Error::ModelFormat("model without category".into()))?;
            let s = self.scores(&model, &tables, &held_out)?;
            let y: Vec<bool> = held_out.iter().map(|r| r.label(c)).collect();
            let u = if sample.is_empty() {
                None
            } else {
                Some(self.scores(&model, &tables, &sample)?)
            };
            let mut curve = sweep_thresholds(&s, &y, self.cfg.calibration.grid_step, u.as_deref())?;
            curve.category = Some(c);
            let t = select_threshold(&curve, self.cfg.calibration.policy)?;
            let at = curve.points.iter().find(|p| p.threshold == t);
            info!(
                "calibrate {c}: threshold {t} ({}), tpr {:?}, tnr {:?}",
                self.cfg.calibration.policy,
                at.map(|p| p.tpr),
                at.map(|p| p.tnr)
            );
            write_curve(&curves.join(format!("{}.csv", c.name())), &curve)?;
            model.meta.threshold = Some(t);
            nn::save_model(&model, &self.model_path(ModelStage::Calibrated, c))?;
        }
        Ok(())
    }

    fn evaluate(&self) -> Result<()> {
        self.log_inputs(Stage::Evaluate, &[])?;
        let (models, tables) =
            self.models_and_tables(&[ModelStage::Calibrated, ModelStage::Finetuned, ModelStage::Base])?;
        let held_out = self.splits()?.held_out;
        let mut rows: Vec<MetricsRow> = Vec::new();
        let mut any_flag = vec![false; held_out.len()];
        for model in &models {
            let c = model.meta.category.ok_or_else(|| Error::ModelFormat("model without category".into()))?;
            let t = model.meta.threshold.unwrap_or_else(|| default_threshold(c));
            let flags: Vec<bool> = self.scores(model, &tables, &held_out)?.iter().map(|&s| s >= t).collect();
            any_flag.iter_mut().zip(&flags).for_each(|(a, &f)| *a |= f);
            let labels = held_out.iter().map(|r| r.label(c)).collect();
            rows.push((c.name().to_owned(), Some(t), flags, labels));
        }
        if models.len() == Category::ALL.len() {
            let labels = held_out.iter().map(|r| r.label_vector().any()).collect();
            rows.push(("inappropriate".to_owned(), None, any_flag, labels));
        }
        let path = self.reports(METRICS);
        create_parent(&path)?;
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["category", "threshold", "tp", "fp", "tn", "fn", "precision", "recall", "tnr", "f1"])?;
        for (name, t, flags, labels) in rows {
            let c = confusion_counts(&flags, &labels)?;
            let m = binary_metrics(&c);
            info!(
                "evaluate {name}: precision {:.3} recall {:.3} tnr {:.3} f1 {:.3}",
                m.precision.value, m.recall.value, m.tnr.value, m.f1.value
            );
            w.write_record([
                name,
                t.map(|t| t.to_string()).unwrap_or_default(),
                c.tp.to_string(),
                c.fp.to_string(),
                c.tn.to_string(),
                c.fn_.to_string(),
                format!("{:.6}", m.precision.value),
                format!("{:.6}", m.recall.value),
                format!("{:.6}", m.tnr.value),
                format!("{:.6}", m.f1.value),
            ])?;
        }
        w.flush().map_err(|e| Error::io(&path, e))
    }

    // ---- classify / measure / report ----

    fn ensemble(&self) -> Result<EnsembleSpec<f64>> {
        if let Some(c) = self.category {
            warn!("--category {c} ignored: classification needs all five models");
        }
        let stages = [ModelStage::Calibrated, ModelStage::Finetuned, ModelStage::Base];
        let models = Category::ALL
            .into_iter()
            .map(|c| self.latest_model(c, &stages))
            .collect::<Result<Vec<_>>>()?;
        let tables = self.load_tables(models.iter().map(|m| m.meta.embedding.as_str()))?;
        EnsembleSpec::from_models(tables, models)
    }

    fn classify(&self) -> Result<()> {
        let input = self.work("tokens/unlabeled.jsonl");
        // Models first, so a missing model is reported before missing tokens.
        let spec = self.ensemble()?;
        self.log_inputs(Stage::Classify, std::slice::from_ref(&input))?;
        let stream = token_stream(&input)?.filter_map(|r| match r {
            Ok(r) if r.dropped_reason.is_some() => None,
            Ok(r) => Some(Ok(CommentTokens {
                comment_id: r.id,
                video_id: r.video_id,
                tokens: r.tokens,
            })),
            Err(e) => Some(Err(e)),
        });
        let path = self.reports(PREDICTIONS);
        create_parent(&path)?;
        let out = BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?);
        let summary = classify_corpus(&spec, stream, out)?;
        for c in Category::ALL {
            info!("classify {c}: {:.4} of {} comments flagged", summary.fraction(c), summary.total);
        }
        write_json(&self.reports("classify_summary.json"), &summary)
    }

    fn measure(&self) -> Result<()> {
        let pred_path = self.reports(PREDICTIONS);
        let videos_path = self.resolve(&self.cfg.paths.videos);
        let comments_path = self.resolve(&self.cfg.paths.unlabeled);
        self.log_inputs(Stage::Measure, &[pred_path.clone(), videos_path.clone(), comments_path.clone()])?;
        let predictions: Vec<_> = read_predictions(&pred_path)?.collect::<Result<_>>()?;
        let videos = corpus::load_video_metadata(&videos_path, self.format_of(&videos_path), &self.cfg.age_groups)?;

        let mut counts: HashMap<String, CommentCounts> = HashMap::new();
        let mut years = Vec::new();
        for c in corpus::load_unlabeled_comments(&comments_path, self.format_of(&comments_path))? {
            let c = c?;
            years.push(c.published_at.map(|t| t.date()));
            counts.insert(
                c.id,
                CommentCounts {
                    likes: c.like_count,
                    replies: c.reply_count,
                },
            );
        }

        let m = &self.cfg.measure;
        let write = |name: &str, f: &dyn Fn(BufWriter<File>) -> Result<usize>| -> Result<usize> {
            let path = self.reports(name);
            create_parent(&path)?;
            let n = f(BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?))?;
            info!("measure: {name} ({n} rows)");
            Ok(n)
        };
        let age = measure::exposure_by_age_group(&predictions, &videos, &self.cfg.age_groups, m.unresolved)?;
        write("exposure_by_age.csv", &|w| measure::write_age_exposure(&age, w))?;
        let (channels, _) = measure::exposure_by_channel(&predictions, &videos, Some(m.top_channels))?;
        write("exposure_by_channel.csv", &|w| measure::write_channel_exposure(&channels, w))?;
        let inter = measure::interaction_stats(&predictions, &counts, &videos)?;
        write("interaction_stats.csv", &|w| measure::write_interactions(&inter, w))?;

        let flagged: HashMap<&str, LabelVector> = predictions
            .iter()
            .filter(|p| p.inappropriate)
            .map(|p| (p.comment_id.as_str(), p.labels))
            .collect();
        let mut docs = Vec::new();
        for r in token_stream(&self.work("tokens/unlabeled.jsonl"))? {
            let r = r?;
            if let Some(l) = flagged.get(r.id.as_str()) {
                docs.push((*l, r.tokens));
            }
        }
        let stop = text::common_words();
        for c in Category::ALL {
            let top = measure::top_words(docs.iter().map(|(l, t)| (l, t.as_slice())), c, m.top_words, stop);
            write(&format!("top_words_{}.csv", c.name()), &|w| measure::write_top_words(&top, w))?;
        }
        let video_years = measure::temporal_distribution(videos.videos.values().map(|v| v.published_at));
        let comment_years = measure::temporal_distribution(years);
        write("temporal.csv", &|w| measure::write_temporal(&video_years, &comment_years, w))?;
        self.write_manifest()
    }

    fn report(&self) -> Result<()> {
        self.log_inputs(Stage::Report, &[])?;
        let mut s = String::new();
        s.push_str("# Pipeline summary\n\n");
        s.push_str(&format!("Seed: {}\n\n", self.cfg.seed));
        s.push_str("## Models\n\n| category | stage | embedding | threshold |\n|---|---|---|---|\n");
        for c in Category::ALL {
            let stages = [ModelStage::Calibrated, ModelStage::Finetuned, ModelStage::Base];
            match stages.iter().find(|&&st| self.model_path(st, c).is_file()) {
                Some(&st) => {
                    let m: Model = nn::load_model(&self.model_path(st, c))?;
                    let t = m.meta.threshold.unwrap_or_else(|| default_threshold(c));
                    s.push_str(&format!("| {c} | {} | {} | {t} |\n", st.dir(), m.meta.embedding));
                }
                None => s.push_str(&format!("| {c} | missing | | |\n")),
            }
        }
        let metrics = self.reports(METRICS);
        if metrics.is_file() {
            s.push_str("\n## Held-out metrics\n\n");
            s.push_str(&csv_as_table(&metrics)?);
        }
        let summary = self.reports("classify_summary.json");
        if summary.is_file() {
            let v: serde_json::Value =
                serde_json::from_slice(&fs::read(&summary).map_err(|e| Error::io(&summary, e))?)?;
            let total = v["total"].as_u64().unwrap_or(0);
            s.push_str(&format!("\n## Classification\n\n{total} comments scored.\n\n| category | flagged | share |\n|---|---|---|\n"));
            for c in Category::ALL {
                let n = v["category_counts"][c.name()].as_u64().unwrap_or(0);
                s.push_str(&format!("| {c} | {n} | {:.4} |\n", ratio(n, total)));
            }
            let n = v["inappropriate"].as_u64().unwrap_or(0);
            s.push_str(&format!("| any | {n} | {:.4} |\n", ratio(n, total)));
        }
        let age = self.reports("exposure_by_age.csv");
        if age.is_file() {
            s.push_str("\n## Exposure by age group\n\n");
            s.push_str(&csv_as_table(&age)?);
        }
        let path = self.reports(SUMMARY);
        create_parent(&path)?;
        fs::write(&path, s).map_err(|e| Error::io(&path, e))?;
        self.write_manifest()
    }

    /// Rebuilds `report.json` from what is on disk.
    pub fn write_manifest(&self) -> Result<()> {
        let report_dir = self.resolve(&self.cfg.paths.report_dir);
        let model_dir = self.resolve(&self.cfg.paths.model_dir);
        let inputs = self
            .inputs()
            .into_iter()
            .map(|(_, p)| file_entry(&p, &self.display_path(&p)))
            .collect::<Result<Vec<_>>>()?;
        let entries = |dir: &Path| -> Result<Vec<FileEntry>> {
            let mut files = Vec::new();
            collect_files(dir, &mut files)?;
            files.sort();
            files
                .iter()
                .filter(|f| f.file_name().is_some_and(|n| n != MANIFEST))
                .map(|f| {
                    let rel = f.strip_prefix(dir).unwrap_or(f);
                    file_entry(f, &rel.to_string_lossy().replace('\\', "/"))
                })
                .collect()
        };
        let manifest = Manifest {
            seed: self.cfg.seed,
            wordlist: text::WORDLIST_VERSION,
            model_format: nn::FORMAT_VERSION,
            inputs,
            models: entries(&model_dir)?,
            outputs: entries(&report_dir)?,
        };
        write_json(&report_dir.join(MANIFEST), &manifest)
    }

    fn display_path(&self, p: &Path) -> String {
        p.strip_prefix(&self.root).unwrap_or(p).to_string_lossy().replace('\\', "/")
    }
}

fn ratio(n: u64, d: u64) -> f64 {
    if d == 0 {
        0.0
    } else {
        n as f64 / d as f64
    }
}

fn csv_as_table(path: &Path) -> Result<String> {
    let mut r = csv::Reader::from_path(path)?;
    let h = r.headers()?.clone();
    let mut s = format!("| {} |\n|{}\n", h.iter().collect::<Vec<_>>().join(" | "), "---|".repeat(h.len()));
    for rec in r.records() {
        s.push_str(&format!("| {} |\n", rec?.iter().collect::<Vec<_>>().join(" | ")));
    }
    Ok(s)
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    if !dir.is_dir() {
        return Ok(());
    }
    for e in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = e.map_err(|e| Error::io(dir, e))?.path();
        if p.is_dir() {
            collect_files(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}

fn file_entry(path: &Path, display: &str) -> Result<FileEntry> {
    let rows = match path.extension().and_then(|e| e.to_str()) {
        Some("csv") => Some(count_lines(path)?.saturating_sub(1)),
        Some("jsonl") => Some(count_lines(path)?),
        _ => None,
    };
    Ok(FileEntry {
        path: display.to_owned(),
        sha256: sha256_file(path)?,
        rows,
    })
}

fn count_lines(path: &Path) -> Result<usize> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut n = 0;
    for line in BufReader::new(f).split(b'\n') {
        line.map_err(|e| Error::io(path, e))?;
        n += 1;
    }
    Ok(n)
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

fn create_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => fs::create_dir_all(d).map_err(|e| Error::io(d, e)),
        _ => Ok(()),
    }
}

fn write_json<S: Serialize + ?Sized>(path: &Path, value: &S) -> Result<()> {
    create_parent(path)?;
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

fn write_json_line<W: Write, S: Serialize>(w: &mut W, value: &S, path: &Path) -> Result<()> {
    serde_json::to_writer(&mut *w, value)?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))
}

fn write_jsonl<'a, I: Iterator<Item = &'a TokenRecord>>(path: &Path, records: I) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    for r in records {
        write_json_line(&mut w, r, path)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Streams a token file written by `preprocess`.
pub fn token_stream(path: &Path) -> Result<impl Iterator<Item = Result<TokenRecord>>> {
    let f = File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::Pipeline(format!(
            "{} not found; run the preprocess stage first",
            path.display()
        )),
        _ => Error::io(path, e),
    })?;
    let path = path.to_owned();
    Ok(BufReader::new(f).lines().enumerate().map(move |(i, line)| {
        let line = line.map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.clone(),
            line: i as u64 + 1,
            message: e.to_string(),
        })
    }))
}

fn write_curve(path: &Path, curve: &ensemble::ThresholdCurve) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["threshold", "tpr", "tnr", "detected"])?;
    for p in &curve.points {
        w.write_record([
            p.threshold.to_string(),
            p.tpr.to_string(),
            p.tnr.to_string(),
            p.detected.map(|d| d.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        seed = 3
        [paths]
        base_corpus = "base.csv"
        unlabeled = "u.csv"
        videos = "v.csv"
        [embeddings.gensim]
        path = "g.txt"
        [embeddings.glove]
        path = "w.txt"
    "#;

    fn touch(dir: &Path, names: &[&str]) {
        for n in names {
            fs::write(dir.join(n), "x").unwrap();
        }
    }

    #[test]
    fn config_defaults_and_overrides() {
        let cfg = PipelineConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(cfg.training, TrainConfig::default());
        assert_eq!(cfg.calibration.policy, ThresholdPolicy::MaxMinRate);
        assert_eq!(cfg.paths.model_dir, PathBuf::from("models"));
        let back = PipelineConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);

        let dir = tempfile::tempdir().unwrap();
        touch(dir.path(), &["base.csv", "u.csv", "v.csv", "g.txt", "w.txt"]);
        let o = Overrides {
            seed: Some(11),
            ..Overrides::default()
        };
        let p = Pipeline::new(cfg, dir.path().to_owned(), &o).unwrap();
        assert_eq!(p.config().seed, 11);
        assert_eq!(p.binding_name(Category::Threat), ("glove".to_owned(), 100));
        assert_ne!(
            p.train_config(Category::Toxic, Stage::Train).seed,
            p.train_config(Category::Insult, Stage::Train).seed
        );
    }

    #[test]
    fn missing_inputs_and_bad_values_rejected_up_front() {
        let dir = tempfile::tempdir().unwrap();
        touch(dir.path(), &["base.csv", "u.csv", "v.csv", "g.txt"]);
        let cfg = PipelineConfig::from_toml(MINIMAL).unwrap();
        let err = Pipeline::new(cfg.clone(), dir.path().to_owned(), &Overrides::default()).err().unwrap();
        assert!(err.to_string().contains("w.txt"), "{err}");

        touch(dir.path(), &["w.txt"]);
        let mut bad = cfg.clone();
        bad.calibration.grid_step = 0.0;
        assert!(Pipeline::new(bad, dir.path().to_owned(), &Overrides::default()).is_err());
        let mut bad = cfg;
        bad.categories.insert(
            Category::Threat,
            CategoryConfig {
                embedding: Some("fasttext".into()),
                ..CategoryConfig::default()
            },
        );
        assert!(Pipeline::new(bad, dir.path().to_owned(), &Overrides::default()).is_err());
        assert!(PipelineConfig::from_toml("seed = 1\nbogus = 2\n[paths]\n").is_err());
    }

    #[test]
    fn lock_file_guards_work_dir() {
        let dir = tempfile::tempdir().unwrap();
        touch(dir.path(), &["base.csv", "u.csv", "v.csv", "g.txt", "w.txt"]);
        let cfg = PipelineConfig::from_toml(MINIMAL).unwrap();
        let p = Pipeline::new(cfg, dir.path().to_owned(), &Overrides::default()).unwrap();
        let held = p.lock().unwrap();
        assert!(matches!(p.lock(), Err(Error::Locked(_))));
        drop(held);
        assert!(p.lock().is_ok());
    }

    #[test]
    fn stage_names_round_trip() {
        for s in Stage::ALL {
            assert_eq!(s.name().parse::<Stage>().unwrap(), s);
        }
        assert!("deploy".parse::<Stage>().is_err());
    }
}
