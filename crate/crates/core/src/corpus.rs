//! Comment corpora, video metadata and labels.
//!
//! Labeled and unlabeled comments and video tables are read from CSV or JSONL.
//! Malformed rows are skipped and reported by line number; a file whose
//! malformed share exceeds 1% is rejected as a whole.

use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::{DateTime, NaiveDate, NaiveDateTime};
use csv::StringRecord;
use log::warn;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::seed;

/// The five age-inappropriate categories, in canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Toxic,
    Obscene,
    Insult,
    Threat,
    IdentityHate,
}

impl Category {
    pub const ALL: [Category; 5] = [
        Category::Toxic,
        Category::Obscene,
        Category::Insult,
        Category::Threat,
        Category::IdentityHate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Category::Toxic => "toxic",
            Category::Obscene => "obscene",
            Category::Insult => "insult",
            Category::Threat => "threat",
            Category::IdentityHate => "identity_hate",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Category {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Category::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown category {s:?}")))
    }
}

/// Five category flags. `safe` is always derived, never stored.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct LabelVector {
    flags: [bool; 5],
}

impl LabelVector {
    pub fn new(flags: [bool; 5]) -> Self {
        Self { flags }
    }

    pub fn get(&self, category: Category) -> bool {
        self.flags[category.index()]
    }

    pub fn set(&mut self, category: Category, value: bool) {
        self.flags[category.index()] = value;
    }

    pub fn flags(&self) -> [bool; 5] {
        self.flags
    }

    pub fn any(&self) -> bool {
        self.flags.iter().any(|&f| f)
    }

    pub fn safe(&self) -> bool {
        !self.any()
    }

    /// A subcategory is set while `toxic` is not.
    pub fn violates_hierarchy(&self) -> bool {
        !self.get(Category::Toxic) && self.flags[1..].iter().any(|&f| f)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comment {
    pub id: String,
    pub video_id: String,
    pub text: String,
    pub like_count: u64,
    pub reply_count: u64,
    pub published_at: Option<NaiveDateTime>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledComment {
    pub comment: Comment,
    pub labels: LabelVector,
}

/// Target audience of a video.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AgeGroup {
    G3_5,
    G6_8,
    G9_12,
    G13_17,
    G17Plus,
}

impl AgeGroup {
    pub const ALL: [AgeGroup; 5] = [
        AgeGroup::G3_5,
        AgeGroup::G6_8,
        AgeGroup::G9_12,
        AgeGroup::G13_17,
        AgeGroup::G17Plus,
    ];

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Lower age bounds of the five groups. The last group is open-ended.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<u32>", into = "Vec<u32>")]
pub struct AgeBins {
    lower: [u32; 5],
}

impl Default for AgeBins {
    fn default() -> Self {
        Self {
            lower: [3, 6, 9, 13, 18],
        }
    }
}

impl TryFrom<Vec<u32>> for AgeBins {
    type Error = Error;

    fn try_from(v: Vec<u32>) -> Result<Self> {
        let lower: [u32; 5] = v
            .try_into()
            .map_err(|v: Vec<u32>| Error::InvalidConfig(format!("expected 5 age bounds, got {}", v.len())))?;
        if lower.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidConfig(format!(
                "age bounds must be strictly increasing: {lower:?}"
            )));
        }
        Ok(Self { lower })
    }
}

impl From<AgeBins> for Vec<u32> {
    fn from(b: AgeBins) -> Self {
        b.lower.to_vec()
    }
}

impl AgeBins {
    /// Display token of a group, e.g. `3-5` or `17+`.
    pub fn label(&self, group: AgeGroup) -> String {
        let i = group.index();
        if i + 1 < self.lower.len() {
            format!("{}-{}", self.lower[i], self.lower[i + 1] - 1)
        } else {
            format!("{}+", self.lower[i] - 1)
        }
    }

    pub fn group_for_age(&self, age: u32) -> Option<AgeGroup> {
        if age < self.lower[0] {
            return None;
        }
        let i = self.lower.iter().rposition(|&lo| lo <= age)?;
        Some(AgeGroup::ALL[i])
    }

    /// Accepts a group label (`6-8`, `17+`) or a single age (`7`, `7+`).
    pub fn parse(&self, token: &str) -> Option<AgeGroup> {
        let token = token.trim();
        if let Some(g) = AgeGroup::ALL.into_iter().find(|&g| self.label(g) == token) {
            return Some(g);
        }
        let age = token.strip_suffix('+').unwrap_or(token);
        age.parse::<u32>().ok().and_then(|a| self.group_for_age(a))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoMeta {
    pub video_id: String,
    pub channel_name: String,
    pub title: String,
    pub published_at: Option<NaiveDate>,
    pub view_count: u64,
    pub like_count: u64,
    pub dislike_count: u64,
    pub comment_count: u64,
    pub age_group: AgeGroup,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Jsonl,
}

impl Format {
    /// `.jsonl`/`.json`/`.ndjson` are JSON lines; everything else is CSV.
    pub fn from_path(path: &Path) -> Format {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl" | "json" | "ndjson") => Format::Jsonl,
            _ => Format::Csv,
        }
    }
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Format::Csv),
            "jsonl" => Ok(Format::Jsonl),
            other => Err(Error::InvalidConfig(format!("unknown format {other:?}"))),
        }
    }
}

/// Per-file load diagnostics.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LoadReport {
    /// Data rows seen, well-formed or not.
    pub rows: usize,
    pub malformed: usize,
    /// First malformed line numbers (capped at [`LoadReport::MAX_LINES`]).
    pub malformed_lines: Vec<u64>,
    pub hierarchy_violations: usize,
    pub warnings: Vec<String>,
}

impl LoadReport {
    pub const MAX_LINES: usize = 100;

    fn malformed_row(&mut self, path: &Path, line: u64, msg: &str) {
        self.malformed += 1;
        if self.malformed_lines.len() < Self::MAX_LINES {
            self.malformed_lines.push(line);
        }
        warn!("{}:{line}: skipping malformed row: {msg}", path.display());
    }

    fn warn(&mut self, msg: String) {
        warn!("{msg}");
        self.warnings.push(msg);
    }

    /// More than 1% of rows malformed.
    pub fn exceeds_malformed_limit(&self) -> bool {
        self.malformed * 100 > self.rows
    }

    fn check(&self, path: &Path) -> Result<()> {
        if self.exceeds_malformed_limit() {
            return Err(Error::TooManyMalformed {
                path: path.to_owned(),
                malformed: self.malformed,
                rows: self.rows,
                lines: self.malformed_lines.clone(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct LabeledDataset {
    pub records: Vec<LabeledComment>,
    pub source: String,
    pub report: LoadReport,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Positive count per category, in [`Category::ALL`] order.
    pub fn positive_counts(&self) -> [usize; 5] {
        let mut out = [0; 5];
        for r in &self.records {
            for c in Category::ALL {
                out[c.index()] += usize::from(r.labels.get(c));
            }
        }
        out
    }
}

pub const LABELED_COLUMNS: [&str; 10] = [
    "id",
    "video_id",
    "text",
    "like_count",
    "reply_count",
    "toxic",
    "obscene",
    "insult",
    "threat",
    "identity_hate",
];

pub const UNLABELED_COLUMNS: [&str; 3] = ["id", "video_id", "text"];

pub const VIDEO_COLUMNS: [&str; 9] = [
    "video_id",
    "channel_name",
    "title",
    "published_at",
    "view_count",
    "like_count",
    "dislike_count",
    "comment_count",
    "age_group",
];

pub fn load_labeled_comments(path: &Path, format: Format) -> Result<LabeledDataset> {
    let mut rows = RowReader::open(path, format, &LABELED_COLUMNS)?;
    let mut report = LoadReport::default();
    let mut records: Vec<LabeledComment> = Vec::new();
    let mut ids: HashMap<String, usize> = HashMap::new();
    while let Some((line, row)) = rows.next_row() {
        report.rows += 1;
        let parsed = row.and_then(|r| {
            let comment = r.comment()?;
            let mut labels = LabelVector::default();
            for c in Category::ALL {
                labels.set(c, r.flag(c.name())?);
            }
            Ok(LabeledComment { comment, labels })
        });
        match parsed {
            Ok(rec) => match ids.get(&rec.comment.id) {
                // Re-exports repeat rows; the later one wins.
                Some(&i) => {
                    report.warn(format!(
                        "{}:{line}: duplicate id {:?}, keeping the later row",
                        path.display(),
                        rec.comment.id
                    ));
                    records[i] = rec;
                }
                None => {
                    ids.insert(rec.comment.id.clone(), records.len());
                    records.push(rec);
                }
            },
            Err(msg) => report.malformed_row(path, line, &msg),
        }
    }
    report.check(path)?;
    if records.is_empty() {
        return Err(Error::EmptyDataset {
            path: path.to_owned(),
        });
    }
    report.hierarchy_violations = records.iter().filter(|r| r.labels.violates_hierarchy()).count();
    if report.hierarchy_violations > 0 {
        report.warn(format!(
            "{}: {} rows have a subcategory set without toxic",
            path.display(),
            report.hierarchy_violations
        ));
    }
    let source = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(LabeledDataset {
        records,
        source,
        report,
    })
}

/// Streams unlabeled comments in file order.
///
/// Malformed rows are skipped. When the stream is exhausted and more than 1%
/// of rows were malformed, one final `Err` is yielded.
pub fn load_unlabeled_comments(path: &Path, format: Format) -> Result<CommentStream> {
    Ok(CommentStream {
        rows: RowReader::open(path, format, &UNLABELED_COLUMNS)?,
        report: LoadReport::default(),
        yielded: 0,
        finished: false,
    })
}

pub struct CommentStream {
    rows: RowReader,
    report: LoadReport,
    yielded: usize,
    finished: bool,
}

impl CommentStream {
    pub fn report(&self) -> &LoadReport {
        &self.report
    }

    /// Comments yielded so far.
    pub fn yielded(&self) -> usize {
        self.yielded
    }
}

impl Iterator for CommentStream {
    type Item = Result<Comment>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.finished {
            return None;
        }
        while let Some((line, row)) = self.rows.next_row() {
            self.report.rows += 1;
            match row.and_then(|r| r.comment()) {
                Ok(c) => {
                    self.yielded += 1;
                    return Some(Ok(c));
                }
                Err(msg) => self.report.malformed_row(&self.rows.path, line, &msg),
            }
        }
        self.finished = true;
        if self.report.rows == 0 {
            let msg = format!("{}: no comments", self.rows.path.display());
            self.report.warn(msg);
        }
        log::info!(
            "{}: streamed {} comments",
            self.rows.path.display(),
            self.yielded
        );
        self.report.check(&self.rows.path).err().map(Err)
    }
}

/// Video metadata keyed by video id.
#[derive(Debug, Clone, Default)]
pub struct VideoTable {
    pub videos: BTreeMap<String, VideoMeta>,
    pub report: LoadReport,
}

impl VideoTable {
    pub fn get(&self, video_id: &str) -> Option<&VideoMeta> {
        self.videos.get(video_id)
    }

    pub fn len(&self) -> usize {
        self.videos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.videos.is_empty()
    }
}

impl FromIterator<VideoMeta> for VideoTable {
    fn from_iter<I: IntoIterator<Item = VideoMeta>>(iter: I) -> Self {
        Self {
            videos: iter.into_iter().map(|v| (v.video_id.clone(), v)).collect(),
            report: LoadReport::default(),
        }
    }
}

pub fn load_video_metadata(path: &Path, format: Format, bins: &AgeBins) -> Result<VideoTable> {
    let mut rows = RowReader::open(path, format, &VIDEO_COLUMNS)?;
    let mut table = VideoTable::default();
    while let Some((line, row)) = rows.next_row() {
        table.report.rows += 1;
        let row = match row {
            Ok(r) => r,
            Err(msg) => {
                table.report.malformed_row(path, line, &msg);
                continue;
            }
        };
        let token = row.get("age_group").unwrap_or_default();
        let Some(age_group) = bins.parse(&token) else {
            table.report.warn(format!(
                "{}:{line}: rejecting video with unknown age group {token:?}",
                path.display()
            ));
            continue;
        };
        match row.video(age_group) {
            Ok(v) => {
                if let Some(old) = table.videos.insert(v.video_id.clone(), v) {
                    table.report.warn(format!(
                        "{}:{line}: duplicate video_id {:?}, keeping the later row",
                        path.display(),
                        old.video_id
                    ));
                }
            }
            Err(msg) => table.report.malformed_row(path, line, &msg),
        }
    }
    table.report.check(path)?;
    Ok(table)
}

/// Index form of [`split_dataset`]: a seeded permutation of `0..n` cut after
/// `round(fraction * n)` entries.
pub fn split_indices(n: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "split fraction must lie in (0, 1), got {fraction}"
        )));
    }
    if n == 0 {
        return Err(Error::EmptyInput("dataset to split"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng(seed));
    let cut = (fraction * n as f64).round() as usize;
    let second = order.split_off(cut);
    Ok((order, second))
}

/// Shuffles under `seed` and returns `(first, second)` where `first` holds
/// `round(fraction * N)` records.
pub fn split_dataset(
    ds: &LabeledDataset,
    fraction: f64,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset)> {
    let (first, second) = split_indices(ds.len(), fraction, seed)?;
    let part = |idx: &[usize], tag: &str| LabeledDataset {
        records: idx.iter().map(|&i| ds.records[i].clone()).collect(),
        source: format!("{}:{tag}", ds.source),
        report: LoadReport::default(),
    };
    let (a, b) = (part(&first, "a"), part(&second, "b"));
    log::info!(
        "split {} records -> {} (positives {:?}) / {} (positives {:?})",
        ds.len(),
        a.len(),
        a.positive_counts(),
        b.len(),
        b.positive_counts()
    );
    Ok((a, b))
}

/// Accepts RFC 3339, `YYYY-MM-DDTHH:MM:SS` or a bare date.
pub fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    let s = s.trim();
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return Some(dt.naive_utc());
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M:%S%.f"] {
        if let Ok(dt) = NaiveDateTime::parse_from_str(s, fmt) {
            return Some(dt);
        }
    }
    NaiveDate::parse_from_str(s, "%Y-%m-%d")
        .ok()
        .and_then(|d| d.and_hms_opt(0, 0, 0))
}

// ---------------------------------------------------------------------------
// Row reading shared by the CSV and JSONL paths.

enum Source {
    Csv {
        reader: csv::Reader<BufReader<File>>,
        columns: HashMap<String, usize>,
        record: StringRecord,
    },
    Jsonl {
        reader: BufReader<File>,
        line: u64,
        buf: Vec<u8>,
    },
}

struct RowReader {
    path: PathBuf,
    source: Source,
}

enum Row<'a> {
    Csv(&'a StringRecord, &'a HashMap<String, usize>),
    Json(serde_json::Map<String, Value>),
}

impl RowReader {
    fn open(path: &Path, format: Format, required: &[&str]) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let reader = BufReader::new(file);
        let source = match format {
            Format::Csv => {
                let mut reader = csv::ReaderBuilder::new().from_reader(reader);
                let headers = reader.headers()?.clone();
                let columns: HashMap<String, usize> = headers
                    .iter()
                    .enumerate()
                    .map(|(i, h)| (h.trim().to_owned(), i))
                    .collect();
                // A header-only or empty file has no schema to violate.
                if !headers.is_empty() {
                    let missing: Vec<String> = required
                        .iter()
                        .filter(|c| !columns.contains_key(**c))
                        .map(|c| c.to_string())
                        .collect();
                    if !missing.is_empty() {
                        return Err(Error::Schema {
                            path: path.to_owned(),
                            missing,
                        });
                    }
                }
                Source::Csv {
                    reader,
                    columns,
                    record: StringRecord::new(),
                }
            }
            Format::Jsonl => Source::Jsonl {
                reader,
                line: 0,
                buf: Vec::new(),
            },
        };
        Ok(Self {
            path: path.to_owned(),
            source,
        })
    }

    /// Next data row with its 1-based line number.
    fn next_row(&mut self) -> Option<(u64, std::result::Result<Row<'_>, String>)> {
        match &mut self.source {
            Source::Csv {
                reader,
                columns,
                record,
            } => match reader.read_record(record) {
                Ok(false) => None,
                Ok(true) => {
                    let line = record.position().map_or(0, |p| p.line());
                    Some((line, Ok(Row::Csv(record, columns))))
                }
                Err(e) => {
                    let line = e.position().map_or(0, |p| p.line());
                    Some((line, Err(e.to_string())))
                }
            },
            Source::Jsonl { reader, line, buf } => loop {
                buf.clear();
                match reader.read_until(b'\n', buf) {
                    Ok(0) => return None,
                    Ok(_) => {}
                    Err(e) => {
                        *line += 1;
                        return Some((*line, Err(e.to_string())));
                    }
                }
                *line += 1;
                if buf.iter().all(u8::is_ascii_whitespace) {
                    continue;
                }
                let parsed = match serde_json::from_slice::<Value>(buf) {
                    Ok(Value::Object(map)) => Ok(Row::Json(map)),
                    Ok(_) => Err("expected a JSON object".to_owned()),
                    Err(e) => Err(e.to_string()),
                };
                return Some((*line, parsed));
            },
        }
    }
}

impl Row<'_> {
    fn get(&self, key: &str) -> Option<Cow<'_, str>> {
        match self {
            Row::Csv(rec, cols) => cols.get(key).and_then(|&i| rec.get(i)).map(Cow::Borrowed),
            Row::Json(map) => match map.get(key)? {
                Value::Null => None,
                Value::String(s) => Some(Cow::Borrowed(s.as_str())),
                other => Some(Cow::Owned(other.to_string())),
            },
        }
    }

    fn required(&self, key: &str) -> std::result::Result<String, String> {
        match self.get(key) {
            Some(v) => Ok(v.into_owned()),
            None => Err(format!("missing field {key:?}")),
        }
    }

    fn non_empty(&self, key: &str) -> std::result::Result<String, String> {
        let v = self.required(key)?;
        if v.trim().is_empty() {
            return Err(format!("empty {key}"));
        }
        Ok(v)
    }

    /// Missing or empty counts read as zero; negatives are rejected.
    fn count(&self, key: &str) -> std::result::Result<u64, String> {
        match self.get(key) {
            None => Ok(0),
            Some(v) if v.trim().is_empty() => Ok(0),
            Some(v) => v
                .trim()
                .parse::<u64>()
                .map_err(|_| format!("{key} must be a non-negative integer, got {v:?}")),
        }
    }

    fn flag(&self, key: &str) -> std::result::Result<bool, String> {
        match self.get(key).as_deref().map(str::trim) {
            Some("1" | "true") => Ok(true),
            Some("0" | "false") => Ok(false),
            Some(other) => Err(format!("{key} must be 0 or 1, got {other:?}")),
            None => Err(format!("missing field {key:?}")),
        }
    }

    fn comment(&self) -> std::result::Result<Comment, String> {
        let published_at = match self.get("published_at") {
            Some(s) if !s.trim().is_empty() => Some(
                parse_timestamp(&s).ok_or_else(|| format!("unparseable published_at {s:?}"))?,
            ),
            _ => None,
        };
        Ok(Comment {
            id: self.non_empty("id")?,
            video_id: self.required("video_id")?,
            text: self.required("text")?,
            like_count: self.count("like_count")?,
            reply_count: self.count("reply_count")?,
            published_at,
        })
    }

    fn video(&self, age_group: AgeGroup) -> std::result::Result<VideoMeta, String> {
        let published_at = match self.get("published_at") {
            Some(s) if !s.trim().is_empty() => Some(
                parse_timestamp(&s)
                    .map(|dt| dt.date())
                    .ok_or_else(|| format!("unparseable published_at {s:?}"))?,
            ),
            _ => None,
        };
        Ok(VideoMeta {
            video_id: self.non_empty("video_id")?,
            channel_name: self.required("channel_name")?,
            title: self.get("title").unwrap_or_default().into_owned(),
            published_at,
            view_count: self.count("view_count")?,
            like_count: self.count("like_count")?,
            dislike_count: self.count("dislike_count")?,
            comment_count: self.count("comment_count")?,
            age_group,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;
    use std::io::Write;

    fn write(dir: &tempfile::TempDir, name: &str, body: &str) -> PathBuf {
        let p = dir.path().join(name);
        File::create(&p).unwrap().write_all(body.as_bytes()).unwrap();
        p
    }

    const HEADER: &str = "id,video_id,text,like_count,reply_count,toxic,obscene,insult,threat,identity_hate\n";

    #[test]
    fn all_false_row_is_safe() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            &dir,
            "a.jsonl",
            r#"{"id":"a","video_id":"v","text":"hi","toxic":0,"obscene":0,"insult":0,"threat":0,"identity_hate":0}"#,
        );
        let ds = load_labeled_comments(&p, Format::Jsonl).unwrap();
        assert_eq!(ds.len(), 1);
        assert!(ds.records[0].labels.safe());
        assert_eq!(ds.records[0].comment.like_count, 0);
        assert_eq!(ds.source, "a");
    }

    #[test]
    fn subcategory_without_toxic_is_a_warning() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            &dir,
            "a.csv",
            &format!("{HEADER}a,v,hi,1,0,0,1,0,0,0\nb,v,yo,0,0,1,1,0,0,0\n"),
        );
        let ds = load_labeled_comments(&p, Format::Csv).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.report.hierarchy_violations, 1);
        assert!(!ds.records[0].labels.safe());
        assert_eq!(ds.report.warnings.len(), 1);
    }

    #[test]
    fn one_malformed_row_in_six_aborts_with_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let mut body = HEADER.to_owned();
        for i in 0..6 {
            if i == 3 {
                body.push_str("d,v,bad,1,0,2,0,0,0,0\n");
            } else {
                body.push_str(&format!("r{i},v,ok,1,0,0,0,0,0,0\n"));
            }
        }
        let p = write(&dir, "a.csv", &body);
        match load_labeled_comments(&p, Format::Csv) {
            Err(Error::TooManyMalformed {
                malformed,
                rows,
                lines,
                ..
            }) => {
                assert_eq!((malformed, rows), (1, 6));
                assert_eq!(lines, vec![5]);
            }
            other => panic!("expected malformed error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_share_of_exactly_one_percent_is_tolerated() {
        let dir = tempfile::tempdir().unwrap();
        let mut body = HEADER.to_owned();
        for i in 0..99 {
            body.push_str(&format!("r{i},v,ok,1,0,0,0,0,0,0\n"));
        }
        body.push_str("x,v,bad,-1,0,0,0,0,0,0\n");
        let p = write(&dir, "a.csv", &body);
        let ds = load_labeled_comments(&p, Format::Csv).unwrap();
        assert_eq!(ds.len(), 99);
        assert_eq!(ds.report.malformed, 1);
    }

    #[test]
    fn duplicate_labeled_ids_keep_the_later_row() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "a.csv", &format!("{HEADER}a,v,x,0,0,0,0,0,0,0\nb,v,z,0,0,0,0,0,0,0\na,v,y,0,0,0,1,0,0,0\n"));
        let ds = load_labeled_comments(&p, Format::Csv).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.records[0].comment.text, "y");
        assert_eq!(ds.report.malformed, 0);
        assert_eq!(ds.report.warnings.len(), 2);
        assert_eq!(ds.report.hierarchy_violations, 1);
    }

    #[test]
    fn missing_file_and_empty_dataset_are_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_labeled_comments(&dir.path().join("nope.csv"), Format::Csv),
            Err(Error::Io { .. })
        ));
        let p = write(&dir, "e.csv", HEADER);
        assert!(matches!(
            load_labeled_comments(&p, Format::Csv),
            Err(Error::EmptyDataset { .. })
        ));
        let p = write(&dir, "s.csv", "id,text\n1,x\n");
        assert!(matches!(
            load_labeled_comments(&p, Format::Csv),
            Err(Error::Schema { .. })
        ));
    }

    #[test]
    fn quoted_csv_text_with_commas_and_newlines() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            &dir,
            "a.csv",
            &format!("{HEADER}a,v,\"hello, \"\"world\"\"\nbye\",3,1,0,0,0,0,0\n"),
        );
        let ds = load_labeled_comments(&p, Format::Csv).unwrap();
        assert_eq!(ds.records[0].comment.text, "hello, \"world\"\nbye");
        assert_eq!(ds.records[0].comment.like_count, 3);
    }

    #[test]
    fn unlabeled_stream_preserves_order() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            &dir,
            "u.csv",
            "id,video_id,text,like_count,reply_count,published_at\n1,v,a,0,0,2019-01-02T03:04:05Z\n2,v,b,0,0,\n3,w,c,5,1,2018-06-01\n",
        );
        let mut stream = load_unlabeled_comments(&p, Format::Csv).unwrap();
        let ids: Vec<String> = stream.by_ref().map(|c| c.unwrap().id).collect();
        assert_eq!(ids, ["1", "2", "3"]);
        assert_eq!(stream.yielded(), 3);
    }

    #[test]
    fn empty_unlabeled_file_yields_nothing_with_warning() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "u.jsonl", "");
        let mut stream = load_unlabeled_comments(&p, Format::Jsonl).unwrap();
        assert!(stream.next().is_none());
        assert_eq!(stream.yielded(), 0);
        assert_eq!(stream.report().warnings.len(), 1);
    }

    #[test]
    fn unlabeled_stream_ends_with_error_when_too_malformed() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "u.jsonl", "{\"id\":\"1\",\"video_id\":\"v\",\"text\":\"a\"}\nnot json\n");
        let items: Vec<_> = load_unlabeled_comments(&p, Format::Jsonl).unwrap().collect();
        assert_eq!(items.len(), 2);
        assert!(items[0].is_ok());
        assert!(matches!(items[1], Err(Error::TooManyMalformed { .. })));
    }

    const VHEADER: &str = "video_id,channel_name,title,published_at,view_count,like_count,dislike_count,comment_count,age_group\n";

    #[test]
    fn video_age_groups_and_duplicates() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            &dir,
            "v.csv",
            &format!(
                "{VHEADER}a,ch,t,2010-01-01,10,1,0,3,3-5\nb,ch,t,2011-01-01,10,1,0,3,17+\nb,ch2,t,2012-01-01,20,1,0,3,6-8\nc,ch,t,2012-01-01,1,1,1,1,adult\n"
            ),
        );
        let t = load_video_metadata(&p, Format::Csv, &AgeBins::default()).unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t.get("a").unwrap().age_group, AgeGroup::G3_5);
        let b = t.get("b").unwrap();
        assert_eq!((b.channel_name.as_str(), b.age_group), ("ch2", AgeGroup::G6_8));
        assert_eq!(t.report.warnings.len(), 2);
        assert!(t.get("c").is_none());
    }

    #[test]
    fn age_bins() {
        let bins = AgeBins::default();
        let labels: Vec<String> = AgeGroup::ALL.iter().map(|&g| bins.label(g)).collect();
        assert_eq!(labels, ["3-5", "6-8", "9-12", "13-17", "17+"]);
        assert_eq!(bins.parse("7+"), Some(AgeGroup::G6_8));
        assert_eq!(bins.parse("17"), Some(AgeGroup::G13_17));
        assert_eq!(bins.parse("40"), Some(AgeGroup::G17Plus));
        assert_eq!(bins.parse("2"), None);
        assert_eq!(bins.parse("adult"), None);
        assert!(AgeBins::try_from(vec![3, 6, 6, 13, 18]).is_err());
        assert!(AgeBins::try_from(vec![3, 6]).is_err());
    }

    fn dataset(n: usize) -> LabeledDataset {
        LabeledDataset {
            records: (0..n)
                .map(|i| LabeledComment {
                    comment: Comment {
                        id: format!("c{i}"),
                        video_id: "v".into(),
                        text: String::new(),
                        like_count: 0,
                        reply_count: 0,
                        published_at: None,
                    },
                    labels: LabelVector::new([i % 3 == 0, false, false, false, false]),
                })
                .collect(),
            source: "t".into(),
            report: LoadReport::default(),
        }
    }

    #[test]
    fn split_is_disjoint_exhaustive_and_deterministic() {
        let ds = dataset(10);
        let (a, b) = split_dataset(&ds, 0.5, 7).unwrap();
        assert_eq!((a.len(), b.len()), (5, 5));
        let ids = |d: &LabeledDataset| -> HashSet<String> {
            d.records.iter().map(|r| r.comment.id.clone()).collect()
        };
        assert!(ids(&a).is_disjoint(&ids(&b)));
        assert_eq!(ids(&a).len() + ids(&b).len(), 10);
        let (a2, _) = split_dataset(&ds, 0.5, 7).unwrap();
        assert_eq!(a.records, a2.records);

        let (a, b) = split_dataset(&dataset(5958), 0.5, 1).unwrap();
        assert_eq!((a.len(), b.len()), (2979, 2979));

        assert!(split_dataset(&ds, 0.0, 1).is_err());
        assert!(split_dataset(&ds, 1.0, 1).is_err());
    }

    #[test]
    fn timestamps() {
        assert!(parse_timestamp("2019-03-01T10:00:00Z").is_some());
        assert!(parse_timestamp("2019-03-01T10:00:00+02:00").is_some());
        assert_eq!(
            parse_timestamp("2008-05-06").unwrap().date(),
            NaiveDate::from_ymd_opt(2008, 5, 6).unwrap()
        );
        assert!(parse_timestamp("yesterday").is_none());
    }
}
