//! Seeded synthetic corpus with planted category vocabularies.
//!
//! Neutral text is drawn from the common English word list, so comments pass
//! the language filter. Each category owns a small vocabulary of made-up
//! tokens whose vectors cluster around a per-category centroid; a comment is
//! labeled positive for a category exactly when one of its words was planted.
//! Two tables are produced: a 300-dimensional `gensim` table and a
//! 50-dimensional `glove` table with independent geometry.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use chrono::{Duration, NaiveDate};
use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::corpus::{AgeGroup, Category, Comment, LabelVector, LabeledComment, VideoMeta};
use crate::embed::EmbeddingTable;
use crate::error::{Error, Result};
use crate::seed::{self, SeededRng};
use crate::text;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub seed: u64,
    /// Labeled base corpus size.
    pub comments: usize,
    /// Labeled in-domain corpus size, used for fine-tuning and calibration.
    pub domain_comments: usize,
    pub unlabeled_comments: usize,
    /// Per-category share of positives in the labeled corpora.
    pub prevalence: f64,
    /// Per-category share of planted comments in the unlabeled corpus.
    pub unlabeled_prevalence: f64,
    pub videos: usize,
    pub channels: usize,
    pub words_per_category: usize,
    pub gensim_dim: usize,
    pub glove_dim: usize,
    pub neutral_sigma: f64,
    pub category_sigma: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            comments: 10_000,
            domain_comments: 2_000,
            unlabeled_comments: 5_000,
            prevalence: 0.10,
            unlabeled_prevalence: 0.05,
            videos: 120,
            channels: 12,
            words_per_category: 25,
            gensim_dim: 300,
            glove_dim: 50,
            neutral_sigma: 0.5,
            category_sigma: 0.1,
        }
    }
}

pub struct SyntheticCorpus {
    pub base: Vec<LabeledComment>,
    pub domain: Vec<LabeledComment>,
    pub unlabeled: Vec<Comment>,
    pub videos: Vec<VideoMeta>,
    pub gensim: EmbeddingTable<f64>,
    pub glove: EmbeddingTable<f64>,
}

/// Planted tokens for `c`, e.g. `thr0`, `thr1`, ...
pub fn category_words(c: Category, n: usize) -> Vec<String> {
    let prefix = match c {
        Category::Toxic => "tox",
        Category::Obscene => "obs",
        Category::Insult => "ins",
        Category::Threat => "thr",
        Category::IdentityHate => "idh",
    };
    (0..n).map(|i| format!("{prefix}{i}")).collect()
}

fn neutral_words() -> Vec<&'static str> {
    let mut w: Vec<&str> = text::common_words().iter().copied().filter(|w| !w.contains('\'')).collect();
    w.sort_unstable();
    w
}

// Six decimals, so a table written as text reads back bit-identical.
fn round6(v: f64) -> f64 {
    (v * 1e6).round() / 1e6
}

fn table(name: &str, dim: usize, cfg: &SyntheticConfig, neutral: &[&str]) -> Result<EmbeddingTable<f64>> {
    let mut rng = seed::rng(seed::derive(cfg.seed, name));
    let noise = Normal::new(0.0, cfg.neutral_sigma).expect("positive sigma");
    let spread = Normal::new(0.0, cfg.category_sigma).expect("positive sigma");
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let mut entries: Vec<(String, Vec<f64>)> = neutral
        .iter()
        .map(|w| (w.to_string(), (0..dim).map(|_| round6(noise.sample(&mut rng))).collect()))
        .collect();
    for c in Category::ALL {
        let centroid: Vec<f64> = (0..dim).map(|_| unit.sample(&mut rng)).collect();
        for w in category_words(c, cfg.words_per_category) {
            let v = centroid.iter().map(|m| round6(m + spread.sample(&mut rng))).collect();
            entries.push((w, v));
        }
    }
    EmbeddingTable::from_entries(name, dim, entries)
}

struct TextGen<'a> {
    neutral: &'a [&'static str],
    planted: Vec<Vec<String>>,
}

impl TextGen<'_> {
    /// A comment with planted words for every flagged category and the
    /// occasional out-of-vocabulary token.
    fn comment(&self, labels: &LabelVector, rng: &mut SeededRng) -> String {
        let mut words: Vec<String> = (0..rng.random_range(6..=16))
            .map(|_| self.neutral.choose(rng).expect("non-empty").to_string())
            .collect();
        for c in Category::ALL {
            if labels.get(c) {
                for _ in 0..rng.random_range(1..=3) {
                    let w = self.planted[c.index()].choose(rng).expect("non-empty").clone();
                    let at = rng.random_range(0..=words.len());
                    words.insert(at, w);
                }
            }
        }
        if rng.random_bool(0.2) {
            let at = rng.random_range(0..=words.len());
            words.insert(at, format!("zq{}", rng.random_range(0..500)));
        }
        let mut s = words.join(" ");
        if rng.random_bool(0.3) {
            s.push('!');
        }
        s
    }

    fn labels(&self, prevalence: f64, rng: &mut SeededRng) -> LabelVector {
        LabelVector::new(std::array::from_fn(|_| rng.random_bool(prevalence)))
    }
}

fn date(rng: &mut SeededRng, from_year: i32, to_year: i32) -> NaiveDate {
    let start = NaiveDate::from_ymd_opt(from_year, 1, 1).expect("valid date");
    let end = NaiveDate::from_ymd_opt(to_year, 12, 31).expect("valid date");
    start + Duration::days(rng.random_range(0..=(end - start).num_days()))
}

pub fn generate(cfg: &SyntheticConfig) -> Result<SyntheticCorpus> {
    if !(0.0..=1.0).contains(&cfg.prevalence) || !(0.0..=1.0).contains(&cfg.unlabeled_prevalence) {
        return Err(Error::InvalidConfig("prevalence must lie in [0, 1]".into()));
    }
    if cfg.videos == 0 || cfg.channels == 0 || cfg.words_per_category == 0 {
        return Err(Error::InvalidConfig("videos, channels and words_per_category must be positive".into()));
    }
    let neutral = neutral_words();
    let gensim = table("gensim", cfg.gensim_dim, cfg, &neutral)?;
    let glove = table("glove", cfg.glove_dim, cfg, &neutral)?;
    let gen = TextGen {
        neutral: &neutral,
        planted: Category::ALL
            .iter()
            .map(|&c| category_words(c, cfg.words_per_category))
            .collect(),
    };

    let mut rng = seed::rng(seed::derive(cfg.seed, "videos"));
    let videos: Vec<VideoMeta> = (0..cfg.videos)
        .map(|i| {
            // later years carry more uploads
            let year = 2008 + (rng.random::<f64>().sqrt() * 12.0) as i32;
            let views = rng.random_range(1_000..5_000_000u64);
            VideoMeta {
                video_id: format!("vid{i:04}"),
                channel_name: format!("channel{:02}", i % cfg.channels),
                title: format!("video {i}"),
                published_at: Some(date(&mut rng, year, year)),
                view_count: views,
                like_count: views / rng.random_range(20..200),
                dislike_count: views / rng.random_range(500..5_000),
                comment_count: 0,
                age_group: AgeGroup::ALL[rng.random_range(0..AgeGroup::ALL.len())],
            }
        })
        .collect();

    let labeled = |n: usize, stream: &str, prefix: &str, video: &dyn Fn(usize) -> String| {
        let mut rng = seed::rng(seed::derive(cfg.seed, stream));
        (0..n)
            .map(|i| {
                let labels = gen.labels(cfg.prevalence, &mut rng);
                LabeledComment {
                    comment: Comment {
                        id: format!("{prefix}{i:06}"),
                        video_id: video(i),
                        text: gen.comment(&labels, &mut rng),
                        like_count: rng.random_range(0..50),
                        reply_count: rng.random_range(0..5),
                        published_at: None,
                    },
                    labels,
                }
            })
            .collect::<Vec<_>>()
    };
    let base = labeled(cfg.comments, "base", "b", &|_| "base".to_owned());
    let domain = labeled(cfg.domain_comments, "domain", "d", &|i| videos[i % videos.len()].video_id.clone());

    let mut rng = seed::rng(seed::derive(cfg.seed, "unlabeled"));
    let unlabeled = (0..cfg.unlabeled_comments)
        .map(|i| {
            let labels = gen.labels(cfg.unlabeled_prevalence, &mut rng);
            let v = &videos[rng.random_range(0..videos.len())];
            let published = v.published_at.expect("generated with a date") + Duration::days(rng.random_range(0..900));
            Comment {
                id: format!("u{i:07}"),
                video_id: v.video_id.clone(),
                text: gen.comment(&labels, &mut rng),
                like_count: rng.random_range(0..200),
                reply_count: rng.random_range(0..12),
                published_at: published.and_hms_opt(12, 0, 0),
            }
        })
        .collect::<Vec<_>>();

    Ok(SyntheticCorpus {
        base,
        domain,
        unlabeled,
        videos,
        gensim,
        glove,
    })
}

/// File locations written by [`SyntheticCorpus::write`].
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticPaths {
    pub base: PathBuf,
    pub domain: PathBuf,
    pub unlabeled: PathBuf,
    pub videos: PathBuf,
    pub gensim: PathBuf,
    pub glove: PathBuf,
}

impl SyntheticCorpus {
    /// Writes all corpora as CSV and both tables as text into `dir`.
    pub fn write(&self, dir: &Path) -> Result<SyntheticPaths> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let paths = SyntheticPaths {
            base: dir.join("base.csv"),
            domain: dir.join("domain.csv"),
            unlabeled: dir.join("unlabeled.csv"),
            videos: dir.join("videos.csv"),
            gensim: dir.join("gensim.txt"),
            glove: dir.join("glove.txt"),
        };
        write_labeled(&self.base, &paths.base)?;
        write_labeled(&self.domain, &paths.domain)?;
        write_unlabeled(&self.unlabeled, &paths.unlabeled)?;
        write_videos(&self.videos, &paths.videos)?;
        self.gensim.save(&paths.gensim)?;
        self.glove.save(&paths.glove)?;
        Ok(paths)
    }
}

fn csv_writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(BufWriter::new(f)))
}

fn finish(mut w: csv::Writer<BufWriter<File>>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_labeled(records: &[LabeledComment], path: &Path) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(crate::corpus::LABELED_COLUMNS)?;
    for r in records {
        let c = &r.comment;
        let mut row = vec![
            c.id.clone(),
            c.video_id.clone(),
            c.text.clone(),
            c.like_count.to_string(),
            c.reply_count.to_string(),
        ];
        row.extend(r.labels.flags().iter().map(|&f| u8::from(f).to_string()));
        w.write_record(&row)?;
    }
    finish(w, path)
}

pub fn write_unlabeled(comments: &[Comment], path: &Path) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["id", "video_id", "text", "like_count", "reply_count", "published_at"])?;
    for c in comments {
        w.write_record([
            c.id.clone(),
            c.video_id.clone(),
            c.text.clone(),
            c.like_count.to_string(),
            c.reply_count.to_string(),
            c.published_at
                .map(|t| t.format("%Y-%m-%dT%H:%M:%S").to_string())
                .unwrap_or_default(),
        ])?;
    }
    finish(w, path)
}

pub fn write_videos(videos: &[VideoMeta], path: &Path) -> Result<()> {
    let bins = crate::corpus::AgeBins::default();
    let mut w = csv_writer(path)?;
    w.write_record(crate::corpus::VIDEO_COLUMNS)?;
    for v in videos {
        w.write_record([
            v.video_id.clone(),
            v.channel_name.clone(),
            v.title.clone(),
            v.published_at.map(|d| d.to_string()).unwrap_or_default(),
            v.view_count.to_string(),
            v.like_count.to_string(),
            v.dislike_count.to_string(),
            v.comment_count.to_string(),
            bins.label(v.age_group),
        ])?;
    }
    finish(w, path)
}

/// Pipeline config matching the layout [`write_fixture`] produces. Epoch
/// counts are cut down so the whole pipeline runs in seconds.
pub const FIXTURE_TOML: &str = r#"seed = 5

[paths]
base_corpus = "data/base.csv"
domain_corpus = "data/domain.csv"
unlabeled = "data/unlabeled.csv"
videos = "data/videos.csv"

[embeddings.gensim]
path = "data/gensim.txt"

[embeddings.glove]
path = "data/glove.txt"

[training]
epochs = 3

[finetune]
epochs = 2

[calibration]
unlabeled_sample = 500
"#;

/// Small corpus sized for a quick full pipeline run.
pub fn fixture_config() -> SyntheticConfig {
    SyntheticConfig {
        comments: 1_500,
        domain_comments: 600,
        unlabeled_comments: 1_500,
        videos: 40,
        channels: 6,
        ..SyntheticConfig::default()
    }
}

/// Writes `data/` and `pipeline.toml` under `dir`; returns the config path.
pub fn write_fixture(dir: &Path, cfg: &SyntheticConfig) -> Result<PathBuf> {
    generate(cfg)?.write(&dir.join("data"))?;
    let path = dir.join("pipeline.toml");
    std::fs::write(&path, FIXTURE_TOML).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{load_labeled_comments, load_unlabeled_comments, load_video_metadata, AgeBins, Format};

    fn small() -> SyntheticConfig {
        SyntheticConfig {
            comments: 300,
            domain_comments: 100,
            unlabeled_comments: 200,
            videos: 10,
            channels: 3,
            ..SyntheticConfig::default()
        }
    }

    #[test]
    fn seeded_and_round_trips_through_files() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(a.base, b.base);
        assert_eq!(a.gensim, b.gensim);
        assert_eq!((a.gensim.dim(), a.glove.dim()), (300, 50));

        let dir = tempfile::tempdir().unwrap();
        let p = a.write(dir.path()).unwrap();
        let base = load_labeled_comments(&p.base, Format::Csv).unwrap();
        assert_eq!(base.records, a.base);
        let unl: Vec<Comment> = load_unlabeled_comments(&p.unlabeled, Format::Csv)
            .unwrap()
            .collect::<Result<_>>()
            .unwrap();
        assert_eq!(unl, a.unlabeled);
        let vids = load_video_metadata(&p.videos, Format::Csv, &AgeBins::default()).unwrap();
        assert_eq!(vids.len(), 10);
        assert_eq!(EmbeddingTable::<f64>::load(&p.glove, "glove").unwrap(), a.glove);
    }

    #[test]
    fn planted_words_match_labels_and_pass_language_filter() {
        let c = generate(&small()).unwrap();
        for r in &c.base {
            let doc = text::TokenizedDoc::from_text(&r.comment.id, &r.comment.text);
            assert!(!doc.is_dropped(), "{}", r.comment.text);
            for cat in Category::ALL {
                let planted = category_words(cat, 25);
                let has = doc.tokens.iter().any(|t| planted.contains(t));
                assert_eq!(has, r.labels.get(cat));
            }
        }
    }
}
