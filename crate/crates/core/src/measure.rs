//! Exposure analytics: classified comments joined with video metadata.
//!
//! Every aggregate is an integer reduction (counts and sums) built from
//! partial accumulators, so results do not depend on row order or on how
//! rayon splits the work. Means are formed once, after the merge.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::Write;

use chrono::Datelike;
use rayon::prelude::*;
use serde::Serialize;

use crate::corpus::{AgeBins, AgeGroup, Category, LabelVector, VideoTable};
use crate::ensemble::PredictionRecord;
use crate::error::{Error, Result};
use crate::metrics::Rate;

/// What to do with predictions whose video is missing from the metadata.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Unresolved {
    #[default]
    Exclude,
    /// Keep them under an explicit `unknown` group.
    UnknownGroup,
}

pub const UNKNOWN_GROUP: &str = "unknown";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
struct Tally {
    total: usize,
    counts: [usize; 5],
    inappropriate: usize,
}

impl Tally {
    fn add(&mut self, labels: &LabelVector, inappropriate: bool) {
        self.total += 1;
        for (c, f) in self.counts.iter_mut().zip(labels.flags()) {
            *c += usize::from(f);
        }
        self.inappropriate += usize::from(inappropriate);
    }

    fn merge(&mut self, o: &Tally) {
        self.total += o.total;
        for (a, b) in self.counts.iter_mut().zip(o.counts) {
            *a += b;
        }
        self.inappropriate += o.inappropriate;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AgeGroupExposure {
    /// `None` is the unknown group.
    pub group: Option<AgeGroup>,
    pub label: String,
    pub total: usize,
    pub counts: [usize; 5],
    pub inappropriate: usize,
}

impl AgeGroupExposure {
    pub fn count(&self, c: Category) -> usize {
        self.counts[c.index()]
    }

    /// Share of the group's comments flagged for `c`.
    pub fn percentage(&self, c: Category) -> f64 {
        ratio(self.counts[c.index()], self.total)
    }

    pub fn inappropriate_percentage(&self) -> f64 {
        ratio(self.inappropriate, self.total)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExposureByAgeGroup {
    /// Groups with at least one comment, in age order; unknown last.
    pub groups: Vec<AgeGroupExposure>,
    /// Predictions whose video could not be resolved.
    pub unresolved: usize,
}

fn ratio(n: usize, d: usize) -> f64 {
    if d == 0 {
        0.0
    } else {
        n as f64 / d as f64
    }
}

pub fn exposure_by_age_group(
    predictions: &[PredictionRecord],
    videos: &VideoTable,
    bins: &AgeBins,
    policy: Unresolved,
) -> Result<ExposureByAgeGroup> {
    // slot 5 holds the unknown group
    let (tallies, unresolved) = predictions
        .par_iter()
        .fold(
            || ([Tally::default(); 6], 0usize),
            |(mut t, mut u), p| {
                match videos.get(&p.video_id) {
                    Some(v) => t[v.age_group.index()].add(&p.labels, p.inappropriate),
                    None => {
                        u += 1;
                        if policy == Unresolved::UnknownGroup {
                            t[5].add(&p.labels, p.inappropriate);
                        }
                    }
                }
                (t, u)
            },
        )
        .reduce(
            || ([Tally::default(); 6], 0),
            |(mut a, ua), (b, ub)| {
                for (x, y) in a.iter_mut().zip(&b) {
                    x.merge(y);
                }
                (a, ua + ub)
            },
        );
    if unresolved > 0 {
        log::warn!("{unresolved} predictions reference unknown videos ({policy:?})");
    }
    let groups: Vec<AgeGroupExposure> = tallies
        .iter()
        .enumerate()
        .filter(|(_, t)| t.total > 0)
        .map(|(i, t)| {
            let group = AgeGroup::ALL.get(i).copied();
            AgeGroupExposure {
                group,
                label: group.map_or_else(|| UNKNOWN_GROUP.to_owned(), |g| bins.label(g)),
                total: t.total,
                counts: t.counts,
                inappropriate: t.inappropriate,
            }
        })
        .collect();
    if groups.is_empty() {
        return Err(Error::EmptyInput("predictions joined with video metadata"));
    }
    Ok(ExposureByAgeGroup { groups, unresolved })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChannelExposureRow {
    pub channel_name: String,
    /// Videos that contribute at least one comment.
    pub video_count: usize,
    pub comment_count: usize,
    pub safe: usize,
    pub counts: [usize; 5],
    pub inappropriate: usize,
    pub unsafe_per_video: f64,
    pub unsafe_percent: f64,
}

#[derive(Default)]
struct ChannelAcc {
    videos: HashSet<String>,
    tally: Tally,
}

/// Channels sorted by comment count (descending, then by name), truncated
/// to `top_k` when given.
pub fn exposure_by_channel(
    predictions: &[PredictionRecord],
    videos: &VideoTable,
    top_k: Option<usize>,
) -> Result<(Vec<ChannelExposureRow>, usize)> {
    type Acc = (HashMap<String, ChannelAcc>, usize);
    let (acc, unresolved): Acc = predictions
        .par_iter()
        .fold(
            || (HashMap::new(), 0),
            |(mut m, mut u): Acc, p| {
                match videos.get(&p.video_id) {
                    Some(v) => {
                        let e: &mut ChannelAcc = m.entry(v.channel_name.clone()).or_default();
                        if !e.videos.contains(&p.video_id) {
                            e.videos.insert(p.video_id.clone());
                        }
                        e.tally.add(&p.labels, p.inappropriate);
                    }
                    None => u += 1,
                }
                (m, u)
            },
        )
        .reduce(
            || (HashMap::new(), 0),
            |(mut a, ua), (b, ub)| {
                for (k, v) in b {
                    let e = a.entry(k).or_default();
                    e.videos.extend(v.videos);
                    e.tally.merge(&v.tally);
                }
                (a, ua + ub)
            },
        );
    if acc.is_empty() {
        return Err(Error::EmptyInput("predictions joined with video metadata"));
    }
    let mut rows: Vec<ChannelExposureRow> = acc
        .into_iter()
        .map(|(name, a)| {
            let t = a.tally;
            ChannelExposureRow {
                channel_name: name,
                video_count: a.videos.len(),
                comment_count: t.total,
                safe: t.total - t.inappropriate,
                counts: t.counts,
                inappropriate: t.inappropriate,
                unsafe_per_video: ratio(t.inappropriate, a.videos.len()),
                unsafe_percent: ratio(t.inappropriate, t.total),
            }
        })
        .collect();
    rows.sort_by(|a, b| {
        b.comment_count
            .cmp(&a.comment_count)
            .then_with(|| a.channel_name.cmp(&b.channel_name))
    });
    if let Some(k) = top_k {
        rows.truncate(k);
    }
    Ok((rows, unresolved))
}

/// Like and reply counts of one comment.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CommentCounts {
    pub likes: u64,
    pub replies: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CategoryInteractions {
    pub category: Category,
    /// Distinct videos with at least one comment flagged for the category.
    pub videos: usize,
    pub mean_views: Rate,
    pub mean_video_likes: Rate,
    pub mean_video_dislikes: Rate,
    pub flagged_comments: usize,
    pub mean_comment_likes: Rate,
    pub mean_comment_replies: Rate,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InteractionStats {
    pub categories: Vec<CategoryInteractions>,
    /// Flagged predictions whose video or comment could not be resolved.
    pub unresolved: usize,
}

fn mean(sum: u128, n: usize) -> Rate {
    if n == 0 {
        Rate {
            value: 0.0,
            defined: false,
        }
    } else {
        Rate {
            value: sum as f64 / n as f64,
            defined: true,
        }
    }
}

#[derive(Default)]
struct InteractionAcc {
    videos: [HashSet<String>; 5],
    flagged: [usize; 5],
    likes: [u128; 5],
    replies: [u128; 5],
    unresolved: usize,
}

impl InteractionAcc {
    fn merge(mut self, o: InteractionAcc) -> Self {
        for i in 0..5 {
            self.videos[i].extend(o.videos[i].iter().cloned());
            self.flagged[i] += o.flagged[i];
            self.likes[i] += o.likes[i];
            self.replies[i] += o.replies[i];
        }
        self.unresolved += o.unresolved;
        self
    }
}

/// Video means range over distinct videos holding a flagged comment; comment
/// means range over the flagged comments themselves.
pub fn interaction_stats(
    predictions: &[PredictionRecord],
    comments: &HashMap<String, CommentCounts>,
    videos: &VideoTable,
) -> Result<InteractionStats> {
    let acc = predictions
        .par_iter()
        .fold(InteractionAcc::default, |mut a, p| {
            if !p.labels.any() {
                return a;
            }
            let (Some(_), Some(cc)) = (videos.get(&p.video_id), comments.get(&p.comment_id)) else {
                a.unresolved += 1;
                return a;
            };
            for c in Category::ALL {
                if p.labels.get(c) {
                    let i = c.index();
                    if !a.videos[i].contains(&p.video_id) {
                        a.videos[i].insert(p.video_id.clone());
                    }
                    a.flagged[i] += 1;
                    a.likes[i] += u128::from(cc.likes);
                    a.replies[i] += u128::from(cc.replies);
                }
            }
            a
        })
        .reduce(InteractionAcc::default, InteractionAcc::merge);
    if predictions.is_empty() {
        return Err(Error::EmptyInput("predictions"));
    }
    let categories = Category::ALL
        .iter()
        .map(|&c| {
            let i = c.index();
            let vids = &acc.videos[i];
            let sum = |f: fn(&crate::corpus::VideoMeta) -> u64| -> u128 {
                vids.iter()
                    .filter_map(|v| videos.get(v))
                    .map(|v| u128::from(f(v)))
                    .sum()
            };
            CategoryInteractions {
                category: c,
                videos: vids.len(),
                mean_views: mean(sum(|v| v.view_count), vids.len()),
                mean_video_likes: mean(sum(|v| v.like_count), vids.len()),
                mean_video_dislikes: mean(sum(|v| v.dislike_count), vids.len()),
                flagged_comments: acc.flagged[i],
                mean_comment_likes: mean(acc.likes[i], acc.flagged[i]),
                mean_comment_replies: mean(acc.replies[i], acc.flagged[i]),
            }
        })
        .collect();
    Ok(InteractionStats {
        categories,
        unresolved: acc.unresolved,
    })
}

/// Most frequent tokens across documents flagged for `category`, skipping
/// stoplist entries. Ties are ordered lexicographically.
pub fn top_words<'a, I>(docs: I, category: Category, k: usize, stoplist: &HashSet<&str>) -> Vec<(String, usize)>
where
    I: IntoIterator<Item = (&'a LabelVector, &'a [String])>,
{
    let mut freq: HashMap<&str, usize> = HashMap::new();
    for (labels, tokens) in docs {
        if !labels.get(category) {
            continue;
        }
        for t in tokens {
            if !stoplist.contains(t.as_str()) {
                *freq.entry(t.as_str()).or_default() += 1;
            }
        }
    }
    let mut ranked: Vec<(String, usize)> = freq.into_iter().map(|(w, n)| (w.to_owned(), n)).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(k);
    ranked
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct YearCounts {
    /// Contiguous from the first to the last observed year.
    pub counts: BTreeMap<i32, usize>,
    /// Rows without a timestamp.
    pub missing: usize,
}

pub fn temporal_distribution<D, I>(dates: I) -> YearCounts
where
    D: Datelike,
    I: IntoIterator<Item = Option<D>>,
{
    let mut out = YearCounts::default();
    for d in dates {
        match d {
            Some(d) => *out.counts.entry(d.year()).or_default() += 1,
            None => out.missing += 1,
        }
    }
    if let (Some(&lo), Some(&hi)) = (out.counts.keys().next(), out.counts.keys().next_back()) {
        for y in lo..=hi {
            out.counts.entry(y).or_default();
        }
    }
    out
}

// Report writers. Each returns the number of data rows written.

pub fn write_age_exposure<W: Write>(e: &ExposureByAgeGroup, out: W) -> Result<usize> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["age_group", "category", "count", "group_total", "percentage"])?;
    let mut n = 0;
    for g in &e.groups {
        let rows = Category::ALL
            .iter()
            .map(|&c| (c.name(), g.count(c), g.percentage(c)))
            .chain([("inappropriate", g.inappropriate, g.inappropriate_percentage())]);
        for (name, count, pct) in rows {
            w.write_record([
                g.label.clone(),
                name.to_owned(),
                count.to_string(),
                g.total.to_string(),
                pct.to_string(),
            ])?;
            n += 1;
        }
    }
    w.flush().map_err(|e| Error::io("<exposure_by_age>", e))?;
    Ok(n)
}

pub fn write_channel_exposure<W: Write>(rows: &[ChannelExposureRow], out: W) -> Result<usize> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["channel_name", "video_count", "comment_count", "safe"];
    header.extend(Category::ALL.iter().map(|c| c.name()));
    header.extend(["inappropriate", "unsafe_per_video", "unsafe_percent"]);
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![
            r.channel_name.clone(),
            r.video_count.to_string(),
            r.comment_count.to_string(),
            r.safe.to_string(),
        ];
        rec.extend(r.counts.iter().map(|c| c.to_string()));
        rec.extend([
            r.inappropriate.to_string(),
            r.unsafe_per_video.to_string(),
            r.unsafe_percent.to_string(),
        ]);
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io("<exposure_by_channel>", e))?;
    Ok(rows.len())
}

pub fn write_interactions<W: Write>(s: &InteractionStats, out: W) -> Result<usize> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "category",
        "videos",
        "mean_views",
        "mean_video_likes",
        "mean_video_dislikes",
        "video_means_defined",
        "flagged_comments",
        "mean_comment_likes",
        "mean_comment_replies",
        "comment_means_defined",
    ])?;
    for c in &s.categories {
        w.write_record([
            c.category.name().to_owned(),
            c.videos.to_string(),
            c.mean_views.value.to_string(),
            c.mean_video_likes.value.to_string(),
            c.mean_video_dislikes.value.to_string(),
            u8::from(c.mean_views.defined).to_string(),
            c.flagged_comments.to_string(),
            c.mean_comment_likes.value.to_string(),
            c.mean_comment_replies.value.to_string(),
            u8::from(c.mean_comment_likes.defined).to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<interaction_stats>", e))?;
    Ok(s.categories.len())
}

pub fn write_top_words<W: Write>(words: &[(String, usize)], out: W) -> Result<usize> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["rank", "token", "frequency"])?;
    for (i, (t, n)) in words.iter().enumerate() {
        w.write_record([(i + 1).to_string(), t.clone(), n.to_string()])?;
    }
    w.flush().map_err(|e| Error::io("<top_words>", e))?;
    Ok(words.len())
}

/// Video and comment year counts side by side over the union of years.
pub fn write_temporal<W: Write>(videos: &YearCounts, comments: &YearCounts, out: W) -> Result<usize> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["year", "videos", "comments"])?;
    let years = videos.counts.keys().chain(comments.counts.keys());
    let (lo, hi) = (years.clone().min(), years.max());
    let mut n = 0;
    if let (Some(&lo), Some(&hi)) = (lo, hi) {
        for y in lo..=hi {
            let v = videos.counts.get(&y).copied().unwrap_or(0);
            let c = comments.counts.get(&y).copied().unwrap_or(0);
            w.write_record([y.to_string(), v.to_string(), c.to_string()])?;
            n += 1;
        }
    }
    w.flush().map_err(|e| Error::io("<temporal>", e))?;
    Ok(n)
}
