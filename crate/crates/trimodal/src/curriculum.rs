//! Curriculum construction for the web-supervised training stage: a keyword
//! frequency list over the clean captions, a per-item difficulty score for
//! web images, and a growing-pool schedule that admits easy items first.
//!
//! Difficulty is the frequency rank (1 = most frequent) of an item's tags in
//! the clean corpus: images tagged with common concepts are easy, images
//! tagged only with rare or unknown concepts are hard. The schedule
//! partitions the score distribution into per-epoch quantile ceilings; the
//! admissible pool grows monotonically and reaches the whole corpus in the
//! final epoch, so easy items stay available while hard ones phase in.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use crate::data_io::text::Lemmatizer;
use crate::data_io::{CaptionRecord, WebManifestEntry};
use crate::error::{Error, Result};

/// Keywords of the clean corpus ordered by descending frequency, ties broken
/// lexicographically. Contains at most `cap` canonical, non-stop-word forms.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeywordList {
    entries: Vec<(String, usize)>,
    cap: usize,
    ranks: BTreeMap<String, usize>,
}

impl KeywordList {
    /// (keyword, frequency) pairs in rank order (rank 1 first).
    pub fn entries(&self) -> &[(String, usize)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn cap(&self) -> usize {
        self.cap
    }

    /// 1-based frequency rank of a canonical keyword.
    pub fn rank(&self, canonical: &str) -> Option<usize> {
        self.ranks.get(canonical).copied()
    }

    /// Sentinel rank for keywords absent from the list: cap + 1, strictly
    /// harder than any listed keyword.
    pub fn unknown_rank(&self) -> usize {
        self.cap + 1
    }

    fn from_entries(entries: Vec<(String, usize)>, cap: usize) -> Self {
        let ranks = entries
            .iter()
            .enumerate()
            .map(|(i, (k, _))| (k.clone(), i + 1))
            .collect();
        KeywordList { entries, cap, ranks }
    }
}

/// Counts canonical keyword frequencies over the captions: tokens that are
/// stop-words (as surface or canonical form) are dropped, the rest are
/// canonicalized and counted, and the top `cap` survive, ordered by
/// descending frequency with lexicographic tie-break.
pub fn build_keyword_list(
    captions: &[CaptionRecord],
    stopwords: &BTreeSet<String>,
    lemmatizer: &Lemmatizer,
    cap: usize,
) -> Result<KeywordList> {
    if captions.is_empty() {
        return Err(Error::Config("keyword list needs at least one caption".into()));
    }
    if cap == 0 {
        return Err(Error::Config("keyword list cap must be positive".into()));
    }
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for rec in captions {
        for token in &rec.tokens {
            if stopwords.contains(token) {
                continue;
            }
            let canonical = lemmatizer.canonical(token);
            if stopwords.contains(&canonical) {
                continue;
            }
            *counts.entry(canonical).or_insert(0) += 1;
        }
    }
    if counts.is_empty() {
        return Err(Error::Config(
            "no keywords survive stop-word filtering".into(),
        ));
    }
    let mut entries: Vec<(String, usize)> = counts.into_iter().collect();
    entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    entries.truncate(cap);
    Ok(KeywordList::from_entries(entries, cap))
}

/// How an item's tag ranks combine into one difficulty score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DifficultyMode {
    /// Most permissive: one frequent tag makes the item easy.
    #[default]
    Min,
    /// Average rank over all tags.
    Mean,
}

impl std::str::FromStr for DifficultyMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "min" => Ok(DifficultyMode::Min),
            "mean" => Ok(DifficultyMode::Mean),
            other => Err(Error::Config(format!(
                "unknown difficulty mode '{other}' (expected 'min' or 'mean')"
            ))),
        }
    }
}

/// Difficulty of one web item: its tags are canonicalized and looked up in
/// the keyword list; absent tags contribute the sentinel rank cap + 1. The
/// ranks combine per `mode`. A tagless entry (excluded upstream by web
/// filtering, but tolerated here) scores the sentinel.
pub fn difficulty_score(
    entry: &WebManifestEntry,
    kw: &KeywordList,
    lemmatizer: &Lemmatizer,
    mode: DifficultyMode,
) -> f64 {
    let sentinel = kw.unknown_rank() as f64;
    let ranks: Vec<f64> = entry
        .tags
        .iter()
        .map(|t| {
            kw.rank(&lemmatizer.canonical(&t.surface))
                .map(|r| r as f64)
                .unwrap_or(sentinel)
        })
        .collect();
    if ranks.is_empty() {
        return sentinel;
    }
    match mode {
        DifficultyMode::Min => ranks.iter().copied().fold(f64::INFINITY, f64::min),
        DifficultyMode::Mean => ranks.iter().sum::<f64>() / ranks.len() as f64,
    }
}

/// One scheduled web item.
#[derive(Debug, Clone, PartialEq)]
pub struct ScheduledItem {
    pub item_id: String,
    pub score: f64,
    pub first_admissible_epoch: usize,
}

/// Growing-pool schedule over a scored corpus: items in ascending
/// (score, id) order plus one admissibility ceiling per epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct CurriculumSchedule {
    items: Vec<ScheduledItem>,
    ceilings: Vec<f64>,
}

impl CurriculumSchedule {
    pub fn epochs(&self) -> usize {
        self.ceilings.len()
    }

    /// Items in schedule order (ascending score, ties by id).
    pub fn items(&self) -> &[ScheduledItem] {
        &self.items
    }

    /// Admissibility ceiling of a 1-based epoch.
    pub fn ceiling(&self, epoch: usize) -> Result<f64> {
        if epoch == 0 || epoch > self.ceilings.len() {
            return Err(Error::Parameter(format!(
                "epoch {epoch} out of range 1..={}",
                self.ceilings.len()
            )));
        }
        Ok(self.ceilings[epoch - 1])
    }

    /// Ids admissible at a 1-based epoch: every item with score ≤ the
    /// epoch's ceiling, a prefix of the schedule order.
    pub fn pool(&self, epoch: usize) -> Result<&[ScheduledItem]> {
        let ceiling = self.ceiling(epoch)?;
        let end = self.items.partition_point(|it| it.score <= ceiling);
        Ok(&self.items[..end])
    }

    /// Rebuilds a schedule from stored items, e.g. the output of
    /// [`load_schedule_items`]. Items must already be sorted ascending by
    /// (score, item_id) with unique ids and finite scores. Ceilings and
    /// admission epochs are recomputed from the scores, so a stale stored
    /// `first_admissible_epoch` is corrected rather than trusted.
    pub fn from_items(items: Vec<ScheduledItem>, epochs: usize) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::Config("cannot schedule an empty item list".into()));
        }
        if epochs == 0 {
            return Err(Error::Parameter("schedule needs at least one epoch".into()));
        }
        let mut ids = BTreeSet::new();
        for it in &items {
            if !it.score.is_finite() {
                return Err(Error::Numeric(format!(
                    "difficulty score for item '{}' is not finite",
                    it.item_id
                )));
            }
            if !ids.insert(it.item_id.as_str()) {
                return Err(Error::Validation(format!(
                    "duplicate item id '{}' in schedule items",
                    it.item_id
                )));
            }
        }
        let sorted = items.windows(2).all(|w| {
            w[0].score < w[1].score
                || (w[0].score == w[1].score && w[0].item_id <= w[1].item_id)
        });
        if !sorted {
            return Err(Error::Validation(
                "schedule items must be sorted ascending by (score, item_id)".into(),
            ));
        }
        Ok(assemble_schedule(items, epochs))
    }
}

/// Builds the schedule: scores every entry, sorts ascending by (score, id),
/// and derives per-epoch quantile ceilings. Epoch e (1-based) admits the
/// first ceil(e·n/epochs) items of the sorted order plus any items tied with
/// the last of them, so pools grow monotonically and epoch `epochs` covers
/// the whole corpus.
pub fn build_schedule(
    corpus: &[WebManifestEntry],
    kw: &KeywordList,
    lemmatizer: &Lemmatizer,
    mode: DifficultyMode,
    epochs: usize,
) -> Result<CurriculumSchedule> {
    if corpus.is_empty() {
        return Err(Error::Config("cannot schedule an empty web corpus".into()));
    }
    if epochs == 0 {
        return Err(Error::Parameter("schedule needs at least one epoch".into()));
    }
    let mut ids = BTreeSet::new();
    for e in corpus {
        if !ids.insert(e.image_id.as_str()) {
            return Err(Error::Validation(format!(
                "duplicate web item id '{}' in schedule input",
                e.image_id
            )));
        }
    }

    let mut items: Vec<ScheduledItem> = corpus
        .iter()
        .map(|e| ScheduledItem {
            item_id: e.image_id.clone(),
            score: difficulty_score(e, kw, lemmatizer, mode),
            first_admissible_epoch: 0,
        })
        .collect();
    items.sort_by(|a, b| {
        a.score
            .partial_cmp(&b.score)
            .expect("difficulty scores are finite")
            .then_with(|| a.item_id.cmp(&b.item_id))
    });

    Ok(assemble_schedule(items, epochs))
}

// Quantile ceilings over items already sorted by (score, id): epoch e
// (1-based) admits the first ceil(e*n/epochs) items. Admission epochs are
// recomputed from the scores here, never trusted from the caller.
fn assemble_schedule(mut items: Vec<ScheduledItem>, epochs: usize) -> CurriculumSchedule {
    let n = items.len();
    let ceilings: Vec<f64> = (1..=epochs)
        .map(|e| {
            // ceil(e*n/epochs) in integers; e = epochs gives index n-1.
            let count = (e * n).div_ceil(epochs);
            items[count - 1].score
        })
        .collect();

    for item in &mut items {
        let first = ceilings
            .iter()
            .position(|&c| item.score <= c)
            .expect("final ceiling is the maximum score") + 1;
        item.first_admissible_epoch = first;
    }

    CurriculumSchedule { items, ceilings }
}

/// Writes a keyword list as `rank<TAB>keyword<TAB>frequency` lines.
pub fn save_keyword_list(kw: &KeywordList, path: &Path) -> Result<()> {
    use std::fmt::Write as _;
    let mut out = String::new();
    for (i, (keyword, freq)) in kw.entries().iter().enumerate() {
        writeln!(out, "{}\t{keyword}\t{freq}", i + 1).unwrap();
    }
    fs::write(path, out)?;
    Ok(())
}

/// Reads a keyword list saved by [`save_keyword_list`]. The cap is not part
/// of the line format, so the caller supplies it (it bounds the sentinel
/// rank for unknown keywords and must be ≥ the list length).
pub fn load_keyword_list(path: &Path, cap: usize) -> Result<KeywordList> {
    let label = path.display().to_string();
    let text = fs::read_to_string(path)?;
    let mut entries: Vec<(String, usize)> = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        let fields: Vec<&str> = line.split('\t').collect();
        let err = |msg: String| Error::Format {
            path: label.clone(),
            line: Some(lineno),
            msg,
        };
        if fields.len() != 3 {
            return Err(err("expected 'rank<TAB>keyword<TAB>frequency'".into()));
        }
        let rank: usize = fields[0]
            .parse()
            .map_err(|_| err(format!("bad rank '{}'", fields[0])))?;
        if rank != lineno {
            return Err(err(format!("rank {rank} out of sequence, expected {lineno}")));
        }
        let freq: usize = fields[2]
            .parse()
            .map_err(|_| err(format!("bad frequency '{}'", fields[2])))?;
        if fields[1].is_empty() {
            return Err(err("empty keyword".into()));
        }
        if let Some((prev_kw, prev_freq)) = entries.last() {
            let ordered = freq < *prev_freq || (freq == *prev_freq && fields[1] > prev_kw.as_str());
            if !ordered {
                return Err(err(format!(
                    "'{}' breaks descending-frequency lexicographic order",
                    fields[1]
                )));
            }
        }
        entries.push((fields[1].to_string(), freq));
    }
    if entries.is_empty() {
        return Err(Error::Empty(format!("keyword list {label} is empty")));
    }
    if entries.len() > cap {
        return Err(Error::Validation(format!(
            "keyword list has {} entries, above the cap {cap}",
            entries.len()
        )));
    }
    Ok(KeywordList::from_entries(entries, cap))
}

/// Writes a schedule as `item_id<TAB>score<TAB>first_admissible_epoch` lines
/// in schedule order.
pub fn save_schedule(schedule: &CurriculumSchedule, path: &Path) -> Result<()> {
    use std::fmt::Write as _;
    let mut out = String::new();
    for item in schedule.items() {
        writeln!(
            out,
            "{}\t{}\t{}",
            item.item_id, item.score, item.first_admissible_epoch
        )
        .unwrap();
    }
    fs::write(path, out)?;
    Ok(())
}

/// Reads the items of a schedule saved by [`save_schedule`].
pub fn load_schedule_items(path: &Path) -> Result<Vec<ScheduledItem>> {
    let label = path.display().to_string();
    let text = fs::read_to_string(path)?;
    let mut items = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let err = |msg: String| Error::Format {
            path: label.clone(),
            line: Some(idx + 1),
            msg,
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(err("expected 'item_id<TAB>score<TAB>first_epoch'".into()));
        }
        let score: f64 = fields[1]
            .parse()
            .map_err(|_| err(format!("bad score '{}'", fields[1])))?;
        if !score.is_finite() {
            return Err(err(format!("non-finite score '{}'", fields[1])));
        }
        let first: usize = fields[2]
            .parse()
            .map_err(|_| err(format!("bad epoch '{}'", fields[2])))?;
        items.push(ScheduledItem {
            item_id: fields[0].to_string(),
            score,
            first_admissible_epoch: first,
        });
    }
    if items.is_empty() {
        return Err(Error::Empty(format!("schedule file {label} is empty")));
    }
    Ok(items)
}
