//! Ingestion of external artifacts: image feature tables, caption files,
//! pretrained word vectors, web manifests, and dataset splits, plus the
//! web-corpus filtering rules and dummy-tag derivation.
//!
//! Every loader is strict: malformed input is rejected with a line-numbered
//! error, never repaired. File formats are plain UTF-8 text, LF-terminated:
//!
//! ```text
//! features:      header "count dim", then "id v1 .. vdim" per line
//! word vectors:  "token v1 .. vdim" per line (dim fixed by the first line)
//! captions:      "image_id<TAB>caption text[<TAB>pos1,pos2,..]"
//! web manifest:  "image_id<TAB>owner_id<TAB>query<TAB>tag1|tag2:en|.."
//! id lists:      one image id per line
//! ```

pub mod text;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::RealVector;
use text::{Lemmatizer, PosTag};

fn format_err(path: &str, line: usize, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_string(),
        line: Some(line),
        msg: msg.into(),
    }
}

fn parse_f64(piece: &str, path: &str, line: usize) -> Result<f64> {
    let x: f64 = piece
        .parse()
        .map_err(|_| format_err(path, line, format!("cannot parse number '{piece}'")))?;
    if !x.is_finite() {
        return Err(format_err(path, line, format!("non-finite value '{piece}'")));
    }
    Ok(x)
}

/// Map from image id to feature vector, all sharing one dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    dim: usize,
    map: BTreeMap<String, RealVector>,
}

impl FeatureTable {
    /// Builds a table from (id, vector) pairs; ids must be unique and every
    /// vector must share the first vector's dimension.
    pub fn from_rows<I>(rows: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, RealVector)>,
    {
        let mut map = BTreeMap::new();
        let mut dim = None;
        for (id, v) in rows {
            let d = *dim.get_or_insert(v.dim());
            if v.dim() != d {
                return Err(Error::Validation(format!(
                    "feature '{id}' has dim {}, expected {d}",
                    v.dim()
                )));
            }
            if map.insert(id.clone(), v).is_some() {
                return Err(Error::Validation(format!("duplicate feature id '{id}'")));
            }
        }
        match dim {
            Some(dim) => Ok(FeatureTable { dim, map }),
            None => Err(Error::Empty("feature table has no rows".into())),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&RealVector> {
        self.map.get(id)
    }

    /// Lookup that treats absence as referential breakage between artifacts.
    pub fn require(&self, id: &str) -> Result<&RealVector> {
        self.map
            .get(id)
            .ok_or_else(|| Error::Integrity(format!("no feature vector for image id '{id}'")))
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &RealVector)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }
}

/// Loads a feature table. Header `count dim`, then exactly `count` rows of
/// `id v1 .. vdim`.
pub fn load_features(path: &Path) -> Result<FeatureTable> {
    let label = path.display().to_string();
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();

    let (_, header) = lines
        .next()
        .ok_or_else(|| format_err(&label, 1, "missing 'count dim' header"))?;
    let mut pieces = header.split(' ');
    let count: usize = pieces
        .next()
        .and_then(|p| p.parse().ok())
        .ok_or_else(|| format_err(&label, 1, "header must be 'count dim'"))?;
    let dim: usize = pieces
        .next()
        .and_then(|p| p.parse().ok())
        .ok_or_else(|| format_err(&label, 1, "header must be 'count dim'"))?;
    if pieces.next().is_some() {
        return Err(format_err(&label, 1, "header must be exactly 'count dim'"));
    }
    if count == 0 || dim == 0 {
        return Err(format_err(&label, 1, "count and dim must be positive"));
    }

    let mut map = BTreeMap::new();
    for _ in 0..count {
        let (idx, line) = lines
            .next()
            .ok_or_else(|| format_err(&label, count + 1, "fewer rows than header count"))?;
        let lineno = idx + 1;
        let mut pieces = line.split(' ');
        let id = pieces
            .next()
            .filter(|id| !id.is_empty())
            .ok_or_else(|| format_err(&label, lineno, "missing image id"))?;
        let mut values = Vec::with_capacity(dim);
        for piece in pieces {
            values.push(parse_f64(piece, &label, lineno)?);
        }
        if values.len() != dim {
            return Err(format_err(
                &label,
                lineno,
                format!("feature '{id}' has {} values, expected {dim}", values.len()),
            ));
        }
        if map.insert(id.to_string(), RealVector::new(values)).is_some() {
            return Err(format_err(&label, lineno, format!("duplicate image id '{id}'")));
        }
    }
    if let Some((idx, line)) = lines.next() {
        return Err(format_err(
            &label,
            idx + 1,
            format!("unexpected content after {count} rows: '{line}'"),
        ));
    }
    Ok(FeatureTable { dim, map })
}

/// Writes a feature table in the same format `load_features` reads, rows in
/// sorted id order. A write→load cycle reproduces every value bit for bit.
pub fn save_features(table: &FeatureTable, path: &Path) -> Result<()> {
    use std::fmt::Write as _;
    let mut out = String::new();
    writeln!(out, "{} {}", table.len(), table.dim()).unwrap();
    for (id, v) in table.iter() {
        out.push_str(id);
        for x in v.as_slice() {
            write!(out, " {x}").unwrap();
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Pretrained word vectors: token → vector, one shared dimension.
/// `duplicate_count` records how many input lines were shadowed by a later
/// line for the same token (last occurrence wins).
#[derive(Debug, Clone, PartialEq)]
pub struct WordVectors {
    dim: usize,
    map: BTreeMap<String, RealVector>,
    pub duplicate_count: usize,
}

impl WordVectors {
    pub fn from_rows<I>(rows: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, RealVector)>,
    {
        let mut map = BTreeMap::new();
        let mut dim = None;
        let mut duplicate_count = 0;
        for (token, v) in rows {
            let d = *dim.get_or_insert(v.dim());
            if v.dim() != d {
                return Err(Error::Validation(format!(
                    "word vector '{token}' has dim {}, expected {d}",
                    v.dim()
                )));
            }
            if map.insert(token, v).is_some() {
                duplicate_count += 1;
            }
        }
        match dim {
            Some(dim) => Ok(WordVectors { dim, map, duplicate_count }),
            None => Err(Error::Empty("word-vector table has no rows".into())),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn get(&self, token: &str) -> Option<&RealVector> {
        self.map.get(token)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.map.contains_key(token)
    }

    pub fn tokens(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &RealVector)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Owned token set, the "is this word English" reference for filtering.
    pub fn vocab(&self) -> BTreeSet<String> {
        self.map.keys().cloned().collect()
    }

    /// The token→vector map in the shape model construction wants.
    pub fn as_map(&self) -> &BTreeMap<String, RealVector> {
        &self.map
    }
}

/// Loads word vectors from lines of `token v1 .. vdim`; the first line fixes
/// the dimension. Duplicate tokens are counted and the last one wins.
pub fn load_word_vectors(path: &Path) -> Result<WordVectors> {
    let label = path.display().to_string();
    let text = fs::read_to_string(path)?;
    let mut map = BTreeMap::new();
    let mut dim = None;
    let mut duplicate_count = 0;
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        let mut pieces = line.split(' ');
        let token = pieces
            .next()
            .filter(|t| !t.is_empty())
            .ok_or_else(|| format_err(&label, lineno, "missing token"))?;
        let mut values = Vec::new();
        for piece in pieces {
            values.push(parse_f64(piece, &label, lineno)?);
        }
        if values.is_empty() {
            return Err(format_err(&label, lineno, format!("token '{token}' has no values")));
        }
        let d = *dim.get_or_insert(values.len());
        if values.len() != d {
            return Err(format_err(
                &label,
                lineno,
                format!("token '{token}' has {} values, expected {d}", values.len()),
            ));
        }
        if map.insert(token.to_string(), RealVector::new(values)).is_some() {
            duplicate_count += 1;
        }
    }
    match dim {
        Some(dim) => Ok(WordVectors { dim, map, duplicate_count }),
        None => Err(Error::Empty(format!("word-vector file {label} is empty"))),
    }
}

/// Writes word vectors in the format `load_word_vectors` reads, sorted by
/// token.
pub fn save_word_vectors(vectors: &WordVectors, path: &Path) -> Result<()> {
    use std::fmt::Write as _;
    let mut out = String::new();
    for (token, v) in vectors.iter() {
        out.push_str(token);
        for x in v.as_slice() {
            write!(out, " {x}").unwrap();
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// One caption: an image id, its tokenized text, and optional per-token POS
/// labels. Several captions may share one image id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaptionRecord {
    pub image_id: String,
    pub tokens: Vec<String>,
    pub pos: Option<Vec<PosTag>>,
}

/// Loads captions from lines of `image_id<TAB>caption text` with an optional
/// third field `pos1,pos2,..` whose length must equal the token count.
pub fn load_captions(path: &Path) -> Result<Vec<CaptionRecord>> {
    let label = path.display().to_string();
    let text = fs::read_to_string(path)?;
    let mut records = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 2 || fields.len() > 3 {
            return Err(format_err(
                &label,
                lineno,
                "expected 'image_id<TAB>caption[<TAB>pos,..]'",
            ));
        }
        let image_id = fields[0];
        if image_id.is_empty() {
            return Err(format_err(&label, lineno, "empty image id"));
        }
        let tokens = text::tokenize(fields[1]);
        if tokens.is_empty() {
            return Err(format_err(
                &label,
                lineno,
                format!("caption for '{image_id}' has no tokens"),
            ));
        }
        let pos = match fields.get(2) {
            None => None,
            Some(spec) => {
                let tags: Vec<PosTag> = spec
                    .split(',')
                    .map(|p| p.parse::<PosTag>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|msg| format_err(&label, lineno, msg))?;
                if tags.len() != tokens.len() {
                    return Err(format_err(
                        &label,
                        lineno,
                        format!(
                            "{} POS labels for {} tokens",
                            tags.len(),
                            tokens.len()
                        ),
                    ));
                }
                Some(tags)
            }
        };
        records.push(CaptionRecord {
            image_id: image_id.to_string(),
            tokens,
            pos,
        });
    }
    if records.is_empty() {
        return Err(Error::Empty(format!("caption file {label} is empty")));
    }
    Ok(records)
}

/// Writes captions in the format `load_captions` reads. Tokens must survive
/// re-tokenization (lowercase, no separators inside a token) for the file to
/// round-trip.
pub fn save_captions(records: &[CaptionRecord], path: &Path) -> Result<()> {
    use std::fmt::Write as _;
    let mut out = String::new();
    for rec in records {
        out.push_str(&rec.image_id);
        out.push('\t');
        out.push_str(&rec.tokens.join(" "));
        if let Some(pos) = &rec.pos {
            let labels: Vec<String> = pos.iter().map(PosTag::to_string).collect();
            write!(out, "\t{}", labels.join(",")).unwrap();
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// One tag on a web image: lowercased surface form plus whether the manifest
/// explicitly marked it as English.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WebTag {
    pub surface: String,
    pub english_marked: bool,
}

/// One crawled web image: id, owner, the query keyword that retrieved it,
/// and its ordered tag list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WebManifestEntry {
    pub image_id: String,
    pub owner_id: String,
    pub query: String,
    pub tags: Vec<WebTag>,
}

/// Loads a web manifest from lines of
/// `image_id<TAB>owner_id<TAB>query<TAB>tag1|tag2:en|..`. Tag order is
/// preserved; surfaces are lowercased; a trailing `:en` marks a tag English.
pub fn load_web_manifest(path: &Path) -> Result<Vec<WebManifestEntry>> {
    let label = path.display().to_string();
    let text = fs::read_to_string(path)?;
    let mut entries = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(format_err(
                &label,
                lineno,
                "expected 'image_id<TAB>owner_id<TAB>query<TAB>tags'",
            ));
        }
        for (name, value) in [("image id", fields[0]), ("owner id", fields[1]), ("query", fields[2])]
        {
            if value.is_empty() {
                return Err(format_err(&label, lineno, format!("empty {name}")));
            }
        }
        let mut tags = Vec::new();
        if !fields[3].is_empty() {
            for raw in fields[3].split('|') {
                let (surface, english_marked) = match raw.strip_suffix(":en") {
                    Some(s) => (s, true),
                    None => (raw, false),
                };
                if surface.is_empty() {
                    return Err(format_err(&label, lineno, "empty tag"));
                }
                tags.push(WebTag {
                    surface: surface.to_lowercase(),
                    english_marked,
                });
            }
        }
        entries.push(WebManifestEntry {
            image_id: fields[0].to_string(),
            owner_id: fields[1].to_string(),
            query: fields[2].to_string(),
            tags,
        });
    }
    Ok(entries)
}

/// Writes a web manifest in the format `load_web_manifest` reads, in the
/// given entry order.
pub fn save_web_manifest(entries: &[WebManifestEntry], path: &Path) -> Result<()> {
    use std::fmt::Write as _;
    let mut out = String::new();
    for e in entries {
        let tags: Vec<String> = e
            .tags
            .iter()
            .map(|t| {
                if t.english_marked {
                    format!("{}:en", t.surface)
                } else {
                    t.surface.clone()
                }
            })
            .collect();
        writeln!(
            out,
            "{}\t{}\t{}\t{}",
            e.image_id,
            e.owner_id,
            e.query,
            tags.join("|")
        )
        .unwrap();
    }
    fs::write(path, out)?;
    Ok(())
}

/// Derives dummy tags from a caption: keep tokens labeled NOUN or VERB
/// (explicit labels when present, otherwise a lexicon lookup on the surface
/// form and then on its canonical form), canonicalize, and deduplicate
/// preserving first occurrence.
pub fn derive_dummy_tags(
    rec: &CaptionRecord,
    lexicon: &BTreeMap<String, PosTag>,
    lemmatizer: &Lemmatizer,
) -> Vec<String> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for (i, token) in rec.tokens.iter().enumerate() {
        let canonical = lemmatizer.canonical(token);
        let tag = match &rec.pos {
            Some(labels) => labels[i],
            None => *lexicon
                .get(token)
                .or_else(|| lexicon.get(&canonical))
                .unwrap_or(&PosTag::Other),
        };
        if matches!(tag, PosTag::Noun | PosTag::Verb) && seen.insert(canonical.clone()) {
            out.push(canonical);
        }
    }
    out
}

/// Caps for the web-corpus filter; the defaults are the pinned pipeline
/// values.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WebFilterCaps {
    /// Minimum count of English tags an entry must carry.
    pub min_english_tags: usize,
    /// Entries kept per query keyword, by ingestion order.
    pub per_query: usize,
    /// Entries kept per owner id, by ingestion order.
    pub per_owner: usize,
    /// Tag-prefix length whose canonicalized multiset is the duplicate key.
    pub dedup_prefix: usize,
}

impl Default for WebFilterCaps {
    fn default() -> Self {
        WebFilterCaps {
            min_english_tags: 2,
            per_query: 200,
            per_owner: 5,
            dedup_prefix: 5,
        }
    }
}

/// Per-rule rejection counts from one filter pass.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RejectionReport {
    pub input_count: usize,
    pub accepted_count: usize,
    pub too_few_english_tags: usize,
    pub over_query_cap: usize,
    pub over_owner_cap: usize,
    pub duplicate: usize,
}

impl fmt::Display for RejectionReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "input={}", self.input_count)?;
        writeln!(f, "rejected_too_few_english_tags={}", self.too_few_english_tags)?;
        writeln!(f, "rejected_over_query_cap={}", self.over_query_cap)?;
        writeln!(f, "rejected_over_owner_cap={}", self.over_owner_cap)?;
        writeln!(f, "rejected_duplicate={}", self.duplicate)?;
        write!(f, "accepted={}", self.accepted_count)
    }
}

/// A tag counts as English if the manifest marked it or the word-vector
/// vocabulary contains its surface form.
fn is_english(tag: &WebTag, english_vocab: &BTreeSet<String>) -> bool {
    tag.english_marked || english_vocab.contains(&tag.surface)
}

/// Canonicalized multiset of the first `prefix` tags, the duplicate key.
fn dedup_key(entry: &WebManifestEntry, lemmatizer: &Lemmatizer, prefix: usize) -> Vec<String> {
    let mut key: Vec<String> = entry
        .tags
        .iter()
        .take(prefix)
        .map(|t| lemmatizer.canonical(&t.surface))
        .collect();
    key.sort();
    key
}

/// Applies the four web-filtering rules in their pinned order:
///
/// 1. drop entries with fewer than `min_english_tags` English tags;
/// 2. per query keyword, keep the first `per_query` by ingestion order;
/// 3. per owner, keep the first `per_owner` by ingestion order;
/// 4. drop duplicates: a repeated image id or a repeated canonicalized
///    multiset of the first `dedup_prefix` tags (first occurrence wins).
///
/// The accepted list is a subsequence of the input and the pass is
/// idempotent: filtering an accepted list again changes nothing.
pub fn filter_web_corpus(
    entries: &[WebManifestEntry],
    english_vocab: &BTreeSet<String>,
    lemmatizer: &Lemmatizer,
    caps: &WebFilterCaps,
) -> (Vec<WebManifestEntry>, RejectionReport) {
    let mut report = RejectionReport {
        input_count: entries.len(),
        ..RejectionReport::default()
    };

    let mut per_query: BTreeMap<&str, usize> = BTreeMap::new();
    let mut per_owner: BTreeMap<&str, usize> = BTreeMap::new();
    let mut seen_ids: BTreeSet<&str> = BTreeSet::new();
    let mut seen_keys: BTreeSet<Vec<String>> = BTreeSet::new();
    let mut accepted = Vec::new();

    for entry in entries {
        let english = entry
            .tags
            .iter()
            .filter(|t| is_english(t, english_vocab))
            .count();
        if english < caps.min_english_tags {
            report.too_few_english_tags += 1;
            continue;
        }
        let q = per_query.entry(entry.query.as_str()).or_insert(0);
        if *q >= caps.per_query {
            report.over_query_cap += 1;
            continue;
        }
        *q += 1;
        let o = per_owner.entry(entry.owner_id.as_str()).or_insert(0);
        if *o >= caps.per_owner {
            report.over_owner_cap += 1;
            continue;
        }
        *o += 1;
        if !seen_ids.insert(entry.image_id.as_str())
            || !seen_keys.insert(dedup_key(entry, lemmatizer, caps.dedup_prefix))
        {
            report.duplicate += 1;
            continue;
        }
        accepted.push(entry.clone());
    }

    report.accepted_count = accepted.len();
    (accepted, report)
}

/// Named partition of image ids, with optional equal-sized test folds.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
    folds: Option<usize>,
}

impl DatasetSplit {
    pub fn fold_count(&self) -> Option<usize> {
        self.folds
    }

    /// The k-th test fold, assigned by position in the test id list.
    pub fn fold(&self, k: usize) -> Result<&[String]> {
        let folds = self
            .folds
            .ok_or_else(|| Error::Validation("split has no folds".into()))?;
        if k >= folds {
            return Err(Error::Parameter(format!(
                "fold index {k} out of range 0..{folds}"
            )));
        }
        let size = self.test.len() / folds;
        Ok(&self.test[k * size..(k + 1) * size])
    }
}

/// Validates and assembles a split: the three id lists must be internally
/// duplicate-free and mutually disjoint; with folds requested, the test list
/// length must divide evenly.
pub fn make_splits(
    train: Vec<String>,
    validation: Vec<String>,
    test: Vec<String>,
    folds: Option<usize>,
) -> Result<DatasetSplit> {
    let mut seen: BTreeMap<&str, &str> = BTreeMap::new();
    for (name, list) in [("train", &train), ("validation", &validation), ("test", &test)] {
        let mut inside = BTreeSet::new();
        for id in list {
            if !inside.insert(id.as_str()) {
                return Err(Error::Validation(format!(
                    "id '{id}' appears twice in the {name} list"
                )));
            }
            if let Some(other) = seen.insert(id.as_str(), name) {
                return Err(Error::Validation(format!(
                    "id '{id}' appears in both {other} and {name}"
                )));
            }
        }
    }
    if let Some(folds) = folds {
        if folds == 0 {
            return Err(Error::Validation("fold count must be positive".into()));
        }
        if test.is_empty() || test.len() % folds != 0 {
            return Err(Error::Validation(format!(
                "test size {} does not divide into {folds} equal folds",
                test.len()
            )));
        }
    }
    Ok(DatasetSplit { train, validation, test, folds })
}

/// Loads an id list, one id per line, rejecting blank lines and duplicates.
pub fn load_id_list(path: &Path) -> Result<Vec<String>> {
    let label = path.display().to_string();
    let text = fs::read_to_string(path)?;
    let mut seen = BTreeSet::new();
    let mut ids = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.is_empty() {
            return Err(format_err(&label, idx + 1, "blank line in id list"));
        }
        if !seen.insert(line.to_string()) {
            return Err(format_err(&label, idx + 1, format!("duplicate id '{line}'")));
        }
        ids.push(line.to_string());
    }
    Ok(ids)
}

/// Writes an id list in the format `load_id_list` reads.
pub fn save_id_list(ids: &[String], path: &Path) -> Result<()> {
    let mut out = String::new();
    for id in ids {
        out.push_str(id);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}
