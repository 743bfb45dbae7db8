//! Synthetic tri-modal corpus with a known latent geometry.
//!
//! Eight latent concepts generate everything. Four anchor concepts appear in
//! clean captions; the other four appear only as web-corpus tags, so a model
//! can learn their image directions from the web corpus alone. Every image
//! feature is a fixed random linear map of its item's latent mixture plus
//! Gaussian noise, and every caption spells out the same mixture as concept
//! tokens, so retrieval quality directly measures how well an embedding
//! recovers the latent geometry.
//!
//! The held-out items come in two flavors. Anchor held-outs use mixture
//! directions spread apart by a farthest-point pass and kept away from the
//! anchor-pair mixture points that the web concepts occupy, so neither side
//! of the gallery collides. Web-dominated held-outs put most of their weight
//! on one web concept; first-stage training never sees those words, which is
//! exactly the deficit second-stage web training is meant to repair.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data_io::text::PosTag;
use crate::data_io::{
    make_splits, save_captions, save_features, save_id_list, save_web_manifest,
    save_word_vectors, CaptionRecord, DatasetSplit, FeatureTable, WebManifestEntry, WebTag,
    WordVectors,
};
use crate::encoders::EmbeddingModel;
use crate::error::{Error, Result};
use crate::evaluation::embed_eval_items;
use crate::losses::LossKind;
use crate::numerics::{cosine_similarity, RealVector};
use crate::trainer::TrainConfig;

/// Concepts whose words appear in clean captions.
pub const ANCHOR_CONCEPTS: [&str; 4] = ["bridge", "glacier", "harbor", "violin"];

/// Concepts that appear only as web-corpus tags. Each one's word vector is
/// an equal mixture of two anchor word vectors plus an orthogonal residue,
/// so the sentence pathway can partially generalize to it while the residue
/// keeps it distinguishable from any true anchor mixture.
pub const WEB_CONCEPTS: [&str; 4] = ["lantern", "meadow", "obsidian", "pepper"];

const CONCEPTS: usize = 8;

/// Anchor held-out directions must stay at least this far (in cosine) from
/// every anchor-pair mixture point, because the web concepts sit near those
/// points in word space and would collide with them in the gallery.
const WEB_MIXTURE_EXCLUSION_COS: f64 = 0.88;

/// Shape and noise parameters for one generated corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    /// Master seed; every random choice in the corpus flows from it.
    pub seed: u64,
    /// Dimension of the image feature vectors.
    pub feature_dim: usize,
    /// Norm given to each latent direction's image in feature space.
    pub feature_scale: f64,
    /// Dimension of the frozen word vectors.
    pub word_dim: usize,
    /// Clean training items (anchor concepts only).
    pub train_items: usize,
    /// Held-out items scored during training.
    pub validation_items: usize,
    /// Held-out items reserved for final evaluation.
    pub test_items: usize,
    /// How many of the held-out items are dominated by a web concept,
    /// split as evenly as possible between validation and test.
    pub web_dominated_holdout: usize,
    /// Web corpus size.
    pub web_items: usize,
    /// Per-coordinate Gaussian noise added to every image feature.
    pub noise_sigma: f64,
    /// Weight of the orthogonal residue mixed into web concept word vectors.
    pub web_residue: f64,
    /// Caption lengths are drawn uniformly from this inclusive range.
    pub min_tokens: usize,
    pub max_tokens: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            feature_dim: 16,
            feature_scale: 2.0,
            word_dim: 12,
            train_items: 150,
            validation_items: 25,
            test_items: 25,
            web_dominated_holdout: 4,
            web_items: 400,
            noise_sigma: 0.05,
            web_residue: 0.03,
            min_tokens: 3,
            max_tokens: 6,
        }
    }
}

impl SynthConfig {
    /// Checks every field against the generator's assumptions.
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("train_items", self.train_items),
            ("validation_items", self.validation_items),
            ("test_items", self.test_items),
            ("web_items", self.web_items),
        ];
        for (name, value) in positive {
            if value == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.feature_dim < CONCEPTS {
            return Err(Error::Config(format!(
                "feature_dim {} cannot host {CONCEPTS} orthogonal concept directions",
                self.feature_dim
            )));
        }
        if self.word_dim < CONCEPTS {
            return Err(Error::Config(format!(
                "word_dim {} cannot host {CONCEPTS} orthogonal word directions",
                self.word_dim
            )));
        }
        if !(self.feature_scale.is_finite() && self.feature_scale > 0.0) {
            return Err(Error::Config("feature_scale must be positive".into()));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::Config("noise_sigma must be finite and nonnegative".into()));
        }
        if !(0.0..1.0).contains(&self.web_residue) {
            return Err(Error::Config("web_residue must lie in [0, 1)".into()));
        }
        if self.min_tokens < 3 || self.max_tokens < self.min_tokens {
            return Err(Error::Config(
                "token range must satisfy 3 <= min_tokens <= max_tokens".into(),
            ));
        }
        if self.web_dominated_holdout < 2 || self.web_dominated_holdout > 2 * WEB_CONCEPTS.len() {
            return Err(Error::Config(format!(
                "web_dominated_holdout must lie in 2..={} to keep directions distinct",
                2 * WEB_CONCEPTS.len()
            )));
        }
        let w_val = self.web_dominated_holdout / 2;
        let w_test = self.web_dominated_holdout - w_val;
        if w_val >= self.validation_items || w_test >= self.test_items {
            return Err(Error::Config(
                "each held-out split needs at least one anchor item".into(),
            ));
        }
        if self.web_items > 800 {
            return Err(Error::Config(
                "web_items above 800 would trip the default per-query filter cap".into(),
            ));
        }
        Ok(())
    }
}

/// One generated corpus, ready to train on directly or to write out as the
/// raw input files of a dataset bundle.
#[derive(Debug, Clone)]
pub struct SynthCorpus {
    /// Features for every clean item.
    pub features: FeatureTable,
    /// Features for every web item.
    pub web_features: FeatureTable,
    /// One caption per clean item, POS-labeled all-noun.
    pub captions: Vec<CaptionRecord>,
    /// Frozen word vectors for all eight concept words.
    pub word_vectors: WordVectors,
    /// The web corpus; passes the default web filter with zero rejections.
    pub web_manifest: Vec<WebManifestEntry>,
    /// Train / validation / test partition of the clean items.
    pub split: DatasetSplit,
    /// Ids of the web-dominated held-out items, a subset of
    /// validation plus test.
    pub web_dominated: Vec<String>,
}

/// Training settings sized for the synthetic corpus. The schedule cools the
/// first stage in half-decade steps so it hands the second stage a rate
/// that is still warm enough to move the image projection, the batch stays
/// small so most batches hold a hardest negative from another web concept,
/// and the margin is wide enough that second-stage hinges keep a gradient
/// after the first stage has separated the anchors.
pub fn recommended_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        lr0: 0.01,
        lr_decay_factor: 10f64.sqrt(),
        lr_decay_every: 10,
        stage1_epochs: 30,
        stage2_epochs: 30,
        stage2_lr_scale: 1.0,
        batch_size: 12,
        clip_norm: 2.0,
        margin: 0.24,
        loss_kind: LossKind::Vsepp,
        seed,
    }
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in &mut v {
            *x /= norm;
        }
    }
    v
}

/// Draws `count` orthonormal vectors in `dim` dimensions by Gram-Schmidt
/// over Gaussian samples, resampling any draw that degenerates.
fn orthonormal_set(rng: &mut ChaCha8Rng, count: usize, dim: usize) -> Vec<RealVector> {
    let mut basis: Vec<RealVector> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        for b in &basis {
            let d: f64 = v.iter().zip(b.as_slice()).map(|(x, y)| x * y).sum();
            for (x, y) in v.iter_mut().zip(b.as_slice()) {
                *x -= d * y;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-6 {
            continue;
        }
        basis.push(RealVector::new(v.into_iter().map(|x| x / norm).collect()));
    }
    basis
}

/// Every anchor count vector whose total lies in the token range.
fn anchor_count_candidates(min_tokens: usize, max_tokens: usize) -> Vec<[usize; 4]> {
    let mut out = Vec::new();
    for a in 0..=max_tokens {
        for b in 0..=max_tokens - a {
            for c in 0..=max_tokens - a - b {
                for d in 0..=max_tokens - a - b - c {
                    if a + b + c + d >= min_tokens {
                        out.push([a, b, c, d]);
                    }
                }
            }
        }
    }
    out
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Reduces a count vector to its primitive form; two count vectors with the
/// same primitive form point in the same latent direction.
fn primitive4(counts: &[usize; 4]) -> [usize; 4] {
    let g = counts.iter().copied().fold(0, gcd);
    let mut out = *counts;
    if g > 1 {
        for x in &mut out {
            *x /= g;
        }
    }
    out
}

fn unit4(counts: &[usize; 4]) -> [f64; 4] {
    let norm = counts.iter().map(|&c| (c * c) as f64).sum::<f64>().sqrt();
    let mut out = [0.0; 4];
    for (o, &c) in out.iter_mut().zip(counts) {
        *o = c as f64 / norm;
    }
    out
}

fn cos4(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Picks `take` anchor count vectors with pairwise well-separated directions
/// that all avoid the anchor-pair mixture points. Farthest-point selection
/// over the (shuffled, direction-deduplicated) candidate list.
fn spread_anchor_directions(
    rng: &mut ChaCha8Rng,
    min_tokens: usize,
    max_tokens: usize,
    take: usize,
) -> Result<Vec<[usize; 4]>> {
    let mixtures: Vec<[f64; 4]> = (0..4)
        .map(|i| {
            let mut m = [0usize; 4];
            m[i] = 1;
            m[(i + 1) % 4] = 1;
            unit4(&m)
        })
        .collect();
    let mut candidates = anchor_count_candidates(min_tokens, max_tokens);
    candidates.shuffle(rng);
    let mut seen = BTreeSet::new();
    candidates.retain(|c| {
        let dir = unit4(c);
        mixtures.iter().all(|m| cos4(&dir, m) <= WEB_MIXTURE_EXCLUSION_COS)
            && seen.insert(primitive4(c))
    });
    if candidates.len() < take {
        return Err(Error::Config(format!(
            "token range {min_tokens}..={max_tokens} yields only {} usable directions, {take} needed",
            candidates.len()
        )));
    }
    let dirs: Vec<[f64; 4]> = candidates.iter().map(unit4).collect();
    let mut chosen = vec![0usize];
    // max cosine from each candidate to the chosen set so far
    let mut closest: Vec<f64> = dirs.iter().map(|d| cos4(d, &dirs[0])).collect();
    while chosen.len() < take {
        let mut pick = usize::MAX;
        let mut pick_cos = f64::INFINITY;
        for (i, &c) in closest.iter().enumerate() {
            if !chosen.contains(&i) && c < pick_cos {
                pick_cos = c;
                pick = i;
            }
        }
        chosen.push(pick);
        for (i, c) in closest.iter_mut().enumerate() {
            let d = cos4(&dirs[i], &dirs[pick]);
            if d > *c {
                *c = d;
            }
        }
    }
    Ok(chosen.into_iter().map(|i| candidates[i]).collect())
}

/// Expands a concept count vector into a shuffled token list.
fn caption_tokens(rng: &mut ChaCha8Rng, counts: &[usize; CONCEPTS]) -> Vec<String> {
    let words: Vec<&str> = ANCHOR_CONCEPTS.iter().chain(&WEB_CONCEPTS).copied().collect();
    let mut tokens = Vec::new();
    for (word, &count) in words.iter().zip(counts) {
        for _ in 0..count {
            tokens.push(word.to_string());
        }
    }
    tokens.shuffle(rng);
    tokens
}

fn counts_latent(counts: &[usize; CONCEPTS]) -> Vec<f64> {
    unit(counts.iter().map(|&c| c as f64).collect())
}

/// Projects a latent mixture through the concept-direction map and adds the
/// per-coordinate feature noise.
fn feature_of(
    rng: &mut ChaCha8Rng,
    concept_images: &[RealVector],
    latent: &[f64],
    scale: f64,
    sigma: f64,
) -> RealVector {
    let dim = concept_images[0].dim();
    let mut out = vec![0.0; dim];
    for (weight, image) in latent.iter().zip(concept_images) {
        if *weight != 0.0 {
            for (o, x) in out.iter_mut().zip(image.as_slice()) {
                *o += scale * weight * x;
            }
        }
    }
    for o in &mut out {
        *o += sigma * rng.sample::<f64, _>(StandardNormal);
    }
    RealVector::new(out)
}

/// Generates a corpus from the configuration. The same seed always yields
/// the same corpus, bit for bit.
pub fn generate(cfg: &SynthConfig) -> Result<SynthCorpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    // Word geometry: anchors take four orthonormal directions, web words mix
    // two adjacent anchors and lean on their own orthogonal residue.
    let word_basis = orthonormal_set(&mut rng, CONCEPTS, cfg.word_dim);
    let mut word_rows: Vec<(String, RealVector)> = Vec::new();
    for (i, word) in ANCHOR_CONCEPTS.iter().enumerate() {
        word_rows.push((word.to_string(), word_basis[i].clone()));
    }
    for (i, word) in WEB_CONCEPTS.iter().enumerate() {
        let a = word_basis[i].as_slice();
        let b = word_basis[(i + 1) % 4].as_slice();
        let r = word_basis[4 + i].as_slice();
        let mixed: Vec<f64> = a
            .iter()
            .zip(b)
            .zip(r)
            .map(|((x, y), z)| 0.5 * x + 0.5 * y + cfg.web_residue * z)
            .collect();
        word_rows.push((word.to_string(), RealVector::new(unit(mixed))));
    }
    let word_vectors = WordVectors::from_rows(word_rows)?;

    // Image geometry: one orthonormal feature-space direction per concept.
    let concept_images = orthonormal_set(&mut rng, CONCEPTS, cfg.feature_dim);

    let anchor_holdout = cfg.validation_items + cfg.test_items - cfg.web_dominated_holdout;
    let clean_total = cfg.train_items + cfg.validation_items + cfg.test_items;

    // Clean item plan: training mixtures are sampled freely, held-out anchor
    // mixtures are spread apart, web-dominated held-outs lean on one web
    // concept with a single anchor token.
    let mut plans: Vec<[usize; CONCEPTS]> = Vec::with_capacity(clean_total);
    for _ in 0..cfg.train_items {
        let active = match rng.gen_range(0..100) {
            0..=19 => 1,
            20..=59 => 2,
            60..=84 => 3,
            _ => 4,
        };
        let mut anchors = [0usize, 1, 2, 3];
        anchors.shuffle(&mut rng);
        let active = &anchors[..active];
        let len = rng.gen_range(cfg.min_tokens..=cfg.max_tokens);
        let mut counts = [0usize; CONCEPTS];
        for _ in 0..len {
            counts[active[rng.gen_range(0..active.len())]] += 1;
        }
        plans.push(counts);
    }
    for picked in spread_anchor_directions(&mut rng, cfg.min_tokens, cfg.max_tokens, anchor_holdout)? {
        let mut counts = [0usize; CONCEPTS];
        counts[..4].copy_from_slice(&picked);
        plans.push(counts);
    }
    for k in 0..cfg.web_dominated_holdout {
        let web = k % WEB_CONCEPTS.len();
        let mut counts = [0usize; CONCEPTS];
        // Web-dominated captions carry no anchor tokens: an anchor token
        // would drag the frozen query toward populated anchor territory and
        // hand the top rank to a clean distractor. The second item on a web
        // concept splits its web mass across a pair so the two stay
        // mutually distinguishable in the gallery.
        if k < WEB_CONCEPTS.len() {
            counts[4 + web] = cfg.max_tokens - 2;
        } else {
            counts[4 + web] = cfg.max_tokens - 3;
            counts[4 + (web + 1) % WEB_CONCEPTS.len()] = 1;
        }
        plans.push(counts);
    }

    let ids: Vec<String> = (0..clean_total).map(|i| format!("c{i:04}")).collect();
    let mut feature_rows = Vec::with_capacity(clean_total);
    let mut captions = Vec::with_capacity(clean_total);
    for (id, counts) in ids.iter().zip(&plans) {
        let latent = counts_latent(counts);
        feature_rows.push((
            id.clone(),
            feature_of(&mut rng, &concept_images, &latent, cfg.feature_scale, cfg.noise_sigma),
        ));
        let tokens = caption_tokens(&mut rng, counts);
        let pos = Some(vec![PosTag::Noun; tokens.len()]);
        captions.push(CaptionRecord { image_id: id.clone(), tokens, pos });
    }
    let features = FeatureTable::from_rows(feature_rows)?;

    // Split assignment: held-out ids are shuffled, then each flavor is dealt
    // to validation and test.
    let mut anchor_ids: Vec<String> =
        ids[cfg.train_items..cfg.train_items + anchor_holdout].to_vec();
    let mut webdom_ids: Vec<String> = ids[cfg.train_items + anchor_holdout..].to_vec();
    anchor_ids.shuffle(&mut rng);
    webdom_ids.shuffle(&mut rng);
    let w_val = cfg.web_dominated_holdout / 2;
    let a_val = cfg.validation_items - w_val;
    let mut validation: Vec<String> = anchor_ids[..a_val]
        .iter()
        .chain(&webdom_ids[..w_val])
        .cloned()
        .collect();
    let mut test: Vec<String> = anchor_ids[a_val..]
        .iter()
        .chain(&webdom_ids[w_val..])
        .cloned()
        .collect();
    validation.sort();
    test.sort();
    let split = make_splits(ids[..cfg.train_items].to_vec(), validation, test, None)?;
    let mut web_dominated = webdom_ids;
    web_dominated.sort();

    // Web corpus: every item leans on one web concept, and each item's
    // latent mixture mirrors its resolvable tags exactly, because the tag
    // bag is an unweighted mean and a mismatched latent would teach the
    // image projection a skewed geometry. No web item touches the anchor
    // subspace, so second-stage updates leave first-stage anchor geometry
    // intact everywhere the held-out galleries look.
    let mut web_rows = Vec::with_capacity(cfg.web_items);
    let mut web_manifest = Vec::with_capacity(cfg.web_items);
    for i in 0..cfg.web_items {
        let web = i % WEB_CONCEPTS.len();
        let id = format!("web{i:04}");
        let mut latent = vec![0.0; CONCEPTS];
        let tag = |surface: &str, english: bool| WebTag {
            surface: surface.to_string(),
            english_marked: english,
        };
        let mut tags = vec![tag(WEB_CONCEPTS[web], true)];
        let style = rng.gen_range(0..100);
        if style < 92 {
            // The numbered snapshot tag carries the second English mark but
            // never resolves to a word vector, so the bag stays pure.
            latent[4 + web] = 1.0;
            tags.push(tag(&format!("snap{i:04}"), true));
        } else {
            // Paired items dominate so that same-query bags still differ in
            // the web directions the second stage must align. Identical bags
            // would let the hardest negative cancel the positive term and
            // freeze the hinge at the margin with no gradient.
            let other = (web + 1 + rng.gen_range(0..WEB_CONCEPTS.len() - 1)) % WEB_CONCEPTS.len();
            latent[4 + web] = 1.0;
            latent[4 + other] = 1.0;
            tags.push(tag(WEB_CONCEPTS[other], true));
            tags.push(tag(&format!("snap{i:04}"), false));
        }
        let latent = unit(latent);
        web_rows.push((
            id.clone(),
            feature_of(&mut rng, &concept_images, &latent, cfg.feature_scale, cfg.noise_sigma),
        ));
        web_manifest.push(WebManifestEntry {
            image_id: id,
            owner_id: format!("owner{:04}", i / 4),
            query: WEB_CONCEPTS[web].to_string(),
            tags,
        });
    }
    let web_features = FeatureTable::from_rows(web_rows)?;

    Ok(SynthCorpus {
        features,
        web_features,
        captions,
        word_vectors,
        web_manifest,
        split,
        web_dominated,
    })
}

/// Writes a corpus as the raw input files of a dataset bundle.
pub fn write_corpus(corpus: &SynthCorpus, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    save_features(&corpus.features, &dir.join("features.txt"))?;
    save_features(&corpus.web_features, &dir.join("web_features.txt"))?;
    save_captions(&corpus.captions, &dir.join("captions.txt"))?;
    save_word_vectors(&corpus.word_vectors, &dir.join("word_vectors.txt"))?;
    save_web_manifest(&corpus.web_manifest, &dir.join("web_manifest.txt"))?;
    save_id_list(&corpus.split.train, &dir.join("train_ids.txt"))?;
    save_id_list(&corpus.split.validation, &dir.join("validation_ids.txt"))?;
    save_id_list(&corpus.split.test, &dir.join("test_ids.txt"))?;
    save_id_list(&corpus.web_dominated, &dir.join("web_dominated_ids.txt"))?;
    Ok(())
}

/// Caption-to-image recall at 1 for the captions of `query_ids`, ranked
/// against the full `gallery_ids` gallery. Ties count against the query,
/// matching the evaluation module's policy.
pub fn caption_to_image_recall_at_1(
    model: &EmbeddingModel,
    features: &FeatureTable,
    captions: &[CaptionRecord],
    gallery_ids: &[String],
    query_ids: &BTreeSet<String>,
) -> Result<f64> {
    let items = embed_eval_items(model, features, captions, gallery_ids)?;
    let mut queries = 0usize;
    let mut hits = 0usize;
    for (c, caption) in items.caption_embeddings.iter().enumerate() {
        let own = items.caption_image[c];
        if !query_ids.contains(&items.image_ids[own]) {
            continue;
        }
        queries += 1;
        let own_sim = cosine_similarity(caption, &items.image_embeddings[own])?;
        let mut beaten = false;
        for (j, image) in items.image_embeddings.iter().enumerate() {
            if j != own && cosine_similarity(caption, image)? >= own_sim {
                beaten = true;
                break;
            }
        }
        if !beaten {
            hits += 1;
        }
    }
    if queries == 0 {
        return Err(Error::Empty("no captions match the query id set".into()));
    }
    Ok(100.0 * hits as f64 / queries as f64)
}

/// Convenience lookup: the union vocabulary a model for this corpus needs,
/// every caption token plus every word-vector token.
pub fn corpus_vocabulary(corpus: &SynthCorpus) -> BTreeSet<String> {
    let mut vocab: BTreeSet<String> = corpus.word_vectors.vocab();
    for rec in &corpus.captions {
        vocab.extend(rec.tokens.iter().cloned());
    }
    vocab
}

/// Word-vector rows as the map `EmbeddingModel::with_word_init` consumes.
pub fn word_init_map(corpus: &SynthCorpus) -> BTreeMap<String, RealVector> {
    corpus
        .word_vectors
        .iter()
        .map(|(w, v)| (w.to_string(), v.clone()))
        .collect()
}
