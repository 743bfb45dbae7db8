//! Two-stage optimization: seeded shuffles, bias-corrected Adam, per-layer
//! gradient clipping, stepped learning-rate decay, per-epoch validation
//! retrieval, and sum-of-recalls model selection.
//!
//! Stage one fits clean image-caption pairs with both loss families active
//! (each caption forms its own pair, so an image's feature repeats across its
//! captions). Stage two fits web image-tag pairs in curriculum order with the
//! sentence pathway frozen: only the image and tag projections receive
//! gradient, so the GRU, word table, and sentence projection stay
//! bit-identical through the entire stage. Both stages append to one shared
//! [`TrainLog`] with globally increasing epoch numbers.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::curriculum::CurriculumSchedule;
use crate::data_io::text::{Lemmatizer, PosTag};
use crate::data_io::{derive_dummy_tags, CaptionRecord, FeatureTable, WebManifestEntry, WordVectors};
use crate::encoders::{
    backprop_image, backprop_sentence, backprop_tag_bag, encode_image, encode_sentence_cached,
    project_tag_bag, EmbeddingModel, TokenSequence,
};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_split, Direction, DirectionReport, RetrievalReport};
use crate::losses::{image_tag_loss, loss_by_kind, BatchEmbeddings, LossConfig, LossKind};
use crate::numerics::{ParameterSet, Tensor};

/// Adam first-moment decay.
pub const ADAM_BETA1: f64 = 0.9;
/// Adam second-moment decay.
pub const ADAM_BETA2: f64 = 0.999;
/// Adam denominator offset, added outside the square root.
pub const ADAM_EPSILON: f64 = 1e-8;

/// Hyperparameters for a two-stage run.
///
/// `lr0` may be zero: a zero rate runs every forward and backward pass but
/// skips the optimizer update, which leaves parameters bit-identical and is
/// useful as a dry run. Every other numeric field must be strictly positive.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Stage-one base learning rate.
    pub lr0: f64,
    /// Factor the rate is divided by at each decay step.
    pub lr_decay_factor: f64,
    /// Epochs between decay steps.
    pub lr_decay_every: usize,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    /// Stage-two base rate as a fraction of the final stage-one rate, in
    /// (0, 1]. Values below 1 guard the stage-one embedding against being
    /// overwritten by the noisier web supervision.
    pub stage2_lr_scale: f64,
    pub batch_size: usize,
    /// Per-layer L2 clipping threshold.
    pub clip_norm: f64,
    /// Hinge margin for both loss families.
    pub margin: f64,
    /// Image-sentence loss form: sum over negatives or hardest negative.
    pub loss_kind: LossKind,
    /// Master seed; every shuffle derives its own stream from it.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 2e-4,
            lr_decay_factor: 10.0,
            lr_decay_every: 10,
            stage1_epochs: 20,
            stage2_epochs: 20,
            stage2_lr_scale: 0.1,
            batch_size: 128,
            clip_norm: 2.0,
            margin: 0.2,
            loss_kind: LossKind::Vsepp,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.lr0.is_finite() || self.lr0 < 0.0 {
            return Err(Error::Config(format!("lr0 must be nonnegative, got {}", self.lr0)));
        }
        if !self.lr_decay_factor.is_finite() || self.lr_decay_factor < 1.0 {
            return Err(Error::Config(format!(
                "lr_decay_factor must be at least 1, got {}",
                self.lr_decay_factor
            )));
        }
        if self.lr_decay_every == 0 {
            return Err(Error::Config("lr_decay_every must be positive".into()));
        }
        if self.stage1_epochs == 0 || self.stage2_epochs == 0 {
            return Err(Error::Config("stage epoch counts must be positive".into()));
        }
        if !self.stage2_lr_scale.is_finite()
            || self.stage2_lr_scale <= 0.0
            || self.stage2_lr_scale > 1.0
        {
            return Err(Error::Config(format!(
                "stage2_lr_scale must lie in (0, 1], got {}",
                self.stage2_lr_scale
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !self.clip_norm.is_finite() || self.clip_norm <= 0.0 {
            return Err(Error::Config(format!(
                "clip_norm must be positive, got {}",
                self.clip_norm
            )));
        }
        if !self.margin.is_finite() || self.margin <= 0.0 {
            return Err(Error::Config(format!("margin must be positive, got {}", self.margin)));
        }
        if self.loss_kind == LossKind::ImageTag {
            return Err(Error::Config(
                "loss_kind selects the image-sentence family: 'vse' or 'vsepp'".into(),
            ));
        }
        Ok(())
    }
}

/// Parses flat `key=value` configuration text. Blank lines and lines starting
/// with `#` are skipped; keys must be unique. `source` labels parse errors.
pub fn parse_flat_config(text: &str, source: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: String| Error::Format {
            path: source.to_string(),
            line: Some(idx + 1),
            msg,
        };
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| err(format!("expected key=value, found '{line}'")))?;
        let key = key.trim();
        let value = value.trim();
        if key.is_empty() {
            return Err(err("empty key".into()));
        }
        if value.is_empty() {
            return Err(err(format!("empty value for key '{key}'")));
        }
        if out.insert(key.to_string(), value.to_string()).is_some() {
            return Err(err(format!("duplicate key '{key}'")));
        }
    }
    Ok(out)
}

/// Reads a flat `key=value` file.
pub fn load_flat_config(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(path)?;
    parse_flat_config(&text, &path.display().to_string())
}

fn parse_value<T: std::str::FromStr>(key: &str, raw: &str) -> Result<T> {
    raw.parse()
        .map_err(|_| Error::Config(format!("bad value '{raw}' for {key}")))
}

fn parse_loss_kind(raw: &str) -> Result<LossKind> {
    match raw {
        "vse" => Ok(LossKind::Vse),
        "vsepp" => Ok(LossKind::Vsepp),
        other => Err(Error::Config(format!(
            "loss_kind must be 'vse' or 'vsepp', got '{other}'"
        ))),
    }
}

/// Applies the trainer's own keys from a flat key-value map onto `cfg` and
/// returns the set of keys it consumed, so a caller owning additional keys
/// can detect leftovers. Values it cannot parse are configuration errors.
pub fn apply_train_keys(
    cfg: &mut TrainConfig,
    kv: &BTreeMap<String, String>,
) -> Result<BTreeSet<String>> {
    let mut used = BTreeSet::new();
    for (key, value) in kv {
        let consumed = match key.as_str() {
            "lr0" => {
                cfg.lr0 = parse_value(key, value)?;
                true
            }
            "lr_decay_factor" => {
                cfg.lr_decay_factor = parse_value(key, value)?;
                true
            }
            "lr_decay_every" => {
                cfg.lr_decay_every = parse_value(key, value)?;
                true
            }
            "stage1_epochs" => {
                cfg.stage1_epochs = parse_value(key, value)?;
                true
            }
            "stage2_epochs" => {
                cfg.stage2_epochs = parse_value(key, value)?;
                true
            }
            "stage2_lr_scale" => {
                cfg.stage2_lr_scale = parse_value(key, value)?;
                true
            }
            "batch_size" => {
                cfg.batch_size = parse_value(key, value)?;
                true
            }
            "clip_norm" => {
                cfg.clip_norm = parse_value(key, value)?;
                true
            }
            "margin" => {
                cfg.margin = parse_value(key, value)?;
                true
            }
            "loss_kind" => {
                cfg.loss_kind = parse_loss_kind(value)?;
                true
            }
            "seed" => {
                cfg.seed = parse_value(key, value)?;
                true
            }
            _ => false,
        };
        if consumed {
            used.insert(key.clone());
        }
    }
    Ok(used)
}

/// Loads a [`TrainConfig`] from a flat key-value file, starting from the
/// defaults. Keys outside the trainer's field names are rejected; callers
/// that mix trainer keys with their own should use [`load_flat_config`] and
/// [`apply_train_keys`] directly.
pub fn train_config_from_file(path: &Path) -> Result<TrainConfig> {
    let kv = load_flat_config(path)?;
    let mut cfg = TrainConfig::default();
    let used = apply_train_keys(&mut cfg, &kv)?;
    let unknown: Vec<&str> = kv
        .keys()
        .filter(|k| !used.contains(*k))
        .map(String::as_str)
        .collect();
    if !unknown.is_empty() {
        return Err(Error::Config(format!(
            "unknown config keys: {}",
            unknown.join(", ")
        )));
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Which of the two training stages a rate or record belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainStage {
    One,
    Two,
}

impl TrainStage {
    pub fn number(self) -> u8 {
        match self {
            TrainStage::One => 1,
            TrainStage::Two => 2,
        }
    }
}

/// Learning rate for a 0-based epoch within a stage. Stage one starts at
/// `lr0` and divides by `lr_decay_factor` every `lr_decay_every` epochs.
/// Stage two restarts the decay clock from `stage2_lr_scale` times the final
/// stage-one rate. Assumes a validated config.
pub fn lr_at(cfg: &TrainConfig, stage: TrainStage, epoch_in_stage: usize) -> f64 {
    let decay = |base: f64, epoch: usize| {
        let steps = (epoch / cfg.lr_decay_every) as i32;
        base / cfg.lr_decay_factor.powi(steps)
    };
    match stage {
        TrainStage::One => decay(cfg.lr0, epoch_in_stage),
        TrainStage::Two => {
            let stage1_final = decay(cfg.lr0, cfg.stage1_epochs - 1);
            decay(cfg.stage2_lr_scale * stage1_final, epoch_in_stage)
        }
    }
}

/// Adam moment buffers mirroring one [`ParameterSet`], plus the step counter.
/// A state is bound to the parameter set it was built from; each training
/// stage starts from a fresh state.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
    step: u64,
}

impl AdamState {
    pub fn new(params: &ParameterSet) -> Self {
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for name in params.names() {
            m.insert(name.to_string(), params.value(name).zeros_like());
            v.insert(name.to_string(), params.value(name).zeros_like());
        }
        AdamState { m, v, step: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update over every parameter entry:
/// θ ← θ − lr · m̂ / (√v̂ + ε). All gradients are validated before anything
/// is touched, so a non-finite entry leaves parameters and state unchanged.
/// Zero gradients leave parameters bit-identical at any step count.
pub fn adam_step(params: &mut ParameterSet, state: &mut AdamState, lr: f64) -> Result<()> {
    if !lr.is_finite() || lr <= 0.0 {
        return Err(Error::Parameter(format!(
            "adam_step needs a positive learning rate, got {lr}"
        )));
    }
    let mut param_count = 0usize;
    for name in params.names() {
        param_count += 1;
        let value = params.value(name);
        let grad = params.grad(name);
        for &g in grad.as_slice() {
            if !g.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite gradient in parameter '{name}'"
                )));
            }
        }
        let mirrors = state
            .m
            .get(name)
            .zip(state.v.get(name))
            .is_some_and(|(m, v)| m.same_shape(value) && v.same_shape(value));
        if !mirrors {
            return Err(Error::Integrity(format!(
                "optimizer state does not mirror parameter '{name}'"
            )));
        }
    }
    if state.m.len() != param_count {
        return Err(Error::Integrity(format!(
            "optimizer state tracks {} parameters, model has {param_count}",
            state.m.len()
        )));
    }

    state.step += 1;
    // β^t underflows to 0 for astronomically large t, which keeps the bias
    // correction at its asymptotic value of 1.
    let t = i32::try_from(state.step).unwrap_or(i32::MAX);
    let bias1 = 1.0 - ADAM_BETA1.powi(t);
    let bias2 = 1.0 - ADAM_BETA2.powi(t);
    for (name, value, grad) in params.iter_mut_with_grads() {
        let m = state.m.get_mut(name).expect("state mirrors parameters");
        let v = state.v.get_mut(name).expect("state mirrors parameters");
        let theta = value.as_mut_slice();
        let m = m.as_mut_slice();
        let v = v.as_mut_slice();
        for (i, &g) in grad.as_slice().iter().enumerate() {
            m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g;
            v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = m[i] / bias1;
            let v_hat = v[i] / bias2;
            theta[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPSILON);
        }
    }
    Ok(())
}

/// Rescales each named gradient whose L2 norm exceeds `clip_norm` down to
/// exactly `clip_norm`, and returns the factor applied per parameter (1 when
/// a layer was left untouched). Never increases a norm.
pub fn clip_gradients(params: &mut ParameterSet, clip_norm: f64) -> Result<BTreeMap<String, f64>> {
    if !clip_norm.is_finite() || clip_norm <= 0.0 {
        return Err(Error::Parameter(format!(
            "clip_norm must be positive, got {clip_norm}"
        )));
    }
    let names: Vec<String> = params.names().map(String::from).collect();
    let mut factors = BTreeMap::new();
    for name in names {
        let grad = params.grad_mut(&name).as_mut_slice();
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(Error::Numeric(format!(
                "gradient norm of parameter '{name}' is not finite"
            )));
        }
        let factor = if norm > clip_norm { clip_norm / norm } else { 1.0 };
        if factor != 1.0 {
            for g in grad.iter_mut() {
                *g *= factor;
            }
        }
        factors.insert(name, factor);
    }
    Ok(factors)
}

/// One clean training pair: a caption against its image, with the mean
/// word vector of the caption's dummy tags when any tag has a vector.
/// Pairs without a tag bag contribute to the image-sentence loss only.
#[derive(Debug, Clone)]
pub struct PairItem {
    pub image_id: String,
    pub tokens: TokenSequence,
    pub tag_bag: Option<crate::numerics::RealVector>,
}

/// One web training pair: an image against the mean word vector of its tags.
#[derive(Debug, Clone)]
pub struct TagItem {
    pub image_id: String,
    pub tag_bag: crate::numerics::RealVector,
}

/// Web items plus the count of entries dropped because none of their tags
/// had a word vector under either its canonical or surface form.
#[derive(Debug, Clone)]
pub struct BuiltTagItems {
    pub items: Vec<TagItem>,
    pub skipped_without_vectors: usize,
}

/// Assembles stage-one items: one pair per caption record, tokens mapped
/// through the model vocabulary, dummy tags derived from the lexicon and
/// averaged over the frozen word vectors that know them.
pub fn build_pair_items(
    model: &EmbeddingModel,
    captions: &[CaptionRecord],
    features: &FeatureTable,
    word_vectors: &WordVectors,
    lexicon: &BTreeMap<String, PosTag>,
    lemmatizer: &Lemmatizer,
) -> Result<Vec<PairItem>> {
    if word_vectors.dim() != model.dims.word_dim {
        return Err(Error::Shape(format!(
            "word vectors have dim {}, model expects {}",
            word_vectors.dim(),
            model.dims.word_dim
        )));
    }
    if !captions.is_empty() && features.dim() != model.dims.v {
        return Err(Error::Shape(format!(
            "image features have dim {}, model expects {}",
            features.dim(),
            model.dims.v
        )));
    }
    let mut items = Vec::with_capacity(captions.len());
    for rec in captions {
        features.require(&rec.image_id)?;
        if rec.tokens.is_empty() {
            return Err(Error::Empty(format!(
                "caption for image '{}' has no tokens",
                rec.image_id
            )));
        }
        let vectors: Vec<crate::numerics::RealVector> = derive_dummy_tags(rec, lexicon, lemmatizer)
            .iter()
            .filter_map(|tag| word_vectors.get(tag).cloned())
            .collect();
        let tag_bag = if vectors.is_empty() {
            None
        } else {
            Some(crate::encoders::mean_vector(&vectors)?)
        };
        items.push(PairItem {
            image_id: rec.image_id.clone(),
            tokens: model.token_ids(&rec.tokens),
            tag_bag,
        });
    }
    Ok(items)
}

/// Assembles stage-two items from filtered web entries. Each tag is looked
/// up under its canonical form first and its surface form second; distinct
/// resolved forms contribute once to the bag, so repeated tags do not skew
/// the mean. Entries resolving no vectors at all are skipped and counted.
pub fn build_tag_items(
    model: &EmbeddingModel,
    entries: &[WebManifestEntry],
    features: &FeatureTable,
    word_vectors: &WordVectors,
    lemmatizer: &Lemmatizer,
) -> Result<BuiltTagItems> {
    if word_vectors.dim() != model.dims.word_dim {
        return Err(Error::Shape(format!(
            "word vectors have dim {}, model expects {}",
            word_vectors.dim(),
            model.dims.word_dim
        )));
    }
    if !entries.is_empty() && features.dim() != model.dims.v {
        return Err(Error::Shape(format!(
            "image features have dim {}, model expects {}",
            features.dim(),
            model.dims.v
        )));
    }
    let mut items = Vec::with_capacity(entries.len());
    let mut skipped = 0usize;
    for entry in entries {
        features.require(&entry.image_id)?;
        let mut resolved = BTreeSet::new();
        for tag in &entry.tags {
            let canonical = lemmatizer.canonical(&tag.surface);
            if word_vectors.contains(&canonical) {
                resolved.insert(canonical);
            } else if word_vectors.contains(&tag.surface) {
                resolved.insert(tag.surface.clone());
            }
        }
        if resolved.is_empty() {
            skipped += 1;
            continue;
        }
        let vectors: Vec<crate::numerics::RealVector> = resolved
            .iter()
            .map(|t| word_vectors.get(t).expect("resolved tags have vectors").clone())
            .collect();
        items.push(TagItem {
            image_id: entry.image_id.clone(),
            tag_bag: crate::encoders::mean_vector(&vectors)?,
        });
    }
    Ok(BuiltTagItems {
        items,
        skipped_without_vectors: skipped,
    })
}

/// Borrowed handles to the clean validation split, scored after every epoch.
#[derive(Clone, Copy)]
pub struct ValidationSet<'a> {
    pub features: &'a FeatureTable,
    pub captions: &'a [CaptionRecord],
    pub image_ids: &'a [String],
}

/// One logged epoch: the rate and mean batch loss it ran with, the
/// validation retrieval report, and whether model selection picked it.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub stage: u8,
    pub lr: f64,
    pub loss: f64,
    pub validation: RetrievalReport,
    pub selected: bool,
}

const LOG_KEYS: [&str; 12] = [
    "epoch", "stage", "lr", "loss", "r1_i2t", "r10_i2t", "r1_t2i", "r10_t2i", "medr_i2t",
    "medr_t2i", "rsum", "selected",
];

impl EpochRecord {
    /// Renders the record as one line of space-separated `key=value` fields.
    /// Floats use the shortest representation that parses back bit-exactly.
    pub fn to_line(&self) -> String {
        let v = &self.validation;
        format!(
            "epoch={} stage={} lr={} loss={} r1_i2t={} r10_i2t={} r1_t2i={} r10_t2i={} \
             medr_i2t={} medr_t2i={} rsum={} selected={}",
            self.epoch,
            self.stage,
            self.lr,
            self.loss,
            v.image_to_text.r_at_1,
            v.image_to_text.r_at_10,
            v.text_to_image.r_at_1,
            v.text_to_image.r_at_10,
            v.image_to_text.med_r,
            v.text_to_image.med_r,
            v.rsum(),
            self.selected,
        )
    }

    fn parse_line(line: &str) -> std::result::Result<EpochRecord, String> {
        let fields: Vec<&str> = line.split_ascii_whitespace().collect();
        if fields.len() != LOG_KEYS.len() {
            return Err(format!(
                "expected {} fields, found {}",
                LOG_KEYS.len(),
                fields.len()
            ));
        }
        let mut values = Vec::with_capacity(LOG_KEYS.len());
        for (token, expected) in fields.iter().zip(LOG_KEYS) {
            let (key, value) = token
                .split_once('=')
                .ok_or_else(|| format!("field '{token}' is not key=value"))?;
            if key != expected {
                return Err(format!("expected key '{expected}', found '{key}'"));
            }
            values.push(value);
        }
        let epoch: usize = values[0].parse().map_err(|_| format!("bad epoch '{}'", values[0]))?;
        let stage: u8 = values[1].parse().map_err(|_| format!("bad stage '{}'", values[1]))?;
        if stage != 1 && stage != 2 {
            return Err(format!("stage must be 1 or 2, found {stage}"));
        }
        let num = |i: usize| {
            values[i]
                .parse::<f64>()
                .map_err(|_| format!("bad {} '{}'", LOG_KEYS[i], values[i]))
        };
        let validation = RetrievalReport {
            image_to_text: DirectionReport {
                direction: Direction::ImageToText,
                r_at_1: num(4)?,
                r_at_10: num(5)?,
                med_r: num(8)?,
            },
            text_to_image: DirectionReport {
                direction: Direction::TextToImage,
                r_at_1: num(6)?,
                r_at_10: num(7)?,
                med_r: num(9)?,
            },
        };
        let rsum = num(10)?;
        if validation.rsum().to_bits() != rsum.to_bits() {
            return Err(format!(
                "rsum column {} disagrees with the recall fields",
                values[10]
            ));
        }
        let selected = match values[11] {
            "true" => true,
            "false" => false,
            other => return Err(format!("bad selected flag '{other}'")),
        };
        Ok(EpochRecord {
            epoch,
            stage,
            lr: num(2)?,
            loss: num(3)?,
            validation,
            selected,
        })
    }
}

/// Ordered per-epoch records. Epoch numbers are strictly increasing and at
/// most one record carries the selected-model flag.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    records: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn new() -> Self {
        TrainLog::default()
    }

    pub fn records(&self) -> &[EpochRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn push(&mut self, rec: EpochRecord) -> Result<()> {
        if let Some(last) = self.records.last() {
            if rec.epoch <= last.epoch {
                return Err(Error::Validation(format!(
                    "log epochs must be strictly increasing: {} after {}",
                    rec.epoch, last.epoch
                )));
            }
        }
        if rec.selected && self.selected_epoch().is_some() {
            return Err(Error::Validation(
                "log already carries a selected-model flag".into(),
            ));
        }
        self.records.push(rec);
        Ok(())
    }

    /// Flags the selected model's epoch. At most one record may be flagged.
    pub fn mark_selected(&mut self, epoch: usize) -> Result<()> {
        if let Some(previous) = self.selected_epoch() {
            return Err(Error::Validation(format!(
                "epoch {previous} is already marked selected"
            )));
        }
        let rec = self
            .records
            .iter_mut()
            .find(|r| r.epoch == epoch)
            .ok_or_else(|| Error::Validation(format!("no epoch {epoch} in the log")))?;
        rec.selected = true;
        Ok(())
    }

    pub fn selected_epoch(&self) -> Option<usize> {
        self.records.iter().find(|r| r.selected).map(|r| r.epoch)
    }

    /// One line per record, in order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for rec in &self.records {
            out.push_str(&rec.to_line());
            out.push('\n');
        }
        out
    }

    /// Parses the output of [`to_text`](Self::to_text). `source` labels
    /// errors. Ordering and single-selection invariants are re-imposed.
    pub fn from_text(text: &str, source: &str) -> Result<TrainLog> {
        let mut log = TrainLog::new();
        for (idx, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec = EpochRecord::parse_line(line).map_err(|msg| Error::Format {
                path: source.to_string(),
                line: Some(idx + 1),
                msg,
            })?;
            log.push(rec)?;
        }
        Ok(log)
    }
}

/// Writes a training log as line-delimited records.
pub fn save_train_log(log: &TrainLog, path: &Path) -> Result<()> {
    fs::write(path, log.to_text())?;
    Ok(())
}

/// Reads a training log written by [`save_train_log`].
pub fn load_train_log(path: &Path) -> Result<TrainLog> {
    let text = fs::read_to_string(path)?;
    TrainLog::from_text(&text, &path.display().to_string())
}

// Every shuffle draws from its own ChaCha stream, keyed by the master seed
// and a purpose tag, so reordering stages or epochs cannot alias streams.
fn subseed(master: u64, tag: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    hasher.update(tag.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest longer than 8 bytes"))
}

fn epoch_rng(master: u64, stage: TrainStage, epoch_in_stage: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(subseed(
        master,
        &format!("stage{}-epoch-{}", stage.number(), epoch_in_stage),
    ))
}

/// Stage one: every epoch shuffles the clean pairs with a seeded stream,
/// walks them in batches, applies both loss families (the image-sentence
/// form chosen by `loss_kind`, the image-tag form always hardest-negative),
/// backpropagates through projections, GRU, and word table, clips per layer,
/// and takes one Adam step per batch. After each epoch the model is scored
/// on the validation split, appended to `log`, and handed to `on_epoch`
/// (global 1-based epoch number) for checkpointing.
pub fn train_stage1(
    model: &mut EmbeddingModel,
    items: &[PairItem],
    features: &FeatureTable,
    validation: &ValidationSet,
    cfg: &TrainConfig,
    log: &mut TrainLog,
    mut on_epoch: impl FnMut(usize, &EmbeddingModel) -> Result<()>,
) -> Result<()> {
    cfg.validate()?;
    if items.is_empty() {
        return Err(Error::Empty("stage one has no training pairs".into()));
    }
    for item in items {
        features.require(&item.image_id)?;
    }
    let loss_cfg = LossConfig {
        margin: cfg.margin,
        lambda_is: 1.0,
        lambda_it: 1.0,
        mean_reduce: false,
    };
    let mut adam = AdamState::new(&model.params);
    let start_epoch = log.records().last().map_or(0, |r| r.epoch);
    let mut order: Vec<usize> = (0..items.len()).collect();
    for e in 0..cfg.stage1_epochs {
        let lr = lr_at(cfg, TrainStage::One, e);
        order.shuffle(&mut epoch_rng(cfg.seed, TrainStage::One, e));
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            loss_sum += run_pair_batch(model, items, features, chunk, &loss_cfg, cfg, &mut adam, lr)?;
            batches += 1;
        }
        let epoch = start_epoch + e + 1;
        finish_epoch(
            model,
            validation,
            log,
            &mut on_epoch,
            epoch,
            TrainStage::One,
            lr,
            mean_loss(loss_sum, batches),
        )?;
    }
    Ok(())
}

/// Stage two: batches come from the curriculum pool of each epoch (shuffled
/// within the pool), the loss is the image-tag family alone, and gradient
/// flows only into the image and tag projections, leaving the sentence
/// pathway bit-identical. Validation still scores image-sentence retrieval
/// on the clean split, since that is the target task. The schedule must span
/// exactly `stage2_epochs` and cover every item; scheduled ids without an
/// item (e.g. web entries dropped for lacking word vectors) are skipped, so
/// a schedule exposing no usable items leaves the model unchanged.
pub fn train_stage2(
    model: &mut EmbeddingModel,
    items: &[TagItem],
    features: &FeatureTable,
    schedule: &CurriculumSchedule,
    validation: &ValidationSet,
    cfg: &TrainConfig,
    log: &mut TrainLog,
    mut on_epoch: impl FnMut(usize, &EmbeddingModel) -> Result<()>,
) -> Result<()> {
    cfg.validate()?;
    if schedule.items().is_empty() {
        return Err(Error::Config("stage two received an empty schedule".into()));
    }
    if schedule.epochs() != cfg.stage2_epochs {
        return Err(Error::Config(format!(
            "schedule spans {} epochs but stage2_epochs is {}",
            schedule.epochs(),
            cfg.stage2_epochs
        )));
    }
    let mut by_id: BTreeMap<&str, usize> = BTreeMap::new();
    for (idx, item) in items.iter().enumerate() {
        features.require(&item.image_id)?;
        if by_id.insert(item.image_id.as_str(), idx).is_some() {
            return Err(Error::Validation(format!(
                "duplicate web training item id '{}'",
                item.image_id
            )));
        }
    }
    let scheduled: BTreeSet<&str> = schedule.items().iter().map(|s| s.item_id.as_str()).collect();
    for item in items {
        if !scheduled.contains(item.image_id.as_str()) {
            return Err(Error::Validation(format!(
                "web item '{}' is not covered by the curriculum schedule",
                item.image_id
            )));
        }
    }
    let loss_cfg = LossConfig {
        margin: cfg.margin,
        lambda_is: 0.0,
        lambda_it: 1.0,
        mean_reduce: false,
    };
    let mut adam = AdamState::new(&model.params);
    let start_epoch = log.records().last().map_or(0, |r| r.epoch);
    for e in 0..cfg.stage2_epochs {
        let lr = lr_at(cfg, TrainStage::Two, e);
        let mut admissible: Vec<usize> = schedule
            .pool(e + 1)?
            .iter()
            .filter_map(|s| by_id.get(s.item_id.as_str()).copied())
            .collect();
        admissible.shuffle(&mut epoch_rng(cfg.seed, TrainStage::Two, e));
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in admissible.chunks(cfg.batch_size) {
            loss_sum += run_tag_batch(model, items, features, chunk, &loss_cfg, cfg, &mut adam, lr)?;
            batches += 1;
        }
        let epoch = start_epoch + e + 1;
        finish_epoch(
            model,
            validation,
            log,
            &mut on_epoch,
            epoch,
            TrainStage::Two,
            lr,
            mean_loss(loss_sum, batches),
        )?;
    }
    Ok(())
}

fn mean_loss(sum: f64, batches: usize) -> f64 {
    if batches == 0 {
        0.0
    } else {
        sum / batches as f64
    }
}

#[allow(clippy::too_many_arguments)]
fn finish_epoch(
    model: &EmbeddingModel,
    validation: &ValidationSet,
    log: &mut TrainLog,
    on_epoch: &mut impl FnMut(usize, &EmbeddingModel) -> Result<()>,
    epoch: usize,
    stage: TrainStage,
    lr: f64,
    loss: f64,
) -> Result<()> {
    let report = evaluate_split(
        model,
        validation.features,
        validation.captions,
        validation.image_ids,
    )?;
    log.push(EpochRecord {
        epoch,
        stage: stage.number(),
        lr,
        loss,
        validation: report,
        selected: false,
    })?;
    on_epoch(epoch, model)
}

// One stage-one batch: forward both pathways, sum the weighted losses, push
// gradients back through every trainable tensor, clip, and step. Pairs
// without a tag bag join the image-sentence terms only. A zero learning
// rate skips the optimizer update.
#[allow(clippy::too_many_arguments)]
fn run_pair_batch(
    model: &mut EmbeddingModel,
    items: &[PairItem],
    features: &FeatureTable,
    chunk: &[usize],
    loss_cfg: &LossConfig,
    cfg: &TrainConfig,
    adam: &mut AdamState,
    lr: f64,
) -> Result<f64> {
    model.params.zero_grads();
    let n = chunk.len();
    let mut feats = Vec::with_capacity(n);
    let mut images = Vec::with_capacity(n);
    let mut sentences = Vec::with_capacity(n);
    let mut caches = Vec::with_capacity(n);
    for &ix in chunk {
        let item = &items[ix];
        let feat = features.require(&item.image_id)?;
        images.push(encode_image(model, feat)?);
        let (s, cache) = encode_sentence_cached(model, &item.tokens)?;
        sentences.push(s);
        caches.push(cache);
        feats.push(feat);
    }

    let is_batch = BatchEmbeddings::new(images.clone(), sentences)?;
    let mut is_out = loss_by_kind(cfg.loss_kind, &is_batch, loss_cfg);
    is_out.scale(loss_cfg.lambda_is);
    let mut total = is_out.value;

    let tagged: Vec<usize> = (0..n)
        .filter(|&p| items[chunk[p]].tag_bag.is_some())
        .collect();
    let mut it_out = None;
    if !tagged.is_empty() {
        let tag_images: Vec<_> = tagged.iter().map(|&p| images[p].clone()).collect();
        let mut tags = Vec::with_capacity(tagged.len());
        for &p in &tagged {
            let bag = items[chunk[p]].tag_bag.as_ref().expect("filtered on Some");
            tags.push(project_tag_bag(model, bag)?);
        }
        let it_batch = BatchEmbeddings::new(tag_images, tags)?;
        let mut out = image_tag_loss(&it_batch, loss_cfg);
        out.scale(loss_cfg.lambda_it);
        total += out.value;
        it_out = Some(out);
    }

    for p in 0..n {
        backprop_image(model, &is_out.image_grads[p], feats[p]);
        backprop_sentence(model, &caches[p], &is_out.text_grads[p]);
    }
    if let Some(out) = &it_out {
        for (m, &p) in tagged.iter().enumerate() {
            backprop_image(model, &out.image_grads[m], feats[p]);
            let bag = items[chunk[p]].tag_bag.as_ref().expect("filtered on Some");
            backprop_tag_bag(model, &out.text_grads[m], bag);
        }
    }

    clip_gradients(&mut model.params, cfg.clip_norm)?;
    if lr != 0.0 {
        adam_step(&mut model.params, adam, lr)?;
    }
    Ok(total)
}

// One stage-two batch: image-tag loss only, gradients into the image and
// tag projections alone.
#[allow(clippy::too_many_arguments)]
fn run_tag_batch(
    model: &mut EmbeddingModel,
    items: &[TagItem],
    features: &FeatureTable,
    chunk: &[usize],
    loss_cfg: &LossConfig,
    cfg: &TrainConfig,
    adam: &mut AdamState,
    lr: f64,
) -> Result<f64> {
    model.params.zero_grads();
    let mut feats = Vec::with_capacity(chunk.len());
    let mut images = Vec::with_capacity(chunk.len());
    let mut tags = Vec::with_capacity(chunk.len());
    for &ix in chunk {
        let item = &items[ix];
        let feat = features.require(&item.image_id)?;
        images.push(encode_image(model, feat)?);
        tags.push(project_tag_bag(model, &item.tag_bag)?);
        feats.push(feat);
    }
    let batch = BatchEmbeddings::new(images, tags)?;
    let mut out = image_tag_loss(&batch, loss_cfg);
    out.scale(loss_cfg.lambda_it);
    for (m, &ix) in chunk.iter().enumerate() {
        backprop_image(model, &out.image_grads[m], feats[m]);
        backprop_tag_bag(model, &out.text_grads[m], &items[ix].tag_bag);
    }
    clip_gradients(&mut model.params, cfg.clip_norm)?;
    if lr != 0.0 {
        adam_step(&mut model.params, adam, lr)?;
    }
    Ok(out.value)
}

/// Checkpoint filename convention shared by training drivers and selection.
pub fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("epoch_{epoch:03}.ckpt"))
}

/// Picks the epoch with the highest validation recall sum (R@1 + R@10 over
/// both directions); ties go to the earliest epoch. Returns the winning
/// epoch and its checkpoint path, which must exist on disk.
pub fn select_best<'a>(
    log: &TrainLog,
    checkpoints: &'a BTreeMap<usize, PathBuf>,
) -> Result<(usize, &'a Path)> {
    let records = log.records();
    let first = records
        .first()
        .ok_or_else(|| Error::Empty("cannot select a model from an empty log".into()))?;
    let mut best = first;
    for rec in &records[1..] {
        if rec.validation.rsum() > best.validation.rsum() {
            best = rec;
        }
    }
    let path = checkpoints.get(&best.epoch).ok_or_else(|| {
        Error::Integrity(format!("no checkpoint recorded for epoch {}", best.epoch))
    })?;
    if !path.exists() {
        return Err(Error::Integrity(format!(
            "checkpoint file '{}' is missing",
            path.display()
        )));
    }
    Ok((best.epoch, path.as_path()))
}
