//! Command-line surface binding the pipeline together: dataset preparation,
//! curriculum construction, two-stage training, retrieval evaluation, and
//! gradient self-checks.
//!
//! Exit codes are stable: 0 success, 2 validation/configuration/integrity
//! errors, 3 file format errors, 4 numeric failures, 1 I/O and anything
//! else (see [`Error::exit_code`]).
//!
//! Every command is a pure function of its input files, flags, and seed.
//! The one wall-clock value is the `created_unix` field of the run
//! manifest; no entropy enters outside the configured seed. The CLI uses
//! the built-in stop-word list, the default part-of-speech lexicon, and an
//! empty lemma map; callers needing custom text resources drive the
//! library directly.

use std::collections::{BTreeMap, BTreeSet};
use std::ffi::OsString;
use std::fmt::Display;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::curriculum::{
    build_keyword_list, build_schedule, save_keyword_list, save_schedule, DifficultyMode,
};
use crate::data_io::text::{default_pos_lexicon, default_stopwords, Lemmatizer};
use crate::data_io::{
    derive_dummy_tags, filter_web_corpus, load_captions, load_features, load_id_list,
    load_web_manifest, load_word_vectors, make_splits, save_captions, save_features,
    save_id_list, save_web_manifest, save_word_vectors, CaptionRecord, DatasetSplit,
    FeatureTable, WebFilterCaps, WordVectors,
};
use crate::encoders::{
    encode_image, encode_sentence, encode_sentence_cached, load_model, project_tag_bag,
    save_model, backprop_image, backprop_sentence, backprop_tag_bag, EmbeddingModel, ModelDims,
    Vocabulary,
};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_folds, evaluate_split, RetrievalReport};
use crate::losses::{loss_by_kind, BatchEmbeddings, LossConfig, LossKind};
use crate::numerics::{check_gradient, ParameterSet, RealMatrix, RealVector, Tensor};
use crate::trainer::{
    apply_train_keys, build_pair_items, build_tag_items, checkpoint_path, load_flat_config,
    save_train_log, select_best, train_stage1, train_stage2, TrainConfig, TrainLog,
    ValidationSet,
};

/// File names inside a prepared bundle directory. `prepare` emits them,
/// `train`, `eval`, and `curriculum` consume them. The names match the
/// loaders' documented formats one to one.
pub const FEATURES_FILE: &str = "features.txt";
pub const CAPTIONS_FILE: &str = "captions.txt";
pub const WORD_VECTORS_FILE: &str = "word_vectors.txt";
pub const DUMMY_TAGS_FILE: &str = "dummy_tags.txt";
pub const WEB_MANIFEST_FILE: &str = "web_manifest.txt";
pub const WEB_FEATURES_FILE: &str = "web_features.txt";
pub const REJECTION_FILE: &str = "rejection_report.txt";
pub const TRAIN_IDS_FILE: &str = "train_ids.txt";
pub const VALIDATION_IDS_FILE: &str = "validation_ids.txt";
pub const TEST_IDS_FILE: &str = "test_ids.txt";
/// Run manifest name, used both in bundles (written by `prepare`) and in
/// training output directories (written by `train`).
pub const RUN_MANIFEST_FILE: &str = "run_manifest.txt";
/// Training artifacts inside the `--out` directory.
pub const TRAIN_LOG_FILE: &str = "train_log.txt";
pub const BEST_POINTER_FILE: &str = "best.txt";
pub const LOCK_FILE: &str = "lock";
/// Curriculum artifacts.
pub const KEYWORD_LIST_FILE: &str = "keyword_list.txt";
pub const SCHEDULE_FILE: &str = "schedule.txt";
/// Evaluation report name under `--out`.
pub const EVAL_REPORT_FILE: &str = "eval_report.txt";

/// Relative-error tolerance for the gradient self-check.
pub const SELFCHECK_TOLERANCE: f64 = 1e-4;
const SELFCHECK_EPSILON: f64 = 1e-6;

// ---------------------------------------------------------------------------
// Run manifest

/// Record of one command invocation: the resolved configuration, a digest
/// of every input file, the seed, and the artifact names the command wrote.
///
/// A manifest is written before any training epoch runs, so a crashed run
/// still documents what it was about to do. Digests are recomputed and
/// compared at read time; `train` refuses a bundle whose files changed
/// after `prepare`. `created_unix` is the only wall-clock field.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunManifest {
    pub command: String,
    pub created_unix: u64,
    pub seed: u64,
    /// Resolved configuration snapshot, key=value.
    pub config: BTreeMap<String, String>,
    /// Input file name (relative to the manifest's directory) → SHA-256 hex.
    pub inputs: BTreeMap<String, String>,
    /// Logical artifact name → file name relative to the manifest's directory.
    pub artifacts: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64) -> Self {
        RunManifest {
            command: command.to_string(),
            created_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            seed,
            config: BTreeMap::new(),
            inputs: BTreeMap::new(),
            artifacts: BTreeMap::new(),
        }
    }

    /// Flat key=value rendering; prefixes namespace the three maps.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("command={}\n", self.command));
        out.push_str(&format!("created_unix={}\n", self.created_unix));
        out.push_str(&format!("seed={}\n", self.seed));
        for (k, v) in &self.config {
            out.push_str(&format!("config.{k}={v}\n"));
        }
        for (k, v) in &self.inputs {
            out.push_str(&format!("input.{k}={v}\n"));
        }
        for (k, v) in &self.artifacts {
            out.push_str(&format!("artifact.{k}={v}\n"));
        }
        out
    }

    pub fn from_text(text: &str, source: &str) -> Result<RunManifest> {
        let kv = crate::trainer::parse_flat_config(text, source)?;
        let mut manifest = RunManifest {
            command: String::new(),
            created_unix: 0,
            seed: 0,
            config: BTreeMap::new(),
            inputs: BTreeMap::new(),
            artifacts: BTreeMap::new(),
        };
        for (key, value) in kv {
            if let Some(rest) = key.strip_prefix("config.") {
                manifest.config.insert(rest.to_string(), value);
            } else if let Some(rest) = key.strip_prefix("input.") {
                manifest.inputs.insert(rest.to_string(), value);
            } else if let Some(rest) = key.strip_prefix("artifact.") {
                manifest.artifacts.insert(rest.to_string(), value);
            } else {
                match key.as_str() {
                    "command" => manifest.command = value,
                    "created_unix" => {
                        manifest.created_unix = parse_key("created_unix", &value)?
                    }
                    "seed" => manifest.seed = parse_key("seed", &value)?,
                    other => {
                        return Err(Error::Config(format!(
                            "{source}: unknown manifest key '{other}'"
                        )))
                    }
                }
            }
        }
        if manifest.command.is_empty() {
            return Err(Error::Config(format!("{source}: manifest has no command")));
        }
        Ok(manifest)
    }

    /// Recomputes each input digest relative to `dir` and rejects the first
    /// mismatch. A missing file is a mismatch too.
    pub fn verify_inputs(&self, dir: &Path) -> Result<()> {
        for (name, recorded) in &self.inputs {
            let path = dir.join(name);
            if !path.exists() {
                return Err(Error::Integrity(format!(
                    "input '{name}' listed in the run manifest is missing from {}",
                    dir.display()
                )));
            }
            let current = sha256_hex(&path)?;
            if current != *recorded {
                return Err(Error::Integrity(format!(
                    "input '{name}' changed since the manifest was written \
                     (digest {current}, manifest says {recorded})"
                )));
            }
        }
        Ok(())
    }
}

pub fn save_run_manifest(manifest: &RunManifest, path: &Path) -> Result<()> {
    fs::write(path, manifest.to_text())?;
    Ok(())
}

pub fn load_run_manifest(path: &Path) -> Result<RunManifest> {
    let text = fs::read_to_string(path)?;
    RunManifest::from_text(&text, &path.display().to_string())
}

/// SHA-256 of a file's bytes as lowercase hex.
pub fn sha256_hex(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    let mut out = String::with_capacity(64);
    for byte in hasher.finalize() {
        out.push_str(&format!("{byte:02x}"));
    }
    Ok(out)
}

fn parse_key<T>(key: &str, value: &str) -> Result<T>
where
    T: FromStr,
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("key '{key}': cannot parse '{value}': {e}")))
}

// ---------------------------------------------------------------------------
// Argument types

#[derive(Debug, Parser)]
#[command(
    name = "trimodal",
    about = "Joint image-text-tag embeddings: prepare data, train, evaluate",
    long_about = "Trains a joint image-text-tag embedding from precomputed features \
                  and evaluates cross-modal retrieval.\n\nExit codes: 0 success, \
                  2 validation/configuration/integrity error, 3 file format error, \
                  4 numeric error, 1 I/O or other error."
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate raw inputs and emit a self-describing bundle directory.
    Prepare(PrepareArgs),
    /// Run the two-stage training loop on a prepared bundle.
    Train(TrainArgs),
    /// Score a checkpoint on a bundle split and print a retrieval report.
    Eval(EvalArgs),
    /// Build the keyword list and stage-two schedule from a bundle.
    Curriculum(CurriculumArgs),
    /// Finite-difference checks of every loss and encoder gradient.
    Selfcheck(SelfcheckArgs),
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    /// Image feature table (id<TAB>v1 v2 ...).
    #[arg(long)]
    pub features: PathBuf,
    /// Caption records (image_id<TAB>tok tok ...).
    #[arg(long)]
    pub captions: PathBuf,
    /// Frozen word vectors (token<TAB>v1 v2 ...).
    #[arg(long = "word_vectors")]
    pub word_vectors: PathBuf,
    /// Web corpus manifest; enables the stage-two corpus in the bundle.
    #[arg(long = "web_manifest")]
    pub web_manifest: Option<PathBuf>,
    /// Feature table for web images; required with --web_manifest.
    #[arg(long = "web_features")]
    pub web_features: Option<PathBuf>,
    #[arg(long = "train_ids")]
    pub train_ids: PathBuf,
    #[arg(long = "validation_ids")]
    pub validation_ids: PathBuf,
    #[arg(long = "test_ids")]
    pub test_ids: PathBuf,
    /// Optional flat config; keys: min_english_tags, per_query, per_owner,
    /// dedup_prefix (web filter caps).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Recorded in the bundle manifest; preparation itself draws no entropy.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Bundle directory to create.
    #[arg(long)]
    pub out: PathBuf,
}

/// Training flags mirror [`TrainConfig`] field names verbatim so a grep for
/// a config key finds both spellings.
#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Prepared bundle directory (from `prepare`).
    #[arg(long)]
    pub bundle: PathBuf,
    /// Output directory for checkpoints, log, and manifest. Must differ
    /// from the bundle directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Flat key=value config; accepts every TrainConfig field plus d, d_h,
    /// v, word_dim, keyword_cap, difficulty. Flags override file values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long = "lr0")]
    pub lr0: Option<f64>,
    #[arg(long = "lr_decay_factor")]
    pub lr_decay_factor: Option<f64>,
    #[arg(long = "lr_decay_every")]
    pub lr_decay_every: Option<usize>,
    #[arg(long = "stage1_epochs")]
    pub stage1_epochs: Option<usize>,
    #[arg(long = "stage2_epochs")]
    pub stage2_epochs: Option<usize>,
    #[arg(long = "stage2_lr_scale")]
    pub stage2_lr_scale: Option<f64>,
    #[arg(long = "batch_size")]
    pub batch_size: Option<usize>,
    #[arg(long = "clip_norm")]
    pub clip_norm: Option<f64>,
    #[arg(long)]
    pub margin: Option<f64>,
    /// "vse" or "vsepp".
    #[arg(long = "loss_kind")]
    pub loss_kind: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Joint embedding dimension.
    #[arg(long, default_value = None)]
    pub d: Option<usize>,
    /// GRU hidden dimension.
    #[arg(long = "d_h")]
    pub d_h: Option<usize>,
    /// Expected image feature dimension; checked against the bundle.
    #[arg(long)]
    pub v: Option<usize>,
    /// Expected word vector dimension; checked against the bundle.
    #[arg(long = "word_dim")]
    pub word_dim: Option<usize>,
    /// Keyword list size for the stage-two curriculum.
    #[arg(long = "keyword_cap")]
    pub keyword_cap: Option<usize>,
    /// Difficulty scoring: "min" or "mean".
    #[arg(long)]
    pub difficulty: Option<String>,
    /// Stop after stage one even if the bundle has a web corpus.
    #[arg(long = "stage1-only")]
    pub stage1_only: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Prepared bundle directory.
    #[arg(long)]
    pub bundle: PathBuf,
    /// Model checkpoint to score.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Which id list forms the gallery: "test" or "validation".
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Evaluate the test split as N equal folds and average the reports.
    #[arg(long)]
    pub folds: Option<usize>,
    /// Optional flat config; keys: split, folds. Flags override.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Optional directory for the serialized report.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CurriculumArgs {
    /// Prepared bundle directory with a web corpus.
    #[arg(long)]
    pub bundle: PathBuf,
    /// Output directory for keyword_list.txt and schedule.txt.
    #[arg(long)]
    pub out: PathBuf,
    /// Optional flat config; keys: epochs, keyword_cap, difficulty.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Schedule length in epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long = "keyword_cap")]
    pub keyword_cap: Option<usize>,
    /// Difficulty scoring: "min" or "mean".
    #[arg(long)]
    pub difficulty: Option<String>,
}

#[derive(Debug, Args)]
pub struct SelfcheckArgs {
    /// Randomized instances per checked component.
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Optional flat config; keys: trials, seed.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Test hook: flip the sign of this parameter's analytic gradient so
    /// the check must fail naming it.
    #[arg(long = "fault_param", hide = true)]
    pub fault_param: Option<String>,
}

// ---------------------------------------------------------------------------
// Entry points

/// Parses `args` (the first element is the program name) and runs the
/// selected command, returning the process exit code. Library callers and
/// tests drive this directly; the binary forwards `std::env::args()`.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(err) => {
            // Help and version requests are successes, not usage errors.
            let code = if err.use_stderr() { 2 } else { 0 };
            let _ = err.print();
            return code;
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("error: {err}");
            err.exit_code()
        }
    }
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Prepare(args) => cmd_prepare(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Curriculum(args) => cmd_curriculum(args),
        Command::Selfcheck(args) => cmd_selfcheck(args),
    }
}

// ---------------------------------------------------------------------------
// prepare

/// Validates every raw input, derives dummy tags, filters the web corpus,
/// and writes a bundle directory whose files round-trip byte-identically:
/// running `prepare` on a bundle's own outputs reproduces the data files
/// exactly.
pub fn cmd_prepare(args: &PrepareArgs) -> Result<()> {
    let caps = resolve_prepare_caps(args)?;
    let features = load_features(&args.features)?;
    let captions = load_captions(&args.captions)?;
    let word_vectors = load_word_vectors(&args.word_vectors)?;
    for rec in &captions {
        features.require(&rec.image_id)?;
    }

    let train = load_id_list(&args.train_ids)?;
    let validation = load_id_list(&args.validation_ids)?;
    let test = load_id_list(&args.test_ids)?;
    let split = make_splits(train, validation, test, None)?;
    for id in split.train.iter().chain(&split.validation).chain(&split.test) {
        features.require(id)?;
    }

    let lemmatizer = Lemmatizer::empty();
    let lexicon = default_pos_lexicon();
    let mut dummy_tags = String::new();
    for rec in &captions {
        let tags = derive_dummy_tags(rec, &lexicon, &lemmatizer);
        dummy_tags.push_str(&format!("{}\t{}\n", rec.image_id, tags.join("|")));
    }

    let web = match (&args.web_manifest, &args.web_features) {
        (Some(manifest_path), Some(features_path)) => {
            let entries = load_web_manifest(manifest_path)?;
            let web_features = load_features(features_path)?;
            if web_features.dim() != features.dim() {
                return Err(Error::Shape(format!(
                    "web features have dim {}, clean features have dim {}",
                    web_features.dim(),
                    features.dim()
                )));
            }
            let (accepted, report) =
                filter_web_corpus(&entries, &word_vectors.vocab(), &lemmatizer, &caps);
            for entry in &accepted {
                web_features.require(&entry.image_id)?;
            }
            Some((accepted, report, web_features))
        }
        (Some(_), None) => {
            return Err(Error::Validation(
                "--web_manifest needs --web_features for the web image features".into(),
            ))
        }
        (None, Some(_)) => {
            return Err(Error::Validation(
                "--web_features is only meaningful together with --web_manifest".into(),
            ))
        }
        (None, None) => None,
    };

    fs::create_dir_all(&args.out)?;
    save_features(&features, &args.out.join(FEATURES_FILE))?;
    save_captions(&captions, &args.out.join(CAPTIONS_FILE))?;
    save_word_vectors(&word_vectors, &args.out.join(WORD_VECTORS_FILE))?;
    fs::write(args.out.join(DUMMY_TAGS_FILE), dummy_tags)?;
    save_id_list(&split.train, &args.out.join(TRAIN_IDS_FILE))?;
    save_id_list(&split.validation, &args.out.join(VALIDATION_IDS_FILE))?;
    save_id_list(&split.test, &args.out.join(TEST_IDS_FILE))?;

    let mut manifest = RunManifest::new("prepare", args.seed);
    manifest.config.insert("min_english_tags".into(), caps.min_english_tags.to_string());
    manifest.config.insert("per_query".into(), caps.per_query.to_string());
    manifest.config.insert("per_owner".into(), caps.per_owner.to_string());
    manifest.config.insert("dedup_prefix".into(), caps.dedup_prefix.to_string());

    let mut bundle_files = vec![
        FEATURES_FILE,
        CAPTIONS_FILE,
        WORD_VECTORS_FILE,
        DUMMY_TAGS_FILE,
        TRAIN_IDS_FILE,
        VALIDATION_IDS_FILE,
        TEST_IDS_FILE,
    ];
    if let Some((accepted, report, web_features)) = &web {
        save_web_manifest(accepted, &args.out.join(WEB_MANIFEST_FILE))?;
        save_features(web_features, &args.out.join(WEB_FEATURES_FILE))?;
        fs::write(args.out.join(REJECTION_FILE), format!("{report}\n"))?;
        bundle_files.extend([WEB_MANIFEST_FILE, WEB_FEATURES_FILE, REJECTION_FILE]);
        println!("{report}");
    }
    for name in &bundle_files {
        manifest.inputs.insert((*name).into(), sha256_hex(&args.out.join(name))?);
        manifest.artifacts.insert((*name).into(), (*name).into());
    }
    save_run_manifest(&manifest, &args.out.join(RUN_MANIFEST_FILE))?;
    println!("bundle written to {}", args.out.display());
    Ok(())
}

fn resolve_prepare_caps(args: &PrepareArgs) -> Result<WebFilterCaps> {
    let mut caps = WebFilterCaps::default();
    if let Some(path) = &args.config {
        let kv = load_flat_config(path)?;
        let mut used = BTreeSet::new();
        if let Some(v) = take_key(&kv, &mut used, "min_english_tags")? {
            caps.min_english_tags = v;
        }
        if let Some(v) = take_key(&kv, &mut used, "per_query")? {
            caps.per_query = v;
        }
        if let Some(v) = take_key(&kv, &mut used, "per_owner")? {
            caps.per_owner = v;
        }
        if let Some(v) = take_key(&kv, &mut used, "dedup_prefix")? {
            caps.dedup_prefix = v;
        }
        reject_unknown(&kv, &used, path)?;
    }
    Ok(caps)
}

fn take_key<T>(
    kv: &BTreeMap<String, String>,
    used: &mut BTreeSet<String>,
    key: &str,
) -> Result<Option<T>>
where
    T: FromStr,
    T::Err: Display,
{
    match kv.get(key) {
        Some(value) => {
            used.insert(key.to_string());
            Ok(Some(parse_key(key, value)?))
        }
        None => Ok(None),
    }
}

fn reject_unknown(
    kv: &BTreeMap<String, String>,
    used: &BTreeSet<String>,
    path: &Path,
) -> Result<()> {
    let unknown: Vec<&str> = kv
        .keys()
        .filter(|k| !used.contains(*k))
        .map(String::as_str)
        .collect();
    if unknown.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "{}: unknown config keys: {}",
            path.display(),
            unknown.join(", ")
        )))
    }
}

// ---------------------------------------------------------------------------
// train

/// Everything `train` resolved from defaults, config file, and flags.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSetup {
    pub cfg: TrainConfig,
    pub d: usize,
    pub d_h: usize,
    /// Expected feature dimension, checked against the bundle when set.
    pub expect_v: Option<usize>,
    pub expect_word_dim: Option<usize>,
    pub keyword_cap: usize,
    pub difficulty: DifficultyMode,
}

/// Defaults → config file → flags, rejecting unknown file keys. Flag names
/// equal config keys equal [`TrainConfig`] field names.
pub fn resolve_train_setup(args: &TrainArgs) -> Result<TrainSetup> {
    let mut cfg = TrainConfig::default();
    let mut setup = TrainSetup {
        cfg: cfg.clone(),
        d: 1024,
        d_h: 1024,
        expect_v: None,
        expect_word_dim: None,
        keyword_cap: 1000,
        difficulty: DifficultyMode::Min,
    };
    if let Some(path) = &args.config {
        let kv = load_flat_config(path)?;
        let mut used = apply_train_keys(&mut cfg, &kv)?;
        if let Some(v) = take_key(&kv, &mut used, "d")? {
            setup.d = v;
        }
        if let Some(v) = take_key(&kv, &mut used, "d_h")? {
            setup.d_h = v;
        }
        setup.expect_v = take_key(&kv, &mut used, "v")?.or(setup.expect_v);
        setup.expect_word_dim = take_key(&kv, &mut used, "word_dim")?.or(setup.expect_word_dim);
        if let Some(v) = take_key(&kv, &mut used, "keyword_cap")? {
            setup.keyword_cap = v;
        }
        if let Some(v) = take_key::<String>(&kv, &mut used, "difficulty")? {
            setup.difficulty = v.parse()?;
        }
        reject_unknown(&kv, &used, path)?;
    }
    if let Some(v) = args.lr0 {
        cfg.lr0 = v;
    }
    if let Some(v) = args.lr_decay_factor {
        cfg.lr_decay_factor = v;
    }
    if let Some(v) = args.lr_decay_every {
        cfg.lr_decay_every = v;
    }
    if let Some(v) = args.stage1_epochs {
        cfg.stage1_epochs = v;
    }
    if let Some(v) = args.stage2_epochs {
        cfg.stage2_epochs = v;
    }
    if let Some(v) = args.stage2_lr_scale {
        cfg.stage2_lr_scale = v;
    }
    if let Some(v) = args.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = args.clip_norm {
        cfg.clip_norm = v;
    }
    if let Some(v) = args.margin {
        cfg.margin = v;
    }
    if let Some(kind) = &args.loss_kind {
        cfg.loss_kind = match kind.as_str() {
            "vse" => LossKind::Vse,
            "vsepp" => LossKind::Vsepp,
            other => {
                return Err(Error::Config(format!(
                    "unknown loss kind '{other}' (expected 'vse' or 'vsepp')"
                )))
            }
        };
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.d {
        setup.d = v;
    }
    if let Some(v) = args.d_h {
        setup.d_h = v;
    }
    setup.expect_v = args.v.or(setup.expect_v);
    setup.expect_word_dim = args.word_dim.or(setup.expect_word_dim);
    if let Some(v) = args.keyword_cap {
        setup.keyword_cap = v;
    }
    if let Some(mode) = &args.difficulty {
        setup.difficulty = mode.parse()?;
    }
    cfg.validate()?;
    setup.cfg = cfg;
    Ok(setup)
}

/// Loaded contents of a prepared bundle.
pub struct Bundle {
    pub dir: PathBuf,
    pub features: FeatureTable,
    pub captions: Vec<CaptionRecord>,
    pub word_vectors: WordVectors,
    pub split: DatasetSplit,
    pub web: Option<(Vec<crate::data_io::WebManifestEntry>, FeatureTable)>,
}

/// Loads a bundle directory, first verifying every digest its manifest
/// records. `folds` partitions the test split for fold-averaged evaluation.
pub fn load_bundle(dir: &Path, folds: Option<usize>) -> Result<Bundle> {
    let manifest_path = dir.join(RUN_MANIFEST_FILE);
    if !manifest_path.exists() {
        return Err(Error::Validation(format!(
            "{} is not a prepared bundle (missing {RUN_MANIFEST_FILE}); run prepare first",
            dir.display()
        )));
    }
    let manifest = load_run_manifest(&manifest_path)?;
    manifest.verify_inputs(dir)?;

    let features = load_features(&dir.join(FEATURES_FILE))?;
    let captions = load_captions(&dir.join(CAPTIONS_FILE))?;
    let word_vectors = load_word_vectors(&dir.join(WORD_VECTORS_FILE))?;
    let split = make_splits(
        load_id_list(&dir.join(TRAIN_IDS_FILE))?,
        load_id_list(&dir.join(VALIDATION_IDS_FILE))?,
        load_id_list(&dir.join(TEST_IDS_FILE))?,
        folds,
    )?;
    let web_manifest_path = dir.join(WEB_MANIFEST_FILE);
    let web = if web_manifest_path.exists() {
        let entries = load_web_manifest(&web_manifest_path)?;
        let web_features = load_features(&dir.join(WEB_FEATURES_FILE))?;
        Some((entries, web_features))
    } else {
        None
    };
    Ok(Bundle {
        dir: dir.to_path_buf(),
        features,
        captions,
        word_vectors,
        split,
        web,
    })
}

/// Exclusive-creation lock file; removed when the guard drops, so a failed
/// run does not wedge the output directory.
struct LockGuard {
    path: PathBuf,
}

impl LockGuard {
    fn acquire(dir: &Path) -> Result<LockGuard> {
        let path = dir.join(LOCK_FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(LockGuard { path }),
            Err(err) if err.kind() == io::ErrorKind::AlreadyExists => {
                Err(Error::Validation(format!(
                    "output directory {} is locked by another training run \
                     (remove {} if it is stale)",
                    dir.display(),
                    path.display()
                )))
            }
            Err(err) => Err(err.into()),
        }
    }
}

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Runs stage one and, when the bundle carries a web corpus and
/// `--stage1-only` is absent, stage two; then selects the best epoch by
/// validation recall sum and writes the best-model pointer. A run manifest
/// with input digests and the resolved config lands in `--out` before the
/// first epoch.
pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let setup = resolve_train_setup(args)?;
    let bundle = load_bundle(&args.bundle, None)?;

    if let Some(expect) = setup.expect_v {
        if expect != bundle.features.dim() {
            return Err(Error::Validation(format!(
                "config expects feature dim {expect}, bundle has {}",
                bundle.features.dim()
            )));
        }
    }
    if let Some(expect) = setup.expect_word_dim {
        if expect != bundle.word_vectors.dim() {
            return Err(Error::Validation(format!(
                "config expects word dim {expect}, bundle has {}",
                bundle.word_vectors.dim()
            )));
        }
    }
    if bundle.split.validation.is_empty() {
        return Err(Error::Validation(
            "bundle has an empty validation split; training needs one for model selection".into(),
        ));
    }

    fs::create_dir_all(&args.out)?;
    if same_directory(&args.bundle, &args.out)? {
        return Err(Error::Validation(
            "--out must differ from the bundle directory".into(),
        ));
    }
    let lock = LockGuard::acquire(&args.out)?;

    let cfg = &setup.cfg;
    let dims = ModelDims {
        d: setup.d,
        d_h: setup.d_h,
        v: bundle.features.dim(),
        word_dim: bundle.word_vectors.dim(),
    };
    let vocab = Vocabulary::build(
        bundle
            .captions
            .iter()
            .flat_map(|rec| rec.tokens.iter().cloned()),
    );
    let mut model =
        EmbeddingModel::with_word_init(dims, vocab, cfg.seed, bundle.word_vectors.as_map())?;

    let mut manifest = RunManifest::new("train", cfg.seed);
    record_train_config(&mut manifest, &setup, args.stage1_only, &dims);
    for (name, _) in bundle_data_files(&bundle) {
        manifest
            .inputs
            .insert(name.to_string(), sha256_hex(&bundle.dir.join(name))?);
    }
    manifest.artifacts.insert("train_log".into(), TRAIN_LOG_FILE.into());
    manifest.artifacts.insert("best_pointer".into(), BEST_POINTER_FILE.into());
    manifest.artifacts.insert("checkpoints".into(), "epoch_*.ckpt".into());
    save_run_manifest(&manifest, &args.out.join(RUN_MANIFEST_FILE))?;

    let lemmatizer = Lemmatizer::empty();
    let lexicon = default_pos_lexicon();
    let train_set: BTreeSet<&str> = bundle.split.train.iter().map(String::as_str).collect();
    let train_captions: Vec<CaptionRecord> = bundle
        .captions
        .iter()
        .filter(|rec| train_set.contains(rec.image_id.as_str()))
        .cloned()
        .collect();
    let pairs = build_pair_items(
        &model,
        &train_captions,
        &bundle.features,
        &bundle.word_vectors,
        &lexicon,
        &lemmatizer,
    )?;
    let validation = ValidationSet {
        features: &bundle.features,
        captions: &bundle.captions,
        image_ids: &bundle.split.validation,
    };

    let mut log = TrainLog::new();
    let mut checkpoints: BTreeMap<usize, PathBuf> = BTreeMap::new();
    let out_dir = args.out.clone();
    let mut save_epoch = |epoch: usize, model: &EmbeddingModel| -> Result<()> {
        let path = checkpoint_path(&out_dir, epoch);
        save_model(model, &path)?;
        checkpoints.insert(epoch, path);
        Ok(())
    };

    train_stage1(&mut model, &pairs, &bundle.features, &validation, cfg, &mut log, &mut save_epoch)?;
    println!("stage 1 done: {} epochs", cfg.stage1_epochs);

    match (&bundle.web, args.stage1_only) {
        (Some((entries, web_features)), false) => {
            let (accepted, _) = filter_web_corpus(
                entries,
                &bundle.word_vectors.vocab(),
                &lemmatizer,
                &WebFilterCaps::default(),
            );
            let keywords = build_keyword_list(
                &train_captions,
                &default_stopwords(),
                &lemmatizer,
                setup.keyword_cap,
            )?;
            let schedule = build_schedule(
                &accepted,
                &keywords,
                &lemmatizer,
                setup.difficulty,
                cfg.stage2_epochs,
            )?;
            let built = build_tag_items(&model, &accepted, web_features, &bundle.word_vectors, &lemmatizer)?;
            if built.skipped_without_vectors > 0 {
                println!(
                    "stage 2: skipped {} web items without any word vector",
                    built.skipped_without_vectors
                );
            }
            train_stage2(
                &mut model,
                &built.items,
                web_features,
                &schedule,
                &validation,
                cfg,
                &mut log,
                &mut save_epoch,
            )?;
            println!("stage 2 done: {} epochs", cfg.stage2_epochs);
        }
        (Some(_), true) => println!("stage 2 skipped (--stage1-only)"),
        (None, _) => println!("stage 2 skipped (bundle has no web corpus)"),
    }

    let (best_epoch, best_path) = select_best(&log, &checkpoints)?;
    log.mark_selected(best_epoch)?;
    save_train_log(&log, &args.out.join(TRAIN_LOG_FILE))?;
    let best_name = best_path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let best_rsum = log
        .records()
        .iter()
        .find(|r| r.epoch == best_epoch)
        .map(|r| r.validation.rsum())
        .unwrap_or(f64::NAN);
    fs::write(
        args.out.join(BEST_POINTER_FILE),
        format!("best_epoch={best_epoch}\nbest_checkpoint={best_name}\nbest_rsum={best_rsum}\n"),
    )?;
    drop(lock);
    println!("best epoch {best_epoch} (validation rsum {best_rsum})");
    println!("artifacts in {}", args.out.display());
    Ok(())
}

fn same_directory(a: &Path, b: &Path) -> Result<bool> {
    Ok(fs::canonicalize(a)? == fs::canonicalize(b)?)
}

fn record_train_config(
    manifest: &mut RunManifest,
    setup: &TrainSetup,
    stage1_only: bool,
    dims: &ModelDims,
) {
    let cfg = &setup.cfg;
    let pairs: Vec<(&str, String)> = vec![
        ("lr0", cfg.lr0.to_string()),
        ("lr_decay_factor", cfg.lr_decay_factor.to_string()),
        ("lr_decay_every", cfg.lr_decay_every.to_string()),
        ("stage1_epochs", cfg.stage1_epochs.to_string()),
        ("stage2_epochs", cfg.stage2_epochs.to_string()),
        ("stage2_lr_scale", cfg.stage2_lr_scale.to_string()),
        ("batch_size", cfg.batch_size.to_string()),
        ("clip_norm", cfg.clip_norm.to_string()),
        ("margin", cfg.margin.to_string()),
        ("loss_kind", cfg.loss_kind.name().to_string()),
        ("seed", cfg.seed.to_string()),
        ("d", dims.d.to_string()),
        ("d_h", dims.d_h.to_string()),
        ("v", dims.v.to_string()),
        ("word_dim", dims.word_dim.to_string()),
        ("keyword_cap", setup.keyword_cap.to_string()),
        (
            "difficulty",
            match setup.difficulty {
                DifficultyMode::Min => "min".to_string(),
                DifficultyMode::Mean => "mean".to_string(),
            },
        ),
        ("stage1_only", stage1_only.to_string()),
    ];
    for (key, value) in pairs {
        manifest.config.insert(key.to_string(), value);
    }
}

fn bundle_data_files(bundle: &Bundle) -> Vec<(&'static str, bool)> {
    let mut files = vec![
        (FEATURES_FILE, true),
        (CAPTIONS_FILE, true),
        (WORD_VECTORS_FILE, true),
        (TRAIN_IDS_FILE, true),
        (VALIDATION_IDS_FILE, true),
        (TEST_IDS_FILE, true),
    ];
    if bundle.web.is_some() {
        files.push((WEB_MANIFEST_FILE, true));
        files.push((WEB_FEATURES_FILE, true));
    }
    files
}

// ---------------------------------------------------------------------------
// eval

/// Scores a checkpoint on the chosen bundle split, printing a fixed-width
/// table and, with `--out`, writing the full-precision key=value record.
/// `--folds N` averages per-fold reports over the test split.
pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let (split_name, folds) = resolve_eval_options(args)?;
    let bundle = load_bundle(&args.bundle, folds)?;
    let model = load_model(&args.checkpoint)?;
    if model.dims.v != bundle.features.dim() {
        return Err(Error::Validation(format!(
            "checkpoint expects feature dim {}, bundle has {}",
            model.dims.v,
            bundle.features.dim()
        )));
    }

    let report = match folds {
        Some(_) => {
            if split_name != "test" {
                return Err(Error::Validation(
                    "--folds applies to the test split only".into(),
                ));
            }
            evaluate_folds(&model, &bundle.features, &bundle.captions, &bundle.split)?
        }
        None => {
            let ids = match split_name.as_str() {
                "test" => &bundle.split.test,
                "validation" => &bundle.split.validation,
                other => {
                    return Err(Error::Validation(format!(
                        "unknown split '{other}' (expected 'test' or 'validation')"
                    )))
                }
            };
            evaluate_split(&model, &bundle.features, &bundle.captions, ids)?
        }
    };

    print!("{}", render_report_table(&report));
    if let Some(out) = &args.out {
        fs::create_dir_all(out)?;
        let mut record = String::new();
        record.push_str(&format!("split={split_name}\n"));
        record.push_str(&format!("folds={}\n", folds.unwrap_or(1)));
        record.push_str(&format!("{report}\n"));
        fs::write(out.join(EVAL_REPORT_FILE), record)?;
        println!("report written to {}", out.join(EVAL_REPORT_FILE).display());
    }
    Ok(())
}

fn resolve_eval_options(args: &EvalArgs) -> Result<(String, Option<usize>)> {
    let mut split = None;
    let mut folds = None;
    if let Some(path) = &args.config {
        let kv = load_flat_config(path)?;
        let mut used = BTreeSet::new();
        split = take_key::<String>(&kv, &mut used, "split")?;
        folds = take_key::<usize>(&kv, &mut used, "folds")?;
        reject_unknown(&kv, &used, path)?;
    }
    // The flag default "test" only applies when the config stays silent.
    let split = if args.split != "test" || split.is_none() {
        args.split.clone()
    } else {
        split.unwrap()
    };
    Ok((split, args.folds.or(folds)))
}

/// Two metric rows plus the recall sum, one decimal place, fixed columns.
pub fn render_report_table(report: &RetrievalReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<15}{:>8}{:>8}{:>8}\n",
        "direction", "R@1", "R@10", "MedR"
    ));
    for side in [&report.image_to_text, &report.text_to_image] {
        out.push_str(&format!(
            "{:<15}{:>8.1}{:>8.1}{:>8.1}\n",
            side.direction.to_string(),
            side.r_at_1,
            side.r_at_10,
            side.med_r
        ));
    }
    out.push_str(&format!("{:<15}{:>8.1}\n", "rsum", report.rsum()));
    out
}

// ---------------------------------------------------------------------------
// curriculum

/// Builds the clean-corpus keyword list and the stage-two schedule from a
/// bundle's web corpus, saving both as text artifacts.
pub fn cmd_curriculum(args: &CurriculumArgs) -> Result<()> {
    let (epochs, keyword_cap, difficulty) = resolve_curriculum_options(args)?;
    let bundle = load_bundle(&args.bundle, None)?;
    let (entries, _) = bundle.web.as_ref().ok_or_else(|| {
        Error::Validation("bundle has no web corpus; curriculum needs one".into())
    })?;

    let lemmatizer = Lemmatizer::empty();
    let train_set: BTreeSet<&str> = bundle.split.train.iter().map(String::as_str).collect();
    let train_captions: Vec<CaptionRecord> = bundle
        .captions
        .iter()
        .filter(|rec| train_set.contains(rec.image_id.as_str()))
        .cloned()
        .collect();
    let keywords = build_keyword_list(&train_captions, &default_stopwords(), &lemmatizer, keyword_cap)?;
    let schedule = build_schedule(entries, &keywords, &lemmatizer, difficulty, epochs)?;

    fs::create_dir_all(&args.out)?;
    save_keyword_list(&keywords, &args.out.join(KEYWORD_LIST_FILE))?;
    save_schedule(&schedule, &args.out.join(SCHEDULE_FILE))?;
    println!(
        "keywords={} items={} epochs={} pool_first={} pool_final={}",
        keywords.entries().len(),
        schedule.items().len(),
        schedule.epochs(),
        schedule.pool(1)?.len(),
        schedule.pool(epochs)?.len()
    );
    println!("artifacts in {}", args.out.display());
    Ok(())
}

fn resolve_curriculum_options(args: &CurriculumArgs) -> Result<(usize, usize, DifficultyMode)> {
    let mut epochs = TrainConfig::default().stage2_epochs;
    let mut cap = 1000;
    let mut difficulty = DifficultyMode::Min;
    if let Some(path) = &args.config {
        let kv = load_flat_config(path)?;
        let mut used = BTreeSet::new();
        if let Some(v) = take_key(&kv, &mut used, "epochs")? {
            epochs = v;
        }
        if let Some(v) = take_key(&kv, &mut used, "keyword_cap")? {
            cap = v;
        }
        if let Some(v) = take_key::<String>(&kv, &mut used, "difficulty")? {
            difficulty = v.parse()?;
        }
        reject_unknown(&kv, &used, path)?;
    }
    if let Some(v) = args.epochs {
        epochs = v;
    }
    if let Some(v) = args.keyword_cap {
        cap = v;
    }
    if let Some(mode) = &args.difficulty {
        difficulty = mode.parse()?;
    }
    Ok((epochs, cap, difficulty))
}

// ---------------------------------------------------------------------------
// selfcheck

/// Aggregated finite-difference outcome for one checked component.
#[derive(Debug, Clone)]
pub struct ComponentOutcome {
    pub name: &'static str,
    pub entries_checked: usize,
    pub entries_skipped: usize,
    pub max_rel_error: f64,
    /// (parameter, flat index, relative error) for entries over tolerance.
    pub failures: Vec<(String, usize, f64)>,
}

impl ComponentOutcome {
    fn new(name: &'static str) -> Self {
        ComponentOutcome {
            name,
            entries_checked: 0,
            entries_skipped: 0,
            max_rel_error: 0.0,
            failures: Vec::new(),
        }
    }

    fn absorb(&mut self, report: crate::numerics::GradCheckReport) {
        self.entries_checked += report.entries_checked;
        self.entries_skipped += report.entries_skipped;
        self.max_rel_error = self.max_rel_error.max(report.max_rel_error);
        self.failures.extend(report.failures);
    }

    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Results of [`run_selfcheck`] over every component.
#[derive(Debug, Clone)]
pub struct SelfcheckSummary {
    pub trials: usize,
    pub tolerance: f64,
    pub components: Vec<ComponentOutcome>,
}

impl SelfcheckSummary {
    pub fn passed(&self) -> bool {
        self.components.iter().all(ComponentOutcome::passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.components
            .iter()
            .fold(0.0, |acc, c| acc.max(c.max_rel_error))
    }
}

/// Checks analytic gradients against central differences for every loss at
/// the embedding level and for the full image, sentence, and tag encoding
/// pipelines, at `trials` randomized small shapes each (batch ≤ 6, dims ≤ 8).
/// `fault` flips the sign of that parameter's analytic gradient wherever it
/// appears, which must surface as a failure naming it; an unmatched fault
/// name is itself an error.
pub fn run_selfcheck(trials: usize, seed: u64, fault: Option<&str>) -> Result<SelfcheckSummary> {
    if trials == 0 {
        return Err(Error::Parameter("selfcheck needs at least one trial".into()));
    }
    let mut summary = SelfcheckSummary {
        trials,
        tolerance: SELFCHECK_TOLERANCE,
        components: vec![
            ComponentOutcome::new("vse"),
            ComponentOutcome::new("vsepp"),
            ComponentOutcome::new("image_tag"),
            ComponentOutcome::new("sentence_pipeline"),
            ComponentOutcome::new("tag_pipeline"),
        ],
    };
    let mut fault_hit = false;
    for trial in 0..trials {
        let trial_seed = seed ^ (trial as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let mut rng = ChaCha8Rng::seed_from_u64(trial_seed);
        for (slot, kind) in [(0, LossKind::Vse), (1, LossKind::Vsepp), (2, LossKind::ImageTag)] {
            let report = check_loss_component(kind, &mut rng, fault, &mut fault_hit)?;
            summary.components[slot].absorb(report);
        }
        let report = check_sentence_pipeline(&mut rng, trial_seed, fault, &mut fault_hit)?;
        summary.components[3].absorb(report);
        let report = check_tag_pipeline(&mut rng, trial_seed, fault, &mut fault_hit)?;
        summary.components[4].absorb(report);
    }
    if let Some(name) = fault {
        if !fault_hit {
            return Err(Error::Parameter(format!(
                "fault parameter '{name}' matched no checked component"
            )));
        }
    }
    Ok(summary)
}

fn random_vector(rng: &mut ChaCha8Rng, dim: usize) -> RealVector {
    RealVector::new((0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

fn flatten(vectors: &[RealVector]) -> Vec<f64> {
    vectors
        .iter()
        .flat_map(|v| v.as_slice().iter().copied())
        .collect()
}

fn rows_of(params: &ParameterSet, name: &str, n: usize, dim: usize) -> Vec<RealVector> {
    let flat = params.value(name).as_slice();
    (0..n)
        .map(|k| RealVector::new(flat[k * dim..(k + 1) * dim].to_vec()))
        .collect()
}

fn inject_fault(params: &mut ParameterSet, fault: Option<&str>, fault_hit: &mut bool) {
    if let Some(name) = fault {
        if params.contains(name) {
            // A zero gradient stays zero under the sign flip, so only a
            // parameter the component actually exercises registers a hit.
            let grad = params.grad_mut(name).as_mut_slice();
            if grad.iter().any(|g| *g != 0.0) {
                *fault_hit = true;
            }
            for g in grad {
                *g = -*g;
            }
        }
    }
}

/// Embedding-level check: the batch embeddings themselves are the
/// parameters, so the loss gradients are compared directly.
fn check_loss_component(
    kind: LossKind,
    rng: &mut ChaCha8Rng,
    fault: Option<&str>,
    fault_hit: &mut bool,
) -> Result<crate::numerics::GradCheckReport> {
    let n = rng.gen_range(2..=6);
    let dim = rng.gen_range(2..=8);
    let images: Vec<RealVector> = (0..n).map(|_| random_vector(rng, dim)).collect();
    let texts: Vec<RealVector> = (0..n).map(|_| random_vector(rng, dim)).collect();
    let loss_cfg = LossConfig::default();

    let mut params = ParameterSet::new();
    params.register("images", Tensor::Matrix(RealMatrix::new(n, dim, flatten(&images))?))?;
    params.register("texts", Tensor::Matrix(RealMatrix::new(n, dim, flatten(&texts))?))?;

    let base = loss_by_kind(kind, &BatchEmbeddings::new(images, texts)?, &loss_cfg);
    for (name, grads) in [("images", &base.image_grads), ("texts", &base.text_grads)] {
        let buffer = params.grad_matrix_mut(name).as_mut_slice();
        for (k, grad) in grads.iter().enumerate() {
            buffer[k * dim..(k + 1) * dim].copy_from_slice(grad.as_slice());
        }
    }
    inject_fault(&mut params, fault, fault_hit);

    check_gradient(
        |p| {
            let batch =
                BatchEmbeddings::new(rows_of(p, "images", n, dim), rows_of(p, "texts", n, dim))?;
            Ok(loss_by_kind(kind, &batch, &loss_cfg).probe())
        },
        &mut params,
        SELFCHECK_EPSILON,
        SELFCHECK_TOLERANCE,
    )
}

const SELFCHECK_TOKENS: [&str; 6] = ["amber", "beacon", "cobble", "dune", "ember", "fjord"];

fn small_model(rng: &mut ChaCha8Rng, seed: u64) -> Result<EmbeddingModel> {
    let dims = ModelDims {
        d: rng.gen_range(2..=8),
        d_h: rng.gen_range(2..=8),
        v: rng.gen_range(2..=8),
        word_dim: rng.gen_range(2..=8),
    };
    let vocab_size = rng.gen_range(3..=SELFCHECK_TOKENS.len());
    let vocab = Vocabulary::build(SELFCHECK_TOKENS[..vocab_size].iter().copied());
    EmbeddingModel::new(dims, vocab, seed)
}

/// Full sentence pathway: word table → GRU → sentence projection → loss,
/// against images through the image projection. Every model parameter is
/// checked; those outside the pathway must show a zero analytic and a zero
/// numeric gradient.
fn check_sentence_pipeline(
    rng: &mut ChaCha8Rng,
    seed: u64,
    fault: Option<&str>,
    fault_hit: &mut bool,
) -> Result<crate::numerics::GradCheckReport> {
    let mut model = small_model(rng, seed)?;
    let n = rng.gen_range(2..=6);
    let features: Vec<RealVector> = (0..n).map(|_| random_vector(rng, model.dims.v)).collect();
    let sequences: Vec<Vec<usize>> = (0..n)
        .map(|_| {
            let len = rng.gen_range(1..=4);
            let tokens: Vec<String> = (0..len)
                .map(|_| {
                    // An out-of-vocabulary token exercises the unknown row.
                    if rng.gen_range(0..10) == 0 {
                        "zephyr".to_string()
                    } else {
                        SELFCHECK_TOKENS[rng.gen_range(0..SELFCHECK_TOKENS.len())].to_string()
                    }
                })
                .collect();
            model.token_ids(&tokens)
        })
        .collect();
    let loss_cfg = LossConfig::default();

    let mut caches = Vec::with_capacity(n);
    let mut images = Vec::with_capacity(n);
    let mut texts = Vec::with_capacity(n);
    for k in 0..n {
        images.push(encode_image(&model, &features[k])?);
        let (s, cache) = encode_sentence_cached(&model, &sequences[k])?;
        texts.push(s);
        caches.push(cache);
    }
    let base = loss_by_kind(LossKind::Vsepp, &BatchEmbeddings::new(images, texts)?, &loss_cfg);
    model.params.zero_grads();
    for k in 0..n {
        backprop_image(&mut model, &base.image_grads[k], &features[k]);
        backprop_sentence(&mut model, &caches[k], &base.text_grads[k]);
    }

    let EmbeddingModel { dims, vocab, normalize_joint, seed: model_seed, mut params } = model;
    inject_fault(&mut params, fault, fault_hit);
    check_gradient(
        |p| {
            let probe_model = EmbeddingModel {
                dims,
                vocab: vocab.clone(),
                normalize_joint,
                seed: model_seed,
                params: p.clone(),
            };
            let mut images = Vec::with_capacity(n);
            let mut texts = Vec::with_capacity(n);
            for k in 0..n {
                images.push(encode_image(&probe_model, &features[k])?);
                texts.push(encode_sentence(&probe_model, &sequences[k])?);
            }
            Ok(loss_by_kind(LossKind::Vsepp, &BatchEmbeddings::new(images, texts)?, &loss_cfg).probe())
        },
        &mut params,
        SELFCHECK_EPSILON,
        SELFCHECK_TOLERANCE,
    )
}

/// Image and tag projections against the image-tag loss.
fn check_tag_pipeline(
    rng: &mut ChaCha8Rng,
    seed: u64,
    fault: Option<&str>,
    fault_hit: &mut bool,
) -> Result<crate::numerics::GradCheckReport> {
    let mut model = small_model(rng, seed.wrapping_add(1))?;
    let n = rng.gen_range(2..=6);
    let features: Vec<RealVector> = (0..n).map(|_| random_vector(rng, model.dims.v)).collect();
    let bags: Vec<RealVector> = (0..n)
        .map(|_| random_vector(rng, model.dims.word_dim))
        .collect();
    let loss_cfg = LossConfig::default();

    let mut images = Vec::with_capacity(n);
    let mut tags = Vec::with_capacity(n);
    for k in 0..n {
        images.push(encode_image(&model, &features[k])?);
        tags.push(project_tag_bag(&model, &bags[k])?);
    }
    let base = loss_by_kind(LossKind::ImageTag, &BatchEmbeddings::new(images, tags)?, &loss_cfg);
    model.params.zero_grads();
    for k in 0..n {
        backprop_image(&mut model, &base.image_grads[k], &features[k]);
        backprop_tag_bag(&mut model, &base.text_grads[k], &bags[k]);
    }

    let EmbeddingModel { dims, vocab, normalize_joint, seed: model_seed, mut params } = model;
    inject_fault(&mut params, fault, fault_hit);
    check_gradient(
        |p| {
            let probe_model = EmbeddingModel {
                dims,
                vocab: vocab.clone(),
                normalize_joint,
                seed: model_seed,
                params: p.clone(),
            };
            let mut images = Vec::with_capacity(n);
            let mut tags = Vec::with_capacity(n);
            for k in 0..n {
                images.push(encode_image(&probe_model, &features[k])?);
                tags.push(project_tag_bag(&probe_model, &bags[k])?);
            }
            Ok(loss_by_kind(LossKind::ImageTag, &BatchEmbeddings::new(images, tags)?, &loss_cfg).probe())
        },
        &mut params,
        SELFCHECK_EPSILON,
        SELFCHECK_TOLERANCE,
    )
}

/// Runs [`run_selfcheck`] and prints one line per component; any failure
/// lists the offending parameters and exits with the numeric error code.
pub fn cmd_selfcheck(args: &SelfcheckArgs) -> Result<()> {
    let (trials, seed) = resolve_selfcheck_options(args)?;
    let summary = run_selfcheck(trials, seed, args.fault_param.as_deref())?;
    println!(
        "gradient self-check: {} trials per component, tolerance {:e}",
        summary.trials, summary.tolerance
    );
    println!(
        "{:<20}{:>9}{:>9}{:>15}  {}",
        "component", "entries", "skipped", "max_rel_error", "status"
    );
    for component in &summary.components {
        println!(
            "{:<20}{:>9}{:>9}{:>15.2e}  {}",
            component.name,
            component.entries_checked,
            component.entries_skipped,
            component.max_rel_error,
            if component.passed() { "pass" } else { "FAIL" }
        );
    }
    if summary.passed() {
        println!("all components passed (max rel error {:.2e})", summary.max_rel_error());
        Ok(())
    } else {
        let mut worst: Vec<(&'static str, &(String, usize, f64))> = Vec::new();
        for component in &summary.components {
            for failure in &component.failures {
                worst.push((component.name, failure));
            }
        }
        worst.sort_by(|a, b| {
            b.1 .2
                .partial_cmp(&a.1 .2)
                .expect("relative errors are finite")
        });
        for (component, (param, idx, rel)) in worst.iter().take(5) {
            println!("  {component}: parameter '{param}' entry {idx}: rel error {rel:.2e}");
        }
        let (component, (param, _, rel)) = worst[0];
        Err(Error::Numeric(format!(
            "gradient self-check failed in {component}: parameter '{param}' rel error {rel:.2e}"
        )))
    }
}

fn resolve_selfcheck_options(args: &SelfcheckArgs) -> Result<(usize, u64)> {
    let mut trials = 25;
    let mut seed = 0;
    if let Some(path) = &args.config {
        let kv = load_flat_config(path)?;
        let mut used = BTreeSet::new();
        if let Some(v) = take_key(&kv, &mut used, "trials")? {
            trials = v;
        }
        if let Some(v) = take_key(&kv, &mut used, "seed")? {
            seed = v;
        }
        reject_unknown(&kv, &used, path)?;
    }
    Ok((args.trials.unwrap_or(trials), args.seed.unwrap_or(seed)))
}
