//! Shared drivers for the integration suites: end-to-end synthetic training
//! through the public library API.

use std::collections::BTreeSet;

use trimodal::curriculum::{build_keyword_list, build_schedule, DifficultyMode};
use trimodal::data_io::text::{default_stopwords, Lemmatizer};
use trimodal::data_io::{filter_web_corpus, CaptionRecord, WebFilterCaps};
use trimodal::encoders::{EmbeddingModel, ModelDims, Vocabulary};
use trimodal::evaluation::{evaluate_split, RetrievalReport};
use trimodal::synth::{
    caption_to_image_recall_at_1, corpus_vocabulary, word_init_map, SynthCorpus,
};
use trimodal::trainer::{
    build_pair_items, build_tag_items, train_stage1, train_stage2, TrainConfig, TrainLog,
    ValidationSet,
};

/// Joint-space width used by every synthetic run.
pub const SYNTH_JOINT_DIM: usize = 24;
/// GRU hidden width used by every synthetic run.
pub const SYNTH_HIDDEN_DIM: usize = 32;

pub struct TwoStageOutcome {
    /// Model state when stage one finished.
    pub after_stage1: EmbeddingModel,
    /// Model state when stage two finished.
    pub after_stage2: EmbeddingModel,
    pub log: TrainLog,
}

/// Builds a model for the corpus and runs both training stages through the
/// library API, returning snapshots after each stage.
pub fn run_two_stage(corpus: &SynthCorpus, cfg: &TrainConfig) -> TwoStageOutcome {
    run_two_stage_with_dims(corpus, cfg, SYNTH_JOINT_DIM, SYNTH_HIDDEN_DIM)
}

/// `run_two_stage` with explicit joint and hidden widths.
pub fn run_two_stage_with_dims(
    corpus: &SynthCorpus,
    cfg: &TrainConfig,
    d: usize,
    d_h: usize,
) -> TwoStageOutcome {
    let dims = ModelDims {
        d,
        d_h,
        v: corpus.features.dim(),
        word_dim: corpus.word_vectors.dim(),
    };
    let vocab = Vocabulary::build(corpus_vocabulary(corpus));
    let mut model = EmbeddingModel::with_word_init(dims, vocab, cfg.seed, &word_init_map(corpus))
        .expect("synthetic dims are valid");

    let lemmatizer = Lemmatizer::empty();
    let lexicon = trimodal::data_io::text::default_pos_lexicon();
    let train_set: BTreeSet<&str> = corpus.split.train.iter().map(String::as_str).collect();
    let train_captions: Vec<CaptionRecord> = corpus
        .captions
        .iter()
        .filter(|r| train_set.contains(r.image_id.as_str()))
        .cloned()
        .collect();
    let pairs = build_pair_items(
        &model,
        &train_captions,
        &corpus.features,
        &corpus.word_vectors,
        &lexicon,
        &lemmatizer,
    )
    .expect("pair items assemble");

    let validation = ValidationSet {
        features: &corpus.features,
        captions: &corpus.captions,
        image_ids: &corpus.split.validation,
    };

    let mut log = TrainLog::new();
    train_stage1(
        &mut model,
        &pairs,
        &corpus.features,
        &validation,
        cfg,
        &mut log,
        |_, _| Ok(()),
    )
    .expect("stage one trains");
    let after_stage1 = model.clone();

    let (accepted, _) = filter_web_corpus(
        &corpus.web_manifest,
        &corpus.word_vectors.vocab(),
        &lemmatizer,
        &WebFilterCaps::default(),
    );
    let keywords = build_keyword_list(&train_captions, &default_stopwords(), &lemmatizer, 50)
        .expect("keywords build");
    let schedule = build_schedule(
        &accepted,
        &keywords,
        &lemmatizer,
        DifficultyMode::Min,
        cfg.stage2_epochs,
    )
    .expect("schedule builds");
    let tag_items = build_tag_items(
        &model,
        &accepted,
        &corpus.web_features,
        &corpus.word_vectors,
        &lemmatizer,
    )
    .expect("tag items assemble");
    assert_eq!(
        tag_items.skipped_without_vectors, 0,
        "every synthetic web entry resolves a tag bag"
    );

    train_stage2(
        &mut model,
        &tag_items.items,
        &corpus.web_features,
        &schedule,
        &validation,
        cfg,
        &mut log,
        |_, _| Ok(()),
    )
    .expect("stage two trains");

    TwoStageOutcome {
        after_stage1,
        after_stage2: model,
        log,
    }
}

/// Validation plus test ids: the full held-out gallery.
pub fn held_out_ids(corpus: &SynthCorpus) -> Vec<String> {
    let mut ids: Vec<String> = corpus
        .split
        .validation
        .iter()
        .chain(&corpus.split.test)
        .cloned()
        .collect();
    ids.sort();
    ids
}

pub struct SynthMetrics {
    pub stage1_report: RetrievalReport,
    pub stage2_report: RetrievalReport,
    pub stage1_webdom_r1: f64,
    pub stage2_webdom_r1: f64,
}

/// Scores both stage snapshots on the held-out gallery.
pub fn measure(corpus: &SynthCorpus, outcome: &TwoStageOutcome) -> SynthMetrics {
    let gallery = held_out_ids(corpus);
    let webdom: BTreeSet<String> = corpus.web_dominated.iter().cloned().collect();
    let report = |model: &EmbeddingModel| {
        evaluate_split(model, &corpus.features, &corpus.captions, &gallery)
            .expect("held-out evaluation succeeds")
    };
    let webdom_r1 = |model: &EmbeddingModel| {
        caption_to_image_recall_at_1(model, &corpus.features, &corpus.captions, &gallery, &webdom)
            .expect("web-dominated recall computes")
    };
    SynthMetrics {
        stage1_report: report(&outcome.after_stage1),
        stage2_report: report(&outcome.after_stage2),
        stage1_webdom_r1: webdom_r1(&outcome.after_stage1),
        stage2_webdom_r1: webdom_r1(&outcome.after_stage2),
    }
}
