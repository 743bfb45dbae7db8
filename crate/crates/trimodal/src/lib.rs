//! trimodal — joint image–text–tag embeddings with webly-supervised training.
//!
//! This library trains a shared embedding space for three modalities:
//! precomputed image features, sentences (a trainable word table feeding a
//! GRU), and bags of tags (mean of fixed word vectors). Matching pairs are
//! pulled together and mismatched pairs pushed apart by bi-directional
//! pairwise ranking losses; scoring is cosine similarity. Training runs in
//! two stages: clean image-caption pairs first (with tag bags derived from
//! caption nouns and verbs), then a web-collected image-tag corpus ordered
//! easy-to-hard by a frequency-based curriculum.
//!
//! The primary interface is the `examples/` directory; each example is a
//! small, runnable tour of one capability:
//!
//! ```text
//! cargo run --example ranking_losses      # VSE vs hardest-negative VSEPP on a toy batch
//! cargo run --example gradient_check      # finite-difference verification of all losses
//! cargo run --example encode_and_score    # build a model, embed all three modalities, score
//! cargo run --example retrieval_eval      # R@K / median-rank evaluation, tie policy included
//! cargo run --example web_filtering       # the four web-corpus filtering rules
//! cargo run --example curriculum_schedule # keyword ranks, difficulty, growing pools
//! cargo run --example train_two_stage     # the full two-stage story on synthetic data
//! ```
//!
//! A thin `trimodal` binary wraps the same library entry points as
//! subcommands (`prepare`, `train`, `eval`, `curriculum`, `selfcheck`) for
//! scripted runs; see `cli` for the manifest and exit-code contract.
//!
//! Modules, bottom up: [`numerics`] (vectors, matrices, parameter sets, the
//! gradient checker), [`losses`] (VSE / VSEPP / image-tag / combined),
//! [`encoders`] (projections, GRU, word table, checkpoints), [`data_io`]
//! (file formats, web filtering, splits), [`curriculum`] (keyword ranks and
//! schedules), [`evaluation`] (recall@K, median rank), [`trainer`] (ADAM,
//! clipping, the two stages), [`synth`] (self-contained demo corpora), and
//! [`cli`].

pub mod cli;
pub mod curriculum;
pub mod data_io;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod numerics;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
