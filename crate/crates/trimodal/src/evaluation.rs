//! Cross-modal retrieval metrics: R@1, R@10, Median Rank in both
//! directions, their sum (rsum), and fold-averaged evaluation.
//!
//! Ranking uses the pessimistic tie policy: a gallery item that ties a
//! ground-truth match's score and is not itself a match counts as ranked
//! above it. Ranks are therefore deterministic and never flattered by score
//! collisions. A query with several matches is scored by its best (lowest)
//! match rank.

use std::collections::BTreeSet;
use std::fmt;

use crate::data_io::{CaptionRecord, FeatureTable};
use crate::encoders::{encode_image, encode_sentence, EmbeddingModel};
use crate::error::{Error, Result};
use crate::numerics::{cosine_similarity, RealVector};

/// Q×G score table plus each query's set of matching gallery indices.
#[derive(Debug, Clone)]
pub struct SimilarityTable {
    q: usize,
    g: usize,
    scores: Vec<f64>,
    ground_truth: Vec<BTreeSet<usize>>,
}

impl SimilarityTable {
    /// Validates shape, finiteness, and that every query has at least one
    /// in-range ground-truth match.
    pub fn new(rows: Vec<Vec<f64>>, ground_truth: Vec<BTreeSet<usize>>) -> Result<Self> {
        let q = rows.len();
        if q == 0 {
            return Err(Error::Empty("similarity table has no queries".into()));
        }
        if ground_truth.len() != q {
            return Err(Error::Shape(format!(
                "{} ground-truth sets for {q} queries",
                ground_truth.len()
            )));
        }
        let g = rows[0].len();
        if g == 0 {
            return Err(Error::Empty("similarity table has no gallery items".into()));
        }
        let mut scores = Vec::with_capacity(q * g);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != g {
                return Err(Error::Shape(format!(
                    "query {i} has {} scores, expected {g}",
                    row.len()
                )));
            }
            for &s in row {
                if !s.is_finite() {
                    return Err(Error::Numeric(format!("non-finite score in query {i}")));
                }
            }
            scores.extend_from_slice(row);
        }
        for (i, gt) in ground_truth.iter().enumerate() {
            if gt.is_empty() {
                return Err(Error::Validation(format!("query {i} has no ground-truth match")));
            }
            if let Some(&bad) = gt.iter().find(|&&m| m >= g) {
                return Err(Error::Validation(format!(
                    "query {i} ground truth {bad} outside gallery 0..{g}"
                )));
            }
        }
        Ok(SimilarityTable { q, g, scores, ground_truth })
    }

    pub fn query_count(&self) -> usize {
        self.q
    }

    pub fn gallery_len(&self) -> usize {
        self.g
    }

    fn row(&self, q: usize) -> &[f64] {
        &self.scores[q * self.g..(q + 1) * self.g]
    }

    /// Pessimistic rank of one query's best ground-truth match: for a match
    /// m, rank(m) = 1 + #{j : s_j > s_m} + #{j not a match : s_j = s_m};
    /// the query's rank is the minimum over its matches.
    pub fn best_rank(&self, q: usize) -> usize {
        let row = self.row(q);
        let gt = &self.ground_truth[q];
        gt.iter()
            .map(|&m| {
                let sm = row[m];
                let above = row
                    .iter()
                    .enumerate()
                    .filter(|&(j, &s)| s > sm || (s == sm && !gt.contains(&j)))
                    .count();
                above + 1
            })
            .min()
            .expect("ground truth validated non-empty")
    }

    fn best_ranks(&self) -> Vec<usize> {
        (0..self.q).map(|q| self.best_rank(q)).collect()
    }
}

/// Percentage of queries whose best ground-truth rank is at most k.
pub fn recall_at_k(table: &SimilarityTable, k: usize) -> Result<f64> {
    if k == 0 || k > table.gallery_len() {
        return Err(Error::Parameter(format!(
            "k = {k} outside 1..={}",
            table.gallery_len()
        )));
    }
    let hits = table.best_ranks().iter().filter(|&&r| r <= k).count();
    Ok(100.0 * hits as f64 / table.query_count() as f64)
}

/// Median of the per-query best ground-truth ranks; an even query count
/// takes the mean of the two central values.
pub fn median_rank(table: &SimilarityTable) -> f64 {
    let mut ranks = table.best_ranks();
    ranks.sort_unstable();
    let n = ranks.len();
    if n % 2 == 1 {
        ranks[n / 2] as f64
    } else {
        (ranks[n / 2 - 1] + ranks[n / 2]) as f64 / 2.0
    }
}

/// Retrieval direction between the image and sentence modalities.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    ImageToText,
    TextToImage,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::ImageToText => "image_to_text",
            Direction::TextToImage => "text_to_image",
        })
    }
}

/// Metrics for one direction. `r_at_10` is computed at k = min(10, G).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DirectionReport {
    pub direction: Direction,
    pub r_at_1: f64,
    pub r_at_10: f64,
    pub med_r: f64,
}

/// Both directions plus their recall sum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetrievalReport {
    pub image_to_text: DirectionReport,
    pub text_to_image: DirectionReport,
}

impl RetrievalReport {
    /// Sum of the four recall percentages, the model-selection criterion.
    pub fn rsum(&self) -> f64 {
        self.image_to_text.r_at_1
            + self.image_to_text.r_at_10
            + self.text_to_image.r_at_1
            + self.text_to_image.r_at_10
    }
}

impl fmt::Display for RetrievalReport {
    /// The structured key=value record form.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "r1_i2t={}", self.image_to_text.r_at_1)?;
        writeln!(f, "r10_i2t={}", self.image_to_text.r_at_10)?;
        writeln!(f, "medr_i2t={}", self.image_to_text.med_r)?;
        writeln!(f, "r1_t2i={}", self.text_to_image.r_at_1)?;
        writeln!(f, "r10_t2i={}", self.text_to_image.r_at_10)?;
        writeln!(f, "medr_t2i={}", self.text_to_image.med_r)?;
        writeln!(f, "rsum={}", self.rsum())?;
        write!(f, "tie_policy=pessimistic")
    }
}

fn direction_report(table: &SimilarityTable, direction: Direction) -> Result<DirectionReport> {
    let k10 = table.gallery_len().min(10);
    Ok(DirectionReport {
        direction,
        r_at_1: recall_at_k(table, 1)?,
        r_at_10: recall_at_k(table, k10)?,
        med_r: median_rank(table),
    })
}

/// Embedded test items ready for scoring: one embedding per image, one per
/// caption, and each caption's image position.
#[derive(Debug, Clone)]
pub struct EvalItems {
    pub image_ids: Vec<String>,
    pub image_embeddings: Vec<RealVector>,
    pub caption_embeddings: Vec<RealVector>,
    /// caption index → position in `image_ids`.
    pub caption_image: Vec<usize>,
}

/// Embeds the test images (in the given id order) and every caption whose
/// image is among them (in caption order). Missing features or an image
/// without captions break referential integrity.
pub fn embed_eval_items(
    model: &EmbeddingModel,
    features: &FeatureTable,
    captions: &[CaptionRecord],
    image_ids: &[String],
) -> Result<EvalItems> {
    if image_ids.is_empty() {
        return Err(Error::Empty("evaluation needs at least one image id".into()));
    }
    let mut position = std::collections::BTreeMap::new();
    for (i, id) in image_ids.iter().enumerate() {
        if position.insert(id.as_str(), i).is_some() {
            return Err(Error::Validation(format!("duplicate evaluation id '{id}'")));
        }
    }

    let mut image_embeddings = Vec::with_capacity(image_ids.len());
    for id in image_ids {
        let raw = encode_image(model, features.require(id)?)?;
        image_embeddings.push(model.storage_embedding(raw)?);
    }

    let mut caption_embeddings = Vec::new();
    let mut caption_image = Vec::new();
    for rec in captions {
        let Some(&pos) = position.get(rec.image_id.as_str()) else {
            continue;
        };
        let ids = model.token_ids(&rec.tokens);
        let raw = encode_sentence(model, &ids)?;
        caption_embeddings.push(model.storage_embedding(raw)?);
        caption_image.push(pos);
    }

    let covered: BTreeSet<usize> = caption_image.iter().copied().collect();
    if covered.len() != image_ids.len() {
        let missing = image_ids
            .iter()
            .enumerate()
            .find(|(i, _)| !covered.contains(i))
            .map(|(_, id)| id.clone())
            .unwrap_or_default();
        return Err(Error::Integrity(format!(
            "image '{missing}' has no captions in the evaluation set"
        )));
    }

    Ok(EvalItems {
        image_ids: image_ids.to_vec(),
        image_embeddings,
        caption_embeddings,
        caption_image,
    })
}

/// Scores embedded items in both directions with cosine similarity.
pub fn evaluate_items(items: &EvalItems) -> Result<RetrievalReport> {
    let n_img = items.image_embeddings.len();
    let n_cap = items.caption_embeddings.len();

    // One cosine table, reused transposed for the other direction.
    let mut img_by_cap = vec![vec![0.0; n_cap]; n_img];
    for (i, img) in items.image_embeddings.iter().enumerate() {
        for (c, cap) in items.caption_embeddings.iter().enumerate() {
            img_by_cap[i][c] = cosine_similarity(img, cap)?;
        }
    }

    let i2t_gt: Vec<BTreeSet<usize>> = (0..n_img)
        .map(|i| {
            items
                .caption_image
                .iter()
                .enumerate()
                .filter(|&(_, &img)| img == i)
                .map(|(c, _)| c)
                .collect()
        })
        .collect();
    let i2t = SimilarityTable::new(img_by_cap.clone(), i2t_gt)?;

    let cap_by_img: Vec<Vec<f64>> = (0..n_cap)
        .map(|c| (0..n_img).map(|i| img_by_cap[i][c]).collect())
        .collect();
    let t2i_gt: Vec<BTreeSet<usize>> = items
        .caption_image
        .iter()
        .map(|&i| BTreeSet::from([i]))
        .collect();
    let t2i = SimilarityTable::new(cap_by_img, t2i_gt)?;

    Ok(RetrievalReport {
        image_to_text: direction_report(&i2t, Direction::ImageToText)?,
        text_to_image: direction_report(&t2i, Direction::TextToImage)?,
    })
}

/// Embeds and scores one test split.
pub fn evaluate_split(
    model: &EmbeddingModel,
    features: &FeatureTable,
    captions: &[CaptionRecord],
    image_ids: &[String],
) -> Result<RetrievalReport> {
    evaluate_items(&embed_eval_items(model, features, captions, image_ids)?)
}

/// Arithmetic mean of several reports, field by field.
pub fn average_reports(reports: &[RetrievalReport]) -> Result<RetrievalReport> {
    let first = reports
        .first()
        .ok_or_else(|| Error::Empty("cannot average zero reports".into()))?;
    let n = reports.len() as f64;
    let mean = |pick: fn(&RetrievalReport) -> f64| reports.iter().map(pick).sum::<f64>() / n;
    Ok(RetrievalReport {
        image_to_text: DirectionReport {
            direction: first.image_to_text.direction,
            r_at_1: mean(|r| r.image_to_text.r_at_1),
            r_at_10: mean(|r| r.image_to_text.r_at_10),
            med_r: mean(|r| r.image_to_text.med_r),
        },
        text_to_image: DirectionReport {
            direction: first.text_to_image.direction,
            r_at_1: mean(|r| r.text_to_image.r_at_1),
            r_at_10: mean(|r| r.text_to_image.r_at_10),
            med_r: mean(|r| r.text_to_image.med_r),
        },
    })
}

/// Evaluates each test fold separately and averages the reports.
pub fn evaluate_folds(
    model: &EmbeddingModel,
    features: &FeatureTable,
    captions: &[CaptionRecord],
    split: &crate::data_io::DatasetSplit,
) -> Result<RetrievalReport> {
    let folds = split
        .fold_count()
        .ok_or_else(|| Error::Validation("fold evaluation needs a split with folds".into()))?;
    let mut reports = Vec::with_capacity(folds);
    for k in 0..folds {
        reports.push(evaluate_split(model, features, captions, split.fold(k)?)?);
    }
    average_reports(&reports)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn gt(sets: &[&[usize]]) -> Vec<BTreeSet<usize>> {
        sets.iter().map(|s| s.iter().copied().collect()).collect()
    }

    /// Independent rank oracle: sort gallery by descending score, placing
    /// non-matches before matches on ties; the best rank is 1 + position of
    /// the first match in that order.
    fn oracle_best_rank(row: &[f64], matches: &BTreeSet<usize>) -> usize {
        let mut idx: Vec<usize> = (0..row.len()).collect();
        idx.sort_by(|&a, &b| {
            row[b]
                .partial_cmp(&row[a])
                .unwrap()
                .then_with(|| matches.contains(&a).cmp(&matches.contains(&b)))
        });
        idx.iter().position(|j| matches.contains(j)).unwrap() + 1
    }

    #[test]
    fn perfect_retrieval_scores_100_at_1() {
        let rows = vec![
            vec![0.9, 0.1, 0.2],
            vec![0.0, 0.8, 0.1],
            vec![0.3, 0.2, 0.7],
        ];
        let table = SimilarityTable::new(rows, gt(&[&[0], &[1], &[2]])).unwrap();
        assert_eq!(recall_at_k(&table, 1).unwrap(), 100.0);
        assert_eq!(median_rank(&table), 1.0);
    }

    #[test]
    fn all_equal_scores_rank_pessimistically() {
        let rows = vec![vec![0.5; 10]];
        let table = SimilarityTable::new(rows, gt(&[&[3]])).unwrap();
        assert_eq!(table.best_rank(0), 10, "9 tied non-matches rank above");
        assert_eq!(recall_at_k(&table, 1).unwrap(), 0.0);
        assert_eq!(recall_at_k(&table, 10).unwrap(), 100.0);
    }

    #[test]
    fn equal_scored_matches_do_not_hurt_each_other() {
        let rows = vec![vec![0.5, 0.5, 0.5, 0.1]];
        let table = SimilarityTable::new(rows, gt(&[&[0, 1]])).unwrap();
        // One tied non-match (index 2) outranks them; the two matches tie at 2.
        assert_eq!(table.best_rank(0), 2);
    }

    #[test]
    fn hand_built_rows_match_sort_oracle() {
        let rows = vec![
            vec![0.2, 0.9, 0.9, 0.1, 0.9],
            vec![0.5, 0.5, 0.4, 0.5, 0.3],
            vec![-0.1, -0.2, -0.3, -0.2, -0.25],
        ];
        let sets = gt(&[&[0, 2], &[1], &[4, 1]]);
        let table = SimilarityTable::new(rows.clone(), sets.clone()).unwrap();
        for q in 0..3 {
            assert_eq!(
                table.best_rank(q),
                oracle_best_rank(&rows[q], &sets[q]),
                "query {q}"
            );
        }
    }

    #[test]
    fn random_coarse_tables_match_sort_oracle() {
        let mut rng = StdRng::seed_from_u64(17);
        for round in 0..100 {
            let q = rng.gen_range(1..6);
            let g = rng.gen_range(1..12);
            let rows: Vec<Vec<f64>> = (0..q)
                .map(|_| (0..g).map(|_| rng.gen_range(-2..3) as f64 * 0.25).collect())
                .collect();
            let sets: Vec<BTreeSet<usize>> = (0..q)
                .map(|_| {
                    let n = rng.gen_range(1..=g);
                    let mut s = BTreeSet::new();
                    while s.len() < n.min(3) {
                        s.insert(rng.gen_range(0..g));
                    }
                    s
                })
                .collect();
            let table = SimilarityTable::new(rows.clone(), sets.clone()).unwrap();
            for i in 0..q {
                assert_eq!(
                    table.best_rank(i),
                    oracle_best_rank(&rows[i], &sets[i]),
                    "round {round} query {i}"
                );
            }
        }
    }

    #[test]
    fn recall_is_monotone_in_k_and_hits_100_at_g() {
        let mut rng = StdRng::seed_from_u64(23);
        for _ in 0..20 {
            let g = rng.gen_range(2..15);
            let rows: Vec<Vec<f64>> = (0..4)
                .map(|_| (0..g).map(|_| rng.gen_range(-4..5) as f64 * 0.5).collect())
                .collect();
            let sets: Vec<BTreeSet<usize>> =
                (0..4).map(|_| BTreeSet::from([rng.gen_range(0..g)])).collect();
            let table = SimilarityTable::new(rows, sets).unwrap();
            let mut prev = 0.0;
            for k in 1..=g {
                let r = recall_at_k(&table, k).unwrap();
                assert!(r >= prev, "recall dropped at k={k}");
                prev = r;
            }
            assert_eq!(prev, 100.0, "every query has a match, so R@G = 100");
        }
    }

    #[test]
    fn ranks_are_invariant_under_increasing_transforms() {
        let rows = vec![
            vec![0.75, -0.5, 0.25, 0.75, 0.0],
            vec![-1.0, -0.25, -0.25, 0.5, 0.5],
        ];
        let sets = gt(&[&[3], &[1, 4]]);
        let base = SimilarityTable::new(rows.clone(), sets.clone()).unwrap();
        for transform in [|x: f64| 3.0 * x - 7.0, |x: f64| x * x * x] {
            let mapped: Vec<Vec<f64>> = rows
                .iter()
                .map(|r| r.iter().map(|&x| transform(x)).collect())
                .collect();
            let table = SimilarityTable::new(mapped, sets.clone()).unwrap();
            for q in 0..2 {
                assert_eq!(table.best_rank(q), base.best_rank(q));
            }
        }
    }

    /// Builds a 1-match-per-query table whose best ranks are exactly `ranks`.
    fn table_with_ranks(ranks: &[usize], g: usize) -> SimilarityTable {
        let rows: Vec<Vec<f64>> = ranks
            .iter()
            .map(|&r| {
                assert!(r >= 1 && r <= g);
                // r-1 items above the match (score 1.0), match at 0.0, rest below.
                let mut row = vec![-1.0; g];
                for slot in row.iter_mut().take(r - 1) {
                    *slot = 1.0;
                }
                row[r - 1] = 0.0;
                row
            })
            .collect();
        let sets: Vec<BTreeSet<usize>> =
            ranks.iter().map(|&r| BTreeSet::from([r - 1])).collect();
        SimilarityTable::new(rows, sets).unwrap()
    }

    #[test]
    fn median_rank_cases() {
        assert_eq!(median_rank(&table_with_ranks(&[1, 1, 1], 5)), 1.0);
        assert_eq!(median_rank(&table_with_ranks(&[1, 3, 5], 6)), 3.0);
        assert_eq!(median_rank(&table_with_ranks(&[1, 2, 3, 10], 10)), 2.5);
    }

    #[test]
    fn table_constructor_validates() {
        assert!(matches!(
            SimilarityTable::new(vec![], vec![]),
            Err(Error::Empty(_))
        ));
        assert!(matches!(
            SimilarityTable::new(vec![vec![1.0], vec![1.0, 2.0]], gt(&[&[0], &[0]])),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            SimilarityTable::new(vec![vec![f64::NAN]], gt(&[&[0]])),
            Err(Error::Numeric(_))
        ));
        assert!(matches!(
            SimilarityTable::new(vec![vec![1.0]], gt(&[&[]])),
            Err(Error::Validation(_))
        ));
        assert!(matches!(
            SimilarityTable::new(vec![vec![1.0]], gt(&[&[1]])),
            Err(Error::Validation(_))
        ));
        let ok = SimilarityTable::new(vec![vec![1.0, 0.0]], gt(&[&[0]])).unwrap();
        assert!(matches!(recall_at_k(&ok, 0), Err(Error::Parameter(_))));
        assert!(matches!(recall_at_k(&ok, 3), Err(Error::Parameter(_))));
    }

    #[test]
    fn gallery_permutation_with_permuted_ground_truth_changes_nothing() {
        let rows = vec![vec![0.5, 0.25, 0.75, 0.25], vec![0.0, 0.25, 0.25, -0.5]];
        let sets = gt(&[&[1], &[0, 3]]);
        let base = SimilarityTable::new(rows.clone(), sets.clone()).unwrap();
        let perm = [2usize, 0, 3, 1]; // new position j holds old index perm[j]
        let permuted_rows: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| perm.iter().map(|&old| r[old]).collect())
            .collect();
        let permuted_sets: Vec<BTreeSet<usize>> = sets
            .iter()
            .map(|s| {
                (0..4)
                    .filter(|j| s.contains(&perm[*j]))
                    .collect()
            })
            .collect();
        let permuted = SimilarityTable::new(permuted_rows, permuted_sets).unwrap();
        for q in 0..2 {
            assert_eq!(base.best_rank(q), permuted.best_rank(q));
        }
    }

    fn unit(angle: f64) -> RealVector {
        RealVector::new(vec![angle.cos(), angle.sin()])
    }

    #[test]
    fn items_with_identical_embeddings_retrieve_perfectly() {
        let imgs = vec![unit(0.0), unit(0.8), unit(1.6)];
        let items = EvalItems {
            image_ids: vec!["a".into(), "b".into(), "c".into()],
            image_embeddings: imgs.clone(),
            caption_embeddings: imgs,
            caption_image: vec![0, 1, 2],
        };
        let rep = evaluate_items(&items).unwrap();
        assert_eq!(rep.image_to_text.r_at_1, 100.0);
        assert_eq!(rep.text_to_image.r_at_1, 100.0);
        assert_eq!(rep.image_to_text.med_r, 1.0);
        assert_eq!(rep.rsum(), 400.0);
    }

    #[test]
    fn caption_grouping_feeds_image_to_text_ground_truth() {
        // Images at 0.0, 0.8, 1.6 rad; each has two captions nearby, except
        // one caption of image 0 deliberately points at image 2.
        let imgs = vec![unit(0.0), unit(0.8), unit(1.6)];
        let caps = vec![
            unit(0.05),
            unit(1.58), // stray caption of image 0
            unit(0.78),
            unit(0.83),
            unit(1.62),
            unit(1.55),
        ];
        let items = EvalItems {
            image_ids: vec!["a".into(), "b".into(), "c".into()],
            image_embeddings: imgs,
            caption_embeddings: caps,
            caption_image: vec![0, 0, 1, 1, 2, 2],
        };
        let rep = evaluate_items(&items).unwrap();
        // i2t: every image still has one close caption (best rank 1).
        assert_eq!(rep.image_to_text.r_at_1, 100.0);
        // t2i: the stray caption retrieves image 2 first, image 1 second,
        // its own image last; the other five hit at rank 1.
        assert!((rep.text_to_image.r_at_1 - 500.0 / 6.0).abs() < 1e-9);
        assert_eq!(rep.text_to_image.med_r, 1.0);
        assert_eq!(rep.text_to_image.r_at_10, 100.0, "k clamps to G = 3");
    }

    #[test]
    fn random_embeddings_score_near_chance() {
        let g = 10;
        let mut rng = StdRng::seed_from_u64(7);
        let mut total = 0.0;
        let rounds = 40;
        for _ in 0..rounds {
            let rand_vec = |rng: &mut StdRng| {
                RealVector::new((0..8).map(|_| rng.gen_range(-1.0..1.0)).collect())
            };
            let items = EvalItems {
                image_ids: (0..g).map(|i| format!("i{i}")).collect(),
                image_embeddings: (0..g).map(|_| rand_vec(&mut rng)).collect(),
                caption_embeddings: (0..g).map(|_| rand_vec(&mut rng)).collect(),
                caption_image: (0..g).collect(),
            };
            total += evaluate_items(&items).unwrap().image_to_text.r_at_1;
        }
        let mean = total / rounds as f64;
        assert!(
            mean > 1.0 && mean < 30.0,
            "independent embeddings must score near 100/G = 10, got {mean}"
        );
    }

    #[test]
    fn embedding_split_enforces_referential_integrity() {
        use crate::encoders::{ModelDims, Vocabulary};
        let model = EmbeddingModel::new(
            ModelDims { d: 3, d_h: 2, v: 2, word_dim: 2 },
            Vocabulary::build(["dog", "cat"]),
            1,
        )
        .unwrap();
        let feats = FeatureTable::from_rows([
            ("i1".to_string(), RealVector::new(vec![1.0, 0.0])),
            ("i2".to_string(), RealVector::new(vec![0.0, 1.0])),
        ])
        .unwrap();
        let caps = vec![CaptionRecord {
            image_id: "i1".into(),
            tokens: vec!["dog".into()],
            pos: None,
        }];

        let ids = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        let err = embed_eval_items(&model, &feats, &caps, &ids(&["i1", "i2"])).unwrap_err();
        assert!(
            matches!(&err, Error::Integrity(msg) if msg.contains("i2")),
            "captionless image must be integrity breakage, got {err}"
        );
        assert!(matches!(
            embed_eval_items(&model, &feats, &caps, &ids(&["i3"])),
            Err(Error::Integrity(_))
        ));
        assert!(matches!(
            embed_eval_items(&model, &feats, &caps, &ids(&["i1", "i1"])),
            Err(Error::Validation(_))
        ));
        let ok = embed_eval_items(&model, &feats, &caps, &ids(&["i1"])).unwrap();
        assert_eq!(ok.caption_embeddings.len(), 1);
        evaluate_items(&ok).unwrap();
    }

    #[test]
    fn averaging_reports_is_fieldwise() {
        let mk = |r1: f64| RetrievalReport {
            image_to_text: DirectionReport {
                direction: Direction::ImageToText,
                r_at_1: r1,
                r_at_10: r1 + 5.0,
                med_r: 2.0,
            },
            text_to_image: DirectionReport {
                direction: Direction::TextToImage,
                r_at_1: r1 / 2.0,
                r_at_10: r1,
                med_r: 4.0,
            },
        };
        let reports: Vec<RetrievalReport> =
            [10.0, 20.0, 30.0, 40.0, 50.0].iter().map(|&x| mk(x)).collect();
        let avg = average_reports(&reports).unwrap();
        assert_eq!(avg.image_to_text.r_at_1, 30.0);
        assert_eq!(avg.image_to_text.r_at_10, 35.0);
        assert_eq!(avg.text_to_image.r_at_1, 15.0);
        assert_eq!(avg.image_to_text.med_r, 2.0);
        assert!(matches!(average_reports(&[]), Err(Error::Empty(_))));
    }

    #[test]
    fn report_record_lists_tie_policy() {
        let rep = average_reports(&[RetrievalReport {
            image_to_text: DirectionReport {
                direction: Direction::ImageToText,
                r_at_1: 50.0,
                r_at_10: 90.0,
                med_r: 1.5,
            },
            text_to_image: DirectionReport {
                direction: Direction::TextToImage,
                r_at_1: 40.0,
                r_at_10: 80.0,
                med_r: 2.0,
            },
        }])
        .unwrap();
        let text = rep.to_string();
        assert!(text.contains("r1_i2t=50"));
        assert!(text.contains("rsum=260"));
        assert!(text.lines().last().unwrap().starts_with("tie_policy=pessimistic"));
    }
}
