//! Exact top-k search over unit encodings, entity filtering, recall and
//! median rank, bidirectional evaluation and attention scores.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::encoders::AttentionMap;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::{dot, norm, Tensor2D};
use crate::textprep::{entity_tokens, normalize_entity};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Image,
}

/// Immutable set of encodings with ids and metadata entities.
#[derive(Clone, Debug)]
pub struct EncodingIndex {
    ids: Vec<String>,
    matrix: Tensor2D,
    modality: Modality,
    entities: Vec<Vec<String>>,
    normalized: Vec<HashSet<String>>,
}

/// Builds an index; rows must be unit vectors or exactly zero.
pub fn build_index(
    encodings: Tensor2D,
    ids: Vec<String>,
    metadata: Vec<Vec<String>>,
    modality: Modality,
) -> Result<EncodingIndex> {
    if ids.len() != encodings.rows() || metadata.len() != ids.len() {
        return Err(Error::shape(
            "build_index",
            format!(
                "{} ids, {} encodings, {} metadata entries",
                ids.len(),
                encodings.rows(),
                metadata.len()
            ),
        ));
    }
    let mut seen = HashSet::with_capacity(ids.len());
    for id in &ids {
        if !seen.insert(id.as_str()) {
            return Err(Error::DuplicateId(id.clone()));
        }
    }
    for (i, r) in encodings.iter_rows().enumerate() {
        let n = norm(r);
        if n != 0.0 && (n - 1.0).abs() > 1e-6 {
            return Err(Error::Contract(format!("row {i} of the index has norm {n}")));
        }
    }
    let normalized = metadata
        .iter()
        .map(|es| es.iter().map(|e| normalize_entity(e)).collect())
        .collect();
    Ok(EncodingIndex {
        ids,
        matrix: encodings,
        modality,
        entities: metadata,
        normalized,
    })
}

impl EncodingIndex {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn matrix(&self) -> &Tensor2D {
        &self.matrix
    }

    pub fn entities(&self, i: usize) -> &[String] {
        &self.entities[i]
    }

    /// Every metadata entity in the index, deduplicated and sorted.
    pub fn entity_vocabulary(&self) -> Vec<String> {
        let set: BTreeSet<&String> = self.entities.iter().flatten().collect();
        set.into_iter().cloned().collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub id: String,
    pub score: f64,
    pub entities: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RankedResult {
    pub hits: Vec<Hit>,
    /// The entity filter as given.
    pub filter: Vec<String>,
    /// Candidates that passed the filter.
    pub candidates: usize,
}

/// Top `k` entries by inner product among those carrying every filter
/// entity. Ties go to the smaller id.
pub fn search(index: &EncodingIndex, query: &[f64], k: usize, entity_filter: &[String]) -> Result<RankedResult> {
    if index.is_empty() {
        return Ok(RankedResult {
            filter: entity_filter.to_vec(),
            ..Default::default()
        });
    }
    if query.len() != index.dim() {
        return Err(Error::shape(
            "search",
            format!("query of {} for index of {}", query.len(), index.dim()),
        ));
    }
    if query.iter().all(|v| *v == 0.0) {
        return Err(Error::EmptyQuery);
    }
    let wanted: Vec<String> = entity_filter.iter().map(|e| normalize_entity(e)).collect();
    let mut scored: Vec<(usize, f64)> = (0..index.len())
        .filter(|&i| wanted.iter().all(|e| index.normalized[i].contains(e)))
        .map(|i| (i, dot(index.matrix.row(i), query)))
        .collect();
    let candidates = scored.len();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| index.ids[a.0].cmp(&index.ids[b.0])));
    scored.truncate(k);
    Ok(RankedResult {
        hits: scored
            .into_iter()
            .map(|(i, score)| Hit {
                id: index.ids[i].clone(),
                score,
                entities: index.entities[i].clone(),
            })
            .collect(),
        filter: entity_filter.to_vec(),
        candidates,
    })
}

/// Fraction of ranks (1-based) that are at most `k`.
pub fn recall_at_k(ranks: &[usize], k: usize) -> Result<f64> {
    if ranks.is_empty() {
        return Err(Error::UndefinedMetric);
    }
    Ok(ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64)
}

/// Middle rank; the mean of the two middle ranks for an even count.
pub fn median_rank(ranks: &[usize]) -> Result<f64> {
    if ranks.is_empty() {
        return Err(Error::UndefinedMetric);
    }
    let mut r = ranks.to_vec();
    r.sort_unstable();
    let n = r.len();
    Ok(if n % 2 == 1 {
        r[n / 2] as f64
    } else {
        (r[n / 2 - 1] + r[n / 2]) as f64 / 2.0
    })
}

/// Rank of the diagonal entry within each row; every other entry with an
/// equal or higher score is counted ahead of it.
pub fn ground_truth_ranks(scores: &Tensor2D) -> Vec<usize> {
    (0..scores.rows())
        .map(|i| {
            let row = scores.row(i);
            let own = row[i];
            1 + row.iter().enumerate().filter(|&(j, &s)| j != i && s >= own).count()
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectionMetrics {
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub median_rank: f64,
}

impl DirectionMetrics {
    pub fn from_ranks(ranks: &[usize]) -> Result<Self> {
        Ok(DirectionMetrics {
            r1: recall_at_k(ranks, 1)?,
            r5: recall_at_k(ranks, 5)?,
            r10: recall_at_k(ranks, 10)?,
            median_rank: median_rank(ranks)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectionPair {
    pub text_to_image: DirectionMetrics,
    pub image_to_text: DirectionMetrics,
    pub n: usize,
}

impl DirectionPair {
    /// Ranks texts against images and images against texts, where row `i`
    /// of `s` is text `i` and column `i` its paired image.
    pub fn from_similarity(s: &Tensor2D) -> Result<Self> {
        Ok(DirectionPair {
            text_to_image: DirectionMetrics::from_ranks(&ground_truth_ranks(s))?,
            image_to_text: DirectionMetrics::from_ranks(&ground_truth_ranks(&s.transpose()))?,
            n: s.rows(),
        })
    }

    /// R@10 of both directions, summed.
    pub fn r10_sum(&self) -> f64 {
        self.text_to_image.r10 + self.image_to_text.r10
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Every validation item ranked against every other.
    pub overall: DirectionPair,
    /// Each language ranked within itself.
    pub per_language: BTreeMap<String, DirectionPair>,
}

impl MetricsReport {
    pub fn language(&self, lang: &str) -> Option<&DirectionPair> {
        self.per_language.get(lang)
    }
}

/// Text and image encodings of a corpus, one row per record, with the
/// sources whose `keep` flag is false blanked out.
pub fn encode_corpus(model: &Model, corpus: &Corpus, keep: [bool; 4]) -> Result<(Tensor2D, Tensor2D)> {
    let prepared = model.prepare(corpus);
    let texts: Vec<Vec<f64>> = prepared
        .par_iter()
        .map(|p| {
            let tokens = std::array::from_fn(|k| if keep[k] { p.tokens[k].clone() } else { Vec::new() });
            model.encode_tokens(&p.lang, tokens).map(|q| q.vector)
        })
        .collect::<Result<_>>()?;
    let mut t = Tensor2D::zeros(0, model.dim());
    for v in &texts {
        t.push_row(v)?;
    }
    let mut f = Tensor2D::zeros(0, corpus.features.dim());
    for p in &prepared {
        f.push_row(corpus.features.matrix().row(p.image_row))?;
    }
    Ok((t, model.encode_images(&f)?))
}

/// Bidirectional retrieval metrics on complete inputs.
pub fn evaluate_bidirectional(model: &Model, val: &Corpus) -> Result<MetricsReport> {
    evaluate_with_sources(model, val, [true; 4])
}

/// Bidirectional metrics with some sources blanked in every query.
pub fn evaluate_with_sources(model: &Model, val: &Corpus, keep: [bool; 4]) -> Result<MetricsReport> {
    if val.is_empty() {
        return Err(Error::UndefinedMetric);
    }
    let (t, i) = encode_corpus(model, val, keep)?;
    let overall = DirectionPair::from_similarity(&t.matmul_nt(&i)?)?;
    let mut per_language = BTreeMap::new();
    for lang in val.languages() {
        let rows: Vec<usize> = (0..val.len()).filter(|&k| val.records[k].lang == lang).collect();
        let pick = |m: &Tensor2D| {
            let parts: Vec<&[f64]> = rows.iter().map(|&r| m.row(r)).collect();
            Tensor2D::from_rows(&parts)
        };
        let s = pick(&t)?.matmul_nt(&pick(&i)?)?;
        per_language.insert(lang, DirectionPair::from_similarity(&s)?);
    }
    Ok(MetricsReport { overall, per_language })
}

/// Per-token scores: the head-averaged map, averaged over output rows.
pub fn attention_scores(maps: &AttentionMap) -> Vec<f64> {
    let Some(first) = maps.heads.first() else {
        return Vec::new();
    };
    let (l, h) = (first.rows(), maps.heads.len() as f64);
    let mut scores = vec![0.0; first.cols()];
    for m in &maps.heads {
        for row in m.iter_rows() {
            for (s, v) in scores.iter_mut().zip(row) {
                *s += v / (h * l as f64);
            }
        }
    }
    scores
}

/// Entities from `vocabulary` whose normalized tokens appear as a
/// contiguous phrase in any of `texts`. Sorted and deduplicated.
pub fn suggest_entities<'a, I>(texts: &[&str], vocabulary: I) -> Vec<String>
where
    I: IntoIterator<Item = &'a str>,
{
    let docs: Vec<Vec<String>> = texts.iter().map(|t| entity_tokens(t)).collect();
    let mut out = BTreeSet::new();
    for entity in vocabulary {
        let phrase = entity_tokens(entity);
        if phrase.is_empty() {
            continue;
        }
        if docs.iter().any(|d| d.windows(phrase.len()).any(|w| w == phrase.as_slice())) {
            out.insert(entity.to_string());
        }
    }
    out.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::l2_normalize;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor2D {
        let raw = Tensor2D::uniform(n, d, 1.0, rng);
        let rows: Vec<Vec<f64>> = raw.iter_rows().map(l2_normalize).collect();
        Tensor2D::from_rows(&rows).unwrap()
    }

    fn index(n: usize, d: usize, seed: u64) -> EncodingIndex {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = unit_rows(&mut rng, n, d);
        let ids = (0..n).map(|i| format!("i{i:03}")).collect();
        let meta = (0..n)
            .map(|i| if i % 3 == 0 { vec!["Zürichsee".to_string(), "Macron".into()] } else { vec!["Bern".to_string()] })
            .collect();
        build_index(m, ids, meta, Modality::Image).unwrap()
    }

    #[test]
    fn index_construction() {
        let empty = build_index(Tensor2D::zeros(0, 4), vec![], vec![], Modality::Image).unwrap();
        assert!(search(&empty, &[1.0, 0.0, 0.0, 0.0], 5, &[]).unwrap().hits.is_empty());
        let dup = build_index(
            Tensor2D::identity(2),
            vec!["a".into(), "a".into()],
            vec![vec![], vec![]],
            Modality::Image,
        );
        assert!(matches!(dup, Err(Error::DuplicateId(_))));
        let bad = build_index(
            Tensor2D::from_rows(&[[2.0, 0.0]]).unwrap(),
            vec!["a".into()],
            vec![vec![]],
            Modality::Text,
        );
        assert!(bad.is_err());
        let idx = index(10, 4, 0);
        for r in idx.matrix().iter_rows() {
            assert!((norm(r) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn search_matches_sort_oracle() {
        let idx = index(50, 6, 1);
        let q = l2_normalize(&[0.3, -0.2, 0.9, 0.1, 0.0, 0.4]);
        let res = search(&idx, &q, 100, &[]).unwrap();
        let mut oracle: Vec<(String, f64)> = (0..50)
            .map(|i| {
                let s: f64 = (0..6).map(|k| idx.matrix().get(i, k) * q[k]).sum();
                (idx.ids()[i].clone(), s)
            })
            .collect();
        oracle.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        let got: Vec<&str> = res.hits.iter().map(|h| h.id.as_str()).collect();
        let want: Vec<&str> = oracle.iter().map(|o| o.0.as_str()).collect();
        assert_eq!(got, want);
        assert_eq!(search(&idx, &q, 3, &[]).unwrap().hits.len(), 3);
        assert!(matches!(search(&idx, &[0.0; 6], 3, &[]), Err(Error::EmptyQuery)));
        assert!(matches!(search(&idx, &[1.0; 3], 3, &[]), Err(Error::Shape { .. })));
    }

    #[test]
    fn ties_go_to_smaller_id() {
        let m = Tensor2D::from_rows(&[[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]]).unwrap();
        let idx = build_index(m, vec!["b".into(), "a".into(), "c".into()], vec![vec![]; 3], Modality::Image).unwrap();
        let res = search(&idx, &[1.0, 0.0], 3, &[]).unwrap();
        let got: Vec<&str> = res.hits.iter().map(|h| h.id.as_str()).collect();
        assert_eq!(got, ["a", "b", "c"]);
    }

    #[test]
    fn entity_filter() {
        let idx = index(30, 4, 2);
        let q = [0.5, 0.5, 0.5, 0.5];
        let res = search(&idx, &q, 30, &["zurichsee".into()]).unwrap();
        assert_eq!(res.hits.len(), 10);
        assert_eq!(res.candidates, 10);
        let res = search(&idx, &q, 30, &["ZÜRICHSEE".into(), "macron".into()]).unwrap();
        assert_eq!(res.hits.len(), 10);
        let res = search(&idx, &q, 30, &["macron".into(), "Bern".into()]).unwrap();
        assert!(res.hits.is_empty());
        assert_eq!(res.filter, vec!["macron".to_string(), "Bern".into()]);
    }

    #[test]
    fn recall_and_median_examples() {
        assert_eq!(recall_at_k(&[1, 3, 11, 50], 10).unwrap(), 0.5);
        assert_eq!(recall_at_k(&[1, 1, 1], 1).unwrap(), 1.0);
        assert_eq!(recall_at_k(&[4, 9, 2], 9).unwrap(), 1.0);
        assert!(matches!(recall_at_k(&[], 1), Err(Error::UndefinedMetric)));
        assert_eq!(median_rank(&[1, 3, 11, 50]).unwrap(), 7.0);
        assert_eq!(median_rank(&[5]).unwrap(), 5.0);
        assert_eq!(median_rank(&[2, 2, 2]).unwrap(), 2.0);
        assert!(median_rank(&[]).is_err());
    }

    #[test]
    fn pessimistic_ties() {
        let s = Tensor2D::filled(4, 4, 0.5);
        assert_eq!(ground_truth_ranks(&s), vec![4, 4, 4, 4]);
        let m = DirectionPair::from_similarity(&Tensor2D::identity(3)).unwrap();
        assert_eq!(m.text_to_image.r1, 1.0);
        assert_eq!(m.image_to_text.r1, 1.0);
    }

    #[test]
    fn attention_score_examples() {
        assert_eq!(
            attention_scores(&AttentionMap {
                heads: vec![Tensor2D::filled(1, 1, 1.0)]
            }),
            vec![1.0]
        );
        let u = attention_scores(&AttentionMap {
            heads: vec![Tensor2D::filled(4, 4, 0.25); 3],
        });
        assert!(u.iter().all(|s| (s - 0.25).abs() < 1e-15));
        // column-wise: the token attended to by everyone wins
        let m = Tensor2D::from_rows(&[[0.0, 1.0], [0.0, 1.0]]).unwrap();
        assert_eq!(attention_scores(&AttentionMap { heads: vec![m] }), vec![0.0, 1.0]);
    }

    #[test]
    fn entity_suggestions() {
        let vocab = ["macron", "Zürichsee", "New York"];
        assert_eq!(suggest_entities(&["Macron besucht Bern"], vocab), vec!["macron"]);
        assert!(suggest_entities(&[""], vocab).is_empty());
        assert_eq!(suggest_entities(&["am Zurichsee"], vocab), vec!["Zürichsee"]);
        assert_eq!(suggest_entities(&["", "flug nach new york."], vocab), vec!["New York"]);
        assert!(suggest_entities(&["york new"], vocab).is_empty());
    }

    proptest! {
        #[test]
        fn scores_sum_to_one(seed in any::<u64>(), l in 1usize..12, h in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let heads = (0..h).map(|_| crate::numerics::softmax_rows(&Tensor2D::uniform(l, l, 3.0, &mut rng))).collect();
            let s = attention_scores(&AttentionMap { heads });
            prop_assert!((s.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            prop_assert!(s.iter().all(|v| *v >= 0.0));
        }

        #[test]
        fn filtered_is_subset(seed in 0u64..200, k in 1usize..40) {
            let idx = index(40, 5, seed);
            let q = l2_normalize(&[1.0, -0.5, 0.25, 0.0, 2.0]);
            let all: HashSet<String> = search(&idx, &q, 40, &[]).unwrap().hits.into_iter().map(|h| h.id).collect();
            let some = search(&idx, &q, k, &["bern".into()]).unwrap();
            prop_assert!(some.hits.iter().all(|h| all.contains(&h.id)));
            prop_assert!(some.hits.windows(2).all(|w| w[0].score >= w[1].score));
        }

        #[test]
        fn inner_product_cosine_and_distance_agree(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = unit_rows(&mut rng, 30, 4);
            let q = l2_normalize(Tensor2D::uniform(1, 4, 1.0, &mut rng).data());
            let by = |key: &dyn Fn(&[f64]) -> f64| {
                let mut ix: Vec<usize> = (0..30).collect();
                ix.sort_by(|&a, &b| key(m.row(a)).total_cmp(&key(m.row(b))).then(a.cmp(&b)));
                ix
            };
            let ip = by(&|r| -dot(r, &q));
            let cos = by(&|r| -dot(r, &q) / (norm(r) * norm(&q)));
            let dist = by(&|r| r.iter().zip(&q).map(|(a, b)| (a - b) * (a - b)).sum::<f64>());
            prop_assert_eq!(&ip, &cos);
            prop_assert_eq!(&ip, &dist);
        }

        #[test]
        fn recall_monotone_in_k(ranks in proptest::collection::vec(1usize..60, 1..40)) {
            let mut last = 0.0;
            for k in 1..70 {
                let r = recall_at_k(&ranks, k).unwrap();
                prop_assert!(r >= last && (0.0..=1.0).contains(&r));
                last = r;
            }
        }
    }
}
