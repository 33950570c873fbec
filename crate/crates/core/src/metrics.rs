//! Retrieval metrics with multi-positive ground truth.
//!
//! Gallery items are ranked by descending similarity; equal scores are
//! ordered by ascending gallery index. R@K is the query-level hit rate: a
//! query counts when at least one positive reaches the top K.
//! [`recall_at_k_fraction`] gives the alternative that averages the share of
//! positives retrieved in the top K.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::Mat;
use crate::error::{Error, Result};

pub const RECALL_KS: [usize; 3] = [1, 5, 10];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    ImageToText,
    TextToImage,
}

impl Direction {
    pub fn label(self) -> &'static str {
        match self {
            Direction::ImageToText => "Image-to-Text",
            Direction::TextToImage => "Text-to-Image",
        }
    }
}

/// Query × gallery scores with the positive gallery indices of every query.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    sims: Array2<f32>,
    positives: Vec<Vec<usize>>,
}

impl SimilarityMatrix {
    pub fn new(sims: Array2<f32>, mut positives: Vec<Vec<usize>>) -> Result<Self> {
        let (q, g) = sims.dim();
        if q == 0 || g == 0 {
            return Err(Error::Protocol("similarity matrix has no queries or no gallery".into()));
        }
        if positives.len() != q {
            return Err(Error::Protocol(format!("{} positive sets for {q} queries", positives.len())));
        }
        if sims.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("similarity matrix has non-finite entries".into()));
        }
        for (i, p) in positives.iter_mut().enumerate() {
            p.sort_unstable();
            p.dedup();
            if p.is_empty() {
                return Err(Error::Protocol(format!("query {i} has no positives")));
            }
            if let Some(&bad) = p.iter().find(|&&j| j >= g) {
                return Err(Error::Protocol(format!("query {i} positive {bad} outside gallery of {g}")));
            }
        }
        Ok(Self { sims, positives })
    }

    /// Dot-product scores computed in `f32`.
    pub fn from_embeddings(queries: &Mat, gallery: &Mat, positives: Vec<Vec<usize>>) -> Result<Self> {
        if queries.ncols() != gallery.ncols() {
            return Err(Error::Shape(format!(
                "query width {} vs gallery width {}",
                queries.ncols(),
                gallery.ncols()
            )));
        }
        let q32 = queries.mapv(|v| v as f32);
        let g32 = gallery.mapv(|v| v as f32);
        let sims = Array2::from_shape_fn((q32.nrows(), g32.nrows()), |(i, j)| {
            q32.row(i).iter().zip(g32.row(j)).fold(0f32, |acc, (a, b)| acc + a * b)
        });
        Self::new(sims, positives)
    }

    pub fn sims(&self) -> &Array2<f32> {
        &self.sims
    }

    pub fn num_queries(&self) -> usize {
        self.sims.nrows()
    }

    pub fn gallery_size(&self) -> usize {
        self.sims.ncols()
    }

    pub fn positives(&self, query: usize) -> &[usize] {
        &self.positives[query]
    }

    /// 0-based ranks of the query's positives, ascending.
    pub fn positive_ranks(&self, query: usize) -> Vec<usize> {
        let row = self.sims.row(query);
        let mut ranks: Vec<usize> = self.positives[query]
            .iter()
            .map(|&p| {
                let sp = row[p];
                row.iter()
                    .enumerate()
                    .filter(|&(j, &s)| s > sp || (s == sp && j < p))
                    .count()
            })
            .collect();
        ranks.sort_unstable();
        ranks
    }

    fn all_ranks(&self) -> Vec<Vec<usize>> {
        (0..self.num_queries()).map(|q| self.positive_ranks(q)).collect()
    }
}

/// `100 ×` the mean, summed in ascending order so the result does not depend on query order.
pub fn percent_of_mean(mut values: Vec<f64>) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len() as f64;
    100.0 * (values.iter().sum::<f64>() / n)
}

fn check_k(sm: &SimilarityMatrix, k: usize) -> Result<()> {
    if k == 0 || k > sm.gallery_size() {
        return Err(Error::Protocol(format!("K = {k} outside 1..={}", sm.gallery_size())));
    }
    Ok(())
}

pub fn per_query_hits(sm: &SimilarityMatrix, k: usize) -> Result<Vec<bool>> {
    check_k(sm, k)?;
    Ok(sm.all_ranks().iter().map(|r| r[0] < k).collect())
}

pub fn recall_at_k(sm: &SimilarityMatrix, k: usize) -> Result<f64> {
    let hits = per_query_hits(sm, k)?;
    Ok(percent_of_mean(hits.into_iter().map(|h| if h { 1.0 } else { 0.0 }).collect()))
}

/// Mean share of each query's positives found in the top K.
pub fn recall_at_k_fraction(sm: &SimilarityMatrix, k: usize) -> Result<f64> {
    check_k(sm, k)?;
    Ok(percent_of_mean(
        sm.all_ranks()
            .iter()
            .map(|r| r.iter().filter(|&&x| x < k).count() as f64 / r.len() as f64)
            .collect(),
    ))
}

pub fn per_query_r_precision(sm: &SimilarityMatrix) -> Vec<f64> {
    sm.all_ranks()
        .iter()
        .map(|r| r.iter().filter(|&&x| x < r.len()).count() as f64 / r.len() as f64)
        .collect()
}

pub fn r_precision(sm: &SimilarityMatrix) -> f64 {
    percent_of_mean(per_query_r_precision(sm))
}

/// Average precision over the positions of the query's positives.
pub fn per_query_average_precision(sm: &SimilarityMatrix) -> Vec<f64> {
    sm.all_ranks()
        .iter()
        .map(|ranks| {
            let total: f64 = ranks
                .iter()
                .enumerate()
                .map(|(i, &r)| (i + 1) as f64 / (r + 1) as f64)
                .sum();
            total / ranks.len() as f64
        })
        .collect()
}

pub fn map_at_r(sm: &SimilarityMatrix) -> f64 {
    percent_of_mean(per_query_average_precision(sm))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub direction: Direction,
    /// K → R@K; K above the gallery size is evaluated at the gallery size.
    pub r_at: BTreeMap<usize, f64>,
    /// Bidirectional rSum, shared by both reports.
    pub rsum: f64,
    pub r_p: f64,
    pub map_at_r: f64,
}

fn report(sm: &SimilarityMatrix, direction: Direction) -> Result<MetricsReport> {
    let mut r_at = BTreeMap::new();
    for k in RECALL_KS {
        r_at.insert(k, recall_at_k(sm, k.min(sm.gallery_size()))?);
    }
    Ok(MetricsReport {
        direction,
        r_at,
        rsum: 0.0,
        r_p: r_precision(sm),
        map_at_r: map_at_r(sm),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub image_to_text: MetricsReport,
    pub text_to_image: MetricsReport,
    pub rsum: f64,
    pub num_images: usize,
    pub num_texts: usize,
}

impl EvaluationReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn table(&self) -> String {
        let (a, b) = (&self.image_to_text, &self.text_to_image);
        let mut out = String::new();
        let _ = writeln!(out, "{:>24}{:>27}", "Image-to-Text", "Text-to-Image");
        let _ = writeln!(
            out,
            "{:>8}{:>8}{:>8}  {:>8}{:>8}{:>8}  {:>9}",
            "R@1", "R@5", "R@10", "R@1", "R@5", "R@10", "rSum"
        );
        let _ = writeln!(
            out,
            "{:>8.1}{:>8.1}{:>8.1}  {:>8.1}{:>8.1}{:>8.1}  {:>9.1}",
            a.r_at[&1], a.r_at[&5], a.r_at[&10], b.r_at[&1], b.r_at[&5], b.r_at[&10], self.rsum
        );
        let _ = writeln!(out);
        let _ = writeln!(out, "{:<16}{:>8}{:>8}", "", "R-P", "mAP@R");
        for r in [a, b] {
            let _ = writeln!(out, "{:<16}{:>8.1}{:>8.1}", r.direction.label(), r.r_p, r.map_at_r);
        }
        out
    }
}

/// Evaluates both retrieval directions. `image_positives[i]` lists the text
/// indices matching image `i`.
pub fn evaluate(image_embs: &Mat, text_embs: &Mat, image_positives: &[Vec<usize>]) -> Result<EvaluationReport> {
    if image_positives.is_empty() || image_positives.iter().all(|p| p.is_empty()) {
        return Err(Error::Protocol("empty ground truth".into()));
    }
    let (ni, nt) = (image_embs.nrows(), text_embs.nrows());
    if image_positives.len() != ni {
        return Err(Error::Protocol(format!("{} ground-truth rows for {ni} images", image_positives.len())));
    }
    let mut text_positives = vec![Vec::new(); nt];
    for (i, caps) in image_positives.iter().enumerate() {
        for &c in caps {
            if c >= nt {
                return Err(Error::Protocol(format!("image {i} references text {c} of {nt}")));
            }
            text_positives[c].push(i);
        }
    }
    let i2t = SimilarityMatrix::from_embeddings(image_embs, text_embs, image_positives.to_vec())?;
    let t2i = SimilarityMatrix::from_embeddings(text_embs, image_embs, text_positives)?;
    let mut image_to_text = report(&i2t, Direction::ImageToText)?;
    let mut text_to_image = report(&t2i, Direction::TextToImage)?;
    let rsum = image_to_text.r_at.values().sum::<f64>() + text_to_image.r_at.values().sum::<f64>();
    image_to_text.rsum = rsum;
    text_to_image.rsum = rsum;
    Ok(EvaluationReport {
        image_to_text,
        text_to_image,
        rsum,
        num_images: ni,
        num_texts: nt,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn sm(sims: Array2<f32>, pos: Vec<Vec<usize>>) -> SimilarityMatrix {
        SimilarityMatrix::new(sims, pos).unwrap()
    }

    #[test]
    fn perfect_identity_ranking() {
        let s = sm(
            array![[0.9, 0.1, 0.0], [0.2, 0.8, 0.1], [0.0, 0.3, 0.7]],
            vec![vec![0], vec![1], vec![2]],
        );
        assert_eq!(recall_at_k(&s, 1).unwrap(), 100.0);
        assert_eq!(recall_at_k(&s, 3).unwrap(), 100.0);
        assert_eq!(r_precision(&s), 100.0);
        assert_eq!(map_at_r(&s), 100.0);
        assert!(recall_at_k(&s, 0).is_err());
        assert!(recall_at_k(&s, 4).is_err());
    }

    #[test]
    fn precision_examples() {
        // positives at ranks 1 and 3
        let s = sm(array![[0.9, 0.8, 0.7, 0.1]], vec![vec![0, 2]]);
        assert!((map_at_r(&s) - 250.0 / 3.0).abs() < 1e-9);
        assert_eq!(r_precision(&s), 50.0);
        assert_eq!(recall_at_k_fraction(&s, 1).unwrap(), 50.0);
        assert_eq!(recall_at_k(&s, 1).unwrap(), 100.0);
        // single positive at rank 2
        let s = sm(array![[0.9, 0.8, 0.7]], vec![vec![1]]);
        assert_eq!(map_at_r(&s), 50.0);
        assert_eq!(recall_at_k(&s, 1).unwrap(), 0.0);
    }

    #[test]
    fn ties_break_toward_lower_index() {
        let s = sm(array![[0.5, 0.5, 0.5]], vec![vec![1]]);
        assert_eq!(s.positive_ranks(0), vec![1]);
        let s = sm(array![[0.5, 0.5, 0.5]], vec![vec![0]]);
        assert_eq!(s.positive_ranks(0), vec![0]);
    }

    #[test]
    fn invalid_ground_truth() {
        assert!(matches!(
            SimilarityMatrix::new(array![[1.0, 0.0]], vec![vec![]]),
            Err(Error::Protocol(_))
        ));
        assert!(matches!(
            SimilarityMatrix::new(array![[1.0, 0.0]], vec![vec![2]]),
            Err(Error::Protocol(_))
        ));
        assert!(matches!(evaluate(&Mat::eye(2), &Mat::eye(2), &[]), Err(Error::Protocol(_))));
    }

    #[test]
    fn block_diagonal_perfect_retrieval() {
        let images = array![[1.0, 0.0], [0.0, 1.0]];
        let texts = array![[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]];
        let r = evaluate(&images, &texts, &[vec![0, 1], vec![2, 3]]).unwrap();
        assert_eq!(r.rsum, 600.0);
        assert_eq!(r.image_to_text.map_at_r, 100.0);
        assert!(r.table().contains("600.0"));
        let back: EvaluationReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
    }
}
