//! Component distances, per-sentence PCA and per-category accuracy.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::AnalysisError;
use crate::eval::Outcome;
use crate::lm::{encode, l2_distance, pool_rows, pool_span, MaskedLm};
use crate::record::{Category, SimileRecord};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DistanceSummary {
    pub mean_tp: f64,
    pub mean_pv: f64,
    pub mean_tv: f64,
    pub records: usize,
    /// Records without a topic or vehicle span.
    pub skipped: usize,
}

/// Pooled last-layer vectors of topic, property and vehicle.
pub fn component_vectors(
    record: &SimileRecord,
    model: &dyn MaskedLm,
) -> Result<Option<[Vec<f32>; 3]>, AnalysisError> {
    let s = &record.spans;
    if s.topic.is_empty() || s.vehicle.is_empty() {
        return Ok(None);
    }
    let (enc, hidden) = encode(model, &record.tokens)?;
    Ok(Some([
        pool_span(&enc, &hidden, s.topic)?,
        pool_span(&enc, &hidden, s.property)?,
        pool_span(&enc, &hidden, s.vehicle)?,
    ]))
}

/// Mean pairwise L2 distances between components, over the records that
/// have all three. Sentences are left unmasked.
pub fn component_distances(records: &[SimileRecord], model: &dyn MaskedLm) -> Result<DistanceSummary, AnalysisError> {
    let mut sum = DistanceSummary::default();
    for r in records {
        let Some([t, p, v]) = component_vectors(r, model)? else {
            sum.skipped += 1;
            continue;
        };
        sum.mean_tp += l2_distance(&t, &p);
        sum.mean_pv += l2_distance(&p, &v);
        sum.mean_tv += l2_distance(&t, &v);
        sum.records += 1;
    }
    if sum.records > 0 {
        let n = sum.records as f64;
        sum.mean_tp /= n;
        sum.mean_pv /= n;
        sum.mean_tv /= n;
    }
    Ok(sum)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pca {
    /// One `[pc1, pc2]` pair per input row.
    pub coords: Vec<[f64; 2]>,
    pub explained_variance_ratio: [f64; 2],
}

/// Projects the rows of `x` onto their top two principal components.
///
/// Uses the eigen-decomposition of the centred Gram matrix, which has the
/// same non-zero spectrum as the covariance and is small when there are
/// fewer rows than columns. Each axis is oriented so that its largest
/// absolute coordinate is positive.
pub fn pca_2d(x: &Array2<f64>) -> Result<Pca, AnalysisError> {
    let (n, d) = x.dim();
    if n < 3 {
        return Err(AnalysisError::TooFewTokens { need: 3, got: n });
    }
    let mean = x.mean_axis(ndarray::Axis(0)).unwrap();
    let centred = DMatrix::from_fn(n, d, |i, j| x[[i, j]] - mean[j]);
    let gram = &centred * centred.transpose();
    let eig = SymmetricEigen::new(gram);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let total: f64 = eig.eigenvalues.iter().map(|l| l.max(0.0)).sum();
    let (l1, l2) = (eig.eigenvalues[order[0]], eig.eigenvalues[order[1]]);
    if total <= 0.0 || l2 <= total * 1e-10 {
        return Err(AnalysisError::Degenerate);
    }
    let mut coords = vec![[0.0; 2]; n];
    for (k, &col) in order[..2].iter().enumerate() {
        let scale = eig.eigenvalues[col].sqrt();
        let u = eig.eigenvectors.column(col);
        let pivot = (0..n).max_by(|&a, &b| u[a].abs().total_cmp(&u[b].abs())).unwrap();
        let sign = if u[pivot] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..n {
            coords[i][k] = sign * u[i] * scale;
        }
    }
    Ok(Pca {
        coords,
        explained_variance_ratio: [l1 / total, l2 / total],
    })
}

/// Per-word PCA of one sentence's last-layer states; multi-subtoken words
/// are mean-pooled and special tokens left out.
pub fn pca_coords(tokens: &[String], model: &dyn MaskedLm) -> Result<Pca, AnalysisError> {
    if tokens.len() < 3 {
        return Err(AnalysisError::TooFewTokens {
            need: 3,
            got: tokens.len(),
        });
    }
    let (enc, hidden) = encode(model, tokens)?;
    let rows = enc
        .word_to_subtoken
        .iter()
        .map(|r| pool_rows(&hidden, r.clone()))
        .collect::<Result<Vec<_>, _>>()?;
    let d = hidden.ncols();
    let x = Array2::from_shape_fn((rows.len(), d), |(i, j)| rows[i][j] as f64);
    pca_2d(&x)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CategoryAccuracy {
    pub correct: usize,
    pub support: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CategoryBreakdown {
    pub categories: BTreeMap<Category, CategoryAccuracy>,
    /// Outcomes without a category label.
    pub excluded: usize,
}

pub fn category_breakdown(outcomes: &[Outcome]) -> CategoryBreakdown {
    let mut out = CategoryBreakdown::default();
    for o in outcomes {
        match o.category {
            Some(c) => {
                let e = out.categories.entry(c).or_default();
                e.support += 1;
                e.correct += o.correct as usize;
            }
            None => out.excluded += 1,
        }
    }
    for e in out.categories.values_mut() {
        e.accuracy = e.correct as f64 / e.support as f64;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::record::{Source, Span, Spans};
    use crate::stub::StubLm;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rec(s: &str, t: usize, p: usize, v: usize) -> SimileRecord {
        let tokens: Vec<String> = s.split_whitespace().map(String::from).collect();
        let spans = Spans {
            topic: Span::single(t),
            property: Span::single(p),
            vehicle: Span::single(v),
            event: Span::EMPTY,
            comparator: vec![Span::single(p - 1), Span::single(p + 1)],
        };
        SimileRecord::new(tokens, spans, Source::User).unwrap()
    }

    #[test]
    fn identical_vectors_zero_distance() {
        // topic, property and vehicle all map to the same piece
        let same = StubLm::new(4, &[]).with_split("he", &["x"]).with_split("slow", &["x"]).with_split("snail", &["x"]);
        let r = rec("he is as slow as a snail", 0, 3, 6);
        let d = component_distances(&[r], &same).unwrap();
        assert_eq!((d.mean_tp, d.mean_pv, d.mean_tv), (0.0, 0.0, 0.0));
    }

    #[test]
    fn two_records_manual_means() {
        let m = StubLm::new(3, &["ann", "was", "as", "slow", "a", "snail", "bob", "fast", "hare"]);
        let recs = [rec("ann was as slow as a snail", 0, 3, 6), rec("bob was as fast as a hare", 0, 3, 6)];
        let d = component_distances(&recs, &m).unwrap();
        // stub hidden state: embedding + 0.5 * sentence mean; pooled single words
        let manual = |r: &SimileRecord| {
            let ids: Vec<u32> = std::iter::once(0)
                .chain(r.tokens.iter().map(|w| m.id(w).unwrap()))
                .chain(std::iter::once(1))
                .collect();
            let e = m.embeddings();
            let mean: Vec<f64> = (0..3)
                .map(|j| ids.iter().map(|&i| e[[i as usize, j]] as f64).sum::<f64>() / ids.len() as f64)
                .collect();
            let h = |w: &str| -> Vec<f64> { (0..3).map(|j| e[[m.id(w).unwrap() as usize, j]] as f64 + 0.5 * mean[j]).collect() };
            let l2 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            let (t, p, v) = (h(&r.tokens[0]), h(&r.tokens[3]), h(&r.tokens[6]));
            (l2(&t, &p), l2(&p, &v), l2(&t, &v))
        };
        let (a, b) = (manual(&recs[0]), manual(&recs[1]));
        assert_abs_diff_eq!(d.mean_tp, (a.0 + b.0) / 2.0, epsilon = 1e-5);
        assert_abs_diff_eq!(d.mean_pv, (a.1 + b.1) / 2.0, epsilon = 1e-5);
        assert_abs_diff_eq!(d.mean_tv, (a.2 + b.2) / 2.0, epsilon = 1e-5);
    }

    #[test]
    fn topicless_record_skipped() {
        let m = StubLm::new(3, &["as", "slow", "a", "snail"]);
        let mut r = rec("x as slow as a snail", 0, 2, 5);
        r.spans.topic = Span::EMPTY;
        let d = component_distances(&[r], &m).unwrap();
        assert_eq!((d.records, d.skipped), (0, 1));
    }

    /// Cyclic Jacobi eigen-decomposition of a symmetric matrix.
    fn jacobi(mut a: Vec<Vec<f64>>) -> (Vec<f64>, Vec<Vec<f64>>) {
        let n = a.len();
        let mut v = vec![vec![0.0; n]; n];
        for (i, row) in v.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        for _ in 0..100 {
            for p in 0..n {
                for q in p + 1..n {
                    if a[p][q].abs() < 1e-15 {
                        continue;
                    }
                    let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let (akp, akq) = (a[k][p], a[k][q]);
                        a[k][p] = c * akp - s * akq;
                        a[k][q] = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let (apk, aqk) = (a[p][k], a[q][k]);
                        a[p][k] = c * apk - s * aqk;
                        a[q][k] = s * apk + c * aqk;
                    }
                    for row in v.iter_mut() {
                        let (vp, vq) = (row[p], row[q]);
                        row[p] = c * vp - s * vq;
                        row[q] = s * vp + c * vq;
                    }
                }
            }
        }
        ((0..n).map(|i| a[i][i]).collect(), v)
    }

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn pca_matches_covariance_eigen_oracle() {
        let x = random_matrix(6, 8, 5);
        let pca = pca_2d(&x).unwrap();
        // oracle: eigenvectors of the 8x8 scatter matrix, project centred rows
        let mean: Vec<f64> = (0..8).map(|j| (0..6).map(|i| x[[i, j]]).sum::<f64>() / 6.0).collect();
        let c: Vec<Vec<f64>> = (0..6).map(|i| (0..8).map(|j| x[[i, j]] - mean[j]).collect()).collect();
        let scatter: Vec<Vec<f64>> = (0..8)
            .map(|a| (0..8).map(|b| (0..6).map(|i| c[i][a] * c[i][b]).sum()).collect())
            .collect();
        let (vals, vecs) = jacobi(scatter);
        let mut order: Vec<usize> = (0..8).collect();
        order.sort_by(|&a, &b| vals[b].total_cmp(&vals[a]));
        let total: f64 = vals.iter().sum();
        for k in 0..2 {
            let axis: Vec<f64> = (0..8).map(|j| vecs[j][order[k]]).collect();
            let proj: Vec<f64> = c.iter().map(|r| r.iter().zip(&axis).map(|(a, b)| a * b).sum()).collect();
            let ours: Vec<f64> = pca.coords.iter().map(|p| p[k]).collect();
            let same = proj.iter().zip(&ours).all(|(a, b)| (a - b).abs() < 1e-8);
            let flipped = proj.iter().zip(&ours).all(|(a, b)| (a + b).abs() < 1e-8);
            assert!(same || flipped, "axis {k}: {proj:?} vs {ours:?}");
            assert_abs_diff_eq!(pca.explained_variance_ratio[k], vals[order[k]] / total, epsilon = 1e-9);
        }
    }

    #[test]
    fn planar_points_fully_explained_and_centred() {
        // rows in span{(1,0,1), (0,1,-1)} shifted by a constant offset
        let pts = [[0.0, 0.0], [1.0, 0.0], [0.0, 2.0], [3.0, 1.0], [-1.0, 4.0]];
        let x = Array2::from_shape_fn((5, 3), |(i, j)| {
            let [a, b] = pts[i];
            [a + 5.0, b - 2.0, a - b + 1.0][j]
        });
        let pca = pca_2d(&x).unwrap();
        assert_abs_diff_eq!(pca.explained_variance_ratio.iter().sum::<f64>(), 1.0, epsilon = 1e-9);
        for k in 0..2 {
            assert_abs_diff_eq!(pca.coords.iter().map(|c| c[k]).sum::<f64>(), 0.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn pca_rejects_degenerate_and_tiny() {
        let line = Array2::from_shape_fn((4, 3), |(i, j)| (i * (j + 1)) as f64);
        assert!(matches!(pca_2d(&line), Err(AnalysisError::Degenerate)));
        assert!(matches!(pca_2d(&random_matrix(2, 4, 0)), Err(AnalysisError::TooFewTokens { .. })));
    }

    #[test]
    fn pca_on_model_sentence() {
        let m = StubLm::new(8, &["the", "old", "man", "was", "as", "slow", "a", "snail"]);
        let toks: Vec<String> = "the old man was as slow as a snail".split(' ').map(String::from).collect();
        let p = pca_coords(&toks, &m).unwrap();
        assert_eq!(p.coords.len(), 9);
    }

    #[test]
    fn pca_row_permutation_invariant() {
        let x = random_matrix(7, 5, 2);
        let perm = [3, 0, 6, 1, 5, 2, 4];
        let y = Array2::from_shape_fn((7, 5), |(i, j)| x[[perm[i], j]]);
        let (a, b) = (pca_2d(&x).unwrap(), pca_2d(&y).unwrap());
        for k in 0..2 {
            let s = (0..7).all(|i| (a.coords[perm[i]][k] - b.coords[i][k]).abs() < 1e-9);
            let f = (0..7).all(|i| (a.coords[perm[i]][k] + b.coords[i][k]).abs() < 1e-9);
            assert!(s || f);
        }
    }

    fn outcome(cat: Option<Category>, correct: bool) -> Outcome {
        Outcome {
            dataset: "q".into(),
            record_id: String::new(),
            category: cat,
            seed: 0,
            chosen: 0,
            correct,
        }
    }

    #[test]
    fn category_tally() {
        use Category::*;
        // color 3/4, emotion 1/3, time 2/2, one unlabeled
        let items = [
            (Some(Color), true),
            (Some(Color), true),
            (Some(Color), false),
            (Some(Color), true),
            (Some(Emotion), false),
            (Some(Emotion), true),
            (Some(Emotion), false),
            (Some(Time), true),
            (Some(Time), true),
            (None, true),
        ];
        let o: Vec<Outcome> = items.iter().map(|&(c, r)| outcome(c, r)).collect();
        let b = category_breakdown(&o);
        assert_eq!(b.categories[&Color].accuracy, 0.75);
        assert_abs_diff_eq!(b.categories[&Emotion].accuracy, 1.0 / 3.0);
        assert_eq!(b.categories[&Time].accuracy, 1.0);
        assert_eq!(b.excluded, 1);
        assert_eq!(b.categories.values().map(|c| c.support).sum::<usize>() + b.excluded, 10);
        let all = category_breakdown(&items.iter().map(|&(c, _)| outcome(c, true)).collect::<Vec<_>>());
        assert!(all.categories.values().all(|c| c.accuracy == 1.0));
    }

    proptest! {
        #[test]
        fn l2_metric_axioms(a in prop::collection::vec(-10f32..10.0, 5), b in prop::collection::vec(-10f32..10.0, 5), c in prop::collection::vec(-10f32..10.0, 5)) {
            prop_assert!((l2_distance(&a, &b) - l2_distance(&b, &a)).abs() < 1e-12);
            prop_assert!(l2_distance(&a, &c) <= l2_distance(&a, &b) + l2_distance(&b, &c) + 1e-9);
        }
    }
}
