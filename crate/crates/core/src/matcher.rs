//! Similarity matching: cosine similarity, softmax and the θ threshold.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::regions::BBox;

/// Label written for predictions that fall below θ.
pub const DISCARDED: &str = "DISCARDED";

pub fn cosine_sim(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::invalid(format!("cosine of vectors with dims {} and {}", u.len(), v.len())));
    }
    let su = u.iter().map(|x| x * x).sum::<f64>();
    let sv = v.iter().map(|x| x * x).sum::<f64>();
    if !(su.sqrt() > 1e-12) || !(sv.sqrt() > 1e-12) {
        return Err(Error::DegenerateVector(format!("norms {:e} and {:e}", su.sqrt(), sv.sqrt())));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    // sqrt(s * s) == s exactly, so identical vectors give exactly 1.
    Ok((dot / (su * sv).sqrt()).clamp(-1.0, 1.0))
}

/// How rows are compared when building the similarity matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Similarity {
    #[default]
    Cosine,
    /// Negated Euclidean distance; only meaningful in SVD score space.
    NegEuclidean,
}

/// Entry (i, j) compares object row i with category row j.
pub fn similarity_matrix(objects: &DMatrix<f64>, categories: &DMatrix<f64>, metric: Similarity) -> Result<DMatrix<f64>> {
    if objects.ncols() != categories.ncols() {
        return Err(Error::invalid(format!(
            "object rows have {} columns, category rows {}",
            objects.ncols(),
            categories.ncols()
        )));
    }
    let rows = |m: &DMatrix<f64>| -> Vec<Vec<f64>> { m.row_iter().map(|r| r.iter().copied().collect()).collect() };
    let (obj, cat) = (rows(objects), rows(categories));
    let mut out = DMatrix::zeros(obj.len(), cat.len());
    match metric {
        Similarity::Cosine => {
            let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
            let check = |v: &[f64], what: &str, i: usize| {
                if norm(v) > 1e-12 {
                    Ok(())
                } else {
                    Err(Error::DegenerateVector(format!("{what} row {i} has zero norm")))
                }
            };
            for (i, o) in obj.iter().enumerate() {
                check(o, "object", i)?;
            }
            for (j, c) in cat.iter().enumerate() {
                check(c, "category", j)?;
            }
            for (i, o) in obj.iter().enumerate() {
                for (j, c) in cat.iter().enumerate() {
                    out[(i, j)] = cosine_sim(o, c)?;
                }
            }
        }
        Similarity::NegEuclidean => {
            for (i, o) in obj.iter().enumerate() {
                for (j, c) in cat.iter().enumerate() {
                    out[(i, j)] = -o.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                }
            }
        }
    }
    Ok(out)
}

/// Max-shifted softmax.
pub fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decision {
    /// `None` when the top probability is below θ.
    pub category: Option<usize>,
    pub argmax: usize,
    pub probability: f64,
}

/// Argmax (lowest index on ties) kept iff its probability is not below θ.
pub fn classify(probs: &[f64], theta: f64) -> Result<Decision> {
    if probs.is_empty() {
        return Err(Error::invalid("cannot classify an empty distribution"));
    }
    if !(0.0..=1.0).contains(&theta) {
        return Err(Error::invalid(format!("theta must lie in [0, 1], got {theta}")));
    }
    let (argmax, probability) = probs
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, p)| if p > best.1 { (i, p) } else { best });
    let category = if probability < theta { None } else { Some(argmax) };
    Ok(Decision { category, argmax, probability })
}

/// Per-region recognition result.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub image_id: u64,
    pub region_id: usize,
    pub bbox: BBox,
    pub decision: Decision,
    pub similarities: Vec<f64>,
    pub probabilities: Vec<f64>,
}

/// Scores every object row of one image against all categories.
pub fn predict(
    image_id: u64,
    regions: &[(usize, BBox)],
    objects: &DMatrix<f64>,
    categories: &DMatrix<f64>,
    theta: f64,
    metric: Similarity,
) -> Result<Vec<Prediction>> {
    if regions.len() != objects.nrows() {
        return Err(Error::invalid(format!("{} regions but {} object rows", regions.len(), objects.nrows())));
    }
    let sims = similarity_matrix(objects, categories, metric)?;
    regions
        .iter()
        .enumerate()
        .map(|(i, &(region_id, bbox))| {
            let similarities: Vec<f64> = sims.row(i).iter().copied().collect();
            let probabilities = softmax(&similarities);
            let decision = classify(&probabilities, theta)?;
            Ok(Prediction { image_id, region_id, bbox, decision, similarities, probabilities })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedLabel {
    pub category: String,
    pub probability: f64,
}

/// One line of `predictions.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionLine {
    pub image_id: u64,
    pub region_id: usize,
    pub bbox: BBox,
    /// Category name, or `"DISCARDED"`.
    pub category: String,
    pub category_index: Option<usize>,
    pub probability: f64,
    pub top5: Vec<RankedLabel>,
}

impl PredictionLine {
    pub fn from_prediction(p: &Prediction, names: &[&str]) -> Self {
        let mut ranked: Vec<usize> = (0..p.probabilities.len()).collect();
        ranked.sort_by(|&a, &b| p.probabilities[b].total_cmp(&p.probabilities[a]).then(a.cmp(&b)));
        PredictionLine {
            image_id: p.image_id,
            region_id: p.region_id,
            bbox: p.bbox,
            category: p.decision.category.map_or(DISCARDED.to_string(), |c| names[c].to_string()),
            category_index: p.decision.category,
            probability: p.decision.probability,
            top5: ranked
                .into_iter()
                .take(5)
                .map(|j| RankedLabel { category: names[j].to_string(), probability: p.probabilities[j] })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cosine_cases() {
        assert_eq!(cosine_sim(&[0.3, -2.0, 5.0], &[0.3, -2.0, 5.0]).unwrap(), 1.0);
        assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine_sim(&[1.0, 2.0], &[2.0, 4.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!(matches!(cosine_sim(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::DegenerateVector(_))));
    }

    #[test]
    fn similarity_identical_and_orthonormal() {
        let m = DMatrix::from_row_slice(3, 3, &[1.0, 2.0, 0.0, 0.0, 1.0, 1.0, 3.0, 0.0, 1.0]);
        let s = similarity_matrix(&m, &m, Similarity::Cosine).unwrap();
        for i in 0..3 {
            assert!((s[(i, i)] - 1.0).abs() < 1e-15);
        }
        let eye = DMatrix::<f64>::identity(4, 4);
        let obj = eye.rows(2, 1).into_owned();
        let row = similarity_matrix(&obj, &eye, Similarity::Cosine).unwrap();
        assert_eq!(row.row(0).iter().copied().collect::<Vec<_>>(), vec![0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn similarity_matches_double_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = DMatrix::from_fn(5, 8, |_, _| rng.random_range(-1.0..1.0));
        let b = DMatrix::from_fn(3, 8, |_, _| rng.random_range(-1.0..1.0));
        let s = similarity_matrix(&a, &b, Similarity::Cosine).unwrap();
        for i in 0..5 {
            for j in 0..3 {
                let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
                for k in 0..8 {
                    dot += a[(i, k)] * b[(j, k)];
                    na += a[(i, k)] * a[(i, k)];
                    nb += b[(j, k)] * b[(j, k)];
                }
                assert!((s[(i, j)] - dot / (na.sqrt() * nb.sqrt())).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn degenerate_row_is_named() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        match similarity_matrix(&a, &a.rows(0, 1).into_owned(), Similarity::Cosine) {
            Err(Error::DegenerateVector(msg)) => assert!(msg.contains("object row 1"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn softmax_closed_forms() {
        assert_eq!(softmax(&[0.0, 0.0]), vec![0.5, 0.5]);
        let p = softmax(&[2f64.ln(), 0.0]);
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-15 && (p[1] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(softmax(&[1000.0, 1000.0]), vec![0.5, 0.5]);
    }

    #[test]
    fn classify_cases() {
        let d = classify(&[0.6, 0.4], 0.5).unwrap();
        assert_eq!((d.category, d.probability), (Some(0), 0.6));
        assert_eq!(classify(&[0.4, 0.35, 0.25], 0.5).unwrap().category, None);
        assert_eq!(classify(&[0.5, 0.5], 0.5).unwrap().category, Some(0));
        assert!(classify(&[], 0.1).is_err());
        assert!(classify(&[1.0], 1.5).is_err());
    }

    #[test]
    fn prediction_line_top5_and_discard_label() {
        let probs = softmax(&[0.1, 0.9, 0.3, 0.2, 0.5, 0.0]);
        let p = Prediction {
            image_id: 4,
            region_id: 1,
            bbox: BBox::new(0, 0, 1, 1).unwrap(),
            decision: classify(&probs, 0.99).unwrap(),
            similarities: vec![],
            probabilities: probs,
        };
        let names = ["a", "b", "c", "d", "e", "f"];
        let line = PredictionLine::from_prediction(&p, &names);
        assert_eq!(line.category, DISCARDED);
        assert_eq!(line.category_index, None);
        let top: Vec<_> = line.top5.iter().map(|r| r.category.as_str()).collect();
        assert_eq!(top, vec!["b", "e", "c", "d", "a"]);
    }

    proptest! {
        #[test]
        fn softmax_is_a_shift_invariant_distribution(
            row in prop::collection::vec(-50.0f64..50.0, 1..40),
            shift in -1e3f64..1e3,
        ) {
            let p = softmax(&row);
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(p.iter().all(|&x| x > 0.0 && x <= 1.0));
            let shifted: Vec<f64> = row.iter().map(|x| x + shift).collect();
            let q = softmax(&shifted);
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            prop_assert_eq!(classify(&p, 0.0).unwrap().argmax, classify(&q, 0.0).unwrap().argmax);
        }

        #[test]
        fn argmax_survives_monotone_transforms(row in prop::collection::vec(-1.0f64..1.0, 2..20)) {
            let base = classify(&softmax(&row), 0.0).unwrap().argmax;
            let cubed: Vec<f64> = row.iter().map(|x| 3.0 * x * x * x + 0.5).collect();
            prop_assert_eq!(classify(&softmax(&cubed), 0.0).unwrap().argmax, base);
        }

        #[test]
        fn theta_extremes(row in prop::collection::vec(-1.0f64..1.0, 2..20)) {
            let p = softmax(&row);
            prop_assert!(classify(&p, 0.0).unwrap().category.is_some());
            prop_assert!(classify(&p, 1.0).unwrap().category.is_none());
        }

        #[test]
        fn cosine_on_unit_rows_is_inner_product(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut a = DMatrix::from_fn(4, 6, |_, _| rng.random_range(-1.0..1.0));
            let mut b = DMatrix::from_fn(3, 6, |_, _| rng.random_range(-1.0..1.0));
            for mut r in a.row_iter_mut() { let n = r.norm(); r /= n; }
            for mut r in b.row_iter_mut() { let n = r.norm(); r /= n; }
            let s = similarity_matrix(&a, &b, Similarity::Cosine).unwrap();
            prop_assert!((s - &a * b.transpose()).amax() < 1e-10);
        }
    }
}
