//! Agreement metrics, per-system aggregation, embedding retrieval and PCA.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("need at least {min} items, got {got}")]
    TooFew { min: usize, got: usize },
    #[error("correlation undefined: {0} input is constant")]
    ConstantInput(&'static str),
    #[error("k = {k} must be smaller than the dataset size {n}")]
    KTooLarge { k: usize, n: usize },
    #[error("embeddings have inconsistent dimensions")]
    RaggedEmbeddings,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
}

pub type Result<T> = std::result::Result<T, EvalError>;

fn check_pair(a: &[f64], b: &[f64], min: usize) -> Result<()> {
    if a.len() != b.len() {
        return Err(EvalError::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    if a.len() < min {
        return Err(EvalError::TooFew { min, got: a.len() });
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(EvalError::NonFinite("metric input"));
    }
    Ok(())
}

pub fn mse(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_pair(pred, target, 1)?;
    Ok(pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / pred.len() as f64)
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y, 2)?;
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 {
        return Err(EvalError::ConstantInput("first"));
    }
    if syy == 0.0 {
        return Err(EvalError::ConstantInput("second"));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// 1-based ranks; tied values share the mean of their rank span.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y, 2)?;
    pearson(&average_ranks(x), &average_ranks(y))
}

/// Mean value per system, ordered by system id.
pub fn aggregate_system(scores: &[(String, f64)]) -> Vec<(String, f64)> {
    let mut acc: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
    for (id, v) in scores {
        let e = acc.entry(id.as_str()).or_default();
        e.0 += v;
        e.1 += 1;
    }
    acc.into_iter().map(|(id, (s, n))| (id.to_string(), s / n as f64)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    System,
    Utterance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub level: Level,
    pub mse: f64,
    pub pearson: f64,
    pub spearman: f64,
    pub count: usize,
    /// (predicted, target) pairs the metrics were computed on.
    #[serde(skip)]
    pub pairs: Vec<(f64, f64)>,
}

pub fn evaluate(level: Level, pred: &[f64], target: &[f64]) -> Result<EvalReport> {
    Ok(EvalReport {
        level,
        mse: mse(pred, target)?,
        pearson: pearson(pred, target)?,
        spearman: spearman(pred, target)?,
        count: pred.len(),
        pairs: pred.iter().copied().zip(target.iter().copied()).collect(),
    })
}

/// Utterance- and system-level reports from `(system_id, predicted, target)`.
pub fn evaluate_both(rows: &[(String, f64, f64)]) -> Result<[EvalReport; 2]> {
    let pred: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let target: Vec<f64> = rows.iter().map(|r| r.2).collect();
    let utterance = evaluate(Level::Utterance, &pred, &target)?;
    let sys_pred = aggregate_system(&rows.iter().map(|r| (r.0.clone(), r.1)).collect::<Vec<_>>());
    let sys_target = aggregate_system(&rows.iter().map(|r| (r.0.clone(), r.2)).collect::<Vec<_>>());
    let sp: Vec<f64> = sys_pred.iter().map(|s| s.1).collect();
    let st: Vec<f64> = sys_target.iter().map(|s| s.1).collect();
    Ok([evaluate(Level::System, &sp, &st)?, utterance])
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

fn check_embeddings(e: &[Vec<f64>]) -> Result<usize> {
    let dim = e.first().map_or(0, Vec::len);
    if e.iter().any(|v| v.len() != dim) {
        return Err(EvalError::RaggedEmbeddings);
    }
    if e.iter().flatten().any(|v| !v.is_finite()) {
        return Err(EvalError::NonFinite("embeddings"));
    }
    Ok(dim)
}

/// Mean precision@k of cosine-similarity retrieval with every item as a
/// query. Ties are broken by the lower item index.
pub fn retrieval_mp(embeddings: &[Vec<f64>], labels: &[u8], k: usize) -> Result<f64> {
    let n = embeddings.len();
    if labels.len() != n {
        return Err(EvalError::LengthMismatch { left: n, right: labels.len() });
    }
    if k == 0 || k >= n {
        return Err(EvalError::KTooLarge { k, n });
    }
    check_embeddings(embeddings)?;
    let precisions: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|q| {
            let mut others: Vec<(f64, usize)> = (0..n)
                .filter(|&i| i != q)
                .map(|i| (cosine(&embeddings[q], &embeddings[i]), i))
                .collect();
            others.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            others[..k].iter().filter(|(_, i)| labels[*i] == labels[q]).count() as f64 / k as f64
        })
        .collect();
    Ok(precisions.iter().sum::<f64>() / n as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pca2 {
    pub coords: Vec<[f64; 2]>,
    pub components: [Vec<f64>; 2],
    /// Eigenvalues of the covariance for the two components.
    pub variances: [f64; 2],
    pub mean: Vec<f64>,
}

const PCA_TOL: f64 = 1e-8;
const PCA_MAX_ITERS: usize = 100_000;

fn mat_vec(m: &[f64], v: &[f64]) -> Vec<f64> {
    m.chunks(v.len()).map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum()).collect()
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

/// Leading eigenpair of a symmetric PSD matrix restricted to the complement
/// of `avoid`. Eigenvalues below `1e-12·scale` count as zero.
fn power_iteration(cov: &[f64], dim: usize, avoid: Option<&[f64]>, scale: f64) -> (Vec<f64>, f64) {
    let project = |v: &mut Vec<f64>| {
        if let Some(a) = avoid {
            for _ in 0..2 {
                let d: f64 = v.iter().zip(a).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(a).for_each(|(x, y)| *x -= d * y);
            }
        }
    };
    let mut v: Vec<f64> = (0..dim).map(|i| 1.0 + 0.37 * i as f64 / dim as f64).collect();
    project(&mut v);
    if normalize(&mut v) < 1e-12 {
        v = (0..dim).map(|i| if i == 1 { 1.0 } else { 0.0 }).collect();
        project(&mut v);
        normalize(&mut v);
    }
    for _ in 0..PCA_MAX_ITERS {
        let mut next = mat_vec(cov, &v);
        project(&mut next);
        if normalize(&mut next) <= 1e-12 * scale {
            return (v, 0.0);
        }
        let delta = v.iter().zip(&next).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        v = next;
        if delta < PCA_TOL {
            break;
        }
    }
    let lambda = v.iter().zip(mat_vec(cov, &v)).map(|(a, b)| a * b).sum();
    (v, lambda)
}

fn fix_sign(v: &mut [f64]) {
    let largest = v.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
    if largest < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Projection onto the top two principal components, found by power
/// iteration with deflation.
pub fn pca2(embeddings: &[Vec<f64>]) -> Result<Pca2> {
    if embeddings.len() < 3 {
        return Err(EvalError::TooFew { min: 3, got: embeddings.len() });
    }
    let dim = check_embeddings(embeddings)?;
    if dim < 2 {
        return Err(EvalError::TooFew { min: 2, got: dim });
    }
    let n = embeddings.len() as f64;
    let mean: Vec<f64> = (0..dim).map(|d| embeddings.iter().map(|e| e[d]).sum::<f64>() / n).collect();
    let centered: Vec<Vec<f64>> = embeddings
        .iter()
        .map(|e| e.iter().zip(&mean).map(|(x, m)| x - m).collect())
        .collect();
    let mut cov = vec![0.0; dim * dim];
    for row in &centered {
        for i in 0..dim {
            for j in 0..dim {
                cov[i * dim + j] += row[i] * row[j] / n;
            }
        }
    }
    let scale = cov.iter().fold(0.0f64, |m, c| m.max(c.abs()));
    let (mut v1, l1) = power_iteration(&cov, dim, None, scale);
    for i in 0..dim {
        for j in 0..dim {
            cov[i * dim + j] -= l1 * v1[i] * v1[j];
        }
    }
    let (mut v2, l2) = power_iteration(&cov, dim, Some(&v1), scale);
    fix_sign(&mut v1);
    fix_sign(&mut v2);
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let coords = centered.iter().map(|c| [dot(c, &v1), dot(c, &v2)]).collect();
    Ok(Pca2 {
        coords,
        components: [v1, v2],
        variances: [l1, l2.max(0.0)],
        mean,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_examples() {
        assert_eq!(mse(&[3.0, 4.0], &[3.0, 5.0]).unwrap(), 0.5);
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 1.0, 2.0]).unwrap() + 0.5).abs() < 1e-12);
    }

    #[test]
    fn degenerate_inputs_are_errors() {
        assert_eq!(
            pearson(&[1.0, 1.0], &[1.0, 2.0]),
            Err(EvalError::ConstantInput("first"))
        );
        assert!(matches!(spearman(&[1.0], &[1.0]), Err(EvalError::TooFew { .. })));
        assert!(matches!(mse(&[1.0], &[1.0, 2.0]), Err(EvalError::LengthMismatch { .. })));
        assert!(matches!(mse(&[f64::NAN], &[1.0]), Err(EvalError::NonFinite(_))));
    }

    #[test]
    fn ties_share_ranks() {
        assert_eq!(average_ranks(&[10.0, 20.0, 10.0, 5.0]), vec![2.5, 4.0, 2.5, 1.0]);
    }

    #[test]
    fn aggregation_example() {
        let rows = vec![("B".to_string(), 2.0), ("A".to_string(), 3.0), ("A".to_string(), 5.0)];
        assert_eq!(aggregate_system(&rows), vec![("A".to_string(), 4.0), ("B".to_string(), 2.0)]);
        assert_eq!(aggregate_system(&rows[1..2]), vec![("A".to_string(), 3.0)]);
    }

    #[test]
    fn identical_predictions_are_perfect() {
        let rows: Vec<(String, f64, f64)> = (0..12).map(|i| (format!("sys{}", i % 4), i as f64 * 0.3, i as f64 * 0.3)).collect();
        for r in evaluate_both(&rows).unwrap() {
            assert_eq!(r.mse, 0.0);
            assert!((r.pearson - 1.0).abs() < 1e-12 && (r.spearman - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn one_hot_embeddings_retrieve_perfectly() {
        let mut e = Vec::new();
        let mut labels = Vec::new();
        for label in 0..10u8 {
            for _ in 0..100 {
                let mut v = vec![0.0; 10];
                v[label as usize] = 1.0;
                e.push(v);
                labels.push(label);
            }
        }
        assert_eq!(retrieval_mp(&e, &labels, 10).unwrap(), 1.0);
        assert!(matches!(retrieval_mp(&e[..5], &labels[..5], 5), Err(EvalError::KTooLarge { .. })));
    }

    #[test]
    fn collinear_points_have_no_second_component() {
        let pts: Vec<Vec<f64>> = (0..7).map(|i| vec![i as f64 - 1.5, 2.0 * (i as f64 - 1.5)]).collect();
        let p = pca2(&pts).unwrap();
        assert!(p.coords.iter().all(|c| c[1].abs() < 1e-6), "{p:?}");
        assert!(p.variances[0] >= p.variances[1]);
    }

    #[test]
    fn two_dimensional_data_reconstructs_exactly() {
        let pts = vec![vec![1.0, 0.3], vec![-2.0, 1.0], vec![0.5, -0.7], vec![3.0, 2.0], vec![-1.0, -1.5]];
        let p = pca2(&pts).unwrap();
        for (x, c) in pts.iter().zip(&p.coords) {
            for d in 0..2 {
                let rec = p.mean[d] + c[0] * p.components[0][d] + c[1] * p.components[1][d];
                assert!((rec - x[d]).abs() < 1e-6);
            }
        }
        let var = |k: usize| p.coords.iter().map(|c| c[k] * c[k]).sum::<f64>();
        assert!(var(0) >= var(1));
        for comp in &p.components {
            let largest = comp.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
            assert!(largest > 0.0);
        }
    }

    #[test]
    fn pca_needs_three_points() {
        assert!(matches!(pca2(&[vec![1.0, 2.0], vec![0.0, 1.0]]), Err(EvalError::TooFew { min: 3, got: 2 })));
    }
}
