//! Evaluation metrics and summary statistics.

use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::mask::PruneMask;
use crate::nn::train::correct_predictions;
use crate::nn::{self, ParamVector, Real, Targets};

const EVAL_CHUNK: usize = 2000;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub loss: f64,
    pub correct: usize,
    pub total: usize,
}

/// Argmax accuracy (ties resolve to the lowest class index) and mean loss.
pub fn evaluate<T: Real>(params: &ParamVector<T>, mask: &PruneMask, testset: &LabeledDataset) -> Result<Evaluation> {
    let n = testset.labels().len();
    if n == 0 {
        return Err(Error::Data("test set is empty".into()));
    }
    let (mut correct, mut loss_sum) = (0usize, 0.0f64);
    let rows: Vec<usize> = (0..n).collect();
    for chunk in rows.chunks(EVAL_CHUNK) {
        let batch = testset.rows(chunk);
        let out = nn::forward(params, mask, &batch)?;
        if let Targets::Classes(labels) = &batch.targets {
            correct += correct_predictions(&out.logits, labels);
        }
        loss_sum += out.loss.as_f64() * chunk.len() as f64;
    }
    Ok(Evaluation { accuracy: correct as f64 / n as f64, loss: loss_sum / n as f64, correct, total: n })
}

/// One evaluated (mask, trained parameters) pair.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub criterion: String,
    /// Achieved density over eligible positions.
    pub density: f64,
    pub seed: u64,
    pub test_accuracy: f64,
    pub test_loss: f64,
    pub epochs: usize,
    pub wall_s: f64,
    pub eligible_set: String,
    pub per_layer_kept: Vec<usize>,
    pub notes: String,
}

impl EvalReport {
    pub fn new(criterion: &str, mask: &PruneMask, seed: u64, eval: Evaluation) -> Self {
        Self {
            criterion: criterion.to_string(),
            density: mask.density(),
            seed,
            test_accuracy: eval.accuracy,
            test_loss: eval.loss,
            epochs: 0,
            wall_s: 0.0,
            eligible_set: mask.options().eligibility.name().to_string(),
            per_layer_kept: mask.per_layer_report().iter().map(|r| r.kept).collect(),
            notes: String::new(),
        }
    }
}

pub fn accuracy<T: Real>(params: &ParamVector<T>, mask: &PruneMask, testset: &LabeledDataset) -> Result<f64> {
    evaluate(params, mask, testset).map(|e| e.accuracy)
}

/// Lin's concordance correlation coefficient with population (1/n) moments:
/// `2·cov(x, y) / (var(x) + var(y) + (mean(x) − mean(y))²)`.
///
/// Two constant inputs give 1 when equal and 0 otherwise.
pub fn ccc(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Shape(format!("ccc needs two arrays of equal length >= 2, got {} and {}", x.len(), y.len())));
    }
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    let (vx, vy, cov) = (sxx / n, syy / n, sxy / n);
    let denom = vx + vy + (mx - my) * (mx - my);
    if denom == 0.0 {
        return Ok(1.0);
    }
    Ok(2.0 * cov / denom)
}

/// Ranks starting at 1, ties sharing their average rank.
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
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

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
        sxy += (a - mx) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    sxy / (sxx * syy).sqrt()
}

/// Spearman rank correlation (Pearson correlation of average ranks).
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Shape("spearman needs two arrays of equal length >= 2".into()));
    }
    Ok(pearson(&average_ranks(x), &average_ranks(y)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreSummary {
    pub count: usize,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub std: f64,
    /// `bins + 1` edges; the last bin is closed on the right.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

/// Summary over the finite entries (sentinels are skipped).
pub fn score_summary(values: &[f64], bins: usize) -> Result<ScoreSummary> {
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    if finite.is_empty() || bins == 0 {
        return Err(Error::Shape("score summary needs finite values and at least one bin".into()));
    }
    let n = finite.len() as f64;
    let mean = finite.iter().sum::<f64>() / n;
    let std = (finite.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let min = finite.iter().copied().fold(f64::INFINITY, f64::min);
    let max = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = if max > min { (max - min) / bins as f64 } else { 1.0 };
    let edges: Vec<f64> = (0..=bins).map(|i| if i == bins { max.max(min + width * bins as f64) } else { min + width * i as f64 }).collect();
    let mut counts = vec![0; bins];
    for v in &finite {
        let b = (((v - min) / width).floor() as usize).min(bins - 1);
        counts[b] += 1;
    }
    Ok(ScoreSummary { count: finite.len(), min, max, mean, std, edges, counts })
}

/// Distinct values with their multiplicities, for label grids such as `{k/N}`.
pub fn value_histogram(values: &[f64]) -> Vec<(f64, usize)> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut out: Vec<(f64, usize)> = Vec::new();
    for v in sorted {
        match out.last_mut() {
            Some((last, count)) if *last == v => *count += 1,
            _ => out.push((v, 1)),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn ccc_hand_cases() {
        assert_eq!(ccc(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 1.0);
        assert_eq!(ccc(&[1.0, 2.0, 3.0], &[2.0, 2.0, 2.0]).unwrap(), 0.0);
        assert!((ccc(&[1.0, 2.0, 3.0], &[2.0, 3.0, 4.0]).unwrap() - 4.0 / 7.0).abs() < 1e-12);
        assert_eq!(ccc(&[2.0, 2.0], &[2.0, 2.0]).unwrap(), 1.0);
        assert_eq!(ccc(&[2.0, 2.0], &[3.0, 3.0]).unwrap(), 0.0);
        assert!(ccc(&[1.0], &[1.0]).is_err());
        assert!(ccc(&[1.0, 2.0], &[1.0]).is_err());
    }

    #[test]
    fn spearman_of_monotone_map_is_one() {
        let x = [0.1, 0.5, 0.2, 0.9, 0.3];
        let y: Vec<f64> = x.iter().map(|v: &f64| v.powi(3) + 2.0).collect();
        assert!((spearman(&x, &y).unwrap() - 1.0).abs() < 1e-12);
        let rev: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((spearman(&x, &rev).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn average_ranks_share_ties() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn summary_of_constant_vector() {
        let s = score_summary(&[0.5; 10], 4).unwrap();
        assert_eq!(s.std, 0.0);
        assert_eq!(s.counts.iter().sum::<usize>(), 10);
        assert_eq!(s.edges.len(), 5);
    }

    #[test]
    fn summary_skips_sentinels() {
        let s = score_summary(&[f64::NEG_INFINITY, 0.0, 1.0], 2).unwrap();
        assert_eq!(s.count, 2);
        assert_eq!(s.counts, vec![1, 1]);
    }

    #[test]
    fn label_grid_histogram() {
        let n = 4.0;
        let labels = [0.0, 1.0 / n, 1.0 / n, 1.0, 3.0 / n];
        let h = value_histogram(&labels);
        assert_eq!(h, vec![(0.0, 1), (0.25, 2), (0.75, 1), (1.0, 1)]);
        assert!(h.iter().all(|(v, _)| ((v * n).round() - v * n).abs() < 1e-12));
    }

    fn pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (2usize..60).prop_flat_map(|n| (prop::collection::vec(-100.0f64..100.0, n), prop::collection::vec(-100.0f64..100.0, n)))
    }

    proptest! {
        #[test]
        fn ccc_is_symmetric_and_bounded((x, y) in pair()) {
            let a = ccc(&x, &y).unwrap();
            prop_assert_eq!(a, ccc(&y, &x).unwrap());
            prop_assert!(a.abs() <= 1.0 + 1e-12);
        }

        #[test]
        fn ccc_is_invariant_to_a_shared_location_scale((x, y) in pair(), a in 0.1f64..10.0, b in -50.0f64..50.0) {
            let base = ccc(&x, &y).unwrap();
            let xs: Vec<f64> = x.iter().map(|v| a * v + b).collect();
            let ys: Vec<f64> = y.iter().map(|v| a * v + b).collect();
            prop_assert!((ccc(&xs, &ys).unwrap() - base).abs() < 1e-9);
        }
    }
}
