//! Ranking metrics over bag-level positive predictions and transition
//! recovery error.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::encoder::{mark_entities, LabeledInstance};
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::noise::TransitionMatrix;
use crate::trainer::{aggregate_bag, predict_instance};

/// Cut-offs reported when the ranked list is at least that long.
pub const P_AT_N: [usize; 4] = [100, 200, 300, 1000];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedPrediction {
    pub bag_id: String,
    pub class: usize,
    pub score: f64,
    pub correct: bool,
}

/// Sorts by descending score, ties by ascending `bag_id`.
pub fn rank(mut predictions: Vec<RankedPrediction>) -> Result<Vec<RankedPrediction>> {
    if let Some(p) = predictions.iter().find(|p| !p.score.is_finite()) {
        return Err(Error::Metric(format!("non-finite score for bag {}", p.bag_id)));
    }
    predictions.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.bag_id.cmp(&b.bag_id))
            .then_with(|| a.class.cmp(&b.class))
    });
    Ok(predictions)
}

/// Fraction correct among the top `min(n, len)` predictions.
pub fn p_at_n(ranked: &[RankedPrediction], n: usize) -> Result<f64> {
    if ranked.is_empty() {
        return Err(Error::Metric("P@N of an empty ranking".into()));
    }
    if n == 0 {
        return Err(Error::Metric("P@N needs n >= 1".into()));
    }
    let top = &ranked[..n.min(ranked.len())];
    Ok(top.iter().filter(|p| p.correct).count() as f64 / top.len() as f64)
}

pub fn average_precision(ranked: &[RankedPrediction], total_positives: usize) -> Result<f64> {
    if total_positives == 0 {
        return Err(Error::Metric("average precision needs at least one positive".into()));
    }
    let mut hits = 0usize;
    let mut exact = Some((0u128, 1u128));
    let mut sum = 0.0;
    for (i, p) in ranked.iter().enumerate() {
        if p.correct {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
            exact = exact.and_then(|acc| add_ratio(acc, (hits as u128, (i + 1) as u128)));
        }
    }
    // Exact when the running fraction fits in 128 bits.
    Ok(match exact.and_then(|(n, d)| Some((n, d.checked_mul(total_positives as u128)?))) {
        Some((n, d)) => n as f64 / d as f64,
        None => sum / total_positives as f64,
    })
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

fn add_ratio((an, ad): (u128, u128), (bn, bd): (u128, u128)) -> Option<(u128, u128)> {
    let g = gcd(ad, bd);
    let den = (ad / g).checked_mul(bd)?;
    let num = an.checked_mul(bd / g)?.checked_add(bn.checked_mul(ad / g)?)?;
    let r = gcd(num, den).max(1);
    Some((num / r, den / r))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub rank: usize,
    pub score: f64,
    pub precision: f64,
    pub recall: f64,
}

/// One point per rank, in ranking order.
pub fn pr_curve(ranked: &[RankedPrediction], total_positives: usize) -> Result<Vec<PrPoint>> {
    if total_positives == 0 {
        return Err(Error::Metric("PR curve needs at least one positive".into()));
    }
    let mut hits = 0usize;
    Ok(ranked
        .iter()
        .enumerate()
        .map(|(i, p)| {
            hits += usize::from(p.correct);
            PrPoint {
                rank: i + 1,
                score: p.score,
                precision: hits as f64 / (i + 1) as f64,
                recall: hits as f64 / total_positives as f64,
            }
        })
        .collect())
}

/// Tab-separated table with a header row.
pub fn pr_table(curve: &[PrPoint]) -> String {
    let mut out = String::from("rank\tscore\tprecision\trecall\n");
    for p in curve {
        writeln!(out, "{}\t{:?}\t{:?}\t{:?}", p.rank, p.score, p.precision, p.recall).expect("string write");
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransitionError {
    pub max_abs: f64,
    pub mean_abs: f64,
}

/// Max and mean absolute difference over off-diagonal entries.
pub fn transition_error(estimate: &[Vec<f64>], truth: &[Vec<f64>]) -> Result<TransitionError> {
    let k = truth.len();
    if k < 2 || estimate.len() != k || estimate.iter().chain(truth).any(|r| r.len() != k) {
        return Err(Error::Shape(format!(
            "cannot compare a {}-row matrix with a {k}-row matrix",
            estimate.len()
        )));
    }
    let mut max_abs = 0.0f64;
    let mut sum = 0.0;
    for i in 0..k {
        for j in (0..k).filter(|&j| j != i) {
            let d = (estimate[i][j] - truth[i][j]).abs();
            max_abs = max_abs.max(d);
            sum += d;
        }
    }
    Ok(TransitionError {
        max_abs,
        mean_abs: sum / (k * (k - 1)) as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub instances: usize,
    pub bags: usize,
    pub na_class: usize,
    pub positive_predictions: usize,
    pub total_positives: usize,
    /// Instance-level argmax accuracy against `true_label`, when every
    /// instance carries one.
    pub accuracy: Option<f64>,
    pub p_at_n: BTreeMap<String, f64>,
    pub average_precision: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transition_error: Option<TransitionError>,
    pub pr_curve: Vec<PrPoint>,
}

/// Scores a model on a labelled corpus. The bag label set is taken from
/// `true_label` where present and from `noisy_label` otherwise.
pub fn evaluate(
    params: &ModelParams,
    instances: &[LabeledInstance],
    na_class: usize,
    max_len: usize,
    t_star: Option<&TransitionMatrix>,
) -> Result<EvalReport> {
    let k = params.classes();
    if na_class >= k {
        return Err(Error::Index { index: na_class, len: k });
    }
    let mut bags: BTreeMap<&str, (Vec<Vec<f64>>, Vec<usize>)> = BTreeMap::new();
    let mut correct = 0usize;
    let mut with_truth = 0usize;
    for inst in instances {
        inst.validate(k).map_err(|(field, msg)| Error::Shape(format!("{field}: {msg}")))?;
        let sentence = mark_entities(&inst.tokens, inst.e1, inst.e2, max_len)?;
        let probs = predict_instance(params, &sentence)?;
        if let Some(t) = inst.true_label {
            with_truth += 1;
            let top = (0..k).fold(0, |b, i| if probs[i] > probs[b] { i } else { b });
            correct += usize::from(top == t);
        }
        let entry = bags.entry(inst.bag_id.as_str()).or_default();
        entry.0.push(probs);
        entry.1.push(inst.true_label.unwrap_or(inst.noisy_label));
    }

    let mut predictions = Vec::new();
    let mut total_positives = 0usize;
    for (bag_id, (probs, labels)) in &bags {
        let mut truth: Vec<usize> = labels.iter().copied().filter(|&l| l != na_class).collect();
        truth.sort_unstable();
        truth.dedup();
        total_positives += truth.len();
        let (class, score) = aggregate_bag(probs, na_class)?;
        if class != na_class {
            predictions.push(RankedPrediction {
                bag_id: bag_id.to_string(),
                class,
                score,
                correct: truth.contains(&class),
            });
        }
    }
    let ranked = rank(predictions)?;

    let mut p_at = BTreeMap::new();
    for n in P_AT_N {
        if ranked.len() >= n {
            p_at.insert(n.to_string(), p_at_n(&ranked, n)?);
        }
    }
    let (average_precision, curve) = if total_positives > 0 {
        (
            Some(average_precision(&ranked, total_positives)?),
            pr_curve(&ranked, total_positives)?,
        )
    } else {
        (None, Vec::new())
    };
    let transition_error = t_star
        .map(|t| transition_error(&params.transition.rows(), &t.rows()))
        .transpose()?;

    Ok(EvalReport {
        instances: instances.len(),
        bags: bags.len(),
        na_class,
        positive_predictions: ranked.len(),
        total_positives,
        accuracy: (with_truth == instances.len() && with_truth > 0).then(|| correct as f64 / with_truth as f64),
        p_at_n: p_at,
        average_precision,
        transition_error,
        pr_curve: curve,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn list(flags: &[bool]) -> Vec<RankedPrediction> {
        flags
            .iter()
            .enumerate()
            .map(|(i, &correct)| RankedPrediction {
                bag_id: format!("b{i:03}"),
                class: 1,
                score: 1.0 - i as f64 / 1000.0,
                correct,
            })
            .collect()
    }

    #[test]
    fn p_at_n_examples() {
        let all = list(&[true; 5]);
        for n in 1..8 {
            assert_eq!(p_at_n(&all, n).unwrap(), 1.0);
        }
        assert_eq!(p_at_n(&list(&[true, false, true]), 3).unwrap(), 2.0 / 3.0);
        assert!(matches!(p_at_n(&[], 3), Err(Error::Metric(_))));
    }

    #[test]
    fn average_precision_examples() {
        assert_eq!(average_precision(&list(&[true]), 1).unwrap(), 1.0);
        assert_eq!(average_precision(&list(&[true, false, true]), 2).unwrap(), 5.0 / 6.0);
        assert!(matches!(average_precision(&list(&[true]), 0), Err(Error::Metric(_))));
    }

    #[test]
    fn pr_curve_examples() {
        let curve = pr_curve(&list(&[true; 4]), 6).unwrap();
        assert!(curve.iter().all(|p| p.precision == 1.0));
        assert_eq!(curve.last().unwrap().recall, 4.0 / 6.0);
        let table = pr_table(&curve);
        assert_eq!(table.lines().count(), 5);
        assert!(table.starts_with("rank\tscore\tprecision\trecall\n1\t"));
    }

    #[test]
    fn ties_break_by_bag_id() {
        let mk = |id: &str, score: f64| RankedPrediction {
            bag_id: id.into(),
            class: 2,
            score,
            correct: false,
        };
        let ranked = rank(vec![mk("c", 0.5), mk("a", 0.5), mk("b", 0.9)]).unwrap();
        let ids: Vec<&str> = ranked.iter().map(|p| p.bag_id.as_str()).collect();
        assert_eq!(ids, ["b", "a", "c"]);
        assert!(rank(vec![mk("x", f64::NAN)]).is_err());
    }

    #[test]
    fn transition_error_examples() {
        let a = vec![vec![0.0, 0.5], vec![0.5, 0.0]];
        assert_eq!(
            transition_error(&a, &a).unwrap(),
            TransitionError { max_abs: 0.0, mean_abs: 0.0 }
        );
        let b = vec![vec![0.0, 0.6], vec![0.4, 0.0]];
        let e = transition_error(&a, &b).unwrap();
        assert!((e.max_abs - 0.1).abs() < 1e-15 && (e.mean_abs - 0.1).abs() < 1e-15);
        assert!(matches!(transition_error(&a, &[vec![0.0]]), Err(Error::Shape(_))));
    }
}
