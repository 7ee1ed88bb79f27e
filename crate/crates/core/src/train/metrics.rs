use serde::Serialize;
use serde_json::{Map, Value};

use crate::data::{Label, Task};
use crate::error::{Error, Result};

/// Evaluation summary for one split.
///
/// Sentiment fills `acc2`, `acc7`, `f1` and `mae`; multilabel fills the
/// per-class arrays (neutral, happy, sad, angry order).
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub task: Task,
    pub n: usize,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub acc2: Option<f64>,
    /// Samples counted by `acc2` and `f1` (nonzero labels).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub acc2_n: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub acc7: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub f1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mae: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub class_acc: Option<[f64; 4]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub class_f1: Option<[f64; 4]>,
}

/// Support-weighted F1 over the two classes of a binary problem.
pub fn weighted_f1(pred: &[bool], truth: &[bool]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    let count = |p: bool, t: bool| pred.iter().zip(truth).filter(|&(&a, &b)| a == p && b == t).count() as f64;
    let (tp, fp, fn_, tn) = (count(true, true), count(true, false), count(false, true), count(false, false));
    let f1 = |tp: f64, fp: f64, fn_: f64| {
        let denom = 2.0 * tp + fp + fn_;
        if denom == 0.0 {
            0.0
        } else {
            2.0 * tp / denom
        }
    };
    let pos = tp + fn_;
    let neg = tn + fp;
    (pos * f1(tp, fp, fn_) + neg * f1(tn, fn_, fp)) / (pos + neg)
}

/// Seven-bin class of a score: `round(clip(x, -3, 3))`.
pub fn acc7_bin(x: f64) -> i32 {
    x.clamp(-3.0, 3.0).round() as i32
}

/// Metrics from raw model outputs. `losses` are per-sample loss values.
pub fn compute(task: Task, outputs: &[Vec<f64>], labels: &[Label], losses: &[f64]) -> Result<MetricsReport> {
    if outputs.is_empty() {
        return Err(Error::Contract("cannot evaluate an empty dataset".into()));
    }
    if outputs.len() != labels.len() || labels.len() != losses.len() {
        return Err(Error::Contract("outputs, labels and losses differ in length".into()));
    }
    let n = outputs.len();
    let mut report = MetricsReport {
        task,
        n,
        loss: losses.iter().sum::<f64>() / n as f64,
        acc2: None,
        acc2_n: None,
        acc7: None,
        f1: None,
        mae: None,
        class_acc: None,
        class_f1: None,
    };
    match task {
        Task::Sentiment => {
            let mut pairs = Vec::with_capacity(n);
            for (o, l) in outputs.iter().zip(labels) {
                match (o.as_slice(), l) {
                    ([p], Label::Sentiment(y)) => pairs.push((*p, *y)),
                    _ => return Err(Error::Contract("sentiment metrics need scalar outputs and labels".into())),
                }
            }
            let nonzero: Vec<(f64, f64)> = pairs.iter().copied().filter(|&(_, y)| y != 0.0).collect();
            let pred: Vec<bool> = nonzero.iter().map(|&(p, _)| p >= 0.0).collect();
            let truth: Vec<bool> = nonzero.iter().map(|&(_, y)| y > 0.0).collect();
            if !nonzero.is_empty() {
                let hits = pred.iter().zip(&truth).filter(|(a, b)| a == b).count();
                report.acc2 = Some(hits as f64 / nonzero.len() as f64);
                report.f1 = Some(weighted_f1(&pred, &truth));
            }
            report.acc2_n = Some(nonzero.len());
            let hits7 = pairs.iter().filter(|&&(p, y)| acc7_bin(p) == acc7_bin(y)).count();
            report.acc7 = Some(hits7 as f64 / n as f64);
            report.mae = Some(pairs.iter().map(|(p, y)| (p - y).abs()).sum::<f64>() / n as f64);
        }
        Task::Multilabel4 => {
            let mut acc = [0.0; 4];
            let mut f1 = [0.0; 4];
            for k in 0..4 {
                let mut pred = Vec::with_capacity(n);
                let mut truth = Vec::with_capacity(n);
                for (o, l) in outputs.iter().zip(labels) {
                    match (o.len(), l) {
                        (4, Label::Multilabel(flags)) => {
                            // sigmoid(x) ≥ 0.5 exactly when x ≥ 0
                            pred.push(o[k] >= 0.0);
                            truth.push(flags[k]);
                        }
                        _ => return Err(Error::Contract("multilabel metrics need 4 outputs and flag labels".into())),
                    }
                }
                acc[k] = pred.iter().zip(&truth).filter(|(a, b)| a == b).count() as f64 / n as f64;
                f1[k] = weighted_f1(&pred, &truth);
            }
            report.class_acc = Some(acc);
            report.class_f1 = Some(f1);
        }
    }
    Ok(report)
}

impl MetricsReport {
    /// Binary accuracy: `acc2` for sentiment, mean per-class accuracy otherwise.
    pub fn headline_acc(&self) -> f64 {
        match (self.acc2, self.class_acc) {
            (Some(a), _) => a,
            (None, Some(c)) => c.iter().sum::<f64>() / 4.0,
            (None, None) => 0.0,
        }
    }

    pub fn headline_f1(&self) -> f64 {
        match (self.f1, self.class_f1) {
            (Some(f), _) => f,
            (None, Some(c)) => c.iter().sum::<f64>() / 4.0,
            (None, None) => 0.0,
        }
    }

    pub fn to_json(&self) -> Map<String, Value> {
        match serde_json::to_value(self) {
            Ok(Value::Object(m)) => m,
            _ => unreachable!("report serializes to an object"),
        }
    }

    /// One `name value` pair per line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.to_json() {
            out.push_str(&format!("{k} {v}\n"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sent(ys: &[f64]) -> Vec<Label> {
        ys.iter().map(|&y| Label::Sentiment(y)).collect()
    }

    #[test]
    fn perfect_predictor() {
        let ys = [-2.6, -1.0, 0.0, 0.4, 2.9];
        let out: Vec<Vec<f64>> = ys.iter().map(|&y| vec![y]).collect();
        let r = compute(Task::Sentiment, &out, &sent(&ys), &[0.0; 5]).unwrap();
        assert_eq!((r.acc2, r.acc7, r.f1, r.mae), (Some(1.0), Some(1.0), Some(1.0), Some(0.0)));
        assert_eq!(r.acc2_n, Some(4));
        let flags = [true, false, true, true];
        let r = compute(Task::Multilabel4, &[vec![5.0, -5.0, 5.0, 5.0]], &[Label::Multilabel(flags)], &[0.0]).unwrap();
        assert_eq!(r.class_acc, Some([1.0; 4]));
    }

    #[test]
    fn constant_zero_prediction_hand_count() {
        // labels: three positives, three negatives, two zeros (excluded)
        let ys = [1.0, 2.0, 0.5, -1.0, -0.5, -3.0, 0.0, 0.0];
        let out = vec![vec![0.0]; ys.len()];
        let r = compute(Task::Sentiment, &out, &sent(&ys), &[0.0; 8]).unwrap();
        // prediction 0 counts as non-negative: right on the 3 positives only
        assert_eq!(r.acc2_n, Some(6));
        assert_eq!(r.acc2, Some(0.5));
        // weighted F1: positive class F1 = 2·3/(2·3+3) = 2/3, negative F1 = 0
        assert!((r.f1.unwrap() - (3.0 * (2.0 / 3.0) + 3.0 * 0.0) / 6.0).abs() < 1e-15);
        // acc7 bins of labels: 1, 2, 1 (0.5 rounds away), -1, -1, -3, 0, 0 → two zeros hit
        assert_eq!(r.acc7, Some(2.0 / 8.0));
    }

    #[test]
    fn all_positive_f1_closed_form() {
        // 5 positives, 3 negatives, predictor says positive everywhere
        let truth = [true, true, false, true, false, true, true, false];
        let pred = [true; 8];
        let (tp, fp) = (5.0, 3.0);
        let precision = tp / (tp + fp);
        let recall = 1.0;
        let f1_pos = 2.0 * precision * recall / (precision + recall);
        let expect = (5.0 * f1_pos + 3.0 * 0.0) / 8.0;
        assert!((weighted_f1(&pred, &truth) - expect).abs() < 1e-15);
    }

    #[test]
    fn acc7_bins_partition_range() {
        let mut x = -3.0;
        while x <= 3.0 {
            let b = acc7_bin(x);
            assert!((-3..=3).contains(&b));
            assert_eq!((-3..=3).filter(|&k| k == b).count(), 1);
            x += 0.01;
        }
        assert_eq!(acc7_bin(10.0), 3);
        assert_eq!(acc7_bin(-7.5), -3);
    }

    #[test]
    fn empty_is_contract_error() {
        assert!(matches!(compute(Task::Sentiment, &[], &[], &[]), Err(Error::Contract(_))));
    }
}
