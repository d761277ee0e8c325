//! Answer scoring: length-aligned overlap accuracy, BLEU-1 and ROUGE-L.
//!
//! All metrics compare word tokens after [`normalize`].

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Lowercases, strips punctuation and splits on whitespace.
pub fn normalize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() || c.is_whitespace() || c == '_' { c } else { ' ' })
        .collect::<String>()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

/// Fraction of ground-truth positions where the prediction carries the same
/// token. The prediction is truncated to the ground-truth length; missing
/// positions count as mismatches.
pub fn overlap_accuracy<S: AsRef<str>>(pred: &[S], gt: &[S]) -> Result<f64> {
    if gt.is_empty() {
        return Err(Error::Metric("empty ground truth".into()));
    }
    let hits = gt
        .iter()
        .enumerate()
        .filter(|(i, g)| pred.get(*i).is_some_and(|p| p.as_ref() == g.as_ref()))
        .count();
    Ok(hits as f64 / gt.len() as f64)
}

/// Clipped unigram precision times the brevity penalty.
pub fn bleu1<S: AsRef<str>>(pred: &[S], gt: &[S]) -> f64 {
    if pred.is_empty() || gt.is_empty() {
        return 0.0;
    }
    let mut reference: HashMap<&str, usize> = HashMap::new();
    for g in gt {
        *reference.entry(g.as_ref()).or_default() += 1;
    }
    let mut clipped = 0usize;
    for p in pred {
        if let Some(left) = reference.get_mut(p.as_ref()) {
            if *left > 0 {
                *left -= 1;
                clipped += 1;
            }
        }
    }
    let (c, r) = (pred.len() as f64, gt.len() as f64);
    let bp = if c < r { (1.0 - r / c).exp() } else { 1.0 };
    bp * clipped as f64 / c
}

/// Longest common subsequence length by dynamic programming.
pub fn lcs_len<S: AsRef<str>>(a: &[S], b: &[S]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x.as_ref() == y.as_ref() {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F1 (beta = 1).
pub fn rouge_l_f1<S: AsRef<str>>(pred: &[S], gt: &[S]) -> f64 {
    let lcs = lcs_len(pred, gt) as f64;
    if lcs == 0.0 {
        return 0.0;
    }
    let p = lcs / pred.len() as f64;
    let r = lcs / gt.len() as f64;
    2.0 * p * r / (p + r)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemScore {
    pub prediction: String,
    pub reference: String,
    pub overlap_accuracy: f64,
    pub bleu1: f64,
    #[serde(rename = "rougeL_f1")]
    pub rouge_l_f1: f64,
}

impl ItemScore {
    pub fn score(prediction: &str, reference: &str) -> Result<Self> {
        let (p, g) = (normalize(prediction), normalize(reference));
        Ok(Self {
            prediction: prediction.to_string(),
            reference: reference.to_string(),
            overlap_accuracy: overlap_accuracy(&p, &g)?,
            bleu1: bleu1(&p, &g),
            rouge_l_f1: rouge_l_f1(&p, &g),
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Population standard deviation; zeros for an empty sample.
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self::default();
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub overlap_accuracy: MeanStd,
    pub bleu1: MeanStd,
    #[serde(rename = "rougeL_f1")]
    pub rouge_l_f1: MeanStd,
    /// BERTScore needs an external pretrained model and is not computed.
    pub bertscore: Option<f64>,
    pub items: Vec<ItemScore>,
}

impl MetricReport {
    pub fn from_items(items: Vec<ItemScore>) -> Self {
        let col = |f: fn(&ItemScore) -> f64| MeanStd::of(&items.iter().map(f).collect::<Vec<_>>());
        Self {
            overlap_accuracy: col(|i| i.overlap_accuracy),
            bleu1: col(|i| i.bleu1),
            rouge_l_f1: col(|i| i.rouge_l_f1),
            bertscore: None,
            items,
        }
    }

    pub fn score_all<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let items = pairs
            .into_iter()
            .map(|(p, g)| ItemScore::score(p, g))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_items(items))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        normalize(s)
    }

    #[test]
    fn worked_examples() {
        assert_eq!(overlap_accuracy(&toks("yes"), &toks("yes")).unwrap(), 1.0);
        assert_eq!(overlap_accuracy(&toks("yes but noisy"), &toks("yes")).unwrap(), 1.0);
        assert_eq!(overlap_accuracy(&toks("no"), &toks("yes")).unwrap(), 0.0);
        assert!(overlap_accuracy(&toks("yes"), &[] as &[String]).is_err());

        assert_eq!(bleu1(&toks("baseline drift"), &toks("baseline drift")), 1.0);
        assert_eq!(bleu1(&toks("no"), &toks("yes")), 0.0);
        assert_eq!(bleu1(&toks("yes yes"), &toks("yes")), 0.5);

        assert_eq!(rouge_l_f1(&toks("none"), &toks("none")), 1.0);
        assert_eq!(rouge_l_f1(&toks("a b"), &toks("c d")), 0.0);
        let f = rouge_l_f1(&toks("baseline drift present"), &toks("baseline drift"));
        assert!((f - 0.8).abs() < 1e-12);
    }

    #[test]
    fn brevity_penalty_applies_to_short_predictions() {
        let s = bleu1(&toks("left"), &toks("left axis deviation"));
        assert!((s - (1.0f64 - 3.0).exp()).abs() < 1e-12);
    }

    #[test]
    fn normalisation_strips_case_and_punctuation() {
        assert_eq!(toks("Yes, Both!"), vec!["yes", "both"]);
    }

    #[test]
    fn report_aggregates() {
        let r = MetricReport::score_all([("yes", "yes"), ("no", "yes")]).unwrap();
        assert_eq!(r.items.len(), 2);
        assert_eq!(r.overlap_accuracy, MeanStd { mean: 0.5, std: 0.5 });
        assert!(r.bertscore.is_none());
    }
}
