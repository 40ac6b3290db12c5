use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn normalize(s: &str) -> String {
    s.trim().to_lowercase()
}

/// Fraction of pairs equal after trimming and lowercasing. Empty input
/// scores 0.
pub fn exact_match_accuracy<P, R>(predictions: &[P], references: &[R]) -> Result<f64>
where
    P: AsRef<str>,
    R: AsRef<str>,
{
    if predictions.len() != references.len() {
        return Err(Error::Contract(format!(
            "{} predictions vs {} references",
            predictions.len(),
            references.len()
        )));
    }
    if predictions.is_empty() {
        return Ok(0.0);
    }
    let hits = predictions
        .iter()
        .zip(references)
        .filter(|(p, r)| normalize(p.as_ref()) == normalize(r.as_ref()))
        .count();
    Ok(hits as f64 / predictions.len() as f64)
}

/// Reads `yes`/`no` (or `y`/`n`), case-insensitively. Anything else is a
/// parse error.
pub fn parse_yes_no(label: &str) -> Result<bool> {
    match normalize(label).as_str() {
        "yes" | "y" => Ok(true),
        "no" | "n" => Ok(false),
        other => Err(Error::Parse(format!("`{other}` is not a yes/no label"))),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Precision, recall and F1 with "yes" as the positive class. Zero
/// denominators give 0.
pub fn binary_prf<P, R>(predictions: &[P], references: &[R]) -> Result<Prf>
where
    P: AsRef<str>,
    R: AsRef<str>,
{
    if predictions.len() != references.len() {
        return Err(Error::Contract(format!(
            "{} predictions vs {} references",
            predictions.len(),
            references.len()
        )));
    }
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (p, r) in predictions.iter().zip(references) {
        match (parse_yes_no(p.as_ref())?, parse_yes_no(r.as_ref())?) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    let ratio = |a: usize, b: usize| if a + b == 0 { 0.0 } else { a as f64 / (a + b) as f64 };
    let precision = ratio(tp, fp);
    let recall = ratio(tp, fn_);
    Ok(Prf {
        precision,
        recall,
        f1: f1_score(precision, recall),
    })
}

/// Mean F1 over the random, popular and adversarial subsets.
pub fn pope_aggregate(random: f64, popular: f64, adversarial: f64) -> f64 {
    (random + popular + adversarial) / 3.0
}
