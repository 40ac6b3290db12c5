use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::metrics::{binary_prf, exact_match_accuracy, parse_yes_no, pope_aggregate, Prf};
use super::tasks::{Placement, PopeSubset, SyntheticSample, TaskKind};
use crate::error::{Error, Result};
use crate::image::{read_png, write_png};
use crate::par;
use crate::pipeline::Pipeline;
use crate::seed::rng_for;
use crate::tensor::Scalar;

/// Anything that answers a question about an image.
pub trait VqaModel: Sync {
    fn name(&self) -> String;
    fn answer(&self, sample: &SyntheticSample, max_new: usize) -> Result<Vec<u8>>;
}

/// Reads the answer off the placement metadata.
pub struct OracleModel;

impl VqaModel for OracleModel {
    fn name(&self) -> String {
        "oracle".into()
    }

    fn answer(&self, sample: &SyntheticSample, _max_new: usize) -> Result<Vec<u8>> {
        Ok(sample.placement.answer())
    }
}

/// Picks uniformly among fixed choices, seeded per sample.
pub struct RandomModel {
    pub seed: u64,
    pub choices: Vec<Vec<u8>>,
}

impl RandomModel {
    pub fn for_task(kind: TaskKind, n_glyphs: usize, seed: u64) -> Self {
        let choices = match kind {
            TaskKind::Detail => (0..n_glyphs).map(|g| vec![b'0' + g as u8]).collect(),
            TaskKind::Coherence | TaskKind::Pope => vec![b"y".to_vec(), b"n".to_vec()],
        };
        Self { seed, choices }
    }
}

impl VqaModel for RandomModel {
    fn name(&self) -> String {
        "random".into()
    }

    fn answer(&self, sample: &SyntheticSample, _max_new: usize) -> Result<Vec<u8>> {
        let mut rng = rng_for(self.seed, &format!("random-model/{}", sample.index));
        Ok(self.choices[rng.random_range(0..self.choices.len())].clone())
    }
}

impl<T: Scalar> VqaModel for Pipeline<T> {
    fn name(&self) -> String {
        format!("pipeline {}", self.config.grid.label())
    }

    fn answer(&self, sample: &SyntheticSample, max_new: usize) -> Result<Vec<u8>> {
        self.generate(&sample.image, &sample.question, max_new)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    ExactMatch,
    /// Exact match plus precision/recall/F1 with "yes" positive.
    YesNo,
}

impl Metric {
    pub fn for_task(kind: TaskKind) -> Self {
        match kind {
            TaskKind::Detail => Metric::ExactMatch,
            TaskKind::Coherence | TaskKind::Pope => Metric::YesNo,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub n_samples: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub task: TaskKind,
    pub model: String,
    pub n_samples: usize,
    pub accuracy: f64,
    pub prf: Option<Prf>,
    /// Per-subset scores for presence probing.
    pub subsets: BTreeMap<String, Prf>,
    pub aggregate_f1: Option<f64>,
    pub per_seed: Vec<SeedResult>,
}

impl EvalResult {
    pub fn median_seed_accuracy(&self) -> f64 {
        median(self.per_seed.iter().map(|s| s.accuracy).collect())
    }
}

pub fn median(mut xs: Vec<f64>) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.sort_by(|a, b| a.total_cmp(b));
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn lossy(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

/// Yes/no predictions that do not parse count as wrong.
fn coerce_yes_no(pred: &str, reference: &str) -> Result<String> {
    Ok(match parse_yes_no(pred) {
        Ok(_) => pred.to_string(),
        Err(_) => {
            if parse_yes_no(reference)? {
                "no".into()
            } else {
                "yes".into()
            }
        }
    })
}

/// Greedy-decodes every sample (in parallel; results are kept in sample
/// order) and scores the answers.
pub fn evaluate_model(model: &dyn VqaModel, samples: &[SyntheticSample], metric: Metric, seed: u64) -> Result<EvalResult> {
    let task = samples
        .first()
        .map(|s| s.task)
        .ok_or_else(|| Error::invalid("no samples to evaluate"))?;
    if let Some(s) = samples.iter().find(|s| s.task != task) {
        return Err(Error::Contract(format!(
            "mixed tasks: {} and {}",
            task, s.task
        )));
    }
    let answers: Vec<Result<Vec<u8>>> = par::map_slice(samples, |s| model.answer(s, s.answer.len()));
    let mut preds = Vec::with_capacity(samples.len());
    for a in answers {
        preds.push(lossy(&a?));
    }
    let refs: Vec<String> = samples.iter().map(|s| lossy(&s.answer)).collect();
    let accuracy = exact_match_accuracy(&preds, &refs)?;
    let (prf, subsets, aggregate_f1) = match metric {
        Metric::ExactMatch => (None, BTreeMap::new(), None),
        Metric::YesNo => {
            let coerced: Vec<String> = preds
                .iter()
                .zip(&refs)
                .map(|(p, r)| coerce_yes_no(p, r))
                .collect::<Result<_>>()?;
            let prf = binary_prf(&coerced, &refs)?;
            let mut subsets = BTreeMap::new();
            if task == TaskKind::Pope {
                for subset in PopeSubset::ALL {
                    let idx: Vec<usize> = samples
                        .iter()
                        .enumerate()
                        .filter(|(_, s)| matches!(&s.placement, Placement::Pope { subset: q, .. } if *q == subset))
                        .map(|(i, _)| i)
                        .collect();
                    if !idx.is_empty() {
                        let p: Vec<&String> = idx.iter().map(|i| &coerced[*i]).collect();
                        let r: Vec<&String> = idx.iter().map(|i| &refs[*i]).collect();
                        subsets.insert(format!("{subset:?}").to_lowercase(), binary_prf(&p, &r)?);
                    }
                }
            }
            let aggregate = (subsets.len() == 3).then(|| {
                let f = |k: &str| subsets[k].f1;
                pope_aggregate(f("random"), f("popular"), f("adversarial"))
            });
            (Some(prf), subsets, aggregate.or(Some(prf.f1)))
        }
    };
    Ok(EvalResult {
        task,
        model: model.name(),
        n_samples: samples.len(),
        accuracy,
        prf,
        subsets,
        aggregate_f1,
        per_seed: vec![SeedResult {
            seed,
            n_samples: samples.len(),
            accuracy,
        }],
    })
}

/// Pools results from several seeds; accuracy is sample-weighted and every
/// seed is kept in `per_seed`.
pub fn combine_seeds(results: &[EvalResult]) -> Result<EvalResult> {
    let first = results.first().ok_or_else(|| Error::invalid("no results to combine"))?;
    let n: usize = results.iter().map(|r| r.n_samples).sum();
    let accuracy = results.iter().map(|r| r.accuracy * r.n_samples as f64).sum::<f64>() / n as f64;
    let mean = |f: &dyn Fn(&EvalResult) -> Option<f64>| -> Option<f64> {
        let v: Option<Vec<f64>> = results.iter().map(f).collect();
        v.map(|v| v.iter().sum::<f64>() / v.len() as f64)
    };
    let prf = match (
        mean(&|r| r.prf.map(|p| p.precision)),
        mean(&|r| r.prf.map(|p| p.recall)),
        mean(&|r| r.prf.map(|p| p.f1)),
    ) {
        (Some(precision), Some(recall), Some(f1)) => Some(Prf { precision, recall, f1 }),
        _ => None,
    };
    Ok(EvalResult {
        task: first.task,
        model: first.model.clone(),
        n_samples: n,
        accuracy,
        prf,
        subsets: BTreeMap::new(),
        aggregate_f1: mean(&|r| r.aggregate_f1),
        per_seed: results.iter().flat_map(|r| r.per_seed.clone()).collect(),
    })
}

/// One row per configuration: accuracy, median over seeds and F1 when
/// available.
pub fn comparison_table(rows: &[(String, EvalResult)]) -> String {
    let mut out = format!(
        "{:<10} {:>9} {:>10} {:>10} {:>8}\n",
        "config", "samples", "accuracy", "median", "f1"
    );
    for (label, r) in rows {
        let f1 = r
            .aggregate_f1
            .map_or_else(|| "-".to_string(), |f| format!("{f:.4}"));
        let _ = writeln!(
            out,
            "{:<10} {:>9} {:>10.4} {:>10.4} {:>8}",
            label,
            r.n_samples,
            r.accuracy,
            r.median_seed_accuracy(),
            f1
        );
    }
    out
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct IndexEntry {
    index: usize,
    file: String,
    task: TaskKind,
    question: String,
    answer: String,
    placement: Placement,
}

pub const INDEX_FILE: &str = "index.jsonl";

/// Writes `<index>.png` per sample plus `index.jsonl`.
pub fn write_samples(dir: &Path, samples: &[SyntheticSample]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let index_path = dir.join(INDEX_FILE);
    let mut index = fs::File::create(&index_path).map_err(|e| Error::io(&index_path, e))?;
    for s in samples {
        let file = format!("{:06}.png", s.index);
        write_png(&s.image, &dir.join(&file))?;
        let entry = IndexEntry {
            index: s.index,
            file,
            task: s.task,
            question: lossy(&s.question),
            answer: lossy(&s.answer),
            placement: s.placement.clone(),
        };
        writeln!(index, "{}", serde_json::to_string(&entry)?).map_err(|e| Error::io(&index_path, e))?;
    }
    Ok(())
}

/// Reads a directory written by [`write_samples`]. Pixels come back
/// quantised to 8 bits.
pub fn read_samples(dir: &Path) -> Result<Vec<SyntheticSample>> {
    let index_path = dir.join(INDEX_FILE);
    let f = fs::File::open(&index_path).map_err(|e| Error::io(&index_path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(&index_path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let e: IndexEntry = serde_json::from_str(&line)?;
        out.push(SyntheticSample {
            index: e.index,
            image: read_png(&dir.join(&e.file))?,
            question: e.question.into_bytes(),
            answer: e.answer.into_bytes(),
            task: e.task,
            placement: e.placement,
        });
    }
    Ok(out)
}
