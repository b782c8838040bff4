//! Per-utterance equal error rate and test-set reports broken down by the
//! number of speakers in each utterance.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{Scenario, UtteranceExample};
use crate::error::{Error, Result};
use crate::models::Model;
use crate::par::{self, Execution};
use crate::training::LabelVector;

/// One operating point of the detection curve. A label is predicted
/// positive when its score is at least `threshold`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub fnr: f64,
}

/// Operating points in increasing threshold order: one below every score,
/// one at each distinct score, one above every score.
pub fn roc_points(scores: &[f64], labels: &[f64]) -> Result<Vec<RocPoint>> {
    let (pos, neg) = check_labels(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    let mut points = Vec::with_capacity(scores.len() + 2);
    points.push(RocPoint {
        threshold: f64::NEG_INFINITY,
        fpr: 1.0,
        fnr: 0.0,
    });
    // Items strictly below the current threshold.
    let (mut pos_below, mut neg_below) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]];
        points.push(RocPoint {
            threshold: t,
            fpr: (neg - neg_below) as f64 / neg as f64,
            fnr: pos_below as f64 / pos as f64,
        });
        while i < order.len() && scores[order[i]] == t {
            if labels[order[i]] == 1.0 {
                pos_below += 1;
            } else {
                neg_below += 1;
            }
            i += 1;
        }
    }
    points.push(RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        fnr: 1.0,
    });
    Ok(points)
}

fn check_labels(scores: &[f64], labels: &[f64]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::shape("eer", format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if labels.iter().any(|&y| y != 0.0 && y != 1.0) {
        return Err(Error::Domain {
            op: "eer",
            detail: "labels must be 0 or 1".into(),
        });
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Domain {
            op: "eer",
            detail: "NaN score".into(),
        });
    }
    let pos = labels.iter().filter(|&&y| y == 1.0).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Domain {
            op: "eer",
            detail: "needs at least one positive and one negative label".into(),
        });
    }
    Ok((pos, neg))
}

/// Which side of the crossing the interpolated value is read from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CrossingSide {
    FalsePositive,
    FalseNegative,
}

/// Equal error rate at the first point where FPR drops to FNR, linearly
/// interpolated between the two bracketing operating points.
pub fn utterance_eer(scores: &[f64], labels: &[f64]) -> Result<f64> {
    eer_from_side(scores, labels, CrossingSide::FalsePositive)
}

pub fn eer_from_side(scores: &[f64], labels: &[f64], side: CrossingSide) -> Result<f64> {
    let points = roc_points(scores, labels)?;
    Ok(crossing(&points, side))
}

pub(crate) fn crossing(points: &[RocPoint], side: CrossingSide) -> f64 {
    let read = |p: &RocPoint| match side {
        CrossingSide::FalsePositive => p.fpr,
        CrossingSide::FalseNegative => p.fnr,
    };
    let mut prev = &points[0];
    for p in points {
        let d = p.fpr - p.fnr;
        if d == 0.0 {
            return read(p);
        }
        if d < 0.0 {
            let d_prev = prev.fpr - prev.fnr;
            let lambda = d_prev / (d_prev - d);
            return read(prev) + lambda * (read(p) - read(prev));
        }
        prev = p;
    }
    read(points.last().expect("non-empty"))
}

/// Test condition by number of speakers; `Multiple` covers every utterance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    One,
    Two,
    Three,
    Multiple,
}

impl Condition {
    pub const ALL: [Condition; 4] = [Condition::One, Condition::Two, Condition::Three, Condition::Multiple];

    pub fn as_str(self) -> &'static str {
        match self {
            Condition::One => "one",
            Condition::Two => "two",
            Condition::Three => "three",
            Condition::Multiple => "multiple",
        }
    }

    pub fn contains(self, speakers: usize) -> bool {
        match self {
            Condition::One => speakers == 1,
            Condition::Two => speakers == 2,
            Condition::Three => speakers == 3,
            Condition::Multiple => true,
        }
    }
}

impl std::str::FromStr for Condition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Condition::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown condition {s:?} (one, two, three, multiple)")))
    }
}

/// Anything that maps an utterance to K speaker scores.
pub trait Scorer: Sync {
    fn score(&self, example: &UtteranceExample) -> Result<Vec<f64>>;
}

impl Scorer for Model {
    fn score(&self, example: &UtteranceExample) -> Result<Vec<f64>> {
        Ok(self.predict(&example.features)?.into_vec())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtteranceResult {
    pub id: String,
    pub speakers: usize,
    pub eer: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionSummary {
    /// `None` when no utterance falls in the condition.
    pub mean_eer: Option<f64>,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub dataset: String,
    pub scenario: Scenario,
    pub mean_eer: f64,
    pub conditions: BTreeMap<Condition, ConditionSummary>,
    pub per_utterance: Vec<UtteranceResult>,
}

impl EvalReport {
    pub fn condition(&self, c: Condition) -> ConditionSummary {
        self.conditions.get(&c).copied().unwrap_or(ConditionSummary {
            mean_eer: None,
            count: 0,
        })
    }

    pub const CSV_HEADER: &'static str = "model,dataset,scenario,condition,count,mean_eer";

    /// One CSV row per condition, without the header.
    pub fn csv_rows(&self) -> String {
        let mut out = String::new();
        for (c, s) in &self.conditions {
            let eer = s.mean_eer.map(|v| v.to_string()).unwrap_or_default();
            writeln!(
                out,
                "{},{},{},{},{},{}",
                self.model,
                self.dataset,
                self.scenario,
                c.as_str(),
                s.count,
                eer
            )
            .expect("write to String");
        }
        out
    }
}

/// Score every utterance (optionally only those in `filter`) and aggregate
/// per-utterance EERs overall and per condition.
pub fn evaluate<S: Scorer + ?Sized>(
    scorer: &S,
    examples: &[UtteranceExample],
    num_speakers: usize,
    filter: Option<Condition>,
    names: (&str, &str),
    exec: Execution,
) -> Result<EvalReport> {
    let selected: Vec<&UtteranceExample> = examples
        .iter()
        .filter(|ex| filter.is_none_or(|c| c.contains(ex.speakers.len())))
        .collect();
    if selected.is_empty() {
        return Err(Error::Data("no test utterances match the condition".into()));
    }
    let per_utterance: Vec<UtteranceResult> = par::map(exec, &selected, |ex| {
        let labels = LabelVector::from_speakers(&ex.speakers, num_speakers)?;
        let scores = scorer.score(ex)?;
        Ok(UtteranceResult {
            id: ex.id.clone(),
            speakers: ex.speakers.len(),
            eer: utterance_eer(&scores, labels.as_slice())?,
        })
    })
    .into_iter()
    .collect::<Result<_>>()?;

    let mut conditions = BTreeMap::new();
    for c in Condition::ALL {
        let eers: Vec<f64> = per_utterance
            .iter()
            .filter(|r| c.contains(r.speakers))
            .map(|r| r.eer)
            .collect();
        if filter.is_some_and(|f| f != c && c != Condition::Multiple) && eers.is_empty() {
            continue;
        }
        conditions.insert(
            c,
            ConditionSummary {
                mean_eer: mean(&eers),
                count: eers.len(),
            },
        );
    }
    let all: Vec<f64> = per_utterance.iter().map(|r| r.eer).collect();
    Ok(EvalReport {
        model: names.0.to_string(),
        dataset: names.1.to_string(),
        scenario: selected[0].scenario,
        mean_eer: mean(&all).expect("non-empty"),
        conditions,
        per_utterance,
    })
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}
