//! Region-based Dice scoring of label maps.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::region::{validate_regions, RegionSpec};
use crate::volume::{LabelMap, Mask};

/// Score given when both prediction and ground truth are empty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EmptyPolicy {
    /// No score; the case is counted as undefined and left out of the mean.
    #[default]
    Undefined,
    /// Score 1.0, as true negatives are scored in the public challenge.
    One,
}

impl EmptyPolicy {
    fn score(self, overlap: u64, pred: u64, gt: u64) -> Option<f64> {
        if pred + gt == 0 {
            return match self {
                EmptyPolicy::Undefined => None,
                EmptyPolicy::One => Some(1.0),
            };
        }
        Some(2.0 * overlap as f64 / (pred + gt) as f64)
    }
}

/// `2|P ∩ G| / (|P| + |G|)`, or `None` when both masks are empty.
pub fn dice(pred: &Mask, gt: &Mask) -> Result<Option<f64>> {
    pred.geometry().ensure_same(gt.geometry(), "dice")?;
    let (mut p, mut g, mut both) = (0u64, 0u64, 0u64);
    for (&a, &b) in pred.data().iter().zip(gt.data()) {
        p += a as u64;
        g += b as u64;
        both += (a && b) as u64;
    }
    Ok(EmptyPolicy::Undefined.score(both, p, g))
}

pub type CaseScores = BTreeMap<String, Option<f64>>;

/// Scores every region from a single pass of (pred, gt) label-pair counts.
pub fn evaluate_case(
    pred: &LabelMap,
    gt: &LabelMap,
    regions: &[RegionSpec],
    policy: EmptyPolicy,
) -> Result<CaseScores> {
    validate_regions(regions)?;
    pred.geometry().ensure_same(gt.geometry(), "evaluation")?;
    for r in regions {
        if let Some(&label) = r.labels.iter().find(|&&l| !gt.vocabulary().contains(l)) {
            return Err(Error::UnknownLabel { label });
        }
    }
    let mut confusion: BTreeMap<(u16, u16), u64> = BTreeMap::new();
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        *confusion.entry((p, g)).or_insert(0) += 1;
    }
    Ok(regions
        .iter()
        .map(|r| {
            let (mut np, mut ng, mut both) = (0, 0, 0);
            for (&(p, g), &n) in &confusion {
                let (ip, ig) = (r.contains(p), r.contains(g));
                np += if ip { n } else { 0 };
                ng += if ig { n } else { 0 };
                both += if ip && ig { n } else { 0 };
            }
            (r.name.clone(), policy.score(both, np, ng))
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub cases: BTreeMap<String, CaseScores>,
    /// Mean over defined scores; `None` when no case is defined.
    pub aggregate: BTreeMap<String, Option<f64>>,
    pub undefined_counts: BTreeMap<String, usize>,
}

impl EvalReport {
    /// Aggregates per-case scores, summing in case-ID order.
    pub fn from_cases(cases: BTreeMap<String, CaseScores>, regions: &[RegionSpec]) -> Self {
        let mut aggregate = BTreeMap::new();
        let mut undefined_counts = BTreeMap::new();
        for r in regions {
            let (mut sum, mut n, mut undefined) = (0.0, 0usize, 0usize);
            for scores in cases.values() {
                match scores.get(&r.name).copied().flatten() {
                    Some(s) => {
                        sum += s;
                        n += 1;
                    }
                    None => undefined += 1,
                }
            }
            aggregate.insert(r.name.clone(), (n > 0).then(|| sum / n as f64));
            undefined_counts.insert(r.name.clone(), undefined);
        }
        Self {
            cases,
            aggregate,
            undefined_counts,
        }
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// One `case,region,dice` row per score; undefined scores are empty.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(file);
        w.write_record(["case", "region", "dice"])?;
        for (case, scores) in &self.cases {
            for (region, score) in scores {
                let s = score.map(|s| s.to_string()).unwrap_or_default();
                w.write_record([case.as_str(), region.as_str(), s.as_str()])?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EvalCase<'a> {
    pub id: &'a str,
    pub pred: &'a LabelMap,
    pub gt: &'a LabelMap,
}

/// Evaluates cases in parallel; duplicate case IDs are rejected.
pub fn evaluate_dataset(cases: &[EvalCase<'_>], regions: &[RegionSpec], policy: EmptyPolicy) -> Result<EvalReport> {
    let mut ids = BTreeSet::new();
    if let Some(dup) = cases.iter().find(|c| !ids.insert(c.id)) {
        return Err(Error::InvalidArgument(format!("duplicate case ID `{}`", dup.id)));
    }
    let scored: Vec<(String, CaseScores)> = cases
        .par_iter()
        .map(|c| {
            evaluate_case(c.pred, c.gt, regions, policy)
                .map(|s| (c.id.to_string(), s))
                .map_err(|e| e.in_stage("evaluate", c.id))
        })
        .collect::<Result<_>>()?;
    Ok(EvalReport::from_cases(scored.into_iter().collect(), regions))
}
