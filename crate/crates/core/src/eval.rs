//! IoU, precision@1 reports and training curves.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{RefSample, Split};
use crate::geometry::BBox;
use crate::prompt::PromptRecord;
use crate::selection::{oracle_index, SelectionMethod, SelectionResult};

/// A selection counts as correct when IoU with ground truth is at least this.
pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no selections to evaluate")]
    Empty,
    #[error("{} selection(s) reference unknown samples: {}", .0.len(), .0.join(", "))]
    UnknownSamples(Vec<String>),
    #[error("sample `{0}` is selected more than once")]
    DuplicateSelection(String),
    #[error("iou threshold {0} is outside [0, 1]")]
    BadThreshold(f64),
    #[error("seen_samples {0} appears more than once in the curve")]
    DuplicateSeen(u64),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// Intersection over union of two boxes, in `[0, 1]`.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub run_id: String,
    /// `None` when the selections span several splits.
    pub split: Option<Split>,
    pub n_samples: usize,
    pub n_correct: usize,
    pub p_at_1: f64,
    pub iou_threshold: f64,
    /// Selection count per method; sums to `n_samples`.
    pub method_breakdown: BTreeMap<SelectionMethod, usize>,
    /// Fallback selections that chose nothing. Included in the `llm_fallback`
    /// count and scored as incorrect.
    pub abstentions: usize,
    pub fallback_rate: f64,
    /// P@1 of the best-IoU candidate on the same candidate sets.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle_upper_bound: Option<f64>,
}

impl EvalReport {
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let split = self.split.map_or("mixed".to_string(), |s| s.to_string());
        let _ = writeln!(out, "run        {}", self.run_id);
        let _ = writeln!(out, "split      {split}");
        let _ = writeln!(out, "samples    {}", self.n_samples);
        let _ = writeln!(
            out,
            "P@1        {:.2}  ({} correct, IoU >= {})",
            100.0 * self.p_at_1,
            self.n_correct,
            self.iou_threshold
        );
        if let Some(o) = self.oracle_upper_bound {
            let _ = writeln!(out, "oracle     {:.2}", 100.0 * o);
        }
        let _ = writeln!(out, "fallbacks  {:.2}%", 100.0 * self.fallback_rate);
        let _ = writeln!(out, "abstained  {}", self.abstentions);
        for (method, count) in &self.method_breakdown {
            let _ = writeln!(out, "  {:<20} {count}", method.as_str());
        }
        out
    }
}

fn check_threshold(t: f64) -> Result<(), EvalError> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(EvalError::BadThreshold(t))
    }
}

fn resolve<'a, 'b>(
    ids: impl Iterator<Item = &'b str>,
    samples: &BTreeMap<&str, &'a RefSample>,
) -> Result<Vec<&'a RefSample>, EvalError> {
    let mut found = Vec::new();
    let mut missing = Vec::new();
    let mut seen = BTreeSet::new();
    for id in ids {
        if !seen.insert(id) {
            return Err(EvalError::DuplicateSelection(id.to_string()));
        }
        match samples.get(id) {
            Some(s) => found.push(*s),
            None => missing.push(id.to_string()),
        }
    }
    if !missing.is_empty() {
        return Err(EvalError::UnknownSamples(missing));
    }
    if found.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok(found)
}

/// Scores selections against ground truth. Abstentions count as incorrect.
pub fn p_at_1(
    run_id: &str,
    selections: &[SelectionResult],
    samples: &BTreeMap<&str, &RefSample>,
    iou_threshold: f64,
) -> Result<EvalReport, EvalError> {
    check_threshold(iou_threshold)?;
    let resolved = resolve(selections.iter().map(|s| s.sample_id.as_str()), samples)?;

    let mut n_correct = 0;
    let mut breakdown: BTreeMap<SelectionMethod, usize> = BTreeMap::new();
    let mut abstentions = 0;
    for (sel, sample) in selections.iter().zip(&resolved) {
        *breakdown.entry(sel.method).or_default() += 1;
        match &sel.chosen_box {
            Some(b) if iou(b, &sample.gt_box) >= iou_threshold => n_correct += 1,
            Some(_) => {}
            None => abstentions += 1,
        }
    }
    let n = selections.len();
    let fallbacks = breakdown.get(&SelectionMethod::LlmFallback).copied().unwrap_or(0);
    let splits: BTreeSet<Split> = resolved.iter().map(|s| s.split).collect();
    Ok(EvalReport {
        run_id: run_id.to_string(),
        split: if splits.len() == 1 {
            splits.into_iter().next()
        } else {
            None
        },
        n_samples: n,
        n_correct,
        p_at_1: n_correct as f64 / n as f64,
        iou_threshold,
        method_breakdown: breakdown,
        abstentions,
        fallback_rate: fallbacks as f64 / n as f64,
        oracle_upper_bound: None,
    })
}

/// P@1 of always picking the best-IoU candidate of each prompt.
pub fn oracle_upper_bound(
    prompts: &[PromptRecord],
    samples: &BTreeMap<&str, &RefSample>,
    iou_threshold: f64,
) -> Result<f64, EvalError> {
    check_threshold(iou_threshold)?;
    let resolved = resolve(prompts.iter().map(|p| p.sample_id.as_str()), samples)?;
    let correct = prompts
        .iter()
        .zip(&resolved)
        .filter(|(p, s)| {
            let k = oracle_index(&p.index_map, &s.gt_box);
            iou(&p.index_map[k].bbox, &s.gt_box) >= iou_threshold
        })
        .count();
    Ok(correct as f64 / prompts.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub seen_samples: u64,
    pub p_at_1: f64,
    pub checkpoint_id: String,
}

/// Orders `(checkpoint_id, seen_samples, report)` triples by samples seen.
pub fn training_curve(
    reports: &[(String, u64, EvalReport)],
) -> Result<Vec<CurvePoint>, EvalError> {
    let mut points: Vec<CurvePoint> = reports
        .iter()
        .map(|(id, seen, r)| CurvePoint {
            seen_samples: *seen,
            p_at_1: r.p_at_1,
            checkpoint_id: id.clone(),
        })
        .collect();
    points.sort_by_key(|p| p.seen_samples);
    if let Some(w) = points.windows(2).find(|w| w[0].seen_samples == w[1].seen_samples) {
        return Err(EvalError::DuplicateSeen(w[0].seen_samples));
    }
    Ok(points)
}

/// CSV with header `seen_samples,p_at_1,checkpoint_id`.
pub fn write_curve_csv<W: io::Write>(w: W, points: &[CurvePoint]) -> Result<(), EvalError> {
    let mut wtr = csv::Writer::from_writer(w);
    for p in points {
        wtr.serialize(p)?;
    }
    wtr.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_curve_csv<R: io::Read>(r: R) -> Result<Vec<CurvePoint>, EvalError> {
    let mut rdr = csv::Reader::from_reader(r);
    rdr.deserialize()
        .map(|row| row.map_err(EvalError::from))
        .collect()
}
