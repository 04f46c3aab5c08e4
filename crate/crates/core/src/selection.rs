//! Turning model answers into box selections, plus the best-IoU oracle and
//! the highest-score baseline.

use serde::{Deserialize, Serialize};

use crate::detections::{score_rank, CandidateSet, DetectionRecord};
use crate::eval::iou;
use crate::gateway::LlmResponse;
use crate::geometry::BBox;
use crate::prompt::PromptRecord;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMethod {
    Llm,
    LlmFallback,
    BaselineTopScore,
    OracleBestIou,
}

impl SelectionMethod {
    pub fn as_str(&self) -> &'static str {
        match self {
            SelectionMethod::Llm => "llm",
            SelectionMethod::LlmFallback => "llm_fallback",
            SelectionMethod::BaselineTopScore => "baseline_top_score",
            SelectionMethod::OracleBestIou => "oracle_best_iou",
        }
    }
}

/// What to do when the answer cannot be used.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FallbackPolicy {
    /// Highest-scored candidate, as the detector alone would answer.
    #[default]
    TopScore,
    FirstBox,
    /// Select nothing; scored as incorrect.
    Abstain,
}

/// One line of a selections file. `chosen_index`/`box` are null for an
/// abstention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub sample_id: String,
    pub chosen_index: Option<usize>,
    #[serde(rename = "box")]
    pub chosen_box: Option<BBox>,
    pub method: SelectionMethod,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parse_note: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParseFailureKind {
    NoInteger,
    OutOfRange,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseFailure {
    pub kind: ParseFailureKind,
    pub raw: String,
}

impl ParseFailure {
    pub fn note(&self, n_boxes: usize) -> String {
        match self.kind {
            ParseFailureKind::NoInteger => format!("no_integer in {:?}", self.raw),
            ParseFailureKind::OutOfRange => {
                format!("out_of_range (n_boxes={n_boxes}) in {:?}", self.raw)
            }
        }
    }
}

/// Returns the first non-negative integer in `raw` if it indexes one of
/// `n_boxes` boxes.
///
/// Digits preceded by `-` (negative numbers) and numbers with a fractional
/// part (`2.5`) are not integer tokens and are skipped. Everything else
/// (whitespace, punctuation, words such as "Box" or "Answer:") is ignored.
pub fn parse_answer(raw: &str, n_boxes: usize) -> Result<usize, ParseFailure> {
    let b = raw.as_bytes();
    let mut i = 0;
    while i < b.len() {
        if !b[i].is_ascii_digit() {
            i += 1;
            continue;
        }
        let start = i;
        while i < b.len() && b[i].is_ascii_digit() {
            i += 1;
        }
        let negative = start > 0 && b[start - 1] == b'-';
        let fractional = i + 1 < b.len() && b[i] == b'.' && b[i + 1].is_ascii_digit();
        if fractional {
            i += 1;
            while i < b.len() && b[i].is_ascii_digit() {
                i += 1;
            }
        }
        if negative || fractional {
            continue;
        }
        let out_of_range = || ParseFailure {
            kind: ParseFailureKind::OutOfRange,
            raw: raw.to_string(),
        };
        // slice is ASCII digits only
        return match raw[start..i].parse::<usize>() {
            Ok(v) if v < n_boxes => Ok(v),
            _ => Err(out_of_range()),
        };
    }
    Err(ParseFailure {
        kind: ParseFailureKind::NoInteger,
        raw: raw.to_string(),
    })
}

/// Index of the highest-scored candidate; scoreless rank last, ties go to
/// the lower index. Panics on an empty slice.
pub fn top_score_index(candidates: &[DetectionRecord]) -> usize {
    score_rank(candidates)[0]
}

/// Index of the candidate closest to `gt`: highest IoU, then smallest
/// center distance, then lowest index. When nothing overlaps this reduces
/// to the nearest center. Panics on an empty slice.
pub fn oracle_index(candidates: &[DetectionRecord], gt: &BBox) -> usize {
    let mut best = 0;
    let mut best_key = (iou(&candidates[0].bbox, gt), candidates[0].bbox.center_distance(gt));
    for (k, c) in candidates.iter().enumerate().skip(1) {
        let key = (iou(&c.bbox, gt), c.bbox.center_distance(gt));
        if key.0 > best_key.0 || (key.0 == best_key.0 && key.1 < best_key.1) {
            best = k;
            best_key = key;
        }
    }
    best
}

fn chosen(
    sample_id: &str,
    candidates: &[DetectionRecord],
    k: usize,
    method: SelectionMethod,
    parse_note: Option<String>,
) -> SelectionResult {
    SelectionResult {
        sample_id: sample_id.to_string(),
        chosen_index: Some(k),
        chosen_box: Some(candidates[k].bbox),
        method,
        parse_note,
    }
}

pub fn oracle_best_iou(set: &CandidateSet, gt: &BBox) -> SelectionResult {
    let k = oracle_index(set.candidates(), gt);
    chosen(set.sample_id(), set.candidates(), k, SelectionMethod::OracleBestIou, None)
}

pub fn baseline_top_score(set: &CandidateSet) -> SelectionResult {
    let k = top_score_index(set.candidates());
    chosen(set.sample_id(), set.candidates(), k, SelectionMethod::BaselineTopScore, None)
}

/// Oracle pick over a rendered prompt; the index refers to its `index_map`.
pub fn oracle_for_prompt(prompt: &PromptRecord, gt: &BBox) -> SelectionResult {
    let k = oracle_index(&prompt.index_map, gt);
    chosen(&prompt.sample_id, &prompt.index_map, k, SelectionMethod::OracleBestIou, None)
}

/// Baseline pick over a rendered prompt; the index refers to its `index_map`.
pub fn baseline_for_prompt(prompt: &PromptRecord) -> SelectionResult {
    let k = top_score_index(&prompt.index_map);
    chosen(&prompt.sample_id, &prompt.index_map, k, SelectionMethod::BaselineTopScore, None)
}

/// Resolves a model response against the prompt it answered. Indices refer
/// to the prompt's `index_map`.
pub fn select(
    prompt: &PromptRecord,
    response: &LlmResponse,
    fallback: FallbackPolicy,
) -> SelectionResult {
    let n = prompt.n_boxes();
    let failure = match &response.error {
        Some(err) => format!("response_error: {err}"),
        None => match parse_answer(&response.raw_text, n) {
            Ok(k) => {
                return chosen(&prompt.sample_id, &prompt.index_map, k, SelectionMethod::Llm, None)
            }
            Err(f) => f.note(n),
        },
    };
    let note = Some(format!("{failure}; fallback {}", fallback_name(fallback)));
    let candidates = &prompt.index_map;
    match fallback {
        FallbackPolicy::TopScore => chosen(
            &prompt.sample_id,
            candidates,
            top_score_index(candidates),
            SelectionMethod::LlmFallback,
            note,
        ),
        FallbackPolicy::FirstBox => {
            chosen(&prompt.sample_id, candidates, 0, SelectionMethod::LlmFallback, note)
        }
        FallbackPolicy::Abstain => SelectionResult {
            sample_id: prompt.sample_id.clone(),
            chosen_index: None,
            chosen_box: None,
            method: SelectionMethod::LlmFallback,
            parse_note: note,
        },
    }
}

fn fallback_name(f: FallbackPolicy) -> &'static str {
    match f {
        FallbackPolicy::TopScore => "top_score",
        FallbackPolicy::FirstBox => "first_box",
        FallbackPolicy::Abstain => "abstain",
    }
}
