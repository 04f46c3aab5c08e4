//! Detector outputs: ingestion, score filtering, subject rescoring,
//! multi-source ensembling and top-k truncation.
//!
//! A detection file is JSONL with fields
//! `sample_id, source, box, label, score?, token_scores?`, where
//! `token_scores` is a list of `[token, score]` pairs.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{debug, warn};

use crate::geometry::BBox;
use crate::jsonl::{self, FieldError, Fields, LoadError, LoadMode};

/// Default confidence threshold applied to scored boxes.
pub const DEFAULT_SCORE_THRESHOLD: f64 = 0.15;
/// Default cap on boxes per prompt.
pub const DEFAULT_MAX_BOXES: usize = 20;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DetectionError {
    #[error("sample `{sample_id}`: record {index} ('{label}') has no token_scores, cannot rescore")]
    MissingTokenScores {
        sample_id: String,
        index: usize,
        label: String,
    },
    #[error("subject token list is empty")]
    EmptySubject,
    #[error("ensemble mixes sample ids: expected `{expected}`, found `{found}`")]
    MixedSamples { expected: String, found: String },
    #[error("sample `{0}` has no candidate boxes")]
    NoCandidates(String),
}

/// Similarity between one query token and a box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenScore(pub String, pub f64);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub sample_id: String,
    pub source: String,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_scores: Option<Vec<TokenScore>>,
}

const FIELDS: &[&str] = &["sample_id", "source", "box", "label", "score", "token_scores"];

fn unit_interval(field: &str, v: f64) -> Result<f64, FieldError> {
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(FieldError::new(field, format!("{v} is outside [0, 1]")))
    }
}

impl DetectionRecord {
    fn from_value(value: &serde_json::Value) -> Result<Self, FieldError> {
        let f = Fields::new(value, FIELDS)?;
        let sample_id = f.non_empty_string("sample_id")?;
        let tag = |e: FieldError| e.for_sample(&sample_id);
        let source = f.non_empty_string("source").map_err(tag)?;
        let bbox = BBox::try_from(f.f64_quad("box").map_err(tag)?)
            .map_err(|e| FieldError::new("box", e.to_string()).for_sample(&sample_id))?;
        let label = f.non_empty_string("label").map_err(tag)?;
        let score = f
            .opt_f64("score")
            .and_then(|s| s.map(|v| unit_interval("score", v)).transpose())
            .map_err(tag)?;
        let token_scores = f
            .opt_value("token_scores")
            .map(parse_token_scores)
            .transpose()
            .map_err(tag)?;
        Ok(Self {
            sample_id,
            source,
            bbox,
            label,
            score,
            token_scores,
        })
    }
}

fn parse_token_scores(v: &serde_json::Value) -> Result<Vec<TokenScore>, FieldError> {
    const F: &str = "token_scores";
    let bad = || FieldError::new(F, "expected a list of [token, score] pairs");
    let arr = v.as_array().ok_or_else(bad)?;
    arr.iter()
        .map(|pair| {
            let pair = pair.as_array().filter(|p| p.len() == 2).ok_or_else(bad)?;
            let token = pair[0].as_str().ok_or_else(bad)?.to_string();
            let score = unit_interval(F, pair[1].as_f64().ok_or_else(bad)?)?;
            Ok(TokenScore(token, score))
        })
        .collect()
}

/// Records grouped by sample id; file order is kept within each group.
pub type DetectionMap = BTreeMap<String, Vec<DetectionRecord>>;

pub fn load_detections(path: &Path, mode: LoadMode) -> Result<DetectionMap, LoadError> {
    let mut map = DetectionMap::new();
    let mut skipped = 0usize;
    for (line_no, line) in jsonl::read_lines(path)? {
        let parsed = jsonl::parse_value(path, line_no, &line).and_then(|v| {
            DetectionRecord::from_value(&v).map_err(|e| e.at(path, line_no))
        });
        match parsed {
            Ok(rec) => map.entry(rec.sample_id.clone()).or_default().push(rec),
            Err(e) if mode == LoadMode::SkipInvalid => {
                warn!("skipping invalid detection: {e}");
                skipped += 1;
            }
            Err(e) => return Err(e),
        }
    }
    if skipped > 0 {
        warn!("{}: skipped {skipped} invalid detections", path.display());
    }
    Ok(map)
}

/// Writes groups in sample-id order, records in group order.
pub fn write_detections(path: &Path, map: &DetectionMap) -> std::io::Result<()> {
    let flat: Vec<&DetectionRecord> = map.values().flatten().collect();
    jsonl::write_jsonl(path, &flat)
}

/// Concatenates several detection maps per sample, in argument order.
pub fn merge_maps(maps: &[DetectionMap]) -> DetectionMap {
    let mut out = DetectionMap::new();
    for map in maps {
        for (id, recs) in map {
            out.entry(id.clone()).or_default().extend(recs.iter().cloned());
        }
    }
    out
}

/// Keeps records with `score >= threshold`. Scoreless records always pass.
pub fn filter_by_score(records: &[DetectionRecord], threshold: f64) -> Vec<DetectionRecord> {
    records
        .iter()
        .filter(|r| r.score.is_none_or(|s| s >= threshold))
        .cloned()
        .collect()
}

/// Replaces each score with the best per-token similarity among subject
/// tokens (case-folded exact match), or 0 when no token matches.
pub fn rescore_by_subject(
    records: &[DetectionRecord],
    subject_tokens: &[String],
) -> Result<Vec<DetectionRecord>, DetectionError> {
    if subject_tokens.is_empty() {
        return Err(DetectionError::EmptySubject);
    }
    let subject: Vec<String> = subject_tokens.iter().map(|t| t.to_lowercase()).collect();
    records
        .iter()
        .enumerate()
        .map(|(index, r)| {
            let tokens = r
                .token_scores
                .as_ref()
                .ok_or_else(|| DetectionError::MissingTokenScores {
                    sample_id: r.sample_id.clone(),
                    index,
                    label: r.label.clone(),
                })?;
            let best = tokens
                .iter()
                .filter(|t| subject.contains(&t.0.to_lowercase()))
                .map(|t| t.1)
                .fold(0.0_f64, f64::max);
            Ok(DetectionRecord {
                score: Some(best),
                ..r.clone()
            })
        })
        .collect()
}

/// The ordered candidate boxes offered for one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    sample_id: String,
    candidates: Vec<DetectionRecord>,
    provenance: Vec<String>,
}

impl CandidateSet {
    pub fn new(
        sample_id: impl Into<String>,
        candidates: Vec<DetectionRecord>,
        provenance: Vec<String>,
    ) -> Result<Self, DetectionError> {
        let sample_id = sample_id.into();
        if candidates.is_empty() {
            return Err(DetectionError::NoCandidates(sample_id));
        }
        if let Some(r) = candidates.iter().find(|r| r.sample_id != sample_id) {
            return Err(DetectionError::MixedSamples {
                expected: sample_id,
                found: r.sample_id.clone(),
            });
        }
        Ok(Self {
            sample_id,
            candidates,
            provenance,
        })
    }

    pub fn sample_id(&self) -> &str {
        &self.sample_id
    }

    pub fn candidates(&self) -> &[DetectionRecord] {
        &self.candidates
    }

    pub fn provenance(&self) -> &[String] {
        &self.provenance
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }
}

/// Concatenates per-source lists in the given order. Records keep their own
/// `source` field; provenance lists every given tag.
pub fn ensemble(
    sample_id: &str,
    sets: &[(String, Vec<DetectionRecord>)],
) -> Result<CandidateSet, DetectionError> {
    let candidates: Vec<DetectionRecord> =
        sets.iter().flat_map(|(_, recs)| recs.iter().cloned()).collect();
    let provenance = sets.iter().map(|(tag, _)| tag.clone()).collect();
    CandidateSet::new(sample_id, candidates, provenance)
}

/// Ranking used by top-k truncation and the score baseline: higher scores
/// first, scoreless after every scored record, then lower index first.
pub(crate) fn score_rank(records: &[DetectionRecord]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|&a, &b| {
        match (records[a].score, records[b].score) {
            (Some(x), Some(y)) => y.total_cmp(&x),
            (Some(_), None) => std::cmp::Ordering::Less,
            (None, Some(_)) => std::cmp::Ordering::Greater,
            (None, None) => std::cmp::Ordering::Equal,
        }
        .then(a.cmp(&b))
    });
    order
}

/// Keeps the `max_boxes` best-scored candidates in their original order.
pub fn truncate(set: &CandidateSet, max_boxes: usize) -> CandidateSet {
    let max_boxes = max_boxes.max(1);
    if set.len() <= max_boxes {
        return set.clone();
    }
    let mut keep: Vec<usize> = score_rank(&set.candidates)[..max_boxes].to_vec();
    keep.sort_unstable();
    debug!(
        sample_id = %set.sample_id,
        "truncated {} candidates to {max_boxes}",
        set.len()
    );
    CandidateSet {
        sample_id: set.sample_id.clone(),
        candidates: keep.into_iter().map(|i| set.candidates[i].clone()).collect(),
        provenance: set.provenance.clone(),
    }
}

/// Candidate construction settings shared by inference and corpus generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CandidateOptions {
    /// `None` disables score filtering.
    pub score_threshold: Option<f64>,
    pub max_boxes: usize,
    /// Sources whose scores are replaced by subject-token similarity.
    pub rescore_sources: Vec<String>,
    /// Sources to use, in this order. Empty means all sources in order of
    /// first appearance.
    pub sources: Vec<String>,
}

impl Default for CandidateOptions {
    fn default() -> Self {
        Self {
            score_threshold: Some(DEFAULT_SCORE_THRESHOLD),
            max_boxes: DEFAULT_MAX_BOXES,
            rescore_sources: Vec::new(),
            sources: Vec::new(),
        }
    }
}

impl CandidateOptions {
    pub fn validate(&self) -> Result<(), String> {
        if let Some(t) = self.score_threshold {
            if !(0.0..=1.0).contains(&t) {
                return Err(format!("score_threshold {t} is outside [0, 1]"));
            }
        }
        if self.max_boxes == 0 {
            return Err("max_boxes must be at least 1".into());
        }
        Ok(())
    }

    pub fn needs_subject(&self) -> bool {
        !self.rescore_sources.is_empty()
    }
}

/// Box counts at each stage of [`build_candidates`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CandidateTrace {
    pub raw: usize,
    pub after_filter: usize,
    pub after_truncate: usize,
}

/// Groups one sample's records by source, then rescores, filters, ensembles
/// and truncates them.
///
/// `subject` is only consulted for sources listed in `rescore_sources`.
pub fn build_candidates(
    sample_id: &str,
    records: &[DetectionRecord],
    subject: &[String],
    opts: &CandidateOptions,
) -> Result<(CandidateSet, CandidateTrace), DetectionError> {
    let mut groups: Vec<(String, Vec<DetectionRecord>)> = Vec::new();
    if opts.sources.is_empty() {
        for r in records {
            match groups.iter_mut().find(|(tag, _)| *tag == r.source) {
                Some((_, recs)) => recs.push(r.clone()),
                None => groups.push((r.source.clone(), vec![r.clone()])),
            }
        }
    } else {
        for tag in &opts.sources {
            let recs = records.iter().filter(|r| &r.source == tag).cloned().collect();
            groups.push((tag.clone(), recs));
        }
    }
    let raw = groups.iter().map(|(_, r)| r.len()).sum();

    for (tag, recs) in groups.iter_mut() {
        if opts.rescore_sources.contains(tag) {
            *recs = rescore_by_subject(recs, subject)?;
        }
        if let Some(t) = opts.score_threshold {
            *recs = filter_by_score(recs, t);
        }
    }
    let merged = ensemble(sample_id, &groups)?;
    let after_filter = merged.len();
    let set = truncate(&merged, opts.max_boxes);
    let trace = CandidateTrace {
        raw,
        after_filter,
        after_truncate: set.len(),
    };
    Ok((set, trace))
}
