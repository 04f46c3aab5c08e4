//! Sample to prompt, the one path shared by inference and corpus generation.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::RefSample;
use crate::detections::{build_candidates, CandidateOptions, CandidateTrace, DetectionError, DetectionMap};
use crate::prompt::{build_prompt, PromptError, PromptOptions, PromptRecord};
use crate::subject::{subject_tokens, SubjectOverrides};

/// Everything that shapes a prompt. Two runs with equal options render the
/// same prompt for the same sample and detections.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineOptions {
    pub candidates: CandidateOptions,
    pub prompt: PromptOptions,
}

impl PipelineOptions {
    /// Dotted names of the settings that differ between two option sets.
    pub fn diff(&self, other: &PipelineOptions) -> Vec<String> {
        let a = serde_json::to_value(self).expect("options serialize");
        let b = serde_json::to_value(other).expect("options serialize");
        let mut out = Vec::new();
        for (section, fields) in a.as_object().into_iter().flatten() {
            for (name, value) in fields.as_object().into_iter().flatten() {
                if b[section][name] != *value {
                    out.push(format!("{section}.{name}"));
                }
            }
        }
        out
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PrepareError {
    #[error(transparent)]
    Detection(#[from] DetectionError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

impl PrepareError {
    /// True when the sample simply has nothing to choose from. Such samples
    /// are skipped and counted rather than failing a run.
    pub fn is_no_candidates(&self) -> bool {
        matches!(
            self,
            PrepareError::Detection(DetectionError::NoCandidates(_))
                | PrepareError::Prompt(PromptError::NoCandidates(_))
        )
    }
}

/// Builds the candidate set and prompt for one sample.
pub fn prepare_prompt(
    sample: &RefSample,
    detections: &DetectionMap,
    overrides: Option<&SubjectOverrides>,
    opts: &PipelineOptions,
) -> Result<(PromptRecord, CandidateTrace), PrepareError> {
    let records = detections
        .get(&sample.sample_id)
        .map(Vec::as_slice)
        .unwrap_or(&[]);
    let subject = if opts.candidates.needs_subject() {
        subject_tokens(&sample.sample_id, &sample.query, overrides)
    } else {
        Vec::new()
    };
    let (set, trace) = build_candidates(&sample.sample_id, records, &subject, &opts.candidates)?;
    let prompt = build_prompt(&set, &sample.query, &opts.prompt)?;
    Ok((prompt, trace))
}

/// Prompts for a batch of samples plus what was skipped.
#[derive(Debug, Clone, Default)]
pub struct PromptBatch {
    pub prompts: Vec<PromptRecord>,
    pub traces: Vec<CandidateTrace>,
    /// Samples with no detection records at all.
    pub missing: Vec<String>,
    /// Samples whose records were all filtered out.
    pub no_candidates: Vec<String>,
}

impl PromptBatch {
    pub fn warnings(&self) -> usize {
        self.missing.len() + self.no_candidates.len()
    }
}

/// Prompts in dataset order. Missing or empty samples are skipped and
/// listed; any other failure aborts.
pub fn build_prompt_batch(
    samples: &[RefSample],
    detections: &DetectionMap,
    overrides: Option<&SubjectOverrides>,
    opts: &PipelineOptions,
) -> Result<PromptBatch, PrepareError> {
    let mut batch = PromptBatch::default();
    for s in samples {
        if !detections.contains_key(&s.sample_id) {
            batch.missing.push(s.sample_id.clone());
            continue;
        }
        match prepare_prompt(s, detections, overrides, opts) {
            Ok((p, t)) => {
                batch.prompts.push(p);
                batch.traces.push(t);
            }
            Err(e) if e.is_no_candidates() => batch.no_candidates.push(s.sample_id.clone()),
            Err(e) => return Err(e),
        }
    }
    Ok(batch)
}
