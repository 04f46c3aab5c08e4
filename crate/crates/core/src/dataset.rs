//! Referring-expression samples in the normalized line-delimited format.
//!
//! Each line is one JSON object with exactly the fields
//! `sample_id, image_id, image_width, image_height, query, gt_box, split`.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::geometry::BBox;
use crate::jsonl::{self, FieldError, Fields, LoadError, LoadMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}` (expected train, val or test)")),
        }
    }
}

/// One `(image, query)` pair with its ground-truth box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefSample {
    pub sample_id: String,
    pub image_id: String,
    pub image_width: u32,
    pub image_height: u32,
    pub query: String,
    pub gt_box: BBox,
    pub split: Split,
}

const FIELDS: &[&str] = &[
    "sample_id",
    "image_id",
    "image_width",
    "image_height",
    "query",
    "gt_box",
    "split",
];

impl RefSample {
    fn from_value(value: &serde_json::Value) -> Result<Self, FieldError> {
        let f = Fields::new(value, FIELDS)?;
        let sample_id = f.non_empty_string("sample_id")?;
        let tag = |e: FieldError| e.for_sample(&sample_id);
        let image_id = f.string("image_id").map_err(tag)?;
        let image_width = f.positive_u32("image_width").map_err(tag)?;
        let image_height = f.positive_u32("image_height").map_err(tag)?;
        let query = f.non_empty_string("query").map_err(tag)?;
        let gt_box = BBox::try_from(f.f64_quad("gt_box").map_err(tag)?)
            .map_err(|e| FieldError::new("gt_box", e.to_string()).for_sample(&sample_id))?;
        gt_box
            .check_within(image_width, image_height)
            .map_err(|e| FieldError::new("gt_box", e.to_string()).for_sample(&sample_id))?;
        let split = f
            .string("split")
            .and_then(|s| s.parse::<Split>().map_err(|e| FieldError::new("split", e)))
            .map_err(tag)?;
        Ok(Self {
            sample_id,
            image_id,
            image_width,
            image_height,
            query,
            gt_box,
            split,
        })
    }
}

/// Loads a dataset file, keeping records of `split_filter` (all when `None`)
/// in file order.
///
/// Uniqueness of `sample_id` is checked across the whole file, not just the
/// filtered subset.
pub fn load_dataset(
    path: &Path,
    split_filter: Option<Split>,
    mode: LoadMode,
) -> Result<Vec<RefSample>, LoadError> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    let mut skipped = 0usize;
    for (line_no, line) in jsonl::read_lines(path)? {
        let parsed = jsonl::parse_value(path, line_no, &line).and_then(|v| {
            let sample = RefSample::from_value(&v).map_err(|e| e.at(path, line_no))?;
            if !seen.insert(sample.sample_id.clone()) {
                return Err(LoadError::DuplicateId {
                    path: path.to_path_buf(),
                    line: line_no,
                    sample_id: sample.sample_id,
                });
            }
            Ok(sample)
        });
        match parsed {
            Ok(sample) => {
                if split_filter.is_none_or(|s| s == sample.split) {
                    out.push(sample);
                }
            }
            Err(e) if mode == LoadMode::SkipInvalid => {
                warn!("skipping invalid record: {e}");
                skipped += 1;
            }
            Err(e) => return Err(e),
        }
    }
    if skipped > 0 {
        warn!("{}: skipped {skipped} invalid records", path.display());
    }
    Ok(out)
}

pub fn write_dataset(path: &Path, samples: &[RefSample]) -> std::io::Result<()> {
    jsonl::write_jsonl(path, samples)
}

/// Exact count per split; every split is present, possibly with 0.
pub fn split_counts(samples: &[RefSample]) -> BTreeMap<Split, usize> {
    let mut counts: BTreeMap<Split, usize> = Split::ALL.iter().map(|s| (*s, 0)).collect();
    for s in samples {
        *counts.entry(s.split).or_default() += 1;
    }
    counts
}

/// Indexes samples by id for evaluation lookups.
pub fn index_by_id(samples: &[RefSample]) -> BTreeMap<&str, &RefSample> {
    samples.iter().map(|s| (s.sample_id.as_str(), s)).collect()
}
