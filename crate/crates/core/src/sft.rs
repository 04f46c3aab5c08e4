//! Fine-tuning corpus: inference prompts paired with the best-IoU box index.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{RefSample, Split};
use crate::detections::DetectionMap;
use crate::eval::iou;
use crate::jsonl::to_jsonl_string;
use crate::manifest::sha256_hex;
use crate::pipeline::{prepare_prompt, PipelineOptions, PrepareError};
use crate::prompt::{ChatMessage, Role};
use crate::selection::oracle_index;
use crate::subject::SubjectOverrides;

pub const DEFAULT_MIN_LABEL_IOU: f64 = 0.5;
pub const DEFAULT_MIN_BOXES: usize = 2;
const HISTOGRAM_BINS: usize = 10;

#[derive(Debug, Error)]
pub enum DatagenError {
    #[error("sample `{0}` is in the {1} split; corpora are built from train samples only")]
    NotTrain(String, Split),
    #[error("datagen options differ from the inference profile in: {}", .0.join(", "))]
    ProfileMismatch(Vec<String>),
    #[error("invalid filters: {0}")]
    Filters(String),
    #[error("shard_size must be at least 1")]
    ShardSize,
    #[error(transparent)]
    Prepare(#[from] PrepareError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatagenFilters {
    /// Drop samples whose best candidate overlaps ground truth less than this.
    pub min_label_iou: f64,
    pub min_boxes: usize,
}

impl Default for DatagenFilters {
    fn default() -> Self {
        Self {
            min_label_iou: DEFAULT_MIN_LABEL_IOU,
            min_boxes: DEFAULT_MIN_BOXES,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftRecord {
    pub sample_id: String,
    /// Prompt messages followed by one assistant message holding the index.
    pub messages: Vec<ChatMessage>,
    pub label_index: usize,
    pub label_iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatagenStats {
    pub samples: usize,
    pub kept: usize,
    pub missing_detections: usize,
    pub no_candidates: usize,
    pub dropped_low_iou: usize,
    pub dropped_few_boxes: usize,
    /// Label IoU of every labeled sample, before the filters. The last bin
    /// is closed at 1.
    pub label_iou_histogram: Vec<HistogramBin>,
}

impl DatagenStats {
    fn new() -> Self {
        Self {
            samples: 0,
            kept: 0,
            missing_detections: 0,
            no_candidates: 0,
            dropped_low_iou: 0,
            dropped_few_boxes: 0,
            label_iou_histogram: (0..HISTOGRAM_BINS)
                .map(|i| HistogramBin {
                    lo: i as f64 / HISTOGRAM_BINS as f64,
                    hi: (i + 1) as f64 / HISTOGRAM_BINS as f64,
                    count: 0,
                })
                .collect(),
        }
    }

    fn record_iou(&mut self, v: f64) {
        let bin = ((v * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1);
        self.label_iou_histogram[bin].count += 1;
    }

    pub fn dropped(&self) -> usize {
        self.missing_detections + self.no_candidates + self.dropped_low_iou + self.dropped_few_boxes
    }
}

/// Builds one record per usable train sample, sorted by `sample_id`.
///
/// Prompts come from the same path inference uses. When `inference` is
/// given, any option difference is an error.
pub fn generate_corpus(
    samples: &[RefSample],
    detections: &DetectionMap,
    overrides: Option<&SubjectOverrides>,
    opts: &PipelineOptions,
    filters: &DatagenFilters,
    inference: Option<&PipelineOptions>,
) -> Result<(Vec<SftRecord>, DatagenStats), DatagenError> {
    if let Some(inf) = inference {
        let diff = opts.diff(inf);
        if !diff.is_empty() {
            return Err(DatagenError::ProfileMismatch(diff));
        }
    }
    if !(0.0..=1.0).contains(&filters.min_label_iou) {
        return Err(DatagenError::Filters(format!(
            "min_label_iou {} is outside [0, 1]",
            filters.min_label_iou
        )));
    }
    if let Some(s) = samples.iter().find(|s| s.split != Split::Train) {
        return Err(DatagenError::NotTrain(s.sample_id.clone(), s.split));
    }

    let mut sorted: Vec<&RefSample> = samples.iter().collect();
    sorted.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));

    let mut stats = DatagenStats::new();
    let mut out = Vec::new();
    for s in sorted {
        stats.samples += 1;
        if !detections.contains_key(&s.sample_id) {
            stats.missing_detections += 1;
            continue;
        }
        let prompt = match prepare_prompt(s, detections, overrides, opts) {
            Ok((p, _)) => p,
            Err(e) if e.is_no_candidates() => {
                stats.no_candidates += 1;
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        let k = oracle_index(&prompt.index_map, &s.gt_box);
        let label_iou = iou(&prompt.index_map[k].bbox, &s.gt_box);
        stats.record_iou(label_iou);
        if prompt.n_boxes() < filters.min_boxes {
            stats.dropped_few_boxes += 1;
            continue;
        }
        if label_iou < filters.min_label_iou {
            stats.dropped_low_iou += 1;
            continue;
        }
        let mut messages = prompt.messages();
        messages.push(ChatMessage::new(Role::Assistant, k.to_string()));
        out.push(SftRecord {
            sample_id: s.sample_id.clone(),
            messages,
            label_index: k,
            label_iou,
        });
    }
    stats.kept = out.len();
    Ok((out, stats))
}

#[derive(Serialize)]
struct MessagesLine<'a> {
    messages: &'a [ChatMessage],
}

#[derive(Serialize)]
struct MetaLine<'a> {
    sample_id: &'a str,
    label_index: usize,
    label_iou: f64,
}

/// The `{messages}` lines consumed by fine-tuning tools.
pub fn corpus_text(records: &[SftRecord]) -> String {
    let lines: Vec<_> = records
        .iter()
        .map(|r| MessagesLine {
            messages: &r.messages,
        })
        .collect();
    to_jsonl_string(&lines)
}

/// Sidecar `{sample_id, label_index, label_iou}` lines, aligned with the corpus.
pub fn meta_text(records: &[SftRecord]) -> String {
    let lines: Vec<_> = records
        .iter()
        .map(|r| MetaLine {
            sample_id: &r.sample_id,
            label_index: r.label_index,
            label_iou: r.label_iou,
        })
        .collect();
    to_jsonl_string(&lines)
}

/// Sidecar path for a corpus file: `corpus.jsonl` becomes `corpus.meta.jsonl`.
pub fn meta_path(corpus: &Path) -> PathBuf {
    let stem = corpus.file_stem().unwrap_or_default().to_string_lossy();
    corpus.with_file_name(format!("{stem}.meta.jsonl"))
}

/// Reads corpus and sidecar back into records.
pub fn read_corpus(corpus: &Path) -> Result<Vec<SftRecord>, crate::jsonl::LoadError> {
    #[derive(Deserialize)]
    struct M {
        messages: Vec<ChatMessage>,
    }
    #[derive(Deserialize)]
    struct Meta {
        sample_id: String,
        label_index: usize,
        label_iou: f64,
    }
    let msgs: Vec<M> = crate::jsonl::read_jsonl(corpus)?;
    let meta: Vec<Meta> = crate::jsonl::read_jsonl(&meta_path(corpus))?;
    Ok(msgs
        .into_iter()
        .zip(meta)
        .map(|(m, x)| SftRecord {
            sample_id: x.sample_id,
            messages: m.messages,
            label_index: x.label_index,
            label_iou: x.label_iou,
        })
        .collect())
}

/// Permutation of `0..n` fixed by `seed`.
pub fn shuffle_order(n: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShardInfo {
    pub file: String,
    pub count: usize,
    pub sha256: String,
    pub sample_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShardManifest {
    pub seed: u64,
    pub shard_size: usize,
    pub total: usize,
    pub shards: Vec<ShardInfo>,
}

/// Shuffles the corpus under `seed` and splits it into consecutive shards of
/// at most `shard_size` records. Returns shard contents with their manifest.
pub fn shard_and_shuffle(
    records: &[SftRecord],
    seed: u64,
    shard_size: usize,
) -> Result<(Vec<Vec<SftRecord>>, ShardManifest), DatagenError> {
    if shard_size == 0 {
        return Err(DatagenError::ShardSize);
    }
    let permuted: Vec<SftRecord> = shuffle_order(records.len(), seed)
        .into_iter()
        .map(|i| records[i].clone())
        .collect();
    let shards: Vec<Vec<SftRecord>> = permuted.chunks(shard_size).map(<[_]>::to_vec).collect();
    let infos = shards
        .iter()
        .enumerate()
        .map(|(i, s)| ShardInfo {
            file: shard_file_name(i),
            count: s.len(),
            sha256: sha256_hex(corpus_text(s).as_bytes()),
            sample_ids: s.iter().map(|r| r.sample_id.clone()).collect(),
        })
        .collect();
    let manifest = ShardManifest {
        seed,
        shard_size,
        total: records.len(),
        shards: infos,
    };
    Ok((shards, manifest))
}

pub fn shard_file_name(i: usize) -> String {
    format!("shard-{i:05}.jsonl")
}

/// Writes each shard as a corpus file plus `shards.json` into `dir`.
pub fn write_shards(
    dir: &Path,
    shards: &[Vec<SftRecord>],
    manifest: &ShardManifest,
) -> io::Result<()> {
    fs::create_dir_all(dir)?;
    for (shard, info) in shards.iter().zip(&manifest.shards) {
        fs::write(dir.join(&info.file), corpus_text(shard))?;
    }
    let mut text = serde_json::to_string_pretty(manifest)?;
    text.push('\n');
    fs::write(dir.join("shards.json"), text)
}
