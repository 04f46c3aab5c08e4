//! Run profiles: one TOML file holding every setting that shapes a run.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use recwrap::detections::{CandidateOptions, DetectionMap};
use recwrap::eval::DEFAULT_IOU_THRESHOLD;
use recwrap::gateway::GatewayConfig;
use recwrap::pipeline::PipelineOptions;
use recwrap::prompt::{auto_include_scores, BoxOrder, MessageStyle, PromptOptions};
use recwrap::selection::FallbackPolicy;
use recwrap::sft::DatagenFilters;

/// `include_scores = true | false | "auto"`. Auto shows scores when any
/// input record carries one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum IncludeScores {
    Fixed(bool),
    Mode(AutoMode),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AutoMode {
    Auto,
}

impl Default for IncludeScores {
    fn default() -> Self {
        IncludeScores::Mode(AutoMode::Auto)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptSection {
    pub include_scores: IncludeScores,
    pub coord_decimals: u8,
    pub box_order: BoxOrder,
    pub message_style: MessageStyle,
}

impl Default for PromptSection {
    fn default() -> Self {
        let d = PromptOptions::default();
        Self {
            include_scores: IncludeScores::default(),
            coord_decimals: d.coord_decimals,
            box_order: d.box_order,
            message_style: d.message_style,
        }
    }
}

impl PromptSection {
    pub fn resolve(&self, detections: &DetectionMap) -> PromptOptions {
        PromptOptions {
            include_scores: match self.include_scores {
                IncludeScores::Fixed(b) => b,
                IncludeScores::Mode(AutoMode::Auto) => auto_include_scores(detections),
            },
            coord_decimals: self.coord_decimals,
            box_order: self.box_order,
            message_style: self.message_style,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub iou_threshold: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            iou_threshold: DEFAULT_IOU_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionSection {
    pub fallback: FallbackPolicy,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatagenSection {
    pub min_label_iou: f64,
    pub min_boxes: usize,
    /// Records per shard; 0 writes no shards.
    pub shard_size: usize,
}

impl Default for DatagenSection {
    fn default() -> Self {
        let f = DatagenFilters::default();
        Self {
            min_label_iou: f.min_label_iou,
            min_boxes: f.min_boxes,
            shard_size: 0,
        }
    }
}

impl DatagenSection {
    pub fn filters(&self) -> DatagenFilters {
        DatagenFilters {
            min_label_iou: self.min_label_iou,
            min_boxes: self.min_boxes,
        }
    }
}

/// Default input locations, used when the matching flag is absent.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    pub dataset: Option<PathBuf>,
    pub detections: Vec<PathBuf>,
    pub subject_overrides: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunProfile {
    pub name: String,
    /// Shuffling seed; required by `datagen`.
    pub seed: Option<u64>,
    pub candidates: CandidateOptions,
    pub prompt: PromptSection,
    pub gateway: GatewayConfig,
    pub selection: SelectionSection,
    pub eval: EvalSection,
    pub datagen: DatagenSection,
    pub paths: PathsSection,
}

impl Default for RunProfile {
    fn default() -> Self {
        Self {
            name: "default".into(),
            seed: None,
            candidates: CandidateOptions::default(),
            prompt: PromptSection::default(),
            gateway: GatewayConfig::default(),
            selection: SelectionSection::default(),
            eval: EvalSection::default(),
            datagen: DatagenSection::default(),
            paths: PathsSection::default(),
        }
    }
}

impl RunProfile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading profile {}", path.display()))?;
        let profile: RunProfile =
            toml::from_str(&text).with_context(|| format!("parsing profile {}", path.display()))?;
        Ok(profile)
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => Self::load(p),
            None => Ok(Self::default()),
        }
    }

    /// Checks settings that do not depend on the command being run.
    pub fn validate(&self) -> Result<()> {
        if self.name.trim().is_empty() {
            bail!("profile name is empty");
        }
        if let Err(e) = self.candidates.validate() {
            bail!("candidates: {e}");
        }
        if !(0.0..=1.0).contains(&self.eval.iou_threshold) {
            bail!("eval.iou_threshold {} is outside [0, 1]", self.eval.iou_threshold);
        }
        if !(0.0..=1.0).contains(&self.datagen.min_label_iou) {
            bail!("datagen.min_label_iou {} is outside [0, 1]", self.datagen.min_label_iou);
        }
        self.gateway.validate().context("gateway")?;
        Ok(())
    }

    pub fn pipeline(&self, detections: &DetectionMap) -> PipelineOptions {
        PipelineOptions {
            candidates: self.candidates.clone(),
            prompt: self.prompt.resolve(detections),
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("profile serializes")
    }
}
