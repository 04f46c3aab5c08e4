//! Prompt rendering.
//!
//! The prompt lists every candidate as one line, then asks for the index of
//! the box that matches the query:
//!
//! ```text
//! You are a helpful AI assistant, capable of understanding spatial information.
//! In an image, there are 2 boxes:
//! * In box 0: 'flower' with xyxy coordinates '[400.2, 180.6, 600.1, 220.1]' with score 0.92,
//! * In box 1: 'plate' with xyxy coordinates '[5.6, 212.3, 502.1, 587.0]' with score 0.88,
//! Which box is best matching 'The plate with flower details next to the bowl.' ?
//! Answer with just the index of the best box. No explanation.
//! Answer:
//! ```
//!
//! Coordinates use `coord_decimals` fixed decimals and scores two, rounded
//! half away from zero on the shortest decimal form of the value. Single
//! quotes inside labels are doubled. Line breaks inside labels or the query
//! are replaced by spaces so that every box occupies exactly one line.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detections::{score_rank, CandidateSet, DetectionMap, DetectionRecord};

pub const SYSTEM_LINE: &str =
    "You are a helpful AI assistant, capable of understanding spatial information.";
pub const INSTRUCTION_LINE: &str = "Answer with just the index of the best box. No explanation.";
pub const ANSWER_LINE: &str = "Answer:";
/// Prefix of every box line; the box index follows.
pub const BOX_LINE_PREFIX: &str = "* In box ";

const MAX_COORD_DECIMALS: u8 = 6;
const SCORE_DECIMALS: u8 = 2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PromptError {
    #[error("sample `{0}` has no candidate boxes")]
    NoCandidates(String),
    #[error("sample `{0}` has an empty query")]
    EmptyQuery(String),
    #[error("coord_decimals {0} exceeds the maximum of 6")]
    TooManyDecimals(u8),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoxOrder {
    #[default]
    AsGiven,
    ScoreDesc,
}

/// How a prompt is split into chat messages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageStyle {
    /// One user message holding the whole prompt text.
    #[default]
    Inline,
    /// The first line as a system message, the rest as the user message.
    SystemUser,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptOptions {
    pub include_scores: bool,
    pub coord_decimals: u8,
    pub box_order: BoxOrder,
    pub message_style: MessageStyle,
}

impl Default for PromptOptions {
    fn default() -> Self {
        Self {
            include_scores: true,
            coord_decimals: 1,
            box_order: BoxOrder::AsGiven,
            message_style: MessageStyle::Inline,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn new(role: Role, content: impl Into<String>) -> Self {
        Self {
            role,
            content: content.into(),
        }
    }
}

/// A rendered prompt and the candidate behind each box index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub sample_id: String,
    pub prompt_text: String,
    /// `index_map[k]` is the record shown as box `k`.
    pub index_map: Vec<DetectionRecord>,
    pub options: PromptOptions,
}

impl PromptRecord {
    pub fn n_boxes(&self) -> usize {
        self.index_map.len()
    }

    /// Chat messages for this prompt under its message style. Inference and
    /// fine-tuning both go through here.
    pub fn messages(&self) -> Vec<ChatMessage> {
        match self.options.message_style {
            MessageStyle::Inline => vec![ChatMessage::new(Role::User, self.prompt_text.clone())],
            MessageStyle::SystemUser => {
                let (system, user) = self
                    .prompt_text
                    .split_once('\n')
                    .unwrap_or((self.prompt_text.as_str(), ""));
                vec![
                    ChatMessage::new(Role::System, system),
                    ChatMessage::new(Role::User, user),
                ]
            }
        }
    }
}

/// Whether scores should be shown for a run: true when any record has one.
pub fn auto_include_scores(detections: &DetectionMap) -> bool {
    detections.values().flatten().any(|r| r.score.is_some())
}

/// Formats `x` with exactly `decimals` fractional digits, rounding half away
/// from zero on the shortest round-trip decimal representation.
pub fn format_fixed(x: f64, decimals: u8) -> String {
    let repr = format!("{}", x.abs());
    let (int_part, frac_part) = repr.split_once('.').unwrap_or((repr.as_str(), ""));
    let d = usize::from(decimals);
    let mut digits: Vec<u8> = int_part.bytes().map(|b| b - b'0').collect();
    let frac: Vec<u8> = frac_part.bytes().map(|b| b - b'0').collect();
    let round_up = frac.get(d).is_some_and(|&digit| digit >= 5);
    digits.extend((0..d).map(|k| frac.get(k).copied().unwrap_or(0)));
    if round_up {
        let mut k = digits.len();
        loop {
            if k == 0 {
                digits.insert(0, 1);
                break;
            }
            k -= 1;
            if digits[k] == 9 {
                digits[k] = 0;
            } else {
                digits[k] += 1;
                break;
            }
        }
    }
    let split = digits.len() - d;
    let mut out = String::with_capacity(digits.len() + 2);
    if x.is_sign_negative() && digits.iter().any(|&v| v != 0) {
        out.push('-');
    }
    out.extend(digits[..split].iter().map(|&v| char::from(b'0' + v)));
    if d > 0 {
        out.push('.');
        out.extend(digits[split..].iter().map(|&v| char::from(b'0' + v)));
    }
    out
}

fn one_line(s: &str) -> String {
    s.replace("\r\n", " ").replace(['\n', '\r'], " ")
}

fn quote_label(label: &str) -> String {
    one_line(label).replace('\'', "''")
}

fn box_line(k: usize, r: &DetectionRecord, opts: &PromptOptions) -> String {
    let c = r
        .bbox
        .coords()
        .map(|v| format_fixed(v, opts.coord_decimals));
    let mut line = format!(
        "{BOX_LINE_PREFIX}{k}: '{}' with xyxy coordinates '[{}, {}, {}, {}]'",
        quote_label(&r.label),
        c[0],
        c[1],
        c[2],
        c[3]
    );
    if opts.include_scores {
        if let Some(s) = r.score {
            line.push_str(" with score ");
            line.push_str(&format_fixed(s, SCORE_DECIMALS));
        }
    }
    line.push(',');
    line
}

pub fn build_prompt(
    set: &CandidateSet,
    query: &str,
    opts: &PromptOptions,
) -> Result<PromptRecord, PromptError> {
    if set.is_empty() {
        return Err(PromptError::NoCandidates(set.sample_id().to_string()));
    }
    if query.trim().is_empty() {
        return Err(PromptError::EmptyQuery(set.sample_id().to_string()));
    }
    if opts.coord_decimals > MAX_COORD_DECIMALS {
        return Err(PromptError::TooManyDecimals(opts.coord_decimals));
    }
    let index_map: Vec<DetectionRecord> = match opts.box_order {
        BoxOrder::AsGiven => set.candidates().to_vec(),
        BoxOrder::ScoreDesc => score_rank(set.candidates())
            .into_iter()
            .map(|i| set.candidates()[i].clone())
            .collect(),
    };

    let mut lines = Vec::with_capacity(index_map.len() + 5);
    lines.push(SYSTEM_LINE.to_string());
    lines.push(format!("In an image, there are {} boxes:", index_map.len()));
    lines.extend(index_map.iter().enumerate().map(|(k, r)| box_line(k, r, opts)));
    lines.push(format!("Which box is best matching '{}' ?", one_line(query)));
    lines.push(INSTRUCTION_LINE.to_string());
    lines.push(ANSWER_LINE.to_string());

    Ok(PromptRecord {
        sample_id: set.sample_id().to_string(),
        prompt_text: lines.join("\n"),
        index_map,
        options: *opts,
    })
}

/// Conservative token count for a prompt, used as a budget guard.
///
/// Numeric text tokenizes far denser than prose (a coordinate such as
/// `400.2` is several tokens), so every digit counts as one token and the
/// remaining characters count one token per three.
pub fn estimate_tokens(record: &PromptRecord) -> usize {
    estimate_text_tokens(&record.prompt_text)
}

pub fn estimate_text_tokens(text: &str) -> usize {
    let (digits, other) = text.chars().fold((0usize, 0usize), |(d, o), c| {
        if c.is_ascii_digit() {
            (d + 1, o)
        } else {
            (d, o + 1)
        }
    });
    (digits + other.div_ceil(3)).max(1)
}
