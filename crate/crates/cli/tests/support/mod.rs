//! Deterministic fixtures and a scripted chat endpoint for the CLI tests.
//!
//! Every expected number here follows from how the fixture is built, never
//! from running the code under test.
#![allow(dead_code)]

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use recwrap::dataset::{write_dataset, RefSample, Split};
use recwrap::detections::{write_detections, DetectionMap, DetectionRecord, TokenScore};
use recwrap::eval::EvalReport;
use recwrap::selection::SelectionMethod;
use recwrap::BBox;

pub const IMAGE_W: u32 = 640;
pub const IMAGE_H: u32 = 480;

pub fn fixtures_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

pub fn core_golden_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/golden")
}

pub fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_recwrap")
}

pub fn run_cli(args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .env_remove("RECWRAP_API_KEY")
        .output()
        .expect("spawn recwrap")
}

/// Runs the binary and panics with its stderr when it fails.
pub fn run_ok(args: &[&str]) -> Output {
    let out = run_cli(args);
    assert!(
        out.status.success(),
        "recwrap {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

pub fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 path")
}

fn r2(v: f64) -> f64 {
    (v * 100.0).round() / 100.0
}

fn quad(b: [f64; 4]) -> BBox {
    BBox::try_from(b).expect("fixture box")
}

/// Intersection area, written out independently of the library.
pub fn overlap(a: [f64; 4], b: [f64; 4]) -> f64 {
    let w = a[2].min(b[2]) - a[0].max(b[0]);
    let h = a[3].min(b[3]) - a[1].max(b[1]);
    if w <= 0.0 || h <= 0.0 {
        0.0
    } else {
        w * h
    }
}

pub fn ref_iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let i = overlap(a, b);
    if i == 0.0 {
        return 0.0;
    }
    let area = |x: [f64; 4]| (x[2] - x[0]) * (x[3] - x[1]);
    i / (area(a) + area(b) - i)
}

fn random_gt(rng: &mut ChaCha8Rng) -> [f64; 4] {
    let x = r2(rng.random_range(20.0..400.0));
    let y = r2(rng.random_range(20.0..300.0));
    let w = r2(rng.random_range(60.0..200.0));
    let h = r2(rng.random_range(60.0..160.0));
    [x, y, x + w, y + h]
}

/// A box close to `gt`; each edge moves by at most 3% of the side length.
fn jitter(rng: &mut ChaCha8Rng, gt: [f64; 4]) -> [f64; 4] {
    let w = gt[2] - gt[0];
    let h = gt[3] - gt[1];
    let mut j = |v: f64, s: f64, hi: f64| r2((v + rng.random_range(-0.03..0.03) * s).clamp(0.0, hi));
    [
        j(gt[0], w, IMAGE_W as f64),
        j(gt[1], h, IMAGE_H as f64),
        j(gt[2], w, IMAGE_W as f64),
        j(gt[3], h, IMAGE_H as f64),
    ]
}

/// A box that does not touch `gt`.
fn away_from(rng: &mut ChaCha8Rng, gt: [f64; 4]) -> [f64; 4] {
    loop {
        let w = rng.random_range(30.0..150.0);
        let h = rng.random_range(30.0..150.0);
        let x = r2(rng.random_range(0.0..IMAGE_W as f64 - w));
        let y = r2(rng.random_range(0.0..IMAGE_H as f64 - h));
        let b = [x, y, r2(x + w), r2(y + h)];
        let grown = [gt[0] - 1.0, gt[1] - 1.0, gt[2] + 1.0, gt[3] + 1.0];
        if overlap(b, grown) == 0.0 {
            return b;
        }
    }
}

const NOUNS: &[&str] = &[
    "cup", "dog", "man", "woman", "chair", "car", "plate", "umbrella", "horse", "bottle",
    "giraffe", "laptop", "bowl", "zebra", "sandwich", "elephant",
];
const ADJS: &[&str] = &["red", "small", "white", "striped", "wooden", "black", "tall", "blue"];
const RELATIONS: &[(&str, &str)] = &[
    ("next to the table", "table"),
    ("near the window", "window"),
    ("with a hat", "hat"),
    ("behind the fence", "fence"),
    ("on the left", "left"),
    ("in front of the door", "door"),
];

fn query(rng: &mut ChaCha8Rng, noun: &str) -> (String, &'static str) {
    let det = ["the", "a", "the"][rng.random_range(0..3)];
    let adj = ADJS[rng.random_range(0..ADJS.len())];
    let (rel, rel_noun) = RELATIONS[rng.random_range(0..RELATIONS.len())];
    (format!("{det} {adj} {noun} {rel}"), rel_noun)
}

fn gd_record(
    id: &str,
    b: [f64; 4],
    label: &str,
    noun: &str,
    noun_score: f64,
    rel_noun: &str,
    rng: &mut ChaCha8Rng,
) -> DetectionRecord {
    DetectionRecord {
        sample_id: id.into(),
        source: "gdrec".into(),
        bbox: quad(b),
        label: label.into(),
        score: Some(r2(rng.random_range(0.2..0.9))),
        token_scores: Some(vec![
            TokenScore(noun.into(), noun_score),
            TokenScore(rel_noun.into(), r2(rng.random_range(0.05..0.6))),
        ]),
    }
}

fn flo_record(id: &str, b: [f64; 4], label: &str) -> DetectionRecord {
    DetectionRecord {
        sample_id: id.into(),
        source: "flo2".into(),
        bbox: quad(b),
        label: label.into(),
        score: None,
        token_scores: None,
    }
}

/// What the scripted model does for one validation sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    /// Answers the index of a box overlapping ground truth.
    Correct,
    /// Answers the index of a box disjoint from ground truth.
    Wrong,
    /// No candidate overlaps ground truth; answers a disjoint box.
    NoTarget,
    /// Text without a usable integer.
    Garbage,
    /// An integer past the last box.
    OutOfRange,
    /// The endpoint refuses the request.
    Error,
}

impl Kind {
    pub fn falls_back(self) -> bool {
        matches!(self, Kind::Garbage | Kind::OutOfRange | Kind::Error)
    }
}

#[derive(Debug, Clone)]
pub struct Script {
    pub gt: [f64; 4],
    pub kind: Kind,
    pub variant: usize,
}

pub struct E2e {
    pub samples: Vec<RefSample>,
    pub gdrec: DetectionMap,
    pub flo2: DetectionMap,
    /// Keyed by query text, which is unique per sample.
    pub script: HashMap<String, Script>,
    pub expected: EvalReport,
    pub train_expect: TrainExpect,
}

/// How the train part splits under the default datagen filters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainExpect {
    pub samples: usize,
    pub kept: usize,
    pub missing_detections: usize,
    pub no_candidates: usize,
    pub dropped_low_iou: usize,
    pub dropped_few_boxes: usize,
}

pub const E2E_VAL: usize = 50;
pub const E2E_TRAIN: usize = 80;

fn val_kinds(rng: &mut ChaCha8Rng) -> Vec<(Kind, bool)> {
    // (kind, top-score fallback lands on the target)
    let mut v = Vec::new();
    v.extend(std::iter::repeat_n((Kind::Correct, true), 24));
    v.extend(std::iter::repeat_n((Kind::Wrong, true), 10));
    v.extend(std::iter::repeat_n((Kind::NoTarget, false), 3));
    v.extend([(Kind::Garbage, true); 4]);
    v.extend([(Kind::Garbage, false); 2]);
    v.extend([(Kind::OutOfRange, true); 2]);
    v.extend([(Kind::OutOfRange, false); 2]);
    v.extend([(Kind::Error, true); 2]);
    v.extend([(Kind::Error, false); 1]);
    assert_eq!(v.len(), E2E_VAL);
    v.shuffle(rng);
    v
}

/// Detections for one sample. Returns (gdrec, flo2) records.
fn sample_detections(
    rng: &mut ChaCha8Rng,
    id: &str,
    gt: [f64; 4],
    noun: &str,
    rel_noun: &str,
    has_target: bool,
    target_on_top: bool,
) -> (Vec<DetectionRecord>, Vec<DetectionRecord>) {
    let mut gd = Vec::new();
    let same = rng.random_range(1..3);
    let other = rng.random_range(1..4);
    let mut slots: Vec<DetectionRecord> = Vec::new();
    for k in 0..same {
        // with the target below, the first same-category distractor wins on score
        let s = if has_target && !target_on_top && k == 0 {
            r2(rng.random_range(0.75..0.85))
        } else {
            r2(rng.random_range(0.3..0.7))
        };
        let b = away_from(rng, gt);
        slots.push(gd_record(id, b, noun, noun, s, rel_noun, rng));
    }
    for _ in 0..other {
        let label = NOUNS[rng.random_range(0..NOUNS.len())];
        let label = if label == noun { "person" } else { label };
        let b = away_from(rng, gt);
        let s = r2(rng.random_range(0.02..0.14));
        slots.push(gd_record(id, b, label, noun, s, rel_noun, rng));
    }
    if has_target {
        let s = if target_on_top {
            r2(rng.random_range(0.8..0.95))
        } else {
            r2(rng.random_range(0.35..0.45))
        };
        let b = jitter(rng, gt);
        let pos = rng.random_range(0..=slots.len());
        slots.insert(pos, gd_record(id, b, noun, noun, s, rel_noun, rng));
    }
    gd.extend(slots);

    let mut flo = Vec::new();
    if has_target && rng.random_bool(0.6) {
        flo.push(flo_record(id, jitter(rng, gt), noun));
    }
    for _ in 0..rng.random_range(1..3) {
        flo.push(flo_record(id, away_from(rng, gt), "object"));
    }
    flo.shuffle(rng);
    (gd, flo)
}

fn sample(id: &str, query: String, gt: [f64; 4], split: Split) -> RefSample {
    RefSample {
        sample_id: id.into(),
        image_id: format!("img-{id}"),
        image_width: IMAGE_W,
        image_height: IMAGE_H,
        query,
        gt_box: quad(gt),
        split,
    }
}

pub fn e2e() -> E2e {
    let mut rng = ChaCha8Rng::seed_from_u64(20_240_917);
    let mut samples = Vec::new();
    let mut gdrec = DetectionMap::new();
    let mut flo2 = DetectionMap::new();
    let mut script = HashMap::new();

    let kinds = val_kinds(&mut rng);
    let mut n_correct = 0;
    let mut fallbacks = 0;
    let mut oracle_hits = 0;
    for (i, (kind, on_top)) in kinds.into_iter().enumerate() {
        let id = format!("val-{i:03}");
        let noun = NOUNS[rng.random_range(0..NOUNS.len())];
        let (q, rel_noun) = query(&mut rng, noun);
        let q = format!("{q} {i}");
        let gt = random_gt(&mut rng);
        let has_target = kind != Kind::NoTarget;
        let (gd, flo) = sample_detections(&mut rng, &id, gt, noun, rel_noun, has_target, on_top);
        gdrec.insert(id.clone(), gd);
        flo2.insert(id.clone(), flo);
        samples.push(sample(&id, q.clone(), gt, Split::Val));
        script.insert(
            q,
            Script {
                gt,
                kind,
                variant: rng.random_range(0..5),
            },
        );
        if has_target {
            oracle_hits += 1;
        }
        match kind {
            Kind::Correct => n_correct += 1,
            k if k.falls_back() => {
                fallbacks += 1;
                if on_top {
                    n_correct += 1;
                }
            }
            _ => {}
        }
    }

    let mut train_expect = TrainExpect {
        samples: E2E_TRAIN,
        ..Default::default()
    };
    for i in 0..E2E_TRAIN {
        let id = format!("train-{i:03}");
        let noun = NOUNS[rng.random_range(0..NOUNS.len())];
        let (q, rel_noun) = query(&mut rng, noun);
        let gt = random_gt(&mut rng);
        samples.push(sample(&id, format!("{q} {i}"), gt, Split::Train));
        match i % 20 {
            // no detections in either file
            3 => train_expect.missing_detections += 1,
            // only other-category boxes, all rescored below threshold
            7 => {
                let b = away_from(&mut rng, gt);
                gdrec.insert(id.clone(), vec![gd_record(&id, b, "chair", noun, 0.05, rel_noun, &mut rng)]);
                train_expect.no_candidates += 1;
            }
            // nothing near the ground truth
            11 => {
                let (gd, flo) = sample_detections(&mut rng, &id, gt, noun, rel_noun, false, false);
                gdrec.insert(id.clone(), gd);
                flo2.insert(id.clone(), flo);
                train_expect.dropped_low_iou += 1;
            }
            // a single surviving box
            15 => {
                let b = jitter(&mut rng, gt);
                gdrec.insert(id.clone(), vec![gd_record(&id, b, noun, noun, 0.9, rel_noun, &mut rng)]);
                train_expect.dropped_few_boxes += 1;
            }
            _ => {
                let on_top = rng.random_bool(0.5);
                let (gd, flo) = sample_detections(&mut rng, &id, gt, noun, rel_noun, true, on_top);
                gdrec.insert(id.clone(), gd);
                flo2.insert(id.clone(), flo);
                train_expect.kept += 1;
            }
        }
    }
    gdrec.retain(|_, v| !v.is_empty());
    flo2.retain(|_, v| !v.is_empty());

    let llm = E2E_VAL - fallbacks;
    let mut breakdown = BTreeMap::new();
    breakdown.insert(SelectionMethod::Llm, llm);
    breakdown.insert(SelectionMethod::LlmFallback, fallbacks);
    let expected = EvalReport {
        run_id: "e2e-val".into(),
        split: Some(Split::Val),
        n_samples: E2E_VAL,
        n_correct,
        p_at_1: n_correct as f64 / E2E_VAL as f64,
        iou_threshold: 0.5,
        method_breakdown: breakdown,
        abstentions: 0,
        fallback_rate: fallbacks as f64 / E2E_VAL as f64,
        oracle_upper_bound: Some(oracle_hits as f64 / E2E_VAL as f64),
    };
    E2e {
        samples,
        gdrec,
        flo2,
        script,
        expected,
        train_expect,
    }
}

/// Writes dataset, per-source detections and the expected report to `dir`.
pub fn write_e2e(dir: &Path, fx: &E2e) {
    std::fs::create_dir_all(dir).unwrap();
    write_dataset(&dir.join("dataset.jsonl"), &fx.samples).unwrap();
    write_detections(&dir.join("gdrec.jsonl"), &fx.gdrec).unwrap();
    write_detections(&dir.join("flo2.jsonl"), &fx.flo2).unwrap();
    let mut text = serde_json::to_string_pretty(&fx.expected).unwrap();
    text.push('\n');
    std::fs::write(dir.join("expected_report.json"), text).unwrap();
}

/// Box lines of a rendered prompt, parsed back to coordinates.
pub fn prompt_boxes(text: &str) -> Vec<[f64; 4]> {
    text.lines()
        .filter(|l| l.starts_with("* In box "))
        .map(|l| {
            let inner = l
                .split("coordinates '[")
                .nth(1)
                .and_then(|r| r.split("]'").next())
                .expect("box line coordinates");
            let v: Vec<f64> = inner.split(", ").map(|x| x.parse().unwrap()).collect();
            [v[0], v[1], v[2], v[3]]
        })
        .collect()
}

pub fn prompt_query(text: &str) -> &str {
    let line = text
        .lines()
        .find(|l| l.starts_with("Which box is best matching '"))
        .expect("question line");
    &line["Which box is best matching '".len()..line.len() - "' ?".len()]
}

/// The scripted model: the reply for a prompt, or `None` to refuse it.
pub fn scripted_answer(text: &str, script: &HashMap<String, Script>) -> Option<String> {
    let s = script.get(prompt_query(text)).expect("scripted query");
    let boxes = prompt_boxes(text);
    let pick = |hit: bool| {
        boxes
            .iter()
            .position(|b| if hit { ref_iou(*b, s.gt) >= 0.7 } else { overlap(*b, s.gt) == 0.0 })
            .expect("fixture guarantees a matching box")
    };
    let styles = ["{k}", "Box {k}.", "Answer: {k}", " {k}\n", "{k}. That one."];
    let render = |k: usize| styles[s.variant].replace("{k}", &k.to_string());
    match s.kind {
        Kind::Correct => Some(render(pick(true))),
        Kind::Wrong | Kind::NoTarget => Some(render(pick(false))),
        Kind::Garbage => Some(
            ["the plate one", "I cannot tell.", "", "box two", "2.5"][s.variant].to_string(),
        ),
        Kind::OutOfRange => {
            Some(["57", "Answer: 12", "99", "100000000000000000000000", "Box 31"][s.variant].into())
        }
        Kind::Error => None,
    }
}

pub mod stub {
    use super::*;
    use axum::extract::State;
    use axum::http::StatusCode;
    use axum::routing::post;
    use axum::{Json, Router};
    use serde_json::{json, Value};

    type Shared = Arc<HashMap<String, Script>>;

    async fn handler(State(script): State<Shared>, Json(body): Json<Value>) -> (StatusCode, Json<Value>) {
        let text: Vec<&str> = body["messages"]
            .as_array()
            .unwrap()
            .iter()
            .map(|m| m["content"].as_str().unwrap())
            .collect();
        match scripted_answer(&text.join("\n"), &script) {
            Some(answer) => (
                StatusCode::OK,
                Json(json!({"choices": [{"index": 0, "message": {"role": "assistant", "content": answer}}]})),
            ),
            None => (StatusCode::BAD_REQUEST, Json(json!({"error": "refused"}))),
        }
    }

    /// Serves the script on a background thread; returns the route URL.
    pub fn spawn(script: HashMap<String, Script>) -> String {
        let (tx, rx) = std::sync::mpsc::channel();
        std::thread::spawn(move || {
            let rt = tokio::runtime::Builder::new_current_thread()
                .enable_all()
                .build()
                .unwrap();
            rt.block_on(async move {
                let app = Router::new()
                    .route("/v1/chat/completions", post(handler))
                    .with_state(Arc::new(script));
                let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
                tx.send(listener.local_addr().unwrap()).unwrap();
                axum::serve(listener, app).await.unwrap();
            });
        });
        let addr = rx.recv().unwrap();
        format!("http://{addr}/v1/chat/completions")
    }
}

/// Many-box detector output: per sample, `above` boxes score at least 0.15
/// and the rest fall below. Returns samples, detections and `above` counts.
pub fn gd_many(n: usize, seed: u64) -> (Vec<RefSample>, DetectionMap, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::new();
    let mut det = DetectionMap::new();
    let mut above_counts = Vec::new();
    for i in 0..n {
        let id = format!("gd-{i:04}");
        let gt = random_gt(&mut rng);
        samples.push(sample(&id, format!("the object {i}"), gt, Split::Val));
        // a small share of images has at most one confident box
        let above = if rng.random_bool(0.03) {
            rng.random_range(0..2)
        } else {
            rng.random_range(2..45)
        };
        let below = rng.random_range(10..90);
        let mut recs = Vec::new();
        for k in 0..above + below {
            let s = if k < above {
                r2(rng.random_range(0.15..0.95))
            } else {
                r2(rng.random_range(0.0..0.14))
            };
            let x = r2(rng.random_range(0.0..600.0));
            let y = r2(rng.random_range(0.0..440.0));
            recs.push(DetectionRecord {
                sample_id: id.clone(),
                source: "gd".into(),
                bbox: quad([x, y, r2(x + rng.random_range(5.0..40.0)), r2(y + rng.random_range(5.0..40.0))]),
                label: "object".into(),
                score: Some(s),
                token_scores: None,
            });
        }
        recs.shuffle(&mut rng);
        det.insert(id, recs);
        above_counts.push(above);
    }
    (samples, det, above_counts)
}
