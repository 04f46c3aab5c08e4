use std::collections::BTreeMap;

use proptest::prelude::*;
use proptest::sample::subsequence;

use recwrap::dataset::{index_by_id, load_dataset, split_counts, write_dataset, RefSample, Split};
use recwrap::detections::{
    ensemble, filter_by_score, load_detections, truncate, write_detections, DetectionMap,
    DetectionRecord, TokenScore,
};
use recwrap::eval::{iou, oracle_upper_bound, p_at_1};
use recwrap::gateway::LlmResponse;
use recwrap::jsonl::LoadMode;
use recwrap::prompt::{build_prompt, PromptOptions, BOX_LINE_PREFIX};
use recwrap::selection::{
    baseline_top_score, oracle_best_iou, parse_answer, select, FallbackPolicy, SelectionMethod,
    SelectionResult,
};
use recwrap::BBox;

fn bbox() -> impl Strategy<Value = BBox> {
    (0.0..900.0f64, 0.0..900.0f64, 0.5..300.0f64, 0.5..300.0f64)
        .prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h).unwrap())
}

fn record() -> impl Strategy<Value = DetectionRecord> {
    (
        bbox(),
        prop::option::weighted(0.85, 0.0..=1.0f64),
        prop::sample::select(vec!["cat", "dog", "man's hat", "bowl"]),
        prop::sample::select(vec!["gd", "flo2"]),
    )
        .prop_map(|(b, score, label, source)| DetectionRecord {
            sample_id: "s".into(),
            source: source.into(),
            bbox: b,
            label: label.into(),
            score,
            token_scores: None,
        })
}

fn records(max: usize) -> impl Strategy<Value = Vec<DetectionRecord>> {
    prop::collection::vec(record(), 1..max)
}

fn key(r: &DetectionRecord) -> String {
    serde_json::to_string(r).unwrap()
}

fn sorted_keys(rs: &[DetectionRecord]) -> Vec<String> {
    let mut k: Vec<String> = rs.iter().map(key).collect();
    k.sort();
    k
}

fn sample(id: &str, gt: BBox, split: Split) -> RefSample {
    RefSample {
        sample_id: id.into(),
        image_id: format!("img-{id}"),
        image_width: 1300,
        image_height: 1300,
        query: format!("the thing {id}"),
        gt_box: gt,
        split,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn iou_symmetric_bounded(a in bbox(), b in bbox()) {
        let ab = iou(&a, &b);
        prop_assert_eq!(ab, iou(&b, &a));
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
        if a.intersection_area(&b) == 0.0 {
            prop_assert_eq!(ab, 0.0);
        }
    }

    #[test]
    fn filter_idempotent_and_monotone(rs in records(30), t1 in 0.0..=1.0f64, t2 in 0.0..=1.0f64) {
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let once = filter_by_score(&rs, lo);
        prop_assert_eq!(filter_by_score(&once, lo), once.clone());
        let strict = filter_by_score(&rs, hi);
        prop_assert!(strict.len() <= once.len());
        // the stricter result is a subsequence of the looser one
        let mut it = once.iter();
        for r in &strict {
            prop_assert!(it.any(|o| o == r));
        }
        let scoreless = rs.iter().filter(|r| r.score.is_none()).count();
        prop_assert_eq!(strict.iter().filter(|r| r.score.is_none()).count(), scoreless);
    }

    #[test]
    fn truncate_keeps_top_k_in_order(rs in records(40), k in 1usize..25) {
        let set = ensemble("s", &[("gd".into(), rs.clone())]).unwrap();
        let out = truncate(&set, k);
        prop_assert_eq!(out.len(), rs.len().min(k));
        // order preserved: kept records appear as a subsequence
        let mut it = rs.iter();
        for r in out.candidates() {
            prop_assert!(it.any(|o| o == r));
        }
        // no dropped record outranks a kept one
        let rank = |r: &DetectionRecord| r.score.map_or(-1.0, |s| s);
        let kept_min = out.candidates().iter().map(rank).fold(f64::INFINITY, f64::min);
        let mut dropped = rs.clone();
        for r in out.candidates() {
            let pos = dropped.iter().position(|d| d == r).unwrap();
            dropped.remove(pos);
        }
        for d in &dropped {
            prop_assert!(rank(d) <= kept_min);
        }
    }

    #[test]
    fn ensemble_is_concatenation(a in records(10), b in records(10)) {
        let set = ensemble("s", &[("gd".into(), a.clone()), ("flo2".into(), b.clone())]).unwrap();
        let mut both = a.clone();
        both.extend(b.clone());
        prop_assert_eq!(set.candidates(), both.as_slice());
        let swapped = ensemble("s", &[("flo2".into(), b), ("gd".into(), a)]).unwrap();
        prop_assert_eq!(sorted_keys(set.candidates()), sorted_keys(swapped.candidates()));
        prop_assert_eq!(set.provenance(), ["gd".to_string(), "flo2".to_string()]);
    }

    #[test]
    fn prompt_lines_and_coordinates(rs in records(21), decimals in 0u8..4, scores: bool) {
        let set = ensemble("s", &[("gd".into(), rs.clone())]).unwrap();
        let opts = PromptOptions { include_scores: scores, coord_decimals: decimals, ..Default::default() };
        let p = build_prompt(&set, "the cat on the left", &opts).unwrap();
        let lines: Vec<&str> = p.prompt_text.split('\n').collect();
        prop_assert_eq!(lines.len(), rs.len() + 5);
        let tol = 0.5 * 10f64.powi(-(decimals as i32)) + 1e-9;
        for (k, line) in lines[2..2 + rs.len()].iter().enumerate() {
            let prefix = format!("{BOX_LINE_PREFIX}{k}: ");
            prop_assert!(line.starts_with(&prefix));
            prop_assert!(line.ends_with(','));
            let inner = line.split("coordinates '[").nth(1).unwrap().split("]'").next().unwrap();
            let parsed: Vec<f64> = inner.split(", ").map(|v| v.parse().unwrap()).collect();
            for (got, want) in parsed.iter().zip(rs[k].bbox.coords()) {
                prop_assert!((got - want).abs() <= tol, "{} vs {}", got, want);
            }
            prop_assert_eq!(line.contains(" with score "), scores && rs[k].score.is_some());
        }
    }

    #[test]
    fn selectors_are_permutation_equivariant(
        boxes in prop::collection::vec(bbox(), 1..15),
        gt in bbox(),
        perm_seed in any::<u64>(),
    ) {
        let n = boxes.len();
        let rs: Vec<DetectionRecord> = boxes
            .iter()
            .enumerate()
            // distinct scores so the baseline has no ties
            .map(|(i, b)| DetectionRecord {
                sample_id: "s".into(),
                source: "gd".into(),
                bbox: *b,
                label: "x".into(),
                score: Some((i as f64 + 1.0) / (n as f64 + 1.0)),
                token_scores: None,
            })
            .collect();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut state = perm_seed;
        for i in (1..n).rev() {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            perm.swap(i, (state >> 33) as usize % (i + 1));
        }
        let permuted: Vec<DetectionRecord> = perm.iter().map(|&i| rs[i].clone()).collect();
        let a = ensemble("s", &[("gd".into(), rs.clone())]).unwrap();
        let b = ensemble("s", &[("gd".into(), permuted)]).unwrap();

        prop_assert_eq!(baseline_top_score(&a).chosen_box, baseline_top_score(&b).chosen_box);

        let oa = oracle_best_iou(&a, &gt);
        let ob = oracle_best_iou(&b, &gt);
        let best = oa.chosen_box.unwrap();
        let tied = boxes
            .iter()
            .filter(|x| iou(x, &gt) == iou(&best, &gt) && x.center_distance(&gt) == best.center_distance(&gt))
            .count();
        if tied == 1 {
            prop_assert_eq!(oa.chosen_box, ob.chosen_box);
        } else {
            prop_assert_eq!(iou(&ob.chosen_box.unwrap(), &gt), iou(&best, &gt));
        }
        // brute-force check of the oracle choice
        for x in &boxes {
            prop_assert!(iou(&best, &gt) >= iou(x, &gt));
        }
    }

    #[test]
    fn p_at_1_invariants(
        cases in prop::collection::vec((bbox(), prop::collection::vec(bbox(), 1..8), any::<u32>()), 1..40),
        rotate in any::<usize>(),
        t1 in 0.0..=1.0f64,
        t2 in 0.0..=1.0f64,
    ) {
        let samples: Vec<RefSample> = cases
            .iter()
            .enumerate()
            .map(|(i, (gt, _, _))| sample(&format!("s{i}"), *gt, Split::Val))
            .collect();
        let index = index_by_id(&samples);
        let mut prompts = Vec::new();
        let mut selections = Vec::new();
        for (i, (_, boxes, pick)) in cases.iter().enumerate() {
            let id = format!("s{i}");
            let rs: Vec<DetectionRecord> = boxes
                .iter()
                .map(|b| DetectionRecord {
                    sample_id: id.clone(),
                    source: "gd".into(),
                    bbox: *b,
                    label: "x".into(),
                    score: Some(0.5),
                    token_scores: None,
                })
                .collect();
            let set = ensemble(&id, &[("gd".into(), rs)]).unwrap();
            let k = *pick as usize % boxes.len();
            selections.push(SelectionResult {
                sample_id: id.clone(),
                chosen_index: Some(k),
                chosen_box: Some(boxes[k]),
                method: SelectionMethod::Llm,
                parse_note: None,
            });
            prompts.push(build_prompt(&set, "q", &PromptOptions::default()).unwrap());
        }

        let base = p_at_1("r", &selections, &index, 0.5).unwrap();
        let mut rotated = selections.clone();
        let len = rotated.len();
        rotated.rotate_left(rotate % len);
        prop_assert_eq!(p_at_1("r", &rotated, &index, 0.5).unwrap(), base.clone());
        prop_assert_eq!(base.method_breakdown.values().sum::<usize>(), base.n_samples);

        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let plo = p_at_1("r", &selections, &index, lo).unwrap().p_at_1;
        let phi = p_at_1("r", &selections, &index, hi).unwrap().p_at_1;
        prop_assert!(phi <= plo);

        let oracle = oracle_upper_bound(&prompts, &index, 0.5).unwrap();
        prop_assert!(base.p_at_1 <= oracle);
    }

    #[test]
    fn dataset_round_trip(gts in prop::collection::vec(bbox(), 1..30)) {
        let samples: Vec<RefSample> = gts
            .iter()
            .enumerate()
            .map(|(i, g)| sample(&format!("id{i}"), *g, Split::ALL[i % 3]))
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        write_dataset(&path, &samples).unwrap();
        prop_assert_eq!(load_dataset(&path, None, LoadMode::Strict).unwrap(), samples.clone());
        let train = load_dataset(&path, Some(Split::Train), LoadMode::Strict).unwrap();
        prop_assert_eq!(train.len(), split_counts(&samples)[&Split::Train]);
    }

    #[test]
    fn detections_round_trip(rs in records(20), with_tokens: bool) {
        let mut map = DetectionMap::new();
        for (i, r) in rs.into_iter().enumerate() {
            let id = format!("s{}", i % 4);
            let token_scores = with_tokens.then(|| vec![TokenScore("cat".into(), 0.25)]);
            map.entry(id.clone()).or_default().push(DetectionRecord { sample_id: id, token_scores, ..r });
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("det.jsonl");
        write_detections(&path, &map).unwrap();
        prop_assert_eq!(load_detections(&path, LoadMode::Strict).unwrap(), map);
    }

    #[test]
    fn parse_answer_stays_in_range(raw in ".{0,40}", n in 1usize..30) {
        if let Ok(k) = parse_answer(&raw, n) {
            prop_assert!(k < n);
        }
    }

    #[test]
    fn clean_answers_parse(k in 0usize..50, n in 1usize..50, pre in "(|Box |Answer: | )", post in "(|\\.| |\\n)") {
        let raw = format!("{pre}{k}{post}");
        match parse_answer(&raw, n) {
            Ok(v) => prop_assert_eq!(v, k),
            Err(_) => prop_assert!(k >= n),
        }
    }

    #[test]
    fn select_never_out_of_range(rs in records(10), raw in ".{0,12}", policy in 0u8..3) {
        let set = ensemble("s", &[("gd".into(), rs.clone())]).unwrap();
        let p = build_prompt(&set, "q", &PromptOptions::default()).unwrap();
        let fallback = [FallbackPolicy::TopScore, FallbackPolicy::FirstBox, FallbackPolicy::Abstain][policy as usize];
        let resp = LlmResponse { sample_id: "s".into(), raw_text: raw, latency_ms: 0, attempt_count: 1, error: None };
        let sel = select(&p, &resp, fallback);
        if let Some(k) = sel.chosen_index {
            prop_assert!(k < p.n_boxes());
            prop_assert_eq!(sel.chosen_box, Some(p.index_map[k].bbox));
        } else {
            prop_assert_eq!(fallback, FallbackPolicy::Abstain);
            prop_assert_eq!(sel.method, SelectionMethod::LlmFallback);
        }
    }

    #[test]
    fn subsets_never_beat_supersets_for_the_oracle(boxes in prop::collection::vec(bbox(), 2..10), gt in bbox(), keep in subsequence((0..9usize).collect::<Vec<_>>(), 1..9)) {
        let all: Vec<DetectionRecord> = boxes.iter().map(|b| DetectionRecord {
            sample_id: "s".into(), source: "gd".into(), bbox: *b, label: "x".into(), score: None, token_scores: None,
        }).collect();
        let part: Vec<DetectionRecord> = keep.iter().filter(|&&i| i < all.len()).map(|&i| all[i].clone()).collect();
        prop_assume!(!part.is_empty());
        let full = oracle_best_iou(&ensemble("s", &[("gd".into(), all)]).unwrap(), &gt);
        let sub = oracle_best_iou(&ensemble("s", &[("gd".into(), part)]).unwrap(), &gt);
        prop_assert!(iou(&full.chosen_box.unwrap(), &gt) >= iou(&sub.chosen_box.unwrap(), &gt));
    }
}

/// Split sizes of the RefCOCOg UMD partition survive a write/load cycle
/// at full scale.
#[test]
fn full_scale_split_counts() {
    let sizes = [(Split::Train, 80_512usize), (Split::Val, 4_896), (Split::Test, 9_602)];
    let gt = BBox::new(10.0, 10.0, 50.0, 60.0).unwrap();
    let mut samples = Vec::new();
    for (split, n) in sizes {
        for i in 0..n {
            samples.push(sample(&format!("{split}-{i}"), gt, split));
        }
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("umd.jsonl");
    write_dataset(&path, &samples).unwrap();
    let loaded = load_dataset(&path, None, LoadMode::Strict).unwrap();
    let counts = split_counts(&loaded);
    let expected: BTreeMap<Split, usize> = sizes.into_iter().collect();
    assert_eq!(counts, expected);
    assert_eq!(loaded.len(), 95_010);
    let val = load_dataset(&path, Some(Split::Val), LoadMode::Strict).unwrap();
    assert_eq!(val.len(), 4_896);
}
