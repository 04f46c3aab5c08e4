use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;
use tracing::info;

use recwrap::dataset::{index_by_id, load_dataset, RefSample, Split};
use recwrap::detections::{load_detections, merge_maps, write_detections, DetectionMap};
use recwrap::eval::{
    oracle_upper_bound, p_at_1, training_curve, write_curve_csv, EvalReport,
};
use recwrap::gateway::{capture_entries, write_capture, Capture, Gateway, HttpTransport};
use recwrap::jsonl::{read_jsonl, write_jsonl, LoadMode};
use recwrap::manifest::{FileHash, RunManifest};
use recwrap::pipeline::build_prompt_batch;
use recwrap::prompt::{estimate_tokens, PromptRecord};
use recwrap::selection::{
    baseline_for_prompt, oracle_for_prompt, select, FallbackPolicy, SelectionResult,
};
use recwrap::sft::{
    corpus_text, generate_corpus, meta_path, meta_text, shard_and_shuffle, write_shards,
};
use recwrap::subject::{load_overrides, SubjectOverrides};

use crate::profile::RunProfile;

#[derive(Debug, Parser)]
#[command(name = "recwrap", version, about = "Detector boxes in, one chosen box out")]
pub struct Cli {
    /// TOML run profile; flags override its values.
    #[arg(long, global = true)]
    pub profile: Option<PathBuf>,
    /// Skip malformed input records with a warning instead of failing.
    #[arg(long, global = true)]
    pub skip_invalid: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render one prompt per sample from a dataset and detection files.
    BuildPrompts(BuildPromptsArgs),
    /// Select a box for every prompt, by model, baseline or oracle.
    Infer(InferArgs),
    /// Score selections against ground truth.
    Eval(EvalArgs),
    /// Build the fine-tuning corpus from train samples.
    Datagen(DatagenArgs),
    /// Merge detection files from several detectors.
    Ensemble(EnsembleArgs),
    /// Collect per-checkpoint reports into a training curve CSV.
    Curve(CurveArgs),
    /// Re-check the hashes recorded in run manifests.
    Verify(VerifyArgs),
}

#[derive(Debug, Args)]
pub struct InputArgs {
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Detection file; repeat to ensemble several detectors.
    #[arg(long = "detections")]
    pub detections: Vec<PathBuf>,
    /// JSONL of `{sample_id, tokens}` replacing the built-in subject chunker.
    #[arg(long)]
    pub subject_override: Option<PathBuf>,
    #[arg(long)]
    pub max_boxes: Option<usize>,
    #[arg(long)]
    pub score_threshold: Option<f64>,
}

#[derive(Debug, Args)]
pub struct BuildPromptsArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[arg(long, value_parser = parse_split)]
    pub split: Option<Split>,
    /// Warn about prompts whose estimated token count exceeds this.
    #[arg(long)]
    pub token_budget: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Selector {
    Llm,
    Baseline,
    Oracle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Fallback {
    TopScore,
    FirstBox,
    Abstain,
}

impl From<Fallback> for FallbackPolicy {
    fn from(f: Fallback) -> Self {
        match f {
            Fallback::TopScore => FallbackPolicy::TopScore,
            Fallback::FirstBox => FallbackPolicy::FirstBox,
            Fallback::Abstain => FallbackPolicy::Abstain,
        }
    }
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub prompts: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "llm")]
    pub selector: Selector,
    /// Answer from a capture file instead of the endpoint.
    #[arg(long)]
    pub replay: Option<PathBuf>,
    /// Where a live run records its responses. Defaults to
    /// `<out>.capture.jsonl`.
    #[arg(long)]
    pub capture: Option<PathBuf>,
    /// Ground truth, needed by the oracle selector.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub endpoint: Option<String>,
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub max_in_flight: Option<usize>,
    #[arg(long, value_enum)]
    pub fallback: Option<Fallback>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub selections: PathBuf,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Prompt dump the selections were made on; enables the oracle bound.
    #[arg(long)]
    pub prompts: Option<PathBuf>,
    #[arg(long)]
    pub run_id: Option<String>,
    #[arg(long)]
    pub iou_threshold: Option<f64>,
    /// Report JSON; the table always goes to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DatagenArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub shard_size: Option<usize>,
    #[arg(long)]
    pub min_label_iou: Option<f64>,
    #[arg(long)]
    pub min_boxes: Option<usize>,
    /// Profile used at inference; any prompt-shaping difference is an error.
    #[arg(long)]
    pub inference_profile: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EnsembleArgs {
    #[arg(long = "detections", required = true)]
    pub detections: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CurveArgs {
    /// `CHECKPOINT_ID:SEEN_SAMPLES:REPORT_JSON`; repeat per checkpoint.
    #[arg(long = "point", required = true)]
    pub points: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(required = true)]
    pub manifests: Vec<PathBuf>,
}

fn parse_split(s: &str) -> Result<Split, String> {
    s.parse::<Split>().map_err(|e| e.to_string())
}

/// What a successful command reports back.
#[derive(Debug, Default)]
pub struct Summary {
    pub warnings: usize,
}

struct Ctx {
    profile: RunProfile,
    mode: LoadMode,
}

pub fn execute(cli: Cli) -> Result<Summary> {
    let profile = RunProfile::load_or_default(cli.profile.as_deref())?;
    let mut ctx = Ctx {
        profile,
        mode: if cli.skip_invalid {
            LoadMode::SkipInvalid
        } else {
            LoadMode::Strict
        },
    };
    match cli.command {
        Command::BuildPrompts(a) => build_prompts(&mut ctx, a),
        Command::Infer(a) => infer(&mut ctx, a),
        Command::Eval(a) => eval(&mut ctx, a),
        Command::Datagen(a) => datagen(&mut ctx, a),
        Command::Ensemble(a) => ensemble(&ctx, a),
        Command::Curve(a) => curve(&ctx, a),
        Command::Verify(a) => verify(a),
    }
}

struct Inputs {
    dataset: PathBuf,
    detection_paths: Vec<PathBuf>,
    detections: DetectionMap,
    overrides: Option<SubjectOverrides>,
    override_path: Option<PathBuf>,
}

impl Inputs {
    fn paths(&self) -> Vec<&Path> {
        let mut out = vec![self.dataset.as_path()];
        out.extend(self.detection_paths.iter().map(PathBuf::as_path));
        out.extend(self.override_path.as_deref());
        out
    }
}

fn dataset_path(ctx: &Ctx, flag: Option<PathBuf>) -> Result<PathBuf> {
    flag.or_else(|| ctx.profile.paths.dataset.clone())
        .ok_or_else(|| anyhow!("no dataset: pass --dataset or set paths.dataset in the profile"))
}

fn load_inputs(ctx: &mut Ctx, a: InputArgs) -> Result<Inputs> {
    if let Some(m) = a.max_boxes {
        ctx.profile.candidates.max_boxes = m;
    }
    if let Some(t) = a.score_threshold {
        ctx.profile.candidates.score_threshold = Some(t);
    }
    if let Some(p) = &a.subject_override {
        ctx.profile.paths.subject_overrides = Some(p.clone());
    }
    ctx.profile.validate()?;

    let dataset = dataset_path(ctx, a.dataset)?;
    let detection_paths = if a.detections.is_empty() {
        ctx.profile.paths.detections.clone()
    } else {
        a.detections
    };
    ensure!(
        !detection_paths.is_empty(),
        "no detections: pass --detections or set paths.detections in the profile"
    );
    let maps = detection_paths
        .iter()
        .map(|p| load_detections(p, ctx.mode).with_context(|| format!("loading {}", p.display())))
        .collect::<Result<Vec<_>>>()?;
    let override_path = ctx.profile.paths.subject_overrides.clone();
    let overrides = override_path
        .as_deref()
        .map(|p| load_overrides(p).with_context(|| format!("loading {}", p.display())))
        .transpose()?;
    Ok(Inputs {
        dataset,
        detection_paths,
        detections: merge_maps(&maps),
        overrides,
        override_path,
    })
}

fn load_samples(ctx: &Ctx, path: &Path, split: Option<Split>) -> Result<Vec<RefSample>> {
    load_dataset(path, split, ctx.mode).with_context(|| format!("loading {}", path.display()))
}

/// Writes `<primary>.manifest.json`. Paths under the manifest's directory
/// are stored relative to it so a moved run directory still verifies.
fn write_manifest(
    command: &str,
    profile: serde_json::Value,
    inputs: &[&Path],
    outputs: &[&Path],
    warnings: usize,
) -> Result<PathBuf> {
    let primary = outputs[0];
    let path = RunManifest::path_for(primary);
    let mut m = RunManifest::new(command, profile, inputs, outputs, warnings)?;
    let base = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."))
        .canonicalize()?;
    let relativize = |f: &mut FileHash| -> Result<()> {
        let abs = f.path.canonicalize()?;
        f.path = abs.strip_prefix(&base).map(Path::to_path_buf).unwrap_or(abs);
        Ok(())
    };
    for f in m.inputs.iter_mut().chain(m.outputs.iter_mut()) {
        relativize(f)?;
    }
    m.write(&path)?;
    Ok(path)
}

fn build_prompts(ctx: &mut Ctx, a: BuildPromptsArgs) -> Result<Summary> {
    let inputs = load_inputs(ctx, a.input)?;
    let samples = load_samples(ctx, &inputs.dataset, a.split)?;
    let opts = ctx.profile.pipeline(&inputs.detections);
    let batch = build_prompt_batch(&samples, &inputs.detections, inputs.overrides.as_ref(), &opts)
        .with_context(|| format!("building prompts for {} samples", samples.len()))?;
    write_jsonl(&a.out, &batch.prompts)?;

    let mut warnings = batch.warnings();
    if !batch.missing.is_empty() {
        eprintln!("warning: {} sample(s) have no detections", batch.missing.len());
    }
    if !batch.no_candidates.is_empty() {
        eprintln!(
            "warning: {} sample(s) have no candidates after filtering",
            batch.no_candidates.len()
        );
    }
    if let Some(budget) = a.token_budget {
        let over = batch.prompts.iter().filter(|p| estimate_tokens(p) > budget).count();
        if over > 0 {
            eprintln!("warning: {over} prompt(s) may exceed {budget} tokens");
            warnings += over;
        }
    }
    let profile = json!({"profile": ctx.profile.to_json(), "resolved": opts});
    write_manifest("build-prompts", profile, &inputs.paths(), &[&a.out], warnings)?;
    eprintln!(
        "{} prompts from {} samples -> {}",
        batch.prompts.len(),
        samples.len(),
        a.out.display()
    );
    Ok(Summary { warnings })
}

fn infer(ctx: &mut Ctx, a: InferArgs) -> Result<Summary> {
    let gw = &mut ctx.profile.gateway;
    if let Some(e) = a.endpoint {
        gw.endpoint_url = e;
    }
    if let Some(m) = a.model {
        gw.model_name = m;
    }
    if let Some(n) = a.max_in_flight {
        gw.max_in_flight = n;
    }
    if let Some(f) = a.fallback {
        ctx.profile.selection.fallback = f.into();
    }
    ctx.profile.validate()?;
    let prompts: Vec<PromptRecord> =
        read_jsonl(&a.prompts).with_context(|| format!("loading {}", a.prompts.display()))?;
    let mut inputs: Vec<PathBuf> = vec![a.prompts.clone()];
    let mut extra_outputs: Vec<PathBuf> = Vec::new();

    let selections: Vec<SelectionResult> = match a.selector {
        Selector::Baseline => prompts.iter().map(baseline_for_prompt).collect(),
        Selector::Oracle => {
            let path = dataset_path(ctx, a.dataset)?;
            let samples = load_samples(ctx, &path, None)?;
            let index = index_by_id(&samples);
            inputs.push(path);
            prompts
                .iter()
                .map(|p| {
                    let s = index
                        .get(p.sample_id.as_str())
                        .ok_or_else(|| anyhow!("sample `{}` is not in the dataset", p.sample_id))?;
                    Ok(oracle_for_prompt(p, &s.gt_box))
                })
                .collect::<Result<_>>()?
        }
        Selector::Llm => {
            let config = ctx.profile.gateway.clone();
            let responses = match &a.replay {
                Some(path) => {
                    let capture = Capture::load(path)?;
                    inputs.push(path.clone());
                    capture.replay_batch(&prompts, &config)
                }
                None => {
                    let transport = HttpTransport::from_config(&config)?;
                    let gateway = Gateway::new(config.clone(), transport)?;
                    let rt = tokio::runtime::Runtime::new()?;
                    let responses = rt.block_on(gateway.complete_batch(&prompts));
                    let capture_path = a.capture.clone().unwrap_or_else(|| {
                        let mut name = a.out.file_name().unwrap_or_default().to_os_string();
                        name.push(".capture.jsonl");
                        a.out.with_file_name(name)
                    });
                    write_capture(&capture_path, &capture_entries(&prompts, &responses, &config))?;
                    info!("captured {} responses to {}", responses.len(), capture_path.display());
                    extra_outputs.push(capture_path);
                    responses
                }
            };
            let fallback = ctx.profile.selection.fallback;
            prompts
                .iter()
                .zip(&responses)
                .map(|(p, r)| select(p, r, fallback))
                .collect()
        }
    };
    write_jsonl(&a.out, &selections)?;

    let fallbacks = selections.iter().filter(|s| s.parse_note.is_some()).count();
    if fallbacks > 0 {
        eprintln!("warning: {fallbacks} answer(s) fell back");
    }
    let mut outputs: Vec<&Path> = vec![&a.out];
    outputs.extend(extra_outputs.iter().map(PathBuf::as_path));
    let input_refs: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
    let profile = json!({
        "profile": ctx.profile.to_json(),
        "selector": format!("{:?}", a.selector).to_lowercase(),
        "replay": a.replay.is_some(),
    });
    write_manifest("infer", profile, &input_refs, &outputs, fallbacks)?;
    eprintln!("{} selections -> {}", selections.len(), a.out.display());
    Ok(Summary {
        warnings: fallbacks,
    })
}

fn eval(ctx: &mut Ctx, a: EvalArgs) -> Result<Summary> {
    if let Some(t) = a.iou_threshold {
        ctx.profile.eval.iou_threshold = t;
    }
    ctx.profile.validate()?;
    let threshold = ctx.profile.eval.iou_threshold;
    let dataset = dataset_path(ctx, a.dataset)?;
    let samples = load_samples(ctx, &dataset, None)?;
    let index = index_by_id(&samples);
    let selections: Vec<SelectionResult> = read_jsonl(&a.selections)
        .with_context(|| format!("loading {}", a.selections.display()))?;
    let run_id = a.run_id.unwrap_or_else(|| ctx.profile.name.clone());
    let mut report = p_at_1(&run_id, &selections, &index, threshold)?;
    let mut inputs: Vec<&Path> = vec![&a.selections, &dataset];

    let mut warnings = 0;
    match &a.prompts {
        Some(path) => {
            let prompts: Vec<PromptRecord> =
                read_jsonl(path).with_context(|| format!("loading {}", path.display()))?;
            let sel_ids: BTreeSet<&str> = selections.iter().map(|s| s.sample_id.as_str()).collect();
            let prompt_ids: BTreeSet<&str> = prompts.iter().map(|p| p.sample_id.as_str()).collect();
            ensure!(
                sel_ids == prompt_ids,
                "selections and prompts cover different samples ({} vs {})",
                sel_ids.len(),
                prompt_ids.len()
            );
            report.oracle_upper_bound = Some(oracle_upper_bound(&prompts, &index, threshold)?);
            inputs.push(path);
        }
        None => {
            eprintln!("warning: no --prompts given, oracle upper bound not computed");
            warnings += 1;
        }
    }
    print!("{}", report.render_table());
    if let Some(out) = &a.out {
        let mut text = serde_json::to_string_pretty(&report)?;
        text.push('\n');
        fs::write(out, text)?;
        write_manifest("eval", ctx.profile.to_json(), &inputs, &[out], warnings)?;
    }
    Ok(Summary { warnings })
}

fn datagen(ctx: &mut Ctx, a: DatagenArgs) -> Result<Summary> {
    if let Some(s) = a.seed {
        ctx.profile.seed = Some(s);
    }
    if let Some(n) = a.shard_size {
        ctx.profile.datagen.shard_size = n;
    }
    if let Some(v) = a.min_label_iou {
        ctx.profile.datagen.min_label_iou = v;
    }
    if let Some(n) = a.min_boxes {
        ctx.profile.datagen.min_boxes = n;
    }
    let seed = ctx
        .profile
        .seed
        .ok_or_else(|| anyhow!("datagen needs a seed: pass --seed or set seed in the profile"))?;
    let inputs = load_inputs(ctx, a.input)?;
    let samples = load_samples(ctx, &inputs.dataset, Some(Split::Train))?;
    let opts = ctx.profile.pipeline(&inputs.detections);
    let inference = a
        .inference_profile
        .as_deref()
        .map(|p| RunProfile::load(p).map(|prof| prof.pipeline(&inputs.detections)))
        .transpose()?;
    let (records, stats) = generate_corpus(
        &samples,
        &inputs.detections,
        inputs.overrides.as_ref(),
        &opts,
        &ctx.profile.datagen.filters(),
        inference.as_ref(),
    )?;

    let meta = meta_path(&a.out);
    let stem = a.out.file_stem().unwrap_or_default().to_string_lossy().to_string();
    let stats_path = a.out.with_file_name(format!("{stem}.stats.json"));
    fs::write(&a.out, corpus_text(&records))?;
    fs::write(&meta, meta_text(&records))?;
    let mut text = serde_json::to_string_pretty(&stats)?;
    text.push('\n');
    fs::write(&stats_path, text)?;
    let mut outputs: Vec<PathBuf> = vec![a.out.clone(), meta, stats_path];

    let shard_size = ctx.profile.datagen.shard_size;
    if shard_size > 0 {
        let dir = a.out.with_file_name(format!("{stem}.shards"));
        let (shards, manifest) = shard_and_shuffle(&records, seed, shard_size)?;
        write_shards(&dir, &shards, &manifest)?;
        outputs.push(dir.join("shards.json"));
        outputs.extend(manifest.shards.iter().map(|s| dir.join(&s.file)));
    }

    let warnings = stats.missing_detections + stats.no_candidates;
    if stats.missing_detections > 0 {
        eprintln!("warning: {} sample(s) have no detections", stats.missing_detections);
    }
    if stats.no_candidates > 0 {
        eprintln!("warning: {} sample(s) have no candidates after filtering", stats.no_candidates);
    }
    let mut input_refs = inputs.paths();
    if let Some(p) = &a.inference_profile {
        input_refs.push(p);
    }
    let output_refs: Vec<&Path> = outputs.iter().map(PathBuf::as_path).collect();
    let profile = json!({"profile": ctx.profile.to_json(), "resolved": opts});
    write_manifest("datagen", profile, &input_refs, &output_refs, warnings)?;
    eprintln!(
        "kept {} of {} train samples (dropped: {} low iou, {} few boxes) -> {}",
        stats.kept,
        stats.samples,
        stats.dropped_low_iou,
        stats.dropped_few_boxes,
        a.out.display()
    );
    Ok(Summary { warnings })
}

fn ensemble(ctx: &Ctx, a: EnsembleArgs) -> Result<Summary> {
    let maps = a
        .detections
        .iter()
        .map(|p| load_detections(p, ctx.mode).with_context(|| format!("loading {}", p.display())))
        .collect::<Result<Vec<_>>>()?;
    let merged = merge_maps(&maps);
    write_detections(&a.out, &merged)?;
    let inputs: Vec<&Path> = a.detections.iter().map(PathBuf::as_path).collect();
    let profile = json!({"profile": ctx.profile.to_json()});
    write_manifest("ensemble", profile, &inputs, &[&a.out], 0)?;
    let n: usize = merged.values().map(Vec::len).sum();
    eprintln!("{n} records over {} samples -> {}", merged.len(), a.out.display());
    Ok(Summary::default())
}

fn parse_point(spec: &str) -> Result<(String, u64, PathBuf)> {
    let mut parts = spec.splitn(3, ':');
    let (Some(id), Some(seen), Some(path)) = (parts.next(), parts.next(), parts.next()) else {
        bail!("point `{spec}` is not CHECKPOINT_ID:SEEN_SAMPLES:REPORT_JSON");
    };
    ensure!(!id.is_empty(), "point `{spec}` has an empty checkpoint id");
    let seen = seen
        .parse()
        .with_context(|| format!("point `{spec}`: seen samples `{seen}` is not an integer"))?;
    Ok((id.to_string(), seen, PathBuf::from(path)))
}

fn curve(ctx: &Ctx, a: CurveArgs) -> Result<Summary> {
    let mut reports = Vec::new();
    let mut paths = Vec::new();
    for spec in &a.points {
        let (id, seen, path) = parse_point(spec)?;
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        let report: EvalReport =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        reports.push((id, seen, report));
        paths.push(path);
    }
    let points = training_curve(&reports)?;
    let mut buf = Vec::new();
    write_curve_csv(&mut buf, &points)?;
    fs::write(&a.out, &buf)?;
    let inputs: Vec<&Path> = paths.iter().map(PathBuf::as_path).collect();
    write_manifest("curve", ctx.profile.to_json(), &inputs, &[&a.out], 0)?;
    eprintln!("{} points -> {}", points.len(), a.out.display());
    Ok(Summary::default())
}

fn verify(a: VerifyArgs) -> Result<Summary> {
    let mut bad = 0;
    for path in &a.manifests {
        let m = RunManifest::load(path).with_context(|| format!("reading {}", path.display()))?;
        let base = path
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(Path::new("."));
        let mismatches = m.verify(base);
        if mismatches.is_empty() {
            println!("ok       {}", path.display());
        }
        for mm in &mismatches {
            match &mm.found {
                Some(h) => println!(
                    "CHANGED  {} (expected {}, found {})",
                    mm.path.display(),
                    &mm.expected[..12],
                    &h[..12]
                ),
                None => println!("MISSING  {}", mm.path.display()),
            }
        }
        bad += mismatches.len();
    }
    ensure!(bad == 0, "{bad} file(s) failed verification");
    Ok(Summary::default())
}
