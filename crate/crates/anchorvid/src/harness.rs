//! Command implementations behind the CLI: corpus synthesis, anchor
//! indexing, staged training, long generation, paired ablations, and plot
//! data export.
//!
//! Every command validates the run config before its first side effect and
//! derives all randomness from the single config seed, so equal configs
//! give byte-equal outputs. File layout under the output directory:
//!
//! ```text
//! episodes/manifest.json  episodes/<id>.lat      (synth)
//! indices/<id>.json                              (pipeline)
//! train/stage-<s>/checkpoint.bin + metrics.jsonl (train)
//! generate/video.lat + report.json + generation.json
//! ablate/<arm>/metrics.json                      (+ one run dir per side)
//! ```

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::container::{load_latent, save_latent};
use crate::error::{Error, Result};
use crate::flow::{
    fm_loss_value, interpolate, stage_conditions, train_step, velocity_target, write_metrics_line,
    MetricsRow, Stage, TrainingExample,
};
use crate::infer::{
    blend_overlap, generate_long, GenerateSpec, ModelField, RunReport, CHUNK_OVERLAP,
};
use crate::latent::{patchify, AnchorKind, AnchorSet, Expression, LatentVideo, Viewpoint};
use crate::model::{forward, init_params, AudioFeatures};
use crate::pipeline::{build_index, AnchorIndex, GroundTruthJudge};
use crate::sampler::{sample_example, SamplerConfig, SourceVideo};
use crate::synth::{
    gen_episode, EpisodeRecord, Scenario, AUDIO_DIM, AUDIO_FRAMES_PER_CLIP, CLIP_FRAMES,
    CLIP_SECONDS, LATENT_FPS, PIXEL_FPS, TEMPORAL_COMPRESSION,
};
use crate::tensor::{
    load_checkpoint, save_checkpoint, Adam, ParamStore, Tensor,
};

const EPISODES_DIR: &str = "episodes";
const INDICES_DIR: &str = "indices";
const TRAIN_DIR: &str = "train";
const GENERATE_DIR: &str = "generate";
const ABLATE_DIR: &str = "ablate";
const MANIFEST_FILE: &str = "manifest.json";

/// Decorrelated per-purpose seeds, all derived from the root seed.
fn lane_seed(seed: u64, lane: u64, index: u64) -> u64 {
    seed ^ (index.wrapping_add(1)).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ lane.wrapping_mul(0xD1B5_4A32_D192_ED03)
}

const LANE_EPISODE: u64 = 1;
const LANE_TRAIN: u64 = 2;
const LANE_EVAL: u64 = 3;

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io("creating output directory", e))?;
    }
    fs::write(path, text).map_err(|e| Error::io("writing output file", e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io("reading input file", e))
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    format!("{:x}", h.finalize())
}

/// One synthesized episode in the corpus manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthEntry {
    pub id: String,
    pub scenario: String,
    /// Fully mixed seed; regenerating with it reproduces the episode.
    pub seed: u64,
    pub duration_s: usize,
    /// Latent file name, relative to the episodes directory.
    pub file: String,
    /// Content hash of the latent file.
    pub sha256: String,
}

/// The corpus manifest written by `cmd_synth`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthManifest {
    pub seed: u64,
    pub entries: Vec<SynthEntry>,
}

impl SynthManifest {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format {
            path: "corpus manifest".into(),
            detail: e.to_string(),
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format {
            path: "corpus manifest".into(),
            detail: e.to_string(),
        })
    }
}

fn manifest_path(cfg: &RunConfig) -> PathBuf {
    cfg.output_dir.join(EPISODES_DIR).join(MANIFEST_FILE)
}

/// Generate the synthetic corpus: `data.episodes` episodes cycling through
/// the scenario list, saved as latent files plus a manifest. Idempotent per
/// seed — reruns rewrite byte-identical files.
pub fn cmd_synth(cfg: &RunConfig) -> Result<SynthManifest> {
    cfg.validate()?;
    let scenarios = cfg.scenarios()?;
    let n = cfg.data.episodes;
    let dir = cfg.output_dir.join(EPISODES_DIR);
    fs::create_dir_all(&dir).map_err(|e| Error::io("creating episodes directory", e))?;

    // Script of (index, id, scenario, seed) rows; generation is pure per
    // row, so rows can be rendered on worker threads.
    let jobs: Vec<(usize, String, Scenario, u64)> = (0..n)
        .map(|i| {
            let scenario = scenarios[i % scenarios.len()];
            let seed = lane_seed(cfg.seed, LANE_EPISODE, i as u64);
            let id = format!("ep-{:03}-{}", i, scenario.name());
            (i, id, scenario, seed)
        })
        .collect();
    let duration = cfg.data.duration_s;
    let episodes = render_episodes(&jobs, duration, cfg.threads)?;

    let mut entries = Vec::with_capacity(n);
    for ((_, id, scenario, seed), episode) in jobs.iter().zip(&episodes) {
        let file = format!("{}.lat", id);
        let path = dir.join(&file);
        save_latent(&path, &episode.video)?;
        let bytes = fs::read(&path).map_err(|e| Error::io("hashing latent file", e))?;
        entries.push(SynthEntry {
            id: id.clone(),
            scenario: scenario.name().to_string(),
            seed: *seed,
            duration_s: duration,
            file,
            sha256: sha256_hex(&bytes),
        });
    }
    let manifest = SynthManifest {
        seed: cfg.seed,
        entries,
    };
    write_text(&manifest_path(cfg), &(manifest.to_json()? + "\n"))?;
    Ok(manifest)
}

/// Render episodes for the job rows, fanning out over `threads` workers.
fn render_episodes(
    jobs: &[(usize, String, Scenario, u64)],
    duration: usize,
    threads: usize,
) -> Result<Vec<EpisodeRecord>> {
    if threads <= 1 || jobs.len() <= 1 {
        return jobs
            .iter()
            .map(|(_, _, scenario, seed)| gen_episode(*seed, duration, *scenario))
            .collect();
    }
    let workers = threads.min(jobs.len());
    let chunk = jobs.len().div_ceil(workers);
    let mut slots: Vec<Option<Result<EpisodeRecord>>> = Vec::new();
    slots.resize_with(jobs.len(), || None);
    std::thread::scope(|scope| {
        for (band, out) in jobs.chunks(chunk).zip(slots.chunks_mut(chunk)) {
            scope.spawn(move || {
                for ((_, _, scenario, seed), slot) in band.iter().zip(out.iter_mut()) {
                    *slot = Some(gen_episode(*seed, duration, *scenario));
                }
            });
        }
    });
    slots
        .into_iter()
        .map(|s| s.expect("every job slot is filled"))
        .collect()
}

/// Load the corpus manifest, directing the user to `synth` when missing.
pub fn load_manifest(cfg: &RunConfig) -> Result<SynthManifest> {
    let path = manifest_path(cfg);
    if !path.exists() {
        return Err(Error::invalid(
            "manifest",
            format!("{} not found; run the synth command first", path.display()),
        ));
    }
    SynthManifest::from_json(&read_text(&path)?)
}

fn entry_scenario(entry: &SynthEntry) -> Result<Scenario> {
    Scenario::ALL
        .iter()
        .copied()
        .find(|s| s.name() == entry.scenario)
        .ok_or_else(|| {
            Error::invalid(
                "manifest",
                format!("entry {} has unknown scenario {}", entry.id, entry.scenario),
            )
        })
}

/// Build and save the anchor index of every episode in the manifest.
/// Deterministic: reruns write identical files.
pub fn cmd_pipeline(cfg: &RunConfig) -> Result<Vec<AnchorIndex>> {
    cfg.validate()?;
    let manifest = load_manifest(cfg)?;
    let dir = cfg.output_dir.join(INDICES_DIR);
    fs::create_dir_all(&dir).map_err(|e| Error::io("creating indices directory", e))?;
    let mut indices = Vec::with_capacity(manifest.entries.len());
    for entry in &manifest.entries {
        let episode = gen_episode(entry.seed, entry.duration_s, entry_scenario(entry)?)?;
        let mut judge = GroundTruthJudge::for_episode(&entry.id, &episode);
        let index = build_index(&entry.id, &episode, &mut judge)?;
        write_text(
            &dir.join(format!("{}.json", entry.id)),
            &(index.to_manifest()? + "\n"),
        )?;
        indices.push(index);
    }
    Ok(indices)
}

/// Rebuild the training sources: regenerate each manifest episode and pair
/// it with its saved anchor index.
pub fn load_sources(cfg: &RunConfig) -> Result<Vec<SourceVideo>> {
    let manifest = load_manifest(cfg)?;
    let dir = cfg.output_dir.join(INDICES_DIR);
    let mut sources = Vec::with_capacity(manifest.entries.len());
    for entry in &manifest.entries {
        let path = dir.join(format!("{}.json", entry.id));
        if !path.exists() {
            return Err(Error::invalid(
                "sources",
                format!("{} not found; run the pipeline command first", path.display()),
            ));
        }
        let index = AnchorIndex::from_manifest(&read_text(&path)?)?;
        let episode = gen_episode(entry.seed, entry.duration_s, entry_scenario(entry)?)?;
        sources.push(SourceVideo::new(&entry.id, episode, index)?);
    }
    Ok(sources)
}

/// Result summary of a training run.
#[derive(Debug, Clone, Serialize)]
pub struct TrainOutcome {
    pub stage: String,
    pub start_step: u64,
    pub steps_run: usize,
    pub first_loss: f64,
    pub final_loss: f64,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
}

/// Train for `train.steps` optimizer steps at the given stage, appending
/// one metrics row per step and saving a checkpoint at the end. A
/// checkpoint path resumes: the step counter continues from its stored
/// value and the metrics log is appended rather than replaced.
pub fn cmd_train(
    cfg: &RunConfig,
    stage_override: Option<Stage>,
    checkpoint: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let stage = match stage_override {
        Some(s) => s,
        None => cfg.stage()?,
    };
    let kinds = cfg.train_anchor_kinds(stage)?;
    let mode = cfg.anchor_mode()?;
    let mut tcfg = cfg.train_config()?;
    tcfg.stage = stage;
    if tcfg.steps == 0 {
        return Err(Error::invalid("train", "steps must be at least 1"));
    }
    let sources = load_sources(cfg)?;
    if sources.is_empty() {
        return Err(Error::invalid("train", "the corpus manifest has no episodes"));
    }
    let mcfg = cfg.model_config()?;

    let (mut store, start_step) = match checkpoint {
        Some(path) => load_checkpoint(path)?,
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            (init_params(&mcfg, &mut rng)?, 0)
        }
    };
    let mut adam = Adam::new(tcfg.adam.clone());
    // Mix the resume step into the data stream so a resumed run sees fresh
    // draws instead of replaying the first run's batches.
    let mut rng = ChaCha8Rng::seed_from_u64(lane_seed(cfg.seed, LANE_TRAIN, start_step));
    // The stage gate owns the prefix coin; the sampler attaches whenever
    // the clip has room.
    let sampler_cfg = SamplerConfig {
        prefix_prob: 1.0,
        ..SamplerConfig::default()
    };

    let train_dir = cfg
        .output_dir
        .join(TRAIN_DIR)
        .join(format!("stage-{}", stage));
    fs::create_dir_all(&train_dir).map_err(|e| Error::io("creating train directory", e))?;
    let metrics_path = train_dir.join("metrics.jsonl");
    let mut metrics = fs::OpenOptions::new()
        .create(true)
        .append(checkpoint.is_some())
        .truncate(checkpoint.is_none())
        .write(true)
        .open(&metrics_path)
        .map_err(|e| Error::io("opening metrics log", e))?;

    let mut first_loss = f64::NAN;
    let mut final_loss = f64::NAN;
    for step in 0..tcfg.steps {
        let mut batch = Vec::with_capacity(tcfg.batch_size);
        for _ in 0..tcfg.batch_size {
            let src = &sources[rng.gen_range(0..sources.len())];
            batch.push(sample_example(src, &kinds, mode, &sampler_cfg, &mut rng)?.example);
        }
        let (loss, grad_norm) = train_step(&mcfg, &mut store, &mut adam, &batch, &tcfg, &mut rng)?;
        if step == 0 {
            first_loss = loss;
        }
        final_loss = loss;
        write_metrics_line(
            &mut metrics,
            &MetricsRow {
                step: start_step + step as u64 + 1,
                stage: stage.to_string(),
                loss,
                grad_norm,
            },
        )?;
    }
    let checkpoint_path = train_dir.join("checkpoint.bin");
    save_checkpoint(&checkpoint_path, &store, start_step + tcfg.steps as u64)?;
    Ok(TrainOutcome {
        stage: stage.to_string(),
        start_step,
        steps_run: tcfg.steps,
        first_loss,
        final_loss,
        checkpoint: checkpoint_path,
        metrics: metrics_path,
    })
}

/// Result summary of one long generation.
#[derive(Debug, Clone, Serialize)]
pub struct GenerateOutcome {
    pub minutes: f64,
    pub pixel_fps: usize,
    pub temporal_compression: usize,
    pub latent_fps: usize,
    pub total_frames: usize,
    pub chunks: usize,
    pub video: PathBuf,
    pub report: PathBuf,
}

/// Convert a minutes request into latent frames.
pub fn minutes_to_frames(minutes: f64) -> Result<usize> {
    if !minutes.is_finite() || minutes <= 0.0 {
        return Err(Error::invalid(
            "generate",
            format!("minutes {} must be positive and finite", minutes),
        ));
    }
    let frames = (minutes * 60.0 * LATENT_FPS as f64).round() as usize;
    if frames == 0 {
        return Err(Error::invalid(
            "generate",
            format!("minutes {} rounds to zero latent frames", minutes),
        ));
    }
    Ok(frames)
}

/// Generate a video of the requested length, conditioned on one manifest
/// episode: its first frame as the input image and global anchor, its
/// body/head crops as viewpoint/expression anchors, its command as the
/// text, and its audio timeline (the episode is re-rendered longer when
/// the request outruns it).
pub fn cmd_generate(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    minutes: f64,
) -> Result<GenerateOutcome> {
    cfg.validate()?;
    let total_frames = minutes_to_frames(minutes)?;
    let manifest = load_manifest(cfg)?;
    let entry = match &cfg.sample.source {
        Some(id) => manifest
            .entries
            .iter()
            .find(|e| &e.id == id)
            .ok_or_else(|| {
                Error::invalid("generate", format!("source id {} not in the manifest", id))
            })?,
        None => manifest
            .entries
            .first()
            .ok_or_else(|| Error::invalid("generate", "the corpus manifest has no episodes"))?,
    };
    // Enough 5 s blocks to cover every started 30-frame chunk block.
    let blocks_needed = total_frames.div_ceil(CLIP_FRAMES);
    let duration = entry.duration_s.max(blocks_needed * CLIP_SECONDS);
    let episode = gen_episode(entry.seed, duration, entry_scenario(entry)?)?;
    let mut judge = GroundTruthJudge::for_episode(&entry.id, &episode);
    let index = build_index(&entry.id, &episode, &mut judge)?;

    let input_frame = episode.video.frame(0)?;
    let mut anchors = AnchorSet::empty();
    for kind in cfg.sample_anchor_kinds()? {
        match kind {
            AnchorKind::Global => anchors.set_global(input_frame.clone())?,
            AnchorKind::Viewpoint => {
                for (&sub, frames) in &index.viewpoints {
                    if let Some(&f) = frames.first() {
                        anchors
                            .set_viewpoint(Viewpoint::from_index(sub)?, episode.body_crops.frame(f)?)?;
                    }
                }
            }
            AnchorKind::Expression => {
                for (&sub, frames) in &index.expressions {
                    if let Some(&f) = frames.first() {
                        anchors
                            .set_expression(Expression::from_index(sub)?, episode.head_crops.frame(f)?)?;
                    }
                }
            }
        }
    }

    let rows = blocks_needed * AUDIO_FRAMES_PER_CLIP;
    let audio = Tensor::from_vec(
        vec![rows, AUDIO_DIM],
        episode.audio.data()[..rows * AUDIO_DIM].to_vec(),
    )?;
    let spec = GenerateSpec {
        text_ids: vec![episode.commands[0]],
        audio: Some(AudioFeatures::new(audio)?),
        anchors,
        input_frame,
    };

    let mcfg = cfg.model_config()?;
    let store = match checkpoint {
        Some(path) => load_checkpoint(path)?.0,
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            init_params(&mcfg, &mut rng)?
        }
    };
    let field = ModelField::new(&mcfg, &store);
    let scfg = cfg.sample_config();
    let (video, report) = generate_long(&field, &spec, total_frames, &scfg, true)?;

    let out_dir = cfg.output_dir.join(GENERATE_DIR);
    fs::create_dir_all(&out_dir).map_err(|e| Error::io("creating generate directory", e))?;
    let video_path = out_dir.join("video.lat");
    let report_path = out_dir.join("report.json");
    save_latent(&video_path, &video)?;
    write_text(&report_path, &(report.to_json()? + "\n"))?;
    let outcome = GenerateOutcome {
        minutes,
        pixel_fps: PIXEL_FPS,
        temporal_compression: TEMPORAL_COMPRESSION,
        latent_fps: LATENT_FPS,
        total_frames,
        chunks: report.chunks.len(),
        video: video_path,
        report: report_path,
    };
    let summary = serde_json::to_string_pretty(&outcome).map_err(|e| Error::Format {
        path: "generation summary".into(),
        detail: e.to_string(),
    })?;
    write_text(&out_dir.join("generation.json"), &(summary + "\n"))?;
    Ok(outcome)
}

/// The four paired ablation arms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationArm {
    /// Drop the global identity anchor.
    NoGlobal,
    /// Drop the viewpoint and expression anchors.
    NoViewExpr,
    /// Restrict anchor frames to the training window.
    NoSuperset,
    /// Collapse all anchor offsets onto one value, so the rotary position
    /// no longer separates anchor kinds.
    NoRwc,
}

impl AblationArm {
    pub const ALL: [AblationArm; 4] = [
        AblationArm::NoGlobal,
        AblationArm::NoViewExpr,
        AblationArm::NoSuperset,
        AblationArm::NoRwc,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationArm::NoGlobal => "no_global",
            AblationArm::NoViewExpr => "no_view_expr",
            AblationArm::NoSuperset => "no_superset",
            AblationArm::NoRwc => "no_rwc",
        }
    }
}

impl FromStr for AblationArm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationArm::ALL
            .iter()
            .copied()
            .find(|a| a.name() == s)
            .ok_or_else(|| {
                Error::invalid(
                    "ablate",
                    format!(
                        "unknown arm '{}' (expected no_global, no_view_expr, no_superset, no_rwc)",
                        s
                    ),
                )
            })
    }
}

/// Metrics one ablation side emits; both sides share the schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmMetrics {
    pub label: String,
    pub train_steps: usize,
    pub final_loss: f64,
    /// Mean flow loss over a fixed validation draw.
    pub val_loss: f64,
}

/// Baseline-vs-arm pair written by `cmd_ablate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblatePair {
    pub baseline: ArmMetrics,
    pub arm: ArmMetrics,
}

/// Result summary of an ablation.
#[derive(Debug, Clone, Serialize)]
pub struct AblateOutcome {
    pub pair: AblatePair,
    pub metrics: PathBuf,
}

/// Rewrite the config for one ablation arm.
fn arm_config(cfg: &RunConfig, arm: AblationArm) -> Result<RunConfig> {
    let mut out = cfg.clone();
    let stage = cfg.stage()?;
    match arm {
        AblationArm::NoGlobal | AblationArm::NoViewExpr => {
            let dropped: &[AnchorKind] = match arm {
                AblationArm::NoGlobal => &[AnchorKind::Global],
                _ => &[AnchorKind::Viewpoint, AnchorKind::Expression],
            };
            let keep_name = |k: &AnchorKind| match k {
                AnchorKind::Global => "global".to_string(),
                AnchorKind::Viewpoint => "viewpoint".to_string(),
                AnchorKind::Expression => "expression".to_string(),
            };
            let train: Vec<String> = cfg
                .train_anchor_kinds(stage)?
                .iter()
                .filter(|k| !dropped.contains(k))
                .map(keep_name)
                .collect();
            let sample: Vec<String> = cfg
                .sample_anchor_kinds()?
                .iter()
                .filter(|k| !dropped.contains(k))
                .map(keep_name)
                .collect();
            out.train.anchors = Some(train);
            out.sample.anchors = Some(sample);
        }
        AblationArm::NoSuperset => {
            out.train.mode = "intra_only".to_string();
        }
        AblationArm::NoRwc => {
            let shared = cfg.rope.offsets.global;
            out.rope.offsets.viewpoint = shared;
            out.rope.offsets.expression = shared;
            out.rope.offsets.global = shared;
        }
    }
    Ok(out)
}

/// Run one ablation side end to end in its own directory: synth, pipeline,
/// train, then a fixed validation pass.
fn run_arm_side(cfg: &RunConfig, label: &str) -> Result<ArmMetrics> {
    cmd_synth(cfg)?;
    cmd_pipeline(cfg)?;
    let train = cmd_train(cfg, None, None)?;
    let (store, _) = load_checkpoint(&train.checkpoint)?;
    let val_loss = eval_loss(cfg, &store, 8)?;
    Ok(ArmMetrics {
        label: label.to_string(),
        train_steps: train.steps_run,
        final_loss: train.final_loss,
        val_loss,
    })
}

/// Mean flow loss of a trained model over `n` freshly drawn examples with
/// a fixed evaluation seed; no condition drops, midpoint timesteps.
pub fn eval_loss(cfg: &RunConfig, store: &ParamStore, n: usize) -> Result<f64> {
    let stage = cfg.stage()?;
    let kinds = cfg.train_anchor_kinds(stage)?;
    let mode = cfg.anchor_mode()?;
    let mcfg = cfg.model_config()?;
    let sources = load_sources(cfg)?;
    if sources.is_empty() || n == 0 {
        return Err(Error::invalid("eval", "nothing to evaluate"));
    }
    let sampler_cfg = SamplerConfig {
        prefix_prob: 1.0,
        ..SamplerConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(lane_seed(cfg.seed, LANE_EVAL, 0));
    let mut sum = 0.0;
    for i in 0..n {
        let src = &sources[rng.gen_range(0..sources.len())];
        let ex: TrainingExample = sample_example(src, &kinds, mode, &sampler_cfg, &mut rng)?.example;
        let conds = stage_conditions(stage, &ex.conds, i, 1.0, &mut rng);
        let t = (i as f64 + 1.0) / (n as f64 + 1.0);
        let x0 = LatentVideo::new(Tensor::randn(ex.video.data().shape(), 1.0, &mut rng))?;
        let x_t = interpolate(&x0, &ex.video, t)?;
        let target = velocity_target(&x0, &ex.video)?;
        let pass = forward(&mcfg, store, &x_t, t, &conds)?;
        let (target_tokens, _) = patchify(&target, mcfg.patch)?;
        sum += fm_loss_value(&pass.video_tokens, &target_tokens)?.scalar_value()?;
    }
    Ok(sum / n as f64)
}

/// Train the baseline config and one modified arm side by side and write
/// the paired metrics.
pub fn cmd_ablate(cfg: &RunConfig, arm_name: &str) -> Result<AblateOutcome> {
    cfg.validate()?;
    let arm = AblationArm::from_str(arm_name)?;
    let arm_dir = cfg.output_dir.join(ABLATE_DIR).join(arm.name());

    let mut baseline_cfg = cfg.clone();
    baseline_cfg.output_dir = arm_dir.join("baseline");
    let baseline = run_arm_side(&baseline_cfg, "baseline")?;

    let mut variant_cfg = arm_config(cfg, arm)?;
    variant_cfg.output_dir = arm_dir.join(arm.name());
    variant_cfg.validate()?;
    let variant = run_arm_side(&variant_cfg, arm.name())?;

    let pair = AblatePair {
        baseline,
        arm: variant,
    };
    let metrics_path = arm_dir.join("metrics.json");
    let json = serde_json::to_string_pretty(&pair).map_err(|e| Error::Format {
        path: "ablation metrics".into(),
        detail: e.to_string(),
    })?;
    write_text(&metrics_path, &(json + "\n"))?;
    Ok(AblateOutcome {
        pair,
        metrics: metrics_path,
    })
}

/// One exported blend region: the overlap a chunk boundary produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlendRegion {
    pub chunk: usize,
    pub start: usize,
    pub values: Vec<f64>,
}

/// Result summary of a plot export.
#[derive(Debug, Clone, Serialize)]
pub struct ExportOutcome {
    pub attention_rows: usize,
    pub blend_chunks: usize,
    pub attention: PathBuf,
    pub blend: PathBuf,
}

/// Export plot data from a generation run directory: one attention-mass
/// row per (chunk, role), plus every blend region — recomputed from the
/// seam records and cross-checked bit for bit against the latent file.
pub fn cmd_export_plots(run_dir: &Path) -> Result<ExportOutcome> {
    let report_path = run_dir.join("report.json");
    if !report_path.exists() {
        return Err(Error::invalid(
            "export-plots",
            format!("{} has no report.json", run_dir.display()),
        ));
    }
    let report = RunReport::from_json(&read_text(&report_path)?)?;
    let video = load_latent(&run_dir.join("video.lat"))?;

    let mut attention = String::from("chunk,role,mass\n");
    let mut rows = 0;
    for chunk in &report.chunks {
        for (role, mass) in &chunk.anchor_masses {
            attention.push_str(&format!("{},{},{}\n", chunk.index, role, mass));
            rows += 1;
        }
    }
    let attention_path = run_dir.join("attention_curves.csv");
    write_text(&attention_path, &attention)?;

    let (h, w, c) = (video.height(), video.width(), video.channels());
    let mut regions = Vec::new();
    for chunk in &report.chunks {
        let seam = match &chunk.seam {
            Some(s) => s,
            None => continue,
        };
        let shape = vec![CHUNK_OVERLAP, h, w, c];
        let prev = LatentVideo::new(Tensor::from_vec(shape.clone(), seam.prev_tail.clone())?)?;
        let next = LatentVideo::new(Tensor::from_vec(shape, seam.next_head.clone())?)?;
        let blended = blend_overlap(&prev, &next, &report.blend)?;
        let stored = video.slice_frames(chunk.start, CHUNK_OVERLAP)?;
        let same_record = blended.data().data() == seam.blended.as_slice();
        let same_video = blended.data().data() == stored.data().data();
        if !(same_record && same_video) {
            return Err(Error::invalid(
                "export-plots",
                format!(
                    "chunk {} blend region disagrees with the {} record",
                    chunk.index,
                    if same_record { "latent file" } else { "seam" }
                ),
            ));
        }
        regions.push(BlendRegion {
            chunk: chunk.index,
            start: chunk.start,
            values: blended.data().data().to_vec(),
        });
    }
    let blend_path = run_dir.join("blend_regions.json");
    let json = serde_json::to_string_pretty(&regions).map_err(|e| Error::Format {
        path: "blend regions".into(),
        detail: e.to_string(),
    })?;
    write_text(&blend_path, &(json + "\n"))?;
    Ok(ExportOutcome {
        attention_rows: rows,
        blend_chunks: regions.len(),
        attention: attention_path,
        blend: blend_path,
    })
}

/// Check the blend-weight table the run report carries, so downstream
/// tooling can rely on the pinned values.
pub fn check_report_blend(report: &RunReport) -> Result<()> {
    let want = crate::infer::BLEND_WEIGHTS;
    if report.blend.len() != want.len()
        || report
            .blend
            .iter()
            .zip(want.iter())
            .any(|(a, b)| a.to_bits() != b.to_bits())
    {
        return Err(Error::invalid(
            "report",
            format!("blend table {:?} differs from the pinned weights", report.blend),
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::sampler::AnchorMode;

    fn test_config(out: &Path, episodes: usize, scenarios: &str) -> RunConfig {
        let text = format!(
            r#"
            seed = 11
            output_dir = "{}"
            [model]
            blocks = 2
            model_dim = 16
            heads = 2
            head_dim = 8
            timestep_embed_dim = 8
            [train]
            steps = 2
            batch_size = 1
            stage = "3-joint"
            [sample]
            steps = 2
            cfg_scale = 1.5
            [data]
            episodes = {}
            duration_s = 30
            scenarios = [{}]
            "#,
            out.display(),
            episodes,
            scenarios
        );
        RunConfig::from_toml(&text).unwrap()
    }

    #[test]
    fn synth_is_idempotent_per_seed_and_counts_entries() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = test_config(dir.path(), 3, r#""mixed", "idle""#);
        let first = cmd_synth(&cfg).unwrap();
        assert_eq!(first.entries.len(), 3);
        assert_eq!(first.entries[0].scenario, "mixed");
        assert_eq!(first.entries[1].scenario, "idle");
        let again = cmd_synth(&cfg).unwrap();
        assert_eq!(first, again);
        // A different seed changes the content hashes.
        let mut other = cfg.clone();
        other.seed = 12;
        let shifted = cmd_synth(&other).unwrap();
        assert_ne!(first.entries[0].sha256, shifted.entries[0].sha256);
        // Zero episodes: success, empty manifest.
        let mut none = cfg.clone();
        none.data.episodes = 0;
        assert!(cmd_synth(&none).unwrap().entries.is_empty());
    }

    #[test]
    fn synth_parallel_matches_serial() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let serial = test_config(dir_a.path(), 4, r#""idle""#);
        let mut parallel = test_config(dir_b.path(), 4, r#""idle""#);
        parallel.threads = 3;
        let a = cmd_synth(&serial).unwrap();
        let b = cmd_synth(&parallel).unwrap();
        let hashes = |m: &SynthManifest| {
            m.entries
                .iter()
                .map(|e| e.sha256.clone())
                .collect::<Vec<_>>()
        };
        assert_eq!(hashes(&a), hashes(&b));
    }

    #[test]
    fn pipeline_writes_expected_indices() {
        let dir = tempfile::tempdir().unwrap();
        // Idle-only corpus: no expression entries, front-only viewpoints.
        let cfg = test_config(dir.path(), 1, r#""idle""#);
        cmd_synth(&cfg).unwrap();
        let indices = cmd_pipeline(&cfg).unwrap();
        assert_eq!(indices.len(), 1);
        assert!(indices[0].expressions.is_empty());
        // Mixed corpus: all four viewpoint lists non-empty.
        let dir2 = tempfile::tempdir().unwrap();
        let cfg2 = test_config(dir2.path(), 1, r#""mixed""#);
        cmd_synth(&cfg2).unwrap();
        let indices2 = cmd_pipeline(&cfg2).unwrap();
        assert_eq!(indices2[0].viewpoints.len(), 4);
        assert!(indices2[0].viewpoints.values().all(|v| !v.is_empty()));
        // Rerun: identical manifest files.
        let path = dir2
            .path()
            .join(INDICES_DIR)
            .join(format!("{}.json", indices2[0].source_id));
        let before = std::fs::read_to_string(&path).unwrap();
        cmd_pipeline(&cfg2).unwrap();
        let after = std::fs::read_to_string(&path).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn train_runs_resume_and_refuse_stage_one_anchors() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = test_config(dir.path(), 1, r#""mixed""#);
        cmd_synth(&cfg).unwrap();
        cmd_pipeline(&cfg).unwrap();
        let out = cmd_train(&cfg, None, None).unwrap();
        assert_eq!(out.steps_run, 2);
        assert_eq!(out.start_step, 0);
        assert!(out.final_loss.is_finite());
        // Resume continues the step counter and appends metrics.
        let resumed = cmd_train(&cfg, None, Some(&out.checkpoint.clone())).unwrap();
        assert_eq!(resumed.start_step, 2);
        let rows =
            crate::flow::read_metrics(&std::fs::read_to_string(&resumed.metrics).unwrap()).unwrap();
        assert_eq!(
            rows.iter().map(|r| r.step).collect::<Vec<_>>(),
            vec![1, 2, 3, 4]
        );
        // Stage 1 with an explicit anchor request is refused.
        cfg.train.stage = "1".to_string();
        cfg.train.anchors = Some(vec!["global".to_string()]);
        assert!(cmd_train(&cfg, None, None).is_err());
        // The override flag hits the same gate.
        cfg.train.stage = "3-joint".to_string();
        assert!(cmd_train(&cfg, Some(Stage::Unanchored), None).is_err());
    }

    #[test]
    fn generate_single_chunk_and_export_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = test_config(dir.path(), 1, r#""mixed""#);
        cmd_synth(&cfg).unwrap();
        cmd_pipeline(&cfg).unwrap();
        // 5 s: exactly one chunk, no checkpoint (fresh weights).
        let out = cmd_generate(&cfg, None, 5.0 / 60.0).unwrap();
        assert_eq!(out.total_frames, 30);
        assert_eq!(out.chunks, 1);
        assert_eq!(out.latent_fps, 6);
        let report = RunReport::from_json(&std::fs::read_to_string(&out.report).unwrap()).unwrap();
        check_report_blend(&report).unwrap();
        assert!(report.chunks[0].anchor_masses.contains_key("global"));
        // Export only needs the run directory.
        let export = cmd_export_plots(&cfg.output_dir.join(GENERATE_DIR)).unwrap();
        assert_eq!(export.blend_chunks, 0);
        let csv = std::fs::read_to_string(&export.attention).unwrap();
        assert_eq!(
            csv.lines().count(),
            1 + report.chunks[0].anchor_masses.len()
        );
        // An empty directory is an error.
        let empty = tempfile::tempdir().unwrap();
        assert!(cmd_export_plots(empty.path()).is_err());
    }

    #[test]
    fn generate_two_chunks_exports_checked_blend_regions() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = test_config(dir.path(), 1, r#""mixed""#);
        // Keep the run quick: the 56-frame request spans two chunks.
        cfg.sample.steps = 2;
        cmd_synth(&cfg).unwrap();
        cmd_pipeline(&cfg).unwrap();
        let minutes = 56.0 / (60.0 * LATENT_FPS as f64);
        let out = cmd_generate(&cfg, None, minutes).unwrap();
        assert_eq!(out.total_frames, 56);
        assert_eq!(out.chunks, 2);
        let export = cmd_export_plots(&cfg.output_dir.join(GENERATE_DIR)).unwrap();
        assert_eq!(export.blend_chunks, 1);
        let regions: Vec<BlendRegion> =
            serde_json::from_str(&std::fs::read_to_string(&export.blend).unwrap()).unwrap();
        let video = load_latent(&out.video).unwrap();
        let stored = video.slice_frames(regions[0].start, CHUNK_OVERLAP).unwrap();
        assert_eq!(regions[0].values, stored.data().data());
    }

    #[test]
    fn ablate_emits_paired_metrics_with_shared_schema() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = test_config(dir.path(), 1, r#""mixed""#);
        let out = cmd_ablate(&cfg, "no_rwc").unwrap();
        assert_eq!(out.pair.baseline.label, "baseline");
        assert_eq!(out.pair.arm.label, "no_rwc");
        assert_eq!(out.pair.baseline.train_steps, out.pair.arm.train_steps);
        assert!(out.pair.baseline.val_loss.is_finite());
        assert!(out.pair.arm.val_loss.is_finite());
        let text = std::fs::read_to_string(&out.metrics).unwrap();
        let pair: AblatePair = serde_json::from_str(&text).unwrap();
        assert_eq!(pair, out.pair);
        // Unknown arm name is rejected before any side effect.
        assert!(cmd_ablate(&cfg, "no_anchors_at_all").is_err());
    }

    #[test]
    fn arm_configs_change_exactly_the_advertised_knob() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = test_config(dir.path(), 1, r#""mixed""#);
        let no_global = arm_config(&cfg, AblationArm::NoGlobal).unwrap();
        assert_eq!(
            no_global.train.anchors,
            Some(vec!["viewpoint".to_string(), "expression".to_string()])
        );
        let no_ve = arm_config(&cfg, AblationArm::NoViewExpr).unwrap();
        assert_eq!(no_ve.train.anchors, Some(vec!["global".to_string()]));
        let no_superset = arm_config(&cfg, AblationArm::NoSuperset).unwrap();
        assert_eq!(no_superset.train.mode, "intra_only");
        assert_eq!(
            no_superset.anchor_mode().unwrap(),
            AnchorMode::IntraOnly
        );
        let no_rwc = arm_config(&cfg, AblationArm::NoRwc).unwrap();
        let offsets = no_rwc.model_config().unwrap().rope.offsets;
        assert_eq!(offsets.viewpoint, offsets.global);
        assert_eq!(offsets.expression, offsets.global);
        no_rwc.validate().unwrap();
    }
}
