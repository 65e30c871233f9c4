//! Run configuration: one TOML document drives every CLI command.
//!
//! The file mirrors the library's config types section by section and is
//! cross-validated as a whole before any command touches the filesystem —
//! offsets against the reachable video positions, audio arithmetic against
//! the clip grid, patch sizes against every latent shape an anchor can take.
//! Environment variables override exactly two things: the output directory
//! (`ANCHORVID_OUT`) and the thread count (`ANCHORVID_THREADS`).

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{Stage, TrainConfig};
use crate::infer::{SampleConfig, CHUNK_LATENT_FRAMES, CHUNK_OVERLAP};
use crate::latent::AnchorKind;
use crate::model::{ModelConfig, AUDIO_WINDOW};
use crate::rope::{AnchorOffsets, RopeConfig};
use crate::sampler::AnchorMode;
use crate::synth::{
    Scenario, AUDIO_DIM, AUDIO_FRAMES_PER_CLIP, CLIP_FRAMES, CLIP_SECONDS, LATENT_C, LATENT_H,
    LATENT_W,
};
use crate::tensor::AdamConfig;

/// Environment override for the output directory.
pub const ENV_OUT: &str = "ANCHORVID_OUT";
/// Environment override for the worker thread count.
pub const ENV_THREADS: &str = "ANCHORVID_THREADS";

/// `[model]` section: backbone dimensions (the rotary settings live in
/// their own section).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub blocks: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub head_dim: usize,
    /// Blocks that get the audio cross-attention branch; defaults to the
    /// middle block.
    #[serde(default)]
    pub audio_blocks: Option<Vec<usize>>,
    pub timestep_embed_dim: usize,
    #[serde(default = "default_text_vocab")]
    pub text_vocab: usize,
    #[serde(default = "default_audio_dim")]
    pub audio_dim: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    #[serde(default = "default_patch")]
    pub patch: (usize, usize),
}

fn default_text_vocab() -> usize {
    crate::synth::TEXT_VOCAB
}

fn default_audio_dim() -> usize {
    AUDIO_DIM
}

fn default_channels() -> usize {
    LATENT_C
}

fn default_patch() -> (usize, usize) {
    (2, 2)
}

/// `[rope]` section: rotary base, optional axis split, anchor offsets.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RopeSection {
    #[serde(default = "default_rope_base")]
    pub base: f64,
    /// Channels per (temporal, height, width) axis; the 2:1:1 proportional
    /// split when omitted.
    #[serde(default)]
    pub split: Option<(usize, usize, usize)>,
    #[serde(default)]
    pub offsets: AnchorOffsets,
}

fn default_rope_base() -> f64 {
    10000.0
}

impl Default for RopeSection {
    fn default() -> Self {
        RopeSection {
            base: default_rope_base(),
            split: None,
            offsets: AnchorOffsets::default(),
        }
    }
}

/// `[train]` section: steps, batch, stage, condition knobs, optimizer.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "default_train_steps")]
    pub steps: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// "1", "2", "3-mixed", or "3-joint".
    #[serde(default = "default_stage")]
    pub stage: String,
    #[serde(default = "default_cfg_drop")]
    pub cfg_drop_prob: f64,
    #[serde(default = "default_prefix_prob")]
    pub prefix_prob: f64,
    /// Anchor kinds the sampler requests ("global", "viewpoint",
    /// "expression"); defaults follow the stage.
    #[serde(default)]
    pub anchors: Option<Vec<String>>,
    /// "superset" or "intra_only".
    #[serde(default = "default_mode")]
    pub mode: String,
    #[serde(default)]
    pub adam: AdamConfig,
}

fn default_train_steps() -> usize {
    1000
}

fn default_batch_size() -> usize {
    4
}

fn default_stage() -> String {
    "1".to_string()
}

fn default_cfg_drop() -> f64 {
    0.1
}

fn default_prefix_prob() -> f64 {
    0.5
}

fn default_mode() -> String {
    "superset".to_string()
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            steps: default_train_steps(),
            batch_size: default_batch_size(),
            stage: default_stage(),
            cfg_drop_prob: default_cfg_drop(),
            prefix_prob: default_prefix_prob(),
            anchors: None,
            mode: default_mode(),
            adam: AdamConfig::default(),
        }
    }
}

/// `[sample]` section: denoising steps, guidance, generation conditions.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleSection {
    #[serde(default = "default_sample_steps")]
    pub steps: usize,
    #[serde(default = "default_cfg_scale")]
    pub cfg_scale: f64,
    /// Episode id to condition generation on; the first manifest entry when
    /// omitted.
    #[serde(default)]
    pub source: Option<String>,
    /// Anchor kinds attached at generation time; all three when omitted.
    #[serde(default)]
    pub anchors: Option<Vec<String>>,
}

fn default_sample_steps() -> usize {
    30
}

fn default_cfg_scale() -> f64 {
    3.5
}

impl Default for SampleSection {
    fn default() -> Self {
        SampleSection {
            steps: default_sample_steps(),
            cfg_scale: default_cfg_scale(),
            source: None,
            anchors: None,
        }
    }
}

/// `[data]` section: synthetic corpus shape.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Total episode count; scenario of episode `i` is `scenarios[i % len]`.
    #[serde(default = "default_episodes")]
    pub episodes: usize,
    #[serde(default = "default_duration")]
    pub duration_s: usize,
    #[serde(default = "default_scenarios")]
    pub scenarios: Vec<String>,
}

fn default_episodes() -> usize {
    4
}

fn default_duration() -> usize {
    30
}

fn default_scenarios() -> Vec<String> {
    vec!["mixed".to_string()]
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            episodes: default_episodes(),
            duration_s: default_duration(),
            scenarios: default_scenarios(),
        }
    }
}

/// The whole run configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Single root seed; every command derives its randomness from it.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default = "default_threads")]
    pub threads: usize,
    pub model: ModelSection,
    #[serde(default)]
    pub rope: RopeSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub sample: SampleSection,
    #[serde(default)]
    pub data: DataSection,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

fn default_threads() -> usize {
    1
}

fn parse_anchor_kind(name: &str) -> Result<AnchorKind> {
    match name {
        "global" => Ok(AnchorKind::Global),
        "viewpoint" => Ok(AnchorKind::Viewpoint),
        "expression" => Ok(AnchorKind::Expression),
        other => Err(Error::InvalidConfig(format!(
            "unknown anchor kind '{}' (expected global, viewpoint, expression)",
            other
        ))),
    }
}

fn parse_scenario(name: &str) -> Result<Scenario> {
    Scenario::ALL
        .iter()
        .copied()
        .find(|s| s.name() == name)
        .ok_or_else(|| {
            Error::InvalidConfig(format!(
                "unknown scenario '{}' (expected idle, turn_around, expression_cycle, mixed)",
                name
            ))
        })
}

/// Anchor kinds a stage admits by default.
pub fn stage_default_anchors(stage: Stage) -> Vec<AnchorKind> {
    match stage {
        Stage::Unanchored => Vec::new(),
        Stage::GlobalAnchor => vec![AnchorKind::Global],
        Stage::MixedAnchors | Stage::JointAnchors => vec![
            AnchorKind::Global,
            AnchorKind::Viewpoint,
            AnchorKind::Expression,
        ],
    }
}

/// The unanchored stage refuses configs that explicitly request anchors.
pub fn check_stage_anchors(stage: Stage, kinds: &[AnchorKind]) -> Result<()> {
    if stage == Stage::Unanchored && !kinds.is_empty() {
        return Err(Error::InvalidConfig(format!(
            "stage 1 trains without anchors but the config requests {:?}",
            kinds
        )));
    }
    Ok(())
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<RunConfig> {
        toml::from_str(text).map_err(|e| Error::Format {
            path: "run config".to_string(),
            detail: e.to_string(),
        })
    }

    /// Read a config file and apply the environment overrides.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io("reading run config", e))?;
        let mut cfg = Self::from_toml(&text)?;
        cfg.apply_env()?;
        Ok(cfg)
    }

    /// Apply the two supported environment overrides.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(dir) = std::env::var(ENV_OUT) {
            if dir.is_empty() {
                return Err(Error::InvalidConfig(format!("{} is empty", ENV_OUT)));
            }
            self.output_dir = PathBuf::from(dir);
        }
        if let Ok(threads) = std::env::var(ENV_THREADS) {
            self.threads = threads.parse::<usize>().map_err(|_| {
                Error::InvalidConfig(format!("{}={} is not a thread count", ENV_THREADS, threads))
            })?;
        }
        Ok(())
    }

    /// Assemble the backbone config from the model and rope sections.
    pub fn model_config(&self) -> Result<ModelConfig> {
        let m = &self.model;
        let mut rope = match self.rope.split {
            Some(split) => RopeConfig::with_split(m.head_dim, self.rope.base, split)?,
            None => {
                let mut r = RopeConfig::proportional(m.head_dim)?;
                r.base = self.rope.base;
                if !(r.base.is_finite() && r.base > 1.0) {
                    return Err(Error::InvalidConfig(format!(
                        "rotary base {} must exceed 1",
                        r.base
                    )));
                }
                r
            }
        };
        rope.offsets = self.rope.offsets;
        let audio_blocks: BTreeSet<usize> = match &m.audio_blocks {
            Some(list) => list.iter().copied().collect(),
            None => [m.blocks / 2].into_iter().collect(),
        };
        Ok(ModelConfig {
            blocks: m.blocks,
            model_dim: m.model_dim,
            heads: m.heads,
            head_dim: m.head_dim,
            audio_blocks,
            timestep_embed_dim: m.timestep_embed_dim,
            text_vocab: m.text_vocab,
            audio_dim: m.audio_dim,
            channels: m.channels,
            patch: m.patch,
            rope,
        })
    }

    pub fn stage(&self) -> Result<Stage> {
        Stage::from_str(&self.train.stage)
    }

    pub fn anchor_mode(&self) -> Result<AnchorMode> {
        AnchorMode::from_str(&self.train.mode)
    }

    /// Anchor kinds the training sampler requests for `stage`.
    pub fn train_anchor_kinds(&self, stage: Stage) -> Result<Vec<AnchorKind>> {
        let kinds = match &self.train.anchors {
            Some(names) => names
                .iter()
                .map(|n| parse_anchor_kind(n))
                .collect::<Result<Vec<_>>>()?,
            None => stage_default_anchors(stage),
        };
        check_stage_anchors(stage, &kinds)?;
        Ok(kinds)
    }

    /// Anchor kinds attached at generation time.
    pub fn sample_anchor_kinds(&self) -> Result<Vec<AnchorKind>> {
        match &self.sample.anchors {
            Some(names) => names.iter().map(|n| parse_anchor_kind(n)).collect(),
            None => Ok(vec![
                AnchorKind::Global,
                AnchorKind::Viewpoint,
                AnchorKind::Expression,
            ]),
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        Ok(TrainConfig {
            steps: self.train.steps,
            batch_size: self.train.batch_size,
            stage: self.stage()?,
            cfg_drop_prob: self.train.cfg_drop_prob,
            prefix_prob: self.train.prefix_prob,
            seed: self.seed,
            adam: self.train.adam.clone(),
        })
    }

    pub fn sample_config(&self) -> SampleConfig {
        SampleConfig {
            steps: self.sample.steps,
            cfg_scale: self.sample.cfg_scale,
            seed: self.seed,
        }
    }

    pub fn scenarios(&self) -> Result<Vec<Scenario>> {
        self.data
            .scenarios
            .iter()
            .map(|n| parse_scenario(n))
            .collect()
    }

    /// Cross-validate the whole document. Every command calls this before
    /// its first side effect.
    pub fn validate(&self) -> Result<()> {
        let model = self.model_config()?;
        model.validate()?;

        // Anchor offsets must clear every temporal position the video span
        // can reach: the chunk frames shifted by a motion prefix.
        let max_video_pos = (CHUNK_OVERLAP + CHUNK_LATENT_FRAMES - 1) as i64;
        model.rope.offsets.validate(max_video_pos)?;

        // The synthetic world fixes the latent and audio geometry.
        if model.channels != LATENT_C {
            return Err(Error::InvalidConfig(format!(
                "model channels {} but the latent world renders {}",
                model.channels, LATENT_C
            )));
        }
        if model.audio_dim != AUDIO_DIM {
            return Err(Error::InvalidConfig(format!(
                "model audio_dim {} but the audio features have {}",
                model.audio_dim, AUDIO_DIM
            )));
        }
        if model.text_vocab < crate::synth::TEXT_VOCAB {
            return Err(Error::InvalidConfig(format!(
                "text_vocab {} cannot hold the {} command ids",
                model.text_vocab,
                crate::synth::TEXT_VOCAB
            )));
        }
        // The patch grid must tile every shape that becomes tokens: full
        // frames, body crops, head crops.
        let (ph, pw) = model.patch;
        let shapes = [
            ("full frame", LATENT_H, LATENT_W),
            (
                "body crop",
                crate::synth::BODY_ROWS.1 - crate::synth::BODY_ROWS.0,
                crate::synth::BODY_COLS.1 - crate::synth::BODY_COLS.0,
            ),
            (
                "head crop",
                crate::synth::HEAD_ROWS.1 - crate::synth::HEAD_ROWS.0,
                crate::synth::HEAD_COLS.1 - crate::synth::HEAD_COLS.0,
            ),
        ];
        for (name, h, w) in shapes {
            if h % ph != 0 || w % pw != 0 {
                return Err(Error::InvalidConfig(format!(
                    "patch {:?} does not tile the {} ({}x{})",
                    model.patch, name, h, w
                )));
            }
        }
        // Audio rows per clip must fit the per-frame window layout.
        if AUDIO_FRAMES_PER_CLIP > AUDIO_WINDOW * CLIP_FRAMES {
            return Err(Error::InvalidConfig(format!(
                "{} audio rows per clip exceed the {} window slots",
                AUDIO_FRAMES_PER_CLIP,
                AUDIO_WINDOW * CLIP_FRAMES
            )));
        }

        // Training knobs.
        let stage = self.stage()?;
        self.anchor_mode()?;
        self.train_anchor_kinds(stage)?;
        if self.train.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.train.cfg_drop_prob) {
            return Err(Error::InvalidConfig(format!(
                "cfg_drop_prob {} outside [0, 1)",
                self.train.cfg_drop_prob
            )));
        }
        if !(0.0..=1.0).contains(&self.train.prefix_prob) {
            return Err(Error::InvalidConfig(format!(
                "prefix_prob {} outside [0, 1]",
                self.train.prefix_prob
            )));
        }

        // Sampling knobs.
        self.sample_config().validate()?;
        self.sample_anchor_kinds()?;

        // Data knobs.
        if self.data.duration_s == 0 || self.data.duration_s % CLIP_SECONDS != 0 {
            return Err(Error::InvalidConfig(format!(
                "episode duration {} s is not a positive multiple of {} s",
                self.data.duration_s, CLIP_SECONDS
            )));
        }
        let scenarios = self.scenarios()?;
        if self.data.episodes > 0 && scenarios.is_empty() {
            return Err(Error::InvalidConfig(
                "episodes requested but the scenario list is empty".into(),
            ));
        }
        if self.threads == 0 {
            return Err(Error::InvalidConfig("threads must be at least 1".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        seed = 9
        [model]
        blocks = 2
        model_dim = 16
        heads = 2
        head_dim = 8
        timestep_embed_dim = 8
    "#;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg = RunConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.output_dir, PathBuf::from("runs"));
        assert_eq!(cfg.threads, 1);
        assert_eq!(cfg.train.steps, 1000);
        assert_eq!(cfg.sample.cfg_scale, 3.5);
        assert_eq!(cfg.data.scenarios, vec!["mixed".to_string()]);
        cfg.validate().unwrap();
        let model = cfg.model_config().unwrap();
        assert_eq!(model.audio_blocks, [1].into_iter().collect());
        assert_eq!(model.rope.split, (4, 2, 2));
        assert_eq!(model.rope.offsets, AnchorOffsets::default());
        assert_eq!(model.patch, (2, 2));
    }

    #[test]
    fn sections_override_the_defaults() {
        let text = format!(
            "{}\n{}",
            MINIMAL,
            r#"
            [rope]
            base = 500.0
            split = [4, 2, 2]
            [rope.offsets]
            viewpoint = 300
            expression = 300
            global = 300
            [train]
            stage = "3-joint"
            steps = 7
            mode = "intra_only"
            [sample]
            steps = 5
            cfg_scale = 2.0
            [data]
            episodes = 2
            duration_s = 10
            scenarios = ["idle", "turn_around"]
            "#
        );
        let cfg = RunConfig::from_toml(&text).unwrap();
        cfg.validate().unwrap();
        let model = cfg.model_config().unwrap();
        assert_eq!(model.rope.base, 500.0);
        assert_eq!(model.rope.offsets.global, 300);
        assert_eq!(cfg.stage().unwrap(), Stage::JointAnchors);
        assert_eq!(cfg.anchor_mode().unwrap(), AnchorMode::IntraOnly);
        assert_eq!(
            cfg.scenarios().unwrap(),
            vec![Scenario::Idle, Scenario::TurnAround]
        );
        assert_eq!(
            cfg.train_anchor_kinds(Stage::JointAnchors).unwrap().len(),
            3
        );
    }

    #[test]
    fn stage_one_refuses_requested_anchors() {
        let text = format!(
            "{}\n{}",
            MINIMAL,
            r#"
            [train]
            stage = "1"
            anchors = ["global"]
            "#
        );
        let cfg = RunConfig::from_toml(&text).unwrap();
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("stage 1"), "{}", err);
    }

    #[test]
    fn cross_validation_catches_bad_geometry() {
        // Offsets colliding with video positions.
        let t = format!("{}\n[rope.offsets]\nviewpoint = 10\nexpression = 400\nglobal = 600", MINIMAL);
        assert!(RunConfig::from_toml(&t).unwrap().validate().is_err());
        // Patch that cannot tile the body crop (6 columns).
        let t = format!("{}\npatch = [2, 4]", MINIMAL);
        assert!(RunConfig::from_toml(&t).unwrap().validate().is_err());
        // Audio dim that disagrees with the feature stream.
        let t = format!("{}\naudio_dim = 5", MINIMAL);
        assert!(RunConfig::from_toml(&t).unwrap().validate().is_err());
        // Duration off the clip grid.
        let t = format!("{}\n[data]\nduration_s = 7", MINIMAL);
        assert!(RunConfig::from_toml(&t).unwrap().validate().is_err());
        // Unknown scenario name.
        let t = format!("{}\n[data]\nscenarios = [\"sleep\"]", MINIMAL);
        assert!(RunConfig::from_toml(&t).unwrap().validate().is_err());
        // Unknown keys are rejected outright.
        assert!(RunConfig::from_toml(&format!("{}\nbogus = 1", MINIMAL)).is_err());
    }

    #[test]
    fn environment_overrides_out_dir_and_threads() {
        let mut cfg = RunConfig::from_toml(MINIMAL).unwrap();
        // Simulate the overrides directly: `apply_env` reads the process
        // environment, which is shared across test threads, so poke the
        // same code path through a scoped guard.
        std::env::set_var(ENV_OUT, "elsewhere");
        std::env::set_var(ENV_THREADS, "3");
        cfg.apply_env().unwrap();
        std::env::remove_var(ENV_OUT);
        std::env::remove_var(ENV_THREADS);
        assert_eq!(cfg.output_dir, PathBuf::from("elsewhere"));
        assert_eq!(cfg.threads, 3);
        // A garbage thread count is a config error.
        std::env::set_var(ENV_THREADS, "lots");
        let err = cfg.apply_env().unwrap_err();
        std::env::remove_var(ENV_THREADS);
        assert!(err.to_string().contains("thread count"), "{}", err);
    }
}
