//! Training-example sampling: clip windows, anchor selection with
//! category balancing, superset (extra-clip) anchor preference, and prefix
//! attachment.
//!
//! A source pairs an episode with its anchor index. Examples are drawn by
//! picking a clip-aligned window, then anchors per requested kind: the
//! global anchor uniformly from the source's fixed candidate frames, and
//! viewpoint/expression anchors by first sampling a category from
//! importance weights matched to target ratios, then a frame of that
//! category. In superset mode frames outside the clip are preferred, so
//! anchor content is not implied by the clip; intra-only mode (the
//! ablation) restricts every anchor to the window and silently omits
//! categories absent from it.

use std::collections::BTreeMap;

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::TrainingExample;
use crate::latent::{AnchorKind, AnchorSet, Expression, LatentVideo, Viewpoint};
use crate::model::{AudioFeatures, Conditions};
use crate::pipeline::AnchorIndex;
use crate::synth::{EpisodeRecord, CLIP_FRAMES};

/// An episode plus its anchor index, ready for sampling.
#[derive(Debug, Clone)]
pub struct SourceVideo {
    pub source_id: String,
    pub episode: EpisodeRecord,
    pub index: AnchorIndex,
}

impl SourceVideo {
    pub fn new(source_id: &str, episode: EpisodeRecord, index: AnchorIndex) -> Result<Self> {
        if index.frames != episode.latent_frames() {
            return Err(Error::invalid(
                "SourceVideo",
                format!(
                    "index covers {} frames but episode has {}",
                    index.frames,
                    episode.latent_frames()
                ),
            ));
        }
        Ok(Self {
            source_id: source_id.to_string(),
            episode,
            index,
        })
    }

    pub fn duration_s(&self) -> usize {
        self.episode.duration_s
    }
}

/// Which clip of the source an example came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClipRef {
    /// 5 s block index.
    pub block: usize,
    /// First latent frame of the window.
    pub start: usize,
    /// Window length in latent frames.
    pub len: usize,
}

/// Uniformly random clip-aligned window. Alignment to the 5 s grid keeps
/// the command, audio, and latent timelines in integral correspondence.
pub fn sample_clip(src: &SourceVideo, rng: &mut impl Rng) -> Result<(LatentVideo, ClipRef)> {
    let blocks = src.episode.clip_blocks();
    if blocks == 0 {
        return Err(Error::invalid("sample_clip", "source shorter than one clip"));
    }
    let block = rng.gen_range(0..blocks);
    clip_at(src, block)
}

/// The clip at a specific block (deterministic companion of `sample_clip`).
pub fn clip_at(src: &SourceVideo, block: usize) -> Result<(LatentVideo, ClipRef)> {
    let start = block * CLIP_FRAMES;
    let clip = src.episode.video.slice_frames(start, CLIP_FRAMES)?;
    Ok((
        clip,
        ClipRef {
            block,
            start,
            len: CLIP_FRAMES,
        },
    ))
}

/// How anchor frames relate to the clip they condition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorMode {
    /// Prefer frames outside the clip, so anchors add information.
    Superset,
    /// Restrict frames to the clip window (ablation arm).
    IntraOnly,
}

impl std::str::FromStr for AnchorMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "superset" => Ok(AnchorMode::Superset),
            "intra_only" => Ok(AnchorMode::IntraOnly),
            other => Err(Error::invalid("AnchorMode", format!("unknown mode {:?}", other))),
        }
    }
}

/// Where one attached anchor came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnchorProvenance {
    pub kind: AnchorKind,
    pub sub_index: usize,
    pub frame_index: usize,
    /// True when the frame lies outside the clip window.
    pub extra_clip: bool,
}

/// Target category ratios, keyed by sub-index.
pub type CategoryTargets = BTreeMap<usize, f64>;

/// Published viewpoint mix: front 29.6%, back 17.3%, left 27.9%,
/// right 25.2%.
pub fn viewpoint_targets() -> CategoryTargets {
    let mut t = BTreeMap::new();
    t.insert(Viewpoint::Front.index(), 0.296);
    t.insert(Viewpoint::Back.index(), 0.173);
    t.insert(Viewpoint::Left.index(), 0.279);
    t.insert(Viewpoint::Right.index(), 0.252);
    t
}

/// Published expression mix: surprise 15.0%, angry 8.2%, disgust 13.7%,
/// fear 10.1%, contempt 13.6%, sad 16.7%, neutral 8.1%, happy 14.6%.
pub fn expression_targets() -> CategoryTargets {
    let mut t = BTreeMap::new();
    t.insert(Expression::Surprise.index(), 0.150);
    t.insert(Expression::Angry.index(), 0.082);
    t.insert(Expression::Disgust.index(), 0.137);
    t.insert(Expression::Fear.index(), 0.101);
    t.insert(Expression::Contempt.index(), 0.136);
    t.insert(Expression::Sad.index(), 0.167);
    t.insert(Expression::Neutral.index(), 0.081);
    t.insert(Expression::Happy.index(), 0.146);
    t
}

/// Importance weights over categories so that sampling matches the target
/// ratios. Support counts come from the index; a category with positive
/// target but no support is an error, and categories missing from the
/// target table get weight zero.
pub fn balance_ratios(
    support: &BTreeMap<usize, usize>,
    target: &CategoryTargets,
) -> Result<Vec<(usize, f64)>> {
    let mut total = 0.0;
    for (&cat, &ratio) in target {
        if !(ratio.is_finite() && ratio >= 0.0) {
            return Err(Error::invalid("balance_ratios", "target ratios must be nonnegative"));
        }
        if ratio > 0.0 && support.get(&cat).copied().unwrap_or(0) == 0 {
            return Err(Error::invalid(
                "balance_ratios",
                format!("category {} has target ratio {} but no support", cat, ratio),
            ));
        }
        total += ratio;
    }
    if total <= 0.0 {
        return Err(Error::invalid("balance_ratios", "target ratios sum to zero"));
    }
    Ok(target
        .iter()
        .filter(|(_, &r)| r > 0.0)
        .map(|(&cat, &r)| (cat, r / total))
        .collect())
}

/// Draw one category from balanced weights.
pub fn draw_category(weights: &[(usize, f64)], rng: &mut impl Rng) -> Result<usize> {
    let dist = WeightedIndex::new(weights.iter().map(|(_, w)| *w))
        .map_err(|e| Error::invalid("draw_category", e.to_string()))?;
    Ok(weights[dist.sample(rng)].0)
}

fn in_window(frame: usize, clip: &ClipRef) -> bool {
    frame >= clip.start && frame < clip.start + clip.len
}

/// Pick a frame of one category honoring the mode: superset prefers frames
/// outside the window (uniform among them), intra-only allows only frames
/// inside and reports `None` when the window has none.
fn pick_frame(
    frames: &[usize],
    clip: &ClipRef,
    mode: AnchorMode,
    rng: &mut impl Rng,
) -> Option<usize> {
    match mode {
        AnchorMode::Superset => {
            let extra: Vec<usize> = frames.iter().copied().filter(|&f| !in_window(f, clip)).collect();
            let pool = if extra.is_empty() { frames.to_vec() } else { extra };
            if pool.is_empty() {
                None
            } else {
                Some(pool[rng.gen_range(0..pool.len())])
            }
        }
        AnchorMode::IntraOnly => {
            let intra: Vec<usize> = frames.iter().copied().filter(|&f| in_window(f, clip)).collect();
            if intra.is_empty() {
                None
            } else {
                Some(intra[rng.gen_range(0..intra.len())])
            }
        }
    }
}

/// Sampler knobs: target tables and prefix probability.
#[derive(Debug, Clone)]
pub struct SamplerConfig {
    pub viewpoint_targets: CategoryTargets,
    pub expression_targets: CategoryTargets,
    pub prefix_prob: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            viewpoint_targets: viewpoint_targets(),
            expression_targets: expression_targets(),
            prefix_prob: 0.5,
        }
    }
}

/// Anchors for one clip. Returns the set plus per-anchor provenance.
pub fn sample_anchors(
    src: &SourceVideo,
    clip: &ClipRef,
    kinds: &[AnchorKind],
    mode: AnchorMode,
    cfg: &SamplerConfig,
    rng: &mut impl Rng,
) -> Result<(AnchorSet, Vec<AnchorProvenance>)> {
    let mut anchors = AnchorSet::empty();
    let mut provenance = Vec::new();
    for &kind in kinds {
        match kind {
            AnchorKind::Global => {
                if src.index.global_candidates.is_empty() {
                    return Err(Error::invalid("sample_anchors", "no global candidate frames"));
                }
                let frame = match mode {
                    AnchorMode::Superset => {
                        let c = &src.index.global_candidates;
                        c[rng.gen_range(0..c.len())]
                    }
                    AnchorMode::IntraOnly => {
                        let inside: Vec<usize> = src
                            .index
                            .global_candidates
                            .iter()
                            .copied()
                            .filter(|&f| in_window(f, clip))
                            .collect();
                        if inside.is_empty() {
                            // No candidate falls in this window; any window
                            // frame keeps the ablation self-contained.
                            clip.start + rng.gen_range(0..clip.len)
                        } else {
                            inside[rng.gen_range(0..inside.len())]
                        }
                    }
                };
                anchors.set_global(src.episode.video.frame(frame)?)?;
                provenance.push(AnchorProvenance {
                    kind,
                    sub_index: 0,
                    frame_index: frame,
                    extra_clip: !in_window(frame, clip),
                });
            }
            AnchorKind::Viewpoint => {
                if src.index.viewpoints.is_empty() {
                    return Err(Error::invalid(
                        "sample_anchors",
                        "viewpoint anchors requested but the index has none",
                    ));
                }
                let support: BTreeMap<usize, usize> = src
                    .index
                    .viewpoints
                    .iter()
                    .map(|(&k, v)| (k, v.len()))
                    .collect();
                let target: CategoryTargets = cfg
                    .viewpoint_targets
                    .iter()
                    .filter(|(k, _)| support.contains_key(k))
                    .map(|(&k, &v)| (k, v))
                    .collect();
                let weights = balance_ratios(&support, &target)?;
                let cat = draw_category(&weights, rng)?;
                if let Some(frame) = pick_frame(&src.index.viewpoints[&cat], clip, mode, rng) {
                    anchors.set_viewpoint(
                        Viewpoint::from_index(cat)?,
                        src.episode.body_crops.frame(frame)?,
                    )?;
                    provenance.push(AnchorProvenance {
                        kind,
                        sub_index: cat,
                        frame_index: frame,
                        extra_clip: !in_window(frame, clip),
                    });
                }
            }
            AnchorKind::Expression => {
                if src.index.expressions.is_empty() {
                    return Err(Error::invalid(
                        "sample_anchors",
                        "expression anchors requested but the index has none",
                    ));
                }
                let support: BTreeMap<usize, usize> = src
                    .index
                    .expressions
                    .iter()
                    .map(|(&k, v)| (k, v.len()))
                    .collect();
                let target: CategoryTargets = cfg
                    .expression_targets
                    .iter()
                    .filter(|(k, _)| support.contains_key(k))
                    .map(|(&k, &v)| (k, v))
                    .collect();
                let weights = balance_ratios(&support, &target)?;
                let cat = draw_category(&weights, rng)?;
                if let Some(frame) = pick_frame(&src.index.expressions[&cat], clip, mode, rng) {
                    anchors.set_expression(
                        Expression::from_index(cat)?,
                        src.episode.head_crops.frame(frame)?,
                    )?;
                    provenance.push(AnchorProvenance {
                        kind,
                        sub_index: cat,
                        frame_index: frame,
                        extra_clip: !in_window(frame, clip),
                    });
                }
            }
        }
    }
    Ok((anchors, provenance))
}

/// The 4 latent frames immediately preceding the window, when the source
/// has them and the coin lands: windows at the very start get none.
pub fn attach_prefix(
    src: &SourceVideo,
    clip: &ClipRef,
    prob: f64,
    rng: &mut impl Rng,
) -> Result<Option<LatentVideo>> {
    if clip.start < 4 {
        return Ok(None);
    }
    if rng.gen::<f64>() >= prob {
        return Ok(None);
    }
    Ok(Some(src.episode.video.slice_frames(clip.start - 4, 4)?))
}

/// One sampled training example with its bookkeeping.
#[derive(Debug, Clone)]
pub struct SampledExample {
    pub example: TrainingExample,
    pub clip: ClipRef,
    pub provenance: Vec<AnchorProvenance>,
}

/// Draw a complete training example: window, anchors, conditions, prefix.
pub fn sample_example(
    src: &SourceVideo,
    kinds: &[AnchorKind],
    mode: AnchorMode,
    cfg: &SamplerConfig,
    rng: &mut impl Rng,
) -> Result<SampledExample> {
    let (video, clip) = sample_clip(src, rng)?;
    let (anchors, provenance) = sample_anchors(src, &clip, kinds, mode, cfg, rng)?;
    let prefix = attach_prefix(src, &clip, cfg.prefix_prob, rng)?;
    let first_frame = video.frame(0)?;
    let conds = Conditions {
        text_ids: vec![src.episode.commands[clip.block]],
        audio: Some(AudioFeatures::new(src.episode.clip_audio(clip.block)?)?),
        anchors,
        first_frame,
        prefix,
    };
    Ok(SampledExample {
        example: TrainingExample {
            video,
            conds,
        },
        clip,
        provenance,
    })
}
