//! Anchor extraction: from pose/expression streams to a per-source index of
//! anchor-worthy frames.
//!
//! The stages mirror a real footage pipeline at desk scale: fixed-length
//! clip segmentation, geometric viewpoint classification from pose streams,
//! expression-window selection by label diversity, and a verification round
//! through a judge client (deterministic mock here, wire-format stub for a
//! remote service). Upstream quality filters are pass-through stages with
//! logging hooks so the call sites match a production layout.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::{Expression, Viewpoint};
use crate::synth::{EpisodeRecord, CLIP_SECONDS, LATENT_FPS, PIXEL_FPS};

const UNIT_TOL: f64 = 1e-6;

/// One pose observation: where the character faces and where the camera
/// looks, both unit vectors in world coordinates (y is up).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseSample {
    pub time_s: f64,
    pub forward: [f64; 3],
    pub camera_dir: [f64; 3],
}

/// One expression observation from an upstream recognizer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpressionSample {
    pub time_s: f64,
    pub label: Expression,
    pub confidence: f64,
}

fn norm(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

impl PoseSample {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("forward", self.forward), ("camera_dir", self.camera_dir)] {
            if (norm(v) - 1.0).abs() > UNIT_TOL {
                return Err(Error::invalid(
                    "PoseSample",
                    format!("{} is not a unit vector (norm {})", name, norm(v)),
                ));
            }
        }
        if !self.time_s.is_finite() || self.time_s < 0.0 {
            return Err(Error::invalid("PoseSample", "time must be finite and nonnegative"));
        }
        Ok(())
    }
}

/// Classify a pose into the four-way viewpoint taxonomy.
///
/// The facing angle is `arccos(forward . camera_dir)`: above 135° the
/// character faces the camera (front), below 45° it faces away (back).
/// The lateral band, boundaries included, splits by the sign of
/// `(camera_dir x forward) . up`: nonnegative means left, negative right.
pub fn classify_viewpoint(sample: &PoseSample) -> Result<Viewpoint> {
    sample.validate()?;
    let cosine = dot(sample.forward, sample.camera_dir).clamp(-1.0, 1.0);
    let theta_deg = cosine.acos().to_degrees();
    if theta_deg > 135.0 {
        return Ok(Viewpoint::Front);
    }
    if theta_deg < 45.0 {
        return Ok(Viewpoint::Back);
    }
    let up = [0.0, 1.0, 0.0];
    let side = dot(cross(sample.camera_dir, sample.forward), up);
    if side >= 0.0 {
        Ok(Viewpoint::Left)
    } else {
        Ok(Viewpoint::Right)
    }
}

/// Pose for a scripted yaw under the synthetic camera (at +z looking down
/// the -z axis). Yaw 0 faces the camera.
pub fn pose_from_yaw(time_s: f64, yaw_deg: f64) -> PoseSample {
    let r = yaw_deg.to_radians();
    PoseSample {
        time_s,
        forward: [r.sin(), 0.0, r.cos()],
        camera_dir: [0.0, 0.0, -1.0],
    }
}

/// A fixed-length segmentation window over source footage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipWindow {
    pub index: usize,
    pub start_s: f64,
    pub end_s: f64,
    /// First pixel frame of the window and the window's pixel-frame count.
    pub start_frame: usize,
    pub frames: usize,
}

/// Cut a source of `duration_s` into non-overlapping `clip_s` windows at
/// `fps`; the remainder shorter than one clip is dropped. A source shorter
/// than one clip is an error.
pub fn segment_clips(duration_s: f64, clip_s: f64, fps: f64) -> Result<Vec<ClipWindow>> {
    if !(duration_s.is_finite() && clip_s.is_finite() && fps.is_finite()) || clip_s <= 0.0 || fps <= 0.0 {
        return Err(Error::invalid("segment_clips", "durations and fps must be positive"));
    }
    if duration_s < clip_s {
        return Err(Error::invalid(
            "segment_clips",
            format!("source of {} s is shorter than one {} s clip", duration_s, clip_s),
        ));
    }
    let count = (duration_s / clip_s).floor() as usize;
    let frames_per_clip = (clip_s * fps).round() as usize;
    Ok((0..count)
        .map(|k| ClipWindow {
            index: k,
            start_s: k as f64 * clip_s,
            end_s: (k + 1) as f64 * clip_s,
            start_frame: k * frames_per_clip,
            frames: frames_per_clip,
        })
        .collect())
}

/// Indices of the windows holding at least two distinct labels observed at
/// or above the confidence threshold.
pub fn select_expression_clips(
    stream: &[ExpressionSample],
    windows: &[ClipWindow],
    min_confidence: f64,
) -> Result<Vec<usize>> {
    if stream.is_empty() {
        return Err(Error::invalid("select_expression_clips", "empty expression stream"));
    }
    let mut out = Vec::new();
    for w in windows {
        let mut labels: Vec<Expression> = stream
            .iter()
            .filter(|s| s.confidence >= min_confidence && s.time_s >= w.start_s && s.time_s < w.end_s)
            .map(|s| s.label)
            .collect();
        labels.sort_by_key(|l| l.index());
        labels.dedup();
        if labels.len() >= 2 {
            out.push(w.index);
        }
    }
    Ok(out)
}

/// Reference to one frame of one source, as sent to a judge.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FrameRef {
    pub source_id: String,
    /// Latent-frame index within the source.
    pub frame_index: usize,
}

/// A proposed expression anchor awaiting verification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpressionCandidate {
    pub frame: FrameRef,
    pub label: Expression,
}

/// Judge verdict on one proposed label.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Verdict {
    Confirm,
    Relabel(Expression),
    Reject,
}

/// Anything that can adjudicate a proposed expression label for a frame.
pub trait JudgeClient {
    fn judge(&mut self, frame: &FrameRef, proposed: Expression) -> Result<Verdict>;
}

/// Run every candidate through the judge: confirmations keep the label,
/// relabels replace it, rejections drop the candidate. A failed call is
/// retried once; a second failure drops the candidate with a warning.
pub fn verify_expressions(
    candidates: &[ExpressionCandidate],
    judge: &mut dyn JudgeClient,
) -> Vec<ExpressionCandidate> {
    let mut out = Vec::new();
    for c in candidates {
        let verdict = judge.judge(&c.frame, c.label).or_else(|first| {
            log::debug!(
                "judge call failed for {}#{} ({}); retrying",
                c.frame.source_id,
                c.frame.frame_index,
                first
            );
            judge.judge(&c.frame, c.label)
        });
        match verdict {
            Ok(Verdict::Confirm) => out.push(c.clone()),
            Ok(Verdict::Relabel(l)) => out.push(ExpressionCandidate {
                frame: c.frame.clone(),
                label: l,
            }),
            Ok(Verdict::Reject) => {}
            Err(e) => {
                log::warn!(
                    "dropping candidate {}#{} after two failed judge calls: {}",
                    c.frame.source_id,
                    c.frame.frame_index,
                    e
                );
            }
        }
    }
    out
}

/// Deterministic judge that knows the scripted labels of one source.
/// Matching proposals are confirmed, mismatches relabeled, unknown frames
/// rejected.
pub struct GroundTruthJudge {
    truth: BTreeMap<FrameRef, Expression>,
}

impl GroundTruthJudge {
    pub fn new(truth: BTreeMap<FrameRef, Expression>) -> Self {
        Self { truth }
    }

    /// Truth table for a scripted episode.
    pub fn for_episode(source_id: &str, episode: &EpisodeRecord) -> Self {
        let truth = episode
            .expressions
            .iter()
            .enumerate()
            .map(|(f, &e)| {
                (
                    FrameRef {
                        source_id: source_id.to_string(),
                        frame_index: f,
                    },
                    e,
                )
            })
            .collect();
        Self::new(truth)
    }
}

impl JudgeClient for GroundTruthJudge {
    fn judge(&mut self, frame: &FrameRef, proposed: Expression) -> Result<Verdict> {
        match self.truth.get(frame) {
            None => Ok(Verdict::Reject),
            Some(&t) if t == proposed => Ok(Verdict::Confirm),
            Some(&t) => Ok(Verdict::Relabel(t)),
        }
    }
}

/// Wire format of a judge request/response pair, for a remote judge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeRequest {
    pub frame: FrameRef,
    pub proposed: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "verdict", content = "label")]
pub enum JudgeResponse {
    Confirm,
    Relabel(String),
    Reject,
}

/// Transport for a remote judge: one request, one response.
pub trait JudgeTransport {
    fn round_trip(&mut self, request: &JudgeRequest) -> Result<JudgeResponse>;
}

/// Judge client speaking the wire format over any transport.
pub struct RemoteJudge<T: JudgeTransport> {
    pub transport: T,
}

pub fn expression_by_name(name: &str) -> Result<Expression> {
    Expression::ALL
        .iter()
        .copied()
        .find(|e| e.name() == name)
        .ok_or_else(|| Error::invalid("expression_by_name", format!("unknown label {:?}", name)))
}

impl<T: JudgeTransport> JudgeClient for RemoteJudge<T> {
    fn judge(&mut self, frame: &FrameRef, proposed: Expression) -> Result<Verdict> {
        let request = JudgeRequest {
            frame: frame.clone(),
            proposed: proposed.name().to_string(),
        };
        match self.transport.round_trip(&request)? {
            JudgeResponse::Confirm => Ok(Verdict::Confirm),
            JudgeResponse::Relabel(name) => Ok(Verdict::Relabel(expression_by_name(&name)?)),
            JudgeResponse::Reject => Ok(Verdict::Reject),
        }
    }
}

/// Per-source index of anchor-worthy frames, all on the latent timeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorIndex {
    pub source_id: String,
    pub frames: usize,
    /// Fixed candidate frames for the global anchor, evenly spread.
    pub global_candidates: Vec<usize>,
    /// Frames per viewpoint sub-index.
    pub viewpoints: BTreeMap<usize, Vec<usize>>,
    /// Verified frames per expression sub-index.
    pub expressions: BTreeMap<usize, Vec<usize>>,
}

impl AnchorIndex {
    pub fn time_of(&self, frame: usize) -> f64 {
        frame as f64 / LATENT_FPS as f64
    }

    pub fn to_manifest(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format {
            path: "anchor index manifest".into(),
            detail: e.to_string(),
        })
    }

    pub fn from_manifest(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format {
            path: "anchor index manifest".into(),
            detail: e.to_string(),
        })
    }
}

/// Number of global candidate frames held per source.
pub const GLOBAL_CANDIDATES: usize = 10;

/// Evenly spread frame indices (first and last included).
pub fn spread_frames(frames: usize, count: usize) -> Vec<usize> {
    if count == 0 || frames == 0 {
        return Vec::new();
    }
    if count == 1 {
        return vec![0];
    }
    let mut out: Vec<usize> = (0..count)
        .map(|k| ((k * (frames - 1)) as f64 / (count - 1) as f64).round() as usize)
        .collect();
    out.dedup();
    out
}

/// Scripted expression stream of an episode at the latent frame rate, with
/// full confidence.
pub fn episode_expression_stream(episode: &EpisodeRecord) -> Vec<ExpressionSample> {
    episode
        .expressions
        .iter()
        .enumerate()
        .map(|(f, &label)| ExpressionSample {
            time_s: f as f64 / LATENT_FPS as f64,
            label,
            confidence: 1.0,
        })
        .collect()
}

/// Expression candidates from qualifying windows: for each distinct
/// qualifying label in a window, the middle frame of its observations.
pub fn expression_candidates(
    source_id: &str,
    stream: &[ExpressionSample],
    windows: &[ClipWindow],
    min_confidence: f64,
) -> Result<Vec<ExpressionCandidate>> {
    let qualifying = select_expression_clips(stream, windows, min_confidence)?;
    let mut out = Vec::new();
    for wi in qualifying {
        let w = windows[wi];
        let mut by_label: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for s in stream {
            if s.confidence >= min_confidence && s.time_s >= w.start_s && s.time_s < w.end_s {
                let frame = (s.time_s * LATENT_FPS as f64).round() as usize;
                by_label.entry(s.label.index()).or_default().push(frame);
            }
        }
        for (label_idx, frames) in by_label {
            let mid = frames[frames.len() / 2];
            out.push(ExpressionCandidate {
                frame: FrameRef {
                    source_id: source_id.to_string(),
                    frame_index: mid,
                },
                label: Expression::from_index(label_idx)?,
            });
        }
    }
    Ok(out)
}

/// Build the anchor index of one episode: spread global candidates,
/// geometry-classified viewpoint frames, and judge-verified expression
/// frames.
pub fn build_index(
    source_id: &str,
    episode: &EpisodeRecord,
    judge: &mut dyn JudgeClient,
) -> Result<AnchorIndex> {
    let frames = episode.latent_frames();
    let global_candidates = spread_frames(frames, GLOBAL_CANDIDATES);

    let mut viewpoints: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (f, &yaw) in episode.yaw.iter().enumerate() {
        let vp = classify_viewpoint(&pose_from_yaw(f as f64 / LATENT_FPS as f64, yaw))?;
        viewpoints.entry(vp.index()).or_default().push(f);
    }
    viewpoints.retain(|_, v| !v.is_empty());

    let stream = episode_expression_stream(episode);
    let windows = segment_clips(episode.duration_s as f64, CLIP_SECONDS as f64, PIXEL_FPS as f64)?;
    let candidates = expression_candidates(source_id, &stream, &windows, 0.5)?;
    let verified = verify_expressions(&candidates, judge);
    let mut expressions: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for c in &verified {
        let slot = expressions.entry(c.label.index()).or_default();
        if !slot.contains(&c.frame.frame_index) {
            slot.push(c.frame.frame_index);
        }
    }
    for v in expressions.values_mut() {
        v.sort_unstable();
    }

    Ok(AnchorIndex {
        source_id: source_id.to_string(),
        frames,
        global_candidates,
        viewpoints,
        expressions,
    })
}

/// Upstream quality stages. At this scale every source passes; the stages
/// exist so the pipeline call sites and logs match a full deployment.
pub fn upstream_pass_through<T>(stage: &str, items: Vec<T>) -> Vec<T> {
    log::info!("{}: pass-through, {} item(s) kept", stage, items.len());
    items
}

pub fn filter_scene_quality<T>(items: Vec<T>) -> Vec<T> {
    upstream_pass_through("scene-quality filter", items)
}

pub fn filter_audio_sync<T>(items: Vec<T>) -> Vec<T> {
    upstream_pass_through("audio-sync filter", items)
}

pub fn filter_multi_person<T>(items: Vec<T>) -> Vec<T> {
    upstream_pass_through("multi-person filter", items)
}
