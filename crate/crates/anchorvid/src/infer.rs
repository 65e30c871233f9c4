//! Chunk-wise autoregressive inference: guided Euler denoising of
//! fixed-length chunks, prefix carryover between chunks, and linear
//! blending of the regenerated overlap.
//!
//! A long video is planned as overlapping 30-frame chunks with stride 26.
//! Chunk 0 denoises from the input frame alone; every later chunk is
//! conditioned on the 4 clean frames immediately preceding its window and
//! regenerates the 4-frame overlap, which is then cross-faded into the
//! previous chunk's version with pinned weights. The same anchor set is
//! attached to every chunk, so far-apart chunks share their references.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::{AnchorSet, LatentVideo};
use crate::model::{forward, AudioFeatures, Conditions, ModelConfig, NULL_TEXT_ID};
use crate::synth::{attention_probe, AUDIO_FRAMES_PER_CLIP, CLIP_FRAMES};
use crate::tensor::{ParamStore, Tensor};

/// Chunk geometry: 30-frame chunks overlapping by 4.
pub const CHUNK_LATENT_FRAMES: usize = 30;
pub const CHUNK_OVERLAP: usize = 4;
/// Cross-fade weights over the overlap, applied to the previous chunk's
/// version; the complement (the same table reversed) weights the new one.
pub const BLEND_WEIGHTS: [f64; 4] = [1.0, 0.67, 0.33, 0.0];

/// Sampler settings for one run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleConfig {
    pub steps: usize,
    pub cfg_scale: f64,
    pub seed: u64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            steps: 30,
            cfg_scale: 3.5,
            seed: 0,
        }
    }
}

impl SampleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::InvalidConfig("sampling needs at least one step".into()));
        }
        if !self.cfg_scale.is_finite() || self.cfg_scale < 0.0 {
            return Err(Error::InvalidConfig("guidance scale must be finite and nonnegative".into()));
        }
        Ok(())
    }
}

/// Mean attention mass per sequence segment, keyed by segment label.
pub type ProbeMasses = BTreeMap<String, f64>;

/// A velocity field v(x, t | conditions), optionally with an attention
/// readout taken from the same evaluation.
pub trait VelocityField {
    fn velocity(&self, x_t: &LatentVideo, t: f64, conds: &Conditions) -> Result<LatentVideo> {
        Ok(self.velocity_probed(x_t, t, conds, false)?.0)
    }

    /// Evaluate the field; when `want_probe` is set and the field can
    /// introspect attention, also return per-segment masses.
    fn velocity_probed(
        &self,
        x_t: &LatentVideo,
        t: f64,
        conds: &Conditions,
        want_probe: bool,
    ) -> Result<(LatentVideo, Option<ProbeMasses>)>;
}

/// The trained model as a velocity field. Probes read the self-attention
/// of `probe_block`.
pub struct ModelField<'a> {
    pub cfg: &'a ModelConfig,
    pub store: &'a ParamStore,
    pub probe_block: usize,
}

impl<'a> ModelField<'a> {
    pub fn new(cfg: &'a ModelConfig, store: &'a ParamStore) -> Self {
        Self {
            cfg,
            store,
            probe_block: cfg.blocks / 2,
        }
    }
}

impl VelocityField for ModelField<'_> {
    fn velocity_probed(
        &self,
        x_t: &LatentVideo,
        t: f64,
        conds: &Conditions,
        want_probe: bool,
    ) -> Result<(LatentVideo, Option<ProbeMasses>)> {
        let pass = forward(self.cfg, self.store, x_t, t, conds)?;
        let masses = if want_probe {
            let weights = pass.self_attention.get(self.probe_block).ok_or_else(|| {
                Error::invalid("ModelField", format!("probe block {} out of range", self.probe_block))
            })?;
            let masses = attention_probe(&pass.sequence, weights, self.cfg.heads)?;
            Some(masses.into_iter().collect())
        } else {
            None
        };
        Ok((pass.velocity, masses))
    }
}

/// Straight-line oracle: the exact field for transporting any start point
/// to a fixed target along the linear interpolation path.
pub struct LinearOracleField {
    pub target: LatentVideo,
}

impl VelocityField for LinearOracleField {
    fn velocity_probed(
        &self,
        x_t: &LatentVideo,
        t: f64,
        _conds: &Conditions,
        _want_probe: bool,
    ) -> Result<(LatentVideo, Option<ProbeMasses>)> {
        if !(0.0..1.0).contains(&t) {
            return Err(Error::invalid("LinearOracleField", format!("t = {}", t)));
        }
        // v = (target - x) / (1 - t) keeps Euler exactly on the line.
        let v = self.target.data().sub(x_t.data())?.scale(1.0 / (1.0 - t))?;
        Ok((LatentVideo::new(v)?, None))
    }
}

/// Classifier-free guidance: start from the unconditional estimate and move
/// `scale` of the way toward (and past) the conditional one.
pub fn cfg_combine(uncond: &LatentVideo, cond: &LatentVideo, scale: f64) -> Result<LatentVideo> {
    let u = uncond.data();
    let c = cond.data();
    LatentVideo::new(u.add(&c.sub(u)?.scale(scale)?)?)
}

/// The joint unconditional branch: text and audio both dropped, everything
/// else (anchors, first frame, prefix) kept.
pub fn unconditional(conds: &Conditions) -> Conditions {
    Conditions {
        text_ids: vec![NULL_TEXT_ID],
        audio: None,
        anchors: conds.anchors.clone(),
        first_frame: conds.first_frame.clone(),
        prefix: conds.prefix.clone(),
    }
}

/// Result of denoising one chunk.
pub struct ChunkOutcome {
    pub video: LatentVideo,
    /// Mean per-segment attention mass over steps (conditional branch),
    /// when the field can probe.
    pub masses: Option<ProbeMasses>,
}

/// Euler denoising of one chunk: x starts as standard normal, and each of
/// `steps` steps of size 1/steps follows the guided velocity. Prefix
/// latents live in the conditions, outside x, so they are never noised or
/// updated.
pub fn denoise_chunk(
    field: &dyn VelocityField,
    conds: &Conditions,
    frames: usize,
    scfg: &SampleConfig,
    rng: &mut ChaCha8Rng,
    collect_probe: bool,
) -> Result<ChunkOutcome> {
    scfg.validate()?;
    if frames == 0 {
        return Err(Error::invalid("denoise_chunk", "zero-frame chunk"));
    }
    let (h, w, c) = (
        conds.first_frame.height(),
        conds.first_frame.width(),
        conds.first_frame.channels(),
    );
    let mut x = LatentVideo::new(Tensor::randn(&[frames, h, w, c], 1.0, rng))?;
    let dt = 1.0 / scfg.steps as f64;
    let mut mass_sums: BTreeMap<String, f64> = BTreeMap::new();
    let uncond = unconditional(conds);
    for k in 0..scfg.steps {
        let t = k as f64 * dt;
        let (u_cond, masses) = field.velocity_probed(&x, t, conds, collect_probe)?;
        let (u_uncond, _) = field.velocity_probed(&x, t, &uncond, false)?;
        let u = cfg_combine(&u_uncond, &u_cond, scfg.cfg_scale)?;
        x = LatentVideo::new(x.data().axpy(dt, u.data())?)?;
        if let Some(m) = masses {
            for (k, v) in m {
                *mass_sums.entry(k).or_default() += v;
            }
        }
    }
    let masses = if mass_sums.is_empty() {
        None
    } else {
        Some(
            mass_sums
                .into_iter()
                .map(|(k, v)| (k, v / scfg.steps as f64))
                .collect(),
        )
    };
    Ok(ChunkOutcome { video: x, masses })
}

/// One chunk's span on the output timeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkSpan {
    pub index: usize,
    pub start: usize,
    pub len: usize,
}

/// The chunk layout of one long generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkPlan {
    pub total_frames: usize,
    pub chunk_len: usize,
    pub overlap: usize,
    pub blend: Vec<f64>,
    pub chunks: Vec<ChunkSpan>,
}

/// Plan chunk spans: stride `chunk_len - overlap`, last chunk truncated at
/// the end of the timeline. Every frame is covered and neighboring chunks
/// overlap by exactly `overlap` frames.
pub fn plan_chunks(total_frames: usize, chunk_len: usize, overlap: usize) -> Result<ChunkPlan> {
    if chunk_len <= overlap {
        return Err(Error::invalid(
            "plan_chunks",
            format!("chunk length {} must exceed overlap {}", chunk_len, overlap),
        ));
    }
    if total_frames < chunk_len {
        return Err(Error::invalid(
            "plan_chunks",
            format!("total {} shorter than one {}-frame chunk", total_frames, chunk_len),
        ));
    }
    let stride = chunk_len - overlap;
    let mut chunks = Vec::new();
    let mut start = 0;
    loop {
        let len = chunk_len.min(total_frames - start);
        chunks.push(ChunkSpan {
            index: chunks.len(),
            start,
            len,
        });
        if start + chunk_len >= total_frames {
            break;
        }
        start += stride;
    }
    let blend = if overlap == CHUNK_OVERLAP {
        BLEND_WEIGHTS.to_vec()
    } else {
        // Evenly spaced fade for non-default overlaps.
        (0..overlap)
            .map(|k| 1.0 - k as f64 / (overlap - 1).max(1) as f64)
            .collect()
    };
    Ok(ChunkPlan {
        total_frames,
        chunk_len,
        overlap,
        blend,
        chunks,
    })
}

/// Cross-fade the regenerated overlap into the previous version: frame k
/// takes `w[k]` of the previous chunk and `w[n-1-k]` (the reversed table)
/// of the new one.
pub fn blend_overlap(
    prev_tail: &LatentVideo,
    next_head: &LatentVideo,
    w: &[f64],
) -> Result<LatentVideo> {
    let n = w.len();
    if prev_tail.frames() != n || next_head.frames() != n {
        return Err(Error::shape(
            "blend_overlap",
            format!(
                "{} weights for {} previous / {} new frames",
                n,
                prev_tail.frames(),
                next_head.frames()
            ),
        ));
    }
    if prev_tail.data().shape() != next_head.data().shape() {
        return Err(Error::shape("blend_overlap", "mismatched overlap shapes"));
    }
    let per_frame = prev_tail.data().data().len() / n;
    let mut out = Vec::with_capacity(n * per_frame);
    for k in 0..n {
        let wp = w[k];
        let wn = w[n - 1 - k];
        for i in 0..per_frame {
            let p = prev_tail.data().data()[k * per_frame + i];
            let q = next_head.data().data()[k * per_frame + i];
            out.push(wp * p + wn * q);
        }
    }
    LatentVideo::new(Tensor::from_vec(prev_tail.data().shape().to_vec(), out)?)
}

/// Conditions shared by a whole long generation.
#[derive(Debug, Clone)]
pub struct GenerateSpec {
    pub text_ids: Vec<usize>,
    /// Audio for the full timeline: 96 rows per started 30-frame block.
    pub audio: Option<AudioFeatures>,
    /// Attached unchanged to every chunk.
    pub anchors: AnchorSet,
    /// The single input frame the video starts from.
    pub input_frame: LatentVideo,
}

/// Lay audio out as 4 rows per latent frame, block-wise: each 30-frame
/// block contributes its 96 real rows followed by 24 zero rows, exactly
/// the padding the per-clip window attention sees in training.
pub fn pad_audio_blockwise(audio: &AudioFeatures, total_frames: usize) -> Result<Tensor> {
    let blocks = total_frames.div_ceil(CLIP_FRAMES);
    if audio.frames() != blocks * AUDIO_FRAMES_PER_CLIP {
        return Err(Error::invalid(
            "pad_audio_blockwise",
            format!(
                "{} audio rows for {} frames ({} blocks need {})",
                audio.frames(),
                total_frames,
                blocks,
                blocks * AUDIO_FRAMES_PER_CLIP
            ),
        ));
    }
    let d = audio.dim();
    let rows_per_frame = 4;
    let mut out = vec![0.0; total_frames * rows_per_frame * d];
    let src = audio.data().data();
    for f in 0..total_frames {
        let block = f / CLIP_FRAMES;
        let local = f % CLIP_FRAMES;
        for r in 0..rows_per_frame {
            let src_row = local * rows_per_frame + r;
            if src_row >= AUDIO_FRAMES_PER_CLIP {
                continue; // tail frames of a block hear silence
            }
            let s = (block * AUDIO_FRAMES_PER_CLIP + src_row) * d;
            let t = (f * rows_per_frame + r) * d;
            out[t..t + d].copy_from_slice(&src[s..s + d]);
        }
    }
    Tensor::from_vec(vec![total_frames * rows_per_frame, d], out)
}

fn chunk_audio(
    padded: Option<&Tensor>,
    span: &ChunkSpan,
) -> Result<Option<AudioFeatures>> {
    let Some(p) = padded else { return Ok(None) };
    let d = p.shape()[1];
    let rows = 4;
    let start = span.start * rows * d;
    let end = (span.start + span.len) * rows * d;
    Ok(Some(AudioFeatures::new(Tensor::from_vec(
        vec![span.len * rows, d],
        p.data()[start..end].to_vec(),
    )?)?))
}

/// Record of one seam between consecutive chunks, for offline blend checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeamRecord {
    /// Overlap frames as produced by the previous chunk.
    pub prev_tail: Vec<f64>,
    /// The same frames regenerated by the next chunk.
    pub next_head: Vec<f64>,
    /// What went into the final video.
    pub blended: Vec<f64>,
}

/// Per-chunk log line of a long generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkReport {
    pub index: usize,
    pub start: usize,
    pub len: usize,
    pub had_prefix: bool,
    /// Mean attention mass per segment over the chunk's denoising steps
    /// (conditional branch), when the field can probe.
    pub anchor_masses: BTreeMap<String, f64>,
    pub seam: Option<SeamRecord>,
}

/// Full run report of one long generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub total_frames: usize,
    pub chunk_len: usize,
    pub overlap: usize,
    pub blend: Vec<f64>,
    pub steps: usize,
    pub cfg_scale: f64,
    pub seed: u64,
    pub chunks: Vec<ChunkReport>,
}

impl RunReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format {
            path: "run report".into(),
            detail: e.to_string(),
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format {
            path: "run report".into(),
            detail: e.to_string(),
        })
    }
}

/// Per-chunk noise seed: decorrelated from the run seed and the chunk
/// index, stable across runs.
pub fn chunk_seed(seed: u64, chunk_index: usize) -> u64 {
    seed ^ (chunk_index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Generate a long video chunk by chunk. Chunk 0 starts from the input
/// frame; every later chunk takes the 4 clean frames before its window as
/// prefix, regenerates the 4-frame overlap, and the overlap is cross-faded
/// with the pinned weights. The same anchors condition every chunk.
pub fn generate_long(
    field: &dyn VelocityField,
    spec: &GenerateSpec,
    total_frames: usize,
    scfg: &SampleConfig,
    collect_probe: bool,
) -> Result<(LatentVideo, RunReport)> {
    scfg.validate()?;
    let plan = plan_chunks(total_frames, CHUNK_LATENT_FRAMES, CHUNK_OVERLAP)?;
    let padded_audio = spec
        .audio
        .as_ref()
        .map(|a| pad_audio_blockwise(a, total_frames))
        .transpose()?;
    let (h, w, c) = (
        spec.input_frame.height(),
        spec.input_frame.width(),
        spec.input_frame.channels(),
    );
    spec.anchors.validate(h, w, c)?;

    let mut out = LatentVideo::zeros(total_frames, h, w, c);
    let mut chunk_reports = Vec::new();
    for span in &plan.chunks {
        let first_frame = if span.index == 0 {
            spec.input_frame.clone()
        } else {
            out.frame(span.start)?
        };
        let prefix = if span.index == 0 {
            None
        } else {
            Some(out.slice_frames(span.start - CHUNK_OVERLAP, CHUNK_OVERLAP)?)
        };
        let had_prefix = prefix.is_some();
        let conds = Conditions {
            text_ids: spec.text_ids.clone(),
            audio: chunk_audio(padded_audio.as_ref(), span)?,
            anchors: spec.anchors.clone(),
            first_frame,
            prefix,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(chunk_seed(scfg.seed, span.index));
        let outcome = denoise_chunk(field, &conds, span.len, scfg, &mut rng, collect_probe)?;
        let seam = if span.index == 0 {
            out = out.splice_frames(span.start, &outcome.video)?;
            None
        } else {
            let prev_tail = out.slice_frames(span.start, CHUNK_OVERLAP)?;
            let next_head = outcome.video.slice_frames(0, CHUNK_OVERLAP)?;
            let blended = blend_overlap(&prev_tail, &next_head, &plan.blend)?;
            out = out.splice_frames(span.start, &blended)?;
            let rest = outcome.video.slice_frames(CHUNK_OVERLAP, span.len - CHUNK_OVERLAP)?;
            out = out.splice_frames(span.start + CHUNK_OVERLAP, &rest)?;
            Some(SeamRecord {
                prev_tail: prev_tail.data().data().to_vec(),
                next_head: next_head.data().data().to_vec(),
                blended: blended.data().data().to_vec(),
            })
        };
        chunk_reports.push(ChunkReport {
            index: span.index,
            start: span.start,
            len: span.len,
            had_prefix,
            anchor_masses: outcome.masses.unwrap_or_default(),
            seam,
        });
    }
    let report = RunReport {
        total_frames,
        chunk_len: plan.chunk_len,
        overlap: plan.overlap,
        blend: plan.blend.clone(),
        steps: scfg.steps,
        cfg_scale: scfg.cfg_scale,
        seed: scfg.seed,
        chunks: chunk_reports,
    };
    Ok((out, report))
}
