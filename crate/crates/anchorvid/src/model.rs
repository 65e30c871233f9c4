//! The diffusion-transformer backbone.
//!
//! A stack of pre-norm blocks over the assembled token sequence: full
//! self-attention with rotary positions (anchor tokens sit at their far-away
//! temporal offsets and are otherwise ordinary tokens — nothing masks them
//! off), text cross-attention against a tiny learned command vocabulary, an
//! audio branch on a subset of blocks whose window attention ties latent
//! frame j to audio window j and nothing else, and an MLP. The timestep
//! enters through sinusoidal features and modulates the self-attention and
//! MLP norms with per-block learned shift/scale.
//!
//! Two interference guards are baked into initialization: the audio branch's
//! value projection starts at zero (so an untrained audio pathway is exactly
//! inert), and the output head starts at zero.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::{assemble_sequence, unpatchify, AnchorSet, LatentVideo, TokenSequence};
use crate::rope::{self, RopeConfig};
use crate::tensor::{ParamBinding, ParamStore, Tensor, Value};

/// Audio slots per window; also the pixel-to-latent temporal compression, so
/// one window lines up with exactly one latent frame.
pub const AUDIO_WINDOW: usize = 4;

/// Reserved command-vocabulary id for the learned "no text condition" state
/// used by classifier-free guidance. Real commands start at id 1.
pub const NULL_TEXT_ID: usize = 0;

/// Architecture settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub blocks: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub head_dim: usize,
    /// Blocks carrying the audio branch (default: every other block).
    pub audio_blocks: BTreeSet<usize>,
    /// Sinusoidal timestep feature count (even).
    pub timestep_embed_dim: usize,
    pub text_vocab: usize,
    pub audio_dim: usize,
    pub channels: usize,
    pub patch: (usize, usize),
    pub rope: RopeConfig,
}

impl ModelConfig {
    /// Every other block hosts the audio branch, starting at block 1.
    pub fn default_audio_blocks(blocks: usize) -> BTreeSet<usize> {
        (0..blocks).filter(|b| b % 2 == 1).collect()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch.0 * self.patch.1 * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads * self.head_dim != self.model_dim {
            return Err(Error::InvalidConfig(format!(
                "heads {} x head_dim {} != model_dim {}",
                self.heads, self.head_dim, self.model_dim
            )));
        }
        if self.blocks == 0 {
            return Err(Error::InvalidConfig("zero blocks".into()));
        }
        if let Some(&b) = self.audio_blocks.iter().find(|&&b| b >= self.blocks) {
            return Err(Error::InvalidConfig(format!(
                "audio block {} outside 0..{}",
                b, self.blocks
            )));
        }
        if self.timestep_embed_dim == 0 || self.timestep_embed_dim % 2 != 0 {
            return Err(Error::InvalidConfig(format!(
                "timestep_embed_dim {} must be positive and even",
                self.timestep_embed_dim
            )));
        }
        if self.text_vocab == 0 {
            return Err(Error::InvalidConfig("empty text vocabulary".into()));
        }
        if self.rope.head_dim != self.head_dim {
            return Err(Error::InvalidConfig(format!(
                "rotary head_dim {} vs attention head_dim {}",
                self.rope.head_dim, self.head_dim
            )));
        }
        Ok(())
    }
}

/// Per-clip audio features: one row per audio frame.
#[derive(Debug, Clone)]
pub struct AudioFeatures {
    data: Tensor,
}

impl AudioFeatures {
    pub fn new(data: Tensor) -> Result<Self> {
        if data.shape().len() != 2 {
            return Err(Error::shape(
                "audio_features",
                format!("expected frames x dim, got {:?}", data.shape()),
            ));
        }
        Ok(AudioFeatures { data })
    }

    pub fn frames(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn data(&self) -> &Tensor {
        &self.data
    }
}

/// Group audio frames into windows of [`AUDIO_WINDOW`]: zero-pad the tail to
/// a multiple of the window, then reshape to `N×4×d`. Window `j` holds audio
/// frames `4j..4j+3` and is bound to latent frame `j`.
pub fn reshape_audio_windows(a: &AudioFeatures) -> Result<Tensor> {
    let (f, d) = (a.frames(), a.dim());
    if f == 0 {
        return Err(Error::invalid("audio_windows", "zero audio frames"));
    }
    let padded = f.div_ceil(AUDIO_WINDOW) * AUDIO_WINDOW;
    let mut data = a.data.data().to_vec();
    data.resize(padded * d, 0.0);
    Ok(Tensor::from_parts(vec![padded / AUDIO_WINDOW, AUDIO_WINDOW, d], data))
}

/// Exactly `t_frames` windows as a flat `[t_frames*4, d]` matrix: truncate a
/// longer stream, zero-pad a shorter one.
fn windows_for_frames(a: &AudioFeatures, t_frames: usize) -> Result<Tensor> {
    let windows = reshape_audio_windows(a)?;
    let n = windows.shape()[0];
    let d = windows.shape()[2];
    let mut data = windows.data()[..n.min(t_frames) * AUDIO_WINDOW * d].to_vec();
    data.resize(t_frames * AUDIO_WINDOW * d, 0.0);
    Ok(Tensor::from_parts(vec![t_frames * AUDIO_WINDOW, d], data))
}

/// Everything the model is conditioned on beyond the noised video itself.
#[derive(Debug, Clone)]
pub struct Conditions {
    /// Command token ids (the classifier-free "unconditional" state is the
    /// dedicated null token).
    pub text_ids: Vec<usize>,
    /// Audio features; `None` means the audio condition is dropped and the
    /// audio branch is skipped entirely.
    pub audio: Option<AudioFeatures>,
    pub anchors: AnchorSet,
    pub first_frame: LatentVideo,
    /// Previous-chunk motion context (exactly 4 frames when present).
    pub prefix: Option<LatentVideo>,
}

/// One forward evaluation: the predicted velocity plus introspection handles.
pub struct ForwardPass {
    /// Velocity prediction over the video latents (same shape as the input).
    pub velocity: LatentVideo,
    /// The same prediction as raw video-segment tokens, still attached to the
    /// graph — this is what the training loss consumes.
    pub video_tokens: Value,
    /// Post-softmax self-attention weights per block,
    /// `[heads * L, L]` each.
    pub self_attention: Vec<Tensor>,
    /// Post-softmax audio window-attention weights per audio block,
    /// `(block index, [heads * video_tokens, 4])`.
    pub audio_attention: Vec<(usize, Tensor)>,
    /// Layout of the assembled sequence (segments, positions, mask).
    pub sequence: TokenSequence,
}

/// Initialize a fresh parameter store for the architecture.
pub fn init_params(cfg: &ModelConfig, rng: &mut impl Rng) -> Result<ParamStore> {
    cfg.validate()?;
    let d = cfg.model_dim;
    let pd = cfg.patch_dim();
    let std = 0.02;
    let mut s = ParamStore::new();

    s.insert("patch_proj/w", Tensor::randn(&[pd, d], std, rng));
    s.insert("patch_proj/b", Tensor::zeros(&[d]));

    s.insert(
        "time_embed/w1",
        Tensor::randn(&[cfg.timestep_embed_dim, d], std, rng),
    );
    s.insert("time_embed/b1", Tensor::zeros(&[d]));
    s.insert("time_embed/w2", Tensor::randn(&[d, d], std, rng));
    s.insert("time_embed/b2", Tensor::zeros(&[d]));

    s.insert("text_embed/table", Tensor::randn(&[cfg.text_vocab, d], std, rng));

    for b in 0..cfg.blocks {
        let p = |leaf: &str| format!("block{}/{}", b, leaf);
        // Modulations start at zero: at init the norms are unmodulated.
        s.insert(p("ada/w"), Tensor::zeros(&[d, 4 * d]));
        s.insert(p("ada/b"), Tensor::zeros(&[4 * d]));
        for proj in ["attn/wq", "attn/wk", "attn/wv", "attn/wo"] {
            s.insert(p(proj), Tensor::randn(&[d, d], std, rng));
        }
        for bias in ["attn/bq", "attn/bk", "attn/bv", "attn/bo"] {
            s.insert(p(bias), Tensor::zeros(&[d]));
        }
        for proj in ["text/wq", "text/wk", "text/wv", "text/wo"] {
            s.insert(p(proj), Tensor::randn(&[d, d], std, rng));
        }
        for bias in ["text/bq", "text/bk", "text/bv", "text/bo"] {
            s.insert(p(bias), Tensor::zeros(&[d]));
        }
        if cfg.audio_blocks.contains(&b) {
            s.insert(p("audio/wq"), Tensor::randn(&[d, d], std, rng));
            s.insert(p("audio/wk"), Tensor::randn(&[cfg.audio_dim, d], std, rng));
            // Zero value projection: the branch contributes exactly nothing
            // until training moves it.
            s.insert(p("audio/wv"), Tensor::zeros(&[cfg.audio_dim, d]));
            // The audio branch gets its own output projection so its updates
            // never share weights with the text pathway.
            s.insert(p("audio/wo"), Tensor::randn(&[d, d], std, rng));
            for bias in ["audio/bq", "audio/bk", "audio/bv", "audio/bo"] {
                s.insert(p(bias), Tensor::zeros(&[d]));
            }
        }
        s.insert(p("mlp/w1"), Tensor::randn(&[d, 4 * d], std, rng));
        s.insert(p("mlp/b1"), Tensor::zeros(&[4 * d]));
        s.insert(p("mlp/w2"), Tensor::randn(&[4 * d, d], std, rng));
        s.insert(p("mlp/b2"), Tensor::zeros(&[d]));
    }

    // Zero head: the untrained model predicts exactly zero velocity.
    s.insert("head/w", Tensor::zeros(&[d, pd]));
    s.insert("head/b", Tensor::zeros(&[pd]));
    Ok(s)
}

/// Sinusoidal features of the timestep (scaled by 1000), shape `[1, dim]`.
fn timestep_features(t: f64, dim: usize) -> Tensor {
    let half = dim / 2;
    let scaled = t * 1000.0;
    let mut out = vec![0.0; dim];
    for k in 0..half {
        let freq = 10000f64.powf(-(k as f64) / half as f64);
        out[2 * k] = (scaled * freq).sin();
        out[2 * k + 1] = (scaled * freq).cos();
    }
    Tensor::from_parts(vec![1, dim], out)
}

fn linear(x: &Value, b: &ParamBinding, w: &str, bias: &str) -> Result<Value> {
    let wv = b.value(w)?;
    let bv = b.value(bias)?;
    x.matmul(&wv)?.add(&bv)
}

const LN_EPS: f64 = 1e-6;

/// Full forward pass: assemble the sequence from the noised video and its
/// conditions, then evaluate the backbone.
pub fn forward(
    cfg: &ModelConfig,
    store: &ParamStore,
    x_t: &LatentVideo,
    t: f64,
    conds: &Conditions,
) -> Result<ForwardPass> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid("forward", format!("t = {} outside [0, 1]", t)));
    }
    let seq = assemble_sequence(
        &conds.first_frame,
        x_t,
        &conds.anchors,
        conds.prefix.as_ref(),
        cfg.patch,
    )?;
    forward_sequence(cfg, store, seq, t, conds, x_t.frames())
}

/// Backbone evaluation over an already-assembled sequence. Exposed so tests
/// can rearrange segments by hand; `forward` is the normal entry point.
pub fn forward_sequence(
    cfg: &ModelConfig,
    store: &ParamStore,
    seq: TokenSequence,
    t: f64,
    conds: &Conditions,
    video_frames: usize,
) -> Result<ForwardPass> {
    cfg.validate()?;
    for &id in &conds.text_ids {
        if id >= cfg.text_vocab {
            return Err(Error::invalid(
                "forward",
                format!("text id {} outside vocabulary of {}", id, cfg.text_vocab),
            ));
        }
    }
    if conds.text_ids.is_empty() {
        return Err(Error::invalid(
            "forward",
            "empty text ids; pass the null token to drop the text condition",
        ));
    }
    let d = cfg.model_dim;
    let l = seq.len();
    let (vs, vl) = seq.video_span();
    let tokens_per_frame = vl / video_frames.max(1);
    if tokens_per_frame * video_frames != vl {
        return Err(Error::shape(
            "forward",
            format!("{} video tokens not divisible into {} frames", vl, video_frames),
        ));
    }

    let binding = store.binding();

    // Positions -> rotary tables, with anchor roles pushed to their offsets.
    let positions = seq.effective_positions(&cfg.rope.offsets);
    let tables = rope::build_tables(&cfg.rope, &positions);

    // Shared projection of raw patch tokens into the model width.
    let raw = Value::constant(seq.tokens.clone());
    let mut h = linear(&raw, &binding, "patch_proj/w", "patch_proj/b")?;

    // Timestep pathway.
    let tf = Value::constant(timestep_features(t, cfg.timestep_embed_dim));
    let tf = linear(&tf, &binding, "time_embed/w1", "time_embed/b1")?.gelu()?;
    let tf = linear(&tf, &binding, "time_embed/w2", "time_embed/b2")?;

    // Text embeddings for the command ids.
    let table = binding.value("text_embed/table")?;
    let mut text_index = Vec::with_capacity(conds.text_ids.len() * d);
    for &id in &conds.text_ids {
        for c in 0..d {
            text_index.push(id * d + c);
        }
    }
    let text = table.gather(
        std::sync::Arc::new(text_index),
        &[conds.text_ids.len(), d],
    )?;

    // Audio windows aligned 1:1 with video frames.
    let audio_kv = match &conds.audio {
        Some(a) => Some(Value::constant(windows_for_frames(a, video_frames)?)),
        None => None,
    };

    let attn_scale = 1.0 / (cfg.head_dim as f64).sqrt();
    let mut self_attention = Vec::with_capacity(cfg.blocks);
    let mut audio_attention = Vec::new();

    for bidx in 0..cfg.blocks {
        let p = |leaf: &str| format!("block{}/{}", bidx, leaf);

        // Timestep modulation: four [D] rows (attention shift/scale, MLP
        // shift/scale).
        let ada = linear(&tf, &binding, &p("ada/w"), &p("ada/b"))?.reshape(&[4, d])?;
        let shift_attn = ada.slice_rows(0, 1)?.reshape(&[d])?;
        let scale_attn = ada.slice_rows(1, 1)?.reshape(&[d])?;
        let shift_mlp = ada.slice_rows(2, 1)?.reshape(&[d])?;
        let scale_mlp = ada.slice_rows(3, 1)?.reshape(&[d])?;

        // Self-attention over the whole sequence.
        let normed = h
            .layer_norm(LN_EPS)?
            .mul(&scale_attn.add_scalar(1.0)?)?
            .add(&shift_attn)?;
        let q = linear(&normed, &binding, &p("attn/wq"), &p("attn/bq"))?.rope(&tables, cfg.heads)?;
        let k = linear(&normed, &binding, &p("attn/wk"), &p("attn/bk"))?.rope(&tables, cfg.heads)?;
        let v = linear(&normed, &binding, &p("attn/wv"), &p("attn/bv"))?;
        let attn = Value::attention(&q, &k, &v, cfg.heads, attn_scale)?;
        self_attention.push(
            attn.attention_weights()
                .expect("attention node carries weights")
                .clone(),
        );
        let attn = linear(&attn, &binding, &p("attn/wo"), &p("attn/bo"))?;
        h = h.add(&attn)?;

        // Text cross-attention.
        let normed = h.layer_norm(LN_EPS)?;
        let q = linear(&normed, &binding, &p("text/wq"), &p("text/bq"))?;
        let k = linear(&text, &binding, &p("text/wk"), &p("text/bk"))?;
        let v = linear(&text, &binding, &p("text/wv"), &p("text/bv"))?;
        let ca = Value::attention(&q, &k, &v, cfg.heads, attn_scale)?;
        let ca = linear(&ca, &binding, &p("text/wo"), &p("text/bo"))?;
        h = h.add(&ca)?;

        // Audio branch: only on designated blocks, only when audio is
        // present, and only the video tokens receive a residual.
        if cfg.audio_blocks.contains(&bidx) {
            if let Some(kv) = &audio_kv {
                let normed = h.layer_norm(LN_EPS)?;
                let vid = normed.slice_rows(vs, vl)?;
                let q = linear(&vid, &binding, &p("audio/wq"), &p("audio/bq"))?;
                let k = linear(kv, &binding, &p("audio/wk"), &p("audio/bk"))?;
                let v = linear(kv, &binding, &p("audio/wv"), &p("audio/bv"))?;
                let wa = Value::window_attention(
                    &q,
                    &k,
                    &v,
                    cfg.heads,
                    attn_scale,
                    tokens_per_frame,
                    AUDIO_WINDOW,
                )?;
                audio_attention.push((
                    bidx,
                    wa.attention_weights()
                        .expect("attention node carries weights")
                        .clone(),
                ));
                let res = linear(&wa, &binding, &p("audio/wo"), &p("audio/bo"))?;
                // Pad the video-token residual back to full sequence length
                // with zero blocks; every non-video token gets exactly zero.
                let mut parts: Vec<Value> = Vec::with_capacity(3);
                if vs > 0 {
                    parts.push(Value::constant(Tensor::zeros(&[vs, d])));
                }
                parts.push(res);
                if vs + vl < l {
                    parts.push(Value::constant(Tensor::zeros(&[l - vs - vl, d])));
                }
                let padded = Value::concat_rows(&parts)?;
                h = h.add(&padded)?;
            }
        }

        // MLP.
        let normed = h
            .layer_norm(LN_EPS)?
            .mul(&scale_mlp.add_scalar(1.0)?)?
            .add(&shift_mlp)?;
        let m = linear(&normed, &binding, &p("mlp/w1"), &p("mlp/b1"))?.gelu()?;
        let m = linear(&m, &binding, &p("mlp/w2"), &p("mlp/b2"))?;
        h = h.add(&m)?;
    }

    // Final norm, zero-initialized head, video tokens only.
    let out = linear(&h.layer_norm(LN_EPS)?, &binding, "head/w", "head/b")?;
    let video_tokens = out.slice_rows(vs, vl)?;

    // Rebuild the latent grid from the predicted video tokens. Grid
    // positions are the canonical patch order of the video itself.
    let (vh, vw) = grid_of(&seq, vs, vl, video_frames, cfg)?;
    let grid_positions = canonical_positions(video_frames, vh, vw);
    let velocity = unpatchify(
        video_tokens.data(),
        &grid_positions,
        cfg.patch,
        (
            video_frames,
            vh * cfg.patch.0,
            vw * cfg.patch.1,
            cfg.channels,
        ),
    )?;

    Ok(ForwardPass {
        velocity,
        video_tokens,
        self_attention,
        audio_attention,
        sequence: seq,
    })
}

/// Patch-grid height/width of the video segment, recovered from its stored
/// positions (they are contiguous grid coordinates).
fn grid_of(
    seq: &TokenSequence,
    vs: usize,
    vl: usize,
    frames: usize,
    cfg: &ModelConfig,
) -> Result<(usize, usize)> {
    let per_frame = vl / frames.max(1);
    let mut max_h = 0i64;
    let mut max_w = 0i64;
    for p in &seq.positions[vs..vs + vl] {
        max_h = max_h.max(p.h);
        max_w = max_w.max(p.w);
    }
    let (nh, nw) = ((max_h + 1) as usize, (max_w + 1) as usize);
    if nh * nw != per_frame {
        return Err(Error::shape(
            "forward",
            format!("video grid {}x{} vs {} tokens per frame", nh, nw, per_frame),
        ));
    }
    let _ = cfg;
    Ok((nh, nw))
}

fn canonical_positions(frames: usize, nh: usize, nw: usize) -> Vec<rope::TokenPos> {
    let mut out = Vec::with_capacity(frames * nh * nw);
    for t in 0..frames {
        for i in 0..nh {
            for j in 0..nw {
                out.push(rope::TokenPos::new(t as i64, i as i64, j as i64));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::latent::{AnchorSet, Expression, SegmentRole, Viewpoint};
    use crate::tensor::max_abs_diff;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            blocks: 2,
            model_dim: 16,
            heads: 2,
            head_dim: 8,
            audio_blocks: ModelConfig::default_audio_blocks(2),
            timestep_embed_dim: 8,
            text_vocab: 4,
            audio_dim: 3,
            channels: 2,
            patch: (2, 2),
            rope: RopeConfig::proportional(8).unwrap(),
        }
    }

    fn random_latent(t: usize, h: usize, w: usize, c: usize, seed: u64) -> LatentVideo {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        LatentVideo::new(Tensor::randn(&[t, h, w, c], 1.0, &mut rng)).unwrap()
    }

    fn basic_conditions(seed: u64, with_audio: bool, frames: usize) -> Conditions {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let audio = if with_audio {
            Some(
                AudioFeatures::new(Tensor::randn(&[frames * AUDIO_WINDOW, 3], 1.0, &mut rng))
                    .unwrap(),
            )
        } else {
            None
        };
        Conditions {
            text_ids: vec![1],
            audio,
            anchors: AnchorSet::empty(),
            first_frame: random_latent(1, 4, 4, 2, seed + 1),
            prefix: None,
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = tiny_config();
        assert!(cfg.validate().is_ok());
        cfg.heads = 3;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_config();
        cfg.audio_blocks = [7].into_iter().collect();
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_config();
        cfg.timestep_embed_dim = 7;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn audio_window_reshape() {
        // 16 frames -> 4 windows of 4.
        let a = AudioFeatures::new(Tensor::full(&[16, 3], 1.0)).unwrap();
        let w = reshape_audio_windows(&a).unwrap();
        assert_eq!(w.shape(), &[4, 4, 3]);
        // 5 frames -> padded to 8, 2 windows, last 3 slots zero.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = AudioFeatures::new(Tensor::randn(&[5, 3], 1.0, &mut rng)).unwrap();
        let w = reshape_audio_windows(&a).unwrap();
        assert_eq!(w.shape(), &[2, 4, 3]);
        let flat = w.data();
        for slot in 5..8 {
            for c in 0..3 {
                assert_eq!(flat[slot * 3 + c], 0.0);
            }
        }
        // Flattening windows reproduces the padded stream.
        let mut padded = a.data().data().to_vec();
        padded.resize(8 * 3, 0.0);
        assert_eq!(flat, &padded[..]);
        // Empty stream is an error.
        let empty = AudioFeatures::new(Tensor::zeros(&[0, 3])).unwrap();
        assert!(reshape_audio_windows(&empty).is_err());
    }

    #[test]
    fn forward_shape_contract_and_determinism() {
        let cfg = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let store = init_params(&cfg, &mut rng).unwrap();
        let x = random_latent(3, 4, 4, 2, 2);
        let conds = basic_conditions(3, true, 3);
        let a = forward(&cfg, &store, &x, 0.4, &conds).unwrap();
        assert_eq!(a.velocity.data().shape(), x.data().shape());
        let b = forward(&cfg, &store, &x, 0.4, &conds).unwrap();
        assert_eq!(a.velocity.data(), b.velocity.data());
        // t outside [0,1] is rejected.
        assert!(forward(&cfg, &store, &x, 1.5, &conds).is_err());
        // Unknown text ids are rejected.
        let mut bad = conds.clone();
        bad.text_ids = vec![99];
        assert!(forward(&cfg, &store, &x, 0.4, &bad).is_err());
    }

    #[test]
    fn forward_with_anchors_and_prefix() {
        let cfg = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let store = init_params(&cfg, &mut rng).unwrap();
        let x = random_latent(2, 4, 4, 2, 5);
        let mut conds = basic_conditions(6, true, 2);
        conds.anchors.set_global(random_latent(1, 4, 4, 2, 7)).unwrap();
        conds
            .anchors
            .set_viewpoint(Viewpoint::Back, random_latent(1, 4, 2, 2, 8))
            .unwrap();
        conds
            .anchors
            .set_expression(Expression::Happy, random_latent(1, 2, 2, 2, 9))
            .unwrap();
        conds.prefix = Some(random_latent(4, 4, 4, 2, 10));
        let out = forward(&cfg, &store, &x, 0.7, &conds).unwrap();
        assert_eq!(out.velocity.data().shape(), x.data().shape());
        assert_eq!(out.self_attention.len(), cfg.blocks);
        assert_eq!(out.audio_attention.len(), cfg.audio_blocks.len());
    }

    #[test]
    fn zero_head_means_zero_velocity_at_init() {
        let cfg = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let store = init_params(&cfg, &mut rng).unwrap();
        let x = random_latent(2, 4, 4, 2, 12);
        let out = forward(&cfg, &store, &x, 0.3, &basic_conditions(13, true, 2)).unwrap();
        assert!(out.velocity.data().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn audio_branch_is_inert_at_init() {
        // With the audio value projection zero-initialized, enabling or
        // disabling audio leaves the forward pass bit-identical.
        let cfg = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut store = init_params(&cfg, &mut rng).unwrap();
        // Give the head real weights so the output is nonzero.
        store
            .set("head/w", Tensor::randn(&[16, 8], 0.1, &mut rng))
            .unwrap();
        let x = random_latent(3, 4, 4, 2, 15);
        let with_audio = forward(&cfg, &store, &x, 0.6, &basic_conditions(16, true, 3)).unwrap();
        let without = forward(&cfg, &store, &x, 0.6, &basic_conditions(16, false, 3)).unwrap();
        assert_eq!(with_audio.velocity.data(), without.velocity.data());
        assert!(with_audio
            .velocity
            .data()
            .data()
            .iter()
            .any(|&v| v != 0.0));
    }

    #[test]
    fn audio_attention_is_window_local() {
        // Make the audio branch live (nonzero value projection), then check
        // the stored weights only cover the in-window slots and that the
        // masked full matrix has zero mass elsewhere by construction.
        let cfg = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut store = init_params(&cfg, &mut rng).unwrap();
        for b in cfg.audio_blocks.iter() {
            store
                .set(
                    &format!("block{}/audio/wv", b),
                    Tensor::randn(&[3, 16], 0.1, &mut rng),
                )
                .unwrap();
        }
        let frames = 3;
        let x = random_latent(frames, 4, 4, 2, 18);
        let out = forward(&cfg, &store, &x, 0.5, &basic_conditions(19, true, frames)).unwrap();
        let tokens_per_frame = 4;
        for (_, w) in &out.audio_attention {
            assert_eq!(w.shape(), &[cfg.heads * frames * tokens_per_frame, AUDIO_WINDOW]);
            // Rows are softmax distributions over exactly the 4 own-window
            // slots; everything outside the window is structurally absent.
            for row in w.data().chunks(AUDIO_WINDOW) {
                let sum: f64 = row.iter().sum();
                assert!((sum - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn uniform_audio_slots_give_query_independent_output() {
        // When all 4 slots of each window hold the same feature vector, the
        // window-attention output is that vector's value projection no
        // matter what the queries look like.
        let cfg = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let mut store = init_params(&cfg, &mut rng).unwrap();
        for b in cfg.audio_blocks.iter() {
            store
                .set(
                    &format!("block{}/audio/wv", b),
                    Tensor::randn(&[3, 16], 0.2, &mut rng),
                )
                .unwrap();
        }
        let frames = 2;
        // Every window repeats one audio frame 4 times.
        let mut audio = Vec::new();
        for j in 0..frames {
            let base: Vec<f64> = (0..3).map(|c| (j * 3 + c) as f64 * 0.3 - 0.5).collect();
            for _ in 0..AUDIO_WINDOW {
                audio.extend_from_slice(&base);
            }
        }
        let a = AudioFeatures::new(
            Tensor::from_vec(vec![frames * AUDIO_WINDOW, 3], audio).unwrap(),
        )
        .unwrap();
        let x = random_latent(frames, 4, 4, 2, 21);
        let mut conds = basic_conditions(22, false, frames);
        conds.audio = Some(a);
        let out = forward(&cfg, &store, &x, 0.5, &conds).unwrap();
        // All rows of every window's weight block are softmax over equal
        // scores -> exactly uniform.
        for (_, w) in &out.audio_attention {
            for row in w.data().chunks(AUDIO_WINDOW) {
                for &v in row {
                    assert!((v - 0.25).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn anchor_segment_order_does_not_matter() {
        // Swap two anchor segments (keeping positions attached to their
        // tokens): attention is position-driven, so the output only moves at
        // floating-point reassociation level.
        let cfg = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut store = init_params(&cfg, &mut rng).unwrap();
        store
            .set("head/w", Tensor::randn(&[16, 8], 0.1, &mut rng))
            .unwrap();
        let x = random_latent(2, 4, 4, 2, 24);
        let mut conds = basic_conditions(25, false, 2);
        conds
            .anchors
            .set_viewpoint(Viewpoint::Front, random_latent(1, 4, 2, 2, 26))
            .unwrap();
        conds
            .anchors
            .set_expression(Expression::Sad, random_latent(1, 2, 2, 2, 27))
            .unwrap();

        let seq = assemble_sequence(&conds.first_frame, &x, &conds.anchors, None, cfg.patch)
            .unwrap();
        let base = forward_sequence(&cfg, &store, seq.clone(), 0.5, &conds, 2).unwrap();

        // Build a permuted sequence: swap the two anchor segments wholesale.
        let segs: Vec<_> = seq.segments.clone();
        let a = segs
            .iter()
            .find(|s| matches!(s.role, SegmentRole::Anchor(r) if r.kind == crate::latent::AnchorKind::Viewpoint))
            .copied()
            .unwrap();
        let b = segs
            .iter()
            .find(|s| matches!(s.role, SegmentRole::Anchor(r) if r.kind == crate::latent::AnchorKind::Expression))
            .copied()
            .unwrap();
        let width = seq.tokens.shape()[1];
        let mut order: Vec<usize> = (0..seq.len()).collect();
        let head: Vec<usize> = order.drain(..a.start).collect();
        // Remaining: [anchor a][anchor b] (a precedes b by construction).
        let mut permuted_rows = head;
        permuted_rows.extend(b.start..b.start + b.len);
        permuted_rows.extend(a.start..a.start + a.len);
        let mut tokens = Vec::with_capacity(seq.tokens.numel());
        let mut positions = Vec::with_capacity(seq.len());
        for &r in &permuted_rows {
            tokens.extend_from_slice(&seq.tokens.data()[r * width..(r + 1) * width]);
            positions.push(seq.positions[r]);
        }
        let mut segments = Vec::new();
        let mut cursor = 0;
        for s in &seq.segments {
            if s.start < a.start {
                segments.push(*s);
                cursor = s.start + s.len;
            }
        }
        segments.push(crate::latent::Segment {
            role: b.role,
            start: cursor,
            len: b.len,
        });
        segments.push(crate::latent::Segment {
            role: a.role,
            start: cursor + b.len,
            len: a.len,
        });
        let permuted = TokenSequence {
            tokens: Tensor::from_vec(vec![seq.len(), width], tokens).unwrap(),
            positions,
            segments,
            loss_mask: seq.loss_mask.clone(),
        };
        let swapped = forward_sequence(&cfg, &store, permuted, 0.5, &conds, 2).unwrap();
        let diff = max_abs_diff(base.velocity.data(), swapped.velocity.data()).unwrap();
        assert!(diff < 1e-9, "max diff {}", diff);
    }

    #[test]
    fn anchor_and_video_tokens_exchange_attention() {
        // No mask separates segments: in a randomly initialized model the
        // video->anchor attention mass is strictly positive in every block.
        let cfg = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let store = init_params(&cfg, &mut rng).unwrap();
        let x = random_latent(2, 4, 4, 2, 31);
        let mut conds = basic_conditions(32, false, 2);
        conds.anchors.set_global(random_latent(1, 4, 4, 2, 33)).unwrap();
        let out = forward(&cfg, &store, &x, 0.5, &conds).unwrap();
        let seq = &out.sequence;
        let (vs, vl) = seq.video_span();
        let anchor = seq
            .segment(SegmentRole::Anchor(crate::latent::AnchorRole::global()))
            .unwrap();
        let l = seq.len();
        for w in &out.self_attention {
            let mut mass = 0.0;
            for h in 0..cfg.heads {
                for q in vs..vs + vl {
                    for k in anchor.start..anchor.start + anchor.len {
                        mass += w.data()[(h * l + q) * l + k];
                    }
                }
            }
            assert!(mass > 0.0);
        }
    }
}
