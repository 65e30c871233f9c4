//! Latent videos, anchor sets, patch rearrangement and sequence assembly.
//!
//! The model never sees pixels: everything is a low-resolution latent grid
//! `T×H×W×C`. This module turns those grids into flat token matrices plus
//! per-token integer positions, and assembles the full training/inference
//! sequence — first frame, optional motion prefix, the (noised) video, and
//! any reference anchors — with the loss mask that restricts supervision to
//! the video tokens.
//!
//! Positions stored here are *raw* grid coordinates; the per-role temporal
//! offsets that push anchors far away on the rotary time axis are applied
//! later (see [`crate::rope::shifted_position`]).

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::rope::TokenPos;
use crate::tensor::Tensor;

/// Which reference slot an anchor occupies.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, serde::Serialize, serde::Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum AnchorKind {
    Global,
    Viewpoint,
    Expression,
}

/// Anchor slot: kind plus the sub-index that separates anchors of the same
/// kind (viewpoint 0..3, expression 0..7, global always 0).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct AnchorRole {
    pub kind: AnchorKind,
    pub sub_index: usize,
}

impl AnchorRole {
    pub fn global() -> Self {
        AnchorRole {
            kind: AnchorKind::Global,
            sub_index: 0,
        }
    }

    pub fn viewpoint(sub: usize) -> Self {
        AnchorRole {
            kind: AnchorKind::Viewpoint,
            sub_index: sub,
        }
    }

    pub fn expression(sub: usize) -> Self {
        AnchorRole {
            kind: AnchorKind::Expression,
            sub_index: sub,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let max = match self.kind {
            AnchorKind::Global => 0,
            AnchorKind::Viewpoint => 3,
            AnchorKind::Expression => 7,
        };
        if self.sub_index > max {
            return Err(Error::invalid(
                "anchor_role",
                format!("{:?} sub_index {} exceeds {}", self.kind, self.sub_index, max),
            ));
        }
        Ok(())
    }
}

/// The four canonical viewpoint slots.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, serde::Serialize, serde::Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum Viewpoint {
    Front = 0,
    Back = 1,
    Left = 2,
    Right = 3,
}

impl Viewpoint {
    pub const ALL: [Viewpoint; 4] = [
        Viewpoint::Front,
        Viewpoint::Back,
        Viewpoint::Left,
        Viewpoint::Right,
    ];

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::invalid("viewpoint", format!("index {}", i)))
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Viewpoint::Front => "front",
            Viewpoint::Back => "back",
            Viewpoint::Left => "left",
            Viewpoint::Right => "right",
        }
    }
}

/// The eight expression slots, in sub-index order.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, serde::Serialize, serde::Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum Expression {
    Surprise = 0,
    Angry = 1,
    Disgust = 2,
    Fear = 3,
    Contempt = 4,
    Sad = 5,
    Neutral = 6,
    Happy = 7,
}

impl Expression {
    pub const ALL: [Expression; 8] = [
        Expression::Surprise,
        Expression::Angry,
        Expression::Disgust,
        Expression::Fear,
        Expression::Contempt,
        Expression::Sad,
        Expression::Neutral,
        Expression::Happy,
    ];

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::invalid("expression", format!("index {}", i)))
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Expression::Surprise => "surprise",
            Expression::Angry => "angry",
            Expression::Disgust => "disgust",
            Expression::Fear => "fear",
            Expression::Contempt => "contempt",
            Expression::Sad => "sad",
            Expression::Neutral => "neutral",
            Expression::Happy => "happy",
        }
    }
}

/// A latent clip: `frames × height × width × channels`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentVideo {
    frames: usize,
    height: usize,
    width: usize,
    channels: usize,
    data: Tensor,
}

impl LatentVideo {
    pub fn new(data: Tensor) -> Result<Self> {
        let s = data.shape();
        if s.len() != 4 {
            return Err(Error::shape(
                "latent_video",
                format!("expected T×H×W×C, got {:?}", s),
            ));
        }
        if s[0] == 0 {
            return Err(Error::invalid("latent_video", "zero frames"));
        }
        Ok(LatentVideo {
            frames: s[0],
            height: s[1],
            width: s[2],
            channels: s[3],
            data,
        })
    }

    pub fn zeros(frames: usize, height: usize, width: usize, channels: usize) -> Self {
        LatentVideo {
            frames,
            height,
            width,
            channels,
            data: Tensor::zeros(&[frames, height, width, channels]),
        }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn data(&self) -> &Tensor {
        &self.data
    }

    pub fn get(&self, t: usize, h: usize, w: usize, c: usize) -> f64 {
        self.data.data()[((t * self.height + h) * self.width + w) * self.channels + c]
    }

    /// Single-frame sub-clip at frame `t`.
    pub fn frame(&self, t: usize) -> Result<LatentVideo> {
        self.slice_frames(t, 1)
    }

    /// Contiguous frame range `[start, start+len)`.
    pub fn slice_frames(&self, start: usize, len: usize) -> Result<LatentVideo> {
        if start + len > self.frames || len == 0 {
            return Err(Error::invalid(
                "slice_frames",
                format!("frames {}..{} of {}", start, start + len, self.frames),
            ));
        }
        let per = self.height * self.width * self.channels;
        let data = self.data.data()[start * per..(start + len) * per].to_vec();
        Ok(LatentVideo {
            frames: len,
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: Tensor::from_parts(
                vec![len, self.height, self.width, self.channels],
                data,
            ),
        })
    }

    /// Concatenate clips with identical spatial dims along time.
    pub fn concat_frames(parts: &[&LatentVideo]) -> Result<LatentVideo> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat_frames", "no parts"))?;
        let (h, w, c) = (first.height, first.width, first.channels);
        let mut frames = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.height != h || p.width != w || p.channels != c {
                return Err(Error::shape(
                    "concat_frames",
                    format!(
                        "{}x{}x{} vs {}x{}x{}",
                        p.height, p.width, p.channels, h, w, c
                    ),
                ));
            }
            frames += p.frames;
            data.extend_from_slice(p.data.data());
        }
        Ok(LatentVideo {
            frames,
            height: h,
            width: w,
            channels: c,
            data: Tensor::from_parts(vec![frames, h, w, c], data),
        })
    }

    /// Replace the frame range starting at `start` with `patch`'s frames.
    pub fn splice_frames(&self, start: usize, patch: &LatentVideo) -> Result<LatentVideo> {
        if patch.height != self.height
            || patch.width != self.width
            || patch.channels != self.channels
            || start + patch.frames > self.frames
        {
            return Err(Error::shape(
                "splice_frames",
                format!(
                    "patch {} frames at {} into {} frames",
                    patch.frames, start, self.frames
                ),
            ));
        }
        let per = self.height * self.width * self.channels;
        let mut data = self.data.data().to_vec();
        data[start * per..(start + patch.frames) * per].copy_from_slice(patch.data.data());
        Ok(LatentVideo {
            frames: self.frames,
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: Tensor::from_parts(
                vec![self.frames, self.height, self.width, self.channels],
                data,
            ),
        })
    }
}

/// The reference material attached to one training example or one generation
/// request: at most one latent per (kind, sub-index).
#[derive(Debug, Clone, Default)]
pub struct AnchorSet {
    pub global: Option<LatentVideo>,
    pub viewpoints: BTreeMap<usize, LatentVideo>,
    pub expressions: BTreeMap<usize, LatentVideo>,
}

impl AnchorSet {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn set_global(&mut self, latent: LatentVideo) -> Result<()> {
        if self.global.is_some() {
            return Err(Error::invalid("anchor_set", "duplicate global anchor"));
        }
        self.global = Some(latent);
        Ok(())
    }

    pub fn set_viewpoint(&mut self, vp: Viewpoint, latent: LatentVideo) -> Result<()> {
        if self.viewpoints.contains_key(&vp.index()) {
            return Err(Error::invalid(
                "anchor_set",
                format!("duplicate viewpoint anchor {}", vp.name()),
            ));
        }
        self.viewpoints.insert(vp.index(), latent);
        Ok(())
    }

    pub fn set_expression(&mut self, ex: Expression, latent: LatentVideo) -> Result<()> {
        if self.expressions.contains_key(&ex.index()) {
            return Err(Error::invalid(
                "anchor_set",
                format!("duplicate expression anchor {}", ex.name()),
            ));
        }
        self.expressions.insert(ex.index(), latent);
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.global.is_none() && self.viewpoints.is_empty() && self.expressions.is_empty()
    }

    pub fn count(&self) -> usize {
        usize::from(self.global.is_some()) + self.viewpoints.len() + self.expressions.len()
    }

    /// Anchors in canonical order: global, viewpoints by sub, expressions by
    /// sub. Iteration order is what fixes the assembled segment layout.
    pub fn ordered(&self) -> Vec<(AnchorRole, &LatentVideo)> {
        let mut out = Vec::with_capacity(self.count());
        if let Some(g) = &self.global {
            out.push((AnchorRole::global(), g));
        }
        for (&sub, l) in &self.viewpoints {
            out.push((AnchorRole::viewpoint(sub), l));
        }
        for (&sub, l) in &self.expressions {
            out.push((AnchorRole::expression(sub), l));
        }
        out
    }

    /// Every anchor must be a single frame; the global anchor, when present,
    /// must match the video's spatial resolution.
    pub fn validate(&self, video_h: usize, video_w: usize, channels: usize) -> Result<()> {
        for (role, latent) in self.ordered() {
            role.validate()?;
            if latent.frames() != 1 {
                return Err(Error::invalid(
                    "anchor_set",
                    format!("{:?} anchor has {} frames, want 1", role.kind, latent.frames()),
                ));
            }
            if latent.channels() != channels {
                return Err(Error::shape(
                    "anchor_set",
                    format!(
                        "{:?} anchor channels {} vs video {}",
                        role.kind,
                        latent.channels(),
                        channels
                    ),
                ));
            }
        }
        if let Some(g) = &self.global {
            if g.height() != video_h || g.width() != video_w {
                return Err(Error::shape(
                    "anchor_set",
                    format!(
                        "global anchor {}x{} vs video {}x{}",
                        g.height(),
                        g.width(),
                        video_h,
                        video_w
                    ),
                ));
            }
        }
        Ok(())
    }
}

/// What a token range in the assembled sequence stands for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SegmentRole {
    FirstFrame,
    Prefix,
    Video,
    Anchor(AnchorRole),
}

#[derive(Debug, Clone, Copy)]
pub struct Segment {
    pub role: SegmentRole,
    pub start: usize,
    pub len: usize,
}

/// A fully assembled token sequence ready for the backbone: raw patch
/// features, per-token grid positions, the segment map and the loss mask.
#[derive(Debug, Clone)]
pub struct TokenSequence {
    pub tokens: Tensor,
    pub positions: Vec<TokenPos>,
    pub segments: Vec<Segment>,
    pub loss_mask: Vec<bool>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn segment(&self, role: SegmentRole) -> Option<&Segment> {
        self.segments.iter().find(|s| s.role == role)
    }

    /// Start and length of the video segment (always present).
    pub fn video_span(&self) -> (usize, usize) {
        let s = self
            .segment(SegmentRole::Video)
            .expect("assembled sequences always contain a video segment");
        (s.start, s.len)
    }

    /// The segment role governing each token.
    pub fn roles(&self) -> Vec<SegmentRole> {
        let mut out = vec![SegmentRole::Video; self.len()];
        for seg in &self.segments {
            for slot in out.iter_mut().skip(seg.start).take(seg.len) {
                *slot = seg.role;
            }
        }
        out
    }

    /// Positions after applying each role's temporal anchor offset — what the
    /// rotary tables are actually built from.
    pub fn effective_positions(&self, offsets: &crate::rope::AnchorOffsets) -> Vec<TokenPos> {
        let roles = self.roles();
        self.positions
            .iter()
            .zip(roles)
            .map(|(&p, role)| crate::rope::shifted_position(p, role, offsets))
            .collect()
    }
}

/// Flat gather index realizing the patch rearrangement: output element `i` of
/// the token matrix reads latent element `index[i]`.
pub fn patch_index(
    frames: usize,
    height: usize,
    width: usize,
    channels: usize,
    patch: (usize, usize),
) -> Result<Vec<usize>> {
    let (ph, pw) = patch;
    if ph == 0 || pw == 0 || height % ph != 0 || width % pw != 0 {
        return Err(Error::invalid(
            "patchify",
            format!("{}x{} latent not divisible by {}x{} patches", height, width, ph, pw),
        ));
    }
    let (nh, nw) = (height / ph, width / pw);
    let mut index = Vec::with_capacity(frames * height * width * channels);
    for t in 0..frames {
        for i in 0..nh {
            for j in 0..nw {
                for dy in 0..ph {
                    for dx in 0..pw {
                        let (h, w) = (i * ph + dy, j * pw + dx);
                        let base = ((t * height + h) * width + w) * channels;
                        for c in 0..channels {
                            index.push(base + c);
                        }
                    }
                }
            }
        }
    }
    Ok(index)
}

/// Rearrange a latent clip into `[T·nh·nw, ph·pw·C]` patch tokens plus their
/// grid positions. Pure data movement — the learned projection to model width
/// lives in the backbone.
pub fn patchify(v: &LatentVideo, patch: (usize, usize)) -> Result<(Tensor, Vec<TokenPos>)> {
    let (ph, pw) = patch;
    let index = patch_index(v.frames(), v.height(), v.width(), v.channels(), patch)?;
    let src = v.data().data();
    let out: Vec<f64> = index.iter().map(|&i| src[i]).collect();
    let (nh, nw) = (v.height() / ph, v.width() / pw);
    let tokens = Tensor::from_parts(
        vec![v.frames() * nh * nw, ph * pw * v.channels()],
        out,
    );
    let mut positions = Vec::with_capacity(v.frames() * nh * nw);
    for t in 0..v.frames() {
        for i in 0..nh {
            for j in 0..nw {
                positions.push(TokenPos::new(t as i64, i as i64, j as i64));
            }
        }
    }
    Ok((tokens, positions))
}

/// Inverse of [`patchify`]: place each token back at its grid position.
/// Token order is free; coverage must be exact (each cell once).
pub fn unpatchify(
    tokens: &Tensor,
    positions: &[TokenPos],
    patch: (usize, usize),
    dims: (usize, usize, usize, usize),
) -> Result<LatentVideo> {
    let (frames, height, width, channels) = dims;
    let (ph, pw) = patch;
    if ph == 0 || pw == 0 || height % ph != 0 || width % pw != 0 {
        return Err(Error::invalid(
            "unpatchify",
            format!("{}x{} latent not divisible by {}x{} patches", height, width, ph, pw),
        ));
    }
    let (nh, nw) = (height / ph, width / pw);
    let want_tokens = frames * nh * nw;
    let patch_dim = ph * pw * channels;
    if tokens.shape() != [positions.len(), patch_dim] || positions.len() != want_tokens {
        return Err(Error::shape(
            "unpatchify",
            format!(
                "{} tokens of shape {:?}, want {} x {}",
                positions.len(),
                tokens.shape(),
                want_tokens,
                patch_dim
            ),
        ));
    }
    let mut out = vec![0.0; frames * height * width * channels];
    let mut seen = vec![false; want_tokens];
    let src = tokens.data();
    for (n, pos) in positions.iter().enumerate() {
        let (t, i, j) = (pos.t, pos.h, pos.w);
        if t < 0 || i < 0 || j < 0 {
            return Err(Error::invalid("unpatchify", format!("negative position {:?}", pos)));
        }
        let (t, i, j) = (t as usize, i as usize, j as usize);
        if t >= frames || i >= nh || j >= nw {
            return Err(Error::invalid(
                "unpatchify",
                format!("position {:?} outside {}x{}x{} grid", pos, frames, nh, nw),
            ));
        }
        let cell = (t * nh + i) * nw + j;
        if seen[cell] {
            return Err(Error::invalid(
                "unpatchify",
                format!("grid cell {:?} covered twice", pos),
            ));
        }
        seen[cell] = true;
        let tok = &src[n * patch_dim..(n + 1) * patch_dim];
        let mut k = 0;
        for dy in 0..ph {
            for dx in 0..pw {
                let (h, w) = (i * ph + dy, j * pw + dx);
                let base = ((t * height + h) * width + w) * channels;
                out[base..base + channels].copy_from_slice(&tok[k..k + channels]);
                k += channels;
            }
        }
    }
    if let Some(missing) = seen.iter().position(|&s| !s) {
        return Err(Error::invalid(
            "unpatchify",
            format!("grid cell index {} never covered", missing),
        ));
    }
    LatentVideo::new(Tensor::from_parts(
        vec![frames, height, width, channels],
        out,
    ))
}

/// Number of frames a motion prefix must have.
pub const PREFIX_FRAMES: usize = 4;

/// Build the full backbone input sequence.
///
/// Segment order is `[FirstFrame, Prefix?, Video, anchors…]` with anchors in
/// canonical order. Temporal positions: without a prefix the first frame and
/// video frame 0 share position 0; with a prefix, the four prefix frames take
/// positions 0..3 and the first frame plus video shift up by 4, keeping the
/// time axis contiguous across a chunk boundary. Anchor tokens keep their raw
/// single-frame positions here — their far-away temporal offsets are a
/// rotary-time concern, applied when attention runs.
pub fn assemble_sequence(
    first_frame: &LatentVideo,
    noised_video: &LatentVideo,
    anchors: &AnchorSet,
    prefix: Option<&LatentVideo>,
    patch: (usize, usize),
) -> Result<TokenSequence> {
    let (h, w, c) = (
        noised_video.height(),
        noised_video.width(),
        noised_video.channels(),
    );
    if first_frame.frames() != 1
        || first_frame.height() != h
        || first_frame.width() != w
        || first_frame.channels() != c
    {
        return Err(Error::shape(
            "assemble",
            format!(
                "first frame {}x{}x{}x{} vs video resolution {}x{}x{}",
                first_frame.frames(),
                first_frame.height(),
                first_frame.width(),
                first_frame.channels(),
                h,
                w,
                c
            ),
        ));
    }
    if let Some(p) = prefix {
        if p.frames() != PREFIX_FRAMES || p.height() != h || p.width() != w || p.channels() != c {
            return Err(Error::shape(
                "assemble",
                format!(
                    "prefix {}x{}x{}x{}, want {}x{}x{}x{}",
                    p.frames(),
                    p.height(),
                    p.width(),
                    p.channels(),
                    PREFIX_FRAMES,
                    h,
                    w,
                    c
                ),
            ));
        }
    }
    anchors.validate(h, w, c)?;

    let shift = if prefix.is_some() {
        PREFIX_FRAMES as i64
    } else {
        0
    };

    let mut parts: Vec<Tensor> = Vec::new();
    let mut positions: Vec<TokenPos> = Vec::new();
    let mut segments: Vec<Segment> = Vec::new();
    let mut cursor = 0usize;

    let mut push = |parts: &mut Vec<Tensor>,
                    positions: &mut Vec<TokenPos>,
                    segments: &mut Vec<Segment>,
                    role: SegmentRole,
                    tokens: Tensor,
                    pos: Vec<TokenPos>| {
        let len = pos.len();
        segments.push(Segment {
            role,
            start: cursor,
            len,
        });
        cursor += len;
        parts.push(tokens);
        positions.extend(pos);
    };

    // First frame, sharing its temporal position with video frame 0.
    let (ff_tokens, ff_pos) = patchify(first_frame, patch)?;
    let ff_pos = ff_pos
        .into_iter()
        .map(|p| TokenPos::new(p.t + shift, p.h, p.w))
        .collect();
    push(
        &mut parts,
        &mut positions,
        &mut segments,
        SegmentRole::FirstFrame,
        ff_tokens,
        ff_pos,
    );

    // Motion prefix at the positions directly before the video.
    if let Some(p) = prefix {
        let (tokens, pos) = patchify(p, patch)?;
        push(
            &mut parts,
            &mut positions,
            &mut segments,
            SegmentRole::Prefix,
            tokens,
            pos,
        );
    }

    // The (noised) video itself — the only supervised tokens.
    let (tokens, pos) = patchify(noised_video, patch)?;
    let pos = pos
        .into_iter()
        .map(|p| TokenPos::new(p.t + shift, p.h, p.w))
        .collect();
    push(
        &mut parts,
        &mut positions,
        &mut segments,
        SegmentRole::Video,
        tokens,
        pos,
    );

    // Reference anchors, canonical order.
    for (role, latent) in anchors.ordered() {
        let (tokens, pos) = patchify(latent, patch)?;
        push(
            &mut parts,
            &mut positions,
            &mut segments,
            SegmentRole::Anchor(role),
            tokens,
            pos,
        );
    }

    let refs: Vec<&Tensor> = parts.iter().collect();
    let tokens = concat_token_blocks(&refs)?;

    let mut loss_mask = vec![false; positions.len()];
    let (vs, vl) = {
        let s = segments
            .iter()
            .find(|s| s.role == SegmentRole::Video)
            .expect("video segment just pushed");
        (s.start, s.len)
    };
    for m in loss_mask.iter_mut().skip(vs).take(vl) {
        *m = true;
    }

    Ok(TokenSequence {
        tokens,
        positions,
        segments,
        loss_mask,
    })
}

fn concat_token_blocks(parts: &[&Tensor]) -> Result<Tensor> {
    let width = parts
        .first()
        .ok_or_else(|| Error::invalid("assemble", "no token blocks"))?
        .shape()[1];
    let mut rows = 0;
    let mut data = Vec::new();
    for p in parts {
        if p.shape().len() != 2 || p.shape()[1] != width {
            return Err(Error::shape(
                "assemble",
                format!("token block {:?}, want width {}", p.shape(), width),
            ));
        }
        rows += p.shape()[0];
        data.extend_from_slice(p.data());
    }
    Ok(Tensor::from_parts(vec![rows, width], data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_latent(t: usize, h: usize, w: usize, c: usize, seed: u64) -> LatentVideo {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        LatentVideo::new(Tensor::randn(&[t, h, w, c], 1.0, &mut rng)).unwrap()
    }

    #[test]
    fn patchify_counts_and_positions() {
        // 2 frames of 4x4, 2x2 patches: 8 tokens on a 2x2x2 grid.
        let v = random_latent(2, 4, 4, 3, 1);
        let (tokens, positions) = patchify(&v, (2, 2)).unwrap();
        assert_eq!(tokens.shape(), &[8, 2 * 2 * 3]);
        assert_eq!(positions.len(), 8);
        for t in 0..2i64 {
            for h in 0..2i64 {
                for w in 0..2i64 {
                    assert!(positions.contains(&TokenPos::new(t, h, w)));
                }
            }
        }
    }

    #[test]
    fn patchify_single_patch_frame() {
        let v = random_latent(1, 2, 2, 4, 2);
        let (tokens, positions) = patchify(&v, (2, 2)).unwrap();
        assert_eq!(tokens.shape(), &[1, 16]);
        assert_eq!(positions, vec![TokenPos::new(0, 0, 0)]);
        // The single token is the frame's elements in grid order.
        assert_eq!(tokens.data(), v.data().data());
    }

    #[test]
    fn patchify_rejects_indivisible() {
        let v = random_latent(1, 5, 4, 1, 3);
        assert!(patchify(&v, (2, 2)).is_err());
    }

    #[test]
    fn unpatchify_roundtrip_bit_exact() {
        let v = random_latent(2, 4, 4, 2, 4);
        let (tokens, positions) = patchify(&v, (2, 2)).unwrap();
        let back = unpatchify(&tokens, &positions, (2, 2), (2, 4, 4, 2)).unwrap();
        assert_eq!(back.data(), v.data());
    }

    #[test]
    fn unpatchify_is_position_driven() {
        let v = random_latent(2, 4, 4, 2, 5);
        let (tokens, positions) = patchify(&v, (2, 2)).unwrap();
        // Reverse the token order along with the positions.
        let n = positions.len();
        let mut rev_tokens = Vec::new();
        for i in (0..n).rev() {
            rev_tokens.extend_from_slice(&tokens.data()[i * 8..(i + 1) * 8]);
        }
        let rev_tokens = Tensor::from_vec(vec![n, 8], rev_tokens).unwrap();
        let rev_positions: Vec<TokenPos> = positions.iter().rev().copied().collect();
        let back = unpatchify(&rev_tokens, &rev_positions, (2, 2), (2, 4, 4, 2)).unwrap();
        assert_eq!(back.data(), v.data());
    }

    #[test]
    fn unpatchify_rejects_bad_coverage() {
        let v = random_latent(1, 4, 4, 1, 6);
        let (tokens, mut positions) = patchify(&v, (2, 2)).unwrap();
        // Empty input.
        assert!(unpatchify(
            &Tensor::zeros(&[0, 4]),
            &[],
            (2, 2),
            (1, 4, 4, 1)
        )
        .is_err());
        // Duplicated cell (and a missing one).
        positions[1] = positions[0];
        assert!(unpatchify(&tokens, &positions, (2, 2), (1, 4, 4, 1)).is_err());
    }

    #[test]
    fn assemble_minimal_layout() {
        let ff = random_latent(1, 4, 4, 2, 7);
        let video = random_latent(2, 4, 4, 2, 8);
        let seq =
            assemble_sequence(&ff, &video, &AnchorSet::empty(), None, (2, 2)).unwrap();
        assert_eq!(seq.segments.len(), 2);
        assert_eq!(seq.segments[0].role, SegmentRole::FirstFrame);
        assert_eq!(seq.segments[1].role, SegmentRole::Video);
        assert_eq!(seq.len(), 4 + 8);
        // First frame shares temporal position 0 with video frame 0.
        assert_eq!(seq.positions[0].t, 0);
        let (vs, _) = seq.video_span();
        assert_eq!(seq.positions[vs].t, 0);
        // Loss mask exactly covers the video segment.
        let mask_count = seq.loss_mask.iter().filter(|&&m| m).count();
        assert_eq!(mask_count, 8);
        assert!(!seq.loss_mask[0]);
    }

    fn full_anchor_set() -> AnchorSet {
        let mut anchors = AnchorSet::empty();
        anchors.set_global(random_latent(1, 4, 4, 2, 10)).unwrap();
        for vp in Viewpoint::ALL {
            anchors
                .set_viewpoint(vp, random_latent(1, 4, 2, 2, 11 + vp.index() as u64))
                .unwrap();
        }
        for ex in Expression::ALL {
            anchors
                .set_expression(ex, random_latent(1, 2, 2, 2, 20 + ex.index() as u64))
                .unwrap();
        }
        anchors
    }

    #[test]
    fn assemble_full_anchor_set() {
        let ff = random_latent(1, 4, 4, 2, 30);
        let video = random_latent(3, 4, 4, 2, 31);
        let seq = assemble_sequence(&ff, &video, &full_anchor_set(), None, (2, 2)).unwrap();
        // FirstFrame + Video + 13 anchor segments.
        assert_eq!(seq.segments.len(), 2 + 13);
        let anchor_segments: Vec<&Segment> = seq
            .segments
            .iter()
            .filter(|s| matches!(s.role, SegmentRole::Anchor(_)))
            .collect();
        assert_eq!(anchor_segments.len(), 13);
        // Canonical order: global, viewpoints 0..3, expressions 0..7.
        assert_eq!(
            anchor_segments[0].role,
            SegmentRole::Anchor(AnchorRole::global())
        );
        assert_eq!(
            anchor_segments[1].role,
            SegmentRole::Anchor(AnchorRole::viewpoint(0))
        );
        assert_eq!(
            anchor_segments[5].role,
            SegmentRole::Anchor(AnchorRole::expression(0))
        );
        // Segments partition [0, L).
        let mut covered = vec![false; seq.len()];
        for s in &seq.segments {
            for slot in covered.iter_mut().skip(s.start).take(s.len) {
                assert!(!*slot, "segment overlap");
                *slot = true;
            }
        }
        assert!(covered.iter().all(|&c| c));
        // No loss outside video.
        let roles = seq.roles();
        for (i, m) in seq.loss_mask.iter().enumerate() {
            if *m {
                assert_eq!(roles[i], SegmentRole::Video);
            }
        }
    }

    #[test]
    fn assemble_with_prefix_shifts_time() {
        let ff = random_latent(1, 4, 4, 2, 40);
        let video = random_latent(2, 4, 4, 2, 41);
        let prefix = random_latent(4, 4, 4, 2, 42);
        let seq =
            assemble_sequence(&ff, &video, &AnchorSet::empty(), Some(&prefix), (2, 2))
                .unwrap();
        assert_eq!(seq.segments[1].role, SegmentRole::Prefix);
        // Prefix occupies 0..3, first frame and video start at 4.
        let pseg = seq.segment(SegmentRole::Prefix).unwrap();
        assert_eq!(seq.positions[pseg.start].t, 0);
        assert_eq!(seq.positions[pseg.start + pseg.len - 1].t, 3);
        assert_eq!(seq.positions[0].t, 4);
        let (vs, vl) = seq.video_span();
        assert_eq!(seq.positions[vs].t, 4);
        assert_eq!(seq.positions[vs + vl - 1].t, 5);
        // Prefix tokens carry no loss.
        for i in pseg.start..pseg.start + pseg.len {
            assert!(!seq.loss_mask[i]);
        }
        // Wrong prefix length is rejected.
        let bad = random_latent(3, 4, 4, 2, 43);
        assert!(
            assemble_sequence(&ff, &video, &AnchorSet::empty(), Some(&bad), (2, 2)).is_err()
        );
    }

    #[test]
    fn assemble_is_deterministic() {
        let ff = random_latent(1, 4, 4, 2, 50);
        let video = random_latent(2, 4, 4, 2, 51);
        let anchors = full_anchor_set();
        let a = assemble_sequence(&ff, &video, &anchors, None, (2, 2)).unwrap();
        let b = assemble_sequence(&ff, &video, &anchors, None, (2, 2)).unwrap();
        assert_eq!(a.tokens, b.tokens);
        assert_eq!(a.positions, b.positions);
        assert_eq!(a.loss_mask, b.loss_mask);
    }

    #[test]
    fn anchor_set_rejects_duplicates_and_bad_shapes() {
        let mut anchors = AnchorSet::empty();
        anchors
            .set_viewpoint(Viewpoint::Back, random_latent(1, 4, 2, 2, 60))
            .unwrap();
        assert!(anchors
            .set_viewpoint(Viewpoint::Back, random_latent(1, 4, 2, 2, 61))
            .is_err());
        // Multi-frame anchor fails validation.
        let mut bad = AnchorSet::empty();
        bad.set_global(random_latent(2, 4, 4, 2, 62)).unwrap();
        assert!(bad.validate(4, 4, 2).is_err());
        // Global at the wrong resolution fails validation.
        let mut bad2 = AnchorSet::empty();
        bad2.set_global(random_latent(1, 2, 2, 2, 63)).unwrap();
        assert!(bad2.validate(4, 4, 2).is_err());
    }

    #[test]
    fn frame_slicing_and_splicing() {
        let v = random_latent(5, 2, 2, 1, 70);
        let tail = v.slice_frames(3, 2).unwrap();
        assert_eq!(tail.frames(), 2);
        assert_eq!(tail.get(0, 0, 0, 0), v.get(3, 0, 0, 0));
        let joined = LatentVideo::concat_frames(&[
            &v.slice_frames(0, 3).unwrap(),
            &tail,
        ])
        .unwrap();
        assert_eq!(joined.data(), v.data());
        let patch = random_latent(2, 2, 2, 1, 71);
        let spliced = v.splice_frames(1, &patch).unwrap();
        assert_eq!(spliced.get(1, 0, 0, 0), patch.get(0, 0, 0, 0));
        assert_eq!(spliced.get(0, 0, 0, 0), v.get(0, 0, 0, 0));
        assert_eq!(spliced.get(4, 1, 1, 0), v.get(4, 1, 1, 0));
    }
}
