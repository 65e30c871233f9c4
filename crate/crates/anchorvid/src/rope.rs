//! Three-axis rotary position encoding.
//!
//! Every token carries an integer position on a (temporal, height, width)
//! grid. A head's channels are split into three contiguous segments, one per
//! axis, and each in-segment channel pair is rotated by
//! `pos_axis / base^(2i / d_axis)` where `i` is the pair index inside its
//! segment. Because rotations are applied to queries and keys alike, the
//! attention score between two tokens depends only on their position
//! *difference* — which is what lets far-away temporal offsets act as a weak
//! "this is reference material, not adjacent footage" signal rather than a
//! hard mask.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::{AnchorKind, SegmentRole};
use crate::tensor::{RopeTables, Value};

/// Integer grid position of one token: temporal index, then the two spatial
/// patch coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenPos {
    pub t: i64,
    pub h: i64,
    pub w: i64,
}

impl TokenPos {
    pub fn new(t: i64, h: i64, w: i64) -> Self {
        TokenPos { t, h, w }
    }

    pub fn diff(self, other: TokenPos) -> TokenPos {
        TokenPos {
            t: self.t - other.t,
            h: self.h - other.h,
            w: self.w - other.w,
        }
    }
}

/// Temporal offsets that place each reference-anchor kind on its own
/// stretch of the rotary time axis, far from any reachable video position.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnchorOffsets {
    pub viewpoint: i64,
    pub expression: i64,
    pub global: i64,
}

impl Default for AnchorOffsets {
    fn default() -> Self {
        AnchorOffsets {
            viewpoint: 200,
            expression: 400,
            global: 600,
        }
    }
}

impl AnchorOffsets {
    /// Largest sub-index count per kind, fixing each kind's reserved range.
    const VIEWPOINT_SLOTS: i64 = 4;
    const EXPRESSION_SLOTS: i64 = 8;

    /// Reject offset choices whose reserved ranges overlap the reachable
    /// video positions `[0, max_video_pos]`. Overlaps *between* anchor kinds
    /// are allowed — collapsing all offsets onto one value is a legitimate
    /// ablation — but an anchor that lands inside the video's own time range
    /// would be indistinguishable from footage.
    pub fn validate(&self, max_video_pos: i64) -> Result<()> {
        let ranges = [
            ("viewpoint", self.viewpoint, Self::VIEWPOINT_SLOTS),
            ("expression", self.expression, Self::EXPRESSION_SLOTS),
            ("global", self.global, 1),
        ];
        for (name, start, slots) in ranges {
            if start <= 0 {
                return Err(Error::InvalidConfig(format!(
                    "{} anchor offset {} must be strictly positive",
                    name, start
                )));
            }
            if start <= max_video_pos {
                return Err(Error::InvalidConfig(format!(
                    "{} anchor range [{}, {}) collides with video positions 0..={}",
                    name,
                    start,
                    start + slots,
                    max_video_pos
                )));
            }
        }
        Ok(())
    }
}

/// Rotary settings shared by every attention head.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RopeConfig {
    pub head_dim: usize,
    pub base: f64,
    /// Channels assigned to the (temporal, height, width) axes. Each part is
    /// even and they sum to `head_dim`.
    pub split: (usize, usize, usize),
    pub offsets: AnchorOffsets,
}

impl RopeConfig {
    /// The default 2:1:1 split — half the head for time, a quarter for each
    /// spatial axis. Requires `head_dim` divisible by 8 so every segment has
    /// whole channel pairs.
    pub fn proportional(head_dim: usize) -> Result<Self> {
        if head_dim == 0 || head_dim % 8 != 0 {
            return Err(Error::InvalidConfig(format!(
                "head_dim {} not divisible by 8; the 2:1:1 axis split needs even pair counts",
                head_dim
            )));
        }
        Ok(RopeConfig {
            head_dim,
            base: 10000.0,
            split: (head_dim / 2, head_dim / 4, head_dim / 4),
            offsets: AnchorOffsets::default(),
        })
    }

    pub fn with_split(head_dim: usize, base: f64, split: (usize, usize, usize)) -> Result<Self> {
        let (dt, dh, dw) = split;
        if dt + dh + dw != head_dim {
            return Err(Error::InvalidConfig(format!(
                "axis split {:?} does not sum to head_dim {}",
                split, head_dim
            )));
        }
        if dt % 2 != 0 || dh % 2 != 0 || dw % 2 != 0 {
            return Err(Error::InvalidConfig(format!(
                "axis split {:?} has odd parts; rotations act on channel pairs",
                split
            )));
        }
        if !(base.is_finite() && base > 1.0) {
            return Err(Error::InvalidConfig(format!("rotary base {} must exceed 1", base)));
        }
        Ok(RopeConfig {
            head_dim,
            base,
            split,
            offsets: AnchorOffsets::default(),
        })
    }

    pub fn pairs(&self) -> usize {
        self.head_dim / 2
    }
}

/// Effective rotary position of a token given its segment role: video-like
/// tokens keep their raw position, anchors move to `offset + sub_index` on
/// the temporal axis while keeping their own spatial grid coordinates.
pub fn shifted_position(p: TokenPos, role: SegmentRole, offsets: &AnchorOffsets) -> TokenPos {
    match role {
        SegmentRole::FirstFrame | SegmentRole::Prefix | SegmentRole::Video => p,
        SegmentRole::Anchor(anchor) => {
            let base = match anchor.kind {
                AnchorKind::Viewpoint => offsets.viewpoint,
                AnchorKind::Expression => offsets.expression,
                AnchorKind::Global => offsets.global,
            };
            TokenPos::new(p.t + base + anchor.sub_index as i64, p.h, p.w)
        }
    }
}

/// Rotation angle per channel pair for one position, segments in
/// (temporal, height, width) order.
pub fn pair_angles(cfg: &RopeConfig, pos: TokenPos) -> Vec<f64> {
    let mut out = Vec::with_capacity(cfg.pairs());
    let axes = [
        (cfg.split.0, pos.t as f64),
        (cfg.split.1, pos.h as f64),
        (cfg.split.2, pos.w as f64),
    ];
    for (dim, p) in axes {
        let pairs = dim / 2;
        for i in 0..pairs {
            let freq = cfg.base.powf(-2.0 * i as f64 / dim as f64);
            out.push(p * freq);
        }
    }
    out
}

/// Rotate a single head vector in place according to its position.
pub fn rotate_vector(x: &mut [f64], cfg: &RopeConfig, pos: TokenPos) -> Result<()> {
    if x.len() != cfg.head_dim {
        return Err(Error::shape(
            "rope_rotate",
            format!("vector len {} vs head_dim {}", x.len(), cfg.head_dim),
        ));
    }
    for (p, angle) in pair_angles(cfg, pos).into_iter().enumerate() {
        let (c, s) = (angle.cos(), angle.sin());
        let x0 = x[2 * p];
        let x1 = x[2 * p + 1];
        x[2 * p] = x0 * c - x1 * s;
        x[2 * p + 1] = x0 * s + x1 * c;
    }
    Ok(())
}

/// Precompute per-row cos/sin tables for a whole token sequence, for the
/// fused in-graph rotation ([`Value::rope`]).
pub fn build_tables(cfg: &RopeConfig, positions: &[TokenPos]) -> RopeTables {
    let pairs = cfg.pairs();
    let mut cos = Vec::with_capacity(positions.len() * pairs);
    let mut sin = Vec::with_capacity(positions.len() * pairs);
    for &pos in positions {
        for angle in pair_angles(cfg, pos) {
            cos.push(angle.cos());
            sin.push(angle.sin());
        }
    }
    RopeTables {
        cos: Arc::new(cos),
        sin: Arc::new(sin),
        pairs,
    }
}

/// Apply rotary encoding to a `[rows, heads * head_dim]` activation.
pub fn apply(x: &Value, cfg: &RopeConfig, positions: &[TokenPos], heads: usize) -> Result<Value> {
    if x.shape().len() != 2 || x.shape()[0] != positions.len() {
        return Err(Error::shape(
            "rope_apply",
            format!("{} positions for activation {:?}", positions.len(), x.shape()),
        ));
    }
    let tables = build_tables(cfg, positions);
    x.rope(&tables, heads)
}
