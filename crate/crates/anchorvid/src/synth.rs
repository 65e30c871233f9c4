//! Procedural character episodes with exact ground truth.
//!
//! A "character" is a bundle of small latent textures: one body texture per
//! canonical viewpoint (front/right/back/left), one head texture per
//! expression, and a background. Rendering composites the yaw-selected body
//! texture (with a linear cross-fade inside ±15° of the 45°/135°/225°/315°
//! boundaries) and the expression head texture onto the background, and also
//! returns the body and head crops used for anchors. Everything is a pure
//! function of (spec, yaw, expression), so streams are reproducible
//! bit-for-bit.
//!
//! The module also carries the evaluation side: region-restricted MSE
//! against ground truth and the attention-mass probe over an assembled
//! sequence.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::{Expression, LatentVideo, SegmentRole, TokenSequence, Viewpoint};
use crate::tensor::Tensor;

/// Latent geometry of the desk-scale world.
pub const LATENT_H: usize = 8;
pub const LATENT_W: usize = 8;
pub const LATENT_C: usize = 4;
/// Head crop: rows 0..4, cols 2..6 of the frame.
pub const HEAD_ROWS: (usize, usize) = (0, 4);
pub const HEAD_COLS: (usize, usize) = (2, 6);
/// Body region: all rows, cols 1..7 of the frame (the head sits inside it).
pub const BODY_ROWS: (usize, usize) = (0, 8);
pub const BODY_COLS: (usize, usize) = (1, 7);

/// Pixel and latent frame rates: 24 fps compressed 4x in time.
pub const PIXEL_FPS: usize = 24;
pub const TEMPORAL_COMPRESSION: usize = 4;
pub const LATENT_FPS: usize = PIXEL_FPS / TEMPORAL_COMPRESSION;
/// Training clips are 5 s = 30 latent frames.
pub const CLIP_SECONDS: usize = 5;
pub const CLIP_FRAMES: usize = CLIP_SECONDS * LATENT_FPS;
/// Audio: 8-dim command signatures at 96 frames per 5 s clip.
pub const AUDIO_DIM: usize = 8;
pub const AUDIO_FRAMES_PER_CLIP: usize = 96;

/// Command vocabulary (id 0 is reserved for the null/unconditional token).
pub const CMD_IDLE: usize = 1;
pub const CMD_TURN_AROUND: usize = 2;
pub const CMD_EXPRESSIONS: usize = 3;
pub const TEXT_VOCAB: usize = 4;

/// Minimum pairwise MSE between the four viewpoint body textures.
pub const TEXTURE_DISTINCT_FLOOR: f64 = 0.5;

fn tex(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

/// One character's appearance: textures keyed by viewpoint and expression.
#[derive(Debug, Clone)]
pub struct CharacterSpec {
    pub seed: u64,
    /// Body texture per canonical viewpoint, indexed by `Viewpoint::index()`,
    /// each `[8, 6, C]`.
    pub body: Vec<Tensor>,
    /// Head texture per expression, indexed by `Expression::index()`,
    /// each `[4, 4, C]`.
    pub heads: Vec<Tensor>,
    /// Background `[8, 8, C]`.
    pub background: Tensor,
}

/// Deterministic character from a seed. The four viewpoint textures are
/// resampled (bounded retries) until pairwise MSE clears the floor.
pub fn gen_character(seed: u64) -> Result<CharacterSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(1));
    let body_shape = [
        BODY_ROWS.1 - BODY_ROWS.0,
        BODY_COLS.1 - BODY_COLS.0,
        LATENT_C,
    ];
    let head_shape = [
        HEAD_ROWS.1 - HEAD_ROWS.0,
        HEAD_COLS.1 - HEAD_COLS.0,
        LATENT_C,
    ];
    let mut body = Vec::new();
    let mut ok = false;
    for _ in 0..32 {
        body = (0..4).map(|_| tex(&body_shape, &mut rng)).collect();
        ok = (0..4).all(|i| {
            (i + 1..4).all(|j| {
                body[i]
                    .mse(&body[j])
                    .map(|m| m >= TEXTURE_DISTINCT_FLOOR)
                    .unwrap_or(false)
            })
        });
        if ok {
            break;
        }
    }
    if !ok {
        return Err(Error::invalid(
            "gen_character",
            "viewpoint textures failed the distinguishability floor after 32 tries",
        ));
    }
    let heads = (0..8).map(|_| tex(&head_shape, &mut rng)).collect();
    let background = tex(&[LATENT_H, LATENT_W, LATENT_C], &mut rng);
    Ok(CharacterSpec {
        seed,
        body,
        heads,
        background,
    })
}

/// Canonical yaw (degrees) at which each viewpoint texture shows pure.
pub fn canonical_yaw(vp: Viewpoint) -> f64 {
    match vp {
        Viewpoint::Front => 0.0,
        Viewpoint::Right => 90.0,
        Viewpoint::Back => 180.0,
        Viewpoint::Left => 270.0,
    }
}

/// Half-width of the cross-fade band around each 45°+k·90° boundary.
pub const FADE_HALF_WIDTH: f64 = 15.0;

/// Mixing weights over the four viewpoint textures at a yaw: pure nearest
/// canonical texture outside the bands, linear cross-fade inside.
pub fn viewpoint_weights(yaw: f64) -> Result<[f64; 4]> {
    if !(0.0..360.0).contains(&yaw) {
        return Err(Error::invalid(
            "viewpoint_weights",
            format!("yaw {} outside [0, 360)", yaw),
        ));
    }
    // Texture on the lower/upper side of each boundary, walking clockwise
    // from front: 45 front|right, 135 right|back, 225 back|left,
    // 315 left|front.
    let sides = [
        (Viewpoint::Front, Viewpoint::Right),
        (Viewpoint::Right, Viewpoint::Back),
        (Viewpoint::Back, Viewpoint::Left),
        (Viewpoint::Left, Viewpoint::Front),
    ];
    let mut w = [0.0; 4];
    for (k, (lo, hi)) in sides.iter().enumerate() {
        let boundary = 45.0 + 90.0 * k as f64;
        if (yaw - boundary).abs() <= FADE_HALF_WIDTH {
            let t = (yaw - (boundary - FADE_HALF_WIDTH)) / (2.0 * FADE_HALF_WIDTH);
            w[lo.index()] = 1.0 - t;
            w[hi.index()] = t;
            return Ok(w);
        }
    }
    // Outside every band: pure nearest canonical yaw (360-periodic).
    let nearest = Viewpoint::ALL
        .iter()
        .copied()
        .min_by(|a, b| {
            let da = angular_distance(yaw, canonical_yaw(*a));
            let db = angular_distance(yaw, canonical_yaw(*b));
            da.partial_cmp(&db).expect("finite angles")
        })
        .expect("four viewpoints");
    w[nearest.index()] = 1.0;
    Ok(w)
}

fn angular_distance(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(360.0);
    d.min(360.0 - d)
}

/// One rendered latent frame plus its anchor crops.
#[derive(Debug, Clone)]
pub struct RenderedFrame {
    /// Full frame `[8, 8, C]`.
    pub frame: Tensor,
    /// Body crop `[8, 6, C]` — the body region cut out of the frame.
    pub body: Tensor,
    /// Head crop `[4, 4, C]` — the head region cut out of the frame.
    pub head: Tensor,
}

/// Pure compositor: background, then the yaw-mixed body texture over the
/// body region, then the expression head texture over the head region.
pub fn render_frame(c: &CharacterSpec, yaw: f64, expression: Expression) -> Result<RenderedFrame> {
    let w = viewpoint_weights(yaw)?;
    let bh = BODY_ROWS.1 - BODY_ROWS.0;
    let bw = BODY_COLS.1 - BODY_COLS.0;
    let mut mixed = vec![0.0; bh * bw * LATENT_C];
    for (vi, &wi) in w.iter().enumerate() {
        if wi != 0.0 {
            for (m, &v) in mixed.iter_mut().zip(c.body[vi].data().iter()) {
                *m += wi * v;
            }
        }
    }
    let head = &c.heads[expression.index()];

    let mut frame = c.background.data().to_vec();
    let idx = |r: usize, col: usize, ch: usize| (r * LATENT_W + col) * LATENT_C + ch;
    for r in BODY_ROWS.0..BODY_ROWS.1 {
        for col in BODY_COLS.0..BODY_COLS.1 {
            for ch in 0..LATENT_C {
                let src = ((r - BODY_ROWS.0) * bw + (col - BODY_COLS.0)) * LATENT_C + ch;
                frame[idx(r, col, ch)] = mixed[src];
            }
        }
    }
    let hw = HEAD_COLS.1 - HEAD_COLS.0;
    for r in HEAD_ROWS.0..HEAD_ROWS.1 {
        for col in HEAD_COLS.0..HEAD_COLS.1 {
            for ch in 0..LATENT_C {
                let src = ((r - HEAD_ROWS.0) * hw + (col - HEAD_COLS.0)) * LATENT_C + ch;
                frame[idx(r, col, ch)] = head.data()[src];
            }
        }
    }
    // Crops are literal cutouts of the finished frame.
    let mut body_crop = vec![0.0; bh * bw * LATENT_C];
    for r in BODY_ROWS.0..BODY_ROWS.1 {
        for col in BODY_COLS.0..BODY_COLS.1 {
            for ch in 0..LATENT_C {
                let dst = ((r - BODY_ROWS.0) * bw + (col - BODY_COLS.0)) * LATENT_C + ch;
                body_crop[dst] = frame[idx(r, col, ch)];
            }
        }
    }
    let hh = HEAD_ROWS.1 - HEAD_ROWS.0;
    let mut head_crop = vec![0.0; hh * hw * LATENT_C];
    for r in HEAD_ROWS.0..HEAD_ROWS.1 {
        for col in HEAD_COLS.0..HEAD_COLS.1 {
            for ch in 0..LATENT_C {
                let dst = ((r - HEAD_ROWS.0) * hw + (col - HEAD_COLS.0)) * LATENT_C + ch;
                head_crop[dst] = frame[idx(r, col, ch)];
            }
        }
    }
    Ok(RenderedFrame {
        frame: Tensor::from_vec(vec![LATENT_H, LATENT_W, LATENT_C], frame)?,
        body: Tensor::from_vec(vec![bh, bw, LATENT_C], body_crop)?,
        head: Tensor::from_vec(vec![hh, hw, LATENT_C], head_crop)?,
    })
}

/// Scenario scripts for episode generation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Idle,
    TurnAround,
    ExpressionCycle,
    Mixed,
}

impl Scenario {
    pub const ALL: [Scenario; 4] = [
        Scenario::Idle,
        Scenario::TurnAround,
        Scenario::ExpressionCycle,
        Scenario::Mixed,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::Idle => "idle",
            Scenario::TurnAround => "turn_around",
            Scenario::ExpressionCycle => "expression_cycle",
            Scenario::Mixed => "mixed",
        }
    }
}

/// A generated episode: scripted ground truth plus the rendered streams,
/// all on the shared latent-frame timeline.
#[derive(Debug, Clone)]
pub struct EpisodeRecord {
    pub character: CharacterSpec,
    pub scenario: Scenario,
    pub duration_s: usize,
    /// Yaw in degrees per latent frame.
    pub yaw: Vec<f64>,
    /// Expression per latent frame.
    pub expressions: Vec<Expression>,
    /// Command id per 5 s clip block.
    pub commands: Vec<usize>,
    /// Audio features `[duration/5 * 96, 8]`.
    pub audio: Tensor,
    /// Rendered full frames.
    pub video: LatentVideo,
    /// Rendered body crops (one per frame).
    pub body_crops: LatentVideo,
    /// Rendered head crops (one per frame).
    pub head_crops: LatentVideo,
}

impl EpisodeRecord {
    pub fn latent_frames(&self) -> usize {
        self.duration_s * LATENT_FPS
    }

    pub fn clip_blocks(&self) -> usize {
        self.duration_s / CLIP_SECONDS
    }

    /// Audio features for one 5 s clip block: 96 rows.
    pub fn clip_audio(&self, block: usize) -> Result<Tensor> {
        if block >= self.clip_blocks() {
            return Err(Error::invalid(
                "clip_audio",
                format!("block {} of {}", block, self.clip_blocks()),
            ));
        }
        let start = block * AUDIO_FRAMES_PER_CLIP * AUDIO_DIM;
        let end = start + AUDIO_FRAMES_PER_CLIP * AUDIO_DIM;
        Tensor::from_vec(
            vec![AUDIO_FRAMES_PER_CLIP, AUDIO_DIM],
            self.audio.data()[start..end].to_vec(),
        )
    }
}

/// Deterministic 8-dim signature of a command at one audio frame.
pub fn audio_signature(command: usize, frame_in_block: usize) -> [f64; AUDIO_DIM] {
    let mut out = [0.0; AUDIO_DIM];
    let f = frame_in_block as f64 / AUDIO_FRAMES_PER_CLIP as f64;
    for (d, slot) in out.iter_mut().enumerate() {
        let carrier = (d + 1) as f64;
        *slot = (std::f64::consts::TAU * carrier * (command as f64) / 8.0
            + std::f64::consts::TAU * f * (command + 1) as f64)
            .cos();
    }
    out
}

fn yaw_turn_profile(u: f64) -> f64 {
    // One full rotation: out through the right profile, hold at the back,
    // home through the left profile. All four viewpoints occur.
    if u < 0.2 {
        0.0
    } else if u < 0.4 {
        180.0 * (u - 0.2) / 0.2
    } else if u < 0.6 {
        180.0
    } else if u < 0.8 {
        (180.0 + 180.0 * (u - 0.6) / 0.2).rem_euclid(360.0)
    } else {
        0.0
    }
}

/// Generate one episode. Duration must be a positive multiple of 5 s so the
/// clip/audio grids line up.
pub fn gen_episode(seed: u64, duration_s: usize, scenario: Scenario) -> Result<EpisodeRecord> {
    if duration_s < CLIP_SECONDS || duration_s % CLIP_SECONDS != 0 {
        return Err(Error::invalid(
            "gen_episode",
            format!("duration {} s must be a positive multiple of {} s", duration_s, CLIP_SECONDS),
        ));
    }
    let character = gen_character(seed)?;
    let frames = duration_s * LATENT_FPS;
    let blocks = duration_s / CLIP_SECONDS;

    let mut yaw = Vec::with_capacity(frames);
    let mut expressions = Vec::with_capacity(frames);
    let mut commands = Vec::with_capacity(blocks);

    // Per-frame scripts. `mixed` cycles 10 s sub-scenarios:
    // turn, expressions, idle.
    let frame_script = |f: usize| -> (f64, Expression) {
        let t_s = f as f64 / LATENT_FPS as f64;
        match scenario {
            Scenario::Idle => (0.0, Expression::Neutral),
            Scenario::TurnAround => {
                let u = f as f64 / (frames.max(2) - 1) as f64;
                (yaw_turn_profile(u), Expression::Neutral)
            }
            Scenario::ExpressionCycle => {
                let span = duration_s as f64 / 8.0;
                let e = ((t_s / span) as usize).min(7);
                (0.0, Expression::from_index(e).expect("index < 8"))
            }
            Scenario::Mixed => {
                let block10 = (t_s / 10.0) as usize;
                let local = t_s - 10.0 * block10 as f64;
                match block10 % 3 {
                    0 => {
                        let u = local / 10.0;
                        (yaw_turn_profile(u), Expression::Neutral)
                    }
                    1 => {
                        let e = ((local / 1.25) as usize).min(7);
                        (0.0, Expression::from_index(e).expect("index < 8"))
                    }
                    _ => (0.0, Expression::Neutral),
                }
            }
        }
    };
    for f in 0..frames {
        let (y, e) = frame_script(f);
        yaw.push(y);
        expressions.push(e);
    }
    for b in 0..blocks {
        let cmd = match scenario {
            Scenario::Idle => CMD_IDLE,
            Scenario::TurnAround => {
                // Command active while the turn occupies the block.
                let mid = (b * CLIP_SECONDS) as f64 + 2.5;
                let u = mid / duration_s as f64;
                if (0.2..0.8).contains(&u) {
                    CMD_TURN_AROUND
                } else {
                    CMD_IDLE
                }
            }
            Scenario::ExpressionCycle => CMD_EXPRESSIONS,
            Scenario::Mixed => {
                let block10 = (b * CLIP_SECONDS) / 10;
                match block10 % 3 {
                    0 => CMD_TURN_AROUND,
                    1 => CMD_EXPRESSIONS,
                    _ => CMD_IDLE,
                }
            }
        };
        commands.push(cmd);
    }

    // Audio: 96 frames per block, signature of the block's command.
    let mut audio = Vec::with_capacity(blocks * AUDIO_FRAMES_PER_CLIP * AUDIO_DIM);
    for &cmd in &commands {
        for f in 0..AUDIO_FRAMES_PER_CLIP {
            audio.extend_from_slice(&audio_signature(cmd, f));
        }
    }

    // Rendered streams.
    let mut video = Vec::new();
    let mut body_crops = Vec::new();
    let mut head_crops = Vec::new();
    for f in 0..frames {
        let r = render_frame(&character, yaw[f], expressions[f])?;
        video.extend_from_slice(r.frame.data());
        body_crops.extend_from_slice(r.body.data());
        head_crops.extend_from_slice(r.head.data());
    }
    let bh = BODY_ROWS.1 - BODY_ROWS.0;
    let bw = BODY_COLS.1 - BODY_COLS.0;
    let hh = HEAD_ROWS.1 - HEAD_ROWS.0;
    let hw = HEAD_COLS.1 - HEAD_COLS.0;
    Ok(EpisodeRecord {
        character,
        scenario,
        duration_s,
        yaw,
        expressions,
        commands,
        audio: Tensor::from_vec(vec![blocks * AUDIO_FRAMES_PER_CLIP, AUDIO_DIM], audio)?,
        video: LatentVideo::new(Tensor::from_vec(
            vec![frames, LATENT_H, LATENT_W, LATENT_C],
            video,
        )?)?,
        body_crops: LatentVideo::new(Tensor::from_vec(
            vec![frames, bh, bw, LATENT_C],
            body_crops,
        )?)?,
        head_crops: LatentVideo::new(Tensor::from_vec(
            vec![frames, hh, hw, LATENT_C],
            head_crops,
        )?)?,
    })
}

/// Spatial evaluation regions. Body-minus-head is where the viewpoint (e.g.
/// back) texture shows; head is the expression area; background is the
/// complement of the body region. The three non-full regions partition the
/// frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    Full,
    BackTexture,
    Head,
    Background,
}

fn in_body(r: usize, c: usize) -> bool {
    (BODY_ROWS.0..BODY_ROWS.1).contains(&r) && (BODY_COLS.0..BODY_COLS.1).contains(&c)
}

fn in_head(r: usize, c: usize) -> bool {
    (HEAD_ROWS.0..HEAD_ROWS.1).contains(&r) && (HEAD_COLS.0..HEAD_COLS.1).contains(&c)
}

/// Cell membership for a region (frame-independent).
pub fn region_contains(region: Region, r: usize, c: usize) -> bool {
    match region {
        Region::Full => true,
        Region::BackTexture => in_body(r, c) && !in_head(r, c),
        Region::Head => in_head(r, c),
        Region::Background => !in_body(r, c),
    }
}

/// MSE between prediction and ground truth restricted to a region's cells,
/// over all frames and channels.
pub fn eval_region_mse(pred: &LatentVideo, truth: &LatentVideo, region: Region) -> Result<f64> {
    if pred.data().shape() != truth.data().shape() {
        return Err(Error::shape(
            "eval_region_mse",
            format!("{:?} vs {:?}", pred.data().shape(), truth.data().shape()),
        ));
    }
    let (t, h, w, c) = (pred.frames(), pred.height(), pred.width(), pred.channels());
    let mut sum = 0.0;
    let mut n = 0usize;
    let p = pred.data().data();
    let y = truth.data().data();
    for f in 0..t {
        for r in 0..h {
            for col in 0..w {
                if !region_contains(region, r, col) {
                    continue;
                }
                for ch in 0..c {
                    let i = ((f * h + r) * w + col) * c + ch;
                    let d = p[i] - y[i];
                    sum += d * d;
                    n += 1;
                }
            }
        }
    }
    if n == 0 {
        return Err(Error::invalid("eval_region_mse", "empty region"));
    }
    Ok(sum / n as f64)
}

/// Number of cells in a region (for mask-weighted recombination checks).
pub fn region_cells(region: Region) -> usize {
    let mut n = 0;
    for r in 0..LATENT_H {
        for c in 0..LATENT_W {
            if region_contains(region, r, c) {
                n += 1;
            }
        }
    }
    n
}

/// Mean attention mass from Video-segment queries to each segment of the
/// sequence (itself included), averaged over heads and video queries.
/// `weights` is one block's post-softmax matrix `[heads*L, L]`.
pub fn attention_probe(
    seq: &TokenSequence,
    weights: &Tensor,
    heads: usize,
) -> Result<Vec<(String, f64)>> {
    let l = seq.len();
    if weights.shape() != [heads * l, l] {
        return Err(Error::shape(
            "attention_probe",
            format!("weights {:?} for {} heads over {} tokens", weights.shape(), heads, l),
        ));
    }
    let (vs, vl) = seq.video_span();
    if vl == 0 {
        return Err(Error::invalid("attention_probe", "sequence has no video segment"));
    }
    let data = weights.data();
    let mut out = Vec::with_capacity(seq.segments.len());
    for seg in &seq.segments {
        let mut mass = 0.0;
        for h in 0..heads {
            for q in vs..vs + vl {
                let row = (h * l + q) * l;
                for k in seg.start..seg.start + seg.len {
                    mass += data[row + k];
                }
            }
        }
        out.push((
            segment_label(seg.role),
            mass / (heads * vl) as f64,
        ));
    }
    Ok(out)
}

/// Stable text label for a segment role, used in probe reports.
pub fn segment_label(role: SegmentRole) -> String {
    match role {
        SegmentRole::FirstFrame => "first_frame".into(),
        SegmentRole::Prefix => "prefix".into(),
        SegmentRole::Video => "video".into(),
        SegmentRole::Anchor(r) => {
            use crate::latent::AnchorKind;
            match r.kind {
                AnchorKind::Global => "global".into(),
                AnchorKind::Viewpoint => format!("viewpoint{}", r.sub_index),
                AnchorKind::Expression => format!("expression{}", r.sub_index),
            }
        }
    }
}
