//! Moving-shapes videos: one geometric actor per video whose motion family,
//! shape and colour define the class, over a static textured background with
//! look-alike distractors.
//! Directions are drawn at random so every class is closed under horizontal
//! flips and temporal reversal.

use std::f64::consts::PI;
use std::path::Path;

use ndarray::{Array2, Array4};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    container, container_path, load_dataset, write_json, AnnotationFile, AnnotationMode, DatasetIndex, FrameEntry,
    Split, VideoRecord, ANNOTATION_FILE, VIDEO_DIR,
};
use crate::geometry::BoxRegion;
use crate::{Error, Result};

pub const SYNTH_LOG_FILE: &str = "synth_log.json";
const MASK_DIR: &str = "masks";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MotionKind {
    TranslateHorizontal,
    TranslateVertical,
    Diagonal,
    Circular,
    Pulse,
    Shake,
}

impl MotionKind {
    pub const ALL: [MotionKind; 6] = [
        MotionKind::TranslateHorizontal,
        MotionKind::TranslateVertical,
        MotionKind::Diagonal,
        MotionKind::Circular,
        MotionKind::Pulse,
        MotionKind::Shake,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MotionKind::TranslateHorizontal => "translate-horizontal",
            MotionKind::TranslateVertical => "translate-vertical",
            MotionKind::Diagonal => "diagonal",
            MotionKind::Circular => "circular",
            MotionKind::Pulse => "pulse",
            MotionKind::Shake => "shake",
        }
    }
}

/// Analytic motion of the actor relative to its first action frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Motion {
    pub kind: MotionKind,
    /// Speed in px/frame for translations, radius in px for circles,
    /// amplitude (px or relative scale) for shake and pulse.
    pub magnitude: f64,
    /// Signed horizontal and vertical direction factors.
    pub dir: (f64, f64),
    /// Phase in radians for periodic motions.
    pub phase: f64,
    /// Period in frames for periodic motions.
    pub period: f64,
}

impl Motion {
    /// `(dx, dy, scale)` after `k` action frames.
    pub fn offset(&self, k: usize) -> (f64, f64, f64) {
        let k = k as f64;
        let m = self.magnitude;
        let (sx, sy) = self.dir;
        let w = 2.0 * PI / self.period;
        match self.kind {
            MotionKind::TranslateHorizontal => (sx * m * k, 0.0, 1.0),
            MotionKind::TranslateVertical => (0.0, sy * m * k, 1.0),
            MotionKind::Diagonal => (sx * m * k, sy * m * k, 1.0),
            MotionKind::Circular => {
                let a = self.phase + sx * w * k;
                (m * (a.cos() - self.phase.cos()), m * (a.sin() - self.phase.sin()), 1.0)
            }
            MotionKind::Pulse => (0.0, 0.0, 1.0 + m * (w * k + self.phase).sin()),
            MotionKind::Shake => (m * (w * k + self.phase).sin() - m * self.phase.sin(), 0.0, 1.0),
        }
    }

    /// Box of the actor after `k` action frames, given its box at `k = 0`.
    pub fn box_at(&self, initial: BoxRegion, k: usize) -> BoxRegion {
        let (dx, dy, s) = self.offset(k);
        let cx = 0.5 * (initial.x1 + initial.x2) + dx;
        let cy = 0.5 * (initial.y1 + initial.y2) + dy;
        let hw = 0.5 * (initial.x2 - initial.x1) * s;
        let hh = 0.5 * (initial.y2 - initial.y1) * s;
        BoxRegion::new(cx - hw, cy - hh, cx + hw, cy + hh)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Shape {
    Rectangle,
    Ellipse,
    Triangle,
    Diamond,
    Cross,
    Ring,
}

/// Shape and base colour of each class, indexed like `MotionKind::ALL`.
const CLASS_LOOKS: [(Shape, [f64; 3]); 6] = [
    (Shape::Rectangle, [0.92, 0.22, 0.2]),
    (Shape::Ellipse, [0.2, 0.85, 0.25]),
    (Shape::Triangle, [0.25, 0.35, 0.95]),
    (Shape::Diamond, [0.95, 0.85, 0.2]),
    (Shape::Cross, [0.9, 0.25, 0.85]),
    (Shape::Ring, [0.2, 0.85, 0.9]),
];

impl Shape {
    fn contains(self, px: f64, py: f64, cx: f64, cy: f64, hw: f64, hh: f64) -> bool {
        let (u, v) = ((px - cx) / hw, (py - cy) / hh);
        let inside = u.abs() <= 1.0 && v.abs() <= 1.0;
        match self {
            Shape::Rectangle => inside,
            Shape::Ellipse => u * u + v * v <= 1.0,
            Shape::Triangle => (-1.0..=1.0).contains(&v) && u.abs() <= 0.5 * (v + 1.0),
            Shape::Diamond => u.abs() + v.abs() <= 1.0,
            Shape::Cross => inside && (u.abs() <= 0.4 || v.abs() <= 0.4),
            Shape::Ring => (0.3..=1.0).contains(&(u * u + v * v)),
        }
    }
}

fn jittered(base: [f64; 3], rng: &mut ChaCha8Rng) -> [f64; 3] {
    base.map(|c| (c + rng.random_range(-0.08..0.08)).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub num_videos: usize,
    pub classes: usize,
    pub frames_per_video: usize,
    pub height: usize,
    pub width: usize,
    pub untrimmed_fraction: f64,
    pub seed: u64,
    /// Action-free frames in an untrimmed video; defaults to a quarter.
    pub idle_frames: Option<usize>,
    pub val_fraction: f64,
    pub annotation_mode: AnnotationMode,
    /// Actor half-extent range as a fraction of the smaller frame side.
    pub shape_half_size: (f64, f64),
    pub distractors: usize,
    /// Standard deviation of per-frame pixel noise.
    pub noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_videos: 250,
            classes: 5,
            frames_per_video: 16,
            height: 64,
            width: 64,
            untrimmed_fraction: 0.0,
            seed: 0,
            idle_frames: None,
            val_fraction: 0.2,
            annotation_mode: AnnotationMode::Box,
            shape_half_size: (0.09, 0.14),
            distractors: 3,
            noise: 0.04,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.classes < 2 || self.classes > MotionKind::ALL.len() {
            return bad(format!("classes must lie in 2..={}, got {}", MotionKind::ALL.len(), self.classes));
        }
        if self.frames_per_video < 8 {
            return bad(format!("frames_per_video must be at least 8, got {}", self.frames_per_video));
        }
        if self.num_videos == 0 {
            return bad("num_videos must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.untrimmed_fraction) || !(0.0..1.0).contains(&self.val_fraction) {
            return bad("untrimmed_fraction must lie in [0, 1] and val_fraction in [0, 1)".into());
        }
        let (lo, hi) = self.shape_half_size;
        if !(lo > 0.0 && lo <= hi) {
            return bad(format!("invalid shape size range ({lo}, {hi})"));
        }
        let side = self.height.min(self.width) as f64;
        if 2.0 * hi * side * 1.35 + 2.0 >= side {
            return bad(format!(
                "shape up to {:.1} px wide does not fit a {}x{} frame",
                2.0 * hi * side * 1.35,
                self.height,
                self.width
            ));
        }
        if self.height < 8 || self.width < 8 {
            return bad("frames must be at least 8x8".into());
        }
        if let Some(idle) = self.idle_frames {
            if idle + 2 > self.frames_per_video {
                return bad(format!("{idle} idle frames leave fewer than two action frames"));
            }
        }
        if !(self.noise >= 0.0) {
            return bad("noise must be non-negative".into());
        }
        Ok(())
    }

    fn idle(&self) -> usize {
        self.idle_frames.unwrap_or(self.frames_per_video / 4)
    }
}

/// Per-video record of what the generator drew.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthVideoLog {
    pub id: String,
    pub class_id: usize,
    pub split: Split,
    pub untrimmed: bool,
    /// First action frame.
    pub action_start: usize,
    /// One past the last action frame.
    pub action_end: usize,
    pub motion: Motion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthLog {
    pub config: SynthConfig,
    pub videos: Vec<SynthVideoLog>,
}

struct Actor {
    shape: Shape,
    color: [f64; 3],
    center: (f64, f64),
    half: (f64, f64),
    motion: Motion,
}

fn sample_motion(kind: MotionKind, rng: &mut ChaCha8Rng, side: f64, steps: usize, half: f64) -> Motion {
    let sign = |rng: &mut ChaCha8Rng| if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let dir = (sign(rng), sign(rng));
    let phase = rng.random_range(0.0..2.0 * PI);
    let room = (side - 2.0 * half - 2.0).max(0.0);
    let span = steps.max(1) as f64;
    let (magnitude, period) = match kind {
        MotionKind::TranslateHorizontal | MotionKind::TranslateVertical | MotionKind::Diagonal => {
            let v = rng.random_range(1.6..2.4) * side / 64.0;
            (v.min(room / span), 1.0)
        }
        MotionKind::Circular => {
            let r = rng.random_range(0.14..0.2) * side;
            (r.min(0.5 * room), rng.random_range(10.0..14.0))
        }
        MotionKind::Pulse => (rng.random_range(0.25..0.35), rng.random_range(6.0..9.0)),
        MotionKind::Shake => {
            let a = rng.random_range(0.05..0.08) * side;
            (a.min(0.5 * room), rng.random_range(3.5..4.5))
        }
    };
    Motion {
        kind,
        magnitude,
        dir,
        phase,
        period,
    }
}

fn place_actor(cfg: &SynthConfig, class_id: usize, steps: usize, rng: &mut ChaCha8Rng) -> Result<Actor> {
    let kind = MotionKind::ALL[class_id];
    let (shape, base_color) = CLASS_LOOKS[class_id];
    let (h, w) = (cfg.height as f64, cfg.width as f64);
    let side = h.min(w);
    let (lo, hi) = cfg.shape_half_size;
    let half = (rng.random_range(lo..=hi) * side, rng.random_range(lo..=hi) * side);
    let motion = sample_motion(kind, rng, side, steps, half.0.max(half.1));
    // extent of the trajectory relative to the initial centre
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for k in 0..steps.max(1) {
        let (dx, dy, s) = motion.offset(k);
        x0 = x0.min(dx - half.0 * s);
        x1 = x1.max(dx + half.0 * s);
        y0 = y0.min(dy - half.1 * s);
        y1 = y1.max(dy + half.1 * s);
    }
    if x1 - x0 + 1.0 > w || y1 - y0 + 1.0 > h {
        return Err(Error::InvalidArgument(format!(
            "{} trajectory spans {:.1}x{:.1} px, larger than the {}x{} frame",
            kind.name(),
            x1 - x0,
            y1 - y0,
            cfg.width,
            cfg.height
        )));
    }
    let cx = rng.random_range(-x0 + 0.5..=w - x1 - 0.5);
    let cy = rng.random_range(-y0 + 0.5..=h - y1 - 0.5);
    let color = jittered(base_color, rng);
    Ok(Actor {
        shape,
        color,
        center: (cx, cy),
        half,
        motion,
    })
}

fn background(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Array4<f64> {
    let (h, w) = (cfg.height, cfg.width);
    let base: [f64; 3] = [rng.random_range(0.2..0.7), rng.random_range(0.2..0.7), rng.random_range(0.2..0.7)];
    let waves: Vec<(f64, f64, f64, f64, usize)> = (0..3)
        .map(|_| {
            (
                rng.random_range(-0.4..0.4),
                rng.random_range(-0.4..0.4),
                rng.random_range(0.0..2.0 * PI),
                rng.random_range(0.05..0.15),
                rng.random_range(0..3usize),
            )
        })
        .collect();
    let mut bg = Array4::from_shape_fn((1, h, w, 3), |(_, y, x, c)| {
        let mut v = base[c];
        for &(fx, fy, ph, amp, ch) in &waves {
            if ch == c {
                v += amp * (fx * x as f64 + fy * y as f64 + ph).sin();
            }
        }
        v + rng.random_range(-0.05..0.05)
    });
    let side = h.min(w) as f64;
    // static look-alikes: any class shape in any class colour
    for _ in 0..cfg.distractors {
        let shape = CLASS_LOOKS.choose(rng).expect("non-empty").0;
        let color = jittered(CLASS_LOOKS.choose(rng).expect("non-empty").1, rng);
        let (lo, hi) = cfg.shape_half_size;
        let hw = rng.random_range(lo..=hi) * side;
        let hh = rng.random_range(lo..=hi) * side;
        let cx = rng.random_range(0.0..w as f64);
        let cy = rng.random_range(0.0..h as f64);
        for y in 0..h {
            for x in 0..w {
                if shape.contains(x as f64 + 0.5, y as f64 + 0.5, cx, cy, hw, hh) {
                    for c in 0..3 {
                        bg[[0, y, x, c]] = color[c];
                    }
                }
            }
        }
    }
    bg
}

fn actor_mask(actor: &Actor, k: usize, h: usize, w: usize) -> Array2<bool> {
    let (dx, dy, s) = actor.motion.offset(k);
    let (cx, cy) = (actor.center.0 + dx, actor.center.1 + dy);
    let (hw, hh) = (actor.half.0 * s, actor.half.1 * s);
    Array2::from_shape_fn((h, w), |(y, x)| actor.shape.contains(x as f64 + 0.5, y as f64 + 0.5, cx, cy, hw, hh))
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes `videos/*.stv`, `annotations.json` and `synth_log.json` under
/// `root` (plus `masks/` in mask mode) and returns the loaded index.
pub fn generate_synthetic_dataset(root: &Path, cfg: &SynthConfig) -> Result<DatasetIndex> {
    cfg.validate()?;
    let (h, w, t) = (cfg.height, cfg.width, cfg.frames_per_video);
    for dir in [root.to_path_buf(), root.join(VIDEO_DIR), root.join(MASK_DIR)] {
        if dir.ends_with(MASK_DIR) && cfg.annotation_mode != AnnotationMode::Mask {
            continue;
        }
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.num_videos;
    let n_val = (cfg.val_fraction * n as f64).round() as usize;
    let n_untrimmed = (cfg.untrimmed_fraction * n as f64).round() as usize;
    let mut untrimmed = vec![false; n];
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    for &i in &order[..n_untrimmed] {
        untrimmed[i] = true;
    }
    let kinds = &MotionKind::ALL[..cfg.classes];
    let mut records = Vec::with_capacity(n);
    let mut logs = Vec::with_capacity(n);
    for i in 0..n {
        let id = format!("vid_{i:04}");
        let class_id = i % cfg.classes;
        let split = if i >= n - n_val { Split::Val } else { Split::Train };
        let (start, end) = if untrimmed[i] {
            let idle = cfg.idle();
            let prefix = rng.random_range(0..=idle);
            (prefix, t - (idle - prefix))
        } else {
            (0, t)
        };
        let actor = place_actor(cfg, class_id, end - start, &mut rng)?;
        let bg = background(cfg, &mut rng);
        let mut pixels = Array4::<u8>::zeros((t, h, w, 3));
        let mut frames = std::collections::BTreeMap::new();
        for f in 0..t {
            let mask = (start..end).contains(&f).then(|| actor_mask(&actor, f - start, h, w));
            for y in 0..h {
                for x in 0..w {
                    let on = mask.as_ref().is_some_and(|m| m[[y, x]]);
                    for c in 0..3 {
                        let v = if on { actor.color[c] } else { bg[[0, y, x, c]] };
                        let noise = if cfg.noise > 0.0 {
                            cfg.noise * (rng.random::<f64>() + rng.random::<f64>() + rng.random::<f64>() - 1.5) * 2.0
                        } else {
                            0.0
                        };
                        pixels[[f, y, x, c]] = quantize(v + noise);
                    }
                }
            }
            let Some(mask) = mask else { continue };
            let Some(b) = BoxRegion::from_mask(&mask) else {
                return Err(Error::InvalidArgument(format!("actor of {id} vanished at frame {f}")));
            };
            let entry = match cfg.annotation_mode {
                AnnotationMode::Box => FrameEntry::Box([b.x1, b.y1, b.x2, b.y2]),
                AnnotationMode::Mask => {
                    let rel = format!("{MASK_DIR}/{id}_{f:04}.stv");
                    let m = Array4::from_shape_fn((1, h, w, 1), |(_, y, x, _)| if mask[[y, x]] { 255u8 } else { 0 });
                    container::write(&root.join(&rel), &m)?;
                    FrameEntry::MaskPath(rel)
                }
            };
            frames.insert(f, entry);
        }
        container::write(&container_path(root, &id), &pixels)?;
        records.push(VideoRecord {
            id: id.clone(),
            class_id,
            trimmed: !untrimmed[i],
            split,
            frames,
        });
        logs.push(SynthVideoLog {
            id,
            class_id,
            split,
            untrimmed: untrimmed[i],
            action_start: start,
            action_end: end,
            motion: actor.motion,
        });
    }
    let file = AnnotationFile {
        class_names: kinds.iter().map(|k| k.name().to_string()).collect(),
        mode: cfg.annotation_mode,
        videos: records,
    };
    write_json(&root.join(ANNOTATION_FILE), &file)?;
    write_json(
        &root.join(SYNTH_LOG_FILE),
        &SynthLog {
            config: cfg.clone(),
            videos: logs,
        },
    )?;
    load_dataset(root)
}
