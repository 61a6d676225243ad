//! Synthetic egocentric accident scenarios and the dataset manifest layer.
//!
//! Each scenario renders an ego-view road scene with exactly one causal
//! entity converging on the ego zone until a collision frame, then emits the
//! paired forward (reason-collision) and backward (prevention) prompts, a
//! five-way accident-reason item, per-frame ground-truth entity boxes, and
//! synthetic gaze maps peaked on the entity. Entities carry class-distinct
//! colors and motion profiles so causal-sensitivity checks have geometric
//! ground truth.

use std::fmt;
use std::path::{Path, PathBuf};

use ndarray::{Array3, ArrayD, IxDyn};
use rand::Rng;

use crate::error::{Error, Result};
use crate::gaze::{render_gaze_map, GaussianKernel, GazeMapSequence};
use crate::rng::rng_from;

pub const FRAME_CHANNELS: usize = 3;

// ---- entity classes -----------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntityClass {
    Pedestrian,
    Cyclist,
    Motorbike,
    Car,
    Truck,
}

impl EntityClass {
    pub const ALL: [EntityClass; 5] = [
        EntityClass::Pedestrian,
        EntityClass::Cyclist,
        EntityClass::Motorbike,
        EntityClass::Car,
        EntityClass::Truck,
    ];

    pub fn word(&self) -> &'static str {
        match self {
            EntityClass::Pedestrian => "pedestrian",
            EntityClass::Cyclist => "cyclist",
            EntityClass::Motorbike => "motorbike",
            EntityClass::Car => "car",
            EntityClass::Truck => "truck",
        }
    }

    pub fn from_word(s: &str) -> Option<EntityClass> {
        EntityClass::ALL.iter().copied().find(|c| c.word() == s)
    }

    /// Saturated class-distinct body color; backgrounds stay desaturated so
    /// color-template detection has a clean margin.
    pub fn color(&self) -> [u8; 3] {
        match self {
            EntityClass::Pedestrian => [220, 40, 40],
            EntityClass::Cyclist => [240, 150, 30],
            EntityClass::Motorbike => [200, 40, 200],
            EntityClass::Car => [40, 80, 220],
            EntityClass::Truck => [40, 180, 80],
        }
    }

    /// Base (width, height) footprint at 32x32; scaled with resolution.
    fn base_size(&self) -> (f64, f64) {
        match self {
            EntityClass::Pedestrian => (2.0, 5.0),
            EntityClass::Cyclist => (3.0, 4.0),
            EntityClass::Motorbike => (3.0, 3.0),
            EntityClass::Car => (6.0, 4.0),
            EntityClass::Truck => (8.0, 6.0),
        }
    }
}

impl fmt::Display for EntityClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.word())
    }
}

// ---- geometry -------------------------------------------------------------------

/// Axis-aligned box, exclusive upper edges.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BoundingBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BoundingBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        BoundingBox { x0, y0, x1, y1 }
    }

    pub fn area(&self) -> f64 {
        (self.x1 - self.x0).max(0.0) * (self.y1 - self.y0).max(0.0)
    }

    pub fn is_empty(&self) -> bool {
        self.area() == 0.0
    }

    pub fn intersection_area(&self, other: &BoundingBox) -> f64 {
        let w = (self.x1.min(other.x1) - self.x0.max(other.x0)).max(0.0);
        let h = (self.y1.min(other.y1) - self.y0.max(other.y0)).max(0.0);
        w * h
    }

    pub fn iou(&self, other: &BoundingBox) -> f64 {
        let inter = self.intersection_area(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    pub fn union_hull(&self, other: &BoundingBox) -> BoundingBox {
        if self.is_empty() {
            return *other;
        }
        if other.is_empty() {
            return *self;
        }
        BoundingBox::new(
            self.x0.min(other.x0),
            self.y0.min(other.y0),
            self.x1.max(other.x1),
            self.y1.max(other.y1),
        )
    }

    pub fn expanded(&self, margin: f64) -> BoundingBox {
        BoundingBox::new(self.x0 - margin, self.y0 - margin, self.x1 + margin, self.y1 + margin)
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }
}

// ---- config ------------------------------------------------------------------------

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Inclusive sampling range for the collision frame index.
    pub collision_frame_min: usize,
    pub collision_frame_max: usize,
    /// Sampling weights per class, order of `EntityClass::ALL`.
    pub class_weights: [f64; 5],
    /// Std-dev (pixels) of synthetic fixation jitter around the entity.
    pub gaze_jitter: f64,
    /// Gaussian window size for synthetic gaze rendering (toy-scale default;
    /// full-scale ingestion uses the 50-pixel kernel).
    pub gaze_kernel: usize,
    /// Fixation samples per frame for synthetic gaze.
    pub gaze_points_per_frame: usize,
    /// Slack (pixels) around entity tubes for counterfactual locality checks.
    pub counterfactual_margin: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        let frames = 16;
        ScenarioConfig {
            frames,
            height: 32,
            width: 32,
            collision_frame_min: frames / 2,
            collision_frame_max: frames - 2,
            class_weights: [1.0; 5],
            gaze_jitter: 1.5,
            gaze_kernel: 9,
            gaze_points_per_frame: 3,
            counterfactual_margin: 1.0,
        }
    }
}

impl ScenarioConfig {
    pub fn with_frames(mut self, frames: usize) -> Self {
        self.frames = frames;
        self.collision_frame_min = (frames / 2).max(1);
        self.collision_frame_max = frames.saturating_sub(2).max(1);
        self
    }

    pub fn with_resolution(mut self, side: usize) -> Self {
        self.height = side;
        self.width = side;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.frames < 2 {
            return Err(Error::config("scenario needs at least 2 frames"));
        }
        if self.collision_frame_min < 1
            || self.collision_frame_max > self.frames - 1
            || self.collision_frame_min > self.collision_frame_max
        {
            return Err(Error::config(format!(
                "collision frame range [{}, {}] outside [1, {}]",
                self.collision_frame_min,
                self.collision_frame_max,
                self.frames - 1
            )));
        }
        Ok(())
    }

    /// Bottom-center region the ego vehicle occupies; the collision target
    /// lies inside it.
    pub fn ego_zone(&self) -> BoundingBox {
        let (w, h) = (self.width as f64, self.height as f64);
        BoundingBox::new(0.35 * w, 0.70 * h, 0.65 * w, h)
    }
}

// ---- prompts and answers -------------------------------------------------------------

const REASON_TEMPLATES: [&str; 5] = [
    "a {entity} suddenly cuts across the ego lane and the ego car crashes into it",
    "the ego car collides with a {entity} that merges without warning",
    "a {entity} swerves into the path of the ego car causing a collision",
    "the ego car hits a {entity} that stops abruptly ahead",
    "a {entity} enters the road from the side and is struck by the ego car",
];

const PREVENTION_TEMPLATES: [&str; 5] = [
    "the ego car brakes early and the {entity} passes safely",
    "the ego car slows down and keeps a safe distance from the {entity}",
    "the ego car yields until the {entity} clears the lane",
    "the ego car stops in time and avoids the {entity}",
    "the ego car swerves gently and gives way to the {entity}",
];

const REASON_ANSWERS: [&str; 5] = [
    "a {entity} cut across the ego lane",
    "a {entity} merged without warning",
    "a {entity} swerved into the ego path",
    "a {entity} stopped abruptly ahead",
    "a {entity} entered the road from the side",
];

const QUESTION_TEMPLATES: [&str; 3] = [
    "why did the accident happen",
    "what caused the collision",
    "what led to the crash",
];

pub const AVOIDANCE_WORDS: [&str; 5] = ["brakes", "slows", "yields", "stops", "swerves"];

fn fill(template: &str, class: EntityClass) -> String {
    template.replace("{entity}", class.word())
}

/// One accident-reason answering item: a question, the correct reason first,
/// and four distractors from other classes.
#[derive(Clone, Debug, PartialEq)]
pub struct AraItem {
    pub question: String,
    pub answers: [String; 5],
    /// Index of the correct answer; 0 by construction (the paper labels it R1).
    pub correct: usize,
}

impl AraItem {
    pub fn validate(&self) -> Result<()> {
        if self.correct != 0 {
            return Err(Error::contract("correct answer must sit at index 0 (R1)"));
        }
        let distinct: std::collections::BTreeSet<&String> = self.answers.iter().collect();
        if distinct.len() != 5 {
            return Err(Error::contract("answer candidates must be distinct"));
        }
        Ok(())
    }
}

// ---- scenario sampling (render-free) ---------------------------------------------------

/// Everything a scenario needs before rasterization. Sampling is split from
/// rendering so distribution tests can run at volume.
#[derive(Clone, Debug)]
pub struct ScenarioSpec {
    pub seed: u64,
    pub class: EntityClass,
    pub collision_frame: usize,
    pub reason_template: usize,
    pub question_template: usize,
    pub distractors: [(EntityClass, usize); 4],
    side_left: bool,
    target: (f64, f64),
    control_pull: f64,
    shake: Vec<(f64, f64)>,
    landmarks: Vec<Landmark>,
    dash_phase: usize,
}

#[derive(Clone, Debug)]
struct Landmark {
    left: bool,
    depth0: f64,
    tone: u8,
}

fn weighted_pick(rng: &mut impl Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut t = rng.random::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        t -= w;
        if t < 0.0 {
            return i;
        }
    }
    weights.len() - 1
}

pub fn sample_spec(seed: u64, config: &ScenarioConfig) -> Result<ScenarioSpec> {
    sample_spec_with_class(seed, config, None)
}

/// Sample a scenario; `force_class` swaps the causal entity while keeping
/// every other draw identical (counterfactual pairing).
pub fn sample_spec_with_class(
    seed: u64,
    config: &ScenarioConfig,
    force_class: Option<EntityClass>,
) -> Result<ScenarioSpec> {
    config.validate()?;
    let (w, h) = (config.width as f64, config.height as f64);

    let mut class_rng = rng_from(seed, &[0]);
    let sampled = EntityClass::ALL[weighted_pick(&mut class_rng, &config.class_weights)];
    let class = force_class.unwrap_or(sampled);

    let mut bg = rng_from(seed, &[1]);
    let n_land = 2 + (bg.random::<f64>() * 2.0) as usize;
    let landmarks: Vec<Landmark> = (0..n_land)
        .map(|_| Landmark {
            left: bg.random::<f64>() < 0.5,
            depth0: bg.random::<f64>(),
            tone: 45 + (bg.random::<f64>() * 25.0) as u8,
        })
        .collect();
    let dash_phase = (bg.random::<f64>() * 8.0) as usize;

    let mut ent = rng_from(seed, &[2]);
    let side_left = ent.random::<f64>() < 0.5;
    let ego = config.ego_zone();
    let tx = 0.5 * (ego.x0 + ego.x1) + (ent.random::<f64>() - 0.5) * 0.2 * (ego.x1 - ego.x0);
    let ty = 0.80 * h + (ent.random::<f64>() - 0.5) * 0.06 * h;
    let control_pull = 0.3 + 0.4 * ent.random::<f64>();
    let span = config.collision_frame_max - config.collision_frame_min;
    let collision_frame =
        config.collision_frame_min + (ent.random::<f64>() * (span as f64 + 1.0)) as usize;
    let collision_frame = collision_frame.min(config.collision_frame_max);
    let shake: Vec<(f64, f64)> = (0..config.frames)
        .map(|_| ((ent.random::<f64>() - 0.5) * 1.5, (ent.random::<f64>() - 0.5) * 1.0))
        .collect();

    let mut ara = rng_from(seed, &[4]);
    let reason_template = (ara.random::<f64>() * REASON_TEMPLATES.len() as f64) as usize;
    let question_template = (ara.random::<f64>() * QUESTION_TEMPLATES.len() as f64) as usize;
    let mut distractors = Vec::new();
    while distractors.len() < 4 {
        let c = EntityClass::ALL[(ara.random::<f64>() * 5.0) as usize % 5];
        let t = (ara.random::<f64>() * REASON_TEMPLATES.len() as f64) as usize;
        if c != class && !distractors.contains(&(c, t)) {
            distractors.push((c, t));
        }
    }

    let _ = w;
    Ok(ScenarioSpec {
        seed,
        class,
        collision_frame,
        reason_template: reason_template.min(REASON_TEMPLATES.len() - 1),
        question_template: question_template.min(QUESTION_TEMPLATES.len() - 1),
        distractors: [distractors[0], distractors[1], distractors[2], distractors[3]],
        side_left,
        target: (tx, ty),
        control_pull,
        shake,
        landmarks,
        dash_phase,
    })
}

impl ScenarioSpec {
    pub fn prompt_f(&self) -> String {
        fill(REASON_TEMPLATES[self.reason_template], self.class)
    }

    pub fn prompt_r(&self) -> String {
        fill(PREVENTION_TEMPLATES[self.reason_template], self.class)
    }

    pub fn ara(&self) -> AraItem {
        let mut answers = [const { String::new() }; 5];
        answers[0] = fill(REASON_ANSWERS[self.reason_template], self.class);
        for (i, &(c, t)) in self.distractors.iter().enumerate() {
            answers[i + 1] = fill(REASON_ANSWERS[t], c);
        }
        AraItem {
            question: QUESTION_TEMPLATES[self.question_template].to_string(),
            answers,
            correct: 0,
        }
    }

    /// Entity center and footprint at frame `f`.
    fn entity_rect(&self, f: usize, config: &ScenarioConfig) -> BoundingBox {
        let (w, h) = (config.width as f64, config.height as f64);
        let scale = h / 32.0;
        let horizon = 0.45 * h;
        let (tx, ty) = self.target;
        let start = match self.class {
            EntityClass::Pedestrian => {
                (if self.side_left { 1.0 } else { w - 2.0 }, ty - 0.02 * h)
            }
            EntityClass::Cyclist => (if self.side_left { 1.5 } else { w - 2.5 }, 0.72 * h),
            EntityClass::Motorbike => {
                (if self.side_left { 0.35 * w } else { 0.65 * w }, horizon + 2.0 * scale)
            }
            EntityClass::Car => (if self.side_left { 0.12 * w } else { 0.88 * w }, 0.74 * h),
            EntityClass::Truck => (if self.side_left { 0.10 * w } else { 0.90 * w }, 0.72 * h),
        };
        let cf = self.collision_frame as f64;
        let p = (f as f64 / cf).min(1.0);
        // cars and trucks merge along an arc; others close in directly
        let (mut cx, mut cy) = match self.class {
            EntityClass::Car | EntityClass::Truck => {
                let ctrl = (
                    start.0 + (tx - start.0) * self.control_pull,
                    ty - 0.12 * h,
                );
                let q = 1.0 - p;
                (
                    q * q * start.0 + 2.0 * q * p * ctrl.0 + p * p * tx,
                    q * q * start.1 + 2.0 * q * p * ctrl.1 + p * p * ty,
                )
            }
            _ => (start.0 + (tx - start.0) * p, start.1 + (ty - start.1) * p),
        };
        if f > self.collision_frame {
            let (sx, sy) = self.shake[f];
            cx = tx + sx;
            cy = ty + sy;
        }
        let (bw, bh) = self.class.base_size();
        let grow = 0.6 + 0.6 * p;
        let (bw, bh) = (bw * scale * grow, bh * scale * grow);
        let x0 = (cx - bw / 2.0).round().clamp(0.0, w - 1.0);
        let y0 = (cy - bh / 2.0).round().clamp(0.0, h - 1.0);
        let x1 = (cx + bw / 2.0).round().clamp(x0 + 1.0, w);
        let y1 = (cy + bh / 2.0).round().clamp(y0 + 1.0, h);
        BoundingBox::new(x0, y0, x1, y1)
    }
}

// ---- rendering --------------------------------------------------------------------------

fn put(frame: &mut Array3<u8>, x: usize, y: usize, c: [u8; 3]) {
    frame[[0, y, x]] = c[0];
    frame[[1, y, x]] = c[1];
    frame[[2, y, x]] = c[2];
}

fn fill_rect(frame: &mut Array3<u8>, b: &BoundingBox, c: [u8; 3]) {
    let (_, h, w) = frame.dim();
    let (x0, y0) = (b.x0.max(0.0) as usize, b.y0.max(0.0) as usize);
    let (x1, y1) = ((b.x1 as usize).min(w), (b.y1 as usize).min(h));
    for y in y0..y1 {
        for x in x0..x1 {
            put(frame, x, y, c);
        }
    }
}

fn render_background(spec: &ScenarioSpec, f: usize, config: &ScenarioConfig) -> Array3<u8> {
    let (h, w) = (config.height, config.width);
    let mut frame = Array3::<u8>::zeros((FRAME_CHANNELS, h, w));
    let horizon = (0.45 * h as f64) as usize;
    let cx = w as f64 / 2.0;
    for y in 0..h {
        for x in 0..w {
            let color = if y < horizon {
                let t = y as f64 / horizon.max(1) as f64;
                [
                    (135.0 + 55.0 * t) as u8,
                    (160.0 + 40.0 * t) as u8,
                    (190.0 + 20.0 * t) as u8,
                ]
            } else {
                let depth = (y - horizon) as f64 / (h - horizon) as f64;
                let half = 1.0 + depth * 0.42 * w as f64;
                if (x as f64 + 0.5 - cx).abs() <= half {
                    [70, 70, 72]
                } else {
                    [100, 110, 90]
                }
            };
            put(&mut frame, x, y, color);
        }
    }
    // lane dashes at a per-clip phase; ego motion reads through the
    // landmark parallax
    let phase = spec.dash_phase % 8;
    for y in horizon..h {
        if (y + phase) % 8 < 4 {
            put(&mut frame, cx as usize, y, [140, 140, 142]);
        }
    }
    // roadside landmarks with depth parallax
    for lm in &spec.landmarks {
        let d = (lm.depth0 + f as f64 * 0.02) % 1.0;
        let y = horizon as f64 + d * d * (h - horizon) as f64;
        let half = 1.0 + (y - horizon as f64) / (h - horizon) as f64 * 0.42 * w as f64;
        let x = if lm.left { cx - half - 2.0 } else { cx + half + 2.0 };
        let size = 1.0 + 1.5 * d;
        let b = BoundingBox::new(x - size / 2.0, y - size, x + size / 2.0, y);
        fill_rect(&mut frame, &b, [lm.tone, lm.tone / 2 + 20, lm.tone / 2]);
    }
    frame
}

fn frames_to_tensor(frames: &[Array3<u8>]) -> ArrayD<f64> {
    let f = frames.len();
    let (c, h, w) = frames[0].dim();
    let mut out = ArrayD::<f64>::zeros(IxDyn(&[f, c, h, w]));
    for (i, fr) in frames.iter().enumerate() {
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    out[[i, ch, y, x]] = fr[[ch, y, x]] as f64 / 255.0 * 2.0 - 1.0;
                }
            }
        }
    }
    out
}

pub fn tensor_to_u8_frames(t: &ArrayD<f64>) -> Vec<Array3<u8>> {
    let (f, c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2], t.shape()[3]);
    (0..f)
        .map(|i| {
            let mut fr = Array3::<u8>::zeros((c, h, w));
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let v = ((t[[i, ch, y, x]] + 1.0) / 2.0 * 255.0).round().clamp(0.0, 255.0);
                        fr[[ch, y, x]] = v as u8;
                    }
                }
            }
            fr
        })
        .collect()
}

// ---- clip record -----------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioMeta {
    pub class: EntityClass,
    pub trajectory_seed: u64,
    pub collision_frame: usize,
}

/// One training sample: frames, gaze, prompt pair, reason item, and ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipRecord {
    /// `[F, C, H, W]` in [-1, 1].
    pub frames: ArrayD<f64>,
    pub gaze: GazeMapSequence,
    pub prompt_f: String,
    pub prompt_r: String,
    pub ara: AraItem,
    pub entity_boxes: Vec<BoundingBox>,
    pub meta: ScenarioMeta,
}

impl ClipRecord {
    pub fn frame_count(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn resolution(&self) -> (usize, usize) {
        (self.frames.shape()[2], self.frames.shape()[3])
    }

    /// Union of per-frame entity boxes over the whole clip.
    pub fn entity_tube(&self) -> BoundingBox {
        self.entity_boxes
            .iter()
            .fold(BoundingBox::new(0.0, 0.0, 0.0, 0.0), |acc, b| acc.union_hull(b))
    }
}

/// Render a full scenario deterministically from its seed.
pub fn generate_scenario(seed: u64, config: &ScenarioConfig) -> Result<ClipRecord> {
    generate_scenario_with_class(seed, config, None)
}

pub fn generate_scenario_with_class(
    seed: u64,
    config: &ScenarioConfig,
    force_class: Option<EntityClass>,
) -> Result<ClipRecord> {
    let spec = sample_spec_with_class(seed, config, force_class)?;
    let mut frames = Vec::with_capacity(config.frames);
    let mut boxes = Vec::with_capacity(config.frames);
    for f in 0..config.frames {
        let mut frame = render_background(&spec, f, config);
        let b = spec.entity_rect(f, config);
        fill_rect(&mut frame, &b, spec.class.color());
        boxes.push(b);
        frames.push(frame);
    }

    // synthetic gaze: fixations near the entity center with jitter
    let kernel = GaussianKernel::new(config.gaze_kernel);
    let mut gaze_rng = rng_from(seed, &[3]);
    let mut maps = Array3::<f64>::zeros((config.frames, config.height, config.width));
    for (f, b) in boxes.iter().enumerate() {
        let (cx, cy) = ((b.x0 + b.x1) / 2.0, (b.y0 + b.y1) / 2.0);
        let pts: Vec<(u32, u32)> = (0..config.gaze_points_per_frame)
            .map(|_| {
                let jx: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut gaze_rng);
                let jy: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut gaze_rng);
                let x = (cx + jx * config.gaze_jitter).round().clamp(0.0, config.width as f64 - 1.0);
                let y = (cy + jy * config.gaze_jitter).round().clamp(0.0, config.height as f64 - 1.0);
                (x as u32, y as u32)
            })
            .collect();
        maps.index_axis_mut(ndarray::Axis(0), f)
            .assign(&render_gaze_map(&pts, config.height, config.width, &kernel));
    }

    Ok(ClipRecord {
        frames: frames_to_tensor(&frames),
        gaze: GazeMapSequence { maps },
        prompt_f: spec.prompt_f(),
        prompt_r: spec.prompt_r(),
        ara: spec.ara(),
        entity_boxes: boxes,
        meta: ScenarioMeta {
            class: spec.class,
            trajectory_seed: seed,
            collision_frame: spec.collision_frame,
        },
    })
}

/// Reverse the time order: frames, gaze and boxes flip, the prompt pair
/// swaps, and the collision index maps to `F - 1 - index`. Involutive.
pub fn reverse_clip(rec: &ClipRecord) -> ClipRecord {
    let f = rec.frame_count();
    let mut frames = rec.frames.clone();
    for i in 0..f {
        frames
            .index_axis_mut(ndarray::Axis(0), i)
            .assign(&rec.frames.index_axis(ndarray::Axis(0), f - 1 - i));
    }
    let boxes = (0..f).map(|i| rec.entity_boxes[f - 1 - i]).collect();
    ClipRecord {
        frames,
        gaze: rec.gaze.reversed(),
        prompt_f: rec.prompt_r.clone(),
        prompt_r: rec.prompt_f.clone(),
        ara: rec.ara.clone(),
        entity_boxes: boxes,
        meta: ScenarioMeta {
            class: rec.meta.class,
            trajectory_seed: rec.meta.trajectory_seed,
            collision_frame: f - 1 - rec.meta.collision_frame,
        },
    }
}

// ---- clip directory I/O -------------------------------------------------------------------

/// On-disk layout: `frames/{i:05}.png`, `gaze/gaze_{i:05}.png`, `meta.txt`.
pub fn write_clip(dir: &Path, rec: &ClipRecord) -> Result<()> {
    let frames_dir = dir.join("frames");
    std::fs::create_dir_all(&frames_dir)?;
    let u8_frames = tensor_to_u8_frames(&rec.frames);
    for (i, fr) in u8_frames.iter().enumerate() {
        let (_, h, w) = fr.dim();
        let mut img = image::RgbImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                img.put_pixel(
                    x as u32,
                    y as u32,
                    image::Rgb([fr[[0, y, x]], fr[[1, y, x]], fr[[2, y, x]]]),
                );
            }
        }
        img.save(frames_dir.join(format!("{i:05}.png")))?;
    }
    rec.gaze.save_dir(&dir.join("gaze"))?;

    let mut meta = String::new();
    let mut kv = |k: &str, v: String| {
        assert!(!v.contains('\t') && !v.contains('\n'), "meta value may not contain tabs/newlines");
        meta.push_str(&format!("{k}\t{v}\n"));
    };
    kv("class", rec.meta.class.word().to_string());
    kv("trajectory_seed", rec.meta.trajectory_seed.to_string());
    kv("collision_frame", rec.meta.collision_frame.to_string());
    kv("frames", rec.frame_count().to_string());
    kv("prompt_f", rec.prompt_f.clone());
    kv("prompt_r", rec.prompt_r.clone());
    kv("question", rec.ara.question.clone());
    for (i, a) in rec.ara.answers.iter().enumerate() {
        kv(&format!("answer_{}", i + 1), a.clone());
    }
    kv("correct", "1".to_string()); // 1-based: R1
    for (i, b) in rec.entity_boxes.iter().enumerate() {
        kv(&format!("box_{i:05}"), format!("{} {} {} {}", b.x0, b.y0, b.x1, b.y1));
    }
    std::fs::write(dir.join("meta.txt"), meta)?;
    Ok(())
}

fn meta_lookup<'a>(
    map: &'a std::collections::BTreeMap<String, String>,
    key: &str,
    dir: &Path,
) -> Result<&'a String> {
    map.get(key)
        .ok_or_else(|| Error::Manifest(format!("{}: meta.txt missing key {key}", dir.display())))
}

pub fn load_clip(dir: &Path) -> Result<ClipRecord> {
    let meta_path = dir.join("meta.txt");
    let text = std::fs::read_to_string(&meta_path)
        .map_err(|e| Error::Manifest(format!("{}: {e}", meta_path.display())))?;
    let mut map = std::collections::BTreeMap::new();
    for line in text.lines() {
        if let Some((k, v)) = line.split_once('\t') {
            map.insert(k.to_string(), v.to_string());
        }
    }
    let class = EntityClass::from_word(meta_lookup(&map, "class", dir)?)
        .ok_or_else(|| Error::Manifest(format!("{}: unknown class", dir.display())))?;
    let frames_n: usize = meta_lookup(&map, "frames", dir)?
        .parse()
        .map_err(|_| Error::Manifest(format!("{}: bad frame count", dir.display())))?;
    let collision_frame: usize = meta_lookup(&map, "collision_frame", dir)?
        .parse()
        .map_err(|_| Error::Manifest(format!("{}: bad collision frame", dir.display())))?;
    let trajectory_seed: u64 = meta_lookup(&map, "trajectory_seed", dir)?
        .parse()
        .map_err(|_| Error::Manifest(format!("{}: bad trajectory seed", dir.display())))?;

    let mut frames = Vec::with_capacity(frames_n);
    for i in 0..frames_n {
        let p = dir.join("frames").join(format!("{i:05}.png"));
        let img = image::open(&p)
            .map_err(|e| Error::Manifest(format!("{}: {e}", p.display())))?
            .into_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut fr = Array3::<u8>::zeros((FRAME_CHANNELS, h, w));
        for y in 0..h {
            for x in 0..w {
                let px = img.get_pixel(x as u32, y as u32);
                fr[[0, y, x]] = px[0];
                fr[[1, y, x]] = px[1];
                fr[[2, y, x]] = px[2];
            }
        }
        frames.push(fr);
    }
    let gaze = GazeMapSequence::load_dir(&dir.join("gaze"), frames_n)?;

    let mut boxes = Vec::with_capacity(frames_n);
    for i in 0..frames_n {
        let raw = meta_lookup(&map, &format!("box_{i:05}"), dir)?;
        let parts: Vec<f64> = raw
            .split_whitespace()
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Manifest(format!("{}: bad box {i}", dir.display())))?;
        if parts.len() != 4 {
            return Err(Error::Manifest(format!("{}: box {i} needs 4 fields", dir.display())));
        }
        boxes.push(BoundingBox::new(parts[0], parts[1], parts[2], parts[3]));
    }

    let answers: Vec<String> = (1..=5)
        .map(|i| meta_lookup(&map, &format!("answer_{i}"), dir).cloned())
        .collect::<Result<_>>()?;
    Ok(ClipRecord {
        frames: frames_to_tensor(&frames),
        gaze,
        prompt_f: meta_lookup(&map, "prompt_f", dir)?.clone(),
        prompt_r: meta_lookup(&map, "prompt_r", dir)?.clone(),
        ara: AraItem {
            question: meta_lookup(&map, "question", dir)?.clone(),
            answers: answers.try_into().unwrap(),
            correct: 0,
        },
        entity_boxes: boxes,
        meta: ScenarioMeta { class, trajectory_seed, collision_frame },
    })
}

// ---- manifest ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRecord {
    /// Clip directory, relative to the manifest location.
    pub clip_dir: String,
    pub split: String,
    pub class: EntityClass,
    pub collision_frame: usize,
    pub prompt_f: String,
    pub prompt_r: String,
    pub question: String,
    pub answers: [String; 5],
}

impl ManifestRecord {
    pub fn from_clip(rec: &ClipRecord, clip_dir: &str, split: &str) -> Self {
        ManifestRecord {
            clip_dir: clip_dir.to_string(),
            split: split.to_string(),
            class: rec.meta.class,
            collision_frame: rec.meta.collision_frame,
            prompt_f: rec.prompt_f.clone(),
            prompt_r: rec.prompt_r.clone(),
            question: rec.ara.question.clone(),
            answers: rec.ara.answers.clone(),
        }
    }
}

const MANIFEST_MAGIC: &str = "gazediff-manifest";
const MANIFEST_VERSION: &str = "v1";

/// Tab-separated, one record per line, count pinned in the header line.
pub fn write_manifest(records: &[ManifestRecord], path: &Path) -> Result<()> {
    let mut out = format!("{MANIFEST_MAGIC}\t{MANIFEST_VERSION}\tcount={}\n", records.len());
    out.push_str(
        "# clip_dir\tsplit\tclass\tcollision_frame\tprompt_f\tprompt_r\tquestion\tr1\tr2\tr3\tr4\tr5\n",
    );
    for r in records {
        let fields = [
            r.clip_dir.as_str(),
            r.split.as_str(),
            r.class.word(),
            &r.collision_frame.to_string(),
            r.prompt_f.as_str(),
            r.prompt_r.as_str(),
            r.question.as_str(),
            r.answers[0].as_str(),
            r.answers[1].as_str(),
            r.answers[2].as_str(),
            r.answers[3].as_str(),
            r.answers[4].as_str(),
        ]
        .map(|s| s.to_string());
        for f in &fields {
            assert!(!f.contains('\t') && !f.contains('\n'), "manifest field contains separator");
        }
        out.push_str(&fields.join("\t"));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Load and validate: header count must match, every referenced clip
/// directory must exist with its parts in place. The first violating record
/// is reported by index.
pub fn load_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Manifest(format!("cannot read manifest {}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Manifest("empty manifest".into()))?;
    let hparts: Vec<&str> = header.split('\t').collect();
    if hparts.len() != 3 || hparts[0] != MANIFEST_MAGIC || hparts[1] != MANIFEST_VERSION {
        return Err(Error::Manifest(format!("bad manifest header: {header}")));
    }
    let count: usize = hparts[2]
        .strip_prefix("count=")
        .and_then(|c| c.parse().ok())
        .ok_or_else(|| Error::Manifest(format!("bad manifest count field: {}", hparts[2])))?;

    let mut records = Vec::new();
    for line in lines {
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let idx = records.len();
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() != 12 {
            return Err(Error::Manifest(format!(
                "record {idx}: malformed: expected 12 fields, got {}",
                parts.len()
            )));
        }
        let class = EntityClass::from_word(parts[2]).ok_or_else(|| {
            Error::Manifest(format!("record {idx}: malformed: unknown class '{}'", parts[2]))
        })?;
        let collision_frame: usize = parts[3].parse().map_err(|_| {
            Error::Manifest(format!("record {idx}: malformed: bad collision frame '{}'", parts[3]))
        })?;
        let rec = ManifestRecord {
            clip_dir: parts[0].to_string(),
            split: parts[1].to_string(),
            class,
            collision_frame,
            prompt_f: parts[4].to_string(),
            prompt_r: parts[5].to_string(),
            question: parts[6].to_string(),
            answers: [
                parts[7].to_string(),
                parts[8].to_string(),
                parts[9].to_string(),
                parts[10].to_string(),
                parts[11].to_string(),
            ],
        };
        let clip_path = base.join(&rec.clip_dir);
        for part in ["frames", "gaze", "meta.txt"] {
            let p = clip_path.join(part);
            if !p.exists() {
                return Err(Error::Manifest(format!(
                    "record {idx}: dangling path: {}",
                    p.display()
                )));
            }
        }
        records.push(rec);
    }
    if records.len() != count {
        return Err(Error::Manifest(format!(
            "record count {} does not match header count {count}",
            records.len()
        )));
    }
    Ok(records)
}

/// Resolve a record's clip directory against its manifest location.
pub fn clip_path(manifest_path: &Path, rec: &ManifestRecord) -> PathBuf {
    manifest_path
        .parent()
        .unwrap_or(Path::new("."))
        .join(&rec.clip_dir)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ScenarioConfig {
        ScenarioConfig::default()
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_scenario(42, &cfg()).unwrap();
        let b = generate_scenario(42, &cfg()).unwrap();
        assert_eq!(a, b);
        let c = generate_scenario(43, &cfg()).unwrap();
        assert_ne!(a.frames, c.frames);
    }

    #[test]
    fn entity_reaches_ego_zone_at_collision() {
        let config = cfg();
        for seed in 0..50u64 {
            let rec = generate_scenario(seed, &config).unwrap();
            let b = rec.entity_boxes[rec.meta.collision_frame];
            assert!(
                b.intersection_area(&config.ego_zone()) > 0.0,
                "seed {seed}: box {b:?} misses ego zone at frame {}",
                rec.meta.collision_frame
            );
            assert!(rec.meta.collision_frame >= 1 && rec.meta.collision_frame <= config.frames - 1);
        }
    }

    #[test]
    fn class_frequencies_match_weights() {
        let mut config = cfg();
        config.class_weights = [4.0, 1.0, 1.0, 1.0, 1.0];
        let n = 10_000;
        let mut counts = [0usize; 5];
        for seed in 0..n as u64 {
            let spec = sample_spec(seed, &config).unwrap();
            let idx = EntityClass::ALL.iter().position(|&c| c == spec.class).unwrap();
            counts[idx] += 1;
        }
        let total_w: f64 = config.class_weights.iter().sum();
        for (i, &c) in counts.iter().enumerate() {
            let p = config.class_weights[i] / total_w;
            let mean = n as f64 * p;
            let sigma = (n as f64 * p * (1.0 - p)).sqrt();
            assert!(
                (c as f64 - mean).abs() < 3.0 * sigma,
                "class {i}: {c} outside {mean} +- 3*{sigma}"
            );
        }
    }

    #[test]
    fn prompt_and_answers_consistent() {
        for seed in 0..100u64 {
            let rec = generate_scenario(seed, &cfg()).unwrap();
            assert!(rec.prompt_f.contains(rec.meta.class.word()));
            assert!(AVOIDANCE_WORDS.iter().any(|w| rec.prompt_r.contains(w)));
            rec.ara.validate().unwrap();
            // exactly one answer names the generating reason
            let spec = sample_spec(seed, &cfg()).unwrap();
            let correct = fill(REASON_ANSWERS[spec.reason_template], spec.class);
            let matching = rec.ara.answers.iter().filter(|a| **a == correct).count();
            assert_eq!(matching, 1);
            assert_eq!(rec.ara.answers[0], correct);
        }
    }

    #[test]
    fn counterfactual_pair_differs_only_in_entity_tubes() {
        let config = cfg();
        for seed in [7u64, 19, 23] {
            let a = generate_scenario_with_class(seed, &config, Some(EntityClass::Pedestrian)).unwrap();
            let b = generate_scenario_with_class(seed, &config, Some(EntityClass::Truck)).unwrap();
            let tube = a
                .entity_tube()
                .union_hull(&b.entity_tube())
                .expanded(config.counterfactual_margin);
            let (f, _, h, w) =
                (a.frames.shape()[0], a.frames.shape()[1], a.frames.shape()[2], a.frames.shape()[3]);
            for fi in 0..f {
                for y in 0..h {
                    for x in 0..w {
                        let same = (0..3)
                            .all(|c| a.frames[[fi, c, y, x]] == b.frames[[fi, c, y, x]]);
                        if !same {
                            assert!(
                                tube.contains_point(x as f64 + 0.5, y as f64 + 0.5),
                                "seed {seed}: pixel ({x}, {y}) frame {fi} changed outside tubes"
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn reverse_clip_is_involutive() {
        let rec = generate_scenario(5, &cfg()).unwrap();
        let rev = reverse_clip(&rec);
        let back = reverse_clip(&rev);
        assert_eq!(rec, back);
        let f = rec.frame_count();
        // frame 0 of the reversed clip equals frame F-1 of the original
        assert_eq!(
            rev.frames.index_axis(ndarray::Axis(0), 0),
            rec.frames.index_axis(ndarray::Axis(0), f - 1)
        );
        assert_eq!(rev.meta.collision_frame, f - 1 - rec.meta.collision_frame);
        assert_eq!(rev.prompt_f, rec.prompt_r);
    }

    #[test]
    fn clip_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let rec = generate_scenario(11, &cfg()).unwrap();
        write_clip(dir.path(), &rec).unwrap();
        let loaded = load_clip(dir.path()).unwrap();
        assert_eq!(loaded.frames, rec.frames);
        assert_eq!(loaded.prompt_f, rec.prompt_f);
        assert_eq!(loaded.prompt_r, rec.prompt_r);
        assert_eq!(loaded.ara, rec.ara);
        assert_eq!(loaded.entity_boxes, rec.entity_boxes);
        assert_eq!(loaded.meta, rec.meta);
        // gaze is 8-bit quantized on disk; peaks survive exactly
        for f in 0..rec.frame_count() {
            let orig = rec.gaze.maps.index_axis(ndarray::Axis(0), f);
            let got = loaded.gaze.maps.index_axis(ndarray::Axis(0), f);
            let om = orig.iter().cloned().fold(0.0f64, f64::max);
            let gm = got.iter().cloned().fold(0.0f64, f64::max);
            assert_eq!(om, gm);
        }
    }

    #[test]
    fn manifest_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let config = cfg();
        let mut records = Vec::new();
        for i in 0..3u64 {
            let rec = generate_scenario(i, &config).unwrap();
            let clip_dir = format!("clip_{i:05}");
            write_clip(&dir.path().join(&clip_dir), &rec).unwrap();
            records.push(ManifestRecord::from_clip(&rec, &clip_dir, "train"));
        }
        let mpath = dir.path().join("manifest.tsv");
        write_manifest(&records, &mpath).unwrap();
        let loaded = load_manifest(&mpath).unwrap();
        assert_eq!(loaded, records);

        // dangling path names the record index
        std::fs::remove_file(dir.path().join("clip_00001/meta.txt")).unwrap();
        let err = load_manifest(&mpath).unwrap_err();
        match err {
            Error::Manifest(msg) => {
                assert!(msg.contains("record 1"), "{msg}");
                assert!(msg.contains("dangling"), "{msg}");
            }
            other => panic!("unexpected error {other:?}"),
        }

        // missing manifest is its own failure
        assert!(matches!(
            load_manifest(&dir.path().join("nope.tsv")),
            Err(Error::Manifest(_))
        ));
    }

    #[test]
    fn iou_basics() {
        let a = BoundingBox::new(0.0, 0.0, 4.0, 4.0);
        assert_eq!(a.iou(&a), 1.0);
        let b = BoundingBox::new(4.0, 4.0, 8.0, 8.0);
        assert_eq!(a.iou(&b), 0.0);
        let c = BoundingBox::new(2.0, 0.0, 6.0, 4.0);
        assert!((a.iou(&c) - 8.0 / 24.0).abs() < 1e-12);
    }
}
