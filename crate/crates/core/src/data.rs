//! Triplet data: the shared [`Triplet`] type and validator, annotation
//! formats and ingestion, generative-image clients with the multi-turn
//! "same identity" protocol, and an offline stick-figure scene generator.

use std::fmt;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::str::FromStr;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::id_extractor::validate_box;
use crate::image::{Image, Rgb};

pub const NUM_KEYPOINTS: usize = 17;

pub const KEYPOINT_NAMES: [&str; NUM_KEYPOINTS] = [
    "nose",
    "left_eye",
    "right_eye",
    "left_ear",
    "right_ear",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_hip",
    "right_hip",
    "left_knee",
    "right_knee",
    "left_ankle",
    "right_ankle",
];

/// Limbs drawn by the renderer, as keypoint index pairs.
pub const LIMBS: [(usize, usize); 12] = [
    (5, 6),
    (5, 7),
    (7, 9),
    (6, 8),
    (8, 10),
    (11, 12),
    (11, 13),
    (13, 15),
    (12, 14),
    (14, 16),
    (5, 11),
    (6, 12),
];

/// One annotated keypoint; `v` follows the COCO convention (0 unlabeled,
/// 1 labeled but occluded, 2 visible). Serialized as `[x, y, v]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "(f64, f64, u8)", into = "(f64, f64, u8)")]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub v: u8,
}

impl From<(f64, f64, u8)> for Keypoint {
    fn from((x, y, v): (f64, f64, u8)) -> Self {
        Self { x, y, v }
    }
}

impl From<Keypoint> for (f64, f64, u8) {
    fn from(k: Keypoint) -> Self {
        (k.x, k.y, k.v)
    }
}

/// Checks one object's keypoints: exactly 17 rows, flags in `0..=2`, and
/// coordinates inside `[0, w−1] × [0, h−1]`.
pub fn validate_keypoints(kps: &[Keypoint], object: usize, width: usize, height: usize) -> Result<()> {
    let fail = |reason: String| Error::Keypoints { object, reason };
    if kps.len() != NUM_KEYPOINTS {
        return Err(fail(format!("expected {NUM_KEYPOINTS} keypoints, found {}", kps.len())));
    }
    for (i, k) in kps.iter().enumerate() {
        if k.v > 2 {
            return Err(fail(format!("{} has visibility flag {}", KEYPOINT_NAMES[i], k.v)));
        }
        let inside = k.x.is_finite()
            && k.y.is_finite()
            && (0.0..=(width as f64 - 1.0)).contains(&k.x)
            && (0.0..=(height as f64 - 1.0)).contains(&k.y);
        if !inside {
            return Err(fail(format!("{} at ({}, {}) outside {width}x{height}", KEYPOINT_NAMES[i], k.x, k.y)));
        }
    }
    Ok(())
}

/// Row-major run-length encoded binary mask; runs alternate starting with
/// zeros.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RleMask {
    pub width: usize,
    pub height: usize,
    pub counts: Vec<u32>,
}

impl RleMask {
    pub fn encode(width: usize, height: usize, mask: &[bool]) -> Result<Self> {
        if mask.len() != width * height {
            return Err(Error::shape("mask length"));
        }
        let mut counts = Vec::new();
        let mut current = false;
        let mut run = 0u32;
        for &m in mask {
            if m != current {
                counts.push(run);
                run = 0;
                current = m;
            }
            run += 1;
        }
        counts.push(run);
        Ok(Self { width, height, counts })
    }

    pub fn decode(&self) -> Result<Vec<bool>> {
        let total: usize = self.counts.iter().map(|c| *c as usize).sum();
        if total != self.width * self.height {
            return Err(Error::invalid(format!("mask runs cover {total} pixels, expected {}", self.width * self.height)));
        }
        let mut out = Vec::with_capacity(total);
        for (i, c) in self.counts.iter().enumerate() {
            out.extend(std::iter::repeat_n(i % 2 == 1, *c as usize));
        }
        Ok(out)
    }

    pub fn area(&self) -> usize {
        self.counts.iter().skip(1).step_by(2).map(|c| *c as usize).sum()
    }
}

/// Training sample: target image, one image prompt per object, the text
/// prompt and per-object annotations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Triplet {
    pub target: Image,
    pub prompts: Vec<Image>,
    pub text: String,
    /// Class noun per object.
    pub classes: Vec<String>,
    /// Per object, keypoints in the target image.
    pub keypoints_x: Vec<Vec<Keypoint>>,
    /// Per object, keypoints in that object's prompt image.
    pub keypoints_ci: Vec<Vec<Keypoint>>,
    /// Per object, normalized box in the target image.
    pub boxes: Vec<[f64; 4]>,
    /// Target caption followed by one caption per prompt image.
    pub captions: Vec<String>,
    #[serde(default)]
    pub masks: Option<Vec<RleMask>>,
    #[serde(default)]
    pub relation: Option<String>,
}

impl Triplet {
    pub fn num_objects(&self) -> usize {
        self.prompts.len()
    }

    /// The invariants every producer must satisfy.
    pub fn validate(&self) -> Result<()> {
        let n = self.prompts.len();
        if !(1..=2).contains(&n) {
            return Err(Error::invalid(format!("triplet needs 1 or 2 image prompts, has {n}")));
        }
        for (what, len) in [
            ("classes", self.classes.len()),
            ("target keypoints", self.keypoints_x.len()),
            ("prompt keypoints", self.keypoints_ci.len()),
            ("boxes", self.boxes.len()),
        ] {
            if len != n {
                return Err(Error::invalid(format!("{len} {what} for {n} objects")));
            }
        }
        if self.captions.len() != n + 1 {
            return Err(Error::invalid(format!("{} captions for {} images", self.captions.len(), n + 1)));
        }
        let (tw, th) = (self.target.width(), self.target.height());
        for k in 0..n {
            validate_keypoints(&self.keypoints_x[k], k, tw, th)?;
            let p = &self.prompts[k];
            validate_keypoints(&self.keypoints_ci[k], k, p.width(), p.height())?;
            validate_box(self.boxes[k])?;
        }
        if let Some(masks) = &self.masks {
            if masks.len() != n {
                return Err(Error::invalid(format!("{} masks for {n} objects", masks.len())));
            }
            for m in masks {
                if (m.width, m.height) != (tw, th) {
                    return Err(Error::invalid("mask size differs from target image"));
                }
                m.decode()?;
            }
        }
        Ok(())
    }
}

/// Manifest line: one JSON document per triplet with image paths relative
/// to the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TripletRecord {
    pub target: String,
    pub prompts: Vec<String>,
    pub text: String,
    pub classes: Vec<String>,
    pub keypoints: KeypointRecord,
    pub boxes: Vec<[f64; 4]>,
    pub captions: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub masks: Option<Vec<RleMask>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relation: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeypointRecord {
    pub target: Vec<Vec<Keypoint>>,
    pub prompts: Vec<Vec<Keypoint>>,
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";

/// Writes images under `dir/images/` and one manifest line per triplet.
pub fn save_manifest(dir: impl AsRef<Path>, triplets: &[Triplet]) -> Result<PathBuf> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut lines = String::new();
    for (i, t) in triplets.iter().enumerate() {
        t.validate()?;
        let target = format!("images/{i:04}_target.png");
        t.target.save_png(dir.join(&target))?;
        let mut prompts = Vec::new();
        for (k, p) in t.prompts.iter().enumerate() {
            let name = format!("images/{i:04}_prompt{k}.png");
            p.save_png(dir.join(&name))?;
            prompts.push(name);
        }
        let rec = TripletRecord {
            target,
            prompts,
            text: t.text.clone(),
            classes: t.classes.clone(),
            keypoints: KeypointRecord { target: t.keypoints_x.clone(), prompts: t.keypoints_ci.clone() },
            boxes: t.boxes.clone(),
            captions: t.captions.clone(),
            masks: t.masks.clone(),
            relation: t.relation.clone(),
        };
        lines.push_str(&serde_json::to_string(&rec).expect("record serializes"));
        lines.push('\n');
    }
    let path = dir.join(MANIFEST_FILE);
    std::fs::write(&path, lines).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Reads a manifest written by [`save_manifest`] (or by hand) and validates
/// every triplet.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<Triplet>> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or(Path::new("."));
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let rec: TripletRecord = serde_json::from_str(line).map_err(|e| Error::json(path, e))?;
        let t = Triplet {
            target: Image::load(base.join(&rec.target))?,
            prompts: rec.prompts.iter().map(|p| Image::load(base.join(p))).collect::<Result<_>>()?,
            text: rec.text,
            classes: rec.classes,
            keypoints_x: rec.keypoints.target,
            keypoints_ci: rec.keypoints.prompts,
            boxes: rec.boxes,
            captions: rec.captions,
            masks: rec.masks,
            relation: rec.relation,
        };
        t.validate()?;
        out.push(t);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Synthetic scenes

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Relation {
    Hug,
    Shake,
    Ride,
    BackToBack,
}

impl Relation {
    pub const ALL: [Relation; 4] = [Self::Hug, Self::Shake, Self::Ride, Self::BackToBack];

    pub fn label(self) -> &'static str {
        match self {
            Self::Hug => "hug",
            Self::Shake => "shake",
            Self::Ride => "ride",
            Self::BackToBack => "back-to-back",
        }
    }

    pub fn prompt(self, a: &str, b: &str) -> String {
        match self {
            Self::Hug => format!("A {a} is hugging a {b}"),
            Self::Shake => format!("A {a} shakes hands with a {b}"),
            Self::Ride => format!("A {a} is riding a {b}"),
            Self::BackToBack => format!("A {a} and a {b} are standing back to back"),
        }
    }

    /// Finds the relation named or described in free text.
    pub fn detect(text: &str) -> Option<Relation> {
        let t = text.to_ascii_lowercase();
        if t.contains("back to back") || t.contains("back-to-back") {
            Some(Self::BackToBack)
        } else if t.contains("hug") {
            Some(Self::Hug)
        } else if t.contains("shak") {
            Some(Self::Shake)
        } else if t.contains("rid") {
            Some(Self::Ride)
        } else {
            None
        }
    }
}

impl fmt::Display for Relation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Relation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|r| r.label() == s)
            .ok_or_else(|| Error::invalid(format!("unsupported relation {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadShape {
    Round,
    Square,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FigureStyle {
    pub color_name: String,
    pub color: Rgb,
    pub head: HeadShape,
}

impl FigureStyle {
    pub fn class_noun(&self) -> String {
        format!("{} figure", self.color_name)
    }
}

pub const PALETTE: [(&str, Rgb); 6] = [
    ("red", [0.85, 0.15, 0.12]),
    ("blue", [0.12, 0.25, 0.85]),
    ("green", [0.1, 0.6, 0.2]),
    ("orange", [0.95, 0.55, 0.1]),
    ("purple", [0.55, 0.2, 0.7]),
    ("black", [0.08, 0.08, 0.08]),
];

pub const SCENE_SIZE: usize = 64;

type Joints = [[f64; 2]; NUM_KEYPOINTS];

/// Pose in figure units (≈1.2 tall, y down, hip centre at the origin).
/// Angles are radians measured from +x towards +y (downwards).
#[derive(Clone, Copy, Debug)]
struct Pose {
    torso: f64,
    left_arm: [f64; 2],
    right_arm: [f64; 2],
    left_leg: [f64; 2],
    right_leg: [f64; 2],
}

const UP: f64 = -std::f64::consts::FRAC_PI_2;
const DOWN: f64 = std::f64::consts::FRAC_PI_2;

impl Pose {
    fn neutral() -> Self {
        Self { torso: UP, left_arm: [1.75, 1.6], right_arm: [1.39, 1.54], left_leg: [1.7, 1.6], right_leg: [1.44, 1.54] }
    }

    /// Joint positions for a figure whose hip centre is at `origin`.
    fn joints(&self, origin: [f64; 2], scale: f64) -> Joints {
        let at = |p: [f64; 2], len: f64, ang: f64| [p[0] + len * ang.cos(), p[1] + len * ang.sin()];
        let perp = self.torso + DOWN;
        let hip = [0.0, 0.0];
        let neck = at(hip, 0.45, self.torso);
        let head = at(neck, 0.17, self.torso);
        let mut j = [[0.0; 2]; NUM_KEYPOINTS];
        j[0] = at(head, 0.02, self.torso + std::f64::consts::PI);
        j[1] = at(at(head, 0.04, perp), 0.03, self.torso);
        j[2] = at(at(head, -0.04, perp), 0.03, self.torso);
        j[3] = at(head, 0.08, perp);
        j[4] = at(head, -0.08, perp);
        j[5] = at(neck, 0.12, perp);
        j[6] = at(neck, -0.12, perp);
        j[7] = at(j[5], 0.17, self.left_arm[0]);
        j[8] = at(j[6], 0.17, self.right_arm[0]);
        j[9] = at(j[7], 0.17, self.left_arm[1]);
        j[10] = at(j[8], 0.17, self.right_arm[1]);
        j[11] = at(hip, 0.08, perp);
        j[12] = at(hip, -0.08, perp);
        j[13] = at(j[11], 0.22, self.left_leg[0]);
        j[14] = at(j[12], 0.22, self.right_leg[0]);
        j[15] = at(j[13], 0.22, self.left_leg[1]);
        j[16] = at(j[14], 0.22, self.right_leg[1]);
        let max = (SCENE_SIZE - 1) as f64;
        j.map(|p| {
            [
                (origin[0] + scale * p[0]).round().clamp(0.0, max),
                (origin[1] + scale * p[1]).round().clamp(0.0, max),
            ]
        })
    }
}

fn head_center(j: &Joints) -> [f64; 2] {
    [(j[3][0] + j[4][0]) / 2.0, (j[3][1] + j[4][1]) / 2.0]
}

fn mirror(j: &Joints) -> Joints {
    let max = (SCENE_SIZE - 1) as f64;
    j.map(|p| [max - p[0], p[1]])
}

/// Rendered scene with exact per-figure annotations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub relation: Relation,
    pub styles: [FigureStyle; 2],
    /// Per figure, 17 integer pixel coordinates.
    pub joints: [Vec<[f64; 2]>; 2],
    pub visibility: [Vec<u8>; 2],
    pub image: Image,
    /// Per pixel, the figure drawn on top (`0`, `1`) or `None` for background.
    pub owner: Vec<Option<u8>>,
    pub head_radius: f64,
}

struct Canvas {
    image: Image,
    owner: Vec<Option<u8>>,
}

impl Canvas {
    fn new(bg: Rgb) -> Self {
        Self { image: Image::filled(SCENE_SIZE, SCENE_SIZE, bg), owner: vec![None; SCENE_SIZE * SCENE_SIZE] }
    }

    fn paint(&mut self, x: i64, y: i64, c: Rgb, id: u8) {
        let n = SCENE_SIZE as i64;
        if (0..n).contains(&x) && (0..n).contains(&y) {
            self.image.set(x as usize, y as usize, c);
            self.owner[y as usize * SCENE_SIZE + x as usize] = Some(id);
        }
    }

    /// Every pixel centre within `radius` of the segment.
    fn segment(&mut self, a: [f64; 2], b: [f64; 2], radius: f64, c: Rgb, id: u8) {
        let (x0, x1) = (a[0].min(b[0]) - radius, a[0].max(b[0]) + radius);
        let (y0, y1) = (a[1].min(b[1]) - radius, a[1].max(b[1]) + radius);
        let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
        let len2 = dx * dx + dy * dy;
        for y in y0.floor() as i64..=y1.ceil() as i64 {
            for x in x0.floor() as i64..=x1.ceil() as i64 {
                let (px, py) = (x as f64 - a[0], y as f64 - a[1]);
                let s = if len2 > 0.0 { ((px * dx + py * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
                let (ex, ey) = (px - s * dx, py - s * dy);
                if ex * ex + ey * ey <= radius * radius + 1e-9 {
                    self.paint(x, y, c, id);
                }
            }
        }
    }

    fn head(&mut self, center: [f64; 2], radius: f64, shape: HeadShape, c: Rgb, id: u8) {
        let r = radius.ceil() as i64 + 1;
        let (cx, cy) = (center[0].round() as i64, center[1].round() as i64);
        for y in cy - r..=cy + r {
            for x in cx - r..=cx + r {
                let (dx, dy) = (x as f64 - center[0], y as f64 - center[1]);
                let inside = match shape {
                    HeadShape::Round => dx * dx + dy * dy <= radius * radius + 1e-9,
                    HeadShape::Square => dx.abs() <= radius && dy.abs() <= radius,
                };
                if inside {
                    self.paint(x, y, c, id);
                }
            }
        }
    }

    fn figure(&mut self, j: &Joints, style: &FigureStyle, head_radius: f64, id: u8) {
        for (a, b) in LIMBS {
            self.segment(j[a], j[b], 1.0, style.color, id);
        }
        let neck = [(j[5][0] + j[6][0]) / 2.0, (j[5][1] + j[6][1]) / 2.0];
        self.segment(neck, head_center(j), 1.0, style.color, id);
        self.head(head_center(j), head_radius, style.head, style.color, id);
    }
}

/// Draws one figure alone and returns its image, keypoints (all visible)
/// and mask.
fn render_single(joints: &Joints, style: &FigureStyle, head_radius: f64, bg: Rgb) -> (Image, Vec<Keypoint>, Vec<bool>) {
    let mut canvas = Canvas::new(bg);
    canvas.figure(joints, style, head_radius, 0);
    let kps = joints.iter().map(|p| Keypoint { x: p[0], y: p[1], v: 2 }).collect();
    let mask = canvas.owner.iter().map(Option::is_some).collect();
    (canvas.image, kps, mask)
}

fn bounding_box(mask: &[bool]) -> [f64; 4] {
    let (mut x0, mut y0, mut x1, mut y1) = (SCENE_SIZE, SCENE_SIZE, 0, 0);
    for (i, m) in mask.iter().enumerate() {
        if *m {
            let (x, y) = (i % SCENE_SIZE, i / SCENE_SIZE);
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x + 1);
            y1 = y1.max(y + 1);
        }
    }
    let s = SCENE_SIZE as f64;
    [x0 as f64 / s, y0 as f64 / s, x1 as f64 / s, y1 as f64 / s]
}

fn relation_joints(relation: Relation, rng: &mut ChaCha8Rng, scale: f64) -> [Joints; 2] {
    let mut jitter = |amount: f64| rng.random_range(-amount..=amount);
    let dy = jitter(2.0).round();
    let wiggle = jitter(0.15);
    let base_y = 40.0 + dy;
    match relation {
        Relation::Hug => {
            let gap = 7.0 + jitter(1.0).round();
            let a = Pose {
                left_arm: [0.1 + wiggle, -0.05],
                right_arm: [0.25 + wiggle, 0.0],
                ..Pose::neutral()
            };
            let ja = a.joints([32.0 - gap, base_y], scale);
            let jb = mirror(&Pose { left_arm: [0.15, 0.0], right_arm: [0.3 - wiggle, 0.05], ..Pose::neutral() }.joints([32.0 - gap, base_y], scale));
            [ja, jb]
        }
        Relation::Shake => {
            let gap = 13.0 + jitter(1.0).round();
            let a = Pose { left_arm: [0.45 + wiggle, 0.1], ..Pose::neutral() };
            let b = Pose { left_arm: [0.45 - wiggle, 0.1], right_arm: [1.5, 1.6], ..Pose::neutral() };
            [a.joints([32.0 - gap, base_y], scale), mirror(&b.joints([32.0 - gap, base_y], scale))]
        }
        Relation::Ride => {
            // The ridden figure is on all fours with a horizontal torso; the
            // rider sits on its back with legs hanging on either side.
            let mount = Pose {
                torso: std::f64::consts::PI,
                left_arm: [DOWN + 0.1, DOWN],
                right_arm: [DOWN - 0.1, DOWN],
                left_leg: [DOWN + 0.15 + wiggle, DOWN],
                right_leg: [DOWN - 0.15, DOWN],
            };
            let hip_b = [40.0 + jitter(1.0).round(), 46.0 + dy.min(1.0)];
            let jb = mount.joints(hip_b, scale * 0.9);
            let back = [(jb[5][0] + jb[6][0] + jb[11][0] + jb[12][0]) / 4.0, (jb[5][1] + jb[11][1]) / 2.0];
            let rider = Pose {
                left_leg: [0.6 + wiggle, 1.9],
                right_leg: [0.9, 2.2],
                left_arm: [0.9, 0.3],
                right_arm: [1.1, 0.5],
                ..Pose::neutral()
            };
            let ja = rider.joints([back[0], back[1] - 4.0], scale * 0.8);
            [ja, jb]
        }
        Relation::BackToBack => {
            let gap = 5.0 + jitter(1.0).round().abs();
            // Facing left: arms folded back towards the body.
            let a = Pose { left_arm: [2.2 + wiggle, 0.9], right_arm: [2.0, 0.8], ..Pose::neutral() };
            let ja = a.joints([32.0 - gap, base_y], scale);
            [ja, mirror(&ja)]
        }
    }
}

/// Renders a two-figure scene for `relation` and the matching triplet
/// (target plus one neutral-pose prompt image per figure).
pub fn synthesize_scene(relation: Relation, seed: u64) -> (SyntheticScene, Triplet) {
    synthesize_scene_with(relation, seed, None)
}

/// Like [`synthesize_scene`] with optional fixed colour names for the two
/// figures.
pub fn synthesize_scene_with(relation: Relation, seed: u64, colors: Option<[&str; 2]>) -> (SyntheticScene, Triplet) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5ce4e);
    let pick = |name: Option<&str>, rng: &mut ChaCha8Rng, avoid: Option<usize>| -> usize {
        if let Some(i) = name.and_then(|n| PALETTE.iter().position(|(p, _)| *p == n)) {
            return i;
        }
        loop {
            let i = rng.random_range(0..PALETTE.len());
            if Some(i) != avoid {
                return i;
            }
        }
    };
    let ia = pick(colors.map(|c| c[0]), &mut rng, None);
    let ib = pick(colors.map(|c| c[1]), &mut rng, Some(ia));
    let head = |rng: &mut ChaCha8Rng| if rng.random_bool(0.5) { HeadShape::Round } else { HeadShape::Square };
    let styles = [
        FigureStyle { color_name: PALETTE[ia].0.into(), color: PALETTE[ia].1, head: head(&mut rng) },
        FigureStyle { color_name: PALETTE[ib].0.into(), color: PALETTE[ib].1, head: head(&mut rng) },
    ];
    let g = rng.random_range(0.88..0.98);
    let bg = [g, g, rng.random_range(0.85..0.98)];
    let scale: f64 = rng.random_range(27.0..31.0);
    let head_radius = (0.09 * scale).max(2.5);
    let joints = relation_joints(relation, &mut rng, scale);

    let mut canvas = Canvas::new(bg);
    for (id, j) in joints.iter().enumerate() {
        canvas.figure(j, &styles[id], head_radius, id as u8);
    }
    let visibility: [Vec<u8>; 2] = std::array::from_fn(|id| {
        joints[id]
            .iter()
            .map(|p| {
                let owner = canvas.owner[p[1] as usize * SCENE_SIZE + p[0] as usize];
                if owner == Some(id as u8) { 2 } else { 1 }
            })
            .collect()
    });
    let masks: Vec<Vec<bool>> = (0..2)
        .map(|id| {
            let mut single = Canvas::new(bg);
            single.figure(&joints[id], &styles[id], head_radius, 0);
            single.owner.iter().zip(&canvas.owner).map(|(s, o)| s.is_some() && *o == Some(id as u8)).collect()
        })
        .collect();

    let neutral = Pose::neutral().joints([32.0, 40.0], scale);
    let singles: Vec<_> = (0..2).map(|id| render_single(&neutral, &styles[id], head_radius, bg)).collect();
    let classes: Vec<String> = styles.iter().map(FigureStyle::class_noun).collect();
    let text = relation.prompt(&classes[0], &classes[1]);
    let keypoints_x = (0..2)
        .map(|id| joints[id].iter().zip(&visibility[id]).map(|(p, v)| Keypoint { x: p[0], y: p[1], v: *v }).collect())
        .collect();
    let boxes = (0..2)
        .map(|id| {
            let mut single = Canvas::new(bg);
            single.figure(&joints[id], &styles[id], head_radius, 0);
            bounding_box(&single.owner.iter().map(Option::is_some).collect::<Vec<_>>())
        })
        .collect();
    let mut captions = vec![text.clone()];
    captions.extend(styles.iter().map(|s| format!("a photo of a {} standing", s.class_noun())));
    let triplet = Triplet {
        target: canvas.image.clone(),
        prompts: singles.iter().map(|s| s.0.clone()).collect(),
        text,
        classes,
        keypoints_x,
        keypoints_ci: singles.iter().map(|s| s.1.clone()).collect(),
        boxes,
        captions,
        masks: Some(
            masks.iter().map(|m| RleMask::encode(SCENE_SIZE, SCENE_SIZE, m).expect("mask size")).collect(),
        ),
        relation: Some(relation.label().to_string()),
    };
    let scene = SyntheticScene {
        relation,
        styles,
        joints: joints.map(|j| j.to_vec()),
        visibility,
        image: canvas.image,
        owner: canvas.owner,
        head_radius,
    };
    (scene, triplet)
}

/// Checks that every visible keypoint lies on a pixel of its own figure and
/// every occluded one on a pixel of the other figure, within `tol` pixels.
pub fn render_consistent(scene: &SyntheticScene, tol: usize) -> bool {
    let owner_near = |x: usize, y: usize, id: u8| {
        let t = tol as i64;
        (-t..=t).any(|dy| {
            (-t..=t).any(|dx| {
                let (px, py) = (x as i64 + dx, y as i64 + dy);
                let n = SCENE_SIZE as i64;
                (0..n).contains(&px)
                    && (0..n).contains(&py)
                    && scene.owner[py as usize * SCENE_SIZE + px as usize] == Some(id)
            })
        })
    };
    (0..2).all(|id| {
        scene.joints[id].iter().zip(&scene.visibility[id]).all(|(p, v)| {
            let (x, y) = (p[0] as usize, p[1] as usize);
            match v {
                2 => owner_near(x, y, id as u8),
                _ => owner_near(x, y, 1 - id as u8),
            }
        })
    })
}

/// The packaged tuning set: `per_relation` synthetic triplets for each of
/// the four relations.
pub fn packaged_relation_set(per_relation: usize, seed: u64) -> Vec<Triplet> {
    let mut out = Vec::new();
    for (r, relation) in Relation::ALL.into_iter().enumerate() {
        for i in 0..per_relation {
            out.push(synthesize_scene(relation, seed.wrapping_mul(1000) + (r * 100 + i) as u64).1);
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Generative clients

/// Session-oriented image generator: a relation prompt opens a session and
/// follow-ups in the same session keep subject identity.
pub trait GenerativeClient: Send {
    fn name(&self) -> &str;

    fn open_session(&mut self, prompt: &str) -> Result<Image>;

    fn follow_up(&mut self, prompt: &str) -> Result<Image>;

    /// Exact annotations of the current session, when the client knows them.
    fn ground_truth(&self) -> Option<AnnotationSet> {
        None
    }
}

/// The identity carry-over phrase for one subject.
pub fn same_identity_prompt(class_noun: &str) -> String {
    format!("The photo of the same {class_noun}.")
}

/// Offline client backed by [`synthesize_scene`]. Colour names in the
/// relation prompt select the figure colours; follow-ups return the named
/// figure (or the next one) in a neutral pose.
#[derive(Debug)]
pub struct MockClient {
    seed: u64,
    sessions: u64,
    current: Option<(SyntheticScene, Triplet)>,
    next_follow_up: usize,
    fail_first: u32,
}

impl MockClient {
    pub fn new(seed: u64) -> Self {
        Self { seed, sessions: 0, current: None, next_follow_up: 0, fail_first: 0 }
    }

    /// Makes the next `n` calls fail, for exercising retries.
    pub fn failing_first(mut self, n: u32) -> Self {
        self.fail_first = n;
        self
    }

    /// Ground-truth annotations for the current session's images.
    pub fn annotations(&self) -> Option<AnnotationSet> {
        self.current.as_ref().map(|(_, t)| AnnotationSet::from_triplet(t))
    }

    fn maybe_fail(&mut self) -> Result<()> {
        if self.fail_first > 0 {
            self.fail_first -= 1;
            return Err(Error::Client { attempts: 1, reason: "mock transient failure".into() });
        }
        Ok(())
    }
}

fn colors_in(text: &str) -> Vec<&'static str> {
    let lower = text.to_ascii_lowercase();
    let mut found: Vec<(usize, &'static str)> =
        PALETTE.iter().filter_map(|(name, _)| lower.find(name).map(|i| (i, *name))).collect();
    found.sort();
    found.into_iter().map(|(_, n)| n).collect()
}

fn prompt_seed(seed: u64, session: u64, prompt: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(session.to_le_bytes());
    h.update(prompt.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

impl GenerativeClient for MockClient {
    fn name(&self) -> &str {
        "mock"
    }

    fn open_session(&mut self, prompt: &str) -> Result<Image> {
        self.maybe_fail()?;
        let relation = Relation::detect(prompt)
            .ok_or_else(|| Error::Client { attempts: 1, reason: format!("mock cannot draw {prompt:?}") })?;
        let colors = colors_in(prompt);
        let fixed = (colors.len() >= 2 && colors[0] != colors[1]).then(|| [colors[0], colors[1]]);
        let seed = prompt_seed(self.seed, self.sessions, prompt);
        self.sessions += 1;
        let (scene, mut triplet) = synthesize_scene_with(relation, seed, fixed);
        triplet.text = prompt.to_string();
        triplet.captions[0] = prompt.to_string();
        let img = scene.image.clone();
        self.current = Some((scene, triplet));
        self.next_follow_up = 0;
        Ok(img)
    }

    fn follow_up(&mut self, prompt: &str) -> Result<Image> {
        self.maybe_fail()?;
        let (scene, triplet) = self
            .current
            .as_ref()
            .ok_or_else(|| Error::Client { attempts: 1, reason: "follow-up without an open session".into() })?;
        let named = colors_in(prompt).first().and_then(|c| scene.styles.iter().position(|s| s.color_name == *c));
        let idx = named.unwrap_or(self.next_follow_up.min(1));
        self.next_follow_up += 1;
        Ok(triplet.prompts[idx].clone())
    }

    fn ground_truth(&self) -> Option<AnnotationSet> {
        self.annotations()
    }
}

/// Client that shells out to an external command. The command receives a
/// JSON request `{"session", "prompt", "follow_up"}` on stdin and prints the
/// path of the generated PNG. Credentials travel through the environment
/// (see [`CommandClient::KEY_ENV`]); the child inherits it.
#[derive(Debug)]
pub struct CommandClient {
    program: String,
    args: Vec<String>,
    session: u64,
}

impl CommandClient {
    pub const COMMAND_ENV: &'static str = "RELGEN_CLIENT_CMD";
    pub const KEY_ENV: &'static str = "RELGEN_CLIENT_KEY";

    pub fn new(command_line: &str) -> Result<Self> {
        let mut parts = command_line.split_whitespace().map(str::to_string);
        let program = parts.next().ok_or_else(|| Error::Config("empty client command".into()))?;
        Ok(Self { program, args: parts.collect(), session: 0 })
    }

    pub fn from_env() -> Result<Self> {
        let cmd = std::env::var(Self::COMMAND_ENV)
            .map_err(|_| Error::Config(format!("{} is not set", Self::COMMAND_ENV)))?;
        Self::new(&cmd)
    }

    fn call(&self, prompt: &str, follow_up: bool) -> Result<Image> {
        let fail = |reason: String| Error::Client { attempts: 1, reason };
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| fail(format!("spawn {}: {e}", self.program)))?;
        let req = serde_json::json!({ "session": self.session, "prompt": prompt, "follow_up": follow_up });
        child
            .stdin
            .take()
            .expect("piped stdin")
            .write_all(req.to_string().as_bytes())
            .map_err(|e| fail(format!("write request: {e}")))?;
        let out = child.wait_with_output().map_err(|e| fail(format!("wait: {e}")))?;
        if !out.status.success() {
            return Err(fail(format!("exit {}: {}", out.status, String::from_utf8_lossy(&out.stderr).trim())));
        }
        let path = String::from_utf8_lossy(&out.stdout).trim().to_string();
        Image::load(&path).map_err(|e| fail(format!("load {path}: {e}")))
    }
}

impl GenerativeClient for CommandClient {
    fn name(&self) -> &str {
        "external"
    }

    fn open_session(&mut self, prompt: &str) -> Result<Image> {
        self.session += 1;
        self.call(prompt, false)
    }

    fn follow_up(&mut self, prompt: &str) -> Result<Image> {
        self.call(prompt, true)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { attempts: 3, base_delay: Duration::from_millis(200) }
    }
}

impl RetryPolicy {
    /// Runs `f` up to `attempts` times, doubling the delay between tries.
    pub fn run<T>(&self, mut f: impl FnMut() -> Result<T>) -> Result<T> {
        let mut delay = self.base_delay;
        let mut last = String::new();
        for attempt in 1..=self.attempts.max(1) {
            match f() {
                Ok(v) => return Ok(v),
                Err(e) => {
                    log::warn!("client attempt {attempt} failed: {e}");
                    last = e.to_string();
                    if attempt < self.attempts {
                        std::thread::sleep(delay);
                        delay *= 2;
                    }
                }
            }
        }
        Err(Error::Client { attempts: self.attempts.max(1) as usize, reason: last })
    }
}

/// Images generated for one triplet, awaiting annotation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StagedTriplet {
    pub target: Image,
    pub prompts: Vec<Image>,
    pub text: String,
    pub classes: Vec<String>,
    #[serde(default)]
    pub relation: Option<String>,
}

impl StagedTriplet {
    pub fn images(&self) -> Vec<&Image> {
        std::iter::once(&self.target).chain(&self.prompts).collect()
    }
}

/// One target from the relation prompt and one follow-up per subject.
pub fn build_triplet(
    client: &mut dyn GenerativeClient,
    relation_prompt: &str,
    classes: &[String],
    retry: &RetryPolicy,
) -> Result<StagedTriplet> {
    if classes.is_empty() || classes.len() > 2 {
        return Err(Error::invalid(format!("{} subjects; expected 1 or 2", classes.len())));
    }
    let target = retry.run(|| client.open_session(relation_prompt))?;
    let prompts = classes
        .iter()
        .map(|c| retry.run(|| client.follow_up(&same_identity_prompt(c))))
        .collect::<Result<Vec<_>>>()?;
    Ok(StagedTriplet {
        target,
        prompts,
        text: relation_prompt.to_string(),
        classes: classes.to_vec(),
        relation: Relation::detect(relation_prompt).map(|r| r.label().to_string()),
    })
}

/// Annotations for the images of a staged triplet, indexed target first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationSet {
    /// Per image, per object, 17 keypoints. Prompt images hold one object.
    pub keypoints: Vec<Vec<Vec<Keypoint>>>,
    /// Per image caption.
    pub captions: Vec<String>,
    /// Per-object masks of the target image.
    #[serde(default)]
    pub masks: Option<Vec<RleMask>>,
}

impl AnnotationSet {
    pub fn from_triplet(t: &Triplet) -> Self {
        let mut keypoints = vec![t.keypoints_x.clone()];
        keypoints.extend(t.keypoints_ci.iter().map(|k| vec![k.clone()]));
        Self { keypoints, captions: t.captions.clone(), masks: t.masks.clone() }
    }

    /// Writes `{i}.keypoints.json`, `{i}.caption.txt` and, for the target,
    /// `0.masks.json`.
    pub fn save_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (i, kps) in self.keypoints.iter().enumerate() {
            let p = dir.join(format!("{i}.keypoints.json"));
            std::fs::write(&p, serde_json::to_string(kps).expect("serializable")).map_err(|e| Error::io(&p, e))?;
        }
        for (i, c) in self.captions.iter().enumerate() {
            let p = dir.join(format!("{i}.caption.txt"));
            std::fs::write(&p, c).map_err(|e| Error::io(&p, e))?;
        }
        if let Some(m) = &self.masks {
            let p = dir.join("0.masks.json");
            std::fs::write(&p, serde_json::to_string(m).expect("serializable")).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }

    /// Reads the files written by [`AnnotationSet::save_dir`] for
    /// `num_images` images; masks are optional.
    pub fn load_dir(dir: impl AsRef<Path>, num_images: usize) -> Result<Self> {
        let dir = dir.as_ref();
        let read = |p: PathBuf| std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e));
        let mut keypoints = Vec::new();
        let mut captions = Vec::new();
        for i in 0..num_images {
            let p = dir.join(format!("{i}.keypoints.json"));
            keypoints.push(serde_json::from_str(&read(p.clone())?).map_err(|e| Error::json(&p, e))?);
            captions.push(read(dir.join(format!("{i}.caption.txt")))?.trim().to_string());
        }
        let mp = dir.join("0.masks.json");
        let masks = if mp.exists() {
            Some(serde_json::from_str(&read(mp.clone())?).map_err(|e| Error::json(&mp, e))?)
        } else {
            None
        };
        Ok(Self { keypoints, captions, masks })
    }
}

/// Attaches annotations to a staged triplet and validates the result.
/// Boxes come from the target keypoints when no masks are given.
pub fn ingest_annotations(staged: &StagedTriplet, ann: &AnnotationSet) -> Result<Triplet> {
    let n = staged.prompts.len();
    if ann.keypoints.len() != n + 1 || ann.captions.len() != n + 1 {
        return Err(Error::invalid(format!(
            "annotations cover {} images, triplet has {}",
            ann.keypoints.len(),
            n + 1
        )));
    }
    let target_kps = &ann.keypoints[0];
    if target_kps.len() != n {
        return Err(Error::invalid(format!("target annotated with {} objects, expected {n}", target_kps.len())));
    }
    let (w, h) = (staged.target.width(), staged.target.height());
    for (k, kps) in target_kps.iter().enumerate() {
        validate_keypoints(kps, k, w, h)?;
    }
    let mut keypoints_ci = Vec::with_capacity(n);
    for k in 0..n {
        let objs = &ann.keypoints[k + 1];
        if objs.len() != 1 {
            return Err(Error::Keypoints { object: k, reason: format!("prompt image has {} objects", objs.len()) });
        }
        let p = &staged.prompts[k];
        validate_keypoints(&objs[0], k, p.width(), p.height())?;
        keypoints_ci.push(objs[0].clone());
    }
    let boxes = match &ann.masks {
        Some(masks) => masks
            .iter()
            .map(|m| {
                let bits = m.decode()?;
                if bits.len() != w * h {
                    return Err(Error::invalid("mask size differs from target image"));
                }
                Ok(mask_box(&bits, w, h))
            })
            .collect::<Result<Vec<_>>>()?,
        None => target_kps.iter().map(|k| keypoint_box(k, w, h)).collect(),
    };
    let t = Triplet {
        target: staged.target.clone(),
        prompts: staged.prompts.clone(),
        text: staged.text.clone(),
        classes: staged.classes.clone(),
        keypoints_x: target_kps.clone(),
        keypoints_ci,
        boxes,
        captions: ann.captions.clone(),
        masks: ann.masks.clone(),
        relation: staged.relation.clone(),
    };
    t.validate()?;
    Ok(t)
}

fn mask_box(bits: &[bool], w: usize, h: usize) -> [f64; 4] {
    let (mut x0, mut y0, mut x1, mut y1) = (w, h, 0, 0);
    for (i, b) in bits.iter().enumerate() {
        if *b {
            let (x, y) = (i % w, i / w);
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x + 1);
            y1 = y1.max(y + 1);
        }
    }
    if x1 <= x0 || y1 <= y0 {
        return [0.0, 0.0, 1.0, 1.0];
    }
    [x0 as f64 / w as f64, y0 as f64 / h as f64, x1 as f64 / w as f64, y1 as f64 / h as f64]
}

fn keypoint_box(kps: &[Keypoint], w: usize, h: usize) -> [f64; 4] {
    let labeled: Vec<_> = kps.iter().filter(|k| k.v > 0).collect();
    if labeled.is_empty() {
        return [0.0, 0.0, 1.0, 1.0];
    }
    let fold = |f: fn(f64, f64) -> f64, init: f64, get: fn(&&Keypoint) -> f64| labeled.iter().map(get).fold(init, f);
    let x0 = fold(f64::min, f64::MAX, |k| k.x);
    let y0 = fold(f64::min, f64::MAX, |k| k.y);
    let x1 = fold(f64::max, f64::MIN, |k| k.x) + 1.0;
    let y1 = fold(f64::max, f64::MIN, |k| k.y) + 1.0;
    [x0 / w as f64, y0 / h as f64, (x1 / w as f64).min(1.0), (y1 / h as f64).min(1.0)]
}

/// Entry of a `data build --relations` file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RelationSpec {
    pub prompt: String,
    pub classes: Vec<String>,
    #[serde(default = "default_count")]
    pub count: usize,
}

fn default_count() -> usize {
    5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RelationsFile {
    pub relations: Vec<RelationSpec>,
}

impl RelationsFile {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }

    /// One two-figure prompt per supported relation.
    pub fn packaged(count: usize) -> Self {
        let relations = Relation::ALL
            .into_iter()
            .enumerate()
            .map(|(i, r)| {
                let a = PALETTE[i % PALETTE.len()].0;
                let b = PALETTE[(i + 1) % PALETTE.len()].0;
                let classes = vec![format!("{a} figure"), format!("{b} figure")];
                RelationSpec { prompt: r.prompt(&classes[0], &classes[1]), classes, count }
            })
            .collect();
        Self { relations }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StagedRecord {
    text: String,
    classes: Vec<String>,
    #[serde(default)]
    relation: Option<String>,
}

impl StagedTriplet {
    /// Writes `target.png`, `prompt{k}.png` and `staged.json`.
    pub fn save_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.target.save_png(dir.join("target.png"))?;
        for (k, p) in self.prompts.iter().enumerate() {
            p.save_png(dir.join(format!("prompt{k}.png")))?;
        }
        let rec = StagedRecord { text: self.text.clone(), classes: self.classes.clone(), relation: self.relation.clone() };
        let path = dir.join("staged.json");
        std::fs::write(&path, serde_json::to_string_pretty(&rec).expect("serializable")).map_err(|e| Error::io(&path, e))
    }

    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join("staged.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let rec: StagedRecord = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
        let prompts = (0..rec.classes.len())
            .map(|k| Image::load(dir.join(format!("prompt{k}.png"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { target: Image::load(dir.join("target.png"))?, prompts, text: rec.text, classes: rec.classes, relation: rec.relation })
    }
}

/// Outcome of [`build_dataset`].
#[derive(Clone, Debug, Default)]
pub struct BuildSummary {
    /// Annotated triplets written to the manifest.
    pub triplets: usize,
    /// Staged directories still awaiting annotation.
    pub staged: Vec<PathBuf>,
    pub failed: Vec<String>,
}

/// Runs every relation spec through `client`. Each triplet is staged under
/// `out/staged/NNNN/`. When the client knows the ground truth (the mock
/// does) the triplet is ingested and written to the manifest; otherwise it
/// stays staged for external annotation.
pub fn build_dataset(
    relations: &RelationsFile,
    client: &mut dyn GenerativeClient,
    retry: &RetryPolicy,
    out: impl AsRef<Path>,
) -> Result<BuildSummary> {
    let out = out.as_ref();
    let mut summary = BuildSummary::default();
    let mut triplets = Vec::new();
    let mut n = 0;
    for spec in &relations.relations {
        for _ in 0..spec.count {
            let dir = out.join("staged").join(format!("{n:04}"));
            n += 1;
            let staged = match build_triplet(client, &spec.prompt, &spec.classes, retry) {
                Ok(s) => s,
                Err(e) => {
                    log::warn!("triplet for {:?} failed: {e}", spec.prompt);
                    summary.failed.push(format!("{}: {e}", spec.prompt));
                    continue;
                }
            };
            staged.save_dir(&dir)?;
            match client.ground_truth() {
                Some(ann) => {
                    ann.save_dir(dir.join("annotations"))?;
                    triplets.push(ingest_annotations(&staged, &ann)?);
                }
                None => summary.staged.push(dir),
            }
        }
    }
    summary.triplets = triplets.len();
    if !triplets.is_empty() {
        save_manifest(out, &triplets)?;
    }
    Ok(summary)
}

/// Ingests every `staged/NNNN/` directory that has an `annotations/`
/// subdirectory and writes the manifest.
pub fn ingest_staged(out: impl AsRef<Path>) -> Result<usize> {
    let out = out.as_ref();
    let root = out.join("staged");
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(&root)
        .map_err(|e| Error::io(&root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("annotations").is_dir())
        .collect();
    dirs.sort();
    let triplets = dirs
        .iter()
        .map(|d| {
            let staged = StagedTriplet::load_dir(d)?;
            let ann = AnnotationSet::load_dir(d.join("annotations"), staged.prompts.len() + 1)?;
            ingest_annotations(&staged, &ann)
        })
        .collect::<Result<Vec<_>>>()?;
    save_manifest(out, &triplets)?;
    Ok(triplets.len())
}
