//! Procedural crowd scenes with exact occlusion ground truth.
//!
//! People are drawn as 2D capsule skeletons. Every capsule has a surface key
//! `(depth rank, layer, limb)`; smaller keys are nearer the camera. The
//! rendered surface-id buffer stores, per pixel, the nearest key, and the
//! annotation flags are derived from the same coverage predicate, so the two
//! always agree.
//!
//! Corpora are generated against a target CrowdIndex histogram: scene
//! density is steered per bin, and scenes are accepted while their bin still
//! has quota left.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::annotations::{
    BBox, Dataset, ImageRecord, Keypoint, PersonInstance, Pose, PoseSchema, Visibility,
};
use crate::crowd_metrics::{bin_index, crowd_index};
use crate::raster::{GrayImage16, RasterImage};
use crate::rng::{self, StreamRng};

pub const KEYPOINTS: usize = 14;
const LAYERS: u32 = 3;
const SURFACE_STRIDE: u32 = LAYERS * LIMBS.len() as u32;
/// Largest person count whose surface ids fit in 16 bits.
pub const MAX_PERSONS: usize = ((u16::MAX as u32 - 1) / SURFACE_STRIDE) as usize;
const BACKGROUND: [u8; 4] = [40, 40, 40, 255];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LimbSide {
    Torso,
    Left,
    Right,
}

/// Capsule skeleton over the CrowdPose keypoint order.
pub const LIMBS: [(usize, usize, LimbSide); 15] = [
    (12, 13, LimbSide::Torso), // head - neck
    (0, 1, LimbSide::Torso),   // shoulders
    (0, 2, LimbSide::Left),
    (2, 4, LimbSide::Left),
    (1, 3, LimbSide::Right),
    (3, 5, LimbSide::Right),
    (0, 6, LimbSide::Torso),
    (1, 7, LimbSide::Torso),
    (6, 7, LimbSide::Torso), // hips
    (6, 8, LimbSide::Left),
    (8, 10, LimbSide::Left),
    (7, 9, LimbSide::Right),
    (9, 11, LimbSide::Right),
    (0, 7, LimbSide::Torso),
    (1, 6, LimbSide::Torso),
];

/// Left/right keypoint pairs swapped by a horizontal flip.
const MIRROR_PAIRS: [(usize, usize); 6] = [(0, 1), (2, 3), (4, 5), (6, 7), (8, 9), (10, 11)];

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid generator config: {0}")]
    Config(String),
    #[error("target histogram not reached after {attempts} attempts: achieved {achieved:?}, wanted {target:?}")]
    Targeting {
        attempts: usize,
        achieved: Vec<usize>,
        target: Vec<usize>,
    },
    #[error("unknown keypoint {0:?}")]
    UnknownKeypoint(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseTemplate {
    pub name: String,
    /// Unit-frame coordinates, y pointing down.
    pub keypoints: Vec<[f64; 2]>,
    pub jitter: f64,
}

impl PoseTemplate {
    fn new(name: &str, pts: [[f64; 2]; KEYPOINTS]) -> Self {
        PoseTemplate {
            name: name.into(),
            keypoints: pts.to_vec(),
            jitter: 0.015,
        }
    }

    /// walking, standing, sitting, yoga, pushup, cheering, fighting
    pub fn builtin() -> Vec<PoseTemplate> {
        // order: lsho rsho lelb relb lwri rwri lhip rhip lknee rknee lank rank head neck
        vec![
            PoseTemplate::new(
                "walking",
                [
                    [0.60, 0.19], [0.40, 0.19], [0.66, 0.34], [0.36, 0.35], [0.70, 0.47], [0.32, 0.48],
                    [0.56, 0.52], [0.44, 0.52], [0.62, 0.72], [0.45, 0.73], [0.68, 0.93], [0.36, 0.93],
                    [0.50, 0.06], [0.50, 0.16],
                ],
            ),
            PoseTemplate::new(
                "standing",
                [
                    [0.60, 0.19], [0.40, 0.19], [0.63, 0.35], [0.37, 0.35], [0.64, 0.50], [0.36, 0.50],
                    [0.56, 0.52], [0.44, 0.52], [0.57, 0.73], [0.43, 0.73], [0.57, 0.94], [0.43, 0.94],
                    [0.50, 0.06], [0.50, 0.16],
                ],
            ),
            PoseTemplate::new(
                "sitting",
                [
                    [0.42, 0.23], [0.38, 0.23], [0.46, 0.40], [0.42, 0.40], [0.58, 0.50], [0.55, 0.50],
                    [0.42, 0.58], [0.38, 0.58], [0.70, 0.58], [0.66, 0.60], [0.70, 0.92], [0.66, 0.92],
                    [0.40, 0.10], [0.40, 0.20],
                ],
            ),
            PoseTemplate::new(
                "yoga",
                [
                    [0.58, 0.30], [0.42, 0.30], [0.62, 0.16], [0.38, 0.16], [0.55, 0.02], [0.45, 0.02],
                    [0.55, 0.60], [0.45, 0.60], [0.72, 0.72], [0.45, 0.80], [0.55, 0.78], [0.45, 0.98],
                    [0.50, 0.20], [0.50, 0.28],
                ],
            ),
            PoseTemplate::new(
                "pushup",
                [
                    [0.22, 0.62], [0.20, 0.60], [0.22, 0.75], [0.20, 0.74], [0.22, 0.88], [0.20, 0.87],
                    [0.55, 0.66], [0.53, 0.64], [0.74, 0.72], [0.72, 0.70], [0.92, 0.80], [0.90, 0.78],
                    [0.10, 0.55], [0.18, 0.60],
                ],
            ),
            PoseTemplate::new(
                "cheering",
                [
                    [0.60, 0.28], [0.40, 0.28], [0.70, 0.15], [0.30, 0.15], [0.76, 0.03], [0.24, 0.03],
                    [0.56, 0.58], [0.44, 0.58], [0.57, 0.77], [0.43, 0.77], [0.57, 0.96], [0.43, 0.96],
                    [0.50, 0.16], [0.50, 0.25],
                ],
            ),
            PoseTemplate::new(
                "fighting",
                [
                    [0.60, 0.20], [0.40, 0.20], [0.62, 0.32], [0.36, 0.33], [0.56, 0.20], [0.42, 0.22],
                    [0.57, 0.52], [0.45, 0.52], [0.66, 0.72], [0.36, 0.72], [0.72, 0.94], [0.30, 0.94],
                    [0.50, 0.08], [0.50, 0.17],
                ],
            ),
        ]
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        if self.keypoints.len() != KEYPOINTS {
            return Err(SynthError::Config(format!(
                "template {:?} has {} keypoints, expected {KEYPOINTS}",
                self.name,
                self.keypoints.len()
            )));
        }
        if self
            .keypoints
            .iter()
            .flatten()
            .any(|v| !(0.0..=1.0).contains(v))
        {
            return Err(SynthError::Config(format!(
                "template {:?} leaves the unit square",
                self.name
            )));
        }
        if !(self.jitter >= 0.0 && self.jitter.is_finite()) {
            return Err(SynthError::Config(format!("template {:?} has negative jitter", self.name)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthModel {
    /// Independent uniform depth per person.
    #[default]
    UniformZ,
    /// Lower feet are nearer.
    GroundPlane,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub image_w: u32,
    pub image_h: u32,
    pub person_count_range: [usize; 2],
    /// Person heights in pixels.
    pub scale_range: [f64; 2],
    pub depth_model: DepthModel,
    pub limb_radius_frac: f64,
    /// Density hint for single scenes, read as a value in `[0, 1]`.
    pub target_crowd_index: Option<f64>,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            image_w: 320,
            image_h: 240,
            person_count_range: [1, 10],
            scale_range: [60.0, 140.0],
            depth_model: DepthModel::UniformZ,
            limb_radius_frac: 0.04,
            target_crowd_index: None,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let [nmin, nmax] = self.person_count_range;
        if nmin == 0 || nmin > nmax || nmax > MAX_PERSONS {
            return Err(SynthError::Config(format!(
                "person_count_range must satisfy 1 <= min <= max <= {MAX_PERSONS}, got [{nmin}, {nmax}]"
            )));
        }
        let [smin, smax] = self.scale_range;
        if !(smin > 0.0 && smin <= smax && smax.is_finite()) {
            return Err(SynthError::Config(format!(
                "scale_range must satisfy 0 < min <= max, got [{smin}, {smax}]"
            )));
        }
        if !(self.limb_radius_frac > 0.0 && self.limb_radius_frac <= 0.25) {
            return Err(SynthError::Config(format!(
                "limb_radius_frac {} outside (0, 0.25]",
                self.limb_radius_frac
            )));
        }
        let extent = smax + 2.0 * radius_for(smax, self.limb_radius_frac) + 2.0;
        if extent > self.image_w.min(self.image_h) as f64 {
            return Err(SynthError::Config(format!(
                "persons up to {extent:.1} px do not fit a {}x{} image",
                self.image_w, self.image_h
            )));
        }
        if let Some(t) = self.target_crowd_index {
            if !(0.0..=1.0).contains(&t) {
                return Err(SynthError::Config(format!("target_crowd_index {t} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

fn radius_for(height: f64, frac: f64) -> f64 {
    (frac * height).max(1.0)
}

/// Geometry of one placed person.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonGeometry {
    pub template: String,
    pub keypoints: Vec<[f64; 2]>,
    pub radius: f64,
    /// 0 is nearest.
    pub rank: usize,
    /// Whether left-side limbs face the camera.
    pub left_near: bool,
}

impl PersonGeometry {
    fn layer(&self, side: LimbSide) -> u32 {
        match (side, self.left_near) {
            (LimbSide::Torso, _) => 1,
            (LimbSide::Left, true) | (LimbSide::Right, false) => 0,
            _ => 2,
        }
    }

    /// Surface id of limb `l`; larger means farther.
    pub fn surface_id(&self, limb: usize) -> u32 {
        1 + self.rank as u32 * SURFACE_STRIDE + self.layer(LIMBS[limb].2) * LIMBS.len() as u32 + limb as u32
    }

    /// Nearest surface among the limbs attached to keypoint `k`.
    pub fn keypoint_surface_id(&self, k: usize) -> u32 {
        LIMBS
            .iter()
            .enumerate()
            .filter(|(_, (a, b, _))| *a == k || *b == k)
            .map(|(l, _)| self.surface_id(l))
            .min()
            .expect("every keypoint has a limb")
    }

    pub fn covers(&self, limb: usize, px: f64, py: f64) -> bool {
        let (a, b, _) = LIMBS[limb];
        segment_dist2([px, py], self.keypoints[a], self.keypoints[b]) <= self.radius * self.radius
    }

    pub fn bbox(&self) -> BBox {
        let (mut x0, mut y0, mut x1, mut y1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        for p in &self.keypoints {
            x0 = x0.min(p[0]);
            y0 = y0.min(p[1]);
            x1 = x1.max(p[0]);
            y1 = y1.max(p[1]);
        }
        let r = self.radius;
        BBox::new(x0 - r, y0 - r, x1 - x0 + 2.0 * r, y1 - y0 + 2.0 * r)
    }
}

/// Decodes a surface id into `(rank, layer, limb)`.
pub fn split_surface_id(id: u32) -> Option<(usize, u32, usize)> {
    let v = id.checked_sub(1)?;
    let rank = v / SURFACE_STRIDE;
    let rem = v % SURFACE_STRIDE;
    Some((rank as usize, rem / LIMBS.len() as u32, (rem % LIMBS.len() as u32) as usize))
}

fn segment_dist2(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let ap = [p[0] - a[0], p[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    let t = if len2 > 0.0 {
        ((ap[0] * ab[0] + ap[1] * ab[1]) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let dx = ap[0] - t * ab[0];
    let dy = ap[1] - t * ab[1];
    dx * dx + dy * dy
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneGeometry {
    pub width: u32,
    pub height: u32,
    /// Stored in annotation order; `rank` gives depth.
    pub persons: Vec<PersonGeometry>,
    pub density: f64,
}

impl SceneGeometry {
    /// Nearest surface covering the centre of pixel `(x, y)`.
    pub fn front_surface(&self, x: u32, y: u32) -> Option<u32> {
        let (cx, cy) = (x as f64 + 0.5, y as f64 + 0.5);
        self.persons
            .iter()
            .flat_map(|p| (0..LIMBS.len()).filter(move |&l| p.covers(l, cx, cy)).map(move |l| p.surface_id(l)))
            .min()
    }

    /// Person indices from nearest to farthest.
    pub fn depth_order(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.persons.len()).collect();
        order.sort_by_key(|&i| self.persons[i].rank);
        order
    }

    pub fn visibility(&self) -> Vec<Vec<Visibility>> {
        self.persons
            .iter()
            .map(|p| {
                p.keypoints
                    .iter()
                    .enumerate()
                    .map(|(k, kp)| {
                        let (x, y) = (kp[0].floor(), kp[1].floor());
                        if x < 0.0 || y < 0.0 || x >= self.width as f64 || y >= self.height as f64 {
                            return Visibility::Unlabeled;
                        }
                        match self.front_surface(x as u32, y as u32).and_then(split_surface_id) {
                            Some((rank, _, _)) if rank < p.rank => Visibility::Occluded,
                            _ => {
                                let own = p.keypoint_surface_id(k);
                                match self.front_surface(x as u32, y as u32) {
                                    Some(s) if s < own => Visibility::SelfOccluded,
                                    _ => Visibility::Visible,
                                }
                            }
                        }
                    })
                    .collect()
            })
            .collect()
    }

    pub fn annotate(&self, id: impl Into<String>) -> ImageRecord {
        let mut rec = ImageRecord::new(id, self.width, self.height);
        for (p, flags) in self.persons.iter().zip(self.visibility()) {
            let kps = p
                .keypoints
                .iter()
                .zip(flags)
                .map(|(k, v)| Keypoint::new(k[0], k[1], v))
                .collect();
            rec.persons.push(PersonInstance::new(p.bbox(), Pose::new(kps)));
        }
        rec
    }

    /// Annotation with every keypoint labeled Visible; enough for the CrowdIndex.
    fn annotate_fast(&self) -> ImageRecord {
        let mut rec = ImageRecord::new("", self.width, self.height);
        for p in &self.persons {
            let kps = p
                .keypoints
                .iter()
                .map(|k| Keypoint::new(k[0], k[1], Visibility::Visible))
                .collect();
            rec.persons.push(PersonInstance::new(p.bbox(), Pose::new(kps)));
        }
        rec
    }

    /// Flat-coloured raster and the per-pixel surface-id buffer (0 = background).
    pub fn render(&self) -> RenderedScene {
        let (w, h) = (self.width as usize, self.height as usize);
        let mut zbuf = vec![u32::MAX; w * h];
        for p in &self.persons {
            for l in 0..LIMBS.len() {
                let (a, b, _) = LIMBS[l];
                let (pa, pb) = (p.keypoints[a], p.keypoints[b]);
                let r = p.radius;
                let x0 = (pa[0].min(pb[0]) - r).floor().max(0.0) as usize;
                let y0 = (pa[1].min(pb[1]) - r).floor().max(0.0) as usize;
                let x1 = ((pa[0].max(pb[0]) + r).ceil().max(0.0) as usize).min(w.saturating_sub(1));
                let y1 = ((pa[1].max(pb[1]) + r).ceil().max(0.0) as usize).min(h.saturating_sub(1));
                let sid = p.surface_id(l);
                for y in y0..=y1 {
                    for x in x0..=x1 {
                        if p.covers(l, x as f64 + 0.5, y as f64 + 0.5) && sid < zbuf[y * w + x] {
                            zbuf[y * w + x] = sid;
                        }
                    }
                }
            }
        }
        let by_rank = self.depth_order();
        let mut raster = RasterImage::new(self.width, self.height, BACKGROUND);
        let mut values = vec![0u16; w * h];
        for (i, &z) in zbuf.iter().enumerate() {
            if let Some((rank, _, _)) = split_surface_id(z).filter(|_| z != u32::MAX) {
                values[i] = z as u16;
                raster.set_pixel((i % w) as u32, (i / w) as u32, person_color(by_rank[rank]));
            }
        }
        RenderedScene {
            raster,
            surfaces: GrayImage16 {
                width: self.width,
                height: self.height,
                values,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedScene {
    pub raster: RasterImage,
    pub surfaces: GrayImage16,
}

fn person_color(index: usize) -> [u8; 4] {
    let hue = (index as f64 * 0.618_033_988_749_895).fract() * 6.0;
    let (s, v) = (0.65, 0.92);
    let c = v * s;
    let x = c * (1.0 - (hue % 2.0 - 1.0).abs());
    let (r, g, b) = match hue as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    let q = |u: f64| ((u + m) * 255.0).round() as u8;
    [q(r), q(g), q(b), 255]
}

fn uniform<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// Samples one scene. `density` in `[0, 1]` raises person count and
/// pulls people towards a common cluster centre.
pub fn sample_geometry<R: Rng>(
    rng: &mut R,
    cfg: &SceneConfig,
    templates: &[PoseTemplate],
    density: f64,
) -> SceneGeometry {
    let d = density.clamp(0.0, 1.0);
    let [nmin, nmax] = cfg.person_count_range;
    let [smin, smax] = cfg.scale_range;
    let (iw, ih) = (cfg.image_w as f64, cfg.image_h as f64);
    let base = nmin as f64 + d * (nmax - nmin) as f64;
    let n = (base + uniform(rng, -1.0, 1.0)).round().clamp(nmin as f64, nmax as f64) as usize;
    let mean_h = 0.5 * (smin + smax);
    let spread = [
        (1.0 - d) * iw / 2.0 + d * 0.15 * mean_h,
        (1.0 - d) * ih / 2.0 + d * 0.15 * mean_h,
    ];
    let cluster = [uniform(rng, 0.0, iw), uniform(rng, 0.0, ih)];

    let mut persons = Vec::with_capacity(n);
    let mut depth_keys = Vec::with_capacity(n);
    for _ in 0..n {
        let t = &templates[rng.random_range(0..templates.len())];
        let flip = rng.random::<bool>();
        let left_near = rng.random::<bool>();
        let height = uniform(rng, smin, smax);
        let radius = radius_for(height, cfg.limb_radius_frac);
        let noise = Normal::new(0.0, t.jitter).expect("jitter validated");
        let mut unit: Vec<[f64; 2]> = t
            .keypoints
            .iter()
            .map(|p| {
                [
                    (p[0] + noise.sample(rng)).clamp(0.0, 1.0),
                    (p[1] + noise.sample(rng)).clamp(0.0, 1.0),
                ]
            })
            .collect();
        if flip {
            for p in &mut unit {
                p[0] = 1.0 - p[0];
            }
            for (a, b) in MIRROR_PAIRS {
                unit.swap(a, b);
            }
        }
        let (mut u0, mut v0, mut u1, mut v1) = (1.0f64, 1.0f64, 0.0f64, 0.0f64);
        for p in &unit {
            u0 = u0.min(p[0]);
            v0 = v0.min(p[1]);
            u1 = u1.max(p[0]);
            v1 = v1.max(p[1]);
        }
        let cx = cluster[0] + uniform(rng, -spread[0], spread[0]);
        let cy = cluster[1] + uniform(rng, -spread[1], spread[1]);
        // Keep every capsule inside the image.
        let ox = (cx - height * (u0 + u1) / 2.0).clamp(radius - u0 * height, iw - radius - u1 * height);
        let oy = (cy - height * (v0 + v1) / 2.0).clamp(radius - v0 * height, ih - radius - v1 * height);
        let keypoints = unit.iter().map(|p| [ox + p[0] * height, oy + p[1] * height]).collect();
        let z = match cfg.depth_model {
            DepthModel::UniformZ => rng.random::<f64>(),
            DepthModel::GroundPlane => -(oy + v1 * height),
        };
        depth_keys.push(z);
        persons.push(PersonGeometry {
            template: t.name.clone(),
            keypoints,
            radius,
            rank: 0,
            left_near,
        });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| depth_keys[a].total_cmp(&depth_keys[b]));
    for (rank, &i) in order.iter().enumerate() {
        persons[i].rank = rank;
    }
    SceneGeometry {
        width: cfg.image_w,
        height: cfg.image_h,
        persons,
        density: d,
    }
}

fn check_templates(templates: &[PoseTemplate]) -> Result<(), SynthError> {
    if templates.is_empty() {
        return Err(SynthError::Config("no pose templates".into()));
    }
    templates.iter().try_for_each(PoseTemplate::validate)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub geometry: SceneGeometry,
    pub record: ImageRecord,
    pub rendered: RenderedScene,
}

pub fn generate_scene<R: Rng>(
    rng: &mut R,
    cfg: &SceneConfig,
    templates: &[PoseTemplate],
) -> Result<Scene, SynthError> {
    cfg.validate()?;
    check_templates(templates)?;
    let density = cfg.target_crowd_index.unwrap_or(0.5);
    let geometry = sample_geometry(rng, cfg, templates, density);
    let record = geometry.annotate("scene");
    let rendered = geometry.render();
    Ok(Scene {
        geometry,
        record,
        rendered,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub scenes: usize,
    pub scene: SceneConfig,
    /// Bin weights over `[0, 1]`; summing to 1.
    pub target_histogram: Vec<f64>,
    pub tolerance: f64,
    /// Attempt budget as a multiple of `scenes`.
    pub retry_factor: usize,
    pub batch_size: usize,
}

impl CorpusConfig {
    pub fn uniform(scenes: usize, bins: usize, scene: SceneConfig) -> Self {
        CorpusConfig {
            scenes,
            scene,
            target_histogram: vec![1.0 / bins as f64; bins],
            tolerance: 0.03,
            retry_factor: 50,
            batch_size: 256,
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        self.scene.validate()?;
        let bins = self.target_histogram.len();
        if bins == 0 {
            return Err(SynthError::Config("empty target histogram".into()));
        }
        if self.target_histogram.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(SynthError::Config("negative target weight".into()));
        }
        let sum: f64 = self.target_histogram.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(SynthError::Config(format!("target weights sum to {sum}, not 1")));
        }
        if self.scenes < bins {
            return Err(SynthError::Config(format!(
                "{} scenes cannot cover {bins} bins",
                self.scenes
            )));
        }
        if !(self.tolerance > 0.0) {
            return Err(SynthError::Config("tolerance must be positive".into()));
        }
        if self.batch_size == 0 || self.retry_factor == 0 {
            return Err(SynthError::Config("batch_size and retry_factor must be positive".into()));
        }
        Ok(())
    }
}

/// Per-bin scene counts by largest remainder.
pub fn bin_quotas(weights: &[f64], scenes: usize) -> Vec<usize> {
    let raw: Vec<f64> = weights.iter().map(|w| w * scenes as f64).collect();
    let mut quotas: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let mut rest: Vec<usize> = (0..weights.len()).collect();
    rest.sort_by(|&a, &b| (raw[b] - raw[b].floor()).total_cmp(&(raw[a] - raw[a].floor())).then(a.cmp(&b)));
    let assigned: usize = quotas.iter().sum();
    for &i in rest.iter().take(scenes.saturating_sub(assigned)) {
        quotas[i] += 1;
    }
    quotas
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub dataset: Dataset,
    /// Same order as `dataset.images`.
    pub geometries: Vec<SceneGeometry>,
}

pub fn scene_id(index: usize) -> String {
    format!("scene_{index:05}")
}

/// Step applied to a bin's density knob after a miss.
const KNOB_STEP: f64 = 0.02;

pub fn generate_corpus(cfg: &CorpusConfig, templates: &[PoseTemplate]) -> Result<Corpus, SynthError> {
    cfg.validate()?;
    check_templates(templates)?;
    let bins = cfg.target_histogram.len();
    let quotas = bin_quotas(&cfg.target_histogram, cfg.scenes);
    let mut filled = vec![0usize; bins];
    let mut knobs: Vec<f64> = (0..bins).map(|b| (b as f64 + 0.5) / bins as f64).collect();
    let budget = cfg.retry_factor * cfg.scenes;
    let seed = cfg.scene.seed;

    let mut accepted: Vec<(SceneGeometry, f64)> = Vec::with_capacity(cfg.scenes);
    let mut attempts = 0usize;
    while accepted.len() < cfg.scenes {
        if attempts >= budget {
            return Err(SynthError::Targeting {
                attempts,
                achieved: filled,
                target: quotas,
            });
        }
        let mut open: Vec<usize> = (0..bins).filter(|&b| filled[b] < quotas[b]).collect();
        open.sort_by_key(|&b| (std::cmp::Reverse(quotas[b] - filled[b]), b));
        let batch = cfg.batch_size.min(budget - attempts);
        let plan: Vec<(usize, usize, f64)> = (0..batch)
            .map(|j| {
                let b = open[j % open.len()];
                (attempts + j, b, knobs[b])
            })
            .collect();
        let results: Vec<(usize, SceneGeometry, f64)> = plan
            .par_iter()
            .map(|&(attempt, b, knob)| {
                let mut r: StreamRng = rng::substream_indexed(seed, "scene_attempt", attempt as u64);
                let g = sample_geometry(&mut r, &cfg.scene, templates, knob);
                let c = crowd_index(&g.annotate_fast()).expect("scenes have persons");
                (b, g, c)
            })
            .collect();
        attempts += batch;
        for (wanted, g, c) in results {
            let got = bin_index(c, bins);
            if got < wanted {
                knobs[wanted] = (knobs[wanted] + KNOB_STEP).min(1.0);
            } else if got > wanted {
                knobs[wanted] = (knobs[wanted] - KNOB_STEP).max(0.0);
            }
            if filled[got] < quotas[got] && accepted.len() < cfg.scenes {
                filled[got] += 1;
                accepted.push((g, c));
            }
        }
    }

    let records: Vec<ImageRecord> = accepted
        .par_iter()
        .enumerate()
        .map(|(i, (g, _))| g.annotate(scene_id(i)))
        .collect();
    let mut scene_meta = Vec::with_capacity(records.len());
    for (rec, (g, _)) in records.iter().zip(&accepted) {
        let c = crowd_index(rec).expect("scenes have persons");
        scene_meta.push(json!({
            "id": rec.id,
            "crowd_index": c,
            "density": g.density,
            "depth_order": g.depth_order(),
            "left_near": g.persons.iter().map(|p| p.left_near).collect::<Vec<_>>(),
            "templates": g.persons.iter().map(|p| p.template.as_str()).collect::<Vec<_>>(),
        }));
    }
    let freqs: Vec<f64> = filled.iter().map(|&f| f as f64 / cfg.scenes as f64).collect();
    if let Some(dev) = freqs
        .iter()
        .zip(&cfg.target_histogram)
        .map(|(f, w)| (f - w).abs())
        .find(|d| *d > cfg.tolerance)
    {
        log::warn!("bin deviation {dev} exceeds tolerance {}", cfg.tolerance);
        return Err(SynthError::Targeting {
            attempts,
            achieved: filled,
            target: quotas,
        });
    }

    let mut dataset = Dataset::new(PoseSchema::crowdpose());
    dataset.images = records;
    let mut meta = BTreeMap::new();
    meta.insert("generator".to_string(), json!("synthgen"));
    meta.insert("seed".to_string(), json!(seed));
    meta.insert("attempts".to_string(), json!(attempts));
    meta.insert("histogram".to_string(), json!(filled));
    meta.insert("scenes".to_string(), json!(scene_meta));
    dataset.meta = meta;
    Ok(Corpus {
        dataset,
        geometries: accepted.into_iter().map(|(g, _)| g).collect(),
    })
}

/// `bins x bins` histogram (row = vertical) of one keypoint type's
/// position normalised to its person box.
pub fn keypoint_density_map(dataset: &Dataset, keypoint: &str, bins: usize) -> Result<Vec<Vec<usize>>, SynthError> {
    if bins < 2 {
        return Err(SynthError::Config(format!("need at least 2 bins, got {bins}")));
    }
    let k = dataset
        .schema
        .index_of(keypoint)
        .ok_or_else(|| SynthError::UnknownKeypoint(keypoint.to_string()))?;
    let mut grid = vec![vec![0usize; bins]; bins];
    let cell = |t: f64| ((t * bins as f64).floor().max(0.0) as usize).min(bins - 1);
    for person in dataset.images.iter().flat_map(|im| &im.persons) {
        let Some(kp) = person.pose.keypoints.get(k) else { continue };
        if !kp.vis.is_labeled() {
            continue;
        }
        let b = &person.bbox;
        let u = if b.w > 0.0 { (kp.x - b.x) / b.w } else { 0.5 };
        let v = if b.h > 0.0 { (kp.y - b.y) / b.h } else { 0.5 };
        let (u, v) = (if u.is_nan() { 0.5 } else { u }, if v.is_nan() { 0.5 } else { v });
        grid[cell(v)][cell(u)] += 1;
    }
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_templates_valid() {
        let t = PoseTemplate::builtin();
        assert_eq!(t.len(), 7);
        for x in &t {
            x.validate().unwrap();
        }
        assert!(check_templates(&[]).is_err());
    }

    #[test]
    fn config_rejects_oversized_people() {
        let cfg = SceneConfig {
            scale_range: [60.0, 400.0],
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(SynthError::Config(_))));
        assert!(SceneConfig::default().validate().is_ok());
    }

    #[test]
    fn surface_ids_roundtrip() {
        let p = PersonGeometry {
            template: "t".into(),
            keypoints: vec![[0.0, 0.0]; KEYPOINTS],
            radius: 1.0,
            rank: 7,
            left_near: false,
        };
        for l in 0..LIMBS.len() {
            let (rank, layer, limb) = split_surface_id(p.surface_id(l)).unwrap();
            assert_eq!((rank, limb), (7, l));
            assert_eq!(layer, p.layer(LIMBS[l].2));
        }
        assert_eq!(split_surface_id(0), None);
        assert!(MAX_PERSONS >= 1000);
    }

    #[test]
    fn single_person_never_occluded() {
        let cfg = SceneConfig {
            person_count_range: [1, 1],
            ..Default::default()
        };
        for s in 0..50 {
            let mut r = rng::seeded(s);
            let scene = generate_scene(&mut r, &cfg, &PoseTemplate::builtin()).unwrap();
            let p = &scene.record.persons[0];
            assert!(p.pose.keypoints.iter().all(|k| k.vis != Visibility::Occluded));
            assert!(p.pose.keypoints.iter().all(|k| k.vis.is_labeled()));
        }
    }

    #[test]
    fn nearer_person_occludes_hip() {
        let stand = &PoseTemplate::builtin()[1];
        let place = |dx: f64, rank: usize| PersonGeometry {
            template: "standing".into(),
            keypoints: stand.keypoints.iter().map(|p| [dx + 100.0 * p[0], 10.0 + 100.0 * p[1]]).collect(),
            radius: 4.0,
            rank,
            left_near: true,
        };
        let g = SceneGeometry {
            width: 200,
            height: 200,
            persons: vec![place(0.0, 1), place(0.0, 0)],
            density: 1.0,
        };
        let vis = g.visibility();
        assert_eq!(vis[0][6], Visibility::Occluded);
        assert!(vis[1].iter().all(|v| *v != Visibility::Occluded));
    }

    #[test]
    fn annotation_matches_surface_buffer() {
        let cfg = SceneConfig::default();
        for s in 0..20 {
            let mut r = rng::seeded(s);
            let g = sample_geometry(&mut r, &cfg, &PoseTemplate::builtin(), 0.8);
            let rec = g.annotate("x");
            let buf = g.render().surfaces;
            for (p, inst) in g.persons.iter().zip(&rec.persons) {
                for (k, kp) in inst.pose.keypoints.iter().enumerate() {
                    let s = buf.get(kp.x.floor() as u32, kp.y.floor() as u32) as u32;
                    let (rank, _, _) = split_surface_id(s).unwrap();
                    let expect = if rank < p.rank {
                        Visibility::Occluded
                    } else if s < p.keypoint_surface_id(k) {
                        Visibility::SelfOccluded
                    } else {
                        Visibility::Visible
                    };
                    assert_eq!(kp.vis, expect);
                }
                // keypoints inside own box
                let b = inst.bbox;
                assert!(inst.pose.keypoints.iter().all(|k| b.contains(k.x, k.y)));
                let eps = 1e-9;
                assert!(b.x >= -eps && b.y >= -eps && b.x + b.w <= 320.0 + eps && b.y + b.h <= 240.0 + eps);
            }
        }
    }

    #[test]
    fn quotas_sum() {
        assert_eq!(bin_quotas(&[0.1; 10], 2000), vec![200; 10]);
        let q = bin_quotas(&[1.0 / 3.0; 3], 10);
        assert_eq!(q.iter().sum::<usize>(), 10);
        assert_eq!(q, vec![4, 3, 3]);
    }

    #[test]
    fn easy_target_and_determinism() {
        let scene = SceneConfig {
            person_count_range: [1, 3],
            seed: 9,
            ..Default::default()
        };
        let mut cfg = CorpusConfig::uniform(30, 10, scene);
        cfg.target_histogram = vec![0.0; 10];
        cfg.target_histogram[0] = 1.0;
        let a = generate_corpus(&cfg, &PoseTemplate::builtin()).unwrap();
        let b = generate_corpus(&cfg, &PoseTemplate::builtin()).unwrap();
        assert_eq!(a.dataset.to_native_json(), b.dataset.to_native_json());
        for im in &a.dataset.images {
            assert!(crowd_index(im).unwrap() < 0.1);
        }
    }

    #[test]
    fn small_uniform_corpus() {
        let cfg = CorpusConfig::uniform(100, 10, SceneConfig::default());
        let c = generate_corpus(&cfg, &PoseTemplate::builtin()).unwrap();
        let mut counts = [0; 10];
        for im in &c.dataset.images {
            counts[bin_index(crowd_index(im).unwrap(), 10)] += 1;
        }
        assert_eq!(counts, [10; 10]);
    }

    #[test]
    fn unreachable_target_reports_histogram() {
        let scene = SceneConfig {
            person_count_range: [1, 1],
            ..Default::default()
        };
        let mut cfg = CorpusConfig::uniform(10, 2, scene);
        cfg.retry_factor = 2;
        match generate_corpus(&cfg, &PoseTemplate::builtin()) {
            Err(SynthError::Targeting { achieved, target, .. }) => {
                assert_eq!(achieved, vec![5, 0]);
                assert_eq!(target, vec![5, 5]);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn density_map_conserves_counts() {
        let cfg = CorpusConfig::uniform(20, 2, SceneConfig::default());
        let c = generate_corpus(&cfg, &PoseTemplate::builtin()).unwrap();
        let grid = keypoint_density_map(&c.dataset, "head", 8).unwrap();
        let total: usize = grid.iter().flatten().sum();
        assert_eq!(total, c.dataset.person_count());
        assert!(keypoint_density_map(&c.dataset, "tail", 8).is_err());
        assert!(keypoint_density_map(&c.dataset, "head", 1).is_err());
    }
}
