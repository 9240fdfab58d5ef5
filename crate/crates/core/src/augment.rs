//! Occlusion augmentation by pasting cutouts onto people.
//!
//! Three cutout sources are supported: arbitrary objects, body parts cropped
//! from person cutouts, and full person cutouts kept away from the centre of
//! the target box. They can be combined so that both apply (`*And*`) or so
//! that exactly one is drawn per invocation (`*Or*`).
//!
//! After compositing, every keypoint of every person whose pixel
//! (`floor(x), floor(y)`) was overwritten by an opaque cutout pixel becomes
//! `Occluded`. Coordinates are never touched.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotations::{BBox, ImageRecord, Keypoint, Visibility};
use crate::masks::{composite_region, Bitmask, Cutout, CutoutKind, MaskError, PixelRect};
use crate::raster::{RasterError, RasterImage};
use crate::rng;

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("inventory has no {0} cutouts")]
    EmptyInventory(&'static str),
    #[error("invalid augmentation config: {0}")]
    Config(String),
    #[error("target person {index} out of range ({count} persons)")]
    TargetIndex { index: usize, count: usize },
    #[error("image is {image_w}x{image_h} but record {id:?} says {record_w}x{record_h}")]
    ImageSize {
        id: String,
        image_w: u32,
        image_h: u32,
        record_w: u32,
        record_h: u32,
    },
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error("{path}: {message}")]
    Inventory { path: PathBuf, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentMethod {
    Objects,
    BodyParts,
    FullBody,
    PartsAndObjects,
    FullAndObjects,
    PartsOrObjects,
    FullOrObjects,
    None,
}

impl AugmentMethod {
    pub const ALL: [AugmentMethod; 8] = [
        AugmentMethod::Objects,
        AugmentMethod::BodyParts,
        AugmentMethod::FullBody,
        AugmentMethod::PartsAndObjects,
        AugmentMethod::FullAndObjects,
        AugmentMethod::PartsOrObjects,
        AugmentMethod::FullOrObjects,
        AugmentMethod::None,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AugmentMethod::Objects => "objects",
            AugmentMethod::BodyParts => "body_parts",
            AugmentMethod::FullBody => "full_body",
            AugmentMethod::PartsAndObjects => "parts_and_objects",
            AugmentMethod::FullAndObjects => "full_and_objects",
            AugmentMethod::PartsOrObjects => "parts_or_objects",
            AugmentMethod::FullOrObjects => "full_or_objects",
            AugmentMethod::None => "none",
        }
    }

    /// The person-derived sub-method, if any.
    fn person_kind(self) -> Option<CutoutKind> {
        match self {
            AugmentMethod::BodyParts | AugmentMethod::PartsAndObjects | AugmentMethod::PartsOrObjects => {
                Some(CutoutKind::BodyPart)
            }
            AugmentMethod::FullBody | AugmentMethod::FullAndObjects | AugmentMethod::FullOrObjects => {
                Some(CutoutKind::FullBody)
            }
            _ => None,
        }
    }
}

impl fmt::Display for AugmentMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AugmentMethod {
    type Err = AugmentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.to_ascii_lowercase().replace('-', "_");
        AugmentMethod::ALL
            .into_iter()
            .find(|m| m.name() == norm)
            .ok_or_else(|| AugmentError::Config(format!("unknown method {s:?}")))
    }
}

/// How the size fraction relates to the person box.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SizeMode {
    /// Cutout area = fraction x box area.
    #[default]
    Area,
    /// Cutout area = fraction^2 x box area.
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub method: AugmentMethod,
    pub area_frac_min: f64,
    pub area_frac_max: f64,
    /// Probability that an `*Or*` method picks the object cutout.
    pub or_probability: f64,
    pub part_frac_min: f64,
    pub part_frac_max: f64,
    pub size_mode: SizeMode,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            method: AugmentMethod::Objects,
            area_frac_min: 0.08,
            area_frac_max: 0.70,
            or_probability: 0.5,
            part_frac_min: 0.2,
            part_frac_max: 0.6,
            size_mode: SizeMode::Area,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn new(method: AugmentMethod, seed: u64) -> Self {
        AugmentConfig {
            method,
            seed,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), AugmentError> {
        let frac_ok = |lo: f64, hi: f64| lo > 0.0 && lo <= hi && hi <= 1.0;
        if !frac_ok(self.area_frac_min, self.area_frac_max) {
            return Err(AugmentError::Config(format!(
                "need 0 < area_frac_min <= area_frac_max <= 1, got [{}, {}]",
                self.area_frac_min, self.area_frac_max
            )));
        }
        if !frac_ok(self.part_frac_min, self.part_frac_max) {
            return Err(AugmentError::Config(format!(
                "need 0 < part_frac_min <= part_frac_max <= 1, got [{}, {}]",
                self.part_frac_min, self.part_frac_max
            )));
        }
        if !(0.0..=1.0).contains(&self.or_probability) {
            return Err(AugmentError::Config(format!(
                "or_probability {} outside [0, 1]",
                self.or_probability
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CutoutInventory {
    pub objects: Vec<Cutout>,
    pub persons: Vec<Cutout>,
}

#[derive(Serialize, Deserialize)]
struct KeypointSidecar {
    keypoints: Vec<Keypoint>,
}

impl CutoutInventory {
    /// Loads `objects/` and `persons/` netpbm files (sorted by name) from `dir`.
    ///
    /// Person cutouts may carry a `<stem>.json` sidecar with cutout-local
    /// keypoints. Alpha is binarised: any non-zero value becomes 255.
    pub fn load_dir(dir: &Path) -> Result<Self, AugmentError> {
        if !dir.is_dir() {
            return Err(AugmentError::Inventory {
                path: dir.to_path_buf(),
                message: "inventory directory not found".into(),
            });
        }
        Ok(CutoutInventory {
            objects: load_kind(&dir.join("objects"), CutoutKind::Object)?,
            persons: load_kind(&dir.join("persons"), CutoutKind::FullBody)?,
        })
    }

    pub fn save_dir(&self, dir: &Path) -> Result<(), AugmentError> {
        let io = |path: &Path, e: std::io::Error| AugmentError::Inventory {
            path: path.to_path_buf(),
            message: e.to_string(),
        };
        for (sub, items) in [("objects", &self.objects), ("persons", &self.persons)] {
            let d = dir.join(sub);
            fs::create_dir_all(&d).map_err(|e| io(&d, e))?;
            for (i, c) in items.iter().enumerate() {
                let p = d.join(format!("{i:05}.pam"));
                fs::write(&p, c.raster.to_pam_bytes()).map_err(|e| io(&p, e))?;
                if let Some(kps) = &c.keypoints {
                    let p = d.join(format!("{i:05}.json"));
                    let body = serde_json::to_vec_pretty(&KeypointSidecar {
                        keypoints: kps.clone(),
                    })
                    .expect("keypoints serialize");
                    fs::write(&p, body).map_err(|e| io(&p, e))?;
                }
            }
        }
        Ok(())
    }
}

fn load_kind(dir: &Path, kind: CutoutKind) -> Result<Vec<Cutout>, AugmentError> {
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let err = |path: &Path, message: String| AugmentError::Inventory {
        path: path.to_path_buf(),
        message,
    };
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| err(dir, e.to_string()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("pam" | "ppm")))
        .collect();
    files.sort();
    let mut out = Vec::with_capacity(files.len());
    for path in files {
        let bytes = fs::read(&path).map_err(|e| err(&path, e.to_string()))?;
        let mut raster =
            RasterImage::decode_netpbm(&bytes).map_err(|e: RasterError| err(&path, e.to_string()))?;
        for y in 0..raster.height() {
            for x in 0..raster.width() {
                let mut px = raster.pixel(x, y);
                px[3] = if px[3] != 0 { 255 } else { 0 };
                raster.set_pixel(x, y, px);
            }
        }
        let sidecar = path.with_extension("json");
        let keypoints = if sidecar.exists() {
            let body = fs::read(&sidecar).map_err(|e| err(&sidecar, e.to_string()))?;
            let doc: KeypointSidecar =
                serde_json::from_slice(&body).map_err(|e| err(&sidecar, e.to_string()))?;
            Some(doc.keypoints)
        } else {
            None
        };
        let (w, h) = (raster.width() as f64, raster.height() as f64);
        out.push(Cutout {
            raster,
            src_bbox: BBox::new(0.0, 0.0, w, h),
            kind,
            keypoints,
        });
    }
    Ok(out)
}

/// Where and how large one cutout is pasted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub cutout_index: usize,
    pub kind: CutoutKind,
    /// Region of the inventory cutout that is pasted.
    pub src_rect: PixelRect,
    pub dst_x: f64,
    pub dst_y: f64,
    pub dst_w: f64,
    pub dst_h: f64,
    /// Drawn size fraction relative to the person box.
    pub size_frac: f64,
}

impl Placement {
    pub fn center(&self) -> (f64, f64) {
        (self.dst_x + self.dst_w / 2.0, self.dst_y + self.dst_h / 2.0)
    }

    pub fn area(&self) -> f64 {
        self.dst_w * self.dst_h
    }

    /// Integer destination used for compositing.
    pub fn dst_rect(&self) -> PixelRect {
        PixelRect::new(
            self.dst_x.floor() as i64,
            self.dst_y.floor() as i64,
            (self.dst_w.round() as u32).max(1),
            (self.dst_h.round() as u32).max(1),
        )
    }
}

fn uniform<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

fn scaled_size(src_w: u32, src_h: u32, person: &BBox, frac: f64, mode: SizeMode) -> (f64, f64) {
    let area = match mode {
        SizeMode::Area => frac * person.area(),
        SizeMode::Linear => frac * frac * person.area(),
    };
    let aspect = src_w as f64 / src_h as f64;
    ((area * aspect).sqrt().max(1.0), (area / aspect).sqrt().max(1.0))
}

fn place<R: Rng>(
    rng: &mut R,
    person: &BBox,
    cutout_index: usize,
    kind: CutoutKind,
    src_rect: PixelRect,
    config: &AugmentConfig,
    center_ok: impl Fn(f64, f64) -> bool,
) -> Placement {
    let frac = uniform(rng, config.area_frac_min, config.area_frac_max);
    let (w, h) = scaled_size(src_rect.w, src_rect.h, person, frac, config.size_mode);
    let (cx, cy) = loop {
        let cx = uniform(rng, person.x, person.x + person.w);
        let cy = uniform(rng, person.y, person.y + person.h);
        if center_ok(cx, cy) {
            break (cx, cy);
        }
    };
    Placement {
        cutout_index,
        kind,
        src_rect,
        dst_x: cx - w / 2.0,
        dst_y: cy - h / 2.0,
        dst_w: w,
        dst_h: h,
        size_frac: frac,
    }
}

fn full_rect(c: &Cutout) -> PixelRect {
    PixelRect::new(0, 0, c.width(), c.height())
}

pub fn plan_object_cutout<R: Rng>(
    rng: &mut R,
    person: &BBox,
    inventory: &CutoutInventory,
    config: &AugmentConfig,
) -> Result<Placement, AugmentError> {
    if inventory.objects.is_empty() {
        return Err(AugmentError::EmptyInventory("object"));
    }
    let idx = rng.random_range(0..inventory.objects.len());
    let src = full_rect(&inventory.objects[idx]);
    Ok(place(rng, person, idx, CutoutKind::Object, src, config, |_, _| true))
}

/// Picks a sub-rectangle covering a fraction in `[part_frac_min, part_frac_max]`
/// of a `w x h` cutout.
fn pick_part<R: Rng>(rng: &mut R, w: u32, h: u32, config: &AugmentConfig) -> PixelRect {
    let frac = uniform(rng, config.part_frac_min, config.part_frac_max);
    let spread = uniform(rng, frac, 1.0);
    let swap = rng.random::<bool>();
    // `a` is the axis that receives `spread`.
    let (a_len, b_len) = if swap { (h, w) } else { (w, h) };
    let total = a_len as f64 * b_len as f64;
    let a = ((spread * a_len as f64).ceil() as u32).clamp(1, a_len);
    let mut b = (frac * total / a as f64).round() as u32;
    let lo = (config.part_frac_min * total / a as f64).ceil() as u32;
    let hi = (config.part_frac_max * total / a as f64).floor() as u32;
    if lo <= hi {
        b = b.clamp(lo, hi);
    }
    let b = b.clamp(1, b_len);
    let (pw, ph) = if swap { (b, a) } else { (a, b) };
    let x = rng.random_range(0..=w - pw);
    let y = rng.random_range(0..=h - ph);
    PixelRect::new(x as i64, y as i64, pw, ph)
}

pub fn plan_body_part_cutout<R: Rng>(
    rng: &mut R,
    person: &BBox,
    inventory: &CutoutInventory,
    config: &AugmentConfig,
) -> Result<Placement, AugmentError> {
    if inventory.persons.is_empty() {
        return Err(AugmentError::EmptyInventory("person"));
    }
    let idx = rng.random_range(0..inventory.persons.len());
    let c = &inventory.persons[idx];
    let part = pick_part(rng, c.width(), c.height(), config);
    Ok(place(rng, person, idx, CutoutKind::BodyPart, part, config, |_, _| true))
}

/// Middle half of the box along each axis, closed.
pub fn central_region(person: &BBox) -> BBox {
    BBox::new(
        person.x + 0.25 * person.w,
        person.y + 0.25 * person.h,
        0.5 * person.w,
        0.5 * person.h,
    )
}

pub fn plan_full_body_cutout<R: Rng>(
    rng: &mut R,
    person: &BBox,
    inventory: &CutoutInventory,
    config: &AugmentConfig,
) -> Result<Placement, AugmentError> {
    if inventory.persons.is_empty() {
        return Err(AugmentError::EmptyInventory("person"));
    }
    let idx = rng.random_range(0..inventory.persons.len());
    let src = full_rect(&inventory.persons[idx]);
    let centre = central_region(person);
    Ok(place(rng, person, idx, CutoutKind::FullBody, src, config, |x, y| {
        !centre.contains(x, y)
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlagChange {
    pub person: usize,
    pub keypoint: usize,
    pub from: Visibility,
    pub to: Visibility,
}

/// Replayable record of one augmentation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentLog {
    pub image_id: String,
    pub method: AugmentMethod,
    pub target_person: Option<usize>,
    pub placements: Vec<Placement>,
    pub flag_changes: Vec<FlagChange>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Augmented {
    pub image: RasterImage,
    pub record: ImageRecord,
    pub log: AugmentLog,
}

impl CutoutInventory {
    fn source(&self, kind: CutoutKind) -> &[Cutout] {
        match kind {
            CutoutKind::Object => &self.objects,
            CutoutKind::BodyPart | CutoutKind::FullBody => &self.persons,
        }
    }
}

/// Occludes flags of keypoints whose pixel is set in `coverage`.
pub fn update_flags(record: &mut ImageRecord, coverage: &Bitmask) -> Vec<FlagChange> {
    let mut changes = Vec::new();
    for (pi, person) in record.persons.iter_mut().enumerate() {
        for (ki, kp) in person.pose.keypoints.iter_mut().enumerate() {
            if !matches!(kp.vis, Visibility::Visible | Visibility::SelfOccluded) {
                continue;
            }
            if !(kp.x.is_finite() && kp.y.is_finite()) {
                continue;
            }
            if coverage.get_signed(kp.x.floor() as i64, kp.y.floor() as i64) {
                changes.push(FlagChange {
                    person: pi,
                    keypoint: ki,
                    from: kp.vis,
                    to: Visibility::Occluded,
                });
                kp.vis = Visibility::Occluded;
            }
        }
    }
    changes
}

pub fn apply_augmentation<R: Rng>(
    rng: &mut R,
    image: &RasterImage,
    record: &ImageRecord,
    target_person: usize,
    config: &AugmentConfig,
    inventory: &CutoutInventory,
) -> Result<Augmented, AugmentError> {
    config.validate()?;
    if target_person >= record.persons.len() {
        return Err(AugmentError::TargetIndex {
            index: target_person,
            count: record.persons.len(),
        });
    }
    if image.width() != record.width || image.height() != record.height {
        return Err(AugmentError::ImageSize {
            id: record.id.clone(),
            image_w: image.width(),
            image_h: image.height(),
            record_w: record.width,
            record_h: record.height,
        });
    }
    let bbox = record.persons[target_person].bbox;

    let method = config.method;
    let person_kind = method.person_kind();
    let kinds: Vec<CutoutKind> = match method {
        AugmentMethod::None => vec![],
        AugmentMethod::Objects => vec![CutoutKind::Object],
        AugmentMethod::BodyParts | AugmentMethod::FullBody => vec![person_kind.unwrap()],
        AugmentMethod::PartsAndObjects | AugmentMethod::FullAndObjects => {
            vec![person_kind.unwrap(), CutoutKind::Object]
        }
        AugmentMethod::PartsOrObjects | AugmentMethod::FullOrObjects => {
            if rng.random::<f64>() < config.or_probability {
                vec![CutoutKind::Object]
            } else {
                vec![person_kind.unwrap()]
            }
        }
    };

    let mut placements = Vec::with_capacity(kinds.len());
    for kind in kinds {
        let p = match kind {
            CutoutKind::Object => plan_object_cutout(rng, &bbox, inventory, config)?,
            CutoutKind::BodyPart => plan_body_part_cutout(rng, &bbox, inventory, config)?,
            CutoutKind::FullBody => plan_full_body_cutout(rng, &bbox, inventory, config)?,
        };
        placements.push(p);
    }

    let mut out = image.clone();
    let mut coverage = Bitmask::new(image.width(), image.height());
    for p in &placements {
        let cut = &inventory.source(p.kind)[p.cutout_index];
        composite_region(&mut out, &mut coverage, &cut.raster, p.src_rect, p.dst_rect())?;
    }
    let mut new_record = record.clone();
    let flag_changes = update_flags(&mut new_record, &coverage);

    Ok(Augmented {
        image: out,
        record: new_record,
        log: AugmentLog {
            image_id: record.id.clone(),
            method,
            target_person: Some(target_person),
            placements,
            flag_changes,
        },
    })
}

/// Augments every image on its own `(seed, image id)` stream; one randomly
/// drawn target person per image. Images without persons pass through.
pub fn augment_images(
    images: &[RasterImage],
    records: &[ImageRecord],
    config: &AugmentConfig,
    inventory: &CutoutInventory,
) -> Result<Vec<Augmented>, AugmentError> {
    config.validate()?;
    images
        .par_iter()
        .zip(records.par_iter())
        .map(|(image, record)| {
            let mut r = rng::substream(config.seed, &record.id);
            if record.persons.is_empty() {
                return Ok(Augmented {
                    image: image.clone(),
                    record: record.clone(),
                    log: AugmentLog {
                        image_id: record.id.clone(),
                        method: config.method,
                        target_person: None,
                        placements: vec![],
                        flag_changes: vec![],
                    },
                });
            }
            let target = r.random_range(0..record.persons.len());
            apply_augmentation(&mut r, image, record, target, config, inventory)
        })
        .collect()
}
