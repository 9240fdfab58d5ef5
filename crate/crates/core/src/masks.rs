//! Segmentation masks, cutout extraction and binary-alpha compositing.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotations::{BBox, Keypoint};
use crate::raster::RasterImage;

#[derive(Debug, Error, PartialEq)]
pub enum MaskError {
    #[error("geometry error: {0}")]
    Geometry(String),
    #[error("rle decode error: runs sum to {sum}, expected {expected}")]
    RunSum { sum: u64, expected: u64 },
    #[error("mask is {mask_w}x{mask_h} but image is {image_w}x{image_h}")]
    SizeMismatch {
        mask_w: u32,
        mask_h: u32,
        image_w: u32,
        image_h: u32,
    },
    #[error("mask has no foreground pixels")]
    EmptyCutout,
    #[error("invalid placement: {0}")]
    Placement(String),
}

/// COCO-compatible uncompressed RLE: column-major runs starting with background.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rle {
    /// `[height, width]`
    pub size: [u32; 2],
    pub counts: Vec<u32>,
}

/// Segmentation geometry as stored in annotation files.
///
/// Polygons use the COCO layout: each polygon is a flat `[x0, y0, x1, y1, ...]`
/// list in pixel coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SegmentMask {
    Polygons(Vec<Vec<f64>>),
    Rle(Rle),
}

/// Row-major binary mask.
#[derive(Clone, PartialEq, Eq)]
pub struct Bitmask {
    width: u32,
    height: u32,
    bits: Vec<bool>,
}

impl std::fmt::Debug for Bitmask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "Bitmask {}x{}", self.width, self.height)?;
        for y in 0..self.height {
            let row: String = (0..self.width)
                .map(|x| if self.get(x, y) { '#' } else { '.' })
                .collect();
            writeln!(f, "{row}")?;
        }
        Ok(())
    }
}

impl Bitmask {
    pub fn new(width: u32, height: u32) -> Self {
        Bitmask {
            width,
            height,
            bits: vec![false; width as usize * height as usize],
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bits[y as usize * self.width as usize + x as usize]
    }

    /// Out-of-range coordinates read as background.
    pub fn get_signed(&self, x: i64, y: i64) -> bool {
        x >= 0
            && y >= 0
            && (x as u64) < self.width as u64
            && (y as u64) < self.height as u64
            && self.get(x as u32, y as u32)
    }

    pub fn set(&mut self, x: u32, y: u32, v: bool) {
        let w = self.width as usize;
        self.bits[y as usize * w + x as usize] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn union_with(&mut self, other: &Bitmask) {
        for (a, b) in self.bits.iter_mut().zip(&other.bits) {
            *a |= *b;
        }
    }

    /// Tight bounds of the foreground as `(x, y, w, h)`.
    pub fn bounds(&self) -> Option<(u32, u32, u32, u32)> {
        let (mut x0, mut y0, mut x1, mut y1) = (u32::MAX, u32::MAX, 0, 0);
        let mut any = false;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    any = true;
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x);
                    y1 = y1.max(y);
                }
            }
        }
        any.then(|| (x0, y0, x1 - x0 + 1, y1 - y0 + 1))
    }
}

/// Even-odd fill sampled at pixel centres; polygons are unioned.
pub fn decode_polygon(mask: &SegmentMask, width: u32, height: u32) -> Result<Bitmask, MaskError> {
    let polys = match mask {
        SegmentMask::Polygons(p) => p,
        SegmentMask::Rle(_) => {
            return Err(MaskError::Geometry("expected polygons, found RLE".into()))
        }
    };
    let mut out = Bitmask::new(width, height);
    let mut crossings = Vec::new();
    for (pi, flat) in polys.iter().enumerate() {
        if flat.len() % 2 != 0 || flat.len() < 6 {
            return Err(MaskError::Geometry(format!(
                "polygon {pi} has {} coordinates; need an even count and at least 3 vertices",
                flat.len()
            )));
        }
        let verts: Vec<(f64, f64)> = flat.chunks_exact(2).map(|c| (c[0], c[1])).collect();
        for y in 0..height {
            let cy = y as f64 + 0.5;
            crossings.clear();
            let mut j = verts.len() - 1;
            for i in 0..verts.len() {
                let (xi, yi) = verts[i];
                let (xj, yj) = verts[j];
                if (yi > cy) != (yj > cy) {
                    crossings.push((xj - xi) * (cy - yi) / (yj - yi) + xi);
                }
                j = i;
            }
            crossings.sort_by(f64::total_cmp);
            // A centre is inside when an odd number of crossings lie strictly to its right,
            // i.e. when it falls in [c[2k], c[2k+1]).
            for pair in crossings.chunks_exact(2) {
                let mut x = (pair[0] - 0.5).floor().max(0.0) as i64;
                while x < width as i64 && (x as f64 + 0.5) < pair[1] {
                    if x as f64 + 0.5 >= pair[0] {
                        out.set(x as u32, y, true);
                    }
                    x += 1;
                }
            }
        }
    }
    Ok(out)
}

pub fn decode_rle(mask: &SegmentMask) -> Result<Bitmask, MaskError> {
    let rle = match mask {
        SegmentMask::Rle(r) => r,
        SegmentMask::Polygons(_) => {
            return Err(MaskError::Geometry("expected RLE, found polygons".into()))
        }
    };
    let [h, w] = rle.size;
    let total = h as u64 * w as u64;
    let sum: u64 = rle.counts.iter().map(|&c| c as u64).sum();
    if sum != total {
        return Err(MaskError::RunSum {
            sum,
            expected: total,
        });
    }
    let mut out = Bitmask::new(w, h);
    let mut pos = 0u64;
    for (i, &run) in rle.counts.iter().enumerate() {
        if i % 2 == 1 {
            for p in pos..pos + run as u64 {
                // column-major: p = x * h + y
                out.set((p / h as u64) as u32, (p % h as u64) as u32, true);
            }
        }
        pos += run as u64;
    }
    Ok(out)
}

pub fn encode_rle(mask: &Bitmask) -> Rle {
    let (w, h) = (mask.width(), mask.height());
    let mut counts = Vec::new();
    let mut current = false;
    let mut run = 0u32;
    for x in 0..w {
        for y in 0..h {
            let v = mask.get(x, y);
            if v != current {
                counts.push(run);
                run = 0;
                current = v;
            }
            run += 1;
        }
    }
    counts.push(run);
    Rle {
        size: [h, w],
        counts,
    }
}

/// Decodes either mask flavour at the given image size.
pub fn decode_mask(mask: &SegmentMask, width: u32, height: u32) -> Result<Bitmask, MaskError> {
    match mask {
        SegmentMask::Polygons(_) => decode_polygon(mask, width, height),
        SegmentMask::Rle(r) => {
            if r.size != [height, width] {
                return Err(MaskError::SizeMismatch {
                    mask_w: r.size[1],
                    mask_h: r.size[0],
                    image_w: width,
                    image_h: height,
                });
            }
            decode_rle(mask)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CutoutKind {
    Object,
    BodyPart,
    FullBody,
}

/// Alpha-masked patch cut from a source image.
#[derive(Debug, Clone, PartialEq)]
pub struct Cutout {
    pub raster: RasterImage,
    pub src_bbox: BBox,
    pub kind: CutoutKind,
    /// Keypoints in cutout-local pixel coordinates (person cutouts only).
    pub keypoints: Option<Vec<Keypoint>>,
}

impl Cutout {
    pub fn width(&self) -> u32 {
        self.raster.width()
    }

    pub fn height(&self) -> u32 {
        self.raster.height()
    }

    pub fn is_opaque(&self, x: u32, y: u32) -> bool {
        self.raster.pixel(x, y)[3] != 0
    }
}

pub fn extract_cutout(
    image: &RasterImage,
    mask: &Bitmask,
    kind: CutoutKind,
) -> Result<Cutout, MaskError> {
    if mask.width() != image.width() || mask.height() != image.height() {
        return Err(MaskError::SizeMismatch {
            mask_w: mask.width(),
            mask_h: mask.height(),
            image_w: image.width(),
            image_h: image.height(),
        });
    }
    let (x0, y0, w, h) = mask.bounds().ok_or(MaskError::EmptyCutout)?;
    let mut raster = RasterImage::new(w, h, [0, 0, 0, 0]);
    for y in 0..h {
        for x in 0..w {
            let [r, g, b, _] = image.pixel(x0 + x, y0 + y);
            let a = if mask.get(x0 + x, y0 + y) { 255 } else { 0 };
            raster.set_pixel(x, y, [r, g, b, a]);
        }
    }
    Ok(Cutout {
        raster,
        src_bbox: BBox::new(x0 as f64, y0 as f64, w as f64, h as f64),
        kind,
        keypoints: None,
    })
}

/// Like [`extract_cutout`], additionally carrying a person's keypoints into
/// cutout-local coordinates.
pub fn extract_person_cutout(
    image: &RasterImage,
    mask: &Bitmask,
    keypoints: &[Keypoint],
) -> Result<Cutout, MaskError> {
    let mut cut = extract_cutout(image, mask, CutoutKind::FullBody)?;
    let (ox, oy) = (cut.src_bbox.x, cut.src_bbox.y);
    cut.keypoints = Some(
        keypoints
            .iter()
            .map(|k| Keypoint::new(k.x - ox, k.y - oy, k.vis))
            .collect(),
    );
    Ok(cut)
}

/// Integer pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelRect {
    pub x: i64,
    pub y: i64,
    pub w: u32,
    pub h: u32,
}

impl PixelRect {
    pub fn new(x: i64, y: i64, w: u32, h: u32) -> Self {
        PixelRect { x, y, w, h }
    }

    pub fn area(&self) -> u64 {
        self.w as u64 * self.h as u64
    }
}

/// Pastes `cutout` scaled to `dst_w x dst_h` at `(dst_x, dst_y)`.
///
/// Nearest-neighbour sampling with floor rounding; opaque cutout pixels
/// replace the target, transparent ones leave it untouched, and anything
/// outside the target is clipped.
pub fn composite(
    target: &RasterImage,
    cutout: &Cutout,
    dst_x: i64,
    dst_y: i64,
    dst_w: u32,
    dst_h: u32,
) -> Result<RasterImage, MaskError> {
    let src = PixelRect::new(0, 0, cutout.width(), cutout.height());
    let mut out = target.clone();
    let mut coverage = Bitmask::new(target.width(), target.height());
    composite_region(
        &mut out,
        &mut coverage,
        &cutout.raster,
        src,
        PixelRect::new(dst_x, dst_y, dst_w, dst_h),
    )?;
    Ok(out)
}

/// In-place compositing of a sub-rectangle of `src`, recording which target
/// pixels were replaced in `coverage`.
pub fn composite_region(
    target: &mut RasterImage,
    coverage: &mut Bitmask,
    src: &RasterImage,
    src_rect: PixelRect,
    dst: PixelRect,
) -> Result<(), MaskError> {
    if dst.w == 0 || dst.h == 0 {
        return Err(MaskError::Placement(format!(
            "destination size {}x{} must be at least 1x1",
            dst.w, dst.h
        )));
    }
    if src_rect.w == 0
        || src_rect.h == 0
        || src_rect.x < 0
        || src_rect.y < 0
        || src_rect.x as u64 + src_rect.w as u64 > src.width() as u64
        || src_rect.y as u64 + src_rect.h as u64 > src.height() as u64
    {
        return Err(MaskError::Placement(format!(
            "source rect {src_rect:?} outside {}x{} cutout",
            src.width(),
            src.height()
        )));
    }
    let (tw, th) = (target.width() as i64, target.height() as i64);
    let y_start = dst.y.max(0);
    let y_end = (dst.y + dst.h as i64).min(th);
    let x_start = dst.x.max(0);
    let x_end = (dst.x + dst.w as i64).min(tw);
    for ty in y_start..y_end {
        let j = (ty - dst.y) as u64;
        let sy = src_rect.y as u64 + j * src_rect.h as u64 / dst.h as u64;
        for tx in x_start..x_end {
            let i = (tx - dst.x) as u64;
            let sx = src_rect.x as u64 + i * src_rect.w as u64 / dst.w as u64;
            let [r, g, b, a] = src.pixel(sx as u32, sy as u32);
            if a != 0 {
                target.set_pixel(tx as u32, ty as u32, [r, g, b, 255]);
                coverage.set(tx as u32, ty as u32, true);
            }
        }
    }
    Ok(())
}
