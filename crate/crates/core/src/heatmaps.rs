//! Top-down crop geometry and dual-branch Gaussian heatmaps.
//!
//! A person box is widened or heightened about its centre to a 3:4 aspect,
//! then mapped onto the 192x256 network input. Heatmaps are 48x64, one
//! stride-4 cell per 4x4 input pixels, and cell `(col, row)` sits at heatmap
//! coordinate `(col, row)`.
//!
//! Each keypoint owns one channel in exactly one branch: `Visible` and
//! `SelfOccluded` keypoints go to the visible branch, `Occluded` ones to the
//! occluded branch, and the other branch's channel stays zero.

use std::io::{self, Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotations::{BBox, Keypoint, Pose, Visibility};

pub const INPUT_WIDTH: usize = 192;
pub const INPUT_HEIGHT: usize = 256;
pub const HEATMAP_WIDTH: usize = 48;
pub const HEATMAP_HEIGHT: usize = 64;
pub const STRIDE: f64 = 4.0;
pub const DEFAULT_SIGMA: f64 = 2.0;
pub const DEFAULT_CONF_THRESHOLD: f64 = 0.7;

/// Magic bytes opening a heatmap dump.
pub const DUMP_MAGIC: [u8; 4] = *b"HMP1";

#[derive(Debug, Error)]
pub enum HeatmapError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("transform is singular")]
    Singular,
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("bad heatmap dump: {0}")]
    Format(String),
}

/// 2x3 affine map from image to crop coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropTransform {
    pub matrix: [[f64; 3]; 2],
}

impl CropTransform {
    pub fn new(matrix: [[f64; 3]; 2]) -> Result<Self, HeatmapError> {
        let t = CropTransform { matrix };
        if t.determinant() == 0.0 || !t.determinant().is_finite() {
            return Err(HeatmapError::Singular);
        }
        Ok(t)
    }

    pub fn determinant(&self) -> f64 {
        let m = &self.matrix;
        m[0][0] * m[1][1] - m[0][1] * m[1][0]
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let m = &self.matrix;
        (
            m[0][0] * x + m[0][1] * y + m[0][2],
            m[1][0] * x + m[1][1] * y + m[1][2],
        )
    }

    pub fn inverse(&self) -> CropTransform {
        let m = &self.matrix;
        let det = self.determinant();
        let (a, b, c, d) = (m[1][1] / det, -m[0][1] / det, -m[1][0] / det, m[0][0] / det);
        CropTransform {
            matrix: [
                [a, b, -(a * m[0][2] + b * m[1][2])],
                [c, d, -(c * m[0][2] + d * m[1][2])],
            ],
        }
    }
}

/// Box expanded about its centre to the input aspect (w:h = 3:4).
pub fn expand_to_aspect(bbox: &BBox) -> BBox {
    let aspect = INPUT_WIDTH as f64 / INPUT_HEIGHT as f64;
    let (cx, cy) = bbox.center();
    let (w, h) = if bbox.w > aspect * bbox.h {
        (bbox.w, bbox.w / aspect)
    } else {
        (bbox.h * aspect, bbox.h)
    };
    BBox::new(cx - w / 2.0, cy - h / 2.0, w, h)
}

pub fn bbox_to_crop(bbox: &BBox) -> CropTransform {
    let e = expand_to_aspect(bbox);
    let s = INPUT_WIDTH as f64 / e.w;
    CropTransform {
        matrix: [[s, 0.0, -e.x * s], [0.0, s, -e.y * s]],
    }
}

/// `K` channels of `height x width` values, channel-major then row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub keypoints: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl Heatmap {
    pub fn zeros(keypoints: usize, height: usize, width: usize) -> Self {
        Heatmap {
            keypoints,
            height,
            width,
            values: vec![0.0; keypoints * height * width],
        }
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    pub fn channel(&self, k: usize) -> &[f64] {
        let n = self.cells();
        &self.values[k * n..(k + 1) * n]
    }

    pub fn channel_mut(&mut self, k: usize) -> &mut [f64] {
        let n = self.cells();
        &mut self.values[k * n..(k + 1) * n]
    }

    pub fn at(&self, k: usize, row: usize, col: usize) -> f64 {
        self.values[(k * self.height + row) * self.width + col]
    }

    pub fn same_shape(&self, other: &Heatmap) -> bool {
        self.keypoints == other.keypoints && self.height == other.height && self.width == other.width
    }
}

/// Visible and occluded branches for the same keypoints.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapPair {
    pub visible: Heatmap,
    pub occluded: Heatmap,
}

impl HeatmapPair {
    pub fn zeros(keypoints: usize, height: usize, width: usize) -> Self {
        HeatmapPair {
            visible: Heatmap::zeros(keypoints, height, width),
            occluded: Heatmap::zeros(keypoints, height, width),
        }
    }

    pub fn keypoints(&self) -> usize {
        self.visible.keypoints
    }

    pub fn same_shape(&self, other: &HeatmapPair) -> bool {
        self.visible.same_shape(&other.visible)
            && self.occluded.same_shape(&other.occluded)
            && self.visible.same_shape(&self.occluded)
    }

    /// Dump layout: 16-byte header (magic, K, H, W as u32 LE), then the
    /// visible and occluded branches as f32 LE.
    pub fn write_dump<W: Write>(&self, mut out: W) -> Result<(), HeatmapError> {
        if !self.visible.same_shape(&self.occluded) {
            return Err(HeatmapError::Shape("branches differ in shape".into()));
        }
        out.write_all(&DUMP_MAGIC)?;
        for d in [self.visible.keypoints, self.visible.height, self.visible.width] {
            out.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in self.visible.values.iter().chain(&self.occluded.values) {
            out.write_all(&(*v as f32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_dump<R: Read>(mut input: R) -> Result<Self, HeatmapError> {
        let mut header = [0u8; 16];
        input.read_exact(&mut header)?;
        if header[..4] != DUMP_MAGIC {
            return Err(HeatmapError::Format("bad magic".into()));
        }
        let dim = |i: usize| u32::from_le_bytes(header[i..i + 4].try_into().unwrap()) as usize;
        let (k, h, w) = (dim(4), dim(8), dim(12));
        let n = k * h * w;
        let mut body = Vec::new();
        input.read_to_end(&mut body)?;
        if body.len() != 2 * n * 4 {
            return Err(HeatmapError::Format(format!(
                "expected {} payload bytes, found {}",
                2 * n * 4,
                body.len()
            )));
        }
        let floats: Vec<f64> = body
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        let mk = |vals: &[f64]| Heatmap {
            keypoints: k,
            height: h,
            width: w,
            values: vals.to_vec(),
        };
        Ok(HeatmapPair {
            visible: mk(&floats[..n]),
            occluded: mk(&floats[n..]),
        })
    }
}

/// Encoded targets plus, per keypoint, whether it landed on the heatmap.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedTarget {
    pub pair: HeatmapPair,
    pub in_bounds: Vec<bool>,
}

/// Image coordinates to heatmap coordinates.
pub fn to_heatmap_coords(transform: &CropTransform, x: f64, y: f64) -> (f64, f64) {
    let (u, v) = transform.apply(x, y);
    (u / STRIDE, v / STRIDE)
}

pub fn from_heatmap_coords(transform: &CropTransform, hx: f64, hy: f64) -> (f64, f64) {
    transform.inverse().apply(hx * STRIDE, hy * STRIDE)
}

/// Whether heatmap coordinates fall within some cell's extent.
pub fn on_heatmap(hx: f64, hy: f64) -> bool {
    hx >= -0.5 && hx < HEATMAP_WIDTH as f64 - 0.5 && hy >= -0.5 && hy < HEATMAP_HEIGHT as f64 - 0.5
}

pub fn encode(pose: &Pose, transform: &CropTransform, sigma: f64) -> EncodedTarget {
    assert!(sigma > 0.0, "sigma must be positive");
    let k = pose.len();
    let mut pair = HeatmapPair::zeros(k, HEATMAP_HEIGHT, HEATMAP_WIDTH);
    let mut in_bounds = vec![false; k];
    let radius = 3.0 * sigma;
    for (i, kp) in pose.keypoints.iter().enumerate() {
        let branch = match kp.vis {
            Visibility::Visible | Visibility::SelfOccluded => &mut pair.visible,
            Visibility::Occluded => &mut pair.occluded,
            Visibility::Unlabeled => continue,
        };
        let (hx, hy) = to_heatmap_coords(transform, kp.x, kp.y);
        if !on_heatmap(hx, hy) {
            continue;
        }
        in_bounds[i] = true;
        let channel = branch.channel_mut(i);
        let row0 = (hy - radius).ceil().max(0.0) as usize;
        let row1 = ((hy + radius).floor() as usize).min(HEATMAP_HEIGHT - 1);
        let col0 = (hx - radius).ceil().max(0.0) as usize;
        let col1 = ((hx + radius).floor() as usize).min(HEATMAP_WIDTH - 1);
        for row in row0..=row1 {
            for col in col0..=col1 {
                let d2 = (col as f64 - hx).powi(2) + (row as f64 - hy).powi(2);
                if d2 <= radius * radius {
                    channel[row * HEATMAP_WIDTH + col] = (-d2 / (2.0 * sigma * sigma)).exp();
                }
            }
        }
    }
    EncodedTarget { pair, in_bounds }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodedKeypoint {
    pub x: f64,
    pub y: f64,
    pub confidence: f64,
    /// `Visible` or `Occluded`, by winning branch.
    pub branch: Visibility,
    pub low_confidence: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodedPose {
    pub keypoints: Vec<DecodedKeypoint>,
}

impl DecodedPose {
    /// Pose with branch labels as visibility.
    pub fn to_pose(&self) -> Pose {
        Pose::new(
            self.keypoints
                .iter()
                .map(|d| Keypoint::new(d.x, d.y, d.branch))
                .collect(),
        )
    }

    pub fn mean_confidence(&self) -> f64 {
        if self.keypoints.is_empty() {
            return 0.0;
        }
        self.keypoints.iter().map(|d| d.confidence).sum::<f64>() / self.keypoints.len() as f64
    }
}

/// First maximum in row-major order.
fn argmax(channel: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, &v) in channel.iter().enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best
}

fn refine(prev: Option<f64>, next: Option<f64>) -> f64 {
    match (prev, next) {
        (Some(p), Some(n)) if n > p => 0.25,
        (Some(p), Some(n)) if p > n => -0.25,
        _ => 0.0,
    }
}

pub fn decode(pair: &HeatmapPair, transform: &CropTransform, conf_threshold: f64) -> DecodedPose {
    let (h, w) = (pair.visible.height, pair.visible.width);
    let keypoints = (0..pair.keypoints())
        .map(|k| {
            let (vi, vmax) = argmax(pair.visible.channel(k));
            let (oi, omax) = argmax(pair.occluded.channel(k));
            // Ties go to the visible branch.
            let (channel, idx, conf, branch) = if omax > vmax {
                (pair.occluded.channel(k), oi, omax, Visibility::Occluded)
            } else {
                (pair.visible.channel(k), vi, vmax, Visibility::Visible)
            };
            let (row, col) = (idx / w, idx % w);
            let at = |r: usize, c: usize| channel[r * w + c];
            let dx = refine(
                (col > 0).then(|| at(row, col - 1)),
                (col + 1 < w).then(|| at(row, col + 1)),
            );
            let dy = refine(
                (row > 0).then(|| at(row - 1, col)),
                (row + 1 < h).then(|| at(row + 1, col)),
            );
            let (x, y) = from_heatmap_coords(transform, col as f64 + dx, row as f64 + dy);
            let confidence = conf.max(0.0);
            DecodedKeypoint {
                x,
                y,
                confidence,
                branch,
                low_confidence: confidence < conf_threshold,
            }
        })
        .collect();
    DecodedPose { keypoints }
}
