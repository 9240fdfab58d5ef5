//! Keypoint AP evaluation: OKS similarity, greedy matching, interpolated AP
//! and per-crowding-level reports.

use std::collections::{HashMap, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotations::{Dataset, ImageRecord, PersonInstance, Pose};
use crate::crowd_metrics::{crowd_index, partition, CrowdLevel};
use crate::masks::{decode_mask, MaskError};

pub const DEFAULT_SIGMA: f64 = 0.079;
/// Recall sample points used for interpolated AP.
pub const RECALL_POINTS: usize = 101;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("similarity undefined: ground truth has no labeled keypoints")]
    UndefinedSimilarity,
    #[error("ground-truth scale must be positive, got {0}")]
    BadScale(f64),
    #[error("schema mismatch: prediction has {pred} keypoints, ground truth {gt}")]
    SchemaMismatch { pred: usize, gt: usize },
    #[error("prediction {index} has no finite score")]
    MissingScore { index: usize },
    #[error("AP undefined: no ground-truth instances")]
    NoGroundTruth,
    #[error("image ids do not align: missing in predictions {missing_in_pred:?}, missing in ground truth {missing_in_gt:?}, duplicated {duplicated:?}")]
    Alignment {
        missing_in_pred: Vec<String>,
        missing_in_gt: Vec<String>,
        duplicated: Vec<String>,
    },
    #[error("invalid OKS config: {0}")]
    Config(String),
    #[error(transparent)]
    Mask(#[from] MaskError),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AreaMode {
    #[default]
    BBoxArea,
    /// Segmentation pixel count, falling back to the box when absent.
    SegmentArea,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OksConfig {
    pub sigmas: Vec<f64>,
    #[serde(default)]
    pub area_mode: AreaMode,
    #[serde(default = "default_thresholds")]
    pub thresholds: Vec<f64>,
}

/// 0.50, 0.55, ..., 0.95
pub fn default_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

impl OksConfig {
    pub fn uniform(keypoints: usize) -> Self {
        OksConfig {
            sigmas: vec![DEFAULT_SIGMA; keypoints],
            area_mode: AreaMode::BBoxArea,
            thresholds: default_thresholds(),
        }
    }

    /// Accepts a bare array of sigmas or a full config object.
    pub fn from_json(bytes: &[u8]) -> Result<Self, EvalError> {
        let value: serde_json::Value =
            serde_json::from_slice(bytes).map_err(|e| EvalError::Config(e.to_string()))?;
        let cfg = if value.is_array() {
            let sigmas: Vec<f64> =
                serde_json::from_value(value).map_err(|e| EvalError::Config(e.to_string()))?;
            OksConfig {
                sigmas,
                ..OksConfig::uniform(0)
            }
        } else {
            serde_json::from_value(value).map_err(|e| EvalError::Config(e.to_string()))?
        };
        cfg.validate(None)?;
        Ok(cfg)
    }

    pub fn validate(&self, keypoints: Option<usize>) -> Result<(), EvalError> {
        if let Some(k) = keypoints {
            if self.sigmas.len() != k {
                return Err(EvalError::Config(format!(
                    "{} sigmas for a {k}-keypoint schema",
                    self.sigmas.len()
                )));
            }
        }
        if let Some(s) = self.sigmas.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(EvalError::Config(format!("sigma {s} is not positive")));
        }
        if self.thresholds.is_empty() {
            return Err(EvalError::Config("no thresholds".into()));
        }
        if self.thresholds.iter().any(|t| !(*t > 0.0 && *t <= 1.0))
            || self.thresholds.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(EvalError::Config(format!(
                "thresholds must be strictly increasing in (0, 1], got {:?}",
                self.thresholds
            )));
        }
        Ok(())
    }
}

/// Mean over labeled ground-truth keypoints of `exp(-d^2 / (2 s^2 k^2))`
/// with `s^2 = gt_scale` and `k = 2 sigma`.
pub fn oks(pred: &Pose, gt: &Pose, gt_scale: f64, cfg: &OksConfig) -> Result<f64, EvalError> {
    if pred.len() != gt.len() {
        return Err(EvalError::SchemaMismatch {
            pred: pred.len(),
            gt: gt.len(),
        });
    }
    if cfg.sigmas.len() != gt.len() {
        return Err(EvalError::Config(format!(
            "{} sigmas for {} keypoints",
            cfg.sigmas.len(),
            gt.len()
        )));
    }
    if !(gt_scale.is_finite() && gt_scale > 0.0) {
        return Err(EvalError::BadScale(gt_scale));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for ((p, g), sigma) in pred.keypoints.iter().zip(&gt.keypoints).zip(&cfg.sigmas) {
        if !g.vis.is_labeled() {
            continue;
        }
        let k = 2.0 * sigma;
        let d2 = (p.x - g.x).powi(2) + (p.y - g.y).powi(2);
        let e = (-d2 / (2.0 * gt_scale * k * k)).exp();
        // NaN coordinates count as infinitely far.
        sum += if e.is_nan() { 0.0 } else { e };
        n += 1;
    }
    if n == 0 {
        return Err(EvalError::UndefinedSimilarity);
    }
    Ok(sum / n as f64)
}

pub fn gt_scale(person: &PersonInstance, mode: AreaMode, width: u32, height: u32) -> Result<f64, EvalError> {
    match (mode, &person.segmentation) {
        (AreaMode::SegmentArea, Some(seg)) => Ok(decode_mask(seg, width, height)?.count() as f64),
        _ => Ok(person.bbox.area()),
    }
}

/// Result of greedy matching on one image at one threshold.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Matching {
    /// Ground-truth index matched by each prediction (input order).
    pub pred_to_gt: Vec<Option<usize>>,
    /// Ground truths without labeled keypoints; never matched nor counted.
    pub ignored_gt: Vec<bool>,
}

impl Matching {
    pub fn true_positives(&self) -> usize {
        self.pred_to_gt.iter().filter(|m| m.is_some()).count()
    }

    pub fn counted_gts(&self) -> usize {
        self.ignored_gt.iter().filter(|i| !**i).count()
    }
}

fn score_of(p: &PersonInstance, index: usize) -> Result<f64, EvalError> {
    match p.score {
        Some(s) if s.is_finite() => Ok(s),
        _ => Err(EvalError::MissingScore { index }),
    }
}

/// Prediction indices by score descending; ties keep input order.
pub fn score_order(preds: &[PersonInstance]) -> Result<Vec<usize>, EvalError> {
    let scores = preds
        .iter()
        .enumerate()
        .map(|(i, p)| score_of(p, i))
        .collect::<Result<Vec<_>, _>>()?;
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    Ok(order)
}

/// OKS for every (prediction, ground truth) pair; `None` for ignored ground truths.
pub fn oks_matrix(
    preds: &[PersonInstance],
    gts: &[PersonInstance],
    cfg: &OksConfig,
    width: u32,
    height: u32,
) -> Result<Vec<Vec<Option<f64>>>, EvalError> {
    let scales = gts
        .iter()
        .map(|g| {
            if g.pose.labeled_count() == 0 {
                Ok(None)
            } else {
                gt_scale(g, cfg.area_mode, width, height).map(Some)
            }
        })
        .collect::<Result<Vec<_>, _>>()?;
    preds
        .iter()
        .map(|p| {
            gts.iter()
                .zip(&scales)
                .map(|(g, s)| match s {
                    Some(s) => oks(&p.pose, &g.pose, *s, cfg).map(Some),
                    None => Ok(None),
                })
                .collect()
        })
        .collect()
}

fn greedy(order: &[usize], matrix: &[Vec<Option<f64>>], n_gt: usize, threshold: f64) -> Vec<Option<usize>> {
    let mut taken = vec![false; n_gt];
    let mut out = vec![None; matrix.len()];
    for &p in order {
        let mut best: Option<(usize, f64)> = None;
        for (g, o) in matrix[p].iter().enumerate() {
            let Some(o) = *o else { continue };
            if taken[g] || o < threshold {
                continue;
            }
            if best.is_none_or(|(_, b)| o > b) {
                best = Some((g, o));
            }
        }
        if let Some((g, _)) = best {
            taken[g] = true;
            out[p] = Some(g);
        }
    }
    out
}

/// Greedy matching in score order; each prediction takes the unmatched
/// ground truth with the highest OKS at or above `threshold` (lowest index on ties).
pub fn match_greedy(
    preds: &[PersonInstance],
    gts: &[PersonInstance],
    threshold: f64,
    cfg: &OksConfig,
) -> Result<Matching, EvalError> {
    let order = score_order(preds)?;
    // Image size only matters for segment areas.
    let (w, h) = segment_canvas(gts);
    let matrix = oks_matrix(preds, gts, cfg, w, h)?;
    Ok(Matching {
        pred_to_gt: greedy(&order, &matrix, gts.len(), threshold),
        ignored_gt: gts.iter().map(|g| g.pose.labeled_count() == 0).collect(),
    })
}

fn segment_canvas(gts: &[PersonInstance]) -> (u32, u32) {
    let mut w: f64 = 1.0;
    let mut h: f64 = 1.0;
    for g in gts {
        w = w.max(g.bbox.x + g.bbox.w);
        h = h.max(g.bbox.y + g.bbox.h);
    }
    (w.ceil() as u32, h.ceil() as u32)
}

/// Per-image matching outcome across all thresholds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMatches {
    pub scores: Vec<f64>,
    /// `matched[t][p]`: prediction `p` is a true positive at threshold `t`.
    pub matched: Vec<Vec<bool>>,
    pub n_gt: usize,
}

pub fn match_image(
    pred: &ImageRecord,
    gt: &ImageRecord,
    cfg: &OksConfig,
) -> Result<ImageMatches, EvalError> {
    let order = score_order(&pred.persons)?;
    let matrix = oks_matrix(&pred.persons, &gt.persons, cfg, gt.width, gt.height)?;
    let matched = cfg
        .thresholds
        .iter()
        .map(|&t| {
            greedy(&order, &matrix, gt.persons.len(), t)
                .into_iter()
                .map(|m| m.is_some())
                .collect()
        })
        .collect();
    Ok(ImageMatches {
        scores: pred.persons.iter().map(|p| p.score.unwrap_or(0.0)).collect(),
        matched,
        n_gt: gt.persons.iter().filter(|g| g.pose.labeled_count() > 0).count(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdAp {
    pub threshold: f64,
    pub ap: f64,
}

/// 101-point interpolated AP of one ranked list.
fn interpolated_ap(ranked_tp: &[bool], n_gt: usize) -> f64 {
    let mut recall = Vec::with_capacity(ranked_tp.len());
    let mut precision = Vec::with_capacity(ranked_tp.len());
    let mut tp = 0usize;
    for (i, &hit) in ranked_tp.iter().enumerate() {
        if hit {
            tp += 1;
        }
        recall.push(tp as f64 / n_gt as f64);
        precision.push(tp as f64 / (i + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut total = 0.0;
    for j in 0..RECALL_POINTS {
        let r = j as f64 / (RECALL_POINTS - 1) as f64;
        let idx = recall.partition_point(|&x| x < r);
        if idx < precision.len() {
            total += precision[idx];
        }
    }
    total / RECALL_POINTS as f64
}

/// Per-threshold AP and their mean, ranking predictions dataset-wide by
/// (score desc, image index, prediction index).
pub fn average_precision(
    images: &[ImageMatches],
    thresholds: &[f64],
) -> Result<(Vec<ThresholdAp>, f64), EvalError> {
    let n_gt: usize = images.iter().map(|m| m.n_gt).sum();
    if n_gt == 0 {
        return Err(EvalError::NoGroundTruth);
    }
    let mut ranked: Vec<(f64, usize, usize)> = images
        .iter()
        .enumerate()
        .flat_map(|(i, m)| m.scores.iter().enumerate().map(move |(p, &s)| (s, i, p)))
        .collect();
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let per: Vec<ThresholdAp> = thresholds
        .iter()
        .enumerate()
        .map(|(t, &threshold)| {
            let hits: Vec<bool> = ranked.iter().map(|&(_, i, p)| images[i].matched[t][p]).collect();
            ThresholdAp {
                threshold,
                ap: interpolated_ap(&hits, n_gt),
            }
        })
        .collect();
    let mean = per.iter().map(|t| t.ap).sum::<f64>() / per.len() as f64;
    Ok((per, mean))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelStats {
    pub images: usize,
    pub instances: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalCounts {
    pub easy: LevelStats,
    pub medium: LevelStats,
    pub hard: LevelStats,
    pub total: LevelStats,
}

impl EvalCounts {
    fn level_mut(&mut self, level: CrowdLevel) -> &mut LevelStats {
        match level {
            CrowdLevel::Easy => &mut self.easy,
            CrowdLevel::Medium => &mut self.medium,
            CrowdLevel::Hard => &mut self.hard,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ap: f64,
    /// `None` when the level has no ground-truth instances.
    pub ap_easy: Option<f64>,
    pub ap_medium: Option<f64>,
    pub ap_hard: Option<f64>,
    pub per_threshold: Vec<ThresholdAp>,
    pub counts: EvalCounts,
}

impl EvalReport {
    pub fn level_ap(&self, level: CrowdLevel) -> Option<f64> {
        match level {
            CrowdLevel::Easy => self.ap_easy,
            CrowdLevel::Medium => self.ap_medium,
            CrowdLevel::Hard => self.ap_hard,
        }
    }

    /// Header plus one row, values in percent, `-` for absent levels.
    pub fn to_csv(&self, label: &str) -> String {
        let cell = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{:.1}", 100.0 * v));
        format!(
            "label,AP,AP_Easy,AP_Med,AP_Hard\n{},{},{},{},{}\n",
            label,
            cell(Some(self.ap)),
            cell(self.ap_easy),
            cell(self.ap_medium),
            cell(self.ap_hard)
        )
    }
}

fn check_alignment(pred: &Dataset, gt: &Dataset) -> Result<HashMap<String, usize>, EvalError> {
    let mut duplicated = Vec::new();
    let mut pred_ids = HashMap::new();
    for (i, im) in pred.images.iter().enumerate() {
        if pred_ids.insert(im.id.clone(), i).is_some() {
            duplicated.push(im.id.clone());
        }
    }
    let mut gt_ids = HashSet::new();
    for im in &gt.images {
        if !gt_ids.insert(im.id.as_str()) {
            duplicated.push(im.id.clone());
        }
    }
    let missing_in_pred: Vec<String> = gt
        .images
        .iter()
        .filter(|im| !pred_ids.contains_key(&im.id))
        .map(|im| im.id.clone())
        .collect();
    let missing_in_gt: Vec<String> = pred
        .images
        .iter()
        .filter(|im| !gt_ids.contains(im.id.as_str()))
        .map(|im| im.id.clone())
        .collect();
    if duplicated.is_empty() && missing_in_pred.is_empty() && missing_in_gt.is_empty() {
        Ok(pred_ids)
    } else {
        duplicated.sort();
        duplicated.dedup();
        Err(EvalError::Alignment {
            missing_in_pred,
            missing_in_gt,
            duplicated,
        })
    }
}

/// Crowding level of a ground-truth image; images without persons are Easy.
pub fn image_level(gt: &ImageRecord) -> CrowdLevel {
    if gt.persons.is_empty() {
        CrowdLevel::Easy
    } else {
        partition(crowd_index(gt).expect("image has persons"))
    }
}

pub fn eval_by_crowding(pred: &Dataset, gt: &Dataset, cfg: &OksConfig) -> Result<EvalReport, EvalError> {
    cfg.validate(Some(gt.schema.count()))?;
    if pred.schema.count() != gt.schema.count() {
        return Err(EvalError::SchemaMismatch {
            pred: pred.schema.count(),
            gt: gt.schema.count(),
        });
    }
    let pred_ids = check_alignment(pred, gt)?;
    let per_image: Vec<(CrowdLevel, ImageMatches)> = gt
        .images
        .par_iter()
        .map(|g| {
            let p = &pred.images[pred_ids[&g.id]];
            Ok((image_level(g), match_image(p, g, cfg)?))
        })
        .collect::<Result<_, EvalError>>()?;

    let mut counts = EvalCounts::default();
    for (level, m) in &per_image {
        let s = counts.level_mut(*level);
        s.images += 1;
        s.instances += m.n_gt;
        counts.total.images += 1;
        counts.total.instances += m.n_gt;
    }
    let all: Vec<ImageMatches> = per_image.iter().map(|(_, m)| m.clone()).collect();
    let (per_threshold, ap) = average_precision(&all, &cfg.thresholds)?;
    let level_ap = |level: CrowdLevel| -> Option<f64> {
        let subset: Vec<ImageMatches> = per_image
            .iter()
            .filter(|(l, _)| *l == level)
            .map(|(_, m)| m.clone())
            .collect();
        average_precision(&subset, &cfg.thresholds).ok().map(|(_, ap)| ap)
    };
    Ok(EvalReport {
        ap,
        ap_easy: level_ap(CrowdLevel::Easy),
        ap_medium: level_ap(CrowdLevel::Medium),
        ap_hard: level_ap(CrowdLevel::Hard),
        per_threshold,
        counts,
    })
}
