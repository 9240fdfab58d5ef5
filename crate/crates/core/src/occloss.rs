//! Dual-branch occlusion loss.
//!
//! ```text
//! L = (1/n) * sum_i [ d(P_vis_i, G_vis_i) + alpha * d(P_occ_i, G_occ_i) ]
//! ```
//!
//! where `d` is the per-channel mean squared difference ([`NormMode::Mse`])
//! or the Euclidean norm of the difference ([`NormMode::L2Norm`]). Wrong-branch
//! ground truth is zero, so a peak predicted in the wrong branch is paid for.
//!
//! All reductions use pairwise summation so results do not depend on how a
//! batch was split.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::heatmaps::{Heatmap, HeatmapPair};
use crate::rng;

pub const DEFAULT_ALPHA: f64 = 1.5;
/// Central-difference step for [`grad_check`]. The MSE objective is quadratic
/// per cell, so the difference quotient has no truncation error and a wide
/// step only shrinks cancellation error.
pub const DEFAULT_FD_STEP: f64 = 1e-2;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("L2 norm is not differentiable at keypoint {keypoint} ({branch} branch): zero residual")]
    NonDifferentiable { keypoint: usize, branch: &'static str },
    #[error("gradient descent diverged with lr = {lr}: loss {loss} exceeds 1e6 x initial {initial}")]
    Divergence { lr: f64, loss: f64, initial: f64 },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    #[default]
    Mse,
    L2Norm,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub alpha: f64,
    pub norm_mode: NormMode,
    /// Keypoint count `n`, the outer denominator.
    pub n: usize,
}

impl LossConfig {
    pub fn new(n: usize) -> Self {
        LossConfig {
            alpha: DEFAULT_ALPHA,
            norm_mode: NormMode::Mse,
            n,
        }
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }

    fn check(&self) -> Result<(), LossError> {
        if !(self.alpha > 0.0) {
            return Err(LossError::Config(format!("alpha must be > 0, got {}", self.alpha)));
        }
        if self.n == 0 {
            return Err(LossError::Config("n must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub total: f64,
    pub visible_term: f64,
    pub occluded_term: f64,
}

/// Pairwise (cascade) summation.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    const LEAF: usize = 8;
    if values.len() <= LEAF {
        return values.iter().sum();
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

fn check_shapes(p: &HeatmapPair, g: &HeatmapPair, cfg: &LossConfig) -> Result<(), LossError> {
    cfg.check()?;
    if !p.same_shape(g) {
        return Err(LossError::Dimension(format!(
            "prediction {}x{}x{} vs ground truth {}x{}x{}",
            p.visible.keypoints,
            p.visible.height,
            p.visible.width,
            g.visible.keypoints,
            g.visible.height,
            g.visible.width
        )));
    }
    if cfg.n != p.keypoints() {
        return Err(LossError::Dimension(format!(
            "config n = {} but heatmaps carry {} keypoints",
            cfg.n,
            p.keypoints()
        )));
    }
    Ok(())
}

fn channel_term(p: &[f64], g: &[f64], mode: NormMode) -> f64 {
    let sq: Vec<f64> = p.iter().zip(g).map(|(a, b)| (a - b) * (a - b)).collect();
    let s = pairwise_sum(&sq);
    match mode {
        NormMode::Mse => s / p.len() as f64,
        NormMode::L2Norm => s.sqrt(),
    }
}

fn branch_term(p: &Heatmap, g: &Heatmap, mode: NormMode) -> f64 {
    let terms: Vec<f64> = (0..p.keypoints)
        .map(|k| channel_term(p.channel(k), g.channel(k), mode))
        .collect();
    pairwise_sum(&terms)
}

pub fn loss(p: &HeatmapPair, g: &HeatmapPair, cfg: &LossConfig) -> Result<LossValue, LossError> {
    check_shapes(p, g, cfg)?;
    let visible_term = branch_term(&p.visible, &g.visible, cfg.norm_mode);
    let occluded_term = branch_term(&p.occluded, &g.occluded, cfg.norm_mode);
    Ok(LossValue {
        total: (visible_term + cfg.alpha * occluded_term) / cfg.n as f64,
        visible_term,
        occluded_term,
    })
}

fn branch_grad(
    p: &Heatmap,
    g: &Heatmap,
    weight: f64,
    cfg: &LossConfig,
    branch: &'static str,
) -> Result<Heatmap, LossError> {
    let mut out = Heatmap::zeros(p.keypoints, p.height, p.width);
    let cells = p.cells() as f64;
    for k in 0..p.keypoints {
        let (pc, gc) = (p.channel(k), g.channel(k));
        let scale = match cfg.norm_mode {
            NormMode::Mse => 2.0 * weight / (cfg.n as f64 * cells),
            NormMode::L2Norm => {
                let norm = channel_term(pc, gc, NormMode::L2Norm);
                if norm == 0.0 {
                    return Err(LossError::NonDifferentiable { keypoint: k, branch });
                }
                weight / (cfg.n as f64 * norm)
            }
        };
        for ((o, a), b) in out.channel_mut(k).iter_mut().zip(pc).zip(gc) {
            *o = scale * (a - b);
        }
    }
    Ok(out)
}

/// Analytic gradient of `loss(..).total` with respect to `p`.
pub fn loss_grad(p: &HeatmapPair, g: &HeatmapPair, cfg: &LossConfig) -> Result<HeatmapPair, LossError> {
    check_shapes(p, g, cfg)?;
    Ok(HeatmapPair {
        visible: branch_grad(&p.visible, &g.visible, 1.0, cfg, "visible")?,
        occluded: branch_grad(&p.occluded, &g.occluded, cfg.alpha, cfg, "occluded")?,
    })
}

/// Relative error with an absolute floor so near-zero gradients compare sanely.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    const FLOOR: f64 = 1e-8;
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

/// Random heatmap pair with values in `[0, 1)`.
pub fn random_pair<R: Rng>(rng: &mut R, k: usize, h: usize, w: usize) -> HeatmapPair {
    let mut pair = HeatmapPair::zeros(k, h, w);
    for v in pair.visible.values.iter_mut().chain(pair.occluded.values.iter_mut()) {
        *v = rng.random::<f64>();
    }
    pair
}

fn cell_mut(p: &mut HeatmapPair, branch: usize, idx: usize) -> &mut f64 {
    if branch == 0 {
        &mut p.visible.values[idx]
    } else {
        &mut p.occluded.values[idx]
    }
}

/// Keypoints, rows and columns of the reduced gradient-check problem.
pub const GRAD_CHECK_SHAPE: (usize, usize, usize) = (3, 16, 12);

/// Worst relative error between analytic and central-difference gradients
/// over `trials` random instances of shape [`GRAD_CHECK_SHAPE`].
pub fn grad_check(cfg: &LossConfig, trials: usize, fd_step: f64, seed: u64) -> Result<f64, LossError> {
    if trials == 0 {
        return Err(LossError::Config("trials must be >= 1".into()));
    }
    if !(fd_step > 0.0) {
        return Err(LossError::Config(format!("fd_step must be > 0, got {fd_step}")));
    }
    let (k, h, w) = GRAD_CHECK_SHAPE;
    let cfg = LossConfig { n: k, ..*cfg };
    let mut worst: f64 = 0.0;
    for t in 0..trials {
        let mut r = rng::substream_indexed(seed, "grad_check", t as u64);
        let mut p = random_pair(&mut r, k, h, w);
        let g = random_pair(&mut r, k, h, w);
        let analytic = loss_grad(&p, &g, &cfg)?;
        for branch in 0..2 {
            for idx in 0..k * h * w {
                let original = *cell_mut(&mut p, branch, idx);
                *cell_mut(&mut p, branch, idx) = original + fd_step;
                let plus = loss(&p, &g, &cfg)?.total;
                *cell_mut(&mut p, branch, idx) = original - fd_step;
                let minus = loss(&p, &g, &cfg)?.total;
                *cell_mut(&mut p, branch, idx) = original;
                let numeric = (plus - minus) / (2.0 * fd_step);
                let a = if branch == 0 {
                    analytic.visible.values[idx]
                } else {
                    analytic.occluded.values[idx]
                };
                worst = worst.max(relative_error(a, numeric));
            }
        }
    }
    Ok(worst)
}

/// Largest stable step for plain gradient descent on the MSE objective.
pub fn stability_bound(cfg: &LossConfig, height: usize, width: usize) -> f64 {
    cfg.n as f64 * (height * width) as f64 / cfg.alpha.max(1.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub prediction: HeatmapPair,
    /// Loss before the first step and after every step.
    pub trajectory: Vec<f64>,
}

/// Gradient descent on `P` as free parameters, starting at `init`.
pub fn fit_direct(
    g: &HeatmapPair,
    init: &HeatmapPair,
    cfg: &LossConfig,
    lr: f64,
    steps: usize,
) -> Result<FitResult, LossError> {
    if !(lr > 0.0) {
        return Err(LossError::Config(format!("lr must be > 0, got {lr}")));
    }
    if cfg.norm_mode != NormMode::Mse {
        return Err(LossError::Config("fit_direct requires MSE mode".into()));
    }
    let mut p = init.clone();
    let initial = loss(&p, g, cfg)?.total;
    let mut trajectory = Vec::with_capacity(steps + 1);
    trajectory.push(initial);
    for _ in 0..steps {
        let grad = loss_grad(&p, g, cfg)?;
        for (v, d) in p.visible.values.iter_mut().zip(&grad.visible.values) {
            *v -= lr * d;
        }
        for (v, d) in p.occluded.values.iter_mut().zip(&grad.occluded.values) {
            *v -= lr * d;
        }
        let current = loss(&p, g, cfg)?.total;
        if !current.is_finite() || current > 1e6 * initial.max(f64::MIN_POSITIVE) {
            return Err(LossError::Divergence {
                lr,
                loss: current,
                initial,
            });
        }
        trajectory.push(current);
    }
    Ok(FitResult {
        prediction: p,
        trajectory,
    })
}
