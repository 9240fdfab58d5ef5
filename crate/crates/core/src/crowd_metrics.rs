//! CrowdIndex and crowding-level partitions.
//!
//! For an image with `N` people, `N_b(i)` counts person `i`'s own labeled
//! keypoints inside its box and `N_a(i)` counts the labeled keypoints of every
//! other person inside that same box. The index is
//! `C = min(mean_i N_a(i) / N_b(i), 1)`.
//!
//! Boxes are closed: a keypoint on an edge is inside.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotations::{Dataset, ImageRecord, Keypoint, Visibility};

#[derive(Debug, Error, PartialEq)]
pub enum CrowdError {
    #[error("crowd index is undefined for image {0:?} without persons")]
    NoPersons(String),
    #[error("histogram needs at least one bin")]
    NoBins,
}

/// Which keypoints take part in the counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CountingMode {
    /// Every keypoint that is not `Unlabeled`.
    #[default]
    Labeled,
    /// Only `Visible` keypoints.
    VisibleOnly,
}

impl CountingMode {
    fn counts(self, k: &Keypoint) -> bool {
        match self {
            CountingMode::Labeled => k.vis.is_labeled(),
            CountingMode::VisibleOnly => k.vis == Visibility::Visible,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrowdIndex {
    pub value: f64,
    /// Persons with no own keypoint inside their box; they contribute 0.
    pub degenerate_persons: Vec<usize>,
}

pub fn crowd_index(record: &ImageRecord) -> Result<f64, CrowdError> {
    crowd_index_with(record, CountingMode::Labeled).map(|c| c.value)
}

pub fn crowd_index_with(record: &ImageRecord, mode: CountingMode) -> Result<CrowdIndex, CrowdError> {
    let n = record.persons.len();
    if n == 0 {
        return Err(CrowdError::NoPersons(record.id.clone()));
    }
    let mut degenerate = Vec::new();
    let mut ratios = Vec::with_capacity(n);
    for (i, person) in record.persons.iter().enumerate() {
        let inside = |k: &&Keypoint| mode.counts(k) && person.bbox.contains(k.x, k.y);
        let own = person.pose.keypoints.iter().filter(inside).count();
        if own == 0 {
            log::warn!(
                "image {:?}: person {i} has no own keypoint inside its box; counted as 0",
                record.id
            );
            degenerate.push(i);
            continue;
        }
        let foreign: usize = record
            .persons
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, other)| other.pose.keypoints.iter().filter(inside).count())
            .sum();
        ratios.push((foreign as u128, own as u128));
    }
    Ok(CrowdIndex {
        value: mean_ratio(&ratios, n).min(1.0),
        degenerate_persons: degenerate,
    })
}

fn gcd(a: u128, b: u128) -> u128 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Mean of `num/den` ratios over `n` persons, summed as an exact fraction so
/// person order cannot change the result.
fn mean_ratio(ratios: &[(u128, u128)], n: usize) -> f64 {
    let exact = ratios.iter().try_fold((0u128, 1u128), |(num, den), &(a, b)| {
        let num = num.checked_mul(b)?.checked_add(a.checked_mul(den)?)?;
        let den = den.checked_mul(b)?;
        let g = gcd(num, den);
        Some((num / g, den / g))
    });
    match exact.and_then(|(num, den)| Some((num, den.checked_mul(n as u128)?))) {
        Some((num, den)) => {
            let g = gcd(num, den);
            (num / g) as f64 / (den / g) as f64
        }
        None => {
            let mut v: Vec<f64> = ratios.iter().map(|&(a, b)| a as f64 / b as f64).collect();
            v.sort_by(f64::total_cmp);
            v.iter().sum::<f64>() / n as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrowdLevel {
    Easy,
    Medium,
    Hard,
}

impl CrowdLevel {
    pub const ALL: [CrowdLevel; 3] = [CrowdLevel::Easy, CrowdLevel::Medium, CrowdLevel::Hard];
}

/// Easy `[0, 0.1)`, Medium `[0.1, 0.8)`, Hard `[0.8, 1]`.
pub fn partition(c: f64) -> CrowdLevel {
    if c < 0.1 {
        CrowdLevel::Easy
    } else if c < 0.8 {
        CrowdLevel::Medium
    } else {
        CrowdLevel::Hard
    }
}

/// Bin of `c` among `bins` equal-width bins over `[0, 1]`; the last bin is closed.
pub fn bin_index(c: f64, bins: usize) -> usize {
    ((c * bins as f64).floor().max(0.0) as usize).min(bins - 1)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelCounts {
    pub easy: usize,
    pub medium: usize,
    pub hard: usize,
}

impl LevelCounts {
    pub fn add(&mut self, level: CrowdLevel) {
        *self.get_mut(level) += 1;
    }

    pub fn get(&self, level: CrowdLevel) -> usize {
        match level {
            CrowdLevel::Easy => self.easy,
            CrowdLevel::Medium => self.medium,
            CrowdLevel::Hard => self.hard,
        }
    }

    pub fn get_mut(&mut self, level: CrowdLevel) -> &mut usize {
        match level {
            CrowdLevel::Easy => &mut self.easy,
            CrowdLevel::Medium => &mut self.medium,
            CrowdLevel::Hard => &mut self.hard,
        }
    }

    pub fn total(&self) -> usize {
        self.easy + self.medium + self.hard
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageCrowdIndex {
    pub image_id: String,
    pub crowd_index: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub bins: usize,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn frequencies(&self) -> Vec<f64> {
        let total: usize = self.counts.iter().sum();
        self.counts
            .iter()
            .map(|&c| if total == 0 { 0.0 } else { c as f64 / total as f64 })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrowdIndexStats {
    pub per_image: Vec<ImageCrowdIndex>,
    pub histogram: Histogram,
    pub levels: LevelCounts,
    /// Images without persons, for which the index is undefined.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub skipped: Vec<String>,
}

pub fn dataset_histogram(dataset: &Dataset, bins: usize) -> Result<CrowdIndexStats, CrowdError> {
    dataset_histogram_with(dataset, bins, CountingMode::Labeled)
}

pub fn dataset_histogram_with(
    dataset: &Dataset,
    bins: usize,
    mode: CountingMode,
) -> Result<CrowdIndexStats, CrowdError> {
    if bins == 0 {
        return Err(CrowdError::NoBins);
    }
    let mut stats = CrowdIndexStats {
        per_image: Vec::new(),
        histogram: Histogram {
            bins,
            counts: vec![0; bins],
        },
        levels: LevelCounts::default(),
        skipped: Vec::new(),
    };
    for im in &dataset.images {
        match crowd_index_with(im, mode) {
            Ok(ci) => {
                stats.histogram.counts[bin_index(ci.value, bins)] += 1;
                stats.levels.add(partition(ci.value));
                stats.per_image.push(ImageCrowdIndex {
                    image_id: im.id.clone(),
                    crowd_index: ci.value,
                });
            }
            Err(CrowdError::NoPersons(id)) => stats.skipped.push(id),
            Err(e) => return Err(e),
        }
    }
    Ok(stats)
}
