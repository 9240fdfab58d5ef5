//! Independent reference implementations and fixtures shared by the
//! integration tests. Nothing here calls the library code it checks.
#![allow(dead_code)]

use crowdpose_kit::annotations::{BBox, ImageRecord, Keypoint, PersonInstance, Pose, Visibility};
use crowdpose_kit::augment::{CutoutInventory, Placement};
use crowdpose_kit::masks::{Bitmask, Cutout, CutoutKind};
use crowdpose_kit::raster::RasterImage;
use crowdpose_kit::synthgen::{self, PoseTemplate, SceneConfig, LIMBS};
use rand::Rng;

/// CrowdPose joint index -> public JTA joint index, written out by hand.
pub const JTA_FOR_CROWDPOSE: [usize; 14] = [8, 4, 9, 5, 10, 6, 19, 16, 20, 17, 21, 18, 0, 2];

pub fn labeled(k: &Keypoint) -> bool {
    !matches!(k.vis, Visibility::Unlabeled)
}

fn in_closed_box(b: &BBox, x: f64, y: f64) -> bool {
    b.x <= x && x <= b.x + b.w && b.y <= y && y <= b.y + b.h
}

/// CrowdIndex by explicit enumeration, as the correctly rounded exact fraction.
pub fn brute_crowd_index(rec: &ImageRecord) -> f64 {
    let (num, den) = rational_crowd_index(rec);
    f64::min(num as f64 / den as f64, 1.0)
}

/// Same quantity as an exact fraction `(num, den)` before the clamp.
pub fn rational_crowd_index(rec: &ImageRecord) -> (u128, u128) {
    fn gcd(a: u128, b: u128) -> u128 {
        if b == 0 { a } else { gcd(b, a % b) }
    }
    let (mut num, mut den) = (0u128, 1u128);
    let n = rec.persons.len() as u128;
    for (i, p) in rec.persons.iter().enumerate() {
        let own = p.pose.keypoints.iter().filter(|k| labeled(k) && in_closed_box(&p.bbox, k.x, k.y)).count() as u128;
        if own == 0 {
            continue;
        }
        let other: u128 = rec
            .persons
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .map(|(_, q)| q.pose.keypoints.iter().filter(|k| labeled(k) && in_closed_box(&p.bbox, k.x, k.y)).count() as u128)
            .sum();
        num = num * own + other * den;
        den *= own;
        let g = gcd(num, den);
        num /= g;
        den /= g;
    }
    den *= n;
    let g = gcd(num, den);
    (num / g, den / g)
}

/// Random scene on an integer grid so keypoints often sit exactly on box edges.
pub fn grid_scene<R: Rng>(rng: &mut R, id: &str, max_persons: usize) -> ImageRecord {
    let mut rec = ImageRecord::new(id, 64, 64);
    let n = rng.random_range(1..=max_persons);
    for _ in 0..n {
        let x = rng.random_range(0..40) as f64;
        let y = rng.random_range(0..40) as f64;
        let w = rng.random_range(1..24) as f64;
        let h = rng.random_range(1..24) as f64;
        let kps = (0..14)
            .map(|_| {
                let vis = match rng.random_range(0..10) {
                    0 => Visibility::Unlabeled,
                    1 | 2 => Visibility::Occluded,
                    3 => Visibility::SelfOccluded,
                    _ => Visibility::Visible,
                };
                // Mostly inside the own box, sometimes anywhere.
                let (kx, ky) = if rng.random_bool(0.7) {
                    (x + rng.random_range(0..=w as u32) as f64, y + rng.random_range(0..=h as u32) as f64)
                } else {
                    (rng.random_range(0..64) as f64, rng.random_range(0..64) as f64)
                };
                Keypoint::new(kx, ky, vis)
            })
            .collect();
        rec.persons.push(PersonInstance::new(BBox::new(x, y, w, h), Pose::new(kps)));
    }
    rec
}

/// OKS straight from its definition; `None` when the ground truth has no labeled keypoint.
pub fn reference_oks(pred: &Pose, gt: &Pose, area: f64, sigmas: &[f64]) -> Option<f64> {
    let mut sum = 0.0;
    let mut count = 0;
    for (i, g) in gt.keypoints.iter().enumerate() {
        if !labeled(g) {
            continue;
        }
        count += 1;
        let p = pred.keypoints[i];
        let (dx, dy) = (p.x - g.x, p.y - g.y);
        let kappa = 2.0 * sigmas[i];
        let e = (-(dx * dx + dy * dy) / (2.0 * area * kappa * kappa)).exp();
        if e.is_finite() {
            sum += e;
        }
    }
    (count > 0).then(|| sum / count as f64)
}

/// Score-ordered greedy matching written independently of the library.
pub fn reference_match(preds: &[PersonInstance], gts: &[PersonInstance], threshold: f64, sigmas: &[f64]) -> Vec<Option<usize>> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    // Stable: equal scores keep input order.
    order.sort_by(|&a, &b| preds[b].score.unwrap().partial_cmp(&preds[a].score.unwrap()).unwrap());
    let mut used = vec![false; gts.len()];
    let mut result = vec![None; preds.len()];
    for p in order {
        let mut pick: Option<usize> = None;
        let mut pick_oks = f64::NEG_INFINITY;
        for g in 0..gts.len() {
            if used[g] {
                continue;
            }
            let Some(o) = reference_oks(&preds[p].pose, &gts[g].pose, gts[g].bbox.area(), sigmas) else {
                continue;
            };
            if o >= threshold && o > pick_oks {
                pick = Some(g);
                pick_oks = o;
            }
        }
        if let Some(g) = pick {
            used[g] = true;
            result[p] = Some(g);
        }
    }
    result
}

/// Random ground truths plus jittered, dropped and spurious predictions with tied scores.
pub fn matching_scene<R: Rng>(rng: &mut R) -> (Vec<PersonInstance>, Vec<PersonInstance>) {
    let n_gt = rng.random_range(0..=5);
    let mut gts = Vec::new();
    for _ in 0..n_gt {
        let x = rng.random_range(0.0..200.0);
        let y = rng.random_range(0.0..200.0);
        let w = rng.random_range(20.0..80.0);
        let h = rng.random_range(20.0..80.0);
        let all_unlabeled = rng.random_bool(0.05);
        let kps = (0..14)
            .map(|_| {
                if all_unlabeled || rng.random_bool(0.1) {
                    Keypoint::unlabeled()
                } else {
                    Keypoint::new(x + rng.random_range(0.0..w), y + rng.random_range(0.0..h), Visibility::Visible)
                }
            })
            .collect();
        gts.push(PersonInstance::new(BBox::new(x, y, w, h), Pose::new(kps)));
    }
    let mut preds = Vec::new();
    for g in &gts {
        if rng.random_bool(0.2) {
            continue;
        }
        let noise = rng.random_range(0.0..0.3) * g.bbox.area().sqrt();
        let kps = g
            .pose
            .keypoints
            .iter()
            .map(|k| {
                let (x, y) = if labeled(k) { (k.x, k.y) } else { (g.bbox.x, g.bbox.y) };
                Keypoint::new(
                    x + rng.random_range(-1.0..1.0) * noise,
                    y + rng.random_range(-1.0..1.0) * noise,
                    Visibility::Visible,
                )
            })
            .collect();
        preds.push(PersonInstance::new(g.bbox, Pose::new(kps)));
    }
    for _ in 0..rng.random_range(0..3) {
        let kps = (0..14)
            .map(|_| Keypoint::new(rng.random_range(0.0..260.0), rng.random_range(0.0..260.0), Visibility::Visible))
            .collect();
        preds.push(PersonInstance::new(BBox::new(0.0, 0.0, 10.0, 10.0), Pose::new(kps)));
    }
    // Shuffle and give coarse scores so ties happen.
    for i in (1..preds.len()).rev() {
        let j = rng.random_range(0..=i);
        preds.swap(i, j);
    }
    for p in &mut preds {
        p.score = Some(rng.random_range(0..5) as f64 / 4.0);
    }
    (preds, gts)
}

/// Pixels a set of placements paints, recomputed from the cutouts' alpha.
pub fn placement_coverage(width: u32, height: u32, placements: &[Placement], inventory: &CutoutInventory) -> Bitmask {
    let mut out = Bitmask::new(width, height);
    for p in placements {
        let cut: &Cutout = match p.kind {
            CutoutKind::Object => &inventory.objects[p.cutout_index],
            _ => &inventory.persons[p.cutout_index],
        };
        let x0 = p.dst_x.floor() as i64;
        let y0 = p.dst_y.floor() as i64;
        let w = (p.dst_w.round() as i64).max(1);
        let h = (p.dst_h.round() as i64).max(1);
        for ty in 0..height as i64 {
            if ty < y0 || ty >= y0 + h {
                continue;
            }
            for tx in 0..width as i64 {
                if tx < x0 || tx >= x0 + w {
                    continue;
                }
                let sx = p.src_rect.x + (tx - x0) * p.src_rect.w as i64 / w;
                let sy = p.src_rect.y + (ty - y0) * p.src_rect.h as i64 / h;
                if cut.raster.pixel(sx as u32, sy as u32)[3] > 0 {
                    out.set(tx as u32, ty as u32, true);
                }
            }
        }
    }
    out
}

/// Expected flag of one keypoint after pasting, by direct pixel lookup.
pub fn expected_flag(before: Visibility, x: f64, y: f64, covered: &Bitmask) -> Visibility {
    let hit = covered.get_signed(x.floor() as i64, y.floor() as i64);
    match before {
        Visibility::Visible | Visibility::SelfOccluded if hit => Visibility::Occluded,
        v => v,
    }
}

/// Blobby object cutouts with holes, plus person cutouts lifted from rendered scenes.
pub fn toy_inventory(seed: u64) -> CutoutInventory {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut objects = Vec::new();
    for _ in 0..6 {
        let (w, h) = (rng.random_range(12..48u32), rng.random_range(12..48u32));
        let colour = [rng.random(), rng.random(), rng.random(), 255u8];
        let mut raster = RasterImage::new(w, h, [0, 0, 0, 0]);
        let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
        let hole = (rng.random_range(0.0..cx), rng.random_range(0.0..cy));
        for y in 0..h {
            for x in 0..w {
                let (u, v) = ((x as f64 + 0.5 - cx) / cx, (y as f64 + 0.5 - cy) / cy);
                let in_hole = (x as f64 - hole.0).abs() < 3.0 && (y as f64 - hole.1).abs() < 3.0;
                if u * u + v * v <= 1.0 && !in_hole {
                    raster.set_pixel(x, y, colour);
                }
            }
        }
        objects.push(Cutout {
            raster,
            src_bbox: BBox::new(0.0, 0.0, w as f64, h as f64),
            kind: CutoutKind::Object,
            keypoints: None,
        });
    }
    let mut persons = Vec::new();
    let cfg = SceneConfig {
        person_count_range: [1, 1],
        ..SceneConfig::default()
    };
    let templates = PoseTemplate::builtin();
    for _ in 0..4 {
        let scene = synthgen::generate_scene(&mut rng, &cfg, &templates).expect("scene");
        let mut mask = Bitmask::new(cfg.image_w, cfg.image_h);
        for y in 0..cfg.image_h {
            for x in 0..cfg.image_w {
                mask.set(x, y, scene.rendered.surfaces.get(x, y) != 0);
            }
        }
        let kps = &scene.record.persons[0].pose.keypoints;
        persons.push(crowdpose_kit::masks::extract_person_cutout(&scene.rendered.raster, &mask, kps).expect("person cutout"));
    }
    CutoutInventory { objects, persons }
}

/// Flag a keypoint should carry given the stored surface buffer of its scene.
///
/// `rank_of[i]` is person `i`'s depth rank and `left_near[i]` its facing.
pub fn flag_from_surfaces(surface: Option<u16>, person: usize, k: usize, rank_of: &[usize], left_near: &[bool]) -> Visibility {
    let Some(s) = surface else {
        return Visibility::Unlabeled;
    };
    if s == 0 {
        return Visibility::Visible;
    }
    let stride = 3 * LIMBS.len() as u32;
    let front_rank = (s as u32 - 1) / stride;
    let own_rank = rank_of[person] as u32;
    if front_rank < own_rank {
        return Visibility::Occluded;
    }
    let own_min = LIMBS
        .iter()
        .enumerate()
        .filter(|(_, (a, b, _))| *a == k || *b == k)
        .map(|(l, (_, _, side))| {
            let layer = match side {
                synthgen::LimbSide::Torso => 1,
                synthgen::LimbSide::Left => if left_near[person] { 0 } else { 2 },
                synthgen::LimbSide::Right => if left_near[person] { 2 } else { 0 },
            };
            1 + own_rank * stride + layer * LIMBS.len() as u32 + l as u32
        })
        .min()
        .unwrap();
    if (s as u32) < own_min {
        Visibility::SelfOccluded
    } else {
        Visibility::Visible
    }
}
