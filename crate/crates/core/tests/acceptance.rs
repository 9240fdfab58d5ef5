//! Acceptance suite: one line per criterion, non-zero exit on any failure.
//!
//! Run with `cargo test --release --test acceptance`.

mod common;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use crowdpose_kit::annotations::{
    convert_dataset, parse_dataset, BBox, Dataset, ImageRecord, InputFormat, Keypoint, KeypointMapping,
    PersonInstance, Pose, PoseSchema, Visibility,
};
use crowdpose_kit::augment::{apply_augmentation, AugmentConfig, AugmentMethod};
use crowdpose_kit::cli::{read_manifest, sha256_hex};
use crowdpose_kit::crowd_metrics::{bin_index, crowd_index, partition, CrowdLevel};
use crowdpose_kit::evaluator::{eval_by_crowding, match_greedy, OksConfig};
use crowdpose_kit::heatmaps::{self, bbox_to_crop, decode, encode, DEFAULT_CONF_THRESHOLD, DEFAULT_SIGMA};
use crowdpose_kit::masks::CutoutKind;
use crowdpose_kit::occloss::{
    fit_direct, grad_check, loss, random_pair, stability_bound, LossConfig, DEFAULT_FD_STEP,
};
use crowdpose_kit::raster::GrayImage16;
use crowdpose_kit::rng::substream;
use crowdpose_kit::synthgen::{generate_corpus, generate_scene, CorpusConfig, PoseTemplate, SceneConfig};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("loss gradient check", c1_grad_check),
        ("alpha-ratio identity", c2_alpha_ratio),
        ("direct-fit convergence", c3_direct_fit),
        ("heatmap roundtrip", c4_heatmap_roundtrip),
        ("CrowdIndex oracle", c5_crowd_index),
        ("augmentation flag oracle", c6_augmentation),
        ("evaluator sanity", c7_evaluator),
        ("synthetic corpus targeting", c8_corpus),
        ("determinism", c9_determinism),
        ("JTA to CrowdPose conversion", c10_conversion),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        let tag = if result.pass { "PASS" } else { "FAIL" };
        if !result.pass {
            failed += 1;
        }
        println!(
            "[{tag}] {}. {name}: {} ({:.1} s)",
            i + 1,
            result.detail,
            start.elapsed().as_secs_f64()
        );
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

fn c1_grad_check() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for (i, alpha) in [0.5, 1.5, 3.0].into_iter().enumerate() {
        let cfg = LossConfig::new(3).with_alpha(alpha);
        let err = grad_check(&cfg, 100, DEFAULT_FD_STEP, 1000 + i as u64).expect("grad check runs");
        worst = worst.max(err);
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst < 1e-5 && secs < 30.0,
        format!("max rel err {worst:.2e} (< 1e-5), K=3 16x12, alpha in {{0.5, 1.5, 3}}, 100 trials each, {secs:.2} s (< 30 s)"),
    )
}

fn c2_alpha_ratio() -> Outcome {
    let (k, h, w) = (3, 16, 12);
    let cfg = LossConfig::new(k);
    let mut r = substream(2, "alpha_ratio");
    let mut worst = 0.0f64;
    for _ in 0..100 {
        // Target holds a blob in one branch; prediction puts the identical
        // blob in the other branch. Swapping roles mirrors the construction.
        let ch = r.random_range(0..k);
        let mut blob = vec![0.0; h * w];
        for v in blob.iter_mut() {
            *v = r.random::<f64>();
        }
        let mut occ_target = heatmaps::HeatmapPair::zeros(k, h, w);
        occ_target.occluded.channel_mut(ch).copy_from_slice(&blob);
        let mut vis_pred = heatmaps::HeatmapPair::zeros(k, h, w);
        vis_pred.visible.channel_mut(ch).copy_from_slice(&blob);
        // Occluded keypoint predicted as visible, and vice versa.
        let missed_occluded = loss(&vis_pred, &occ_target, &cfg).unwrap();
        let missed_visible = loss(&occ_target, &vis_pred, &cfg).unwrap();
        let occ_part = cfg.alpha * missed_occluded.occluded_term;
        let vis_part = missed_occluded.visible_term;
        let ratio = occ_part / vis_part;
        worst = worst.max((ratio - 1.5).abs() / 1.5);
        // Single-branch misses against an empty prediction.
        let zero = heatmaps::HeatmapPair::zeros(k, h, w);
        let occ_only = loss(&zero, &occ_target, &cfg).unwrap().total;
        let vis_only = loss(&zero, &vis_pred, &cfg).unwrap().total;
        worst = worst.max((occ_only / vis_only - 1.5).abs() / 1.5);
        assert_eq!(missed_occluded.total, missed_visible.total);
    }
    outcome(
        worst <= 1e-12,
        format!("max relative deviation of loss ratio from alpha=1.5: {worst:.1e} (<= 1e-12) over 100 constructions"),
    )
}

fn c3_direct_fit() -> Outcome {
    let (k, h, w) = (2, 16, 12);
    let cfg = LossConfig::new(k);
    let mut r = substream(3, "direct_fit");
    let g = random_pair(&mut r, k, h, w);
    let init = random_pair(&mut r, k, h, w);
    let lr = 0.25 * stability_bound(&cfg, h, w);
    let fit = fit_direct(&g, &init, &cfg, lr, 5000).expect("fit runs");
    let t = &fit.trajectory;
    let monotone = t.windows(2).all(|p| p[1] <= p[0]);
    let reached = t.iter().position(|&l| l < 1e-6);
    let last = *t.last().unwrap();
    outcome(
        monotone && reached.is_some(),
        format!(
            "loss {:.3e} -> {:.3e}; < 1e-6 after {} steps (limit 5000); monotone: {monotone}",
            t[0],
            last,
            reached.map_or("never".to_string(), |s| s.to_string())
        ),
    )
}

fn random_pose_box<R: Rng>(r: &mut R) -> BBox {
    // Crop scale 192 / expanded width >= 1: the expanded 3:4 box is at most 192 x 256.
    let eh = r.random_range(48.0..256.0);
    let (w, h) = if r.random_bool(0.5) {
        (eh * 0.75 * r.random_range(0.3..1.0), eh)
    } else {
        (eh * 0.75, eh * r.random_range(0.3..1.0))
    };
    BBox::new(r.random_range(0.0..1600.0), r.random_range(0.0..800.0), w, h)
}

fn c4_heatmap_roundtrip() -> Outcome {
    let mut r = substream(4, "heatmap_roundtrip");
    let mut worst = 0.0f64;
    let (mut checked, mut low_conf, mut exclusive_fail, mut bad) = (0usize, 0usize, 0usize, 0usize);
    for _ in 0..1000 {
        let bbox = random_pose_box(&mut r);
        let pose = Pose::new(
            (0..14)
                .map(|_| {
                    let vis = match r.random_range(0..8) {
                        0 => Visibility::Unlabeled,
                        1 | 2 => Visibility::Occluded,
                        3 => Visibility::SelfOccluded,
                        _ => Visibility::Visible,
                    };
                    // Some keypoints fall outside the crop on purpose.
                    let x = bbox.x + bbox.w * r.random_range(-0.3..1.3);
                    let y = bbox.y + bbox.h * r.random_range(-0.2..1.2);
                    Keypoint::new(x, y, vis)
                })
                .collect(),
        );
        let t = bbox_to_crop(&bbox);
        let enc = encode(&pose, &t, DEFAULT_SIGMA);
        for ch in 0..14 {
            let v = enc.pair.visible.channel(ch).iter().any(|&x| x != 0.0);
            let o = enc.pair.occluded.channel(ch).iter().any(|&x| x != 0.0);
            if v && o {
                exclusive_fail += 1;
            }
        }
        let dec = decode(&enc.pair, &t, DEFAULT_CONF_THRESHOLD);
        for (i, kp) in pose.keypoints.iter().enumerate() {
            if !enc.in_bounds[i] || !kp.vis.is_labeled() {
                continue;
            }
            let d = &dec.keypoints[i];
            if d.confidence < DEFAULT_CONF_THRESHOLD {
                low_conf += 1;
                continue;
            }
            checked += 1;
            let err = (d.x - kp.x).abs().max((d.y - kp.y).abs());
            worst = worst.max(err);
            if err > 2.0 {
                bad += 1;
            }
        }
    }
    outcome(
        bad == 0 && exclusive_fail == 0 && checked > 5000,
        format!(
            "{checked} in-crop keypoints, worst max-norm error {worst:.3} px (<= 2), {bad} over bound, \
             {low_conf} below confidence; exclusivity violations {exclusive_fail}/14000"
        ),
    )
}

fn c5_crowd_index() -> Outcome {
    let mut r = substream(5, "crowd_index");
    let mut mismatches = 0;
    let mut rational_off = 0;
    for i in 0..1000 {
        let rec = common::grid_scene(&mut r, &format!("s{i}"), 8);
        let got = crowd_index(&rec).unwrap();
        if got.to_bits() != common::brute_crowd_index(&rec).to_bits() {
            mismatches += 1;
        }
        let (num, den) = common::rational_crowd_index(&rec);
        let exact = (num as f64 / den as f64).min(1.0);
        if (got - exact).abs() > 1e-12 {
            rational_off += 1;
        }
    }
    // Two persons with ten own keypoints each; `into_a` of B's keypoints lie
    // in A's box and `into_b` of A's lie in B's, so C = (into_a + into_b) / 20.
    let pair = |into_a: usize, into_b: usize| {
        let mut rec = ImageRecord::new("b", 200, 20);
        let boxes = [BBox::new(0.0, 0.0, 20.0, 10.0), BBox::new(100.0, 0.0, 20.0, 10.0)];
        for (me, foreign) in [(0usize, into_b), (1, into_a)] {
            let other = 1 - me;
            let mut kps: Vec<Keypoint> = (0..10)
                .map(|j| Keypoint::new(boxes[me].x + 1.0 + j as f64, 5.0, Visibility::Visible))
                .collect();
            kps.extend((0..foreign).map(|j| Keypoint::new(boxes[other].x + 1.0 + j as f64, 8.0, Visibility::Visible)));
            rec.persons.push(PersonInstance::new(boxes[me], Pose::new(kps)));
        }
        rec
    };
    let c_med = crowd_index(&pair(2, 0)).unwrap();
    let c_hard = crowd_index(&pair(8, 8)).unwrap();
    let levels_ok = partition(0.1) == CrowdLevel::Medium
        && partition(0.8) == CrowdLevel::Hard
        && partition(0.1f64.next_down()) == CrowdLevel::Easy
        && partition(0.8f64.next_down()) == CrowdLevel::Medium
        && c_med == 0.1
        && partition(c_med) == CrowdLevel::Medium
        && c_hard == 0.8
        && partition(c_hard) == CrowdLevel::Hard;
    outcome(
        mismatches == 0 && rational_off == 0 && levels_ok,
        format!(
            "bitwise mismatches vs brute force {mismatches}/1000, vs exact fraction {rational_off}/1000; \
             C=0.1 scene -> {:?}, C=0.8 scene -> {:?}",
            partition(c_med),
            partition(c_hard)
        ),
    )
}

fn c6_augmentation() -> Outcome {
    let inventory = common::toy_inventory(6);
    let templates = PoseTemplate::builtin();
    let methods: Vec<AugmentMethod> = AugmentMethod::ALL.into_iter().filter(|m| *m != AugmentMethod::None).collect();
    let scene_cfg = SceneConfig {
        person_count_range: [1, 6],
        ..SceneConfig::default()
    };
    let results: Vec<_> = (0..1000u64)
        .into_par_iter()
        .map(|i| {
            let mut r = crowdpose_kit::rng::substream_indexed(6, "augment_acceptance", i);
            let scene = generate_scene(&mut r, &scene_cfg, &templates).unwrap();
            let method = methods[i as usize % methods.len()];
            let cfg = AugmentConfig::new(method, i);
            let target = r.random_range(0..scene.record.persons.len());
            let out = apply_augmentation(&mut r, &scene.rendered.raster, &scene.record, target, &cfg, &inventory).unwrap();
            let cov = common::placement_coverage(scene.record.width, scene.record.height, &out.log.placements, &inventory);
            let mut agree = 0usize;
            let mut total = 0usize;
            for (before, after) in scene.record.persons.iter().zip(&out.record.persons) {
                for (kb, ka) in before.pose.keypoints.iter().zip(&after.pose.keypoints) {
                    total += 1;
                    if common::expected_flag(kb.vis, kb.x, kb.y, &cov) == ka.vis {
                        agree += 1;
                    }
                }
            }
            let bbox = scene.record.persons[target].bbox;
            let object_fracs: Vec<f64> = out
                .log
                .placements
                .iter()
                .filter(|p| p.kind == CutoutKind::Object)
                .map(|p| p.area() / bbox.area())
                .collect();
            let central_hits = out
                .log
                .placements
                .iter()
                .filter(|p| p.kind == CutoutKind::FullBody)
                .filter(|p| {
                    let (cx, cy) = p.center();
                    let (x0, x1) = (bbox.x + 0.25 * bbox.w, bbox.x + 0.75 * bbox.w);
                    let (y0, y1) = (bbox.y + 0.25 * bbox.h, bbox.y + 0.75 * bbox.h);
                    x0 <= cx && cx <= x1 && y0 <= cy && cy <= y1
                })
                .count();
            let full = out.log.placements.iter().filter(|p| p.kind == CutoutKind::FullBody).count();
            (agree, total, object_fracs, central_hits, full, out.log.flag_changes.len())
        })
        .collect();
    let agree: usize = results.iter().map(|r| r.0).sum();
    let total: usize = results.iter().map(|r| r.1).sum();
    let fracs: Vec<f64> = results.iter().flat_map(|r| r.2.iter().copied()).collect();
    let central: usize = results.iter().map(|r| r.3).sum();
    let full: usize = results.iter().map(|r| r.4).sum();
    let changed: usize = results.iter().map(|r| r.5).sum();
    let lo = fracs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = fracs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let in_range = fracs.iter().all(|f| (0.08 - 1e-12..=0.70 + 1e-12).contains(f));
    outcome(
        agree == total && in_range && lo < 0.10 && hi > 0.68 && central == 0 && full > 0 && changed > 0,
        format!(
            "flags agree {agree}/{total} ({changed} changed) over 1000 targets; object area fraction \
             [{lo:.4}, {hi:.4}] over {} placements (need min < 0.10, max > 0.68); full-body centres \
             in central region {central}/{full}",
            fracs.len()
        ),
    )
}

fn jittered(gt: &Dataset, sigma: f64, seed: u64) -> Dataset {
    let mut out = gt.clone();
    out.images.par_iter_mut().for_each(|im| {
        let mut r = substream(seed, &im.id);
        for p in &mut im.persons {
            let sd = sigma * p.bbox.area().sqrt();
            let normal = Normal::new(0.0, sd.max(f64::MIN_POSITIVE)).unwrap();
            for k in &mut p.pose.keypoints {
                if sigma > 0.0 {
                    k.x += normal.sample(&mut r);
                    k.y += normal.sample(&mut r);
                }
            }
            p.score = Some(r.random_range(0.5..1.0));
        }
    });
    out
}

fn c7_evaluator() -> Outcome {
    let scene = SceneConfig {
        seed: 7,
        ..SceneConfig::default()
    };
    let corpus = generate_corpus(&CorpusConfig::uniform(300, 10, scene), &PoseTemplate::builtin()).unwrap();
    let gt = corpus.dataset;
    let cfg = OksConfig::uniform(14);
    let perfect = eval_by_crowding(&jittered(&gt, 0.0, 1), &gt, &cfg).unwrap();
    let columns = [Some(perfect.ap), perfect.ap_easy, perfect.ap_medium, perfect.ap_hard];
    let perfect_ok = columns.iter().all(|c| c.is_some_and(|v| v == 1.0));

    let mut r = substream(7, "matcher");
    let mut disagreements = 0;
    for _ in 0..500 {
        let (preds, gts) = common::matching_scene(&mut r);
        for &t in &cfg.thresholds {
            let ours = match_greedy(&preds, &gts, t, &cfg).unwrap().pred_to_gt;
            if ours != common::reference_match(&preds, &gts, t, &cfg.sigmas) {
                disagreements += 1;
            }
        }
    }

    let aps: Vec<f64> = [0.01, 0.05, 0.1]
        .iter()
        .enumerate()
        .map(|(i, &s)| eval_by_crowding(&jittered(&gt, s, 10 + i as u64), &gt, &cfg).unwrap().ap)
        .collect();
    let decreasing = aps.windows(2).all(|w| w[1] < w[0]);
    outcome(
        perfect_ok && disagreements == 0 && decreasing,
        format!(
            "perfect AP/Easy/Med/Hard = {}; matcher disagreements {disagreements}/5000 (500 scenes x 10 thresholds); \
             AP at jitter 0.01/0.05/0.1 = {:.4}/{:.4}/{:.4}",
            columns.iter().map(|c| c.map_or("-".into(), |v| format!("{v:.3}"))).collect::<Vec<_>>().join("/"),
            aps[0],
            aps[1],
            aps[2]
        ),
    )
}

fn c8_corpus() -> Outcome {
    let scene = SceneConfig {
        seed: 8,
        ..SceneConfig::default()
    };
    let corpus = generate_corpus(&CorpusConfig::uniform(2000, 10, scene), &PoseTemplate::builtin()).unwrap();
    // Read everything back from the serialized document, as a consumer would.
    let json = corpus.dataset.to_native_json();
    let ds = parse_dataset(json.as_bytes(), InputFormat::Native).unwrap();
    let scenes = ds.meta["scenes"].as_array().unwrap();
    let mut counts = [0usize; 10];
    let mut stored_mismatch = 0;
    for (im, meta) in ds.images.iter().zip(scenes) {
        let c = crowd_index(im).unwrap();
        counts[bin_index(c, 10)] += 1;
        if meta["crowd_index"].as_f64().unwrap().to_bits() != c.to_bits() || meta["id"] != im.id.as_str() {
            stored_mismatch += 1;
        }
    }
    let freqs: Vec<f64> = counts.iter().map(|&c| c as f64 / 2000.0).collect();
    let worst_dev = freqs.iter().map(|f| (f - 0.1).abs()).fold(0.0, f64::max);

    let (agree, total): (usize, usize) = ds
        .images
        .par_iter()
        .zip(corpus.geometries.par_iter())
        .zip(scenes.par_iter())
        .map(|((im, geom), meta)| {
            let buffer = GrayImage16::decode_pam(&geom.render().surfaces.to_pam_bytes()).unwrap();
            let order: Vec<usize> = meta["depth_order"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap() as usize).collect();
            let mut rank_of = vec![0; order.len()];
            for (rank, &p) in order.iter().enumerate() {
                rank_of[p] = rank;
            }
            let left_near: Vec<bool> = meta["left_near"].as_array().unwrap().iter().map(|v| v.as_bool().unwrap()).collect();
            let mut agree = 0;
            let mut total = 0;
            for (pi, p) in im.persons.iter().enumerate() {
                for (k, kp) in p.pose.keypoints.iter().enumerate() {
                    let (x, y) = (kp.x.floor(), kp.y.floor());
                    let inside = x >= 0.0 && y >= 0.0 && x < im.width as f64 && y < im.height as f64;
                    let s = inside.then(|| buffer.get(x as u32, y as u32));
                    total += 1;
                    if common::flag_from_surfaces(s, pi, k, &rank_of, &left_near) == kp.vis {
                        agree += 1;
                    }
                }
            }
            (agree, total)
        })
        .reduce(|| (0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    outcome(
        worst_dev <= 0.03 && stored_mismatch == 0 && agree == total,
        format!(
            "bin counts {counts:?}, worst deviation {worst_dev:.4} (<= 0.03); stored CrowdIndex mismatches \
             {stored_mismatch}/2000; depth-buffer flag agreement {agree}/{total}"
        ),
    )
}

fn run_cli(args: &[&str]) -> std::process::Output {
    let out = Command::new(env!("CARGO_BIN_EXE_crowdpose-kit")).args(args).output().expect("binary runs");
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// Runs gen, augment and eval into `dir`; returns every output digest by step.
fn pipeline(dir: &Path, jobs: &str, inventory: &Path, pred: Option<&Path>) -> BTreeMap<String, String> {
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let (gen, aug, eval) = (dir.join("gen"), dir.join("aug"), dir.join("eval"));
    let gt = gen.join("annotations.json");
    run_cli(&["--jobs", jobs, "--seed", "9", "gen", "--scenes", "40", "--out", &s(&gen)]);
    run_cli(&[
        "--jobs", jobs, "--seed", "9", "augment", "--method", "full_and_objects", "--inventory", &s(inventory),
        "--in", &s(&gt), "--images", &s(&gen.join("images")), "--out", &s(&aug),
    ]);
    let pred_path = match pred {
        Some(p) => p.to_path_buf(),
        None => {
            let ds = parse_dataset(&std::fs::read(&gt).unwrap(), InputFormat::Native).unwrap();
            let p = dir.join("pred.json");
            std::fs::write(&p, jittered(&ds, 0.05, 99).to_native_json()).unwrap();
            p
        }
    };
    std::fs::create_dir_all(&eval).unwrap();
    run_cli(&[
        "--jobs", jobs, "eval", "--gt", &s(&gt), "--pred", &s(&pred_path), "--out", &s(&eval.join("report.json")),
        "--csv", &s(&eval.join("report.csv")),
    ]);
    let mut digests = BTreeMap::new();
    for step in ["gen", "aug", "eval"] {
        let manifest = read_manifest(&dir.join(step).join("manifest.json")).unwrap();
        for (rel, digest) in manifest.outputs {
            let path = dir.join(step).join(&rel);
            let actual = sha256_hex(&std::fs::read(&path).unwrap());
            assert_eq!(actual, digest, "manifest digest of {}", path.display());
            digests.insert(format!("{step}/{rel}"), digest);
        }
    }
    digests
}

fn c9_determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let inventory = tmp.path().join("inventory");
    common::toy_inventory(9).save_dir(&inventory).unwrap();
    let first = pipeline(&tmp.path().join("a"), "1", &inventory, None);
    let pred = tmp.path().join("a").join("pred.json");
    let second = pipeline(&tmp.path().join("b"), "8", &inventory, Some(&pred));
    let third = pipeline(&tmp.path().join("c"), "8", &inventory, Some(&pred));
    let differing = first
        .iter()
        .filter(|(k, v)| second.get(*k) != Some(v) || third.get(*k) != Some(v))
        .count();
    let same_keys = first.keys().eq(second.keys()) && first.keys().eq(third.keys());
    outcome(
        differing == 0 && same_keys && first.len() > 80,
        format!(
            "{} output digests from gen/augment/eval; differing across --jobs 1, --jobs 8 and a rerun: {differing}",
            first.len()
        ),
    )
}

fn c10_conversion() -> Outcome {
    let mut r = substream(10, "jta_fixture");
    let mut rows: Vec<[f64; 10]> = Vec::new();
    for frame in 0..100 {
        for person in 0..10 {
            let mut joints: Vec<usize> = (0..22).collect();
            // Rows arrive in arbitrary joint order.
            for i in (1..22).rev() {
                joints.swap(i, r.random_range(0..=i));
            }
            for j in joints {
                let x = r.random::<f64>() * 1920.0;
                let y = r.random::<f64>() * 1080.0;
                let occ = r.random_bool(0.3) as u8 as f64;
                let selfocc = r.random_bool(0.3) as u8 as f64;
                rows.push([frame as f64, person as f64, j as f64, x, y, r.random(), r.random(), r.random(), occ, selfocc]);
            }
        }
    }
    let fixture = serde_json::to_string(&rows).unwrap();
    let jta = parse_dataset(fixture.as_bytes(), InputFormat::JtaLike).unwrap();
    let converted = convert_dataset(&jta, PoseSchema::crowdpose(), &KeypointMapping::jta_to_crowdpose()).unwrap();
    let reread = parse_dataset(converted.to_native_json().as_bytes(), InputFormat::Native).unwrap();

    let mut lookup: BTreeMap<(i64, i64, usize), &[f64; 10]> = BTreeMap::new();
    for row in &rows {
        lookup.insert((row[0] as i64, row[1] as i64, row[2] as usize), row);
    }
    let (mut coords_ok, mut flags_ok, mut total) = (0usize, 0usize, 0usize);
    let mut poses = 0;
    for im in &reread.images {
        let frame: i64 = im.id.trim_start_matches("frame_").parse().unwrap();
        for p in &im.persons {
            poses += 1;
            let pid = p.track_id.unwrap();
            assert_eq!(p.pose.len(), 14);
            for (k, kp) in p.pose.keypoints.iter().enumerate() {
                let row = lookup[&(frame, pid, common::JTA_FOR_CROWDPOSE[k])];
                total += 1;
                if kp.x.to_bits() == row[3].to_bits() && kp.y.to_bits() == row[4].to_bits() {
                    coords_ok += 1;
                }
                let want = match (row[8] != 0.0, row[9] != 0.0) {
                    (true, _) => Visibility::Occluded,
                    (false, true) => Visibility::SelfOccluded,
                    (false, false) => Visibility::Visible,
                };
                if kp.vis == want {
                    flags_ok += 1;
                }
            }
        }
    }
    let names_ok = reread.schema.keypoint_names == crowdpose_kit::annotations::CROWDPOSE_KEYPOINTS;
    outcome(
        poses == 1000 && coords_ok == total && flags_ok == total && names_ok,
        format!("{poses} poses; bitwise coordinates {coords_ok}/{total}; flags {flags_ok}/{total}; schema order ok: {names_ok}"),
    )
}
