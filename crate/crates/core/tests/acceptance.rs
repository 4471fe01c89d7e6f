//! One PASS/FAIL line per acceptance criterion. Every criterion runs even
//! when an earlier one fails; the test fails at the end if any did.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use nalgebra::{Rotation3, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use worldact::agent::{recall, run_agent, AgentConfig, CallLog, DiscoveryMode};
use worldact::assemble::icp::{best_by_residual, icp_candidates, IcpConfig};
use worldact::assemble::pose::rotation_angle_deg;
use worldact::assemble::{
    loss_gradient, refine_pose, render_manifest, AlignConfig, AlignProblem, AlignView, PlacementPose, SceneManifest,
};
use worldact::assets::ObjectAsset;
use worldact::backend::Backends;
use worldact::collision::{
    box_mesh, detect_planes, planarize, reconstruct_surface, sample_points, simplify, sphere_mesh, CollisionMesh,
    FaceClass, Orientation, Plane, PlaneHypothesis, RansacConfig, SamplingConfig, SurfaceConfig,
};
use worldact::config::{Paths, PipelineConfig};
use worldact::pipeline::{run, DecomposeManifest, RestoreManifest, RunOptions};
use worldact::raster::{Mask, RgbImage, ScalarImage};
use worldact::render::{render, splats, RenderOptions, Rasterizer};
use worldact::scene::ply::{decode_scene, encode_scene, load_scene, save_scene};
use worldact::scene::{split_by_labels, CameraFrame, GaussianPrimitive, GaussianScene, Trajectory};
use worldact::segment::{
    assign_objects, binarize, optimize_assignment, seg_gradient, seg_loss, set_iou, AssignmentField, MaskStack,
    SegmentationConfig, WeightCache,
};
use worldact::synth::{generate, oracle_brute_render, write_outputs, SynthScene, SynthSpec};

type Outcome = (bool, String);

fn report(n: usize, title: &str, f: impl FnOnce() -> Outcome) -> bool {
    let t = Instant::now();
    let (ok, detail) = match catch_unwind(AssertUnwindSafe(f)) {
        Ok(r) => r,
        Err(p) => {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            (false, format!("panicked: {msg}"))
        }
    };
    println!(
        "{} {n:>2} {title}: {detail} ({:.1} s)",
        if ok { "PASS" } else { "FAIL" },
        t.elapsed().as_secs_f64()
    );
    ok
}

fn random_scene(rng: &mut ChaCha8Rng, n: usize) -> GaussianScene {
    let prims = (0..n)
        .map(|_| {
            let c = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            let s = Vector3::new(rng.gen_range(0.02..0.3), rng.gen_range(0.02..0.3), rng.gen_range(0.02..0.3));
            let q = UnitQuaternion::from_euler_angles(
                rng.gen_range(-3.1..3.1),
                rng.gen_range(-1.5..1.5),
                rng.gen_range(-3.1..3.1),
            );
            let rgb = [rng.gen(), rng.gen(), rng.gen()];
            GaussianPrimitive::new(c, s, q, rng.gen_range(0.05..0.99), rgb)
        })
        .collect();
    GaussianScene::new(prims)
}

fn random_camera(rng: &mut ChaCha8Rng, size: u32, index: u32) -> CameraFrame {
    let yaw: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let eye = Vector3::new(3.5 * yaw.cos(), rng.gen_range(-1.0..1.5), 3.5 * yaw.sin());
    CameraFrame::look_at(eye, Vector3::zeros(), Vector3::y(), 55.0, size, size, index).unwrap()
}

fn max_diff(a: &RgbImage, b: &RgbImage) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .flat_map(|(p, q)| (0..3).map(move |k| (p[k] - q[k]).abs()))
        .fold(0.0, f64::max)
}

fn c1_renderer() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let opts = RenderOptions::default();
    let (mut worst, mut tiled_time) = (0.0f64, 0.0);
    for k in 0..20 {
        let n = rng.gen_range(1..=200);
        let scene = random_scene(&mut rng, n);
        let cam = random_camera(&mut rng, 64, k);
        let t = Instant::now();
        let tiled = render(&scene, &cam, &opts);
        tiled_time += t.elapsed().as_secs_f64();
        let brute = oracle_brute_render(&scene, &cam, &opts);
        worst = worst.max(max_diff(&tiled.color, &brute.color));
        let da = tiled.alpha.data().iter().zip(brute.alpha.data()).map(|(a, b)| (a - b).abs());
        worst = worst.max(da.fold(0.0, f64::max));
    }
    (
        worst <= 1e-5 && tiled_time < 5.0,
        format!("max |diff| {worst:.2e} (≤ 1e-5), tiled total {tiled_time:.2} s (< 5 s)"),
    )
}

fn c2_weights(s: &SynthScene) -> Outcome {
    let opts = RenderOptions::default();
    let sp = splats(&s.scene);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let frames = s.trajectory.frames();
    let per = 10_000usize.div_ceil(frames.len());
    let (mut worst, mut n) = (0.0f64, 0);
    for cam in frames {
        let r = Rasterizer::new(&sp, cam, &opts);
        let frame = r.render(&sp);
        let pixels: Vec<(usize, usize)> = (0..per)
            .map(|_| (rng.gen_range(0..cam.height as usize), rng.gen_range(0..cam.width as usize)))
            .collect();
        for rec in r.weights(&pixels).unwrap() {
            let mut acc = [0.0; 3];
            let mut wsum = 0.0;
            for &(i, w) in &rec.entries {
                let c = s.scene.primitives()[i].color();
                for k in 0..3 {
                    acc[k] += w * c[k];
                }
                wsum += w;
            }
            let got = frame.color.get(rec.pixel.0, rec.pixel.1);
            for k in 0..3 {
                worst = worst.max((acc[k] + (1.0 - wsum) * opts.background[k] - got[k]).abs());
            }
            n += 1;
        }
    }
    (worst <= 1e-6, format!("{n} pixels, max |diff| {worst:.2e} (≤ 1e-6)"))
}

fn c3_segmentation(s: &SynthScene) -> Outcome {
    let t = Instant::now();
    let cfg = SegmentationConfig::default();
    let cache = WeightCache::build(&s.scene, &s.trajectory, &RenderOptions::default());
    let mut fields = Vec::new();
    let mut ious = Vec::new();
    for (truth, stack) in s.objects.iter().zip(&s.masks) {
        let field = optimize_assignment(&cache, stack, &cfg).unwrap();
        let mut want = vec![false; s.scene.len()];
        for &i in &truth.members {
            want[i] = true;
        }
        ious.push(set_iou(&binarize(&field, cfg.tau), &want));
        fields.push(field);
    }
    let labeled = assign_objects(&s.scene, &fields, &cfg).unwrap();
    let split = split_by_labels(&labeled);
    let mut seen = vec![0u32; s.scene.len()];
    for &i in &split.background_indices {
        seen[i] += 1;
    }
    for (_, idx, _) in &split.objects {
        for &i in idx {
            seen[i] += 1;
        }
    }
    let partition = labeled.labels().len() == s.scene.len() && seen.iter().all(|&c| c == 1);
    let secs = t.elapsed().as_secs_f64();
    let min_iou = ious.iter().cloned().fold(1.0, f64::min);
    (
        min_iou >= 0.9 && partition && secs < 60.0 && cfg.max_iters <= 500,
        format!(
            "IoU {:?} (≥ 0.90), partition {partition}, {} iterations max, {secs:.1} s (< 60 s)",
            ious.iter().map(|v| (v * 1e4).round() / 1e4).collect::<Vec<_>>(),
            cfg.max_iters
        ),
    )
}

fn c4_seg_gradient() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cfg = SegmentationConfig {
        lambda: 0.7,
        ..Default::default()
    };
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let scene = random_scene(&mut rng, 20);
        let cams: Vec<CameraFrame> = (0..3).map(|k| random_camera(&mut rng, 24, k)).collect();
        let traj = Trajectory::new(cams.clone()).unwrap();
        let cache = WeightCache::build(&scene, &traj, &RenderOptions::default());
        let masks: BTreeMap<u32, Mask> = cams
            .iter()
            .map(|c| {
                let bits = (0..24 * 24).map(|p| (p % 24) < 12 + (p / 24) % 5).collect();
                (c.frame_index, Mask::from_vec(24, 24, bits).unwrap())
            })
            .collect();
        let stack = MaskStack::new(1, masks).unwrap();
        let scores: Vec<f64> = (0..20).map(|_| rng.gen_range(0.1..0.9)).collect();
        let g = seg_gradient(&cache, &stack, &cfg).unwrap();
        let h = 1e-4;
        let scale = g.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
        for i in 0..20 {
            let at = |d: f64| {
                let mut s = scores.clone();
                s[i] += d;
                seg_loss(&cache, &AssignmentField { object_id: 1, scores: s }, &stack, &cfg).unwrap()
            };
            let fd = (at(h) - at(-h)) / (2.0 * h);
            worst = worst.max((fd - g[i]).abs() / g[i].abs().max(1e-3 * scale));
        }
    }
    (worst <= 1e-5, format!("max relative error {worst:.2e} (≤ 1e-5)"))
}

fn c5_planes() -> Outcome {
    let (lo, hi) = (Vector3::new(-2.0, 0.0, -2.0), Vector3::new(2.0, 3.0, 2.0));
    let size = (hi - lo).max();
    let noise = Normal::new(0.0, 0.005 * size).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut pts: Vec<Vector3<f64>> = box_mesh(lo, hi).sample_surface(12_000, 5);
    for p in pts.iter_mut() {
        *p += Vector3::from_fn(|_, _| noise.sample(&mut rng));
    }
    let truth = [
        (Plane::new(Vector3::y(), 0.0), FaceClass::Floor),
        (Plane::new(-Vector3::y(), -3.0), FaceClass::Ceiling),
        (Plane::new(Vector3::x(), -2.0), FaceClass::Wall),
        (Plane::new(-Vector3::x(), -2.0), FaceClass::Wall),
        (Plane::new(Vector3::z(), -2.0), FaceClass::Wall),
        (Plane::new(-Vector3::z(), -2.0), FaceClass::Wall),
    ];
    let found = detect_planes(&pts, &RansacConfig::default()).unwrap();
    let (mut worst_deg, mut worst_off, mut classes_ok, mut matched) = (0.0f64, 0.0f64, true, 0);
    for (plane, class) in &truth {
        // both sides are oriented towards the room centre
        let gap = |h: &PlaneHypothesis| (1.0 - h.plane.normal.dot(&plane.normal)) + (h.plane.offset - plane.offset).abs();
        let best = found.iter().min_by(|a, b| gap(a).total_cmp(&gap(b)));
        let Some(h) = best else { continue };
        let deg = h.plane.normal.dot(&plane.normal).clamp(-1.0, 1.0).acos().to_degrees();
        let off = (h.plane.offset - plane.offset).abs() / size;
        if deg <= 2.0 && off <= 0.01 {
            matched += 1;
        }
        worst_deg = worst_deg.max(deg);
        worst_off = worst_off.max(off);
        classes_ok &= h.class == *class;
    }
    (
        matched == 6 && found.len() == 6 && classes_ok,
        format!(
            "{} planes, {matched}/6 matched, normal ≤ {worst_deg:.3}° (≤ 2°), offset ≤ {:.3}% (≤ 1%), classes {}",
            found.len(),
            100.0 * worst_off,
            if classes_ok { "all correct" } else { "WRONG" }
        ),
    )
}

/// A Gaussian blob covering a random closed shape.
fn random_solid(rng: &mut ChaCha8Rng) -> GaussianScene {
    let ext = Vector3::new(rng.gen_range(0.3..1.5), rng.gen_range(0.3..1.5), rng.gen_range(0.3..1.5));
    let shape = if rng.gen_bool(0.5) {
        box_mesh(-ext / 2.0, ext / 2.0)
    } else {
        let mut m = sphere_mesh(Vector3::zeros(), 0.5, 3);
        for v in m.vertices.iter_mut() {
            *v = v.component_mul(&ext);
        }
        m
    };
    let r = Rotation3::from_euler_angles(rng.gen_range(-3.0..3.0), rng.gen_range(-1.5..1.5), rng.gen_range(-3.0..3.0));
    let sigma = 0.01 * ext.max();
    let prims = shape
        .sample_surface(1500, rng.gen())
        .into_iter()
        .map(|p| GaussianPrimitive::isotropic(r * p, sigma, 0.9, [0.5; 3]))
        .collect();
    GaussianScene::new(prims)
}

fn random_hull(rng: &mut ChaCha8Rng) -> CollisionMesh {
    let n = 20;
    let cam = CameraFrame::look_at(Vector3::new(0.0, 0.0, -3.0), Vector3::zeros(), Vector3::y(), 40.0, n, n, 0).unwrap();
    let (cx, cy) = (rng.gen_range(6.0..14.0), rng.gen_range(6.0..14.0));
    let (ax, ay) = (rng.gen_range(2.0..7.0), rng.gen_range(2.0..7.0));
    let holes = rng.gen_range(0..4);
    let bits: Vec<bool> = (0..n * n)
        .map(|p| {
            let (r, c) = ((p / n) as f64 + 0.5, (p % n) as f64 + 0.5);
            ((c - cx) / ax).powi(2) + ((r - cy) / ay).powi(2) <= 1.0 && (p * 7 + holes) % 11 != 0
        })
        .collect();
    let mask = Mask::from_vec(n as usize, n as usize, bits).unwrap();
    let relief = rng.gen_range(0.0..0.4);
    let depth =
        ScalarImage::from_vec(n as usize, n as usize, (0..n * n).map(|p| 3.0 + relief * ((p % 5) as f64 / 5.0)).collect())
            .unwrap();
    let rgb = RgbImage::filled(n as usize, n as usize, [0.5; 3]);
    worldact::assets::hull::visual_hull(&rgb, &mask, &depth, &cam, &Vector3::y(), &Default::default())
        .map(|(_, m)| m)
        .unwrap_or_default()
}

fn c6_watertight() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (mut checked, mut closed) = (0, 0);
    let mut failures = Vec::new();
    for case in 0..50 {
        let scene = random_solid(&mut rng);
        let sampling = SamplingConfig {
            seed: case,
            orientation: Orientation::Outward,
            ..Default::default()
        };
        let pts = sample_points(&scene, 4000, &sampling).unwrap();
        let surface = SurfaceConfig {
            resolution: rng.gen_range(16..32),
            ..Default::default()
        };
        let mesh = reconstruct_surface(&pts, &surface).unwrap();
        let ransac = RansacConfig {
            seed: case,
            ..Default::default()
        };
        let planes: Vec<(Plane, FaceClass)> = detect_planes(&pts.points, &ransac)
            .unwrap()
            .into_iter()
            .map(|h| (h.plane, h.class))
            .collect();
        let snap = 2.0 * ransac.threshold_for(&pts.points);
        let (flat, _) = planarize(&mesh, &planes, snap).unwrap();
        let (small, _) = simplify(&flat, rng.gen_range(60..400)).unwrap();
        let hull = random_hull(&mut rng);
        for (stage, m) in [("surface", &mesh), ("planarize", &flat), ("simplify", &small), ("hull", &hull)] {
            checked += 1;
            if m.face_count() > 0 && m.is_watertight() {
                closed += 1;
            } else {
                failures.push(format!("case {case} {stage}"));
            }
        }
    }
    (
        closed == checked,
        format!("{closed}/{checked} meshes closed over 50 cases {failures:?}"),
    )
}

fn l_shape(seed: u64, n: usize) -> Vec<Vector3<f64>> {
    let mut m = box_mesh(Vector3::new(-0.5, -0.2, -0.15), Vector3::new(0.5, 0.2, 0.15)).sample_surface(n * 3 / 4, seed);
    m.extend(box_mesh(Vector3::new(0.2, 0.2, -0.15), Vector3::new(0.5, 0.45, 0.15)).sample_surface(n / 4, seed + 1));
    m
}

fn c7_icp() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let asset = l_shape(1, 1200);
    let cfg = IcpConfig::default();
    let mut ok = 0;
    for trial in 0..100u64 {
        let yaw = rng.gen_range(-180.0f64..=180.0).to_radians();
        let rot = Rotation3::from_axis_angle(&Vector3::y_axis(), yaw).into_inner();
        let scale = rng.gen_range(0.5..2.0);
        let diag = worldact::scene::Aabb::from_points(&asset).diagonal() * scale;
        let dir = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let t = dir.normalize() * rng.gen_range(0.0..0.5) * diag;
        let noise = Normal::new(0.0, 0.005 * diag).unwrap();
        // an independent sampling of the same surface
        let anchor: Vec<Vector3<f64>> = l_shape(100 + trial, 1200)
            .iter()
            .map(|p| rot * p * scale + t + Vector3::from_fn(|_, _| noise.sample(&mut rng)))
            .collect();
        let cands = icp_candidates(&asset, &anchor, &Vector3::y(), &cfg).unwrap();
        let best = best_by_residual(&cands).unwrap();
        let r_err = rotation_angle_deg(&best.pose.rotation().unwrap(), &rot);
        let t_err = (best.pose.t() - t).norm() / diag;
        let s_err = (best.pose.scale / scale - 1.0).abs();
        if r_err <= 1.0 && t_err <= 0.01 && s_err <= 0.02 {
            ok += 1;
        }
    }
    (ok >= 95, format!("{ok}/100 trials within 1° / 1% bbox / 2% scale (≥ 95)"))
}

/// The room as a closed two-shell proxy with a known floor.
fn room_proxy(spec: &SynthSpec) -> CollisionMesh {
    let [rx, ry, rz] = spec.room;
    let lo = Vector3::new(-0.5 * rx, 0.0, -0.5 * rz);
    let hi = Vector3::new(0.5 * rx, ry, 0.5 * rz);
    let mut inner = box_mesh(lo, hi);
    for f in inner.faces.iter_mut() {
        f.swap(1, 2);
    }
    let outer = box_mesh(lo - Vector3::repeat(1.0), hi + Vector3::repeat(1.0));
    let n = inner.vertices.len() as u32;
    let mut v = inner.vertices.clone();
    v.extend(outer.vertices.iter());
    let mut f = inner.faces.clone();
    f.extend(outer.faces.iter().map(|t| [t[0] + n, t[1] + n, t[2] + n]));
    let mut m = CollisionMesh::new(v, f);
    m.planes.push((Plane::new(Vector3::y(), 0.0), FaceClass::Floor));
    m
}

fn c8_refinement(s: &SynthScene) -> Outcome {
    let k = s.objects.iter().position(|o| o.name == "crate").unwrap();
    let o = &s.objects[k];
    let half = o.shape.half_extents();
    let size = 2.0 * half.max();
    let diag = (2.0 * half).norm();
    // ground-truth Gaussians and box in the canonical frame
    let rq = UnitQuaternion::from_matrix(&o.rotation);
    let inv = rq.inverse();
    let canon = s.scene.subset(&o.members).transformed(&inv, &(-(inv * o.center) / size), 1.0 / size);
    let mesh = box_mesh(-half / size, half / size);
    let views: Vec<AlignView> = s
        .trajectory
        .frames()
        .iter()
        .map(|c| {
            let m = s.masks[k].get(c.frame_index).unwrap();
            let mut ignore = Mask::filled(m.width(), m.height(), false);
            for (j, st) in s.masks.iter().enumerate() {
                if j != k {
                    ignore.union_with(st.get(c.frame_index).unwrap());
                }
            }
            AlignView::from_mask(c.clone(), m, Some(ignore))
        })
        .collect();
    let room = room_proxy(&s.spec);
    let cfg = AlignConfig::default();
    let surface = mesh.sample_surface(cfg.surface_samples, cfg.sample_seed);
    let turn = Rotation3::from_axis_angle(&Vector3::y_axis(), 3f64.to_radians()).into_inner();
    let init = PlacementPose::new(
        &(turn * o.rotation),
        o.center + Vector3::new(1.0, 0.5, -0.7).normalize() * 0.05 * diag,
        size * 1.05,
    );
    let problem = AlignProblem::new(&canon, surface, &[&room], &views, Vector3::y(), &init, &cfg).unwrap();

    let g1 = loss_gradient(&problem, &init, cfg.fd_step, size).unwrap();
    let g2 = loss_gradient(&problem, &init, 0.5 * cfg.fd_step, size).unwrap();
    let norm = |g: &[f64; 10]| g.iter().map(|v| v * v).sum::<f64>().sqrt();
    let diff: [f64; 10] = std::array::from_fn(|i| g1[i] - g2[i]);
    let fd_rel = norm(&diff) / norm(&g1).max(1e-300);

    let rep = refine_pose(&init, &problem).unwrap();
    let t_err = (rep.pose.t() - o.center).norm() / diag;
    let r_err = rotation_angle_deg(&rep.pose.rotation().unwrap(), &o.rotation);
    let s_err = (rep.pose.scale / size - 1.0).abs();
    let monotone = rep.history.windows(2).all(|w| w[1] <= w[0]);
    let pen = rep.final_loss.penetration;
    (
        t_err <= 0.005 && r_err <= 0.5 && s_err <= 0.01 && monotone && pen <= 1e-8 && fd_rel <= 1e-3,
        format!(
            "translation {:.3}% bbox (≤ 0.5%), rotation {r_err:.3}° (≤ 0.5°), scale {:.3}% (≤ 1%), \
             {} steps non-increasing {monotone}, penetration {pen:.1e} (≤ 1e-8), FD self-consistency {fd_rel:.1e} (≤ 1e-3)",
            100.0 * t_err,
            100.0 * s_err,
            rep.history.len().saturating_sub(1)
        ),
    )
}

fn pipeline_config(root: &Path, out: &str) -> PipelineConfig {
    PipelineConfig {
        paths: Paths {
            scene: root.join("synth/scene.ply"),
            trajectory: root.join("synth/trajectory.json"),
            oracle: None,
            output: root.join(out),
        },
        ..Default::default()
    }
}

fn c9_end_to_end(s: &SynthScene, root: &Path) -> Outcome {
    let cfg = pipeline_config(root, "run_a");
    let t = Instant::now();
    let (_, res) = run(&cfg, &RunOptions::pipeline(&cfg, false));
    let secs = t.elapsed().as_secs_f64();
    if let Err(e) = res {
        return (false, format!("pipeline failed: {e}"));
    }
    let manifest = cfg.paths.output.join("assemble/scene.manifest.json");
    let opts = RenderOptions::default();
    let (mut se, mut n) = (0.0, 0usize);
    for cam in s.trajectory.frames() {
        let original = render(&s.scene, cam, &opts).color;
        let assembled = render_manifest(&manifest, cam, &opts).unwrap().color;
        let mut band = Mask::filled(cam.width as usize, cam.height as usize, false);
        for st in &s.masks {
            for (r, c) in st.get(cam.frame_index).unwrap().boundary() {
                band.set(r, c, true);
            }
        }
        let band = band.dilate(5);
        for (p, (a, b)) in original.data().iter().zip(assembled.data()).enumerate() {
            if band.data()[p] {
                continue;
            }
            se += (0..3).map(|k| (a[k] - b[k]).powi(2)).sum::<f64>();
            n += 3;
        }
    }
    let psnr = 10.0 * (n as f64 / se).log10();
    (
        psnr >= 28.0 && secs <= 120.0,
        format!("PSNR {psnr:.2} dB outside 5-px edge bands (≥ 28), pipeline {secs:.1} s (≤ 120 s)"),
    )
}

fn suite() -> Vec<SynthSpec> {
    let mut moved = SynthSpec {
        seed: 21,
        noise: 0.003,
        ..Default::default()
    };
    moved.objects[0].position = [0.6, -0.5];
    moved.objects[0].yaw_deg = -35.0;
    moved.objects[1].position = [-0.8, 0.7];
    moved.objects[2].position = [0.2, 0.9];
    let mut pair = SynthSpec {
        seed: 3,
        ..Default::default()
    };
    pair.objects.truncate(2);
    pair.objects[1].position = [0.6, -0.6];
    vec![SynthSpec::default(), moved, pair]
}

fn frames(s: &SynthScene) -> BTreeMap<u32, RgbImage> {
    s.trajectory
        .frames()
        .iter()
        .map(|c| (c.frame_index, render(&s.scene, c, &RenderOptions::default()).color))
        .collect()
}

fn c10_recall() -> Outcome {
    let mut agent_recalls = Vec::new();
    let mut baseline = 1.0;
    for (i, spec) in suite().into_iter().enumerate() {
        let s = Arc::new(generate(&spec).unwrap());
        let b = Backends::mock(s.clone());
        let fr = frames(&s);
        let truth: Vec<&MaskStack> = s.masks.iter().collect();
        let out = run_agent(&fr, &s.trajectory, &b, &AgentConfig::default(), &CallLog::default()).unwrap();
        agent_recalls.push(recall(&out.masks, &truth, 0.5));
        if i == 0 {
            let cfg = AgentConfig {
                mode: DiscoveryMode::Baseline,
                ..Default::default()
            };
            let base = run_agent(&fr, &s.trajectory, &b, &cfg, &CallLog::default()).unwrap();
            baseline = recall(&base.masks, &truth, 0.5);
        }
    }
    let all = agent_recalls.iter().all(|&r| r == 1.0);
    (
        all && baseline < agent_recalls[0],
        format!("agent recall {agent_recalls:?} (all 1.0), baseline {baseline:.3} on the default room (< agent)"),
    )
}

fn files(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn c11_determinism(root: &Path) -> Outcome {
    let cfg = pipeline_config(root, "run_b");
    let (_, res) = run(&cfg, &RunOptions::pipeline(&cfg, false));
    if let Err(e) = res {
        return (false, format!("second run failed: {e}"));
    }
    // timings and call latencies are the only run-dependent records
    let volatile = |p: &Path| p == Path::new("run.json") || p == Path::new("decompose/agent.log.jsonl");
    let (a, b) = (root.join("run_a"), root.join("run_b"));
    let (fa, fb) = (files(&a), files(&b));
    if fa != fb {
        return (false, format!("file lists differ: {} vs {}", fa.len(), fb.len()));
    }
    let differing: Vec<&PathBuf> = fa
        .iter()
        .filter(|p| !volatile(p))
        .filter(|p| std::fs::read(a.join(p)).unwrap() != std::fs::read(b.join(p)).unwrap())
        .collect();
    let compared = fa.iter().filter(|p| !volatile(p)).count();
    (
        differing.is_empty() && compared > 20,
        format!("{compared} files byte-identical across two runs, differing {differing:?}"),
    )
}

fn json_round_trip<T: serde::Serialize + serde::de::DeserializeOwned>(path: &Path) -> bool {
    let text = std::fs::read_to_string(path).unwrap();
    let parsed: T = serde_json::from_str(&text).unwrap();
    let raw: serde_json::Value = serde_json::from_str(&text).unwrap();
    serde_json::to_value(&parsed).unwrap() == raw
}

fn c12_io(root: &Path) -> Outcome {
    let tmp = root.join("io");
    let mut checks = 0;
    let mut bad = Vec::new();
    let mut check = |what: String, ok: bool| {
        checks += 1;
        if !ok {
            bad.push(what);
        }
    };
    for (i, spec) in suite().iter().enumerate() {
        let s = generate(spec).unwrap();
        let scenes = [("scene", &s.scene), ("background", &s.background)];
        for (name, sc) in scenes {
            let bytes = encode_scene(sc).unwrap();
            let back = decode_scene(&bytes).unwrap();
            check(format!("{i} {name} bytes"), back == *sc && encode_scene(&back).unwrap() == bytes);
            let path = tmp.join(format!("{i}_{name}.ply"));
            std::fs::create_dir_all(&tmp).unwrap();
            save_scene(sc, &path).unwrap();
            check(format!("{i} {name} file"), load_scene(&path).unwrap() == *sc);
        }
        let dir = tmp.join(format!("suite_{i}"));
        write_outputs(&s, &dir).unwrap();
        check(format!("{i} trajectory"), Trajectory::load(&dir.join("trajectory.json")).unwrap() == s.trajectory);
        for st in &s.masks {
            let back = MaskStack::load(&dir.join("masks"), st.object_id).unwrap();
            check(format!("{i} masks {}", st.object_id), back == *st);
        }
        let mesh = room_proxy(spec);
        mesh.save(&dir, "proxy").unwrap();
        check(format!("{i} mesh"), CollisionMesh::load(&dir, "proxy").unwrap() == mesh);
    }
    // stage outputs of the first pipeline run
    let run = root.join("run_a");
    check(
        "decompose manifest".into(),
        json_round_trip::<DecomposeManifest>(&run.join("decompose/decompose.manifest.json")),
    );
    check(
        "restore manifest".into(),
        json_round_trip::<RestoreManifest>(&run.join("restore/restore.manifest.json")),
    );
    let scene_manifest = run.join("assemble/scene.manifest.json");
    check("scene manifest".into(), json_round_trip::<SceneManifest>(&scene_manifest));
    let m = SceneManifest::load(&scene_manifest).unwrap();
    let copy = tmp.join("scene.manifest.json");
    m.save(&copy).unwrap();
    check("scene manifest save".into(), SceneManifest::load(&copy).unwrap() == m);
    let assets = run.join("restore/assets");
    for o in &m.objects {
        let a = ObjectAsset::load(&assets, o.object_id).unwrap();
        a.save(&tmp.join("assets")).unwrap();
        check(format!("asset {}", o.object_id), ObjectAsset::load(&tmp.join("assets"), o.object_id).unwrap() == a);
    }
    (bad.is_empty(), format!("{} of {checks} round trips lossless {bad:?}", checks - bad.len()))
}

#[test]
fn acceptance_criteria() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let s = generate(&SynthSpec::default()).unwrap();
    write_outputs(&s, &root.join("synth")).unwrap();

    let results = [
        report(1, "renderer matches the brute-force compositor", c1_renderer),
        report(2, "compositing weights reproduce the render", || c2_weights(&s)),
        report(3, "segmentation recovers the objects", || c3_segmentation(&s)),
        report(4, "segmentation gradient matches finite differences", c4_seg_gradient),
        report(5, "planes of a noisy box", c5_planes),
        report(6, "every generated mesh is watertight", c6_watertight),
        report(7, "ICP recovers similarity transforms", c7_icp),
        report(8, "pose refinement from a perturbed start", || c8_refinement(&s)),
        report(9, "end-to-end pipeline with mock backends", || c9_end_to_end(&s, root)),
        report(10, "agent recall beats the prompt-free baseline", c10_recall),
        report(11, "repeated runs are byte-identical", || c11_determinism(root)),
        report(12, "PLY and manifest round trips", || c12_io(root)),
    ];
    let failed: Vec<usize> = (1..=12).filter(|i| !results[i - 1]).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}

