use std::collections::HashMap;

use nalgebra::{Rotation3, Vector3};
use panfore::geometry::{Intrinsics, RigidTransform};
use panfore::maps::{DepthMap, Grid, Mask, SemanticMap};
use panfore::pipeline::{camera_transform, project_inputs, Horizon};
use panfore::scene::{generate, SceneSpec};
use panfore::stuff::{nearest_fill, project_background};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Case {
    labels: SemanticMap,
    depth: DepthMap,
    bg: Mask,
    k: Intrinsics,
    h: RigidTransform,
}

fn random_case(seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (rows, cols) = (rng.random_range(3..10), rng.random_range(3..10));
    let n = rows * cols;
    let labels = Grid::from_vec(rows, cols, (0..n).map(|_| rng.random_range(0..5u16)).collect()).unwrap();
    // few distinct depths so that collisions are common
    let depth = Grid::from_vec(rows, cols, (0..n).map(|_| rng.random_range(1..6) as f32 * 2.0).collect()).unwrap();
    let bg = Grid::from_vec(rows, cols, (0..n).map(|_| rng.random_bool(0.8)).collect()).unwrap();
    let f = rng.random_range(2.0..6.0);
    let k = Intrinsics::centered(f, f, rows, cols).unwrap();
    let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    let r = Rotation3::new(axis * rng.random_range(0.0..0.3));
    let t = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-3.0..1.0));
    Case { labels, depth, bg, k, h: RigidTransform::from_parts(r.into_inner(), t) }
}

/// Every source point per target pixel, then the nearest of them.
fn brute_force(c: &Case) -> Grid<Option<(u16, f64)>> {
    let (rows, cols) = c.labels.dims();
    let m = c.h.matrix();
    let mut hits: HashMap<usize, Vec<(u16, f64)>> = HashMap::new();
    for r in 0..rows {
        for col in 0..cols {
            let i = r * cols + col;
            if !c.bg.data()[i] {
                continue;
            }
            let z = c.depth.data()[i] as f64;
            let p = [(col as f64 - c.k.cx) * z / c.k.fx, (r as f64 - c.k.cy) * z / c.k.fy, z];
            let q: Vec<f64> = (0..3).map(|a| m[(a, 0)] * p[0] + m[(a, 1)] * p[1] + m[(a, 2)] * p[2] + m[(a, 3)]).collect();
            if q[2] <= 0.0 {
                continue;
            }
            let u = (c.k.fx * q[0] / q[2] + c.k.cx).round();
            let v = (c.k.fy * q[1] / q[2] + c.k.cy).round();
            if u < 0.0 || v < 0.0 || u >= cols as f64 || v >= rows as f64 {
                continue;
            }
            hits.entry(v as usize * cols + u as usize).or_default().push((c.labels.data()[i], q[2]));
        }
    }
    let mut out = Grid::filled(rows, cols, None);
    for (j, list) in hits {
        // the first of equally near points wins
        let best = list.iter().fold(None::<(u16, f64)>, |acc, &(l, z)| match acc {
            Some((_, bz)) if bz <= z => acc,
            _ => Some((l, z)),
        });
        out.data_mut()[j] = best;
    }
    out
}

#[test]
fn zbuffer_matches_brute_force_on_1000_cases() {
    let mut collisions = 0;
    for seed in 0..1000 {
        let c = random_case(seed);
        let got = project_background(&c.labels, &c.depth, &c.k, &c.h, &c.bg).unwrap();
        let want = brute_force(&c);
        assert_eq!(got.data().len(), want.data().len());
        for (a, b) in got.data().iter().zip(want.data()) {
            match (a, b) {
                (Some((la, za)), Some((lb, zb))) => {
                    assert_eq!(la, lb, "case {seed}");
                    assert!((za - zb).abs() < 1e-9, "case {seed}");
                }
                (None, None) => {}
                _ => panic!("coverage differs in case {seed}"),
            }
        }
        let covered = want.data().iter().filter(|v| v.is_some()).count();
        collisions += c.bg.count().saturating_sub(covered);
    }
    assert!(collisions > 1000, "cases exercise too few collisions: {collisions}");
}

#[test]
fn identity_transform_is_pixel_exact() {
    for seed in 0..200 {
        let c = random_case(seed);
        let got = project_background(&c.labels, &c.depth, &c.k, &RigidTransform::identity(), &c.bg).unwrap();
        for i in 0..got.len() {
            let want = c.bg.data()[i].then(|| (c.labels.data()[i], c.depth.data()[i] as f64));
            assert_eq!(got.data()[i], want, "case {seed} pixel {i}");
        }
    }
}

fn static_scene(seed: u64) -> panfore::scene::SceneSequence {
    generate(&SceneSpec { seed, min_objects: 0, max_objects: 0, ..SceneSpec::default() }).unwrap()
}

#[test]
fn static_scene_transfer_agrees_at_covered_pixels() {
    let hz = Horizon::short();
    let (mut covered, mut agree) = (0usize, 0usize);
    let (mut filled, mut fill_agree) = (0usize, 0usize);
    for seed in 0..10 {
        let seq = static_scene(seed);
        assert_eq!(seq.dims(), (64, 96));
        let target = seq.len() - 1;
        let schedule = hz.schedule(target);
        let inputs = &schedule[..hz.inputs];
        let r = seq.odometry();
        let projs = project_inputs(&seq, inputs, |f| camera_transform(&seq, &r, f, target)).unwrap();
        let gt = &seq.frames[target].semantic;
        for p in &projs {
            for (v, g) in p.data().iter().zip(gt.data()) {
                if let Some((l, _)) = v {
                    covered += 1;
                    agree += usize::from(l == g);
                }
            }
        }
        let fill = nearest_fill(&projs).unwrap();
        filled += gt.len();
        fill_agree += fill.data().iter().zip(gt.data()).filter(|(a, b)| a == b).count();
    }
    let transfer = agree as f64 / covered as f64;
    assert!(transfer >= 0.99, "covered-pixel agreement {transfer:.4}");
    let fill = fill_agree as f64 / filled as f64;
    assert!(fill >= 0.99, "nearest-fill agreement {fill:.4}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn forward_translation_reduces_depth(seed in 0u64..10_000, tz in 0.0f64..0.9) {
        let c = random_case(seed);
        let h = RigidTransform::translation(0.0, 0.0, -tz);
        let moved = project_background(&c.labels, &c.depth, &c.k, &h, &c.bg).unwrap();
        let sources: Vec<f64> = c.bg.indices().map(|i| c.depth.data()[i] as f64).collect();
        for v in moved.data().iter().flatten() {
            prop_assert!(v.1 > 0.0);
            prop_assert!(sources.iter().any(|z| (z - tz - v.1).abs() < 1e-9));
        }
    }
}
