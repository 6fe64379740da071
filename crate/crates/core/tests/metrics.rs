use std::collections::BTreeMap;

use panfore::maps::{ClassSet, Grid, PanopticMap};
use panfore::metrics::{
    default_thresholds, instance_ap, iou, panoptic_match, panoptic_quality, GtInstance, MatchResult, ScoredInstance,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SIDE: usize = 16;

fn classes() -> ClassSet {
    ClassSet::new(3, 2)
}

/// Rectangular segments painted in sequence over a random stuff layout.
fn random_map(rng: &mut ChaCha8Rng) -> PanopticMap {
    let mut class = Grid::from_vec(SIDE, SIDE, vec![0u16; SIDE * SIDE]).unwrap();
    let band = rng.random_range(4..12);
    for r in 0..SIDE {
        for c in 0..SIDE {
            class.set(r, c, if r < band { 2 } else if c < SIDE / 2 { 0 } else { 1 });
        }
    }
    let mut inst = Grid::filled(SIDE, SIDE, 0u16);
    for id in 1..=rng.random_range(0..6u16) {
        let (r0, c0) = (rng.random_range(0..SIDE - 2), rng.random_range(0..SIDE - 2));
        let (r1, c1) = (rng.random_range(r0 + 1..=SIDE), rng.random_range(c0 + 1..=SIDE));
        let k = rng.random_range(3..5u16);
        for r in r0..r1 {
            for c in c0..c1 {
                class.set(r, c, k);
                inst.set(r, c, id);
            }
        }
    }
    PanopticMap::new(class, inst).unwrap()
}

fn perturb(map: &PanopticMap, rng: &mut ChaCha8Rng) -> PanopticMap {
    let mut out = map.clone();
    let (dr, dc) = (rng.random_range(-1i64..=1), rng.random_range(-1i64..=1));
    for r in 0..SIDE {
        for c in 0..SIDE {
            let (sr, sc) = (r as i64 - dr, c as i64 - dc);
            if rng.random_bool(0.7) && (0..SIDE as i64).contains(&sr) && (0..SIDE as i64).contains(&sc) {
                let (k, i) = map.get(sr as usize, sc as usize);
                out.class.set(r, c, k);
                out.instance.set(r, c, i);
            }
            if rng.random_bool(0.05) {
                out.class.set(r, c, rng.random_range(0..5));
                out.instance.set(r, c, rng.random_range(0..7));
            }
        }
    }
    // stuff pixels carry instance 0
    for p in 0..SIDE * SIDE {
        if out.class.data()[p] < 3 {
            out.instance.data_mut()[p] = 0;
        }
    }
    out
}

/// Maximal IoU-sum assignment over all pairings with IoU > 0.5.
fn best(pairs: &[Vec<f64>], row: usize, used: &mut Vec<bool>) -> (usize, f64) {
    if row == pairs.len() {
        return (0, 0.0);
    }
    let mut top = best(pairs, row + 1, used);
    for (j, &v) in pairs[row].iter().enumerate() {
        if v > 0.5 && !used[j] {
            used[j] = true;
            let (n, s) = best(pairs, row + 1, used);
            used[j] = false;
            if (n + 1, s + v) > top {
                top = (n + 1, s + v);
            }
        }
    }
    top
}

fn brute_force(pred: &PanopticMap, gt: &PanopticMap) -> BTreeMap<u16, (usize, f64, usize, usize)> {
    let (ps, gs) = (pred.segments(), gt.segments());
    let mut out = BTreeMap::new();
    let all: std::collections::BTreeSet<u16> = ps.keys().chain(gs.keys()).map(|k| k.0).collect();
    for c in all {
        let p: Vec<&Vec<usize>> = ps.iter().filter(|(k, _)| k.0 == c).map(|(_, v)| v).collect();
        let g: Vec<&Vec<usize>> = gs.iter().filter(|(k, _)| k.0 == c).map(|(_, v)| v).collect();
        let table: Vec<Vec<f64>> = p.iter().map(|a| g.iter().map(|b| iou(a, b)).collect()).collect();
        let (tp, sum) = best(&table, 0, &mut vec![false; g.len()]);
        out.insert(c, (tp, sum, p.len() - tp, g.len() - tp));
    }
    out
}

fn summary(m: &MatchResult) -> BTreeMap<u16, (usize, f64, usize, usize)> {
    m.classes
        .iter()
        .map(|(&c, cm)| (c, (cm.tp.len(), cm.tp.iter().map(|t| t.2).sum(), cm.fp.len(), cm.missed.len())))
        .collect()
}

#[test]
fn greedy_matching_equals_brute_force_on_500_pairs() {
    let mut matched = 0;
    for seed in 0..500 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gt = random_map(&mut rng);
        let pred = if rng.random_bool(0.2) { random_map(&mut rng) } else { perturb(&gt, &mut rng) };
        let got = summary(&panoptic_match(&pred, &gt).unwrap());
        let want = brute_force(&pred, &gt);
        assert_eq!(got.len(), want.len(), "case {seed}");
        for (c, w) in &want {
            let g = got[c];
            assert_eq!((g.0, g.2, g.3), (w.0, w.2, w.3), "case {seed} class {c}");
            assert!((g.1 - w.1).abs() < 1e-12, "case {seed} class {c}");
            matched += g.0;
        }
    }
    assert!(matched > 1000);
}

#[test]
fn hand_computed_cases() {
    let cs = ClassSet::new(1, 1);
    let a: Vec<usize> = (0..100).collect();
    let b: Vec<usize> = (20..120).collect();
    assert!((iou(&a, &b) - 2.0 / 3.0).abs() < 1e-12);

    // one 100-pixel GT and an 100-pixel prediction overlapping by 80
    let mut gt = PanopticMap::new(Grid::filled(10, 12, 0u16), Grid::filled(10, 12, 0u16)).unwrap();
    let mut pred = gt.clone();
    for p in 0..100 {
        gt.class.data_mut()[p] = 1;
        gt.instance.data_mut()[p] = 1;
    }
    for p in 20..120 {
        pred.class.data_mut()[p] = 1;
        pred.instance.data_mut()[p] = 7;
    }
    let q = panoptic_quality(&panoptic_match(&pred, &gt).unwrap(), &cs).per_class[&1].quality;
    assert!((q.sq - 2.0 / 3.0).abs() < 1e-12);
    assert!((q.rq - 1.0).abs() < 1e-12);
    assert!((q.pq - 2.0 / 3.0).abs() < 1e-12);

    // add a second GT instance that nothing predicts
    gt.class.data_mut()[119] = 1;
    gt.instance.data_mut()[119] = 2;
    let m = panoptic_match(&pred, &gt).unwrap();
    let q = panoptic_quality(&m, &cs).per_class[&1].quality;
    assert_eq!(m.classes[&1].missed, vec![2]);
    assert!((q.rq - 2.0 / 3.0).abs() < 1e-12);

    // one prediction at IoU 0.7 against one GT, swept over thresholds
    let gt_inst = vec![GtInstance { class: 5, pixels: (0..10).collect() }];
    let pred_inst = vec![ScoredInstance { class: 5, pixels: (0..7).collect(), confidence: 0.42 }];
    let (ap, ap50) = instance_ap(&pred_inst, &gt_inst, &default_thresholds()).unwrap();
    assert!((ap - 0.5).abs() < 1e-12);
    assert!((ap50 - 1.0).abs() < 1e-12);
}

fn relabel(map: &PanopticMap, seed: u64) -> PanopticMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ids: Vec<u16> = (1..=40).collect();
    for i in (1..ids.len()).rev() {
        ids.swap(i, rng.random_range(0..=i));
    }
    let mut out = map.clone();
    for v in out.instance.data_mut() {
        if *v > 0 {
            *v = ids[*v as usize % ids.len()] + 100;
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn pq_is_sq_times_rq(seed in 0u64..1_000_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gt = random_map(&mut rng);
        let pred = perturb(&gt, &mut rng);
        let s = panoptic_quality(&panoptic_match(&pred, &gt).unwrap(), &classes());
        for c in s.per_class.values() {
            let q = c.quality;
            prop_assert!((q.pq - q.sq * q.rq).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&q.sq) && (0.0..=1.0).contains(&q.rq));
        }
    }

    #[test]
    fn self_match_is_perfect(seed in 0u64..1_000_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gt = random_map(&mut rng);
        let m = panoptic_match(&gt, &gt).unwrap();
        let s = panoptic_quality(&m, &classes());
        for c in s.per_class.values() {
            prop_assert_eq!(c.quality.pq, 1.0);
            prop_assert_eq!(c.quality.sq, 1.0);
            prop_assert_eq!(c.quality.rq, 1.0);
        }
        let all = s.all.unwrap();
        prop_assert_eq!((all.pq, all.sq, all.rq), (1.0, 1.0, 1.0));
    }

    #[test]
    fn instance_ids_do_not_matter(seed in 0u64..1_000_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gt = random_map(&mut rng);
        let pred = perturb(&gt, &mut rng);
        let base = panoptic_quality(&panoptic_match(&pred, &gt).unwrap(), &classes());
        let swapped = panoptic_quality(&panoptic_match(&relabel(&pred, seed), &relabel(&gt, seed + 1)).unwrap(), &classes());
        prop_assert_eq!(base.per_class.len(), swapped.per_class.len());
        for (c, a) in &base.per_class {
            let b = swapped.per_class[c];
            prop_assert_eq!((a.tp, a.fp, a.missed), (b.tp, b.fp, b.missed));
            prop_assert!((a.quality.pq - b.quality.pq).abs() < 1e-12);
        }
    }
}
