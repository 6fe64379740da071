use panfore::maps::Grid;
use panfore::stuff::{stuff_loss, RefineConfig, RefineModel};
use panfore::things::{batch_loss, ThingsConfig, ThingsModel, ThingsSample, EGO_DIM};
use panfore::tracks::{turn_tracks, FeatureDims, TurnTrackSpec};
use panfore_autodiff::{check_gradients, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny_things() -> ThingsConfig {
    ThingsConfig {
        box_hidden: 5,
        mask_hidden: 3,
        bfeat: 2,
        mfeat_channels: 2,
        mfeat: 3,
        head_hidden: 4,
        mask_out_hidden: 2,
        dims: FeatureDims { channels: 2, height: 3, width: 3 },
        ..ThingsConfig::default()
    }
}

#[test]
fn things_loss_matches_finite_differences() {
    let cfg = tiny_things();
    let (t, f) = (2, 2);
    let tracks = turn_tracks(&TurnTrackSpec {
        count: 3,
        steps: t + f,
        height: 8,
        width: 12,
        class: 5,
        speed: [0.5, 1.0],
        dims: cfg.dims,
        ..TurnTrackSpec::default()
    })
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let samples: Vec<ThingsSample> = tracks
        .iter()
        .enumerate()
        .map(|(k, tr)| {
            let mut input = tr.window(0..t);
            if k == 1 {
                // one missing observation feeds zeros
                input.steps[0] = None;
            }
            let mut target = tr.window(t - 1..t + f);
            if k == 2 {
                target.steps[1] = None;
            }
            let ego = (0..t + f).map(|_| std::array::from_fn::<f64, EGO_DIM, _>(|_| rng.random_range(-1.0..1.0))).collect();
            ThingsSample { input, target, ego }
        })
        .collect();
    let mut model = ThingsModel::new(cfg, 11).unwrap();
    let boxes: Vec<_> = tracks.iter().flat_map(|tr| tr.steps.iter().flatten().map(|o| o.bbox)).collect();
    let egos: Vec<_> = samples.iter().flat_map(|s| s.ego.iter().copied()).collect();
    model.set_stats(&panfore::things::NormStats::fit(boxes.iter(), egos.iter()));
    let batch: Vec<&ThingsSample> = samples.iter().collect();
    let report = check_gradients(&model.store, 1e-5, 6, |g| Ok(batch_loss(g, &model, &batch).expect("loss").expect("supervised"))).unwrap();
    assert!(report.checked > 50);
    assert!(report.max_rel_err < 1e-4, "{report:?}");
}

#[test]
fn stuff_loss_matches_finite_differences() {
    let cfg = RefineConfig { frames: 2, classes: 3, hidden: 3 };
    let model = RefineModel::new(cfg, 5).unwrap();
    let (h, w) = (5, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = Tensor::new(&[1, cfg.in_channels(), h, w], (0..cfg.in_channels() * h * w).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let target = Grid::from_vec(h, w, (0..h * w).map(|_| rng.random_range(0..3u16)).collect()).unwrap();
    let fg = Grid::from_vec(h, w, (0..h * w).map(|_| rng.random_bool(0.2)).collect()).unwrap();
    let report = check_gradients(&model.store, 1e-5, 8, |g| {
        let logits = model.forward(g, g.input(x.clone())).expect("forward");
        Ok(stuff_loss(g, logits, &target, &fg).expect("loss"))
    })
    .unwrap();
    assert!(report.checked > 30);
    assert!(report.max_rel_err < 1e-4, "{report:?}");
}
