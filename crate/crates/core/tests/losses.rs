mod common;

use dsl_autodiff::gradcheck::check;
use dsl_autodiff::{Tape, Tensor, Var};
use dsl_core::augment::make_scale_pair;
use dsl_core::detector::{forward, init_params, DenseTargets, DetectorConfig, HeadOutput, LevelOutput, LevelTargets, ParamSet, IGNORE};
use dsl_core::losses::{scale_consistency_loss, score_map, supervised_loss, total_loss, unsupervised_loss};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const C: usize = 3;
const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

/// Level sizes and batch size of one random configuration.
fn layout(rng: &mut ChaCha8Rng) -> (usize, Vec<(usize, usize)>) {
    let n = rng.gen_range(1..=2);
    let levels = (0..rng.gen_range(1..=3)).map(|_| (rng.gen_range(1..=4), rng.gen_range(1..=4))).collect();
    (n, levels)
}

fn random_targets(rng: &mut ChaCha8Rng, levels: &[(usize, usize)], ignore: bool) -> DenseTargets {
    DenseTargets {
        num_classes: C,
        levels: levels
            .iter()
            .map(|&(h, w)| {
                let n = h * w;
                let labels: Vec<i32> = (0..n)
                    .map(|_| match rng.gen_range(0..10) {
                        0..=3 => rng.gen_range(0..C as i32),
                        4 if ignore => IGNORE,
                        5 if ignore => IGNORE,
                        _ => C as i32,
                    })
                    .collect();
                let pos = |p: usize| (0..C as i32).contains(&labels[p]);
                let dist = (0..4 * n).map(|i| if pos(i % n) { rng.gen_range(0.3..4.0) } else { 0.0 }).collect();
                let centerness = (0..n).map(|p| if pos(p) { rng.gen_range(0.05..1.0) } else { 0.0 }).collect();
                LevelTargets {
                    height: h,
                    width: w,
                    labels,
                    dist,
                    centerness,
                }
            })
            .collect(),
    }
}

/// cls, ctr and dist inputs per level; distances strictly positive.
fn random_inputs(rng: &mut ChaCha8Rng, n: usize, levels: &[(usize, usize)]) -> Vec<Tensor<f64>> {
    levels
        .iter()
        .flat_map(|&(h, w)| {
            [
                common::uniform(rng, &[n, C, h, w], -3.0, 3.0),
                common::uniform(rng, &[n, 1, h, w], -3.0, 3.0),
                common::uniform(rng, &[n, 4, h, w], 0.3, 4.0),
            ]
        })
        .collect()
}

fn head<'t>(vars: &[Var<'t, f64>]) -> HeadOutput<'t, f64> {
    HeadOutput {
        levels: vars
            .chunks(3)
            .map(|v| LevelOutput {
                cls: v[0],
                ctr: v[1],
                dist: v[2],
            })
            .collect(),
    }
}

#[test]
fn supervised_loss_gradients() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, levels) = layout(&mut rng);
        let targets: Vec<_> = (0..n).map(|_| random_targets(&mut rng, &levels, false)).collect();
        let inputs = random_inputs(&mut rng, n, &levels);
        let r = check(&inputs, H, |_, v| Ok(supervised_loss(&head(v), &targets).unwrap().loss)).unwrap();
        assert!(r.max_rel_error < TOL, "seed {seed}: {}", r.max_rel_error);
    }
}

#[test]
fn unsupervised_loss_gradients_with_ignore_regions() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let (n, levels) = layout(&mut rng);
        let targets: Vec<_> = (0..n).map(|_| random_targets(&mut rng, &levels, true)).collect();
        let inputs = random_inputs(&mut rng, n, &levels);
        let r = check(&inputs, H, |_, v| Ok(unsupervised_loss(&head(v), &targets).unwrap().loss)).unwrap();
        assert!(r.max_rel_error < TOL, "seed {seed}: {}", r.max_rel_error);
    }
}

#[test]
fn scale_loss_gradients() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let levels = rng.gen_range(2..=4);
        let sides: Vec<usize> = (0..levels).map(|l| 1 << (levels - l)).collect();
        let maps: Vec<Tensor<f64>> = sides
            .iter()
            .flat_map(|&s| [common::uniform(&mut rng, &[1, C, s, s], 0.0, 1.0), common::uniform(&mut rng, &[1, C, s / 2, s / 2], 0.0, 1.0)])
            .collect();
        let r = check(&maps, H, |_, v| {
            let sp: Vec<_> = v.iter().step_by(2).copied().collect();
            let d: Vec<_> = v.iter().skip(1).step_by(2).copied().collect();
            // Level v of the downsampled input pairs with level v + 1.
            Ok(scale_consistency_loss(&d[..levels - 1], &sp).unwrap())
        })
        .unwrap();
        assert!(r.max_rel_error < TOL, "seed {seed}: {}", r.max_rel_error);
    }
}

#[test]
fn ignored_pixels_get_exactly_zero_gradient_and_do_not_move_the_loss() {
    for seed in 0..50 {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let (n, levels) = layout(&mut rng);
        let targets: Vec<_> = (0..n).map(|_| random_targets(&mut rng, &levels, true)).collect();
        let inputs = random_inputs(&mut rng, n, &levels);
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let loss = unsupervised_loss(&head(&vars), &targets).unwrap().loss;
        let base = loss.value().item();
        let grads = tape.backward(loss).unwrap();

        let mut perturbed = inputs.clone();
        for (li, &(h, w)) in levels.iter().enumerate() {
            let hw = h * w;
            for (img, t) in targets.iter().enumerate() {
                for p in 0..hw {
                    if t.levels[li].labels[p] != IGNORE {
                        continue;
                    }
                    for (slot, channels) in [(0, C), (1, 1), (2, 4)] {
                        let g = grads.get_or_zeros(vars[3 * li + slot]);
                        for ch in 0..channels {
                            let i = (img * channels + ch) * hw + p;
                            assert_eq!(g.data()[i], 0.0, "seed {seed}");
                            perturbed[3 * li + slot].data_mut()[i] += rng.gen_range(-5.0..5.0);
                        }
                    }
                }
            }
        }
        let tape = Tape::new();
        let vars: Vec<_> = perturbed.into_iter().map(|t| tape.constant(t)).collect();
        let moved = unsupervised_loss(&head(&vars), &targets).unwrap().loss.value().item();
        assert_eq!(moved.to_bits(), base.to_bits(), "seed {seed}");
    }
}

#[test]
fn scale_loss_is_zero_for_identical_aligned_pyramids() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let maps: Vec<Tensor<f64>> = [8, 4, 2, 1].iter().map(|&s| common::uniform(&mut rng, &[2, C, s, s], 0.0, 1.0)).collect();
    let tape = Tape::new();
    let sp: Vec<_> = maps.iter().map(|m| tape.constant(m.clone())).collect();
    let d: Vec<_> = maps[1..].iter().map(|m| tape.constant(m.clone())).collect();
    assert_eq!(scale_consistency_loss(&d, &sp).unwrap().value().item(), 0.0);
}

#[test]
fn scale_loss_is_zero_for_a_constant_output_detector() {
    let cfg = DetectorConfig::default();
    let mut p: ParamSet<f64> = init_params(&cfg, 1).unwrap();
    let names: Vec<String> = p.names().filter(|n| n.ends_with(".w")).map(str::to_string).collect();
    for name in names {
        for v in p.get_mut(&name).unwrap().data_mut() {
            *v = 0.0;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let img = common::uniform(&mut rng, &[1, 3, 64, 64], 0.0, 1.0);
    let small = make_scale_pair(&img, 2).unwrap();
    let tape = Tape::new();
    let bound = p.bind(&tape, false);
    let full = forward(&cfg, &bound, tape.constant(img)).unwrap();
    let down = forward(&cfg, &bound, tape.constant(small)).unwrap();
    let sp: Vec<_> = full.levels.iter().map(|l| score_map(l).unwrap()).collect();
    let d: Vec<_> = down.levels.iter().map(|l| score_map(l).unwrap()).collect();
    let l = scale_consistency_loss(&d, &sp).unwrap().value().item();
    assert_eq!(l, 0.0);
}

#[test]
fn total_loss_weights_and_gating() {
    let tape = Tape::<f64>::new();
    let s = |v: f64| tape.constant(Tensor::scalar(v));
    assert_eq!(total_loss(s(1.0), s(2.0), s(4.0), 3.0, 0.5).unwrap().value().item(), 9.0);
    assert_eq!(total_loss(s(1.0), s(2.0), s(4.0), 0.0, 0.0).unwrap().value().item(), 1.0);
    assert!(total_loss(s(1.0), s(2.0), s(4.0), -1.0, 0.0).is_err());
}

#[test]
fn all_background_targets_have_zero_regression() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let levels = vec![(4, 4), (2, 2)];
    let inputs = random_inputs(&mut rng, 1, &levels);
    let bg = DenseTargets {
        num_classes: C,
        levels: levels.iter().map(|&(h, w)| LevelTargets::background(h, w, C)).collect(),
    };
    let tape = Tape::new();
    let vars: Vec<_> = inputs.into_iter().map(|t| tape.constant(t)).collect();
    let l = unsupervised_loss(&head(&vars), &[bg]).unwrap();
    assert_eq!((l.reg, l.ctr, l.num_pos), (0.0, 0.0, 0));
    assert!(l.cls > 0.0);
}
