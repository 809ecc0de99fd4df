use dsl_autodiff::io::{decode, encode};
use dsl_autodiff::{ResizeMode, Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Quadruple-loop direct convolution.
fn direct_conv(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let (n, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, k) = (w.shape()[0], w.shape()[2]);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = Tensor::zeros(&[n, cout, oh, ow]);
    for b in 0..n {
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = 0.0;
                    for ci in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    s += x.at(&[b, ci, iy as usize, ix as usize])
                                        * w.at(&[co, ci, ky, kx]);
                                }
                            }
                        }
                    }
                    out.set(&[b, co, oy, ox], s);
                }
            }
        }
    }
    out
}

#[test]
fn conv_matches_direct_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = random(&mut rng, &[1, 3, 8, 8]);
    let w = random(&mut rng, &[4, 3, 3, 3]);
    for (stride, pad) in [(1, 0), (1, 1), (2, 1), (2, 0)] {
        let tape = Tape::new();
        let y = tape
            .constant(x.clone())
            .conv2d(tape.constant(w.clone()), None, stride, pad)
            .unwrap()
            .value();
        let oracle = direct_conv(&x, &w, stride, pad);
        assert_eq!(y.shape(), oracle.shape());
        for (a, b) in y.data().iter().zip(oracle.data()) {
            assert!((a - b).abs() < 1e-10, "stride {stride} pad {pad}: {a} vs {b}");
        }
    }
}

#[test]
fn max_reduce_matches_linear_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let x = random(&mut rng, &[3, 7, 5]);
        let tape = Tape::new();
        let m = tape.constant(x.clone()).max_all().unwrap().value().item();
        let mut best = f64::NEG_INFINITY;
        for &v in x.data() {
            if v > best {
                best = v;
            }
        }
        assert_eq!(m, best);
        let per_row = tape.constant(x.clone()).max_axes(&[2]).unwrap().value();
        for r in 0..21 {
            let row = &x.data()[r * 5..(r + 1) * 5];
            let scan = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(per_row.data()[r], scan);
        }
    }
}

#[test]
fn bilinear_halving_is_average_pool() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&mut rng, &[1, 1, 8, 8]);
    let tape = Tape::new();
    let y = tape
        .constant(x.clone())
        .resize_down(2, ResizeMode::Bilinear)
        .unwrap()
        .value();
    for oy in 0..4 {
        for ox in 0..4 {
            let avg = (x.at(&[0, 0, 2 * oy, 2 * ox])
                + x.at(&[0, 0, 2 * oy + 1, 2 * ox])
                + x.at(&[0, 0, 2 * oy, 2 * ox + 1])
                + x.at(&[0, 0, 2 * oy + 1, 2 * ox + 1]))
                / 4.0;
            assert!((y.at(&[0, 0, oy, ox]) - avg).abs() < 1e-15);
        }
    }
}

#[test]
fn forward_is_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let x = random(&mut rng, &[2, 3, 8, 8]);
        let w = random(&mut rng, &[8, 3, 3, 3]);
        let tape = Tape::<f64>::new();
        tape.constant(x)
            .conv2d(tape.constant(w), None, 1, 1)
            .unwrap()
            .group_norm(4, 1e-5)
            .unwrap()
            .relu()
            .value()
            .data()
            .iter()
            .map(|v| v.to_bits())
            .collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn backward_of_sum_is_ones() {
    let tape = Tape::<f64>::new();
    let x = tape.param(Tensor::from_fn(&[2, 3], |i| i as f64));
    let g = tape.backward(x.sum_all()).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[1.0; 6]);
}

#[test]
fn backward_rejects_non_scalar() {
    let tape = Tape::<f64>::new();
    let x = tape.param(Tensor::ones(&[2]));
    assert!(tape.backward(x.relu()).is_err());
}

#[test]
fn backward_is_linear_in_the_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x0 = random(&mut rng, &[1, 2, 5, 5]);
    let w0 = random(&mut rng, &[3, 2, 3, 3]);
    let (a, b) = (0.7, -1.3);
    let grads = |ka: f64, kb: f64| {
        let tape = Tape::<f64>::new();
        let x = tape.param(x0.clone());
        let w = tape.param(w0.clone());
        let y = x.conv2d(w, None, 1, 1).unwrap();
        let l1 = y.sigmoid().sum_all();
        let l2 = y.mul(y).unwrap().mean_all().unwrap();
        let loss = l1.scale(ka).add(l2.scale(kb)).unwrap();
        let g = tape.backward(loss).unwrap();
        g.get(w).unwrap().clone()
    };
    let combined = grads(a, b);
    let g1 = grads(1.0, 0.0);
    let g2 = grads(0.0, 1.0);
    for i in 0..combined.numel() {
        let lin = a * g1.data()[i] + b * g2.data()[i];
        assert!((combined.data()[i] - lin).abs() < 1e-12);
    }
}

#[test]
fn constants_receive_no_gradient() {
    let tape = Tape::<f64>::new();
    let c = tape.constant(Tensor::ones(&[3]));
    let p = tape.param(Tensor::ones(&[3]));
    let g = tape.backward(c.mul(p).unwrap().sum_all()).unwrap();
    assert!(g.get(c).is_none());
    assert!(g.get(p).is_some());
}

proptest! {
    #[test]
    fn tensor_file_round_trip(dims in prop::collection::vec(0usize..5, 0..4), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t32 = Tensor::<f32>::from_fn(&dims, |_| rng.gen::<f32>() * 100.0 - 50.0);
        let back: Tensor<f32> = decode(&encode(&t32)).unwrap();
        prop_assert_eq!(&back, &t32);
        let t64 = t32.cast::<f64>();
        let back: Tensor<f64> = decode(&encode(&t64)).unwrap();
        prop_assert_eq!(&back, &t64);
    }

    #[test]
    fn broadcast_sub_matches_explicit_expansion(rows in 1usize..5, cols in 1usize..5, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(&mut rng, &[rows, cols]);
        let b = random(&mut rng, &[cols]);
        let tape = Tape::new();
        let y = tape.constant(a.clone()).sub(tape.constant(b.clone())).unwrap().value();
        for r in 0..rows {
            for c in 0..cols {
                prop_assert_eq!(y.at(&[r, c]), a.at(&[r, c]) - b.at(&[c]));
            }
        }
    }
}
