//! Finite-difference property suite: every tape op, on random small
//! instances, across 100 seeded trials.
//!
//! Inputs are drawn away from non-differentiable points (ReLU kinks, pooling
//! ties) by margins much larger than the finite-difference step.

use kflows::autodiff::{grad_check, AutodiffError, Padding, Tape, Tensor, Var};
use kflows::linalg::NuggetPolicy;
use kflows::rng::{Rng, Stream};

const TRIALS: usize = 100;
const TOL: f64 = 1e-4;

fn tensor(shape: &[usize], rng: &mut Rng) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = rng.next_normal();
    }
    t
}

/// Values bounded away from zero (for ReLU and log-style ops).
fn tensor_away_from_zero(shape: &[usize], margin: f64, rng: &mut Rng) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        let mut z = rng.next_normal();
        while z.abs() < margin {
            z = rng.next_normal();
        }
        *v = z;
    }
    t
}

fn check<F>(name: &str, trial: usize, params: Vec<(String, Tensor)>, build: F)
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, AutodiffError>,
{
    let report = grad_check(&build, &params, TOL).unwrap();
    assert!(report.pass(), "{name} trial {trial}:\n{report}");
}

#[test]
fn add_sub_mul_family() {
    for trial in 0..TRIALS {
        let mut rng = Rng::seeded(trial as u64, Stream::Data);
        let dims = [1 + rng.below(6), 1 + rng.below(6)];
        let a = tensor(&dims, &mut rng);
        let b = tensor(&dims, &mut rng);
        check(
            "add/sub/mul",
            trial,
            vec![("a".into(), a), ("b".into(), b)],
            |tape, vars| {
                let s = tape.add(vars[0], vars[1])?;
                let d = tape.sub(s, vars[1])?;
                let m = tape.mul_elem(d, vars[1])?;
                let sq = tape.square(m);
                Ok(tape.sum(sq))
            },
        );
    }
}

#[test]
fn scale_affine_exp_log_mean() {
    for trial in 0..TRIALS {
        let mut rng = Rng::seeded(1000 + trial as u64, Stream::Data);
        let dims = [1 + rng.below(5), 1 + rng.below(5)];
        let mut x = tensor(&dims, &mut rng);
        for v in x.data_mut() {
            *v = v.abs() + 0.5; // positive, away from log's pole
        }
        let s = Tensor::scalar(0.3 + rng.next_f64());
        check(
            "scale/exp/log/mean",
            trial,
            vec![("x".into(), x), ("s".into(), s)],
            |tape, vars| {
                let scaled = tape.scale_var(vars[0], vars[1])?;
                let shifted = tape.affine(scaled, 0.7, 1.5);
                let l = tape.log(shifted);
                let e = tape.exp(l);
                Ok(tape.mean(e))
            },
        );
    }
}

#[test]
fn relu_away_from_kinks() {
    for trial in 0..TRIALS {
        let mut rng = Rng::seeded(2000 + trial as u64, Stream::Data);
        let dims = [1 + rng.below(6), 1 + rng.below(6)];
        let x = tensor_away_from_zero(&dims, 0.05, &mut rng);
        check("relu", trial, vec![("x".into(), x)], |tape, vars| {
            let r = tape.relu(vars[0]);
            let sq = tape.square(r);
            Ok(tape.sum(sq))
        });
    }
}

#[test]
fn matmul_and_bias() {
    for trial in 0..TRIALS {
        let mut rng = Rng::seeded(3000 + trial as u64, Stream::Data);
        let (m, k, n) = (1 + rng.below(5), 1 + rng.below(5), 1 + rng.below(5));
        let a = tensor(&[m, k], &mut rng);
        let b = tensor(&[k, n], &mut rng);
        let bias = tensor(&[n], &mut rng);
        check(
            "matmul/add_bias",
            trial,
            vec![("a".into(), a), ("b".into(), b), ("bias".into(), bias)],
            |tape, vars| {
                let p = tape.matmul(vars[0], vars[1])?;
                let pb = tape.add_bias(p, vars[2])?;
                let sq = tape.square(pb);
                Ok(tape.sum(sq))
            },
        );
    }
}

#[test]
fn reshape_and_gathers() {
    for trial in 0..TRIALS {
        let mut rng = Rng::seeded(4000 + trial as u64, Stream::Data);
        let rows = 3 + rng.below(4);
        let cols = 2 + rng.below(4);
        let x = tensor(&[rows, cols], &mut rng);
        let n_rows = 1 + rng.below(rows - 1);
        let row_pick = rng.sample_without_replacement(rows, n_rows);
        let n_cols = 1 + rng.below(cols - 1);
        let col_pick = rng.sample_without_replacement(cols, n_cols);
        check(
            "reshape/gather",
            trial,
            vec![("x".into(), x)],
            move |tape, vars| {
                let g1 = tape.gather_rows(vars[0], &row_pick)?;
                let g2 = tape.gather_cols(g1, &col_pick)?;
                let flat = tape.reshape(g2, &[row_pick.len() * col_pick.len()])?;
                let sq = tape.square(flat);
                Ok(tape.sum(sq))
            },
        );
    }
}

#[test]
fn pairwise_sqdist_weighted() {
    for trial in 0..TRIALS {
        let mut rng = Rng::seeded(5000 + trial as u64, Stream::Data);
        let n = 2 + rng.below(5);
        let d = 1 + rng.below(4);
        let x = tensor(&[n, d], &mut rng);
        let w = tensor(&[n, n], &mut rng);
        check(
            "pairwise_sqdist",
            trial,
            vec![("x".into(), x)],
            move |tape, vars| {
                let dist = tape.pairwise_sqdist(vars[0])?;
                let wv = tape.constant(w.clone());
                let prod = tape.mul_elem(dist, wv)?;
                Ok(tape.sum(prod))
            },
        );
    }
}

#[test]
fn conv2d_both_paddings() {
    for trial in 0..TRIALS {
        let mut rng = Rng::seeded(6000 + trial as u64, Stream::Data);
        let n = 1 + rng.below(2);
        let hw = 4 + rng.below(3);
        let cin = 1 + rng.below(2);
        let cout = 1 + rng.below(3);
        let k = 1 + 2 * rng.below(2); // 1 or 3
        let padding = if rng.next_f64() < 0.5 {
            Padding::Valid
        } else {
            Padding::Same
        };
        let x = tensor(&[n, hw, hw, cin], &mut rng);
        let w = tensor(&[k, k, cin, cout], &mut rng);
        check(
            "conv2d",
            trial,
            vec![("x".into(), x), ("w".into(), w)],
            move |tape, vars| {
                let y = tape.conv2d(vars[0], vars[1], padding)?;
                let sq = tape.square(y);
                Ok(tape.sum(sq))
            },
        );
    }
}

#[test]
fn maxpool_away_from_ties() {
    for trial in 0..TRIALS {
        let mut rng = Rng::seeded(7000 + trial as u64, Stream::Data);
        let n = 1 + rng.below(2);
        let hw = 2 * (1 + rng.below(3));
        let c = 1 + rng.below(3);
        // Separate window entries by increments far above the FD step.
        let mut x = Tensor::zeros(&[n, hw, hw, c]);
        for (i, v) in x.data_mut().iter_mut().enumerate() {
            *v = rng.next_normal() + (i % 4) as f64 * 0.123;
        }
        check("maxpool2x2", trial, vec![("x".into(), x)], |tape, vars| {
            let p = tape.maxpool2x2(vars[0])?;
            let sq = tape.square(p);
            Ok(tape.sum(sq))
        });
    }
}

#[test]
fn global_avgpool_gradients() {
    for trial in 0..TRIALS {
        let mut rng = Rng::seeded(8000 + trial as u64, Stream::Data);
        let x = tensor(&[1 + rng.below(3), 2 + rng.below(3), 2 + rng.below(3), 1 + rng.below(3)], &mut rng);
        check("global_avgpool", trial, vec![("x".into(), x)], |tape, vars| {
            let p = tape.global_avgpool(vars[0])?;
            let sq = tape.square(p);
            Ok(tape.sum(sq))
        });
    }
}

#[test]
fn batchnorm_gradients() {
    for trial in 0..TRIALS {
        let mut rng = Rng::seeded(9000 + trial as u64, Stream::Data);
        let rows = 3 + rng.below(4);
        let c = 1 + rng.below(3);
        let x = tensor(&[rows, c], &mut rng);
        let scale = {
            let mut t = tensor(&[c], &mut rng);
            for v in t.data_mut() {
                *v = 0.5 + v.abs();
            }
            t
        };
        let shift = tensor(&[c], &mut rng);
        check(
            "batchnorm",
            trial,
            vec![("x".into(), x), ("scale".into(), scale), ("shift".into(), shift)],
            |tape, vars| {
                let (y, _, _) = tape.batchnorm(vars[0], vars[1], vars[2], 1e-5)?;
                let sq = tape.square(y);
                Ok(tape.sum(sq))
            },
        );
    }
}

#[test]
fn dropout_with_frozen_mask() {
    for trial in 0..TRIALS {
        let mut rng = Rng::seeded(10_000 + trial as u64, Stream::Data);
        let dims = [2 + rng.below(4), 1 + rng.below(4)];
        let x = tensor(&dims, &mut rng);
        let p = 0.3;
        let mask: Vec<f64> = (0..dims[0] * dims[1])
            .map(|_| if rng.next_f64() >= p { 1.0 } else { 0.0 })
            .collect();
        check(
            "dropout_apply",
            trial,
            vec![("x".into(), x)],
            move |tape, vars| {
                let d = tape.dropout_apply(vars[0], mask.clone(), p)?;
                let sq = tape.square(d);
                Ok(tape.sum(sq))
            },
        );
    }
}

#[test]
fn solve_spd_gradients() {
    // A = exp(-||f_i - f_j||^2) + I/2 is symmetric positive definite and
    // differentiable in the feature rows; this is exactly how the losses
    // build their Gram systems.
    for trial in 0..TRIALS {
        let mut rng = Rng::seeded(11_000 + trial as u64, Stream::Data);
        let n = 2 + rng.below(4);
        let m = 1 + rng.below(2);
        let f = tensor(&[n, 2], &mut rng);
        let b = tensor(&[n, m], &mut rng);
        check(
            "solve_spd",
            trial,
            vec![("f".into(), f), ("b".into(), b)],
            |tape, vars| {
                let d = tape.pairwise_sqdist(vars[0])?;
                let nd = tape.neg(d);
                let k = tape.exp(nd);
                let n = tape.shape(k)[0];
                let eye = tape.constant(
                    Tensor::new(
                        &[n, n],
                        (0..n * n)
                            .map(|i| if i % (n + 1) == 0 { 0.5 } else { 0.0 })
                            .collect(),
                    )
                    .unwrap(),
                );
                let a = tape.add(k, eye)?;
                let v = tape.solve_spd(a, vars[1], &NuggetPolicy::exact())?;
                let sq = tape.square(v);
                Ok(tape.sum(sq))
            },
        );
    }
}

#[test]
fn softmax_cross_entropy_gradients() {
    for trial in 0..TRIALS {
        let mut rng = Rng::seeded(12_000 + trial as u64, Stream::Data);
        let n = 1 + rng.below(5);
        let c = 2 + rng.below(4);
        let logits = tensor(&[n, c], &mut rng);
        let mut targets = Tensor::zeros(&[n, c]);
        for i in 0..n {
            let pick = rng.below(c);
            targets.data_mut()[i * c + pick] = 1.0;
        }
        check(
            "softmax_cross_entropy",
            trial,
            vec![("logits".into(), logits)],
            move |tape, vars| tape.softmax_cross_entropy(vars[0], &targets),
        );
    }
}

#[test]
fn div_scalar_gradients() {
    for trial in 0..TRIALS {
        let mut rng = Rng::seeded(13_000 + trial as u64, Stream::Data);
        let a = Tensor::scalar(rng.next_normal());
        let b = Tensor::scalar(1.0 + rng.next_f64());
        check(
            "div_scalar",
            trial,
            vec![("a".into(), a), ("b".into(), b)],
            |tape, vars| {
                let r = tape.div_scalar(vars[0], vars[1])?;
                Ok(tape.square(r))
            },
        );
    }
}

#[test]
fn backward_is_linear_in_the_loss() {
    // Exact for a plain sum of two losses; 1e-12-relative for scaled
    // combinations (constant scaling reassociates floating-point products).
    for trial in 0..20 {
        let mut rng = Rng::seeded(14_000 + trial as u64, Stream::Data);
        let w_data = tensor(&[4], &mut rng);

        let grads_of = |alpha: Option<(f64, f64)>| -> Vec<f64> {
            let mut tape = Tape::new();
            let w = tape.param(w_data.clone());
            let sq = tape.square(w);
            let l1 = tape.sum(sq);
            let e = tape.exp(w);
            let l2 = tape.sum(e);
            let total = match alpha {
                None => tape.add(l1, l2).unwrap(),
                Some((a, b)) => {
                    let s1 = tape.scale(l1, a);
                    let s2 = tape.scale(l2, b);
                    tape.add(s1, s2).unwrap()
                }
            };
            let grads = tape.backward(total).unwrap();
            grads.get(w).unwrap().data().to_vec()
        };
        let single = |which: usize| -> Vec<f64> {
            let mut tape = Tape::new();
            let w = tape.param(w_data.clone());
            let loss = if which == 0 {
                let sq = tape.square(w);
                tape.sum(sq)
            } else {
                let e = tape.exp(w);
                tape.sum(e)
            };
            let grads = tape.backward(loss).unwrap();
            grads.get(w).unwrap().data().to_vec()
        };

        let g1 = single(0);
        let g2 = single(1);
        // alpha = beta = 1: bitwise.
        let plain = grads_of(None);
        for ((a, b), c) in g1.iter().zip(&g2).zip(&plain) {
            assert_eq!((a + b).to_bits(), c.to_bits(), "unit-weight linearity");
        }
        // General alpha, beta: 1e-12 relative.
        let (alpha, beta) = (0.37, -1.9);
        let combo = grads_of(Some((alpha, beta)));
        for ((a, b), c) in g1.iter().zip(&g2).zip(&combo) {
            let expected = alpha * a + beta * b;
            assert!(
                (expected - c).abs() <= 1e-12 * expected.abs().max(1.0),
                "scaled linearity: {expected} vs {c}"
            );
        }
    }
}
