//! Finite-difference verification of every primitive's backward pass:
//! 10 random points per primitive, h = 1e-3, max relative error < 1e-4.

use ldgnet::ndgrad::{finite_diff_check, DiffTensor, Graph, Result};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;
const H: f64 = 1e-3;

/// Sample away from zero so kinked primitives (relu, maxpool) are checked
/// at differentiable points.
fn sample(rng: &mut ChaCha8Rng, n: usize, away_from_zero: bool) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let mut v: f64 = rng.random_range(-1.5..1.5);
            if away_from_zero && v.abs() < 0.05 {
                v += 0.1 * v.signum_or_one();
            }
            v
        })
        .collect()
}

trait SignumOrOne {
    fn signum_or_one(self) -> f64;
}
impl SignumOrOne for f64 {
    fn signum_or_one(self) -> f64 {
        if self == 0.0 {
            1.0
        } else {
            self.signum()
        }
    }
}

fn check_many<F>(name: &str, shape: &[usize], away_from_zero: bool, f: F)
where
    F: Fn(&mut Graph, &DiffTensor) -> Result<DiffTensor>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed ^ name.len() as u64);
    let n: usize = shape.iter().product();
    for trial in 0..10 {
        let point = sample(&mut rng, n, away_from_zero);
        let err = finite_diff_check(&f, &point, shape, H).unwrap();
        assert!(err < TOL, "{}: trial {} error {} >= {}", name, trial, err, TOL);
    }
}

#[test]
fn add_and_mul_and_scale() {
    check_many("add", &[6], false, |g, x| {
        let other = g.constant(vec![0.3, -0.7, 1.2, 0.0, 2.0, -1.1], &[6])?;
        let s = g.add(x, &other)?;
        let sq = g.mul(&s, &s)?;
        g.sum(&sq, None)
    });
    check_many("add-scalar-broadcast", &[1], false, |g, x| {
        let other = g.constant(vec![0.5, -0.25, 0.75], &[3])?;
        let s = g.add(&other, x)?;
        let sq = g.mul(&s, &s)?;
        g.sum(&sq, None)
    });
    check_many("mul", &[6], false, |g, x| {
        let other = g.constant(vec![0.9, -0.2, 0.4, 1.5, -0.8, 0.1], &[6])?;
        let p = g.mul(x, &other)?;
        g.sum(&p, None)
    });
    check_many("mul-scalar-broadcast", &[1], false, |g, x| {
        let other = g.constant(vec![0.5, -0.25, 0.75], &[3])?;
        let p = g.mul(&other, x)?;
        let sq = g.mul(&p, &p)?;
        g.sum(&sq, None)
    });
    check_many("scalar-scale", &[5], false, |g, x| {
        let y = g.scale(x, -2.5)?;
        let sq = g.mul(&y, &y)?;
        g.sum(&sq, None)
    });
}

#[test]
fn relu_log_exp() {
    check_many("relu", &[8], true, |g, x| {
        let y = g.relu(x)?;
        let sq = g.mul(&y, &y)?;
        g.sum(&sq, None)
    });
    check_many("log", &[5], false, |g, x| {
        // keep the argument strictly positive
        let e = g.exp(x)?;
        let one = g.constant(vec![1.0], &[1])?;
        let shifted = g.add(&e, &one)?;
        let y = g.log(&shifted)?;
        g.sum(&y, None)
    });
    check_many("exp", &[5], false, |g, x| {
        let y = g.exp(x)?;
        g.sum(&y, None)
    });
}

#[test]
fn softmax_and_normalizers() {
    check_many("softmax", &[2, 5], false, |g, x| {
        let y = g.softmax(x)?;
        let w = g.constant((0..10).map(|i| 0.1 * i as f64).collect(), &[2, 5])?;
        let p = g.mul(&y, &w)?;
        g.sum(&p, None)
    });
    check_many("l2-normalize", &[3, 4], true, |g, x| {
        let y = g.l2_normalize(x)?;
        let w = g.constant((0..12).map(|i| 0.2 * i as f64 - 1.0).collect(), &[3, 4])?;
        let p = g.mul(&y, &w)?;
        g.sum(&p, None)
    });
    // layernorm: gradient w.r.t. the input
    check_many("layernorm-x", &[2, 6], false, |g, x| {
        let gamma = g.constant(vec![1.2, 0.8, -0.5, 1.0, 0.3, 2.0], &[6])?;
        let beta = g.constant(vec![0.1, -0.2, 0.0, 0.4, -0.6, 0.2], &[6])?;
        let y = g.layernorm(x, &gamma, &beta)?;
        let w = g.constant((0..12).map(|i| 0.15 * i as f64 - 0.9).collect(), &[2, 6])?;
        let p = g.mul(&y, &w)?;
        g.sum(&p, None)
    });
    // layernorm: gradient w.r.t. the affine parameters
    check_many("layernorm-gamma", &[4], false, |g, gamma| {
        let x = g.constant(vec![0.3, -1.0, 0.8, 2.0, 0.5, 0.1, -0.4, 1.3], &[2, 4])?;
        let beta = g.constant(vec![0.0; 4], &[4])?;
        let y = g.layernorm(&x, gamma, &beta)?;
        let sq = g.mul(&y, &y)?;
        g.sum(&sq, None)
    });
}

#[test]
fn matmul_linear_embedding() {
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let name = format!("matmul-{}{}", ta as u8, tb as u8);
        // x plays the left operand, shape depends on ta
        let shape = if ta { [4, 3] } else { [3, 4] };
        check_many(&name, &shape, false, move |g, x| {
            let b_shape = if tb { [5, 4] } else { [4, 5] };
            let b_data: Vec<f64> = (0..20).map(|i| 0.07 * i as f64 - 0.6).collect();
            let b = g.constant(b_data, &b_shape)?;
            let y = g.matmul(x, &b, ta, tb)?;
            let w = g.constant((0..15).map(|i| 0.11 * i as f64 - 0.7).collect(), &[3, 5])?;
            let p = g.mul(&y, &w)?;
            g.sum(&p, None)
        });
        // and as the right operand
        let name = format!("matmul-rhs-{}{}", ta as u8, tb as u8);
        let shape = if tb { [5, 4] } else { [4, 5] };
        check_many(&name, &shape, false, move |g, x| {
            let a_shape = if ta { [4, 3] } else { [3, 4] };
            let a_data: Vec<f64> = (0..12).map(|i| 0.13 * i as f64 - 0.8).collect();
            let a = g.constant(a_data, &a_shape)?;
            let y = g.matmul(&a, x, ta, tb)?;
            let w = g.constant((0..15).map(|i| 0.09 * i as f64 - 0.5).collect(), &[3, 5])?;
            let p = g.mul(&y, &w)?;
            g.sum(&p, None)
        });
    }
    check_many("linear-x", &[2, 3], false, |g, x| {
        let w = g.constant((0..12).map(|i| 0.1 * i as f64 - 0.5).collect(), &[3, 4])?;
        let b = g.constant(vec![0.2, -0.1, 0.4, 0.0], &[4])?;
        let y = g.linear(x, &w, &b)?;
        let m = g.constant((0..8).map(|i| 0.3 * i as f64 - 1.0).collect(), &[2, 4])?;
        let p = g.mul(&y, &m)?;
        g.sum(&p, None)
    });
    check_many("linear-w", &[3, 4], false, |g, w| {
        let x = g.constant(vec![0.5, -0.3, 1.1, 0.2, 0.8, -0.9], &[2, 3])?;
        let b = g.constant(vec![0.2, -0.1, 0.4, 0.0], &[4])?;
        let y = g.linear(&x, w, &b)?;
        let sq = g.mul(&y, &y)?;
        g.sum(&sq, None)
    });
    check_many("linear-b", &[4], false, |g, b| {
        let x = g.constant(vec![0.5, -0.3, 1.1, 0.2, 0.8, -0.9], &[2, 3])?;
        let w = g.constant((0..12).map(|i| 0.1 * i as f64 - 0.5).collect(), &[3, 4])?;
        let y = g.linear(&x, &w, b)?;
        let sq = g.mul(&y, &y)?;
        g.sum(&sq, None)
    });
    check_many("embedding-lookup", &[5, 3], false, |g, table| {
        let y = g.embedding(table, &[0, 3, 3, 1])?;
        let w = g.constant((0..12).map(|i| 0.21 * i as f64 - 1.1).collect(), &[4, 3])?;
        let p = g.mul(&y, &w)?;
        g.sum(&p, None)
    });
}

#[test]
fn shape_and_reduction_ops() {
    check_many("concat", &[2, 3], false, |g, x| {
        let other = g.constant(vec![1.0, -0.5, 0.25, 2.0, 0.0, -1.5], &[2, 3])?;
        let y = g.concat(&[x, &other, x], 0)?;
        let w = g.constant((0..18).map(|i| 0.05 * i as f64 - 0.4).collect(), &[6, 3])?;
        let p = g.mul(&y, &w)?;
        g.sum(&p, None)
    });
    check_many("concat-axis1", &[2, 2], false, |g, x| {
        let other = g.constant(vec![1.0, -0.5, 0.25, 2.0, 0.0, -1.5], &[2, 3])?;
        let y = g.concat(&[x, &other], 1)?;
        let w = g.constant((0..10).map(|i| 0.05 * i as f64 - 0.2).collect(), &[2, 5])?;
        let p = g.mul(&y, &w)?;
        g.sum(&p, None)
    });
    check_many("reshape", &[2, 6], false, |g, x| {
        let y = g.reshape(x, &[3, 4])?;
        let w = g.constant((0..12).map(|i| 0.07 * i as f64 - 0.3).collect(), &[3, 4])?;
        let p = g.mul(&y, &w)?;
        g.sum(&p, None)
    });
    check_many("sum-axis", &[3, 4], false, |g, x| {
        let y = g.sum(x, Some(1))?;
        let sq = g.mul(&y, &y)?;
        g.sum(&sq, None)
    });
    check_many("mean-axis", &[3, 4], false, |g, x| {
        let y = g.mean(x, Some(0))?;
        let sq = g.mul(&y, &y)?;
        g.sum(&sq, None)
    });
    check_many("mean-all", &[7], false, |g, x| {
        let y = g.mean(x, None)?;
        g.mul(&y, &y)
    });
}

#[test]
fn conv_pool_batchnorm() {
    check_many("conv3d-x", &[1, 2, 3, 4, 4], false, |g, x| {
        let w_data: Vec<f64> = (0..2 * 2 * 2 * 2 * 2).map(|i| 0.11 * i as f64 - 0.8).collect();
        let w = g.constant(w_data, &[2, 2, 2, 2, 2])?;
        let b = g.constant(vec![0.1, -0.2], &[2])?;
        let y = g.conv3d(x, &w, &b, [1, 1, 1], [1, 1, 1])?;
        let sq = g.mul(&y, &y)?;
        g.sum(&sq, None)
    });
    check_many("conv3d-w", &[2, 2, 2, 2, 2], false, |g, w| {
        let x_data: Vec<f64> = (0..2 * 3 * 4 * 4).map(|i| 0.055 * i as f64 - 2.5).collect();
        let x = g.constant(x_data, &[1, 2, 3, 4, 4])?;
        let b = g.constant(vec![0.1, -0.2], &[2])?;
        let y = g.conv3d(&x, w, &b, [2, 1, 2], [0, 1, 0])?;
        let sq = g.mul(&y, &y)?;
        g.sum(&sq, None)
    });
    check_many("conv3d-b", &[2], false, |g, b| {
        let x_data: Vec<f64> = (0..2 * 3 * 4 * 4).map(|i| 0.055 * i as f64 - 2.5).collect();
        let x = g.constant(x_data, &[1, 2, 3, 4, 4])?;
        let w_data: Vec<f64> = (0..32).map(|i| 0.11 * i as f64 - 0.8).collect();
        let w = g.constant(w_data, &[2, 2, 2, 2, 2])?;
        let y = g.conv3d(&x, &w, b, [1, 1, 1], [0, 0, 0])?;
        let sq = g.mul(&y, &y)?;
        g.sum(&sq, None)
    });
    // maxpool needs points where window maxima are separated by more than
    // the finite-difference step, or the argmax flips mid-check
    {
        let mut rng = ChaCha8Rng::seed_from_u64(0x9001);
        for trial in 0..10 {
            let mut point: Vec<f64> = (0..64).map(|i| 0.02 * i as f64 - 0.64).collect();
            point.shuffle(&mut rng);
            let err = finite_diff_check(
                |g, x| {
                    let y = g.maxpool3d(x, [2, 2, 2], [2, 2, 2])?;
                    let sq = g.mul(&y, &y)?;
                    g.sum(&sq, None)
                },
                &point,
                &[1, 1, 4, 4, 4],
                H,
            )
            .unwrap();
            assert!(err < TOL, "maxpool3d: trial {} error {}", trial, err);
        }
    }
    check_many("batchnorm3d-train-x", &[2, 2, 2, 2, 2], false, |g, x| {
        let gamma = g.constant(vec![1.1, 0.7], &[2])?;
        let beta = g.constant(vec![0.2, -0.3], &[2])?;
        let (y, _, _) = g.batchnorm3d_train(x, &gamma, &beta)?;
        let w = g.constant((0..32).map(|i| 0.03 * i as f64 - 0.5).collect(), &[2, 2, 2, 2, 2])?;
        let p = g.mul(&y, &w)?;
        g.sum(&p, None)
    });
    check_many("batchnorm3d-train-gamma", &[2], false, |g, gamma| {
        let x_data: Vec<f64> = (0..32).map(|i| 0.21 * i as f64 - 3.0).collect();
        let x = g.constant(x_data, &[2, 2, 2, 2, 2])?;
        let beta = g.constant(vec![0.2, -0.3], &[2])?;
        let (y, _, _) = g.batchnorm3d_train(&x, gamma, &beta)?;
        let sq = g.mul(&y, &y)?;
        g.sum(&sq, None)
    });
    check_many("batchnorm3d-eval-x", &[1, 2, 2, 2, 2], false, |g, x| {
        let gamma = g.constant(vec![1.1, 0.7], &[2])?;
        let beta = g.constant(vec![0.2, -0.3], &[2])?;
        let y = g.batchnorm3d_eval(x, &gamma, &beta, &[0.4, -0.2], &[0.9, 1.4])?;
        let sq = g.mul(&y, &y)?;
        g.sum(&sq, None)
    });
}

#[test]
fn multihead_attention_all_inputs() {
    let t = 4;
    let dm = 6;
    let heads = 2;
    let wq: Vec<f64> = (0..36).map(|i| 0.37 * ((i * 7 % 11) as f64 - 5.0) / 5.0).collect();
    let wk: Vec<f64> = (0..36).map(|i| 0.29 * ((i * 5 % 13) as f64 - 6.0) / 6.0).collect();
    let wv: Vec<f64> = (0..36).map(|i| 0.31 * ((i * 3 % 7) as f64 - 3.0) / 3.0).collect();
    let wo: Vec<f64> = (0..36).map(|i| 0.23 * ((i * 11 % 17) as f64 - 8.0) / 8.0).collect();
    let bias = vec![0.05, -0.1, 0.0, 0.2, -0.05, 0.1];
    let x0: Vec<f64> = (0..24).map(|i| 0.17 * ((i * 13 % 19) as f64 - 9.0) / 9.0).collect();

    // weave: which of the nine inputs is the checked variable
    for (slot, shape) in [
        (0usize, vec![t, dm]),
        (1, vec![dm, dm]),
        (2, vec![dm]),
        (3, vec![dm, dm]),
        (4, vec![dm]),
        (5, vec![dm, dm]),
        (6, vec![dm]),
        (7, vec![dm, dm]),
        (8, vec![dm]),
    ] {
        for causal in [false, true] {
            let key_valid = vec![true, true, true, false];
            let name = format!("mha-slot{}-causal{}", slot, causal as u8);
            let wq = wq.clone();
            let wk = wk.clone();
            let wv = wv.clone();
            let wo = wo.clone();
            let bias = bias.clone();
            let x0 = x0.clone();
            let kv = key_valid.clone();
            check_many(&name, &shape, false, move |g, var| {
                let fixed: Vec<DiffTensor> = vec![
                    g.constant(x0.clone(), &[t, dm])?,
                    g.constant(wq.clone(), &[dm, dm])?,
                    g.constant(bias.clone(), &[dm])?,
                    g.constant(wk.clone(), &[dm, dm])?,
                    g.constant(bias.clone(), &[dm])?,
                    g.constant(wv.clone(), &[dm, dm])?,
                    g.constant(bias.clone(), &[dm])?,
                    g.constant(wo.clone(), &[dm, dm])?,
                    g.constant(bias.clone(), &[dm])?,
                ];
                let pick = |i: usize| if i == slot { var } else { &fixed[i] };
                let y = g.multihead_attention(
                    pick(0),
                    [pick(1), pick(2), pick(3), pick(4), pick(5), pick(6), pick(7), pick(8)],
                    heads,
                    causal,
                    &kv,
                )?;
                // weight only valid token positions so PAD rows stay out of the loss
                let mut mask = vec![0.0; t * dm];
                for (tok, &ok) in kv.iter().enumerate() {
                    if ok {
                        for d in 0..dm {
                            mask[tok * dm + d] = 0.1 * (tok * dm + d) as f64 - 0.8;
                        }
                    }
                }
                let m = g.constant(mask, &[t, dm])?;
                let p = g.mul(&y, &m)?;
                g.sum(&p, None)
            });
        }
    }
}
