//! Shared helpers for integration tests: a randomized finite-difference sweep
//! across every differentiable op.

use cplae_core::autodiff::{grad_check, Rng, Tape, Tensor, Var};
use cplae_core::Result;

pub struct GradSweep {
    pub instances: usize,
    pub max_rel: f64,
}

fn rand_tensor(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.uniform_in(lo, hi)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Values bounded away from zero on both sides (safe for relu kinks, div, …).
fn rand_tensor_offzero(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let sign = if rng.below(2) == 0 { -1.0 } else { 1.0 };
            sign * rng.uniform_in(0.2, 1.2)
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Distinct, well-separated values (safe for max/argmax under perturbation).
fn rand_tensor_distinct(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    let data = order.iter().map(|&i| i as f64 * 0.1 - 0.05 * n as f64).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn small_dims(rng: &mut Rng, rank: usize) -> Vec<usize> {
    (0..rank).map(|_| 1 + rng.below(4) as usize).collect()
}

/// Reduce a (possibly non-scalar) node to a scalar through a random constant
/// weighting, so gradients are non-uniform.
fn weighted_sum(tape: &mut Tape<f64>, v: Var, rng: &mut Rng) -> Result<Var> {
    let shape = tape.value(v).shape().to_vec();
    let w = tape.constant(rand_tensor(rng, &shape, -1.0, 1.0));
    let p = tape.mul(v, w)?;
    tape.sum(p, &[], false)
}

/// Graph builder under finite-difference test: tape, the differentiated
/// inputs as vars, and an rng for any constants the instance needs.
type BuildFn<'a> = &'a dyn Fn(&mut Tape<f64>, &[Var], &mut Rng) -> Result<Var>;

/// Runs the full randomized gradient sweep. Covers every differentiable op
/// the tape exposes; returns the instance count and worst relative error.
pub fn gradient_sweep(seed: u64) -> GradSweep {
    let mut rng = Rng::new(seed);
    let mut instances = 0usize;
    let mut max_rel = 0.0f64;

    let mut run = |inputs: &[Tensor<f64>], rng: &mut Rng, build: BuildFn| {
        // Clone the rng so the analytic and every numeric evaluation see the
        // same constants inside `build`.
        let frozen = rng.clone();
        let rel = grad_check(inputs, 1e-5, |tape, vars| {
            let mut r = frozen.clone();
            build(tape, vars, &mut r)
        })
        .expect("sweep graphs are well-formed");
        instances += 1;
        if rel > max_rel {
            max_rel = rel;
        }
    };

    // Elementwise binaries under random broadcast patterns.
    for _ in 0..8 {
        let base = small_dims(&mut rng, 3);
        let tail = base[1..].to_vec();
        let pattern = rng.below(3);
        let other: Vec<usize> = match pattern {
            0 => base.clone(),
            1 => tail,
            _ => vec![base[2]],
        };
        let a = rand_tensor(&mut rng, &base, -1.0, 1.0);
        let b = rand_tensor_offzero(&mut rng, &other);
        for op in 0..4 {
            run(&[a.clone(), b.clone()], &mut rng, &|t, v, r| {
                let y = match op {
                    0 => t.add(v[0], v[1]),
                    1 => t.sub(v[0], v[1]),
                    2 => t.mul(v[0], v[1]),
                    _ => t.div(v[0], v[1]),
                }?;
                weighted_sum(t, y, r)
            });
        }
    }

    // Unaries.
    for _ in 0..6 {
        let shape = small_dims(&mut rng, 2);
        let x = rand_tensor_offzero(&mut rng, &shape);
        let pos = rand_tensor(&mut rng, &shape, 0.3, 2.0);
        run(std::slice::from_ref(&x), &mut rng, &|t, v, r| {
            let y = t.neg(v[0])?;
            weighted_sum(t, y, r)
        });
        run(std::slice::from_ref(&x), &mut rng, &|t, v, r| {
            let y = t.exp(v[0])?;
            weighted_sum(t, y, r)
        });
        run(std::slice::from_ref(&pos), &mut rng, &|t, v, r| {
            let y = t.log(v[0])?;
            weighted_sum(t, y, r)
        });
        run(std::slice::from_ref(&pos), &mut rng, &|t, v, r| {
            let y = t.sqrt(v[0])?;
            weighted_sum(t, y, r)
        });
        run(std::slice::from_ref(&x), &mut rng, &|t, v, r| {
            let y = t.relu(v[0])?;
            weighted_sum(t, y, r)
        });
        run(std::slice::from_ref(&x), &mut rng, &|t, v, r| {
            let y = t.add_scalar(v[0], 0.7)?;
            let y = t.mul_scalar(y, -1.3)?;
            weighted_sum(t, y, r)
        });
    }

    // Matmul rank pairs.
    for _ in 0..5 {
        let (m, kk, n) = (
            1 + rng.below(3) as usize,
            1 + rng.below(3) as usize,
            1 + rng.below(3) as usize,
        );
        let bt = 1 + rng.below(2) as usize;
        let a2 = rand_tensor(&mut rng, &[m, kk], -1.0, 1.0);
        let b2 = rand_tensor(&mut rng, &[kk, n], -1.0, 1.0);
        run(&[a2, b2], &mut rng, &|t, v, r| {
            let y = t.matmul(v[0], v[1])?;
            weighted_sum(t, y, r)
        });
        let a3 = rand_tensor(&mut rng, &[bt, m, kk], -1.0, 1.0);
        let b3 = rand_tensor(&mut rng, &[bt, kk, n], -1.0, 1.0);
        run(std::slice::from_ref(&a3), &mut rng, &{
            let b3 = b3.clone();
            move |t: &mut Tape<f64>, v: &[Var], r: &mut Rng| {
                let b = t.param(b3.clone());
                let y = t.matmul(v[0], b)?;
                weighted_sum(t, y, r)
            }
        });
        let b2b = rand_tensor(&mut rng, &[kk, n], -1.0, 1.0);
        run(&[a3, b2b], &mut rng, &|t, v, r| {
            let y = t.matmul(v[0], v[1])?;
            weighted_sum(t, y, r)
        });
    }

    // Convolution with assorted stride/padding.
    for &(stride, pad) in &[(1usize, 0usize), (1, 1), (2, 1)] {
        let input = rand_tensor(&mut rng, &[2, 2, 5, 4], -1.0, 1.0);
        let weight = rand_tensor(&mut rng, &[3, 2, 3, 3], -0.5, 0.5);
        run(&[input, weight], &mut rng, &move |t, v, r| {
            let y = t.conv2d(v[0], v[1], stride, pad)?;
            weighted_sum(t, y, r)
        });
    }

    // Max pooling (distinct values keep the argmax stable under eps).
    for _ in 0..3 {
        let x = rand_tensor_distinct(&mut rng, &[1, 2, 4, 4]);
        run(&[x], &mut rng, &|t, v, r| {
            let y = t.maxpool2d(v[0], 2, 2)?;
            weighted_sum(t, y, r)
        });
    }

    // Reductions over random axis subsets.
    for _ in 0..6 {
        let shape = small_dims(&mut rng, 3);
        let keep = rng.below(2) == 0;
        let axes: Vec<usize> = (0..3).filter(|_| rng.below(2) == 0).collect();
        let x = rand_tensor(&mut rng, &shape, -1.0, 1.0);
        let xd = rand_tensor_distinct(&mut rng, &shape);
        let a = axes.clone();
        run(std::slice::from_ref(&x), &mut rng, &move |t, v, r| {
            let y = t.sum(v[0], &a, keep)?;
            weighted_sum(t, y, r)
        });
        let a = axes.clone();
        run(&[x], &mut rng, &move |t, v, r| {
            let y = t.mean(v[0], &a, keep)?;
            weighted_sum(t, y, r)
        });
        let a = axes.clone();
        run(&[xd], &mut rng, &move |t, v, r| {
            let y = t.reduce_max(v[0], &a, keep)?;
            weighted_sum(t, y, r)
        });
    }

    // Softmax family along every axis of a rank-3 tensor.
    for axis in 0..3 {
        let x = rand_tensor(&mut rng, &[2, 3, 4], -2.0, 2.0);
        run(std::slice::from_ref(&x), &mut rng, &move |t, v, r| {
            let y = t.softmax(v[0], axis)?;
            weighted_sum(t, y, r)
        });
        run(&[x], &mut rng, &move |t, v, r| {
            let y = t.log_softmax(v[0], axis)?;
            weighted_sum(t, y, r)
        });
    }

    // Shape plumbing: reshape → permute → slice → concat → index_select.
    for _ in 0..5 {
        let x = rand_tensor(&mut rng, &[2, 3, 4], -1.0, 1.0);
        let y = rand_tensor(&mut rng, &[2, 2, 4], -1.0, 1.0);
        run(&[x, y], &mut rng, &|t, v, r| {
            let a = t.reshape(v[0], vec![2, 12])?;
            let a = t.reshape(a, vec![2, 3, 4])?;
            let a = t.permute(a, &[1, 0, 2])?; // (3,2,4)
            let a = t.slice(a, 0, 1, 2)?; // (2,2,4)
            let c = t.concat(&[a, v[1]], 1)?; // (2,4,4)
            let g = t.index_select(c, 1, &[3, 0, 0, 2])?;
            weighted_sum(t, g, r)
        });
    }

    // Pairwise squared distances.
    for _ in 0..4 {
        let a = rand_tensor(&mut rng, &[3, 4], -1.0, 1.0);
        let b = rand_tensor(&mut rng, &[2, 4], -1.0, 1.0);
        run(&[a, b], &mut rng, &|t, v, r| {
            let d = t.pairwise_sqdist(v[0], v[1])?;
            weighted_sum(t, d, r)
        });
    }

    // Composite loss-shaped chains: matmul → log_softmax → pick → mean, and a
    // contrastive-shaped exp/log ratio.
    for _ in 0..4 {
        let x = rand_tensor(&mut rng, &[4, 3], -1.0, 1.0);
        let w = rand_tensor(&mut rng, &[3, 5], -0.7, 0.7);
        run(&[x, w], &mut rng, &|t, v, r| {
            let logits = t.matmul(v[0], v[1])?;
            let lp = t.log_softmax(logits, 1)?;
            let flat = t.reshape(lp, vec![20])?;
            let picked = t.index_select(flat, 0, &[0, 6, 12, 18])?;
            let m = t.mean(picked, &[], false)?;
            let neg = t.neg(m)?;
            weighted_sum(t, neg, r)
        });
        let q = rand_tensor(&mut rng, &[3, 4], -1.0, 1.0);
        run(&[q], &mut rng, &|t, v, r| {
            let sq = t.mul(v[0], v[0])?;
            let norms = t.sum(sq, &[1], true)?;
            let norms = t.add_scalar(norms, 1e-3)?;
            let norms = t.sqrt(norms)?;
            let unit = t.div(v[0], norms)?;
            let unit_t = t.transpose2d(unit)?;
            let cos = t.matmul(unit, unit_t)?;
            let e = t.exp(cos)?;
            let total = t.sum(e, &[1], false)?;
            let pos = t.index_select(e, 1, &[0])?;
            let pos = t.reshape(pos, vec![3])?;
            let lp = t.log(pos)?;
            let lt = t.log(total)?;
            let diff = t.sub(lp, lt)?;
            let m = t.mean(diff, &[], false)?;
            weighted_sum(t, m, r)
        });
    }

    GradSweep { instances, max_rel }
}
