//! Helpers shared by several integration test targets.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use srl_core::autodiff::{grad_check, AutodiffError, GradCheckReport, Tape, Tensor, Var, FD_STEP};

pub type ModelFn = fn(&mut Tape, &[Var]) -> Result<Var, AutodiffError>;

/// A scalar-valued graph over random inputs of the given shapes.
pub struct GradCase {
    pub name: &'static str,
    pub shapes: Vec<Vec<usize>>,
    pub model: ModelFn,
}

fn case(name: &'static str, shapes: &[&[usize]], model: ModelFn) -> GradCase {
    GradCase {
        name,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        model,
    }
}

fn linear(t: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var, AutodiffError> {
    let y = t.matmul(x, w)?;
    t.add_row(y, b)
}

fn nhwc(t: &mut Tape, x: Var, n: usize, s: usize, c: usize) -> Result<Var, AutodiffError> {
    t.reshape(x, vec![n, s, s, c])
}

/// Op combinations and small architectures covering every tape op.
pub fn grad_cases() -> Vec<GradCase> {
    vec![
        case("matmul_sum", &[&[3, 4], &[4, 2]], |t, v| {
            let y = t.matmul(v[0], v[1])?;
            t.sum(y)
        }),
        case("add_sub_mul", &[&[2, 3], &[2, 3], &[2, 3]], |t, v| {
            let a = t.add(v[0], v[1])?;
            let b = t.sub(a, v[2])?;
            let c = t.mul(b, v[0])?;
            t.sum(c)
        }),
        case("relu_weighted", &[&[4, 3], &[4, 3]], |t, v| {
            let r = t.relu(v[0])?;
            let y = t.mul(r, v[1])?;
            t.sum(y)
        }),
        case("tanh_mean", &[&[3, 5]], |t, v| {
            let y = t.tanh(v[0])?;
            let y = t.mul(y, y)?;
            t.mean(y)
        }),
        case("exp_scale_shift", &[&[6]], |t, v| {
            let e = t.exp(v[0])?;
            let e = t.scale(e, 0.3)?;
            let e = t.add_scalar(e, -1.0)?;
            let e = t.mul(e, e)?;
            t.sum(e)
        }),
        case("softmax_weighted", &[&[3, 4], &[3, 4]], |t, v| {
            let p = t.softmax(v[0])?;
            let y = t.mul(p, v[1])?;
            t.sum(y)
        }),
        case("log_softmax_weighted", &[&[2, 5], &[2, 5]], |t, v| {
            let p = t.log_softmax(v[0])?;
            let y = t.mul(p, v[1])?;
            t.sum(y)
        }),
        case("slice_concat", &[&[3, 6], &[3, 2]], |t, v| {
            let a = t.slice(v[0], 1, 4)?;
            let c = t.concat(&[v[1], a])?;
            let d = t.mul(c, c)?;
            let e = t.tanh(d)?;
            t.sum(e)
        }),
        case("mse", &[&[4, 3], &[4, 3]], |t, v| t.mse(v[0], v[1])),
        case("cross_entropy", &[&[5, 3]], |t, v| {
            t.softmax_cross_entropy(v[0], &[0, 2, 1, 1, 0])
        }),
        case("weighted_cross_entropy", &[&[4, 3]], |t, v| {
            t.weighted_cross_entropy(v[0], &[2, 0, 1, 2], &[0.5, 1.0, 3.0])
        }),
        case("reshape_flatten", &[&[2, 2, 3], &[6, 2]], |t, v| {
            let f = t.flatten(v[0])?;
            let y = t.matmul(f, v[1])?;
            let y = t.tanh(y)?;
            t.sum(y)
        }),
        case("gather", &[&[4, 3], &[4]], |t, v| {
            let g = t.gather(v[0], &[2, 0, 1, 2])?;
            let y = t.mul(g, v[1])?;
            let y = t.exp(y)?;
            t.sum(y)
        }),
        case("minimum", &[&[8], &[8]], |t, v| {
            let m = t.minimum(v[0], v[1])?;
            let m = t.mul(m, v[0])?;
            t.sum(m)
        }),
        case("clamp", &[&[8]], |t, v| {
            let c = t.clamp(v[0], -0.5, 0.5)?;
            let c = t.mul(c, v[0])?;
            t.sum(c)
        }),
        case(
            "conv_stride1",
            &[&[2 * 5 * 5 * 2], &[3 * 3 * 2, 3]],
            |t, v| {
                let x = nhwc(t, v[0], 2, 5, 2)?;
                let y = t.conv2d(x, v[1], 3, 1)?;
                let y = t.tanh(y)?;
                t.sum(y)
            },
        ),
        case("conv_stride2", &[&[1 * 6 * 6 * 1], &[2 * 2, 2]], |t, v| {
            let x = nhwc(t, v[0], 1, 6, 1)?;
            let y = t.conv2d(x, v[1], 2, 2)?;
            let y = t.mul(y, y)?;
            t.mean(y)
        }),
        case(
            "spatial_soft_argmax",
            &[&[2 * 4 * 4 * 3], &[2, 6]],
            |t, v| {
                let x = nhwc(t, v[0], 2, 4, 3)?;
                let k = t.spatial_soft_argmax(x)?;
                let y = t.mul(k, v[1])?;
                t.sum(y)
            },
        ),
        case(
            "mlp_tanh",
            &[&[3, 4], &[4, 5], &[5], &[5, 2], &[2]],
            |t, v| {
                let h = linear(t, v[0], v[1], v[2])?;
                let h = t.tanh(h)?;
                let o = linear(t, h, v[3], v[4])?;
                let o = t.mul(o, o)?;
                t.sum(o)
            },
        ),
        case(
            "mlp_relu_ce",
            &[&[4, 3], &[3, 6], &[6], &[6, 3], &[3]],
            |t, v| {
                let h = linear(t, v[0], v[1], v[2])?;
                let h = t.relu(h)?;
                let o = linear(t, h, v[3], v[4])?;
                t.softmax_cross_entropy(o, &[0, 1, 2, 1])
            },
        ),
        case(
            "conv_keypoint_encoder",
            &[&[2 * 6 * 6 * 1], &[2 * 2, 3], &[3], &[6, 2], &[2]],
            |t, v| {
                let x = nhwc(t, v[0], 2, 6, 1)?;
                let c = t.conv2d(x, v[1], 2, 2)?;
                let c = t.reshape(c, vec![2 * 3 * 3, 3])?;
                let c = t.add_row(c, v[2])?;
                let c = t.relu(c)?;
                let c = t.reshape(c, vec![2, 3, 3, 3])?;
                let k = t.spatial_soft_argmax(c)?;
                let s = linear(t, k, v[3], v[4])?;
                let s = t.tanh(s)?;
                t.sum(s)
            },
        ),
        case(
            "conv_flatten_classifier",
            &[&[2 * 4 * 4 * 2], &[2 * 2 * 2, 2], &[8, 3], &[3]],
            |t, v| {
                let x = nhwc(t, v[0], 2, 4, 2)?;
                let c = t.conv2d(x, v[1], 2, 2)?;
                let f = t.flatten(c)?;
                let o = linear(t, f, v[2], v[3])?;
                t.softmax_cross_entropy(o, &[1, 2])
            },
        ),
        case(
            "split_heads",
            &[&[4, 5], &[5, 6], &[2, 3], &[4, 4]],
            |t, v| {
                // two heads reading disjoint slices of one shared state
                let s = t.matmul(v[0], v[1])?;
                let a = t.slice(s, 0, 2)?;
                let b = t.slice(s, 2, 6)?;
                let ha = t.matmul(a, v[2])?;
                let la = t.softmax_cross_entropy(ha, &[0, 1, 2, 0])?;
                let lb = t.mse(b, v[3])?;
                let lb = t.scale(lb, 2.0)?;
                t.add(la, lb)
            },
        ),
        case("clipped_surrogate", &[&[6, 4], &[6], &[6]], |t, v| {
            // -mean(min(r A, clip(r) A)) with r = exp(logp - old)
            let lp = t.log_softmax(v[0])?;
            let g = t.gather(lp, &[0, 1, 2, 3, 0, 1])?;
            let d = t.sub(g, v[1])?;
            let r = t.exp(d)?;
            let ra = t.mul(r, v[2])?;
            let rc = t.clamp(r, 0.8, 1.2)?;
            let rca = t.mul(rc, v[2])?;
            let m = t.minimum(ra, rca)?;
            let m = t.mean(m)?;
            t.scale(m, -1.0)
        }),
    ]
}

/// Runs a case at random points, redrawing inputs whose relu or clamp
/// arguments sit too close to a kink for central differences.
pub fn check_case(
    case: &GradCase,
    seed: u64,
    tolerance: f64,
) -> Result<GradCheckReport, AutodiffError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..50 {
        let inputs: Vec<Tensor> = case
            .shapes
            .iter()
            .map(|s| {
                let n: usize = s.iter().product();
                Tensor::new(
                    s.clone(),
                    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
                )
                .unwrap()
            })
            .collect();
        if near_kink(case, &inputs) {
            continue;
        }
        let report = grad_check(case.model, &inputs, tolerance)?;
        if report.kink_margin.is_some_and(|m| m < 100.0 * FD_STEP) {
            continue;
        }
        return Ok(report);
    }
    panic!("{}: could not draw a point away from kinks", case.name);
}

/// Ties in `minimum` and clamp boundaries are non-differentiable; detect
/// them by comparing one-sided differences on the scalar output.
fn near_kink(case: &GradCase, inputs: &[Tensor]) -> bool {
    let eval = |xs: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = (case.model)(&mut tape, &vars).unwrap();
        tape.value(out).item()
    };
    let h = 1e-4;
    let f0 = eval(inputs);
    let mut probe = inputs.to_vec();
    for i in 0..inputs.len() {
        for j in 0..inputs[i].len() {
            let orig = inputs[i].data()[j];
            probe[i].data_mut()[j] = orig + h;
            let up = (eval(&probe) - f0) / h;
            probe[i].data_mut()[j] = orig - h;
            let down = (f0 - eval(&probe)) / h;
            probe[i].data_mut()[j] = orig;
            // a smooth function has nearly equal one-sided slopes
            if (up - down).abs() > 1e-2 * (1.0 + up.abs().max(down.abs())) {
                return true;
            }
        }
    }
    false
}
