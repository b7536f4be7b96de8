//! Finite-difference checks of every differentiable tape op and of the full
//! model loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoding::{build_vocab, encode, Example, Polarity};
use crate::error::Result;
use crate::layer::{AblationMode, LayerConfig};
use crate::model::{forward_on_tape, loss, ModelConfig, ModelParams};
use crate::tensor::{grad_check_many, Tape, Tensor, Var, LN_EPS};

/// One line of a gradient-check report.
#[derive(Debug, Clone, PartialEq)]
pub struct OpCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub coordinates: usize,
    pub passed: bool,
}

type Objective = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

/// Names of the ops covered by [`gradcheck_suite`], in report order.
pub const OPS: [&str; 19] = [
    "matmul",
    "transpose",
    "add",
    "sub",
    "mul",
    "scale",
    "rsub_scalar",
    "sigmoid",
    "relu",
    "softmax_rows",
    "layer_norm",
    "conv1d_same",
    "mean_rows",
    "add_bias",
    "concat_cols",
    "gather_rows",
    "reshape",
    "sum",
    "nll",
];

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("valid shape")
}

/// Values bounded away from zero, so `relu` is never probed at its kink.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.2..1.5);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("valid shape")
}

/// `Σ y ⊙ r` for a fixed random `r`, turning any op output into a scalar.
fn weighted_sum(tape: &mut Tape, y: Var, r: &Tensor) -> Result<Var> {
    let r = tape.constant(r.clone());
    let p = tape.mul(y, r)?;
    Ok(tape.sum(p))
}

fn op_case(name: &str, rng: &mut ChaCha8Rng) -> (Vec<Tensor>, Objective) {
    let (n, d) = (4, 3);
    let w = |rng: &mut ChaCha8Rng, s: &[usize]| uniform(rng, s, -1.0, 1.0);
    match name {
        "matmul" => {
            let r = w(rng, &[n, 2]);
            (
                vec![w(rng, &[n, d]), w(rng, &[d, 2])],
                Box::new(move |t, v| {
                    let y = t.matmul(v[0], v[1])?;
                    weighted_sum(t, y, &r)
                }),
            )
        }
        "transpose" => {
            let r = w(rng, &[d, n]);
            (
                vec![w(rng, &[n, d])],
                Box::new(move |t, v| {
                    let y = t.transpose(v[0])?;
                    weighted_sum(t, y, &r)
                }),
            )
        }
        "add" | "sub" | "mul" => {
            let r = w(rng, &[n, d]);
            let op = name.to_string();
            (
                vec![w(rng, &[n, d]), w(rng, &[n, d])],
                Box::new(move |t, v| {
                    let y = match op.as_str() {
                        "add" => t.add(v[0], v[1])?,
                        "sub" => t.sub(v[0], v[1])?,
                        _ => t.mul(v[0], v[1])?,
                    };
                    weighted_sum(t, y, &r)
                }),
            )
        }
        "scale" | "rsub_scalar" | "sigmoid" | "relu" | "softmax_rows" => {
            let r = w(rng, &[n, d]);
            let x = if name == "relu" {
                off_zero(rng, &[n, d])
            } else {
                uniform(rng, &[n, d], -2.0, 2.0)
            };
            let op = name.to_string();
            (
                vec![x],
                Box::new(move |t, v| {
                    let y = match op.as_str() {
                        "scale" => t.scale(v[0], -1.7),
                        "rsub_scalar" => t.rsub_scalar(0.3, v[0]),
                        "sigmoid" => t.sigmoid(v[0]),
                        "relu" => t.relu(v[0]),
                        _ => t.softmax_rows(v[0]),
                    };
                    weighted_sum(t, y, &r)
                }),
            )
        }
        "layer_norm" => {
            let r = w(rng, &[n, 5]);
            (
                vec![
                    uniform(rng, &[n, 5], -2.0, 2.0),
                    uniform(rng, &[5], 0.5, 1.5),
                    w(rng, &[5]),
                ],
                Box::new(move |t, v| {
                    let y = t.layer_norm(v[0], v[1], v[2], LN_EPS)?;
                    weighted_sum(t, y, &r)
                }),
            )
        }
        "conv1d_same" => {
            let r = w(rng, &[5, 2]);
            (
                vec![w(rng, &[5, d]), w(rng, &[3, d, 2]), w(rng, &[2])],
                Box::new(move |t, v| {
                    let y = t.conv1d_same(v[0], v[1], v[2])?;
                    weighted_sum(t, y, &r)
                }),
            )
        }
        "mean_rows" => {
            let r = w(rng, &[d]);
            (
                vec![w(rng, &[n, d])],
                Box::new(move |t, v| {
                    let y = t.mean_rows(v[0], &[1.0, 0.0, 1.0, 1.0])?;
                    weighted_sum(t, y, &r)
                }),
            )
        }
        "add_bias" => {
            let r = w(rng, &[n, d]);
            (
                vec![w(rng, &[n, d]), w(rng, &[d])],
                Box::new(move |t, v| {
                    let y = t.add_bias(v[0], v[1])?;
                    weighted_sum(t, y, &r)
                }),
            )
        }
        "concat_cols" => {
            let r = w(rng, &[n, d + 2]);
            (
                vec![w(rng, &[n, d]), w(rng, &[n, 2])],
                Box::new(move |t, v| {
                    let y = t.concat_cols(&[v[0], v[1]])?;
                    weighted_sum(t, y, &r)
                }),
            )
        }
        "gather_rows" => {
            let r = w(rng, &[5, d]);
            (
                vec![w(rng, &[n, d])],
                Box::new(move |t, v| {
                    let y = t.gather_rows(v[0], &[2, 0, 2, 3, 2])?;
                    weighted_sum(t, y, &r)
                }),
            )
        }
        "reshape" => {
            let r = w(rng, &[d, n]);
            (
                vec![w(rng, &[n, d])],
                Box::new(move |t, v| {
                    let y = t.reshape(v[0], vec![d, n])?;
                    weighted_sum(t, y, &r)
                }),
            )
        }
        "sum" => (
            vec![w(rng, &[n, d])],
            Box::new(|t, v| {
                let sq = t.mul(v[0], v[0])?;
                Ok(t.sum(sq))
            }),
        ),
        "nll" => {
            let gold = rng.gen_range(0..3);
            (
                vec![uniform(rng, &[1, 3], 0.1, 1.0)],
                Box::new(move |t, v| t.nll(v[0], gold)),
            )
        }
        other => unreachable!("no gradcheck case for {other}"),
    }
}

/// Checks every op of [`OPS`] on seeded random inputs.
pub fn check_ops(seed: u64, eps: f64, tol: f64) -> Result<Vec<OpCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    OPS.iter()
        .map(|&name| {
            let (inputs, f) = op_case(name, &mut rng);
            let rep = grad_check_many(f, &inputs, eps, tol)?;
            Ok(OpCheck {
                name: name.to_string(),
                max_rel_error: rep.max_rel_error,
                coordinates: rep.coordinates,
                passed: rep.passed,
            })
        })
        .collect()
}

/// Small model, a padded two-aspect input and randomly perturbed parameters.
pub fn model_fixture(
    seed: u64,
    d_model: usize,
    heads: usize,
) -> Result<(ModelConfig, ModelParams, crate::encoding::EncodedInput)> {
    let ex = Example::from_text("the tasty food but a rude waiter", "waiter", Polarity::Negative)?;
    let vocab = build_vocab(std::slice::from_ref(&ex), 1)?;
    let cfg = ModelConfig {
        vocab_size: vocab.len(),
        max_len: 14,
        layers: 1,
        layer: LayerConfig {
            d_model,
            heads,
            d_ff: 2 * d_model,
            gate_width: 3,
            ln_eps: LN_EPS,
            double_ln: true,
        },
        pool_special: true,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ModelParams::init(&cfg, &mut rng)?;
    for t in params.flat_mut() {
        for v in t.data_mut() {
            *v += rng.gen_range(-0.1..0.1);
        }
    }
    let enc = encode(&ex, &vocab, cfg.max_len)?;
    Ok((cfg, params, enc))
}

/// Checks the cross-entropy loss gradient with respect to every parameter.
pub fn check_model_loss(
    seed: u64,
    d_model: usize,
    heads: usize,
    mode: AblationMode,
    eps: f64,
    tol: f64,
) -> Result<OpCheck> {
    let (cfg, params, enc) = model_fixture(seed, d_model, heads)?;
    let inputs: Vec<Tensor> = params.flat().into_iter().cloned().collect();
    let rep = grad_check_many(
        |tape, vars| {
            let w = params.rebuild(vars)?;
            let out = forward_on_tape(tape, &enc, &w, &cfg, mode, &mut None)?;
            loss(tape, &out, enc.label)
        },
        &inputs,
        eps,
        tol,
    )?;
    Ok(OpCheck {
        name: format!("model_loss[{mode}]"),
        max_rel_error: rep.max_rel_error,
        coordinates: rep.coordinates,
        passed: rep.passed,
    })
}

/// Every op plus the model loss in each ablation mode.
pub fn gradcheck_suite(seed: u64, d_model: usize, heads: usize, eps: f64, tol: f64) -> Result<Vec<OpCheck>> {
    let mut out = check_ops(seed, eps, tol)?;
    for mode in AblationMode::ALL {
        out.push(check_model_loss(seed, d_model, heads, mode, eps, tol)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::DEFAULT_FD_EPS;

    #[test]
    fn ops_pass_at_default_tolerance() {
        for c in check_ops(3, DEFAULT_FD_EPS, 1e-4).unwrap() {
            assert!(c.passed, "{c:?}");
        }
    }

    #[test]
    fn each_op_listed_once() {
        let names: Vec<String> = check_ops(0, DEFAULT_FD_EPS, 1e-4)
            .unwrap()
            .into_iter()
            .map(|c| c.name)
            .collect();
        let mut dedup = names.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), names.len());
        assert_eq!(names.len(), OPS.len());
    }

    #[test]
    fn model_loss_passes() {
        let c = check_model_loss(1, 8, 2, AblationMode::Full, DEFAULT_FD_EPS, 1e-4).unwrap();
        assert!(c.passed, "{c:?}");
    }

    #[test]
    fn tiny_tolerance_fails() {
        let checks = check_ops(0, DEFAULT_FD_EPS, 1e-12).unwrap();
        assert!(checks.iter().any(|c| !c.passed));
    }
}
