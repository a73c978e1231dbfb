//! Finite-difference gradient checks for every differentiable primitive.
//!
//! Shared by the unit tests, the `verify` command and the acceptance suite.
//! Each case contracts the op output with a fixed random tensor so that a
//! single scalar objective exercises every output coordinate.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::gradcheck::{grad_check, GradCheckOptions};
use crate::encoders::{AppearanceConfig, ConvStage, SemanticConfig, SideInfoConfig};
use crate::losses::{self, LossConfig};
use crate::model::{Batch, Model, ModelConfig};
use crate::nn::Graph;
use crate::ops::{self, Mode, RunningStats, BN_EPS};
use crate::tape::{Tape, Var};
use crate::tensor::{ParamSet, Tensor};

/// Tolerance for ops that are linear in every input.
pub const LINEAR_TOL: f64 = 1e-6;
/// Tolerance for everything else.
pub const GENERAL_TOL: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

type Build = fn(&mut Tape, &ParamSet) -> Result<Var>;

struct Case {
    name: &'static str,
    tolerance: f64,
    params: Vec<(&'static str, Vec<usize>)>,
    /// Keep every coordinate at least this far from zero (for kinks at 0).
    min_abs: f64,
    build: Build,
}

fn random_params(specs: &[(&'static str, Vec<usize>)], min_abs: f64, rng: &mut ChaCha8Rng) -> ParamSet {
    let mut ps = ParamSet::new();
    for (name, shape) in specs {
        let mut t = Tensor::randn(shape, 1.0, rng);
        if min_abs > 0.0 {
            for v in t.data_mut() {
                *v = v.signum() * (min_abs + v.abs());
            }
        }
        ps.insert(*name, t.into_param());
    }
    ps
}

/// `Σ out ⊙ R` for a fixed `R` derived from `seed`.
fn contract(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let numel = tape.value(out).numel();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r: Vec<f64> = (0..numel).map(|_| rng.random_range(-1.0..1.0)).collect();
    let flat = ops::reshape(tape, out, vec![1, numel])?;
    let r = tape.constant(Tensor::new(vec![numel, 1], r)?);
    ops::linear(tape, flat, r, None)
}

/// Runs `build` under a grad check, scaling the upstream gradient of op
/// `perturb.0` by `perturb.1` when given.
pub fn check_objective(
    params: &ParamSet,
    opts: &GradCheckOptions,
    perturb: Option<(&str, f64)>,
    mut objective: impl FnMut(&mut Tape, &ParamSet) -> Result<Var>,
) -> Result<f64> {
    let report = grad_check(params, opts, |p, need| {
        let mut tape = Tape::new();
        if let Some((op, f)) = perturb {
            tape.set_perturbation(op, f);
        }
        let loss = objective(&mut tape, p)?;
        let value = tape.scalar(loss);
        let grads = if need { Some(tape.backward(loss)?.into_params()) } else { None };
        Ok((value, grads))
    })?;
    Ok(report.max_rel_error)
}

fn cases() -> Vec<Case> {
    let p = |name: &'static str, shape: &[usize]| (name, shape.to_vec());
    vec![
        Case {
            name: "linear",
            tolerance: LINEAR_TOL,
            params: vec![p("x", &[3, 4]), p("w", &[4, 5]), p("b", &[5])],
            min_abs: 0.0,
            build: |t, ps| {
                let (x, w, b) = (t.param(ps, "x")?, t.param(ps, "w")?, t.param(ps, "b")?);
                ops::linear(t, x, w, Some(b))
            },
        },
        Case {
            name: "concat_last",
            tolerance: LINEAR_TOL,
            params: vec![p("a", &[3, 2]), p("b", &[3, 4])],
            min_abs: 0.0,
            build: |t, ps| {
                let (a, b) = (t.param(ps, "a")?, t.param(ps, "b")?);
                ops::concat_last(t, a, b)
            },
        },
        Case {
            name: "global_avg_pool",
            tolerance: LINEAR_TOL,
            params: vec![p("x", &[2, 3, 3, 2])],
            min_abs: 0.0,
            build: |t, ps| {
                let x = t.param(ps, "x")?;
                ops::global_avg_pool(t, x)
            },
        },
        Case {
            name: "add",
            tolerance: LINEAR_TOL,
            params: vec![p("a", &[2, 3]), p("b", &[2, 3])],
            min_abs: 0.0,
            build: |t, ps| {
                let (a, b) = (t.param(ps, "a")?, t.param(ps, "b")?);
                ops::add(t, a, b)
            },
        },
        Case {
            name: "select_rows",
            tolerance: LINEAR_TOL,
            params: vec![p("x", &[6, 3])],
            min_abs: 0.0,
            build: |t, ps| {
                let x = t.param(ps, "x")?;
                ops::select_rows(t, x, 3, 1)
            },
        },
        Case {
            name: "assemble_tokens",
            tolerance: LINEAR_TOL,
            params: vec![p("patches", &[4, 3]), p("cls", &[1, 3]), p("pos", &[3, 3])],
            min_abs: 0.0,
            build: |t, ps| {
                let (x, c, pos) = (t.param(ps, "patches")?, t.param(ps, "cls")?, t.param(ps, "pos")?);
                ops::assemble_tokens(t, x, c, pos, 2)
            },
        },
        Case {
            name: "gather_rows",
            tolerance: LINEAR_TOL,
            params: vec![p("table", &[4, 3])],
            min_abs: 0.0,
            build: |t, ps| {
                let table = t.param(ps, "table")?;
                ops::gather_rows(t, table, &[2, 0, 2, 3])
            },
        },
        Case {
            name: "conv2d",
            tolerance: GENERAL_TOL,
            params: vec![p("x", &[2, 2, 5, 4]), p("w", &[3, 2, 3, 3]), p("b", &[3])],
            min_abs: 0.0,
            build: |t, ps| {
                let (x, w, b) = (t.param(ps, "x")?, t.param(ps, "w")?, t.param(ps, "b")?);
                ops::conv2d(t, x, w, Some(b), 2, 1)
            },
        },
        Case {
            name: "batch_norm_train",
            tolerance: GENERAL_TOL,
            params: vec![p("x", &[4, 3, 2, 2]), p("gamma", &[3]), p("beta", &[3])],
            min_abs: 0.0,
            build: |t, ps| {
                let (x, g, b) = (t.param(ps, "x")?, t.param(ps, "gamma")?, t.param(ps, "beta")?);
                Ok(ops::batch_norm(t, x, g, b, Mode::Train, &RunningStats::identity(3), BN_EPS)?.out)
            },
        },
        Case {
            name: "batch_norm_eval",
            tolerance: GENERAL_TOL,
            params: vec![p("x", &[3, 4]), p("gamma", &[4]), p("beta", &[4])],
            min_abs: 0.0,
            build: |t, ps| {
                let (x, g, b) = (t.param(ps, "x")?, t.param(ps, "gamma")?, t.param(ps, "beta")?);
                let running = RunningStats {
                    mean: vec![0.1, -0.2, 0.3, 0.0],
                    var: vec![0.5, 1.5, 2.0, 1.0],
                };
                Ok(ops::batch_norm(t, x, g, b, Mode::Eval, &running, BN_EPS)?.out)
            },
        },
        Case {
            name: "layer_norm",
            tolerance: GENERAL_TOL,
            params: vec![p("x", &[3, 5]), p("gamma", &[5]), p("beta", &[5])],
            min_abs: 0.0,
            build: |t, ps| {
                let (x, g, b) = (t.param(ps, "x")?, t.param(ps, "gamma")?, t.param(ps, "beta")?);
                ops::layer_norm(t, x, g, b, 1e-5)
            },
        },
        Case {
            name: "relu",
            tolerance: GENERAL_TOL,
            params: vec![p("x", &[3, 4])],
            min_abs: 0.05,
            build: |t, ps| {
                let x = t.param(ps, "x")?;
                ops::relu(t, x)
            },
        },
        Case {
            name: "gelu",
            tolerance: GENERAL_TOL,
            params: vec![p("x", &[3, 4])],
            min_abs: 0.0,
            build: |t, ps| {
                let x = t.param(ps, "x")?;
                ops::gelu(t, x)
            },
        },
        Case {
            name: "l2_normalize",
            tolerance: GENERAL_TOL,
            params: vec![p("x", &[3, 4])],
            min_abs: 0.0,
            build: |t, ps| {
                let x = t.param(ps, "x")?;
                ops::l2_normalize(t, x, 1e-12)
            },
        },
        Case {
            name: "self_attention",
            tolerance: GENERAL_TOL,
            params: vec![p("qkv", &[6, 12])],
            min_abs: 0.0,
            build: |t, ps| {
                let x = t.param(ps, "qkv")?;
                ops::self_attention(t, x, 2, 2)
            },
        },
        Case {
            name: "group_gate",
            tolerance: GENERAL_TOL,
            params: vec![p("y", &[3, 8]), p("w", &[5])],
            min_abs: 0.0,
            build: |t, ps| {
                let (y, w) = (t.param(ps, "y")?, t.param(ps, "w")?);
                ops::group_gate(t, y, w, 4)
            },
        },
        Case {
            name: "classify",
            tolerance: LINEAR_TOL,
            params: vec![p("t", &[4, 3]), p("w_cls", &[3, 5])],
            min_abs: 0.0,
            build: |t, ps| {
                let (f, w) = (t.param(ps, "t")?, t.param(ps, "w_cls")?);
                losses::classify(t, f, w)
            },
        },
        Case {
            name: "smooth_ce",
            tolerance: GENERAL_TOL,
            params: vec![p("logits", &[6, 5])],
            min_abs: 0.0,
            build: |t, ps| {
                let l = t.param(ps, "logits")?;
                losses::smooth_ce(t, l, &[0, 4, 2, 2, 1, 3], 0.1)
            },
        },
        Case {
            name: "supcon",
            tolerance: 1e-5,
            params: vec![p("features", &[8, 6])],
            min_abs: 0.0,
            build: |t, ps| {
                let f = t.param(ps, "features")?;
                losses::supcon(t, f, &[0, 0, 1, 1, 2, 2, 3, 3], 0.07)
            },
        },
        Case {
            name: "triplet",
            tolerance: GENERAL_TOL,
            params: vec![p("features", &[8, 6])],
            min_abs: 0.0,
            build: |t, ps| {
                let f = t.param(ps, "features")?;
                losses::triplet(t, f, &[0, 0, 1, 1, 2, 2, 3, 3], 0.3)
            },
        },
    ]
}

/// Names of all primitives covered by [`op_grad_checks`].
pub fn op_names() -> Vec<&'static str> {
    cases().iter().map(|c| c.name).collect()
}

/// Grad-checks every primitive in double precision with the default step.
pub fn op_grad_checks(perturb: Option<(&str, f64)>) -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();
    for (i, case) in cases().into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + i as u64);
        let params = random_params(&case.params, case.min_abs, &mut rng);
        let build = case.build;
        let seed = 7 + i as u64;
        let err = check_objective(&params, &GradCheckOptions::default(), perturb, |t, ps| {
            let y = build(t, ps)?;
            contract(t, y, seed)
        })?;
        out.push(CheckOutcome {
            name: case.name.to_string(),
            max_rel_error: err,
            tolerance: case.tolerance,
        });
    }
    Ok(out)
}

/// Miniature full model for the composed-loss check: 16×16 inputs, two conv
/// stages, a one-block transformer, AFEM with two groups and a side table.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        appearance: AppearanceConfig {
            stages: vec![ConvStage { channels: 4, stride: 2 }, ConvStage { channels: 6, stride: 2 }],
            input_size: [16, 16],
            conv_bias: false,
        },
        semantic: SemanticConfig {
            patch_size: 8,
            d_s: 6,
            depth: 1,
            heads: 2,
            mlp_ratio: 2,
            ..Default::default()
        },
        d_f: 8,
        groups: 2,
        use_semantic: true,
        use_afem: true,
        side_info: SideInfoConfig {
            enabled: true,
            num_cameras: 2,
            num_viewpoints: 2,
        },
        classifier_init_std: 0.1,
    }
}

/// Eight random samples, four identities × two.
pub fn tiny_batch(cfg: &ModelConfig, seed: u64) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [h, w] = cfg.appearance.input_size;
    let n = 8;
    let data = (0..n * 3 * h * w).map(|_| rng.random_range(0.0..1.0)).collect();
    Batch {
        images: Tensor::new(vec![n, 3, h, w], data).expect("batch shape"),
        keys: (0..n).map(|i| format!("s{i}")).collect(),
        labels: vec![0, 0, 1, 1, 2, 2, 3, 3],
        cameras: (0..n).map(|i| i % 2).collect(),
        viewpoints: (0..n).map(|i| (i / 2) % 2).collect(),
    }
}

/// Train-mode total loss of `model` on `batch`.
pub fn model_loss(
    model: &Model,
    params: &ParamSet,
    batch: &Batch,
    loss: &LossConfig,
    perturb: Option<(&str, f64)>,
) -> Result<(Tape, Var)> {
    let mut g = Graph::new(params, &model.buffers, Mode::Train);
    if let Some((op, f)) = perturb {
        g.tape.set_perturbation(op, f);
    }
    let out = model.forward(&mut g, batch)?;
    let terms = losses::total_loss(&mut g.tape, out.logits, out.features.t, &batch.labels, loss)?;
    Ok((g.tape, terms.total))
}

/// Grad-checks the composed training loss of [`tiny_model_config`] over
/// every parameter except those whose gradient is identically zero; for
/// those the analytic gradient itself must vanish.
pub fn model_grad_check(perturb: Option<(&str, f64)>) -> Result<CheckOutcome> {
    let model = Model::new(tiny_model_config(), 4, 3407)?;
    let batch = tiny_batch(&model.config, 17);
    let loss = LossConfig::default();
    let skip = model.structurally_zero_grad();
    let opts = GradCheckOptions {
        skip: skip.clone(),
        ..Default::default()
    };
    let report = grad_check(&model.params, &opts, |p, need| {
        let (tape, l) = model_loss(&model, p, &batch, &loss, perturb)?;
        let grads = if need { Some(tape.backward(l)?.into_params()) } else { None };
        Ok((tape.scalar(l), grads))
    })?;
    let (tape, l) = model_loss(&model, &model.params, &batch, &loss, perturb)?;
    let grads = tape.backward(l)?;
    let mut err = report.max_rel_error;
    for name in &skip {
        let leak = grads.params().get(name).map_or(0.0, |g| g.iter().fold(0.0f64, |m, v| m.max(v.abs())));
        if leak > 1e-12 {
            err = f64::INFINITY;
        }
    }
    Ok(CheckOutcome {
        name: "full_model_loss".into(),
        max_rel_error: err,
        tolerance: GENERAL_TOL,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes() {
        for o in op_grad_checks(None).unwrap() {
            assert!(o.passed(), "{} rel err {:e} > {:e}", o.name, o.max_rel_error, o.tolerance);
        }
    }

    #[test]
    fn perturbed_backward_is_caught_and_named() {
        let outcomes = op_grad_checks(Some(("group_gate", 1.5))).unwrap();
        let failed: Vec<_> = outcomes.iter().filter(|o| !o.passed()).map(|o| o.name.as_str()).collect();
        assert_eq!(failed, ["group_gate"]);
    }

    #[test]
    fn full_model_passes() {
        let o = model_grad_check(None).unwrap();
        assert!(o.passed(), "{o:?}");
    }
}
