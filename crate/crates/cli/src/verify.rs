//! The `verify` oracle suite.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use csen_core::checkpoint::Checkpoint;
use csen_core::checks::{self, tiny_batch, tiny_model_config};
use csen_core::evaluation::{
    cmc_map, cmc_map_bruteforce, k_reciprocal_rerank, k_reciprocal_rerank_oracle, EvalProtocol, Labels,
    RerankConfig,
};
use csen_core::losses::{self, LossConfig};
use csen_core::model::Model;
use csen_core::ops;
use csen_core::training::{train_step, Precision, TrainConfig, TrainState};
use csen_core::{Tape, Tensor};

use crate::CliError;

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub checks: Vec<Check>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

pub fn parse_perturb(s: &str) -> Result<(String, f64), CliError> {
    let bad = || CliError::Usage(format!("--perturb expects op:factor, got `{s}`"));
    let (op, f) = s.split_once(':').ok_or_else(bad)?;
    let f: f64 = f.parse().map_err(|_| bad())?;
    if !checks::op_names().contains(&op) {
        return Err(CliError::Usage(format!(
            "--perturb: unknown op `{op}` (known: {})",
            checks::op_names().join(", ")
        )));
    }
    Ok((op.to_string(), f))
}

fn within(name: impl Into<String>, err: f64, tol: f64) -> Check {
    Check {
        name: name.into(),
        passed: err <= tol,
        detail: format!("max error {err:.3e}, tolerance {tol:.0e}"),
    }
}

/// Runs every check; a check that errors out is recorded as failed.
pub fn run_suite(perturb: Option<(&str, f64)>) -> Result<VerifyReport, CliError> {
    let mut out = Vec::new();
    match checks::op_grad_checks(perturb) {
        Ok(list) => {
            for o in list {
                out.push(within(format!("grad:{}", o.name), o.max_rel_error, o.tolerance));
            }
        }
        Err(e) => out.push(errored("grad:ops", e)),
    }
    match checks::model_grad_check(perturb) {
        Ok(o) => out.push(within(format!("grad:{}", o.name), o.max_rel_error, o.tolerance)),
        Err(e) => out.push(errored("grad:full_model_loss", e)),
    }
    let groups: [(&str, fn() -> csen_core::Result<Vec<Check>>); 5] = [
        ("loss", loss_closed_forms),
        ("metric", metric_oracle),
        ("rerank", rerank_oracle),
        ("afem", afem_examples),
        ("checkpoint", checkpoint_round_trip),
    ];
    for (name, f) in groups {
        match f() {
            Ok(list) => out.extend(list),
            Err(e) => out.push(errored(name, e)),
        }
    }
    Ok(VerifyReport { checks: out })
}

fn errored(name: &str, e: csen_core::Error) -> Check {
    Check {
        name: name.to_string(),
        passed: false,
        detail: format!("error: {e}"),
    }
}

fn smooth_ce_value(logits: Tensor, labels: &[usize], eps: f64) -> csen_core::Result<f64> {
    let mut t = Tape::new();
    let l = t.constant(logits);
    let v = losses::smooth_ce(&mut t, l, labels, eps)?;
    Ok(t.scalar(v))
}

fn supcon_value(f: Tensor, labels: &[usize], tau: f64) -> csen_core::Result<f64> {
    let mut t = Tape::new();
    let v = t.constant(f);
    let s = losses::supcon(&mut t, v, labels, tau)?;
    Ok(t.scalar(s))
}

fn loss_closed_forms() -> csen_core::Result<Vec<Check>> {
    let mut out = Vec::new();
    let uniform = Tensor::full(&[4, 4], 0.3);
    for eps in [0.0, 0.1] {
        let v = smooth_ce_value(uniform.clone(), &[0, 1, 2, 3], eps)?;
        out.push(within(format!("loss:smooth_ce_uniform_eps{eps}"), (v - 4f64.ln()).abs(), 1e-9));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (n, c) = (rng.random_range(1..6), rng.random_range(2..7));
        let data: Vec<f64> = (0..n * c).map(|_| rng.random_range(-5.0..5.0)).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let plain: f64 = labels
            .iter()
            .enumerate()
            .map(|(i, &y)| {
                let row = &data[i * c..(i + 1) * c];
                -(row[y].exp() / row.iter().map(|v| v.exp()).sum::<f64>()).ln()
            })
            .sum::<f64>()
            / n as f64;
        let v = smooth_ce_value(Tensor::new(vec![n, c], data)?, &labels, 0.0)?;
        worst = worst.max((v - plain).abs());
    }
    out.push(within("loss:smooth_ce_eps0_is_plain_ce", worst, 1e-12));
    let labels = [0, 0, 1, 1];
    let v = supcon_value(Tensor::full(&[4, 3], 1.0), &labels, 0.07)?;
    out.push(within("loss:supcon_identical", (v - 3f64.ln()).abs(), 1e-9));
    let ortho = Tensor::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 1.0]])?;
    let v = supcon_value(ortho, &labels, 1.0)?;
    let expect = (1.0 + 2.0 * (-1.0f64).exp()).ln();
    out.push(within("loss:supcon_orthogonal_tau1", (v - expect).abs(), 1e-9));
    Ok(out)
}

fn metric_oracle() -> csen_core::Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst = 0.0f64;
    let mut disagreements = 0;
    for _ in 0..100 {
        let (nq, ng) = (rng.random_range(1..=6), rng.random_range(1..=10));
        let d: Vec<f64> = (0..nq * ng).map(|_| rng.random_range(0..6) as f64 * 0.5).collect();
        let d = Tensor::new(vec![nq, ng], d)?;
        let qi: Vec<usize> = (0..nq).map(|_| rng.random_range(0..3)).collect();
        let qc: Vec<usize> = (0..nq).map(|_| rng.random_range(0..2)).collect();
        let gi: Vec<usize> = (0..ng).map(|_| rng.random_range(0..3)).collect();
        let gc: Vec<usize> = (0..ng).map(|_| rng.random_range(0..2)).collect();
        for filter in [false, true] {
            let p = EvalProtocol {
                cross_camera_filter: filter,
                max_rank: 10,
                ..Default::default()
            };
            let q = Labels { ids: &qi, cams: &qc };
            let g = Labels { ids: &gi, cams: &gc };
            match (cmc_map(&d, q, g, &p), cmc_map_bruteforce(&d, q, g, &p)) {
                (Ok(a), Ok(b)) => {
                    worst = worst.max((a.map - b.map).abs());
                    for (x, y) in a.cmc.iter().zip(&b.cmc) {
                        worst = worst.max((x - y).abs());
                    }
                }
                (Err(_), Err(_)) => {}
                _ => disagreements += 1,
            }
        }
    }
    let mut c = within("metric:cmc_map_vs_bruteforce", worst, 1e-12);
    if disagreements > 0 {
        c.passed = false;
        c.detail = format!("{disagreements} instances disagree on validity");
    }
    Ok(vec![c])
}

fn rerank_oracle() -> csen_core::Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut sym = |n: usize| -> csen_core::Result<Tensor> {
        let mut m = vec![0.0; n * n];
        for i in 0..n {
            for j in i + 1..n {
                let v = rng.random_range(0.1..2.0);
                m[i * n + j] = v;
                m[j * n + i] = v;
            }
        }
        Tensor::new(vec![n, n], m)
    };
    let d_qq = sym(3)?;
    let d_gg = sym(5)?;
    let d_qg = Tensor::new(vec![3, 5], (0..15).map(|i| 0.1 + (i * 7 % 15) as f64 * 0.1).collect())?;
    let id = k_reciprocal_rerank(&d_qg, &d_qq, &d_gg, &RerankConfig { k1: 3, k2: 2, lambda: 1.0 })?;
    let cfg = RerankConfig {
        k1: 3,
        k2: 2,
        lambda: 0.3,
    };
    let fast = k_reciprocal_rerank(&d_qg, &d_qq, &d_gg, &cfg)?;
    let slow = k_reciprocal_rerank_oracle(&d_qg, &d_qq, &d_gg, &cfg)?;
    Ok(vec![
        Check {
            name: "rerank:lambda1_identity".into(),
            passed: id == d_qg,
            detail: format!("max deviation {:.3e}", id.max_abs_diff(&d_qg)),
        },
        within("rerank:oracle_3x5", fast.max_abs_diff(&slow), 1e-10),
    ])
}

fn afem_examples() -> csen_core::Result<Vec<Check>> {
    let y = [1.0, 2.0, 3.0, 4.0];
    let cases: [([f64; 3], [f64; 4]); 3] = [
        ([0.0, 0.0, 0.0], [1.0, 2.0, 3.0, 4.0]),
        ([1.0, 0.0, 0.0], [2.0, 4.0, 6.0, 8.0]),
        ([0.0, 0.5, -0.5], [1.5, 3.0, 1.5, 2.0]),
    ];
    let mut out = Vec::new();
    for (i, (w, expect)) in cases.iter().enumerate() {
        let mut t = Tape::new();
        let yv = t.constant(Tensor::new(vec![1, 4], y.to_vec())?);
        let wv = t.constant(Tensor::new(vec![3], w.to_vec())?);
        let o = ops::group_gate(&mut t, yv, wv, 2)?;
        let got = t.value(o).data();
        out.push(Check {
            name: format!("afem:example{}", i + 1),
            passed: got == expect,
            detail: format!("{got:?}"),
        });
    }
    Ok(out)
}

fn checkpoint_round_trip() -> csen_core::Result<Vec<Check>> {
    let cfg = TrainConfig::default();
    let mut st = TrainState::new(Model::new(tiny_model_config(), 4, 3)?, &cfg);
    let batch = tiny_batch(&st.model.config, 4);
    train_step(&mut st, &batch, &cfg, &LossConfig::default(), 1e-3)?;
    let bytes = Checkpoint::from_state(&st, Precision::F64, 3, serde_json::json!({}), String::new()).to_bytes()?;
    let again = Checkpoint::from_bytes(&bytes)?.to_bytes()?;
    let mut bad = bytes.clone();
    let last = bad.len() - 1;
    bad[last] ^= 1;
    let detected = Checkpoint::from_bytes(&bad).is_err();
    Ok(vec![
        Check {
            name: "checkpoint:byte_identical".into(),
            passed: again == bytes,
            detail: format!("{} bytes", bytes.len()),
        },
        Check {
            name: "checkpoint:corruption_detected".into(),
            passed: detected,
            detail: "last payload byte flipped".into(),
        },
    ])
}
