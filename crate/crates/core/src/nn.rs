//! Forward-pass context shared by the encoders, fusion and AFEM.

use rand::Rng;

use crate::error::Result;
use crate::ops::{self, Mode, RunningStats, BN_EPS};
use crate::tape::{Tape, Var};
use crate::tensor::{ParamSet, Tensor};

/// One forward pass: a fresh tape over borrowed parameters and buffers.
///
/// Batch-norm layers read running statistics from `buffers` and, in train
/// mode, queue the batch statistics in `bn_updates` instead of mutating
/// anything; the caller applies them with [`apply_bn_updates`].
pub struct Graph<'a> {
    pub tape: Tape,
    pub params: &'a ParamSet,
    pub buffers: &'a ParamSet,
    pub mode: Mode,
    pub bn_updates: Vec<(String, RunningStats)>,
}

impl<'a> Graph<'a> {
    pub fn new(params: &'a ParamSet, buffers: &'a ParamSet, mode: Mode) -> Self {
        Self {
            tape: Tape::new(),
            params,
            buffers,
            mode,
            bn_updates: Vec::new(),
        }
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        self.tape.param(self.params, name)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.tape.constant(t)
    }

    /// Linear layer `{prefix}.weight` / optional `{prefix}.bias`.
    pub fn linear(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let w = self.param(&format!("{prefix}.weight"))?;
        let bias = format!("{prefix}.bias");
        let b = if self.params.contains(&bias) { Some(self.param(&bias)?) } else { None };
        ops::linear(&mut self.tape, x, w, b)
    }

    pub fn layer_norm(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let g = self.param(&format!("{prefix}.gamma"))?;
        let b = self.param(&format!("{prefix}.beta"))?;
        ops::layer_norm(&mut self.tape, x, g, b, 1e-5)
    }

    pub fn batch_norm(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let g = self.param(&format!("{prefix}.gamma"))?;
        let b = self.param(&format!("{prefix}.beta"))?;
        let running = RunningStats {
            mean: self.buffers.get(&format!("{prefix}.running_mean"))?.data().to_vec(),
            var: self.buffers.get(&format!("{prefix}.running_var"))?.data().to_vec(),
        };
        let out = ops::batch_norm(&mut self.tape, x, g, b, self.mode, &running, BN_EPS)?;
        if let Some(stats) = out.batch_stats {
            self.bn_updates.push((prefix.to_string(), stats));
        }
        Ok(out.out)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.tape.value(v)
    }
}

/// Folds queued batch statistics into the running buffers.
pub fn apply_bn_updates(buffers: &mut ParamSet, updates: &[(String, RunningStats)], momentum: f64) -> Result<()> {
    for (prefix, batch) in updates {
        let mut running = RunningStats {
            mean: buffers.get(&format!("{prefix}.running_mean"))?.data().to_vec(),
            var: buffers.get(&format!("{prefix}.running_var"))?.data().to_vec(),
        };
        running.update(batch, momentum);
        buffers.get_mut(&format!("{prefix}.running_mean"))?.data_mut().copy_from_slice(&running.mean);
        buffers.get_mut(&format!("{prefix}.running_var"))?.data_mut().copy_from_slice(&running.var);
    }
    Ok(())
}

/// Parameter initialisation helpers writing into a [`ParamSet`] pair.
pub struct Init<'a, R: Rng> {
    pub params: &'a mut ParamSet,
    pub buffers: &'a mut ParamSet,
    pub rng: &'a mut R,
}

impl<R: Rng> Init<'_, R> {
    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) {
        let t = Tensor::randn(shape, std, self.rng);
        self.params.insert(name, t.into_param());
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) {
        self.params.insert(name, Tensor::full(shape, value).into_param());
    }

    /// `Din×Dout` weight with std `1/√Din`, plus a zero bias when requested.
    pub fn linear(&mut self, prefix: &str, din: usize, dout: usize, bias: bool) {
        self.normal(&format!("{prefix}.weight"), &[din, dout], (1.0 / din as f64).sqrt());
        if bias {
            self.constant(&format!("{prefix}.bias"), &[dout], 0.0);
        }
    }

    pub fn layer_norm(&mut self, prefix: &str, d: usize) {
        self.constant(&format!("{prefix}.gamma"), &[d], 1.0);
        self.constant(&format!("{prefix}.beta"), &[d], 0.0);
    }

    pub fn batch_norm(&mut self, prefix: &str, c: usize) {
        self.layer_norm(prefix, c);
        self.buffers.insert(format!("{prefix}.running_mean"), Tensor::zeros(&[c]));
        self.buffers.insert(format!("{prefix}.running_var"), Tensor::full(&[c], 1.0));
    }
}
