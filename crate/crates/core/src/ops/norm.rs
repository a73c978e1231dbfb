use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Backward, GradSink, Tape, Var};
use crate::tensor::Tensor;

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

/// Per-channel mean and variance.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    /// `running = (1 - m)·running + m·batch`.
    pub fn update(&mut self, batch: &RunningStats, momentum: f64) {
        for (r, b) in self.mean.iter_mut().zip(&batch.mean) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
        for (r, b) in self.var.iter_mut().zip(&batch.var) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
    }
}

pub struct BatchNormOut {
    pub out: Var,
    /// Batch mean and unbiased variance (train mode only), for the running update.
    pub batch_stats: Option<RunningStats>,
}

/// Batch normalization over dim 1 of `N×C` or `N×C×H×W` input.
///
/// Train mode normalizes with the batch mean and biased variance; eval mode
/// uses `running`.
pub fn batch_norm(
    tape: &mut Tape,
    x: Var,
    gamma: Var,
    beta: Var,
    mode: Mode,
    running: &RunningStats,
    eps: f64,
) -> Result<BatchNormOut> {
    let shape = tape.shape(x).to_vec();
    if shape.len() < 2 {
        return Err(Error::shape("batch_norm", &shape, tape.shape(gamma)));
    }
    let (outer, c) = (shape[0], shape[1]);
    let inner: usize = shape[2..].iter().product();
    if tape.shape(gamma) != [c] || tape.shape(beta) != [c] || running.mean.len() != c || running.var.len() != c {
        return Err(Error::shape("batch_norm", &shape, tape.shape(gamma)));
    }
    if mode == Mode::Train && outer < 2 {
        return Err(Error::DegenerateBatch(outer));
    }
    let xd = tape.value(x).data();
    let count = (outer * inner) as f64;
    let (mean, var_biased, batch_stats) = match mode {
        Mode::Train => {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for n in 0..outer {
                for ch in 0..c {
                    let base = (n * c + ch) * inner;
                    mean[ch] += xd[base..base + inner].iter().sum::<f64>();
                }
            }
            mean.iter_mut().for_each(|m| *m /= count);
            for n in 0..outer {
                for ch in 0..c {
                    let base = (n * c + ch) * inner;
                    let mu = mean[ch];
                    var[ch] += xd[base..base + inner].iter().map(|v| (v - mu) * (v - mu)).sum::<f64>();
                }
            }
            var.iter_mut().for_each(|v| *v /= count);
            let unbiased = var.iter().map(|v| v * count / (count - 1.0)).collect();
            let stats = RunningStats {
                mean: mean.clone(),
                var: unbiased,
            };
            (mean, var, Some(stats))
        }
        Mode::Eval => (running.mean.clone(), running.var.clone(), None),
    };
    let inv_std: Vec<f64> = var_biased.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let g = tape.value(gamma).data();
    let b = tape.value(beta).data();
    let mut xhat = vec![0.0; xd.len()];
    let mut out = vec![0.0; xd.len()];
    for n in 0..outer {
        for ch in 0..c {
            let base = (n * c + ch) * inner;
            let (mu, is, gc, bc) = (mean[ch], inv_std[ch], g[ch], b[ch]);
            for i in base..base + inner {
                let h = (xd[i] - mu) * is;
                xhat[i] = h;
                out[i] = gc * h + bc;
            }
        }
    }
    let value = Tensor::new(shape, out)?;
    let out = tape.record(
        value,
        &[x, gamma, beta],
        BatchNormBackward {
            x,
            gamma,
            beta,
            train: mode == Mode::Train,
            xhat,
            inv_std,
            outer,
            c,
            inner,
        },
    );
    Ok(BatchNormOut { out, batch_stats })
}

struct BatchNormBackward {
    x: Var,
    gamma: Var,
    beta: Var,
    train: bool,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    outer: usize,
    c: usize,
    inner: usize,
}

impl Backward for BatchNormBackward {
    fn name(&self) -> &'static str {
        "batch_norm"
    }

    fn backward(&self, dy: &[f64], sink: &mut GradSink<'_>) {
        let (outer, c, inner) = (self.outer, self.c, self.inner);
        let mut sum_dy = vec![0.0; c];
        let mut sum_dy_xhat = vec![0.0; c];
        for n in 0..outer {
            for ch in 0..c {
                let base = (n * c + ch) * inner;
                for i in base..base + inner {
                    sum_dy[ch] += dy[i];
                    sum_dy_xhat[ch] += dy[i] * self.xhat[i];
                }
            }
        }
        if sink.wants(self.x) {
            let gamma = sink.value(self.gamma).data().to_vec();
            let dx = sink.slot(self.x);
            let m = (outer * inner) as f64;
            for n in 0..outer {
                for ch in 0..c {
                    let base = (n * c + ch) * inner;
                    let k = gamma[ch] * self.inv_std[ch];
                    for i in base..base + inner {
                        dx[i] += if self.train {
                            k * (dy[i] - sum_dy[ch] / m - self.xhat[i] * sum_dy_xhat[ch] / m)
                        } else {
                            k * dy[i]
                        };
                    }
                }
            }
        }
        sink.add(self.gamma, &sum_dy_xhat);
        sink.add(self.beta, &sum_dy);
    }
}

/// Row-wise layer normalization of an `R×D` matrix.
pub fn layer_norm(tape: &mut Tape, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 2 || tape.shape(gamma) != [shape[1]] || tape.shape(beta) != [shape[1]] {
        return Err(Error::shape("layer_norm", &shape, tape.shape(gamma)));
    }
    let (rows, d) = (shape[0], shape[1]);
    let xd = tape.value(x).data();
    let g = tape.value(gamma).data();
    let b = tape.value(beta).data();
    let mut xhat = vec![0.0; xd.len()];
    let mut out = vec![0.0; xd.len()];
    let mut inv_std = vec![0.0; rows];
    for r in 0..rows {
        let row = &xd[r * d..(r + 1) * d];
        let mu = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv_std[r] = is;
        for j in 0..d {
            let h = (row[j] - mu) * is;
            xhat[r * d + j] = h;
            out[r * d + j] = g[j] * h + b[j];
        }
    }
    let value = Tensor::new(shape, out)?;
    Ok(tape.record(
        value,
        &[x, gamma, beta],
        LayerNormBackward {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            d,
        },
    ))
}

struct LayerNormBackward {
    x: Var,
    gamma: Var,
    beta: Var,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    d: usize,
}

impl Backward for LayerNormBackward {
    fn name(&self) -> &'static str {
        "layer_norm"
    }

    fn backward(&self, dy: &[f64], sink: &mut GradSink<'_>) {
        let d = self.d;
        let rows = self.inv_std.len();
        if sink.wants(self.gamma) || sink.wants(self.beta) {
            let mut dg = vec![0.0; d];
            let mut db = vec![0.0; d];
            for r in 0..rows {
                for j in 0..d {
                    dg[j] += dy[r * d + j] * self.xhat[r * d + j];
                    db[j] += dy[r * d + j];
                }
            }
            sink.add(self.gamma, &dg);
            sink.add(self.beta, &db);
        }
        if sink.wants(self.x) {
            let (vals, dx) = sink.slot_with_values(self.x);
            let g = vals.get(self.gamma).data();
            let df = d as f64;
            for r in 0..rows {
                let mut s1 = 0.0;
                let mut s2 = 0.0;
                for j in 0..d {
                    let dh = dy[r * d + j] * g[j];
                    s1 += dh;
                    s2 += dh * self.xhat[r * d + j];
                }
                for j in 0..d {
                    let dh = dy[r * d + j] * g[j];
                    dx[r * d + j] += self.inv_std[r] * (dh - s1 / df - self.xhat[r * d + j] * s2 / df);
                }
            }
        }
    }
}
