use crate::error::{Error, Result};
use crate::linalg::{gemm_strided, MatRef};
use crate::tape::{Backward, GradSink, Tape, Var};
use crate::tensor::Tensor;

/// Multi-head scaled dot-product self-attention core.
///
/// `qkv` is `(N·T)×3D` holding `[Q | K | V]` per token; heads split `D`
/// into contiguous blocks. Returns the concatenated head outputs `(N·T)×D`.
/// There is no masking, so tokens only mix within their own sample.
pub fn self_attention(tape: &mut Tape, qkv: Var, n: usize, heads: usize) -> Result<Var> {
    let shape = tape.shape(qkv).to_vec();
    if shape.len() != 2 || n == 0 || shape[0] % n != 0 || shape[1] % 3 != 0 || heads == 0 || (shape[1] / 3) % heads != 0 {
        return Err(Error::shape("self_attention", &shape, &[n, heads]));
    }
    let t = shape[0] / n;
    let d = shape[1] / 3;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let x = tape.value(qkv).data();
    let mut probs = vec![0.0; n * heads * t * t];
    let mut out = vec![0.0; n * t * d];
    let stride = 3 * d;
    for s in 0..n {
        let base = s * t * stride;
        for h in 0..heads {
            let q = MatRef::strided(&x[base + h * dh..], t, dh, stride);
            let k = MatRef::strided(&x[base + d + h * dh..], t, dh, stride);
            let v = MatRef::strided(&x[base + 2 * d + h * dh..], t, dh, stride);
            let p = &mut probs[(s * heads + h) * t * t..(s * heads + h + 1) * t * t];
            gemm_strided(scale, q, k.t(), 0.0, p, t);
            for row in p.chunks_exact_mut(t) {
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for e in row.iter_mut() {
                    *e = (*e - m).exp();
                    z += *e;
                }
                row.iter_mut().for_each(|e| *e /= z);
            }
            let o = &mut out[s * t * d + h * dh..];
            gemm_strided(1.0, MatRef::new(p, t, t), v, 0.0, o, d);
        }
    }
    let value = Tensor::new(vec![n * t, d], out)?;
    Ok(tape.record(
        value,
        &[qkv],
        AttentionBackward {
            qkv,
            probs,
            n,
            t,
            d,
            heads,
            scale,
        },
    ))
}

struct AttentionBackward {
    qkv: Var,
    probs: Vec<f64>,
    n: usize,
    t: usize,
    d: usize,
    heads: usize,
    scale: f64,
}

impl Backward for AttentionBackward {
    fn name(&self) -> &'static str {
        "self_attention"
    }

    fn backward(&self, dy: &[f64], sink: &mut GradSink<'_>) {
        if !sink.wants(self.qkv) {
            return;
        }
        let (t, d, heads) = (self.t, self.d, self.heads);
        let dh = d / heads;
        let stride = 3 * d;
        let (vals, dx) = sink.slot_with_values(self.qkv);
        let x = vals.get(self.qkv).data();
        let mut dp = vec![0.0; t * t];
        for s in 0..self.n {
            let base = s * t * stride;
            for h in 0..heads {
                let p = &self.probs[(s * heads + h) * t * t..(s * heads + h + 1) * t * t];
                let q = MatRef::strided(&x[base + h * dh..], t, dh, stride);
                let k = MatRef::strided(&x[base + d + h * dh..], t, dh, stride);
                let v = MatRef::strided(&x[base + 2 * d + h * dh..], t, dh, stride);
                let dout = MatRef::strided(&dy[s * t * d + h * dh..], t, dh, d);
                // dV += Pᵀ·dO
                gemm_strided(1.0, MatRef::new(p, t, t).t(), dout, 1.0, &mut dx[base + 2 * d + h * dh..], stride);
                // dP = dO·Vᵀ, then dS = P ⊙ (dP − rowsum(dP ⊙ P))
                gemm_strided(1.0, dout, v.t(), 0.0, &mut dp, t);
                for (drow, prow) in dp.chunks_exact_mut(t).zip(p.chunks_exact(t)) {
                    let dot: f64 = drow.iter().zip(prow).map(|(a, b)| a * b).sum();
                    for (a, &b) in drow.iter_mut().zip(prow) {
                        *a = b * (*a - dot);
                    }
                }
                let ds = MatRef::new(&dp, t, t);
                gemm_strided(self.scale, ds, k, 1.0, &mut dx[base + h * dh..], stride);
                gemm_strided(self.scale, ds.t(), q, 1.0, &mut dx[base + d + h * dh..], stride);
            }
        }
    }
}
