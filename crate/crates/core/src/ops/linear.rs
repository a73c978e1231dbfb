use crate::error::{Error, Result};
use crate::linalg::{gemm, MatRef};
use crate::tape::{Backward, GradSink, Tape, Var};
use crate::tensor::Tensor;

/// `x·W + b` for `x: N×Din`, `W: Din×Dout`, `b: Dout`.
pub fn linear(tape: &mut Tape, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let xs = tape.shape(x).to_vec();
    let ws = tape.shape(w).to_vec();
    if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
        return Err(Error::shape("linear_forward", &xs, &ws));
    }
    let (n, din, dout) = (xs[0], xs[1], ws[1]);
    if let Some(b) = b {
        let bs = tape.shape(b);
        if bs != [dout] {
            return Err(Error::shape("linear_forward", &ws, bs));
        }
    }
    let mut out = vec![0.0; n * dout];
    if let Some(b) = b {
        let bias = tape.value(b).data();
        for row in out.chunks_exact_mut(dout) {
            row.copy_from_slice(bias);
        }
    }
    gemm(
        1.0,
        MatRef::new(tape.value(x).data(), n, din),
        MatRef::new(tape.value(w).data(), din, dout),
        if b.is_some() { 1.0 } else { 0.0 },
        &mut out,
    );
    let value = Tensor::new(vec![n, dout], out)?;
    let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
    Ok(tape.record(value, &inputs, LinearBackward { x, w, b, n, din, dout }))
}

struct LinearBackward {
    x: Var,
    w: Var,
    b: Option<Var>,
    n: usize,
    din: usize,
    dout: usize,
}

impl Backward for LinearBackward {
    fn name(&self) -> &'static str {
        "linear"
    }

    fn backward(&self, dy: &[f64], sink: &mut GradSink<'_>) {
        let (n, din, dout) = (self.n, self.din, self.dout);
        let dy_m = MatRef::new(dy, n, dout);
        if sink.wants(self.x) {
            let (vals, dx) = sink.slot_with_values(self.x);
            let w = vals.get(self.w).data();
            gemm(1.0, dy_m, MatRef::new(w, din, dout).t(), 1.0, dx);
        }
        if sink.wants(self.w) {
            let (vals, dw) = sink.slot_with_values(self.w);
            let x = vals.get(self.x).data();
            gemm(1.0, MatRef::new(x, n, din).t(), dy_m, 1.0, dw);
        }
        if let Some(b) = self.b {
            if sink.wants(b) {
                let db = sink.slot(b);
                for row in dy.chunks_exact(dout) {
                    db.iter_mut().zip(row).for_each(|(a, g)| *a += g);
                }
            }
        }
    }
}
