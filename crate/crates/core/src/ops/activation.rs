use crate::error::Result;
use crate::tape::{Backward, GradSink, Tape, Var};
use crate::tensor::Tensor;

/// Elementwise `max(0, x)`; the subgradient at 0 is 0.
pub fn relu(tape: &mut Tape, x: Var) -> Result<Var> {
    let v = tape.value(x);
    let data = v.data().iter().map(|&a| a.max(0.0)).collect();
    let value = Tensor::new(v.shape().to_vec(), data)?;
    Ok(tape.record(value, &[x], ReluBackward { x }))
}

struct ReluBackward {
    x: Var,
}

impl Backward for ReluBackward {
    fn name(&self) -> &'static str {
        "relu"
    }

    fn backward(&self, dy: &[f64], sink: &mut GradSink<'_>) {
        let (vals, dx) = sink.slot_with_values(self.x);
        for ((d, &x), &g) in dx.iter_mut().zip(vals.get(self.x).data()).zip(dy) {
            if x > 0.0 {
                *d += g;
            }
        }
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

/// GELU, tanh approximation.
pub fn gelu(tape: &mut Tape, x: Var) -> Result<Var> {
    let v = tape.value(x);
    let data = v
        .data()
        .iter()
        .map(|&a| 0.5 * a * (1.0 + (SQRT_2_OVER_PI * (a + GELU_C * a * a * a)).tanh()))
        .collect();
    let value = Tensor::new(v.shape().to_vec(), data)?;
    Ok(tape.record(value, &[x], GeluBackward { x }))
}

struct GeluBackward {
    x: Var,
}

impl Backward for GeluBackward {
    fn name(&self) -> &'static str {
        "gelu"
    }

    fn backward(&self, dy: &[f64], sink: &mut GradSink<'_>) {
        let (vals, dx) = sink.slot_with_values(self.x);
        for ((d, &a), &g) in dx.iter_mut().zip(vals.get(self.x).data()).zip(dy) {
            let u = SQRT_2_OVER_PI * (a + GELU_C * a * a * a);
            let t = u.tanh();
            let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * a * a);
            *d += g * (0.5 * (1.0 + t) + 0.5 * a * (1.0 - t * t) * du);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_values() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
        let y = relu(&mut t, x).unwrap();
        assert_eq!(t.value(y).data(), &[0.0, 0.0, 2.0]);
        let x = t.constant(Tensor::new(vec![2], vec![-3.0, -0.5]).unwrap());
        let y = relu(&mut t, x).unwrap();
        assert_eq!(t.value(y).data(), &[0.0, 0.0]);
    }

    #[test]
    fn relu_gradient_at_zero_is_zero() {
        let mut t = Tape::new();
        let x = t.input(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
        let y = relu(&mut t, x).unwrap();
        let w = t.constant(Tensor::new(vec![3, 1], vec![1.0, 1.0, 1.0]).unwrap());
        let y2 = crate::ops::reshape(&mut t, y, vec![1, 3]).unwrap();
        let s = crate::ops::linear(&mut t, y2, w, None).unwrap();
        let s = crate::ops::reshape(&mut t, s, vec![1]).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[0.0, 0.0, 1.0]);
    }
}
