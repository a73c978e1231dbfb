use crate::error::{Error, Result};
use crate::tape::{Backward, GradSink, Tape, Var};
use crate::tensor::Tensor;

/// Mean over the spatial dims of `N×C×H×W`, giving `N×C`.
pub fn global_avg_pool(tape: &mut Tape, x: Var) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 4 || shape[2] == 0 || shape[3] == 0 {
        return Err(Error::shape("global_avg_pool", &shape, &[0, 0, 1, 1]));
    }
    let (n, c) = (shape[0], shape[1]);
    let hw = shape[2] * shape[3];
    let data = tape
        .value(x)
        .data()
        .chunks_exact(hw)
        .map(|plane| plane.iter().sum::<f64>() / hw as f64)
        .collect();
    let value = Tensor::new(vec![n, c], data)?;
    Ok(tape.record(value, &[x], GapBackward { x, hw }))
}

struct GapBackward {
    x: Var,
    hw: usize,
}

impl Backward for GapBackward {
    fn name(&self) -> &'static str {
        "global_avg_pool"
    }

    fn backward(&self, dy: &[f64], sink: &mut GradSink<'_>) {
        if !sink.wants(self.x) {
            return;
        }
        let scale = 1.0 / self.hw as f64;
        let dx = sink.slot(self.x);
        for (plane, &g) in dx.chunks_exact_mut(self.hw).zip(dy) {
            plane.iter_mut().for_each(|d| *d += g * scale);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_of_plane() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap());
        let y = global_avg_pool(&mut t, x).unwrap();
        assert_eq!(t.value(y).data(), &[4.0]);
        let x = t.constant(Tensor::full(&[2, 3, 4, 5], 2.5));
        let y = global_avg_pool(&mut t, x).unwrap();
        assert_eq!(t.value(y).shape(), &[2, 3]);
        assert!(t.value(y).data().iter().all(|&v| (v - 2.5).abs() < 1e-15));
    }
}
