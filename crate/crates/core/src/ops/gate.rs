use crate::error::{Error, Result};
use crate::tape::{Backward, GradSink, Tape, Var};
use crate::tensor::Tensor;

/// Group index (1-based) of channel `c` among `d` channels split into
/// `groups` contiguous blocks.
pub fn group_of(c: usize, d: usize, groups: usize) -> usize {
    1 + c * groups / d
}

/// Scales channel `c` of every row by `1 + w[0] + w[group_of(c)]`.
///
/// `w` holds `groups + 1` scalars: one global weight followed by one weight
/// per contiguous channel group.
pub fn group_gate(tape: &mut Tape, y: Var, w: Var, groups: usize) -> Result<Var> {
    let ys = tape.shape(y).to_vec();
    if ys.len() != 2 || groups == 0 || ys[1] % groups != 0 || tape.shape(w) != [groups + 1] {
        return Err(Error::shape("group_gate", &ys, tape.shape(w)));
    }
    let d = ys[1];
    let wd = tape.value(w).data();
    let scale: Vec<f64> = (0..d).map(|c| 1.0 + wd[0] + wd[group_of(c, d, groups)]).collect();
    let data = tape
        .value(y)
        .data()
        .chunks_exact(d)
        .flat_map(|row| row.iter().zip(&scale).map(|(a, s)| a * s))
        .collect();
    let value = Tensor::new(ys, data)?;
    Ok(tape.record(value, &[y, w], GateBackward { y, w, groups, scale }))
}

struct GateBackward {
    y: Var,
    w: Var,
    groups: usize,
    scale: Vec<f64>,
}

impl Backward for GateBackward {
    fn name(&self) -> &'static str {
        "group_gate"
    }

    fn backward(&self, dy: &[f64], sink: &mut GradSink<'_>) {
        let d = self.scale.len();
        if sink.wants(self.w) {
            let yd = sink.value(self.y).data();
            let mut dw = vec![0.0; self.groups + 1];
            for (row_g, row_y) in dy.chunks_exact(d).zip(yd.chunks_exact(d)) {
                for c in 0..d {
                    let v = row_g[c] * row_y[c];
                    dw[0] += v;
                    dw[group_of(c, d, self.groups)] += v;
                }
            }
            sink.add(self.w, &dw);
        }
        if sink.wants(self.y) {
            let dx = sink.slot(self.y);
            for (row_d, row_g) in dx.chunks_exact_mut(d).zip(dy.chunks_exact(d)) {
                for c in 0..d {
                    row_d[c] += row_g[c] * self.scale[c];
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn contiguous_groups() {
        assert_eq!((0..8).map(|c| group_of(c, 8, 4)).collect::<Vec<_>>(), [1, 1, 2, 2, 3, 3, 4, 4]);
        assert!((0..16).all(|c| group_of(c, 16, 1) == 1));
    }

    #[test]
    fn rejects_ragged_groups() {
        let mut t = Tape::new();
        let y = t.constant(Tensor::zeros(&[1, 6]));
        let w = t.constant(Tensor::zeros(&[5]));
        assert!(group_gate(&mut t, y, w, 4).is_err());
    }
}
