use crate::error::{Error, Result};
use crate::tape::{Backward, GradSink, Tape, Var};
use crate::tensor::Tensor;

/// Same data, new shape.
pub fn reshape(tape: &mut Tape, x: Var, shape: Vec<usize>) -> Result<Var> {
    let value = tape.value(x).clone().reshape(shape)?;
    Ok(tape.record(value, &[x], Passthrough { x, name: "reshape" }))
}

struct Passthrough {
    x: Var,
    name: &'static str,
}

impl Backward for Passthrough {
    fn name(&self) -> &'static str {
        self.name
    }

    fn backward(&self, dy: &[f64], sink: &mut GradSink<'_>) {
        sink.add(self.x, dy);
    }
}

/// Elementwise sum of same-shaped tensors.
pub fn add(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let (sa, sb) = (tape.shape(a), tape.shape(b));
    if sa != sb {
        return Err(Error::shape("add", sa, sb));
    }
    let data = tape
        .value(a)
        .data()
        .iter()
        .zip(tape.value(b).data())
        .map(|(x, y)| x + y)
        .collect();
    let value = Tensor::new(sa.to_vec(), data)?;
    Ok(tape.record(value, &[a, b], AddBackward { a, b }))
}

struct AddBackward {
    a: Var,
    b: Var,
}

impl Backward for AddBackward {
    fn name(&self) -> &'static str {
        "add"
    }

    fn backward(&self, dy: &[f64], sink: &mut GradSink<'_>) {
        sink.add(self.a, dy);
        sink.add(self.b, dy);
    }
}

/// `[a | b]` along the last axis of two matrices with equal row count.
pub fn concat_last(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let (sa, sb) = (tape.shape(a).to_vec(), tape.shape(b).to_vec());
    if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
        return Err(Error::shape("concat_last", &sa, &sb));
    }
    let (n, da, db) = (sa[0], sa[1], sb[1]);
    let (va, vb) = (tape.value(a).data(), tape.value(b).data());
    let mut data = Vec::with_capacity(n * (da + db));
    for i in 0..n {
        data.extend_from_slice(&va[i * da..(i + 1) * da]);
        data.extend_from_slice(&vb[i * db..(i + 1) * db]);
    }
    let value = Tensor::new(vec![n, da + db], data)?;
    Ok(tape.record(value, &[a, b], ConcatBackward { a, b, da, db }))
}

struct ConcatBackward {
    a: Var,
    b: Var,
    da: usize,
    db: usize,
}

impl Backward for ConcatBackward {
    fn name(&self) -> &'static str {
        "concat_last"
    }

    fn backward(&self, dy: &[f64], sink: &mut GradSink<'_>) {
        let w = self.da + self.db;
        if sink.wants(self.a) && self.da > 0 {
            let ga = sink.slot(self.a);
            for (dst, row) in ga.chunks_exact_mut(self.da).zip(dy.chunks_exact(w)) {
                dst.iter_mut().zip(&row[..self.da]).for_each(|(d, g)| *d += g);
            }
        }
        if sink.wants(self.b) && self.db > 0 {
            let gb = sink.slot(self.b);
            for (dst, row) in gb.chunks_exact_mut(self.db).zip(dy.chunks_exact(w)) {
                dst.iter_mut().zip(&row[self.da..]).for_each(|(d, g)| *d += g);
            }
        }
    }
}

/// Copies columns `start..end` of a matrix. Not differentiable; used to
/// split concatenated outputs in tests and evaluation.
pub fn slice_cols(x: &Tensor, start: usize, end: usize) -> Tensor {
    let c = x.cols();
    let data: Vec<f64> = x.data().chunks_exact(c.max(1)).flat_map(|r| r[start..end].iter().copied()).collect();
    Tensor::new(vec![x.rows(), end - start], data).expect("slice within bounds")
}

/// Divides each row by `max(‖row‖₂, eps)`.
pub fn l2_normalize(tape: &mut Tape, x: Var, eps: f64) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 2 {
        return Err(Error::shape("l2_normalize", &shape, &[0, 0]));
    }
    let d = shape[1];
    let xd = tape.value(x).data();
    let mut norms = Vec::with_capacity(shape[0]);
    let mut out = Vec::with_capacity(xd.len());
    for row in xd.chunks_exact(d.max(1)) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        let denom = norm.max(eps);
        norms.push(norm);
        out.extend(row.iter().map(|v| v / denom));
    }
    let value = Tensor::new(shape, out)?;
    Ok(tape.record(value, &[x], L2NormBackward { x, norms, eps, d }))
}

struct L2NormBackward {
    x: Var,
    norms: Vec<f64>,
    eps: f64,
    d: usize,
}

impl Backward for L2NormBackward {
    fn name(&self) -> &'static str {
        "l2_normalize"
    }

    fn backward(&self, dy: &[f64], sink: &mut GradSink<'_>) {
        let d = self.d;
        let (vals, dx) = sink.slot_with_values(self.x);
        let xd = vals.get(self.x).data();
        for (r, &norm) in self.norms.iter().enumerate() {
            let row = &xd[r * d..(r + 1) * d];
            let g = &dy[r * d..(r + 1) * d];
            let out = &mut dx[r * d..(r + 1) * d];
            if norm > self.eps {
                // d(x/|x|) = (g - u·(u·g)) / |x|
                let dot: f64 = row.iter().zip(g).map(|(a, b)| a * b).sum::<f64>() / norm;
                for j in 0..d {
                    out[j] += (g[j] - row[j] / norm * dot) / norm;
                }
            } else {
                for j in 0..d {
                    out[j] += g[j] / self.eps;
                }
            }
        }
    }
}

/// Picks row `offset` from each consecutive block of `block` rows.
pub fn select_rows(tape: &mut Tape, x: Var, block: usize, offset: usize) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 2 || block == 0 || offset >= block || shape[0] % block != 0 {
        return Err(Error::shape("select_rows", &shape, &[block, offset]));
    }
    let d = shape[1];
    let groups = shape[0] / block;
    let xd = tape.value(x).data();
    let mut data = Vec::with_capacity(groups * d);
    for g in 0..groups {
        let r = g * block + offset;
        data.extend_from_slice(&xd[r * d..(r + 1) * d]);
    }
    let value = Tensor::new(vec![groups, d], data)?;
    Ok(tape.record(value, &[x], SelectRowsBackward { x, block, offset, d }))
}

struct SelectRowsBackward {
    x: Var,
    block: usize,
    offset: usize,
    d: usize,
}

impl Backward for SelectRowsBackward {
    fn name(&self) -> &'static str {
        "select_rows"
    }

    fn backward(&self, dy: &[f64], sink: &mut GradSink<'_>) {
        if !sink.wants(self.x) {
            return;
        }
        let d = self.d;
        let dx = sink.slot(self.x);
        for (g, row) in dy.chunks_exact(d).enumerate() {
            let r = g * self.block + self.offset;
            dx[r * d..(r + 1) * d].iter_mut().zip(row).for_each(|(a, b)| *a += b);
        }
    }
}

/// Builds the token sequence `[cls; patches] + pos` per sample.
///
/// `patches` is `(N·P)×D`, `cls` is `1×D` and `pos` is `(P+1)×D`; the
/// result is `(N·(P+1))×D`.
pub fn assemble_tokens(tape: &mut Tape, patches: Var, cls: Var, pos: Var, n: usize) -> Result<Var> {
    let ps = tape.shape(patches).to_vec();
    let d = *ps.last().unwrap_or(&0);
    let t = tape.shape(pos)[0];
    if ps.len() != 2 || n == 0 || ps[0] != n * (t - 1) || tape.shape(cls) != [1, d] || tape.shape(pos) != [t, d] {
        return Err(Error::shape("assemble_tokens", &ps, tape.shape(pos)));
    }
    let (pd, cd, posd) = (tape.value(patches).data(), tape.value(cls).data(), tape.value(pos).data());
    let mut data = Vec::with_capacity(n * t * d);
    for s in 0..n {
        data.extend(cd.iter().zip(&posd[..d]).map(|(a, b)| a + b));
        let base = s * (t - 1) * d;
        data.extend(pd[base..base + (t - 1) * d].iter().zip(&posd[d..]).map(|(a, b)| a + b));
    }
    let value = Tensor::new(vec![n * t, d], data)?;
    Ok(tape.record(
        value,
        &[patches, cls, pos],
        TokensBackward {
            patches,
            cls,
            pos,
            n,
            t,
            d,
        },
    ))
}

struct TokensBackward {
    patches: Var,
    cls: Var,
    pos: Var,
    n: usize,
    t: usize,
    d: usize,
}

impl Backward for TokensBackward {
    fn name(&self) -> &'static str {
        "assemble_tokens"
    }

    fn backward(&self, dy: &[f64], sink: &mut GradSink<'_>) {
        let (t, d) = (self.t, self.d);
        let mut dcls = vec![0.0; d];
        let mut dpos = vec![0.0; t * d];
        for s in 0..self.n {
            let block = &dy[s * t * d..(s + 1) * t * d];
            dcls.iter_mut().zip(&block[..d]).for_each(|(a, b)| *a += b);
            dpos.iter_mut().zip(block).for_each(|(a, b)| *a += b);
        }
        if sink.wants(self.patches) {
            let dp = sink.slot(self.patches);
            for s in 0..self.n {
                let src = &dy[s * t * d + d..(s + 1) * t * d];
                let dst = &mut dp[s * (t - 1) * d..(s + 1) * (t - 1) * d];
                dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
            }
        }
        sink.add(self.cls, &dcls);
        sink.add(self.pos, &dpos);
    }
}

/// Row lookup `out[n] = table[indices[n]]` with scatter-add backward.
pub fn gather_rows(tape: &mut Tape, table: Var, indices: &[usize]) -> Result<Var> {
    let shape = tape.shape(table).to_vec();
    if shape.len() != 2 {
        return Err(Error::shape("gather_rows", &shape, &[0, 0]));
    }
    let (rows, d) = (shape[0], shape[1]);
    if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
        return Err(Error::invalid(format!("row index {bad} out of range for table with {rows} rows")));
    }
    let td = tape.value(table).data();
    let data = indices.iter().flat_map(|&i| td[i * d..(i + 1) * d].iter().copied()).collect();
    let value = Tensor::new(vec![indices.len(), d], data)?;
    Ok(tape.record(
        value,
        &[table],
        GatherBackward {
            table,
            indices: indices.to_vec(),
            d,
        },
    ))
}

struct GatherBackward {
    table: Var,
    indices: Vec<usize>,
    d: usize,
}

impl Backward for GatherBackward {
    fn name(&self) -> &'static str {
        "gather_rows"
    }

    fn backward(&self, dy: &[f64], sink: &mut GradSink<'_>) {
        if !sink.wants(self.table) {
            return;
        }
        let d = self.d;
        let dt = sink.slot(self.table);
        for (row, &i) in dy.chunks_exact(d).zip(&self.indices) {
            dt[i * d..(i + 1) * d].iter_mut().zip(row).for_each(|(a, b)| *a += b);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn concat_two_scalars() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::new(vec![1, 1], vec![1.0]).unwrap());
        let b = t.constant(Tensor::new(vec![1, 1], vec![2.0]).unwrap());
        let c = concat_last(&mut t, a, b).unwrap();
        assert_eq!(t.value(c).data(), &[1.0, 2.0]);
    }

    #[test]
    fn concat_with_empty_left_is_right() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::new(vec![2, 0], vec![]).unwrap());
        let b = t.constant(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let c = concat_last(&mut t, a, b).unwrap();
        assert_eq!(t.value(c), t.value(b));
    }

    #[test]
    fn concat_row_mismatch() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 1]));
        let b = t.constant(Tensor::zeros(&[3, 1]));
        assert!(concat_last(&mut t, a, b).is_err());
    }

    #[test]
    fn l2_normalize_cases() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(vec![2, 2], vec![3.0, 4.0, 0.0, 0.0]).unwrap());
        let y = l2_normalize(&mut t, x, 1e-12).unwrap();
        let v = t.value(y).data();
        assert!((v[0] - 0.6).abs() < 1e-15 && (v[1] - 0.8).abs() < 1e-15);
        assert_eq!(&v[2..], &[0.0, 0.0]);
    }

    #[test]
    fn gather_out_of_range() {
        let mut t = Tape::new();
        let tab = t.constant(Tensor::zeros(&[3, 2]));
        assert!(gather_rows(&mut t, tab, &[0, 3]).is_err());
    }

    #[test]
    fn select_and_tokens_layout() {
        let mut t = Tape::new();
        // N=2, P=2, D=1
        let p = t.constant(Tensor::new(vec![4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let cls = t.constant(Tensor::new(vec![1, 1], vec![10.0]).unwrap());
        let pos = t.constant(Tensor::new(vec![3, 1], vec![0.0, 0.5, 0.25]).unwrap());
        let tok = assemble_tokens(&mut t, p, cls, pos, 2).unwrap();
        assert_eq!(t.value(tok).data(), &[10.0, 1.5, 2.25, 10.0, 3.5, 4.25]);
        let c = select_rows(&mut t, tok, 3, 0).unwrap();
        assert_eq!(t.value(c).data(), &[10.0, 10.0]);
    }
}
