use crate::error::{Error, Result};
use crate::linalg::{gemm, MatRef};
use crate::tape::{Backward, GradSink, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Geom {
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geom {
    fn patch_len(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn out_len(&self) -> usize {
        self.ho * self.wo
    }

    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let l = self.out_len();
        for ci in 0..self.cin {
            let plane = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (ci * self.k + ky) * self.k + kx;
                    let dst = &mut cols[row * l..(row + 1) * l];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        let line = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        if iy < 0 || iy >= self.h as isize {
                            line.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            *v = if ix < 0 || ix >= self.w as isize { 0.0 } else { src[ix as usize] };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let l = self.out_len();
        for ci in 0..self.cin {
            let plane = &mut dx[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (ci * self.k + ky) * self.k + kx;
                    let src = &cols[row * l..(row + 1) * l];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let base = iy as usize * self.w;
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                plane[base + ix as usize] += src[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 2-D convolution of `N×Cin×H×W` input with a `Cout×Cin×k×k` kernel.
pub fn conv2d(tape: &mut Tape, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
    let xs = tape.shape(x).to_vec();
    let ws = tape.shape(w).to_vec();
    if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || ws[2] != ws[3] || stride == 0 {
        return Err(Error::shape("conv2d", &xs, &ws));
    }
    let (n, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let (cout, k) = (ws[0], ws[2]);
    if h + 2 * pad < k || wd + 2 * pad < k {
        return Err(Error::shape("conv2d", &xs, &ws));
    }
    if let Some(b) = b {
        if tape.shape(b) != [cout] {
            return Err(Error::shape("conv2d", &ws, tape.shape(b)));
        }
    }
    let g = Geom {
        cin,
        h,
        w: wd,
        k,
        stride,
        pad,
        ho: (h + 2 * pad - k) / stride + 1,
        wo: (wd + 2 * pad - k) / stride + 1,
    };
    let (kk, l) = (g.patch_len(), g.out_len());
    let xd = tape.value(x).data();
    let wdata = tape.value(w).data();
    let mut out = vec![0.0; n * cout * l];
    let mut cols = vec![0.0; kk * l];
    for s in 0..n {
        g.im2col(&xd[s * cin * h * wd..(s + 1) * cin * h * wd], &mut cols);
        let dst = &mut out[s * cout * l..(s + 1) * cout * l];
        if let Some(b) = b {
            for (row, &bv) in dst.chunks_exact_mut(l).zip(tape.value(b).data()) {
                row.fill(bv);
            }
        }
        gemm(
            1.0,
            MatRef::new(wdata, cout, kk),
            MatRef::new(&cols, kk, l),
            if b.is_some() { 1.0 } else { 0.0 },
            dst,
        );
    }
    let value = Tensor::new(vec![n, cout, g.ho, g.wo], out)?;
    let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
    Ok(tape.record(value, &inputs, ConvBackward { x, w, b, g, n, cout }))
}

struct ConvBackward {
    x: Var,
    w: Var,
    b: Option<Var>,
    g: Geom,
    n: usize,
    cout: usize,
}

impl Backward for ConvBackward {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(&self, dy: &[f64], sink: &mut GradSink<'_>) {
        let g = self.g;
        let (kk, l, cout) = (g.patch_len(), g.out_len(), self.cout);
        let in_len = g.cin * g.h * g.w;
        let want_x = sink.wants(self.x);
        let want_w = sink.wants(self.w);
        let xd = sink.value(self.x).data();
        let wdata = sink.value(self.w).data();
        let mut cols = vec![0.0; kk * l];
        let mut dw = vec![0.0; cout * kk];
        let mut dx = if want_x { vec![0.0; xd.len()] } else { Vec::new() };
        for s in 0..self.n {
            let dys = MatRef::new(&dy[s * cout * l..(s + 1) * cout * l], cout, l);
            if want_w {
                g.im2col(&xd[s * in_len..(s + 1) * in_len], &mut cols);
                gemm(1.0, dys, MatRef::new(&cols, kk, l).t(), 1.0, &mut dw);
            }
            if want_x {
                gemm(1.0, MatRef::new(wdata, cout, kk).t(), dys, 0.0, &mut cols);
                g.col2im(&cols, &mut dx[s * in_len..(s + 1) * in_len]);
            }
        }
        if want_w {
            sink.add(self.w, &dw);
        }
        if want_x {
            sink.add(self.x, &dx);
        }
        if let Some(b) = self.b {
            if sink.wants(b) {
                let mut db = vec![0.0; cout];
                for (i, plane) in dy.chunks_exact(l).enumerate() {
                    db[i % cout] += plane.iter().sum::<f64>();
                }
                sink.add(b, &db);
            }
        }
    }
}
