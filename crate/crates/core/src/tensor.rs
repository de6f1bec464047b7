//! Dense f64 tensors and the numeric kernels shared by inference and training.
//!
//! Everything in the model path (matmul, convolution, softmax, log-sum-exp)
//! funnels through the kernels here so that the plain inference functions and
//! the recorded differentiable traces compute bit-identical values.

/// A dense row-major tensor of `f64` values.
///
/// Shapes used in practice: `[]` (scalar), `[n]` (vector), `[r, c]` (matrix),
/// `[c, h, w]` (feature map, channel-major planes).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..len).map(|i| f(i)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_scalar(&self) -> f64 {
        assert_eq!(self.len(), 1, "not a scalar: shape {:?}", self.shape);
        self.data[0]
    }

    /// Number of rows when viewed as a 2-D matrix.
    pub fn rows(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "not a matrix: shape {:?}", self.shape);
        self.shape[0]
    }

    /// Number of columns when viewed as a 2-D matrix.
    pub fn cols(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "not a matrix: shape {:?}", self.shape);
        self.shape[1]
    }

    #[inline]
    pub fn at2(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.shape[1] + c]
    }

    #[inline]
    pub fn at2_mut(&mut self, r: usize, c: usize) -> &mut f64 {
        &mut self.data[r * self.shape[1] + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.shape[1];
        &self.data[r * c..(r + 1) * c]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Maximum absolute entry (0 for empty tensors).
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// `C = op(A) · op(B)` where `op` optionally transposes its argument.
pub fn matmul(a: &Tensor, ta: bool, b: &Tensor, tb: bool) -> Tensor {
    assert_eq!(a.shape.len(), 2);
    assert_eq!(b.shape.len(), 2);
    let (m, ka) = if ta {
        (a.shape[1], a.shape[0])
    } else {
        (a.shape[0], a.shape[1])
    };
    let (kb, n) = if tb {
        (b.shape[1], b.shape[0])
    } else {
        (b.shape[0], b.shape[1])
    };
    assert_eq!(ka, kb, "matmul inner dims {} vs {}", ka, kb);
    let k = ka;
    let mut out = Tensor::zeros(&[m, n]);
    match (ta, tb) {
        (false, false) => {
            // C[i][j] += A[i][l] * B[l][j]: axpy over rows of B.
            for i in 0..m {
                let arow = &a.data[i * k..(i + 1) * k];
                let crow = &mut out.data[i * n..(i + 1) * n];
                for (l, &av) in arow.iter().enumerate() {
                    if av == 0.0 {
                        continue;
                    }
                    let brow = &b.data[l * n..(l + 1) * n];
                    for (cv, &bv) in crow.iter_mut().zip(brow) {
                        *cv += av * bv;
                    }
                }
            }
        }
        (false, true) => {
            // C[i][j] = dot(A row i, B row j).
            for i in 0..m {
                let arow = &a.data[i * k..(i + 1) * k];
                for j in 0..n {
                    let brow = &b.data[j * k..(j + 1) * k];
                    let mut acc = 0.0;
                    for (&av, &bv) in arow.iter().zip(brow) {
                        acc += av * bv;
                    }
                    out.data[i * n + j] = acc;
                }
            }
        }
        (true, false) => {
            // C[i][j] += A[l][i] * B[l][j].
            for l in 0..k {
                let arow = &a.data[l * m..(l + 1) * m];
                let brow = &b.data[l * n..(l + 1) * n];
                for (i, &av) in arow.iter().enumerate() {
                    if av == 0.0 {
                        continue;
                    }
                    let crow = &mut out.data[i * n..(i + 1) * n];
                    for (cv, &bv) in crow.iter_mut().zip(brow) {
                        *cv += av * bv;
                    }
                }
            }
        }
        (true, true) => {
            for i in 0..m {
                for j in 0..n {
                    let mut acc = 0.0;
                    for l in 0..k {
                        acc += a.data[l * m + i] * b.data[j * k + l];
                    }
                    out.data[i * n + j] = acc;
                }
            }
        }
    }
    out
}

/// `x · Wᵀ + b` for row-major `x: [n, in]`, `w: [out, in]`, `b: [out]`.
pub fn affine(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let mut out = matmul(x, false, w, true);
    add_bias_rows_inplace(&mut out, b);
    out
}

pub fn add_bias_rows_inplace(m: &mut Tensor, bias: &Tensor) {
    let cols = m.shape[1];
    assert_eq!(bias.len(), cols);
    for row in m.data.chunks_mut(cols) {
        for (v, &b) in row.iter_mut().zip(&bias.data) {
            *v += b;
        }
    }
}

/// Row-wise softmax of a matrix. Empty rows (zero columns) stay empty.
pub fn row_softmax(m: &Tensor) -> Tensor {
    let cols = m.shape[1];
    let mut out = m.clone();
    if cols == 0 {
        return out;
    }
    for row in out.data.chunks_mut(cols) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Log-sum-exp of each row; returns a vector of length `rows`.
pub fn logsumexp_rows(m: &Tensor) -> Tensor {
    let (r, c) = (m.shape[0], m.shape[1]);
    let mut out = Tensor::zeros(&[r]);
    for i in 0..r {
        out.data[i] = logsumexp_slice(&m.data[i * c..(i + 1) * c]);
    }
    out
}

/// Log-sum-exp of each column; returns a vector of length `cols`.
pub fn logsumexp_cols(m: &Tensor) -> Tensor {
    let (r, c) = (m.shape[0], m.shape[1]);
    let mut maxes = vec![f64::NEG_INFINITY; c];
    for row in m.data.chunks(c) {
        for (mx, &v) in maxes.iter_mut().zip(row) {
            if v > *mx {
                *mx = v;
            }
        }
    }
    let mut sums = vec![0.0f64; c];
    for row in m.data.chunks(c) {
        for ((s, &mx), &v) in sums.iter_mut().zip(&maxes).zip(row) {
            *s += (v - mx).exp();
        }
    }
    let data = sums
        .iter()
        .zip(&maxes)
        .map(|(&s, &mx)| if r == 0 { f64::NEG_INFINITY } else { mx + s.ln() })
        .collect();
    Tensor {
        shape: vec![c],
        data,
    }
}

pub fn logsumexp_slice(xs: &[f64]) -> f64 {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let sum: f64 = xs.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}

/// 2-D convolution with odd square kernels, stride 1, zero padding that
/// preserves the spatial size. `x: [ci, h, w]`, `w: [co, ci, k, k]`, `b: [co]`.
pub fn conv2d(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let (ci, h, wd) = (x.shape[0], x.shape[1], x.shape[2]);
    let (co, ciw, k) = (w.shape[0], w.shape[1], w.shape[2]);
    assert_eq!(ci, ciw, "conv channel mismatch");
    assert_eq!(w.shape[3], k);
    assert_eq!(k % 2, 1, "conv kernel must be odd");
    assert_eq!(b.len(), co);
    let pad = k / 2;
    let mut out = Tensor::zeros(&[co, h, wd]);
    for o in 0..co {
        let bias = b.data[o];
        let plane = &mut out.data[o * h * wd..(o + 1) * h * wd];
        for v in plane.iter_mut() {
            *v = bias;
        }
        for i in 0..ci {
            let src = &x.data[i * h * wd..(i + 1) * h * wd];
            for ky in 0..k {
                for kx in 0..k {
                    let weight = w.data[((o * ci + i) * k + ky) * k + kx];
                    if weight == 0.0 {
                        continue;
                    }
                    shifted_axpy(plane, src, weight, h, wd, ky as isize - pad as isize, kx as isize - pad as isize);
                }
            }
        }
    }
    out
}

/// `dst[y][x] += weight * src[y + dy][x + dx]` over the in-bounds overlap.
fn shifted_axpy(dst: &mut [f64], src: &[f64], weight: f64, h: usize, w: usize, dy: isize, dx: isize) {
    let y0 = (-dy).max(0) as usize;
    let y1 = (h as isize - dy).min(h as isize).max(0) as usize;
    let x0 = (-dx).max(0) as usize;
    let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
    if x0 >= x1 {
        return;
    }
    for y in y0..y1 {
        let sy = (y as isize + dy) as usize;
        let drow = &mut dst[y * w + x0..y * w + x1];
        let srow = &src[sy * w + (x0 as isize + dx) as usize..sy * w + (x1 as isize + dx) as usize];
        for (d, &s) in drow.iter_mut().zip(srow) {
            *d += weight * s;
        }
    }
}

/// Gradient of [`conv2d`] with respect to the input feature map.
pub fn conv2d_input_grad(dout: &Tensor, w: &Tensor) -> Tensor {
    let (co, h, wd) = (dout.shape[0], dout.shape[1], dout.shape[2]);
    let (cow, ci, k) = (w.shape[0], w.shape[1], w.shape[2]);
    assert_eq!(co, cow);
    let pad = (k / 2) as isize;
    let mut dx = Tensor::zeros(&[ci, h, wd]);
    for i in 0..ci {
        let plane = &mut dx.data[i * h * wd..(i + 1) * h * wd];
        for o in 0..co {
            let src = &dout.data[o * h * wd..(o + 1) * h * wd];
            for ky in 0..k {
                for kx in 0..k {
                    let weight = w.data[((o * ci + i) * k + ky) * k + kx];
                    if weight == 0.0 {
                        continue;
                    }
                    // Forward wrote out[y] += w * x[y + ky - pad], so the
                    // adjoint reads dout shifted the opposite way.
                    shifted_axpy(plane, src, weight, h, wd, pad - ky as isize, pad - kx as isize);
                }
            }
        }
    }
    dx
}

/// Gradient of [`conv2d`] with respect to the kernel weights.
pub fn conv2d_weight_grad(dout: &Tensor, x: &Tensor, k: usize) -> Tensor {
    let (co, h, wd) = (dout.shape[0], dout.shape[1], dout.shape[2]);
    let ci = x.shape[0];
    let pad = (k / 2) as isize;
    let mut dw = Tensor::zeros(&[co, ci, k, k]);
    for o in 0..co {
        let dplane = &dout.data[o * h * wd..(o + 1) * h * wd];
        for i in 0..ci {
            let xplane = &x.data[i * h * wd..(i + 1) * h * wd];
            for ky in 0..k {
                for kx in 0..k {
                    let dy = ky as isize - pad;
                    let dxo = kx as isize - pad;
                    let y0 = (-dy).max(0) as usize;
                    let y1 = (h as isize - dy).min(h as isize).max(0) as usize;
                    let x0 = (-dxo).max(0) as usize;
                    let x1 = (wd as isize - dxo).min(wd as isize).max(0) as usize;
                    let mut acc = 0.0;
                    if x0 < x1 {
                        for y in y0..y1 {
                            let sy = (y as isize + dy) as usize;
                            let drow = &dplane[y * wd + x0..y * wd + x1];
                            let xrow = &xplane
                                [sy * wd + (x0 as isize + dxo) as usize..sy * wd + (x1 as isize + dxo) as usize];
                            for (&d, &s) in drow.iter().zip(xrow) {
                                acc += d * s;
                            }
                        }
                    }
                    dw.data[((o * ci + i) * k + ky) * k + kx] = acc;
                }
            }
        }
    }
    dw
}

/// Gradient of [`conv2d`] with respect to the bias.
pub fn conv2d_bias_grad(dout: &Tensor) -> Tensor {
    let (co, h, wd) = (dout.shape[0], dout.shape[1], dout.shape[2]);
    let mut db = Tensor::zeros(&[co]);
    for o in 0..co {
        db.data[o] = dout.data[o * h * wd..(o + 1) * h * wd].iter().sum();
    }
    db
}

pub fn map_unary(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor {
        shape: t.shape.clone(),
        data: t.data.iter().map(|&v| f(v)).collect(),
    }
}

pub fn zip_binary(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    assert_eq!(a.shape, b.shape, "shape mismatch {:?} vs {:?}", a.shape, b.shape);
    Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    }
}
