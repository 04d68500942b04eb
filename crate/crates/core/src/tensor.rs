//! Dense row-major `f64` tensors and the numeric kernels behind the tape.
//!
//! Layout convention: `[batch, channels, height, width]` for images and
//! `[batch, features]` for vectors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} holds {n} values but {} were given",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// 1-D tensor from a slice.
    pub fn vector(values: &[f64]) -> Self {
        Self {
            shape: vec![values.len()],
            data: values.to_vec(),
        }
    }

    /// 2-D tensor from rows of equal length.
    pub fn matrix(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("ragged rows"));
        }
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::new(&[rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        match self.data.as_slice() {
            [v] => Ok(*v),
            _ => Err(Error::shape(format!(
                "item() on tensor of shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Largest absolute elementwise difference; shapes must agree.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "{:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    /// Channel index of each element for a rank-2 `[n, c]` or rank-4
    /// `[n, c, h, w]` tensor, together with the channel count.
    pub(crate) fn channel_layout(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [_, c] => Ok((*c, 1)),
            [_, c, h, w] => Ok((*c, h * w)),
            s => Err(Error::shape(format!(
                "expected [n, c] or [n, c, h, w], got {s:?}"
            ))),
        }
    }
}

/// Strides of `b` as seen from `a`'s index space: zero along broadcast axes.
///
/// `b` broadcasts into `a` if it has one element, or the same rank with every
/// dimension either equal to `a`'s or 1.
pub(crate) fn broadcast_strides(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if b.iter().product::<usize>() == 1 {
        return Ok(vec![0; a.len()]);
    }
    if a.len() != b.len() {
        return Err(Error::shape(format!("cannot broadcast {b:?} into {a:?}")));
    }
    let mut strides = vec![0; a.len()];
    let mut acc = 1;
    for d in (0..a.len()).rev() {
        if b[d] == a[d] {
            strides[d] = acc;
        } else if b[d] != 1 {
            return Err(Error::shape(format!("cannot broadcast {b:?} into {a:?}")));
        }
        acc *= b[d];
    }
    Ok(strides)
}

/// Calls `f(index_in_a, index_in_b)` for every element of `a`'s shape.
pub(crate) fn for_each_broadcast(a: &[usize], b_strides: &[usize], mut f: impl FnMut(usize, usize)) {
    let n: usize = a.iter().product();
    if n == 0 {
        return;
    }
    let rank = a.len();
    if rank == 0 {
        f(0, 0);
        return;
    }
    // Innermost axis is walked directly; outer axes by odometer.
    let inner = a[rank - 1];
    let inner_stride = b_strides[rank - 1];
    let mut idx = vec![0usize; rank];
    let mut ia = 0;
    loop {
        let base: usize = (0..rank - 1).map(|d| idx[d] * b_strides[d]).sum();
        for j in 0..inner {
            f(ia, base + j * inner_stride);
            ia += 1;
        }
        if ia == n {
            break;
        }
        let mut d = rank - 1;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            if idx[d] < a[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

/// `c[m×n] = a[m×k] · b[k×n]`.
pub(crate) fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    let rows_per_chunk = row_chunk(m, k * n);
    par::for_each_chunk_mut(&mut c, rows_per_chunk * n.max(1), |ci, chunk| {
        let row0 = ci * rows_per_chunk;
        for (r, crow) in chunk.chunks_mut(n.max(1)).enumerate() {
            let arow = &a[(row0 + r) * k..(row0 + r + 1) * k];
            for (p, &aip) in arow.iter().enumerate() {
                if aip == 0.0 {
                    continue;
                }
                let brow = &b[p * n..(p + 1) * n];
                for (cv, &bv) in crow.iter_mut().zip(brow) {
                    *cv += aip * bv;
                }
            }
        }
    });
    c
}

/// `c[m×n] = a[m×k] · b[n×k]ᵀ`.
pub(crate) fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    let rows_per_chunk = row_chunk(m, k * n);
    par::for_each_chunk_mut(&mut c, rows_per_chunk * n.max(1), |ci, chunk| {
        let row0 = ci * rows_per_chunk;
        for (r, crow) in chunk.chunks_mut(n.max(1)).enumerate() {
            let arow = &a[(row0 + r) * k..(row0 + r + 1) * k];
            for (j, cv) in crow.iter_mut().enumerate() {
                let brow = &b[j * k..(j + 1) * k];
                *cv = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
            }
        }
    });
    c
}

/// `c[m×n] = a[k×m]ᵀ · b[k×n]`.
pub(crate) fn matmul_tn(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    let rows_per_chunk = row_chunk(m, k * n);
    par::for_each_chunk_mut(&mut c, rows_per_chunk * n.max(1), |ci, chunk| {
        let row0 = ci * rows_per_chunk;
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            for (r, crow) in chunk.chunks_mut(n.max(1)).enumerate() {
                let api = a[p * m + row0 + r];
                if api == 0.0 {
                    continue;
                }
                for (cv, &bv) in crow.iter_mut().zip(brow) {
                    *cv += api * bv;
                }
            }
        }
    });
    c
}

// Rows per parallel task: enough work per task to amortize scheduling.
fn row_chunk(m: usize, work_per_row: usize) -> usize {
    const TARGET: usize = 1 << 15;
    let rows = (TARGET / work_per_row.max(1)).max(1);
    rows.min(m.max(1))
}

/// Geometry of a 2-D cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], k: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if stride == 0 {
            return Err(Error::config("convolution stride must be positive"));
        }
        let (&[batch, c_in, h, w], &[c_out, kc, kh, kw]) = (x, k) else {
            return Err(Error::shape(format!(
                "conv2d expects [b,c,h,w] input and [o,c,kh,kw] kernel, got {x:?} and {k:?}"
            )));
        };
        if kc != c_in {
            return Err(Error::shape(format!(
                "conv2d input has {c_in} channels but kernel expects {kc}"
            )));
        }
        if kh == 0 || kw == 0 || kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(Error::config(format!(
                "kernel {kh}x{kw} does not fit padded input {}x{}",
                h + 2 * pad,
                w + 2 * pad
            )));
        }
        Ok(Self {
            batch,
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (w + 2 * pad - kw) / stride + 1,
        })
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.batch, self.c_out, self.oh, self.ow]
    }

    fn patch_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }

    /// Input offset for (channel, kernel row, kernel col, output row, output col), if in bounds.
    #[inline]
    fn source(&self, c: usize, ki: usize, kj: usize, oi: usize, oj: usize) -> Option<usize> {
        let y = (oi * self.stride + ki) as isize - self.pad as isize;
        let x = (oj * self.stride + kj) as isize - self.pad as isize;
        if y < 0 || x < 0 || y as usize >= self.h || x as usize >= self.w {
            return None;
        }
        Some((c * self.h + y as usize) * self.w + x as usize)
    }

    /// Unfolds one sample into a `[patch_len, positions]` column matrix.
    fn im2col(&self, sample: &[f64]) -> Vec<f64> {
        let pos = self.positions();
        let mut cols = vec![0.0; self.patch_len() * pos];
        for c in 0..self.c_in {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * pos..(row + 1) * pos];
                    for oi in 0..self.oh {
                        for oj in 0..self.ow {
                            if let Some(s) = self.source(c, ki, kj, oi, oj) {
                                dst[oi * self.ow + oj] = sample[s];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64], sample_grad: &mut [f64]) {
        let pos = self.positions();
        for c in 0..self.c_in {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * pos..(row + 1) * pos];
                    for oi in 0..self.oh {
                        for oj in 0..self.ow {
                            if let Some(s) = self.source(c, ki, kj, oi, oj) {
                                sample_grad[s] += src[oi * self.ow + oj];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(g: &ConvGeom, x: &[f64], k: &[f64]) -> Vec<f64> {
    let in_len = g.c_in * g.h * g.w;
    let out_len = g.c_out * g.positions();
    let mut out = vec![0.0; g.batch * out_len];
    par::for_each_chunk_mut(&mut out, out_len, |b, y| {
        let cols = g.im2col(&x[b * in_len..(b + 1) * in_len]);
        let prod = matmul_serial_nn(k, &cols, g.c_out, g.patch_len(), g.positions());
        y.copy_from_slice(&prod);
    });
    out
}

/// Returns `(d_input, d_kernel)`.
pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    x: &[f64],
    k: &[f64],
    upstream: &[f64],
    need_input: bool,
    need_kernel: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let in_len = g.c_in * g.h * g.w;
    let out_len = g.c_out * g.positions();
    let (pl, pos) = (g.patch_len(), g.positions());

    let dx = need_input.then(|| {
        let mut dx = vec![0.0; g.batch * in_len];
        par::for_each_chunk_mut(&mut dx, in_len, |b, dxb| {
            let dy = &upstream[b * out_len..(b + 1) * out_len];
            let dcols = matmul_serial_tn(k, dy, g.c_out, pl, pos);
            g.col2im(&dcols, dxb);
        });
        dx
    });

    let dk = need_kernel.then(|| {
        // Per-sample partials, summed in sample order for determinism.
        let partials = par::map_indexed(g.batch, |b| {
            let cols = g.im2col(&x[b * in_len..(b + 1) * in_len]);
            let dy = &upstream[b * out_len..(b + 1) * out_len];
            matmul_serial_nt(dy, &cols, g.c_out, pos, pl)
        });
        let mut dk = vec![0.0; g.c_out * pl];
        for p in &partials {
            for (d, v) in dk.iter_mut().zip(p) {
                *d += v;
            }
        }
        dk
    });

    (dx, dk)
}

// Single-threaded kernels for use inside an already-parallel region.

fn matmul_serial_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            for (cv, &bv) in crow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *cv += aip * bv;
            }
        }
    }
    c
}

fn matmul_serial_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] = arow.iter().zip(&b[j * k..(j + 1) * k]).map(|(x, y)| x * y).sum();
        }
    }
    c
}

fn matmul_serial_tn(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let api = a[p * m + i];
            if api == 0.0 {
                continue;
            }
            for (cv, &bv) in c[i * n..(i + 1) * n].iter_mut().zip(brow) {
                *cv += api * bv;
            }
        }
    }
    c
}
