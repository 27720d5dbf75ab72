//! Dense row-major `f64` tensors.
//!
//! A [`Tensor`] is a plain value with no graph linkage; differentiable
//! computation goes through [`crate::autodiff::Var`], which wraps a tensor
//! recorded on a tape.

use crate::error::{shape_err, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, checking that `data.len()` equals the product of `shape`.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Domain {
                op: "tensor",
                msg: format!("zero extent in shape {shape:?}"),
            });
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err("tensor", &shape, &[data.len()]));
        }
        Ok(Self { shape, data })
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

    /// Row-major matrix from nested rows. Panics on ragged input.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows[0].len();
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Self {
            shape: vec![rows.len(), cols],
            data: rows.iter().flat_map(|r| r.iter().copied()).collect(),
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// `n×n` identity.
    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
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

    /// Extents as `(rows, cols)` for a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(shape_err("dims2", &self.shape, &[0, 0])),
        }
    }

    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [a, b, c] => Ok((a, b, c)),
            _ => Err(shape_err("dims3", &self.shape, &[0, 0, 0])),
        }
    }

    pub fn get2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.shape[1] + j]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.contains(&0) {
            return Err(shape_err("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(shape_err("zip_map", &self.shape, &other.shape));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.dims2()?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Self {
            shape: vec![c, r],
            data: out,
        })
    }

    /// Reverses the order of rows (axis 0) of a rank-2 tensor.
    pub fn reverse_rows(&self) -> Result<Self> {
        let (r, c) = self.dims2()?;
        let mut out = Vec::with_capacity(r * c);
        for i in (0..r).rev() {
            out.extend_from_slice(&self.data[i * c..(i + 1) * c]);
        }
        Ok(Self {
            shape: vec![r, c],
            data: out,
        })
    }

    /// Rows `[start, end)` of a rank-2 tensor.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Self> {
        let (r, c) = self.dims2()?;
        if start >= end || end > r {
            return Err(shape_err("slice_rows", &self.shape, &[start, end]));
        }
        Ok(Self {
            shape: vec![end - start, c],
            data: self.data[start * c..end * c].to_vec(),
        })
    }

    /// Columns `[start, end)` of a rank-2 tensor.
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Self> {
        let (r, c) = self.dims2()?;
        if start >= end || end > c {
            return Err(shape_err("slice_cols", &self.shape, &[start, end]));
        }
        let w = end - start;
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&self.data[i * c + start..i * c + end]);
        }
        Ok(Self {
            shape: vec![r, w],
            data: out,
        })
    }

    /// Cyclic shift of a rank-2 grid: `out[(i+a) mod H, (j+b) mod W] = in[i, j]`.
    pub fn roll2(&self, a: usize, b: usize) -> Result<Self> {
        let (h, w) = self.dims2()?;
        let mut out = vec![0.0; h * w];
        for i in 0..h {
            for j in 0..w {
                out[((i + a) % h) * w + (j + b) % w] = self.data[i * w + j];
            }
        }
        Ok(Self {
            shape: vec![h, w],
            data: out,
        })
    }
}

/// `a[M,K] · b[K,N]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(shape_err("matmul", a.shape(), b.shape()));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a.data[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(Tensor {
        shape: vec![m, n],
        data: out,
    })
}

/// `aᵀ · b` for `a[K,M]`, `b[K,N]`.
pub(crate) fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    let (k, m) = (a.shape[0], a.shape[1]);
    let n = b.shape[1];
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let brow = &b.data[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a.data[p * m + i];
            if av == 0.0 {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor {
        shape: vec![m, n],
        data: out,
    }
}

/// `a · bᵀ` for `a[M,K]`, `b[N,K]`.
pub(crate) fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.shape[0], a.shape[1]);
    let n = b.shape[0];
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b.data[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    Tensor {
        shape: vec![m, n],
        data: out,
    }
}

/// Geometry of a 2D convolution, cross-correlation convention (no kernel flip).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeom {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl Conv2dGeom {
    pub fn new(stride: (usize, usize), padding: (usize, usize)) -> Self {
        Self { stride, padding }
    }

    /// Output extents for an input of `(h, w)` and kernel `(kh, kw)`.
    pub fn output_hw(&self, h: usize, w: usize, kh: usize, kw: usize) -> Option<(usize, usize)> {
        let ph = self.padding.0.checked_mul(2)?.checked_add(h)?;
        let pw = self.padding.1.checked_mul(2)?.checked_add(w)?;
        let oh = ph.checked_sub(kh)?.checked_div(self.stride.0)? + 1;
        let ow = pw.checked_sub(kw)?.checked_div(self.stride.1)? + 1;
        Some((oh, ow))
    }
}

/// `x[C,H,W]` ⋆ `k[Co,C,Kh,Kw]` (+ `b[Co]`) with zero padding.
pub fn conv2d(x: &Tensor, k: &Tensor, b: Option<&Tensor>, geom: Conv2dGeom) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    let [co, ci, kh, kw] = k.shape[..] else {
        return Err(shape_err("conv2d", x.shape(), k.shape()));
    };
    if ci != c {
        return Err(shape_err("conv2d", x.shape(), k.shape()));
    }
    if let Some(b) = b {
        if b.shape != [co] {
            return Err(shape_err("conv2d bias", k.shape(), b.shape()));
        }
    }
    let (oh, ow) = geom
        .output_hw(h, w, kh, kw)
        .ok_or_else(|| shape_err("conv2d", x.shape(), k.shape()))?;
    let (sh, sw) = geom.stride;
    let (ph, pw) = geom.padding;
    let mut out = vec![0.0; co * oh * ow];
    for o in 0..co {
        let bias = b.map_or(0.0, |b| b.data[o]);
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = bias;
                for ch in 0..c {
                    for ky in 0..kh {
                        let iy = (oy * sh + ky) as isize - ph as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let xrow = (ch * h + iy as usize) * w;
                        let krow = ((o * c + ch) * kh + ky) * kw;
                        for kx in 0..kw {
                            let ix = (ox * sw + kx) as isize - pw as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc += x.data[xrow + ix as usize] * k.data[krow + kx];
                        }
                    }
                }
                out[(o * oh + oy) * ow + ox] = acc;
            }
        }
    }
    Ok(Tensor {
        shape: vec![co, oh, ow],
        data: out,
    })
}

/// Gradients of [`conv2d`] w.r.t. input and kernel given the output gradient.
pub(crate) fn conv2d_backward(
    x: &Tensor,
    k: &Tensor,
    g: &Tensor,
    geom: Conv2dGeom,
) -> (Tensor, Tensor) {
    let (c, h, w) = (x.shape[0], x.shape[1], x.shape[2]);
    let (co, kh, kw) = (k.shape[0], k.shape[2], k.shape[3]);
    let (oh, ow) = (g.shape[1], g.shape[2]);
    let (sh, sw) = geom.stride;
    let (ph, pw) = geom.padding;
    let mut gx = vec![0.0; x.len()];
    let mut gk = vec![0.0; k.len()];
    for o in 0..co {
        for oy in 0..oh {
            for ox in 0..ow {
                let go = g.data[(o * oh + oy) * ow + ox];
                if go == 0.0 {
                    continue;
                }
                for ch in 0..c {
                    for ky in 0..kh {
                        let iy = (oy * sh + ky) as isize - ph as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let xrow = (ch * h + iy as usize) * w;
                        let krow = ((o * c + ch) * kh + ky) * kw;
                        for kx in 0..kw {
                            let ix = (ox * sw + kx) as isize - pw as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            gx[xrow + ix as usize] += go * k.data[krow + kx];
                            gk[krow + kx] += go * x.data[xrow + ix as usize];
                        }
                    }
                }
            }
        }
    }
    (
        Tensor {
            shape: x.shape.clone(),
            data: gx,
        },
        Tensor {
            shape: k.shape.clone(),
            data: gk,
        },
    )
}

/// Depthwise causal convolution over the sequence axis:
/// `out[l,d] = Σ_{j<K, l≥j} x[l−j,d]·k[d,j] (+ b[d])`.
pub fn conv1d_depthwise_causal(x: &Tensor, k: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let (l, d) = x.dims2()?;
    let (kd, kw) = k.dims2()?;
    if kd != d {
        return Err(shape_err("conv1d_depthwise_causal", x.shape(), k.shape()));
    }
    if let Some(b) = b {
        if b.shape != [d] {
            return Err(shape_err("conv1d_depthwise_causal bias", x.shape(), b.shape()));
        }
    }
    let mut out = vec![0.0; l * d];
    for t in 0..l {
        for ch in 0..d {
            let mut acc = b.map_or(0.0, |b| b.data[ch]);
            for j in 0..kw.min(t + 1) {
                acc += x.data[(t - j) * d + ch] * k.data[ch * kw + j];
            }
            out[t * d + ch] = acc;
        }
    }
    Ok(Tensor {
        shape: vec![l, d],
        data: out,
    })
}

pub(crate) fn conv1d_depthwise_causal_backward(x: &Tensor, k: &Tensor, g: &Tensor) -> (Tensor, Tensor) {
    let (l, d) = (x.shape[0], x.shape[1]);
    let kw = k.shape[1];
    let mut gx = vec![0.0; l * d];
    let mut gk = vec![0.0; d * kw];
    for t in 0..l {
        for ch in 0..d {
            let go = g.data[t * d + ch];
            for j in 0..kw.min(t + 1) {
                gx[(t - j) * d + ch] += go * k.data[ch * kw + j];
                gk[ch * kw + j] += go * x.data[(t - j) * d + ch];
            }
        }
    }
    (
        Tensor {
            shape: vec![l, d],
            data: gx,
        },
        Tensor {
            shape: vec![d, kw],
            data: gk,
        },
    )
}

/// Numerically stable `log(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

/// `elu(x) + 1`, the positive feature map used by linear attention.
pub fn elu_plus_one(x: f64) -> f64 {
    if x > 0.0 {
        x + 1.0
    } else {
        x.exp()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_bad_length() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn conv_geometry_matches_stem_stage() {
        let g = Conv2dGeom::new((4, 4), (3, 3));
        assert_eq!(g.output_hw(224, 224, 7, 7), Some((56, 56)));
        assert_eq!(Conv2dGeom::new((1, 1), (0, 0)).output_hw(2, 2, 3, 3), None);
    }

    #[test]
    fn softplus_asymptotes() {
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((softplus(1000.0) - 1000.0).abs() < 1e-12);
        assert!(softplus(-1000.0).abs() < 1e-12);
    }

    #[test]
    fn roll_then_unroll() {
        let t = Tensor::new(vec![3, 4], (0..12).map(f64::from).collect()).unwrap();
        let r = t.roll2(1, 3).unwrap().roll2(2, 1).unwrap();
        assert_eq!(r, t);
    }
}
