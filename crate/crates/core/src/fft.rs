//! Two-dimensional discrete Fourier transform and amplitude spectra.
//!
//! The forward transform is unnormalized:
//! `F(u,v) = Σ_x Σ_y f(x,y)·exp(−2πi(ux/H + vy/W))`.
//! Low frequencies stay at the grid corners (no fftshift).
//!
//! [`fft2d`] runs row transforms then column transforms. Each 1D length uses
//! iterative radix-2 Cooley-Tukey when it is a power of two and a direct
//! `O(n²)` DFT otherwise. [`dft2d_naive`] evaluates the double sum directly
//! and serves as the reference.

use std::f64::consts::PI;

use crate::error::Result;
use crate::tensor::Tensor;

/// Guard added under the square root of the amplitude so its gradient is
/// defined (and zero) at zero magnitude.
pub const AMPLITUDE_EPS: f64 = 1e-12;

/// An `H×W` complex spectrum stored as separate real and imaginary planes.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexGrid {
    pub h: usize,
    pub w: usize,
    pub re: Vec<f64>,
    pub im: Vec<f64>,
}

impl ComplexGrid {
    pub fn zeros(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            re: vec![0.0; h * w],
            im: vec![0.0; h * w],
        }
    }

    /// Real grid lifted to complex with zero imaginary part.
    pub fn from_real(f: &Tensor) -> Result<Self> {
        let (h, w) = f.dims2()?;
        Ok(Self {
            h,
            w,
            re: f.data().to_vec(),
            im: vec![0.0; h * w],
        })
    }

    pub fn at(&self, u: usize, v: usize) -> (f64, f64) {
        let i = u * self.w + v;
        (self.re[i], self.im[i])
    }

    /// Largest bin-wise modulus of the difference between two grids.
    pub fn max_abs_diff(&self, other: &ComplexGrid) -> f64 {
        assert_eq!((self.h, self.w), (other.h, other.w));
        self.re
            .iter()
            .zip(&self.im)
            .zip(other.re.iter().zip(&other.im))
            .map(|((a, b), (c, d))| (a - c).hypot(b - d))
            .fold(0.0, f64::max)
    }

    /// Σ |F(u,v)|².
    pub fn energy(&self) -> f64 {
        self.re.iter().zip(&self.im).map(|(r, i)| r * r + i * i).sum()
    }
}

/// Direct evaluation of the 2D DFT double sum, `O(H²W²)`.
pub fn dft2d_naive(f: &Tensor) -> Result<ComplexGrid> {
    let (h, w) = f.dims2()?;
    let mut out = ComplexGrid::zeros(h, w);
    let fd = f.data();
    for u in 0..h {
        for v in 0..w {
            let (mut re, mut im) = (0.0, 0.0);
            for x in 0..h {
                for y in 0..w {
                    // Reduce the phase index exactly before scaling.
                    let ph = ((u * x) % h) as f64 / h as f64 + ((v * y) % w) as f64 / w as f64;
                    let theta = -2.0 * PI * ph;
                    let val = fd[x * w + y];
                    re += val * theta.cos();
                    im += val * theta.sin();
                }
            }
            out.re[u * w + v] = re;
            out.im[u * w + v] = im;
        }
    }
    Ok(out)
}

/// Fast 2D DFT of a real grid. Matches [`dft2d_naive`] to rounding.
pub fn fft2d(f: &Tensor) -> Result<ComplexGrid> {
    let mut g = ComplexGrid::from_real(f)?;
    fft2d_in_place(&mut g);
    Ok(g)
}

/// Fast 2D DFT of a complex grid.
pub fn fft2d_complex(g: &ComplexGrid) -> ComplexGrid {
    let mut out = g.clone();
    fft2d_in_place(&mut out);
    out
}

fn fft2d_in_place(g: &mut ComplexGrid) {
    let (h, w) = (g.h, g.w);
    let row_plan = Plan1d::new(w);
    for r in 0..h {
        row_plan.run(&mut g.re[r * w..(r + 1) * w], &mut g.im[r * w..(r + 1) * w]);
    }
    let col_plan = Plan1d::new(h);
    let mut cre = vec![0.0; h];
    let mut cim = vec![0.0; h];
    for c in 0..w {
        for r in 0..h {
            cre[r] = g.re[r * w + c];
            cim[r] = g.im[r * w + c];
        }
        col_plan.run(&mut cre, &mut cim);
        for r in 0..h {
            g.re[r * w + c] = cre[r];
            g.im[r * w + c] = cim[r];
        }
    }
}

/// Precomputed twiddles for one transform length.
struct Plan1d {
    n: usize,
    cos: Vec<f64>,
    sin: Vec<f64>,
    radix2: bool,
}

impl Plan1d {
    fn new(n: usize) -> Self {
        let (cos, sin) = (0..n)
            .map(|k| {
                let theta = -2.0 * PI * k as f64 / n as f64;
                (theta.cos(), theta.sin())
            })
            .unzip();
        Self {
            n,
            cos,
            sin,
            radix2: n.is_power_of_two(),
        }
    }

    fn run(&self, re: &mut [f64], im: &mut [f64]) {
        if self.n <= 1 {
            return;
        }
        if self.radix2 {
            self.radix2(re, im);
        } else {
            self.direct(re, im);
        }
    }

    fn direct(&self, re: &mut [f64], im: &mut [f64]) {
        let n = self.n;
        let mut ore = vec![0.0; n];
        let mut oim = vec![0.0; n];
        for k in 0..n {
            let (mut sr, mut si) = (0.0, 0.0);
            for j in 0..n {
                let t = (k * j) % n;
                let (c, s) = (self.cos[t], self.sin[t]);
                sr += re[j] * c - im[j] * s;
                si += re[j] * s + im[j] * c;
            }
            ore[k] = sr;
            oim[k] = si;
        }
        re.copy_from_slice(&ore);
        im.copy_from_slice(&oim);
    }

    /// Iterative decimation-in-time: bit-reversal permutation, then
    /// butterflies merging even/odd half-length transforms.
    fn radix2(&self, re: &mut [f64], im: &mut [f64]) {
        let n = self.n;
        let bits = n.trailing_zeros();
        for i in 0..n {
            let j = i.reverse_bits() >> (usize::BITS - bits);
            if j > i {
                re.swap(i, j);
                im.swap(i, j);
            }
        }
        let mut len = 2;
        while len <= n {
            let half = len / 2;
            let step = n / len;
            for start in (0..n).step_by(len) {
                for k in 0..half {
                    let (c, s) = (self.cos[k * step], self.sin[k * step]);
                    let a = start + k;
                    let b = a + half;
                    let tr = re[b] * c - im[b] * s;
                    let ti = re[b] * s + im[b] * c;
                    re[b] = re[a] - tr;
                    im[b] = im[a] - ti;
                    re[a] += tr;
                    im[a] += ti;
                }
            }
            len <<= 1;
        }
    }
}

/// `√(re² + im² + ε)` bin-wise, as an `H×W` tensor.
pub fn amplitude_spectrum(f: &ComplexGrid) -> Tensor {
    let data = f
        .re
        .iter()
        .zip(&f.im)
        .map(|(r, i)| (r * r + i * i + AMPLITUDE_EPS).sqrt())
        .collect();
    Tensor::new(vec![f.h, f.w], data).expect("grid extents are positive")
}

/// Amplitude of the 2D transform of each channel of `x[D,H,W]` independently.
pub fn amp2d_per_channel(x: &Tensor) -> Result<Tensor> {
    let (d, h, w) = x.dims3()?;
    let out = amp2d_batched(x.data(), d, h, w);
    Tensor::new(vec![d, h, w], out)
}

/// Amplitude of the 2D transform of the whole token matrix `x[L,D]`.
pub fn amp2d_sequence_grid(x: &Tensor) -> Result<Tensor> {
    let (l, d) = x.dims2()?;
    Tensor::new(vec![l, d], amp2d_batched(x.data(), 1, l, d))
}

/// Amplitudes for `batch` contiguous `h×w` grids packed in `data`.
pub(crate) fn amp2d_batched(data: &[f64], batch: usize, h: usize, w: usize) -> Vec<f64> {
    let hw = h * w;
    let mut out = Vec::with_capacity(batch * hw);
    for b in 0..batch {
        let grid = Tensor::new(vec![h, w], data[b * hw..(b + 1) * hw].to_vec())
            .expect("grid extents are positive");
        let spec = fft2d(&grid).expect("rank-2 grid");
        out.extend(amplitude_spectrum(&spec).into_data());
    }
    out
}

/// Vector-Jacobian product of `amplitude(fft2d(·))` over `batch` packed grids.
///
/// With `w = g·F/|F|`, the input gradient is `Re(DFT(conj(w)))`.
pub(crate) fn amp2d_batched_backward(data: &[f64], g: &[f64], batch: usize, h: usize, w: usize) -> Vec<f64> {
    let hw = h * w;
    let mut out = Vec::with_capacity(batch * hw);
    for b in 0..batch {
        let grid = Tensor::new(vec![h, w], data[b * hw..(b + 1) * hw].to_vec())
            .expect("grid extents are positive");
        let spec = fft2d(&grid).expect("rank-2 grid");
        let mut wgt = ComplexGrid::zeros(h, w);
        for i in 0..hw {
            let (r, im) = (spec.re[i], spec.im[i]);
            let amp = (r * r + im * im + AMPLITUDE_EPS).sqrt();
            let s = g[b * hw + i] / amp;
            wgt.re[i] = s * r;
            wgt.im[i] = -s * im;
        }
        out.extend(fft2d_complex(&wgt).re);
    }
    out
}
