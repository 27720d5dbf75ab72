//! Selective state-space (S6) machinery.
//!
//! The state matrix is diagonal and stored per `(channel, state)` pair as
//! `A = −exp(A_log)`, so zero-order-hold discretization is element-wise:
//!
//! ```text
//! Ā = exp(Δ·A)
//! B̄ = (exp(Δ·A) − 1)/(Δ·A) · Δ·B      (→ Δ·B as Δ·A → 0)
//! ```
//!
//! [`scan_sequential`] runs the recurrence; [`scan_kernel`] builds the
//! equivalent causal convolution kernel `K̄_j = C·Ā^j·B̄`, valid only when the
//! parameters do not vary with time.

use serde::{Deserialize, Serialize};

use crate::autodiff::{self as ad, Var};
use crate::error::{shape_err, Error, Result};
use crate::params::{Init, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Below this `|Δ·A|` the ZOH input coefficient uses its series limit.
pub const SERIES_THRESHOLD: f64 = 1e-8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Discretization {
    /// Exact zero-order hold.
    #[default]
    Zoh,
    /// `B̄ = Δ·B`.
    Euler,
}

/// `(Ā, φ, ∂φ/∂Δ, ∂φ/∂a)` for one `(Δ, a)` pair, where `B̄ = φ·B`.
#[inline]
fn coefficients(delta: f64, a: f64, mode: Discretization) -> (f64, f64, f64, f64) {
    let z = delta * a;
    let abar = z.exp();
    match mode {
        Discretization::Euler => (abar, delta, 1.0, 0.0),
        Discretization::Zoh => {
            if z.abs() < SERIES_THRESHOLD {
                (abar, delta * (1.0 + 0.5 * z), abar, 0.5 * delta * delta)
            } else {
                let phi = z.exp_m1() / a;
                let dphi_da = if z.abs() < 1e-4 {
                    delta * delta * (0.5 + z / 3.0 + z * z / 8.0)
                } else {
                    (z * abar - z.exp_m1()) / (a * a)
                };
                (abar, phi, abar, dphi_da)
            }
        }
    }
}

/// Discretizes `A[D,N]`, `B[L,N]` with per-token steps `delta[L,D]`.
/// Returns `(Ā, B̄)`, each `[L,D,N]`.
pub fn discretize(a: &Tensor, b: &Tensor, delta: &Tensor, mode: Discretization) -> Result<(Tensor, Tensor)> {
    let (d, n) = a.dims2()?;
    let (l, nb) = b.dims2()?;
    if nb != n || delta.shape() != [l, d] {
        return Err(shape_err("discretize", delta.shape(), b.shape()));
    }
    if let Some(bad) = delta.data().iter().find(|&&v| !(v > 0.0)) {
        return Err(Error::Domain {
            op: "discretize",
            msg: format!("step size must be positive, got {bad}"),
        });
    }
    let mut abar = Vec::with_capacity(l * d * n);
    let mut bbar = Vec::with_capacity(l * d * n);
    for t in 0..l {
        for ch in 0..d {
            let dt = delta.data()[t * d + ch];
            for s in 0..n {
                let (ab, phi, _, _) = coefficients(dt, a.data()[ch * n + s], mode);
                abar.push(ab);
                bbar.push(phi * b.data()[t * n + s]);
            }
        }
    }
    Ok((Tensor::new(vec![l, d, n], abar)?, Tensor::new(vec![l, d, n], bbar)?))
}

fn check_scan_shapes(abar: &Tensor, bbar: &Tensor, c: &Tensor, x: &Tensor, d_skip: Option<&Tensor>) -> Result<(usize, usize, usize)> {
    let (l, d, n) = abar.dims3()?;
    if bbar.shape() != abar.shape() {
        return Err(shape_err("scan", abar.shape(), bbar.shape()));
    }
    if c.shape() != [l, n] {
        return Err(shape_err("scan", abar.shape(), c.shape()));
    }
    if x.shape() != [l, d] {
        return Err(shape_err("scan", abar.shape(), x.shape()));
    }
    if let Some(ds) = d_skip {
        if ds.shape() != [d] {
            return Err(shape_err("scan", x.shape(), ds.shape()));
        }
    }
    Ok((l, d, n))
}

/// Recurrence `h_t = Ā_t⊙h_{t−1} + B̄_t·x_t` from `h_{−1} = 0`, read out as
/// `y_t = Σ_n C_t[n]·h_t[·,n] (+ D⊙x_t)`.
pub fn scan_sequential(abar: &Tensor, bbar: &Tensor, c: &Tensor, x: &Tensor, d_skip: Option<&Tensor>) -> Result<Tensor> {
    let (l, d, n) = check_scan_shapes(abar, bbar, c, x, d_skip)?;
    let mut h = vec![0.0; d * n];
    let mut y = vec![0.0; l * d];
    for t in 0..l {
        let ct = &c.data()[t * n..(t + 1) * n];
        for ch in 0..d {
            let xv = x.data()[t * d + ch];
            let base = (t * d + ch) * n;
            let mut acc = 0.0;
            for s in 0..n {
                let hs = &mut h[ch * n + s];
                *hs = abar.data()[base + s] * *hs + bbar.data()[base + s] * xv;
                acc += ct[s] * *hs;
            }
            y[t * d + ch] = acc + d_skip.map_or(0.0, |ds| ds.data()[ch] * xv);
        }
    }
    Tensor::new(vec![l, d], y)
}

/// Convolution kernel `K̄[j,d] = Σ_n C[n]·Ā[d,n]^j·B̄[d,n]`, `j < L`.
///
/// Fails with a contract violation if `Ā`, `B̄` or `C` differ between time
/// steps: the kernel form only exists for time-invariant systems.
pub fn scan_kernel(abar: &Tensor, bbar: &Tensor, c: &Tensor) -> Result<Tensor> {
    let (l, d, n) = abar.dims3()?;
    if bbar.shape() != abar.shape() || c.shape() != [l, n] {
        return Err(shape_err("scan_kernel", abar.shape(), c.shape()));
    }
    let invariant = |t: &Tensor, stride: usize| (1..l).all(|i| t.data()[i * stride..(i + 1) * stride] == t.data()[..stride]);
    if !(invariant(abar, d * n) && invariant(bbar, d * n) && invariant(c, n)) {
        return Err(Error::Contract {
            op: "scan_kernel",
            msg: "parameters vary over time; the convolution form requires a time-invariant system".into(),
        });
    }
    let mut k = vec![0.0; l * d];
    for ch in 0..d {
        for s in 0..n {
            let (ab, bb, cs) = (abar.data()[ch * n + s], bbar.data()[ch * n + s], c.data()[s]);
            let mut pow = 1.0;
            for j in 0..l {
                k[j * d + ch] += cs * pow * bb;
                pow *= ab;
            }
        }
    }
    Tensor::new(vec![l, d], k)
}

/// Causal convolution `y[t,d] = Σ_{j≤t} K̄[j,d]·x[t−j,d] (+ D⊙x)`.
pub fn apply_scan_kernel(kernel: &Tensor, x: &Tensor, d_skip: Option<&Tensor>) -> Result<Tensor> {
    if kernel.shape() != x.shape() {
        return Err(shape_err("apply_scan_kernel", kernel.shape(), x.shape()));
    }
    let (l, d) = x.dims2()?;
    let mut y = vec![0.0; l * d];
    for t in 0..l {
        for ch in 0..d {
            let mut acc = d_skip.map_or(0.0, |ds| ds.data()[ch] * x.data()[t * d + ch]);
            for j in 0..=t {
                acc += kernel.data()[j * d + ch] * x.data()[(t - j) * d + ch];
            }
            y[t * d + ch] = acc;
        }
    }
    Tensor::new(vec![l, d], y)
}

/// Borrowed operands of one fused selective scan.
pub(crate) struct ScanArgs<'a> {
    pub u: &'a Tensor,
    pub delta: &'a Tensor,
    pub a: &'a Tensor,
    pub b: &'a Tensor,
    pub c: &'a Tensor,
    pub d_skip: Option<&'a Tensor>,
    pub mode: Discretization,
}

impl ScanArgs<'_> {
    pub fn validate(&self) -> Result<()> {
        let (l, d) = self.u.dims2()?;
        let (da, n) = self.a.dims2()?;
        let ok = self.delta.shape() == [l, d]
            && da == d
            && self.b.shape() == [l, n]
            && self.c.shape() == [l, n]
            && self.d_skip.is_none_or(|s| s.shape() == [d]);
        if !ok {
            return Err(shape_err("selective_scan", self.u.shape(), self.a.shape()));
        }
        if let Some(bad) = self.delta.data().iter().find(|&&v| !(v > 0.0)) {
            return Err(Error::Domain {
                op: "selective_scan",
                msg: format!("step size must be positive, got {bad}"),
            });
        }
        Ok(())
    }
}

/// Forward pass; returns `y[L,D]` and every hidden state `h_t` as `[L,D,N]`.
pub(crate) fn selective_scan_forward(args: &ScanArgs) -> (Tensor, Vec<f64>) {
    let (l, d) = (args.u.shape()[0], args.u.shape()[1]);
    let n = args.a.shape()[1];
    let (u, dt, a, b, c) = (args.u.data(), args.delta.data(), args.a.data(), args.b.data(), args.c.data());
    let mut states = vec![0.0; l * d * n];
    let mut y = vec![0.0; l * d];
    for t in 0..l {
        for ch in 0..d {
            let xv = u[t * d + ch];
            let step = dt[t * d + ch];
            let mut acc = 0.0;
            for s in 0..n {
                let (ab, phi, _, _) = coefficients(step, a[ch * n + s], args.mode);
                let prev = if t == 0 { 0.0 } else { states[((t - 1) * d + ch) * n + s] };
                let h = ab * prev + phi * b[t * n + s] * xv;
                states[(t * d + ch) * n + s] = h;
                acc += c[t * n + s] * h;
            }
            y[t * d + ch] = acc + args.d_skip.map_or(0.0, |ds| ds.data()[ch] * xv);
        }
    }
    (Tensor::new(vec![l, d], y).expect("validated"), states)
}

pub(crate) struct ScanGrads {
    pub u: Tensor,
    pub delta: Tensor,
    pub a: Tensor,
    pub b: Tensor,
    pub c: Tensor,
    pub d_skip: Option<Tensor>,
}

/// Reverse sweep over time carrying `∂loss/∂h_t`.
pub(crate) fn selective_scan_backward(args: &ScanArgs, states: &[f64], g: &Tensor) -> ScanGrads {
    let (l, d) = (args.u.shape()[0], args.u.shape()[1]);
    let n = args.a.shape()[1];
    let (u, dt, a, b, c) = (args.u.data(), args.delta.data(), args.a.data(), args.b.data(), args.c.data());
    let gy = g.data();
    let mut du = vec![0.0; l * d];
    let mut ddelta = vec![0.0; l * d];
    let mut da = vec![0.0; d * n];
    let mut db = vec![0.0; l * n];
    let mut dc = vec![0.0; l * n];
    let mut dskip = args.d_skip.map(|_| vec![0.0; d]);
    let mut dh = vec![0.0; d * n];
    for t in (0..l).rev() {
        for ch in 0..d {
            let gyv = gy[t * d + ch];
            let xv = u[t * d + ch];
            let step = dt[t * d + ch];
            if let (Some(ds), Some(dsk)) = (args.d_skip, dskip.as_mut()) {
                dsk[ch] += gyv * xv;
                du[t * d + ch] += gyv * ds.data()[ch];
            }
            for s in 0..n {
                let idx = (t * d + ch) * n + s;
                let h = states[idx];
                let prev = if t == 0 { 0.0 } else { states[idx - d * n] };
                dc[t * n + s] += gyv * h;
                let dhs = dh[ch * n + s] + gyv * c[t * n + s];
                let av = a[ch * n + s];
                let bv = b[t * n + s];
                let (ab, phi, dphi_ddt, dphi_da) = coefficients(step, av, args.mode);
                // h = ab·prev + phi·b·x
                let d_ab = dhs * prev;
                let d_phi = dhs * bv * xv;
                du[t * d + ch] += dhs * phi * bv;
                db[t * n + s] += dhs * phi * xv;
                ddelta[t * d + ch] += d_ab * ab * av + d_phi * dphi_ddt;
                da[ch * n + s] += d_ab * ab * step + d_phi * dphi_da;
                dh[ch * n + s] = dhs * ab;
            }
        }
    }
    let t = |shape: &[usize], v| Tensor::new(shape.to_vec(), v).expect("validated");
    ScanGrads {
        u: t(&[l, d], du),
        delta: t(&[l, d], ddelta),
        a: t(&[d, n], da),
        b: t(&[l, n], db),
        c: t(&[l, n], dc),
        d_skip: dskip.map(|v| t(&[d], v)),
    }
}

/// `max(1, ceil(dim/16))`.
pub fn default_dt_rank(dim: usize) -> usize {
    dim.div_ceil(16).max(1)
}

/// Learnable parameters of one S6 scan, plus the depthwise causal conv that
/// precedes it (absent in the convolution-free variant).
#[derive(Clone, Debug)]
pub struct S6Params {
    pub d_inner: usize,
    pub d_state: usize,
    pub dt_rank: usize,
    pub a_log: ParamId,
    pub x_proj: ParamId,
    pub dt_proj_w: ParamId,
    pub dt_proj_b: ParamId,
    pub d_skip: Option<ParamId>,
    pub conv: Option<(ParamId, ParamId)>,
    pub mode: Discretization,
}

/// Shape and initialization options for [`S6Params::register`].
#[derive(Clone, Copy, Debug)]
pub struct S6Shape {
    pub d_inner: usize,
    pub d_state: usize,
    pub dt_rank: usize,
    pub conv_width: Option<usize>,
    pub d_skip: bool,
    pub mode: Discretization,
}

impl S6Params {
    /// Registers parameters under `prefix` with the canonical
    /// initialization: `−A` spans `1..=N` per state index, and the Δ bias is
    /// set so `softplus(bias)` is log-uniform in `[1e-3, 1e-1]`.
    pub fn register(store: &mut ParamStore, prefix: &str, shape: S6Shape) -> Self {
        let S6Shape {
            d_inner,
            d_state,
            dt_rank,
            ..
        } = shape;
        let a_log = store.add(
            &format!("{prefix}.a_log"),
            &[d_inner, d_state],
            Init::Fn(Box::new(move |i, _| (((i % d_state) + 1) as f64).ln())),
        );
        let x_proj = store.add(&format!("{prefix}.x_proj.weight"), &[d_inner, dt_rank + 2 * d_state], Init::FanIn(d_inner));
        let dt_proj_w = store.add(&format!("{prefix}.dt_proj.weight"), &[dt_rank, d_inner], Init::FanIn(dt_rank));
        let dt_proj_b = store.add(&format!("{prefix}.dt_proj.bias"), &[d_inner], Init::DtBias { min: 1e-3, max: 1e-1 });
        let d_skip = shape
            .d_skip
            .then(|| store.add(&format!("{prefix}.d_skip"), &[d_inner], Init::Const(1.0)));
        let conv = shape.conv_width.map(|k| {
            (
                store.add(&format!("{prefix}.conv1d.weight"), &[d_inner, k], Init::FanIn(k)),
                store.add(&format!("{prefix}.conv1d.bias"), &[d_inner], Init::FanIn(k)),
            )
        });
        Self {
            d_inner,
            d_state,
            dt_rank,
            a_log,
            x_proj,
            dt_proj_w,
            dt_proj_b,
            d_skip,
            conv,
            mode: shape.mode,
        }
    }

    /// `(B, C, Δ)` for input tokens `x[L,D_inner]`: the `x_proj` output is
    /// split into widths `(dt_rank, N, N)` and `Δ = softplus(dt_proj(·) + bias)`.
    pub fn selective_params(&self, x: &Var, p: &[Var]) -> Result<(Var, Var, Var)> {
        let proj = ad::linear(x, &p[self.x_proj], None)?;
        let r = self.dt_rank;
        let n = self.d_state;
        let dt_in = ad::slice_cols(&proj, 0, r)?;
        let b = ad::slice_cols(&proj, r, r + n)?;
        let c = ad::slice_cols(&proj, r + n, r + 2 * n)?;
        let delta = ad::softplus(&ad::linear(&dt_in, &p[self.dt_proj_w], Some(&p[self.dt_proj_b]))?);
        Ok((b, c, delta))
    }

    /// `A = −exp(A_log)`.
    pub fn state_matrix(&self, p: &[Var]) -> Var {
        ad::scale(&ad::exp(&p[self.a_log]), -1.0)
    }

    /// S6 on `u[L,D_inner]`: selection, discretization and scan.
    pub fn scan(&self, u: &Var, p: &[Var]) -> Result<Var> {
        let (b, c, delta) = self.selective_params(u, p)?;
        let a = self.state_matrix(p);
        ad::selective_scan(u, &delta, &a, &b, &c, self.d_skip.map(|i| &p[i]), self.mode)
    }

    /// One direction of the branch: optional causal conv, silu, S6.
    pub fn branch(&self, x: &Var, p: &[Var]) -> Result<Var> {
        let u = match self.conv {
            Some((k, b)) => ad::conv1d_depthwise_causal(x, &p[k], Some(&p[b]))?,
            None => x.clone(),
        };
        self.scan(&ad::silu(&u), p)
    }
}

/// Bidirectional scan: the forward branch on `x`, the backward branch on the
/// row-reversed `x` (output re-reversed), summed and gated by `silu(z)`.
/// The output projection is applied by the caller.
pub fn bidir_ssm_branch(x: &Var, z: &Var, fwd: &S6Params, bwd: &S6Params, p: &[Var]) -> Result<Var> {
    let yf = fwd.branch(x, p)?;
    let yb = ad::reverse_rows(&bwd.branch(&ad::reverse_rows(x)?, p)?)?;
    ad::mul(&ad::add(&yf, &yb)?, &ad::silu(z))
}
