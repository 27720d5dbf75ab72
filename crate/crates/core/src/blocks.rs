//! Residual block variants.
//!
//! | variant    | sublayers                                                   |
//! |------------|-------------------------------------------------------------|
//! | `vim`      | `x + Mixer(Norm(x))`                                        |
//! | `vim_f`    | `x + Mixer(Norm(Fuse(x)))`                                  |
//! | `vim_f_h`  | `x₁ = x + Attn(Norm(x))`, then the `vim_f` block on `x₁`    |
//! | `vim_f_cf` | as `vim_f` with no depthwise conv inside the scan branches  |
//!
//! `Mixer` is the bidirectional selective-scan mixer: input projection to
//! `(u, z)`, forward and backward S6 branches, `silu(z)` gate, output
//! projection. `Fuse` adds `α·|FFT2(x)|` to `β·x` over the spatial tokens and
//! mixes channels with a linear layer; a class token bypasses the fusion.

use serde::{Deserialize, Serialize};

use crate::autodiff::{self as ad, Var};
use crate::error::{shape_err, Error, Result};
use crate::params::{Init, ParamId, ParamStore};
use crate::ssm::{self, Discretization, S6Params, S6Shape};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-6;
/// Additive guard in the linear-attention denominator.
pub const ATTENTION_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Vim,
    VimF,
    VimFH,
    VimFCf,
}

impl Variant {
    pub fn has_fusion(self) -> bool {
        !matches!(self, Variant::Vim)
    }

    pub fn has_attention(self) -> bool {
        matches!(self, Variant::VimFH)
    }

    pub fn has_conv(self) -> bool {
        !matches!(self, Variant::VimFCf)
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('_', "-").as_str() {
            "vim" => Ok(Variant::Vim),
            "vim-f" => Ok(Variant::VimF),
            "vim-f-h" => Ok(Variant::VimFH),
            "vim-f-cf" => Ok(Variant::VimFCf),
            other => Err(Error::Config(format!("unknown variant `{other}`"))),
        }
    }
}

/// Which grid the amplitude spectrum is taken over.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FftMode {
    /// One `H×W` transform per channel over the spatial token grid.
    #[default]
    PerChannel,
    /// One transform over the `(tokens, channels)` matrix.
    SequenceGrid,
}

impl std::str::FromStr for FftMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('_', "-").as_str() {
            "per-channel" => Ok(FftMode::PerChannel),
            "sequence-grid" => Ok(FftMode::SequenceGrid),
            other => Err(Error::Config(format!("unknown fft mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub variant: Variant,
    pub dim: usize,
    pub d_state: usize,
    pub expand: usize,
    pub conv_width: usize,
    pub fft_mode: FftMode,
    pub heads: usize,
    pub has_class_token: bool,
    /// Spatial token grid `(H, W)`.
    pub grid: (usize, usize),
    pub dt_rank: usize,
    pub discretization: Discretization,
    pub d_skip: bool,
    pub alpha_init: f64,
    pub beta_init: f64,
}

impl BlockConfig {
    /// Desk-scale defaults for a block of the given variant and width.
    pub fn new(variant: Variant, dim: usize, grid: (usize, usize)) -> Self {
        Self {
            variant,
            dim,
            d_state: 8,
            expand: 2,
            conv_width: 4,
            fft_mode: FftMode::PerChannel,
            heads: 2,
            has_class_token: false,
            grid,
            dt_rank: ssm::default_dt_rank(dim),
            discretization: Discretization::Zoh,
            d_skip: true,
            alpha_init: 0.1,
            beta_init: 1.0,
        }
    }

    pub fn d_inner(&self) -> usize {
        self.expand * self.dim
    }

    pub fn tokens(&self) -> usize {
        self.grid.0 * self.grid.1 + usize::from(self.has_class_token)
    }

    pub fn validate(&self) -> Result<()> {
        if self.expand < 1 || self.dim == 0 || self.d_state == 0 || self.dt_rank == 0 {
            return Err(Error::Config("dim, d_state, dt_rank and expand must be positive".into()));
        }
        if self.variant.has_conv() && self.conv_width == 0 {
            return Err(Error::Config("conv_width must be positive".into()));
        }
        if self.variant.has_attention() && (self.heads == 0 || self.dim % self.heads != 0) {
            return Err(Error::Config(format!(
                "heads ({}) must divide the attention width ({})",
                self.heads, self.dim
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Norm {
    pub fn register(store: &mut ParamStore, prefix: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(&format!("{prefix}.weight"), &[dim], Init::Const(1.0)),
            beta: store.add(&format!("{prefix}.bias"), &[dim], Init::Const(0.0)),
        }
    }

    pub fn forward(&self, x: &Var, p: &[Var]) -> Result<Var> {
        ad::layer_norm(x, &p[self.gamma], &p[self.beta], LAYER_NORM_EPS)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn register(store: &mut ParamStore, prefix: &str, din: usize, dout: usize, bias: bool) -> Self {
        Self {
            weight: store.add(&format!("{prefix}.weight"), &[din, dout], Init::FanIn(din)),
            bias: bias.then(|| store.add(&format!("{prefix}.bias"), &[dout], Init::FanIn(din))),
        }
    }

    pub fn forward(&self, x: &Var, p: &[Var]) -> Result<Var> {
        ad::linear(x, &p[self.weight], self.bias.map(|b| &p[b]))
    }
}

/// Bidirectional selective-scan mixer.
#[derive(Clone, Debug)]
pub struct VimMixer {
    pub in_proj: Linear,
    pub fwd: S6Params,
    pub bwd: S6Params,
    pub out_proj: Linear,
    pub d_inner: usize,
}

impl VimMixer {
    pub fn register(store: &mut ParamStore, prefix: &str, cfg: &BlockConfig) -> Self {
        let di = cfg.d_inner();
        let shape = S6Shape {
            d_inner: di,
            d_state: cfg.d_state,
            dt_rank: cfg.dt_rank,
            conv_width: cfg.variant.has_conv().then_some(cfg.conv_width),
            d_skip: cfg.d_skip,
            mode: cfg.discretization,
        };
        Self {
            in_proj: Linear::register(store, &format!("{prefix}.in_proj"), cfg.dim, 2 * di, false),
            fwd: S6Params::register(store, &format!("{prefix}.fwd"), shape),
            bwd: S6Params::register(store, &format!("{prefix}.bwd"), shape),
            out_proj: Linear::register(store, &format!("{prefix}.out_proj"), di, cfg.dim, false),
            d_inner: di,
        }
    }

    pub fn forward(&self, x: &Var, p: &[Var]) -> Result<Var> {
        let uz = self.in_proj.forward(x, p)?;
        let u = ad::slice_cols(&uz, 0, self.d_inner)?;
        let z = ad::slice_cols(&uz, self.d_inner, 2 * self.d_inner)?;
        let y = ssm::bidir_ssm_branch(&u, &z, &self.fwd, &self.bwd, p)?;
        self.out_proj.forward(&y, p)
    }
}

/// Trainable frequency/spatial fusion.
#[derive(Clone, Debug)]
pub struct FreqFusion {
    pub alpha: ParamId,
    pub beta: ParamId,
    pub mix: Linear,
}

impl FreqFusion {
    /// `α`, `β` from the config; the mixing layer starts at the identity.
    pub fn register(store: &mut ParamStore, prefix: &str, cfg: &BlockConfig) -> Self {
        let d = cfg.dim;
        Self {
            alpha: store.add(&format!("{prefix}.alpha"), &[1], Init::Const(cfg.alpha_init)),
            beta: store.add(&format!("{prefix}.beta"), &[1], Init::Const(cfg.beta_init)),
            mix: Linear {
                weight: store.add(
                    &format!("{prefix}.mix.weight"),
                    &[d, d],
                    Init::Fn(Box::new(move |i, _| if i / d == i % d { 1.0 } else { 0.0 })),
                ),
                bias: Some(store.add(&format!("{prefix}.mix.bias"), &[d], Init::Const(0.0))),
            },
        }
    }

    pub fn forward(&self, x: &Var, cfg: &BlockConfig, p: &[Var]) -> Result<Var> {
        let (spatial, cls) = split_class_token(x, cfg)?;
        let amp = amplitude_branch(&spatial, cfg)?;
        let fused = ad::add(&ad::mul_scalar_var(&amp, &p[self.alpha])?, &ad::mul_scalar_var(&spatial, &p[self.beta])?)?;
        let merged = match cls {
            Some(c) => ad::concat_rows(&[&c, &fused])?,
            None => fused,
        };
        self.mix.forward(&merged, p)
    }
}

/// Splits `x[L,D]` into spatial tokens and the leading class token.
fn split_class_token(x: &Var, cfg: &BlockConfig) -> Result<(Var, Option<Var>)> {
    let s = x.shape();
    let (h, w) = cfg.grid;
    let cls = usize::from(cfg.has_class_token);
    if s.len() != 2 || s[0] != h * w + cls || s[1] != cfg.dim {
        return Err(shape_err("freq_fuse", &s, &[h * w + cls, cfg.dim]));
    }
    if cls == 0 {
        return Ok((x.clone(), None));
    }
    Ok((ad::slice_rows(x, 1, s[0])?, Some(ad::slice_rows(x, 0, 1)?)))
}

/// Amplitude spectrum of spatial tokens `x[n,D]`, returned as `[n,D]`.
///
/// Per-channel mode views the tokens as `(D,H,W)` in row-major scan order.
pub fn amplitude_branch(spatial: &Var, cfg: &BlockConfig) -> Result<Var> {
    let (h, w) = cfg.grid;
    let d = cfg.dim;
    match cfg.fft_mode {
        FftMode::PerChannel => {
            let chw = ad::transpose(spatial)?;
            let amp = ad::amplitude2d(&chw, d, h, w)?;
            ad::transpose(&amp)
        }
        FftMode::SequenceGrid => ad::amplitude2d(spatial, 1, h * w, d),
    }
}

/// Non-causal linear attention with `elu + 1` features, as a residual
/// sublayer: `x + O(Attn(Norm(x)))`.
#[derive(Clone, Debug)]
pub struct LinearAttention {
    pub norm: Norm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl LinearAttention {
    pub fn register(store: &mut ParamStore, prefix: &str, dim: usize, heads: usize) -> Self {
        Self {
            norm: Norm::register(store, &format!("{prefix}.norm"), dim),
            q: Linear::register(store, &format!("{prefix}.q"), dim, dim, true),
            k: Linear::register(store, &format!("{prefix}.k"), dim, dim, true),
            v: Linear::register(store, &format!("{prefix}.v"), dim, dim, true),
            out: Linear::register(store, &format!("{prefix}.out"), dim, dim, true),
            heads,
        }
    }

    pub fn forward(&self, x: &Var, p: &[Var]) -> Result<Var> {
        let h = self.norm.forward(x, p)?;
        let q = self.q.forward(&h, p)?;
        let k = self.k.forward(&h, p)?;
        let v = self.v.forward(&h, p)?;
        let attn = linear_attention_core(&q, &k, &v, self.heads)?;
        ad::add(x, &self.out.forward(&attn, p)?)
    }
}

/// Per head: `out_l = φ(q_l)ᵀ(Σ_j φ(k_j) v_jᵀ) / (φ(q_l)·Σ_j φ(k_j) + ε)`,
/// `φ(t) = elu(t) + 1`; heads are concatenated along channels.
pub fn linear_attention_core(q: &Var, k: &Var, v: &Var, heads: usize) -> Result<Var> {
    let s = q.shape();
    if s.len() != 2 || heads == 0 || s[1] % heads != 0 {
        return Err(Error::Config(format!("heads ({heads}) must divide width {:?}", s.get(1))));
    }
    if k.shape() != s || v.shape() != s {
        return Err(shape_err("linear_attention", &s, &k.shape()));
    }
    let dh = s[1] / heads;
    let mut outs = Vec::with_capacity(heads);
    for hd in 0..heads {
        let cols = |t: &Var| ad::slice_cols(t, hd * dh, (hd + 1) * dh);
        let fq = ad::elu_plus_one(&cols(q)?);
        let fk = ad::elu_plus_one(&cols(k)?);
        let vh = cols(v)?;
        let kv = ad::matmul(&ad::transpose(&fk)?, &vh)?;
        let num = ad::matmul(&fq, &kv)?;
        let ksum = ad::transpose(&ad::sum_rows(&fk)?)?;
        let den = ad::add_scalar(&ad::matmul(&fq, &ksum)?, ATTENTION_EPS);
        outs.push(ad::div_rows(&num, &den)?);
    }
    // Concatenate heads column-wise by transposing to rows and back.
    let rows: Vec<Var> = outs.iter().map(ad::transpose).collect::<Result<_>>()?;
    let refs: Vec<&Var> = rows.iter().collect();
    ad::transpose(&ad::concat_rows(&refs)?)
}

/// Explicit attention weights `w[l,j]` of one head, with the same guard.
pub fn linear_attention_weights(q: &Tensor, k: &Tensor) -> Result<Tensor> {
    let (l, dh) = q.dims2()?;
    let (lk, dk) = k.dims2()?;
    if dk != dh {
        return Err(shape_err("linear_attention_weights", q.shape(), k.shape()));
    }
    let fq = q.map(crate::tensor::elu_plus_one);
    let fk = k.map(crate::tensor::elu_plus_one);
    let sim = crate::tensor::matmul(&fq, &fk.transpose()?)?;
    let mut w = sim.into_data();
    for row in w.chunks_mut(lk) {
        let den = row.iter().sum::<f64>() + ATTENTION_EPS;
        row.iter_mut().for_each(|v| *v /= den);
    }
    Tensor::new(vec![l, lk], w)
}

/// One residual block of any variant.
#[derive(Clone, Debug)]
pub struct Block {
    pub cfg: BlockConfig,
    pub prefix: String,
    pub attn: Option<LinearAttention>,
    pub fusion: Option<FreqFusion>,
    pub norm: Norm,
    pub mixer: VimMixer,
}

impl Block {
    pub fn register(store: &mut ParamStore, prefix: &str, cfg: BlockConfig) -> Result<Self> {
        cfg.validate()?;
        let attn = cfg
            .variant
            .has_attention()
            .then(|| LinearAttention::register(store, &format!("{prefix}.attn"), cfg.dim, cfg.heads));
        let fusion = cfg
            .variant
            .has_fusion()
            .then(|| FreqFusion::register(store, &format!("{prefix}.fusion"), &cfg));
        let norm = Norm::register(store, &format!("{prefix}.norm"), cfg.dim);
        let mixer = VimMixer::register(store, &format!("{prefix}.mixer"), &cfg);
        Ok(Self {
            prefix: prefix.to_string(),
            cfg,
            attn,
            fusion,
            norm,
            mixer,
        })
    }

    pub fn forward(&self, x: &Var, p: &[Var]) -> Result<Var> {
        let x = match &self.attn {
            Some(a) => a.forward(x, p)?,
            None => x.clone(),
        };
        let h = match &self.fusion {
            Some(f) => f.forward(&x, &self.cfg, p)?,
            None => x.clone(),
        };
        let h = self.norm.forward(&h, p)?;
        ad::add(&x, &self.mixer.forward(&h, p)?)
    }

    /// Name of the final output projection weight (zeroing it, and the
    /// attention output projection if any, makes the block the identity).
    pub fn out_proj_name(&self) -> String {
        format!("{}.mixer.out_proj.weight", self.prefix)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    #[test]
    fn variant_parsing() {
        assert_eq!("vim-f-h".parse::<Variant>().unwrap(), Variant::VimFH);
        assert_eq!("vim_f_cf".parse::<Variant>().unwrap(), Variant::VimFCf);
        assert!("mamba".parse::<Variant>().is_err());
        assert_eq!("sequence-grid".parse::<FftMode>().unwrap(), FftMode::SequenceGrid);
    }

    #[test]
    fn heads_must_divide_width() {
        let mut cfg = BlockConfig::new(Variant::VimFH, 8, (2, 2));
        cfg.heads = 3;
        assert!(Block::register(&mut ParamStore::new(0), "b", cfg).is_err());
    }

    #[test]
    fn fusion_rejects_wrong_grid() {
        let cfg = BlockConfig::new(Variant::VimF, 4, (3, 3));
        let mut store = ParamStore::new(0);
        let block = Block::register(&mut store, "b", cfg).unwrap();
        let tape = Tape::new();
        let p = store.bind(&tape);
        let x = tape.constant(Tensor::zeros(&[8, 4]));
        assert!(matches!(block.forward(&x, &p), Err(Error::Shape { .. })));
    }

    #[test]
    fn single_token_attention_returns_value() {
        let tape = Tape::new();
        let q = tape.constant(Tensor::from_rows(&[&[0.3, -0.2]]));
        let k = tape.constant(Tensor::from_rows(&[&[1.0, 0.5]]));
        let v = tape.constant(Tensor::from_rows(&[&[2.0, -3.0]]));
        let out = linear_attention_core(&q, &k, &v, 1).unwrap();
        assert!(out.value().max_abs_diff(&Tensor::from_rows(&[&[2.0, -3.0]])) < 1e-5);
    }
}
