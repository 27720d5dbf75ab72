//! Whole-model assembly, parameter counting and MAC estimation.
//!
//! Flat variants (`vim`, `vim_f`, `vim_f_h`): tokenizer → optional class
//! token and position embedding → blocks (the leading
//! `⌈depth·f_block_proportion⌉` use the configured variant, the rest plain
//! `vim`) → final norm → linear head on the class token, or on mean-pooled
//! tokens when there is none.
//!
//! `vim_f_cf`: four stages of convolution-free blocks. The encoder holds no
//! convolutions; the `7×7/4` entry conv and the `2×2/2` transitions between
//! stages belong to the embedding path. Mean-pool head.
//!
//! # MAC conventions
//!
//! | component              | multiply-accumulates                         |
//! |------------------------|----------------------------------------------|
//! | conv2d                 | `H'·W'·Cout·Cin·Kh·Kw` (bias free)           |
//! | linear / patch proj    | `L·Din·Dout`                                 |
//! | layer norm             | `L·D`                                        |
//! | depthwise causal conv  | `L·D_inner·K`                                |
//! | selective scan         | `3·L·D_inner·N` (update 2, read-out 1)       |
//! | skip + gate            | `L·D_inner` each                             |
//! | 2D FFT                 | `round(5·n·log2 n)` per transform, `n = H·W` |
//! | fusion α/β             | `2·n·D`                                      |
//! | linear attention core  | `2·L·D·dh + L·D`                             |
//! | head                   | `D·classes`                                  |

use serde::{Deserialize, Serialize};

use crate::autodiff::{self as ad, Tape, Var};
use crate::blocks::{Block, BlockConfig, FftMode, Norm, Variant};
use crate::embed::{self, ConvLayer, ConvSpec, Embed, StemConfig, StemKind};
use crate::error::{shape_err, Error, Result};
use crate::params::{Init, ParamId, ParamStore};
use crate::ssm::{self, Discretization};
use crate::tensor::Tensor;

/// Stage layout of the convolution-free hierarchy.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CfStages {
    pub depths: Vec<usize>,
    pub dims: Vec<usize>,
}

impl Default for CfStages {
    fn default() -> Self {
        Self {
            depths: vec![1, 1, 2, 1],
            dims: vec![32, 64, 128, 256],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub variant: Variant,
    pub depth: usize,
    pub dim: usize,
    pub d_state: usize,
    pub expand: usize,
    pub conv_width: usize,
    /// `None` → `ceil(dim/16)`.
    pub dt_rank: Option<usize>,
    pub f_block_proportion: f64,
    pub fft_mode: FftMode,
    pub heads: usize,
    pub use_pos_embed: bool,
    pub use_class_token: bool,
    pub stem: StemKind,
    pub image_size: usize,
    pub in_channels: usize,
    pub num_classes: usize,
    pub cf_stages: CfStages,
    pub discretization: Discretization,
    pub d_skip: bool,
    pub alpha_init: f64,
    pub beta_init: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk(Variant::VimF)
    }
}

impl ModelConfig {
    /// Desk-scale defaults: 64×64 input, depth 4, D=32, N=8, 10 classes.
    pub fn desk(variant: Variant) -> Self {
        let dim = 32;
        Self {
            variant,
            depth: 4,
            dim,
            d_state: 8,
            expand: 2,
            conv_width: 4,
            dt_rank: None,
            f_block_proportion: 0.25,
            fft_mode: FftMode::PerChannel,
            heads: 4,
            use_pos_embed: variant == Variant::Vim,
            use_class_token: variant != Variant::VimFCf,
            stem: StemKind::Conv(StemConfig::for_dim(dim)),
            image_size: 64,
            in_channels: 3,
            num_classes: 10,
            cf_stages: CfStages::default(),
            discretization: Discretization::Zoh,
            d_skip: true,
            alpha_init: 0.1,
            beta_init: 1.0,
        }
    }

    /// Tiny-width configuration at 224×224: depth 24, D=192, N=16,
    /// 1000 classes, `48/96/192` conv stem.
    pub fn tiny(variant: Variant) -> Self {
        Self {
            depth: 24,
            dim: 192,
            d_state: 16,
            heads: 24,
            stem: StemKind::Conv(StemConfig::standard(48, 96, 192)),
            image_size: 224,
            num_classes: 1000,
            ..Self::desk(variant)
        }
    }

    pub fn dt_rank(&self) -> usize {
        self.dt_rank.unwrap_or_else(|| ssm::default_dt_rank(self.dim))
    }

    /// `⌈depth·proportion⌉` leading blocks use the configured variant.
    pub fn num_f_blocks(&self) -> usize {
        if self.variant == Variant::Vim {
            return 0;
        }
        let n = (self.depth as f64 * self.f_block_proportion - 1e-9).ceil();
        (n.max(0.0) as usize).min(self.depth)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0..=1.0).contains(&self.f_block_proportion) {
            return bad(format!("f_block_proportion {} outside [0, 1]", self.f_block_proportion));
        }
        if self.num_classes == 0 || self.in_channels == 0 || self.image_size == 0 {
            return bad("num_classes, in_channels and image_size must be positive".into());
        }
        if self.dim == 0 || self.d_state == 0 || self.expand == 0 {
            return bad("dim, d_state and expand must be positive".into());
        }
        if self.variant == Variant::VimFCf {
            let st = &self.cf_stages;
            if st.depths.len() != 4 || st.dims.len() != 4 {
                return bad("the convolution-free variant requires exactly 4 stages".into());
            }
            if st.dims.contains(&0) {
                return bad("stage dims must be positive".into());
            }
            if self.use_class_token {
                return bad("the convolution-free variant has no class token".into());
            }
        } else if let StemKind::Conv(s) = &self.stem {
            if s.out_dim() != self.dim {
                return bad(format!("stem output width {} differs from dim {}", s.out_dim(), self.dim));
            }
        }
        self.token_grid().map(|_| ())
    }

    /// Spatial token grid entering the (first) block stack.
    pub fn token_grid(&self) -> Result<(usize, usize)> {
        let r = self.image_size;
        match (&self.stem, self.variant) {
            (_, Variant::VimFCf) => {
                let g = cf_entry(self.cf_stages.dims[0]).output_hw(r, r).ok_or_else(|| too_small(r))?;
                // three 2× transitions follow
                if g.0 < 8 || g.1 < 8 {
                    return Err(too_small(r));
                }
                Ok(g)
            }
            (StemKind::Patch { patch }, _) => {
                if *patch == 0 || r % patch != 0 {
                    return Err(Error::Config(format!("resolution {r} not divisible by patch {patch}")));
                }
                Ok((r / patch, r / patch))
            }
            (StemKind::Conv(s), _) => s.stage_extents(r, r).map(|e| *e.last().unwrap_or(&(r, r))),
        }
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Top-level fields whose values differ between two configs.
    pub fn diff_fields(&self, other: &ModelConfig) -> Vec<String> {
        let (a, b) = (serde_json::to_value(self).unwrap(), serde_json::to_value(other).unwrap());
        let (a, b) = (a.as_object().unwrap(), b.as_object().unwrap());
        a.keys().filter(|k| a.get(*k) != b.get(*k)).cloned().collect()
    }

    fn block_config(&self, variant: Variant, dim: usize, grid: (usize, usize), class_token: bool) -> BlockConfig {
        BlockConfig {
            variant,
            dim,
            d_state: self.d_state,
            expand: self.expand,
            conv_width: self.conv_width,
            fft_mode: self.fft_mode,
            heads: self.heads,
            has_class_token: class_token,
            grid,
            dt_rank: self.dt_rank.unwrap_or_else(|| ssm::default_dt_rank(dim)),
            discretization: self.discretization,
            d_skip: self.d_skip,
            alpha_init: self.alpha_init,
            beta_init: self.beta_init,
        }
    }
}

fn too_small(r: usize) -> Error {
    Error::Config(format!("resolution {r} too small for the downsampling chain"))
}

fn cf_entry(dim: usize) -> ConvSpec {
    ConvSpec::new(7, 4, 3, dim)
}

fn cf_transition(dim: usize) -> ConvSpec {
    ConvSpec::new(2, 2, 0, dim)
}

/// A group of blocks sharing one token grid, optionally preceded by a
/// downsampling transition.
#[derive(Clone, Debug)]
pub struct Stage {
    pub transition: Option<ConvLayer>,
    pub grid: (usize, usize),
    pub dim: usize,
    pub blocks: Vec<Block>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub embed: Embed,
    pub cls: Option<ParamId>,
    pub pos: Option<ParamId>,
    pub stages: Vec<Stage>,
    pub final_norm: Norm,
    pub head_w: ParamId,
    pub head_b: ParamId,
}

impl Model {
    /// Builds and initializes a model; parameters are a pure function of
    /// `(cfg, seed)`.
    pub fn build(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(seed);
        let grid = cfg.token_grid()?;
        let (embed, stages, out_dim, cls, pos) = if cfg.variant == Variant::VimFCf {
            let dims = &cfg.cf_stages.dims;
            let embed = Embed::Stem(vec![ConvLayer::register(&mut store, "embed.stem.0.0", cf_entry(dims[0]), cfg.in_channels)]);
            let mut stages = Vec::with_capacity(4);
            let mut g = grid;
            for (si, (&depth, &dim)) in cfg.cf_stages.depths.iter().zip(dims).enumerate() {
                let transition = (si > 0).then(|| {
                    g = (g.0 / 2, g.1 / 2);
                    ConvLayer::register(&mut store, &format!("stages.{si}.downsample"), cf_transition(dim), dims[si - 1])
                });
                let blocks = (0..depth)
                    .map(|bi| {
                        let bc = cfg.block_config(Variant::VimFCf, dim, g, false);
                        Block::register(&mut store, &format!("stages.{si}.blocks.{bi}"), bc)
                    })
                    .collect::<Result<_>>()?;
                stages.push(Stage {
                    transition,
                    grid: g,
                    dim,
                    blocks,
                });
            }
            (embed, stages, dims[3], None, None)
        } else {
            let embed = Embed::register(&mut store, "embed", &cfg.stem, cfg.in_channels, cfg.dim);
            let n = grid.0 * grid.1 + usize::from(cfg.use_class_token);
            let cls = cfg
                .use_class_token
                .then(|| store.add("cls_token", &[cfg.dim], Init::Uniform(0.02)));
            let pos = cfg
                .use_pos_embed
                .then(|| store.add("pos_embed", &[n, cfg.dim], Init::Uniform(0.02)));
            let nf = cfg.num_f_blocks();
            let blocks = (0..cfg.depth)
                .map(|i| {
                    let v = if i < nf { cfg.variant } else { Variant::Vim };
                    let bc = cfg.block_config(v, cfg.dim, grid, cfg.use_class_token);
                    Block::register(&mut store, &format!("blocks.{i}"), bc)
                })
                .collect::<Result<_>>()?;
            let stage = Stage {
                transition: None,
                grid,
                dim: cfg.dim,
                blocks,
            };
            (embed, vec![stage], cfg.dim, cls, pos)
        };
        let final_norm = Norm::register(&mut store, "norm", out_dim);
        let head_w = store.add("head.weight", &[out_dim, cfg.num_classes], Init::FanIn(out_dim));
        let head_b = store.add("head.bias", &[cfg.num_classes], Init::FanIn(out_dim));
        Ok(Self {
            cfg: cfg.clone(),
            store,
            embed,
            cls,
            pos,
            stages,
            final_norm,
            head_w,
            head_b,
        })
    }

    pub fn blocks(&self) -> impl Iterator<Item = &Block> {
        self.stages.iter().flat_map(|s| s.blocks.iter())
    }

    /// Logits `[1, classes]` for one image `[C,H,W]`, recorded on `img`'s tape.
    pub fn forward_sample(&self, img: &Var, p: &[Var]) -> Result<Var> {
        let want = [self.cfg.in_channels, self.cfg.image_size, self.cfg.image_size];
        if img.shape() != want {
            return Err(shape_err("forward", &img.shape(), &want));
        }
        let (mut x, mut grid) = self.embed.forward(img, p)?;
        if let Some(cls) = self.cls {
            x = embed::attach_class_token(&x, &p[cls], self.pos.map(|i| &p[i]))?;
        } else if let Some(pos) = self.pos {
            x = ad::add(&x, &p[pos])?;
        }
        for stage in &self.stages {
            if let Some(t) = &stage.transition {
                let fmap = embed::unflatten_tokens(&x, grid)?;
                (x, grid) = embed::flatten_feature_map(&t.forward(&fmap, p)?)?;
            }
            for block in &stage.blocks {
                x = block.forward(&x, p)?;
            }
        }
        let x = self.final_norm.forward(&x, p)?;
        let pooled = if self.cls.is_some() {
            ad::slice_rows(&x, 0, 1)?
        } else {
            ad::mean_rows(&x)?
        };
        ad::linear(&pooled, &p[self.head_w], Some(&p[self.head_b]))
    }

    /// Logits `[B, classes]` for a batch `[B,C,H,W]`, without gradients.
    pub fn forward(&self, images: &Tensor) -> Result<Tensor> {
        let s = images.shape();
        if s.len() != 4 {
            return Err(shape_err("forward", s, &[0, 0, 0, 0]));
        }
        let per = s[1] * s[2] * s[3];
        let mut out = Vec::with_capacity(s[0] * self.cfg.num_classes);
        for b in 0..s[0] {
            let img = Tensor::new(s[1..].to_vec(), images.data()[b * per..(b + 1) * per].to_vec())?;
            out.extend_from_slice(self.logits(&img)?.data());
        }
        Tensor::new(vec![s[0], self.cfg.num_classes], out)
    }

    /// Logits `[classes]` of one image without gradients.
    pub fn logits(&self, img: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let p: Vec<Var> = self.store.iter().map(|q| tape.constant(q.tensor.clone())).collect();
        let x = tape.constant(img.clone());
        let l = self.forward_sample(&x, &p)?;
        let v = l.value().clone();
        v.reshape(&[self.cfg.num_classes])
    }

    /// Names of every fusion `α` parameter.
    pub fn alpha_names(&self) -> Vec<String> {
        self.blocks()
            .filter_map(|b| b.fusion.as_ref().map(|f| self.store.get(f.alpha).name.clone()))
            .collect()
    }

    /// Sets every `α` to zero and marks it non-trainable.
    pub fn freeze_alpha(&mut self) {
        let ids: Vec<ParamId> = self.blocks().filter_map(|b| b.fusion.as_ref().map(|f| f.alpha)).collect();
        for id in ids {
            let p = self.store.get_mut(id);
            p.tensor.data_mut().fill(0.0);
            p.trainable = false;
        }
    }

    pub fn count_params(&self) -> ParamCount {
        let mut by_module: Vec<(String, usize)> = Vec::new();
        for p in self.store.iter().filter(|p| p.trainable) {
            let key = module_key(&p.name);
            match by_module.iter_mut().find(|(k, _)| *k == key) {
                Some((_, n)) => *n += p.tensor.len(),
                None => by_module.push((key, p.tensor.len())),
            }
        }
        ParamCount {
            total: by_module.iter().map(|(_, n)| n).sum(),
            by_module,
        }
    }

    /// Analytic multiply-accumulate count of one forward pass at the
    /// configured resolution.
    pub fn estimate_macs(&self) -> MacReport {
        let r = self.cfg.image_size;
        let mut rep = MacReport::default();
        match &self.embed {
            Embed::Patch { patch, .. } => {
                let n = (r / patch) * (r / patch);
                rep.push("embed", (n * patch * patch * self.cfg.in_channels * self.cfg.dim) as u64);
            }
            Embed::Stem(layers) => {
                let (mut cin, mut cur, mut total) = (self.cfg.in_channels, (r, r), 0);
                for l in layers {
                    total += l.spec.macs(cin, cur.0, cur.1);
                    cur = l.spec.output_hw(cur.0, cur.1).unwrap_or((0, 0));
                    cin = l.spec.out_channels;
                }
                rep.push("embed", total);
            }
        }
        let mut prev: Option<(usize, (usize, usize))> = None;
        for (si, stage) in self.stages.iter().enumerate() {
            if let (Some(t), Some((cin, g))) = (&stage.transition, prev) {
                rep.push(&format!("stages.{si}.downsample"), t.spec.macs(cin, g.0, g.1));
            }
            for b in &stage.blocks {
                rep.push(&b.prefix, block_macs(&b.cfg).total);
            }
            prev = Some((stage.dim, stage.grid));
        }
        let last = self.stages.last().expect("at least one stage");
        let tokens = last.grid.0 * last.grid.1 + usize::from(self.cls.is_some());
        rep.push("norm", (tokens * last.dim) as u64);
        rep.push("head", (last.dim * self.cfg.num_classes) as u64);
        rep
    }
}

fn module_key(name: &str) -> String {
    let parts: Vec<&str> = name.split('.').collect();
    match parts.as_slice() {
        ["blocks", i, ..] => format!("blocks.{i}"),
        ["stages", s, "blocks", i, ..] => format!("stages.{s}.blocks.{i}"),
        ["stages", s, ..] => format!("stages.{s}.downsample"),
        [first, ..] => first.to_string(),
        [] => String::new(),
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamCount {
    pub total: usize,
    pub by_module: Vec<(String, usize)>,
}

impl ParamCount {
    pub fn module(&self, key: &str) -> usize {
        self.by_module.iter().filter(|(k, _)| k == key).map(|(_, n)| n).sum()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MacReport {
    pub total: u64,
    pub by_module: Vec<(String, u64)>,
}

impl MacReport {
    pub fn push(&mut self, key: &str, macs: u64) {
        self.total += macs;
        self.by_module.push((key.to_string(), macs));
    }

    pub fn module(&self, key: &str) -> u64 {
        self.by_module.iter().filter(|(k, _)| k == key).map(|(_, n)| n).sum()
    }
}

/// `round(5·n·log2 n)` for one `n`-point 2D transform.
pub fn fft_macs(n: usize) -> u64 {
    if n <= 1 {
        return 0;
    }
    (5.0 * n as f64 * (n as f64).log2()).round() as u64
}

/// Selective-scan MACs for one direction at `l` tokens.
pub fn scan_macs(l: usize, d_inner: usize, d_state: usize) -> u64 {
    (3 * l * d_inner * d_state) as u64
}

/// MAC breakdown of one block at its configured token count.
pub fn block_macs(cfg: &BlockConfig) -> MacReport {
    let l = cfg.tokens();
    let (d, di, n, r) = (cfg.dim, cfg.d_inner(), cfg.d_state, cfg.dt_rank);
    let mut rep = MacReport::default();
    if cfg.variant.has_attention() {
        let dh = d / cfg.heads;
        rep.push("attn.norm", (l * d) as u64);
        rep.push("attn.proj", (4 * l * d * d) as u64);
        rep.push("attn.core", (2 * l * d * dh + l * d) as u64);
    }
    if cfg.variant.has_fusion() {
        let hw = cfg.grid.0 * cfg.grid.1;
        let fft = match cfg.fft_mode {
            FftMode::PerChannel => d as u64 * fft_macs(hw),
            FftMode::SequenceGrid => fft_macs(hw * d),
        };
        rep.push("fusion.fft", fft);
        rep.push("fusion.scale", (2 * hw * d) as u64);
        rep.push("fusion.mix", (l * d * d) as u64);
    }
    rep.push("norm", (l * d) as u64);
    rep.push("in_proj", (l * d * 2 * di) as u64);
    for dir in ["fwd", "bwd"] {
        if cfg.variant.has_conv() {
            rep.push(&format!("{dir}.conv1d"), (l * di * cfg.conv_width) as u64);
        }
        rep.push(&format!("{dir}.x_proj"), (l * di * (r + 2 * n)) as u64);
        rep.push(&format!("{dir}.dt_proj"), (l * r * di) as u64);
        rep.push(&format!("{dir}.scan"), scan_macs(l, di, n));
        if cfg.d_skip {
            rep.push(&format!("{dir}.skip"), (l * di) as u64);
        }
    }
    rep.push("gate", (l * di) as u64);
    rep.push("out_proj", (l * di * d) as u64);
    rep
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f_block_counts() {
        let mut cfg = ModelConfig::tiny(Variant::VimF);
        for (p, want) in [(0.0, 0), (0.25, 6), (0.5, 12), (1.0, 24)] {
            cfg.f_block_proportion = p;
            assert_eq!(cfg.num_f_blocks(), want);
        }
        cfg.depth = 4;
        cfg.f_block_proportion = 0.3;
        assert_eq!(cfg.num_f_blocks(), 2);
    }

    #[test]
    fn cf_requires_four_stages() {
        let mut cfg = ModelConfig::desk(Variant::VimFCf);
        cfg.cf_stages.depths = vec![1, 1, 1];
        cfg.cf_stages.dims = vec![8, 8, 8];
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn proportion_out_of_range() {
        let mut cfg = ModelConfig::desk(Variant::VimF);
        cfg.f_block_proportion = 1.5;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn module_keys() {
        assert_eq!(module_key("blocks.3.mixer.fwd.a_log"), "blocks.3");
        assert_eq!(module_key("embed.stem.0.0.weight"), "embed");
        assert_eq!(module_key("stages.2.blocks.1.norm.weight"), "stages.2.blocks.1");
        assert_eq!(module_key("stages.2.downsample.bias"), "stages.2.downsample");
        assert_eq!(module_key("head.bias"), "head");
    }

    #[test]
    fn config_json_round_trip() {
        let cfg = ModelConfig::desk(Variant::VimFH);
        assert_eq!(ModelConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    }

    #[test]
    fn unknown_config_field_rejected() {
        assert!(ModelConfig::from_json(r#"{"depht": 3}"#).is_err());
    }

    #[test]
    fn partial_config_fills_defaults() {
        let cfg = ModelConfig::from_json(r#"{"depth": 2, "variant": "vim_f_h"}"#).unwrap();
        assert_eq!(cfg.depth, 2);
        assert_eq!(cfg.variant, Variant::VimFH);
        assert_eq!(cfg.dim, 32);
    }
}
