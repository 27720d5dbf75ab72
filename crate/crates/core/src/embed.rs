//! Image-to-token front ends.
//!
//! Two tokenizers are provided: a non-overlapping `P×P` patch projection and
//! an overlapping convolutional stem (`7×7/4`, then two `[2×2/2, 1×1]`
//! downsampling blocks, silu after every conv). Both flatten the final
//! feature map in row-major order to `[n, D]`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{self as ad, Var};
use crate::error::{shape_err, Error, Result};
use crate::params::{Init, ParamId, ParamStore};
use crate::tensor::Conv2dGeom;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_channels: usize,
}

impl ConvSpec {
    pub const fn new(kernel: usize, stride: usize, padding: usize, out_channels: usize) -> Self {
        Self {
            kernel,
            stride,
            padding,
            out_channels,
        }
    }

    pub fn geom(&self) -> Conv2dGeom {
        Conv2dGeom::new((self.stride, self.stride), (self.padding, self.padding))
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        self.geom().output_hw(h, w, self.kernel, self.kernel)
    }

    pub fn params(&self, in_channels: usize) -> usize {
        [self.kernel, in_channels, self.out_channels]
            .iter()
            .fold(self.kernel, |acc, &n| acc.saturating_mul(n))
            .saturating_add(self.out_channels)
    }

    /// Multiply-accumulates at input `(h, w)`; biases are not counted.
    pub fn macs(&self, in_channels: usize, h: usize, w: usize) -> u64 {
        let (oh, ow) = self.output_hw(h, w).unwrap_or((0, 0));
        [ow, self.out_channels, in_channels, self.kernel, self.kernel]
            .iter()
            .fold(oh as u64, |acc, &n| acc.saturating_mul(n as u64))
    }
}

/// Convolutional stem layout. `blocks[i]` lists the convs of downsampling
/// block `i`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StemConfig {
    pub blocks: Vec<Vec<ConvSpec>>,
    pub in_channels: usize,
}

impl StemConfig {
    /// `7×7/4 → c1`, `[2×2/2, 1×1] → c2`, `[2×2/2, 1×1] → dim`.
    pub fn standard(c1: usize, c2: usize, dim: usize) -> Self {
        Self {
            blocks: vec![
                vec![ConvSpec::new(7, 4, 3, c1)],
                vec![ConvSpec::new(2, 2, 0, c2), ConvSpec::new(1, 1, 0, c2)],
                vec![ConvSpec::new(2, 2, 0, dim), ConvSpec::new(1, 1, 0, dim)],
            ],
            in_channels: 3,
        }
    }

    /// Channel widths `(dim/4, dim/2, dim)`.
    pub fn for_dim(dim: usize) -> Self {
        Self::standard((dim / 4).max(1), (dim / 2).max(1), dim)
    }

    pub fn out_dim(&self) -> usize {
        self.convs().last().map_or(self.in_channels, |c| c.out_channels)
    }

    pub fn convs(&self) -> impl Iterator<Item = &ConvSpec> {
        self.blocks.iter().flatten()
    }

    /// Spatial extents after each block for an `h×w` input.
    pub fn stage_extents(&self, h: usize, w: usize) -> Result<Vec<(usize, usize)>> {
        let mut cur = (h, w);
        let mut out = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            for c in block {
                cur = c.output_hw(cur.0, cur.1).ok_or_else(|| Error::Domain {
                    op: "conv_stem",
                    msg: format!("resolution {h}x{w} too small for the stride chain"),
                })?;
            }
            out.push(cur);
        }
        Ok(out)
    }

    /// Product of all strides.
    pub fn total_stride(&self) -> usize {
        self.convs().map(|c| c.stride).product()
    }

    pub fn num_params(&self) -> usize {
        let mut cin = self.in_channels;
        let mut n = 0;
        for c in self.convs() {
            n += c.params(cin);
            cin = c.out_channels;
        }
        n
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let (mut cin, mut cur, mut total) = (self.in_channels, (h, w), 0);
        for c in self.convs() {
            total += c.macs(cin, cur.0, cur.1);
            cur = c.output_hw(cur.0, cur.1).unwrap_or((0, 0));
            cin = c.out_channels;
        }
        total
    }

    /// Whether adjacent outputs of the first conv read shared input pixels.
    pub fn first_stage_overlaps(&self) -> bool {
        self.convs().next().is_some_and(|c| c.kernel > c.stride)
    }
}

/// Which tokenizer a model uses.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum StemKind {
    Conv(StemConfig),
    Patch { patch: usize },
}

#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub spec: ConvSpec,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl ConvLayer {
    pub fn register(store: &mut ParamStore, prefix: &str, spec: ConvSpec, cin: usize) -> Self {
        let fan_in = cin * spec.kernel * spec.kernel;
        Self {
            spec,
            weight: store.add(
                &format!("{prefix}.weight"),
                &[spec.out_channels, cin, spec.kernel, spec.kernel],
                Init::He(fan_in),
            ),
            bias: store.add(&format!("{prefix}.bias"), &[spec.out_channels], Init::Const(0.0)),
        }
    }

    pub fn forward(&self, x: &Var, p: &[Var]) -> Result<Var> {
        ad::conv2d(x, &p[self.weight], Some(&p[self.bias]), self.spec.geom())
    }
}

/// Tokenizer with registered parameters.
#[derive(Clone, Debug)]
pub enum Embed {
    Patch {
        patch: usize,
        weight: ParamId,
        bias: ParamId,
    },
    Stem(Vec<ConvLayer>),
}

impl Embed {
    pub fn register(store: &mut ParamStore, prefix: &str, kind: &StemKind, in_channels: usize, dim: usize) -> Self {
        match kind {
            StemKind::Patch { patch } => {
                let fan_in = patch * patch * in_channels;
                Embed::Patch {
                    patch: *patch,
                    weight: store.add(&format!("{prefix}.proj.weight"), &[fan_in, dim], Init::FanIn(fan_in)),
                    bias: store.add(&format!("{prefix}.proj.bias"), &[dim], Init::FanIn(fan_in)),
                }
            }
            StemKind::Conv(cfg) => {
                let mut cin = cfg.in_channels;
                let mut layers = Vec::new();
                for (bi, block) in cfg.blocks.iter().enumerate() {
                    for (ci, spec) in block.iter().enumerate() {
                        layers.push(ConvLayer::register(store, &format!("{prefix}.stem.{bi}.{ci}"), *spec, cin));
                        cin = spec.out_channels;
                    }
                }
                Embed::Stem(layers)
            }
        }
    }

    /// `img[C,H,W]` → tokens `[n, D]` plus the token grid.
    pub fn forward(&self, img: &Var, p: &[Var]) -> Result<(Var, (usize, usize))> {
        match self {
            Embed::Patch { patch, weight, bias } => patchify_baseline(img, *patch, &p[*weight], Some(&p[*bias])),
            Embed::Stem(layers) => {
                let mut x = img.clone();
                for layer in layers {
                    x = ad::silu(&layer.forward(&x, p)?);
                }
                flatten_feature_map(&x)
            }
        }
    }
}

/// `[D,H,W]` feature map → `[H·W, D]` tokens in row-major order.
pub fn flatten_feature_map(x: &Var) -> Result<(Var, (usize, usize))> {
    let s = x.shape();
    let [d, h, w] = s[..] else {
        return Err(shape_err("flatten", &s, &[0, 0, 0]));
    };
    let flat = ad::reshape(x, &[d, h * w])?;
    Ok((ad::transpose(&flat)?, (h, w)))
}

/// Inverse of [`flatten_feature_map`].
pub fn unflatten_tokens(tokens: &Var, grid: (usize, usize)) -> Result<Var> {
    let s = tokens.shape();
    if s.len() != 2 || s[0] != grid.0 * grid.1 {
        return Err(shape_err("unflatten", &s, &[grid.0 * grid.1]));
    }
    ad::reshape(&ad::transpose(tokens)?, &[s[1], grid.0, grid.1])
}

/// Non-overlapping patches projected by `w_proj[(P²·C), D]`.
pub fn patchify_baseline(img: &Var, patch: usize, w_proj: &Var, bias: Option<&Var>) -> Result<(Var, (usize, usize))> {
    let s = img.shape();
    if s.len() != 3 {
        return Err(shape_err("patchify", &s, &[3, 0, 0]));
    }
    let patches = ad::patchify(img, patch)?;
    Ok((ad::linear(&patches, w_proj, bias)?, (s[1] / patch, s[2] / patch)))
}

/// Prepends `cls[D]` at index 0 and optionally adds `pos[(n+1), D]`.
pub fn attach_class_token(tokens: &Var, cls: &Var, pos: Option<&Var>) -> Result<Var> {
    let s = tokens.shape();
    let d = s[1];
    if cls.shape().iter().product::<usize>() != d {
        return Err(shape_err("attach_class_token", &s, &cls.shape()));
    }
    let cls_row = ad::reshape(cls, &[1, d])?;
    let seq = ad::concat_rows(&[&cls_row, tokens])?;
    match pos {
        Some(pos) => {
            if pos.shape() != [s[0] + 1, d] {
                return Err(shape_err("attach_class_token pos", &seq.shape(), &pos.shape()));
            }
            ad::add(&seq, pos)
        }
        None => Ok(seq),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stem_extents_at_224() {
        let cfg = StemConfig::standard(48, 96, 192);
        assert_eq!(cfg.stage_extents(224, 224).unwrap(), vec![(56, 56), (28, 28), (14, 14)]);
        assert_eq!(cfg.total_stride(), 16);
        assert!(cfg.first_stage_overlaps());
    }

    #[test]
    fn stem_param_subtotal() {
        assert_eq!(StemConfig::standard(48, 96, 192).num_params(), 145_920);
    }

    #[test]
    fn desk_resolution_token_count() {
        let ext = StemConfig::for_dim(32).stage_extents(64, 64).unwrap();
        assert_eq!(ext.last(), Some(&(4, 4)));
    }

    #[test]
    fn too_small_resolution_is_an_error() {
        assert!(StemConfig::for_dim(32).stage_extents(2, 2).is_err());
    }
}
