//! Central-difference checks (step 1e-5, rel err ≤ 1e-4) for every
//! differentiable primitive, every block variant and whole models.

mod common;

use common::{probe, random, rng};
use vimf::autodiff::{self as ad, Var};
use vimf::blocks::{linear_attention_core, Block, BlockConfig, FftMode, Variant};
use vimf::gradcheck::{grad_check_many, GradCheckOptions};
use vimf::params::ParamStore;
use vimf::ssm::Discretization;
use vimf::tensor::Conv2dGeom;
use vimf::{Model, ModelConfig, Tensor};

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn check(name: &str, f: impl Fn(&[Var]) -> vimf::Result<Var>, inputs: Vec<Tensor>) {
    check_with(name, f, inputs, None);
}

fn check_with(name: &str, f: impl Fn(&[Var]) -> vimf::Result<Var>, inputs: Vec<Tensor>, max_coords: Option<usize>) {
    let opts = GradCheckOptions {
        step: STEP,
        tol: TOL,
        max_coords,
        seed: 0,
    };
    let r = grad_check_many(f, &inputs, &opts).unwrap();
    assert!(r.passed(), "{name}: max rel err {:.3e} at {:?}", r.max_rel_err, r.worst);
    assert!(r.checked > 0);
}

fn positive(t: Tensor) -> Tensor {
    t.map(|v| v.abs() + 0.5)
}

#[test]
fn elementwise_and_arithmetic() {
    let mut g = rng("elem");
    let (a, b) = (random(&mut g, &[3, 4]), random(&mut g, &[3, 4]));
    check("add", |v| probe(&ad::add(&v[0], &v[1])?, 1), vec![a.clone(), b.clone()]);
    check("sub", |v| probe(&ad::sub(&v[0], &v[1])?, 1), vec![a.clone(), b.clone()]);
    check("mul", |v| probe(&ad::mul(&v[0], &v[1])?, 1), vec![a.clone(), b.clone()]);
    check("scale", |v| probe(&ad::scale(&v[0], -1.7), 1), vec![a.clone()]);
    check("add_scalar", |v| probe(&ad::add_scalar(&v[0], 0.3), 1), vec![a.clone()]);
    check("exp", |v| probe(&ad::exp(&v[0]), 1), vec![a.clone()]);
    check("softplus", |v| probe(&ad::softplus(&v[0]), 1), vec![a.clone()]);
    check("silu", |v| probe(&ad::silu(&v[0]), 1), vec![a.clone()]);
    check("elu_plus_one", |v| probe(&ad::elu_plus_one(&v[0]), 1), vec![a.clone()]);
    let s = random(&mut g, &[1]);
    check("mul_scalar_var", |v| probe(&ad::mul_scalar_var(&v[0], &v[1])?, 1), vec![a, s]);
}

#[test]
fn reused_value_accumulates() {
    let mut g = rng("reuse");
    let a = random(&mut g, &[2, 3]);
    check("x*x+x", |v| probe(&ad::add(&ad::mul(&v[0], &v[0])?, &v[0])?, 2), vec![a]);
}

#[test]
fn linear_algebra() {
    let mut g = rng("linalg");
    let (a, b) = (random(&mut g, &[3, 5]), random(&mut g, &[5, 2]));
    check("matmul", |v| probe(&ad::matmul(&v[0], &v[1])?, 3), vec![a.clone(), b.clone()]);
    let bias = random(&mut g, &[2]);
    check("linear", |v| probe(&ad::linear(&v[0], &v[1], Some(&v[2]))?, 3), vec![a.clone(), b, bias]);
    let rb = random(&mut g, &[5]);
    check("add_row_bias", |v| probe(&ad::add_row_bias(&v[0], &v[1])?, 3), vec![a.clone(), rb]);
    check("transpose", |v| probe(&ad::transpose(&v[0])?, 3), vec![a.clone()]);
    check("reshape", |v| probe(&ad::reshape(&v[0], &[5, 3])?, 3), vec![a.clone()]);
    check("sum_rows", |v| probe(&ad::sum_rows(&v[0])?, 3), vec![a.clone()]);
    check("mean_rows", |v| probe(&ad::mean_rows(&v[0])?, 3), vec![a.clone()]);
    let den = positive(random(&mut g, &[3, 1]));
    check("div_rows", |v| probe(&ad::div_rows(&v[0], &v[1])?, 3), vec![a, den]);
}

#[test]
fn slicing_and_layout() {
    let mut g = rng("slice");
    let (a, b) = (random(&mut g, &[4, 3]), random(&mut g, &[2, 3]));
    check("slice_rows", |v| probe(&ad::slice_rows(&v[0], 1, 3)?, 4), vec![a.clone()]);
    check("slice_cols", |v| probe(&ad::slice_cols(&v[0], 1, 3)?, 4), vec![a.clone()]);
    check("reverse_rows", |v| probe(&ad::reverse_rows(&v[0])?, 4), vec![a.clone()]);
    check("concat_rows", |v| probe(&ad::concat_rows(&[&v[0], &v[1]])?, 4), vec![a, b]);
    let img = random(&mut g, &[2, 4, 6]);
    check("patchify", |v| probe(&ad::patchify(&v[0], 2)?, 4), vec![img]);
}

#[test]
fn normalization_and_loss() {
    let mut g = rng("norm");
    let (x, ga, be) = (random(&mut g, &[3, 6]), random(&mut g, &[6]), random(&mut g, &[6]));
    check("layer_norm", |v| probe(&ad::layer_norm(&v[0], &v[1], &v[2], 1e-6)?, 5), vec![x, ga, be]);
    let z = random(&mut g, &[1, 7]);
    check("cross_entropy", |v| ad::cross_entropy(&v[0], 4), vec![z]);
}

#[test]
fn convolutions() {
    let mut g = rng("conv");
    for (s, p, k) in [(1, 1, 3), (2, 0, 2), (4, 3, 7)] {
        let x = random(&mut g, &[2, 9, 9]);
        let w = random(&mut g, &[3, 2, k, k]);
        let b = random(&mut g, &[3]);
        check(
            "conv2d",
            move |v| probe(&ad::conv2d(&v[0], &v[1], Some(&v[2]), Conv2dGeom::new((s, s), (p, p)))?, 6),
            vec![x, w, b],
        );
    }
    let (x, k, b) = (random(&mut g, &[7, 3]), random(&mut g, &[3, 4]), random(&mut g, &[3]));
    check("conv1d", |v| probe(&ad::conv1d_depthwise_causal(&v[0], &v[1], Some(&v[2]))?, 6), vec![x, k, b]);
}

#[test]
fn amplitude_spectrum() {
    let mut g = rng("amp");
    for (batch, h, w) in [(1, 4, 4), (2, 3, 5), (3, 2, 2), (1, 1, 6)] {
        let x = random(&mut g, &[batch * h, w]);
        check("amplitude2d", move |v| probe(&ad::amplitude2d(&v[0], batch, h, w)?, 7), vec![x]);
    }
}

#[test]
fn selective_scan_both_discretizations() {
    let mut g = rng("scan");
    let (l, d, n) = (6, 3, 4);
    for mode in [Discretization::Zoh, Discretization::Euler] {
        let u = random(&mut g, &[l, d]);
        let dt = random(&mut g, &[l, d]);
        let a = positive(random(&mut g, &[d, n])).map(|v| -v);
        let (b, c) = (random(&mut g, &[l, n]), random(&mut g, &[l, n]));
        let ds = random(&mut g, &[d]);
        check(
            "selective_scan",
            move |v| {
                let delta = ad::softplus(&v[1]);
                probe(&ad::selective_scan(&v[0], &delta, &v[2], &v[3], &v[4], Some(&v[5]), mode)?, 8)
            },
            vec![u, dt, a, b, c, ds],
        );
    }
}

#[test]
fn selective_scan_near_series_threshold() {
    let mut g = rng("scan-small");
    let (l, d, n) = (4, 2, 2);
    let u = random(&mut g, &[l, d]);
    let delta = Tensor::full(&[l, d], 1e-3);
    let a = Tensor::new(vec![d, n], vec![-1e-3, -2e-3, -0.5, -1.0]).unwrap();
    let (b, c) = (random(&mut g, &[l, n]), random(&mut g, &[l, n]));
    check(
        "selective_scan small steps",
        |v| probe(&ad::selective_scan(&v[0], &v[1], &v[2], &v[3], &v[4], None, Discretization::Zoh)?, 9),
        vec![u, delta, a, b, c],
    );
}

#[test]
fn linear_attention() {
    let mut g = rng("la");
    let (q, k, v) = (random(&mut g, &[5, 4]), random(&mut g, &[5, 4]), random(&mut g, &[5, 4]));
    check("linear_attention", |x| probe(&linear_attention_core(&x[0], &x[1], &x[2], 2)?, 10), vec![q, k, v]);
}

fn block_inputs(variant: Variant, mode: FftMode) -> (Block, Vec<Tensor>) {
    let mut cfg = BlockConfig::new(variant, 8, (2, 3));
    cfg.d_state = 4;
    cfg.fft_mode = mode;
    cfg.has_class_token = variant != Variant::VimFCf;
    let mut store = ParamStore::new(21);
    let block = Block::register(&mut store, "b", cfg.clone()).unwrap();
    let mut g = rng("block");
    let mut inputs = vec![random(&mut g, &[cfg.tokens(), cfg.dim])];
    inputs.extend(store.iter().map(|p| p.tensor.clone()));
    (block, inputs)
}

#[test]
fn every_block_variant() {
    for variant in [Variant::Vim, Variant::VimF, Variant::VimFH, Variant::VimFCf] {
        for mode in [FftMode::PerChannel, FftMode::SequenceGrid] {
            let (block, inputs) = block_inputs(variant, mode);
            check(
                &format!("{variant:?}/{mode:?}"),
                |v| probe(&block.forward(&v[0], &v[1..])?, 11),
                inputs,
            );
        }
    }
}

fn model_check(cfg: &ModelConfig, coords: usize) {
    let model = Model::build(cfg, 4).unwrap();
    let mut g = rng("model");
    let img = random(&mut g, &[cfg.in_channels, cfg.image_size, cfg.image_size]);
    let mut inputs = vec![img];
    inputs.extend(model.store.iter().map(|p| p.tensor.clone()));
    check_with(
        &format!("{:?} model", cfg.variant),
        |v| ad::cross_entropy(&model.forward_sample(&v[0], &v[1..])?, 3),
        inputs,
        Some(coords),
    );
}

#[test]
fn desk_vim_f_model_sampled() {
    model_check(&ModelConfig::desk(Variant::VimF), 3);
}

#[test]
fn small_models_of_every_variant_sampled() {
    for v in [Variant::Vim, Variant::VimFH, Variant::VimFCf] {
        let mut cfg = ModelConfig::desk(v);
        cfg.image_size = 32;
        cfg.depth = 2;
        model_check(&cfg, 2);
    }
}
