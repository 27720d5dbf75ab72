//! Built-in self checks: oracle comparisons, exact identities, gradient
//! checks and the accounting figures. Backs the `verify` subcommand.

use rand::{Rng, RngCore};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{self as ad, Var};
use crate::blocks::{Block, BlockConfig, Variant};
use crate::embed::StemConfig;
use crate::error::Result;
use crate::fft;
use crate::gradcheck::{grad_check_many, GradCheckOptions};
use crate::harness::checkpoint;
use crate::model::{Model, ModelConfig};
use crate::params::{stream_rng, ParamStore};
use crate::ssm::{self, Discretization};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub relation: &'static str,
    pub passed: bool,
    pub detail: String,
}

type Check = fn() -> Result<(bool, String)>;

const CHECKS: &[(&str, Check)] = &[
    ("dft_oracle", dft_oracle),
    ("amplitude_translation_invariance", translation_invariance),
    ("zoh_discretization", zoh_discretization),
    ("scan_lti_equivalence", scan_lti_equivalence),
    ("gradients_primitives", gradients_primitives),
    ("gradients_blocks", gradients_blocks),
    ("stem_accounting", stem_accounting),
    ("fusion_reduces_to_vim", fusion_reduces_to_vim),
    ("checkpoint_round_trip", checkpoint_round_trip),
];

/// Names of every check, in run order.
pub fn relations() -> Vec<&'static str> {
    CHECKS.iter().map(|(n, _)| *n).collect()
}

pub fn run_all() -> Vec<CheckResult> {
    CHECKS
        .iter()
        .map(|(relation, f)| {
            let (passed, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
            CheckResult {
                relation,
                passed,
                detail,
            }
        })
        .collect()
}

pub fn render_table(results: &[CheckResult]) -> String {
    let w = results.iter().map(|r| r.relation.len()).max().unwrap_or(8);
    let mut out = String::new();
    for r in results {
        let mark = if r.passed { "PASS" } else { "FAIL" };
        out.push_str(&format!("{mark}  {:w$}  {}\n", r.relation, r.detail));
    }
    out
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("positive extents")
}

fn dft_oracle() -> Result<(bool, String)> {
    let mut rng = stream_rng(0, "verify/dft");
    let mut worst = 0.0f64;
    for h in (1..=16).chain([56]) {
        for w in [1, 3, 8, 13, 16, 56] {
            let f = random(&mut rng, &[h, w]);
            worst = worst.max(fft::fft2d(&f)?.max_abs_diff(&fft::dft2d_naive(&f)?));
        }
    }
    Ok((worst <= 1e-10, format!("max abs err {worst:.2e} (tol 1e-10)")))
}

fn translation_invariance() -> Result<(bool, String)> {
    let mut rng = stream_rng(0, "verify/shift");
    let mut worst = 0.0f64;
    for _ in 0..30 {
        let (h, w) = (rng.random_range(1..=16), rng.random_range(1..=16));
        let f = random(&mut rng, &[h, w]);
        let g = f.roll2(rng.random_range(0..h), rng.random_range(0..w))?;
        let a = fft::amplitude_spectrum(&fft::fft2d(&f)?);
        let b = fft::amplitude_spectrum(&fft::fft2d(&g)?);
        worst = worst.max(a.max_abs_diff(&b));
    }
    Ok((worst <= 1e-9, format!("max amplitude diff {worst:.2e} (tol 1e-9)")))
}

fn zoh_discretization() -> Result<(bool, String)> {
    let one = |v: f64| Tensor::new(vec![1, 1], vec![v]).expect("1x1");
    let (ab, bb) = ssm::discretize(&one(-1.0), &one(1.0), &one(2f64.ln()), Discretization::Zoh)?;
    let e1 = (ab.data()[0] - 0.5).abs().max((bb.data()[0] - 0.5).abs());
    let (ab, bb) = ssm::discretize(&one(-1.0), &one(1.0), &one(1e-12), Discretization::Zoh)?;
    let e2 = (ab.data()[0] - 1.0).abs().max((bb.data()[0] / 1e-12 - 1.0).abs());
    Ok((e1 <= 1e-12 && e2 <= 1e-9, format!("ln2 step err {e1:.1e}, small-step rel err {e2:.1e}")))
}

fn scan_lti_equivalence() -> Result<(bool, String)> {
    let mut rng = stream_rng(0, "verify/lti");
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let (l, d, n) = (rng.random_range(1..=64), rng.random_range(1..=3), rng.random_range(1..=4));
        let a = Tensor::new(vec![d, n], (0..d * n).map(|_| -rng.random_range(0.05..2.0)).collect())?;
        let b_row: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let c_row: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let dt_row: Vec<f64> = (0..d).map(|_| rng.random_range(0.01..0.5)).collect();
        let b = Tensor::new(vec![l, n], b_row.repeat(l))?;
        let c = Tensor::new(vec![l, n], c_row.repeat(l))?;
        let delta = Tensor::new(vec![l, d], dt_row.repeat(l))?;
        let x = random(&mut rng, &[l, d]);
        let (ab, bb) = ssm::discretize(&a, &b, &delta, Discretization::Zoh)?;
        let y1 = ssm::scan_sequential(&ab, &bb, &c, &x, None)?;
        let y2 = ssm::apply_scan_kernel(&ssm::scan_kernel(&ab, &bb, &c)?, &x, None)?;
        let scale = y1.data().iter().fold(1e-12f64, |m, v| m.max(v.abs()));
        worst = worst.max(y1.max_abs_diff(&y2) / scale);
    }
    Ok((worst <= 1e-8, format!("max rel err {worst:.2e} (tol 1e-8)")))
}

fn weighted_sum(y: &Var, seed: u64) -> Result<Var> {
    let mut rng = stream_rng(seed, "verify/probe");
    let r = random(&mut rng, &y.shape());
    Ok(ad::sum(&ad::mul(y, &y.tape().constant(r))?))
}

fn gradients_primitives() -> Result<(bool, String)> {
    let mut rng = stream_rng(0, "verify/grad");
    let opts = GradCheckOptions::default();
    let mut worst = 0.0f64;
    let mut run = |f: &dyn Fn(&[Var]) -> Result<Var>, inputs: Vec<Tensor>| -> Result<()> {
        worst = worst.max(grad_check_many(f, &inputs, &opts)?.max_rel_err);
        Ok(())
    };
    let (a, b) = (random(&mut rng, &[3, 4]), random(&mut rng, &[4, 2]));
    run(&|v| weighted_sum(&ad::matmul(&v[0], &v[1])?, 1), vec![a, b])?;
    let (x, k) = (random(&mut rng, &[2, 6, 6]), random(&mut rng, &[3, 2, 3, 3]));
    run(
        &|v| weighted_sum(&ad::conv2d(&v[0], &v[1], None, crate::tensor::Conv2dGeom::new((2, 2), (1, 1)))?, 2),
        vec![x, k],
    )?;
    let x = random(&mut rng, &[4, 5]);
    run(&|v| weighted_sum(&ad::amplitude2d(&v[0], 1, 4, 5)?, 3), vec![x])?;
    let (l, d, n) = (5, 2, 3);
    let u = random(&mut rng, &[l, d]);
    let dt = random(&mut rng, &[l, d]);
    let a = Tensor::new(vec![d, n], (0..d * n).map(|i| -0.3 - 0.2 * i as f64).collect())?;
    let (bm, cm) = (random(&mut rng, &[l, n]), random(&mut rng, &[l, n]));
    run(
        &|v| {
            let delta = ad::softplus(&v[1]);
            weighted_sum(&ad::selective_scan(&v[0], &delta, &v[2], &v[3], &v[4], None, Discretization::Zoh)?, 4)
        },
        vec![u, dt, a, bm, cm],
    )?;
    let (x, g, bt) = (random(&mut rng, &[3, 4]), random(&mut rng, &[4]), random(&mut rng, &[4]));
    run(&|v| weighted_sum(&ad::layer_norm(&v[0], &v[1], &v[2], 1e-6)?, 5), vec![x, g, bt])?;
    let z = random(&mut rng, &[1, 5]);
    run(&|v| ad::cross_entropy(&v[0], 2), vec![z])?;
    Ok((worst <= 1e-4, format!("max rel err {worst:.2e} (tol 1e-4)")))
}

fn block_grad_err(variant: Variant) -> Result<f64> {
    let mut cfg = BlockConfig::new(variant, 8, (2, 3));
    cfg.d_state = 4;
    cfg.has_class_token = variant != Variant::VimFCf;
    let mut store = ParamStore::new(11);
    let block = Block::register(&mut store, "b", cfg.clone())?;
    let mut rng = stream_rng(0, "verify/block");
    let mut inputs = vec![random(&mut rng, &[cfg.tokens(), cfg.dim])];
    inputs.extend(store.iter().map(|p| p.tensor.clone()));
    let opts = GradCheckOptions {
        max_coords: Some(6),
        ..Default::default()
    };
    let r = grad_check_many(|v| weighted_sum(&block.forward(&v[0], &v[1..])?, 9), &inputs, &opts)?;
    Ok(r.max_rel_err)
}

fn gradients_blocks() -> Result<(bool, String)> {
    let mut parts = Vec::new();
    let mut worst = 0.0f64;
    for v in [Variant::Vim, Variant::VimF, Variant::VimFH, Variant::VimFCf] {
        let e = block_grad_err(v)?;
        worst = worst.max(e);
        parts.push(format!("{v:?} {e:.1e}"));
    }
    Ok((worst <= 1e-4, parts.join(", ")))
}

fn stem_accounting() -> Result<(bool, String)> {
    let stem = StemConfig::standard(48, 96, 192);
    let extents = stem.stage_extents(224, 224)?;
    let params = stem.num_params();
    let macs = stem.macs(224, 224);
    let patch_macs = 196u64 * 768 * 192;
    let delta = (macs - patch_macs) as f64 / 1e9;
    let fidelity = Model::build(&ModelConfig::tiny(Variant::VimF), 0)?.count_params().total;
    let ok = extents == [(56, 56), (28, 28), (14, 14)]
        && params == 145_920
        && (0.030..=0.042).contains(&delta)
        && (6_300_000..=7_700_000).contains(&fidelity);
    Ok((
        ok,
        format!("extents {extents:?}, stem params {params}, MAC delta {delta:.4} G, tiny params {fidelity}"),
    ))
}

fn fusion_reduces_to_vim() -> Result<(bool, String)> {
    let mut a = ModelConfig::desk(Variant::VimF);
    a.image_size = 32;
    a.alpha_init = 0.0;
    let mut b = a.clone();
    b.variant = Variant::Vim;
    b.use_pos_embed = a.use_pos_embed;
    let (ma, mb) = (Model::build(&a, 2)?, Model::build(&b, 2)?);
    let mut rng = stream_rng(0, "verify/reduce");
    let img = random(&mut rng, &[3, 32, 32]);
    let same = ma.logits(&img)?.data() == mb.logits(&img)?.data();
    Ok((same, format!("alpha=0 Vim-F logits bit-identical to Vim: {same}")))
}

fn checkpoint_round_trip() -> Result<(bool, String)> {
    let mut cfg = ModelConfig::desk(Variant::VimF);
    cfg.image_size = 32;
    let m = Model::build(&cfg, 5)?;
    let bytes = checkpoint::encode(&m);
    let back = checkpoint::decode(&bytes)?.into_model()?;
    let exact = back.store == m.store;
    let mut corrupt = bytes.clone();
    let i = (stream_rng(0, "verify/ckpt").next_u64() as usize) % 64 + bytes.len() - 64;
    corrupt[i] ^= 0x10;
    let caught = checkpoint::decode(&corrupt).is_err();
    Ok((exact && caught, format!("bit-exact {exact}, corruption detected {caught}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relation_names_unique() {
        let mut r = relations();
        r.sort();
        r.dedup();
        assert_eq!(r.len(), CHECKS.len());
    }

    #[test]
    fn table_marks_failures() {
        let t = render_table(&[CheckResult {
            relation: "x",
            passed: false,
            detail: "d".into(),
        }]);
        assert!(t.starts_with("FAIL"));
    }
}
