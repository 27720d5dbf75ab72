//! Randomized invariants.

mod common;

use common::random;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use vimf::autodiff::{Tape, Var};
use vimf::blocks::{linear_attention_core, Block, BlockConfig, Variant};
use vimf::fft::{self, dft2d_naive};
use vimf::harness::checkpoint;
use vimf::params::{stream_rng, ParamStore};
use vimf::ssm::{self, Discretization};
use vimf::{Model, ModelConfig, Tensor};

fn grid(seed: u64, h: usize, w: usize) -> Tensor {
    random(&mut stream_rng(seed, "grid"), &[h, w])
}

fn constants(tape: &Tape, store: &ParamStore) -> Vec<Var> {
    store.iter().map(|p| tape.constant(p.tensor.clone())).collect()
}

fn run_block(block: &Block, store: &ParamStore, x: &Tensor) -> Tensor {
    let tape = Tape::new();
    let p = constants(&tape, store);
    let y = block.forward(&tape.constant(x.clone()), &p).unwrap();
    let out = y.value().clone();
    out
}

fn small_block(variant: Variant, cls: bool, alpha: f64) -> (Block, ParamStore) {
    let mut cfg = BlockConfig::new(variant, 8, (3, 3));
    cfg.d_state = 4;
    cfg.has_class_token = cls;
    cfg.alpha_init = alpha;
    let mut store = ParamStore::new(31);
    let b = Block::register(&mut store, "b", cfg).unwrap();
    (b, store)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn fft_is_linear(seed in any::<u64>(), h in 1usize..12, w in 1usize..12, a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let (f, g) = (grid(seed, h, w), grid(seed ^ 1, h, w));
        let mix = f.zip_map(&g, |x, y| a * x + b * y).unwrap();
        let (ff, fg, fm) = (fft::fft2d(&f).unwrap(), fft::fft2d(&g).unwrap(), fft::fft2d(&mix).unwrap());
        for i in 0..h * w {
            prop_assert!((fm.re[i] - (a * ff.re[i] + b * fg.re[i])).abs() < 1e-9);
            prop_assert!((fm.im[i] - (a * ff.im[i] + b * fg.im[i])).abs() < 1e-9);
        }
    }

    #[test]
    fn parseval(seed in any::<u64>(), h in 1usize..20, w in 1usize..20) {
        let f = grid(seed, h, w);
        let time: f64 = f.data().iter().map(|v| v * v).sum();
        let freq = fft::fft2d(&f).unwrap().energy();
        prop_assert!((freq - (h * w) as f64 * time).abs() <= 1e-9 * freq.max(1.0));
    }

    #[test]
    fn amplitude_is_shift_invariant(seed in any::<u64>(), h in 1usize..17, w in 1usize..17, dy in 0usize..17, dx in 0usize..17) {
        let f = grid(seed, h, w);
        let g = f.roll2(dy % h, dx % w).unwrap();
        let a = fft::amplitude_spectrum(&fft::fft2d(&f).unwrap());
        let b = fft::amplitude_spectrum(&fft::fft2d(&g).unwrap());
        prop_assert!(a.max_abs_diff(&b) <= 1e-9);
    }

    #[test]
    fn real_input_spectrum_is_conjugate_symmetric(seed in any::<u64>(), h in 1usize..14, w in 1usize..14) {
        let s = fft::fft2d(&grid(seed, h, w)).unwrap();
        for u in 0..h {
            for v in 0..w {
                let (re, im) = s.at(u, v);
                let (re2, im2) = s.at((h - u) % h, (w - v) % w);
                prop_assert!((re - re2).abs() < 1e-10 && (im + im2).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn fast_and_direct_dft_agree(seed in any::<u64>(), h in 1usize..17, w in 1usize..17) {
        let f = grid(seed, h, w);
        prop_assert!(fft::fft2d(&f).unwrap().max_abs_diff(&dft2d_naive(&f).unwrap()) <= 1e-10);
    }

    #[test]
    fn lti_scan_equals_kernel_convolution(seed in any::<u64>(), l in 1usize..48, d in 1usize..3, n in 1usize..5) {
        let mut g = stream_rng(seed, "lti");
        let a = random(&mut g, &[d, n]).map(|v| -(v.abs() * 2.0 + 0.01));
        let b_row = random(&mut g, &[1, n]);
        let c_row = random(&mut g, &[1, n]);
        let dt_row = random(&mut g, &[1, d]).map(|v| v.abs() * 0.5 + 0.01);
        let b = Tensor::new(vec![l, n], b_row.data().repeat(l)).unwrap();
        let c = Tensor::new(vec![l, n], c_row.data().repeat(l)).unwrap();
        let delta = Tensor::new(vec![l, d], dt_row.data().repeat(l)).unwrap();
        let x = random(&mut g, &[l, d]);
        let ds = random(&mut g, &[d]);
        let (ab, bb) = ssm::discretize(&a, &b, &delta, Discretization::Zoh).unwrap();
        let y1 = ssm::scan_sequential(&ab, &bb, &c, &x, Some(&ds)).unwrap();
        let y2 = ssm::apply_scan_kernel(&ssm::scan_kernel(&ab, &bb, &c).unwrap(), &x, Some(&ds)).unwrap();
        let scale = y1.data().iter().fold(1e-12f64, |m, v| m.max(v.abs()));
        prop_assert!(y1.max_abs_diff(&y2) / scale <= 1e-8);
    }

    #[test]
    fn stable_scan_output_is_bounded(seed in any::<u64>(), l in 1usize..64, n in 1usize..5) {
        let mut g = stream_rng(seed, "bound");
        let a = random(&mut g, &[1, n]).map(|v| -(v.abs() + 0.05));
        let b = random(&mut g, &[l, n]);
        let c = random(&mut g, &[l, n]);
        let delta = random(&mut g, &[l, 1]).map(|v| v.abs() + 0.01);
        let x = random(&mut g, &[l, 1]);
        let (ab, bb) = ssm::discretize(&a, &b, &delta, Discretization::Zoh).unwrap();
        let y = ssm::scan_sequential(&ab, &bb, &c, &x, None).unwrap();
        // |h_t[s]| ≤ max_t |B̄_t[s]| / (1 − max_t Ā_t[s]) when |x| ≤ 1.
        let mut bound = 0.0;
        for s in 0..n {
            let amax = (0..l).map(|t| ab.data()[t * n + s]).fold(0.0f64, f64::max);
            let bmax = (0..l).map(|t| bb.data()[t * n + s].abs()).fold(0.0f64, f64::max);
            bound += bmax / (1.0 - amax);
        }
        for v in y.data() {
            prop_assert!(v.abs() <= bound + 1e-12);
        }
    }

    #[test]
    fn single_state_kernel_decays(a in 0.01f64..3.0, dt in 0.01f64..1.0, l in 2usize..40) {
        let a = Tensor::new(vec![1, 1], vec![-a]).unwrap();
        let (ab, bb) = ssm::discretize(&a, &Tensor::ones(&[l, 1]), &Tensor::full(&[l, 1], dt), Discretization::Zoh).unwrap();
        let k = ssm::scan_kernel(&ab, &bb, &Tensor::ones(&[l, 1])).unwrap();
        for j in 1..l {
            prop_assert!(k.data()[j].abs() < k.data()[j - 1].abs());
        }
    }

    #[test]
    fn vim_f_with_zero_alpha_is_vim(seed in any::<u64>(), cls in any::<bool>()) {
        let (fb, fs) = small_block(Variant::VimF, cls, 0.0);
        let (vb, vs) = small_block(Variant::Vim, cls, 0.0);
        let x = random(&mut stream_rng(seed, "x"), &[9 + usize::from(cls), 8]);
        let (yf, yv) = (run_block(&fb, &fs, &x), run_block(&vb, &vs, &x));
        prop_assert_eq!(yf.data(), yv.data());
    }

    #[test]
    fn conv_free_block_equals_impulse_conv_block(seed in any::<u64>()) {
        let (cf, cs) = small_block(Variant::VimFCf, false, 0.1);
        let (fb, mut fs) = small_block(Variant::VimF, false, 0.1);
        for dir in ["fwd", "bwd"] {
            let w = fs.tensor_mut(&format!("b.mixer.{dir}.conv1d.weight")).unwrap();
            let k = w.shape()[1];
            for (i, v) in w.data_mut().iter_mut().enumerate() {
                *v = if i % k == 0 { 1.0 } else { 0.0 };
            }
            fs.tensor_mut(&format!("b.mixer.{dir}.conv1d.bias")).unwrap().data_mut().fill(0.0);
        }
        let x = random(&mut stream_rng(seed, "x"), &[9, 8]);
        prop_assert!(run_block(&cf, &cs, &x).max_abs_diff(&run_block(&fb, &fs, &x)) <= 1e-12);
    }

    #[test]
    fn zeroed_output_projection_makes_block_identity(seed in any::<u64>()) {
        let (b, mut s) = small_block(Variant::Vim, true, 0.1);
        s.tensor_mut(&b.out_proj_name()).unwrap().data_mut().fill(0.0);
        let x = random(&mut stream_rng(seed, "x"), &[10, 8]);
        let y = run_block(&b, &s, &x);
        prop_assert_eq!(y.data(), x.data());
    }

    #[test]
    fn linear_attention_is_permutation_equivariant(seed in any::<u64>(), l in 2usize..10) {
        let mut g = stream_rng(seed, "perm");
        let (q, k, v) = (random(&mut g, &[l, 4]), random(&mut g, &[l, 4]), random(&mut g, &[l, 4]));
        let mut perm: Vec<usize> = (0..l).collect();
        perm.shuffle(&mut g);
        let permute = |t: &Tensor| {
            let rows: Vec<&[f64]> = perm.iter().map(|&i| &t.data()[i * 4..(i + 1) * 4]).collect();
            Tensor::from_rows(&rows)
        };
        let run = |q: &Tensor, k: &Tensor, v: &Tensor| {
            let tape = Tape::new();
            let y = linear_attention_core(&tape.constant(q.clone()), &tape.constant(k.clone()), &tape.constant(v.clone()), 2).unwrap();
            let out = y.value().clone();
            out
        };
        let lhs = run(&permute(&q), &permute(&k), &permute(&v));
        let rhs = permute(&run(&q, &k, &v));
        prop_assert!(lhs.max_abs_diff(&rhs) <= 1e-12);
    }

    #[test]
    fn determinism_of_build_and_forward(seed in 0u64..1000) {
        let mut cfg = ModelConfig::desk(Variant::VimF);
        cfg.image_size = 32;
        cfg.depth = 2;
        let (a, b) = (Model::build(&cfg, seed).unwrap(), Model::build(&cfg, seed).unwrap());
        prop_assert_eq!(&a.store, &b.store);
        let img = random(&mut stream_rng(seed, "img"), &[3, 32, 32]);
        let (la, lb) = (a.logits(&img).unwrap(), b.logits(&img).unwrap());
        prop_assert_eq!(la.data(), lb.data());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact(seed in any::<u64>(), variant in prop_oneof![Just(Variant::Vim), Just(Variant::VimF), Just(Variant::VimFH), Just(Variant::VimFCf)]) {
        let mut cfg = ModelConfig::desk(variant);
        cfg.image_size = 32;
        cfg.depth = 2;
        let m = Model::build(&cfg, seed).unwrap();
        let back = checkpoint::decode(&checkpoint::encode(&m)).unwrap().into_model().unwrap();
        prop_assert_eq!(&back.store, &m.store);
    }
}

#[test]
fn vim_block_is_not_permutation_equivariant() {
    let (b, s) = small_block(Variant::Vim, false, 0.1);
    let x = random(&mut stream_rng(3, "x"), &[9, 8]);
    let rev = x.reverse_rows().unwrap();
    let lhs = run_block(&b, &s, &rev);
    let rhs = run_block(&b, &s, &x).reverse_rows().unwrap();
    assert!(lhs.max_abs_diff(&rhs) > 1e-6);
}

#[test]
fn zero_proportion_model_is_pure_vim() {
    let mut f = ModelConfig::desk(Variant::VimF);
    f.image_size = 32;
    f.f_block_proportion = 0.0;
    let mut v = f.clone();
    v.variant = Variant::Vim;
    let (mf, mv) = (Model::build(&f, 8).unwrap(), Model::build(&v, 8).unwrap());
    assert_eq!(mf.store, mv.store);
    assert!(mf.blocks().all(|b| b.cfg.variant == Variant::Vim));
    let img = random(&mut stream_rng(1, "img"), &[3, 32, 32]);
    assert_eq!(mf.logits(&img).unwrap().data(), mv.logits(&img).unwrap().data());
}

#[test]
fn f_block_counts_for_ablation_proportions() {
    let mut cfg = ModelConfig::tiny(Variant::VimF);
    for (p, want) in [(0.0, 0), (0.25, 6), (0.5, 12), (1.0, 24)] {
        cfg.f_block_proportion = p;
        assert_eq!(cfg.num_f_blocks(), want);
    }
}
