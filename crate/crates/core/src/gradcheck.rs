//! Central finite-difference checks of tape gradients.

use rand::seq::index::sample;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::stream_rng;
use crate::tensor::Tensor;

/// Magnitude floor of the relative-error denominator. Gradient entries
/// smaller than this are compared in absolute terms, where central
/// differences cannot resolve a relative error anyway.
pub const REL_ERR_FLOOR: f64 = 1e-4;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tol: f64,
    /// Check at most this many randomly chosen coordinates per input.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tol: 1e-4,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// `(input index, flat element index)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tol
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Checks `∂f/∂x` for a scalar-valued `f` of one tensor.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&Var) -> Result<Var>,
{
    let opts = GradCheckOptions {
        step,
        tol,
        ..Default::default()
    };
    grad_check_many(|vs| f(&vs[0]), std::slice::from_ref(x), &opts)
}

fn eval<F>(f: &F, inputs: &[Tensor], requires_grad: bool) -> Result<(Tape, Vec<Var>, Var)>
where
    F: Fn(&[Var]) -> Result<Var>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), requires_grad)).collect();
    let out = f(&vars)?;
    let v = out.value();
    if v.len() != 1 {
        return Err(Error::NonScalarLoss(v.shape().to_vec()));
    }
    if !v.data()[0].is_finite() {
        return Err(Error::NonFinite("function value in grad_check".into()));
    }
    drop(v);
    Ok((tape, vars, out))
}

/// Checks the gradient of a scalar `f` w.r.t. every input tensor.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&[Var]) -> Result<Var>,
{
    let (tape, vars, out) = eval(&f, inputs, true)?;
    let grads = tape.backward(&out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|v| grads.get_or_zeros(v)).collect();
    drop((grads, out, vars, tape));

    let mut rng = stream_rng(opts.seed, "grad_check");
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst: None,
        checked: 0,
        tol: opts.tol,
    };
    let mut probe = inputs.to_vec();
    for (which, x) in inputs.iter().enumerate() {
        let coords: Vec<usize> = match opts.max_coords {
            Some(m) if m < x.len() => sample(&mut rng, x.len(), m).into_vec(),
            _ => (0..x.len()).collect(),
        };
        for i in coords {
            let orig = x.data()[i];
            probe[which].data_mut()[i] = orig + opts.step;
            let fp = eval(&f, &probe, false)?.2.value().data()[0];
            probe[which].data_mut()[i] = orig - opts.step;
            let fm = eval(&f, &probe, false)?.2.value().data()[0];
            probe[which].data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * opts.step);
            let a = analytic[which].data()[i];
            let rel = rel_err(a, numeric);
            report.max_abs_err = report.max_abs_err.max((a - numeric).abs());
            if rel > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(rel);
                report.worst = Some((which, i));
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff as ad;

    #[test]
    fn sum_of_squares_is_exact() {
        let x = Tensor::from_vec(vec![0.5, -1.5, 2.0, 3.25]);
        let r = grad_check(|v| Ok(ad::sum(&ad::mul(v, v)?)), &x, 1e-5, 1e-10).unwrap();
        assert!(r.passed(), "{r:?}");
        assert_eq!(r.checked, 4);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // d/dx of exp(x) is checked against a function whose tape is fine but
        // whose value is perturbed by a non-recorded term.
        let x = Tensor::from_vec(vec![0.3, 0.7]);
        let r = grad_check(
            |v| {
                let extra = v.value().data()[0].powi(3);
                Ok(ad::add_scalar(&ad::sum(&ad::exp(v)), extra))
            },
            &x,
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(!r.passed());
    }

    #[test]
    fn non_finite_value_is_an_error() {
        let x = Tensor::from_vec(vec![1.0]);
        let r = grad_check(|v| Ok(ad::sum(&ad::scale(v, f64::INFINITY))), &x, 1e-5, 1e-6);
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }
}
