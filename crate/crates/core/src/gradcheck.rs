//! Central finite-difference gradient checking.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::optim::ParamSet;

/// Coordinates sampled per parameter tensor.
pub const MAX_COORDS_PER_TENSOR: usize = 64;

/// Denominator floor for the relative error, so exact-zero gradients do not
/// divide by zero.
const REL_FLOOR: f64 = 1e-6;

/// One evaluation of a model's loss.
///
/// `fingerprint` summarizes every piecewise decision taken in the forward
/// pass (ReLU masks, pooling winners). A perturbation that changes it has
/// crossed a kink, where a finite difference is not a valid gradient oracle.
/// Smooth models return a constant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub fingerprint: u64,
}

impl Evaluation {
    pub fn smooth(loss: f64) -> Self {
        Evaluation {
            loss,
            fingerprint: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (parameter name, flat index) of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    /// Coordinates whose ±eps evaluations crossed a kink.
    pub skipped_kinks: usize,
}

/// Compare analytic gradients against `(f(p+eps) - f(p-eps)) / (2 eps)`.
///
/// `eval` must compute the loss at the current parameter values and write
/// the analytic gradient into the parameters' `grad` buffers. Up to
/// [`MAX_COORDS_PER_TENSOR`] coordinates per tensor are drawn with a fixed
/// seed. The relative error of a coordinate is `|analytic - numeric| /
/// max(|numeric|, 1e-6)`.
pub fn grad_check<F>(
    mut eval: F,
    params: &mut ParamSet,
    eps: f64,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut ParamSet) -> Result<Evaluation>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::invalid(format!("eps {eps} outside [1e-7, 1e-3]")));
    }

    params.zero_grads();
    let base = eval(params)?;
    let analytic: Vec<Vec<f64>> = params.iter().map(|p| p.grad.data().to_vec()).collect();

    params.zero_grads();
    let again = eval(params)?;
    let grads_agree = params
        .iter()
        .zip(&analytic)
        .all(|(p, a)| p.grad.data() == a.as_slice());
    if again.loss.to_bits() != base.loss.to_bits()
        || again.fingerprint != base.fingerprint
        || !grads_agree
    {
        return Err(Error::ContractViolation(format!(
            "closure is not deterministic: loss {} then {}",
            base.loss, again.loss
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        skipped_kinks: 0,
    };

    for pi in 0..params.len() {
        let len = params.param(pi).value.len();
        let coords: Vec<usize> = if len <= MAX_COORDS_PER_TENSOR {
            (0..len).collect()
        } else {
            let mut v = index::sample(&mut rng, len, MAX_COORDS_PER_TENSOR).into_vec();
            v.sort_unstable();
            v
        };
        for c in coords {
            let orig = params.param(pi).value.data()[c];
            params.param_mut(pi).value.data_mut()[c] = orig + eps;
            let plus = eval(params)?;
            params.param_mut(pi).value.data_mut()[c] = orig - eps;
            let minus = eval(params)?;
            params.param_mut(pi).value.data_mut()[c] = orig;

            if plus.fingerprint != base.fingerprint || minus.fingerprint != base.fingerprint {
                report.skipped_kinks += 1;
                continue;
            }
            let numeric = (plus.loss - minus.loss) / (2.0 * eps);
            let a = analytic[pi][c];
            let rel = (a - numeric).abs() / numeric.abs().max(REL_FLOOR);
            report.checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some((params.param(pi).name.clone(), c));
            }
        }
    }
    params.zero_grads();
    Ok(report)
}
