use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tensor::Real;

/// Outcome of comparing analytic gradients against central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_coordinate: Option<usize>,
    pub tolerance: f64,
    pub passed: bool,
}

/// Relative error with an absolute floor so that tiny gradients do not
/// blow the ratio up.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(1e-6);
    (analytic - numeric).abs() / scale
}

/// Checks `analytic` (the gradient of `loss` at `params`) against central
/// differences at `samples` coordinates drawn without replacement.
///
/// `loss` is re-evaluated on perturbed copies of `params`.
pub fn grad_check<T: Real>(
    params: &[T],
    analytic: &[T],
    mut loss: impl FnMut(&[T]) -> f64,
    eps: f64,
    tol: f64,
    samples: usize,
    seed: u64,
) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = params.len();
    let coords: Vec<usize> = if samples >= n {
        (0..n).collect()
    } else {
        let mut c = sample(&mut rng, n, samples).into_vec();
        c.sort_unstable();
        c
    };
    let mut work = params.to_vec();
    let mut max_rel = 0.0f64;
    let mut worst = None;
    for &i in &coords {
        let orig = work[i];
        work[i] = T::from_f64_lossy(orig.as_f64() + eps);
        let up = loss(&work);
        work[i] = T::from_f64_lossy(orig.as_f64() - eps);
        let down = loss(&work);
        work[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let err = relative_error(analytic[i].as_f64(), numeric);
        if err > max_rel || worst.is_none() {
            max_rel = max_rel.max(err);
            worst = Some(i);
        }
    }
    GradCheckReport {
        checked: coords.len(),
        max_rel_error: max_rel,
        worst_coordinate: worst,
        tolerance: tol,
        passed: max_rel < tol,
    }
}
