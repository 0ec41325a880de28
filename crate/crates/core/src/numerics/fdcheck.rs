//! Central finite-difference verification of reverse-mode gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdReport {
    /// max over checked coordinates of |autodiff - fd| / max(1, |fd|).
    pub max_rel_error: f64,
    pub coords_checked: usize,
}

/// Samples up to `per_tensor` flat coordinates for each tensor, skipping
/// tensors without an analytic gradient (frozen parameters).
pub fn sample_coordinates(
    tensors: &[Tensor<f64>],
    analytic: &[Option<Tensor<f64>>],
    per_tensor: usize,
    seed: u64,
) -> Vec<(usize, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut coords = Vec::new();
    for (ti, t) in tensors.iter().enumerate() {
        if analytic[ti].is_none() {
            continue;
        }
        let len = t.len();
        if len <= per_tensor {
            coords.extend((0..len).map(|i| (ti, i)));
        } else {
            for _ in 0..per_tensor {
                coords.push((ti, rng.gen_range(0..len)));
            }
        }
    }
    coords
}

/// Compares analytic gradients against central finite differences of `f` at
/// the given coordinates. `f` is re-evaluated twice per coordinate with one
/// entry perturbed by ±h; tensors must be f64 for the differences to resolve.
pub fn finite_difference_check(
    mut f: impl FnMut(&[Tensor<f64>]) -> f64,
    tensors: &[Tensor<f64>],
    analytic: &[Option<Tensor<f64>>],
    h: f64,
    coords: &[(usize, usize)],
) -> FdReport {
    assert_eq!(tensors.len(), analytic.len());
    let mut work: Vec<Tensor<f64>> = tensors.to_vec();
    let mut max_rel_error: f64 = 0.0;

    for &(ti, i) in coords {
        let Some(grad) = &analytic[ti] else { continue };
        let original = work[ti].data()[i];

        work[ti].data_mut()[i] = original + h;
        let plus = f(&work);
        work[ti].data_mut()[i] = original - h;
        let minus = f(&work);
        work[ti].data_mut()[i] = original;

        let fd = (plus - minus) / (2.0 * h);
        let ad = grad.data()[i];
        let rel = (ad - fd).abs() / fd.abs().max(1.0);
        if rel > max_rel_error {
            max_rel_error = rel;
        }
    }

    FdReport { max_rel_error, coords_checked: coords.len() }
}
