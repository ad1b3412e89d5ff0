use super::{Result, Tensor, TensorError};

/// Largest relative disagreement between the reverse-mode gradient of `f`
/// at `x` and central differences with step `eps`, over all coordinates.
///
/// The error for a coordinate is `|analytic - numeric| / max(1, |analytic|)`.
/// `x` is re-created as a differentiable leaf, so any tensor may be passed.
pub fn finite_diff_check<F>(f: F, x: &Tensor, eps: f32) -> Result<f32>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let coords: Vec<usize> = (0..x.len()).collect();
    finite_diff_check_coords(f, x, eps, &coords)
}

/// [`finite_diff_check`] restricted to a subset of flat coordinates.
pub fn finite_diff_check_coords<F>(f: F, x: &Tensor, eps: f32, coords: &[usize]) -> Result<f32>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    if !(eps > 0.0) {
        return Err(super::invalid("finite_diff_check", "eps must be positive"));
    }
    let leaf = x.to_leaf(true);
    let first = f(&leaf)?;
    let second = f(&leaf)?;
    if first
        .data()
        .iter()
        .map(|v| v.to_bits())
        .ne(second.data().iter().map(|v| v.to_bits()))
    {
        return Err(TensorError::NonDeterministic);
    }
    let grads = first.backward()?;
    let zeros = vec![0.0; x.len()];
    let analytic = grads.get(&leaf).unwrap_or(&zeros);
    let base = x.data().to_vec();
    let mut worst = 0.0f32;
    for &i in coords {
        let eval = |delta: f32| -> Result<f64> {
            let mut shifted = base.clone();
            shifted[i] += delta;
            let probe = Tensor::new(shifted, x.shape(), false)?;
            Ok(f(&probe)?.item() as f64)
        };
        let numeric = (eval(eps)? - eval(-eps)?) / (2.0 * eps as f64);
        let a = analytic[i] as f64;
        let err = ((a - numeric).abs() / a.abs().max(1.0)) as f32;
        worst = worst.max(err);
    }
    Ok(worst)
}
