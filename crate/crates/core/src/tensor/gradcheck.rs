//! Finite-difference verification of analytic gradients.
//!
//! Used by the test suites to hold every registered op to the same contract:
//! central differences with step 1e-5 must agree with backward to a relative
//! error below 1e-4 at double precision.

use super::Tensor;
use crate::error::Result;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;

/// Relative error with an absolute floor for near-zero gradients.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Compare analytic gradients of `f` against central finite differences at
/// the given leaf inputs. Returns a description of the first mismatch.
///
/// `f` must rebuild the computation from the leaves it is handed, so the
/// finite-difference probe can re-evaluate it with perturbed values.
pub fn check_gradients<F>(f: F, inputs: &[Tensor]) -> std::result::Result<(), String>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    check_gradients_with(f, inputs, FD_STEP, FD_TOLERANCE)
}

pub fn check_gradients_with<F>(
    f: F,
    inputs: &[Tensor],
    step: f64,
    tolerance: f64,
) -> std::result::Result<(), String>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let loss = f(inputs).map_err(|e| format!("forward failed: {e}"))?;
    let grads = loss
        .backward()
        .map_err(|e| format!("backward failed: {e}"))?;

    for (i, input) in inputs.iter().enumerate() {
        if !input.requires_grad() {
            continue;
        }
        let analytic = grads.wrt_or_zeros(input);
        for j in 0..input.numel() {
            let eval = |delta: f64| -> std::result::Result<f64, String> {
                let mut perturbed: Vec<Tensor> = inputs.to_vec();
                let mut values = input.values().to_vec();
                values[j] += delta;
                perturbed[i] = input
                    .with_values(values)
                    .map_err(|e| format!("perturb failed: {e}"))?;
                f(&perturbed)
                    .and_then(|t| t.scalar_value())
                    .map_err(|e| format!("probe eval failed: {e}"))
            };
            let plus = eval(step)?;
            let minus = eval(-step)?;
            let fd = (plus - minus) / (2.0 * step);
            let err = relative_error(analytic[j], fd);
            if err > tolerance {
                return Err(format!(
                    "input {i} element {j}: analytic {} vs finite-difference {} (rel err {:.3e})",
                    analytic[j], fd, err
                ));
            }
        }
    }
    Ok(())
}
