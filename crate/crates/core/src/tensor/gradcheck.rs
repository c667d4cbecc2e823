use super::{Tensor, TensorError};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference half step.
    pub step: f64,
    /// Maximum tolerated relative error.
    pub tol: f64,
    /// Lower bound on the relative-error denominator; below it the
    /// comparison is effectively absolute.
    pub floor: f64,
    /// Probe at most this many evenly spaced entries per tensor.
    pub max_entries: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { step: 1e-5, tol: 1e-4, floor: 1e-4, max_entries: None }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    /// Entry index where the worst error occurred.
    pub worst_index: usize,
    pub passed: bool,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tol: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.passed)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / denom
}

/// Compares autodiff gradients of the scalar objective `f` against central
/// finite differences for every listed parameter.
///
/// `f` must rebuild its graph from the current parameter values on every
/// call; it is evaluated twice up front and the check aborts if the two
/// values differ bitwise.
pub fn finite_diff_check<F, E>(
    mut f: F,
    params: &[(String, Tensor)],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport, E>
where
    F: FnMut() -> Result<Tensor, E>,
    E: From<TensorError>,
{
    for (_, p) in params {
        p.zero_grad();
    }
    let loss = f()?;
    let base = loss.item();
    loss.backward()?;
    drop(loss);
    let again = f()?.item();
    if base.to_bits() != again.to_bits() {
        return Err(TensorError::NonDeterministic { first: base, second: again }.into());
    }

    let mut checks = Vec::with_capacity(params.len());
    for (name, p) in params {
        let analytic = p.grad().unwrap_or_else(|| vec![0.0; p.numel()]);
        let n = p.numel();
        let indices: Vec<usize> = match opts.max_entries {
            Some(k) if k < n => (0..k).map(|i| i * n / k).collect(),
            _ => (0..n).collect(),
        };
        let mut worst = (0.0f64, 0usize);
        for &i in &indices {
            let orig = p.data()[i];
            p.data_mut()[i] = orig + opts.step;
            let plus = f()?.item();
            p.data_mut()[i] = orig - opts.step;
            let minus = f()?.item();
            p.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let err = relative_error(analytic[i], numeric, opts.floor);
            if err > worst.0 || err.is_nan() {
                worst = (err, i);
            }
        }
        checks.push(ParamCheck {
            name: name.clone(),
            checked: indices.len(),
            max_rel_err: worst.0,
            worst_index: worst.1,
            passed: worst.0 < opts.tol,
        });
    }
    for (_, p) in params {
        p.zero_grad();
    }
    Ok(GradCheckReport { tol: opts.tol, params: checks })
}
