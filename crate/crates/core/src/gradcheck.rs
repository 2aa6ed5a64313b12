//! Central finite-difference gradient verification.

use crate::error::{Error, Result};
use crate::tensor::{no_grad, Tensor};

/// Default perturbation for central differences.
pub const DEFAULT_EPS: f64 = 1e-5;

/// Denominator floor of [`relative_error`], per unit of `max(1, |f|)`.
/// Below it gradients are compared absolutely; central differences at
/// `eps = 1e-5` carry roughly `1e-16 * |f| / eps` of rounding noise, which
/// would otherwise dominate structurally zero entries such as attention key
/// biases.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// Max over coordinates of [`relative_error`].
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

impl GradCheck {
    fn empty() -> Self {
        GradCheck {
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
            checked: 0,
        }
    }

    fn observe(&mut self, index: usize, analytic: f64, numeric: f64, f_scale: f64) {
        let err = scaled_relative_error(analytic, numeric, f_scale);
        if err > self.max_rel_error || self.checked == 0 {
            self.max_rel_error = err;
            self.worst_index = index;
            self.analytic = analytic;
            self.numeric = numeric;
        }
        self.checked += 1;
    }
}

/// `|a - n| / max(REL_ERROR_FLOOR, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    scaled_relative_error(analytic, numeric, 1.0)
}

/// [`relative_error`] with the floor multiplied by `max(1, |f_value|)`.
pub fn scaled_relative_error(analytic: f64, numeric: f64, f_value: f64) -> f64 {
    let floor = REL_ERROR_FLOOR * f_value.abs().max(1.0);
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(floor)
}

fn scalar_value(t: &Tensor) -> Result<f64> {
    if t.numel() != 1 {
        return Err(Error::contract(format!(
            "gradient check needs a scalar function, got shape {:?}",
            t.shape()
        )));
    }
    Ok(t.item())
}

/// Compares the backward-pass gradient of `f` at `x` with central differences.
pub fn finite_diff_check(
    f: impl Fn(&Tensor) -> Result<Tensor>,
    x: &Tensor,
    eps: f64,
) -> Result<GradCheck> {
    let base = x.to_vec();
    let leaf = Tensor::leaf(base.clone(), x.shape())?;
    let y = f(&leaf)?;
    let f0 = scalar_value(&y)?;
    y.backward()?;
    let analytic = leaf.grad().unwrap_or_else(|| vec![0.0; base.len()]);

    let mut report = GradCheck::empty();
    no_grad(|| -> Result<()> {
        for i in 0..base.len() {
            let mut plus = base.clone();
            plus[i] += eps;
            let mut minus = base.clone();
            minus[i] -= eps;
            let fp = scalar_value(&f(&Tensor::new(plus, x.shape())?)?)?;
            let fm = scalar_value(&f(&Tensor::new(minus, x.shape())?)?)?;
            report.observe(i, analytic[i], (fp - fm) / (2.0 * eps), f0);
        }
        Ok(())
    })?;
    Ok(report)
}

/// Checks every element of the given leaf tensors against central
/// differences of `loss`, perturbing the leaves in place.
pub fn check_leaves(
    leaves: &[(String, Tensor)],
    mut loss: impl FnMut() -> Result<Tensor>,
    eps: f64,
) -> Result<Vec<(String, GradCheck)>> {
    for (_, t) in leaves {
        t.zero_grad();
    }
    let y = loss()?;
    let f0 = scalar_value(&y)?;
    y.backward()?;
    drop(y);

    let mut reports = Vec::with_capacity(leaves.len());
    for (name, t) in leaves {
        let analytic = t.grad().unwrap_or_else(|| vec![0.0; t.numel()]);
        let mut report = GradCheck::empty();
        for (i, a) in analytic.iter().enumerate() {
            let original = t.data()[i];
            t.update_data(|d| d[i] = original + eps);
            let fp = no_grad(|| loss().and_then(|v| scalar_value(&v)));
            t.update_data(|d| d[i] = original - eps);
            let fm = no_grad(|| loss().and_then(|v| scalar_value(&v)));
            t.update_data(|d| d[i] = original);
            report.observe(i, *a, (fp? - fm?) / (2.0 * eps), f0);
        }
        reports.push((name.clone(), report));
    }
    Ok(reports)
}
