//! Central finite-difference verification of graph gradients.

use crate::error::{Error, Result};

use super::{Graph, Tensor, Var};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// max over coordinates of |g_ad − g_fd| / max(|g_ad|, |g_fd|, 1e-8)
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

fn eval_scalar<F>(f: &F, x: &Tensor) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let out = f(&mut g, xv)?;
    let value = g.value(out);
    if value.numel() != 1 {
        return Err(Error::Contract(format!(
            "grad_check function must return a scalar, got {:?}",
            value.shape()
        )));
    }
    Ok(value.item())
}

/// Central differences `(f(x+eps·e_i) − f(x−eps·e_i)) / 2eps` for every coordinate.
pub fn finite_difference<F>(f: &F, x: &Tensor, eps: f64) -> Result<Vec<f64>>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let all: Vec<usize> = (0..x.numel()).collect();
    finite_difference_at(f, x, eps, &all)
}

/// Central differences at the listed coordinates only.
pub fn finite_difference_at<F>(f: &F, x: &Tensor, eps: f64, coords: &[usize]) -> Result<Vec<f64>>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(coords.len());
    for &i in coords {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = eval_scalar(f, &probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = eval_scalar(f, &probe)?;
        probe.data_mut()[i] = orig;
        out.push((plus - minus) / (2.0 * eps));
    }
    Ok(out)
}

/// Compares the reverse-mode gradient of the scalar function `f` at `x`
/// against central finite differences.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let all: Vec<usize> = (0..x.numel()).collect();
    grad_check_at(f, x, eps, &all)
}

/// [`grad_check`] restricted to `coords`; `analytic`, `numeric` and
/// `worst_index` refer to positions in that list.
pub fn grad_check_at<F>(f: F, x: &Tensor, eps: f64, coords: &[usize]) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if let Some(&bad) = coords.iter().find(|&&i| i >= x.numel()) {
        return Err(Error::Contract(format!(
            "coordinate {bad} outside {} values",
            x.numel()
        )));
    }
    let mut g = Graph::new();
    let xv = g.param(x.clone());
    let out = f(&mut g, xv)?;
    let grads = g.backward(out)?;
    let analytic = match grads.get(xv) {
        Some(t) => coords.iter().map(|&i| t.data()[i]).collect(),
        None => vec![0.0; coords.len()],
    };
    let numeric = finite_difference_at(&f, x, eps, coords)?;

    let mut max_rel_err = 0.0;
    let mut worst_index = 0;
    for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        let err = (a - n).abs() / a.abs().max(n.abs()).max(1e-8);
        if err > max_rel_err {
            max_rel_err = err;
            worst_index = i;
        }
    }
    Ok(GradCheckReport {
        max_rel_err,
        worst_index,
        analytic,
        numeric,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_sum_is_exact() {
        let x = Tensor::from_fn(&[7], |i| i as f64 * 0.3 - 1.0);
        let r = grad_check(|g, x| Ok(g.sum(x)), &x, 1e-5).unwrap();
        assert!(r.max_rel_err < 1e-10, "{}", r.max_rel_err);
    }

    #[test]
    fn sigmoid_sum_at_zero_has_quarter_slope() {
        let x = Tensor::zeros(&[5]);
        let r = grad_check(
            |g, x| {
                let s = g.sigmoid(x);
                Ok(g.sum(s))
            },
            &x,
            1e-5,
        )
        .unwrap();
        for (a, n) in r.analytic.iter().zip(&r.numeric) {
            assert!((a - 0.25).abs() < 1e-15);
            assert!((n - 0.25).abs() < 1e-8);
        }
    }

    #[test]
    fn non_scalar_output_is_rejected() {
        let x = Tensor::ones(&[3]);
        assert!(grad_check(|g, x| Ok(g.scale(x, 2.0)), &x, 1e-5).is_err());
    }
}
