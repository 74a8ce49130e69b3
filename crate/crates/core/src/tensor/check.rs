//! Central finite-difference gradient checks.

use super::{Graph, Result, Tensor, Var};

/// `|a - n| / max(1e-12, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-12)
}

/// Maximum [`relative_error`] over paired slices.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}

/// Checks the gradient of the scalar function `f` at `x` against central
/// differences `(f(x + h e_i) - f(x - h e_i)) / 2h` on every coordinate and
/// returns the worst relative error.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    finite_diff_check_multi(
        |g: &mut Graph, vars: &[Var]| f(g, vars[0]),
        std::slice::from_ref(x),
        h,
        None,
    )
}

/// Multi-input variant. All inputs are recorded as gradient-carrying
/// leaves, one backward pass yields the analytic gradients, and each
/// checked coordinate is perturbed in turn. `coords` optionally restricts
/// the check to `(input, flat index)` pairs.
pub fn finite_diff_check_multi<F>(
    f: F,
    inputs: &[Tensor],
    h: f64,
    coords: Option<&[(usize, usize)]>,
) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    finite_diff_check_faulted(f, inputs, h, coords, None)
}

/// [`finite_diff_check_multi`] with the backward rule of op `fault`
/// corrupted in the analytic pass (see [`Graph::inject_fault`]).
pub fn finite_diff_check_faulted<F>(
    f: F,
    inputs: &[Tensor],
    h: f64,
    coords: Option<&[(usize, usize)]>,
    fault: Option<&str>,
) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    if let Some(op) = fault {
        g.inject_fault(op);
    }
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        g.value(out).item()
    };

    let all: Vec<(usize, usize)>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = inputs
                .iter()
                .enumerate()
                .flat_map(|(i, t)| (0..t.len()).map(move |j| (i, j)))
                .collect();
            &all
        }
    };

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut worst: f64 = 0.0;
    for &(i, j) in coords {
        let orig = work[i].data()[j];
        work[i].data_mut()[j] = orig + h;
        let fp = eval(&work)?;
        work[i].data_mut()[j] = orig - h;
        let fm = eval(&work)?;
        work[i].data_mut()[j] = orig;
        let numeric = (fp - fm) / (2.0 * h);
        worst = worst.max(relative_error(analytic[i].data()[j], numeric));
    }
    Ok(worst)
}
