use super::{Graph, Tensor, Var};
use crate::error::Result;

/// Max relative error between backward and central differences over every
/// coordinate of `x`: `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
///
/// `f` builds a scalar from the leaf it is handed; it is re-run on fresh
/// graphs for each perturbation.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..x.len()).collect();
    grad_check_coords(f, x, step, &coords)
}

/// [`grad_check`] restricted to the listed flat coordinates.
pub fn grad_check_coords<F>(f: F, x: &Tensor, step: f64, coords: &[usize]) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if step <= 0.0 {
        return Err(crate::Error::Usage(format!("grad_check step must be > 0, got {step}")));
    }
    let mut g = Graph::new();
    let leaf = g.param(x.clone());
    let out = f(&mut g, leaf)?;
    g.backward(out)?;
    let analytic = g.grad(leaf).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.len()]);

    let eval = |v: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let leaf = g.param(v.clone());
        let out = f(&mut g, leaf)?;
        Ok(g.scalar(out))
    };

    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for &i in coords {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = eval(&probe)?;
        probe.data_mut()[i] = orig - step;
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        let a = analytic[i];
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}
