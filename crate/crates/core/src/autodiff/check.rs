use super::graph::{Graph, Var};
use super::tensor::ParamSet;
use crate::error::{Error, Result};

/// Compares reverse-mode gradients against central differences.
///
/// `build` receives a fresh graph and the bound parameter variables and must
/// return a scalar loss. The result is the largest
/// `|analytic - numeric| / max(1, |analytic|)` over every parameter entry.
pub fn finite_difference_check<F>(mut build: F, params: &mut ParamSet, eps: f64) -> Result<f64>
where
    F: FnMut(&mut Graph, &[Var]) -> Var,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::Usage(format!("eps must lie in (0, 1e-2], got {eps}")));
    }

    let mut g = Graph::new();
    let vars = g.bind(params, false);
    let loss = build(&mut g, &vars);
    let grads = g.backward(loss)?;
    grads.assign(params, &vars);

    let mut eval = |params: &ParamSet| -> Result<f64> {
        let mut g = Graph::new();
        let vars = g.bind(params, true);
        let loss = build(&mut g, &vars);
        g.check_finite()?;
        Ok(g.value(loss).item())
    };

    let mut worst = 0.0f64;
    for pi in 0..params.len() {
        if !params.get(pi).requires_grad {
            continue;
        }
        let analytic = params.get(pi).grad.clone().expect("assigned above");
        for j in 0..analytic.len() {
            let orig = params.get(pi).value.data()[j];
            params.get_mut(pi).value.data_mut()[j] = orig + eps;
            let plus = eval(params)?;
            params.get_mut(pi).value.data_mut()[j] = orig - eps;
            let minus = eval(params)?;
            params.get_mut(pi).value.data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let err = (analytic[j] - numeric).abs() / analytic[j].abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    #[test]
    fn linear_function_is_exact() {
        let mut ps = ParamSet::new();
        ps.push("w", Tensor::from_vec(vec![0.5, -1.5, 2.0]));
        let err = finite_difference_check(
            |g, v| {
                let c = g.constant(Tensor::from_vec(vec![3.0, 1.0, -2.0]));
                let y = g.mul(v[0], c);
                g.sum(y)
            },
            &mut ps,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn eps_out_of_range_is_rejected() {
        let mut ps = ParamSet::new();
        ps.push("w", Tensor::scalar(1.0));
        assert!(finite_difference_check(|g, v| g.sum(v[0]), &mut ps, 0.5).is_err());
    }
}
