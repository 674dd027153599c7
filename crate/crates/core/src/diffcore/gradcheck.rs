use super::{Graph, NodeId, Tensor};
use crate::error::Result;

/// Relative error used by the gradient checks: gradients smaller than `floor`
/// in both estimates are compared absolutely against `floor`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Compares analytic gradients from `Graph::backward` against central finite
/// differences with step `h`, perturbing every entry of every parameter.
/// `build` must register the given parameters (in order) via `Graph::param`
/// and return a scalar loss node. Returns the max relative error.
pub fn check_gradients<F>(params: &[(String, Tensor)], h: f64, build: F) -> Result<f64>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let eval = |ps: &[(String, Tensor)]| -> Result<(Graph, NodeId)> {
        let mut g = Graph::new();
        let ids = ps.iter().map(|(n, t)| g.param(n, t.clone())).collect::<Result<Vec<_>>>()?;
        let loss = build(&mut g, &ids)?;
        Ok((g, loss))
    };
    let (g, loss) = eval(params)?;
    let analytic = g.backward(loss)?;
    let mut worst: f64 = 0.0;
    let mut work = params.to_vec();
    for (pi, (name, _)) in params.iter().enumerate() {
        let ga = analytic.get(name).expect("parameter registered").data().to_vec();
        for (k, &gak) in ga.iter().enumerate() {
            let orig = work[pi].1.data()[k];
            work[pi].1.data_mut()[k] = orig + h;
            let (gp, lp) = eval(&work)?;
            work[pi].1.data_mut()[k] = orig - h;
            let (gm, lm) = eval(&work)?;
            work[pi].1.data_mut()[k] = orig;
            let numeric = (gp.value(lp).item() - gm.value(lm).item()) / (2.0 * h);
            worst = worst.max(rel_err(gak, numeric, 1e-4));
        }
    }
    Ok(worst)
}
