use super::{Graph, NodeId, NumError, Tensor};

/// Compares reverse-mode gradients with central finite differences.
///
/// `build` receives a fresh graph and the node ids of `params` (registered as
/// trainable leaves, in order) and must return the node of a scalar objective.
/// Returns the maximum over all parameter entries of
/// `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
pub fn grad_check<F, E>(build: F, params: &[Tensor], eps: f64) -> Result<f64, E>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId, E>,
    E: From<NumError>,
{
    if !(eps > 0.0) {
        return Err(NumError::InvalidArgument(format!("finite-difference step must be positive, got {eps}")).into());
    }
    let evaluate = |values: &[Tensor]| -> Result<(Graph, Vec<NodeId>, NodeId), E> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = values.iter().map(|v| g.param(v.clone())).collect();
        let out = build(&mut g, &ids)?;
        let v = g.value(out).item().ok_or_else(|| NumError::NonScalarLoss(g.value(out).shape().to_vec()))?;
        if !v.is_finite() {
            return Err(NumError::NonFinite(format!("objective evaluated to {v}")).into());
        }
        Ok((g, ids, out))
    };
    let scalar = |values: &[Tensor]| -> Result<f64, E> {
        let (g, _, out) = evaluate(values)?;
        Ok(g.value(out).data()[0])
    };

    let (g, ids, out) = evaluate(params)?;
    let grads = g.backward(out)?;
    let mut worst = 0.0_f64;
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, id) in ids.iter().enumerate() {
        let analytic = grads.get(*id).expect("every param has a gradient");
        for e in 0..params[pi].len() {
            let orig = params[pi].data()[e];
            work[pi].data_mut()[e] = orig + eps;
            let plus = scalar(&work)?;
            work[pi].data_mut()[e] = orig - eps;
            let minus = scalar(&work)?;
            work[pi].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.data()[e];
            let err = (a - numeric).abs() / 1.0_f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
