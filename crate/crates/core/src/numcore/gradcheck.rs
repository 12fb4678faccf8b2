//! Central finite-difference verification of analytic gradients.

use super::{Graph, ParamGrads, ParamId, ParamStore, Tensor, TensorError, Var};

/// Default perturbation for central differences.
pub const FD_STEP: f64 = 1e-5;

/// Magnitude below which errors are measured absolutely rather than
/// relatively. Without a floor, gradients that are zero up to rounding
/// would report huge relative errors.
pub const REL_FLOOR: f64 = 1e-3;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// (input or parameter index, flat element index) of the worst entry.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
}

impl GradCheckReport {
    fn new() -> Self {
        Self { max_rel_err: 0.0, worst: None, checked: 0 }
    }

    fn record(&mut self, which: usize, elem: usize, analytic: f64, numeric: f64) {
        let err = relative_error(analytic, numeric);
        self.checked += 1;
        if err > self.max_rel_err || self.worst.is_none() {
            self.max_rel_err = self.max_rel_err.max(err);
            self.worst = Some((which, elem));
        }
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Checks d(loss)/d(inputs) for a graph rebuilt from scratch by `build` on
/// every evaluation. `build` must be deterministic.
pub fn check_inputs<F>(inputs: &[Tensor], step: f64, build: F) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Graph<'_>, &[Var]) -> Result<Var, TensorError>,
{
    check_inputs_with_dropout(inputs, step, None, build)
}

/// Like [`check_inputs`], with every graph in training mode under the same
/// dropout seed so each evaluation replays identical masks.
pub fn check_inputs_with_dropout<F>(
    inputs: &[Tensor],
    step: f64,
    dropout_seed: Option<u64>,
    build: F,
) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Graph<'_>, &[Var]) -> Result<Var, TensorError>,
{
    let fresh = || match dropout_seed {
        Some(seed) => Graph::new().train_mode(seed),
        None => Graph::new(),
    };
    let eval = |ts: &[Tensor]| -> Result<f64, TensorError> {
        let mut g = fresh();
        let vars: Vec<Var> = ts.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let loss = build(&mut g, &vars)?;
        Ok(g.value(loss).item())
    };

    let mut g = fresh();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let loss = build(&mut g, &vars)?;
    let grads = g.backward(loss)?;

    let mut report = GradCheckReport::new();
    let mut work = inputs.to_vec();
    for (which, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(*v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[which].shape()));
        for elem in 0..inputs[which].len() {
            let orig = inputs[which].data()[elem];
            work[which].data_mut()[elem] = orig + step;
            let plus = eval(&work)?;
            work[which].data_mut()[elem] = orig - step;
            let minus = eval(&work)?;
            work[which].data_mut()[elem] = orig;
            report.record(which, elem, analytic.data()[elem], (plus - minus) / (2.0 * step));
        }
    }
    Ok(report)
}

/// Checks parameter gradients of an arbitrary loss evaluated against a
/// store. At most `max_per_param` evenly spaced entries of each parameter
/// are perturbed.
pub fn check_params<E, F>(
    store: &ParamStore,
    ids: &[ParamId],
    max_per_param: usize,
    step: f64,
    loss: F,
) -> Result<GradCheckReport, E>
where
    F: Fn(&ParamStore) -> Result<(f64, ParamGrads), E>,
{
    let (_, grads) = loss(store)?;
    let mut work = store.clone();
    let mut report = GradCheckReport::new();
    for &id in ids {
        if !store.is_trainable(id) {
            continue;
        }
        let n = store.get(id).len();
        let stride = n.div_ceil(max_per_param.max(1)).max(1);
        for elem in (0..n).step_by(stride) {
            let analytic = grads.get(id).map_or(0.0, |g| g.data()[elem]);
            let orig = store.get(id).data()[elem];
            work.get_mut(id).data_mut()[elem] = orig + step;
            let (plus, _) = loss(&work)?;
            work.get_mut(id).data_mut()[elem] = orig - step;
            let (minus, _) = loss(&work)?;
            work.get_mut(id).data_mut()[elem] = orig;
            report.record(id.index(), elem, analytic, (plus - minus) / (2.0 * step));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_a_wrong_gradient() {
        let x = Tensor::vector(vec![0.3, -1.2, 2.0]).unwrap();
        let report = check_inputs(std::slice::from_ref(&x), FD_STEP, |g, v| {
            let sq = g.mul(v[0], v[0])?;
            g.sum(sq)
        })
        .unwrap();
        assert!(report.passes(1e-7), "{report:?}");

        // relu evaluated exactly at its kink has a one-sided analytic
        // gradient; central differences disagree.
        let z = Tensor::vector(vec![0.0]).unwrap();
        let report = check_inputs(&[z], FD_STEP, |g, v| {
            let r = g.relu(v[0])?;
            g.sum(r)
        })
        .unwrap();
        assert!(!report.passes(1e-3));
    }
}
