use crate::error::{Error, Result};

use super::{ParamStore, Tape, Tensor, Var};

/// Gradients smaller than this are compared in absolute terms.
const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Input (or parameter) index and flat element of the worst entry.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

impl GradCheckReport {
    fn new() -> Self {
        Self {
            max_rel_error: 0.0,
            worst: (0, 0),
            analytic: 0.0,
            numeric: 0.0,
            checked: 0,
        }
    }

    fn record(&mut self, input: usize, index: usize, analytic: f64, numeric: f64) {
        let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR);
        self.checked += 1;
        if err > self.max_rel_error || self.checked == 1 {
            self.max_rel_error = err;
            self.worst = (input, index);
            self.analytic = analytic;
            self.numeric = numeric;
        }
    }
}

fn finite_scalar(tape: &Tape, out: Var) -> Result<f64> {
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(Error::shape("grad_check", format!("output has {} values", v.len())));
    }
    if !v[0].is_finite() {
        return Err(Error::NonFinite("grad_check output".into()));
    }
    Ok(v[0])
}

/// Compares tape gradients of the scalar `f(inputs)` against central
/// differences with step `eps`.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let out = f(&mut tape, &vars)?;
        finite_scalar(&tape, out)
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let out = f(&mut tape, &vars)?;
    finite_scalar(&tape, out)?;
    let grads = tape.backward(out)?;
    let mut report = GradCheckReport::new();
    let mut work = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[i].len()]);
        for j in 0..inputs[i].len() {
            let x0 = work[i].data[j];
            work[i].data[j] = x0 + eps;
            let fp = eval(&work)?;
            work[i].data[j] = x0 - eps;
            let fm = eval(&work)?;
            work[i].data[j] = x0;
            report.record(i, j, analytic[j], (fp - fm) / (2.0 * eps));
        }
    }
    Ok(report)
}

/// Same check over the trainable parameters of `store`, visiting at most
/// `max_per_param` evenly spaced entries of each parameter.
pub fn grad_check_params<F>(
    f: F,
    store: &ParamStore,
    eps: f64,
    max_per_param: usize,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = f(&mut tape, store)?;
    finite_scalar(&tape, out)?;
    let grads = tape.backward(out)?.for_params(&tape, store);
    let mut report = GradCheckReport::new();
    let mut work = store.clone();
    for (i, id) in store.ids().enumerate() {
        if !store.get(id).trainable {
            continue;
        }
        let n = store.get(id).tensor.len();
        let stride = n.div_ceil(max_per_param.max(1)).max(1);
        for j in (0..n).step_by(stride) {
            let x0 = store.get(id).tensor.data[j];
            let mut eval = |x: f64| -> Result<f64> {
                work.get_mut(id).tensor.data[j] = x;
                let mut t = Tape::new();
                let o = f(&mut t, &work)?;
                finite_scalar(&t, o)
            };
            let fp = eval(x0 + eps)?;
            let fm = eval(x0 - eps)?;
            work.get_mut(id).tensor.data[j] = x0;
            let analytic = grads[i].as_ref().map_or(0.0, |g| g[j]);
            report.record(i, j, analytic, (fp - fm) / (2.0 * eps));
        }
    }
    Ok(report)
}
