//! Central finite-difference gradient verification.

use super::{ParamStore, Tape, Tensor, TensorError, Var};

/// Checks the analytic gradient of a scalar-valued tensor function against
/// central differences. Returns the max over coordinates of
/// `|analytic - numeric| / max(1, |analytic|)`.
pub fn gradcheck<F>(f: F, x: &Tensor, h: f64) -> Result<f64, TensorError>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Var<'t>,
{
    assert!(h > 0.0 && h <= 1e-2, "step must be in (0, 1e-2]");
    let analytic = {
        let tape = Tape::new();
        let xv = tape.leaf(x);
        let loss = f(&tape, xv);
        tape.backward(loss)?;
        tape.grad(xv)
    };
    let eval = |t: &Tensor| -> Result<f64, TensorError> {
        let tape = Tape::new();
        let xv = tape.leaf(t);
        let loss = f(&tape, xv);
        let v = loss.item();
        if !v.is_finite() {
            return Err(TensorError::NonFinite("gradcheck evaluation".into()));
        }
        Ok(v)
    };
    let mut max_err = 0.0_f64;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data[i];
        probe.data[i] = orig + h;
        let fp = eval(&probe)?;
        probe.data[i] = orig - h;
        let fm = eval(&probe)?;
        probe.data[i] = orig;
        let numeric = (fp - fm) / (2.0 * h);
        let a = analytic.data[i];
        if !a.is_finite() || !numeric.is_finite() {
            return Err(TensorError::NonFinite("gradcheck gradient".into()));
        }
        max_err = max_err.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(max_err)
}

/// Same check, but over every parameter in a store. `f` evaluates the loss
/// on a fresh tape, pulling whatever parameters it needs via `tape.param`.
pub fn gradcheck_params<F>(store: &mut ParamStore, f: F, h: f64) -> Result<f64, TensorError>
where
    F: for<'t> Fn(&'t Tape, &ParamStore) -> Var<'t>,
{
    assert!(h > 0.0 && h <= 1e-2, "step must be in (0, 1e-2]");
    store.zero_grads();
    {
        let tape = Tape::new();
        let loss = f(&tape, store);
        tape.backward(loss)?;
        tape.write_grads(store);
    }
    let analytic: Vec<Vec<f64>> = store.ids().map(|id| store.grad(id).to_vec()).collect();
    let mut max_err = 0.0_f64;
    let ids: Vec<_> = store.ids().collect();
    for (pi, id) in ids.iter().enumerate() {
        for i in 0..store.tensor(*id).numel() {
            let orig = store.tensor(*id).data[i];
            store.tensor_mut(*id).data[i] = orig + h;
            let fp = eval_loss(&f, store)?;
            store.tensor_mut(*id).data[i] = orig - h;
            let fm = eval_loss(&f, store)?;
            store.tensor_mut(*id).data[i] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[pi][i];
            if !a.is_finite() || !numeric.is_finite() {
                return Err(TensorError::NonFinite("gradcheck gradient".into()));
            }
            max_err = max_err.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    Ok(max_err)
}

/// Like [`gradcheck_params`], but probes at most `max_coords` evenly strided
/// coordinates per parameter tensor. Full perturbation of a realistically
/// sized model is quadratic in parameter count; a strided sample still
/// exercises every tensor and every operation on the path to the loss.
pub fn gradcheck_params_sampled<F>(
    store: &mut ParamStore,
    f: F,
    h: f64,
    max_coords: usize,
) -> Result<f64, TensorError>
where
    F: for<'t> Fn(&'t Tape, &ParamStore) -> Var<'t>,
{
    assert!(h > 0.0 && h <= 1e-2, "step must be in (0, 1e-2]");
    assert!(max_coords > 0, "must probe at least one coordinate per tensor");
    store.zero_grads();
    {
        let tape = Tape::new();
        let loss = f(&tape, store);
        tape.backward(loss)?;
        tape.write_grads(store);
    }
    let analytic: Vec<Vec<f64>> = store.ids().map(|id| store.grad(id).to_vec()).collect();
    let mut max_err = 0.0_f64;
    let ids: Vec<_> = store.ids().collect();
    for (pi, id) in ids.iter().enumerate() {
        let n = store.tensor(*id).numel();
        let stride = n.div_ceil(max_coords).max(1);
        let mut i = 0;
        while i < n {
            let orig = store.tensor(*id).data[i];
            store.tensor_mut(*id).data[i] = orig + h;
            let fp = eval_loss(&f, store)?;
            store.tensor_mut(*id).data[i] = orig - h;
            let fm = eval_loss(&f, store)?;
            store.tensor_mut(*id).data[i] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[pi][i];
            if !a.is_finite() || !numeric.is_finite() {
                return Err(TensorError::NonFinite("gradcheck gradient".into()));
            }
            max_err = max_err.max((a - numeric).abs() / a.abs().max(1.0));
            i += stride;
        }
    }
    Ok(max_err)
}

fn eval_loss<F>(f: &F, store: &ParamStore) -> Result<f64, TensorError>
where
    F: for<'t> Fn(&'t Tape, &ParamStore) -> Var<'t>,
{
    let tape = Tape::new();
    let loss = f(&tape, store);
    let v = loss.item();
    if !v.is_finite() {
        return Err(TensorError::NonFinite("gradcheck evaluation".into()));
    }
    Ok(v)
}
