//! Central finite-difference gradient checks in 64-bit precision.

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::params::{GradBuffer, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-6;

/// `|a - b| / max(1, |a|, |b|)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1f64.max(a.abs()).max(b.abs())
}

fn scalar_of(graph: &Graph<f64>, v: Var) -> Result<f64> {
    let t = graph.value(v);
    if t.len() != 1 {
        return Err(TensorError::Contract(format!("grad_check needs a scalar output, got {:?}", t.shape())));
    }
    let s = t.item();
    if !s.is_finite() {
        return Err(TensorError::Numeric("non-finite function value".into()));
    }
    Ok(s)
}

/// Max relative error between autodiff and central differences for a
/// scalar function of one tensor.
pub fn grad_check<F>(f: F, x: &Tensor<f64>) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    grad_check_many(|g, vars| f(g, vars[0]), std::slice::from_ref(x))
}

/// Like [`grad_check`] over several input tensors at once.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor<f64>], track: bool| -> Result<(Graph<f64>, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let vars = xs.iter().map(|x| g.input(x.clone(), track)).collect::<Result<Vec<_>>>()?;
        let out = f(&mut g, &vars)?;
        Ok((g, vars, out))
    };
    let (graph, vars, out) = eval(inputs, true)?;
    scalar_of(&graph, out)?;
    let grads = graph.backward(out)?;
    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (k, &var) in vars.iter().enumerate() {
        let ad = grads.wrt_or_zeros(&graph, var);
        for (i, &a) in ad.iter().enumerate() {
            let orig = inputs[k].data()[i];
            probe[k].data_mut()[i] = orig + FD_STEP;
            let (gp, _, op) = eval(&probe, false)?;
            let plus = scalar_of(&gp, op)?;
            probe[k].data_mut()[i] = orig - FD_STEP;
            let (gm, _, om) = eval(&probe, false)?;
            let minus = scalar_of(&gm, om)?;
            probe[k].data_mut()[i] = orig;
            worst = worst.max(relative_error(a, (plus - minus) / (2.0 * FD_STEP)));
        }
    }
    Ok(worst)
}

/// Gradient check of a scalar function of a whole parameter store. At most
/// `max_coords` coordinates per tensor are probed, spread evenly.
pub fn grad_check_params<F>(store: &ParamStore<f64>, f: F, max_coords: usize) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut graph = Graph::new();
    let out = f(&mut graph, store)?;
    scalar_of(&graph, out)?;
    let grads = graph.backward(out)?;
    let mut buf = GradBuffer::for_store(store);
    buf.accumulate(&graph, &grads);

    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::no_grad();
        let out = f(&mut g, s)?;
        scalar_of(&g, out)
    };
    let mut probe = store.clone();
    let mut worst = 0.0f64;
    for id in store.ids().collect::<Vec<ParamId>>() {
        let n = store.get(id).len();
        let stride = n.div_ceil(max_coords.max(1)).max(1);
        for i in (0..n).step_by(stride) {
            let orig = store.get(id).data()[i];
            probe.get_mut(id).data_mut()[i] = orig + FD_STEP;
            let plus = eval(&probe)?;
            probe.get_mut(id).data_mut()[i] = orig - FD_STEP;
            let minus = eval(&probe)?;
            probe.get_mut(id).data_mut()[i] = orig;
            worst = worst.max(relative_error(buf.get(id)[i], (plus - minus) / (2.0 * FD_STEP)));
        }
    }
    Ok(worst)
}
