//! Jacobian influence scores by repeated reverse passes.

use crate::autodiff::{Trace, Var};
use crate::error::{Error, Result};
use crate::par;
use crate::tensor::Tensor;

/// Influence matrix `I[k][u] = Σ_{i,j} |∂out[v_k, i] / ∂input[u, j]|` for
/// every requested output row `v_k`.
///
/// One backward pass is run per (output row, output dim). Rows are processed
/// in parallel when the `parallel` feature is on; each pass is independent.
pub fn jacobian_influence(trace: &Trace, out: Var, out_rows: &[usize], input: Var) -> Result<Tensor> {
    if out.index() >= trace.len() {
        return Err(Error::Contract("output is not on the trace".into()));
    }
    if !trace.is_leaf(input) {
        return Err(Error::Contract("influence input must be a leaf".into()));
    }
    if !trace.requires_grad(input) {
        return Err(Error::Contract("influence input must be a differentiable leaf".into()));
    }
    let ov = trace.value(out);
    let (n_out, d_out) = (ov.rows(), ov.cols());
    if let Some(&bad) = out_rows.iter().find(|&&v| v >= n_out) {
        return Err(Error::Contract(format!(
            "output row {bad} not produced by trace ({n_out} rows)"
        )));
    }
    let iv = trace.value(input);
    let (n_in, d_in) = (iv.rows(), iv.cols());

    let rows: Vec<Result<Vec<f64>>> = par::map_slice(out_rows, |&v| {
        let mut acc = vec![0.0; n_in];
        for i in 0..d_out {
            let mut seed = Tensor::zeros(n_out, d_out);
            seed.set(v, i, 1.0);
            let grads = trace.backward_from(out, seed)?;
            if let Some(g) = grads.get(input) {
                for (u, a) in acc.iter_mut().enumerate() {
                    *a += g.data()[u * d_in..(u + 1) * d_in].iter().map(|x| x.abs()).sum::<f64>();
                }
            }
        }
        Ok(acc)
    });
    let mut data = Vec::with_capacity(out_rows.len() * n_in);
    for r in rows {
        data.extend(r?);
    }
    Ok(Tensor::from_vec(out_rows.len(), n_in, data))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_gives_scaled_eye() {
        let mut tr = Trace::new();
        let x = tr.param(Tensor::from_vec(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let y = tr.scale(x, 1.0);
        let inf = jacobian_influence(&tr, y, &[0, 1, 2], x).unwrap();
        let mut want = Tensor::eye(3);
        want.data_mut().iter_mut().for_each(|v| *v *= 2.0);
        assert_eq!(inf, want);
    }

    #[test]
    fn linear_map_gives_abs_entries() {
        let m = Tensor::from_vec(2, 3, vec![1.0, -2.0, 0.5, 0.0, 3.0, -4.0]);
        let mut tr = Trace::new();
        let mv = tr.constant(m.clone());
        let x = tr.param(Tensor::from_vec(3, 1, vec![0.1, 0.2, 0.3]));
        let y = tr.matmul(mv, x).unwrap();
        let inf = jacobian_influence(&tr, y, &[0, 1], x).unwrap();
        assert_eq!(inf, m.map(f64::abs));
    }

    #[test]
    fn bad_row_is_contract_error() {
        let mut tr = Trace::new();
        let x = tr.param(Tensor::zeros(2, 1));
        let y = tr.scale(x, 2.0);
        assert!(matches!(
            jacobian_influence(&tr, y, &[5], x),
            Err(Error::Contract(_))
        ));
        assert!(jacobian_influence(&tr, y, &[0], y).is_err());
    }
}
