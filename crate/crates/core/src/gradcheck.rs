//! Central finite-difference checks of the reverse-mode gradients.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Trace, Var};
use crate::data::AttributeIncidence;
use crate::error::Result;
use crate::graph::Graph;
use crate::model::{Model, ModelConfig, ModelInputs, Task};
use crate::sparse::{Segments, SparseMatrix};
use crate::tensor::Tensor;
use crate::trainer::link_loss;

pub const STEP: f64 = 1e-5;

/// `‖a − n‖ / max(‖a‖ + ‖n‖, 1e-12)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let sq = |it: &mut dyn Iterator<Item = f64>| it.map(|x| x * x).sum::<f64>().sqrt();
    let diff = sq(&mut analytic.iter().zip(numeric).map(|(a, n)| a - n));
    let scale = sq(&mut analytic.iter().copied()) + sq(&mut numeric.iter().copied());
    diff / scale.max(1e-12)
}

/// Largest per-input relative error of `f` built on leaves holding `inputs`.
/// Non-scalar outputs are reduced with a fixed random projection drawn from
/// `seed`.
pub fn check_op<F>(inputs: &[Tensor], seed: u64, f: F) -> Result<f64>
where
    F: Fn(&mut Trace, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor]| -> Result<(Trace, Var, Vec<Var>)> {
        let mut t = Trace::new();
        let vars: Vec<Var> = vals.iter().map(|v| t.param(v.clone())).collect();
        let out = f(&mut t, &vars)?;
        let ov = t.value(out);
        let loss = if ov.len() == 1 {
            out
        } else {
            let (r, c) = (ov.rows(), ov.cols());
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
            let proj = Tensor::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect());
            let proj = t.constant(proj);
            let p = t.hadamard(out, proj)?;
            t.sum(p)
        };
        Ok((t, loss, vars))
    };
    let scalar = |vals: &[Tensor]| -> Result<f64> {
        let (t, l, _) = eval(vals)?;
        Ok(t.value(l).item())
    };
    let (t, loss, vars) = eval(inputs)?;
    let grads = t.backward(loss)?;
    let mut worst = 0.0f64;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*v, &inputs[i]);
        let mut numeric = vec![0.0; inputs[i].len()];
        let mut probe = inputs.to_vec();
        for (j, nv) in numeric.iter_mut().enumerate() {
            let x = inputs[i].data()[j];
            probe[i].data_mut()[j] = x + STEP;
            let up = scalar(&probe)?;
            probe[i].data_mut()[j] = x - STEP;
            let down = scalar(&probe)?;
            probe[i].data_mut()[j] = x;
            *nv = (up - down) / (2.0 * STEP);
        }
        worst = worst.max(relative_error(analytic.data(), &numeric));
    }
    Ok(worst)
}

/// Largest per-parameter relative error of the link-prediction loss of
/// `model` (no dropout) on the given pairs.
pub fn check_model(
    model: &Model,
    inputs: &ModelInputs,
    pairs: &[(usize, usize)],
    labels: &Arc<Vec<f64>>,
) -> Result<f64> {
    let loss_of = |m: &Model| -> Result<(Trace, Var, crate::layers::Bound)> {
        let mut t = Trace::new();
        let b = m.params.bind(&mut t);
        let emb = m.embed(&mut t, &b, inputs, None, None)?;
        let loss = link_loss(&mut t, &b, &emb.outputs, pairs, labels)?;
        Ok((t, loss, b))
    };
    let (t, loss, b) = loss_of(model)?;
    let grads = b.collect(&t, &t.backward(loss)?);
    let mut probe = model.clone();
    let mut worst = 0.0f64;
    for (name, p) in model.params.iter() {
        let analytic = grads
            .get(name)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(p.rows(), p.cols()));
        let mut numeric = vec![0.0; p.len()];
        for (j, nv) in numeric.iter_mut().enumerate() {
            let x = p.data()[j];
            let mut at = |val: f64| -> Result<f64> {
                probe.params.get_mut(name).expect("same names").data_mut()[j] = val;
                let (t, l, _) = loss_of(&probe)?;
                Ok(t.value(l).item())
            };
            let up = at(x + STEP)?;
            let down = at(x - STEP)?;
            probe.params.get_mut(name).expect("same names").data_mut()[j] = x;
            *nv = (up - down) / (2.0 * STEP);
        }
        worst = worst.max(relative_error(analytic.data(), &numeric));
    }
    Ok(worst)
}

fn uniform(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    Tensor::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

/// Magnitudes in `[0.1, 1)` with random sign, keeping kinks outside `±STEP`.
fn off_zero(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    Tensor::from_vec(
        r,
        c,
        (0..r * c)
            .map(|_| {
                let m: f64 = rng.gen_range(0.1..1.0);
                if rng.gen::<bool>() { m } else { -m }
            })
            .collect(),
    )
}

fn random_segments(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Arc<Segments> {
    let lists: Vec<Vec<usize>> = (0..rows)
        .map(|_| {
            let mut l: Vec<usize> = (0..cols).filter(|_| rng.gen_bool(0.5)).collect();
            if l.is_empty() {
                l.push(rng.gen_range(0..cols));
            }
            l
        })
        .collect();
    Arc::new(Segments::from_lists(&lists, cols))
}

/// Worst relative error of every differentiable trace op on random inputs.
pub fn op_suite(seed: u64) -> Result<Vec<(&'static str, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let a = uniform(r, 3, 4);
    let b = uniform(r, 3, 4);
    let c = uniform(r, 4, 2);
    let row = uniform(r, 1, 4);
    let s = uniform(r, 1, 1);
    let k = off_zero(r, 3, 4);
    let narrow = uniform(r, 3, 2);
    let x = uniform(r, 4, 5);
    let gain = uniform(r, 1, 5);
    let bias = uniform(r, 1, 5);
    let mask: Vec<bool> = (0..20).map(|i| i % 5 == 0 || r.gen_bool(0.6)).collect();
    let probs = Tensor::from_vec(6, 1, (0..6).map(|_| r.gen_range(0.1..0.9)).collect());
    let bce_labels = Arc::new(vec![1.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
    let classes = Arc::new(vec![0, 2, 4, 1]);
    let rows = Arc::new(vec![0, 2, 3]);
    let sp_rows: Vec<Vec<(usize, f64)>> = (0..4)
        .map(|_| {
            let cols: Vec<usize> = (0..5).filter(|_| r.gen_bool(0.5)).collect();
            cols.into_iter().map(|c| (c, r.gen_range(-1.0..1.0))).collect()
        })
        .collect();
    let sp = Arc::new(SparseMatrix::from_rows(5, &sp_rows));
    let vals = uniform(r, 5, 3);
    let idx = Arc::new(vec![4, 0, 0, 2]);
    let seg = random_segments(r, 4, 5);
    let q = uniform(r, 4, 3);
    let qa = uniform(r, 4, 1);
    let ka = uniform(r, 5, 1);
    let logits = uniform(r, seg.nnz(), 1);

    let mut out = Vec::new();
    let mut run = |name: &'static str, inputs: &[Tensor], f: &dyn Fn(&mut Trace, &[Var]) -> Result<Var>| -> Result<()> {
        out.push((name, check_op(inputs, seed, f)?));
        Ok(())
    };
    run("matmul", &[a.clone(), c], &|t, v| t.matmul(v[0], v[1]))?;
    run("transpose", std::slice::from_ref(&a), &|t, v| Ok(t.transpose(v[0])))?;
    run("add", &[a.clone(), b.clone()], &|t, v| t.add(v[0], v[1]))?;
    run("sub", &[a.clone(), b.clone()], &|t, v| t.sub(v[0], v[1]))?;
    run("add_row", &[a.clone(), row], &|t, v| t.add_row(v[0], v[1]))?;
    run("hadamard", &[a.clone(), b], &|t, v| t.hadamard(v[0], v[1]))?;
    run("scale", std::slice::from_ref(&a), &|t, v| Ok(t.scale(v[0], -1.7)))?;
    run("scale_by", &[a.clone(), s], &|t, v| t.scale_by(v[0], v[1]))?;
    run("relu", std::slice::from_ref(&k), &|t, v| Ok(t.relu(v[0])))?;
    run("leaky_relu", &[k], &|t, v| Ok(t.leaky_relu(v[0], 0.2)))?;
    run("sigmoid", std::slice::from_ref(&a), &|t, v| Ok(t.sigmoid(v[0])))?;
    run("concat_cols", &[a.clone(), narrow], &|t, v| t.concat_cols(&[v[0], v[1]]))?;
    run("slice_cols", std::slice::from_ref(&a), &|t, v| t.slice_cols(v[0], 1, 3))?;
    run("sum", std::slice::from_ref(&a), &|t, v| Ok(t.sum(v[0])))?;
    run("mean", &[a], &|t, v| Ok(t.mean(v[0])))?;
    run("layer_norm", &[x.clone(), gain, bias], &|t, v| t.layer_norm(v[0], v[1], v[2], 1e-5))?;
    run("masked_softmax_rows", std::slice::from_ref(&x), &|t, v| t.masked_softmax_rows(v[0], Some(&mask)))?;
    run("softmax_rows", std::slice::from_ref(&x), &|t, v| t.masked_softmax_rows(v[0], None))?;
    run("softmax_xent", &[x], &|t, v| t.softmax_xent(v[0], &classes, &rows))?;
    run("bce", &[probs], &|t, v| t.bce(v[0], &bce_labels))?;
    run("spmm", std::slice::from_ref(&vals), &|t, v| t.spmm(&sp, v[0]))?;
    run("gather_rows", std::slice::from_ref(&vals), &|t, v| t.gather_rows(v[0], &idx))?;
    run("pair_dot", &[q, vals.clone()], &|t, v| t.pair_dot(v[0], v[1], &seg))?;
    run("pair_add", &[qa, ka], &|t, v| t.pair_add(v[0], v[1], &seg))?;
    run("segment_softmax", std::slice::from_ref(&logits), &|t, v| t.segment_softmax(v[0], &seg))?;
    run("segment_weighted_sum", &[logits, vals], &|t, v| {
        t.segment_weighted_sum(v[0], v[1], &seg)
    })?;
    Ok(out)
}

/// Worst relative error over the parameters of `cfg` on a seeded 7-node
/// toy link-prediction problem.
pub fn model_suite(cfg: &ModelConfig, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    let n = 7;
    let mut edges = vec![(0, 1), (1, 2), (2, 3), (3, 4), (4, 5)];
    for _ in 0..4 {
        let (u, v) = (rng.gen_range(0..n), rng.gen_range(0..n));
        if u != v {
            edges.push((u, v));
        }
    }
    let g = Graph::new(n, &edges)?;
    let num_attributes = 6;
    let sets: Vec<Vec<usize>> = (0..n)
        .map(|_| {
            let mut s: Vec<usize> = (0..num_attributes).filter(|_| rng.gen_bool(0.4)).collect();
            if s.is_empty() {
                s.push(rng.gen_range(0..num_attributes));
            }
            s
        })
        .collect();
    let attrs = AttributeIncidence::new(num_attributes, sets)?;
    let inputs = ModelInputs::new(&g, &attrs)?;
    let pairs = [(0, 1), (2, 3), (0, 5), (1, 6), (4, 2), (3, 6)];
    let labels = Arc::new(vec![1.0, 1.0, 0.0, 0.0, 1.0, 0.0]);
    let model = Model::new(cfg.clone(), Task::Link, num_attributes, seed)?;
    check_model(&model, &inputs, &pairs, &labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_passes_and_error_measure_separates() {
        let x = Tensor::from_vec(1, 3, vec![0.5, -1.0, 2.0]);
        let ok = check_op(std::slice::from_ref(&x), 0, |t, v| t.hadamard(v[0], v[0])).unwrap();
        assert!(ok < 1e-8);
        assert!(relative_error(&[1.0, 2.0], &[1.0, 2.0]) == 0.0);
        assert!(relative_error(&[1.0, 2.0], &[1.0, 2.2]) > 1e-2);
    }
}
