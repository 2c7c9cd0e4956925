use std::sync::Arc;

use overdilute::data::AttributeIncidence;
use overdilute::model::{Model, ModelConfig, ModelInputs, ModelKind, Task};
use overdilute::natr::{EncoderKind, LambdaMode};
use overdilute::trainer::link_loss;
use overdilute::{Graph, Tensor, Trace};

fn toy() -> (Graph, AttributeIncidence) {
    let g = Graph::from_edges(&[(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (0, 5), (1, 4)]).unwrap();
    let attrs = AttributeIncidence::new(
        8,
        vec![vec![0, 1, 2], vec![2, 3], vec![4], vec![0, 5, 6, 7], vec![3, 6], vec![1, 7]],
    )
    .unwrap();
    (g, attrs)
}

fn small(kind: ModelKind) -> ModelConfig {
    ModelConfig {
        layers: 2,
        encoder_layers: 2,
        hidden: 8,
        heads: 2,
        d_ffn: 12,
        dropout: 0.0,
        ..ModelConfig::new(kind)
    }
}

fn final_embedding(model: &Model, g: &Graph, attrs: &AttributeIncidence) -> Tensor {
    let inputs = ModelInputs::new(g, attrs).unwrap();
    let mut t = Trace::new();
    let b = model.params.bind(&mut t);
    let h = model.embed(&mut t, &b, &inputs, None, None).unwrap().last();
    t.value(h).clone()
}

#[test]
fn attribute_relabelling_leaves_outputs_unchanged() {
    let (g, attrs) = toy();
    let perm = [5, 2, 7, 0, 6, 1, 3, 4];
    let relabelled = attrs.permuted(&perm);
    for kind in [ModelKind::NatrGcn, ModelKind::NatrGat, ModelKind::NatrMlp, ModelKind::NatrSgcPlugin] {
        let model = Model::new(small(kind), Task::Link, 8, 3).unwrap();
        let mut moved = model.clone();
        for name in ["natr.w0", "natr.z0", "plugin.w"] {
            let Some(src) = model.params.get(name) else { continue };
            let dst = moved.params.get_mut(name).unwrap();
            for (t, &p) in perm.iter().enumerate() {
                for c in 0..src.cols() {
                    dst.set(p, c, src.get(t, c));
                }
            }
        }
        let a = final_embedding(&model, &g, &attrs);
        let b = final_embedding(&moved, &g, &relabelled);
        assert!(a.max_abs_diff(&b) < 1e-10, "{kind}: {}", a.max_abs_diff(&b));
    }
}

#[test]
fn constant_logits_reduce_to_mean_pooling() {
    let (g, attrs) = toy();
    let cfg = ModelConfig {
        layers: 1,
        encoder_layers: 0,
        ..small(ModelKind::NatrMlp)
    };
    let mut model = Model::new(cfg, Task::Link, 8, 1).unwrap();
    let wq = model.params.get_mut("dec.0.wq").unwrap();
    *wq = Tensor::zeros(wq.rows(), wq.cols());

    let inputs = ModelInputs::new(&g, &attrs).unwrap();
    let mut t = Trace::new();
    let b = model.params.bind(&mut t);
    let emb = model.embed(&mut t, &b, &inputs, None, None).unwrap();
    let natr = emb.natr.as_ref().unwrap();
    for (v, row) in natr.mean_attention(&t, &inputs.attrs).iter().enumerate() {
        let u = 1.0 / attrs.attrs(v).len() as f64;
        assert!(row.iter().all(|&a| (a - u).abs() < 1e-15));
    }

    // O = mean_{t ∈ T_v}(z_t W_V) W_O, recomputed densely.
    let p = &model.params;
    let zv = p.get("natr.z0").unwrap().matmul(p.get("dec.0.wv").unwrap()).unwrap();
    let mut pooled = Tensor::zeros(6, zv.cols());
    for v in 0..6 {
        let set = attrs.attrs(v);
        for &a in set {
            for c in 0..zv.cols() {
                pooled.set(v, c, pooled.get(v, c) + zv.get(a, c) / set.len() as f64);
            }
        }
    }
    let want = pooled.matmul(p.get("dec.0.wo").unwrap()).unwrap();
    let got = t.value(natr.layers[0].mixture);
    assert!(got.max_abs_diff(&want) < 1e-12);
}

#[test]
fn every_parameter_gets_gradient() {
    let (g, attrs) = toy();
    let inputs = ModelInputs::new(&g, &attrs).unwrap();
    let pairs = vec![(0, 1), (2, 3), (0, 3), (2, 5), (1, 4), (4, 0)];
    let labels = Arc::new(vec![1.0, 1.0, 0.0, 0.0, 1.0, 0.0]);
    let mut configs: Vec<ModelConfig> = ModelKind::ALL.iter().map(|&k| small(k)).collect();
    configs.push(ModelConfig {
        lambda: LambdaMode::Learnable,
        ..small(ModelKind::NatrGcn)
    });
    configs.push(ModelConfig {
        encoder: EncoderKind::Mlp,
        ..small(ModelKind::NatrGcn)
    });
    configs.push(ModelConfig {
        jk: true,
        ..small(ModelKind::Gcn)
    });
    for cfg in configs {
        let model = Model::new(cfg.clone(), Task::Link, 8, 2).unwrap();
        let mut t = Trace::new();
        let b = model.params.bind(&mut t);
        let emb = model.embed(&mut t, &b, &inputs, None, None).unwrap();
        let loss = link_loss(&mut t, &b, &emb.outputs, &pairs, &labels).unwrap();
        let grads = b.collect(&t, &t.backward(loss).unwrap());
        for (name, _) in model.params.iter() {
            let gr = grads.get(name);
            assert!(
                gr.is_some_and(|x| x.data().iter().any(|&v| v != 0.0)),
                "{} {name}: zero gradient",
                cfg.kind
            );
        }
    }
}

#[test]
fn plugin_differs_from_nested() {
    let (g, attrs) = toy();
    let a = final_embedding(&Model::new(small(ModelKind::NatrGcn), Task::Link, 8, 4).unwrap(), &g, &attrs);
    let b = final_embedding(&Model::new(small(ModelKind::NatrSgcPlugin), Task::Link, 8, 4).unwrap(), &g, &attrs);
    assert_eq!(a.shape(), b.shape());
    assert!(a.max_abs_diff(&b) > 1e-6);
}
