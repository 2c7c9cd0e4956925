use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};
use overdilute::checkpoint;
use overdilute::data::{self, Dataset, SynthParams};
use overdilute::dilution::{self, DilutionReport};
use overdilute::model::{Model, ModelConfig, ModelInputs, Task};
use overdilute::natr::EncoderKind;
use overdilute::report;
use overdilute::trainer::{self, Evaluation, LinkTask, NodeTask, SubsetHits, TrainConfig, TrainRun};
use overdilute::Trace;

use crate::args::{parse_list, Ablation, AnalyzeArgs, EvalArgs, GenBaseArgs, SplitArgs, SynthArgs, TaskArg, TrainArgs};
use crate::manifest::Manifest;

fn load(dir: &Path) -> Result<Dataset> {
    data::load_dataset(dir).with_context(|| format!("loading dataset {}", dir.display()))
}

fn ratios(s: &SplitArgs) -> Result<(f64, f64, f64)> {
    match parse_list::<f64>(&s.split, "split ratio")?[..] {
        [a, b, c] => Ok((a, b, c)),
        _ => bail!("--split needs three ratios"),
    }
}

fn link_task(ds: &Dataset, s: &SplitArgs) -> Result<LinkTask> {
    let split = data::make_link_split(&ds.graph, ratios(s)?, s.split_seed)?;
    Ok(LinkTask::new(ds, split)?)
}

pub fn analyze(a: &AnalyzeArgs, m: &mut Manifest) -> Result<()> {
    if a.hops < 1 {
        bail!("--hops must be >= 1");
    }
    let ds = load(&a.data)?;
    m.config("dataset", ds.name.clone());
    m.config("hops", a.hops);
    m.config("bins", a.bins);
    let mut r = DilutionReport::compute(&ds.graph, &ds.attrs, a.hops, a.bins)?;

    if let Some(ckpt) = &a.model {
        let model = checkpoint::load(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
        m.config_all("model.", model.config.to_kv());
        m.config("oracle_nodes", a.oracle_nodes);
        let inputs = ModelInputs::new(&ds.graph, &ds.attrs)?;
        let mut trace = Trace::new();
        let h0 = trace.param(model.initial_embedding(&inputs)?);
        let b = model.params.bind(&mut trace);
        let emb = model.embed(&mut trace, &b, &inputs, Some(h0), None)?;
        let nodes: Vec<usize> = (0..a.oracle_nodes.min(ds.graph.num_nodes())).collect();
        let delta = match &emb.natr {
            Some(n) => {
                r.set_intra(&ds.attrs, &n.mean_attention(&trace, &inputs.attrs))?;
                dilution::inter_with_self_terms(&trace, emb.last(), h0, &n.mixtures(), &nodes)?
            }
            None => dilution::inter_from_trace(&trace, emb.last(), h0, &nodes)?,
        };
        let agg = dilution::inter_agg(&ds.graph, model.config.layers)?;
        let mut s = String::from("node_id,delta_inter_model,delta_inter_agg\n");
        for (&v, d) in nodes.iter().zip(&delta) {
            writeln!(s, "{v},{d},{}", agg[v])?;
        }
        m.write("dilution_model.csv", s)?;
    }

    m.write("dilution_inter.csv", report::inter_csv(&r))?;
    m.write("dilution_intra.csv", report::intra_csv(&r))?;
    m.write("decomposition.csv", report::decomposition_csv(&r))?;
    m.write("receptive_fields.csv", report::receptive_csv(&r, &ds.graph))?;
    m.write("histograms.csv", report::histograms_csv(&r))?;
    let (all, non_iso) = dilution::averages(&r.inter[0], &ds.graph);
    eprintln!(
        "{}: {} nodes, {} edges, hop-1 mean δ {all:.4} ({non_iso:.4} non-isolated), {} attribute-less",
        ds.name,
        ds.graph.num_nodes(),
        ds.graph.num_edges(),
        r.attributeless.len()
    );
    Ok(())
}

fn model_config(a: &TrainArgs) -> Result<ModelConfig> {
    let mut c = ModelConfig {
        layers: a.layers,
        hidden: a.hidden,
        dropout: a.dropout,
        gat_heads: a.gat_heads,
        sgc_k: a.sgc_k,
        encoder_layers: a.enc_layers,
        heads: a.heads,
        d_ffn: a.d_ffn,
        lambda: a.lambda.parse()?,
        ..ModelConfig::new(a.model.parse()?)
    };
    for ab in &a.ablate {
        match ab {
            Ablation::MlpEncoder => c.encoder = EncoderKind::Mlp,
            Ablation::NoAux => c.aux_loss = false,
            Ablation::Jk => c.jk = true,
        }
    }
    c.validate()?;
    Ok(c)
}

struct SeedResult {
    run: TrainRun,
    eval: Evaluation,
    subsets: Option<SubsetHits>,
    checkpoint: Vec<u8>,
}

#[cfg(feature = "parallel")]
fn for_seeds<F>(seeds: &[u64], f: F) -> Result<Vec<SeedResult>>
where
    F: Fn(u64) -> Result<SeedResult> + Sync,
{
    use rayon::prelude::*;
    seeds.par_iter().map(|&s| f(s)).collect()
}

#[cfg(not(feature = "parallel"))]
fn for_seeds<F>(seeds: &[u64], f: F) -> Result<Vec<SeedResult>>
where
    F: Fn(u64) -> Result<SeedResult>,
{
    seeds.iter().map(|&s| f(s)).collect()
}

fn opt(x: Option<f64>) -> String {
    x.map_or_else(String::new, |v| v.to_string())
}

pub fn train(a: &TrainArgs, m: &mut Manifest) -> Result<()> {
    let ds = load(&a.data)?;
    let cfg = model_config(a)?;
    let seeds: Vec<u64> = parse_list(&a.seeds, "seed")?;
    if seeds.is_empty() {
        bail!("no seeds");
    }
    let mut tc = TrainConfig {
        epochs: a.epochs,
        patience: a.patience,
        lr: a.lr,
        seed: 0,
        k: a.split.k,
    };
    if a.paper_protocol {
        tc = tc.paper_protocol();
    }
    m.config("dataset", ds.name.clone());
    m.config_all("model.", cfg.to_kv());
    let mut tkv = tc.to_kv();
    tkv.retain(|(k, _)| k != "seed");
    m.config_all("train.", tkv);
    m.config("seeds", &a.seeds);
    let n_attr = ds.attrs.num_attributes();

    let results = match a.task {
        TaskArg::Link => {
            m.config("task", "link");
            m.config("split", &a.split.split);
            m.config("split_seed", a.split.split_seed);
            let task = link_task(&ds, &a.split)?;
            let subsets = if a.subsets { Some(trainer::link_subsets(&task)?) } else { None };
            for_seeds(&seeds, |s| {
                let mut model = Model::new(cfg.clone(), Task::Link, n_attr, s)?;
                let run = trainer::train_link(&mut model, &task, &TrainConfig { seed: s, ..tc.clone() })?;
                let eval = trainer::evaluate_link(&model, &task, tc.k)?;
                let subsets = subsets
                    .as_ref()
                    .map(|q| trainer::evaluate_subsets(&model, &task, &q.e_q1, &q.e_q4, tc.k))
                    .transpose()?;
                eprintln!(
                    "seed {s}: best epoch {} valid {:.4} test {:.4} ({:.1}s)",
                    run.best_epoch,
                    eval.valid,
                    eval.test,
                    run.wall_clock.as_secs_f64()
                );
                Ok(SeedResult {
                    checkpoint: checkpoint::encode(&model),
                    run,
                    eval,
                    subsets,
                })
            })?
        }
        TaskArg::Nodeclass => {
            if a.subsets {
                bail!("--subsets applies to link prediction only");
            }
            m.config("task", "nodeclass");
            let task = NodeTask::new(&ds)?;
            for_seeds(&seeds, |s| {
                let t = Task::NodeClass { classes: task.classes };
                let mut model = Model::new(cfg.clone(), t, n_attr, s)?;
                let run = trainer::train_nodeclass(&mut model, &task, &TrainConfig { seed: s, ..tc.clone() })?;
                let eval = trainer::evaluate_nodeclass(&model, &task)?;
                eprintln!(
                    "seed {s}: best epoch {} valid {:.4} test {:.4} ({:.1}s)",
                    run.best_epoch,
                    eval.valid,
                    eval.test,
                    run.wall_clock.as_secs_f64()
                );
                Ok(SeedResult {
                    checkpoint: checkpoint::encode(&model),
                    run,
                    eval,
                    subsets: None,
                })
            })?
        }
    };

    let mut runs = String::from(
        "seed,best_epoch,epochs_run,best_val,valid,test,mad,mad_per_node,energy,corr,hits_q1,hits_q4\n",
    );
    for (s, r) in seeds.iter().zip(&results) {
        let dir = format!("seed_{s}");
        m.write(&format!("{dir}/run_metrics.csv"), report::run_metrics_csv(&r.run.history))?;
        m.write(&format!("{dir}/model.ckpt"), &r.checkpoint)?;
        let e = &r.eval;
        writeln!(
            runs,
            "{s},{},{},{},{},{},{},{},{},{},{},{}",
            r.run.best_epoch,
            r.run.history.len(),
            r.run.best_val,
            e.valid,
            e.test,
            e.mad.per_pair,
            e.mad.per_node,
            e.energy,
            e.corr.value,
            opt(r.subsets.and_then(|x| x.q1)),
            opt(r.subsets.and_then(|x| x.q4)),
        )?;
    }
    m.write("runs.csv", runs)?;

    let mut cols: Vec<(&str, Vec<f64>)> = vec![
        ("valid", results.iter().map(|r| r.eval.valid).collect()),
        ("test", results.iter().map(|r| r.eval.test).collect()),
        ("mad", results.iter().map(|r| r.eval.mad.per_pair).collect()),
        ("mad_per_node", results.iter().map(|r| r.eval.mad.per_node).collect()),
        ("energy", results.iter().map(|r| r.eval.energy).collect()),
        ("corr", results.iter().map(|r| r.eval.corr.value).collect()),
    ];
    if a.subsets {
        cols.push(("hits_q1", results.iter().filter_map(|r| r.subsets?.q1).collect()));
        cols.push(("hits_q4", results.iter().filter_map(|r| r.subsets?.q4).collect()));
    }
    m.write("summary.csv", summary_csv(&cols))?;
    Ok(())
}

fn summary_csv(cols: &[(&str, Vec<f64>)]) -> String {
    let mut s = String::from("metric,mean,std,n\n");
    for (name, xs) in cols {
        let (mean, std) = report::mean_std(xs);
        writeln!(s, "{name},{mean},{std},{}", xs.len()).unwrap();
    }
    s
}

pub fn eval(a: &EvalArgs, m: &mut Manifest) -> Result<()> {
    let ds = load(&a.data)?;
    let model = checkpoint::load(&a.checkpoint)
        .with_context(|| format!("loading {}", a.checkpoint.display()))?;
    m.config("dataset", ds.name.clone());
    m.config_all("model.", model.config.to_kv());
    m.config("k", a.split.k);
    let mut rows: Vec<(&str, f64)> = Vec::new();
    let e = match model.task {
        Task::Link => {
            m.config("task", "link");
            m.config("split", &a.split.split);
            m.config("split_seed", a.split.split_seed);
            let task = link_task(&ds, &a.split)?;
            let e = trainer::evaluate_link(&model, &task, a.split.k)?;
            if a.subsets {
                let q = trainer::link_subsets(&task)?;
                let h = trainer::evaluate_subsets(&model, &task, &q.e_q1, &q.e_q4, a.split.k)?;
                rows.push(("hits_q1", h.q1.unwrap_or(f64::NAN)));
                rows.push(("hits_q4", h.q4.unwrap_or(f64::NAN)));
            }
            e
        }
        Task::NodeClass { .. } => {
            if a.subsets {
                bail!("--subsets applies to link prediction only");
            }
            m.config("task", "nodeclass");
            trainer::evaluate_nodeclass(&model, &NodeTask::new(&ds)?)?
        }
    };
    let mut s = String::from("metric,value\n");
    for (k, v) in [
        ("valid", e.valid),
        ("test", e.test),
        ("mad", e.mad.per_pair),
        ("mad_per_node", e.mad.per_node),
        ("energy", e.energy),
        ("corr", e.corr.value),
    ]
    .into_iter()
    .chain(rows)
    {
        writeln!(s, "{k},{v}")?;
    }
    m.write("eval.csv", s)?;
    eprintln!("valid {:.4} test {:.4} mad {:.4}", e.valid, e.test, e.mad.per_pair);
    Ok(())
}

fn save(ds: &Dataset, out: &Path, m: &mut Manifest) -> Result<()> {
    data::save_dataset(ds, out).with_context(|| format!("writing dataset to {}", out.display()))?;
    for f in ["meta.txt", "edges.tsv", "attrs.tsv", "labels.tsv", "split.tsv"] {
        if out.join(f).exists() {
            m.record(f);
        }
    }
    Ok(())
}

pub fn synth(a: &SynthArgs, m: &mut Manifest) -> Result<()> {
    let base = load(&a.base)?;
    let labels = base
        .labels
        .as_ref()
        .with_context(|| format!("base dataset {} has no labels", base.name))?;
    let splits = match parse_list::<usize>(&a.splits, "split size")?[..] {
        [a, b, c] => (a, b, c),
        _ => bail!("--splits needs three sizes"),
    };
    let params = SynthParams {
        num_classes: base.num_classes().unwrap_or(0),
        keys_per_class: a.keys_per_class,
        p_key: a.p_key,
        p_nonkey: a.p_nonkey,
        total_attributes: a.total_attributes,
        splits,
    };
    m.config("base", base.name.clone());
    m.config("seed", a.seed);
    m.config("num_classes", params.num_classes);
    m.config("keys_per_class", params.keys_per_class);
    m.config("p_key", params.p_key);
    m.config("p_nonkey", params.p_nonkey);
    m.config("total_attributes", params.total_attributes);
    m.config("splits", &a.splits);
    let ds = data::generate_synthetic(&base.graph, labels, &params, a.seed)?;
    save(&ds, &a.out, m)
}

pub fn gen_base(a: &GenBaseArgs, m: &mut Manifest) -> Result<()> {
    m.config("generator", "cora-like");
    m.config("seed", a.seed);
    let ds = data::generate_cora_like(a.seed)?;
    save(&ds, &a.out, m)
}
