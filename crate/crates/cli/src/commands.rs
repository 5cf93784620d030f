use std::io::ErrorKind;
use std::path::{Path, PathBuf};

use clusterlab::analysis::{
    effective_circuit_pairs, effective_circuits, intervention_matrix, null_dependency, sufficiency_histogram,
    compare_reports,
};
use clusterlab::clustering::{gradient_similarity, weight_similarity};
use clusterlab::modmetrics::random_baseline;
use clusterlab::network::{load_checkpoint, Checkpoint, InterventionMode};
use clusterlab::report::{
    clusterability_vs_k_csv, ecs_compare_csv, ecs_csv, heatmap_csv, history_csv, interventions_csv,
    null_dependency_csv, sufficiency_csv, theory_csv, to_json, write_text, KSweepRow, TheoryRow,
};
use clusterlab::theory::{
    jl_capacity, modular_capacity_comparison, polytope_bound_dense, polytope_pair_count_dense,
    polytope_pair_count_fully_modular, polytope_pair_count_modular, BigCount, ModularPartition,
};
use clusterlab::trainer::{max_clusterability_sweep, SweepConfig};
use clusterlab::{bsgc_floored, clusterability, train as run_train, Dataset, MlpModel};
use serde::Serialize;

use crate::config::{RunConfig, OUT_ENV};
use crate::{AnalyzeArgs, BsgcArgs, CliError, RunArgs, SimilaritySource, SweepArgs, TheoryArgs, TrainArgs};

type Result<T> = std::result::Result<T, CliError>;

fn resolve(run: &RunArgs) -> Result<RunConfig> {
    let mut cfg = match &run.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(out) = &run.out {
        cfg.out = Some(out.clone());
    }
    if let Some(seed) = run.seed {
        cfg.plan.seed = seed;
    }
    if let Some(lambda) = run.lambda {
        cfg.plan.lambda = lambda;
    }
    if let Some(k) = run.k {
        cfg.plan.k = k;
    }
    if let Some(kind) = run.dataset {
        cfg.dataset.kind = kind;
    }
    if let Some(dir) = &run.mnist_dir {
        cfg.dataset.mnist_dir = Some(dir.clone());
    }
    if let Some(n) = run.train_limit {
        cfg.dataset.train_limit = Some(n);
    }
    Ok(cfg)
}

fn out_dir(flag: Option<&Path>) -> PathBuf {
    match std::env::var_os(OUT_ENV).filter(|v| !v.is_empty()) {
        Some(dir) => PathBuf::from(dir),
        None => flag.map_or_else(|| PathBuf::from("out"), Path::to_path_buf),
    }
}

fn write(dir: &Path, name: &str, text: &str) -> Result<()> {
    write_text(&dir.join(name), text)?;
    println!("wrote {}", dir.join(name).display());
    Ok(())
}

/// Missing and malformed checkpoints are input errors; other failures to
/// read are runtime errors.
fn open_checkpoint(path: &Path) -> Result<Checkpoint> {
    load_checkpoint(path).map_err(|e| match e {
        clusterlab::Error::Io { ref source, .. } if source.kind() == ErrorKind::NotFound => {
            CliError::config(format!("checkpoint {} does not exist", path.display()))
        }
        e @ clusterlab::Error::Format { .. } => CliError::config(e.to_string()),
        e => CliError::Runtime(e),
    })
}

fn check_layers(model: &MlpModel, layers: &[usize], flag: &str) -> Result<()> {
    match layers.iter().find(|&&l| l >= model.n_layers()) {
        Some(l) => Err(CliError::config(format!(
            "{flag}: layer {l} does not exist; the model has {} layers",
            model.n_layers()
        ))),
        None => Ok(()),
    }
}

pub fn train(args: TrainArgs) -> Result<()> {
    let mut cfg = resolve(&args.run)?;
    if let Some(e) = args.epochs {
        cfg.plan.epochs = e;
    }
    if let Some(t) = args.warmup_steps {
        cfg.plan.warmup_steps = t;
    }
    if let Some(s) = args.clustering_source {
        cfg.plan.clustering_source = s.into();
    }
    if let Some(ls) = args.clustered_layers {
        cfg.plan.clustered_layers = Some(ls);
    }
    cfg.plan.record_grad_trace |= args.record_grad_trace;
    cfg.validate()?;
    let out = cfg.out_dir();

    let (train_set, test_set) = cfg.dataset.load()?;
    let outcome = run_train(&cfg.plan, &train_set, &test_set)?;
    let checkpoint = Checkpoint {
        plan: Some(cfg.plan.clone()),
        history: Some(outcome.history.clone()),
        grad_traces: outcome.traces,
        ..Checkpoint::new(outcome.model)
    };
    write(&out, "config.json", &to_json(&cfg))?;
    write(&out, "checkpoint.json", &checkpoint.to_json())?;
    write(&out, "history.csv", &history_csv(&outcome.history))?;
    if let Some(last) = outcome.history.records.last() {
        let cs: Vec<String> = last
            .clusterability
            .iter()
            .map(|c| c.map_or_else(|| "-".into(), |c| format!("{c:.4}")))
            .collect();
        println!(
            "step {}: train acc {:.4}, test acc {:.4}, clusterability [{}]",
            last.step,
            last.train_acc,
            last.test_acc,
            cs.join(", ")
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct LayerClusters {
    layer: usize,
    clusterability: f64,
    row_assign: Vec<usize>,
    col_assign: Vec<usize>,
}

#[derive(Serialize)]
struct ClustersFile {
    source: &'static str,
    k: usize,
    seed: u64,
    layers: Vec<LayerClusters>,
}

pub fn bsgc(args: BsgcArgs) -> Result<()> {
    let ck = open_checkpoint(&args.checkpoint)?;
    let model = &ck.model;
    let layers = args
        .layers
        .clone()
        .unwrap_or_else(|| (0..model.n_layers().saturating_sub(1)).collect());
    if layers.is_empty() {
        return Err(CliError::config("--layers: the model has no hidden layer to cluster"));
    }
    check_layers(model, &layers, "--layers")?;
    let mut ks = args.ks.clone();
    if !ks.contains(&args.k) {
        ks.push(args.k);
    }
    for &k in &ks {
        let max = layers.iter().map(|&l| model.weight(l).rows().min(model.weight(l).cols())).min().unwrap();
        if k == 0 || k > 8 || k > max {
            return Err(CliError::config(format!("--k/--ks: k = {k} must lie in 1..={}", max.min(8))));
        }
    }
    let source_name = match args.source {
        SimilaritySource::Weight => "weight",
        SimilaritySource::Gradient => "gradient",
    };
    let mut similarities = Vec::new();
    for &l in &layers {
        let s = match args.source {
            SimilaritySource::Weight => weight_similarity(model.weight(l)),
            SimilaritySource::Gradient => {
                let trace = ck.grad_traces.get(l).and_then(Option::as_ref).filter(|t| t.step_count() > 0);
                let trace = trace.ok_or_else(|| {
                    CliError::config(format!(
                        "--source gradient: the checkpoint stores no gradient trace for layer {l}; \
                         train with --warmup-steps or --record-grad-trace"
                    ))
                })?;
                gradient_similarity(trace)?
            }
        };
        similarities.push(s);
    }

    let mut rows = Vec::new();
    let mut chosen = Vec::new();
    for (&l, s) in layers.iter().zip(&similarities) {
        for &k in &args.ks {
            let c = bsgc_floored(s, k, args.seed)?;
            rows.push(KSweepRow {
                layer: l,
                k,
                source: source_name.into(),
                clusterability: clusterability(model.weight(l), &c)?.c,
                baseline: random_baseline(k)?,
            });
        }
        chosen.push(bsgc_floored(s, args.k, args.seed)?);
    }

    let mut clustered = ck.clone();
    let mut file = ClustersFile {
        source: source_name,
        k: args.k,
        seed: args.seed,
        layers: Vec::new(),
    };
    for (&l, c) in layers.iter().zip(chosen) {
        file.layers.push(LayerClusters {
            layer: l,
            clusterability: clusterability(model.weight(l), &c)?.c,
            row_assign: c.row_assign().to_vec(),
            col_assign: c.col_assign().to_vec(),
        });
        clustered.model.set_clustering(l, Some(c))?;
    }
    let out = out_dir(args.out.as_deref());
    write(&out, "clusters.json", &to_json(&file))?;
    write(&out, "clusterability-vs-k.csv", &clusterability_vs_k_csv(&rows))?;
    write(&out, "checkpoint.json", &clustered.to_json())?;
    Ok(())
}

fn test_data(cfg: &RunConfig, model: &MlpModel) -> Result<Dataset> {
    cfg.dataset.validate()?;
    if cfg.dataset.dim() != model.dims()[0] {
        return Err(CliError::config(format!(
            "--dataset: the data has {} features but the model expects {}",
            cfg.dataset.dim(),
            model.dims()[0]
        )));
    }
    Ok(cfg.dataset.load()?.1)
}

pub fn analyze(args: AnalyzeArgs) -> Result<()> {
    let mut cfg = resolve(&args.run)?;
    let a = &mut cfg.analysis;
    a.interventions |= args.interventions;
    a.histograms |= args.histograms;
    a.ecs |= args.ecs;
    a.heatmap |= args.heatmap;
    if args.layers.is_some() {
        a.layers = args.layers.clone();
    }
    if args.ecs_max_samples.is_some() {
        a.ecs_config.max_samples = args.ecs_max_samples;
    }
    let a = cfg.analysis.clone();
    if !(a.interventions || a.histograms || a.ecs || a.heatmap) {
        return Err(CliError::config(
            "no analysis requested; pass --interventions, --histograms, --ecs or --heatmap",
        ));
    }
    let ck = open_checkpoint(&args.checkpoint)?;
    let model = &ck.model;
    let other = args.compare.as_deref().map(open_checkpoint).transpose()?;
    if let Some(o) = &other {
        if o.model.dims() != model.dims() {
            return Err(CliError::config(format!(
                "--compare: dims {:?} differ from {:?}",
                o.model.dims(),
                model.dims()
            )));
        }
    }

    let clustered: Vec<usize> = (0..model.n_layers()).filter(|&l| model.clustering(l).is_some()).collect();
    let layers = a.layers.clone().unwrap_or_else(|| clustered.clone());
    check_layers(model, &layers, "--layers")?;
    if a.interventions || a.histograms {
        if layers.is_empty() {
            return Err(CliError::config(
                "--interventions/--histograms: the checkpoint has no clustered layer; run `bsgc` first",
            ));
        }
        if let Some(l) = layers.iter().find(|l| !clustered.contains(l)) {
            return Err(CliError::config(format!("--layers: layer {l} has no clustering")));
        }
    }
    let data = if a.interventions || a.histograms || a.ecs { Some(test_data(&cfg, model)?) } else { None };
    let out = cfg.out_dir();

    if a.interventions {
        let data = data.as_ref().unwrap();
        let mut matrices = Vec::new();
        for &l in &layers {
            for mode in [InterventionMode::On, InterventionMode::Off] {
                matrices.push(intervention_matrix(model, l, mode, data)?);
            }
        }
        write(&out, "interventions.csv", &interventions_csv(&matrices))?;
    }
    if a.histograms {
        let data = data.as_ref().unwrap();
        let mut hists = Vec::new();
        let mut nulls = Vec::new();
        for &l in &layers {
            let h = sufficiency_histogram(model, l, data)?;
            for m in 1..=h.k {
                nulls.push((l, null_dependency(model, l, data, m)?));
            }
            hists.push(h);
        }
        write(&out, "sufficiency.csv", &sufficiency_csv(&hists))?;
        write(&out, "null_dependency.csv", &null_dependency_csv(&nulls))?;
    }
    if a.ecs {
        let data = data.as_ref().unwrap();
        match &other {
            Some(o) => {
                let (ra, rb) = effective_circuit_pairs(model, &o.model, data, &a.ecs_config)?;
                write(&out, "ecs.csv", &ecs_csv(&ra))?;
                write(&out, "ecs_compare.csv", &ecs_compare_csv(&compare_reports(&ra, &rb)?))?;
            }
            None => {
                let reports = effective_circuits(model, data, &a.ecs_config)?;
                write(&out, "ecs.csv", &ecs_csv(&reports))?;
            }
        }
    }
    if a.heatmap {
        let l = layers.first().copied().unwrap_or(0);
        write(&out, "heatmap.csv", &heatmap_csv(model.weight(l), model.clustering(l)))?;
    }
    Ok(())
}

fn parse_list(flag: &str, text: &str) -> Result<Vec<usize>> {
    let parts: std::result::Result<Vec<usize>, _> = text.split(',').map(|p| p.trim().parse()).collect();
    match parts {
        Ok(v) if !v.is_empty() && !v.contains(&0) => Ok(v),
        _ => Err(CliError::config(format!(
            "--{flag}: expected a comma-separated list of positive integers, got `{text}`"
        ))),
    }
}

fn split_pair<'a>(flag: &str, text: &'a str) -> Result<(&'a str, &'a str)> {
    text.split_once(':')
        .ok_or_else(|| CliError::config(format!("--{flag}: expected `A:B`, got `{text}`")))
}

fn count_row(calculator: &str, inputs: String, v: &BigCount) -> TheoryRow {
    TheoryRow {
        calculator: calculator.into(),
        inputs,
        exact: Some(v.to_decimal()),
        log2: v.log2(),
        ln: v.ln(),
    }
}

fn as_config(e: clusterlab::Error) -> CliError {
    CliError::config(e.to_string())
}

pub fn theory(args: TheoryArgs) -> Result<()> {
    let defaults = args.dense.is_empty()
        && args.pair.is_empty()
        && args.fully_modular.is_empty()
        && args.jl.is_empty()
        && args.capacity.is_empty();
    let (dense, pair, jl, capacity) = if defaults {
        (
            vec!["64,64".to_string()],
            vec!["64:16,16,16,16".to_string()],
            vec!["100:0.5".to_string()],
            vec!["16,16,16,16".to_string()],
        )
    } else {
        (args.dense, args.pair, args.jl, args.capacity)
    };

    let mut rows = Vec::new();
    for d in &dense {
        let widths = parse_list("dense", d)?;
        let v = polytope_bound_dense(&widths).map_err(as_config)?;
        rows.push(count_row("polytope_bound_dense", format!("widths={d}"), &v));
    }
    for p in &pair {
        let (n, parts) = split_pair("pair", p)?;
        let n_prev = parse_list("pair", n)?[0];
        let parts = parse_list("pair", parts)?;
        let width: usize = parts.iter().sum();
        let partition = ModularPartition::new(parts).map_err(as_config)?;
        let d = polytope_pair_count_dense(n_prev, width).map_err(as_config)?;
        let m = polytope_pair_count_modular(n_prev, &partition).map_err(as_config)?;
        rows.push(count_row("polytope_pair_dense", format!("n_prev={n_prev} n_l={width}"), &d));
        rows.push(count_row("polytope_pair_modular", format!("n_prev={n_prev} parts={}", p.split_once(':').unwrap().1), &m));
    }
    for p in &args.fully_modular {
        let (ins, outs) = split_pair("fully-modular", p)?;
        let partition = ModularPartition::with_inputs(parse_list("fully-modular", outs)?, parse_list("fully-modular", ins)?)
            .map_err(as_config)?;
        let v = polytope_pair_count_fully_modular(&partition).map_err(as_config)?;
        rows.push(count_row("polytope_pair_fully_modular", format!("in={ins} out={outs}"), &v));
    }
    for j in &jl {
        let (n, eps) = split_pair("jl", j)?;
        let n = parse_list("jl", n)?[0];
        let eps: f64 = eps
            .trim()
            .parse()
            .map_err(|_| CliError::config(format!("--jl: `{eps}` is not a number")))?;
        let m = jl_capacity(n, eps).map_err(as_config)?;
        rows.push(TheoryRow {
            calculator: "jl_capacity".into(),
            inputs: format!("n={n} eps={eps}"),
            exact: Some(m.to_string()),
            log2: (m as f64).log2(),
            ln: (m as f64).ln(),
        });
    }
    for c in &capacity {
        let parts = parse_list("capacity", c)?;
        let cmp = modular_capacity_comparison(&parts).map_err(as_config)?;
        for (name, ln) in [("capacity_modular", cmp.modular_log), ("capacity_dense", cmp.dense_log)] {
            rows.push(TheoryRow {
                calculator: name.into(),
                inputs: format!("parts={c}"),
                exact: None,
                log2: ln / std::f64::consts::LN_2,
                ln,
            });
        }
    }
    write(&out_dir(args.out.as_deref()), "theory.csv", &theory_csv(&rows))
}

pub fn sweep(args: SweepArgs) -> Result<()> {
    let mut cfg = resolve(&args.run)?;
    let ck = open_checkpoint(&args.checkpoint)?;
    if args.run.config.is_none() {
        if let Some(plan) = &ck.plan {
            cfg.plan = plan.clone();
            if let Some(l) = args.run.lambda {
                cfg.plan.lambda = l;
            }
            if let Some(s) = args.run.seed {
                cfg.plan.seed = s;
            }
            if let Some(k) = args.run.k {
                cfg.plan.k = k;
            }
        }
    }
    if let Some(e) = args.epochs {
        cfg.plan.epochs = e;
    }
    cfg.plan.dims = ck.model.dims().to_vec();
    cfg.plan.clustered_layers = Some(vec![args.layer]);
    check_layers(&ck.model, &[args.layer], "--layer")?;
    if args.layer == ck.model.output_layer() {
        cfg.plan.allow_output_layer = true;
    }
    cfg.validate()?;
    let mut sweep_cfg = SweepConfig::default();
    if let Some(t) = args.tolerance {
        if t.is_nan() || t < 0.0 {
            return Err(CliError::config("--tolerance: must be non-negative"));
        }
        sweep_cfg.accuracy_tolerance = t;
    }

    let (train_set, test_set) = cfg.dataset.load()?;
    let res = max_clusterability_sweep(&ck.model, args.layer, &cfg.plan, &sweep_cfg, &train_set, &test_set)?;
    let out = cfg.out_dir();
    let mut csv = String::from("step,clusterability,test_acc\n");
    for (step, c, acc) in &res.trace {
        csv.push_str(&format!("{step},{c},{acc}\n"));
    }
    write(&out, "sweep.csv", &csv)?;
    write(&out, "sweep.json", &to_json(&res))?;
    println!("layer {}: C {:.4} -> max {:.4}", res.layer, res.initial_c, res.max_c);
    Ok(())
}
