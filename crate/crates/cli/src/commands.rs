use std::path::Path;

use pego_core::autograd::{grad_check, gradcheck_fixture, Fault};
use pego_core::checkpoint::{load_dataset, load_model, save_dataset, save_model, Precision};
use pego_core::data::{generate_dataset, DomainDataset, Sample};
use pego_core::diagnostics::{default_layer, feature_projection, layer_weights, parse_layer, weight_pc_report};
use pego_core::numerics::Rng;
use pego_core::pego::{merge_all, strip_adapters};
use pego_core::report::{
    ablation_csv, feature_proj_csv, history_csv, lodo_csv, pc_cosine_csv, pc_evr_csv, summary_csv, sweep_csv,
    write_atomic,
};
use pego_core::trainer::{
    ablate as run_ablation, accuracy, effective_jobs, leave_one_domain_out, pretrain_base, run_one, sweep_n,
    LodoResult, TrainConfig, FULL_SCALE_ITERATIONS,
};
use pego_core::{PegoError, Result, VitModel};
use serde::Serialize;

use crate::manifest::ManifestBuilder;
use crate::{
    AnalyzeArgs, ConfigArgs, EvalArgs, GenArgs, GradcheckArgs, InjectedFault, PretrainArgs, ProtocolArgs, SweepArgs,
    TrainArgs,
};

/// Thresholds on the maximum relative error at alpha = 0 and alpha = 1e-3.
const GRADCHECK_CASES: [(f64, f64); 2] = [(0.0, 1e-6), (1e-3, 1e-5)];

fn load_config(args: &ConfigArgs) -> Result<TrainConfig> {
    let mut cfg = match &args.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::canonical(),
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(a) = args.alpha {
        cfg.alpha = a;
    }
    if let Some(r) = args.rank {
        cfg.rank = r;
    }
    if let Some(n) = args.group_n {
        cfg.group_n = n;
    }
    if let Some(lr) = args.lr {
        cfg.lr = lr;
    }
    if let Some(i) = args.iters {
        cfg.iterations = i;
    }
    if args.paper_iters {
        cfg.iterations = FULL_SCALE_ITERATIONS;
    }
    if let Some(b) = args.batch_per_domain {
        cfg.batch_per_domain = b;
    }
    cfg.validate()?;
    for w in cfg.default_deviations() {
        eprintln!("warning: {w}");
    }
    Ok(cfg)
}

fn dataset_for(path: &Path, cfg: &TrainConfig) -> Result<DomainDataset> {
    let ds = load_dataset(path)?;
    if ds.image_size != cfg.vit.image_size {
        return Err(PegoError::Config(format!(
            "dataset images are {0}x{0} but the model expects {1}x{1}",
            ds.image_size, cfg.vit.image_size
        )));
    }
    ds.validate()?;
    Ok(ds)
}

fn base_model(path: Option<&Path>, cfg: &TrainConfig) -> Result<VitModel> {
    let model = match path {
        Some(p) => load_model(p)?,
        None => {
            eprintln!("fitting the backbone ({} iterations)", cfg.pretrain.iterations);
            pretrain_base(cfg)?.model
        }
    };
    if model.config.image_size != cfg.vit.image_size || model.num_adapted() != 0 {
        return Err(PegoError::Config(
            "base checkpoint must be an adapter-free model of the configured geometry".into(),
        ));
    }
    Ok(model)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| PegoError::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn write_text(dir: &Path, name: &str, text: &str, manifest: &mut ManifestBuilder) -> Result<()> {
    let path = dir.join(name);
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    write_atomic(&path, text.as_bytes())?;
    manifest.artifact(name);
    Ok(())
}

/// Output files must land in an existing directory.
fn check_parent(out: &Path) -> Result<()> {
    match out.parent() {
        Some(p) if !p.as_os_str().is_empty() && !p.is_dir() => Err(PegoError::Config(format!(
            "output directory {} does not exist",
            p.display()
        ))),
        _ => Ok(()),
    }
}

pub fn gen(a: &GenArgs) -> Result<u8> {
    let mut cfg = load_config(&a.cfg)?;
    if let Some(s) = a.cfg.seed {
        cfg.data.seed = s;
    }
    check_parent(&a.out)?;
    let ds = generate_dataset(&cfg.data, cfg.data.seed)?;
    save_dataset(&ds, &a.out)?;
    println!("{} domains x {} classes", ds.domains.len(), ds.num_classes);
    for (d, counts) in ds.domains.iter().zip(ds.class_counts()) {
        let counts: Vec<String> = counts.iter().map(usize::to_string).collect();
        println!("{}: {}", d.name, counts.join(" "));
    }
    Ok(0)
}

pub fn pretrain(a: &PretrainArgs) -> Result<u8> {
    let cfg = load_config(&a.cfg)?;
    check_parent(&a.out)?;
    let out = pretrain_base(&cfg)?;
    save_model(&out.model, &a.out, Precision::F64)?;
    let tail = &out.losses[out.losses.len().saturating_sub(50)..];
    if !tail.is_empty() {
        println!(
            "final pretraining loss {}",
            tail.iter().sum::<f64>() / tail.len() as f64
        );
    }
    Ok(0)
}

pub fn train(a: &TrainArgs) -> Result<u8> {
    let cfg = load_config(&a.cfg)?;
    let ds = dataset_for(&a.dataset, &cfg)?;
    let held_out = ds.resolve_domain(&a.test_domain)?;
    let base = base_model(a.base.as_deref(), &cfg)?;
    create_dir(&a.out)?;
    let mut manifest = ManifestBuilder::new(&cfg, Some(&a.dataset), vec![cfg.seed], 1)?;

    let run = run_one(&base, &ds, &cfg, held_out, cfg.seed)?;
    let merged = merge_all(run.adapted.clone());
    save_model(&run.adapted, &a.out.join("adapted.ckpt"), Precision::F64)?;
    manifest.artifact("adapted.ckpt");
    save_model(&merged, &a.out.join("merged.ckpt"), Precision::F64)?;
    manifest.artifact("merged.ckpt");
    write_text(&a.out, "metrics.csv", &history_csv(&run.history), &mut manifest)?;
    write_text(
        &a.out,
        "summary.csv",
        &summary_csv(std::slice::from_ref(&run)),
        &mut manifest,
    )?;
    println!(
        "held-out {} accuracy {} (validation {} at iteration {})",
        run.test_name, run.accuracy, run.best_val_acc, run.selected_iter
    );
    manifest.write(&a.out)?;
    Ok(0)
}

pub fn eval(a: &EvalArgs) -> Result<u8> {
    let model = load_model(&a.checkpoint)?;
    let ds = load_dataset(&a.dataset)?;
    if ds.image_size != model.config.image_size {
        return Err(PegoError::Config(
            "dataset and checkpoint disagree on image size".into(),
        ));
    }
    let d = ds.resolve_domain(&a.domain)?;
    let acc = accuracy(&model, &ds.domains[d].samples)?;
    println!("accuracy {} {acc}", ds.domains[d].name);
    Ok(0)
}

struct ProtocolSetup {
    cfg: TrainConfig,
    ds: DomainDataset,
    base: VitModel,
    jobs: usize,
    manifest: ManifestBuilder,
}

fn protocol_setup(a: &ProtocolArgs) -> Result<ProtocolSetup> {
    let cfg = load_config(&a.cfg)?;
    if a.seeds.is_empty() {
        return Err(PegoError::Config("at least one seed is required".into()));
    }
    let ds = dataset_for(&a.dataset, &cfg)?;
    let base = base_model(a.base.as_deref(), &cfg)?;
    create_dir(&a.out)?;
    let jobs = effective_jobs(a.jobs);
    let manifest = ManifestBuilder::new(&cfg, Some(&a.dataset), a.seeds.clone(), jobs)?;
    Ok(ProtocolSetup {
        cfg,
        ds,
        base,
        jobs,
        manifest,
    })
}

fn write_lodo(dir: &Path, prefix: &str, r: &LodoResult, manifest: &mut ManifestBuilder) -> Result<()> {
    for rec in &r.records {
        let name = format!("{prefix}metrics/{}_seed{}.csv", rec.test_name, rec.seed);
        write_text(dir, &name, &history_csv(&rec.history), manifest)?;
    }
    write_text(dir, &format!("{prefix}summary.csv"), &summary_csv(&r.records), manifest)?;
    write_text(dir, &format!("{prefix}lodo.csv"), &lodo_csv(r), manifest)
}

pub fn lodo(a: &ProtocolArgs) -> Result<u8> {
    let mut s = protocol_setup(a)?;
    let r = leave_one_domain_out(&s.base, &s.ds, &s.cfg, &a.seeds, s.jobs)?;
    write_lodo(&a.out, "", &r, &mut s.manifest)?;
    for d in &r.per_domain {
        println!("{} {} +- {}", d.name, d.mean, d.stderr);
    }
    println!("average {} +- {}", r.average, r.average_stderr());
    s.manifest.write(&a.out)?;
    Ok(0)
}

pub fn ablate(a: &ProtocolArgs) -> Result<u8> {
    let mut s = protocol_setup(a)?;
    let rows = run_ablation(&s.base, &s.ds, &s.cfg, &a.seeds, s.jobs)?;
    for (k, row) in rows.iter().enumerate() {
        write_lodo(&a.out, &format!("variant{k}/"), &row.lodo, &mut s.manifest)?;
    }
    let table = ablation_csv(&rows);
    write_text(&a.out, "ablation.csv", &table, &mut s.manifest)?;
    print!("{table}");
    s.manifest.write(&a.out)?;
    Ok(0)
}

pub fn sweep(a: &SweepArgs) -> Result<u8> {
    let mut s = protocol_setup(&a.protocol)?;
    let values = a.values.clone().unwrap_or_else(|| s.cfg.n_search.clone());
    let r = sweep_n(&s.base, &s.ds, &s.cfg, &values, &a.protocol.seeds, s.jobs)?;
    let table = sweep_csv(&r);
    write_text(&a.protocol.out, "sweep.csv", &table, &mut s.manifest)?;
    print!("{table}");
    println!("selected N = {}", r.selected);
    s.manifest.write(&a.protocol.out)?;
    Ok(0)
}

pub fn gradcheck(a: &GradcheckArgs) -> Result<u8> {
    let (model, batch) = gradcheck_fixture(a.seed)?;
    let fault = a.inject_fault.map(|f| match f {
        InjectedFault::L1Sign => Fault::FlipL1Sign,
    });
    let mut ok = true;
    for (k, (alpha, threshold)) in GRADCHECK_CASES.into_iter().enumerate() {
        let mut rng = Rng::new(a.seed.wrapping_add(k as u64 + 1));
        let r = grad_check(&model, &batch, alpha, a.samples, &mut rng, fault)?;
        let pass = r.max_rel_error < threshold;
        ok &= pass;
        println!(
            "alpha={alpha} probes={} accepted={} skipped={} max_rel_error={:.3e} threshold={threshold:e} {}",
            a.samples,
            r.accepted,
            r.skipped,
            r.max_rel_error,
            if pass { "PASS" } else { "FAIL" }
        );
    }
    Ok(if ok { 0 } else { 1 })
}

#[derive(Serialize)]
struct PcMeta {
    layer: String,
    k: usize,
    numerical_rank: usize,
    rank_threshold: f64,
    mean_abs_cosine: f64,
}

/// Up to `max` samples taken at even strides through every domain.
fn spread_samples(ds: &DomainDataset, max: usize) -> Vec<Sample> {
    let per = max.div_ceil(ds.domains.len()).max(1);
    ds.domains
        .iter()
        .flat_map(|d| {
            let m = per.min(d.len());
            (0..m).map(move |i| d.samples[i * d.len() / m].clone())
        })
        .take(max)
        .collect()
}

pub fn analyze(a: &AnalyzeArgs) -> Result<u8> {
    let ckpt = load_model(&a.checkpoint)?;
    let ds = load_dataset(&a.dataset)?;
    let (block, kind) = match &a.layer {
        Some(spec) => parse_layer(spec)?,
        None => default_layer(&ckpt),
    };
    let (pre, post, w, delta) = if ckpt.num_adapted() > 0 {
        let (w, delta) = layer_weights(&ckpt, block, kind)?;
        (strip_adapters(ckpt.clone()), merge_all(ckpt), w, delta)
    } else {
        let Some(pre_path) = &a.pre else {
            return Err(PegoError::Input(
                "checkpoint has no adapters; pass --pre with the backbone it was trained from".into(),
            ));
        };
        let pre = load_model(pre_path)?;
        let weight = |m: &VitModel| {
            m.projection(block, kind)
                .map(|p| p.weight().clone())
                .ok_or_else(|| PegoError::Input(format!("no block {block}")))
        };
        let w = weight(&pre)?;
        let delta = weight(&ckpt)?.sub(&w)?;
        (pre, ckpt, w, delta)
    };
    let k = a.k.min(w.rows().min(w.cols()));
    let report = weight_pc_report(&w, &delta, k)?;
    create_dir(&a.out)?;
    let mut manifest = ManifestBuilder::new(&TrainConfig::canonical(), Some(&a.dataset), Vec::new(), 1)?;
    write_text(&a.out, "pc_evr.csv", &pc_evr_csv(&report), &mut manifest)?;
    write_text(&a.out, "pc_cosine.csv", &pc_cosine_csv(&report), &mut manifest)?;

    let samples = spread_samples(&ds, a.max_samples);
    let models = [("pre".to_string(), &pre), ("post".to_string(), &post)];
    let proj = feature_projection(&models, &samples)?;
    write_text(&a.out, "feature_proj.csv", &feature_proj_csv(&proj), &mut manifest)?;

    let meta = PcMeta {
        layer: format!("{block}.{}", kind.name()),
        k,
        numerical_rank: report.numerical_rank,
        rank_threshold: report.rank_threshold,
        mean_abs_cosine: report.mean_abs_cosine(),
    };
    let json = serde_json::to_string_pretty(&meta).expect("metadata serializes");
    write_text(&a.out, "pc_report.json", &json, &mut manifest)?;
    println!(
        "layer {} numerical_rank {} (sigma > {} sigma_1) mean_abs_cosine {}",
        meta.layer, meta.numerical_rank, meta.rank_threshold, meta.mean_abs_cosine
    );
    manifest.write(&a.out)?;
    Ok(0)
}
