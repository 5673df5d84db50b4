//! Acceptance gate. Runs every criterion at its stated tolerance, prints one
//! PASS/FAIL line each and exits nonzero if any fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use pego_core::data::generate_dataset;
use pego_core::diagnostics::{default_layer, layer_weights, weight_pc_report};
use pego_core::numerics::{svd, Matrix, Rng};
use pego_core::pego::{
    diversify_terms, feature_orthogonality_gap, init_group, inject_groups, loss_diversify, loss_or, loss_orthogonal,
    loss_preserve, merge_all, preserve_terms, AdaptedLinear, LoraGroup, LoraModule,
};
use pego_core::report::{ablation_csv, history_csv, summary_csv};
use pego_core::trainer::{
    ablate, check_frozen, leave_one_domain_out, pretrain_base, run_one, train, AblationRow, LodoResult, RunRecord,
    TrainConfig, TrainSplit, DEFAULT_LR, DEFAULT_RANK, DEFAULT_VAL_FRACTION, N_SEARCH_SPACE,
};
use pego_core::vit::Linear;
use pego_core::{init_vit, DomainDataset, VitConfig, VitModel};

const SEEDS: [u64; 3] = [0, 1, 2];
const CHANCE: f64 = 0.25;

type Outcome = Result<String, String>;

/// Name, check and optional runtime budget.
type Criterion = (&'static str, fn() -> Outcome, Option<Duration>);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($msg)+));
        }
    };
}

struct Toy {
    cfg: TrainConfig,
    ds: DomainDataset,
    base: VitModel,
    pretrain_time: Duration,
}

fn toy() -> &'static Toy {
    static TOY: OnceLock<Toy> = OnceLock::new();
    TOY.get_or_init(|| {
        let cfg = TrainConfig::canonical();
        let ds = generate_dataset(&cfg.data, cfg.data.seed).expect("dataset");
        let t = Instant::now();
        let base = pretrain_base(&cfg).expect("pretraining").model;
        Toy {
            cfg,
            ds,
            base,
            pretrain_time: t.elapsed(),
        }
    })
}

/// The PEGO LODO run timed on its own, pretraining included.
fn pego_lodo() -> &'static (LodoResult, Duration) {
    static RUN: OnceLock<(LodoResult, Duration)> = OnceLock::new();
    RUN.get_or_init(|| {
        let t = toy();
        let start = Instant::now();
        let r = leave_one_domain_out(&t.base, &t.ds, &t.cfg, &SEEDS, 1).expect("lodo");
        (r, start.elapsed() + t.pretrain_time)
    })
}

fn ablation() -> &'static Vec<AblationRow> {
    static ROWS: OnceLock<Vec<AblationRow>> = OnceLock::new();
    ROWS.get_or_init(|| {
        let t = toy();
        ablate(&t.base, &t.ds, &t.cfg, &SEEDS, 1).expect("ablation")
    })
}

/// Rank-growth runs: label, config, one record per seed.
fn diagnostic_runs() -> &'static Vec<(&'static str, Vec<RunRecord>)> {
    static RUNS: OnceLock<Vec<(&'static str, Vec<RunRecord>)>> = OnceLock::new();
    RUNS.get_or_init(|| {
        let t = toy();
        let variant = |group_n, alpha| TrainConfig {
            rank: 2,
            group_n,
            alpha,
            ..t.cfg.clone()
        };
        let configs = [
            ("pego", variant(4, 1e-3)),
            ("single", variant(1, 0.0)),
            ("stress", variant(4, 1e-1)),
            ("unregularized", variant(4, 0.0)),
        ];
        configs
            .into_iter()
            .map(|(label, cfg)| {
                let records = SEEDS
                    .iter()
                    .map(|&s| run_one(&t.base, &t.ds, &cfg, 0, s).expect("diagnostic run"))
                    .collect();
                (label, records)
            })
            .collect()
    })
}

fn adapted_layer(d: usize, k: usize, r: usize, n: usize, rng: &mut Rng) -> AdaptedLinear {
    let modules = (0..n)
        .map(|_| LoraModule {
            a: rng.gaussian_matrix(r, k, 1.0),
            b: rng.gaussian_matrix(d, r, 1.0),
        })
        .collect();
    let base = Linear {
        weight: rng.gaussian_matrix(d, k, 1.0),
        bias: rng.gaussian_matrix(d, 1, 1.0),
    };
    AdaptedLinear::new(base, LoraGroup::new(modules).unwrap()).unwrap()
}

fn merge_equivalence() -> Outcome {
    let mut rng = Rng::new(1);
    let mut worst = 0.0f64;
    for m in 0..20 {
        let cfg = VitConfig {
            embed_dim: 32,
            num_blocks: 2,
            ..VitConfig::default()
        };
        let mut model = init_vit(&cfg, &mut rng).map_err(|e| e.to_string())?;
        let n = [1, 2, 4][m % 3];
        let r = [2, 4][m % 2];
        inject_groups(&mut model, r, n, &mut rng).map_err(|e| e.to_string())?;
        // Nonzero B so the merge has something to fold.
        for (name, p) in model.params_mut() {
            if name.ends_with(".B") {
                *p = rng.gaussian_matrix(p.rows(), p.cols(), 0.1);
            }
        }
        let images: Vec<Matrix> = (0..20).map(|_| rng.gaussian_matrix(16, 16, 1.0)).collect();
        let refs: Vec<&Matrix> = images.iter().collect();
        let grouped = model.logits_batch(&refs).map_err(|e| e.to_string())?;
        let merged_model = merge_all(model);
        ensure!(merged_model.num_adapted() == 0, "merge left adapters behind");
        let merged = merged_model.logits_batch(&refs).map_err(|e| e.to_string())?;
        worst = worst.max(grouped.sub(&merged).map_err(|e| e.to_string())?.max_abs());
    }
    ensure!(worst <= 1e-9, "max logit gap {worst:e} > 1e-9");
    Ok(format!("max logit gap {worst:.2e} over 20 models x 20 images"))
}

fn gradient_oracle() -> Outcome {
    let out = Command::new(env!("CARGO_BIN_EXE_pego"))
        .args(["gradcheck", "--samples", "200"])
        .output()
        .map_err(|e| e.to_string())?;
    let text = String::from_utf8_lossy(&out.stdout).trim().replace('\n', "; ");
    ensure!(out.status.success(), "exit {:?}: {text}", out.status.code());
    Ok(text)
}

fn init_zero_losses() -> Outcome {
    let mut rng = Rng::new(3);
    for _ in 0..200 {
        let d = 1 + rng.below(24);
        let k = 1 + rng.below(24);
        let r = 1 + rng.below(d.min(k));
        let n = 1 + rng.below(6);
        let group = init_group(d, k, r, n, &mut rng).map_err(|e| e.to_string())?;
        let base = Linear {
            weight: rng.gaussian_matrix(d, k, 1.0),
            bias: Matrix::zeros(d, 1),
        };
        let layer = AdaptedLinear::new(base, group).map_err(|e| e.to_string())?;
        let values = [
            loss_preserve(&layer),
            loss_diversify(&layer.group),
            loss_orthogonal(&layer),
        ];
        ensure!(values == [0.0; 3], "nonzero at d={d} k={k} r={r} n={n}: {values:?}");
    }
    let mut model = init_vit(&VitConfig::default(), &mut rng).map_err(|e| e.to_string())?;
    inject_groups(&mut model, 4, 4, &mut rng).map_err(|e| e.to_string())?;
    ensure!(loss_or(&model) == 0.0, "whole-model loss_or is {}", loss_or(&model));
    Ok("exactly zero on 200 random shapes and an injected model".into())
}

fn feature_identity() -> Outcome {
    let mut rng = Rng::new(4);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let layer = adapted_layer(8, 8, 1 + rng.below(4), 1 + rng.below(4), &mut rng);
        let z: Vec<f64> = (0..8).map(|_| rng.gaussian()).collect();
        worst = worst.max(feature_orthogonality_gap(&layer, &z).map_err(|e| e.to_string())?);
    }
    ensure!(worst < 1e-9, "gap {worst:e}");
    Ok(format!("max gap {worst:.2e} over 100 pairs"))
}

fn loss_algebra() -> Outcome {
    let mut rng = Rng::new(5);
    for _ in 0..100 {
        let layer = adapted_layer(1 + rng.below(8), 1 + rng.below(8), 1, 1 + rng.below(4), &mut rng);
        ensure!(
            loss_preserve(&layer) >= 0.0 && loss_diversify(&layer.group) >= 0.0,
            "negative loss"
        );
    }

    let layer = adapted_layer(6, 5, 2, 3, &mut rng);
    let reference = loss_diversify(&layer.group);
    for order in [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]] {
        let g = LoraGroup::new(order.iter().map(|&i| layer.group.modules[i].clone()).collect()).unwrap();
        let gap = (loss_diversify(&g) - reference).abs();
        ensure!(gap <= 1e-12, "order {order:?} differs by {gap:e}");
    }

    let mut scaled = layer.clone();
    scaled.group.modules[1].b = scaled.group.modules[1].b.scale(2.0);
    for (i, (p0, p1)) in preserve_terms(&layer).iter().zip(preserve_terms(&scaled)).enumerate() {
        let want = if i == 1 { 2.0 * p0 } else { *p0 };
        ensure!((p1 - want).abs() <= 1e-12 * want.max(1.0), "preserve term {i}");
    }
    for (((i, j), v0), (_, v1)) in diversify_terms(&layer.group).iter().zip(diversify_terms(&scaled.group)) {
        let want = if *i == 1 || *j == 1 { 2.0 * v0 } else { *v0 };
        ensure!((v1 - want).abs() <= 1e-12 * want.max(1.0), "diversify term ({i},{j})");
    }

    for _ in 0..50 {
        let n = 1 + rng.below(5);
        let r = 1 + rng.below(4);
        let layer = adapted_layer(16, 16, r, n, &mut rng);
        let rank = svd(&layer.group.delta())
            .map_err(|e| e.to_string())?
            .numerical_rank(1e-10);
        ensure!(rank <= n * r, "rank {rank} > N*r = {}", n * r);
    }
    Ok("nonnegativity, 3! orders, term-by-term homogeneity, rank bound on 50 groups".into())
}

fn toy_lodo() -> Outcome {
    let rows = ablation();
    let pego = &rows[0];
    let plain = &rows[3];
    ensure!(
        pego.preserve && pego.diversify && !plain.preserve && !plain.diversify,
        "unexpected row order"
    );
    let (_, elapsed) = pego_lodo();
    let mut failures = Vec::new();
    if pego.mean < CHANCE + 0.25 {
        failures.push(format!("(a) {:.4} < {:.2}", pego.mean, CHANCE + 0.25));
    }
    if pego.mean < plain.mean - 0.02 {
        failures.push(format!("(b) {:.4} < {:.4} - 0.02", pego.mean, plain.mean));
    }
    if elapsed.as_secs_f64() >= 15.0 * 60.0 {
        failures.push(format!("(c) {:.0}s", elapsed.as_secs_f64()));
    }
    let detail = format!(
        "PEGO {:.4}±{:.4}, unregularized group {:.4}±{:.4}, full run {:.0}s",
        pego.mean,
        pego.stderr,
        plain.mean,
        plain.stderr,
        elapsed.as_secs_f64()
    );
    ensure!(failures.is_empty(), "{detail}; failed {}", failures.join(", "));
    Ok(detail)
}

fn ablation_shape() -> Outcome {
    let rows = ablation();
    let csv = ablation_csv(rows);
    let lines: Vec<&str> = csv.lines().collect();
    ensure!(lines.len() == 6, "expected header + 5 rows, got {}", lines.len());
    ensure!(
        lines[0] == "method,preserve,diversify,group_n,alpha,mean,stderr",
        "header {}",
        lines[0]
    );
    let grid: Vec<(bool, bool)> = rows[..4].iter().map(|r| (r.preserve, r.diversify)).collect();
    ensure!(
        grid == [(true, true), (true, false), (false, true), (false, false)],
        "grid {grid:?}"
    );
    ensure!(rows[..4].iter().all(|r| r.group_n == 4), "grid rows must use the group");
    ensure!(
        rows[4].label == "LoRA" && rows[4].group_n == 1 && rows[4].alpha == 0.0,
        "reference row"
    );
    for r in rows {
        ensure!(
            r.lodo.seed_averages.len() == 3,
            "{}: {} seeds",
            r.label,
            r.lodo.seed_averages.len()
        );
        ensure!(
            r.mean.is_finite() && r.stderr.is_finite() && r.stderr >= 0.0,
            "{}: bad stats",
            r.label
        );
    }
    Ok(lines[1..].join(" | "))
}

fn rank_and_cosine(rec: &RunRecord) -> Result<(usize, f64), String> {
    let (block, kind) = default_layer(&rec.adapted);
    let (w, delta) = layer_weights(&rec.adapted, block, kind).map_err(|e| e.to_string())?;
    let report = weight_pc_report(&w, &delta, 4).map_err(|e| e.to_string())?;
    Ok((report.numerical_rank, report.mean_abs_cosine()))
}

fn rank_growth() -> Outcome {
    let runs = diagnostic_runs();
    let stats = |label: &str| -> Result<Vec<(usize, f64)>, String> {
        let (_, recs) = runs.iter().find(|(l, _)| *l == label).expect("label");
        recs.iter().map(rank_and_cosine).collect()
    };
    let pego = stats("pego")?;
    let single = stats("single")?;
    let stress = stats("stress")?;
    let unreg = stats("unregularized")?;
    let ranks: Vec<usize> = pego.iter().map(|s| s.0).collect();
    let single_ranks: Vec<usize> = single.iter().map(|s| s.0).collect();
    let mean = |v: &[(usize, f64)]| v.iter().map(|s| s.1).sum::<f64>() / v.len() as f64;
    let (cos_stress, cos_unreg) = (mean(&stress), mean(&unreg));
    let detail = format!(
        "PEGO ranks {ranks:?}, single-LoRA ranks {single_ranks:?}, mean |cos| alpha=0.1 {cos_stress:.4} vs alpha=0 {cos_unreg:.4}"
    );
    ensure!(ranks.iter().filter(|&&r| r > 2).count() >= 2, "{detail}");
    ensure!(single_ranks.iter().all(|&r| r <= 2), "{detail}");
    ensure!(cos_stress < cos_unreg, "{detail}");
    Ok(detail)
}

fn protocol_audits() -> Outcome {
    let t = toy();
    let rows = ablation();
    let (lodo, _) = pego_lodo();
    let mut records: Vec<&RunRecord> = rows.iter().flat_map(|r| &r.lodo.records).collect();
    records.extend(&lodo.records);
    records.extend(diagnostic_runs().iter().flat_map(|(_, r)| r));
    for rec in &records {
        check_frozen(&t.base, &rec.adapted).map_err(|e| format!("{} seed {}: {e}", rec.test_name, rec.seed))?;
    }

    // The isolation assertion is live: a split that leaks the held-out domain
    // must be refused.
    let leaky = t.ds.subset(&[0, 1, 2]);
    let split = TrainSplit {
        train: &leaky,
        val: &leaky,
        held_out: Some(0),
    };
    let quick = TrainConfig {
        iterations: 1,
        ..t.cfg.clone()
    };
    ensure!(train(&t.base, &split, &quick, 0).is_err(), "leaking split was accepted");

    ensure!(
        summary_csv(&lodo.records) == summary_csv(&rows[0].lodo.records),
        "summary CSV differs between identical reruns"
    );
    for (a, b) in lodo.records.iter().zip(&rows[0].lodo.records) {
        ensure!(history_csv(&a.history) == history_csv(&b.history), "history differs");
    }
    Ok(format!(
        "{} runs isolated and frozen-bitwise, rerun summary identical",
        records.len()
    ))
}

fn defaults_fidelity() -> Outcome {
    let c = TrainConfig::default();
    ensure!(
        c.alpha == 1e-3 && c.rank == 4 && c.lr == 5e-4,
        "alpha/rank/lr {} {} {}",
        c.alpha,
        c.rank,
        c.lr
    );
    ensure!(c.val_fraction == 0.2 && c.n_search == [2, 4, 6], "val/N search");
    ensure!(
        DEFAULT_RANK == 4 && DEFAULT_LR == 5e-4 && DEFAULT_VAL_FRACTION == 0.2 && N_SEARCH_SPACE == [2, 4, 6],
        "constants"
    );
    Ok("alpha=1e-3 r=4 lr=5e-4 val=0.2 N in {2,4,6}".into())
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("1 merge equivalence", merge_equivalence, Some(Duration::from_secs(60))),
        ("2 gradient oracle", gradient_oracle, Some(Duration::from_secs(120))),
        ("3 init-zero losses", init_zero_losses, None),
        ("4 feature orthogonality identity", feature_identity, None),
        ("5 loss algebra", loss_algebra, None),
        ("6 toy LODO", toy_lodo, None),
        ("7 ablation table shape", ablation_shape, None),
        ("8 rank growth and PC cosine", rank_growth, None),
        ("9 protocol audits", protocol_audits, None),
        ("10 defaults fidelity", defaults_fidelity, None),
    ];
    let mut failed = 0;
    for (name, check, budget) in criteria {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let took = start.elapsed();
        let outcome = match (outcome, budget) {
            (Ok(d), Some(b)) if took > b => Err(format!(
                "{d}; took {:.1}s over the {}s budget",
                took.as_secs_f64(),
                b.as_secs()
            )),
            (o, _) => o,
        };
        match outcome {
            Ok(detail) => println!("criterion {name}: PASS ({detail}) [{:.1}s]", took.as_secs_f64()),
            Err(detail) => {
                failed += 1;
                println!("criterion {name}: FAIL ({detail}) [{:.1}s]", took.as_secs_f64());
            }
        }
    }
    println!("acceptance: {} of 10 criteria passed", 10 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
