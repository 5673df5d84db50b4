//! Leave-one-domain-out evaluation and the harnesses built on it.
//!
//! Every (held-out domain, seed) run is independent and fully determined by
//! its inputs, so runs may execute on a thread pool; results are always
//! returned in task order.

use rayon::prelude::*;

use crate::data::{split_train_val, DomainDataset};
use crate::error::{PegoError, Result};
use crate::numerics::Rng;
use crate::trainer::config::TrainConfig;
use crate::trainer::train::{accuracy, train, HistoryRow, TrainSplit};
use crate::vit::VitModel;

/// Environment variable capping the number of concurrent runs.
pub const THREADS_ENV: &str = "PEGO_THREADS";

#[derive(Clone, Debug)]
pub struct RunRecord {
    pub test_domain: usize,
    pub test_name: String,
    pub seed: u64,
    pub accuracy: f64,
    pub selected_iter: usize,
    pub best_val_acc: f64,
    pub history: Vec<HistoryRow>,
    /// Best-validation snapshot with adapters still separate.
    pub adapted: VitModel,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainSummary {
    pub domain: usize,
    pub name: String,
    pub mean: f64,
    pub stderr: f64,
}

#[derive(Clone, Debug)]
pub struct LodoResult {
    /// Domain-major, then seed order.
    pub records: Vec<RunRecord>,
    pub per_domain: Vec<DomainSummary>,
    /// Mean of the per-domain means.
    pub average: f64,
    /// Domain-averaged accuracy of each seed.
    pub seed_averages: Vec<(u64, f64)>,
}

impl LodoResult {
    pub fn average_stderr(&self) -> f64 {
        let v: Vec<f64> = self.seed_averages.iter().map(|s| s.1).collect();
        mean_stderr(&v).1
    }

    pub fn mean_val_acc(&self) -> f64 {
        let v: Vec<f64> = self.records.iter().map(|r| r.best_val_acc).collect();
        mean_stderr(&v).0
    }
}

/// Mean and standard error (sample standard deviation over `sqrt(n)`; 0 for a
/// single value).
pub fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// `requested` capped by `PEGO_THREADS` when set; at least 1.
pub fn effective_jobs(requested: usize) -> usize {
    let cap = std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&c| c > 0);
    cap.map_or(requested, |c| requested.min(c)).max(1)
}

/// Maps `f` over `tasks` on at most `jobs` threads, preserving order.
pub fn run_parallel<T, R, F>(tasks: &[T], jobs: usize, f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> Result<R> + Sync + Send,
{
    if jobs <= 1 {
        return tasks.iter().map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| PegoError::Config(format!("thread pool: {e}")))?;
    pool.install(|| tasks.par_iter().map(f).collect())
}

/// One run: split the sources, reset the head, train, score the untouched
/// held-out domain.
pub fn run_one(
    base: &VitModel,
    dataset: &DomainDataset,
    cfg: &TrainConfig,
    held_out: usize,
    seed: u64,
) -> Result<RunRecord> {
    if held_out >= dataset.domains.len() {
        return Err(PegoError::Input(format!("no domain with index {held_out}")));
    }
    let sources: Vec<usize> = (0..dataset.domains.len()).filter(|&d| d != held_out).collect();
    let mut rng = Rng::new(seed);
    let split_seed = rng.next_u64();
    let train_seed = rng.next_u64();
    let (tr, va) = split_train_val(&dataset.subset(&sources), cfg.val_fraction, split_seed)?;
    let mut model = base.clone();
    model.reset_head(dataset.num_classes, &mut rng)?;
    let split = TrainSplit {
        train: &tr,
        val: &va,
        held_out: Some(held_out),
    };
    let out = train(&model, &split, cfg, train_seed)?;
    let test = &dataset.domains[held_out];
    Ok(RunRecord {
        test_domain: held_out,
        test_name: test.name.clone(),
        seed,
        accuracy: accuracy(&out.merged, &test.samples)?,
        selected_iter: out.selected_iter,
        best_val_acc: out.best_val_acc,
        history: out.history,
        adapted: out.adapted,
    })
}

pub fn leave_one_domain_out(
    base: &VitModel,
    dataset: &DomainDataset,
    cfg: &TrainConfig,
    seeds: &[u64],
    jobs: usize,
) -> Result<LodoResult> {
    if dataset.domains.len() < 3 {
        return Err(PegoError::Config(
            "leave-one-domain-out needs at least 3 domains".into(),
        ));
    }
    if seeds.is_empty() {
        return Err(PegoError::Config("at least one seed is required".into()));
    }
    dataset.validate()?;
    let tasks: Vec<(usize, u64)> = (0..dataset.domains.len())
        .flat_map(|d| seeds.iter().map(move |&s| (d, s)))
        .collect();
    let records = run_parallel(&tasks, jobs, |&(d, s)| run_one(base, dataset, cfg, d, s))?;
    Ok(summarize(dataset, seeds, records))
}

fn summarize(dataset: &DomainDataset, seeds: &[u64], records: Vec<RunRecord>) -> LodoResult {
    let per_domain: Vec<DomainSummary> = (0..dataset.domains.len())
        .map(|d| {
            let accs: Vec<f64> = records
                .iter()
                .filter(|r| r.test_domain == d)
                .map(|r| r.accuracy)
                .collect();
            let (mean, stderr) = mean_stderr(&accs);
            DomainSummary {
                domain: d,
                name: dataset.domains[d].name.clone(),
                mean,
                stderr,
            }
        })
        .collect();
    let average = per_domain.iter().map(|d| d.mean).sum::<f64>() / per_domain.len() as f64;
    let seed_averages = seeds
        .iter()
        .map(|&s| {
            let accs: Vec<f64> = records.iter().filter(|r| r.seed == s).map(|r| r.accuracy).collect();
            (s, mean_stderr(&accs).0)
        })
        .collect();
    LodoResult {
        records,
        per_domain,
        average,
        seed_averages,
    }
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub label: String,
    pub preserve: bool,
    pub diversify: bool,
    pub group_n: usize,
    pub alpha: f64,
    /// Mean and standard error over seeds of the domain-averaged accuracy.
    pub mean: f64,
    pub stderr: f64,
    pub lodo: LodoResult,
}

/// The preserve/diversify on-off grid followed by a single-adapter reference
/// row without regularization.
pub fn ablation_variants(cfg: &TrainConfig) -> Vec<(String, TrainConfig)> {
    let mut out = Vec::new();
    for (preserve, diversify) in [(true, true), (true, false), (false, true), (false, false)] {
        let label = format!(
            "preserve={} diversify={}",
            if preserve { "on" } else { "off" },
            if diversify { "on" } else { "off" }
        );
        out.push((
            label,
            TrainConfig {
                preserve,
                diversify,
                ..cfg.clone()
            },
        ));
    }
    out.push((
        "LoRA".to_string(),
        TrainConfig {
            group_n: 1,
            alpha: 0.0,
            preserve: false,
            diversify: false,
            ..cfg.clone()
        },
    ));
    out
}

pub fn ablate(
    base: &VitModel,
    dataset: &DomainDataset,
    cfg: &TrainConfig,
    seeds: &[u64],
    jobs: usize,
) -> Result<Vec<AblationRow>> {
    ablation_variants(cfg)
        .into_iter()
        .map(|(label, variant)| {
            let lodo = leave_one_domain_out(base, dataset, &variant, seeds, jobs)?;
            let avgs: Vec<f64> = lodo.seed_averages.iter().map(|s| s.1).collect();
            let (mean, stderr) = mean_stderr(&avgs);
            Ok(AblationRow {
                label,
                preserve: variant.preserve,
                diversify: variant.diversify,
                group_n: variant.group_n,
                alpha: variant.alpha,
                mean,
                stderr,
                lodo,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub group_n: usize,
    pub mean_val_acc: f64,
    /// Reported only; never used for selection.
    pub mean_test_acc: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub selected: usize,
}

/// The candidate with the highest validation score; ties go to the smaller N.
pub fn select_n(val_scores: &[(usize, f64)]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for &(n, v) in val_scores {
        best = match best {
            Some((bn, bv)) if bv > v || (bv == v && bn < n) => Some((bn, bv)),
            _ => Some((n, v)),
        };
    }
    best.map(|b| b.0)
}

pub fn sweep_n(
    base: &VitModel,
    dataset: &DomainDataset,
    cfg: &TrainConfig,
    values: &[usize],
    seeds: &[u64],
    jobs: usize,
) -> Result<SweepResult> {
    if values.is_empty() {
        return Err(PegoError::Config("no group sizes to sweep".into()));
    }
    let mut rows = Vec::with_capacity(values.len());
    for &n in values {
        let variant = TrainConfig {
            group_n: n,
            ..cfg.clone()
        };
        let lodo = leave_one_domain_out(base, dataset, &variant, seeds, jobs)?;
        rows.push(SweepRow {
            group_n: n,
            mean_val_acc: lodo.mean_val_acc(),
            mean_test_acc: lodo.average,
        });
    }
    let scores: Vec<(usize, f64)> = rows.iter().map(|r| (r.group_n, r.mean_val_acc)).collect();
    let selected = select_n(&scores).expect("nonempty");
    Ok(SweepResult { rows, selected })
}
