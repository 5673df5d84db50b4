use crate::autograd::{backward_with, Trainable};
use crate::data::{make_batch, random_style_sample, DomainDataset, Sample};
use crate::error::{PegoError, Result};
use crate::numerics::Rng;
use crate::pego::{inject_groups, merge_all, Objective};
use crate::trainer::adam::{adam_step, AdamState};
use crate::trainer::config::TrainConfig;
use crate::vit::{init_vit, VitModel};

/// One row per optimization step; `val_acc` is set on validation steps.
#[derive(Clone, Debug, PartialEq)]
pub struct HistoryRow {
    pub iter: usize,
    pub loss_cls: f64,
    pub loss_preserve: f64,
    pub loss_diversify: f64,
    pub loss_or: f64,
    pub val_acc: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Best-validation snapshot with its adapters folded in.
    pub merged: VitModel,
    /// The same snapshot before merging.
    pub adapted: VitModel,
    pub history: Vec<HistoryRow>,
    /// Iteration of the retained snapshot; 0 when no step was taken.
    pub selected_iter: usize,
    pub best_val_acc: f64,
}

/// Training sources, their validation split, and the domain that must never
/// be touched.
#[derive(Clone, Copy, Debug)]
pub struct TrainSplit<'a> {
    pub train: &'a DomainDataset,
    pub val: &'a DomainDataset,
    pub held_out: Option<usize>,
}

impl TrainSplit<'_> {
    fn audit<'s>(&self, samples: impl IntoIterator<Item = &'s Sample>, context: &str) -> Result<()> {
        let Some(h) = self.held_out else { return Ok(()) };
        for s in samples {
            if s.id.domain == h {
                return Err(PegoError::Protocol(format!(
                    "held-out sample {:?} reached {context}",
                    s.id
                )));
            }
        }
        Ok(())
    }
}

pub fn accuracy(model: &VitModel, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(PegoError::Input("accuracy of an empty sample set".into()));
    }
    let images: Vec<_> = samples.iter().map(|s| &s.image).collect();
    let preds = model.predict_batch(&images)?;
    let correct = preds.iter().zip(samples).filter(|(p, s)| **p == s.label).count();
    Ok(correct as f64 / samples.len() as f64)
}

fn at_iteration(it: usize, e: PegoError) -> PegoError {
    match e {
        PegoError::Numeric(m) => PegoError::Numeric(format!("iteration {it}: {m}")),
        other => other,
    }
}

/// Injects a group into every query/value projection of `base`, optimizes the
/// adapters and the head for `cfg.iterations` steps, keeps the snapshot with
/// the best validation accuracy (earliest on ties) and merges it.
pub fn train(base: &VitModel, split: &TrainSplit<'_>, cfg: &TrainConfig, seed: u64) -> Result<TrainOutcome> {
    cfg.validate()?;
    if base.num_adapted() != 0 {
        return Err(PegoError::Input("base model already carries adapters".into()));
    }
    let val: Vec<Sample> = split.val.samples().cloned().collect();
    split.audit(split.train.samples(), "the training set")?;
    split.audit(&val, "the validation set")?;
    if val.is_empty() {
        return Err(PegoError::Input("empty validation split".into()));
    }

    let mut rng = Rng::new(seed);
    let mut group_rng = rng.fork();
    let mut batch_rng = rng.fork();
    let mut model = base.clone();
    inject_groups(&mut model, cfg.rank, cfg.group_n, &mut group_rng)?;
    let objective = cfg.objective();
    let mut adam = AdamState::new();
    let mut history = Vec::with_capacity(cfg.iterations);
    let mut best = (model.clone(), 0usize, f64::NEG_INFINITY);
    if cfg.iterations == 0 {
        best.2 = accuracy(&model, &val)?;
    }

    for it in 1..=cfg.iterations {
        let batch = make_batch(split.train, cfg.batch_per_domain, &mut batch_rng);
        split.audit(&batch, "a gradient step")?;
        let (values, grads) =
            backward_with(&model, &batch, &objective, Trainable::Adapters, None).map_err(|e| at_iteration(it, e))?;
        adam_step(&mut model, &grads, &mut adam, cfg.lr).map_err(|e| at_iteration(it, e))?;
        let evaluate = it % cfg.eval_every == 0 || it == cfg.iterations;
        let val_acc = if evaluate {
            let acc = accuracy(&model, &val)?;
            if acc > best.2 {
                best = (model.clone(), it, acc);
            }
            Some(acc)
        } else {
            None
        };
        history.push(HistoryRow {
            iter: it,
            loss_cls: values.cls,
            loss_preserve: values.preserve,
            loss_diversify: values.diversify,
            loss_or: values.or(),
            val_acc,
        });
    }

    let (adapted, selected_iter, best_val_acc) = best;
    check_frozen(base, &adapted)?;
    Ok(TrainOutcome {
        merged: merge_all(adapted.clone()),
        adapted,
        history,
        selected_iter,
        best_val_acc,
    })
}

/// Every parameter of `base` outside the adapter/head set must be bitwise
/// unchanged in `trained`.
pub fn check_frozen(base: &VitModel, trained: &VitModel) -> Result<()> {
    for (name, before) in base.params() {
        if Trainable::Adapters.includes(&name) {
            continue;
        }
        let after = trained
            .param(&name)
            .ok_or_else(|| PegoError::Protocol(format!("frozen parameter `{name}` disappeared")))?;
        let same = before.shape() == after.shape()
            && before
                .as_slice()
                .iter()
                .zip(after.as_slice())
                .all(|(a, b)| a.to_bits() == b.to_bits());
        if !same {
            return Err(PegoError::Protocol(format!("frozen parameter `{name}` changed")));
        }
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub model: VitModel,
    pub losses: Vec<f64>,
}

/// Fits a stand-in "pre-trained" backbone: full fine-tuning on an unbounded
/// stream of shapes rendered in freshly drawn random styles. Deterministic in
/// `cfg.pretrain`, `cfg.vit` and `cfg.data.image_size`.
pub fn pretrain_base(cfg: &TrainConfig) -> Result<PretrainOutcome> {
    cfg.validate()?;
    let p = &cfg.pretrain;
    let mut vit = cfg.vit.clone();
    vit.num_classes = p.classes;
    let mut rng = Rng::new(p.seed);
    let mut model = init_vit(&vit, &mut rng)?;
    let mut adam = AdamState::new();
    let objective = Objective::new(0.0);
    let mut losses = Vec::with_capacity(p.iterations);
    for it in 1..=p.iterations {
        let batch: Vec<Sample> = (0..p.batch)
            .map(|_| random_style_sample(p.classes, vit.image_size, &mut rng))
            .collect();
        let (values, grads) =
            backward_with(&model, &batch, &objective, Trainable::All, None).map_err(|e| at_iteration(it, e))?;
        adam_step(&mut model, &grads, &mut adam, p.lr).map_err(|e| at_iteration(it, e))?;
        losses.push(values.cls);
    }
    Ok(PretrainOutcome { model, losses })
}
