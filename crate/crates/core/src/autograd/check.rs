use std::collections::BTreeMap;

use super::tape::{Fault, Tape, Trainable};
use crate::data::{Sample, SampleId};
use crate::error::{PegoError, Result};
use crate::numerics::{matmul, Matrix, Rng};
use crate::pego::{final_loss_with, inject_groups, loss_values, objective_ops, LossValues, Objective};
use crate::vit::{init_vit, ProjKind, VitConfig, VitModel};

/// Denominator floor of the relative error `|a - b| / max(|a|, |b|, floor)`.
pub const REL_ERROR_FLOOR: f64 = 1e-8;

/// Gradients of the differentiated parameters, keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradientSet {
    grads: BTreeMap<String, Matrix>,
}

impl GradientSet {
    pub fn new(grads: BTreeMap<String, Matrix>) -> Self {
        Self { grads }
    }

    /// Frozen and unknown parameters have no gradient.
    pub fn get(&self, name: &str) -> Result<&Matrix> {
        self.grads
            .get(name)
            .ok_or_else(|| PegoError::FrozenParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.grads.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Matrix)> {
        self.grads.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.grads.keys().map(String::as_str)
    }
}

/// A named parameter together with whether it is differentiated.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamRef {
    pub name: String,
    pub shape: (usize, usize),
    pub trainable: bool,
}

impl VitModel {
    pub fn param_refs(&self, trainable: Trainable) -> Vec<ParamRef> {
        self.params()
            .into_iter()
            .map(|(name, m)| ParamRef {
                trainable: trainable.includes(&name),
                shape: m.shape(),
                name,
            })
            .collect()
    }
}

/// Final loss and the gradients of the adapter factors and the head.
pub fn backward(model: &VitModel, batch: &[Sample], alpha: f64) -> Result<(f64, GradientSet)> {
    let (values, grads) = backward_with(model, batch, &Objective::new(alpha), Trainable::Adapters, None)?;
    Ok((values.total, grads))
}

pub fn backward_with(
    model: &VitModel,
    batch: &[Sample],
    objective: &Objective,
    trainable: Trainable,
    fault: Option<Fault>,
) -> Result<(LossValues, GradientSet)> {
    let mut tape = Tape::new(trainable);
    if let Some(f) = fault {
        tape = tape.with_fault(f);
    }
    let bound = model.bind(&mut tape);
    let vars = objective_ops(&mut tape, model, &bound, batch, objective)?;
    let values = loss_values(&tape, &vars);
    if !values.total.is_finite() {
        return Err(PegoError::Numeric(format!("non-finite loss {}", values.total)));
    }
    let grads = tape.backward(vars.total)?;
    Ok((values, GradientSet::new(grads)))
}

fn perturbed(model: &VitModel, param: &str, entry: usize, delta: f64) -> Result<VitModel> {
    let mut m = model.clone();
    let p = m
        .param_mut(param)
        .ok_or_else(|| PegoError::Input(format!("unknown parameter `{param}`")))?;
    if entry >= p.len() {
        return Err(PegoError::Input(format!(
            "entry {entry} out of range for `{param}` with {} entries",
            p.len()
        )));
    }
    p.as_mut_slice()[entry] += delta;
    Ok(m)
}

/// `(f(p + h) - f(p - h)) / 2h`
pub fn central_difference(mut f: impl FnMut(f64) -> Result<f64>, p: f64, h: f64) -> Result<f64> {
    Ok((f(p + h)? - f(p - h)?) / (2.0 * h))
}

/// Central difference of the objective with respect to one scalar entry of a
/// parameter.
pub fn finite_diff(
    model: &VitModel,
    batch: &[Sample],
    objective: &Objective,
    param: &str,
    entry: usize,
    h: f64,
) -> Result<f64> {
    central_difference(
        |offset| Ok(final_loss_with(&perturbed(model, param, entry, offset)?, batch, objective)?.total),
        0.0,
        h,
    )
}

fn parse_lora_name(name: &str) -> Option<(usize, ProjKind)> {
    let parts: Vec<&str> = name.split('.').collect();
    match parts.as_slice() {
        ["blocks", b, "attn", proj, "lora", _, "A" | "B"] => {
            let kind = match *proj {
                "wq" => ProjKind::Query,
                "wv" => ProjKind::Value,
                _ => return None,
            };
            Some((b.parse().ok()?, kind))
        }
        _ => None,
    }
}

/// The matrices whose entrywise L1 norms enter the orthogonality loss of the
/// layer hosting adapter parameter `param`: `W^T P_i` for every module and
/// `P_i^T P_j` for every pair. Empty for parameters outside any group.
pub fn l1_arguments(model: &VitModel, param: &str) -> Result<Vec<Matrix>> {
    let Some((block, kind)) = parse_lora_name(param) else {
        return Ok(Vec::new());
    };
    let Some(layer) = model.projection(block, kind).and_then(|p| p.as_adapted()) else {
        return Ok(Vec::new());
    };
    let wt = layer.base.weight.transpose();
    let products: Vec<Matrix> = layer.group.modules.iter().map(|m| m.product()).collect();
    let mut out = Vec::new();
    for p in &products {
        out.push(matmul(&wt, p)?);
    }
    for i in 0..products.len() {
        let pit = products[i].transpose();
        for pj in &products[i + 1..] {
            out.push(matmul(&pit, pj)?);
        }
    }
    Ok(out)
}

/// An L1 argument entry that moves under the probe and sits at a kink
/// (near zero, or crossing zero within `[p - h, p + h]`) makes the central
/// difference meaningless.
fn near_kink(model: &VitModel, param: &str, entry: usize, h: f64, zero_tol: f64) -> Result<bool> {
    let here = l1_arguments(model, param)?;
    if here.is_empty() {
        return Ok(false);
    }
    let plus = l1_arguments(&perturbed(model, param, entry, h)?, param)?;
    let minus = l1_arguments(&perturbed(model, param, entry, -h)?, param)?;
    for ((x, p), m) in here.iter().zip(&plus).zip(&minus) {
        for ((&x, &p), &m) in x.as_slice().iter().zip(p.as_slice()).zip(m.as_slice()) {
            if p == m && p == x {
                continue;
            }
            if x.abs() < zero_tol || p.signum() != m.signum() || p == 0.0 || m == 0.0 {
                return Ok(true);
            }
        }
    }
    Ok(false)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Probe {
    pub param: String,
    pub entry: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub accepted: usize,
    pub skipped: usize,
    pub worst: Option<Probe>,
}

/// Compares analytic gradients with central differences at `samples`
/// randomly chosen trainable entries. Probes near an L1 kink are skipped; the
/// check is inconclusive when fewer than half of the probes are accepted.
pub fn grad_check(
    model: &VitModel,
    batch: &[Sample],
    alpha: f64,
    samples: usize,
    rng: &mut Rng,
    fault: Option<Fault>,
) -> Result<GradCheckReport> {
    let objective = Objective::new(alpha);
    let (_, grads) = backward_with(model, batch, &objective, Trainable::Adapters, fault)?;
    let names: Vec<String> = grads.names().map(str::to_string).collect();
    if names.is_empty() {
        return Err(PegoError::Input("model has no trainable parameters".into()));
    }
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        accepted: 0,
        skipped: 0,
        worst: None,
    };
    for _ in 0..samples {
        let name = &names[rng.below(names.len())];
        let g = grads.get(name)?;
        let entry = rng.below(g.len());
        let p = model.param(name).expect("gradient names are parameters").as_slice()[entry];
        let h = 1e-5 * p.abs().max(1.0);
        if alpha > 0.0 && near_kink(model, name, entry, h, 1e-6)? {
            report.skipped += 1;
            continue;
        }
        let analytic = g.as_slice()[entry];
        let numeric = finite_diff(model, batch, &objective, name, entry, h)?;
        let rel_error = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
        report.accepted += 1;
        if report.worst.is_none() || rel_error > report.max_rel_error {
            report.max_rel_error = rel_error;
            report.worst = Some(Probe {
                param: name.clone(),
                entry,
                analytic,
                numeric,
                rel_error,
            });
        }
    }
    if report.accepted * 2 < samples {
        return Err(PegoError::InconclusiveCheck {
            accepted: report.accepted,
            requested: samples,
        });
    }
    Ok(report)
}

/// The small model and batch used for gradient checking: width 8, one block,
/// two heads, groups of two rank-2 modules, two classes. Weights are drawn at
/// unit-order scale and every `B` is nonzero so that all gradient paths carry
/// signal.
pub fn gradcheck_fixture(seed: u64) -> Result<(VitModel, Vec<Sample>)> {
    let cfg = VitConfig {
        image_size: 8,
        patch_size: 4,
        channels: 1,
        embed_dim: 8,
        num_blocks: 1,
        num_heads: 2,
        mlp_ratio: 2.0,
        num_classes: 2,
    };
    let mut rng = Rng::new(seed);
    let mut model = init_vit(&cfg, &mut rng)?;
    inject_groups(&mut model, 2, 2, &mut rng)?;
    for (name, p) in model.params_mut() {
        let fresh = if name.ends_with(".g") {
            rng.gaussian_matrix(p.rows(), p.cols(), 0.1).map(|x| 1.0 + x)
        } else {
            rng.gaussian_matrix(p.rows(), p.cols(), 0.4)
        };
        *p = fresh;
    }
    let batch = (0..4)
        .map(|i| Sample {
            image: rng.gaussian_matrix(8, 8, 1.0),
            label: i % 2,
            id: SampleId { domain: 0, index: i },
        })
        .collect();
    Ok((model, batch))
}
