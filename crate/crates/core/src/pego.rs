//! Groups of low-rank adapters on frozen projections, the two orthogonality
//! penalties, and merging the group back into the frozen weight.
//!
//! For a frozen `W` (`d x k`) carrying modules `(A_i, B_i)`:
//!
//! * forward: `W z + sum_i B_i (A_i z)`, always in factored order;
//! * preserve: `sum_i |W^T (B_i A_i)|_1`;
//! * diversify: `sum_{i<j} |(B_i A_i)^T (B_j A_j)|_1`;
//! * merge: `W + sum_i B_i A_i`.
//!
//! `|.|_1` is the entrywise L1 norm.

use crate::autograd::{Eager, Ops};
use crate::data::Sample;
use crate::error::{PegoError, Result};
use crate::numerics::{l1_entrywise, matmul, Matrix, Rng};
use crate::vit::{BoundModel, Linear, Projection, VitModel};

/// Std of the Gaussian used for every `A_i`; every `B_i` starts at zero.
pub const LORA_A_INIT_STD: f64 = 0.02;

/// Default weight of the orthogonality penalty in the training objective.
pub const DEFAULT_ALPHA: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct LoraModule {
    /// `r x k`
    pub a: Matrix,
    /// `d x r`
    pub b: Matrix,
}

impl LoraModule {
    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    /// `B A`, `d x k`.
    pub fn product(&self) -> Matrix {
        matmul(&self.b, &self.a).expect("module factors are conformable")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraGroup {
    pub modules: Vec<LoraModule>,
}

impl LoraGroup {
    pub fn new(modules: Vec<LoraModule>) -> Result<Self> {
        let first = modules
            .first()
            .ok_or_else(|| PegoError::Config("a group needs at least one module".into()))?;
        let (d, k, r) = (first.b.rows(), first.a.cols(), first.a.rows());
        for m in &modules {
            if m.a.shape() != (r, k) || m.b.shape() != (d, r) {
                return Err(PegoError::Config(format!(
                    "inconsistent module shapes: A {:?}, B {:?}; expected A {:?}, B {:?}",
                    m.a.shape(),
                    m.b.shape(),
                    (r, k),
                    (d, r)
                )));
            }
        }
        Ok(Self { modules })
    }

    pub fn len(&self) -> usize {
        self.modules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modules.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.modules[0].rank()
    }

    /// `(d, k)` of the host weight.
    pub fn host_shape(&self) -> (usize, usize) {
        (self.modules[0].b.rows(), self.modules[0].a.cols())
    }

    /// `sum_i B_i A_i`
    pub fn delta(&self) -> Matrix {
        let (d, k) = self.host_shape();
        let mut acc = Matrix::zeros(d, k);
        for m in &self.modules {
            acc.add_assign(&m.product()).expect("same host shape");
        }
        acc
    }
}

/// Frozen linear layer plus its adapter group.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptedLinear {
    pub base: Linear,
    pub group: LoraGroup,
}

impl AdaptedLinear {
    pub fn new(base: Linear, group: LoraGroup) -> Result<Self> {
        if group.host_shape() != base.weight.shape() {
            return Err(PegoError::Shape {
                op: "AdaptedLinear::new",
                left: base.weight.shape(),
                right: group.host_shape(),
            });
        }
        Ok(Self { base, group })
    }

    pub fn weight(&self) -> &Matrix {
        &self.base.weight
    }
}

pub fn init_group(d: usize, k: usize, r: usize, n: usize, rng: &mut Rng) -> Result<LoraGroup> {
    if d == 0 || k == 0 || r == 0 || r > d.min(k) {
        return Err(PegoError::Config(format!("rank {r} must lie in 1..=min({d}, {k})")));
    }
    if n == 0 {
        return Err(PegoError::Config("group size must be at least 1".into()));
    }
    let modules = (0..n)
        .map(|_| LoraModule {
            a: rng.gaussian_matrix(r, k, LORA_A_INIT_STD),
            b: Matrix::zeros(d, r),
        })
        .collect();
    LoraGroup::new(modules)
}

/// Attaches a fresh group to the query and value projection of every block.
pub fn inject_groups(model: &mut VitModel, rank: usize, n: usize, rng: &mut Rng) -> Result<()> {
    let d = model.config.embed_dim;
    for block in &mut model.blocks {
        for proj in [&mut block.wq, &mut block.wv] {
            let base = match proj {
                Projection::Frozen(l) => l.clone(),
                Projection::Adapted(_) => return Err(PegoError::Config("projection already carries a group".into())),
            };
            let group = init_group(d, d, rank, n, rng)?;
            *proj = Projection::Adapted(AdaptedLinear::new(base, group)?);
        }
    }
    Ok(())
}

/// Adapter parameters bound into an [`Ops`] engine.
pub struct BoundAdapted<V> {
    pub weight: V,
    pub bias: V,
    /// `(A_i, B_i)`
    pub lora: Vec<(V, V)>,
}

impl<V: Clone> BoundAdapted<V> {
    pub(crate) fn bind<O: Ops<Var = V>>(ops: &mut O, layer: &AdaptedLinear, prefix: &str) -> Self {
        Self {
            weight: ops.param(&format!("{prefix}.base"), &layer.base.weight),
            bias: ops.param(&format!("{prefix}.bias"), &layer.base.bias),
            lora: layer
                .group
                .modules
                .iter()
                .enumerate()
                .map(|(i, m)| {
                    (
                        ops.param(&format!("{prefix}.lora.{i}.A"), &m.a),
                        ops.param(&format!("{prefix}.lora.{i}.B"), &m.b),
                    )
                })
                .collect(),
        }
    }
}

/// `W z + sum_i B_i (A_i z)`; `B_i A_i` is never formed.
pub fn adapted_forward_ops<O: Ops>(ops: &mut O, layer: &BoundAdapted<O::Var>, z: &O::Var) -> Result<O::Var> {
    let mut out = ops.matmul(&layer.weight, z)?;
    for (a, b) in &layer.lora {
        let low = ops.matmul(a, z)?;
        let up = ops.matmul(b, &low)?;
        out = ops.add(&out, &up)?;
    }
    Ok(out)
}

/// Adapted projection of `z_in` (`k x tokens`), without the bias.
pub fn adapted_forward(layer: &AdaptedLinear, z_in: &Matrix) -> Result<Matrix> {
    let mut ops = Eager;
    let bound = BoundAdapted::bind(&mut ops, layer, "layer");
    let z = ops.constant(z_in.clone());
    let out = adapted_forward_ops(&mut ops, &bound, &z)?;
    Ok(ops.value(&out).clone())
}

/// `|W^T (B_i A_i)|_1` for every module `i`.
pub fn preserve_terms(layer: &AdaptedLinear) -> Vec<f64> {
    let wt = layer.base.weight.transpose();
    layer
        .group
        .modules
        .iter()
        .map(|m| l1_entrywise(&matmul(&wt, &m.product()).expect("W^T conforms with BA")))
        .collect()
}

/// `((i, j), |(B_i A_i)^T (B_j A_j)|_1)` for every pair `i < j`.
pub fn diversify_terms(group: &LoraGroup) -> Vec<((usize, usize), f64)> {
    let products: Vec<Matrix> = group.modules.iter().map(LoraModule::product).collect();
    let mut out = Vec::new();
    for i in 0..products.len() {
        let pit = products[i].transpose();
        for (j, pj) in products.iter().enumerate().skip(i + 1) {
            let cross = matmul(&pit, pj).expect("same host shape");
            out.push(((i, j), l1_entrywise(&cross)));
        }
    }
    out
}

pub fn loss_preserve(layer: &AdaptedLinear) -> f64 {
    preserve_terms(layer).iter().sum()
}

pub fn loss_diversify(group: &LoraGroup) -> f64 {
    diversify_terms(group).iter().map(|(_, v)| v).sum()
}

pub fn loss_orthogonal(layer: &AdaptedLinear) -> f64 {
    loss_preserve(layer) + loss_diversify(&layer.group)
}

/// Preserve and diversify totals over every adapted projection of a model.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct OrthoParts {
    pub preserve: f64,
    pub diversify: f64,
}

impl OrthoParts {
    pub fn total(&self) -> f64 {
        self.preserve + self.diversify
    }
}

pub fn orthogonal_parts(model: &VitModel) -> OrthoParts {
    let mut parts = OrthoParts::default();
    for (_, _, layer) in model.adapted_layers() {
        parts.preserve += loss_preserve(layer);
        parts.diversify += loss_diversify(&layer.group);
    }
    parts
}

/// Sum of the orthogonality loss over the query and value projection of every
/// block. Projections without a group contribute nothing.
pub fn loss_or(model: &VitModel) -> f64 {
    model
        .adapted_layers()
        .into_iter()
        .map(|(_, _, layer)| loss_orthogonal(layer))
        .sum()
}

/// Training objective: `CE + alpha * (preserve + diversify)`, with either
/// penalty switchable off for ablations.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Objective {
    pub alpha: f64,
    pub preserve: bool,
    pub diversify: bool,
}

impl Objective {
    pub fn new(alpha: f64) -> Self {
        Self {
            alpha,
            preserve: true,
            diversify: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.alpha.is_finite() || self.alpha < 0.0 {
            return Err(PegoError::Config(format!(
                "alpha must be finite and nonnegative, got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

/// Scalar loss nodes of one objective evaluation.
pub struct LossVars<V> {
    pub total: V,
    pub cls: V,
    pub preserve: Option<V>,
    pub diversify: Option<V>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValues {
    pub total: f64,
    pub cls: f64,
    pub preserve: f64,
    pub diversify: f64,
}

impl LossValues {
    pub fn or(&self) -> f64 {
        self.preserve + self.diversify
    }
}

fn sum_vars<O: Ops>(ops: &mut O, terms: Vec<O::Var>) -> Result<Option<O::Var>> {
    let mut it = terms.into_iter();
    let Some(mut acc) = it.next() else {
        return Ok(None);
    };
    for t in it {
        acc = ops.add(&acc, &t)?;
    }
    Ok(Some(acc))
}

/// Builds the objective on an engine. The orthogonality terms are always
/// evaluated (for logging) but only enter `total` when weighted.
pub fn objective_ops<O: Ops>(
    ops: &mut O,
    model: &VitModel,
    bound: &BoundModel<O::Var>,
    batch: &[Sample],
    objective: &Objective,
) -> Result<LossVars<O::Var>> {
    objective.validate()?;
    if batch.is_empty() {
        return Err(PegoError::Input("empty batch".into()));
    }
    let images: Vec<&Matrix> = batch.iter().map(|s| &s.image).collect();
    let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();
    let patches = ops.constant(model.batch_patches(&images)?);
    let (_, logits) = model.forward_ops(ops, bound, &patches, batch.len())?;
    let cls = ops.cross_entropy_cols(&logits, &labels)?;

    let mut preserve = Vec::new();
    let mut diversify = Vec::new();
    for block in &bound.blocks {
        for proj in [&block.wq, &block.wv] {
            let Some(layer) = proj.as_adapted() else { continue };
            let wt = ops.transpose(&layer.weight);
            let mut products = Vec::with_capacity(layer.lora.len());
            for (a, b) in &layer.lora {
                products.push(ops.matmul(b, a)?);
            }
            for p in &products {
                let m = ops.matmul(&wt, p)?;
                preserve.push(ops.l1(&m));
            }
            for i in 0..products.len() {
                let pit = ops.transpose(&products[i]);
                for pj in &products[i + 1..] {
                    let m = ops.matmul(&pit, pj)?;
                    diversify.push(ops.l1(&m));
                }
            }
        }
    }
    let preserve = sum_vars(ops, preserve)?;
    let diversify = sum_vars(ops, diversify)?;

    let mut weighted = Vec::new();
    if objective.alpha > 0.0 {
        if let (true, Some(p)) = (objective.preserve, &preserve) {
            weighted.push(p.clone());
        }
        if let (true, Some(d)) = (objective.diversify, &diversify) {
            weighted.push(d.clone());
        }
    }
    let total = match sum_vars(ops, weighted)? {
        Some(or) => {
            let scaled = ops.scale(&or, objective.alpha);
            ops.add(&cls, &scaled)?
        }
        None => cls.clone(),
    };
    Ok(LossVars {
        total,
        cls,
        preserve,
        diversify,
    })
}

pub(crate) fn loss_values<O: Ops>(ops: &O, vars: &LossVars<O::Var>) -> LossValues {
    let scalar = |v: &O::Var| ops.value(v)[(0, 0)];
    LossValues {
        total: scalar(&vars.total),
        cls: scalar(&vars.cls),
        preserve: vars.preserve.as_ref().map_or(0.0, scalar),
        diversify: vars.diversify.as_ref().map_or(0.0, scalar),
    }
}

/// Mean cross-entropy over `batch` plus `alpha` times the orthogonality loss.
pub fn final_loss(model: &VitModel, batch: &[Sample], alpha: f64) -> Result<f64> {
    Ok(final_loss_with(model, batch, &Objective::new(alpha))?.total)
}

pub fn final_loss_with(model: &VitModel, batch: &[Sample], objective: &Objective) -> Result<LossValues> {
    let mut ops = Eager;
    let bound = model.bind(&mut ops);
    let vars = objective_ops(&mut ops, model, &bound, batch, objective)?;
    Ok(loss_values(&ops, &vars))
}

/// Folds every group into its frozen weight: `W + sum_i B_i A_i`.
pub fn merge_all(mut model: VitModel) -> VitModel {
    for block in &mut model.blocks {
        for proj in [&mut block.wq, &mut block.wv] {
            if let Projection::Adapted(layer) = proj {
                let mut weight = layer.base.weight.clone();
                weight
                    .add_assign(&layer.group.delta())
                    .expect("group matches host shape");
                *proj = Projection::Frozen(Linear {
                    weight,
                    bias: layer.base.bias.clone(),
                });
            }
        }
    }
    model
}

/// Drops every group, restoring the frozen projections.
pub fn strip_adapters(mut model: VitModel) -> VitModel {
    for block in &mut model.blocks {
        for proj in [&mut block.wq, &mut block.wv] {
            if let Projection::Adapted(layer) = proj {
                *proj = Projection::Frozen(layer.base.clone());
            }
        }
    }
    model
}

/// `|z_init^T z_new - z^T (W^T dW) z|` with `z_init = W z`, `z_new = dW z`.
///
/// The two expressions are algebraically equal; the result measures rounding.
pub fn feature_orthogonality_gap(layer: &AdaptedLinear, z_in: &[f64]) -> Result<f64> {
    let z = Matrix::column(z_in);
    let w = &layer.base.weight;
    let z_init = matmul(w, &z)?;
    let mut z_new = Matrix::zeros(w.rows(), 1);
    for m in &layer.group.modules {
        z_new.add_assign(&matmul(&m.b, &matmul(&m.a, &z)?)?)?;
    }
    let lhs: f64 = z_init.as_slice().iter().zip(z_new.as_slice()).map(|(a, b)| a * b).sum();
    let inner = matmul(&w.transpose(), &layer.group.delta())?;
    let rhs = matmul(&z.transpose(), &matmul(&inner, &z)?)?[(0, 0)];
    Ok((lhs - rhs).abs())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layer_with(w: Matrix, modules: Vec<(Matrix, Matrix)>) -> AdaptedLinear {
        let d = w.rows();
        let group = LoraGroup::new(modules.into_iter().map(|(a, b)| LoraModule { a, b }).collect()).unwrap();
        AdaptedLinear::new(
            Linear {
                weight: w,
                bias: Matrix::zeros(d, 1),
            },
            group,
        )
        .unwrap()
    }

    // B = [[1],[0]], A = [[0,1]]  =>  BA = [[0,1],[0,0]]
    fn corner_module() -> (Matrix, Matrix) {
        (Matrix::from_rows(&[[0.0, 1.0]]), Matrix::column(&[1.0, 0.0]))
    }

    #[test]
    fn init_group_contract() {
        let g = init_group(6, 5, 2, 3, &mut Rng::new(7)).unwrap();
        assert_eq!(g.len(), 3);
        assert_eq!(l1_entrywise(&g.delta()), 0.0);
        assert_eq!(g, init_group(6, 5, 2, 3, &mut Rng::new(7)).unwrap());
        assert!(matches!(
            init_group(4, 4, 5, 1, &mut Rng::new(0)),
            Err(PegoError::Config(_))
        ));
        assert!(matches!(
            init_group(4, 4, 2, 0, &mut Rng::new(0)),
            Err(PegoError::Config(_))
        ));
    }

    #[test]
    fn adapted_forward_small_example() {
        let layer = layer_with(Matrix::identity(2), vec![corner_module()]);
        let out = adapted_forward(&layer, &Matrix::column(&[3.0, 4.0])).unwrap();
        assert_eq!(out, Matrix::column(&[7.0, 4.0]));
    }

    #[test]
    fn adapted_forward_zero_b_is_base() {
        let mut rng = Rng::new(1);
        let w = rng.gaussian_matrix(5, 4, 1.0);
        let layer = AdaptedLinear::new(
            Linear {
                weight: w.clone(),
                bias: Matrix::zeros(5, 1),
            },
            init_group(5, 4, 2, 3, &mut rng).unwrap(),
        )
        .unwrap();
        let z = rng.gaussian_matrix(4, 3, 1.0);
        assert_eq!(adapted_forward(&layer, &z).unwrap(), matmul(&w, &z).unwrap());
    }

    #[test]
    fn preserve_examples() {
        let layer = layer_with(Matrix::identity(2), vec![corner_module()]);
        assert_eq!(loss_preserve(&layer), 1.0);

        // W's columns span e1 only; BA's columns lie along e2.
        let w = Matrix::from_rows(&[[1.0, 2.0], [0.0, 0.0]]);
        let ba = (Matrix::from_rows(&[[3.0, -1.0]]), Matrix::column(&[0.0, 1.0]));
        let layer = layer_with(w, vec![ba]);
        assert_eq!(loss_preserve(&layer), 0.0);
    }

    #[test]
    fn diversify_examples() {
        let e11 = (Matrix::from_rows(&[[1.0, 0.0]]), Matrix::column(&[1.0, 0.0]));
        let e22 = (Matrix::from_rows(&[[0.0, 1.0]]), Matrix::column(&[0.0, 1.0]));
        let single = layer_with(Matrix::identity(2), vec![e11.clone()]);
        assert_eq!(loss_diversify(&single.group), 0.0);
        let disjoint = layer_with(Matrix::identity(2), vec![e11.clone(), e22]);
        assert_eq!(loss_diversify(&disjoint.group), 0.0);
        let twins = layer_with(Matrix::identity(2), vec![e11.clone(), e11]);
        assert_eq!(loss_diversify(&twins.group), 1.0);
        assert_eq!(loss_orthogonal(&twins), loss_preserve(&twins) + 1.0);
    }

    #[test]
    fn merge_small_example() {
        let layer = layer_with(Matrix::identity(2), vec![corner_module()]);
        let mut w = layer.base.weight.clone();
        w.add_assign(&layer.group.delta()).unwrap();
        assert_eq!(w, Matrix::from_rows(&[[1.0, 1.0], [0.0, 1.0]]));
    }

    #[test]
    fn mismatched_group_rejected() {
        let g = init_group(3, 3, 1, 1, &mut Rng::new(0)).unwrap();
        let base = Linear {
            weight: Matrix::zeros(4, 3),
            bias: Matrix::zeros(4, 1),
        };
        assert!(AdaptedLinear::new(base, g).is_err());
        let bad = vec![
            LoraModule {
                a: Matrix::zeros(1, 3),
                b: Matrix::zeros(3, 1),
            },
            LoraModule {
                a: Matrix::zeros(2, 3),
                b: Matrix::zeros(3, 2),
            },
        ];
        assert!(LoraGroup::new(bad).is_err());
    }

    #[test]
    fn feature_gap_fresh_group_is_zero() {
        let mut rng = Rng::new(3);
        let layer = AdaptedLinear::new(
            Linear {
                weight: rng.gaussian_matrix(4, 4, 1.0),
                bias: Matrix::zeros(4, 1),
            },
            init_group(4, 4, 2, 2, &mut rng).unwrap(),
        )
        .unwrap();
        assert_eq!(feature_orthogonality_gap(&layer, &[1.0, -2.0, 0.5, 3.0]).unwrap(), 0.0);
    }
}
