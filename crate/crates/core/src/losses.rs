//! Alignment and detection loss kernels with analytic gradients.
//!
//! Every kernel returns a [`LossReport`]: the scalar value plus one gradient
//! tensor per named input, each shaped like that input. L1 kinks use the
//! subgradient 0 at a zero difference. Reductions go through compensated
//! summation so values do not depend on evaluation order beyond rounding of
//! the individual terms.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Array3, ArrayD, ArrayView1, ArrayView2, ArrayViewD, Axis, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{ksum, log_sum_exp, sigmoid, sign0, softplus, KahanSum};
use crate::pillars::{PillarImage, TrustMask};

/// Tolerance on `|‖e‖ - 1|` accepted for embeddings.
pub const UNIT_NORM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossReport {
    pub value: f64,
    pub grads: BTreeMap<String, ArrayD<f64>>,
}

impl LossReport {
    pub fn new(value: f64) -> Self {
        Self {
            value,
            grads: BTreeMap::new(),
        }
    }

    pub fn with_grad(mut self, name: &str, grad: ArrayD<f64>) -> Self {
        self.grads.insert(name.to_string(), grad);
        self
    }

    /// Panics if `name` has no gradient.
    pub fn grad(&self, name: &str) -> &ArrayD<f64> {
        self.grads
            .get(name)
            .unwrap_or_else(|| panic!("no gradient named {name:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    #[default]
    Sum,
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossCoefficients {
    /// Weight of pillar alignment within the trust region.
    pub alpha1: f64,
    /// Weight of fused-feature alignment.
    pub alpha2: f64,
    /// Weight of agent-level contrastive alignment.
    pub beta1: f64,
    /// Weight of group-level contrastive alignment.
    pub beta2: f64,
    pub tau: f64,
    /// Positive-class weight; a negative value disables class balancing.
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub smooth_l1_beta: f64,
    /// Add cross-flow terms `exp(s_i . a_j / tau)` to the agent-level denominator.
    pub agent_cross_terms: bool,
    pub detection_reduction: Reduction,
}

impl Default for LossCoefficients {
    fn default() -> Self {
        Self {
            alpha1: 0.1,
            alpha2: 1.0,
            beta1: 0.01,
            beta2: 0.01,
            tau: 0.07,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            smooth_l1_beta: 1.0,
            agent_cross_terms: false,
            detection_reduction: Reduction::Sum,
        }
    }
}

impl LossCoefficients {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::InvalidParams(format!("tau must be > 0, got {}", self.tau)));
        }
        for (name, w) in [
            ("alpha1", self.alpha1),
            ("alpha2", self.alpha2),
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("focal_gamma", self.focal_gamma),
        ] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::InvalidParams(format!("{name} must be >= 0, got {w}")));
            }
        }
        if !(self.focal_alpha <= 1.0) {
            return Err(Error::InvalidParams(format!("focal_alpha must be <= 1, got {}", self.focal_alpha)));
        }
        if !(self.smooth_l1_beta > 0.0) {
            return Err(Error::InvalidParams(format!(
                "smooth_l1_beta must be > 0, got {}",
                self.smooth_l1_beta
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureRole {
    AgentFeature,
    FusedFeature,
    Embedding,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub role: FeatureRole,
    /// `C x H x W` for feature maps, `D` for embeddings.
    pub data: ArrayD<f64>,
}

impl FeatureMap {
    pub fn agent(data: Array3<f64>) -> Self {
        Self {
            role: FeatureRole::AgentFeature,
            data: data.into_dyn(),
        }
    }

    pub fn fused(data: Array3<f64>) -> Self {
        Self {
            role: FeatureRole::FusedFeature,
            data: data.into_dyn(),
        }
    }

    pub fn embedding(data: Array1<f64>) -> Result<Self> {
        check_unit(data.view(), 0)?;
        Ok(Self {
            role: FeatureRole::Embedding,
            data: data.into_dyn(),
        })
    }
}

fn check_same_shape(a: &[usize], b: &[usize], what: &str) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(Error::ShapeMismatch(format!("{what}: {a:?} vs {b:?}")))
    }
}

fn check_unit(v: ArrayView1<f64>, index: usize) -> Result<()> {
    let norm = ksum(v.iter().map(|x| x * x)).sqrt();
    if (norm - 1.0).abs() <= UNIT_NORM_TOL {
        Ok(())
    } else {
        Err(Error::NonUnitEmbedding { index, norm })
    }
}

/// `sum_{h,w} mask(h,w) * sum_c |a(c,h,w) - b(c,h,w)|` and its gradients
/// with respect to `a` and `b`.
pub fn masked_l1(a: &Array3<f64>, b: &Array3<f64>, mask: &Array2<u8>) -> Result<(f64, Array3<f64>, Array3<f64>)> {
    check_same_shape(a.shape(), b.shape(), "pseudo-images")?;
    let (c, h, w) = a.dim();
    check_same_shape(mask.shape(), &[h, w], "trust mask vs image")?;
    let mut value = KahanSum::new();
    let mut ga = Array3::zeros((c, h, w));
    for ((k, i, j), av) in a.indexed_iter() {
        if mask[[i, j]] == 0 {
            continue;
        }
        let d = av - b[[k, i, j]];
        value.add(d.abs());
        ga[[k, i, j]] = sign0(d);
    }
    let gb = ga.mapv(|g: f64| -g);
    Ok((value.value(), ga, gb))
}

/// Pillar alignment inside the trust region. Gradients: `"source"`, `"augmented"`.
pub fn l_pat(source: &PillarImage, augmented: &PillarImage, mask: &TrustMask) -> Result<LossReport> {
    if source.grid != augmented.grid {
        return Err(Error::ShapeMismatch("pseudo-images built on different grids".into()));
    }
    let (value, gs, ga) = masked_l1(&source.data, &augmented.data, &mask.data)?;
    Ok(LossReport::new(value)
        .with_grad("source", gs.into_dyn())
        .with_grad("augmented", ga.into_dyn()))
}

/// Full L1 distance between two tensors of equal shape.
pub fn l1_distance(a: ArrayViewD<f64>, b: ArrayViewD<f64>) -> Result<(f64, ArrayD<f64>, ArrayD<f64>)> {
    check_same_shape(a.shape(), b.shape(), "feature maps")?;
    let diff = &a - &b;
    let value = ksum(diff.iter().map(|d| d.abs()));
    let ga = diff.mapv(sign0);
    let gb = ga.mapv(|g| -g);
    Ok((value, ga, gb))
}

/// Fused-feature alignment. Gradients: `"source"`, `"augmented"`.
pub fn l_ffa(source: &FeatureMap, augmented: &FeatureMap) -> Result<LossReport> {
    for f in [source, augmented] {
        if f.role != FeatureRole::FusedFeature {
            return Err(Error::InvalidParams(format!("expected fused features, got {:?}", f.role)));
        }
    }
    let (value, gs, ga) = l1_distance(source.data.view(), augmented.data.view())?;
    Ok(LossReport::new(value).with_grad("source", gs).with_grad("augmented", ga))
}

fn as_chw(data: &ArrayD<f64>) -> Result<Array3<f64>> {
    match data.ndim() {
        1 => Ok(data.clone().into_shape((data.len(), 1, 1)).expect("reshape")),
        3 => Ok(data.clone().into_dimensionality().expect("3-D")),
        n => Err(Error::ShapeMismatch(format!("expected a 1-D or 3-D tensor, got {n}-D"))),
    }
}

/// Global average pool over `(H, W)`, then L2 normalization. A zero pooled
/// vector maps to `e_1`.
pub fn embed(f: &FeatureMap) -> Result<FeatureMap> {
    let chw = as_chw(&f.data)?;
    let e = embed_chw(&chw);
    Ok(FeatureMap {
        role: FeatureRole::Embedding,
        data: e.into_dyn(),
    })
}

fn pool(chw: &Array3<f64>) -> Array1<f64> {
    let (c, h, w) = chw.dim();
    let n = (h * w) as f64;
    Array1::from_shape_fn(c, |k| ksum(chw.index_axis(Axis(0), k).iter().copied()) / n)
}

pub fn embed_chw(chw: &Array3<f64>) -> Array1<f64> {
    let pooled = pool(chw);
    let norm = ksum(pooled.iter().map(|x| x * x)).sqrt();
    if norm == 0.0 {
        let mut e = Array1::zeros(pooled.len());
        if !e.is_empty() {
            e[0] = 1.0;
        }
        e
    } else {
        pooled / norm
    }
}

/// Pulls a gradient on the embedding back onto the `C x H x W` input.
/// At the zero input (where `e_1` is returned) the gradient is taken as 0.
pub fn embed_backward(chw: &Array3<f64>, grad: ArrayView1<f64>) -> Array3<f64> {
    let (c, h, w) = chw.dim();
    let pooled = pool(chw);
    let norm = ksum(pooled.iter().map(|x| x * x)).sqrt();
    if norm == 0.0 {
        return Array3::zeros((c, h, w));
    }
    let u = &pooled / norm;
    let ug = ksum(u.iter().zip(grad.iter()).map(|(a, b)| a * b));
    let g_pooled = (&grad - &(&u * ug)) / norm;
    let n = (h * w) as f64;
    Array3::from_shape_fn((c, h, w), |(k, _, _)| g_pooled[k] / n)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentEmbedding {
    pub agent_id: String,
    pub source: Array1<f64>,
    pub augmented: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AgentBatch {
    pub entries: Vec<AgentEmbedding>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GroupBatch {
    /// `(source, augmented)` fused-feature embeddings per group.
    pub entries: Vec<(Array1<f64>, Array1<f64>)>,
}

fn stack(rows: Vec<ArrayView1<f64>>) -> Result<Array2<f64>> {
    let dim = rows.first().map(|r| r.len()).unwrap_or(0);
    if let Some(r) = rows.iter().find(|r| r.len() != dim) {
        return Err(Error::ShapeMismatch(format!("embedding length {} vs {dim}", r.len())));
    }
    Ok(ndarray::stack(Axis(0), &rows).unwrap_or_else(|_| Array2::zeros((0, dim))))
}

impl AgentBatch {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn validate(&self) -> Result<()> {
        if self.entries.is_empty() {
            return Err(Error::EmptyBatch);
        }
        for (i, e) in self.entries.iter().enumerate() {
            check_unit(e.source.view(), i)?;
            check_unit(e.augmented.view(), i)?;
        }
        Ok(())
    }

    /// `(B x D source, B x D augmented)`
    pub fn matrices(&self) -> Result<(Array2<f64>, Array2<f64>)> {
        let s = stack(self.entries.iter().map(|e| e.source.view()).collect())?;
        let a = stack(self.entries.iter().map(|e| e.augmented.view()).collect())?;
        check_same_shape(s.shape(), a.shape(), "source vs augmented embeddings")?;
        Ok((s, a))
    }

    /// Positive sets: indices of entries sharing the anchor's agent id
    /// (always including the anchor itself).
    pub fn positives(&self) -> Vec<Vec<usize>> {
        positives_from_ids(&self.entries.iter().map(|e| e.agent_id.as_str()).collect::<Vec<_>>())
    }
}

pub fn positives_from_ids(ids: &[&str]) -> Vec<Vec<usize>> {
    ids.iter()
        .map(|id| (0..ids.len()).filter(|&j| ids[j] == *id).collect())
        .collect()
}

impl GroupBatch {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn validate(&self) -> Result<()> {
        if self.entries.is_empty() {
            return Err(Error::EmptyBatch);
        }
        for (i, (s, a)) in self.entries.iter().enumerate() {
            check_unit(s.view(), i)?;
            check_unit(a.view(), i)?;
        }
        Ok(())
    }

    pub fn matrices(&self) -> Result<(Array2<f64>, Array2<f64>)> {
        let s = stack(self.entries.iter().map(|e| e.0.view()).collect())?;
        let a = stack(self.entries.iter().map(|e| e.1.view()).collect())?;
        check_same_shape(s.shape(), a.shape(), "source vs augmented embeddings")?;
        Ok((s, a))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Flow {
    Source,
    Augmented,
}

type Slot = (Flow, usize);

/// `coeff * log(sum_k exp(x_u . x_v / tau))` over the listed pairs.
struct LseTerm {
    coeff: f64,
    pairs: Vec<(Slot, Slot)>,
}

fn row<'a>(s: &'a ArrayView2<f64>, a: &'a ArrayView2<f64>, slot: Slot) -> ArrayView1<'a, f64> {
    match slot.0 {
        Flow::Source => s.row(slot.1),
        Flow::Augmented => a.row(slot.1),
    }
}

fn dot(x: ArrayView1<f64>, y: ArrayView1<f64>) -> f64 {
    ksum(x.iter().zip(y.iter()).map(|(p, q)| p * q))
}

fn eval_terms(s: ArrayView2<f64>, a: ArrayView2<f64>, tau: f64, terms: &[LseTerm]) -> (f64, Array2<f64>, Array2<f64>) {
    let mut value = KahanSum::new();
    let mut gs = Array2::<f64>::zeros(s.raw_dim());
    let mut ga = Array2::<f64>::zeros(a.raw_dim());
    for term in terms {
        let z: Vec<f64> = term
            .pairs
            .iter()
            .map(|&(u, v)| dot(row(&s, &a, u), row(&s, &a, v)) / tau)
            .collect();
        let (lse, weights) = log_sum_exp(&z);
        value.add(term.coeff * lse);
        for (&(u, v), w) in term.pairs.iter().zip(weights) {
            let scale = term.coeff * w / tau;
            let xu = row(&s, &a, u).to_owned();
            let xv = row(&s, &a, v).to_owned();
            let mut add = |slot: Slot, other: &Array1<f64>| {
                let target = match slot.0 {
                    Flow::Source => &mut gs,
                    Flow::Augmented => &mut ga,
                };
                target.row_mut(slot.1).scaled_add(scale, other);
            };
            add(u, &xv);
            add(v, &xu);
        }
    }
    (value.value(), gs, ga)
}

/// Agent-level contrastive alignment on raw `B x D` matrices.
///
/// For anchor `i` with positive set `P(i)`:
/// `-1/B * sum_i sum_{p in P(i)} { log[e(s_i.s_p) + e(s_i.a_p) + e(a_i.a_p)]
///  - log[sum_j e(s_i.s_j) + sum_k e(a_i.a_k)] }` with `e(x) = exp(x / tau)`.
/// With `cross_terms`, `sum_j e(s_i.a_j)` joins the denominator.
///
/// No unit-norm check is made here; see [`aca_agent`].
pub fn agent_contrastive(
    source: ArrayView2<f64>,
    augmented: ArrayView2<f64>,
    positives: &[Vec<usize>],
    tau: f64,
    cross_terms: bool,
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    check_same_shape(source.shape(), augmented.shape(), "source vs augmented embeddings")?;
    let b = source.nrows();
    if b == 0 {
        return Err(Error::EmptyBatch);
    }
    if positives.len() != b || positives.iter().any(|p| p.is_empty() || p.iter().any(|&j| j >= b)) {
        return Err(Error::InvalidParams("every anchor needs a non-empty in-range positive set".into()));
    }
    let inv_b = 1.0 / b as f64;
    let mut terms = Vec::new();
    for (i, pos) in positives.iter().enumerate() {
        let s_i = (Flow::Source, i);
        let a_i = (Flow::Augmented, i);
        for &p in pos {
            terms.push(LseTerm {
                coeff: -inv_b,
                pairs: vec![
                    (s_i, (Flow::Source, p)),
                    (s_i, (Flow::Augmented, p)),
                    (a_i, (Flow::Augmented, p)),
                ],
            });
        }
        let mut denom: Vec<(Slot, Slot)> = (0..b).map(|j| (s_i, (Flow::Source, j))).collect();
        denom.extend((0..b).map(|k| (a_i, (Flow::Augmented, k))));
        if cross_terms {
            denom.extend((0..b).map(|j| (s_i, (Flow::Augmented, j))));
        }
        terms.push(LseTerm {
            coeff: inv_b * pos.len() as f64,
            pairs: denom,
        });
    }
    Ok(eval_terms(source, augmented, tau, &terms))
}

/// Group-level contrastive alignment on raw `B x D` matrices:
/// `-1/B * sum_i { s_i.a_i / tau - log[sum_j e(s_i.s_j) + sum_k e(a_i.a_k)] }`.
pub fn group_contrastive(
    source: ArrayView2<f64>,
    augmented: ArrayView2<f64>,
    tau: f64,
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    check_same_shape(source.shape(), augmented.shape(), "source vs augmented embeddings")?;
    let b = source.nrows();
    if b == 0 {
        return Err(Error::EmptyBatch);
    }
    let inv_b = 1.0 / b as f64;
    let mut terms = Vec::with_capacity(2 * b);
    for i in 0..b {
        let s_i = (Flow::Source, i);
        let a_i = (Flow::Augmented, i);
        terms.push(LseTerm {
            coeff: -inv_b,
            pairs: vec![(s_i, a_i)],
        });
        let mut denom: Vec<(Slot, Slot)> = (0..b).map(|j| (s_i, (Flow::Source, j))).collect();
        denom.extend((0..b).map(|k| (a_i, (Flow::Augmented, k))));
        terms.push(LseTerm { coeff: inv_b, pairs: denom });
    }
    Ok(eval_terms(source, augmented, tau, &terms))
}

/// Agent-level contrastive loss. Gradients `"source"` and `"augmented"` are
/// `B_a x D`, row `i` belonging to batch entry `i`.
pub fn aca_agent(batch: &AgentBatch, tau: f64, cross_terms: bool) -> Result<LossReport> {
    batch.validate()?;
    check_tau(tau)?;
    let (s, a) = batch.matrices()?;
    let (value, gs, ga) = agent_contrastive(s.view(), a.view(), &batch.positives(), tau, cross_terms)?;
    Ok(LossReport::new(value)
        .with_grad("source", gs.into_dyn())
        .with_grad("augmented", ga.into_dyn()))
}

/// Group-level contrastive loss. Gradients as in [`aca_agent`].
pub fn aca_group(batch: &GroupBatch, tau: f64) -> Result<LossReport> {
    batch.validate()?;
    check_tau(tau)?;
    let (s, a) = batch.matrices()?;
    let (value, gs, ga) = group_contrastive(s.view(), a.view(), tau)?;
    Ok(LossReport::new(value)
        .with_grad("source", gs.into_dyn())
        .with_grad("augmented", ga.into_dyn()))
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParams(format!("tau must be > 0, got {tau}")))
    }
}

fn reduce(sum: f64, n: usize, reduction: Reduction) -> (f64, f64) {
    match reduction {
        Reduction::Sum => (sum, 1.0),
        Reduction::Mean if n > 0 => (sum / n as f64, 1.0 / n as f64),
        Reduction::Mean => (0.0, 0.0),
    }
}

/// Binary focal loss on logits. Targets must be 0 or 1. With
/// `alpha >= 0` positives are weighted by `alpha` and negatives by
/// `1 - alpha`; a negative `alpha` disables the weighting. Gradient: `"logits"`.
pub fn focal_loss(
    logits: ArrayViewD<f64>,
    targets: ArrayViewD<f64>,
    alpha: f64,
    gamma: f64,
    reduction: Reduction,
) -> Result<LossReport> {
    check_same_shape(logits.shape(), targets.shape(), "logits vs targets")?;
    if !(gamma >= 0.0) {
        return Err(Error::InvalidParams(format!("focal gamma must be >= 0, got {gamma}")));
    }
    let mut value = KahanSum::new();
    let mut grad = ArrayD::zeros(IxDyn(logits.shape()));
    for ((x, t), g) in logits.iter().zip(targets.iter()).zip(grad.iter_mut()) {
        let (l, d) = match *t {
            t if t == 1.0 => focal_positive(*x, gamma),
            t if t == 0.0 => focal_positive(-*x, gamma),
            other => return Err(Error::InvalidParams(format!("focal target must be 0 or 1, got {other}"))),
        };
        let (weight, dir) = match (*t == 1.0, alpha >= 0.0) {
            (true, true) => (alpha, 1.0),
            (false, true) => (1.0 - alpha, -1.0),
            (true, false) => (1.0, 1.0),
            (false, false) => (1.0, -1.0),
        };
        value.add(weight * l);
        *g = weight * d * dir;
    }
    let (value, scale) = reduce(value.value(), logits.len(), reduction);
    grad.mapv_inplace(|g| g * scale);
    Ok(LossReport::new(value).with_grad("logits", grad))
}

/// `-(1 - p)^gamma log p` with `p = sigmoid(x)` and its derivative in `x`.
/// A negative target is handled by calling this with `-x`.
fn focal_positive(x: f64, gamma: f64) -> (f64, f64) {
    let log_p = -softplus(-x);
    let q = sigmoid(-x); // 1 - p
    let p = sigmoid(x);
    let mod_factor = if gamma == 0.0 { 1.0 } else { q.powf(gamma) };
    let value = -mod_factor * log_p;
    // d/dx [-(1-p)^g log p] = (1-p)^g [g p log p - (1-p)]
    let grad = mod_factor * (gamma * p * log_p - q);
    (value, grad)
}

/// Smooth L1: `0.5 d^2 / beta` for `|d| < beta`, else `|d| - 0.5 beta`, with
/// `d = pred - target`. Gradients: `"pred"`, `"target"`.
pub fn smooth_l1(pred: ArrayViewD<f64>, target: ArrayViewD<f64>, beta: f64, reduction: Reduction) -> Result<LossReport> {
    check_same_shape(pred.shape(), target.shape(), "pred vs target")?;
    if !(beta > 0.0) {
        return Err(Error::InvalidParams(format!("smooth-L1 beta must be > 0, got {beta}")));
    }
    let mut value = KahanSum::new();
    let mut grad = ArrayD::zeros(IxDyn(pred.shape()));
    for ((p, t), g) in pred.iter().zip(target.iter()).zip(grad.iter_mut()) {
        let d = p - t;
        if d.abs() < beta {
            value.add(0.5 * d * d / beta);
            *g = d / beta;
        } else {
            value.add(d.abs() - 0.5 * beta);
            *g = sign0(d);
        }
    }
    let (value, scale) = reduce(value.value(), pred.len(), reduction);
    grad.mapv_inplace(|g| g * scale);
    let neg = grad.mapv(|g| -g);
    Ok(LossReport::new(value).with_grad("pred", grad).with_grad("target", neg))
}

/// Named scalar parts of the training objective.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossParts {
    pub det_s: f64,
    pub det_a: f64,
    pub pat: f64,
    pub ffa: f64,
    pub aca_a: f64,
    pub aca_g: f64,
}

impl LossParts {
    pub fn iter(&self) -> impl Iterator<Item = (&'static str, f64)> {
        [
            ("det_s", self.det_s),
            ("det_a", self.det_a),
            ("pat", self.pat),
            ("ffa", self.ffa),
            ("aca_a", self.aca_a),
            ("aca_g", self.aca_g),
        ]
        .into_iter()
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self {
            det_s: self.det_s * k,
            det_a: self.det_a * k,
            pat: self.pat * k,
            ffa: self.ffa * k,
            aca_a: self.aca_a * k,
            aca_g: self.aca_g * k,
        }
    }
}

/// `det_s + det_a + alpha1 pat + alpha2 ffa + beta1 aca_a + beta2 aca_g`.
pub fn total_loss(parts: &LossParts, coeff: &LossCoefficients) -> Result<f64> {
    if let Some((name, v)) = parts.iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFiniteInput(format!("{name} = {v}")));
    }
    Ok(ksum([
        parts.det_s,
        parts.det_a,
        coeff.alpha1 * parts.pat,
        coeff.alpha2 * parts.ffa,
        coeff.beta1 * parts.aca_a,
        coeff.beta2 * parts.aca_g,
    ]))
}
