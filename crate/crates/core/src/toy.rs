//! A desk-scale differentiable stand-in for the cooperative detector.
//!
//! Each agent's clean cloud and its weather-augmented copy are pillarized on
//! a shared ego-frame grid, passed through a per-location affine encoder with
//! softplus activation, and fused across agents by a per-location softmax
//! attention whose score is the mean squared activation. The alignment
//! objective is then
//!
//! ```text
//! alpha1 * L_pat + alpha2 * L_ffa + beta1 * L_aca_agent + beta2 * L_aca_group
//! ```
//!
//! with gradients back-propagated by hand into the encoder weight and bias
//! and the fusion temperature. Detection terms are zero here: there is no
//! prediction head.

use ndarray::{Array1, Array2, Array3, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::awa::{self, AwaParams};
use crate::error::{Error, Result};
use crate::losses::{
    agent_contrastive, embed_backward, embed_chw, group_contrastive, l1_distance, masked_l1, positives_from_ids,
    total_loss, LossCoefficients, LossParts, LossReport,
};
use crate::numeric::{derive_seed, sigmoid, softplus, KahanSum};
use crate::pillars::{pillarize, trust_region, GridSpec, PillarImage, TrustMask};
use crate::pointcloud::{transform_points, AgentFrame, Box3D, Point, PointCloud, Pose, SceneFrame};

/// Starting bias for seeded encoders. Keeps initial activations in the
/// exponential tail of softplus, where plain descent on the L1 terms is smooth.
pub const INIT_BIAS: f64 = -3.0;

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    /// `C_out x C_in`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl EncoderParams {
    pub fn new(weight: Array2<f64>, bias: Array1<f64>) -> Result<Self> {
        let p = Self { weight, bias };
        p.validate()?;
        Ok(p)
    }

    /// Uniform weights in `±1/sqrt(C_in)` and a constant [`INIT_BIAS`].
    pub fn seeded(c_out: usize, c_in: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (c_in as f64).sqrt();
        Self {
            weight: Array2::from_shape_fn((c_out, c_in), |_| rng.gen_range(-scale..scale)),
            bias: Array1::from_elem(c_out, INIT_BIAS),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.weight.nrows() != self.bias.len() {
            return Err(Error::ShapeMismatch(format!(
                "encoder weight has {} rows but bias has {} entries",
                self.weight.nrows(),
                self.bias.len()
            )));
        }
        if !self.weight.iter().chain(self.bias.iter()).all(|v| v.is_finite()) {
            return Err(Error::NonFiniteInput("encoder parameters".into()));
        }
        Ok(())
    }

    pub fn c_in(&self) -> usize {
        self.weight.ncols()
    }

    pub fn c_out(&self) -> usize {
        self.weight.nrows()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionParams {
    pub query_scale: f64,
}

impl Default for FusionParams {
    fn default() -> Self {
        Self { query_scale: 1.0 }
    }
}

impl FusionParams {
    pub fn validate(&self) -> Result<()> {
        if self.query_scale > 0.0 && self.query_scale.is_finite() {
            Ok(())
        } else {
            Err(Error::InvalidParams(format!("query_scale must be > 0, got {}", self.query_scale)))
        }
    }
}

fn preactivation(input: &Array3<f64>, p: &EncoderParams) -> Result<Array3<f64>> {
    let (c, h, w) = input.dim();
    if c != p.c_in() {
        return Err(Error::ShapeMismatch(format!(
            "image has {c} channels, encoder expects {}",
            p.c_in()
        )));
    }
    let flat = input.view().into_shape((c, h * w)).expect("contiguous image");
    let z = p.weight.dot(&flat) + &p.bias.view().insert_axis(Axis(1));
    Ok(z.into_shape((p.c_out(), h, w)).expect("reshape"))
}

/// `F(c', h, w) = softplus(sum_c W(c', c) I(c, h, w) + b(c'))`
pub fn encode(input: &Array3<f64>, p: &EncoderParams) -> Result<Array3<f64>> {
    Ok(preactivation(input, p)?.mapv(softplus))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderGrads {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub input: Array3<f64>,
}

pub fn encode_backward(input: &Array3<f64>, p: &EncoderParams, grad_out: &Array3<f64>) -> Result<EncoderGrads> {
    let z = preactivation(input, p)?;
    if z.dim() != grad_out.dim() {
        return Err(Error::ShapeMismatch(format!(
            "encoder output {:?} vs gradient {:?}",
            z.dim(),
            grad_out.dim()
        )));
    }
    let (c, h, w) = input.dim();
    let dz = &z.mapv(sigmoid) * grad_out;
    let dz_flat = dz.view().into_shape((p.c_out(), h * w)).expect("contiguous");
    let in_flat = input.view().into_shape((c, h * w)).expect("contiguous");
    Ok(EncoderGrads {
        weight: dz_flat.dot(&in_flat.t()),
        bias: dz_flat.sum_axis(Axis(1)),
        input: p.weight.t().dot(&dz_flat).into_shape((c, h, w)).expect("reshape"),
    })
}

fn check_agents(features: &[Array3<f64>]) -> Result<(usize, usize, usize)> {
    let first = features.first().ok_or(Error::EmptyAgentList)?;
    let dim = first.dim();
    if let Some(f) = features.iter().find(|f| f.dim() != dim) {
        return Err(Error::ShapeMismatch(format!("agent features {:?} vs {:?}", f.dim(), dim)));
    }
    Ok(dim)
}

/// Per-location attention weights over agents, `N x H x W`, and the raw
/// mean-square scores `m_i(h, w)`.
fn attention(features: &[Array3<f64>], p: &FusionParams) -> (Array3<f64>, Array3<f64>) {
    let (c, h, w) = features[0].dim();
    let n = features.len();
    let mut m = Array3::<f64>::zeros((n, h, w));
    for (i, f) in features.iter().enumerate() {
        for ((_, y, x), v) in f.indexed_iter() {
            m[[i, y, x]] += v * v;
        }
    }
    m.mapv_inplace(|v| v / c as f64);
    let mut weights = Array3::zeros((n, h, w));
    for y in 0..h {
        for x in 0..w {
            let scores: Vec<f64> = (0..n).map(|i| p.query_scale * m[[i, y, x]]).collect();
            let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            for i in 0..n {
                weights[[i, y, x]] = exps[i] / total;
            }
        }
    }
    (weights, m)
}

/// `out(c, h, w) = sum_i w_i(h, w) F_i(c, h, w)` with
/// `w(h, w) = softmax_i(query_scale * sum_c F_i(c, h, w)^2 / C)`.
pub fn fuse(features: &[Array3<f64>], p: &FusionParams) -> Result<Array3<f64>> {
    p.validate()?;
    let (c, h, w) = check_agents(features)?;
    if features.len() == 1 {
        return Ok(features[0].clone());
    }
    let (weights, _) = attention(features, p);
    let mut out = Array3::zeros((c, h, w));
    for (i, f) in features.iter().enumerate() {
        for ((k, y, x), v) in f.indexed_iter() {
            out[[k, y, x]] += weights[[i, y, x]] * v;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionGrads {
    pub features: Vec<Array3<f64>>,
    pub query_scale: f64,
}

pub fn fuse_backward(features: &[Array3<f64>], p: &FusionParams, grad_out: &Array3<f64>) -> Result<FusionGrads> {
    p.validate()?;
    let (c, h, w) = check_agents(features)?;
    if grad_out.dim() != (c, h, w) {
        return Err(Error::ShapeMismatch(format!(
            "fused output {:?} vs gradient {:?}",
            (c, h, w),
            grad_out.dim()
        )));
    }
    let n = features.len();
    if n == 1 {
        return Ok(FusionGrads {
            features: vec![grad_out.clone()],
            query_scale: 0.0,
        });
    }
    let (weights, m) = attention(features, p);
    // u_i = sum_c g_c F_ic : sensitivity of the loss to agent i's weight.
    let mut u = Array3::<f64>::zeros((n, h, w));
    for (i, f) in features.iter().enumerate() {
        for ((k, y, x), v) in f.indexed_iter() {
            u[[i, y, x]] += grad_out[[k, y, x]] * v;
        }
    }
    let mut d_score = Array3::<f64>::zeros((n, h, w));
    for y in 0..h {
        for x in 0..w {
            let mean_u: f64 = (0..n).map(|i| weights[[i, y, x]] * u[[i, y, x]]).sum();
            for i in 0..n {
                d_score[[i, y, x]] = weights[[i, y, x]] * (u[[i, y, x]] - mean_u);
            }
        }
    }
    let mut dq = KahanSum::new();
    for (ds, mv) in d_score.iter().zip(m.iter()) {
        dq.add(ds * mv);
    }
    let grads = features
        .iter()
        .enumerate()
        .map(|(i, f)| {
            Array3::from_shape_fn((c, h, w), |(k, y, x)| {
                weights[[i, y, x]] * grad_out[[k, y, x]]
                    + d_score[[i, y, x]] * p.query_scale * 2.0 * f[[k, y, x]] / c as f64
            })
        })
        .collect();
    Ok(FusionGrads {
        features: grads,
        query_scale: dq.value(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub grid: GridSpec,
    pub awa: AwaParams,
    pub coeff: LossCoefficients,
    /// Draw one threshold triple per scene instead of one per agent.
    pub shared_thresholds: bool,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            grid: GridSpec::default(),
            awa: AwaParams::default(),
            coeff: LossCoefficients::default(),
            shared_thresholds: false,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        self.awa.validate()?;
        self.coeff.validate()
    }
}

/// Source/reduced/augmented pseudo-images of one agent, in the ego frame.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentFlows {
    pub agent_id: String,
    pub source: PillarImage,
    pub reduced: PillarImage,
    pub augmented: PillarImage,
    pub mask: TrustMask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameFlows {
    pub frame_id: String,
    pub agents: Vec<AgentFlows>,
}

/// Everything upstream of the encoder; independent of the learnable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Flows {
    pub frames: Vec<FrameFlows>,
}

/// Runs augmentation and pillarization for a batch of scenes.
pub fn prepare_flows(scenes: &[SceneFrame], cfg: &PipelineConfig) -> Result<Flows> {
    cfg.validate()?;
    let mut frames = Vec::with_capacity(scenes.len());
    for scene in scenes {
        scene.validate()?;
        let shared = if cfg.shared_thresholds {
            Some(awa::sample_thresholds(
                &cfg.awa,
                derive_seed(cfg.seed, &["awa-shared", &scene.frame_id]),
            )?)
        } else {
            None
        };
        let mut agents = Vec::with_capacity(scene.agents.len());
        for agent in &scene.agents {
            let seed = derive_seed(cfg.seed, &["awa", &scene.frame_id, &agent.agent_id]);
            // Augment in the sensor frame (range limits are sensor-relative),
            // then move every flow into the ego frame for fusion.
            let out = match shared {
                Some(t) => awa::awa_with_thresholds(&agent.cloud, &cfg.awa, t, seed)?,
                None => awa::awa(&agent.cloud, &cfg.awa, seed)?,
            };
            let to_ego = scene.agent_to_ego(agent);
            let project = |pc: &PointCloud| pillarize(&transform_points(pc, &to_ego), &cfg.grid);
            let source = project(&agent.cloud)?;
            let reduced = project(&out.reduced)?;
            let augmented = project(&out.augmented)?;
            let mask = trust_region(&source, &reduced)?;
            agents.push(AgentFlows {
                agent_id: agent.agent_id.clone(),
                source,
                reduced,
                augmented,
                mask,
            });
        }
        frames.push(FrameFlows {
            frame_id: scene.frame_id.clone(),
            agents,
        });
    }
    Ok(Flows { frames })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub query_scale: f64,
}

impl ParamGrads {
    fn zeros(enc: &EncoderParams) -> Self {
        Self {
            weight: Array2::zeros(enc.weight.raw_dim()),
            bias: Array1::zeros(enc.bias.len()),
            query_scale: 0.0,
        }
    }

    fn add(&mut self, other: &ParamGrads) {
        self.weight += &other.weight;
        self.bias += &other.bias;
        self.query_scale += other.query_scale;
    }

    pub fn is_zero(&self) -> bool {
        self.query_scale == 0.0 && self.weight.iter().chain(self.bias.iter()).all(|v| *v == 0.0)
    }

    /// Flattened as `[weight (row-major), bias, query_scale]`.
    pub fn to_vec(&self) -> Vec<f64> {
        self.weight
            .iter()
            .chain(self.bias.iter())
            .copied()
            .chain(std::iter::once(self.query_scale))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardReport {
    pub parts: LossParts,
    /// Weighted alignment objective (detection parts are zero).
    pub total: f64,
    pub grads: ParamGrads,
    /// Gradient of `alpha1 * pat + alpha2 * ffa` alone.
    pub twa_grads: ParamGrads,
    /// Gradient of `beta1 * aca_a + beta2 * aca_g` alone.
    pub aca_grads: ParamGrads,
}

impl ForwardReport {
    pub fn twa(&self, coeff: &LossCoefficients) -> f64 {
        coeff.alpha1 * self.parts.pat + coeff.alpha2 * self.parts.ffa
    }

    pub fn to_loss_report(&self) -> LossReport {
        LossReport::new(self.total)
            .with_grad("encoder.weight", self.grads.weight.clone().into_dyn())
            .with_grad("encoder.bias", self.grads.bias.clone().into_dyn())
            .with_grad("fusion.query_scale", Array1::from_elem(1, self.grads.query_scale).into_dyn())
    }
}

struct FrameCache {
    src_feats: Vec<Array3<f64>>,
    aug_feats: Vec<Array3<f64>>,
    fused_src: Array3<f64>,
    fused_aug: Array3<f64>,
}

/// Forward pass and hand-written backward pass over prepared flows.
pub fn forward_from_flows(
    flows: &Flows,
    enc: &EncoderParams,
    fus: &FusionParams,
    coeff: &LossCoefficients,
) -> Result<ForwardReport> {
    enc.validate()?;
    fus.validate()?;
    coeff.validate()?;
    if flows.frames.is_empty() {
        return Err(Error::EmptyBatch);
    }

    let mut pat = KahanSum::new();
    let mut ffa = KahanSum::new();
    let mut caches = Vec::with_capacity(flows.frames.len());
    let mut agent_ids: Vec<&str> = Vec::new();
    let mut agent_src_emb = Vec::new();
    let mut agent_aug_emb = Vec::new();
    let mut group_src_emb = Vec::new();
    let mut group_aug_emb = Vec::new();

    for frame in &flows.frames {
        if frame.agents.is_empty() {
            return Err(Error::EmptyAgentList);
        }
        let mut src_feats = Vec::with_capacity(frame.agents.len());
        let mut aug_feats = Vec::with_capacity(frame.agents.len());
        for a in &frame.agents {
            pat.add(masked_l1(&a.source.data, &a.augmented.data, &a.mask.data)?.0);
            let fs = encode(&a.source.data, enc)?;
            let fa = encode(&a.augmented.data, enc)?;
            agent_ids.push(a.agent_id.as_str());
            agent_src_emb.push(embed_chw(&fs));
            agent_aug_emb.push(embed_chw(&fa));
            src_feats.push(fs);
            aug_feats.push(fa);
        }
        let fused_src = fuse(&src_feats, fus)?;
        let fused_aug = fuse(&aug_feats, fus)?;
        ffa.add(l1_distance(fused_src.view().into_dyn(), fused_aug.view().into_dyn())?.0);
        group_src_emb.push(embed_chw(&fused_src));
        group_aug_emb.push(embed_chw(&fused_aug));
        caches.push(FrameCache {
            src_feats,
            aug_feats,
            fused_src,
            fused_aug,
        });
    }

    let rows = |v: &[Array1<f64>]| -> Array2<f64> {
        let views: Vec<_> = v.iter().map(|r| r.view()).collect();
        ndarray::stack(Axis(0), &views).expect("equal embedding sizes")
    };
    let (as_, aa) = (rows(&agent_src_emb), rows(&agent_aug_emb));
    let (gs, ga) = (rows(&group_src_emb), rows(&group_aug_emb));
    let positives = positives_from_ids(&agent_ids);
    let (aca_a, d_agent_s, d_agent_a) =
        agent_contrastive(as_.view(), aa.view(), &positives, coeff.tau, coeff.agent_cross_terms)?;
    let (aca_g, d_group_s, d_group_a) = group_contrastive(gs.view(), ga.view(), coeff.tau)?;

    let parts = LossParts {
        pat: pat.value(),
        ffa: ffa.value(),
        aca_a,
        aca_g,
        ..LossParts::default()
    };
    let total = total_loss(&parts, coeff)?;

    let twa_grads = backward(flows, &caches, enc, fus, &Seeds::twa(coeff))?;
    let aca_grads = backward(
        flows,
        &caches,
        enc,
        fus,
        &Seeds::aca(coeff, d_agent_s.view(), d_agent_a.view(), d_group_s.view(), d_group_a.view()),
    )?;
    let mut grads = twa_grads.clone();
    grads.add(&aca_grads);

    Ok(ForwardReport {
        parts,
        total,
        grads,
        twa_grads,
        aca_grads,
    })
}

/// Upstream gradients fed into the backward pass.
struct Seeds<'a> {
    ffa_weight: f64,
    agent_weight: f64,
    group_weight: f64,
    agent: Option<(ArrayView2<'a, f64>, ArrayView2<'a, f64>)>,
    group: Option<(ArrayView2<'a, f64>, ArrayView2<'a, f64>)>,
}

impl<'a> Seeds<'a> {
    fn twa(coeff: &LossCoefficients) -> Self {
        // L_pat acts on pre-encoder pillars and has no parameter gradient.
        Self {
            ffa_weight: coeff.alpha2,
            agent_weight: 0.0,
            group_weight: 0.0,
            agent: None,
            group: None,
        }
    }

    fn aca(
        coeff: &LossCoefficients,
        agent_s: ArrayView2<'a, f64>,
        agent_a: ArrayView2<'a, f64>,
        group_s: ArrayView2<'a, f64>,
        group_a: ArrayView2<'a, f64>,
    ) -> Self {
        Self {
            ffa_weight: 0.0,
            agent_weight: coeff.beta1,
            group_weight: coeff.beta2,
            agent: Some((agent_s, agent_a)),
            group: Some((group_s, group_a)),
        }
    }
}

fn backward(
    flows: &Flows,
    caches: &[FrameCache],
    enc: &EncoderParams,
    fus: &FusionParams,
    seeds: &Seeds,
) -> Result<ParamGrads> {
    let mut out = ParamGrads::zeros(enc);
    let mut agent_row = 0;
    for (f, (frame, cache)) in flows.frames.iter().zip(caches).enumerate() {
        // d/d fused features
        let diff_sign = (&cache.fused_src - &cache.fused_aug).mapv(crate::numeric::sign0);
        let mut g_fused_src = &diff_sign * seeds.ffa_weight;
        let mut g_fused_aug = &diff_sign * -seeds.ffa_weight;
        if let Some((gs, ga)) = &seeds.group {
            g_fused_src.scaled_add(seeds.group_weight, &embed_backward(&cache.fused_src, gs.row(f)));
            g_fused_aug.scaled_add(seeds.group_weight, &embed_backward(&cache.fused_aug, ga.row(f)));
        }

        for (feats, g_fused, is_src) in [
            (&cache.src_feats, &g_fused_src, true),
            (&cache.aug_feats, &g_fused_aug, false),
        ] {
            let fg = fuse_backward(feats, fus, g_fused)?;
            out.query_scale += fg.query_scale;
            for (k, (feat, mut g_feat)) in feats.iter().zip(fg.features).enumerate() {
                if let Some((gs, ga)) = &seeds.agent {
                    let g_emb = if is_src { gs.row(agent_row + k) } else { ga.row(agent_row + k) };
                    g_feat.scaled_add(seeds.agent_weight, &embed_backward(feat, g_emb));
                }
                let agent = &frame.agents[k];
                let input = if is_src { &agent.source.data } else { &agent.augmented.data };
                let eg = encode_backward(input, enc, &g_feat)?;
                out.weight += &eg.weight;
                out.bias += &eg.bias;
            }
        }
        agent_row += frame.agents.len();
    }
    Ok(out)
}

/// Full pipeline on one scene: augmentation, pillarization, trust region,
/// encoding, fusion and every alignment loss, with parameter gradients.
pub fn forward_losses(
    scene: &SceneFrame,
    enc: &EncoderParams,
    fus: &FusionParams,
    cfg: &PipelineConfig,
) -> Result<ForwardReport> {
    let flows = prepare_flows(std::slice::from_ref(scene), cfg)?;
    forward_from_flows(&flows, enc, fus, &cfg.coeff)
}

/// Plain gradient descent on encoder and fusion parameters over fixed flows.
/// Returns the objective before each step and after the last one.
pub fn descend(
    flows: &Flows,
    enc: &mut EncoderParams,
    fus: &mut FusionParams,
    coeff: &LossCoefficients,
    steps: usize,
    lr: f64,
) -> Result<Vec<f64>> {
    let mut history = Vec::with_capacity(steps + 1);
    for _ in 0..steps {
        let r = forward_from_flows(flows, enc, fus, coeff)?;
        history.push(r.total);
        enc.weight.scaled_add(-lr, &r.grads.weight);
        enc.bias.scaled_add(-lr, &r.grads.bias);
        // Keep the attention temperature positive.
        fus.query_scale = (fus.query_scale - lr * r.grads.query_scale).max(1e-6);
    }
    history.push(forward_from_flows(flows, enc, fus, coeff)?.total);
    Ok(history)
}

/// Grid used by the synthetic toy scenes: 32 m x 32 m at 2 m pillars.
pub fn toy_grid() -> GridSpec {
    GridSpec {
        x_range: (-16.0, 16.0),
        y_range: (-16.0, 16.0),
        resolution: 2.0,
        channels: 8,
    }
}

/// A seeded multi-agent scene: agents spread around the ego, each observing
/// a handful of box-shaped objects plus ground returns, `points_per_agent`
/// points each (sensor frame).
pub fn synthetic_scene(frame_id: &str, n_agents: usize, points_per_agent: usize, seed: u64) -> SceneFrame {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let objects: Vec<Box3D> = (0..4)
        .map(|_| {
            Box3D::new(
                [rng.gen_range(-12.0..12.0), rng.gen_range(-12.0..12.0), 0.8],
                [4.0, 1.8, 1.6],
                rng.gen_range(-3.0..3.0),
            )
        })
        .collect();
    let agents = (0..n_agents.max(1))
        .map(|k| {
            let pose = if k == 0 {
                Pose::identity()
            } else {
                Pose::new(
                    [rng.gen_range(-6.0..6.0), rng.gen_range(-6.0..6.0), 0.0],
                    rng.gen_range(-0.5..0.5),
                    0.0,
                    0.0,
                )
            };
            let to_sensor = pose.inverse();
            let points: Vec<Point> = (0..points_per_agent)
                .map(|_| {
                    let world = if rng.gen::<f64>() < 0.7 {
                        let b = &objects[rng.gen_range(0..objects.len())];
                        let (s, c) = b.yaw.sin_cos();
                        let u = rng.gen_range(-0.5..0.5) * b.dims[0];
                        let v = rng.gen_range(-0.5..0.5) * b.dims[1];
                        [
                            b.center[0] + c * u - s * v,
                            b.center[1] + s * u + c * v,
                            b.center[2] + rng.gen_range(-0.5..0.5) * b.dims[2],
                        ]
                    } else {
                        [rng.gen_range(-15.0..15.0), rng.gen_range(-15.0..15.0), rng.gen_range(-0.2..0.0)]
                    };
                    let local = to_sensor.apply(world);
                    Point::new(local[0], local[1], local[2], rng.gen_range(0.05..1.0))
                })
                .collect();
            AgentFrame {
                agent_id: if k == 0 { "ego".to_string() } else { format!("cav{k}") },
                is_ego: k == 0,
                pose,
                cloud: PointCloud::new(points),
            }
        })
        .collect();
    SceneFrame::new(frame_id, agents, objects).expect("synthetic scene is valid")
}

/// Config used with [`synthetic_scene`]: the toy grid and augmentation
/// bounds sized to it.
pub fn toy_config(seed: u64) -> PipelineConfig {
    PipelineConfig {
        grid: toy_grid(),
        awa: AwaParams {
            bounds: [20.0, 20.0, 4.0],
            ..AwaParams::default()
        },
        seed,
        ..PipelineConfig::default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{relative_error, REL_ERR_FLOOR};
    use std::f64::consts::LN_2;

    const H: f64 = 1e-5;

    fn random3(rng: &mut ChaCha8Rng, d: (usize, usize, usize), lo: f64, hi: f64) -> Array3<f64> {
        Array3::from_shape_fn(d, |_| rng.gen_range(lo..hi))
    }

    #[test]
    fn encode_zero_input() {
        let p = EncoderParams::new(Array2::zeros((3, 2)), Array1::zeros(3)).unwrap();
        let out = encode(&Array3::zeros((2, 4, 4)), &p).unwrap();
        assert!(out.iter().all(|v| (v - LN_2).abs() < 1e-15));
    }

    #[test]
    fn encode_asymptote() {
        let p = EncoderParams::new(Array2::eye(2), Array1::zeros(2)).unwrap();
        let out = encode(&Array3::from_elem((2, 1, 1), 30.0), &p).unwrap();
        assert!(out.iter().all(|v| (v - 30.0).abs() < 1e-9));
    }

    #[test]
    fn encode_shape_mismatch() {
        let p = EncoderParams::seeded(4, 8, 0);
        assert!(matches!(encode(&Array3::zeros((3, 2, 2)), &p), Err(Error::ShapeMismatch(_))));
        assert!(EncoderParams::new(Array2::zeros((2, 2)), Array1::zeros(3)).is_err());
    }

    #[test]
    fn encode_jacobian_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = EncoderParams {
            weight: Array2::from_shape_fn((3, 2), |_| rng.gen_range(-1.0..1.0)),
            bias: Array1::from_shape_fn(3, |_| rng.gen_range(-1.0..1.0)),
        };
        let x = random3(&mut rng, (2, 3, 3), -2.0, 2.0);
        for out_idx in [(0, 0, 0), (1, 2, 1), (2, 1, 2)] {
            let mut seed = Array3::zeros((3, 3, 3));
            seed[out_idx] = 1.0;
            let g = encode_backward(&x, &p, &seed).unwrap();
            for (idx, _) in x.indexed_iter() {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[idx] += H;
                xm[idx] -= H;
                let numeric = (encode(&xp, &p).unwrap()[out_idx] - encode(&xm, &p).unwrap()[out_idx]) / (2.0 * H);
                assert!(relative_error(g.input[idx], numeric, REL_ERR_FLOOR) < 1e-6);
            }
            for (idx, _) in p.weight.indexed_iter() {
                let mut pp = p.clone();
                let mut pm = p.clone();
                pp.weight[idx] += H;
                pm.weight[idx] -= H;
                let numeric = (encode(&x, &pp).unwrap()[out_idx] - encode(&x, &pm).unwrap()[out_idx]) / (2.0 * H);
                assert!(relative_error(g.weight[idx], numeric, REL_ERR_FLOOR) < 1e-6);
            }
        }
    }

    #[test]
    fn fuse_single_and_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = random3(&mut rng, (3, 4, 4), 0.0, 2.0);
        let p = FusionParams::default();
        assert_eq!(fuse(&[f.clone()], &p).unwrap(), f);
        assert_eq!(fuse(&[f.clone(), f.clone()], &p).unwrap(), f);
        assert!(matches!(fuse(&[], &p), Err(Error::EmptyAgentList)));
        let g = random3(&mut rng, (3, 4, 5), 0.0, 2.0);
        assert!(matches!(fuse(&[f.clone(), g], &p), Err(Error::ShapeMismatch(_))));
        assert!(fuse(&[f], &FusionParams { query_scale: 0.0 }).is_err());
    }

    #[test]
    fn fuse_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let fs: Vec<_> = (0..4).map(|_| random3(&mut rng, (3, 5, 5), 0.0, 2.0)).collect();
        let p = FusionParams { query_scale: 1.7 };
        let a = fuse(&fs, &p).unwrap();
        let mut perm = fs.clone();
        perm.rotate_left(1);
        perm.swap(0, 2);
        let b = fuse(&perm, &p).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn fuse_gradient_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let fs: Vec<_> = (0..3).map(|_| random3(&mut rng, (2, 3, 3), 0.1, 2.0)).collect();
        let p = FusionParams { query_scale: 0.8 };
        let w = random3(&mut rng, (2, 3, 3), -1.0, 1.0);
        let loss = |fs: &[Array3<f64>], p: &FusionParams| (fuse(fs, p).unwrap() * &w).sum();
        let g = fuse_backward(&fs, &p, &w).unwrap();
        for i in 0..3 {
            for (idx, _) in fs[i].indexed_iter() {
                let mut fp = fs.clone();
                let mut fm = fs.clone();
                fp[i][idx] += H;
                fm[i][idx] -= H;
                let numeric = (loss(&fp, &p) - loss(&fm, &p)) / (2.0 * H);
                assert!(relative_error(g.features[i][idx], numeric, REL_ERR_FLOOR) < 1e-5);
            }
        }
        let numeric = (loss(&fs, &FusionParams { query_scale: 0.8 + H }) - loss(&fs, &FusionParams { query_scale: 0.8 - H })) / (2.0 * H);
        assert!(relative_error(g.query_scale, numeric, REL_ERR_FLOOR) < 1e-5);
    }

    fn fd_params(flows: &Flows, enc: &EncoderParams, fus: &FusionParams, coeff: &LossCoefficients) -> Vec<f64> {
        let f = |e: &EncoderParams, q: &FusionParams| forward_from_flows(flows, e, q, coeff).unwrap().total;
        let mut out = Vec::new();
        for (idx, _) in enc.weight.indexed_iter() {
            let mut p = enc.clone();
            let mut m = enc.clone();
            p.weight[idx] += H;
            m.weight[idx] -= H;
            out.push((f(&p, fus) - f(&m, fus)) / (2.0 * H));
        }
        for i in 0..enc.bias.len() {
            let mut p = enc.clone();
            let mut m = enc.clone();
            p.bias[i] += H;
            m.bias[i] -= H;
            out.push((f(&p, fus) - f(&m, fus)) / (2.0 * H));
        }
        let qp = FusionParams { query_scale: fus.query_scale + H };
        let qm = FusionParams { query_scale: fus.query_scale - H };
        out.push((f(enc, &qp) - f(enc, &qm)) / (2.0 * H));
        out
    }

    #[test]
    fn pipeline_gradient_matches_fd() {
        let scene = synthetic_scene("f0", 2, 100, 7);
        let cfg = toy_config(11);
        let flows = prepare_flows(&[scene], &cfg).unwrap();
        let enc = EncoderParams::seeded(4, 8, 5);
        let fus = FusionParams { query_scale: 0.5 };
        let r = forward_from_flows(&flows, &enc, &fus, &cfg.coeff).unwrap();
        let numeric = fd_params(&flows, &enc, &fus, &cfg.coeff);
        let analytic = r.grads.to_vec();
        let worst = analytic
            .iter()
            .zip(&numeric)
            .map(|(a, n)| relative_error(*a, *n, REL_ERR_FLOOR))
            .fold(0.0, f64::max);
        assert!(worst < 1e-4, "worst relative error {worst:e}");
    }

    #[test]
    fn identical_flows_zero_twa() {
        let scene = synthetic_scene("f0", 3, 150, 8);
        let cfg = PipelineConfig {
            awa: AwaParams::identity([1e3, 1e3, 1e3]),
            ..toy_config(1)
        };
        let enc = EncoderParams::seeded(4, 8, 2);
        let r = forward_losses(&scene, &enc, &FusionParams::default(), &cfg).unwrap();
        assert_eq!(r.parts.pat, 0.0);
        assert_eq!(r.parts.ffa, 0.0);
        assert!(r.twa_grads.is_zero());
        assert!((r.parts.aca_g - LN_2).abs() < 1e-12);
    }

    #[test]
    fn forward_is_deterministic() {
        let scene = synthetic_scene("f0", 2, 200, 9);
        let cfg = toy_config(3);
        let enc = EncoderParams::seeded(4, 8, 2);
        let a = forward_losses(&scene, &enc, &FusionParams::default(), &cfg).unwrap();
        let b = forward_losses(&scene, &enc, &FusionParams::default(), &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.total.to_bits(), b.total.to_bits());
    }

    #[test]
    fn shared_thresholds_apply_to_every_agent() {
        let scene = synthetic_scene("f0", 3, 200, 10);
        let cfg = PipelineConfig {
            shared_thresholds: true,
            ..toy_config(4)
        };
        let flows = prepare_flows(&[scene], &cfg).unwrap();
        assert_eq!(flows.frames[0].agents.len(), 3);
        let enc = EncoderParams::seeded(4, 8, 2);
        assert!(forward_from_flows(&flows, &enc, &FusionParams::default(), &cfg.coeff).is_ok());
    }

    #[test]
    fn descent_strictly_decreases() {
        for seed in 0..5u64 {
            let scene = synthetic_scene("f0", 2, 200, seed);
            let cfg = toy_config(seed + 100);
            let flows = prepare_flows(&[scene], &cfg).unwrap();
            let mut enc = EncoderParams::seeded(4, 8, seed + 200);
            let mut fus = FusionParams::default();
            let h = descend(&flows, &mut enc, &mut fus, &cfg.coeff, 50, 1e-2).unwrap();
            assert_eq!(h.len(), 51);
            assert!(h.windows(2).all(|w| w[1] < w[0]), "seed {seed}: {h:?}");
        }
    }
}
