//! Central-difference verification of every hand-written backward pass.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, Array3, ArrayD, Dimension, Ix1, Ix2, Ix3, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::losses::{
    agent_contrastive, embed_backward, embed_chw, focal_loss, group_contrastive, l1_distance, masked_l1,
    positives_from_ids, smooth_l1, Reduction,
};
use crate::numeric::{derive_seed, relative_error, REL_ERR_FLOOR};
use crate::toy::{
    encode, encode_backward, forward_from_flows, fuse, fuse_backward, prepare_flows, synthetic_scene, toy_config,
    EncoderParams, FusionParams,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum GradTarget {
    LPat,
    LFfa,
    AcaAgent,
    AcaGroup,
    Focal,
    SmoothL1,
    Embed,
    Encode,
    Fuse,
    Pipeline,
}

impl GradTarget {
    pub const ALL: [GradTarget; 10] = [
        GradTarget::LPat,
        GradTarget::LFfa,
        GradTarget::AcaAgent,
        GradTarget::AcaGroup,
        GradTarget::Focal,
        GradTarget::SmoothL1,
        GradTarget::Embed,
        GradTarget::Encode,
        GradTarget::Fuse,
        GradTarget::Pipeline,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GradTarget::LPat => "l_pat",
            GradTarget::LFfa => "l_ffa",
            GradTarget::AcaAgent => "aca_agent",
            GradTarget::AcaGroup => "aca_group",
            GradTarget::Focal => "focal",
            GradTarget::SmoothL1 => "smooth_l1",
            GradTarget::Embed => "embed",
            GradTarget::Encode => "encode",
            GradTarget::Fuse => "fuse",
            GradTarget::Pipeline => "pipeline",
        }
    }

    /// Largest acceptable relative error.
    pub fn tolerance(self) -> f64 {
        match self {
            GradTarget::Encode => 1e-6,
            GradTarget::Pipeline => 1e-4,
            _ => 1e-5,
        }
    }
}

impl fmt::Display for GradTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GradTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        GradTarget::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::UnknownTarget(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WorstCoordinate {
    pub input: String,
    pub index: Vec<usize>,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialResult {
    pub trial: usize,
    pub coordinates: usize,
    pub max_rel_err: f64,
    pub worst: Option<WorstCoordinate>,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub target: GradTarget,
    pub eps: f64,
    pub tolerance: f64,
    pub trials: Vec<TrialResult>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.trials.iter().all(|t| t.passed)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.trials.iter().map(|t| t.max_rel_err).fold(0.0, f64::max)
    }
}

type Objective = Box<dyn Fn(&[ArrayD<f64>]) -> Result<f64>>;

/// A scalar function of named array inputs with its claimed gradients.
struct Problem {
    names: Vec<String>,
    inputs: Vec<ArrayD<f64>>,
    analytic: Vec<ArrayD<f64>>,
    f: Objective,
}

impl Problem {
    fn check(mut self, trial: usize, eps: f64, tolerance: f64) -> Result<TrialResult> {
        let mut max_rel_err = 0.0;
        let mut worst = None;
        let mut coordinates = 0;
        for k in 0..self.inputs.len() {
            let indices: Vec<IxDyn> = self.inputs[k].indexed_iter().map(|(i, _)| i).collect();
            for idx in indices {
                let orig = self.inputs[k][&idx];
                self.inputs[k][&idx] = orig + eps;
                let fp = (self.f)(&self.inputs)?;
                self.inputs[k][&idx] = orig - eps;
                let fm = (self.f)(&self.inputs)?;
                self.inputs[k][&idx] = orig;
                let numeric = (fp - fm) / (2.0 * eps);
                let analytic = self.analytic[k][&idx];
                let err = relative_error(analytic, numeric, REL_ERR_FLOOR);
                coordinates += 1;
                if worst.is_none() || err > max_rel_err {
                    max_rel_err = err;
                    worst = Some(WorstCoordinate {
                        input: self.names[k].clone(),
                        index: idx.as_array_view().to_vec(),
                        analytic,
                        numeric,
                    });
                }
            }
        }
        Ok(TrialResult {
            trial,
            coordinates,
            max_rel_err,
            worst,
            passed: max_rel_err < tolerance,
        })
    }
}

fn d3(a: &ArrayD<f64>) -> Array3<f64> {
    a.clone().into_dimensionality::<Ix3>().expect("rank-3 input")
}

fn d2(a: &ArrayD<f64>) -> Array2<f64> {
    a.clone().into_dimensionality::<Ix2>().expect("rank-2 input")
}

fn d1(a: &ArrayD<f64>) -> Array1<f64> {
    a.clone().into_dimensionality::<Ix1>().expect("rank-1 input")
}

fn uniform3(rng: &mut ChaCha8Rng, shape: (usize, usize, usize), lo: f64, hi: f64) -> Array3<f64> {
    Array3::from_shape_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Offsets bounded away from zero so L1 kinks stay out of the stencil.
fn away_from_zero(rng: &mut ChaCha8Rng, min: f64, max: f64) -> f64 {
    let v = rng.gen_range(min..max);
    if rng.gen_bool(0.5) {
        v
    } else {
        -v
    }
}

fn unit_rows(rng: &mut ChaCha8Rng, b: usize, d: usize) -> Array2<f64> {
    let mut m: Array2<f64> = Array2::from_shape_fn((b, d), |_| rng.gen_range(-1.0..1.0));
    for mut row in m.rows_mut() {
        let n = row.dot(&row).sqrt();
        row.mapv_inplace(|v| v / n);
    }
    m
}

fn problem(target: GradTarget, rng: &mut ChaCha8Rng) -> Result<Problem> {
    Ok(match target {
        GradTarget::LPat => {
            let shape = (3, rng.gen_range(2..5), rng.gen_range(2..5));
            let a = uniform3(rng, shape, -1.0, 1.0);
            let b = a.mapv(|v| v + away_from_zero(rng, 0.05, 1.0));
            let mask = Array2::from_shape_fn((shape.1, shape.2), |_| u8::from(rng.gen_bool(0.6)));
            let (_, ga, gb) = masked_l1(&a, &b, &mask)?;
            Problem {
                names: vec!["source".into(), "augmented".into()],
                inputs: vec![a.into_dyn(), b.into_dyn()],
                analytic: vec![ga.into_dyn(), gb.into_dyn()],
                f: Box::new(move |x| Ok(masked_l1(&d3(&x[0]), &d3(&x[1]), &mask)?.0)),
            }
        }
        GradTarget::LFfa => {
            let shape = (rng.gen_range(1..4), rng.gen_range(2..5), rng.gen_range(2..5));
            let a = uniform3(rng, shape, 0.0, 2.0);
            let b = a.mapv(|v| v + away_from_zero(rng, 0.05, 1.0));
            let (_, ga, gb) = l1_distance(a.view().into_dyn(), b.view().into_dyn())?;
            Problem {
                names: vec!["source".into(), "augmented".into()],
                inputs: vec![a.into_dyn(), b.into_dyn()],
                analytic: vec![ga, gb],
                f: Box::new(|x| Ok(l1_distance(x[0].view(), x[1].view())?.0)),
            }
        }
        GradTarget::AcaAgent => {
            let b = rng.gen_range(2..6);
            let d = rng.gen_range(3..9);
            let tau = rng.gen_range(0.1..1.0);
            let cross = rng.gen_bool(0.5);
            let pool = ["a", "b", "c"];
            let ids: Vec<&str> = (0..b).map(|_| pool[rng.gen_range(0..pool.len())]).collect();
            let positives = positives_from_ids(&ids);
            let (s, a) = (unit_rows(rng, b, d), unit_rows(rng, b, d));
            let (_, gs, ga) = agent_contrastive(s.view(), a.view(), &positives, tau, cross)?;
            Problem {
                names: vec!["source".into(), "augmented".into()],
                inputs: vec![s.into_dyn(), a.into_dyn()],
                analytic: vec![gs.into_dyn(), ga.into_dyn()],
                f: Box::new(move |x| {
                    Ok(agent_contrastive(d2(&x[0]).view(), d2(&x[1]).view(), &positives, tau, cross)?.0)
                }),
            }
        }
        GradTarget::AcaGroup => {
            let b = rng.gen_range(1..6);
            let d = rng.gen_range(3..9);
            let tau = rng.gen_range(0.1..1.0);
            let (s, a) = (unit_rows(rng, b, d), unit_rows(rng, b, d));
            let (_, gs, ga) = group_contrastive(s.view(), a.view(), tau)?;
            Problem {
                names: vec!["source".into(), "augmented".into()],
                inputs: vec![s.into_dyn(), a.into_dyn()],
                analytic: vec![gs.into_dyn(), ga.into_dyn()],
                f: Box::new(move |x| Ok(group_contrastive(d2(&x[0]).view(), d2(&x[1]).view(), tau)?.0)),
            }
        }
        GradTarget::Focal => {
            let n = rng.gen_range(2..12);
            let logits = Array1::from_shape_fn(n, |_| rng.gen_range(-4.0..4.0)).into_dyn();
            let targets = Array1::from_shape_fn(n, |_| f64::from(u8::from(rng.gen_bool(0.3)))).into_dyn();
            let alpha = if rng.gen_bool(0.5) { rng.gen_range(0.05..0.95) } else { -1.0 };
            let gamma = rng.gen_range(0.0..3.0);
            let reduction = if rng.gen_bool(0.5) { Reduction::Sum } else { Reduction::Mean };
            let g = focal_loss(logits.view(), targets.view(), alpha, gamma, reduction)?;
            Problem {
                names: vec!["logits".into()],
                inputs: vec![logits],
                analytic: vec![g.grad("logits").clone()],
                f: Box::new(move |x| Ok(focal_loss(x[0].view(), targets.view(), alpha, gamma, reduction)?.value)),
            }
        }
        GradTarget::SmoothL1 => {
            let n = rng.gen_range(2..12);
            let beta = rng.gen_range(0.2..2.0);
            let pred = Array1::from_shape_fn(n, |_| rng.gen_range(-3.0..3.0)).into_dyn();
            // Keep |pred - target| clear of 0 and beta, where the second
            // derivative jumps.
            let target = pred.mapv(|p| {
                let d = if rng.gen_bool(0.5) {
                    rng.gen_range(0.05..0.8) * beta
                } else {
                    beta * rng.gen_range(1.2..3.0)
                };
                p - if rng.gen_bool(0.5) { d } else { -d }
            });
            let reduction = if rng.gen_bool(0.5) { Reduction::Sum } else { Reduction::Mean };
            let g = smooth_l1(pred.view(), target.view(), beta, reduction)?;
            Problem {
                names: vec!["pred".into(), "target".into()],
                analytic: vec![g.grad("pred").clone(), g.grad("target").clone()],
                inputs: vec![pred, target],
                f: Box::new(move |x| Ok(smooth_l1(x[0].view(), x[1].view(), beta, reduction)?.value)),
            }
        }
        GradTarget::Embed => {
            let shape = (rng.gen_range(2..6), rng.gen_range(1..4), rng.gen_range(1..4));
            let x = uniform3(rng, shape, 0.0, 2.0);
            let w = Array1::from_shape_fn(shape.0, |_| rng.gen_range(-1.0..1.0));
            let g = embed_backward(&x, w.view());
            Problem {
                names: vec!["features".into()],
                inputs: vec![x.into_dyn()],
                analytic: vec![g.into_dyn()],
                f: Box::new(move |x| Ok(embed_chw(&d3(&x[0])).dot(&w))),
            }
        }
        GradTarget::Encode => {
            let (c_in, c_out) = (rng.gen_range(1..5), rng.gen_range(1..5));
            let hw = (rng.gen_range(1..4), rng.gen_range(1..4));
            let x = uniform3(rng, (c_in, hw.0, hw.1), -2.0, 2.0);
            let p = EncoderParams::new(
                Array2::from_shape_fn((c_out, c_in), |_| rng.gen_range(-1.0..1.0)),
                Array1::from_shape_fn(c_out, |_| rng.gen_range(-1.0..1.0)),
            )?;
            let w = uniform3(rng, (c_out, hw.0, hw.1), -1.0, 1.0);
            let g = encode_backward(&x, &p, &w)?;
            Problem {
                names: vec!["input".into(), "weight".into(), "bias".into()],
                inputs: vec![x.into_dyn(), p.weight.into_dyn(), p.bias.into_dyn()],
                analytic: vec![g.input.into_dyn(), g.weight.into_dyn(), g.bias.into_dyn()],
                f: Box::new(move |x| {
                    let p = EncoderParams::new(d2(&x[1]), d1(&x[2]))?;
                    Ok((encode(&d3(&x[0]), &p)? * &w).sum())
                }),
            }
        }
        GradTarget::Fuse => {
            let n = rng.gen_range(1..5);
            let shape = (rng.gen_range(1..4), rng.gen_range(1..4), rng.gen_range(1..4));
            let feats: Vec<Array3<f64>> = (0..n).map(|_| uniform3(rng, shape, 0.0, 2.0)).collect();
            let q = rng.gen_range(0.2..2.0);
            let w = uniform3(rng, shape, -1.0, 1.0);
            let g = fuse_backward(&feats, &FusionParams { query_scale: q }, &w)?;
            let mut names: Vec<String> = (0..n).map(|i| format!("features[{i}]")).collect();
            names.push("query_scale".into());
            let mut inputs: Vec<ArrayD<f64>> = feats.into_iter().map(|f| f.into_dyn()).collect();
            inputs.push(Array1::from_elem(1, q).into_dyn());
            let mut analytic: Vec<ArrayD<f64>> = g.features.into_iter().map(|f| f.into_dyn()).collect();
            analytic.push(Array1::from_elem(1, g.query_scale).into_dyn());
            Problem {
                names,
                inputs,
                analytic,
                f: Box::new(move |x| {
                    let feats: Vec<Array3<f64>> = x[..n].iter().map(d3).collect();
                    let p = FusionParams { query_scale: x[n][[0]] };
                    Ok((fuse(&feats, &p)? * &w).sum())
                }),
            }
        }
        GradTarget::Pipeline => {
            let scene = synthetic_scene("gradcheck", 2, 200, rng.gen());
            let cfg = toy_config(rng.gen());
            let flows = prepare_flows(std::slice::from_ref(&scene), &cfg)?;
            let enc = EncoderParams::seeded(4, cfg.grid.channels, rng.gen());
            let fus = FusionParams {
                query_scale: rng.gen_range(0.5..1.5),
            };
            let coeff = cfg.coeff;
            let r = forward_from_flows(&flows, &enc, &fus, &coeff)?;
            Problem {
                names: vec!["encoder.weight".into(), "encoder.bias".into(), "fusion.query_scale".into()],
                inputs: vec![
                    enc.weight.into_dyn(),
                    enc.bias.into_dyn(),
                    Array1::from_elem(1, fus.query_scale).into_dyn(),
                ],
                analytic: vec![
                    r.grads.weight.into_dyn(),
                    r.grads.bias.into_dyn(),
                    Array1::from_elem(1, r.grads.query_scale).into_dyn(),
                ],
                f: Box::new(move |x| {
                    let enc = EncoderParams::new(d2(&x[0]), d1(&x[1]))?;
                    let fus = FusionParams { query_scale: x[2][[0]] };
                    Ok(forward_from_flows(&flows, &enc, &fus, &coeff)?.total)
                }),
            }
        }
    })
}

/// Checks `trials` random instances of `target` coordinate by coordinate
/// with central differences of step `eps`.
pub fn grad_check(target: GradTarget, trials: usize, eps: f64, seed: u64) -> Result<GradCheckReport> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::InvalidStep(eps));
    }
    let tolerance = target.tolerance();
    let results = (0..trials)
        .map(|trial| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &["gradcheck", target.name(), &trial.to_string()]));
            problem(target, &mut rng)?.check(trial, eps, tolerance)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GradCheckReport {
        target,
        eps,
        tolerance,
        trials: results,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for t in GradTarget::ALL {
            assert_eq!(t.name().parse::<GradTarget>().unwrap(), t);
        }
        assert!(matches!("nope".parse::<GradTarget>(), Err(Error::UnknownTarget(_))));
    }

    #[test]
    fn every_target_passes() {
        for t in GradTarget::ALL {
            let trials = if t == GradTarget::Pipeline { 2 } else { 20 };
            let r = grad_check(t, trials, 1e-5, 42).unwrap();
            assert_eq!(r.trials.len(), trials);
            assert!(r.passed(), "{t}: worst {:e} {:?}", r.max_rel_err(), r.trials);
        }
    }

    #[test]
    fn bad_step_rejected() {
        assert!(matches!(grad_check(GradTarget::Focal, 3, 0.0, 1), Err(Error::InvalidStep(_))));
        assert!(matches!(grad_check(GradTarget::Focal, 3, -1e-5, 1), Err(Error::InvalidStep(_))));
    }

    #[test]
    fn zero_trials_is_empty_pass() {
        let r = grad_check(GradTarget::LPat, 0, 1e-5, 1).unwrap();
        assert!(r.trials.is_empty());
        assert!(r.passed());
    }

    #[test]
    fn broken_gradient_is_caught() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = problem(GradTarget::Focal, &mut rng).unwrap();
        p.analytic[0].mapv_inplace(|g| g * 1.01 + 1e-3);
        let r = p.check(0, 1e-5, 1e-5).unwrap();
        assert!(!r.passed);
        assert_eq!(r.worst.unwrap().input, "logits");
    }
}
