//! Rotated-box IoU (bird's-eye and 3D) and average precision.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pointcloud::Box3D;

/// Intersections smaller than this are treated as empty.
pub const AREA_EPS: f64 = 1e-12;

type Pt = [f64; 2];

/// Footprint corners, counter-clockwise.
pub fn bev_corners(b: &Box3D) -> [Pt; 4] {
    let (s, c) = b.yaw.sin_cos();
    let (hl, hw) = (b.dims[0] / 2.0, b.dims[1] / 2.0);
    [(hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)].map(|(u, v)| [b.center[0] + c * u - s * v, b.center[1] + s * u + c * v])
}

fn cross(o: Pt, a: Pt, b: Pt) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Clips `subject` against the convex counter-clockwise polygon `clip`.
fn clip_convex(subject: &[Pt], clip: &[Pt]) -> Vec<Pt> {
    let mut out = subject.to_vec();
    for i in 0..clip.len() {
        if out.is_empty() {
            break;
        }
        let (a, b) = (clip[i], clip[(i + 1) % clip.len()]);
        let input = std::mem::take(&mut out);
        for j in 0..input.len() {
            let p = input[j];
            let q = input[(j + 1) % input.len()];
            let (dp, dq) = (cross(a, b, p), cross(a, b, q));
            if dp >= 0.0 {
                out.push(p);
            }
            if (dp >= 0.0) != (dq >= 0.0) {
                let t = dp / (dp - dq);
                out.push([p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]);
            }
        }
    }
    out
}

/// Shoelace area (absolute).
pub fn polygon_area(poly: &[Pt]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let twice: f64 = (0..n)
        .map(|i| {
            let (p, q) = (poly[i], poly[(i + 1) % n]);
            p[0] * q[1] - q[0] * p[1]
        })
        .sum();
    twice.abs() / 2.0
}

fn check(b: &Box3D) -> Result<()> {
    if b.is_valid() {
        Ok(())
    } else {
        Err(Error::DegenerateBox(format!("{b:?}")))
    }
}

pub fn bev_intersection(a: &Box3D, b: &Box3D) -> Result<f64> {
    check(a)?;
    check(b)?;
    let area = polygon_area(&clip_convex(&bev_corners(a), &bev_corners(b)));
    Ok(if area < AREA_EPS { 0.0 } else { area })
}

pub fn bev_iou(a: &Box3D, b: &Box3D) -> Result<f64> {
    let inter = bev_intersection(a, b)?;
    let union = a.dims[0] * a.dims[1] + b.dims[0] * b.dims[1] - inter;
    Ok((inter / union).clamp(0.0, 1.0))
}

pub fn iou3d(a: &Box3D, b: &Box3D) -> Result<f64> {
    let area = bev_intersection(a, b)?;
    let lo = (a.center[2] - a.dims[2] / 2.0).max(b.center[2] - b.dims[2] / 2.0);
    let hi = (a.center[2] + a.dims[2] / 2.0).min(b.center[2] + b.dims[2] / 2.0);
    let inter = area * (hi - lo).max(0.0);
    if inter < AREA_EPS {
        return Ok(0.0);
    }
    Ok((inter / (a.volume() + b.volume() - inter)).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: Box3D,
    pub score: f64,
    pub frame_id: String,
}

/// Ground-truth record. Same layout as [`Detection`]; a score, if present,
/// is ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    #[serde(rename = "box")]
    pub bbox: Box3D,
    pub frame_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    /// Area under the monotone precision envelope.
    #[default]
    AllPoint,
    /// Mean envelope precision at recall 0, 0.1, ..., 1.
    ElevenPoint,
    /// Step sum of raw precision at each recall increment, no envelope.
    Raw,
}

impl Interpolation {
    pub fn name(self) -> &'static str {
        match self {
            Interpolation::AllPoint => "all_point",
            Interpolation::ElevenPoint => "eleven_point",
            Interpolation::Raw => "raw",
        }
    }
}

impl fmt::Display for Interpolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Interpolation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Interpolation::AllPoint, Interpolation::ElevenPoint, Interpolation::Raw]
            .into_iter()
            .find(|i| i.name() == s)
            .ok_or_else(|| Error::InvalidParams(format!("unknown interpolation {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ApOptions {
    pub iou_threshold: f64,
    /// Match on footprint IoU instead of 3D IoU.
    pub bev: bool,
    pub interpolation: Interpolation,
    /// Ignore boxes (ground truth and detections) whose centre lies farther
    /// than this in the x-y plane.
    pub max_range: Option<f64>,
}

impl Default for ApOptions {
    fn default() -> Self {
        Self {
            iou_threshold: 0.5,
            bev: false,
            interpolation: Interpolation::AllPoint,
            max_range: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ApResult {
    pub ap: f64,
    pub num_gt: usize,
    pub num_detections: usize,
    pub true_positives: usize,
    pub false_positives: usize,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
}

fn in_range(b: &Box3D, max_range: Option<f64>) -> bool {
    max_range.map_or(true, |r| b.center[0].hypot(b.center[1]) <= r)
}

/// Greedy score-ordered matching and AP. Detections are visited by
/// descending score (ties keep input order); each takes the unmatched
/// ground-truth box of its frame with the highest IoU, lower index on ties.
pub fn average_precision(
    detections: &[Detection],
    ground_truth: &BTreeMap<String, Vec<Box3D>>,
    opts: &ApOptions,
) -> Result<ApResult> {
    if !(opts.iou_threshold > 0.0 && opts.iou_threshold <= 1.0) {
        return Err(Error::InvalidParams(format!(
            "IoU threshold must be in (0, 1], got {}",
            opts.iou_threshold
        )));
    }
    let gts: BTreeMap<&str, Vec<&Box3D>> = ground_truth
        .iter()
        .map(|(k, v)| (k.as_str(), v.iter().filter(|b| in_range(b, opts.max_range)).collect()))
        .collect();
    for b in gts.values().flatten() {
        check(b)?;
    }
    let num_gt: usize = gts.values().map(Vec::len).sum();

    let mut dets: Vec<&Detection> = detections.iter().filter(|d| in_range(&d.bbox, opts.max_range)).collect();
    if let Some(d) = dets.iter().find(|d| !d.score.is_finite()) {
        return Err(Error::NonFiniteInput(format!("detection score in frame {}", d.frame_id)));
    }
    dets.sort_by(|a, b| b.score.total_cmp(&a.score));

    let iou = if opts.bev { bev_iou } else { iou3d };
    let mut matched: BTreeMap<&str, Vec<bool>> = gts.iter().map(|(k, v)| (*k, vec![false; v.len()])).collect();
    let mut hits = Vec::with_capacity(dets.len());
    for d in &dets {
        let mut best: Option<(usize, f64)> = None;
        if let (Some(boxes), Some(used)) = (gts.get(d.frame_id.as_str()), matched.get(d.frame_id.as_str())) {
            for (j, g) in boxes.iter().enumerate() {
                if used[j] {
                    continue;
                }
                let v = iou(&d.bbox, g)?;
                if best.map_or(true, |(_, b)| v > b) {
                    best = Some((j, v));
                }
            }
        }
        let hit = match best {
            Some((j, v)) if v >= opts.iou_threshold => {
                matched.get_mut(d.frame_id.as_str()).expect("frame present")[j] = true;
                true
            }
            _ => false,
        };
        hits.push(hit);
    }

    let (mut tp, mut fp) = (0usize, 0usize);
    let mut precision = Vec::with_capacity(hits.len());
    let mut recall = Vec::with_capacity(hits.len());
    for hit in &hits {
        if *hit {
            tp += 1;
        } else {
            fp += 1;
        }
        precision.push(tp as f64 / (tp + fp) as f64);
        recall.push(if num_gt == 0 { 0.0 } else { tp as f64 / num_gt as f64 });
    }
    let ap = if num_gt == 0 {
        0.0
    } else {
        interpolate(&precision, &recall, opts.interpolation)
    };
    Ok(ApResult {
        ap,
        num_gt,
        num_detections: dets.len(),
        true_positives: tp,
        false_positives: fp,
        precision,
        recall,
    })
}

fn interpolate(precision: &[f64], recall: &[f64], mode: Interpolation) -> f64 {
    let envelope = || {
        let mut env = precision.to_vec();
        for i in (0..env.len().saturating_sub(1)).rev() {
            env[i] = env[i].max(env[i + 1]);
        }
        env
    };
    let step_sum = |p: &[f64]| {
        let mut prev = 0.0;
        let mut area = 0.0;
        for (r, p) in recall.iter().zip(p) {
            area += (r - prev) * p;
            prev = *r;
        }
        area
    };
    match mode {
        Interpolation::Raw => step_sum(precision),
        Interpolation::AllPoint => step_sum(&envelope()),
        Interpolation::ElevenPoint => {
            let total: f64 = (0..=10)
                .map(|k| {
                    let t = k as f64 / 10.0;
                    recall
                        .iter()
                        .zip(precision)
                        .filter(|(r, _)| **r >= t - 1e-12)
                        .map(|(_, p)| *p)
                        .fold(0.0, f64::max)
                })
                .sum();
            total / 11.0
        }
    }
}
