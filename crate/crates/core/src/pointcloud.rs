//! Point clouds, rigid poses, ground-truth boxes and scene manifests.
//!
//! Clouds are stored in `f64` in memory. On disk the binary form is the usual
//! autonomous-driving layout: consecutive little-endian `f32` quadruples
//! `(x, y, z, intensity)` with no header. The ASCII form holds one point per
//! line, whitespace separated, `#` starting a comment.

use std::collections::HashSet;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub intensity: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64, z: f64, intensity: f64) -> Self {
        Self { x, y, z, intensity }
    }

    pub fn xyz(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    /// Euclidean distance to the sensor origin.
    pub fn range(&self) -> f64 {
        (self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite() && self.intensity.is_finite()
    }

    pub fn is_valid(&self) -> bool {
        self.is_finite() && (0.0..=1.0).contains(&self.intensity)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    pub points: Vec<Point>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Point> {
        self.points.iter()
    }

    pub fn is_valid(&self) -> bool {
        self.points.iter().all(Point::is_valid)
    }

    /// Mean intensity, `None` for an empty cloud.
    pub fn mean_intensity(&self) -> Option<f64> {
        if self.is_empty() {
            return None;
        }
        Some(crate::numeric::ksum(self.points.iter().map(|p| p.intensity)) / self.len() as f64)
    }
}

impl FromIterator<Point> for PointCloud {
    fn from_iter<I: IntoIterator<Item = Point>>(iter: I) -> Self {
        Self::new(iter.into_iter().collect())
    }
}

impl<'a> IntoIterator for &'a PointCloud {
    type Item = &'a Point;
    type IntoIter = std::slice::Iter<'a, Point>;

    fn into_iter(self) -> Self::IntoIter {
        self.points.iter()
    }
}

/// Wraps an angle into `(-pi, pi]`.
pub fn normalize_angle(a: f64) -> f64 {
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    // rem_euclid maps -pi to +pi already; guard the closed upper end.
    if r <= -PI {
        r += 2.0 * PI;
    }
    r
}

pub type Mat3 = [[f64; 3]; 3];

/// Agent-to-world rigid pose. The rotation is intrinsic yaw (about z), then
/// pitch (about the new y), then roll (about the newest x), i.e.
/// `R = Rz(yaw) * Ry(pitch) * Rx(roll)`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub yaw: f64,
    pub pitch: f64,
    pub roll: f64,
}

impl Pose {
    pub fn new(translation: [f64; 3], yaw: f64, pitch: f64, roll: f64) -> Self {
        Self {
            x: translation[0],
            y: translation[1],
            z: translation[2],
            yaw: normalize_angle(yaw),
            pitch: normalize_angle(pitch),
            roll: normalize_angle(roll),
        }
    }

    pub fn identity() -> Self {
        Self::default()
    }

    pub fn translation(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn rotation(&self) -> Mat3 {
        let (sy, cy) = self.yaw.sin_cos();
        let (sp, cp) = self.pitch.sin_cos();
        let (sr, cr) = self.roll.sin_cos();
        [
            [cy * cp, cy * sp * sr - sy * cr, cy * sp * cr + sy * sr],
            [sy * cp, sy * sp * sr + cy * cr, sy * sp * cr - cy * sr],
            [-sp, cp * sr, cp * cr],
        ]
    }

    /// Applies `R * p + t`.
    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let r = self.rotation();
        let t = self.translation();
        let mut out = [0.0; 3];
        for (i, row) in r.iter().enumerate() {
            out[i] = row[0] * p[0] + row[1] * p[1] + row[2] * p[2] + t[i];
        }
        out
    }

    /// Builds a pose from a rotation matrix and translation. Exact up to
    /// rounding except at pitch = +-pi/2, where yaw and roll are not separable.
    pub fn from_matrix(r: &Mat3, t: [f64; 3]) -> Self {
        let pitch = (-r[2][0]).clamp(-1.0, 1.0).asin();
        let yaw = r[1][0].atan2(r[0][0]);
        let roll = r[2][1].atan2(r[2][2]);
        Self::new(t, yaw, pitch, roll)
    }

    pub fn inverse(&self) -> Self {
        let r = self.rotation();
        let rt = transpose(&r);
        let t = self.translation();
        let mut ti = [0.0; 3];
        for (i, row) in rt.iter().enumerate() {
            ti[i] = -(row[0] * t[0] + row[1] * t[1] + row[2] * t[2]);
        }
        Self::from_matrix(&rt, ti)
    }

    /// `self * other`: first apply `other`, then `self`.
    pub fn compose(&self, other: &Pose) -> Self {
        let r = matmul(&self.rotation(), &other.rotation());
        let t = self.apply(other.translation());
        Self::from_matrix(&r, t)
    }
}

fn transpose(m: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = m[j][i];
        }
    }
    out
}

fn matmul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

/// Rigidly moves every point; intensity and order are preserved.
pub fn transform_points(pc: &PointCloud, pose: &Pose) -> PointCloud {
    let r = pose.rotation();
    let t = pose.translation();
    pc.iter()
        .map(|p| {
            let v = p.xyz();
            let mut out = [0.0; 3];
            for (i, row) in r.iter().enumerate() {
                out[i] = row[0] * v[0] + row[1] * v[1] + row[2] * v[2] + t[i];
            }
            Point::new(out[0], out[1], out[2], p.intensity)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub center: [f64; 3],
    /// (length, width, height); length runs along the heading.
    pub dims: [f64; 3],
    pub yaw: f64,
}

impl Box3D {
    pub fn new(center: [f64; 3], dims: [f64; 3], yaw: f64) -> Self {
        Self { center, dims, yaw }
    }

    pub fn is_valid(&self) -> bool {
        self.center.iter().all(|v| v.is_finite())
            && self.yaw.is_finite()
            && self.dims.iter().all(|d| d.is_finite() && *d > 0.0)
    }

    pub fn volume(&self) -> f64 {
        self.dims[0] * self.dims[1] * self.dims[2]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentFrame {
    pub agent_id: String,
    pub is_ego: bool,
    /// Agent-to-world pose.
    pub pose: Pose,
    /// Points in the agent's sensor frame.
    pub cloud: PointCloud,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneFrame {
    pub frame_id: String,
    pub agents: Vec<AgentFrame>,
    /// Boxes in the ego frame.
    pub gt_boxes: Vec<Box3D>,
}

impl SceneFrame {
    /// Builds a scene, enforcing a single ego and unique non-empty agent ids.
    pub fn new(frame_id: impl Into<String>, agents: Vec<AgentFrame>, gt_boxes: Vec<Box3D>) -> Result<Self> {
        let scene = Self {
            frame_id: frame_id.into(),
            agents,
            gt_boxes,
        };
        scene.validate()?;
        Ok(scene)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for agent in &self.agents {
            if agent.agent_id.is_empty() {
                return Err(Error::SchemaViolation(format!(
                    "scene {}: empty agent_id",
                    self.frame_id
                )));
            }
            if !seen.insert(agent.agent_id.as_str()) {
                return Err(Error::DuplicateAgentId {
                    frame_id: self.frame_id.clone(),
                    agent_id: agent.agent_id.clone(),
                });
            }
        }
        match self.agents.iter().filter(|a| a.is_ego).count() {
            0 => Err(Error::MissingEgo(self.frame_id.clone())),
            1 => Ok(()),
            _ => Err(Error::MultipleEgo {
                frame_id: self.frame_id.clone(),
            }),
        }
    }

    pub fn ego(&self) -> &AgentFrame {
        self.agents
            .iter()
            .find(|a| a.is_ego)
            .expect("validated scene has an ego agent")
    }

    /// Pose taking points from `agent`'s sensor frame into the ego frame.
    pub fn agent_to_ego(&self, agent: &AgentFrame) -> Pose {
        self.ego().pose.inverse().compose(&agent.pose)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CloudFormat {
    BinF32,
    Ascii,
}

impl CloudFormat {
    /// `.bin` is binary; anything else (`.txt`, `.xyz`, ...) is ASCII.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("bin") => CloudFormat::BinF32,
            _ => CloudFormat::Ascii,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LoadReport {
    /// Points whose intensity fell outside [0, 1] and was clamped.
    pub clamped_intensity: usize,
}

/// Loads a cloud, clamping out-of-range intensities (logged as a warning).
pub fn load_point_cloud(path: &Path, format: CloudFormat) -> Result<PointCloud> {
    let (cloud, report) = load_point_cloud_with_report(path, format)?;
    if report.clamped_intensity > 0 {
        log::warn!(
            "{}: clamped {} intensity value(s) into [0, 1]",
            path.display(),
            report.clamped_intensity
        );
    }
    Ok(cloud)
}

pub fn load_point_cloud_with_report(path: &Path, format: CloudFormat) -> Result<(PointCloud, LoadReport)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let raw = match format {
        CloudFormat::BinF32 => decode_bin(path, &bytes)?,
        CloudFormat::Ascii => decode_ascii(path, &bytes)?,
    };
    let mut report = LoadReport::default();
    let points = raw
        .into_iter()
        .map(|mut p| {
            if !(0.0..=1.0).contains(&p.intensity) {
                report.clamped_intensity += 1;
                p.intensity = p.intensity.clamp(0.0, 1.0);
            }
            p
        })
        .collect();
    Ok((PointCloud::new(points), report))
}

fn decode_bin(path: &Path, bytes: &[u8]) -> Result<Vec<Point>> {
    if bytes.len() % 16 != 0 {
        return Err(Error::MalformedRecord {
            path: path.to_path_buf(),
            record: bytes.len() / 16,
            reason: format!("{} trailing byte(s)", bytes.len() % 16),
        });
    }
    bytes
        .chunks_exact(16)
        .enumerate()
        .map(|(i, rec)| {
            let f = |k: usize| f32::from_le_bytes(rec[4 * k..4 * k + 4].try_into().unwrap()) as f64;
            let p = Point::new(f(0), f(1), f(2), f(3));
            if p.is_finite() {
                Ok(p)
            } else {
                Err(Error::NonFiniteValue {
                    path: path.to_path_buf(),
                    record: i,
                })
            }
        })
        .collect()
}

fn decode_ascii(path: &Path, bytes: &[u8]) -> Result<Vec<Point>> {
    let text = std::str::from_utf8(bytes).map_err(|e| Error::MalformedRecord {
        path: path.to_path_buf(),
        record: 0,
        reason: format!("not UTF-8: {e}"),
    })?;
    let mut points = Vec::new();
    for line in text.lines() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let record = points.len();
        let malformed = |reason: String| Error::MalformedRecord {
            path: path.to_path_buf(),
            record,
            reason,
        };
        let vals = line
            .split(|c: char| c.is_whitespace() || c == ',')
            .filter(|t| !t.is_empty())
            .map(|t| t.parse::<f64>().map_err(|_| malformed(format!("non-numeric token {t:?}"))))
            .collect::<Result<Vec<_>>>()?;
        if vals.len() != 4 {
            return Err(malformed(format!("expected 4 values, found {}", vals.len())));
        }
        let p = Point::new(vals[0], vals[1], vals[2], vals[3]);
        if !p.is_finite() {
            return Err(Error::NonFiniteValue {
                path: path.to_path_buf(),
                record,
            });
        }
        points.push(p);
    }
    Ok(points)
}

pub fn encode_bin(pc: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(pc.len() * 16);
    for p in pc {
        for v in [p.x, p.y, p.z, p.intensity] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn encode_ascii(pc: &PointCloud) -> String {
    let mut out = String::with_capacity(pc.len() * 48);
    for p in pc {
        // `{}` on f64 is the shortest representation that parses back exactly.
        out.push_str(&format!("{} {} {} {}\n", p.x, p.y, p.z, p.intensity));
    }
    out
}

/// Writes a cloud. The binary form stores `f32`, so values not representable
/// in `f32` are rounded; clouds that came from a `.bin` file round-trip
/// bit-exactly. The ASCII form is exact for any `f64`.
pub fn save_point_cloud(pc: &PointCloud, path: &Path, format: CloudFormat) -> Result<()> {
    let bytes = match format {
        CloudFormat::BinF32 => encode_bin(pc),
        CloudFormat::Ascii => encode_ascii(pc).into_bytes(),
    };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// On-disk scene manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneManifest {
    pub frame_id: String,
    pub agents: Vec<AgentEntry>,
    #[serde(default)]
    pub gt_boxes: Vec<Box3D>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentEntry {
    pub agent_id: String,
    pub is_ego: bool,
    pub pose: Pose,
    /// Cloud path relative to the manifest's directory.
    pub cloud: PathBuf,
}

impl SceneManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::SchemaViolation(format!("{}: {e}", path.display())))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Loads a manifest and every cloud it references.
pub fn load_scene(manifest_path: &Path) -> Result<SceneFrame> {
    let manifest = SceneManifest::read(manifest_path)?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    // Validate structure before touching cloud files.
    let skeleton = SceneFrame {
        frame_id: manifest.frame_id.clone(),
        agents: manifest
            .agents
            .iter()
            .map(|a| AgentFrame {
                agent_id: a.agent_id.clone(),
                is_ego: a.is_ego,
                pose: a.pose,
                cloud: PointCloud::default(),
            })
            .collect(),
        gt_boxes: manifest.gt_boxes.clone(),
    };
    skeleton.validate()?;
    if let Some(b) = manifest.gt_boxes.iter().find(|b| !b.is_valid()) {
        return Err(Error::SchemaViolation(format!("invalid gt box {b:?}")));
    }

    let mut agents = Vec::with_capacity(manifest.agents.len());
    for (entry, mut agent) in manifest.agents.iter().zip(skeleton.agents) {
        let path = base.join(&entry.cloud);
        agent.cloud = load_point_cloud(&path, CloudFormat::from_path(&path)).map_err(|e| Error::AgentCloud {
            agent_id: entry.agent_id.clone(),
            source: Box::new(e),
        })?;
        agent.pose = Pose::new(
            agent.pose.translation(),
            agent.pose.yaw,
            agent.pose.pitch,
            agent.pose.roll,
        );
        agents.push(agent);
    }
    Ok(SceneFrame {
        frame_id: manifest.frame_id,
        agents,
        gt_boxes: manifest.gt_boxes,
    })
}
