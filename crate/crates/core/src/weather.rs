//! Fog, rain and snow corruption of LiDAR clouds.
//!
//! All three conditions share one beam model: a return at range `r` with
//! reflectance `i` comes back with intensity `i * exp(-2 * alpha * r)`
//! (two-way Beer-Lambert). Returns that fall below the receiver's detection
//! floor are lost. The conditions differ in how `alpha` is obtained and in
//! their side effects:
//!
//! * fog: `alpha = 3.912 / visibility` (Koschmieder); lost returns may be
//!   replaced by a backscatter hit on the same ray, closer to the sensor;
//! * rain: `alpha = a * rate^b`; survivors get Gaussian range jitter along
//!   the ray that grows with the rain rate;
//! * snow: `alpha = a * rate^b`; Poisson-distributed clutter returns appear
//!   in a small sphere around the sensor.
//!
//! A point whose clean intensity is already below the floor survives only
//! when it is not attenuated at all, so zero extinction is an exact identity.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::derive_seed;
use crate::pointcloud::{Point, PointCloud, SceneFrame};

/// Koschmieder constant: `alpha * V` for a 2% contrast threshold.
pub const KOSCHMIEDER: f64 = 3.912;

/// Closest range at which a backscatter return is placed.
pub const MIN_SCATTER_RANGE: f64 = 0.5;

pub const DEFAULT_DETECTION_THRESHOLD: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FogParams {
    /// Meteorological visibility in meters; `+inf` means clear air.
    pub visibility: f64,
    pub detection_threshold: f64,
    pub scatter_prob: f64,
    pub scatter_range_max: f64,
}

impl Default for FogParams {
    fn default() -> Self {
        Self {
            visibility: 100.0,
            detection_threshold: DEFAULT_DETECTION_THRESHOLD,
            scatter_prob: 0.3,
            scatter_range_max: 25.0,
        }
    }
}

impl FogParams {
    /// Fog whose extinction coefficient is exactly `alpha` (inverse Koschmieder).
    pub fn with_extinction(alpha: f64) -> Self {
        let visibility = if alpha == 0.0 { f64::INFINITY } else { KOSCHMIEDER / alpha };
        Self {
            visibility,
            ..Self::default()
        }
    }

    pub fn extinction(&self) -> f64 {
        KOSCHMIEDER / self.visibility
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.visibility > 0.0) {
            return Err(Error::InvalidParams(format!(
                "fog visibility must be > 0, got {}",
                self.visibility
            )));
        }
        check_threshold(self.detection_threshold)?;
        check_prob("scatter_prob", self.scatter_prob)?;
        if !(self.scatter_range_max > 0.0 && self.scatter_range_max.is_finite()) {
            return Err(Error::InvalidParams(format!(
                "scatter_range_max must be finite and > 0, got {}",
                self.scatter_range_max
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RainParams {
    /// mm/h
    pub rain_rate: f64,
    pub extinction_coeff_a: f64,
    pub extinction_exp_b: f64,
    /// Range jitter standard deviation in meters per mm/h of rain.
    pub range_jitter_sigma_per_rate: f64,
    pub detection_threshold: f64,
}

impl Default for RainParams {
    fn default() -> Self {
        Self {
            rain_rate: 10.0,
            extinction_coeff_a: 0.01,
            extinction_exp_b: 0.6,
            range_jitter_sigma_per_rate: 0.002,
            detection_threshold: DEFAULT_DETECTION_THRESHOLD,
        }
    }
}

impl RainParams {
    pub fn extinction(&self) -> f64 {
        power_law(self.extinction_coeff_a, self.rain_rate, self.extinction_exp_b)
    }

    pub fn jitter_sigma(&self) -> f64 {
        self.range_jitter_sigma_per_rate * self.rain_rate
    }

    pub fn validate(&self) -> Result<()> {
        check_nonneg("rain_rate", self.rain_rate)?;
        check_nonneg("extinction_coeff_a", self.extinction_coeff_a)?;
        check_finite("extinction_exp_b", self.extinction_exp_b)?;
        check_nonneg("range_jitter_sigma_per_rate", self.range_jitter_sigma_per_rate)?;
        check_threshold(self.detection_threshold)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SnowParams {
    /// mm/h water equivalent
    pub snowfall_rate: f64,
    pub extinction_coeff_a: f64,
    pub extinction_exp_b: f64,
    /// Expected clutter points per 1000 input points.
    pub clutter_rate: f64,
    /// Clutter points are drawn uniformly inside this sphere (meters).
    pub clutter_radius: f64,
    pub detection_threshold: f64,
}

impl Default for SnowParams {
    fn default() -> Self {
        Self {
            snowfall_rate: 5.0,
            extinction_coeff_a: 0.02,
            extinction_exp_b: 0.7,
            clutter_rate: 5.0,
            clutter_radius: 3.0,
            detection_threshold: DEFAULT_DETECTION_THRESHOLD,
        }
    }
}

impl SnowParams {
    pub fn extinction(&self) -> f64 {
        power_law(self.extinction_coeff_a, self.snowfall_rate, self.extinction_exp_b)
    }

    pub fn validate(&self) -> Result<()> {
        check_nonneg("snowfall_rate", self.snowfall_rate)?;
        check_nonneg("extinction_coeff_a", self.extinction_coeff_a)?;
        check_finite("extinction_exp_b", self.extinction_exp_b)?;
        check_nonneg("clutter_rate", self.clutter_rate)?;
        if !(self.clutter_radius > 0.0 && self.clutter_radius.is_finite()) {
            return Err(Error::InvalidParams(format!(
                "clutter_radius must be finite and > 0, got {}",
                self.clutter_radius
            )));
        }
        check_threshold(self.detection_threshold)
    }
}

/// `{"condition": "fog" | "rain" | "snow" | "clean", "params": {...}}`
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "condition", content = "params", rename_all = "lowercase")]
pub enum WeatherConfig {
    Clean,
    Fog(#[serde(default)] FogParams),
    Rain(#[serde(default)] RainParams),
    Snow(#[serde(default)] SnowParams),
}

impl WeatherConfig {
    pub fn name(&self) -> &'static str {
        match self {
            WeatherConfig::Clean => "clean",
            WeatherConfig::Fog(_) => "fog",
            WeatherConfig::Rain(_) => "rain",
            WeatherConfig::Snow(_) => "snow",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            WeatherConfig::Clean => Ok(()),
            WeatherConfig::Fog(p) => p.validate(),
            WeatherConfig::Rain(p) => p.validate(),
            WeatherConfig::Snow(p) => p.validate(),
        }
    }

    pub fn apply(&self, pc: &PointCloud, seed: u64) -> Result<PointCloud> {
        match self {
            WeatherConfig::Clean => Ok(pc.clone()),
            WeatherConfig::Fog(p) => simulate_fog(pc, p, seed),
            WeatherConfig::Rain(p) => simulate_rain(pc, p, seed),
            WeatherConfig::Snow(p) => simulate_snow(pc, p, seed),
        }
    }
}

fn power_law(a: f64, rate: f64, b: f64) -> f64 {
    if rate == 0.0 {
        0.0
    } else {
        a * rate.powf(b)
    }
}

fn check_threshold(t: f64) -> Result<()> {
    if t > 0.0 && t < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidParams(format!("detection_threshold must lie in (0, 1), got {t}")))
    }
}

fn check_prob(name: &str, p: f64) -> Result<()> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::InvalidParams(format!("{name} must lie in [0, 1], got {p}")))
    }
}

fn check_nonneg(name: &str, v: f64) -> Result<()> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParams(format!("{name} must be finite and >= 0, got {v}")))
    }
}

fn check_finite(name: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParams(format!("{name} must be finite, got {v}")))
    }
}

/// Two-way attenuated intensity `i * exp(-2 alpha r)`.
pub fn attenuate(intensity: f64, range: f64, alpha: f64) -> f64 {
    intensity * (-2.0 * alpha * range).exp()
}

/// Outcome of pushing one return through the attenuating medium.
enum Beam {
    Kept(f64),
    Lost,
}

fn propagate(p: &Point, alpha: f64, floor: f64) -> Beam {
    let attenuated = attenuate(p.intensity, p.range(), alpha);
    if attenuated >= floor.min(p.intensity) {
        Beam::Kept(attenuated)
    } else {
        Beam::Lost
    }
}

fn scale_to_range(p: &Point, range: f64, intensity: f64) -> Point {
    let r = p.range();
    let k = range / r;
    Point::new(p.x * k, p.y * k, p.z * k, intensity)
}

pub fn simulate_fog(pc: &PointCloud, params: &FogParams, seed: u64) -> Result<PointCloud> {
    params.validate()?;
    let alpha = params.extinction();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(pc.len());
    for p in pc {
        match propagate(p, alpha, params.detection_threshold) {
            Beam::Kept(i) => out.push(Point { intensity: i, ..*p }),
            Beam::Lost => {
                if params.scatter_prob > 0.0 && rng.gen::<f64>() < params.scatter_prob {
                    let hi = p.range().min(params.scatter_range_max);
                    if hi > MIN_SCATTER_RANGE {
                        let rs = rng.gen_range(MIN_SCATTER_RANGE..hi);
                        out.push(scale_to_range(p, rs, params.detection_threshold));
                    }
                }
            }
        }
    }
    Ok(PointCloud::new(out))
}

pub fn simulate_rain(pc: &PointCloud, params: &RainParams, seed: u64) -> Result<PointCloud> {
    params.validate()?;
    let alpha = params.extinction();
    let sigma = params.jitter_sigma();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(pc.len());
    for p in pc {
        if let Beam::Kept(i) = propagate(p, alpha, params.detection_threshold) {
            let r = p.range();
            let moved = if sigma > 0.0 && r > 0.0 {
                let n: f64 = rng.sample(StandardNormal);
                scale_to_range(p, (r + sigma * n).max(0.0), i)
            } else {
                Point { intensity: i, ..*p }
            };
            out.push(moved);
        }
    }
    Ok(PointCloud::new(out))
}

pub fn simulate_snow(pc: &PointCloud, params: &SnowParams, seed: u64) -> Result<PointCloud> {
    simulate_snow_counted(pc, params, seed).map(|(cloud, _)| cloud)
}

/// Like [`simulate_snow`], also returning how many clutter points were added
/// (they are appended after the surviving input points).
pub fn simulate_snow_counted(pc: &PointCloud, params: &SnowParams, seed: u64) -> Result<(PointCloud, usize)> {
    params.validate()?;
    let alpha = params.extinction();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<Point> = pc
        .iter()
        .filter_map(|p| match propagate(p, alpha, params.detection_threshold) {
            Beam::Kept(i) => Some(Point { intensity: i, ..*p }),
            Beam::Lost => None,
        })
        .collect();

    let lambda = params.clutter_rate * pc.len() as f64 / 1000.0;
    let clutter = if lambda > 0.0 {
        let poisson = Poisson::new(lambda).map_err(|e| Error::InvalidParams(e.to_string()))?;
        poisson.sample(&mut rng) as usize
    } else {
        0
    };
    let dir = Normal::new(0.0, 1.0).expect("unit normal");
    for _ in 0..clutter {
        let (mut v, mut norm): ([f64; 3], f64);
        loop {
            v = [dir.sample(&mut rng), dir.sample(&mut rng), dir.sample(&mut rng)];
            norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            if norm > 0.0 {
                break;
            }
        }
        let radius = params.clutter_radius * rng.gen::<f64>().cbrt();
        let k = radius / norm;
        out.push(Point::new(v[0] * k, v[1] * k, v[2] * k, params.detection_threshold));
    }
    Ok((PointCloud::new(out), clutter))
}

/// Seed used for one agent's cloud; independent of agent order.
pub fn agent_seed(seed: u64, frame_id: &str, agent_id: &str) -> u64 {
    derive_seed(seed, &["weather", frame_id, agent_id])
}

/// Corrupts every agent's cloud independently. Poses, ids and boxes are
/// untouched.
pub fn corrupt_scene(scene: &SceneFrame, cfg: &WeatherConfig, seed: u64) -> Result<SceneFrame> {
    cfg.validate()?;
    let mut out = scene.clone();
    for agent in &mut out.agents {
        let s = agent_seed(seed, &scene.frame_id, &agent.agent_id);
        agent.cloud = cfg.apply(&agent.cloud, s).map_err(|e| Error::AgentCloud {
            agent_id: agent.agent_id.clone(),
            source: Box::new(e),
        })?;
    }
    Ok(out)
}
