//! Adaptive weather augmentation.
//!
//! A clean cloud `P^s` is first range-reduced to `P^r` by keeping points with
//! `|x/x_m| <= dx`, `|y/y_m| <= dy`, `|z/z_m| <= dz` for thresholds drawn
//! uniformly from `[phi_l, phi_u]`. `P^r` is then degraded by dropout,
//! Cartesian jitter and spurious-return injection, in that order, to give the
//! augmented cloud `P^a`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::derive_seed;
use crate::pointcloud::{Point, PointCloud};

/// Per-axis range-reduction thresholds `(dx, dy, dz)`.
pub type Thresholds = [f64; 3];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AwaParams {
    pub phi_l: f64,
    pub phi_u: f64,
    /// Maximal sensing extent `(x_m, y_m, z_m)` in meters.
    pub bounds: [f64; 3],
    pub dropout_prob: f64,
    /// Standard deviation of per-coordinate jitter, meters.
    pub jitter_sigma: f64,
    /// Injected points as a fraction of the degraded cloud's input size.
    pub noise_points_frac: f64,
}

impl Default for AwaParams {
    fn default() -> Self {
        Self {
            phi_l: 0.5,
            phi_u: 0.8,
            bounds: [140.0, 40.0, 4.0],
            dropout_prob: 0.1,
            jitter_sigma: 0.02,
            noise_points_frac: 0.02,
        }
    }
}

impl AwaParams {
    /// Parameters under which augmentation leaves every in-bounds cloud unchanged.
    pub fn identity(bounds: [f64; 3]) -> Self {
        Self {
            phi_l: 1.0,
            phi_u: 1.0,
            bounds,
            dropout_prob: 0.0,
            jitter_sigma: 0.0,
            noise_points_frac: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.phi_l > 0.0 && self.phi_l <= self.phi_u && self.phi_u <= 1.0) {
            return Err(Error::InvalidParams(format!(
                "need 0 < phi_l <= phi_u <= 1, got phi_l = {}, phi_u = {}",
                self.phi_l, self.phi_u
            )));
        }
        if !self.bounds.iter().all(|b| *b > 0.0 && b.is_finite()) {
            return Err(Error::InvalidParams(format!("bounds must be positive, got {:?}", self.bounds)));
        }
        if !(0.0..=1.0).contains(&self.dropout_prob) {
            return Err(Error::InvalidParams(format!("dropout_prob {} not in [0, 1]", self.dropout_prob)));
        }
        if !(self.jitter_sigma >= 0.0 && self.jitter_sigma.is_finite()) {
            return Err(Error::InvalidParams(format!("jitter_sigma {} must be >= 0", self.jitter_sigma)));
        }
        if !(0.0..=1.0).contains(&self.noise_points_frac) {
            return Err(Error::InvalidParams(format!(
                "noise_points_frac {} not in [0, 1]",
                self.noise_points_frac
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AwaOutput {
    /// Range-reduced cloud `P^r`.
    pub reduced: PointCloud,
    /// Final augmented cloud `P^a`.
    pub augmented: PointCloud,
    pub thresholds: Thresholds,
    /// Points of `reduced` that survived dropout.
    pub survivors: usize,
    /// Spurious points appended at the end of `augmented`.
    pub injected: usize,
}

pub fn sample_thresholds(params: &AwaParams, seed: u64) -> Result<Thresholds> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = || {
        if params.phi_l == params.phi_u {
            params.phi_l
        } else {
            rng.gen_range(params.phi_l..=params.phi_u)
        }
    };
    Ok([draw(), draw(), draw()])
}

/// Whether `p` lies inside the range-reduced box.
pub fn within(p: &Point, thresholds: &Thresholds, bounds: &[f64; 3]) -> bool {
    (p.x / bounds[0]).abs() <= thresholds[0]
        && (p.y / bounds[1]).abs() <= thresholds[1]
        && (p.z / bounds[2]).abs() <= thresholds[2]
}

pub fn range_reduce(pc: &PointCloud, thresholds: &Thresholds, bounds: &[f64; 3]) -> PointCloud {
    pc.iter().filter(|p| within(p, thresholds, bounds)).copied().collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Degraded {
    pub cloud: PointCloud,
    pub survivors: usize,
    pub injected: usize,
}

/// Dropout, then jitter, then noise injection. Injected points are uniform in
/// the box `|x| <= dx * x_m`, `|y| <= dy * y_m`, `|z| <= dz * z_m` with
/// uniform intensity, and their count is `floor(noise_points_frac * m)` for
/// an input of `m` points.
pub fn degrade(pc: &PointCloud, params: &AwaParams, thresholds: &Thresholds, seed: u64) -> Result<Degraded> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut points: Vec<Point> = if params.dropout_prob == 0.0 {
        pc.points.clone()
    } else {
        pc.iter()
            .filter(|_| rng.gen::<f64>() >= params.dropout_prob)
            .copied()
            .collect()
    };
    let survivors = points.len();

    if params.jitter_sigma > 0.0 {
        let noise = Normal::new(0.0, params.jitter_sigma).expect("sigma validated");
        for p in &mut points {
            p.x += rng.sample(noise);
            p.y += rng.sample(noise);
            p.z += rng.sample(noise);
        }
    }

    let injected = (params.noise_points_frac * pc.len() as f64).floor() as usize;
    let half: Vec<f64> = (0..3).map(|k| thresholds[k] * params.bounds[k]).collect();
    for _ in 0..injected {
        let mut c = [0.0; 3];
        for k in 0..3 {
            c[k] = if half[k] > 0.0 { rng.gen_range(-half[k]..=half[k]) } else { 0.0 };
        }
        points.push(Point::new(c[0], c[1], c[2], rng.gen_range(0.0..=1.0)));
    }

    Ok(Degraded {
        cloud: PointCloud::new(points),
        survivors,
        injected,
    })
}

/// Full augmentation with thresholds drawn from `seed`.
pub fn awa(pc: &PointCloud, params: &AwaParams, seed: u64) -> Result<AwaOutput> {
    let thresholds = sample_thresholds(params, derive_seed(seed, &["awa", "thresholds"]))?;
    awa_with_thresholds(pc, params, thresholds, seed)
}

/// Augmentation with externally chosen thresholds (e.g. shared across the
/// agents of a scene).
pub fn awa_with_thresholds(pc: &PointCloud, params: &AwaParams, thresholds: Thresholds, seed: u64) -> Result<AwaOutput> {
    params.validate()?;
    let reduced = range_reduce(pc, &thresholds, &params.bounds);
    let degraded = degrade(&reduced, params, &thresholds, derive_seed(seed, &["awa", "degrade"]))?;
    Ok(AwaOutput {
        reduced,
        augmented: degraded.cloud,
        thresholds,
        survivors: degraded.survivors,
        injected: degraded.injected,
    })
}

/// Largest `|coord / bound|` per axis over a cloud; zeros for an empty cloud.
pub fn extent_ratios(pc: &PointCloud, bounds: &[f64; 3]) -> [f64; 3] {
    let mut out = [0.0f64; 3];
    for p in pc {
        let v = p.xyz();
        for k in 0..3 {
            out[k] = out[k].max((v[k] / bounds[k]).abs());
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_cloud(n: usize, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                Point::new(
                    rng.gen_range(-150.0..150.0),
                    rng.gen_range(-50.0..50.0),
                    rng.gen_range(-5.0..5.0),
                    rng.gen_range(0.0..=1.0),
                )
            })
            .collect()
    }

    #[test]
    fn degenerate_interval() {
        let p = AwaParams {
            phi_l: 0.7,
            phi_u: 0.7,
            ..AwaParams::default()
        };
        assert_eq!(sample_thresholds(&p, 3).unwrap(), [0.7, 0.7, 0.7]);
    }

    #[test]
    fn thresholds_stay_in_interval() {
        let p = AwaParams::default();
        for seed in 0..1000 {
            for d in sample_thresholds(&p, seed).unwrap() {
                assert!((0.5..=0.8).contains(&d));
            }
        }
    }

    #[test]
    fn threshold_mean_matches_uniform() {
        let p = AwaParams::default();
        let n = 100_000u64;
        let mut sum = 0.0;
        for seed in 0..n {
            sum += sample_thresholds(&p, seed).unwrap()[0];
        }
        let mean = sum / n as f64;
        assert!((mean - 0.65).abs() < 0.003, "mean {mean}");
    }

    #[test]
    fn range_reduce_examples() {
        let bounds = [100.0, 100.0, 10.0];
        let origin = PointCloud::new(vec![Point::new(0.0, 0.0, 0.0, 0.4)]);
        assert_eq!(range_reduce(&origin, &[0.01, 0.01, 0.01], &bounds), origin);

        let far = PointCloud::new(vec![Point::new(60.0, 0.0, 0.0, 0.4)]);
        assert!(range_reduce(&far, &[0.5, 0.5, 0.5], &bounds).is_empty());

        let inside = PointCloud::new(vec![
            Point::new(99.0, -100.0, 10.0, 0.1),
            Point::new(-3.0, 4.0, -9.5, 0.9),
        ]);
        assert_eq!(range_reduce(&inside, &[1.0, 1.0, 1.0], &bounds), inside);
    }

    #[test]
    fn degrade_no_op_and_total_dropout() {
        let pc = random_cloud(500, 1);
        let t = [0.6, 0.6, 0.6];
        let noop = AwaParams {
            dropout_prob: 0.0,
            jitter_sigma: 0.0,
            noise_points_frac: 0.0,
            ..AwaParams::default()
        };
        assert_eq!(degrade(&pc, &noop, &t, 7).unwrap().cloud, pc);

        let all_gone = AwaParams {
            dropout_prob: 1.0,
            noise_points_frac: 0.1,
            ..AwaParams::default()
        };
        let d = degrade(&pc, &all_gone, &t, 7).unwrap();
        assert_eq!(d.survivors, 0);
        assert_eq!(d.injected, 50);
        assert_eq!(d.cloud.len(), 50);
        for p in &d.cloud {
            assert!(within(p, &t, &all_gone.bounds));
        }
    }

    #[test]
    fn dropout_binomial_mean() {
        let pc = random_cloud(10_000, 2);
        let p = AwaParams {
            dropout_prob: 0.3,
            jitter_sigma: 0.0,
            noise_points_frac: 0.0,
            ..AwaParams::default()
        };
        let t = [1.0; 3];
        let seeds = 200;
        let kept: usize = (0..seeds).map(|s| degrade(&pc, &p, &t, s).unwrap().survivors).sum();
        let mean = kept as f64 / seeds as f64;
        assert!((mean - 7000.0).abs() <= 140.0, "mean kept {mean}");
    }

    #[test]
    fn empty_cloud() {
        let p = AwaParams {
            noise_points_frac: 0.0,
            ..AwaParams::default()
        };
        let out = awa(&PointCloud::default(), &p, 1).unwrap();
        assert!(out.reduced.is_empty());
        assert!(out.augmented.is_empty());
    }

    #[test]
    fn invalid_params_rejected() {
        for p in [
            AwaParams { phi_l: 0.0, ..AwaParams::default() },
            AwaParams { phi_l: 0.9, phi_u: 0.8, ..AwaParams::default() },
            AwaParams { phi_u: 1.2, ..AwaParams::default() },
            AwaParams { bounds: [1.0, 0.0, 1.0], ..AwaParams::default() },
            AwaParams { dropout_prob: 1.5, ..AwaParams::default() },
        ] {
            assert!(matches!(sample_thresholds(&p, 0), Err(Error::InvalidParams(_))));
            assert!(awa(&PointCloud::default(), &p, 0).is_err());
        }
    }

    fn is_sub_multiset(sub: &PointCloud, sup: &PointCloud) -> bool {
        let mut pool: Vec<Point> = sup.points.clone();
        sub.iter().all(|p| match pool.iter().position(|q| q == p) {
            Some(i) => {
                pool.swap_remove(i);
                true
            }
            None => false,
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn awa_accounting_and_soundness(seed in any::<u64>(), n in 0usize..400) {
            let pc = random_cloud(n, seed ^ 0xabc);
            let p = AwaParams::default();
            let out = awa(&pc, &p, seed).unwrap();
            prop_assert_eq!(out.augmented.len(), out.survivors + out.injected);
            prop_assert_eq!(out.injected, (p.noise_points_frac * out.reduced.len() as f64).floor() as usize);
            for k in 0..3 {
                prop_assert!(out.thresholds[k] >= p.phi_l && out.thresholds[k] <= p.phi_u);
            }
            // Brute-force filter: reduced is exactly the in-box subsequence.
            let brute: Vec<Point> = pc.iter().filter(|q| {
                q.x.abs() / p.bounds[0] <= out.thresholds[0]
                    && q.y.abs() / p.bounds[1] <= out.thresholds[1]
                    && q.z.abs() / p.bounds[2] <= out.thresholds[2]
            }).copied().collect();
            prop_assert_eq!(&out.reduced.points, &brute);
            let ratios = extent_ratios(&out.reduced, &p.bounds);
            for k in 0..3 {
                prop_assert!(ratios[k] <= out.thresholds[k]);
            }
            prop_assert_eq!(awa(&pc, &p, seed).unwrap(), out);
        }

        #[test]
        fn augmented_is_subset_without_jitter_or_noise(seed in any::<u64>()) {
            let pc = random_cloud(300, seed);
            let p = AwaParams { jitter_sigma: 0.0, noise_points_frac: 0.0, dropout_prob: 0.4, ..AwaParams::default() };
            let out = awa(&pc, &p, seed).unwrap();
            prop_assert!(is_sub_multiset(&out.augmented, &out.reduced));
        }

        #[test]
        fn reduction_monotone_in_thresholds(
            seed in any::<u64>(),
            lo in prop::array::uniform3(0.05f64..1.0),
            extra in prop::array::uniform3(0.0f64..0.5),
        ) {
            let pc = random_cloud(300, seed);
            let hi = [lo[0] + extra[0], lo[1] + extra[1], lo[2] + extra[2]];
            let bounds = AwaParams::default().bounds;
            let small = range_reduce(&pc, &lo, &bounds);
            let big = range_reduce(&pc, &hi, &bounds);
            prop_assert!(is_sub_multiset(&small, &big));
        }
    }
}
