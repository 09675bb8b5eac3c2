//! Pillar pseudo-images and trust-region masks.
//!
//! Points are binned into vertical columns on a bird's-eye-view grid. Each
//! occupied pillar gets a fixed vector of statistics in place of a learned
//! pillar embedding:
//!
//! | channel | value |
//! |---------|-------|
//! | 0 | `ln(1 + count)` |
//! | 1, 2, 3 | mean `x`, `y` offsets from the pillar center, mean `z` |
//! | 4 | mean intensity |
//! | 5 | max `z` |
//! | 6 | min `z` |
//! | 7 | range of the pillar center / range of the farthest grid corner |
//!
//! Channels past 8 are zero; with fewer than 8 channels the list is
//! truncated. Channel 0 is positive for every occupied pillar, so occupancy
//! is exactly "some channel is nonzero".

use std::fs;
use std::io::Read;
use std::path::Path;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::KahanSum;
use crate::pointcloud::PointCloud;

pub const STAT_CHANNELS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    /// Pillar edge length in meters.
    pub resolution: f64,
    pub channels: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            x_range: (-140.0, 140.0),
            y_range: (-40.0, 40.0),
            resolution: 0.8,
            channels: STAT_CHANNELS,
        }
    }
}

// Cell counts are ceilings of extent / resolution; a ratio within this of an
// integer is treated as that integer so 80 / 0.8 gives 100 cells, not 101.
const CELL_COUNT_SLACK: f64 = 1e-9;

fn cell_count(lo: f64, hi: f64, res: f64) -> usize {
    let ratio = (hi - lo) / res;
    (ratio - CELL_COUNT_SLACK).ceil().max(1.0) as usize
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        let ok_range = |(lo, hi): (f64, f64)| lo.is_finite() && hi.is_finite() && hi > lo;
        if !ok_range(self.x_range) || !ok_range(self.y_range) {
            return Err(Error::InvalidGrid(format!(
                "ranges must satisfy max > min, got x {:?}, y {:?}",
                self.x_range, self.y_range
            )));
        }
        if !(self.resolution > 0.0 && self.resolution.is_finite()) {
            return Err(Error::InvalidGrid(format!("resolution must be > 0, got {}", self.resolution)));
        }
        if self.channels == 0 {
            return Err(Error::InvalidGrid("channels must be positive".into()));
        }
        Ok(())
    }

    /// Rows (y axis).
    pub fn height(&self) -> usize {
        cell_count(self.y_range.0, self.y_range.1, self.resolution)
    }

    /// Columns (x axis).
    pub fn width(&self) -> usize {
        cell_count(self.x_range.0, self.x_range.1, self.resolution)
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height(), self.width())
    }

    /// `(h, w)` of the pillar containing `(x, y)`; half-open on the max side.
    pub fn cell(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        if !(x >= self.x_range.0 && x < self.x_range.1 && y >= self.y_range.0 && y < self.y_range.1) {
            return None;
        }
        let w = ((x - self.x_range.0) / self.resolution).floor() as usize;
        let h = ((y - self.y_range.0) / self.resolution).floor() as usize;
        (h < self.height() && w < self.width()).then_some((h, w))
    }

    pub fn cell_center(&self, h: usize, w: usize) -> (f64, f64) {
        (
            self.x_range.0 + (w as f64 + 0.5) * self.resolution,
            self.y_range.0 + (h as f64 + 0.5) * self.resolution,
        )
    }

    /// Distance from the sensor origin to the farthest grid corner.
    pub fn max_range(&self) -> f64 {
        let x = self.x_range.0.abs().max(self.x_range.1.abs());
        let y = self.y_range.0.abs().max(self.y_range.1.abs());
        x.hypot(y)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PillarImage {
    pub grid: GridSpec,
    /// `C x H x W`
    pub data: Array3<f64>,
}

impl PillarImage {
    pub fn zeros(grid: GridSpec) -> Result<Self> {
        grid.validate()?;
        Ok(Self {
            data: Array3::zeros(grid.shape()),
            grid,
        })
    }

    pub fn is_occupied(&self, h: usize, w: usize) -> bool {
        self.data.slice(ndarray::s![.., h, w]).iter().any(|v| *v != 0.0)
    }

    /// Occupancy map (true where any channel is nonzero).
    pub fn occupancy(&self) -> Array2<bool> {
        let (_, h, w) = self.data.dim();
        Array2::from_shape_fn((h, w), |(i, j)| self.is_occupied(i, j))
    }

    pub fn occupied_count(&self) -> usize {
        self.occupancy().iter().filter(|b| **b).count()
    }
}

#[derive(Default, Clone, Copy)]
struct PillarAcc {
    count: usize,
    dx: KahanSum,
    dy: KahanSum,
    z: KahanSum,
    intensity: KahanSum,
    z_max: f64,
    z_min: f64,
}

pub fn pillarize(pc: &PointCloud, grid: &GridSpec) -> Result<PillarImage> {
    grid.validate()?;
    let (c, height, width) = grid.shape();
    let mut acc = vec![PillarAcc::default(); height * width];
    for p in pc {
        let Some((h, w)) = grid.cell(p.x, p.y) else { continue };
        let (cx, cy) = grid.cell_center(h, w);
        let a = &mut acc[h * width + w];
        if a.count == 0 {
            a.z_max = p.z;
            a.z_min = p.z;
        } else {
            a.z_max = a.z_max.max(p.z);
            a.z_min = a.z_min.min(p.z);
        }
        a.count += 1;
        a.dx.add(p.x - cx);
        a.dy.add(p.y - cy);
        a.z.add(p.z);
        a.intensity.add(p.intensity);
    }

    let max_range = grid.max_range();
    let mut data = Array3::zeros((c, height, width));
    for h in 0..height {
        for w in 0..width {
            let a = &acc[h * width + w];
            if a.count == 0 {
                continue;
            }
            let n = a.count as f64;
            let (cx, cy) = grid.cell_center(h, w);
            let stats = [
                n.ln_1p(),
                a.dx.value() / n,
                a.dy.value() / n,
                a.z.value() / n,
                a.intensity.value() / n,
                a.z_max,
                a.z_min,
                cx.hypot(cy) / max_range,
            ];
            for (k, v) in stats.iter().take(c).enumerate() {
                data[[k, h, w]] = *v;
            }
        }
    }
    Ok(PillarImage { grid: *grid, data })
}

/// Binary `H x W` mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrustMask {
    pub data: Array2<u8>,
}

impl TrustMask {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|v| **v == 1).count()
    }

    pub fn get(&self, h: usize, w: usize) -> bool {
        self.data[[h, w]] == 1
    }

    pub fn all_ones(h: usize, w: usize) -> Self {
        Self {
            data: Array2::from_elem((h, w), 1),
        }
    }
}

/// Cells occupied in both the source image and the range-reduced image.
pub fn trust_region(source: &PillarImage, reduced: &PillarImage) -> Result<TrustMask> {
    if source.grid != reduced.grid || source.data.dim() != reduced.data.dim() {
        return Err(Error::GridMismatch);
    }
    let a = source.occupancy();
    let b = reduced.occupancy();
    let data = ndarray::Zip::from(&a).and(&b).map_collect(|x, y| u8::from(*x && *y));
    Ok(TrustMask { data })
}

/// Writes a `.pim` dump: `C, H, W` as little-endian `u32`, then the tensor in
/// row-major order as little-endian `f32`.
pub fn write_pim(image: &PillarImage, path: &Path) -> Result<()> {
    let (c, h, w) = image.data.dim();
    let mut out = Vec::with_capacity(12 + 4 * c * h * w);
    for d in [c, h, w] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in image.data.iter() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads a `.pim` dump back into a raw `C x H x W` tensor.
pub fn read_pim(path: &Path) -> Result<Array3<f64>> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let malformed = |reason: String| Error::MalformedRecord {
        path: path.to_path_buf(),
        record: 0,
        reason,
    };
    if bytes.len() < 12 {
        return Err(malformed("truncated header".into()));
    }
    let dim = |k: usize| u32::from_le_bytes(bytes[4 * k..4 * k + 4].try_into().unwrap()) as usize;
    let (c, h, w) = (dim(0), dim(1), dim(2));
    let n = c * h * w;
    if bytes.len() != 12 + 4 * n {
        return Err(malformed(format!("expected {} data bytes, found {}", 4 * n, bytes.len() - 12)));
    }
    let vals: Vec<f64> = bytes[12..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    Ok(Array3::from_shape_vec((c, h, w), vals).expect("length checked"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pointcloud::Point;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_grid() -> GridSpec {
        GridSpec {
            x_range: (-4.0, 4.0),
            y_range: (-4.0, 4.0),
            resolution: 1.0,
            channels: 8,
        }
    }

    #[test]
    fn default_grid_shape() {
        let g = GridSpec::default();
        assert_eq!((g.height(), g.width()), (100, 350));
    }

    #[test]
    fn invalid_grids() {
        for g in [
            GridSpec { x_range: (1.0, 1.0), ..small_grid() },
            GridSpec { y_range: (2.0, -2.0), ..small_grid() },
            GridSpec { resolution: 0.0, ..small_grid() },
            GridSpec { channels: 0, ..small_grid() },
        ] {
            assert!(matches!(pillarize(&PointCloud::default(), &g), Err(Error::InvalidGrid(_))));
        }
    }

    #[test]
    fn empty_cloud_gives_zero_image() {
        let img = pillarize(&PointCloud::default(), &small_grid()).unwrap();
        assert!(img.data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn single_point_at_center() {
        let g = small_grid();
        let (cx, cy) = g.cell_center(5, 2);
        let img = pillarize(&PointCloud::new(vec![Point::new(cx, cy, 0.0, 0.5)]), &g).unwrap();
        assert_eq!(img.occupied_count(), 1);
        assert!((img.data[[0, 5, 2]] - 2f64.ln()).abs() < 1e-15);
        for k in 1..=3 {
            assert_eq!(img.data[[k, 5, 2]], 0.0);
        }
        assert_eq!(img.data[[4, 5, 2]], 0.5);
        assert_eq!(img.data[[5, 5, 2]], 0.0);
        assert_eq!(img.data[[6, 5, 2]], 0.0);
        let expected = cx.hypot(cy) / 32f64.sqrt();
        assert!((img.data[[7, 5, 2]] - expected).abs() < 1e-15);
    }

    #[test]
    fn channel_statistics() {
        let g = small_grid();
        let pc = PointCloud::new(vec![
            Point::new(0.2, 0.1, -1.0, 0.2),
            Point::new(0.6, 0.9, 2.0, 0.6),
        ]);
        let img = pillarize(&pc, &g).unwrap();
        let (h, w) = g.cell(0.2, 0.1).unwrap();
        assert_eq!((h, w), (4, 4));
        let d = |k| img.data[[k, h, w]];
        assert!((d(0) - 3f64.ln()).abs() < 1e-15);
        assert!((d(1) - (0.4 - 0.5)).abs() < 1e-15);
        assert!((d(2) - (0.5 - 0.5)).abs() < 1e-15);
        assert!((d(3) - 0.5).abs() < 1e-15);
        assert!((d(4) - 0.4).abs() < 1e-15);
        assert_eq!(d(5), 2.0);
        assert_eq!(d(6), -1.0);
    }

    #[test]
    fn extra_channels_zero_and_truncation() {
        let pc = PointCloud::new(vec![Point::new(0.3, 0.3, 1.0, 0.7)]);
        let wide = pillarize(&pc, &GridSpec { channels: 12, ..small_grid() }).unwrap();
        for k in 8..12 {
            assert!(wide.data.index_axis(ndarray::Axis(0), k).iter().all(|v| *v == 0.0));
        }
        let narrow = pillarize(&pc, &GridSpec { channels: 1, ..small_grid() }).unwrap();
        assert_eq!(narrow.data.dim(), (1, 8, 8));
        assert_eq!(narrow.occupied_count(), 1);
    }

    #[test]
    fn out_of_range_points_are_ignored() {
        let g = small_grid();
        let base = PointCloud::new(vec![Point::new(1.0, 1.0, 0.0, 0.3)]);
        let mut extra = base.clone();
        extra.points.push(Point::new(4.0, 0.0, 0.0, 1.0));
        extra.points.push(Point::new(-9.0, 0.0, 0.0, 1.0));
        assert_eq!(pillarize(&base, &g).unwrap(), pillarize(&extra, &g).unwrap());
    }

    #[test]
    fn trust_region_examples() {
        let g = GridSpec { x_range: (0.0, 8.0), y_range: (0.0, 8.0), resolution: 1.0, channels: 8 };
        let zero = PillarImage::zeros(g).unwrap();
        assert_eq!(trust_region(&zero, &zero).unwrap().count(), 0);

        let mut a = zero.clone();
        let mut b = zero.clone();
        a.data[[2, 3, 5]] = 0.1;
        b.data[[6, 3, 5]] = -4.0;
        let t = trust_region(&a, &b).unwrap();
        assert_eq!(t.count(), 1);
        assert!(t.get(3, 5));

        let other = PillarImage::zeros(GridSpec { resolution: 0.5, ..g }).unwrap();
        assert!(matches!(trust_region(&a, &other), Err(Error::GridMismatch)));
    }

    #[test]
    fn pim_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pc: PointCloud = (0..50)
            .map(|_| Point::new(rng.gen_range(-4.0..4.0), rng.gen_range(-4.0..4.0), 0.5, 0.25))
            .collect();
        let img = pillarize(&pc, &small_grid()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.pim");
        write_pim(&img, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[..12], &[8, 0, 0, 0, 8, 0, 0, 0, 8, 0, 0, 0]);
        let back = read_pim(&path).unwrap();
        assert_eq!(back.dim(), img.data.dim());
        for (x, y) in back.iter().zip(img.data.iter()) {
            assert_eq!(*x, *y as f32 as f64);
        }
    }

    fn sparse_image(seed: u64, g: GridSpec, density: f64) -> PillarImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c, h, w) = g.shape();
        let data = Array3::from_shape_fn((c, h, w), |_| {
            if rng.gen::<f64>() < density {
                rng.gen_range(-1.0..1.0)
            } else {
                0.0
            }
        });
        PillarImage { grid: g, data }
    }

    proptest! {
        #[test]
        fn trust_region_properties(seed in any::<u64>(), da in 0.0f64..0.3, db in 0.0f64..0.3) {
            let g = GridSpec { x_range: (0.0, 8.0), y_range: (0.0, 8.0), resolution: 1.0, channels: 8 };
            let a = sparse_image(seed, g, da);
            let b = sparse_image(seed.wrapping_add(1), g, db);
            let ab = trust_region(&a, &b).unwrap();
            prop_assert_eq!(&ab, &trust_region(&b, &a).unwrap());
            prop_assert!(ab.count() <= a.occupied_count().min(b.occupied_count()));
            let aa = trust_region(&a, &a).unwrap();
            prop_assert_eq!(aa.count(), a.occupied_count());
        }

        #[test]
        fn moving_a_point_within_its_pillar_is_local(
            seed in any::<u64>(),
            target in 0usize..60,
            dx in -0.49f64..0.49,
            dy in -0.49f64..0.49,
        ) {
            let g = small_grid();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut pc: PointCloud = (0..60)
                .map(|_| Point::new(rng.gen_range(-4.0..4.0), rng.gen_range(-4.0..4.0), rng.gen_range(-2.0..2.0), rng.gen::<f64>()))
                .collect();
            let before = pillarize(&pc, &g).unwrap();
            let p = pc.points[target];
            let (h, w) = g.cell(p.x, p.y).unwrap();
            let (cx, cy) = g.cell_center(h, w);
            pc.points[target].x = cx + dx;
            pc.points[target].y = cy + dy;
            let after = pillarize(&pc, &g).unwrap();
            for i in 0..g.height() {
                for j in 0..g.width() {
                    if (i, j) != (h, w) {
                        prop_assert_eq!(before.data.slice(ndarray::s![.., i, j]), after.data.slice(ndarray::s![.., i, j]));
                    }
                }
            }
        }
    }
}
