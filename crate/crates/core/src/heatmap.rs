//! Conversion between landmark coordinates and heatmap stacks, plus the
//! crop geometry that maps original images onto the network input.
//!
//! Grid coordinates are center-aligned with pixel coordinates: a pixel
//! position `p` lands at `(p + 0.5) / stride - 0.5` on a grid that is
//! `stride` times coarser. Cell centers sit on integer grid coordinates.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{Image, CHANNELS};

/// `K` keypoints in 2D (pixels) or 3D (millimeters) with visibility flags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandmarkSet {
    dim: usize,
    coords: Vec<f64>,
    visible: Vec<bool>,
    in_image: Vec<bool>,
}

impl LandmarkSet {
    pub fn new(dim: usize, coords: Vec<f64>, visible: Vec<bool>, in_image: Vec<bool>) -> Result<Self> {
        if dim != 2 && dim != 3 {
            return Err(Error::invalid(format!("landmark dimension {dim}")));
        }
        let k = visible.len();
        if k == 0 {
            return Err(Error::invalid("landmark set needs at least one point"));
        }
        if coords.len() != k * dim || in_image.len() != k {
            return Err(Error::shape(k * dim, coords.len()));
        }
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(Error::invalid("non-finite landmark coordinate"));
        }
        if visible.iter().zip(&in_image).any(|(&v, &i)| v && !i) {
            return Err(Error::invalid("visible joint marked outside the image"));
        }
        Ok(LandmarkSet {
            dim,
            coords,
            visible,
            in_image,
        })
    }

    /// All points visible and inside the image.
    pub fn from_points2(points: &[[f64; 2]]) -> Result<Self> {
        let k = points.len();
        Self::new(2, points.iter().flatten().copied().collect(), vec![true; k], vec![true; k])
    }

    pub fn from_points3(points: &[[f64; 3]]) -> Result<Self> {
        let k = points.len();
        Self::new(3, points.iter().flatten().copied().collect(), vec![true; k], vec![true; k])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.visible.len()
    }

    pub fn is_empty(&self) -> bool {
        self.visible.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    pub fn point2(&self, i: usize) -> [f64; 2] {
        [self.coords[i * self.dim], self.coords[i * self.dim + 1]]
    }

    pub fn point3(&self, i: usize) -> [f64; 3] {
        let p = self.point(i);
        [p[0], p[1], if self.dim == 3 { p[2] } else { 0.0 }]
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn visible(&self) -> &[bool] {
        &self.visible
    }

    pub fn in_image(&self) -> &[bool] {
        &self.in_image
    }

    pub fn with_flags(mut self, visible: Vec<bool>, in_image: Vec<bool>) -> Result<Self> {
        self.visible = visible;
        self.in_image = in_image;
        Self::new(self.dim, self.coords, self.visible, self.in_image)
    }

    pub fn map_points(&self, f: impl Fn(&[f64]) -> Vec<f64>) -> Result<Self> {
        let coords: Vec<f64> = (0..self.len()).flat_map(|i| f(self.point(i))).collect();
        let dim = coords.len() / self.len();
        Self::new(dim, coords, self.visible.clone(), self.in_image.clone())
    }

    /// Marks joints outside `[0, width) × [0, height)` as absent.
    pub fn clip_to_canvas(mut self, width: f64, height: f64) -> Self {
        for i in 0..self.len() {
            let p = self.point2(i);
            let inside = p[0] >= 0.0 && p[1] >= 0.0 && p[0] < width && p[1] < height;
            if !inside {
                self.in_image[i] = false;
                self.visible[i] = false;
            }
        }
        self
    }
}

/// Layout of a heatmap grid relative to pixel space.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub height: usize,
    pub width: usize,
    /// Pixels per grid cell.
    pub stride: f64,
}

impl GridSpec {
    pub fn new(height: usize, width: usize, stride: f64) -> Self {
        GridSpec { height, width, stride }
    }

    /// Grid for a square input of `input` pixels downsampled to `grid` cells.
    pub fn for_input(input: usize, grid: usize) -> Self {
        GridSpec::new(grid, grid, input as f64 / grid as f64)
    }

    pub fn to_grid(&self, p: [f64; 2]) -> [f64; 2] {
        [(p[0] + 0.5) / self.stride - 0.5, (p[1] + 0.5) / self.stride - 0.5]
    }

    pub fn to_pixel(&self, g: [f64; 2]) -> [f64; 2] {
        [(g[0] + 0.5) * self.stride - 0.5, (g[1] + 0.5) * self.stride - 0.5]
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum HeatmapKind {
    Pose,
    Occlusion,
}

/// `K` single-channel maps on a shared grid, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapStack {
    kind: HeatmapKind,
    k: usize,
    grid: GridSpec,
    values: Vec<f32>,
}

pub const MIN_GRID: usize = 8;

impl HeatmapStack {
    pub fn new(kind: HeatmapKind, k: usize, grid: GridSpec, values: Vec<f32>) -> Result<Self> {
        if grid.height < MIN_GRID || grid.width < MIN_GRID {
            return Err(Error::invalid(format!(
                "heatmap grid {}x{} below {MIN_GRID}x{MIN_GRID}",
                grid.height, grid.width
            )));
        }
        if values.len() != k * grid.cells() {
            return Err(Error::shape(k * grid.cells(), values.len()));
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("heatmap values must lie in [0, 1]"));
        }
        Ok(HeatmapStack { kind, k, grid, values })
    }

    pub fn kind(&self) -> HeatmapKind {
        self.kind
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn grid(&self) -> GridSpec {
        self.grid
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn channel(&self, i: usize) -> &[f32] {
        let n = self.grid.cells();
        &self.values[i * n..(i + 1) * n]
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }
}

/// Sampled unit-amplitude isotropic Gaussian centered at `c` (grid units).
fn gaussian_into(out: &mut [f32], grid: &GridSpec, c: [f64; 2], sigma: f64) {
    let inv = 1.0 / (2.0 * sigma * sigma);
    // Values below this radius are under f32 resolution of 1.
    let reach = (sigma * 6.0).ceil();
    let y0 = (c[1] - reach).floor().max(0.0) as usize;
    let y1 = ((c[1] + reach).ceil().max(-1.0) + 1.0).min(grid.height as f64) as usize;
    let x0 = (c[0] - reach).floor().max(0.0) as usize;
    let x1 = ((c[0] + reach).ceil().max(-1.0) + 1.0).min(grid.width as f64) as usize;
    for y in y0..y1 {
        for x in x0..x1 {
            let d2 = (x as f64 - c[0]).powi(2) + (y as f64 - c[1]).powi(2);
            out[y * grid.width + x] = (-d2 * inv).exp() as f32;
        }
    }
}

fn encode_where(lms: &LandmarkSet, grid: GridSpec, sigma: f64, kind: HeatmapKind, active: impl Fn(usize) -> bool) -> Result<HeatmapStack> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::invalid(format!("sigma must be positive, got {sigma}")));
    }
    if lms.dim() != 2 {
        return Err(Error::invalid("heatmaps encode 2D landmarks"));
    }
    let k = lms.len();
    let n = grid.cells();
    let mut values = vec![0.0f32; k * n];
    for i in 0..k {
        if active(i) {
            let c = grid.to_grid(lms.point2(i));
            gaussian_into(&mut values[i * n..(i + 1) * n], &grid, c, sigma);
        }
    }
    HeatmapStack::new(kind, k, grid, values)
}

/// Pose heatmaps: one Gaussian per joint inside the image, zero channels for
/// absent joints.
pub fn encode_heatmaps(lms: &LandmarkSet, grid: GridSpec, sigma: f64) -> Result<HeatmapStack> {
    encode_where(lms, grid, sigma, HeatmapKind::Pose, |i| lms.in_image()[i])
}

/// Occlusion heatmaps: Gaussians only for joints inside the image that are
/// not visible.
pub fn encode_occlusion(lms: &LandmarkSet, grid: GridSpec, sigma: f64) -> Result<HeatmapStack> {
    encode_where(lms, grid, sigma, HeatmapKind::Occlusion, |i| {
        lms.in_image()[i] && !lms.visible()[i]
    })
}

/// Per-channel peak on raw map values: `(grid x, grid y, peak value)`.
///
/// The argmax scans row-major and keeps the first strict maximum, then moves
/// a quarter cell toward the larger neighbor along each axis.
pub fn decode_peaks(values: &[f32], k: usize, height: usize, width: usize) -> Vec<(f64, f64, f32)> {
    let n = height * width;
    (0..k)
        .map(|i| {
            let ch = &values[i * n..(i + 1) * n];
            let mut best = 0;
            for (j, &v) in ch.iter().enumerate() {
                if v > ch[best] {
                    best = j;
                }
            }
            let (by, bx) = (best / width, best % width);
            let at = |x: usize, y: usize| ch[y * width + x];
            let mut x = bx as f64;
            let mut y = by as f64;
            if bx > 0 && bx + 1 < width {
                let (l, r) = (at(bx - 1, by), at(bx + 1, by));
                x += quarter(l, r);
            }
            if by > 0 && by + 1 < height {
                let (u, d) = (at(bx, by - 1), at(bx, by + 1));
                y += quarter(u, d);
            }
            (x, y, ch[best])
        })
        .collect()
}

fn quarter(lo: f32, hi: f32) -> f64 {
    if hi > lo {
        0.25
    } else if lo > hi {
        -0.25
    } else {
        0.0
    }
}

/// Landmarks (pixel coordinates) and per-joint confidence from a pose stack.
/// A channel whose peak is not positive decodes as absent with confidence 0.
pub fn decode_landmarks(hm: &HeatmapStack) -> (LandmarkSet, Vec<f64>) {
    decode_raw(hm.values(), hm.k(), hm.grid())
}

/// `decode_landmarks` on unvalidated values such as network outputs.
pub fn decode_raw(values: &[f32], k: usize, grid: GridSpec) -> (LandmarkSet, Vec<f64>) {
    let peaks = decode_peaks(values, k, grid.height, grid.width);
    let mut coords = Vec::with_capacity(2 * k);
    let mut conf = Vec::with_capacity(k);
    let mut present = Vec::with_capacity(k);
    for &(x, y, v) in &peaks {
        let p = grid.to_pixel([x, y]);
        coords.extend_from_slice(&p);
        let ok = v > 0.0;
        conf.push(if ok { v as f64 } else { 0.0 });
        present.push(ok);
    }
    let lms = LandmarkSet::new(2, coords, present.clone(), present).expect("decoded landmarks are finite");
    (lms, conf)
}

/// Squared L2 norm of an ideal Gaussian blob centered on a cell far from
/// the border.
pub fn ideal_blob_norm(sigma: f64) -> f64 {
    let reach = (sigma * 6.0).ceil() as i64;
    let mut s = 0.0;
    for y in -reach..=reach {
        for x in -reach..=reach {
            let v = (-((x * x + y * y) as f64) / (2.0 * sigma * sigma)).exp() as f32 as f64;
            s += v * v;
        }
    }
    s.sqrt()
}

/// Similarity crop: a square source region of side `scale · 200` pixels
/// around `center`, rotated by `rotation` degrees, resampled to
/// `out_size × out_size`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropTransform {
    pub center: [f64; 2],
    pub scale: f64,
    pub rotation: f64,
    pub out_size: usize,
}

/// Source box side per unit of `CropTransform::scale`.
pub const SCALE_UNIT: f64 = 200.0;
pub const DEFAULT_CROP: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Inverse,
}

impl CropTransform {
    pub fn new(center: [f64; 2], scale: f64, rotation: f64, out_size: usize) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::invalid(format!("crop scale must be positive, got {scale}")));
        }
        if out_size == 0 || !center.iter().all(|c| c.is_finite()) || !rotation.is_finite() {
            return Err(Error::invalid("degenerate crop transform"));
        }
        Ok(CropTransform {
            center,
            scale,
            rotation,
            out_size,
        })
    }

    fn zoom(&self) -> f64 {
        self.out_size as f64 / (self.scale * SCALE_UNIT)
    }

    fn half(&self) -> f64 {
        (self.out_size as f64 - 1.0) / 2.0
    }

    /// Original pixel → crop pixel.
    pub fn forward(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.rotation.to_radians().sin_cos();
        let z = self.zoom();
        let dx = p[0] - self.center[0];
        let dy = p[1] - self.center[1];
        [
            z * (c * dx - s * dy) + self.half(),
            z * (s * dx + c * dy) + self.half(),
        ]
    }

    /// Crop pixel → original pixel.
    pub fn inverse(&self, q: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.rotation.to_radians().sin_cos();
        let z = self.zoom();
        let ux = (q[0] - self.half()) / z;
        let uy = (q[1] - self.half()) / z;
        [c * ux + s * uy + self.center[0], -s * ux + c * uy + self.center[1]]
    }

    pub fn map(&self, p: [f64; 2], dir: Direction) -> [f64; 2] {
        match dir {
            Direction::Forward => self.forward(p),
            Direction::Inverse => self.inverse(p),
        }
    }

    pub fn map_landmarks(&self, lms: &LandmarkSet, dir: Direction) -> Result<LandmarkSet> {
        lms.map_points(|p| self.map([p[0], p[1]], dir).to_vec())
    }

    /// Resamples `image` into the crop by bilinear interpolation; pixels
    /// falling outside the source are black.
    pub fn crop_image(&self, image: &Image) -> Image {
        let n = self.out_size;
        let mut out = Image::new(n, n);
        for y in 0..n {
            for x in 0..n {
                let src = self.inverse([x as f64, y as f64]);
                for c in 0..CHANNELS {
                    out.data[(c * n + y) * n + x] = image.sample(c, src[0], src[1]);
                }
            }
        }
        out
    }
}

/// Whole-image identity crop for a square canvas of side `size`.
pub fn identity_crop(size: usize) -> CropTransform {
    let half = (size as f64 - 1.0) / 2.0;
    CropTransform {
        center: [half, half],
        scale: size as f64 / SCALE_UNIT,
        rotation: 0.0,
        out_size: size,
    }
}

/// Uniform augmentation ranges.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Augmentation {
    pub max_rotation: f64,
    pub scale_range: (f64, f64),
}

impl Augmentation {
    pub const POSE: Augmentation = Augmentation {
        max_rotation: 30.0,
        scale_range: (0.75, 1.25),
    };
    pub const FACE: Augmentation = Augmentation {
        max_rotation: 25.0,
        scale_range: (0.75, 1.25),
    };

    /// Perturbs `base`: rotation offset in `[−max, +max]` degrees, scale
    /// multiplied by a factor drawn from `scale_range`.
    pub fn sample<R: Rng>(&self, base: &CropTransform, rng: &mut R) -> CropTransform {
        let rot = rng.gen_range(-self.max_rotation..=self.max_rotation);
        let s = rng.gen_range(self.scale_range.0..=self.scale_range.1);
        CropTransform {
            rotation: base.rotation + rot,
            scale: base.scale * s,
            ..*base
        }
    }
}

/// One line of the JSON-lines annotation format.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub image: String,
    pub coords: Vec<[f64; 2]>,
    pub visible: Vec<bool>,
    pub center: [f64; 2],
    pub scale: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub in_image: Option<Vec<bool>>,
}

impl Annotation {
    /// Landmarks in original-image pixels. Without explicit `in_image` flags,
    /// joints with a negative coordinate are treated as absent.
    pub fn landmarks(&self) -> Result<LandmarkSet> {
        let in_image = match &self.in_image {
            Some(f) => f.clone(),
            None => self.coords.iter().map(|p| p[0] >= 0.0 && p[1] >= 0.0).collect(),
        };
        let visible = self.visible.iter().zip(&in_image).map(|(&v, &i)| v && i).collect();
        LandmarkSet::new(2, self.coords.iter().flatten().copied().collect(), visible, in_image)
    }

    pub fn crop(&self, out_size: usize) -> Result<CropTransform> {
        CropTransform::new(self.center, self.scale, 0.0, out_size)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grid64() -> GridSpec {
        GridSpec::new(64, 64, 1.0)
    }

    /// Direct evaluation of the Gaussian formula at every cell.
    fn brute_gaussian(grid: &GridSpec, c: [f64; 2], sigma: f64) -> Vec<f64> {
        let mut v = vec![0.0; grid.cells()];
        for y in 0..grid.height {
            for x in 0..grid.width {
                let d2 = (x as f64 - c[0]).powi(2) + (y as f64 - c[1]).powi(2);
                v[y * grid.width + x] = (-d2 / (2.0 * sigma * sigma)).exp();
            }
        }
        v
    }

    #[test]
    fn peak_at_center_is_one() {
        let lms = LandmarkSet::from_points2(&[[32.0, 32.0]]).unwrap();
        let hm = encode_heatmaps(&lms, grid64(), 1.0).unwrap();
        assert_eq!(hm.channel(0)[32 * 64 + 32], 1.0);
    }

    #[test]
    fn gaussian_matches_brute_force_evaluation() {
        let lms = LandmarkSet::from_points2(&[[10.0, 20.0]]).unwrap();
        let hm = encode_heatmaps(&lms, grid64(), 2.0).unwrap();
        let want = brute_gaussian(&grid64(), [10.0, 20.0], 2.0);
        assert!((hm.channel(0)[20 * 64 + 12] as f64 - (-0.5f64).exp()).abs() < 1e-7);
        for (a, b) in hm.channel(0).iter().zip(&want) {
            // cells beyond the truncation radius hold exact zeros
            assert!((*a as f64 - b).abs() < 1e-7, "{a} vs {b}");
        }
    }

    #[test]
    fn default_grid_for_256_crop_is_64() {
        let g = GridSpec::for_input(DEFAULT_CROP, 64);
        assert_eq!((g.height, g.width), (64, 64));
        assert_eq!(g.stride, 4.0);
    }

    #[test]
    fn non_finite_coords_are_rejected() {
        assert!(LandmarkSet::from_points2(&[[f64::NAN, 1.0]]).is_err());
    }

    #[test]
    fn visible_implies_in_image() {
        assert!(LandmarkSet::new(2, vec![1.0, 1.0], vec![true], vec![false]).is_err());
    }

    #[test]
    fn absent_joint_has_zero_channel_and_zero_conf() {
        let lms = LandmarkSet::new(2, vec![5.0, 5.0, 30.0, 30.0], vec![false, true], vec![false, true]).unwrap();
        let hm = encode_heatmaps(&lms, grid64(), 1.0).unwrap();
        assert!(hm.channel(0).iter().all(|&v| v == 0.0));
        let (dec, conf) = decode_landmarks(&hm);
        assert_eq!(conf[0], 0.0);
        assert!(!dec.in_image()[0]);
        assert_eq!(conf[1], 1.0);
    }

    #[test]
    fn occlusion_stack_marks_only_hidden_joints() {
        let visible = LandmarkSet::from_points2(&[[8.0, 8.0], [20.0, 20.0]]).unwrap();
        let occ = encode_occlusion(&visible, grid64(), 1.0).unwrap();
        assert!(occ.values().iter().all(|&v| v == 0.0));

        let hidden = LandmarkSet::new(2, vec![32.0, 32.0], vec![false], vec![true]).unwrap();
        let occ = encode_occlusion(&hidden, grid64(), 1.0).unwrap();
        let pose = encode_heatmaps(&hidden, grid64(), 1.0).unwrap();
        assert_eq!(occ.channel(0)[32 * 64 + 32], 1.0);
        assert_eq!(occ.values(), pose.values());
    }

    #[test]
    fn three_of_sixteen_occluded_gives_three_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let coords: Vec<f64> = (0..32).map(|_| rng.gen_range(4.0..60.0)).collect();
        let visible: Vec<bool> = (0..16).map(|i| ![2, 7, 11].contains(&i)).collect();
        let lms = LandmarkSet::new(2, coords, visible, vec![true; 16]).unwrap();
        let occ = encode_occlusion(&lms, grid64(), 1.0).unwrap();
        let nonzero = (0..16).filter(|&i| occ.channel(i).iter().any(|&v| v > 0.0)).count();
        assert_eq!(nonzero, 3);
    }

    #[test]
    fn round_trip_within_half_cell() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let grid = grid64();
        for _ in 0..100 {
            let pts: Vec<[f64; 2]> = (0..16)
                .map(|_| [rng.gen_range(0.0..63.0), rng.gen_range(0.0..63.0)])
                .collect();
            let lms = LandmarkSet::from_points2(&pts).unwrap();
            let (dec, _) = decode_landmarks(&encode_heatmaps(&lms, grid, 1.0).unwrap());
            for (i, p) in pts.iter().enumerate() {
                let q = dec.point2(i);
                assert!((p[0] - q[0]).abs() < 0.5 && (p[1] - q[1]).abs() < 0.5, "{p:?} -> {q:?}");
            }
        }
    }

    #[test]
    fn equal_maxima_resolve_to_lowest_row_major_index() {
        let grid = GridSpec::new(8, 8, 1.0);
        let mut v = vec![0.0f32; 64];
        v[2 * 8 + 5] = 0.9;
        v[6 * 8 + 1] = 0.9;
        let hm = HeatmapStack::new(HeatmapKind::Pose, 1, grid, v).unwrap();
        let (dec, conf) = decode_landmarks(&hm);
        assert_eq!(dec.point2(0), [5.0, 2.0]);
        assert!((conf[0] - 0.9).abs() < 1e-7);
    }

    #[test]
    fn quarter_offset_points_at_larger_neighbor() {
        let peaks = decode_peaks(&[0.0, 0.2, 1.0, 0.6, 0.0, 0.0, 0.0, 0.0, 0.0], 1, 1, 9);
        assert_eq!(peaks[0].0, 2.25);
    }

    #[test]
    fn identity_crop_is_a_pure_translation() {
        let t = CropTransform::new([100.0, 50.0], 1.0, 0.0, 200).unwrap();
        let a = t.forward([0.0, 0.0]);
        let b = t.forward([10.0, -3.0]);
        assert!((b[0] - a[0] - 10.0).abs() < 1e-12 && (b[1] - a[1] + 3.0).abs() < 1e-12);
    }

    #[test]
    fn rotated_crop_round_trips() {
        let t = CropTransform::new([120.0, 80.0], 1.1, 30.0, 256).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let p = [rng.gen_range(0.0..240.0), rng.gen_range(0.0..160.0)];
            let q = t.inverse(t.forward(p));
            assert!((p[0] - q[0]).abs() < 0.5 && (p[1] - q[1]).abs() < 0.5);
        }
    }

    #[test]
    fn cropped_image_lands_where_mapped_coordinates_say() {
        let mut img = Image::new(120, 100);
        img.disk([70.0, 40.0], 2.0, [1.0, 1.0, 1.0]);
        let t = CropTransform::new([60.0, 50.0], 0.5, 30.0, 64).unwrap();
        let crop = t.crop_image(&img);
        let q = t.forward([70.0, 40.0]);
        let (qx, qy) = (q[0].round() as usize, q[1].round() as usize);
        assert!(crop.get(0, qx, qy) > 0.5);
    }

    #[test]
    fn degenerate_scale_is_rejected() {
        assert!(CropTransform::new([0.0, 0.0], 0.0, 0.0, 256).is_err());
        assert!(CropTransform::new([0.0, 0.0], -1.0, 0.0, 256).is_err());
    }

    #[test]
    fn augmentation_ranges() {
        let base = identity_crop(64);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let t = Augmentation::POSE.sample(&base, &mut rng);
            assert!(t.rotation.abs() <= 30.0);
            let s = t.scale / base.scale;
            assert!((0.75..=1.25).contains(&s));
            let f = Augmentation::FACE.sample(&base, &mut rng);
            assert!(f.rotation.abs() <= 25.0);
        }
    }

    #[test]
    fn annotation_parses_jsonl_record() {
        let line = r#"{"image":"a.png","coords":[[1,2],[-1,-1]],"visible":[true,false],"center":[32,32],"scale":0.32}"#;
        let a: Annotation = serde_json::from_str(line).unwrap();
        let lms = a.landmarks().unwrap();
        assert_eq!(lms.in_image(), &[true, false]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn encoded_values_stay_in_unit_interval(x in 0.0f64..63.0, y in 0.0f64..63.0, sigma in 0.5f64..4.0) {
                let lms = LandmarkSet::from_points2(&[[x, y]]).unwrap();
                let hm = encode_heatmaps(&lms, GridSpec::new(64, 64, 1.0), sigma).unwrap();
                prop_assert!(hm.values().iter().all(|v| (0.0..=1.0).contains(v)));
            }

            #[test]
            fn strided_round_trip(x in 0.0f64..255.0, y in 0.0f64..255.0) {
                let grid = GridSpec::for_input(256, 64);
                let lms = LandmarkSet::from_points2(&[[x, y]]).unwrap();
                let (dec, _) = decode_landmarks(&encode_heatmaps(&lms, grid, 1.0).unwrap());
                let q = grid.to_grid(dec.point2(0));
                let p = grid.to_grid([x, y]);
                // Cells at the border have no neighbor to refine toward.
                let tol = if p.iter().any(|&c| c < 0.0 || c > 63.0) { 0.75 } else { 0.5 };
                prop_assert!((p[0] - q[0]).abs() < tol && (p[1] - q[1]).abs() < tol);
            }
        }
    }
}
