//! Frame model, block partitioning and the coordinate mappings that turn
//! detections into radar blocks.
//!
//! Conventions used throughout the crate:
//!
//! * A polar frame stores one azimuth bin per row and one range bin per
//!   column. Row `i` covers azimuths `[i * az_res, (i + 1) * az_res)`.
//! * Azimuth is measured in degrees from the vehicle heading ("north" in
//!   Cartesian renderings) and increases clockwise.
//! * Cartesian images use continuous pixel coordinates: pixel `(col, row)`
//!   covers `[col, col + 1) x [row, row + 1)`, `x` grows to the east (right)
//!   and `y` grows to the south (down). The vehicle sits at the continuous
//!   point `(side / 2, side / 2)`, which is the centre of the middle pixel
//!   for odd sides.

use std::collections::BTreeSet;

use ndarray::{s, Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("{axis} size {size} is not divisible by block size {block}")]
    NotDivisible {
        axis: &'static str,
        size: usize,
        block: usize,
    },
    #[error("invalid frame: {0}")]
    InvalidFrame(String),
    #[error("invalid camera calibration: {0}")]
    InvalidCalibration(String),
    #[error("bounding-box centre x = {centre_x} lies outside the image span [{x_min}, {x_max}]")]
    OutsideImage { centre_x: f64, x_min: f64, x_max: f64 },
    #[error("position at {range_m:.2} m lies beyond the radar range of {max_range_m:.2} m")]
    BeyondRange { range_m: f64, max_range_m: f64 },
    #[error("invalid bounding box: {0}")]
    InvalidBox(String),
}

/// Polar intensity frame: azimuth rows by range columns.
#[derive(Debug, Clone, PartialEq)]
pub struct RadarFrame {
    data: Array2<f64>,
    azimuth_res: f64,
    range_res: f64,
    frame_index: u32,
    peak_value: f64,
}

impl RadarFrame {
    /// Builds a frame covering the full 360 degree field of view, so the
    /// azimuth resolution is `360 / rows`.
    pub fn new(
        data: Array2<f64>,
        range_res: f64,
        peak_value: f64,
        frame_index: u32,
    ) -> Result<Self, GeometryError> {
        let rows = data.nrows();
        if rows == 0 || data.ncols() == 0 {
            return Err(GeometryError::InvalidFrame("frame is empty".into()));
        }
        if !(range_res.is_finite() && range_res > 0.0) {
            return Err(GeometryError::InvalidFrame(format!(
                "range resolution must be positive, got {range_res}"
            )));
        }
        if !(peak_value.is_finite() && peak_value > 0.0) {
            return Err(GeometryError::InvalidFrame(format!(
                "peak value must be positive, got {peak_value}"
            )));
        }
        if let Some(((r, c), v)) = data
            .indexed_iter()
            .find(|(_, v)| !(v.is_finite() && **v >= 0.0 && **v <= peak_value))
        {
            return Err(GeometryError::InvalidFrame(format!(
                "cell ({r}, {c}) = {v} is outside [0, {peak_value}]"
            )));
        }
        Ok(Self {
            data,
            azimuth_res: 360.0 / rows as f64,
            range_res,
            frame_index,
            peak_value,
        })
    }

    /// Like [`RadarFrame::new`] but clamps every entry into `[0, peak]`
    /// (non-finite values become 0). Used for reconstructions, which are not
    /// guaranteed to stay inside the representable range.
    pub fn from_clamped(
        mut data: Array2<f64>,
        range_res: f64,
        peak_value: f64,
        frame_index: u32,
    ) -> Result<Self, GeometryError> {
        data.mapv_inplace(|v| if v.is_finite() { v.clamp(0.0, peak_value) } else { 0.0 });
        Self::new(data, range_res, peak_value, frame_index)
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn into_data(self) -> Array2<f64> {
        self.data
    }

    pub fn rows(&self) -> usize {
        self.data.nrows()
    }

    pub fn cols(&self) -> usize {
        self.data.ncols()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn azimuth_res(&self) -> f64 {
        self.azimuth_res
    }

    pub fn range_res(&self) -> f64 {
        self.range_res
    }

    pub fn frame_index(&self) -> u32 {
        self.frame_index
    }

    pub fn peak_value(&self) -> f64 {
        self.peak_value
    }

    pub fn max_range(&self) -> f64 {
        self.cols() as f64 * self.range_res
    }

    /// Copy of this frame's metadata with different cell values.
    pub fn with_data(&self, data: Array2<f64>) -> Result<Self, GeometryError> {
        if data.dim() != self.data.dim() {
            return Err(GeometryError::InvalidFrame(format!(
                "shape {:?} does not match {:?}",
                data.dim(),
                self.data.dim()
            )));
        }
        Self::new(data, self.range_res, self.peak_value, self.frame_index)
    }

    pub fn block(&self, grid: &BlockGrid, idx: BlockIndex) -> ArrayView2<'_, f64> {
        let (r0, c0) = grid.origin(idx);
        self.data
            .slice(s![r0..r0 + grid.block_rows, c0..c0 + grid.block_cols])
    }
}

/// Azimuth/range block index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct BlockIndex {
    pub az: usize,
    pub rng: usize,
}

impl BlockIndex {
    pub const fn new(az: usize, rng: usize) -> Self {
        Self { az, rng }
    }
}

/// Regular tiling of a frame into equally sized blocks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockGrid {
    pub block_rows: usize,
    pub block_cols: usize,
    pub n_az_blocks: usize,
    pub n_range_blocks: usize,
    /// Degrees per azimuth bin of the partitioned frame.
    pub azimuth_res: f64,
    /// Meters per range bin of the partitioned frame.
    pub range_res: f64,
}

impl BlockGrid {
    pub fn new(
        rows: usize,
        cols: usize,
        block_rows: usize,
        block_cols: usize,
        azimuth_res: f64,
        range_res: f64,
    ) -> Result<Self, GeometryError> {
        if block_rows == 0 || rows % block_rows != 0 {
            return Err(GeometryError::NotDivisible {
                axis: "azimuth",
                size: rows,
                block: block_rows,
            });
        }
        if block_cols == 0 || cols % block_cols != 0 {
            return Err(GeometryError::NotDivisible {
                axis: "range",
                size: cols,
                block: block_cols,
            });
        }
        Ok(Self {
            block_rows,
            block_cols,
            n_az_blocks: rows / block_rows,
            n_range_blocks: cols / block_cols,
            azimuth_res,
            range_res,
        })
    }

    pub fn n_blocks(&self) -> usize {
        self.n_az_blocks * self.n_range_blocks
    }

    /// Samples per block.
    pub fn block_len(&self) -> usize {
        self.block_rows * self.block_cols
    }

    pub fn rows(&self) -> usize {
        self.n_az_blocks * self.block_rows
    }

    pub fn cols(&self) -> usize {
        self.n_range_blocks * self.block_cols
    }

    pub fn deg_per_az_block(&self) -> f64 {
        self.block_rows as f64 * self.azimuth_res
    }

    pub fn meters_per_range_block(&self) -> f64 {
        self.block_cols as f64 * self.range_res
    }

    pub fn contains(&self, idx: BlockIndex) -> bool {
        idx.az < self.n_az_blocks && idx.rng < self.n_range_blocks
    }

    /// Top-left cell `(row, col)` of a block.
    pub fn origin(&self, idx: BlockIndex) -> (usize, usize) {
        (idx.az * self.block_rows, idx.rng * self.block_cols)
    }

    /// Row-major ordinal, azimuth major.
    pub fn ordinal(&self, idx: BlockIndex) -> usize {
        idx.az * self.n_range_blocks + idx.rng
    }

    pub fn blocks(&self) -> impl Iterator<Item = BlockIndex> + '_ {
        (0..self.n_az_blocks)
            .flat_map(move |az| (0..self.n_range_blocks).map(move |rng| BlockIndex { az, rng }))
    }

    /// Block containing a polar position.
    pub fn block_at(&self, azimuth_deg: f64, range_m: f64) -> Result<BlockIndex, GeometryError> {
        let max_range = self.cols() as f64 * self.range_res;
        if range_m >= max_range {
            return Err(GeometryError::BeyondRange {
                range_m,
                max_range_m: max_range,
            });
        }
        Ok(BlockIndex {
            az: self.az_block_of(azimuth_deg),
            rng: ((range_m / self.meters_per_range_block()).floor() as usize)
                .min(self.n_range_blocks - 1),
        })
    }

    /// Azimuth block of an angle in degrees (any real value, wrapped).
    pub fn az_block_of(&self, azimuth_deg: f64) -> usize {
        let a = normalize_azimuth(azimuth_deg);
        ((a / self.deg_per_az_block()).floor() as usize).min(self.n_az_blocks - 1)
    }
}

/// Partitions a frame into `block_rows x block_cols` blocks.
pub fn partition(
    frame: &RadarFrame,
    block_rows: usize,
    block_cols: usize,
) -> Result<BlockGrid, GeometryError> {
    BlockGrid::new(
        frame.rows(),
        frame.cols(),
        block_rows,
        block_cols,
        frame.azimuth_res(),
        frame.range_res(),
    )
}

/// Wraps an angle into `[0, 360)`.
pub fn normalize_azimuth(deg: f64) -> f64 {
    let a = deg.rem_euclid(360.0);
    // rem_euclid can round up to exactly 360 for tiny negative inputs
    if a >= 360.0 {
        0.0
    } else {
        a
    }
}

/// Axis-aligned box in pixel coordinates; `(x, y)` is the top-left corner.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub const fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self {
            x: cx - w / 2.0,
            y: cy - h / 2.0,
            w,
            h,
        }
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn is_valid(&self) -> bool {
        self.x.is_finite()
            && self.y.is_finite()
            && self.w.is_finite()
            && self.h.is_finite()
            && self.w > 0.0
            && self.h > 0.0
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let ix = (self.x + self.w).min(other.x + other.w) - self.x.max(other.x);
        let iy = (self.y + self.h).min(other.y + other.h) - self.y.max(other.y);
        if ix <= 0.0 || iy <= 0.0 {
            0.0
        } else {
            ix * iy
        }
    }

    /// Intersection over union; 0 when either box is empty.
    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection_area(other);
        if inter <= 0.0 {
            return 0.0;
        }
        inter / (self.area() + other.area() - inter)
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        Self {
            x: self.x + dx,
            y: self.y + dy,
            ..*self
        }
    }

    /// Part of the box inside `bounds`, or `None` when they do not overlap.
    pub fn clipped(&self, bounds: &BBox) -> Option<BBox> {
        let x0 = self.x.max(bounds.x);
        let y0 = self.y.max(bounds.y);
        let x1 = (self.x + self.w).min(bounds.x + bounds.w);
        let y1 = (self.y + self.h).min(bounds.y + bounds.h);
        (x1 > x0 && y1 > y0).then(|| BBox::new(x0, y0, x1 - x0, y1 - y0))
    }
}

/// Camera field of view expressed in the vehicle's bird's-eye frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraCalibration {
    /// Azimuth (degrees, clockwise from heading) seen at `x_min`.
    pub theta_min: f64,
    /// Azimuth seen at `x_max`.
    pub theta_max: f64,
    pub x_min: f64,
    pub x_max: f64,
}

impl CameraCalibration {
    pub fn new(theta_min: f64, theta_max: f64, x_min: f64, x_max: f64) -> Result<Self, GeometryError> {
        let cal = Self {
            theta_min,
            theta_max,
            x_min,
            x_max,
        };
        cal.validate()?;
        Ok(cal)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.theta_min < self.theta_max) {
            return Err(GeometryError::InvalidCalibration(format!(
                "theta_min {} must be below theta_max {}",
                self.theta_min, self.theta_max
            )));
        }
        if !(self.x_min < self.x_max) {
            return Err(GeometryError::InvalidCalibration(format!(
                "x_min {} must be below x_max {}",
                self.x_min, self.x_max
            )));
        }
        Ok(())
    }
}

/// Azimuth of an image detection and the azimuth block it falls in.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AzimuthHit {
    /// Un-wrapped azimuth in degrees, e.g. -16.5 for a left-of-boresight box.
    pub azimuth_deg: f64,
    pub az_block: usize,
}

/// Maps an image bounding box to radar azimuth by affine interpolation of
/// its horizontal centre across the camera field of view.
pub fn image_bbox_to_azimuth(
    bbox: &BBox,
    cal: &CameraCalibration,
    grid: &BlockGrid,
) -> Result<AzimuthHit, GeometryError> {
    cal.validate()?;
    let (centre_x, _) = bbox.center();
    if !(centre_x >= cal.x_min && centre_x <= cal.x_max) {
        return Err(GeometryError::OutsideImage {
            centre_x,
            x_min: cal.x_min,
            x_max: cal.x_max,
        });
    }
    let fraction = (centre_x - cal.x_min) / (cal.x_max - cal.x_min);
    let azimuth_deg = cal.theta_min + fraction * (cal.theta_max - cal.theta_min);
    Ok(AzimuthHit {
        azimuth_deg,
        az_block: grid.az_block_of(azimuth_deg),
    })
}

/// Pixel geometry of a Cartesian bird's-eye rendering centred on the vehicle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CartesianGeometry {
    pub side_px: usize,
    pub meters_per_pixel: f64,
}

impl CartesianGeometry {
    pub fn new(side_px: usize, meters_per_pixel: f64) -> Result<Self, GeometryError> {
        if side_px < 3 {
            return Err(GeometryError::InvalidFrame(format!(
                "Cartesian side must be at least 3 pixels, got {side_px}"
            )));
        }
        if !(meters_per_pixel.is_finite() && meters_per_pixel > 0.0) {
            return Err(GeometryError::InvalidFrame(format!(
                "meters per pixel must be positive, got {meters_per_pixel}"
            )));
        }
        Ok(Self {
            side_px,
            meters_per_pixel,
        })
    }

    /// Continuous pixel coordinate of the vehicle.
    pub fn center(&self) -> f64 {
        self.side_px as f64 / 2.0
    }

    /// Polar position `(azimuth_deg, range_m)` of a continuous pixel point.
    /// The vehicle position itself maps to azimuth 0 and range 0.
    pub fn to_polar(&self, px: f64, py: f64) -> (f64, f64) {
        let east = (px - self.center()) * self.meters_per_pixel;
        let north = (self.center() - py) * self.meters_per_pixel;
        let range = east.hypot(north);
        if range == 0.0 {
            return (0.0, 0.0);
        }
        (normalize_azimuth(east.atan2(north).to_degrees()), range)
    }

    /// Continuous pixel point of a polar position.
    pub fn from_polar(&self, azimuth_deg: f64, range_m: f64) -> (f64, f64) {
        let a = azimuth_deg.to_radians();
        let east = range_m * a.sin();
        let north = range_m * a.cos();
        self.from_metric(east, north)
    }

    /// Continuous pixel point of a metric position (east, north) in meters.
    pub fn from_metric(&self, east: f64, north: f64) -> (f64, f64) {
        (
            self.center() + east / self.meters_per_pixel,
            self.center() - north / self.meters_per_pixel,
        )
    }

    pub fn bounds(&self) -> BBox {
        BBox::new(0.0, 0.0, self.side_px as f64, self.side_px as f64)
    }
}

/// Bird's-eye rendering of a polar frame.
#[derive(Debug, Clone, PartialEq)]
pub struct CartesianImage {
    pub pixels: Array2<f64>,
    pub geometry: CartesianGeometry,
}

/// Block holding the centre of a Cartesian bounding box.
///
/// A centre coincident with the vehicle maps to azimuth 0, range 0.
pub fn cartesian_bbox_to_polar_block(
    bbox: &BBox,
    geometry: &CartesianGeometry,
    grid: &BlockGrid,
) -> Result<BlockIndex, GeometryError> {
    if !bbox.is_valid() {
        return Err(GeometryError::InvalidBox(format!("{bbox:?}")));
    }
    if bbox.intersection_area(&geometry.bounds()) <= 0.0 {
        return Err(GeometryError::InvalidBox(format!(
            "{bbox:?} does not intersect the {0}x{0} image",
            geometry.side_px
        )));
    }
    let (cx, cy) = bbox.center();
    let (azimuth, range) = geometry.to_polar(cx, cy);
    grid.block_at(azimuth, range)
}

/// Shape of the block stencil placed around each object centre.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stencil {
    /// Include the block directly behind the object (away from the vehicle),
    /// which covers the object's occlusion shadow.
    pub occlusion_shadow: bool,
}

impl Default for Stencil {
    fn default() -> Self {
        Self {
            occlusion_shadow: true,
        }
    }
}

/// Inverted-T stencil around each centre with the default stencil.
pub fn mark_important_blocks(centers: &[BlockIndex], grid: &BlockGrid) -> BTreeSet<BlockIndex> {
    mark_important_blocks_with(centers, grid, Stencil::default())
}

/// For a centre `(a, r)`: the stem `(a, r)` and `(a, r + 1)`, and the bar
/// `(a - 1, r - 1)`, `(a, r - 1)`, `(a + 1, r - 1)` one block nearer the
/// vehicle. Azimuth wraps around, range is clipped to the grid.
pub fn mark_important_blocks_with(
    centers: &[BlockIndex],
    grid: &BlockGrid,
    stencil: Stencil,
) -> BTreeSet<BlockIndex> {
    let n_az = grid.n_az_blocks;
    let mut out = BTreeSet::new();
    for c in centers.iter().filter(|c| grid.contains(**c)) {
        out.insert(*c);
        if stencil.occlusion_shadow && c.rng + 1 < grid.n_range_blocks {
            out.insert(BlockIndex::new(c.az, c.rng + 1));
        }
        if c.rng > 0 {
            let r = c.rng - 1;
            out.insert(BlockIndex::new((c.az + n_az - 1) % n_az, r));
            out.insert(BlockIndex::new(c.az, r));
            out.insert(BlockIndex::new((c.az + 1) % n_az, r));
        }
    }
    out
}

/// Nearest-neighbour resampling of a polar frame onto a square Cartesian
/// grid. Pixels beyond the maximum range are zero.
pub fn polar_to_cartesian(
    frame: &RadarFrame,
    side_px: usize,
    meters_per_pixel: f64,
) -> Result<CartesianImage, GeometryError> {
    let geometry = CartesianGeometry::new(side_px, meters_per_pixel)?;
    let max_range = frame.max_range();
    let rows = frame.rows();
    let data = frame.data();
    let pixels = Array2::from_shape_fn((side_px, side_px), |(py, px)| {
        let (az, range) = geometry.to_polar(px as f64 + 0.5, py as f64 + 0.5);
        if range >= max_range {
            return 0.0;
        }
        let row = ((az / frame.azimuth_res()).floor() as usize).min(rows - 1);
        let col = (range / frame.range_res()).floor() as usize;
        data[[row, col]]
    });
    Ok(CartesianImage { pixels, geometry })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn frame(rows: usize, cols: usize) -> RadarFrame {
        RadarFrame::new(Array2::zeros((rows, cols)), 0.175, 255.0, 1).unwrap()
    }

    fn grid_20x12() -> BlockGrid {
        // 18 degree, 8.4 m blocks as on 400x576 frames with 20x48 blocks
        BlockGrid::new(400, 576, 20, 48, 0.9, 0.175).unwrap()
    }

    #[test]
    fn iou_values() {
        let a = BBox::new(0.0, 0.0, 2.0, 2.0);
        assert_eq!(a.iou(&a), 1.0);
        assert_eq!(a.iou(&BBox::new(2.0, 0.0, 2.0, 2.0)), 0.0);
        assert_abs_diff_eq!(a.iou(&BBox::new(1.0, 0.0, 2.0, 2.0)), 2.0 / 6.0, epsilon = 1e-15);
        assert_eq!(a.clipped(&BBox::new(1.0, 1.0, 5.0, 5.0)), Some(BBox::new(1.0, 1.0, 1.0, 1.0)));
        assert_eq!(a.clipped(&BBox::new(3.0, 3.0, 5.0, 5.0)), None);
    }

    #[test]
    fn radiate_like_partition() {
        let g = partition(&frame(400, 576), 20, 48).unwrap();
        assert_eq!((g.n_az_blocks, g.n_range_blocks), (20, 12));
        assert_eq!(g.n_blocks(), 240);
        assert_abs_diff_eq!(g.deg_per_az_block(), 18.0, epsilon = 1e-12);
        assert_abs_diff_eq!(g.meters_per_range_block(), 8.4, epsilon = 1e-12);
    }

    #[test]
    fn oxford_like_partition() {
        let g = partition(&frame(400, 3700), 25, 100).unwrap();
        assert_eq!((g.n_az_blocks, g.n_range_blocks), (16, 37));
        assert_abs_diff_eq!(g.deg_per_az_block(), 22.5, epsilon = 1e-12);
    }

    #[test]
    fn identity_partition() {
        let g = partition(&frame(20, 48), 20, 48).unwrap();
        assert_eq!(g.n_blocks(), 1);
        assert_eq!(g.blocks().collect::<Vec<_>>(), vec![BlockIndex::new(0, 0)]);
    }

    #[test]
    fn non_divisible_partition_names_axis() {
        let err = partition(&frame(400, 576), 30, 48).unwrap_err();
        assert!(matches!(err, GeometryError::NotDivisible { axis: "azimuth", .. }));
        let err = partition(&frame(400, 576), 20, 50).unwrap_err();
        assert!(matches!(err, GeometryError::NotDivisible { axis: "range", .. }));
    }

    #[test]
    fn blocks_cover_each_cell_once() {
        let f = frame(40, 96);
        let g = partition(&f, 20, 48).unwrap();
        let mut hits = Array2::<u32>::zeros((40, 96));
        for b in g.blocks() {
            let (r0, c0) = g.origin(b);
            hits.slice_mut(s![r0..r0 + 20, c0..c0 + 48]).mapv_inplace(|v| v + 1);
        }
        assert!(hits.iter().all(|&h| h == 1));
        assert_eq!(g.n_blocks() * g.block_len(), f.len());
    }

    #[test]
    fn frame_rejects_out_of_range_values() {
        let mut d = Array2::zeros((4, 4));
        d[[1, 2]] = 300.0;
        assert!(RadarFrame::new(d.clone(), 1.0, 255.0, 0).is_err());
        d[[1, 2]] = f64::NAN;
        assert!(RadarFrame::new(d, 1.0, 255.0, 0).is_err());
    }

    #[test]
    fn image_azimuth_boresight_and_endpoints() {
        let g = grid_20x12();
        let cal = CameraCalibration::new(-33.0, 33.0, 0.0, 1280.0).unwrap();
        let mid = BBox::from_center(640.0, 300.0, 40.0, 40.0);
        let hit = image_bbox_to_azimuth(&mid, &cal, &g).unwrap();
        assert_abs_diff_eq!(hit.azimuth_deg, 0.0, epsilon = 1e-12);
        assert_eq!(hit.az_block, 0);

        let left = BBox::from_center(320.0, 300.0, 40.0, 40.0);
        let hit = image_bbox_to_azimuth(&left, &cal, &g).unwrap();
        assert_abs_diff_eq!(hit.azimuth_deg, -16.5, epsilon = 1e-12);
        // 343.5 degrees wraps into the last 18 degree block
        assert_eq!(hit.az_block, 19);

        let edge = BBox::from_center(0.0, 10.0, 4.0, 4.0);
        let hit = image_bbox_to_azimuth(&edge, &cal, &g).unwrap();
        assert_abs_diff_eq!(hit.azimuth_deg, -33.0, epsilon = 1e-12);
    }

    #[test]
    fn image_azimuth_outside_image() {
        let cal = CameraCalibration::new(-33.0, 33.0, 0.0, 1280.0).unwrap();
        let b = BBox::from_center(1300.0, 10.0, 4.0, 4.0);
        assert!(matches!(
            image_bbox_to_azimuth(&b, &cal, &grid_20x12()),
            Err(GeometryError::OutsideImage { .. })
        ));
    }

    #[test]
    fn calibration_invariants() {
        assert!(CameraCalibration::new(10.0, 10.0, 0.0, 1.0).is_err());
        assert!(CameraCalibration::new(0.0, 10.0, 5.0, 1.0).is_err());
    }

    #[test]
    fn polar_block_north_and_diagonal() {
        let g = grid_20x12();
        let geo = CartesianGeometry::new(1001, 0.2).unwrap();
        // 50 m straight ahead
        let (px, py) = geo.from_metric(0.0, 50.0);
        let b = cartesian_bbox_to_polar_block(&BBox::from_center(px, py, 6.0, 6.0), &geo, &g).unwrap();
        assert_eq!(b, BlockIndex::new(0, 5));
        // 45 degree bearing, 30 m
        let (px, py) = geo.from_polar(45.0, 30.0);
        let b = cartesian_bbox_to_polar_block(&BBox::from_center(px, py, 6.0, 6.0), &geo, &g).unwrap();
        assert_eq!(b, BlockIndex::new(2, 3));
    }

    #[test]
    fn polar_block_at_vehicle() {
        let g = grid_20x12();
        let geo = CartesianGeometry::new(101, 0.5).unwrap();
        let c = geo.center();
        let b = cartesian_bbox_to_polar_block(&BBox::from_center(c, c, 4.0, 4.0), &geo, &g).unwrap();
        assert_eq!(b, BlockIndex::new(0, 0));
    }

    #[test]
    fn polar_block_beyond_range() {
        let g = grid_20x12();
        let geo = CartesianGeometry::new(2001, 0.1).unwrap();
        let (px, py) = geo.from_metric(99.0, 99.0);
        assert!(matches!(
            cartesian_bbox_to_polar_block(&BBox::from_center(px, py, 2.0, 2.0), &geo, &g),
            Err(GeometryError::BeyondRange { .. })
        ));
    }

    #[test]
    fn inverted_t_interior() {
        let g = grid_20x12();
        let got = mark_important_blocks(&[BlockIndex::new(5, 6)], &g);
        let want: BTreeSet<_> = [(5, 6), (5, 7), (4, 5), (5, 5), (6, 5)]
            .into_iter()
            .map(|(a, r)| BlockIndex::new(a, r))
            .collect();
        assert_eq!(got, want);
    }

    #[test]
    fn inverted_t_clips_near_range() {
        let g = grid_20x12();
        let got = mark_important_blocks(&[BlockIndex::new(7, 0)], &g);
        let want: BTreeSet<_> = [BlockIndex::new(7, 0), BlockIndex::new(7, 1)].into();
        assert_eq!(got, want);
    }

    #[test]
    fn inverted_t_clips_far_range() {
        let g = grid_20x12();
        let got = mark_important_blocks(&[BlockIndex::new(7, 11)], &g);
        assert!(!got.iter().any(|b| b.rng > 11));
        assert_eq!(got.len(), 4);
    }

    #[test]
    fn inverted_t_wraps_azimuth() {
        let g = grid_20x12();
        let got = mark_important_blocks(&[BlockIndex::new(0, 3)], &g);
        assert!(got.contains(&BlockIndex::new(19, 2)));
        assert!(got.contains(&BlockIndex::new(1, 2)));
    }

    #[test]
    fn inverted_t_without_shadow() {
        let g = grid_20x12();
        let got = mark_important_blocks_with(
            &[BlockIndex::new(5, 6)],
            &g,
            Stencil {
                occlusion_shadow: false,
            },
        );
        assert!(!got.contains(&BlockIndex::new(5, 7)));
        assert_eq!(got.len(), 4);
    }

    #[test]
    fn cartesian_of_zero_frame_is_zero() {
        let img = polar_to_cartesian(&frame(40, 30), 51, 0.5).unwrap();
        assert!(img.pixels.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cartesian_of_constant_frame_is_disk() {
        let f = RadarFrame::new(Array2::from_elem((40, 30), 7.0), 0.5, 255.0, 0).unwrap();
        // max range 15 m, image spans +/- 20 m
        let img = polar_to_cartesian(&f, 81, 0.5).unwrap();
        assert_eq!(img.pixels[[0, 0]], 0.0);
        assert_eq!(img.pixels[[80, 80]], 0.0);
        assert_eq!(img.pixels[[40, 40]], 7.0);
        for ((py, px), v) in img.pixels.indexed_iter() {
            let (_, r) = img.geometry.to_polar(px as f64 + 0.5, py as f64 + 0.5);
            assert_eq!(*v, if r < 15.0 { 7.0 } else { 0.0 });
        }
    }

    #[test]
    fn cartesian_places_single_cell_north() {
        // 3.6 degree azimuth bins, 1 m range bins, bright cell at azimuth 0, range 20..21 m
        let mut d = Array2::zeros((100, 30));
        d[[0, 20]] = 200.0;
        let f = RadarFrame::new(d, 1.0, 255.0, 0).unwrap();
        let img = polar_to_cartesian(&f, 81, 0.5).unwrap();
        let lit: Vec<_> = img
            .pixels
            .indexed_iter()
            .filter(|(_, v)| **v > 0.0)
            .map(|((py, px), _)| (px as f64 + 0.5, py as f64 + 0.5))
            .collect();
        assert!(!lit.is_empty());
        for (px, py) in lit {
            let east = (px - 40.5) * 0.5;
            let north = (40.5 - py) * 0.5;
            assert!(east >= 0.0 && north > 0.0);
            let r = east.hypot(north);
            assert!((20.0..21.0).contains(&r), "r = {r}");
        }
    }

    #[test]
    fn to_polar_round_trip() {
        let geo = CartesianGeometry::new(201, 0.3).unwrap();
        for &(az, r) in &[(0.0, 10.0), (90.0, 5.0), (181.0, 20.0), (359.0, 1.0)] {
            let (x, y) = geo.from_polar(az, r);
            let (az2, r2) = geo.to_polar(x, y);
            assert_abs_diff_eq!(r2, r, epsilon = 1e-9);
            assert_abs_diff_eq!(az2, az, epsilon = 1e-9);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn stencil_size_bound(centers in proptest::collection::vec((0usize..20, 0usize..12), 0..10)) {
                let g = grid_20x12();
                let cs: Vec<_> = centers.iter().map(|&(a, r)| BlockIndex::new(a, r)).collect();
                let out = mark_important_blocks(&cs, &g);
                prop_assert!(out.len() <= 5 * cs.len());
                for c in &cs {
                    prop_assert!(out.contains(c));
                }
                prop_assert!(out.iter().all(|b| g.contains(*b)));
            }

            #[test]
            fn azimuth_monotone_in_centre(x1 in 0.0f64..1280.0, x2 in 0.0f64..1280.0) {
                let g = grid_20x12();
                let cal = CameraCalibration::new(90.0, 270.0, 0.0, 1280.0).unwrap();
                let (lo, hi) = if x1 <= x2 { (x1, x2) } else { (x2, x1) };
                let a = image_bbox_to_azimuth(&BBox::from_center(lo, 0.0, 0.0, 1.0), &cal, &g).unwrap();
                let b = image_bbox_to_azimuth(&BBox::from_center(hi, 0.0, 0.0, 1.0), &cal, &g).unwrap();
                prop_assert!(a.azimuth_deg <= b.azimuth_deg);
            }

            #[test]
            fn cell_centres_map_back_to_their_block(row in 0usize..400, col in 6usize..576) {
                let g = grid_20x12();
                let geo = CartesianGeometry::new(1201, 0.17).unwrap();
                let az = (row as f64 + 0.5) * g.azimuth_res;
                let range = (col as f64 + 0.5) * g.range_res;
                let (px, py) = geo.from_polar(az, range);
                let b = cartesian_bbox_to_polar_block(&BBox::from_center(px, py, 1.0, 1.0), &geo, &g).unwrap();
                prop_assert_eq!(b, BlockIndex::new(row / g.block_rows, col / g.block_cols));
            }
        }
    }
}
