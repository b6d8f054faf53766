//! Edge and orientation rasters and the "left" rule.
//!
//! Orientation is the tangent direction of the boundary measured
//! counter-clockwise from the +x axis with y pointing *up*, wrapped to
//! `(-π, π]`. The traversal direction is chosen so the occluding
//! (foreground) region lies on the left of the tangent. Image rows grow
//! downward, so a step of `(dx, drow)` has angle `atan2(-drow, dx)`.

use std::f64::consts::PI;
use std::path::Path;

use image::{GrayImage, Luma};

use crate::error::{Error, Result};
use crate::tensor::{io as tensor_io, Shape, Tensor};

/// Wraps an angle into `(-π, π]`; `-π` maps to `π`.
pub fn wrap_angle(theta: f64) -> f64 {
    let two_pi = 2.0 * PI;
    let mut r = theta.rem_euclid(two_pi);
    if r > PI {
        r -= two_pi;
    }
    if r <= -PI {
        r += two_pi;
    }
    r
}

/// Rounds a wrapped angle to `f32` without landing on `-π`.
pub fn store_angle(theta: f64) -> f32 {
    let v = wrap_angle(theta) as f32;
    if v <= -(PI as f32) {
        PI as f32
    } else {
        v
    }
}

/// Binary edge raster, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct EdgeMap {
    width: usize,
    height: usize,
    values: Vec<u8>,
}

impl EdgeMap {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            values: vec![0; width * height],
        }
    }

    /// Wraps raw values without checking that they are binary; see [`validate_pair`].
    pub fn from_raw(width: usize, height: usize, values: Vec<u8>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::Invalid(format!(
                "edge map {width}x{height} needs {} values, got {}",
                width * height,
                values.len()
            )));
        }
        Ok(Self { width, height, values })
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut m = Self::new(width, height);
        for y in 0..height {
            for x in 0..width {
                m.values[y * width + x] = f(x, y) as u8;
            }
        }
        m
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.values[y * self.width + x] != 0
    }

    pub fn set(&mut self, x: usize, y: usize, on: bool) {
        self.values[y * self.width + x] = on as u8;
    }

    pub fn count(&self) -> usize {
        self.values.iter().filter(|&&v| v != 0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    /// `(x, y)` of every set pixel, row-major order.
    pub fn pixels(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.values
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0)
            .map(move |(i, _)| (i % self.width, i / self.width))
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        let data = self.values.iter().map(|&v| if v != 0 { 1.0 } else { 0.0 }).collect();
        Tensor::from_vec(Shape::new(1, 1, self.height, self.width), data).expect("extent")
    }

    /// 8-bit PGM, edge pixels 255.
    pub fn save_pgm(&self, path: &Path) -> Result<()> {
        let img = GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            Luma([if self.get(x as usize, y as usize) { 255 } else { 0 }])
        });
        img.save_with_format(path, image::ImageFormat::Pnm)
            .map_err(|e| Error::format(path, e.to_string()))
    }

    /// Any nonzero gray level reads as an edge.
    pub fn load_pgm(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::format(path, e.to_string()))?.to_luma8();
        let (w, h) = img.dimensions();
        let values = img.pixels().map(|p| (p.0[0] != 0) as u8).collect();
        Self::from_raw(w as usize, h as usize, values)
    }
}

/// Per-pixel boundary tangent angle in radians.
#[derive(Clone, Debug, PartialEq)]
pub struct OrientationMap {
    width: usize,
    height: usize,
    values: Vec<f32>,
}

impl OrientationMap {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            values: vec![0.0; width * height],
        }
    }

    pub fn from_raw(width: usize, height: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::Invalid(format!(
                "orientation map {width}x{height} needs {} values, got {}",
                width * height,
                values.len()
            )));
        }
        Ok(Self { width, height, values })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.values[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, theta: f32) {
        self.values[y * self.width + x] = theta;
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::from_vec(Shape::new(1, 1, self.height, self.width), self.values.clone()).expect("extent")
    }

    /// Reads a `1×1×h×w` tensor.
    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self> {
        let s = t.shape();
        if s.n != 1 || s.c != 1 {
            return Err(Error::Invalid(format!("orientation tensor must be 1x1xHxW, got {s}")));
        }
        Self::from_raw(s.w, s.h, t.data().to_vec())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(tensor_io::save(&self.to_tensor(), path)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_tensor(&tensor_io::load(path)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Side {
    Left,
    Right,
}

/// Subpixel point in image coordinates: `x` = column, `y` = row (down).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

/// An occlusion boundary as a polyline with its foreground side.
///
/// A polyline whose last point equals its first is treated as closed.
#[derive(Clone, Debug, PartialEq)]
pub struct OcclusionBoundary {
    points: Vec<Point>,
    foreground: Side,
}

impl OcclusionBoundary {
    pub fn new(points: Vec<Point>, foreground: Side) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::Invalid("boundary needs at least 2 points".into()));
        }
        if let Some(i) = points.windows(2).position(|w| w[0] == w[1]) {
            return Err(Error::Invalid(format!("boundary points {i} and {} coincide", i + 1)));
        }
        Ok(Self { points, foreground })
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn foreground(&self) -> Side {
        self.foreground
    }

    pub fn is_closed(&self) -> bool {
        self.points.len() > 2 && self.points.first() == self.points.last()
    }

    pub fn flipped(&self) -> Self {
        Self {
            points: self.points.clone(),
            foreground: match self.foreground {
                Side::Left => Side::Right,
                Side::Right => Side::Left,
            },
        }
    }
}

/// Tangent angle of travelling from `a` to `b` with the foreground on `side`.
pub fn tangent_angle(a: Point, b: Point, side: Side) -> f64 {
    let theta = (-(b.y - a.y)).atan2(b.x - a.x);
    match side {
        Side::Left => wrap_angle(theta),
        Side::Right => wrap_angle(theta + PI),
    }
}

/// Pixels of an 8-connected Bresenham line from `a` to `b`, endpoints included.
pub fn line_pixels(a: (i64, i64), b: (i64, i64)) -> Vec<(i64, i64)> {
    let (mut x, mut y) = a;
    let dx = (b.0 - a.0).abs();
    let dy = -(b.1 - a.1).abs();
    let sx = if a.0 < b.0 { 1 } else { -1 };
    let sy = if a.1 < b.1 { 1 } else { -1 };
    let mut err = dx + dy;
    let mut out = Vec::with_capacity((dx - dy + 1) as usize);
    loop {
        out.push((x, y));
        if (x, y) == b {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
    out
}

fn pixel_of(p: Point) -> (i64, i64) {
    (p.x.round() as i64, p.y.round() as i64)
}

/// Visits every pixel of a boundary with the tangent of the segment that owns it.
///
/// Each segment owns its start pixel (outgoing-segment rule at vertices) and
/// not its end pixel, except the final segment of an open polyline.
pub fn trace_boundary(b: &OcclusionBoundary, mut visit: impl FnMut(i64, i64, f64)) {
    let pts = b.points();
    let closed = b.is_closed();
    let last = pts.len() - 2;
    for (i, seg) in pts.windows(2).enumerate() {
        let (p0, p1) = (seg[0], seg[1]);
        let (a, z) = (pixel_of(p0), pixel_of(p1));
        let theta = tangent_angle(p0, p1, b.foreground());
        if a == z {
            // shorter than a pixel: the start pixel still belongs to this segment
            if i != last || closed {
                visit(a.0, a.1, theta);
            }
            continue;
        }
        let line = line_pixels(a, z);
        let keep = if i == last && !closed { line.len() } else { line.len() - 1 };
        for &(x, y) in &line[..keep] {
            visit(x, y, theta);
        }
    }
}

/// Draws a boundary into fresh edge/orientation rasters.
pub fn rasterize_boundary(b: &OcclusionBoundary, width: usize, height: usize) -> Result<(EdgeMap, OrientationMap)> {
    let mut edge = EdgeMap::new(width, height);
    let mut orient = OrientationMap::new(width, height);
    trace_boundary(b, |x, y, theta| {
        if x >= 0 && y >= 0 && (x as usize) < width && (y as usize) < height {
            edge.set(x as usize, y as usize, true);
            orient.set(x as usize, y as usize, store_angle(theta));
        }
    });
    if edge.is_empty() {
        return Err(Error::Invalid("boundary rasterizes to no pixels inside the image".into()));
    }
    Ok((edge, orient))
}

#[derive(Clone, Debug, PartialEq)]
pub enum Violation {
    Extent {
        edge: (usize, usize),
        orientation: (usize, usize),
    },
    NonBinary {
        x: usize,
        y: usize,
        value: u8,
    },
    AngleOutOfRange {
        x: usize,
        y: usize,
        value: f32,
    },
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks an edge/orientation pair; angles off the edge set are not examined.
pub fn validate_pair(e: &EdgeMap, a: &OrientationMap) -> ValidationReport {
    let mut violations = Vec::new();
    if (e.width, e.height) != (a.width, a.height) {
        violations.push(Violation::Extent {
            edge: (e.width, e.height),
            orientation: (a.width, a.height),
        });
        return ValidationReport { violations };
    }
    let pi = PI as f32;
    for (i, (&v, &theta)) in e.values.iter().zip(&a.values).enumerate() {
        let (x, y) = (i % e.width, i / e.width);
        if v > 1 {
            violations.push(Violation::NonBinary { x, y, value: v });
        }
        // f32 rounds π up, so the upper bound compares against π as stored
        if v != 0 && !(theta > -pi && theta <= pi) {
            violations.push(Violation::AngleOutOfRange { x, y, value: theta });
        }
    }
    ValidationReport { violations }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn wrap_examples() {
        assert!((wrap_angle(PI / 4.0) - PI / 4.0).abs() < 1e-15);
        assert!((wrap_angle(1.5 * PI) + FRAC_PI_2).abs() < 1e-15);
        assert_eq!(wrap_angle(-PI), PI);
        assert_eq!(wrap_angle(PI), PI);
        assert_eq!(wrap_angle(3.0 * PI), PI);
    }

    #[test]
    fn horizontal_segment_foreground_above() {
        let b = OcclusionBoundary::new(vec![Point::new(2.0, 5.0), Point::new(12.0, 5.0)], Side::Left).unwrap();
        let (e, a) = rasterize_boundary(&b, 16, 10).unwrap();
        assert_eq!(e.count(), 11);
        for (x, y) in e.pixels() {
            assert_eq!(y, 5);
            assert_eq!(a.get(x, y), 0.0);
        }
    }

    #[test]
    fn vertical_segment_bottom_to_top_foreground_west() {
        let b = OcclusionBoundary::new(vec![Point::new(4.0, 9.0), Point::new(4.0, 1.0)], Side::Left).unwrap();
        let (e, a) = rasterize_boundary(&b, 8, 12).unwrap();
        assert_eq!(e.count(), 9);
        for (x, y) in e.pixels() {
            assert_eq!(x, 4);
            assert!((a.get(x, y) as f64 - FRAC_PI_2).abs() < 1e-6);
        }
    }

    #[test]
    fn closed_polyline_uses_outgoing_tangent_at_start() {
        let sq = vec![
            Point::new(2.0, 2.0),
            Point::new(2.0, 8.0),
            Point::new(8.0, 8.0),
            Point::new(8.0, 2.0),
            Point::new(2.0, 2.0),
        ];
        let b = OcclusionBoundary::new(sq, Side::Left).unwrap();
        let (e, a) = rasterize_boundary(&b, 10, 10).unwrap();
        assert_eq!(e.count(), 24);
        // first segment heads down the image (south): -π/2
        assert!((a.get(2, 2) as f64 + FRAC_PI_2).abs() < 1e-6);
        // second vertex belongs to the eastward segment
        assert_eq!(a.get(2, 8), 0.0);
    }

    #[test]
    fn boundary_rejects_degenerate_input() {
        assert!(OcclusionBoundary::new(vec![Point::new(0.0, 0.0)], Side::Left).is_err());
        let p = Point::new(1.0, 1.0);
        assert!(OcclusionBoundary::new(vec![p, p], Side::Left).is_err());
        let off = OcclusionBoundary::new(vec![Point::new(-5.0, -5.0), Point::new(-9.0, -5.0)], Side::Left).unwrap();
        assert!(rasterize_boundary(&off, 4, 4).is_err());
    }

    #[test]
    fn validation_examples() {
        let b = OcclusionBoundary::new(vec![Point::new(0.0, 1.0), Point::new(3.0, 1.0)], Side::Left).unwrap();
        let (e, mut a) = rasterize_boundary(&b, 4, 3).unwrap();
        assert!(validate_pair(&e, &a).is_valid());

        a.set(2, 1, 4.0);
        let r = validate_pair(&e, &a);
        assert_eq!(r.violations, vec![Violation::AngleOutOfRange { x: 2, y: 1, value: 4.0 }]);

        a.set(2, 1, 0.0);
        a.set(0, 0, 100.0);
        assert!(validate_pair(&e, &a).is_valid());

        let raw = EdgeMap::from_raw(4, 3, vec![0, 0, 0, 0, 2, 0, 0, 0, 0, 0, 0, 0]).unwrap();
        assert_eq!(validate_pair(&raw, &OrientationMap::new(4, 3)).violations.len(), 1);
        assert!(matches!(
            validate_pair(&raw, &OrientationMap::new(3, 3)).violations[0],
            Violation::Extent { .. }
        ));
    }

    #[test]
    fn counter_clockwise_circle_keeps_interior_on_the_left() {
        let (cx, cy, r) = (20.0, 18.0, 11.0);
        let n = 96;
        let mut pts: Vec<Point> = (0..n)
            .map(|k| {
                let phi = 2.0 * PI * k as f64 / n as f64;
                Point::new(cx + r * phi.cos(), cy - r * phi.sin())
            })
            .collect();
        pts.push(pts[0]);
        let b = OcclusionBoundary::new(pts, Side::Left).unwrap();
        let (e, a) = rasterize_boundary(&b, 40, 40).unwrap();
        let right = (cx + r) as usize;
        assert!((a.get(right, cy as usize) as f64 - FRAC_PI_2).abs() < 0.1);
        for (x, y) in e.pixels() {
            let theta = a.get(x, y) as f64;
            let (tx, ty) = (theta.cos(), theta.sin());
            // inward normal in the y-up frame
            let (nx, ny) = (cx - x as f64, -(cy - y as f64));
            assert!(tx * ny - ty * nx > 0.0, "interior not on the left at ({x},{y})");
        }
    }

    proptest! {
        #[test]
        fn wrap_is_idempotent_and_periodic(x in -1e3f64..1e3, k in -50i32..50) {
            let w = wrap_angle(x);
            prop_assert!(w > -PI && w <= PI);
            prop_assert_eq!(wrap_angle(w), w);
            let shifted = wrap_angle(x + 2.0 * PI * k as f64);
            // equal modulo floating error, compared on the circle
            let d = wrap_angle(shifted - w).abs();
            prop_assert!(d < 1e-9 || (2.0 * PI - d) < 1e-9);
        }

        #[test]
        fn flipping_foreground_rotates_by_pi(
            pts in proptest::collection::vec((0.0f64..30.0, 0.0f64..30.0), 2..8),
        ) {
            let points: Vec<Point> = pts.iter().map(|&(x, y)| Point::new(x, y)).collect();
            prop_assume!(points.windows(2).all(|w| w[0] != w[1]));
            let b = OcclusionBoundary::new(points, Side::Left).unwrap();
            let (e1, a1) = rasterize_boundary(&b, 32, 32).unwrap();
            let (e2, a2) = rasterize_boundary(&b.flipped(), 32, 32).unwrap();
            prop_assert_eq!(&e1, &e2);
            for (x, y) in e1.pixels() {
                let d = wrap_angle(a2.get(x, y) as f64 - a1.get(x, y) as f64);
                prop_assert!((d.abs() - PI).abs() < 1e-5);
            }
            prop_assert!(validate_pair(&e1, &a1).is_valid());
            prop_assert!(validate_pair(&e2, &a2).is_valid());
        }
    }
}
