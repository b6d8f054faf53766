//! Procedural occlusion scenes: opaque shapes in depth order over a textured
//! background, with optional cast shadows, plus exact edge and orientation
//! ground truth.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageFormat, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::evaluation::thin_edges;
use crate::occlusion::{store_angle, trace_boundary, EdgeMap, OcclusionBoundary, OrientationMap, Point, Side};
use crate::tensor::{Shape, Tensor};

/// Vertices used to approximate a disc.
const DISC_VERTICES: usize = 64;
/// Attempts at drawing a usable shape before giving up on the scene.
const MAX_RETRIES: usize = 32;
/// Minimum per-channel colour separation between any two surfaces.
const MIN_CONTRAST: f64 = 0.3;
/// Noise lattice spacing in pixels.
const NOISE_CELL: f64 = 16.0;
/// Shapes carry this fraction of the scene's texture amplitude.
const SHAPE_TEXTURE: f64 = 0.5;
/// Brightness kept under one shadow layer (50% opacity black).
const SHADOW_KEEP: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKinds {
    Disc,
    Polygon,
    Mixed,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    /// 1 to 5.
    pub num_shapes: usize,
    pub kinds: ShapeKinds,
    /// Texture amplitude in `[0, 1]`.
    pub texture: f64,
    /// Shadow offset in pixels `(dx, drow)`, or no shadows.
    pub shadow: Option<(f64, f64)>,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width < 8 || self.height < 8 {
            return Err(Error::Invalid(format!("canvas {}x{} is too small", self.width, self.height)));
        }
        if !(1..=5).contains(&self.num_shapes) {
            return Err(Error::Invalid(format!("num_shapes must be 1..=5, got {}", self.num_shapes)));
        }
        if !(0.0..=1.0).contains(&self.texture) {
            return Err(Error::Invalid(format!("texture amplitude {} outside [0, 1]", self.texture)));
        }
        if let Some((dx, dy)) = self.shadow {
            if !(dx.is_finite() && dy.is_finite()) {
                return Err(Error::Invalid("shadow offset must be finite".into()));
            }
        }
        Ok(())
    }
}

/// A rendered scene with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub width: usize,
    pub height: usize,
    /// Interleaved 8-bit RGB, row-major.
    pub rgb: Vec<u8>,
    pub edges: EdgeMap,
    pub orientation: OrientationMap,
    /// Visible shadow-boundary pixels away from any occlusion edge.
    pub shadow_edges: EdgeMap,
}

impl Scene {
    /// `1 x 3 x H x W` with values in `[0, 1]`.
    pub fn image(&self) -> Tensor<f32> {
        rgb_to_tensor(&self.rgb, self.width, self.height)
    }
}

pub fn rgb_to_tensor(rgb: &[u8], width: usize, height: usize) -> Tensor<f32> {
    let plane = width * height;
    let mut data = vec![0.0f32; 3 * plane];
    for (i, px) in rgb.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * plane + i] = f32::from(px[c]) / 255.0;
        }
    }
    Tensor::from_vec(Shape::new(1, 3, height, width), data).expect("rgb length")
}

/// Closed polygon traversed counter-clockwise on screen, so the interior is
/// on the left of every segment.
struct Outline {
    points: Vec<Point>,
}

impl Outline {
    fn disc(cx: f64, cy: f64, r: f64) -> Self {
        Self::star(cx, cy, &vec![r; DISC_VERTICES], 0.0)
    }

    /// Vertices at evenly spaced angles with per-vertex radii.
    fn star(cx: f64, cy: f64, radii: &[f64], phase: f64) -> Self {
        let n = radii.len();
        let mut points: Vec<Point> = radii
            .iter()
            .enumerate()
            .map(|(k, &r)| {
                let t = phase + 2.0 * PI * k as f64 / n as f64;
                // y-up angle increases counter-clockwise; rows grow downward
                Point::new(cx + r * t.cos(), cy - r * t.sin())
            })
            .collect();
        points.push(points[0]);
        Self { points }
    }

    fn shifted(&self, dx: f64, dy: f64) -> Self {
        Self {
            points: self.points.iter().map(|p| Point::new(p.x + dx, p.y + dy)).collect(),
        }
    }

    fn boundary(&self) -> Result<OcclusionBoundary> {
        OcclusionBoundary::new(self.points.clone(), Side::Left)
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        let mut inside = false;
        for w in self.points.windows(2) {
            let (a, b) = (w[0], w[1]);
            if (a.y > y) != (b.y > y) {
                let t = (y - a.y) / (b.y - a.y);
                if x < a.x + t * (b.x - a.x) {
                    inside = !inside;
                }
            }
        }
        inside
    }

    /// Pixel centres inside the polygon plus the rasterized outline.
    fn mask(&self, width: usize, height: usize) -> Result<Vec<bool>> {
        let mut m = vec![false; width * height];
        for y in 0..height {
            for x in 0..width {
                m[y * width + x] = self.contains(x as f64, y as f64);
            }
        }
        trace_boundary(&self.boundary()?, |x, y, _| {
            if let Some(i) = index(x, y, width, height) {
                m[i] = true;
            }
        });
        Ok(m)
    }
}

fn index(x: i64, y: i64, width: usize, height: usize) -> Option<usize> {
    (x >= 0 && y >= 0 && (x as usize) < width && (y as usize) < height).then(|| y as usize * width + x as usize)
}

/// Smooth value noise in `[-1, 1]` on a coarse lattice.
struct ValueNoise {
    cols: usize,
    lattice: Vec<f64>,
}

impl ValueNoise {
    fn new(rng: &mut ChaCha8Rng, width: usize, height: usize) -> Self {
        let cols = (width as f64 / NOISE_CELL).ceil() as usize + 2;
        let rows = (height as f64 / NOISE_CELL).ceil() as usize + 2;
        let lattice = (0..cols * rows).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Self { cols, lattice }
    }

    fn at(&self, x: usize, y: usize) -> f64 {
        let fx = x as f64 / NOISE_CELL;
        let fy = y as f64 / NOISE_CELL;
        let (ix, iy) = (fx.floor() as usize, fy.floor() as usize);
        let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
        let (tx, ty) = (smooth(fx.fract()), smooth(fy.fract()));
        let v = |i: usize, j: usize| self.lattice[j * self.cols + i];
        let top = v(ix, iy) * (1.0 - tx) + v(ix + 1, iy) * tx;
        let bottom = v(ix, iy + 1) * (1.0 - tx) + v(ix + 1, iy + 1) * tx;
        top * (1.0 - ty) + bottom * ty
    }
}

struct Surface {
    color: [f64; 3],
    noise: ValueNoise,
    amplitude: f64,
}

impl Surface {
    fn shade(&self, x: usize, y: usize) -> [f64; 3] {
        let k = 1.0 + 0.35 * self.amplitude * self.noise.at(x, y);
        self.color.map(|c| (c * k).clamp(0.0, 1.0))
    }
}

fn random_color(rng: &mut ChaCha8Rng, others: &[[f64; 3]]) -> Option<[f64; 3]> {
    for _ in 0..MAX_RETRIES {
        let c = [rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)];
        let far = others
            .iter()
            .all(|o| o.iter().zip(&c).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) >= MIN_CONTRAST);
        if far {
            return Some(c);
        }
    }
    None
}

fn random_outline(rng: &mut ChaCha8Rng, kinds: ShapeKinds, width: usize, height: usize) -> Outline {
    let extent = width.min(height) as f64;
    let disc = match kinds {
        ShapeKinds::Disc => true,
        ShapeKinds::Polygon => false,
        ShapeKinds::Mixed => rng.gen_bool(0.5),
    };
    let r = rng.gen_range(0.12 * extent..0.28 * extent);
    let cx = rng.gen_range(0.1 * width as f64..0.9 * width as f64);
    let cy = rng.gen_range(0.1 * height as f64..0.9 * height as f64);
    if disc {
        Outline::disc(cx, cy, r)
    } else {
        let n = rng.gen_range(3..=7);
        let radii: Vec<f64> = (0..n).map(|_| r * rng.gen_range(0.6..1.0)).collect();
        Outline::star(cx, cy, &radii, rng.gen_range(0.0..2.0 * PI))
    }
}

const BACKGROUND: usize = usize::MAX;

/// Renders one scene. Identical specs give bit-identical scenes.
pub fn generate_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let (w, h) = (spec.width, spec.height);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let bg_color = random_color(&mut rng, &[]).expect("first colour always accepted");
    let background = Surface {
        color: bg_color,
        noise: ValueNoise::new(&mut rng, w, h),
        amplitude: spec.texture,
    };

    let mut outlines = Vec::with_capacity(spec.num_shapes);
    let mut surfaces = Vec::with_capacity(spec.num_shapes);
    let mut masks = Vec::with_capacity(spec.num_shapes);
    let mut colors = vec![bg_color];
    for _ in 0..spec.num_shapes {
        let mut placed = false;
        for _ in 0..MAX_RETRIES {
            let outline = random_outline(&mut rng, spec.kinds, w, h);
            let mask = outline.mask(w, h)?;
            // Zero area after clipping, or too thin to carry an interior.
            if mask.iter().filter(|&&m| m).count() < 9 {
                continue;
            }
            let Some(color) = random_color(&mut rng, &colors) else {
                continue;
            };
            colors.push(color);
            surfaces.push(Surface {
                color,
                noise: ValueNoise::new(&mut rng, w, h),
                amplitude: spec.texture * SHAPE_TEXTURE,
            });
            outlines.push(outline);
            masks.push(mask);
            placed = true;
            break;
        }
        if !placed {
            return Err(Error::Invalid(format!(
                "scene {}: no usable shape after {MAX_RETRIES} attempts",
                spec.seed
            )));
        }
    }

    // Paint back to front, tracking which surface owns each pixel and how
    // many shadow layers darken it.
    let mut label = vec![BACKGROUND; w * h];
    let mut shade = vec![0u32; w * h];
    for (s, (outline, mask)) in outlines.iter().zip(&masks).enumerate() {
        if let Some((dx, dy)) = spec.shadow {
            let shadow = outline.shifted(dx, dy).mask(w, h)?;
            for (i, &on) in shadow.iter().enumerate() {
                if on && !mask[i] {
                    shade[i] += 1;
                }
            }
        }
        for (i, &on) in mask.iter().enumerate() {
            if on {
                label[i] = s;
                shade[i] = 0;
            }
        }
    }

    let mut rgb = vec![0u8; 3 * w * h];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let surface = if label[i] == BACKGROUND { &background } else { &surfaces[label[i]] };
            let keep = SHADOW_KEEP.powi(shade[i] as i32);
            for (c, v) in surface.shade(x, y).iter().enumerate() {
                rgb[3 * i + c] = (v * keep * 255.0).round() as u8;
            }
        }
    }

    let differs = |i: usize, x: usize, y: usize, field: &[usize]| {
        neighbors8(x, y, w, h).any(|j| field[j] != field[i])
    };
    let mut edges = EdgeMap::new(w, h);
    let mut orientation = OrientationMap::new(w, h);
    for (s, outline) in outlines.iter().enumerate() {
        trace_boundary(&outline.boundary()?, |x, y, theta| {
            let Some(i) = index(x, y, w, h) else { return };
            let (ux, uy) = (x as usize, y as usize);
            if label[i] == s && differs(i, ux, uy, &label) {
                edges.set(ux, uy, true);
                orientation.set(ux, uy, store_angle(theta));
            }
        });
    }
    // Redundant staircase corners would be removed by the evaluator's
    // thinning, so the ground truth is stored already thinned.
    let edges = thin_edges(&edges);
    for (i, &on) in edges.values().iter().enumerate() {
        if on == 0 {
            orientation.set(i % w, i / w, 0.0);
        }
    }

    let mut shadow_edges = EdgeMap::new(w, h);
    if spec.shadow.is_some() {
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                if shade[i] == 0 {
                    continue;
                }
                let step = neighbors4(x, y, w, h).any(|j| label[j] == label[i] && shade[j] != shade[i]);
                let near_edge = neighbors8(x, y, w, h).chain(std::iter::once(i)).any(|j| edges.values()[j] != 0);
                if step && !near_edge {
                    shadow_edges.set(x, y, true);
                }
            }
        }
    }

    Ok(Scene {
        width: w,
        height: h,
        rgb,
        edges,
        orientation,
        shadow_edges,
    })
}

fn neighbors8(x: usize, y: usize, w: usize, h: usize) -> impl Iterator<Item = usize> {
    (-1i64..=1)
        .flat_map(move |dy| (-1i64..=1).map(move |dx| (dx, dy)))
        .filter(|&d| d != (0, 0))
        .filter_map(move |(dx, dy)| index(x as i64 + dx, y as i64 + dy, w, h))
}

fn neighbors4(x: usize, y: usize, w: usize, h: usize) -> impl Iterator<Item = usize> {
    [(1i64, 0i64), (-1, 0), (0, 1), (0, -1)]
        .into_iter()
        .filter_map(move |(dx, dy)| index(x as i64 + dx, y as i64 + dy, w, h))
}

/// How scene parameters are drawn for a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneMix {
    pub width: usize,
    pub height: usize,
    pub max_shapes: usize,
    pub kinds: ShapeKinds,
    /// Texture amplitude is uniform in `[0, texture_max]`.
    pub texture_max: f64,
    /// Probability that a scene casts shadows.
    pub shadow_probability: f64,
    /// Shadow offsets have length uniform in this range (pixels).
    pub shadow_distance: (f64, f64),
}

impl Default for SceneMix {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            max_shapes: 4,
            kinds: ShapeKinds::Mixed,
            texture_max: 0.6,
            shadow_probability: 0.5,
            shadow_distance: (2.0, 5.0),
        }
    }
}

/// Deterministic sequence of scene specs from one master seed.
pub fn scene_specs(master_seed: u64, count: usize, mix: &SceneMix) -> Vec<SceneSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    (0..count)
        .map(|_| {
            let seed = rng.gen();
            let num_shapes = rng.gen_range(1..=mix.max_shapes.clamp(1, 5));
            let texture = if mix.texture_max > 0.0 {
                rng.gen_range(0.0..=mix.texture_max)
            } else {
                0.0
            };
            let shadow = rng.gen_bool(mix.shadow_probability.clamp(0.0, 1.0)).then(|| {
                let d = rng.gen_range(mix.shadow_distance.0..=mix.shadow_distance.1);
                let a = rng.gen_range(0.0..2.0 * PI);
                (d * a.cos(), d * a.sin())
            });
            SceneSpec {
                seed,
                width: mix.width,
                height: mix.height,
                num_shapes,
                kinds: mix.kinds,
                texture,
                shadow,
            }
        })
        .collect()
}

/// One loaded dataset entry.
#[derive(Clone, Debug)]
pub struct Sample {
    pub name: String,
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
    pub edges: EdgeMap,
    pub orientation: OrientationMap,
    pub shadow_edges: Option<EdgeMap>,
}

impl Sample {
    pub fn image(&self) -> Tensor<f32> {
        rgb_to_tensor(&self.rgb, self.width, self.height)
    }
}

pub const MANIFEST_NAME: &str = "manifest.txt";
const MANIFEST_HEADER: &str = "# occedge dataset: name image edges orientation shadow_edges";

fn save_ppm(rgb: &[u8], width: usize, height: usize, path: &Path) -> Result<()> {
    let img = RgbImage::from_raw(width as u32, height as u32, rgb.to_vec())
        .ok_or_else(|| Error::Invalid("rgb buffer does not match extents".into()))?;
    img.save_with_format(path, ImageFormat::Pnm)
        .map_err(|e| Error::format(path, e.to_string()))
}

fn load_ppm(path: &Path) -> Result<(Vec<u8>, usize, usize)> {
    let img = image::open(path).map_err(|e| Error::format(path, e.to_string()))?.to_rgb8();
    let (w, h) = img.dimensions();
    Ok((img.into_raw(), w as usize, h as usize))
}

/// Generates and writes every scene; returns the manifest path.
pub fn write_dataset(specs: &[SceneSpec], out_dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut manifest = format!("{MANIFEST_HEADER}\n");
    for (k, spec) in specs.iter().enumerate() {
        let scene = generate_scene(spec)?;
        let name = format!("scene_{k:05}");
        let files = [
            format!("{name}.ppm"),
            format!("{name}_edges.pgm"),
            format!("{name}_orient.octk"),
            format!("{name}_shadow.pgm"),
        ];
        save_ppm(&scene.rgb, scene.width, scene.height, &out_dir.join(&files[0]))?;
        scene.edges.save_pgm(&out_dir.join(&files[1]))?;
        scene.orientation.save(&out_dir.join(&files[2]))?;
        let shadow = if spec.shadow.is_some() {
            scene.shadow_edges.save_pgm(&out_dir.join(&files[3]))?;
            files[3].as_str()
        } else {
            "-"
        };
        writeln!(manifest, "{name} {} {} {} {shadow}", files[0], files[1], files[2]).expect("string write");
    }
    let path = out_dir.join(MANIFEST_NAME);
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Loaded samples and the entries that failed, by manifest line.
#[derive(Debug, Default)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub errors: Vec<(usize, Error)>,
}

fn read_entry(dir: &Path, fields: &[&str]) -> Result<Sample> {
    let [name, image, edges, orient, shadow] = fields else {
        return Err(Error::Invalid(format!("expected 5 fields, found {}", fields.len())));
    };
    let (rgb, width, height) = load_ppm(&dir.join(image))?;
    let edges = EdgeMap::load_pgm(&dir.join(edges))?;
    let orientation = OrientationMap::load(&dir.join(orient))?;
    let shadow_edges = match *shadow {
        "-" => None,
        file => Some(EdgeMap::load_pgm(&dir.join(file))?),
    };
    let extents = (width, height);
    if (edges.width(), edges.height()) != extents || (orientation.width(), orientation.height()) != extents {
        return Err(Error::Invalid(format!("{name}: map extents differ from the {width}x{height} image")));
    }
    Ok(Sample {
        name: name.to_string(),
        width,
        height,
        rgb,
        edges,
        orientation,
        shadow_edges,
    })
}

/// Reads a manifest. Only an unreadable manifest is an error; broken entries
/// are collected in [`Dataset::errors`] while the rest load.
pub fn read_dataset(manifest: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
    let dir = manifest.parent().unwrap_or(Path::new("."));
    let mut out = Dataset::default();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        match read_entry(dir, &fields) {
            Ok(s) => out.samples.push(s),
            Err(e) => out.errors.push((lineno + 1, e)),
        }
    }
    Ok(out)
}
