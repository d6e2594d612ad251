//! Synthetic LiDAR-like driving scenes, their BEV statistics and Gaussian
//! center targets.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const NUM_CLASSES: usize = 3;
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["vehicle", "pedestrian", "barrier"];
/// Nominal (l, w, h) in meters per class.
pub const CLASS_SIZES: [[f64; 3]; NUM_CLASSES] = [[4.2, 1.8, 1.6], [0.7, 0.7, 1.75], [2.0, 0.5, 1.0]];
const CLASS_INTENSITY: [f64; NUM_CLASSES] = [0.8, 0.45, 0.65];
/// Statistic channels produced by [`bev_statistics`].
pub const BEV_STAT_CHANNELS: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    /// World coordinates of the corner of cell (0, 0).
    pub origin: [f64; 2],
    pub cell_size: f64,
    /// `[H, W]`: rows follow y, columns follow x.
    pub extents: [usize; 2],
    pub z_range: [f64; 2],
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            origin: [-19.2, -19.2],
            cell_size: 0.6,
            extents: [64, 64],
            z_range: [-1.0, 4.0],
        }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        let [h, w] = self.extents;
        if !(self.cell_size > 0.0 && self.cell_size.is_finite()) {
            return Err(Error::Config(format!("cell_size must be positive, got {}", self.cell_size)));
        }
        if h == 0 || w == 0 || h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Config(format!("grid extents {h}×{w} must be even and non-zero")));
        }
        if self.z_range[0] >= self.z_range[1] {
            return Err(Error::Config(format!("empty z range {:?}", self.z_range)));
        }
        Ok(())
    }

    pub fn height(&self) -> usize {
        self.extents[0]
    }

    pub fn width(&self) -> usize {
        self.extents[1]
    }

    pub fn cells(&self) -> usize {
        self.extents[0] * self.extents[1]
    }

    /// World extent `[x_max, y_max]` of the far grid corner.
    pub fn far_corner(&self) -> [f64; 2] {
        [
            self.origin[0] + self.extents[1] as f64 * self.cell_size,
            self.origin[1] + self.extents[0] as f64 * self.cell_size,
        ]
    }

    /// `(row, col)` containing the point, if inside the grid.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let c = ((x - self.origin[0]) / self.cell_size).floor();
        let r = ((y - self.origin[1]) / self.cell_size).floor();
        if c < 0.0 || r < 0.0 || !c.is_finite() || !r.is_finite() {
            return None;
        }
        let (r, c) = (r as usize, c as usize);
        (r < self.extents[0] && c < self.extents[1]).then_some((r, c))
    }

    pub fn cell_center(&self, row: usize, col: usize) -> [f64; 2] {
        [
            self.origin[0] + (col as f64 + 0.5) * self.cell_size,
            self.origin[1] + (row as f64 + 0.5) * self.cell_size,
        ]
    }
}

/// An oriented box standing on the ground plane.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub center: [f64; 3],
    /// `(l, w, h)`, length along the heading.
    pub size: [f64; 3],
    pub yaw: f64,
    pub class_id: usize,
    pub score: f64,
}

impl Box3D {
    /// Radius of the footprint's circumscribed circle.
    pub fn footprint_radius(&self) -> f64 {
        0.5 * self.size[0].hypot(self.size[1])
    }

    pub fn bev_distance(&self, other: &Box3D) -> f64 {
        (self.center[0] - other.center[0]).hypot(self.center[1] - other.center[1])
    }
}

/// Wraps an angle into `[-π, π)`.
pub fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::PI;
    let w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w >= PI {
        -PI
    } else {
        w
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Easy,
    Weak,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub grid: GridSpec,
    /// Inclusive range of objects per scene.
    pub num_objects: [usize; 2],
    /// Relative class frequencies.
    pub class_mix: [f64; NUM_CLASSES],
    pub weak_fraction: f64,
    /// Surface point density (points/m²) at `reference_range` and closer.
    pub density: f64,
    pub reference_range: f64,
    /// Density multiplier for weak objects.
    pub weak_factor: f64,
    pub clutter_points: usize,
    /// Relative jitter applied to the nominal class sizes.
    pub size_jitter: f64,
    pub max_retries: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            grid: GridSpec::default(),
            num_objects: [6, 12],
            class_mix: [0.5, 0.25, 0.25],
            weak_fraction: 0.3,
            density: 12.0,
            reference_range: 5.0,
            weak_factor: 0.1,
            clutter_points: 600,
            size_jitter: 0.1,
            max_retries: 200,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        let bad = |m: &str| Err(Error::Config(format!("scene spec: {m}")));
        if self.num_objects[0] > self.num_objects[1] {
            return bad("num_objects range is empty");
        }
        if self.class_mix.iter().any(|w| !(*w >= 0.0)) || self.class_mix.iter().sum::<f64>() <= 0.0 {
            return bad("class_mix must be non-negative with a positive sum");
        }
        if !(0.0..=1.0).contains(&self.weak_fraction) {
            return bad("weak_fraction must lie in [0, 1]");
        }
        if !(self.density > 0.0 && self.reference_range > 0.0 && self.weak_factor > 0.0) {
            return bad("density, reference_range and weak_factor must be positive");
        }
        if !(0.0..0.5).contains(&self.size_jitter) {
            return bad("size_jitter must lie in [0, 0.5)");
        }
        Ok(())
    }
}

/// One placed object before point sampling.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectSpec {
    pub gt: Box3D,
    pub difficulty: Difficulty,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    /// `(x, y, z, intensity)`.
    pub points: Vec<[f32; 4]>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub grid: GridSpec,
    pub seed: u64,
    pub cloud: PointCloud,
    pub boxes: Vec<Box3D>,
    pub difficulty: Vec<Difficulty>,
}

fn surface_area(size: [f64; 3]) -> f64 {
    let [l, w, h] = size;
    2.0 * (l + w) * h + l * w
}

/// Points an object receives: area × density, attenuated by the square of
/// its range beyond the reference range, never fewer than one.
pub fn expected_point_count(obj: &ObjectSpec, spec: &SceneSpec) -> usize {
    let r = obj.gt.center[0].hypot(obj.gt.center[1]);
    let falloff = (spec.reference_range / r.max(spec.reference_range)).powi(2);
    let factor = match obj.difficulty {
        Difficulty::Easy => 1.0,
        Difficulty::Weak => spec.weak_factor,
    };
    ((surface_area(obj.gt.size) * spec.density * factor * falloff).round() as usize).max(1)
}

/// Samples points uniformly over the four sides and the top of the box.
pub fn sample_object_points<R: Rng>(obj: &ObjectSpec, spec: &SceneSpec, rng: &mut R) -> Vec<[f32; 4]> {
    let b = &obj.gt;
    let [l, w, h] = b.size;
    let faces = [l * h, l * h, w * h, w * h, l * w];
    let total: f64 = faces.iter().sum();
    let (s, c) = b.yaw.sin_cos();
    let base = CLASS_INTENSITY[b.class_id];
    let n = expected_point_count(obj, spec);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut pick = rng.gen::<f64>() * total;
        let mut face = faces.len() - 1;
        for (i, a) in faces.iter().enumerate() {
            if pick < *a {
                face = i;
                break;
            }
            pick -= a;
        }
        let u: f64 = rng.gen_range(-0.5..0.5);
        let v: f64 = rng.gen_range(-0.5..0.5);
        // box-frame coordinates, z measured from the box center
        let (lx, ly, lz) = match face {
            0 => (u * l, 0.5 * w, v * h),
            1 => (u * l, -0.5 * w, v * h),
            2 => (0.5 * l, u * w, v * h),
            3 => (-0.5 * l, u * w, v * h),
            _ => (u * l, v * w, 0.5 * h),
        };
        let x = b.center[0] + c * lx - s * ly;
        let y = b.center[1] + s * lx + c * ly;
        let z = b.center[2] + lz;
        let intensity = (base + rng.gen_range(-0.1..0.1)).clamp(0.0, 1.0);
        out.push([x as f32, y as f32, z as f32, intensity as f32]);
    }
    out
}

fn pick_class<R: Rng>(mix: &[f64; NUM_CLASSES], rng: &mut R) -> usize {
    let total: f64 = mix.iter().sum();
    let mut t = rng.gen::<f64>() * total;
    for (i, w) in mix.iter().enumerate() {
        if t < *w {
            return i;
        }
        t -= w;
    }
    mix.iter().rposition(|w| *w > 0.0).unwrap_or(0)
}

/// Places objects without footprint overlap, fully inside the grid.
pub fn place_objects<R: Rng>(spec: &SceneSpec, rng: &mut R) -> Result<Vec<ObjectSpec>> {
    let g = &spec.grid;
    let [lo, hi] = spec.num_objects;
    let count = rng.gen_range(lo..=hi);
    let far = g.far_corner();
    let mut placed: Vec<ObjectSpec> = Vec::with_capacity(count);
    for k in 0..count {
        let class_id = pick_class(&spec.class_mix, rng);
        let nominal = CLASS_SIZES[class_id];
        let mut size = [0.0; 3];
        for (s, n) in size.iter_mut().zip(nominal) {
            *s = n * (1.0 + rng.gen_range(-spec.size_jitter..=spec.size_jitter));
        }
        let yaw = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
        let difficulty = if rng.gen::<f64>() < spec.weak_fraction {
            Difficulty::Weak
        } else {
            Difficulty::Easy
        };
        let radius = 0.5 * size[0].hypot(size[1]);
        let mut ok = None;
        for _ in 0..spec.max_retries.max(1) {
            if far[0] - g.origin[0] <= 2.0 * radius || far[1] - g.origin[1] <= 2.0 * radius {
                break;
            }
            let x = rng.gen_range(g.origin[0] + radius..far[0] - radius);
            let y = rng.gen_range(g.origin[1] + radius..far[1] - radius);
            let free = placed
                .iter()
                .all(|o| (o.gt.center[0] - x).hypot(o.gt.center[1] - y) > o.gt.footprint_radius() + radius);
            if free {
                ok = Some((x, y));
                break;
            }
        }
        let (x, y) = ok.ok_or_else(|| {
            Error::Scene(format!(
                "object {k} ({}) unplaceable after {} retries",
                CLASS_NAMES[class_id], spec.max_retries
            ))
        })?;
        placed.push(ObjectSpec {
            gt: Box3D {
                center: [x, y, 0.5 * size[2]],
                size,
                yaw,
                class_id,
                score: 1.0,
            },
            difficulty,
        });
    }
    Ok(placed)
}

pub fn sample_clutter<R: Rng>(spec: &SceneSpec, rng: &mut R) -> Vec<[f32; 4]> {
    let g = &spec.grid;
    let far = g.far_corner();
    (0..spec.clutter_points)
        .map(|_| {
            [
                rng.gen_range(g.origin[0]..far[0]) as f32,
                rng.gen_range(g.origin[1]..far[1]) as f32,
                rng.gen_range(-0.2..2.0) as f32,
                rng.gen_range(0.0..0.3) as f32,
            ]
        })
        .collect()
}

/// Deterministic in `(spec, seed)`.
pub fn generate_scene(spec: &SceneSpec, seed: u64) -> Result<Scene> {
    spec.validate()?;
    let mut r = rng::seeded(seed);
    let objects = place_objects(spec, &mut r)?;
    let mut points = Vec::new();
    for o in &objects {
        points.extend(sample_object_points(o, spec, &mut r));
    }
    points.extend(sample_clutter(spec, &mut r));
    Ok(Scene {
        grid: spec.grid,
        seed,
        cloud: PointCloud { points },
        boxes: objects.iter().map(|o| o.gt).collect(),
        difficulty: objects.iter().map(|o| o.difficulty).collect(),
    })
}

/// Per-cell statistics of a cloud.
#[derive(Clone, Debug, PartialEq)]
pub struct BevStatistics<T> {
    /// `[H, W, 5]`: log(1+count), mean z, max z, mean intensity, occupancy.
    pub features: Tensor<T>,
    pub points_in: usize,
    pub dropped: usize,
}

/// Points outside the grid or its z range are dropped and counted.
pub fn bev_statistics<T: Scalar>(pc: &PointCloud, grid: &GridSpec) -> BevStatistics<T> {
    let (h, w) = (grid.height(), grid.width());
    let mut count = vec![0usize; h * w];
    let mut zsum = vec![0.0f64; h * w];
    let mut zmax = vec![f64::NEG_INFINITY; h * w];
    let mut isum = vec![0.0f64; h * w];
    let mut dropped = 0;
    for p in &pc.points {
        let [x, y, z, i] = p.map(f64::from);
        let cell = grid.cell_of(x, y).filter(|_| z >= grid.z_range[0] && z <= grid.z_range[1]);
        match cell {
            Some((r, c)) => {
                let k = r * w + c;
                count[k] += 1;
                zsum[k] += z;
                zmax[k] = zmax[k].max(z);
                isum[k] += i;
            }
            None => dropped += 1,
        }
    }
    let mut data = Vec::with_capacity(h * w * BEV_STAT_CHANNELS);
    for k in 0..h * w {
        let n = count[k];
        if n == 0 {
            data.extend([T::zero(); BEV_STAT_CHANNELS]);
            continue;
        }
        let nf = n as f64;
        for v in [(1.0 + nf).ln(), zsum[k] / nf, zmax[k], isum[k] / nf, 1.0] {
            data.push(T::lit(v));
        }
    }
    BevStatistics {
        features: Tensor::from_vec(&[h, w, BEV_STAT_CHANNELS], data).expect("sized by construction"),
        points_in: pc.len() - dropped,
        dropped,
    }
}

/// Gaussian width in cells for a box footprint.
pub fn gaussian_sigma(b: &Box3D, grid: &GridSpec) -> f64 {
    (b.size[0].min(b.size[1]) / (3.0 * grid.cell_size)).max(1.0)
}

/// Per-class `[H, W, classes]` grid of max-combined Gaussians around each
/// box's center cell. Boxes whose center lies outside the grid are skipped.
pub fn gaussian_heatmap_targets<T: Scalar>(boxes: &[Box3D], grid: &GridSpec, classes: usize) -> Tensor<T> {
    let (h, w) = (grid.height(), grid.width());
    let mut out = vec![0.0f64; h * w * classes];
    for b in boxes {
        let Some((r0, c0)) = grid.cell_of(b.center[0], b.center[1]) else {
            continue;
        };
        if b.class_id >= classes {
            continue;
        }
        let sigma = gaussian_sigma(b, grid);
        let reach = (3.0 * sigma).ceil() as isize;
        for dr in -reach..=reach {
            for dc in -reach..=reach {
                let (r, c) = (r0 as isize + dr, c0 as isize + dc);
                if r < 0 || c < 0 || r >= h as isize || c >= w as isize {
                    continue;
                }
                let d2 = (dr * dr + dc * dc) as f64;
                let v = (-d2 / (2.0 * sigma * sigma)).exp();
                let k = (r as usize * w + c as usize) * classes + b.class_id;
                out[k] = out[k].max(v);
            }
        }
    }
    Tensor::from_vec(&[h, w, classes], out.into_iter().map(T::lit).collect()).expect("sized by construction")
}

/// Seed of scene `index` in a split; splitmix64 of the combined key.
pub fn scene_seed(master: u64, split: u64, index: u64) -> u64 {
    let mut z = master ^ split.wrapping_mul(0xA076_1D64_78BD_642F) ^ index.wrapping_mul(0xE703_7ED1_A0B4_28DB);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    fn tag(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Eval => 1,
        }
    }
}

pub fn generate_split(spec: &SceneSpec, master_seed: u64, split: Split, count: usize) -> Result<Vec<Scene>> {
    (0..count)
        .map(|i| generate_scene(spec, scene_seed(master_seed, split.tag(), i as u64)))
        .collect()
}

// ---- on-disk form ----

const SCENE_MAGIC: &[u8; 8] = b"LGESCN01";

fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("count {v} exceeds u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.buf.len() {
            return Err(Error::Format(format!("scene file truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

impl Scene {
    /// Header (magic, grid, seed, point and box counts), then `(x, y, z, i)`
    /// as little-endian `f32`, then boxes as `f64` fields plus class and
    /// difficulty words.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(64 + self.cloud.len() * 16 + self.boxes.len() * 64);
        out.extend_from_slice(SCENE_MAGIC);
        let g = &self.grid;
        for v in [g.origin[0], g.origin[1], g.cell_size] {
            put_f64(&mut out, v);
        }
        put_u32(&mut out, g.extents[0])?;
        put_u32(&mut out, g.extents[1])?;
        put_f64(&mut out, g.z_range[0]);
        put_f64(&mut out, g.z_range[1]);
        out.extend_from_slice(&self.seed.to_le_bytes());
        put_u32(&mut out, self.cloud.len())?;
        put_u32(&mut out, self.boxes.len())?;
        for p in &self.cloud.points {
            for v in p {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        for (b, d) in self.boxes.iter().zip(&self.difficulty) {
            for v in b.center.iter().chain(&b.size).chain([&b.yaw, &b.score]) {
                put_f64(&mut out, *v);
            }
            put_u32(&mut out, b.class_id)?;
            put_u32(&mut out, usize::from(*d == Difficulty::Weak))?;
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Scene> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(8)? != SCENE_MAGIC {
            return Err(Error::Format("not a scene file".into()));
        }
        let origin = [r.f64()?, r.f64()?];
        let cell_size = r.f64()?;
        let extents = [r.u32()?, r.u32()?];
        let z_range = [r.f64()?, r.f64()?];
        let grid = GridSpec {
            origin,
            cell_size,
            extents,
            z_range,
        };
        let seed = r.u64()?;
        let (np, nb) = (r.u32()?, r.u32()?);
        let mut points = Vec::with_capacity(np);
        for _ in 0..np {
            points.push([r.f32()?, r.f32()?, r.f32()?, r.f32()?]);
        }
        let mut boxes = Vec::with_capacity(nb);
        let mut difficulty = Vec::with_capacity(nb);
        for _ in 0..nb {
            let mut f = [0.0; 8];
            for v in &mut f {
                *v = r.f64()?;
            }
            let class_id = r.u32()?;
            if class_id >= NUM_CLASSES {
                return Err(Error::Format(format!("class id {class_id} out of range")));
            }
            boxes.push(Box3D {
                center: [f[0], f[1], f[2]],
                size: [f[3], f[4], f[5]],
                yaw: f[6],
                score: f[7],
                class_id,
            });
            difficulty.push(if r.u32()? == 1 { Difficulty::Weak } else { Difficulty::Easy });
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes in scene file".into()));
        }
        grid.validate()?;
        Ok(Scene {
            grid,
            seed,
            cloud: PointCloud { points },
            boxes,
            difficulty,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub master_seed: u64,
    pub spec: SceneSpec,
    pub train: Vec<String>,
    pub eval: Vec<String>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes one file per scene plus `manifest.json` into `dir`.
pub fn write_dataset(dir: &Path, manifest_seed: u64, spec: &SceneSpec, train: &[Scene], eval: &[Scene]) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    let write_split = |name: &str, scenes: &[Scene]| -> Result<Vec<String>> {
        scenes
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let file = format!("{name}_{i:05}.scene");
                fs::File::create(dir.join(&file))?.write_all(&s.to_bytes()?)?;
                Ok(file)
            })
            .collect()
    };
    let manifest = Manifest {
        master_seed: manifest_seed,
        spec: spec.clone(),
        train: write_split("train", train)?,
        eval: write_split("eval", eval)?,
    };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    Ok(serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?)
}

pub fn read_split(dir: &Path, files: &[String]) -> Result<Vec<Scene>> {
    files
        .iter()
        .map(|f| {
            let path: PathBuf = dir.join(f);
            Scene::from_bytes(&fs::read(&path)?)
                .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obj(x: f64, y: f64, difficulty: Difficulty) -> ObjectSpec {
        ObjectSpec {
            gt: Box3D {
                center: [x, y, 0.8],
                size: CLASS_SIZES[0],
                yaw: 0.3,
                class_id: 0,
                score: 1.0,
            },
            difficulty,
        }
    }

    #[test]
    fn empty_scene_is_clutter_only() {
        let spec = SceneSpec {
            num_objects: [0, 0],
            ..SceneSpec::default()
        };
        let s = generate_scene(&spec, 3).unwrap();
        assert!(s.boxes.is_empty());
        assert_eq!(s.cloud.len(), spec.clutter_points);
    }

    #[test]
    fn same_seed_same_scene() {
        let spec = SceneSpec::default();
        assert_eq!(generate_scene(&spec, 17).unwrap(), generate_scene(&spec, 17).unwrap());
        assert_ne!(generate_scene(&spec, 17).unwrap().cloud, generate_scene(&spec, 18).unwrap().cloud);
    }

    #[test]
    fn weak_far_object_gets_fewer_points() {
        let spec = SceneSpec::default();
        let weak = obj(15.0, 0.0, Difficulty::Weak);
        let easy = obj(3.0, 4.0, Difficulty::Easy);
        let (nw, ne) = (expected_point_count(&weak, &spec), expected_point_count(&easy, &spec));
        // area·density·factor·(r0/r)²
        let area = surface_area(CLASS_SIZES[0]);
        assert_eq!(ne, (area * spec.density).round() as usize);
        assert_eq!(nw, (area * spec.density * spec.weak_factor / 9.0).round() as usize);
        assert!(nw < ne);
        let mut r = rng::seeded(1);
        assert_eq!(sample_object_points(&weak, &spec, &mut r).len(), nw);
    }

    #[test]
    fn weak_objects_keep_one_point() {
        let spec = SceneSpec {
            weak_factor: 1e-9,
            ..SceneSpec::default()
        };
        assert_eq!(expected_point_count(&obj(18.0, 18.0, Difficulty::Weak), &spec), 1);
    }

    #[test]
    fn points_lie_on_box_surface() {
        let spec = SceneSpec::default();
        let o = obj(2.0, -3.0, Difficulty::Easy);
        let (s, c) = o.gt.yaw.sin_cos();
        for p in sample_object_points(&o, &spec, &mut rng::seeded(4)) {
            let (dx, dy) = (p[0] as f64 - 2.0, p[1] as f64 + 3.0);
            let lx = c * dx + s * dy;
            let ly = -s * dx + c * dy;
            let lz = p[2] as f64 - 0.8;
            let [l, w, h] = o.gt.size;
            let on = |v: f64, half: f64| (v.abs() - half).abs() < 1e-4;
            assert!(lx.abs() <= 0.5 * l + 1e-4 && ly.abs() <= 0.5 * w + 1e-4 && lz.abs() <= 0.5 * h + 1e-4);
            assert!(on(lx, 0.5 * l) || on(ly, 0.5 * w) || on(lz, 0.5 * h));
            assert!(lz > -0.5 * h + 1e-4 || on(lx, 0.5 * l) || on(ly, 0.5 * w), "no bottom face");
            assert!((0.0..=1.0).contains(&p[3]));
        }
    }

    #[test]
    fn boxes_inside_grid_and_disjoint() {
        let spec = SceneSpec::default();
        for seed in 0..20 {
            let s = generate_scene(&spec, seed).unwrap();
            let far = spec.grid.far_corner();
            for (i, a) in s.boxes.iter().enumerate() {
                let r = a.footprint_radius();
                assert!(a.center[0] - r >= spec.grid.origin[0] && a.center[0] + r <= far[0]);
                assert!(a.center[1] - r >= spec.grid.origin[1] && a.center[1] + r <= far[1]);
                for b in &s.boxes[i + 1..] {
                    assert!(a.bev_distance(b) > a.footprint_radius() + b.footprint_radius());
                }
            }
        }
    }

    #[test]
    fn unplaceable_is_an_error() {
        let spec = SceneSpec {
            grid: GridSpec {
                extents: [4, 4],
                ..GridSpec::default()
            },
            num_objects: [50, 50],
            class_mix: [1.0, 0.0, 0.0],
            max_retries: 5,
            ..SceneSpec::default()
        };
        assert!(matches!(generate_scene(&spec, 0), Err(Error::Scene(_))));
    }

    #[test]
    fn single_point_at_origin_cell() {
        let g = GridSpec::default();
        let pc = PointCloud {
            points: vec![[-19.1, -19.1, 0.5, 0.7]],
        };
        let s = bev_statistics::<f64>(&pc, &g);
        let occ: Vec<usize> = (0..g.cells()).filter(|k| s.features.data()[k * 5 + 4] != 0.0).collect();
        assert_eq!(occ, vec![0]);
    }

    #[test]
    fn cell_statistics() {
        let g = GridSpec::default();
        let pc = PointCloud {
            points: vec![[0.1, 0.1, 1.0, 0.2], [0.2, 0.2, 3.0, 0.4], [100.0, 0.0, 0.0, 0.0], [0.1, 0.1, 9.0, 0.0]],
        };
        let s = bev_statistics::<f64>(&pc, &g);
        let (r, c) = g.cell_of(0.1, 0.1).unwrap();
        let at = |ch| s.features.at3(r, c, ch);
        assert_eq!(at(0), 3f64.ln());
        assert_eq!((at(1), at(2), at(4)), (2.0, 3.0, 1.0));
        assert!((at(3) - 0.3).abs() < 1e-7);
        assert_eq!((s.points_in, s.dropped), (2, 2));
        assert_eq!(s.points_in + s.dropped, pc.len());
    }

    #[test]
    fn empty_cloud_zero_statistics() {
        let s = bev_statistics::<f32>(&PointCloud::default(), &GridSpec::default());
        assert!(s.features.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn gaussian_peaks_and_neighbors() {
        let g = GridSpec::default();
        let b = Box3D {
            center: [0.3, 0.3, 0.8],
            size: [4.2, 1.5, 1.6],
            yaw: 0.0,
            class_id: 0,
            score: 1.0,
        };
        assert_eq!(gaussian_sigma(&b, &g), 1.0);
        let t = gaussian_heatmap_targets::<f64>(&[b], &g, NUM_CLASSES);
        let (r, c) = g.cell_of(0.3, 0.3).unwrap();
        assert_eq!(t.at3(r, c, 0), 1.0);
        assert!((t.at3(r, c + 1, 0) - (-0.5f64).exp()).abs() < 1e-12);
        assert!((t.at3(r, c + 1, 0) - 0.6065).abs() < 1e-4);
        assert_eq!(t.data().iter().filter(|v| **v == 1.0).count(), 1);
        assert!(t.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let mut b2 = b;
        b2.center[0] += 0.6;
        let t2 = gaussian_heatmap_targets::<f64>(&[b, b2], &g, NUM_CLASSES);
        assert!(t2.data().iter().all(|v| *v <= 1.0));
        assert_eq!(t2.at3(r, c, 0), 1.0);
        assert_eq!(t2.at3(r, c + 1, 0), 1.0);
    }

    #[test]
    fn doubling_cell_size_halves_center_index() {
        let g1 = GridSpec::default();
        let g2 = GridSpec {
            cell_size: 1.2,
            extents: [32, 32],
            ..g1
        };
        for s in generate_split(&SceneSpec::default(), 5, Split::Train, 5).unwrap() {
            for b in &s.boxes {
                let (r1, c1) = g1.cell_of(b.center[0], b.center[1]).unwrap();
                let (r2, c2) = g2.cell_of(b.center[0], b.center[1]).unwrap();
                assert!(r1 / 2 == r2 || (r1 as isize / 2 - r2 as isize).abs() <= 1);
                assert!(c1 / 2 == c2 || (c1 as isize / 2 - c2 as isize).abs() <= 1);
            }
        }
    }

    #[test]
    fn scene_file_round_trip() {
        let s = generate_scene(&SceneSpec::default(), 99).unwrap();
        let bytes = s.to_bytes().unwrap();
        assert_eq!(&bytes[..8], SCENE_MAGIC);
        assert_eq!(Scene::from_bytes(&bytes).unwrap(), s);
        assert!(Scene::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SceneSpec::default();
        let train = generate_split(&spec, 1, Split::Train, 3).unwrap();
        let eval = generate_split(&spec, 1, Split::Eval, 2).unwrap();
        write_dataset(dir.path(), 1, &spec, &train, &eval).unwrap();
        let m = read_manifest(dir.path()).unwrap();
        assert_eq!((m.train.len(), m.eval.len()), (3, 2));
        assert_eq!(read_split(dir.path(), &m.train).unwrap(), train);
        assert_eq!(read_split(dir.path(), &m.eval).unwrap(), eval);
    }

    #[test]
    fn wrap_angle_range() {
        use std::f64::consts::PI;
        assert_eq!(wrap_angle(PI), -PI);
        assert!((wrap_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
        assert_eq!(wrap_angle(0.25), 0.25);
    }
}
