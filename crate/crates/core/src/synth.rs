//! Synthetic indoor rooms built from labeled geometric primitives.
//!
//! Each class owns one primitive family with a characteristic color. Colors
//! get per-point noise and a per-scene tint, so a class is recognisable from
//! geometry, height and color together but not from color alone.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::data::{sample_block, split_scene, ClassTable, PointCloudBlock, Scene, ScenePoint};
use crate::error::{Error, Result};
use crate::projection::{SemanticEmbeddingTable, BACKGROUND};

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "snake_case"))]
pub enum Primitive {
    Floor,
    Ceiling,
    Walls,
    /// Horizontal bar under the ceiling spanning the room along x.
    Beam { width: (f64, f64), depth: (f64, f64), instances: (usize, usize) },
    /// Floor-to-ceiling box standing against a wall.
    Column { width: (f64, f64), instances: (usize, usize) },
    /// Thin rectangle mounted on a wall; `elevation` is its lower edge.
    Panel {
        width: (f64, f64),
        height: (f64, f64),
        elevation: (f64, f64),
        instances: (usize, usize),
    },
    /// Axis-aligned box; `elevation` is the height of its bottom face.
    Cuboid {
        size_min: [f64; 3],
        size_max: [f64; 3],
        elevation: (f64, f64),
        against_wall: bool,
        instances: (usize, usize),
    },
    Cylinder {
        radius: (f64, f64),
        height: (f64, f64),
        elevation: (f64, f64),
        instances: (usize, usize),
    },
    Sphere { radius: (f64, f64), elevation: (f64, f64), instances: (usize, usize) },
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ClassSpec {
    pub name: String,
    pub primitive: Primitive,
    pub color: [f64; 3],
    /// Relative share of the scene's points.
    pub proportion: f64,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct GeneratorConfig {
    /// Bounds for the room's x and y extent, metres.
    pub room_size: (f64, f64),
    pub room_height: (f64, f64),
    pub points_per_scene: usize,
    pub position_noise: f64,
    pub color_noise: f64,
    /// Maximum per-scene brightness deviation (multiplicative) and channel offset.
    pub scene_tint: f64,
    /// Label-0 clutter; `None` generates no background points.
    pub background: Option<ClassSpec>,
    pub classes: Vec<ClassSpec>,
}

fn cuboid(
    size_min: [f64; 3],
    size_max: [f64; 3],
    elevation: (f64, f64),
    against_wall: bool,
    instances: (usize, usize),
) -> Primitive {
    Primitive::Cuboid {
        size_min,
        size_max,
        elevation,
        against_wall,
        instances,
    }
}

fn spec(name: &str, primitive: Primitive, color: [f64; 3], proportion: f64) -> ClassSpec {
    ClassSpec {
        name: name.into(),
        primitive,
        color,
        proportion,
    }
}

impl GeneratorConfig {
    /// Indoor rooms with twelve foreground classes plus clutter.
    pub fn indoor() -> Self {
        use Primitive::*;
        let panel = |w: (f64, f64), h: (f64, f64), e: (f64, f64)| Panel {
            width: w,
            height: h,
            elevation: e,
            instances: (1, 2),
        };
        let classes = vec![
            spec("ceiling", Ceiling, [0.86, 0.85, 0.82], 0.11),
            spec("floor", Floor, [0.55, 0.45, 0.35], 0.11),
            spec("wall", Walls, [0.80, 0.78, 0.72], 0.14),
            spec(
                "beam",
                Beam { width: (0.25, 0.4), depth: (0.25, 0.4), instances: (1, 2) },
                [0.74, 0.74, 0.70],
                0.06,
            ),
            spec(
                "column",
                Column { width: (0.35, 0.6), instances: (1, 2) },
                [0.78, 0.75, 0.68],
                0.07,
            ),
            spec("window", panel((1.0, 1.6), (1.0, 1.4), (0.9, 1.1)), [0.55, 0.70, 0.85], 0.07),
            spec("door", panel((0.9, 1.1), (2.0, 2.2), (0.0, 0.0)), [0.55, 0.35, 0.20], 0.07),
            spec(
                "table",
                cuboid([1.2, 0.7, 0.04], [1.8, 1.0, 0.06], (0.70, 0.78), false, (1, 2)),
                [0.62, 0.42, 0.26],
                0.08,
            ),
            spec(
                "chair",
                cuboid([0.40, 0.40, 0.80], [0.50, 0.50, 0.95], (0.0, 0.0), false, (2, 4)),
                [0.25, 0.25, 0.30],
                0.08,
            ),
            spec(
                "sofa",
                cuboid([1.6, 0.8, 0.7], [2.2, 1.0, 0.85], (0.0, 0.0), false, (1, 1)),
                [0.45, 0.25, 0.30],
                0.07,
            ),
            spec(
                "bookcase",
                cuboid([0.8, 0.3, 1.8], [1.2, 0.4, 2.2], (0.0, 0.0), true, (1, 2)),
                [0.50, 0.35, 0.22],
                0.08,
            ),
            spec("board", panel((1.5, 2.5), (0.9, 1.2), (0.9, 1.0)), [0.90, 0.92, 0.95], 0.06),
        ];
        GeneratorConfig {
            room_size: (4.0, 6.0),
            room_height: (2.8, 3.2),
            points_per_scene: 40_000,
            position_noise: 0.005,
            color_noise: 0.06,
            scene_tint: 0.15,
            background: Some(spec(
                "clutter",
                Sphere { radius: (0.1, 0.3), elevation: (0.0, 1.5), instances: (2, 5) },
                [0.50, 0.50, 0.50],
                0.04,
            )),
            classes,
        }
    }

    /// Keeps only the first `n` foreground classes of the indoor config.
    pub fn with_classes(mut self, n: usize) -> Result<Self> {
        if n == 0 || n > self.classes.len() {
            return Err(Error::config(alloc::format!(
                "class count must lie in 1..={}, got {n}",
                self.classes.len()
            )));
        }
        self.classes.truncate(n);
        Ok(self)
    }

    pub fn class_table(&self) -> ClassTable {
        ClassTable::new(self.classes.iter().map(|c| c.name.clone()))
    }

    pub fn validate(&self) -> Result<()> {
        let range_ok = |r: (f64, f64)| r.0 > 0.0 && r.1 >= r.0 && r.1.is_finite();
        if !range_ok(self.room_size) || !range_ok(self.room_height) {
            return Err(Error::config("room size and height ranges must be positive"));
        }
        if self.points_per_scene == 0 {
            return Err(Error::config("points_per_scene must be positive"));
        }
        if self.classes.is_empty() {
            return Err(Error::config("at least one foreground class is required"));
        }
        if [self.position_noise, self.color_noise, self.scene_tint]
            .iter()
            .any(|v| !(*v >= 0.0))
        {
            return Err(Error::config("noise levels must be >= 0"));
        }
        let mut total = 0.0;
        for c in self.classes.iter().chain(self.background.as_ref()) {
            if !(c.proportion >= 0.0) || !c.proportion.is_finite() {
                return Err(Error::config(alloc::format!(
                    "class `{}` has invalid proportion {}",
                    c.name,
                    c.proportion
                )));
            }
            if c.color.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::config(alloc::format!("class `{}` color outside [0,1]", c.name)));
            }
            validate_primitive(&c.name, &c.primitive)?;
            total += c.proportion;
        }
        if !(total > 0.0) {
            return Err(Error::config("class proportions sum to zero"));
        }
        Ok(())
    }
}

fn validate_primitive(name: &str, p: &Primitive) -> Result<()> {
    let bad = |what: &str| Err(Error::config(alloc::format!("class `{name}`: invalid {what}")));
    let range = |r: (f64, f64)| r.0 >= 0.0 && r.1 >= r.0 && r.1.is_finite();
    let positive = |r: (f64, f64)| r.0 > 0.0 && range(r);
    let inst = |i: (usize, usize)| i.0 >= 1 && i.1 >= i.0;
    match p {
        Primitive::Floor | Primitive::Ceiling | Primitive::Walls => Ok(()),
        Primitive::Beam { width, depth, instances } => {
            if !positive(*width) || !positive(*depth) || !inst(*instances) {
                return bad("beam dimensions");
            }
            Ok(())
        }
        Primitive::Column { width, instances } => {
            if !positive(*width) || !inst(*instances) {
                return bad("column dimensions");
            }
            Ok(())
        }
        Primitive::Panel { width, height, elevation, instances } => {
            if !positive(*width) || !positive(*height) || !range(*elevation) || !inst(*instances) {
                return bad("panel dimensions");
            }
            Ok(())
        }
        Primitive::Cuboid { size_min, size_max, elevation, instances, .. } => {
            if (0..3).any(|a| !(size_min[a] > 0.0 && size_max[a] >= size_min[a]))
                || !range(*elevation)
                || !inst(*instances)
            {
                return bad("cuboid dimensions");
            }
            Ok(())
        }
        Primitive::Cylinder { radius, height, elevation, instances } => {
            if !positive(*radius) || !positive(*height) || !range(*elevation) || !inst(*instances) {
                return bad("cylinder dimensions");
            }
            Ok(())
        }
        Primitive::Sphere { radius, elevation, instances } => {
            if !positive(*radius) || !range(*elevation) || !inst(*instances) {
                return bad("sphere dimensions");
            }
            Ok(())
        }
    }
}

/// Splits `total` into integer counts proportional to `weights` by the
/// largest-remainder rule.
pub fn allocate_counts(weights: &[f64], total: usize) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| libm::floor(*e) as usize).collect();
    let mut remaining = total - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - libm::floor(exact[a]);
        let rb = exact[b] - libm::floor(exact[b]);
        rb.partial_cmp(&ra).unwrap_or(core::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if remaining == 0 {
            break;
        }
        if weights[i] > 0.0 {
            counts[i] += 1;
            remaining -= 1;
        }
    }
    counts
}

struct Room {
    lx: f64,
    ly: f64,
    h: f64,
}

/// Axis-aligned box surface sampler.
struct BoxShape {
    lo: [f64; 3],
    hi: [f64; 3],
    /// Skip the bottom face (objects standing on the floor).
    open_bottom: bool,
}

impl BoxShape {
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> [f64; 3] {
        let s = [self.hi[0] - self.lo[0], self.hi[1] - self.lo[1], self.hi[2] - self.lo[2]];
        // faces: ±x, ±y, top, bottom
        let areas = [
            s[1] * s[2],
            s[1] * s[2],
            s[0] * s[2],
            s[0] * s[2],
            s[0] * s[1],
            if self.open_bottom { 0.0 } else { s[0] * s[1] },
        ];
        let face = pick_weighted(&areas, rng);
        let mut p = [
            self.lo[0] + rng.random::<f64>() * s[0],
            self.lo[1] + rng.random::<f64>() * s[1],
            self.lo[2] + rng.random::<f64>() * s[2],
        ];
        match face {
            0 => p[0] = self.lo[0],
            1 => p[0] = self.hi[0],
            2 => p[1] = self.lo[1],
            3 => p[1] = self.hi[1],
            4 => p[2] = self.hi[2],
            _ => p[2] = self.lo[2],
        }
        p
    }
}

fn pick_weighted<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    let mut t = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if t < *w {
            return i;
        }
        t -= w;
    }
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
}

fn in_range<R: Rng + ?Sized>(r: (f64, f64), rng: &mut R) -> f64 {
    if r.1 > r.0 {
        rng.random_range(r.0..=r.1)
    } else {
        r.0
    }
}

fn count_in<R: Rng + ?Sized>(r: (usize, usize), rng: &mut R) -> usize {
    rng.random_range(r.0..=r.1)
}

enum Shape {
    Floor,
    Ceiling,
    Walls,
    Box(BoxShape),
    /// Center xy, radius, z range.
    Cylinder([f64; 2], f64, (f64, f64)),
    Sphere([f64; 3], f64),
}

/// A point on the wall plane: (side, position along side) → xy placement.
fn wall_anchor<R: Rng + ?Sized>(room: &Room, half_width: f64, rng: &mut R) -> (usize, f64) {
    let side = rng.random_range(0..4usize);
    let len = if side < 2 { room.lx } else { room.ly };
    let lo = half_width.min(len / 2.0);
    let along = if len - lo > lo { rng.random_range(lo..len - lo) } else { len / 2.0 };
    (side, along)
}

/// Box flush with a wall. `w` runs along the wall, `d` into the room.
fn wall_box(room: &Room, side: usize, along: f64, w: f64, d: f64, z: (f64, f64)) -> BoxShape {
    let (lo, hi) = match side {
        0 => ([along - w / 2.0, 0.0], [along + w / 2.0, d]),
        1 => ([along - w / 2.0, room.ly - d], [along + w / 2.0, room.ly]),
        2 => ([0.0, along - w / 2.0], [d, along + w / 2.0]),
        _ => ([room.lx - d, along - w / 2.0], [room.lx, along + w / 2.0]),
    };
    BoxShape {
        lo: [lo[0], lo[1], z.0],
        hi: [hi[0], hi[1], z.1],
        open_bottom: z.0 <= 1e-6,
    }
}

fn instantiate<R: Rng + ?Sized>(p: &Primitive, room: &Room, rng: &mut R) -> Vec<Shape> {
    match p {
        Primitive::Floor => vec![Shape::Floor],
        Primitive::Ceiling => vec![Shape::Ceiling],
        Primitive::Walls => vec![Shape::Walls],
        Primitive::Beam { width, depth, instances } => (0..count_in(*instances, rng))
            .map(|_| {
                let w = in_range(*width, rng);
                let d = in_range(*depth, rng);
                let y = rng.random_range(w..(room.ly - w).max(w + 1e-3));
                Shape::Box(BoxShape {
                    lo: [0.0, y - w / 2.0, room.h - d],
                    hi: [room.lx, y + w / 2.0, room.h],
                    open_bottom: false,
                })
            })
            .collect(),
        Primitive::Column { width, instances } => (0..count_in(*instances, rng))
            .map(|_| {
                let w = in_range(*width, rng);
                let (side, along) = wall_anchor(room, w, rng);
                Shape::Box(wall_box(room, side, along, w, w, (0.0, room.h)))
            })
            .collect(),
        Primitive::Panel { width, height, elevation, instances } => (0..count_in(*instances, rng))
            .map(|_| {
                let w = in_range(*width, rng);
                let h = in_range(*height, rng);
                let e = in_range(*elevation, rng);
                let (side, along) = wall_anchor(room, w / 2.0, rng);
                let top = (e + h).min(room.h);
                Shape::Box(wall_box(room, side, along, w, 0.04, (e, top)))
            })
            .collect(),
        Primitive::Cuboid { size_min, size_max, elevation, against_wall, instances } => {
            (0..count_in(*instances, rng))
                .map(|_| {
                    let s: [f64; 3] =
                        core::array::from_fn(|a| in_range((size_min[a], size_max[a]), rng));
                    let e = in_range(*elevation, rng);
                    let z = (e, (e + s[2]).min(room.h));
                    if *against_wall {
                        let (side, along) = wall_anchor(room, s[0] / 2.0, rng);
                        Shape::Box(wall_box(room, side, along, s[0], s[1], z))
                    } else {
                        let cx = place(room.lx, s[0], rng);
                        let cy = place(room.ly, s[1], rng);
                        Shape::Box(BoxShape {
                            lo: [cx - s[0] / 2.0, cy - s[1] / 2.0, z.0],
                            hi: [cx + s[0] / 2.0, cy + s[1] / 2.0, z.1],
                            open_bottom: z.0 <= 1e-6,
                        })
                    }
                })
                .collect()
        }
        Primitive::Cylinder { radius, height, elevation, instances } => (0..count_in(*instances, rng))
            .map(|_| {
                let r = in_range(*radius, rng);
                let h = in_range(*height, rng);
                let e = in_range(*elevation, rng);
                let c = [place(room.lx, 2.0 * r, rng), place(room.ly, 2.0 * r, rng)];
                Shape::Cylinder(c, r, (e, (e + h).min(room.h)))
            })
            .collect(),
        Primitive::Sphere { radius, elevation, instances } => (0..count_in(*instances, rng))
            .map(|_| {
                let r = in_range(*radius, rng);
                let e = in_range(*elevation, rng);
                Shape::Sphere(
                    [place(room.lx, 2.0 * r, rng), place(room.ly, 2.0 * r, rng), e + r],
                    r,
                )
            })
            .collect(),
    }
}

/// Uniform center for an object of `size` inside `[0, extent]`.
fn place<R: Rng + ?Sized>(extent: f64, size: f64, rng: &mut R) -> f64 {
    let half = size / 2.0;
    if extent - half > half {
        rng.random_range(half..extent - half)
    } else {
        extent / 2.0
    }
}

fn sample_shape<R: Rng + ?Sized>(shape: &Shape, room: &Room, rng: &mut R) -> [f64; 3] {
    match shape {
        Shape::Floor => [rng.random::<f64>() * room.lx, rng.random::<f64>() * room.ly, 0.0],
        Shape::Ceiling => [rng.random::<f64>() * room.lx, rng.random::<f64>() * room.ly, room.h],
        Shape::Walls => {
            let perim = [room.lx, room.lx, room.ly, room.ly];
            let side = pick_weighted(&perim, rng);
            let t = rng.random::<f64>();
            let z = rng.random::<f64>() * room.h;
            match side {
                0 => [t * room.lx, 0.0, z],
                1 => [t * room.lx, room.ly, z],
                2 => [0.0, t * room.ly, z],
                _ => [room.lx, t * room.ly, z],
            }
        }
        Shape::Box(b) => b.sample(rng),
        Shape::Cylinder(c, r, (z0, z1)) => {
            let a = rng.random::<f64>() * core::f64::consts::TAU;
            [c[0] + r * libm::cos(a), c[1] + r * libm::sin(a), z0 + rng.random::<f64>() * (z1 - z0)]
        }
        Shape::Sphere(c, r) => {
            let normal = Normal::new(0.0, 1.0).expect("unit normal");
            let v: [f64; 3] = core::array::from_fn(|_| normal.sample(rng));
            let n = libm::sqrt(v.iter().map(|x| x * x).sum::<f64>()).max(1e-12);
            [c[0] + r * v[0] / n, c[1] + r * v[1] / n, c[2] + r * v[2] / n]
        }
    }
}

/// Generates one labeled room. Labels: 0 for background clutter, `i + 1`
/// for `cfg.classes[i]`.
pub fn generate_synthetic_scene<R: Rng + ?Sized>(
    cfg: &GeneratorConfig,
    id: u32,
    rng: &mut R,
) -> Result<Scene> {
    cfg.validate()?;
    let room = Room {
        lx: in_range(cfg.room_size, rng),
        ly: in_range(cfg.room_size, rng),
        h: in_range(cfg.room_height, rng),
    };
    let brightness = 1.0 + in_range((-cfg.scene_tint, cfg.scene_tint), rng);
    let offset: [f64; 3] =
        core::array::from_fn(|_| in_range((-cfg.scene_tint / 3.0, cfg.scene_tint / 3.0), rng));

    // (label, spec) with background first when present
    let mut entries: Vec<(usize, &ClassSpec)> = Vec::new();
    if let Some(bg) = &cfg.background {
        entries.push((0, bg));
    }
    entries.extend(cfg.classes.iter().enumerate().map(|(i, c)| (i + 1, c)));
    let weights: Vec<f64> = entries.iter().map(|(_, c)| c.proportion).collect();
    let counts = allocate_counts(&weights, cfg.points_per_scene);

    let pos_noise = Normal::new(0.0, cfg.position_noise.max(1e-12)).expect("finite sigma");
    let col_noise = Normal::new(0.0, cfg.color_noise.max(1e-12)).expect("finite sigma");

    let mut points: Vec<ScenePoint> = Vec::with_capacity(cfg.points_per_scene);
    let mut labels = Vec::with_capacity(cfg.points_per_scene);
    for ((label, class), &count) in entries.iter().zip(&counts) {
        if count == 0 {
            continue;
        }
        let shapes = instantiate(&class.primitive, &room, rng);
        for _ in 0..count {
            let shape = &shapes[rng.random_range(0..shapes.len())];
            let xyz = sample_shape(shape, &room, rng);
            let mut p = [0.0; 6];
            for a in 0..3 {
                p[a] = xyz[a] + pos_noise.sample(rng);
                p[3 + a] =
                    (class.color[a] * brightness + offset[a] + col_noise.sample(rng)).clamp(0.0, 1.0);
            }
            p[2] = p[2].clamp(0.0, room.h);
            points.push(p);
            labels.push(*label);
        }
    }
    Ok(Scene {
        id,
        points,
        labels,
        classes: cfg.class_table(),
    })
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct BlockingConfig {
    pub block_size: f64,
    pub stride: f64,
    pub min_points: usize,
    pub num_points: usize,
}

impl Default for BlockingConfig {
    fn default() -> Self {
        BlockingConfig {
            block_size: crate::data::DEFAULT_BLOCK_SIZE,
            stride: crate::data::DEFAULT_BLOCK_STRIDE,
            min_points: crate::data::DEFAULT_MIN_BLOCK_POINTS,
            num_points: crate::data::DEFAULT_BLOCK_POINTS,
        }
    }
}

/// A block together with the scene it was cut from.
#[derive(Clone, Debug, PartialEq)]
pub struct SourcedBlock {
    pub scene: u32,
    pub block: PointCloudBlock,
}

/// Generates `num_scenes` rooms, tiles them and resamples every tile to
/// `blocking.num_points`. Scene `i` uses stream `i` of the root seed.
pub fn generate_blocks(
    cfg: &GeneratorConfig,
    blocking: &BlockingConfig,
    num_scenes: usize,
    seed: u64,
) -> Result<Vec<SourcedBlock>> {
    let mut out = Vec::new();
    for s in 0..num_scenes {
        let mut rng = crate::derive_rng(seed, s as u64);
        let scene = generate_synthetic_scene(cfg, s as u32, &mut rng)?;
        for block in split_scene(&scene, blocking.block_size, blocking.stride, blocking.min_points)? {
            out.push(SourcedBlock {
                scene: scene.id,
                block: sample_block(&block, blocking.num_points, &mut rng)?,
            });
        }
    }
    Ok(out)
}

/// Coarse geometric description of a class: vertical centre, vertical
/// extent and horizontal extent, each divided by a nominal room scale.
pub fn primitive_attributes(p: &Primitive) -> [f64; 3] {
    const H: f64 = 3.0;
    const L: f64 = 5.0;
    let mid = |r: (f64, f64)| 0.5 * (r.0 + r.1);
    let (zc, zs, xy) = match p {
        Primitive::Floor => (0.0, 0.0, L),
        Primitive::Ceiling => (H, 0.0, L),
        Primitive::Walls => (0.5 * H, H, 0.0),
        Primitive::Beam { depth, width, .. } => (H - 0.5 * mid(*depth), mid(*depth), mid(*width)),
        Primitive::Column { width, .. } => (0.5 * H, H, mid(*width)),
        Primitive::Panel { width, height, elevation, .. } => {
            (mid(*elevation) + 0.5 * mid(*height), mid(*height), mid(*width))
        }
        Primitive::Cuboid { size_min, size_max, elevation, .. } => {
            let size: [f64; 3] = core::array::from_fn(|a| 0.5 * (size_min[a] + size_max[a]));
            (mid(*elevation) + 0.5 * size[2], size[2], size[0].max(size[1]))
        }
        Primitive::Cylinder { radius, height, elevation, .. } => {
            (mid(*elevation) + 0.5 * mid(*height), mid(*height), 2.0 * mid(*radius))
        }
        Primitive::Sphere { radius, elevation, .. } => {
            (mid(*elevation) + mid(*radius), 2.0 * mid(*radius), 2.0 * mid(*radius))
        }
    };
    [zc / H, zs / H, xy / L]
}

/// Attribute vector of a class: color, geometry and a background flag.
pub fn class_attributes(spec: &ClassSpec, background: bool) -> [f64; 7] {
    let g = primitive_attributes(&spec.primitive);
    [
        spec.color[0],
        spec.color[1],
        spec.color[2],
        g[0],
        g[1],
        g[2],
        if background { 1.0 } else { 0.0 },
    ]
}

/// Stand-in for text-encoder output: every class attribute vector is sent
/// through one random Gaussian linear map to `dim` dimensions, then
/// perturbed by Gaussian noise of scale `noise`. The background row uses the
/// clutter spec when present.
pub fn synthetic_embeddings(
    cfg: &GeneratorConfig,
    dim: usize,
    noise: f64,
    seed: u64,
) -> Result<SemanticEmbeddingTable> {
    cfg.validate()?;
    if dim == 0 || !(noise >= 0.0) {
        return Err(Error::config("embedding dim must be positive and noise >= 0"));
    }
    let mut rng = crate::derive_rng(seed, 0xE3B);
    let gauss = Normal::new(0.0, 1.0).expect("unit normal");
    let map: Vec<[f64; 7]> = (0..dim)
        .map(|_| core::array::from_fn(|_| gauss.sample(&mut rng)))
        .collect();
    let embed = |attrs: [f64; 7], rng: &mut crate::Rng| -> Vec<f64> {
        map.iter()
            .map(|row| row.iter().zip(&attrs).map(|(w, a)| w * a).sum::<f64>() + noise * gauss.sample(rng))
            .collect()
    };
    let mut table = SemanticEmbeddingTable::new(alloc::format!("synthetic-attributes seed={seed} dim={dim}"));
    let bg_attrs = match &cfg.background {
        Some(bg) => class_attributes(bg, true),
        None => [0.5, 0.5, 0.5, 0.0, 0.0, 0.0, 1.0],
    };
    table.insert(BACKGROUND, embed(bg_attrs, &mut rng))?;
    for c in &cfg.classes {
        table.insert(c.name.clone(), embed(class_attributes(c, false), &mut rng))?;
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::derive_rng;

    #[test]
    fn floor_only_scene() {
        let mut cfg = GeneratorConfig::indoor().with_classes(2).unwrap();
        cfg.classes.remove(0);
        cfg.background = None;
        cfg.points_per_scene = 2000;
        let scene = generate_synthetic_scene(&cfg, 0, &mut derive_rng(1, 0)).unwrap();
        assert_eq!(scene.classes.name(1), Some("floor"));
        assert!(scene.labels.iter().all(|&l| l == 1));
        assert!(scene.points.iter().all(|p| p[2].abs() < 0.05));
    }

    #[test]
    fn indoor_has_twelve_classes() {
        let cfg = GeneratorConfig::indoor();
        assert_eq!(cfg.classes.len(), 12);
        assert_eq!(cfg.class_table().len(), 13);
    }

    #[test]
    fn class_fractions_follow_proportions() {
        let mut cfg = GeneratorConfig::indoor();
        cfg.points_per_scene = 100_000;
        let scene = generate_synthetic_scene(&cfg, 0, &mut derive_rng(5, 0)).unwrap();
        let total: f64 = cfg.classes.iter().map(|c| c.proportion).sum::<f64>()
            + cfg.background.as_ref().unwrap().proportion;
        let mut counts = [0usize; 13];
        for &l in &scene.labels {
            counts[l] += 1;
        }
        let expected = core::iter::once(cfg.background.as_ref().unwrap().proportion)
            .chain(cfg.classes.iter().map(|c| c.proportion));
        for (label, p) in expected.enumerate() {
            let frac = counts[label] as f64 / 1e5;
            assert!((frac - p / total).abs() <= 0.05 * (p / total), "class {label}: {frac}");
        }
    }

    #[test]
    fn unsatisfiable_config() {
        let mut cfg = GeneratorConfig::indoor();
        cfg.room_size = (0.0, 0.0);
        assert!(matches!(
            generate_synthetic_scene(&cfg, 0, &mut derive_rng(0, 0)),
            Err(Error::Config(_))
        ));
        let mut cfg = GeneratorConfig::indoor();
        cfg.classes.iter_mut().for_each(|c| c.proportion = 0.0);
        cfg.background = None;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn largest_remainder_allocation() {
        assert_eq!(allocate_counts(&[1.0, 1.0, 1.0], 10), vec![4, 3, 3]);
        assert_eq!(allocate_counts(&[0.0, 2.0], 5), vec![0, 5]);
        assert_eq!(allocate_counts(&[0.5, 0.25, 0.25], 4).iter().sum::<usize>(), 4);
    }

    #[test]
    fn blocks_are_valid_and_deterministic() {
        let mut cfg = GeneratorConfig::indoor();
        cfg.points_per_scene = 8000;
        let blocking = BlockingConfig {
            num_points: 128,
            min_points: 50,
            ..BlockingConfig::default()
        };
        let a = generate_blocks(&cfg, &blocking, 2, 3).unwrap();
        let b = generate_blocks(&cfg, &blocking, 2, 3).unwrap();
        assert_eq!(a, b);
        assert!(!a.is_empty());
        let table = cfg.class_table();
        for sb in &a {
            assert_eq!(sb.block.len(), 128);
            sb.block.validate(&table).unwrap();
        }
    }

    #[test]
    fn embeddings_cover_every_class() {
        let cfg = GeneratorConfig::indoor();
        let t = synthetic_embeddings(&cfg, 16, 0.05, 3).unwrap();
        t.validate_for(&cfg.class_table()).unwrap();
        assert_eq!(t.dim(), 16);
        assert_eq!(t, synthetic_embeddings(&cfg, 16, 0.05, 3).unwrap());
        assert_ne!(t.get("chair").unwrap(), t.get("table").unwrap());
    }
}
