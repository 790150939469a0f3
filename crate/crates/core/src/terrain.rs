//! Parameterized training terrains and the height/normal/friction queries
//! shared by the simulator and the perception model.
//!
//! A [`TerrainPatch`] is immutable once generated. Heights come from the
//! maximum over a heightfield and a list of box primitives; stairs are
//! always built from boxes so that risers are exactly vertical.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;

use nalgebra::Vector3;
use noise::{Fbm, MultiFractal, NoiseFn, Perlin};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Half side of the square patch, metres. The patch spans `[-HALF_EXTENT, HALF_EXTENT]²`.
pub const HALF_EXTENT: f64 = 4.0;
/// Heightfield resolution, metres per cell.
pub const RESOLUTION: f64 = 0.04;
/// Side of a perception offset cell, metres.
pub const CELL_SIZE: f64 = 2.0;
/// Distance from the patch centre to the foot of the first stair flight.
pub const STAIR_BASE_X: f64 = 0.5;

const BOX_COUNT: usize = 20;
const BOX_SIDE_RANGE: (f64, f64) = (0.4, 1.2);
const OPEN_TREAD_THICKNESS: f64 = 0.04;
const LEDGE_OVERHANG: f64 = 0.05;
const LEDGE_THICKNESS: f64 = 0.03;
const NOISE_FREQUENCY: f64 = 0.5;
const NOISE_OCTAVES: usize = 3;
const BUCKET_SIZE: f64 = 0.5;
const DEFAULT_FRICTION: f64 = 0.7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerrainKind {
    Rough,
    RoughDiscrete,
    LargeSteps,
    Boxes,
    GridSteps,
    StepStairs,
    StairsStandard,
    StairsOpen,
    StairsLedged,
    StairsRandom,
}

/// Admissible range of one named terrain parameter.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ParamRange {
    pub name: &'static str,
    pub min: f64,
    pub max: f64,
    pub default: f64,
}

const fn range(name: &'static str, min: f64, max: f64, default: f64) -> ParamRange {
    ParamRange { name, min, max, default }
}

const ROUGH_PARAMS: &[ParamRange] = &[range("amplitude", 0.0, 0.3, 0.1)];
const ROUGH_DISCRETE_PARAMS: &[ParamRange] =
    &[range("amplitude", 0.0, 0.3, 0.1), range("levels", 2.0, 64.0, 8.0)];
const LARGE_STEPS_PARAMS: &[ParamRange] = &[range("height", 0.0, 0.4, 0.2)];
const BOXES_PARAMS: &[ParamRange] = &[range("height", 0.0, 0.25, 0.15)];
const GRID_STEPS_PARAMS: &[ParamRange] =
    &[range("height", 0.05, 0.4, 0.1), range("width", 0.2, 0.7, 0.4)];
const STAIRS_PARAMS: &[ParamRange] =
    &[range("height", 0.01, 0.22, 0.12), range("depth", 0.25, 1.0, 0.3)];

impl TerrainKind {
    pub const ALL: [TerrainKind; 10] = [
        TerrainKind::Rough,
        TerrainKind::RoughDiscrete,
        TerrainKind::LargeSteps,
        TerrainKind::Boxes,
        TerrainKind::GridSteps,
        TerrainKind::StepStairs,
        TerrainKind::StairsStandard,
        TerrainKind::StairsOpen,
        TerrainKind::StairsLedged,
        TerrainKind::StairsRandom,
    ];

    pub fn param_ranges(self) -> &'static [ParamRange] {
        match self {
            TerrainKind::Rough => ROUGH_PARAMS,
            TerrainKind::RoughDiscrete => ROUGH_DISCRETE_PARAMS,
            TerrainKind::LargeSteps => LARGE_STEPS_PARAMS,
            TerrainKind::Boxes => BOXES_PARAMS,
            TerrainKind::GridSteps => GRID_STEPS_PARAMS,
            TerrainKind::StepStairs
            | TerrainKind::StairsStandard
            | TerrainKind::StairsOpen
            | TerrainKind::StairsLedged
            | TerrainKind::StairsRandom => STAIRS_PARAMS,
        }
    }

    /// The parameter that most directly controls difficulty (always the first).
    pub fn difficulty_param(self) -> &'static str {
        self.param_ranges()[0].name
    }

    pub fn name(self) -> &'static str {
        match self {
            TerrainKind::Rough => "rough",
            TerrainKind::RoughDiscrete => "rough_discrete",
            TerrainKind::LargeSteps => "large_steps",
            TerrainKind::Boxes => "boxes",
            TerrainKind::GridSteps => "grid_steps",
            TerrainKind::StepStairs => "step_stairs",
            TerrainKind::StairsStandard => "stairs_standard",
            TerrainKind::StairsOpen => "stairs_open",
            TerrainKind::StairsLedged => "stairs_ledged",
            TerrainKind::StairsRandom => "stairs_random",
        }
    }
}

impl fmt::Display for TerrainKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for TerrainKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TerrainKind::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown terrain kind `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TerrainSpec {
    pub kind: TerrainKind,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
    #[serde(default)]
    pub seed: u64,
}

impl TerrainSpec {
    /// A spec with every parameter at its default.
    pub fn new(kind: TerrainKind, seed: u64) -> Self {
        let params = kind.param_ranges().iter().map(|r| (r.name.to_string(), r.default)).collect();
        Self { kind, params, seed }
    }

    pub fn with(mut self, name: &str, value: f64) -> Self {
        self.params.insert(name.to_string(), value);
        self
    }

    pub fn param(&self, name: &str) -> f64 {
        self.params.get(name).copied().unwrap_or_else(|| {
            self.kind
                .param_ranges()
                .iter()
                .find(|r| r.name == name)
                .map(|r| r.default)
                .unwrap_or(0.0)
        })
    }

    pub fn validate(&self) -> Result<()> {
        let ranges = self.kind.param_ranges();
        for (name, &value) in &self.params {
            let Some(r) = ranges.iter().find(|r| r.name == name) else {
                return Err(Error::Invalid(format!(
                    "terrain `{}` has no parameter `{name}`",
                    self.kind
                )));
            };
            if !(value.is_finite() && value >= r.min && value <= r.max) {
                return Err(Error::OutOfRange {
                    key: format!("{}.{}", self.kind, name),
                    value,
                    min: r.min,
                    max: r.max,
                });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Interpolation {
    /// Samples are grid nodes; heights are bilinear between them.
    Bilinear,
    /// Samples are cells; heights are constant inside a cell (low side closed).
    Nearest,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Heightfield {
    pub resolution: f64,
    pub nx: usize,
    pub ny: usize,
    pub interpolation: Interpolation,
    /// Row-major, `heights[iy * nx + ix]`.
    pub heights: Vec<f64>,
}

impl Heightfield {
    fn flat() -> Self {
        Self {
            resolution: 2.0 * HALF_EXTENT,
            nx: 2,
            ny: 2,
            interpolation: Interpolation::Bilinear,
            heights: vec![0.0; 4],
        }
    }

    fn sample(&self, x: f64, y: f64) -> (f64, [f64; 2]) {
        let u = (x + HALF_EXTENT) / self.resolution;
        let v = (y + HALF_EXTENT) / self.resolution;
        match self.interpolation {
            Interpolation::Bilinear => {
                let ix = (u.floor() as isize).clamp(0, self.nx as isize - 2) as usize;
                let iy = (v.floor() as isize).clamp(0, self.ny as isize - 2) as usize;
                let fx = (u - ix as f64).clamp(0.0, 1.0);
                let fy = (v - iy as f64).clamp(0.0, 1.0);
                let h00 = self.heights[iy * self.nx + ix];
                let h10 = self.heights[iy * self.nx + ix + 1];
                let h01 = self.heights[(iy + 1) * self.nx + ix];
                let h11 = self.heights[(iy + 1) * self.nx + ix + 1];
                let h = h00 * (1.0 - fx) * (1.0 - fy)
                    + h10 * fx * (1.0 - fy)
                    + h01 * (1.0 - fx) * fy
                    + h11 * fx * fy;
                let dx = ((h10 - h00) * (1.0 - fy) + (h11 - h01) * fy) / self.resolution;
                let dy = ((h01 - h00) * (1.0 - fx) + (h11 - h10) * fx) / self.resolution;
                (h, [dx, dy])
            }
            Interpolation::Nearest => {
                let ix = (u.floor() as isize).clamp(0, self.nx as isize - 1) as usize;
                let iy = (v.floor() as isize).clamp(0, self.ny as isize - 1) as usize;
                (self.heights[iy * self.nx + ix], [0.0, 0.0])
            }
        }
    }
}

/// An oriented box standing on the ground plane.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxPrimitive {
    pub center: [f64; 2],
    pub yaw: f64,
    pub half_extents: [f64; 2],
    pub z_min: f64,
    pub z_max: f64,
}

impl BoxPrimitive {
    fn axis_aligned(x0: f64, x1: f64, y0: f64, y1: f64, z_min: f64, z_max: f64) -> Self {
        Self {
            center: [0.5 * (x0 + x1), 0.5 * (y0 + y1)],
            yaw: 0.0,
            half_extents: [0.5 * (x1 - x0), 0.5 * (y1 - y0)],
            z_min,
            z_max,
        }
    }

    /// Closed footprint test.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let dx = x - self.center[0];
        let dy = y - self.center[1];
        if self.yaw == 0.0 {
            return dx.abs() <= self.half_extents[0] && dy.abs() <= self.half_extents[1];
        }
        let (s, c) = self.yaw.sin_cos();
        let lx = c * dx + s * dy;
        let ly = -s * dx + c * dy;
        lx.abs() <= self.half_extents[0] && ly.abs() <= self.half_extents[1]
    }

    fn aabb(&self) -> [f64; 4] {
        let (s, c) = self.yaw.sin_cos();
        let ex = c.abs() * self.half_extents[0] + s.abs() * self.half_extents[1];
        let ey = s.abs() * self.half_extents[0] + c.abs() * self.half_extents[1];
        let pad = if self.yaw == 0.0 { 0.0 } else { 1e-9 };
        [
            self.center[0] - ex - pad,
            self.center[0] + ex + pad,
            self.center[1] - ey - pad,
            self.center[1] + ey + pad,
        ]
    }
}

/// A rectangular region with its own friction coefficient, closed on the low side.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrictionRegion {
    pub min: [f64; 2],
    pub max: [f64; 2],
    pub mu: f64,
}

impl FrictionRegion {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.min[0] && x < self.max[0] && y >= self.min[1] && y < self.max[1]
    }
}

/// Square perception cells carrying a unit-variance offset draw each; the
/// perceived offset is the draw scaled by `0.1 * c_sk`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerceptionCells {
    pub size: f64,
    pub per_side: usize,
    pub unit_offsets: Vec<f64>,
}

impl PerceptionCells {
    pub fn index(&self, x: f64, y: f64) -> usize {
        let n = self.per_side as isize;
        let ix = (((x + HALF_EXTENT) / self.size).floor() as isize).clamp(0, n - 1) as usize;
        let iy = (((y + HALF_EXTENT) / self.size).floor() as isize).clamp(0, n - 1) as usize;
        iy * self.per_side + ix
    }
}

/// Result of a height query; `clamped` is set when the query fell outside
/// the patch and was evaluated at the nearest border point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HeightQuery {
    pub height: f64,
    pub clamped: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TerrainPatch {
    pub spec: Option<TerrainSpec>,
    pub heightfield: Heightfield,
    pub boxes: Vec<BoxPrimitive>,
    pub default_friction: f64,
    pub friction_regions: Vec<FrictionRegion>,
    pub cells: PerceptionCells,
    buckets: Vec<Vec<u32>>,
    buckets_per_side: usize,
}

impl TerrainPatch {
    fn assemble(spec: Option<TerrainSpec>, heightfield: Heightfield, boxes: Vec<BoxPrimitive>, rng: &mut ChaCha8Rng) -> Self {
        let per_side = ((2.0 * HALF_EXTENT) / CELL_SIZE).round() as usize;
        let unit_offsets = (0..per_side * per_side).map(|_| standard_normal(rng)).collect();
        let buckets_per_side = ((2.0 * HALF_EXTENT) / BUCKET_SIZE).round() as usize;
        let mut buckets = vec![Vec::new(); buckets_per_side * buckets_per_side];
        let bucket_of = |v: f64| {
            (((v + HALF_EXTENT) / BUCKET_SIZE).floor() as isize).clamp(0, buckets_per_side as isize - 1)
                as usize
        };
        for (i, b) in boxes.iter().enumerate() {
            let [x0, x1, y0, y1] = b.aabb();
            for by in bucket_of(y0)..=bucket_of(y1) {
                for bx in bucket_of(x0)..=bucket_of(x1) {
                    buckets[by * buckets_per_side + bx].push(i as u32);
                }
            }
        }
        Self {
            spec,
            heightfield,
            boxes,
            default_friction: DEFAULT_FRICTION,
            friction_regions: Vec::new(),
            cells: PerceptionCells { size: CELL_SIZE, per_side, unit_offsets },
            buckets,
            buckets_per_side,
        }
    }

    /// Flat ground at height zero.
    pub fn flat() -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Self::assemble(None, Heightfield::flat(), Vec::new(), &mut rng)
    }

    /// Flat ground with one full-width step of `height` starting at `edge_x`.
    pub fn single_step(height: f64, edge_x: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let boxes = if height > 0.0 {
            vec![BoxPrimitive::axis_aligned(edge_x, HALF_EXTENT, -HALF_EXTENT, HALF_EXTENT, 0.0, height)]
        } else {
            Vec::new()
        };
        Self::assemble(None, Heightfield::flat(), boxes, &mut rng)
    }

    /// Patch built from explicit primitives, used by tests and scripted scenarios.
    pub fn from_parts(heightfield: Option<Heightfield>, boxes: Vec<BoxPrimitive>, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::assemble(None, heightfield.unwrap_or_else(Heightfield::flat), boxes, &mut rng)
    }

    pub fn with_friction(mut self, default_mu: f64, regions: Vec<FrictionRegion>) -> Self {
        self.default_friction = default_mu;
        self.friction_regions = regions;
        self
    }

    pub fn kind(&self) -> Option<TerrainKind> {
        self.spec.as_ref().map(|s| s.kind)
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x.abs() <= HALF_EXTENT && y.abs() <= HALF_EXTENT
    }

    fn clamp_xy(&self, x: f64, y: f64) -> (f64, f64, bool) {
        let cx = x.clamp(-HALF_EXTENT, HALF_EXTENT);
        let cy = y.clamp(-HALF_EXTENT, HALF_EXTENT);
        (cx, cy, cx != x || cy != y)
    }

    fn candidate_boxes(&self, x: f64, y: f64) -> &[u32] {
        let n = self.buckets_per_side as isize;
        let bx = (((x + HALF_EXTENT) / BUCKET_SIZE).floor() as isize).clamp(0, n - 1) as usize;
        let by = (((y + HALF_EXTENT) / BUCKET_SIZE).floor() as isize).clamp(0, n - 1) as usize;
        &self.buckets[by * self.buckets_per_side + bx]
    }

    /// Maximum over the heightfield and every box top covering `(x, y)`.
    pub fn height_at(&self, x: f64, y: f64) -> HeightQuery {
        let (x, y, clamped) = self.clamp_xy(x, y);
        let mut h = self.heightfield.sample(x, y).0;
        for &i in self.candidate_boxes(x, y) {
            let b = &self.boxes[i as usize];
            if b.z_max > h && b.contains(x, y) {
                h = b.z_max;
            }
        }
        HeightQuery { height: h, clamped }
    }

    #[inline]
    pub fn height(&self, x: f64, y: f64) -> f64 {
        self.height_at(x, y).height
    }

    /// Upward unit normal of the surface that defines the height at `(x, y)`.
    pub fn normal_at(&self, x: f64, y: f64) -> Vector3<f64> {
        let (x, y, _) = self.clamp_xy(x, y);
        let (mut h, grad) = self.heightfield.sample(x, y);
        let mut on_box = false;
        for &i in self.candidate_boxes(x, y) {
            let b = &self.boxes[i as usize];
            if b.z_max > h && b.contains(x, y) {
                h = b.z_max;
                on_box = true;
            }
        }
        if on_box {
            Vector3::z()
        } else {
            Vector3::new(-grad[0], -grad[1], 1.0).normalize()
        }
    }

    pub fn friction_at(&self, x: f64, y: f64) -> f64 {
        let (x, y, _) = self.clamp_xy(x, y);
        self.friction_regions
            .iter()
            .find(|r| r.contains(x, y))
            .map_or(self.default_friction, |r| r.mu)
    }

    /// Perception-only height offset of the cell containing `(x, y)`.
    pub fn cell_offset(&self, x: f64, y: f64, c_sk: f64) -> f64 {
        0.1 * c_sk * self.cells.unit_offsets[self.cells.index(x, y)]
    }

    /// Writes the sampled height grid as whitespace-separated rows (one row per y).
    pub fn export_grid<W: Write>(&self, mut out: W, resolution: f64) -> std::io::Result<()> {
        let n = ((2.0 * HALF_EXTENT) / resolution).round() as usize + 1;
        writeln!(out, "# x0={} y0={} resolution={} n={}", -HALF_EXTENT, -HALF_EXTENT, resolution, n)?;
        for iy in 0..n {
            let y = -HALF_EXTENT + iy as f64 * resolution;
            let row: Vec<String> = (0..n)
                .map(|ix| format!("{:.4}", self.height(-HALF_EXTENT + ix as f64 * resolution, y)))
                .collect();
            writeln!(out, "{}", row.join(" "))?;
        }
        Ok(())
    }
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(rand_distr::StandardNormal)
}

/// Per-tread scale factor of random stairs, `ε ~ N(1.0, 0.2)` clipped away from zero.
pub fn random_stair_scale<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let n = Normal::<f64>::new(1.0, 0.2).expect("valid normal");
    n.sample(rng).clamp(0.2, 1.8)
}

fn noise_field(rng: &mut ChaCha8Rng) -> impl Fn(f64, f64) -> f64 {
    let fbm: Fbm<Perlin> = Fbm::new(rng.random::<u32>())
        .set_octaves(NOISE_OCTAVES)
        .set_frequency(NOISE_FREQUENCY);
    move |x, y| fbm.get([x, y]).clamp(-1.0, 1.0)
}

fn sampled_grid(nodes: bool, f: impl Fn(f64, f64) -> f64) -> Heightfield {
    let cells = ((2.0 * HALF_EXTENT) / RESOLUTION).round() as usize;
    let (n, offset, interpolation) = if nodes {
        (cells + 1, 0.0, Interpolation::Bilinear)
    } else {
        (cells, 0.5 * RESOLUTION, Interpolation::Nearest)
    };
    let mut heights = Vec::with_capacity(n * n);
    for iy in 0..n {
        let y = -HALF_EXTENT + iy as f64 * RESOLUTION + offset;
        for ix in 0..n {
            let x = -HALF_EXTENT + ix as f64 * RESOLUTION + offset;
            heights.push(f(x, y));
        }
    }
    Heightfield { resolution: RESOLUTION, nx: n, ny: n, interpolation, heights }
}

/// Treads as `(x_start, x_end, top)` in the +x direction from [`STAIR_BASE_X`].
fn stair_treads(spec: &TerrainSpec, rng: &mut ChaCha8Rng) -> Vec<(f64, f64, f64)> {
    let h = spec.param("height");
    let d = spec.param("depth");
    let random = spec.kind == TerrainKind::StairsRandom;
    let mut treads = Vec::new();
    // first tread starts one depth past the base
    let mut x = STAIR_BASE_X + d;
    let mut top = 0.0;
    while x < HALF_EXTENT {
        let (dh, dd) = if random {
            (h * random_stair_scale(rng), d * random_stair_scale(rng))
        } else {
            (h, d)
        };
        top += dh;
        let end = (x + dd).min(HALF_EXTENT);
        treads.push((x, end, top));
        x += dd;
    }
    if let Some(last) = treads.last_mut() {
        last.1 = HALF_EXTENT;
    }
    treads
}

/// Generates the patch described by `spec`; a pure function of `(kind, params, seed)`.
pub fn generate(spec: &TerrainSpec) -> Result<TerrainPatch> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let full_y = (-HALF_EXTENT, HALF_EXTENT);
    let (heightfield, boxes) = match spec.kind {
        TerrainKind::Rough => {
            let a = spec.param("amplitude");
            let noise = noise_field(&mut rng);
            (sampled_grid(true, |x, y| a * 0.5 * (noise(x, y) + 1.0)), Vec::new())
        }
        TerrainKind::RoughDiscrete => {
            let a = spec.param("amplitude");
            let levels = spec.param("levels").round().max(2.0);
            let noise = noise_field(&mut rng);
            let grid = sampled_grid(false, |x, y| {
                let u = 0.5 * (noise(x, y) + 1.0);
                let level = (u * levels).floor().min(levels - 1.0);
                a * level / (levels - 1.0)
            });
            (grid, Vec::new())
        }
        TerrainKind::LargeSteps => {
            let h = spec.param("height");
            let noise = noise_field(&mut rng);
            (sampled_grid(false, |x, y| if noise(x, y) > 0.0 { h } else { 0.0 }), Vec::new())
        }
        TerrainKind::Boxes => {
            let max_h = spec.param("height");
            let boxes = (0..BOX_COUNT)
                .map(|_| {
                    let cx = rng.random_range(-HALF_EXTENT..HALF_EXTENT);
                    let cy = rng.random_range(-HALF_EXTENT..HALF_EXTENT);
                    let sx = rng.random_range(BOX_SIDE_RANGE.0..BOX_SIDE_RANGE.1);
                    let sy = rng.random_range(BOX_SIDE_RANGE.0..BOX_SIDE_RANGE.1);
                    let yaw = rng.random_range(0.0..std::f64::consts::PI);
                    let top = max_h * rng.random::<f64>();
                    BoxPrimitive {
                        center: [cx, cy],
                        yaw,
                        half_extents: [0.5 * sx, 0.5 * sy],
                        z_min: 0.0,
                        z_max: top,
                    }
                })
                .collect();
            (Heightfield::flat(), boxes)
        }
        TerrainKind::GridSteps => {
            let h = spec.param("height");
            let w = spec.param("width");
            let n = ((2.0 * HALF_EXTENT) / w).ceil() as usize;
            let mut boxes = Vec::with_capacity(n * n);
            for iy in 0..n {
                let y0 = -HALF_EXTENT + iy as f64 * w;
                let y1 = (y0 + w).min(HALF_EXTENT);
                for ix in 0..n {
                    let x0 = -HALF_EXTENT + ix as f64 * w;
                    let x1 = (x0 + w).min(HALF_EXTENT);
                    let top = 2.0 * h * rng.random::<f64>();
                    boxes.push(BoxPrimitive::axis_aligned(x0, x1, y0, y1, 0.0, top));
                }
            }
            (Heightfield::flat(), boxes)
        }
        TerrainKind::StepStairs => {
            // up five treads, a plateau, then back down
            let h = spec.param("height");
            let d = spec.param("depth");
            let mut boxes = Vec::new();
            let mut x = STAIR_BASE_X + d;
            let profile = [1, 2, 3, 4, 5, 5, 4, 3, 2, 1];
            for level in profile {
                if x >= HALF_EXTENT {
                    break;
                }
                let end = (x + d).min(HALF_EXTENT);
                boxes.push(BoxPrimitive::axis_aligned(x, end, full_y.0, full_y.1, 0.0, level as f64 * h));
                x += d;
            }
            (Heightfield::flat(), boxes)
        }
        TerrainKind::StairsStandard | TerrainKind::StairsRandom => {
            let boxes = stair_treads(spec, &mut rng)
                .into_iter()
                .map(|(x0, x1, top)| BoxPrimitive::axis_aligned(x0, x1, full_y.0, full_y.1, 0.0, top))
                .collect();
            (Heightfield::flat(), boxes)
        }
        TerrainKind::StairsOpen => {
            let boxes = stair_treads(spec, &mut rng)
                .into_iter()
                .map(|(x0, x1, top)| {
                    BoxPrimitive::axis_aligned(
                        x0,
                        x1,
                        full_y.0,
                        full_y.1,
                        (top - OPEN_TREAD_THICKNESS).max(0.0),
                        top,
                    )
                })
                .collect();
            (Heightfield::flat(), boxes)
        }
        TerrainKind::StairsLedged => {
            let mut boxes = Vec::new();
            for (x0, x1, top) in stair_treads(spec, &mut rng) {
                boxes.push(BoxPrimitive::axis_aligned(x0, x1, full_y.0, full_y.1, 0.0, top));
                boxes.push(BoxPrimitive::axis_aligned(
                    x0 - LEDGE_OVERHANG,
                    x0,
                    full_y.0,
                    full_y.1,
                    (top - LEDGE_THICKNESS).max(0.0),
                    top,
                ));
            }
            (Heightfield::flat(), boxes)
        }
    };
    Ok(TerrainPatch::assemble(Some(spec.clone()), heightfield, boxes, &mut rng))
}
