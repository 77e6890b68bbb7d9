//! Seeded synthetic bi-temporal scenes with planted changes of controlled size.
//!
//! Each sample is a textured background with a few static objects (present
//! in both dates). Planted changes are rectangles, discs or bent polylines
//! that are either added in t2 or removed from it. Regions never overlap,
//! so the mask is exactly the union of their rasterisations. The second date
//! then receives a global brightness/contrast jitter, which changes almost
//! every pixel without touching the mask.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ChangeKind, ChangeSample, DataError, Region, Result, ShapeKind, SizeClass};

/// Centre proposals per region before the layout is redrawn.
const PLACEMENT_ATTEMPTS: usize = 500;
/// Full layouts (count, sizes, positions) tried before giving up.
const LAYOUT_ATTEMPTS: usize = 50;
/// Empty pixels kept between neighbouring change bounding boxes.
const GAP: i64 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SplitCounts {
    fn default() -> Self {
        Self {
            train: 16,
            val: 4,
            test: 4,
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| DataError::Invalid(format!("unknown split {s:?}")))
    }
}

impl SplitCounts {
    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }

    /// Samples are generated train first, then val, then test.
    pub fn split_of(&self, index: usize) -> Split {
        if index < self.train {
            Split::Train
        } else if index < self.train + self.val {
            Split::Val
        } else {
            Split::Test
        }
    }

    pub fn range(&self, split: Split) -> std::ops::Range<usize> {
        match split {
            Split::Train => 0..self.train,
            Split::Val => self.train..self.train + self.val,
            Split::Test => self.train + self.val..self.total(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub image_size: usize,
    /// Inclusive range of planted changes per sample.
    pub changes: [usize; 2],
    /// Inclusive radius ranges in pixels.
    pub small_radius: [usize; 2],
    pub medium_radius: [usize; 2],
    pub large_radius: [usize; 2],
    /// Relative frequency of small, medium and large changes.
    pub size_mix: [f64; 3],
    pub shapes: Vec<ShapeKind>,
    pub static_objects: [usize; 2],
    pub texture_seed: u64,
    /// Half-width of the uniform additive brightness offset applied to t2.
    pub brightness_jitter: f64,
    /// Half-width of the uniform contrast factor around 1 applied to t2.
    pub contrast_jitter: f64,
    pub splits: SplitCounts,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            changes: [1, 4],
            small_radius: [2, 6],
            medium_radius: [7, 20],
            large_radius: [21, 60],
            size_mix: [1.0, 1.0, 1.0],
            shapes: ShapeKind::ALL.to_vec(),
            static_objects: [2, 6],
            texture_seed: 7,
            brightness_jitter: 0.1,
            contrast_jitter: 0.15,
            splits: SplitCounts::default(),
        }
    }
}

impl SynthConfig {
    pub fn radius_range(&self, class: SizeClass) -> [usize; 2] {
        match class {
            SizeClass::Small => self.small_radius,
            SizeClass::Medium => self.medium_radius,
            SizeClass::Large => self.large_radius,
        }
    }

    fn mix(&self, class: SizeClass) -> f64 {
        self.size_mix[class as usize]
    }

    /// Largest radius whose bounding box fits inside the image.
    pub fn max_fitting_radius(&self) -> usize {
        self.image_size.saturating_sub(1) / 2
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DataError::Invalid(m));
        if self.image_size == 0 {
            return bad("image_size must be positive".into());
        }
        if self.changes[0] > self.changes[1] || self.static_objects[0] > self.static_objects[1] {
            return bad("count ranges must satisfy min <= max".into());
        }
        let ranges: Vec<[usize; 2]> = SizeClass::ALL.iter().map(|&c| self.radius_range(c)).collect();
        for (c, r) in SizeClass::ALL.iter().zip(&ranges) {
            if r[0] == 0 || r[0] > r[1] {
                return bad(format!("{c} radius range must satisfy 1 <= min <= max"));
            }
        }
        if ranges[0][1] >= ranges[1][0] || ranges[1][1] >= ranges[2][0] {
            return bad("size classes must be disjoint and ordered small < medium < large".into());
        }
        if self.size_mix.iter().any(|w| !w.is_finite() || *w < 0.0) || self.size_mix.iter().sum::<f64>() <= 0.0 {
            return bad("size_mix needs nonnegative weights with a positive sum".into());
        }
        if self.shapes.is_empty() {
            return bad("at least one shape kind is required".into());
        }
        if !(0.0..=0.5).contains(&self.brightness_jitter) || !(0.0..1.0).contains(&self.contrast_jitter) {
            return bad("jitter strengths out of range".into());
        }
        for c in SizeClass::ALL {
            if self.mix(c) > 0.0 && self.radius_range(c)[0] > self.max_fitting_radius() {
                return Err(DataError::Generation(format!(
                    "{c} changes (radius >= {}) cannot fit in a {} px image",
                    self.radius_range(c)[0],
                    self.image_size
                )));
            }
        }
        Ok(())
    }
}

/// All samples of all splits, in split order.
pub fn generate(config: &SynthConfig, seed: u64) -> Result<Vec<ChangeSample>> {
    config.validate()?;
    (0..config.splits.total()).map(|i| generate_one(config, seed, i)).collect()
}

/// Sample `index` of the stream defined by `seed`; independent of the others.
pub fn generate_one(config: &SynthConfig, seed: u64, index: usize) -> Result<ChangeSample> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let mut tex_rng = ChaCha8Rng::seed_from_u64(config.texture_seed);
    tex_rng.set_stream(index as u64);

    let n = config.image_size;
    let mut base = background(n, &mut tex_rng);
    for _ in 0..rng.gen_range(config.static_objects[0]..=config.static_objects[1]) {
        let r = rng.gen_range(2..=12.min(config.max_fitting_radius().max(2))) as i64;
        let shape = *[ShapeKind::Rect, ShapeKind::Disc].choose(&mut rng).unwrap();
        let geom = Geometry::sample(shape, r, &mut rng);
        let center = (rng.gen_range(0..n as i64), rng.gen_range(0..n as i64));
        let color = random_color(&mut rng);
        for (y, x) in geom.pixels(center, n) {
            base[(y * n + x) * 3..][..3].copy_from_slice(&color);
        }
    }

    let placed = plant_layout(config, &mut rng)?;
    let mut t1 = base.clone();
    let mut t2 = base;
    let mut mask = vec![0u8; n * n];
    let mut region_map = vec![0u16; n * n];
    let mut regions = Vec::with_capacity(placed.len());
    for (k, p) in placed.iter().enumerate() {
        let pixels: Vec<(usize, usize)> = p.geometry.pixels(p.center, n).collect();
        let underlying = mean_color(&t1, &pixels, n);
        let color = contrasting_color(underlying, &mut rng);
        let target = match p.kind {
            ChangeKind::Added => &mut t2,
            ChangeKind::Removed => &mut t1,
        };
        for &(y, x) in &pixels {
            target[(y * n + x) * 3..][..3].copy_from_slice(&color);
            mask[y * n + x] = 1;
            region_map[y * n + x] = (k + 1) as u16;
        }
        regions.push(Region {
            center: p.center,
            radius: p.radius as usize,
            size_class: p.class,
            shape: p.geometry.kind(),
            kind: p.kind,
            pixels: pixels.len(),
        });
    }

    let contrast = 1.0 + rng.gen_range(-1.0..=1.0) * config.contrast_jitter;
    let brightness = rng.gen_range(-1.0..=1.0) * config.brightness_jitter;
    for v in &mut t2 {
        *v = ((*v - 0.5) * contrast + 0.5 + brightness).clamp(0.0, 1.0);
    }
    for v in t1.iter_mut().chain(t2.iter_mut()) {
        *v = quantize(*v);
    }
    Ok(ChangeSample {
        height: n,
        width: n,
        image_t1: t1,
        image_t2: t2,
        mask,
        region_map,
        regions,
    })
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

struct Placed {
    center: (i64, i64),
    radius: i64,
    class: SizeClass,
    kind: ChangeKind,
    geometry: Geometry,
}

/// Draws sizes first and places the largest regions first, rejecting centres
/// whose bounding box would touch an already placed one. A layout that gets
/// stuck is redrawn from scratch.
fn plant_layout(config: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<Vec<Placed>> {
    let mut last = (0, 0, SizeClass::Small);
    for _ in 0..LAYOUT_ATTEMPTS {
        match try_layout(config, rng) {
            Ok(placed) => return Ok(placed),
            Err(stuck) => last = stuck,
        }
    }
    let (count, r, class) = last;
    Err(DataError::Generation(format!(
        "could not place {count} changes in a {} px image after {LAYOUT_ATTEMPTS} layouts \
         (stuck at a radius {r} {class} region)",
        config.image_size
    )))
}

fn try_layout(config: &SynthConfig, rng: &mut ChaCha8Rng) -> std::result::Result<Vec<Placed>, (usize, i64, SizeClass)> {
    let n = config.image_size as i64;
    let count = rng.gen_range(config.changes[0]..=config.changes[1]);
    let total: f64 = config.size_mix.iter().sum();
    let mut wanted: Vec<(SizeClass, i64)> = (0..count)
        .map(|_| {
            let mut u = rng.gen::<f64>() * total;
            let mut class = SizeClass::Large;
            for c in SizeClass::ALL {
                if u < config.mix(c) {
                    class = c;
                    break;
                }
                u -= config.mix(c);
            }
            let [lo, hi] = config.radius_range(class);
            let hi = hi.min(config.max_fitting_radius());
            (class, rng.gen_range(lo..=hi) as i64)
        })
        .collect();
    wanted.sort_by(|a, b| b.1.cmp(&a.1));

    let mut placed: Vec<Placed> = Vec::with_capacity(count);
    for (class, r) in wanted {
        let mut spot = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let c = (rng.gen_range(r..n - r), rng.gen_range(r..n - r));
            let clear = placed.iter().all(|p| {
                (c.0 - p.center.0).abs() > r + p.radius + GAP || (c.1 - p.center.1).abs() > r + p.radius + GAP
            });
            if clear {
                spot = Some(c);
                break;
            }
        }
        let center = spot.ok_or((count, r, class))?;
        let shape = *config.shapes.choose(rng).unwrap();
        let kind = if rng.gen::<bool>() { ChangeKind::Added } else { ChangeKind::Removed };
        let geometry = Geometry::sample(shape, r, rng);
        placed.push(Placed {
            center,
            radius: r,
            class,
            kind,
            geometry,
        });
    }
    Ok(placed)
}

/// Shape relative to an integer centre; every pixel lies within `radius` of
/// the centre in both axes.
#[derive(Clone, Debug)]
enum Geometry {
    Rect { half_h: i64, half_w: i64 },
    Disc { radius: i64 },
    Polyline { vertices: [(f64, f64); 3], half_width: f64, radius: i64 },
}

impl Geometry {
    fn sample(kind: ShapeKind, r: i64, rng: &mut ChaCha8Rng) -> Self {
        match kind {
            ShapeKind::Disc => Geometry::Disc { radius: r },
            ShapeKind::Rect => {
                let short = ((r as f64) * rng.gen_range(0.5..=1.0)).round() as i64;
                if rng.gen::<bool>() {
                    Geometry::Rect { half_h: r, half_w: short }
                } else {
                    Geometry::Rect { half_h: short, half_w: r }
                }
            }
            ShapeKind::Polyline => {
                let half_width = (r as f64 / 4.0).max(1.0);
                let reach = (r as f64 - half_width).max(0.0);
                let a = rng.gen_range(0.0..std::f64::consts::TAU);
                let b = a + std::f64::consts::FRAC_PI_2 + rng.gen_range(-0.6..0.6);
                let bend = reach * rng.gen_range(0.3..0.8);
                Geometry::Polyline {
                    vertices: [
                        (reach * a.sin(), reach * a.cos()),
                        (bend * b.sin(), bend * b.cos()),
                        (-reach * a.sin(), -reach * a.cos()),
                    ],
                    half_width,
                    radius: r,
                }
            }
        }
    }

    fn kind(&self) -> ShapeKind {
        match self {
            Geometry::Rect { .. } => ShapeKind::Rect,
            Geometry::Disc { .. } => ShapeKind::Disc,
            Geometry::Polyline { .. } => ShapeKind::Polyline,
        }
    }

    fn extent(&self) -> i64 {
        match *self {
            Geometry::Rect { half_h, half_w } => half_h.max(half_w),
            Geometry::Disc { radius } | Geometry::Polyline { radius, .. } => radius,
        }
    }

    fn contains(&self, dy: i64, dx: i64) -> bool {
        match *self {
            Geometry::Rect { half_h, half_w } => dy.abs() <= half_h && dx.abs() <= half_w,
            Geometry::Disc { radius } => dy * dy + dx * dx <= radius * radius,
            Geometry::Polyline { vertices, half_width, .. } => {
                let p = (dy as f64, dx as f64);
                vertices.windows(2).any(|s| segment_distance(p, s[0], s[1]) <= half_width)
            }
        }
    }

    /// Pixels inside the image, row-major.
    fn pixels(&self, center: (i64, i64), n: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        let e = self.extent();
        let n = n as i64;
        (center.0 - e..=center.0 + e)
            .flat_map(move |y| (center.1 - e..=center.1 + e).map(move |x| (y, x)))
            .filter(move |&(y, x)| {
                (0..n).contains(&y) && (0..n).contains(&x) && self.contains(y - center.0, x - center.1)
            })
            .map(|(y, x)| (y as usize, x as usize))
    }
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (vy, vx) = (b.0 - a.0, b.1 - a.1);
    let len2 = vy * vy + vx * vx;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * vy + (p.1 - a.1) * vx) / len2).clamp(0.0, 1.0)
    };
    let (dy, dx) = (p.0 - a.0 - t * vy, p.1 - a.1 - t * vx);
    (dy * dy + dx * dx).sqrt()
}

fn random_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [rng.gen(), rng.gen(), rng.gen()]
}

fn mean_color(img: &[f64], pixels: &[(usize, usize)], n: usize) -> [f64; 3] {
    let mut m = [0.0; 3];
    for &(y, x) in pixels {
        for c in 0..3 {
            m[c] += img[(y * n + x) * 3 + c];
        }
    }
    m.map(|v| v / pixels.len().max(1) as f64)
}

/// A colour whose mean absolute channel difference from `under` is at least
/// 0.25, or the most distant of the candidates drawn.
fn contrasting_color(under: [f64; 3], rng: &mut ChaCha8Rng) -> [f64; 3] {
    let dist = |c: &[f64; 3]| c.iter().zip(&under).map(|(a, b)| (a - b).abs()).sum::<f64>() / 3.0;
    let mut best = random_color(rng);
    for _ in 0..32 {
        if dist(&best) >= 0.25 {
            break;
        }
        let c = random_color(rng);
        if dist(&c) > dist(&best) {
            best = c;
        }
    }
    best
}

/// Smooth multi-octave value noise around a random base colour.
fn background(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let base: [f64; 3] = [rng.gen_range(0.25..0.75), rng.gen_range(0.25..0.75), rng.gen_range(0.25..0.75)];
    let tint: [f64; 3] = [rng.gen_range(0.7..1.3), rng.gen_range(0.7..1.3), rng.gen_range(0.7..1.3)];
    let coarse = value_noise(n, 16, rng);
    let fine = value_noise(n, 4, rng);
    let mut out = vec![0.0; n * n * 3];
    for p in 0..n * n {
        let grain: f64 = rng.gen_range(-1.0..1.0);
        let v = 0.12 * coarse[p] + 0.05 * fine[p] + 0.02 * grain;
        for c in 0..3 {
            out[p * 3 + c] = (base[c] + v * tint[c]).clamp(0.0, 1.0);
        }
    }
    out
}

fn value_noise(n: usize, cell: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let g = n / cell + 2;
    let lattice: Vec<f64> = (0..g * g).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    let mut out = vec![0.0; n * n];
    for y in 0..n {
        let (gy, ty) = (y / cell, smooth((y % cell) as f64 / cell as f64));
        for x in 0..n {
            let (gx, tx) = (x / cell, smooth((x % cell) as f64 / cell as f64));
            let at = |dy: usize, dx: usize| lattice[(gy + dy) * g + gx + dx];
            let top = at(0, 0) * (1.0 - tx) + at(0, 1) * tx;
            let bottom = at(1, 0) * (1.0 - tx) + at(1, 1) * tx;
            out[y * n + x] = top * (1.0 - ty) + bottom * ty;
        }
    }
    out
}
