//! Deterministic stick-figure scenes at paired resolutions.
//!
//! A figure is rendered once at high resolution; the low-resolution view is
//! its exact `m×m` block average, so both views show the same content.
//!
//! Randomness comes from ChaCha8 (`rand_chacha`), seeded with the 64-bit
//! dataset seed. Each sample draws from its own stream, numbered by split
//! and index, so any sample can be regenerated on its own and results do
//! not depend on platform or generation order. Keypoints are snapped to a
//! 1/64-pixel grid, which makes the low-resolution coordinates (`/ m`)
//! exact rationals.

use std::f64::consts::FRAC_PI_2;
use std::io::{Read, Write};

use cdkd_autograd::avg_pool;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{CoreError, Result};
use crate::simcc::KeypointSet;

pub const KEYPOINT_NAMES: [&str; 9] = [
    "head",
    "left_hand",
    "right_hand",
    "left_foot",
    "right_foot",
    "left_elbow",
    "right_elbow",
    "left_knee",
    "right_knee",
];

/// Keypoints are multiples of `1 / COORD_GRID` pixels.
pub const COORD_GRID: f64 = 64.0;
const MAX_ATTEMPTS: usize = 100;

/// A closed sampling interval; `lo == hi` pins the value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Span {
    pub lo: f64,
    pub hi: f64,
}

impl Span {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub const fn point(v: f64) -> Self {
        Self { lo: v, hi: v }
    }

    /// Always consumes one draw, so collapsing a span never shifts the
    /// stream seen by later parameters.
    fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.random();
        self.lo + u * (self.hi - self.lo)
    }
}

/// Pose parameter ranges. Positions are fractions of the canvas side,
/// angles are radians and lengths scale a 64-pixel reference figure.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseRanges {
    pub center_x: Span,
    pub center_y: Span,
    pub scale: Span,
    pub lean: Span,
    pub arm_raise: Span,
    pub arm_bend: Span,
    pub leg_spread: Span,
    pub leg_bend: Span,
}

impl Default for PoseRanges {
    fn default() -> Self {
        Self {
            center_x: Span::new(0.35, 0.65),
            center_y: Span::new(0.42, 0.55),
            scale: Span::new(0.75, 1.05),
            lean: Span::new(-0.3, 0.3),
            arm_raise: Span::new(-1.1, 1.1),
            arm_bend: Span::new(-1.0, 1.0),
            leg_spread: Span::new(0.1, 0.7),
            leg_bend: Span::new(-0.6, 0.6),
        }
    }
}

impl PoseRanges {
    /// Every range pinned to its midpoint.
    pub fn collapsed(&self) -> Self {
        let mid = |s: Span| Span::point((s.lo + s.hi) / 2.0);
        Self {
            center_x: mid(self.center_x),
            center_y: mid(self.center_y),
            scale: mid(self.scale),
            lean: mid(self.lean),
            arm_raise: mid(self.arm_raise),
            arm_bend: mid(self.arm_bend),
            leg_spread: mid(self.leg_spread),
            leg_bend: mid(self.leg_bend),
        }
    }

    fn spans(&self) -> [(&'static str, Span); 8] {
        [
            ("center_x", self.center_x),
            ("center_y", self.center_y),
            ("scale", self.scale),
            ("lean", self.lean),
            ("arm_raise", self.arm_raise),
            ("arm_bend", self.arm_bend),
            ("leg_spread", self.leg_spread),
            ("leg_bend", self.leg_bend),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub high_side: usize,
    pub m: usize,
    /// 5 (head, hands, feet) or 9 (adds elbows and knees).
    pub num_keypoints: usize,
    /// Full width of limb strokes in high-resolution pixels.
    pub limb_thickness: f64,
    pub joint_radius: f64,
    pub head_radius: f64,
    pub noise_std: f64,
    pub pose: PoseRanges,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            high_side: 64,
            m: 4,
            num_keypoints: 5,
            limb_thickness: 1.0,
            joint_radius: 1.5,
            head_radius: 4.0,
            noise_std: 0.02,
            pose: PoseRanges::default(),
        }
    }
}

impl SceneConfig {
    pub fn low_side(&self) -> usize {
        self.high_side / self.m
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.high_side == 0 || self.high_side % self.m != 0 {
            return Err(CoreError::Config(format!(
                "scale factor {} must divide high side {}",
                self.m, self.high_side
            )));
        }
        if self.num_keypoints != 5 && self.num_keypoints != 9 {
            return Err(CoreError::Config(format!(
                "num_keypoints must be 5 or 9, got {}",
                self.num_keypoints
            )));
        }
        let sizes = [self.limb_thickness, self.joint_radius, self.head_radius];
        if sizes.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(CoreError::Config("stroke sizes must be positive".into()));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(CoreError::Config(format!("noise_std must be >= 0, got {}", self.noise_std)));
        }
        for (name, s) in self.pose.spans() {
            if !(s.lo <= s.hi && s.lo.is_finite() && s.hi.is_finite()) {
                return Err(CoreError::Config(format!("pose range {name} is empty: [{}, {}]", s.lo, s.hi)));
            }
        }
        Ok(())
    }

    /// One `key=value` line per field, in a fixed order.
    pub fn echo(&self) -> String {
        let mut s = format!(
            "high_side={}\nm={}\nnum_keypoints={}\nlimb_thickness={}\njoint_radius={}\nhead_radius={}\nnoise_std={}\n",
            self.high_side,
            self.m,
            self.num_keypoints,
            self.limb_thickness,
            self.joint_radius,
            self.head_radius,
            self.noise_std
        );
        for (name, span) in self.pose.spans() {
            s.push_str(&format!("pose.{name}={},{}\n", span.lo, span.hi));
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    /// `[1, side, side]` row-major, values in `[0, 1]`.
    pub high: Vec<f64>,
    pub low: Vec<f64>,
    /// `[K, 2]` in high-resolution pixels.
    pub keypoints_high: Vec<f64>,
    pub keypoints_low: Vec<f64>,
    pub visible: Vec<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    fn code(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Val => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

/// The random stream that owns sample `index` of `split`.
pub fn sample_stream(seed: u64, split: Split, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((split.code() << 40) | index);
    rng
}

struct Figure {
    head: (f64, f64),
    neck: (f64, f64),
    hip: (f64, f64),
    elbows: [(f64, f64); 2],
    hands: [(f64, f64); 2],
    knees: [(f64, f64); 2],
    feet: [(f64, f64); 2],
}

fn snap(p: (f64, f64)) -> (f64, f64) {
    ((p.0 * COORD_GRID).round() / COORD_GRID, (p.1 * COORD_GRID).round() / COORD_GRID)
}

fn step(from: (f64, f64), angle: f64, len: f64) -> (f64, f64) {
    (from.0 + len * angle.cos(), from.1 + len * angle.sin())
}

fn sample_figure<R: Rng>(rng: &mut R, cfg: &SceneConfig) -> Figure {
    let side = cfg.high_side as f64;
    let p = &cfg.pose;
    let cx = p.center_x.sample(rng) * side;
    let cy = p.center_y.sample(rng) * side;
    let unit = p.scale.sample(rng) * side / 64.0;
    let lean = p.lean.sample(rng);
    let raise = [p.arm_raise.sample(rng), p.arm_raise.sample(rng)];
    let arm_bend = [p.arm_bend.sample(rng), p.arm_bend.sample(rng)];
    let spread = [p.leg_spread.sample(rng), p.leg_spread.sample(rng)];
    let leg_bend = [p.leg_bend.sample(rng), p.leg_bend.sample(rng)];

    // Image y grows downward; the torso axis points from neck to hip.
    let down = FRAC_PI_2 + lean;
    let half_torso = 8.0 * unit;
    let neck = step((cx, cy), down, -half_torso);
    let hip = step((cx, cy), down, half_torso);
    let head = step(neck, down, -7.0 * unit);

    // Left limbs reach toward −x, right limbs toward +x, so the two sides
    // are never mirror-ambiguous.
    let arm_dirs = [std::f64::consts::PI - raise[0], raise[1]];
    let leg_dirs = [down + spread[0], down - spread[1]];
    let mut elbows = [(0.0, 0.0); 2];
    let mut hands = [(0.0, 0.0); 2];
    let mut knees = [(0.0, 0.0); 2];
    let mut feet = [(0.0, 0.0); 2];
    for s in 0..2 {
        let sign = if s == 0 { -1.0 } else { 1.0 };
        elbows[s] = snap(step(neck, arm_dirs[s], 9.0 * unit));
        hands[s] = snap(step(elbows[s], arm_dirs[s] + sign * arm_bend[s], 8.0 * unit));
        knees[s] = snap(step(hip, leg_dirs[s], 10.0 * unit));
        feet[s] = snap(step(knees[s], leg_dirs[s] - sign * leg_bend[s], 9.0 * unit));
    }
    Figure {
        head: snap(head),
        neck,
        hip,
        elbows,
        hands,
        knees,
        feet,
    }
}

impl Figure {
    fn keypoints(&self, count: usize) -> Vec<(f64, f64)> {
        let all = [
            self.head,
            self.hands[0],
            self.hands[1],
            self.feet[0],
            self.feet[1],
            self.elbows[0],
            self.elbows[1],
            self.knees[0],
            self.knees[1],
        ];
        all[..count].to_vec()
    }

    fn segments(&self) -> [((f64, f64), (f64, f64)); 9] {
        [
            (self.neck, self.hip),
            (self.neck, self.elbows[0]),
            (self.elbows[0], self.hands[0]),
            (self.neck, self.elbows[1]),
            (self.elbows[1], self.hands[1]),
            (self.hip, self.knees[0]),
            (self.knees[0], self.feet[0]),
            (self.hip, self.knees[1]),
            (self.knees[1], self.feet[1]),
        ]
    }
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    (p.0 - a.0 - t * dx).hypot(p.1 - a.1 - t * dy)
}

/// Anti-aliased coverage of a shape at distance `d` from its core, for a
/// stroke of half-width `r`.
fn coverage(r: f64, d: f64) -> f64 {
    (r + 0.5 - d).clamp(0.0, 1.0)
}

fn render(fig: &Figure, cfg: &SceneConfig) -> Vec<f64> {
    let side = cfg.high_side;
    let half = cfg.limb_thickness / 2.0;
    // Every keypoint gets a disk; the head is the larger one.
    let disks: Vec<((f64, f64), f64)> = fig
        .keypoints(cfg.num_keypoints)
        .into_iter()
        .enumerate()
        .map(|(i, p)| (p, if i == 0 { cfg.head_radius } else { cfg.joint_radius }))
        .collect();
    let segments = fig.segments();
    let mut img = vec![0.0; side * side];
    for (i, px) in img.iter_mut().enumerate() {
        let c = ((i % side) as f64 + 0.5, (i / side) as f64 + 0.5);
        let mut v: f64 = 0.0;
        for &(a, b) in &segments {
            v = v.max(coverage(half, segment_distance(c, a, b)));
        }
        for &(center, r) in &disks {
            v = v.max(coverage(r, (c.0 - center.0).hypot(c.1 - center.1)));
        }
        *px = v;
    }
    img
}

/// Draws one sample from `rng`; fails only when no in-canvas pose is found
/// within 100 attempts.
pub fn generate_sample<R: Rng>(rng: &mut R, cfg: &SceneConfig) -> Result<SyntheticSample> {
    cfg.validate()?;
    let side = cfg.high_side as f64;
    let fig = (0..MAX_ATTEMPTS)
        .map(|_| sample_figure(rng, cfg))
        .find(|f| {
            f.keypoints(cfg.num_keypoints)
                .iter()
                .all(|&(x, y)| (0.0..side).contains(&x) && (0.0..side).contains(&y))
        })
        .ok_or(CoreError::PoseExhausted(MAX_ATTEMPTS))?;

    let mut high = render(&fig, cfg);
    if cfg.noise_std > 0.0 {
        let normal = Normal::new(0.0, cfg.noise_std).map_err(|e| CoreError::Config(e.to_string()))?;
        for v in high.iter_mut() {
            *v = (*v + normal.sample(rng)).clamp(0.0, 1.0);
        }
    }
    let low = avg_pool(&high, 1, cfg.high_side, cfg.high_side, cfg.m);

    let kps = fig.keypoints(cfg.num_keypoints);
    let mut keypoints_high = Vec::with_capacity(2 * kps.len());
    let mut keypoints_low = Vec::with_capacity(2 * kps.len());
    let low_grid = COORD_GRID * cfg.m as f64;
    for (x, y) in kps {
        for v in [x, y] {
            // `v · 64` is an integer, so the division below is the exact
            // rational `v / m` rounded once.
            keypoints_high.push(v);
            keypoints_low.push((v * COORD_GRID) / low_grid);
        }
    }
    Ok(SyntheticSample {
        high,
        low,
        keypoints_high,
        keypoints_low,
        visible: vec![true; cfg.num_keypoints],
    })
}

/// A generated split, or one read back from a dump.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub split: Split,
    pub high_side: usize,
    pub m: usize,
    pub num_keypoints: usize,
    /// Scene configuration the samples were drawn with.
    pub scene_echo: String,
    pub samples: Vec<SyntheticSample>,
}

/// Images and targets for a set of sample indices.
#[derive(Debug, Clone)]
pub struct Batch {
    /// `[B, 1, high_side, high_side]`.
    pub high: Vec<f64>,
    /// `[B, 1, low_side, low_side]`.
    pub low: Vec<f64>,
    pub gt_high: KeypointSet,
    pub gt_low: KeypointSet,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn low_side(&self) -> usize {
        self.high_side / self.m
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        let k = self.num_keypoints;
        let mut b = Batch {
            high: Vec::with_capacity(indices.len() * self.high_side * self.high_side),
            low: Vec::with_capacity(indices.len() * self.low_side() * self.low_side()),
            gt_high: KeypointSet::new(0, k, vec![], vec![])?,
            gt_low: KeypointSet::new(0, k, vec![], vec![])?,
        };
        for &i in indices {
            let s = self
                .samples
                .get(i)
                .ok_or_else(|| CoreError::Shape(format!("sample {i} of {}", self.len())))?;
            b.high.extend_from_slice(&s.high);
            b.low.extend_from_slice(&s.low);
            b.gt_high.coords.extend_from_slice(&s.keypoints_high);
            b.gt_low.coords.extend_from_slice(&s.keypoints_low);
            b.gt_high.visible.extend_from_slice(&s.visible);
            b.gt_low.visible.extend_from_slice(&s.visible);
        }
        b.gt_high.batch = indices.len();
        b.gt_low.batch = indices.len();
        Ok(b)
    }
}

fn generate_split(seed: u64, split: Split, n: usize, cfg: &SceneConfig) -> Result<Dataset> {
    let samples = (0..n as u64)
        .map(|i| generate_sample(&mut sample_stream(seed, split, i), cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        split,
        high_side: cfg.high_side,
        m: cfg.m,
        num_keypoints: cfg.num_keypoints,
        scene_echo: cfg.echo(),
        samples,
    })
}

/// Train and validation splits drawn from disjoint streams of `seed`.
pub fn make_dataset(seed: u64, n_train: usize, n_val: usize, cfg: &SceneConfig) -> Result<(Dataset, Dataset)> {
    if n_train == 0 || n_val == 0 {
        return Err(CoreError::Config("both splits need at least one sample".into()));
    }
    cfg.validate()?;
    Ok((
        generate_split(seed, Split::Train, n_train, cfg)?,
        generate_split(seed, Split::Val, n_val, cfg)?,
    ))
}

/// Training order for `epoch`: a permutation of `0..n` from a stream
/// derived from `(seed, epoch)`.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((3 << 40) | epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

const DUMP_MAGIC: &[u8; 4] = b"CDKS";
const DUMP_VERSION: u32 = 1;

fn put_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn put_f64s<W: Write>(w: &mut W, vs: &[f64]) -> Result<()> {
    for v in vs {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn get_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn get_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; 8 * n];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

/// Writes a split as: magic `CDKS`, version, split code, sample count,
/// high side, m, keypoint count, the scene echo (length-prefixed UTF-8),
/// then per sample the high image, low image, high and low keypoints as
/// f64 and one visibility byte per keypoint. Little-endian throughout.
pub fn write_dump<W: Write>(ds: &Dataset, w: &mut W) -> Result<()> {
    w.write_all(DUMP_MAGIC)?;
    put_u32(w, DUMP_VERSION)?;
    put_u32(w, ds.split.code() as u32)?;
    for v in [ds.len(), ds.high_side, ds.m, ds.num_keypoints, ds.scene_echo.len()] {
        put_u32(w, u32::try_from(v).map_err(|_| CoreError::Format(format!("{v} exceeds u32")))?)?;
    }
    w.write_all(ds.scene_echo.as_bytes())?;
    for s in &ds.samples {
        put_f64s(w, &s.high)?;
        put_f64s(w, &s.low)?;
        put_f64s(w, &s.keypoints_high)?;
        put_f64s(w, &s.keypoints_low)?;
        w.write_all(&s.visible.iter().map(|&v| u8::from(v)).collect::<Vec<_>>())?;
    }
    Ok(())
}

pub fn read_dump<R: Read>(r: &mut R) -> Result<Dataset> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != DUMP_MAGIC {
        return Err(CoreError::Format("not a dataset dump (bad magic)".into()));
    }
    let version = get_u32(r)?;
    if version != DUMP_VERSION {
        return Err(CoreError::Format(format!("unsupported dump version {version}")));
    }
    let split = match get_u32(r)? {
        1 => Split::Train,
        2 => Split::Val,
        c => return Err(CoreError::Format(format!("unknown split code {c}"))),
    };
    let count = get_u32(r)? as usize;
    let high_side = get_u32(r)? as usize;
    let m = get_u32(r)? as usize;
    let num_keypoints = get_u32(r)? as usize;
    let echo_len = get_u32(r)? as usize;
    if m == 0 || high_side % m != 0 {
        return Err(CoreError::Format(format!("scale {m} does not divide side {high_side}")));
    }
    let mut echo = vec![0u8; echo_len];
    r.read_exact(&mut echo)?;
    let scene_echo = String::from_utf8(echo).map_err(|e| CoreError::Format(e.to_string()))?;
    let low_side = high_side / m;
    let mut samples = Vec::with_capacity(count);
    for _ in 0..count {
        let high = get_f64s(r, high_side * high_side)?;
        let low = get_f64s(r, low_side * low_side)?;
        let keypoints_high = get_f64s(r, 2 * num_keypoints)?;
        let keypoints_low = get_f64s(r, 2 * num_keypoints)?;
        let mut vis = vec![0u8; num_keypoints];
        r.read_exact(&mut vis)?;
        samples.push(SyntheticSample {
            high,
            low,
            keypoints_high,
            keypoints_low,
            visible: vis.into_iter().map(|v| v != 0).collect(),
        });
    }
    Ok(Dataset {
        split,
        high_side,
        m,
        num_keypoints,
        scene_echo,
        samples,
    })
}
