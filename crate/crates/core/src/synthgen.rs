//! Deterministic paired-modality sequences with ground truth, visibility
//! flags and scripted degradation events.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::embed::{FramePair, Image};
use crate::error::{Error, Result};
use crate::head::BBox;

/// Minimum distance in pixels between the target box and the canvas edge.
pub const EDGE_MARGIN: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Box,
    Disc,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Motion {
    Linear { vx: f64, vy: f64 },
    /// Offset `amplitude * sin(2π t / period)` on each axis, starting at 0.
    Sinusoidal { ax: f64, ay: f64, period: f64 },
    /// Uniform steps of at most `max_step` per axis, reflected at the edges.
    RandomWalk { max_step: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Rgb,
    X,
}

impl Modality {
    pub fn name(self) -> &'static str {
        match self {
            Modality::Rgb => "rgb",
            Modality::X => "x",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "rgb" => Ok(Modality::Rgb),
            "x" => Ok(Modality::X),
            _ => Err(Error::Scene(format!("unknown modality `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DegradeMode {
    Blackout,
    Noise { sigma: f64 },
    /// `k x k` box blur with zero padding; `k` odd.
    Blur { k: usize },
    /// Flat gray patch over the target box.
    Occluder,
}

impl DegradeMode {
    /// `blackout`, `noise:<sigma>`, `blur:<k>` or `occluder`.
    pub fn parse(s: &str) -> Result<Self> {
        let (name, arg) = s.split_once(':').unwrap_or((s, ""));
        let num = |a: &str| -> Result<f64> {
            a.parse()
                .map_err(|_| Error::Scene(format!("bad degradation argument in `{s}`")))
        };
        match name {
            "blackout" => Ok(DegradeMode::Blackout),
            "occluder" => Ok(DegradeMode::Occluder),
            "noise" => Ok(DegradeMode::Noise { sigma: num(arg)? }),
            "blur" => Ok(DegradeMode::Blur { k: num(arg)? as usize }),
            _ => Err(Error::Scene(format!("unknown degradation mode `{s}`"))),
        }
    }

    pub fn label(&self) -> String {
        match self {
            DegradeMode::Blackout => "blackout".into(),
            DegradeMode::Occluder => "occluder".into(),
            DegradeMode::Noise { sigma } => format!("noise:{sigma}"),
            DegradeMode::Blur { k } => format!("blur:{k}"),
        }
    }
}

/// Degradation of one modality over the inclusive frame range `[start, end]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Degradation {
    pub modality: Modality,
    pub start: usize,
    pub end: usize,
    pub mode: DegradeMode,
}

/// Blackouts that switch between the two modalities every `period` frames,
/// leaving `gap` clean frames between blocks. The first `lead` frames are
/// clean.
pub fn alternating_blackout(frames: usize, lead: usize, period: usize, gap: usize) -> Vec<Degradation> {
    let mut events = Vec::new();
    let mut start = lead;
    let mut modality = Modality::Rgb;
    while start < frames && period > 0 {
        let end = (start + period - 1).min(frames - 1);
        events.push(Degradation {
            modality,
            start,
            end,
            mode: DegradeMode::Blackout,
        });
        modality = match modality {
            Modality::Rgb => Modality::X,
            Modality::X => Modality::Rgb,
        };
        start = end + 1 + gap;
    }
    events
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub shape: Shape,
    pub target_w: f64,
    pub target_h: f64,
    /// Initial target center; `None` places it at the canvas center.
    pub start: Option<(f64, f64)>,
    pub motion: Motion,
    pub target_rgb: [f64; 3],
    pub target_x: f64,
    pub background_rgb: [f64; 3],
    pub background_x: f64,
    /// Amplitude of the per-pixel texture on the target and background.
    pub texture: f64,
    pub distractors: usize,
    pub distractor_size: f64,
    pub distractor_rgb: [f64; 3],
    pub distractor_x: f64,
    pub events: Vec<Degradation>,
    /// Inclusive frame range during which the target is not rendered.
    pub absent: Option<(usize, usize)>,
    /// Maximum offset in pixels of the X-modality ground truth.
    pub gt_jitter: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            frames: 60,
            width: 128,
            height: 128,
            shape: Shape::Box,
            target_w: 16.0,
            target_h: 12.0,
            start: None,
            motion: Motion::Linear { vx: 0.5, vy: 0.25 },
            target_rgb: [0.85, 0.25, 0.2],
            target_x: 0.9,
            background_rgb: [0.45, 0.5, 0.55],
            background_x: 0.1,
            texture: 0.05,
            distractors: 2,
            distractor_size: 10.0,
            distractor_rgb: [0.3, 0.6, 0.35],
            distractor_x: 0.5,
            events: Vec::new(),
            absent: None,
            gt_jitter: 0.0,
        }
    }
}

impl SceneSpec {
    fn start_center(&self) -> (f64, f64) {
        self.start
            .unwrap_or((self.width as f64 / 2.0, self.height as f64 / 2.0))
    }

    fn center_bounds(&self) -> (f64, f64, f64, f64) {
        let hw = self.target_w / 2.0 + EDGE_MARGIN;
        let hh = self.target_h / 2.0 + EDGE_MARGIN;
        (hw, self.width as f64 - hw, hh, self.height as f64 - hh)
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.width == 0 || self.height == 0 {
            return Err(Error::Scene("frames, width and height must be positive".into()));
        }
        if !(self.target_w > 0.0 && self.target_h > 0.0) {
            return Err(Error::Scene("target extent must be positive".into()));
        }
        let (x0, x1, y0, y1) = self.center_bounds();
        if x0 > x1 || y0 > y1 {
            return Err(Error::Scene("target does not fit inside the canvas".into()));
        }
        if !matches!(self.motion, Motion::RandomWalk { .. }) {
            for t in 0..self.frames {
                let (cx, cy) = self.deterministic_center(t);
                if cx < x0 || cx > x1 || cy < y0 || cy > y1 {
                    return Err(Error::Scene(format!(
                        "target leaves the canvas at frame {t} (center {cx:.2}, {cy:.2})"
                    )));
                }
            }
        }
        for e in &self.events {
            validate_event(e, self.frames)?;
            if let DegradeMode::Blur { k } = e.mode {
                if k % 2 == 0 {
                    return Err(Error::Scene(format!("blur kernel {k} must be odd")));
                }
            }
        }
        if let Some((a, b)) = self.absent {
            if a > b || b >= self.frames {
                return Err(Error::Scene(format!("absent interval [{a}, {b}] outside sequence")));
            }
        }
        Ok(())
    }

    fn deterministic_center(&self, t: usize) -> (f64, f64) {
        let (sx, sy) = self.start_center();
        let t = t as f64;
        match self.motion {
            Motion::Linear { vx, vy } => (sx + vx * t, sy + vy * t),
            Motion::Sinusoidal { ax, ay, period } => {
                let phase = std::f64::consts::TAU * t / period;
                (sx + ax * phase.sin(), sy + ay * phase.sin())
            }
            Motion::RandomWalk { .. } => (sx, sy),
        }
    }

    /// Target centers for every frame.
    pub fn trajectory(&self, rng: &mut ChaCha8Rng) -> Vec<(f64, f64)> {
        match self.motion {
            Motion::RandomWalk { max_step } => {
                let (x0, x1, y0, y1) = self.center_bounds();
                let (mut cx, mut cy) = self.start_center();
                let mut out = Vec::with_capacity(self.frames);
                for t in 0..self.frames {
                    if t > 0 {
                        cx = reflect(cx + rng.random_range(-max_step..=max_step), x0, x1);
                        cy = reflect(cy + rng.random_range(-max_step..=max_step), y0, y1);
                    }
                    out.push((cx, cy));
                }
                out
            }
            _ => (0..self.frames).map(|t| self.deterministic_center(t)).collect(),
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "frames = {}", self.frames);
        let _ = writeln!(s, "size = {}x{}", self.width, self.height);
        let _ = writeln!(s, "shape = {:?}", self.shape);
        let _ = writeln!(s, "target = {}x{}", self.target_w, self.target_h);
        let _ = writeln!(s, "motion = {:?}", self.motion);
        let _ = writeln!(s, "distractors = {}", self.distractors);
        let _ = writeln!(s, "gt_jitter = {}", self.gt_jitter);
        if let Some((a, b)) = self.absent {
            let _ = writeln!(s, "absent = {a}-{b}");
        }
        for e in &self.events {
            let _ = writeln!(s, "event = {} {}-{} {}", e.modality.name(), e.start, e.end, e.mode.label());
        }
        s
    }
}

fn reflect(v: f64, lo: f64, hi: f64) -> f64 {
    if hi <= lo {
        return lo;
    }
    let mut v = v;
    while v < lo || v > hi {
        if v < lo {
            v = 2.0 * lo - v;
        }
        if v > hi {
            v = 2.0 * hi - v;
        }
    }
    v
}

fn validate_event(e: &Degradation, frames: usize) -> Result<()> {
    if e.start > e.end || e.end >= frames {
        return Err(Error::Scene(format!(
            "event interval [{}, {}] outside a {frames}-frame sequence",
            e.start, e.end
        )));
    }
    Ok(())
}

/// Paired frames with per-frame ground truth and visibility.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceDataset {
    pub frames: Vec<FramePair>,
    pub gt: Vec<BBox>,
    /// Per-modality ground truth of the X stream, when it differs.
    pub gt_x: Option<Vec<BBox>>,
    pub visible: Vec<bool>,
}

impl SequenceDataset {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.frames.len();
        if self.gt.len() != n || self.visible.len() != n || self.gt_x.as_ref().is_some_and(|g| g.len() != n) {
            return Err(Error::Scene("frames, ground truth and visibility differ in length".into()));
        }
        for (i, (b, v)) in self.gt.iter().zip(&self.visible).enumerate() {
            if *v && !b.is_valid() {
                return Err(Error::Scene(format!("invalid ground truth at visible frame {i}")));
            }
        }
        Ok(())
    }

    pub fn gt_x_or_rgb(&self) -> &[BBox] {
        self.gt_x.as_deref().unwrap_or(&self.gt)
    }

    pub fn save(&self, dir: &Path, spec_text: Option<&str>) -> Result<()> {
        self.validate()?;
        fs::create_dir_all(dir.join("rgb"))?;
        fs::create_dir_all(dir.join("x"))?;
        for (i, f) in self.frames.iter().enumerate() {
            f.rgb.save_ppm(&dir.join("rgb").join(format!("{i:06}.ppm")))?;
            f.x.save_ppm(&dir.join("x").join(format!("{i:06}.ppm")))?;
        }
        fs::write(dir.join("groundtruth.txt"), boxes_to_text(&self.gt))?;
        if let Some(gx) = &self.gt_x {
            fs::write(dir.join("groundtruth_x.txt"), boxes_to_text(gx))?;
        }
        let vis: String = self.visible.iter().map(|v| if *v { "1\n" } else { "0\n" }).collect();
        fs::write(dir.join("visibility.txt"), vis)?;
        if let Some(s) = spec_text {
            fs::write(dir.join("spec.txt"), s)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let gt = parse_boxes(&fs::read_to_string(dir.join("groundtruth.txt"))?)?;
        let gx_path = dir.join("groundtruth_x.txt");
        let gt_x = if gx_path.exists() {
            Some(parse_boxes(&fs::read_to_string(gx_path)?)?)
        } else {
            None
        };
        let vis_path = dir.join("visibility.txt");
        let visible = if vis_path.exists() {
            fs::read_to_string(vis_path)?
                .lines()
                .filter(|l| !l.trim().is_empty())
                .map(|l| match l.trim() {
                    "1" => Ok(true),
                    "0" => Ok(false),
                    other => Err(Error::Format(format!("bad visibility flag `{other}`"))),
                })
                .collect::<Result<Vec<_>>>()?
        } else {
            vec![true; gt.len()]
        };
        let mut frames = Vec::with_capacity(gt.len());
        for i in 0..gt.len() {
            let rgb = Image::load_ppm(&dir.join("rgb").join(format!("{i:06}.ppm")))?;
            let x = Image::load_ppm(&dir.join("x").join(format!("{i:06}.ppm")))?;
            frames.push(FramePair::new(rgb, x, i)?);
        }
        let ds = Self { frames, gt, gt_x, visible };
        ds.validate()?;
        Ok(ds)
    }
}

/// Ground-truth lines `cx,cy,w,h`.
pub fn boxes_to_text(boxes: &[BBox]) -> String {
    boxes
        .iter()
        .map(|b| format!("{},{},{},{}\n", b.cx, b.cy, b.w, b.h))
        .collect()
}

pub fn parse_boxes(text: &str) -> Result<Vec<BBox>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let v: Vec<f64> = l
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::Format(format!("bad box line `{l}`")))?;
            match v[..] {
                [cx, cy, w, h] => Ok(BBox::new(cx, cy, w, h)),
                _ => Err(Error::Format(format!("box line `{l}` needs 4 fields"))),
            }
        })
        .collect()
}

fn texture_value(seed: u64, x: usize, y: usize) -> f64 {
    let mut h = seed ^ ((x as u64) << 32) ^ (y as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    h ^= h >> 33;
    h = h.wrapping_mul(0xff51_afd7_ed55_8ccd);
    h ^= h >> 33;
    (h as f64 / u64::MAX as f64) * 2.0 - 1.0
}

fn covers(shape: Shape, cx: f64, cy: f64, w: f64, h: f64, px: f64, py: f64) -> bool {
    let (dx, dy) = (px - cx, py - cy);
    match shape {
        Shape::Box => dx.abs() <= w / 2.0 && dy.abs() <= h / 2.0,
        Shape::Disc => (dx / (w / 2.0)).powi(2) + (dy / (h / 2.0)).powi(2) <= 1.0,
    }
}

struct Blob {
    shape: Shape,
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
    rgb: [f64; 3],
    x: f64,
}

fn paint(rgb: &mut Image, xm: &mut Image, blob: &Blob, tex_seed: u64, texture: f64) {
    let x0 = (blob.cx - blob.w / 2.0).floor().max(0.0) as usize;
    let y0 = (blob.cy - blob.h / 2.0).floor().max(0.0) as usize;
    let x1 = ((blob.cx + blob.w / 2.0).ceil() as usize).min(rgb.width());
    let y1 = ((blob.cy + blob.h / 2.0).ceil() as usize).min(rgb.height());
    for py in y0..y1 {
        for px in x0..x1 {
            if covers(blob.shape, blob.cx, blob.cy, blob.w, blob.h, px as f64 + 0.5, py as f64 + 0.5) {
                let t = texture * texture_value(tex_seed, px, py);
                for c in 0..3 {
                    rgb.set(px, py, c, (blob.rgb[c] + t).clamp(0.0, 1.0));
                    xm.set(px, py, c, (blob.x + t).clamp(0.0, 1.0));
                }
            }
        }
    }
}

/// Renders the scene of `spec` deterministically from `seed`.
pub fn generate_sequence(spec: &SceneSpec, seed: u64) -> Result<SequenceDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers = spec.trajectory(&mut rng);
    let tex_seed: u64 = rng.random();
    let (w, h) = (spec.width, spec.height);

    struct Mover {
        x: f64,
        y: f64,
        vx: f64,
        vy: f64,
    }
    let ds = spec.distractor_size;
    let mut movers: Vec<Mover> = (0..spec.distractors)
        .map(|_| Mover {
            x: rng.random_range(ds / 2.0..(w as f64 - ds / 2.0).max(ds / 2.0 + 1e-9)),
            y: rng.random_range(ds / 2.0..(h as f64 - ds / 2.0).max(ds / 2.0 + 1e-9)),
            vx: rng.random_range(-1.5..1.5),
            vy: rng.random_range(-1.5..1.5),
        })
        .collect();

    let jitter: Vec<(f64, f64)> = (0..spec.frames)
        .map(|_| {
            if spec.gt_jitter > 0.0 {
                (
                    rng.random_range(-spec.gt_jitter..=spec.gt_jitter),
                    rng.random_range(-spec.gt_jitter..=spec.gt_jitter),
                )
            } else {
                (0.0, 0.0)
            }
        })
        .collect();

    let mut bg_rgb = Image::new(w, h);
    let mut bg_x = Image::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let t = spec.texture * texture_value(tex_seed.rotate_left(17), x, y);
            for c in 0..3 {
                bg_rgb.set(x, y, c, (spec.background_rgb[c] + t).clamp(0.0, 1.0));
                bg_x.set(x, y, c, (spec.background_x - t).clamp(0.0, 1.0));
            }
        }
    }

    let mut frames = Vec::with_capacity(spec.frames);
    let mut gt = Vec::with_capacity(spec.frames);
    let mut gt_x = Vec::with_capacity(spec.frames);
    let mut visible = Vec::with_capacity(spec.frames);
    for (t, &(cx, cy)) in centers.iter().enumerate() {
        let mut rgb = bg_rgb.clone();
        let mut xm = bg_x.clone();
        for (i, m) in movers.iter_mut().enumerate() {
            if t > 0 {
                m.x += m.vx;
                m.y += m.vy;
                let (lo_x, hi_x) = (ds / 2.0, w as f64 - ds / 2.0);
                let (lo_y, hi_y) = (ds / 2.0, h as f64 - ds / 2.0);
                if m.x < lo_x || m.x > hi_x {
                    m.vx = -m.vx;
                    m.x = reflect(m.x, lo_x, hi_x);
                }
                if m.y < lo_y || m.y > hi_y {
                    m.vy = -m.vy;
                    m.y = reflect(m.y, lo_y, hi_y);
                }
            }
            let blob = Blob {
                shape: if i % 2 == 0 { Shape::Disc } else { Shape::Box },
                cx: m.x,
                cy: m.y,
                w: ds,
                h: ds,
                rgb: spec.distractor_rgb,
                x: spec.distractor_x,
            };
            paint(&mut rgb, &mut xm, &blob, tex_seed ^ (i as u64 + 1), spec.texture);
        }
        let present = !spec.absent.is_some_and(|(a, b)| (a..=b).contains(&t));
        if present {
            let blob = Blob {
                shape: spec.shape,
                cx,
                cy,
                w: spec.target_w,
                h: spec.target_h,
                rgb: spec.target_rgb,
                x: spec.target_x,
            };
            paint(&mut rgb, &mut xm, &blob, tex_seed, spec.texture);
        }
        rgb.quantize();
        xm.quantize();
        let b = BBox::new(cx, cy, spec.target_w, spec.target_h);
        gt.push(b);
        gt_x.push(b.translated(jitter[t].0, jitter[t].1));
        visible.push(present);
        frames.push(FramePair::new(rgb, xm, t)?);
    }

    let mut ds = SequenceDataset {
        frames,
        gt,
        gt_x: (spec.gt_jitter > 0.0).then_some(gt_x),
        visible,
    };
    for (i, e) in spec.events.iter().enumerate() {
        ds = degrade(ds, e, seed.wrapping_add(i as u64 + 1))?;
    }
    Ok(ds)
}

/// Applies `event` to its modality only; ground truth and visibility are
/// left untouched.
pub fn degrade(mut ds: SequenceDataset, event: &Degradation, seed: u64) -> Result<SequenceDataset> {
    validate_event(event, ds.len())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in event.start..=event.end {
        let gt = ds.gt[t];
        let frame = &mut ds.frames[t];
        let img = match event.modality {
            Modality::Rgb => &mut frame.rgb,
            Modality::X => &mut frame.x,
        };
        match event.mode {
            DegradeMode::Blackout => img.data_mut().fill(0.0),
            DegradeMode::Noise { sigma } => {
                if sigma < 0.0 || !sigma.is_finite() {
                    return Err(Error::Scene(format!("noise sigma {sigma} must be nonnegative")));
                }
                if sigma > 0.0 {
                    let n = Normal::new(0.0, sigma).map_err(|e| Error::Scene(e.to_string()))?;
                    for v in img.data_mut() {
                        *v = (*v + n.sample(&mut rng)).clamp(0.0, 1.0);
                    }
                    img.quantize();
                }
            }
            DegradeMode::Blur { k } => {
                if k % 2 == 0 {
                    return Err(Error::Scene(format!("blur kernel {k} must be odd")));
                }
                *img = box_blur(img, k);
                img.quantize();
            }
            DegradeMode::Occluder => {
                let (x0, x1) = (gt.left().floor().max(0.0) as usize, (gt.right().ceil() as usize).min(img.width()));
                let (y0, y1) = (gt.top().floor().max(0.0) as usize, (gt.bottom().ceil() as usize).min(img.height()));
                for y in y0..y1 {
                    for x in x0..x1 {
                        for c in 0..3 {
                            img.set(x, y, c, 0.5);
                        }
                    }
                }
                img.quantize();
            }
        }
    }
    Ok(ds)
}

/// Mean over the `k x k` window with zeros outside the image.
pub fn box_blur(img: &Image, k: usize) -> Image {
    let r = (k / 2) as isize;
    let (w, h) = (img.width() as isize, img.height() as isize);
    let norm = (k * k) as f64;
    let mut out = Image::new(img.width(), img.height());
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut s = 0.0;
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (sx, sy) = (x + dx, y + dy);
                        if sx >= 0 && sy >= 0 && sx < w && sy < h {
                            s += img.get(sx as usize, sy as usize, c);
                        }
                    }
                }
                out.set(x as usize, y as usize, c, s / norm);
            }
        }
    }
    out
}
