//! Ground-truthed synthetic sequence generation: a template warped by a
//! random-walk homography over a textured background, with illumination,
//! blur, noise and clutter.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::Matrix3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::geometry::Homography;
use crate::image::GrayImage;

/// Per-frame ground-truth transforms mapping template pixel coordinates to
/// frame pixel coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub entries: Vec<Homography>,
}

impl GroundTruth {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// One line per frame: index plus nine row-major entries.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for (i, h) in self.entries.iter().enumerate() {
            write!(out, "{i}").unwrap();
            for e in h.entries() {
                write!(out, " {e}").unwrap();
            }
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<GroundTruth> {
        let text = std::fs::read_to_string(path)?;
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 10 {
                return Err(Error::InvalidInput(format!(
                    "ground truth line {lineno}: expected 10 fields, got {}",
                    fields.len()
                )));
            }
            let idx: usize = fields[0]
                .parse()
                .map_err(|_| Error::InvalidInput(format!("bad frame index on line {lineno}")))?;
            if idx != lineno {
                return Err(Error::InvalidInput(format!(
                    "ground truth line {lineno} has index {idx}"
                )));
            }
            let mut e = [0.0f64; 9];
            for (k, f) in fields[1..].iter().enumerate() {
                e[k] = f
                    .parse()
                    .map_err(|_| Error::InvalidInput(format!("bad entry on line {lineno}")))?;
            }
            entries.push(Homography::from_entries(&e));
        }
        Ok(GroundTruth { entries })
    }
}

/// Motion and degradation parameters of a generated sequence. Motion fields
/// are amplitudes of a clamped random walk (one fifteenth of the amplitude
/// per frame); zero amplitude freezes that parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub length: usize,
    pub frame_width: usize,
    pub frame_height: usize,
    /// Rotation amplitude, degrees.
    pub rotation_deg: f64,
    /// Log-scale amplitude; 0.3 allows roughly 0.74x .. 1.35x zoom.
    pub log_scale: f64,
    /// Translation amplitude around the centered placement, pixels.
    pub translation_px: f64,
    /// Perspective row amplitude.
    pub skew: f64,
    /// Illumination gain range (low, high); (1.0, 1.0) disables.
    pub gain: (f64, f64),
    pub noise_sigma: f64,
    pub blur_radius: usize,
    /// Distractor squares painted onto the background each frame.
    pub clutter_count: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            length: 50,
            frame_width: 320,
            frame_height: 240,
            rotation_deg: 10.0,
            log_scale: 0.1,
            translation_px: 20.0,
            skew: 0.0,
            gain: (1.0, 1.0),
            noise_sigma: 0.0,
            blur_radius: 0,
            clutter_count: 0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.length == 0 {
            return Err(Error::Config("sequence length must be positive".into()));
        }
        if self.frame_width < 32 || self.frame_height < 32 {
            return Err(Error::Config("frame dimensions too small".into()));
        }
        if self.gain.0 <= 0.0 || self.gain.1 < self.gain.0 {
            return Err(Error::Config("gain range must satisfy 0 < lo <= hi".into()));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::Config("noise sigma must be non-negative".into()));
        }
        Ok(())
    }
}

/// The analytic placement transform: perspective, scale and rotation about
/// the template center, then translation to the frame center plus offset.
pub fn placement_homography(
    spec: &SynthSpec,
    template: (usize, usize),
    theta_rad: f64,
    log_scale: f64,
    tx: f64,
    ty: f64,
    px: f64,
    py: f64,
) -> Homography {
    let (tw, th) = template;
    let tcx = (tw as f64 - 1.0) / 2.0;
    let tcy = (th as f64 - 1.0) / 2.0;
    let fcx = (spec.frame_width as f64 - 1.0) / 2.0;
    let fcy = (spec.frame_height as f64 - 1.0) / 2.0;
    let s = log_scale.exp();
    let (sin, cos) = theta_rad.sin_cos();

    let to_center = Matrix3::new(1.0, 0.0, -tcx, 0.0, 1.0, -tcy, 0.0, 0.0, 1.0);
    let rot_scale = Matrix3::new(s * cos, -s * sin, 0.0, s * sin, s * cos, 0.0, 0.0, 0.0, 1.0);
    let persp = Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, px, py, 1.0);
    let place = Matrix3::new(1.0, 0.0, fcx + tx, 0.0, 1.0, fcy + ty, 0.0, 0.0, 1.0);
    Homography::from_matrix(place * persp * rot_scale * to_center)
}

/// Fraction of a template point grid that lands inside the frame.
fn inside_fraction(spec: &SynthSpec, template: (usize, usize), h: &Homography) -> f64 {
    let grid = 15usize;
    let mut inside = 0usize;
    for gy in 0..grid {
        for gx in 0..grid {
            let x = gx as f64 / (grid - 1) as f64 * (template.0 as f64 - 1.0);
            let y = gy as f64 / (grid - 1) as f64 * (template.1 as f64 - 1.0);
            if let Ok((fx, fy)) = h.apply((x, y)) {
                if fx >= 0.0
                    && fy >= 0.0
                    && fx <= spec.frame_width as f64 - 1.0
                    && fy <= spec.frame_height as f64 - 1.0
                {
                    inside += 1;
                }
            }
        }
    }
    inside as f64 / (grid * grid) as f64
}

const MAX_REDRAWS: usize = 10;
const MIN_INSIDE: f64 = 0.6;
/// Random-walk granularity: per-frame step as a fraction of the amplitude.
const WALK_STEP: f64 = 1.0 / 15.0;

#[derive(Clone, Copy, Default)]
struct MotionState {
    theta: f64,
    log_scale: f64,
    tx: f64,
    ty: f64,
    px: f64,
    py: f64,
    gain: f64,
}

fn walk(rng: &mut ChaCha8Rng, value: f64, amplitude: f64) -> f64 {
    if amplitude == 0.0 {
        return 0.0;
    }
    let step = amplitude * WALK_STEP;
    (value + rng.gen_range(-step..=step)).clamp(-amplitude, amplitude)
}

/// Static per-sequence block texture giving the background corners of its
/// own.
fn background(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> GrayImage {
    let block = 16usize;
    let bw = spec.frame_width.div_ceil(block);
    let bh = spec.frame_height.div_ceil(block);
    let values: Vec<u8> = (0..bw * bh).map(|_| rng.gen_range(60..200)).collect();
    let mut img = GrayImage::filled(spec.frame_width, spec.frame_height, 0);
    for y in 0..spec.frame_height {
        for x in 0..spec.frame_width {
            img.set(x, y, values[(y / block) * bw + x / block]);
        }
    }
    img
}

fn box_blur(img: &GrayImage, radius: usize) -> GrayImage {
    if radius == 0 {
        return img.clone();
    }
    let (w, h) = (img.width(), img.height());
    let r = radius as i64;
    let mut out = GrayImage::filled(w, h, 0);
    // integral image with a zero first row/column
    let mut integral = vec![0u64; (w + 1) * (h + 1)];
    for y in 0..h {
        let mut row = 0u64;
        for x in 0..w {
            row += img.get(x, y) as u64;
            integral[(y + 1) * (w + 1) + x + 1] = integral[y * (w + 1) + x + 1] + row;
        }
    }
    let sum = |x0: usize, y0: usize, x1: usize, y1: usize| -> u64 {
        integral[(y1 + 1) * (w + 1) + x1 + 1] + integral[y0 * (w + 1) + x0]
            - integral[y0 * (w + 1) + x1 + 1]
            - integral[(y1 + 1) * (w + 1) + x0]
    };
    for y in 0..h {
        for x in 0..w {
            let x0 = (x as i64 - r).max(0) as usize;
            let y0 = (y as i64 - r).max(0) as usize;
            let x1 = (x as i64 + r).min(w as i64 - 1) as usize;
            let y1 = (y as i64 + r).min(h as i64 - 1) as usize;
            let n = ((x1 - x0 + 1) * (y1 - y0 + 1)) as f64;
            out.set(x, y, (sum(x0, y0, x1, y1) as f64 / n).round() as u8);
        }
    }
    out
}

/// Render one frame: composite the warped template over the background by
/// inverse mapping, then apply gain, blur and noise in that order.
fn render_frame(
    spec: &SynthSpec,
    template: &GrayImage,
    bg: &GrayImage,
    h: &Homography,
    state: &MotionState,
    rng: &mut ChaCha8Rng,
) -> Result<GrayImage> {
    let inv = h
        .inverse()
        .ok_or_else(|| Error::DegenerateMotion(0))?;
    let mut img = bg.clone();
    // clutter squares move randomly frame to frame
    for _ in 0..spec.clutter_count {
        let side = rng.gen_range(6..14usize);
        let cx = rng.gen_range(0..spec.frame_width.saturating_sub(side));
        let cy = rng.gen_range(0..spec.frame_height.saturating_sub(side));
        let v: u8 = if rng.gen_bool(0.5) { 20 } else { 235 };
        for y in cy..cy + side {
            for x in cx..cx + side {
                img.set(x, y, v);
            }
        }
    }
    for y in 0..spec.frame_height {
        for x in 0..spec.frame_width {
            if let Ok((tx, ty)) = inv.apply((x as f64, y as f64)) {
                if let Some(v) = template.sample_bilinear(tx, ty) {
                    img.set(x, y, v.round().clamp(0.0, 255.0) as u8);
                }
            }
        }
    }
    if (state.gain - 1.0).abs() > 1e-12 {
        for y in 0..spec.frame_height {
            for x in 0..spec.frame_width {
                let v = (img.get(x, y) as f64 * state.gain).round().clamp(0.0, 255.0);
                img.set(x, y, v as u8);
            }
        }
    }
    let mut img = box_blur(&img, spec.blur_radius);
    if spec.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, spec.noise_sigma).unwrap();
        for y in 0..spec.frame_height {
            for x in 0..spec.frame_width {
                let v = (img.get(x, y) as f64 + normal.sample(rng)).round().clamp(0.0, 255.0);
                img.set(x, y, v as u8);
            }
        }
    }
    Ok(img)
}

pub fn frame_path(out_dir: &Path, index: usize) -> PathBuf {
    out_dir.join(format!("frame_{index:06}.pgm"))
}

pub fn ground_truth_path(out_dir: &Path) -> PathBuf {
    out_dir.join("ground_truth.txt")
}

/// Generate the sequence into `out_dir` (frames plus ground-truth file) and
/// return the ground truth. Deterministic per seed.
pub fn generate_sequence(
    template: &GrayImage,
    spec: &SynthSpec,
    out_dir: &Path,
) -> Result<GroundTruth> {
    spec.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let bg = background(spec, &mut rng);
    let tdims = (template.width(), template.height());

    let mid_gain = (spec.gain.0 + spec.gain.1) / 2.0;
    let mut state = MotionState {
        gain: mid_gain,
        ..Default::default()
    };
    let mut entries = Vec::with_capacity(spec.length);
    for i in 0..spec.length {
        let mut accepted = None;
        for _ in 0..MAX_REDRAWS {
            let cand = MotionState {
                theta: walk(&mut rng, state.theta, spec.rotation_deg.to_radians()),
                log_scale: walk(&mut rng, state.log_scale, spec.log_scale),
                tx: walk(&mut rng, state.tx, spec.translation_px),
                ty: walk(&mut rng, state.ty, spec.translation_px),
                px: walk(&mut rng, state.px, spec.skew),
                py: walk(&mut rng, state.py, spec.skew),
                gain: if spec.gain.1 > spec.gain.0 {
                    let half = (spec.gain.1 - spec.gain.0) / 2.0;
                    mid_gain + walk(&mut rng, state.gain - mid_gain, half)
                } else {
                    mid_gain
                },
            };
            let h = placement_homography(
                spec, tdims, cand.theta, cand.log_scale, cand.tx, cand.ty, cand.px, cand.py,
            );
            if inside_fraction(spec, tdims, &h) >= MIN_INSIDE {
                accepted = Some((cand, h));
                break;
            }
        }
        let Some((cand, h)) = accepted else {
            return Err(Error::DegenerateMotion(MAX_REDRAWS));
        };
        state = cand;
        let frame = render_frame(spec, template, &bg, &h, &state, &mut rng)?;
        frame.save_pgm(&frame_path(out_dir, i))?;
        entries.push(h);
    }
    let gt = GroundTruth { entries };
    gt.save(&ground_truth_path(out_dir))?;
    Ok(gt)
}
