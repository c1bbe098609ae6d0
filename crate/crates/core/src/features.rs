//! FAST-9 corner detection and BRIEF-256 binary description.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::image::GrayImage;

pub const DESCRIPTOR_BITS: usize = 256;
pub const DESCRIPTOR_WORDS: usize = DESCRIPTOR_BITS / 64;

/// BRIEF patch is 48x48, so keypoints stay 24 px away from every border.
pub const BORDER_MARGIN: usize = 24;
pub const PATCH_SIZE: usize = 48;
const BOX_RADIUS: i64 = 4; // 9x9 smoothing window

/// 256-bit binary descriptor.
#[derive(Clone, PartialEq, Eq, Default)]
pub struct Descriptor {
    words: [u64; DESCRIPTOR_WORDS],
}

impl Descriptor {
    pub fn from_words(words: [u64; DESCRIPTOR_WORDS]) -> Self {
        Self { words }
    }

    pub fn words(&self) -> &[u64; DESCRIPTOR_WORDS] {
        &self.words
    }

    #[inline]
    pub fn set_bit(&mut self, i: usize, v: bool) {
        let w = i / 64;
        let b = i % 64;
        if v {
            self.words[w] |= 1 << b;
        } else {
            self.words[w] &= !(1 << b);
        }
    }

    #[inline]
    pub fn bit(&self, i: usize) -> bool {
        (self.words[i / 64] >> (i % 64)) & 1 == 1
    }

    pub fn hamming(&self, other: &Descriptor) -> u32 {
        self.words
            .iter()
            .zip(other.words.iter())
            .map(|(a, b)| (a ^ b).count_ones())
            .sum()
    }

    /// View as a vector in {0,1}^256.
    pub fn to_real(&self) -> Vec<f64> {
        (0..DESCRIPTOR_BITS)
            .map(|i| if self.bit(i) { 1.0 } else { 0.0 })
            .collect()
    }

    /// Indices of set bits.
    pub fn set_bits(&self) -> impl Iterator<Item = usize> + '_ {
        (0..DESCRIPTOR_BITS).filter(move |&i| self.bit(i))
    }

    pub fn count_ones(&self) -> u32 {
        self.words.iter().map(|w| w.count_ones()).sum()
    }

    pub fn complement(&self) -> Descriptor {
        let mut words = self.words;
        for w in &mut words {
            *w = !*w;
        }
        Descriptor { words }
    }
}

impl std::fmt::Debug for Descriptor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "Descriptor({:016x}{:016x}{:016x}{:016x})",
            self.words[3], self.words[2], self.words[1], self.words[0]
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub score: i32,
    pub descriptor: Option<Descriptor>,
}

impl Keypoint {
    pub fn descriptor(&self) -> &Descriptor {
        self.descriptor.as_ref().expect("descriptor not set")
    }
}

/// Bresenham circle of radius 3, 16 offsets clockwise from 12 o'clock.
const CIRCLE: [(i64, i64); 16] = [
    (0, -3),
    (1, -3),
    (2, -2),
    (3, -1),
    (3, 0),
    (3, 1),
    (2, 2),
    (1, 3),
    (0, 3),
    (-1, 3),
    (-2, 2),
    (-3, 1),
    (-3, 0),
    (-3, -1),
    (-2, -2),
    (-1, -3),
];

const ARC_LEN: usize = 9;

/// FAST-9 corner score at (x, y): the largest threshold for which the pixel
/// is still a corner, or 0 when it is not a corner at threshold 1.
///
/// A pixel is a corner at threshold t when some run of 9 contiguous circle
/// pixels is entirely brighter than center+t or entirely darker than
/// center-t, so the score is max over runs of (min margin in run) - 1.
pub fn fast_score(img: &GrayImage, x: usize, y: usize) -> i32 {
    let c = img.get(x, y) as i32;
    let mut diff = [0i32; 32];
    for (i, &(dx, dy)) in CIRCLE.iter().enumerate() {
        let v = img.get((x as i64 + dx) as usize, (y as i64 + dy) as usize) as i32;
        diff[i] = v - c;
        diff[i + 16] = diff[i];
    }
    let mut best = 0i32;
    for start in 0..16 {
        let mut min_bright = i32::MAX;
        let mut min_dark = i32::MAX;
        for k in 0..ARC_LEN {
            let d = diff[start + k];
            min_bright = min_bright.min(d);
            min_dark = min_dark.min(-d);
        }
        best = best.max(min_bright).max(min_dark);
    }
    (best - 1).max(0)
}

/// FAST-9 detection with 3x3 non-maximum suppression.
///
/// Results are sorted by score descending (ties by (y, x) ascending) and
/// truncated to `max_keypoints`. A border of [`BORDER_MARGIN`] pixels is
/// excluded so BRIEF patches fit.
pub fn detect_fast(img: &GrayImage, threshold: i32, max_keypoints: usize) -> Result<Vec<Keypoint>> {
    if threshold <= 0 {
        return Err(Error::InvalidInput("FAST threshold must be positive".into()));
    }
    let margin = BORDER_MARGIN;
    if img.width() < 2 * margin + 1 || img.height() < 2 * margin + 1 {
        return Err(Error::ImageDimensions(format!(
            "image {}x{} smaller than {} in one dimension",
            img.width(),
            img.height(),
            2 * margin + 1
        )));
    }

    let w = img.width();
    let mut scores = vec![0i32; w * img.height()];
    let mut candidates = Vec::new();
    for y in margin..img.height() - margin {
        for x in margin..w - margin {
            // Compass pre-test: a 9-arc covers at least two of the four
            // compass points, so a corner scoring >= threshold must have two
            // compass diffs strictly beyond it in the same polarity.
            let c = img.get(x, y) as i32;
            let mut bright = 0;
            let mut dark = 0;
            for &(dx, dy) in &[CIRCLE[0], CIRCLE[4], CIRCLE[8], CIRCLE[12]] {
                let d = img.get((x as i64 + dx) as usize, (y as i64 + dy) as usize) as i32 - c;
                if d > threshold {
                    bright += 1;
                } else if d < -threshold {
                    dark += 1;
                }
            }
            if bright < 2 && dark < 2 {
                continue;
            }
            let s = fast_score(img, x, y);
            if s >= threshold {
                scores[y * w + x] = s;
                candidates.push((x, y, s));
            }
        }
    }

    // 3x3 NMS; ties broken toward the earlier pixel in scan order.
    let mut kept = Vec::new();
    for &(x, y, s) in &candidates {
        let mut is_max = true;
        'nms: for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                if dx == 0 && dy == 0 {
                    continue;
                }
                let nx = (x as i64 + dx) as usize;
                let ny = (y as i64 + dy) as usize;
                let ns = scores[ny * w + nx];
                let earlier = (ny, nx) < (y, x);
                if ns > s || (ns == s && earlier) {
                    is_max = false;
                    break 'nms;
                }
            }
        }
        if is_max {
            kept.push(Keypoint {
                x: x as f64,
                y: y as f64,
                score: s,
                descriptor: None,
            });
        }
    }

    kept.sort_by(|a, b| {
        b.score
            .cmp(&a.score)
            .then((a.y as i64, a.x as i64).cmp(&(b.y as i64, b.x as i64)))
    });
    kept.truncate(max_keypoints);
    Ok(kept)
}

/// The 256 BRIEF test-point pairs, drawn once from an isotropic Gaussian
/// (sigma = patch/5) with a seeded generator, clamped to the 48x48 patch.
#[derive(Clone, Debug, PartialEq)]
pub struct BriefPattern {
    pub seed: u64,
    pairs: Vec<((i64, i64), (i64, i64))>,
}

impl BriefPattern {
    pub fn from_seed(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sigma = PATCH_SIZE as f64 / 5.0;
        let normal = Normal::new(0.0f64, sigma).unwrap();
        let half = (PATCH_SIZE / 2) as i64;
        let draw = |rng: &mut ChaCha8Rng| -> (i64, i64) {
            let dx = normal.sample(rng).round() as i64;
            let dy = normal.sample(rng).round() as i64;
            (dx.clamp(-half, half), dy.clamp(-half, half))
        };
        let pairs = (0..DESCRIPTOR_BITS)
            .map(|_| {
                let p1 = draw(&mut rng);
                let p2 = draw(&mut rng);
                (p1, p2)
            })
            .collect();
        Self { seed, pairs }
    }
}

/// 9x9 box-filtered image as f64, borders handled by shrinking the window
/// to its intersection with the image.
pub fn box_smooth(img: &GrayImage) -> Vec<f64> {
    let w = img.width();
    let h = img.height();
    // Integral image with one extra row/column of zeros.
    let iw = w + 1;
    let mut integral = vec![0u64; iw * (h + 1)];
    for y in 0..h {
        let mut row = 0u64;
        for x in 0..w {
            row += img.get(x, y) as u64;
            integral[(y + 1) * iw + x + 1] = integral[y * iw + x + 1] + row;
        }
    }
    let sum_rect = |x0: usize, y0: usize, x1: usize, y1: usize| -> u64 {
        // inclusive coordinates
        integral[(y1 + 1) * iw + x1 + 1] + integral[y0 * iw + x0]
            - integral[y0 * iw + x1 + 1]
            - integral[(y1 + 1) * iw + x0]
    };
    let mut out = vec![0.0f64; w * h];
    for y in 0..h {
        let y0 = (y as i64 - BOX_RADIUS).max(0) as usize;
        let y1 = ((y as i64 + BOX_RADIUS) as usize).min(h - 1);
        for x in 0..w {
            let x0 = (x as i64 - BOX_RADIUS).max(0) as usize;
            let x1 = ((x as i64 + BOX_RADIUS) as usize).min(w - 1);
            let count = ((x1 - x0 + 1) * (y1 - y0 + 1)) as f64;
            out[y * w + x] = sum_rect(x0, y0, x1, y1) as f64 / count;
        }
    }
    out
}

/// Compute BRIEF-256 descriptors for the given keypoints.
///
/// Bit b is 1 iff smoothed(p1) < smoothed(p2); equal intensities give 0.
pub fn describe_brief(
    img: &GrayImage,
    kps: &mut [Keypoint],
    pattern: &BriefPattern,
) -> Result<()> {
    let margin = BORDER_MARGIN as f64;
    for kp in kps.iter() {
        if kp.x < margin
            || kp.y < margin
            || kp.x > (img.width() - 1) as f64 - margin
            || kp.y > (img.height() - 1) as f64 - margin
        {
            return Err(Error::KeypointNearBorder(kp.x, kp.y));
        }
    }
    let smoothed = box_smooth(img);
    let w = img.width();
    let at = |x: i64, y: i64| -> f64 {
        let x = x.clamp(0, img.width() as i64 - 1) as usize;
        let y = y.clamp(0, img.height() as i64 - 1) as usize;
        smoothed[y * w + x]
    };
    for kp in kps.iter_mut() {
        let cx = kp.x.round() as i64;
        let cy = kp.y.round() as i64;
        let mut desc = Descriptor::default();
        for (b, &((dx1, dy1), (dx2, dy2))) in pattern.pairs.iter().enumerate() {
            let v1 = at(cx + dx1, cy + dy1);
            let v2 = at(cx + dx2, cy + dy2);
            desc.set_bit(b, v1 < v2);
        }
        kp.descriptor = Some(desc);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_image(w: usize, h: usize, seed: u64) -> GrayImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..w * h).map(|_| rng.gen()).collect();
        GrayImage::new(w, h, data).unwrap()
    }

    /// Naive 16-way segment test: is (x, y) a corner at threshold t?
    fn oracle_is_corner(img: &GrayImage, x: usize, y: usize, t: i32) -> bool {
        let c = img.get(x, y) as i32;
        for start in 0..16 {
            let mut all_bright = true;
            let mut all_dark = true;
            for k in 0..ARC_LEN {
                let (dx, dy) = CIRCLE[(start + k) % 16];
                let v = img.get((x as i64 + dx) as usize, (y as i64 + dy) as usize) as i32;
                all_bright &= v > c + t;
                all_dark &= v < c - t;
            }
            if all_bright || all_dark {
                return true;
            }
        }
        false
    }

    #[test]
    fn uniform_image_has_no_corners() {
        let img = GrayImage::filled(64, 64, 100);
        let kps = detect_fast(&img, 10, 100).unwrap();
        assert!(kps.is_empty());
    }

    #[test]
    fn small_image_rejected() {
        let img = GrayImage::filled(48, 64, 0);
        assert!(detect_fast(&img, 10, 100).is_err());
    }

    #[test]
    fn white_square_corners_detected() {
        // Square side must exceed the FAST circle diameter, otherwise every
        // square pixel passes the segment test with the same score.
        let mut img = GrayImage::filled(64, 64, 0);
        for y in 26..38 {
            for x in 26..38 {
                img.set(x, y, 255);
            }
        }
        let kps = detect_fast(&img, 20, 100).unwrap();
        assert!(!kps.is_empty());
        // FAST-9 also responds on edge pixels within the circle radius of a
        // corner, so localization is asserted at radius 3.
        let corners = [(26.0, 26.0), (37.0, 26.0), (26.0, 37.0), (37.0, 37.0)];
        for kp in &kps {
            let near = corners
                .iter()
                .any(|&(cx, cy)| (kp.x - cx).abs() <= 3.0 && (kp.y - cy).abs() <= 3.0);
            assert!(near, "keypoint ({}, {}) far from square corners", kp.x, kp.y);
        }
        // all four corners are covered
        for &(cx, cy) in &corners {
            let covered = kps
                .iter()
                .any(|kp| (kp.x - cx).abs() <= 3.0 && (kp.y - cy).abs() <= 3.0);
            assert!(covered, "corner ({cx}, {cy}) not covered");
        }

        let top2 = detect_fast(&img, 20, 2).unwrap();
        assert_eq!(top2.len(), 2);
        assert!(top2[0].score >= top2[1].score);
        assert!(kps.iter().take(2).map(|k| k.score).eq(top2.iter().map(|k| k.score)));
    }

    #[test]
    fn score_matches_segment_test_oracle() {
        // score semantics: corner at threshold t iff score >= t
        for seed in 0..3u64 {
            let img = random_image(64, 64, seed);
            for y in BORDER_MARGIN..64 - BORDER_MARGIN {
                for x in BORDER_MARGIN..64 - BORDER_MARGIN {
                    let s = fast_score(&img, x, y);
                    assert_eq!(s >= 1, oracle_is_corner(&img, x, y, 1), "at ({x},{y})");
                    if s >= 1 {
                        assert!(oracle_is_corner(&img, x, y, s));
                        assert!(!oracle_is_corner(&img, x, y, s + 1));
                    }
                }
            }
        }
    }

    #[test]
    fn constant_image_descriptor_all_zero() {
        let img = GrayImage::filled(64, 64, 77);
        let mut kps = vec![Keypoint {
            x: 32.0,
            y: 32.0,
            score: 0,
            descriptor: None,
        }];
        let pattern = BriefPattern::from_seed(42);
        describe_brief(&img, &mut kps, &pattern).unwrap();
        assert_eq!(kps[0].descriptor().count_ones(), 0);
    }

    #[test]
    fn descriptors_deterministic() {
        let img = random_image(64, 64, 7);
        let pattern = BriefPattern::from_seed(42);
        let mk = || Keypoint {
            x: 30.0,
            y: 31.0,
            score: 0,
            descriptor: None,
        };
        let mut a = vec![mk()];
        let mut b = vec![mk()];
        describe_brief(&img, &mut a, &pattern).unwrap();
        describe_brief(&img, &mut b, &pattern).unwrap();
        assert_eq!(a[0].descriptor(), b[0].descriptor());
        assert_eq!(BriefPattern::from_seed(42), BriefPattern::from_seed(42));
    }

    #[test]
    fn inverted_image_gives_complement_when_no_ties() {
        let img = random_image(64, 64, 11);
        let inv_data: Vec<u8> = img.data().iter().map(|&v| 255 - v).collect();
        let inv = GrayImage::new(64, 64, inv_data).unwrap();
        let pattern = BriefPattern::from_seed(3);
        let smoothed = box_smooth(&img);

        let kp = |x: f64, y: f64| Keypoint {
            x,
            y,
            score: 0,
            descriptor: None,
        };
        let mut a = vec![kp(32.0, 32.0), kp(28.0, 36.0)];
        let mut b = a.clone();
        describe_brief(&img, &mut a, &pattern).unwrap();
        describe_brief(&inv, &mut b, &pattern).unwrap();
        for (ka, kb) in a.iter().zip(b.iter()) {
            // check no ties occur at the sampled pairs for this keypoint
            let cx = ka.x as i64;
            let cy = ka.y as i64;
            let ties = pattern.pairs.iter().any(|&((dx1, dy1), (dx2, dy2))| {
                let s = |x: i64, y: i64| smoothed[y as usize * 64 + x as usize];
                s(cx + dx1, cy + dy1) == s(cx + dx2, cy + dy2)
            });
            if !ties {
                assert_eq!(ka.descriptor().complement(), *kb.descriptor());
            }
        }
    }

    #[test]
    fn near_border_keypoint_rejected() {
        let img = GrayImage::filled(64, 64, 0);
        let mut kps = vec![Keypoint {
            x: 10.0,
            y: 32.0,
            score: 0,
            descriptor: None,
        }];
        let pattern = BriefPattern::from_seed(1);
        assert!(describe_brief(&img, &mut kps, &pattern).is_err());
    }

    #[test]
    fn hamming_equals_squared_euclidean_of_real_views() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let a = Descriptor::from_words([rng.gen(), rng.gen(), rng.gen(), rng.gen()]);
            let b = Descriptor::from_words([rng.gen(), rng.gen(), rng.gen(), rng.gen()]);
            let ra = a.to_real();
            let rb = b.to_real();
            assert!(ra.iter().all(|&v| v == 0.0 || v == 1.0));
            let sq: f64 = ra.iter().zip(rb.iter()).map(|(x, y)| (x - y) * (x - y)).sum();
            assert_eq!(a.hamming(&b) as f64, sq);
        }
    }
}
