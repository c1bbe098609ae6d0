//! Evaluation criteria: the corner-displacement score S, the success
//! threshold and the accumulated false-detection count.

use crate::error::{Error, Result};
use crate::geometry::Homography;

/// A detected frame succeeds iff S is strictly below this (pixels).
pub const SUCCESS_THRESHOLD: f64 = 10.0;

/// Corners of the normalized square mapped onto the template's pixel
/// bounding rectangle.
fn corner_points(template_bounds: (usize, usize)) -> [(f64, f64); 4] {
    let (w, h) = template_bounds;
    let sx = (w as f64 - 1.0) / 2.0;
    let sy = (h as f64 - 1.0) / 2.0;
    [(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)]
        .map(|(nx, ny)| ((nx + 1.0) * sx, (ny + 1.0) * sy))
}

/// Mean displacement of the four mapped corners between two transforms;
/// +infinity when either transform degenerates on a corner.
pub fn score_s(y: &Homography, y_star: &Homography, template_bounds: (usize, usize)) -> f64 {
    let mut total = 0.0;
    for c in corner_points(template_bounds) {
        let (Ok(a), Ok(b)) = (y.apply(c), y_star.apply(c)) else {
            return f64::INFINITY;
        };
        total += ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt();
    }
    total / 4.0
}

/// Per-frame evaluation outcome: the S score of a detection, or a lost frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FrameScore {
    Scored(f64),
    Lost,
}

impl FrameScore {
    pub fn is_success(&self) -> bool {
        matches!(self, FrameScore::Scored(s) if *s < SUCCESS_THRESHOLD)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub success_rate: f64,
    /// Running count of false frames, one entry per frame, non-decreasing.
    pub accumulated_false: Vec<usize>,
}

impl Metrics {
    pub fn false_frames(&self) -> usize {
        self.accumulated_false.last().copied().unwrap_or(0)
    }
}

/// Success rate and accumulated false detections; lost frames count as
/// false, as do scores at or above the threshold.
pub fn success_metrics(scores: &[FrameScore]) -> Result<Metrics> {
    if scores.is_empty() {
        return Err(Error::InvalidInput(
            "cannot evaluate an empty sequence".into(),
        ));
    }
    let mut accumulated = Vec::with_capacity(scores.len());
    let mut false_count = 0usize;
    let mut successes = 0usize;
    for s in scores {
        if s.is_success() {
            successes += 1;
        } else {
            false_count += 1;
        }
        accumulated.push(false_count);
    }
    Ok(Metrics {
        success_rate: successes as f64 / scores.len() as f64,
        accumulated_false: accumulated,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Homography;
    use approx::assert_relative_eq;
    use nalgebra::Matrix3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_h(rng: &mut ChaCha8Rng) -> Homography {
        Homography::from_matrix(Matrix3::new(
            1.0 + rng.gen_range(-0.2..0.2),
            rng.gen_range(-0.2..0.2),
            rng.gen_range(-10.0..10.0),
            rng.gen_range(-0.2..0.2),
            1.0 + rng.gen_range(-0.2..0.2),
            rng.gen_range(-10.0..10.0),
            rng.gen_range(-1e-4..1e-4),
            rng.gen_range(-1e-4..1e-4),
            1.0,
        ))
    }

    #[test]
    fn identical_transforms_score_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            let y = random_h(&mut rng);
            assert_eq!(score_s(&y, &y, (128, 96)), 0.0);
        }
    }

    #[test]
    fn translation_offset_scores_its_length() {
        // every corner displaced by a 3-4-5 vector
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let y_star = random_h(&mut rng);
        let shift = Homography::translation(3.0, 4.0);
        let y = shift.compose(&y_star);
        assert_relative_eq!(score_s(&y, &y_star, (100, 80)), 5.0, epsilon = 1e-9);
    }

    #[test]
    fn score_matches_duplicate_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let y = random_h(&mut rng);
            let y_star = random_h(&mut rng);
            let (w, h) = (64usize, 48usize);
            let got = score_s(&y, &y_star, (w, h));
            // independent recomputation straight from the corner definition
            let corners = [
                (0.0, 0.0),
                (w as f64 - 1.0, 0.0),
                (w as f64 - 1.0, h as f64 - 1.0),
                (0.0, h as f64 - 1.0),
            ];
            let mut expect = 0.0;
            for c in corners {
                let a = y.apply(c).unwrap();
                let b = y_star.apply(c).unwrap();
                expect += ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt();
            }
            expect /= 4.0;
            assert_relative_eq!(got, expect, epsilon = 1e-9);
            // symmetry
            assert_relative_eq!(got, score_s(&y_star, &y, (w, h)), epsilon = 1e-12);
        }
    }

    #[test]
    fn degenerate_corner_scores_infinite() {
        let y_star = Homography::identity();
        // maps the (0,0) corner to the line at infinity
        let y = Homography::from_matrix(Matrix3::new(
            1.0, 0.0, 0.0, 0.0, 1.0, 0.0, -1.0, -1.0, 0.0,
        ));
        assert!(score_s(&y, &y_star, (32, 32)).is_infinite());
    }

    #[test]
    fn metrics_counting_example() {
        let mut scores = vec![FrameScore::Scored(2.0); 9];
        scores.push(FrameScore::Lost);
        let m = success_metrics(&scores).unwrap();
        assert_relative_eq!(m.success_rate, 0.9);
        assert_eq!(m.false_frames(), 1);
        assert_eq!(m.accumulated_false[8], 0);
        assert_eq!(m.accumulated_false[9], 1);
    }

    #[test]
    fn threshold_is_strict() {
        assert!(!FrameScore::Scored(10.0).is_success());
        assert!(FrameScore::Scored(9.999).is_success());
        let m = success_metrics(&[FrameScore::Scored(10.0)]).unwrap();
        assert_eq!(m.success_rate, 0.0);
    }

    #[test]
    fn accumulated_false_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let scores: Vec<FrameScore> = (0..50)
            .map(|_| {
                if rng.gen_bool(0.2) {
                    FrameScore::Lost
                } else {
                    FrameScore::Scored(rng.gen_range(0.0..20.0))
                }
            })
            .collect();
        let m = success_metrics(&scores).unwrap();
        for pair in m.accumulated_false.windows(2) {
            assert!(pair[0] <= pair[1]);
        }
        assert!(m.false_frames() <= scores.len());
    }

    #[test]
    fn empty_sequence_is_error() {
        assert!(success_metrics(&[]).is_err());
    }
}
