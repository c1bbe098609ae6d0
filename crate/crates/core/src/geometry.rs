//! Homography algebra, DLT estimation, RANSAC hypothesis generation,
//! inlier sets and the structured loss.

use nalgebra::{DMatrix, Matrix3, Vector3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::CorrespondenceSet;

pub const HOMOGRAPHY_DEDUP_TOL: f64 = 1e-6;

/// 3x3 projective transform mapping template coordinates to frame
/// coordinates, normalized so m[2][2] = 1 when that entry is nonzero.
#[derive(Clone, Debug, PartialEq)]
pub struct Homography {
    m: Matrix3<f64>,
}

impl Homography {
    pub fn identity() -> Self {
        Self {
            m: Matrix3::identity(),
        }
    }

    pub fn from_matrix(m: Matrix3<f64>) -> Self {
        let mut h = Self { m };
        h.normalize();
        h
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self::from_matrix(Matrix3::new(1.0, 0.0, tx, 0.0, 1.0, ty, 0.0, 0.0, 1.0))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.m
    }

    /// Row-major 9-element view, the serialization order.
    pub fn entries(&self) -> [f64; 9] {
        let m = &self.m;
        [
            m[(0, 0)],
            m[(0, 1)],
            m[(0, 2)],
            m[(1, 0)],
            m[(1, 1)],
            m[(1, 2)],
            m[(2, 0)],
            m[(2, 1)],
            m[(2, 2)],
        ]
    }

    pub fn from_entries(e: &[f64; 9]) -> Self {
        Self::from_matrix(Matrix3::new(
            e[0], e[1], e[2], e[3], e[4], e[5], e[6], e[7], e[8],
        ))
    }

    fn normalize(&mut self) {
        let w = self.m[(2, 2)];
        if w.abs() > 1e-12 {
            self.m /= w;
        }
    }

    /// Projective action on a point.
    pub fn apply(&self, p: (f64, f64)) -> Result<(f64, f64)> {
        let v = self.m * Vector3::new(p.0, p.1, 1.0);
        if v.z.abs() < 1e-12 {
            return Err(Error::DegenerateMapping);
        }
        Ok((v.x / v.z, v.y / v.z))
    }

    pub fn inverse(&self) -> Option<Homography> {
        self.m.try_inverse().map(Homography::from_matrix)
    }

    pub fn compose(&self, other: &Homography) -> Homography {
        Homography::from_matrix(self.m * other.m)
    }

    /// Frobenius distance between normalized matrices.
    pub fn frobenius_distance(&self, other: &Homography) -> f64 {
        (self.m - other.m).norm()
    }
}

/// Correspondences consistent with a transform: at most one pair per
/// template index, each with reprojection distance strictly below tau.
#[derive(Clone, Debug, PartialEq)]
pub struct InlierSet {
    pub pairs: Vec<(usize, usize)>,
    pub tau: f64,
}

impl InlierSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Normalized DLT homography estimation from >= 4 point pairs.
pub fn estimate_dlt(matches: &[((f64, f64), (f64, f64))]) -> Result<Homography> {
    let n = matches.len();
    if n < 4 {
        return Err(Error::EstimationFailure(format!(
            "need at least 4 pairs, got {n}"
        )));
    }
    let src: Vec<(f64, f64)> = matches.iter().map(|m| m.0).collect();
    let dst: Vec<(f64, f64)> = matches.iter().map(|m| m.1).collect();
    let t_src = hartley_normalization(&src)?;
    let t_dst = hartley_normalization(&dst)?;

    let mut a = DMatrix::<f64>::zeros(2 * n, 9);
    for (r, (&s, &d)) in src.iter().zip(dst.iter()).enumerate() {
        let (x, y) = apply_affine(&t_src, s);
        let (u, v) = apply_affine(&t_dst, d);
        let row1 = [-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u];
        let row2 = [0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v];
        for c in 0..9 {
            a[(2 * r, c)] = row1[c];
            a[(2 * r + 1, c)] = row2[c];
        }
    }

    // Null vector of A via the eigendecomposition of A^T A; a thin SVD of a
    // wide A (the 4-point case) would not expose the null space.
    let eig = (a.transpose() * &a).symmetric_eigen();
    let sv: Vec<f64> = (0..9).map(|i| eig.eigenvalues[i].max(0.0).sqrt()).collect();
    let (mut min_idx, mut min_val) = (0usize, f64::INFINITY);
    let mut max_val = 0.0f64;
    for (i, &s) in sv.iter().enumerate() {
        if s < min_val {
            min_val = s;
            min_idx = i;
        }
        max_val = max_val.max(s);
    }
    // Rank deficiency beyond the expected 1-D null space.
    let mut second_min = f64::INFINITY;
    for (i, &s) in sv.iter().enumerate() {
        if i != min_idx {
            second_min = second_min.min(s);
        }
    }
    // threshold sized for eigenvalue noise of the squared system
    if !(max_val > 0.0) || second_min <= max_val * 1e-7 {
        return Err(Error::EstimationFailure(
            "degenerate point configuration".into(),
        ));
    }

    let h = eig.eigenvectors.column(min_idx);
    let h_norm = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);
    let denorm = affine_inverse(&t_dst) * h_norm * affine_matrix(&t_src);
    if denorm.determinant().abs() < 1e-12 {
        return Err(Error::EstimationFailure("singular homography".into()));
    }
    Ok(Homography::from_matrix(denorm))
}

/// Similarity transform (scale, tx, ty) translating points to their centroid
/// and scaling mean distance to sqrt(2).
fn hartley_normalization(points: &[(f64, f64)]) -> Result<(f64, f64, f64)> {
    let n = points.len() as f64;
    let cx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let cy = points.iter().map(|p| p.1).sum::<f64>() / n;
    let mean_dist = points
        .iter()
        .map(|p| ((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt())
        .sum::<f64>()
        / n;
    if mean_dist < 1e-12 {
        return Err(Error::EstimationFailure("coincident points".into()));
    }
    let s = std::f64::consts::SQRT_2 / mean_dist;
    Ok((s, -s * cx, -s * cy))
}

fn apply_affine(t: &(f64, f64, f64), p: (f64, f64)) -> (f64, f64) {
    (t.0 * p.0 + t.1, t.0 * p.1 + t.2)
}

fn affine_matrix(t: &(f64, f64, f64)) -> Matrix3<f64> {
    Matrix3::new(t.0, 0.0, t.1, 0.0, t.0, t.2, 0.0, 0.0, 1.0)
}

fn affine_inverse(t: &(f64, f64, f64)) -> Matrix3<f64> {
    Matrix3::new(
        1.0 / t.0,
        0.0,
        -t.1 / t.0,
        0.0,
        1.0 / t.0,
        -t.2 / t.0,
        0.0,
        0.0,
        1.0,
    )
}

/// A RANSAC hypothesis with its inlier count under the generating tau.
#[derive(Clone, Debug)]
pub struct Hypothesis {
    pub h: Homography,
    pub inlier_count: usize,
}

/// RANSAC over minimal 4-samples of template indices, each contributing its
/// best-scoring candidate match. Hypotheses are deduplicated by Frobenius
/// distance and annotated with their inlier count; deterministic per seed.
pub fn ransac_hypotheses(
    corr: &CorrespondenceSet,
    iters: usize,
    tau: f64,
    seed: u64,
) -> Vec<Hypothesis> {
    let usable: Vec<usize> = (0..corr.template.len())
        .filter(|&i| !corr.candidates[i].is_empty())
        .collect();
    if usable.len() < 4 {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hyps: Vec<Hypothesis> = Vec::new();
    for _ in 0..iters {
        let sample: Vec<usize> = usable.choose_multiple(&mut rng, 4).copied().collect();
        let pairs: Vec<((f64, f64), (f64, f64))> = sample
            .iter()
            .map(|&i| {
                let t = &corr.template[i];
                let j = corr.candidates[i][0].frame_idx;
                let f = &corr.frame[j];
                ((t.x, t.y), (f.x, f.y))
            })
            .collect();
        let Ok(h) = estimate_dlt(&pairs) else {
            continue;
        };
        if hyps
            .iter()
            .any(|e| e.h.frobenius_distance(&h) < HOMOGRAPHY_DEDUP_TOL)
        {
            continue;
        }
        let inlier_count = inlier_set(corr, &h, tau).len();
        hyps.push(Hypothesis { h, inlier_count });
    }
    hyps
}

/// Inlier set of `y` over the candidate correspondences: pairs with
/// reprojection distance strictly below tau, at most one per template index
/// (minimum distance, ties toward the lowest frame index).
pub fn inlier_set(corr: &CorrespondenceSet, y: &Homography, tau: f64) -> InlierSet {
    let mut pairs = Vec::new();
    for (i, t) in corr.template.iter().enumerate() {
        let Ok(proj) = y.apply((t.x, t.y)) else {
            continue;
        };
        let mut best: Option<(usize, f64)> = None;
        for cand in &corr.candidates[i] {
            let f = &corr.frame[cand.frame_idx];
            let d = ((proj.0 - f.x).powi(2) + (proj.1 - f.y).powi(2)).sqrt();
            if d < tau {
                let better = match best {
                    None => true,
                    Some((bj, bd)) => d < bd || (d == bd && cand.frame_idx < bj),
                };
                if better {
                    best = Some((cand.frame_idx, d));
                }
            }
        }
        if let Some((j, _)) = best {
            pairs.push((i, j));
        }
    }
    InlierSet { pairs, tau }
}

/// Structured loss: |#H(C, y_true) - #H(C, y)|.
pub fn delta_loss(corr: &CorrespondenceSet, y_true: &Homography, y: &Homography, tau: f64) -> usize {
    let a = inlier_set(corr, y_true, tau).len();
    let b = inlier_set(corr, y, tau).len();
    a.abs_diff(b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Candidate, CorrespondenceSet};
    use approx::assert_relative_eq;
    use rand::Rng;
    use std::sync::Arc;

    fn kp(x: f64, y: f64) -> crate::features::Keypoint {
        crate::features::Keypoint {
            x,
            y,
            score: 0,
            descriptor: None,
        }
    }

    /// Correspondence set from explicit point pairs, one candidate per slot.
    fn corr_from_pairs(pairs: &[((f64, f64), (f64, f64))]) -> CorrespondenceSet {
        let template: Vec<_> = pairs.iter().map(|p| kp(p.0 .0, p.0 .1)).collect();
        let frame: Vec<_> = pairs.iter().map(|p| kp(p.1 .0, p.1 .1)).collect();
        let candidates = (0..pairs.len())
            .map(|i| {
                vec![Candidate {
                    frame_idx: i,
                    score: 1.0,
                }]
            })
            .collect();
        CorrespondenceSet {
            template: Arc::new(template),
            frame,
            candidates,
        }
    }

    fn random_homography(rng: &mut impl Rng) -> Homography {
        // modest perturbation of identity keeps the matrix well-conditioned
        loop {
            let m: Matrix3<f64> = Matrix3::new(
                1.0 + rng.gen_range(-0.3..0.3),
                rng.gen_range(-0.3..0.3),
                rng.gen_range(-20.0..20.0),
                rng.gen_range(-0.3..0.3),
                1.0 + rng.gen_range(-0.3..0.3),
                rng.gen_range(-20.0..20.0),
                rng.gen_range(-1e-3..1e-3),
                rng.gen_range(-1e-3..1e-3),
                1.0,
            );
            let cond_ok = {
                let svd = m.svd(false, false);
                let sv = svd.singular_values;
                let max = sv.max();
                let min = sv.min();
                min > 0.0 && max / min < 100.0
            };
            if cond_ok && m.determinant().abs() > 1e-6 {
                return Homography::from_matrix(m);
            }
        }
    }

    #[test]
    fn identity_apply() {
        let h = Homography::identity();
        assert_eq!(h.apply((3.5, -2.0)).unwrap(), (3.5, -2.0));
    }

    #[test]
    fn translation_apply() {
        let h = Homography::translation(10.0, -4.0);
        assert_eq!(h.apply((0.0, 0.0)).unwrap(), (10.0, -4.0));
    }

    #[test]
    fn projective_scale_invariance() {
        let h = Homography::from_matrix(Matrix3::new(
            2.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 2.0,
        ));
        let (x, y) = h.apply((1.0, 1.0)).unwrap();
        assert_relative_eq!(x, 1.0, epsilon = 1e-12);
        assert_relative_eq!(y, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn point_at_infinity_is_degenerate() {
        let h = Homography {
            m: Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0, -1.0),
        };
        assert!(h.apply((1.0, 0.0)).is_err());
    }

    #[test]
    fn apply_roundtrip_through_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let h = random_homography(&mut rng);
            let inv = h.inverse().unwrap();
            let p = (rng.gen_range(-50.0..50.0), rng.gen_range(-50.0..50.0));
            let q = h.apply(p).unwrap();
            let back = inv.apply(q).unwrap();
            assert_relative_eq!(back.0, p.0, epsilon = 1e-9);
            assert_relative_eq!(back.1, p.1, epsilon = 1e-9);
        }
    }

    #[test]
    fn dlt_identity_from_unit_square() {
        let pairs: Vec<_> = [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)]
            .iter()
            .map(|&p| (p, p))
            .collect();
        let h = estimate_dlt(&pairs).unwrap();
        for (a, b) in h
            .matrix()
            .iter()
            .zip(Matrix3::<f64>::identity().iter())
        {
            assert_relative_eq!(a, b, epsilon = 1e-9);
        }
    }

    #[test]
    fn dlt_translation_from_shifted_square() {
        let pairs: Vec<_> = [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)]
            .iter()
            .map(|&(x, y)| ((x, y), (x + 5.0, y + 7.0)))
            .collect();
        let h = estimate_dlt(&pairs).unwrap();
        let expect = Homography::translation(5.0, 7.0);
        assert!(h.frobenius_distance(&expect) < 1e-9);
    }

    #[test]
    fn dlt_recovers_random_homography() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let h = random_homography(&mut rng);
            let pairs: Vec<_> = (0..6)
                .map(|_| {
                    let p = (rng.gen_range(0.0..100.0), rng.gen_range(0.0..100.0));
                    (p, h.apply(p).unwrap())
                })
                .collect();
            let est = match estimate_dlt(&pairs) {
                Ok(e) => e,
                Err(_) => continue, // collinear draw
            };
            for (a, b) in est.matrix().iter().zip(h.matrix().iter()) {
                assert_relative_eq!(a, b, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn dlt_rejects_collinear_points() {
        let pairs: Vec<_> = (0..5)
            .map(|i| {
                let p = (i as f64, 2.0 * i as f64);
                (p, p)
            })
            .collect();
        assert!(estimate_dlt(&pairs).is_err());
    }

    #[test]
    fn inlier_set_empty_corr() {
        let corr = corr_from_pairs(&[]);
        assert!(inlier_set(&corr, &Homography::identity(), 5.0).is_empty());
    }

    #[test]
    fn inlier_boundary_is_strict() {
        let corr = corr_from_pairs(&[((0.0, 0.0), (4.9, 0.0))]);
        assert_eq!(inlier_set(&corr, &Homography::identity(), 5.0).len(), 1);
        let corr = corr_from_pairs(&[((0.0, 0.0), (5.0, 0.0))]);
        assert_eq!(inlier_set(&corr, &Homography::identity(), 5.0).len(), 0);
    }

    #[test]
    fn inlier_set_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let pairs: Vec<_> = (0..20)
                .map(|_| {
                    (
                        (rng.gen_range(0.0..60.0), rng.gen_range(0.0..60.0)),
                        (rng.gen_range(0.0..60.0), rng.gen_range(0.0..60.0)),
                    )
                })
                .collect();
            let corr = corr_from_pairs(&pairs);
            let y = random_homography(&mut rng);
            let tau = rng.gen_range(1.0..40.0);
            let got = inlier_set(&corr, &y, tau);
            // brute force over every (i, candidate) pair
            let mut expect = Vec::new();
            for i in 0..corr.template.len() {
                let t = &corr.template[i];
                let proj = y.apply((t.x, t.y)).unwrap();
                let mut best: Option<(usize, f64)> = None;
                for c in &corr.candidates[i] {
                    let f = &corr.frame[c.frame_idx];
                    let d = ((proj.0 - f.x).powi(2) + (proj.1 - f.y).powi(2)).sqrt();
                    if d < tau && best.map_or(true, |(_, bd)| d < bd) {
                        best = Some((c.frame_idx, d));
                    }
                }
                if let Some((j, _)) = best {
                    expect.push((i, j));
                }
            }
            assert_eq!(got.pairs, expect);
        }
    }

    #[test]
    fn inlier_set_monotone_in_tau() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let pairs: Vec<_> = (0..15)
                .map(|_| {
                    (
                        (rng.gen_range(0.0..60.0), rng.gen_range(0.0..60.0)),
                        (rng.gen_range(0.0..60.0), rng.gen_range(0.0..60.0)),
                    )
                })
                .collect();
            let corr = corr_from_pairs(&pairs);
            let y = random_homography(&mut rng);
            let t1 = rng.gen_range(1.0..20.0);
            let t2 = t1 + rng.gen_range(0.0..30.0);
            let small = inlier_set(&corr, &y, t1);
            let big = inlier_set(&corr, &y, t2);
            for p in &small.pairs {
                assert!(big.pairs.contains(p));
            }
        }
    }

    #[test]
    fn delta_loss_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pairs: Vec<_> = (0..12)
            .map(|_| {
                (
                    (rng.gen_range(0.0..60.0), rng.gen_range(0.0..60.0)),
                    (rng.gen_range(0.0..60.0), rng.gen_range(0.0..60.0)),
                )
            })
            .collect();
        let corr = corr_from_pairs(&pairs);
        let y1 = random_homography(&mut rng);
        let y2 = random_homography(&mut rng);
        assert_eq!(delta_loss(&corr, &y1, &y1, 5.0), 0);
        let d = delta_loss(&corr, &y1, &y2, 8.0);
        let recount = inlier_set(&corr, &y1, 8.0)
            .len()
            .abs_diff(inlier_set(&corr, &y2, 8.0).len());
        assert_eq!(d, recount);
    }

    #[test]
    fn ransac_three_pairs_gives_empty() {
        let corr = corr_from_pairs(&[
            ((0.0, 0.0), (1.0, 1.0)),
            ((10.0, 0.0), (11.0, 1.0)),
            ((0.0, 10.0), (1.0, 11.0)),
        ]);
        assert!(ransac_hypotheses(&corr, 50, 5.0, 1).is_empty());
    }

    #[test]
    fn ransac_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let h = random_homography(&mut rng);
        let pairs: Vec<_> = (0..15)
            .map(|_| {
                let p = (rng.gen_range(0.0..100.0), rng.gen_range(0.0..100.0));
                (p, h.apply(p).unwrap())
            })
            .collect();
        let corr = corr_from_pairs(&pairs);
        let a = ransac_hypotheses(&corr, 30, 5.0, 99);
        let b = ransac_hypotheses(&corr, 30, 5.0, 99);
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.h, y.h);
            assert_eq!(x.inlier_count, y.inlier_count);
        }
    }

    #[test]
    fn ransac_finds_planted_homography_without_outliers() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let h = random_homography(&mut rng);
        let pairs: Vec<_> = (0..12)
            .map(|_| {
                let p = (rng.gen_range(0.0..100.0), rng.gen_range(0.0..100.0));
                (p, h.apply(p).unwrap())
            })
            .collect();
        let corr = corr_from_pairs(&pairs);
        let hyps = ransac_hypotheses(&corr, 50, 5.0, 8);
        assert!(hyps
            .iter()
            .any(|hy| hy.inlier_count == corr.template.len()));
    }
}
