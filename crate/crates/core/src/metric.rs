//! Learned linear feature map f(d) = M^T d, doublet margins, and the
//! iteratively reweighted l2,1 machinery.

use nalgebra::{DMatrix, DVector, DVectorView};

use crate::error::{Error, Result};
use crate::features::Descriptor;

pub const DEFAULT_ROW_NORM_FLOOR: f64 = 1e-8;

/// Square linear feature map with its row-norm floor for reweighting.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricMap {
    m: DMatrix<f64>,
    /// Cached transpose: mapping a descriptor sums contiguous columns.
    mt: DMatrix<f64>,
    /// Cached identity check; the identity map copies descriptors through.
    identity: bool,
    epsilon: f64,
}

impl MetricMap {
    pub fn identity(dim: usize) -> Self {
        Self {
            m: DMatrix::identity(dim, dim),
            mt: DMatrix::identity(dim, dim),
            identity: true,
            epsilon: DEFAULT_ROW_NORM_FLOOR,
        }
    }

    pub fn from_matrix(m: DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::Dimension(format!(
                "metric map must be square, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        Ok(Self {
            mt: m.transpose(),
            identity: m == DMatrix::identity(m.nrows(), m.ncols()),
            m,
            epsilon: DEFAULT_ROW_NORM_FLOOR,
        })
    }

    #[cfg(test)]
    pub fn random(dim: usize, seed: u64) -> Self {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let m = DMatrix::from_fn(dim, dim, |_, _| rng.gen_range(-1.0..1.0));
        Self {
            mt: m.transpose(),
            identity: false,
            m,
            epsilon: DEFAULT_ROW_NORM_FLOOR,
        }
    }

    pub fn dim(&self) -> usize {
        self.m.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.m
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            m: &self.m * c,
            mt: &self.mt * c,
            identity: self.identity && c == 1.0,
            epsilon: self.epsilon,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.identity
    }

    /// f(d) = M^T d.
    pub fn map_feature(&self, d: &DVector<f64>) -> DVector<f64> {
        assert_eq!(d.len(), self.dim(), "feature dimension mismatch");
        self.m.transpose() * d
    }

    /// f over a binary descriptor: sums the rows of M at set bit positions.
    pub fn map_descriptor(&self, d: &Descriptor) -> DVector<f64> {
        let dim = self.dim();
        let mut out = DVector::zeros(dim);
        if self.identity {
            for b in d.set_bits() {
                out[b] = 1.0;
            }
            return out;
        }
        let data = self.mt.as_slice();
        let out_slice = out.as_mut_slice();
        for b in d.set_bits() {
            let col = &data[b * dim..(b + 1) * dim];
            for (o, c) in out_slice.iter_mut().zip(col) {
                *o += *c;
            }
        }
        out
    }

    /// f over many descriptors at once, one mapped feature per column.
    /// A single matrix product beats per-descriptor row sums for large
    /// batches, which are bandwidth-bound on the full map.
    pub fn map_descriptors(&self, descs: &[&Descriptor]) -> DMatrix<f64> {
        let dim = self.dim();
        let mut d = DMatrix::zeros(dim, descs.len());
        for (c, desc) in descs.iter().enumerate() {
            let col = &mut d.as_mut_slice()[c * dim..(c + 1) * dim];
            for b in desc.set_bits() {
                col[b] = 1.0;
            }
        }
        if self.identity {
            return d;
        }
        &self.mt * d
    }
}

/// Doublet margin D_i = <w_i, f(d_j) - f(d_j')>.
pub fn doublet_distance(
    w_i: &DVectorView<f64>,
    fmap: &MetricMap,
    d_j: &Descriptor,
    d_j2: &Descriptor,
) -> f64 {
    let diff = fmap.map_descriptor(d_j) - fmap.map_descriptor(d_j2);
    w_i.dot(&diff)
}

/// Hinge over the most violating negative:
/// value = [max_{j'}(1 - D_i(d_j, d_j'))]_+, argmax reported either way.
/// `None` when there are no negatives (the term contributes 0).
pub fn beta_term(
    w_i: &DVectorView<f64>,
    fmap: &MetricMap,
    positive: &Descriptor,
    negatives: &[&Descriptor],
) -> Option<(f64, usize)> {
    if negatives.is_empty() {
        return None;
    }
    let pos_score = w_i.dot(&fmap.map_descriptor(positive));
    let mut best = (f64::NEG_INFINITY, 0usize);
    for (idx, neg) in negatives.iter().enumerate() {
        let margin = pos_score - w_i.dot(&fmap.map_descriptor(neg));
        let v = 1.0 - margin;
        if v > best.0 {
            best = (v, idx);
        }
    }
    Some((best.0.max(0.0), best.1))
}

/// l2,1 norm: sum of row 2-norms.
pub fn l21_norm(m: &DMatrix<f64>) -> f64 {
    (0..m.nrows()).map(|i| m.row(i).norm()).sum()
}

/// Reweighting diagonal D_ii = 1 / (2 max(||M^i||, epsilon)).
pub fn reweight_diagonal(m: &DMatrix<f64>, epsilon: f64) -> DVector<f64> {
    DVector::from_fn(m.nrows(), |i, _| {
        1.0 / (2.0 * m.row(i).norm().max(epsilon))
    })
}

/// Metric update over the window: alternates reweighting with backtracked
/// gradient steps on the surrogate objective, never increasing the true
/// l2,1-regularized loss. Errors on a non-finite objective; the caller then
/// keeps the previous map.
pub fn solve_m_step(
    fmap: &MetricMap,
    samples: &[crate::optimizer::TrainingSample],
    bank: &crate::model::ModelBank,
    hyper: &crate::optimizer::HyperParams,
    inner_iters: usize,
    step: f64,
) -> Result<MetricMap> {
    crate::objective::solve_m_step_impl(fmap, samples, bank, hyper, inner_iters, step)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_desc(rng: &mut impl Rng) -> Descriptor {
        Descriptor::from_words([rng.gen(), rng.gen(), rng.gen(), rng.gen()])
    }

    #[test]
    fn identity_map_is_noop() {
        let fmap = MetricMap::identity(256);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = random_desc(&mut rng);
        let real = DVector::from_vec(d.to_real());
        assert_eq!(fmap.map_feature(&real), real);
        assert_eq!(fmap.map_descriptor(&d), real);
    }

    #[test]
    fn doubled_identity_doubles() {
        let fmap = MetricMap::identity(256).scaled(2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = random_desc(&mut rng);
        let real = DVector::from_vec(d.to_real());
        assert_eq!(fmap.map_feature(&real), 2.0 * &real);
    }

    #[test]
    fn map_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = DMatrix::from_fn(4, 4, |_, _| rng.gen_range(-2.0..2.0));
        let fmap = MetricMap::from_matrix(m.clone()).unwrap();
        let d = DVector::from_vec(vec![1.0, 0.0, 1.0, 1.0]);
        let got = fmap.map_feature(&d);
        for r in 0..4 {
            let mut acc = 0.0;
            for c in 0..4 {
                acc += m[(c, r)] * d[c];
            }
            assert_relative_eq!(got[r], acc, epsilon = 1e-12);
        }
    }

    #[test]
    fn doublet_antisymmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let fmap = MetricMap::random(256, 5);
        let w = DVector::from_fn(256, |_, _| rng.gen_range(-1.0..1.0));
        let a = random_desc(&mut rng);
        let b = random_desc(&mut rng);
        assert_eq!(doublet_distance(&w.rows(0, 256), &fmap, &a, &a), 0.0);
        let ab = doublet_distance(&w.rows(0, 256), &fmap, &a, &b);
        let ba = doublet_distance(&w.rows(0, 256), &fmap, &b, &a);
        assert_relative_eq!(ab, -ba, epsilon = 1e-9);
    }

    #[test]
    fn doublet_equals_two_term_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let fmap = MetricMap::random(256, 7);
        let w = DVector::from_fn(256, |_, _| rng.gen_range(-1.0..1.0));
        let a = random_desc(&mut rng);
        let b = random_desc(&mut rng);
        let d = doublet_distance(&w.rows(0, 256), &fmap, &a, &b);
        let expect = w.dot(&fmap.map_descriptor(&a)) - w.dot(&fmap.map_descriptor(&b));
        assert_relative_eq!(d, expect, epsilon = 1e-9);
    }

    #[test]
    fn beta_satisfied_margins_give_zero() {
        // w picks a single bit where positive is 1 and negatives are 0,
        // scaled so every margin is 3
        let mut pos = Descriptor::default();
        pos.set_bit(0, true);
        let neg = Descriptor::default();
        let fmap = MetricMap::identity(256);
        let w = DVector::from_fn(256, |i, _| if i == 0 { 3.0 } else { 0.0 });
        let (v, _) = beta_term(&w.rows(0, 256), &fmap, &pos, &[&neg, &neg]).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn beta_hinge_arithmetic() {
        // margins 0.2 and -1.0 -> value 2.0, argmax the second negative
        let mut pos = Descriptor::default();
        pos.set_bit(0, true);
        let mut neg_weak = Descriptor::default();
        neg_weak.set_bit(1, true);
        let mut neg_strong = Descriptor::default();
        neg_strong.set_bit(2, true);
        let fmap = MetricMap::identity(256);
        let mut w = DVector::zeros(256);
        w[0] = 0.0;
        w[1] = -0.2; // margin vs weak: 0 - (-0.2) = 0.2
        w[2] = 1.0; // margin vs strong: 0 - 1.0 = -1.0
        let (v, arg) = beta_term(&w.rows(0, 256), &fmap, &pos, &[&neg_weak, &neg_strong]).unwrap();
        assert_relative_eq!(v, 2.0, epsilon = 1e-12);
        assert_eq!(arg, 1);
    }

    #[test]
    fn beta_matches_exhaustive_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let fmap = MetricMap::random(256, rng.gen());
            let w = DVector::from_fn(256, |_, _| rng.gen_range(-0.2..0.2));
            let pos = random_desc(&mut rng);
            let negs: Vec<Descriptor> = (0..6).map(|_| random_desc(&mut rng)).collect();
            let refs: Vec<&Descriptor> = negs.iter().collect();
            let (v, arg) = beta_term(&w.rows(0, 256), &fmap, &pos, &refs).unwrap();
            let values: Vec<f64> = negs
                .iter()
                .map(|n| 1.0 - doublet_distance(&w.rows(0, 256), &fmap, &pos, n))
                .collect();
            let (bi, bv) = values
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (i, &x)| {
                    if x > acc.1 {
                        (i, x)
                    } else {
                        acc
                    }
                });
            assert_relative_eq!(v, bv.max(0.0), epsilon = 1e-9);
            assert_eq!(arg, bi);
            assert!(v >= 0.0);
        }
    }

    #[test]
    fn beta_empty_negatives_is_none() {
        let fmap = MetricMap::identity(256);
        let w = DVector::zeros(256);
        let pos = Descriptor::default();
        assert!(beta_term(&w.rows(0, 256), &fmap, &pos, &[]).is_none());
    }

    #[test]
    fn l21_examples() {
        assert_eq!(l21_norm(&DMatrix::identity(5, 5)), 5.0);
        assert_eq!(l21_norm(&DMatrix::zeros(3, 4)), 0.0);
        let m = DMatrix::from_row_slice(2, 2, &[3.0, 4.0, 0.0, 0.0]);
        assert_eq!(l21_norm(&m), 5.0);
    }

    #[test]
    fn reweight_examples() {
        let d = reweight_diagonal(&DMatrix::identity(3, 3), 1e-8);
        for i in 0..3 {
            assert_relative_eq!(d[i], 0.5);
        }
        let z = reweight_diagonal(&DMatrix::zeros(2, 2), 1e-8);
        assert_relative_eq!(z[0], 5e7);
    }

    #[test]
    fn trace_identity_off_the_floor() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = DMatrix::from_fn(6, 6, |_, _| rng.gen_range(0.5..2.0));
        let d = reweight_diagonal(&m, 1e-8);
        // 1/2 Tr(M^T D M) = 1/2 sum_i ||M^i||^2 / (2||M^i||)... times 2 = 1/2 l21
        let mut trace = 0.0;
        for i in 0..6 {
            trace += d[i] * m.row(i).norm_squared();
        }
        assert_relative_eq!(0.5 * trace, 0.25 * l21_norm(&m), epsilon = 1e-9);
    }
}
