//! Multi-task weight bank, correspondence scoring, the joint feature map
//! and structured prediction.

use std::collections::HashMap;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, DVectorView};

use crate::error::{Error, Result};
use crate::features::{Keypoint, DESCRIPTOR_BITS};
use crate::geometry::{inlier_set, Homography, Hypothesis};
use crate::metric::MetricMap;

/// One candidate frame match for a template slot.
#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub frame_idx: usize,
    pub score: f64,
}

/// Hypothetical correspondences between the template and one frame:
/// per template slot, a score-sorted shortlist of frame matches.
#[derive(Clone, Debug)]
pub struct CorrespondenceSet {
    pub template: Arc<Vec<Keypoint>>,
    pub frame: Vec<Keypoint>,
    pub candidates: Vec<Vec<Candidate>>,
}

impl CorrespondenceSet {
    pub fn n_template(&self) -> usize {
        self.template.len()
    }
}

/// The K task weight stacks w^1..w^K as a shared model w0 plus per-task
/// deviations v^k, all of length n_template * d_f.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBank {
    k_tasks: usize,
    n_template: usize,
    d_f: usize,
    w_common: DVector<f64>,
    v: Vec<DVector<f64>>,
    w: Vec<DVector<f64>>,
}

impl ModelBank {
    pub fn zeros(k_tasks: usize, n_template: usize) -> Self {
        let d_f = DESCRIPTOR_BITS;
        let len = n_template * d_f;
        Self {
            k_tasks,
            n_template,
            d_f,
            w_common: DVector::zeros(len),
            v: vec![DVector::zeros(len); k_tasks],
            w: vec![DVector::zeros(len); k_tasks],
        }
    }

    /// Initialize every task block i to the template descriptor's real view
    /// scaled to unit norm, so first-frame scoring is correlation matching.
    pub fn from_template(k_tasks: usize, template: &[Keypoint]) -> Self {
        let mut bank = Self::zeros(k_tasks, template.len());
        let mut stack = DVector::zeros(template.len() * DESCRIPTOR_BITS);
        for (i, kp) in template.iter().enumerate() {
            let d = kp.descriptor();
            let norm = (d.count_ones() as f64).sqrt();
            if norm > 0.0 {
                for b in d.set_bits() {
                    stack[i * DESCRIPTOR_BITS + b] = 1.0 / norm;
                }
            }
        }
        for k in 0..k_tasks {
            bank.w[k] = stack.clone();
        }
        // consistent decomposition: w0 = 0, v^k = w^k
        bank.v = bank.w.clone();
        bank
    }

    pub fn k_tasks(&self) -> usize {
        self.k_tasks
    }

    pub fn n_template(&self) -> usize {
        self.n_template
    }

    pub fn d_f(&self) -> usize {
        self.d_f
    }

    pub fn stack_len(&self) -> usize {
        self.n_template * self.d_f
    }

    pub fn w_common(&self) -> &DVector<f64> {
        &self.w_common
    }

    pub fn v(&self, k: usize) -> &DVector<f64> {
        &self.v[k]
    }

    /// Task stack w^k = w0 + v^k.
    pub fn w(&self, k: usize) -> &DVector<f64> {
        &self.w[k]
    }

    /// The most recent task's stack, used for prediction and scoring.
    pub fn w_last(&self) -> &DVector<f64> {
        &self.w[self.k_tasks - 1]
    }

    /// Per-keypoint block w_i of a task stack.
    pub fn block<'a>(&self, w: &'a DVector<f64>, i: usize) -> DVectorView<'a, f64> {
        w.rows(i * self.d_f, self.d_f)
    }

    /// Replace task k's stack, keeping v^k = w^k - w0.
    pub fn set_task(&mut self, k: usize, w_new: DVector<f64>) {
        self.v[k] = &w_new - &self.w_common;
        self.w[k] = w_new;
    }

    /// Overwrite the decomposition; used by common-model recovery.
    pub fn set_decomposition(&mut self, w_common: DVector<f64>) {
        for k in 0..self.k_tasks {
            self.v[k] = &self.w[k] - &w_common;
        }
        self.w_common = w_common;
    }

    /// Mean of the task stacks.
    pub fn w_mean(&self) -> DVector<f64> {
        let mut m = DVector::zeros(self.stack_len());
        for w in &self.w {
            m += w;
        }
        m / self.k_tasks as f64
    }
}

/// Score all template/frame pairs with s_ij = <w_i, f(d_j)> and keep the
/// `top_n` best frame candidates per template slot (ties toward lower j).
pub fn score_correspondences(
    template: &Arc<Vec<Keypoint>>,
    frame: Vec<Keypoint>,
    w_task: &DVector<f64>,
    fmap: &MetricMap,
    top_n: usize,
) -> Result<CorrespondenceSet> {
    let d_f = fmap.dim();
    if w_task.len() != template.len() * d_f {
        return Err(Error::Dimension(format!(
            "weight stack {} vs {} template blocks of {}",
            w_task.len(),
            template.len(),
            d_f
        )));
    }
    let n_t = template.len();
    let n_f = frame.len();
    let mut candidates = vec![Vec::new(); n_t];
    if n_t > 0 && n_f > 0 {
        // scores = Wstack (n_t x d) * F^T (d x n_f), F rows = mapped descriptors
        let wstack = DMatrix::from_fn(n_t, d_f, |i, c| w_task[i * d_f + c]);
        let mut fmat = DMatrix::zeros(n_f, d_f);
        for (j, kp) in frame.iter().enumerate() {
            let mapped = fmap.map_descriptor(kp.descriptor());
            fmat.row_mut(j).copy_from(&mapped.transpose());
        }
        let scores = wstack * fmat.transpose();
        for i in 0..n_t {
            let mut row: Vec<Candidate> = (0..n_f)
                .map(|j| Candidate {
                    frame_idx: j,
                    score: scores[(i, j)],
                })
                .collect();
            row.sort_by(|a, b| {
                b.score
                    .partial_cmp(&a.score)
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(a.frame_idx.cmp(&b.frame_idx))
            });
            row.truncate(top_n);
            candidates[i] = row;
        }
    }
    Ok(CorrespondenceSet {
        template: Arc::clone(template),
        frame,
        candidates,
    })
}

/// Joint feature map: block i holds f(d_j) for the inlier match of slot i,
/// zero otherwise.
pub fn joint_feature(
    corr: &CorrespondenceSet,
    y: &Homography,
    tau: f64,
    fmap: &MetricMap,
) -> DVector<f64> {
    let d_f = fmap.dim();
    let mut phi = DVector::zeros(corr.n_template() * d_f);
    for &(i, j) in &inlier_set(corr, y, tau).pairs {
        let mapped = fmap.map_descriptor(corr.frame[j].descriptor());
        phi.rows_mut(i * d_f, d_f).copy_from(&mapped);
    }
    phi
}

/// Compatibility F^k(C, y): total mapped score of the inliers of y.
pub fn compatibility(
    w_task: &DVector<f64>,
    corr: &CorrespondenceSet,
    y: &Homography,
    tau: f64,
    fmap: &MetricMap,
) -> f64 {
    let d_f = fmap.dim();
    inlier_set(corr, y, tau)
        .pairs
        .iter()
        .map(|&(i, j)| {
            let mapped = fmap.map_descriptor(corr.frame[j].descriptor());
            w_task.rows(i * d_f, d_f).dot(&mapped)
        })
        .sum()
}

/// Structured prediction: argmax of compatibility under the last task model
/// over the hypothesis list. Ties prefer the higher inlier count, then the
/// earlier hypothesis. `None` when the list is empty (detection failure).
pub fn predict(
    bank: &ModelBank,
    corr: &CorrespondenceSet,
    hyps: &[Hypothesis],
    tau: f64,
    fmap: &MetricMap,
) -> Option<(Homography, f64)> {
    let w = bank.w_last();
    let d_f = fmap.dim();
    // map each referenced frame descriptor once, not once per hypothesis
    let mut mapped: HashMap<usize, DVector<f64>> = HashMap::new();
    let mut pair_score: HashMap<(usize, usize), f64> = HashMap::new();
    for (i, cands) in corr.candidates.iter().enumerate() {
        for c in cands {
            let f = mapped
                .entry(c.frame_idx)
                .or_insert_with(|| fmap.map_descriptor(corr.frame[c.frame_idx].descriptor()));
            pair_score.insert((i, c.frame_idx), w.rows(i * d_f, d_f).dot(f));
        }
    }
    let mut best: Option<(usize, f64)> = None;
    for (idx, hyp) in hyps.iter().enumerate() {
        let score: f64 = inlier_set(corr, &hyp.h, tau)
            .pairs
            .iter()
            .map(|&(i, j)| pair_score[&(i, j)])
            .sum();
        let better = match best {
            None => true,
            Some((bidx, bscore)) => {
                score > bscore
                    || (score == bscore && hyp.inlier_count > hyps[bidx].inlier_count)
            }
        };
        if better {
            best = Some((idx, score));
        }
    }
    best.map(|(idx, score)| (hyps[idx].h.clone(), score))
}
