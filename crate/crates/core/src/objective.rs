//! Joint objective evaluation shared by the task sweep and the metric step:
//! fast mapped-score tables, hinge-term collection, the full objective value
//! and its subgradients.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::features::Descriptor;
use crate::metric::{l21_norm, reweight_diagonal, MetricMap};
use crate::model::ModelBank;
use crate::optimizer::{task_samples, HyperParams, TrainingSample};

/// Mapped frame features shared across objective evaluations:
/// mapped[t][j] = M^T d_j for sample t's frame keypoint j. The table depends
/// only on the metric and the window, so the task-weight sweep reuses one
/// table across all its candidate evaluations; only a metric update
/// invalidates it.
pub struct ScoreCtx {
    /// One matrix per sample; column j holds M^T d_j.
    mapped: Vec<DMatrix<f64>>,
}

impl ScoreCtx {
    pub fn new(fmap: &MetricMap, samples: &[TrainingSample]) -> Self {
        let mapped = samples
            .iter()
            .map(|s| {
                let descs: Vec<&crate::features::Descriptor> =
                    s.corr.frame.iter().map(|kp| kp.descriptor()).collect();
                fmap.map_descriptors(&descs)
            })
            .collect();
        Self { mapped }
    }

    /// Maps only the frame descriptors the window's hinge terms read
    /// (per `tables`); other columns stay zero.
    pub fn for_tables(fmap: &MetricMap, samples: &[TrainingSample], tables: &ScoreTables) -> Self {
        let dim = fmap.dim();
        let mapped = samples
            .iter()
            .enumerate()
            .map(|(t, s)| {
                let needed = tables.needed_j(t);
                let descs: Vec<&crate::features::Descriptor> =
                    needed.iter().map(|&j| s.corr.frame[j].descriptor()).collect();
                let compact = fmap.map_descriptors(&descs);
                let mut full = DMatrix::zeros(dim, s.corr.frame.len());
                for (c, &j) in needed.iter().enumerate() {
                    full.column_mut(j).copy_from(&compact.column(c));
                }
                full
            })
            .collect();
        Self { mapped }
    }

    /// M^T d_j for sample t's frame keypoint j.
    pub fn mapped(&self, t: usize, j: usize) -> nalgebra::DVectorView<'_, f64> {
        self.mapped[t].column(j)
    }

    /// s = <w_i^k, M^T d_j> for sample t's frame keypoint j.
    pub fn score(&self, bank: &ModelBank, k: usize, t: usize, i: usize, j: usize) -> f64 {
        let d_f = bank.d_f();
        bank.w(k).rows(i * d_f, d_f).dot(&self.mapped[t].column(j))
    }
}

/// Structured hinge for one (task, sample).
#[derive(Clone, Debug)]
pub struct AlphaTerm {
    pub sample_idx: usize,
    pub value: f64,
    pub argmax_hyp: Option<usize>,
}

/// Doublet hinge for one inlier slot of one (task, sample); `argmax_neg`
/// indexes the sample's negative list for that slot.
#[derive(Clone, Debug)]
pub struct BetaTermRec {
    pub sample_idx: usize,
    pub pair_idx: usize,
    pub value: f64,
    pub argmax_neg: usize,
}

/// All hinge terms of the current window, grouped per task.
#[derive(Clone, Debug, Default)]
pub struct ViolationTerms {
    pub alpha: Vec<Vec<AlphaTerm>>,
    pub beta: Vec<Vec<BetaTermRec>>,
}

impl ViolationTerms {
    pub fn j_for_task(&self, k: usize, hyper: &HyperParams) -> f64 {
        let a: f64 = self.alpha[k].iter().map(|t| t.value).sum();
        let b: f64 = self.beta[k].iter().map(|t| t.value).sum();
        hyper.nu1 * a + hyper.nu2 * b
    }

    pub fn j_total(&self, hyper: &HyperParams) -> f64 {
        (0..self.alpha.len()).map(|k| self.j_for_task(k, hyper)).sum()
    }

    pub fn alpha_violations(&self) -> usize {
        self.alpha
            .iter()
            .flatten()
            .filter(|t| t.value > 0.0)
            .count()
    }

    pub fn beta_violations(&self) -> usize {
        self.beta
            .iter()
            .flatten()
            .filter(|t| t.value > 0.0)
            .count()
    }
}

/// Alpha and beta hinges of one (task, sample) under an arbitrary score
/// source `sc(i, j)`; shared by the mapped-feature and table evaluators.
fn eval_sample_terms<F: FnMut(usize, usize) -> f64>(
    t: usize,
    s: &TrainingSample,
    mut sc: F,
    alpha_out: &mut Vec<AlphaTerm>,
    beta_out: &mut Vec<BetaTermRec>,
) {
    // alpha: loss-augmented max over non-excluded hypotheses
    let f_true: f64 = s.inliers.pairs.iter().map(|&(i, j)| sc(i, j)).sum();
    let mut best: Option<(usize, f64)> = None;
    for (idx, _) in s.hyps.iter().enumerate() {
        if s.excluded[idx] {
            continue;
        }
        let f_h: f64 = s.hyp_inliers[idx].pairs.iter().map(|&(i, j)| sc(i, j)).sum();
        let v = s.deltas[idx] as f64 - (f_true - f_h);
        if best.map_or(true, |(_, bv)| v > bv) {
            best = Some((idx, v));
        }
    }
    alpha_out.push(match best {
        None => AlphaTerm {
            sample_idx: t,
            value: 0.0,
            argmax_hyp: None,
        },
        Some((idx, v)) => AlphaTerm {
            sample_idx: t,
            value: v.max(0.0),
            argmax_hyp: Some(idx),
        },
    });

    // beta: per inlier slot, hinge over the hardest negative
    for (p, &(i, j)) in s.inliers.pairs.iter().enumerate() {
        if s.negatives[p].is_empty() {
            continue;
        }
        let s_pos = sc(i, j);
        let mut nbest = (f64::NEG_INFINITY, 0usize);
        for (nidx, &j2) in s.negatives[p].iter().enumerate() {
            let v = 1.0 - (s_pos - sc(i, j2));
            if v > nbest.0 {
                nbest = (v, nidx);
            }
        }
        beta_out.push(BetaTermRec {
            sample_idx: t,
            pair_idx: p,
            value: nbest.0.max(0.0),
            argmax_neg: nbest.1,
        });
    }
}

/// Evaluate every alpha and beta term of the window under the score tables.
/// Task k consumes its suffix of the window (see `task_samples`).
pub fn compute_terms(
    ctx: &ScoreCtx,
    bank: &ModelBank,
    samples: &[TrainingSample],
    hyper: &HyperParams,
) -> ViolationTerms {
    let k_tasks = hyper.k_tasks;
    let mut terms = ViolationTerms {
        alpha: vec![Vec::new(); k_tasks],
        beta: vec![Vec::new(); k_tasks],
    };
    for k in 0..k_tasks {
        for t in task_samples(k, k_tasks, samples.len()) {
            let s = &samples[t];
            let n_f = s.corr.frame.len();
            let mut memo = vec![f64::NAN; s.corr.template.len() * n_f];
            let sc = |i: usize, j: usize| {
                let v = &mut memo[i * n_f + j];
                if v.is_nan() {
                    *v = ctx.score(bank, k, t, i, j);
                }
                *v
            };
            eval_sample_terms(t, s, sc, &mut terms.alpha[k], &mut terms.beta[k]);
        }
    }
    terms
}

/// Precomputed score entries for every hinge the window can read, one dense
/// block per (task, sample-in-suffix). Scores are linear in both a task
/// direction and a metric direction, so a line search re-evaluates hinges
/// from `base + scale * direction` without touching descriptors again.
pub struct ScoreTables {
    k_tasks: usize,
    /// vals[k][t]: i * n_f + j -> score; empty when task k skips sample t.
    vals: Vec<Vec<Vec<f64>>>,
    /// Distinct (i, j) entries each sample's hinges read.
    pairs: Vec<Vec<(usize, usize)>>,
    /// Distinct frame indices appearing in `pairs`, per sample.
    needed: Vec<Vec<usize>>,
    /// Set-bit index lists of the needed frame descriptors, parallel to
    /// `needed`, so hot loops avoid re-scanning descriptor words.
    jbits: Vec<Vec<Vec<u16>>>,
    /// Per sample: frame index -> position in `needed` (usize::MAX absent).
    jpos: Vec<Vec<usize>>,
    /// Distinct template slots appearing in any of task k's samples' pairs.
    used_slots: Vec<Vec<usize>>,
    /// Per task: slot index -> column in the gathered slot matrix.
    slot_col: Vec<Vec<usize>>,
    /// Scratch for the metric-direction product, sized to the widest task.
    wbuf: DMatrix<f64>,
    qbuf: DMatrix<f64>,
    /// hyp_sums[k][t][h]: sum of this table's entries over hypothesis h's
    /// inlier pairs; true_sums[k][t]: same over the predicted inlier pairs.
    /// Maintained by every fill so the alpha hinge is O(#hyps) to evaluate.
    hyp_sums: Vec<Vec<Vec<f64>>>,
    true_sums: Vec<Vec<f64>>,
}

impl ScoreTables {
    pub fn new(samples: &[TrainingSample], hyper: &HyperParams) -> Self {
        let mut pairs = Vec::with_capacity(samples.len());
        let mut needed = Vec::with_capacity(samples.len());
        for s in samples {
            let n_f = s.corr.frame.len();
            let mut seen = vec![false; s.corr.template.len() * n_f];
            let mut seen_j = vec![false; n_f];
            let mut ps = Vec::new();
            let mut js = Vec::new();
            let mut push = |i: usize, j: usize, ps: &mut Vec<(usize, usize)>, js: &mut Vec<usize>| {
                if !seen[i * n_f + j] {
                    seen[i * n_f + j] = true;
                    ps.push((i, j));
                }
                if !seen_j[j] {
                    seen_j[j] = true;
                    js.push(j);
                }
            };
            for &(i, j) in &s.inliers.pairs {
                push(i, j, &mut ps, &mut js);
            }
            for hi in &s.hyp_inliers {
                for &(i, j) in &hi.pairs {
                    push(i, j, &mut ps, &mut js);
                }
            }
            for (p, negs) in s.negatives.iter().enumerate() {
                let (i, _) = s.inliers.pairs[p];
                for &j2 in negs {
                    push(i, j2, &mut ps, &mut js);
                }
            }
            pairs.push(ps);
            needed.push(js);
        }

        let k_tasks = hyper.k_tasks;
        let mut vals = vec![vec![Vec::new(); samples.len()]; k_tasks];
        for (k, row) in vals.iter_mut().enumerate() {
            for t in task_samples(k, k_tasks, samples.len()) {
                let s = &samples[t];
                row[t] = vec![0.0; s.corr.template.len() * s.corr.frame.len()];
            }
        }
        let mut jbits = Vec::with_capacity(samples.len());
        let mut jpos = Vec::with_capacity(samples.len());
        for (t, s) in samples.iter().enumerate() {
            let mut pos = vec![usize::MAX; s.corr.frame.len()];
            let mut bits = Vec::with_capacity(needed[t].len());
            for (p, &j) in needed[t].iter().enumerate() {
                pos[j] = p;
                bits.push(
                    s.corr.frame[j]
                        .descriptor()
                        .set_bits()
                        .map(|b| b as u16)
                        .collect(),
                );
            }
            jbits.push(bits);
            jpos.push(pos);
        }

        let n_slots = samples.first().map_or(0, |s| s.corr.template.len());
        let mut used_slots = Vec::with_capacity(k_tasks);
        let mut slot_col = Vec::with_capacity(k_tasks);
        for k in 0..k_tasks {
            let mut cols = vec![usize::MAX; n_slots];
            let mut used = Vec::new();
            for t in task_samples(k, k_tasks, samples.len()) {
                for &(i, _) in &pairs[t] {
                    if cols[i] == usize::MAX {
                        cols[i] = used.len();
                        used.push(i);
                    }
                }
            }
            used_slots.push(used);
            slot_col.push(cols);
        }
        let max_used = used_slots.iter().map(Vec::len).max().unwrap_or(0);
        let d_f = crate::features::DESCRIPTOR_BITS;
        Self {
            k_tasks,
            vals,
            pairs,
            needed,
            jbits,
            jpos,
            used_slots,
            slot_col,
            wbuf: DMatrix::zeros(d_f, max_used),
            qbuf: DMatrix::zeros(d_f, max_used),
            hyp_sums: (0..k_tasks)
                .map(|_| samples.iter().map(|s| vec![0.0; s.hyps.len()]).collect())
                .collect(),
            true_sums: vec![vec![0.0; samples.len()]; k_tasks],
        }
    }

    /// Refresh the cached pair sums of block (k, t) from its entries.
    fn recompute_sums(&mut self, k: usize, t: usize, s: &TrainingSample) {
        let n_f = s.corr.frame.len();
        let tab = &self.vals[k][t];
        self.true_sums[k][t] = s.inliers.pairs.iter().map(|&(i, j)| tab[i * n_f + j]).sum();
        for (h, hi) in s.hyp_inliers.iter().enumerate() {
            self.hyp_sums[k][t][h] = hi.pairs.iter().map(|&(i, j)| tab[i * n_f + j]).sum();
        }
    }

    pub fn needed_j(&self, t: usize) -> &[usize] {
        &self.needed[t]
    }

    /// Fill every entry with <w_i^k, M^T d_j> under the current models.
    pub fn fill_base(&mut self, ctx: &ScoreCtx, bank: &ModelBank, samples: &[TrainingSample]) {
        for k in 0..self.k_tasks {
            for t in task_samples(k, self.k_tasks, samples.len()) {
                let n_f = samples[t].corr.frame.len();
                let tab = &mut self.vals[k][t];
                for &(i, j) in &self.pairs[t] {
                    tab[i * n_f + j] = ctx.score(bank, k, t, i, j);
                }
                self.recompute_sums(k, t, &samples[t]);
            }
        }
    }

    /// Fill task k's entries with <dw_i, M^T d_j> for a task direction `dw`;
    /// other tasks' entries are untouched (their direction is zero).
    pub fn fill_direction(
        &mut self,
        k: usize,
        dw: &DVector<f64>,
        ctx: &ScoreCtx,
        d_f: usize,
        samples: &[TrainingSample],
    ) {
        for t in task_samples(k, self.k_tasks, samples.len()) {
            let n_f = samples[t].corr.frame.len();
            let tab = &mut self.vals[k][t];
            for &(i, j) in &self.pairs[t] {
                tab[i * n_f + j] = dw.rows(i * d_f, d_f).dot(&ctx.mapped(t, j));
            }
            self.recompute_sums(k, t, &samples[t]);
        }
    }

    /// Fill every entry with <w_i^k, G^T d_j> for a metric direction `G`
    /// (the score shift per unit step along M - s G is minus this).
    /// Evaluated as (G w_i)^T d_j: one matrix product per task against its
    /// stacked slots, then a bit-sum per entry — never maps a descriptor.
    pub fn fill_metric_direction(
        &mut self,
        grad: &DMatrix<f64>,
        bank: &ModelBank,
        samples: &[TrainingSample],
    ) {
        let d_f = bank.d_f();
        for k in 0..self.k_tasks {
            // q columns: G w_i for the slots task k's hinges actually read
            let used = &self.used_slots[k];
            if used.is_empty() {
                continue;
            }
            let w = bank.w(k);
            for (c, &i) in used.iter().enumerate() {
                self.wbuf.column_mut(c).copy_from(&w.rows(i * d_f, d_f));
            }
            let mut qv = self.qbuf.view_mut((0, 0), (d_f, used.len()));
            grad.mul_to(&self.wbuf.view((0, 0), (d_f, used.len())), &mut qv);
            let qdata = self.qbuf.as_slice();
            let dim = self.qbuf.nrows();
            let cols = &self.slot_col[k];
            for t in task_samples(k, self.k_tasks, samples.len()) {
                let n_f = samples[t].corr.frame.len();
                let tab = &mut self.vals[k][t];
                for &(i, j) in &self.pairs[t] {
                    let col = &qdata[cols[i] * dim..(cols[i] + 1) * dim];
                    let mut acc = 0.0;
                    for &b in &self.jbits[t][self.jpos[t][j]] {
                        acc += col[b as usize];
                    }
                    tab[i * n_f + j] = acc;
                }
            }
        }
        for k in 0..self.k_tasks {
            for t in task_samples(k, self.k_tasks, samples.len()) {
                self.recompute_sums(k, t, &samples[t]);
            }
        }
    }

    /// self += scale * other over the needed entries (matching shapes).
    pub fn accumulate(&mut self, scale: f64, other: &ScoreTables, samples: &[TrainingSample]) {
        for k in 0..self.k_tasks {
            for t in task_samples(k, self.k_tasks, samples.len()) {
                let n_f = samples[t].corr.frame.len();
                let tab = &mut self.vals[k][t];
                let src = &other.vals[k][t];
                for &(i, j) in &self.pairs[t] {
                    tab[i * n_f + j] += scale * src[i * n_f + j];
                }
                self.true_sums[k][t] += scale * other.true_sums[k][t];
                for (h, v) in self.hyp_sums[k][t].iter_mut().enumerate() {
                    *v += scale * other.hyp_sums[k][t][h];
                }
            }
        }
    }
}

/// `compute_terms` over precomputed tables: scores read
/// `base + scale * direction` (or `base` alone when `lin` is `None`).
pub fn compute_terms_tables(
    base: &ScoreTables,
    lin: Option<(&ScoreTables, f64)>,
    samples: &[TrainingSample],
    hyper: &HyperParams,
) -> ViolationTerms {
    let k_tasks = hyper.k_tasks;
    let mut terms = ViolationTerms {
        alpha: vec![Vec::new(); k_tasks],
        beta: vec![Vec::new(); k_tasks],
    };
    for k in 0..k_tasks {
        for t in task_samples(k, k_tasks, samples.len()) {
            let s = &samples[t];
            let n_f = s.corr.frame.len();
            let bt = &base.vals[k][t];
            let dt = lin.map(|(d, c)| (&d.vals[k][t], c));
            let sc = |i: usize, j: usize| {
                let idx = i * n_f + j;
                match dt {
                    Some((d, c)) => bt[idx] + c * d[idx],
                    None => bt[idx],
                }
            };
            eval_sample_terms(t, s, sc, &mut terms.alpha[k], &mut terms.beta[k]);
        }
    }
    terms
}

/// Full regularized objective:
/// 1/2 ||w0||^2 + lambda1/(2K) sum_k ||v^k||^2 + lambda2 ||M||_{2,1} + sum_k J^k.
pub fn objective_full(
    bank: &ModelBank,
    fmap: &MetricMap,
    terms: &ViolationTerms,
    hyper: &HyperParams,
) -> f64 {
    let mut obj = 0.5 * bank.w_common().norm_squared();
    let k = bank.k_tasks() as f64;
    for i in 0..bank.k_tasks() {
        obj += hyper.lambda1 / (2.0 * k) * bank.v(i).norm_squared();
    }
    obj += hyper.lambda2 * l21_norm(fmap.matrix());
    obj + terms.j_total(hyper)
}

/// dJ/dw^k assembled from the violated hinge terms:
/// alpha contributes nu1 (Phi(y_hat) - Phi(y_t)), beta contributes
/// nu2 (f(d_neg) - f(d_pos)) in the slot's block.
pub fn grad_w(
    k: usize,
    bank: &ModelBank,
    samples: &[TrainingSample],
    terms: &ViolationTerms,
    ctx: &ScoreCtx,
    hyper: &HyperParams,
) -> DVector<f64> {
    let d_f = bank.d_f();
    let mut g = DVector::zeros(bank.stack_len());

    for a in &terms.alpha[k] {
        if a.value <= 0.0 {
            continue;
        }
        let Some(h) = a.argmax_hyp else { continue };
        let s = &samples[a.sample_idx];
        for &(i, j) in &s.hyp_inliers[h].pairs {
            g.rows_mut(i * d_f, d_f)
                .axpy(hyper.nu1, &ctx.mapped(a.sample_idx, j), 1.0);
        }
        for &(i, j) in &s.inliers.pairs {
            g.rows_mut(i * d_f, d_f)
                .axpy(-hyper.nu1, &ctx.mapped(a.sample_idx, j), 1.0);
        }
    }
    for b in &terms.beta[k] {
        if b.value <= 0.0 {
            continue;
        }
        let s = &samples[b.sample_idx];
        let (i, j_pos) = s.inliers.pairs[b.pair_idx];
        let j_neg = s.negatives[b.pair_idx][b.argmax_neg];
        g.rows_mut(i * d_f, d_f)
            .axpy(hyper.nu2, &ctx.mapped(b.sample_idx, j_neg), 1.0);
        g.rows_mut(i * d_f, d_f)
            .axpy(-hyper.nu2, &ctx.mapped(b.sample_idx, j_pos), 1.0);
    }
    g
}

/// d(sum_k J^k)/dM as a sum of outer products d w_i^T over the violated
/// terms; a descriptor's outer product adds w_i to the rows at its set bits.
pub fn grad_m_j(
    bank: &ModelBank,
    samples: &[TrainingSample],
    terms: &ViolationTerms,
    hyper: &HyperParams,
    dim: usize,
) -> DMatrix<f64> {
    // Every contribution is c * d_j w_i^T, so terms sharing (task, slot) share
    // the rank-1 factor w_i: accumulate per-slot weighted bit counts first and
    // emit one rank-1 update per touched (task, slot) at the end.
    let d_f = bank.d_f();
    let n_slots = bank.stack_len() / d_f;
    let mut acc: Vec<Option<DVector<f64>>> = vec![None; bank.k_tasks() * n_slots];
    let bump = |acc: &mut Vec<Option<DVector<f64>>>, k: usize, i: usize, d: &Descriptor, c: f64| {
        let e = acc[k * n_slots + i].get_or_insert_with(|| DVector::zeros(dim));
        for b in d.set_bits() {
            e[b] += c;
        }
    };

    for k in 0..bank.k_tasks() {
        for a in &terms.alpha[k] {
            if a.value <= 0.0 {
                continue;
            }
            let Some(h) = a.argmax_hyp else { continue };
            let s = &samples[a.sample_idx];
            for &(i, j) in &s.hyp_inliers[h].pairs {
                bump(&mut acc, k, i, s.corr.frame[j].descriptor(), hyper.nu1);
            }
            for &(i, j) in &s.inliers.pairs {
                bump(&mut acc, k, i, s.corr.frame[j].descriptor(), -hyper.nu1);
            }
        }
        for b in &terms.beta[k] {
            if b.value <= 0.0 {
                continue;
            }
            let s = &samples[b.sample_idx];
            let (i, j_pos) = s.inliers.pairs[b.pair_idx];
            let j_neg = s.negatives[b.pair_idx][b.argmax_neg];
            bump(&mut acc, k, i, s.corr.frame[j_pos].descriptor(), -hyper.nu2);
            bump(&mut acc, k, i, s.corr.frame[j_neg].descriptor(), hyper.nu2);
        }
    }

    let mut g = DMatrix::zeros(dim, dim);
    for k in 0..bank.k_tasks() {
        let w = bank.w(k);
        for i in 0..n_slots {
            if let Some(s) = &acc[k * n_slots + i] {
                g.ger(1.0, s, &w.rows(i * d_f, d_f), 1.0);
            }
        }
    }
    g
}

/// Tr(M^T D M) for diagonal D.
pub fn tr_mdm(m: &DMatrix<f64>, d_diag: &DVector<f64>) -> f64 {
    (0..m.nrows()).map(|r| d_diag[r] * m.row(r).norm_squared()).sum()
}

const M_MAX_HALVINGS: usize = 10;

/// Iteratively reweighted metric update over score tables. Each inner
/// iteration recomputes the reweighting diagonal, then takes one backtracked
/// gradient step on the fixed-D surrogate Tr(M^T D M) + J/lambda2; surrogate
/// descent never increases the true l2,1-regularized objective.
///
/// `base` and `terms` must describe (`fmap`, `bank`) on entry and do so for
/// the updated map on exit; `scratch` is same-shape working storage. Returns
/// whether the map changed.
pub fn m_step_tables(
    fmap: &mut MetricMap,
    samples: &[TrainingSample],
    bank: &ModelBank,
    hyper: &HyperParams,
    inner_iters: usize,
    step: f64,
    base: &mut ScoreTables,
    scratch: &mut ScoreTables,
    terms: &mut ViolationTerms,
) -> Result<bool> {
    let dim = fmap.dim();
    let mut changed = false;
    for _ in 0..inner_iters {
        let d_diag = reweight_diagonal(fmap.matrix(), fmap.epsilon());
        let t0 = tr_mdm(fmap.matrix(), &d_diag);
        let g0 = t0 + terms.j_total(hyper) / hyper.lambda2;
        if !g0.is_finite() {
            return Err(Error::EstimationFailure(
                "non-finite metric objective".into(),
            ));
        }

        let __t0 = std::time::Instant::now();
        let mut grad = grad_m_j(bank, samples, terms, hyper, dim) / hyper.lambda2;
        for r in 0..dim {
            let scale = 2.0 * d_diag[r];
            for c in 0..dim {
                grad[(r, c)] += scale * fmap.matrix()[(r, c)];
            }
        }
        let __t1 = std::time::Instant::now();
        scratch.fill_metric_direction(&grad, bank, samples);
        let __t2 = std::time::Instant::now();
        // Tr((M - sG)^T D (M - sG)) expands to t0 - 2 s t1 + s^2 t2
        let mut t1 = 0.0;
        let mut t2 = 0.0;
        for r in 0..dim {
            t1 += d_diag[r] * grad.row(r).dot(&fmap.matrix().row(r));
            t2 += d_diag[r] * grad.row(r).norm_squared();
        }

        let mut s = step;
        let mut accepted = false;
        for _ in 0..=M_MAX_HALVINGS {
            let cterms = compute_terms_tables(base, Some((scratch, -s)), samples, hyper);
            let g1 = t0 - 2.0 * s * t1 + s * s * t2 + cterms.j_total(hyper) / hyper.lambda2;
            if g1.is_finite() && g1 <= g0 {
                *fmap = MetricMap::from_matrix(fmap.matrix() - s * &grad)?;
                base.accumulate(-s, scratch, samples);
                *terms = cterms;
                accepted = true;
                changed = true;
                break;
            }
            s *= 0.5;
        }
        if std::env::var("KPTRACK_TIMING").is_ok() {
            eprintln!("    inner: grad={:?} fill={:?} rest={:?}", __t1-__t0, __t2-__t1, __t2.elapsed());
        }
        if !accepted {
            break;
        }
    }
    Ok(changed)
}

/// Standalone metric step: builds the score tables for (`fmap`, `bank`),
/// runs `m_step_tables`, and returns the updated map.
pub fn solve_m_step_impl(
    fmap: &MetricMap,
    samples: &[TrainingSample],
    bank: &ModelBank,
    hyper: &HyperParams,
    inner_iters: usize,
    step: f64,
) -> Result<MetricMap> {
    let mut base = ScoreTables::new(samples, hyper);
    let mut scratch = ScoreTables::new(samples, hyper);
    let ctx = ScoreCtx::for_tables(fmap, samples, &base);
    base.fill_base(&ctx, bank, samples);
    let mut terms = compute_terms_tables(&base, None, samples, hyper);
    let mut m = fmap.clone();
    m_step_tables(
        &mut m,
        samples,
        bank,
        hyper,
        inner_iters,
        step,
        &mut base,
        &mut scratch,
        &mut terms,
    )?;
    Ok(m)
}
