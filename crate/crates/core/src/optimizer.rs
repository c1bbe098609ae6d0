//! Online joint solver: structured hinge terms, per-task subgradient steps,
//! common-model recovery and the alternating learn step.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::features::Descriptor;
use crate::geometry::{inlier_set, Homography, Hypothesis, InlierSet, HOMOGRAPHY_DEDUP_TOL};
use crate::metric::MetricMap;
use crate::model::{compatibility, CorrespondenceSet, ModelBank};
use crate::objective::{self, ScoreCtx, ViolationTerms};

pub const DEFAULT_N_NEG: usize = 10;

/// Weights of the joint objective with the derived step-size constants.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HyperParams {
    pub lambda1: f64,
    pub lambda2: f64,
    pub nu1: f64,
    pub nu2: f64,
    pub tau: f64,
    pub k_tasks: usize,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 1.0,
            nu1: 1.0,
            nu2: 1.0,
            tau: 5.0,
            k_tasks: 5,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        if self.lambda1 <= 0.0 || self.lambda2 <= 0.0 || self.nu1 <= 0.0 || self.nu2 <= 0.0 {
            return Err(Error::Config("all objective weights must be positive".into()));
        }
        if self.tau <= 0.0 {
            return Err(Error::Config("tau must be positive".into()));
        }
        if self.k_tasks == 0 {
            return Err(Error::Config("task count must be at least 1".into()));
        }
        Ok(())
    }

    pub fn rho1(&self) -> f64 {
        self.lambda1 / (self.lambda1 + 1.0)
    }

    pub fn rho2(&self) -> f64 {
        self.lambda1 * self.lambda1 / (self.lambda1 + 1.0)
    }

    /// Step size 1/(rho1 t + rho2 t); eta * (rho1 + rho2) * t = 1 exactly.
    pub fn eta(&self, t: usize) -> f64 {
        1.0 / (self.rho1() * t as f64 + self.rho2() * t as f64)
    }
}

/// One collected frame: correspondences, the predicted transform, and
/// everything geometry-only that learning re-reads (inliers per hypothesis,
/// losses, hard negatives).
#[derive(Clone, Debug)]
pub struct TrainingSample {
    pub corr: CorrespondenceSet,
    pub y: Homography,
    pub inliers: InlierSet,
    /// Hard-negative frame indices, aligned with `inliers.pairs`.
    pub negatives: Vec<Vec<usize>>,
    pub hyps: Vec<Hypothesis>,
    pub hyp_inliers: Vec<InlierSet>,
    pub deltas: Vec<usize>,
    /// Hypotheses Frobenius-close to y, excluded from the loss max.
    pub excluded: Vec<bool>,
}

impl TrainingSample {
    /// Build a sample at collection time; hard negatives are the `n_neg`
    /// highest-scoring non-matching frame descriptors per inlier slot under
    /// the current scoring model.
    pub fn new(
        corr: CorrespondenceSet,
        y: Homography,
        hyps: Vec<Hypothesis>,
        w_score: &DVector<f64>,
        fmap: &MetricMap,
        tau: f64,
        n_neg: usize,
    ) -> Self {
        let inliers = inlier_set(&corr, &y, tau);
        let d_f = fmap.dim();

        // mapped features of every frame descriptor, shared across slots
        let descs: Vec<&Descriptor> = corr.frame.iter().map(|kp| kp.descriptor()).collect();
        let mapped = fmap.map_descriptors(&descs);
        let negatives = inliers
            .pairs
            .iter()
            .map(|&(i, j)| {
                let w_i = w_score.rows(i * d_f, d_f);
                let mut scored: Vec<(usize, f64)> = (0..corr.frame.len())
                    .filter(|&j2| j2 != j)
                    .map(|j2| (j2, w_i.dot(&mapped.column(j2))))
                    .collect();
                let cmp = |a: &(usize, f64), b: &(usize, f64)| {
                    b.1.partial_cmp(&a.1)
                        .unwrap_or(std::cmp::Ordering::Equal)
                        .then(a.0.cmp(&b.0))
                };
                if n_neg == 0 {
                    scored.clear();
                } else if scored.len() > n_neg {
                    scored.select_nth_unstable_by(n_neg - 1, cmp);
                    scored.truncate(n_neg);
                }
                scored.sort_by(cmp);
                scored.into_iter().map(|(j2, _)| j2).collect()
            })
            .collect();

        let hyp_inliers: Vec<InlierSet> = hyps
            .iter()
            .map(|hyp| inlier_set(&corr, &hyp.h, tau))
            .collect();
        let deltas = hyp_inliers
            .iter()
            .map(|hi| inliers.len().abs_diff(hi.len()))
            .collect();
        let excluded = hyps
            .iter()
            .map(|hyp| hyp.h.frobenius_distance(&y) < HOMOGRAPHY_DEDUP_TOL)
            .collect();

        Self {
            corr,
            y,
            inliers,
            negatives,
            hyps,
            hyp_inliers,
            deltas,
            excluded,
        }
    }

    pub fn frame_descriptor(&self, j: usize) -> &Descriptor {
        self.corr.frame[j].descriptor()
    }
}

/// FIFO of the most recent predicted samples, at most K entries,
/// oldest first.
#[derive(Clone, Debug, Default)]
pub struct TrainingWindow {
    samples: Vec<TrainingSample>,
}

impl TrainingWindow {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, sample: TrainingSample, k_tasks: usize) {
        self.samples.push(sample);
        while self.samples.len() > k_tasks {
            self.samples.remove(0);
        }
    }

    pub fn samples(&self) -> &[TrainingSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Window indices consumed by task k (0-based): a suffix of the window,
/// longer for earlier tasks; the last task sees only the newest sample.
pub fn task_samples(k: usize, k_tasks: usize, window_len: usize) -> std::ops::Range<usize> {
    let count = (k_tasks - k).min(window_len);
    window_len - count..window_len
}

/// Structured hinge for one (task, sample):
/// [max_{y != y_t}(Delta(y_t, y) - dF(y))]_+ with the argmax hypothesis.
pub fn alpha_term(
    w_task: &DVector<f64>,
    sample: &TrainingSample,
    tau: f64,
    fmap: &MetricMap,
) -> (f64, Option<usize>) {
    let f_true = compatibility(w_task, &sample.corr, &sample.y, tau, fmap);
    let mut best: Option<(usize, f64)> = None;
    for (idx, hyp) in sample.hyps.iter().enumerate() {
        if sample.excluded[idx] {
            continue;
        }
        let f_h = compatibility(w_task, &sample.corr, &hyp.h, tau, fmap);
        let v = sample.deltas[idx] as f64 - (f_true - f_h);
        if best.map_or(true, |(_, bv)| v > bv) {
            best = Some((idx, v));
        }
    }
    match best {
        None => (0.0, None),
        Some((idx, v)) => (v.max(0.0), Some(idx)),
    }
}

/// Subgradient of J with respect to task k's stack, assembled from the
/// violated alpha and beta terms.
pub fn subgradient_w(
    k: usize,
    bank: &ModelBank,
    window: &TrainingWindow,
    terms: &ViolationTerms,
    fmap: &MetricMap,
    hyper: &HyperParams,
) -> DVector<f64> {
    let ctx = ScoreCtx::new(fmap, window.samples());
    objective::grad_w(k, bank, window.samples(), terms, &ctx, hyper)
}

/// One Eq-style task update:
/// w^k <- (1 - 1/t) w^k + eta rho2 w_bar - eta dJ/dw^k.
pub fn update_task(
    k: usize,
    bank: &mut ModelBank,
    grad: &DVector<f64>,
    w_bar: &DVector<f64>,
    t: usize,
    hyper: &HyperParams,
) -> Result<()> {
    if t == 0 {
        return Err(Error::InvalidInput("frame counter must be >= 1".into()));
    }
    let eta = hyper.eta(t);
    let tf = t as f64;
    let w_new = (1.0 - 1.0 / tf) * bank.w(k) + (eta * hyper.rho2()) * w_bar - eta * grad;
    bank.set_task(k, w_new);
    Ok(())
}

/// Recover the common model from the task stacks:
/// w0 = lambda1 sum_k w^k / (K (1 + lambda1)), then v^k = w^k - w0.
pub fn recover_common(bank: &mut ModelBank, hyper: &HyperParams) {
    let k = bank.k_tasks() as f64;
    let mut sum = DVector::zeros(bank.stack_len());
    for i in 0..bank.k_tasks() {
        sum += bank.w(i);
    }
    let w0 = sum * (hyper.lambda1 / (k * (1.0 + hyper.lambda1)));
    bank.set_decomposition(w0);
}

#[derive(Clone, Copy, Debug)]
pub struct LearnOpts {
    pub max_outer: usize,
    pub inner_m_iters: usize,
    pub m_step_size: f64,
    pub learn_metric: bool,
    /// When false the tasks update with their own stack in place of the
    /// cross-task mean (reference single-task behavior, used in tests).
    pub couple_tasks: bool,
}

impl Default for LearnOpts {
    fn default() -> Self {
        Self {
            max_outer: 10,
            inner_m_iters: 3,
            m_step_size: 1e-3,
            learn_metric: true,
            couple_tasks: true,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct LearnDiagnostics {
    pub outer_iters: usize,
    pub objective_start: f64,
    pub objective_end: f64,
    pub j_end: f64,
    pub alpha_count: usize,
    pub beta_count: usize,
    /// Per accepted outer iteration, the objective after it.
    pub objective_trace: Vec<f64>,
    pub skipped: bool,
}

const LEARN_REL_TOL: f64 = 1e-4;
const MAX_HALVINGS: usize = 10;

/// One alternating optimization pass at frame counter `t`: per-task
/// subgradient sweeps (with backtracking on the full objective), common
/// model recovery, then the metric M-step, until relative decrease of the
/// objective falls under 1e-4 or `max_outer` is reached.
pub fn learn_step(
    bank: &mut ModelBank,
    fmap: &mut MetricMap,
    window: &TrainingWindow,
    hyper: &HyperParams,
    t: usize,
    opts: &LearnOpts,
) -> Result<LearnDiagnostics> {
    if window.is_empty() {
        return Err(Error::InvalidInput("training window is empty".into()));
    }
    if t == 0 {
        return Err(Error::InvalidInput("frame counter must be >= 1".into()));
    }
    hyper.validate()?;

    recover_common(bank, hyper);
    let snapshot = (bank.clone(), fmap.clone());
    let samples = window.samples();

    let __tpre = std::time::Instant::now();
    let mut base = objective::ScoreTables::new(samples, hyper);
    let mut scratch = objective::ScoreTables::new(samples, hyper);
    let __tpre_tables = __tpre.elapsed();
    let mut ctx = ScoreCtx::for_tables(fmap, samples, &base);
    base.fill_base(&ctx, bank, samples);
    let mut terms = objective::compute_terms_tables(&base, None, samples, hyper);
    let mut obj_prev = objective::objective_full(bank, fmap, &terms, hyper);
    if std::env::var("KPTRACK_TIMING").is_ok() {
        eprintln!("  pre: tables={:?} rest={:?}", __tpre_tables, __tpre.elapsed() - __tpre_tables);
    }

    let mut diag = LearnDiagnostics {
        objective_start: obj_prev,
        alpha_count: terms.alpha_violations(),
        beta_count: terms.beta_violations(),
        ..Default::default()
    };
    if !obj_prev.is_finite() {
        *bank = snapshot.0;
        *fmap = snapshot.1;
        diag.skipped = true;
        return Ok(diag);
    }

    for _ in 0..opts.max_outer {
        let __ti = std::time::Instant::now();
        // the bank side of an outer rollback is rebuilt from old_w below
        let iter_fmap = fmap.clone();
        let __tsnap = __ti.elapsed();

        // ---- task sweep (synchronous w_bar) with backtracking ----
        let w_bar = bank.w_mean();
        let grads: Vec<DVector<f64>> = (0..bank.k_tasks())
            .map(|k| objective::grad_w(k, bank, samples, &terms, &ctx, hyper))
            .collect();
        let old_w: Vec<DVector<f64>> = (0..bank.k_tasks()).map(|k| bank.w(k).clone()).collect();
        let proposed: Vec<DVector<f64>> = (0..bank.k_tasks())
            .map(|k| {
                let eta = hyper.eta(t);
                let tf = t as f64;
                let reference = if opts.couple_tasks { &w_bar } else { &old_w[k] };
                (1.0 - 1.0 / tf) * &old_w[k] + (eta * hyper.rho2()) * reference - eta * &grads[k]
            })
            .collect();
        let __tg = std::time::Instant::now();
        for k in 0..bank.k_tasks() {
            scratch.fill_direction(k, &(&proposed[k] - &old_w[k]), &ctx, bank.d_f(), samples);
        }
        let __tfill = __tg.elapsed();
        let __ts = std::time::Instant::now();

        let mut scale = 1.0f64;
        let mut sweep_accepted = false;
        for _ in 0..=MAX_HALVINGS {
            for k in 0..bank.k_tasks() {
                let w_c = &old_w[k] + scale * (&proposed[k] - &old_w[k]);
                bank.set_task(k, w_c);
            }
            recover_common(bank, hyper);
            let cand_terms = objective::compute_terms_tables(&base, Some((&scratch, scale)), samples, hyper);
            let cand_obj = objective::objective_full(bank, fmap, &cand_terms, hyper);
            if cand_obj.is_finite() && cand_obj <= obj_prev {
                base.accumulate(scale, &scratch, samples);
                terms = cand_terms;
                sweep_accepted = true;
                break;
            }
            scale *= 0.5;
        }
        if !sweep_accepted {
            // restore the pre-sweep bank; base and terms still describe it
            for k in 0..bank.k_tasks() {
                bank.set_task(k, old_w[k].clone());
            }
            recover_common(bank, hyper);
        }

        let __tsearch = __ts.elapsed();
        let __tm = std::time::Instant::now();
        // ---- metric step (reuses the tables maintained by the sweep) ----
        if opts.learn_metric {
            match objective::m_step_tables(
                fmap,
                samples,
                bank,
                hyper,
                opts.inner_m_iters,
                opts.m_step_size,
                &mut base,
                &mut scratch,
                &mut terms,
            ) {
                Ok(changed) => {
                    if changed {
                        ctx = ScoreCtx::for_tables(fmap, samples, &base);
                    }
                }
                Err(_) => {
                    *bank = snapshot.0;
                    *fmap = snapshot.1;
                    diag.skipped = true;
                    return Ok(diag);
                }
            }
        }

        if std::env::var("KPTRACK_TIMING").is_ok() {
            eprintln!("  outer: total={:?} snap={:?} fill={:?} search={:?} mstep={:?}", __ti.elapsed(), __tsnap, __tfill, __tsearch, __tm.elapsed());
        }
        let obj_new = objective::objective_full(bank, fmap, &terms, hyper);
        if !obj_new.is_finite() {
            *bank = snapshot.0;
            *fmap = snapshot.1;
            diag.skipped = true;
            return Ok(diag);
        }
        if obj_new > obj_prev {
            // reject the whole outer iteration; rebuild state for the
            // restored models
            for k in 0..bank.k_tasks() {
                bank.set_task(k, old_w[k].clone());
            }
            recover_common(bank, hyper);
            *fmap = iter_fmap;
            ctx = ScoreCtx::for_tables(fmap, samples, &base);
            base.fill_base(&ctx, bank, samples);
            terms = objective::compute_terms_tables(&base, None, samples, hyper);
            break;
        }
        diag.outer_iters += 1;
        diag.objective_trace.push(obj_new);
        let rel = (obj_prev - obj_new) / obj_prev.abs().max(1.0);
        obj_prev = obj_new;
        if rel < LEARN_REL_TOL {
            break;
        }
    }

    diag.objective_end = objective::objective_full(bank, fmap, &terms, hyper);
    diag.j_end = terms.j_total(hyper);
    Ok(diag)
}
