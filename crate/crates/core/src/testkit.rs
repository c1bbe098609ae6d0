//! Deterministic synthetic instances for tests and benchmarks: random
//! templates, warped frames with clutter, and fully populated training
//! windows. Not part of the tracking pipeline.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Matrix3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::features::{Descriptor, Keypoint, DESCRIPTOR_BITS};
use crate::geometry::{ransac_hypotheses, Homography};
use crate::metric::MetricMap;
use crate::model::{predict, score_correspondences, ModelBank};
use crate::optimizer::{HyperParams, TrainingSample, TrainingWindow};

pub fn random_descriptor(rng: &mut ChaCha8Rng) -> Descriptor {
    Descriptor::from_words([rng.gen(), rng.gen(), rng.gen(), rng.gen()])
}

/// Copy of `base` with `flips` random bits toggled.
pub fn perturbed_descriptor(rng: &mut ChaCha8Rng, base: &Descriptor, flips: usize) -> Descriptor {
    let mut d = base.clone();
    for _ in 0..flips {
        let b = rng.gen_range(0..DESCRIPTOR_BITS);
        d.set_bit(b, !d.bit(b));
    }
    d
}

/// Well-conditioned perturbation of the identity transform.
pub fn mild_homography(rng: &mut ChaCha8Rng) -> Homography {
    Homography::from_matrix(Matrix3::new(
        1.0 + rng.gen_range(-0.1..0.1),
        rng.gen_range(-0.1..0.1),
        rng.gen_range(-8.0..8.0),
        rng.gen_range(-0.1..0.1),
        1.0 + rng.gen_range(-0.1..0.1),
        rng.gen_range(-8.0..8.0),
        rng.gen_range(-1e-4..1e-4),
        rng.gen_range(-1e-4..1e-4),
        1.0,
    ))
}

/// Identity plus a uniform perturbation of each entry.
pub fn perturbed_metric(dim: usize, seed: u64, scale: f64) -> MetricMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = DMatrix::from_fn(dim, dim, |r, c| {
        let base = if r == c { 1.0 } else { 0.0 };
        base + rng.gen_range(-scale..scale)
    });
    MetricMap::from_matrix(m).unwrap()
}

#[derive(Clone, Copy, Debug)]
pub struct WindowSpec {
    pub n_template: usize,
    pub n_clutter: usize,
    pub n_samples: usize,
    pub top_n: usize,
    pub n_neg: usize,
    pub descriptor_flips: usize,
    pub ransac_iters: usize,
    /// Scale applied to the template-initialized task stacks; small values
    /// shrink score margins so hinge terms activate.
    pub weight_scale: f64,
    /// Scale of random noise added to each task stack.
    pub task_noise: f64,
    /// Scale of the metric's off-identity perturbation.
    pub metric_noise: f64,
}

impl Default for WindowSpec {
    fn default() -> Self {
        Self {
            n_template: 8,
            n_clutter: 6,
            n_samples: 3,
            top_n: 2,
            n_neg: 5,
            descriptor_flips: 12,
            ransac_iters: 25,
            weight_scale: 0.1,
            task_noise: 0.01,
            metric_noise: 0.05,
        }
    }
}

pub struct TestInstance {
    pub template: Arc<Vec<Keypoint>>,
    pub bank: ModelBank,
    pub fmap: MetricMap,
    pub window: TrainingWindow,
}

/// A populated training window: each sample is the template warped by a mild
/// transform with positional jitter and descriptor noise, plus clutter, run
/// through scoring, hypothesis generation and prediction.
pub fn build_window(seed: u64, spec: &WindowSpec, hyper: &HyperParams) -> TestInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let template: Arc<Vec<Keypoint>> = Arc::new(
        (0..spec.n_template)
            .map(|_| Keypoint {
                x: rng.gen_range(20.0..80.0),
                y: rng.gen_range(20.0..80.0),
                score: 0,
                descriptor: Some(random_descriptor(&mut rng)),
            })
            .collect(),
    );

    let mut bank = ModelBank::from_template(hyper.k_tasks, &template);
    for k in 0..hyper.k_tasks {
        let noise = DVector::from_fn(bank.stack_len(), |_, _| {
            rng.gen_range(-spec.task_noise..spec.task_noise)
        });
        let w_new = spec.weight_scale * bank.w(k) + noise;
        bank.set_task(k, w_new);
    }
    let fmap = if spec.metric_noise > 0.0 {
        perturbed_metric(DESCRIPTOR_BITS, seed ^ 0x9e3779b9, spec.metric_noise)
    } else {
        MetricMap::identity(DESCRIPTOR_BITS)
    };

    let mut window = TrainingWindow::new();
    for s in 0..spec.n_samples {
        let h_true = mild_homography(&mut rng);
        let mut frame: Vec<Keypoint> = template
            .iter()
            .map(|t| {
                let (px, py) = h_true.apply((t.x, t.y)).unwrap();
                Keypoint {
                    x: px + rng.gen_range(-1.0..1.0),
                    y: py + rng.gen_range(-1.0..1.0),
                    score: 0,
                    descriptor: Some(perturbed_descriptor(
                        &mut rng,
                        t.descriptor(),
                        spec.descriptor_flips,
                    )),
                }
            })
            .collect();
        for _ in 0..spec.n_clutter {
            frame.push(Keypoint {
                x: rng.gen_range(0.0..100.0),
                y: rng.gen_range(0.0..100.0),
                score: 0,
                descriptor: Some(random_descriptor(&mut rng)),
            });
        }

        let corr =
            score_correspondences(&template, frame, bank.w_last(), &fmap, spec.top_n).unwrap();
        let hyps = ransac_hypotheses(&corr, spec.ransac_iters, hyper.tau, seed.wrapping_add(s as u64));
        let y = predict(&bank, &corr, &hyps, hyper.tau, &fmap)
            .map(|(h, _)| h)
            .unwrap_or(h_true);
        let sample = TrainingSample::new(
            corr,
            y,
            hyps,
            bank.w_last(),
            &fmap,
            hyper.tau,
            spec.n_neg,
        );
        window.push(sample, hyper.k_tasks);
    }

    TestInstance {
        template,
        bank,
        fmap,
        window,
    }
}
