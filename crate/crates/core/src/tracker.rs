//! The per-frame tracking pipeline: detect/describe, score, hypothesize,
//! predict, window maintenance and online learning, plus snapshot/restore.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::features::{
    describe_brief, detect_fast, BriefPattern, Descriptor, Keypoint, BORDER_MARGIN,
    DESCRIPTOR_BITS, DESCRIPTOR_WORDS,
};
use crate::geometry::{inlier_set, ransac_hypotheses, Homography, Hypothesis, InlierSet};
use crate::image::GrayImage;
use crate::metric::MetricMap;
use crate::model::{predict, score_correspondences, Candidate, CorrespondenceSet, ModelBank};
use crate::optimizer::{
    learn_step, HyperParams, LearnDiagnostics, LearnOpts, TrainingSample, TrainingWindow,
    DEFAULT_N_NEG,
};

/// Ablation variants gating the two learned components.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// Single-task structured SVM, identity feature map.
    Ssvm,
    /// Single task with metric learning.
    Sml,
    /// Multi-task, identity feature map.
    Smt,
    /// Full model: multi-task and metric learning.
    Smm,
}

impl Variant {
    pub fn learns_metric(self) -> bool {
        matches!(self, Variant::Sml | Variant::Smm)
    }

    pub fn multi_task(self) -> bool {
        matches!(self, Variant::Smt | Variant::Smm)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Ssvm => "ssvm",
            Variant::Sml => "sml",
            Variant::Smt => "smt",
            Variant::Smm => "smm",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ssvm" => Ok(Variant::Ssvm),
            "sml" => Ok(Variant::Sml),
            "smt" => Ok(Variant::Smt),
            "smm" => Ok(Variant::Smm),
            other => Err(Error::Config(format!("unknown variant '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrackerConfig {
    pub hyper: HyperParams,
    pub fast_threshold: i32,
    pub max_keypoints: usize,
    pub top_n: usize,
    pub ransac_iters: usize,
    pub seed: u64,
    pub learn_enabled: bool,
    /// Learn every `learn_stride` frames (1 = every frame).
    pub learn_stride: u64,
    pub variant: Variant,
    pub n_neg: usize,
    pub max_outer: usize,
    pub inner_m_iters: usize,
    pub m_step_size: f64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            hyper: HyperParams::default(),
            fast_threshold: 20,
            max_keypoints: 400,
            top_n: 1,
            ransac_iters: 100,
            seed: 0,
            learn_enabled: true,
            learn_stride: 1,
            variant: Variant::Smm,
            n_neg: DEFAULT_N_NEG,
            max_outer: 10,
            inner_m_iters: 3,
            m_step_size: 1e-3,
        }
    }
}

impl TrackerConfig {
    /// Apply variant gating (single-task variants force K = 1) and validate.
    pub fn effective(&self) -> Result<TrackerConfig> {
        let mut cfg = self.clone();
        if !cfg.variant.multi_task() {
            cfg.hyper.k_tasks = 1;
        }
        cfg.hyper.validate()?;
        if cfg.fast_threshold <= 0 {
            return Err(Error::Config("fast_threshold must be positive".into()));
        }
        if cfg.top_n == 0 || cfg.max_keypoints == 0 || cfg.ransac_iters == 0 {
            return Err(Error::Config(
                "top_n, max_keypoints and ransac_iters must be positive".into(),
            ));
        }
        if cfg.learn_stride == 0 {
            return Err(Error::Config("learn_stride must be at least 1".into()));
        }
        Ok(cfg)
    }

    fn learn_opts(&self) -> LearnOpts {
        LearnOpts {
            max_outer: self.max_outer,
            inner_m_iters: self.inner_m_iters,
            m_step_size: self.m_step_size,
            learn_metric: self.variant.learns_metric(),
            couple_tasks: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Outcome {
    Detected {
        y: Homography,
        inlier_count: usize,
        score: f64,
    },
    Lost,
}

impl Outcome {
    pub fn is_detected(&self) -> bool {
        matches!(self, Outcome::Detected { .. })
    }
}

#[derive(Clone, Debug)]
pub struct FrameResult {
    pub outcome: Outcome,
    pub n_keypoints: usize,
    pub learn: Option<LearnDiagnostics>,
}

const MIN_TEMPLATE_KEYPOINTS: usize = 8;
/// A hypothesis needs at least a minimal solver's worth of support.
const MIN_INLIERS: usize = 4;

#[derive(Clone, Debug)]
pub struct TrackerState {
    template: Arc<Vec<Keypoint>>,
    pattern: BriefPattern,
    bank: ModelBank,
    fmap: MetricMap,
    window: TrainingWindow,
    config: TrackerConfig,
    frame_counter: u64,
}

/// Detect corners and keep only the ones far enough from the border to
/// describe.
fn detect_and_describe(
    img: &GrayImage,
    pattern: &BriefPattern,
    threshold: i32,
    max_keypoints: usize,
) -> Result<Vec<Keypoint>> {
    let margin = BORDER_MARGIN as f64;
    let mut kps: Vec<Keypoint> = detect_fast(img, threshold, max_keypoints)?
        .into_iter()
        .filter(|kp| {
            kp.x >= margin
                && kp.y >= margin
                && kp.x <= (img.width() - 1) as f64 - margin
                && kp.y <= (img.height() - 1) as f64 - margin
        })
        .collect();
    describe_brief(img, &mut kps, pattern)?;
    Ok(kps)
}

impl TrackerState {
    /// Build tracker state from a template image.
    pub fn init(template_img: &GrayImage, config: &TrackerConfig) -> Result<TrackerState> {
        let config = config.effective()?;
        let pattern = BriefPattern::from_seed(config.seed);
        let kps = detect_and_describe(
            template_img,
            &pattern,
            config.fast_threshold,
            config.max_keypoints,
        )?;
        if kps.len() < MIN_TEMPLATE_KEYPOINTS {
            return Err(Error::TooFewKeypoints(kps.len()));
        }
        let bank = ModelBank::from_template(config.hyper.k_tasks, &kps);
        Ok(TrackerState {
            template: Arc::new(kps),
            pattern,
            bank,
            fmap: MetricMap::identity(DESCRIPTOR_BITS),
            window: TrainingWindow::new(),
            config,
            frame_counter: 0,
        })
    }

    pub fn template(&self) -> &Arc<Vec<Keypoint>> {
        &self.template
    }

    pub fn bank(&self) -> &ModelBank {
        &self.bank
    }

    pub fn fmap(&self) -> &MetricMap {
        &self.fmap
    }

    pub fn window(&self) -> &TrainingWindow {
        &self.window
    }

    pub fn config(&self) -> &TrackerConfig {
        &self.config
    }

    pub fn frame_counter(&self) -> u64 {
        self.frame_counter
    }

    fn frame_seed(&self) -> u64 {
        self.config
            .seed
            .wrapping_add(self.frame_counter.wrapping_mul(0x9E37_79B9_7F4A_7C15))
    }

    /// Run one frame through the pipeline. Lost frames leave the models and
    /// window untouched; the frame counter advances either way.
    pub fn process_frame(&mut self, frame: &GrayImage) -> Result<FrameResult> {
        let __timing = std::env::var_os("KPTRACK_TIMING").is_some();
        let __t0 = std::time::Instant::now();
        self.frame_counter += 1;
        let kps = detect_and_describe(
            frame,
            &self.pattern,
            self.config.fast_threshold,
            self.config.max_keypoints,
        )?;
        let n_keypoints = kps.len();
        let __t_detect = __t0.elapsed();
        let __t1 = std::time::Instant::now();
        let corr = score_correspondences(
            &self.template,
            kps,
            self.bank.w_last(),
            &self.fmap,
            self.config.top_n,
        )?;
        let __t_score = __t1.elapsed();
        let __t2 = std::time::Instant::now();
        let hyps = ransac_hypotheses(
            &corr,
            self.config.ransac_iters,
            self.config.hyper.tau,
            self.frame_seed(),
        );
        let well_supported = hyps.iter().any(|h| h.inlier_count >= MIN_INLIERS);
        if hyps.is_empty() || !well_supported {
            return Ok(FrameResult {
                outcome: Outcome::Lost,
                n_keypoints,
                learn: None,
            });
        }
        let (y, score) = predict(&self.bank, &corr, &hyps, self.config.hyper.tau, &self.fmap)
            .expect("non-empty hypothesis list");
        let inlier_count = inlier_set(&corr, &y, self.config.hyper.tau).len();

        let __t_hyp = __t2.elapsed();
        let __t3 = std::time::Instant::now();
        let sample = TrainingSample::new(
            corr,
            y.clone(),
            hyps,
            self.bank.w_last(),
            &self.fmap,
            self.config.hyper.tau,
            self.config.n_neg,
        );
        self.window.push(sample, self.config.hyper.k_tasks);
        let __t_sample = __t3.elapsed();
        let __t4 = std::time::Instant::now();

        let mut learn = None;
        if self.config.learn_enabled && self.frame_counter % self.config.learn_stride == 0 {
            learn = Some(learn_step(
                &mut self.bank,
                &mut self.fmap,
                &self.window,
                &self.config.hyper,
                self.frame_counter as usize,
                &self.config.learn_opts(),
            )?);
        }
        if __timing {
            eprintln!(
                "frame: detect={:?} score={:?} hyp={:?} sample={:?} learn={:?}",
                __t_detect,
                __t_score,
                __t_hyp,
                __t_sample,
                __t4.elapsed()
            );
        }
        Ok(FrameResult {
            outcome: Outcome::Detected {
                y,
                inlier_count,
                score,
            },
            n_keypoints,
            learn,
        })
    }

    /// Versioned, checksummed binary snapshot of the full mutable state.
    pub fn snapshot(&self) -> Vec<u8> {
        let mut p = Writer::default();
        p.u64(self.config.seed);
        p.u64(self.config.hyper.k_tasks as u64);
        write_keypoints(&mut p, &self.template);

        // task stacks; the decomposition is recomputed on restore
        p.vector(self.bank.w_common());
        for k in 0..self.bank.k_tasks() {
            p.vector(self.bank.w(k));
        }

        p.u64(self.fmap.dim() as u64);
        for r in 0..self.fmap.dim() {
            for c in 0..self.fmap.dim() {
                p.f64(self.fmap.matrix()[(r, c)]);
            }
        }
        p.f64(self.fmap.epsilon());

        p.u64(self.frame_counter);

        p.u64(self.window.len() as u64);
        for s in self.window.samples() {
            write_keypoints(&mut p, &s.corr.frame);
            p.u64(s.corr.candidates.len() as u64);
            for row in &s.corr.candidates {
                p.u64(row.len() as u64);
                for c in row {
                    p.u64(c.frame_idx as u64);
                    p.f64(c.score);
                }
            }
            write_homography(&mut p, &s.y);
            write_inliers(&mut p, &s.inliers);
            p.u64(s.negatives.len() as u64);
            for negs in &s.negatives {
                p.u64(negs.len() as u64);
                for &j in negs {
                    p.u64(j as u64);
                }
            }
            p.u64(s.hyps.len() as u64);
            for h in &s.hyps {
                write_homography(&mut p, &h.h);
                p.u64(h.inlier_count as u64);
            }
            for hi in &s.hyp_inliers {
                write_inliers(&mut p, hi);
            }
            for &d in &s.deltas {
                p.u64(d as u64);
            }
            for &e in &s.excluded {
                p.u64(e as u64);
            }
        }
        p.finish()
    }

    /// Rebuild a tracker from snapshot bytes; the config must match the one
    /// the snapshot was taken under.
    pub fn restore(bytes: &[u8], config: &TrackerConfig) -> Result<TrackerState> {
        let config = config.effective()?;
        let mut r = Reader::open(bytes)?;

        let seed = r.u64()?;
        if seed != config.seed {
            return Err(Error::Snapshot("seed does not match config".into()));
        }
        let k_tasks = r.u64()? as usize;
        if k_tasks != config.hyper.k_tasks {
            return Err(Error::Snapshot("task count does not match config".into()));
        }
        let template = Arc::new(read_keypoints(&mut r)?);
        let n_template = template.len();

        let stack_len = n_template * DESCRIPTOR_BITS;
        let w_common = r.vector(stack_len)?;
        let mut bank = ModelBank::zeros(k_tasks, n_template);
        for k in 0..k_tasks {
            bank.set_task(k, r.vector(stack_len)?);
        }
        bank.set_decomposition(w_common);

        let dim = r.u64()? as usize;
        if dim != DESCRIPTOR_BITS {
            return Err(Error::Snapshot(format!("unexpected metric dim {dim}")));
        }
        let mut m = DMatrix::zeros(dim, dim);
        for row in 0..dim {
            for c in 0..dim {
                m[(row, c)] = r.f64()?;
            }
        }
        let _epsilon = r.f64()?;
        let fmap = MetricMap::from_matrix(m)?;

        let frame_counter = r.u64()?;

        let n_samples = r.u64()? as usize;
        let mut window = TrainingWindow::new();
        for _ in 0..n_samples {
            let frame = read_keypoints(&mut r)?;
            let n_cand = r.u64()? as usize;
            if n_cand != n_template {
                return Err(Error::Snapshot("candidate row count mismatch".into()));
            }
            let mut candidates = Vec::with_capacity(n_cand);
            for _ in 0..n_cand {
                let n = r.u64()? as usize;
                let mut row = Vec::with_capacity(n);
                for _ in 0..n {
                    let frame_idx = r.u64()? as usize;
                    let score = r.f64()?;
                    row.push(Candidate { frame_idx, score });
                }
                candidates.push(row);
            }
            let corr = CorrespondenceSet {
                template: Arc::clone(&template),
                frame,
                candidates,
            };
            let y = read_homography(&mut r)?;
            let inliers = read_inliers(&mut r)?;
            let n_neg_rows = r.u64()? as usize;
            let mut negatives = Vec::with_capacity(n_neg_rows);
            for _ in 0..n_neg_rows {
                let n = r.u64()? as usize;
                let mut row = Vec::with_capacity(n);
                for _ in 0..n {
                    row.push(r.u64()? as usize);
                }
                negatives.push(row);
            }
            let n_hyps = r.u64()? as usize;
            let mut hyps = Vec::with_capacity(n_hyps);
            for _ in 0..n_hyps {
                let h = read_homography(&mut r)?;
                let inlier_count = r.u64()? as usize;
                hyps.push(Hypothesis { h, inlier_count });
            }
            let mut hyp_inliers = Vec::with_capacity(n_hyps);
            for _ in 0..n_hyps {
                hyp_inliers.push(read_inliers(&mut r)?);
            }
            let mut deltas = Vec::with_capacity(n_hyps);
            for _ in 0..n_hyps {
                deltas.push(r.u64()? as usize);
            }
            let mut excluded = Vec::with_capacity(n_hyps);
            for _ in 0..n_hyps {
                excluded.push(r.u64()? != 0);
            }
            window.push(
                TrainingSample {
                    corr,
                    y,
                    inliers,
                    negatives,
                    hyps,
                    hyp_inliers,
                    deltas,
                    excluded,
                },
                k_tasks,
            );
        }
        r.expect_end()?;

        Ok(TrackerState {
            template,
            pattern: BriefPattern::from_seed(config.seed),
            bank,
            fmap,
            window,
            config,
            frame_counter,
        })
    }
}

// ---- snapshot byte plumbing ----

const SNAP_MAGIC: &[u8; 4] = b"KPTS";
const SNAP_VERSION: u32 = 1;

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn i32(&mut self, v: i32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn vector(&mut self, v: &DVector<f64>) {
        for &x in v.iter() {
            self.f64(x);
        }
    }

    fn finish(self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.buf.len() + 16);
        out.extend_from_slice(SNAP_MAGIC);
        out.extend_from_slice(&SNAP_VERSION.to_le_bytes());
        out.extend_from_slice(&self.buf);
        out.extend_from_slice(&fnv1a(&self.buf).to_le_bytes());
        out
    }
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn open(bytes: &'a [u8]) -> Result<Reader<'a>> {
        if bytes.len() < 16 {
            return Err(Error::Snapshot("snapshot truncated".into()));
        }
        if &bytes[..4] != SNAP_MAGIC {
            return Err(Error::Snapshot("bad magic".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != SNAP_VERSION {
            return Err(Error::Snapshot(format!("unsupported version {version}")));
        }
        let payload = &bytes[8..bytes.len() - 8];
        let stored = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().unwrap());
        if fnv1a(payload) != stored {
            return Err(Error::Snapshot("checksum mismatch".into()));
        }
        Ok(Reader {
            data: payload,
            pos: 0,
        })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::Snapshot("snapshot truncated".into()));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn vector(&mut self, len: usize) -> Result<DVector<f64>> {
        let mut v = DVector::zeros(len);
        for i in 0..len {
            v[i] = self.f64()?;
        }
        Ok(v)
    }

    fn expect_end(&self) -> Result<()> {
        if self.pos != self.data.len() {
            return Err(Error::Snapshot("trailing bytes".into()));
        }
        Ok(())
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    h
}

fn write_keypoints(p: &mut Writer, kps: &[Keypoint]) {
    p.u64(kps.len() as u64);
    for kp in kps {
        p.f64(kp.x);
        p.f64(kp.y);
        p.i32(kp.score);
        for &w in kp.descriptor().words() {
            p.u64(w);
        }
    }
}

fn read_keypoints(r: &mut Reader) -> Result<Vec<Keypoint>> {
    let n = r.u64()? as usize;
    let mut kps = Vec::with_capacity(n);
    for _ in 0..n {
        let x = r.f64()?;
        let y = r.f64()?;
        let score = r.i32()?;
        let mut words = [0u64; DESCRIPTOR_WORDS];
        for w in &mut words {
            *w = r.u64()?;
        }
        kps.push(Keypoint {
            x,
            y,
            score,
            descriptor: Some(Descriptor::from_words(words)),
        });
    }
    Ok(kps)
}

fn write_homography(p: &mut Writer, h: &Homography) {
    for e in h.entries() {
        p.f64(e);
    }
}

fn read_homography(r: &mut Reader) -> Result<Homography> {
    let mut e = [0.0; 9];
    for v in &mut e {
        *v = r.f64()?;
    }
    Ok(Homography::from_entries(&e))
}

fn write_inliers(p: &mut Writer, s: &InlierSet) {
    p.f64(s.tau);
    p.u64(s.pairs.len() as u64);
    for &(i, j) in &s.pairs {
        p.u64(i as u64);
        p.u64(j as u64);
    }
}

fn read_inliers(r: &mut Reader) -> Result<InlierSet> {
    let tau = r.f64()?;
    let n = r.u64()? as usize;
    let mut pairs = Vec::with_capacity(n);
    for _ in 0..n {
        let i = r.u64()? as usize;
        let j = r.u64()? as usize;
        pairs.push((i, j));
    }
    Ok(InlierSet { pairs, tau })
}
