//! Run configuration for the command-line tool: a single TOML file whose
//! fields all have defaults, overridable by command-line flags (flags win).
//! The effective configuration is echoed to the run's output directory so a
//! run can be reproduced from its artifacts alone.

use std::path::Path;

use clap::Args;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optimizer::HyperParams;
use crate::synth::SynthSpec;
use crate::tracker::{TrackerConfig, Variant};

/// The on-disk configuration. Absent fields take the documented defaults, so
/// an empty file is valid and the echoed file parses back to the same run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub tracker: TrackerSection,
    pub synth: SynthSection,
    pub output: OutputSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackerSection {
    /// One of ssvm, sml, smt, smm.
    pub variant: String,
    pub k_tasks: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub nu1: f64,
    pub nu2: f64,
    pub tau: f64,
    pub fast_threshold: i32,
    pub max_keypoints: usize,
    pub top_n: usize,
    pub ransac_iters: usize,
    pub seed: u64,
    pub learn_enabled: bool,
    pub learn_stride: u64,
    pub n_neg: usize,
    pub max_outer: usize,
    pub inner_m_iters: usize,
    pub m_step_size: f64,
}

impl Default for TrackerSection {
    fn default() -> Self {
        let c = TrackerConfig::default();
        Self {
            variant: c.variant.name().to_string(),
            k_tasks: c.hyper.k_tasks,
            lambda1: c.hyper.lambda1,
            lambda2: c.hyper.lambda2,
            nu1: c.hyper.nu1,
            nu2: c.hyper.nu2,
            tau: c.hyper.tau,
            fast_threshold: c.fast_threshold,
            max_keypoints: c.max_keypoints,
            top_n: c.top_n,
            ransac_iters: c.ransac_iters,
            seed: c.seed,
            learn_enabled: c.learn_enabled,
            learn_stride: c.learn_stride,
            n_neg: c.n_neg,
            max_outer: c.max_outer,
            inner_m_iters: c.inner_m_iters,
            m_step_size: c.m_step_size,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub length: usize,
    pub frame_width: usize,
    pub frame_height: usize,
    pub rotation_deg: f64,
    pub log_scale: f64,
    pub translation_px: f64,
    pub skew: f64,
    pub gain_lo: f64,
    pub gain_hi: f64,
    pub noise_sigma: f64,
    pub blur_radius: usize,
    pub clutter_count: usize,
    pub seed: u64,
}

impl Default for SynthSection {
    fn default() -> Self {
        let s = SynthSpec::default();
        Self {
            length: s.length,
            frame_width: s.frame_width,
            frame_height: s.frame_height,
            rotation_deg: s.rotation_deg,
            log_scale: s.log_scale,
            translation_px: s.translation_px,
            skew: s.skew,
            gain_lo: s.gain.0,
            gain_hi: s.gain.1,
            noise_sigma: s.noise_sigma,
            blur_radius: s.blur_radius,
            clutter_count: s.clutter_count,
            seed: s.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    /// Write 0.000 in the wall-clock column so repeated runs are
    /// byte-identical.
    pub fixed_timing: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            fixed_timing: false,
        }
    }
}

/// Tracker flag overrides shared by the track and ablate subcommands.
#[derive(Clone, Debug, Default, Args)]
pub struct TrackerFlags {
    /// Model variant: ssvm, sml, smt or smm
    #[arg(long)]
    pub variant: Option<String>,
    /// Number of multi-task models
    #[arg(long)]
    pub k_tasks: Option<usize>,
    /// Multi-task coupling weight
    #[arg(long)]
    pub lambda1: Option<f64>,
    /// Metric regularization weight
    #[arg(long)]
    pub lambda2: Option<f64>,
    /// Structured hinge weight
    #[arg(long)]
    pub nu1: Option<f64>,
    /// Metric hinge weight
    #[arg(long)]
    pub nu2: Option<f64>,
    /// Inlier reprojection threshold, pixels
    #[arg(long)]
    pub tau: Option<f64>,
    /// Corner detector intensity threshold
    #[arg(long)]
    pub fast_threshold: Option<i32>,
    /// Keypoint budget per frame
    #[arg(long)]
    pub max_keypoints: Option<usize>,
    /// Candidate matches kept per template keypoint
    #[arg(long)]
    pub top_n: Option<usize>,
    /// Hypothesis sampling iterations
    #[arg(long)]
    pub ransac_iters: Option<usize>,
    /// Random seed
    #[arg(long)]
    pub seed: Option<u64>,
    /// Disable online learning
    #[arg(long)]
    pub no_learn: bool,
    /// Learn every N-th frame
    #[arg(long)]
    pub learn_stride: Option<u64>,
    /// Hard negatives mined per correspondence
    #[arg(long)]
    pub n_neg: Option<usize>,
    /// Outer optimization iterations per frame
    #[arg(long)]
    pub max_outer: Option<usize>,
    /// Metric descent iterations per outer iteration
    #[arg(long)]
    pub inner_m_iters: Option<usize>,
    /// Initial metric descent step size
    #[arg(long)]
    pub m_step_size: Option<f64>,
}

/// Synthetic sequence flag overrides.
#[derive(Clone, Debug, Default, Args)]
pub struct SynthFlags {
    /// Number of frames
    #[arg(long)]
    pub length: Option<usize>,
    #[arg(long)]
    pub frame_width: Option<usize>,
    #[arg(long)]
    pub frame_height: Option<usize>,
    /// Rotation amplitude, degrees
    #[arg(long)]
    pub rotation_deg: Option<f64>,
    /// Log-scale amplitude
    #[arg(long)]
    pub log_scale: Option<f64>,
    /// Translation amplitude, pixels
    #[arg(long)]
    pub translation_px: Option<f64>,
    /// Perspective-row amplitude
    #[arg(long)]
    pub skew: Option<f64>,
    /// Lower illumination gain bound
    #[arg(long)]
    pub gain_lo: Option<f64>,
    /// Upper illumination gain bound
    #[arg(long)]
    pub gain_hi: Option<f64>,
    /// Additive Gaussian noise sigma
    #[arg(long)]
    pub noise_sigma: Option<f64>,
    /// Box blur radius, pixels
    #[arg(long)]
    pub blur_radius: Option<usize>,
    /// Distractor squares per frame
    #[arg(long)]
    pub clutter_count: Option<usize>,
    /// Random seed for the sequence
    #[arg(long)]
    pub seed: Option<u64>,
}

impl RunConfig {
    /// Load from TOML, or the all-defaults configuration when no path given.
    pub fn load(path: Option<&Path>) -> Result<RunConfig> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)?;
                toml::from_str(&text)
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))
            }
        }
    }

    pub fn apply_tracker_flags(&mut self, f: &TrackerFlags) {
        let t = &mut self.tracker;
        macro_rules! set {
            ($($field:ident),*) => {
                $(if let Some(v) = &f.$field { t.$field = v.clone(); })*
            };
        }
        set!(
            variant, k_tasks, lambda1, lambda2, nu1, nu2, tau, fast_threshold,
            max_keypoints, top_n, ransac_iters, seed, learn_stride, n_neg,
            max_outer, inner_m_iters, m_step_size
        );
        if f.no_learn {
            t.learn_enabled = false;
        }
    }

    pub fn apply_synth_flags(&mut self, f: &SynthFlags) {
        let s = &mut self.synth;
        macro_rules! set {
            ($($field:ident),*) => {
                $(if let Some(v) = f.$field { s.$field = v; })*
            };
        }
        set!(
            length, frame_width, frame_height, rotation_deg, log_scale,
            translation_px, skew, gain_lo, gain_hi, noise_sigma, blur_radius,
            clutter_count, seed
        );
    }

    pub fn tracker_config(&self) -> Result<TrackerConfig> {
        let t = &self.tracker;
        let cfg = TrackerConfig {
            hyper: HyperParams {
                lambda1: t.lambda1,
                lambda2: t.lambda2,
                nu1: t.nu1,
                nu2: t.nu2,
                tau: t.tau,
                k_tasks: t.k_tasks,
            },
            fast_threshold: t.fast_threshold,
            max_keypoints: t.max_keypoints,
            top_n: t.top_n,
            ransac_iters: t.ransac_iters,
            seed: t.seed,
            learn_enabled: t.learn_enabled,
            learn_stride: t.learn_stride,
            variant: t.variant.parse::<Variant>()?,
            n_neg: t.n_neg,
            max_outer: t.max_outer,
            inner_m_iters: t.inner_m_iters,
            m_step_size: t.m_step_size,
        };
        cfg.effective()
    }

    pub fn synth_spec(&self) -> Result<SynthSpec> {
        let s = &self.synth;
        let spec = SynthSpec {
            length: s.length,
            frame_width: s.frame_width,
            frame_height: s.frame_height,
            rotation_deg: s.rotation_deg,
            log_scale: s.log_scale,
            translation_px: s.translation_px,
            skew: s.skew,
            gain: (s.gain_lo, s.gain_hi),
            noise_sigma: s.noise_sigma,
            blur_radius: s.blur_radius,
            clutter_count: s.clutter_count,
            seed: s.seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Write the effective configuration next to a run's outputs.
    pub fn echo(&self, out_dir: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("config serialization: {e}")))?;
        std::fs::write(out_dir.join("config.toml"), text)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_equals_defaults() {
        let parsed: RunConfig = toml::from_str("").unwrap();
        assert_eq!(parsed, RunConfig::default());
        assert_eq!(
            parsed.tracker_config().unwrap(),
            TrackerConfig::default().effective().unwrap()
        );
        assert_eq!(parsed.synth_spec().unwrap(), SynthSpec::default());
    }

    #[test]
    fn echo_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.tracker.seed = 7;
        cfg.tracker.variant = "sml".into();
        cfg.synth.rotation_deg = 45.0;
        cfg.output.fixed_timing = true;
        let dir = tempfile::tempdir().unwrap();
        cfg.echo(dir.path()).unwrap();
        let reparsed =
            RunConfig::load(Some(&dir.path().join("config.toml"))).unwrap();
        assert_eq!(reparsed, cfg);
    }

    #[test]
    fn flags_override_file_values() {
        let mut cfg: RunConfig =
            toml::from_str("[tracker]\nseed = 3\nlambda1 = 2.0\n").unwrap();
        let flags = TrackerFlags {
            seed: Some(9),
            no_learn: true,
            ..Default::default()
        };
        cfg.apply_tracker_flags(&flags);
        assert_eq!(cfg.tracker.seed, 9);
        assert_eq!(cfg.tracker.lambda1, 2.0);
        assert!(!cfg.tracker.learn_enabled);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("[tracker]\nbogus = 1\n").is_err());
        assert!(RunConfig::load(Some(Path::new("/nonexistent/cfg.toml"))).is_err());
    }

    #[test]
    fn invalid_values_fail_validation() {
        let mut cfg = RunConfig::default();
        cfg.tracker.variant = "wild".into();
        assert!(cfg.tracker_config().is_err());
        let mut cfg = RunConfig::default();
        cfg.synth.gain_lo = 2.0;
        cfg.synth.gain_hi = 1.0;
        assert!(cfg.synth_spec().is_err());
    }
}
