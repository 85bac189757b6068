//! Guided reverse diffusion with a windowed negative prompt.
//!
//! Sampling steps are counted from 0: step `i` denoises from `t = T − i` to
//! `T − i − 1`, so step 0 is the noisiest. Windows, critical steps and every
//! curve use this index.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backend::{AttentionStack, NoisePredictor, Prompt};
use crate::container::{Tensor, TensorContainer};
use crate::error::{Error, Result};
use crate::rng::{self, Role};
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    #[default]
    Ddim,
    Ddpm,
}

/// Half-open interval `[start, end)` of sampling steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "[usize; 2]", into = "[usize; 2]")]
pub struct Window {
    pub start: usize,
    pub end: usize,
}

impl Window {
    pub const EMPTY: Window = Window { start: 0, end: 0 };

    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn all(steps: usize) -> Self {
        Self { start: 0, end: steps }
    }

    pub fn contains(&self, step: usize) -> bool {
        (self.start..self.end).contains(&step)
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self, steps: usize) -> Result<()> {
        if self.start > self.end || self.end > steps {
            return Err(Error::Guidance(format!(
                "window [{}, {}) outside [0, {steps}]",
                self.start, self.end
            )));
        }
        Ok(())
    }
}

impl From<[usize; 2]> for Window {
    fn from(v: [usize; 2]) -> Self {
        Self::new(v[0], v[1])
    }
}

impl From<Window> for [usize; 2] {
    fn from(w: Window) -> Self {
        [w.start, w.end]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub w: f64,
    pub positive: Prompt,
    pub negative: Prompt,
    pub window: Window,
    #[serde(default)]
    pub sampler: SamplerKind,
}

impl GuidanceConfig {
    /// Plain classifier-free guidance: `∅` in the slot at every step.
    pub fn unconditional_slot(positive: Prompt, w: f64) -> Self {
        Self {
            w,
            positive,
            negative: Prompt::empty(),
            window: Window::EMPTY,
            sampler: SamplerKind::Ddim,
        }
    }

    pub fn with_negative(mut self, negative: Prompt, window: Window) -> Self {
        self.negative = negative;
        self.window = window;
        self
    }

    pub fn validate(&self, steps: usize) -> Result<()> {
        if !(self.w >= 0.0 && self.w.is_finite()) {
            return Err(Error::Guidance(format!("guidance weight {} must be finite and ≥ 0", self.w)));
        }
        self.window.validate(steps)
    }

    /// Prompt occupying the guidance slot at sampling step `i`.
    pub fn slot_prompt(&self, step: usize) -> (&Prompt, bool) {
        if self.window.contains(step) && !self.negative.is_empty() {
            (&self.negative, true)
        } else {
            (self.empty_prompt_ref(), false)
        }
    }

    fn empty_prompt_ref(&self) -> &'static Prompt {
        static EMPTY: std::sync::OnceLock<Prompt> = std::sync::OnceLock::new();
        EMPTY.get_or_init(Prompt::empty)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    /// 0-based sampling step.
    pub step: usize,
    /// Diffusion time of `x_before` (1-based).
    pub t: usize,
    pub x_before: Vec<f64>,
    pub x_after: Vec<f64>,
    pub eps_pos: Vec<f64>,
    pub eps_slot: Vec<f64>,
    pub eps_combined: Vec<f64>,
    pub attn_pos: AttentionStack,
    pub attn_slot: AttentionStack,
    pub slot_is_negative: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub records: Vec<StepRecord>,
    pub seed: u64,
    pub config: GuidanceConfig,
    pub final_image: Vec<f64>,
    pub height: usize,
    pub width: usize,
    pub backend: String,
}

/// `(1 + w)·ε_pos − w·ε_slot`.
pub fn guide(eps_pos: &[f64], eps_slot: &[f64], w: f64) -> Result<Vec<f64>> {
    if eps_pos.len() != eps_slot.len() {
        return Err(Error::ShapeMismatch {
            expected: eps_pos.len(),
            actual: eps_slot.len(),
        });
    }
    Ok(eps_pos
        .iter()
        .zip(eps_slot)
        .map(|(p, s)| (1.0 + w) * p - w * s)
        .collect())
}

/// Deterministic DDIM update from `t` to `t − 1`.
pub fn ddim_step(schedule: &NoiseSchedule, x: &[f64], eps: &[f64], t: usize) -> Result<Vec<f64>> {
    let ab = schedule.alpha_bar(t)?;
    let ab_prev = schedule.alpha_bar_prev(t)?;
    Ok(x.iter()
        .zip(eps)
        .map(|(x, e)| {
            let x0 = (x - (1.0 - ab).sqrt() * e) / ab.sqrt();
            ab_prev.sqrt() * x0 + (1.0 - ab_prev).sqrt() * e
        })
        .collect())
}

/// Ancestral update with variance β_t; no noise is added at `t = 1`.
pub fn ddpm_step(schedule: &NoiseSchedule, x: &[f64], eps: &[f64], t: usize, z: &[f64]) -> Result<Vec<f64>> {
    let beta = schedule.beta(t)?;
    let ab = schedule.alpha_bar(t)?;
    let coef = beta / (1.0 - ab).sqrt();
    let inv_sqrt_alpha = 1.0 / (1.0 - beta).sqrt();
    let sd = if t > 1 { beta.sqrt() } else { 0.0 };
    Ok(x.iter()
        .zip(eps)
        .zip(z)
        .map(|((x, e), z)| inv_sqrt_alpha * (x - coef * e) + sd * z)
        .collect())
}

fn ensure_finite(v: &[f64], step: usize, what: &str) -> Result<()> {
    match v.iter().position(|x| !x.is_finite()) {
        None => Ok(()),
        Some(i) => Err(Error::NonFinite {
            step,
            what: format!("{what}[{i}] = {}", v[i]),
        }),
    }
}

/// Runs the guided sampler from `x_T ~ N(0, I)` and records every step.
pub fn sample(
    backend: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    config: &GuidanceConfig,
    seed: u64,
) -> Result<Trajectory> {
    run(backend, schedule, config, seed, true)
}

/// Same trajectory as [`sample`], keeping only the final image.
pub fn sample_final(
    backend: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    config: &GuidanceConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    run(backend, schedule, config, seed, false).map(|t| t.final_image)
}

fn run(
    backend: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    config: &GuidanceConfig,
    seed: u64,
    record: bool,
) -> Result<Trajectory> {
    let steps = schedule.steps();
    config.validate(steps)?;
    backend.validate_prompt(&config.positive)?;
    if !config.window.is_empty() {
        backend.validate_prompt(&config.negative)?;
    }
    let (height, width) = backend.grid();
    let mut x = rng::gaussian(&mut rng::stream(seed, 0, Role::InitialNoise), height * width);
    let mut records = Vec::with_capacity(if record { steps } else { 0 });
    for step in 0..steps {
        let t = steps - step;
        let with_step = |e: Error| match e {
            Error::NonFinite { what, .. } => Error::NonFinite { step, what },
            other => Error::Step {
                step,
                source: Box::new(other),
            },
        };
        let pos = backend
            .predict(schedule, &x, &config.positive, t)
            .map_err(with_step)?;
        let (slot_prompt, slot_is_negative) = config.slot_prompt(step);
        let slot = backend.predict(schedule, &x, slot_prompt, t).map_err(with_step)?;
        let combined = guide(&pos.eps, &slot.eps, config.w)?;
        let next = match config.sampler {
            SamplerKind::Ddim => ddim_step(schedule, &x, &combined, t)?,
            SamplerKind::Ddpm => {
                let z = rng::gaussian(&mut rng::stream(seed, step as u64, Role::AncestralNoise), x.len());
                ddpm_step(schedule, &x, &combined, t, &z)?
            }
        };
        ensure_finite(&next, step, "state")?;
        if record {
            records.push(StepRecord {
                step,
                t,
                x_before: x,
                x_after: next.clone(),
                eps_pos: pos.eps,
                eps_slot: slot.eps,
                eps_combined: combined,
                attn_pos: pos.attention,
                attn_slot: slot.attention,
                slot_is_negative,
            });
        }
        x = next;
    }
    Ok(Trajectory {
        records,
        seed,
        config: config.clone(),
        final_image: x,
        height,
        width,
        backend: backend.fingerprint(),
    })
}

/// Evaluates `probe` at every recorded `x_before` without touching the run.
pub fn replay_slot(
    trajectory: &Trajectory,
    backend: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    probe: &Prompt,
) -> Result<Vec<crate::backend::NoisePrediction>> {
    if backend.fingerprint() != trajectory.backend {
        return Err(Error::Diagnostic(format!(
            "trajectory recorded with backend {} cannot be replayed on {}",
            trajectory.backend,
            backend.fingerprint()
        )));
    }
    if schedule.steps() != trajectory.records.len() {
        return Err(Error::Diagnostic(format!(
            "schedule has {} steps, trajectory {}",
            schedule.steps(),
            trajectory.records.len()
        )));
    }
    trajectory
        .records
        .iter()
        .map(|r| backend.predict(schedule, &r.x_before, probe, r.t))
        .collect()
}

/// Metadata written next to a trajectory dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryMeta {
    pub seed: u64,
    pub config: GuidanceConfig,
    pub backend: String,
    pub height: usize,
    pub width: usize,
    pub steps: Vec<StepMeta>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMeta {
    pub step: usize,
    pub t: usize,
    pub slot_is_negative: bool,
}

impl Trajectory {
    pub fn steps(&self) -> usize {
        self.records.len()
    }

    pub fn meta(&self) -> TrajectoryMeta {
        TrajectoryMeta {
            seed: self.seed,
            config: self.config.clone(),
            backend: self.backend.clone(),
            height: self.height,
            width: self.width,
            steps: self
                .records
                .iter()
                .map(|r| StepMeta {
                    step: r.step,
                    t: r.t,
                    slot_is_negative: r.slot_is_negative,
                })
                .collect(),
        }
    }

    /// Tensors `step{i}/{x_before,x_after,eps_pos,eps_slot,eps_combined}` and
    /// `final_image`, each `[H, W]`.
    pub fn to_container(&self) -> Result<TensorContainer> {
        let shape = vec![self.height, self.width];
        let mut c = TensorContainer::new();
        for r in &self.records {
            for (name, v) in [
                ("x_before", &r.x_before),
                ("x_after", &r.x_after),
                ("eps_pos", &r.eps_pos),
                ("eps_slot", &r.eps_slot),
                ("eps_combined", &r.eps_combined),
            ] {
                c.push(Tensor::from_f64(format!("step{}/{name}", r.step), shape.clone(), v)?)?;
            }
        }
        c.push(Tensor::from_f64("final_image", shape, &self.final_image)?)?;
        Ok(c)
    }

    pub fn dump(&self, tensors_path: &Path, meta_path: &Path) -> Result<()> {
        self.to_container()?.write_file(tensors_path)?;
        std::fs::write(meta_path, serde_json::to_vec_pretty(&self.meta())?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::AnalyticBackend;
    use crate::scene::{build_world, WorldSpec};
    use crate::schedule::ScheduleConfig;
    use proptest::prelude::*;

    fn setup() -> (AnalyticBackend, NoiseSchedule) {
        (
            AnalyticBackend::new(build_world(&WorldSpec::lab(), 0).unwrap()),
            ScheduleConfig::latent_diffusion(30).build().unwrap(),
        )
    }

    fn p(s: &str) -> Prompt {
        Prompt::parse(s).unwrap()
    }

    #[test]
    fn guide_identities() {
        assert_eq!(guide(&[1.0, 0.0], &[0.0, 1.0], 2.0).unwrap(), vec![3.0, -2.0]);
        assert_eq!(guide(&[0.3, -1.2], &[5.0, 5.0], 0.0).unwrap(), vec![0.3, -1.2]);
        assert!(guide(&[1.0], &[1.0, 2.0], 1.0).is_err());
    }

    proptest! {
        #[test]
        fn guide_cancels_equal_inputs(v in proptest::collection::vec(-10.0f64..10.0, 1..20), w in 0.0f64..20.0) {
            let g = guide(&v, &v, w).unwrap();
            for (a, b) in g.iter().zip(&v) {
                prop_assert!((a - b).abs() <= 1e-12 * (1.0 + w) * (1.0 + b.abs()));
            }
        }
    }

    #[test]
    fn ddim_recovers_x0_from_true_noise() {
        let (_, s) = setup();
        let x0: Vec<f64> = (0..16).map(|i| i as f64 / 16.0).collect();
        let eps: Vec<f64> = (0..16).map(|i| ((i * 5) % 7) as f64 - 3.0).collect();
        for t in [1, 9, 30] {
            let xt = crate::schedule::forward_noise(&s, &x0, t, &eps).unwrap();
            let ab_prev = s.alpha_bar_prev(t).unwrap();
            let expect: Vec<f64> = x0
                .iter()
                .zip(&eps)
                .map(|(x, e)| ab_prev.sqrt() * x + (1.0 - ab_prev).sqrt() * e)
                .collect();
            let next = ddim_step(&s, &xt, &eps, t).unwrap();
            for (a, b) in next.iter().zip(&expect) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        let last = ddim_step(&s, &crate::schedule::forward_noise(&s, &x0, 1, &eps).unwrap(), &eps, 1).unwrap();
        for (a, b) in last.iter().zip(&x0) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn records_are_consistent() {
        let (b, s) = setup();
        let cfg = GuidanceConfig::unconditional_slot(p("square circle"), 7.0)
            .with_negative(p("circle"), Window::new(5, 15));
        let traj = sample(&b, &s, &cfg, 3).unwrap();
        assert_eq!(traj.steps(), 30);
        assert_eq!(traj.final_image, traj.records[29].x_after);
        for r in &traj.records {
            assert_eq!(r.t, 30 - r.step);
            assert_eq!(r.slot_is_negative, (5..15).contains(&r.step));
            assert_eq!(guide(&r.eps_pos, &r.eps_slot, 7.0).unwrap(), r.eps_combined);
        }
        for pair in traj.records.windows(2) {
            assert_eq!(pair[0].x_after, pair[1].x_before);
        }
        assert_eq!(sample(&b, &s, &cfg, 3).unwrap(), traj);
        assert_eq!(sample_final(&b, &s, &cfg, 3).unwrap(), traj.final_image);
    }

    #[test]
    fn empty_window_equals_unconditional_run() {
        let (b, s) = setup();
        let base = GuidanceConfig::unconditional_slot(p("square"), 7.0);
        let windowed = base.clone().with_negative(p("circle"), Window::EMPTY);
        let a = sample(&b, &s, &base, 9).unwrap();
        let c = sample(&b, &s, &windowed, 9).unwrap();
        assert_eq!(a.records, c.records);
    }

    #[test]
    fn ddpm_is_seeded_and_shares_noise_across_windows() {
        let (b, s) = setup();
        let mut cfg = GuidanceConfig::unconditional_slot(p("square circle"), 3.0);
        cfg.sampler = SamplerKind::Ddpm;
        let a = sample(&b, &s, &cfg, 4).unwrap();
        assert_eq!(a, sample(&b, &s, &cfg, 4).unwrap());
        assert_ne!(a.final_image, sample(&b, &s, &cfg, 5).unwrap().final_image);
        let late = sample(&b, &s, &cfg.clone().with_negative(p("circle"), Window::new(20, 30)), 4).unwrap();
        assert_eq!(a.records[..20], late.records[..20]);
    }

    #[test]
    fn rejects_invalid_configs() {
        let (b, s) = setup();
        let mut cfg = GuidanceConfig::unconditional_slot(p("square"), -1.0);
        assert!(matches!(sample(&b, &s, &cfg, 0), Err(Error::Guidance(_))));
        cfg.w = 1.0;
        cfg.window = Window::new(10, 31);
        assert!(sample(&b, &s, &cfg, 0).is_err());
        cfg.window = Window::new(12, 10);
        assert!(sample(&b, &s, &cfg, 0).is_err());
        let cfg = GuidanceConfig::unconditional_slot(p("triangle"), 1.0);
        assert!(matches!(sample(&b, &s, &cfg, 0), Err(Error::UnknownToken(_))));
    }

    #[test]
    fn replay_recomputes_stored_noise() {
        let (b, s) = setup();
        let cfg = GuidanceConfig::unconditional_slot(p("square"), 7.0);
        let traj = sample(&b, &s, &cfg, 2).unwrap();
        let pos = replay_slot(&traj, &b, &s, &p("square")).unwrap();
        let empty = replay_slot(&traj, &b, &s, &Prompt::empty()).unwrap();
        let probe = replay_slot(&traj, &b, &s, &p("circle")).unwrap();
        for (i, r) in traj.records.iter().enumerate() {
            assert_eq!(pos[i].eps, r.eps_pos);
            assert_eq!(empty[i].eps, r.eps_slot);
            assert_eq!(probe[i].eps.len(), 256);
            assert!(probe[i].eps.iter().all(|v| v.is_finite()));
        }
        let other = AnalyticBackend::new(build_world(&WorldSpec::basic(), 0).unwrap());
        assert!(replay_slot(&traj, &other, &s, &p("square")).is_err());
    }

    #[test]
    fn dump_writes_named_tensors() {
        let (b, s) = setup();
        let traj = sample(&b, &s, &GuidanceConfig::unconditional_slot(p("circle"), 2.0), 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (t, m) = (dir.path().join("t.npdl"), dir.path().join("t.json"));
        traj.dump(&t, &m).unwrap();
        let c = TensorContainer::read_file(&t).unwrap();
        assert_eq!(c.len(), 30 * 5 + 1);
        assert_eq!(c.get("step29/eps_combined").unwrap().shape, vec![16, 16]);
        let meta: TrajectoryMeta = serde_json::from_slice(&std::fs::read(&m).unwrap()).unwrap();
        assert_eq!(meta.steps.len(), 30);
        assert_eq!(meta.config, traj.config);
    }
}
