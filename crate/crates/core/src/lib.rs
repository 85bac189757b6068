//! Negative-prompt diffusion dynamics on a toy scene world.
//!
//! The analytic backend computes the exact noise prediction of a Gaussian
//! mixture over rendered scenes, so every sampler and diagnostic result can be
//! checked against closed-form oracles. A small cross-attention network shares
//! the same interfaces for attention-map experiments.

pub mod backend;
pub mod container;
pub mod diagnostics;
pub mod error;
pub mod eval;
pub mod image;
pub mod inpaint;
pub mod rng;
pub mod sampler;
pub mod scene;
pub mod schedule;

pub use backend::{
    AnalyticBackend, ArchitectureManifest, AttentionLayer, AttentionStack, NeuralDenoiser,
    NoisePrediction, NoisePredictor, Prompt, PromptKind,
};
pub use container::{Tensor, TensorContainer};
pub use diagnostics::{DiagnosticCurve, TokenMap};
pub use error::{Error, Result};
pub use eval::{Closer, ImageTriple, MetricsReport, PresenceJudge, TrialVerdict, Verdict};
pub use inpaint::{RemovalTask, DEFAULT_WINDOW};
pub use sampler::{guide, replay_slot, sample, GuidanceConfig, SamplerKind, StepRecord, Trajectory, Window};
pub use scene::{build_world, SceneComponent, SceneWorld, Vocabulary, WorldSpec};
pub use schedule::{build_schedule, forward_noise, NoiseSchedule, ScheduleConfig, ScheduleKind};
