//! Shared fixtures for the criterion benches.

use negdyn::{build_world, AnalyticBackend, NoiseSchedule, ScheduleConfig, WorldSpec};

pub fn lab_backend() -> AnalyticBackend {
    AnalyticBackend::new(build_world(&WorldSpec::lab(), 0).expect("lab world is valid"))
}

pub fn default_schedule() -> NoiseSchedule {
    ScheduleConfig::latent_diffusion(30)
        .build()
        .expect("default schedule is valid")
}
