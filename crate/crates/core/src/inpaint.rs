//! Windowed negative-prompt removal and the search over window timing.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::{NoisePredictor, Prompt};
use crate::error::{Error, Result};
use crate::eval::{ImageTriple, PresenceJudge};
use crate::image::write_csv;
use crate::sampler::{self, GuidanceConfig, SamplerKind, Trajectory, Window};
use crate::schedule::NoiseSchedule;

/// Default removal window on a 30-step run.
pub const DEFAULT_WINDOW: Window = Window { start: 5, end: 15 };

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemovalTask {
    pub positive: Prompt,
    pub negative: Prompt,
    pub target_token: String,
    pub window: Window,
    pub seeds: Vec<u64>,
    pub w: f64,
    #[serde(default)]
    pub sampler: SamplerKind,
}

impl RemovalTask {
    pub fn validate(&self, backend: &dyn NoisePredictor, steps: usize) -> Result<()> {
        if !self.negative.tokens().contains(&self.target_token) {
            return Err(Error::Guidance(format!(
                "target {:?} is not in the negative prompt {}",
                self.target_token, self.negative
            )));
        }
        backend.validate_prompt(&self.positive)?;
        backend.validate_prompt(&self.negative)?;
        self.config(self.window).validate(steps)
    }

    pub fn config(&self, window: Window) -> GuidanceConfig {
        GuidanceConfig {
            w: self.w,
            positive: self.positive.clone(),
            negative: self.negative.clone(),
            window,
            sampler: self.sampler,
        }
    }
}

/// The three runs of one seed: no negative, negative at every step, and
/// negative inside the task window.
#[derive(Debug, Clone, PartialEq)]
pub struct RemovalOutcome {
    pub seed: u64,
    pub original: Trajectory,
    pub all_steps: Trajectory,
    pub windowed: Trajectory,
}

impl RemovalOutcome {
    pub fn images(&self) -> ImageTriple {
        ImageTriple {
            original: self.original.final_image.clone(),
            all_steps: self.all_steps.final_image.clone(),
            windowed: self.windowed.final_image.clone(),
        }
    }
}

/// Runs every seed in parallel. A failing seed yields its error without
/// affecting the others; results keep the order of `task.seeds`.
pub fn remove(
    backend: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    task: &RemovalTask,
) -> Result<Vec<(u64, Result<RemovalOutcome>)>> {
    task.validate(backend, schedule.steps())?;
    let steps = schedule.steps();
    Ok(task
        .seeds
        .par_iter()
        .map(|&seed| {
            let run = |window| sampler::sample(backend, schedule, &task.config(window), seed);
            let outcome = (|| {
                Ok(RemovalOutcome {
                    seed,
                    original: run(Window::EMPTY)?,
                    all_steps: run(Window::all(steps))?,
                    windowed: run(task.window)?,
                })
            })();
            (seed, outcome)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowSearchRow {
    pub start: usize,
    /// Smallest duration removing the object for a majority of seeds.
    pub min_duration: Option<usize>,
    /// Smallest duration per seed, in `seeds` order.
    pub per_seed: Vec<Option<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowSearchTable {
    pub seeds: Vec<u64>,
    pub n_max: usize,
    pub rows: Vec<WindowSearchRow>,
}

impl WindowSearchTable {
    /// `start,min_duration,possible`; impossible starts leave `min_duration` empty.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        write_csv(
            out,
            &["start", "min_duration", "possible"],
            self.rows.iter().map(|r| {
                vec![
                    Some(r.start.to_string()),
                    r.min_duration.map(|d| d.to_string()),
                    Some(r.min_duration.is_some().to_string()),
                ]
            }),
        )
    }

    pub fn duration(&self, start: usize) -> Option<usize> {
        self.rows.iter().find(|r| r.start == start).and_then(|r| r.min_duration)
    }
}

/// For each start `s`, increases `n` from 0 until window `[s, s + n)` removes
/// the object in at least half of the seeds (judge reports absence), up to
/// `min(n_max, T − s)`. No monotonicity in `n` is assumed.
pub fn window_search(
    backend: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    task: &RemovalTask,
    n_max: usize,
    judge: &dyn PresenceJudge,
) -> Result<WindowSearchTable> {
    let steps = schedule.steps();
    if n_max > steps {
        return Err(Error::Guidance(format!("n_max {n_max} exceeds {steps} steps")));
    }
    task.validate(backend, steps)?;
    let cells: Vec<(usize, usize)> = (0..steps)
        .flat_map(|s| (0..=n_max.min(steps - s)).map(move |n| (s, n)))
        .collect();
    // removed[cell][seed]
    let removed: Vec<Vec<bool>> = cells
        .par_iter()
        .map(|&(s, n)| {
            task.seeds
                .iter()
                .map(|&seed| {
                    let img = sampler::sample_final(backend, schedule, &task.config(Window::new(s, s + n)), seed)?;
                    Ok(!judge.present(&img)?)
                })
                .collect::<Result<Vec<bool>>>()
        })
        .collect::<Result<_>>()?;
    let rows = (0..steps)
        .map(|s| {
            let mine: Vec<(usize, &Vec<bool>)> = cells
                .iter()
                .zip(&removed)
                .filter(|((cs, _), _)| *cs == s)
                .map(|((_, n), r)| (*n, r))
                .collect();
            let min_duration = mine
                .iter()
                .find(|(_, r)| 2 * r.iter().filter(|x| **x).count() >= r.len())
                .map(|(n, _)| *n);
            let per_seed = (0..task.seeds.len())
                .map(|i| mine.iter().find(|(_, r)| r[i]).map(|(n, _)| *n))
                .collect();
            WindowSearchRow {
                start: s,
                min_duration,
                per_seed,
            }
        })
        .collect();
    Ok(WindowSearchTable {
        seeds: task.seeds.clone(),
        n_max,
        rows,
    })
}
