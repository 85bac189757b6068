//! Experiment configuration: JSON on disk, validated before any run starts.

use std::collections::BTreeSet;
use std::path::PathBuf;

use anyhow::{bail, ensure, Context, Result};
use negdyn::diagnostics::CriticalMode;
use negdyn::scene::SceneWorld;
use negdyn::{
    build_world, ArchitectureManifest, NoiseSchedule, Prompt, SamplerKind, ScheduleConfig, TokenMap, Window,
    WorldSpec, DEFAULT_WINDOW,
};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_schedule")]
    pub schedule: ScheduleConfig,
    #[serde(default = "WorldSpec::lab")]
    pub world: WorldSpec,
    /// Places objects listed without a center.
    #[serde(default)]
    pub world_seed: u64,
    #[serde(default)]
    pub backend: BackendConfig,
    /// Base seed; trial `i` of a scenario uses `seed + i`.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// Worker threads; all cores when absent.
    #[serde(default)]
    pub parallelism: Option<usize>,
    #[serde(default)]
    pub judge: JudgeConfig,
    #[serde(default = "default_scenarios")]
    pub scenarios: Vec<Scenario>,
    #[serde(default)]
    pub search: SearchConfig,
    #[serde(default)]
    pub critical: CriticalConfig,
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub thresholds: Thresholds,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("every field has a default")
    }
}

fn default_schedule() -> ScheduleConfig {
    ScheduleConfig::latent_diffusion(30)
}

fn default_scenarios() -> Vec<Scenario> {
    let s = |name: &str, pos: &str, neg: &str, window: Window, commands: &[&str]| Scenario {
        name: name.into(),
        commands: Some(commands.iter().map(|c| c.to_string()).collect()),
        positive: Prompt::parse(pos).expect("valid prompt"),
        negative: Prompt::parse(neg).expect("valid prompt"),
        target: None,
        token_map: None,
        window,
        w: default_w(),
        sampler: SamplerKind::Ddim,
        trials: default_trials(),
    };
    let all = Window::new(0, 30);
    vec![
        s(
            "remove-circle",
            "square circle",
            "circle",
            DEFAULT_WINDOW,
            &["sample", "diagnose-momentum", "window-search", "remove-eval"],
        ),
        s(
            "induce-circle",
            "square",
            "circle",
            DEFAULT_WINDOW,
            &["diagnose-inducing", "sweep-reverse-activation"],
        ),
        s("rt-circle", "square circle", "circle", all, &["diagnose-rt"]),
        s("rt-bright", "square bright", "bright", all, &["diagnose-rt"]),
    ]
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackendConfig {
    /// Exact mixture score of `world`.
    #[default]
    Analytic,
    /// Cross-attention denoiser; the manifest defaults to the world's vocabulary and grid.
    Neural {
        weights: PathBuf,
        #[serde(default)]
        manifest: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum JudgeConfig {
    /// Mixture classification against `world`.
    #[default]
    Oracle,
    /// External judge, used by `remove-eval`.
    Remote {
        endpoint: String,
        #[serde(default = "default_timeout")]
        timeout_secs: f64,
        #[serde(default = "default_in_flight")]
        max_in_flight: usize,
    },
}

fn default_timeout() -> f64 {
    30.0
}
fn default_in_flight() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    /// Subcommands this scenario takes part in; all when absent.
    #[serde(default)]
    pub commands: Option<Vec<String>>,
    pub positive: Prompt,
    pub negative: Prompt,
    /// Object to remove or detect; the first token of `negative` by default.
    #[serde(default)]
    pub target: Option<String>,
    /// Negative → positive token pairs for the strength ratio; identity by default.
    #[serde(default)]
    pub token_map: Option<TokenMap>,
    #[serde(default = "default_window")]
    pub window: Window,
    #[serde(default = "default_w")]
    pub w: f64,
    #[serde(default)]
    pub sampler: SamplerKind,
    #[serde(default = "default_trials")]
    pub trials: usize,
}

fn default_window() -> Window {
    DEFAULT_WINDOW
}
fn default_w() -> f64 {
    7.0
}
fn default_trials() -> usize {
    100
}

impl Scenario {
    pub fn target(&self) -> Result<&str> {
        match &self.target {
            Some(t) => Ok(t),
            None => self
                .negative
                .content_tokens()
                .next()
                .with_context(|| format!("scenario {:?} has an empty negative prompt", self.name)),
        }
    }

    pub fn token_map(&self) -> TokenMap {
        self.token_map
            .clone()
            .unwrap_or_else(|| TokenMap::new(self.negative.content_tokens().map(|t| (t, t))))
    }

    pub fn seeds(&self, base: u64) -> Vec<u64> {
        (0..self.trials as u64).map(|i| base.wrapping_add(i)).collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchConfig {
    /// Longest window tried by `window-search`; `T` when absent.
    #[serde(default)]
    pub n_max: Option<usize>,
    /// Largest prefix tried by `sweep-reverse-activation`; `T` when absent.
    #[serde(default)]
    pub k_max: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CriticalConfig {
    /// Forces one detection mode; otherwise adjectives of the world use the
    /// plateau rule and other tokens the peak rule.
    #[serde(default)]
    pub mode: Option<CriticalMode>,
    #[serde(default = "default_plateau_threshold")]
    pub plateau_threshold: f64,
    #[serde(default = "default_plateau_len")]
    pub plateau_len: usize,
}

impl Default for CriticalConfig {
    fn default() -> Self {
        Self {
            mode: None,
            plateau_threshold: default_plateau_threshold(),
            plateau_len: default_plateau_len(),
        }
    }
}

fn default_plateau_threshold() -> f64 {
    1.0
}
fn default_plateau_len() -> usize {
    3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    #[serde(default = "default_dataset_n")]
    pub n: usize,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n: default_dataset_n(),
            val_fraction: default_val_fraction(),
        }
    }
}

fn default_dataset_n() -> usize {
    1024
}
fn default_val_fraction() -> f64 {
    0.1
}

/// Pass marks checked in `--assert` mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Thresholds {
    #[serde(default = "half")]
    pub min_rsr_windowed: f64,
    #[serde(default = "half")]
    pub min_cr: f64,
    #[serde(default = "default_alpha")]
    pub sign_test_alpha: f64,
    /// Momentum must exceed this many null standard deviations `1/√d`.
    #[serde(default = "default_momentum_sigmas")]
    pub momentum_sigmas: f64,
    /// Momentum is averaged over the first this many steps.
    #[serde(default = "default_momentum_steps")]
    pub momentum_steps: usize,
}

impl Default for Thresholds {
    fn default() -> Self {
        serde_json::from_str("{}").expect("every field has a default")
    }
}

fn half() -> f64 {
    0.5
}
fn default_alpha() -> f64 {
    0.05
}
fn default_momentum_sigmas() -> f64 {
    20.0
}
fn default_momentum_steps() -> usize {
    25
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    GenWorld,
    Sample,
    DiagnoseRt,
    DiagnoseInducing,
    DiagnoseMomentum,
    SweepReverseActivation,
    WindowSearch,
    RemoveEval,
    InitWeights,
}

impl Command {
    pub const ALL: [Command; 9] = [
        Command::GenWorld,
        Command::Sample,
        Command::DiagnoseRt,
        Command::DiagnoseInducing,
        Command::DiagnoseMomentum,
        Command::SweepReverseActivation,
        Command::WindowSearch,
        Command::RemoveEval,
        Command::InitWeights,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::GenWorld => "gen-world",
            Command::Sample => "sample",
            Command::DiagnoseRt => "diagnose-rt",
            Command::DiagnoseInducing => "diagnose-inducing",
            Command::DiagnoseMomentum => "diagnose-momentum",
            Command::SweepReverseActivation => "sweep-reverse-activation",
            Command::WindowSearch => "window-search",
            Command::RemoveEval => "remove-eval",
            Command::InitWeights => "init-weights",
        }
    }
}

/// Everything a command needs, built once from a validated config.
pub struct Prepared {
    pub config: ExperimentConfig,
    pub world: SceneWorld,
    pub schedule: NoiseSchedule,
    pub hash: String,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).context("parsing experiment config")
    }

    /// SHA-256 of the canonical JSON form, leaving out the output directory
    /// and worker count, which do not affect any artifact.
    pub fn hash(&self) -> String {
        let mut content = self.clone();
        content.output_dir = None;
        content.parallelism = None;
        let json = serde_json::to_vec(&content).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }

    /// Checks every cross-reference `command` relies on. The scenarios kept
    /// are those listing `command` (or listing nothing), further narrowed to
    /// `only` when it is non-empty.
    pub fn prepare(mut self, command: Command, only: &[String]) -> Result<Prepared> {
        let hash = self.hash();
        let schedule = self.schedule.build().context("schedule")?;
        let steps = schedule.steps();
        let world = build_world(&self.world, self.world_seed).context("world")?;
        if let Some(p) = self.parallelism {
            ensure!(p >= 1, "parallelism must be at least 1");
        }
        match &self.judge {
            JudgeConfig::Oracle => {}
            JudgeConfig::Remote {
                endpoint,
                timeout_secs,
                max_in_flight,
            } => {
                ensure!(!endpoint.is_empty(), "remote judge endpoint is empty");
                ensure!(
                    timeout_secs.is_finite() && *timeout_secs > 0.0,
                    "remote judge timeout must be positive"
                );
                ensure!(*max_in_flight >= 1, "remote judge max_in_flight must be at least 1");
            }
        }
        if let BackendConfig::Neural { manifest: Some(path), .. } = &self.backend {
            let m = ArchitectureManifest::read(path).with_context(|| format!("manifest {}", path.display()))?;
            ensure!(
                m.vocabulary == world.vocabulary.tokens(),
                "manifest vocabulary {:?} differs from the world's {:?}",
                m.vocabulary,
                world.vocabulary.tokens()
            );
        }
        for (key, n) in [("n_max", self.search.n_max), ("k_max", self.search.k_max)] {
            if let Some(n) = n {
                ensure!(n <= steps, "search.{key} = {n} exceeds {steps} steps");
            }
        }
        ensure!(self.critical.plateau_len >= 1, "critical.plateau_len must be at least 1");
        ensure!(self.dataset.n >= 1, "dataset.n must be at least 1");
        ensure!(
            (0.0..1.0).contains(&self.dataset.val_fraction),
            "dataset.val_fraction must lie in [0, 1)"
        );
        ensure!(
            self.thresholds.momentum_steps >= 2 && self.thresholds.momentum_steps <= steps,
            "thresholds.momentum_steps must lie in [2, {steps}]"
        );

        let mut names = BTreeSet::new();
        for s in &self.scenarios {
            ensure!(names.insert(s.name.as_str()), "duplicate scenario name {:?}", s.name);
            for c in s.commands.iter().flatten() {
                ensure!(
                    Command::ALL.iter().any(|k| k.name() == c),
                    "scenario {:?} lists unknown command {c:?}",
                    s.name
                );
            }
        }
        for name in only {
            ensure!(names.contains(name.as_str()), "no scenario named {name:?}");
        }
        self.scenarios.retain(|s| {
            let listed = s.commands.as_ref().is_none_or(|cs| cs.iter().any(|c| c == command.name()));
            listed && (only.is_empty() || only.contains(&s.name))
        });
        if uses_scenarios(command) {
            for s in &self.scenarios {
                validate_scenario(s, &world, steps, command).with_context(|| format!("scenario {:?}", s.name))?;
            }
            ensure!(!self.scenarios.is_empty(), "no scenario applies to {}", command.name());
        }
        Ok(Prepared {
            config: self,
            world,
            schedule,
            hash,
        })
    }
}

fn uses_scenarios(command: Command) -> bool {
    !matches!(command, Command::GenWorld | Command::InitWeights)
}

fn validate_scenario(s: &Scenario, world: &SceneWorld, steps: usize, command: Command) -> Result<()> {
    ensure!(
        !s.name.is_empty() && s.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_'),
        "name must be non-empty ASCII letters, digits, '-' or '_'"
    );
    ensure!(s.trials >= 1, "trials must be at least 1");
    ensure!(s.w.is_finite() && s.w >= 0.0, "w must be finite and non-negative");
    s.window.validate(steps)?;
    world.component_set(&s.positive).context("positive prompt")?;
    world.component_set(&s.negative).context("negative prompt")?;
    if s.negative.is_empty() {
        bail!("negative prompt is empty");
    }
    let target = s.target()?;
    ensure!(
        s.negative.tokens().iter().any(|t| t == target),
        "target {target:?} is not in the negative prompt"
    );
    match command {
        Command::RemoveEval | Command::WindowSearch => {
            world
                .mask(target)
                .with_context(|| format!("target {target:?} must be an object"))?;
        }
        Command::DiagnoseRt => s.token_map().validate(&s.positive, &s.negative)?,
        Command::DiagnoseInducing => {
            ensure!(!s.window.is_empty(), "inducing diagnostics need a non-empty window")
        }
        _ => {}
    }
    Ok(())
}
