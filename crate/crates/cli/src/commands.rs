//! One function per subcommand. Each writes its artifacts and returns a
//! result summary plus the checks evaluated in `--assert` mode.

use std::time::Duration;

use anyhow::{bail, Context, Result};
use negdyn::diagnostics::{
    critical_step, inducing_curves, momentum_curve, reverse_activation_sweep, strength_ratio, CriticalMode,
};
use negdyn::eval::{compute_metrics, oracle_trial, remote_judge, JudgeRequest, OraclePresence, TrialVerdict};
use negdyn::inpaint::{remove, window_search, RemovalTask};
use negdyn::scene::export_dataset;
use negdyn::{
    sample, AnalyticBackend, ArchitectureManifest, DiagnosticCurve, GuidanceConfig, ImageTriple, NeuralDenoiser,
    NoisePredictor, Trajectory, Window,
};
use rayon::prelude::*;
use serde_json::{json, Value};

use crate::config::{BackendConfig, Command, JudgeConfig, Prepared, Scenario};
use crate::output::{Artifacts, Check};

pub struct Outcome {
    pub results: Value,
    pub checks: Vec<Check>,
}

pub fn load_backend(prep: &Prepared) -> Result<Box<dyn NoisePredictor>> {
    match &prep.config.backend {
        BackendConfig::Analytic => Ok(Box::new(AnalyticBackend::new(prep.world.clone()))),
        BackendConfig::Neural { weights, manifest } => {
            let manifest = match manifest {
                Some(p) => ArchitectureManifest::read(p)?,
                None => world_manifest(prep),
            };
            let model = NeuralDenoiser::load_weights(manifest, weights)
                .with_context(|| format!("loading weights {}", weights.display()))?;
            if model.grid() != (prep.world.height, prep.world.width) {
                bail!("weights grid {:?} differs from the world grid", model.grid());
            }
            Ok(Box::new(model))
        }
    }
}

fn world_manifest(prep: &Prepared) -> ArchitectureManifest {
    ArchitectureManifest::new(prep.world.vocabulary.tokens().to_vec(), prep.world.height, prep.world.width)
}

pub fn run(command: Command, prep: &Prepared, backend: &dyn NoisePredictor, out: &mut Artifacts) -> Result<Outcome> {
    match command {
        Command::GenWorld => gen_world(prep, out),
        Command::InitWeights => init_weights(prep, out),
        _ => {
            let mut results = serde_json::Map::new();
            let mut checks = Vec::new();
            for s in &prep.config.scenarios {
                let ctx = Ctx { prep, backend, s };
                let o = match command {
                    Command::Sample => ctx.sample(out),
                    Command::DiagnoseRt => ctx.diagnose_rt(out),
                    Command::DiagnoseInducing => ctx.diagnose_inducing(out),
                    Command::DiagnoseMomentum => ctx.diagnose_momentum(out),
                    Command::SweepReverseActivation => ctx.sweep_reverse_activation(out),
                    Command::WindowSearch => ctx.window_search(out),
                    Command::RemoveEval => ctx.remove_eval(out),
                    Command::GenWorld | Command::InitWeights => unreachable!(),
                }
                .with_context(|| format!("scenario {:?}", s.name))?;
                results.insert(s.name.clone(), o.results);
                checks.extend(o.checks.into_iter().map(|c| Check {
                    name: format!("{}: {}", s.name, c.name),
                    ..c
                }));
            }
            Ok(Outcome {
                results: Value::Object(results),
                checks,
            })
        }
    }
}

fn gen_world(prep: &Prepared, out: &mut Artifacts) -> Result<Outcome> {
    let w = &prep.world;
    out.write_json("world.json", w)?;
    for c in &w.components {
        out.write_pgm(&format!("components/{}.pgm", c.id), &c.mean_image, w.height, w.width)?;
    }
    let provenance = json!({
        "schedule": prep.config.schedule,
        "config_hash": prep.hash,
    });
    let d = &prep.config.dataset;
    let sidecar = export_dataset(
        w,
        d.n,
        d.val_fraction,
        prep.config.seed,
        provenance,
        &out.path("dataset.npdl")?,
        &out.path("dataset.json")?,
    )?;
    out.record("dataset.npdl")?;
    out.record("dataset.json")?;
    let manifest = world_manifest(prep);
    manifest.write(&out.path("architecture.json")?)?;
    out.record("architecture.json")?;
    Ok(Outcome {
        results: json!({
            "components": w.components.len(),
            "vocabulary": w.vocabulary,
            "dataset_samples": sidecar.captions.len(),
            "validation_samples": sidecar.split.iter().filter(|s| *s == "val").count(),
        }),
        checks: vec![],
    })
}

fn init_weights(prep: &Prepared, out: &mut Artifacts) -> Result<Outcome> {
    let manifest = world_manifest(prep);
    let model = NeuralDenoiser::init_random(manifest.clone(), prep.config.seed)?;
    model.save_weights(&out.path("weights.npdl")?)?;
    out.record("weights.npdl")?;
    manifest.write(&out.path("architecture.json")?)?;
    out.record("architecture.json")?;
    Ok(Outcome {
        results: json!({ "parameters": manifest.parameter_count() }),
        checks: vec![],
    })
}

struct Ctx<'a> {
    prep: &'a Prepared,
    backend: &'a dyn NoisePredictor,
    s: &'a Scenario,
}

fn check(name: &str, pass: bool, detail: String) -> Check {
    Check {
        name: name.into(),
        pass,
        detail,
    }
}

fn fmt(v: f64) -> String {
    format!("{v:.10e}")
}

/// P(X ≥ k) for X ~ Binomial(n, 1/2).
pub fn sign_test_p(k: usize, n: usize) -> f64 {
    // log-space binomial coefficients keep large n finite
    let ln_fact = |m: usize| (1..=m).map(|i| (i as f64).ln()).sum::<f64>();
    (k..=n)
        .map(|j| (ln_fact(n) - ln_fact(j) - ln_fact(n - j) - n as f64 * 2f64.ln()).exp())
        .sum::<f64>()
        .min(1.0)
}

impl Ctx<'_> {
    fn steps(&self) -> usize {
        self.prep.schedule.steps()
    }

    fn config(&self, window: Window) -> GuidanceConfig {
        GuidanceConfig {
            w: self.s.w,
            positive: self.s.positive.clone(),
            negative: self.s.negative.clone(),
            window,
            sampler: self.s.sampler,
        }
    }

    fn seeds(&self) -> Vec<u64> {
        self.s.seeds(self.prep.config.seed)
    }

    fn trajectories(&self, window: Window) -> Result<Vec<Trajectory>> {
        let cfg = self.config(window);
        self.seeds()
            .par_iter()
            .map(|&seed| Ok(sample(self.backend, &self.prep.schedule, &cfg, seed)?))
            .collect()
    }

    fn rel(&self, file: &str) -> String {
        format!("{}/{file}", self.s.name)
    }

    fn task(&self) -> Result<RemovalTask> {
        Ok(RemovalTask {
            positive: self.s.positive.clone(),
            negative: self.s.negative.clone(),
            target_token: self.s.target()?.to_string(),
            window: self.s.window,
            seeds: self.seeds(),
            w: self.s.w,
            sampler: self.s.sampler,
        })
    }

    fn sample(&self, out: &mut Artifacts) -> Result<Outcome> {
        let seed = self.prep.config.seed;
        let traj = sample(self.backend, &self.prep.schedule, &self.config(self.s.window), seed)?;
        traj.dump(&out.path(&self.rel("trajectory.npdl"))?, &out.path(&self.rel("trajectory.json"))?)?;
        out.record(&self.rel("trajectory.npdl"))?;
        out.record(&self.rel("trajectory.json"))?;
        out.write_pgm(&self.rel("final.pgm"), &traj.final_image, traj.height, traj.width)?;
        let class = self.prep.world.classify(&traj.final_image)?;
        Ok(Outcome {
            results: json!({
                "seed": seed,
                "component": class.component,
                "caption": self.prep.world.components[class.component].caption,
            }),
            checks: vec![],
        })
    }

    fn diagnose_rt(&self, out: &mut Artifacts) -> Result<Outcome> {
        let map = self.s.token_map();
        let trajs = self.trajectories(self.s.window)?;
        let per_seed: Vec<Vec<DiagnosticCurve>> =
            trajs.iter().map(|t| strength_ratio(t, &map)).collect::<negdyn::Result<_>>()?;
        let crit = &self.prep.config.critical;
        let mut results = serde_json::Map::new();
        let mut checks = Vec::new();
        for (i, (neg, pos)) in map.pairs.iter().enumerate() {
            let curves: Vec<DiagnosticCurve> = per_seed.iter().map(|c| c[i].clone()).collect();
            let mean = DiagnosticCurve::average(format!("r_t {neg}/{pos}"), &curves)?;
            out.write_with(&self.rel(&format!("r_t_{neg}.csv")), |b| mean.write_csv(b))?;
            let adjective = self.prep.config.world.adjectives.iter().any(|a| &a.name == neg);
            let mode = crit.mode.unwrap_or(if adjective {
                CriticalMode::AdjectivePlateau
            } else {
                CriticalMode::NounPeak
            });
            let step = critical_step(&mean, mode, crit.plateau_threshold, crit.plateau_len);
            let last = self.steps() - 1;
            checks.push(match mode {
                CriticalMode::NounPeak => check(
                    &format!("{neg} interior peak"),
                    step.is_some_and(|s| s > 0 && s < last),
                    format!("argmax of mean r_t at step {step:?}, interior means 1..={}", last - 1),
                ),
                CriticalMode::AdjectivePlateau => check(
                    &format!("{neg} plateau"),
                    step.is_some(),
                    format!(
                        "first run of {} steps with r_t ≥ {} starts at {step:?}",
                        crit.plateau_len, crit.plateau_threshold
                    ),
                ),
            });
            results.insert(neg.clone(), json!({ "mapped_to": pos, "mode": mode, "critical_step": step }));
        }
        Ok(Outcome {
            results: Value::Object(results),
            checks,
        })
    }

    fn diagnose_inducing(&self, out: &mut Artifacts) -> Result<Outcome> {
        let with_neg = self.trajectories(self.s.window)?;
        let without = self.trajectories(Window::EMPTY)?;
        let curves = with_neg
            .par_iter()
            .zip(&without)
            .map(|(b, a)| inducing_curves(b, a, self.backend, &self.prep.schedule))
            .collect::<negdyn::Result<Vec<_>>>()?;
        let n = curves.len() as f64;
        let steps = &curves[0].d.steps;
        let mean_of = |f: &dyn Fn(&negdyn::diagnostics::InducingCurves, usize) -> f64, i: usize| {
            curves.iter().map(|c| f(c, i)).sum::<f64>() / n
        };
        out.write_with(&self.rel("inducing.csv"), |b| {
            negdyn::image::write_csv(
                b,
                &["step", "d", "p_ind", "p_ori", "in_window"],
                (0..steps.len()).map(|i| {
                    vec![
                        Some(steps[i].to_string()),
                        Some(fmt(mean_of(&|c, i| c.d.values[i].unwrap_or(f64::NAN), i))),
                        Some(fmt(mean_of(&|c, i| c.p_ind[i], i))),
                        Some(fmt(mean_of(&|c, i| c.p_ori[i], i))),
                        Some(self.s.window.contains(steps[i]).to_string()),
                    ]
                }),
            )
        })?;
        let seed_means: Vec<f64> = curves
            .iter()
            .map(|c| c.d.mean_over(self.s.window).context("window has no steps"))
            .collect::<Result<_>>()?;
        let seeds = self.seeds();
        out.write_with(&self.rel("inducing_seeds.csv"), |b| {
            negdyn::image::write_csv(
                b,
                &["seed", "mean_d"],
                seeds.iter().zip(&seed_means).map(|(s, d)| vec![Some(s.to_string()), Some(fmt(*d))]),
            )
        })?;
        let positive = seed_means.iter().filter(|d| **d > 0.0).count();
        let p = sign_test_p(positive, seed_means.len());
        let grand = seed_means.iter().sum::<f64>() / n;
        let alpha = self.prep.config.thresholds.sign_test_alpha;
        Ok(Outcome {
            results: json!({ "mean_d": grand, "positive_seeds": positive, "seeds": seed_means.len(), "sign_test_p": p }),
            checks: vec![check(
                "inducing effect",
                grand > 0.0 && p < alpha,
                format!("mean d {grand:.4}, positive in {positive}/{}, p = {p:.3e} (< {alpha})", seed_means.len()),
            )],
        })
    }

    fn diagnose_momentum(&self, out: &mut Artifacts) -> Result<Outcome> {
        let trajs = self.trajectories(self.s.window)?;
        let curves = trajs.iter().map(momentum_curve).collect::<negdyn::Result<Vec<_>>>()?;
        let mean = DiagnosticCurve::average("momentum", &curves)?;
        out.write_with(&self.rel("momentum.csv"), |b| mean.write_csv(b))?;
        let th = &self.prep.config.thresholds;
        let early = mean
            .mean_over(Window::new(1, th.momentum_steps))
            .context("no defined momentum values")?;
        let d = self.prep.world.pixels() as f64;
        let bar = th.momentum_sigmas / d.sqrt();
        let bounded = mean.values.iter().flatten().all(|v| (-1.0..=1.0).contains(v));
        Ok(Outcome {
            results: json!({ "mean_cosine_early": early, "threshold": bar, "rows": mean.len() }),
            checks: vec![check(
                "momentum",
                early > bar && bounded,
                format!(
                    "mean cosine over the first {} steps {early:.4} vs {} / sqrt({d}) = {bar:.4}; values in [-1, 1]: {bounded}",
                    th.momentum_steps, th.momentum_sigmas
                ),
            )],
        })
    }

    fn sweep_reverse_activation(&self, out: &mut Artifacts) -> Result<Outcome> {
        let steps = self.steps();
        let k_max = self.prep.config.search.k_max.unwrap_or(steps);
        let target = self.s.target()?;
        let judge = OraclePresence::new(&self.prep.world, target)?;
        let table = reverse_activation_sweep(
            self.backend,
            &self.prep.schedule,
            &self.config(Window::EMPTY),
            &self.seeds(),
            k_max,
            &judge,
        )?;
        out.write_with(&self.rel("reverse_activation.csv"), |b| table.write_csv(b))?;
        let r0 = table.rate(0).expect("k = 0 is always swept");
        let best = table
            .rows
            .iter()
            .filter(|r| r.k > 0 && r.k < steps)
            .map(|r| (r.k, r.rate))
            .fold(None, |acc: Option<(usize, f64)>, b| match acc {
                Some(a) if a.1 >= b.1 => Some(a),
                _ => Some(b),
            });
        let full = table.rate(steps);
        let pass = best.is_some_and(|b| b.1 > r0) && full.is_some_and(|f| f < r0);
        Ok(Outcome {
            results: json!({ "rate_k0": r0, "best_intermediate": best, "rate_full_window": full }),
            checks: vec![check(
                "reverse activation",
                pass,
                format!("k = 0 rate {r0:.3}, best intermediate (k, rate) {best:?}, [0, T) rate {full:?}"),
            )],
        })
    }

    fn window_search(&self, out: &mut Artifacts) -> Result<Outcome> {
        let steps = self.steps();
        let n_max = self.prep.config.search.n_max.unwrap_or(steps);
        let task = self.task()?;
        let judge = OraclePresence::new(&self.prep.world, &task.target_token)?;
        let table = window_search(self.backend, &self.prep.schedule, &task, n_max, &judge)?;
        out.write_with(&self.rel("window_search.csv"), |b| table.write_csv(b))?;
        let d0 = table.duration(0);
        let best = table
            .rows
            .iter()
            .filter(|r| r.start >= 1)
            .filter_map(|r| r.min_duration.map(|d| (r.start, d)))
            .min_by_key(|(s, d)| (*d, *s));
        let interior = match (best, d0) {
            (Some((_, d)), Some(d0)) => d < d0,
            (Some(_), None) => true,
            _ => false,
        };
        let last_possible = table.rows.iter().rev().find(|r| r.min_duration.is_some()).map(|r| r.start);
        let terminal = last_possible.is_some_and(|s| s + 1 < steps);
        Ok(Outcome {
            results: json!({ "best": best, "duration_at_0": d0, "last_possible_start": last_possible }),
            checks: vec![check(
                "U-curve",
                interior && terminal,
                format!("(s*, duration) {best:?} vs duration(0) {d0:?}; last possible start {last_possible:?}"),
            )],
        })
    }

    fn remove_eval(&self, out: &mut Artifacts) -> Result<Outcome> {
        let task = self.task()?;
        let target = task.target_token.clone();
        let (h, w) = (self.prep.world.height, self.prep.world.width);
        let mut triples = Vec::new();
        for (seed, outcome) in remove(self.backend, &self.prep.schedule, &task)? {
            let o = outcome.with_context(|| format!("seed {seed}"))?;
            let t = o.images();
            for (arm, img) in [("original", &t.original), ("all_steps", &t.all_steps), ("windowed", &t.windowed)] {
                out.write_pgm(&self.rel(&format!("images/{seed}_{arm}.pgm")), img, h, w)?;
            }
            triples.push((seed, t));
        }
        let verdicts: Vec<TrialVerdict> = match &self.prep.config.judge {
            JudgeConfig::Oracle => triples
                .par_iter()
                .map(|(_, t)| oracle_trial(&self.prep.world, &target, t))
                .collect::<negdyn::Result<_>>()?,
            JudgeConfig::Remote {
                endpoint,
                timeout_secs,
                max_in_flight,
            } => {
                let pool = rayon::ThreadPoolBuilder::new().num_threads(*max_in_flight).build()?;
                let timeout = Duration::from_secs_f64(*timeout_secs);
                pool.install(|| {
                    triples
                        .par_iter()
                        .map(|(seed, t)| {
                            remote_trial(endpoint, &target, t, h, w, timeout).with_context(|| format!("judging seed {seed}"))
                        })
                        .collect::<Result<_>>()
                })?
            }
        };
        out.write_with(&self.rel("trials.csv"), |b| {
            negdyn::image::write_csv(
                b,
                &["seed", "windowed_removed", "all_steps_removed", "closer"],
                triples.iter().zip(&verdicts).map(|((seed, _), v)| {
                    vec![
                        Some(seed.to_string()),
                        Some(v.windowed_removed.to_string()),
                        Some(v.all_steps_removed.to_string()),
                        serde_json::to_value(v.closer).ok().and_then(|c| c.as_str().map(String::from)),
                    ]
                }),
            )
        })?;
        let m = compute_metrics(&verdicts)?;
        out.write_with(&self.rel("metrics.csv"), |b| m.write_csv(b))?;
        out.write_json(&self.rel("metrics.json"), &m)?;
        let th = &self.prep.config.thresholds;
        Ok(Outcome {
            results: serde_json::to_value(&m)?,
            checks: vec![
                check(
                    "rsr_windowed",
                    m.rsr_windowed >= th.min_rsr_windowed,
                    format!("{:.4} (≥ {})", m.rsr_windowed, th.min_rsr_windowed),
                ),
                check("cr", m.cr > th.min_cr, format!("{:.4} (> {})", m.cr, th.min_cr)),
            ],
        })
    }
}

/// Both arms through the wire protocol: the all-steps arm is judged by a
/// second request whose windowed image is the all-steps image.
fn remote_trial(
    endpoint: &str,
    target: &str,
    t: &ImageTriple,
    h: usize,
    w: usize,
    timeout: Duration,
) -> Result<TrialVerdict> {
    let main = remote_judge(endpoint, &JudgeRequest::new(target, t, h, w)?, timeout)?;
    let baseline = ImageTriple {
        windowed: t.all_steps.clone(),
        ..t.clone()
    };
    let base = remote_judge(endpoint, &JudgeRequest::new(target, &baseline, h, w)?, timeout)?;
    Ok(TrialVerdict {
        windowed_removed: main.removed,
        all_steps_removed: base.removed,
        closer: main.closer,
    })
}
