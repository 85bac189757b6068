//! Removal judging and metrics: RSR for each arm, their ratio RRSR, and the
//! background comparison rate CR.

use std::io::Write;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{encode_pgm, write_csv};
use crate::scene::SceneWorld;

/// Pixels within this MSE of each other count as equally close.
pub const TIE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Closer {
    Windowed,
    AllSteps,
    Tie,
}

impl Closer {
    /// Credit toward CR.
    pub fn score(self) -> f64 {
        match self {
            Closer::Windowed => 1.0,
            Closer::AllSteps => 0.0,
            Closer::Tie => 0.5,
        }
    }

    pub fn swapped(self) -> Self {
        match self {
            Closer::Windowed => Closer::AllSteps,
            Closer::AllSteps => Closer::Windowed,
            Closer::Tie => Closer::Tie,
        }
    }
}

/// Judgement of one triple: whether the windowed image lost the object and
/// which arm kept the background closer to the original.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Verdict {
    pub removed: bool,
    pub closer: Closer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageTriple {
    pub original: Vec<f64>,
    pub all_steps: Vec<f64>,
    pub windowed: Vec<f64>,
}

/// Decides whether an object is present in an image.
pub trait PresenceJudge: Sync {
    fn present(&self, image: &[f64]) -> Result<bool>;
}

/// Presence by mixture classification: the object is present when the most
/// likely component's caption names it.
pub struct OraclePresence<'a> {
    pub world: &'a SceneWorld,
    pub token: String,
}

impl<'a> OraclePresence<'a> {
    pub fn new(world: &'a SceneWorld, token: &str) -> Result<Self> {
        world.vocabulary.token_id(token)?;
        Ok(Self {
            world,
            token: token.to_string(),
        })
    }
}

impl PresenceJudge for OraclePresence<'_> {
    fn present(&self, image: &[f64]) -> Result<bool> {
        let c = self.world.classify(image)?;
        Ok(self.world.components[c.component].has_token(&self.token))
    }
}

/// Mean squared difference over pixels where `exclude` is false.
pub fn masked_mse(a: &[f64], b: &[f64], exclude: &[bool]) -> Result<f64> {
    if a.len() != b.len() || a.len() != exclude.len() {
        return Err(Error::ShapeMismatch {
            expected: exclude.len(),
            actual: a.len().min(b.len()),
        });
    }
    let (mut sum, mut n) = (0.0, 0usize);
    for ((x, y), m) in a.iter().zip(b).zip(exclude) {
        if !m {
            sum += (x - y) * (x - y);
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Judge("mask leaves no background pixels".into()));
    }
    Ok(sum / n as f64)
}

/// Background comparison of the two arms against the original.
pub fn background_closer(world: &SceneWorld, target: &str, triple: &ImageTriple) -> Result<Closer> {
    let mask = world.mask(target)?;
    let mw = masked_mse(&triple.windowed, &triple.original, mask)?;
    let ma = masked_mse(&triple.all_steps, &triple.original, mask)?;
    Ok(if (mw - ma).abs() <= TIE_TOLERANCE {
        Closer::Tie
    } else if mw < ma {
        Closer::Windowed
    } else {
        Closer::AllSteps
    })
}

/// Exact judge for analytic-world images.
pub fn oracle_judge(world: &SceneWorld, target: &str, triple: &ImageTriple) -> Result<Verdict> {
    let closer = background_closer(world, target, triple)?;
    let removed = !OraclePresence::new(world, target)?.present(&triple.windowed)?;
    Ok(Verdict { removed, closer })
}

/// Per-trial outcome consumed by [`compute_metrics`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrialVerdict {
    pub windowed_removed: bool,
    pub all_steps_removed: bool,
    pub closer: Closer,
}

impl TrialVerdict {
    pub fn swapped(self) -> Self {
        Self {
            windowed_removed: self.all_steps_removed,
            all_steps_removed: self.windowed_removed,
            closer: self.closer.swapped(),
        }
    }
}

/// Oracle verdicts for both arms of one trial.
pub fn oracle_trial(world: &SceneWorld, target: &str, triple: &ImageTriple) -> Result<TrialVerdict> {
    let verdict = oracle_judge(world, target, triple)?;
    let judge = OraclePresence::new(world, target)?;
    Ok(TrialVerdict {
        windowed_removed: verdict.removed,
        all_steps_removed: !judge.present(&triple.all_steps)?,
        closer: verdict.closer,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n_trials: usize,
    pub windowed_successes: usize,
    pub all_steps_successes: usize,
    pub rsr_windowed: f64,
    pub rsr_allsteps: f64,
    /// `rsr_windowed / rsr_allsteps`; `None` when the all-steps arm never removes.
    pub rrsr: Option<f64>,
    pub cr: f64,
}

pub fn compute_metrics(trials: &[TrialVerdict]) -> Result<MetricsReport> {
    if trials.is_empty() {
        return Err(Error::Metrics("no trials".into()));
    }
    let n = trials.len();
    let ws = trials.iter().filter(|t| t.windowed_removed).count();
    let als = trials.iter().filter(|t| t.all_steps_removed).count();
    let rsr_windowed = ws as f64 / n as f64;
    let rsr_allsteps = als as f64 / n as f64;
    Ok(MetricsReport {
        n_trials: n,
        windowed_successes: ws,
        all_steps_successes: als,
        rsr_windowed,
        rsr_allsteps,
        rrsr: (als > 0).then(|| ws as f64 / als as f64),
        cr: trials.iter().map(|t| t.closer.score()).sum::<f64>() / n as f64,
    })
}

impl MetricsReport {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        write_csv(
            out,
            &["metric", "value"],
            [
                ("n_trials", Some(self.n_trials as f64)),
                ("rsr_windowed", Some(self.rsr_windowed)),
                ("rsr_allsteps", Some(self.rsr_allsteps)),
                ("rrsr", self.rrsr),
                ("cr", Some(self.cr)),
            ]
            .into_iter()
            .map(|(k, v)| vec![Some(k.to_string()), v.map(|v| v.to_string())]),
        )
    }
}

pub const JUDGE_TASK: &str = "removal_and_similarity";

/// Body of a remote judge request; images are base64-encoded binary PGM.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeRequest {
    pub task: String,
    pub object: String,
    pub original: String,
    pub all_steps: String,
    pub windowed: String,
}

impl JudgeRequest {
    pub fn new(object: &str, triple: &ImageTriple, height: usize, width: usize) -> Result<Self> {
        let enc = |img: &[f64]| -> Result<String> { Ok(BASE64.encode(encode_pgm(img, height, width)?)) };
        Ok(Self {
            task: JUDGE_TASK.into(),
            object: object.into(),
            original: enc(&triple.original)?,
            all_steps: enc(&triple.all_steps)?,
            windowed: enc(&triple.windowed)?,
        })
    }
}

/// Posts `request` to `endpoint` and parses the verdict. Network failures,
/// timeouts, non-2xx statuses and malformed bodies are distinct errors.
pub fn remote_judge(endpoint: &str, request: &JudgeRequest, timeout: Duration) -> Result<Verdict> {
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .timeout_global(Some(timeout))
        .http_status_as_error(false)
        .build()
        .into();
    let mut resp = agent.post(endpoint).send_json(request).map_err(transport_error)?;
    let status = resp.status().as_u16();
    if !(200..300).contains(&status) {
        return Err(Error::HttpStatus(status));
    }
    let body = resp.body_mut().read_to_string().map_err(transport_error)?;
    serde_json::from_str::<Verdict>(&body).map_err(|e| Error::Schema(format!("{e}: {body}")))
}

fn transport_error(e: ureq::Error) -> Error {
    match e {
        ureq::Error::Timeout(t) => Error::Timeout(t.to_string()),
        ureq::Error::Io(io) if matches!(io.kind(), std::io::ErrorKind::TimedOut | std::io::ErrorKind::WouldBlock) => {
            Error::Timeout(io.to_string())
        }
        ureq::Error::StatusCode(s) => Error::HttpStatus(s),
        other => Error::Network(other.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{self, Role};
    use crate::scene::{build_world, WorldSpec};
    use proptest::prelude::*;
    use rand::Rng;

    fn world() -> SceneWorld {
        build_world(&WorldSpec::basic(), 0).unwrap()
    }

    fn trial(w: bool, a: bool, c: Closer) -> TrialVerdict {
        TrialVerdict {
            windowed_removed: w,
            all_steps_removed: a,
            closer: c,
        }
    }

    #[test]
    fn judge_examples() {
        let w = world();
        let orig = w.components[3].mean_image.clone();
        let other = w.components[1].mean_image.clone();
        let blank = w.components[0].mean_image.clone();
        let t = ImageTriple {
            original: orig.clone(),
            all_steps: blank,
            windowed: orig.clone(),
        };
        let v = oracle_judge(&w, "circle", &t).unwrap();
        assert_eq!(v, Verdict { removed: false, closer: Closer::Windowed });

        let t = ImageTriple {
            original: orig.clone(),
            all_steps: other.clone(),
            windowed: other.clone(),
        };
        let v = oracle_judge(&w, "circle", &t).unwrap();
        assert_eq!(v, Verdict { removed: true, closer: Closer::Tie });

        // background offsets of 0.1 and 0.3 everywhere
        let shift = |img: &[f64], d: f64| img.iter().map(|v| v + d).collect::<Vec<_>>();
        let t = ImageTriple {
            original: orig.clone(),
            all_steps: shift(&orig, 0.3),
            windowed: shift(&orig, 0.1),
        };
        assert_eq!(oracle_judge(&w, "circle", &t).unwrap().closer, Closer::Windowed);
        assert!(oracle_judge(&w, "bright", &t).is_err(), "no mask for unknown token");
    }

    /// Independent reimplementation: Gaussian log densities and a pixel loop.
    fn brute(w: &SceneWorld, target: &str, t: &ImageTriple) -> Verdict {
        let mut best = (0, f64::NEG_INFINITY);
        for (k, c) in w.components.iter().enumerate() {
            let mut ll = c.weight.ln();
            for i in 0..t.windowed.len() {
                let d = t.windowed[i] - c.mean_image[i];
                ll -= d * d / (2.0 * w.sigma * w.sigma);
            }
            if ll > best.1 {
                best = (k, ll);
            }
        }
        let removed = !w.components[best.0].caption.iter().any(|c| c == target);
        let mask = &w.object_masks[target];
        let (mut sw, mut sa, mut n) = (0.0, 0.0, 0.0);
        for i in 0..mask.len() {
            if !mask[i] {
                sw += (t.windowed[i] - t.original[i]).powi(2);
                sa += (t.all_steps[i] - t.original[i]).powi(2);
                n += 1.0;
            }
        }
        let (mw, ma) = (sw / n, sa / n);
        let closer = if (mw - ma).abs() <= 1e-9 {
            Closer::Tie
        } else if mw < ma {
            Closer::Windowed
        } else {
            Closer::AllSteps
        };
        Verdict { removed, closer }
    }

    #[test]
    fn oracle_agrees_with_brute_force_on_random_triples() {
        let w = world();
        let mut r = rng::stream(77, 0, Role::Probe);
        for i in 0..1000 {
            let mut img = || {
                let k = r.random_range(0..4);
                let s = r.random_range(0.0..0.3);
                let z = rng::gaussian(&mut r, 256);
                w.components[k].mean_image.iter().zip(z).map(|(m, z)| m + s * z).collect::<Vec<_>>()
            };
            let original = img();
            let all_steps = img();
            let windowed = if i % 10 == 0 { all_steps.clone() } else { img() };
            let t = ImageTriple { original, all_steps, windowed };
            for target in ["square", "circle"] {
                assert_eq!(oracle_judge(&w, target, &t).unwrap(), brute(&w, target, &t));
            }
        }
    }

    #[test]
    fn metrics_examples() {
        let all = vec![trial(true, true, Closer::Tie); 4];
        let m = compute_metrics(&all).unwrap();
        assert_eq!((m.rsr_windowed, m.rsr_allsteps, m.rrsr), (1.0, 1.0, Some(1.0)));
        assert_eq!(m.cr, 0.5);

        let mixed = vec![
            trial(true, true, Closer::Windowed),
            trial(true, true, Closer::Windowed),
            trial(true, false, Closer::AllSteps),
            trial(false, true, Closer::Tie),
            trial(false, true, Closer::Windowed),
        ];
        let m = compute_metrics(&mixed).unwrap();
        assert_eq!(m.rsr_windowed, 0.6);
        assert_eq!(m.rsr_allsteps, 0.8);
        assert!((m.rrsr.unwrap() - 0.75).abs() < 1e-15);
        assert!((m.cr - 0.7).abs() < 1e-15);

        let never = vec![trial(true, false, Closer::Tie)];
        assert_eq!(compute_metrics(&never).unwrap().rrsr, None);
        assert!(compute_metrics(&[]).is_err());
    }

    proptest! {
        #[test]
        fn metrics_permutation_invariant_and_swap_complements_cr(
            raw in proptest::collection::vec((any::<bool>(), any::<bool>(), 0u8..3), 1..40),
            rot in 0usize..40,
        ) {
            let trials: Vec<TrialVerdict> = raw
                .iter()
                .map(|(a, b, c)| trial(*a, *b, [Closer::Windowed, Closer::AllSteps, Closer::Tie][*c as usize]))
                .collect();
            let m = compute_metrics(&trials).unwrap();
            let mut rotated = trials.clone();
            rotated.rotate_left(rot % trials.len());
            rotated.reverse();
            let mr = compute_metrics(&rotated).unwrap();
            prop_assert_eq!(m.n_trials, mr.n_trials);
            prop_assert_eq!(m.windowed_successes, mr.windowed_successes);
            prop_assert!((m.cr - mr.cr).abs() < 1e-12);
            let swapped: Vec<TrialVerdict> = trials.iter().map(|t| t.swapped()).collect();
            let ms = compute_metrics(&swapped).unwrap();
            prop_assert!((ms.cr - (1.0 - m.cr)).abs() < 1e-12);
        }
    }

    #[test]
    fn request_carries_pgm_payloads() {
        let w = world();
        let img = w.components[2].mean_image.clone();
        let t = ImageTriple {
            original: img.clone(),
            all_steps: img.clone(),
            windowed: img,
        };
        let req = JudgeRequest::new("circle", &t, 16, 16).unwrap();
        let json = serde_json::to_value(&req).unwrap();
        assert_eq!(json["task"], "removal_and_similarity");
        let pgm = BASE64.decode(req.windowed.as_bytes()).unwrap();
        assert!(pgm.starts_with(b"P5\n16 16\n255\n"));
    }

    #[test]
    fn verdict_schema_is_strict() {
        let v: Verdict = serde_json::from_str(r#"{"removed":true,"closer":"all_steps"}"#).unwrap();
        assert_eq!(v.closer, Closer::AllSteps);
        assert!(serde_json::from_str::<Verdict>(r#"{"removed":true,"closer":"maybe"}"#).is_err());
        assert!(serde_json::from_str::<Verdict>(r#"{"removed":"yes","closer":"tie"}"#).is_err());
        assert!(serde_json::from_str::<Verdict>(r#"{"closer":"tie"}"#).is_err());
    }
}
