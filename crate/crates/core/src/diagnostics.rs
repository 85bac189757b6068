//! Analysis instruments over recorded trajectories: attention strength ratio,
//! critical steps, inducing projections, momentum and the reverse-activation
//! sweep.

use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::{AttentionStack, NoisePredictor, Prompt};
use crate::error::{Error, Result};
use crate::eval::PresenceJudge;
use crate::image::write_csv;
use crate::sampler::{self, GuidanceConfig, Trajectory, Window};
use crate::schedule::NoiseSchedule;

/// Negative token → the positive token it is compared against.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenMap {
    pub pairs: BTreeMap<String, String>,
}

impl TokenMap {
    pub fn new<I, A, B>(pairs: I) -> Self
    where
        I: IntoIterator<Item = (A, B)>,
        A: Into<String>,
        B: Into<String>,
    {
        Self {
            pairs: pairs.into_iter().map(|(a, b)| (a.into(), b.into())).collect(),
        }
    }

    /// Every negative token is mapped and every target is in the positive prompt.
    pub fn validate(&self, positive: &Prompt, negative: &Prompt) -> Result<()> {
        for tok in negative.content_tokens() {
            let target = self
                .pairs
                .get(tok)
                .ok_or_else(|| Error::Diagnostic(format!("negative token {tok:?} is not mapped")))?;
            if !positive.tokens().contains(target) {
                return Err(Error::Diagnostic(format!(
                    "mapped token {target:?} is not in the positive prompt {positive}"
                )));
            }
        }
        for src in self.pairs.keys() {
            if !negative.tokens().contains(src) {
                return Err(Error::Diagnostic(format!(
                    "token {src:?} is not in the negative prompt {negative}"
                )));
            }
        }
        Ok(())
    }
}

/// Per-step values; `None` marks steps where the quantity is undefined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticCurve {
    pub name: String,
    pub steps: Vec<usize>,
    pub values: Vec<Option<f64>>,
}

impl DiagnosticCurve {
    pub fn new(name: impl Into<String>, steps: Vec<usize>, values: Vec<Option<f64>>) -> Self {
        debug_assert_eq!(steps.len(), values.len());
        Self {
            name: name.into(),
            steps,
            values,
        }
    }

    /// Curve over steps `0..values.len()` with every point defined.
    pub fn dense(name: impl Into<String>, values: &[f64]) -> Self {
        Self::new(name, (0..values.len()).collect(), values.iter().map(|v| Some(*v)).collect())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value_at(&self, step: usize) -> Option<f64> {
        self.steps
            .iter()
            .position(|s| *s == step)
            .and_then(|i| self.values[i])
    }

    /// Mean of the defined values at steps inside `window`.
    pub fn mean_over(&self, window: Window) -> Option<f64> {
        let vals: Vec<f64> = self
            .steps
            .iter()
            .zip(&self.values)
            .filter(|(s, _)| window.contains(**s))
            .filter_map(|(_, v)| *v)
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    /// Pointwise mean of several curves on the same step axis; a point is
    /// defined where at least one input defines it.
    pub fn average(name: impl Into<String>, curves: &[DiagnosticCurve]) -> Result<Self> {
        let first = curves
            .first()
            .ok_or_else(|| Error::Diagnostic("no curves to average".into()))?;
        if curves.iter().any(|c| c.steps != first.steps) {
            return Err(Error::Diagnostic("curves have different step axes".into()));
        }
        let values = (0..first.len())
            .map(|i| {
                let vals: Vec<f64> = curves.iter().filter_map(|c| c.values[i]).collect();
                (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
            })
            .collect();
        Ok(Self::new(name, first.steps.clone(), values))
    }

    /// `step,value` with a header; undefined points leave `value` empty.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        write_csv(
            out,
            &["step", "value"],
            self.steps
                .iter()
                .zip(&self.values)
                .map(|(s, v)| vec![Some(s.to_string()), v.map(|v| format!("{v:.10e}"))]),
        )
    }
}

fn frobenius(m: &[f64]) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Σ_layers ‖F_neg‖_F / Σ_layers ‖F_pos‖_F after resizing every layer to the
/// finest resolution present. `None` when the denominator is zero.
pub fn strength_ratio_at(
    neg_stack: &AttentionStack,
    neg_token: &str,
    pos_stack: &AttentionStack,
    pos_token: &str,
) -> Result<Option<f64>> {
    let (h, w) = [neg_stack.resolution(), pos_stack.resolution()]
        .into_iter()
        .flatten()
        .max_by_key(|(h, w)| h * w)
        .ok_or_else(|| Error::Diagnostic("empty attention stacks".into()))?;
    let norm_sum = |stack: &AttentionStack, tok: &str| -> Result<f64> {
        let maps = stack
            .token_maps(tok, h, w)
            .ok_or_else(|| Error::Diagnostic(format!("no attention map for token {tok:?}")))?;
        Ok(maps.iter().map(|m| frobenius(m)).sum())
    };
    let num = norm_sum(neg_stack, neg_token)?;
    let den = norm_sum(pos_stack, pos_token)?;
    Ok((den > 0.0).then(|| num / den))
}

/// One curve per negative token. Steps where the slot holds `∅` are undefined.
pub fn strength_ratio(traj: &Trajectory, token_map: &TokenMap) -> Result<Vec<DiagnosticCurve>> {
    token_map.validate(&traj.config.positive, &traj.config.negative)?;
    token_map
        .pairs
        .iter()
        .map(|(neg, pos)| {
            let values = traj
                .records
                .iter()
                .map(|r| {
                    if r.slot_is_negative {
                        strength_ratio_at(&r.attn_slot, neg, &r.attn_pos, pos)
                    } else {
                        Ok(None)
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(DiagnosticCurve::new(
                format!("strength_ratio:{neg}->{pos}"),
                traj.records.iter().map(|r| r.step).collect(),
                values,
            ))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CriticalMode {
    NounPeak,
    AdjectivePlateau,
}

/// `NounPeak`: step of the maximum (earliest on ties). `AdjectivePlateau`:
/// first step that starts a run of `plateau_len` consecutive values
/// `≥ threshold`. Undefined points never qualify.
pub fn critical_step(
    curve: &DiagnosticCurve,
    mode: CriticalMode,
    plateau_threshold: f64,
    plateau_len: usize,
) -> Option<usize> {
    match mode {
        CriticalMode::NounPeak => {
            let mut best: Option<(usize, f64)> = None;
            for (s, v) in curve.steps.iter().zip(&curve.values) {
                if let Some(v) = v {
                    if best.is_none_or(|(_, b)| *v > b) {
                        best = Some((*s, *v));
                    }
                }
            }
            best.map(|(s, _)| s)
        }
        CriticalMode::AdjectivePlateau => {
            let len = plateau_len.max(1);
            (0..curve.len()).find_map(|i| {
                let run = curve.values.get(i..i + len)?;
                run.iter()
                    .all(|v| v.is_some_and(|v| v >= plateau_threshold))
                    .then_some(curve.steps[i])
            })
        }
    }
}

/// Which noise prediction of a record to read attention from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    Positive,
    Guidance,
}

/// First step at which `token`'s attention mass inside `mask` exceeds its mass
/// outside it. Only steps where the token has a map are considered.
pub fn attention_onset(traj: &Trajectory, slot: Slot, token: &str, mask: &[bool]) -> Option<usize> {
    traj.records.iter().find_map(|r| {
        let stack = match slot {
            Slot::Positive => &r.attn_pos,
            Slot::Guidance => &r.attn_slot,
        };
        let map = stack.aggregate(token, traj.height, traj.width)?;
        let (mut inside, mut outside) = (0.0, 0.0);
        for (v, m) in map.iter().zip(mask) {
            if *m {
                inside += v;
            } else {
                outside += v;
            }
        }
        (inside > outside).then_some(r.step)
    })
}

/// Signed length of the projection of `v` onto `onto`; `None` if `onto` is 0.
pub fn projection_coefficient(v: &[f64], onto: &[f64]) -> Option<f64> {
    let n = frobenius(onto);
    (n > 0.0).then(|| dot(v, onto) / n)
}

/// Vector projection of `v` onto `onto` (zero vector if `onto` is 0).
pub fn project(v: &[f64], onto: &[f64]) -> Vec<f64> {
    let nn = dot(onto, onto);
    if nn == 0.0 {
        return vec![0.0; onto.len()];
    }
    let c = dot(v, onto) / nn;
    onto.iter().map(|o| c * o).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct InducingCurves {
    /// `P_Ind − P_Ori` projection lengths per step.
    pub d: DiagnosticCurve,
    pub p_ind: Vec<f64>,
    pub p_ori: Vec<f64>,
    pub p_ind_vectors: Vec<Vec<f64>>,
    pub p_ori_vectors: Vec<Vec<f64>>,
}

/// Projection series from explicit noise series. `with_neg` is `(ε+, ε−)` of
/// the run with the negative prompt applied, `without_neg` the same pair of
/// the run without it (ε− being the replayed probe).
pub fn inducing_from_series(
    with_neg: (&[Vec<f64>], &[Vec<f64>]),
    without_neg: (&[Vec<f64>], &[Vec<f64>]),
    steps: &[usize],
) -> Result<InducingCurves> {
    let n = steps.len();
    if [with_neg.0.len(), with_neg.1.len(), without_neg.0.len(), without_neg.1.len()]
        .iter()
        .any(|l| *l != n)
    {
        return Err(Error::Diagnostic("noise series lengths differ".into()));
    }
    let mut d = Vec::with_capacity(n);
    let mut out = InducingCurves {
        d: DiagnosticCurve::new("inducing_d", vec![], vec![]),
        p_ind: Vec::with_capacity(n),
        p_ori: Vec::with_capacity(n),
        p_ind_vectors: Vec::with_capacity(n),
        p_ori_vectors: Vec::with_capacity(n),
    };
    for i in 0..n {
        let zero = |run: &str| Error::Diagnostic(format!("zero-norm negative noise at step {} of run {run}", steps[i]));
        let ind = projection_coefficient(&with_neg.0[i], &with_neg.1[i]).ok_or_else(|| zero("with negative"))?;
        let ori = projection_coefficient(&without_neg.0[i], &without_neg.1[i]).ok_or_else(|| zero("without negative"))?;
        out.p_ind.push(ind);
        out.p_ori.push(ori);
        d.push(Some(ind - ori));
        out.p_ind_vectors.push(project(&with_neg.0[i], &with_neg.1[i]));
        out.p_ori_vectors.push(project(&without_neg.0[i], &without_neg.1[i]));
    }
    out.d = DiagnosticCurve::new("inducing_d", steps.to_vec(), d);
    Ok(out)
}

/// `run_with_neg` applies the negative prompt; `run_without_neg` shares its
/// seed, positive prompt, weight and sampler but keeps `∅` in the slot. The
/// negative noise of both runs is obtained by replaying the negative prompt
/// on their recorded states.
pub fn inducing_curves(
    run_with_neg: &Trajectory,
    run_without_neg: &Trajectory,
    backend: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
) -> Result<InducingCurves> {
    let (b, a) = (&run_with_neg.config, &run_without_neg.config);
    let mismatch = |what: &str| Err(Error::Diagnostic(format!("runs differ in {what}")));
    if run_with_neg.seed != run_without_neg.seed {
        return mismatch("seed");
    }
    if b.positive != a.positive || b.w != a.w || b.sampler != a.sampler {
        return mismatch("positive prompt, guidance weight or sampler");
    }
    if run_with_neg.steps() != run_without_neg.steps() {
        return mismatch("step count");
    }
    if b.negative.is_empty() || b.window.is_empty() {
        return Err(Error::Diagnostic("first run applies no negative prompt".into()));
    }
    if !(a.negative.is_empty() || a.window.is_empty()) {
        return Err(Error::Diagnostic("second run must keep ∅ in the slot".into()));
    }
    let probe = &b.negative;
    let neg_b: Vec<Vec<f64>> = sampler::replay_slot(run_with_neg, backend, schedule, probe)?
        .into_iter()
        .map(|p| p.eps)
        .collect();
    let neg_a: Vec<Vec<f64>> = sampler::replay_slot(run_without_neg, backend, schedule, probe)?
        .into_iter()
        .map(|p| p.eps)
        .collect();
    let pos_b: Vec<Vec<f64>> = run_with_neg.records.iter().map(|r| r.eps_pos.clone()).collect();
    let pos_a: Vec<Vec<f64>> = run_without_neg.records.iter().map(|r| r.eps_pos.clone()).collect();
    let steps: Vec<usize> = run_with_neg.records.iter().map(|r| r.step).collect();
    inducing_from_series((&pos_b, &neg_b), (&pos_a, &neg_a), &steps)
}

/// Cosine between consecutive entries; the value at step `i` compares
/// `series[i]` with `series[i − 1]`.
pub fn momentum_from_series(series: &[Vec<f64>]) -> Result<DiagnosticCurve> {
    if series.len() < 2 {
        return Err(Error::Diagnostic("momentum needs at least two steps".into()));
    }
    let values = series
        .windows(2)
        .map(|p| {
            let (na, nb) = (frobenius(&p[0]), frobenius(&p[1]));
            (na > 0.0 && nb > 0.0).then(|| (dot(&p[0], &p[1]) / (na * nb)).clamp(-1.0, 1.0))
        })
        .collect();
    Ok(DiagnosticCurve::new("momentum", (1..series.len()).collect(), values))
}

/// Cosine of consecutive applied (guided) noises; `steps − 1` points.
pub fn momentum_curve(traj: &Trajectory) -> Result<DiagnosticCurve> {
    let series: Vec<Vec<f64>> = traj.records.iter().map(|r| r.eps_combined.clone()).collect();
    momentum_from_series(&series)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub k: usize,
    pub presence: Vec<bool>,
    pub rate: f64,
    #[serde(skip)]
    pub images: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReverseActivationTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<SweepRow>,
}

impl ReverseActivationTable {
    pub fn rate(&self, k: usize) -> Option<f64> {
        self.rows.iter().find(|r| r.k == k).map(|r| r.rate)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        write_csv(
            out,
            &["k", "presence_rate", "present", "trials"],
            self.rows.iter().map(|r| {
                vec![
                    Some(r.k.to_string()),
                    Some(format!("{:.6}", r.rate)),
                    Some(r.presence.iter().filter(|p| **p).count().to_string()),
                    Some(r.presence.len().to_string()),
                ]
            }),
        )
    }
}

/// For `k = 0..=k_max`, runs every seed with the negative prompt on window
/// `[0, k)` and judges whether the object is present in the final image.
pub fn reverse_activation_sweep(
    backend: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    base: &GuidanceConfig,
    seeds: &[u64],
    k_max: usize,
    judge: &dyn PresenceJudge,
) -> Result<ReverseActivationTable> {
    if base.negative.is_empty() {
        return Err(Error::Diagnostic("reverse activation needs a negative prompt".into()));
    }
    if k_max > schedule.steps() {
        return Err(Error::Diagnostic(format!(
            "k_max {k_max} exceeds {} steps",
            schedule.steps()
        )));
    }
    let cells: Vec<(usize, u64)> = (0..=k_max)
        .flat_map(|k| seeds.iter().map(move |s| (k, *s)))
        .collect();
    let results: Vec<(Vec<f64>, bool)> = cells
        .par_iter()
        .map(|(k, seed)| {
            let mut cfg = base.clone();
            cfg.window = Window::new(0, *k);
            let img = sampler::sample_final(backend, schedule, &cfg, *seed)?;
            let present = judge.present(&img)?;
            Ok((img, present))
        })
        .collect::<Result<_>>()?;
    let mut it = results.into_iter();
    let rows = (0..=k_max)
        .map(|k| {
            let (images, presence): (Vec<_>, Vec<_>) = it.by_ref().take(seeds.len()).unzip();
            let rate = presence.iter().filter(|p| **p).count() as f64 / seeds.len().max(1) as f64;
            SweepRow {
                k,
                presence,
                rate,
                images,
            }
        })
        .collect();
    Ok(ReverseActivationTable {
        seeds: seeds.to_vec(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::AttentionLayer;
    use proptest::prelude::*;

    fn stack(tok: &str, maps: Vec<Vec<f64>>, side: usize) -> AttentionStack {
        AttentionStack {
            layers: maps
                .into_iter()
                .map(|m| AttentionLayer {
                    height: side,
                    width: side,
                    tokens: vec![tok.into()],
                    maps: vec![m],
                })
                .collect(),
        }
    }

    #[test]
    fn strength_ratio_examples() {
        let pos = stack("circle", vec![vec![2.0, 0.0, 0.0, 0.0]], 2);
        let neg = stack("circle", vec![vec![1.0; 4]], 2);
        assert_eq!(strength_ratio_at(&neg, "circle", &pos, "circle").unwrap(), Some(1.0));
        assert_eq!(strength_ratio_at(&pos, "circle", &pos, "circle").unwrap(), Some(1.0));
        let zero = stack("circle", vec![vec![0.0; 4]], 2);
        assert_eq!(strength_ratio_at(&zero, "circle", &pos, "circle").unwrap(), Some(0.0));
        assert_eq!(strength_ratio_at(&pos, "circle", &zero, "circle").unwrap(), None);
        assert!(strength_ratio_at(&neg, "square", &pos, "circle").is_err());
    }

    proptest! {
        #[test]
        fn strength_ratio_nonnegative_and_scale_invariant(
            a in proptest::collection::vec(0.0f64..5.0, 16),
            b in proptest::collection::vec(0.01f64..5.0, 16),
            c in 0.01f64..100.0,
        ) {
            let r = strength_ratio_at(&stack("x", vec![a.clone()], 4), "x", &stack("y", vec![b.clone()], 4), "y").unwrap().unwrap();
            prop_assert!(r >= 0.0);
            let sa: Vec<f64> = a.iter().map(|v| v * c).collect();
            let sb: Vec<f64> = b.iter().map(|v| v * c).collect();
            let r2 = strength_ratio_at(&stack("x", vec![sa], 4), "x", &stack("y", vec![sb], 4), "y").unwrap().unwrap();
            prop_assert!((r - r2).abs() <= 1e-9 * (1.0 + r));
        }

        #[test]
        fn momentum_bounded_and_scale_invariant(
            series in proptest::collection::vec(proptest::collection::vec(-3.0f64..3.0, 8), 2..8),
            scale in 0.001f64..1000.0,
        ) {
            let m = momentum_from_series(&series).unwrap();
            let scaled: Vec<Vec<f64>> = series.iter().map(|v| v.iter().map(|x| x * scale).collect()).collect();
            let ms = momentum_from_series(&scaled).unwrap();
            prop_assert_eq!(m.len(), series.len() - 1);
            for (a, b) in m.values.iter().zip(&ms.values) {
                if let (Some(a), Some(b)) = (a, b) {
                    prop_assert!((-1.0..=1.0).contains(a));
                    prop_assert!((a - b).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn projection_residual_is_orthogonal(
            v in proptest::collection::vec(-5.0f64..5.0, 12),
            onto in proptest::collection::vec(-5.0f64..5.0, 12),
        ) {
            prop_assume!(frobenius(&onto) > 1e-3);
            let p = project(&v, &onto);
            let resid: Vec<f64> = v.iter().zip(&p).map(|(a, b)| a - b).collect();
            let cos = dot(&resid, &onto) / (frobenius(&onto) * frobenius(&v).max(1e-12));
            prop_assert!(cos.abs() < 1e-6);
            let c = projection_coefficient(&v, &onto).unwrap();
            prop_assert!((frobenius(&p) - c.abs()).abs() < 1e-9 * (1.0 + c.abs()));
        }
    }

    #[test]
    fn critical_step_examples() {
        let c = DiagnosticCurve::dense("c", &[0.2, 0.9, 1.6, 1.1, 0.7]);
        assert_eq!(critical_step(&c, CriticalMode::NounPeak, 1.0, 3), Some(2));
        let c = DiagnosticCurve::dense("c", &[0.5, 0.6, 1.1, 1.2, 1.3]);
        assert_eq!(critical_step(&c, CriticalMode::AdjectivePlateau, 1.0, 3), Some(2));
        let c = DiagnosticCurve::dense("c", &[0.4; 6]);
        assert_eq!(critical_step(&c, CriticalMode::NounPeak, 1.0, 3), Some(0));
        assert_eq!(critical_step(&c, CriticalMode::AdjectivePlateau, 1.0, 3), None);
        let gaps = DiagnosticCurve::new("g", vec![3, 4, 5, 6], vec![None, Some(1.5), None, Some(0.2)]);
        assert_eq!(critical_step(&gaps, CriticalMode::NounPeak, 1.0, 1), Some(4));
        assert_eq!(critical_step(&gaps, CriticalMode::AdjectivePlateau, 1.0, 2), None);
        assert_eq!(critical_step(&DiagnosticCurve::dense("e", &[]), CriticalMode::NounPeak, 1.0, 3), None);
    }

    #[test]
    fn momentum_examples() {
        let e = vec![1.0, -2.0, 0.5];
        let m = momentum_from_series(&[e.clone(), e.clone(), e.clone()]).unwrap();
        assert!(m.values.iter().all(|v| (v.unwrap() - 1.0).abs() < 1e-12));
        let neg: Vec<f64> = e.iter().map(|v| -v).collect();
        let m = momentum_from_series(&[e.clone(), neg.clone(), e.clone(), neg]).unwrap();
        assert!(m.values.iter().all(|v| (v.unwrap() + 1.0).abs() < 1e-12));
        assert_eq!(m.steps, vec![1, 2, 3]);
        let z = momentum_from_series(&[e.clone(), vec![0.0; 3]]).unwrap();
        assert_eq!(z.values, vec![None]);
        assert!(momentum_from_series(&[e]).is_err());
    }

    #[test]
    fn inducing_examples() {
        let u = vec![vec![1.0, 2.0, 0.0]];
        let d = inducing_from_series((&u, &u), (&u, &u), &[0]).unwrap();
        assert_eq!(d.d.values, vec![Some(0.0)]);
        let a = vec![vec![1.0, 0.0, 0.0]];
        let b = vec![vec![0.0, 3.0, 0.0]];
        let d = inducing_from_series((&a, &b), (&b, &a), &[0]).unwrap();
        assert_eq!(d.d.values, vec![Some(0.0)]);
        // ε+ = (2, 1), ε− = (1, 0): coefficient 2; without: ε+ = (0, 1), coefficient 0
        let d = inducing_from_series(
            (&[vec![2.0, 1.0]], &[vec![1.0, 0.0]]),
            (&[vec![0.0, 1.0]], &[vec![1.0, 0.0]]),
            &[7],
        )
        .unwrap();
        assert_eq!(d.d.values, vec![Some(2.0)]);
        assert_eq!(d.p_ind_vectors[0], vec![2.0, 0.0]);
        assert!(inducing_from_series((&a, &[vec![0.0; 3]]), (&a, &a), &[0]).is_err());
    }

    #[test]
    fn token_map_validation() {
        let pos = Prompt::parse("square circle").unwrap();
        let neg = Prompt::parse("circle").unwrap();
        assert!(TokenMap::new([("circle", "circle")]).validate(&pos, &neg).is_ok());
        assert!(TokenMap::new([("circle", "cross")]).validate(&pos, &neg).is_err());
        assert!(TokenMap::default().validate(&pos, &neg).is_err());
        assert!(TokenMap::new([("circle", "square"), ("bright", "square")])
            .validate(&pos, &neg)
            .is_err());
    }

    #[test]
    fn curve_csv_and_means() {
        let c = DiagnosticCurve::new("c", vec![0, 1, 2], vec![Some(1.0), None, Some(3.0)]);
        let mut buf = Vec::new();
        c.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert!(text.starts_with("step,value\n0,"));
        assert!(text.contains("\n1,\n"));
        assert_eq!(c.mean_over(Window::new(0, 3)), Some(2.0));
        assert_eq!(c.mean_over(Window::new(1, 2)), None);
        let avg = DiagnosticCurve::average("a", &[c.clone(), DiagnosticCurve::dense("d", &[3.0, 2.0, 1.0])]).unwrap();
        assert_eq!(avg.values, vec![Some(2.0), Some(2.0), Some(2.0)]);
    }
}
