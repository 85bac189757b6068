//! Exact denoiser for the scene mixture: ε is the true score of the noised
//! mixture restricted to (or tilted by) the prompt.

use super::{check_finite, AttentionLayer, AttentionStack, NoisePrediction, NoisePredictor, Prompt};
use crate::error::{Error, Result};
use crate::scene::{softmax, SceneWorld};
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone)]
pub struct AnalyticBackend {
    world: SceneWorld,
    fingerprint: String,
}

/// Per-call posterior quantities.
#[derive(Debug, Clone, PartialEq)]
pub struct Posterior {
    /// Responsibilities γ_k over all components (0 for excluded ones).
    pub responsibilities: Vec<f64>,
    /// E[x0 | x_t, prompt].
    pub mean_x0: Vec<f64>,
}

impl AnalyticBackend {
    pub fn new(world: SceneWorld) -> Self {
        let bytes = serde_json::to_vec(&world).unwrap_or_default();
        // FNV-1a over the serialised world
        let hash = bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
            (h ^ *b as u64).wrapping_mul(0x0100_0000_01b3)
        });
        Self {
            world,
            fingerprint: format!("analytic:{hash:016x}"),
        }
    }

    pub fn world(&self) -> &SceneWorld {
        &self.world
    }

    pub fn posterior(
        &self,
        schedule: &NoiseSchedule,
        x_t: &[f64],
        prompt: &Prompt,
        t: usize,
    ) -> Result<Posterior> {
        let w = &self.world;
        if x_t.len() != w.pixels() {
            return Err(Error::ShapeMismatch {
                expected: w.pixels(),
                actual: x_t.len(),
            });
        }
        let ab = schedule.alpha_bar(t)?;
        let sab = ab.sqrt();
        let s2 = w.sigma * w.sigma;
        let v = 1.0 - ab + ab * s2;
        let log_w = w.prompt_log_weights(prompt)?;
        let logits: Vec<f64> = w
            .components
            .iter()
            .zip(&log_w)
            .map(|(c, lw)| {
                if lw.is_infinite() {
                    return f64::NEG_INFINITY;
                }
                let d2: f64 = x_t
                    .iter()
                    .zip(&c.mean_image)
                    .map(|(x, m)| (x - sab * m).powi(2))
                    .sum();
                lw - d2 / (2.0 * v)
            })
            .collect();
        let gamma = softmax(&logits);
        check_finite(&gamma, "responsibilities")?;

        let shrink = sab * s2 / v;
        let mut mean_x0 = vec![0.0; x_t.len()];
        for (c, g) in w.components.iter().zip(&gamma) {
            if *g == 0.0 {
                continue;
            }
            for ((e, m), x) in mean_x0.iter_mut().zip(&c.mean_image).zip(x_t) {
                *e += g * (m + shrink * (x - sab * m));
            }
        }
        Ok(Posterior {
            responsibilities: gamma,
            mean_x0,
        })
    }

    /// Attention analog for each prompt token: the token's posterior mass
    /// times the pixelwise gap between its conditional blend and the full blend.
    fn attention(&self, prompt: &Prompt, gamma: &[f64]) -> AttentionStack {
        let w = &self.world;
        let blend = |members: &[usize]| -> Option<(f64, Vec<f64>)> {
            let mass: f64 = members.iter().map(|k| gamma[*k]).sum();
            if mass <= 0.0 {
                return None;
            }
            let mut out = vec![0.0; w.pixels()];
            for k in members {
                for (o, m) in out.iter_mut().zip(&w.components[*k].mean_image) {
                    *o += gamma[*k] * m / mass;
                }
            }
            Some((mass, out))
        };
        let all: Vec<usize> = (0..w.components.len()).collect();
        let (_, blend_all) = blend(&all).expect("responsibilities sum to one");
        let maps = prompt
            .tokens()
            .iter()
            .map(|tok| {
                let members: Vec<usize> = w
                    .components
                    .iter()
                    .filter(|c| prompt.is_empty() || c.has_token(tok))
                    .map(|c| c.id)
                    .collect();
                match blend(&members) {
                    Some((mass, b)) => b
                        .iter()
                        .zip(&blend_all)
                        .map(|(x, y)| mass * (x - y).abs())
                        .collect(),
                    None => vec![0.0; w.pixels()],
                }
            })
            .collect();
        AttentionStack {
            layers: vec![AttentionLayer {
                height: w.height,
                width: w.width,
                tokens: prompt.tokens().to_vec(),
                maps,
            }],
        }
    }
}

impl NoisePredictor for AnalyticBackend {
    fn predict(
        &self,
        schedule: &NoiseSchedule,
        x_t: &[f64],
        prompt: &Prompt,
        t: usize,
    ) -> Result<NoisePrediction> {
        let post = self.posterior(schedule, x_t, prompt, t)?;
        let ab = schedule.alpha_bar(t)?;
        let (sab, s1ab) = (ab.sqrt(), (1.0 - ab).sqrt());
        let eps: Vec<f64> = x_t
            .iter()
            .zip(&post.mean_x0)
            .map(|(x, e)| (x - sab * e) / s1ab)
            .collect();
        check_finite(&eps, "predicted noise")?;
        Ok(NoisePrediction {
            eps,
            attention: self.attention(prompt, &post.responsibilities),
        })
    }

    fn grid(&self) -> (usize, usize) {
        (self.world.height, self.world.width)
    }

    fn validate_prompt(&self, prompt: &Prompt) -> Result<()> {
        self.world.component_set(prompt).map(|_| ())
    }

    fn fingerprint(&self) -> String {
        self.fingerprint.clone()
    }
}
