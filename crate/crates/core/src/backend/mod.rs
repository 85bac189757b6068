//! Noise predictors ε(x_t, prompt, t) and the data they return.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::resize_bilinear;
use crate::scene::EMPTY_TOKEN;
use crate::schedule::NoiseSchedule;

pub mod analytic;
pub mod neural;

pub use analytic::AnalyticBackend;
pub use neural::{ArchitectureManifest, NeuralDenoiser};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    Positive,
    Negative,
    Empty,
}

/// Ordered token list. The empty prompt is exactly `["∅"]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Prompt {
    tokens: Vec<String>,
    kind: PromptKind,
}

impl Prompt {
    pub fn empty() -> Self {
        Self {
            tokens: vec![EMPTY_TOKEN.to_string()],
            kind: PromptKind::Empty,
        }
    }

    /// Builds a prompt from tokens; an empty list or `["∅"]` gives the empty
    /// prompt regardless of `kind`.
    pub fn new<S: AsRef<str>>(tokens: &[S], kind: PromptKind) -> Result<Self> {
        let tokens: Vec<String> = tokens.iter().map(|t| t.as_ref().to_string()).collect();
        if tokens.is_empty() || tokens == [EMPTY_TOKEN] {
            return Ok(Self::empty());
        }
        if kind == PromptKind::Empty {
            return Err(Error::Prompt(format!("empty-kind prompt with tokens {tokens:?}")));
        }
        for (i, t) in tokens.iter().enumerate() {
            if t == EMPTY_TOKEN {
                return Err(Error::Prompt("∅ cannot be combined with other tokens".into()));
            }
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Prompt(format!("invalid token {t:?}")));
            }
            if tokens[..i].contains(t) {
                return Err(Error::Prompt(format!("duplicate token {t:?}")));
            }
        }
        Ok(Self { tokens, kind })
    }

    /// Whitespace-separated tokens as a positive prompt; `""` and `"∅"` are empty.
    pub fn parse(text: &str) -> Result<Self> {
        let tokens: Vec<&str> = text.split_whitespace().collect();
        Self::new(&tokens, PromptKind::Positive)
    }

    pub fn with_kind(mut self, kind: PromptKind) -> Self {
        if self.kind != PromptKind::Empty && kind != PromptKind::Empty {
            self.kind = kind;
        }
        self
    }

    pub fn kind(&self) -> PromptKind {
        self.kind
    }

    pub fn is_empty(&self) -> bool {
        self.kind == PromptKind::Empty
    }

    /// All tokens, `∅` included for the empty prompt.
    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Tokens other than `∅`.
    pub fn content_tokens(&self) -> impl Iterator<Item = &str> {
        self.tokens
            .iter()
            .map(String::as_str)
            .filter(|t| *t != EMPTY_TOKEN)
    }

    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }
}

impl fmt::Display for Prompt {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text())
    }
}

impl TryFrom<String> for Prompt {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        Self::parse(&s)
    }
}

impl From<Prompt> for String {
    fn from(p: Prompt) -> String {
        p.text()
    }
}

/// One layer of token maps at a fixed resolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionLayer {
    pub height: usize,
    pub width: usize,
    pub tokens: Vec<String>,
    /// One row-major `height × width` map per entry of `tokens`.
    pub maps: Vec<Vec<f64>>,
}

impl AttentionLayer {
    pub fn map(&self, token: &str) -> Option<&[f64]> {
        self.tokens
            .iter()
            .position(|t| t == token)
            .map(|i| self.maps[i].as_slice())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AttentionStack {
    pub layers: Vec<AttentionLayer>,
}

impl AttentionStack {
    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Every layer's map for `token`, resized to `height × width`.
    pub fn token_maps(&self, token: &str, height: usize, width: usize) -> Option<Vec<Vec<f64>>> {
        let maps: Vec<Vec<f64>> = self
            .layers
            .iter()
            .filter_map(|l| {
                l.map(token)
                    .map(|m| resize_bilinear(m, l.height, l.width, height, width))
            })
            .collect();
        (!maps.is_empty()).then_some(maps)
    }

    /// Layer-averaged map for `token` at `height × width`.
    pub fn aggregate(&self, token: &str, height: usize, width: usize) -> Option<Vec<f64>> {
        let maps = self.token_maps(token, height, width)?;
        let n = maps.len() as f64;
        let mut out = vec![0.0; height * width];
        for m in &maps {
            for (o, v) in out.iter_mut().zip(m) {
                *o += v / n;
            }
        }
        Some(out)
    }

    /// Finest resolution present in the stack.
    pub fn resolution(&self) -> Option<(usize, usize)> {
        self.layers
            .iter()
            .map(|l| (l.height, l.width))
            .max_by_key(|(h, w)| h * w)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoisePrediction {
    pub eps: Vec<f64>,
    pub attention: AttentionStack,
}

/// A noise predictor. Implementations are immutable once built, so one
/// instance can serve concurrent samplers.
pub trait NoisePredictor: Send + Sync {
    fn predict(
        &self,
        schedule: &NoiseSchedule,
        x_t: &[f64],
        prompt: &Prompt,
        t: usize,
    ) -> Result<NoisePrediction>;

    /// `(height, width)` of the state grid.
    fn grid(&self) -> (usize, usize);

    /// Rejects prompts the backend cannot evaluate.
    fn validate_prompt(&self, prompt: &Prompt) -> Result<()>;

    /// Identifies the backend instance; recorded in trajectories so replays
    /// can refuse a different backend.
    fn fingerprint(&self) -> String;

    fn dim(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }
}

pub(crate) fn check_finite(v: &[f64], what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite {
            step: 0,
            what: what.to_string(),
        })
    }
}
