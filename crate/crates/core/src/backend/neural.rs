//! Small token-conditioned denoiser with one cross-attention block.
//!
//! Graph (channels `c0, c1, c2`, all 3×3 convs with padding 1):
//!
//! ```text
//! x ─ conv(1→c0) + τ0 ─ silu ─ h0 ─ conv/2(c0→c1) + τ1 ─ silu ─ h1 ─ conv/2(c1→c2) + τ2 ─ silu ─ h2
//! h2 ─ h2 + cross_attn(h2, tokens) ─ conv(c2→c1) ─ silu ─ up2 + h1 ─ conv(c1→c0) ─ silu ─ up2 + h0 ─ conv(c0→1) ─ ε
//! ```
//!
//! `τi` is a linear projection of a sinusoidal embedding of `t`. Everything
//! runs in f32; the state crosses the trait boundary as f64.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AttentionLayer, AttentionStack, NoisePrediction, NoisePredictor, Prompt};
use crate::container::{Tensor, TensorContainer};
use crate::error::{Error, Result};
use crate::image::resize_bilinear;
use crate::rng::{self, Role};
use crate::scene::EMPTY_TOKEN;
use crate::schedule::NoiseSchedule;

/// Hyperparameters shared with the trainer. Both sides derive tensor names
/// and shapes from this file alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureManifest {
    pub format: String,
    pub version: u32,
    pub height: usize,
    pub width: usize,
    pub channels: [usize; 3],
    pub heads: usize,
    pub embed_dim: usize,
    pub time_dim: usize,
    /// Token table; index 0 must be `∅`.
    pub vocabulary: Vec<String>,
}

pub const MANIFEST_FORMAT: &str = "npdl-denoiser";

impl ArchitectureManifest {
    pub fn new(vocabulary: Vec<String>, height: usize, width: usize) -> Self {
        Self {
            format: MANIFEST_FORMAT.into(),
            version: 1,
            height,
            width,
            channels: [16, 32, 64],
            heads: 4,
            embed_dim: 32,
            time_dim: 32,
            vocabulary,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Weights(m));
        if self.format != MANIFEST_FORMAT || self.version != 1 {
            return bad(format!("unknown architecture {} v{}", self.format, self.version));
        }
        if !self.height.is_multiple_of(4) || !self.width.is_multiple_of(4) || self.height == 0 || self.width == 0 {
            return bad(format!("grid {}x{} not divisible by 4", self.height, self.width));
        }
        if self.channels.contains(&0) || self.heads == 0 || !self.channels[2].is_multiple_of(self.heads) {
            return bad(format!("{} heads do not divide {} channels", self.heads, self.channels[2]));
        }
        if self.time_dim == 0 || !self.time_dim.is_multiple_of(2) || self.embed_dim == 0 {
            return bad("time_dim must be even and embed_dim positive".into());
        }
        if self.vocabulary.first().map(String::as_str) != Some(EMPTY_TOKEN) {
            return bad("vocabulary must start with ∅".into());
        }
        Ok(())
    }

    /// Canonical tensor order and shapes.
    pub fn tensor_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let [c0, c1, c2] = self.channels;
        let (td, ed) = (self.time_dim, self.embed_dim);
        let conv = |name: &str, cout: usize, cin: usize| {
            vec![
                (format!("{name}.weight"), vec![cout, cin, 3, 3]),
                (format!("{name}.bias"), vec![cout]),
            ]
        };
        let linear = |name: &str, out: usize, inp: usize| {
            vec![
                (format!("{name}.weight"), vec![out, inp]),
                (format!("{name}.bias"), vec![out]),
            ]
        };
        let mut v = Vec::new();
        v.extend(conv("enc0", c0, 1));
        v.extend(conv("enc1", c1, c0));
        v.extend(conv("enc2", c2, c1));
        v.extend(linear("time0", c0, td));
        v.extend(linear("time1", c1, td));
        v.extend(linear("time2", c2, td));
        v.push(("token_embedding".into(), vec![self.vocabulary.len(), ed]));
        v.push(("attn.q.weight".into(), vec![c2, c2]));
        v.push(("attn.k.weight".into(), vec![c2, ed]));
        v.push(("attn.v.weight".into(), vec![c2, ed]));
        v.extend(linear("attn.out", c2, c2));
        v.extend(conv("dec2", c1, c2));
        v.extend(conv("dec1", c0, c1));
        v.extend(conv("out", 1, c0));
        v
    }

    pub fn parameter_count(&self) -> usize {
        self.tensor_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }

    pub fn read(path: &Path) -> Result<Self> {
        let m: Self = serde_json::from_slice(&std::fs::read(path)?)?;
        m.validate()?;
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct NeuralDenoiser {
    manifest: ArchitectureManifest,
    params: BTreeMap<String, Vec<f32>>,
    fingerprint: String,
}

/// Raw forward-pass output.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub eps: Vec<f32>,
    /// Softmax weights `[heads][positions][tokens]`, before any aggregation.
    pub attention: Vec<f32>,
    pub positions: usize,
    pub tokens: usize,
}

fn fnv(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ *b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

impl NeuralDenoiser {
    /// Checks every tensor against the manifest; missing, extra or
    /// misshapen tensors are errors.
    pub fn from_container(manifest: ArchitectureManifest, container: &TensorContainer) -> Result<Self> {
        manifest.validate()?;
        let shapes = manifest.tensor_shapes();
        let mut params = BTreeMap::new();
        for (name, shape) in &shapes {
            let t = container
                .get(name)
                .ok_or_else(|| Error::Weights(format!("missing tensor {name:?}")))?;
            if &t.shape != shape {
                return Err(Error::Weights(format!(
                    "tensor {name:?} has shape {:?}, architecture needs {shape:?}",
                    t.shape
                )));
            }
            if t.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::Weights(format!("tensor {name:?} has non-finite values")));
            }
            params.insert(name.clone(), t.data.clone());
        }
        if let Some(extra) = container
            .tensors()
            .iter()
            .find(|t| !shapes.iter().any(|(n, _)| *n == t.name))
        {
            return Err(Error::Weights(format!("unexpected tensor {:?}", extra.name)));
        }
        let mut model = Self {
            manifest,
            params,
            fingerprint: String::new(),
        };
        model.fingerprint = format!("neural:{:016x}", fnv(&model.to_container().to_bytes()));
        Ok(model)
    }

    /// Seeded initialisation: weights ~ N(0, 1/fan_in), biases 0, token
    /// embeddings ~ N(0, 1).
    pub fn init_random(manifest: ArchitectureManifest, seed: u64) -> Result<Self> {
        let mut rng = rng::stream(seed, 0, Role::Weights);
        let mut c = TensorContainer::new();
        for (name, shape) in manifest.tensor_shapes() {
            let n: usize = shape.iter().product();
            let data = if name.ends_with(".bias") {
                vec![0.0; n]
            } else {
                let scale = if name == "token_embedding" {
                    1.0
                } else {
                    1.0 / (shape[1..].iter().product::<usize>() as f64).sqrt()
                };
                rng::gaussian(&mut rng, n)
                    .into_iter()
                    .map(|z| (z * scale) as f32)
                    .collect()
            };
            c.push(Tensor::new(name, shape, data)?)?;
        }
        Self::from_container(manifest, &c)
    }

    pub fn zeros(manifest: ArchitectureManifest) -> Result<Self> {
        let mut c = TensorContainer::new();
        for (name, shape) in manifest.tensor_shapes() {
            let n = shape.iter().product();
            c.push(Tensor::new(name, shape, vec![0.0; n])?)?;
        }
        Self::from_container(manifest, &c)
    }

    pub fn load_weights(manifest: ArchitectureManifest, path: &Path) -> Result<Self> {
        Self::from_container(manifest, &TensorContainer::read_file(path)?)
    }

    pub fn save_weights(&self, path: &Path) -> Result<()> {
        self.to_container().write_file(path)
    }

    pub fn to_container(&self) -> TensorContainer {
        let mut c = TensorContainer::new();
        for (name, shape) in self.manifest.tensor_shapes() {
            let data = self.params[&name].clone();
            c.push(Tensor { name, shape, data }).expect("names are unique");
        }
        c
    }

    pub fn manifest(&self) -> &ArchitectureManifest {
        &self.manifest
    }

    fn p(&self, name: &str) -> &[f32] {
        &self.params[name]
    }

    fn token_ids(&self, prompt: &Prompt) -> Result<Vec<usize>> {
        prompt
            .tokens()
            .iter()
            .map(|t| {
                self.manifest
                    .vocabulary
                    .iter()
                    .position(|v| v == t)
                    .ok_or_else(|| Error::UnknownToken(t.clone()))
            })
            .collect()
    }

    pub fn forward(&self, x: &[f32], prompt: &Prompt, t: usize) -> Result<ForwardOutput> {
        let m = &self.manifest;
        let (h, w) = (m.height, m.width);
        if x.len() != h * w {
            return Err(Error::ShapeMismatch {
                expected: h * w,
                actual: x.len(),
            });
        }
        let ids = self.token_ids(prompt)?;
        let [c0, c1, c2] = m.channels;
        let temb = sinusoidal(t as f32, m.time_dim);

        let mut h0 = conv3x3(x, 1, h, w, self.p("enc0.weight"), self.p("enc0.bias"), c0, 1);
        add_channel_bias(&mut h0, &linear(&temb, self.p("time0.weight"), self.p("time0.bias"), c0));
        silu(&mut h0);
        let (h1s, w1s) = (h / 2, w / 2);
        let mut h1 = conv3x3(&h0, c0, h, w, self.p("enc1.weight"), self.p("enc1.bias"), c1, 2);
        add_channel_bias(&mut h1, &linear(&temb, self.p("time1.weight"), self.p("time1.bias"), c1));
        silu(&mut h1);
        let (h2s, w2s) = (h1s / 2, w1s / 2);
        let mut h2 = conv3x3(&h1, c1, h1s, w1s, self.p("enc2.weight"), self.p("enc2.bias"), c2, 2);
        add_channel_bias(&mut h2, &linear(&temb, self.p("time2.weight"), self.p("time2.bias"), c2));
        silu(&mut h2);

        let positions = h2s * w2s;
        let attention = self.cross_attention(&mut h2, positions, &ids);

        let mut d2 = conv3x3(&h2, c2, h2s, w2s, self.p("dec2.weight"), self.p("dec2.bias"), c1, 1);
        silu(&mut d2);
        let mut u1 = upsample2(&d2, c1, h2s, w2s);
        u1.iter_mut().zip(&h1).for_each(|(a, b)| *a += b);
        let mut d1 = conv3x3(&u1, c1, h1s, w1s, self.p("dec1.weight"), self.p("dec1.bias"), c0, 1);
        silu(&mut d1);
        let mut u0 = upsample2(&d1, c0, h1s, w1s);
        u0.iter_mut().zip(&h0).for_each(|(a, b)| *a += b);
        let eps = conv3x3(&u0, c0, h, w, self.p("out.weight"), self.p("out.bias"), 1, 1);

        Ok(ForwardOutput {
            eps,
            attention,
            positions,
            tokens: ids.len(),
        })
    }

    /// Residual multi-head cross-attention on `feat` (`[c2][positions]`);
    /// returns the softmax weights `[heads][positions][tokens]`.
    fn cross_attention(&self, feat: &mut [f32], positions: usize, ids: &[usize]) -> Vec<f32> {
        let m = &self.manifest;
        let (c, ed, heads) = (m.channels[2], m.embed_dim, m.heads);
        let dh = c / heads;
        let n_tok = ids.len();
        let table = self.p("token_embedding");
        let embeds: Vec<&[f32]> = ids.iter().map(|i| &table[i * ed..(i + 1) * ed]).collect();
        let project = |wname: &str, e: &[f32]| -> Vec<f32> {
            let wt = self.p(wname);
            (0..c)
                .map(|o| wt[o * ed..(o + 1) * ed].iter().zip(e).map(|(a, b)| a * b).sum())
                .collect()
        };
        let keys: Vec<Vec<f32>> = embeds.iter().map(|e| project("attn.k.weight", e)).collect();
        let values: Vec<Vec<f32>> = embeds.iter().map(|e| project("attn.v.weight", e)).collect();
        let (wq, wo, bo) = (self.p("attn.q.weight"), self.p("attn.out.weight"), self.p("attn.out.bias"));
        let scale = 1.0 / (dh as f32).sqrt();
        let mut probs = vec![0.0f32; heads * positions * n_tok];
        let mut update = vec![0.0f32; c * positions];
        for p in 0..positions {
            let col: Vec<f32> = (0..c).map(|ch| feat[ch * positions + p]).collect();
            let q: Vec<f32> = (0..c)
                .map(|o| wq[o * c..(o + 1) * c].iter().zip(&col).map(|(a, b)| a * b).sum())
                .collect();
            let mut mixed = vec![0.0f32; c];
            for hd in 0..heads {
                let span = hd * dh..(hd + 1) * dh;
                let logits: Vec<f32> = keys
                    .iter()
                    .map(|k| q[span.clone()].iter().zip(&k[span.clone()]).map(|(a, b)| a * b).sum::<f32>() * scale)
                    .collect();
                let mx = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                let ex: Vec<f32> = logits.iter().map(|l| (l - mx).exp()).collect();
                let z: f32 = ex.iter().sum();
                for (l, e) in ex.iter().enumerate() {
                    let a = e / z;
                    probs[(hd * positions + p) * n_tok + l] = a;
                    for ch in span.clone() {
                        mixed[ch] += a * values[l][ch];
                    }
                }
            }
            for o in 0..c {
                let v: f32 = wo[o * c..(o + 1) * c].iter().zip(&mixed).map(|(a, b)| a * b).sum();
                update[o * positions + p] = v + bo[o];
            }
        }
        feat.iter_mut().zip(&update).for_each(|(f, u)| *f += u);
        probs
    }
}

fn sinusoidal(t: f32, dim: usize) -> Vec<f32> {
    let half = dim / 2;
    let freqs: Vec<f32> = (0..half)
        .map(|j| (-(10000f32.ln()) * j as f32 / half as f32).exp())
        .collect();
    freqs
        .iter()
        .map(|f| (t * f).sin())
        .chain(freqs.iter().map(|f| (t * f).cos()))
        .collect()
}

fn linear(x: &[f32], weight: &[f32], bias: &[f32], out: usize) -> Vec<f32> {
    let n = x.len();
    (0..out)
        .map(|o| bias[o] + weight[o * n..(o + 1) * n].iter().zip(x).map(|(a, b)| a * b).sum::<f32>())
        .collect()
}

fn add_channel_bias(feat: &mut [f32], per_channel: &[f32]) {
    let plane = feat.len() / per_channel.len();
    for (ch, b) in per_channel.iter().enumerate() {
        feat[ch * plane..(ch + 1) * plane].iter_mut().for_each(|v| *v += b);
    }
}

fn silu(v: &mut [f32]) {
    v.iter_mut().for_each(|x| *x /= 1.0 + (-*x).exp());
}

#[allow(clippy::too_many_arguments)]
fn conv3x3(
    input: &[f32],
    cin: usize,
    h: usize,
    w: usize,
    weight: &[f32],
    bias: &[f32],
    cout: usize,
    stride: usize,
) -> Vec<f32> {
    let (oh, ow) = ((h - 1) / stride + 1, (w - 1) / stride + 1);
    let mut out = vec![0.0f32; cout * oh * ow];
    for o in 0..cout {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = bias[o];
                for i in 0..cin {
                    let kernel = &weight[(o * cin + i) * 9..(o * cin + i + 1) * 9];
                    for ky in 0..3 {
                        let iy = (oy * stride + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let ix = (ox * stride + kx) as isize - 1;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc += kernel[ky * 3 + kx] * input[(i * h + iy as usize) * w + ix as usize];
                        }
                    }
                }
                out[(o * oh + oy) * ow + ox] = acc;
            }
        }
    }
    out
}

fn upsample2(input: &[f32], c: usize, h: usize, w: usize) -> Vec<f32> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0f32; c * oh * ow];
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                out[(ch * oh + y) * ow + x] = input[(ch * h + y / 2) * w + x / 2];
            }
        }
    }
    out
}

impl NoisePredictor for NeuralDenoiser {
    fn predict(
        &self,
        schedule: &NoiseSchedule,
        x_t: &[f64],
        prompt: &Prompt,
        t: usize,
    ) -> Result<NoisePrediction> {
        schedule.alpha_bar(t)?;
        let x: Vec<f32> = x_t.iter().map(|v| *v as f32).collect();
        let out = self.forward(&x, prompt, t)?;
        let m = &self.manifest;
        let (ah, aw) = (m.height / 4, m.width / 4);
        let maps = (0..out.tokens)
            .map(|l| {
                let low: Vec<f64> = (0..out.positions)
                    .map(|p| {
                        (0..m.heads)
                            .map(|hd| out.attention[(hd * out.positions + p) * out.tokens + l] as f64)
                            .sum::<f64>()
                            / m.heads as f64
                    })
                    .collect();
                resize_bilinear(&low, ah, aw, m.height, m.width)
            })
            .collect();
        let eps: Vec<f64> = out.eps.iter().map(|v| *v as f64).collect();
        super::check_finite(&eps, "neural noise prediction")?;
        Ok(NoisePrediction {
            eps,
            attention: AttentionStack {
                layers: vec![AttentionLayer {
                    height: m.height,
                    width: m.width,
                    tokens: prompt.tokens().to_vec(),
                    maps,
                }],
            },
        })
    }

    fn grid(&self) -> (usize, usize) {
        (self.manifest.height, self.manifest.width)
    }

    fn validate_prompt(&self, prompt: &Prompt) -> Result<()> {
        self.token_ids(prompt).map(|_| ())
    }

    fn fingerprint(&self) -> String {
        self.fingerprint.clone()
    }
}
