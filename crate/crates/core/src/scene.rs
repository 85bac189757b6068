//! The toy visual world: object tokens, rendered component means and the
//! Gaussian mixture that makes every prompt's semantics exactly computable.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backend::Prompt;
use crate::container::{Tensor, TensorContainer};
use crate::error::{Error, Result};
use crate::rng::{self, Role};

/// Reserved token of the empty prompt.
pub const EMPTY_TOKEN: &str = "∅";

/// Sub-pixel samples per axis used for anti-aliased coverage.
pub const SUPERSAMPLE: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vocabulary {
    tokens: Vec<String>,
}

impl Vocabulary {
    pub fn new<I: IntoIterator<Item = String>>(names: I) -> Result<Self> {
        let mut tokens = vec![EMPTY_TOKEN.to_string()];
        for name in names {
            if name.trim().is_empty() || name.chars().any(char::is_whitespace) {
                return Err(Error::World(format!("invalid token name {name:?}")));
            }
            if tokens.contains(&name) {
                return Err(Error::World(format!("duplicate token {name:?}")));
            }
            tokens.push(name);
        }
        Ok(Self { tokens })
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn token_id(&self, name: &str) -> Result<usize> {
        self.tokens
            .iter()
            .position(|t| t == name)
            .ok_or_else(|| Error::UnknownToken(name.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum Shape {
    Square { half_size: f64 },
    Circle { radius: f64 },
    Cross { half_length: f64, half_width: f64 },
}

impl Shape {
    fn contains(&self, dx: f64, dy: f64) -> bool {
        match *self {
            Shape::Square { half_size } => dx.abs() <= half_size && dy.abs() <= half_size,
            Shape::Circle { radius } => dx * dx + dy * dy <= radius * radius,
            Shape::Cross {
                half_length,
                half_width,
            } => {
                (dx.abs() <= half_length && dy.abs() <= half_width)
                    || (dx.abs() <= half_width && dy.abs() <= half_length)
            }
        }
    }

    fn extent(&self) -> f64 {
        match *self {
            Shape::Square { half_size } => half_size,
            Shape::Circle { radius } => radius,
            Shape::Cross { half_length, .. } => half_length,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub name: String,
    #[serde(flatten)]
    pub shape: Shape,
    /// `[x, y]` in pixel units; placed from the world seed when absent.
    #[serde(default)]
    pub center: Option<[f64; 2]>,
    /// Object intensity; defaults to the world foreground.
    #[serde(default)]
    pub level: Option<f64>,
}

/// Appearance modifier: overrides background and/or object intensity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdjectiveSpec {
    pub name: String,
    #[serde(default)]
    pub background: Option<f64>,
    #[serde(default)]
    pub foreground: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentSpec {
    pub caption: Vec<String>,
    #[serde(default)]
    pub weight: Option<f64>,
}

/// How a prompt weights the mixture components.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Binding {
    /// Only components whose caption contains every prompt token.
    Superset,
    /// Every component, tilted by `exp(sharpness · covered_fraction)` where
    /// `covered_fraction` is the share of prompt tokens in the caption.
    /// Longer prompts bind each of their tokens more weakly.
    Coverage { sharpness: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    #[serde(default = "default_side")]
    pub height: usize,
    #[serde(default = "default_side")]
    pub width: usize,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    #[serde(default = "default_background")]
    pub background: f64,
    #[serde(default = "default_foreground")]
    pub foreground: f64,
    #[serde(default = "default_binding")]
    pub binding: Binding,
    pub objects: Vec<ObjectSpec>,
    #[serde(default)]
    pub adjectives: Vec<AdjectiveSpec>,
    pub components: Vec<ComponentSpec>,
}

fn default_side() -> usize {
    16
}
fn default_sigma() -> f64 {
    0.05
}
fn default_background() -> f64 {
    0.2
}
fn default_foreground() -> f64 {
    1.0
}
fn default_binding() -> Binding {
    Binding::Superset
}

impl WorldSpec {
    /// Blank / square / circle / square+circle on a 16×16 grid, superset binding.
    pub fn basic() -> Self {
        let caption = |c: &[&str]| ComponentSpec {
            caption: c.iter().map(|s| s.to_string()).collect(),
            weight: None,
        };
        Self {
            height: 16,
            width: 16,
            sigma: 0.05,
            background: 0.2,
            foreground: 1.0,
            binding: Binding::Superset,
            objects: vec![
                ObjectSpec {
                    name: "square".into(),
                    shape: Shape::Square { half_size: 2.5 },
                    center: Some([4.5, 8.0]),
                    level: None,
                },
                ObjectSpec {
                    name: "circle".into(),
                    shape: Shape::Circle { radius: 3.0 },
                    center: Some([11.5, 8.0]),
                    level: None,
                },
            ],
            adjectives: vec![],
            components: vec![
                caption(&[]),
                caption(&["square"]),
                caption(&["circle"]),
                caption(&["square", "circle"]),
            ],
        }
    }

    /// The world the experiments run in: circles only ever appear on a
    /// bright background, and prompts bind by token coverage.
    pub fn lab() -> Self {
        let caption = |c: &[&str]| ComponentSpec {
            caption: c.iter().map(|s| s.to_string()).collect(),
            weight: None,
        };
        let mut spec = Self::basic();
        spec.binding = Binding::Coverage { sharpness: 2.5 };
        spec.adjectives = vec![AdjectiveSpec {
            name: "bright".into(),
            background: Some(0.4),
            foreground: None,
        }];
        spec.components = vec![
            caption(&[]),
            caption(&["square"]),
            caption(&["bright"]),
            caption(&["square", "bright"]),
            caption(&["circle", "bright"]),
            caption(&["square", "circle", "bright"]),
        ];
        spec
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneComponent {
    pub id: usize,
    /// Token names in vocabulary order.
    pub caption: Vec<String>,
    pub mean_image: Vec<f64>,
    pub weight: f64,
}

impl SceneComponent {
    pub fn has_token(&self, token: &str) -> bool {
        self.caption.iter().any(|c| c == token)
    }
}

/// Posterior over components for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct Classification {
    pub component: usize,
    pub posterior: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneWorld {
    pub vocabulary: Vocabulary,
    pub components: Vec<SceneComponent>,
    pub sigma: f64,
    pub height: usize,
    pub width: usize,
    pub binding: Binding,
    pub object_masks: BTreeMap<String, Vec<bool>>,
}

/// Anti-aliased coverage of `shape` centred at `center` on an `h`×`w` grid.
pub fn rasterize(shape: &Shape, center: [f64; 2], height: usize, width: usize) -> Vec<f64> {
    let n = SUPERSAMPLE;
    let mut out = vec![0.0; height * width];
    for y in 0..height {
        for x in 0..width {
            let mut hits = 0;
            for sy in 0..n {
                for sx in 0..n {
                    let px = x as f64 + (sx as f64 + 0.5) / n as f64;
                    let py = y as f64 + (sy as f64 + 0.5) / n as f64;
                    if shape.contains(px - center[0], py - center[1]) {
                        hits += 1;
                    }
                }
            }
            out[y * width + x] = hits as f64 / (n * n) as f64;
        }
    }
    out
}

fn unit_interval(v: f64, what: &str) -> Result<f64> {
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(Error::World(format!("{what} {v} outside [0, 1]")))
    }
}

/// Builds the world deterministically from `(spec, seed)`; the seed only
/// places objects whose centre is not given.
pub fn build_world(spec: &WorldSpec, seed: u64) -> Result<SceneWorld> {
    let (h, w) = (spec.height, spec.width);
    if h < 8 || w < 8 {
        return Err(Error::World(format!("grid {h}x{w} smaller than 8x8")));
    }
    if !(spec.sigma > 0.0 && spec.sigma.is_finite()) {
        return Err(Error::World(format!("sigma must be positive, got {}", spec.sigma)));
    }
    if let Binding::Coverage { sharpness } = spec.binding {
        if !(sharpness >= 0.0 && sharpness.is_finite()) {
            return Err(Error::World(format!("bad binding sharpness {sharpness}")));
        }
    }
    unit_interval(spec.background, "background")?;
    unit_interval(spec.foreground, "foreground")?;
    if spec.components.len() < 2 {
        return Err(Error::World("need at least two components".into()));
    }
    let vocabulary = Vocabulary::new(
        spec.objects
            .iter()
            .map(|o| o.name.clone())
            .chain(spec.adjectives.iter().map(|a| a.name.clone())),
    )?;

    let mut placement = rng::stream(seed, 0, Role::Placement);
    let mut coverage: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut masks: BTreeMap<String, Vec<bool>> = BTreeMap::new();
    for obj in &spec.objects {
        if let Some(level) = obj.level {
            unit_interval(level, "object level")?;
        }
        let center = match obj.center {
            Some(c) => c,
            None => place(&obj.shape, h, w, &masks, &mut placement)?,
        };
        let cov = rasterize(&obj.shape, center, h, w);
        let mask: Vec<bool> = cov.iter().map(|c| *c > 0.0).collect();
        let area = mask.iter().filter(|m| **m).count() as f64 / (h * w) as f64;
        if !(0.01..=0.5).contains(&area) {
            return Err(Error::World(format!(
                "mask of {:?} covers {:.1}% of the grid, need 1%..50%",
                obj.name,
                area * 100.0
            )));
        }
        if let Some((other, _)) = masks
            .iter()
            .find(|(_, m)| m.iter().zip(&mask).any(|(a, b)| *a && *b))
        {
            return Err(Error::World(format!(
                "masks of {:?} and {other:?} overlap",
                obj.name
            )));
        }
        coverage.insert(obj.name.clone(), cov);
        masks.insert(obj.name.clone(), mask);
    }

    let mut seen = HashSet::new();
    let mut components = Vec::with_capacity(spec.components.len());
    for (id, comp) in spec.components.iter().enumerate() {
        let mut ids = Vec::new();
        for tok in &comp.caption {
            let tid = vocabulary.token_id(tok)?;
            if tid == 0 {
                return Err(Error::World("∅ cannot appear in a caption".into()));
            }
            if !ids.contains(&tid) {
                ids.push(tid);
            }
        }
        ids.sort_unstable();
        if !seen.insert(ids.clone()) {
            return Err(Error::World(format!("duplicate caption {:?}", comp.caption)));
        }
        let caption: Vec<String> = ids.iter().map(|i| vocabulary.tokens()[*i].clone()).collect();
        let weight = comp.weight.unwrap_or(1.0);
        if !(weight > 0.0 && weight.is_finite()) {
            return Err(Error::World(format!("component weight {weight} must be positive")));
        }
        let mean_image = render(spec, &caption, &coverage)?;
        components.push(SceneComponent {
            id,
            caption,
            mean_image,
            weight,
        });
    }
    let total: f64 = components.iter().map(|c| c.weight).sum();
    for c in &mut components {
        c.weight /= total;
    }

    Ok(SceneWorld {
        vocabulary,
        components,
        sigma: spec.sigma,
        height: h,
        width: w,
        binding: spec.binding,
        object_masks: masks,
    })
}

fn render(spec: &WorldSpec, caption: &[String], coverage: &BTreeMap<String, Vec<f64>>) -> Result<Vec<f64>> {
    let mut background = spec.background;
    let mut foreground = spec.foreground;
    for adj in spec.adjectives.iter().filter(|a| caption.contains(&a.name)) {
        if let Some(b) = adj.background {
            background = unit_interval(b, "adjective background")?;
        }
        if let Some(f) = adj.foreground {
            foreground = unit_interval(f, "adjective foreground")?;
        }
    }
    let mut img = vec![background; spec.height * spec.width];
    // masks are disjoint, so summing contributions equals max-compositing
    for obj in spec.objects.iter().filter(|o| caption.contains(&o.name)) {
        let level = obj.level.unwrap_or(foreground);
        for (p, c) in img.iter_mut().zip(&coverage[&obj.name]) {
            *p += (level - background) * c;
        }
    }
    Ok(img)
}

fn place(
    shape: &Shape,
    h: usize,
    w: usize,
    taken: &BTreeMap<String, Vec<bool>>,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<[f64; 2]> {
    let r = shape.extent() + 1.0;
    if 2.0 * r >= w.min(h) as f64 {
        return Err(Error::World("object too large to place".into()));
    }
    for _ in 0..1000 {
        let c = [
            rng.random_range(r..w as f64 - r),
            rng.random_range(r..h as f64 - r),
        ];
        let cov = rasterize(shape, c, h, w);
        let clash = taken
            .values()
            .any(|m| m.iter().zip(&cov).any(|(a, b)| *a && *b > 0.0));
        if !clash {
            return Ok(c);
        }
    }
    Err(Error::World("could not place object without overlap".into()))
}

impl SceneWorld {
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn mask(&self, token: &str) -> Result<&[bool]> {
        self.object_masks
            .get(token)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Judge(format!("token {token:?} has no object mask")))
    }

    fn check_prompt(&self, prompt: &Prompt) -> Result<()> {
        for t in prompt.tokens() {
            self.vocabulary.token_id(t)?;
        }
        Ok(())
    }

    /// Components whose caption contains every non-∅ prompt token.
    pub fn component_set(&self, prompt: &Prompt) -> Result<Vec<usize>> {
        self.check_prompt(prompt)?;
        let ids: Vec<usize> = self
            .components
            .iter()
            .filter(|c| prompt.content_tokens().all(|t| c.has_token(t)))
            .map(|c| c.id)
            .collect();
        if ids.is_empty() {
            return Err(Error::EmptyComponentSet(prompt.text()));
        }
        Ok(ids)
    }

    /// Per-component log prior under `prompt` (−∞ for excluded components).
    pub fn prompt_log_weights(&self, prompt: &Prompt) -> Result<Vec<f64>> {
        let members = self.component_set(prompt)?;
        let n_tokens = prompt.content_tokens().count();
        Ok(self
            .components
            .iter()
            .map(|c| {
                let log_pi = c.weight.ln();
                if n_tokens == 0 {
                    return log_pi;
                }
                match self.binding {
                    Binding::Superset if members.contains(&c.id) => log_pi,
                    Binding::Superset => f64::NEG_INFINITY,
                    Binding::Coverage { sharpness } => {
                        let hit = prompt.content_tokens().filter(|t| c.has_token(t)).count();
                        log_pi + sharpness * hit as f64 / n_tokens as f64
                    }
                }
            })
            .collect())
    }

    /// Posterior over components under the unconditional mixture with
    /// per-pixel variance σ². Ties go to the lowest id.
    pub fn classify(&self, image: &[f64]) -> Result<Classification> {
        if image.len() != self.pixels() {
            return Err(Error::ShapeMismatch {
                expected: self.pixels(),
                actual: image.len(),
            });
        }
        let var = self.sigma * self.sigma;
        let logits: Vec<f64> = self
            .components
            .iter()
            .map(|c| {
                let d2: f64 = image
                    .iter()
                    .zip(&c.mean_image)
                    .map(|(x, m)| (x - m) * (x - m))
                    .sum();
                c.weight.ln() - d2 / (2.0 * var)
            })
            .collect();
        let posterior = softmax(&logits);
        let mut component = 0;
        for (k, l) in logits.iter().enumerate() {
            if *l > logits[component] {
                component = k;
            }
        }
        Ok(Classification {
            component,
            posterior,
        })
    }

    /// Draws one `(component, image)` pair from the mixture.
    pub fn sample(&self, rng: &mut rand_chacha::ChaCha8Rng) -> (usize, Vec<f64>) {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut k = self.components.len() - 1;
        for c in &self.components {
            acc += c.weight;
            if u < acc {
                k = c.id;
                break;
            }
        }
        let noise = rng::gaussian(rng, self.pixels());
        let img = self.components[k]
            .mean_image
            .iter()
            .zip(noise)
            .map(|(m, z)| m + self.sigma * z)
            .collect();
        (k, img)
    }
}

/// Numerically stable softmax; `-inf` logits get probability 0.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// JSON sidecar describing an exported dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSidecar {
    pub vocabulary: Vec<String>,
    pub height: usize,
    pub width: usize,
    pub sigma: f64,
    pub component_captions: Vec<Vec<String>>,
    /// Caption of every exported sample, in tensor order.
    pub captions: Vec<Vec<String>>,
    /// `"train"` or `"val"` per sample.
    pub split: Vec<String>,
    pub seed: u64,
    /// Free-form provenance (schedule parameters and their hash).
    #[serde(default)]
    pub provenance: serde_json::Value,
}

/// Writes `n` mixture samples to `tensors_path` (NPDL1: `images` [N,H,W],
/// `component_ids` [N], `component_means` [K,H,W]) and a JSON sidecar.
pub fn export_dataset(
    world: &SceneWorld,
    n: usize,
    val_fraction: f64,
    seed: u64,
    provenance: serde_json::Value,
    tensors_path: &Path,
    sidecar_path: &Path,
) -> Result<DatasetSidecar> {
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::World(format!("val_fraction {val_fraction} outside [0, 1)")));
    }
    let (h, w) = (world.height, world.width);
    let mut images = Vec::with_capacity(n * h * w);
    let mut ids = Vec::with_capacity(n);
    let mut captions = Vec::with_capacity(n);
    for i in 0..n {
        let (k, img) = world.sample(&mut rng::stream(seed, i as u64, Role::Dataset));
        images.extend(img.iter().map(|v| *v as f32));
        ids.push(k as f32);
        captions.push(world.components[k].caption.clone());
    }
    let n_val = (n as f64 * val_fraction).round() as usize;
    let split = (0..n)
        .map(|i| if i >= n - n_val { "val" } else { "train" }.to_string())
        .collect();
    let means: Vec<f32> = world
        .components
        .iter()
        .flat_map(|c| c.mean_image.iter().map(|v| *v as f32))
        .collect();

    let mut container = TensorContainer::new();
    container.push(Tensor::new("images", vec![n, h, w], images)?)?;
    container.push(Tensor::new("component_ids", vec![n], ids)?)?;
    container.push(Tensor::new(
        "component_means",
        vec![world.components.len(), h, w],
        means,
    )?)?;
    container.write_file(tensors_path)?;

    let sidecar = DatasetSidecar {
        vocabulary: world.vocabulary.tokens().to_vec(),
        height: h,
        width: w,
        sigma: world.sigma,
        component_captions: world.components.iter().map(|c| c.caption.clone()).collect(),
        captions,
        split,
        seed,
        provenance,
    };
    std::fs::write(sidecar_path, serde_json::to_vec_pretty(&sidecar)?)?;
    Ok(sidecar)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn world() -> SceneWorld {
        build_world(&WorldSpec::basic(), 7).unwrap()
    }

    fn prompt(s: &str) -> Prompt {
        Prompt::parse(s).unwrap()
    }

    #[test]
    fn blank_component_is_constant_background() {
        let w = world();
        assert_eq!(w.components.len(), 4);
        assert!(w.components[0].mean_image.iter().all(|v| *v == 0.2));
        assert!(w.components[1].mean_image.iter().any(|v| *v > 0.9));
    }

    #[test]
    fn worlds_are_deterministic() {
        let mut spec = WorldSpec::basic();
        spec.objects[1].center = None;
        let a = serde_json::to_vec(&build_world(&spec, 11).unwrap()).unwrap();
        let b = serde_json::to_vec(&build_world(&spec, 11).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    /// Independent rasteriser: point-in-shape tests on the same sub-pixel grid,
    /// composited by pixelwise max over the background.
    #[test]
    fn composite_equals_pixelwise_max_of_single_objects() {
        let w = world();
        let cover = |inside: &dyn Fn(f64, f64) -> bool| {
            let mut out = vec![0.0; 256];
            for (i, o) in out.iter_mut().enumerate() {
                let (y, x) = ((i / 16) as f64, (i % 16) as f64);
                let mut n = 0;
                for a in 0..8 {
                    for b in 0..8 {
                        if inside(x + (b as f64 + 0.5) / 8.0, y + (a as f64 + 0.5) / 8.0) {
                            n += 1;
                        }
                    }
                }
                *o = n as f64 / 64.0;
            }
            out
        };
        let sq = cover(&|x, y| (x - 4.5).abs() <= 2.5 && (y - 8.0).abs() <= 2.5);
        let ci = cover(&|x, y| (x - 11.5).powi(2) + (y - 8.0).powi(2) <= 9.0);
        for i in 0..256 {
            let m_sq = 0.2 + 0.8 * sq[i];
            let m_ci = 0.2 + 0.8 * ci[i];
            assert!((w.components[1].mean_image[i] - m_sq).abs() < 1e-12);
            assert!((w.components[2].mean_image[i] - m_ci).abs() < 1e-12);
            assert!((w.components[3].mean_image[i] - m_sq.max(m_ci)).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_specs() {
        let mut s = WorldSpec::basic();
        s.components[1].caption = vec!["triangle".into()];
        assert!(matches!(build_world(&s, 0), Err(Error::UnknownToken(_))));

        let mut s = WorldSpec::basic();
        s.objects[1].center = Some([6.0, 8.0]);
        assert!(build_world(&s, 0).is_err(), "overlap must be rejected");

        let mut s = WorldSpec::basic();
        s.components.truncate(1);
        assert!(build_world(&s, 0).is_err());

        let mut s = WorldSpec::basic();
        s.height = 4;
        assert!(build_world(&s, 0).is_err());

        let mut s = WorldSpec::basic();
        s.components[2].caption = vec!["square".into()];
        assert!(build_world(&s, 0).is_err(), "duplicate captions");

        let mut s = WorldSpec::basic();
        s.objects[0].shape = Shape::Square { half_size: 0.1 };
        assert!(build_world(&s, 0).is_err(), "mask below 1%");
    }

    #[test]
    fn masks_within_area_bounds_and_weights_normalised() {
        for spec in [WorldSpec::basic(), WorldSpec::lab()] {
            let w = build_world(&spec, 0).unwrap();
            for m in w.object_masks.values() {
                let frac = m.iter().filter(|b| **b).count() as f64 / m.len() as f64;
                assert!((0.01..=0.5).contains(&frac));
            }
            let total: f64 = w.components.iter().map(|c| c.weight).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn component_set_superset_rule() {
        let w = world();
        assert_eq!(w.component_set(&Prompt::empty()).unwrap(), vec![0, 1, 2, 3]);
        assert_eq!(w.component_set(&prompt("circle")).unwrap(), vec![2, 3]);
        assert_eq!(w.component_set(&prompt("square circle")).unwrap(), vec![3]);
        assert!(matches!(
            w.component_set(&prompt("triangle")),
            Err(Error::UnknownToken(_))
        ));
        let lab = build_world(&WorldSpec::lab(), 0).unwrap();
        assert!(matches!(
            lab.component_set(&prompt("circle square")).map(|v| v.len()),
            Ok(1)
        ));
    }

    #[test]
    fn empty_component_set_is_an_error() {
        let mut spec = WorldSpec::basic();
        spec.components.pop();
        let w = build_world(&spec, 0).unwrap();
        assert!(matches!(
            w.component_set(&prompt("square circle")),
            Err(Error::EmptyComponentSet(_))
        ));
    }

    #[test]
    fn classify_mean_image_with_brute_force_density() {
        let w = world();
        for k in 0..4 {
            let c = w.classify(&w.components[k].mean_image).unwrap();
            assert_eq!(c.component, k);
            assert!(c.posterior[k] > 0.99);
            // brute force: direct Gaussian densities, normalised
            let dens: Vec<f64> = w
                .components
                .iter()
                .map(|c2| {
                    let d2: f64 = w.components[k]
                        .mean_image
                        .iter()
                        .zip(&c2.mean_image)
                        .map(|(a, b)| (a - b).powi(2))
                        .sum();
                    c2.weight * (-d2 / (2.0 * 0.05f64.powi(2))).exp()
                })
                .collect();
            let z: f64 = dens.iter().sum();
            for j in 0..4 {
                assert!((c.posterior[j] - dens[j] / z).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn classify_equidistant_image_ties_to_lower_id() {
        let w = world();
        let mid: Vec<f64> = w.components[0]
            .mean_image
            .iter()
            .zip(&w.components[1].mean_image)
            .map(|(a, b)| 0.5 * (a + b))
            .collect();
        let mut spec = WorldSpec::basic();
        spec.components.truncate(2);
        let two = build_world(&spec, 7).unwrap();
        let c = two.classify(&mid).unwrap();
        assert_eq!(c.component, 0);
        assert!((c.posterior[0] - 0.5).abs() < 1e-12);
        assert!(w.classify(&[0.0; 3]).is_err());
    }

    #[test]
    fn classify_posterior_normalised_under_heavy_noise() {
        let w = world();
        let mut r = rng::stream(1, 0, Role::Probe);
        for k in 0..4 {
            let noise = rng::gaussian(&mut r, 256);
            let img: Vec<f64> = w.components[k]
                .mean_image
                .iter()
                .zip(noise)
                .map(|(m, z)| m + 0.15 * z)
                .collect();
            let c = w.classify(&img).unwrap();
            assert!((c.posterior.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn coverage_binding_dilutes_longer_prompts() {
        let w = build_world(&WorldSpec::lab(), 0).unwrap();
        let p_circle = |p: &str| {
            let lw = w.prompt_log_weights(&prompt(p)).unwrap();
            let probs = softmax(&lw);
            w.components
                .iter()
                .filter(|c| c.has_token("circle"))
                .map(|c| probs[c.id])
                .sum::<f64>()
        };
        assert!(p_circle("circle") > p_circle("square circle"));
        let sup = world().prompt_log_weights(&prompt("circle")).unwrap();
        assert!(sup[0].is_infinite() && sup[1].is_infinite());
    }

    #[test]
    fn export_dataset_writes_container_and_sidecar() {
        let w = world();
        let dir = tempfile::tempdir().unwrap();
        let (t, s) = (dir.path().join("d.npdl"), dir.path().join("d.json"));
        let side = export_dataset(&w, 20, 0.25, 3, serde_json::json!({"x": 1}), &t, &s).unwrap();
        assert_eq!(side.captions.len(), 20);
        assert_eq!(side.split.iter().filter(|s| *s == "val").count(), 5);
        let c = TensorContainer::read_file(&t).unwrap();
        assert_eq!(c.get("images").unwrap().shape, vec![20, 16, 16]);
        let again = tempfile::tempdir().unwrap();
        let t2 = again.path().join("d.npdl");
        export_dataset(&w, 20, 0.25, 3, serde_json::json!({"x": 1}), &t2, &again.path().join("d.json")).unwrap();
        assert_eq!(std::fs::read(&t).unwrap(), std::fs::read(&t2).unwrap());
    }
}
