//! Synthetic reference sets: each concept is 4-6 samples bound to a token,
//! plus context transforms that play the role of prompt edits.

use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{RngStream, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Mixture2d,
    Glyph,
}

impl Domain {
    pub fn name(self) -> &'static str {
        match self {
            Domain::Mixture2d => "mixture2d",
            Domain::Glyph => "glyph",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "mixture2d" => Ok(Domain::Mixture2d),
            "glyph" => Ok(Domain::Glyph),
            other => Err(Error::DatasetFormat(format!("unknown domain `{other}`"))),
        }
    }

    /// Valid value range; context transforms clamp into it.
    pub fn value_range(self) -> (f64, f64) {
        match self {
            Domain::Mixture2d => (-MIXTURE_BOUND, MIXTURE_BOUND),
            Domain::Glyph => (-1.0, 1.0),
        }
    }
}

pub const MIXTURE_BOUND: f64 = 8.0;
pub const ANCHOR_RADIUS: f64 = 0.1;
const SPIRAL_SCALE: f64 = 1.1;
const GOLDEN_ANGLE: f64 = 2.399_963_229_728_653;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSet {
    /// `[1, d]` rows.
    pub samples: Vec<Tensor>,
    pub concept_token: usize,
    pub domain: Domain,
}

impl ReferenceSet {
    pub fn dim(&self) -> usize {
        self.samples[0].numel()
    }

    fn validate(&self) -> Result<()> {
        if !(4..=6).contains(&self.samples.len()) {
            return Err(Error::DatasetFormat(format!(
                "concept {} has {} samples, expected 4-6",
                self.concept_token,
                self.samples.len()
            )));
        }
        let shape = self.samples[0].shape();
        if self.samples.iter().any(|s| s.shape() != shape) {
            return Err(Error::DatasetFormat(format!(
                "concept {} mixes sample shapes",
                self.concept_token
            )));
        }
        Ok(())
    }
}

/// The (concept, context) pair a generation request names.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConditionSpec {
    pub concept_token: usize,
    pub context_token: usize,
}

/// Anchor of concept `k` on a golden-angle spiral, rotated by a
/// seed-dependent angle. Rotation keeps pairwise distances, all at least 1.
pub fn mixture_anchor(seed: u64, concept_id: usize) -> [f64; 2] {
    let phase = RngStream::new(seed, "mixture/rotation")
        .rng_at(0)
        .random_range(0.0..std::f64::consts::TAU);
    let r = SPIRAL_SCALE * (concept_id as f64).sqrt();
    let theta = concept_id as f64 * GOLDEN_ANGLE + phase;
    [r * theta.cos(), r * theta.sin()]
}

pub fn gen_mixture2d(seed: u64, concept_id: usize) -> ReferenceSet {
    let anchor = mixture_anchor(seed, concept_id);
    let mut rng = RngStream::new(seed, "mixture/points").rng_at(concept_id as u64);
    let n = rng.random_range(4..=6);
    let samples = (0..n)
        .map(|_| {
            let r = ANCHOR_RADIUS * rng.random::<f64>().sqrt();
            let a = rng.random_range(0.0..std::f64::consts::TAU);
            Tensor::from_parts(vec![1, 2], vec![anchor[0] + r * a.cos(), anchor[1] + r * a.sin()])
        })
        .collect();
    ReferenceSet {
        samples,
        concept_token: concept_id,
        domain: Domain::Mixture2d,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GlyphConfig {
    pub size: usize,
    /// Maximum per-sample roll in pixels.
    pub jitter_pixels: usize,
    /// Foreground intensity is scaled by a factor drawn from `[1 - j, 1]`.
    pub jitter_intensity: f64,
}

impl Default for GlyphConfig {
    fn default() -> Self {
        Self {
            size: 8,
            jitter_pixels: 1,
            jitter_intensity: 0.3,
        }
    }
}

fn glyph_base(seed: u64, concept_id: usize, size: usize) -> Vec<f64> {
    let mut rng = RngStream::new(seed, "glyph/shape").rng_at(concept_id as u64);
    let mut img = vec![-1.0; size * size];
    let strokes = rng.random_range(2..=4);
    for _ in 0..strokes {
        let len = rng.random_range(size / 2..=size - 2);
        let (dr, dc): (isize, isize) = match rng.random_range(0..4) {
            0 => (0, 1),
            1 => (1, 0),
            2 => (1, 1),
            _ => (1, -1),
        };
        let r0 = rng.random_range(1..size - 1) as isize;
        let c0 = rng.random_range(1..size - 1) as isize;
        for i in 0..len as isize {
            let (r, c) = (r0 + dr * i, c0 + dc * i);
            if r < 1 || c < 1 || r >= size as isize - 1 || c >= size as isize - 1 {
                break;
            }
            img[r as usize * size + c as usize] = 1.0;
        }
    }
    img
}

fn roll(img: &[f64], size: usize, dx: isize, dy: isize) -> Vec<f64> {
    let n = size as isize;
    let mut out = vec![0.0; img.len()];
    for r in 0..n {
        for c in 0..n {
            let nr = (r + dy).rem_euclid(n);
            let nc = (c + dx).rem_euclid(n);
            out[(nr * n + nc) as usize] = img[(r * n + c) as usize];
        }
    }
    out
}

pub fn gen_glyph(seed: u64, concept_id: usize, config: &GlyphConfig) -> Result<ReferenceSet> {
    let size = config.size;
    if size != 8 && size != 16 {
        return Err(Error::InvalidArgument(format!(
            "glyph size must be 8 or 16, got {size}"
        )));
    }
    let base = glyph_base(seed, concept_id, size);
    let mut rng = RngStream::new(seed, "glyph/jitter").rng_at(concept_id as u64);
    let n = rng.random_range(4..=6);
    let j = config.jitter_pixels as i64;
    let samples = (0..n)
        .map(|_| {
            let (dx, dy) = if j > 0 {
                (rng.random_range(-j..=j) as isize, rng.random_range(-j..=j) as isize)
            } else {
                (0, 0)
            };
            let f = if config.jitter_intensity > 0.0 {
                rng.random_range(1.0 - config.jitter_intensity..=1.0)
            } else {
                1.0
            };
            let img: Vec<f64> = roll(&base, size, dx, dy)
                .into_iter()
                .map(|v| -1.0 + (v + 1.0) * f)
                .collect();
            Tensor::from_parts(vec![1, size * size], img)
        })
        .collect();
    Ok(ReferenceSet {
        samples,
        concept_token: concept_id,
        domain: Domain::Glyph,
    })
}

/// A deterministic, invertible (up to clamping) sample transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ContextTransform {
    Identity,
    Translate {
        dx: f64,
        dy: f64,
    },
    /// Cyclic pixel shift of a square image.
    Roll {
        dx: isize,
        dy: isize,
    },
    /// `v -> lo + (v - lo) * factor`, dims or brightens the foreground.
    IntensityScale(f64),
    IntensityShift(f64),
}

impl ContextTransform {
    pub fn inverse(self) -> Self {
        match self {
            ContextTransform::Identity => ContextTransform::Identity,
            ContextTransform::Translate { dx, dy } => ContextTransform::Translate { dx: -dx, dy: -dy },
            ContextTransform::Roll { dx, dy } => ContextTransform::Roll { dx: -dx, dy: -dy },
            ContextTransform::IntensityScale(f) => ContextTransform::IntensityScale(1.0 / f),
            ContextTransform::IntensityShift(s) => ContextTransform::IntensityShift(-s),
        }
    }

    /// Applies the transform and clamps into the domain's value range.
    pub fn apply(self, sample: &Tensor, domain: Domain) -> Result<Tensor> {
        let (lo, hi) = domain.value_range();
        let data = sample.data();
        let out: Vec<f64> = match self {
            ContextTransform::Identity => return Ok(sample.clone()),
            ContextTransform::Translate { dx, dy } => {
                if data.len() != 2 {
                    return Err(Error::InvalidArgument("translation needs 2-D samples".into()));
                }
                vec![data[0] + dx, data[1] + dy]
            }
            ContextTransform::Roll { dx, dy } => {
                let size = (data.len() as f64).sqrt() as usize;
                if size * size != data.len() {
                    return Err(Error::InvalidArgument("roll needs square images".into()));
                }
                roll(data, size, dx, dy)
            }
            ContextTransform::IntensityScale(f) => data.iter().map(|v| lo + (v - lo) * f).collect(),
            ContextTransform::IntensityShift(s) => data.iter().map(|v| v + s).collect(),
        };
        let clamped = out.into_iter().map(|v| v.clamp(lo, hi)).collect();
        Ok(Tensor::from_parts(sample.shape().to_vec(), clamped))
    }
}

/// Context table for a domain; token 0 is always the identity.
pub fn default_contexts(domain: Domain, count: usize) -> Vec<ContextTransform> {
    use ContextTransform::*;
    let pool: Vec<ContextTransform> = match domain {
        Domain::Mixture2d => vec![
            Translate { dx: 0.3, dy: 0.0 },
            Translate { dx: 0.0, dy: 0.3 },
            Translate { dx: -0.3, dy: 0.0 },
            Translate { dx: 0.0, dy: -0.3 },
            Translate { dx: 0.3, dy: 0.3 },
            Translate { dx: -0.3, dy: -0.3 },
        ],
        Domain::Glyph => vec![
            Roll { dx: 1, dy: 0 },
            Roll { dx: 0, dy: 1 },
            IntensityScale(0.6),
            IntensityShift(0.3),
            Roll { dx: -1, dy: 0 },
            Roll { dx: 0, dy: -1 },
        ],
    };
    std::iter::once(Identity)
        .chain(pool.into_iter().cycle())
        .take(count.max(1))
        .collect()
}

pub fn apply_context(
    sample: &Tensor,
    context_token: usize,
    contexts: &[ContextTransform],
    domain: Domain,
) -> Result<Tensor> {
    let ctx = contexts.get(context_token).ok_or_else(|| {
        Error::InvalidArgument(format!(
            "unknown context token {context_token} (have {})",
            contexts.len()
        ))
    })?;
    ctx.apply(sample, domain)
}

/// Every concept's reference set plus the shared context table.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptDataset {
    pub domain: Domain,
    pub sets: Vec<ReferenceSet>,
    pub contexts: Vec<ContextTransform>,
}

impl ConceptDataset {
    pub fn generate(domain: Domain, seed: u64, concepts: usize, contexts: usize, glyph: &GlyphConfig) -> Result<Self> {
        let sets = (0..concepts)
            .map(|c| match domain {
                Domain::Mixture2d => Ok(gen_mixture2d(seed, c)),
                Domain::Glyph => gen_glyph(seed, c, glyph),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            domain,
            sets,
            contexts: default_contexts(domain, contexts),
        })
    }

    pub fn dim(&self) -> usize {
        self.sets[0].dim()
    }

    pub fn n_concepts(&self) -> usize {
        self.sets.len()
    }

    pub fn n_contexts(&self) -> usize {
        self.contexts.len()
    }

    pub fn n_tokens(&self) -> usize {
        self.n_concepts() * self.n_contexts()
    }

    /// Condition-table token for a (concept, context) pair.
    pub fn token(&self, spec: ConditionSpec) -> usize {
        spec.concept_token * self.n_contexts() + spec.context_token
    }

    pub fn spec(&self, token: usize) -> ConditionSpec {
        ConditionSpec {
            concept_token: token / self.n_contexts(),
            context_token: token % self.n_contexts(),
        }
    }

    /// Reference `index` of the token's concept, transformed by its context.
    pub fn target(&self, token: usize, index: usize) -> Result<Tensor> {
        let spec = self.spec(token);
        let set = &self.sets[spec.concept_token];
        let sample = &set.samples[index % set.samples.len()];
        apply_context(sample, spec.context_token, &self.contexts, self.domain)
    }

    /// Tab-separated dump: a header row per concept followed by one row per
    /// flattened sample.
    pub fn dump(&self) -> String {
        let mut out = String::from("# dpg-dataset v1\n");
        for set in &self.sets {
            let shape: Vec<String> = set.samples[0].shape().iter().map(|d| d.to_string()).collect();
            let _ = writeln!(
                out,
                "domain={}\tshape={}\tconcept_token={}\tsamples={}",
                set.domain.name(),
                shape.join("x"),
                set.concept_token,
                set.samples.len()
            );
            for s in &set.samples {
                let row: Vec<String> = s.data().iter().map(|v| format!("{v:?}")).collect();
                let _ = writeln!(out, "{}", row.join("\t"));
            }
        }
        out
    }

    /// Parses [`ConceptDataset::dump`] output. Contexts are rebuilt with the
    /// default table of the given size.
    pub fn load(text: &str, contexts: usize) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty() && !l.starts_with('#'));
        let mut sets = Vec::new();
        let mut domain = None;
        while let Some(header) = lines.next() {
            let mut fields = std::collections::HashMap::new();
            for kv in header.split('\t') {
                let (k, v) = kv
                    .split_once('=')
                    .ok_or_else(|| Error::DatasetFormat(format!("bad header field `{kv}`")))?;
                fields.insert(k, v);
            }
            let get = |k: &str| {
                fields
                    .get(k)
                    .copied()
                    .ok_or_else(|| Error::DatasetFormat(format!("header missing `{k}`")))
            };
            let d = Domain::parse(get("domain")?)?;
            if *domain.get_or_insert(d) != d {
                return Err(Error::DatasetFormat("mixed domains in one file".into()));
            }
            let shape: Vec<usize> = get("shape")?
                .split('x')
                .map(|s| s.parse().map_err(|_| Error::DatasetFormat(format!("bad shape `{s}`"))))
                .collect::<Result<_>>()?;
            let token: usize = get("concept_token")?
                .parse()
                .map_err(|_| Error::DatasetFormat("bad concept_token".into()))?;
            let n: usize = get("samples")?
                .parse()
                .map_err(|_| Error::DatasetFormat("bad sample count".into()))?;
            let mut samples = Vec::with_capacity(n);
            for _ in 0..n {
                let row = lines
                    .next()
                    .ok_or_else(|| Error::DatasetFormat(format!("concept {token}: missing sample rows")))?;
                let data: Vec<f64> = row
                    .split('\t')
                    .map(|v| v.parse().map_err(|_| Error::DatasetFormat(format!("bad value `{v}`"))))
                    .collect::<Result<_>>()?;
                samples.push(Tensor::new(shape.clone(), data).map_err(|e| Error::DatasetFormat(e.to_string()))?);
            }
            let set = ReferenceSet {
                samples,
                concept_token: token,
                domain: d,
            };
            set.validate()?;
            sets.push(set);
        }
        let domain = domain.ok_or_else(|| Error::DatasetFormat("empty dataset".into()))?;
        Ok(Self {
            domain,
            sets,
            contexts: default_contexts(domain, contexts),
        })
    }
}
