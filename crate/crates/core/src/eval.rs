//! Alignment metrics, the context probe and run reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::concepts::{ConceptDataset, ConditionSpec, ReferenceSet};
use crate::diffusion::{sample, SampleMode};
use crate::error::{Error, Result};
use crate::networks::PolicyNet;
use crate::numerics::{gaussian, RngStream, Tensor};
use crate::par::Execution;
use crate::rewards::FeatureEncoder;
use crate::trainer::{MetricRecord, TrainSetup};

/// Mean cosine similarity over all (generated, reference) pairs.
pub fn image_alignment(generated: &[Tensor], refs: &ReferenceSet, enc: &FeatureEncoder) -> Result<f64> {
    if generated.is_empty() || refs.samples.is_empty() {
        return Err(Error::InvalidArgument("image alignment needs non-empty inputs".into()));
    }
    let ref_emb = refs.samples.iter().map(|r| enc.embed(r)).collect::<Result<Vec<_>>>()?;
    let mut total = 0.0;
    for g in generated {
        let e = enc.embed(g)?;
        for r in &ref_emb {
            total += e.dot(r)?;
        }
    }
    Ok(total / (generated.len() * ref_emb.len()) as f64)
}

/// Linear softmax classifier over `[sample | onehot(concept)]` that names the
/// context a sample was drawn under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextProbe {
    dim: usize,
    concepts: usize,
    contexts: usize,
    mean: Vec<f64>,
    std: Vec<f64>,
    /// `[features, contexts]`, row-major.
    weights: Vec<f64>,
    bias: Vec<f64>,
    trained: bool,
    train_accuracy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    /// Copies of each transformed reference in the training set.
    pub copies: usize,
    /// Std of the Gaussian noise added to each copy.
    pub noise: f64,
    pub steps: usize,
    pub lr: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            copies: 16,
            noise: 0.05,
            steps: 400,
            lr: 1.0,
        }
    }
}

impl ContextProbe {
    pub fn untrained(dim: usize, concepts: usize, contexts: usize) -> Self {
        let features = dim + concepts;
        Self {
            dim,
            concepts,
            contexts,
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
            weights: vec![0.0; features * contexts],
            bias: vec![0.0; contexts],
            trained: false,
            train_accuracy: 0.0,
        }
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn train_accuracy(&self) -> f64 {
        self.train_accuracy
    }

    /// Fits on noisy copies of every transformed reference, then freezes.
    pub fn train(dataset: &ConceptDataset, cfg: &ProbeConfig, stream: &RngStream) -> Result<Self> {
        let mut xs = Vec::new();
        let mut labels = Vec::new();
        let mut concepts = Vec::new();
        let mut counter = 0u64;
        for set in &dataset.sets {
            for ctx in 0..dataset.n_contexts() {
                let token = dataset.token(ConditionSpec {
                    concept_token: set.concept_token,
                    context_token: ctx,
                });
                for idx in 0..set.samples.len() {
                    let clean = dataset.target(token, idx)?;
                    for _ in 0..cfg.copies {
                        let mut rng = stream.rng_at(counter);
                        counter += 1;
                        let noisy = clean.add(&gaussian(&mut rng, clean.shape()).scale(cfg.noise))?;
                        xs.push(noisy.into_data());
                        labels.push(ctx);
                        concepts.push(set.concept_token);
                    }
                }
            }
        }
        let mut probe = Self::untrained(dataset.dim(), dataset.n_concepts(), dataset.n_contexts());
        probe.fit(&xs, &concepts, &labels, cfg)?;
        let correct = xs
            .iter()
            .zip(&concepts)
            .zip(&labels)
            .filter(|((x, c), l)| probe.predict_raw(x, **c) == **l)
            .count();
        probe.train_accuracy = correct as f64 / xs.len() as f64;
        probe.trained = true;
        Ok(probe)
    }

    fn fit(&mut self, xs: &[Vec<f64>], concepts: &[usize], labels: &[usize], cfg: &ProbeConfig) -> Result<()> {
        if xs.is_empty() {
            return Err(Error::InvalidArgument("probe needs training samples".into()));
        }
        let n = xs.len() as f64;
        for j in 0..self.dim {
            let m = xs.iter().map(|x| x[j]).sum::<f64>() / n;
            let v = xs.iter().map(|x| (x[j] - m).powi(2)).sum::<f64>() / n;
            self.mean[j] = m;
            self.std[j] = if v > 1e-12 { v.sqrt() } else { 1.0 };
        }
        let feats: Vec<Vec<f64>> = xs.iter().zip(concepts).map(|(x, &c)| self.features(x, c)).collect();
        let f = self.dim + self.concepts;
        let k = self.contexts;
        for _ in 0..cfg.steps {
            let mut gw = vec![0.0; f * k];
            let mut gb = vec![0.0; k];
            for (x, &y) in feats.iter().zip(labels) {
                let p = self.softmax(x);
                for c in 0..k {
                    let d = p[c] - if c == y { 1.0 } else { 0.0 };
                    gb[c] += d;
                    for (i, xi) in x.iter().enumerate() {
                        gw[i * k + c] += d * xi;
                    }
                }
            }
            for (w, g) in self.weights.iter_mut().zip(&gw) {
                *w -= cfg.lr * g / n;
            }
            for (b, g) in self.bias.iter_mut().zip(&gb) {
                *b -= cfg.lr * g / n;
            }
        }
        Ok(())
    }

    fn features(&self, x: &[f64], concept: usize) -> Vec<f64> {
        let mut f: Vec<f64> = x
            .iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect();
        f.extend((0..self.concepts).map(|c| if c == concept { 1.0 } else { 0.0 }));
        f
    }

    fn softmax(&self, feats: &[f64]) -> Vec<f64> {
        let k = self.contexts;
        let mut logits = self.bias.clone();
        for (i, xi) in feats.iter().enumerate() {
            for (c, l) in logits.iter_mut().enumerate() {
                *l += xi * self.weights[i * k + c];
            }
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exp: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = exp.iter().sum();
        exp.into_iter().map(|e| e / z).collect()
    }

    fn predict_raw(&self, x: &[f64], concept: usize) -> usize {
        let p = self.softmax(&self.features(x, concept));
        let mut best = 0;
        for (c, v) in p.iter().enumerate() {
            if *v > p[best] {
                best = c;
            }
        }
        best
    }

    /// Most likely context of `x` given the requested concept.
    pub fn predict(&self, x: &Tensor, concept: usize) -> Result<usize> {
        if !self.trained {
            return Err(Error::UntrainedProbe);
        }
        if x.numel() != self.dim {
            return Err(Error::ShapeMismatch {
                op: "probe_predict",
                left: x.shape().to_vec(),
                right: vec![1, self.dim],
            });
        }
        if concept >= self.concepts {
            return Err(Error::TokenOutOfRange {
                token: concept,
                rows: self.concepts,
            });
        }
        Ok(self.predict_raw(x.data(), concept))
    }
}

/// Fraction of samples whose predicted context equals the requested one.
pub fn condition_alignment(generated: &[Tensor], conditions: &[ConditionSpec], probe: &ContextProbe) -> Result<f64> {
    if !probe.is_trained() {
        return Err(Error::UntrainedProbe);
    }
    if generated.is_empty() || generated.len() != conditions.len() {
        return Err(Error::InvalidArgument(format!(
            "condition alignment needs one condition per sample ({} samples, {} conditions)",
            generated.len(),
            conditions.len()
        )));
    }
    let mut hits = 0usize;
    for (g, c) in generated.iter().zip(conditions) {
        if probe.predict(g, c.concept_token)? == c.context_token {
            hits += 1;
        }
    }
    Ok(hits as f64 / generated.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConceptScores {
    pub image_alignment: f64,
    pub condition_alignment: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub image_alignment: f64,
    pub condition_alignment: f64,
    pub per_concept: BTreeMap<usize, ConceptScores>,
    pub n_samples: usize,
    pub seed: u64,
}

impl EvalReport {
    /// `key=value` lines; floats use shortest round-trip formatting.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "image_alignment={:?}", self.image_alignment);
        let _ = writeln!(out, "condition_alignment={:?}", self.condition_alignment);
        let _ = writeln!(out, "n_samples={}", self.n_samples);
        let _ = writeln!(out, "seed={}", self.seed);
        for (c, s) in &self.per_concept {
            let _ = writeln!(out, "concept.{c}.image_alignment={:?}", s.image_alignment);
            let _ = writeln!(out, "concept.{c}.condition_alignment={:?}", s.condition_alignment);
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut kv = BTreeMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::DatasetFormat(format!("report line without `=`: {line}")))?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        let num = |k: &str| -> Result<f64> {
            kv.get(k)
                .ok_or_else(|| Error::DatasetFormat(format!("report lacks `{k}`")))?
                .parse::<f64>()
                .map_err(|e| Error::DatasetFormat(format!("`{k}`: {e}")))
        };
        let mut per_concept = BTreeMap::new();
        for k in kv.keys() {
            if let Some(rest) = k.strip_prefix("concept.") {
                if let Some(c) = rest.strip_suffix(".image_alignment") {
                    let c: usize = c
                        .parse()
                        .map_err(|_| Error::DatasetFormat(format!("bad concept key `{k}`")))?;
                    per_concept.insert(
                        c,
                        ConceptScores {
                            image_alignment: num(k)?,
                            condition_alignment: num(&format!("concept.{c}.condition_alignment"))?,
                        },
                    );
                }
            }
        }
        Ok(Self {
            image_alignment: num("image_alignment")?,
            condition_alignment: num("condition_alignment")?,
            per_concept,
            n_samples: num("n_samples")? as usize,
            seed: num("seed")? as u64,
        })
    }
}

pub const SAMPLES_PER_CONDITION: usize = 8;

/// Generated data-space samples for every (concept, context) pair, in token
/// order. Sample `i` of token `k` always uses noise stream `eval/{k}/{i}` of
/// `seed`, so runs evaluated with one seed share their noise.
pub fn generate_samples(
    policy: &PolicyNet,
    setup: &TrainSetup,
    seed: u64,
    per_condition: usize,
    mode: SampleMode,
    exec: Execution,
) -> Result<Vec<(ConditionSpec, Tensor)>> {
    let ds = &setup.dataset;
    let shape = [1, setup.policy_arch.data_dim];
    let total = ds.n_tokens() * per_condition;
    let results = exec.map(total, |j| -> Result<(ConditionSpec, Tensor)> {
        let token = j / per_condition;
        let i = j % per_condition;
        let mut stream = RngStream::new(seed, format!("eval/{token}/{i}"));
        let cond = policy.condition(token)?;
        let latent = sample(policy, &cond, &setup.schedule, &mut stream, &shape, mode)?;
        Ok((ds.spec(token), setup.codec.decode(&latent)?))
    });
    results.into_iter().collect()
}

/// Scores samples from [`generate_samples`]; aggregates are means over
/// concepts.
pub fn score_samples(
    samples: &[(ConditionSpec, Tensor)],
    setup: &TrainSetup,
    probe: &ContextProbe,
    seed: u64,
) -> Result<EvalReport> {
    let mut per_concept = BTreeMap::new();
    for set in &setup.dataset.sets {
        let (conds, gen): (Vec<ConditionSpec>, Vec<Tensor>) = samples
            .iter()
            .filter(|(c, _)| c.concept_token == set.concept_token)
            .cloned()
            .unzip();
        per_concept.insert(
            set.concept_token,
            ConceptScores {
                image_alignment: image_alignment(&gen, set, &setup.encoder)?,
                condition_alignment: condition_alignment(&gen, &conds, probe)?,
            },
        );
    }
    let n = per_concept.len() as f64;
    Ok(EvalReport {
        image_alignment: per_concept.values().map(|s| s.image_alignment).sum::<f64>() / n,
        condition_alignment: per_concept.values().map(|s| s.condition_alignment).sum::<f64>() / n,
        per_concept,
        n_samples: samples.len(),
        seed,
    })
}

/// Deterministic report for a policy: `per_condition` noise-free samples per
/// (concept, context) pair.
pub fn make_report(
    policy: &PolicyNet,
    setup: &TrainSetup,
    probe: &ContextProbe,
    seed: u64,
    per_condition: usize,
    exec: Execution,
) -> Result<EvalReport> {
    let samples = generate_samples(policy, setup, seed, per_condition, SampleMode::Deterministic, exec)?;
    score_samples(&samples, setup, probe, seed)
}

/// Columnar text: `step` then one column per metric name, `nan` for gaps.
pub fn plot_table(metrics: &[MetricRecord]) -> String {
    let mut keys: Vec<&String> = metrics.iter().flat_map(|m| m.values.keys()).collect();
    keys.sort();
    keys.dedup();
    let mut out = String::from("step");
    for k in &keys {
        out.push('\t');
        out.push_str(k);
    }
    out.push('\n');
    for m in metrics {
        let _ = write!(out, "{}", m.step);
        for k in &keys {
            match m.values.get(*k) {
                Some(v) => {
                    let _ = write!(out, "\t{v:?}");
                }
                None => out.push_str("\tnan"),
            }
        }
        out.push('\n');
    }
    out
}

/// Uniformly random requested contexts and Gaussian inputs; the expected
/// probe accuracy is `1 / contexts`.
pub fn chance_inputs(dataset: &ConceptDataset, count: usize, stream: &RngStream) -> (Vec<Tensor>, Vec<ConditionSpec>) {
    (0..count)
        .map(|i| {
            let mut rng = stream.rng_at(i as u64);
            let spec = ConditionSpec {
                concept_token: rng.random_range(0..dataset.n_concepts()),
                context_token: rng.random_range(0..dataset.n_contexts()),
            };
            (gaussian(&mut rng, &[1, dataset.dim()]), spec)
        })
        .unzip()
}
