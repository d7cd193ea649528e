//! Reward functions and critic regression targets.
//!
//! Every reward is a negated cost: higher is better and 0 is the best
//! attainable value.

use serde::{Deserialize, Serialize};

use crate::concepts::ReferenceSet;
use crate::diffusion::{predict_x0, recover_noise, DiffusionSchedule, LatentCodec};
use crate::error::{Error, Result};
use crate::numerics::{Eager, Graph, RngStream, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardKind {
    Recon,
    LookForward,
    FeatureSim,
    /// Sum of `bases`; the policy step adds the reconstruction objective
    /// to the `lambda`-weighted critic value.
    Composite,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetMode {
    MonteCarlo,
    Discounted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardSpec {
    pub kind: RewardKind,
    #[serde(default)]
    pub bases: Vec<RewardKind>,
    pub lambda: f64,
    pub gamma: f64,
    pub target_mode: TargetMode,
    pub lf_weight_clip: f64,
    /// Number of most recent steps summed into a Monte-Carlo target.
    pub mc_horizon: usize,
    /// Feature-similarity rewards only apply for `t / T <= feature_t_frac`.
    pub feature_t_frac: f64,
}

impl Default for RewardSpec {
    fn default() -> Self {
        Self {
            kind: RewardKind::Composite,
            bases: vec![RewardKind::LookForward],
            lambda: 1.0,
            gamma: 0.0,
            target_mode: TargetMode::Discounted,
            lf_weight_clip: 10.0,
            mc_horizon: 8,
            feature_t_frac: 0.5,
        }
    }
}

impl RewardSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config("reward.lambda", "must be a finite value >= 0"));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::config("reward.gamma", "must lie in [0, 1]"));
        }
        if self.lf_weight_clip.is_nan() || self.lf_weight_clip <= 0.0 {
            return Err(Error::config("reward.lf_weight_clip", "must be > 0"));
        }
        if self.mc_horizon == 0 {
            return Err(Error::config("reward.mc_horizon", "must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.feature_t_frac) {
            return Err(Error::config("reward.feature_t_frac", "must lie in [0, 1]"));
        }
        match self.kind {
            RewardKind::Composite => {
                if self.bases.is_empty() {
                    return Err(Error::config(
                        "reward.bases",
                        "composite reward needs at least one base kind",
                    ));
                }
                if self.bases.contains(&RewardKind::Composite) {
                    return Err(Error::config("reward.bases", "bases cannot be composite"));
                }
            }
            _ if !self.bases.is_empty() => {
                return Err(Error::config("reward.bases", "only composite rewards take bases"));
            }
            _ => {}
        }
        Ok(())
    }

    /// Kinds whose rewards are summed for the critic target.
    pub fn components(&self) -> Vec<RewardKind> {
        match self.kind {
            RewardKind::Composite => self.bases.clone(),
            k => vec![k],
        }
    }

    pub fn uses_features(&self) -> bool {
        self.components().contains(&RewardKind::FeatureSim)
    }

    /// Whether a feature-similarity reward is defined at step `t`.
    pub fn feature_active(&self, t: usize, timesteps: usize) -> bool {
        t as f64 / timesteps as f64 <= self.feature_t_frac
    }
}

/// `-mean((z - z_hat)^2)`.
pub fn recon_reward(z: &Tensor, z_hat: &Tensor) -> Result<f64> {
    Ok(-z.sub(z_hat)?.square().mean().item())
}

/// `-min(w_t, clip) * mean((z_hat - z)^2)` with `w_t = (1 - ab) / ab` and `z`
/// recovered from `(x0, x_t)`. Equals `-mean((x0_hat - x0)^2)` whenever
/// `w_t <= clip`.
pub fn look_forward_reward(
    x0: &Tensor,
    x_t: &Tensor,
    z_hat: &Tensor,
    t: usize,
    s: &DiffusionSchedule,
    clip: f64,
) -> Result<f64> {
    if clip.is_nan() || clip <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "look-forward clip must be > 0, got {clip}"
        )));
    }
    let z = recover_noise(x0, x_t, t, s)?;
    let w = s.lookahead_weight(t).min(clip);
    Ok(-w * z_hat.sub(&z)?.square().mean().item())
}

/// [`look_forward_reward`] on a graph, differentiable in `z_hat`.
pub fn look_forward_reward_graph<'p, G: Graph<'p>>(
    g: &mut G,
    z: &G::Value,
    z_hat: &G::Value,
    weight: f64,
) -> Result<G::Value> {
    let d = g.sub(z_hat, z)?;
    let sq = g.square(&d);
    let m = g.mean(&sq);
    Ok(g.scale(&m, -weight))
}

/// Frozen random two-layer projection with unit-norm output; the image
/// feature extractor for similarity rewards and alignment metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureEncoder {
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
}

pub const ENCODER_HIDDEN: usize = 64;
pub const ENCODER_INPUT_GAIN: f64 = 4.0;

impl FeatureEncoder {
    pub fn new(input_dim: usize, output_dim: usize, stream: &RngStream) -> Self {
        Self::with_gain(input_dim, output_dim, ENCODER_INPUT_GAIN, stream)
    }

    /// First-layer weights have std `gain / sqrt(input_dim)`; larger gains
    /// give sharper, more local features.
    pub fn with_gain(input_dim: usize, output_dim: usize, gain: f64, stream: &RngStream) -> Self {
        let mut s = stream.derive("feature-encoder");
        let scale1 = gain / (input_dim as f64).sqrt();
        let w1 = s.draw_gaussian(&[input_dim, ENCODER_HIDDEN]).scale(scale1);
        let b1 = s.draw_gaussian(&[1, ENCODER_HIDDEN]);
        let w2 = s
            .draw_gaussian(&[ENCODER_HIDDEN, output_dim])
            .scale(1.0 / (ENCODER_HIDDEN as f64).sqrt());
        Self { w1, b1, w2 }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.w2.shape()[1]
    }

    /// Unnormalized embedding of a `[1, d]` row.
    pub fn raw<'p, G: Graph<'p>>(&'p self, g: &mut G, x: &G::Value) -> Result<G::Value> {
        let w1 = g.frozen(&self.w1);
        let b1 = g.frozen(&self.b1);
        let w2 = g.frozen(&self.w2);
        let h = g.matmul(x, &w1)?;
        let h = g.add_row(&h, &b1)?;
        let h = g.tanh(&h);
        g.matmul(&h, &w2)
    }

    pub fn embed_graph<'p, G: Graph<'p>>(&'p self, g: &mut G, x: &G::Value) -> Result<G::Value> {
        let e = self.raw(g, x)?;
        Ok(g.normalize(&e))
    }

    pub fn embed(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Eager;
        let e = self.raw(&mut g, &std::borrow::Cow::Borrowed(x))?;
        Ok(e.into_owned().normalized())
    }
}

/// `-(1 - mean_ref(k_hat . k_ref))` with unit-norm embeddings of the decoded
/// prediction and of each reference. Range `[-2, 0]`.
pub fn feature_sim_reward(
    x0_hat: &Tensor,
    refs: &ReferenceSet,
    enc: &FeatureEncoder,
    codec: &LatentCodec,
) -> Result<f64> {
    if refs.samples.is_empty() {
        return Err(Error::InvalidArgument("empty reference set".into()));
    }
    let decoded = codec.decode(x0_hat)?;
    let k_hat = enc.embed(&decoded)?;
    let ref_embeddings = refs.samples.iter().map(|r| enc.embed(r)).collect::<Result<Vec<_>>>()?;
    feature_sim_from_embeddings(&k_hat, &ref_embeddings)
}

/// Same as [`feature_sim_reward`] with reference embeddings precomputed.
pub fn feature_sim_from_embeddings(k_hat: &Tensor, refs: &[Tensor]) -> Result<f64> {
    if refs.is_empty() {
        return Err(Error::InvalidArgument("empty reference set".into()));
    }
    let mut total = 0.0;
    for r in refs {
        total += k_hat.dot(r)?;
    }
    Ok(-(1.0 - total / refs.len() as f64))
}

/// Graph form of the similarity reward, differentiable in `x0_hat`
/// (identity codec).
pub fn feature_sim_graph<'p, G: Graph<'p>>(
    g: &mut G,
    enc: &'p FeatureEncoder,
    x0_hat: &G::Value,
    ref_embeddings: &[Tensor],
) -> Result<G::Value> {
    if ref_embeddings.is_empty() {
        return Err(Error::InvalidArgument("empty reference set".into()));
    }
    let k_hat = enc.embed_graph(g, x0_hat)?;
    let mut mean_ref = Tensor::zeros(&[1, enc.output_dim()]);
    for r in ref_embeddings {
        mean_ref = mean_ref.add(r)?;
    }
    let mean_ref = g.constant(mean_ref.scale(1.0 / ref_embeddings.len() as f64));
    let prod = g.mul(&k_hat, &mean_ref)?;
    let sim = g.sum(&prod);
    let one = g.constant(Tensor::scalar(1.0));
    let cost = g.sub(&one, &sim)?;
    Ok(g.scale(&cost, -1.0))
}

/// Clean-sample estimate and similarity reward in one call.
pub fn feature_sim_at_step(
    x_t: &Tensor,
    z_hat: &Tensor,
    t: usize,
    s: &DiffusionSchedule,
    refs: &ReferenceSet,
    enc: &FeatureEncoder,
    codec: &LatentCodec,
) -> Result<f64> {
    let x0_hat = predict_x0(x_t, z_hat, t, s)?;
    feature_sim_reward(&x0_hat, refs, enc, codec)
}

/// Plain sum of per-step rewards.
pub fn mc_target(rewards_by_step: &[f64]) -> Result<f64> {
    if rewards_by_step.is_empty() {
        return Err(Error::InvalidArgument("Monte-Carlo target over zero steps".into()));
    }
    Ok(rewards_by_step.iter().sum())
}

/// `immediate + gamma * next_q`. `next_q` must come from a detached critic.
pub fn discounted_target(immediate: f64, next_q: f64, gamma: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::InvalidArgument(format!("gamma {gamma} outside [0, 1]")));
    }
    Ok(immediate + gamma * next_q)
}
