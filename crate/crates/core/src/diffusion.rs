//! Noise schedules, the forward noising process, clean-sample recovery and
//! samplers.
//!
//! Timesteps are zero-based: `t = 0` is the least noisy step and
//! `t = T - 1` the noisiest. Every formula reads `alpha_bar[t]` at the
//! drawn index.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::networks::ConditionEmbedding;
use crate::numerics::{gaussian, Graph, RngStream, Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
    /// Cosine `alpha_bar` profile; betas are clipped into
    /// `[beta_start, beta_end]`.
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn new(timesteps: usize, beta_start: f64, beta_end: f64, kind: ScheduleKind) -> Result<Self> {
        if timesteps < 2 {
            return Err(Error::InvalidSchedule(format!(
                "need at least 2 timesteps, got {timesteps}"
            )));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidSchedule(format!(
                "require 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
            )));
        }
        let last = (timesteps - 1) as f64;
        let beta = match kind {
            ScheduleKind::Linear => (0..timesteps)
                .map(|t| beta_start + (beta_end - beta_start) * t as f64 / last)
                .collect(),
            ScheduleKind::Cosine => {
                let s = 0.008;
                let f = |t: f64| {
                    (((t / timesteps as f64) + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2)
                        .cos()
                        .powi(2)
                };
                (0..timesteps)
                    .map(|t| (1.0 - f(t as f64 + 1.0) / f(t as f64)).clamp(beta_start, beta_end))
                    .collect()
            }
        };
        Self::from_betas(beta)
    }

    /// Builds a schedule from explicit betas; a single step is allowed here.
    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return Err(Error::InvalidSchedule("empty beta list".into()));
        }
        if let Some(b) = beta.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::InvalidSchedule(format!("beta {b} outside (0, 1)")));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(alpha.len());
        let mut acc = 1.0;
        for &a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        if alpha_bar.windows(2).any(|w| w[1] >= w[0]) || alpha_bar.iter().any(|&a| a <= 0.0) {
            return Err(Error::InvalidSchedule(
                "alpha_bar is not strictly decreasing in (0, 1)".into(),
            ));
        }
        Ok(Self { beta, alpha, alpha_bar })
    }

    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// `(1 - alpha_bar) / alpha_bar`: the factor relating noise error to
    /// clean-sample error at step `t`.
    pub fn lookahead_weight(&self, t: usize) -> f64 {
        let ab = self.alpha_bar[t];
        (1.0 - ab) / ab
    }

    /// Whitespace-separated table: `t beta alpha alpha_bar`, one row per step.
    pub fn to_table(&self) -> String {
        let mut out = String::from("t\tbeta\talpha\talpha_bar\n");
        for t in 0..self.len() {
            let _ = writeln!(
                out,
                "{t}\t{:.17e}\t{:.17e}\t{:.17e}",
                self.beta[t], self.alpha[t], self.alpha_bar[t]
            );
        }
        out
    }
}

fn check_step(s: &DiffusionSchedule, t: usize) -> Result<()> {
    if t >= s.len() {
        return Err(Error::InvalidArgument(format!("timestep {t} outside 0..{}", s.len())));
    }
    Ok(())
}

/// `sqrt(ab) * x0 + sqrt(1 - ab) * z`.
pub fn forward_diffuse(x0: &Tensor, t: usize, z: &Tensor, s: &DiffusionSchedule) -> Result<Tensor> {
    check_step(s, t)?;
    forward_diffuse_with(x0, s.alpha_bar(t), z)
}

pub fn forward_diffuse_with(x0: &Tensor, alpha_bar: f64, z: &Tensor) -> Result<Tensor> {
    x0.scale(alpha_bar.sqrt()).add(&z.scale((1.0 - alpha_bar).sqrt()))
}

/// One-shot clean-sample estimate `(x_t - sqrt(1 - ab) * z_hat) / sqrt(ab)`.
pub fn predict_x0(x_t: &Tensor, z_hat: &Tensor, t: usize, s: &DiffusionSchedule) -> Result<Tensor> {
    check_step(s, t)?;
    predict_x0_with(x_t, z_hat, s.alpha_bar(t))
}

pub fn predict_x0_with(x_t: &Tensor, z_hat: &Tensor, alpha_bar: f64) -> Result<Tensor> {
    if alpha_bar < 1e-12 {
        return Err(Error::Singular(format!("alpha_bar {alpha_bar:e} below 1e-12")));
    }
    Ok(x_t
        .sub(&z_hat.scale((1.0 - alpha_bar).sqrt()))?
        .scale(1.0 / alpha_bar.sqrt()))
}

/// [`predict_x0_with`] on a graph, so gradients can flow through `z_hat`.
pub fn predict_x0_graph<'p, G: Graph<'p>>(
    g: &mut G,
    x_t: &G::Value,
    z_hat: &G::Value,
    alpha_bar: f64,
) -> Result<G::Value> {
    if alpha_bar < 1e-12 {
        return Err(Error::Singular(format!("alpha_bar {alpha_bar:e} below 1e-12")));
    }
    let scaled = g.scale(z_hat, (1.0 - alpha_bar).sqrt());
    let diff = g.sub(x_t, &scaled)?;
    Ok(g.scale(&diff, 1.0 / alpha_bar.sqrt()))
}

/// Inverts the forward process for the noise that produced `x_t` from `x0`.
pub fn recover_noise(x0: &Tensor, x_t: &Tensor, t: usize, s: &DiffusionSchedule) -> Result<Tensor> {
    check_step(s, t)?;
    let ab = s.alpha_bar(t);
    Ok(x_t.sub(&x0.scale(ab.sqrt()))?.scale(1.0 / (1.0 - ab).sqrt()))
}

/// Mean squared error between target noise and predicted noise.
pub fn recon_objective(z: &Tensor, z_hat: &Tensor) -> Result<f64> {
    Ok(z.sub(z_hat)?.square().mean().item())
}

pub fn recon_objective_graph<'p, G: Graph<'p>>(g: &mut G, z: &G::Value, z_hat: &G::Value) -> Result<G::Value> {
    let d = g.sub(z, z_hat)?;
    let sq = g.square(&d);
    Ok(g.mean(&sq))
}

/// Anything that predicts the noise in `x_t`.
pub trait Denoiser {
    fn predict_noise(&self, x_t: &Tensor, t: usize, cond: &ConditionEmbedding) -> Result<Tensor>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleMode {
    /// Stochastic DDPM chain with posterior variance.
    Ancestral,
    /// Noise-free DDIM update (eta = 0).
    Deterministic,
}

/// Runs the reverse chain from `x_{T-1} ~ N(0, I)` down to a clean sample.
/// `shape` is the latent shape. All randomness comes from one draw of
/// `stream`.
pub fn sample(
    policy: &impl Denoiser,
    cond: &ConditionEmbedding,
    s: &DiffusionSchedule,
    stream: &mut RngStream,
    shape: &[usize],
    mode: SampleMode,
) -> Result<Tensor> {
    let mut rng = stream.next_rng();
    let mut x = gaussian(&mut rng, shape);
    for t in (0..s.len()).rev() {
        let z_hat = policy.predict_noise(&x, t, cond)?;
        x = match mode {
            SampleMode::Deterministic => {
                let x0 = predict_x0(&x, &z_hat, t, s)?;
                if t == 0 {
                    x0
                } else {
                    let prev = s.alpha_bar(t - 1);
                    forward_diffuse_with(&x0, prev, &z_hat)?
                }
            }
            SampleMode::Ancestral => {
                let coef = s.beta(t) / (1.0 - s.alpha_bar(t)).sqrt();
                let mean = x.sub(&z_hat.scale(coef))?.scale(1.0 / s.alpha(t).sqrt());
                if t == 0 {
                    mean
                } else {
                    let sigma = posterior_std(s, t);
                    mean.add(&gaussian(&mut rng, shape).scale(sigma))?
                }
            }
        };
    }
    Ok(x)
}

/// Standard deviation of `q(x_{t-1} | x_t, x_0)` for `t >= 1`.
pub fn posterior_std(s: &DiffusionSchedule, t: usize) -> f64 {
    let var = s.beta(t) * (1.0 - s.alpha_bar(t - 1)) / (1.0 - s.alpha_bar(t));
    var.sqrt()
}

/// Maps data samples to the latent space the diffusion runs in and back.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum LatentCodec {
    Identity,
    /// `latent = x * encoder`, `x = latent * decoder`, both `[d, d]`.
    Linear {
        encoder: Tensor,
        decoder: Tensor,
    },
}

impl LatentCodec {
    /// Linear codec with a random orthogonal encoder and its exact inverse.
    pub fn random_orthogonal(dim: usize, stream: &mut RngStream) -> Self {
        let raw = stream.draw_gaussian(&[dim, dim]);
        let mut q: Vec<Vec<f64>> = Vec::with_capacity(dim);
        for r in raw.data().chunks(dim) {
            let mut v = r.to_vec();
            for u in &q {
                let proj: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                for (vi, ui) in v.iter_mut().zip(u) {
                    *vi -= proj * ui;
                }
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter_mut().for_each(|x| *x /= norm);
            q.push(v);
        }
        let encoder = Tensor::from_parts(vec![dim, dim], q.concat());
        let decoder = encoder.transpose().expect("square");
        LatentCodec::Linear { encoder, decoder }
    }

    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            LatentCodec::Identity => Ok(x.clone()),
            LatentCodec::Linear { encoder, .. } => x.matmul(encoder),
        }
    }

    pub fn decode(&self, latent: &Tensor) -> Result<Tensor> {
        match self {
            LatentCodec::Identity => Ok(latent.clone()),
            LatentCodec::Linear { decoder, .. } => latent.matmul(decoder),
        }
    }

    /// Gradient-descent fit of the decoder to reconstruct `samples`
    /// (each a `[1, d]` row) through the fixed encoder. Returns the final
    /// mean reconstruction error. No-op for the identity codec.
    pub fn fit_decoder(&mut self, samples: &[Tensor], steps: usize, lr: f64) -> Result<f64> {
        let LatentCodec::Linear { encoder, decoder } = self else {
            return Ok(0.0);
        };
        let mut last = 0.0;
        for _ in 0..steps {
            let mut tape = Tape::new();
            let dec = tape.param(decoder);
            let mut total = None;
            for x in samples {
                let latent = x.matmul(encoder)?;
                let lv = tape.constant(latent);
                let xv = tape.frozen(x);
                let rec = tape.matmul(&lv, &dec)?;
                let err = recon_objective_graph(&mut tape, &xv, &rec)?;
                total = Some(match total {
                    None => err,
                    Some(acc) => tape.add(&acc, &err)?,
                });
            }
            let Some(total) = total else { return Ok(0.0) };
            let loss = tape.scale(&total, 1.0 / samples.len() as f64);
            last = tape.value_of(&loss);
            let grad = tape.backward(loss)?.wrt(dec);
            drop(tape);
            for (w, g) in decoder.data_mut().iter_mut().zip(grad.data()) {
                *w -= lr * g;
            }
        }
        Ok(last)
    }
}
