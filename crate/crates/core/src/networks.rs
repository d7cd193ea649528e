//! The denoising policy, the critic, and the condition embedding table.
//!
//! Latents travel as `[m, d]` row matrices. The policy reads
//! `[x_t | timestep embedding | condition]`; the critic reads
//! `[x_t | action | look-ahead | timestep embedding | condition]` where the
//! look-ahead is the clean-sample estimate
//! `(x_t - sqrt(1 - ab) * action) / max(sqrt(ab), floor)`, exact wherever
//! `sqrt(ab)` is above the floor and bounded elsewhere. A floor of 1 passes
//! `sqrt(ab) * x0_hat`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{Denoiser, DiffusionSchedule};
use crate::error::{Error, Result};
use crate::numerics::{Eager, Graph, RngStream, Tensor};

/// Sinusoidal embedding of a timestep index, as a `[1, dim]` row.
pub fn timestep_embedding(t: usize, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half.max(1) as f64).exp();
        let arg = t as f64 * freq;
        out[i] = arg.sin();
        out[half + i] = arg.cos();
    }
    Tensor::from_parts(vec![1, dim], out)
}

fn timestep_rows(ts: &[usize], dim: usize) -> Tensor {
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        data.extend_from_slice(timestep_embedding(t, dim).data());
    }
    Tensor::from_parts(vec![ts.len(), dim], data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    fn xavier(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| rng.random_range(-limit..limit)).collect();
        Self {
            weight: Tensor::from_parts(vec![fan_in, fan_out], data),
            bias: Tensor::zeros(&[1, fan_out]),
        }
    }

    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[fan_in, fan_out]),
            bias: Tensor::zeros(&[1, fan_out]),
        }
    }
}

/// Tanh MLP with a linear output layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// Xavier-uniform hidden layers, zero-initialized output layer.
    pub fn new(input: usize, hidden: &[usize], output: usize, rng: &mut impl Rng) -> Self {
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut fan_in = input;
        for &h in hidden {
            layers.push(Linear::xavier(fan_in, h, rng));
            fan_in = h;
        }
        layers.push(Linear::zeros(fan_in, output));
        Self { layers }
    }

    pub fn bind<'p, G: Graph<'p>>(&'p self, g: &mut G, trainable: bool) -> Vec<G::Value> {
        self.layers
            .iter()
            .flat_map(|l| [&l.weight, &l.bias])
            .map(|t| if trainable { g.param(t) } else { g.frozen(t) })
            .collect()
    }

    pub fn forward<'p, G: Graph<'p>>(&self, g: &mut G, bound: &[G::Value], input: &G::Value) -> Result<G::Value> {
        let n = self.layers.len();
        let mut h = input.clone();
        for i in 0..n {
            let z = g.matmul(&h, &bound[2 * i])?;
            let z = g.add_row(&z, &bound[2 * i + 1])?;
            h = if i + 1 < n { g.tanh(&z) } else { z };
        }
        Ok(h)
    }

    fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias])
    }
}

/// Named access to trainable tensors, in a fixed order.
pub trait Parameterized {
    fn named_params(&self) -> Vec<(String, &Tensor)>;
    fn params_mut(&mut self) -> Vec<&mut Tensor>;

    fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    fn flat_params(&self) -> Vec<f64> {
        self.named_params()
            .iter()
            .flat_map(|(_, t)| t.data().iter().copied())
            .collect()
    }

    fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        let mut params = self.params_mut();
        let total: usize = params.iter().map(|t| t.numel()).sum();
        if total != flat.len() {
            return Err(Error::Checkpoint(format!(
                "expected {total} parameters, found {}",
                flat.len()
            )));
        }
        let mut offset = 0;
        for t in params.iter_mut() {
            let n = t.numel();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// FNV-1a over the parameter bit patterns.
    fn param_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in self.flat_params() {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionEmbedding {
    pub vector: Tensor,
    pub token_id: usize,
}

/// Learned stand-in for a text encoder: one row per condition token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTable {
    pub table: Tensor,
    pub frozen: bool,
}

impl EmbeddingTable {
    pub fn new(tokens: usize, dim: usize, frozen: bool, rng: &mut impl Rng) -> Self {
        let data = (0..tokens * dim)
            .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        Self {
            table: Tensor::from_parts(vec![tokens, dim], data),
            frozen,
        }
    }

    pub fn tokens(&self) -> usize {
        self.table.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.table.shape()[1]
    }
}

pub fn embed_condition(table: &EmbeddingTable, token_id: usize) -> Result<ConditionEmbedding> {
    Ok(ConditionEmbedding {
        vector: table.table.select_row(token_id)?,
        token_id,
    })
}

/// `{x_t, t, condition}`.
#[derive(Debug, Clone)]
pub struct LatentState {
    pub x: Tensor,
    pub t: usize,
    pub cond: ConditionEmbedding,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyArch {
    pub data_dim: usize,
    pub cond_dim: usize,
    pub temb_dim: usize,
    pub tokens: usize,
    pub hidden: Vec<usize>,
}

impl PolicyArch {
    pub fn input_dim(&self) -> usize {
        self.data_dim + self.temb_dim + self.cond_dim
    }
}

/// The denoiser `eps_theta(x_t, t, cond)`; its output is the action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyNet {
    pub arch: PolicyArch,
    pub mlp: Mlp,
    pub embedding: EmbeddingTable,
}

/// Policy parameters bound onto a graph.
pub struct PolicyBinding<V> {
    pub layers: Vec<V>,
    pub embedding: V,
}

impl<V: Clone> PolicyBinding<V> {
    /// Bound values in [`Parameterized::named_params`] order.
    pub fn all(&self) -> Vec<V> {
        let mut v = self.layers.clone();
        v.push(self.embedding.clone());
        v
    }
}

impl PolicyNet {
    pub fn new(arch: PolicyArch, freeze_embedding: bool, stream: &RngStream) -> Self {
        let mut rng = stream.derive("policy-init").rng_at(0);
        let mlp = Mlp::new(arch.input_dim(), &arch.hidden, arch.data_dim, &mut rng);
        let embedding = EmbeddingTable::new(arch.tokens, arch.cond_dim, freeze_embedding, &mut rng);
        Self { arch, mlp, embedding }
    }

    pub fn bind<'p, G: Graph<'p>>(&'p self, g: &mut G, trainable: bool) -> PolicyBinding<G::Value> {
        let layers = self.mlp.bind(g, trainable);
        let embedding = if trainable && !self.embedding.frozen {
            g.param(&self.embedding.table)
        } else {
            g.frozen(&self.embedding.table)
        };
        PolicyBinding { layers, embedding }
    }

    /// Predicted noise for `m` rows of `x_t` (`[m, d]`), each with its own
    /// timestep and condition token.
    pub fn forward<'p, G: Graph<'p>>(
        &self,
        g: &mut G,
        bound: &PolicyBinding<G::Value>,
        x_t: &G::Value,
        ts: &[usize],
        tokens: &[usize],
    ) -> Result<G::Value> {
        let m = ts.len();
        if tokens.len() != m || g.tensor(x_t).shape() != [m, self.arch.data_dim] {
            return Err(Error::ShapeMismatch {
                op: "policy_forward",
                left: g.tensor(x_t).shape().to_vec(),
                right: vec![m, self.arch.data_dim],
            });
        }
        let rows = self.embedding.tokens();
        let mut onehot = vec![0.0; m * rows];
        for (r, &tok) in tokens.iter().enumerate() {
            if tok >= rows {
                return Err(Error::TokenOutOfRange { token: tok, rows });
            }
            onehot[r * rows + tok] = 1.0;
        }
        let sel = g.constant(Tensor::from_parts(vec![m, rows], onehot));
        let cond = g.matmul(&sel, &bound.embedding)?;
        let temb = g.constant(timestep_rows(ts, self.arch.temb_dim));
        let input = g.concat(&[x_t.clone(), temb, cond])?;
        self.mlp.forward(g, &bound.layers, &input)
    }

    /// Eager forward for a single row.
    pub fn predict(&self, x_t: &Tensor, t: usize, token: usize) -> Result<Tensor> {
        let mut g = Eager;
        let bound = self.bind(&mut g, false);
        let x = g.frozen(x_t);
        Ok(self.forward(&mut g, &bound, &x, &[t], &[token])?.into_owned())
    }

    /// Eager forward for a batch of rows.
    pub fn predict_batch(&self, x_t: &Tensor, ts: &[usize], tokens: &[usize]) -> Result<Tensor> {
        let mut g = Eager;
        let bound = self.bind(&mut g, false);
        let x = g.frozen(x_t);
        Ok(self.forward(&mut g, &bound, &x, ts, tokens)?.into_owned())
    }

    pub fn condition(&self, token: usize) -> Result<ConditionEmbedding> {
        embed_condition(&self.embedding, token)
    }
}

impl Denoiser for PolicyNet {
    fn predict_noise(&self, x_t: &Tensor, t: usize, cond: &ConditionEmbedding) -> Result<Tensor> {
        self.predict(x_t, t, cond.token_id)
    }
}

impl Parameterized for PolicyNet {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = self
            .mlp
            .tensors()
            .enumerate()
            .map(|(i, t)| {
                let kind = if i % 2 == 0 { "weight" } else { "bias" };
                (format!("policy.layer{}.{kind}", i / 2), t)
            })
            .collect();
        out.push(("policy.embedding".to_string(), &self.embedding.table));
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = self.mlp.tensors_mut().collect();
        out.push(&mut self.embedding.table);
        out
    }
}

/// `ẑ = eps_theta(x_t, t, cond)` for one state.
pub fn policy_forward(net: &PolicyNet, state: &LatentState) -> Result<Tensor> {
    net.predict(&state.x, state.t, state.cond.token_id)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticArch {
    pub data_dim: usize,
    pub cond_dim: usize,
    pub temb_dim: usize,
    pub hidden: Vec<usize>,
    /// Lower bound on the divisor of the clean-sample input, in `(0, 1]`.
    #[serde(default = "default_floor")]
    pub lookahead_floor: f64,
}

fn default_floor() -> f64 {
    1.0
}

impl CriticArch {
    pub fn input_dim(&self) -> usize {
        3 * self.data_dim + self.temb_dim + self.cond_dim
    }
}

/// Scalar value estimate `Q_phi(x_t, action)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticNet {
    pub arch: CriticArch,
    pub mlp: Mlp,
}

impl CriticNet {
    pub fn new(arch: CriticArch, stream: &RngStream) -> Self {
        let mut rng = stream.derive("critic-init").rng_at(0);
        let mlp = Mlp::new(arch.input_dim(), &arch.hidden, 1, &mut rng);
        Self { arch, mlp }
    }

    pub fn bind<'p, G: Graph<'p>>(&'p self, g: &mut G, trainable: bool) -> Vec<G::Value> {
        self.mlp.bind(g, trainable)
    }

    /// Value of one `[1, d]` state/action pair. `cond` is treated as a
    /// constant input.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<'p, G: Graph<'p>>(
        &self,
        g: &mut G,
        bound: &[G::Value],
        x_t: &G::Value,
        action: &G::Value,
        t: usize,
        alpha_bar: f64,
        cond: &Tensor,
    ) -> Result<G::Value> {
        let xs = g.tensor(x_t).shape().to_vec();
        let want = [1, self.arch.data_dim];
        if xs != want || g.tensor(action).shape() != want {
            return Err(Error::ShapeMismatch {
                op: "critic_forward",
                left: xs,
                right: g.tensor(action).shape().to_vec(),
            });
        }
        let scaled = g.scale(action, (1.0 - alpha_bar).sqrt());
        let lookahead = g.sub(x_t, &scaled)?;
        let lookahead = g.scale(&lookahead, 1.0 / alpha_bar.sqrt().max(self.arch.lookahead_floor));
        let temb = g.constant(timestep_embedding(t, self.arch.temb_dim));
        let c = g.constant(cond.clone());
        let input = g.concat(&[x_t.clone(), action.clone(), lookahead, temb, c])?;
        let out = self.mlp.forward(g, bound, &input)?;
        g.reshape(&out, &[1])
    }

    pub fn value(&self, x_t: &Tensor, action: &Tensor, t: usize, alpha_bar: f64, cond: &Tensor) -> Result<f64> {
        let mut g = Eager;
        let bound = self.bind(&mut g, false);
        let x = g.frozen(x_t);
        let a = g.frozen(action);
        let q = self.forward(&mut g, &bound, &x, &a, t, alpha_bar, cond)?;
        Ok(q.item())
    }
}

impl Parameterized for CriticNet {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        self.mlp
            .tensors()
            .enumerate()
            .map(|(i, t)| {
                let kind = if i % 2 == 0 { "weight" } else { "bias" };
                (format!("critic.layer{}.{kind}", i / 2), t)
            })
            .collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.mlp.tensors_mut().collect()
    }
}

/// `Q_phi(x_t, action)` for one state.
pub fn critic_forward(net: &CriticNet, state: &LatentState, action: &Tensor, s: &DiffusionSchedule) -> Result<f64> {
    net.value(&state.x, action, state.t, s.alpha_bar(state.t), &state.cond.vector)
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// Architecture, flattened parameters and the run's random-stream state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub step: u64,
    pub policy_arch: PolicyArch,
    pub freeze_embedding: bool,
    pub policy_params: Vec<f64>,
    pub critic_arch: Option<CriticArch>,
    pub critic_params: Option<Vec<f64>>,
    pub rng: RngStream,
}

impl Checkpoint {
    pub fn capture(step: u64, policy: &PolicyNet, critic: Option<&CriticNet>, rng: &RngStream) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            step,
            policy_arch: policy.arch.clone(),
            freeze_embedding: policy.embedding.frozen,
            policy_params: policy.flat_params(),
            critic_arch: critic.map(|c| c.arch.clone()),
            critic_params: critic.map(|c| c.flat_params()),
            rng: rng.clone(),
        }
    }

    pub fn restore(&self) -> Result<(PolicyNet, Option<CriticNet>)> {
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {}",
                self.version
            )));
        }
        let init = RngStream::new(0, "restore");
        let mut policy = PolicyNet::new(self.policy_arch.clone(), self.freeze_embedding, &init);
        policy.load_flat(&self.policy_params)?;
        let critic = match (&self.critic_arch, &self.critic_params) {
            (Some(arch), Some(params)) => {
                let mut c = CriticNet::new(arch.clone(), &init);
                c.load_flat(params)?;
                Some(c)
            }
            (None, None) => None,
            _ => return Err(Error::Checkpoint("critic architecture and parameters disagree".into())),
        };
        Ok((policy, critic))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}
