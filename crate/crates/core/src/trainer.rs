//! Alternating critic/policy optimization, the weighted composite update and
//! the reconstruction-only baseline.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::concepts::ConceptDataset;
use crate::diffusion::{
    forward_diffuse, predict_x0, recon_objective, recon_objective_graph, DiffusionSchedule, LatentCodec,
};
use crate::error::{Error, Result};
use crate::networks::{CriticArch, CriticNet, Parameterized, PolicyArch, PolicyNet};
use crate::numerics::{gaussian, Graph, RngStream, Tape, Tensor};
use crate::par::Execution;
use crate::rewards::{
    discounted_target, feature_sim_from_embeddings, look_forward_reward, mc_target, recon_reward, FeatureEncoder,
    RewardKind, RewardSpec, TargetMode,
};

/// Consecutive non-finite steps tolerated before a run aborts.
pub const MAX_NONFINITE_STEPS: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Dpg,
    Baseline,
}

/// Which policy parameters an update may touch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "MaskRepr", into = "MaskRepr")]
pub enum ParamMask {
    All,
    /// Parameters whose name starts with any of these prefixes.
    Prefixes(Vec<String>),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum MaskRepr {
    Keyword(String),
    List(Vec<String>),
}

impl TryFrom<MaskRepr> for ParamMask {
    type Error = String;

    fn try_from(r: MaskRepr) -> std::result::Result<Self, String> {
        match r {
            MaskRepr::Keyword(k) if k == "all" => Ok(ParamMask::All),
            MaskRepr::Keyword(k) => Err(format!("expected \"all\" or a list of name prefixes, got \"{k}\"")),
            MaskRepr::List(v) => Ok(ParamMask::Prefixes(v)),
        }
    }
}

impl From<ParamMask> for MaskRepr {
    fn from(m: ParamMask) -> Self {
        match m {
            ParamMask::All => MaskRepr::Keyword("all".into()),
            ParamMask::Prefixes(v) => MaskRepr::List(v),
        }
    }
}

impl ParamMask {
    /// Per-parameter update flags in `named_params` order. Frozen embedding
    /// tables are never updated.
    pub fn resolve(&self, policy: &PolicyNet) -> Result<Vec<bool>> {
        let names: Vec<String> = policy.named_params().into_iter().map(|(n, _)| n).collect();
        let mut flags: Vec<bool> = match self {
            ParamMask::All => vec![true; names.len()],
            ParamMask::Prefixes(prefixes) => {
                for p in prefixes {
                    if !names.iter().any(|n| n.starts_with(p.as_str())) {
                        return Err(Error::config(
                            "trainer.param_mask",
                            format!("prefix `{p}` matches no parameter"),
                        ));
                    }
                }
                names
                    .iter()
                    .map(|n| prefixes.iter().any(|p| n.starts_with(p.as_str())))
                    .collect()
            }
        };
        if policy.embedding.frozen {
            for (flag, name) in flags.iter_mut().zip(&names) {
                if name == "policy.embedding" {
                    *flag = false;
                }
            }
        }
        Ok(flags)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub algorithm: Algorithm,
    pub steps: usize,
    pub batch_size: usize,
    pub lr_policy: f64,
    pub lr_critic: f64,
    pub momentum: f64,
    pub reward: RewardSpec,
    pub param_mask: ParamMask,
    pub seed: u64,
    pub eval_every: usize,
    pub critic_steps_per_policy_step: usize,
    /// Std of Gaussian noise added to the policy action before it is scored
    /// for critic regression. Zero scores the policy action itself.
    pub action_noise: f64,
    pub execution: Execution,
    pub record_rewards: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Dpg,
            steps: 2000,
            batch_size: 16,
            lr_policy: 1e-3,
            lr_critic: 1e-3,
            momentum: 0.9,
            reward: RewardSpec::default(),
            param_mask: ParamMask::All,
            seed: 0,
            eval_every: 500,
            critic_steps_per_policy_step: 1,
            action_noise: 0.1,
            execution: Execution::Parallel,
            record_rewards: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("trainer.batch_size", "must be >= 1"));
        }
        if !(self.lr_policy > 0.0 && self.lr_policy.is_finite()) {
            return Err(Error::config("trainer.lr_policy", "must be > 0"));
        }
        if !(self.lr_critic > 0.0 && self.lr_critic.is_finite()) {
            return Err(Error::config("trainer.lr_critic", "must be > 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("trainer.momentum", "must lie in [0, 1)"));
        }
        if self.eval_every == 0 {
            return Err(Error::config("trainer.eval_every", "must be >= 1"));
        }
        if self.critic_steps_per_policy_step == 0 {
            return Err(Error::config("trainer.critic_steps_per_policy_step", "must be >= 1"));
        }
        if !(self.action_noise >= 0.0 && self.action_noise.is_finite()) {
            return Err(Error::config("trainer.action_noise", "must be >= 0"));
        }
        self.reward.validate().map_err(|e| match e {
            Error::Config { key, message } => Error::Config {
                key: format!("trainer.{key}"),
                message,
            },
            other => other,
        })
    }
}

/// Everything a run needs besides its hyperparameters.
#[derive(Debug, Clone)]
pub struct TrainSetup {
    pub schedule: DiffusionSchedule,
    pub dataset: ConceptDataset,
    pub codec: LatentCodec,
    pub encoder: FeatureEncoder,
    pub policy_arch: PolicyArch,
    pub critic_arch: CriticArch,
    pub freeze_embedding: bool,
    /// Unit-norm embeddings of each concept's untransformed references.
    pub concept_embeddings: Vec<Vec<Tensor>>,
}

impl TrainSetup {
    pub fn new(
        schedule: DiffusionSchedule,
        dataset: ConceptDataset,
        codec: LatentCodec,
        encoder: FeatureEncoder,
        policy_arch: PolicyArch,
        critic_arch: CriticArch,
        freeze_embedding: bool,
    ) -> Result<Self> {
        if policy_arch.tokens != dataset.n_tokens() {
            return Err(Error::InvalidArgument(format!(
                "policy has {} condition tokens, dataset needs {}",
                policy_arch.tokens,
                dataset.n_tokens()
            )));
        }
        if policy_arch.data_dim != dataset.dim() || critic_arch.data_dim != dataset.dim() {
            return Err(Error::InvalidArgument(format!(
                "network data dim does not match dataset dim {}",
                dataset.dim()
            )));
        }
        let concept_embeddings = dataset
            .sets
            .iter()
            .map(|set| set.samples.iter().map(|s| encoder.embed(s)).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            schedule,
            dataset,
            codec,
            encoder,
            policy_arch,
            critic_arch,
            freeze_embedding,
            concept_embeddings,
        })
    }

    pub fn init_policy(&self, seed: u64) -> PolicyNet {
        PolicyNet::new(
            self.policy_arch.clone(),
            self.freeze_embedding,
            &RngStream::new(seed, "run"),
        )
    }

    pub fn init_critic(&self, seed: u64) -> CriticNet {
        CriticNet::new(self.critic_arch.clone(), &RngStream::new(seed, "run"))
    }
}

/// One drawn training example: a reference, a timestep and forward noise.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub token: usize,
    pub concept: usize,
    pub t: usize,
    pub x0: Tensor,
    pub z: Tensor,
    pub x_t: Tensor,
}

/// Draws `count` transitions from counters `base..base + count` of `stream`.
pub fn draw_batch(setup: &TrainSetup, stream: &RngStream, base: u64, count: usize) -> Result<Vec<Transition>> {
    let ds = &setup.dataset;
    (0..count)
        .map(|b| {
            let mut rng = stream.rng_at(base + b as u64);
            let token = rng.random_range(0..ds.n_tokens());
            let concept = ds.spec(token).concept_token;
            let idx = rng.random_range(0..ds.sets[concept].samples.len());
            let t = rng.random_range(0..setup.schedule.len());
            let x0 = setup.codec.encode(&ds.target(token, idx)?)?;
            let z = gaussian(&mut rng, x0.shape());
            let x_t = forward_diffuse(&x0, t, &z, &setup.schedule)?;
            Ok(Transition {
                token,
                concept,
                t,
                x0,
                z,
                x_t,
            })
        })
        .collect()
}

/// Sum of the active component rewards for `action` at `(x_t, t)`, or
/// `None` when no component is defined at this timestep.
#[allow(clippy::too_many_arguments)]
pub fn step_reward(
    setup: &TrainSetup,
    spec: &RewardSpec,
    x0: &Tensor,
    z: &Tensor,
    x_t: &Tensor,
    action: &Tensor,
    t: usize,
    concept: usize,
) -> Result<Option<f64>> {
    let mut total = 0.0;
    let mut any = false;
    for kind in spec.components() {
        let r = match kind {
            RewardKind::Recon => recon_reward(z, action)?,
            RewardKind::LookForward => look_forward_reward(x0, x_t, action, t, &setup.schedule, spec.lf_weight_clip)?,
            RewardKind::FeatureSim => {
                if !spec.feature_active(t, setup.schedule.len()) {
                    continue;
                }
                let x0_hat = predict_x0(x_t, action, t, &setup.schedule)?;
                let k_hat = setup.encoder.embed(&setup.codec.decode(&x0_hat)?)?;
                feature_sim_from_embeddings(&k_hat, &setup.concept_embeddings[concept])?
            }
            RewardKind::Composite => unreachable!("validated reward spec"),
        };
        total += r;
        any = true;
    }
    Ok(any.then_some(total))
}

/// Whether any reward component is defined at timestep `t`.
pub fn reward_active(spec: &RewardSpec, t: usize, timesteps: usize) -> bool {
    spec.components()
        .iter()
        .any(|k| *k != RewardKind::FeatureSim || spec.feature_active(t, timesteps))
}

/// Anything that scores an action and is differentiable in it.
pub trait ActionValue: Sync {
    #[allow(clippy::too_many_arguments)]
    fn q_graph<'p, G: Graph<'p>>(
        &'p self,
        g: &mut G,
        x_t: &G::Value,
        action: &G::Value,
        t: usize,
        alpha_bar: f64,
        cond: &Tensor,
    ) -> Result<G::Value>;
}

impl ActionValue for CriticNet {
    fn q_graph<'p, G: Graph<'p>>(
        &'p self,
        g: &mut G,
        x_t: &G::Value,
        action: &G::Value,
        t: usize,
        alpha_bar: f64,
        cond: &Tensor,
    ) -> Result<G::Value> {
        let bound = self.bind(g, false);
        self.forward(g, &bound, x_t, action, t, alpha_bar, cond)
    }
}

/// One critic regression example.
#[derive(Debug, Clone, PartialEq)]
pub struct CriticSample {
    pub x_t: Tensor,
    pub action: Tensor,
    pub t: usize,
    pub alpha_bar: f64,
    pub cond: Tensor,
    pub target: f64,
    /// Immediate reward of `action`, kept for reward traces.
    pub reward: f64,
}

/// Regression target for one transition scored with `action`. Later steps
/// of the truncated trajectory are forward-diffused from the same `x0` with
/// fresh noise from `traj` and scored with the current policy.
#[allow(clippy::too_many_arguments)]
pub fn critic_target(
    setup: &TrainSetup,
    spec: &RewardSpec,
    policy: &PolicyNet,
    critic: &CriticNet,
    tr: &Transition,
    action: &Tensor,
    traj: &mut impl Rng,
) -> Result<Option<(f64, f64)>> {
    let s = &setup.schedule;
    let Some(immediate) = step_reward(setup, spec, &tr.x0, &tr.z, &tr.x_t, action, tr.t, tr.concept)? else {
        return Ok(None);
    };
    let target = match spec.target_mode {
        TargetMode::Discounted => {
            let next_q = if tr.t == 0 || spec.gamma == 0.0 {
                0.0
            } else {
                let i = tr.t - 1;
                let z = gaussian(traj, tr.x0.shape());
                let x_i = forward_diffuse(&tr.x0, i, &z, s)?;
                let a_i = policy.predict(&x_i, i, tr.token)?;
                let cond = policy.condition(tr.token)?.vector;
                critic.value(&x_i, &a_i, i, s.alpha_bar(i), &cond)?
            };
            discounted_target(immediate, next_q, spec.gamma)?
        }
        TargetMode::MonteCarlo => {
            let start = (tr.t + 1).saturating_sub(spec.mc_horizon);
            let mut rewards = Vec::with_capacity(tr.t - start + 1);
            for i in start..tr.t {
                let z = gaussian(traj, tr.x0.shape());
                let x_i = forward_diffuse(&tr.x0, i, &z, s)?;
                let a_i = policy.predict(&x_i, i, tr.token)?;
                let r = step_reward(setup, spec, &tr.x0, &z, &x_i, &a_i, i, tr.concept)?;
                rewards.push(r.unwrap_or(0.0));
            }
            rewards.push(immediate);
            mc_target(&rewards)?
        }
    };
    Ok(Some((target, immediate)))
}

/// Critic examples for a batch. Actions are the policy's predictions plus
/// `action_noise` exploration drawn from `explore`; trajectory noise comes
/// from `trajectory`. Both streams are indexed by `base + b`. Samples with
/// no defined reward are dropped.
#[allow(clippy::too_many_arguments)]
pub fn build_critic_batch(
    cfg: &TrainConfig,
    setup: &TrainSetup,
    policy: &PolicyNet,
    critic: &CriticNet,
    batch: &[Transition],
    explore: &RngStream,
    trajectory: &RngStream,
    base: u64,
) -> Result<Vec<CriticSample>> {
    let results = cfg.execution.map(batch.len(), |b| -> Result<Option<CriticSample>> {
        let tr = &batch[b];
        let mut action = policy.predict(&tr.x_t, tr.t, tr.token)?;
        if cfg.action_noise > 0.0 {
            let mut rng = explore.rng_at(base + b as u64);
            action = action.add(&gaussian(&mut rng, action.shape()).scale(cfg.action_noise))?;
        }
        let mut traj = trajectory.rng_at(base + b as u64);
        let Some((target, reward)) = critic_target(setup, &cfg.reward, policy, critic, tr, &action, &mut traj)? else {
            return Ok(None);
        };
        Ok(Some(CriticSample {
            x_t: tr.x_t.clone(),
            action,
            t: tr.t,
            alpha_bar: setup.schedule.alpha_bar(tr.t),
            cond: policy.condition(tr.token)?.vector,
            target,
            reward,
        }))
    });
    let mut out = Vec::with_capacity(batch.len());
    for r in results {
        if let Some(s) = r? {
            out.push(s);
        }
    }
    Ok(out)
}

/// SGD with heavy-ball momentum: `v = mu * v + g`, `p -= lr * v`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, params: &impl Parameterized) -> Self {
        let velocity = params
            .named_params()
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape()))
            .collect();
        Self { lr, momentum, velocity }
    }

    /// Descent step on parameters with `mask[i]` set.
    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor], mask: &[bool]) {
        for (i, p) in params.into_iter().enumerate() {
            if !mask[i] {
                continue;
            }
            let v = self.velocity[i].data_mut();
            for ((pv, vv), gv) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(grads[i].data()) {
                *vv = self.momentum * *vv + gv;
                *pv -= self.lr * *vv;
            }
        }
    }
}

fn sum_grads(parts: Vec<Vec<Tensor>>, scale: f64) -> Result<Vec<Tensor>> {
    let mut iter = parts.into_iter();
    let Some(mut acc) = iter.next() else {
        return Ok(Vec::new());
    };
    for part in iter {
        for (a, p) in acc.iter_mut().zip(&part) {
            for (x, y) in a.data_mut().iter_mut().zip(p.data()) {
                *x += y;
            }
        }
    }
    for a in acc.iter_mut() {
        for x in a.data_mut() {
            *x *= scale;
        }
    }
    Ok(acc)
}

fn grads_finite(grads: &[Tensor]) -> bool {
    grads.iter().all(|g| g.all_finite())
}

/// Gradient of `(Q(x_t, a) - target)^2` with respect to the critic
/// parameters, and the squared error.
pub fn critic_sample_gradient(critic: &CriticNet, s: &CriticSample) -> Result<(Vec<Tensor>, f64)> {
    let mut g = Tape::new();
    let bound = critic.bind(&mut g, true);
    let x = g.frozen(&s.x_t);
    let a = g.frozen(&s.action);
    let q = critic.forward(&mut g, &bound, &x, &a, s.t, s.alpha_bar, &s.cond)?;
    let y = g.constant(Tensor::vector(vec![s.target])?);
    let d = g.sub(&q, &y)?;
    let sq = g.square(&d);
    let loss = g.sum(&sq);
    let err = g.value_of(&loss);
    let grads = g.backward(loss)?;
    Ok((bound.iter().map(|v| grads.wrt(*v)).collect(), err))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CriticOutcome {
    /// Mean squared regression error before the step.
    pub loss: f64,
    pub used: usize,
    pub skipped: usize,
    /// False when the gradient was non-finite and the step was not applied.
    pub applied: bool,
}

/// One gradient step on the critic's regression loss. Samples with a
/// non-finite target are skipped and counted.
pub fn critic_update(
    critic: &mut CriticNet,
    opt: &mut Sgd,
    batch: &[CriticSample],
    exec: Execution,
) -> Result<CriticOutcome> {
    let valid: Vec<&CriticSample> = batch.iter().filter(|s| s.target.is_finite()).collect();
    let skipped = batch.len() - valid.len();
    if valid.is_empty() {
        return Ok(CriticOutcome {
            loss: f64::NAN,
            used: 0,
            skipped,
            applied: false,
        });
    }
    let frozen: &CriticNet = critic;
    let parts = exec.map(valid.len(), |i| critic_sample_gradient(frozen, valid[i]));
    let mut grads = Vec::with_capacity(parts.len());
    let mut loss = 0.0;
    for p in parts {
        let (g, e) = p?;
        grads.push(g);
        loss += e;
    }
    let n = valid.len() as f64;
    let loss = loss / n;
    let grads = sum_grads(grads, 1.0 / n)?;
    let applied = loss.is_finite() && grads_finite(&grads);
    if applied {
        let mask = vec![true; grads.len()];
        opt.step(critic.params_mut(), &grads, &mask);
    }
    Ok(CriticOutcome {
        loss,
        used: valid.len(),
        skipped,
        applied,
    })
}

/// State the policy acts on, with the forward noise for the reconstruction
/// term and whether the critic term applies.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyState {
    pub x_t: Tensor,
    pub t: usize,
    pub token: usize,
    pub z: Tensor,
    pub active: bool,
}

impl PolicyState {
    pub fn from_transition(tr: &Transition, active: bool) -> Self {
        Self {
            x_t: tr.x_t.clone(),
            t: tr.t,
            token: tr.token,
            z: tr.z.clone(),
            active,
        }
    }
}

/// Per-sample policy loss `recon_weight * ||z - eps||^2 - q_weight * Q`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicyObjective {
    pub q_weight: f64,
    pub recon: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyGradient {
    pub grads: Vec<Tensor>,
    pub q: Option<f64>,
    pub recon: f64,
}

/// Gradient of the policy loss for one state. The Q term is built only when
/// `q_weight != 0` and the state is active, so a zero weight leaves the
/// reconstruction graph untouched. Q is still reported for active states.
pub fn policy_sample_gradient<C: ActionValue>(
    policy: &PolicyNet,
    critic: Option<&C>,
    schedule: &DiffusionSchedule,
    st: &PolicyState,
    obj: PolicyObjective,
) -> Result<PolicyGradient> {
    let mut g = Tape::new();
    let bound = policy.bind(&mut g, true);
    let x = g.frozen(&st.x_t);
    let a = policy.forward(&mut g, &bound, &x, &[st.t], &[st.token])?;
    let z = g.frozen(&st.z);
    let r = recon_objective_graph(&mut g, &z, &a)?;
    let recon = g.value_of(&r);
    let mut loss = obj.recon.then_some(r);
    let mut q_val = None;
    if let (Some(c), true) = (critic, st.active) {
        let ab = schedule.alpha_bar(st.t);
        let cond = policy.condition(st.token)?.vector;
        let q = c.q_graph(&mut g, &x, &a, st.t, ab, &cond)?;
        q_val = Some(g.tensor(&q).data()[0]);
        if obj.q_weight != 0.0 {
            let wq = g.scale(&q, -obj.q_weight);
            let wq = g.sum(&wq);
            loss = Some(match loss {
                Some(l) => g.add(&l, &wq)?,
                None => wq,
            });
        }
    }
    let grads = match loss {
        Some(l) => {
            let gr = g.backward(l)?;
            bound.all().iter().map(|v| gr.wrt(*v)).collect()
        }
        None => policy
            .named_params()
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape()))
            .collect(),
    };
    Ok(PolicyGradient { grads, q: q_val, recon })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicyOutcome {
    /// Pre-step mean Q over active states, NaN when none is active.
    pub mean_q: f64,
    /// Pre-step mean reconstruction loss.
    pub recon: f64,
    pub applied: bool,
}

/// Batch-mean gradient of the policy loss, with pre-step statistics.
pub fn policy_batch_gradient<C: ActionValue>(
    policy: &PolicyNet,
    critic: Option<&C>,
    schedule: &DiffusionSchedule,
    states: &[PolicyState],
    obj: PolicyObjective,
    exec: Execution,
) -> Result<(Vec<Tensor>, PolicyOutcome)> {
    let parts = exec.map(states.len(), |i| {
        policy_sample_gradient(policy, critic, schedule, &states[i], obj)
    });
    let mut grads = Vec::with_capacity(parts.len());
    let (mut q_sum, mut q_n, mut recon) = (0.0, 0usize, 0.0);
    for p in parts {
        let p = p?;
        if let Some(q) = p.q {
            q_sum += q;
            q_n += 1;
        }
        recon += p.recon;
        grads.push(p.grads);
    }
    let n = states.len().max(1) as f64;
    let grads = sum_grads(grads, 1.0 / n)?;
    let outcome = PolicyOutcome {
        mean_q: if q_n > 0 { q_sum / q_n as f64 } else { f64::NAN },
        recon: recon / n,
        applied: false,
    };
    Ok((grads, outcome))
}

#[allow(clippy::too_many_arguments)]
fn policy_step<C: ActionValue>(
    policy: &mut PolicyNet,
    opt: &mut Sgd,
    critic: Option<&C>,
    schedule: &DiffusionSchedule,
    states: &[PolicyState],
    obj: PolicyObjective,
    mask: &[bool],
    exec: Execution,
) -> Result<PolicyOutcome> {
    let (grads, mut outcome) = policy_batch_gradient(policy, critic, schedule, states, obj, exec)?;
    if grads.is_empty() {
        return Ok(outcome);
    }
    outcome.applied = grads_finite(&grads);
    if outcome.applied {
        opt.step(policy.params_mut(), &grads, mask);
    }
    Ok(outcome)
}

/// One ascent step on the batch-mean `Q(x_t, eps_theta(x_t))`. Critic
/// parameters are read only.
#[allow(clippy::too_many_arguments)]
pub fn policy_update_dpg<C: ActionValue>(
    policy: &mut PolicyNet,
    opt: &mut Sgd,
    critic: &C,
    schedule: &DiffusionSchedule,
    states: &[PolicyState],
    mask: &[bool],
    exec: Execution,
) -> Result<PolicyOutcome> {
    let obj = PolicyObjective {
        q_weight: 1.0,
        recon: false,
    };
    policy_step(policy, opt, Some(critic), schedule, states, obj, mask, exec)
}

/// One ascent step on `lambda * Q - ||z - eps_theta||^2`.
#[allow(clippy::too_many_arguments)]
pub fn composite_update<C: ActionValue>(
    policy: &mut PolicyNet,
    opt: &mut Sgd,
    critic: &C,
    schedule: &DiffusionSchedule,
    states: &[PolicyState],
    lambda: f64,
    mask: &[bool],
    exec: Execution,
) -> Result<PolicyOutcome> {
    let obj = PolicyObjective {
        q_weight: lambda,
        recon: true,
    };
    policy_step(policy, opt, Some(critic), schedule, states, obj, mask, exec)
}

/// One descent step on the reconstruction objective alone.
pub fn recon_update(
    policy: &mut PolicyNet,
    opt: &mut Sgd,
    schedule: &DiffusionSchedule,
    states: &[PolicyState],
    mask: &[bool],
    exec: Execution,
) -> Result<PolicyOutcome> {
    let obj = PolicyObjective {
        q_weight: 0.0,
        recon: true,
    };
    policy_step::<CriticNet>(policy, opt, None, schedule, states, obj, mask, exec)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    pub values: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardTraceRow {
    pub step: usize,
    pub t: usize,
    pub kind: String,
    pub value: f64,
}

#[derive(Debug, Clone)]
pub struct RunState {
    pub policy: PolicyNet,
    pub critic: Option<CriticNet>,
    pub step: usize,
    pub metrics: Vec<MetricRecord>,
    pub reward_trace: Vec<RewardTraceRow>,
    pub skipped_targets: u64,
    pub rng: RngStream,
}

/// Callbacks at evaluation points; returned values join the metric record.
pub trait TrainHooks {
    fn on_eval(&mut self, _state: &RunState, _setup: &TrainSetup) -> Result<BTreeMap<String, f64>> {
        Ok(BTreeMap::new())
    }
}

pub struct NoHooks;

impl TrainHooks for NoHooks {}

#[derive(Default)]
struct Window {
    sums: BTreeMap<&'static str, (f64, usize)>,
}

impl Window {
    fn add(&mut self, key: &'static str, v: f64) {
        if v.is_finite() {
            let e = self.sums.entry(key).or_insert((0.0, 0));
            e.0 += v;
            e.1 += 1;
        }
    }

    fn drain(&mut self) -> BTreeMap<String, f64> {
        let out = self
            .sums
            .iter()
            .map(|(k, (s, n))| (k.to_string(), s / *n as f64))
            .collect();
        self.sums.clear();
        out
    }
}

pub fn train_dpg(cfg: &TrainConfig, setup: &TrainSetup, hooks: &mut dyn TrainHooks) -> Result<RunState> {
    run_loop(cfg, setup, Algorithm::Dpg, hooks)
}

pub fn train_baseline(cfg: &TrainConfig, setup: &TrainSetup, hooks: &mut dyn TrainHooks) -> Result<RunState> {
    run_loop(cfg, setup, Algorithm::Baseline, hooks)
}

/// Runs whichever loop `cfg.algorithm` names.
pub fn train(cfg: &TrainConfig, setup: &TrainSetup, hooks: &mut dyn TrainHooks) -> Result<RunState> {
    run_loop(cfg, setup, cfg.algorithm, hooks)
}

fn run_loop(cfg: &TrainConfig, setup: &TrainSetup, algo: Algorithm, hooks: &mut dyn TrainHooks) -> Result<RunState> {
    cfg.validate()?;
    let policy = setup.init_policy(cfg.seed);
    let critic = (algo == Algorithm::Dpg).then(|| setup.init_critic(cfg.seed));
    let mask = cfg.param_mask.resolve(&policy)?;
    let mut policy_opt = Sgd::new(cfg.lr_policy, cfg.momentum, &policy);
    let mut critic_opt = critic.as_ref().map(|c| Sgd::new(cfg.lr_critic, cfg.momentum, c));
    let mut state = RunState {
        policy,
        critic,
        step: 0,
        metrics: Vec::new(),
        reward_trace: Vec::new(),
        skipped_targets: 0,
        rng: RngStream::new(cfg.seed, "run"),
    };
    let record = |state: &mut RunState, values: BTreeMap<String, f64>, hooks: &mut dyn TrainHooks| -> Result<()> {
        let mut values = values;
        values.extend(hooks.on_eval(state, setup)?);
        state.metrics.push(MetricRecord {
            step: state.step,
            values,
        });
        Ok(())
    };
    record(&mut state, BTreeMap::new(), hooks)?;

    let batch_stream = RngStream::new(cfg.seed, "batch");
    let critic_batch_stream = RngStream::new(cfg.seed, "critic-batch");
    let explore = RngStream::new(cfg.seed, "explore");
    let trajectory = RngStream::new(cfg.seed, "trajectory");
    let b = cfg.batch_size as u64;
    let k = cfg.critic_steps_per_policy_step as u64;
    let timesteps = setup.schedule.len();
    let mut window = Window::default();
    let mut nonfinite_run = 0usize;

    for step in 0..cfg.steps {
        let s64 = step as u64;
        let batch = draw_batch(setup, &batch_stream, s64 * b, cfg.batch_size)?;
        let mut finite = true;
        let outcome = match (&mut state.critic, &mut critic_opt) {
            (Some(critic), Some(copt)) => {
                for j in 0..k {
                    let cbatch = if j == 0 {
                        batch.clone()
                    } else {
                        draw_batch(setup, &critic_batch_stream, (s64 * (k - 1) + j - 1) * b, cfg.batch_size)?
                    };
                    let base = (s64 * k + j) * b;
                    let samples =
                        build_critic_batch(cfg, setup, &state.policy, critic, &cbatch, &explore, &trajectory, base)?;
                    if cfg.record_rewards {
                        for s in &samples {
                            state.reward_trace.push(RewardTraceRow {
                                step,
                                t: s.t,
                                kind: reward_label(&cfg.reward),
                                value: s.reward,
                            });
                        }
                    }
                    let co = critic_update(critic, copt, &samples, cfg.execution)?;
                    state.skipped_targets += co.skipped as u64;
                    if co.used > 0 {
                        finite &= co.applied;
                        window.add("critic_loss", co.loss);
                    }
                }
                let states: Vec<PolicyState> = batch
                    .iter()
                    .map(|tr| PolicyState::from_transition(tr, reward_active(&cfg.reward, tr.t, timesteps)))
                    .collect();
                let critic: &CriticNet = critic;
                if cfg.reward.kind == RewardKind::Composite {
                    composite_update(
                        &mut state.policy,
                        &mut policy_opt,
                        critic,
                        &setup.schedule,
                        &states,
                        cfg.reward.lambda,
                        &mask,
                        cfg.execution,
                    )?
                } else {
                    policy_update_dpg(
                        &mut state.policy,
                        &mut policy_opt,
                        critic,
                        &setup.schedule,
                        &states,
                        &mask,
                        cfg.execution,
                    )?
                }
            }
            _ => {
                let states: Vec<PolicyState> = batch.iter().map(|tr| PolicyState::from_transition(tr, false)).collect();
                recon_update(
                    &mut state.policy,
                    &mut policy_opt,
                    &setup.schedule,
                    &states,
                    &mask,
                    cfg.execution,
                )?
            }
        };
        finite &= outcome.applied && outcome.recon.is_finite();
        window.add("recon_loss", outcome.recon);
        window.add("mean_q", outcome.mean_q);
        nonfinite_run = if finite { 0 } else { nonfinite_run + 1 };
        if nonfinite_run >= MAX_NONFINITE_STEPS {
            return Err(Error::Diverged(format!(
                "{MAX_NONFINITE_STEPS} consecutive non-finite steps ending at step {step} (recon {}, mean Q {})",
                outcome.recon, outcome.mean_q
            )));
        }
        state.step = step + 1;
        if state.step.is_multiple_of(cfg.eval_every) || state.step == cfg.steps {
            let mut values = window.drain();
            values.insert("skipped_targets".into(), state.skipped_targets as f64);
            record(&mut state, values, hooks)?;
        }
    }
    Ok(state)
}

fn reward_label(spec: &RewardSpec) -> String {
    spec.components()
        .iter()
        .map(|k| match k {
            RewardKind::Recon => "recon",
            RewardKind::LookForward => "look_forward",
            RewardKind::FeatureSim => "feature_sim",
            RewardKind::Composite => "composite",
        })
        .collect::<Vec<_>>()
        .join("+")
}

/// Mean reconstruction loss of `policy` on a fixed held-out batch.
pub fn eval_recon(setup: &TrainSetup, policy: &PolicyNet, seed: u64, count: usize) -> Result<f64> {
    let batch = draw_batch(setup, &RngStream::new(seed, "recon-eval"), 0, count)?;
    let mut total = 0.0;
    for tr in &batch {
        total += recon_objective(&tr.z, &policy.predict(&tr.x_t, tr.t, tr.token)?)?;
    }
    Ok(total / count as f64)
}
