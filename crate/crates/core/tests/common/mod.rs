//! Oracles and fixtures shared by the integration and acceptance suites.
#![allow(dead_code)]

use dpg_core::concepts::{ConceptDataset, Domain, GlyphConfig};
use dpg_core::diffusion::{predict_x0, DiffusionSchedule, LatentCodec, ScheduleKind};
use dpg_core::networks::{CriticArch, CriticNet, Parameterized, PolicyArch, PolicyNet};
use dpg_core::numerics::gradcheck::{central_difference, relative_error};
use dpg_core::numerics::{gaussian, Graph, RngStream, Tape, Tensor, Var};
use dpg_core::rewards::FeatureEncoder;
use dpg_core::trainer::{policy_sample_gradient, ActionValue, PolicyObjective, PolicyState, TrainSetup};
use dpg_core::Result;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;
/// Denominator floor so that near-zero gradients compare absolutely.
pub const GRAD_FLOOR: f64 = 1e-6;

pub fn rng(seed: u64, label: &str) -> ChaCha8Rng {
    RngStream::new(seed, label).rng_at(0)
}

pub fn randn(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    gaussian(rng, shape)
}

fn flatten(ts: &[Tensor]) -> Vec<f64> {
    ts.iter().flat_map(|t| t.data().iter().copied()).collect()
}

fn unflatten(like: &[Tensor], flat: &[f64]) -> Vec<Tensor> {
    let mut off = 0;
    like.iter()
        .map(|t| {
            let n = t.numel();
            let out = Tensor::new(t.shape().to_vec(), flat[off..off + n].to_vec()).unwrap();
            off += n;
            out
        })
        .collect()
}

/// Fixed projection weights so that any output shape reduces to a scalar.
fn projection(shape: &[usize]) -> Tensor {
    randn(&mut rng(shape.iter().product::<usize>() as u64, "projection"), shape)
}

fn eval_projected<'p, F>(inputs: Vec<Tensor>, f: &F) -> (f64, Tape<'p>, Vec<Var>, Var)
where
    F: Fn(&mut Tape<'p>, &[Var]) -> Result<Var>,
{
    let mut g = Tape::new();
    let vars: Vec<Var> = inputs.into_iter().map(|t| g.param_owned(t)).collect();
    let out = f(&mut g, &vars).unwrap();
    let w = g.constant(projection(g.tensor(&out).shape()));
    let prod = g.mul(&out, &w).unwrap();
    let root = g.sum(&prod);
    (g.value_of(&root), g, vars, root)
}

/// Relative error between the tape gradient of `<w, f(inputs)>` (with a
/// fixed random `w`) and its central difference, over all inputs.
pub fn input_grad_error<'p, F>(inputs: &[Tensor], f: F) -> f64
where
    F: Fn(&mut Tape<'p>, &[Var]) -> Result<Var>,
{
    let (_, g, vars, root) = eval_projected(inputs.to_vec(), &f);
    let grads = g.backward(root).unwrap();
    let analytic: Vec<f64> = vars.iter().flat_map(|v| grads.wrt(*v).into_data()).collect();
    let numeric = central_difference(
        |x| eval_projected(unflatten(inputs, x), &f).0,
        &flatten(inputs),
        FD_STEP,
    );
    relative_error(&analytic, &numeric, GRAD_FLOOR)
}

/// Relative error between `analytic` parameter gradients of `net` and the
/// central difference of `loss`.
pub fn param_grad_error<P: Parameterized + Clone>(net: &P, analytic: &[Tensor], loss: impl Fn(&P) -> f64) -> f64 {
    let mut scratch = net.clone();
    let numeric = central_difference(
        |x| {
            scratch.load_flat(x).unwrap();
            loss(&scratch)
        },
        &net.flat_params(),
        FD_STEP,
    );
    relative_error(&flatten(analytic), &numeric, GRAD_FLOOR)
}

pub fn mixture_setup(seed: u64, concepts: usize, contexts: usize, timesteps: usize, floor: f64) -> TrainSetup {
    let ds = ConceptDataset::generate(Domain::Mixture2d, seed, concepts, contexts, &GlyphConfig::default()).unwrap();
    let schedule = DiffusionSchedule::new(timesteps, 1e-3, 0.2, ScheduleKind::Linear).unwrap();
    let enc = FeatureEncoder::new(2, 32, &RngStream::new(seed, "encoder"));
    let pa = PolicyArch {
        data_dim: 2,
        cond_dim: 4,
        temb_dim: 4,
        tokens: ds.n_tokens(),
        hidden: vec![16, 16],
    };
    let ca = CriticArch {
        data_dim: 2,
        cond_dim: 4,
        temb_dim: 4,
        hidden: vec![8, 8],
        lookahead_floor: floor,
    };
    TrainSetup::new(schedule, ds, LatentCodec::Identity, enc, pa, ca, false).unwrap()
}

pub fn small_policy(tokens: usize, hidden: Vec<usize>, seed: u64) -> PolicyNet {
    let arch = PolicyArch {
        data_dim: 2,
        cond_dim: 4,
        temb_dim: 4,
        tokens,
        hidden,
    };
    PolicyNet::new(arch, false, &RngStream::new(seed, "policy"))
}

pub fn small_critic(hidden: Vec<usize>, floor: f64, seed: u64) -> CriticNet {
    let arch = CriticArch {
        data_dim: 2,
        cond_dim: 4,
        temb_dim: 4,
        hidden,
        lookahead_floor: floor,
    };
    CriticNet::new(arch, &RngStream::new(seed, "critic"))
}

/// Random `(x0, z, z_hat, t)` on `s` and both sides of the clean-sample
/// identity: `(||x0_hat - x0||^2, w_t * ||z_hat - z||^2)`.
pub fn lookahead_identity(s: &DiffusionSchedule, r: &mut impl Rng, dim: usize) -> (f64, f64) {
    let t = r.random_range(0..s.len());
    let x0 = randn(r, &[1, dim]).scale(r.random_range(0.1..5.0));
    let z = randn(r, &[1, dim]);
    let z_hat = randn(r, &[1, dim]);
    let x_t = dpg_core::diffusion::forward_diffuse(&x0, t, &z, s).unwrap();
    let x0_hat = predict_x0(&x_t, &z_hat, t, s).unwrap();
    let lhs = x0_hat.sub(&x0).unwrap().squared_norm();
    let rhs = s.lookahead_weight(t) * z_hat.sub(&z).unwrap().squared_norm();
    (lhs, rhs)
}

/// `Q(a) = -||a - a*||^2`, independent of state.
pub struct QuadraticCritic {
    pub target: Tensor,
}

impl ActionValue for QuadraticCritic {
    fn q_graph<'p, G: Graph<'p>>(
        &'p self,
        g: &mut G,
        _x_t: &G::Value,
        action: &G::Value,
        _t: usize,
        _alpha_bar: f64,
        _cond: &Tensor,
    ) -> Result<G::Value> {
        let target = g.frozen(&self.target);
        let d = g.sub(action, &target)?;
        let sq = g.square(&d);
        let s = g.sum(&sq);
        Ok(g.scale(&s, -1.0))
    }
}

/// Relative error between the end-to-end policy gradient of `-Q(x, pi(x))`
/// and the two-pass composition `-(dpi/dtheta)^T dQ/da`.
pub fn dpg_chain_error<C: ActionValue>(
    policy: &PolicyNet,
    critic: &C,
    schedule: &DiffusionSchedule,
    st: &PolicyState,
) -> f64 {
    let obj = PolicyObjective {
        q_weight: 1.0,
        recon: false,
    };
    let end_to_end = policy_sample_gradient(policy, Some(critic), schedule, st, obj).unwrap();

    let action = policy.predict(&st.x_t, st.t, st.token).unwrap();
    let cond = policy.condition(st.token).unwrap().vector;
    let dq_da = {
        let mut g = Tape::new();
        let x = g.constant(st.x_t.clone());
        let a = g.param_owned(action);
        let q = critic
            .q_graph(&mut g, &x, &a, st.t, schedule.alpha_bar(st.t), &cond)
            .unwrap();
        let q = g.sum(&q);
        g.backward(q).unwrap().wrt(a)
    };
    let composed = {
        let mut g = Tape::new();
        let bound = policy.bind(&mut g, true);
        let x = g.frozen(&st.x_t);
        let a = policy.forward(&mut g, &bound, &x, &[st.t], &[st.token]).unwrap();
        let w = g.constant(dq_da.scale(-1.0));
        let prod = g.mul(&a, &w).unwrap();
        let root = g.sum(&prod);
        let grads = g.backward(root).unwrap();
        bound.all().iter().map(|v| grads.wrt(*v)).collect::<Vec<_>>()
    };
    relative_error(&flatten(&end_to_end.grads), &flatten(&composed), 0.0)
}

/// Worst relative gradient error per operation over `instances` random
/// instances of each.
pub fn gradient_suite(instances: usize) -> Vec<(&'static str, f64)> {
    use dpg_core::diffusion::{predict_x0_graph, recon_objective, recon_objective_graph};
    use dpg_core::rewards::{feature_sim_graph, look_forward_reward_graph};
    use dpg_core::trainer::{critic_sample_gradient, CriticSample};

    let schedule = DiffusionSchedule::new(100, 1e-3, 0.2, ScheduleKind::Linear).unwrap();
    let enc = FeatureEncoder::new(2, 16, &RngStream::new(5, "encoder"));
    let tokens = 6;
    let mut worst: Vec<(&'static str, f64)> = Vec::new();
    let mut record = |name: &'static str, err: f64| match worst.iter_mut().find(|(n, _)| *n == name) {
        Some(e) => e.1 = e.1.max(err),
        None => worst.push((name, err)),
    };

    for i in 0..instances as u64 {
        let r = &mut rng(i, "gradient-suite");
        let a = randn(r, &[2, 3]);
        let b = randn(r, &[2, 3]);
        record(
            "add",
            input_grad_error(&[a.clone(), b.clone()], |g, v| g.add(&v[0], &v[1])),
        );
        record(
            "sub",
            input_grad_error(&[a.clone(), b.clone()], |g, v| g.sub(&v[0], &v[1])),
        );
        record(
            "mul",
            input_grad_error(&[a.clone(), b.clone()], |g, v| g.mul(&v[0], &v[1])),
        );
        let m = randn(r, &[3, 4]);
        record(
            "matmul",
            input_grad_error(&[a.clone(), m.clone()], |g, v| g.matmul(&v[0], &v[1])),
        );
        let row = randn(r, &[1, 4]);
        record(
            "add_row",
            input_grad_error(&[m.clone(), row], |g, v| g.add_row(&v[0], &v[1])),
        );
        let factor: f64 = r.random_range(-3.0..3.0);
        record(
            "scale",
            input_grad_error(std::slice::from_ref(&a), move |g, v| Ok(g.scale(&v[0], factor))),
        );
        record(
            "sum",
            input_grad_error(std::slice::from_ref(&a), |g, v| Ok(g.sum(&v[0]))),
        );
        record(
            "mean",
            input_grad_error(std::slice::from_ref(&a), |g, v| Ok(g.mean(&v[0]))),
        );
        record(
            "square",
            input_grad_error(std::slice::from_ref(&a), |g, v| Ok(g.square(&v[0]))),
        );
        let positive = Tensor::new(vec![2, 3], a.data().iter().map(|x| x.abs() + 0.5).collect()).unwrap();
        record("sqrt", input_grad_error(&[positive], |g, v| Ok(g.sqrt(&v[0]))));
        record(
            "tanh",
            input_grad_error(std::slice::from_ref(&a), |g, v| Ok(g.tanh(&v[0]))),
        );
        let v5 = randn(r, &[1, 5]);
        record(
            "l2_norm",
            input_grad_error(std::slice::from_ref(&v5), |g, v| Ok(g.l2_norm(&v[0]))),
        );
        record("normalize", input_grad_error(&[v5], |g, v| Ok(g.normalize(&v[0]))));
        let c = randn(r, &[2, 2]);
        record(
            "concat",
            input_grad_error(&[c, a.clone()], |g, v| g.concat(&[v[0], v[1]])),
        );
        record(
            "reshape",
            input_grad_error(std::slice::from_ref(&a), |g, v| g.reshape(&v[0], &[3, 2])),
        );
        let idx = r.random_range(0..3);
        record(
            "select_row",
            input_grad_error(&[m], move |g, v| g.select_row(&v[0], idx)),
        );

        let t = r.random_range(0..schedule.len());
        let ab = schedule.alpha_bar(t);
        let x_t = randn(r, &[1, 2]);
        let z = randn(r, &[1, 2]);
        let z_hat = randn(r, &[1, 2]);
        record(
            "predict_x0",
            input_grad_error(&[x_t.clone(), z_hat.clone()], move |g, v| {
                predict_x0_graph(g, &v[0], &v[1], ab)
            }),
        );
        record(
            "recon_objective",
            input_grad_error(&[z.clone(), z_hat.clone()], |g, v| {
                recon_objective_graph(g, &v[0], &v[1])
            }),
        );
        let w = schedule.lookahead_weight(t).min(10.0);
        record(
            "look_forward_reward",
            input_grad_error(&[z.clone(), z_hat.clone()], move |g, v| {
                look_forward_reward_graph(g, &v[0], &v[1], w)
            }),
        );
        let x0_hat = randn(r, &[1, 2]);
        record(
            "feature_encoder",
            input_grad_error(std::slice::from_ref(&x0_hat), |g, v| enc.embed_graph(g, &v[0])),
        );
        let refs: Vec<Tensor> = (0..4).map(|_| enc.embed(&randn(r, &[1, 2])).unwrap()).collect();
        record(
            "feature_sim_reward",
            input_grad_error(&[x0_hat], |g, v| feature_sim_graph(g, &enc, &v[0], &refs)),
        );

        let token = r.random_range(0..tokens);
        let policy = small_policy(tokens, vec![8, 8], i);
        let critic = small_critic(vec![8, 4], if i % 2 == 0 { 1.0 } else { 0.3 }, i);
        let proj = randn(r, &[1, 2]);
        let analytic = {
            let mut g = Tape::new();
            let bound = policy.bind(&mut g, true);
            let x = g.frozen(&x_t);
            let out = policy.forward(&mut g, &bound, &x, &[t], &[token]).unwrap();
            let w = g.constant(proj.clone());
            let prod = g.mul(&out, &w).unwrap();
            let root = g.sum(&prod);
            let grads = g.backward(root).unwrap();
            bound.all().iter().map(|v| grads.wrt(*v)).collect::<Vec<_>>()
        };
        record(
            "policy_network",
            param_grad_error(&policy, &analytic, |p| {
                p.predict(&x_t, t, token).unwrap().dot(&proj).unwrap()
            }),
        );

        let cond = policy.condition(token).unwrap().vector;
        let action = randn(r, &[1, 2]);
        let analytic = {
            let mut g = Tape::new();
            let bound = critic.bind(&mut g, true);
            let x = g.frozen(&x_t);
            let a = g.frozen(&action);
            let q = critic.forward(&mut g, &bound, &x, &a, t, ab, &cond).unwrap();
            let q = g.sum(&q);
            let grads = g.backward(q).unwrap();
            bound.iter().map(|v| grads.wrt(*v)).collect::<Vec<_>>()
        };
        record(
            "critic_network",
            param_grad_error(&critic, &analytic, |c| c.value(&x_t, &action, t, ab, &cond).unwrap()),
        );
        let critic_ref = &critic;
        let cond_ref = &cond;
        record(
            "critic_action",
            input_grad_error(&[x_t.clone(), action.clone()], move |g, v| {
                critic_ref.q_graph(g, &v[0], &v[1], t, ab, cond_ref)
            }),
        );

        let sample = CriticSample {
            x_t: x_t.clone(),
            action: action.clone(),
            t,
            alpha_bar: ab,
            cond: cond.clone(),
            target: r.random_range(-5.0..0.0),
            reward: 0.0,
        };
        let (analytic, _) = critic_sample_gradient(&critic, &sample).unwrap();
        record(
            "critic_regression",
            param_grad_error(&critic, &analytic, |c| {
                (c.value(&sample.x_t, &sample.action, t, ab, &cond).unwrap() - sample.target).powi(2)
            }),
        );

        let lambda = r.random_range(0.0..2.0);
        let st = PolicyState {
            x_t: x_t.clone(),
            t,
            token,
            z: z.clone(),
            active: true,
        };
        let obj = PolicyObjective {
            q_weight: lambda,
            recon: true,
        };
        let pg = policy_sample_gradient(&policy, Some(&critic), &schedule, &st, obj).unwrap();
        record(
            "policy_objective",
            param_grad_error(&policy, &pg.grads, |p| {
                let a = p.predict(&x_t, t, token).unwrap();
                recon_objective(&z, &a).unwrap() - lambda * critic.value(&x_t, &a, t, ab, &cond).unwrap()
            }),
        );
    }
    worst
}
