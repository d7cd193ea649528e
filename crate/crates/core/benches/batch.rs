use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use dpg_core::config::RunConfig;
use dpg_core::numerics::RngStream;
use dpg_core::par::Execution;
use dpg_core::rewards::{RewardKind, TargetMode};
use dpg_core::trainer::{
    build_critic_batch, critic_update, draw_batch, policy_batch_gradient, train, NoHooks, PolicyObjective, PolicyState,
    Sgd,
};

const BATCH: usize = 64;
const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.trainer.batch_size = BATCH;
    cfg
}

fn critic_batch(c: &mut Criterion) {
    let mut group = c.benchmark_group("critic_batch");
    for (kind, mode) in [
        ("look_forward", TargetMode::Discounted),
        ("feature_sim_mc", TargetMode::MonteCarlo),
    ] {
        let mut cfg = config();
        cfg.trainer.reward.bases = vec![if kind == "look_forward" {
            RewardKind::LookForward
        } else {
            RewardKind::FeatureSim
        }];
        cfg.trainer.reward.target_mode = mode;
        let setup = cfg.setup().unwrap();
        let policy = setup.init_policy(0);
        let critic = setup.init_critic(0);
        let batch = draw_batch(&setup, &RngStream::new(0, "bench"), 0, BATCH).unwrap();
        let explore = RngStream::new(0, "explore");
        let trajectory = RngStream::new(0, "trajectory");
        for (name, exec) in MODES {
            cfg.trainer.execution = exec;
            let tc = cfg.trainer.clone();
            group.bench_function(BenchmarkId::new(kind, name), |b| {
                b.iter(|| build_critic_batch(&tc, &setup, &policy, &critic, &batch, &explore, &trajectory, 0).unwrap())
            });
        }
    }
    group.finish();
}

fn critic_step(c: &mut Criterion) {
    let cfg = config();
    let setup = cfg.setup().unwrap();
    let policy = setup.init_policy(0);
    let critic = setup.init_critic(0);
    let batch = draw_batch(&setup, &RngStream::new(0, "bench"), 0, BATCH).unwrap();
    let samples = build_critic_batch(
        &cfg.trainer,
        &setup,
        &policy,
        &critic,
        &batch,
        &RngStream::new(0, "explore"),
        &RngStream::new(0, "trajectory"),
        0,
    )
    .unwrap();
    let mut group = c.benchmark_group("critic_update");
    for (name, exec) in MODES {
        group.bench_function(name, |b| {
            b.iter_batched(
                || (critic.clone(), Sgd::new(1e-3, 0.9, &critic)),
                |(mut net, mut opt)| critic_update(&mut net, &mut opt, &samples, exec).unwrap(),
                criterion::BatchSize::SmallInput,
            )
        });
    }
    group.finish();
}

fn policy_gradient(c: &mut Criterion) {
    let cfg = config();
    let setup = cfg.setup().unwrap();
    let policy = setup.init_policy(0);
    let critic = setup.init_critic(0);
    let states: Vec<PolicyState> = draw_batch(&setup, &RngStream::new(0, "bench"), 0, BATCH)
        .unwrap()
        .iter()
        .map(|t| PolicyState::from_transition(t, true))
        .collect();
    let obj = PolicyObjective {
        q_weight: 1.0,
        recon: true,
    };
    let mut group = c.benchmark_group("policy_gradient");
    for (name, exec) in MODES {
        group.bench_function(name, |b| {
            b.iter(|| policy_batch_gradient(&policy, Some(&critic), &setup.schedule, &states, obj, exec).unwrap())
        });
    }
    group.finish();
}

fn training(c: &mut Criterion) {
    let mut group = c.benchmark_group("train_20_steps");
    group.sample_size(10);
    for (name, exec) in MODES {
        let mut cfg = config();
        cfg.trainer.steps = 20;
        cfg.trainer.eval_every = 20;
        cfg.trainer.execution = exec;
        let setup = cfg.setup().unwrap();
        group.bench_function(name, |b| b.iter(|| train(&cfg.trainer, &setup, &mut NoHooks).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, critic_batch, critic_step, policy_gradient, training);
criterion_main!(benches);
