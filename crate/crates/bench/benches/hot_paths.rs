use criterion::{criterion_group, criterion_main, Criterion};
use hyperdt_core::*;
use hyperdt_core::optim::rng_from;
use hyperdt_core::model::{dt_forward, init_dt_params, AdaptationParams};
use hyperdt_core::adapt::AdaptationVars;

fn desk_cfg() -> DTConfig {
    DTConfig {
        d_x: 64,
        n_blocks: 2,
        n_heads: 2,
        context_len: 6,
        d_s: 4,
        d_a: 2,
        max_ep_len: 130,
        rtg_scale: 10.0,
        prompt_cap: 20,
    }
}

fn segment(cfg: &DTConfig, seed: u64) -> TrajectorySegment {
    let mut rng = rng_from(seed, "bench_seg", 0);
    TrajectorySegment {
        states: Tensor::randn(vec![cfg.context_len, cfg.d_s], 1.0, &mut rng),
        actions: Tensor::randn(vec![cfg.context_len, cfg.d_a], 0.5, &mut rng),
        rewards_to_go: (0..cfg.context_len).map(|i| (cfg.context_len - i) as f64).collect(),
        timesteps: (0..cfg.context_len as u32).collect(),
        action_mask: vec![true; cfg.context_len],
    }
}

fn bench_forward(c: &mut Criterion) {
    let cfg = desk_cfg();
    let mut rng = rng_from(1, "bench", 0);
    let params = init_dt_params(&cfg, &mut rng);
    let seg = segment(&cfg, 2);
    c.bench_function("dt_forward_desk", |b| {
        b.iter(|| {
            model::predict_actions(&params, &cfg, &seg, &AdaptationParams::None, None).unwrap()
        })
    });
}

fn bench_forward_backward(c: &mut Criterion) {
    let cfg = desk_cfg();
    let mut rng = rng_from(3, "bench", 0);
    let params = init_dt_params(&cfg, &mut rng);
    let seg = segment(&cfg, 4);
    c.bench_function("dt_forward_backward_desk", |b| {
        b.iter(|| {
            let (_, grads) = optim::evaluate_with_gradients(&params, |tape, bound| {
                let pred = dt_forward(tape, bound, "dt.", &cfg, &seg, &AdaptationVars::None, None)?;
                model::action_loss(tape, pred, &seg.actions, &seg.action_mask)
            })
            .unwrap();
            grads
        })
    });
}

fn bench_generate_adapters(c: &mut Criterion) {
    let cfg = desk_cfg();
    let mut hcfg = HyperNetConfig::for_target(&cfg, HyperNetVariant::Adapter { d_h: 8 });
    hcfg.d_e = 32;
    hcfg.d_z = 32;
    let mut rng = rng_from(5, "bench", 0);
    let phi = hypernet::init_hypernet_params(&hcfg, &mut rng);
    let demo = Demonstration {
        states: Tensor::randn(vec![120, cfg.d_s], 1.0, &mut rng),
        rewards_to_go: (0..120).map(|i| (120 - i) as f64).collect(),
        timesteps: (0..120).collect(),
        actions: None,
    };
    c.bench_function("generate_adapters_desk", |b| {
        b.iter(|| hypernet::generate_adapters(&phi, &hcfg, &cfg, &demo).unwrap())
    });
}

fn bench_env_episode(c: &mut Criterion) {
    let layout = MazeLayout::medium();
    let task = maze::train_tasks()[0];
    c.bench_function("expert_episode", |b| {
        b.iter(|| maze::rollout_expert(&layout, task, 0.1, 7).unwrap())
    });
}

criterion_group!(
    benches,
    bench_forward,
    bench_forward_backward,
    bench_generate_adapters,
    bench_env_episode
);
criterion_main!(benches);
