use criterion::{criterion_group, criterion_main, Criterion};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;
use xlmimo_core::channel::ChannelConfig;
use xlmimo_core::geometry::TopologyConfig;
use xlmimo_core::marl::{
    AgentSpec, Maddpg, Mlp, OutputActivation, ReplayBuffer, TrainConfig, Transition,
};
use xlmimo_core::signal::{PowerAllocation, SelectionAssignment, SignalConfig};
use xlmimo_core::tasks::{decode_scores, Scenario};

fn desk_scenario() -> Scenario {
    let topo = TopologyConfig {
        num_bs: 2,
        bs_rows: 4,
        bs_cols: 4,
        num_ue: 6,
        ue_rows: 1,
        ue_cols: 1,
        area_side: 100.0,
        ..Default::default()
    };
    Scenario::build(
        &topo,
        &ChannelConfig::default(),
        &SignalConfig::default(),
        1,
    )
    .unwrap()
}

fn channel(c: &mut Criterion) {
    let scn = desk_scenario();
    let rx = scn.receiver();
    let h = scn.realize(3);
    let all =
        SelectionAssignment::all_active(scn.num_bs(), scn.antennas_per_bs(), scn.num_streams());
    let powers = PowerAllocation::uniform(scn.num_streams(), scn.signal.p_max_w);
    c.bench_function("realize_channel 2x16 antennas, 6 streams", |b| {
        let mut i = 0u64;
        b.iter(|| {
            i += 1;
            black_box(scn.realize(i))
        })
    });
    c.bench_function("evaluate drop (combine + fuse + metrics)", |b| {
        b.iter(|| black_box(scn.evaluate(&rx, &h, &all.active, &powers).unwrap()))
    });
}

fn networks(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let net = Mlp::new(&[64, 256, 128, 1], OutputActivation::Identity, &mut rng).unwrap();
    let x = DMatrix::from_fn(64, 256, |_, _| rng.random_range(-1.0..1.0));
    let up = DMatrix::from_element(1, 256, 1.0);
    c.bench_function("critic forward+backward, batch 256", |b| {
        b.iter(|| {
            let (_, cache) = net.forward_batch(&x).unwrap();
            black_box(net.backward_batch(&cache, &up).unwrap())
        })
    });

    let specs = vec![
        AgentSpec {
            obs_dim: 8,
            act_dim: 4
        };
        4
    ];
    let cfg = TrainConfig {
        batch_size: 64,
        ..Default::default()
    };
    let mut agents = Maddpg::new(specs, cfg, &mut rng).unwrap();
    let mut buf = ReplayBuffer::new(1024).unwrap();
    for _ in 0..1024 {
        buf.push(Transition {
            joint_obs: (0..32).map(|_| rng.random_range(-1.0..1.0)).collect(),
            joint_actions: (0..16).map(|_| rng.random_range(-1.0..1.0)).collect(),
            rewards: vec![rng.random_range(0.0..1.0); 4],
            joint_next_obs: vec![0.0; 32],
            done: true,
        });
    }
    c.bench_function("maddpg update, 4 agents, batch 64", |b| {
        b.iter(|| {
            let batch = buf.sample(64, &mut rng).unwrap();
            black_box(agents.update(&batch).unwrap())
        })
    });
}

fn decode(c: &mut Criterion) {
    let scn = desk_scenario();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let scores: Vec<Vec<f64>> = (0..scn.num_streams())
        .map(|_| {
            (0..scn.total_antennas())
                .map(|_| rng.random_range(-1.0..1.0))
                .collect()
        })
        .collect();
    c.bench_function("decode_scores 6 agents x 32 antennas", |b| {
        b.iter(|| black_box(decode_scores(&scores, &scn.topology, &scn.mask).unwrap()))
    });
}

criterion_group!(benches, channel, networks, decode);
criterion_main!(benches);
