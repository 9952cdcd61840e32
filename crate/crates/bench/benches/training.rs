use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use protolab::autodiff::Tape;
use protolab::env::ObservationSpace;
use protolab::evaluation::{play, zcp, TeacherRole};
use protolab::optim::{RmsProp, RmsPropConfig};
use protolab::rollout::{rollout, Teacher};
use protolab::training::run_batch;
use protolab::{ChannelConfig, LossSet, Mutation, Permutation};
use protolab_bench::{agent, rng};

fn train_step(c: &mut Criterion) {
    let space = ObservationSpace::new(3).unwrap();
    let mut group = c.benchmark_group("train_step");
    for (name, channel, loss) in [
        ("baseline_ac", ChannelConfig::default(), LossSet::Ac),
        (
            "mutation_sic_tm_pd",
            ChannelConfig {
                mutation: Mutation::Kind { probability: 0.3 },
                ..ChannelConfig::default()
            },
            LossSet::SicTmPd,
        ),
        (
            "permutation_ac",
            ChannelConfig {
                permutation: Permutation::Subset { size: 5 },
                ..ChannelConfig::default()
            },
            LossSet::Ac,
        ),
    ] {
        let mut params = agent(1);
        let mut opt = RmsProp::new(RmsPropConfig::default());
        let mut rng = rng(2);
        group.bench_function(name, |b| {
            b.iter(|| {
                let mut tape = Tape::new();
                let bound = params.bind(&mut tape);
                let (_, _, total) =
                    run_batch(&mut tape, &space, &bound, &channel, loss, 32, &mut rng).unwrap();
                let grads = tape.backward(total).unwrap();
                let grads: Vec<_> = bound
                    .vars()
                    .iter()
                    .map(|&v| grads.get_or_zeros(v))
                    .collect();
                let mut refs: Vec<_> = params.tensors_mut().iter_mut().collect();
                opt.step(&mut refs, &grads).unwrap();
            })
        });
    }
    group.finish();
}

fn rollout_forward(c: &mut Criterion) {
    let space = ObservationSpace::new(3).unwrap();
    let params = agent(3);
    let channel = ChannelConfig::default();
    let mut rng = rng(4);
    c.bench_function("rollout_forward_batch32", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let bound = params.bind_frozen(&mut tape);
            rollout(
                &mut tape,
                &space,
                Teacher::Policy(&bound),
                &bound,
                &channel,
                32,
                &mut rng,
            )
            .unwrap()
        })
    });
}

fn evaluation(c: &mut Criterion) {
    let a = agent(5);
    let clean = ChannelConfig::clean(5);
    let mut r = rng(6);
    c.bench_function("selfplay_1000", |b| {
        b.iter(|| play(TeacherRole::Agent(&a), &a, &clean, 1000, &mut r).unwrap())
    });
    let agents: Vec<_> = (0..6).map(agent).collect();
    c.bench_function("zcp_6_agents_170_games", |b| {
        b.iter_batched(
            || agents.clone(),
            |agents| zcp(&agents, 170, 7).unwrap(),
            BatchSize::LargeInput,
        )
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = train_step, rollout_forward, evaluation
}
criterion_main!(benches);
