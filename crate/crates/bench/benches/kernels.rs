use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use std::hint::black_box;

use stc_core::autodiff::ConvSpec;
use stc_core::circuit::CircuitConfig;
use stc_core::neuron::{NeuronKind, NeuronParams, NeuronState};
use stc_core::prednet::{NetworkConfig, NetworkParams, RolloutPlan};
use stc_core::{Tape, Tensor};

fn ramp(shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |i| ((i * 7919) % 101) as f64 / 101.0 - 0.5)
}

fn kernels(c: &mut Criterion) {
    let x = ramp(&[8, 16, 8, 8]);
    let w = ramp(&[16, 16, 3, 3]);
    let wg = ramp(&[16, 4, 3, 3]);
    let dense = ConvSpec { groups: 1, stride: 1, padding: 1 };
    let grouped = ConvSpec { groups: 4, stride: 1, padding: 1 };

    c.bench_function("conv2d_fwd_bwd_16x8x8", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone()).unwrap();
            let wv = tape.leaf(w.clone()).unwrap();
            let y = tape.conv2d(xv, wv, None, dense).unwrap();
            let l = tape.mean(y).unwrap();
            black_box(tape.backward(l).unwrap());
        })
    });
    c.bench_function("group_conv2d_fwd_g4", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone()).unwrap();
            let wv = tape.constant(wg.clone()).unwrap();
            black_box(tape.conv2d(xv, wv, None, grouped).unwrap());
        })
    });
    c.bench_function("group_norm_fwd_bwd", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone()).unwrap();
            let g = tape.leaf(Tensor::ones(&[16])).unwrap();
            let be = tape.leaf(Tensor::zeros(&[16])).unwrap();
            let y = tape.group_norm(xv, 4, g, be, 1e-5).unwrap();
            let l = tape.mean(y).unwrap();
            black_box(tape.backward(l).unwrap());
        })
    });
}

fn network(c: &mut Criterion) {
    let cfg = |kind| NetworkConfig {
        frame: [1, 16, 16],
        patch: 2,
        channels: vec![16, 16, 16],
        kernel: 3,
        norm_groups: 4,
        norm_eps: 1e-5,
        neuron: NeuronParams::new(kind),
        circuit: CircuitConfig {
            groups: 4,
            kernel: 3,
            ..Default::default()
        },
    };
    let frame = ramp(&[8, 1, 16, 16]).map(|v| v + 0.5);
    let frames = ramp(&[8, 8, 1, 16, 16]).map(|v| v + 0.5);
    let plan = RolloutPlan::new(4, 4);
    for kind in [NeuronKind::Lif, NeuronKind::StcLif] {
        let net = NetworkParams::init(cfg(kind), 0).unwrap();
        c.bench_function(&format!("forward_step_{}", kind.name()), |b| {
            b.iter_batched(
                || vec![NeuronState::zeros(kind, &[8, 16, 8, 8]); 3],
                |mut states| black_box(net.forward_step(&mut states, &frame).unwrap()),
                BatchSize::SmallInput,
            )
        });
        c.bench_function(&format!("rollout_{}", kind.name()), |b| {
            b.iter(|| black_box(net.rollout(&plan, &frames).unwrap()))
        });
    }
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = kernels, network
}
criterion_main!(benches);
