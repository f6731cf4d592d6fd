use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use streamtrack::data::{make_training_clip, SamplingStrategy, SceneConfig};
use streamtrack::engine::{unroll_clip, Config, SessionOptions, TrackerSession};
use streamtrack::{Graph, Tensor};
use streamtrack_bench::{frames, model, queries};

fn matmul(c: &mut Criterion) {
    let a = Tensor::new([256, 256], (0..65536).map(|i| (i % 7) as f32 * 0.1).collect()).unwrap();
    c.bench_function("matmul_256", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let x = g.constant(a.clone()).unwrap();
            black_box(g.matmul_ex(x, x, false).unwrap());
        })
    });
}

fn encode(c: &mut Criterion) {
    let cfg = Config::desk();
    let m = model(&cfg);
    let f = frames(&cfg, 1).remove(0);
    c.bench_function("encode_desk_frame", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            black_box(m.encoder.encode(&mut g, &m.params, &f).unwrap());
        })
    });
}

fn session_step(c: &mut Criterion) {
    let cfg = Config::desk();
    let m = model(&cfg);
    let fs = frames(&cfg, 2);
    let qs = queries(&cfg, 32);
    c.bench_function("session_step_desk_n32", |b| {
        b.iter_batched(
            || {
                let mut s = TrackerSession::new(&m, &qs, SessionOptions::default()).unwrap();
                s.step(&fs[0]).unwrap();
                s
            },
            |mut s| black_box(s.step(&fs[1]).unwrap()),
            BatchSize::LargeInput,
        )
    });
}

fn train_unroll(c: &mut Criterion) {
    let cfg = Config::tiny();
    let m = model(&cfg);
    let scene = SceneConfig::desk().with_size(cfg.frame_h, cfg.frame_w);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let clip = make_training_clip(3, &scene, cfg.clip_len, SamplingStrategy::Uniform, 1.0, cfg.max_queries, &mut rng).unwrap();
    c.bench_function("unroll_and_backward_tiny", |b| {
        b.iter(|| {
            let run = unroll_clip(&m, &clip, 0.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
            let (loss, _) = run.loss.unwrap();
            black_box(run.graph.backward(loss).unwrap());
        })
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = matmul, encode, session_step, train_unroll
}
criterion_main!(benches);
