use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use hetrel_bench::{academic_graph, model_config, token_table};
use hetrel_core::model::{forward, Batch};
use hetrel_core::tensor::Tape;
use hetrel_core::train::{pair_logits, pretrain_loss_var, sample_edges, Pair};
use hetrel_core::ModelParams;

fn train_step(c: &mut Criterion) {
    let (g, labels) = academic_graph(300, 0);
    let table = token_table(&g, &labels, 32, 2);
    let cfg = model_config(32, 2);
    let params = ModelParams::init(cfg.clone(), g.schema(), 0).unwrap();
    let samples = sample_edges(&g, 1, 0).unwrap();
    let nodes = samples.nodes();
    let batch = Batch::from_table(&g, &table, &nodes, 2).unwrap();
    let (pairs, y): (Vec<Pair>, Vec<bool>) = samples.labeled_pairs().into_iter().unzip();

    c.bench_function("forward", |b| {
        b.iter(|| {
            let mut t = Tape::new();
            let vars = params.store.bind(&mut t, |_| false);
            black_box(forward(&mut t, &vars, &cfg, &batch).unwrap().z)
        })
    });
    c.bench_function("forward_backward", |b| {
        b.iter(|| {
            let mut t = Tape::new();
            let vars = params.store.bind(&mut t, |_| true);
            let out = forward(&mut t, &vars, &cfg, &batch).unwrap();
            let lg = pair_logits(&mut t, &vars, &g, out.z, &nodes, &pairs).unwrap();
            let loss = pretrain_loss_var(&mut t, lg, &y).unwrap();
            black_box(t.backward(loss).unwrap())
        })
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = train_step
}
criterion_main!(benches);
