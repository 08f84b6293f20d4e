use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use medgraph::encoder::NegativeSampler;
use medgraph::par::Exec;
use medgraph::synth::{generate, GenConfig, READMIT_TASK};
use medgraph::trainer::{init_params, loss_and_grad_with, SeqItem, StructBatch, TrainConfig};

fn batch_gradient(c: &mut Criterion) {
    let cohort = generate(&GenConfig { n_patients: 200, ..Default::default() }).expect("cohort");
    let cfg = TrainConfig { task: Some(READMIT_TASK.into()), embed_dim: 32, hidden_dim: 64, rnn_dim: 32, ..Default::default() };
    let params = init_params(&cohort, &cfg).expect("params");
    let sampler = NegativeSampler::from_graph(&cohort.graph);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let visits: Vec<usize> = (0..cfg.batch_visits.min(cohort.n_visits())).collect();
    let structural = StructBatch::for_visits(&cohort, &sampler, &visits, cfg.negatives, &mut rng).expect("batch");

    let mut group = c.benchmark_group("loss_and_grad");
    for &n_seqs in &[8usize, 32, 128] {
        let seqs: Vec<SeqItem> = (0..n_seqs).map(|p| SeqItem::sample(&cohort, p, cfg.embed_dim, &mut rng)).collect();
        let mut modes = vec![("sequential", Exec::Sequential)];
        #[cfg(feature = "parallel")]
        modes.push(("parallel", Exec::Parallel));
        for (name, exec) in modes {
            group.bench_with_input(BenchmarkId::new(name, n_seqs), &seqs, |b, seqs| {
                b.iter(|| loss_and_grad_with(exec, &params, &cfg, &cohort, &structural, seqs).expect("loss"))
            });
        }
    }
    group.finish();
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = batch_gradient
}
criterion_main!(benches);
