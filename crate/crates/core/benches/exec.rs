use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use vqa_anomaly::robusttrain::{step_gradients, Method, TrainConfig};
use vqa_anomaly::synthgen::{gen_anomaly, gen_id, Family, Task, WorldSpec};
use vqa_anomaly::vqamodel::{AttentionVariant, Model, ModelConfig};
use vqa_anomaly::Exec;

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn bench(c: &mut Criterion) {
    let world = WorldSpec::default();
    let model = Model::init(ModelConfig::for_world(&world, 32, 1, AttentionVariant::Context, 0)).unwrap();
    let id = gen_id(&world, 512, 1, Exec::Parallel).unwrap();
    let anom = gen_anomaly(&world, Task::T1, Family::Train, 64, 2, Exec::Parallel).unwrap();
    let cfg = TrainConfig { method: Method::Ra, ..TrainConfig::default() };

    let mut g = c.benchmark_group("generate_id_2000");
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| gen_id(&world, 2000, 3, exec).unwrap()));
    }
    g.finish();

    let mut g = c.benchmark_group("forward_512");
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| model.forward(&id, exec).unwrap()));
    }
    g.finish();

    let mut g = c.benchmark_group("ra_step_64x64");
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| step_gradients(&model, &id[..64], &anom, &cfg, exec).unwrap())
        });
    }
    g.finish();
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = bench
}
criterion_main!(benches);
