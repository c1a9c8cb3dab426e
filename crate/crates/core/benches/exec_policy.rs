use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use polarfuse::dataset::{synthesize, Split};
use polarfuse::metrics::{evaluate, EvalConfig, ScoredBox};
use polarfuse::model::NetConfig;
use polarfuse::par::Exec;
use polarfuse::pasting::enhance_scenes;
use polarfuse::sampling_db::{build_database_with, DbConfig};
use polarfuse::simulator::SimConfig;
use polarfuse::training::prepare_all;

const POLICIES: [(&str, Exec); 2] = [("seq", Exec::Seq), ("par", Exec::Par)];

fn pipeline(c: &mut Criterion) {
    let sim = SimConfig { train_scenes: 24, val_scenes: 0, ..SimConfig::default() };
    let net = NetConfig::default();
    let samples = synthesize(&sim, &net.bev, Split::Train, Exec::Seq).unwrap();
    let scenes: Vec<_> = samples.iter().map(|s| s.scene.clone()).collect();
    let db_cfg = DbConfig::default();
    let db = build_database_with(&scenes, &db_cfg, Exec::Seq).unwrap();
    let enhanced = enhance_scenes(&scenes, &db, Exec::Seq).unwrap();

    // jittered ground truth stands in for detector output
    let gts: Vec<_> = samples.iter().map(|s| s.boxes.clone()).collect();
    let dets: Vec<Vec<ScoredBox>> = gts
        .iter()
        .enumerate()
        .map(|(f, boxes)| {
            boxes
                .iter()
                .enumerate()
                .map(|(i, b)| {
                    let mut b = b.clone();
                    b.center[0] += 0.05 * ((f + i) % 5) as f64;
                    ScoredBox { bbox: b, score: 1.0 / (1.0 + (f * 7 + i) as f64) }
                })
                .collect()
        })
        .collect();

    let mut g = c.benchmark_group("exec_policy");
    g.sample_size(10);
    for (name, exec) in POLICIES {
        g.bench_with_input(BenchmarkId::new("synthesize", name), &exec, |b, &e| {
            b.iter(|| synthesize(&sim, &net.bev, Split::Train, e).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("build_database", name), &exec, |b, &e| {
            b.iter(|| build_database_with(&scenes, &db_cfg, e).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("enhance", name), &exec, |b, &e| {
            b.iter(|| enhance_scenes(&scenes, &db, e).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("prepare", name), &exec, |b, &e| {
            b.iter(|| prepare_all(&samples, Some(&enhanced), &net, e))
        });
        g.bench_with_input(BenchmarkId::new("evaluate", name), &exec, |b, &e| {
            b.iter(|| evaluate(&dets, &gts, &EvalConfig::default(), e).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, pipeline);
criterion_main!(benches);
