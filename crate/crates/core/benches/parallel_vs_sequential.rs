use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use cglens_core::config::Config;
use cglens_core::forest::{permutation_importance, train, Dataset, ForestParams};
use cglens_core::harness::{collect_synth, stage_rows};
use cglens_core::synth::{build_entries, CorpusConfig, ProfileSet};
use cglens_core::Exec;

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn corpus(duration: f64, per_profile: usize) -> Vec<cglens_core::synth::CorpusEntry> {
    let set = ProfileSet::shipped();
    let cc = CorpusConfig {
        profiles: vec!["fortnite".into(), "genshin-impact".into(), "dota-2".into(), "hearthstone".into()],
        sessions_per_profile: per_profile,
        duration_s: [duration, duration],
        seed: 2,
        ..CorpusConfig::default()
    };
    build_entries(&set, &cc).expect("bench corpus")
}

fn stage_dataset(cfg: &Config) -> Dataset {
    let (data, _) = collect_synth(&corpus(120.0, 2), cfg, Exec::Parallel).expect("collect");
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for d in &data {
        for (r, s) in stage_rows(d, &cfg.tracker).expect("rows") {
            rows.push(r);
            labels.push(s.as_str());
        }
    }
    Dataset::from_labels(rows, &labels).expect("dataset")
}

fn bench_synthesis(c: &mut Criterion) {
    let cfg = Config::default();
    let entries = corpus(20.0, 2);
    let mut g = c.benchmark_group("collect_synth");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| black_box(collect_synth(&entries, &cfg, exec).expect("collect")))
        });
    }
    g.finish();
}

fn bench_forest(c: &mut Criterion) {
    let cfg = Config::default();
    let ds = stage_dataset(&cfg);
    let params = ForestParams::new(32, 12, 5);
    let mut g = c.benchmark_group("forest_train");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| black_box(train(&ds, &params, exec).expect("train")))
        });
    }
    g.finish();

    let model = train(&ds, &params, Exec::Parallel).expect("train");
    let mut g = c.benchmark_group("permutation_importance");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| black_box(permutation_importance(&model, &ds.rows, &ds.targets, 1, 3, exec).expect("importance")))
        });
    }
    g.finish();
}

criterion_group!(benches, bench_synthesis, bench_forest);
criterion_main!(benches);
