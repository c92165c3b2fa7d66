//! Sequential vs rayon-parallel execution of the data-parallel loops.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use dualhead::bench::workload_patches;
use dualhead::data_io::synth::{synth_generate, SynthParams};
use dualhead::matcher::{match_templates, MatchParams, Template, TemplateEntry};
use dualhead::nn::{build_model, BackboneSpec, DualHeadConfig};
use dualhead::patch::{extract_all_patches, PatchConfig};
use dualhead::train::{loss_and_gradients, LossWeights, Sample, SuppressionFlags};
use dualhead::Exec;

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn forward(c: &mut Criterion) {
    let model = build_model(&BackboneSpec::tiny(), &DualHeadConfig::default(), 0).unwrap();
    let patches = workload_patches(224, 16, 0);
    let mut g = c.benchmark_group("forward_16_patches");
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| black_box(model.forward(&patches, exec).unwrap()))
        });
    }
    g.finish();
}

fn gradients(c: &mut Criterion) {
    let model = build_model(&BackboneSpec::tiny(), &DualHeadConfig::default(), 0).unwrap();
    let patches = workload_patches(224, 16, 1);
    let target = vec![0.1; 64];
    let batch: Vec<Sample<'_>> = patches
        .iter()
        .enumerate()
        .map(|(i, p)| Sample {
            patch: p,
            label: i % 2,
            target: &target,
        })
        .collect();
    let (w, s) = (LossWeights::default(), SuppressionFlags::default());
    let mut g = c.benchmark_group("gradients_16_samples");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| black_box(loss_and_gradients(&model, &batch, &w, &s, exec).unwrap()))
        });
    }
    g.finish();
}

fn patch_extraction(c: &mut Criterion) {
    let (image, minutiae) = synth_generate(&SynthParams::default()).unwrap();
    let cfg = PatchConfig::default();
    let mut g = c.benchmark_group("patch_extraction");
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| black_box(extract_all_patches(&image, &minutiae, None, &cfg, exec).unwrap()))
        });
    }
    g.finish();
}

fn pair_scoring(c: &mut Criterion) {
    let templates: Vec<Template> = (0..12u64)
        .map(|seed| {
            let (_, ms) = synth_generate(&SynthParams {
                identity_seed: seed / 2,
                impression_seed: seed,
                ..Default::default()
            })
            .unwrap();
            let entries = ms
                .iter()
                .enumerate()
                .map(|(i, m)| TemplateEntry {
                    minutia: *m,
                    descriptor: (0..64).map(|k| ((i * 7 + k) % 13) as f64 - 6.0).collect(),
                })
                .collect();
            Template::new(format!("t{seed}"), seed as u32, 0, entries).unwrap()
        })
        .collect();
    let pairs: Vec<(usize, usize)> = (0..templates.len())
        .flat_map(|i| (i + 1..templates.len()).map(move |j| (i, j)))
        .collect();
    let params = MatchParams::default();
    let mut g = c.benchmark_group("pair_scoring_66_pairs");
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                black_box(exec.map(&pairs, |&(i, j)| match_templates(&templates[i], &templates[j], &params).unwrap().score))
            })
        });
    }
    g.finish();
}

criterion_group!(benches, forward, gradients, patch_extraction, pair_scoring);
criterion_main!(benches);
