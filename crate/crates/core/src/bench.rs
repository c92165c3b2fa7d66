//! Series, parallel and joint inference pipelines compared for latency,
//! parameter count and serialized size.

use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data_io::Minutia;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::nn::{build_model, BackboneSpec, DualHeadConfig, DualHeadModel, SingleHeadModel};
use crate::patch::Patch;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineMode {
    Series,
    Parallel,
    Joint,
}

/// The joint model and the two standalone networks made from its
/// base + head stacks.
#[derive(Debug, Clone)]
pub struct ReferencePipelines {
    pub joint: DualHeadModel,
    pub pad: SingleHeadModel,
    pub descriptor: SingleHeadModel,
}

pub fn build_reference_pipelines(spec: &BackboneSpec, config: &DualHeadConfig, seed: u64) -> Result<ReferencePipelines> {
    let joint = build_model(spec, config, seed)?;
    Ok(ReferencePipelines::from_model(joint))
}

impl ReferencePipelines {
    pub fn from_model(joint: DualHeadModel) -> Self {
        let (pad, descriptor) = joint.split_into_series();
        ReferencePipelines { joint, pad, descriptor }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Workload {
    pub n_images: usize,
    pub minutiae_per_image: usize,
    /// Patches per forward call.
    pub batch_size: usize,
    pub repetitions: usize,
    pub warmup: usize,
    pub exec: Exec,
    pub seed: u64,
}

impl Default for Workload {
    fn default() -> Self {
        Workload {
            n_images: 4,
            minutiae_per_image: 49,
            batch_size: 49,
            repetitions: 5,
            warmup: 1,
            exec: Exec::Sequential,
            seed: 0,
        }
    }
}

impl Workload {
    pub fn validate(&self) -> Result<()> {
        if self.n_images == 0 || self.minutiae_per_image == 0 || self.batch_size == 0 || self.repetitions == 0 {
            return Err(Error::Config(
                "bench workload: images, minutiae, batch and repetitions must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub mean_ms: f64,
    pub std_ms: f64,
    /// Per-image milliseconds for each repetition.
    pub samples_ms: Vec<f64>,
}

impl LatencyStats {
    fn from_samples(samples_ms: Vec<f64>) -> Self {
        let n = samples_ms.len() as f64;
        let mean_ms = samples_ms.iter().sum::<f64>() / n;
        let var = if samples_ms.len() > 1 {
            samples_ms.iter().map(|v| (v - mean_ms).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        LatencyStats {
            mean_ms,
            std_ms: var.sqrt(),
            samples_ms,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyMeasurements {
    pub pad_only: LatencyStats,
    pub descriptor_only: LatencyStats,
    pub series: LatencyStats,
    pub parallel: LatencyStats,
    pub joint: LatencyStats,
}

/// Deterministic pseudo-random patches; latency does not depend on content.
pub fn workload_patches(size: usize, n: usize, seed: u64) -> Vec<Patch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|k| Patch {
            size,
            pixels: (0..size * size).map(|_| rng.random::<f32>()).collect(),
            source_minutia: Minutia::new(0.0, 0.0, 0.0),
            minutia_index: k,
            source_image: format!("bench{}", k),
        })
        .collect()
}

/// Times the three networks back to back on every batch. Series time is the
/// sum of the two standalone passes measured in the same loop, so it is
/// additive by construction; parallel time is the slower of the two.
pub fn measure_latency(p: &ReferencePipelines, w: &Workload) -> Result<LatencyMeasurements> {
    w.validate()?;
    let patches = workload_patches(p.joint.spec.input_size, w.n_images * w.minutiae_per_image, w.seed);
    let run = |timed: bool| -> Result<[f64; 3]> {
        let mut acc = [0.0; 3];
        for batch in patches.chunks(w.batch_size) {
            let t0 = Instant::now();
            std::hint::black_box(p.pad.forward(batch, w.exec)?);
            let t1 = Instant::now();
            std::hint::black_box(p.descriptor.forward(batch, w.exec)?);
            let t2 = Instant::now();
            std::hint::black_box(p.joint.forward(batch, w.exec)?);
            let t3 = Instant::now();
            if timed {
                acc[0] += (t1 - t0).as_secs_f64();
                acc[1] += (t2 - t1).as_secs_f64();
                acc[2] += (t3 - t2).as_secs_f64();
            }
        }
        Ok(acc)
    };
    for _ in 0..w.warmup {
        run(false)?;
    }
    let per_image = 1e3 / w.n_images as f64;
    let mut cols: [Vec<f64>; 5] = Default::default();
    for _ in 0..w.repetitions {
        let [pad, desc, joint] = run(true)?;
        cols[0].push(pad * per_image);
        cols[1].push(desc * per_image);
        cols[2].push((pad + desc) * per_image);
        cols[3].push(pad.max(desc) * per_image);
        cols[4].push(joint * per_image);
    }
    let [a, b, c, d, e] = cols;
    Ok(LatencyMeasurements {
        pad_only: LatencyStats::from_samples(a),
        descriptor_only: LatencyStats::from_samples(b),
        series: LatencyStats::from_samples(c),
        parallel: LatencyStats::from_samples(d),
        joint: LatencyStats::from_samples(e),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeFigures {
    pub mode: PipelineMode,
    pub latency_ms_per_image: LatencyStats,
    pub params_total: usize,
    pub serialized_bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MachineInfo {
    pub cpu_model: String,
    pub logical_cores: usize,
    pub os: String,
}

impl MachineInfo {
    pub fn detect() -> Self {
        let cpu_model = fs::read_to_string("/proc/cpuinfo")
            .ok()
            .and_then(|s| {
                s.lines()
                    .find(|l| l.starts_with("model name"))
                    .and_then(|l| l.split(':').nth(1))
                    .map(|m| m.trim().to_string())
            })
            .unwrap_or_else(|| "unknown".into());
        MachineInfo {
            cpu_model,
            logical_cores: std::thread::available_parallelism().map_or(1, |n| n.get()),
            os: std::env::consts::OS.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub machine: MachineInfo,
    pub variant: String,
    pub split_point: usize,
    pub workload: Workload,
    pub pad_only: LatencyStats,
    pub descriptor_only: LatencyStats,
    pub series: ModeFigures,
    pub parallel: ModeFigures,
    pub joint: ModeFigures,
    pub speedup_pct: f64,
    pub param_reduction_pct: f64,
    pub bytes_reduction_pct: f64,
    /// Quantised on-device timing is not measured.
    pub mobile: Option<serde_json::Value>,
}

fn reduction(series: f64, joint: f64) -> f64 {
    100.0 * (series - joint) / series
}

pub fn bench_report(p: &ReferencePipelines, w: &Workload, lat: LatencyMeasurements) -> Result<BenchReport> {
    let two_params = p.pad.param_count() + p.descriptor.param_count();
    let two_bytes = p.pad.serialized_size()? + p.descriptor.serialized_size()?;
    let joint_params = p.joint.count_params().total;
    let joint_bytes = p.joint.serialized_size()?;
    let speedup_pct = reduction(lat.series.mean_ms, lat.joint.mean_ms);
    Ok(BenchReport {
        machine: MachineInfo::detect(),
        variant: format!("{:?}", p.joint.spec.variant),
        split_point: p.joint.config.split_point,
        workload: w.clone(),
        pad_only: lat.pad_only,
        descriptor_only: lat.descriptor_only,
        series: ModeFigures {
            mode: PipelineMode::Series,
            latency_ms_per_image: lat.series,
            params_total: two_params,
            serialized_bytes: two_bytes,
        },
        parallel: ModeFigures {
            mode: PipelineMode::Parallel,
            latency_ms_per_image: lat.parallel,
            params_total: two_params,
            serialized_bytes: two_bytes,
        },
        joint: ModeFigures {
            mode: PipelineMode::Joint,
            latency_ms_per_image: lat.joint,
            params_total: joint_params,
            serialized_bytes: joint_bytes,
        },
        speedup_pct,
        param_reduction_pct: reduction(two_params as f64, joint_params as f64),
        bytes_reduction_pct: reduction(two_bytes as f64, joint_bytes as f64),
        mobile: None,
    })
}

pub fn run_bench(p: &ReferencePipelines, w: &Workload) -> Result<BenchReport> {
    let lat = measure_latency(p, w)?;
    bench_report(p, w, lat)
}

pub fn emit_bench_report(report: &BenchReport, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(report)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}
