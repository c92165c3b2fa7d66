//! End-to-end acceptance checks. Each test prints one `criterion N PASS|FAIL`
//! line to stdout (uncaptured) and then asserts.
//!
//! The training-based criteria share four runs on one synthetic dataset;
//! every test holds a global lock so the latency benchmark never competes
//! with a training run for the CPU.

use std::collections::HashSet;
use std::io::Write;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::Instant;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use dualhead::bench::{build_reference_pipelines, run_bench, Workload};
use dualhead::data_io::synth::{generate_dataset, synth_generate, SynthDatasetSpec, SynthParams};
use dualhead::data_io::{DatasetManifest, Split};
use dualhead::matcher::{match_templates, MatchParams, Template, TemplateEntry};
use dualhead::metrics::{
    e_fake_at_e_live, enumerate_fvc_pairs, evaluate, frr_at_far, pad_errors, EvalConfig, EvalReport,
};
use dualhead::nn::{build_model, count_params_for, BackboneSpec, BlockSpec, DualHeadConfig, DualHeadModel, StemSpec};
use dualhead::patch::{extract_all_patches, PatchConfig};
use dualhead::pipeline::{build_patch_set, DataConfig};
use dualhead::train::{
    evaluate_losses, loss_and_gradients, total_loss, train_joint, Gradients, LossWeights, PatchSet, PseudoTeacher, Sample,
    SuppressionFlags, TeacherOracle, TrainConfig, TrainHistory,
};
use dualhead::Exec;

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(n: u32, name: &str, ok: bool, detail: String) {
    let line = format!("criterion {n:>2} {} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
    let _ = writeln!(std::io::stdout().lock(), "{line}");
    assert!(ok, "{line}");
}

// ---------------------------------------------------------------- shared runs

struct Dataset {
    _dir: tempfile::TempDir,
    manifest: DatasetManifest,
    data: DataConfig,
    train: PatchSet,
    val: PatchSet,
}

fn dataset() -> &'static Dataset {
    static DS: OnceLock<Dataset> = OnceLock::new();
    DS.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthDatasetSpec {
            n_fingers: 20,
            n_impressions: 4,
            ..Default::default()
        };
        let manifest = generate_dataset(&spec, dir.path()).unwrap();
        let data = DataConfig::default();
        let teacher = PseudoTeacher::new(64, 0);
        let train = build_patch_set(&manifest, Split::Train, &teacher, &data, Exec::Parallel).unwrap();
        let val = build_patch_set(&manifest, Split::Val, &teacher, &data, Exec::Parallel).unwrap();
        Dataset {
            _dir: dir,
            manifest,
            data,
            train,
            val,
        }
    })
}

struct Run {
    history: TrainHistory,
    report: EvalReport,
    seconds: f64,
}

impl Run {
    fn ace(&self) -> f64 {
        self.report.pad.as_ref().unwrap().acer
    }

    fn frr_at(&self, far: f64) -> f64 {
        let m = self.report.matching.as_ref().unwrap();
        m.frr_at_far.iter().find(|p| p.far_target == far).unwrap().frr
    }

    fn n_genuine(&self) -> usize {
        self.report.matching.as_ref().unwrap().n_genuine
    }
}

fn experiment(s_sd: i8, s_m: i8) -> Run {
    let ds = dataset();
    let t = Instant::now();
    let model = build_model(&BackboneSpec::tiny(), &DualHeadConfig::default(), 0).unwrap();
    let cfg = TrainConfig {
        exec: Exec::Parallel,
        ..Default::default()
    };
    let flags = SuppressionFlags::new(s_sd, s_m).unwrap();
    let (model, history) = train_joint(model, &ds.train, &ds.val, &LossWeights::default(), &flags, &cfg).unwrap();
    let eval = EvalConfig {
        far_targets: vec![0.0, 1.0],
        ..Default::default()
    };
    let report = evaluate(&model, &ds.manifest, Split::Test, &ds.data, &eval, Exec::Parallel).unwrap();
    Run {
        history,
        report,
        seconds: t.elapsed().as_secs_f64(),
    }
}

fn joint_run() -> &'static Run {
    static R: OnceLock<Run> = OnceLock::new();
    R.get_or_init(|| experiment(1, 1))
}

// ------------------------------------------------------------------ criteria

#[test]
fn c01_weighted_total_is_exact() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let w = LossWeights {
            w_sd: rng.random_range(0.0..20.0),
            w_m: rng.random_range(0.0..20.0),
        };
        let (l_sd, l_m) = (rng.random_range(0.0..10.0), rng.random_range(0.0..10.0));
        let want = w.w_m * l_m + w.w_sd * l_sd;
        let got = total_loss(l_sd, l_m, &w);
        worst = worst.max((got - want).abs() / want.abs().max(f64::MIN_POSITIVE));
    }
    report(1, "weighted total loss", worst <= 1e-12, format!("1000 triples, max rel err {worst:.1e}"));
}

/// Worst per-parameter relative error between analytic base gradients and
/// central differences of the signed task losses, over the three flag
/// settings.
fn worst_fd_error(
    model: &DualHeadModel,
    batch: &[Sample<'_>],
    picks: &[usize],
    analytic: &[Gradients],
    flags: &[(i8, i8)],
    step: f64,
) -> f64 {
    let w = LossWeights::default();
    let mut worst: f64 = 0.0;
    for &i in picks {
        let eval = |delta: f64| {
            let mut m = model.clone();
            m.base.params[i] += delta;
            evaluate_losses(&m, batch, &w, Exec::Sequential).unwrap()
        };
        let (p, n) = (eval(step), eval(-step));
        let (dsd, dm) = ((p.l_sd - n.l_sd) / (2.0 * step), (p.l_m - n.l_m) / (2.0 * step));
        for (g, &(s_sd, s_m)) in analytic.iter().zip(flags) {
            let numeric = f64::from(s_sd) * w.w_sd * dsd + f64::from(s_m) * w.w_m * dm;
            let scale = g.base[i].abs().max(numeric.abs());
            if scale > 0.0 {
                worst = worst.max((g.base[i] - numeric).abs() / scale);
            }
        }
    }
    worst
}

#[test]
fn c02_gradient_contract() {
    let _g = serial();
    let t = Instant::now();
    let model = build_model(&BackboneSpec::tiny(), &DualHeadConfig::default(), 3).unwrap();
    let n_params = model.count_params().total;

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (image, minutiae) = synth_generate(&SynthParams::default()).unwrap();
    let patches = extract_all_patches(&image, &minutiae, Some(4), &PatchConfig::default(), Exec::Sequential).unwrap();
    let labels = [0usize, 1, 1, 0];
    let targets: Vec<Vec<f64>> = (0..4)
        .map(|_| (0..64).map(|_| 0.2 * Distribution::<f64>::sample(&StandardNormal, &mut rng)).collect())
        .collect();
    let batch: Vec<Sample<'_>> = (0..4)
        .map(|i| Sample {
            patch: &patches[i],
            label: labels[i],
            target: &targets[i],
        })
        .collect();
    let w = LossWeights::default();
    let flags = [(1i8, 1i8), (-1, 1), (1, -1)];
    let grads: Vec<Gradients> = flags
        .iter()
        .map(|&(a, b)| {
            let s = SuppressionFlags::new(a, b).unwrap();
            loss_and_gradients(&model, &batch, &w, &s, Exec::Sequential).unwrap().1
        })
        .collect();

    let picks: Vec<usize> = sample(&mut rng, model.base.len(), 24).into_vec();
    let worst = worst_fd_error(&model, &batch, &picks, &grads, &flags, 1e-3);
    let worst_fine = worst_fd_error(&model, &batch, &picks, &grads, &flags, 1e-6);

    let joint = SuppressionFlags::default();
    let spoof_only = LossWeights { w_sd: w.w_sd, w_m: 0.0 };
    let match_only = LossWeights { w_sd: 0.0, w_m: w.w_m };
    let (_, g_sd) = loss_and_gradients(&model, &batch, &spoof_only, &joint, Exec::Sequential).unwrap();
    let (_, g_m) = loss_and_gradients(&model, &batch, &match_only, &joint, Exec::Sequential).unwrap();
    let decomposition = grads[2]
        .base
        .iter()
        .zip(g_sd.base.iter().zip(&g_m.base))
        .map(|(g, (a, b))| (g - (a - b)).abs())
        .fold(0.0, f64::max);
    let head_unchanged = grads[2].match_head == grads[0].match_head;

    let ok = n_params <= 50_000 && worst < 1e-3 && decomposition <= 1e-6 && head_unchanged;
    report(
        2,
        "gradient contract",
        ok,
        format!(
            "{n_params} params, 24 base weights x 3 flag settings, max rel err {worst:.2e} at step 1e-3 \
             ({worst_fine:.1e} at step 1e-6); suppressed-match decomposition max abs diff {decomposition:.1e}; \
             match head unchanged {head_unchanged}; {:.1}s",
            t.elapsed().as_secs_f64()
        ),
    );
}

fn unit_params(in_c: usize, out_c: usize, k: usize, groups: usize) -> usize {
    k * k * (in_c / groups) * out_c + 2 * out_c
}

fn bottleneck_params(in_c: usize, out_c: usize, expand: usize) -> usize {
    let hidden = in_c * expand;
    let expansion = if expand == 1 { 0 } else { unit_params(in_c, hidden, 1, 1) };
    expansion + unit_params(hidden, hidden, 3, hidden) + unit_params(hidden, out_c, 1, 1)
}

/// Per-block closed form for the inverted-residual layouts:
/// returns (base, one spoof head, one match head).
fn formula_counts(spec: &BackboneSpec, split: usize, dim: usize) -> (usize, usize, usize) {
    let StemSpec::Conv { out, kernel, .. } = spec.stem else {
        panic!("formula covers conv stems only")
    };
    let mut per_block = Vec::new();
    let mut c = out;
    for b in &spec.blocks {
        let BlockSpec::InvertedResidual {
            expand,
            out,
            repeats,
            ..
        } = *b
        else {
            panic!("formula covers inverted residual blocks only")
        };
        per_block.push(bottleneck_params(c, out, expand) + (repeats - 1) * bottleneck_params(out, out, expand));
        c = out;
    }
    let n_base = spec.blocks.len() - split;
    let base = unit_params(spec.in_channels, out, kernel, 1) + per_block[..n_base].iter().sum::<usize>();
    let mut head_trunk: usize = per_block[n_base..].iter().sum();
    if let Some(w) = spec.head_conv {
        head_trunk += unit_params(c, w, 1, 1);
        c = w;
    }
    (base, head_trunk + c * 2 + 2, head_trunk + c * dim + dim)
}

#[test]
fn c03_split_point_bookkeeping() {
    let _g = serial();
    let mut failures = Vec::new();
    let mut checked = 0;
    for spec in [BackboneSpec::tiny(), BackboneSpec::dhm_full()] {
        let total_blocks = spec.total_blocks();
        let mut prev: Option<(usize, usize)> = None;
        for split in 0..=total_blocks {
            let cfg = DualHeadConfig::with_split(split);
            let c = count_params_for(&spec, &cfg).unwrap();
            let (base, sd, m) = formula_counts(&spec, split, cfg.descriptor_dim);
            if (c.base, c.sd_head, c.match_head) != (base, sd, m) {
                failures.push(format!("{:?} split {split}: {c:?} vs formula {base}/{sd}/{m}", spec.variant));
            }
            if c.base + c.sd_head + c.match_head != c.total {
                failures.push(format!("{:?} split {split}: parts do not sum", spec.variant));
            }
            if let Some((pb, pt)) = prev {
                if c.base > pb || c.total < pt {
                    failures.push(format!("{:?} split {split}: not monotone", spec.variant));
                }
            }
            prev = Some((c.base, c.total));
            checked += 1;
        }
        let model = build_model(&spec, &DualHeadConfig::with_split(total_blocks.min(2)), 0).unwrap();
        if model.base_blocks() + model.head_blocks() != total_blocks {
            failures.push(format!("{:?}: block bookkeeping", spec.variant));
        }
    }
    report(
        3,
        "split-point bookkeeping",
        failures.is_empty(),
        if failures.is_empty() {
            format!("{checked} (layout, split) pairs match the per-block formula and are monotone")
        } else {
            failures.join("; ")
        },
    )
}

#[test]
fn c04_reference_parameter_counts() {
    let _g = serial();
    let within = |got: f64, want: f64| (got - want).abs() <= 0.05 * want;
    let spec = BackboneSpec::dhm_full();
    let s0 = count_params_for(&spec, &DualHeadConfig::with_split(0)).unwrap();
    let s3 = count_params_for(&spec, &DualHeadConfig::with_split(3)).unwrap();
    let series_params = 2 * s0.base + s0.sd_head + s0.match_head;
    let param_reduction = 100.0 * (1.0 - s0.total as f64 / series_params as f64);
    let pipes = build_reference_pipelines(&spec, &DualHeadConfig::with_split(0), 0).unwrap();
    let joint_bytes = pipes.joint.serialized_size().unwrap() as f64;
    let series_bytes = (pipes.pad.serialized_size().unwrap() + pipes.descriptor.serialized_size().unwrap()) as f64;
    let byte_reduction = 100.0 * (1.0 - joint_bytes / series_bytes);

    let ok = within(s0.base as f64, 1.81e6)
        && within(s0.total as f64, 2.72e6)
        && within(s3.base as f64, 0.24e6)
        && within(s3.total as f64, 4.29e6)
        && (param_reduction - 40.0).abs() <= 5.0
        && (byte_reduction - 40.0).abs() <= 5.0;
    let mib = |b: f64| b / (1024.0 * 1024.0);
    report(
        4,
        "reference parameter counts",
        ok,
        format!(
            "split 0 base {} total {}; split 3 base {} total {}; reduction {param_reduction:.1}% params, \
             {byte_reduction:.1}% bytes ({:.3} vs {:.3} MiB)",
            s0.base,
            s0.total,
            s3.base,
            s3.total,
            mib(joint_bytes),
            mib(series_bytes)
        ),
    );
}

#[test]
fn c05_fvc_protocol_counts() {
    let _g = serial();
    let (g1, i1) = enumerate_fvc_pairs(100, 8);
    let (g2, i2) = enumerate_fvc_pairs(140, 12);
    let got = [(g1.len(), i1.len()), (g2.len(), i2.len())];
    report(
        5,
        "protocol pair counts",
        got == [(2800, 4950), (9240, 9730)],
        format!("(100,8) -> {:?}, (140,12) -> {:?}", got[0], got[1]),
    );
}

fn random_scores(rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = rng.random_range(1..=200);
    let coarse = rng.random_bool(0.5);
    (0..n)
        .map(|_| {
            let v: f64 = rng.random();
            if coarse {
                (v * 10.0).round() / 10.0
            } else {
                v
            }
        })
        .collect()
}

fn pct(k: usize, n: usize) -> f64 {
    100.0 * k as f64 / n as f64
}

/// Tries every candidate threshold (each negative score plus one float past
/// the largest) and keeps the smallest one meeting the target.
fn brute_rate_at(positive: &[f64], negative: &[f64], target: f64) -> f64 {
    let top = negative.iter().copied().fold(f64::NEG_INFINITY, f64::max).next_up();
    let mut best: Option<f64> = None;
    for &t in negative.iter().chain([top].iter()) {
        let accepted = negative.iter().filter(|&&v| v >= t).count();
        if pct(accepted, negative.len()) <= target && best.is_none_or(|b| t < b) {
            best = Some(t);
        }
    }
    let t = best.unwrap();
    pct(positive.iter().filter(|&&v| v < t).count(), positive.len())
}

#[test]
fn c06_metrics_match_brute_force() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut mismatches = 0;
    for _ in 0..200 {
        let a = random_scores(&mut rng);
        let b = random_scores(&mut rng);
        let target = [0.0, 0.1, 1.0, 5.0, 10.0, 50.0][rng.random_range(0..6)];

        for &t in a.iter().chain(&b).chain([0.5, -1.0, 2.0].iter()) {
            let e = pad_errors(&a, &b, t).unwrap();
            let apcer = pct(b.iter().filter(|&&v| v < t).count(), b.len());
            let bpcer = pct(a.iter().filter(|&&v| v >= t).count(), a.len());
            if e.apcer != apcer || e.bpcer != bpcer || e.acer != (apcer + bpcer) / 2.0 {
                mismatches += 1;
            }
        }
        if frr_at_far(&a, &b, target).unwrap() != brute_rate_at(&a, &b, target) {
            mismatches += 1;
        }
        if e_fake_at_e_live(&a, &b, target).unwrap() != brute_rate_at(&b, &a, target) {
            mismatches += 1;
        }
    }
    report(
        6,
        "metric brute-force equivalence",
        mismatches == 0,
        format!("200 random score sets, {mismatches} mismatches"),
    );
}

#[test]
fn c07_end_to_end_synthetic() {
    let _g = serial();
    let run = joint_run();
    let (ace, frr) = (run.ace(), run.frr_at(1.0));
    report(
        7,
        "end-to-end synthetic experiment",
        ace <= 5.0 && frr <= 5.0,
        format!(
            "ACE {ace:.2}% (<= 5), FRR@FAR1% {frr:.2}% (<= 5), best epoch {}, {:.0}s",
            run.history.best_epoch, run.seconds
        ),
    );
}

#[test]
fn c08_suppression_direction() {
    let _g = serial();
    let joint = joint_run();
    let no_spoof = experiment(-1, 1);
    let no_match = experiment(1, -1);
    // a zero joint FRR is floored at one genuine pair
    let floor = joint.frr_at(1.0).max(100.0 / joint.n_genuine() as f64);
    let spoof_ok = no_spoof.ace() >= 40.0 && no_spoof.frr_at(1.0) <= 2.0 * floor;
    let match_ok = no_match.frr_at(1.0) >= 10.0 * floor && no_match.ace() < 10.0;
    report(
        8,
        "suppression direction",
        spoof_ok && match_ok,
        format!(
            "joint ACE {:.2}% FRR {:.2}%; spoof suppressed ACE {:.2}% (>= 40) FRR {:.2}% (<= {:.2}) [{}]; \
             match suppressed FRR {:.2}% (>= {:.2}) ACE {:.2}% (< 10) [{}]",
            joint.ace(),
            joint.frr_at(1.0),
            no_spoof.ace(),
            no_spoof.frr_at(1.0),
            2.0 * floor,
            if spoof_ok { "ok" } else { "missed" },
            no_match.frr_at(1.0),
            10.0 * floor,
            no_match.ace(),
            if match_ok { "ok" } else { "missed" },
        ),
    );
}

#[test]
fn c09_joint_speedup() {
    let _g = serial();
    let pipes = build_reference_pipelines(&BackboneSpec::tiny(), &DualHeadConfig::with_split(0), 0).unwrap();
    let w = Workload::default();
    let r = run_bench(&pipes, &w).unwrap();
    let series = &r.series.latency_ms_per_image;
    let additive = series
        .samples_ms
        .iter()
        .zip(r.pad_only.samples_ms.iter().zip(&r.descriptor_only.samples_ms))
        .all(|(s, (p, d))| (s - (p + d)).abs() <= 1e-6);
    let ok = (35.0..=60.0).contains(&r.speedup_pct) && additive;
    report(
        9,
        "joint vs series speedup",
        ok,
        format!(
            "series {:.2} ms/img, joint {:.2} ms/img, speedup {:.1}% in [35, 60]; additive within 1 ns {additive}",
            series.mean_ms, r.joint.latency_ms_per_image.mean_ms, r.speedup_pct
        ),
    );
}

#[test]
fn c10_determinism() {
    let _g = serial();
    let first = joint_run();
    let second = experiment(1, 1);
    let same_csv = first.history.to_csv() == second.history.to_csv();
    let same_report = first.report == second.report;
    report(
        10,
        "determinism",
        same_csv && same_report,
        format!("identical history CSV {same_csv}, identical eval report {same_report}"),
    );
}

fn teacher_template(identity: u64, teacher: &PseudoTeacher) -> Template {
    let params = SynthParams {
        identity_seed: identity,
        ..Default::default()
    };
    let (image, minutiae) = synth_generate(&params).unwrap();
    let patches = extract_all_patches(&image, &minutiae, None, &PatchConfig::default(), Exec::Sequential).unwrap();
    let entries = patches
        .iter()
        .map(|p| TemplateEntry {
            minutia: minutiae[p.minutia_index],
            descriptor: teacher.descriptor(&image.id(), p.minutia_index, p).unwrap(),
        })
        .collect();
    Template::new(image.id(), identity as u32, 1, entries).unwrap()
}

#[test]
fn c11_matcher_properties() {
    let _g = serial();
    let teacher = PseudoTeacher::new(64, 0);
    let params = MatchParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut cache = std::collections::HashMap::new();
    let mut template = |id: u64| cache.entry(id).or_insert_with(|| teacher_template(id, &teacher)).clone();

    let mut pairs = HashSet::new();
    while pairs.len() < 100 {
        let (a, b) = (rng.random_range(0..60u64), rng.random_range(0..60u64));
        if a != b {
            pairs.insert((a.min(b), a.max(b)));
        }
    }
    let mut pairs: Vec<_> = pairs.into_iter().collect();
    pairs.sort_unstable();

    let mut self_min: f64 = 1.0;
    let mut asym: f64 = 0.0;
    let mut imposter_sum = 0.0;
    for &(a, b) in &pairs {
        let (ta, tb) = (template(a), template(b));
        let ab = match_templates(&ta, &tb, &params).unwrap().score;
        let ba = match_templates(&tb, &ta, &params).unwrap().score;
        asym = asym.max((ab - ba).abs());
        imposter_sum += ab;
        self_min = self_min.min(match_templates(&ta, &ta, &params).unwrap().score);
    }
    let imposter_mean = imposter_sum / pairs.len() as f64;
    report(
        11,
        "matcher properties",
        self_min >= 0.99 && imposter_mean < 0.2 && asym <= 1e-6,
        format!("min self score {self_min:.4}, imposter mean {imposter_mean:.4} over 100 pairs, max asymmetry {asym:.1e}"),
    );
}

#[test]
fn joint_training_converges() {
    let _g = serial();
    let h = &joint_run().history;
    let ratio = h.last().train.total / h.initial().train.total;
    assert!(ratio < 0.1, "train total fell only to {ratio:.3} of its initial value");
}
