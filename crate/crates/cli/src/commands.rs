use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Serialize;

use dualhead::bench::{build_reference_pipelines, emit_bench_report, run_bench, ReferencePipelines};
use dualhead::data_io::synth::generate_dataset;
use dualhead::data_io::{
    assign_splits, load_manifest, save_image, DatasetManifest, FingerprintImage, Liveness, ManifestRecord, Split,
};
use dualhead::matcher::{correspondences_csv, extract_template, load_template, match_templates, save_template};
use dualhead::metrics::{
    analyze_split, evaluate, evaluate_matching, evaluate_spoof, export_embeddings, export_histogram, EvalReport,
    SplitAnalysis,
};
use dualhead::nn::{build_model, DualHeadModel, ParamCounts};
use dualhead::pipeline::{build_patch_set, load_record, load_split};
use dualhead::train::{
    train_joint_with_progress, train_probe, FileTeacher, PseudoTeacher, TeacherOracle, TrainHistory,
};
use dualhead::{Error, Result};

use crate::config::ExperimentConfig;

type CliResult = anyhow::Result<()>;

fn prepare_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

/// Validates, creates the output directory and drops the config copy there.
fn begin(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    cfg.validate()?;
    prepare_out(out)?;
    cfg.write(out)
}

fn manifest(cfg: &ExperimentConfig) -> Result<DatasetManifest> {
    load_manifest(cfg.manifest_path()?)
}

/// The manifest and split an evaluation reads; `All` relabels every record
/// as test so the whole dataset is evaluated as one pool.
fn eval_view(cfg: &ExperimentConfig, m: DatasetManifest) -> Result<(DatasetManifest, Split)> {
    match cfg.eval_split.split() {
        Some(s) => Ok((m, s)),
        None => {
            let mut all = m;
            all.records.iter_mut().for_each(|r| r.split = Split::Test);
            all.validate()?;
            Ok((all, Split::Test))
        }
    }
}

fn teacher(cfg: &ExperimentConfig) -> Result<Box<dyn TeacherOracle>> {
    let t: Box<dyn TeacherOracle> = match &cfg.teacher_file {
        Some(p) => Box::new(FileTeacher::load(p)?),
        None => Box::new(PseudoTeacher::new(cfg.descriptor_dim, cfg.teacher_seed)),
    };
    if t.dim() != cfg.descriptor_dim {
        return Err(Error::Config(format!(
            "teacher_file: descriptors are {}-d, descriptor_dim is {}",
            t.dim(),
            cfg.descriptor_dim
        )));
    }
    Ok(t)
}

fn trained_model(cfg: &ExperimentConfig) -> Result<DualHeadModel> {
    let path = cfg
        .model
        .as_deref()
        .ok_or_else(|| Error::Config("model: required (use --model)".into()))?;
    DualHeadModel::load_expecting(path, cfg.descriptor_dim)
}

// ------------------------------------------------------------------- synth

pub fn synth(cfg: &ExperimentConfig, out: &Path, force: bool) -> CliResult {
    cfg.validate()?;
    if out.exists() {
        let non_empty = fs::read_dir(out).map_err(|e| Error::io(out, e))?.next().is_some();
        if non_empty && !force {
            return Err(Error::Config(format!(
                "{} exists and is not empty; pass --force to write into it",
                out.display()
            ))
            .into());
        }
    }
    let m = generate_dataset(&cfg.synth, out)?;
    let mut cfg = cfg.clone();
    cfg.manifest = Some(out.join("manifest.json"));
    cfg.write(out)?;
    let live = m.records.iter().filter(|r| r.liveness == Liveness::Live).count();
    println!(
        "wrote {} images ({} live, {} spoof) to {}: train {}, val {}, test {}",
        m.records.len(),
        live,
        m.records.len() - live,
        out.display(),
        m.count(Split::Train),
        m.count(Split::Val),
        m.count(Split::Test)
    );
    Ok(())
}

// ----------------------------------------------------------------- patches

pub fn patches(cfg: &ExperimentConfig, out: &Path, limit: Option<usize>) -> CliResult {
    begin(cfg, out)?;
    let (m, split) = eval_view(cfg, manifest(cfg)?)?;
    let dir = out.join("patches");
    prepare_out(&dir)?;
    let mut index = String::from("file,image,minutia_index,x,y,theta,liveness\n");
    let mut count = 0;
    for rec in m.split(split).take(limit.unwrap_or(usize::MAX)) {
        let img = load_record(&m, rec, &cfg.data)?;
        let stem = Path::new(&img.key)
            .file_stem()
            .map_or_else(|| img.key.clone(), |s| s.to_string_lossy().into_owned());
        for p in img.patches(cfg.data.eval_minutiae_cap, &cfg.data.patch, cfg.exec)? {
            let name = format!("{stem}_m{:03}.png", p.minutia_index);
            let pixels = p.pixels.iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect();
            save_image(&FingerprintImage::new(p.size, p.size, pixels)?, &dir.join(&name))?;
            let mn = p.source_minutia;
            writeln!(index, "{name},{},{},{},{},{},{}", img.key, p.minutia_index, mn.x, mn.y, mn.theta, rec.liveness)
                .unwrap();
            count += 1;
        }
    }
    write_text(&out.join("patches.csv"), &index)?;
    println!("wrote {count} patches to {}", dir.display());
    Ok(())
}

// ------------------------------------------------------------------- train

struct Trained {
    model: DualHeadModel,
    history: TrainHistory,
    report: Option<EvalReport>,
}

#[derive(Serialize)]
struct TrainSummary {
    params: ParamCounts,
    best_epoch: usize,
    stop_reason: dualhead::train::StopReason,
    epochs_run: usize,
    initial_train_total: f64,
    final_train_total: f64,
}

/// Trains into `dir` (model, history, log, summary) and, when the manifest
/// has test records, evaluates the best checkpoint there.
fn train_into(cfg: &ExperimentConfig, m: &DatasetManifest, dir: &Path) -> Result<Trained> {
    prepare_out(dir)?;
    let mut m = m.clone();
    if m.count(Split::Val) == 0 {
        assign_splits(&mut m.records, cfg.train.val_fraction, cfg.seed)?;
    }
    let t = teacher(cfg)?;
    let train = build_patch_set(&m, Split::Train, t.as_ref(), &cfg.data, cfg.exec)?;
    let val = build_patch_set(&m, Split::Val, t.as_ref(), &cfg.data, cfg.exec)?;
    let model = build_model(&cfg.backbone()?, &cfg.head_config(), cfg.seed)?;
    eprintln!(
        "training {:?} split {} on {} train / {} val patches",
        cfg.variant,
        cfg.split_point,
        train.len(),
        val.len()
    );

    let log_path = dir.join("train_log.txt");
    let mut log = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut progress = |r: &dualhead::train::EpochRecord| {
        let line = format!(
            "epoch {:>3} lr {:.1e} train {:.4}/{:.5}/{:.4} val {:.4}/{:.5}/{:.4}",
            r.epoch, r.lr, r.train.l_sd, r.train.l_m, r.train.total, r.val.l_sd, r.val.l_m, r.val.total
        );
        eprintln!("{line}");
        let _ = writeln!(log, "{line}");
    };
    let (model, history) =
        train_joint_with_progress(model, &train, &val, &cfg.weights, &cfg.suppression, &cfg.train, &mut progress)?;

    model.save(&dir.join("model.dhm"))?;
    history.write_csv(&dir.join("history.csv"))?;
    write_json(
        &dir.join("summary.json"),
        &TrainSummary {
            params: model.count_params(),
            best_epoch: history.best_epoch,
            stop_reason: history.stop_reason,
            epochs_run: history.records.len() - 1,
            initial_train_total: history.initial().train.total,
            final_train_total: history.last().train.total,
        },
    )?;

    let report = if m.count(Split::Test) > 0 {
        let r = evaluate(&model, &m, Split::Test, &cfg.data, &cfg.eval, cfg.exec)?;
        r.write_json(&dir.join("eval_report.json"))?;
        Some(r)
    } else {
        None
    };
    Ok(Trained { model, history, report })
}

fn describe(report: &Option<EvalReport>) -> String {
    let Some(r) = report else {
        return "no test split".into();
    };
    let mut s = String::new();
    if let Some(p) = &r.pad {
        write!(s, "ACE {:.2}%", p.acer).unwrap();
    }
    if let Some(m) = &r.matching {
        for f in &m.frr_at_far {
            write!(s, ", FRR {:.2}% @ FAR {}%", f.frr, f.far_target).unwrap();
        }
    }
    s
}

pub fn train(cfg: &ExperimentConfig, out: &Path) -> CliResult {
    begin(cfg, out)?;
    let m = manifest(cfg)?;
    let t = train_into(cfg, &m, out)?;
    println!(
        "best epoch {} of {}, {} params; {}",
        t.history.best_epoch,
        t.history.records.len() - 1,
        t.model.count_params().total,
        describe(&t.report)
    );
    Ok(())
}

// -------------------------------------------------------------- evaluation

fn analyze(cfg: &ExperimentConfig) -> Result<SplitAnalysis> {
    let model = trained_model(cfg)?;
    let (m, split) = eval_view(cfg, manifest(cfg)?)?;
    analyze_split(&model, &m, split, &cfg.data, cfg.exec)
}

pub fn eval_spoof(cfg: &ExperimentConfig, out: &Path) -> CliResult {
    begin(cfg, out)?;
    let analysis = analyze(cfg)?;
    let (pad, scores) = evaluate_spoof(&analysis, &cfg.eval)?;
    println!(
        "APCER {:.2}% BPCER {:.2}% ACE {:.2}% at threshold {}; E_fake {:.2}% at E_live {}% ({} live, {} spoof)",
        pad.apcer, pad.bpcer, pad.acer, pad.threshold, pad.e_fake_at_e_live, pad.e_live_target, pad.n_live, pad.n_spoof
    );
    EvalReport {
        pad: Some(pad),
        matching: None,
    }
    .write_json(&out.join("eval_spoof.json"))?;
    export_histogram(&scores, cfg.histogram_bins, &out.join("spoof_histogram.csv"))?;
    Ok(())
}

pub fn eval_match(cfg: &ExperimentConfig, out: &Path) -> CliResult {
    begin(cfg, out)?;
    let analysis = analyze(cfg)?;
    let (report, scores) = evaluate_matching(&analysis, &cfg.eval, cfg.exec)?;
    println!(
        "{} genuine / {} imposter pairs, mean scores {:.3} / {:.3}",
        report.n_genuine, report.n_imposter, report.genuine_mean, report.imposter_mean
    );
    for f in &report.frr_at_far {
        println!("FRR {:.2}% @ FAR {}% (threshold {:.4})", f.frr, f.far_target, f.threshold);
    }
    EvalReport {
        pad: None,
        matching: Some(report),
    }
    .write_json(&out.join("eval_match.json"))?;
    export_histogram(&scores, cfg.histogram_bins, &out.join("match_histogram.csv"))?;
    export_embeddings(&analysis, &out.join("embeddings.csv"))?;
    Ok(())
}

// ------------------------------------------------------------------- bench

pub fn bench(cfg: &ExperimentConfig, out: &Path) -> CliResult {
    cfg.validate()?;
    let (dir, report_path) = if out.extension().is_some_and(|e| e == "json") {
        let dir = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        (dir.to_path_buf(), out.to_path_buf())
    } else {
        (out.to_path_buf(), out.join("bench_report.json"))
    };
    begin(cfg, &dir)?;
    let pipes = match &cfg.model {
        Some(_) => ReferencePipelines::from_model(trained_model(cfg)?),
        None => build_reference_pipelines(&cfg.backbone()?, &cfg.head_config(), cfg.seed)?,
    };
    let r = run_bench(&pipes, &cfg.bench)?;
    emit_bench_report(&r, &report_path)?;
    println!("mode      ms/image        params    bytes");
    for m in [&r.series, &r.parallel, &r.joint] {
        println!(
            "{:<9} {:>8.2} ± {:<5.2} {:>9} {:>9}",
            format!("{:?}", m.mode).to_lowercase(),
            m.latency_ms_per_image.mean_ms,
            m.latency_ms_per_image.std_ms,
            m.params_total,
            m.serialized_bytes
        );
    }
    println!(
        "joint vs series: {:.1}% faster, {:.1}% fewer params, {:.1}% smaller",
        r.speedup_pct, r.param_reduction_pct, r.bytes_reduction_pct
    );
    Ok(())
}

// --------------------------------------------------------- studies

fn table_header(cfg: &ExperimentConfig, lead: &str) -> String {
    let mut h = format!("{lead},ace");
    for f in &cfg.eval.far_targets {
        write!(h, ",frr_at_far_{f}").unwrap();
    }
    h.push('\n');
    h
}

fn table_cells(report: &Option<EvalReport>) -> String {
    let Some(r) = report else {
        return String::new();
    };
    let mut s = r.pad.as_ref().map_or_else(String::new, |p| format!("{}", p.acer));
    if let Some(m) = &r.matching {
        for f in &m.frr_at_far {
            write!(s, ",{}", f.frr).unwrap();
        }
    }
    s
}

#[derive(Serialize)]
struct SweepRow {
    split_point: usize,
    params: ParamCounts,
    report: Option<EvalReport>,
}

pub fn sweep_split(cfg: &ExperimentConfig, out: &Path) -> CliResult {
    begin(cfg, out)?;
    let m = manifest(cfg)?;
    let total = cfg.backbone()?.total_blocks();
    let splits = cfg.sweep_splits.clone().unwrap_or_else(|| (0..=total).collect());
    let mut csv = table_header(cfg, "split_point,base_params,total_params");
    let mut rows = Vec::new();
    for s in splits {
        let mut c = cfg.clone();
        c.split_point = s;
        let t = train_into(&c, &m, &out.join(format!("split_{s}")))
            .with_context(|| format!("split point {s}"))?;
        let p = t.model.count_params();
        println!("split {s}: base {} total {}; {}", p.base, p.total, describe(&t.report));
        writeln!(csv, "{s},{},{},{}", p.base, p.total, table_cells(&t.report)).unwrap();
        rows.push(SweepRow {
            split_point: s,
            params: p,
            report: t.report,
        });
    }
    write_text(&out.join("sweep.csv"), &csv)?;
    write_json(&out.join("sweep.json"), &rows)?;
    Ok(())
}

#[derive(Serialize)]
struct SuppressRow {
    suppressed: &'static str,
    s_sd: i8,
    s_m: i8,
    report: Option<EvalReport>,
}

pub fn suppress(cfg: &ExperimentConfig, out: &Path) -> CliResult {
    begin(cfg, out)?;
    let m = manifest(cfg)?;
    let mut csv = table_header(cfg, "suppressed,s_sd,s_m");
    let mut rows = Vec::new();
    for (name, s_sd, s_m) in [("none", 1, 1), ("spoof_detection", -1, 1), ("matching", 1, -1)] {
        let mut c = cfg.clone();
        c.suppression.s_sd = s_sd;
        c.suppression.s_m = s_m;
        let t = train_into(&c, &m, &out.join(name)).with_context(|| format!("{name} suppressed"))?;
        println!("{name:<16} {}", describe(&t.report));
        writeln!(csv, "{name},{s_sd},{s_m},{}", table_cells(&t.report)).unwrap();
        rows.push(SuppressRow {
            suppressed: name,
            s_sd,
            s_m,
            report: t.report,
        });
    }
    write_text(&out.join("suppress.csv"), &csv)?;
    write_json(&out.join("suppress.json"), &rows)?;
    Ok(())
}

// ------------------------------------------------------------------- probe

#[derive(Serialize)]
struct ProbeReport {
    depth: usize,
    feature_shape: (usize, usize, usize),
    train_patches: usize,
    test_patches: usize,
    apcer: f64,
    bpcer: f64,
    ace: f64,
    epoch_losses: Vec<f64>,
}

fn features(
    cfg: &ExperimentConfig,
    model: &DualHeadModel,
    m: &DatasetManifest,
    split: Split,
    cap: Option<usize>,
    depth: usize,
) -> Result<(Vec<dualhead::nn::Tensor>, Vec<usize>)> {
    let mut feats = Vec::new();
    let mut labels = Vec::new();
    for img in load_split(m, split, &cfg.data, cfg.exec)? {
        let label = img.record.liveness.class_index().ok_or_else(|| {
            Error::Manifest(format!("{}: probe needs a known liveness label", img.key))
        })?;
        let patches = img.patches(cap, &cfg.data.patch, cfg.exec)?;
        labels.extend(std::iter::repeat_n(label, patches.len()));
        feats.extend(model.extract_intermediate(&patches, depth, cfg.exec)?);
    }
    if feats.is_empty() {
        return Err(Error::Empty(format!("no {split:?} patches for the probe")));
    }
    Ok((feats, labels))
}

pub fn probe(cfg: &ExperimentConfig, out: &Path) -> CliResult {
    begin(cfg, out)?;
    let model = trained_model(cfg)?;
    let depth = cfg.probe_depth.unwrap_or(model.base_blocks());
    let feature_shape = model.intermediate_shape(depth)?;
    let (m, split) = eval_view(cfg, manifest(cfg)?)?;
    let (train_x, train_y) = features(cfg, &model, &m, Split::Train, cfg.data.train_minutiae_cap, depth)?;
    let (test_x, test_y) = features(cfg, &model, &m, split, cfg.data.train_minutiae_cap, depth)?;
    let r = train_probe(&train_x, &train_y, &test_x, &test_y, &cfg.probe)?;
    println!(
        "probe at depth {depth} {:?}: APCER {:.2}% BPCER {:.2}% ACE {:.2}%",
        feature_shape, r.errors.apcer, r.errors.bpcer, r.errors.acer
    );
    write_json(
        &out.join("probe.json"),
        &ProbeReport {
            depth,
            feature_shape,
            train_patches: train_x.len(),
            test_patches: test_x.len(),
            apcer: r.errors.apcer,
            bpcer: r.errors.bpcer,
            ace: r.errors.acer,
            epoch_losses: r.epoch_losses,
        },
    )?;
    Ok(())
}

// ---------------------------------------------------------------- matching

pub fn template(cfg: &ExperimentConfig, image: &Path, minutiae: &Path, out: &Path) -> CliResult {
    cfg.validate()?;
    let model = trained_model(cfg)?;
    let single = DatasetManifest {
        root: PathBuf::from("."),
        records: vec![ManifestRecord {
            image: image.to_path_buf(),
            minutiae: minutiae.to_path_buf(),
            finger_id: 0,
            impression_id: 1,
            liveness: Liveness::Unknown,
            split: Split::Test,
        }],
    };
    let img = load_record(&single, &single.records[0], &cfg.data)?;
    let mut t = extract_template(&model, &img.image, &img.minutiae, &cfg.data.patch, cfg.exec)?;
    t.image = img.key;
    if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        prepare_out(dir)?;
    }
    save_template(&t, out)?;
    println!("{} minutiae -> {}", t.len(), out.display());
    Ok(())
}

pub fn match_pair(cfg: &ExperimentConfig, a: &Path, b: &Path, dump: Option<&Path>) -> CliResult {
    cfg.validate()?;
    let (ta, tb) = (load_template(a)?, load_template(b)?);
    let r = match_templates(&ta, &tb, &cfg.eval.matcher)?;
    println!("score {:.6} correspondences {}", r.score, r.correspondences.len());
    if let Some(path) = dump {
        write_text(path, &correspondences_csv(&ta, &tb, &r))?;
    }
    Ok(())
}
