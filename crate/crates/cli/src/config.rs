use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};

use dualhead::bench::Workload;
use dualhead::data_io::synth::SynthDatasetSpec;
use dualhead::data_io::Split;
use dualhead::metrics::EvalConfig;
use dualhead::nn::{BackboneSpec, DualHeadConfig, Variant};
use dualhead::pipeline::DataConfig;
use dualhead::train::{LossWeights, ProbeConfig, SuppressionFlags, TrainConfig};
use dualhead::{Error, Exec, Result};

/// Which manifest records an evaluation reads. `All` pools every split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum EvalSplit {
    Train,
    Val,
    #[default]
    Test,
    All,
}

impl EvalSplit {
    pub fn split(self) -> Option<Split> {
        match self {
            EvalSplit::Train => Some(Split::Train),
            EvalSplit::Val => Some(Split::Val),
            EvalSplit::Test => Some(Split::Test),
            EvalSplit::All => None,
        }
    }
}

/// Everything one experiment needs. A copy is written into every output
/// directory and can be passed back with `--config` to rerun it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub manifest: Option<PathBuf>,
    pub model: Option<PathBuf>,
    /// Precomputed teacher descriptors; the seeded pseudo-teacher otherwise.
    pub teacher_file: Option<PathBuf>,
    pub teacher_seed: u64,
    pub variant: Variant,
    pub split_point: usize,
    pub descriptor_dim: usize,
    /// Model initialisation and every nested seed.
    pub seed: u64,
    /// Execution mode for every stage.
    pub exec: Exec,
    pub weights: LossWeights,
    pub suppression: SuppressionFlags,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
    pub eval_split: EvalSplit,
    pub histogram_bins: usize,
    pub synth: SynthDatasetSpec,
    pub bench: Workload,
    pub probe: ProbeConfig,
    /// Base depth whose activations feed the probe; the deepest when unset.
    pub probe_depth: Option<usize>,
    /// Split points for `sweep-split`; every valid one when unset.
    pub sweep_splits: Option<Vec<usize>>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            manifest: None,
            model: None,
            teacher_file: None,
            teacher_seed: 0,
            variant: Variant::Tiny,
            split_point: 0,
            descriptor_dim: 64,
            seed: 0,
            exec: Exec::Parallel,
            weights: LossWeights::default(),
            suppression: SuppressionFlags::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            eval: EvalConfig::default(),
            eval_split: EvalSplit::Test,
            histogram_bins: 20,
            synth: SynthDatasetSpec::default(),
            bench: Workload::default(),
            probe: ProbeConfig::default(),
            probe_depth: None,
            sweep_splits: None,
        }
    }
}

fn field(path: &str, e: Error) -> Error {
    Error::Config(format!("{path}: {e}"))
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join("config.json");
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    /// Copies the top-level seed and execution mode into the nested
    /// sections so the written config is self-consistent.
    pub fn sync(&mut self) {
        self.train.seed = self.seed;
        self.train.exec = self.exec;
        self.probe.seed = self.seed;
        self.probe.exec = self.exec;
        self.bench.seed = self.seed;
        self.bench.exec = self.exec;
        self.eval.matcher.seed = self.seed;
    }

    pub fn backbone(&self) -> Result<BackboneSpec> {
        BackboneSpec::for_variant(self.variant).map_err(|e| field("variant", e))
    }

    pub fn head_config(&self) -> DualHeadConfig {
        DualHeadConfig {
            split_point: self.split_point,
            descriptor_dim: self.descriptor_dim,
            ..DualHeadConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let spec = self.backbone()?;
        self.head_config().validate(&spec).map_err(|e| field("split_point", e))?;
        self.weights.validate().map_err(|e| field("weights", e))?;
        self.suppression.validate().map_err(|e| field("suppression", e))?;
        self.train.validate().map_err(|e| field("train", e))?;
        self.bench.validate().map_err(|e| field("bench", e))?;
        if self.descriptor_dim == 0 {
            return Err(Error::Config("descriptor_dim: must be positive".into()));
        }
        if self.histogram_bins == 0 {
            return Err(Error::Config("histogram_bins: must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.eval.threshold) {
            return Err(Error::Config(format!("eval.threshold: {} not in [0, 1]", self.eval.threshold)));
        }
        if let Some(t) = self.eval.far_targets.iter().find(|t| !(**t >= 0.0 && **t <= 100.0)) {
            return Err(Error::Config(format!("eval.far_targets: {t} is not a percentage")));
        }
        if self.probe.epochs == 0 || self.probe.batch_size == 0 {
            return Err(Error::Config("probe: epochs and batch_size must be positive".into()));
        }
        if let Some(splits) = &self.sweep_splits {
            let total = spec.total_blocks();
            if let Some(s) = splits.iter().find(|&&s| s > total) {
                return Err(Error::Config(format!("sweep_splits: {s} exceeds {total} blocks")));
            }
        }
        Ok(())
    }

    pub fn manifest_path(&self) -> Result<&Path> {
        self.manifest
            .as_deref()
            .ok_or_else(|| Error::Config("manifest: required (use --manifest)".into()))
    }
}

fn parse_flag(v: &str) -> std::result::Result<i8, String> {
    match v {
        "1" | "+1" => Ok(1),
        "-1" => Ok(-1),
        _ => Err(format!("{v} is not +1 or -1")),
    }
}

/// Minutiae cap from the command line: a count or `all`.
#[derive(Debug, Clone, Copy)]
pub struct Cap(Option<usize>);

fn parse_cap(v: &str) -> std::result::Result<Cap, String> {
    if v == "all" {
        return Ok(Cap(None));
    }
    v.parse().map(|n| Cap(Some(n))).map_err(|_| format!("{v} is neither a count nor \"all\""))
}

/// Flags mirroring `ExperimentConfig` fields; each one overrides the value
/// read from `--config`.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// JSON experiment config; flags override its values
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
    #[arg(long, global = true)]
    pub model: Option<PathBuf>,
    #[arg(long, global = true)]
    pub teacher_file: Option<PathBuf>,
    #[arg(long, global = true)]
    pub teacher_seed: Option<u64>,
    /// tiny | dhm_full | dhr | dhi
    #[arg(long, visible_alias = "spec", global = true)]
    pub variant: Option<String>,
    #[arg(long, visible_alias = "split", global = true)]
    pub split_point: Option<usize>,
    #[arg(long, global = true)]
    pub descriptor_dim: Option<usize>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_parser = ["sequential", "parallel"])]
    pub exec: Option<String>,
    #[arg(long, global = true)]
    pub w_sd: Option<f64>,
    #[arg(long, global = true)]
    pub w_m: Option<f64>,
    #[arg(long, global = true, allow_hyphen_values = true, value_parser = parse_flag)]
    pub s_sd: Option<i8>,
    #[arg(long, global = true, allow_hyphen_values = true, value_parser = parse_flag)]
    pub s_m: Option<i8>,
    #[arg(long, visible_alias = "epochs", global = true)]
    pub max_epochs: Option<usize>,
    #[arg(long, global = true)]
    pub batch_size: Option<usize>,
    #[arg(long, visible_alias = "lr", global = true)]
    pub initial_lr: Option<f64>,
    #[arg(long, global = true)]
    pub lr_patience: Option<usize>,
    /// Minutiae per training image, or "all"
    #[arg(long, global = true, value_parser = parse_cap)]
    pub train_minutiae_cap: Option<Cap>,
    /// Minutiae per evaluated image, or "all"
    #[arg(long, global = true, value_parser = parse_cap)]
    pub eval_minutiae_cap: Option<Cap>,
    /// Spoofness threshold on P(spoof)
    #[arg(long, global = true)]
    pub threshold: Option<f64>,
    /// Comma-separated FAR targets in percent
    #[arg(long, global = true, value_delimiter = ',')]
    pub far_targets: Option<Vec<f64>>,
    #[arg(long, global = true)]
    pub e_live_target: Option<f64>,
    #[arg(long, global = true, value_enum)]
    pub eval_split: Option<EvalSplit>,
    #[arg(long, global = true)]
    pub histogram_bins: Option<usize>,
}

macro_rules! set {
    ($src:expr => $dst:expr) => {
        if let Some(v) = $src.clone() {
            $dst = v;
        }
    };
}

impl Overrides {
    pub fn resolve(&self) -> Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if self.manifest.is_some() {
            c.manifest = self.manifest.clone();
        }
        if self.model.is_some() {
            c.model = self.model.clone();
        }
        if self.teacher_file.is_some() {
            c.teacher_file = self.teacher_file.clone();
        }
        if let Some(v) = &self.variant {
            c.variant = v.parse().map_err(|e| field("variant", e))?;
        }
        if let Some(e) = &self.exec {
            c.exec = if e == "parallel" { Exec::Parallel } else { Exec::Sequential };
        }
        set!(self.teacher_seed => c.teacher_seed);
        set!(self.split_point => c.split_point);
        set!(self.descriptor_dim => c.descriptor_dim);
        set!(self.seed => c.seed);
        set!(self.w_sd => c.weights.w_sd);
        set!(self.w_m => c.weights.w_m);
        set!(self.s_sd => c.suppression.s_sd);
        set!(self.s_m => c.suppression.s_m);
        set!(self.max_epochs => c.train.max_epochs);
        set!(self.batch_size => c.train.batch_size);
        set!(self.initial_lr => c.train.initial_lr);
        set!(self.lr_patience => c.train.lr_patience);
        if let Some(Cap(v)) = self.train_minutiae_cap {
            c.data.train_minutiae_cap = v;
        }
        if let Some(Cap(v)) = self.eval_minutiae_cap {
            c.data.eval_minutiae_cap = v;
        }
        set!(self.threshold => c.eval.threshold);
        set!(self.far_targets => c.eval.far_targets);
        set!(self.e_live_target => c.eval.e_live_target);
        set!(self.eval_split => c.eval_split);
        set!(self.histogram_bins => c.histogram_bins);
        c.sync();
        Ok(c)
    }
}
