use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::backbone::{BackboneSpec, Builder};
use super::layers::{Cache, Node};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::patch::Patch;

pub const SPOOF_CLASS: usize = 1;

const MAGIC: &[u8; 4] = b"DHFP";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DualHeadConfig {
    pub split_point: usize,
    pub descriptor_dim: usize,
    pub num_classes: usize,
}

impl Default for DualHeadConfig {
    fn default() -> Self {
        DualHeadConfig {
            split_point: 0,
            descriptor_dim: 64,
            num_classes: 2,
        }
    }
}

impl DualHeadConfig {
    pub fn with_split(split_point: usize) -> Self {
        DualHeadConfig {
            split_point,
            ..Self::default()
        }
    }

    pub fn validate(&self, spec: &BackboneSpec) -> Result<()> {
        if self.split_point > spec.total_blocks() {
            return Err(Error::Config(format!(
                "split_point {} outside [0, {}]",
                self.split_point,
                spec.total_blocks()
            )));
        }
        if self.descriptor_dim == 0 {
            return Err(Error::Config("descriptor_dim must be at least 1".into()));
        }
        if self.num_classes != 2 {
            return Err(Error::Config("num_classes is fixed at 2".into()));
        }
        Ok(())
    }
}

/// One trainable part of the network: a sequential graph and its flat
/// parameter vector.
#[derive(Debug, Clone)]
pub struct Component {
    pub(crate) graph: Node,
    pub params: Vec<f64>,
}

impl Component {
    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Number of top-level stages (stem + blocks for a base, blocks +
    /// pooling + linear for a head).
    pub fn stages(&self) -> usize {
        match &self.graph {
            Node::Seq(v) => v.len(),
            _ => 1,
        }
    }

    pub fn forward(&self, x: Tensor, train: bool) -> (Tensor, Cache) {
        self.graph.forward(&self.params, x, train)
    }

    pub fn backward(&self, cache: &Cache, g: Tensor, grads: &mut [f64]) -> Tensor {
        self.graph.backward(&self.params, cache, g, grads)
    }

    pub fn out_shape(&self, input: (usize, usize, usize)) -> Result<(usize, usize, usize)> {
        self.graph.out_shape(input)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub base: usize,
    pub sd_head: usize,
    pub match_head: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutput {
    pub logits: Vec<[f64; 2]>,
    pub descriptors: Vec<Vec<f64>>,
}

pub fn softmax2(l: [f64; 2]) -> [f64; 2] {
    let m = l[0].max(l[1]);
    let e0 = (l[0] - m).exp();
    let e1 = (l[1] - m).exp();
    let s = e0 + e1;
    [e0 / s, e1 / s]
}

pub fn spoof_probability(logits: [f64; 2]) -> f64 {
    softmax2(logits)[SPOOF_CLASS]
}

impl ModelOutput {
    pub fn spoof_probabilities(&self) -> Vec<f64> {
        self.logits.iter().map(|&l| spoof_probability(l)).collect()
    }
}

#[derive(Debug, Clone)]
pub struct DualHeadModel {
    pub spec: BackboneSpec,
    pub config: DualHeadConfig,
    pub base: Component,
    pub sd_head: Component,
    pub match_head: Component,
}

/// Builds base and head graphs; with `seed = None` nothing is initialised
/// and parameter vectors come back empty.
fn build_parts(spec: &BackboneSpec, config: &DualHeadConfig, seed: Option<u64>) -> Result<[(Node, Vec<f64>, usize); 3]> {
    spec.validate()?;
    config.validate(spec)?;
    let builder = |stream| match seed {
        Some(s) => Builder::seeded(s, stream),
        None => Builder::dry(),
    };
    let n_base = spec.total_blocks() - config.split_point;

    let mut b = builder(0);
    let mut nodes = vec![b.stem(spec)];
    for (i, blk) in spec.blocks[..n_base].iter().enumerate() {
        nodes.push(b.block(blk, spec.block_in_channels(i)));
    }
    let base_len = b.len;
    let base = (Node::Seq(nodes), b.finish(), base_len);

    let head = |stream, out_f| {
        let mut b = builder(stream);
        let mut nodes = Vec::new();
        let mut c = spec.block_in_channels(n_base);
        for blk in &spec.blocks[n_base..] {
            nodes.push(b.block(blk, c));
            c = blk.out_channels(c);
        }
        if let Some(w) = spec.head_conv {
            nodes.push(b.head_conv(c, w));
            c = w;
        }
        nodes.push(Node::GlobalAvgPool);
        nodes.push(b.linear(c, out_f));
        let len = b.len;
        (Node::Seq(nodes), b.finish(), len)
    };
    Ok([base, head(1, config.num_classes), head(2, config.descriptor_dim)])
}

/// Parameter counts without allocating or initialising any weights.
pub fn count_params_for(spec: &BackboneSpec, config: &DualHeadConfig) -> Result<ParamCounts> {
    let [b, s, m] = build_parts(spec, config, None)?;
    Ok(ParamCounts {
        base: b.2,
        sd_head: s.2,
        match_head: m.2,
        total: b.2 + s.2 + m.2,
    })
}

pub fn build_model(spec: &BackboneSpec, config: &DualHeadConfig, seed: u64) -> Result<DualHeadModel> {
    let [b, s, m] = build_parts(spec, config, Some(seed))?;
    Ok(DualHeadModel {
        spec: spec.clone(),
        config: *config,
        base: Component { graph: b.0, params: b.1 },
        sd_head: Component { graph: s.0, params: s.1 },
        match_head: Component { graph: m.0, params: m.1 },
    })
}

/// Converts a patch to a network input, replicating grey levels across
/// input channels.
pub fn patch_tensor(patch: &Patch, spec: &BackboneSpec) -> Result<Tensor> {
    let n = spec.input_size;
    if patch.size != n || patch.pixels.len() != n * n {
        return Err(Error::Shape(format!(
            "patch is {}x{}, network expects {n}x{n}",
            patch.size, patch.size
        )));
    }
    let plane: Vec<f64> = patch.pixels.iter().map(|&v| v as f64).collect();
    let mut data = Vec::with_capacity(n * n * spec.in_channels);
    for _ in 0..spec.in_channels {
        data.extend_from_slice(&plane);
    }
    Ok(Tensor::from_vec(spec.in_channels, n, n, data))
}

fn head_output(head: &Component, features: Tensor) -> Vec<f64> {
    head.forward(features, false).0.data
}

impl DualHeadModel {
    pub fn base_blocks(&self) -> usize {
        self.spec.total_blocks() - self.config.split_point
    }

    pub fn head_blocks(&self) -> usize {
        self.config.split_point
    }

    pub fn count_params(&self) -> ParamCounts {
        ParamCounts {
            base: self.base.len(),
            sd_head: self.sd_head.len(),
            match_head: self.match_head.len(),
            total: self.base.len() + self.sd_head.len() + self.match_head.len(),
        }
    }

    pub fn input_tensor(&self, patch: &Patch) -> Result<Tensor> {
        patch_tensor(patch, &self.spec)
    }

    /// Runs the base once and both heads on its output.
    pub fn forward_tensor(&self, x: Tensor) -> ([f64; 2], Vec<f64>) {
        let (f, _) = self.base.forward(x, false);
        let l = head_output(&self.sd_head, f.clone());
        let d = head_output(&self.match_head, f);
        ([l[0], l[1]], d)
    }

    pub fn forward(&self, patches: &[Patch], exec: Exec) -> Result<ModelOutput> {
        let outs = exec.try_map(patches, |p| Ok::<_, Error>(self.forward_tensor(self.input_tensor(p)?)))?;
        let (logits, descriptors) = outs.into_iter().unzip();
        Ok(ModelOutput { logits, descriptors })
    }

    /// Base activation after block `depth` (0 = stem output).
    pub fn extract_intermediate(&self, patches: &[Patch], depth: usize, exec: Exec) -> Result<Vec<Tensor>> {
        self.check_depth(depth)?;
        let Node::Seq(stages) = &self.base.graph else {
            unreachable!("base is sequential")
        };
        exec.try_map(patches, |p| {
            let mut x = self.input_tensor(p)?;
            for st in &stages[..=depth] {
                x = st.forward(&self.base.params, x, false).0;
            }
            Ok(x)
        })
    }

    pub fn intermediate_shape(&self, depth: usize) -> Result<(usize, usize, usize)> {
        self.check_depth(depth)?;
        let Node::Seq(stages) = &self.base.graph else {
            unreachable!("base is sequential")
        };
        let n = self.spec.input_size;
        Node::Seq(stages[..=depth].to_vec()).out_shape((self.spec.in_channels, n, n))
    }

    fn check_depth(&self, depth: usize) -> Result<()> {
        if depth > self.base_blocks() {
            return Err(Error::Range(format!(
                "depth {depth} beyond the {} base blocks",
                self.base_blocks()
            )));
        }
        Ok(())
    }

    /// Splits into two standalone single-task networks sharing nothing.
    pub fn split_into_series(&self) -> (SingleHeadModel, SingleHeadModel) {
        let mk = |task, head: &Component| SingleHeadModel {
            spec: self.spec.clone(),
            config: self.config,
            task,
            base: self.base.clone(),
            head: head.clone(),
        };
        (mk(HeadTask::Spoof, &self.sd_head), mk(HeadTask::Descriptor, &self.match_head))
    }

    fn header(&self) -> ModelHeader {
        ModelHeader {
            format: "dualhead-model".into(),
            version: FORMAT_VERSION,
            kind: ModelKind::DualHead,
            spec: self.spec.clone(),
            config: self.config,
            components: vec![
                ComponentEntry::new("base", &self.base),
                ComponentEntry::new("sd_head", &self.sd_head),
                ComponentEntry::new("match_head", &self.match_head),
            ],
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        encode(&self.header(), &[&self.base, &self.sd_head, &self.match_head])
    }

    pub fn serialized_size(&self) -> Result<usize> {
        Ok(self.to_bytes()?.len())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, mut blocks) = decode(bytes)?;
        if header.kind != ModelKind::DualHead {
            return Err(Error::ModelFormat(format!("expected a dual-head model, found {:?}", header.kind)));
        }
        let [b, s, m] = build_parts(&header.spec, &header.config, None)
            .map_err(|e| Error::ModelFormat(format!("embedded spec/config invalid: {e}")))?;
        check_lengths(&header, &[b.2, s.2, m.2])?;
        let mp = blocks.pop().unwrap_or_default();
        let sp = blocks.pop().unwrap_or_default();
        let bp = blocks.pop().unwrap_or_default();
        Ok(DualHeadModel {
            spec: header.spec,
            config: header.config,
            base: Component { graph: b.0, params: bp },
            sd_head: Component { graph: s.0, params: sp },
            match_head: Component { graph: m.0, params: mp },
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Loads and checks the stored descriptor width against what the caller
    /// was configured for.
    pub fn load_expecting(path: &Path, descriptor_dim: usize) -> Result<Self> {
        let m = Self::load(path)?;
        if m.config.descriptor_dim != descriptor_dim {
            return Err(Error::ModelFormat(format!(
                "{} stores descriptor_dim {}, expected {descriptor_dim}",
                path.display(),
                m.config.descriptor_dim
            )));
        }
        Ok(m)
    }

    /// Rounds every parameter to the nearest 32-bit float so the stored
    /// model reproduces in-memory outputs exactly.
    pub fn round_to_f32(&mut self) {
        for c in [&mut self.base, &mut self.sd_head, &mut self.match_head] {
            for v in &mut c.params {
                *v = *v as f32 as f64;
            }
        }
    }
}

pub fn save_model(model: &DualHeadModel, path: &Path) -> Result<()> {
    model.save(path)
}

pub fn load_model(path: &Path) -> Result<DualHeadModel> {
    DualHeadModel::load(path)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadTask {
    Spoof,
    Descriptor,
}

/// Standalone network with one head, used as the series/parallel baseline.
#[derive(Debug, Clone)]
pub struct SingleHeadModel {
    pub spec: BackboneSpec,
    pub config: DualHeadConfig,
    pub task: HeadTask,
    pub base: Component,
    pub head: Component,
}

impl SingleHeadModel {
    pub fn param_count(&self) -> usize {
        self.base.len() + self.head.len()
    }

    pub fn forward_tensor(&self, x: Tensor) -> Vec<f64> {
        let (f, _) = self.base.forward(x, false);
        head_output(&self.head, f)
    }

    pub fn forward(&self, patches: &[Patch], exec: Exec) -> Result<Vec<Vec<f64>>> {
        exec.try_map(patches, |p| Ok(self.forward_tensor(patch_tensor(p, &self.spec)?)))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = ModelHeader {
            format: "dualhead-model".into(),
            version: FORMAT_VERSION,
            kind: ModelKind::SingleHead(self.task),
            spec: self.spec.clone(),
            config: self.config,
            components: vec![
                ComponentEntry::new("base", &self.base),
                ComponentEntry::new("head", &self.head),
            ],
        };
        encode(&header, &[&self.base, &self.head])
    }

    pub fn serialized_size(&self) -> Result<usize> {
        Ok(self.to_bytes()?.len())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum ModelKind {
    DualHead,
    SingleHead(HeadTask),
}

#[derive(Debug, Serialize, Deserialize)]
struct ComponentEntry {
    name: String,
    len: usize,
}

impl ComponentEntry {
    fn new(name: &str, c: &Component) -> Self {
        ComponentEntry {
            name: name.into(),
            len: c.len(),
        }
    }
}

/// File layout: `DHFP`, u32 version, u32 header length, JSON header, then
/// each component's parameters as little-endian f32 in header order.
#[derive(Debug, Serialize, Deserialize)]
struct ModelHeader {
    format: String,
    version: u32,
    kind: ModelKind,
    spec: BackboneSpec,
    config: DualHeadConfig,
    components: Vec<ComponentEntry>,
}

fn encode(header: &ModelHeader, parts: &[&Component]) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(header)?;
    let n: usize = parts.iter().map(|c| c.len()).sum();
    let mut out = Vec::with_capacity(12 + json.len() + 4 * n);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for c in parts {
        for &v in &c.params {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

fn decode(bytes: &[u8]) -> Result<(ModelHeader, Vec<Vec<f64>>)> {
    let bad = |m: &str| Error::ModelFormat(m.to_string());
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(bad("missing DHFP magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::ModelFormat(format!(
            "unsupported format version {version} (this build reads {FORMAT_VERSION})"
        )));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = bytes.get(12..12 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: ModelHeader =
        serde_json::from_slice(body).map_err(|e| Error::ModelFormat(format!("header: {e}")))?;
    if header.version != version {
        return Err(bad("header version disagrees with preamble"));
    }
    let mut pos = 12 + hlen;
    let mut blocks = Vec::with_capacity(header.components.len());
    for c in &header.components {
        let end = pos + 4 * c.len;
        let raw = bytes
            .get(pos..end)
            .ok_or_else(|| Error::ModelFormat(format!("truncated parameter block {}", c.name)))?;
        blocks.push(
            raw.chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                .collect(),
        );
        pos = end;
    }
    if pos != bytes.len() {
        return Err(bad("trailing bytes after parameter blocks"));
    }
    Ok((header, blocks))
}

fn check_lengths(header: &ModelHeader, expected: &[usize]) -> Result<()> {
    let got: Vec<usize> = header.components.iter().map(|c| c.len).collect();
    if got != expected {
        return Err(Error::ModelFormat(format!(
            "parameter blocks {got:?} do not fit the embedded spec (expects {expected:?})"
        )));
    }
    Ok(())
}
