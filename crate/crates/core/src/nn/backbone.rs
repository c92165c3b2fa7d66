//! Backbone layouts and the graph builder that turns them into layers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::layers::{Conv, Node};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Tiny,
    DhmFull,
    Dhr,
    Dhi,
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tiny" => Ok(Variant::Tiny),
            "dhm_full" => Ok(Variant::DhmFull),
            "dhr" => Ok(Variant::Dhr),
            "dhi" => Ok(Variant::Dhi),
            other => Err(Error::Config(format!("unknown backbone variant {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Relu6,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StemSpec {
    /// Single conv + affine + activation.
    Conv {
        out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        activation: Activation,
    },
    /// 7×7/2 conv followed by a 3×3/2 max pool.
    Resnet { out: usize },
    /// Five-conv, two-pool Inception stem; `stride` applies to the first conv.
    Inception { stride: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BlockSpec {
    /// A group of `repeats` MobileNet-v2 bottlenecks; only the first strides.
    InvertedResidual {
        expand: usize,
        out: usize,
        repeats: usize,
        stride: usize,
    },
    /// ResNet basic block.
    Basic { out: usize, stride: usize },
    InceptionA { pool_features: usize },
    InceptionB,
    InceptionC { c7: usize },
    InceptionD,
    InceptionE,
}

impl BlockSpec {
    pub fn out_channels(&self, in_c: usize) -> usize {
        match *self {
            BlockSpec::InvertedResidual { out, .. } | BlockSpec::Basic { out, .. } => out,
            BlockSpec::InceptionA { pool_features } => 224 + pool_features,
            BlockSpec::InceptionB => 480 + in_c,
            BlockSpec::InceptionC { .. } => 768,
            BlockSpec::InceptionD => 512 + in_c,
            BlockSpec::InceptionE => 2048,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub variant: Variant,
    pub in_channels: usize,
    pub input_size: usize,
    pub stem: StemSpec,
    pub blocks: Vec<BlockSpec>,
    /// Optional 1×1 conv width placed in each head before pooling.
    pub head_conv: Option<usize>,
}

impl BackboneSpec {
    pub fn tiny() -> Self {
        let ir = |expand, out, repeats, stride| BlockSpec::InvertedResidual {
            expand,
            out,
            repeats,
            stride,
        };
        BackboneSpec {
            variant: Variant::Tiny,
            in_channels: 1,
            input_size: 224,
            stem: StemSpec::Conv {
                out: 16,
                kernel: 4,
                stride: 4,
                pad: 0,
                activation: Activation::Relu6,
            },
            blocks: vec![ir(1, 16, 1, 2), ir(4, 24, 1, 2), ir(4, 32, 2, 2), ir(4, 64, 1, 1)],
            head_conv: None,
        }
    }

    /// MobileNet-v2 bottleneck sequence with its 1280-wide final conv in
    /// each head.
    pub fn dhm_full() -> Self {
        let ir = |expand, out, repeats, stride| BlockSpec::InvertedResidual {
            expand,
            out,
            repeats,
            stride,
        };
        BackboneSpec {
            variant: Variant::DhmFull,
            in_channels: 1,
            input_size: 224,
            stem: StemSpec::Conv {
                out: 32,
                kernel: 3,
                stride: 2,
                pad: 1,
                activation: Activation::Relu6,
            },
            blocks: vec![
                ir(1, 16, 1, 1),
                ir(6, 24, 2, 2),
                ir(6, 32, 3, 2),
                ir(6, 64, 4, 2),
                ir(6, 96, 3, 1),
                ir(6, 160, 3, 2),
                ir(6, 320, 1, 1),
            ],
            head_conv: Some(1280),
        }
    }

    /// ResNet-18 with the last stage narrowed to 256 channels.
    pub fn dhr() -> Self {
        let b = |out, stride| BlockSpec::Basic { out, stride };
        BackboneSpec {
            variant: Variant::Dhr,
            in_channels: 1,
            input_size: 224,
            stem: StemSpec::Resnet { out: 64 },
            blocks: vec![
                b(64, 1),
                b(64, 1),
                b(128, 2),
                b(128, 1),
                b(256, 2),
                b(256, 1),
                b(256, 2),
                b(256, 1),
            ],
            head_conv: None,
        }
    }

    /// Inception-v3 from Mixed_5b onwards on 448-pixel patches.
    pub fn dhi() -> Self {
        use BlockSpec::*;
        BackboneSpec {
            variant: Variant::Dhi,
            in_channels: 1,
            input_size: 448,
            stem: StemSpec::Inception { stride: 3 },
            blocks: vec![
                InceptionA { pool_features: 32 },
                InceptionA { pool_features: 64 },
                InceptionA { pool_features: 64 },
                InceptionB,
                InceptionC { c7: 128 },
                InceptionC { c7: 160 },
                InceptionC { c7: 160 },
                InceptionC { c7: 192 },
                InceptionD,
                InceptionE,
                InceptionE,
            ],
            head_conv: None,
        }
    }

    pub fn for_variant(v: Variant) -> Result<Self> {
        match v {
            Variant::Tiny => Ok(Self::tiny()),
            Variant::DhmFull => Ok(Self::dhm_full()),
            #[cfg(feature = "reference-backbones")]
            Variant::Dhr => Ok(Self::dhr()),
            #[cfg(feature = "reference-backbones")]
            Variant::Dhi => Ok(Self::dhi()),
            #[allow(unreachable_patterns)]
            other => Err(Error::Config(format!(
                "backbone {other:?} requires the `reference-backbones` feature"
            ))),
        }
    }

    pub fn total_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// Default split for the layout: 0 for the MobileNet variants, 1 for
    /// the ResNet and Inception layouts.
    pub fn default_split(&self) -> usize {
        match self.variant {
            Variant::Tiny | Variant::DhmFull => 0,
            Variant::Dhr | Variant::Dhi => 1,
        }
    }

    pub fn stem_channels(&self) -> usize {
        match self.stem {
            StemSpec::Conv { out, .. } | StemSpec::Resnet { out } => out,
            StemSpec::Inception { .. } => 192,
        }
    }

    /// Input channel count of block `i`.
    pub fn block_in_channels(&self, i: usize) -> usize {
        self.blocks[..i]
            .iter()
            .fold(self.stem_channels(), |c, b| b.out_channels(c))
    }

    /// Checks the layout is non-empty and keeps a positive spatial size
    /// through the deepest block.
    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(Error::Config("backbone needs at least one block".into()));
        }
        if self.in_channels == 0 || self.input_size == 0 {
            return Err(Error::Config("backbone input must be non-empty".into()));
        }
        let mut b = Builder::dry();
        let mut nodes = vec![b.stem(self)];
        let mut c = self.stem_channels();
        for spec in &self.blocks {
            nodes.push(b.block(spec, c));
            c = spec.out_channels(c);
        }
        let (_, h, w) = Node::Seq(nodes)
            .out_shape((self.in_channels, self.input_size, self.input_size))
            .map_err(|e| Error::Config(format!("backbone layout: {e}")))?;
        if h == 0 || w == 0 {
            return Err(Error::Config("backbone collapses spatial size".into()));
        }
        Ok(())
    }
}

/// Allocates parameter slots while building nodes. A dry builder only
/// counts, which is enough for shape and size queries on large layouts.
pub(crate) struct Builder {
    pub len: usize,
    values: Option<Vec<f64>>,
    rng: ChaCha8Rng,
}

fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

impl Builder {
    pub fn seeded(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Builder {
            len: 0,
            values: Some(Vec::new()),
            rng,
        }
    }

    pub fn dry() -> Self {
        Builder {
            len: 0,
            values: None,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    pub fn finish(self) -> Vec<f64> {
        self.values.unwrap_or_default()
    }

    fn alloc_normal(&mut self, n: usize, std: f64) -> usize {
        let off = self.len;
        self.len += n;
        if let Some(v) = self.values.as_mut() {
            let dist = Normal::new(0.0, std).expect("positive std");
            v.extend((0..n).map(|_| round_f32(dist.sample(&mut self.rng))));
        }
        off
    }

    fn alloc_const(&mut self, n: usize, value: f64) -> usize {
        let off = self.len;
        self.len += n;
        if let Some(v) = self.values.as_mut() {
            v.extend(std::iter::repeat_n(value, n));
        }
        off
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_raw(
        &mut self,
        in_c: usize,
        out_c: usize,
        (kh, kw): (usize, usize),
        stride: usize,
        (ph, pw): (usize, usize),
        groups: usize,
        bias: bool,
    ) -> Node {
        let fan_in = (in_c / groups) * kh * kw;
        let offset = self.alloc_normal(out_c * fan_in, (2.0 / fan_in as f64).sqrt());
        if bias {
            self.alloc_const(out_c, 0.0);
        }
        Node::Conv(Conv {
            in_c,
            out_c,
            kh,
            kw,
            stride,
            ph,
            pw,
            groups,
            bias,
            offset,
        })
    }

    fn affine(&mut self, channels: usize) -> Node {
        let offset = self.alloc_const(channels, 1.0);
        self.alloc_const(channels, 0.0);
        Node::Affine { channels, offset }
    }

    pub fn linear(&mut self, in_f: usize, out_f: usize) -> Node {
        let offset = self.alloc_normal(in_f * out_f, (1.0 / in_f as f64).sqrt());
        self.alloc_const(out_f, 0.0);
        Node::Linear { in_f, out_f, offset }
    }

    /// conv (no bias) + affine + activation
    fn conv_unit(
        &mut self,
        in_c: usize,
        out_c: usize,
        k: (usize, usize),
        stride: usize,
        pad: (usize, usize),
        groups: usize,
        act: Option<Activation>,
    ) -> Node {
        let mut v = vec![
            self.conv_raw(in_c, out_c, k, stride, pad, groups, false),
            self.affine(out_c),
        ];
        match act {
            Some(Activation::Relu) => v.push(Node::Relu),
            Some(Activation::Relu6) => v.push(Node::Relu6),
            None => {}
        }
        Node::Seq(v)
    }

    fn basic(&mut self, in_c: usize, out_c: usize, k: (usize, usize), stride: usize, pad: (usize, usize)) -> Node {
        self.conv_unit(in_c, out_c, k, stride, pad, 1, Some(Activation::Relu))
    }

    pub fn stem(&mut self, spec: &BackboneSpec) -> Node {
        let c0 = spec.in_channels;
        match spec.stem {
            StemSpec::Conv {
                out,
                kernel,
                stride,
                pad,
                activation,
            } => self.conv_unit(c0, out, (kernel, kernel), stride, (pad, pad), 1, Some(activation)),
            StemSpec::Resnet { out } => Node::Seq(vec![
                self.basic(c0, out, (7, 7), 2, (3, 3)),
                Node::MaxPool { k: 3, stride: 2, pad: 1 },
            ]),
            StemSpec::Inception { stride } => Node::Seq(vec![
                self.basic(c0, 32, (3, 3), stride, (0, 0)),
                self.basic(32, 32, (3, 3), 1, (0, 0)),
                self.basic(32, 64, (3, 3), 1, (1, 1)),
                Node::MaxPool { k: 3, stride: 2, pad: 0 },
                self.basic(64, 80, (1, 1), 1, (0, 0)),
                self.basic(80, 192, (3, 3), 1, (0, 0)),
                Node::MaxPool { k: 3, stride: 2, pad: 0 },
            ]),
        }
    }

    fn bottleneck(&mut self, in_c: usize, out_c: usize, expand: usize, stride: usize) -> Node {
        let hidden = in_c * expand;
        let mut body = Vec::new();
        if expand != 1 {
            body.push(self.conv_unit(in_c, hidden, (1, 1), 1, (0, 0), 1, Some(Activation::Relu6)));
        }
        body.push(self.conv_unit(hidden, hidden, (3, 3), stride, (1, 1), hidden, Some(Activation::Relu6)));
        body.push(self.conv_unit(hidden, out_c, (1, 1), 1, (0, 0), 1, None));
        let body = Node::Seq(body);
        if stride == 1 && in_c == out_c {
            Node::Residual {
                body: Box::new(body),
                shortcut: None,
            }
        } else {
            body
        }
    }

    pub fn block(&mut self, spec: &BlockSpec, in_c: usize) -> Node {
        match *spec {
            BlockSpec::InvertedResidual {
                expand,
                out,
                repeats,
                stride,
            } => {
                let mut layers = vec![self.bottleneck(in_c, out, expand, stride)];
                for _ in 1..repeats {
                    layers.push(self.bottleneck(out, out, expand, 1));
                }
                Node::Seq(layers)
            }
            BlockSpec::Basic { out, stride } => {
                let body = Node::Seq(vec![
                    self.basic(in_c, out, (3, 3), stride, (1, 1)),
                    self.conv_unit(out, out, (3, 3), 1, (1, 1), 1, None),
                ]);
                let shortcut = (stride != 1 || in_c != out)
                    .then(|| Box::new(self.conv_unit(in_c, out, (1, 1), stride, (0, 0), 1, None)));
                Node::Seq(vec![
                    Node::Residual {
                        body: Box::new(body),
                        shortcut,
                    },
                    Node::Relu,
                ])
            }
            BlockSpec::InceptionA { pool_features } => Node::Concat(vec![
                self.basic(in_c, 64, (1, 1), 1, (0, 0)),
                Node::Seq(vec![
                    self.basic(in_c, 48, (1, 1), 1, (0, 0)),
                    self.basic(48, 64, (5, 5), 1, (2, 2)),
                ]),
                Node::Seq(vec![
                    self.basic(in_c, 64, (1, 1), 1, (0, 0)),
                    self.basic(64, 96, (3, 3), 1, (1, 1)),
                    self.basic(96, 96, (3, 3), 1, (1, 1)),
                ]),
                Node::Seq(vec![
                    Node::AvgPool { k: 3, stride: 1, pad: 1 },
                    self.basic(in_c, pool_features, (1, 1), 1, (0, 0)),
                ]),
            ]),
            BlockSpec::InceptionB => Node::Concat(vec![
                self.basic(in_c, 384, (3, 3), 2, (0, 0)),
                Node::Seq(vec![
                    self.basic(in_c, 64, (1, 1), 1, (0, 0)),
                    self.basic(64, 96, (3, 3), 1, (1, 1)),
                    self.basic(96, 96, (3, 3), 2, (0, 0)),
                ]),
                Node::MaxPool { k: 3, stride: 2, pad: 0 },
            ]),
            BlockSpec::InceptionC { c7 } => Node::Concat(vec![
                self.basic(in_c, 192, (1, 1), 1, (0, 0)),
                Node::Seq(vec![
                    self.basic(in_c, c7, (1, 1), 1, (0, 0)),
                    self.basic(c7, c7, (1, 7), 1, (0, 3)),
                    self.basic(c7, 192, (7, 1), 1, (3, 0)),
                ]),
                Node::Seq(vec![
                    self.basic(in_c, c7, (1, 1), 1, (0, 0)),
                    self.basic(c7, c7, (7, 1), 1, (3, 0)),
                    self.basic(c7, c7, (1, 7), 1, (0, 3)),
                    self.basic(c7, c7, (7, 1), 1, (3, 0)),
                    self.basic(c7, 192, (1, 7), 1, (0, 3)),
                ]),
                Node::Seq(vec![
                    Node::AvgPool { k: 3, stride: 1, pad: 1 },
                    self.basic(in_c, 192, (1, 1), 1, (0, 0)),
                ]),
            ]),
            BlockSpec::InceptionD => Node::Concat(vec![
                Node::Seq(vec![
                    self.basic(in_c, 192, (1, 1), 1, (0, 0)),
                    self.basic(192, 320, (3, 3), 2, (0, 0)),
                ]),
                Node::Seq(vec![
                    self.basic(in_c, 192, (1, 1), 1, (0, 0)),
                    self.basic(192, 192, (1, 7), 1, (0, 3)),
                    self.basic(192, 192, (7, 1), 1, (3, 0)),
                    self.basic(192, 192, (3, 3), 2, (0, 0)),
                ]),
                Node::MaxPool { k: 3, stride: 2, pad: 0 },
            ]),
            BlockSpec::InceptionE => Node::Concat(vec![
                self.basic(in_c, 320, (1, 1), 1, (0, 0)),
                Node::Seq(vec![
                    self.basic(in_c, 384, (1, 1), 1, (0, 0)),
                    Node::Concat(vec![
                        self.basic(384, 384, (1, 3), 1, (0, 1)),
                        self.basic(384, 384, (3, 1), 1, (1, 0)),
                    ]),
                ]),
                Node::Seq(vec![
                    self.basic(in_c, 448, (1, 1), 1, (0, 0)),
                    self.basic(448, 384, (3, 3), 1, (1, 1)),
                    Node::Concat(vec![
                        self.basic(384, 384, (1, 3), 1, (0, 1)),
                        self.basic(384, 384, (3, 1), 1, (1, 0)),
                    ]),
                ]),
                Node::Seq(vec![
                    Node::AvgPool { k: 3, stride: 1, pad: 1 },
                    self.basic(in_c, 192, (1, 1), 1, (0, 0)),
                ]),
            ]),
        }
    }

    pub fn head_conv(&mut self, in_c: usize, out_c: usize) -> Node {
        self.conv_unit(in_c, out_c, (1, 1), 1, (0, 0), 1, Some(Activation::Relu6))
    }

    /// Probe classifier for intermediate feature maps: two depthwise +
    /// pointwise stages, a final depthwise stride-2 conv, pooling and a
    /// two-way linear layer. Widths scale with the trunk's channel count.
    pub fn probe_head(&mut self, in_c: usize) -> (Node, usize, usize) {
        let w1 = (in_c * 512).div_ceil(288);
        let w2 = (in_c * 1024).div_ceil(288);
        let node = Node::Seq(vec![
            self.conv_unit(in_c, in_c, (3, 3), 1, (1, 1), in_c, Some(Activation::Relu)),
            self.conv_unit(in_c, w1, (1, 1), 1, (0, 0), 1, Some(Activation::Relu)),
            self.conv_unit(w1, w1, (3, 3), 2, (1, 1), w1, Some(Activation::Relu)),
            self.conv_unit(w1, w2, (1, 1), 1, (0, 0), 1, Some(Activation::Relu)),
            self.conv_unit(w2, w2, (3, 3), 2, (1, 1), w2, Some(Activation::Relu)),
            Node::GlobalAvgPool,
            self.linear(w2, 2),
        ]);
        (node, w1, w2)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_layouts_validate() {
        for spec in [
            BackboneSpec::tiny(),
            BackboneSpec::dhm_full(),
            BackboneSpec::dhr(),
            BackboneSpec::dhi(),
        ] {
            spec.validate().unwrap();
        }
        assert_eq!(BackboneSpec::tiny().total_blocks(), 4);
        assert_eq!(BackboneSpec::dhm_full().total_blocks(), 7);
    }

    #[test]
    fn collapsing_layout_is_rejected() {
        let mut spec = BackboneSpec::tiny();
        spec.input_size = 3;
        assert!(spec.validate().is_err());
        spec.input_size = 224;
        spec.blocks.clear();
        assert!(spec.validate().is_err());
    }

    #[test]
    fn variant_parsing() {
        assert_eq!("dhm_full".parse::<Variant>().unwrap(), Variant::DhmFull);
        assert!("resnet".parse::<Variant>().is_err());
    }

    #[test]
    fn dry_and_seeded_builders_agree_on_layout() {
        let spec = BackboneSpec::tiny();
        let mut a = Builder::dry();
        let mut b = Builder::seeded(3, 0);
        let na = a.block(&spec.blocks[2], 24);
        let nb = b.block(&spec.blocks[2], 24);
        assert_eq!(na, nb);
        assert_eq!(a.len, b.finish().len());
    }
}
