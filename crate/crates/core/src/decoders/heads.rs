use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ConvAttrs, NodeId};
use crate::error::{Error, Result};
use crate::ops::{Kernel, UpsampleMode};
use crate::rng::Rng;

use super::{fuse, Classifier, ConvUnitBlock, Equalization, FuseOutput, FusionSpec, Graph, ParamStore, ToyEncoder};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    UperHead,
    PspHead,
    AsppHead,
    SepAsppHead,
    FcnHead,
}

impl HeadKind {
    pub const ALL: [HeadKind; 5] =
        [HeadKind::UperHead, HeadKind::PspHead, HeadKind::AsppHead, HeadKind::SepAsppHead, HeadKind::FcnHead];

    pub fn as_str(self) -> &'static str {
        match self {
            HeadKind::UperHead => "uperhead",
            HeadKind::PspHead => "psphead",
            HeadKind::AsppHead => "aspphead",
            HeadKind::SepAsppHead => "sepaspphead",
            HeadKind::FcnHead => "fcnhead",
        }
    }

    /// Whether the head consumes the whole pyramid rather than one output-stride feature.
    pub fn uses_pyramid(self) -> bool {
        self == HeadKind::UperHead
    }
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        HeadKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown head {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    pub kind: HeadKind,
    pub in_channels: usize,
    /// Channels of C2..C5.
    pub encoder_widths: [usize; 4],
    pub width: usize,
    pub classes: usize,
    pub ppm_bins: Vec<usize>,
    /// Kernel of the block closing the pooling module inside UPerHead.
    pub ppm_kernel: usize,
    pub output_stride: usize,
    pub fcn_depth: usize,
    pub fcn_kernel: usize,
    pub fusion_kernel: usize,
    pub align_corners: bool,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            kind: HeadKind::UperHead,
            in_channels: 3,
            encoder_widths: [16, 32, 48, 64],
            width: 32,
            classes: 4,
            ppm_bins: vec![1, 2, 3, 6],
            ppm_kernel: 3,
            output_stride: 8,
            fcn_depth: 2,
            fcn_kernel: 3,
            fusion_kernel: 3,
            align_corners: false,
        }
    }
}

impl HeadConfig {
    pub fn of(kind: HeadKind) -> Self {
        Self { kind, ..Self::default() }
    }

    pub fn upsample_mode(&self) -> UpsampleMode {
        UpsampleMode { kernel: Kernel::Bilinear, align_corners: self.align_corners }
    }

    /// Base atrous rate `96 / s`.
    pub fn atrous_base(&self) -> Result<usize> {
        if self.output_stride == 0 || 96 % self.output_stride != 0 {
            return Err(Error::Config(format!(
                "96 / output stride {} is not an integer",
                self.output_stride
            )));
        }
        Ok(96 / self.output_stride)
    }

    /// `{1, a, 2a, 3a}`.
    pub fn atrous_rates(&self) -> Result<[usize; 4]> {
        let a = self.atrous_base()?;
        Ok([1, a, 2 * a, 3 * a])
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Branch {
    Plain(ConvUnitBlock),
    Separable { depthwise: ConvUnitBlock, pointwise: ConvUnitBlock },
}

impl Branch {
    fn blocks(&self) -> Vec<&ConvUnitBlock> {
        match self {
            Branch::Plain(b) => vec![b],
            Branch::Separable { depthwise, pointwise } => vec![depthwise, pointwise],
        }
    }

    fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        match self {
            Branch::Plain(b) => b.forward(g, x),
            Branch::Separable { depthwise, pointwise } => {
                let y = depthwise.forward(g, x)?;
                pointwise.forward(g, y)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Layers {
    Uper {
        ppm: Vec<(usize, ConvUnitBlock)>,
        ppm_out: ConvUnitBlock,
        laterals: Vec<ConvUnitBlock>,
        fpn: Vec<ConvUnitBlock>,
    },
    Psp { ppm: Vec<(usize, ConvUnitBlock)> },
    Aspp { image_pool: ConvUnitBlock, branches: Vec<Branch> },
    Fcn { rest: Vec<ConvUnitBlock> },
}

/// Result of one forward pass through encoder and head.
#[derive(Clone, Debug)]
pub struct HeadForward {
    pub logits: NodeId,
    pub features: Vec<NodeId>,
    /// `None` only for a zero-depth FCN head.
    pub fusion: Option<(FusionSpec, FuseOutput)>,
}

/// Toy encoder followed by one decoder head.
#[derive(Clone, Debug, PartialEq)]
pub struct Segmenter {
    pub config: HeadConfig,
    pub encoder: ToyEncoder,
    layers: Layers,
    fusion: Option<ConvUnitBlock>,
    classifier: Classifier,
}

fn block(name: String, in_c: usize, out_c: usize, k: usize) -> ConvUnitBlock {
    ConvUnitBlock::new(name, in_c, out_c, k)
}

impl Segmenter {
    pub fn new(config: HeadConfig) -> Result<Self> {
        let c = &config;
        if c.width == 0 || c.classes < 2 || c.in_channels == 0 || c.encoder_widths.contains(&0) {
            return Err(Error::Config("widths must be positive and classes >= 2".into()));
        }
        for k in [c.ppm_kernel, c.fcn_kernel, c.fusion_kernel] {
            if k % 2 == 0 {
                return Err(Error::Config(format!("kernel sizes must be odd, got {k}")));
            }
        }
        if c.ppm_bins.is_empty() || c.ppm_bins.contains(&0) {
            return Err(Error::Config(format!("invalid pooling bins {:?}", c.ppm_bins)));
        }
        let d = c.width;
        let [_, _, _, c5] = c.encoder_widths;
        let stride = (!c.kind.uses_pyramid()).then_some(c.output_stride);
        let encoder = ToyEncoder::new(c.in_channels, c.encoder_widths, stride)?;
        let ppm = |prefix: &str| -> Vec<(usize, ConvUnitBlock)> {
            c.ppm_bins.iter().map(|&b| (b, block(format!("{prefix}{b}"), c5, d, 1))).collect()
        };
        let (layers, fusion) = match c.kind {
            HeadKind::UperHead => {
                let layers = Layers::Uper {
                    ppm: ppm("head.ppm"),
                    ppm_out: block("head.ppm_out".into(), c5 + c.ppm_bins.len() * d, d, c.ppm_kernel),
                    laterals: (0..3)
                        .map(|i| block(format!("head.lateral{}", i + 2), c.encoder_widths[i], d, 1))
                        .collect(),
                    fpn: (0..4).map(|i| block(format!("head.fpn{}", i + 2), d, d, 3)).collect(),
                };
                (layers, Some(block("head.fuse".into(), 4 * d, d, c.fusion_kernel)))
            }
            HeadKind::PspHead => {
                let fusion = block("head.fuse".into(), c5 + c.ppm_bins.len() * d, d, c.fusion_kernel);
                (Layers::Psp { ppm: ppm("head.ppm") }, Some(fusion))
            }
            HeadKind::AsppHead | HeadKind::SepAsppHead => {
                let separable = c.kind == HeadKind::SepAsppHead;
                let branches = c
                    .atrous_rates()?
                    .into_iter()
                    .map(|rate| {
                        let name = format!("head.aspp{rate}");
                        if rate == 1 {
                            Branch::Plain(block(name, c5, d, 1))
                        } else if separable {
                            Branch::Separable {
                                depthwise: block(format!("{name}.dw"), c5, c5, 3)
                                    .with_attrs(ConvAttrs::new(3, 1, rate).with_groups(c5)),
                                pointwise: block(format!("{name}.pw"), c5, d, 1),
                            }
                        } else {
                            Branch::Plain(block(name, c5, d, 3).with_attrs(ConvAttrs::new(3, 1, rate)))
                        }
                    })
                    .collect();
                let image_pool = block("head.image_pool".into(), c5, d, 1);
                (Layers::Aspp { image_pool, branches }, Some(block("head.fuse".into(), 5 * d, d, c.fusion_kernel)))
            }
            HeadKind::FcnHead => {
                let first = (c.fcn_depth > 0).then(|| block("head.fcn0".into(), c5, d, c.fcn_kernel));
                let rest = (1..c.fcn_depth).map(|i| block(format!("head.fcn{i}"), d, d, c.fcn_kernel)).collect();
                (Layers::Fcn { rest }, first)
            }
        };
        let cls_in = if c.kind == HeadKind::FcnHead && c.fcn_depth == 0 { c5 } else { d };
        let classifier = Classifier { name: "head.cls".into(), in_c: cls_in, classes: c.classes };
        Ok(Self { config, encoder, layers, fusion, classifier })
    }

    /// Freshly initialized parameters for every layer.
    pub fn init(&self, rng: &Rng) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        let mut rng = rng.named("params");
        self.encoder.init(&mut store, &mut rng)?;
        for b in self.blocks() {
            b.init(&mut store, &mut rng)?;
        }
        self.classifier.init(&mut store, &mut rng)?;
        Ok(store)
    }

    fn blocks(&self) -> Vec<&ConvUnitBlock> {
        let mut out: Vec<&ConvUnitBlock> = match &self.layers {
            Layers::Uper { ppm, ppm_out, laterals, fpn } => ppm
                .iter()
                .map(|(_, b)| b)
                .chain([ppm_out])
                .chain(laterals)
                .chain(fpn)
                .collect(),
            Layers::Psp { ppm } => ppm.iter().map(|(_, b)| b).collect(),
            Layers::Aspp { image_pool, branches } => {
                std::iter::once(image_pool).chain(branches.iter().flat_map(Branch::blocks)).collect()
            }
            Layers::Fcn { rest } => rest.iter().collect(),
        };
        out.extend(self.fusion.as_ref());
        out
    }

    /// The unit block applied to the concatenated branches.
    pub fn fusion_block(&self) -> Option<&ConvUnitBlock> {
        self.fusion.as_ref()
    }

    pub fn fusion_block_mut(&mut self) -> Option<&mut ConvUnitBlock> {
        self.fusion.as_mut()
    }

    pub fn forward(&self, g: &mut Graph, image: NodeId, eq: Equalization) -> Result<HeadForward> {
        let s = g.tape.value(image).shape();
        let features = self.encoder.forward(g, image)?;
        let mode = self.config.upsample_mode();
        let c5 = *features.last().expect("encoder emits at least one feature");
        let c5s = g.tape.value(c5).shape();
        let (c5h, c5w) = (c5s.h, c5s.w);
        let d = self.config.width;

        let (branches, ratios, channels): (Vec<NodeId>, Vec<f64>, Vec<usize>) = match &self.layers {
            Layers::Uper { ppm, ppm_out, laterals, fpn } => {
                let mut pooled = vec![c5];
                for (bin, b) in ppm {
                    let p = g.tape.avgpool_to(c5, *bin, *bin)?;
                    let p = b.forward(g, p)?;
                    pooled.push(g.tape.resize_to(p, c5h, c5w, mode)?);
                }
                let cat = g.tape.concat(&pooled)?;
                let mut f = ppm_out.forward(g, cat)?;
                let mut p = vec![fpn[3].forward(g, f)?];
                for i in (0..3).rev() {
                    let l = laterals[i].forward(g, features[i])?;
                    let ls = g.tape.value(l).shape();
                    let up = g.tape.upsample_to(f, ls.h, ls.w, mode)?;
                    f = g.tape.add(l, up)?;
                    p.push(fpn[i].forward(g, f)?);
                }
                p.reverse();
                (p, vec![1.0, 2.0, 4.0, 8.0], vec![d; 4])
            }
            Layers::Psp { ppm } => {
                let mut branches = vec![c5];
                let mut ratios = vec![1.0];
                for (bin, b) in ppm {
                    if *bin > c5h.min(c5w) {
                        return Err(Error::ShapeMismatch(format!("C5 of {c5s} is smaller than bin {bin}")));
                    }
                    let p = g.tape.avgpool_to(c5, *bin, *bin)?;
                    branches.push(b.forward(g, p)?);
                    ratios.push(c5h as f64 / *bin as f64);
                }
                let mut channels = vec![c5s.c];
                channels.extend(std::iter::repeat_n(d, ppm.len()));
                (branches, ratios, channels)
            }
            Layers::Aspp { image_pool, branches } => {
                let p = g.tape.avgpool_to(c5, 1, 1)?;
                let mut out = vec![image_pool.forward(g, p)?];
                let mut ratios = vec![c5h as f64];
                for b in branches {
                    out.push(b.forward(g, c5)?);
                    ratios.push(1.0);
                }
                (out, ratios, vec![d; 5])
            }
            Layers::Fcn { .. } => (vec![c5], vec![1.0], vec![c5s.c]),
        };

        let (mut z, fusion) = match &self.fusion {
            Some(fb) => {
                let spec = FusionSpec::new(ratios, channels, fb.clone(), mode)?;
                let out = fuse(g, &branches, &spec, eq)?;
                (out.output, Some((spec, out)))
            }
            None => (c5, None),
        };
        if let Layers::Fcn { rest } = &self.layers {
            for b in rest {
                z = b.forward(g, z)?;
            }
        }
        let logits = self.classifier.forward(g, z)?;
        let logits = g.tape.upsample_to(logits, s.h, s.w, mode)?;
        Ok(HeadForward { logits, features, fusion })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::randn;
    use crate::stats::moments;
    use crate::tensor::{Shape, Tensor};

    fn run(cfg: HeadConfig, hw: usize, n: usize) -> (Graph, HeadForward) {
        let seg = Segmenter::new(cfg).unwrap();
        let store = seg.init(&Rng::new(5, 0)).unwrap();
        let mut g = Graph::bind(&store, |_| false);
        let x = g.tape.constant(randn([n, 3, hw, hw], 0.0, 1.0, &mut Rng::new(6, 0)).unwrap());
        let out = seg.forward(&mut g, x, Equalization::Off).unwrap();
        (g, out)
    }

    #[test]
    fn every_head_emits_input_resolution() {
        for kind in HeadKind::ALL {
            let (g, out) = run(HeadConfig::of(kind), 64, 2);
            assert_eq!(g.tape.value(out.logits).shape().dims(), [2, 4, 64, 64], "{kind}");
        }
    }

    #[test]
    fn uperhead_subject_ratios() {
        let (g, out) = run(HeadConfig::of(HeadKind::UperHead), 64, 2);
        let (spec, fused) = out.fusion.unwrap();
        assert_eq!(spec.ratios, vec![1.0, 2.0, 4.0, 8.0]);
        for &s in &fused.subjects {
            assert_eq!(g.tape.value(s).shape().dims(), [2, 32, 16, 16]);
        }
    }

    #[test]
    fn psphead_at_stride_8() {
        let (g, out) = run(HeadConfig::of(HeadKind::PspHead), 48, 2);
        assert_eq!(g.tape.value(out.logits).shape().dims(), [2, 4, 48, 48]);
        let (spec, fused) = out.fusion.unwrap();
        assert_eq!(spec.ratios, vec![1.0, 6.0, 3.0, 2.0, 1.0]);
        assert_eq!(fused.subjects.len(), 5);
        for &s in &fused.subjects {
            let sh = g.tape.value(s).shape();
            assert_eq!((sh.h, sh.w), (6, 6));
        }
        // global bin broadcasts one value per sample and channel
        let gap = g.tape.value(fused.subjects[1]);
        for n in 0..2 {
            for c in 0..32 {
                let p = gap.plane(n, c);
                assert!(p.iter().all(|&v| v == p[0]));
            }
        }
    }

    #[test]
    fn psphead_rejects_small_c5() {
        let seg = Segmenter::new(HeadConfig { output_stride: 16, ..HeadConfig::of(HeadKind::PspHead) }).unwrap();
        let store = seg.init(&Rng::new(5, 0)).unwrap();
        let mut g = Graph::bind(&store, |_| false);
        let x = g.tape.constant(randn([2, 3, 64, 64], 0.0, 1.0, &mut Rng::new(6, 0)).unwrap());
        assert!(matches!(seg.forward(&mut g, x, Equalization::Off), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn atrous_rates_follow_output_stride() {
        let mut cfg = HeadConfig::of(HeadKind::AsppHead);
        assert_eq!(cfg.atrous_rates().unwrap(), [1, 12, 24, 36]);
        cfg.output_stride = 16;
        assert_eq!(cfg.atrous_rates().unwrap(), [1, 6, 12, 18]);
        cfg.output_stride = 7;
        assert!(matches!(cfg.atrous_rates(), Err(Error::Config(_))));
    }

    #[test]
    fn aspp_gap_subject_is_spatially_flat() {
        for kind in [HeadKind::AsppHead, HeadKind::SepAsppHead] {
            let (g, out) = run(HeadConfig::of(kind), 64, 2);
            let (_, fused) = out.fusion.unwrap();
            let gap = g.tape.value(fused.subjects[0]);
            let s = gap.shape();
            for n in 0..s.n {
                for c in 0..s.c {
                    assert_eq!(moments(&Tensor::row(gap.plane(n, c)).unwrap()).variance, 0.0);
                }
            }
            for &b in &fused.subjects[1..] {
                assert!(moments(g.tape.value(b)).variance > 0.0);
            }
        }
    }

    #[test]
    fn zero_depth_fcn_is_a_classifier() {
        let (g, out) = run(HeadConfig { fcn_depth: 0, ..HeadConfig::of(HeadKind::FcnHead) }, 64, 2);
        assert!(out.fusion.is_none());
        assert_eq!(g.tape.value(out.logits).shape().dims(), [2, 4, 64, 64]);
    }

    #[test]
    fn zero_input_gives_flat_logits() {
        let seg = Segmenter::new(HeadConfig::of(HeadKind::UperHead)).unwrap();
        let store = seg.init(&Rng::new(1, 0)).unwrap();
        let mut g = Graph::bind(&store, |_| false);
        let x = g.tape.constant(Tensor::zeros(Shape::new(2, 3, 64, 64).unwrap()));
        let out = seg.forward(&mut g, x, Equalization::Off).unwrap();
        let l = g.tape.value(out.logits);
        for n in 0..2 {
            for c in 0..4 {
                let p = l.plane(n, c);
                assert!(p.iter().all(|&v| v == p[0]));
            }
        }
    }

    #[test]
    fn kind_parsing() {
        for k in HeadKind::ALL {
            assert_eq!(k.as_str().parse::<HeadKind>().unwrap(), k);
        }
        assert!("segformer".parse::<HeadKind>().is_err());
    }
}
