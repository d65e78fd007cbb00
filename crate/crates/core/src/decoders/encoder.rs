use crate::autodiff::{ConvAttrs, NodeId};
use crate::error::{Error, Result};
use crate::rng::Rng;

use super::{ConvUnitBlock, Graph, ParamStore};

/// Stack of strided 3x3 unit blocks emitting features at ratios 4, 8, 16, 32,
/// or a single feature at output stride 8 or 16.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyEncoder {
    stem: ConvUnitBlock,
    stages: Vec<ConvUnitBlock>,
    widths: [usize; 4],
    output_stride: Option<usize>,
}

impl ToyEncoder {
    /// `widths` are the channel counts of C2..C5.
    pub fn new(in_c: usize, widths: [usize; 4], output_stride: Option<usize>) -> Result<Self> {
        if let Some(s) = output_stride {
            if s != 8 && s != 16 {
                return Err(Error::Config(format!("output stride must be 8 or 16, got {s}")));
            }
        }
        let limit = output_stride.unwrap_or(32);
        let stem = ConvUnitBlock::new("enc.stem", in_c, widths[0], 3).with_attrs(ConvAttrs::new(3, 2, 1));
        let mut stages = Vec::new();
        let (mut ratio, mut dilation, mut prev) = (2, 1, widths[0]);
        for (i, &w) in widths.iter().enumerate() {
            let attrs = if ratio < limit {
                ratio *= 2;
                ConvAttrs::new(3, 2, 1)
            } else {
                dilation *= 2;
                ConvAttrs::new(3, 1, dilation)
            };
            stages.push(ConvUnitBlock::new(format!("enc.c{}", i + 2), prev, w, 3).with_attrs(attrs));
            prev = w;
        }
        Ok(Self { stem, stages, widths, output_stride })
    }

    pub fn widths(&self) -> [usize; 4] {
        self.widths
    }

    pub fn output_stride(&self) -> Option<usize> {
        self.output_stride
    }

    /// Downsampling ratio of each emitted feature.
    pub fn ratios(&self) -> Vec<usize> {
        match self.output_stride {
            None => vec![4, 8, 16, 32],
            Some(s) => vec![s],
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) -> Result<()> {
        self.stem.init(store, rng)?;
        self.stages.iter().try_for_each(|b| b.init(store, rng))
    }

    /// `{C2, C3, C4, C5}`, or `[C5]` in output-stride mode.
    pub fn forward(&self, g: &mut Graph, image: NodeId) -> Result<Vec<NodeId>> {
        let s = g.tape.value(image).shape();
        let div = self.output_stride.unwrap_or(32);
        if s.h % div != 0 || s.w % div != 0 {
            return Err(Error::ShapeMismatch(format!("encoder input {s} must be divisible by {div}")));
        }
        let mut x = self.stem.forward(g, image)?;
        let mut feats = Vec::with_capacity(4);
        for b in &self.stages {
            x = b.forward(g, x)?;
            feats.push(x);
        }
        Ok(match self.output_stride {
            None => feats,
            Some(_) => vec![x],
        })
    }
}
