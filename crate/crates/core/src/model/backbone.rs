//! Residual encoder with dilated late stages, and the ASPP context head.

use rand::Rng;

use super::layers::{ConvLayer, ConvSpec};
use crate::params::{BoundParams, ParameterStore};
use crate::tensor::{Scalar, Tape, TensorError, Var};
use crate::Error;

/// Stride of the stem convolution.
pub const STEM_STRIDE: usize = 2;
/// Per-stage stride of the first block; with the stem this gives cumulative
/// output strides 4, 8, 8, 8.
pub const STAGE_STRIDES: [usize; 4] = [2, 2, 1, 1];
/// Dilation of every 3x3 conv in each stage.
pub const STAGE_DILATIONS: [usize; 4] = [1, 1, 2, 2];
/// Cumulative output stride of each stage.
pub const STAGE_OUTPUT_STRIDES: [usize; 4] = [4, 8, 8, 8];

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    pub stem_channels: usize,
    pub stage_channels: [usize; 4],
    pub blocks_per_stage: [usize; 4],
    pub aspp_rates: [usize; 4],
    pub aspp_out_channels: usize,
    /// Width of the reduced stage features.
    pub reduce_channels: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl BackboneConfig {
    pub fn desk() -> Self {
        BackboneConfig {
            stem_channels: 16,
            stage_channels: [16, 32, 64, 64],
            blocks_per_stage: [1, 1, 1, 1],
            aspp_rates: [1, 2, 4, 6],
            aspp_out_channels: 64,
            reduce_channels: 32,
        }
    }

    /// Every width set to `channels`; used for gradient checks.
    pub fn uniform(channels: usize) -> Self {
        BackboneConfig {
            stem_channels: channels,
            stage_channels: [channels; 4],
            blocks_per_stage: [1, 1, 1, 1],
            aspp_rates: [1, 2, 4, 6],
            aspp_out_channels: channels,
            reduce_channels: channels,
        }
    }

    pub fn validate(&self) -> Result<(), Error> {
        let widths = [self.stem_channels, self.aspp_out_channels, self.reduce_channels];
        if widths.iter().chain(&self.stage_channels).any(|&c| c == 0) {
            return Err(Error::Invalid("backbone channel widths must be positive".into()));
        }
        if self.blocks_per_stage.iter().any(|&b| b == 0) {
            return Err(Error::Invalid("every stage needs at least one block".into()));
        }
        if self.aspp_rates.iter().any(|&r| r == 0) {
            return Err(Error::Invalid("aspp rates must be >= 1".into()));
        }
        Ok(())
    }
}

/// Per-stage features. Slots after `reduced` are filled by the heads.
#[derive(Debug, Clone, Copy)]
pub struct StageBundle {
    /// Raw residual stage output.
    pub raw: Var,
    /// 1x1-reduced features.
    pub reduced: Var,
    pub pee: Option<Var>,
    pub mtl: Option<Var>,
    pub cff: Option<Var>,
    pub pred_edge: Option<Var>,
    pub pred_seg: Option<Var>,
}

impl StageBundle {
    fn new(raw: Var, reduced: Var) -> Self {
        StageBundle {
            raw,
            reduced,
            pee: None,
            mtl: None,
            cff: None,
            pred_edge: None,
            pred_seg: None,
        }
    }
}

/// conv3x3 -> relu -> conv3x3, plus identity or 1x1 projection, relu after the sum.
#[derive(Debug, Clone)]
pub struct ResidualBlock {
    conv1: ConvLayer,
    conv2: ConvLayer,
    projection: Option<ConvLayer>,
}

impl ResidualBlock {
    fn new<T: Scalar, R: Rng>(
        store: &mut ParameterStore<T>,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        dilation: usize,
    ) -> Result<Self, Error> {
        let conv1 = ConvLayer::same3(store, rng, &format!("{name}.conv1"), cin, cout, stride, dilation)?;
        let conv2 = ConvLayer::same3(store, rng, &format!("{name}.conv2"), cout, cout, 1, dilation)?;
        let projection = if cin != cout || stride != 1 {
            let geom = crate::tensor::kernels::ConvGeom::new(stride, 0, 1);
            Some(ConvLayer::new(store, rng, &format!("{name}.proj"), cin, cout, 1, geom)?)
        } else {
            None
        };
        Ok(ResidualBlock {
            conv1,
            conv2,
            projection,
        })
    }

    fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &BoundParams,
        x: Var,
    ) -> Result<Var, TensorError> {
        let h = self.conv1.forward_relu(tape, params, x)?;
        let h = self.conv2.forward(tape, params, h)?;
        let skip = match &self.projection {
            Some(p) => p.forward(tape, params, x)?,
            None => x,
        };
        let sum = tape.add(h, skip)?;
        tape.relu(sum)
    }

    fn specs(&self) -> impl Iterator<Item = &ConvSpec> {
        [Some(&self.conv1), Some(&self.conv2), self.projection.as_ref()]
            .into_iter()
            .flatten()
            .map(|c| c.spec())
    }
}

#[derive(Debug, Clone)]
pub struct Backbone {
    stem: ConvLayer,
    stages: Vec<Vec<ResidualBlock>>,
    reduce: Vec<ConvLayer>,
}

impl Backbone {
    pub fn new<T: Scalar, R: Rng>(
        cfg: &BackboneConfig,
        store: &mut ParameterStore<T>,
        rng: &mut R,
    ) -> Result<Self, Error> {
        cfg.validate()?;
        let stem = ConvLayer::same3(store, rng, "backbone.stem", 3, cfg.stem_channels, STEM_STRIDE, 1)?;
        let mut stages = Vec::with_capacity(4);
        let mut cin = cfg.stem_channels;
        for s in 0..4 {
            let cout = cfg.stage_channels[s];
            let mut blocks = Vec::with_capacity(cfg.blocks_per_stage[s]);
            for b in 0..cfg.blocks_per_stage[s] {
                let stride = if b == 0 { STAGE_STRIDES[s] } else { 1 };
                let name = format!("backbone.stage{}.block{b}", s + 1);
                blocks.push(ResidualBlock::new(
                    store,
                    rng,
                    &name,
                    cin,
                    cout,
                    stride,
                    STAGE_DILATIONS[s],
                )?);
                cin = cout;
            }
            stages.push(blocks);
        }
        let reduce = (0..4)
            .map(|s| {
                ConvLayer::pointwise(
                    store,
                    rng,
                    &format!("backbone.reduce{}", s + 1),
                    cfg.stage_channels[s],
                    cfg.reduce_channels,
                )
            })
            .collect::<Result<_, _>>()?;
        Ok(Backbone {
            stem,
            stages,
            reduce,
        })
    }

    /// Stage features `F_1..F_4` and their reductions `F'_1..F'_4`.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &BoundParams,
        image: Var,
    ) -> Result<[StageBundle; 4], TensorError> {
        let s = tape.shape(image);
        if s.h() % 8 != 0 || s.w() % 8 != 0 || s.h() == 0 || s.w() == 0 {
            return Err(TensorError::InvalidArgument {
                op: "backbone_forward",
                detail: format!("input {}x{} is not divisible by 8", s.h(), s.w()),
            });
        }
        let mut x = self.stem.forward_relu(tape, params, image)?;
        let mut out = Vec::with_capacity(4);
        for (blocks, reduce) in self.stages.iter().zip(&self.reduce) {
            for block in blocks {
                x = block.forward(tape, params, x)?;
            }
            let reduced = reduce.forward(tape, params, x)?;
            out.push(StageBundle::new(x, reduced));
        }
        Ok(out.try_into().expect("four stages"))
    }

    pub fn conv_specs(&self) -> Vec<ConvSpec> {
        let mut v = vec![self.stem.spec().clone()];
        for blocks in &self.stages {
            for b in blocks {
                v.extend(b.specs().cloned());
            }
        }
        v.extend(self.reduce.iter().map(|c| c.spec().clone()));
        v
    }

    /// Specs of the convs inside residual stage `s` (0-based).
    pub fn stage_specs(&self, s: usize) -> Vec<ConvSpec> {
        self.stages[s]
            .iter()
            .flat_map(|b| b.specs().cloned())
            .collect()
    }
}

/// Four parallel atrous branches plus a pooled branch, fused by a 1x1 conv.
#[derive(Debug, Clone)]
pub struct Aspp {
    branches: Vec<ConvLayer>,
    pooled: ConvLayer,
    project: ConvLayer,
}

impl Aspp {
    pub fn new<T: Scalar, R: Rng>(
        cfg: &BackboneConfig,
        store: &mut ParameterStore<T>,
        rng: &mut R,
    ) -> Result<Self, Error> {
        let cin = cfg.stage_channels[3];
        let cout = cfg.aspp_out_channels;
        let mut branches = vec![ConvLayer::pointwise(store, rng, "aspp.branch1", cin, cout)?];
        for (i, &rate) in cfg.aspp_rates.iter().enumerate().skip(1) {
            branches.push(ConvLayer::same3(
                store,
                rng,
                &format!("aspp.branch{}", i + 1),
                cin,
                cout,
                1,
                rate,
            )?);
        }
        let pooled = ConvLayer::pointwise(store, rng, "aspp.pool", cin, cout)?;
        let project = ConvLayer::pointwise(store, rng, "aspp.project", 5 * cout, cout)?;
        Ok(Aspp {
            branches,
            pooled,
            project,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &BoundParams,
        f4: Var,
    ) -> Result<Var, TensorError> {
        let s = tape.shape(f4);
        let mut parts = Vec::with_capacity(5);
        for b in &self.branches {
            parts.push(b.forward_relu(tape, params, f4)?);
        }
        let g = tape.global_avg_pool(f4)?;
        let g = self.pooled.forward_relu(tape, params, g)?;
        parts.push(tape.bilinear_resize(g, s.h(), s.w())?);
        let cat = tape.concat_channels(&parts)?;
        self.project.forward_relu(tape, params, cat)
    }

    /// Dilation of each of the four conv branches.
    pub fn rates(&self) -> [usize; 4] {
        let mut r = [0; 4];
        for (slot, b) in r.iter_mut().zip(&self.branches) {
            *slot = b.spec().dilation;
        }
        r
    }

    pub fn conv_specs(&self) -> Vec<ConvSpec> {
        self.branches
            .iter()
            .chain([&self.pooled, &self.project])
            .map(|c| c.spec().clone())
            .collect()
    }
}
