//! Pyramid edge extraction, the two-branch multi-task head with interactive
//! attention, cross-stage feature fusion and the decoder.

use rand::Rng;

use super::layers::{resize_to, ConvLayer, ConvSpec};
use crate::params::{BoundParams, ParameterStore};
use crate::tensor::{Scalar, Tape, TensorError, Var};
use crate::Error;

/// Average-pool kernel sizes used by the edge extractor of each stage.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PeeConfig {
    pub pool_sizes_per_stage: [Vec<usize>; 4],
}

impl Default for PeeConfig {
    fn default() -> Self {
        PeeConfig {
            pool_sizes_per_stage: [vec![5, 7], vec![5, 7], vec![3, 5], vec![3, 5]],
        }
    }
}

impl PeeConfig {
    pub fn validate(&self) -> Result<(), Error> {
        for (s, sizes) in self.pool_sizes_per_stage.iter().enumerate() {
            if sizes.is_empty() {
                return Err(Error::Invalid(format!("stage {} has no pool sizes", s + 1)));
            }
            if let Some(k) = sizes.iter().find(|&&k| k < 3 || k % 2 == 0) {
                return Err(Error::Invalid(format!(
                    "pool size {k} for stage {} must be odd and >= 3",
                    s + 1
                )));
            }
        }
        Ok(())
    }
}

/// `F'` minus its same-size average pool for each kernel size, in order.
pub fn pyramid_differences<T: Scalar>(
    tape: &mut Tape<T>,
    reduced: Var,
    pool_sizes: &[usize],
) -> Result<Vec<Var>, TensorError> {
    pool_sizes
        .iter()
        .map(|&k| {
            if k % 2 == 0 {
                return Err(TensorError::InvalidArgument {
                    op: "pee_forward",
                    detail: format!("pool size {k} is even"),
                });
            }
            let pooled = tape.avg_pool2d(reduced, k, 1, (k - 1) / 2)?;
            tape.sub(reduced, pooled)
        })
        .collect()
}

/// Edge extractor for one stage: pyramid differences fused with the input.
#[derive(Debug, Clone)]
pub struct Pee {
    pool_sizes: Vec<usize>,
    fuse: ConvLayer,
}

impl Pee {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParameterStore<T>,
        rng: &mut R,
        stage: usize,
        pool_sizes: &[usize],
        channels: usize,
    ) -> Result<Self, Error> {
        let fuse = ConvLayer::pointwise(
            store,
            rng,
            &format!("pee{stage}.fuse"),
            (pool_sizes.len() + 1) * channels,
            channels,
        )?;
        Ok(Pee {
            pool_sizes: pool_sizes.to_vec(),
            fuse,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &BoundParams,
        reduced: Var,
    ) -> Result<Var, TensorError> {
        let mut parts = pyramid_differences(tape, reduced, &self.pool_sizes)?;
        parts.push(reduced);
        let cat = tape.concat_channels(&parts)?;
        self.fuse.forward(tape, params, cat)
    }

    pub fn spec(&self) -> &ConvSpec {
        self.fuse.spec()
    }
}

/// Gated exchange between edge and segmentation features.
///
/// Both outputs are computed from the inputs as given:
/// `e' = e + (1 - sigmoid(e)) * s` and `s' = s + (1 - sigmoid(s)) * e`.
pub fn interactive_attention<T: Scalar>(
    tape: &mut Tape<T>,
    edge: Var,
    seg: Var,
) -> Result<(Var, Var), TensorError> {
    if tape.shape(edge) != tape.shape(seg) {
        return Err(TensorError::ShapeMismatch {
            op: "interactive_attention",
            left: tape.shape(edge),
            right: tape.shape(seg),
        });
    }
    let gate = |tape: &mut Tape<T>, own: Var, other: Var| -> Result<Var, TensorError> {
        let conf = tape.sigmoid(own)?;
        let reverse = tape.scalar_rsub(1.0, conf)?;
        let msg = tape.mul(reverse, other)?;
        tape.add(own, msg)
    };
    let e = gate(tape, edge, seg)?;
    let s = gate(tape, seg, edge)?;
    Ok((e, s))
}

#[derive(Debug, Clone)]
struct TaskBranch {
    conv1: ConvLayer,
    conv2: ConvLayer,
    head: ConvLayer,
}

impl TaskBranch {
    fn new<T: Scalar, R: Rng>(
        store: &mut ParameterStore<T>,
        rng: &mut R,
        name: &str,
        channels: usize,
    ) -> Result<Self, Error> {
        Ok(TaskBranch {
            conv1: ConvLayer::same3(store, rng, &format!("{name}.conv1"), channels, channels, 1, 1)?,
            conv2: ConvLayer::same3(store, rng, &format!("{name}.conv2"), channels, channels, 1, 1)?,
            head: ConvLayer::pointwise(store, rng, &format!("{name}.head"), channels, 1)?,
        })
    }
}

/// Output of one mini multi-task module.
#[derive(Debug, Clone, Copy)]
pub struct MtlOutput {
    /// Fused feature `F_M`, same size as the input.
    pub fused: Var,
    /// Edge logits at the network input resolution.
    pub edge_logits: Var,
    /// Segmentation logits at the network input resolution.
    pub seg_logits: Var,
}

/// Edge and segmentation branches with an optional interactive-attention
/// exchange after the first conv layer.
#[derive(Debug, Clone)]
pub struct MiniMtl {
    edge: TaskBranch,
    seg: TaskBranch,
    fuse: ConvLayer,
}

impl MiniMtl {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParameterStore<T>,
        rng: &mut R,
        stage: usize,
        channels: usize,
    ) -> Result<Self, Error> {
        Ok(MiniMtl {
            edge: TaskBranch::new(store, rng, &format!("mtl{stage}.edge"), channels)?,
            seg: TaskBranch::new(store, rng, &format!("mtl{stage}.seg"), channels)?,
            fuse: ConvLayer::pointwise(store, rng, &format!("mtl{stage}.fuse"), 2 * channels, channels)?,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &BoundParams,
        input: Var,
        out_size: (usize, usize),
        ia_enabled: bool,
    ) -> Result<MtlOutput, TensorError> {
        let mut e = self.edge.conv1.forward_relu(tape, params, input)?;
        let mut s = self.seg.conv1.forward_relu(tape, params, input)?;
        if ia_enabled {
            (e, s) = interactive_attention(tape, e, s)?;
        }
        let e = self.edge.conv2.forward_relu(tape, params, e)?;
        let s = self.seg.conv2.forward_relu(tape, params, s)?;

        let e_small = self.edge.head.forward(tape, params, e)?;
        let edge_logits = tape.bilinear_resize(e_small, out_size.0, out_size.1)?;
        let s_small = self.seg.head.forward(tape, params, s)?;
        let seg_logits = tape.bilinear_resize(s_small, out_size.0, out_size.1)?;

        let cat = tape.concat_channels(&[e, s])?;
        let fused = self.fuse.forward(tape, params, cat)?;
        Ok(MtlOutput {
            fused,
            edge_logits,
            seg_logits,
        })
    }

    pub fn conv_specs(&self) -> Vec<ConvSpec> {
        [&self.edge, &self.seg]
            .iter()
            .flat_map(|b| [&b.conv1, &b.conv2, &b.head])
            .chain([&self.fuse])
            .map(|c| c.spec().clone())
            .collect()
    }

    /// First conv of the segmentation branch.
    pub fn seg_conv1(&self) -> &ConvLayer {
        &self.seg.conv1
    }
}

/// Cross-stage fusion for stage `i`:
/// `F_i + (1 - sigmoid(F_i)) * sum_{j != i} sigmoid(F_j) * F_j`, with each
/// `F_j` resized to stage `i`'s spatial size.
pub fn cff_forward<T: Scalar>(
    tape: &mut Tape<T>,
    features: &[Var],
    i: usize,
) -> Result<Var, TensorError> {
    let target = *features.get(i).ok_or_else(|| TensorError::InvalidArgument {
        op: "cff_forward",
        detail: format!("stage index {i} out of range for {} features", features.len()),
    })?;
    let ts = tape.shape(target);
    let mut complement: Option<Var> = None;
    for (j, &f) in features.iter().enumerate() {
        if j == i {
            continue;
        }
        let fs = tape.shape(f);
        if fs.c() != ts.c() || fs.n() != ts.n() {
            return Err(TensorError::ShapeMismatch {
                op: "cff_forward",
                left: ts,
                right: fs,
            });
        }
        let f = resize_to(tape, f, ts.h(), ts.w())?;
        let gate = tape.sigmoid(f)?;
        let gated = tape.mul(gate, f)?;
        complement = Some(match complement {
            Some(acc) => tape.add(acc, gated)?,
            None => gated,
        });
    }
    let Some(complement) = complement else {
        return Ok(target);
    };
    let conf = tape.sigmoid(target)?;
    let reverse = tape.scalar_rsub(1.0, conf)?;
    let msg = tape.mul(reverse, complement)?;
    tape.add(target, msg)
}

/// Top-down decoder over the ASPP output and the per-stage fused features.
#[derive(Debug, Clone)]
pub struct Decoder {
    /// Index 0 is stage 1's fuse conv, index 3 stage 4's.
    stages: Vec<ConvLayer>,
    head: ConvLayer,
}

impl Decoder {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParameterStore<T>,
        rng: &mut R,
        aspp_channels: usize,
        stage_channels: usize,
        decoder_channels: usize,
    ) -> Result<Self, Error> {
        let mut stages = Vec::with_capacity(4);
        for s in 1..=4 {
            let cin = if s == 4 { aspp_channels } else { decoder_channels } + stage_channels;
            stages.push(ConvLayer::pointwise(
                store,
                rng,
                &format!("decoder.d{s}"),
                cin,
                decoder_channels,
            )?);
        }
        let head = ConvLayer::pointwise(store, rng, "decoder.head", decoder_channels, 1)?;
        Ok(Decoder { stages, head })
    }

    /// Returns the logits at `out_size` and the decoding features `D_1..D_4`.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &BoundParams,
        aspp: Var,
        stage_features: &[Var; 4],
        out_size: (usize, usize),
    ) -> Result<(Var, [Var; 4]), TensorError> {
        let mut d = [aspp; 4];
        let mut prev = aspp;
        for i in (0..4).rev() {
            let f = stage_features[i];
            let fs = tape.shape(f);
            let up = resize_to(tape, prev, fs.h(), fs.w())?;
            let cat = tape.concat_channels(&[up, f])?;
            prev = self.stages[i].forward_relu(tape, params, cat)?;
            d[i] = prev;
        }
        let small = self.head.forward(tape, params, d[0])?;
        let logits = tape.bilinear_resize(small, out_size.0, out_size.1)?;
        Ok((logits, d))
    }

    pub fn conv_specs(&self) -> Vec<ConvSpec> {
        self.stages
            .iter()
            .chain([&self.head])
            .map(|c| c.spec().clone())
            .collect()
    }
}
