//! The segmentation network: encoder, per-stage heads and decoder.

pub mod backbone;
pub mod heads;
pub mod layers;

use rand::Rng;

pub use backbone::{Aspp, Backbone, BackboneConfig, StageBundle};
pub use heads::{cff_forward, interactive_attention, Decoder, MiniMtl, Pee, PeeConfig};
pub use layers::{ConvLayer, ConvSpec};

use crate::params::{BoundParams, ParameterStore};
use crate::tensor::{Scalar, Tape, TensorError, Var};
use crate::Error;

/// Which of the three cascaded modules (and the attention exchange) are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Ablation {
    pub pee: bool,
    pub mtl: bool,
    pub cff: bool,
    pub ia: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation {
            pee: true,
            mtl: true,
            cff: true,
            ia: true,
        }
    }
}

impl Ablation {
    pub fn full() -> Self {
        Self::default()
    }

    /// Short label such as `full` or `w/o PEE`.
    pub fn label(&self) -> String {
        let off: Vec<&str> = [
            (self.pee, "PEE"),
            (self.mtl, "MTL"),
            (self.cff, "CFF"),
            (self.ia, "IA"),
        ]
        .iter()
        .filter(|(on, _)| !on)
        .map(|(_, n)| *n)
        .collect();
        if off.is_empty() {
            "full".into()
        } else {
            format!("w/o {}", off.join("+"))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub pee: PeeConfig,
    pub decoder_channels: usize,
    pub ablation: Ablation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    pub fn desk() -> Self {
        let backbone = BackboneConfig::desk();
        ModelConfig {
            decoder_channels: backbone.reduce_channels,
            backbone,
            pee: PeeConfig::default(),
            ablation: Ablation::full(),
        }
    }

    /// All widths equal to `channels`; small enough for exhaustive gradient checks.
    pub fn tiny(channels: usize) -> Self {
        ModelConfig {
            backbone: BackboneConfig::uniform(channels),
            pee: PeeConfig::default(),
            decoder_channels: channels,
            ablation: Ablation::full(),
        }
    }

    pub fn validate(&self) -> Result<(), Error> {
        self.backbone.validate()?;
        self.pee.validate()?;
        if self.decoder_channels == 0 {
            return Err(Error::Invalid("decoder_channels must be positive".into()));
        }
        Ok(())
    }
}

/// Every prediction map of one forward pass, all at input resolution.
#[derive(Debug, Clone)]
pub struct HeadOutputs {
    pub seg_logits: Var,
    /// Per-stage edge logits; `None` when the multi-task heads are disabled.
    pub stage_edge_logits: Option<[Var; 4]>,
    pub stage_seg_logits: Option<[Var; 4]>,
    pub stages: [StageBundle; 4],
    pub aspp: Var,
    pub decoder: [Var; 4],
}

impl HeadOutputs {
    /// The final map followed by any stage maps.
    pub fn all_logits(&self) -> Vec<Var> {
        let mut v = vec![self.seg_logits];
        if let (Some(e), Some(s)) = (self.stage_edge_logits, self.stage_seg_logits) {
            v.extend(e);
            v.extend(s);
        }
        v
    }
}

#[derive(Debug, Clone)]
pub struct BaNet {
    cfg: ModelConfig,
    backbone: Backbone,
    aspp: Aspp,
    pee: Option<Vec<Pee>>,
    mtl: Option<Vec<MiniMtl>>,
    decoder: Decoder,
}

impl BaNet {
    /// Build the network, registering its parameters in `store`.
    pub fn new<T: Scalar, R: Rng>(
        cfg: &ModelConfig,
        store: &mut ParameterStore<T>,
        rng: &mut R,
    ) -> Result<Self, Error> {
        cfg.validate()?;
        let width = cfg.backbone.reduce_channels;
        let backbone = Backbone::new(&cfg.backbone, store, rng)?;
        let aspp = Aspp::new(&cfg.backbone, store, rng)?;
        let pee = if cfg.ablation.pee {
            Some(
                (0..4)
                    .map(|s| Pee::new(store, rng, s + 1, &cfg.pee.pool_sizes_per_stage[s], width))
                    .collect::<Result<Vec<_>, _>>()?,
            )
        } else {
            None
        };
        let mtl = if cfg.ablation.mtl {
            Some(
                (0..4)
                    .map(|s| MiniMtl::new(store, rng, s + 1, width))
                    .collect::<Result<Vec<_>, _>>()?,
            )
        } else {
            None
        };
        let decoder = Decoder::new(
            store,
            rng,
            cfg.backbone.aspp_out_channels,
            width,
            cfg.decoder_channels,
        )?;
        Ok(BaNet {
            cfg: cfg.clone(),
            backbone,
            aspp,
            pee,
            mtl,
            decoder,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn aspp(&self) -> &Aspp {
        &self.aspp
    }

    pub fn mtl(&self) -> Option<&[MiniMtl]> {
        self.mtl.as_deref()
    }

    /// Full forward pass on an `[n, 3, H, W]` image with `H`, `W` divisible by 8.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &BoundParams,
        image: Var,
    ) -> Result<HeadOutputs, TensorError> {
        let s = tape.shape(image);
        let out_size = (s.h(), s.w());
        let mut stages = self.backbone.forward(tape, params, image)?;
        let aspp = self.aspp.forward(tape, params, stages[3].raw)?;

        let mut edge = Vec::with_capacity(4);
        let mut seg = Vec::with_capacity(4);
        for (i, st) in stages.iter_mut().enumerate() {
            let p = match &self.pee {
                Some(pee) => {
                    let v = pee[i].forward(tape, params, st.reduced)?;
                    st.pee = Some(v);
                    v
                }
                None => st.reduced,
            };
            let m = match &self.mtl {
                Some(mtl) => {
                    let out = mtl[i].forward(tape, params, p, out_size, self.cfg.ablation.ia)?;
                    st.pred_edge = Some(out.edge_logits);
                    st.pred_seg = Some(out.seg_logits);
                    edge.push(out.edge_logits);
                    seg.push(out.seg_logits);
                    out.fused
                }
                None => p,
            };
            st.mtl = Some(m);
        }

        let fused: Vec<Var> = stages.iter().map(|s| s.mtl.expect("set above")).collect();
        for (i, st) in stages.iter_mut().enumerate() {
            st.cff = Some(if self.cfg.ablation.cff {
                cff_forward(tape, &fused, i)?
            } else {
                fused[i]
            });
        }
        let cff: [Var; 4] = std::array::from_fn(|i| stages[i].cff.expect("set above"));
        let (seg_logits, decoder) = self.decoder.forward(tape, params, aspp, &cff, out_size)?;

        Ok(HeadOutputs {
            seg_logits,
            stage_edge_logits: edge.try_into().ok(),
            stage_seg_logits: seg.try_into().ok(),
            stages,
            aspp,
            decoder,
        })
    }

    /// Every convolution in registration order.
    pub fn conv_specs(&self) -> Vec<ConvSpec> {
        let mut v = self.backbone.conv_specs();
        v.extend(self.aspp.conv_specs());
        for p in self.pee.iter().flatten() {
            v.push(p.spec().clone());
        }
        for m in self.mtl.iter().flatten() {
            v.extend(m.conv_specs());
        }
        v.extend(self.decoder.conv_specs());
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Shape, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build(cfg: &ModelConfig) -> (ParameterStore<f32>, BaNet) {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParameterStore::new();
        let net = BaNet::new(cfg, &mut store, &mut rng).unwrap();
        (store, net)
    }

    #[test]
    fn full_model_output_contract() {
        let (store, net) = build(&ModelConfig::desk());
        for size in [64, 96] {
            let mut tape = Tape::new();
            let p = store.bind(&mut tape);
            let img = tape.constant(Tensor::full(Shape::new(1, 3, size, size), 0.3));
            let out = net.forward(&mut tape, &p, img).unwrap();
            let all = out.all_logits();
            assert_eq!(all.len(), 9);
            for v in all {
                assert_eq!(tape.shape(v), Shape::new(1, 1, size, size));
            }
            let d = out.decoder.map(|v| tape.shape(v));
            assert_eq!((d[0].h(), d[1].h(), d[3].h()), (size / 4, size / 8, size / 8));
            assert!(d.iter().all(|s| s.c() == 32));
        }
    }

    #[test]
    fn ablation_labels_and_param_counts() {
        let full = build(&ModelConfig::desk()).0.scalar_count();
        let mut cfg = ModelConfig::desk();
        cfg.ablation.ia = false;
        assert_eq!(build(&cfg).0.scalar_count(), full);
        assert_eq!(cfg.ablation.label(), "w/o IA");
        cfg.ablation = Ablation {
            mtl: false,
            ..Ablation::full()
        };
        let (store, net) = build(&cfg);
        assert!(store.scalar_count() < full);
        assert!(store.iter().all(|(n, _)| !n.starts_with("mtl")));
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let img = tape.constant(Tensor::full(Shape::new(1, 3, 32, 32), 0.3));
        let out = net.forward(&mut tape, &p, img).unwrap();
        assert!(out.stage_edge_logits.is_none());
        assert_eq!(out.all_logits().len(), 1);
    }
}
