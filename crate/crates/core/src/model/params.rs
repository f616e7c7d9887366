use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::{HatConfig, ModelMode};
use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, Scalar, Tensor};

pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitKind {
    Normal,
    Zeros,
    Ones,
}

#[derive(Clone, Debug)]
pub struct AttentionIds {
    pub q_w: ParamId,
    pub q_b: ParamId,
    pub k_w: ParamId,
    pub k_b: ParamId,
    pub v_w: ParamId,
    pub v_b: ParamId,
    pub o_w: ParamId,
    pub o_b: ParamId,
}

#[derive(Clone, Debug)]
pub struct NormIds {
    pub gain: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Debug)]
pub struct FfnIds {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

/// Attention sublayer with its own input normalization.
#[derive(Clone, Debug)]
pub struct HierSublayerIds {
    pub attn: AttentionIds,
    pub norm: NormIds,
}

#[derive(Clone, Debug)]
pub struct EncoderLayerIds {
    pub self_attn: AttentionIds,
    pub self_norm: NormIds,
    /// Present only in the encoder-only hierarchical variant.
    pub hier: Option<HierSublayerIds>,
    pub ffn: FfnIds,
    pub ffn_norm: NormIds,
}

#[derive(Clone, Debug)]
pub struct DecoderLayerIds {
    pub self_attn: AttentionIds,
    pub self_norm: NormIds,
    pub cross_attn: AttentionIds,
    pub cross_norm: NormIds,
    pub hier: Option<HierSublayerIds>,
    pub ffn: FfnIds,
    pub ffn_norm: NormIds,
}

/// Where each named tensor lives in the parameter store.
#[derive(Clone, Debug)]
pub struct Layout {
    pub tokens: ParamId,
    pub positions: ParamId,
    pub segments: ParamId,
    pub encoder: Vec<EncoderLayerIds>,
    pub hier_encoder: Vec<EncoderLayerIds>,
    pub decoder: Vec<DecoderLayerIds>,
}

struct Builder<'a> {
    d: usize,
    f: usize,
    add: &'a mut dyn FnMut(String, Vec<usize>, InitKind) -> ParamId,
}

impl Builder<'_> {
    fn param(&mut self, name: String, shape: Vec<usize>, kind: InitKind) -> ParamId {
        (self.add)(name, shape, kind)
    }

    fn attention(&mut self, p: &str) -> AttentionIds {
        let d = self.d;
        let proj = |b: &mut Self, x: &str| {
            (
                b.param(format!("{p}.{x}.weight"), vec![d, d], InitKind::Normal),
                b.param(format!("{p}.{x}.bias"), vec![d], InitKind::Zeros),
            )
        };
        let (q_w, q_b) = proj(self, "q");
        let (k_w, k_b) = proj(self, "k");
        let (v_w, v_b) = proj(self, "v");
        let (o_w, o_b) = proj(self, "o");
        AttentionIds {
            q_w,
            q_b,
            k_w,
            k_b,
            v_w,
            v_b,
            o_w,
            o_b,
        }
    }

    fn norm(&mut self, p: &str) -> NormIds {
        NormIds {
            gain: self.param(format!("{p}.gain"), vec![self.d], InitKind::Ones),
            bias: self.param(format!("{p}.bias"), vec![self.d], InitKind::Zeros),
        }
    }

    fn ffn(&mut self, p: &str) -> FfnIds {
        let (d, f) = (self.d, self.f);
        FfnIds {
            w1: self.param(format!("{p}.w1"), vec![d, f], InitKind::Normal),
            b1: self.param(format!("{p}.b1"), vec![f], InitKind::Zeros),
            w2: self.param(format!("{p}.w2"), vec![f, d], InitKind::Normal),
            b2: self.param(format!("{p}.b2"), vec![d], InitKind::Zeros),
        }
    }

    fn hier(&mut self, p: &str) -> HierSublayerIds {
        HierSublayerIds {
            attn: self.attention(&format!("{p}.hier_attn")),
            norm: self.norm(&format!("{p}.hier_norm")),
        }
    }

    fn encoder_layer(&mut self, p: &str, hierarchical: bool) -> EncoderLayerIds {
        EncoderLayerIds {
            self_attn: self.attention(&format!("{p}.self_attn")),
            self_norm: self.norm(&format!("{p}.self_norm")),
            hier: hierarchical.then(|| self.hier(p)),
            ffn: self.ffn(&format!("{p}.ffn")),
            ffn_norm: self.norm(&format!("{p}.ffn_norm")),
        }
    }

    fn decoder_layer(&mut self, p: &str, hierarchical: bool) -> DecoderLayerIds {
        DecoderLayerIds {
            self_attn: self.attention(&format!("{p}.self_attn")),
            self_norm: self.norm(&format!("{p}.self_norm")),
            cross_attn: self.attention(&format!("{p}.cross_attn")),
            cross_norm: self.norm(&format!("{p}.cross_norm")),
            hier: hierarchical.then(|| self.hier(p)),
            ffn: self.ffn(&format!("{p}.ffn")),
            ffn_norm: self.norm(&format!("{p}.ffn_norm")),
        }
    }
}

impl Layout {
    /// Declares every tensor of `cfg` in checkpoint order.
    pub fn build(
        cfg: &HatConfig,
        add: &mut dyn FnMut(String, Vec<usize>, InitKind) -> ParamId,
    ) -> Layout {
        let d = cfg.hidden_size;
        let mut b = Builder {
            d,
            f: cfg.ffn_size,
            add,
        };
        let tokens = b.param(
            "embed.tokens".into(),
            vec![cfg.vocab_size, d],
            InitKind::Normal,
        );
        let positions = b.param(
            "embed.positions".into(),
            vec![cfg.max_positions, d],
            InitKind::Normal,
        );
        let segments = b.param(
            "embed.segments".into(),
            vec![cfg.num_segments, d],
            InitKind::Normal,
        );
        let enc_hier = cfg.mode == ModelMode::EncoderOnlyHat;
        let encoder = (0..cfg.num_layers)
            .map(|i| b.encoder_layer(&format!("encoder.{i}"), enc_hier))
            .collect();
        let (hier_encoder, decoder) = if cfg.mode.is_encoder_only() {
            (Vec::new(), Vec::new())
        } else {
            let hat = cfg.mode == ModelMode::Hat;
            let hier_encoder = (0..cfg.num_hier_layers)
                .map(|i| b.encoder_layer(&format!("hier_encoder.{i}"), false))
                .collect();
            let decoder = (0..cfg.num_layers)
                .map(|i| b.decoder_layer(&format!("decoder.{i}"), hat))
                .collect();
            (hier_encoder, decoder)
        };
        Layout {
            tokens,
            positions,
            segments,
            encoder,
            hier_encoder,
            decoder,
        }
    }

    /// Output projections of every hierarchical attention module.
    pub fn hierarchical_outputs(&self) -> Vec<ParamId> {
        let sublayers = self
            .encoder
            .iter()
            .filter_map(|l| l.hier.as_ref())
            .chain(self.decoder.iter().filter_map(|l| l.hier.as_ref()));
        let mut out: Vec<ParamId> = sublayers.flat_map(|h| [h.attn.o_w, h.attn.o_b]).collect();
        for l in &self.hier_encoder {
            out.extend([l.self_attn.o_w, l.self_attn.o_b]);
        }
        out
    }
}

/// Names and shapes of every tensor for `cfg`, without allocating.
pub fn layout_shapes(cfg: &HatConfig) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    Layout::build(cfg, &mut |name, shape, _| {
        out.push((name, shape));
        ParamId(out.len() - 1)
    });
    out
}

/// Full learnable weight set of a model.
#[derive(Clone, Debug)]
pub struct HatParameters<T> {
    pub config: HatConfig,
    pub store: ParamStore<T>,
    pub layout: Layout,
}

impl<T: Scalar> HatParameters<T> {
    /// Scaled-normal weights (std 0.02), zero biases, unit gains.
    pub fn init(config: &HatConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut store = ParamStore::new();
        let layout = Layout::build(config, &mut |name, shape, kind| {
            let n: usize = shape.iter().product();
            let data: Vec<T> = match kind {
                InitKind::Normal => (0..n).map(|_| T::lit(normal.sample(&mut rng))).collect(),
                InitKind::Zeros => vec![T::zero(); n],
                InitKind::Ones => vec![T::one(); n],
            };
            store.push(
                name,
                Tensor::new(shape, data).expect("layout shapes are positive"),
            )
        });
        Ok(HatParameters {
            config: config.clone(),
            store,
            layout,
        })
    }

    /// Wraps tensors loaded from elsewhere, checking names and shapes.
    pub fn from_store(config: &HatConfig, store: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let expected = layout_shapes(config);
        if expected.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors for this config, found {}",
                expected.len(),
                store.len()
            )));
        }
        for ((name, shape), have) in expected.iter().zip(store.iter()) {
            if *name != have.name || shape.as_slice() != have.tensor.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{}` {:?} does not match expected `{name}` {shape:?}",
                    have.name,
                    have.tensor.shape()
                )));
            }
        }
        let mut next = 0;
        let layout = Layout::build(config, &mut |_, _, _| {
            next += 1;
            ParamId(next - 1)
        });
        Ok(HatParameters {
            config: config.clone(),
            store,
            layout,
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_scalars()
    }

    /// Zeroes the output projection (weight and bias) of every hierarchical
    /// attention module, which removes the hierarchical path from the output.
    pub fn zero_hierarchical_outputs(&mut self) {
        for id in self.layout.hierarchical_outputs() {
            self.store.get_mut(id).data_mut().fill(T::zero());
        }
    }

    /// Copies every tensor whose name and shape also exist in `other`.
    /// Returns how many tensors were copied.
    pub fn transfer_from<U: Scalar>(&mut self, other: &HatParameters<U>) -> usize {
        let mut copied = 0;
        for entry in self.store.iter_mut() {
            if let Some(src) = other.store.find(&entry.name) {
                let src = other.store.get(src);
                if src.shape() == entry.tensor.shape() {
                    entry.tensor = src.cast();
                    copied += 1;
                }
            }
        }
        copied
    }

    pub fn cast<U: Scalar>(&self) -> HatParameters<U> {
        HatParameters {
            config: self.config.clone(),
            store: self.store.cast(),
            layout: self.layout.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_and_follows_kinds() {
        let cfg = HatConfig::tiny(ModelMode::Hat, 12);
        let a = HatParameters::<f64>::init(&cfg, 3).unwrap();
        let b = HatParameters::<f64>::init(&cfg, 3).unwrap();
        let c = HatParameters::<f64>::init(&cfg, 4).unwrap();
        for ((x, y), z) in a.store.iter().zip(b.store.iter()).zip(c.store.iter()) {
            assert_eq!(x.tensor, y.tensor);
            if x.name.ends_with("weight") {
                assert_ne!(x.tensor, z.tensor);
            }
        }
        let gain = a.store.find("decoder.1.hier_norm.gain").unwrap();
        assert!(a.store.get(gain).data().iter().all(|&v| v == 1.0));
        let bias = a.store.find("encoder.0.ffn.b1").unwrap();
        assert!(a.store.get(bias).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn names_are_unique() {
        for mode in [
            ModelMode::Hat,
            ModelMode::Plain,
            ModelMode::EncoderOnlyHat,
            ModelMode::EncoderOnlyPlain,
        ] {
            let shapes = layout_shapes(&HatConfig::tiny(mode, 9));
            let mut names: Vec<_> = shapes.iter().map(|(n, _)| n.clone()).collect();
            names.sort();
            names.dedup();
            assert_eq!(names.len(), shapes.len());
        }
    }

    #[test]
    fn from_store_rejects_mismatched_layouts() {
        let hat = HatParameters::<f64>::init(&HatConfig::tiny(ModelMode::Hat, 12), 0).unwrap();
        let plain_cfg = HatConfig::tiny(ModelMode::Plain, 12);
        assert!(HatParameters::from_store(&plain_cfg, hat.store.clone()).is_err());
        assert!(HatParameters::from_store(&hat.config, hat.store.clone()).is_ok());
    }

    #[test]
    fn transfer_copies_shared_tensors_only() {
        let plain = HatParameters::<f64>::init(&HatConfig::tiny(ModelMode::Plain, 12), 1).unwrap();
        let mut hat = HatParameters::<f64>::init(&HatConfig::tiny(ModelMode::Hat, 12), 2).unwrap();
        let copied = hat.transfer_from(&plain);
        assert_eq!(copied, plain.store.len());
        let id = hat.store.find("decoder.0.cross_attn.q.weight").unwrap();
        let pid = plain.store.find("decoder.0.cross_attn.q.weight").unwrap();
        assert_eq!(hat.store.get(id), plain.store.get(pid));
    }

    #[test]
    fn zeroing_touches_only_hierarchical_outputs() {
        let mut p = HatParameters::<f64>::init(&HatConfig::tiny(ModelMode::Hat, 12), 5).unwrap();
        let before = p.store.clone();
        p.zero_hierarchical_outputs();
        for (a, b) in before.iter().zip(p.store.iter()) {
            let hier_out = (a.name.contains("hier_attn.o.")
                || a.name.starts_with("hier_encoder") && a.name.contains("self_attn.o."))
                && !a.name.is_empty();
            if hier_out {
                assert!(b.tensor.data().iter().all(|&v| v == 0.0), "{}", a.name);
            } else {
                assert_eq!(a.tensor, b.tensor, "{}", a.name);
            }
        }
    }
}
