//! Learnable weights: projector MLP, attention layers, displacement decoder.

use super::{ModelConfig, ModelError, FEATURE_DIM};
use crate::autodiff::Tape;
use crate::model::BoundParams;
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Two-layer MLP with a GELU between.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

/// One pre-norm encoder layer: layer norm, multi-head attention with
/// output projection, layer norm, feed-forward.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub ff_w1: Tensor,
    pub ff_b1: Tensor,
    pub ff_w2: Tensor,
    pub ff_b2: Tensor,
}

pub(crate) const LAYER_BLOCKS: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub projector: MlpParams,
    pub layers: Vec<LayerParams>,
    pub decoder: MlpParams,
}

fn uniform_fan_in(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = 1.0 / (rows as f64).sqrt();
    Tensor::uniform(&[rows, cols], bound, rng)
}

impl ModelParams {
    /// Seeded initialization. Weights are symmetric uniform scaled by
    /// 1/sqrt(fan_in), biases zero, layer-norm gains one. The decoder's
    /// final layer starts at zero so the initial dynamics are the
    /// identity, which keeps early autoregressive rollouts stable.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.embed_dim;

        let projector = MlpParams {
            w1: uniform_fan_in(FEATURE_DIM, d, &mut rng),
            b1: Tensor::zeros(&[d]),
            w2: uniform_fan_in(d, d, &mut rng),
            b2: Tensor::zeros(&[d]),
        };
        let layers = (0..config.num_layers)
            .map(|_| LayerParams {
                ln1_gain: Tensor::new(&[d], vec![1.0; d]),
                ln1_bias: Tensor::zeros(&[d]),
                wq: uniform_fan_in(d, d, &mut rng),
                bq: Tensor::zeros(&[d]),
                wk: uniform_fan_in(d, d, &mut rng),
                bk: Tensor::zeros(&[d]),
                wv: uniform_fan_in(d, d, &mut rng),
                bv: Tensor::zeros(&[d]),
                wo: uniform_fan_in(d, d, &mut rng),
                bo: Tensor::zeros(&[d]),
                ln2_gain: Tensor::new(&[d], vec![1.0; d]),
                ln2_bias: Tensor::zeros(&[d]),
                ff_w1: uniform_fan_in(d, config.ff_hidden, &mut rng),
                ff_b1: Tensor::zeros(&[config.ff_hidden]),
                ff_w2: uniform_fan_in(config.ff_hidden, d, &mut rng),
                ff_b2: Tensor::zeros(&[d]),
            })
            .collect();
        let decoder = MlpParams {
            w1: uniform_fan_in(d, config.decoder_hidden, &mut rng),
            b1: Tensor::zeros(&[config.decoder_hidden]),
            w2: Tensor::zeros(&[config.decoder_hidden, 3]),
            b2: Tensor::zeros(&[3]),
        };
        Ok(ModelParams {
            config,
            projector,
            layers,
            decoder,
        })
    }

    /// Expected block shapes for a configuration, in block order.
    pub fn block_shapes(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let d = config.embed_dim;
        let mut out = vec![
            ("proj.w1".to_string(), vec![FEATURE_DIM, d]),
            ("proj.b1".to_string(), vec![d]),
            ("proj.w2".to_string(), vec![d, d]),
            ("proj.b2".to_string(), vec![d]),
        ];
        for l in 0..config.num_layers {
            let p = |name: &str| format!("layer{}.{}", l, name);
            out.extend([
                (p("ln1.gain"), vec![d]),
                (p("ln1.bias"), vec![d]),
                (p("attn.wq"), vec![d, d]),
                (p("attn.bq"), vec![d]),
                (p("attn.wk"), vec![d, d]),
                (p("attn.bk"), vec![d]),
                (p("attn.wv"), vec![d, d]),
                (p("attn.bv"), vec![d]),
                (p("attn.wo"), vec![d, d]),
                (p("attn.bo"), vec![d]),
                (p("ln2.gain"), vec![d]),
                (p("ln2.bias"), vec![d]),
                (p("ff.w1"), vec![d, config.ff_hidden]),
                (p("ff.b1"), vec![config.ff_hidden]),
                (p("ff.w2"), vec![config.ff_hidden, d]),
                (p("ff.b2"), vec![d]),
            ]);
        }
        out.extend([
            ("dec.w1".to_string(), vec![d, config.decoder_hidden]),
            ("dec.b1".to_string(), vec![config.decoder_hidden]),
            ("dec.w2".to_string(), vec![config.decoder_hidden, 3]),
            ("dec.b2".to_string(), vec![3]),
        ]);
        out
    }

    /// Named views of every parameter block, in a fixed order shared by
    /// the optimizer, the checkpoint format, and [`ModelParams::bind`].
    pub fn blocks(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("proj.w1".into(), &self.projector.w1),
            ("proj.b1".into(), &self.projector.b1),
            ("proj.w2".into(), &self.projector.w2),
            ("proj.b2".into(), &self.projector.b2),
        ];
        for (l, lay) in self.layers.iter().enumerate() {
            let p = |name: &str| format!("layer{}.{}", l, name);
            out.extend([
                (p("ln1.gain"), &lay.ln1_gain),
                (p("ln1.bias"), &lay.ln1_bias),
                (p("attn.wq"), &lay.wq),
                (p("attn.bq"), &lay.bq),
                (p("attn.wk"), &lay.wk),
                (p("attn.bk"), &lay.bk),
                (p("attn.wv"), &lay.wv),
                (p("attn.bv"), &lay.bv),
                (p("attn.wo"), &lay.wo),
                (p("attn.bo"), &lay.bo),
                (p("ln2.gain"), &lay.ln2_gain),
                (p("ln2.bias"), &lay.ln2_bias),
                (p("ff.w1"), &lay.ff_w1),
                (p("ff.b1"), &lay.ff_b1),
                (p("ff.w2"), &lay.ff_w2),
                (p("ff.b2"), &lay.ff_b2),
            ]);
        }
        out.extend([
            ("dec.w1".to_string(), &self.decoder.w1),
            ("dec.b1".to_string(), &self.decoder.b1),
            ("dec.w2".to_string(), &self.decoder.w2),
            ("dec.b2".to_string(), &self.decoder.b2),
        ]);
        out
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = vec![
            &mut self.projector.w1,
            &mut self.projector.b1,
            &mut self.projector.w2,
            &mut self.projector.b2,
        ];
        for lay in self.layers.iter_mut() {
            out.extend([
                &mut lay.ln1_gain,
                &mut lay.ln1_bias,
                &mut lay.wq,
                &mut lay.bq,
                &mut lay.wk,
                &mut lay.bk,
                &mut lay.wv,
                &mut lay.bv,
                &mut lay.wo,
                &mut lay.bo,
                &mut lay.ln2_gain,
                &mut lay.ln2_bias,
                &mut lay.ff_w1,
                &mut lay.ff_b1,
                &mut lay.ff_w2,
                &mut lay.ff_b2,
            ]);
        }
        out.extend([
            &mut self.decoder.w1,
            &mut self.decoder.b1,
            &mut self.decoder.w2,
            &mut self.decoder.b2,
        ]);
        out
    }

    /// Rebuild parameters from named blocks (checkpoint loading).
    pub fn from_blocks(
        config: ModelConfig,
        mut take: impl FnMut(&str) -> Option<Tensor>,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        let mut fetch = |name: &str, shape: &[usize]| -> Result<Tensor, ModelError> {
            let t = take(name).ok_or_else(|| ModelError::BadCheckpoint(format!("missing block {}", name)))?;
            if t.shape() != shape {
                return Err(ModelError::BadCheckpoint(format!(
                    "block {} has shape {:?}, expected {:?}",
                    name,
                    t.shape(),
                    shape
                )));
            }
            if !t.is_finite() {
                return Err(ModelError::BadCheckpoint(format!("block {} has non-finite entries", name)));
            }
            Ok(t)
        };
        let d = config.embed_dim;
        let projector = MlpParams {
            w1: fetch("proj.w1", &[FEATURE_DIM, d])?,
            b1: fetch("proj.b1", &[d])?,
            w2: fetch("proj.w2", &[d, d])?,
            b2: fetch("proj.b2", &[d])?,
        };
        let mut layers = Vec::with_capacity(config.num_layers);
        for l in 0..config.num_layers {
            let p = |name: &str| format!("layer{}.{}", l, name);
            layers.push(LayerParams {
                ln1_gain: fetch(&p("ln1.gain"), &[d])?,
                ln1_bias: fetch(&p("ln1.bias"), &[d])?,
                wq: fetch(&p("attn.wq"), &[d, d])?,
                bq: fetch(&p("attn.bq"), &[d])?,
                wk: fetch(&p("attn.wk"), &[d, d])?,
                bk: fetch(&p("attn.bk"), &[d])?,
                wv: fetch(&p("attn.wv"), &[d, d])?,
                bv: fetch(&p("attn.bv"), &[d])?,
                wo: fetch(&p("attn.wo"), &[d, d])?,
                bo: fetch(&p("attn.bo"), &[d])?,
                ln2_gain: fetch(&p("ln2.gain"), &[d])?,
                ln2_bias: fetch(&p("ln2.bias"), &[d])?,
                ff_w1: fetch(&p("ff.w1"), &[d, config.ff_hidden])?,
                ff_b1: fetch(&p("ff.b1"), &[config.ff_hidden])?,
                ff_w2: fetch(&p("ff.w2"), &[config.ff_hidden, d])?,
                ff_b2: fetch(&p("ff.b2"), &[d])?,
            });
        }
        let decoder = MlpParams {
            w1: fetch("dec.w1", &[d, config.decoder_hidden])?,
            b1: fetch("dec.b1", &[config.decoder_hidden])?,
            w2: fetch("dec.w2", &[config.decoder_hidden, 3])?,
            b2: fetch("dec.b2", &[3])?,
        };
        Ok(ModelParams {
            config,
            projector,
            layers,
            decoder,
        })
    }

    /// Load every block onto a tape as differentiable leaves.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        let ids = self.blocks().into_iter().map(|(_, t)| tape.leaf(t.clone())).collect();
        BoundParams {
            ids,
            config: self.config,
        }
    }

    pub fn num_parameters(&self) -> usize {
        self.blocks().iter().map(|(_, t)| t.numel()).sum()
    }
}
