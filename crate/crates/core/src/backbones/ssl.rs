//! Inference-only wav2vec2 / HuBERT encoder on candle.
//!
//! Both model families share one architecture: a 7-layer strided conv
//! feature encoder (latent frames), a linear feature projection, a grouped
//! positional convolution and a transformer encoder (contextualized
//! frames). They differ in normalization placement, which the checkpoint's
//! `config.json` selects:
//!
//! * `feat_extract_norm = "group"`: group norm after the first conv only,
//!   post-norm transformer layers (HuBERT base).
//! * `feat_extract_norm = "layer"`: layer norm after every conv, usually
//!   paired with `do_stable_layer_norm` pre-norm layers (XLSR, HuBERT large).

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Module, Tensor, D};
use candle_nn::{Conv1d, Conv1dConfig, GroupNorm, LayerNorm, Linear, VarBuilder};
use ndarray::Array2;
use serde::Deserialize;

use super::{frame_count, Backbone, BackboneError, BackboneId, FeatureSequence, LayerSelect};
use crate::dataset::Waveform;

/// The subset of a checkpoint's `config.json` the encoder needs.
#[derive(Debug, Clone, Deserialize)]
pub struct SslConfig {
    #[serde(default)]
    pub model_type: Option<String>,
    pub hidden_size: usize,
    pub num_hidden_layers: usize,
    pub num_attention_heads: usize,
    pub intermediate_size: usize,
    #[serde(default = "default_eps")]
    pub layer_norm_eps: f64,
    pub conv_dim: Vec<usize>,
    pub conv_kernel: Vec<usize>,
    pub conv_stride: Vec<usize>,
    #[serde(default)]
    pub conv_bias: bool,
    pub feat_extract_norm: String,
    #[serde(default)]
    pub do_stable_layer_norm: bool,
    pub num_conv_pos_embeddings: usize,
    pub num_conv_pos_embedding_groups: usize,
    #[serde(default = "default_act")]
    pub hidden_act: String,
    #[serde(default = "default_act")]
    pub feat_extract_activation: String,
    #[serde(default)]
    pub conv_pos_batch_norm: bool,
}

fn default_eps() -> f64 {
    1e-5
}

fn default_act() -> String {
    "gelu".into()
}

#[derive(Debug, Deserialize)]
struct PreprocessorConfig {
    #[serde(default = "yes")]
    do_normalize: bool,
}

fn yes() -> bool {
    true
}

enum ConvNorm {
    None,
    Layer(LayerNorm),
    Group(GroupNorm),
}

struct ConvLayer {
    conv: Conv1d,
    norm: ConvNorm,
}

struct EncoderLayer {
    q_proj: Linear,
    k_proj: Linear,
    v_proj: Linear,
    out_proj: Linear,
    layer_norm: LayerNorm,
    ff_in: Linear,
    ff_out: Linear,
    final_layer_norm: LayerNorm,
}

pub struct SslBackbone {
    id: BackboneId,
    config: SslConfig,
    conv_layers: Vec<ConvLayer>,
    projection_norm: Option<LayerNorm>,
    projection: Linear,
    pos_conv: Conv1d,
    encoder_norm: LayerNorm,
    layers: Vec<EncoderLayer>,
    normalize_input: bool,
    layer: usize,
}

fn unavailable(checkpoint_ref: &str, reason: impl Into<String>) -> BackboneError {
    BackboneError::CheckpointUnavailable { checkpoint_ref: checkpoint_ref.to_string(), reason: reason.into() }
}

fn layer_norm(size: usize, eps: f64, vb: VarBuilder) -> candle_core::Result<LayerNorm> {
    let weight = vb.get(size, "weight")?;
    let bias = vb.get(size, "bias")?;
    Ok(LayerNorm::new(weight, bias, eps))
}

fn linear(input: usize, output: usize, vb: VarBuilder) -> candle_core::Result<Linear> {
    candle_nn::linear(input, output, vb)
}

impl SslBackbone {
    /// Loads `config.json`, optional `preprocessor_config.json`, and
    /// `model.safetensors` or `pytorch_model.bin` from `dir`.
    pub fn from_dir(dir: &Path, id: BackboneId, layer: LayerSelect) -> Result<Self, BackboneError> {
        let cref = id.checkpoint_ref.clone();
        let config_text = std::fs::read_to_string(dir.join("config.json"))
            .map_err(|e| unavailable(&cref, format!("{}: {e}", dir.join("config.json").display())))?;
        let config: SslConfig =
            serde_json::from_str(&config_text).map_err(|e| unavailable(&cref, format!("config.json: {e}")))?;
        let normalize_input = match std::fs::read_to_string(dir.join("preprocessor_config.json")) {
            Ok(text) => {
                serde_json::from_str::<PreprocessorConfig>(&text)
                    .map_err(|e| unavailable(&cref, format!("preprocessor_config.json: {e}")))?
                    .do_normalize
            }
            Err(_) => true,
        };

        let safetensors = dir.join("model.safetensors");
        let pth = dir.join("pytorch_model.bin");
        let device = Device::Cpu;
        let raw: HashMap<String, Tensor> = if safetensors.is_file() {
            candle_core::safetensors::load(&safetensors, &device)
                .map_err(|e| unavailable(&cref, format!("{}: {e}", safetensors.display())))?
        } else if pth.is_file() {
            candle_core::pickle::read_all(&pth)
                .map_err(|e| unavailable(&cref, format!("{}: {e}", pth.display())))?
                .into_iter()
                .collect()
        } else {
            return Err(unavailable(&cref, format!("no model.safetensors or pytorch_model.bin in {}", dir.display())));
        };
        // Task-head checkpoints nest the encoder under a model prefix.
        let prefix = ["wav2vec2.", "hubert."].into_iter().find(|p| raw.keys().any(|k| k.starts_with(p))).unwrap_or("");
        let mut tensors = HashMap::with_capacity(raw.len());
        for (name, tensor) in raw {
            if let Some(stripped) = name.strip_prefix(prefix) {
                tensors.insert(stripped.to_string(), tensor.to_dtype(DType::F32)?);
            }
        }
        let vb = VarBuilder::from_tensors(tensors, DType::F32, &device);
        Self::from_parts(config, vb, id, layer, normalize_input)
    }

    pub fn from_parts(
        config: SslConfig,
        vb: VarBuilder,
        id: BackboneId,
        layer: LayerSelect,
        normalize_input: bool,
    ) -> Result<Self, BackboneError> {
        let cref = id.checkpoint_ref.clone();
        if config.hidden_act != "gelu" || config.feat_extract_activation != "gelu" {
            return Err(unavailable(&cref, "only gelu activations are supported"));
        }
        if config.conv_pos_batch_norm {
            return Err(unavailable(&cref, "batch-norm positional convolution is not supported"));
        }
        let n_conv = config.conv_dim.len();
        if config.conv_kernel.len() != n_conv || config.conv_stride.len() != n_conv || n_conv == 0 {
            return Err(unavailable(&cref, "conv_dim/conv_kernel/conv_stride lengths differ"));
        }
        if config.hidden_size % config.num_attention_heads != 0 {
            return Err(unavailable(&cref, "hidden_size is not divisible by num_attention_heads"));
        }
        let layer = match layer {
            LayerSelect::Last => config.num_hidden_layers,
            LayerSelect::Index(i) if i <= config.num_hidden_layers => i,
            LayerSelect::Index(i) => {
                return Err(unavailable(&cref, format!("layer {i} > {} hidden layers", config.num_hidden_layers)))
            }
        };
        let build = || -> candle_core::Result<_> {
            let fe = vb.pp("feature_extractor").pp("conv_layers");
            let mut conv_layers = Vec::with_capacity(n_conv);
            let mut in_dim = 1;
            for i in 0..n_conv {
                let lvb = fe.pp(i);
                let (out_dim, kernel) = (config.conv_dim[i], config.conv_kernel[i]);
                let weight = lvb.pp("conv").get((out_dim, in_dim, kernel), "weight")?;
                let bias = if config.conv_bias { Some(lvb.pp("conv").get(out_dim, "bias")?) } else { None };
                let conv =
                    Conv1d::new(weight, bias, Conv1dConfig { stride: config.conv_stride[i], ..Default::default() });
                let norm = match config.feat_extract_norm.as_str() {
                    "layer" => ConvNorm::Layer(layer_norm(out_dim, 1e-5, lvb.pp("layer_norm"))?),
                    "group" if i == 0 => {
                        ConvNorm::Group(candle_nn::group_norm(out_dim, out_dim, 1e-5, lvb.pp("layer_norm"))?)
                    }
                    _ => ConvNorm::None,
                };
                conv_layers.push(ConvLayer { conv, norm });
                in_dim = out_dim;
            }

            let fp = vb.pp("feature_projection");
            let projection_norm = if fp.contains_tensor("layer_norm.weight") {
                Some(layer_norm(in_dim, config.layer_norm_eps, fp.pp("layer_norm"))?)
            } else {
                None
            };
            let projection = linear(in_dim, config.hidden_size, fp.pp("projection"))?;

            let enc = vb.pp("encoder");
            let pc = enc.pp("pos_conv_embed").pp("conv");
            let (h, k, g) = (config.hidden_size, config.num_conv_pos_embeddings, config.num_conv_pos_embedding_groups);
            let (gain, direction) = if pc.contains_tensor("weight_g") {
                (pc.get((1, 1, k), "weight_g")?, pc.get((h, h / g, k), "weight_v")?)
            } else {
                let p = pc.pp("parametrizations").pp("weight");
                (p.get((1, 1, k), "original0")?, p.get((h, h / g, k), "original1")?)
            };
            // Weight norm over dim 2: each kernel tap is normalized over (out, in).
            let norm = direction.sqr()?.sum_keepdim((0, 1))?.sqrt()?;
            let weight = direction.broadcast_mul(&gain)?.broadcast_div(&norm)?;
            let pos_conv = Conv1d::new(
                weight,
                Some(pc.get(h, "bias")?),
                Conv1dConfig { padding: k / 2, groups: g, ..Default::default() },
            );
            let encoder_norm = layer_norm(h, config.layer_norm_eps, enc.pp("layer_norm"))?;

            let mut layers = Vec::with_capacity(config.num_hidden_layers);
            for i in 0..config.num_hidden_layers {
                let l = enc.pp("layers").pp(i);
                let a = l.pp("attention");
                let ff = l.pp("feed_forward");
                layers.push(EncoderLayer {
                    q_proj: linear(h, h, a.pp("q_proj"))?,
                    k_proj: linear(h, h, a.pp("k_proj"))?,
                    v_proj: linear(h, h, a.pp("v_proj"))?,
                    out_proj: linear(h, h, a.pp("out_proj"))?,
                    layer_norm: layer_norm(h, config.layer_norm_eps, l.pp("layer_norm"))?,
                    ff_in: linear(h, config.intermediate_size, ff.pp("intermediate_dense"))?,
                    ff_out: linear(config.intermediate_size, h, ff.pp("output_dense"))?,
                    final_layer_norm: layer_norm(h, config.layer_norm_eps, l.pp("final_layer_norm"))?,
                });
            }
            Ok((conv_layers, projection_norm, projection, pos_conv, encoder_norm, layers))
        };
        let (conv_layers, projection_norm, projection, pos_conv, encoder_norm, layers) =
            build().map_err(|e| unavailable(&cref, format!("weights: {e}")))?;
        Ok(SslBackbone {
            id,
            config,
            conv_layers,
            projection_norm,
            projection,
            pos_conv,
            encoder_norm,
            layers,
            normalize_input,
            layer,
        })
    }

    pub fn config(&self) -> &SslConfig {
        &self.config
    }

    pub fn normalizes_input(&self) -> bool {
        self.normalize_input
    }

    fn attention(&self, layer: &EncoderLayer, x: &Tensor) -> candle_core::Result<Tensor> {
        let (t, h) = x.dims2()?;
        let heads = self.config.num_attention_heads;
        let head_dim = h / heads;
        let split = |y: Tensor| y.reshape((t, heads, head_dim))?.transpose(0, 1)?.contiguous();
        let q = split((layer.q_proj.forward(x)? * (head_dim as f64).powf(-0.5))?)?;
        let k = split(layer.k_proj.forward(x)?)?;
        let v = split(layer.v_proj.forward(x)?)?;
        let scores = q.matmul(&k.t()?)?;
        let probs = candle_nn::ops::softmax_last_dim(&scores)?;
        let context = probs.matmul(&v)?.transpose(0, 1)?.reshape((t, h))?;
        layer.out_proj.forward(&context)
    }

    fn feed_forward(layer: &EncoderLayer, x: &Tensor) -> candle_core::Result<Tensor> {
        layer.ff_out.forward(&layer.ff_in.forward(x)?.gelu_erf()?)
    }

    /// Hidden states `0..=stop` for raw (already normalized if required) samples.
    fn forward_states(&self, samples: &[f32], stop: usize) -> candle_core::Result<Vec<Tensor>> {
        let device = Device::Cpu;
        let mut x = Tensor::from_slice(samples, (1, 1, samples.len()), &device)?;
        for layer in &self.conv_layers {
            x = layer.conv.forward(&x)?;
            x = match &layer.norm {
                ConvNorm::None => x,
                ConvNorm::Group(n) => n.forward(&x)?,
                ConvNorm::Layer(n) => n.forward(&x.transpose(1, 2)?)?.transpose(1, 2)?,
            };
            x = x.gelu_erf()?;
        }
        // [1, C, T] -> [T, C]
        let mut x = x.squeeze(0)?.t()?.contiguous()?;
        if let Some(n) = &self.projection_norm {
            x = n.forward(&x)?;
        }
        let x = self.projection.forward(&x)?;
        let t = x.dim(0)?;

        let pos = self.pos_conv.forward(&x.t()?.unsqueeze(0)?.contiguous()?)?.narrow(D::Minus1, 0, t)?;
        let pos = pos.gelu_erf()?.squeeze(0)?.t()?;
        let mut x = (x + pos)?;

        let stable = self.config.do_stable_layer_norm;
        if !stable {
            x = self.encoder_norm.forward(&x)?;
        }
        let mut states = vec![x.clone()];
        for layer in self.layers.iter().take(stop) {
            x = if stable {
                let attn = self.attention(layer, &layer.layer_norm.forward(&x)?)?;
                let x = (x + attn)?;
                let ff = Self::feed_forward(layer, &layer.final_layer_norm.forward(&x)?)?;
                (x + ff)?
            } else {
                let attn = self.attention(layer, &x)?;
                let x = layer.layer_norm.forward(&(x + attn)?)?;
                let ff = Self::feed_forward(layer, &x)?;
                layer.final_layer_norm.forward(&(x + ff)?)?
            };
            states.push(x.clone());
        }
        if stable && stop == self.layers.len() {
            let last = states.pop().expect("at least one state");
            states.push(self.encoder_norm.forward(&last)?);
        }
        Ok(states)
    }

    fn prepare(&self, samples: &[f32]) -> Vec<f32> {
        if !self.normalize_input {
            return samples.to_vec();
        }
        let n = samples.len() as f64;
        let mean = samples.iter().map(|&s| s as f64).sum::<f64>() / n;
        let var = samples.iter().map(|&s| (s as f64 - mean).powi(2)).sum::<f64>() / n;
        let scale = 1.0 / (var + 1e-7).sqrt();
        samples.iter().map(|&s| ((s as f64 - mean) * scale) as f32).collect()
    }

    /// Every hidden state `0..=L` for the given samples, exactly as fed
    /// (no input normalization). Index `L` is the final output.
    pub fn hidden_states(&self, samples: &[f32]) -> Result<Vec<Array2<f32>>, BackboneError> {
        frame_count(samples.len()).ok_or(BackboneError::TooShort(samples.len()))?;
        self.forward_states(samples, self.layers.len())?.into_iter().map(|t| to_array(&t)).collect()
    }
}

impl Backbone for SslBackbone {
    fn id(&self) -> &BackboneId {
        &self.id
    }

    fn width(&self) -> usize {
        self.config.hidden_size
    }

    fn extract(&self, waveform: &Waveform, record_id: &str) -> Result<FeatureSequence, BackboneError> {
        let n = waveform.samples.len();
        frame_count(n).ok_or(BackboneError::TooShort(n))?;
        let input = self.prepare(&waveform.samples);
        let states = self.forward_states(&input, self.layer)?;
        let out = to_array(states.last().expect("state 0 always present"))?;
        FeatureSequence::new(out, self.id.clone(), record_id, self.width())
    }
}

fn to_array(t: &Tensor) -> Result<Array2<f32>, BackboneError> {
    let (rows, cols) = t.dims2()?;
    let data = t.flatten_all()?.to_vec1::<f32>()?;
    Array2::from_shape_vec((rows, cols), data).map_err(|e| BackboneError::BackboneFailure(e.to_string()))
}
