//! BERT / RoBERTa encoder and masked-LM head.
//!
//! Parameter names follow the Hugging Face checkpoints so that
//! `model.safetensors` files load directly.

use candle_core::{DType, Module, Tensor, D};
use candle_nn::{embedding, linear, Embedding, Linear, VarBuilder};

use crate::config::{Family, ModelConfig};
use crate::error::Result;

/// Layer normalisation built from differentiable primitives.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(size: usize, eps: f64, vb: VarBuilder) -> Result<LayerNorm> {
        Ok(LayerNorm {
            weight: vb.get_with_hints(size, "weight", candle_nn::Init::Const(1.0))?,
            bias: vb.get_with_hints(size, "bias", candle_nn::Init::Const(0.0))?,
            eps,
        })
    }
}

impl Module for LayerNorm {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centred = x.broadcast_sub(&mean)?;
        let var = centred.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centred.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        normed.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)
    }
}

#[derive(Clone, Debug)]
struct Embeddings {
    word: Embedding,
    position: Embedding,
    token_type: Embedding,
    norm: LayerNorm,
    offset: usize,
}

#[derive(Clone, Debug)]
struct Layer {
    query: Linear,
    key: Linear,
    value: Linear,
    attn_out: Linear,
    attn_norm: LayerNorm,
    inter: Linear,
    out: Linear,
    out_norm: LayerNorm,
}

#[derive(Clone, Debug)]
struct MlmHead {
    dense: Linear,
    norm: LayerNorm,
    bias: Tensor,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    config: ModelConfig,
    embeddings: Embeddings,
    layers: Vec<Layer>,
    head: MlmHead,
}

impl Encoder {
    pub fn new(config: &ModelConfig, vb: VarBuilder) -> Result<Encoder> {
        let family = config.family()?;
        let h = config.hidden_size;
        let eps = config.layer_norm_eps;
        let base = match family {
            Family::Bert => vb.pp("bert"),
            Family::Roberta => vb.pp("roberta"),
        };
        let e = base.pp("embeddings");
        let embeddings = Embeddings {
            word: embedding(config.vocab_size, h, e.pp("word_embeddings"))?,
            position: embedding(config.max_position_embeddings, h, e.pp("position_embeddings"))?,
            token_type: embedding(config.type_vocab_size, h, e.pp("token_type_embeddings"))?,
            norm: LayerNorm::new(h, eps, e.pp("LayerNorm"))?,
            offset: config.position_offset(),
        };
        let mut layers = Vec::with_capacity(config.num_hidden_layers);
        for i in 0..config.num_hidden_layers {
            let l = base.pp("encoder").pp("layer").pp(i);
            let a = l.pp("attention");
            layers.push(Layer {
                query: linear(h, h, a.pp("self").pp("query"))?,
                key: linear(h, h, a.pp("self").pp("key"))?,
                value: linear(h, h, a.pp("self").pp("value"))?,
                attn_out: linear(h, h, a.pp("output").pp("dense"))?,
                attn_norm: LayerNorm::new(h, eps, a.pp("output").pp("LayerNorm"))?,
                inter: linear(h, config.intermediate_size, l.pp("intermediate").pp("dense"))?,
                out: linear(config.intermediate_size, h, l.pp("output").pp("dense"))?,
                out_norm: LayerNorm::new(h, eps, l.pp("output").pp("LayerNorm"))?,
            });
        }
        let head = match family {
            Family::Bert => {
                let p = vb.pp("cls").pp("predictions");
                MlmHead {
                    dense: linear(h, h, p.pp("transform").pp("dense"))?,
                    norm: LayerNorm::new(h, eps, p.pp("transform").pp("LayerNorm"))?,
                    bias: p.get_with_hints(config.vocab_size, "bias", candle_nn::Init::Const(0.0))?,
                }
            }
            Family::Roberta => {
                let p = vb.pp("lm_head");
                MlmHead {
                    dense: linear(h, h, p.pp("dense"))?,
                    norm: LayerNorm::new(h, eps, p.pp("layer_norm"))?,
                    bias: p.get_with_hints(config.vocab_size, "bias", candle_nn::Init::Const(0.0))?,
                }
            }
        };
        Ok(Encoder {
            config: config.clone(),
            embeddings,
            layers,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Input embedding matrix `[vocab, hidden]`.
    pub fn word_embeddings(&self) -> &Tensor {
        self.embeddings.word.embeddings()
    }

    /// Last-layer hidden states `[batch, seq, hidden]` for `ids`
    /// `[batch, seq]`; `mask` is `[batch, seq]` with 1 for real tokens.
    pub fn forward(&self, ids: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        let (b, n) = ids.dims2()?;
        let device = ids.device();
        let e = &self.embeddings;
        let pos = Tensor::arange(e.offset as u32, (e.offset + n) as u32, device)?
            .unsqueeze(0)?
            .broadcast_as((b, n))?
            .contiguous()?;
        let types = Tensor::zeros((b, n), DType::U32, device)?;
        let x = e
            .word
            .forward(ids)?
            .add(&e.position.forward(&pos)?)?
            .add(&e.token_type.forward(&types)?)?;
        let mut x = e.norm.forward(&x)?;
        let dtype = x.dtype();
        // additive attention bias [b, 1, 1, n]
        let bias = match mask {
            Some(m) => Some(
                ((m.to_dtype(dtype)?.ones_like()? - m.to_dtype(dtype)?)? * -10000.0)?
                    .unsqueeze(1)?
                    .unsqueeze(1)?,
            ),
            None => None,
        };
        let heads = self.config.num_attention_heads;
        let dh = self.config.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        for layer in &self.layers {
            let split = |t: Tensor| -> candle_core::Result<Tensor> {
                t.reshape((b, n, heads, dh))?.transpose(1, 2)?.contiguous()
            };
            let q = split(layer.query.forward(&x)?)?;
            let k = split(layer.key.forward(&x)?)?;
            let v = split(layer.value.forward(&x)?)?;
            let mut scores = (q.matmul(&k.t()?.contiguous()?)? * scale)?;
            if let Some(bias) = &bias {
                scores = scores.broadcast_add(bias)?;
            }
            let probs = candle_nn::ops::softmax(&scores, D::Minus1)?;
            let ctx = probs
                .matmul(&v)?
                .transpose(1, 2)?
                .contiguous()?
                .reshape((b, n, heads * dh))?;
            let attn = layer.attn_norm.forward(&(layer.attn_out.forward(&ctx)? + &x)?)?;
            let inter = layer.inter.forward(&attn)?.gelu_erf()?;
            x = layer.out_norm.forward(&(layer.out.forward(&inter)? + &attn)?)?;
        }
        Ok(x)
    }

    /// Vocabulary logits for hidden vectors `[rows, hidden]`.
    pub fn mlm_logits(&self, hidden: &Tensor) -> Result<Tensor> {
        let t = self.head.dense.forward(hidden)?.gelu_erf()?;
        let t = self.head.norm.forward(&t)?;
        let logits = t.matmul(&self.word_embeddings().t()?)?;
        Ok(logits.broadcast_add(&self.head.bias)?)
    }
}
