//! BERT-style masked-language-model encoder parameterized by the attention
//! compatibility operator, and the closed-form parameter count.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{attention_forward_graph, attention_param_count, AttentionParams, AttentionVars, OperatorKind};
use crate::data::MaskedBatch;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::init::truncated_normal;
use crate::tensor::Tensor;

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub max_positions: usize,
    pub type_vocab_size: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub hidden: usize,
    pub intermediate: usize,
    pub operator: OperatorKind,
    pub ln_eps: f64,
    pub dropout: f64,
    pub tie_mlm_decoder: bool,
}

impl ModelConfig {
    /// 4 layers, 8 heads, hidden 512, intermediate 2048.
    pub fn bert_small(operator: OperatorKind) -> Self {
        Self {
            n_layers: 4,
            n_heads: 8,
            hidden: 512,
            intermediate: 2048,
            ..Self::bert_base(operator)
        }
    }

    /// 12 layers, 12 heads, hidden 768, intermediate 3072.
    pub fn bert_base(operator: OperatorKind) -> Self {
        Self {
            vocab_size: 30_522,
            max_positions: 512,
            type_vocab_size: 2,
            n_layers: 12,
            n_heads: 12,
            hidden: 768,
            intermediate: 3072,
            operator,
            ln_eps: 1e-12,
            dropout: 0.1,
            tie_mlm_decoder: true,
        }
    }

    /// Desk-scale training model: 2 layers, 4 heads, hidden 64, vocab 64.
    pub fn toy(operator: OperatorKind) -> Self {
        Self {
            vocab_size: 64,
            max_positions: 32,
            type_vocab_size: 2,
            n_layers: 2,
            n_heads: 4,
            hidden: 64,
            intermediate: 256,
            operator,
            ln_eps: 1e-12,
            dropout: 0.1,
            tie_mlm_decoder: true,
        }
    }

    /// Gradient-check model: 2 layers, 2 heads, hidden 16, vocab 11, no dropout.
    pub fn tiny(operator: OperatorKind) -> Self {
        Self {
            vocab_size: 11,
            max_positions: 8,
            type_vocab_size: 2,
            n_layers: 2,
            n_heads: 2,
            hidden: 16,
            intermediate: 32,
            operator,
            ln_eps: 1e-12,
            dropout: 0.0,
            tie_mlm_decoder: true,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("max_positions", self.max_positions),
            ("type_vocab_size", self.type_vocab_size),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("hidden", self.hidden),
            ("intermediate", self.intermediate),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.hidden % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "hidden size {} is not divisible by {} heads",
                self.hidden, self.n_heads
            )));
        }
        if !(self.ln_eps > 0.0) {
            return Err(Error::Config(format!("ln_eps must be positive, got {}", self.ln_eps)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        if !self.tie_mlm_decoder {
            return Err(Error::Config("only the tied MLM decoder is supported".into()));
        }
        Ok(())
    }
}

/// Closed-form scalar count of [`build_model`]'s allocation.
pub fn count_params(config: &ModelConfig) -> Result<usize> {
    config.validate()?;
    let h = config.hidden;
    let i = config.intermediate;
    let dense = h * h + h;
    let layer_norm = 2 * h;
    let embeddings = (config.vocab_size + config.max_positions + config.type_vocab_size) * h + layer_norm;
    let per_layer = attention_param_count(h, config.n_heads, config.operator)?
        + dense
        + layer_norm
        + (h * i + i)
        + (i * h + h)
        + layer_norm;
    let mlm_head = dense + layer_norm + config.vocab_size;
    Ok(embeddings + config.n_layers * per_layer + mlm_head)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LayerNormParams {
    fn new(h: usize) -> Self {
        Self {
            gamma: Tensor::full(&[h], 1.0),
            beta: Tensor::zeros(&[h]),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `[in × out]`
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Dense {
    fn init<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: truncated_normal(rng, &[fan_in, fan_out], INIT_STD),
            bias: Tensor::zeros(&[fan_out]),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Embeddings {
    pub word: Tensor,
    pub position: Tensor,
    pub token_type: Tensor,
    pub layer_norm: LayerNormParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    pub attention: AttentionParams,
    pub attention_norm: LayerNormParams,
    pub intermediate: Dense,
    pub output: Dense,
    pub output_norm: LayerNormParams,
}

/// Transform, layer norm and decoder bias; the decoder weight is the word
/// embedding matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct MlmHead {
    pub transform: Dense,
    pub layer_norm: LayerNormParams,
    pub decoder_bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel {
    pub config: ModelConfig,
    pub embeddings: Embeddings,
    pub layers: Vec<EncoderLayer>,
    pub mlm_head: MlmHead,
}

pub fn build_model(config: &ModelConfig, seed: u64) -> Result<EncoderModel> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = config.hidden;
    let embeddings = Embeddings {
        word: truncated_normal(&mut rng, &[config.vocab_size, h], INIT_STD),
        position: truncated_normal(&mut rng, &[config.max_positions, h], INIT_STD),
        token_type: truncated_normal(&mut rng, &[config.type_vocab_size, h], INIT_STD),
        layer_norm: LayerNormParams::new(h),
    };
    let layers = (0..config.n_layers)
        .map(|_| {
            Ok(EncoderLayer {
                attention: AttentionParams::init(&mut rng, h, config.n_heads, config.operator, INIT_STD)?,
                attention_norm: LayerNormParams::new(h),
                intermediate: Dense::init(&mut rng, h, config.intermediate),
                output: Dense::init(&mut rng, config.intermediate, h),
                output_norm: LayerNormParams::new(h),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mlm_head = MlmHead {
        transform: Dense::init(&mut rng, h, h),
        layer_norm: LayerNormParams::new(h),
        decoder_bias: Tensor::zeros(&[config.vocab_size]),
    };
    Ok(EncoderModel {
        config: config.clone(),
        embeddings,
        layers,
        mlm_head,
    })
}

/// Whether a parameter receives decoupled weight decay: biases and
/// layer-norm parameters do not.
pub fn is_decayed(name: &str) -> bool {
    !(name.ends_with("bias") || name.contains("layer_norm"))
}

impl EncoderModel {
    /// Every trainable tensor with a dotted path name, in a fixed order.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = Vec::new();
        let e = &self.embeddings;
        out.push(("embeddings.word_embeddings.weight".into(), &e.word));
        out.push(("embeddings.position_embeddings.weight".into(), &e.position));
        out.push(("embeddings.token_type_embeddings.weight".into(), &e.token_type));
        out.push(("embeddings.layer_norm.gamma".into(), &e.layer_norm.gamma));
        out.push(("embeddings.layer_norm.beta".into(), &e.layer_norm.beta));
        for (i, layer) in self.layers.iter().enumerate() {
            let p = format!("encoder.layer.{i}");
            for (name, t) in layer.attention.named_tensors() {
                out.push((format!("{p}.attention.{name}"), t));
            }
            out.push((format!("{p}.attention.layer_norm.gamma"), &layer.attention_norm.gamma));
            out.push((format!("{p}.attention.layer_norm.beta"), &layer.attention_norm.beta));
            out.push((format!("{p}.intermediate.weight"), &layer.intermediate.weight));
            out.push((format!("{p}.intermediate.bias"), &layer.intermediate.bias));
            out.push((format!("{p}.output.weight"), &layer.output.weight));
            out.push((format!("{p}.output.bias"), &layer.output.bias));
            out.push((format!("{p}.output.layer_norm.gamma"), &layer.output_norm.gamma));
            out.push((format!("{p}.output.layer_norm.beta"), &layer.output_norm.beta));
        }
        let m = &self.mlm_head;
        out.push(("mlm.transform.weight".into(), &m.transform.weight));
        out.push(("mlm.transform.bias".into(), &m.transform.bias));
        out.push(("mlm.layer_norm.gamma".into(), &m.layer_norm.gamma));
        out.push(("mlm.layer_norm.beta".into(), &m.layer_norm.beta));
        out.push(("mlm.decoder.bias".into(), &m.decoder_bias));
        out
    }

    /// Mutable counterpart of [`named_params`](Self::named_params), same order.
    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        let e = &mut self.embeddings;
        out.push(("embeddings.word_embeddings.weight".into(), &mut e.word));
        out.push(("embeddings.position_embeddings.weight".into(), &mut e.position));
        out.push(("embeddings.token_type_embeddings.weight".into(), &mut e.token_type));
        out.push(("embeddings.layer_norm.gamma".into(), &mut e.layer_norm.gamma));
        out.push(("embeddings.layer_norm.beta".into(), &mut e.layer_norm.beta));
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let p = format!("encoder.layer.{i}");
            for (name, t) in layer.attention.named_tensors_mut() {
                out.push((format!("{p}.attention.{name}"), t));
            }
            out.push((format!("{p}.attention.layer_norm.gamma"), &mut layer.attention_norm.gamma));
            out.push((format!("{p}.attention.layer_norm.beta"), &mut layer.attention_norm.beta));
            out.push((format!("{p}.intermediate.weight"), &mut layer.intermediate.weight));
            out.push((format!("{p}.intermediate.bias"), &mut layer.intermediate.bias));
            out.push((format!("{p}.output.weight"), &mut layer.output.weight));
            out.push((format!("{p}.output.bias"), &mut layer.output.bias));
            out.push((format!("{p}.output.layer_norm.gamma"), &mut layer.output_norm.gamma));
            out.push((format!("{p}.output.layer_norm.beta"), &mut layer.output_norm.beta));
        }
        let m = &mut self.mlm_head;
        out.push(("mlm.transform.weight".into(), &mut m.transform.weight));
        out.push(("mlm.transform.bias".into(), &mut m.transform.bias));
        out.push(("mlm.layer_norm.gamma".into(), &mut m.layer_norm.gamma));
        out.push(("mlm.layer_norm.beta".into(), &mut m.layer_norm.beta));
        out.push(("mlm.decoder.bias".into(), &mut m.decoder_bias));
        out
    }

    /// Number of scalars actually allocated.
    pub fn allocated_scalars(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Records the MLM forward pass on `g`. Dropout is active only when
    /// `dropout_rng` is given and the configured rate is positive.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        batch: &MaskedBatch,
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<ForwardVars> {
        let c = &self.config;
        let (bsz, len, h) = (batch.batch_size, batch.seq_len, c.hidden);
        if len > c.max_positions {
            return Err(Error::TokenOutOfRange {
                id: len - 1,
                limit: c.max_positions,
            });
        }
        if let Some(&id) = batch.input_ids.iter().find(|&&id| id >= c.vocab_size) {
            return Err(Error::TokenOutOfRange {
                id,
                limit: c.vocab_size,
            });
        }

        let e = &self.embeddings;
        let word = g.param(e.word.clone());
        let position = g.param(e.position.clone());
        let token_type = g.param(e.token_type.clone());
        let emb_gamma = g.param(e.layer_norm.gamma.clone());
        let emb_beta = g.param(e.layer_norm.beta.clone());
        let mut params = vec![word, position, token_type, emb_gamma, emb_beta];

        let positions: Vec<usize> = (0..bsz).flat_map(|_| 0..len).collect();
        let types = vec![0usize; bsz * len];
        let x = g.embedding(word, &batch.input_ids)?;
        let p = g.embedding(position, &positions)?;
        let t = g.embedding(token_type, &types)?;
        let x = g.add(x, p)?;
        let x = g.add(x, t)?;
        let x = g.layer_norm(x, emb_gamma, emb_beta, c.ln_eps)?;
        let x = self.dropout(g, x, dropout_rng.as_deref_mut())?;
        let mut hidden = g.reshape(x, &[bsz, len, h])?;

        for layer in &self.layers {
            let attn: AttentionVars = layer.attention.register(g);
            params.extend(attn.ordered());
            let an_gamma = g.param(layer.attention_norm.gamma.clone());
            let an_beta = g.param(layer.attention_norm.beta.clone());
            let w_i = g.param(layer.intermediate.weight.clone());
            let b_i = g.param(layer.intermediate.bias.clone());
            let w_o = g.param(layer.output.weight.clone());
            let b_o = g.param(layer.output.bias.clone());
            let on_gamma = g.param(layer.output_norm.gamma.clone());
            let on_beta = g.param(layer.output_norm.beta.clone());
            params.extend([an_gamma, an_beta, w_i, b_i, w_o, b_o, on_gamma, on_beta]);

            let (a, _) = attention_forward_graph(g, hidden, &attn, c.operator, &batch.attention_mask)?;
            let a = self.dropout(g, a, dropout_rng.as_deref_mut())?;
            let a = g.add(a, hidden)?;
            let a = g.layer_norm(a, an_gamma, an_beta, c.ln_eps)?;

            let flat = g.reshape(a, &[bsz * len, h])?;
            let f = g.matmul(flat, w_i)?;
            let f = g.add_bias(f, b_i)?;
            let f = g.gelu(f);
            let f = g.matmul(f, w_o)?;
            let f = g.add_bias(f, b_o)?;
            let f = self.dropout(g, f, dropout_rng.as_deref_mut())?;
            let f = g.add(f, flat)?;
            let f = g.layer_norm(f, on_gamma, on_beta, c.ln_eps)?;
            hidden = g.reshape(f, &[bsz, len, h])?;
        }

        let m = &self.mlm_head;
        let t_w = g.param(m.transform.weight.clone());
        let t_b = g.param(m.transform.bias.clone());
        let m_gamma = g.param(m.layer_norm.gamma.clone());
        let m_beta = g.param(m.layer_norm.beta.clone());
        let dec_b = g.param(m.decoder_bias.clone());
        params.extend([t_w, t_b, m_gamma, m_beta, dec_b]);

        let flat = g.reshape(hidden, &[bsz * len, h])?;
        let y = g.matmul(flat, t_w)?;
        let y = g.add_bias(y, t_b)?;
        let y = g.gelu(y);
        let y = g.layer_norm(y, m_gamma, m_beta, c.ln_eps)?;
        let logits = g.matmul_t(y, word)?;
        let logits = g.add_bias(logits, dec_b)?;
        let logits = g.reshape(logits, &[bsz, len, c.vocab_size])?;
        Ok(ForwardVars { logits, params })
    }

    fn dropout(&self, g: &mut Graph, x: Var, rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
        let p = self.config.dropout;
        match rng {
            Some(rng) if p > 0.0 => {
                let keep = 1.0 / (1.0 - p);
                let shape = g.shape(x).to_vec();
                let n = g.value(x).numel();
                let mask = (0..n).map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep }).collect();
                let mask = g.constant(Tensor::new(&shape, mask)?);
                g.mul(x, mask)
            }
            _ => Ok(x),
        }
    }
}

/// Graph handles produced by [`EncoderModel::forward_graph`]. `params` follows
/// [`EncoderModel::named_params`] order.
#[derive(Debug, Clone)]
pub struct ForwardVars {
    pub logits: Var,
    pub params: Vec<Var>,
}

/// Logits `[B×L×V]` with dropout disabled.
pub fn forward_mlm(model: &EncoderModel, batch: &MaskedBatch) -> Result<Tensor> {
    let mut g = Graph::new();
    let out = model.forward_graph(&mut g, batch, None)?;
    Ok(g.value(out.logits).clone())
}

/// Masked cross-entropy of `batch` with dropout disabled.
pub fn mlm_loss(model: &EncoderModel, batch: &MaskedBatch) -> Result<f64> {
    let mut g = Graph::new();
    let out = model.forward_graph(&mut g, batch, None)?;
    let loss = g.cross_entropy_masked(out.logits, &batch.labels)?;
    Ok(g.value(loss).item())
}

/// Loss and per-parameter gradients in [`EncoderModel::named_params`] order.
pub fn mlm_loss_and_grads(
    model: &EncoderModel,
    batch: &MaskedBatch,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut g = Graph::new();
    let out = model.forward_graph(&mut g, batch, dropout_rng)?;
    let loss = g.cross_entropy_masked(out.logits, &batch.labels)?;
    g.backward(loss)?;
    let grads = out
        .params
        .iter()
        .map(|&v| {
            g.grad(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; g.value(v).numel()])
        })
        .collect();
    Ok((g.value(loss).item(), grads))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(ids: Vec<usize>, bsz: usize, len: usize) -> MaskedBatch {
        let labels = ids.iter().map(|&i| i as i64).collect();
        MaskedBatch {
            batch_size: bsz,
            seq_len: len,
            attention_mask: vec![1; ids.len()],
            input_ids: ids,
            labels,
        }
    }

    #[test]
    fn bert_preset_counts() {
        use OperatorKind::*;
        let expect = [
            (ModelConfig::bert_small(Original), 28_795_194),
            (ModelConfig::bert_small(Symmetric), 27_744_570),
            (ModelConfig::bert_small(Pairwise), 27_875_642),
            (ModelConfig::bert_base(Original), 109_514_298),
            (ModelConfig::bert_base(Symmetric), 102_427_194),
            (ModelConfig::bert_base(Pairwise), 103_017_018),
        ];
        for (config, count) in expect {
            assert_eq!(count_params(&config).unwrap(), count, "{config:?}");
        }
    }

    #[test]
    fn init_contract() {
        let model = build_model(&ModelConfig::tiny(OperatorKind::Pairwise), 3).unwrap();
        for (name, t) in model.named_params() {
            if name.ends_with("gamma") {
                assert!(t.data().iter().all(|&v| v == 1.0), "{name}");
            } else if name.ends_with("bias") || name.ends_with("beta") {
                assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
            } else {
                assert!(t.data().iter().all(|&v| v.abs() <= 2.0 * INIT_STD), "{name}");
            }
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let c = ModelConfig::tiny(OperatorKind::Original);
        assert_eq!(build_model(&c, 9).unwrap(), build_model(&c, 9).unwrap());
        assert_ne!(build_model(&c, 9).unwrap(), build_model(&c, 10).unwrap());
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = ModelConfig::tiny(OperatorKind::Original);
        c.n_heads = 3;
        assert!(build_model(&c, 0).is_err());
        let mut c = ModelConfig::tiny(OperatorKind::Original);
        c.dropout = 1.0;
        assert!(count_params(&c).is_err());
    }

    #[test]
    fn single_token_logits_shape() {
        let mut c = ModelConfig::tiny(OperatorKind::Symmetric);
        c.n_layers = 1;
        let model = build_model(&c, 0).unwrap();
        let logits = forward_mlm(&model, &batch(vec![5], 1, 1)).unwrap();
        assert_eq!(logits.shape(), &[1, 1, 11]);
        assert!(logits.is_finite());
    }

    #[test]
    fn duplicated_sequences_give_identical_rows() {
        let model = build_model(&ModelConfig::tiny(OperatorKind::Pairwise), 1).unwrap();
        let logits = forward_mlm(&model, &batch(vec![2, 5, 7, 3, 2, 5, 7, 3], 2, 4)).unwrap();
        let (a, b) = logits.data().split_at(4 * 11);
        assert_eq!(a, b);
    }

    #[test]
    fn out_of_range_ids_rejected() {
        let model = build_model(&ModelConfig::tiny(OperatorKind::Original), 1).unwrap();
        assert!(matches!(
            forward_mlm(&model, &batch(vec![2, 11], 1, 2)),
            Err(Error::TokenOutOfRange { id: 11, .. })
        ));
        assert!(forward_mlm(&model, &batch(vec![2; 9], 1, 9)).is_err());
    }

    #[test]
    fn decay_excludes_bias_and_norm() {
        assert!(is_decayed("encoder.layer.0.attention.pairwise.weight"));
        assert!(is_decayed("embeddings.word_embeddings.weight"));
        assert!(!is_decayed("mlm.decoder.bias"));
        assert!(!is_decayed("encoder.layer.1.output.layer_norm.gamma"));
    }
}
