//! Toy autoregressive transformer: learned token/position embeddings,
//! pre-norm residual blocks (causal self-attention + dense-FFN-or-MoE
//! sublayer), a language-model head, and greedy decoding.
//!
//! An optional scalar regression head shares the trunk and exists for the
//! MSE-mode generation loss used in the loss-dynamics experiment.

use rand::Rng;

use crate::error::{Error, Result};
use crate::lora::Weight;
use crate::moe::{moe_forward, ExpertFFN, MoEParams, RoutingRecord};
use crate::router::{GroupAssignment, TaskGroup};
use crate::tensor::{concat_cols, no_grad, Tensor};

/// Non-empty sequence of token ids in `[0, V)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence(Vec<usize>);

impl TokenSequence {
    pub fn new(tokens: Vec<usize>) -> Result<TokenSequence> {
        if tokens.is_empty() {
            return Err(Error::Contract("token sequence must be non-empty".into()));
        }
        Ok(TokenSequence(tokens))
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn into_vec(self) -> Vec<usize> {
        self.0
    }
}

/// Q/K/V/O projections with biases for multi-head causal attention.
pub struct AttentionParams {
    pub wq: Weight,
    pub bq: Tensor,
    pub wk: Weight,
    pub bk: Tensor,
    pub wv: Weight,
    pub bv: Tensor,
    pub wo: Weight,
    pub bo: Tensor,
    pub n_heads: usize,
}

impl AttentionParams {
    pub fn init<R: Rng>(d: usize, n_heads: usize, std: f64, rng: &mut R) -> AttentionParams {
        let w = |rng: &mut R| Weight::Dense(Tensor::randn(&[d, d], std, rng).requires_grad_(true));
        AttentionParams {
            wq: w(rng),
            bq: Tensor::zeros(&[d]).requires_grad_(true),
            wk: w(rng),
            bk: Tensor::zeros(&[d]).requires_grad_(true),
            wv: w(rng),
            bv: Tensor::zeros(&[d]).requires_grad_(true),
            wo: w(rng),
            bo: Tensor::zeros(&[d]).requires_grad_(true),
            n_heads,
        }
    }

    pub fn visit_tensors(&self, prefix: &str, f: &mut dyn FnMut(String, Tensor)) {
        self.wq.visit(&format!("{prefix}.wq"), f);
        f(format!("{prefix}.bq"), self.bq.clone());
        self.wk.visit(&format!("{prefix}.wk"), f);
        f(format!("{prefix}.bk"), self.bk.clone());
        self.wv.visit(&format!("{prefix}.wv"), f);
        f(format!("{prefix}.bv"), self.bv.clone());
        self.wo.visit(&format!("{prefix}.wo"), f);
        f(format!("{prefix}.bo"), self.bo.clone());
    }
}

/// Per-block FFN-or-MoE sublayer; uniform across blocks within one model.
pub enum Sublayer {
    Dense(ExpertFFN),
    Moe(MoEParams),
}

pub struct Block {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub attn: AttentionParams,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub sublayer: Sublayer,
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_hidden: usize,
    pub max_seq_len: usize,
    pub init_std: f64,
    pub regression_head: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 36,
            d_model: 64,
            n_layers: 4,
            n_heads: 2,
            ffn_hidden: 128,
            max_seq_len: 48,
            init_std: 0.02,
            regression_head: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size == 0 || self.n_layers == 0 || self.max_seq_len == 0 {
            return Err(Error::Config("model dims must be positive".into()));
        }
        Ok(())
    }
}

/// Full model parameters.
pub struct ModelParams {
    pub config: ModelConfig,
    pub token_embedding: Tensor,
    pub position_embedding: Tensor,
    pub blocks: Vec<Block>,
    pub final_ln_gain: Tensor,
    pub final_ln_bias: Tensor,
    pub lm_head: Weight,
    /// `([d, 1] weight, [1] bias)` when the regression head is enabled.
    pub regression_head: Option<(Weight, Tensor)>,
}

impl ModelParams {
    /// Fresh model with dense FFN sublayers.
    pub fn init_dense<R: Rng>(cfg: ModelConfig, rng: &mut R) -> Result<ModelParams> {
        cfg.validate()?;
        let d = cfg.d_model;
        let std = cfg.init_std;
        let blocks = (0..cfg.n_layers)
            .map(|_| Block {
                ln1_gain: Tensor::full(&[d], 1.0).requires_grad_(true),
                ln1_bias: Tensor::zeros(&[d]).requires_grad_(true),
                attn: AttentionParams::init(d, cfg.n_heads, std, rng),
                ln2_gain: Tensor::full(&[d], 1.0).requires_grad_(true),
                ln2_bias: Tensor::zeros(&[d]).requires_grad_(true),
                sublayer: Sublayer::Dense(ExpertFFN::init(d, cfg.ffn_hidden, std, rng)),
            })
            .collect();
        Ok(ModelParams {
            config: cfg,
            token_embedding: Tensor::randn(&[cfg.vocab_size, d], std, rng).requires_grad_(true),
            position_embedding: Tensor::randn(&[cfg.max_seq_len, d], std, rng)
                .requires_grad_(true),
            blocks,
            final_ln_gain: Tensor::full(&[d], 1.0).requires_grad_(true),
            final_ln_bias: Tensor::zeros(&[d]).requires_grad_(true),
            lm_head: Weight::Dense(
                Tensor::randn(&[d, cfg.vocab_size], std, rng).requires_grad_(true),
            ),
            regression_head: if cfg.regression_head {
                Some((
                    Weight::Dense(Tensor::randn(&[d, 1], std, rng).requires_grad_(true)),
                    Tensor::zeros(&[1]).requires_grad_(true),
                ))
            } else {
                None
            },
        })
    }

    /// Swaps every block's sublayer for the given MoE layers (one per block).
    pub fn replace_sublayers_with_moe(&mut self, layers: Vec<MoEParams>) -> Result<()> {
        if layers.len() != self.blocks.len() {
            return Err(Error::Contract(format!(
                "expected {} MoE layers, got {}",
                self.blocks.len(),
                layers.len()
            )));
        }
        for (block, moe) in self.blocks.iter_mut().zip(layers) {
            if moe.dim() != self.config.d_model {
                return Err(Error::Shape(format!(
                    "MoE width {} incompatible with model width {}",
                    moe.dim(),
                    self.config.d_model
                )));
            }
            block.sublayer = Sublayer::Moe(moe);
        }
        Ok(())
    }

    pub fn has_moe_sublayers(&self) -> bool {
        self.blocks
            .iter()
            .any(|b| matches!(b.sublayer, Sublayer::Moe(_)))
    }

    /// Deterministic walk over every named parameter tensor.
    pub fn visit_tensors(&self, f: &mut dyn FnMut(String, Tensor)) {
        f("tok_emb".into(), self.token_embedding.clone());
        f("pos_emb".into(), self.position_embedding.clone());
        for (i, b) in self.blocks.iter().enumerate() {
            f(format!("block{i}.ln1.g"), b.ln1_gain.clone());
            f(format!("block{i}.ln1.b"), b.ln1_bias.clone());
            b.attn.visit_tensors(&format!("block{i}.attn"), f);
            f(format!("block{i}.ln2.g"), b.ln2_gain.clone());
            f(format!("block{i}.ln2.b"), b.ln2_bias.clone());
            match &b.sublayer {
                Sublayer::Dense(ffn) => ffn.visit_tensors(&format!("block{i}.ffn"), f),
                Sublayer::Moe(moe) => moe.visit_tensors(&format!("block{i}.moe"), f),
            }
        }
        f("ln_f.g".into(), self.final_ln_gain.clone());
        f("ln_f.b".into(), self.final_ln_bias.clone());
        self.lm_head.visit("lm_head", f);
        if let Some((w, b)) = &self.regression_head {
            w.visit("reg_head.w", f);
            f("reg_head.b".into(), b.clone());
        }
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut v = Vec::new();
        self.visit_tensors(&mut |name, t| v.push((name, t)));
        v
    }

    /// Gradient-tracked tensors in visit order (frozen tensors excluded).
    pub fn trainable_tensors(&self) -> Vec<Tensor> {
        self.named_tensors()
            .into_iter()
            .filter(|(_, t)| t.requires_grad())
            .map(|(_, t)| t)
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Fresh ExpertFFN copies of every dense sublayer, in layer order
    /// (the stage-1 output consumed by MoE assembly).
    pub fn dense_ffn_stack(&self) -> Result<Vec<ExpertFFN>> {
        self.blocks
            .iter()
            .map(|b| match &b.sublayer {
                Sublayer::Dense(ffn) => Ok(ffn.deep_copy()),
                Sublayer::Moe(_) => Err(Error::Contract(
                    "expected dense FFN sublayers, found a MoE sublayer".into(),
                )),
            })
            .collect()
    }

    /// Structural clone with fresh tensors (no storage sharing). Adapters
    /// are merged into dense weights.
    pub fn deep_copy(&self) -> ModelParams {
        let copy_t = |t: &Tensor| t.detach().requires_grad_(t.requires_grad());
        let copy_w = |w: &Weight| match w.merge() {
            Weight::Dense(t) => Weight::Dense(t.detach().requires_grad_(true)),
            Weight::Adapted(_) => unreachable!("merge returns dense"),
        };
        let blocks = self
            .blocks
            .iter()
            .map(|b| Block {
                ln1_gain: copy_t(&b.ln1_gain),
                ln1_bias: copy_t(&b.ln1_bias),
                attn: AttentionParams {
                    wq: copy_w(&b.attn.wq),
                    bq: copy_t(&b.attn.bq),
                    wk: copy_w(&b.attn.wk),
                    bk: copy_t(&b.attn.bk),
                    wv: copy_w(&b.attn.wv),
                    bv: copy_t(&b.attn.bv),
                    wo: copy_w(&b.attn.wo),
                    bo: copy_t(&b.attn.bo),
                    n_heads: b.attn.n_heads,
                },
                ln2_gain: copy_t(&b.ln2_gain),
                ln2_bias: copy_t(&b.ln2_bias),
                sublayer: match &b.sublayer {
                    Sublayer::Dense(ffn) => Sublayer::Dense(ffn.deep_copy()),
                    Sublayer::Moe(moe) => Sublayer::Moe(MoEParams {
                        task_router: moe.task_router.as_ref().map(|r| {
                            crate::router::TaskRouterParams {
                                weight: copy_t(&r.weight),
                                bias: copy_t(&r.bias),
                            }
                        }),
                        groups: moe
                            .groups
                            .iter()
                            .map(|g| crate::moe::ExpertGroup {
                                scores: crate::router::ExpertScoreMatrix {
                                    weight: copy_t(&g.scores.weight),
                                },
                                experts: g.experts.iter().map(|e| e.deep_copy()).collect(),
                            })
                            .collect(),
                        shared_experts: moe.shared_experts.iter().map(|e| e.deep_copy()).collect(),
                        alpha: copy_t(&moe.alpha),
                        config: moe.config,
                    }),
                },
            })
            .collect();
        ModelParams {
            config: self.config,
            token_embedding: copy_t(&self.token_embedding),
            position_embedding: copy_t(&self.position_embedding),
            blocks,
            final_ln_gain: copy_t(&self.final_ln_gain),
            final_ln_bias: copy_t(&self.final_ln_bias),
            lm_head: copy_w(&self.lm_head),
            regression_head: self
                .regression_head
                .as_ref()
                .map(|(w, b)| (copy_w(w), copy_t(b))),
        }
    }
}

/// Output of one forward pass over a single sequence.
pub struct ForwardOutput {
    /// `[n, V]` next-token logits per position.
    pub logits: Tensor,
    /// One routing record per MoE layer (empty for dense models).
    pub routing: Vec<RoutingRecord>,
    /// Task-router logits per MoE layer, for the group loss.
    pub assignments: Vec<GroupAssignment>,
    /// `[n, 1]` regression values when the head is enabled.
    pub regression: Option<Tensor>,
}

/// Multi-head scaled-dot-product attention with a causal mask.
pub fn causal_attention(x: &Tensor, params: &AttentionParams) -> Result<Tensor> {
    let (n, d) = match x.shape() {
        [n, d] => (*n, *d),
        s => {
            return Err(Error::Shape(format!(
                "causal_attention: expected [n, d], got {s:?}"
            )))
        }
    };
    let heads = params.n_heads;
    let hd = d / heads;
    let q = x.matmul(&params.wq.effective()?)?.add_bias(&params.bq)?;
    let k = x.matmul(&params.wk.effective()?)?.add_bias(&params.bk)?;
    let v = x.matmul(&params.wv.effective()?)?.add_bias(&params.bv)?;
    let mut head_outputs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = q.cols(h * hd, hd)?;
        let kh = k.cols(h * hd, hd)?;
        let vh = v.cols(h * hd, hd)?;
        let scores = qh.matmul_nt(&kh)?.scale(1.0 / (hd as f64).sqrt());
        let weights = scores.causal_softmax()?;
        head_outputs.push(weights.matmul(&vh)?);
    }
    let merged = if heads == 1 {
        head_outputs.pop().unwrap()
    } else {
        concat_cols(&head_outputs)?
    };
    let _ = n;
    merged.matmul(&params.wo.effective()?)?.add_bias(&params.bo)
}

/// Forward pass over one token sequence.
///
/// Causality: position i's logits depend only on tokens at positions <= i.
/// `forced_group` teacher-forces MoE routing when the layer config enables
/// it, and tags routing records with the sample's task.
pub fn forward(
    model: &ModelParams,
    tokens: &TokenSequence,
    forced_group: Option<TaskGroup>,
) -> Result<ForwardOutput> {
    let cfg = &model.config;
    let n = tokens.len();
    if n > cfg.max_seq_len {
        return Err(Error::Contract(format!(
            "sequence length {n} exceeds max {}",
            cfg.max_seq_len
        )));
    }
    if let Some(&t) = tokens.as_slice().iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(Error::IndexOutOfRange(format!(
            "token {t} outside vocabulary of {}",
            cfg.vocab_size
        )));
    }
    let positions: Vec<usize> = (0..n).collect();
    let mut x = model
        .token_embedding
        .gather_rows(tokens.as_slice())?
        .add(&model.position_embedding.gather_rows(&positions)?)?;

    let mut routing = Vec::new();
    let mut assignments = Vec::new();
    for (layer, block) in model.blocks.iter().enumerate() {
        let normed = x.layer_norm(&block.ln1_gain, &block.ln1_bias)?;
        x = x.add(&causal_attention(&normed, &block.attn)?)?;
        let normed = x.layer_norm(&block.ln2_gain, &block.ln2_bias)?;
        let sub_out = match &block.sublayer {
            Sublayer::Dense(ffn) => ffn.forward(&normed)?,
            Sublayer::Moe(moe) => {
                let fwd = moe_forward(&normed, moe, layer, forced_group)?;
                routing.push(fwd.record);
                if let Some(a) = fwd.assignment {
                    assignments.push(a);
                }
                fwd.output
            }
        };
        x = x.add(&sub_out)?;
    }
    let h = x.layer_norm(&model.final_ln_gain, &model.final_ln_bias)?;
    let logits = h.matmul(&model.lm_head.effective()?)?;
    let regression = match &model.regression_head {
        Some((w, b)) => Some(h.matmul(&w.effective()?)?.add_bias(b)?),
        None => None,
    };
    Ok(ForwardOutput {
        logits,
        routing,
        assignments,
        regression,
    })
}

/// Masked mean next-token cross-entropy. `targets` are already shifted by
/// one (targets[i] is the token that should follow position i); `mask`
/// selects answer positions.
pub fn ar_loss(logits: &Tensor, targets: &[usize], mask: &[u8]) -> Result<Tensor> {
    logits.cross_entropy(targets, mask)
}

/// Greedy argmax decoding; deterministic, ties toward the lower token index.
pub fn generate(
    model: &ModelParams,
    prompt: &TokenSequence,
    max_new: usize,
) -> Result<TokenSequence> {
    if prompt.len() + max_new > model.config.max_seq_len {
        return Err(Error::Contract(format!(
            "prompt {} + max_new {max_new} exceeds max sequence length {}",
            prompt.len(),
            model.config.max_seq_len
        )));
    }
    let mut tokens = prompt.as_slice().to_vec();
    no_grad(|| -> Result<()> {
        for _ in 0..max_new {
            let seq = TokenSequence::new(tokens.clone())?;
            let out = forward(model, &seq, None)?;
            let logits = out.logits;
            let v = model.config.vocab_size;
            let last = logits.to_vec()[(seq.len() - 1) * v..seq.len() * v].to_vec();
            // Argmax, first occurrence wins ties.
            let mut best = 0;
            for (i, &val) in last.iter().enumerate() {
                if val > last[best] {
                    best = i;
                }
            }
            tokens.push(best);
        }
        Ok(())
    })?;
    TokenSequence::new(tokens)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            vocab_size: 12,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            ffn_hidden: 12,
            max_seq_len: 10,
            init_std: 0.08,
            regression_head: false,
        }
    }

    fn seq(tokens: &[usize]) -> TokenSequence {
        TokenSequence::new(tokens.to_vec()).unwrap()
    }

    #[test]
    fn single_token_gives_one_logit_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = ModelParams::init_dense(tiny_config(), &mut rng).unwrap();
        let out = forward(&model, &seq(&[3]), None).unwrap();
        assert_eq!(out.logits.shape(), &[1, 12]);
    }

    #[test]
    fn future_tokens_do_not_change_past_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = ModelParams::init_dense(tiny_config(), &mut rng).unwrap();
        let a = forward(&model, &seq(&[1, 2, 3, 4, 5]), None).unwrap();
        let b = forward(&model, &seq(&[1, 2, 3, 7, 9]), None).unwrap();
        let (av, bv) = (a.logits.to_vec(), b.logits.to_vec());
        // Positions 0..=2 share the prefix, so their logits must match.
        for i in 0..3 {
            for j in 0..12 {
                assert_eq!(av[i * 12 + j], bv[i * 12 + j], "position {i}");
            }
        }
        // Sanity: the changed suffix actually moves later logits.
        assert_ne!(av[4 * 12..5 * 12], bv[4 * 12..5 * 12]);
    }

    #[test]
    fn out_of_vocab_token_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = ModelParams::init_dense(tiny_config(), &mut rng).unwrap();
        assert!(matches!(
            forward(&model, &seq(&[0, 12]), None),
            Err(Error::IndexOutOfRange(_))
        ));
    }

    #[test]
    fn attention_single_token_is_value_then_output_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = AttentionParams::init(6, 2, 0.3, &mut rng);
        let x = Tensor::randn(&[1, 6], 1.0, &mut rng);
        let out = causal_attention(&x, &params).unwrap();
        let v = x
            .matmul(&params.wv.effective().unwrap())
            .unwrap()
            .add_bias(&params.bv)
            .unwrap();
        let expect = v
            .matmul(&params.wo.effective().unwrap())
            .unwrap()
            .add_bias(&params.bo)
            .unwrap();
        assert_eq!(out.to_vec(), expect.to_vec());
    }

    #[test]
    fn zero_queries_average_the_prefix_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut params = AttentionParams::init(4, 1, 0.3, &mut rng);
        params.wq = Weight::Dense(Tensor::zeros(&[4, 4]).requires_grad_(true));
        params.bq = Tensor::zeros(&[4]).requires_grad_(true);
        let x = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let out = causal_attention(&x, &params).unwrap();

        let v = x
            .matmul(&params.wv.effective().unwrap())
            .unwrap()
            .add_bias(&params.bv)
            .unwrap()
            .to_vec();
        // Uniform attention over the visible prefix.
        let mut mixed = vec![0.0; 12];
        for i in 0..3 {
            for j in 0..4 {
                let mean: f64 = (0..=i).map(|t| v[t * 4 + j]).sum::<f64>() / (i + 1) as f64;
                mixed[i * 4 + j] = mean;
            }
        }
        let expect = Tensor::from_vec(&[3, 4], mixed, false)
            .unwrap()
            .matmul(&params.wo.effective().unwrap())
            .unwrap()
            .add_bias(&params.bo)
            .unwrap();
        for (a, b) in out.to_vec().iter().zip(expect.to_vec()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_matches_hand_computed_oracle() {
        // 3 tokens, d = 2, one head: evaluate scaled dot-product by hand.
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let params = AttentionParams::init(2, 1, 0.5, &mut rng);
        let x = Tensor::randn(&[3, 2], 1.0, &mut rng);
        let out = causal_attention(&x, &params).unwrap();

        let lin = |w: &Weight, b: &Tensor, xi: &[f64]| -> Vec<f64> {
            let wd = w.effective().unwrap().to_vec();
            let bd = b.to_vec();
            (0..2)
                .map(|j| bd[j] + xi[0] * wd[j] + xi[1] * wd[2 + j])
                .collect()
        };
        let xd = x.to_vec();
        let rows: Vec<&[f64]> = (0..3).map(|i| &xd[i * 2..(i + 1) * 2]).collect();
        let qs: Vec<Vec<f64>> = rows.iter().map(|r| lin(&params.wq, &params.bq, r)).collect();
        let ks: Vec<Vec<f64>> = rows.iter().map(|r| lin(&params.wk, &params.bk, r)).collect();
        let vs: Vec<Vec<f64>> = rows.iter().map(|r| lin(&params.wv, &params.bv, r)).collect();
        let scale = 1.0 / 2f64.sqrt();
        for i in 0..3 {
            let scores: Vec<f64> = (0..=i)
                .map(|t| (qs[i][0] * ks[t][0] + qs[i][1] * ks[t][1]) * scale)
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = exps.iter().sum();
            let mut mixed = [0.0, 0.0];
            for t in 0..=i {
                for j in 0..2 {
                    mixed[j] += exps[t] / z * vs[t][j];
                }
            }
            let expect = lin(&params.wo, &params.bo, &mixed);
            let got = &out.to_vec()[i * 2..(i + 1) * 2];
            for j in 0..2 {
                assert!((got[j] - expect[j]).abs() < 1e-12, "token {i} dim {j}");
            }
        }
    }

    #[test]
    fn dense_model_equals_degenerate_moe_model() {
        // Same skeleton; FFN sublayer vs flat-pool MoE with that FFN as the
        // single expert and no shared expert.
        use crate::moe::{ExpertGroup, MoEConfig};
        use crate::router::ExpertScoreMatrix;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let dense = ModelParams::init_dense(tiny_config(), &mut rng).unwrap();
        let moe_layers: Vec<MoEParams> = dense
            .blocks
            .iter()
            .map(|b| {
                let ffn = match &b.sublayer {
                    Sublayer::Dense(f) => f.deep_copy(),
                    _ => unreachable!(),
                };
                MoEParams {
                    task_router: None,
                    groups: vec![ExpertGroup {
                        scores: ExpertScoreMatrix::new(
                            Tensor::randn(&[1, 8], 0.02, &mut rng).requires_grad_(true),
                        )
                        .unwrap(),
                        experts: vec![ffn],
                    }],
                    shared_experts: Vec::new(),
                    alpha: Tensor::scalar(0.2).requires_grad_(true),
                    config: MoEConfig {
                        experts_per_group: 1,
                        shared_experts: 0,
                        flat_pool: true,
                        ..MoEConfig::default()
                    },
                }
            })
            .collect();
        let mut moe_model = ModelParams::init_dense(tiny_config(), &mut ChaCha8Rng::seed_from_u64(7))
            .unwrap();
        moe_model.replace_sublayers_with_moe(moe_layers).unwrap();

        let s = seq(&[1, 4, 2, 9, 0]);
        let a = forward(&dense, &s, None).unwrap();
        let b = forward(&moe_model, &s, None).unwrap();
        for (x, y) in a.logits.to_vec().iter().zip(b.logits.to_vec()) {
            assert!((x - y).abs() < 1e-12);
        }
        assert_eq!(b.routing.len(), 2);
    }

    #[test]
    fn ar_loss_uniform_and_saturated() {
        let logits = Tensor::zeros(&[4, 36]);
        let loss = ar_loss(&logits, &[0, 5, 9, 2], &[1, 1, 1, 1]).unwrap();
        assert!((loss.item() - 36f64.ln()).abs() < 1e-12);

        // Margin-30 logits on the target drive the loss under 1e-8.
        let mut data = vec![0.0; 2 * 36];
        data[7] = 30.0;
        data[36 + 11] = 30.0;
        let sharp = Tensor::from_vec(&[2, 36], data, false).unwrap();
        let loss = ar_loss(&sharp, &[7, 11], &[1, 1]).unwrap();
        assert!(loss.item() < 1e-8);
    }

    #[test]
    fn ar_loss_equals_cross_entropy_on_masked_positions() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let logits = Tensor::randn(&[5, 7], 1.0, &mut rng);
        let targets = [1usize, 2, 3, 4, 5];
        let mask = [0u8, 1, 0, 1, 1];
        let a = ar_loss(&logits, &targets, &mask).unwrap().item();
        // Reduction equivalence: gather the masked rows and run a dense CE.
        let rows: Vec<usize> = mask
            .iter()
            .enumerate()
            .filter(|(_, &m)| m != 0)
            .map(|(i, _)| i)
            .collect();
        let sub = logits.gather_rows(&rows).unwrap();
        let sub_targets: Vec<usize> = rows.iter().map(|&i| targets[i]).collect();
        let b = sub
            .cross_entropy(&sub_targets, &vec![1u8; rows.len()])
            .unwrap()
            .item();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn generate_zero_new_tokens_returns_prompt() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let model = ModelParams::init_dense(tiny_config(), &mut rng).unwrap();
        let p = seq(&[4, 2, 7]);
        let out = generate(&model, &p, 0).unwrap();
        assert_eq!(out, p);
    }

    #[test]
    fn generate_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let model = ModelParams::init_dense(tiny_config(), &mut rng).unwrap();
        let p = seq(&[4, 2]);
        let a = generate(&model, &p, 5).unwrap();
        let b = generate(&model, &p, 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn generate_respects_length_budget() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let model = ModelParams::init_dense(tiny_config(), &mut rng).unwrap();
        let p = seq(&[1; 8]);
        assert!(matches!(
            generate(&model, &p, 5),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn memorizes_a_single_training_pair() {
        use crate::optim::{AdamW, AdamWConfig};
        use crate::tensor::backward;
        // Overfit one sequence, then greedy decoding must reproduce it.
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let model = ModelParams::init_dense(tiny_config(), &mut rng).unwrap();
        let full = [3usize, 1, 4, 1, 5, 9, 2, 6];
        let prompt_len = 3;
        let targets: Vec<usize> = full[1..].to_vec();
        let mask: Vec<u8> = (0..full.len() - 1)
            .map(|i| u8::from(i + 1 >= prompt_len))
            .collect();
        let params = model.trainable_tensors();
        let mut opt = AdamW::new(&params, AdamWConfig { lr: 0.01, ..AdamWConfig::default() });
        for _ in 0..300 {
            params.iter().for_each(|p| p.zero_grad());
            let out = forward(&model, &seq(&full[..full.len() - 1]), None).unwrap();
            let loss = ar_loss(&out.logits, &targets, &mask).unwrap();
            backward(&loss).unwrap();
            params.iter().for_each(|p| p.ensure_grad());
            opt.step(&params).unwrap();
        }
        let decoded = generate(&model, &seq(&full[..prompt_len]), full.len() - prompt_len)
            .unwrap();
        assert_eq!(decoded.as_slice(), &full);
    }

    #[test]
    fn small_end_to_end_grad_check() {
        use crate::tensor::grad_check;
        let cfg = ModelConfig {
            vocab_size: 6,
            d_model: 4,
            n_layers: 1,
            n_heads: 2,
            ffn_hidden: 6,
            max_seq_len: 6,
            init_std: 0.2,
            regression_head: false,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let model = ModelParams::init_dense(cfg, &mut rng).unwrap();
        let tokens = seq(&[1, 3, 0, 5]);
        let targets = [3usize, 0, 5, 2];
        let mask = [1u8, 1, 1, 1];
        let tensors: Vec<Tensor> = model.named_tensors().into_iter().map(|(_, t)| t).collect();
        // Tracked model tensors are perturbed in place by the checker.
        let err = grad_check(
            |_| {
                let out = forward(&model, &tokens, None)?;
                ar_loss(&out.logits, &targets, &mask)
            },
            &tensors,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "end-to-end grad error {err}");
    }
}
