//! Low-rank adaptation: frozen base matrices wrapped with trainable
//! `B . A` deltas, plus merging back to dense weights.
//!
//! `B` starts at zero and `A` Gaussian, so attaching an adapter leaves the
//! forward pass bit-identical until training moves `B`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Frozen `[m, n]` base plus trainable low-rank delta `scale * B . A`
/// (`B: [m, r]`, `A: [r, n]`, `scale = lora_alpha / r`).
pub struct LoraAdapter {
    pub base: Tensor,
    pub a: Tensor,
    pub b: Tensor,
    pub rank: usize,
    pub scale: f64,
}

impl LoraAdapter {
    /// Wraps a dense matrix: the base is detached (frozen), `A` is
    /// Gaussian(0, 0.02), `B` is zero.
    pub fn wrap<R: Rng>(dense: &Tensor, rank: usize, lora_alpha: f64, rng: &mut R) -> Result<LoraAdapter> {
        let (m, n) = match dense.shape() {
            [m, n] => (*m, *n),
            s => {
                return Err(Error::Shape(format!(
                    "lora: can only adapt rank-2 matrices, got {s:?}"
                )))
            }
        };
        if rank == 0 {
            return Err(Error::Config("lora: rank must be >= 1".into()));
        }
        Ok(LoraAdapter {
            base: dense.detach(),
            a: Tensor::randn(&[rank, n], 0.02, rng).requires_grad_(true),
            b: Tensor::zeros(&[m, rank]).requires_grad_(true),
            rank,
            scale: lora_alpha / rank as f64,
        })
    }

    /// Effective weight `base + scale * B . A` as a graph node; gradients
    /// reach only `A` and `B`.
    pub fn effective(&self) -> Result<Tensor> {
        self.base.add(&self.b.matmul(&self.a)?.scale(self.scale))
    }

    /// Dense merge of the adapter, off the tape.
    pub fn merged(&self) -> Tensor {
        let (m, r) = (self.b.shape()[0], self.rank);
        let n = self.a.shape()[1];
        let (bd, ad) = (self.b.data(), self.a.data());
        let mut merged = self.base.to_vec();
        for i in 0..m {
            for t in 0..r {
                let bv = bd[i * r + t] * self.scale;
                for j in 0..n {
                    merged[i * n + j] += bv * ad[t * n + j];
                }
            }
        }
        drop(bd);
        drop(ad);
        Tensor::from_vec(self.base.shape(), merged, false).unwrap()
    }
}

/// A linear weight that is either plain dense or LoRA-adapted.
pub enum Weight {
    Dense(Tensor),
    Adapted(LoraAdapter),
}

impl Weight {
    pub fn shape(&self) -> &[usize] {
        match self {
            Weight::Dense(t) => t.shape(),
            Weight::Adapted(a) => a.base.shape(),
        }
    }

    /// The tensor to multiply with in a forward pass.
    pub fn effective(&self) -> Result<Tensor> {
        match self {
            Weight::Dense(t) => Ok(t.clone()),
            Weight::Adapted(a) => a.effective(),
        }
    }

    pub fn is_adapted(&self) -> bool {
        matches!(self, Weight::Adapted(_))
    }

    /// Collapses an adapter back into a dense weight; dense weights pass
    /// through unchanged.
    pub fn merge(&self) -> Weight {
        match self {
            Weight::Dense(t) => Weight::Dense(t.clone()),
            Weight::Adapted(a) => Weight::Dense(a.merged().requires_grad_(true)),
        }
    }

    /// Named tensors for checkpointing and optimizer wiring.
    pub fn visit(&self, name: &str, f: &mut dyn FnMut(String, Tensor)) {
        match self {
            Weight::Dense(t) => f(name.to_string(), t.clone()),
            Weight::Adapted(a) => {
                f(format!("{name}.base"), a.base.clone());
                f(format!("{name}.lora_a"), a.a.clone());
                f(format!("{name}.lora_b"), a.b.clone());
            }
        }
    }
}

/// Matrices an adapter can target. `FfnW1`/`FfnW2` cover routed group
/// experts and dense FFN sublayers; shared experts always train fully and
/// are never adapted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum LoraTarget {
    AttnQ,
    AttnK,
    AttnV,
    AttnO,
    FfnW1,
    FfnW2,
    LmHead,
}

impl LoraTarget {
    pub fn parse(name: &str) -> Result<LoraTarget> {
        match name {
            "attn_q" => Ok(LoraTarget::AttnQ),
            "attn_k" => Ok(LoraTarget::AttnK),
            "attn_v" => Ok(LoraTarget::AttnV),
            "attn_o" => Ok(LoraTarget::AttnO),
            "ffn_w1" => Ok(LoraTarget::FfnW1),
            "ffn_w2" => Ok(LoraTarget::FfnW2),
            "lm_head" => Ok(LoraTarget::LmHead),
            other => Err(Error::Config(format!("unknown lora target `{other}`"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LoraTarget::AttnQ => "attn_q",
            LoraTarget::AttnK => "attn_k",
            LoraTarget::AttnV => "attn_v",
            LoraTarget::AttnO => "attn_o",
            LoraTarget::FfnW1 => "ffn_w1",
            LoraTarget::FfnW2 => "ffn_w2",
            LoraTarget::LmHead => "lm_head",
        }
    }
}

/// Adapter attachment settings.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraConfig {
    pub rank: usize,
    pub lora_alpha: f64,
    pub targets: Vec<LoraTarget>,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            rank: 8,
            lora_alpha: 16.0,
            targets: vec![
                LoraTarget::AttnQ,
                LoraTarget::AttnK,
                LoraTarget::AttnV,
                LoraTarget::AttnO,
                LoraTarget::FfnW1,
                LoraTarget::FfnW2,
            ],
        }
    }
}

impl LoraConfig {
    pub fn parse_targets(spec: &str) -> Result<Vec<LoraTarget>> {
        let mut targets = Vec::new();
        for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let t = LoraTarget::parse(part)?;
            if !targets.contains(&t) {
                targets.push(t);
            }
        }
        Ok(targets)
    }

    pub fn targets_string(&self) -> String {
        self.targets
            .iter()
            .map(|t| t.name())
            .collect::<Vec<_>>()
            .join(",")
    }
}

fn adapt<R: Rng>(w: &mut Weight, cfg: &LoraConfig, rng: &mut R) -> Result<()> {
    if let Weight::Dense(t) = w {
        *w = Weight::Adapted(LoraAdapter::wrap(t, cfg.rank, cfg.lora_alpha, rng)?);
    }
    Ok(())
}

/// Wraps every targeted matrix in the model with a fresh adapter, freezing
/// its base. Routers, alpha, shared experts, embeddings, norms, biases, and
/// any untargeted matrix keep training fully.
pub fn attach_lora<R: Rng>(
    model: &mut crate::transformer::ModelParams,
    cfg: &LoraConfig,
    rng: &mut R,
) -> Result<()> {
    use crate::transformer::Sublayer;
    if cfg.rank == 0 {
        return Err(Error::Config("lora: rank must be >= 1".into()));
    }
    let has = |t: LoraTarget| cfg.targets.contains(&t);
    for block in &mut model.blocks {
        if has(LoraTarget::AttnQ) {
            adapt(&mut block.attn.wq, cfg, rng)?;
        }
        if has(LoraTarget::AttnK) {
            adapt(&mut block.attn.wk, cfg, rng)?;
        }
        if has(LoraTarget::AttnV) {
            adapt(&mut block.attn.wv, cfg, rng)?;
        }
        if has(LoraTarget::AttnO) {
            adapt(&mut block.attn.wo, cfg, rng)?;
        }
        match &mut block.sublayer {
            Sublayer::Dense(ffn) => {
                if has(LoraTarget::FfnW1) {
                    adapt(&mut ffn.w1, cfg, rng)?;
                }
                if has(LoraTarget::FfnW2) {
                    adapt(&mut ffn.w2, cfg, rng)?;
                }
            }
            Sublayer::Moe(moe) => {
                for group in &mut moe.groups {
                    for expert in &mut group.experts {
                        if has(LoraTarget::FfnW1) {
                            adapt(&mut expert.w1, cfg, rng)?;
                        }
                        if has(LoraTarget::FfnW2) {
                            adapt(&mut expert.w2, cfg, rng)?;
                        }
                    }
                }
                // Shared experts stay fully trainable, never adapted.
            }
        }
    }
    if has(LoraTarget::LmHead) {
        adapt(&mut model.lm_head, cfg, rng)?;
    }
    Ok(())
}

/// Collapses every adapter in the model into dense trainable weights.
pub fn merge_model_adapters(model: &mut crate::transformer::ModelParams) {
    use crate::transformer::Sublayer;
    for block in &mut model.blocks {
        for w in [
            &mut block.attn.wq,
            &mut block.attn.wk,
            &mut block.attn.wv,
            &mut block.attn.wo,
        ] {
            *w = w.merge();
        }
        match &mut block.sublayer {
            Sublayer::Dense(ffn) => {
                ffn.w1 = ffn.w1.merge();
                ffn.w2 = ffn.w2.merge();
            }
            Sublayer::Moe(moe) => {
                for group in &mut moe.groups {
                    for expert in &mut group.experts {
                        expert.w1 = expert.w1.merge();
                        expert.w2 = expert.w2.merge();
                    }
                }
                for shared in &mut moe.shared_experts {
                    shared.w1 = shared.w1.merge();
                    shared.w2 = shared.w2.merge();
                }
            }
        }
    }
    model.lm_head = model.lm_head.merge();
    if let Some((w, _)) = &mut model.regression_head {
        *w = w.merge();
    }
}

/// Adapter parameter count (`A` and `B` tensors only).
pub fn adapter_parameter_count(model: &crate::transformer::ModelParams) -> usize {
    model
        .named_tensors()
        .iter()
        .filter(|(n, _)| n.ends_with(".lora_a") || n.ends_with(".lora_b"))
        .map(|(_, t)| t.numel())
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::backward;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fresh_adapter_leaves_weight_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = Tensor::randn(&[4, 6], 0.5, &mut rng);
        let ad = LoraAdapter::wrap(&w, 2, 4.0, &mut rng).unwrap();
        assert_eq!(ad.effective().unwrap().to_vec(), w.to_vec());
        assert_eq!(ad.merged().to_vec(), w.to_vec());
    }

    #[test]
    fn merge_matches_effective_after_updates() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = Tensor::randn(&[3, 5], 0.5, &mut rng);
        let ad = LoraAdapter::wrap(&w, 2, 4.0, &mut rng).unwrap();
        // Push random values into B to mimic training.
        let bump = Tensor::randn(&[3, 2], 0.3, &mut rng);
        ad.b.set_data(&bump.to_vec());
        let eff = ad.effective().unwrap().to_vec();
        let merged = ad.merged().to_vec();
        for (a, b) in eff.iter().zip(&merged) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_scale_merges_to_base() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = Tensor::randn(&[3, 3], 0.5, &mut rng);
        let mut ad = LoraAdapter::wrap(&w, 2, 4.0, &mut rng).unwrap();
        ad.scale = 0.0;
        let bump = Tensor::randn(&[3, 2], 0.3, &mut rng);
        ad.b.set_data(&bump.to_vec());
        assert_eq!(ad.merged().to_vec(), w.to_vec());
    }

    #[test]
    fn frozen_base_receives_no_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = Tensor::randn(&[4, 4], 0.5, &mut rng);
        let ad = LoraAdapter::wrap(&w, 2, 4.0, &mut rng).unwrap();
        let x = Tensor::randn(&[2, 4], 1.0, &mut rng);
        let loss = x.matmul(&ad.effective().unwrap()).unwrap().gelu().sum();
        backward(&loss).unwrap();
        assert!(ad.base.grad().is_none(), "base must stay frozen");
        assert!(ad.a.grad().is_some());
        assert!(ad.b.grad().is_some());
    }

    fn demo_model(seed: u64) -> crate::transformer::ModelParams {
        use crate::transformer::{ModelConfig, ModelParams};
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ModelParams::init_dense(
            ModelConfig {
                vocab_size: 10,
                d_model: 8,
                n_layers: 2,
                n_heads: 2,
                ffn_hidden: 12,
                max_seq_len: 8,
                init_std: 0.1,
                regression_head: false,
            },
            &mut rng,
        )
        .unwrap()
    }

    #[test]
    fn attach_preserves_forward_and_merge_restores_it() {
        use crate::transformer::{forward, TokenSequence};
        let mut model = demo_model(21);
        let seq = TokenSequence::new(vec![1, 4, 2, 7]).unwrap();
        let before = forward(&model, &seq, None).unwrap().logits.to_vec();

        let mut rng = ChaCha8Rng::seed_from_u64(22);
        attach_lora(&mut model, &LoraConfig::default(), &mut rng).unwrap();
        let after_attach = forward(&model, &seq, None).unwrap().logits.to_vec();
        for (a, b) in before.iter().zip(&after_attach) {
            assert!((a - b).abs() < 1e-12, "attach changed the forward pass");
        }

        // Move the adapters, then assert merged-model equivalence.
        for (name, t) in model.named_tensors() {
            if name.ends_with(".lora_b") {
                let bump = Tensor::randn(t.shape(), 0.05, &mut rng);
                t.set_data(&bump.to_vec());
            }
        }
        let adapted = forward(&model, &seq, None).unwrap().logits.to_vec();
        merge_model_adapters(&mut model);
        assert!(model.named_tensors().iter().all(|(n, _)| !n.contains(".lora_")));
        let merged = forward(&model, &seq, None).unwrap().logits.to_vec();
        for (a, b) in adapted.iter().zip(&merged) {
            assert!((a - b).abs() < 1e-12, "merge changed the forward pass");
        }
    }

    #[test]
    fn attach_reduces_trainable_parameters() {
        let mut model = demo_model(23);
        let full: usize = model
            .trainable_tensors()
            .iter()
            .map(|t| t.numel())
            .sum();
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        attach_lora(&mut model, &LoraConfig { rank: 2, ..LoraConfig::default() }, &mut rng)
            .unwrap();
        let adapted: usize = model
            .trainable_tensors()
            .iter()
            .map(|t| t.numel())
            .sum();
        assert!(adapted < full, "{adapted} !< {full}");
    }

    #[test]
    fn attention_adapters_stay_under_ten_percent_of_model() {
        // Default-size MoE model (d = 64), rank 8 on the attention
        // projections.
        use crate::moe::{build_moe_from_ffn, ExpertFFN, MoEConfig};
        use crate::transformer::{ModelConfig, ModelParams};
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let mut model = ModelParams::init_dense(ModelConfig::default(), &mut rng).unwrap();
        let layers = (0..model.blocks.len())
            .map(|_| {
                let und = ExpertFFN::init(64, 128, 0.02, &mut rng);
                let gen = ExpertFFN::init(64, 128, 0.02, &mut rng);
                build_moe_from_ffn(&und, &gen, &MoEConfig::default(), &mut rng).unwrap()
            })
            .collect();
        model.replace_sublayers_with_moe(layers).unwrap();
        let total = model.parameter_count();
        let cfg = LoraConfig {
            rank: 8,
            lora_alpha: 16.0,
            targets: vec![
                LoraTarget::AttnQ,
                LoraTarget::AttnK,
                LoraTarget::AttnV,
                LoraTarget::AttnO,
            ],
        };
        attach_lora(&mut model, &cfg, &mut rng).unwrap();
        let adapter = adapter_parameter_count(&model);
        assert!(adapter > 0);
        assert!(
            (adapter as f64) < 0.10 * total as f64,
            "adapter {adapter} vs total {total}"
        );
    }

    #[test]
    fn unknown_target_name_is_config_error() {
        assert!(matches!(
            LoraConfig::parse_targets("attn_q,attn_z"),
            Err(Error::Config(_))
        ));
        let t = LoraConfig::parse_targets("attn_q, ffn_w2").unwrap();
        assert_eq!(t, vec![LoraTarget::AttnQ, LoraTarget::FfnW2]);
    }

    #[test]
    fn frozen_bases_get_zero_gradient_model_wide() {
        use crate::transformer::{ar_loss, forward, TokenSequence};
        let mut model = demo_model(26);
        let mut rng = ChaCha8Rng::seed_from_u64(27);
        attach_lora(&mut model, &LoraConfig::default(), &mut rng).unwrap();
        let seq = TokenSequence::new(vec![1, 4, 2, 7]).unwrap();
        let out = forward(&model, &seq, None).unwrap();
        let loss = ar_loss(&out.logits, &[4, 2, 7, 1], &[1, 1, 1, 1]).unwrap();
        backward(&loss).unwrap();
        for (name, t) in model.named_tensors() {
            if name.ends_with(".base") {
                assert!(t.grad().is_none(), "{name} received a gradient");
                assert!(!t.requires_grad());
            }
        }
    }

    #[test]
    fn full_rank_adapter_can_represent_any_delta() {
        // With r = min(m, n), fitting a random target delta by gradient
        // descent drives the representation error to ~0.
        use crate::optim::{AdamW, AdamWConfig};
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let base = Tensor::randn(&[4, 4], 0.5, &mut rng);
        let target = Tensor::randn(&[4, 4], 0.5, &mut rng);
        let ad = LoraAdapter::wrap(&base, 4, 4.0, &mut rng).unwrap();
        let params = [ad.a.clone(), ad.b.clone()];
        let mut opt = AdamW::new(&params, AdamWConfig { lr: 0.05, ..AdamWConfig::default() });
        let steps = 3000u64;
        let mut last = f64::MAX;
        for s in 0..steps {
            opt.set_lr(crate::optim::cosine_lr(s, steps, 0.05));
            params.iter().for_each(|p| p.zero_grad());
            let loss = ad.effective().unwrap().mse(&target).unwrap();
            last = loss.item();
            backward(&loss).unwrap();
            opt.step(&params).unwrap();
        }
        assert!(last < 1e-6, "residual {last}");
    }
}
