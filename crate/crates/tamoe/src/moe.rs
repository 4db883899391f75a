//! Task-aware mixture-of-experts layer: two task-specific expert groups
//! behind hierarchical routing, a weighted top-k expert combination, and an
//! always-on shared expert scaled by a learnable alpha.
//!
//! The layer also supports two degenerate configurations used by the
//! ablation harness: a flat pool (all experts in one group, no task router,
//! the model-A baseline) and shared-only (zero group experts, output is
//! `alpha * SharedExpert(x)`).

use rand::Rng;

use crate::error::{Error, Result};
use crate::lora::Weight;
use crate::router::{
    dynamic_route, task_route, ExpertScoreMatrix, GroupAssignment, TaskGroup, TaskRouterParams,
};
use crate::tensor::{stack_rows, Tensor};

/// Two-layer GELU feed-forward block with matching input/output width
/// (residual-compatible).
pub struct ExpertFFN {
    pub w1: Weight,
    pub b1: Tensor,
    pub w2: Weight,
    pub b2: Tensor,
}

impl ExpertFFN {
    pub fn init<R: Rng>(d: usize, hidden: usize, std: f64, rng: &mut R) -> ExpertFFN {
        ExpertFFN {
            w1: Weight::Dense(Tensor::randn(&[d, hidden], std, rng).requires_grad_(true)),
            b1: Tensor::zeros(&[hidden]).requires_grad_(true),
            w2: Weight::Dense(Tensor::randn(&[hidden, d], std, rng).requires_grad_(true)),
            b2: Tensor::zeros(&[d]).requires_grad_(true),
        }
    }

    /// (input width, hidden width).
    pub fn dims(&self) -> (usize, usize) {
        (self.w1.shape()[0], self.w1.shape()[1])
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = x
            .matmul(&self.w1.effective()?)?
            .add_bias(&self.b1)?
            .gelu();
        h.matmul(&self.w2.effective()?)?.add_bias(&self.b2)
    }

    /// Fresh trainable tensors with identical values. Adapters are merged
    /// into dense weights on the way.
    pub fn deep_copy(&self) -> ExpertFFN {
        let dense = |w: &Weight| match w.merge() {
            Weight::Dense(t) => Weight::Dense(t.detach().requires_grad_(true)),
            Weight::Adapted(_) => unreachable!("merge returns dense"),
        };
        ExpertFFN {
            w1: dense(&self.w1),
            b1: self.b1.detach().requires_grad_(true),
            w2: dense(&self.w2),
            b2: self.b2.detach().requires_grad_(true),
        }
    }

    /// Copy with i.i.d. Gaussian noise of sigma = `frac` x per-matrix RMS
    /// added to every tensor (symmetry breaking between sibling experts).
    pub fn perturbed_copy<R: Rng>(&self, frac: f64, rng: &mut R) -> ExpertFFN {
        let copy = self.deep_copy();
        for t in [&copy.dense_w1(), &copy.b1, &copy.dense_w2(), &copy.b2] {
            let rms = {
                let d = t.data();
                (d.iter().map(|v| v * v).sum::<f64>() / d.len() as f64).sqrt()
            };
            if rms == 0.0 {
                continue;
            }
            let noise = Tensor::randn(t.shape(), frac * rms, rng);
            let nd = noise.to_vec();
            t.update_data(|d| {
                for (v, n) in d.iter_mut().zip(&nd) {
                    *v += n;
                }
            });
        }
        copy
    }

    /// Elementwise mean of two width-compatible FFNs.
    pub fn mean_of(a: &ExpertFFN, b: &ExpertFFN) -> Result<ExpertFFN> {
        if a.dims() != b.dims() {
            return Err(Error::Shape(format!(
                "mean_of: FFN dims {:?} vs {:?}",
                a.dims(),
                b.dims()
            )));
        }
        let (ac, bc) = (a.deep_copy(), b.deep_copy());
        let avg = |x: &Tensor, y: &Tensor| {
            let yd = y.to_vec();
            x.update_data(|d| {
                for (v, w) in d.iter_mut().zip(&yd) {
                    *v = 0.5 * (*v + *w);
                }
            });
        };
        avg(&ac.dense_w1(), &bc.dense_w1());
        avg(&ac.b1, &bc.b1);
        avg(&ac.dense_w2(), &bc.dense_w2());
        avg(&ac.b2, &bc.b2);
        Ok(ac)
    }

    fn dense_w1(&self) -> Tensor {
        match &self.w1 {
            Weight::Dense(t) => t.clone(),
            Weight::Adapted(a) => a.base.clone(),
        }
    }

    fn dense_w2(&self) -> Tensor {
        match &self.w2 {
            Weight::Dense(t) => t.clone(),
            Weight::Adapted(a) => a.base.clone(),
        }
    }

    pub fn visit_tensors(&self, prefix: &str, f: &mut dyn FnMut(String, Tensor)) {
        self.w1.visit(&format!("{prefix}.w1"), f);
        f(format!("{prefix}.b1"), self.b1.clone());
        self.w2.visit(&format!("{prefix}.w2"), f);
        f(format!("{prefix}.b2"), self.b2.clone());
    }
}

/// One task group: a scoring matrix plus its experts.
pub struct ExpertGroup {
    pub scores: ExpertScoreMatrix,
    pub experts: Vec<ExpertFFN>,
}

/// Static layer configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MoEConfig {
    /// Experts per task group (e). Zero selects the shared-only layout.
    pub experts_per_group: usize,
    /// Always-active shared experts (0 disables the fusion term).
    pub shared_experts: usize,
    /// Top-k selection inside the routed group.
    pub top_k: usize,
    /// Initial value of the learnable fusion scale alpha.
    pub alpha_init: f64,
    /// Multiply expert outputs by their raw softmax score instead of the
    /// renormalized gate (restores a score-matrix gradient path when k = 1).
    pub gate_full_softmax: bool,
    /// Route tokens by the ground-truth label during training instead of the
    /// router's argmax (teacher forcing; logits still feed the group loss).
    pub force_group_by_label: bool,
    /// Collapse both groups into one flat top-k pool with no task router.
    pub flat_pool: bool,
}

impl Default for MoEConfig {
    fn default() -> Self {
        MoEConfig {
            experts_per_group: 2,
            shared_experts: 1,
            top_k: 1,
            alpha_init: 0.2,
            gate_full_softmax: false,
            force_group_by_label: false,
            flat_pool: false,
        }
    }
}

impl MoEConfig {
    pub fn validate(&self) -> Result<()> {
        if self.experts_per_group == 0 && self.shared_experts == 0 {
            return Err(Error::Config(
                "MoE layer with 0 group experts and 0 shared experts has no compute path".into(),
            ));
        }
        if self.experts_per_group > 0 {
            let pool = if self.flat_pool {
                2 * self.experts_per_group
            } else {
                self.experts_per_group
            };
            if self.top_k == 0 || self.top_k > pool {
                return Err(Error::Config(format!(
                    "top_k = {} outside 1..={pool}",
                    self.top_k
                )));
            }
        }
        if self.flat_pool && self.force_group_by_label {
            return Err(Error::Config(
                "flat pool has no task router to force".into(),
            ));
        }
        Ok(())
    }
}

/// One task-aware MoE layer.
pub struct MoEParams {
    /// None in flat-pool and shared-only layouts.
    pub task_router: Option<TaskRouterParams>,
    /// Two task groups, or a single flat pool, or empty (shared-only).
    pub groups: Vec<ExpertGroup>,
    pub shared_experts: Vec<ExpertFFN>,
    /// Learnable `[1]` fusion scale.
    pub alpha: Tensor,
    pub config: MoEConfig,
}

impl MoEParams {
    /// Feature width d.
    pub fn dim(&self) -> usize {
        if let Some(g) = self.groups.first() {
            g.experts[0].dims().0
        } else {
            self.shared_experts[0].dims().0
        }
    }

    /// Total routed experts across groups.
    pub fn routed_expert_count(&self) -> usize {
        self.groups.iter().map(|g| g.experts.len()).sum()
    }

    pub fn visit_tensors(&self, prefix: &str, f: &mut dyn FnMut(String, Tensor)) {
        if let Some(r) = &self.task_router {
            f(format!("{prefix}.task_router.w"), r.weight.clone());
            f(format!("{prefix}.task_router.b"), r.bias.clone());
        }
        for (gi, g) in self.groups.iter().enumerate() {
            f(format!("{prefix}.group{gi}.scores"), g.scores.weight.clone());
            for (ei, ex) in g.experts.iter().enumerate() {
                ex.visit_tensors(&format!("{prefix}.group{gi}.expert{ei}"), f);
            }
        }
        for (si, s) in self.shared_experts.iter().enumerate() {
            s.visit_tensors(&format!("{prefix}.shared{si}"), f);
        }
        f(format!("{prefix}.alpha"), self.alpha.clone());
    }
}

/// Per-token routing outcome for one layer, kept for loss wiring and load
/// analytics. Expert indices are global: group-0 experts come first, then
/// group-1 (flat pools are already global).
#[derive(Debug, Clone)]
pub struct RoutingRecord {
    pub layer: usize,
    pub tokens: Vec<TokenRouting>,
    /// Ground-truth task of the sample these tokens came from, when known
    /// (used to filter load statistics by task).
    pub sample_group: Option<TaskGroup>,
}

#[derive(Debug, Clone)]
pub struct TokenRouting {
    /// Routed task group (None in flat-pool / shared-only layouts).
    pub group: Option<TaskGroup>,
    /// Global indices of the selected experts.
    pub experts: Vec<usize>,
    /// Renormalized gate weights (sum to 1; exactly `[1.0]` for k = 1).
    pub gate_weights: Vec<f64>,
}

/// Output of one MoE layer forward pass.
pub struct MoEForward {
    pub output: Tensor,
    pub record: RoutingRecord,
    /// Task-router assignment (logits on tape) when a task router exists.
    pub assignment: Option<GroupAssignment>,
}

/// Builds the layer from two stage-1 specialized FFNs.
///
/// Group 0 experts start as copies of the understanding FFN and group 1 of
/// the generation FFN; copies beyond the first get Gaussian symmetry-breaking
/// noise (sigma = 0.01 x per-matrix RMS). The shared expert starts at the
/// elementwise mean of both FFNs. Routers are Gaussian(0, 0.02).
pub fn build_moe_from_ffn<R: Rng>(
    und_ffn: &ExpertFFN,
    gen_ffn: &ExpertFFN,
    cfg: &MoEConfig,
    rng: &mut R,
) -> Result<MoEParams> {
    cfg.validate()?;
    if und_ffn.dims() != gen_ffn.dims() {
        return Err(Error::Shape(format!(
            "build_moe_from_ffn: FFN dims {:?} vs {:?}",
            und_ffn.dims(),
            gen_ffn.dims()
        )));
    }
    let (d, _h) = und_ffn.dims();
    let e = cfg.experts_per_group;

    let expert_stack = |seed_ffn: &ExpertFFN, rng: &mut R| -> Vec<ExpertFFN> {
        let mut v = Vec::with_capacity(e);
        for i in 0..e {
            if i == 0 {
                v.push(seed_ffn.deep_copy());
            } else {
                v.push(seed_ffn.perturbed_copy(0.01, rng));
            }
        }
        v
    };

    let mut groups = Vec::new();
    let mut task_router = None;
    if e > 0 {
        if cfg.flat_pool {
            let mut experts = expert_stack(und_ffn, rng);
            experts.extend(expert_stack(gen_ffn, rng));
            let scores =
                ExpertScoreMatrix::new(Tensor::randn(&[2 * e, d], 0.02, rng).requires_grad_(true))?;
            groups.push(ExpertGroup { scores, experts });
        } else {
            task_router = Some(TaskRouterParams::init(d, 0.02, rng));
            for seed_ffn in [und_ffn, gen_ffn] {
                let experts = expert_stack(seed_ffn, rng);
                let scores = ExpertScoreMatrix::new(
                    Tensor::randn(&[e, d], 0.02, rng).requires_grad_(true),
                )?;
                groups.push(ExpertGroup { scores, experts });
            }
        }
    }

    let mut shared_experts = Vec::with_capacity(cfg.shared_experts);
    if cfg.shared_experts > 0 {
        let mean = ExpertFFN::mean_of(und_ffn, gen_ffn)?;
        for i in 0..cfg.shared_experts {
            if i == 0 {
                shared_experts.push(mean.deep_copy());
            } else {
                shared_experts.push(mean.perturbed_copy(0.01, rng));
            }
        }
    }

    Ok(MoEParams {
        task_router,
        groups,
        shared_experts,
        alpha: Tensor::scalar(cfg.alpha_init).requires_grad_(true),
        config: *cfg,
    })
}

/// Builds the layer with fresh Gaussian experts (the "pure" initialization
/// of the single-stage baseline).
pub fn build_moe_fresh<R: Rng>(
    d: usize,
    hidden: usize,
    init_std: f64,
    cfg: &MoEConfig,
    rng: &mut R,
) -> Result<MoEParams> {
    let und = ExpertFFN::init(d, hidden, init_std, rng);
    let gen = ExpertFFN::init(d, hidden, init_std, rng);
    let mut params = build_moe_from_ffn(&und, &gen, cfg, rng)?;
    // Fresh init means every expert (and the shared one) is its own draw,
    // not a copy; rebuild them independently.
    for g in &mut params.groups {
        for ex in &mut g.experts {
            *ex = ExpertFFN::init(d, hidden, init_std, rng);
        }
    }
    for s in &mut params.shared_experts {
        *s = ExpertFFN::init(d, hidden, init_std, rng);
    }
    Ok(params)
}

/// Forward pass of the layer over `[n, d]` token features.
///
/// Per token: hard task routing (optionally forced to `forced_group` during
/// teacher-forced training), top-k dynamic routing inside the group, the
/// gate-weighted expert combination, then `+ alpha * SharedExpert(x)`.
pub fn moe_forward(
    x: &Tensor,
    params: &MoEParams,
    layer: usize,
    forced_group: Option<TaskGroup>,
) -> Result<MoEForward> {
    let d = params.dim();
    if x.shape().len() != 2 || x.shape()[1] != d {
        return Err(Error::Shape(format!(
            "moe_forward: features {:?} incompatible with layer width {d}",
            x.shape()
        )));
    }
    let n = x.shape()[0];
    let cfg = &params.config;
    let e = cfg.experts_per_group;

    // Hard routing decisions (detached); logits stay on tape for the loss.
    let mut assignment = None;
    let token_groups: Vec<usize> = if params.groups.is_empty() {
        vec![usize::MAX; n]
    } else if let Some(router) = &params.task_router {
        let a = task_route(x, router)?;
        let groups: Vec<usize> = match (cfg.force_group_by_label, forced_group) {
            (true, Some(g)) => vec![g.index(); n],
            _ => a.groups.iter().map(|g| g.index()).collect(),
        };
        assignment = Some(a);
        groups
    } else {
        vec![0; n] // flat pool
    };

    // Dynamic routing per token, batched scoring happens inside the router
    // call; collect per-token selections.
    let mut selections: Vec<Option<crate::router::ExpertSelection>> = Vec::with_capacity(n);
    for (i, &g) in token_groups.iter().enumerate() {
        if g == usize::MAX {
            selections.push(None);
            continue;
        }
        let xi = x.row(i)?;
        let sel = dynamic_route(&xi, &params.groups[g].scores, cfg.top_k)?;
        selections.push(Some(sel));
    }

    // Group tokens by (group, expert) and run each expert once over its
    // token batch; iteration order is fixed for determinism.
    let mut expert_tokens: Vec<Vec<usize>> = params
        .groups
        .iter()
        .flat_map(|g| g.experts.iter().map(|_| Vec::new()))
        .collect();
    let expert_offset = |g: usize| -> usize {
        params.groups[..g].iter().map(|gr| gr.experts.len()).sum()
    };
    for (i, sel) in selections.iter().enumerate() {
        if let Some(sel) = sel {
            for &within in &sel.selected {
                expert_tokens[expert_offset(token_groups[i]) + within].push(i);
            }
        }
    }
    let mut expert_outputs: Vec<Option<(Vec<usize>, Tensor)>> = Vec::new();
    {
        let mut flat_idx = 0;
        for g in &params.groups {
            for ex in &g.experts {
                let toks = &expert_tokens[flat_idx];
                if toks.is_empty() {
                    expert_outputs.push(None);
                } else {
                    let inp = x.gather_rows(toks)?;
                    expert_outputs.push(Some((toks.clone(), ex.forward(&inp)?)));
                }
                flat_idx += 1;
            }
        }
    }

    // Reassemble per-token routed outputs in original order.
    let mut token_records = Vec::with_capacity(n);
    let routed = if params.groups.is_empty() {
        None
    } else {
        let mut rows: Vec<Tensor> = Vec::with_capacity(n);
        for (i, sel) in selections.iter().enumerate() {
            let sel = sel.as_ref().expect("selection exists when groups exist");
            let g = token_groups[i];
            let base = expert_offset(g);
            let mut combined: Option<Tensor> = None;
            for (rank, &within) in sel.selected.iter().enumerate() {
                let (toks, out) = expert_outputs[base + within]
                    .as_ref()
                    .expect("expert with routed tokens has outputs");
                let pos = toks.iter().position(|&t| t == i).expect("token routed here");
                let row = out.row(pos)?;
                let weighted = if cfg.gate_full_softmax {
                    let score = sel.all_scores.gather_elems(&[within])?;
                    row.scale_by(&score)?
                } else if cfg.top_k == 1 {
                    row // gate weight is exactly 1
                } else {
                    let gate = sel.gate.as_ref().expect("gate tensor for k > 1");
                    row.scale_by(&gate.gather_elems(&[rank])?.reshape(&[1])?)?
                };
                combined = Some(match combined {
                    Some(c) => c.add(&weighted)?,
                    None => weighted,
                });
            }
            rows.push(combined.expect("k >= 1"));
            token_records.push(TokenRouting {
                group: if params.task_router.is_some() {
                    Some(TaskGroup::ALL[g])
                } else {
                    None
                },
                experts: sel.selected.iter().map(|&w| base + w).collect(),
                gate_weights: sel.gate_weights.clone(),
            });
        }
        Some(stack_rows(&rows)?)
    };
    if params.groups.is_empty() {
        for _ in 0..n {
            token_records.push(TokenRouting {
                group: None,
                experts: Vec::new(),
                gate_weights: Vec::new(),
            });
        }
    }

    // Shared-expert fusion: y = h_expert + alpha * sum(SharedExpert_i(x)).
    let shared = if params.shared_experts.is_empty() {
        None
    } else {
        let mut acc: Option<Tensor> = None;
        for s in &params.shared_experts {
            let out = s.forward(x)?;
            acc = Some(match acc {
                Some(a) => a.add(&out)?,
                None => out,
            });
        }
        Some(acc.unwrap().scale_by(&params.alpha)?)
    };

    let output = match (routed, shared) {
        (Some(r), Some(s)) => r.add(&s)?,
        (Some(r), None) => r,
        (None, Some(s)) => s,
        (None, None) => unreachable!("validated config has a compute path"),
    };

    let _ = e;
    Ok(MoEForward {
        output,
        record: RoutingRecord {
            layer,
            tokens: token_records,
            sample_group: forced_group,
        },
        assignment,
    })
}

/// Per-layer activation fraction per expert, aggregated over records.
#[derive(Debug, Clone)]
pub struct ExpertLoadStats {
    /// `fractions[layer][expert]`; each layer row sums to 1.
    pub fractions: Vec<Vec<f64>>,
    /// Routing events (token x selected expert) counted per layer.
    pub events_per_layer: Vec<usize>,
    pub num_experts: usize,
}

/// Aggregates routing records into per-layer expert load fractions.
///
/// `task_filter` keeps only records whose `sample_group` matches. The shared
/// expert never appears: it is always active.
pub fn expert_load_stats(
    records: &[RoutingRecord],
    num_experts: usize,
    task_filter: Option<TaskGroup>,
) -> Result<ExpertLoadStats> {
    let kept: Vec<&RoutingRecord> = records
        .iter()
        .filter(|r| task_filter.is_none() || r.sample_group == task_filter)
        .collect();
    if kept.is_empty() {
        return Err(Error::EmptyReduction(
            "expert_load_stats: no routing records after filtering".into(),
        ));
    }
    let layers = 1 + kept.iter().map(|r| r.layer).max().unwrap();
    let mut counts = vec![vec![0usize; num_experts]; layers];
    for r in &kept {
        for t in &r.tokens {
            for &ex in &t.experts {
                if ex >= num_experts {
                    return Err(Error::IndexOutOfRange(format!(
                        "expert index {ex} outside {num_experts} experts"
                    )));
                }
                counts[r.layer][ex] += 1;
            }
        }
    }
    let mut fractions = Vec::with_capacity(layers);
    let mut events = Vec::with_capacity(layers);
    for layer_counts in &counts {
        let total: usize = layer_counts.iter().sum();
        if total == 0 {
            return Err(Error::EmptyReduction(
                "expert_load_stats: a layer has no routing events".into(),
            ));
        }
        fractions.push(
            layer_counts
                .iter()
                .map(|&c| c as f64 / total as f64)
                .collect(),
        );
        events.push(total);
    }
    Ok(ExpertLoadStats {
        fractions,
        events_per_layer: events,
        num_experts,
    })
}

impl ExpertLoadStats {
    /// CSV with columns layer, expert_id, load_fraction.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,expert_id,load_fraction\n");
        for (layer, row) in self.fractions.iter().enumerate() {
            for (ex, frac) in row.iter().enumerate() {
                out.push_str(&format!("{layer},{ex},{frac}\n"));
            }
        }
        out
    }

    /// Plain-text bars for quick inspection.
    pub fn render_bars(&self) -> String {
        let mut out = String::new();
        for (layer, row) in self.fractions.iter().enumerate() {
            for (ex, frac) in row.iter().enumerate() {
                let filled = (frac * 40.0).round() as usize;
                out.push_str(&format!(
                    "layer {layer} expert {ex} |{}{}| {:.3}\n",
                    "#".repeat(filled),
                    " ".repeat(40 - filled.min(40)),
                    frac
                ));
            }
        }
        out
    }

    /// Combined load of experts `lo..hi` (exclusive) per layer.
    pub fn combined_load(&self, lo: usize, hi: usize) -> Vec<f64> {
        self.fractions
            .iter()
            .map(|row| row[lo..hi.min(row.len())].iter().sum())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{backward, grad_check};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{x} vs {y}");
        }
    }

    fn build_default(seed: u64, cfg: MoEConfig) -> MoEParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let und = ExpertFFN::init(4, 6, 0.4, &mut rng);
        let gen = ExpertFFN::init(4, 6, 0.4, &mut rng);
        build_moe_from_ffn(&und, &gen, &cfg, &mut rng).unwrap()
    }

    #[test]
    fn alpha_zero_keeps_only_routed_expert_output() {
        let params = build_default(
            1,
            MoEConfig {
                alpha_init: 0.0,
                ..MoEConfig::default()
            },
        );
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let fwd = moe_forward(&x, &params, 0, None).unwrap();
        // Recompute each token through its routed expert alone.
        for (i, tok) in fwd.record.tokens.iter().enumerate() {
            assert_eq!(tok.experts.len(), 1);
            let gidx = tok.group.unwrap().index();
            let within = tok.experts[0] - if gidx == 1 { params.groups[0].experts.len() } else { 0 };
            let xi = x.row(i).unwrap();
            let direct = params.groups[gidx].experts[within].forward(&xi).unwrap();
            let got = fwd.output.row(i).unwrap();
            assert_eq!(got.to_vec(), direct.to_vec(), "token {i}");
        }
    }

    #[test]
    fn identical_experts_make_routing_irrelevant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let seed_ffn = ExpertFFN::init(4, 6, 0.4, &mut rng);
        let cfg = MoEConfig::default();
        let mut params = build_moe_from_ffn(&seed_ffn, &seed_ffn, &cfg, &mut rng).unwrap();
        // Kill the symmetry-breaking noise: every expert identical.
        for g in &mut params.groups {
            for ex in &mut g.experts {
                *ex = seed_ffn.deep_copy();
            }
        }
        params.shared_experts = vec![seed_ffn.deep_copy()];

        let x = Tensor::randn(&[5, 4], 1.0, &mut rng);
        let fwd = moe_forward(&x, &params, 0, None).unwrap();
        // y must equal (1 + alpha) * Expert(x) regardless of routing.
        let expect = seed_ffn
            .forward(&x)
            .unwrap()
            .scale(1.0 + params.alpha.item());
        close(&fwd.output.to_vec(), &expect.to_vec(), 1e-12);

        // And perturbing the routers must not change the output.
        let mut rng2 = ChaCha8Rng::seed_from_u64(99);
        params.task_router = Some(TaskRouterParams::init(4, 5.0, &mut rng2));
        for g in &mut params.groups {
            g.scores = ExpertScoreMatrix::new(
                Tensor::randn(&[g.experts.len(), 4], 5.0, &mut rng2).requires_grad_(true),
            )
            .unwrap();
        }
        let fwd2 = moe_forward(&x, &params, 0, None).unwrap();
        close(&fwd2.output.to_vec(), &expect.to_vec(), 1e-12);
    }

    #[test]
    fn forward_matches_unrolled_equation_oracle() {
        // n=3, d=4, e=2, k=1: hand-evaluate the full layer with plain loops.
        let cfg = MoEConfig::default();
        let params = build_default(4, cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let fwd = moe_forward(&x, &params, 0, None).unwrap();

        let xd = x.to_vec();
        let router = params.task_router.as_ref().unwrap();
        let (rw, rb) = (router.weight.to_vec(), router.bias.to_vec());
        let alpha = params.alpha.item();
        let d = 4;

        let ffn_eval = |ffn: &ExpertFFN, xi: &[f64]| -> Vec<f64> {
            let w1 = ffn.w1.effective().unwrap().to_vec();
            let b1 = ffn.b1.to_vec();
            let w2 = ffn.w2.effective().unwrap().to_vec();
            let b2 = ffn.b2.to_vec();
            let h_dim = b1.len();
            let mut h = vec![0.0; h_dim];
            for j in 0..h_dim {
                let mut s = b1[j];
                for t in 0..d {
                    s += xi[t] * w1[t * h_dim + j];
                }
                let u = 0.7978845608028654 * (s + 0.044715 * s * s * s);
                h[j] = 0.5 * s * (1.0 + u.tanh());
            }
            let mut y = vec![0.0; d];
            for j in 0..d {
                let mut s = b2[j];
                for t in 0..h_dim {
                    s += h[t] * w2[t * d + j];
                }
                y[j] = s;
            }
            y
        };

        for i in 0..3 {
            let xi = &xd[i * d..(i + 1) * d];
            // Eq. (1): argmax over softmax(Wx + b) == argmax over logits.
            let mut logits = [rb[0], rb[1]];
            for g in 0..2 {
                for t in 0..d {
                    logits[g] += xi[t] * rw[g * d + t];
                }
            }
            let g = if logits[1] > logits[0] { 1 } else { 0 };
            // Eq. (2): softmax scores inside the group, k = 1 picks the max.
            let sw = params.groups[g].scores.weight.to_vec();
            let mut s = [0.0, 0.0];
            for e in 0..2 {
                for t in 0..d {
                    s[e] += xi[t] * sw[e * d + t];
                }
            }
            let chosen = if s[1] > s[0] { 1 } else { 0 };
            // Eq. (3) with k = 1: weight is exactly 1.
            let routed = ffn_eval(&params.groups[g].experts[chosen], xi);
            // Eq. (4): + alpha * shared.
            let shared = ffn_eval(&params.shared_experts[0], xi);
            let expect: Vec<f64> = routed
                .iter()
                .zip(&shared)
                .map(|(r, sh)| r + alpha * sh)
                .collect();
            let got = fwd.output.row(i).unwrap().to_vec();
            close(&got, &expect, 1e-12);
            assert_eq!(fwd.record.tokens[i].group.unwrap().index(), g);
            assert_eq!(fwd.record.tokens[i].experts[0], g * 2 + chosen);
        }
    }

    #[test]
    fn build_copies_stage1_ffns_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let und = ExpertFFN::init(4, 6, 0.4, &mut rng);
        let gen = ExpertFFN::init(4, 6, 0.4, &mut rng);
        let cfg = MoEConfig {
            experts_per_group: 1,
            ..MoEConfig::default()
        };
        let params = build_moe_from_ffn(&und, &gen, &cfg, &mut rng).unwrap();
        // e = 1: single expert per group is a bit-exact copy.
        assert_eq!(
            params.groups[0].experts[0].w1.effective().unwrap().to_vec(),
            und.w1.effective().unwrap().to_vec()
        );
        assert_eq!(
            params.groups[1].experts[0].w2.effective().unwrap().to_vec(),
            gen.w2.effective().unwrap().to_vec()
        );
        // Shared expert W1 is the elementwise mean.
        let (u, g) = (
            und.w1.effective().unwrap().to_vec(),
            gen.w1.effective().unwrap().to_vec(),
        );
        let mean: Vec<f64> = u.iter().zip(&g).map(|(a, b)| 0.5 * (a + b)).collect();
        close(
            &params.shared_experts[0].w1.effective().unwrap().to_vec(),
            &mean,
            1e-15,
        );
        // Alpha defaults to 0.2.
        assert_eq!(params.alpha.item(), 0.2);
    }

    #[test]
    fn sibling_experts_get_symmetry_breaking_noise() {
        let params = build_default(7, MoEConfig::default());
        let first = params.groups[0].experts[0].w1.effective().unwrap().to_vec();
        let second = params.groups[0].experts[1].w1.effective().unwrap().to_vec();
        assert_ne!(first, second);
        // Noise is small: 1% of RMS.
        let rms = (first.iter().map(|v| v * v).sum::<f64>() / first.len() as f64).sqrt();
        for (a, b) in first.iter().zip(&second) {
            assert!((a - b).abs() < 0.1 * rms, "noise too large");
        }
    }

    #[test]
    fn alpha_linearity_in_output() {
        let params = build_default(8, MoEConfig::default());
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::randn(&[4, 4], 1.0, &mut rng);

        let y_base = moe_forward(&x, &params, 0, None).unwrap().output.to_vec();
        let a_val = params.alpha.item();
        params.alpha.set_data(&[0.0]);
        let y_zero = moe_forward(&x, &params, 0, None).unwrap().output.to_vec();
        params.alpha.set_data(&[a_val]);

        // y(alpha) - y(0) == alpha * SharedExpert(x)
        let shared = params.shared_experts[0].forward(&x).unwrap().to_vec();
        for i in 0..y_base.len() {
            assert!((y_base[i] - y_zero[i] - a_val * shared[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn alpha_gradient_matches_finite_differences() {
        let params = build_default(10, MoEConfig::default());
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let err = grad_check(
            |inp| {
                // Rebuild the layer with alpha taken from the checked input.
                let probe = MoEParams {
                    task_router: params.task_router.clone(),
                    groups: params
                        .groups
                        .iter()
                        .map(|g| ExpertGroup {
                            scores: g.scores.clone(),
                            experts: g.experts.iter().map(|e| e.deep_copy()).collect(),
                        })
                        .collect(),
                    shared_experts: params.shared_experts.iter().map(|e| e.deep_copy()).collect(),
                    alpha: inp[0].clone(),
                    config: params.config,
                };
                let fwd = moe_forward(&x, &probe, 0, None)?;
                Ok(fwd.output.gelu().sum())
            },
            &[params.alpha.clone()],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "alpha grad err {err}");
    }

    #[test]
    fn k1_default_gives_scores_zero_gradient() {
        let params = build_default(12, MoEConfig::default());
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = Tensor::randn(&[4, 4], 1.0, &mut rng);
        let fwd = moe_forward(&x, &params, 0, None).unwrap();
        let loss = fwd.output.gelu().sum();
        backward(&loss).unwrap();
        for g in &params.groups {
            assert!(
                g.scores.weight.grad().is_none(),
                "score matrix must get no gradient with k = 1 and literal gating"
            );
        }
        // The task loss also never reaches the router through the hard index.
        let r = params.task_router.as_ref().unwrap();
        assert!(r.weight.grad().is_none());
        assert!(r.bias.grad().is_none());
    }

    #[test]
    fn k2_routes_gradient_into_scores() {
        let params = build_default(
            14,
            MoEConfig {
                top_k: 2,
                ..MoEConfig::default()
            },
        );
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let x = Tensor::randn(&[4, 4], 1.0, &mut rng);
        let fwd = moe_forward(&x, &params, 0, None).unwrap();
        let loss = fwd.output.gelu().sum();
        backward(&loss).unwrap();
        let any_grad = params
            .groups
            .iter()
            .any(|g| g.scores.weight.grad().map_or(false, |gr| gr.iter().any(|v| *v != 0.0)));
        assert!(any_grad, "k = 2 gates must backprop into score matrices");
    }

    #[test]
    fn gate_full_softmax_restores_score_gradient_at_k1() {
        let params = build_default(
            16,
            MoEConfig {
                gate_full_softmax: true,
                ..MoEConfig::default()
            },
        );
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let x = Tensor::randn(&[4, 4], 1.0, &mut rng);
        let fwd = moe_forward(&x, &params, 0, None).unwrap();
        let loss = fwd.output.gelu().sum();
        backward(&loss).unwrap();
        let any_grad = params
            .groups
            .iter()
            .any(|g| g.scores.weight.grad().map_or(false, |gr| gr.iter().any(|v| *v != 0.0)));
        assert!(any_grad);
    }

    #[test]
    fn flat_pool_single_expert_reduces_to_plain_ffn() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let ffn = ExpertFFN::init(4, 6, 0.4, &mut rng);
        let params = MoEParams {
            task_router: None,
            groups: vec![ExpertGroup {
                scores: ExpertScoreMatrix::new(
                    Tensor::randn(&[1, 4], 0.02, &mut rng).requires_grad_(true),
                )
                .unwrap(),
                experts: vec![ffn.deep_copy()],
            }],
            shared_experts: Vec::new(),
            alpha: Tensor::scalar(0.2).requires_grad_(true),
            config: MoEConfig {
                experts_per_group: 1,
                shared_experts: 0,
                flat_pool: true,
                ..MoEConfig::default()
            },
        };
        let x = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let fwd = moe_forward(&x, &params, 0, None).unwrap();
        let direct = ffn.forward(&x).unwrap();
        close(&fwd.output.to_vec(), &direct.to_vec(), 1e-12);
        assert!(fwd.assignment.is_none());
    }

    #[test]
    fn shared_only_layout_scales_shared_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let shared = ExpertFFN::init(4, 6, 0.4, &mut rng);
        let params = MoEParams {
            task_router: None,
            groups: Vec::new(),
            shared_experts: vec![shared.deep_copy()],
            alpha: Tensor::scalar(0.7).requires_grad_(true),
            config: MoEConfig {
                experts_per_group: 0,
                shared_experts: 1,
                ..MoEConfig::default()
            },
        };
        let x = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let fwd = moe_forward(&x, &params, 0, None).unwrap();
        let expect = shared.forward(&x).unwrap().scale(0.7);
        close(&fwd.output.to_vec(), &expect.to_vec(), 1e-12);
        assert!(fwd.record.tokens.iter().all(|t| t.experts.is_empty()));
    }

    #[test]
    fn empty_layer_config_is_rejected() {
        let cfg = MoEConfig {
            experts_per_group: 0,
            shared_experts: 0,
            ..MoEConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn forced_group_overrides_router_choice() {
        let params = build_default(
            20,
            MoEConfig {
                force_group_by_label: true,
                ..MoEConfig::default()
            },
        );
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = Tensor::randn(&[6, 4], 1.0, &mut rng);
        let fwd = moe_forward(&x, &params, 0, Some(TaskGroup::Generation)).unwrap();
        assert!(fwd
            .record
            .tokens
            .iter()
            .all(|t| t.group == Some(TaskGroup::Generation)));
        // Logits still exist for the group loss.
        assert!(fwd.assignment.is_some());
    }

    #[test]
    fn load_stats_degenerate_and_normalized() {
        // All tokens routed to expert 0.
        let rec = RoutingRecord {
            layer: 0,
            tokens: (0..5)
                .map(|_| TokenRouting {
                    group: Some(TaskGroup::Understanding),
                    experts: vec![0],
                    gate_weights: vec![1.0],
                })
                .collect(),
            sample_group: Some(TaskGroup::Understanding),
        };
        let stats = expert_load_stats(&[rec], 4, None).unwrap();
        assert_eq!(stats.fractions[0], vec![1.0, 0.0, 0.0, 0.0]);

        // Random-ish mixed records still normalize per layer.
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let params = build_default(22, MoEConfig::default());
        let x = Tensor::randn(&[16, 4], 2.0, &mut rng);
        let recs: Vec<RoutingRecord> = (0..3)
            .map(|l| moe_forward(&x, &params, l, None).unwrap().record)
            .collect();
        let stats = expert_load_stats(&recs, 4, None).unwrap();
        for row in &stats.fractions {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn load_stats_empty_records_error() {
        assert!(matches!(
            expert_load_stats(&[], 4, None),
            Err(Error::EmptyReduction(_))
        ));
        let rec = RoutingRecord {
            layer: 0,
            tokens: Vec::new(),
            sample_group: Some(TaskGroup::Generation),
        };
        assert!(matches!(
            expert_load_stats(&[rec], 4, Some(TaskGroup::Understanding)),
            Err(Error::EmptyReduction(_))
        ));
    }

    #[test]
    fn load_csv_layout() {
        let rec = RoutingRecord {
            layer: 0,
            tokens: vec![TokenRouting {
                group: Some(TaskGroup::Understanding),
                experts: vec![1],
                gate_weights: vec![1.0],
            }],
            sample_group: None,
        };
        let stats = expert_load_stats(&[rec], 2, None).unwrap();
        let csv = stats.to_csv();
        assert!(csv.starts_with("layer,expert_id,load_fraction\n"));
        assert!(csv.contains("0,1,1\n"));
    }
}
