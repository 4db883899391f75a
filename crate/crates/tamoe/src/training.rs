//! Training loops: the composite loss, the two-stage strategy, and
//! convergence accounting.
//!
//! Stage 1 trains one dense model per task with attention, embeddings, and
//! heads frozen (FFNs only). Stage 2 rebuilds every FFN sublayer as a
//! task-aware MoE layer seeded from the stage-1 FFN stacks, attaches
//! low-rank adapters, and fine-tunes on a mixed dual-task stream with the
//! weighted task losses plus the router's group loss.
//!
//! All loops are single-threaded and deterministic: identical seed and
//! config produce bit-identical histories.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::lora::{attach_lora, LoraConfig};
use crate::moe::{build_moe_from_ffn, build_moe_fresh, ExpertFFN, MoEConfig};
use crate::optim::{cosine_lr, AdamW, AdamWConfig};
use crate::router::{group_loss, TaskGroup};
use crate::tasks::{eval_task_accuracy, TaskConfig, TaskMetrics, TaskSample, VocabSpec};
use crate::tensor::{backward, Tensor};
use crate::transformer::{forward, ModelParams, Sublayer, TokenSequence};

/// Optimization settings for one stage or experiment run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainingConfig {
    pub stage: u8,
    pub batch_size: usize,
    pub lr: f64,
    pub betas: (f64, f64),
    pub weight_decay: f64,
    pub steps: u64,
    pub lambda_und: f64,
    pub lambda_gen: f64,
    pub gamma: f64,
    pub seed: u64,
}

impl TrainingConfig {
    /// Stage-1 defaults: batch 2, lr 1e-4, AdamW(0.9, 0.95), cosine, weight
    /// decay 0, 200 steps.
    pub fn stage1_paper() -> TrainingConfig {
        TrainingConfig {
            stage: 1,
            batch_size: 2,
            lr: 1e-4,
            betas: (0.9, 0.95),
            weight_decay: 0.0,
            steps: 200,
            lambda_und: 0.3,
            lambda_gen: 0.3,
            gamma: 0.1,
            seed: 0,
        }
    }

    /// Stage-2 defaults: batch 2, lr 2e-5, 400 steps.
    pub fn stage2_paper() -> TrainingConfig {
        TrainingConfig {
            stage: 2,
            lr: 2e-5,
            steps: 400,
            ..TrainingConfig::stage1_paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda_und < 0.0 || self.lambda_gen < 0.0 || self.gamma < 0.0 {
            return Err(Error::Config(
                "loss weights lambda_und, lambda_gen, gamma must be >= 0".into(),
            ));
        }
        if self.steps == 0 {
            return Err(Error::Config("steps must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }

    fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.betas.0,
            beta2: self.betas.1,
            eps: 1e-8,
            weight_decay: self.weight_decay,
        }
    }
}

/// Weighted composite of the per-task losses and the group loss. A loss
/// absent from the batch contributes zero.
pub fn total_loss(
    l_und: Option<&Tensor>,
    l_gen: Option<&Tensor>,
    l_group: Option<&Tensor>,
    cfg: &TrainingConfig,
) -> Result<Tensor> {
    cfg.validate()?;
    let mut acc: Option<Tensor> = None;
    for (loss, weight) in [
        (l_und, cfg.lambda_und),
        (l_gen, cfg.lambda_gen),
        (l_group, cfg.gamma),
    ] {
        let Some(loss) = loss else { continue };
        if !loss.is_scalar() {
            return Err(Error::Contract("total_loss expects scalar losses".into()));
        }
        let term = loss.scale(weight);
        acc = Some(match acc {
            Some(a) => a.add(&term)?,
            None => term,
        });
    }
    acc.ok_or_else(|| Error::Contract("total_loss with no loss terms".into()))
}

/// One optimizer step's scalar record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    pub l_und: Option<f64>,
    pub l_gen: Option<f64>,
    pub l_group: Option<f64>,
    pub l_total: f64,
}

/// Periodic joint evaluation attached to an epoch boundary.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalRecord {
    pub epoch: usize,
    pub step: u64,
    pub metrics: TaskMetrics,
}

/// Per-step losses plus periodic evaluations.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingHistory {
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
    pub steps_per_epoch: u64,
}

impl TrainingHistory {
    /// CSV with columns step, lr, l_und, l_gen, l_group, l_total.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,lr,l_und,l_gen,l_group,l_total\n");
        let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for s in &self.steps {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                s.step,
                s.lr,
                cell(s.l_und),
                cell(s.l_gen),
                cell(s.l_group),
                s.l_total
            ));
        }
        out
    }

    pub fn final_total_loss(&self) -> Option<f64> {
        self.steps.last().map(|s| s.l_total)
    }

    /// Mean task loss over the last `n` recorded steps that have it.
    pub fn recent_task_loss(&self, task: TaskGroup, n: usize) -> Option<f64> {
        let vals: Vec<f64> = self
            .steps
            .iter()
            .rev()
            .filter_map(|s| match task {
                TaskGroup::Understanding => s.l_und,
                TaskGroup::Generation => s.l_gen,
            })
            .take(n)
            .collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    }
}

/// First epoch whose joint accuracy (min of the two task accuracies)
/// reaches `threshold` and stays there for two consecutive evaluations.
pub fn epochs_to_convergence(history: &TrainingHistory, threshold: f64) -> Option<usize> {
    let joint: Vec<(usize, f64)> = history
        .evals
        .iter()
        .filter_map(|e| e.metrics.joint_accuracy().map(|j| (e.epoch, j)))
        .collect();
    for w in joint.windows(2) {
        if w[0].1 >= threshold && w[1].1 >= threshold {
            return Some(w[0].0);
        }
    }
    None
}

/// What a training run optimizes and which parameters move.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TrainMode {
    /// Single-task expert specialization: dense model, FFN tensors only,
    /// next-token cross-entropy.
    Stage1(TaskGroup),
    /// Single-task dense baseline, all parameters trainable.
    SingleDense(TaskGroup),
    /// Mixed dual-task dense baseline with the weighted task losses.
    JointDense,
    /// Joint dense training with MSE-mode generation (regression head);
    /// the loss-dynamics experiment.
    JointDenseMse,
    /// MoE fine-tuning with the full composite loss.
    Stage2,
}

impl TrainMode {
    fn single_task(&self) -> Option<TaskGroup> {
        match self {
            TrainMode::Stage1(t) | TrainMode::SingleDense(t) => Some(*t),
            _ => None,
        }
    }
}

/// Data pools for one run (evaluation uses `val`).
pub struct TrainData<'a> {
    pub train_und: &'a [TaskSample],
    pub train_gen: &'a [TaskSample],
    pub val: &'a [TaskSample],
    pub task_cfg: TaskConfig,
}

/// Evaluation cadence; `every_epochs == 0` disables periodic evaluation.
#[derive(Debug, Clone, Copy)]
pub struct EvalSettings {
    pub every_epochs: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings { every_epochs: 0 }
    }
}

/// Cycling index stream with a seeded reshuffle on every wrap.
struct PoolIter {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl PoolIter {
    fn new(len: usize, seed: u64) -> PoolIter {
        let mut it = PoolIter {
            order: (0..len).collect(),
            pos: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        it.shuffle();
        it
    }

    fn shuffle(&mut self) {
        for i in (1..self.order.len()).rev() {
            let j = self.rng.gen_range(0..=i);
            self.order.swap(i, j);
        }
    }

    fn next(&mut self) -> usize {
        if self.pos >= self.order.len() {
            self.shuffle();
            self.pos = 0;
        }
        let i = self.order[self.pos];
        self.pos += 1;
        i
    }
}

fn mean_of(losses: Vec<Tensor>) -> Result<Option<Tensor>> {
    if losses.is_empty() {
        return Ok(None);
    }
    let n = losses.len() as f64;
    let mut acc = losses[0].clone();
    for l in &losses[1..] {
        acc = acc.add(l)?;
    }
    Ok(Some(acc.scale(1.0 / n)))
}

/// Per-sample losses of one forward pass.
fn sample_losses(
    model: &ModelParams,
    sample: &TaskSample,
    mode: TrainMode,
    vocab: &VocabSpec,
) -> Result<(Tensor, Option<Tensor>)> {
    let group = sample.group()?;
    let seq = TokenSequence::new(sample.full_sequence())?;
    let out = forward(model, &seq, Some(group))?;
    let (targets, mask) = sample.ar_targets_and_mask(vocab);

    let task_loss = if matches!(mode, TrainMode::JointDenseMse) && group == TaskGroup::Generation {
        // MSE mode: the regression head predicts the normalized answer
        // values at the same shifted positions the LM head would.
        let reg = out.regression.as_ref().ok_or_else(|| {
            Error::Contract("MSE-mode training requires a regression head".into())
        })?;
        let positions: Vec<usize> = mask
            .iter()
            .enumerate()
            .filter(|(_, &m)| m != 0)
            .map(|(i, _)| i)
            .collect();
        let values = sample.regression.as_ref().ok_or_else(|| {
            Error::Contract("generation sample lacks a regression target".into())
        })?;
        let target =
            Tensor::from_vec(&[positions.len(), 1], values.clone(), false)?;
        reg.gather_rows(&positions)?.mse(&target)?
    } else {
        out.logits.cross_entropy(&targets, &mask)?
    };

    // Router supervision: the sample's label broadcast over its tokens.
    let grp_loss = if out.assignments.is_empty() {
        None
    } else {
        let labels = vec![group; seq.len()];
        let token_mask = vec![1u8; seq.len()];
        Some(group_loss(&out.assignments, &labels, &token_mask)?)
    };
    Ok((task_loss, grp_loss))
}

fn ffn_only_tensors(model: &ModelParams) -> Result<Vec<Tensor>> {
    let mut any_dense = false;
    for b in &model.blocks {
        match b.sublayer {
            Sublayer::Dense(_) => any_dense = true,
            Sublayer::Moe(_) => {
                return Err(Error::Contract(
                    "stage 1 requires dense FFN sublayers".into(),
                ))
            }
        }
    }
    if !any_dense {
        return Err(Error::Contract("model has no FFN sublayers".into()));
    }
    Ok(model
        .named_tensors()
        .into_iter()
        .filter(|(n, t)| n.contains(".ffn.") && t.requires_grad())
        .map(|(_, t)| t)
        .collect())
}

/// Core deterministic training loop shared by every mode.
pub fn train(
    model: &ModelParams,
    mode: TrainMode,
    data: &TrainData,
    tcfg: &TrainingConfig,
    eval: &EvalSettings,
    vocab: &VocabSpec,
) -> Result<TrainingHistory> {
    tcfg.validate()?;
    if matches!(mode, TrainMode::Stage2) && !model.has_moe_sublayers() {
        return Err(Error::Contract("stage 2 requires MoE sublayers".into()));
    }
    let trainables = match mode {
        TrainMode::Stage1(_) => ffn_only_tensors(model)?,
        _ => model.trainable_tensors(),
    };
    if trainables.is_empty() {
        return Err(Error::Contract("no trainable parameters".into()));
    }
    let mut opt = AdamW::new(&trainables, tcfg.adamw());

    let pool_size: usize = match mode.single_task() {
        Some(TaskGroup::Understanding) => data.train_und.len(),
        Some(TaskGroup::Generation) => data.train_gen.len(),
        None => data.train_und.len() + data.train_gen.len(),
    };
    if pool_size == 0 {
        return Err(Error::EmptyReduction("empty training pool".into()));
    }
    let steps_per_epoch = (pool_size as u64).div_ceil(tcfg.batch_size as u64).max(1);

    let mut und_iter = PoolIter::new(data.train_und.len().max(1), tcfg.seed.wrapping_add(101));
    let mut gen_iter = PoolIter::new(data.train_gen.len().max(1), tcfg.seed.wrapping_add(202));
    let mut coin = ChaCha8Rng::seed_from_u64(tcfg.seed.wrapping_add(303));

    let mut history = TrainingHistory {
        steps_per_epoch,
        ..TrainingHistory::default()
    };

    for step in 0..tcfg.steps {
        let lr = cosine_lr(step, tcfg.steps, tcfg.lr);
        opt.set_lr(lr);
        for t in &trainables {
            t.zero_grad();
        }

        // Assemble the batch; mixed modes draw the task per slot.
        let mut batch: Vec<&TaskSample> = Vec::with_capacity(tcfg.batch_size);
        for _ in 0..tcfg.batch_size {
            let task = match mode.single_task() {
                Some(t) => t,
                None => {
                    if coin.gen::<f64>() < data.task_cfg.understanding_probability {
                        TaskGroup::Understanding
                    } else {
                        TaskGroup::Generation
                    }
                }
            };
            let sample = match task {
                TaskGroup::Understanding => &data.train_und[und_iter.next()],
                TaskGroup::Generation => &data.train_gen[gen_iter.next()],
            };
            batch.push(sample);
        }

        let mut und_losses = Vec::new();
        let mut gen_losses = Vec::new();
        let mut group_losses = Vec::new();
        for sample in &batch {
            let (task_loss, grp) = sample_losses(model, sample, mode, vocab)?;
            match sample.group()? {
                TaskGroup::Understanding => und_losses.push(task_loss),
                TaskGroup::Generation => gen_losses.push(task_loss),
            }
            if tcfg.gamma > 0.0 && matches!(mode, TrainMode::Stage2) {
                if let Some(g) = grp {
                    group_losses.push(g);
                }
            }
        }
        let l_und = mean_of(und_losses)?;
        let l_gen = mean_of(gen_losses)?;
        let l_group = mean_of(group_losses)?;

        let total = match mode {
            // Single-task runs optimize the plain task objective.
            TrainMode::Stage1(t) | TrainMode::SingleDense(t) => match t {
                TaskGroup::Understanding => l_und.clone().expect("single-task batch"),
                TaskGroup::Generation => l_gen.clone().expect("single-task batch"),
            },
            _ => total_loss(l_und.as_ref(), l_gen.as_ref(), l_group.as_ref(), tcfg)?,
        };
        let total_val = total.item();
        if !total_val.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss {total_val} at step {step}"
            )));
        }

        backward(&total)?;
        for t in &trainables {
            t.ensure_grad();
        }
        opt.step(&trainables)?;

        history.steps.push(StepRecord {
            step,
            lr,
            l_und: l_und.map(|t| t.item()),
            l_gen: l_gen.map(|t| t.item()),
            l_group: l_group.map(|t| t.item()),
            l_total: total_val,
        });

        if eval.every_epochs > 0 {
            let boundary = steps_per_epoch * eval.every_epochs as u64;
            if (step + 1) % boundary == 0 {
                let epoch = ((step + 1) / steps_per_epoch) as usize;
                let metrics = eval_task_accuracy(model, data.val)?;
                history.evals.push(EvalRecord {
                    epoch,
                    step: step + 1,
                    metrics,
                });
            }
        }
    }
    Ok(history)
}

/// Stage 1: specialize FFNs on a single task with everything else frozen.
/// Returns the trained per-layer FFN stack and the history.
pub fn train_stage1(
    model: &ModelParams,
    task: TaskGroup,
    data: &TrainData,
    tcfg: &TrainingConfig,
    eval: &EvalSettings,
    vocab: &VocabSpec,
) -> Result<(Vec<ExpertFFN>, TrainingHistory)> {
    let history = train(model, TrainMode::Stage1(task), data, tcfg, eval, vocab)?;
    Ok((model.dense_ffn_stack()?, history))
}

/// How stage-2 experts are initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExpertInit {
    /// From the stage-1 FFN stacks.
    FromStage1,
    /// Fresh Gaussian experts ("pure", the single-stage baseline).
    Pure,
}

/// Stage-2 assembly settings.
pub struct Stage2Setup {
    pub moe: MoEConfig,
    pub lora: LoraConfig,
    pub expert_init: ExpertInit,
    pub init_seed: u64,
}

/// Builds the MoE model: a deep copy of the skeleton with every FFN
/// sublayer replaced by a task-aware MoE layer, then adapters attached.
pub fn assemble_stage2(
    skeleton: &ModelParams,
    und_ffns: &[ExpertFFN],
    gen_ffns: &[ExpertFFN],
    setup: &Stage2Setup,
) -> Result<ModelParams> {
    let n_layers = skeleton.blocks.len();
    if setup.expert_init == ExpertInit::FromStage1
        && (und_ffns.len() != n_layers || gen_ffns.len() != n_layers)
    {
        return Err(Error::Contract(format!(
            "stage-1 stacks have {}/{} layers, model has {n_layers}",
            und_ffns.len(),
            gen_ffns.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(setup.init_seed.wrapping_add(404));
    let mut model = skeleton.deep_copy();
    let mut layers = Vec::with_capacity(n_layers);
    for i in 0..n_layers {
        let layer = match setup.expert_init {
            ExpertInit::FromStage1 => {
                build_moe_from_ffn(&und_ffns[i], &gen_ffns[i], &setup.moe, &mut rng)?
            }
            ExpertInit::Pure => build_moe_fresh(
                model.config.d_model,
                model.config.ffn_hidden,
                model.config.init_std,
                &setup.moe,
                &mut rng,
            )?,
        };
        layers.push(layer);
    }
    model.replace_sublayers_with_moe(layers)?;
    attach_lora(&mut model, &setup.lora, &mut rng)?;
    Ok(model)
}

/// Stage 2 end to end: assemble, then fine-tune on the mixed stream.
pub fn train_stage2(
    skeleton: &ModelParams,
    und_ffns: &[ExpertFFN],
    gen_ffns: &[ExpertFFN],
    data: &TrainData,
    setup: &Stage2Setup,
    tcfg: &TrainingConfig,
    eval: &EvalSettings,
    vocab: &VocabSpec,
) -> Result<(ModelParams, TrainingHistory)> {
    let model = assemble_stage2(skeleton, und_ffns, gen_ffns, setup)?;
    let history = train(&model, TrainMode::Stage2, data, tcfg, eval, vocab)?;
    Ok((model, history))
}
