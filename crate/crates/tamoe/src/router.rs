//! Hierarchical expert routing: a hard task-aware router that sends each
//! token to one of two task groups, and a dynamic-assignment router that
//! scores and selects top-k experts inside the chosen group.
//!
//! The task router's argmax is non-differentiable by construction; its
//! linear layer is trained exclusively through the group loss against
//! ground-truth task labels. Gate weights over the selected experts are the
//! group softmax scores renormalized to sum to one, which makes the single
//! weight exactly 1.0 when k = 1.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One of the two task-specific expert groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TaskGroup {
    Understanding,
    Generation,
}

impl TaskGroup {
    /// Zero-based index (understanding group first).
    pub fn index(self) -> usize {
        match self {
            TaskGroup::Understanding => 0,
            TaskGroup::Generation => 1,
        }
    }

    /// External 1-based label (understanding = 1, generation = 2).
    pub fn label(self) -> u8 {
        match self {
            TaskGroup::Understanding => 1,
            TaskGroup::Generation => 2,
        }
    }

    pub fn from_label(label: u8) -> Result<TaskGroup> {
        match label {
            1 => Ok(TaskGroup::Understanding),
            2 => Ok(TaskGroup::Generation),
            other => Err(Error::IndexOutOfRange(format!(
                "task group label {other} outside {{1, 2}}"
            ))),
        }
    }

    pub const ALL: [TaskGroup; 2] = [TaskGroup::Understanding, TaskGroup::Generation];
}

/// Linear classifier over token features producing the two group logits.
#[derive(Clone)]
pub struct TaskRouterParams {
    /// `[2, d]` weight; logits are `x . W^T + b`.
    pub weight: Tensor,
    /// `[2]` bias.
    pub bias: Tensor,
}

impl TaskRouterParams {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<TaskRouterParams> {
        if weight.shape().len() != 2 || weight.shape()[0] != 2 {
            return Err(Error::Shape(format!(
                "task router weight must be [2, d], got {:?}",
                weight.shape()
            )));
        }
        if bias.shape() != [2] {
            return Err(Error::Shape(format!(
                "task router bias must be [2], got {:?}",
                bias.shape()
            )));
        }
        Ok(TaskRouterParams { weight, bias })
    }

    pub fn init<R: rand::Rng>(d: usize, std: f64, rng: &mut R) -> TaskRouterParams {
        TaskRouterParams {
            weight: Tensor::randn(&[2, d], std, rng).requires_grad_(true),
            bias: Tensor::zeros(&[2]).requires_grad_(true),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// Per-token hard group choices with the logits that produced them.
///
/// The logits stay on the tape (the group loss differentiates through
/// them); the hard indices are detached.
pub struct GroupAssignment {
    /// Chosen group per token; ties break toward the understanding group.
    pub groups: Vec<TaskGroup>,
    /// `[n, 2]` raw router logits, gradient-tracked.
    pub logits: Tensor,
    /// `[n, 2]` softmax probabilities (rows sum to 1).
    pub probabilities: Tensor,
}

impl GroupAssignment {
    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }
}

/// Group-specific expert scoring matrix (`[e, d]` for e experts).
#[derive(Clone)]
pub struct ExpertScoreMatrix {
    pub weight: Tensor,
}

impl ExpertScoreMatrix {
    pub fn new(weight: Tensor) -> Result<ExpertScoreMatrix> {
        if weight.shape().len() != 2 || weight.shape()[0] == 0 {
            return Err(Error::Shape(format!(
                "expert score matrix must be [e >= 1, d], got {:?}",
                weight.shape()
            )));
        }
        Ok(ExpertScoreMatrix { weight })
    }

    pub fn expert_count(&self) -> usize {
        self.weight.shape()[0]
    }
}

/// Top-k routing outcome inside one group.
pub struct ExpertSelection {
    /// Indices of the k selected experts (largest scores; ties break toward
    /// the lower index).
    pub selected: Vec<usize>,
    /// Renormalized weights over the selected set; sum to 1, and `[1.0]`
    /// exactly when k = 1.
    pub gate_weights: Vec<f64>,
    /// `[e]` full softmax score vector, gradient-tracked.
    pub all_scores: Tensor,
    /// On-tape renormalized gate weights when k > 1 (None for k = 1, where
    /// the weight is the constant 1).
    pub gate: Option<Tensor>,
}

/// Hard task routing of a batch of token features (`[n, d]`).
///
/// Computes `Softmax(Linear(x))` per token and takes the argmax as the
/// group. Ties break toward the understanding group.
pub fn task_route(x: &Tensor, params: &TaskRouterParams) -> Result<GroupAssignment> {
    let d = params.feature_dim();
    if x.shape().len() != 2 || x.shape()[1] != d {
        return Err(Error::Shape(format!(
            "task_route: features {:?} incompatible with router dim {d}",
            x.shape()
        )));
    }
    let logits = x.matmul_nt(&params.weight)?.add_bias(&params.bias)?;
    let probabilities = logits.softmax(1)?;
    let ld = logits.data();
    let groups = (0..x.shape()[0])
        .map(|i| {
            // Argmax with the tie broken toward the lower index.
            if ld[i * 2 + 1] > ld[i * 2] {
                TaskGroup::Generation
            } else {
                TaskGroup::Understanding
            }
        })
        .collect();
    drop(ld);
    Ok(GroupAssignment {
        groups,
        logits,
        probabilities,
    })
}

/// Cross-entropy of router logits against ground-truth group labels,
/// averaged over all tokens and all layers.
///
/// `labels` gives the per-token ground truth (callers broadcast a sample's
/// label over its tokens); `mask` excludes positions (padding) from the
/// average and applies to every layer.
pub fn group_loss(
    assignments: &[GroupAssignment],
    labels: &[TaskGroup],
    mask: &[u8],
) -> Result<Tensor> {
    if assignments.is_empty() {
        return Err(Error::EmptyReduction("group_loss: no layer assignments".into()));
    }
    let targets: Vec<usize> = labels.iter().map(|g| g.index()).collect();
    let mut acc: Option<Tensor> = None;
    for a in assignments {
        if a.len() != labels.len() {
            return Err(Error::Shape(format!(
                "group_loss: layer has {} tokens, labels have {}",
                a.len(),
                labels.len()
            )));
        }
        let ce = a.logits.cross_entropy(&targets, mask)?;
        acc = Some(match acc {
            Some(t) => t.add(&ce)?,
            None => ce,
        });
    }
    Ok(acc.unwrap().scale(1.0 / assignments.len() as f64))
}

/// Dynamic-assignment routing: softmax scores over the group's experts,
/// top-k selection, and Eq.-style renormalization of the selected scores.
///
/// `x` is a single token feature (`[d]` or `[1, d]`).
pub fn dynamic_route(x: &Tensor, scores: &ExpertScoreMatrix, k: usize) -> Result<ExpertSelection> {
    let e = scores.expert_count();
    if k == 0 || k > e {
        return Err(Error::Config(format!(
            "dynamic_route: k = {k} outside 1..={e} experts"
        )));
    }
    let row = match x.shape() {
        [_d] => x.reshape(&[1, x.numel()])?,
        [1, _d] => x.clone(),
        s => {
            return Err(Error::Shape(format!(
                "dynamic_route: expected a single token feature, got {s:?}"
            )))
        }
    };
    if row.shape()[1] != scores.weight.shape()[1] {
        return Err(Error::Shape(format!(
            "dynamic_route: feature {:?} incompatible with score matrix {:?}",
            x.shape(),
            scores.weight.shape()
        )));
    }
    let all_scores = row.matmul_nt(&scores.weight)?.reshape(&[e])?.softmax(0)?;

    // Top-k by score, ties toward the lower expert index. Detached.
    let sd = all_scores.to_vec();
    let mut order: Vec<usize> = (0..e).collect();
    order.sort_by(|&a, &b| sd[b].partial_cmp(&sd[a]).unwrap().then(a.cmp(&b)));
    let selected: Vec<usize> = order[..k].to_vec();

    let (gate_weights, gate) = if k == 1 {
        (vec![1.0], None)
    } else {
        let total: f64 = selected.iter().map(|&i| sd[i]).sum();
        let weights: Vec<f64> = selected.iter().map(|&i| sd[i] / total).collect();
        let picked = all_scores.gather_elems(&selected)?;
        let gate = picked.div_by(&picked.sum())?;
        (weights, Some(gate))
    };

    Ok(ExpertSelection {
        selected,
        gate_weights,
        all_scores,
        gate,
    })
}
