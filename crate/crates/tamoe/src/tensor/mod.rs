//! Dense float64 tensors with reverse-mode automatic differentiation.
//!
//! Tensors store row-major flat data with an explicit shape (rank 1 or 2 in
//! practice). Every differentiable op records its inputs and a backward rule
//! on the tensor itself; [`backward`] traces the DAG from a scalar loss into
//! a [`ComputationTape`] (topological order) and runs the rules in reverse,
//! accumulating gradients across fan-out.
//!
//! Broadcasting is deliberately restricted to scalar-with-tensor and
//! same-shape; anything richer goes through a dedicated op (`add_bias`,
//! `gather_rows`, ...) with its own backward rule.

mod ops;

pub mod gradcheck;

pub use gradcheck::grad_check;
pub use ops::{concat_cols, stack_rows};

use std::cell::{Ref, RefCell};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static NO_GRAD: std::cell::Cell<bool> = const { std::cell::Cell::new(false) };
}

/// Runs `f` with gradient recording disabled on this thread (evaluation and
/// decoding paths); forward values are unaffected.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    let prev = NO_GRAD.with(|c| c.replace(true));
    let out = f();
    NO_GRAD.with(|c| c.set(prev));
    out
}

fn grad_enabled() -> bool {
    NO_GRAD.with(|c| !c.get())
}

type BackwardFn = Box<dyn Fn(&Tensor)>;

struct Inner {
    id: u64,
    shape: Vec<usize>,
    /// Mutated only by optimizer updates on leaves, never by forward ops.
    data: RefCell<Vec<f64>>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
}

/// Dense n-dimensional float64 array, optionally tracked for gradients.
///
/// Cloning is cheap (reference-counted); the underlying storage is shared.
pub struct Tensor {
    inner: Rc<Inner>,
}

impl Clone for Tensor {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .field("data", &self.inner.data.borrow())
            .finish()
    }
}

impl Tensor {
    fn new_inner(
        shape: Vec<usize>,
        data: Vec<f64>,
        requires_grad: bool,
        parents: Vec<Tensor>,
        backward: Option<BackwardFn>,
    ) -> Tensor {
        debug_assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape/data length mismatch"
        );
        debug_assert!(
            data.iter().all(|v| v.is_finite()),
            "non-finite value produced by a forward op"
        );
        Tensor {
            inner: Rc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RefCell::new(data),
                requires_grad,
                grad: RefCell::new(None),
                parents,
                backward,
            }),
        }
    }

    /// Leaf tensor from a flat row-major buffer.
    pub fn from_vec(shape: &[usize], data: Vec<f64>, requires_grad: bool) -> Result<Tensor> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Shape(format!(
                "from_vec: shape {:?} implies {} elements, got {}",
                shape,
                shape.iter().product::<usize>(),
                data.len()
            )));
        }
        Ok(Tensor::new_inner(shape.to_vec(), data, requires_grad, Vec::new(), None))
    }

    /// New op result; `requires_grad` and the recorded graph follow the parents.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Tensor {
        if grad_enabled() && parents.iter().any(|p| p.requires_grad()) {
            Tensor::new_inner(shape, data, true, parents, Some(backward))
        } else {
            // Detached region: keep no references so the subgraph can drop.
            Tensor::new_inner(shape, data, false, Vec::new(), None)
        }
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::new_inner(
            shape.to_vec(),
            vec![0.0; shape.iter().product()],
            false,
            Vec::new(),
            None,
        )
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        Tensor::new_inner(
            shape.to_vec(),
            vec![value; shape.iter().product()],
            false,
            Vec::new(),
            None,
        )
    }

    /// Shape-`[1]` scalar.
    pub fn scalar(value: f64) -> Tensor {
        Tensor::new_inner(vec![1], vec![value], false, Vec::new(), None)
    }

    /// Gaussian(0, std) leaf, sampled with Box-Muller so only a uniform
    /// source is needed.
    pub fn randn<R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Tensor {
        let n = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        while data.len() < n {
            let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = rng.gen::<f64>();
            let r = (-2.0 * u1.ln()).sqrt();
            let theta = 2.0 * std::f64::consts::PI * u2;
            data.push(r * theta.cos() * std);
            if data.len() < n {
                data.push(r * theta.sin() * std);
            }
        }
        Tensor::new_inner(shape.to_vec(), data, false, Vec::new(), None)
    }

    /// Marks a leaf as trainable. Only meaningful on leaves; op results
    /// already inherit the flag from their parents.
    pub fn requires_grad_(self, flag: bool) -> Tensor {
        Tensor::new_inner(
            self.inner.shape.clone(),
            self.inner.data.borrow().clone(),
            flag,
            Vec::new(),
            None,
        )
    }

    /// Copy of the values as a fresh non-tracked leaf.
    pub fn detach(&self) -> Tensor {
        Tensor::new_inner(
            self.inner.shape.clone(),
            self.inner.data.borrow().clone(),
            false,
            Vec::new(),
            None,
        )
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.data.borrow().len()
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    /// Rows of a rank-2 tensor (rank-1 tensors count as a single row).
    pub fn rows(&self) -> usize {
        match self.inner.shape.len() {
            2 => self.inner.shape[0],
            _ => 1,
        }
    }

    /// Columns of a rank-2 tensor, or the length of a rank-1 tensor.
    pub fn cols_len(&self) -> usize {
        match self.inner.shape.len() {
            2 => self.inner.shape[1],
            1 => self.inner.shape[0],
            _ => self.numel(),
        }
    }

    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.inner.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.data.borrow().clone()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert!(self.is_scalar(), "item() on non-scalar tensor");
        self.inner.data.borrow()[0]
    }

    /// Overwrites leaf data in place (optimizer updates). Length must match.
    pub fn set_data(&self, values: &[f64]) {
        let mut d = self.inner.data.borrow_mut();
        assert_eq!(d.len(), values.len(), "set_data length mismatch");
        d.copy_from_slice(values);
    }

    /// Applies `f` to the stored data in place (optimizer updates).
    pub fn update_data(&self, f: impl FnOnce(&mut [f64])) {
        f(&mut self.inner.data.borrow_mut());
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Seeds an all-zero gradient if none is present (so optimizers can
    /// require populated gradients even for parameters a loss never touches).
    pub fn ensure_grad(&self) {
        if !self.inner.requires_grad {
            return;
        }
        let mut slot = self.inner.grad.borrow_mut();
        if slot.is_none() {
            *slot = Some(vec![0.0; self.numel()]);
        }
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    /// Same underlying storage.
    pub fn same_tensor(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    /// Adds `delta` into this tensor's gradient (allocating zeros first if
    /// absent). No-op for non-tracked tensors.
    pub(crate) fn accumulate_grad(&self, delta: &[f64]) {
        if !self.inner.requires_grad {
            return;
        }
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(delta) {
                    *a += *b;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }

    /// Runs `f` with a mutable, zero-initialized gradient buffer for in-place
    /// accumulation. Skips entirely when gradients are not tracked.
    pub(crate) fn with_grad_mut(&self, f: impl FnOnce(&mut [f64])) {
        if !self.inner.requires_grad {
            return;
        }
        let mut slot = self.inner.grad.borrow_mut();
        let g = slot.get_or_insert_with(|| vec![0.0; self.numel()]);
        f(g);
    }

    /// Gradient buffer of the output while running a backward rule.
    pub(crate) fn grad_ref(&self) -> Ref<'_, Option<Vec<f64>>> {
        self.inner.grad.borrow()
    }
}

/// Recorded forward graph in topological order (every node's inputs precede
/// it), traced backward from a root.
pub struct ComputationTape {
    nodes: Vec<Tensor>,
}

impl ComputationTape {
    /// Collects every tensor reachable from `root` through recorded parents,
    /// in topological order.
    pub fn trace(root: &Tensor) -> ComputationTape {
        let mut nodes = Vec::new();
        let mut visited = std::collections::HashSet::new();
        // Iterative post-order DFS.
        enum Step {
            Enter(Tensor),
            Exit(Tensor),
        }
        let mut stack = vec![Step::Enter(root.clone())];
        while let Some(step) = stack.pop() {
            match step {
                Step::Enter(t) => {
                    if !visited.insert(t.id()) {
                        continue;
                    }
                    stack.push(Step::Exit(t.clone()));
                    for p in &t.inner.parents {
                        stack.push(Step::Enter(p.clone()));
                    }
                }
                Step::Exit(t) => nodes.push(t),
            }
        }
        ComputationTape { nodes }
    }

    pub fn nodes(&self) -> &[Tensor] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// True when every node's parents appear earlier in the list.
    pub fn is_topologically_ordered(&self) -> bool {
        let mut seen = std::collections::HashSet::new();
        for t in &self.nodes {
            for p in &t.inner.parents {
                if !seen.contains(&p.id()) {
                    return false;
                }
            }
            seen.insert(t.id());
        }
        true
    }
}

/// Reverse-mode gradient accumulation from a scalar loss.
///
/// Seeds the loss gradient with 1, then walks the traced tape in reverse
/// topological order running each recorded backward rule. Gradients sum
/// across fan-out; tensors with `requires_grad == false` are skipped.
pub fn backward(loss: &Tensor) -> Result<()> {
    if !loss.is_scalar() {
        return Err(Error::Contract(format!(
            "backward requires a scalar loss, got shape {:?}",
            loss.shape()
        )));
    }
    if !loss.requires_grad() {
        return Err(Error::Contract(
            "backward on a tensor with no gradient-tracked ancestors".into(),
        ));
    }
    let tape = ComputationTape::trace(loss);
    loss.accumulate_grad(&[1.0]);
    for node in tape.nodes().iter().rev() {
        if node.inner.backward.is_none() {
            continue;
        }
        // A node never reached by any downstream gradient contributes nothing.
        if node.inner.grad.borrow().is_none() {
            continue;
        }
        if let Some(rule) = &node.inner.backward {
            rule(node);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_length_mismatch() {
        let err = Tensor::from_vec(&[2, 3], vec![1.0; 5], false);
        assert!(matches!(err, Err(Error::Shape(_))));
    }

    #[test]
    fn scalar_has_one_element() {
        let s = Tensor::scalar(4.5);
        assert!(s.is_scalar());
        assert_eq!(s.item(), 4.5);
    }

    #[test]
    fn product_rule_gradient() {
        // d(x*y)/dx at (2,3) is 3.
        let x = Tensor::from_vec(&[1], vec![2.0], true).unwrap();
        let y = Tensor::from_vec(&[1], vec![3.0], true).unwrap();
        let z = x.mul(&y).unwrap();
        backward(&z).unwrap();
        assert_eq!(x.grad().unwrap()[0], 3.0);
        assert_eq!(y.grad().unwrap()[0], 2.0);
    }

    #[test]
    fn fan_out_gradients_accumulate() {
        // z = x + x  =>  dz/dx = 2
        let x = Tensor::from_vec(&[1], vec![1.5], true).unwrap();
        let z = x.add(&x).unwrap();
        backward(&z).unwrap();
        assert_eq!(x.grad().unwrap()[0], 2.0);
    }

    #[test]
    fn shared_subexpression_matches_expanded_tree() {
        // y = (x*x) + (x*x) via a shared node vs. two independent products.
        let x = Tensor::from_vec(&[1], vec![1.7], true).unwrap();
        let sq = x.mul(&x).unwrap();
        let shared = sq.add(&sq).unwrap();
        backward(&shared).unwrap();
        let g_shared = x.grad().unwrap()[0];

        let x2 = Tensor::from_vec(&[1], vec![1.7], true).unwrap();
        let a = x2.mul(&x2).unwrap();
        let b = x2.mul(&x2).unwrap();
        let expanded = a.add(&b).unwrap();
        backward(&expanded).unwrap();
        let g_expanded = x2.grad().unwrap()[0];

        assert!((g_shared - g_expanded).abs() < 1e-15);
        assert!((g_shared - 4.0 * 1.7).abs() < 1e-12);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let x = Tensor::from_vec(&[2], vec![1.0, 2.0], true).unwrap();
        let y = x.scale(2.0);
        assert!(matches!(backward(&y), Err(Error::Contract(_))));
    }

    #[test]
    fn tape_is_topologically_ordered() {
        let x = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0], true).unwrap();
        let y = x.gelu();
        let z = y.matmul(&x).unwrap();
        let s = z.sum();
        let tape = ComputationTape::trace(&s);
        assert!(tape.is_topologically_ordered());
        assert!(tape.len() >= 4);
    }

    #[test]
    fn detached_branch_gets_no_gradient() {
        let x = Tensor::from_vec(&[1], vec![2.0], true).unwrap();
        let d = x.detach();
        let y = d.mul(&d).unwrap();
        assert!(!y.requires_grad());
        let z = x.mul(&x).unwrap();
        backward(&z).unwrap();
        assert!(d.grad().is_none());
    }

    #[test]
    fn randn_is_seed_deterministic() {
        use rand::SeedableRng;
        let mut r1 = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let mut r2 = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let a = Tensor::randn(&[3, 4], 0.02, &mut r1);
        let b = Tensor::randn(&[3, 4], 0.02, &mut r2);
        assert_eq!(a.to_vec(), b.to_vec());
    }
}
