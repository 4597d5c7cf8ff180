use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use crate::error::{Result, TensorError};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static NO_GRAD: Cell<bool> = const { Cell::new(false) };
}

/// Runs `f` without recording any backward closures on this thread.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Reset(bool);
    impl Drop for Reset {
        fn drop(&mut self) {
            NO_GRAD.with(|c| c.set(self.0));
        }
    }
    let prev = NO_GRAD.with(|c| c.replace(true));
    let _reset = Reset(prev);
    f()
}

pub fn grad_enabled() -> bool {
    !NO_GRAD.with(|c| c.get())
}

/// Vector-Jacobian product of one recorded op. Receives the op's output and
/// the incoming gradient, returns one optional gradient per input (`None`
/// for inputs that do not require grad).
pub(crate) type BackwardFn =
    Box<dyn Fn(&Tensor, &[f64]) -> Vec<Option<Vec<f64>>> + Send + Sync>;

pub(crate) struct Op {
    pub(crate) name: &'static str,
    pub(crate) inputs: Vec<Tensor>,
    pub(crate) backward: BackwardFn,
}

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<f64>>>,
    op: Option<Op>,
}

/// Immutable dense row-major f64 tensor and node of the autodiff graph.
///
/// Cloning is cheap (reference counted). Node ids increase monotonically,
/// so reverse id order is a valid topological order for backward.
#[derive(Clone)]
pub struct Tensor {
    inner: Arc<Inner>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<f64> = self.inner.data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .field("data[..8]", &preview)
            .finish()
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn build(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, op: Option<Op>) -> Tensor {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor {
            inner: Arc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data,
                requires_grad,
                grad: Mutex::new(None),
                op,
            }),
        }
    }

    /// Leaf tensor. Fails when `data.len()` does not match the shape.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        if numel(shape) != data.len() {
            return Err(TensorError::dim(
                "new",
                format!("shape {:?} needs {} values, got {}", shape, numel(shape), data.len()),
            ));
        }
        Ok(Tensor::build(shape.to_vec(), data, false, None))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::build(shape.to_vec(), vec![0.0; numel(shape)], false, None)
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        Tensor::build(shape.to_vec(), vec![value; numel(shape)], false, None)
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::build(vec![], vec![value], false, None)
    }

    /// Same data as a new leaf that tracks gradients.
    pub fn requires_grad(self) -> Tensor {
        self.leaf_with_grad(true)
    }

    /// Same data as a new leaf, cut from any graph.
    pub fn detach(&self) -> Tensor {
        Tensor::build(self.inner.shape.clone(), self.inner.data.clone(), false, None)
    }

    pub fn leaf_with_grad(&self, requires_grad: bool) -> Tensor {
        Tensor::build(
            self.inner.shape.clone(),
            self.inner.data.clone(),
            requires_grad,
            None,
        )
    }

    /// Result of an op. Records `backward` only when grad mode is on and at
    /// least one input requires grad.
    pub(crate) fn from_op(
        name: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        inputs: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Tensor {
        let track = grad_enabled() && inputs.iter().any(|t| t.tracks_grad());
        if track {
            Tensor::build(
                shape,
                data,
                true,
                Some(Op {
                    name,
                    inputs,
                    backward,
                }),
            )
        } else {
            Tensor::build(shape, data, false, None)
        }
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn rank(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.inner.shape[axis]
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.inner.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.data.clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        self.inner.data[0]
    }

    pub fn tracks_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.inner.op.is_none()
    }

    /// Inputs of the op that produced this tensor (empty for leaves).
    pub(crate) fn inputs(&self) -> &[Tensor] {
        self.inner.op.as_ref().map(|o| o.inputs.as_slice()).unwrap_or(&[])
    }

    pub fn op_name(&self) -> Option<&'static str> {
        self.inner.op.as_ref().map(|o| o.name)
    }

    /// Accumulated gradient of a leaf after [`Tensor::backward`].
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.lock().expect("grad lock").clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.lock().expect("grad lock") = None;
    }

    pub fn all_finite(&self) -> bool {
        self.inner.data.iter().all(|v| v.is_finite())
    }

    /// Reverse-mode sweep from a single-element tensor. Gradients accumulate
    /// into every reachable leaf that requires grad.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(TensorError::dim(
                "backward",
                format!("loss must have one element, shape is {:?}", self.shape()),
            ));
        }
        if !self.tracks_grad() {
            return Ok(());
        }
        let mut nodes: Vec<Tensor> = Vec::new();
        let mut seen: HashSet<u64> = HashSet::new();
        let mut stack = vec![self.clone()];
        while let Some(t) = stack.pop() {
            if !seen.insert(t.id()) {
                continue;
            }
            if let Some(op) = &t.inner.op {
                for p in &op.inputs {
                    if p.tracks_grad() && !seen.contains(&p.id()) {
                        stack.push(p.clone());
                    }
                }
            }
            nodes.push(t);
        }
        nodes.sort_unstable_by_key(|t| std::cmp::Reverse(t.id()));

        let mut grads: HashMap<u64, Vec<f64>> = HashMap::new();
        grads.insert(self.id(), vec![1.0]);
        for node in nodes {
            let Some(g) = grads.remove(&node.id()) else {
                continue;
            };
            match &node.inner.op {
                None => {
                    let mut slot = node.inner.grad.lock().expect("grad lock");
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        None => *slot = Some(g),
                    }
                }
                Some(op) => {
                    let input_grads = (op.backward)(&node, &g);
                    debug_assert_eq!(input_grads.len(), op.inputs.len());
                    for (p, pg) in op.inputs.iter().zip(input_grads) {
                        let Some(pg) = pg else { continue };
                        if !p.tracks_grad() {
                            continue;
                        }
                        debug_assert_eq!(pg.len(), p.numel(), "grad size for {}", op.name);
                        match grads.get_mut(&p.id()) {
                            Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                            None => {
                                grads.insert(p.id(), pg);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Row-major strides for `shape`.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_length() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 5]).is_err());
        assert_eq!(Tensor::new(&[2, 3], vec![0.0; 6]).unwrap().numel(), 6);
    }

    #[test]
    fn strides_row_major() {
        assert_eq!(strides(&[2, 3, 4]), vec![12, 4, 1]);
        assert_eq!(strides(&[]), Vec::<usize>::new());
    }

    #[test]
    fn no_grad_is_scoped() {
        assert!(grad_enabled());
        no_grad(|| assert!(!grad_enabled()));
        assert!(grad_enabled());
    }
}
