//! Dense tensors with reverse-mode automatic differentiation.
//!
//! Tensors are row-major with the last axis fastest; images use the
//! `[H, W, C]` layout. Every operation builds a node in an implicit tape so
//! that [`Tensor::backward`] can accumulate gradients into `requires_grad`
//! leaves. Data lives behind an `RwLock` so optimizers can update parameters
//! in place between steps while forward passes share them read-only.

pub mod conv;
pub mod ops;
pub mod shape;

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use crate::error::{Result, XError};

/// Floating-point element type of a tensor. Training uses `f32`; the
/// gradient-check suites run everything at `f64`.
pub trait Scalar:
    num_traits::Float
    + num_traits::NumAssignOps
    + Send
    + Sync
    + fmt::Debug
    + fmt::Display
    + Default
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Shorthand used throughout the numeric code.
#[inline]
pub(crate) fn c64<T: Scalar>(v: f64) -> T {
    T::from_f64(v)
}

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Per-parent gradient contributions returned by a backward function.
/// `None` marks parents that do not need a gradient.
pub(crate) type ParentGrads<T> = Vec<Option<Vec<T>>>;
type BackwardFn<T> = dyn Fn(&Node<T>, &[T]) -> ParentGrads<T> + Send + Sync;

pub struct Node<T: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: RwLock<Vec<T>>,
    requires_grad: bool,
    /// True when this node or any ancestor requires a gradient.
    track: bool,
    grad: Mutex<Option<Vec<T>>>,
    parents: Vec<Tensor<T>>,
    backward: Option<Box<BackwardFn<T>>>,
}

impl<T: Scalar> Node<T> {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub(crate) fn parent(&self, i: usize) -> &Tensor<T> {
        &self.parents[i]
    }

    pub(crate) fn parent_tracks(&self, i: usize) -> bool {
        self.parents[i].node.track
    }

    /// Runs `f` on the node's value buffer under the read lock.
    pub(crate) fn with_data<R>(&self, f: impl FnOnce(&[T]) -> R) -> R {
        f(&self.data.read().expect("tensor storage poisoned"))
    }
}

/// A dense n-dimensional array, cheaply cloneable (shared storage).
pub struct Tensor<T: Scalar> {
    node: Arc<Node<T>>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            node: Arc::clone(&self.node),
        }
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Tensor(id={}, shape={:?}, requires_grad={})",
            self.node.id, self.node.shape, self.node.requires_grad
        )
    }
}

fn check_shape<T: Scalar>(shape: &[usize], data: &[T]) -> Result<()> {
    let numel: usize = shape.iter().product();
    if shape.iter().any(|&d| d == 0) {
        return Err(XError::Dim(format!("zero extent in shape {shape:?}")));
    }
    if numel != data.len() {
        return Err(XError::Dim(format!(
            "shape {shape:?} needs {numel} values, got {}",
            data.len()
        )));
    }
    Ok(())
}

impl<T: Scalar> Tensor<T> {
    fn construct(
        shape: Vec<usize>,
        data: Vec<T>,
        requires_grad: bool,
        parents: Vec<Tensor<T>>,
        backward: Option<Box<BackwardFn<T>>>,
    ) -> Self {
        let track = requires_grad || parents.iter().any(|p| p.node.track);
        Tensor {
            node: Arc::new(Node {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RwLock::new(data),
                requires_grad,
                track,
                grad: Mutex::new(None),
                parents,
                backward: if track { backward } else { None },
            }),
        }
    }

    /// Plain value tensor (no gradient tracking).
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        check_shape(shape, &data)?;
        Ok(Self::construct(shape.to_vec(), data, false, vec![], None))
    }

    /// Trainable leaf: gradients accumulate here during backward.
    pub fn param(shape: &[usize], data: Vec<T>) -> Result<Self> {
        check_shape(shape, &data)?;
        Ok(Self::construct(shape.to_vec(), data, true, vec![], None))
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        let n = shape.iter().product();
        Self::from_vec(shape, vec![T::zero(); n])
    }

    pub fn full(shape: &[usize], v: T) -> Result<Self> {
        let n = shape.iter().product();
        Self::from_vec(shape, vec![v; n])
    }

    pub fn scalar(v: T) -> Self {
        Self::from_vec(&[1], vec![v]).expect("scalar construction")
    }

    /// Internal constructor for op outputs.
    pub(crate) fn new_op(
        shape: Vec<usize>,
        data: Vec<T>,
        parents: Vec<Tensor<T>>,
        backward: impl Fn(&Node<T>, &[T]) -> ParentGrads<T> + Send + Sync + 'static,
    ) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self::construct(shape, data, false, parents, Some(Box::new(backward)))
    }

    pub fn id(&self) -> u64 {
        self.node.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn numel(&self) -> usize {
        self.node.numel()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    /// True when two handles share the same storage node.
    pub fn ptr_eq(&self, other: &Tensor<T>) -> bool {
        Arc::ptr_eq(&self.node, &other.node)
    }

    pub fn data(&self) -> Vec<T> {
        self.node.with_data(|d| d.to_vec())
    }

    pub fn with_data<R>(&self, f: impl FnOnce(&[T]) -> R) -> R {
        self.node.with_data(f)
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() requires a scalar tensor");
        self.node.with_data(|d| d[0])
    }

    /// Replaces the stored values, preserving shape. Visible through every
    /// handle sharing this storage.
    pub fn set_data(&self, data: Vec<T>) -> Result<()> {
        if data.len() != self.numel() {
            return Err(XError::Dim(format!(
                "set_data: expected {} values for shape {:?}, got {}",
                self.numel(),
                self.shape(),
                data.len()
            )));
        }
        *self.node.data.write().expect("tensor storage poisoned") = data;
        Ok(())
    }

    /// In-place mutation of the stored values (optimizer updates).
    pub fn update_data(&self, f: impl FnOnce(&mut [T])) {
        f(&mut self.node.data.write().expect("tensor storage poisoned"));
    }

    /// Copies values into a fresh untracked leaf.
    pub fn detach(&self) -> Tensor<T> {
        Tensor::from_vec(self.shape(), self.data()).expect("detach shapes agree")
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.node.grad.lock().expect("grad lock poisoned").clone()
    }

    /// Accumulated gradient, or zeros when none was recorded (leaves off the
    /// path from the loss have a zero gradient).
    pub fn grad_or_zeros(&self) -> Vec<T> {
        self.grad().unwrap_or_else(|| vec![T::zero(); self.numel()])
    }

    pub fn zero_grad(&self) {
        *self.node.grad.lock().expect("grad lock poisoned") = None;
    }

    pub fn is_finite(&self) -> bool {
        self.node.with_data(|d| d.iter().all(|v| v.is_finite()))
    }

    /// Reverse-mode accumulation from a scalar loss into every
    /// `requires_grad` leaf reachable from it.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(XError::Usage(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.node.track {
            return Ok(());
        }

        // Iterative post-order DFS over tracked parents.
        let mut topo: Vec<Tensor<T>> = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        let mut stack: Vec<(Tensor<T>, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.id());
        while let Some((t, pi)) = stack.pop() {
            if pi < t.node.parents.len() {
                let p = t.node.parents[pi].clone();
                stack.push((t, pi + 1));
                if p.node.track && visited.insert(p.id()) {
                    stack.push((p, 0));
                }
            } else {
                topo.push(t);
            }
        }

        let mut grads: HashMap<u64, Vec<T>> = HashMap::new();
        grads.insert(self.id(), vec![T::one()]);
        for t in topo.iter().rev() {
            let g = match grads.remove(&t.id()) {
                Some(g) => g,
                None => continue,
            };
            if let Some(bf) = &t.node.backward {
                let parent_grads = bf(&t.node, &g);
                debug_assert_eq!(parent_grads.len(), t.node.parents.len());
                for (p, pg) in t.node.parents.iter().zip(parent_grads) {
                    if let Some(pg) = pg {
                        debug_assert_eq!(pg.len(), p.numel());
                        match grads.entry(p.id()) {
                            std::collections::hash_map::Entry::Occupied(mut e) => {
                                axpy(e.get_mut(), &pg)
                            }
                            std::collections::hash_map::Entry::Vacant(e) => {
                                e.insert(pg);
                            }
                        }
                    }
                }
            }
            if t.node.requires_grad {
                let mut guard = t.node.grad.lock().expect("grad lock poisoned");
                match guard.as_mut() {
                    Some(acc) => axpy(acc, &g),
                    None => *guard = Some(g),
                }
            }
        }
        Ok(())
    }
}

fn axpy<T: Scalar>(acc: &mut [T], inc: &[T]) {
    debug_assert_eq!(acc.len(), inc.len());
    for (a, b) in acc.iter_mut().zip(inc) {
        *a += *b;
    }
}

/// Central-difference gradient oracle: `(f(x + h e_i) - f(x - h e_i)) / 2h`
/// per element. `f` must be a pure scalar-valued function.
pub fn numeric_gradient<T: Scalar>(
    f: impl Fn(&Tensor<T>) -> Result<Tensor<T>>,
    x: &Tensor<T>,
    h: T,
) -> Result<Tensor<T>> {
    let base = x.data();
    let shape = x.shape().to_vec();
    let mut grad = vec![T::zero(); base.len()];
    for i in 0..base.len() {
        let mut plus = base.clone();
        let mut minus = base.clone();
        plus[i] += h;
        minus[i] -= h;
        let fp = eval_scalar(&f, &shape, plus)?;
        let fm = eval_scalar(&f, &shape, minus)?;
        grad[i] = (fp - fm) / (c64::<T>(2.0) * h);
    }
    Tensor::from_vec(&shape, grad)
}

fn eval_scalar<T: Scalar>(
    f: &impl Fn(&Tensor<T>) -> Result<Tensor<T>>,
    shape: &[usize],
    data: Vec<T>,
) -> Result<T> {
    let t = Tensor::from_vec(shape, data)?;
    let out = f(&t)?;
    if out.numel() != 1 {
        return Err(XError::Usage(
            "numeric_gradient requires a scalar-valued function".into(),
        ));
    }
    Ok(out.item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ops;

    #[test]
    fn grad_of_sum_of_squares_is_2x() {
        let x = Tensor::param(&[3], vec![1.0f64, -2.0, 3.0]).unwrap();
        let loss = ops::sum_all(&ops::mul(&x, &x).unwrap()).unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, -4.0, 6.0]);
    }

    #[test]
    fn leaf_off_the_path_gets_zero_gradient() {
        let x = Tensor::param(&[2], vec![1.0f64, 2.0]).unwrap();
        let unused = Tensor::param(&[2], vec![5.0f64, 6.0]).unwrap();
        let loss = ops::sum_all(&x).unwrap();
        loss.backward().unwrap();
        assert!(unused.grad().is_none());
        assert_eq!(unused.grad_or_zeros(), vec![0.0, 0.0]);
    }

    #[test]
    fn reused_tensor_accumulates_both_contributions() {
        // f(x) = sum(x * x): x enters the product twice.
        let x = Tensor::param(&[2], vec![3.0f64, -1.0]).unwrap();
        let y = ops::mul(&x, &x).unwrap();
        let loss = ops::sum_all(&y).unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![6.0, -2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let x = Tensor::param(&[2], vec![1.0f64, 2.0]).unwrap();
        let y = ops::mul(&x, &x).unwrap();
        assert!(matches!(y.backward(), Err(XError::Usage(_))));
    }

    #[test]
    fn numeric_gradient_of_square_at_3() {
        let x = Tensor::from_vec(&[1], vec![3.0f64]).unwrap();
        let g = numeric_gradient(
            |t| {
                let sq = ops::mul(t, t)?;
                ops::sum_all(&sq)
            },
            &x,
            1e-3,
        )
        .unwrap();
        assert!((g.item() - 6.0).abs() < 1e-6);
    }

    #[test]
    fn numeric_gradient_of_constant_is_zero() {
        let x = Tensor::from_vec(&[4], vec![0.5f64; 4]).unwrap();
        let g = numeric_gradient(|_| Ok(Tensor::scalar(7.0f64)), &x, 1e-4).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn numeric_gradient_of_linear_is_exact() {
        let a = [2.0f64, -3.0, 0.25];
        let x = Tensor::from_vec(&[3], vec![1.0f64, 1.0, 1.0]).unwrap();
        let g = numeric_gradient(
            |t| {
                let coef = Tensor::from_vec(&[3], a.to_vec())?;
                ops::sum_all(&ops::mul(t, &coef)?)
            },
            &x,
            1e-3,
        )
        .unwrap();
        for (got, want) in g.data().iter().zip(a.iter()) {
            assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        }
    }

    #[test]
    fn set_data_is_visible_through_clones() {
        let x = Tensor::param(&[2], vec![1.0f32, 2.0]).unwrap();
        let alias = x.clone();
        x.set_data(vec![7.0, 8.0]).unwrap();
        assert_eq!(alias.data(), vec![7.0, 8.0]);
        assert!(x.ptr_eq(&alias));
    }
}
