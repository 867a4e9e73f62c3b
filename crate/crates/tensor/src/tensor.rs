use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use crate::element::Element;
use crate::error::{Result, TensorError};

/// What a backward closure sees when the tape is replayed.
pub struct BackwardCtx<'a, T: Element> {
    /// Upstream gradient, same shape as the op output.
    pub grad: &'a [T],
    /// The op's inputs, in the order they were recorded.
    pub inputs: &'a [Tensor<T>],
    /// Output values of the forward op.
    pub output: &'a [T],
    pub output_shape: &'a [usize],
}

/// Vector-Jacobian product of a recorded op. Returns one optional gradient per
/// input; `None` means "no contribution" (e.g. the input does not require grad).
pub type BackwardFn<T> = Box<dyn Fn(&BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>>>;

struct OpRecord<T: Element> {
    name: &'static str,
    inputs: Vec<Tensor<T>>,
    backward: BackwardFn<T>,
}

struct Node<T: Element> {
    data: Rc<Vec<T>>,
    shape: Vec<usize>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<T>>>,
    op: Option<OpRecord<T>>,
}

/// Dense row-major tensor. Cloning is cheap and shares the node, so a clone
/// observes the same gradient buffer.
pub struct Tensor<T: Element = f32>(Rc<Node<T>>);

impl<T: Element> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor(Rc::clone(&self.0))
    }
}

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .field("op", &self.op_name())
            .finish()
    }
}

pub(crate) fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.iter().any(|&s| s == 0) || shape.iter().product::<usize>() != len {
        return Err(TensorError::InvalidShape { shape: shape.to_vec(), len });
    }
    Ok(())
}

impl<T: Element> Tensor<T> {
    fn from_node(node: Node<T>) -> Self {
        Tensor(Rc::new(node))
    }

    /// Constant tensor (does not take part in gradient computation).
    pub fn new(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        check_shape(shape, data.len())?;
        Ok(Self::from_node(Node {
            data: Rc::new(data),
            shape: shape.to_vec(),
            requires_grad: false,
            grad: RefCell::new(None),
            op: None,
        }))
    }

    /// Leaf tensor that accumulates a gradient during `backward`.
    pub fn param(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        check_shape(shape, data.len())?;
        Ok(Self::from_node(Node {
            data: Rc::new(data),
            shape: shape.to_vec(),
            requires_grad: true,
            grad: RefCell::new(None),
            op: None,
        }))
    }

    pub fn from_f64(data: &[f64], shape: &[usize]) -> Result<Self> {
        Self::new(data.iter().map(|&v| T::from_f64c(v)).collect(), shape)
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(vec![value; n], shape)
    }

    pub fn scalar(value: T) -> Self {
        Self::new(vec![value], &[1]).expect("scalar shape")
    }

    /// Records the result of a custom differentiable op. If no input requires
    /// a gradient the op is not recorded and `backward` is dropped.
    pub fn from_op(
        name: &'static str,
        data: Vec<T>,
        shape: &[usize],
        inputs: Vec<Tensor<T>>,
        backward: BackwardFn<T>,
    ) -> Result<Self> {
        check_shape(shape, data.len())?;
        let requires_grad = inputs.iter().any(|t| t.requires_grad());
        let op = requires_grad.then(|| OpRecord { name, inputs, backward });
        Ok(Self::from_node(Node {
            data: Rc::new(data),
            shape: shape.to_vec(),
            requires_grad,
            grad: RefCell::new(None),
            op,
        }))
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.0.data.as_ref().clone()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.0.data.iter().map(|v| v.as_f64()).collect()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.0.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.op.is_none()
    }

    pub fn op_name(&self) -> Option<&'static str> {
        self.0.op.as_ref().map(|op| op.name)
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Same values, cut from the graph.
    pub fn detach(&self) -> Self {
        Self::from_node(Node {
            data: Rc::clone(&self.0.data),
            shape: self.0.shape.clone(),
            requires_grad: false,
            grad: RefCell::new(None),
            op: None,
        })
    }

    /// Cheap view with a new shape of identical element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        check_shape(shape, self.numel())?;
        let requires_grad = self.requires_grad();
        let op = requires_grad.then(|| OpRecord {
            name: "reshape",
            inputs: vec![self.clone()],
            backward: Box::new(|ctx: &BackwardCtx<'_, T>| vec![Some(ctx.grad.to_vec())]) as BackwardFn<T>,
        });
        Ok(Self::from_node(Node {
            data: Rc::clone(&self.0.data),
            shape: shape.to_vec(),
            requires_grad,
            grad: RefCell::new(None),
            op,
        }))
    }

    pub fn all_finite(&self) -> bool {
        self.0.data.iter().all(|v| v.is_finite())
    }

    /// Errors naming `what` if any element is NaN or infinite.
    pub fn check_finite(&self, what: &str) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(TensorError::NonFinite(what.to_string()))
        }
    }

    /// Reverse pass from a single-element root with seed 1.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(TensorError::NonScalarRoot(self.shape().to_vec()));
        }
        self.backward_with(vec![T::one()])
    }

    /// Reverse pass with an explicit seed of the root's shape.
    pub fn backward_with(&self, seed: Vec<T>) -> Result<()> {
        if seed.len() != self.numel() {
            return Err(TensorError::Shape {
                op: "backward",
                detail: format!("seed has {} elements, root has {}", seed.len(), self.numel()),
            });
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topo_order();
        let key = |t: &Tensor<T>| Rc::as_ptr(&t.0) as usize;
        let mut pending: HashMap<usize, Vec<T>> = HashMap::new();
        pending.insert(key(self), seed);

        for node in order.iter().rev() {
            let Some(grad) = pending.remove(&key(node)) else { continue };
            match &node.0.op {
                None => {
                    let mut slot = node.0.grad.borrow_mut();
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&grad).for_each(|(a, g)| *a = *a + *g),
                        None => *slot = Some(grad),
                    }
                }
                Some(op) => {
                    let ctx = BackwardCtx {
                        grad: &grad,
                        inputs: &op.inputs,
                        output: &node.0.data,
                        output_shape: &node.0.shape,
                    };
                    let input_grads = (op.backward)(&ctx);
                    debug_assert_eq!(input_grads.len(), op.inputs.len(), "op {}", op.name);
                    for (input, g) in op.inputs.iter().zip(input_grads) {
                        let Some(g) = g else { continue };
                        if !input.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(g.len(), input.numel(), "op {}", op.name);
                        if g.iter().any(|v| !v.is_finite()) {
                            return Err(TensorError::NonFiniteGradient { op: op.name });
                        }
                        match pending.get_mut(&key(input)) {
                            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a = *a + *b),
                            None => {
                                pending.insert(key(input), g);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Nodes reachable from `self` that require grad, inputs before outputs.
    fn topo_order(&self) -> Vec<Tensor<T>> {
        let mut order = Vec::new();
        let mut visited = std::collections::HashSet::new();
        let mut stack: Vec<(Tensor<T>, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            let id = Rc::as_ptr(&t.0) as usize;
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(id) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(op) = &t.0.op {
                for input in op.inputs.iter().rev() {
                    if input.requires_grad() && !visited.contains(&(Rc::as_ptr(&input.0) as usize)) {
                        stack.push((input.clone(), false));
                    }
                }
            }
        }
        order
    }

    /// Same values converted to another element type, as a constant.
    pub fn cast<U: Element>(&self) -> Tensor<U> {
        let data = self.data().iter().map(|v| U::from_f64c(v.as_f64())).collect();
        Tensor::new(data, self.shape()).expect("same shape")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes() {
        assert!(Tensor::<f32>::new(vec![1.0; 6], &[2, 3]).is_ok());
        assert!(Tensor::<f32>::new(vec![1.0; 6], &[2, 4]).is_err());
        assert!(Tensor::<f32>::new(vec![], &[0]).is_err());
    }

    #[test]
    fn backward_on_non_scalar_is_rejected() {
        let x = Tensor::<f64>::param(vec![1.0, 2.0], &[2]).unwrap();
        let y = x.mul(&x).unwrap();
        assert!(matches!(y.backward(), Err(TensorError::NonScalarRoot(_))));
    }

    #[test]
    fn sum_of_squares_gradient() {
        let x = Tensor::<f64>::param(vec![1.0, 2.0], &[2]).unwrap();
        let loss = x.mul(&x).unwrap().sum();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 4.0]);
    }

    #[test]
    fn detached_tensor_receives_no_grad() {
        let x = Tensor::<f64>::param(vec![1.0, 2.0], &[2]).unwrap();
        let d = x.detach();
        let loss = d.mul(&x).unwrap().sum();
        loss.backward().unwrap();
        assert!(d.grad().is_none());
        assert_eq!(x.grad().unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn repeated_backward_accumulates_on_leaves() {
        let x = Tensor::<f64>::param(vec![3.0], &[1]).unwrap();
        let h = x.mul_scalar(2.0);
        let loss = h.mul(&h).unwrap().sum();
        loss.backward().unwrap();
        loss.backward().unwrap();
        // d/dx (2x)^2 = 8x = 24, twice
        assert_eq!(x.grad().unwrap(), vec![48.0]);
    }

    #[test]
    fn reshape_shares_values() {
        let x = Tensor::<f32>::new((0..6).map(|v| v as f32).collect(), &[2, 3]).unwrap();
        let y = x.reshape(&[3, 2]).unwrap();
        assert_eq!(y.data(), x.data());
        assert!(x.reshape(&[4, 2]).is_err());
    }
}
