//! Reverse-mode differentiation over a dynamically recorded tape.
//!
//! A [`Graph`] is built fresh for every forward pass. Each op evaluates
//! eagerly, returns a [`Var`] holding the result, and (when any input needs
//! a gradient) appends a node with a closure that maps the output gradient
//! to input gradients. [`Graph::backward`] walks the tape in reverse.
//!
//! Values are immutable once recorded. A graph is confined to one thread.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::numerics::params::ParamId;
use crate::numerics::tensor::Tensor;

const UNTRACKED: usize = usize::MAX;

type BackwardFn = Box<dyn Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    parents: Vec<usize>,
    needs: Vec<bool>,
    backward: Option<BackwardFn>,
    param: Option<ParamId>,
}

/// A value produced inside a [`Graph`].
#[derive(Clone)]
pub struct Var {
    id: usize,
    value: Rc<Tensor>,
}

impl Var {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub(crate) fn value_rc(&self) -> Rc<Tensor> {
        Rc::clone(&self.value)
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.id != UNTRACKED
    }
}

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("value", &self.value)
            .finish()
    }
}

pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    recording: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            recording: true,
        }
    }

    /// A graph that never records backward closures. Intermediate values
    /// are freed as soon as their `Var`s drop.
    pub fn inference() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var {
        Var {
            id: UNTRACKED,
            value: Rc::new(value),
        }
    }

    /// A leaf that receives a gradient (e.g. the input of a gradient check).
    pub fn leaf(&self, value: Tensor) -> Var {
        self.push_leaf(value, None)
    }

    pub(crate) fn param_leaf(&self, value: Tensor, id: ParamId) -> Var {
        self.push_leaf(value, Some(id))
    }

    fn push_leaf(&self, value: Tensor, param: Option<ParamId>) -> Var {
        if !self.recording {
            return self.constant(value);
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            parents: Vec::new(),
            needs: Vec::new(),
            backward: None,
            param,
        });
        Var {
            id: nodes.len() - 1,
            value: Rc::new(value),
        }
    }

    /// Records an op result. `backward` receives the output gradient and a
    /// flag per parent telling whether that parent needs a gradient; it must
    /// return one entry per parent (use `None` for skipped parents).
    pub(crate) fn record<F>(&self, value: Tensor, parents: &[&Var], backward: F) -> Var
    where
        F: Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>> + 'static,
    {
        let needs: Vec<bool> = parents.iter().map(|p| p.requires_grad()).collect();
        if !self.recording || !needs.iter().any(|&n| n) {
            return self.constant(value);
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            parents: parents.iter().map(|p| p.id).collect(),
            needs,
            backward: Some(Box::new(backward)),
            param: None,
        });
        Var {
            id: nodes.len() - 1,
            value: Rc::new(value),
        }
    }

    /// Back-propagates from a scalar `loss` and returns the gradients of
    /// every leaf reachable from it.
    pub fn backward(&self, loss: &Var) -> Result<Gradients> {
        if loss.value.numel() != 1 {
            return Err(Error::NonScalarLoss(loss.shape().to_vec()));
        }
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        let mut leaves = Gradients {
            by_node: (0..nodes.len()).map(|_| None).collect(),
            params: Vec::new(),
        };
        if !loss.requires_grad() {
            return Ok(leaves);
        }
        grads[loss.id] = Some(Tensor::ones(loss.shape().to_vec()));
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            match &node.backward {
                Some(f) => {
                    let contributions = f(&g, &node.needs);
                    debug_assert_eq!(contributions.len(), node.parents.len());
                    for ((&pid, &need), c) in node.parents.iter().zip(&node.needs).zip(contributions) {
                        let Some(c) = c else { continue };
                        if !need {
                            continue;
                        }
                        match &mut grads[pid] {
                            Some(acc) => acc.add_assign(&c),
                            slot @ None => *slot = Some(c),
                        }
                    }
                }
                None => {
                    if let Some(p) = node.param {
                        leaves.params.push((p, id));
                    }
                    leaves.by_node[id] = Some(g);
                }
            }
        }
        leaves.params.sort_by_key(|&(p, _)| p);
        Ok(leaves)
    }
}

/// Leaf gradients from one backward pass.
pub struct Gradients {
    by_node: Vec<Option<Tensor>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    pub fn wrt(&self, var: &Var) -> Option<&Tensor> {
        if var.id == UNTRACKED {
            return None;
        }
        self.by_node.get(var.id).and_then(|g| g.as_ref())
    }

    /// Parameter gradients ordered by parameter id.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> + '_ {
        self.params
            .iter()
            .filter_map(|&(p, node)| self.by_node[node].as_ref().map(|g| (p, g)))
    }
}

fn same_shape(op: &'static str, a: &Var, b: &Var) {
    assert_eq!(
        a.shape(),
        b.shape(),
        "{op}: shape mismatch {:?} vs {:?}",
        a.shape(),
        b.shape()
    );
}

/// Elementwise and structural ops.
impl Graph {
    pub fn add(&self, a: &Var, b: &Var) -> Var {
        same_shape("add", a, b);
        let out = a.value().zip_map(b.value(), |x, y| x + y);
        self.record(out, &[a, b], |g, _| vec![Some(g.clone()), Some(g.clone())])
    }

    pub fn sub(&self, a: &Var, b: &Var) -> Var {
        same_shape("sub", a, b);
        let out = a.value().zip_map(b.value(), |x, y| x - y);
        self.record(out, &[a, b], |g, _| vec![Some(g.clone()), Some(g.scale(-1.0))])
    }

    pub fn mul(&self, a: &Var, b: &Var) -> Var {
        same_shape("mul", a, b);
        let out = a.value().zip_map(b.value(), |x, y| x * y);
        let (av, bv) = (a.value_rc(), b.value_rc());
        self.record(out, &[a, b], move |g, needs| {
            vec![
                needs[0].then(|| g.zip_map(&bv, |g, y| g * y)),
                needs[1].then(|| g.zip_map(&av, |g, x| g * x)),
            ]
        })
    }

    pub fn scale(&self, a: &Var, k: f64) -> Var {
        let out = a.value().scale(k);
        self.record(out, &[a], move |g, _| vec![Some(g.scale(k))])
    }

    /// Sum of all elements as a one-element tensor.
    pub fn sum(&self, a: &Var) -> Var {
        let out = Tensor::scalar(a.value().sum());
        let shape = a.shape().to_vec();
        self.record(out, &[a], move |g, _| {
            vec![Some(Tensor::full(shape.clone(), g.item()))]
        })
    }

    pub fn mean(&self, a: &Var) -> Var {
        let n = a.value().numel() as f64;
        let s = self.sum(a);
        self.scale(&s, 1.0 / n)
    }

    pub fn sigmoid(&self, a: &Var) -> Var {
        let out = a.value().map(sigmoid);
        let y = Rc::new(out.clone());
        self.record(out, &[a], move |g, _| {
            vec![Some(g.zip_map(&y, |g, y| g * y * (1.0 - y)))]
        })
    }

    pub fn tanh(&self, a: &Var) -> Var {
        let out = a.value().map(f64::tanh);
        let y = Rc::new(out.clone());
        self.record(out, &[a], move |g, _| {
            vec![Some(g.zip_map(&y, |g, y| g * (1.0 - y * y)))]
        })
    }

    pub fn leaky_relu(&self, a: &Var, slope: f64) -> Var {
        let out = a.value().map(|x| if x >= 0.0 { x } else { slope * x });
        let x = a.value_rc();
        self.record(out, &[a], move |g, _| {
            vec![Some(g.zip_map(&x, |g, x| if x >= 0.0 { g } else { slope * g }))]
        })
    }

    pub fn abs(&self, a: &Var) -> Var {
        let out = a.value().map(f64::abs);
        let x = a.value_rc();
        self.record(out, &[a], move |g, _| {
            vec![Some(g.zip_map(&x, |g, x| g * sign(x)))]
        })
    }

    /// `sqrt(re² + im²)`. The gradient at an exact zero is taken as zero.
    pub fn magnitude(&self, re: &Var, im: &Var) -> Var {
        same_shape("magnitude", re, im);
        let out = re.value().zip_map(im.value(), f64::hypot);
        let (rv, iv, mv) = (re.value_rc(), im.value_rc(), Rc::new(out.clone()));
        self.record(out, &[re, im], move |g, needs| {
            let part = |num: &Tensor| {
                let mut t = g.zip_map(num, |g, n| g * n);
                for (v, &m) in t.data_mut().iter_mut().zip(mv.data()) {
                    *v = if m > 0.0 { *v / m } else { 0.0 };
                }
                t
            };
            vec![needs[0].then(|| part(&rv)), needs[1].then(|| part(&iv))]
        })
    }

    pub fn reshape(&self, a: &Var, shape: impl Into<Vec<usize>>) -> Var {
        let shape = shape.into();
        let out = a
            .value()
            .reshape(shape)
            .expect("reshape: element count mismatch");
        let orig = a.shape().to_vec();
        self.record(out, &[a], move |g, _| {
            vec![Some(g.clone().with_shape(orig.clone()))]
        })
    }

    /// Permutes the axes of a rank-3 tensor: output axis `i` is input axis
    /// `perm[i]`.
    pub fn permute3(&self, a: &Var, perm: [usize; 3]) -> Var {
        let out = permute3(a.value(), perm);
        let mut inv = [0usize; 3];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        self.record(out, &[a], move |g, _| vec![Some(permute3(g, inv))])
    }

    /// Concatenates along the last axis. All other extents must agree.
    pub fn concat_last(&self, parts: &[&Var]) -> Var {
        let lead = &parts[0].shape()[..parts[0].shape().len() - 1];
        let widths: Vec<usize> = parts
            .iter()
            .map(|p| {
                let s = p.shape();
                assert_eq!(&s[..s.len() - 1], lead, "concat_last: leading extents differ");
                s[s.len() - 1]
            })
            .collect();
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut data = vec![0.0; rows * total];
        let mut col = 0;
        for (p, &w) in parts.iter().zip(&widths) {
            let src = p.value().data();
            for r in 0..rows {
                data[r * total + col..r * total + col + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            col += w;
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        self.record(Tensor::from_parts(shape, data), parts, move |g, needs| {
            let mut col = 0;
            let mut out = Vec::with_capacity(widths.len());
            for (&w, &need) in widths.iter().zip(needs) {
                if need {
                    let mut d = vec![0.0; rows * w];
                    for r in 0..rows {
                        d[r * w..(r + 1) * w]
                            .copy_from_slice(&g.data()[r * total + col..r * total + col + w]);
                    }
                    let mut s = g.shape().to_vec();
                    *s.last_mut().unwrap() = w;
                    out.push(Some(Tensor::from_parts(s, d)));
                } else {
                    out.push(None);
                }
                col += w;
            }
            out
        })
    }

    /// Slice `[start, start + len)` of the last axis.
    pub fn narrow_last(&self, a: &Var, start: usize, len: usize) -> Var {
        let shape = a.shape().to_vec();
        let total = *shape.last().unwrap();
        assert!(start + len <= total && len > 0, "narrow_last out of range");
        let rows = a.value().numel() / total;
        let src = a.value().data();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&src[r * total + start..r * total + start + len]);
        }
        let mut out_shape = shape.clone();
        *out_shape.last_mut().unwrap() = len;
        self.record(Tensor::from_parts(out_shape, data), &[a], move |g, _| {
            let mut d = vec![0.0; rows * total];
            for r in 0..rows {
                d[r * total + start..r * total + start + len]
                    .copy_from_slice(&g.data()[r * len..(r + 1) * len]);
            }
            vec![Some(Tensor::from_parts(shape.clone(), d))]
        })
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub(crate) fn permute3(t: &Tensor, perm: [usize; 3]) -> Tensor {
    let s = t.shape();
    assert_eq!(s.len(), 3, "permute3 needs a rank-3 tensor");
    let out_shape = vec![s[perm[0]], s[perm[1]], s[perm[2]]];
    let in_strides = [s[1] * s[2], s[2], 1];
    let st = [in_strides[perm[0]], in_strides[perm[1]], in_strides[perm[2]]];
    let src = t.data();
    let mut data = Vec::with_capacity(src.len());
    for i in 0..out_shape[0] {
        for j in 0..out_shape[1] {
            let base = i * st[0] + j * st[1];
            for k in 0..out_shape[2] {
                data.push(src[base + k * st[2]]);
            }
        }
    }
    Tensor::from_parts(out_shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_derivative_at_three() {
        let g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0));
        let y = g.mul(&x, &x);
        let grads = g.backward(&y).unwrap();
        assert_eq!(grads.wrt(&x).unwrap().item(), 6.0);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let g = Graph::new();
        let x = g.leaf(Tensor::ones(vec![2]));
        let y = g.scale(&x, 2.0);
        assert!(matches!(g.backward(&y), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn constants_are_not_recorded() {
        let g = Graph::new();
        let a = g.constant(Tensor::ones(vec![3]));
        let b = g.constant(Tensor::ones(vec![3]));
        let c = g.add(&a, &b);
        assert!(!c.requires_grad());
        assert!(g.is_empty());
    }

    #[test]
    fn fan_out_accumulates() {
        // y = x*x + 3x  =>  dy/dx = 2x + 3
        let g = Graph::new();
        let x = g.leaf(Tensor::scalar(2.0));
        let sq = g.mul(&x, &x);
        let lin = g.scale(&x, 3.0);
        let y = g.add(&sq, &lin);
        let grads = g.backward(&y).unwrap();
        assert_eq!(grads.wrt(&x).unwrap().item(), 7.0);
    }

    #[test]
    fn elementwise_examples() {
        let g = Graph::inference();
        let x = g.constant(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
        assert_eq!(g.leaky_relu(&x, 0.01).value().data(), &[-0.01, 0.0, 2.0]);
        assert_eq!(g.sigmoid(&x).value().data()[1], 0.5);
        let re = g.constant(Tensor::scalar(3.0));
        let im = g.constant(Tensor::scalar(4.0));
        assert_eq!(g.magnitude(&re, &im).value().item(), 5.0);
    }

    #[test]
    fn permute_round_trip() {
        let t = Tensor::new(vec![2, 3, 4], (0..24).map(f64::from).collect()).unwrap();
        let p = permute3(&t, [2, 0, 1]);
        assert_eq!(p.shape(), &[4, 2, 3]);
        assert_eq!(p.at(&[3, 1, 2]), t.at(&[1, 2, 3]));
        assert_eq!(permute3(&p, [1, 2, 0]), t);
    }
}
