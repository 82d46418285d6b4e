//! Reverse-mode autodiff over a dynamically recorded tape.
//!
//! A [`Graph`] owns the tape; [`Tensor`] handles index into it. Tensors are
//! immutable once created; gradients accumulate into per-node buffers during
//! a single `backward` pass. A graph and its tensors belong to one thread.

pub mod gradcheck;
pub mod kernels;
pub mod scalar;

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{dim_err, Error, Result};
use kernels::ConvArgs;
pub use scalar::{DType, Scalar};

enum Op<E: Scalar> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, E),
    AddScalar(usize),
    Relu(usize),
    LeakyRelu(usize, E),
    Sigmoid(usize),
    Tanh(usize),
    Log(usize),
    Abs(usize),
    Clamp(usize, E, E),
    SumAll(usize),
    MeanAll(usize),
    SumSpatial(usize),
    Softmax(usize, usize),
    Reshape(usize),
    Permute(usize, Vec<usize>),
    Concat(Vec<usize>, usize),
    Upsample2x(usize),
    AvgPool2x(usize),
    Linear {
        x: usize,
        w: usize,
        b: Option<usize>,
    },
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        stride: usize,
        padding: usize,
        groups: usize,
    },
    GroupNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        groups: usize,
        mean: Vec<E>,
        invstd: Vec<E>,
    },
    Bmm {
        a: usize,
        b: usize,
        nt: bool,
    },
}

struct Node<E: Scalar> {
    op: Op<E>,
    shape: Vec<usize>,
    data: Vec<E>,
    requires_grad: bool,
}

struct Tape<E: Scalar> {
    nodes: Vec<Node<E>>,
    grads: Vec<Option<Vec<E>>>,
}

/// Handle to the shared tape.
pub struct Graph<E: Scalar> {
    tape: Rc<RefCell<Tape<E>>>,
}

impl<E: Scalar> Clone for Graph<E> {
    fn clone(&self) -> Self {
        Graph {
            tape: Rc::clone(&self.tape),
        }
    }
}

impl<E: Scalar> Default for Graph<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Scalar> Graph<E> {
    pub fn new() -> Self {
        Graph {
            tape: Rc::new(RefCell::new(Tape {
                nodes: Vec::new(),
                grads: Vec::new(),
            })),
        }
    }

    fn push(&self, op: Op<E>, shape: Vec<usize>, data: Vec<E>, requires_grad: bool) -> Tensor<E> {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let mut tape = self.tape.borrow_mut();
        let id = tape.nodes.len();
        tape.nodes.push(Node {
            op,
            shape: shape.clone(),
            data,
            requires_grad,
        });
        tape.grads.push(None);
        Tensor {
            tape: Rc::clone(&self.tape),
            id,
            shape,
        }
    }

    /// New leaf tensor. `requires_grad` marks it as a differentiation target.
    pub fn leaf(&self, data: Vec<E>, shape: &[usize], requires_grad: bool) -> Tensor<E> {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "leaf data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        self.push(Op::Leaf, shape.to_vec(), data, requires_grad)
    }

    pub fn constant(&self, data: Vec<E>, shape: &[usize]) -> Tensor<E> {
        self.leaf(data, shape, false)
    }

    pub fn zeros(&self, shape: &[usize]) -> Tensor<E> {
        let n = shape.iter().product();
        self.constant(vec![E::zero(); n], shape)
    }

    pub fn scalar(&self, v: E) -> Tensor<E> {
        self.constant(vec![v], &[1])
    }

    pub fn full(&self, shape: &[usize], v: E) -> Tensor<E> {
        let n = shape.iter().product();
        self.constant(vec![v; n], shape)
    }

    pub fn len(&self) -> usize {
        self.tape.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A node of the computation graph.
pub struct Tensor<E: Scalar> {
    tape: Rc<RefCell<Tape<E>>>,
    id: usize,
    shape: Vec<usize>,
}

impl<E: Scalar> Clone for Tensor<E> {
    fn clone(&self) -> Self {
        Tensor {
            tape: Rc::clone(&self.tape),
            id: self.id,
            shape: self.shape.clone(),
        }
    }
}

impl<E: Scalar> Tensor<E> {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn graph(&self) -> Graph<E> {
        Graph {
            tape: Rc::clone(&self.tape),
        }
    }

    /// Copy of the node's values.
    pub fn value(&self) -> Vec<E> {
        self.tape.borrow().nodes[self.id].data.clone()
    }

    /// Read access without cloning.
    pub fn with_data<R>(&self, f: impl FnOnce(&[E]) -> R) -> R {
        f(&self.tape.borrow().nodes[self.id].data)
    }

    /// Scalar value of a one-element tensor, as f64.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.tape.borrow().nodes[self.id].data[0].into_f64()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.borrow().nodes[self.id].requires_grad
    }

    /// Gradient accumulated by the last `backward`, if any.
    pub fn grad(&self) -> Option<Vec<E>> {
        self.tape.borrow().grads[self.id].clone()
    }

    pub fn is_finite(&self) -> bool {
        self.with_data(|d| d.iter().all(|v| v.is_finite()))
    }

    fn same_tape(&self, other: &Tensor<E>) {
        assert!(
            Rc::ptr_eq(&self.tape, &other.tape),
            "tensors belong to different graphs"
        );
    }

    fn push(&self, op: Op<E>, shape: Vec<usize>, data: Vec<E>, requires_grad: bool) -> Tensor<E> {
        self.graph().push(op, shape, data, requires_grad)
    }

    fn binary_check(&self, other: &Tensor<E>, name: &str) -> Result<()> {
        self.same_tape(other);
        if self.shape != other.shape {
            return Err(dim_err(format!(
                "{name}: shapes {:?} and {:?} differ",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    fn zip_map(&self, other: &Tensor<E>, f: impl Fn(E, E) -> E) -> Vec<E> {
        let tape = self.tape.borrow();
        tape.nodes[self.id]
            .data
            .iter()
            .zip(&tape.nodes[other.id].data)
            .map(|(&a, &b)| f(a, b))
            .collect()
    }

    fn map(&self, f: impl Fn(E) -> E) -> Vec<E> {
        self.with_data(|d| d.iter().map(|&v| f(v)).collect())
    }

    pub fn add(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        self.binary_check(other, "add")?;
        let data = self.zip_map(other, |a, b| a + b);
        let rq = self.requires_grad() || other.requires_grad();
        Ok(self.push(Op::Add(self.id, other.id), self.shape.clone(), data, rq))
    }

    pub fn sub(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        self.binary_check(other, "sub")?;
        let data = self.zip_map(other, |a, b| a - b);
        let rq = self.requires_grad() || other.requires_grad();
        Ok(self.push(Op::Sub(self.id, other.id), self.shape.clone(), data, rq))
    }

    pub fn mul(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        self.binary_check(other, "mul")?;
        let data = self.zip_map(other, |a, b| a * b);
        let rq = self.requires_grad() || other.requires_grad();
        Ok(self.push(Op::Mul(self.id, other.id), self.shape.clone(), data, rq))
    }

    pub fn scale(&self, c: E) -> Tensor<E> {
        let data = self.map(|v| v * c);
        self.push(
            Op::Scale(self.id, c),
            self.shape.clone(),
            data,
            self.requires_grad(),
        )
    }

    pub fn add_scalar(&self, c: E) -> Tensor<E> {
        let data = self.map(|v| v + c);
        self.push(
            Op::AddScalar(self.id),
            self.shape.clone(),
            data,
            self.requires_grad(),
        )
    }

    pub fn neg(&self) -> Tensor<E> {
        self.scale(-E::one())
    }

    pub fn relu(&self) -> Tensor<E> {
        let data = self.map(|v| if v > E::zero() { v } else { E::zero() });
        self.push(
            Op::Relu(self.id),
            self.shape.clone(),
            data,
            self.requires_grad(),
        )
    }

    pub fn leaky_relu(&self, slope: E) -> Tensor<E> {
        let data = self.map(|v| if v > E::zero() { v } else { v * slope });
        self.push(
            Op::LeakyRelu(self.id, slope),
            self.shape.clone(),
            data,
            self.requires_grad(),
        )
    }

    pub fn sigmoid(&self) -> Tensor<E> {
        let data = self.map(|v| E::one() / (E::one() + (-v).exp()));
        self.push(
            Op::Sigmoid(self.id),
            self.shape.clone(),
            data,
            self.requires_grad(),
        )
    }

    pub fn tanh(&self) -> Tensor<E> {
        let data = self.map(|v| v.tanh());
        self.push(
            Op::Tanh(self.id),
            self.shape.clone(),
            data,
            self.requires_grad(),
        )
    }

    pub fn log(&self) -> Tensor<E> {
        let data = self.map(|v| v.ln());
        self.push(
            Op::Log(self.id),
            self.shape.clone(),
            data,
            self.requires_grad(),
        )
    }

    pub fn abs(&self) -> Tensor<E> {
        let data = self.map(|v| v.abs());
        self.push(
            Op::Abs(self.id),
            self.shape.clone(),
            data,
            self.requires_grad(),
        )
    }

    /// Clamp values to `[lo, hi]`; the gradient is passed only strictly inside.
    pub fn clamp(&self, lo: E, hi: E) -> Tensor<E> {
        let data = self.map(|v| v.max(lo).min(hi));
        self.push(
            Op::Clamp(self.id, lo, hi),
            self.shape.clone(),
            data,
            self.requires_grad(),
        )
    }

    pub fn sum_all(&self) -> Tensor<E> {
        let s = self.with_data(|d| d.iter().copied().fold(E::zero(), |a, b| a + b));
        self.push(Op::SumAll(self.id), vec![1], vec![s], self.requires_grad())
    }

    pub fn mean_all(&self) -> Tensor<E> {
        let n = E::from_f64((self.numel()) as f64);
        let s = self.with_data(|d| d.iter().copied().fold(E::zero(), |a, b| a + b)) / n;
        self.push(Op::MeanAll(self.id), vec![1], vec![s], self.requires_grad())
    }

    /// Sum over the two trailing (spatial) axes.
    pub fn sum_spatial(&self) -> Result<Tensor<E>> {
        if self.rank() < 3 {
            return Err(dim_err(format!(
                "sum_spatial needs rank >= 3, got {:?}",
                self.shape
            )));
        }
        let spatial: usize = self.shape[self.rank() - 2..].iter().product();
        let lead: Vec<usize> = self.shape[..self.rank() - 2].to_vec();
        let lead_n: usize = lead.iter().product();
        let data = self.with_data(|d| {
            let mut out = vec![E::zero(); lead_n];
            for (i, slot) in out.iter_mut().enumerate() {
                let mut acc = E::zero();
                for v in &d[i * spatial..(i + 1) * spatial] {
                    acc = acc + *v;
                }
                *slot = acc;
            }
            out
        });
        Ok(self.push(Op::SumSpatial(self.id), lead, data, self.requires_grad()))
    }

    /// Numerically stabilized softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Tensor<E>> {
        if axis >= self.rank() {
            return Err(dim_err(format!(
                "softmax axis {axis} out of range for shape {:?}",
                self.shape
            )));
        }
        let data = self.with_data(|d| kernels::softmax_fwd(d, &self.shape, axis));
        Ok(self.push(
            Op::Softmax(self.id, axis),
            self.shape.clone(),
            data,
            self.requires_grad(),
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<E>> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(dim_err(format!(
                "reshape {:?} -> {:?}: element counts differ",
                self.shape, shape
            )));
        }
        let data = self.value();
        Ok(self.push(
            Op::Reshape(self.id),
            shape.to_vec(),
            data,
            self.requires_grad(),
        ))
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Tensor<E>> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(dim_err(format!(
                "permute axes {:?} invalid for rank {rank}",
                axes
            )));
        }
        let data = self.with_data(|d| kernels::permute(d, &self.shape, axes));
        let shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        Ok(self.push(
            Op::Permute(self.id, axes.to_vec()),
            shape,
            data,
            self.requires_grad(),
        ))
    }

    pub fn upsample2x(&self) -> Result<Tensor<E>> {
        let [n, c, h, w] = self.dims4("upsample2x")?;
        let data = self.with_data(|d| kernels::upsample2x_fwd(d, n, c, h, w));
        Ok(self.push(
            Op::Upsample2x(self.id),
            vec![n, c, 2 * h, 2 * w],
            data,
            self.requires_grad(),
        ))
    }

    pub fn avgpool2x(&self) -> Result<Tensor<E>> {
        let [n, c, h, w] = self.dims4("avgpool2x")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(dim_err(format!("avgpool2x: odd spatial dims {h}x{w}")));
        }
        let data = self.with_data(|d| kernels::avgpool2x_fwd(d, n, c, h, w));
        Ok(self.push(
            Op::AvgPool2x(self.id),
            vec![n, c, h / 2, w / 2],
            data,
            self.requires_grad(),
        ))
    }

    fn dims4(&self, name: &str) -> Result<[usize; 4]> {
        if self.rank() != 4 {
            return Err(dim_err(format!(
                "{name}: expected rank-4 NCHW tensor, got {:?}",
                self.shape
            )));
        }
        Ok([self.shape[0], self.shape[1], self.shape[2], self.shape[3]])
    }

    /// Affine map over the trailing axis: `[.., Din] x [Dout, Din] -> [.., Dout]`.
    pub fn linear(&self, w: &Tensor<E>, b: Option<&Tensor<E>>) -> Result<Tensor<E>> {
        self.same_tape(w);
        if w.rank() != 2 {
            return Err(dim_err(format!("linear: weight must be 2-d, got {:?}", w.shape)));
        }
        let din = *self.shape.last().ok_or_else(|| dim_err("linear: scalar input"))?;
        let (dout, win) = (w.shape[0], w.shape[1]);
        if win != din {
            return Err(dim_err(format!(
                "linear: input trailing dim {din} != weight Din {win}"
            )));
        }
        if let Some(b) = b {
            self.same_tape(b);
            if b.shape != [dout] {
                return Err(dim_err(format!(
                    "linear: bias shape {:?} != [{dout}]",
                    b.shape
                )));
            }
        }
        let m = self.numel() / din;
        let data = {
            let tape = self.tape.borrow();
            kernels::linear_fwd(
                &tape.nodes[self.id].data,
                &tape.nodes[w.id].data,
                b.map(|b| tape.nodes[b.id].data.as_slice()),
                m,
                din,
                dout,
            )
        };
        let mut shape = self.shape.clone();
        *shape.last_mut().unwrap() = dout;
        let rq = self.requires_grad() || w.requires_grad() || b.is_some_and(|b| b.requires_grad());
        Ok(self.push(
            Op::Linear {
                x: self.id,
                w: w.id,
                b: b.map(|b| b.id),
            },
            shape,
            data,
            rq,
        ))
    }

    /// Grouped 2-d cross-correlation over NCHW input.
    pub fn conv2d(
        &self,
        w: &Tensor<E>,
        b: Option<&Tensor<E>>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Tensor<E>> {
        self.same_tape(w);
        let [n, cin, h, wd] = self.dims4("conv2d input")?;
        if w.rank() != 4 {
            return Err(dim_err(format!(
                "conv2d: weight must be rank-4, got {:?}",
                w.shape
            )));
        }
        let (cout, wc, kh, kw) = (w.shape[0], w.shape[1], w.shape[2], w.shape[3]);
        if groups == 0 || stride == 0 {
            return Err(Error::Config("conv2d: stride and groups must be positive".into()));
        }
        if cin % groups != 0 || cout % groups != 0 {
            return Err(Error::Config(format!(
                "conv2d: channels in={cin} out={cout} not divisible by groups={groups}"
            )));
        }
        if wc != cin / groups {
            return Err(dim_err(format!(
                "conv2d: weight channel axis {wc} != Cin/groups = {}",
                cin / groups
            )));
        }
        if h + 2 * padding < kh || wd + 2 * padding < kw {
            return Err(dim_err(format!(
                "conv2d: kernel {kh}x{kw} larger than padded input {h}x{wd}"
            )));
        }
        if let Some(b) = b {
            self.same_tape(b);
            if b.shape != [cout] {
                return Err(dim_err(format!(
                    "conv2d: bias shape {:?} != [{cout}] on the output-channel axis",
                    b.shape
                )));
            }
        }
        let args = ConvArgs {
            n,
            cin,
            h,
            w: wd,
            cout,
            kh,
            kw,
            stride,
            padding,
            groups,
        };
        let (oh, ow) = (args.out_h(), args.out_w());
        let data = {
            let tape = self.tape.borrow();
            kernels::conv2d_fwd(
                &tape.nodes[self.id].data,
                &tape.nodes[w.id].data,
                b.map(|b| tape.nodes[b.id].data.as_slice()),
                &args,
            )
        };
        let rq = self.requires_grad() || w.requires_grad() || b.is_some_and(|b| b.requires_grad());
        Ok(self.push(
            Op::Conv2d {
                x: self.id,
                w: w.id,
                b: b.map(|b| b.id),
                stride,
                padding,
                groups,
            },
            vec![n, cout, oh, ow],
            data,
            rq,
        ))
    }

    /// Per-(sample, group) standardization followed by a per-channel affine.
    pub fn group_norm(
        &self,
        num_groups: usize,
        gamma: &Tensor<E>,
        beta: &Tensor<E>,
        eps: E,
    ) -> Result<Tensor<E>> {
        self.same_tape(gamma);
        self.same_tape(beta);
        let [n, c, h, w] = self.dims4("group_norm input")?;
        if num_groups == 0 || c % num_groups != 0 {
            return Err(Error::Config(format!(
                "group_norm: channels {c} not divisible by num_groups {num_groups}"
            )));
        }
        if eps <= E::zero() {
            return Err(Error::Config("group_norm: eps must be positive".into()));
        }
        if gamma.shape != [c] || beta.shape != [c] {
            return Err(dim_err(format!(
                "group_norm: gamma/beta shapes {:?}/{:?} != [{c}] on the channel axis",
                gamma.shape, beta.shape
            )));
        }
        let (data, mean, invstd) = {
            let tape = self.tape.borrow();
            let x = &tape.nodes[self.id].data;
            let (mean, invstd) = kernels::group_norm_stats(x, n, c, h * w, num_groups, eps);
            let y = kernels::group_norm_fwd(
                x,
                &tape.nodes[gamma.id].data,
                &tape.nodes[beta.id].data,
                n,
                c,
                h * w,
                num_groups,
                &mean,
                &invstd,
            );
            (y, mean, invstd)
        };
        let rq = self.requires_grad() || gamma.requires_grad() || beta.requires_grad();
        Ok(self.push(
            Op::GroupNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                groups: num_groups,
                mean,
                invstd,
            },
            self.shape.clone(),
            data,
            rq,
        ))
    }

    /// Batched matmul `[B,M,K] x [B,K,N] -> [B,M,N]`.
    pub fn bmm(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        self.bmm_impl(other, false)
    }

    /// Batched matmul with the second operand transposed:
    /// `[B,M,K] x [B,N,K] -> [B,M,N]`.
    pub fn bmm_nt(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        self.bmm_impl(other, true)
    }

    fn bmm_impl(&self, other: &Tensor<E>, nt: bool) -> Result<Tensor<E>> {
        self.same_tape(other);
        if self.rank() != 3 || other.rank() != 3 {
            return Err(dim_err(format!(
                "bmm: expected rank-3 operands, got {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        let (bs, m, k) = (self.shape[0], self.shape[1], self.shape[2]);
        let (ob, d1, d2) = (other.shape[0], other.shape[1], other.shape[2]);
        let (kk, n) = if nt { (d2, d1) } else { (d1, d2) };
        if ob != bs {
            return Err(dim_err(format!("bmm: batch dims {bs} != {ob}")));
        }
        if kk != k {
            return Err(dim_err(format!("bmm: contraction dims {k} != {kk}")));
        }
        let data = {
            let tape = self.tape.borrow();
            kernels::bmm_fwd(
                &tape.nodes[self.id].data,
                &tape.nodes[other.id].data,
                bs,
                m,
                k,
                n,
                nt,
            )
        };
        let rq = self.requires_grad() || other.requires_grad();
        Ok(self.push(
            Op::Bmm {
                a: self.id,
                b: other.id,
                nt,
            },
            vec![bs, m, n],
            data,
            rq,
        ))
    }

    /// Backpropagate from this scalar tensor, populating gradients of every
    /// `requires_grad` node that it depends on.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Arg(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.shape
            )));
        }
        let mut tape = self.tape.borrow_mut();
        let n = tape.nodes.len();
        for g in tape.grads.iter_mut() {
            *g = None;
        }
        tape.grads[self.id] = Some(vec![E::one()]);
        for id in (0..n).rev().skip(n - 1 - self.id) {
            backward_node(&mut tape, id);
        }
        Ok(())
    }
}

fn accumulate<E: Scalar>(grads: &mut [Option<Vec<E>>], id: usize, len: usize, f: impl Fn(&mut [E])) {
    let buf = grads[id].get_or_insert_with(|| vec![E::zero(); len]);
    f(buf);
}

fn backward_node<E: Scalar>(tape: &mut Tape<E>, id: usize) {
    if tape.grads[id].is_none() || !tape.nodes[id].requires_grad {
        return;
    }
    if matches!(tape.nodes[id].op, Op::Leaf) {
        // leaf gradients stay available to the caller
        return;
    }
    let dy = tape.grads[id].take().unwrap();
    // Split borrows: nodes read-only, grads mutable.
    let Tape { nodes, grads } = tape;
    let node = &nodes[id];
    let needs = |i: usize| nodes[i].requires_grad;
    let len_of = |i: usize| nodes[i].data.len();
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            for i in [*a, *b] {
                if needs(i) {
                    accumulate(grads, i, len_of(i), |g| {
                        for (gv, dv) in g.iter_mut().zip(&dy) {
                            *gv = *gv + *dv;
                        }
                    });
                }
            }
        }
        Op::Sub(a, b) => {
            if needs(*a) {
                accumulate(grads, *a, len_of(*a), |g| {
                    for (gv, dv) in g.iter_mut().zip(&dy) {
                        *gv = *gv + *dv;
                    }
                });
            }
            if needs(*b) {
                accumulate(grads, *b, len_of(*b), |g| {
                    for (gv, dv) in g.iter_mut().zip(&dy) {
                        *gv = *gv - *dv;
                    }
                });
            }
        }
        Op::Mul(a, b) => {
            let (a, b) = (*a, *b);
            if needs(a) {
                let bd = &nodes[b].data;
                accumulate(grads, a, len_of(a), |g| {
                    for i in 0..g.len() {
                        g[i] = g[i] + dy[i] * bd[i];
                    }
                });
            }
            if needs(b) {
                let ad = &nodes[a].data;
                accumulate(grads, b, len_of(b), |g| {
                    for i in 0..g.len() {
                        g[i] = g[i] + dy[i] * ad[i];
                    }
                });
            }
        }
        Op::Scale(a, c) => {
            let (a, c) = (*a, *c);
            if needs(a) {
                accumulate(grads, a, len_of(a), |g| {
                    for i in 0..g.len() {
                        g[i] = g[i] + dy[i] * c;
                    }
                });
            }
        }
        Op::AddScalar(a) | Op::Reshape(a) => {
            let a = *a;
            if needs(a) {
                accumulate(grads, a, len_of(a), |g| {
                    for (gv, dv) in g.iter_mut().zip(&dy) {
                        *gv = *gv + *dv;
                    }
                });
            }
        }
        Op::Relu(a) => {
            let a = *a;
            if needs(a) {
                let x = &nodes[a].data;
                accumulate(grads, a, len_of(a), |g| {
                    for i in 0..g.len() {
                        if x[i] > E::zero() {
                            g[i] = g[i] + dy[i];
                        }
                    }
                });
            }
        }
        Op::LeakyRelu(a, slope) => {
            let (a, s) = (*a, *slope);
            if needs(a) {
                let x = &nodes[a].data;
                accumulate(grads, a, len_of(a), |g| {
                    for i in 0..g.len() {
                        let k = if x[i] > E::zero() { E::one() } else { s };
                        g[i] = g[i] + dy[i] * k;
                    }
                });
            }
        }
        Op::Sigmoid(a) => {
            let a = *a;
            if needs(a) {
                let y = &node.data;
                accumulate(grads, a, len_of(a), |g| {
                    for i in 0..g.len() {
                        g[i] = g[i] + dy[i] * y[i] * (E::one() - y[i]);
                    }
                });
            }
        }
        Op::Tanh(a) => {
            let a = *a;
            if needs(a) {
                let y = &node.data;
                accumulate(grads, a, len_of(a), |g| {
                    for i in 0..g.len() {
                        g[i] = g[i] + dy[i] * (E::one() - y[i] * y[i]);
                    }
                });
            }
        }
        Op::Log(a) => {
            let a = *a;
            if needs(a) {
                let x = &nodes[a].data;
                accumulate(grads, a, len_of(a), |g| {
                    for i in 0..g.len() {
                        g[i] = g[i] + dy[i] / x[i];
                    }
                });
            }
        }
        Op::Abs(a) => {
            let a = *a;
            if needs(a) {
                let x = &nodes[a].data;
                accumulate(grads, a, len_of(a), |g| {
                    for i in 0..g.len() {
                        let s = if x[i] > E::zero() {
                            E::one()
                        } else if x[i] < E::zero() {
                            -E::one()
                        } else {
                            E::zero()
                        };
                        g[i] = g[i] + dy[i] * s;
                    }
                });
            }
        }
        Op::Clamp(a, lo, hi) => {
            let (a, lo, hi) = (*a, *lo, *hi);
            if needs(a) {
                let x = &nodes[a].data;
                accumulate(grads, a, len_of(a), |g| {
                    for i in 0..g.len() {
                        if x[i] > lo && x[i] < hi {
                            g[i] = g[i] + dy[i];
                        }
                    }
                });
            }
        }
        Op::SumAll(a) => {
            let a = *a;
            if needs(a) {
                let d = dy[0];
                accumulate(grads, a, len_of(a), |g| {
                    for gv in g.iter_mut() {
                        *gv = *gv + d;
                    }
                });
            }
        }
        Op::MeanAll(a) => {
            let a = *a;
            if needs(a) {
                let d = dy[0] / E::from_f64((len_of(a)) as f64);
                accumulate(grads, a, len_of(a), |g| {
                    for gv in g.iter_mut() {
                        *gv = *gv + d;
                    }
                });
            }
        }
        Op::SumSpatial(a) => {
            let a = *a;
            if needs(a) {
                let spatial = len_of(a) / dy.len();
                accumulate(grads, a, len_of(a), |g| {
                    for (i, dv) in dy.iter().enumerate() {
                        for gv in &mut g[i * spatial..(i + 1) * spatial] {
                            *gv = *gv + *dv;
                        }
                    }
                });
            }
        }
        Op::Softmax(a, axis) => {
            let (a, axis) = (*a, *axis);
            if needs(a) {
                let dx = kernels::softmax_bwd(&node.data, &dy, &node.shape, axis);
                accumulate(grads, a, len_of(a), |g| {
                    for i in 0..g.len() {
                        g[i] = g[i] + dx[i];
                    }
                });
            }
        }
        Op::Permute(a, axes) => {
            let a = *a;
            if needs(a) {
                // backward of permute is permute by the inverse axes
                let mut inv = vec![0usize; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inv[ax] = i;
                }
                let dx = kernels::permute(&dy, &node.shape, &inv);
                accumulate(grads, a, len_of(a), |g| {
                    for i in 0..g.len() {
                        g[i] = g[i] + dx[i];
                    }
                });
            }
        }
        Op::Concat(inputs, axis) => {
            let axis = *axis;
            let out_shape = &node.shape;
            let outer: usize = out_shape[..axis].iter().product();
            let inner: usize = out_shape[axis + 1..].iter().product();
            let total_axis = out_shape[axis];
            let mut offset = 0usize;
            for &inp in inputs {
                let alen = nodes[inp].shape[axis];
                if needs(inp) {
                    let off = offset;
                    accumulate(grads, inp, len_of(inp), |g| {
                        for o in 0..outer {
                            for j in 0..alen {
                                let src = (o * total_axis + off + j) * inner;
                                let dst = (o * alen + j) * inner;
                                for i in 0..inner {
                                    g[dst + i] = g[dst + i] + dy[src + i];
                                }
                            }
                        }
                    });
                }
                offset += alen;
            }
        }
        Op::Upsample2x(a) => {
            let a = *a;
            if needs(a) {
                let s = &nodes[a].shape;
                let dx = kernels::upsample2x_bwd(&dy, s[0], s[1], s[2], s[3]);
                accumulate(grads, a, len_of(a), |g| {
                    for i in 0..g.len() {
                        g[i] = g[i] + dx[i];
                    }
                });
            }
        }
        Op::AvgPool2x(a) => {
            let a = *a;
            if needs(a) {
                let s = &nodes[a].shape;
                let dx = kernels::avgpool2x_bwd(&dy, s[0], s[1], s[2], s[3]);
                accumulate(grads, a, len_of(a), |g| {
                    for i in 0..g.len() {
                        g[i] = g[i] + dx[i];
                    }
                });
            }
        }
        Op::Linear { x, w, b } => {
            let (x, w, b) = (*x, *w, *b);
            let din = *nodes[x].shape.last().unwrap();
            let dout = nodes[w].shape[0];
            let m = len_of(x) / din;
            if needs(x) {
                let dx = kernels::linear_bwd_input(&dy, &nodes[w].data, m, din, dout);
                accumulate(grads, x, len_of(x), |g| {
                    for i in 0..g.len() {
                        g[i] = g[i] + dx[i];
                    }
                });
            }
            if needs(w) {
                let dw = kernels::linear_bwd_weight(&nodes[x].data, &dy, m, din, dout);
                accumulate(grads, w, len_of(w), |g| {
                    for i in 0..g.len() {
                        g[i] = g[i] + dw[i];
                    }
                });
            }
            if let Some(b) = b {
                if needs(b) {
                    let db = kernels::linear_bwd_bias(&dy, m, dout);
                    accumulate(grads, b, len_of(b), |g| {
                        for i in 0..g.len() {
                            g[i] = g[i] + db[i];
                        }
                    });
                }
            }
        }
        Op::Conv2d {
            x,
            w,
            b,
            stride,
            padding,
            groups,
        } => {
            let (x, w, b) = (*x, *w, *b);
            let xs = &nodes[x].shape;
            let ws = &nodes[w].shape;
            let args = ConvArgs {
                n: xs[0],
                cin: xs[1],
                h: xs[2],
                w: xs[3],
                cout: ws[0],
                kh: ws[2],
                kw: ws[3],
                stride: *stride,
                padding: *padding,
                groups: *groups,
            };
            if needs(x) {
                let dx = kernels::conv2d_bwd_input(&dy, &nodes[w].data, &args);
                accumulate(grads, x, len_of(x), |g| {
                    for i in 0..g.len() {
                        g[i] = g[i] + dx[i];
                    }
                });
            }
            if needs(w) {
                let dw = kernels::conv2d_bwd_weight(&nodes[x].data, &dy, &args);
                accumulate(grads, w, len_of(w), |g| {
                    for i in 0..g.len() {
                        g[i] = g[i] + dw[i];
                    }
                });
            }
            if let Some(b) = b {
                if needs(b) {
                    let db = kernels::conv2d_bwd_bias(&dy, &args);
                    accumulate(grads, b, len_of(b), |g| {
                        for i in 0..g.len() {
                            g[i] = g[i] + db[i];
                        }
                    });
                }
            }
        }
        Op::GroupNorm {
            x,
            gamma,
            beta,
            groups,
            mean,
            invstd,
        } => {
            let (x, gamma, beta, groups) = (*x, *gamma, *beta, *groups);
            let xs = &nodes[x].shape;
            let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
            let (dx, dgamma, dbeta) = kernels::group_norm_bwd(
                &nodes[x].data,
                &nodes[gamma].data,
                &dy,
                n,
                c,
                hw,
                groups,
                mean,
                invstd,
            );
            if needs(x) {
                accumulate(grads, x, len_of(x), |g| {
                    for i in 0..g.len() {
                        g[i] = g[i] + dx[i];
                    }
                });
            }
            if needs(gamma) {
                accumulate(grads, gamma, len_of(gamma), |g| {
                    for i in 0..g.len() {
                        g[i] = g[i] + dgamma[i];
                    }
                });
            }
            if needs(beta) {
                accumulate(grads, beta, len_of(beta), |g| {
                    for i in 0..g.len() {
                        g[i] = g[i] + dbeta[i];
                    }
                });
            }
        }
        Op::Bmm { a, b, nt } => {
            let (a, b, nt) = (*a, *b, *nt);
            let (bs, m, k) = {
                let s = &nodes[a].shape;
                (s[0], s[1], s[2])
            };
            let n = node.shape[2];
            if !nt {
                // y = a[B,M,K] x b[B,K,N]
                if needs(a) {
                    let da = kernels::bmm_fwd(&dy, &nodes[b].data, bs, m, n, k, true);
                    accumulate(grads, a, len_of(a), |g| {
                        for i in 0..g.len() {
                            g[i] = g[i] + da[i];
                        }
                    });
                }
                if needs(b) {
                    let db = kernels::bmm_tn(&nodes[a].data, &dy, bs, m, k, n);
                    accumulate(grads, b, len_of(b), |g| {
                        for i in 0..g.len() {
                            g[i] = g[i] + db[i];
                        }
                    });
                }
            } else {
                // y = a[B,M,K] x b[B,N,K]^T
                if needs(a) {
                    let da = kernels::bmm_fwd(&dy, &nodes[b].data, bs, m, n, k, false);
                    accumulate(grads, a, len_of(a), |g| {
                        for i in 0..g.len() {
                            g[i] = g[i] + da[i];
                        }
                    });
                }
                if needs(b) {
                    let db = kernels::bmm_tn(&dy, &nodes[a].data, bs, m, n, k);
                    accumulate(grads, b, len_of(b), |g| {
                        for i in 0..g.len() {
                            g[i] = g[i] + db[i];
                        }
                    });
                }
            }
        }
    }
}

/// Concatenate tensors along `axis`.
pub fn concat<E: Scalar>(tensors: &[&Tensor<E>], axis: usize) -> Result<Tensor<E>> {
    let first = tensors.first().ok_or_else(|| Error::Arg("concat: empty input".into()))?;
    let rank = first.rank();
    if axis >= rank {
        return Err(dim_err(format!("concat: axis {axis} out of range")));
    }
    let mut total_axis = 0usize;
    for t in tensors {
        first.same_tape(t);
        if t.rank() != rank {
            return Err(dim_err("concat: rank mismatch".to_string()));
        }
        for (ax, (a, b)) in first.shape.iter().zip(t.shape.iter()).enumerate() {
            if ax != axis && a != b {
                return Err(dim_err(format!(
                    "concat: axis {ax} sizes {a} != {b}"
                )));
            }
        }
        total_axis += t.shape[axis];
    }
    let mut out_shape = first.shape.clone();
    out_shape[axis] = total_axis;
    let outer: usize = out_shape[..axis].iter().product();
    let inner: usize = out_shape[axis + 1..].iter().product();
    let total: usize = out_shape.iter().product();
    let mut data = vec![E::zero(); total];
    let mut offset = 0usize;
    for t in tensors {
        let alen = t.shape[axis];
        t.with_data(|d| {
            for o in 0..outer {
                let src = o * alen * inner;
                let dst = (o * total_axis + offset) * inner;
                data[dst..dst + alen * inner].copy_from_slice(&d[src..src + alen * inner]);
            }
        });
        offset += alen;
    }
    let rq = tensors.iter().any(|t| t.requires_grad());
    let ids = tensors.iter().map(|t| t.id).collect();
    Ok(first
        .graph()
        .push(Op::Concat(ids, axis), out_shape, data, rq))
}
