//! Reverse-mode differentiation tape.
//!
//! Every operation appends a node holding its forward value and the ids of its
//! inputs. Ids are handed out in creation order, so the node list is already
//! topologically sorted and [`Tape::backward`] is a single reverse sweep.

use crate::tensor::{self, Tensor};
use crate::{Error, Real, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Sigmoid,
    Tanh,
    Relu,
    OneMinus,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weights: Var,
        bias: Option<Var>,
    },
    MaxPool2 {
        input: Var,
        argmax: Vec<usize>,
    },
    Upsample2(Var),
    Unary(Unary, Var),
    Binary(Binary, Var, Var),
    Concat(Var, Var),
    Sum(Var),
    Scale(Var, T),
    /// Mean sigmoid cross-entropy of logits against a fixed target.
    SigmoidCe {
        logits: Var,
        target: Tensor<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `max(x,0) - x*z + log(1 + exp(-|x|))`, the overflow-free form of
/// `x - x*z + log(1 + exp(-x))`.
pub(crate) fn sigmoid_ce_element<T: Real>(x: T, z: T) -> T {
    x.max(T::zero()) - x * z + (-x.abs()).exp().ln_1p()
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A differentiable input (parameter or probed input).
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// An input that never receives a gradient (images, coordinate maps).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn conv2d(&mut self, input: Var, weights: Var, bias: Option<Var>) -> Result<Var> {
        let out = tensor::conv2d(
            self.value(input),
            self.value(weights),
            bias.map(|b| self.value(b)),
        )?;
        let mut deps = vec![input, weights];
        deps.extend(bias);
        let rg = self.needs(&deps);
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                weights,
                bias,
            },
            rg,
        ))
    }

    pub fn maxpool2(&mut self, input: Var) -> Result<Var> {
        let (out, argmax) = tensor::maxpool2(self.value(input))?;
        let rg = self.needs(&[input]);
        Ok(self.push(out, Op::MaxPool2 { input, argmax }, rg))
    }

    pub fn upsample_nearest2(&mut self, input: Var) -> Result<Var> {
        let out = tensor::upsample_nearest2(self.value(input))?;
        let rg = self.needs(&[input]);
        Ok(self.push(out, Op::Upsample2(input), rg))
    }

    pub fn unary(&mut self, kind: Unary, a: Var) -> Var {
        let x = self.value(a);
        let out = match kind {
            Unary::Sigmoid => x.map(sigmoid),
            Unary::Tanh => x.map(|v| v.tanh()),
            Unary::Relu => x.map(|v| v.max(T::zero())),
            Unary::OneMinus => x.map(|v| T::one() - v),
        };
        let rg = self.needs(&[a]);
        self.push(out, Op::Unary(kind, a), rg)
    }

    pub fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        let out = match kind {
            Binary::Add => x.zip_map(y, "add", |p, q| p + q),
            Binary::Sub => x.zip_map(y, "sub", |p, q| p - q),
            Binary::Mul => x.zip_map(y, "mul", |p, q| p * q),
        }?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::Binary(kind, a, b), rg))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(Unary::Sigmoid, a)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(Unary::Tanh, a)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(Unary::Relu, a)
    }

    pub fn one_minus(&mut self, a: Var) -> Var {
        self.unary(Unary::OneMinus, a)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::concat_channels(self.value(a), self.value(b))?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::Concat(a, b), rg))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.needs(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        let out = self.value(a).scale(factor);
        let rg = self.needs(&[a]);
        self.push(out, Op::Scale(a, factor), rg)
    }

    /// Adds a list of same-shaped nodes left to right.
    pub fn add_all(&mut self, vars: &[Var]) -> Result<Var> {
        let (&first, rest) = vars
            .split_first()
            .ok_or_else(|| Error::Invalid("add_all of an empty list".into()))?;
        rest.iter().try_fold(first, |acc, &v| self.add(acc, v))
    }

    /// Mean elementwise sigmoid cross-entropy between `logits` and `target`.
    ///
    /// Targets must lie in `[0, 1]`. The gradient with respect to each logit
    /// is `(sigmoid(x) - z) / n`.
    pub fn sigmoid_ce(&mut self, logits: Var, target: &Tensor<T>) -> Result<Var> {
        let x = self.value(logits);
        x.expect_same_shape(target, "sigmoid_ce")?;
        if let Some(bad) = target
            .data()
            .iter()
            .find(|z| !(**z >= T::zero() && **z <= T::one()))
        {
            return Err(Error::TargetRange(bad.as_f64()));
        }
        let n = T::from_usize(x.len()).expect("element count");
        let total: T = x
            .data()
            .iter()
            .zip(target.data())
            .map(|(&a, &z)| sigmoid_ce_element(a, z))
            .sum();
        let rg = self.needs(&[logits]);
        Ok(self.push(
            Tensor::scalar(total / n),
            Op::SigmoidCe {
                logits,
                target: target.clone(),
            },
            rg,
        ))
    }

    /// Gradients of the scalar node `loss` with respect to every recorded
    /// node that depends on a [`Tape::leaf`].
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let loss_shape = self.value(loss).shape();
        if !self.value(loss).is_scalar() {
            return Err(Error::NonScalar(loss_shape.to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(loss_shape));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weights,
                bias,
            } => {
                let cg = tensor::conv2d_backward(
                    self.value(*input),
                    self.value(*weights),
                    g,
                    self.nodes[input.0].requires_grad,
                    self.nodes[weights.0].requires_grad,
                );
                if let Some(gi) = cg.input {
                    self.accumulate(grads, *input, gi);
                }
                if let Some(gw) = cg.weights {
                    self.accumulate(grads, *weights, gw);
                }
                if let Some(b) = bias {
                    self.accumulate(grads, *b, cg.bias);
                }
            }
            Op::MaxPool2 { input, argmax } => {
                let mut gi = Tensor::zeros(self.shape(*input));
                let d = gi.data_mut();
                for (&src, &gv) in argmax.iter().zip(g.data()) {
                    d[src] = d[src] + gv;
                }
                self.accumulate(grads, *input, gi);
            }
            Op::Upsample2(input) => {
                let (c, h, w) = self.value(*input).chw("upsample backward")?;
                self.accumulate(grads, *input, tensor::upsample_backward(g, c, h, w));
            }
            Op::Unary(kind, a) => {
                let y = &node.value;
                let gi = match kind {
                    Unary::Sigmoid => g.zip_map(y, "sigmoid'", |gv, s| gv * s * (T::one() - s))?,
                    Unary::Tanh => g.zip_map(y, "tanh'", |gv, t| gv * (T::one() - t * t))?,
                    Unary::Relu => g.zip_map(y, "relu'", |gv, r| {
                        if r > T::zero() {
                            gv
                        } else {
                            T::zero()
                        }
                    })?,
                    Unary::OneMinus => g.map(|gv| -gv),
                };
                self.accumulate(grads, *a, gi);
            }
            Op::Binary(kind, a, b) => match kind {
                Binary::Add => {
                    self.accumulate(grads, *a, g.clone());
                    self.accumulate(grads, *b, g.clone());
                }
                Binary::Sub => {
                    self.accumulate(grads, *a, g.clone());
                    self.accumulate(grads, *b, g.map(|v| -v));
                }
                Binary::Mul => {
                    if self.nodes[a.0].requires_grad {
                        let ga = g.zip_map(self.value(*b), "mul'", |p, q| p * q)?;
                        self.accumulate(grads, *a, ga);
                    }
                    if self.nodes[b.0].requires_grad {
                        let gb = g.zip_map(self.value(*a), "mul'", |p, q| p * q)?;
                        self.accumulate(grads, *b, gb);
                    }
                }
            },
            Op::Concat(a, b) => {
                let ca = self.shape(*a)[0];
                let cb = self.shape(*b)[0];
                self.accumulate(grads, *a, g.slice_channels(0..ca)?);
                self.accumulate(grads, *b, g.slice_channels(ca..ca + cb)?);
            }
            Op::Sum(a) => {
                let gv = g.item();
                self.accumulate(grads, *a, Tensor::full(self.shape(*a), gv));
            }
            Op::Scale(a, f) => {
                self.accumulate(grads, *a, g.scale(*f));
            }
            Op::SigmoidCe { logits, target } => {
                let x = self.value(*logits);
                let n = T::from_usize(x.len()).expect("element count");
                let scale = g.item() / n;
                let gi = x.zip_map(target, "sigmoid_ce'", |a, z| (sigmoid(a) - z) * scale)?;
                self.accumulate(grads, *logits, gi);
            }
        }
        Ok(())
    }
}

/// Rejects a scalar-valued function result that is not a single element.
pub(crate) fn expect_scalar<T: Real>(t: &Tensor<T>) -> Result<()> {
    if t.is_scalar() {
        Ok(())
    } else {
        Err(Error::NonScalar(t.shape().to_vec()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 9.0]));
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0; 6]);
        assert_eq!(g.get(s).unwrap().item(), 1.0);
    }

    #[test]
    fn grad_of_sum_of_squares_is_twice_input() {
        let mut tape = Tape::new();
        let data = [1.0, -2.0, 3.0, 0.5];
        let x = tape.leaf(t(&[4], &data));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        let g = tape.backward(s).unwrap();
        let want: Vec<f64> = data.iter().map(|v| 2.0 * v).collect();
        assert_eq!(g.get(x).unwrap().data(), want.as_slice());
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        let y = tape.sigmoid(x);
        assert!(matches!(tape.backward(y), Err(Error::NonScalar(_))));
    }

    #[test]
    fn elementwise_identities() {
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(Tensor::zeros(&[1]));
        let s = tape.sigmoid(z);
        let th = tape.tanh(z);
        assert_eq!(tape.value(s).item(), 0.5);
        assert_eq!(tape.value(th).item(), 0.0);

        let x = tape.constant(t(&[5], &[-40.0, -1.0, 0.0, 2.5, 40.0]));
        let s = tape.sigmoid(x);
        let om = tape.one_minus(s);
        let total = tape.add(om, s).unwrap();
        for v in tape.value(total).data() {
            assert!((v - 1.0).abs() < 1e-15);
        }
        let a = tape.constant(Tensor::zeros(&[2]));
        assert!(tape.add(a, x).is_err());
        assert!(tape.mul(a, x).is_err());
        assert!(tape.sub(a, x).is_err());
    }

    #[test]
    fn maxpool_tie_routes_gradient_to_first() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 2, 2], &[4.0, 4.0, 1.0, 2.0]));
        let p = tape.maxpool2(x).unwrap();
        let s = tape.sum(p);
        assert_eq!(tape.value(p).data(), &[4.0]);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn upsample_gradient_counts_replicas() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2, 2, 3], &[0.1; 12]));
        let u = tape.upsample_nearest2(x).unwrap();
        let s = tape.sum(u);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[4.0; 12]);
    }

    #[test]
    fn concat_gradient_splits() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::zeros(&[1, 2, 2]));
        let b = tape.leaf(Tensor::zeros(&[2, 2, 2]));
        let c = tape.concat_channels(a, b).unwrap();
        assert_eq!(tape.shape(c), &[3, 2, 2]);
        let s = tape.sum(c);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[1.0; 4]);
        assert_eq!(g.get(b).unwrap().shape(), &[2, 2, 2]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(t(&[2], &[1.0, 2.0]));
        let x = tape.leaf(t(&[2], &[3.0, 4.0]));
        let p = tape.mul(c, x).unwrap();
        let s = tape.sum(p);
        let g = tape.backward(s).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn sigmoid_ce_rejects_targets_outside_unit_interval() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::<f64>::zeros(&[2]));
        assert!(matches!(
            tape.sigmoid_ce(x, &t(&[2], &[0.5, 1.5])),
            Err(Error::TargetRange(_))
        ));
        assert!(tape.sigmoid_ce(x, &t(&[3], &[0.5; 3])).is_err());
    }
}
