//! Elementwise arithmetic with broadcasting, and reductions.

use std::sync::Arc;

use super::{numel_of, Float, Tensor};
use crate::{Error, Result};

/// Maps an output linear index to the linear index of a broadcast operand.
#[derive(Clone)]
enum Bcast {
    Same,
    /// Operand shape is a suffix of the output shape.
    Cycle(usize),
    Map(Arc<Vec<usize>>),
}

impl Bcast {
    #[inline]
    fn at(&self, i: usize) -> usize {
        match self {
            Bcast::Same => i,
            Bcast::Cycle(n) => i % n,
            Bcast::Map(m) => m[i],
        }
    }

    fn plan(src: &[usize], out: &[usize]) -> Self {
        if src == out {
            return Bcast::Same;
        }
        let trimmed: &[usize] = {
            let lead = src.iter().take_while(|&&d| d == 1).count();
            &src[lead..]
        };
        if out.ends_with(trimmed) {
            return Bcast::Cycle(numel_of(trimmed).max(1));
        }
        // General case: right-align and use stride 0 on broadcast dims.
        let offset = out.len() - src.len();
        let mut src_strides = vec![0usize; out.len()];
        let mut stride = 1;
        for d in (0..src.len()).rev() {
            if src[d] != 1 {
                src_strides[d + offset] = stride;
            }
            stride *= src[d];
        }
        let total = numel_of(out);
        let mut map = Vec::with_capacity(total);
        let mut idx = vec![0usize; out.len()];
        let mut pos = 0usize;
        for _ in 0..total {
            map.push(pos);
            for d in (0..out.len()).rev() {
                idx[d] += 1;
                pos += src_strides[d];
                if idx[d] < out[d] {
                    break;
                }
                pos -= src_strides[d] * out[d];
                idx[d] = 0;
            }
        }
        Bcast::Map(Arc::new(map))
    }
}

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::shape(format!(
                    "shapes {a:?} and {b:?} are not broadcast-compatible"
                )))
            }
        };
    }
    Ok(out)
}

#[derive(Clone, Copy)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinOp {
    fn name(self) -> &'static str {
        match self {
            BinOp::Add => "add",
            BinOp::Sub => "sub",
            BinOp::Mul => "mul",
            BinOp::Div => "div",
        }
    }

    #[inline]
    fn apply<S: Float>(self, x: S, y: S) -> S {
        match self {
            BinOp::Add => x + y,
            BinOp::Sub => x - y,
            BinOp::Mul => x * y,
            BinOp::Div => x / y,
        }
    }
}

impl<S: Float> Tensor<S> {
    fn binary(&self, other: &Tensor<S>, op: BinOp) -> Result<Tensor<S>> {
        let out_shape = broadcast_shape(self.shape(), other.shape())?;
        let ba = Bcast::plan(self.shape(), &out_shape);
        let bb = Bcast::plan(other.shape(), &out_shape);
        let (a, b) = (self.data(), other.data());
        let n = numel_of(&out_shape);
        let data: Vec<S> = match (&ba, &bb) {
            (Bcast::Same, Bcast::Same) => a.iter().zip(b).map(|(&x, &y)| op.apply(x, y)).collect(),
            (Bcast::Same, Bcast::Cycle(m)) => a
                .chunks(*m)
                .flat_map(|row| row.iter().zip(b).map(|(&x, &y)| op.apply(x, y)))
                .collect(),
            _ => (0..n).map(|i| op.apply(a[ba.at(i)], b[bb.at(i)])).collect(),
        };
        let (na, nb) = (self.numel(), other.numel());
        Ok(Tensor::from_op(
            out_shape,
            data,
            op.name(),
            vec![self.clone(), other.clone()],
            Box::new(move |g: &[S], inputs: &[Tensor<S>]| {
                let (a, b) = (inputs[0].data(), inputs[1].data());
                let need_a = inputs[0].requires_grad();
                let need_b = inputs[1].requires_grad();
                let (ga_full, gb_full): (Option<Vec<S>>, Option<Vec<S>>) = match op {
                    BinOp::Add => (need_a.then(|| g.to_vec()), need_b.then(|| g.to_vec())),
                    BinOp::Sub => (
                        need_a.then(|| g.to_vec()),
                        need_b.then(|| g.iter().map(|&x| -x).collect()),
                    ),
                    BinOp::Mul => (
                        need_a.then(|| g.iter().enumerate().map(|(i, &gi)| gi * b[bb.at(i)]).collect()),
                        need_b.then(|| g.iter().enumerate().map(|(i, &gi)| gi * a[ba.at(i)]).collect()),
                    ),
                    BinOp::Div => (
                        need_a.then(|| g.iter().enumerate().map(|(i, &gi)| gi / b[bb.at(i)]).collect()),
                        need_b.then(|| {
                            g.iter()
                                .enumerate()
                                .map(|(i, &gi)| {
                                    let y = b[bb.at(i)];
                                    -gi * a[ba.at(i)] / (y * y)
                                })
                                .collect()
                        }),
                    ),
                };
                vec![
                    ga_full.map(|v| reduce_to(&ba, &v, na)),
                    gb_full.map(|v| reduce_to(&bb, &v, nb)),
                ]
            }),
        ))
    }

    /// Elementwise sum with numpy-style broadcasting.
    pub fn add(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        self.binary(other, BinOp::Add)
    }

    pub fn sub(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        self.binary(other, BinOp::Sub)
    }

    pub fn mul(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        self.binary(other, BinOp::Mul)
    }

    pub fn div(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        self.binary(other, BinOp::Div)
    }

    pub fn scale(&self, s: S) -> Tensor<S> {
        let data = self.data().iter().map(|&x| x * s).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            "scale",
            vec![self.clone()],
            Box::new(move |g: &[S], _: &[Tensor<S>]| vec![Some(g.iter().map(|&x| x * s).collect())]),
        )
    }

    pub fn add_scalar(&self, s: S) -> Tensor<S> {
        let data = self.data().iter().map(|&x| x + s).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            "add_scalar",
            vec![self.clone()],
            Box::new(|g: &[S], _: &[Tensor<S>]| vec![Some(g.to_vec())]),
        )
    }

    pub fn neg(&self) -> Tensor<S> {
        self.scale(-S::one())
    }

    /// Sum of all elements as a 0-d tensor.
    pub fn sum(&self) -> Tensor<S> {
        let total: S = self.data().iter().copied().sum();
        let n = self.numel();
        Tensor::from_op(
            Vec::new(),
            vec![total],
            "sum",
            vec![self.clone()],
            Box::new(move |g: &[S], _: &[Tensor<S>]| vec![Some(vec![g[0]; n])]),
        )
    }

    /// Mean of all elements as a 0-d tensor.
    pub fn mean(&self) -> Tensor<S> {
        let n = self.numel().max(1);
        self.sum().scale(S::one() / S::of(n as f64))
    }

    /// Sums over the last dimension, keeping it with extent 1.
    pub fn sum_last(&self) -> Tensor<S> {
        let d = self.last_dim().max(1);
        let data: Vec<S> = self.data().chunks(d).map(|r| r.iter().copied().sum()).collect();
        let shape = keepdim_shape(self.shape());
        Tensor::from_op(
            shape,
            data,
            "sum_last",
            vec![self.clone()],
            Box::new(move |g: &[S], _: &[Tensor<S>]| {
                vec![Some(g.iter().flat_map(|&gi| std::iter::repeat_n(gi, d)).collect())]
            }),
        )
    }

    /// Euclidean norm over the last dimension, keeping it with extent 1.
    pub fn l2_norm_last(&self) -> Tensor<S> {
        let d = self.last_dim().max(1);
        let norms: Vec<S> = self
            .data()
            .chunks(d)
            .map(|r| r.iter().map(|&x| x * x).sum::<S>().sqrt())
            .collect();
        let saved = Arc::new(norms.clone());
        Tensor::from_op(
            keepdim_shape(self.shape()),
            norms,
            "l2_norm_last",
            vec![self.clone()],
            Box::new(move |g: &[S], inputs: &[Tensor<S>]| {
                let x = inputs[0].data();
                let mut out = Vec::with_capacity(x.len());
                for ((row, &n), &gi) in x.chunks(d).zip(saved.iter()).zip(g) {
                    if n > S::zero() {
                        out.extend(row.iter().map(|&v| gi * v / n));
                    } else {
                        out.extend(std::iter::repeat_n(S::zero(), d));
                    }
                }
                vec![Some(out)]
            }),
        )
    }
}

fn keepdim_shape(shape: &[usize]) -> Vec<usize> {
    let mut s = shape.to_vec();
    match s.last_mut() {
        Some(last) => *last = 1,
        None => s.push(1),
    }
    s
}

fn reduce_to<S: Float>(plan: &Bcast, g: &[S], src_numel: usize) -> Vec<S> {
    match plan {
        Bcast::Same => g.to_vec(),
        Bcast::Cycle(m) => {
            let mut out = vec![S::zero(); src_numel];
            for row in g.chunks(*m) {
                out.iter_mut().zip(row).for_each(|(o, &v)| *o += v);
            }
            out
        }
        Bcast::Map(map) => {
            let mut out = vec![S::zero(); src_numel];
            for (&i, &v) in map.iter().zip(g) {
                out[i] += v;
            }
            out
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, GradCheck};

    fn t(data: &[f64], shape: &[usize]) -> Tensor<f64> {
        Tensor::from_f64(data, shape).unwrap()
    }

    #[test]
    fn broadcast_shapes() {
        assert_eq!(broadcast_shape(&[2, 3], &[3]).unwrap(), vec![2, 3]);
        assert_eq!(broadcast_shape(&[2, 1, 4], &[3, 1]).unwrap(), vec![2, 3, 4]);
        assert!(broadcast_shape(&[2, 3], &[2]).is_err());
    }

    #[test]
    fn add_with_suffix_and_general_broadcast() {
        let a = t(&[1., 2., 3., 4., 5., 6.], &[2, 3]);
        let b = t(&[10., 20., 30.], &[3]);
        assert_eq!(a.add(&b).unwrap().data(), &[11., 22., 33., 14., 25., 36.]);
        let c = t(&[100., 200.], &[2, 1]);
        assert_eq!(a.add(&c).unwrap().data(), &[101., 102., 103., 204., 205., 206.]);
    }

    #[test]
    fn keepdim_reductions() {
        let a = t(&[3., 4., 0., 0.], &[2, 2]);
        let n = a.l2_norm_last();
        assert_eq!(n.shape(), &[2, 1]);
        assert_eq!(n.data(), &[5., 0.]);
        assert_eq!(a.sum_last().data(), &[7., 0.]);
        assert_eq!(a.mean().item().unwrap(), 1.75);
    }

    #[test]
    fn elementwise_gradients_match_finite_differences() {
        let check = GradCheck::default();
        let a = t(&[0.3, -1.2, 0.7, 2.0, -0.4, 1.1], &[2, 3]);
        let b = t(&[1.5, -0.8, 0.9], &[3]);
        let c = t(&[0.6, 1.7], &[2, 1]);
        for op in 0..4 {
            let report = check_gradients(
                &[a.clone(), b.clone(), c.clone()],
                |x| {
                    let ab = match op {
                        0 => x[0].add(&x[1])?,
                        1 => x[0].sub(&x[1])?,
                        2 => x[0].mul(&x[1])?,
                        _ => x[0].div(&x[1])?,
                    };
                    let out = ab.mul(&x[2])?.scale(1.3).add_scalar(0.2);
                    Ok(out.mul(&out)?.sum())
                },
                &check,
            )
            .unwrap();
            assert!(report.passed(), "op {op}: {report:?}");
        }
    }

    #[test]
    fn reduction_gradients_match_finite_differences() {
        let a = t(&[0.3, -1.2, 0.7, 2.0, -0.4, 1.1], &[2, 3]);
        let w = t(&[0.5, -2.0], &[2, 1]);
        let report = check_gradients(
            &[a],
            |x| {
                let n = x[0].l2_norm_last().mul(&w)?;
                let s = x[0].sum_last().mul(&n)?;
                Ok(s.sum().add(&x[0].mean())?)
            },
            &GradCheck::default(),
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }
}
