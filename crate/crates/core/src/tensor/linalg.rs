//! Batched matrix products. The inner kernel is `matrixmultiply`'s strided
//! gemm, which lets the backward pass read transposed operands in place.

use super::ops::broadcast_shape;
use super::{numel_of, Float, Tensor};
use crate::{Error, Result};

/// Row and column strides of a matrix operand.
#[derive(Clone, Copy)]
struct View {
    rs: isize,
    cs: isize,
}

/// Geometry of one `[..., m, k] x [..., k, n]` product.
#[derive(Clone)]
struct Plan {
    m: usize,
    k: usize,
    n: usize,
    /// Whether the right operand is stored `[..., n, k]`.
    trans_b: bool,
    /// Per output batch entry: (offset into a, offset into b).
    pairs: Vec<(usize, usize)>,
    out_shape: Vec<usize>,
}

impl Plan {
    fn new(a: &[usize], b: &[usize], trans_b: bool) -> Result<Self> {
        if a.len() < 2 || b.len() < 2 {
            return Err(Error::shape(format!(
                "matmul needs operands of rank >= 2, got {a:?} and {b:?}"
            )));
        }
        let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
        let (kb, n) = if trans_b {
            (b[b.len() - 1], b[b.len() - 2])
        } else {
            (b[b.len() - 2], b[b.len() - 1])
        };
        if k != kb {
            return Err(Error::shape(format!(
                "matmul inner extents differ: {a:?} x {b:?}{} ({k} vs {kb})",
                if trans_b { "^T" } else { "" }
            )));
        }
        let batch_a = &a[..a.len() - 2];
        let batch_b = &b[..b.len() - 2];
        let batch = broadcast_shape(batch_a, batch_b)?;
        let mut out_shape = batch.clone();
        out_shape.extend([m, n]);
        if numel_of(batch_b) == 1 {
            // A single right-hand matrix: fold every batch row of `a` into m.
            return Ok(Plan {
                m: numel_of(batch_a) * m,
                k,
                n,
                trans_b,
                pairs: vec![(0, 0)],
                out_shape,
            });
        }
        let strides = |src: &[usize]| -> Vec<usize> {
            let off = batch.len() - src.len();
            let mut s = vec![0; batch.len()];
            let mut acc = 1;
            for d in (0..src.len()).rev() {
                if src[d] != 1 {
                    s[d + off] = acc;
                }
                acc *= src[d];
            }
            s
        };
        let (sa, sb) = (strides(batch_a), strides(batch_b));
        let mut pairs = Vec::with_capacity(numel_of(&batch));
        let mut idx = vec![0usize; batch.len()];
        for _ in 0..numel_of(&batch) {
            let ia: usize = idx.iter().zip(&sa).map(|(i, s)| i * s).sum();
            let ib: usize = idx.iter().zip(&sb).map(|(i, s)| i * s).sum();
            pairs.push((ia * m * k, ib * k * n));
            for d in (0..batch.len()).rev() {
                idx[d] += 1;
                if idx[d] < batch[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        Ok(Plan {
            m,
            k,
            n,
            trans_b,
            pairs,
            out_shape,
        })
    }

    fn a_view(&self) -> View {
        View {
            rs: self.k as isize,
            cs: 1,
        }
    }

    /// Logical `[k, n]` view of the right operand.
    fn b_view(&self) -> View {
        if self.trans_b {
            View {
                rs: 1,
                cs: self.k as isize,
            }
        } else {
            View {
                rs: self.n as isize,
                cs: 1,
            }
        }
    }
}

fn forward<S: Float>(plan: &Plan, a: &[S], b: &[S]) -> Vec<S> {
    let (m, k, n) = (plan.m, plan.k, plan.n);
    let mut out = vec![S::zero(); plan.pairs.len() * m * n];
    let (av, bv) = (plan.a_view(), plan.b_view());
    for (bi, &(oa, ob)) in plan.pairs.iter().enumerate() {
        let c = &mut out[bi * m * n..(bi + 1) * m * n];
        if m == 0 || n == 0 {
            continue;
        }
        // SAFETY: offsets and strides stay within the operand buffers by
        // construction of `Plan`; `c` is an exclusive slice of m*n elements.
        unsafe {
            S::gemm(
                m,
                k,
                n,
                S::one(),
                a.as_ptr().add(oa),
                av.rs,
                av.cs,
                b.as_ptr().add(ob),
                bv.rs,
                bv.cs,
                S::zero(),
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
    out
}

fn backward<S: Float>(
    plan: &Plan,
    g: &[S],
    inputs: &[Tensor<S>],
) -> Vec<Option<Vec<S>>> {
    let (m, k, n) = (plan.m, plan.k, plan.n);
    let (a, b) = (inputs[0].data(), inputs[1].data());
    let (av, bv) = (plan.a_view(), plan.b_view());
    let ga = inputs[0].requires_grad().then(|| {
        let mut ga = vec![S::zero(); a.len()];
        for (bi, &(oa, ob)) in plan.pairs.iter().enumerate() {
            if m == 0 || k == 0 {
                continue;
            }
            // dA[m,k] += dC[m,n] * B^T; B^T has strides swapped.
            // SAFETY: see `forward`.
            unsafe {
                S::gemm(
                    m,
                    n,
                    k,
                    S::one(),
                    g.as_ptr().add(bi * m * n),
                    n as isize,
                    1,
                    b.as_ptr().add(ob),
                    bv.cs,
                    bv.rs,
                    S::one(),
                    ga.as_mut_ptr().add(oa),
                    av.rs,
                    av.cs,
                );
            }
        }
        ga
    });
    let gb = inputs[1].requires_grad().then(|| {
        let mut gb = vec![S::zero(); b.len()];
        for (bi, &(oa, ob)) in plan.pairs.iter().enumerate() {
            if k == 0 || n == 0 {
                continue;
            }
            // dB[k,n] += A^T[k,m] * dC[m,n], written through B's layout.
            // SAFETY: see `forward`.
            unsafe {
                S::gemm(
                    k,
                    m,
                    n,
                    S::one(),
                    a.as_ptr().add(oa),
                    av.cs,
                    av.rs,
                    g.as_ptr().add(bi * m * n),
                    n as isize,
                    1,
                    S::one(),
                    gb.as_mut_ptr().add(ob),
                    bv.rs,
                    bv.cs,
                );
            }
        }
        gb
    });
    vec![ga, gb]
}

impl<S: Float> Tensor<S> {
    fn matmul_impl(&self, other: &Tensor<S>, trans_b: bool) -> Result<Tensor<S>> {
        let plan = Plan::new(self.shape(), other.shape(), trans_b)?;
        let data = forward(&plan, self.data(), other.data());
        let shape = plan.out_shape.clone();
        Ok(Tensor::from_op(
            shape,
            data,
            if trans_b { "matmul_t" } else { "matmul" },
            vec![self.clone(), other.clone()],
            Box::new(move |g: &[S], inputs: &[Tensor<S>]| backward(&plan, g, inputs)),
        ))
    }

    /// Matrix product `[..., m, k] x [..., k, n] -> [..., m, n]`; batch
    /// dimensions broadcast.
    pub fn matmul(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        self.matmul_impl(other, false)
    }

    /// `self x other^T` over the last two dimensions of `other`, without
    /// materializing the transpose: `[..., m, k] x [..., n, k] -> [..., m, n]`.
    pub fn matmul_t(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        self.matmul_impl(other, true)
    }
}
