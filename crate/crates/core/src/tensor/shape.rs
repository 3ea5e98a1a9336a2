//! Reshape, transpose, slicing and concatenation. Reshape shares storage;
//! everything else copies into a fresh row-major buffer.

use super::ops::broadcast_shape;
use super::{numel_of, Float, Tensor};
use crate::{Error, Result};

fn check_dim(shape: &[usize], dim: usize, what: &str) -> Result<()> {
    if dim >= shape.len() {
        return Err(Error::shape(format!(
            "{what}: dimension {dim} out of range for shape {shape:?}"
        )));
    }
    Ok(())
}

/// Copies `src` (shape `shape`) with axes `d0` and `d1` swapped.
fn swap_axes<S: Float>(src: &[S], shape: &[usize], d0: usize, d1: usize) -> Vec<S> {
    let (d0, d1) = (d0.min(d1), d0.max(d1));
    let outer: usize = shape[..d0].iter().product();
    let a = shape[d0];
    let mid: usize = shape[d0 + 1..d1].iter().product();
    let b = shape[d1];
    let inner: usize = shape[d1 + 1..].iter().product();
    let mut out = Vec::with_capacity(src.len());
    // Output layout: [outer, b, mid, a, inner].
    for o in 0..outer {
        for j in 0..b {
            for m in 0..mid {
                for i in 0..a {
                    let start = (((o * a + i) * mid + m) * b + j) * inner;
                    out.extend_from_slice(&src[start..start + inner]);
                }
            }
        }
    }
    out
}

impl<S: Float> Tensor<S> {
    /// Reinterprets the data with a new shape of equal element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<S>> {
        if numel_of(shape) != self.numel() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape()
            )));
        }
        let from = self.shape().to_vec();
        Ok(Tensor::from_op_shared(
            shape.to_vec(),
            self.shared_data(),
            "reshape",
            vec![self.clone()],
            Box::new(move |g: &[S], _: &[Tensor<S>]| {
                debug_assert_eq!(g.len(), numel_of(&from));
                vec![Some(g.to_vec())]
            }),
        ))
    }

    /// Swaps two dimensions.
    pub fn transpose(&self, d0: usize, d1: usize) -> Result<Tensor<S>> {
        check_dim(self.shape(), d0, "transpose")?;
        check_dim(self.shape(), d1, "transpose")?;
        if d0 == d1 {
            return self.reshape(&self.shape().to_vec());
        }
        let mut out_shape = self.shape().to_vec();
        out_shape.swap(d0, d1);
        let data = swap_axes(self.data(), self.shape(), d0, d1);
        let back_shape = out_shape.clone();
        Ok(Tensor::from_op(
            out_shape,
            data,
            "transpose",
            vec![self.clone()],
            Box::new(move |g: &[S], _: &[Tensor<S>]| {
                vec![Some(swap_axes(g, &back_shape, d0, d1))]
            }),
        ))
    }

    /// Elements `start..start + len` along `dim`.
    pub fn narrow(&self, dim: usize, start: usize, len: usize) -> Result<Tensor<S>> {
        check_dim(self.shape(), dim, "narrow")?;
        let extent = self.shape()[dim];
        if start + len > extent {
            return Err(Error::shape(format!(
                "narrow: range {start}..{} exceeds extent {extent} of dim {dim}",
                start + len
            )));
        }
        let outer: usize = self.shape()[..dim].iter().product();
        let inner: usize = self.shape()[dim + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * extent + start) * inner;
            data.extend_from_slice(&self.data()[base..base + len * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[dim] = len;
        let total = self.numel();
        Ok(Tensor::from_op(
            shape,
            data,
            "narrow",
            vec![self.clone()],
            Box::new(move |g: &[S], _: &[Tensor<S>]| {
                let mut full = vec![S::zero(); total];
                for o in 0..outer {
                    let base = (o * extent + start) * inner;
                    full[base..base + len * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(full)]
            }),
        ))
    }

    /// Joins tensors along `dim`; all other extents must agree.
    pub fn concat(parts: &[&Tensor<S>], dim: usize) -> Result<Tensor<S>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat of zero tensors"))?;
        check_dim(first.shape(), dim, "concat")?;
        for p in parts {
            let same_rank = p.ndim() == first.ndim();
            let same_rest = same_rank
                && p.shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(d, (a, b))| d == dim || a == b);
            if !same_rest {
                return Err(Error::shape(format!(
                    "concat along {dim}: {:?} incompatible with {:?}",
                    p.shape(),
                    first.shape()
                )));
            }
        }
        let outer: usize = first.shape()[..dim].iter().product();
        let inner: usize = first.shape()[dim + 1..].iter().product();
        let extents: Vec<usize> = parts.iter().map(|p| p.shape()[dim]).collect();
        let total_extent: usize = extents.iter().sum();
        let mut data = Vec::with_capacity(outer * total_extent * inner);
        for o in 0..outer {
            for (p, &e) in parts.iter().zip(&extents) {
                data.extend_from_slice(&p.data()[o * e * inner..(o + 1) * e * inner]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[dim] = total_extent;
        Ok(Tensor::from_op(
            shape,
            data,
            "concat",
            parts.iter().map(|&p| p.clone()).collect(),
            Box::new(move |g: &[S], inputs: &[Tensor<S>]| {
                let mut grads: Vec<Vec<S>> = extents
                    .iter()
                    .map(|&e| Vec::with_capacity(outer * e * inner))
                    .collect();
                let mut pos = 0;
                for _ in 0..outer {
                    for (gp, &e) in grads.iter_mut().zip(&extents) {
                        gp.extend_from_slice(&g[pos..pos + e * inner]);
                        pos += e * inner;
                    }
                }
                grads
                    .into_iter()
                    .zip(inputs)
                    .map(|(gp, t)| t.requires_grad().then_some(gp))
                    .collect()
            }),
        ))
    }

    /// Repeats the tensor to `shape` following broadcasting rules.
    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Tensor<S>> {
        let target = broadcast_shape(self.shape(), shape)?;
        if target != shape {
            return Err(Error::shape(format!(
                "cannot broadcast {:?} to {shape:?}",
                self.shape()
            )));
        }
        // x * 1 with the broadcasting multiply carries the reduction rule.
        self.mul(&Tensor::ones(shape))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, GradCheck};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn transpose_2d() {
        let a = Tensor::<f64>::from_f64(&[1., 2., 3., 4., 5., 6.], &[2, 3]).unwrap();
        let t = a.transpose(0, 1).unwrap();
        assert_eq!(t.shape(), &[3, 2]);
        assert_eq!(t.data(), &[1., 4., 2., 5., 3., 6.]);
    }

    #[test]
    fn narrow_and_concat_invert() {
        let a = Tensor::<f64>::from_f64(&[1., 2., 3., 4., 5., 6.], &[2, 3]).unwrap();
        let l = a.narrow(1, 0, 1).unwrap();
        let r = a.narrow(1, 1, 2).unwrap();
        assert_eq!(l.data(), &[1., 4.]);
        let back = Tensor::concat(&[&l, &r], 1).unwrap();
        assert_eq!(back.data(), a.data());
        assert!(a.narrow(1, 2, 2).is_err());
        let empty = a.narrow(1, 0, 0).unwrap();
        let same = Tensor::concat(&[&empty, &a], 1).unwrap();
        assert_eq!(same.data(), a.data());
    }

    #[test]
    fn broadcast_to_rejects_incompatible() {
        let a = Tensor::<f64>::from_f64(&[1., 2.], &[1, 2]).unwrap();
        assert_eq!(a.broadcast_to(&[3, 2]).unwrap().data(), &[1., 2., 1., 2., 1., 2.]);
        assert!(a.broadcast_to(&[2]).is_err());
    }

    #[test]
    fn shape_op_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Tensor::<f64>::randn(&[2, 3, 4], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(&[2, 2, 4], 1.0, &mut rng);
        let s = Tensor::<f64>::randn(&[1, 3, 4], 1.0, &mut rng);
        let w = Tensor::<f64>::randn(&[4, 3, 2], 1.0, &mut rng);
        let rep = check_gradients(
            &[a, b, s],
            |x| {
                let c = Tensor::concat(&[&x[0], &x[1]], 1)?;
                let c = c.narrow(1, 1, 3)?.add(&x[2].broadcast_to(&[2, 3, 4])?)?;
                let t = c.transpose(0, 2)?.reshape(&[4, 6])?.reshape(&[4, 3, 2])?;
                Ok(t.mul(&w)?.sum())
            },
            &GradCheck::default(),
        )
        .unwrap();
        assert!(rep.passed(), "{rep:?}");
    }

    proptest! {
        #[test]
        fn reshape_transpose_round_trip_is_bit_identical(
            dims in proptest::collection::vec(1usize..4, 2..5),
            seed in 0u64..1000,
            d0 in 0usize..4,
            d1 in 0usize..4,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = Tensor::<f64>::randn(&dims, 1.0, &mut rng);
            let (d0, d1) = (d0 % dims.len(), d1 % dims.len());
            let t = a.transpose(d0, d1).unwrap().transpose(d0, d1).unwrap();
            prop_assert_eq!(t.shape(), a.shape());
            prop_assert!(t.data().iter().zip(a.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
            let flat = a.reshape(&[a.numel()]).unwrap().reshape(&dims).unwrap();
            prop_assert!(flat.data().iter().zip(a.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }
}
