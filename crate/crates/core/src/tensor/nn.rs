//! Fused neural-network primitives with hand-written backward rules.

use std::sync::Arc;

use super::{numel_of, Float, Tensor};
use crate::{Error, Result};

/// Softmax of one row in place; `None` when every entry is `-inf`. NaN
/// inputs propagate as NaN outputs.
#[inline]
fn softmax_row<S: Float>(row: &mut [S]) -> Option<()> {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    if max == S::neg_infinity() {
        if row.iter().any(|x| x.is_nan()) {
            row.iter_mut().for_each(|x| *x = S::nan());
            return Some(());
        }
        return None;
    }
    let mut total = S::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    let inv = S::one() / total;
    row.iter_mut().for_each(|x| *x *= inv);
    Some(())
}

/// `dx = scale * y * (g - sum(g * y))` row by row.
fn softmax_backward<S: Float>(y: &[S], g: &[S], d: usize, scale: S) -> Vec<S> {
    let mut out = Vec::with_capacity(y.len());
    for (yr, gr) in y.chunks(d).zip(g.chunks(d)) {
        let dot: S = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        out.extend(yr.iter().zip(gr).map(|(&a, &b)| scale * a * (b - dot)));
    }
    out
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

impl<S: Float> Tensor<S> {
    /// Softmax over the last dimension. `-inf` entries map to exactly zero;
    /// a slice that is entirely `-inf` is an error.
    pub fn softmax_last(&self) -> Result<Tensor<S>> {
        let d = self.last_dim();
        if d == 0 {
            return Err(Error::shape("softmax over an empty dimension"));
        }
        let mut data = self.to_vec();
        for (i, row) in data.chunks_mut(d).enumerate() {
            softmax_row(row).ok_or(Error::FullyMasked(i))?;
        }
        let saved = Arc::new(data);
        Ok(Tensor::from_op_shared(
            self.shape().to_vec(),
            Arc::clone(&saved),
            "softmax",
            vec![self.clone()],
            Box::new(move |g: &[S], _: &[Tensor<S>]| {
                vec![Some(softmax_backward(&saved, g, d, S::one()))]
            }),
        ))
    }

    /// Attention probabilities from raw scores `[..., tq, tk]`: multiplies by
    /// `scale`, masks keys `j > i + (tk - tq)` and applies a row softmax, in a
    /// single pass. Masked entries are exactly zero.
    pub fn causal_softmax(&self, scale: S) -> Result<Tensor<S>> {
        if self.ndim() < 2 {
            return Err(Error::shape("causal_softmax needs rank >= 2"));
        }
        let tq = self.shape()[self.ndim() - 2];
        let tk = self.last_dim();
        if tk < tq {
            return Err(Error::shape(format!(
                "causal_softmax: {tq} queries cannot see {tk} keys causally"
            )));
        }
        let offset = tk - tq;
        let mut data = self.to_vec();
        if tk > 0 {
            for (r, row) in data.chunks_mut(tk).enumerate() {
                let visible = r % tq.max(1) + offset + 1;
                let (live, masked) = row.split_at_mut(visible);
                live.iter_mut().for_each(|x| *x *= scale);
                softmax_row(live).ok_or(Error::FullyMasked(r))?;
                masked.iter_mut().for_each(|x| *x = S::zero());
            }
        }
        let saved = Arc::new(data);
        Ok(Tensor::from_op_shared(
            self.shape().to_vec(),
            Arc::clone(&saved),
            "causal_softmax",
            vec![self.clone()],
            Box::new(move |g: &[S], _: &[Tensor<S>]| {
                vec![Some(softmax_backward(&saved, g, tk.max(1), scale))]
            }),
        ))
    }

    /// Layer normalization over the last dimension with affine `gain`, `bias`.
    pub fn layer_norm(&self, gain: &Tensor<S>, bias: &Tensor<S>, eps: f64) -> Result<Tensor<S>> {
        let d = self.last_dim();
        gain.expect_shape(&[d], "layer_norm gain")?;
        bias.expect_shape(&[d], "layer_norm bias")?;
        let eps = S::of(eps);
        let inv_d = S::one() / S::of(d as f64);
        let rows = self.numel() / d.max(1);
        let mut xhat = Vec::with_capacity(self.numel());
        let mut inv_std = Vec::with_capacity(rows);
        for row in self.data().chunks(d) {
            let mean = row.iter().copied().sum::<S>() * inv_d;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<S>() * inv_d;
            let r = S::one() / (var + eps).sqrt();
            inv_std.push(r);
            xhat.extend(row.iter().map(|&x| (x - mean) * r));
        }
        let (g, b) = (gain.data(), bias.data());
        let out: Vec<S> = xhat
            .chunks(d)
            .flat_map(|row| row.iter().zip(g).zip(b).map(|((&x, &gi), &bi)| x * gi + bi))
            .collect();
        let xhat = Arc::new(xhat);
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            "layer_norm",
            vec![self.clone(), gain.clone(), bias.clone()],
            Box::new(move |gout: &[S], inputs: &[Tensor<S>]| {
                let g = inputs[1].data();
                let gx = inputs[0].requires_grad().then(|| {
                    let mut dx = Vec::with_capacity(xhat.len());
                    for ((xr, gr), &r) in xhat.chunks(d).zip(gout.chunks(d)).zip(inv_std.iter()) {
                        let mut mean_dxh = S::zero();
                        let mut mean_dxh_xh = S::zero();
                        for ((&xh, &go), &gi) in xr.iter().zip(gr).zip(g) {
                            let dxh = go * gi;
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * xh;
                        }
                        mean_dxh *= inv_d;
                        mean_dxh_xh *= inv_d;
                        dx.extend(
                            xr.iter()
                                .zip(gr)
                                .zip(g)
                                .map(|((&xh, &go), &gi)| r * (go * gi - mean_dxh - xh * mean_dxh_xh)),
                        );
                    }
                    dx
                });
                let mut dg = vec![S::zero(); d];
                let mut db = vec![S::zero(); d];
                for (xr, gr) in xhat.chunks(d).zip(gout.chunks(d)) {
                    for j in 0..d {
                        dg[j] += gr[j] * xr[j];
                        db[j] += gr[j];
                    }
                }
                vec![
                    gx,
                    inputs[1].requires_grad().then_some(dg),
                    inputs[2].requires_grad().then_some(db),
                ]
            }),
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Tensor<S> {
        let c = S::of(SQRT_2_OVER_PI);
        let k = S::of(GELU_CUBIC);
        let half = S::of(0.5);
        let data = self
            .data()
            .iter()
            .map(|&x| half * x * (S::one() + (c * (x + k * x * x * x)).tanh()))
            .collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            "gelu",
            vec![self.clone()],
            Box::new(move |g: &[S], inputs: &[Tensor<S>]| {
                let three = S::of(3.0);
                let dx = inputs[0]
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&x, &gi)| {
                        let t = (c * (x + k * x * x * x)).tanh();
                        let dt = (S::one() - t * t) * c * (S::one() + three * k * x * x);
                        gi * half * (S::one() + t + x * dt)
                    })
                    .collect();
                vec![Some(dx)]
            }),
        )
    }

    /// Mean cross-entropy (nats) of logits `[..., vocab]` against one target
    /// id per row.
    pub fn cross_entropy(&self, targets: &[usize]) -> Result<Tensor<S>> {
        let v = self.last_dim();
        let rows = if v == 0 { 0 } else { self.numel() / v };
        if rows != targets.len() || rows == 0 {
            return Err(Error::shape(format!(
                "cross_entropy: {} targets for logits of shape {:?}",
                targets.len(),
                self.shape()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::TokenOutOfRange { id: bad, vocab: v });
        }
        let mut probs = self.to_vec();
        let mut total = 0.0f64;
        for (row, &t) in probs.chunks_mut(v).zip(targets) {
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let lse = row.iter().map(|&x| (x - max).exp()).sum::<S>().ln() + max;
            total += (lse - row[t]).as_f64();
            row.iter_mut().for_each(|x| *x = (*x - lse).exp());
        }
        let loss = S::of(total / rows as f64);
        let targets = targets.to_vec();
        Ok(Tensor::from_op(
            Vec::new(),
            vec![loss],
            "cross_entropy",
            vec![self.clone()],
            Box::new(move |g: &[S], _: &[Tensor<S>]| {
                let s = g[0] / S::of(rows as f64);
                let mut dx: Vec<S> = probs.iter().map(|&p| p * s).collect();
                for (r, &t) in targets.iter().enumerate() {
                    dx[r * v + t] -= s;
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Gathers rows of a `[vocab, dim]` table: output shape
    /// `batch_shape + [dim]`. The backward pass scatter-adds into the table.
    pub fn embedding(&self, ids: &[usize], batch_shape: &[usize]) -> Result<Tensor<S>> {
        if self.ndim() != 2 {
            return Err(Error::shape("embedding table must be [vocab, dim]"));
        }
        let (vocab, dim) = (self.shape()[0], self.shape()[1]);
        if numel_of(batch_shape) != ids.len() {
            return Err(Error::shape(format!(
                "{} ids for batch shape {batch_shape:?}",
                ids.len()
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::TokenOutOfRange { id: bad, vocab });
        }
        let table = self.data();
        let mut data = Vec::with_capacity(ids.len() * dim);
        for &i in ids {
            data.extend_from_slice(&table[i * dim..(i + 1) * dim]);
        }
        let mut shape = batch_shape.to_vec();
        shape.push(dim);
        let ids = ids.to_vec();
        Ok(Tensor::from_op(
            shape,
            data,
            "embedding",
            vec![self.clone()],
            Box::new(move |g: &[S], _: &[Tensor<S>]| {
                let mut dt = vec![S::zero(); vocab * dim];
                for (&i, gr) in ids.iter().zip(g.chunks(dim)) {
                    dt[i * dim..(i + 1) * dim]
                        .iter_mut()
                        .zip(gr)
                        .for_each(|(a, &b)| *a += b);
                }
                vec![Some(dt)]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, GradCheck};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(data: &[f64], shape: &[usize]) -> Tensor<f64> {
        Tensor::from_f64(data, shape).unwrap()
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(t(&[0., 0.], &[2]).softmax_last().unwrap().data(), &[0.5, 0.5]);
        assert_eq!(t(&[-3.7], &[1]).softmax_last().unwrap().data(), &[1.0]);
        let p = t(&[1f64.ln(), 3f64.ln()], &[2]).softmax_last().unwrap();
        assert!((p.data()[0] - 0.25).abs() < 1e-15);
        assert!((p.data()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_masks_and_rejects_fully_masked_rows() {
        let ninf = f64::NEG_INFINITY;
        let p = t(&[0., ninf, 0., ninf], &[2, 2]).softmax_last().unwrap();
        assert_eq!(p.data(), &[1., 0., 1., 0.]);
        let err = t(&[0., 1., ninf, ninf], &[2, 2]).softmax_last().unwrap_err();
        assert!(matches!(err, Error::FullyMasked(1)));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::<f64>::randn(&[7, 33], 5.0, &mut rng);
        for row in x.softmax_last().unwrap().data().chunks(33) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let x = Tensor::<f32>::randn(&[7, 33], 5.0, &mut rng);
        for row in x.softmax_last().unwrap().data().chunks(33) {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn causal_softmax_matches_masked_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Tensor::<f64>::randn(&[2, 3, 5], 1.0, &mut rng);
        let p = x.causal_softmax(0.5).unwrap();
        // Keys visible to query i: j <= i + 2.
        let mut masked = x.scale(0.5).to_vec();
        for (r, row) in masked.chunks_mut(5).enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                if j > r % 3 + 2 {
                    *v = f64::NEG_INFINITY;
                }
            }
        }
        let q = t(&masked, &[2, 3, 5]).softmax_last().unwrap();
        for (a, b) in p.data().iter().zip(q.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn layer_norm_examples() {
        let one = t(&[1., 1., 1.], &[3]);
        let zero = t(&[0., 0., 0.], &[3]);
        let y = t(&[2.5, 2.5, 2.5], &[3]).layer_norm(&one, &zero, 1e-5).unwrap();
        assert_eq!(y.data(), &[0., 0., 0.]);

        let y = t(&[-1., 1.], &[2])
            .layer_norm(&t(&[1., 1.], &[2]), &t(&[0., 0.], &[2]), 1e-5)
            .unwrap();
        let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((y.data()[0] + expect).abs() < 1e-15);
        assert!((y.data()[1] - expect).abs() < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::<f64>::randn(&[4, 3], 3.0, &mut rng);
        let bias = t(&[0.1, -0.2, 0.3], &[3]);
        let y = x.layer_norm(&zero, &bias, 1e-5).unwrap();
        for row in y.data().chunks(3) {
            assert_eq!(row, bias.data());
        }
        assert!(x.layer_norm(&t(&[1., 1.], &[2]), &bias, 1e-5).is_err());
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_log_vocab() {
        let x = Tensor::<f64>::zeros(&[3, 256]);
        let l = x.cross_entropy(&[0, 17, 255]).unwrap();
        assert!((l.item().unwrap() - 256f64.ln()).abs() < 1e-12);
        assert!(matches!(
            x.cross_entropy(&[0, 1, 256]),
            Err(Error::TokenOutOfRange { id: 256, vocab: 256 })
        ));
    }

    #[test]
    fn embedding_rejects_bad_ids() {
        let w = Tensor::<f64>::zeros(&[4, 2]);
        assert!(matches!(
            w.embedding(&[0, 4], &[2]),
            Err(Error::TokenOutOfRange { id: 4, vocab: 4 })
        ));
    }

    #[test]
    fn nn_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = Tensor::<f64>::randn(&[2, 3, 4], 1.0, &mut rng);
        let g = Tensor::<f64>::randn(&[4], 1.0, &mut rng).add_scalar(1.0);
        let b = Tensor::<f64>::randn(&[4], 1.0, &mut rng);
        let r = Tensor::<f64>::randn(&[2, 3, 4], 1.0, &mut rng);
        let table = Tensor::<f64>::randn(&[5, 4], 1.0, &mut rng);
        let cfg = GradCheck::default();

        let rep = check_gradients(
            &[x.clone(), g, b],
            |v| Ok(v[0].layer_norm(&v[1], &v[2], 1e-5)?.mul(&r)?.sum()),
            &cfg,
        )
        .unwrap();
        assert!(rep.passed(), "layer_norm {rep:?}");

        let rep = check_gradients(&[x.clone()], |v| Ok(v[0].gelu().mul(&r)?.sum()), &cfg).unwrap();
        assert!(rep.passed(), "gelu {rep:?}");

        let rep =
            check_gradients(&[x.clone()], |v| Ok(v[0].softmax_last()?.mul(&r)?.sum()), &cfg).unwrap();
        assert!(rep.passed(), "softmax {rep:?}");

        let sq = Tensor::<f64>::randn(&[2, 3, 3], 1.0, &mut rng);
        let r3 = Tensor::<f64>::randn(&[2, 3, 3], 1.0, &mut rng);
        let rep = check_gradients(&[sq], |v| Ok(v[0].causal_softmax(0.7)?.mul(&r3)?.sum()), &cfg)
            .unwrap();
        assert!(rep.passed(), "causal_softmax {rep:?}");

        let rep = check_gradients(
            &[x.reshape(&[6, 4]).unwrap()],
            |v| v[0].scale(2.0).cross_entropy(&[0, 3, 1, 2, 2, 0]),
            &cfg,
        )
        .unwrap();
        assert!(rep.passed(), "cross_entropy {rep:?}");

        let rep = check_gradients(
            &[table],
            |v| Ok(v[0].embedding(&[1, 4, 1, 0, 2, 1], &[2, 3])?.mul(&r)?.sum()),
            &cfg,
        )
        .unwrap();
        assert!(rep.passed(), "embedding {rep:?}");
    }
}
