use std::collections::{HashMap, HashSet};

use super::{Float, Tensor};
use crate::{Error, Result};

/// The recorded operations reachable from a root tensor, in topological
/// (creation) order.
pub struct Tape<S: Float> {
    ops: Vec<Tensor<S>>,
}

impl<S: Float> Tape<S> {
    /// Collects every recorded tensor the root depends on.
    pub fn from_root(root: &Tensor<S>) -> Self {
        let mut seen = HashSet::new();
        let mut ops = Vec::new();
        let mut stack = vec![root.clone()];
        while let Some(t) = stack.pop() {
            let Some(node) = t.node() else { continue };
            if !seen.insert(t.id()) {
                continue;
            }
            for input in &node.inputs {
                if input.is_recorded() && !seen.contains(&input.id()) {
                    stack.push(input.clone());
                }
            }
            ops.push(t);
        }
        // Ids are assigned at creation, and inputs always exist before the
        // op that consumes them.
        ops.sort_by_key(Tensor::id);
        Tape { ops }
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    /// Operation names in recording order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.ops.iter().filter_map(Tensor::op_name).collect()
    }

    /// Replays the tape in reverse starting from `seed` as the gradient of
    /// the last operation. Every tape entry is visited exactly once.
    fn run(&self, seed: Vec<S>) {
        let Some(root) = self.ops.last() else { return };
        let mut pending: HashMap<u64, Vec<S>> = HashMap::new();
        pending.insert(root.id(), seed);
        for t in self.ops.iter().rev() {
            let Some(g) = pending.remove(&t.id()) else {
                continue;
            };
            let node = t.node().expect("tape holds recorded tensors");
            let input_grads = (node.backward)(&g, &node.inputs);
            debug_assert_eq!(input_grads.len(), node.inputs.len(), "op {}", node.op);
            for (input, ig) in node.inputs.iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                if !input.requires_grad() {
                    continue;
                }
                if input.is_recorded() {
                    match pending.get_mut(&input.id()) {
                        Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, &b)| *a += b),
                        None => {
                            pending.insert(input.id(), ig);
                        }
                    }
                } else {
                    input.accumulate_grad(ig);
                }
            }
            t.accumulate_grad(g);
        }
    }
}

impl<S: Float> Tensor<S> {
    /// Back-propagates from this scalar, accumulating `d self / d t` into the
    /// `grad` of every tensor on its tape. Calling it twice without
    /// [`Tensor::zero_grad`] adds the gradients again.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Autograd(format!(
                "backward needs a scalar, got shape {:?}",
                self.shape()
            )));
        }
        if !self.is_recorded() {
            return Err(Error::Autograd(
                "tensor is not attached to a tape (no recorded inputs require grad)".into(),
            ));
        }
        let tape = Tape::from_root(self);
        tape.run(vec![S::one()]);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_ones() {
        let x = Tensor::<f64>::parameter(vec![1.0, -2.0, 3.0, 0.5], &[2, 2]).unwrap();
        x.sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0; 4]);
    }

    #[test]
    fn half_sum_of_squares_gives_x() {
        let vals = vec![1.0, -2.0, 3.0, 0.5];
        let x = Tensor::<f64>::parameter(vals.clone(), &[2, 2]).unwrap();
        x.mul(&x).unwrap().sum().scale(0.5).backward().unwrap();
        assert_eq!(x.grad().unwrap(), vals);
    }

    #[test]
    fn fanout_accumulates() {
        let x = Tensor::<f64>::parameter(vec![1.0, 2.0, 3.0], &[3]).unwrap();
        x.add(&x).unwrap().sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0; 3]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let x = Tensor::<f64>::parameter(vec![1.0, 2.0], &[2]).unwrap();
        let loss = x.scale(3.0).sum();
        loss.backward().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![6.0, 6.0]);
        x.zero_grad();
        assert!(x.grad().is_none());
    }

    #[test]
    fn non_scalar_and_detached_losses_fail() {
        let x = Tensor::<f64>::parameter(vec![1.0, 2.0], &[2]).unwrap();
        assert!(matches!(x.scale(2.0).backward(), Err(Error::Autograd(_))));
        let c = Tensor::<f64>::from_vec(vec![1.0, 2.0], &[2]).unwrap();
        assert!(matches!(c.sum().backward(), Err(Error::Autograd(_))));
        assert!(matches!(x.sum().detach().backward(), Err(Error::Autograd(_))));
    }

    #[test]
    fn tape_is_topological_and_unique() {
        let x = Tensor::<f64>::parameter(vec![1.0, 2.0], &[2]).unwrap();
        let a = x.scale(2.0);
        let b = a.mul(&a).unwrap();
        let c = b.add(&a).unwrap().sum();
        let tape = Tape::from_root(&c);
        assert_eq!(tape.op_names(), vec!["scale", "mul", "add", "sum"]);
        let ids: Vec<u64> = tape.ops.iter().map(Tensor::id).collect();
        assert!(ids.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn intermediate_grads_are_populated() {
        let x = Tensor::<f64>::parameter(vec![1.0, 2.0], &[2]).unwrap();
        let a = x.scale(2.0);
        a.sum().scale(3.0).backward().unwrap();
        assert_eq!(a.grad().unwrap(), vec![3.0, 3.0]);
        assert_eq!(x.grad().unwrap(), vec![6.0, 6.0]);
    }
}
