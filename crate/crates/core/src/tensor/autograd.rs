use std::collections::{HashMap, HashSet};

use super::conv::{conv2d_backward, ConvGeometry};
use super::ops::{BinaryKind, Broadcast};
use super::{gemm, Element, PoolKind, Tensor};
use crate::error::{Error, Result};

/// Recorded operation: inputs plus whatever the backward rule needs.
pub(crate) enum Op<E: Element> {
    Binary {
        kind: BinaryKind,
        a: Tensor<E>,
        b: Tensor<E>,
    },
    Scale {
        x: Tensor<E>,
        factor: E,
    },
    MatMul {
        a: Tensor<E>,
        b: Tensor<E>,
    },
    Conv2d {
        x: Tensor<E>,
        w: Tensor<E>,
        geom: ConvGeometry,
    },
    Relu {
        x: Tensor<E>,
    },
    Sigmoid {
        x: Tensor<E>,
    },
    GlobalPool {
        x: Tensor<E>,
        kind: PoolKind,
        argmax: Vec<usize>,
    },
    Concat {
        parts: Vec<Tensor<E>>,
        axis: usize,
    },
    Narrow {
        x: Tensor<E>,
        axis: usize,
        start: usize,
    },
    Reshape {
        x: Tensor<E>,
    },
    Sum {
        x: Tensor<E>,
    },
    CrossEntropy {
        logits: Tensor<E>,
        labels: Vec<usize>,
        probs: Vec<E>,
    },
}

impl<E: Element> Op<E> {
    fn inputs(&self) -> Vec<&Tensor<E>> {
        match self {
            Op::Binary { a, b, .. } | Op::MatMul { a, b } => vec![a, b],
            Op::Conv2d { x, w, .. } => vec![x, w],
            Op::Concat { parts, .. } => parts.iter().collect(),
            Op::CrossEntropy { logits, .. } => vec![logits],
            Op::Scale { x, .. }
            | Op::Relu { x }
            | Op::Sigmoid { x }
            | Op::GlobalPool { x, .. }
            | Op::Narrow { x, .. }
            | Op::Reshape { x }
            | Op::Sum { x } => vec![x],
        }
    }

    pub fn any_input_requires_grad(&self) -> bool {
        self.inputs().iter().any(|t| t.requires_grad())
    }

    /// Applies the chain rule for this op, handing each input's gradient to `emit`.
    fn backward(&self, out: &[E], grad: &[E], emit: &mut dyn FnMut(&Tensor<E>, Vec<E>)) {
        match self {
            Op::Binary { kind, a, b } => {
                let (ra, rb) = (a.requires_grad(), b.requires_grad());
                let mut ga = vec![E::zero(); if ra { a.numel() } else { 0 }];
                let mut gb = vec![E::zero(); if rb { b.numel() } else { 0 }];
                let (ad, bd) = (a.data(), b.data());
                let mut step = |o: usize, i: usize, j: usize| {
                    let g = grad[o];
                    match kind {
                        BinaryKind::Add => {
                            if ra {
                                ga[i] = ga[i] + g;
                            }
                            if rb {
                                gb[j] = gb[j] + g;
                            }
                        }
                        BinaryKind::Sub => {
                            if ra {
                                ga[i] = ga[i] + g;
                            }
                            if rb {
                                gb[j] = gb[j] - g;
                            }
                        }
                        BinaryKind::Mul => {
                            if ra {
                                ga[i] = ga[i] + g * bd[j];
                            }
                            if rb {
                                gb[j] = gb[j] + g * ad[i];
                            }
                        }
                    }
                };
                if a.shape() == b.shape() {
                    for o in 0..grad.len() {
                        step(o, o, o);
                    }
                } else {
                    Broadcast::new(a.shape(), b.shape())
                        .expect("shapes were checked in forward")
                        .for_each(step);
                }
                if ra {
                    emit(a, ga);
                }
                if rb {
                    emit(b, gb);
                }
            }
            Op::Scale { x, factor } => {
                emit(x, grad.iter().map(|&g| g * *factor).collect());
            }
            Op::MatMul { a, b } => {
                let (r, k, c) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                if a.requires_grad() {
                    let mut ga = vec![E::zero(); r * k];
                    gemm(r, c, k, grad, false, b.data(), true, &mut ga, E::zero());
                    emit(a, ga);
                }
                if b.requires_grad() {
                    let mut gb = vec![E::zero(); k * c];
                    gemm(k, r, c, a.data(), true, grad, false, &mut gb, E::zero());
                    emit(b, gb);
                }
            }
            Op::Conv2d { x, w, geom } => {
                let (dx, dw) = conv2d_backward(
                    geom,
                    x.data(),
                    w.data(),
                    grad,
                    x.requires_grad(),
                    w.requires_grad(),
                );
                if let Some(dx) = dx {
                    emit(x, dx);
                }
                if let Some(dw) = dw {
                    emit(w, dw);
                }
            }
            Op::Relu { x } => {
                let g = x
                    .data()
                    .iter()
                    .zip(grad)
                    .map(|(&v, &g)| if v > E::zero() { g } else { E::zero() })
                    .collect();
                emit(x, g);
            }
            Op::Sigmoid { x } => {
                let g = out
                    .iter()
                    .zip(grad)
                    .map(|(&s, &g)| g * s * (E::one() - s))
                    .collect();
                emit(x, g);
            }
            Op::GlobalPool { x, kind, argmax } => {
                let spatial = x.numel() / grad.len();
                let mut gx = vec![E::zero(); x.numel()];
                match kind {
                    PoolKind::Average => {
                        let inv = E::one() / E::of(spatial as f64);
                        for (chunk, &g) in gx.chunks_exact_mut(spatial).zip(grad) {
                            chunk.fill(g * inv);
                        }
                    }
                    PoolKind::Max => {
                        for (&pos, &g) in argmax.iter().zip(grad) {
                            gx[pos] = g;
                        }
                    }
                }
                emit(x, gx);
            }
            Op::Concat { parts, axis } => {
                let shape = parts[0].shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total: usize = parts.iter().map(|p| p.shape()[*axis]).sum::<usize>() * inner;
                let mut offset = 0;
                for p in parts {
                    let block = p.shape()[*axis] * inner;
                    if p.requires_grad() {
                        let mut gp = Vec::with_capacity(p.numel());
                        for o in 0..outer {
                            let base = o * total + offset;
                            gp.extend_from_slice(&grad[base..base + block]);
                        }
                        emit(p, gp);
                    }
                    offset += block;
                }
            }
            Op::Narrow { x, axis, start } => {
                let shape = x.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let src_block = shape[*axis] * inner;
                let len_block = grad.len() / outer;
                let mut gx = vec![E::zero(); x.numel()];
                for o in 0..outer {
                    let base = o * src_block + start * inner;
                    gx[base..base + len_block]
                        .copy_from_slice(&grad[o * len_block..(o + 1) * len_block]);
                }
                emit(x, gx);
            }
            Op::Reshape { x } => emit(x, grad.to_vec()),
            Op::Sum { x } => emit(x, vec![grad[0]; x.numel()]),
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let classes = logits.shape()[1];
                let scale = grad[0] / E::of(labels.len() as f64);
                let mut g: Vec<E> = probs.iter().map(|&p| p * scale).collect();
                for (b, &l) in labels.iter().enumerate() {
                    let i = b * classes + l;
                    g[i] = g[i] - scale;
                }
                emit(logits, g);
            }
        }
    }
}

impl<E: Element> Tensor<E> {
    /// Back-propagates from this scalar, adding `∂self/∂leaf` into the gradient
    /// buffer of every reachable leaf that requires grad. Repeated calls
    /// accumulate until the buffers are cleared.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Ok(());
        }

        // Reverse post-order of an iterative DFS gives a topological order.
        let mut order: Vec<Tensor<E>> = Vec::new();
        let mut seen: HashSet<usize> = HashSet::new();
        let mut stack: Vec<(Tensor<E>, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !seen.insert(t.id()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(op) = t.op() {
                for input in op.inputs() {
                    if input.requires_grad() && !seen.contains(&input.id()) {
                        stack.push((input.clone(), false));
                    }
                }
            }
        }

        let mut grads: HashMap<usize, Vec<E>> = HashMap::new();
        grads.insert(self.id(), vec![E::one()]);
        for t in order.iter().rev() {
            let Some(g) = grads.remove(&t.id()) else {
                continue;
            };
            match t.op() {
                None => t.accumulate_grad(&g),
                Some(op) => op.backward(t.data(), &g, &mut |input, delta| {
                    if !input.requires_grad() {
                        return;
                    }
                    match grads.get_mut(&input.id()) {
                        Some(acc) => {
                            for (a, d) in acc.iter_mut().zip(delta) {
                                *a = *a + d;
                            }
                        }
                        None => {
                            grads.insert(input.id(), delta);
                        }
                    }
                }),
            }
        }
        Ok(())
    }
}
