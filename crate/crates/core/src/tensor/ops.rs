use serde::{Deserialize, Serialize};

use super::autograd::Op;
use super::{gemm, Element, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Sigmoid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolKind {
    Average,
    Max,
}

impl std::str::FromStr for PoolKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "average" | "avg" => Ok(PoolKind::Average),
            "max" => Ok(PoolKind::Max),
            other => Err(Error::Config(format!("unknown pooling kind `{other}`"))),
        }
    }
}

pub(crate) fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * shape[d + 1];
    }
    strides
}

/// Index mapping for a numpy-style broadcast of two operands.
pub(crate) struct Broadcast {
    pub out: Vec<usize>,
    sa: Vec<usize>,
    sb: Vec<usize>,
}

impl Broadcast {
    pub fn new(a: &[usize], b: &[usize]) -> Option<Self> {
        let nd = a.len().max(b.len());
        let mut out = vec![0; nd];
        for i in 0..nd {
            let da = if i + a.len() >= nd { a[i + a.len() - nd] } else { 1 };
            let db = if i + b.len() >= nd { b[i + b.len() - nd] } else { 1 };
            out[i] = match (da, db) {
                (x, y) if x == y => x,
                (1, y) => y,
                (x, 1) => x,
                _ => return None,
            };
        }
        let sa = Self::aligned_strides(a, &out);
        let sb = Self::aligned_strides(b, &out);
        Some(Broadcast { out, sa, sb })
    }

    fn aligned_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
        let own = contiguous_strides(shape);
        let offset = out.len() - shape.len();
        (0..out.len())
            .map(|i| {
                if i < offset || (shape[i - offset] == 1 && out[i] != 1) {
                    0
                } else {
                    own[i - offset]
                }
            })
            .collect()
    }

    /// Calls `f(out_index, a_index, b_index)` for every output element in row-major order.
    pub fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let nd = self.out.len();
        let total: usize = self.out.iter().product();
        let mut idx = vec![0usize; nd];
        let (mut ai, mut bi) = (0usize, 0usize);
        for oi in 0..total {
            f(oi, ai, bi);
            let mut d = nd;
            while d > 0 {
                d -= 1;
                idx[d] += 1;
                ai += self.sa[d];
                bi += self.sb[d];
                if idx[d] < self.out[d] {
                    break;
                }
                ai -= self.sa[d] * self.out[d];
                bi -= self.sb[d] * self.out[d];
                idx[d] = 0;
            }
        }
    }
}

#[derive(Clone, Copy)]
pub(crate) enum BinaryKind {
    Add,
    Sub,
    Mul,
}

impl BinaryKind {
    fn name(self) -> &'static str {
        match self {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
        }
    }

    #[inline]
    fn apply<E: Element>(self, a: E, b: E) -> E {
        match self {
            BinaryKind::Add => a + b,
            BinaryKind::Sub => a - b,
            BinaryKind::Mul => a * b,
        }
    }
}

#[inline]
pub(crate) fn sigmoid_scalar<E: Element>(x: E) -> E {
    if x >= E::zero() {
        E::one() / (E::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (E::one() + e)
    }
}

impl<E: Element> Tensor<E> {
    fn binary(&self, other: &Tensor<E>, kind: BinaryKind) -> Result<Tensor<E>> {
        let (a, b) = (self.data(), other.data());
        let (shape, data) = if self.shape() == other.shape() {
            let data = a.iter().zip(b).map(|(&x, &y)| kind.apply(x, y)).collect();
            (self.shape().to_vec(), data)
        } else {
            let bc = Broadcast::new(self.shape(), other.shape())
                .ok_or_else(|| Error::shape(kind.name(), self.shape(), other.shape()))?;
            let mut data = vec![E::zero(); bc.out.iter().product()];
            bc.for_each(|o, i, j| data[o] = kind.apply(a[i], b[j]));
            (bc.out, data)
        };
        Ok(Tensor::from_op(
            shape,
            data,
            Op::Binary {
                kind,
                a: self.clone(),
                b: other.clone(),
            },
        ))
    }

    /// Elementwise sum with numpy-style broadcasting.
    pub fn add(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        self.binary(other, BinaryKind::Add)
    }

    pub fn sub(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        self.binary(other, BinaryKind::Sub)
    }

    /// Elementwise product with numpy-style broadcasting.
    pub fn mul(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        self.binary(other, BinaryKind::Mul)
    }

    pub fn scale(&self, factor: E) -> Tensor<E> {
        let data = self.data().iter().map(|&v| v * factor).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            Op::Scale {
                x: self.clone(),
                factor,
            },
        )
    }

    pub fn matmul(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (r, k, c) = (sa[0], sa[1], sb[1]);
        let mut out = vec![E::zero(); r * c];
        gemm(r, k, c, self.data(), false, other.data(), false, &mut out, E::zero());
        Ok(Tensor::from_op(
            vec![r, c],
            out,
            Op::MatMul {
                a: self.clone(),
                b: other.clone(),
            },
        ))
    }

    pub fn relu(&self) -> Tensor<E> {
        let data = self
            .data()
            .iter()
            .map(|&v| if v > E::zero() { v } else { E::zero() })
            .collect();
        Tensor::from_op(self.shape().to_vec(), data, Op::Relu { x: self.clone() })
    }

    pub fn sigmoid(&self) -> Tensor<E> {
        let data = self.data().iter().map(|&v| sigmoid_scalar(v)).collect();
        Tensor::from_op(self.shape().to_vec(), data, Op::Sigmoid { x: self.clone() })
    }

    pub fn activation(&self, kind: Activation) -> Tensor<E> {
        match kind {
            Activation::Relu => self.relu(),
            Activation::Sigmoid => self.sigmoid(),
        }
    }

    /// Mean or maximum over the two trailing (spatial) axes:
    /// `[.., H, W] -> [..]`. Max gradients go to the first maximal element.
    pub fn global_pool(&self, kind: PoolKind) -> Result<Tensor<E>> {
        let shape = self.shape();
        if shape.len() < 3 {
            return Err(Error::Dimension(format!(
                "global pooling needs [.., C, H, W] input, got shape {shape:?}"
            )));
        }
        let spatial = shape[shape.len() - 2] * shape[shape.len() - 1];
        let out_shape = shape[..shape.len() - 2].to_vec();
        let data = self.data();
        let (out, argmax) = match kind {
            PoolKind::Average => {
                let inv = E::one() / E::of(spatial as f64);
                let out = data
                    .chunks_exact(spatial)
                    .map(|c| c.iter().copied().sum::<E>() * inv)
                    .collect();
                (out, Vec::new())
            }
            PoolKind::Max => {
                let mut out = Vec::with_capacity(data.len() / spatial);
                let mut argmax = Vec::with_capacity(data.len() / spatial);
                for (ci, c) in data.chunks_exact(spatial).enumerate() {
                    let mut best = 0;
                    for (i, &v) in c.iter().enumerate() {
                        if v > c[best] {
                            best = i;
                        }
                    }
                    out.push(c[best]);
                    argmax.push(ci * spatial + best);
                }
                (out, argmax)
            }
        };
        Ok(Tensor::from_op(
            out_shape,
            out,
            Op::GlobalPool {
                x: self.clone(),
                kind,
                argmax,
            },
        ))
    }

    /// Joins tensors along `axis`; all other extents must agree.
    pub fn concat(parts: &[Tensor<E>], axis: usize) -> Result<Tensor<E>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Dimension("concat of zero tensors".into()))?;
        let nd = first.ndim();
        if axis >= nd {
            return Err(Error::Dimension(format!(
                "concat axis {axis} out of range for shape {:?}",
                first.shape()
            )));
        }
        for p in &parts[1..] {
            let ok = p.ndim() == nd
                && (0..nd).all(|d| d == axis || p.shape()[d] == first.shape()[d]);
            if !ok {
                return Err(Error::shape("concat", first.shape(), p.shape()));
            }
        }
        let outer: usize = first.shape()[..axis].iter().product();
        let inner: usize = first.shape()[axis + 1..].iter().product();
        let total_axis: usize = parts.iter().map(|p| p.shape()[axis]).sum();
        let mut data = Vec::with_capacity(outer * total_axis * inner);
        for o in 0..outer {
            for p in parts {
                let block = p.shape()[axis] * inner;
                data.extend_from_slice(&p.data()[o * block..(o + 1) * block]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total_axis;
        Ok(Tensor::from_op(
            shape,
            data,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<E>> {
        let shape = self.shape();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::Dimension(format!(
                "narrow({axis}, {start}, {len}) out of range for shape {shape:?}"
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src_block = shape[axis] * inner;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * src_block + start * inner;
            data.extend_from_slice(&self.data()[base..base + len * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        Ok(Tensor::from_op(
            out_shape,
            data,
            Op::Narrow {
                x: self.clone(),
                axis,
                start,
            },
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<E>> {
        let n: usize = shape.iter().product();
        if n != self.numel() || shape.contains(&0) {
            return Err(Error::shape("reshape", self.shape(), shape));
        }
        Ok(Tensor::from_op(
            shape.to_vec(),
            self.to_vec(),
            Op::Reshape { x: self.clone() },
        ))
    }

    pub fn sum(&self) -> Tensor<E> {
        let s = self.data().iter().copied().sum::<E>();
        Tensor::from_op(Vec::new(), vec![s], Op::Sum { x: self.clone() })
    }

    pub fn mean(&self) -> Tensor<E> {
        self.sum().scale(E::one() / E::of(self.numel() as f64))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`, computed with the
    /// max-subtraction stabilization. `logits` is `[B, C]`.
    pub fn softmax_cross_entropy(&self, labels: &[usize]) -> Result<Tensor<E>> {
        let shape = self.shape();
        if shape.len() != 2 {
            return Err(Error::Dimension(format!(
                "cross entropy expects [B, C] logits, got {shape:?}"
            )));
        }
        let (batch, classes) = (shape[0], shape[1]);
        if labels.len() != batch {
            return Err(Error::Contract(format!(
                "{} labels for a batch of {batch}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Label {
                index: bad,
                classes,
            });
        }
        let mut probs = vec![E::zero(); batch * classes];
        // running mean: identical per-sample losses average to themselves exactly
        let mut loss = E::zero();
        for (b, row) in self.data().chunks_exact(classes).enumerate() {
            let max = row.iter().copied().fold(E::neg_infinity(), E::max);
            let mut denom = E::zero();
            for (c, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                probs[b * classes + c] = e;
                denom = denom + e;
            }
            for p in &mut probs[b * classes..(b + 1) * classes] {
                *p = *p / denom;
            }
            let sample = (max - row[labels[b]]) + denom.ln();
            loss = loss + (sample - loss) / E::of((b + 1) as f64);
        }
        Ok(Tensor::from_op(
            Vec::new(),
            vec![loss],
            Op::CrossEntropy {
                logits: self.clone(),
                labels: labels.to_vec(),
                probs,
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    fn naive_matmul(a: &[f64], b: &[f64], r: usize, k: usize, c: usize) -> Vec<f64> {
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                for l in 0..k {
                    out[i * c + j] += a[i * k + l] * b[l * c + j];
                }
            }
        }
        out
    }

    #[test]
    fn matmul_examples() {
        let eye = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let v = t(&[2, 1], &[5.0, 6.0]);
        assert_eq!(eye.matmul(&v).unwrap().to_vec(), vec![5.0, 6.0]);

        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(naive_matmul(a.data(), v.data(), 2, 2, 1), vec![17.0, 39.0]);
        assert_eq!(a.matmul(&v).unwrap().to_vec(), vec![17.0, 39.0]);

        let bad = t(&[2, 3], &[0.0; 6]).matmul(&t(&[2, 2], &[0.0; 4]));
        match bad {
            Err(Error::Shape { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 2]);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let (r, k, c) = (5, 7, 3);
        let a: Vec<f64> = (0..r * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * c).map(|i| (i as f64 * 0.11).cos()).collect();
        let got = t(&[r, k], &a).matmul(&t(&[k, c], &b)).unwrap();
        for (x, y) in got.data().iter().zip(naive_matmul(&a, &b, r, k, c)) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn activations() {
        assert_eq!(t(&[2], &[-1.0, 2.0]).relu().to_vec(), vec![0.0, 2.0]);
        assert_eq!(t(&[1], &[0.0]).sigmoid().item(), 0.5);
        let s2 = t(&[1], &[2.0]).sigmoid().item();
        assert!((s2 - 1.0 / (1.0 + (-2.0f64).exp())).abs() < 1e-15);
        assert!((s2 - 0.880797).abs() < 1e-6);
        // stable branch for large negative inputs
        assert!(t(&[1], &[-800.0]).sigmoid().item() >= 0.0);
    }

    #[test]
    fn global_pool_examples() {
        let x = t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(x.global_pool(PoolKind::Max).unwrap().to_vec(), vec![4.0]);
        assert_eq!(x.global_pool(PoolKind::Average).unwrap().to_vec(), vec![2.5]);
        let c = t(&[2, 3, 3], &[0.7; 18]);
        for kind in [PoolKind::Average, PoolKind::Max] {
            for v in c.global_pool(kind).unwrap().to_vec() {
                assert!((v - 0.7).abs() < 1e-15);
            }
        }
        assert!(matches!(
            t(&[4], &[0.0; 4]).global_pool(PoolKind::Max),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn concat_examples() {
        let a = t(&[3], &[1.0, 2.0, 3.0]);
        let b = t(&[2], &[4.0, 5.0]);
        let ab = Tensor::concat(&[a.clone(), b], 0).unwrap();
        assert_eq!(ab.shape(), &[5]);
        assert_eq!(ab.to_vec(), vec![1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(Tensor::concat(&[a.clone()], 0).unwrap().to_vec(), a.to_vec());

        let d = 4;
        let v = t(&[d], &[0.5; 4]);
        assert_eq!(Tensor::concat(&[v.clone(), v], 0).unwrap().numel(), 2 * d);

        let m = t(&[2, 2], &[0.0; 4]);
        let n = t(&[3, 3], &[0.0; 9]);
        assert!(matches!(
            Tensor::concat(&[m, n], 1),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn cross_entropy_examples() {
        let zeros = t(&[1, 4], &[0.0; 4]);
        let l = zeros.softmax_cross_entropy(&[2]).unwrap().item();
        assert!((l - 4f64.ln()).abs() < 1e-15);
        assert!((l - 1.386294).abs() < 1e-6);

        let sat = t(&[1, 2], &[100.0, 0.0]).softmax_cross_entropy(&[0]).unwrap().item();
        assert!(sat.abs() < 1e-10);

        let l = t(&[1, 2], &[1.0, 2.0]).softmax_cross_entropy(&[0]).unwrap().item();
        let direct = -(1f64.exp() / (1f64.exp() + 2f64.exp())).ln();
        assert!((l - direct).abs() < 1e-14);
        assert!((l - 1.313262).abs() < 1e-6);

        assert!(matches!(
            t(&[1, 2], &[1.0, 2.0]).softmax_cross_entropy(&[2]),
            Err(Error::Label { index: 2, classes: 2 })
        ));
    }

    #[test]
    fn broadcasting() {
        let x = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let bias = t(&[3], &[10.0, 20.0, 30.0]);
        assert_eq!(
            x.add(&bias).unwrap().to_vec(),
            vec![11.0, 22.0, 33.0, 14.0, 25.0, 36.0]
        );
        let col = t(&[2, 1], &[2.0, -1.0]);
        assert_eq!(
            x.mul(&col).unwrap().to_vec(),
            vec![2.0, 4.0, 6.0, -4.0, -5.0, -6.0]
        );
        assert!(x.add(&t(&[2], &[0.0, 0.0])).is_err());
    }

    #[test]
    fn narrow_and_reshape() {
        let x = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(x.narrow(1, 1, 2).unwrap().to_vec(), vec![2.0, 3.0, 5.0, 6.0]);
        assert!(x.narrow(1, 2, 2).is_err());
        assert_eq!(x.reshape(&[3, 2]).unwrap().shape(), &[3, 2]);
        assert!(x.reshape(&[4, 2]).is_err());
    }
}
