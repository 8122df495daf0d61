//! Central finite-difference verification of reverse-mode gradients.
//!
//! Checks report; they never assert. Callers compare
//! [`GradCheckReport::max_rel_error`] against their own tolerance.

use crate::backbone::{BackboneConfig, Mode};
use crate::consensus::{ConsensusConfig, ConsensusNet};
use crate::error::{Error, Result};
use crate::layers::Module;
use crate::rng::Rng;
use crate::tensor::{PoolKind, Tensor};

/// Central-difference step used unless a caller overrides it.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Relative errors divide by `max(|analytic|, |numeric|, REL_FLOOR)` so that
/// vanishing gradients are compared on an absolute scale.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradSample {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub samples: Vec<GradSample>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.samples.iter().map(|s| s.rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&GradSample> {
        self.samples
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn passes(&self, rtol: f64) -> bool {
        self.max_rel_error() < rtol
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.samples.extend(other.samples);
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn scalar(t: &Tensor<f64>) -> Result<f64> {
    if t.numel() != 1 {
        return Err(Error::Contract(format!(
            "gradient check needs a scalar function, got shape {:?}",
            t.shape()
        )));
    }
    Ok(t.item())
}

/// Compares `∂f/∂x` from `backward` with central differences at every element of `x`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, step: f64) -> Result<GradCheckReport>
where
    F: Fn(&Tensor<f64>) -> Result<Tensor<f64>>,
{
    let leaf = Tensor::leaf(x.shape(), x.to_vec())?;
    let y = f(&leaf)?;
    scalar(&y)?;
    y.backward()?;
    let analytic = leaf.grad().unwrap_or_else(|| vec![0.0; x.numel()]);

    let mut report = GradCheckReport::default();
    for i in 0..x.numel() {
        let mut plus = x.to_vec();
        plus[i] += step;
        let mut minus = x.to_vec();
        minus[i] -= step;
        let fp = scalar(&f(&Tensor::new(x.shape(), plus)?)?)?;
        let fm = scalar(&f(&Tensor::new(x.shape(), minus)?)?)?;
        let numeric = (fp - fm) / (2.0 * step);
        report.samples.push(GradSample {
            tensor: "input".into(),
            index: i,
            analytic: analytic[i],
            numeric,
            rel_error: relative_error(analytic[i], numeric),
        });
    }
    Ok(report)
}

/// Gradient check over the parameters of `module`.
///
/// At most `per_tensor` elements of each parameter are probed, chosen by
/// `rng` (all elements when the tensor is small enough).
pub fn grad_check_module<M, F>(
    module: &mut M,
    f: F,
    per_tensor: usize,
    step: f64,
    rng: &mut Rng,
) -> Result<GradCheckReport>
where
    M: Module<f64>,
    F: Fn(&M) -> Result<Tensor<f64>>,
{
    module.zero_grad();
    let y = f(module)?;
    scalar(&y)?;
    y.backward()?;
    let analytic: Vec<Vec<f64>> = module
        .parameters()
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();
    module.zero_grad();

    let mut report = GradCheckReport::default();
    let count = analytic.len();
    for pi in 0..count {
        let (name, original) = {
            let params = module.parameters();
            (params[pi].name().to_string(), params[pi].value().to_vec())
        };
        let mut indices: Vec<usize> = (0..original.len()).collect();
        if indices.len() > per_tensor {
            rng.shuffle(&mut indices);
            indices.truncate(per_tensor);
            indices.sort_unstable();
        }
        for i in indices {
            let mut eval_at = |delta: f64| -> Result<f64> {
                let mut data = original.clone();
                data[i] += delta;
                module.parameters_mut()[pi].set_data(data)?;
                scalar(&f(module)?)
            };
            let fp = eval_at(step)?;
            let fm = eval_at(-step)?;
            let numeric = (fp - fm) / (2.0 * step);
            report.samples.push(GradSample {
                tensor: name.clone(),
                index: i,
                analytic: analytic[pi][i],
                numeric,
                rel_error: relative_error(analytic[pi][i], numeric),
            });
        }
        module.parameters_mut()[pi].set_data(original)?;
    }
    module.zero_grad();
    Ok(report)
}

/// Tolerance the built-in suite is judged against.
pub const SUITE_RTOL: f64 = 1e-4;

fn random(shape: &[usize], rng: &mut Rng) -> Result<Tensor<f64>> {
    let n = shape.iter().product();
    // keep clear of the relu kink and of max-pool ties
    let data = (0..n)
        .map(|_| {
            let v = rng.normal(0.0, 1.0);
            if v.abs() < 0.05 {
                v.signum() * 0.05 + v
            } else {
                v
            }
        })
        .collect();
    Tensor::new(shape, data)
}

/// Scalarizes `y` with fixed random weights so every output element matters.
fn weigh(y: &Tensor<f64>, w: &Tensor<f64>) -> Result<Tensor<f64>> {
    Ok(y.mul(w)?.sum())
}

type OpFn = Box<dyn Fn(&Tensor<f64>) -> Result<Tensor<f64>>>;

/// One gradient check per tensor operation and argument position.
pub fn op_suite(seed: u64) -> Result<Vec<(String, GradCheckReport)>> {
    let mut rng = Rng::new(seed).split("ops");
    let mut cases: Vec<(String, Tensor<f64>, OpFn)> = Vec::new();

    let mut unary = |name: &'static str, in_shape: &[usize], out_shape: &[usize], op: fn(&Tensor<f64>) -> Result<Tensor<f64>>, rng: &mut Rng| -> Result<()> {
        let x = random(in_shape, rng)?;
        let w = random(out_shape, rng)?;
        cases.push((name.to_string(), x, Box::new(move |t| weigh(&op(t)?, &w))));
        Ok(())
    };
    unary("relu", &[3, 4], &[3, 4], |t| Ok(t.relu()), &mut rng)?;
    unary("sigmoid", &[3, 4], &[3, 4], |t| Ok(t.sigmoid()), &mut rng)?;
    unary("scale", &[5], &[5], |t| Ok(t.scale(-1.7)), &mut rng)?;
    unary("sum", &[2, 3], &[1], |t| Ok(t.sum()), &mut rng)?;
    unary("mean", &[2, 3], &[1], |t| Ok(t.mean()), &mut rng)?;
    unary("reshape", &[2, 6], &[3, 4], |t| t.reshape(&[3, 4]), &mut rng)?;
    unary("narrow", &[2, 5, 3], &[2, 2, 3], |t| t.narrow(1, 2, 2), &mut rng)?;
    unary("average pool", &[2, 3, 4, 3], &[2, 3], |t| t.global_pool(PoolKind::Average), &mut rng)?;
    unary("max pool", &[2, 3, 4, 3], &[2, 3], |t| t.global_pool(PoolKind::Max), &mut rng)?;
    unary("cross entropy", &[3, 5], &[1], |t| t.softmax_cross_entropy(&[4, 0, 2]), &mut rng)?;

    let mut binary = |name: &'static str, a_shape: &[usize], b_shape: &[usize], out_shape: &[usize], op: fn(&Tensor<f64>, &Tensor<f64>) -> Result<Tensor<f64>>, rng: &mut Rng| -> Result<()> {
        let a = random(a_shape, rng)?;
        let b = random(b_shape, rng)?;
        let w = random(out_shape, rng)?;
        let (b1, w1) = (b.clone(), w.clone());
        cases.push((format!("{name}, first argument"), a.clone(), Box::new(move |t| weigh(&op(t, &b1)?, &w1))));
        cases.push((format!("{name}, second argument"), b, Box::new(move |t| weigh(&op(&a, t)?, &w))));
        Ok(())
    };
    binary("add", &[3, 4], &[3, 4], &[3, 4], |a, b| a.add(b), &mut rng)?;
    binary("add broadcast", &[2, 3, 2], &[3, 1], &[2, 3, 2], |a, b| a.add(b), &mut rng)?;
    binary("sub", &[3, 4], &[1, 4], &[3, 4], |a, b| a.sub(b), &mut rng)?;
    binary("mul", &[3, 4], &[3, 4], &[3, 4], |a, b| a.mul(b), &mut rng)?;
    binary("mul broadcast", &[2, 3], &[1], &[2, 3], |a, b| a.mul(b), &mut rng)?;
    binary("matmul", &[3, 4], &[4, 2], &[3, 2], |a, b| a.matmul(b), &mut rng)?;
    binary("concat", &[2, 3], &[2, 2], &[2, 5], |a, b| Tensor::concat(&[a.clone(), b.clone()], 1), &mut rng)?;
    binary("conv 3x3", &[2, 2, 5, 4], &[3, 2, 3, 3], &[2, 3, 5, 4], |x, k| x.conv2d(k, 1, 1), &mut rng)?;
    binary("conv 3x3 stride 2", &[1, 2, 5, 6], &[2, 2, 3, 3], &[1, 2, 3, 3], |x, k| x.conv2d(k, 2, 1), &mut rng)?;
    binary("conv 1x1", &[2, 3, 3, 2], &[2, 3, 1, 1], &[2, 2, 3, 2], |x, k| x.conv2d(k, 1, 0), &mut rng)?;
    binary("conv 1x1 stride 2", &[1, 3, 4, 4], &[2, 3, 1, 1], &[1, 2, 2, 2], |x, k| x.conv2d(k, 2, 0), &mut rng)?;

    cases
        .into_iter()
        .map(|(name, x, f)| Ok((name, grad_check(f, &x, DEFAULT_STEP)?)))
        .collect()
}

/// Toy network used by the full-model check: N=4, K=4, d=32, one 32x16 branch.
pub fn toy_check_config() -> ConsensusConfig {
    let backbone = BackboneConfig {
        feature_dim: 32,
        mode: Mode::Full,
        ..BackboneConfig::toy()
    };
    ConsensusConfig::new(vec![(32, 16)], backbone, 4)
}

/// Gradient of the summed consensus loss with respect to every parameter
/// tensor of the toy network, `per_tensor` probes each.
///
/// Every probe is evaluated at `step` and at `step / 10`, keeping the closer
/// estimate: a relu kink inside the wider interval spoils the first, roundoff
/// on tiny gradients the second. A wrong analytic gradient fails both.
pub fn network_check(config: &ConsensusConfig, seed: u64, per_tensor: usize, step: f64) -> Result<GradCheckReport> {
    let root = Rng::new(seed);
    let mut net = ConsensusNet::<f64>::new(config, &root.split("init"))?;
    // zero biases put relu inputs exactly on the kink wherever a whole
    // receptive field is dead, so probe at a generic point instead
    let mut rng = root.split("biases");
    for p in net.parameters_mut() {
        if p.name().ends_with(".bias") {
            let data = random(p.shape(), &mut rng)?.data().iter().map(|v| 0.1 * v).collect();
            p.set_data(data)?;
        }
    }
    let mut rng = root.split("inputs");
    let batch = 2;
    let images = config
        .scales
        .iter()
        .map(|&(h, w)| random(&[batch, 3, h, w], &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<usize> = (0..batch).map(|i| i % config.n_id).collect();
    let loss = |n: &ConsensusNet<f64>| Ok(n.forward(&images)?.total_loss(&labels)?.total);
    let wide = grad_check_module(&mut net, loss, per_tensor, step, &mut root.split("probes"))?;
    let narrow = grad_check_module(&mut net, loss, per_tensor, step / 10.0, &mut root.split("probes"))?;
    Ok(GradCheckReport {
        samples: wide
            .samples
            .into_iter()
            .zip(narrow.samples)
            .map(|(a, b)| if b.rel_error < a.rel_error { b } else { a })
            .collect(),
    })
}
