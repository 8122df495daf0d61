//! Affine and convolution layers shared by the backbone and the heads.

use crate::error::Result;
use crate::optim::Parameter;
use crate::rng::Rng;
use crate::tensor::{Element, Tensor};

/// Gain for layers followed by a ReLU.
pub const RELU_GAIN: f64 = std::f64::consts::SQRT_2;
pub const LINEAR_GAIN: f64 = 1.0;

/// Anything that owns parameters, in a fixed deterministic order.
pub trait Module<E: Element> {
    fn parameters(&self) -> Vec<&Parameter<E>>;
    fn parameters_mut(&mut self) -> Vec<&mut Parameter<E>>;

    fn zero_grad(&self) {
        for p in self.parameters() {
            p.zero_grad();
        }
    }

    fn num_parameters(&self) -> usize {
        self.parameters().iter().map(|p| p.numel()).sum()
    }
}

/// Fan-in scaled normal initialization: `N(0, gain² / fan_in)`.
pub fn he_normal<E: Element>(rng: &mut Rng, n: usize, fan_in: usize, gain: f64) -> Vec<E> {
    let std = gain / (fan_in as f64).sqrt();
    (0..n).map(|_| E::of(rng.normal(0.0, std))).collect()
}

/// `y = x · W + b` on `[B, in]` inputs; `W` is stored `[in, out]`.
#[derive(Debug, Clone)]
pub struct Linear<E: Element> {
    pub weight: Parameter<E>,
    pub bias: Parameter<E>,
}

impl<E: Element> Linear<E> {
    pub fn new(name: &str, inputs: usize, outputs: usize, gain: f64, rng: &Rng) -> Result<Self> {
        let wname = format!("{name}.weight");
        let mut r = rng.split(&wname);
        let w = he_normal(&mut r, inputs * outputs, inputs, gain);
        Ok(Linear {
            weight: Parameter::new(wname, &[inputs, outputs], w)?,
            bias: Parameter::new(format!("{name}.bias"), &[outputs], vec![E::zero(); outputs])?,
        })
    }

    /// Layer with explicit weights (`[in, out]` row-major) and bias.
    pub fn from_weights(name: &str, inputs: usize, weight: Vec<E>, bias: Vec<E>) -> Result<Self> {
        let outputs = bias.len();
        Ok(Linear {
            weight: Parameter::new(format!("{name}.weight"), &[inputs, outputs], weight)?,
            bias: Parameter::new(format!("{name}.bias"), &[outputs], bias)?,
        })
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        x.matmul(self.weight.value())?.add(self.bias.value())
    }
}

impl<E: Element> Module<E> for Linear<E> {
    fn parameters(&self) -> Vec<&Parameter<E>> {
        vec![&self.weight, &self.bias]
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter<E>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Square-kernel convolution with optional per-channel bias.
#[derive(Debug, Clone)]
pub struct Conv<E: Element> {
    pub weight: Parameter<E>,
    pub bias: Option<Parameter<E>>,
    pub stride: usize,
    pub padding: usize,
}

impl<E: Element> Conv<E> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        with_bias: bool,
        gain: f64,
        rng: &Rng,
    ) -> Result<Self> {
        let wname = format!("{name}.weight");
        let mut r = rng.split(&wname);
        let fan_in = c_in * kernel * kernel;
        let w = he_normal(&mut r, c_out * fan_in, fan_in, gain);
        let bias = with_bias
            .then(|| Parameter::new(format!("{name}.bias"), &[c_out, 1, 1], vec![E::zero(); c_out]))
            .transpose()?;
        Ok(Conv {
            weight: Parameter::new(wname, &[c_out, c_in, kernel, kernel], w)?,
            bias,
            stride,
            padding: kernel / 2,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        let y = x.conv2d(self.weight.value(), self.stride, self.padding)?;
        match &self.bias {
            Some(b) => y.add(b.value()),
            None => Ok(y),
        }
    }
}

impl<E: Element> Module<E> for Conv<E> {
    fn parameters(&self) -> Vec<&Parameter<E>> {
        let mut v = vec![&self.weight];
        v.extend(self.bias.as_ref());
        v
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter<E>> {
        let mut v = vec![&mut self.weight];
        v.extend(self.bias.as_mut());
        v
    }
}
