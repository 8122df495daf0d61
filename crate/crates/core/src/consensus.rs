//! Scale-specific branches joined by a consensus classifier over their
//! concatenated features.

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig, FactorSignature, FusionHead};
use crate::error::{Error, Result};
use crate::layers::{Linear, Module, LINEAR_GAIN};
use crate::optim::Parameter;
use crate::rng::Rng;
use crate::tensor::{no_grad, Element, PoolKind, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConsensusConfig {
    /// `(height, width)` of each branch input, in branch order.
    pub scales: Vec<(usize, usize)>,
    /// Global pooling used by each branch's fusion head.
    pub pooling: Vec<PoolKind>,
    pub backbone: BackboneConfig,
    pub n_id: usize,
}

impl ConsensusConfig {
    /// The largest scale pools by average, every other scale by max.
    pub fn default_pooling(scales: &[(usize, usize)]) -> Vec<PoolKind> {
        let largest = scales
            .iter()
            .enumerate()
            .max_by_key(|(i, (h, w))| (h * w, std::cmp::Reverse(*i)))
            .map(|(i, _)| i);
        (0..scales.len())
            .map(|i| {
                if Some(i) == largest {
                    PoolKind::Average
                } else {
                    PoolKind::Max
                }
            })
            .collect()
    }

    pub fn new(scales: Vec<(usize, usize)>, backbone: BackboneConfig, n_id: usize) -> Self {
        let pooling = Self::default_pooling(&scales);
        ConsensusConfig {
            scales,
            pooling,
            backbone,
            n_id,
        }
    }

    /// Two scales at 384×192 and 256×128 over the reference-size backbone.
    pub fn paper(n_id: usize) -> Self {
        Self::new(vec![(384, 192), (256, 128)], BackboneConfig::paper(), n_id)
    }

    pub fn num_branches(&self) -> usize {
        self.scales.len()
    }

    /// Length of the consensus feature, `m · d`.
    pub fn descriptor_len(&self) -> usize {
        self.scales.len() * self.backbone.feature_dim
    }

    /// Largest scale; augmentation crops at this resolution before resizing.
    pub fn largest_scale(&self) -> (usize, usize) {
        self.scales
            .iter()
            .copied()
            .max_by_key(|(h, w)| h * w)
            .unwrap_or((0, 0))
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.scales.is_empty() {
            return Err(Error::Config("at least one scale is required".into()));
        }
        if self.pooling.len() != self.scales.len() {
            return Err(Error::Config(format!(
                "{} pooling kinds for {} scales",
                self.pooling.len(),
                self.scales.len()
            )));
        }
        if let Some(s) = self.scales.iter().find(|(h, w)| *h == 0 || *w == 0) {
            return Err(Error::Config(format!("scale {s:?} has a zero side")));
        }
        if self.n_id < 2 {
            return Err(Error::Config("n_id must be at least 2".into()));
        }
        Ok(())
    }
}

/// One scale: backbone, fusion head and per-scale classifier.
#[derive(Debug, Clone)]
pub struct Branch<E: Element> {
    pub input_hw: (usize, usize),
    pub backbone: Backbone<E>,
    pub head: FusionHead<E>,
    pub classifier: Linear<E>,
}

#[derive(Debug, Clone)]
pub struct BranchOutput<E: Element> {
    pub feature: Tensor<E>,
    pub logits: Tensor<E>,
    pub signature: Option<FactorSignature<E>>,
}

impl<E: Element> Branch<E> {
    pub fn new(
        name: &str,
        config: &BackboneConfig,
        input_hw: (usize, usize),
        pool: PoolKind,
        n_id: usize,
        rng: &Rng,
    ) -> Result<Self> {
        Ok(Branch {
            input_hw,
            backbone: Backbone::new(&format!("{name}.backbone"), config, input_hw, rng)?,
            head: FusionHead::new(&format!("{name}.head"), config, pool, rng)?,
            classifier: Linear::new(
                &format!("{name}.classifier"),
                config.feature_dim,
                n_id,
                LINEAR_GAIN,
                rng,
            )?,
        })
    }

    pub fn forward(&self, images: &Tensor<E>) -> Result<BranchOutput<E>> {
        let out = self.backbone.forward(images)?;
        let feature = self.head.forward(&out.features, out.signature.as_ref())?;
        let logits = self.classifier.forward(&feature)?;
        Ok(BranchOutput {
            feature,
            logits,
            signature: out.signature,
        })
    }
}

impl<E: Element> Module<E> for Branch<E> {
    fn parameters(&self) -> Vec<&Parameter<E>> {
        let mut v = self.backbone.parameters();
        v.extend(self.head.parameters());
        v.extend(self.classifier.parameters());
        v
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter<E>> {
        let mut v = self.backbone.parameters_mut();
        v.extend(self.head.parameters_mut());
        v.extend(self.classifier.parameters_mut());
        v
    }
}

#[derive(Debug, Clone)]
pub struct ForwardResult<E: Element> {
    pub branches: Vec<BranchOutput<E>>,
    /// `[B, m·d]`, branch features concatenated in scale order.
    pub consensus_feature: Tensor<E>,
    pub consensus_logits: Tensor<E>,
}

impl<E: Element> ForwardResult<E> {
    /// The `m + 1` cross-entropy terms: one per branch, then the consensus term.
    pub fn loss_terms(&self, labels: &[usize]) -> Result<Vec<Tensor<E>>> {
        let mut terms = self
            .branches
            .iter()
            .map(|b| b.logits.softmax_cross_entropy(labels))
            .collect::<Result<Vec<_>>>()?;
        terms.push(self.consensus_logits.softmax_cross_entropy(labels)?);
        Ok(terms)
    }

    /// Unweighted sum of all branch losses and the consensus loss.
    pub fn total_loss(&self, labels: &[usize]) -> Result<Loss<E>> {
        let terms = self.loss_terms(labels)?;
        let mut total = terms[0].clone();
        for t in &terms[1..] {
            total = total.add(t)?;
        }
        Ok(Loss { total, terms })
    }
}

#[derive(Debug, Clone)]
pub struct Loss<E: Element> {
    pub total: Tensor<E>,
    pub terms: Vec<Tensor<E>>,
}

impl<E: Element> Loss<E> {
    pub fn value(&self) -> f64 {
        self.total.item().as_f64()
    }

    pub fn branch_values(&self) -> Vec<f64> {
        self.terms[..self.terms.len() - 1]
            .iter()
            .map(|t| t.item().as_f64())
            .collect()
    }

    pub fn consensus_value(&self) -> f64 {
        self.terms[self.terms.len() - 1].item().as_f64()
    }
}

/// Unit-length retrieval descriptor.
#[derive(Debug, Clone, PartialEq)]
pub struct Descriptor {
    pub values: Vec<f64>,
    /// The consensus feature had zero norm; `values` is all zeros.
    pub degenerate: bool,
}

pub fn l2_normalize(v: &[f64]) -> Descriptor {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 && norm.is_finite() {
        Descriptor {
            values: v.iter().map(|x| x / norm).collect(),
            degenerate: false,
        }
    } else {
        Descriptor {
            values: vec![0.0; v.len()],
            degenerate: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ConsensusNet<E: Element> {
    pub config: ConsensusConfig,
    pub branches: Vec<Branch<E>>,
    pub classifier: Linear<E>,
}

impl<E: Element> ConsensusNet<E> {
    pub fn new(config: &ConsensusConfig, rng: &Rng) -> Result<Self> {
        config.validate()?;
        let branches = config
            .scales
            .iter()
            .zip(&config.pooling)
            .enumerate()
            .map(|(s, (&hw, &pool))| {
                Branch::new(&format!("branch{s}"), &config.backbone, hw, pool, config.n_id, rng)
            })
            .collect::<Result<_>>()?;
        let classifier = Linear::new(
            "consensus.classifier",
            config.descriptor_len(),
            config.n_id,
            LINEAR_GAIN,
            rng,
        )?;
        Ok(ConsensusNet {
            config: config.clone(),
            branches,
            classifier,
        })
    }

    /// `images[s]` is the `[B, 3, H_s, W_s]` batch for branch `s`.
    pub fn forward(&self, images: &[Tensor<E>]) -> Result<ForwardResult<E>> {
        if images.len() != self.branches.len() {
            return Err(Error::Dimension(format!(
                "{} image batches for {} branches",
                images.len(),
                self.branches.len()
            )));
        }
        let mut outputs = Vec::with_capacity(self.branches.len());
        for (s, (branch, x)) in self.branches.iter().zip(images).enumerate() {
            let out = branch.forward(x).map_err(|e| match e {
                Error::Dimension(msg) => Error::Dimension(format!("branch {s}: {msg}")),
                other => other,
            })?;
            outputs.push(out);
        }
        let features: Vec<Tensor<E>> = outputs.iter().map(|o| o.feature.clone()).collect();
        let consensus_feature = Tensor::concat(&features, 1)?;
        let consensus_logits = self.classifier.forward(&consensus_feature)?;
        Ok(ForwardResult {
            branches: outputs,
            consensus_feature,
            consensus_logits,
        })
    }

    /// L2-normalized consensus features, one per sample, computed without
    /// recording a graph.
    pub fn extract_embeddings(&self, images: &[Tensor<E>]) -> Result<Vec<Descriptor>> {
        let feature = no_grad(|| self.forward(images))?.consensus_feature;
        let dim = self.config.descriptor_len();
        let descriptors: Vec<Descriptor> = feature
            .to_f64_vec()
            .chunks_exact(dim)
            .map(l2_normalize)
            .collect();
        let degenerate = descriptors.iter().filter(|d| d.degenerate).count();
        if degenerate > 0 {
            log::warn!("{degenerate} descriptor(s) had zero norm");
        }
        Ok(descriptors)
    }
}

impl<E: Element> Module<E> for ConsensusNet<E> {
    fn parameters(&self) -> Vec<&Parameter<E>> {
        let mut v: Vec<&Parameter<E>> = self.branches.iter().flat_map(|b| b.parameters()).collect();
        v.extend(self.classifier.parameters());
        v
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter<E>> {
        let mut v: Vec<&mut Parameter<E>> = self
            .branches
            .iter_mut()
            .flat_map(|b| b.parameters_mut())
            .collect();
        v.extend(self.classifier.parameters_mut());
        v
    }
}
