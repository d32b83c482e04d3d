//! Named forward kernels, selectable at run time.

use crate::config::AttnConfig;
use crate::forward::{forward_fused, forward_traditional, ForwardOutput};
use crate::fp::Half;
use crate::tensor::Tensor;
use crate::{Error, Result};

pub trait ForwardKernel: Send + Sync {
    fn name(&self) -> &'static str;

    fn description(&self) -> &'static str;

    fn forward(&self, q: &Tensor<Half>, k: &Tensor<Half>, v: &Tensor<Half>, cfg: &AttnConfig) -> Result<ForwardOutput>;
}

pub struct FusedKernel;

impl ForwardKernel for FusedKernel {
    fn name(&self) -> &'static str {
        "fused"
    }

    fn description(&self) -> &'static str {
        "single launch, online softmax, S and P stay on chip"
    }

    fn forward(&self, q: &Tensor<Half>, k: &Tensor<Half>, v: &Tensor<Half>, cfg: &AttnConfig) -> Result<ForwardOutput> {
        forward_fused(q, k, v, cfg)
    }
}

pub struct TraditionalKernel;

impl ForwardKernel for TraditionalKernel {
    fn name(&self) -> &'static str {
        "traditional"
    }

    fn description(&self) -> &'static str {
        "three launches, S and P round-trip through HBM"
    }

    fn forward(&self, q: &Tensor<Half>, k: &Tensor<Half>, v: &Tensor<Half>, cfg: &AttnConfig) -> Result<ForwardOutput> {
        forward_traditional(q, k, v, cfg)
    }
}

/// Kernels in registration order.
#[derive(Default)]
pub struct KernelRegistry {
    kernels: Vec<Box<dyn ForwardKernel>>,
}

impl KernelRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_defaults() -> Self {
        let mut r = Self::new();
        r.register(Box::new(FusedKernel));
        r.register(Box::new(TraditionalKernel));
        r
    }

    /// Adds `kernel`, replacing any kernel registered under the same name.
    pub fn register(&mut self, kernel: Box<dyn ForwardKernel>) {
        match self.kernels.iter().position(|k| k.name() == kernel.name()) {
            Some(i) => self.kernels[i] = kernel,
            None => self.kernels.push(kernel),
        }
    }

    pub fn get(&self, name: &str) -> Result<&dyn ForwardKernel> {
        self.kernels
            .iter()
            .find(|k| k.name() == name)
            .map(|k| k.as_ref())
            .ok_or_else(|| Error::UnknownKernel(name.to_string()))
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.kernels.iter().map(|k| k.name()).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = &dyn ForwardKernel> {
        self.kernels.iter().map(|k| k.as_ref())
    }
}
