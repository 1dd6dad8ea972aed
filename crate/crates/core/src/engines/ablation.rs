//! Memory-tier ablations of the route-fused engine.

use super::fastmka::fastmka_forward;
use super::MkaModel;
use crate::error::Result;
use crate::memory::ChunkStore;
use crate::routing::TierSet;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AblationConfig {
    pub l1: bool,
    pub l2: bool,
    pub l3: bool,
}

impl AblationConfig {
    pub fn label(&self) -> String {
        let kept: Vec<&str> = [(self.l1, "L1"), (self.l2, "L2"), (self.l3, "L3")]
            .iter()
            .filter(|(keep, _)| *keep)
            .map(|(_, name)| *name)
            .collect();
        kept.join("+")
    }
}

/// A route-fused engine restricted to a subset of memory levels. Dropped
/// levels get zero weight and `λ` is renormalized over the kept ones; L3 also
/// counts as dropped when no store can recall anything.
#[derive(Debug, Clone, PartialEq)]
pub struct EngineVariant<T> {
    pub label: String,
    pub model: MkaModel<T>,
}

impl<T: Scalar> EngineVariant<T> {
    pub fn forward(&self, x: &Tensor<T>, store: Option<&ChunkStore>) -> Result<Tensor<T>> {
        fastmka_forward(&self.model, x, store, None).map(|(o, _)| o)
    }
}

pub fn tier_ablation<T: Scalar>(base: &MkaModel<T>, config: AblationConfig) -> Result<EngineVariant<T>> {
    let tiers = TierSet::new(config.l1, config.l2, config.l3)?;
    let mut model = base.clone();
    model.config.tiers = tiers;
    Ok(EngineVariant {
        label: config.label(),
        model,
    })
}
