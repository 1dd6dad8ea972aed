//! Forward engines.
//!
//! - [`reference_causal_mha`]: plain causal multi-head attention.
//! - [`symbolic_mka_forward`]: one attention per memory level, mixed by `λ`
//!   after each level's softmax.
//! - [`fastmka_forward`] / [`fastmka_decode_step`]: route-fusion of the levels
//!   before a single K/V projection, with a fused-KV cache.
//! - [`mixture`]: gated mixture of exponentiated scores, normalized after
//!   mixing (direct, recursive and max-shifted scans).
//! - [`block`]: tiled online-softmax attention with local/global modes and
//!   chunk recall.

pub mod ablation;
pub mod attention;
pub mod block;
pub mod fastmka;
pub mod mixture;
pub mod reference;
pub mod symbolic;

pub use ablation::{tier_ablation, AblationConfig, EngineVariant};
pub use attention::{attention_weights, multi_head_attention, Mask};
pub use block::{block_mka, block_mka_forward, BlockMode, BlockPlan};
pub use fastmka::{fastmka_decode_step, fastmka_forward, FusedKvCache};
pub use mixture::{
    gated_mixture_direct, gated_mixture_recursive, gated_mixture_stable, Level, LevelWeights,
    OnlineSoftmaxState,
};
pub use reference::reference_causal_mha;
pub use symbolic::{symbolic_mka_forward, KvCache};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{MkaError, Result};
use crate::memory::{ChunkStore, SummaryMode};
use crate::routing::{GateParams, RoutingPolicy, TierSet};
use crate::scalar::Scalar;
use crate::tensor::{ModelDims, Tensor};

/// Square `D×D` projections.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionSet<T> {
    pub w_q: Tensor<T>,
    pub w_k: Tensor<T>,
    pub w_v: Tensor<T>,
    pub w_o: Tensor<T>,
}

impl<T: Scalar> ProjectionSet<T> {
    pub fn new(w_q: Tensor<T>, w_k: Tensor<T>, w_v: Tensor<T>, w_o: Tensor<T>) -> Result<Self> {
        let d = w_q.dim(0);
        for w in [&w_q, &w_k, &w_v, &w_o] {
            if w.shape() != [d, d] {
                return Err(MkaError::shape(
                    "projections",
                    format!("expected [{d}×{d}], got {:?}", w.shape()),
                ));
            }
            if !w.is_finite() {
                return Err(MkaError::NonFinite { op: "projections" });
            }
        }
        Ok(Self { w_q, w_k, w_v, w_o })
    }

    /// Seeded uniform weights on `±1/√D`.
    pub fn random(d_model: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (d_model as f64).sqrt();
        let mut draw = || {
            Tensor::from_fn(&[d_model, d_model], |_| {
                T::from_f64_lossy(rng.random_range(-bound..bound))
            })
        };
        Self {
            w_q: draw(),
            w_k: draw(),
            w_v: draw(),
            w_o: draw(),
        }
    }

    pub fn d_model(&self) -> usize {
        self.w_q.dim(0)
    }

    pub fn cast<U: Scalar>(&self) -> ProjectionSet<U> {
        ProjectionSet {
            w_q: self.w_q.cast(),
            w_k: self.w_k.cast(),
            w_v: self.w_v.cast(),
            w_o: self.w_o.cast(),
        }
    }
}

/// Hyper-parameters shared by the MKA engines.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MkaConfig {
    pub dims: ModelDims,
    pub summary: SummaryMode,
    pub policy: RoutingPolicy,
    pub tiers: TierSet,
    /// Score scale; `None` means `1/√d_h`.
    pub tau: Option<f64>,
}

impl MkaConfig {
    pub fn new(dims: ModelDims) -> Self {
        Self {
            dims,
            summary: SummaryMode::PrefixMean,
            policy: RoutingPolicy::LearnedSoft,
            tiers: TierSet::ALL,
            tau: None,
        }
    }

    pub fn scale(&self) -> f64 {
        self.tau
            .unwrap_or_else(|| 1.0 / (self.dims.d_head() as f64).sqrt())
    }
}

/// Weights plus configuration of one MKA attention layer.
#[derive(Debug, Clone, PartialEq)]
pub struct MkaModel<T> {
    pub proj: ProjectionSet<T>,
    pub gate: GateParams<T>,
    pub config: MkaConfig,
}

impl<T: Scalar> MkaModel<T> {
    pub fn new(proj: ProjectionSet<T>, gate: GateParams<T>, config: MkaConfig) -> Result<Self> {
        let d = config.dims.d_model;
        if proj.d_model() != d || gate.d_model() != d {
            return Err(MkaError::Dims(format!(
                "projections ({}) and gate ({}) must match d_model {d}",
                proj.d_model(),
                gate.d_model()
            )));
        }
        config.summary.validate()?;
        Ok(Self { proj, gate, config })
    }

    /// Seeded projections and gate.
    pub fn random(config: MkaConfig, seed: u64) -> Self {
        let d = config.dims.d_model;
        Self {
            proj: ProjectionSet::random(d, seed),
            gate: GateParams::init(d, seed.wrapping_add(1)),
            config,
        }
    }

    pub(crate) fn scale(&self) -> T {
        T::from_f64_lossy(self.config.scale())
    }

    pub(crate) fn check_input(&self, x: &Tensor<T>, op: &'static str) -> Result<()> {
        if x.rank() != 3 || x.dim(2) != self.config.dims.d_model {
            return Err(MkaError::shape(
                op,
                format!("expected [B×S×{}], got {:?}", self.config.dims.d_model, x.shape()),
            ));
        }
        if x.dim(0) == 0 || x.dim(1) == 0 {
            return Err(MkaError::shape(op, format!("empty input {:?}", x.shape())));
        }
        if !x.is_finite() {
            return Err(MkaError::NonFinite { op });
        }
        Ok(())
    }
}

/// Levels that take part in routing for this call. L3 only counts when a
/// non-empty store can actually recall something; otherwise its weight is
/// redistributed over the remaining kept levels.
pub(crate) fn active_tiers(tiers: TierSet, store: Option<&ChunkStore>) -> Result<TierSet> {
    let recalls = store.is_some_and(|s| !s.is_empty() && s.top_r() > 0);
    if recalls || !tiers.contains(2) {
        Ok(tiers)
    } else {
        TierSet::new(tiers.contains(0), tiers.contains(1), false).map_err(|_| {
            MkaError::Config("only L3 is enabled but no chunk store can recall anything".into())
        })
    }
}
