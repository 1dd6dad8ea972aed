//! Run configuration: a TOML document whose every key has a default, and
//! which CLI flags override key by key.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use mka_core::engines::{BlockMode, BlockPlan, MkaConfig};
use mka_core::memory::SummaryMode;
use mka_core::routing::RoutingPolicy;
use mka_core::{ModelDims, Precision};
use serde::{Deserialize, Serialize};

use crate::{HarnessError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EngineKind {
    Mha,
    SymbolicMka,
    Fastmka,
    BlockMkaLocal,
    BlockMkaGlobal,
}

impl EngineKind {
    pub const ALL: [EngineKind; 5] = [
        EngineKind::Mha,
        EngineKind::SymbolicMka,
        EngineKind::Fastmka,
        EngineKind::BlockMkaLocal,
        EngineKind::BlockMkaGlobal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EngineKind::Mha => "mha",
            EngineKind::SymbolicMka => "symbolic_mka",
            EngineKind::Fastmka => "fastmka",
            EngineKind::BlockMkaLocal => "block_mka_local",
            EngineKind::BlockMkaGlobal => "block_mka_global",
        }
    }
}

impl fmt::Display for EngineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EngineKind {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        EngineKind::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = EngineKind::ALL.iter().map(|e| e.name()).collect();
                HarnessError::Config(format!("unknown engine {s:?}; expected one of {}", names.join(", ")))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrecisionSetting {
    Single,
    Double,
}

impl PrecisionSetting {
    pub fn precision(self) -> Precision {
        match self {
            PrecisionSetting::Single => Precision::Single,
            PrecisionSetting::Double => Precision::Double,
        }
    }
}

impl FromStr for PrecisionSetting {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(PrecisionSetting::Single),
            "double" => Ok(PrecisionSetting::Double),
            _ => Err(HarnessError::Config(format!("precision must be single or double, got {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SummaryConfig {
    /// `prefix_mean` or `ema`.
    pub mode: String,
    pub decay: f64,
}

impl Default for SummaryConfig {
    fn default() -> Self {
        Self {
            mode: "prefix_mean".into(),
            decay: 0.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BlockConfig {
    pub size: usize,
    /// Blocks visible to a local-mode query block, its own included.
    pub window: usize,
}

impl Default for BlockConfig {
    fn default() -> Self {
        Self { size: 64, window: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetrievalConfig {
    pub enabled: bool,
    pub top_r: usize,
    pub h_bits: usize,
    pub chunks: usize,
    pub chunk_len: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            top_r: 8,
            h_bits: 64,
            chunks: 64,
            chunk_len: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyConfig {
    pub equivalence_instances: usize,
    pub stability_instances: usize,
    /// Score magnitude used by the single-precision stability probe.
    pub stability_score: f64,
    pub engine_instances: usize,
    pub causality_trials: usize,
    pub gradient_instances: usize,
    pub recall_trials: usize,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            equivalence_instances: 1000,
            stability_instances: 100,
            stability_score: 80.0,
            engine_instances: 20,
            causality_trials: 200,
            gradient_instances: 100,
            recall_trials: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub engines: Vec<EngineKind>,
    pub d_model: usize,
    pub n_heads: usize,
    pub seq_lens: Vec<usize>,
    pub batch: usize,
    /// `learned_soft`, `fixed_uniform`, `hard_top1` or `hard_top2`.
    pub routing: String,
    /// Score scale; 0 means `1/√d_h`.
    pub tau: f64,
    pub seed: u64,
    pub precision: PrecisionSetting,
    pub warmups: usize,
    pub repeats: usize,
    /// Estimated working set above which a (engine, seq_len) pair is skipped.
    pub memory_budget_bytes: u64,
    pub summary: SummaryConfig,
    pub block: BlockConfig,
    pub retrieval: RetrievalConfig,
    pub verify: VerifyConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            engines: EngineKind::ALL.to_vec(),
            d_model: 64,
            n_heads: 4,
            seq_lens: vec![512, 1024, 2048, 4096, 8192],
            batch: 1,
            routing: "learned_soft".into(),
            tau: 0.0,
            seed: 0,
            precision: PrecisionSetting::Single,
            warmups: 2,
            repeats: 5,
            memory_budget_bytes: 4 << 30,
            summary: SummaryConfig::default(),
            block: BlockConfig::default(),
            retrieval: RetrievalConfig::default(),
            verify: VerifyConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: RunConfig = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config always serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.engines.is_empty() {
            return bad("at least one engine is required".into());
        }
        for (name, v) in [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("batch", self.batch),
            ("repeats", self.repeats),
            ("block.size", self.block.size),
            ("block.window", self.block.window),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.seq_lens.is_empty() || self.seq_lens.contains(&0) {
            return bad("seq_lens must be a non-empty list of positive lengths".into());
        }
        if self.seq_lens.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("seq_lens must be strictly ascending, got {:?}", self.seq_lens));
        }
        if self.retrieval.enabled
            && (self.retrieval.top_r == 0
                || self.retrieval.h_bits == 0
                || self.retrieval.chunks == 0
                || self.retrieval.chunk_len == 0)
        {
            return bad("retrieval.top_r, h_bits, chunks and chunk_len must be positive".into());
        }
        if !(self.tau >= 0.0 && self.tau.is_finite()) {
            return bad(format!("tau must be finite and non-negative, got {}", self.tau));
        }
        self.dims()?;
        self.policy()?;
        self.summary_mode()?;
        Ok(())
    }

    pub fn dims(&self) -> Result<ModelDims> {
        Ok(ModelDims::new(self.d_model, self.n_heads)?)
    }

    pub fn policy(&self) -> Result<RoutingPolicy> {
        match self.routing.as_str() {
            "learned_soft" => Ok(RoutingPolicy::LearnedSoft),
            "fixed_uniform" => Ok(RoutingPolicy::FixedUniform),
            "hard_top1" => Ok(RoutingPolicy::HardTopK(1)),
            "hard_top2" => Ok(RoutingPolicy::HardTopK(2)),
            other => Err(HarnessError::Config(format!(
                "routing must be learned_soft, fixed_uniform, hard_top1 or hard_top2, got {other:?}"
            ))),
        }
    }

    pub fn summary_mode(&self) -> Result<SummaryMode> {
        let mode = match self.summary.mode.as_str() {
            "prefix_mean" => SummaryMode::PrefixMean,
            "ema" => SummaryMode::Ema {
                decay: self.summary.decay,
            },
            other => {
                return Err(HarnessError::Config(format!(
                    "summary.mode must be prefix_mean or ema, got {other:?}"
                )))
            }
        };
        mode.validate()?;
        Ok(mode)
    }

    pub fn mka_config(&self) -> Result<MkaConfig> {
        let mut c = MkaConfig::new(self.dims()?);
        c.summary = self.summary_mode()?;
        c.policy = self.policy()?;
        c.tau = (self.tau > 0.0).then_some(self.tau);
        Ok(c)
    }

    pub fn block_plan(&self, mode: BlockMode) -> Result<BlockPlan> {
        let mut plan = BlockPlan::new(self.block.size, self.dims()?.d_head())
            .with_mode(mode)
            .with_padding(true);
        if self.tau > 0.0 {
            plan.tau = self.tau;
        }
        Ok(plan)
    }
}

/// Parses `a,b,c` into a list.
pub fn parse_list<T: FromStr>(s: &str) -> Result<Vec<T>>
where
    T::Err: fmt::Display,
{
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| p.parse::<T>().map_err(|e| HarnessError::Config(format!("{p:?}: {e}"))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn partial_documents_keep_defaults() {
        let c = RunConfig::from_toml("seed = 9\nengines = [\"fastmka\"]\n[block]\nsize = 32\n").unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.engines, vec![EngineKind::Fastmka]);
        assert_eq!(c.block.size, 32);
        assert_eq!(c.block.window, 4);
    }

    #[test]
    fn rejects_bad_documents() {
        for text in [
            "seq_lens = [1024, 512]",
            "seq_lens = []",
            "batch = 0",
            "routing = \"hard_top3\"",
            "d_model = 10\nn_heads = 4",
            "typo = 1",
            "[summary]\nmode = \"ema\"\ndecay = 1.5",
            "precision = \"half\"",
        ] {
            assert!(RunConfig::from_toml(text).is_err(), "{text}");
        }
    }

    #[test]
    fn lists_and_names() {
        let e: Vec<EngineKind> = parse_list("mha, fastmka,block_mka_local").unwrap();
        assert_eq!(e, vec![EngineKind::Mha, EngineKind::Fastmka, EngineKind::BlockMkaLocal]);
        assert!(parse_list::<EngineKind>("flash").is_err());
        assert_eq!(parse_list::<usize>("512,1024").unwrap(), vec![512, 1024]);
        assert!(parse_list::<usize>("5x").is_err());
    }
}
