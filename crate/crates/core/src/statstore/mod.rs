//! The cross-site payload: source weights plus per-feature mixture
//! statistics, its binary encoding, the weight-noise privacy step, and a
//! file-backed registry through which sites exchange bundles.
//!
//! Only weights and aggregate statistics pass through here.

mod dp;
mod format;
mod registry;

pub use dp::{apply_dp_noise, DpConfig};
pub use format::{
    deserialize, deserialize_checkpoint, fnv1a64, serialize, serialize_checkpoint, stats_region, SFHB_MAGIC,
    SFHB_VERSION, SFHW_MAGIC,
};
pub use registry::{registry_pull, registry_push, Registry};

use thiserror::Error;

use crate::gmm::GmmParams;
use crate::nn::{SplitModel, TaskSpec};

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("not an SFHB bundle")]
    BadMagic,
    #[error("unsupported bundle format version {0}")]
    UnsupportedVersion(u32),
    #[error("checksum mismatch: stored {stored:016x}, computed {computed:016x}")]
    ChecksumMismatch { stored: u64, computed: u64 },
    #[error("bundle ends early")]
    Truncated,
    #[error("bundle invariant violated: {0}")]
    InvariantViolation(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("could not acquire the registry index lock after {0} attempts")]
    ConcurrentWriteConflict(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, StoreError>;

#[derive(Debug, Clone, PartialEq)]
pub struct BundleMeta {
    pub format_version: u32,
    pub k: usize,
    pub n_features: usize,
    pub task: TaskSpec,
    /// Seconds since the Unix epoch. Not covered by the checksum.
    pub created_unix: u64,
    pub site_id: String,
}

/// Source weights and feature statistics, as shipped to target sites.
#[derive(Debug, Clone, PartialEq)]
pub struct StatsBundle {
    pub weights: SplitModel,
    pub stats: GmmParams,
    pub meta: BundleMeta,
}

impl StatsBundle {
    /// Packages weights and statistics, stamping the current time.
    pub fn new(weights: SplitModel, stats: GmmParams, task: TaskSpec, site_id: impl Into<String>) -> Result<Self> {
        let created_unix =
            std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        let meta = BundleMeta {
            format_version: SFHB_VERSION,
            k: stats.n_components(),
            n_features: stats.n_features(),
            task,
            created_unix,
            site_id: site_id.into(),
        };
        let bundle = Self { weights, stats, meta };
        bundle.validate()?;
        Ok(bundle)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(StoreError::InvariantViolation(m));
        if self.stats.n_components() != self.meta.k {
            return bad(format!("stats have K={}, meta says {}", self.stats.n_components(), self.meta.k));
        }
        if self.stats.n_features() != self.meta.n_features {
            return bad(format!("stats have {} features, meta says {}", self.stats.n_features(), self.meta.n_features));
        }
        if self.stats.n_features() != self.weights.feature_dim() {
            return bad(format!(
                "stats have {} features, model taps {}",
                self.stats.n_features(),
                self.weights.feature_dim()
            ));
        }
        if self.weights.output_dim() != self.meta.task.output_dim() {
            return bad("model output width does not match the task".into());
        }
        if self.meta.site_id.is_empty() || self.meta.site_id.contains(['/', '\\']) || self.meta.site_id.starts_with('.')
        {
            return bad(format!("unusable site id {:?}", self.meta.site_id));
        }
        Ok(())
    }
}
