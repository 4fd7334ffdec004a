//! The noise-prediction abstraction `ε_θ(z, t, cond)` and its backends.

mod analytic;
mod remote;

use std::sync::atomic::{AtomicU64, Ordering};

pub use analytic::{analytic_eps, posterior, AnalyticDenoiser, GaussianMixture, Posterior};
pub use remote::RemoteDenoiser;

use crate::error::Result;
use crate::tensor::LatentTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ConditionKind {
    NullText,
    Prompt,
}

/// Opaque reference to a text embedding, valid only on the backend that
/// issued it.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ConditionHandle {
    scope: u64,
    id: u64,
    kind: ConditionKind,
}

impl ConditionHandle {
    pub(crate) fn new(scope: u64, id: u64, kind: ConditionKind) -> Self {
        Self { scope, id, kind }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn kind(&self) -> ConditionKind {
        self.kind
    }

    pub fn is_null(&self) -> bool {
        self.kind == ConditionKind::NullText
    }

    pub(crate) fn scope(&self) -> u64 {
        self.scope
    }
}

static NEXT_SCOPE: AtomicU64 = AtomicU64::new(1);

pub(crate) fn fresh_scope() -> u64 {
    NEXT_SCOPE.fetch_add(1, Ordering::Relaxed)
}

/// Noise predictor used by every trajectory.
///
/// Implementations must be deterministic for fixed inputs.
pub trait Denoiser: Send + Sync {
    fn eps(&self, z: &LatentTensor, t: usize, cond: &ConditionHandle) -> Result<LatentTensor>;

    /// The null-text condition `v∅`; always resolvable.
    fn null_condition(&self) -> ConditionHandle;
}

impl<D: Denoiser + ?Sized> Denoiser for &D {
    fn eps(&self, z: &LatentTensor, t: usize, cond: &ConditionHandle) -> Result<LatentTensor> {
        (**self).eps(z, t, cond)
    }

    fn null_condition(&self) -> ConditionHandle {
        (**self).null_condition()
    }
}
