//! Model selection shared by the coarse-graining layer and the experiment runners.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::SiteGraph;
use crate::swm::{calibrate_matching, SwmBoundary, SwmDynamics};
use crate::xy::{calibrate_xy, XyBoundary, XyDynamics};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Swm,
    Xy,
}

/// A model together with its matching parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub d: usize,
    pub beta: f64,
    pub eps: f64,
    /// Digit depth of the matching coupling.
    pub k: u32,
}

impl ModelSpec {
    /// Parameters with the smallest certified digit depth for `eps`.
    pub fn calibrated(kind: ModelKind, d: usize, beta: f64, eps: f64) -> Result<Self> {
        let k = match kind {
            ModelKind::Swm => calibrate_matching(beta, d, eps)?,
            ModelKind::Xy => calibrate_xy(beta, d, eps)?,
        };
        Ok(Self { kind, d, beta, eps, k })
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.d > 4 {
            return Err(Error::InvalidParameter("dimension must be in 1..=4".into()));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::InvalidParameter("beta must be finite and non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.eps) {
            return Err(Error::InvalidParameter("eps must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn swm(&self, graph: Arc<SiteGraph>, boundary: SwmBoundary) -> Result<SwmDynamics> {
        self.expect(ModelKind::Swm)?;
        SwmDynamics::new(graph, self.beta, self.k, self.eps, boundary)
    }

    pub fn xy(&self, graph: Arc<SiteGraph>, boundary: XyBoundary) -> Result<XyDynamics> {
        self.expect(ModelKind::Xy)?;
        XyDynamics::new(graph, self.beta, self.k, self.eps, boundary)
    }

    fn expect(&self, kind: ModelKind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::InvalidParameter(format!("model is {:?}, not {kind:?}", self.kind)));
        }
        Ok(())
    }
}
