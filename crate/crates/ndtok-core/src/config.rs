//! Pipeline configuration shared by every stage.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, Result};
use crate::losses::LossWeights;

/// Activation used inside the two-layer projection heads (f_mm, f_s, f_m,
/// classifier). `Identity` turns a head into a plain two-layer linear map,
/// which some fixtures rely on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadActivation {
    Gelu,
    Identity,
}

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    /// Cell sizes in meters, strictly decreasing (coarsest first).
    pub scales: Vec<f64>,
    /// Number of base decoder queries (token count M).
    pub query_count: usize,
    /// Feature width d_f.
    pub feature_dim: usize,
    /// Token width d_llm.
    pub llm_dim: usize,
    /// Encoder blocks per scale.
    pub encoder_depth: usize,
    /// Attention heads; must divide feature_dim.
    pub heads: usize,
    /// FFN hidden width multiplier.
    pub ffn_multiplier: usize,
    pub seed: u64,
    /// Isotropic covariance regularizer ε.
    pub covariance_regularizer: f64,
    /// Add ε·I to covariances at grid build time. Off by default so built
    /// stats follow the plain sample-covariance definition.
    pub regularize_build: bool,
    /// Reject projected samples whose depth disagrees with a view's depth map.
    pub depth_test: bool,
    /// Depth agreement tolerance in meters.
    pub depth_tolerance: f64,
    /// Classes in the classification head.
    pub num_classes: usize,
    pub head_activation: HeadActivation,
    pub loss_weights: LossWeights,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            scales: vec![0.8, 0.4, 0.2],
            query_count: 850,
            feature_dim: 64,
            llm_dim: 128,
            encoder_depth: 2,
            heads: 4,
            ffn_multiplier: 4,
            seed: 42,
            covariance_regularizer: 1e-6,
            regularize_build: false,
            depth_test: false,
            depth_tolerance: 0.02,
            num_classes: 20,
            head_activation: HeadActivation::Gelu,
            loss_weights: LossWeights::default(),
        }
    }
}

impl PipelineConfig {
    pub fn scale_count(&self) -> usize {
        self.scales.len()
    }

    /// Finest cell size (last entry).
    pub fn finest_scale(&self) -> f64 {
        *self.scales.last().expect("validated nonempty")
    }

    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() {
            return Err(invalid("at least one scale required"));
        }
        for w in self.scales.windows(2) {
            if w[1] >= w[0] {
                return Err(invalid(format!(
                    "cell sizes must be strictly decreasing, got {} then {}",
                    w[0], w[1]
                )));
            }
        }
        if self.scales.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(invalid("cell sizes must be positive and finite"));
        }
        if self.query_count == 0 {
            return Err(invalid("query_count must be >= 1"));
        }
        if self.feature_dim < 2 || self.llm_dim < 2 {
            return Err(invalid("feature_dim and llm_dim must be >= 2"));
        }
        if self.heads == 0 || self.feature_dim % self.heads != 0 {
            return Err(invalid(format!(
                "heads ({}) must divide feature_dim ({})",
                self.heads, self.feature_dim
            )));
        }
        if self.encoder_depth == 0 {
            return Err(invalid("encoder_depth must be >= 1"));
        }
        if self.ffn_multiplier == 0 {
            return Err(invalid("ffn_multiplier must be >= 1"));
        }
        if self.covariance_regularizer < 0.0 || !self.covariance_regularizer.is_finite() {
            return Err(invalid("covariance regularizer must be >= 0"));
        }
        if self.depth_tolerance < 0.0 {
            return Err(invalid("depth tolerance must be >= 0"));
        }
        if self.num_classes < 2 {
            return Err(invalid("num_classes must be >= 2"));
        }
        self.loss_weights.validate()?;
        Ok(())
    }
}
