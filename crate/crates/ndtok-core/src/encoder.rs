//! Per-scale cell encoder: 15-dim descriptors → d_f features.

use alloc::format;
use alloc::vec::Vec;

use crate::cloud::{CameraView, Vec3};
use crate::config::PipelineConfig;
use crate::error::{invalid, Result};
use crate::graph::{Graph, TensorId};
use crate::math;
use crate::ndt::{self, NdtGrid, VisibilityOptions, DESCRIPTOR_DIM};
use crate::nn::{self, Engine, Eval};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Per-scale features: row i belongs to canonical cell i of the source grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub dim: usize,
    /// rows × dim, row-major.
    pub values: Tensor,
    /// Canonical cell index of each row (sorted lexicographically).
    pub cell_order: Vec<ndt::CellIndex>,
    /// Cell mean of each row.
    pub positions: Vec<Vec3>,
}

impl FeatureMatrix {
    pub fn rows(&self) -> usize {
        self.values.rows()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.values.row(i)
    }
}

/// Sinusoidal positional encoding over (already centered) coordinates:
/// floor(d_f/6) frequencies per axis × 3 axes × (sin, cos); remaining columns
/// stay zero when 6 does not divide d_f.
pub fn positional_encoding(centered: &[Vec3], dim: usize) -> Tensor {
    let n_freq = dim / 6;
    let mut out = Tensor::zeros(centered.len(), dim);
    if n_freq == 0 {
        return out;
    }
    let per_axis = n_freq * 2;
    for (i, p) in centered.iter().enumerate() {
        for axis in 0..3 {
            for f in 0..n_freq {
                // wavelengths spread geometrically from 1 to 10^4
                let omega = 1.0 / math::powf(10000.0, f as f64 / n_freq as f64);
                let phase = p[axis] * omega;
                let col = axis * per_axis + 2 * f;
                out.set(i, col, math::sin(phase));
                out.set(i, col + 1, math::cos(phase));
            }
        }
    }
    out
}

/// Mean of the cell means; features are made translation-insensitive by
/// centering the positional inputs (descriptor mean and posenc) on it.
fn mean_of_means(grid: &NdtGrid) -> Vec3 {
    let mut m = [0.0f64; 3];
    for cell in grid.cells() {
        for a in 0..3 {
            m[a] += cell.stats.mean[a];
        }
    }
    for v in &mut m {
        *v /= grid.len() as f64;
    }
    m
}

/// Descriptor matrix with the mean component centered, plus the centered
/// means themselves (posenc input).
fn centered_inputs(grid: &NdtGrid) -> (Tensor, Vec<Vec3>) {
    let center = mean_of_means(grid);
    let mut desc = Tensor::zeros(grid.len(), DESCRIPTOR_DIM);
    let mut centered = Vec::with_capacity(grid.len());
    for (i, cell) in grid.cells().iter().enumerate() {
        let mut d = ndt::cell_descriptor(&cell.stats);
        for a in 0..3 {
            d[a] -= center[a];
        }
        desc.data_mut()[i * DESCRIPTOR_DIM..(i + 1) * DESCRIPTOR_DIM].copy_from_slice(&d);
        let m = cell.stats.mean;
        centered.push([m[0] - center[0], m[1] - center[1], m[2] - center[2]]);
    }
    (desc, centered)
}

/// Shared encoder body: embed(descriptor) + posenc, then the configured
/// number of transformer blocks. Works on either engine.
pub fn encode_scale_in<E: Engine>(
    e: &mut E,
    grid: &NdtGrid,
    store: &ParamStore,
    scale_id: usize,
    config: &PipelineConfig,
) -> Result<E::Id> {
    if grid.is_empty() {
        return Err(invalid("cannot encode an empty grid"));
    }
    let (desc, centered) = centered_inputs(grid);
    let posenc = positional_encoding(&centered, config.feature_dim);

    let prefix = format!("enc{scale_id}");
    let desc_id = e.constant(desc)?;
    let embedded = nn::linear(
        e,
        store,
        &desc_id,
        &format!("{prefix}.embed.w"),
        Some(&format!("{prefix}.embed.b")),
    )?;
    let pos_id = e.constant(posenc)?;
    let mut x = e.add(&embedded, &pos_id)?;
    for b in 0..config.encoder_depth {
        x = nn::encoder_block(e, store, &x, config.heads, &format!("{prefix}.blk{b}"))?;
    }
    // Final norm of the pre-norm stack: keeps feature rows bounded so the
    // decoder's attention logits stay in softmax's soft regime.
    nn::layer_norm(e, store, &x, &format!("{prefix}.final"))
}

/// Inference-path encoder producing the feature matrix for one scale.
pub fn encode_scale(
    grid: &NdtGrid,
    store: &ParamStore,
    scale_id: usize,
    config: &PipelineConfig,
) -> Result<FeatureMatrix> {
    let values = encode_scale_in(&mut Eval, grid, store, scale_id, config)?;
    if values.cols() != config.feature_dim {
        return Err(invalid("encoder output width mismatch"));
    }
    Ok(FeatureMatrix {
        dim: config.feature_dim,
        values,
        cell_order: grid.cells().iter().map(|c| c.index).collect(),
        positions: grid.means(),
    })
}

/// Graph-path encoder for gradient checks.
pub fn encode_scale_graph(
    g: &mut Graph,
    grid: &NdtGrid,
    store: &ParamStore,
    scale_id: usize,
    config: &PipelineConfig,
) -> Result<TensorId> {
    encode_scale_in(g, grid, store, scale_id, config)
}

/// Lifts externally computed per-view feature maps onto cells with the same
/// projection/averaging rule as RGB colorization. Cells invisible in every
/// view get zero rows.
pub fn lift_reference_features(
    grid: &NdtGrid,
    feature_views: &[CameraView],
    dim: usize,
    options: VisibilityOptions,
) -> Result<FeatureMatrix> {
    for view in feature_views {
        if view.channels != dim {
            return Err(invalid(format!(
                "feature map has {} channels, expected {dim}",
                view.channels
            )));
        }
    }
    let (features, _valid) = ndt::project_cell_features(grid, feature_views, dim, options)?;
    let mut values = Tensor::zeros(grid.len(), dim);
    for (i, f) in features.iter().enumerate() {
        values.data_mut()[i * dim..(i + 1) * dim].copy_from_slice(f);
    }
    Ok(FeatureMatrix {
        dim,
        values,
        cell_order: grid.cells().iter().map(|c| c.index).collect(),
        positions: grid.means(),
    })
}
