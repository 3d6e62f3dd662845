//! Multi-scale Normal Distributions Transform grids.
//!
//! A grid partitions space into cubic cells anchored at a shared origin; each
//! occupied cell carries the Gaussian statistics (mean, sample covariance) of
//! its member points plus an averaged appearance vector. Cells are stored in
//! canonical order: lexicographic on the integer 3-index. Per-cell accumulation
//! always follows ascending point index, so results are byte-reproducible no
//! matter how callers distribute cells over workers.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use crate::cloud::{CameraView, PointCloud, Vec3};
use crate::error::{invalid, Result};
use crate::math;

/// Integer 3-index of a cell. Array `Ord` is lexicographic, which defines the
/// canonical cell order.
pub type CellIndex = [i64; 3];

pub const DESCRIPTOR_DIM: usize = 15;

#[derive(Debug, Clone, PartialEq)]
pub struct CellStats {
    pub mean: Vec3,
    /// Symmetric 3×3 sample covariance (denominator n−1; zero when n = 1).
    pub covariance: [[f64; 3]; 3],
    pub n: usize,
    /// Averaged appearance (RGB in [0,1]); zeros when no view saw the cell.
    pub rgb: Vec3,
    pub rgb_valid: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NdtCell {
    pub index: CellIndex,
    pub stats: CellStats,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NdtGrid {
    cell_size: f64,
    origin: Vec3,
    cells: Vec<NdtCell>,
    /// Per input point: row of its cell in `cells`.
    point_assignment: Vec<usize>,
}

impl NdtGrid {
    /// Canonicalizes an arbitrary cell presentation order, remapping the
    /// assignment accordingly.
    pub fn from_cells(
        cell_size: f64,
        origin: Vec3,
        mut cells: Vec<NdtCell>,
        point_assignment: Vec<usize>,
    ) -> Result<Self> {
        if cells.is_empty() {
            return Err(invalid("grid needs at least one cell"));
        }
        let mut order: Vec<usize> = (0..cells.len()).collect();
        order.sort_unstable_by_key(|&i| cells[i].index);
        let mut remap = vec![0usize; cells.len()];
        for (new_row, &old_row) in order.iter().enumerate() {
            remap[old_row] = new_row;
        }
        let mut sorted = Vec::with_capacity(cells.len());
        for &i in &order {
            sorted.push(core::mem::replace(
                &mut cells[i],
                NdtCell {
                    index: [0; 3],
                    stats: CellStats {
                        mean: [0.0; 3],
                        covariance: [[0.0; 3]; 3],
                        n: 0,
                        rgb: [0.0; 3],
                        rgb_valid: false,
                    },
                },
            ));
        }
        let point_assignment = point_assignment.iter().map(|&row| remap[row]).collect();
        Ok(NdtGrid {
            cell_size,
            origin,
            cells: sorted,
            point_assignment,
        })
    }

    pub fn cell_size(&self) -> f64 {
        self.cell_size
    }

    pub fn origin(&self) -> Vec3 {
        self.origin
    }

    pub fn cells(&self) -> &[NdtCell] {
        &self.cells
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn point_assignment(&self) -> &[usize] {
        &self.point_assignment
    }

    /// Row of a cell index in canonical order.
    pub fn row_of(&self, index: CellIndex) -> Option<usize> {
        self.cells.binary_search_by(|c| c.index.cmp(&index)).ok()
    }

    /// Cell means in canonical order.
    pub fn means(&self) -> Vec<Vec3> {
        self.cells.iter().map(|c| c.stats.mean).collect()
    }

    /// Adds ε·I to every covariance.
    pub fn regularize_covariance(&mut self, epsilon: f64) {
        for cell in &mut self.cells {
            for a in 0..3 {
                cell.stats.covariance[a][a] += epsilon;
            }
        }
    }
}

/// floor((x − origin) / cell_size), componentwise.
pub fn cell_index_of(p: Vec3, origin: Vec3, cell_size: f64) -> CellIndex {
    let mut idx = [0i64; 3];
    for a in 0..3 {
        idx[a] = math::floor((p[a] - origin[a]) / cell_size) as i64;
    }
    idx
}

/// Cell membership of every point: canonical cell order, ascending member
/// lists, and the per-point row assignment. This is the cheap first pass;
/// [`cell_stats_of`] over the member lists is embarrassingly parallel.
#[derive(Debug, Clone)]
pub struct CellPartition {
    pub cell_size: f64,
    pub origin: Vec3,
    pub order: Vec<CellIndex>,
    pub members: Vec<Vec<usize>>,
    pub assignment: Vec<usize>,
}

pub fn partition_points(cloud: &PointCloud, cell_size: f64, origin: Vec3) -> Result<CellPartition> {
    if !(cell_size > 0.0) || !cell_size.is_finite() {
        return Err(invalid("cell_size must be positive and finite"));
    }
    if origin.iter().any(|v| !v.is_finite()) {
        return Err(invalid("grid origin must be finite"));
    }
    let mut buckets: BTreeMap<CellIndex, Vec<usize>> = BTreeMap::new();
    for (i, &p) in cloud.positions().iter().enumerate() {
        buckets.entry(cell_index_of(p, origin, cell_size)).or_default().push(i);
    }
    let mut order = Vec::with_capacity(buckets.len());
    let mut members = Vec::with_capacity(buckets.len());
    let mut assignment = vec![0usize; cloud.len()];
    for (row, (index, list)) in buckets.into_iter().enumerate() {
        for &i in &list {
            assignment[i] = row;
        }
        order.push(index);
        members.push(list);
    }
    Ok(CellPartition {
        cell_size,
        origin,
        order,
        members,
        assignment,
    })
}

/// Two-pass mean and sample covariance over the listed points, accumulated in
/// ascending point index. n = 1 cells get a zero covariance.
pub fn cell_stats_of(cloud: &PointCloud, members: &[usize]) -> CellStats {
    let n = members.len();
    let positions = cloud.positions();
    let mut mean = [0.0f64; 3];
    for &i in members {
        for a in 0..3 {
            mean[a] += positions[i][a];
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }

    let mut covariance = [[0.0f64; 3]; 3];
    if n > 1 {
        for &i in members {
            let d = [
                positions[i][0] - mean[0],
                positions[i][1] - mean[1],
                positions[i][2] - mean[2],
            ];
            for a in 0..3 {
                for b in 0..3 {
                    covariance[a][b] += d[a] * d[b];
                }
            }
        }
        let denom = (n - 1) as f64;
        for row in &mut covariance {
            for v in row.iter_mut() {
                *v /= denom;
            }
        }
    }

    let (rgb, rgb_valid) = match cloud.colors() {
        Some(colors) => {
            let mut rgb = [0.0f64; 3];
            for &i in members {
                for a in 0..3 {
                    rgb[a] += colors[i][a];
                }
            }
            for c in &mut rgb {
                *c /= n as f64;
            }
            (rgb, true)
        }
        None => ([0.0; 3], false),
    };

    CellStats {
        mean,
        covariance,
        n,
        rgb,
        rgb_valid,
    }
}

pub fn assemble_grid(partition: CellPartition, stats: Vec<CellStats>) -> Result<NdtGrid> {
    if stats.len() != partition.order.len() {
        return Err(invalid("stats count does not match partition"));
    }
    let cells = partition
        .order
        .into_iter()
        .zip(stats)
        .map(|(index, stats)| NdtCell { index, stats })
        .collect();
    Ok(NdtGrid {
        cell_size: partition.cell_size,
        origin: partition.origin,
        cells,
        point_assignment: partition.assignment,
    })
}

pub fn build_ndt_grid(cloud: &PointCloud, cell_size: f64, origin: Vec3) -> Result<NdtGrid> {
    let partition = partition_points(cloud, cell_size, origin)?;
    let stats = partition
        .members
        .iter()
        .map(|members| cell_stats_of(cloud, members))
        .collect();
    assemble_grid(partition, stats)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiScaleNdt {
    grids: Vec<NdtGrid>,
    scale_config: Vec<f64>,
    origin: Vec3,
}

impl MultiScaleNdt {
    pub fn grids(&self) -> &[NdtGrid] {
        &self.grids
    }

    pub fn grid(&self, r: usize) -> &NdtGrid {
        &self.grids[r]
    }

    pub fn finest(&self) -> &NdtGrid {
        self.grids.last().expect("at least one scale")
    }

    pub fn scale_count(&self) -> usize {
        self.grids.len()
    }

    pub fn scale_config(&self) -> &[f64] {
        &self.scale_config
    }

    pub fn origin(&self) -> Vec3 {
        self.origin
    }

    pub fn from_grids(grids: Vec<NdtGrid>, scale_config: Vec<f64>, origin: Vec3) -> Result<Self> {
        if grids.is_empty() || grids.len() != scale_config.len() {
            return Err(invalid("one grid per scale required"));
        }
        Ok(MultiScaleNdt { grids, scale_config, origin })
    }

    pub fn regularize_covariance(&mut self, epsilon: f64) {
        for g in &mut self.grids {
            g.regularize_covariance(epsilon);
        }
    }
}

pub fn validate_scales(scales: &[f64]) -> Result<()> {
    if scales.is_empty() {
        return Err(invalid("at least one scale required"));
    }
    if scales.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
        return Err(invalid("cell sizes must be positive and finite"));
    }
    if scales.windows(2).any(|w| w[1] >= w[0]) {
        return Err(invalid("cell sizes must be strictly decreasing (coarse to fine)"));
    }
    Ok(())
}

/// All scales are built from the raw cloud with a shared origin at the
/// bounding-box minimum, never from a coarser grid.
pub fn build_multiscale(cloud: &PointCloud, scale_config: &[f64]) -> Result<MultiScaleNdt> {
    validate_scales(scale_config)?;
    let (origin, _) = cloud.bounding_box();
    let grids = scale_config
        .iter()
        .map(|&size| build_ndt_grid(cloud, size, origin))
        .collect::<Result<Vec<_>>>()?;
    MultiScaleNdt::from_grids(grids, scale_config.to_vec(), origin)
}

/// Combines child statistics into the statistics of the pooled point set
/// (pairwise mean/scatter combination). Appearance is the n-weighted average
/// over children with valid appearance.
pub fn merge_cell_stats(children: &[CellStats]) -> Result<CellStats> {
    if children.is_empty() {
        return Err(invalid("merge needs at least one child"));
    }
    let mut n_total = 0usize;
    let mut mean = [0.0f64; 3];
    let mut scatter = [[0.0f64; 3]; 3]; // Σ (x−μ)(x−μ)ᵀ over pooled points
    let mut rgb = [0.0f64; 3];
    let mut rgb_n = 0usize;

    for child in children {
        if child.n == 0 {
            return Err(invalid("child cell with n = 0"));
        }
        let n_a = n_total as f64;
        let n_b = child.n as f64;
        let n_ab = n_a + n_b;
        let delta = [
            child.mean[0] - mean[0],
            child.mean[1] - mean[1],
            child.mean[2] - mean[2],
        ];
        // child scatter = (n_b − 1)·Σ_b
        let w = if child.n > 1 { (child.n - 1) as f64 } else { 0.0 };
        let cross = if n_total == 0 { 0.0 } else { n_a * n_b / n_ab };
        for a in 0..3 {
            for b in 0..3 {
                scatter[a][b] += w * child.covariance[a][b] + cross * delta[a] * delta[b];
            }
        }
        for a in 0..3 {
            mean[a] += delta[a] * (n_b / n_ab);
        }
        n_total += child.n;
        if child.rgb_valid {
            for a in 0..3 {
                rgb[a] += child.rgb[a] * n_b;
            }
            rgb_n += child.n;
        }
    }

    let mut covariance = [[0.0f64; 3]; 3];
    if n_total > 1 {
        let denom = (n_total - 1) as f64;
        for a in 0..3 {
            for b in 0..3 {
                covariance[a][b] = scatter[a][b] / denom;
            }
        }
    }
    let rgb_valid = rgb_n > 0;
    if rgb_valid {
        for c in &mut rgb {
            *c /= rgb_n as f64;
        }
    }
    Ok(CellStats {
        mean,
        covariance,
        n: n_total,
        rgb,
        rgb_valid,
    })
}

#[derive(Debug, Clone, Copy, Default)]
pub struct VisibilityOptions {
    /// Reject samples whose projected depth disagrees with the view's depth
    /// buffer by more than `depth_tolerance` (only for views carrying depth).
    pub depth_test: bool,
    pub depth_tolerance: f64,
}

/// Projects each cell mean into every view and averages the samples from
/// views where the cell is visible (positive depth, inside image bounds,
/// optional depth agreement). Returns one channel vector per cell plus a
/// visibility flag; invisible cells get zeros.
pub fn project_cell_features(
    grid: &NdtGrid,
    views: &[CameraView],
    channels: usize,
    options: VisibilityOptions,
) -> Result<(Vec<Vec<f64>>, Vec<bool>)> {
    if views.is_empty() {
        return Err(invalid("at least one view required"));
    }
    for view in views {
        if view.channels != channels {
            return Err(invalid("view channel count mismatch"));
        }
    }
    let mut features = Vec::with_capacity(grid.len());
    let mut valid = Vec::with_capacity(grid.len());
    for cell in grid.cells() {
        let mut acc = vec![0.0f64; channels];
        let mut hits = 0usize;
        for view in views {
            let Some((u, v, z)) = view.project(cell.stats.mean) else {
                continue;
            };
            let Some(sample) = view.sample_nearest(u, v) else {
                continue;
            };
            if options.depth_test {
                if let Some(d) = view.depth_at(u, v) {
                    if z > d + options.depth_tolerance {
                        continue;
                    }
                }
            }
            for (a, &s) in acc.iter_mut().zip(sample) {
                *a += s;
            }
            hits += 1;
        }
        if hits > 0 {
            for a in &mut acc {
                *a /= hits as f64;
            }
            valid.push(true);
        } else {
            acc.fill(0.0);
            valid.push(false);
        }
        features.push(acc);
    }
    Ok((features, valid))
}

/// Fills per-cell RGB by multi-view projection of the cell means.
/// Invisibility is not an error: unseen cells get rgb = 0, rgb_valid = false.
pub fn colorize_cells(grid: &NdtGrid, views: &[CameraView], options: VisibilityOptions) -> Result<NdtGrid> {
    let (features, valid) = project_cell_features(grid, views, 3, options)?;
    let mut out = grid.clone();
    for ((cell, rgb), ok) in out.cells.iter_mut().zip(features).zip(valid) {
        cell.stats.rgb = [rgb[0], rgb[1], rgb[2]];
        cell.stats.rgb_valid = ok;
    }
    Ok(out)
}

/// 15-dim cell descriptor: [mean (3); covariance row-major (9); rgb (3)].
pub fn cell_descriptor(stats: &CellStats) -> [f64; DESCRIPTOR_DIM] {
    let mut d = [0.0f64; DESCRIPTOR_DIM];
    d[..3].copy_from_slice(&stats.mean);
    for a in 0..3 {
        for b in 0..3 {
            d[3 + a * 3 + b] = stats.covariance[a][b];
        }
    }
    d[12..].copy_from_slice(&stats.rgb);
    d
}

/// One centroid point per occupied cell (canonical order), carrying the
/// averaged member color when the cloud has colors. Matches the occupied-cell
/// count of the grid built at the same size and bounding-box-minimum origin.
pub fn voxel_downsample(cloud: &PointCloud, cell_size: f64) -> Result<PointCloud> {
    let (origin, _) = cloud.bounding_box();
    let grid = build_ndt_grid(cloud, cell_size, origin)?;
    let positions = grid.cells().iter().map(|c| c.stats.mean).collect();
    let colors = if cloud.colors().is_some() {
        Some(grid.cells().iter().map(|c| c.stats.rgb).collect())
    } else {
        None
    };
    PointCloud::new(positions, colors)
}

/// Geometric region used to turn a user prompt into a cell mask.
#[derive(Debug, Clone, PartialEq)]
pub enum Region {
    Sphere { center: Vec3, radius: f64 },
    Aabb { min: Vec3, max: Vec3 },
    Cells(Vec<CellIndex>),
}

/// Binary mask over occupied cells in canonical order: 1 when the cell mean
/// lies inside the region (or the cell index is in the explicit set).
pub fn points_in_region(grid: &NdtGrid, region: &Region) -> Result<Vec<bool>> {
    match region {
        Region::Sphere { center, radius } => {
            if !(*radius > 0.0) {
                return Err(invalid("sphere radius must be positive"));
            }
            Ok(grid
                .cells()
                .iter()
                .map(|c| {
                    let m = c.stats.mean;
                    math::hypot3(m[0] - center[0], m[1] - center[1], m[2] - center[2]) <= *radius
                })
                .collect())
        }
        Region::Aabb { min, max } => {
            if (0..3).any(|a| min[a] > max[a]) {
                return Err(invalid("box min must not exceed max"));
            }
            Ok(grid
                .cells()
                .iter()
                .map(|c| (0..3).all(|a| c.stats.mean[a] >= min[a] && c.stats.mean[a] <= max[a]))
                .collect())
        }
        Region::Cells(set) => {
            if set.is_empty() {
                return Err(invalid("explicit cell set must not be empty"));
            }
            let mut mask = vec![false; grid.len()];
            for index in set {
                if let Some(row) = grid.row_of(*index) {
                    mask[row] = true;
                }
            }
            Ok(mask)
        }
    }
}
