//! Region-binned features around the ego position.

use serde::{Deserialize, Serialize};

use super::features::cell_class_histograms;
use crate::error::{arg_err, dim_err, Result};
use crate::numerics::Tensor;
use crate::occupancy::OccupancyGrid;

/// Chebyshev-distance bins around the ego. Bin `b` holds cells whose center
/// distance is below `edges[b]` and not in an earlier bin; the last bin also
/// absorbs anything beyond its edge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionBinning {
    pub edges: Vec<f64>,
    pub cell_size: f64,
}

impl Default for RegionBinning {
    fn default() -> Self {
        Self { edges: vec![8.0, 24.0, 40.0], cell_size: 3.2 }
    }
}

impl RegionBinning {
    pub fn new(edges: Vec<f64>, cell_size: f64) -> Result<Self> {
        if edges.is_empty() || edges.windows(2).any(|w| !(w[0] < w[1])) || !(edges[0] > 0.0) {
            return arg_err(format!("bin edges must be positive and strictly increasing: {edges:?}"));
        }
        if !(cell_size > 0.0) {
            return arg_err("cell size must be positive");
        }
        Ok(Self { edges, cell_size })
    }

    /// Default layout shrunk so the outer edge sits at `half_extent` meters.
    pub fn scaled_to(half_extent: f64) -> Result<Self> {
        let d = Self::default();
        let s = half_extent / d.edges[d.edges.len() - 1];
        Self::new(d.edges.iter().map(|e| e * s).collect(), d.cell_size * s)
    }

    pub fn n_bins(&self) -> usize {
        self.edges.len()
    }

    pub fn bin_of(&self, center: [f64; 2]) -> usize {
        let r = center[0].abs().max(center[1].abs());
        self.edges.iter().position(|&e| r < e).unwrap_or(self.edges.len() - 1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionFeatures {
    /// Per-bin means concatenated in bin order.
    pub vector: Vec<f64>,
    /// Non-empty cells per bin.
    pub counts: Vec<usize>,
    /// Bins with no non-empty cell (their slot is zero).
    pub empty: Vec<bool>,
}

/// Per-bin mean of the features of non-empty cells, centers relative to ego.
pub fn region_features(
    features: &Tensor,
    centers: &[[f64; 2]],
    nonempty: &[bool],
    binning: &RegionBinning,
) -> Result<RegionFeatures> {
    let n = features.rows();
    if centers.len() != n || nonempty.len() != n {
        return dim_err(format!("{n} cells, {} centers, {} flags", centers.len(), nonempty.len()));
    }
    let d = features.cols();
    let nb = binning.n_bins();
    let mut vector = vec![0.0; nb * d];
    let mut counts = vec![0usize; nb];
    for i in (0..n).filter(|&i| nonempty[i]) {
        let b = binning.bin_of(centers[i]);
        counts[b] += 1;
        for (acc, v) in vector[b * d..(b + 1) * d].iter_mut().zip(features.row(i)) {
            *acc += v;
        }
    }
    for b in 0..nb {
        if counts[b] > 0 {
            vector[b * d..(b + 1) * d].iter_mut().for_each(|v| *v /= counts[b] as f64);
        }
    }
    let empty = counts.iter().map(|&c| c == 0).collect();
    Ok(RegionFeatures { vector, counts, empty })
}

/// Region features of a grid from per-cell class histograms; the BEV cell
/// spans `round(cell_size / resolution)` columns.
pub fn grid_region_features(grid: &OccupancyGrid, binning: &RegionBinning) -> Result<RegionFeatures> {
    let cell = ((binning.cell_size / grid.resolution() as f64).round() as usize).max(1);
    let (hist, nonempty, centers) = cell_class_histograms(grid, cell)?;
    region_features(&hist, &centers, &nonempty, binning)
}
