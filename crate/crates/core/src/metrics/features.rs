//! Small hand-built feature extractor for occupancy grids.

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, dim_err, Result};
use crate::numerics::Tensor;
use crate::occupancy::OccupancyGrid;

/// `n` samples by `c` features plus a tag naming the extractor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSet {
    pub data: Tensor,
    pub tag: String,
}

impl FeatureSet {
    pub fn new(data: Tensor, tag: impl Into<String>) -> Result<Self> {
        if data.ndim() != 2 {
            return dim_err(format!("feature set must be a matrix, got {:?}", data.shape()));
        }
        data.ensure_finite("feature set")?;
        Ok(Self { data, tag: tag.into() })
    }

    pub fn from_rows(rows: &[Vec<f64>], tag: impl Into<String>) -> Result<Self> {
        Self::new(Tensor::from_rows(rows)?, tag)
    }

    pub fn n(&self) -> usize {
        self.data.rows()
    }

    pub fn dim(&self) -> usize {
        self.data.cols()
    }

    /// Column means and unbiased covariance.
    pub fn moments(&self) -> Result<(Vec<f64>, Tensor)> {
        let (n, c) = (self.n(), self.dim());
        if n < 2 {
            return arg_err("moments need at least two samples");
        }
        let mut mu = vec![0.0; c];
        for i in 0..n {
            for (m, v) in mu.iter_mut().zip(self.data.row(i)) {
                *m += v / n as f64;
            }
        }
        let mut cov = Tensor::zeros(&[c, c]);
        for i in 0..n {
            let r = self.data.row(i);
            for a in 0..c {
                let da = r[a] - mu[a];
                for b in a..c {
                    cov.data_mut()[a * c + b] += da * (r[b] - mu[b]);
                }
            }
        }
        for a in 0..c {
            for b in a..c {
                let v = cov.get2(a, b) / (n - 1) as f64;
                cov.data_mut()[a * c + b] = v;
                cov.data_mut()[b * c + a] = v;
            }
        }
        Ok((mu, cov))
    }
}

/// Pooled BEV occupancy over `pool x pool` column blocks followed by the
/// frequency of each non-empty class.
pub fn grid_features(grid: &OccupancyGrid, pool: usize) -> Result<Vec<f64>> {
    let [h, w, d] = grid.dims();
    if pool == 0 || h % pool != 0 || w % pool != 0 {
        return arg_err(format!("pool {pool} does not divide {h}x{w}"));
    }
    let (ph, pw) = (h / pool, w / pool);
    let n_cls = grid.n_classes() as usize;
    let mut bev = vec![0.0; ph * pw];
    let mut freq = vec![0.0; n_cls.saturating_sub(1)];
    for (x, y, _, c) in grid.occupied() {
        bev[(x / pool) * pw + y / pool] += 1.0;
        freq[c as usize - 1] += 1.0;
    }
    let block = (pool * pool * d) as f64;
    bev.iter_mut().for_each(|v| *v /= block);
    let total = grid.len() as f64;
    freq.iter_mut().for_each(|v| *v /= total);
    bev.extend(freq);
    Ok(bev)
}

/// Per BEV cell of `cell x cell` columns: class frequencies over its voxels
/// (one column per non-empty class), whether any voxel is occupied, and the
/// cell center in world coordinates.
pub fn cell_class_histograms(
    grid: &OccupancyGrid,
    cell: usize,
) -> Result<(Tensor, Vec<bool>, Vec<[f64; 2]>)> {
    let [h, w, d] = grid.dims();
    if cell == 0 || h % cell != 0 || w % cell != 0 {
        return arg_err(format!("cell {cell} does not divide {h}x{w}"));
    }
    let (ch, cw) = (h / cell, w / cell);
    let n_feat = (grid.n_classes() as usize).saturating_sub(1);
    let mut hist = Tensor::zeros(&[ch * cw, n_feat]);
    let mut nonempty = vec![false; ch * cw];
    let norm = (cell * cell * d) as f64;
    for (x, y, _, c) in grid.occupied() {
        let idx = (x / cell) * cw + y / cell;
        hist.row_mut(idx)[c as usize - 1] += 1.0 / norm;
        nonempty[idx] = true;
    }
    let res = grid.resolution() as f64;
    let o = grid.origin();
    let centers = (0..ch * cw)
        .map(|i| {
            let (cx, cy) = (i / cw, i % cw);
            [
                o[0] as f64 + (cx * cell) as f64 * res + 0.5 * (cell as f64) * res,
                o[1] as f64 + (cy * cell) as f64 * res + 0.5 * (cell as f64) * res,
            ]
        })
        .collect();
    Ok((hist, nonempty, centers))
}
