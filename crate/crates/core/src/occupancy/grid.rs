use crate::error::{arg_err, dim_err, Result};

/// Dense voxel grid of class ids; `0` is empty. Storage is x-major:
/// `index = (x * W + y) * D + z`.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyGrid {
    dims: [usize; 3],
    resolution: f32,
    origin: [f32; 3],
    n_classes: u32,
    classes: Vec<u8>,
}

impl OccupancyGrid {
    pub fn new(
        dims: [usize; 3],
        resolution: f32,
        origin: [f32; 3],
        n_classes: u32,
        classes: Vec<u8>,
    ) -> Result<Self> {
        if !(resolution > 0.0) || !resolution.is_finite() {
            return arg_err(format!("resolution must be positive, got {resolution}"));
        }
        if !(2..=256).contains(&n_classes) {
            return arg_err(format!("class count {n_classes} outside [2, 256]"));
        }
        let n = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| crate::Error::Dimension("grid dims overflow".into()))?;
        if classes.len() != n {
            return dim_err(format!("{} class ids for dims {:?}", classes.len(), dims));
        }
        if let Some(bad) = classes.iter().find(|&&c| u32::from(c) >= n_classes) {
            return arg_err(format!("class id {bad} >= class count {n_classes}"));
        }
        Ok(Self {
            dims,
            resolution,
            origin,
            n_classes,
            classes,
        })
    }

    pub fn empty(dims: [usize; 3], resolution: f32, origin: [f32; 3], n_classes: u32) -> Result<Self> {
        let n = dims.iter().product();
        Self::new(dims, resolution, origin, n_classes, vec![0; n])
    }

    /// Same geometry, zeroed contents.
    pub fn blank_like(&self) -> Self {
        Self {
            classes: vec![0; self.classes.len()],
            ..self.clone()
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn resolution(&self) -> f32 {
        self.resolution
    }

    pub fn origin(&self) -> [f32; 3] {
        self.origin
    }

    pub fn n_classes(&self) -> u32 {
        self.n_classes
    }

    pub fn classes(&self) -> &[u8] {
        &self.classes
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (x * self.dims[1] + y) * self.dims[2] + z
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> u8 {
        self.classes[self.index(x, y, z)]
    }

    /// Panics on class ids outside the declared range.
    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, class: u8) {
        assert!(u32::from(class) < self.n_classes, "class id out of range");
        let i = self.index(x, y, z);
        self.classes[i] = class;
    }

    pub fn occupied_count(&self) -> usize {
        self.classes.iter().filter(|&&c| c != 0).count()
    }

    /// `(x, y, z, class)` of every non-empty voxel, in storage order.
    pub fn occupied(&self) -> impl Iterator<Item = (usize, usize, usize, u8)> + '_ {
        let [_, w, d] = self.dims;
        self.classes
            .iter()
            .enumerate()
            .filter(|(_, &c)| c != 0)
            .map(move |(i, &c)| (i / (w * d), (i / d) % w, i % d, c))
    }

    /// Metric center of a voxel.
    pub fn voxel_center(&self, x: usize, y: usize, z: usize) -> [f64; 3] {
        let r = f64::from(self.resolution);
        [
            f64::from(self.origin[0]) + (x as f64 + 0.5) * r,
            f64::from(self.origin[1]) + (y as f64 + 0.5) * r,
            f64::from(self.origin[2]) + (z as f64 + 0.5) * r,
        ]
    }

    /// Voxel containing a metric point, if inside the grid.
    pub fn voxel_of(&self, p: [f64; 3]) -> Option<[usize; 3]> {
        let r = f64::from(self.resolution);
        let mut out = [0usize; 3];
        for a in 0..3 {
            let v = ((p[a] - f64::from(self.origin[a])) / r).floor();
            if !(v >= 0.0 && v < self.dims[a] as f64) {
                return None;
            }
            out[a] = v as usize;
        }
        Some(out)
    }

    /// Binary occupancy with every non-empty class mapped to `1`.
    pub fn erase_labels(&self) -> Self {
        Self {
            n_classes: 2,
            classes: self.classes.iter().map(|&c| u8::from(c != 0)).collect(),
            ..self.clone()
        }
    }

    /// Pools `factor^3` blocks into one voxel holding the most frequent
    /// non-empty class (lowest id on ties), or empty if the block is empty.
    pub fn downsample(&self, factor: usize) -> Result<Self> {
        if factor == 0 || self.dims.iter().any(|d| d % factor != 0) {
            return arg_err(format!("dims {:?} not divisible by {factor}", self.dims));
        }
        let nd = [self.dims[0] / factor, self.dims[1] / factor, self.dims[2] / factor];
        let mut out = Self::empty(
            nd,
            self.resolution * factor as f32,
            self.origin,
            self.n_classes,
        )?;
        let mut counts = vec![0usize; self.n_classes as usize];
        for x in 0..nd[0] {
            for y in 0..nd[1] {
                for z in 0..nd[2] {
                    counts.iter_mut().for_each(|c| *c = 0);
                    for dx in 0..factor {
                        for dy in 0..factor {
                            for dz in 0..factor {
                                let c = self.get(x * factor + dx, y * factor + dy, z * factor + dz);
                                counts[c as usize] += 1;
                            }
                        }
                    }
                    let mut best = 0u8;
                    for c in 1..counts.len() {
                        if counts[c] > 0 && (best == 0 || counts[c] > counts[best as usize]) {
                            best = c as u8;
                        }
                    }
                    out.set(x, y, z, best);
                }
            }
        }
        Ok(out)
    }
}

/// Binarises metric points into a grid. Returns the grid and the number of
/// points that fell outside it.
pub fn voxelize_points(
    points: &[[f64; 3]],
    dims: [usize; 3],
    resolution: f32,
    origin: [f32; 3],
) -> Result<(OccupancyGrid, usize)> {
    let mut grid = OccupancyGrid::empty(dims, resolution, origin, 2)?;
    let mut dropped = 0;
    for &p in points {
        match grid.voxel_of(p) {
            Some([x, y, z]) => grid.set(x, y, z, 1),
            None => dropped += 1,
        }
    }
    Ok((grid, dropped))
}
