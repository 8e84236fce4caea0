//! Voxel grids: binary vessel masks and scalar intensity images.
//!
//! Coordinates are `[x, y, z]` with `0 <= x < dims[0]` and so on. Dense
//! storage is x-fastest: `index = x + H * (y + W * z)`.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Voxel = [usize; 3];

/// Linear index of a voxel in an x-fastest grid.
#[inline]
pub fn linear_index(dims: [usize; 3], v: Voxel) -> usize {
    v[0] + dims[0] * (v[1] + dims[1] * v[2])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinaryVolume {
    dims: [usize; 3],
    spacing: [f64; 3],
    foreground: BTreeSet<Voxel>,
}

impl BinaryVolume {
    pub fn new(
        dims: [usize; 3],
        spacing: [f64; 3],
        voxels: impl IntoIterator<Item = Voxel>,
    ) -> Result<Self> {
        check_spacing(spacing)?;
        let mut foreground = BTreeSet::new();
        for v in voxels {
            if (0..3).any(|a| v[a] >= dims[a]) {
                return Err(Error::Input(format!(
                    "voxel {v:?} outside volume of dims {dims:?}"
                )));
            }
            foreground.insert(v);
        }
        Ok(Self {
            dims,
            spacing,
            foreground,
        })
    }

    pub fn empty(dims: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        Self::new(dims, spacing, std::iter::empty())
    }

    /// Builds a mask from an x-fastest occupancy grid.
    pub fn from_grid(dims: [usize; 3], spacing: [f64; 3], grid: &[bool]) -> Result<Self> {
        if grid.len() != dims.iter().product::<usize>() {
            return Err(Error::Shape(format!(
                "grid of {} cells does not match dims {dims:?}",
                grid.len()
            )));
        }
        let mut voxels = Vec::new();
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    if grid[linear_index(dims, [x, y, z])] {
                        voxels.push([x, y, z]);
                    }
                }
            }
        }
        Self::new(dims, spacing, voxels)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn len(&self) -> usize {
        self.foreground.len()
    }

    pub fn is_empty(&self) -> bool {
        self.foreground.is_empty()
    }

    pub fn contains(&self, v: Voxel) -> bool {
        self.foreground.contains(&v)
    }

    /// Foreground voxels in lexicographic `(x, y, z)` order.
    pub fn voxels(&self) -> impl Iterator<Item = Voxel> + '_ {
        self.foreground.iter().copied()
    }

    pub fn is_subset(&self, other: &BinaryVolume) -> bool {
        self.foreground.is_subset(&other.foreground)
    }

    pub fn to_grid(&self) -> Vec<bool> {
        let mut grid = vec![false; self.dims.iter().product()];
        for &v in &self.foreground {
            grid[linear_index(self.dims, v)] = true;
        }
        grid
    }

    pub fn world_position(&self, v: Voxel) -> [f64; 3] {
        [
            v[0] as f64 * self.spacing[0],
            v[1] as f64 * self.spacing[1],
            v[2] as f64 * self.spacing[2],
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntensityVolume {
    dims: [usize; 3],
    spacing: [f64; 3],
    values: Vec<f64>,
}

impl IntensityVolume {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], values: Vec<f64>) -> Result<Self> {
        check_spacing(spacing)?;
        if values.len() != dims.iter().product::<usize>() {
            return Err(Error::Shape(format!(
                "{} intensity values for dims {dims:?}",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Input(format!("non-finite intensity at index {i}")));
        }
        Ok(Self {
            dims,
            spacing,
            values,
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, v: Voxel) -> f64 {
        self.values[linear_index(self.dims, v)]
    }

    /// Zero-pads every axis up to the next multiple of `multiple`. Returns the
    /// padded volume and the number of voxels added per axis.
    pub fn pad_to_multiple(&self, multiple: usize) -> (IntensityVolume, [usize; 3]) {
        let new_dims = self.dims.map(|d| d.div_ceil(multiple) * multiple);
        let pad = [
            new_dims[0] - self.dims[0],
            new_dims[1] - self.dims[1],
            new_dims[2] - self.dims[2],
        ];
        if pad == [0, 0, 0] {
            return (self.clone(), pad);
        }
        let mut values = vec![0.0; new_dims.iter().product()];
        for z in 0..self.dims[2] {
            for y in 0..self.dims[1] {
                for x in 0..self.dims[0] {
                    values[linear_index(new_dims, [x, y, z])] = self.get([x, y, z]);
                }
            }
        }
        let padded = IntensityVolume {
            dims: new_dims,
            spacing: self.spacing,
            values,
        };
        (padded, pad)
    }
}

fn check_spacing(spacing: [f64; 3]) -> Result<()> {
    if spacing.iter().any(|s| !s.is_finite() || *s <= 0.0) {
        return Err(Error::Input(format!(
            "voxel spacing must be positive, got {spacing:?}"
        )));
    }
    Ok(())
}
