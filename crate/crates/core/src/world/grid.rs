use serde::{Deserialize, Serialize};

use super::WorldError;
use crate::geometry::Vec3;

/// Integer voxel coordinates `(x, y, z)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct VoxelIndex(pub [usize; 3]);

impl VoxelIndex {
    pub const fn new(x: usize, y: usize, z: usize) -> Self {
        Self([x, y, z])
    }

    pub fn x(&self) -> usize {
        self.0[0]
    }

    pub fn y(&self) -> usize {
        self.0[1]
    }

    pub fn z(&self) -> usize {
        self.0[2]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Cell {
    Free,
    Occupied,
}

// Fractional voxel coordinates closer than this to an integer are snapped to it,
// so that e.g. 0.3 / 0.1 lands in voxel 3 rather than 2.
const SNAP_EPS: f64 = 1e-9;

/// Dense axis-aligned voxel grid over the world volume.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelGrid {
    origin: Vec3,
    resolution: f64,
    dims: [usize; 3],
    cells: Vec<Cell>,
}

impl VoxelGrid {
    /// Creates an all-free grid.
    pub fn new(origin: Vec3, resolution: f64, dims: [usize; 3]) -> Result<Self, WorldError> {
        if !(resolution > 0.0) || !resolution.is_finite() {
            return Err(WorldError::InvalidGeometry(format!(
                "resolution must be positive, got {resolution}"
            )));
        }
        if dims.contains(&0) {
            return Err(WorldError::InvalidGeometry(format!(
                "all dims must be >= 1, got {dims:?}"
            )));
        }
        let len = dims[0]
            .checked_mul(dims[1])
            .and_then(|v| v.checked_mul(dims[2]))
            .filter(|&v| v <= u32::MAX as usize)
            .ok_or_else(|| WorldError::InvalidGeometry(format!("grid too large: {dims:?}")))?;
        Ok(Self {
            origin,
            resolution,
            dims,
            cells: vec![Cell::Free; len],
        })
    }

    pub fn origin(&self) -> Vec3 {
        self.origin
    }

    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    /// Upper corner of the grid volume (exclusive).
    pub fn extent_max(&self) -> Vec3 {
        self.origin
            + Vec3::new(
                self.dims[0] as f64 * self.resolution,
                self.dims[1] as f64 * self.resolution,
                self.dims[2] as f64 * self.resolution,
            )
    }

    pub fn linear_index(&self, idx: VoxelIndex) -> usize {
        idx.0[0] + self.dims[0] * (idx.0[1] + self.dims[1] * idx.0[2])
    }

    pub fn index_of_linear(&self, linear: usize) -> VoxelIndex {
        let x = linear % self.dims[0];
        let rest = linear / self.dims[0];
        VoxelIndex::new(x, rest % self.dims[1], rest / self.dims[1])
    }

    pub fn contains_index(&self, idx: VoxelIndex) -> bool {
        (0..3).all(|a| idx.0[a] < self.dims[a])
    }

    fn axis_coordinate(&self, p: &Vec3, axis: usize) -> f64 {
        let t = (p[axis] - self.origin[axis]) / self.resolution;
        let r = t.round();
        if (t - r).abs() < SNAP_EPS {
            r
        } else {
            t.floor()
        }
    }

    /// Maps a world point to the voxel containing it.
    pub fn world_to_voxel(&self, p: &Vec3) -> Result<VoxelIndex, WorldError> {
        let mut out = [0usize; 3];
        for (axis, slot) in out.iter_mut().enumerate() {
            let c = self.axis_coordinate(p, axis);
            if !c.is_finite() || c < 0.0 || c >= self.dims[axis] as f64 {
                return Err(WorldError::OutOfBounds { point: [p.x, p.y, p.z] });
            }
            *slot = c as usize;
        }
        Ok(VoxelIndex(out))
    }

    pub fn in_bounds(&self, p: &Vec3) -> bool {
        self.world_to_voxel(p).is_ok()
    }

    pub fn voxel_to_center(&self, idx: VoxelIndex) -> Vec3 {
        self.origin
            + Vec3::new(
                (idx.0[0] as f64 + 0.5) * self.resolution,
                (idx.0[1] as f64 + 0.5) * self.resolution,
                (idx.0[2] as f64 + 0.5) * self.resolution,
            )
    }

    pub fn linear_center(&self, linear: usize) -> Vec3 {
        self.voxel_to_center(self.index_of_linear(linear))
    }

    pub fn cell(&self, idx: VoxelIndex) -> Cell {
        self.cells[self.linear_index(idx)]
    }

    pub fn cell_linear(&self, linear: usize) -> Cell {
        self.cells[linear]
    }

    pub fn is_free(&self, idx: VoxelIndex) -> bool {
        self.cell(idx) == Cell::Free
    }

    pub fn is_free_linear(&self, linear: usize) -> bool {
        self.cells[linear] == Cell::Free
    }

    pub fn set(&mut self, idx: VoxelIndex, cell: Cell) {
        let i = self.linear_index(idx);
        self.cells[i] = cell;
    }

    pub fn occupied_count(&self) -> usize {
        self.cells.iter().filter(|c| **c == Cell::Occupied).count()
    }

    pub fn occupied_linear(&self) -> impl Iterator<Item = usize> + '_ {
        self.cells
            .iter()
            .enumerate()
            .filter(|(_, c)| **c == Cell::Occupied)
            .map(|(i, _)| i)
    }

    /// Walks every voxel pierced by the segment `a -> b` (3-D DDA), calling
    /// `visit` until it returns `false`. Returns whether the walk completed.
    ///
    /// Where the segment passes within rounding distance of a voxel edge or
    /// corner, the neighbouring voxels on the tied axes are visited as well.
    pub fn traverse_segment<F>(&self, a: &Vec3, b: &Vec3, mut visit: F) -> Result<bool, WorldError>
    where
        F: FnMut(VoxelIndex) -> bool,
    {
        let start = self.world_to_voxel(a)?;
        let end = self.world_to_voxel(b)?;
        let d = b - a;

        let mut cur = [start.0[0] as i64, start.0[1] as i64, start.0[2] as i64];
        let mut step = [0i64; 3];
        let mut remaining = [0u64; 3];
        let mut t_max = [f64::INFINITY; 3];
        let mut t_delta = [f64::INFINITY; 3];
        for axis in 0..3 {
            let diff = end.0[axis] as i64 - start.0[axis] as i64;
            step[axis] = diff.signum();
            remaining[axis] = diff.unsigned_abs();
            if step[axis] != 0 && d[axis] != 0.0 {
                let boundary_index = if step[axis] > 0 { cur[axis] + 1 } else { cur[axis] };
                let boundary = self.origin[axis] + boundary_index as f64 * self.resolution;
                t_max[axis] = (boundary - a[axis]) / d[axis];
                t_delta[axis] = self.resolution / d[axis].abs();
            } else if step[axis] != 0 {
                // Snapping moved an endpoint across a boundary on a flat axis.
                t_max[axis] = 0.0;
                t_delta[axis] = 0.0;
            }
        }

        if !visit(start) {
            return Ok(false);
        }
        const TIE_EPS: f64 = 1e-9;
        while remaining.iter().any(|&r| r > 0) {
            let mut axis = usize::MAX;
            for candidate in 0..3 {
                if remaining[candidate] == 0 {
                    continue;
                }
                if axis == usize::MAX || t_max[candidate] < t_max[axis] {
                    axis = candidate;
                }
            }
            for other in 0..3 {
                if other == axis || remaining[other] == 0 {
                    continue;
                }
                if (t_max[other] - t_max[axis]).abs() <= TIE_EPS {
                    let mut side = cur;
                    side[other] += step[other];
                    let side = VoxelIndex::new(side[0] as usize, side[1] as usize, side[2] as usize);
                    if !visit(side) {
                        return Ok(false);
                    }
                }
            }
            cur[axis] += step[axis];
            remaining[axis] -= 1;
            t_max[axis] += t_delta[axis];
            let idx = VoxelIndex::new(cur[0] as usize, cur[1] as usize, cur[2] as usize);
            if !visit(idx) {
                return Ok(false);
            }
        }
        Ok(true)
    }

    /// True iff every voxel crossed by the segment `a -> b` is free.
    pub fn is_segment_free(&self, a: &Vec3, b: &Vec3) -> Result<bool, WorldError> {
        self.traverse_segment(a, b, |idx| self.is_free(idx))
    }

    /// Voxels crossed by the segment, in traversal order.
    pub fn segment_voxels(&self, a: &Vec3, b: &Vec3) -> Result<Vec<VoxelIndex>, WorldError> {
        let mut out = Vec::new();
        self.traverse_segment(a, b, |idx| {
            out.push(idx);
            true
        })?;
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid(dims: [usize; 3]) -> VoxelGrid {
        VoxelGrid::new(Vec3::zeros(), 0.1, dims).unwrap()
    }

    #[test]
    fn world_to_voxel_examples() {
        let g = grid([20, 20, 20]);
        assert_eq!(g.world_to_voxel(&Vec3::new(0.05, 0.05, 0.05)).unwrap(), VoxelIndex::new(0, 0, 0));
        assert_eq!(g.world_to_voxel(&Vec3::new(1.0, 0.5, 0.2)).unwrap(), VoxelIndex::new(10, 5, 2));
        assert!(matches!(
            g.world_to_voxel(&Vec3::new(-0.1, 0.0, 0.0)),
            Err(WorldError::OutOfBounds { .. })
        ));
    }

    #[test]
    fn upper_bound_is_exclusive() {
        let g = grid([10, 10, 10]);
        assert!(g.world_to_voxel(&Vec3::new(1.0, 0.5, 0.5)).is_err());
        assert!(g.world_to_voxel(&Vec3::new(0.999, 0.5, 0.5)).is_ok());
    }

    #[test]
    fn snapping_handles_decimal_boundaries() {
        let g = grid([10, 10, 10]);
        assert_eq!(g.world_to_voxel(&Vec3::new(0.3, 0.7, 0.6)).unwrap(), VoxelIndex::new(3, 7, 6));
    }

    #[test]
    fn rejects_bad_geometry() {
        assert!(VoxelGrid::new(Vec3::zeros(), 0.0, [1, 1, 1]).is_err());
        assert!(VoxelGrid::new(Vec3::zeros(), 0.1, [0, 1, 1]).is_err());
    }

    #[test]
    fn empty_grid_segments_are_free() {
        let g = grid([20, 20, 20]);
        assert!(g.is_segment_free(&Vec3::new(0.05, 0.05, 0.05), &Vec3::new(1.95, 1.3, 0.7)).unwrap());
    }

    #[test]
    fn occupied_voxel_between_endpoints_blocks() {
        let mut g = grid([20, 20, 20]);
        g.set(VoxelIndex::new(5, 2, 2), Cell::Occupied);
        let a = Vec3::new(0.25, 0.25, 0.25);
        let b = Vec3::new(0.85, 0.25, 0.25);
        assert!(!g.is_segment_free(&a, &b).unwrap());
        assert!(g.is_segment_free(&a, &Vec3::new(0.25, 0.85, 0.25)).unwrap());
    }

    #[test]
    fn degenerate_segment_inside_one_voxel() {
        let g = grid([5, 5, 5]);
        let a = Vec3::new(0.21, 0.22, 0.23);
        let b = Vec3::new(0.28, 0.27, 0.24);
        assert_eq!(g.segment_voxels(&a, &b).unwrap(), vec![VoxelIndex::new(2, 2, 2)]);
        assert!(g.is_segment_free(&a, &b).unwrap());
    }

    #[test]
    fn segment_out_of_bounds_errors() {
        let g = grid([5, 5, 5]);
        assert!(g.is_segment_free(&Vec3::new(0.1, 0.1, 0.1), &Vec3::new(0.9, 0.1, 0.1)).is_err());
    }

    #[test]
    fn linear_index_round_trip() {
        let g = grid([3, 4, 5]);
        for i in 0..g.len() {
            assert_eq!(g.linear_index(g.index_of_linear(i)), i);
        }
    }

    proptest! {
        #[test]
        fn center_round_trip(x in 0.0f64..1.2, y in 0.0f64..0.8, z in 0.0f64..0.6) {
            let g = VoxelGrid::new(Vec3::new(0.0, 0.0, 0.0), 0.1, [12, 8, 6]).unwrap();
            let p = Vec3::new(x, y, z);
            let idx = g.world_to_voxel(&p).unwrap();
            let c = g.voxel_to_center(idx);
            prop_assert_eq!(g.world_to_voxel(&c).unwrap(), idx);
            for axis in 0..3 {
                prop_assert!((c[axis] - p[axis]).abs() <= 0.05 + 1e-9);
            }
        }

        #[test]
        fn dda_covers_sampled_points(
            ax in 0.0f64..1.5, ay in 0.0f64..1.5, az in 0.0f64..1.0,
            bx in 0.0f64..1.5, by in 0.0f64..1.5, bz in 0.0f64..1.0,
        ) {
            let g = VoxelGrid::new(Vec3::new(0.0, 0.0, 0.0), 0.1, [15, 15, 10]).unwrap();
            let a = Vec3::new(ax, ay, az);
            let b = Vec3::new(bx, by, bz);
            let visited: std::collections::BTreeSet<_> = g.segment_voxels(&a, &b).unwrap().into_iter().collect();
            for k in 0..64 {
                let t = k as f64 / 63.0;
                let p = a + (b - a) * t;
                let idx = g.world_to_voxel(&p).unwrap();
                prop_assert!(visited.contains(&idx), "sample {k} in {idx:?} not visited");
            }
        }
    }
}
