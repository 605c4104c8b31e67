use bitvec::vec::BitVec;
use nalgebra::{Rotation3, Vector3};

use super::AffordanceMap;
use crate::geometry::Vec3;
use crate::world::{VoxelGrid, VoxelIndex};

/// Reach volume of the human's arms, centered on the chest.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReachEllipsoid {
    pub center: Vec3,
    /// Semi-axes along the rotated (forward, lateral, vertical) axes, meters.
    pub semi_axes: Vec3,
    pub rotation: Rotation3<f64>,
}

impl ReachEllipsoid {
    /// Ellipsoid whose forward axis follows the torso heading.
    pub fn for_torso(chest: Vec3, heading: f64, semi_axes: Vec3) -> Self {
        Self {
            center: chest,
            semi_axes,
            rotation: Rotation3::from_axis_angle(&Vector3::z_axis(), heading),
        }
    }

    /// Boundary-inclusive membership test.
    pub fn contains_point(&self, p: &Vec3) -> bool {
        self.normalized_radius_sq(p) <= 1.0
    }

    /// `(x - c)^T R diag(1/a^2) R^T (x - c)`.
    pub fn normalized_radius_sq(&self, p: &Vec3) -> f64 {
        let d = self.rotation.inverse() * (p - self.center);
        (0..3).map(|i| (d[i] / self.semi_axes[i]).powi(2)).sum()
    }

    /// Half extents of the axis-aligned bounding box.
    pub fn half_extents(&self) -> Vec3 {
        let r = self.rotation.matrix();
        Vec3::from_fn(|i, _| {
            (0..3)
                .map(|j| (r[(i, j)] * self.semi_axes[j]).powi(2))
                .sum::<f64>()
                .sqrt()
        })
    }
}

/// The human's affordable voxels. Starts empty and only grows.
#[derive(Clone, Debug, PartialEq)]
pub struct HumanAffordanceGrid {
    bits: BitVec,
    count: usize,
    history: Vec<(f64, Vec3)>,
    last_ellipsoid: Option<ReachEllipsoid>,
}

impl HumanAffordanceGrid {
    pub fn new(grid: &VoxelGrid) -> Self {
        Self {
            bits: BitVec::repeat(false, grid.len()),
            count: 0,
            history: Vec::new(),
            last_ellipsoid: None,
        }
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    /// Chest positions at which updates were applied.
    pub fn history(&self) -> &[(f64, Vec3)] {
        &self.history
    }

    pub fn iter_linear(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits.iter_ones()
    }

    pub fn bits(&self) -> &BitVec {
        &self.bits
    }

    fn insert(&mut self, linear: usize, added: &mut Vec<u32>) {
        if !self.bits[linear] {
            self.bits.set(linear, true);
            self.count += 1;
            added.push(linear as u32);
        }
    }

    /// Adds every free voxel whose center lies inside the ellipsoid.
    /// Returns the newly added voxels in ascending linear order.
    pub fn update(&mut self, ellipsoid: &ReachEllipsoid, grid: &VoxelGrid, time: f64) -> Vec<u32> {
        let mut added = Vec::new();
        if self.last_ellipsoid.as_ref() == Some(ellipsoid) {
            return added;
        }
        self.last_ellipsoid = Some(*ellipsoid);
        self.history.push((time, ellipsoid.center));
        let Some((lo, hi)) = voxel_range(grid, &ellipsoid.center, &ellipsoid.half_extents()) else {
            return added;
        };
        for z in lo[2]..=hi[2] {
            for y in lo[1]..=hi[1] {
                for x in lo[0]..=hi[0] {
                    let idx = VoxelIndex::new(x, y, z);
                    if !grid.is_free(idx) {
                        continue;
                    }
                    if ellipsoid.contains_point(&grid.voxel_to_center(idx)) {
                        self.insert(grid.linear_index(idx), &mut added);
                    }
                }
            }
        }
        added.sort_unstable();
        added
    }

    /// Adds the free voxels with centers within `radius` of an interaction
    /// point, always including the voxel containing it when free.
    pub fn record_interaction(&mut self, p: &Vec3, radius: f64, grid: &VoxelGrid) -> Vec<u32> {
        let mut added = Vec::new();
        if let Ok(own) = grid.world_to_voxel(p) {
            if grid.is_free(own) {
                self.insert(grid.linear_index(own), &mut added);
            }
        }
        let r = radius.max(0.0);
        if let Some((lo, hi)) = voxel_range(grid, p, &Vec3::repeat(r)) {
            for z in lo[2]..=hi[2] {
                for y in lo[1]..=hi[1] {
                    for x in lo[0]..=hi[0] {
                        let idx = VoxelIndex::new(x, y, z);
                        if grid.is_free(idx) && (grid.voxel_to_center(idx) - p).norm() <= r {
                            self.insert(grid.linear_index(idx), &mut added);
                        }
                    }
                }
            }
        }
        added.sort_unstable();
        added
    }

    /// Marks voxels by linear index, e.g. when replaying affordance updates.
    pub fn extend_linear(&mut self, voxels: &[u32]) {
        let mut sink = Vec::new();
        for &v in voxels {
            self.insert(v as usize, &mut sink);
        }
    }

    pub fn is_subset_of(&self, other: &HumanAffordanceGrid) -> bool {
        self.bits.iter_ones().all(|i| other.bits[i])
    }
}

impl AffordanceMap for HumanAffordanceGrid {
    fn contains_linear(&self, linear: usize) -> bool {
        self.bits[linear]
    }
}

/// Inclusive voxel index box covering `center +- half`, clipped to the grid.
fn voxel_range(grid: &VoxelGrid, center: &Vec3, half: &Vec3) -> Option<([usize; 3], [usize; 3])> {
    let mut lo = [0usize; 3];
    let mut hi = [0usize; 3];
    for a in 0..3 {
        let res = grid.resolution();
        let o = grid.origin()[a];
        let n = grid.dims()[a] as f64;
        let l = (((center[a] - half[a]) - o) / res).floor().max(0.0);
        let h = (((center[a] + half[a]) - o) / res).floor().min(n - 1.0);
        if h < l || h < 0.0 || l > n - 1.0 {
            return None;
        }
        lo[a] = l as usize;
        hi[a] = h as usize;
    }
    Some((lo, hi))
}
