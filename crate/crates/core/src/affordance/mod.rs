//! Both agents' affordance maps.
//!
//! The robot's map is a capability map precomputed offline from its arm
//! kinematics over a lattice of base poses. The human's map starts empty and
//! grows from observed reach ellipsoids and from places the human interacted with.

mod capability;
mod format;
mod human;
mod sampling;

use thiserror::Error;

pub use capability::{
    base_lattice, precompute_capability_map, precompute_for_scenario, CapabilityConfig, CapabilityEntry, CapabilityMap,
    CapabilityQuery, ReachTemplate,
};
pub use format::FormatError;
pub use human::{HumanAffordanceGrid, ReachEllipsoid};
pub use sampling::{halton, joint_samples};

use crate::geometry::Vec3;
use crate::world::{VoxelGrid, WorldError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AffordanceError {
    #[error("base pose lattice is empty")]
    EmptyLattice,
    #[error(transparent)]
    World(#[from] WorldError),
    #[error("map geometry does not match the grid")]
    GeometryMismatch,
}

/// Voxel-membership view shared by both agents' maps.
pub trait AffordanceMap {
    fn contains_linear(&self, linear: usize) -> bool;

    fn contains(&self, grid: &VoxelGrid, p: &Vec3) -> Result<bool, WorldError> {
        let idx = grid.world_to_voxel(p)?;
        Ok(self.contains_linear(grid.linear_index(idx)))
    }
}
