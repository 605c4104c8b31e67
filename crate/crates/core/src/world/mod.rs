//! Voxelized environment, task objects and bins.

mod grid;
pub mod scenario;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use grid::{Cell, VoxelGrid, VoxelIndex};
pub use scenario::{load_scenario, parse_scenario, Scenario, ScenarioError};

use crate::geometry::Vec3;
use crate::ids::{AgentId, BinId, ObjectId};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WorldError {
    #[error("point {point:?} is outside the grid")]
    OutOfBounds { point: [f64; 3] },
    #[error("invalid grid geometry: {0}")]
    InvalidGeometry(String),
    #[error("unknown object {0}")]
    UnknownObject(ObjectId),
    #[error("object {object} cannot go from {from:?} to {to:?}")]
    InvalidTransition {
        object: ObjectId,
        from: ObjectState,
        to: ObjectState,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectCategory {
    Food,
    Kitchen,
    HouseholdTool,
}

impl ObjectCategory {
    pub const ALL: [ObjectCategory; 3] = [
        ObjectCategory::Food,
        ObjectCategory::Kitchen,
        ObjectCategory::HouseholdTool,
    ];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectState {
    Free,
    HeldBy(AgentId),
    Binned,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub id: ObjectId,
    pub category: ObjectCategory,
    pub position: Vec3,
    pub state: ObjectState,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bin {
    pub id: BinId,
    pub accepts: ObjectCategory,
    pub position: Vec3,
    pub radius: f64,
}

impl Bin {
    /// Deposit rule: matching category and within the deposit disk.
    pub fn accepts_at(&self, category: ObjectCategory, p: &Vec3) -> bool {
        category == self.accepts && (p - self.position).norm() <= self.radius
    }
}

/// Static occupancy plus the mutable object set.
#[derive(Clone, Debug, PartialEq)]
pub struct World {
    pub grid: VoxelGrid,
    objects: Vec<SceneObject>,
    pub bins: Vec<Bin>,
}

impl World {
    /// Objects are kept sorted by id.
    pub fn new(grid: VoxelGrid, mut objects: Vec<SceneObject>, bins: Vec<Bin>) -> Self {
        objects.sort_by_key(|o| o.id);
        Self { grid, objects, bins }
    }

    pub fn objects(&self) -> &[SceneObject] {
        &self.objects
    }

    pub fn object(&self, id: ObjectId) -> Option<&SceneObject> {
        self.objects
            .binary_search_by_key(&id, |o| o.id)
            .ok()
            .map(|i| &self.objects[i])
    }

    fn object_mut(&mut self, id: ObjectId) -> Result<&mut SceneObject, WorldError> {
        match self.objects.binary_search_by_key(&id, |o| o.id) {
            Ok(i) => Ok(&mut self.objects[i]),
            Err(_) => Err(WorldError::UnknownObject(id)),
        }
    }

    pub fn bin_for(&self, category: ObjectCategory) -> Option<&Bin> {
        self.bins.iter().find(|b| b.accepts == category)
    }

    pub fn all_binned(&self) -> bool {
        self.objects.iter().all(|o| o.state == ObjectState::Binned)
    }

    pub fn binned_count(&self) -> usize {
        self.objects.iter().filter(|o| o.state == ObjectState::Binned).count()
    }

    /// Free -> HeldBy(agent).
    pub fn pick(&mut self, id: ObjectId, agent: AgentId) -> Result<(), WorldError> {
        let obj = self.object_mut(id)?;
        let to = ObjectState::HeldBy(agent);
        if obj.state != ObjectState::Free {
            return Err(WorldError::InvalidTransition { object: id, from: obj.state, to });
        }
        obj.state = to;
        Ok(())
    }

    /// Moves a held object along with its carrier.
    pub fn carry(&mut self, id: ObjectId, agent: AgentId, p: Vec3) -> Result<(), WorldError> {
        let obj = self.object_mut(id)?;
        if obj.state != ObjectState::HeldBy(agent) {
            return Err(WorldError::InvalidTransition {
                object: id,
                from: obj.state,
                to: ObjectState::HeldBy(agent),
            });
        }
        obj.position = p;
        Ok(())
    }

    /// HeldBy(agent) -> Free at `p`, or -> Binned when `p` satisfies the
    /// deposit rule of the bin for the object's category. Returns the new state.
    pub fn release(&mut self, id: ObjectId, agent: AgentId, p: Vec3) -> Result<ObjectState, WorldError> {
        let binned = {
            let obj = self.object(id).ok_or(WorldError::UnknownObject(id))?;
            self.bin_for(obj.category)
                .map(|b| b.accepts_at(obj.category, &p))
                .unwrap_or(false)
        };
        let obj = self.object_mut(id)?;
        if obj.state != ObjectState::HeldBy(agent) {
            let to = if binned { ObjectState::Binned } else { ObjectState::Free };
            return Err(WorldError::InvalidTransition { object: id, from: obj.state, to });
        }
        obj.position = p;
        obj.state = if binned { ObjectState::Binned } else { ObjectState::Free };
        Ok(obj.state)
    }
}
