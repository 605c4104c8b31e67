//! Scenario files: JSON documents describing the grid, objects, bins,
//! initial agent states and optional sensor and capability settings.
//!
//! ```json
//! {
//!   "name": "minimal",
//!   "grid": { "origin": [0, 0, 0], "resolution": 0.1, "dims": [60, 60, 24],
//!             "occupied": [[10, 10, 0]],
//!             "occupied_boxes": [{ "min": [2.0, 0.0, 0.0], "max": [2.6, 1.0, 0.7] }] },
//!   "objects": [{ "id": 1, "category": "food", "pos": [1.0, 1.0, 0.05] }],
//!   "bins": [{ "id": 0, "accepts": "food", "pos": [5.0, 1.0, 0.75], "radius": 0.25 }, ...],
//!   "agents": { "human": { "chest_pos": [4.0, 3.0, 1.3], "heading": 3.14 },
//!               "robot": { "base_pose": [1.0, 1.0, 0.0] } },
//!   "sensors": { ... },
//!   "capability": { "lattice_spacing": 0.2, "headings": 8, ... }
//! }
//! ```
//!
//! `occupied_boxes` marks every voxel whose center lies inside the closed box.
//! `robot.arm` overrides the default arm with `{links, limits, mount}`.

use std::collections::BTreeSet;
use std::path::Path;

use nalgebra::Isometry3;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{Bin, Cell, ObjectCategory, ObjectState, SceneObject, VoxelGrid, VoxelIndex, World};
use crate::affordance::CapabilityConfig;
use crate::geometry::{Pose2, Vec3};
use crate::ids::{BinId, ObjectId};
use crate::kinematics::{KinematicChain, Link};
use crate::perception::SensorsConfig;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read scenario: {0}")]
    Io(#[from] std::io::Error),
    #[error("scenario schema error: {0}")]
    Schema(String),
    #[error("invalid scenario: {0}")]
    Validation(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    #[serde(default)]
    pub name: Option<String>,
    pub grid: GridSpec,
    pub objects: Vec<ObjectSpec>,
    pub bins: Vec<BinSpec>,
    pub agents: AgentsSpec,
    #[serde(default)]
    pub sensors: SensorsConfig,
    #[serde(default)]
    pub capability: CapabilityConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub origin: [f64; 3],
    pub resolution: f64,
    pub dims: [usize; 3],
    #[serde(default)]
    pub occupied: Vec<[usize; 3]>,
    #[serde(default)]
    pub occupied_boxes: Vec<BoxSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxSpec {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectSpec {
    pub id: u32,
    pub category: ObjectCategory,
    pub pos: [f64; 3],
}

fn default_bin_radius() -> f64 {
    0.25
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BinSpec {
    pub id: u32,
    pub accepts: ObjectCategory,
    pub pos: [f64; 3],
    #[serde(default = "default_bin_radius")]
    pub radius: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentsSpec {
    pub human: HumanSpec,
    pub robot: RobotSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HumanSpec {
    pub chest_pos: [f64; 3],
    #[serde(default)]
    pub heading: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobotSpec {
    pub base_pose: Pose2,
    #[serde(default)]
    pub arm: Option<ArmSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmSpec {
    pub links: Vec<Link>,
    pub limits: Vec<[f64; 2]>,
    /// Shoulder position in the base frame, meters.
    #[serde(default)]
    pub mount: [f64; 3],
}

/// A validated scenario.
#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub world: World,
    pub human_chest: Vec3,
    pub human_heading: f64,
    pub robot_pose: Pose2,
    pub arm: KinematicChain,
    pub sensors: SensorsConfig,
    pub capability: CapabilityConfig,
    /// sha256 of the source text, hex.
    pub digest: String,
}

pub fn load_scenario(path: &Path) -> Result<Scenario, ScenarioError> {
    let text = std::fs::read_to_string(path)?;
    let mut s = parse_scenario(&text)?;
    if s.name.is_empty() {
        s.name = path
            .file_stem()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
    }
    Ok(s)
}

pub fn parse_scenario(text: &str) -> Result<Scenario, ScenarioError> {
    let file: ScenarioFile = serde_json::from_str(text).map_err(|e| ScenarioError::Schema(e.to_string()))?;
    let mut s = build(file)?;
    s.digest = hex::encode(Sha256::digest(text.as_bytes()));
    Ok(s)
}

fn invalid(msg: impl Into<String>) -> ScenarioError {
    ScenarioError::Validation(msg.into())
}

fn build(file: ScenarioFile) -> Result<Scenario, ScenarioError> {
    let g = &file.grid;
    let mut grid = VoxelGrid::new(Vec3::from(g.origin), g.resolution, g.dims).map_err(|e| invalid(e.to_string()))?;
    for &[x, y, z] in &g.occupied {
        let idx = VoxelIndex::new(x, y, z);
        if !grid.contains_index(idx) {
            return Err(invalid(format!("occupied voxel {:?} outside dims {:?}", [x, y, z], g.dims)));
        }
        grid.set(idx, Cell::Occupied);
    }
    for b in &g.occupied_boxes {
        let (lo, hi) = (Vec3::from(b.min), Vec3::from(b.max));
        for lin in 0..grid.len() {
            let c = grid.linear_center(lin);
            if (0..3).all(|a| c[a] >= lo[a] && c[a] <= hi[a]) {
                grid.set(grid.index_of_linear(lin), Cell::Occupied);
            }
        }
    }

    let mut ids = BTreeSet::new();
    let mut objects = Vec::with_capacity(file.objects.len());
    for o in &file.objects {
        if !ids.insert(o.id) {
            return Err(invalid(format!("duplicate object id {}", o.id)));
        }
        let p = Vec3::from(o.pos);
        let idx = grid
            .world_to_voxel(&p)
            .map_err(|_| invalid(format!("object {} at {:?} is outside the grid", o.id, o.pos)))?;
        if !grid.is_free(idx) {
            return Err(invalid(format!("object {} lies inside an occupied voxel", o.id)));
        }
        objects.push(SceneObject { id: ObjectId(o.id), category: o.category, position: p, state: ObjectState::Free });
    }

    let mut bin_ids = BTreeSet::new();
    let mut bins = Vec::with_capacity(file.bins.len());
    for b in &file.bins {
        if !bin_ids.insert(b.id) {
            return Err(invalid(format!("duplicate bin id {}", b.id)));
        }
        if bins.iter().any(|x: &Bin| x.accepts == b.accepts) {
            return Err(invalid(format!("more than one bin accepts {:?}", b.accepts)));
        }
        if !(b.radius > 0.0) {
            return Err(invalid(format!("bin {} radius must be > 0", b.id)));
        }
        let p = Vec3::from(b.pos);
        if !grid.in_bounds(&p) {
            return Err(invalid(format!("bin {} is outside the grid", b.id)));
        }
        bins.push(Bin { id: BinId(b.id), accepts: b.accepts, position: p, radius: b.radius });
    }
    for c in ObjectCategory::ALL {
        if !bins.iter().any(|b| b.accepts == c) {
            return Err(invalid(format!("no bin accepts {c:?}")));
        }
    }

    let chest = Vec3::from(file.agents.human.chest_pos);
    if !grid.in_bounds(&chest) {
        return Err(invalid("human chest position is outside the grid"));
    }
    let base = file.agents.robot.base_pose;
    if !grid.in_bounds(&Vec3::new(base.x, base.y, grid.origin().z)) {
        return Err(invalid("robot base pose is outside the grid"));
    }
    let arm = match &file.agents.robot.arm {
        None => KinematicChain::default_arm(),
        Some(a) => {
            let [x, y, z] = a.mount;
            KinematicChain::new(a.links.clone(), a.limits.clone(), Isometry3::translation(x, y, z))
                .map_err(|e| invalid(e.to_string()))?
        }
    };
    file.sensors.headset.validate().map_err(|e| invalid(format!("headset: {e}")))?;
    file.sensors.robot.validate().map_err(|e| invalid(format!("robot camera: {e}")))?;
    let cap = &file.capability;
    if !(cap.lattice_spacing > 0.0) || cap.headings == 0 {
        return Err(invalid("capability lattice_spacing must be > 0 and headings >= 1"));
    }

    Ok(Scenario {
        name: file.name.clone().unwrap_or_default(),
        world: World::new(grid, objects, bins),
        human_chest: chest,
        human_heading: file.agents.human.heading,
        robot_pose: base,
        arm,
        sensors: file.sensors,
        capability: file.capability,
        digest: String::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal(objects: &str, bins: &str) -> String {
        format!(
            r#"{{
              "grid": {{"origin": [0,0,0], "resolution": 0.1, "dims": [20,20,10], "occupied": [[5,5,0]]}},
              "objects": {objects},
              "bins": {bins},
              "agents": {{"human": {{"chest_pos": [1.5,1.5,0.5]}}, "robot": {{"base_pose": [0.3,0.3,0.0]}}}}
            }}"#
        )
    }

    const BINS: &str = r#"[
        {"id": 0, "accepts": "food", "pos": [1.8, 0.2, 0.5]},
        {"id": 1, "accepts": "kitchen", "pos": [1.8, 0.8, 0.5]},
        {"id": 2, "accepts": "household_tool", "pos": [1.8, 1.4, 0.5]}]"#;

    #[test]
    fn minimal_scenario_is_valid() {
        let s = parse_scenario(&minimal(r#"[{"id": 1, "category": "food", "pos": [1.0, 1.0, 0.05]}]"#, BINS)).unwrap();
        assert_eq!(s.world.objects().len(), 1);
        assert_eq!(s.world.objects()[0].state, ObjectState::Free);
        assert_eq!(s.world.bins.len(), 3);
        assert_eq!(s.world.grid.occupied_count(), 1);
        assert_eq!(s.arm, KinematicChain::default_arm());
        assert_eq!(s.digest.len(), 64);
    }

    #[test]
    fn two_food_bins_rejected() {
        let bins = BINS.replace("\"kitchen\"", "\"food\"");
        let err = parse_scenario(&minimal("[]", &bins)).unwrap_err();
        assert!(matches!(err, ScenarioError::Validation(_)), "{err}");
    }

    #[test]
    fn validation_errors() {
        let dup = r#"[{"id": 1, "category": "food", "pos": [1,1,0.05]}, {"id": 1, "category": "kitchen", "pos": [1.2,1,0.05]}]"#;
        assert!(matches!(parse_scenario(&minimal(dup, BINS)), Err(ScenarioError::Validation(_))));
        let inside = r#"[{"id": 1, "category": "food", "pos": [0.55,0.55,0.05]}]"#;
        assert!(matches!(parse_scenario(&minimal(inside, BINS)), Err(ScenarioError::Validation(_))));
        let missing = r#"[{"id": 0, "accepts": "food", "pos": [1.8, 0.2, 0.5]}]"#;
        assert!(matches!(parse_scenario(&minimal("[]", missing)), Err(ScenarioError::Validation(_))));
        let outside = r#"[{"id": 1, "category": "food", "pos": [5,1,0.05]}]"#;
        assert!(matches!(parse_scenario(&minimal(outside, BINS)), Err(ScenarioError::Validation(_))));
    }

    #[test]
    fn unknown_fields_rejected() {
        let text = minimal("[]", BINS).replacen("\"grid\"", "\"colour\": 1, \"grid\"", 1);
        assert!(matches!(parse_scenario(&text), Err(ScenarioError::Schema(_))));
        assert!(matches!(parse_scenario("{"), Err(ScenarioError::Schema(_))));
    }

    #[test]
    fn occupied_boxes_cover_centers() {
        let text = minimal("[]", BINS).replace(
            "\"occupied\": [[5,5,0]]",
            "\"occupied_boxes\": [{\"min\": [0.0, 0.0, 0.0], \"max\": [0.2, 0.1, 0.1]}]",
        );
        let s = parse_scenario(&text).unwrap();
        // centers 0.05 and 0.15 on x, 0.05 on y and z
        assert_eq!(s.world.grid.occupied_count(), 2);
    }

    #[test]
    fn custom_arm() {
        let text = minimal("[]", BINS).replace(
            "\"base_pose\": [0.3,0.3,0.0]",
            r#""base_pose": [0.3,0.3,0.0], "arm": {"links": [{"length": 0.5, "axis": "revolute_z"}], "limits": [[-1, 1]], "mount": [0, 0, 0.2]}"#,
        );
        let s = parse_scenario(&text).unwrap();
        assert_eq!(s.arm.dof(), 1);
        assert_eq!(s.arm.shoulder(), Vec3::new(0.0, 0.0, 0.2));
    }
}
