//! Simulated headset and robot RGB-D sensing, fused into the shared object set O.
//!
//! There are no images: the bounding-box center is the true bearing to the
//! object and only the depth reading is noisy. Depth is the median of a
//! window of Gaussian range draws.

use std::collections::BTreeMap;

use nalgebra::{Isometry3, Point3, Translation3, UnitQuaternion};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::geometry::{Pose2, Vec3};
use crate::ids::{AgentId, ObjectId};
use crate::world::{ObjectCategory, ObjectState, World};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SensorId {
    Headset,
    RobotCamera,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorModel {
    pub mount: AgentId,
    /// Offset in the mounting agent's frame (chest for the human, base for the robot).
    pub offset: [f64; 3],
    /// Horizontal and vertical half-angles, radians.
    pub fov: [f64; 2],
    pub max_range: f64,
    pub depth_noise_sigma: f64,
    pub median_window: usize,
}

impl SensorModel {
    pub fn default_headset() -> Self {
        Self {
            mount: AgentId::H,
            offset: [0.0, 0.0, 0.35],
            fov: [std::f64::consts::FRAC_PI_3; 2],
            max_range: 5.0,
            depth_noise_sigma: 0.02,
            median_window: 5,
        }
    }

    pub fn default_robot_camera() -> Self {
        Self {
            mount: AgentId::R,
            offset: [0.1, 0.0, 1.2],
            fov: [std::f64::consts::FRAC_PI_2, std::f64::consts::FRAC_PI_3],
            max_range: 8.0,
            depth_noise_sigma: 0.02,
            median_window: 5,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.median_window == 0 || self.median_window.is_multiple_of(2) {
            return Err(format!("median_window must be odd and >= 1, got {}", self.median_window));
        }
        for a in self.fov {
            if !(a > 0.0 && a <= std::f64::consts::FRAC_PI_2) {
                return Err(format!("fov half-angle {a} outside (0, pi/2]"));
            }
        }
        if !(self.max_range > 0.0) || !(self.depth_noise_sigma >= 0.0) {
            return Err("max_range must be > 0 and depth_noise_sigma >= 0".into());
        }
        Ok(())
    }
}

/// Rigid error between a sensor frame and the world frame.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RigidError {
    pub translation: [f64; 3],
    /// Roll, pitch, yaw, radians.
    pub rotation: [f64; 3],
}

impl RigidError {
    pub fn is_identity(&self) -> bool {
        self.translation == [0.0; 3] && self.rotation == [0.0; 3]
    }

    pub fn isometry(&self) -> Isometry3<f64> {
        let [x, y, z] = self.translation;
        let [r, p, w] = self.rotation;
        Isometry3::from_parts(Translation3::new(x, y, z), UnitQuaternion::from_euler_angles(r, p, w))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FrameCalibration {
    pub headset: RigidError,
    pub robot: RigidError,
}

impl FrameCalibration {
    pub fn error_for(&self, sensor: SensorId) -> &RigidError {
        match sensor {
            SensorId::Headset => &self.headset,
            SensorId::RobotCamera => &self.robot,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SensorsConfig {
    pub headset: SensorModel,
    pub robot: SensorModel,
    pub association_radius: f64,
    pub calibration: FrameCalibration,
}

impl Default for SensorsConfig {
    fn default() -> Self {
        Self {
            headset: SensorModel::default_headset(),
            robot: SensorModel::default_robot_camera(),
            association_radius: 0.3,
            calibration: FrameCalibration::default(),
        }
    }
}

impl SensorsConfig {
    pub fn model(&self, sensor: SensorId) -> &SensorModel {
        match sensor {
            SensorId::Headset => &self.headset,
            SensorId::RobotCamera => &self.robot,
        }
    }
}

/// Where a sensor sits this tick: world position and yaw of its mounting agent.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SensorPose {
    pub position: Vec3,
    pub yaw: f64,
}

impl SensorPose {
    pub fn on_human(model: &SensorModel, chest: &Vec3, heading: f64) -> Self {
        let base = Pose2::new(chest.x, chest.y, heading).to_isometry(chest.z);
        Self { position: (base * Point3::from(Vec3::from(model.offset))).coords, yaw: heading }
    }

    pub fn on_robot(model: &SensorModel, base: &Pose2, floor_z: f64) -> Self {
        let iso = base.to_isometry(floor_z);
        Self { position: (iso * Point3::from(Vec3::from(model.offset))).coords, yaw: base.theta }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub id: ObjectId,
    pub category: ObjectCategory,
    pub state: ObjectState,
    pub position: Vec3,
    pub source: SensorId,
    pub sigma: f64,
    pub time: f64,
}

/// Whether `p` lies within the sensor's field of view, range and line of sight.
pub fn can_see(model: &SensorModel, pose: &SensorPose, world: &World, p: &Vec3) -> bool {
    let d = p - pose.position;
    let range = d.norm();
    if range > model.max_range {
        return false;
    }
    if range > 0.0 {
        let horizontal = (d.x * d.x + d.y * d.y).sqrt();
        let azimuth = crate::geometry::wrap_angle(d.y.atan2(d.x) - pose.yaw);
        let elevation = d.z.atan2(horizontal);
        if azimuth.abs() > model.fov[0] || elevation.abs() > model.fov[1] {
            return false;
        }
    }
    world.grid.is_segment_free(&pose.position, p).unwrap_or(false)
}

/// Median of the slice, which is reordered.
pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    values[values.len() / 2]
}

/// Detects every visible object that is not held by the sensor's own agent.
pub fn sense(
    sensor: SensorId,
    model: &SensorModel,
    pose: &SensorPose,
    world: &World,
    calibration: &FrameCalibration,
    rng: &mut ChaCha8Rng,
    time: f64,
) -> Vec<Detection> {
    let err = calibration.error_for(sensor);
    let to_world = (!err.is_identity()).then(|| err.isometry());
    let mut draws = vec![0.0; model.median_window];
    let mut out = Vec::new();
    for obj in world.objects() {
        if obj.state == ObjectState::HeldBy(model.mount) || !can_see(model, pose, world, &obj.position) {
            continue;
        }
        let offset = obj.position - pose.position;
        let range = offset.norm();
        let mut estimate = obj.position;
        if model.depth_noise_sigma > 0.0 && range > 0.0 {
            let noise = Normal::new(0.0, model.depth_noise_sigma).expect("sigma checked > 0");
            for d in draws.iter_mut() {
                *d = range + noise.sample(rng);
            }
            let depth = median(&mut draws);
            // Written as a correction to the true point so zero noise is exact.
            estimate = obj.position + offset * (depth / range - 1.0);
        }
        if let Some(t) = &to_world {
            estimate = (t * Point3::from(estimate)).coords;
        }
        out.push(Detection {
            id: obj.id,
            category: obj.category,
            state: obj.state,
            position: estimate,
            source: sensor,
            sigma: model.depth_noise_sigma,
            time,
        });
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusedObject {
    pub id: ObjectId,
    pub category: ObjectCategory,
    pub state: ObjectState,
    pub position: Vec3,
    pub last_seen: f64,
    pub sources: Vec<SensorId>,
}

/// One fused entry per object id.
pub fn fuse(mut detections: Vec<Detection>, association_radius: f64) -> Vec<FusedObject> {
    detections.sort_by(|a, b| a.id.cmp(&b.id).then(a.source.cmp(&b.source)));
    let mut out: Vec<FusedObject> = Vec::new();
    let mut i = 0;
    while i < detections.len() {
        let mut j = i;
        while j < detections.len() && detections[j].id == detections[i].id {
            j += 1;
        }
        out.push(fuse_one(&detections[i..j], association_radius));
        i = j;
    }
    out
}

fn fuse_one(group: &[Detection], association_radius: f64) -> FusedObject {
    let first = &group[0];
    if group.len() == 1 {
        return FusedObject {
            id: first.id,
            category: first.category,
            state: first.state,
            position: first.position,
            last_seen: first.time,
            sources: vec![first.source],
        };
    }
    // Noise-free sources are exact; if any exist they are averaged alone.
    let exact = group.iter().any(|d| d.sigma == 0.0);
    let weight = |d: &Detection| if exact { (d.sigma == 0.0) as u8 as f64 } else { 1.0 / (d.sigma * d.sigma) };

    let mut mean = first.position;
    let mut total = weight(first);
    let mut sources = if total > 0.0 { vec![first.source] } else { Vec::new() };
    for d in &group[1..] {
        let w = weight(d);
        if w == 0.0 || (d.position - mean).norm() > association_radius {
            continue;
        }
        total += w;
        mean += (d.position - mean) * (w / total);
        sources.push(d.source);
    }
    let state = group.iter().map(|d| d.state).fold(first.state, merge_state);
    FusedObject {
        id: first.id,
        category: first.category,
        state,
        position: mean,
        last_seen: first.time,
        sources,
    }
}

// A state seen by any sensor that is further along the lifecycle wins.
fn merge_state(a: ObjectState, b: ObjectState) -> ObjectState {
    fn rank(s: ObjectState) -> u8 {
        match s {
            ObjectState::Free => 0,
            ObjectState::HeldBy(_) => 1,
            ObjectState::Binned => 2,
        }
    }
    if rank(b) > rank(a) {
        b
    } else {
        a
    }
}

/// The shared object set O. Entries persist with their last-seen position
/// after an object leaves every sensor's view.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectedObjectSet {
    objects: BTreeMap<ObjectId, FusedObject>,
}

impl DetectedObjectSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_fused(fused: Vec<FusedObject>) -> Self {
        let mut set = Self::new();
        set.merge(fused);
        set
    }

    pub fn merge(&mut self, fused: Vec<FusedObject>) {
        for f in fused {
            self.objects.insert(f.id, f);
        }
    }

    pub fn get(&self, id: ObjectId) -> Option<&FusedObject> {
        self.objects.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &FusedObject> {
        self.objects.values()
    }

    pub fn len(&self) -> usize {
        self.objects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.objects.is_empty()
    }

    /// Corrects an entry from direct contact (an agent picking or placing it).
    pub fn observe_contact(&mut self, id: ObjectId, category: ObjectCategory, state: ObjectState, position: Vec3, time: f64) {
        let entry = self.objects.entry(id).or_insert_with(|| FusedObject {
            id,
            category,
            state,
            position,
            last_seen: time,
            sources: Vec::new(),
        });
        entry.state = state;
        entry.position = position;
        entry.last_seen = time;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ids::BinId;
    use crate::world::{Bin, Cell, SceneObject, VoxelGrid, VoxelIndex};
    use rand::SeedableRng;

    fn world(objects: &[(u32, [f64; 3])]) -> World {
        let grid = VoxelGrid::new(Vec3::zeros(), 0.1, [40, 40, 20]).unwrap();
        let objs = objects
            .iter()
            .map(|(id, p)| SceneObject {
                id: ObjectId(*id),
                category: ObjectCategory::Food,
                position: Vec3::from(*p),
                state: ObjectState::Free,
            })
            .collect();
        let bins = ObjectCategory::ALL
            .iter()
            .enumerate()
            .map(|(i, c)| Bin { id: BinId(i as u32), accepts: *c, position: Vec3::new(3.5, 0.5 + i as f64, 0.5), radius: 0.25 })
            .collect();
        World::new(grid, objs, bins)
    }

    fn noiseless() -> SensorModel {
        SensorModel { depth_noise_sigma: 0.0, ..SensorModel::default_robot_camera() }
    }

    fn pose() -> SensorPose {
        SensorPose { position: Vec3::new(0.55, 2.05, 1.05), yaw: 0.0 }
    }

    #[test]
    fn zero_noise_identity_is_exact() {
        let w = world(&[(1, [2.05, 2.05, 0.55]), (2, [3.01, 1.73, 0.87])]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = sense(SensorId::RobotCamera, &noiseless(), &pose(), &w, &FrameCalibration::default(), &mut rng, 0.0);
        assert_eq!(d.len(), 2);
        for det in &d {
            assert_eq!(det.position, w.object(det.id).unwrap().position);
        }
    }

    #[test]
    fn occluded_by_wall() {
        let mut w = world(&[(1, [2.05, 2.05, 1.05])]);
        for y in 0..40 {
            for z in 0..20 {
                w.grid.set(VoxelIndex::new(15, y, z), Cell::Occupied);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = sense(SensorId::RobotCamera, &noiseless(), &pose(), &w, &FrameCalibration::default(), &mut rng, 0.0);
        assert!(d.is_empty());
    }

    #[test]
    fn outside_fov_or_range() {
        let w = world(&[(1, [0.15, 2.05, 1.05]), (2, [1.55, 2.05, 3.5])]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut m = noiseless();
        m.fov = [0.5, 0.5];
        let d = sense(SensorId::RobotCamera, &m, &pose(), &w, &FrameCalibration::default(), &mut rng, 0.0);
        assert!(d.is_empty());
        m.fov = [std::f64::consts::FRAC_PI_2; 2];
        m.max_range = 0.3;
        let d = sense(SensorId::RobotCamera, &m, &pose(), &w, &FrameCalibration::default(), &mut rng, 0.0);
        assert!(d.is_empty());
    }

    #[test]
    fn median_rejects_outlier() {
        assert_eq!(median(&mut [1.0, 1.1, 9.0, 1.05, 0.95]), 1.05);
        assert_eq!(median(&mut [3.0]), 3.0);
    }

    #[test]
    fn noisy_detection_keeps_bearing_and_is_seeded() {
        let w = world(&[(1, [2.55, 2.55, 0.55])]);
        let m = SensorModel::default_robot_camera();
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            sense(SensorId::RobotCamera, &m, &pose(), &w, &FrameCalibration::default(), &mut rng, 0.0)
        };
        let a = run(5);
        assert_eq!(a, run(5));
        assert_ne!(a[0].position, run(6)[0].position);
        let truth = w.object(ObjectId(1)).unwrap().position - pose().position;
        let est = a[0].position - pose().position;
        assert!(truth.normalize().dot(&est.normalize()) > 1.0 - 1e-12);
        assert!((est.norm() - truth.norm()).abs() < 0.1);
    }

    #[test]
    fn calibration_error_applies_rigid_transform() {
        let w = world(&[(1, [2.05, 2.05, 0.55])]);
        let cal = FrameCalibration {
            robot: RigidError { translation: [0.05, 0.0, 0.0], rotation: [0.0; 3] },
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = sense(SensorId::RobotCamera, &noiseless(), &pose(), &w, &cal, &mut rng, 0.0);
        assert!((d[0].position - Vec3::new(2.10, 2.05, 0.55)).norm() < 1e-12);
        let rot = cal.robot.isometry().rotation.to_rotation_matrix();
        assert!((rot.matrix().determinant() - 1.0).abs() < 1e-12);
    }

    fn det(id: u32, x: f64, source: SensorId, sigma: f64) -> Detection {
        Detection {
            id: ObjectId(id),
            category: ObjectCategory::Kitchen,
            state: ObjectState::Free,
            position: Vec3::new(x, 0.0, 0.0),
            source,
            sigma,
            time: 0.0,
        }
    }

    #[test]
    fn fuse_examples() {
        assert!(fuse(Vec::new(), 0.3).is_empty());
        let single = fuse(vec![det(1, 1.0, SensorId::Headset, 0.02)], 0.3);
        assert_eq!(single[0].position, Vec3::new(1.0, 0.0, 0.0));
        let pair = fuse(vec![det(1, 1.1, SensorId::RobotCamera, 0.02), det(1, 1.0, SensorId::Headset, 0.02)], 0.3);
        assert_eq!(pair.len(), 1);
        assert!((pair[0].position - Vec3::new(1.05, 0.0, 0.0)).norm() < 1e-12);
        assert_eq!(pair[0].sources, vec![SensorId::Headset, SensorId::RobotCamera]);
    }

    #[test]
    fn fuse_weights_by_inverse_variance() {
        let f = fuse(vec![det(1, 1.0, SensorId::Headset, 0.01), det(1, 1.1, SensorId::RobotCamera, 0.02)], 0.3);
        // weights 4:1
        assert!((f[0].position.x - 1.02).abs() < 1e-12);
        let gated = fuse(vec![det(1, 1.0, SensorId::Headset, 0.02), det(1, 2.0, SensorId::RobotCamera, 0.02)], 0.3);
        assert_eq!(gated[0].position.x, 1.0);
    }

    #[test]
    fn set_keeps_last_seen() {
        let mut o = DetectedObjectSet::from_fused(fuse(vec![det(2, 1.0, SensorId::Headset, 0.02)], 0.3));
        o.merge(fuse(vec![det(3, 2.0, SensorId::Headset, 0.02)], 0.3));
        assert_eq!(o.len(), 2);
        assert_eq!(o.get(ObjectId(2)).unwrap().position.x, 1.0);
    }
}
