use nalgebra::Point3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::sampling::joint_samples;
use super::{AffordanceError, AffordanceMap};
use crate::geometry::{Pose2, Vec3};
use crate::kinematics::KinematicChain;
use crate::planner::{NavGrid, DEFAULT_BAND_HEIGHT, DEFAULT_FOOTPRINT_RADIUS};
use crate::world::{Scenario, VoxelGrid, WorldError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CapabilityConfig {
    /// Spacing of base positions on the floor, meters.
    pub lattice_spacing: f64,
    /// Headings per base position.
    pub headings: usize,
    pub samples_per_pose: usize,
    pub w_threshold: f64,
    /// Seed of the sample sequence shift.
    pub seed: u64,
}

impl Default for CapabilityConfig {
    fn default() -> Self {
        Self {
            lattice_spacing: 0.2,
            headings: 8,
            samples_per_pose: 4096,
            w_threshold: 1e-3,
            seed: 0,
        }
    }
}

/// Arm samples expressed in the mobile-base frame, sorted by descending
/// manipulability (ties keep sample order).
#[derive(Clone, Debug, PartialEq)]
pub struct ReachTemplate {
    pub shoulder: Vec3,
    pub samples: Vec<(Vec3, f64)>,
}

impl ReachTemplate {
    pub fn build(chain: &KinematicChain, count: usize, seed: u64) -> Self {
        let mut samples: Vec<(Vec3, f64)> = joint_samples(chain, count, seed)
            .iter()
            .map(|q| {
                let m = chain.manipulability_unchecked(q);
                (m.center, m.w)
            })
            .collect();
        samples.sort_by(|a, b| b.1.total_cmp(&a.1));
        Self { shoulder: chain.shoulder(), samples }
    }

    /// Largest shoulder-to-sample distance.
    pub fn radius(&self) -> f64 {
        self.samples
            .iter()
            .map(|s| (s.0 - self.shoulder).norm())
            .fold(0.0, f64::max)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CapabilityEntry {
    pub reachable: bool,
    pub best_w: f64,
    pub hint: Option<u32>,
}

impl Default for CapabilityEntry {
    fn default() -> Self {
        Self { reachable: false, best_w: 0.0, hint: None }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CapabilityQuery {
    pub reachable: bool,
    pub best_w: f64,
    pub base_pose_hint: Option<Pose2>,
}

/// Per-voxel robot reachability over a lattice of base poses.
#[derive(Clone, Debug, PartialEq)]
pub struct CapabilityMap {
    pub(super) geometry: VoxelGrid,
    pub(super) w_threshold: f64,
    pub(super) samples_per_pose: u32,
    pub(super) seed: u64,
    pub(super) lattice: Vec<Pose2>,
    pub(super) entries: Vec<CapabilityEntry>,
    // Lattice poses that reach each voxel, CSR layout, ascending pose index.
    pub(super) reach_offsets: Vec<u32>,
    pub(super) reach_poses: Vec<u32>,
    pub(super) template: ReachTemplate,
}

/// Floor lattice: every unblocked navigation cell on a `spacing` raster,
/// times `headings` evenly spaced headings.
pub fn base_lattice(nav: &NavGrid, spacing: f64, headings: usize) -> Vec<Pose2> {
    let step = ((spacing / nav.resolution()).round() as usize).max(1);
    let mut out = Vec::new();
    for j in (0..nav.ny()).step_by(step) {
        for i in (0..nav.nx()).step_by(step) {
            if nav.is_blocked(i, j) {
                continue;
            }
            let (x, y) = nav.cell_center(i, j);
            for h in 0..headings {
                let theta = std::f64::consts::TAU * h as f64 / headings as f64;
                out.push(Pose2::new(x, y, crate::geometry::wrap_angle(theta)));
            }
        }
    }
    out
}

fn pose_reach(template: &ReachTemplate, grid: &VoxelGrid, pose: &Pose2, stamps: &mut [u32], stamp: u32) -> Vec<(u32, f64)> {
    let iso = pose.to_isometry(grid.origin().z);
    let shoulder = (iso * Point3::from(template.shoulder)).coords;
    let mut out = Vec::new();
    if !grid.in_bounds(&shoulder) {
        return out;
    }
    for (ee_base, w) in &template.samples {
        let ee = (iso * Point3::from(*ee_base)).coords;
        let Ok(idx) = grid.world_to_voxel(&ee) else { continue };
        let lin = grid.linear_index(idx);
        if stamps[lin] == stamp {
            continue;
        }
        // Samples arrive by descending w, so the first clear one is the pose's best.
        if grid.is_segment_free(&shoulder, &ee).unwrap_or(false) {
            stamps[lin] = stamp;
            out.push((lin as u32, *w));
        }
    }
    out
}

/// Precomputes the robot capability map. Poses are evaluated in parallel on
/// the current rayon pool and merged in lattice order, so the result does
/// not depend on the thread count.
pub fn precompute_capability_map(
    chain: &KinematicChain,
    grid: &VoxelGrid,
    lattice: &[Pose2],
    samples_per_pose: usize,
    w_threshold: f64,
    seed: u64,
) -> Result<CapabilityMap, AffordanceError> {
    if lattice.is_empty() {
        return Err(AffordanceError::EmptyLattice);
    }
    for pose in lattice {
        let p = Vec3::new(pose.x, pose.y, grid.origin().z);
        grid.world_to_voxel(&p)?;
    }
    let template = ReachTemplate::build(chain, samples_per_pose, seed);
    let nvox = grid.len();
    let mut entries = vec![CapabilityEntry::default(); nvox];
    let mut per_voxel: Vec<Vec<u32>> = vec![Vec::new(); nvox];

    const CHUNK: usize = 256;
    for (chunk_index, chunk) in lattice.chunks(CHUNK).enumerate() {
        let base = chunk_index * CHUNK;
        let results: Vec<Vec<(u32, f64)>> = chunk
            .par_iter()
            .enumerate()
            .map_init(
                || vec![0u32; nvox],
                |stamps, (k, pose)| pose_reach(&template, grid, pose, stamps, (base + k + 1) as u32),
            )
            .collect();
        for (k, hits) in results.into_iter().enumerate() {
            let pose_index = (base + k) as u32;
            for (lin, w) in hits {
                let e = &mut entries[lin as usize];
                if e.hint.is_none() || w > e.best_w {
                    e.best_w = w;
                    e.hint = Some(pose_index);
                }
                if w > w_threshold {
                    per_voxel[lin as usize].push(pose_index);
                }
            }
        }
    }
    for e in &mut entries {
        e.reachable = e.best_w > w_threshold;
    }

    let mut reach_offsets = Vec::with_capacity(nvox + 1);
    let mut reach_poses = Vec::new();
    reach_offsets.push(0u32);
    for list in per_voxel {
        reach_poses.extend(list);
        reach_offsets.push(reach_poses.len() as u32);
    }

    let geometry = VoxelGrid::new(grid.origin(), grid.resolution(), grid.dims())?;
    Ok(CapabilityMap {
        geometry,
        w_threshold,
        samples_per_pose: samples_per_pose as u32,
        seed,
        lattice: lattice.to_vec(),
        entries,
        reach_offsets,
        reach_poses,
        template,
    })
}

/// Precomputes the map for a scenario's arm, grid and capability settings.
pub fn precompute_for_scenario(scenario: &Scenario) -> Result<CapabilityMap, AffordanceError> {
    let grid = &scenario.world.grid;
    let c = &scenario.capability;
    let nav = NavGrid::from_grid(grid, DEFAULT_BAND_HEIGHT, DEFAULT_FOOTPRINT_RADIUS);
    let lattice = base_lattice(&nav, c.lattice_spacing, c.headings);
    precompute_capability_map(&scenario.arm, grid, &lattice, c.samples_per_pose, c.w_threshold, c.seed)
}

impl CapabilityMap {
    pub fn lattice(&self) -> &[Pose2] {
        &self.lattice
    }

    pub fn w_threshold(&self) -> f64 {
        self.w_threshold
    }

    pub fn template(&self) -> &ReachTemplate {
        &self.template
    }

    pub fn entries(&self) -> &[CapabilityEntry] {
        &self.entries
    }

    pub fn entry_linear(&self, linear: usize) -> CapabilityEntry {
        self.entries[linear]
    }

    pub fn matches_grid(&self, grid: &VoxelGrid) -> bool {
        self.geometry.origin() == grid.origin()
            && self.geometry.resolution() == grid.resolution()
            && self.geometry.dims() == grid.dims()
    }

    pub fn reachable_count(&self) -> usize {
        self.entries.iter().filter(|e| e.reachable).count()
    }

    pub fn reachable_linear(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.iter().enumerate().filter(|(_, e)| e.reachable).map(|(i, _)| i)
    }

    /// Lookup of the voxel containing `p`.
    pub fn query(&self, p: &Vec3) -> Result<CapabilityQuery, WorldError> {
        let idx = self.geometry.world_to_voxel(p)?;
        let e = self.entries[self.geometry.linear_index(idx)];
        Ok(CapabilityQuery {
            reachable: e.reachable,
            best_w: e.best_w,
            base_pose_hint: e.hint.map(|h| self.lattice[h as usize]),
        })
    }

    /// Indices of lattice poses from which the voxel is reachable.
    pub fn poses_reaching(&self, linear: usize) -> &[u32] {
        let lo = self.reach_offsets[linear] as usize;
        let hi = self.reach_offsets[linear + 1] as usize;
        &self.reach_poses[lo..hi]
    }

    /// Whether the arm can place its end effector in the voxel containing
    /// `target` from an arbitrary base pose, with a clear shoulder segment.
    pub fn reaches_from(&self, grid: &VoxelGrid, pose: &Pose2, target: &Vec3) -> bool {
        let Ok(target_idx) = grid.world_to_voxel(target) else { return false };
        let iso = pose.to_isometry(grid.origin().z);
        let shoulder = (iso * Point3::from(self.template.shoulder)).coords;
        if !grid.in_bounds(&shoulder) {
            return false;
        }
        if (target - shoulder).norm() > self.template.radius() + grid.resolution() * 3f64.sqrt() {
            return false;
        }
        self.template.samples.iter().any(|(ee_base, w)| {
            if *w <= self.w_threshold {
                return false;
            }
            let ee = (iso * Point3::from(*ee_base)).coords;
            grid.world_to_voxel(&ee).map(|i| i == target_idx).unwrap_or(false)
                && grid.is_segment_free(&shoulder, &ee).unwrap_or(false)
        })
    }
}

impl AffordanceMap for CapabilityMap {
    fn contains_linear(&self, linear: usize) -> bool {
        self.entries[linear].reachable
    }
}
