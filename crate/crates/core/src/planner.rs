//! Base motion planning on the floor plane with a capability-map terminal check.

use std::cmp::Ordering;
use std::collections::{BTreeSet, BinaryHeap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::affordance::CapabilityMap;
use crate::geometry::{Pose2, Vec3};
use crate::ids::ObjectId;
use crate::perception::DetectedObjectSet;
use crate::world::{ObjectState, VoxelGrid, VoxelIndex};

pub const DEFAULT_BAND_HEIGHT: f64 = 1.5;
pub const DEFAULT_FOOTPRINT_RADIUS: f64 = 0.3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlanError {
    #[error("target {0:?} is outside the grid")]
    OutOfBounds([f64; 3]),
    #[error("start pose {0:?} is blocked or outside the grid")]
    InvalidStart([f64; 3]),
}

/// Floor-plane projection of the voxel grid. A cell is blocked when any
/// voxel above it in the robot's height band is occupied, dilated by the
/// footprint radius.
#[derive(Clone, Debug, PartialEq)]
pub struct NavGrid {
    origin: [f64; 2],
    resolution: f64,
    nx: usize,
    ny: usize,
    blocked: Vec<bool>,
}

impl NavGrid {
    pub fn from_grid(grid: &VoxelGrid, band_height: f64, footprint_radius: f64) -> Self {
        let [nx, ny, nz] = grid.dims();
        let res = grid.resolution();
        let top = grid.origin().z + band_height;
        let mut raw = vec![false; nx * ny];
        for k in 0..nz {
            if grid.origin().z + (k as f64 + 0.5) * res > top {
                break;
            }
            for j in 0..ny {
                for i in 0..nx {
                    if !grid.is_free(VoxelIndex::new(i, j, k)) {
                        raw[j * nx + i] = true;
                    }
                }
            }
        }
        let origin = [grid.origin().x, grid.origin().y];
        Self::from_blocked(origin, res, nx, ny, raw).dilated(footprint_radius)
    }

    pub fn from_blocked(origin: [f64; 2], resolution: f64, nx: usize, ny: usize, blocked: Vec<bool>) -> Self {
        assert_eq!(blocked.len(), nx * ny, "blocked mask size");
        Self { origin, resolution, nx, ny, blocked }
    }

    /// Blocks every cell whose center is within `radius` of a blocked cell center.
    pub fn dilated(&self, radius: f64) -> Self {
        let r = (radius / self.resolution).floor() as isize;
        if r <= 0 {
            return self.clone();
        }
        let r2 = (radius / self.resolution).powi(2);
        let mut out = self.blocked.clone();
        for j in 0..self.ny {
            for i in 0..self.nx {
                if !self.blocked[self.index(i, j)] {
                    continue;
                }
                for dj in -r..=r {
                    for di in -r..=r {
                        if (di * di + dj * dj) as f64 > r2 + 1e-9 {
                            continue;
                        }
                        let (x, y) = (i as isize + di, j as isize + dj);
                        if x >= 0 && y >= 0 && (x as usize) < self.nx && (y as usize) < self.ny {
                            out[y as usize * self.nx + x as usize] = true;
                        }
                    }
                }
            }
        }
        Self { blocked: out, ..self.clone() }
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    pub fn len(&self) -> usize {
        self.blocked.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocked.is_empty()
    }

    pub fn index(&self, i: usize, j: usize) -> usize {
        j * self.nx + i
    }

    pub fn coords(&self, index: usize) -> (usize, usize) {
        (index % self.nx, index / self.nx)
    }

    pub fn is_blocked(&self, i: usize, j: usize) -> bool {
        self.blocked[self.index(i, j)]
    }

    pub fn is_blocked_index(&self, index: usize) -> bool {
        self.blocked[index]
    }

    pub fn cell_center(&self, i: usize, j: usize) -> (f64, f64) {
        (
            self.origin[0] + (i as f64 + 0.5) * self.resolution,
            self.origin[1] + (j as f64 + 0.5) * self.resolution,
        )
    }

    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let fx = ((x - self.origin[0]) / self.resolution).floor();
        let fy = ((y - self.origin[1]) / self.resolution).floor();
        if fx < 0.0 || fy < 0.0 || fx >= self.nx as f64 || fy >= self.ny as f64 {
            return None;
        }
        Some((fx as usize, fy as usize))
    }

    /// 8-connected moves with their lengths. Diagonals may not cut corners.
    pub fn neighbors(&self, index: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (i, j) = self.coords(index);
        const STEPS: [(isize, isize); 8] = [(1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (1, -1), (-1, 1), (-1, -1)];
        STEPS.iter().filter_map(move |&(di, dj)| {
            let x = i as isize + di;
            let y = j as isize + dj;
            if x < 0 || y < 0 || x as usize >= self.nx || y as usize >= self.ny {
                return None;
            }
            let (x, y) = (x as usize, y as usize);
            if self.is_blocked(x, y) {
                return None;
            }
            if di != 0 && dj != 0 && (self.is_blocked(x, j) || self.is_blocked(i, y)) {
                return None;
            }
            let len = if di != 0 && dj != 0 { std::f64::consts::SQRT_2 } else { 1.0 };
            Some((self.index(x, y), len * self.resolution))
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub object: Option<ObjectId>,
    pub target: Vec3,
    pub grasp_voxel: VoxelIndex,
    /// Cell-center poses after the start, in travel order.
    pub waypoints: Vec<Pose2>,
    pub terminal: Pose2,
    /// Path length in meters.
    pub cost: f64,
}

#[derive(Clone, Copy, PartialEq)]
struct Open {
    f: f64,
    g: f64,
    cell: usize,
}

impl Eq for Open {}

impl Ord for Open {
    // BinaryHeap is a max-heap: reverse so the smallest f, then the lowest cell index, pops first.
    fn cmp(&self, other: &Self) -> Ordering {
        other.f.total_cmp(&self.f).then_with(|| other.cell.cmp(&self.cell))
    }
}

impl PartialOrd for Open {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// A* from `start` to the nearest of `goals` (cell indices). Returns the
/// cell path including both ends and its length.
pub fn astar(nav: &NavGrid, start: usize, goals: &[usize]) -> Option<(Vec<usize>, f64)> {
    if goals.is_empty() || nav.is_blocked_index(start) {
        return None;
    }
    let goal_set: BTreeSet<usize> = goals.iter().copied().filter(|&g| !nav.is_blocked_index(g)).collect();
    if goal_set.is_empty() {
        return None;
    }
    let goal_xy: Vec<(f64, f64)> = goal_set.iter().map(|&g| { let (i, j) = nav.coords(g); nav.cell_center(i, j) }).collect();
    let h = |cell: usize| {
        let (i, j) = nav.coords(cell);
        let (x, y) = nav.cell_center(i, j);
        goal_xy
            .iter()
            .map(|(gx, gy)| ((gx - x).powi(2) + (gy - y).powi(2)).sqrt())
            .fold(f64::INFINITY, f64::min)
    };
    let n = nav.len();
    let mut g = vec![f64::INFINITY; n];
    let mut parent = vec![usize::MAX; n];
    let mut closed = vec![false; n];
    let mut open = BinaryHeap::new();
    g[start] = 0.0;
    open.push(Open { f: h(start), g: 0.0, cell: start });
    while let Some(Open { g: gc, cell, .. }) = open.pop() {
        if closed[cell] || gc > g[cell] {
            continue;
        }
        closed[cell] = true;
        if goal_set.contains(&cell) {
            let mut path = vec![cell];
            let mut c = cell;
            while c != start {
                c = parent[c];
                path.push(c);
            }
            path.reverse();
            return Some((path, gc));
        }
        for (next, step) in nav.neighbors(cell) {
            if closed[next] {
                continue;
            }
            let cand = gc + step;
            if cand < g[next] {
                g[next] = cand;
                parent[next] = cell;
                open.push(Open { f: cand + h(next), g: cand, cell: next });
            }
        }
    }
    None
}

/// Plans a base path to the nearest lattice pose from which the capability
/// map reaches `target`. `Ok(None)` means no such pose is connected to the start.
pub fn plan(
    grid: &VoxelGrid,
    nav: &NavGrid,
    cap: &CapabilityMap,
    start: Pose2,
    target: Vec3,
    object: Option<ObjectId>,
) -> Result<Option<Trajectory>, PlanError> {
    let grasp_voxel = grid
        .world_to_voxel(&target)
        .map_err(|_| PlanError::OutOfBounds([target.x, target.y, target.z]))?;
    let start_cell = nav
        .cell_of(start.x, start.y)
        .filter(|&(i, j)| !nav.is_blocked(i, j))
        .ok_or(PlanError::InvalidStart([start.x, start.y, start.theta]))?;
    let start_index = nav.index(start_cell.0, start_cell.1);

    if cap.reaches_from(grid, &start, &target) {
        return Ok(Some(Trajectory { object, target, grasp_voxel, waypoints: Vec::new(), terminal: start, cost: 0.0 }));
    }

    // Lowest lattice index per goal cell.
    let mut goal_pose: std::collections::BTreeMap<usize, Pose2> = std::collections::BTreeMap::new();
    for &pi in cap.poses_reaching(grid.linear_index(grasp_voxel)) {
        let pose = cap.lattice()[pi as usize];
        if let Some((i, j)) = nav.cell_of(pose.x, pose.y) {
            goal_pose.entry(nav.index(i, j)).or_insert(pose);
        }
    }
    let goals: Vec<usize> = goal_pose.keys().copied().collect();
    let Some((path, cost)) = astar(nav, start_index, &goals) else {
        return Ok(None);
    };
    let end = *path.last().expect("path has at least the start");
    let terminal = goal_pose[&end];
    let mut waypoints = Vec::with_capacity(path.len().saturating_sub(1));
    let mut prev = nav.cell_center(start_cell.0, start_cell.1);
    for &c in &path[1..] {
        let (i, j) = nav.coords(c);
        let (x, y) = nav.cell_center(i, j);
        waypoints.push(Pose2::new(x, y, (y - prev.1).atan2(x - prev.0)));
        prev = (x, y);
    }
    if let Some(last) = waypoints.last_mut() {
        *last = terminal;
    }
    Ok(Some(Trajectory { object, target, grasp_voxel, waypoints, terminal, cost }))
}

/// Nearest free object in O to `from`, skipping `exclude`; ties go to the lower id.
pub fn replan_target(o: &DetectedObjectSet, exclude: &BTreeSet<ObjectId>, from: &Vec3) -> Option<ObjectId> {
    o.iter()
        .filter(|f| f.state == ObjectState::Free && !exclude.contains(&f.id))
        .map(|f| ((f.position - from).norm(), f.id))
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
        .map(|(_, id)| id)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::affordance::precompute_capability_map;
    use crate::kinematics::KinematicChain;
    use crate::perception::FusedObject;
    use crate::world::{Cell, ObjectCategory};

    fn open_nav(n: usize) -> NavGrid {
        NavGrid::from_blocked([0.0, 0.0], 0.1, n, n, vec![false; n * n])
    }

    #[test]
    fn band_and_dilation() {
        let mut g = VoxelGrid::new(Vec3::zeros(), 0.1, [20, 20, 20]).unwrap();
        g.set(VoxelIndex::new(10, 10, 3), Cell::Occupied);
        g.set(VoxelIndex::new(2, 2, 18), Cell::Occupied);
        let nav = NavGrid::from_grid(&g, 1.5, 0.0);
        assert!(nav.is_blocked(10, 10));
        assert!(!nav.is_blocked(2, 2), "above the band");
        let nav = NavGrid::from_grid(&g, 1.5, 0.2);
        assert!(nav.is_blocked(12, 10) && nav.is_blocked(10, 8));
        assert!(!nav.is_blocked(12, 12), "diagonal distance 0.28 > 0.2");
        assert!(!nav.is_blocked(13, 10));
    }

    #[test]
    fn astar_straight_and_diagonal() {
        let nav = open_nav(10);
        let (path, cost) = astar(&nav, nav.index(0, 0), &[nav.index(5, 0)]).unwrap();
        assert_eq!(path.len(), 6);
        assert!((cost - 0.5).abs() < 1e-12);
        let (_, cost) = astar(&nav, nav.index(0, 0), &[nav.index(3, 3)]).unwrap();
        assert!((cost - 0.3 * std::f64::consts::SQRT_2).abs() < 1e-12);
    }

    #[test]
    fn no_corner_cutting() {
        let mut blocked = vec![false; 9];
        blocked[1] = true; // (1, 0)
        let nav = NavGrid::from_blocked([0.0, 0.0], 1.0, 3, 3, blocked);
        let (path, cost) = astar(&nav, nav.index(0, 0), &[nav.index(2, 1)]).unwrap();
        assert!(cost > 2.0, "{path:?} cost {cost}");
    }

    #[test]
    fn unreachable_goal() {
        let mut blocked = vec![false; 25];
        for j in 0..5 {
            blocked[j * 5 + 2] = true;
        }
        let nav = NavGrid::from_blocked([0.0, 0.0], 1.0, 5, 5, blocked);
        assert!(astar(&nav, nav.index(0, 0), &[nav.index(4, 4)]).is_none());
    }

    fn room() -> (VoxelGrid, NavGrid, CapabilityMap) {
        let grid = VoxelGrid::new(Vec3::zeros(), 0.1, [30, 30, 12]).unwrap();
        let nav = NavGrid::from_grid(&grid, 1.5, 0.3);
        let lattice = crate::affordance::base_lattice(&nav, 0.2, 4);
        let cap = precompute_capability_map(&KinematicChain::default_arm(), &grid, &lattice, 1024, 1e-3, 0).unwrap();
        (grid, nav, cap)
    }

    #[test]
    fn plan_examples() {
        let (grid, nav, cap) = room();
        let start = Pose2::new(0.55, 0.55, 0.0);
        let target = Vec3::new(2.45, 2.45, 0.35);
        let t = plan(&grid, &nav, &cap, start, target, Some(ObjectId(1))).unwrap().unwrap();
        let straight = ((2.45f64 - 0.55).powi(2) * 2.0).sqrt();
        assert!(t.cost >= straight - 1.0);
        assert_eq!(t.terminal, *t.waypoints.last().unwrap());
        assert!(cap.reaches_from(&grid, &t.terminal, &target));
        let again = plan(&grid, &nav, &cap, start, target, Some(ObjectId(1))).unwrap().unwrap();
        assert_eq!(t, again);

        let near = Vec3::new(0.55 + 0.5, 0.55, 0.45);
        if cap.reaches_from(&grid, &start, &near) {
            let z = plan(&grid, &nav, &cap, start, near, None).unwrap().unwrap();
            assert!(z.waypoints.is_empty());
            assert_eq!(z.terminal, start);
        }
        assert!(matches!(plan(&grid, &nav, &cap, start, Vec3::new(9.0, 0.0, 0.0), None), Err(PlanError::OutOfBounds(_))));
        assert!(matches!(plan(&grid, &nav, &cap, Pose2::new(-1.0, 0.05, 0.0), target, None), Err(PlanError::InvalidStart(_))));
    }

    #[test]
    fn unreachable_height_not_found() {
        let (grid, nav, cap) = room();
        let r = plan(&grid, &nav, &cap, Pose2::new(0.55, 0.55, 0.0), Vec3::new(1.5, 1.5, 1.15), None).unwrap();
        assert!(r.is_none());
    }

    fn fused(id: u32, x: f64) -> FusedObject {
        FusedObject {
            id: ObjectId(id),
            category: ObjectCategory::Food,
            state: ObjectState::Free,
            position: Vec3::new(x, 0.0, 0.0),
            last_seen: 0.0,
            sources: Vec::new(),
        }
    }

    #[test]
    fn replan_target_rules() {
        let o = DetectedObjectSet::from_fused(vec![fused(3, 1.0), fused(7, 2.0)]);
        let ex: BTreeSet<ObjectId> = [ObjectId(3)].into();
        assert_eq!(replan_target(&o, &ex, &Vec3::zeros()), Some(ObjectId(7)));
        let o = DetectedObjectSet::from_fused(vec![fused(5, 1.0), fused(2, -1.0)]);
        assert_eq!(replan_target(&o, &BTreeSet::new(), &Vec3::zeros()), Some(ObjectId(2)));
        assert_eq!(replan_target(&DetectedObjectSet::new(), &BTreeSet::new(), &Vec3::zeros()), None);
        let all: BTreeSet<ObjectId> = [ObjectId(5), ObjectId(2)].into();
        assert_eq!(replan_target(&o, &all, &Vec3::zeros()), None);
    }
}
