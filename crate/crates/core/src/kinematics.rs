//! Serial-chain forward kinematics, positional Jacobians and manipulability.
//!
//! A chain is a list of revolute joints, each followed by a rigid link along
//! the local x axis. Joint `j` rotates its frame about the local z or y axis
//! by `q[j]`, then the frame is translated by the link length. The chain is
//! attached to the mobile base through a fixed mount transform.

use std::f64::consts::PI;

use nalgebra::{
    DVector, Isometry3, Matrix3, Matrix3xX, Rotation3, Translation3, UnitQuaternion, Vector3,
};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Vec3;

/// Singular values below this are treated as zero.
pub const SINGULAR_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KinematicsError {
    #[error("expected {expected} joint values, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("joint {joint} value {value} outside [{min}, {max}]")]
    JointLimit { joint: usize, value: f64, min: f64, max: f64 },
    #[error("invalid chain: {0}")]
    InvalidChain(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JointAxis {
    RevoluteZ,
    RevoluteY,
}

impl JointAxis {
    fn unit(self) -> Vector3<f64> {
        match self {
            JointAxis::RevoluteZ => Vector3::z(),
            JointAxis::RevoluteY => Vector3::y(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Link {
    pub length: f64,
    pub axis: JointAxis,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KinematicChain {
    links: Vec<Link>,
    limits: Vec<[f64; 2]>,
    mount: Isometry3<f64>,
}

/// Pose of the last link frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EndEffectorPose {
    pub position: Vec3,
    pub rotation: Rotation3<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ManipulabilityEllipsoid {
    pub center: Vec3,
    /// Sorted descending.
    pub semi_axes: [f64; 3],
    /// Columns are the principal directions matching `semi_axes`.
    pub orientation: Rotation3<f64>,
    pub w: f64,
}

impl KinematicChain {
    pub fn new(links: Vec<Link>, limits: Vec<[f64; 2]>, mount: Isometry3<f64>) -> Result<Self, KinematicsError> {
        if links.is_empty() {
            return Err(KinematicsError::InvalidChain("chain has no links".into()));
        }
        if links.len() != limits.len() {
            return Err(KinematicsError::InvalidChain(format!(
                "{} links but {} joint limits",
                links.len(),
                limits.len()
            )));
        }
        for (j, l) in links.iter().enumerate() {
            if !(l.length > 0.0) || !l.length.is_finite() {
                return Err(KinematicsError::InvalidChain(format!("link {j} length must be > 0")));
            }
        }
        for (j, lim) in limits.iter().enumerate() {
            if !(lim[0] < lim[1]) {
                return Err(KinematicsError::InvalidChain(format!(
                    "joint {j} limits must satisfy min < max, got {lim:?}"
                )));
            }
        }
        Ok(Self { links, limits, mount })
    }

    /// Planar chain of z-axis revolute joints with full-turn limits.
    pub fn planar(lengths: &[f64]) -> Result<Self, KinematicsError> {
        let links = lengths
            .iter()
            .map(|&length| Link { length, axis: JointAxis::RevoluteZ })
            .collect::<Vec<_>>();
        let limits = vec![[-PI, PI]; links.len()];
        Self::new(links, limits, Isometry3::identity())
    }

    /// The default 3-DoF yaw-pitch-pitch arm with its shoulder 0.45 m above the base.
    pub fn default_arm() -> Self {
        Self::new(
            vec![
                Link { length: 0.35, axis: JointAxis::RevoluteZ },
                Link { length: 0.30, axis: JointAxis::RevoluteY },
                Link { length: 0.20, axis: JointAxis::RevoluteY },
            ],
            vec![[-0.75 * PI, 0.75 * PI], [-PI / 2.0, PI / 2.0], [-2.5, 2.5]],
            Isometry3::translation(0.0, 0.0, 0.45),
        )
        .expect("default arm is valid")
    }

    pub fn links(&self) -> &[Link] {
        &self.links
    }

    pub fn limits(&self) -> &[[f64; 2]] {
        &self.limits
    }

    pub fn mount(&self) -> &Isometry3<f64> {
        &self.mount
    }

    pub fn dof(&self) -> usize {
        self.links.len()
    }

    pub fn with_mount(&self, mount: Isometry3<f64>) -> Self {
        Self { mount, ..self.clone() }
    }

    /// Shoulder (first joint origin) in the base frame.
    pub fn shoulder(&self) -> Vec3 {
        self.mount.translation.vector
    }

    /// Number of task-space directions the chain can actuate: chains whose
    /// joints all share one axis type move in a plane.
    pub fn task_dimension(&self) -> usize {
        let first = self.links[0].axis;
        let planar = self.links.iter().all(|l| l.axis == first);
        let cap = if planar { 2 } else { 3 };
        self.dof().min(cap)
    }

    fn check(&self, q: &[f64]) -> Result<(), KinematicsError> {
        if q.len() != self.dof() {
            return Err(KinematicsError::DimensionMismatch { expected: self.dof(), got: q.len() });
        }
        for (j, (&v, lim)) in q.iter().zip(&self.limits).enumerate() {
            if !(v >= lim[0] && v <= lim[1]) {
                return Err(KinematicsError::JointLimit { joint: j, value: v, min: lim[0], max: lim[1] });
            }
        }
        Ok(())
    }

    /// Joint origins and world-frame axes, plus the end-effector frame.
    /// Assumes `q` has already been validated.
    fn frames(&self, q: &[f64]) -> (Vec<(Vec3, Vec3)>, Isometry3<f64>) {
        let mut t = self.mount;
        let mut joints = Vec::with_capacity(self.dof());
        for (link, &angle) in self.links.iter().zip(q) {
            let axis_local = link.axis.unit();
            joints.push((t.translation.vector, t.rotation * axis_local));
            let rot = UnitQuaternion::from_axis_angle(&nalgebra::Unit::new_unchecked(axis_local), angle);
            t = t * Isometry3::from_parts(Translation3::identity(), rot)
                * Isometry3::translation(link.length, 0.0, 0.0);
        }
        (joints, t)
    }

    pub fn forward_kinematics(&self, q: &[f64]) -> Result<EndEffectorPose, KinematicsError> {
        self.check(q)?;
        let (_, t) = self.frames(q);
        Ok(EndEffectorPose {
            position: t.translation.vector,
            rotation: t.rotation.to_rotation_matrix(),
        })
    }

    /// End-effector position, skipping the limit check.
    pub(crate) fn position_unchecked(&self, q: &[f64]) -> Vec3 {
        self.frames(q).1.translation.vector
    }

    fn jacobian_unchecked(&self, q: &[f64]) -> Matrix3xX<f64> {
        let (joints, t) = self.frames(q);
        let ee = t.translation.vector;
        let mut j = Matrix3xX::zeros(self.dof());
        for (col, (origin, axis)) in joints.iter().enumerate() {
            j.set_column(col, &axis.cross(&(ee - origin)));
        }
        j
    }

    /// 3 x n positional Jacobian; column j is `axis_j x (ee - origin_j)`.
    pub fn jacobian(&self, q: &[f64]) -> Result<Matrix3xX<f64>, KinematicsError> {
        self.check(q)?;
        Ok(self.jacobian_unchecked(q))
    }

    pub fn manipulability(&self, q: &[f64]) -> Result<ManipulabilityEllipsoid, KinematicsError> {
        self.check(q)?;
        Ok(self.manipulability_unchecked(q))
    }

    pub(crate) fn manipulability_unchecked(&self, q: &[f64]) -> ManipulabilityEllipsoid {
        let jac = self.jacobian_unchecked(q);
        let center = self.position_unchecked(q);
        // Singular values come from a values-only decomposition: asking
        // nalgebra for U as well perturbs them on some rotated 3xn inputs.
        // The principal directions are the eigenvectors of J J^T.
        let mut sigma: Vec<f64> = jac.clone().svd(false, false).singular_values.iter().copied().collect();
        sigma.sort_by(|a, b| b.total_cmp(a));
        let mut semi_axes = [0.0; 3];
        for (slot, s) in sigma.iter().take(3).enumerate() {
            semi_axes[slot] = if *s < SINGULAR_TOL { 0.0 } else { *s };
        }
        let eig = (&jac * jac.transpose()).symmetric_eigen();
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let mut basis = Matrix3::zeros();
        for (slot, &i) in order.iter().enumerate() {
            basis.set_column(slot, &eig.eigenvectors.column(i));
        }
        if basis.determinant() < 0.0 {
            let flipped = -basis.column(2);
            basis.set_column(2, &flipped);
        }
        let w = semi_axes[..self.task_dimension()].iter().product();
        ManipulabilityEllipsoid {
            center,
            semi_axes,
            orientation: Rotation3::from_matrix_unchecked(basis),
            w,
        }
    }

    /// Radial workspace bounds around the shoulder, ignoring joint limits.
    pub fn reach_distance(&self) -> (f64, f64) {
        let r_max: f64 = self.links.iter().map(|l| l.length).sum();
        let planar = self.links.iter().all(|l| l.axis == self.links[0].axis);
        let r_min = if planar && self.dof() <= 2 {
            let longest = self.links.iter().map(|l| l.length).fold(0.0, f64::max);
            (2.0 * longest - r_max).max(0.0)
        } else {
            0.0
        };
        (r_min, r_max)
    }

    /// Damped least-squares position IK starting from `q0`, clamped to the
    /// joint limits. Returns the final configuration and its position error.
    pub fn solve_position_ik(&self, q0: &[f64], target: &Vec3, iterations: usize) -> Result<(Vec<f64>, f64), KinematicsError> {
        self.check(q0)?;
        let mut q = q0.to_vec();
        let lambda2 = 1e-4;
        for _ in 0..iterations {
            let err = target - self.position_unchecked(&q);
            if err.norm() < 1e-9 {
                break;
            }
            let jac = self.jacobian_unchecked(&q);
            let jjt: Matrix3<f64> = &jac * jac.transpose() + Matrix3::identity() * lambda2;
            let Some(inv) = jjt.try_inverse() else { break };
            let dq: DVector<f64> = jac.transpose() * (inv * err);
            for (j, v) in q.iter_mut().enumerate() {
                *v = (*v + dq[j]).clamp(self.limits[j][0], self.limits[j][1]);
            }
        }
        let residual = (target - self.position_unchecked(&q)).norm();
        Ok((q, residual))
    }
}
