//! Planar serial arm: first-order joint tracking, forward kinematics, the
//! analytic Jacobian and one damped-least-squares IK update.

use alloc::vec::Vec;
use core::f64::consts::PI;

/// Default link lengths in meters.
pub const DEFAULT_LINKS: [f64; 3] = [0.3, 0.25, 0.15];
/// Default joint speed limit in rad/s.
pub const DEFAULT_MAX_VEL: f64 = 1.5;
/// Default IK damping.
pub const DEFAULT_DAMPING: f64 = 0.05;

/// End-effector pose in the arm plane: meters and radians.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Pose2D {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl Pose2D {
    pub const fn new(x: f64, y: f64, theta: f64) -> Self {
        Pose2D { x, y, theta }
    }

    /// Component-wise composition with the heading wrapped to (-pi, pi].
    pub fn offset(self, delta: Pose2D) -> Pose2D {
        Pose2D {
            x: self.x + delta.x,
            y: self.y + delta.y,
            theta: wrap_angle(self.theta + wrap_angle(delta.theta)),
        }
    }

    /// `(x, y, wrapped heading)` error from `self` to `target`.
    pub fn error_to(self, target: Pose2D) -> [f64; 3] {
        [target.x - self.x, target.y - self.y, wrap_angle(target.theta - self.theta)]
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.theta.is_finite()
    }

    /// As a 6-vector `[x, y, z, roll, pitch, yaw]` with the plane at z = 0.
    pub fn to_pose6(self) -> [f64; 6] {
        [self.x, self.y, 0.0, 0.0, 0.0, self.theta]
    }
}

/// Wraps an angle into (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    if !a.is_finite() {
        return a;
    }
    let two_pi = 2.0 * PI;
    let mut r = a - two_pi * libm::ceil((a - PI) / two_pi);
    // guard rounding at the boundary
    if r <= -PI {
        r += two_pi;
    } else if r > PI {
        r -= two_pi;
    }
    r
}

/// Static description of an arm.
#[derive(Clone, Debug, PartialEq)]
pub struct ArmModel {
    pub link_lengths: Vec<f64>,
    /// Per-joint `[lo, hi]` in radians.
    pub joint_limits: Vec<(f64, f64)>,
    /// Joint speed limit in rad/s.
    pub max_vel: f64,
}

impl Default for ArmModel {
    fn default() -> Self {
        ArmModel {
            link_lengths: DEFAULT_LINKS.to_vec(),
            joint_limits: alloc::vec![(-PI, PI); DEFAULT_LINKS.len()],
            max_vel: DEFAULT_MAX_VEL,
        }
    }
}

impl ArmModel {
    pub fn n_joints(&self) -> usize {
        self.link_lengths.len()
    }

    /// Total reach in meters.
    pub fn reach(&self) -> f64 {
        self.link_lengths.iter().sum()
    }

    pub fn clamp_to_limits(&self, joints: &mut [f64]) {
        for (q, (lo, hi)) in joints.iter_mut().zip(&self.joint_limits) {
            *q = q.clamp(*lo, *hi);
        }
    }

    pub fn fk(&self, joints: &[f64]) -> Pose2D {
        fk(&self.link_lengths, joints)
    }

    pub fn jacobian(&self, joints: &[f64]) -> Jacobian {
        jacobian(&self.link_lengths, joints)
    }
}

/// Planar chain forward kinematics.
pub fn fk(links: &[f64], joints: &[f64]) -> Pose2D {
    let (mut x, mut y, mut phi) = (0.0, 0.0, 0.0);
    for (l, q) in links.iter().zip(joints) {
        phi += q;
        x += l * libm::cos(phi);
        y += l * libm::sin(phi);
    }
    Pose2D { x, y, theta: phi }
}

/// 3 x n Jacobian of `(x, y, theta)`, stored column-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Jacobian {
    pub columns: Vec<[f64; 3]>,
}

impl Jacobian {
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.columns[col][row]
    }
}

/// Analytic Jacobian: column i is `(-sum_{k>=i} L_k sin(phi_k),
/// sum_{k>=i} L_k cos(phi_k), 1)` with `phi_k` the cumulative angle.
pub fn jacobian(links: &[f64], joints: &[f64]) -> Jacobian {
    let n = links.len().min(joints.len());
    let mut phi = 0.0;
    let mut terms = Vec::with_capacity(n);
    for i in 0..n {
        phi += joints[i];
        terms.push((links[i] * libm::cos(phi), links[i] * libm::sin(phi)));
    }
    let mut columns = alloc::vec![[0.0; 3]; n];
    let (mut sx, mut sy) = (0.0, 0.0);
    for i in (0..n).rev() {
        sx += terms[i].0;
        sy += terms[i].1;
        columns[i] = [-sy, sx, 1.0];
    }
    Jacobian { columns }
}

/// Solves the symmetric positive definite 3x3 system `a x = b`.
fn solve3(a: [[f64; 3]; 3], b: [f64; 3]) -> [f64; 3] {
    let mut m = [[0.0; 4]; 3];
    for r in 0..3 {
        m[r][..3].copy_from_slice(&a[r]);
        m[r][3] = b[r];
    }
    for c in 0..3 {
        let p = (c..3)
            .max_by(|&i, &j| libm::fabs(m[i][c]).partial_cmp(&libm::fabs(m[j][c])).unwrap())
            .unwrap();
        m.swap(c, p);
        let pivot = m[c][c];
        for r in 0..3 {
            if r != c {
                let f = m[r][c] / pivot;
                for k in c..4 {
                    m[r][k] -= f * m[c][k];
                }
            }
        }
    }
    [m[0][3] / m[0][0], m[1][3] / m[1][1], m[2][3] / m[2][2]]
}

/// Damped least-squares joint update `J^T (J J^T + damping^2 I)^-1 e`.
pub fn dls_delta(jac: &Jacobian, error: [f64; 3], damping: f64) -> Vec<f64> {
    let mut a = [[0.0; 3]; 3];
    for col in &jac.columns {
        for r in 0..3 {
            for c in 0..3 {
                a[r][c] += col[r] * col[c];
            }
        }
    }
    let d2 = damping * damping;
    for (i, row) in a.iter_mut().enumerate() {
        row[i] += d2;
    }
    let y = solve3(a, error);
    jac.columns
        .iter()
        .map(|col| col[0] * y[0] + col[1] * y[1] + col[2] * y[2])
        .collect()
}

/// Largest position error fed to one IK step, as a fraction of reach.
pub const MAX_STEP_POS: f64 = 0.1;
/// Largest heading error fed to one IK step, in radians.
pub const MAX_STEP_ANGLE: f64 = 0.5;

/// Scales the position part and the heading part of `e` down to the given
/// magnitudes. Errors already within bounds pass through unchanged.
pub fn clamp_error(e: [f64; 3], max_pos: f64, max_angle: f64) -> [f64; 3] {
    let n = libm::sqrt(e[0] * e[0] + e[1] * e[1]);
    let s = if n > max_pos { max_pos / n } else { 1.0 };
    [e[0] * s, e[1] * s, e[2].clamp(-max_angle, max_angle)]
}

/// One damped least-squares step toward `target`, returning new joint
/// targets within the model's limits. Joints whose limits span a full turn
/// are continuous and wrapped into (-pi, pi]; others are clamped.
/// `damping` must be positive.
pub fn ik_step(model: &ArmModel, joints: &[f64], target: Pose2D, damping: f64) -> Vec<f64> {
    debug_assert!(damping > 0.0);
    let err = clamp_error(model.fk(joints).error_to(target), MAX_STEP_POS * model.reach(), MAX_STEP_ANGLE);
    let delta = dls_delta(&model.jacobian(joints), err, damping);
    let mut out: Vec<f64> = joints.iter().zip(&delta).map(|(q, d)| q + d).collect();
    for (q, (lo, hi)) in out.iter_mut().zip(&model.joint_limits) {
        if hi - lo >= 2.0 * PI {
            *q = wrap_angle(*q).clamp(*lo, *hi);
        }
    }
    model.clamp_to_limits(&mut out);
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct IkSolution {
    pub joints: Vec<f64>,
    pub error: f64,
    pub iterations: usize,
}

/// Iterates [`ik_step`] until the pose error drops below `tol`. The damping
/// of each step is `min(damping, error)`, so steps approach Gauss-Newton
/// near the solution while staying damped far from it.
pub fn solve_ik(
    model: &ArmModel,
    start: &[f64],
    target: Pose2D,
    damping: f64,
    max_iters: usize,
    tol: f64,
) -> IkSolution {
    let mut joints = start.to_vec();
    let mut error = pose_error_norm(model.fk(&joints), target);
    let mut iterations = 0;
    while error >= tol && iterations < max_iters {
        joints = ik_step(model, &joints, target, damping.min(error));
        error = pose_error_norm(model.fk(&joints), target);
        iterations += 1;
    }
    IkSolution { joints, error, iterations }
}

/// Norm of the `(x, y, theta)` pose error.
pub fn pose_error_norm(a: Pose2D, b: Pose2D) -> f64 {
    let e = a.error_to(b);
    libm::sqrt(e[0] * e[0] + e[1] * e[1] + e[2] * e[2])
}

/// First-order tracking: move toward `target` by at most `max_step`.
pub fn track(pos: f64, target: f64, max_step: f64) -> f64 {
    pos + (target - pos).clamp(-max_step, max_step)
}

/// Simulated kinematic arm.
#[derive(Clone, Debug, PartialEq)]
pub struct SimArm {
    pub model: ArmModel,
    pub joint_pos: Vec<f64>,
    pub joint_vel: Vec<f64>,
    pub target: Vec<f64>,
}

impl SimArm {
    /// Arm at the all-zero home configuration.
    pub fn new(model: ArmModel) -> Self {
        let n = model.n_joints();
        SimArm {
            model,
            joint_pos: alloc::vec![0.0; n],
            joint_vel: alloc::vec![0.0; n],
            target: alloc::vec![0.0; n],
        }
    }

    /// Sets the joint target, clamped to limits.
    pub fn set_target(&mut self, target: &[f64]) {
        for (t, v) in self.target.iter_mut().zip(target) {
            *t = *v;
        }
        self.model.clamp_to_limits(&mut self.target);
    }

    /// Advances by `dt` seconds: `pos' = pos + clamp(target - pos, +-max_vel*dt)`,
    /// then clamped to limits.
    pub fn tick(&mut self, dt: f64) {
        debug_assert!(dt > 0.0);
        let step = self.model.max_vel * dt;
        for i in 0..self.joint_pos.len() {
            let (lo, hi) = self.model.joint_limits[i];
            let next = track(self.joint_pos[i], self.target[i], step).clamp(lo, hi);
            self.joint_vel[i] = (next - self.joint_pos[i]) / dt;
            self.joint_pos[i] = next;
        }
    }

    pub fn ee_pose(&self) -> Pose2D {
        self.model.fk(&self.joint_pos)
    }
}

/// Simulated parallel gripper: scalar width with the same tracking law.
#[derive(Clone, Debug, PartialEq)]
pub struct SimGripper {
    pub width: f64,
    pub target: f64,
    pub max_width: f64,
    pub max_vel: f64,
}

impl Default for SimGripper {
    fn default() -> Self {
        SimGripper {
            width: 0.0,
            target: 0.0,
            max_width: 0.08,
            max_vel: 0.1,
        }
    }
}

impl SimGripper {
    pub fn set_target(&mut self, w: f64) {
        self.target = w.clamp(0.0, self.max_width);
    }

    pub fn tick(&mut self, dt: f64) {
        self.width = track(self.width, self.target, self.max_vel * dt).clamp(0.0, self.max_width);
    }
}
