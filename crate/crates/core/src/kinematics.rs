//! Constant turn rate and acceleration (CTRA) state transition and SE(2)
//! helpers.
//!
//! A control action `(a, w)` held over `dt` seconds moves an agent along
//! `v(t) = v + a t`, `theta(t) = theta + w t`. The position is the exact
//! integral of `v(t) (cos theta(t), sin theta(t))`.

use std::f64::consts::PI;
use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Below this yaw rate the turning closed form is replaced by its Taylor
/// expansion around `w = 0`.
pub const OMEGA_EPS: f64 = 1e-4;

/// Kinematic state of one agent.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AgentState {
    pub x: f64,
    pub y: f64,
    /// Heading in `(-pi, pi]`.
    pub theta: f64,
    /// Signed longitudinal speed; negative when reversing.
    pub v: f64,
}

impl AgentState {
    pub const fn new(x: f64, y: f64, theta: f64, v: f64) -> Self {
        Self { x, y, theta, v }
    }

    pub fn position(&self) -> Vec2 {
        Vec2::new(self.x, self.y)
    }

    pub fn pose(&self) -> Pose {
        Pose::new(self.x, self.y, self.theta)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.theta.is_finite() && self.v.is_finite()
    }

    fn check(&self) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite("agent state"))
        }
    }
}

/// Continuous control: longitudinal acceleration and yaw rate.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ControlAction {
    /// m/s^2
    pub a: f64,
    /// rad/s
    pub w: f64,
}

impl ControlAction {
    pub const fn new(a: f64, w: f64) -> Self {
        Self { a, w }
    }

    pub fn is_finite(&self) -> bool {
        self.a.is_finite() && self.w.is_finite()
    }

    /// Whether the action lies inside the codebook's range.
    pub fn in_range(&self) -> bool {
        use crate::codec::{ACCEL_MAX, YAW_RATE_MAX};
        self.a.abs() <= ACCEL_MAX && self.w.abs() <= YAW_RATE_MAX
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn dot(self, o: Vec2) -> f64 {
        self.x * o.x + self.y * o.y
    }

    pub fn cross(self, o: Vec2) -> f64 {
        self.x * o.y - self.y * o.x
    }

    pub fn rotate(self, angle: f64) -> Vec2 {
        let (s, c) = angle.sin_cos();
        Vec2::new(c * self.x - s * self.y, s * self.x + c * self.y)
    }

    pub fn distance(self, o: Vec2) -> f64 {
        (self - o).norm()
    }
}

impl Add for Vec2 {
    type Output = Vec2;
    fn add(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x + o.x, self.y + o.y)
    }
}

impl Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x - o.x, self.y - o.y)
    }
}

impl Mul<f64> for Vec2 {
    type Output = Vec2;
    fn mul(self, k: f64) -> Vec2 {
        Vec2::new(self.x * k, self.y * k)
    }
}

impl Neg for Vec2 {
    type Output = Vec2;
    fn neg(self) -> Vec2 {
        Vec2::new(-self.x, -self.y)
    }
}

/// Planar pose used as a reference frame.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl Pose {
    pub const fn new(x: f64, y: f64, theta: f64) -> Self {
        Self { x, y, theta }
    }

    /// Expresses a world point in this pose's frame: the pose position maps
    /// to the origin and its heading to `+x`.
    pub fn to_local(&self, p: Vec2) -> Vec2 {
        (p - Vec2::new(self.x, self.y)).rotate(-self.theta)
    }

    /// Inverse of [`Pose::to_local`].
    pub fn to_world(&self, p: Vec2) -> Vec2 {
        p.rotate(self.theta) + Vec2::new(self.x, self.y)
    }

    /// Applies this pose as a rigid transform to a state.
    pub fn transform_state(&self, s: &AgentState) -> AgentState {
        let p = self.to_world(s.position());
        AgentState::new(p.x, p.y, wrap(s.theta + self.theta), s.v)
    }
}

fn wrap(theta: f64) -> f64 {
    // (-pi, pi]
    let r = theta.rem_euclid(2.0 * PI);
    if r > PI {
        r - 2.0 * PI
    } else {
        r
    }
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(theta: f64) -> Result<f64> {
    if !theta.is_finite() {
        return Err(Error::NonFinite("angle"));
    }
    Ok(wrap(theta))
}

/// Displacement along and across the initial heading after holding `(a, w)`
/// for `dt` starting at speed `v`.
fn body_displacement(v: f64, a: f64, w: f64, dt: f64) -> (f64, f64) {
    if w.abs() < OMEGA_EPS {
        // Series in w; the leading terms are the straight-line motion.
        let (dt2, dt3) = (dt * dt, dt * dt * dt);
        let (dt4, dt5) = (dt3 * dt, dt3 * dt2);
        let w2 = w * w;
        let fwd = v * dt + 0.5 * a * dt2 - w2 * (v * dt3 / 6.0 + a * dt4 / 8.0);
        let lat = w * (0.5 * v * dt2 + a * dt3 / 3.0) - w2 * w * (v * dt4 / 24.0 + a * dt5 / 30.0);
        (fwd, lat)
    } else {
        let phi = w * dt;
        let (s, c) = phi.sin_cos();
        let half = (0.5 * phi).sin();
        let one_minus_cos = 2.0 * half * half;
        let fwd = (v + a * dt) * s / w - a * one_minus_cos / (w * w);
        let lat = v * one_minus_cos / w + a * (s - phi * c) / (w * w);
        (fwd, lat)
    }
}

/// Advances `s` by `dt` seconds under the constant control `u`.
pub fn ctra_step(s: &AgentState, u: &ControlAction, dt: f64) -> Result<AgentState> {
    s.check()?;
    if !u.is_finite() {
        return Err(Error::NonFinite("control action"));
    }
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::InvalidArgument(format!("dt must be positive, got {dt}")));
    }
    let (fwd, lat) = body_displacement(s.v, u.a, u.w, dt);
    let (sin_t, cos_t) = s.theta.sin_cos();
    let next = AgentState {
        x: s.x + fwd * cos_t - lat * sin_t,
        y: s.y + fwd * sin_t + lat * cos_t,
        theta: wrap(s.theta + u.w * dt),
        v: s.v + u.a * dt,
    };
    next.check()?;
    Ok(next)
}

/// Chains [`ctra_step`] over `actions`; element `i` is the state after
/// applying `actions[..=i]`.
pub fn ctra_rollout(s0: &AgentState, actions: &[ControlAction], dt: f64) -> Result<Vec<AgentState>> {
    if actions.is_empty() {
        return Err(Error::InvalidArgument("empty action sequence".into()));
    }
    let mut out = Vec::with_capacity(actions.len());
    let mut s = *s0;
    for u in actions {
        s = ctra_step(&s, u, dt)?;
        out.push(s);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn wrap_examples() {
        assert_eq!(wrap_angle(0.0).unwrap(), 0.0);
        assert!(wrap_angle(2.0 * PI).unwrap().abs() < 1e-15);
        assert_eq!(wrap_angle(-PI).unwrap(), PI);
        assert_eq!(wrap_angle(PI).unwrap(), PI);
        assert!(wrap_angle(f64::NAN).is_err());
        assert!(wrap_angle(f64::INFINITY).is_err());
    }

    #[test]
    fn step_examples() {
        let s = ctra_step(&AgentState::new(0.0, 0.0, 0.0, 2.0), &ControlAction::new(0.0, 0.0), 0.5).unwrap();
        assert_eq!(s, AgentState::new(1.0, 0.0, 0.0, 2.0));

        let s = ctra_step(
            &AgentState::new(0.0, 0.0, PI / 2.0, 0.0),
            &ControlAction::new(2.0, 0.0),
            0.5,
        )
        .unwrap();
        assert!(close(s.x, 0.0, 1e-15) && close(s.y, 0.25, 1e-15));
        assert_eq!(s.v, 1.0);
        assert_eq!(s.theta, PI / 2.0);

        // Frozen from a 10^6-substep RK4 integration (see tests/kinematics_oracle.rs).
        let s = ctra_step(&AgentState::new(0.0, 0.0, 0.0, 10.0), &ControlAction::new(0.0, 0.5), 0.5).unwrap();
        assert!(close(s.x, 4.948_079_185, 1e-6), "{s:?}");
        assert!(close(s.y, 0.621_751_566, 1e-6), "{s:?}");
        assert_eq!(s.theta, 0.25);
        assert_eq!(s.v, 10.0);
    }

    #[test]
    fn step_rejects_bad_input() {
        let s = AgentState::new(0.0, 0.0, 0.0, 1.0);
        assert!(ctra_step(&s, &ControlAction::new(f64::NAN, 0.0), 0.5).is_err());
        assert!(ctra_step(&AgentState::new(f64::INFINITY, 0.0, 0.0, 0.0), &ControlAction::default(), 0.5).is_err());
        assert!(ctra_step(&s, &ControlAction::default(), 0.0).is_err());
    }

    #[test]
    fn rollout_examples() {
        let s0 = AgentState::new(0.0, 0.0, 0.0, 2.0);
        let xs: Vec<f64> = ctra_rollout(&s0, &[ControlAction::default(); 4], 0.5)
            .unwrap()
            .iter()
            .map(|s| s.x)
            .collect();
        assert_eq!(xs, vec![1.0, 2.0, 3.0, 4.0]);

        let still = AgentState::new(3.0, -1.0, 0.7, 0.0);
        assert_eq!(ctra_rollout(&still, &[ControlAction::default()], 0.5).unwrap(), vec![still]);

        let turn = ctra_rollout(
            &AgentState::new(0.0, 0.0, 0.0, 10.0),
            &[ControlAction::new(0.0, 0.5), ControlAction::new(0.0, -0.5)],
            0.5,
        )
        .unwrap();
        assert_eq!(turn[0].theta, 0.25);
        assert_eq!(turn[1].theta, 0.0);
        assert!(ctra_rollout(&s0, &[], 0.5).is_err());
    }

    #[test]
    fn straight_branch_is_continuous() {
        let s = AgentState::new(1.0, 2.0, 0.3, 8.0);
        let base = ctra_step(&s, &ControlAction::new(1.5, 0.0), 0.5).unwrap();
        for w in [1e-7, -1e-7] {
            let t = ctra_step(&s, &ControlAction::new(1.5, w), 0.5).unwrap();
            assert!(base.position().distance(t.position()) < 1e-6);
        }
        // Both sides of the branch threshold.
        let below = ctra_step(&s, &ControlAction::new(1.5, OMEGA_EPS * (1.0 - 1e-9)), 0.5).unwrap();
        let above = ctra_step(&s, &ControlAction::new(1.5, OMEGA_EPS), 0.5).unwrap();
        assert!(below.position().distance(above.position()) < 1e-7);
    }

    fn state_strategy() -> impl Strategy<Value = (AgentState, ControlAction)> {
        (
            -100.0..100.0f64,
            -100.0..100.0f64,
            -PI..PI,
            -5.0..20.0f64,
            -5.0..5.0f64,
            -1.5..1.5f64,
        )
            .prop_map(|(x, y, t, v, a, w)| (AgentState::new(x, y, t, v), ControlAction::new(a, w)))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn flow_property((s, u) in state_strategy()) {
            let full = ctra_step(&s, &u, 0.5).unwrap();
            let half = ctra_step(&ctra_step(&s, &u, 0.25).unwrap(), &u, 0.25).unwrap();
            prop_assert!((full.x - half.x).abs() < 1e-9);
            prop_assert!((full.y - half.y).abs() < 1e-9);
            prop_assert!(wrap(full.theta - half.theta).abs() < 1e-9);
            prop_assert!((full.v - half.v).abs() < 1e-9);
        }

        #[test]
        fn speed_and_heading_updates((s, u) in state_strategy()) {
            let n = ctra_step(&s, &u, 0.5).unwrap();
            prop_assert!((n.v - s.v - u.a * 0.5).abs() < 1e-12);
            prop_assert!(wrap(n.theta - s.theta - u.w * 0.5).abs() < 1e-12);
            prop_assert!(n.theta > -PI && n.theta <= PI);
        }

        #[test]
        fn se2_equivariance((s, u) in state_strategy(), gx in -50.0..50.0f64, gy in -50.0..50.0f64, gt in -PI..PI) {
            let g = Pose::new(gx, gy, gt);
            let a = g.transform_state(&ctra_step(&s, &u, 0.5).unwrap());
            let b = ctra_step(&g.transform_state(&s), &u, 0.5).unwrap();
            prop_assert!((a.x - b.x).abs() < 1e-9 && (a.y - b.y).abs() < 1e-9);
            prop_assert!(wrap(a.theta - b.theta).abs() < 1e-9);
            prop_assert_eq!(a.v, b.v);
        }
    }
}
