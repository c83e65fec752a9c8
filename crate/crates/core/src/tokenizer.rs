//! Inverse kinematic transformation: recovers the token sequence that best
//! reproduces a logged trajectory.
//!
//! Each step solves a `k`-step window of continuous actions by damped
//! Gauss-Newton, keeps only the first action, snaps it to the codebook and
//! propagates the controlled state with the snapped action. The next window
//! starts from that propagated state rather than from the log, so
//! quantization error is corrected instead of accumulated.

use serde::{Deserialize, Serialize};

use crate::codec::{dequantize, nearest_token, ActionToken, ACCEL_MAX, YAW_RATE_MAX};
use crate::error::{Error, Result};
use crate::kinematics::{ctra_step, wrap_angle, AgentState, ControlAction};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenizerConfig {
    /// Rolling window length in steps.
    pub window: usize,
    pub dt: f64,
    /// Metres per radian of heading error.
    pub heading_weight: f64,
    /// Metres per (m/s) of speed error.
    pub speed_weight: f64,
    /// Central difference step for the Jacobian.
    pub fd_step: f64,
    pub initial_damping: f64,
    pub max_iters: usize,
    /// Relative cost decrease below which iteration stops.
    pub tol: f64,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            window: 3,
            dt: 0.5,
            heading_weight: 2.0,
            speed_weight: 0.5,
            fd_step: 1e-5,
            initial_damping: 1e-3,
            max_iters: 50,
            tol: 1e-10,
        }
    }
}

/// Tokenizer output for one track.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenizedTrack {
    pub tokens: Vec<ActionToken>,
    /// `tokens.len() + 1` states; `ctl_states[0]` is the logged start.
    pub ctl_states: Vec<AgentState>,
    /// Weighted squared error between `ctl_states[t + 1]` and the log.
    pub residuals: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowSolution {
    pub actions: Vec<ControlAction>,
    pub cost: f64,
    pub iterations: usize,
}

/// Finite-difference warm start between two consecutive states.
pub fn init_estimate(s0: &AgentState, s1: &AgentState, dt: f64) -> ControlAction {
    let dtheta = wrap_angle(s1.theta - s0.theta).unwrap_or(0.0);
    ControlAction::new((s1.v - s0.v) / dt, dtheta / dt)
}

fn clamp_action(u: ControlAction) -> ControlAction {
    ControlAction::new(u.a.clamp(-ACCEL_MAX, ACCEL_MAX), u.w.clamp(-YAW_RATE_MAX, YAW_RATE_MAX))
}

fn state_residual(ctl: &AgentState, target: &AgentState, cfg: &TokenizerConfig, out: &mut Vec<f64>) {
    let dtheta = wrap_angle(ctl.theta - target.theta).unwrap_or(f64::NAN);
    out.push(ctl.x - target.x);
    out.push(ctl.y - target.y);
    out.push(cfg.heading_weight * dtheta);
    out.push(cfg.speed_weight * (ctl.v - target.v));
}

fn weighted_error(ctl: &AgentState, target: &AgentState, cfg: &TokenizerConfig) -> f64 {
    let mut r = Vec::with_capacity(4);
    state_residual(ctl, target, cfg, &mut r);
    r.iter().map(|x| x * x).sum()
}

/// Residual vector of a window; masked targets contribute nothing.
fn window_residuals(
    s_init: &AgentState,
    actions: &[ControlAction],
    targets: &[AgentState],
    valid: Option<&[bool]>,
    cfg: &TokenizerConfig,
) -> Vec<f64> {
    let mut out = Vec::with_capacity(4 * actions.len());
    let mut s = *s_init;
    for (i, (u, target)) in actions.iter().zip(targets).enumerate() {
        s = match ctra_step(&s, u, cfg.dt) {
            Ok(n) => n,
            Err(_) => {
                out.extend([f64::NAN; 4]);
                continue;
            }
        };
        if valid.map_or(true, |m| m[i]) {
            state_residual(&s, target, cfg, &mut out);
        } else {
            out.extend([0.0; 4]);
        }
    }
    out
}

/// Weighted squared tracking cost of applying `actions` from `s_init`
/// against `targets`.
pub fn window_cost(
    s_init: &AgentState,
    actions: &[ControlAction],
    targets: &[AgentState],
    cfg: &TokenizerConfig,
) -> Result<f64> {
    window_cost_masked(s_init, actions, targets, None, cfg)
}

pub fn window_cost_masked(
    s_init: &AgentState,
    actions: &[ControlAction],
    targets: &[AgentState],
    valid: Option<&[bool]>,
    cfg: &TokenizerConfig,
) -> Result<f64> {
    check_window(actions, targets, valid)?;
    Ok(window_residuals(s_init, actions, targets, valid, cfg)
        .iter()
        .map(|r| r * r)
        .sum())
}

fn check_window(actions: &[ControlAction], targets: &[AgentState], valid: Option<&[bool]>) -> Result<()> {
    if actions.is_empty() || actions.len() != targets.len() {
        return Err(Error::InvalidArgument(format!(
            "window needs k >= 1 matching actions and targets, got {} and {}",
            actions.len(),
            targets.len()
        )));
    }
    if let Some(m) = valid {
        if m.len() != targets.len() {
            return Err(Error::InvalidArgument("valid mask length mismatch".into()));
        }
    }
    Ok(())
}

/// Solves `A x = b` for a small dense symmetric system by Gaussian
/// elimination with partial pivoting.
fn solve_dense(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[pivot][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            if f != 0.0 {
                for c in col..n {
                    a[row][c] -= f * a[col][c];
                }
                b[row] -= f * b[col];
            }
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|c| a[row][c] * x[c]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    Some(x)
}

fn pack(actions: &[ControlAction]) -> Vec<f64> {
    actions.iter().flat_map(|u| [u.a, u.w]).collect()
}

fn unpack(p: &[f64]) -> Vec<ControlAction> {
    p.chunks(2).map(|c| clamp_action(ControlAction::new(c[0], c[1]))).collect()
}

/// Damped Gauss-Newton over a window of continuous actions, box-constrained
/// to the codebook range. Returns the best iterate found.
pub fn solve_window(
    s_init: &AgentState,
    targets: &[AgentState],
    u_init: &[ControlAction],
    cfg: &TokenizerConfig,
) -> Result<WindowSolution> {
    solve_window_masked(s_init, targets, None, u_init, cfg)
}

pub fn solve_window_masked(
    s_init: &AgentState,
    targets: &[AgentState],
    valid: Option<&[bool]>,
    u_init: &[ControlAction],
    cfg: &TokenizerConfig,
) -> Result<WindowSolution> {
    check_window(u_init, targets, valid)?;
    let residuals = |p: &[f64]| window_residuals(s_init, &unpack(p), targets, valid, cfg);
    let cost_of = |r: &[f64]| r.iter().map(|x| x * x).sum::<f64>();

    let mut params = pack(&unpack(&pack(u_init)));
    let mut r = residuals(&params);
    let mut cost = cost_of(&r);
    if cost.is_nan() {
        return Err(Error::NanCost);
    }
    let n = params.len();
    let mut lambda = cfg.initial_damping;
    let mut iterations = 0;

    while iterations < cfg.max_iters && cost > 0.0 {
        iterations += 1;
        // Central-difference Jacobian, one column per parameter.
        let m = r.len();
        let mut jac = vec![vec![0.0; n]; m];
        for j in 0..n {
            let mut plus = params.clone();
            let mut minus = params.clone();
            plus[j] += cfg.fd_step;
            minus[j] -= cfg.fd_step;
            let (rp, rm) = (residuals(&plus), residuals(&minus));
            for i in 0..m {
                jac[i][j] = (rp[i] - rm[i]) / (2.0 * cfg.fd_step);
            }
        }
        let mut jtj = vec![vec![0.0; n]; n];
        let mut jtr = vec![0.0; n];
        for i in 0..m {
            for a in 0..n {
                jtr[a] += jac[i][a] * r[i];
                for b in 0..n {
                    jtj[a][b] += jac[i][a] * jac[i][b];
                }
            }
        }

        let mut accepted = false;
        while lambda < 1e12 {
            let mut damped = jtj.clone();
            for (i, row) in damped.iter_mut().enumerate() {
                row[i] += lambda;
            }
            let Some(delta) = solve_dense(damped, jtr.iter().map(|g| -g).collect()) else {
                lambda *= 10.0;
                continue;
            };
            let candidate = pack(&unpack(
                &params.iter().zip(&delta).map(|(p, d)| p + d).collect::<Vec<_>>(),
            ));
            let r_new = residuals(&candidate);
            let c_new = cost_of(&r_new);
            if c_new.is_finite() && c_new < cost {
                let rel = (cost - c_new) / cost;
                params = candidate;
                r = r_new;
                cost = c_new;
                lambda = (lambda / 10.0).max(1e-12);
                accepted = true;
                if rel < cfg.tol {
                    return Ok(WindowSolution { actions: unpack(&params), cost, iterations });
                }
                break;
            }
            lambda *= 10.0;
        }
        if !accepted {
            break;
        }
    }
    Ok(WindowSolution { actions: unpack(&params), cost, iterations })
}

/// Tokenizes a fully observed track.
pub fn tokenize_track(states: &[AgentState], cfg: &TokenizerConfig) -> Result<TokenizedTrack> {
    tokenize_track_masked(states, None, cfg)
}

/// Tokenizes a track whose observations may have gaps. Masked steps are
/// skipped in the cost but still receive a token.
pub fn tokenize_track_masked(
    states: &[AgentState],
    valid: Option<&[bool]>,
    cfg: &TokenizerConfig,
) -> Result<TokenizedTrack> {
    if states.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "tokenizing needs at least 2 states, got {}",
            states.len()
        )));
    }
    if cfg.window == 0 {
        return Err(Error::InvalidArgument("window length must be >= 1".into()));
    }
    if let Some(m) = valid {
        if m.len() != states.len() {
            return Err(Error::InvalidArgument("valid mask length mismatch".into()));
        }
    }
    let is_valid = |i: usize| valid.map_or(true, |m| m[i]);
    let steps = states.len() - 1;
    let mut tokens = Vec::with_capacity(steps);
    let mut ctl_states = Vec::with_capacity(states.len());
    let mut residuals = Vec::with_capacity(steps);
    let mut ctl = states[0];
    ctl_states.push(ctl);
    let mut last = ControlAction::default();

    for t in 0..steps {
        let k = cfg.window.min(steps - t);
        let targets = &states[t + 1..t + 1 + k];
        let mask: Option<Vec<bool>> = valid.map(|m| m[t + 1..t + 1 + k].to_vec());
        let mut u_init = Vec::with_capacity(k);
        for tau in 0..k {
            let from = if tau == 0 { ctl } else { states[t + tau] };
            let from_ok = tau == 0 || is_valid(t + tau);
            if from_ok && is_valid(t + tau + 1) {
                u_init.push(clamp_action(init_estimate(&from, &states[t + tau + 1], cfg.dt)));
            } else {
                u_init.push(u_init.last().copied().unwrap_or(last));
            }
        }
        let sol = solve_window_masked(&ctl, targets, mask.as_deref(), &u_init, cfg)?;
        let token = nearest_token(&sol.actions[0])?;
        ctl = ctra_step(&ctl, &dequantize(token), cfg.dt)?;
        last = dequantize(token);
        residuals.push(if is_valid(t + 1) {
            weighted_error(&ctl, &states[t + 1], cfg)
        } else {
            0.0
        });
        tokens.push(token);
        ctl_states.push(ctl);
    }
    Ok(TokenizedTrack { tokens, ctl_states, residuals })
}
