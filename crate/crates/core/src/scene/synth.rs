//! Synthetic scenario generator.
//!
//! Tracks come from scripted controllers (pure-pursuit lane following and a
//! time-headway car-following rule) rolled forward with the CTRA model. With
//! `quantize_actions` on, every commanded action is snapped to the codebook
//! before it is applied, so the ground-truth tokens are stored alongside the
//! tracks and reproduce them bit for bit.

use std::f64::consts::{FRAC_PI_2, PI};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AgentKind, AgentMeta, LightState, MapPolyline, PolylineKind, Scenario, TrafficLight, Track};
use crate::codec::{dequantize, quantize, ActionToken, YAW_RATE_BIN, YAW_RATE_MAX};
use crate::error::{Error, Result};
use crate::kinematics::{ctra_step, AgentState, ControlAction, Pose, Vec2};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Archetype {
    StraightFollow,
    CurveFollow,
    IntersectionTurn,
    CarFollowing,
}

impl Archetype {
    pub const ALL: [Archetype; 4] = [
        Archetype::StraightFollow,
        Archetype::CurveFollow,
        Archetype::IntersectionTurn,
        Archetype::CarFollowing,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Archetype::StraightFollow => "straight-follow",
            Archetype::CurveFollow => "curve-follow",
            Archetype::IntersectionTurn => "intersection-turn",
            Archetype::CarFollowing => "car-following",
        }
    }
}

/// Generator settings, readable from a flat `key = value` file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub straight_follow: usize,
    pub curve_follow: usize,
    pub intersection_turn: usize,
    pub car_following: usize,
    pub dt: f64,
    pub history_len: usize,
    pub future_len: usize,
    pub speed_min: f64,
    pub speed_max: f64,
    /// Snap commanded actions to the codebook before applying them.
    pub quantize_actions: bool,
    /// Apply a random rigid motion to each scene.
    pub randomize_pose: bool,
    /// Desired time headway of the car-following rule (s).
    pub headway: f64,
    /// Initial gap as a multiple of the desired gap.
    pub initial_gap_factor: f64,
    /// Strongest deceleration the scripted leader uses (m/s^2).
    pub leader_brake_max: f64,
    /// Lateral gap (m) between a straight-follow ego and truck convoys
    /// on both neighboring lanes, moving at the ego's speed. 0 disables.
    #[serde(default)]
    pub flank_clearance: f64,
    /// Car-following scenes get a scripted follower behind the ego at this
    /// multiple of its desired gap. 0 disables.
    #[serde(default)]
    pub tailgate_gap_factor: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            straight_follow: 4,
            curve_follow: 4,
            intersection_turn: 4,
            car_following: 4,
            dt: 0.5,
            history_len: 2,
            future_len: 16,
            speed_min: 3.0,
            speed_max: 12.0,
            quantize_actions: true,
            randomize_pose: true,
            headway: 1.5,
            initial_gap_factor: 1.0,
            leader_brake_max: 3.0,
            flank_clearance: 0.0,
            tailgate_gap_factor: 0.0,
        }
    }
}

impl GenConfig {
    /// Default settings with every archetype count set to zero.
    pub fn empty() -> Self {
        Self {
            straight_follow: 0,
            curve_follow: 0,
            intersection_turn: 0,
            car_following: 0,
            ..Self::default()
        }
    }

    pub fn count(&self, a: Archetype) -> usize {
        match a {
            Archetype::StraightFollow => self.straight_follow,
            Archetype::CurveFollow => self.curve_follow,
            Archetype::IntersectionTurn => self.intersection_turn,
            Archetype::CarFollowing => self.car_following,
        }
    }

    pub fn total(&self) -> usize {
        Archetype::ALL.iter().map(|a| self.count(*a)).sum()
    }

    /// Parses `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for raw in text.lines() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Config {
                key: line.to_string(),
                msg: "expected key = value".into(),
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value.parse().map_err(|_| Error::Config {
                key: key.to_string(),
                msg: format!("cannot parse `{value}`"),
            })
        }
        match key {
            "straight_follow" => self.straight_follow = num(key, value)?,
            "curve_follow" => self.curve_follow = num(key, value)?,
            "intersection_turn" => self.intersection_turn = num(key, value)?,
            "car_following" => self.car_following = num(key, value)?,
            "dt" => self.dt = num(key, value)?,
            "history_len" => self.history_len = num(key, value)?,
            "future_len" => self.future_len = num(key, value)?,
            "speed_min" => self.speed_min = num(key, value)?,
            "speed_max" => self.speed_max = num(key, value)?,
            "quantize_actions" => self.quantize_actions = num(key, value)?,
            "randomize_pose" => self.randomize_pose = num(key, value)?,
            "headway" => self.headway = num(key, value)?,
            "initial_gap_factor" => self.initial_gap_factor = num(key, value)?,
            "leader_brake_max" => self.leader_brake_max = num(key, value)?,
            "flank_clearance" => self.flank_clearance = num(key, value)?,
            "tailgate_gap_factor" => self.tailgate_gap_factor = num(key, value)?,
            _ => {
                return Err(Error::Config {
                    key: key.to_string(),
                    msg: "unknown key".into(),
                })
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| Err(Error::Config { key: key.into(), msg: msg.into() });
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad("dt", "must be positive");
        }
        if self.future_len == 0 {
            return bad("future_len", "must be at least 1");
        }
        if !(self.speed_min > 0.0 && self.speed_min <= self.speed_max && self.speed_max <= 30.0) {
            return bad("speed_min", "need 0 < speed_min <= speed_max <= 30");
        }
        if !(self.headway > 0.0) {
            return bad("headway", "must be positive");
        }
        if !(self.initial_gap_factor > 0.0) {
            return bad("initial_gap_factor", "must be positive");
        }
        if !(self.leader_brake_max > 0.0 && self.leader_brake_max <= 5.0) {
            return bad("leader_brake_max", "must be in (0, 5]");
        }
        if !(self.flank_clearance >= 0.0 && self.flank_clearance.is_finite()) {
            return bad("flank_clearance", "must be non-negative");
        }
        if !(self.tailgate_gap_factor >= 0.0 && self.tailgate_gap_factor.is_finite()) {
            return bad("tailgate_gap_factor", "must be non-negative");
        }
        Ok(())
    }

    /// Flat `key = value` rendering accepted by [`GenConfig::parse`].
    pub fn to_kv(&self) -> String {
        format!(
            "straight_follow = {}\ncurve_follow = {}\nintersection_turn = {}\ncar_following = {}\n\
             dt = {}\nhistory_len = {}\nfuture_len = {}\nspeed_min = {}\nspeed_max = {}\n\
             quantize_actions = {}\nrandomize_pose = {}\nheadway = {}\ninitial_gap_factor = {}\n\
             leader_brake_max = {}\nflank_clearance = {}\ntailgate_gap_factor = {}\n",
            self.straight_follow,
            self.curve_follow,
            self.intersection_turn,
            self.car_following,
            self.dt,
            self.history_len,
            self.future_len,
            self.speed_min,
            self.speed_max,
            self.quantize_actions,
            self.randomize_pose,
            self.headway,
            self.initial_gap_factor,
            self.leader_brake_max,
            self.flank_clearance,
            self.tailgate_gap_factor,
        )
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generates `config.total()` scenarios, archetype by archetype. Each scene
/// has its own RNG stream derived from `(seed, archetype, index)`.
pub fn generate_synthetic(config: &GenConfig, seed: u64) -> Result<Vec<Scenario>> {
    config.validate()?;
    let mut out = Vec::with_capacity(config.total());
    for (ai, archetype) in Archetype::ALL.iter().enumerate() {
        for i in 0..config.count(*archetype) {
            let stream = splitmix(splitmix(seed) ^ ((ai as u64) << 48) ^ i as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(stream);
            let id = format!("{}-{:05}", archetype.name(), i);
            out.push(generate_one(*archetype, id, config, &mut rng)?);
        }
    }
    Ok(out)
}

/// Polyline with points every `step` metres along a parametric curve.
fn sample_curve(length: f64, step: f64, f: impl Fn(f64) -> Vec2) -> Vec<Vec2> {
    let n = (length / step).ceil().max(1.0) as usize;
    (0..=n).map(|i| f(length * i as f64 / n as f64)).collect()
}

fn lane(points: Vec<Vec2>) -> MapPolyline {
    MapPolyline { kind: PolylineKind::LaneCenter, points }
}

/// Arc starting at `start` with heading `heading`, signed curvature
/// `1 / radius` (positive turns left).
fn arc(start: Vec2, heading: f64, radius: f64, left: bool, length: f64) -> Vec<Vec2> {
    let sign = if left { 1.0 } else { -1.0 };
    let center = start + Vec2::new(0.0, sign * radius).rotate(heading);
    let start_angle = heading - sign * FRAC_PI_2;
    sample_curve(length, 2.0, |s| {
        let ang = start_angle + sign * s / radius;
        center + Vec2::new(radius * ang.cos(), radius * ang.sin())
    })
}

/// Lookahead-point pure pursuit: returns the yaw rate that steers onto the
/// arc through the point `lookahead` metres ahead along `path`.
fn pure_pursuit(state: &AgentState, path: &[Vec2], lookahead: f64) -> f64 {
    let pos = state.position();
    // Projection onto the path.
    let mut best = (f64::INFINITY, 0usize, 0.0f64);
    for (i, w) in path.windows(2).enumerate() {
        let d = w[1] - w[0];
        let len2 = d.dot(d);
        let t = if len2 > 0.0 { ((pos - w[0]).dot(d) / len2).clamp(0.0, 1.0) } else { 0.0 };
        let dist = (w[0] + d * t).distance(pos);
        if dist < best.0 {
            best = (dist, i, t);
        }
    }
    let (_, mut seg, t) = best;
    let mut remaining = lookahead;
    let mut from = path[seg] + (path[seg + 1] - path[seg]) * t;
    let target = loop {
        let to = path[seg + 1];
        let len = from.distance(to);
        if len >= remaining {
            break from + (to - from) * (remaining / len);
        }
        remaining -= len;
        seg += 1;
        if seg + 1 >= path.len() {
            // Extend straight past the end of the path.
            let dir = path[path.len() - 1] - path[path.len() - 2];
            break to + dir * (remaining / dir.norm());
        }
        from = to;
    };
    let local = state.pose().to_local(target);
    let l2 = local.dot(local);
    if l2 <= 1e-12 {
        return 0.0;
    }
    state.v * 2.0 * local.y / l2
}

/// Commanded action -> (applied action, token if quantized).
fn apply(u: ControlAction, quantized: bool) -> Result<(ControlAction, ActionToken)> {
    let token = quantize(&u)?;
    if quantized {
        Ok((dequantize(token), token))
    } else {
        let clamped = ControlAction::new(u.a.clamp(-5.0, 5.0), u.w.clamp(-YAW_RATE_MAX, YAW_RATE_MAX));
        Ok((clamped, token))
    }
}

/// Acceleration that never drives the speed below zero within one step.
fn brake_floor(a: f64, v: f64, dt: f64, quantized: bool) -> f64 {
    let floor = -v.max(0.0) / dt;
    if a >= floor {
        return a;
    }
    if quantized {
        // Smallest-magnitude braking bin whose center keeps v >= 0.
        let mut t = quantize(&ControlAction::new(floor, 0.0)).map(|t| t.ia()).unwrap_or(31);
        while dequantize(ActionToken::from_indices(t, 31).unwrap()).a < floor && t < 31 {
            t += 1;
        }
        dequantize(ActionToken::from_indices(t, 31).unwrap()).a
    } else {
        floor
    }
}

struct Agent {
    meta: AgentMeta,
    path: Vec<Vec2>,
    states: Vec<AgentState>,
    tokens: Vec<ActionToken>,
}

const TRUCK_LENGTH: f64 = 16.5;
const TRUCK_WIDTH: f64 = 2.5;
const CONVOY_GAP: f64 = 2.0;
const CONVOY_TRUCKS: usize = 4;

fn vehicle(id: u32, rng: &mut ChaCha8Rng) -> AgentMeta {
    AgentMeta {
        id,
        kind: AgentKind::Vehicle,
        length: rng.random_range(4.0..5.0),
        width: rng.random_range(1.8..2.1),
    }
}

fn random_pose(cfg: &GenConfig, rng: &mut ChaCha8Rng) -> Pose {
    if cfg.randomize_pose {
        Pose::new(rng.random_range(-500.0..500.0), rng.random_range(-500.0..500.0), rng.random_range(-PI..PI))
    } else {
        Pose::default()
    }
}

fn sample_speed(cfg: &GenConfig, rng: &mut ChaCha8Rng) -> f64 {
    rng.random_range(cfg.speed_min..=cfg.speed_max)
}

fn generate_one(archetype: Archetype, id: String, cfg: &GenConfig, rng: &mut ChaCha8Rng) -> Result<Scenario> {
    let g = random_pose(cfg, rng);
    let steps = cfg.history_len + 1 + cfg.future_len;
    let q = cfg.quantize_actions;
    let mut polylines = Vec::new();
    let mut lights = Vec::new();
    let mut agents: Vec<Agent> = Vec::new();
    let mut cross_stop = Vec2::default();

    match archetype {
        Archetype::StraightFollow => {
            let v0 = sample_speed(cfg, rng);
            let len = v0 * cfg.dt * steps as f64 + 60.0;
            let path = sample_curve(len + 20.0, 2.0, |s| Vec2::new(s - 20.0, 0.0));
            polylines.push(lane(path.clone()));
            let ego = vehicle(0, rng);
            if cfg.flank_clearance > 0.0 {
                // Convoys long enough that speed changes alone never clear them.
                let offset = 0.5 * ego.width + cfg.flank_clearance + 0.5 * TRUCK_WIDTH;
                let mut id = 1;
                for side in [1.0, -1.0] {
                    let y = side * offset;
                    let flank = sample_curve(len + 80.0, 2.0, |s| Vec2::new(s - 60.0, y));
                    polylines.push(lane(flank.clone()));
                    for j in 0..CONVOY_TRUCKS {
                        let x = (j as f64 - 0.5 * (CONVOY_TRUCKS - 1) as f64) * (TRUCK_LENGTH + CONVOY_GAP);
                        agents.push(Agent {
                            meta: AgentMeta { id, kind: AgentKind::Vehicle, length: TRUCK_LENGTH, width: TRUCK_WIDTH },
                            path: flank.clone(),
                            states: vec![AgentState::new(x, y, 0.0, v0)],
                            tokens: vec![],
                        });
                        id += 1;
                    }
                }
            }
            agents.insert(0, Agent {
                meta: ego,
                path,
                states: vec![AgentState::new(0.0, 0.0, 0.0, v0)],
                tokens: vec![],
            });
        }
        Archetype::CurveFollow => {
            let v0 = sample_speed(cfg, rng);
            let left = rng.random_bool(0.5);
            let (radius, speed) = if q {
                // Yaw rate on a codebook center keeps the agent on the arc.
                let max_bins = ((v0 / 12.0) / YAW_RATE_BIN).floor().max(1.0) as usize;
                let bins = rng.random_range(1..=max_bins.min(5));
                (v0 / (bins as f64 * YAW_RATE_BIN), v0)
            } else {
                (rng.random_range(20.0..120.0), v0)
            };
            let travel = speed * cfg.dt * steps as f64 + 40.0;
            let lead_in = 10.0;
            let mut path = sample_curve(lead_in, 2.0, |s| Vec2::new(s - lead_in, 0.0));
            path.pop();
            path.extend(arc(Vec2::new(0.0, 0.0), 0.0, radius, left, travel.min(1.8 * PI * radius)));
            polylines.push(lane(path.clone()));
            agents.push(Agent {
                meta: vehicle(0, rng),
                path,
                states: vec![AgentState::new(0.0, 0.0, 0.0, speed)],
                tokens: vec![],
            });
        }
        Archetype::IntersectionTurn => {
            let v0 = rng.random_range(cfg.speed_min.min(8.0)..=cfg.speed_max.min(8.0));
            let maneuver = rng.random_range(0..3);
            let approach = v0 * cfg.dt * cfg.history_len as f64 + 4.0 * v0;
            let start = Vec2::new(-approach, 0.0);
            let exit_len = 40.0;
            // Turn radius with a codebook-center yaw rate at v0.
            let bins = ((v0 / 12.0) / YAW_RATE_BIN).round().max(2.0);
            let radius = v0 / (bins * YAW_RATE_BIN);
            let approach_pts = sample_curve(approach + 10.0, 2.0, |s| Vec2::new(s - approach - 10.0, 0.0));
            let straight = sample_curve(exit_len + 2.0 * radius, 2.0, |s| Vec2::new(s, 0.0));
            let turn = |left: bool| {
                let mut pts = arc(Vec2::new(0.0, 0.0), 0.0, radius, left, FRAC_PI_2 * radius);
                let end = *pts.last().unwrap();
                let sign = if left { 1.0 } else { -1.0 };
                pts.pop();
                pts.extend(sample_curve(exit_len, 2.0, |s| end + Vec2::new(0.0, sign * s)));
                pts
            };
            let left_pts = turn(true);
            let right_pts = turn(false);
            polylines.push(lane(approach_pts.clone()));
            polylines.push(lane(straight.clone()));
            polylines.push(lane(left_pts.clone()));
            polylines.push(lane(right_pts.clone()));
            polylines.push(MapPolyline {
                kind: PolylineKind::StopLine,
                points: vec![Vec2::new(-4.0, -2.0), Vec2::new(-4.0, 2.0)],
            });
            // Cross street with a stop line held at red.
            let cross_x = radius + 3.0;
            let cross = sample_curve(80.0, 2.0, |s| Vec2::new(cross_x, s - 60.0));
            polylines.push(lane(cross.clone()));
            polylines.push(MapPolyline {
                kind: PolylineKind::StopLine,
                points: vec![Vec2::new(cross_x - 2.0, -8.0), Vec2::new(cross_x + 2.0, -8.0)],
            });
            polylines.push(MapPolyline {
                kind: PolylineKind::Crosswalk,
                points: vec![
                    Vec2::new(cross_x - 3.0, -6.0),
                    Vec2::new(cross_x + 3.0, -6.0),
                    Vec2::new(cross_x + 3.0, -3.0),
                    Vec2::new(cross_x - 3.0, -3.0),
                    Vec2::new(cross_x - 3.0, -6.0),
                ],
            });
            lights.push(TrafficLight { stop_point: Vec2::new(-4.0, 0.0), states: vec![LightState::Green; steps] });
            lights.push(TrafficLight { stop_point: Vec2::new(cross_x, -8.0), states: vec![LightState::Red; steps] });
            cross_stop = Vec2::new(cross_x, -8.0);

            let mut path = approach_pts;
            path.pop();
            path.extend(match maneuver {
                0 => straight,
                1 => left_pts,
                _ => right_pts,
            });
            agents.push(Agent {
                meta: vehicle(0, rng),
                path,
                states: vec![AgentState::new(start.x, start.y, 0.0, v0)],
                tokens: vec![],
            });
            let vc = rng.random_range(2.0..6.0);
            let y0 = -8.0 - rng.random_range(10.0..30.0);
            agents.push(Agent {
                meta: vehicle(1, rng),
                path: cross,
                states: vec![AgentState::new(cross_x, y0, FRAC_PI_2, vc)],
                tokens: vec![],
            });
        }
        Archetype::CarFollowing => {
            let v0 = sample_speed(cfg, rng);
            let lead_v = (v0 + rng.random_range(-2.0..2.0)).max(1.0);
            let follower = vehicle(0, rng);
            let leader = vehicle(1, rng);
            let desired = 2.0 + cfg.headway * v0;
            let gap = cfg.initial_gap_factor * desired * rng.random_range(0.9..1.3);
            let lead_x = gap + 0.5 * (follower.length + leader.length);
            let len = 12.0 * steps as f64 * cfg.dt + lead_x + 60.0;
            let back = if cfg.tailgate_gap_factor > 0.0 { 60.0 } else { 20.0 };
            let path = sample_curve(len + back, 2.0, |s| Vec2::new(s - back, 0.0));
            polylines.push(lane(path.clone()));
            agents.push(Agent {
                meta: follower,
                path: path.clone(),
                states: vec![AgentState::new(0.0, 0.0, 0.0, v0)],
                tokens: vec![],
            });
            if cfg.tailgate_gap_factor > 0.0 {
                let tail = vehicle(2, rng);
                let gap = cfg.tailgate_gap_factor * desired * rng.random_range(0.9..1.3);
                let tail_x = -(gap + 0.5 * (follower.length + tail.length));
                agents.push(Agent {
                    meta: tail,
                    path: path.clone(),
                    states: vec![AgentState::new(tail_x, 0.0, 0.0, v0)],
                    tokens: vec![],
                });
            }
            agents.insert(1, Agent {
                meta: leader,
                path,
                states: vec![AgentState::new(lead_x, 0.0, 0.0, lead_v)],
                tokens: vec![],
            });
        }
    }

    // Move map and initial states into the world frame; everything after
    // is simulated there so logged states chain exactly.
    for p in &mut polylines {
        for pt in &mut p.points {
            *pt = g.to_world(*pt);
        }
    }
    for l in &mut lights {
        l.stop_point = g.to_world(l.stop_point);
    }
    for a in &mut agents {
        for pt in &mut a.path {
            *pt = g.to_world(*pt);
        }
        a.states[0] = g.transform_state(&a.states[0]);
    }

    // Leader script for car-following: cruise, then brake for a while.
    let brake_plan = if archetype == Archetype::CarFollowing {
        let start = rng.random_range(1..steps - 4);
        let dur = rng.random_range(2..=6);
        let decel = rng.random_range(0.5..=cfg.leader_brake_max);
        Some((start, dur, decel))
    } else {
        None
    };
    let cross_stop = g.to_world(cross_stop);
    // Smooth speed modulation used when actions are left continuous.
    let wiggle = (rng.random_range(0.1..0.6), rng.random_range(0.0..2.0 * PI));

    for t in 0..steps - 1 {
        let world: Vec<AgentState> = agents.iter().map(|a| a.states[t]).collect();
        let mut commands = Vec::with_capacity(agents.len());
        for (i, a) in agents.iter().enumerate() {
            let s = world[i];
            let w = pure_pursuit(&s, &a.path, (s.v.abs() * 1.0).clamp(4.0, 15.0));
            let accel = match (archetype, i) {
                (Archetype::CarFollowing, 0) => {
                    let lead = &agents[1];
                    following_accel(&s, &a.meta, &world[1], &lead.meta, cfg.headway)
                }
                (Archetype::CarFollowing, 2) => following_accel(&s, &a.meta, &world[0], &agents[0].meta, cfg.headway),
                (Archetype::CarFollowing, _) => match brake_plan {
                    Some((start, dur, decel)) if t >= start && t < start + dur => -decel,
                    _ => 0.0,
                },
                (Archetype::IntersectionTurn, 1) => {
                    // Stop at the red light's stop line.
                    let stop = s.pose().to_local(cross_stop).x - 0.5 * a.meta.length - 1.0;
                    stopping_accel(s.v, stop)
                }
                _ if !q => wiggle.0 * (0.35 * t as f64 + wiggle.1).sin(),
                _ => 0.0,
            };
            let accel = brake_floor(accel, s.v, cfg.dt, q);
            commands.push(ControlAction::new(accel, w));
        }
        for (a, u) in agents.iter_mut().zip(commands) {
            let (applied, token) = apply(u, q)?;
            let next = ctra_step(&a.states[t], &applied, cfg.dt)?;
            a.states.push(next);
            a.tokens.push(token);
        }
    }

    let tracks = agents
        .into_iter()
        .map(|a| Track {
            meta: a.meta,
            valid: vec![true; a.states.len()],
            states: a.states,
            tokens: if q { Some(a.tokens) } else { None },
        })
        .collect();
    let scenario = Scenario {
        id,
        dt: cfg.dt,
        history_len: cfg.history_len,
        future_len: cfg.future_len,
        polylines,
        tracks,
        lights,
        ego: Some(0),
    };
    scenario.validate()?;
    Ok(scenario)
}

/// Constant deceleration that stops within `distance`, zero when far.
fn stopping_accel(v: f64, distance: f64) -> f64 {
    if v <= 0.0 {
        return 0.0;
    }
    if distance <= 0.5 {
        return -5.0;
    }
    let needed = v * v / (2.0 * distance);
    if needed > 1.0 {
        -needed
    } else {
        0.0
    }
}

/// Bumper-to-bumper time-headway rule with coarse acceleration levels.
fn following_accel(s: &AgentState, meta: &AgentMeta, lead: &AgentState, lead_meta: &AgentMeta, headway: f64) -> f64 {
    let ahead = s.pose().to_local(lead.position()).x;
    let gap = ahead - 0.5 * (meta.length + lead_meta.length);
    let desired = 2.0 + headway * s.v.max(0.0);
    let closing = s.v - lead.v;
    let stopping_gap = if closing > 0.0 { closing * closing / (2.0 * 3.0) } else { 0.0 };
    if gap < 0.5 * desired || gap < stopping_gap + 2.0 {
        -4.0
    } else if gap < desired - 1.0 || closing > 1.0 {
        -2.0
    } else if gap > desired + 3.0 && closing < 0.5 {
        1.0
    } else {
        0.0
    }
}
