//! Scenario data model and the agent-centric vectorized scene
//! representation consumed by the model.

mod io;
pub mod synth;

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::codec::ActionToken;
use crate::error::{Error, Result};
use crate::kinematics::{AgentState, Pose, Vec2};

pub use io::{load_scenario, parse_scenario, save_scenario, write_scenario};
pub use synth::{generate_synthetic, Archetype, GenConfig};

/// Maximum number of neighbouring agents kept per step.
pub const MAX_NEIGHBORS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentKind {
    Vehicle,
    Pedestrian,
    Cyclist,
}

impl AgentKind {
    pub const COUNT: usize = 3;

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentMeta {
    pub id: u32,
    pub kind: AgentKind,
    pub length: f64,
    pub width: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    pub meta: AgentMeta,
    pub states: Vec<AgentState>,
    pub valid: Vec<bool>,
    /// Ground-truth tokens when known (synthetic scenes); one per transition.
    pub tokens: Option<Vec<ActionToken>>,
}

impl Track {
    pub fn id(&self) -> u32 {
        self.meta.id
    }

    pub fn is_valid(&self, t: usize) -> bool {
        self.valid.get(t).copied().unwrap_or(false)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolylineKind {
    LaneCenter,
    RoadEdge,
    Crosswalk,
    StopLine,
}

impl PolylineKind {
    pub const COUNT: usize = 4;

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapPolyline {
    pub kind: PolylineKind,
    pub points: Vec<Vec2>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LightState {
    Red,
    Yellow,
    Green,
    Unknown,
}

impl LightState {
    pub const COUNT: usize = 4;

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrafficLight {
    pub stop_point: Vec2,
    pub states: Vec<LightState>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub id: String,
    pub dt: f64,
    pub history_len: usize,
    pub future_len: usize,
    pub polylines: Vec<MapPolyline>,
    pub tracks: Vec<Track>,
    pub lights: Vec<TrafficLight>,
    /// Designated ego agent, if the scene has one.
    pub ego: Option<u32>,
}

impl Scenario {
    /// Number of logged steps per track.
    pub fn steps(&self) -> usize {
        self.history_len + 1 + self.future_len
    }

    /// Index of the "current" step, the last history step.
    pub fn current_step(&self) -> usize {
        self.history_len
    }

    pub fn track(&self, id: u32) -> Result<&Track> {
        self.tracks.iter().find(|t| t.id() == id).ok_or(Error::UnknownAgent(id))
    }

    pub fn track_index(&self, id: u32) -> Result<usize> {
        self.tracks.iter().position(|t| t.id() == id).ok_or(Error::UnknownAgent(id))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(Error::Invariant(format!("scenario {}: dt must be positive", self.id)));
        }
        let steps = self.steps();
        let mut ids = std::collections::HashSet::new();
        for track in &self.tracks {
            let id = track.id();
            if !ids.insert(id) {
                return Err(Error::Invariant(format!("duplicate track id {id}")));
            }
            if track.states.len() != steps || track.valid.len() != steps {
                return Err(Error::Invariant(format!(
                    "track {id} has {} states and {} valid flags, expected {steps}",
                    track.states.len(),
                    track.valid.len()
                )));
            }
            if !(track.meta.length > 0.0 && track.meta.width > 0.0) {
                return Err(Error::Invariant(format!("track {id} has a non-positive box size")));
            }
            if track.states.iter().any(|s| !s.is_finite()) {
                return Err(Error::Invariant(format!("track {id} has non-finite states")));
            }
            if let Some(tokens) = &track.tokens {
                if tokens.len() != steps - 1 {
                    return Err(Error::Invariant(format!(
                        "track {id} has {} tokens, expected {}",
                        tokens.len(),
                        steps - 1
                    )));
                }
            }
        }
        for (i, p) in self.polylines.iter().enumerate() {
            if p.points.len() < 2 {
                return Err(Error::Invariant(format!("polyline {i} has fewer than 2 points")));
            }
        }
        for (i, l) in self.lights.iter().enumerate() {
            if l.states.len() != steps {
                return Err(Error::Invariant(format!(
                    "light {i} has {} states, expected {steps}",
                    l.states.len()
                )));
            }
        }
        if let Some(ego) = self.ego {
            self.track(ego)?;
        }
        Ok(())
    }

    /// Applies a rigid motion to every coordinate in the scene.
    pub fn transformed(&self, g: &Pose) -> Scenario {
        let mut out = self.clone();
        for track in &mut out.tracks {
            for s in &mut track.states {
                *s = g.transform_state(s);
            }
        }
        for p in &mut out.polylines {
            for pt in &mut p.points {
                *pt = g.to_world(*pt);
            }
        }
        for l in &mut out.lights {
            l.stop_point = g.to_world(l.stop_point);
        }
        out
    }
}

/// Directed segment.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Segment {
    pub start: Vec2,
    pub end: Vec2,
}

impl Segment {
    pub fn new(start: Vec2, end: Vec2) -> Self {
        Self { start, end }
    }

    pub fn vector(&self) -> Vec2 {
        self.end - self.start
    }

    fn distance_to(&self, p: Vec2) -> f64 {
        let d = self.vector();
        let len2 = d.dot(d);
        let t = if len2 > 0.0 { ((p - self.start).dot(d) / len2).clamp(0.0, 1.0) } else { 0.0 };
        (self.start + d * t).distance(p)
    }

    fn to_local(self, pose: &Pose) -> Segment {
        Segment::new(pose.to_local(self.start), pose.to_local(self.end))
    }
}

pub fn to_agent_frame(world_point: Vec2, pose: &Pose) -> Vec2 {
    pose.to_local(world_point)
}

pub fn from_agent_frame(local_point: Vec2, pose: &Pose) -> Vec2 {
    pose.to_world(local_point)
}

/// Box corners in world coordinates, counterclockwise from front-left.
pub fn bbox_corners(state: &AgentState, meta: &AgentMeta) -> [Vec2; 4] {
    let (hl, hw) = (0.5 * meta.length, 0.5 * meta.width);
    let pose = state.pose();
    [
        Vec2::new(hl, hw),
        Vec2::new(-hl, hw),
        Vec2::new(-hl, -hw),
        Vec2::new(hl, -hw),
    ]
    .map(|c| pose.to_world(c))
}

/// The four directed edges of an agent's bounding box.
pub fn bbox_vectors(state: &AgentState, meta: &AgentMeta) -> [Segment; 4] {
    let c = bbox_corners(state, meta);
    [
        Segment::new(c[0], c[1]),
        Segment::new(c[1], c[2]),
        Segment::new(c[2], c[3]),
        Segment::new(c[3], c[0]),
    ]
}

/// Consecutive-point segments; no implicit closure.
pub fn polyline_vectors(p: &MapPolyline) -> Vec<Segment> {
    p.points.windows(2).map(|w| Segment::new(w[0], w[1])).collect()
}

/// Splits every segment into equal pieces no longer than `max_len`.
pub fn resample_polyline(p: &MapPolyline, max_len: f64) -> MapPolyline {
    let mut points = vec![p.points[0]];
    for w in p.points.windows(2) {
        let d = w[1] - w[0];
        let pieces = ((d.norm() / max_len).ceil() as usize).max(1);
        for i in 1..=pieces {
            points.push(w[0] + d * (i as f64 / pieces as f64));
        }
    }
    MapPolyline { kind: p.kind, points }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    /// Map crop radius around the target (m).
    pub map_radius: f64,
    /// Maximum polyline segment length after resampling (m).
    pub max_segment: f64,
    pub max_neighbors: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            map_radius: 50.0,
            max_segment: 2.0,
            max_neighbors: MAX_NEIGHBORS,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetFeature {
    pub v: f64,
    pub kind: AgentKind,
    pub length: f64,
    pub width: f64,
}

/// One neighbouring agent in the target's frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NeighborFeature {
    pub id: u32,
    pub kind: AgentKind,
    pub edges: [Segment; 4],
    pub center: Vec2,
    pub heading: f64,
    pub v: f64,
    pub length: f64,
    pub width: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MapVector {
    pub segment: Segment,
    pub kind: PolylineKind,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LightFeature {
    pub stop_point: Vec2,
    pub state: LightState,
}

/// Everything the encoder sees at one step, in the target's frame.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneStepInput {
    pub target: TargetFeature,
    pub prev_token: Option<ActionToken>,
    pub neighbors: Vec<NeighborFeature>,
    pub map: Vec<MapVector>,
    pub lights: Vec<LightFeature>,
}

impl SceneStepInput {
    pub fn element_count(&self) -> usize {
        self.neighbors.len() + self.map.len() + self.lights.len()
    }
}

/// Resampled map segments of a scenario, computed once and reused across
/// steps and agents.
#[derive(Debug, Clone)]
pub struct MapIndex {
    segments: Vec<MapVector>,
    config: SceneConfig,
}

impl MapIndex {
    pub fn new(scenario: &Scenario, config: SceneConfig) -> Self {
        let segments = scenario
            .polylines
            .iter()
            .flat_map(|p| {
                let kind = p.kind;
                polyline_vectors(&resample_polyline(p, config.max_segment))
                    .into_iter()
                    .map(move |segment| MapVector { segment, kind })
            })
            .collect();
        Self { segments, config }
    }

    pub fn config(&self) -> &SceneConfig {
        &self.config
    }
}

/// Builds the encoder input for `agent_id` at step `t`.
pub fn build_step_input(
    scenario: &Scenario,
    agent_id: u32,
    t: usize,
    prev_token: Option<ActionToken>,
) -> Result<SceneStepInput> {
    let index = MapIndex::new(scenario, SceneConfig::default());
    build_step_input_indexed(scenario, &index, agent_id, t, prev_token)
}

pub fn build_step_input_indexed(
    scenario: &Scenario,
    index: &MapIndex,
    agent_id: u32,
    t: usize,
    prev_token: Option<ActionToken>,
) -> Result<SceneStepInput> {
    let target = scenario.track(agent_id)?;
    if !target.is_valid(t) {
        return Err(Error::AgentInvalid { agent: agent_id, step: t });
    }
    let cfg = index.config;
    let state = target.states[t];
    let pose = state.pose();
    let center = state.position();

    let mut others: Vec<(f64, &Track)> = scenario
        .tracks
        .iter()
        .filter(|tr| tr.id() != agent_id && tr.is_valid(t))
        .map(|tr| (tr.states[t].position().distance(center), tr))
        .collect();
    others.sort_by(|a, b| match a.0.total_cmp(&b.0) {
        Ordering::Equal => a.1.id().cmp(&b.1.id()),
        o => o,
    });
    let neighbors = others
        .into_iter()
        .take(cfg.max_neighbors)
        .map(|(_, tr)| {
            let s = tr.states[t];
            NeighborFeature {
                id: tr.id(),
                kind: tr.meta.kind,
                edges: bbox_vectors(&s, &tr.meta).map(|e| e.to_local(&pose)),
                center: pose.to_local(s.position()),
                heading: crate::kinematics::wrap_angle(s.theta - state.theta).unwrap_or(0.0),
                v: s.v,
                length: tr.meta.length,
                width: tr.meta.width,
            }
        })
        .collect();

    let map = index
        .segments
        .iter()
        .filter(|m| m.segment.distance_to(center) <= cfg.map_radius)
        .map(|m| MapVector { segment: m.segment.to_local(&pose), kind: m.kind })
        .collect();

    let lights = scenario
        .lights
        .iter()
        .filter(|l| l.stop_point.distance(center) <= cfg.map_radius)
        .map(|l| LightFeature { stop_point: pose.to_local(l.stop_point), state: l.states[t] })
        .collect();

    Ok(SceneStepInput {
        target: TargetFeature {
            v: state.v,
            kind: target.meta.kind,
            length: target.meta.length,
            width: target.meta.width,
        },
        prev_token,
        neighbors,
        map,
        lights,
    })
}
