//! Scene data model: agents with timed states, map polylines, a lane graph
//! with successor topology, plus frame normalization and reachable-lane
//! extraction. A deterministic synthetic generator ([`generate`]) stands in
//! for a recorded-driving dataset.

mod frame;
mod generate;
mod io;
mod lanes;

pub use frame::{to_agent_frame, FrameTransform};
pub use generate::{generate, generate_with, GenOptions, Layout, Maneuver};
pub use io::{load, load_all, save, save_all};
pub use lanes::{reachable_lanes, ReachableLane, ReachableLanes};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::commands::Command;
use crate::error::{Error, Result};
use crate::kinematics::wrap_angle;

/// Time discretization shared by every track in a scenario.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct Horizon {
    /// History steps, current step included.
    pub t_h: usize,
    /// Future steps.
    pub t_f: usize,
    /// Step length in seconds.
    pub dt: f64,
}

impl Default for Horizon {
    fn default() -> Self {
        // 1s of history (current step included) and 8s of future at 10 Hz
        Horizon {
            t_h: 11,
            t_f: 80,
            dt: 0.1,
        }
    }
}

impl Horizon {
    pub fn steps(&self) -> usize {
        self.t_h + self.t_f
    }

    /// Index of the current (last history) step.
    pub fn current(&self) -> usize {
        self.t_h - 1
    }
}

/// Caps on token counts fed to the encoder. Desk-scale defaults; the larger
/// production-scale limits stay available through [`SceneCaps::full_scale`].
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct SceneCaps {
    /// Max map polylines per center agent.
    pub n_m: usize,
    /// Max reachable lanes per center agent.
    pub n_l: usize,
    /// Max points per map polyline.
    pub n_p: usize,
    /// Max points per reachable-lane polyline.
    pub n_p_lane: usize,
}

impl Default for SceneCaps {
    fn default() -> Self {
        SceneCaps {
            n_m: 64,
            n_l: 16,
            n_p: 20,
            n_p_lane: 20,
        }
    }
}

impl SceneCaps {
    pub fn full_scale() -> Self {
        SceneCaps {
            n_m: 768,
            n_l: 192,
            n_p: 20,
            n_p_lane: 20,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct AgentState {
    pub x: f64,
    pub y: f64,
    /// Radians in (-pi, pi].
    pub heading: f64,
    pub vx: f64,
    pub vy: f64,
    pub length: f64,
    pub width: f64,
    pub valid: bool,
}

impl AgentState {
    pub fn invalid() -> Self {
        AgentState {
            x: 0.0,
            y: 0.0,
            heading: 0.0,
            vx: 0.0,
            vy: 0.0,
            length: 0.0,
            width: 0.0,
            valid: false,
        }
    }

    pub fn speed(&self) -> f64 {
        (self.vx * self.vx + self.vy * self.vy).sqrt()
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[serde(rename_all = "snake_case")]
pub enum AgentKind {
    Vehicle,
    Pedestrian,
    Cyclist,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AgentTrack {
    pub id: u32,
    pub kind: AgentKind,
    /// Exactly `t_h + t_f` states at the scenario's `dt`.
    pub states: Vec<AgentState>,
}

impl AgentTrack {
    pub fn state(&self, t: usize) -> &AgentState {
        &self.states[t]
    }

    pub fn current<'a>(&'a self, horizon: &Horizon) -> &'a AgentState {
        &self.states[horizon.current()]
    }

    pub fn future<'a>(&'a self, horizon: &Horizon) -> &'a [AgentState] {
        &self.states[horizon.t_h..]
    }

    pub fn history<'a>(&'a self, horizon: &Horizon) -> &'a [AgentState] {
        &self.states[..horizon.t_h]
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[serde(rename_all = "snake_case")]
pub enum PolylineKind {
    LaneCenter,
    LaneSeparator,
    RoadBorder,
    Crosswalk,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct PolylinePoint {
    pub x: f64,
    pub y: f64,
    /// Tangent direction, radians in (-pi, pi].
    pub dir: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Polyline {
    pub kind: PolylineKind,
    pub points: Vec<PolylinePoint>,
}

impl Polyline {
    pub fn center(&self) -> [f64; 2] {
        let n = self.points.len().max(1) as f64;
        let (sx, sy) = self
            .points
            .iter()
            .fold((0.0, 0.0), |(sx, sy), p| (sx + p.x, sy + p.y));
        [sx / n, sy / n]
    }

    pub fn length(&self) -> f64 {
        self.points
            .windows(2)
            .map(|w| ((w[1].x - w[0].x).powi(2) + (w[1].y - w[0].y).powi(2)).sqrt())
            .sum()
    }

    /// Minimum distance from a point to the polyline (segment-wise).
    pub fn distance_to(&self, x: f64, y: f64) -> f64 {
        let mut best = f64::INFINITY;
        for w in self.points.windows(2) {
            best = best.min(segment_distance(x, y, w[0], w[1]));
        }
        if self.points.len() == 1 {
            let p = self.points[0];
            best = ((x - p.x).powi(2) + (y - p.y).powi(2)).sqrt();
        }
        best
    }
}

fn segment_distance(x: f64, y: f64, a: PolylinePoint, b: PolylinePoint) -> f64 {
    let (abx, aby) = (b.x - a.x, b.y - a.y);
    let len2 = abx * abx + aby * aby;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((x - a.x) * abx + (y - a.y) * aby) / len2).clamp(0.0, 1.0)
    };
    let (px, py) = (a.x + t * abx, a.y + t * aby);
    ((x - px).powi(2) + (y - py).powi(2)).sqrt()
}

/// Lane centerlines keyed by id plus successor topology.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct LaneGraph {
    pub lanes: BTreeMap<u32, Polyline>,
    pub successors: BTreeMap<u32, Vec<u32>>,
}

impl LaneGraph {
    pub fn successors_of(&self, id: u32) -> &[u32] {
        self.successors.get(&id).map(Vec::as_slice).unwrap_or(&[])
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Scenario {
    pub id: String,
    pub horizon: Horizon,
    pub agents: Vec<AgentTrack>,
    pub map: Vec<Polyline>,
    pub lane_graph: LaneGraph,
    pub ego_id: u32,
    /// Center agents decoded during training and evaluation.
    pub interest_ids: Vec<u32>,
    /// Ground-truth high-level commands, filled in by the labeler.
    pub command_labels: Option<BTreeMap<u32, Command>>,
}

impl Scenario {
    pub fn agent(&self, id: u32) -> Option<&AgentTrack> {
        self.agents.iter().find(|a| a.id == id)
    }

    pub fn command_of(&self, id: u32) -> Command {
        self.command_labels
            .as_ref()
            .and_then(|m| m.get(&id).copied())
            .unwrap_or(Command::Unknown)
    }

    /// Check the structural invariants; returns a description of the first
    /// violation found.
    pub fn validate(&self) -> Result<()> {
        let steps = self.horizon.steps();
        for track in &self.agents {
            if track.states.len() != steps {
                return Err(Error::invalid(format!(
                    "agent {}: {} states, expected {steps}",
                    track.id,
                    track.states.len()
                )));
            }
            for (t, s) in track.states.iter().enumerate() {
                if s.valid {
                    if s.length <= 0.0 || s.width <= 0.0 {
                        return Err(Error::invalid(format!(
                            "agent {} step {t}: non-positive extent",
                            track.id
                        )));
                    }
                    let w = wrap_angle(s.heading);
                    if (w - s.heading).abs() > 1e-9 {
                        return Err(Error::invalid(format!(
                            "agent {} step {t}: heading {} out of (-pi, pi]",
                            track.id, s.heading
                        )));
                    }
                }
            }
        }
        if self.agent(self.ego_id).is_none() {
            return Err(Error::invalid(format!("ego id {} not found", self.ego_id)));
        }
        for id in &self.interest_ids {
            if self.agent(*id).is_none() {
                return Err(Error::invalid(format!("interest id {id} not found")));
            }
        }
        for poly in self.map.iter().chain(self.lane_graph.lanes.values()) {
            if poly.points.len() < 2 {
                return Err(Error::invalid("polyline with fewer than 2 points"));
            }
        }
        for (id, succs) in &self.lane_graph.successors {
            if !self.lane_graph.lanes.contains_key(id) {
                return Err(Error::invalid(format!("successor key {id} is not a lane")));
            }
            for s in succs {
                if s == id {
                    return Err(Error::invalid(format!("lane {id} lists itself as successor")));
                }
                if !self.lane_graph.lanes.contains_key(s) {
                    return Err(Error::invalid(format!(
                        "lane {id} lists unknown successor {s}"
                    )));
                }
            }
        }
        Ok(())
    }
}
