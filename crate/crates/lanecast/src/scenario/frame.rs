//! Rigid agent-frame normalization with a retained inverse.

use serde::{Deserialize, Serialize};

use super::{AgentState, Polyline, Scenario};
use crate::error::{Error, Result};
use crate::kinematics::wrap_angle;

/// World-to-agent rigid transform: rotate by -heading about the agent's
/// position, agent ends up at the origin facing +x.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct FrameTransform {
    pub origin: [f64; 2],
    pub heading: f64,
}

impl FrameTransform {
    pub fn from_state(state: &AgentState) -> Self {
        FrameTransform {
            origin: [state.x, state.y],
            heading: state.heading,
        }
    }

    pub fn identity() -> Self {
        FrameTransform {
            origin: [0.0, 0.0],
            heading: 0.0,
        }
    }

    pub fn to_local(&self, p: [f64; 2]) -> [f64; 2] {
        let (dx, dy) = (p[0] - self.origin[0], p[1] - self.origin[1]);
        let (c, s) = (self.heading.cos(), self.heading.sin());
        [c * dx + s * dy, -s * dx + c * dy]
    }

    pub fn to_world(&self, p: [f64; 2]) -> [f64; 2] {
        let (c, s) = (self.heading.cos(), self.heading.sin());
        [
            self.origin[0] + c * p[0] - s * p[1],
            self.origin[1] + s * p[0] + c * p[1],
        ]
    }

    pub fn vector_to_local(&self, v: [f64; 2]) -> [f64; 2] {
        let (c, s) = (self.heading.cos(), self.heading.sin());
        [c * v[0] + s * v[1], -s * v[0] + c * v[1]]
    }

    pub fn heading_to_local(&self, h: f64) -> f64 {
        wrap_angle(h - self.heading)
    }

    fn state_to_local(&self, state: &AgentState) -> AgentState {
        if !state.valid {
            return AgentState::invalid();
        }
        let p = self.to_local([state.x, state.y]);
        let v = self.vector_to_local([state.vx, state.vy]);
        AgentState {
            x: p[0],
            y: p[1],
            heading: self.heading_to_local(state.heading),
            vx: v[0],
            vy: v[1],
            ..*state
        }
    }

    fn polyline_to_local(&self, poly: &Polyline) -> Polyline {
        Polyline {
            kind: poly.kind,
            points: poly
                .points
                .iter()
                .map(|pt| {
                    let p = self.to_local([pt.x, pt.y]);
                    super::PolylinePoint {
                        x: p[0],
                        y: p[1],
                        dir: self.heading_to_local(pt.dir),
                    }
                })
                .collect(),
        }
    }
}

/// Rigidly transform the whole scenario into the frame of `agent_id` at the
/// current step. The returned transform maps agent-frame points back to the
/// world.
pub fn to_agent_frame(scenario: &Scenario, agent_id: u32) -> Result<(Scenario, FrameTransform)> {
    let agent = scenario
        .agent(agent_id)
        .ok_or_else(|| Error::invalid(format!("agent {agent_id} not found")))?;
    let current = agent.current(&scenario.horizon);
    if !current.valid {
        return Err(Error::invalid(format!(
            "agent {agent_id} is invalid at the current step"
        )));
    }
    let frame = FrameTransform::from_state(current);
    let mut out = scenario.clone();
    for track in &mut out.agents {
        for state in &mut track.states {
            *state = frame.state_to_local(state);
        }
    }
    for poly in &mut out.map {
        *poly = frame.polyline_to_local(poly);
    }
    for poly in out.lane_graph.lanes.values_mut() {
        *poly = frame.polyline_to_local(poly);
    }
    Ok((out, frame))
}
