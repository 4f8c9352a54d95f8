//! High-level command taxonomy: the rule-based labeler, the teacher-student
//! masking schedule, and per-command intention-point clustering.

use std::collections::BTreeMap;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::wrap_angle;
use crate::scenario::{AgentKind, AgentTrack, FrameTransform, Horizon, Scenario};

/// Six-way high-level intention label.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    LeftTurn,
    Straight,
    RightTurn,
    Stationary,
    Unknown,
    Vru,
}

impl Command {
    pub const ALL: [Command; 6] = [
        Command::LeftTurn,
        Command::Straight,
        Command::RightTurn,
        Command::Stationary,
        Command::Unknown,
        Command::Vru,
    ];

    pub fn index(self) -> usize {
        Command::ALL.iter().position(|c| *c == self).unwrap()
    }

    pub fn name(self) -> &'static str {
        match self {
            Command::LeftTurn => "left_turn",
            Command::Straight => "straight",
            Command::RightTurn => "right_turn",
            Command::Stationary => "stationary",
            Command::Unknown => "unknown",
            Command::Vru => "vru",
        }
    }

    pub fn parse(s: &str) -> Result<Command> {
        Command::ALL
            .iter()
            .copied()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown command '{s}'")))
    }
}

/// Extracted view of the learned per-command embedding rows.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CommandEmbeddingTable {
    pub dim: usize,
    /// One row per [`Command::ALL`] entry.
    pub rows: Vec<Vec<f64>>,
}

impl CommandEmbeddingTable {
    pub fn from_flat(dim: usize, flat: &[f64]) -> Result<Self> {
        if flat.len() != 6 * dim {
            return Err(Error::invalid(format!(
                "embedding table needs {} values, got {}",
                6 * dim,
                flat.len()
            )));
        }
        Ok(CommandEmbeddingTable {
            dim,
            rows: flat.chunks(dim).map(<[f64]>::to_vec).collect(),
        })
    }

    pub fn row(&self, c: Command) -> &[f64] {
        &self.rows[c.index()]
    }
}

/// Labeler thresholds; not dataset constants, so they stay overridable.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct LabelThresholds {
    /// Below this endpoint displacement the agent is stationary (meters).
    pub stationary_displacement: f64,
    /// Unwrapped heading change beyond which a turn is declared (radians).
    pub turn_angle: f64,
}

impl Default for LabelThresholds {
    fn default() -> Self {
        LabelThresholds {
            stationary_displacement: 2.0,
            turn_angle: 30f64.to_radians(),
        }
    }
}

/// Rule-based command from agent geometry and dynamics. Total: pedestrians
/// and cyclists map to Vru, tracks without a valid future to Unknown.
pub fn label_command(track: &AgentTrack, horizon: &Horizon, th: LabelThresholds) -> Command {
    if matches!(track.kind, AgentKind::Pedestrian | AgentKind::Cyclist) {
        return Command::Vru;
    }
    let future: Vec<_> = track.future(horizon).iter().filter(|s| s.valid).collect();
    let (Some(first), Some(last)) = (future.first(), future.last()) else {
        return Command::Unknown;
    };
    let current = track.current(horizon);
    let anchor = if current.valid { current } else { first };
    let displacement = ((last.x - anchor.x).powi(2) + (last.y - anchor.y).powi(2)).sqrt();
    if displacement < th.stationary_displacement {
        return Command::Stationary;
    }
    // unwrap step-to-step so multi-turn paths accumulate correctly
    let mut dtheta = 0.0;
    for w in future.windows(2) {
        dtheta += wrap_angle(w[1].heading - w[0].heading);
    }
    if dtheta > th.turn_angle {
        Command::LeftTurn
    } else if dtheta < -th.turn_angle {
        Command::RightTurn
    } else {
        Command::Straight
    }
}

/// Label every agent of a scenario and store the result on it.
pub fn label_scenario(scenario: &mut Scenario, th: LabelThresholds) {
    let horizon = scenario.horizon;
    let labels: BTreeMap<u32, Command> = scenario
        .agents
        .iter()
        .map(|a| (a.id, label_command(a, &horizon, th)))
        .collect();
    scenario.command_labels = Some(labels);
}

/// Ground-truth command availability schedule: flat at `p_start`, then a
/// linear ramp down to `p_end` over the final `ramp_epochs`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct MaskingSchedule {
    pub p_start: f64,
    pub p_end: f64,
    pub total_epochs: usize,
    pub ramp_epochs: usize,
}

impl MaskingSchedule {
    pub fn new(total_epochs: usize, ramp_epochs: usize) -> Self {
        MaskingSchedule {
            p_start: 0.9,
            p_end: 0.1,
            total_epochs,
            ramp_epochs,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_end)
            || !(0.0..=1.0).contains(&self.p_start)
            || self.p_end > self.p_start
        {
            return Err(Error::invalid("masking schedule needs 0 <= p_end <= p_start <= 1"));
        }
        if self.ramp_epochs > self.total_epochs {
            return Err(Error::invalid("ramp_epochs exceeds total_epochs"));
        }
        Ok(())
    }
}

/// Probability that a surrounding agent's ground-truth command is available
/// at `epoch`.
pub fn availability(epoch: usize, schedule: &MaskingSchedule) -> Result<f64> {
    schedule.validate()?;
    if epoch >= schedule.total_epochs {
        return Err(Error::invalid(format!(
            "epoch {epoch} out of range (total {})",
            schedule.total_epochs
        )));
    }
    let ramp_start = schedule.total_epochs - schedule.ramp_epochs;
    if epoch < ramp_start || schedule.ramp_epochs == 0 {
        return Ok(schedule.p_start);
    }
    if schedule.ramp_epochs == 1 {
        return Ok(schedule.p_end);
    }
    let frac = (epoch - ramp_start) as f64 / (schedule.ramp_epochs - 1) as f64;
    Ok(schedule.p_start + (schedule.p_end - schedule.p_start) * frac)
}

/// Independently replace each non-ego command by Unknown with probability
/// `1 - availability(epoch)`. The ego command is never masked.
pub fn apply_mask(
    commands: &BTreeMap<u32, Command>,
    epoch: usize,
    schedule: &MaskingSchedule,
    rng_seed: u64,
    ego_id: u32,
) -> Result<BTreeMap<u32, Command>> {
    let p = availability(epoch, schedule)?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed ^ (epoch as u64).wrapping_mul(0x9e3779b97f4a7c15));
    let mut out = BTreeMap::new();
    for (&id, &cmd) in commands {
        let keep = rng.random_range(0.0..1.0) < p;
        let masked = if id == ego_id || keep { cmd } else { Command::Unknown };
        out.insert(id, masked);
    }
    Ok(out)
}

/// Per-command anchor points in the agent frame: K per command.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct IntentionPointSet {
    pub k: usize,
    pub points: BTreeMap<Command, Vec<[f64; 2]>>,
}

impl IntentionPointSet {
    pub fn anchors(&self, c: Command) -> Result<&[[f64; 2]]> {
        self.points
            .get(&c)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::invalid(format!("no intention points for command {}", c.name())))
    }
}

/// Agent-frame ground-truth endpoints bucketed by command, the clustering
/// input. Vehicle-maneuver buckets hold only matching endpoints; the shared
/// pool feeds Unknown and Vru.
pub fn collect_endpoints(
    scenarios: &[Scenario],
    th: LabelThresholds,
) -> BTreeMap<Command, Vec<[f64; 2]>> {
    let mut buckets: BTreeMap<Command, Vec<[f64; 2]>> = BTreeMap::new();
    for scenario in scenarios {
        let horizon = scenario.horizon;
        for track in &scenario.agents {
            let current = track.current(&horizon);
            if !current.valid {
                continue;
            }
            let Some(endpoint) = track.future(&horizon).iter().rev().find(|s| s.valid) else {
                continue;
            };
            let frame = FrameTransform::from_state(current);
            let local = frame.to_local([endpoint.x, endpoint.y]);
            let cmd = scenario
                .command_labels
                .as_ref()
                .and_then(|m| m.get(&track.id).copied())
                .unwrap_or_else(|| label_command(track, &horizon, th));
            buckets.entry(cmd).or_default().push(local);
        }
    }
    buckets
}

/// K-means (farthest-point init, 50 iterations) per command bucket. Unknown
/// and Vru cluster the union of every bucket; pools smaller than K pad with
/// the pool mean.
pub fn cluster_intention_points(
    endpoints: &BTreeMap<Command, Vec<[f64; 2]>>,
    k: usize,
    seed: u64,
) -> Result<IntentionPointSet> {
    let global: Vec<[f64; 2]> = endpoints.values().flatten().copied().collect();
    let mut points = BTreeMap::new();
    for cmd in Command::ALL {
        let pool: &[[f64; 2]] = match cmd {
            Command::Unknown | Command::Vru => &global,
            _ => endpoints.get(&cmd).map(Vec::as_slice).unwrap_or(&[]),
        };
        if pool.is_empty() {
            return Err(Error::invalid(format!(
                "empty endpoint pool for command {}",
                cmd.name()
            )));
        }
        points.insert(cmd, kmeans(pool, k, seed));
    }
    Ok(IntentionPointSet { k, points })
}

fn mean_point(points: &[[f64; 2]]) -> [f64; 2] {
    let n = points.len() as f64;
    let (sx, sy) = points
        .iter()
        .fold((0.0, 0.0), |(sx, sy), p| (sx + p[0], sy + p[1]));
    [sx / n, sy / n]
}

fn dist2(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

/// Lloyd iterations with farthest-point seeding. Ties in assignment and
/// seeding go to the lower index; empty clusters keep their center.
pub fn kmeans(points: &[[f64; 2]], k: usize, seed: u64) -> Vec<[f64; 2]> {
    kmeans_with_trace(points, k, seed).0
}

/// Like [`kmeans`], also returning the inertia after each Lloyd update.
pub fn kmeans_with_trace(points: &[[f64; 2]], k: usize, seed: u64) -> (Vec<[f64; 2]>, Vec<f64>) {
    assert!(!points.is_empty());
    if points.len() <= k {
        let mut centers: Vec<[f64; 2]> = points.to_vec();
        let pad = mean_point(points);
        centers.resize(k, pad);
        return (centers, vec![0.0]);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = Vec::with_capacity(k);
    centers.push(points[rng.random_range(0..points.len())]);
    while centers.len() < k {
        let mut best = (0usize, -1.0f64);
        for (i, p) in points.iter().enumerate() {
            let d = centers
                .iter()
                .map(|c| dist2(*p, *c))
                .fold(f64::INFINITY, f64::min);
            if d > best.1 {
                best = (i, d);
            }
        }
        centers.push(points[best.0]);
    }

    let mut trace = vec![kmeans_inertia(points, &centers)];
    let mut assignment = vec![0usize; points.len()];
    for _ in 0..50 {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let mut nearest = 0usize;
            let mut nd = f64::INFINITY;
            for (j, c) in centers.iter().enumerate() {
                let d = dist2(*p, *c);
                if d < nd {
                    nd = d;
                    nearest = j;
                }
            }
            if assignment[i] != nearest {
                assignment[i] = nearest;
                changed = true;
            }
        }
        for (j, center) in centers.iter_mut().enumerate() {
            let members: Vec<[f64; 2]> = points
                .iter()
                .zip(&assignment)
                .filter(|(_, a)| **a == j)
                .map(|(p, _)| *p)
                .collect();
            if !members.is_empty() {
                *center = mean_point(&members);
            }
        }
        trace.push(kmeans_inertia(points, &centers));
        if !changed {
            break;
        }
    }
    (centers, trace)
}

/// Sum of squared distances of each point to its nearest center.
pub fn kmeans_inertia(points: &[[f64; 2]], centers: &[[f64; 2]]) -> f64 {
    points
        .iter()
        .map(|p| {
            centers
                .iter()
                .map(|c| dist2(*p, *c))
                .fold(f64::INFINITY, f64::min)
        })
        .sum()
}
