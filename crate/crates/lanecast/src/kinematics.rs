//! Unicycle kinematics: explicit-Euler rollout, control inversion, and a
//! tape-backed rollout for the dynamics loss.

use crate::tensor::{Result as TensorResult, Tape, TensorId};

/// Planar pose with speed; heading is kept in (-pi, pi].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub speed: f64,
}

impl Pose {
    pub fn new(x: f64, y: f64, heading: f64, speed: f64) -> Self {
        Pose {
            x,
            y,
            heading: wrap_angle(heading),
            speed,
        }
    }

    pub fn origin() -> Self {
        Pose::new(0.0, 0.0, 0.0, 0.0)
    }
}

/// Per-step (speed m/s, yaw rate rad/s) controls.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlSequence {
    pub speed: Vec<f64>,
    pub yaw_rate: Vec<f64>,
}

impl ControlSequence {
    pub fn len(&self) -> usize {
        self.speed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.speed.is_empty()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ControlBounds {
    pub speed_min: f64,
    pub speed_max: f64,
    pub yaw_rate_max: f64,
}

impl Default for ControlBounds {
    fn default() -> Self {
        ControlBounds {
            speed_min: 0.0,
            speed_max: 30.0,
            yaw_rate_max: 1.0,
        }
    }
}

/// Map an angle into (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let r = a.rem_euclid(two_pi);
    if r > std::f64::consts::PI {
        r - two_pi
    } else {
        r
    }
}

/// Explicit-Euler unicycle rollout. The heading is advanced first, so the
/// position at step t uses the heading updated through step t.
pub fn integrate(pose0: Pose, controls: &ControlSequence, dt: f64) -> Vec<[f64; 2]> {
    assert!(dt > 0.0, "integrate requires dt > 0");
    let mut out = Vec::with_capacity(controls.len());
    let (mut x, mut y, mut heading) = (pose0.x, pose0.y, pose0.heading);
    for t in 0..controls.len() {
        heading += controls.yaw_rate[t] * dt;
        x += controls.speed[t] * dt * heading.cos();
        y += controls.speed[t] * dt * heading.sin();
        out.push([x, y]);
    }
    out
}

/// Invert [`integrate`]: per-step speed from displacement, yaw rate from the
/// unwrapped heading difference. Steps with zero displacement inherit the
/// previous heading and get zero yaw rate.
pub fn controls_from_positions(positions: &[[f64; 2]], pose0: Pose, dt: f64) -> ControlSequence {
    assert!(dt > 0.0);
    let mut speed = Vec::with_capacity(positions.len());
    let mut yaw_rate = Vec::with_capacity(positions.len());
    let mut prev = [pose0.x, pose0.y];
    let mut prev_heading = pose0.heading;
    for p in positions {
        let dx = p[0] - prev[0];
        let dy = p[1] - prev[1];
        let dist = (dx * dx + dy * dy).sqrt();
        if dist == 0.0 {
            speed.push(0.0);
            yaw_rate.push(0.0);
        } else {
            let heading = dy.atan2(dx);
            speed.push(dist / dt);
            yaw_rate.push(wrap_angle(heading - prev_heading) / dt);
            prev_heading = heading;
        }
        prev = *p;
    }
    ControlSequence { speed, yaw_rate }
}

/// Per-channel clamp; idempotent.
pub fn clamp_controls(controls: &ControlSequence, bounds: ControlBounds) -> ControlSequence {
    ControlSequence {
        speed: controls
            .speed
            .iter()
            .map(|v| v.clamp(bounds.speed_min, bounds.speed_max))
            .collect(),
        yaw_rate: controls
            .yaw_rate
            .iter()
            .map(|w| w.clamp(-bounds.yaw_rate_max, bounds.yaw_rate_max))
            .collect(),
    }
}

/// Tape-backed rollout used by the dynamics loss: `speed` and `yaw_rate` are
/// `[T x 1]` tensors, output is `([T x 1], [T x 1])` positions. The heading
/// prefix sums are expressed as a lower-triangular matmul so the whole
/// rollout differentiates through the fixed primitive set.
pub fn integrate_graph(
    tape: &Tape,
    pose0: Pose,
    speed: TensorId,
    yaw_rate: TensorId,
    dt: f64,
) -> TensorResult<(TensorId, TensorId)> {
    let t_len = tape.numel(speed);
    let lower = lower_triangular(tape, t_len)?;
    // theta_t = heading0 + dt * sum_{s<=t} omega_s
    let cum_yaw = tape.matmul(lower, yaw_rate)?;
    let theta = tape.add_scalar(tape.mul_scalar(cum_yaw, dt), pose0.heading);
    let step_len = tape.mul_scalar(speed, dt);
    let step_x = tape.mul(step_len, tape.cos(theta))?;
    let step_y = tape.mul(step_len, tape.sin(theta))?;
    let px = tape.add_scalar(tape.matmul(lower, step_x)?, pose0.x);
    let py = tape.add_scalar(tape.matmul(lower, step_y)?, pose0.y);
    Ok((px, py))
}

fn lower_triangular(tape: &Tape, n: usize) -> TensorResult<TensorId> {
    let mut vals = vec![0.0; n * n];
    for r in 0..n {
        for c in 0..=r {
            vals[r * n + c] = 1.0;
        }
    }
    tape.leaf(&[n, n], vals)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, Tensor};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn constant_controls(v: f64, w: f64, n: usize) -> ControlSequence {
        ControlSequence {
            speed: vec![v; n],
            yaw_rate: vec![w; n],
        }
    }

    #[test]
    fn straight_line_at_constant_speed() {
        let c = constant_controls(3.0, 0.0, 5);
        let pos = integrate(Pose::origin(), &c, 0.1);
        for (t, p) in pos.iter().enumerate() {
            assert!((p[0] - 3.0 * (t + 1) as f64 * 0.1).abs() < 1e-12);
            assert_eq!(p[1], 0.0);
        }
    }

    #[test]
    fn zero_speed_stays_put() {
        let pose = Pose::new(2.0, -1.0, 0.7, 0.0);
        let pos = integrate(pose, &constant_controls(0.0, 0.5, 8), 0.1);
        for p in pos {
            assert_eq!(p, [2.0, -1.0]);
        }
    }

    #[test]
    fn quarter_circle_endpoint() {
        // v = pi/2, omega = pi/2 for 1s: unit-radius quarter circle to (1, 1)
        let n = 1000;
        let c = constant_controls(PI / 2.0, PI / 2.0, n);
        let pos = integrate(Pose::origin(), &c, 0.001);
        let end = pos[n - 1];
        assert!((end[0] - 1.0).abs() < 1e-2, "{end:?}");
        assert!((end[1] - 1.0).abs() < 1e-2, "{end:?}");
    }

    #[test]
    fn control_inversion_recovers_controls() {
        let c = ControlSequence {
            speed: vec![2.0, 3.0, 2.5, 4.0],
            yaw_rate: vec![0.3, -0.2, 0.0, 0.5],
        };
        let pose = Pose::new(1.0, 2.0, 0.4, 0.0);
        let pos = integrate(pose, &c, 0.1);
        let rec = controls_from_positions(&pos, pose, 0.1);
        for t in 0..c.len() {
            assert!((rec.speed[t] - c.speed[t]).abs() < 1e-9);
            assert!((rec.yaw_rate[t] - c.yaw_rate[t]).abs() < 1e-9);
        }
    }

    #[test]
    fn constant_positions_give_zero_speed() {
        let rec = controls_from_positions(&[[5.0, 5.0]; 4], Pose::new(5.0, 5.0, 0.2, 0.0), 0.1);
        assert_eq!(rec.speed, vec![0.0; 4]);
        assert_eq!(rec.yaw_rate, vec![0.0; 4]);
    }

    #[test]
    fn straight_line_two_mps() {
        let pos: Vec<[f64; 2]> = (1..=5).map(|t| [0.2 * t as f64, 0.0]).collect();
        let rec = controls_from_positions(&pos, Pose::origin(), 0.1);
        for t in 0..5 {
            assert!((rec.speed[t] - 2.0).abs() < 1e-12);
            assert!(rec.yaw_rate[t].abs() < 1e-12);
        }
    }

    #[test]
    fn clamp_examples() {
        let b = ControlBounds::default();
        let inb = constant_controls(10.0, 0.5, 3);
        assert_eq!(clamp_controls(&inb, b), inb);
        let fast = constant_controls(100.0, 0.0, 2);
        assert_eq!(clamp_controls(&fast, b).speed, vec![30.0, 30.0]);
        let once = clamp_controls(&fast, b);
        assert_eq!(clamp_controls(&once, b), once);
    }

    #[test]
    fn projection_property() {
        // integrate . controls_from_positions . integrate == integrate,
        // including through zero-speed segments
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let n = 15;
            let c = ControlSequence {
                speed: (0..n)
                    .map(|t| {
                        if t % 5 == 3 {
                            0.0
                        } else {
                            rng.random_range(0.0..20.0)
                        }
                    })
                    .collect(),
                yaw_rate: (0..n).map(|_| rng.random_range(-2.0..2.0)).collect(),
            };
            let pose = Pose::new(
                rng.random_range(-5.0..5.0),
                rng.random_range(-5.0..5.0),
                rng.random_range(-3.0..3.0),
                0.0,
            );
            let pos = integrate(pose, &c, 0.1);
            let rec = controls_from_positions(&pos, pose, 0.1);
            let pos2 = integrate(pose, &rec, 0.1);
            for (a, b) in pos.iter().zip(&pos2) {
                assert!((a[0] - b[0]).abs() < 1e-9 && (a[1] - b[1]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn rigid_transform_equivariance() {
        let c = ControlSequence {
            speed: vec![3.0, 4.0, 2.0, 5.0, 1.0],
            yaw_rate: vec![0.4, -0.3, 0.2, 0.0, -0.6],
        };
        let base = integrate(Pose::origin(), &c, 0.1);
        let (phi, tx, ty) = (0.83, 4.0, -2.5);
        let moved = integrate(Pose::new(tx, ty, phi, 0.0), &c, 0.1);
        for (p, q) in base.iter().zip(&moved) {
            let rx = tx + p[0] * phi.cos() - p[1] * phi.sin();
            let ry = ty + p[0] * phi.sin() + p[1] * phi.cos();
            assert!((q[0] - rx).abs() < 1e-9 && (q[1] - ry).abs() < 1e-9);
        }
    }

    #[test]
    fn graph_rollout_matches_plain_integrate_and_differentiates() {
        let n = 6;
        let pose = Pose::new(0.5, -0.3, 0.9, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let speeds: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..8.0)).collect();
        let yaws: Vec<f64> = (0..n).map(|_| rng.random_range(-0.8..0.8)).collect();

        let tape = Tape::new();
        let v = tape.leaf(&[n, 1], speeds.clone()).unwrap();
        let w = tape.leaf(&[n, 1], yaws.clone()).unwrap();
        let (px, py) = integrate_graph(&tape, pose, v, w, 0.1).unwrap();
        let plain = integrate(
            pose,
            &ControlSequence {
                speed: speeds.clone(),
                yaw_rate: yaws.clone(),
            },
            0.1,
        );
        let (gx, gy) = (tape.values(px), tape.values(py));
        for t in 0..n {
            assert!((gx[t] - plain[t][0]).abs() < 1e-12);
            assert!((gy[t] - plain[t][1]).abs() < 1e-12);
        }

        // gradient of a scalar readout w.r.t. the stacked controls
        let mut point = speeds;
        point.extend(yaws);
        let err = grad_check(
            |t, u| {
                let v = t.slice(u, 0, 0, n)?;
                let w = t.slice(u, 0, n, n)?;
                let (px, py) = integrate_graph(t, pose, v, w, 0.1)?;
                let sq = t.add(t.mul(px, px)?, t.mul(py, py)?)?;
                Ok(t.mean(sq))
            },
            &Tensor::new(vec![2 * n, 1], point).unwrap(),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn wrap_angle_range() {
        assert_eq!(wrap_angle(PI), PI);
        assert!((wrap_angle(-PI) - PI).abs() < 1e-12);
        assert!((wrap_angle(3.0 * PI) - PI).abs() < 1e-9);
        assert!((wrap_angle(-0.5) + 0.5).abs() < 1e-12);
    }
}
