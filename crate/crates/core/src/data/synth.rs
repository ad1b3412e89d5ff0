//! Seeded synthetic trajectories for desk-scale experiments.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::TrajectoryWindow;

const WINDOW_LEN: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthKind {
    /// `p_t = p_0 + t v`.
    ConstantVelocity,
    /// Constant speed with one heading change at a random step.
    PiecewiseTurn,
    /// Steers toward one of three goals with bounded Gaussian jitter.
    GoalAttractedNoisy,
}

impl SynthKind {
    pub fn name(self) -> &'static str {
        match self {
            SynthKind::ConstantVelocity => "constant-velocity",
            SynthKind::PiecewiseTurn => "piecewise-turn",
            SynthKind::GoalAttractedNoisy => "goal-attracted-noisy",
        }
    }
}

impl fmt::Display for SynthKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SynthKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "constant-velocity" => Ok(SynthKind::ConstantVelocity),
            "piecewise-turn" => Ok(SynthKind::PiecewiseTurn),
            "goal-attracted-noisy" => Ok(SynthKind::GoalAttractedNoisy),
            other => Err(format!(
                "unknown synthetic kind {other:?} (expected constant-velocity, piecewise-turn or goal-attracted-noisy)"
            )),
        }
    }
}

fn heading(rng: &mut ChaCha8Rng) -> f64 {
    rng.random_range(0.0..std::f64::consts::TAU)
}

fn start(rng: &mut ChaCha8Rng) -> [f64; 2] {
    [rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0)]
}

fn constant_velocity(rng: &mut ChaCha8Rng) -> Vec<[f64; 2]> {
    let p0 = start(rng);
    let speed = rng.random_range(0.2..0.6);
    let th = heading(rng);
    let v = [speed * th.cos(), speed * th.sin()];
    (0..WINDOW_LEN)
        .map(|t| [p0[0] + t as f64 * v[0], p0[1] + t as f64 * v[1]])
        .collect()
}

fn piecewise_turn(rng: &mut ChaCha8Rng) -> Vec<[f64; 2]> {
    let mut p = start(rng);
    let speed = rng.random_range(0.2..0.6);
    let th = heading(rng);
    let turn_at = rng.random_range(4..WINDOW_LEN - 4);
    let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let th2 = th + sign * rng.random_range(0.5..1.5);
    let mut out = Vec::with_capacity(WINDOW_LEN);
    for t in 0..WINDOW_LEN {
        out.push(p);
        let a = if t + 1 < turn_at { th } else { th2 };
        p = [p[0] + speed * a.cos(), p[1] + speed * a.sin()];
    }
    out
}

const GOAL_OFFSETS: [f64; 5] = [-1.2, -0.6, 0.0, 0.6, 1.2];
const STEER: f64 = 0.25;
const JITTER_STD: f64 = 0.03;

fn goal_attracted(rng: &mut ChaCha8Rng) -> Vec<[f64; 2]> {
    let noise = Normal::new(0.0, JITTER_STD).expect("valid std");
    let mut p = start(rng);
    let speed = rng.random_range(0.25..0.45);
    let th = heading(rng);
    let mut v = [speed * th.cos(), speed * th.sin()];
    // Goals sit ahead of the walker; which one is only revealed after the
    // observed part, where steering starts.
    let offset = GOAL_OFFSETS[rng.random_range(0..GOAL_OFFSETS.len())];
    let reach = speed * WINDOW_LEN as f64 * rng.random_range(0.9..1.1);
    let goal = [
        p[0] + reach * (th + offset).cos(),
        p[1] + reach * (th + offset).sin(),
    ];
    let mut out = Vec::with_capacity(WINDOW_LEN);
    for t in 0..WINDOW_LEN {
        out.push(p);
        if t >= 7 {
            let to_goal = [goal[0] - p[0], goal[1] - p[1]];
            let norm = to_goal[0].hypot(to_goal[1]).max(1e-9);
            let want = [speed * to_goal[0] / norm, speed * to_goal[1] / norm];
            v = [
                (1.0 - STEER) * v[0] + STEER * want[0],
                (1.0 - STEER) * v[1] + STEER * want[1],
            ];
        }
        let jitter = |rng: &mut ChaCha8Rng| {
            let s: f64 = noise.sample(rng);
            s.clamp(-2.0 * JITTER_STD, 2.0 * JITTER_STD)
        };
        p = [p[0] + v[0] + jitter(rng), p[1] + v[1] + jitter(rng)];
    }
    out
}

/// `n` windows of the given kind, fully determined by `seed`.
pub fn synth_generate(kind: SynthKind, n: usize, seed: u64) -> Vec<TrajectoryWindow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let positions = match kind {
                SynthKind::ConstantVelocity => constant_velocity(&mut rng),
                SynthKind::PiecewiseTurn => piecewise_turn(&mut rng),
                SynthKind::GoalAttractedNoisy => goal_attracted(&mut rng),
            };
            TrajectoryWindow {
                positions,
                pedestrian_id: i as i64,
                scene: format!("synth-{kind}"),
                start_frame: 0,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn velocities(w: &TrajectoryWindow) -> Vec<[f64; 2]> {
        w.positions
            .windows(2)
            .map(|p| [p[1][0] - p[0][0], p[1][1] - p[0][1]])
            .collect()
    }

    #[test]
    fn constant_velocity_closed_form() {
        for w in synth_generate(SynthKind::ConstantVelocity, 20, 1) {
            let p0 = w.positions[0];
            let v = velocities(&w)[0];
            for (t, p) in w.positions.iter().enumerate() {
                assert!((p[0] - (p0[0] + t as f64 * v[0])).abs() < 1e-9);
                assert!((p[1] - (p0[1] + t as f64 * v[1])).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn seeded() {
        for kind in [
            SynthKind::ConstantVelocity,
            SynthKind::PiecewiseTurn,
            SynthKind::GoalAttractedNoisy,
        ] {
            assert_eq!(synth_generate(kind, 10, 42), synth_generate(kind, 10, 42));
            assert_ne!(synth_generate(kind, 10, 42), synth_generate(kind, 10, 43));
        }
    }

    #[test]
    fn piecewise_turn_has_two_velocities() {
        for w in synth_generate(SynthKind::PiecewiseTurn, 50, 9) {
            let mut distinct: Vec<[f64; 2]> = Vec::new();
            for v in velocities(&w) {
                if !distinct
                    .iter()
                    .any(|d| (d[0] - v[0]).abs() < 1e-9 && (d[1] - v[1]).abs() < 1e-9)
                {
                    distinct.push(v);
                }
            }
            assert_eq!(distinct.len(), 2, "{distinct:?}");
        }
    }

    #[test]
    fn windows_are_well_formed() {
        for kind in [
            SynthKind::ConstantVelocity,
            SynthKind::PiecewiseTurn,
            SynthKind::GoalAttractedNoisy,
        ] {
            for w in synth_generate(kind, 30, 5) {
                assert_eq!(w.positions.len(), WINDOW_LEN);
                assert!(w
                    .positions
                    .iter()
                    .all(|p| p[0].is_finite() && p[1].is_finite()));
            }
        }
    }

    #[test]
    fn parse_kind() {
        assert_eq!(
            "piecewise-turn".parse::<SynthKind>(),
            Ok(SynthKind::PiecewiseTurn)
        );
        assert!("zigzag".parse::<SynthKind>().is_err());
    }
}
