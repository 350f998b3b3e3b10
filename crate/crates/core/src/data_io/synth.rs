use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::table::{Row, TrajectoryTable};
use crate::error::{Error, Result};
use crate::pipeline::derive_seed;
use crate::sstg::{AgentClass, Point};

pub const MAX_CROWD: usize = 20;

/// Lateral offset of each agent at the meeting frame of an avoiding
/// opposing pair; the pair's closest approach is twice this.
pub const AVOID_OFFSET: f64 = 0.4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scenario {
    SoloLinear,
    ParallelPair,
    /// Two agents walking head-on. With `collide` they occupy the same point
    /// at the meeting frame; otherwise both swerve on a smooth arc.
    OpposingPair {
        collide: bool,
    },
    Crossing,
    /// `n` agents on straight lines with nearly the same velocity.
    Crowd(usize),
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "solo-linear" => Self::SoloLinear,
            "parallel-pair" => Self::ParallelPair,
            "opposing-pair" => Self::OpposingPair { collide: false },
            "opposing-pair-collide" => Self::OpposingPair { collide: true },
            "crossing" => Self::Crossing,
            _ => {
                let n = s
                    .strip_prefix("crowd(")
                    .and_then(|r| r.strip_suffix(')'))
                    .or_else(|| s.strip_prefix("crowd:"))
                    .and_then(|n| n.parse().ok())
                    .ok_or_else(|| Error::Config(format!("unknown scenario `{s}`")))?;
                Self::Crowd(n)
            }
        })
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::SoloLinear => f.write_str("solo-linear"),
            Self::ParallelPair => f.write_str("parallel-pair"),
            Self::OpposingPair { collide: false } => f.write_str("opposing-pair"),
            Self::OpposingPair { collide: true } => f.write_str("opposing-pair-collide"),
            Self::Crossing => f.write_str("crossing"),
            Self::Crowd(n) => write!(f, "crowd({n})"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthSpec {
    pub scenario: Scenario,
    /// Standard deviation of the Gaussian position noise, metres.
    pub noise: f64,
    pub seed: u64,
    pub frames: usize,
}

/// Generates one scene: every agent is present in frames `0..frames`.
pub fn synth(spec: &SynthSpec) -> Result<TrajectoryTable> {
    if let Scenario::Crowd(n) = spec.scenario {
        if n == 0 || n > MAX_CROWD {
            return Err(Error::invalid(format!(
                "crowd size {n} outside 1..={MAX_CROWD}"
            )));
        }
    }
    if !(spec.noise >= 0.0) || spec.frames < 2 {
        return Err(Error::invalid(
            "noise must be non-negative and frames at least 2",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let paths = match spec.scenario {
        Scenario::SoloLinear => solo(&mut rng, spec.frames),
        Scenario::ParallelPair => parallel(&mut rng, spec.frames),
        Scenario::OpposingPair { collide } => opposing(&mut rng, spec.frames, collide),
        Scenario::Crossing => crossing(&mut rng, spec.frames),
        Scenario::Crowd(n) => crowd(&mut rng, spec.frames, n),
    };
    // Random rigid placement; rotation is applied identically to every agent,
    // so coincident points stay coincident.
    let theta = rng.gen_range(0.0..std::f64::consts::TAU);
    let (s, c) = theta.sin_cos();
    let shift = [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)];
    let noise = Normal::new(0.0, spec.noise.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let mut rows = Vec::new();
    for (a, path) in paths.iter().enumerate() {
        for (f, p) in path.iter().enumerate() {
            let (mut x, mut y) = (
                c * p[0] - s * p[1] + shift[0],
                s * p[0] + c * p[1] + shift[1],
            );
            if spec.noise > 0.0 {
                x += noise.sample(&mut rng);
                y += noise.sample(&mut rng);
            }
            rows.push(Row {
                frame: f as i64,
                agent: a as u64 + 1,
                x,
                y,
                class: Some(AgentClass::Pedestrian),
            });
        }
    }
    TrajectoryTable::from_rows(rows)
}

fn speed<R: Rng>(rng: &mut R) -> f64 {
    rng.gen_range(0.3..0.6)
}

fn line(start: Point, v: Point, frames: usize) -> Vec<Point> {
    (0..frames)
        .map(|t| [start[0] + v[0] * t as f64, start[1] + v[1] * t as f64])
        .collect()
}

fn solo<R: Rng>(rng: &mut R, frames: usize) -> Vec<Vec<Point>> {
    vec![line([0.0, 0.0], [speed(rng), 0.0], frames)]
}

fn parallel<R: Rng>(rng: &mut R, frames: usize) -> Vec<Vec<Point>> {
    let v = speed(rng);
    let gap = rng.gen_range(0.8..1.5);
    vec![
        line([0.0, 0.0], [v, 0.0], frames),
        line([0.0, gap], [v, 0.0], frames),
    ]
}

/// Both agents reach `x = 0` at the meeting frame, 70% into the scene.
fn opposing<R: Rng>(rng: &mut R, frames: usize, collide: bool) -> Vec<Vec<Point>> {
    let v = speed(rng);
    let meet = (frames as f64 * 0.7).round();
    let amp = if collide { 0.0 } else { AVOID_OFFSET };
    let width = 5.0;
    let bump = |t: f64| {
        let d = (t - meet) / width;
        if d.abs() < 1.0 {
            0.5 * (1.0 + (std::f64::consts::PI * d).cos())
        } else {
            0.0
        }
    };
    let a = (0..frames).map(|t| {
        let t = t as f64;
        [v * (t - meet), amp * bump(t)]
    });
    let b = (0..frames).map(|t| {
        let t = t as f64;
        [-v * (t - meet), -amp * bump(t)]
    });
    vec![a.collect(), b.collect()]
}

/// Perpendicular paths through the origin, the second agent four frames later.
fn crossing<R: Rng>(rng: &mut R, frames: usize) -> Vec<Vec<Point>> {
    let (va, vb) = (speed(rng), speed(rng));
    let ca = (frames as f64 * 0.5).round();
    let cb = ca + 4.0;
    vec![
        line([-va * ca, 0.0], [va, 0.0], frames),
        line([0.0, -vb * cb], [0.0, vb], frames),
    ]
}

/// A group walking together: every agent keeps a constant velocity close to
/// a shared one (heading within ±0.05 rad, speed within ±0.02 m/frame), start
/// points at least 0.5 m apart.
fn crowd<R: Rng>(rng: &mut R, frames: usize, n: usize) -> Vec<Vec<Point>> {
    let heading = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
    let base = speed(rng);
    let mut starts: Vec<Point> = Vec::with_capacity(n);
    while starts.len() < n {
        let p = [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)];
        if starts
            .iter()
            .all(|q| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt() >= 0.5)
        {
            starts.push(p);
        }
    }
    starts
        .into_iter()
        .map(|p| {
            let h = heading + rng.gen_range(-0.05..0.05);
            let s = base + rng.gen_range(-0.02..0.02);
            line(p, [s * h.cos(), s * h.sin()], frames)
        })
        .collect()
}

/// `count` single-scene tables cycling through the five scenarios (solo,
/// parallel, avoiding opposing pair, crossing, crowd of 3 to 8).
pub fn synthetic_corpus(
    count: usize,
    noise: f64,
    seed: u64,
    frames: usize,
) -> Result<Vec<(Scenario, TrajectoryTable)>> {
    (0..count)
        .map(|i| {
            let s = derive_seed(seed, i as u64);
            let scenario = match i % 5 {
                0 => Scenario::SoloLinear,
                1 => Scenario::ParallelPair,
                2 => Scenario::OpposingPair { collide: false },
                3 => Scenario::Crossing,
                _ => Scenario::Crowd(3 + (s % 6) as usize),
            };
            let table = synth(&SynthSpec {
                scenario,
                noise,
                seed: s,
                frames,
            })?;
            Ok((scenario, table))
        })
        .collect()
}
