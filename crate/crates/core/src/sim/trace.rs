//! Time-indexed run records and their on-disk format.
//!
//! A trace file is plain text: one `#`-prefixed header record describing the
//! run, one comma-separated column-name line, then one comma-separated data
//! record per tick. Field order is stable:
//!
//! ```text
//! time, state_0.., u_0.., uref_0.., h_<i>_<j>.., alpha_<i>_<j>..,
//! dist_<i>_<j>.., status, solve_time
//! ```
//!
//! Pair columns iterate robot bodies in the outer loop and obstacles in the
//! inner loop. Floating-point values are printed with 9 significant digits.

use std::fmt::Write as _;
use std::path::Path;

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TickStatus {
    /// Controller solved normally.
    Ok,
    /// QP infeasible; the fallback control was applied.
    Fallback,
    /// Solver gave up; best iterate applied.
    HardFailure,
    /// No safety filter ran this tick.
    Unfiltered,
}

impl TickStatus {
    fn as_str(&self) -> &'static str {
        match self {
            TickStatus::Ok => "ok",
            TickStatus::Fallback => "fallback",
            TickStatus::HardFailure => "hard_failure",
            TickStatus::Unfiltered => "unfiltered",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "ok" => TickStatus::Ok,
            "fallback" => TickStatus::Fallback,
            "hard_failure" => TickStatus::HardFailure,
            "unfiltered" => TickStatus::Unfiltered,
            other => {
                return Err(Error::MalformedTrace(format!(
                    "unknown tick status `{other}`"
                )))
            }
        })
    }
}

#[derive(Debug, Clone)]
pub struct TickRecord {
    pub time: f64,
    pub state: Vec<f64>,
    pub control: Vec<f64>,
    pub reference: Vec<f64>,
    /// Controller barrier value per (robot body, obstacle) pair.
    pub pair_h: Vec<f64>,
    /// Ground-truth scaling factor per pair.
    pub pair_alpha: Vec<f64>,
    /// Ground-truth GJK distance per pair (m).
    pub pair_distance: Vec<f64>,
    pub status: TickStatus,
    /// Controller computation time this tick (s).
    pub solve_time: f64,
}

#[derive(Debug, Clone)]
pub struct Trace {
    pub scenario: String,
    pub seed: u64,
    pub dt: f64,
    pub duration: f64,
    pub robot_bodies: usize,
    pub obstacles: usize,
    pub state_dim: usize,
    pub control_dim: usize,
    pub ticks: Vec<TickRecord>,
}

/// 9 significant digits, reproducible across platforms.
pub fn fmt_g9(x: f64) -> String {
    if x == f64::INFINITY {
        "inf".into()
    } else if x == f64::NEG_INFINITY {
        "-inf".into()
    } else if x.is_nan() {
        "nan".into()
    } else {
        format!("{x:.8e}")
    }
}

fn parse_f64(s: &str) -> Result<f64> {
    match s {
        "inf" => Ok(f64::INFINITY),
        "-inf" => Ok(f64::NEG_INFINITY),
        "nan" => Ok(f64::NAN),
        _ => s
            .parse()
            .map_err(|e| Error::MalformedTrace(format!("bad float `{s}`: {e}"))),
    }
}

impl Trace {
    pub fn pairs(&self) -> usize {
        self.robot_bodies * self.obstacles
    }

    /// Copy with wall-clock solve times zeroed. Everything else in a trace is
    /// a pure function of the scenario and seed, so this is the view that
    /// determinism comparisons use.
    pub fn timing_free(&self) -> Trace {
        let mut t = self.clone();
        for tick in &mut t.ticks {
            tick.solve_time = 0.0;
        }
        t
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "# tvcbf-trace v1 scenario={} seed={} dt={} duration={} bodies={} obstacles={} state_dim={} control_dim={}",
            self.scenario,
            self.seed,
            fmt_g9(self.dt),
            fmt_g9(self.duration),
            self.robot_bodies,
            self.obstacles,
            self.state_dim,
            self.control_dim
        );
        let mut cols = vec!["time".to_string()];
        for i in 0..self.state_dim {
            cols.push(format!("state_{i}"));
        }
        for i in 0..self.control_dim {
            cols.push(format!("u_{i}"));
        }
        for i in 0..self.control_dim {
            cols.push(format!("uref_{i}"));
        }
        for kind in ["h", "alpha", "dist"] {
            for i in 0..self.robot_bodies {
                for j in 0..self.obstacles {
                    cols.push(format!("{kind}_{i}_{j}"));
                }
            }
        }
        cols.push("status".into());
        cols.push("solve_time".into());
        let _ = writeln!(out, "{}", cols.join(","));
        for t in &self.ticks {
            let mut fields = vec![fmt_g9(t.time)];
            fields.extend(t.state.iter().map(|v| fmt_g9(*v)));
            fields.extend(t.control.iter().map(|v| fmt_g9(*v)));
            fields.extend(t.reference.iter().map(|v| fmt_g9(*v)));
            fields.extend(t.pair_h.iter().map(|v| fmt_g9(*v)));
            fields.extend(t.pair_alpha.iter().map(|v| fmt_g9(*v)));
            fields.extend(t.pair_distance.iter().map(|v| fmt_g9(*v)));
            fields.push(t.status.as_str().into());
            fields.push(fmt_g9(t.solve_time));
            let _ = writeln!(out, "{}", fields.join(","));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::MalformedTrace("empty file".into()))?;
        if !header.starts_with("# tvcbf-trace v1 ") {
            return Err(Error::MalformedTrace("missing header record".into()));
        }
        let mut meta = std::collections::HashMap::new();
        for kv in header.trim_start_matches("# tvcbf-trace v1 ").split(' ') {
            if let Some((k, v)) = kv.split_once('=') {
                meta.insert(k.to_string(), v.to_string());
            }
        }
        let get = |k: &str| -> Result<String> {
            meta.get(k)
                .cloned()
                .ok_or_else(|| Error::MalformedTrace(format!("header missing `{k}`")))
        };
        let scenario = get("scenario")?;
        let seed: u64 = get("seed")?
            .parse()
            .map_err(|_| Error::MalformedTrace("bad seed".into()))?;
        let dt = parse_f64(&get("dt")?)?;
        let duration = parse_f64(&get("duration")?)?;
        let robot_bodies: usize = get("bodies")?
            .parse()
            .map_err(|_| Error::MalformedTrace("bad bodies".into()))?;
        let obstacles: usize = get("obstacles")?
            .parse()
            .map_err(|_| Error::MalformedTrace("bad obstacles".into()))?;
        let state_dim: usize = get("state_dim")?
            .parse()
            .map_err(|_| Error::MalformedTrace("bad state_dim".into()))?;
        let control_dim: usize = get("control_dim")?
            .parse()
            .map_err(|_| Error::MalformedTrace("bad control_dim".into()))?;

        // Column-name line.
        lines
            .next()
            .ok_or_else(|| Error::MalformedTrace("missing column line".into()))?;
        let pairs = robot_bodies * obstacles;
        let expected = 1 + state_dim + 2 * control_dim + 3 * pairs + 2;
        let mut ticks = Vec::new();
        for line in lines {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != expected {
                return Err(Error::MalformedTrace(format!(
                    "record has {} fields, expected {expected}",
                    fields.len()
                )));
            }
            let mut idx = 0;
            let mut take = |n: usize| -> Vec<&str> {
                let s = fields[idx..idx + n].to_vec();
                idx += n;
                s
            };
            let time = parse_f64(take(1)[0])?;
            let state = take(state_dim)
                .iter()
                .map(|s| parse_f64(s))
                .collect::<Result<Vec<_>>>()?;
            let control = take(control_dim)
                .iter()
                .map(|s| parse_f64(s))
                .collect::<Result<Vec<_>>>()?;
            let reference = take(control_dim)
                .iter()
                .map(|s| parse_f64(s))
                .collect::<Result<Vec<_>>>()?;
            let pair_h = take(pairs)
                .iter()
                .map(|s| parse_f64(s))
                .collect::<Result<Vec<_>>>()?;
            let pair_alpha = take(pairs)
                .iter()
                .map(|s| parse_f64(s))
                .collect::<Result<Vec<_>>>()?;
            let pair_distance = take(pairs)
                .iter()
                .map(|s| parse_f64(s))
                .collect::<Result<Vec<_>>>()?;
            let status = TickStatus::parse(take(1)[0])?;
            let solve_time = parse_f64(take(1)[0])?;
            ticks.push(TickRecord {
                time,
                state,
                control,
                reference,
                pair_h,
                pair_alpha,
                pair_distance,
                status,
                solve_time,
            });
        }
        Ok(Self {
            scenario,
            seed,
            dt,
            duration,
            robot_bodies,
            obstacles,
            state_dim,
            control_dim,
            ticks,
        })
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        Self::from_csv(&std::fs::read_to_string(path)?)
    }
}
