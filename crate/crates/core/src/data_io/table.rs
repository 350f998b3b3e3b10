use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::sstg::{AgentClass, AgentId};

/// Feet to metres.
const FOOT: f64 = 0.3048;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Row {
    pub frame: i64,
    pub agent: AgentId,
    pub x: f64,
    pub y: f64,
    pub class: Option<AgentClass>,
}

/// Observed positions, one row per (frame, agent), sorted by frame then agent.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrajectoryTable {
    rows: Vec<Row>,
}

impl TrajectoryTable {
    /// Builds a table, rejecting duplicate (frame, agent) pairs.
    pub fn from_rows(mut rows: Vec<Row>) -> Result<Self> {
        rows.sort_by_key(|r| (r.frame, r.agent));
        if let Some(w) = rows
            .windows(2)
            .find(|w| (w[0].frame, w[0].agent) == (w[1].frame, w[1].agent))
        {
            return Err(Error::invalid(format!(
                "duplicate row for agent {} at frame {}",
                w[0].agent, w[0].frame
            )));
        }
        if let Some(r) = rows.iter().find(|r| !(r.x.is_finite() && r.y.is_finite())) {
            return Err(Error::invalid(format!(
                "non-finite position for agent {} at frame {}",
                r.agent, r.frame
            )));
        }
        Ok(Self { rows })
    }

    pub fn rows(&self) -> &[Row] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Distinct frame ids in ascending order.
    pub fn frames(&self) -> Vec<i64> {
        let mut f: Vec<i64> = self.rows.iter().map(|r| r.frame).collect();
        f.dedup();
        f
    }

    /// Smallest gap between consecutive distinct frames (1 for tables with
    /// fewer than two frames).
    pub fn frame_stride(&self) -> i64 {
        self.frames()
            .windows(2)
            .map(|w| w[1] - w[0])
            .min()
            .unwrap_or(1)
    }

    pub fn agents(&self) -> Vec<AgentId> {
        let mut a: Vec<AgentId> = self.rows.iter().map(|r| r.agent).collect();
        a.sort_unstable();
        a.dedup();
        a
    }

    /// Rows grouped by frame.
    pub fn by_frame(&self) -> BTreeMap<i64, &[Row]> {
        let mut out = BTreeMap::new();
        let mut start = 0;
        for i in 1..=self.rows.len() {
            if i == self.rows.len() || self.rows[i].frame != self.rows[start].frame {
                out.insert(self.rows[start].frame, &self.rows[start..i]);
                start = i;
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    /// `frame agent x y`, whitespace separated.
    Whitespace4,
    /// NGSIM CSV: `Vehicle_ID`, `Frame_ID`, `Local_X`, `Local_Y` in feet at
    /// 10 Hz; converted to metres and downsampled by 2.
    NgsimCsv,
    /// `frame agent class x y ...`, whitespace separated.
    Apollo,
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "whitespace4" => Ok(Self::Whitespace4),
            "ngsim-csv" => Ok(Self::NgsimCsv),
            "apollo" => Ok(Self::Apollo),
            _ => Err(Error::Config(format!(
                "unknown format `{s}` (whitespace4|ngsim-csv|apollo)"
            ))),
        }
    }
}

impl fmt::Display for Format {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Whitespace4 => "whitespace4",
            Self::NgsimCsv => "ngsim-csv",
            Self::Apollo => "apollo",
        })
    }
}

/// Mapping from Apollo class codes to agent classes. Unmapped codes load with
/// no class.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassMap(pub HashMap<i64, AgentClass>);

impl Default for ClassMap {
    fn default() -> Self {
        Self(HashMap::from([
            (1, AgentClass::Vehicle),
            (2, AgentClass::Vehicle),
            (3, AgentClass::Pedestrian),
            (4, AgentClass::Bicyclist),
        ]))
    }
}

impl FromStr for ClassMap {
    type Err = Error;

    /// `code:class` pairs separated by commas, e.g. `1:vehicle,3:pedestrian`.
    fn from_str(s: &str) -> Result<Self> {
        let mut map = HashMap::new();
        for item in s.split(',').map(str::trim).filter(|i| !i.is_empty()) {
            let (code, class) = item.split_once(':').ok_or_else(|| {
                Error::Config(format!("class map entry `{item}` is not code:class"))
            })?;
            let code: i64 = code
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad class code `{code}`")))?;
            let class = match class.trim() {
                "vehicle" => AgentClass::Vehicle,
                "pedestrian" => AgentClass::Pedestrian,
                "bicyclist" => AgentClass::Bicyclist,
                other => return Err(Error::Config(format!("unknown class `{other}`"))),
            };
            map.insert(code, class);
        }
        Ok(Self(map))
    }
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

/// Integer-valued field that may be written as a float (`780.0`).
fn parse_int(tok: &str) -> Option<i64> {
    if let Ok(v) = tok.parse::<i64>() {
        return Some(v);
    }
    let f: f64 = tok.parse().ok()?;
    (f.fract() == 0.0 && f.abs() < 9.0e15).then_some(f as i64)
}

fn parse_f64(tok: &str) -> Option<f64> {
    tok.parse::<f64>().ok().filter(|v| v.is_finite())
}

/// Checks per-agent frame monotonicity and (frame, agent) uniqueness in file
/// order, naming the offending line.
struct RowChecker {
    last_frame: HashMap<AgentId, i64>,
    seen: HashSet<(i64, AgentId)>,
}

impl RowChecker {
    fn new() -> Self {
        Self {
            last_frame: HashMap::new(),
            seen: HashSet::new(),
        }
    }

    fn check(&mut self, path: &Path, line: usize, frame: i64, agent: AgentId) -> Result<()> {
        if !self.seen.insert((frame, agent)) {
            return Err(parse_err(
                path,
                line,
                format!("duplicate row for agent {agent} at frame {frame}"),
            ));
        }
        if let Some(&prev) = self.last_frame.get(&agent) {
            if frame <= prev {
                return Err(parse_err(
                    path,
                    line,
                    format!("agent {agent}: frame {frame} does not follow frame {prev}"),
                ));
            }
        }
        self.last_frame.insert(agent, frame);
        Ok(())
    }
}

pub fn load_table(path: &Path, format: Format, classes: &ClassMap) -> Result<TrajectoryTable> {
    match format {
        Format::Whitespace4 => load_whitespace(path, false, classes),
        Format::Apollo => load_whitespace(path, true, classes),
        Format::NgsimCsv => load_ngsim(path),
    }
}

fn load_whitespace(path: &Path, apollo: bool, classes: &ClassMap) -> Result<TrajectoryTable> {
    let reader = BufReader::new(File::open(path)?);
    let mut rows = Vec::new();
    let mut checker = RowChecker::new();
    let need = if apollo { 5 } else { 4 };
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        let body = line.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let tok: Vec<&str> = body.split_whitespace().collect();
        if tok.len() < need || (!apollo && tok.len() != 4) {
            return Err(parse_err(
                path,
                lineno,
                format!("expected {need} columns, found {}", tok.len()),
            ));
        }
        let frame = parse_int(tok[0])
            .ok_or_else(|| parse_err(path, lineno, format!("bad frame `{}`", tok[0])))?;
        let agent = parse_int(tok[1])
            .filter(|&a| a >= 0)
            .ok_or_else(|| parse_err(path, lineno, format!("bad agent id `{}`", tok[1])))?
            as AgentId;
        let (class, xi) = if apollo {
            let code = parse_int(tok[2])
                .ok_or_else(|| parse_err(path, lineno, format!("bad class `{}`", tok[2])))?;
            (classes.0.get(&code).copied(), 3)
        } else {
            (None, 2)
        };
        let x = parse_f64(tok[xi])
            .ok_or_else(|| parse_err(path, lineno, format!("bad x `{}`", tok[xi])))?;
        let y = parse_f64(tok[xi + 1])
            .ok_or_else(|| parse_err(path, lineno, format!("bad y `{}`", tok[xi + 1])))?;
        checker.check(path, lineno, frame, agent)?;
        rows.push(Row {
            frame,
            agent,
            x,
            y,
            class,
        });
    }
    TrajectoryTable::from_rows(rows)
}

fn load_ngsim(path: &Path) -> Result<TrajectoryTable> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| parse_err(path, 1, e.to_string()))?;
    let headers = rdr
        .headers()
        .map_err(|e| parse_err(path, 1, e.to_string()))?
        .clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| parse_err(path, 1, format!("missing column `{name}`")))
    };
    let (ci, cf, cx, cy) = (
        col("Vehicle_ID")?,
        col("Frame_ID")?,
        col("Local_X")?,
        col("Local_Y")?,
    );
    let mut rows = Vec::new();
    let mut checker = RowChecker::new();
    for (i, rec) in rdr.records().enumerate() {
        let lineno = i + 2;
        let rec = rec.map_err(|e| parse_err(path, lineno, e.to_string()))?;
        let field = |c: usize| rec.get(c).unwrap_or("");
        let agent = parse_int(field(ci))
            .filter(|&a| a >= 0)
            .ok_or_else(|| parse_err(path, lineno, format!("bad Vehicle_ID `{}`", field(ci))))?
            as AgentId;
        let frame = parse_int(field(cf))
            .ok_or_else(|| parse_err(path, lineno, format!("bad Frame_ID `{}`", field(cf))))?;
        let x = parse_f64(field(cx))
            .ok_or_else(|| parse_err(path, lineno, format!("bad Local_X `{}`", field(cx))))?;
        let y = parse_f64(field(cy))
            .ok_or_else(|| parse_err(path, lineno, format!("bad Local_Y `{}`", field(cy))))?;
        checker.check(path, lineno, frame, agent)?;
        rows.push(Row {
            frame,
            agent,
            x: x * FOOT,
            y: y * FOOT,
            class: Some(AgentClass::Vehicle),
        });
    }
    // 10 Hz to 5 Hz: keep every other frame counted from the first one.
    let first = rows.iter().map(|r| r.frame).min().unwrap_or(0);
    rows.retain(|r| (r.frame - first) % 2 == 0);
    TrajectoryTable::from_rows(rows)
}

/// Writes `frame agent x y` lines. Coordinates use the shortest decimal form
/// that parses back to the same `f64`, so loading round-trips exactly.
pub fn write_whitespace4(table: &TrajectoryTable, mut w: impl Write) -> Result<()> {
    for r in table.rows() {
        writeln!(w, "{}\t{}\t{}\t{}", r.frame, r.agent, r.x, r.y)?;
    }
    Ok(())
}
