use super::table::TrajectoryTable;
use super::window::{window_span, windows};
use crate::error::{Error, Result};
use crate::sstg::TrajectoryWindow;

#[derive(Clone, Debug)]
pub struct NamedTable {
    pub name: String,
    pub table: TrajectoryTable,
}

#[derive(Clone, Debug, PartialEq)]
pub enum SplitProtocol {
    /// Every window of the named table is test data; the last `val_fraction`
    /// of each remaining table is validation, the rest training.
    LeaveOneOut { test: String, val_fraction: f64 },
    /// Per table, the last `test` fraction of windows is test data and the
    /// `val` fraction before it is validation.
    Fraction { test: f64, val: f64 },
}

#[derive(Clone, Debug, Default)]
pub struct Split {
    pub train: Vec<TrajectoryWindow>,
    pub val: Vec<TrajectoryWindow>,
    pub test: Vec<TrajectoryWindow>,
}

/// Cuts each table's frame range into contiguous train / val / test segments
/// and windows each segment on its own, so no window crosses a boundary.
///
/// A segment boundary sits at the anchor of the first window assigned to the
/// later part; windows of the earlier part that would reach past it are
/// dropped rather than shared.
pub fn split(
    tables: &[NamedTable],
    protocol: &SplitProtocol,
    t_obs: usize,
    t_pred: usize,
    stride: usize,
) -> Result<Split> {
    let mut out = Split::default();
    match protocol {
        SplitProtocol::LeaveOneOut { test, val_fraction } => {
            check_fraction(*val_fraction, "val")?;
            if !tables.iter().any(|t| &t.name == test) {
                let names: Vec<&str> = tables.iter().map(|t| t.name.as_str()).collect();
                return Err(Error::invalid(format!(
                    "unknown dataset `{test}` (have {names:?})"
                )));
            }
            for t in tables {
                let ws = windows(&t.table, t_obs, t_pred, stride)?;
                if &t.name == test {
                    out.test.extend(ws);
                } else {
                    let [train, val, _] = cut(ws, *val_fraction, 0.0);
                    out.train.extend(train);
                    out.val.extend(val);
                }
            }
        }
        SplitProtocol::Fraction { test, val } => {
            check_fraction(*test, "test")?;
            check_fraction(*val, "val")?;
            if test + val > 1.0 {
                return Err(Error::Config("test and val fractions exceed 1".into()));
            }
            for t in tables {
                let [train, v, te] = cut(windows(&t.table, t_obs, t_pred, stride)?, *val, *test);
                out.train.extend(train);
                out.val.extend(v);
                out.test.extend(te);
            }
        }
    }
    Ok(out)
}

fn check_fraction(f: f64, name: &str) -> Result<()> {
    if (0.0..=1.0).contains(&f) {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} fraction {f} outside [0, 1]")))
    }
}

/// Splits anchor-ordered windows into [train, val, test] segments.
fn cut(ws: Vec<TrajectoryWindow>, val: f64, test: f64) -> [Vec<TrajectoryWindow>; 3] {
    let n = ws.len();
    let n_test = (test * n as f64).round() as usize;
    let n_val = ((val * n as f64).round() as usize).min(n - n_test);
    let anchor = |i: usize| ws.get(i).map_or(i64::MAX, |w| w.frames[0]);
    let test_from = anchor(n - n_test);
    let val_from = anchor(n - n_test - n_val);
    let mut parts: [Vec<TrajectoryWindow>; 3] = Default::default();
    for w in ws {
        let (start, end) = window_span(&w);
        if start >= test_from {
            parts[2].push(w);
        } else if start >= val_from {
            if end < test_from {
                parts[1].push(w);
            }
        } else if end < val_from {
            parts[0].push(w);
        }
    }
    parts
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_io::table::Row;

    fn table(frames: i64) -> TrajectoryTable {
        TrajectoryTable::from_rows(
            (0..frames)
                .map(|f| Row {
                    frame: f,
                    agent: 1,
                    x: f as f64 * 0.1,
                    y: 0.0,
                    class: None,
                })
                .collect(),
        )
        .unwrap()
    }

    fn named(name: &str, frames: i64) -> NamedTable {
        NamedTable {
            name: name.into(),
            table: table(frames),
        }
    }

    #[test]
    fn quarter_of_a_hundred_windows() {
        // 100 windows of 3 frames with stride 1 need 102 frames.
        let s = split(
            &[named("a", 102)],
            &SplitProtocol::Fraction {
                test: 0.25,
                val: 0.0,
            },
            2,
            1,
            1,
        )
        .unwrap();
        assert_eq!(s.test.len(), 25);
        assert_eq!(s.test[0].frames[0], 75);
        // Windows anchored at 73 and 74 would reach frame 75 and are dropped.
        assert_eq!(s.train.len(), 73);
    }

    #[test]
    fn segments_are_disjoint() {
        let s = split(
            &[named("a", 300)],
            &SplitProtocol::Fraction {
                test: 0.2,
                val: 0.1,
            },
            8,
            12,
            1,
        )
        .unwrap();
        let spans = |v: &[TrajectoryWindow]| v.iter().map(window_span).collect::<Vec<_>>();
        let (tr, va, te) = (spans(&s.train), spans(&s.val), spans(&s.test));
        assert!(!tr.is_empty() && !va.is_empty() && !te.is_empty());
        let max_end = |v: &[(i64, i64)]| v.iter().map(|s| s.1).max().unwrap();
        let min_start = |v: &[(i64, i64)]| v.iter().map(|s| s.0).min().unwrap();
        assert!(max_end(&tr) < min_start(&va));
        assert!(max_end(&va) < min_start(&te));
    }

    #[test]
    fn leave_one_out() {
        let tables: Vec<NamedTable> = ["eth", "hotel", "univ", "zara1", "zara2"]
            .iter()
            .map(|n| named(n, 40))
            .collect();
        let s = split(
            &tables,
            &SplitProtocol::LeaveOneOut {
                test: "eth".into(),
                val_fraction: 0.0,
            },
            8,
            12,
            1,
        )
        .unwrap();
        assert_eq!(s.test.len(), 21);
        assert_eq!(s.train.len(), 4 * 21);
        let bad = SplitProtocol::LeaveOneOut {
            test: "nope".into(),
            val_fraction: 0.0,
        };
        assert!(split(&tables, &bad, 8, 12, 1).is_err());
    }
}
