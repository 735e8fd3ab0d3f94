use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use crate::{Error, Result};

pub const CSV_HEADER: &str = "run,mode,round,scope,metric,value";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Scope {
    Global,
    Client(usize),
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scope::Global => f.write_str("global"),
            Scope::Client(n) => write!(f, "client-{n}"),
        }
    }
}

impl FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "global" {
            return Ok(Scope::Global);
        }
        s.strip_prefix("client-")
            .and_then(|n| n.parse().ok())
            .map(Scope::Client)
            .ok_or_else(|| Error::Argument(format!("bad scope {s:?}")))
    }
}

/// One measurement: `(run, mode, round, scope, metric)` identifies it.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub run: String,
    pub mode: String,
    pub round: u64,
    pub scope: Scope,
    pub metric: String,
    pub value: f64,
}

/// 17 significant digits, enough to read back the identical f64.
fn fmt_value(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn to_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::with_capacity(64 * (rows.len() + 1));
    out.push_str(CSV_HEADER);
    out.push('\n');
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.run,
            r.mode,
            r.round,
            r.scope,
            r.metric,
            fmt_value(r.value)
        )
        .expect("write to String");
    }
    out
}

pub fn emit_csv(rows: &[MetricsRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_csv(rows)).map_err(|e| Error::io(path, e))
}

pub fn parse_csv(text: &str) -> Result<Vec<MetricsRow>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == CSV_HEADER => {}
        _ => {
            return Err(Error::Parse {
                line: 1,
                msg: format!("expected header {CSV_HEADER:?}"),
            })
        }
    }
    lines
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, line)| {
            let bad = |msg: String| Error::Parse { line: i + 1, msg };
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != 6 {
                return Err(bad(format!("expected 6 fields, got {}", cells.len())));
            }
            Ok(MetricsRow {
                run: cells[0].to_string(),
                mode: cells[1].to_string(),
                round: cells[2].parse().map_err(|_| bad(format!("bad round {:?}", cells[2])))?,
                scope: cells[3].parse().map_err(|e: Error| bad(e.to_string()))?,
                metric: cells[4].to_string(),
                value: cells[5].parse().map_err(|_| bad(format!("bad value {:?}", cells[5])))?,
            })
        })
        .collect()
}

/// Global-scope series keyed by `(mode, metric)`, each a list of
/// `(round, value)` in row order.
pub fn plot_series(rows: &[MetricsRow]) -> BTreeMap<(String, String), Vec<(u64, f64)>> {
    let mut out: BTreeMap<(String, String), Vec<(u64, f64)>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.scope == Scope::Global) {
        out.entry((r.mode.clone(), r.metric.clone()))
            .or_default()
            .push((r.round, r.value));
    }
    out
}

/// Write `<dir>/<mode>_<metric>.dat` files with `round value` lines.
pub fn emit_plotdata(rows: &[MetricsRow], dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for ((mode, metric), series) in plot_series(rows) {
        let mut body = format!("# round {metric}\n");
        for (round, v) in series {
            writeln!(body, "{round} {}", fmt_value(v)).expect("write to String");
        }
        let path = dir.join(format!("{mode}_{metric}.dat"));
        std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(round: u64, scope: Scope, metric: &str, value: f64) -> MetricsRow {
        MetricsRow {
            run: "r".into(),
            mode: "meta_bayfl".into(),
            round,
            scope,
            metric: metric.into(),
            value,
        }
    }

    #[test]
    fn empty_is_header_only() {
        assert_eq!(to_csv(&[]), format!("{CSV_HEADER}\n"));
    }

    #[test]
    fn one_row_two_lines() {
        let text = to_csv(&[row(1, Scope::Client(3), "test_loss", 0.1)]);
        assert_eq!(text.lines().count(), 2);
        assert!(text.ends_with('\n') && !text.contains('\r'));
        assert_eq!(
            text.lines().nth(1).unwrap(),
            "r,meta_bayfl,1,client-3,test_loss,1.0000000000000001e-1"
        );
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let rows: Vec<MetricsRow> = (0..50)
            .map(|i| {
                row(
                    i,
                    if i % 2 == 0 {
                        Scope::Global
                    } else {
                        Scope::Client(i as usize)
                    },
                    "m",
                    (i as f64).sqrt() / 3.0 - 1e-300,
                )
            })
            .collect();
        assert_eq!(parse_csv(&to_csv(&rows)).unwrap(), rows);
        assert!(parse_csv("nope\n").is_err());
        assert!(matches!(
            parse_csv(&format!("{CSV_HEADER}\na,b\n")),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn plotdata_files() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![
            row(1, Scope::Global, "test_accuracy", 0.5),
            row(1, Scope::Client(0), "test_accuracy", 0.1),
            row(2, Scope::Global, "test_accuracy", 0.75),
        ];
        emit_plotdata(&rows, dir.path().join("plot")).unwrap();
        let text = std::fs::read_to_string(dir.path().join("plot/meta_bayfl_test_accuracy.dat")).unwrap();
        let data: Vec<&str> = text.lines().skip(1).collect();
        assert_eq!(data, vec!["1 5.0000000000000000e-1", "2 7.5000000000000000e-1"]);
    }

    #[test]
    fn unwritable_path_is_io_error() {
        assert!(matches!(emit_csv(&[], "/nonexistent-dir/m.csv"), Err(Error::Io { .. })));
    }
}
