//! Benchmark records, aggregation and output formats.

use std::fmt;
use std::io;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Sequential in-process run, or a farmed run with `n` workers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Mode {
    Sequential,
    Workers(usize),
}

impl Mode {
    pub fn workers(self) -> Option<usize> {
        match self {
            Mode::Sequential => None,
            Mode::Workers(n) => Some(n),
        }
    }

    fn label(self) -> String {
        match self {
            Mode::Sequential => "Sequential".into(),
            Mode::Workers(1) => "1 worker".into(),
            Mode::Workers(n) => format!("{n} workers"),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Mode::Sequential => f.write_str("sequential"),
            Mode::Workers(n) => write!(f, "{n}"),
        }
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s == "sequential" {
            return Ok(Mode::Sequential);
        }
        match s.parse::<usize>() {
            Ok(n) if n >= 1 => Ok(Mode::Workers(n)),
            _ => Err(format!("bad mode {s:?}: expected \"sequential\" or a worker count")),
        }
    }
}

impl From<Mode> for String {
    fn from(m: Mode) -> String {
        m.to_string()
    }
}

impl TryFrom<String> for Mode {
    type Error = String;

    fn try_from(s: String) -> Result<Self, String> {
        s.parse()
    }
}

/// One timed EA run. A failed run keeps its row with `ok = false`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepRecord {
    pub mode: Mode,
    pub rep: usize,
    pub seed: u64,
    pub wall_s: f64,
    pub test_error_pct: Option<f64>,
    pub ok: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub mode: Mode,
    pub reps: usize,
    pub mean_wall_s: f64,
    pub stddev_wall_s: f64,
    pub mean_test_error_pct: f64,
    pub stddev_error: f64,
    /// Empty when there is no sequential row to compare against.
    pub speedup_vs_sequential: Option<f64>,
}

/// Mean and sample standard deviation (n - 1 denominator; 0 for one value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let ss: f64 = xs.iter().map(|x| (x - mean) * (x - mean)).sum();
    (mean, (ss / (n - 1.0)).sqrt())
}

/// Aggregates successful reps per mode, sequential first, then by worker
/// count.
pub fn aggregate(reps: &[RepRecord]) -> Vec<BenchRow> {
    let mut modes: Vec<Mode> = reps.iter().filter(|r| r.ok).map(|r| r.mode).collect();
    modes.sort();
    modes.dedup();
    let mut rows: Vec<BenchRow> = modes
        .into_iter()
        .map(|mode| {
            let ok: Vec<&RepRecord> = reps.iter().filter(|r| r.ok && r.mode == mode).collect();
            let walls: Vec<f64> = ok.iter().map(|r| r.wall_s).collect();
            let errors: Vec<f64> = ok.iter().filter_map(|r| r.test_error_pct).collect();
            let (mean_wall_s, stddev_wall_s) = mean_std(&walls);
            let (mean_test_error_pct, stddev_error) = mean_std(&errors);
            BenchRow {
                mode,
                reps: ok.len(),
                mean_wall_s,
                stddev_wall_s,
                mean_test_error_pct,
                stddev_error,
                speedup_vs_sequential: None,
            }
        })
        .collect();
    let sequential = rows.iter().find(|r| r.mode == Mode::Sequential).map(|r| r.mean_wall_s);
    if let Some(seq) = sequential {
        for row in &mut rows {
            row.speedup_vs_sequential = Some(if row.mode == Mode::Sequential {
                1.0
            } else {
                seq / row.mean_wall_s
            });
        }
    }
    rows
}

pub fn write_csv<T: Serialize, W: io::Write>(records: &[T], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<T: for<'de> Deserialize<'de>, R: io::Read>(input: R) -> csv::Result<Vec<T>> {
    csv::Reader::from_reader(input).deserialize().collect()
}

/// Aligned text table: mode, test error, wall time, speedup.
pub fn render_table(rows: &[BenchRow]) -> String {
    let mut rows = rows.to_vec();
    rows.sort_by_key(|r| r.mode);
    let body: Vec<[String; 5]> = rows
        .iter()
        .map(|r| {
            [
                r.mode.label(),
                format!("{:.2} ± {:.2}", r.mean_test_error_pct, r.stddev_error),
                format!("{:.2} ± {:.2}", r.mean_wall_s, r.stddev_wall_s),
                r.speedup_vs_sequential.map_or("-".into(), |s| format!("{s:.2}")),
                r.reps.to_string(),
            ]
        })
        .collect();
    let header = ["Mode", "Test error (%)", "Time (s)", "Speedup", "Reps"].map(String::from);
    let mut widths = header.clone().map(|h| h.chars().count());
    for row in &body {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |cells: &[String; 5]| {
        let parts: Vec<String> = cells
            .iter()
            .zip(widths)
            .enumerate()
            .map(|(i, (c, w))| {
                let pad = " ".repeat(w - c.chars().count());
                if i == 0 { format!("{c}{pad}") } else { format!("{pad}{c}") }
            })
            .collect();
        parts.join("  ").trim_end().to_string()
    };
    let mut out = line(&header);
    out.push('\n');
    out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
    out.push('\n');
    for row in &body {
        out.push_str(&line(row));
        out.push('\n');
    }
    out
}

/// `workers speedup ideal` per worker-count row; empty without a
/// sequential baseline.
pub fn gnuplot_data(rows: &[BenchRow]) -> String {
    let mut out = String::from("# workers speedup ideal\n");
    let mut farmed: Vec<&BenchRow> = rows.iter().filter(|r| r.mode.workers().is_some()).collect();
    farmed.sort_by_key(|r| r.mode);
    for r in farmed {
        if let (Some(n), Some(s)) = (r.mode.workers(), r.speedup_vs_sequential) {
            out.push_str(&format!("{n} {s} {n}\n"));
        }
    }
    out
}

pub const GNUPLOT_SCRIPT: &str = "\
set xlabel 'workers'
set ylabel 'speedup'
set key top left
set grid
f(x) = x
plot 'speedup.dat' using 1:2 with linespoints dashtype 2 title 'speedup', \\
     f(x) with lines title 'f(x) = x'
";

#[cfg(test)]
mod tests {
    use super::*;

    fn rep(mode: Mode, rep: usize, wall_s: f64, err: f64) -> RepRecord {
        RepRecord {
            mode,
            rep,
            seed: rep as u64,
            wall_s,
            test_error_pct: Some(err),
            ok: true,
        }
    }

    #[test]
    fn sample_stddev_by_hand() {
        // mean 4; squared deviations 4, 0, 4; 8 / (3 - 1) = 4
        assert_eq!(mean_std(&[2.0, 4.0, 6.0]), (4.0, 2.0));
        // mean 2; deviations 1, 0, 1 -> sqrt(2 / 2) = 1
        assert_eq!(mean_std(&[1.0, 2.0, 3.0]), (2.0, 1.0));
        assert_eq!(mean_std(&[7.5]), (7.5, 0.0));
    }

    #[test]
    fn mode_text_and_order() {
        for m in [Mode::Sequential, Mode::Workers(1), Mode::Workers(12)] {
            assert_eq!(m.to_string().parse::<Mode>().unwrap(), m);
        }
        assert!("0".parse::<Mode>().is_err());
        assert!("fast".parse::<Mode>().is_err());
        let mut v = vec![Mode::Workers(3), Mode::Sequential, Mode::Workers(1)];
        v.sort();
        assert_eq!(v, vec![Mode::Sequential, Mode::Workers(1), Mode::Workers(3)]);
    }

    #[test]
    fn single_sequential_row_has_unit_speedup() {
        let rows = aggregate(&[rep(Mode::Sequential, 0, 3.0, 30.0)]);
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].speedup_vs_sequential, Some(1.0));
        assert!(render_table(&rows).contains("1.00"));
    }

    #[test]
    fn speedup_is_ratio_of_means() {
        let reps = vec![
            rep(Mode::Workers(2), 0, 5.0, 30.0),
            rep(Mode::Sequential, 0, 9.0, 31.0),
            rep(Mode::Sequential, 1, 11.0, 31.0),
            rep(Mode::Workers(2), 1, 5.0, 32.0),
        ];
        let rows = aggregate(&reps);
        assert_eq!(rows[0].mode, Mode::Sequential);
        assert_eq!(rows[0].mean_wall_s, 10.0);
        assert_eq!(rows[0].stddev_error, 0.0);
        assert_eq!(rows[1].speedup_vs_sequential, Some(2.0));
        assert_eq!(rows[1].mean_test_error_pct, 31.0);
    }

    #[test]
    fn failed_reps_excluded() {
        let mut bad = rep(Mode::Workers(1), 1, 1000.0, 99.0);
        bad.ok = false;
        let rows = aggregate(&[rep(Mode::Workers(1), 0, 4.0, 30.0), bad]);
        assert_eq!((rows[0].reps, rows[0].mean_wall_s), (1, 4.0));
        assert_eq!(rows[0].speedup_vs_sequential, None);
    }

    #[test]
    fn table_sorted_sequential_first() {
        let rows = aggregate(&[
            rep(Mode::Workers(4), 0, 1.0, 30.0),
            rep(Mode::Workers(2), 0, 2.0, 30.0),
            rep(Mode::Sequential, 0, 4.0, 30.0),
        ]);
        let mut shuffled = rows.clone();
        shuffled.reverse();
        let table = render_table(&shuffled);
        let order: Vec<&str> = table.lines().skip(2).map(|l| l.split("  ").next().unwrap()).collect();
        assert_eq!(order, vec!["Sequential", "2 workers", "4 workers"]);
        assert_eq!(gnuplot_data(&rows), "# workers speedup ideal\n2 2 2\n4 4 4\n");
    }

    #[test]
    fn rep_csv_reproduces_aggregates_exactly() {
        let reps = vec![
            rep(Mode::Sequential, 0, 0.1 + 0.2, 100.0 / 3.0),
            rep(Mode::Sequential, 1, 1.0 / 7.0, 200.0 / 3.0),
            rep(Mode::Workers(3), 0, 2.0f64.sqrt(), 1e-17),
            RepRecord {
                test_error_pct: None,
                ok: false,
                ..rep(Mode::Workers(3), 1, 5.0, 0.0)
            },
        ];
        let mut buf = Vec::new();
        write_csv(&reps, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("mode,rep,seed,wall_s,test_error_pct,ok\n"));
        let back: Vec<RepRecord> = read_csv(&buf[..]).unwrap();
        assert_eq!(back, reps);
        assert_eq!(aggregate(&back), aggregate(&reps));

        let rows = aggregate(&reps);
        let mut buf = Vec::new();
        write_csv(&rows, &mut buf).unwrap();
        assert_eq!(read_csv::<BenchRow, _>(&buf[..]).unwrap(), rows);
    }
}
