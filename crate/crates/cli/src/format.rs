//! CSV layouts shared by the commands and their tests.

use std::fmt::Write;

use supervit::profiler::{CostReport, ThroughputReport};
use supervit::scheduler::{SubnetTable, SweepPoint};

fn header(hash: &str, columns: &str) -> String {
    format!("# config_hash={hash}\n{columns}\n")
}

fn grid_rate(grid: usize, rate: f64) -> String {
    format!("{grid}x{grid},{rate:.1}")
}

/// `grid,rate,accuracy,gmacs`, one row per table entry.
pub fn eval_csv(table: &SubnetTable) -> String {
    let mut s = header(table.config_hash.as_deref().unwrap_or(""), "grid,rate,accuracy,gmacs");
    for e in &table.entries {
        let _ = writeln!(s, "{},{:.6},{:.6}", grid_rate(e.grid, e.rate), e.accuracy, e.macs as f64 / 1e9);
    }
    s
}

/// `grid,rate,gmacs,img_per_s`; throughput is blank when not measured.
pub fn cost_csv(hash: &str, rows: &[(CostReport, Option<ThroughputReport>)]) -> String {
    let mut s = header(hash, "grid,rate,gmacs,img_per_s");
    for (r, t) in rows {
        let tput = t.map(|t| format!("{:.2}", t.images_per_second)).unwrap_or_default();
        let _ = writeln!(s, "{},{:.3},{tput}", grid_rate(r.label.grid, r.label.rate), r.gmacs());
    }
    s
}

/// `tau,mean_gmacs,accuracy`, one row per threshold.
pub fn cascade_csv(hash: &str, points: &[SweepPoint]) -> String {
    let mut s = header(hash, "tau,mean_gmacs,accuracy");
    for p in points {
        let _ = writeln!(s, "{},{:.6},{:.6}", p.threshold, p.mean_macs / 1e9, p.accuracy);
    }
    s
}

/// Splits CLI CSV output into its config hash, column names and rows.
pub fn parse_csv_table(text: &str) -> Option<(String, Vec<String>, Vec<Vec<String>>)> {
    let mut lines = text.lines();
    let hash = lines.next()?.strip_prefix("# config_hash=")?.to_string();
    let split = |l: &str| l.split(',').map(str::to_string).collect::<Vec<_>>();
    let columns = split(lines.next()?);
    let rows = lines.filter(|l| !l.is_empty()).map(split).collect();
    Some((hash, columns, rows))
}
