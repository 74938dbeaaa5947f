//! Checks the artifacts written by `scripts/reproduce.sh`.
//!
//! usage: check_reproduction <out-dir>

use std::path::Path;
use std::process::ExitCode;

use lsv_calib::report::{read_csv, IvRow};
use lsv_calib::stat::StatSummary;

fn desk_study(dir: &Path) -> Result<bool, String> {
    let text = std::fs::read_to_string(dir.join("summary.json")).map_err(|e| e.to_string())?;
    let summary: StatSummary = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    let mut good = 0;
    for r in &summary.runs {
        let ok = !r.skipped
            && r.slice_max_error.iter().all(|e| *e <= 0.01)
            && r.slice_mean_error.iter().all(|e| *e <= 0.005);
        let state = if r.skipped { format!("skipped ({})", r.skip_reason.as_deref().unwrap_or("")) } else { String::new() };
        println!(
            "  run {}: max {:.4?} mean {:.4?} {} {state}",
            r.run_id,
            r.slice_max_error,
            r.slice_mean_error,
            if ok { "ok" } else { "miss" }
        );
        good += usize::from(ok);
    }
    let secs: f64 = summary.metadata.run_secs.iter().sum();
    println!("  {good} of {} samples within max 0.01 / mean 0.005, {:.1} h CPU", summary.samples, secs / 3600.0);
    Ok(good >= 4 && summary.samples == 5)
}

fn robust(dir: &Path) -> Result<bool, String> {
    let rows: Vec<IvRow> = read_csv(&dir.join("iv_table.csv")).map_err(|e| e.to_string())?;
    let inside = rows
        .iter()
        .filter(|r| matches!((r.iv_lo, r.iv_hi), (Some(lo), Some(hi)) if r.iv_model >= lo && r.iv_model <= hi))
        .count();
    let frac = inside as f64 / rows.len() as f64;
    println!("  model IV inside the envelope at {inside}/{} strikes ({:.1}%)", rows.len(), 100.0 * frac);
    Ok(frac >= 0.9)
}

fn main() -> ExitCode {
    let Some(out) = std::env::args().nth(1) else {
        eprintln!("usage: check_reproduction <out-dir>");
        return ExitCode::from(2);
    };
    let out = Path::new(&out);
    let mut all = true;
    for (n, name, f) in [(4, "stat-test", desk_study as fn(&Path) -> Result<bool, String>), (5, "robust", robust)] {
        println!("criterion {n} ({name}):");
        let verdict = f(&out.join(name)).unwrap_or_else(|e| {
            println!("  cannot read artifacts: {e}");
            false
        });
        println!("criterion {n}: {}", if verdict { "PASS" } else { "FAIL" });
        all &= verdict;
    }
    if all { ExitCode::SUCCESS } else { ExitCode::FAILURE }
}
