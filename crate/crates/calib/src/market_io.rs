//! Market smiles as CSV (`maturity,strike,price,implied_vol,std_err`) or
//! JSON, and ground-truth parameters as JSON.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use lsv_core::ground_truth::{SmileGrid, SmileSlice, XiParams};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Debug, Serialize, Deserialize)]
struct MarketRow {
    maturity: f64,
    strike: f64,
    price: f64,
    implied_vol: f64,
    std_err: f64,
}

pub fn write_market_csv<W: Write>(out: W, grid: &SmileGrid) -> csv::Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    for s in &grid.slices {
        for j in 0..s.len() {
            w.serialize(MarketRow {
                maturity: s.maturity,
                strike: s.strikes[j],
                price: s.prices[j],
                implied_vol: s.implied_vols[j],
                std_err: s.std_errs[j],
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Rows are grouped into slices by maturity, in file order. Spot is 1;
/// missing or non-finite implied vols are marked as failed.
pub fn read_market_csv<R: Read>(input: R) -> std::result::Result<SmileGrid, String> {
    let mut r = csv::Reader::from_reader(input);
    let mut slices: Vec<SmileSlice> = Vec::new();
    for (line, row) in r.deserialize::<MarketRow>().enumerate() {
        let row = row.map_err(|e| format!("row {}: {e}", line + 1))?;
        if !(row.maturity > 0.0) || !(row.strike > 0.0) || !row.price.is_finite() {
            return Err(format!("row {}: maturity, strike and price must be positive and finite", line + 1));
        }
        let new_slice = slices.last().is_none_or(|s| s.maturity != row.maturity);
        if new_slice {
            if slices.iter().any(|s| s.maturity == row.maturity) {
                return Err(format!("row {}: maturity {} is not contiguous", line + 1, row.maturity));
            }
            slices.push(SmileSlice {
                maturity: row.maturity,
                strikes: Vec::new(),
                prices: Vec::new(),
                implied_vols: Vec::new(),
                std_errs: Vec::new(),
                iv_failed: Vec::new(),
            });
        }
        let s = slices.last_mut().unwrap();
        s.strikes.push(row.strike);
        s.prices.push(row.price);
        s.implied_vols.push(row.implied_vol);
        s.std_errs.push(row.std_err);
        s.iv_failed.push(!row.implied_vol.is_finite());
    }
    if slices.is_empty() {
        return Err("no rows".into());
    }
    let grid = SmileGrid { spot: 1.0, slices };
    grid.validate().map_err(|e| e.to_string())?;
    Ok(grid)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| CliError::io(path, e))
}

pub fn save_market(path: &Path, grid: &SmileGrid) -> Result<()> {
    let f = create(path)?;
    if path.extension().is_some_and(|e| e == "json") {
        write_json(path, f, grid)
    } else {
        write_market_csv(f, grid).map_err(|e| CliError::format(path, e))
    }
}

pub fn load_market(path: &Path) -> Result<SmileGrid> {
    let f = File::open(path).map_err(|e| CliError::io(path, e))?;
    if path.extension().is_some_and(|e| e == "json") {
        let g: SmileGrid = serde_json::from_reader(std::io::BufReader::new(f)).map_err(|e| CliError::format(path, e))?;
        g.validate().map_err(|e| CliError::format(path, e))?;
        Ok(g)
    } else {
        read_market_csv(f).map_err(|e| CliError::format(path, e))
    }
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize, W: Write>(path: &Path, mut out: W, value: &T) -> Result<()> {
    serde_json::to_writer_pretty(&mut out, value).map_err(|e| CliError::format(path, e))?;
    out.write_all(b"\n").and_then(|_| out.flush()).map_err(|e| CliError::io(path, e))
}

pub fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_json(path, create(path)?, value)
}

pub fn load_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::format(path, e))
}

pub fn load_xi(path: &Path) -> Result<XiParams> {
    let xi: XiParams = load_json(path)?;
    xi.validate().map_err(|e| CliError::format(path, e))?;
    Ok(xi)
}

/// `market.csv` -> `market.xi.json`
pub fn xi_sidecar(market: &Path) -> std::path::PathBuf {
    market.with_extension("xi.json")
}

pub(crate) fn create_file(path: &Path) -> Result<BufWriter<File>> {
    create(path)
}
