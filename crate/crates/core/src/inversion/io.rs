//! Reference-current schedules as `t,I1,…,In` CSV.

use std::io::{Read, Write};

use nalgebra::DVector;

use super::{CurrentVector, InversionError};

pub fn write_reference_currents(
    writer: impl Write,
    times: &[f64],
    currents: &[CurrentVector],
) -> Result<(), InversionError> {
    if times.len() != currents.len() {
        return Err(InversionError::InvalidProblem("times and currents differ in length".into()));
    }
    let n = currents.first().map_or(0, |c| c.len());
    let csv_err = |e: csv::Error| InversionError::Parse(e.to_string());
    let mut w = csv::Writer::from_writer(writer);
    let header: Vec<String> = std::iter::once("t".to_string())
        .chain((1..=n).map(|i| format!("I{i}")))
        .collect();
    w.write_record(&header).map_err(csv_err)?;
    for (t, c) in times.iter().zip(currents) {
        if c.len() != n {
            return Err(InversionError::InvalidProblem("current vectors differ in length".into()));
        }
        let row: Vec<String> = std::iter::once(t.to_string()).chain(c.iter().map(f64::to_string)).collect();
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a schedule; a header row is optional. Times must strictly increase.
pub fn read_reference_currents(reader: impl Read) -> Result<(Vec<f64>, Vec<CurrentVector>), InversionError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(reader);
    let mut times = Vec::new();
    let mut currents = Vec::new();
    let mut width = None;
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| InversionError::Parse(e.to_string()))?;
        if row == 0 && rec.get(0).is_some_and(|f| f.parse::<f64>().is_err()) {
            continue;
        }
        let values = rec
            .iter()
            .map(|f| f.parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| InversionError::Parse(format!("row {}: {e}", row + 1)))?;
        if values.len() < 2 || *width.get_or_insert(values.len()) != values.len() {
            return Err(InversionError::Parse(format!("row {}: inconsistent column count", row + 1)));
        }
        if times.last().is_some_and(|&t| values[0] <= t) {
            return Err(InversionError::Parse(format!("row {}: times must strictly increase", row + 1)));
        }
        times.push(values[0]);
        currents.push(DVector::from_column_slice(&values[1..]));
    }
    Ok((times, currents))
}
