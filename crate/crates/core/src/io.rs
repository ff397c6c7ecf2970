//! Observation windows as single-column CSV.
//!
//! The header is `y` for a window starting at index 1, or `y[<origin>]`
//! with the index of the first row otherwise, e.g. `y[-5]`.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::inference::ObservationWindow;

fn parse_header(h: &str) -> Result<i64> {
    let h = h.trim();
    if h == "y" {
        return Ok(1);
    }
    h.strip_prefix("y[")
        .and_then(|r| r.strip_suffix(']'))
        .and_then(|o| o.trim().parse().ok())
        .ok_or_else(|| Error::InvalidArgument(format!("observation header must be `y` or `y[<origin>]`, got `{h}`")))
}

pub fn read_observations<R: Read>(reader: R) -> Result<ObservationWindow> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::InvalidArgument(format!("observation csv: {e}")))?
        .clone();
    if headers.len() != 1 {
        return Err(Error::InvalidArgument(format!(
            "observation csv must have one column, found {}",
            headers.len()
        )));
    }
    let origin = parse_header(&headers[0])?;
    let mut values = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::InvalidArgument(format!("observation csv: {e}")))?;
        let field = rec[0].trim();
        let v: f64 = field
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("observation csv row {}: `{field}` is not a number", row + 2)))?;
        if !v.is_finite() {
            return Err(Error::InvalidObservation(v));
        }
        values.push(v);
    }
    Ok(ObservationWindow::new(values, origin))
}

pub fn write_observations<W: Write>(writer: W, window: &ObservationWindow) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let header = if window.index_origin == 1 {
        "y".to_string()
    } else {
        format!("y[{}]", window.index_origin)
    };
    let io_err = |e: csv::Error| Error::InvalidArgument(format!("observation csv: {e}"));
    wtr.write_record([header]).map_err(io_err)?;
    for v in &window.values {
        wtr.write_record([format!("{v:?}")]).map_err(io_err)?;
    }
    wtr.flush().map_err(|e| Error::InvalidArgument(format!("observation csv: {e}")))?;
    Ok(())
}
