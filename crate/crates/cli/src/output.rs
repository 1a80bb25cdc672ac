//! CSV writers; numbers are pre-formatted by the caller.

use std::path::Path;

pub fn write_csv<H: AsRef<str>>(path: &Path, header: &[H], rows: Vec<Vec<String>>) -> csv::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header.iter().map(|h| h.as_ref()))?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.flush()?;
    Ok(())
}

/// Two-column `key,value` table.
pub fn write_key_values(path: &Path, pairs: &[(&str, String)]) -> csv::Result<()> {
    let rows = pairs.iter().map(|(k, v)| vec![k.to_string(), v.clone()]).collect();
    write_csv(path, &["key", "value"], rows)
}
