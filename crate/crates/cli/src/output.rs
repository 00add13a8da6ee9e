//! CSV and JSON writers. Reals are written in plain decimal notation with 17
//! significant digits, which round-trips every `f64`.

use std::fs;
use std::path::Path;

use clce_core::Result;
use serde::Serialize;

pub fn real(x: f64) -> String {
    if !x.is_finite() {
        return format!("{x}");
    }
    if x == 0.0 {
        return "0".into();
    }
    let sci = format!("{x:.16e}");
    let exponent: i32 = sci[sci.find('e').expect("exponent") + 1..].parse().expect("integer exponent");
    let decimals = (16 - exponent).max(0) as usize;
    format!("{x:.decimals$}")
}

pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(csv_error)?;
    w.write_record(header).map_err(csv_error)?;
    for row in rows {
        w.write_record(row).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_error(e: csv::Error) -> clce_core::Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => io.into(),
        other => clce_core::Error::Format(format!("{other:?}")),
    }
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| clce_core::Error::Format(e.to_string()))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reals_are_decimal_and_exact() {
        assert_eq!(real(0.0), "0");
        assert_eq!(real(1.0), "1.0000000000000000");
        assert_eq!(real(0.1), "0.10000000000000001");
        assert_eq!(real(-2.5e-3), "-0.0025000000000000001");
        assert_eq!(real(123456.789), "123456.78900000000");
        assert_eq!(real(1e20), "100000000000000000000");
        for x in [std::f64::consts::PI, 1.0 / 3.0, 6.02e23, 1e-300, -7.25] {
            let s = real(x);
            assert!(!s.contains('e'), "{s}");
            assert_eq!(s.parse::<f64>().unwrap(), x);
        }
    }
}
