//! CSV emission and parsing. Fields are comma-separated, records end in
//! `\n`, and floats use Rust's shortest round-trip formatting with `.` as
//! the decimal point.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::CliError;

/// Formats a float so that parsing the text gives back the same bits.
pub fn num(x: f64) -> String {
    format!("{x:?}")
}

/// A CSV table written one row at a time. Every row is flushed before
/// the call returns, so a failure later leaves the earlier rows on disk.
pub struct CsvOut<'a> {
    w: csv::Writer<Box<dyn Write + 'a>>,
    width: usize,
}

impl<'a> CsvOut<'a> {
    pub fn new(out: Box<dyn Write + 'a>, header: &[&str]) -> Result<Self, CliError> {
        let w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(out);
        let mut t = Self { w, width: header.len() };
        t.row(header.iter().map(|h| h.to_string()))?;
        Ok(t)
    }

    /// Writes to `path` when given, otherwise to `fallback`.
    pub fn open(path: Option<&Path>, fallback: &'a mut dyn Write, header: &[&str]) -> Result<Self, CliError> {
        let out: Box<dyn Write + 'a> = match path {
            Some(p) => Box::new(BufWriter::new(File::create(p).map_err(|e| {
                CliError::Config(format!("cannot create {}: {e}", p.display()))
            })?)),
            None => Box::new(fallback),
        };
        Self::new(out, header)
    }

    pub fn row(&mut self, fields: impl IntoIterator<Item = String>) -> Result<(), CliError> {
        let fields: Vec<String> = fields.into_iter().collect();
        assert_eq!(fields.len(), self.width, "row width differs from header");
        self.w.write_record(&fields)?;
        self.w.flush()?;
        Ok(())
    }
}

/// Header and rows of a CSV file.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
        let header = r.headers()?.iter().map(str::to_string).collect();
        let rows = r
            .records()
            .map(|rec| rec.map(|rec| rec.iter().map(str::to_string).collect()))
            .collect::<Result<_, _>>()?;
        Ok(Self { header, rows })
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    /// Value of `key` in a two-column `metric,value` table.
    pub fn metric(&self, key: &str) -> Option<&str> {
        self.rows
            .iter()
            .find(|r| r.first().map(String::as_str) == Some(key))
            .and_then(|r| r.get(1))
            .map(String::as_str)
    }
}
