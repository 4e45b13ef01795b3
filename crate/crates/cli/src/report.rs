//! CSV output. Files with accuracy columns start with a comment line naming
//! the scale; timing goes to separate files so the result CSVs stay
//! byte-identical across reruns.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use crate::CliError;

pub struct CsvOut {
    writer: csv::Writer<File>,
    scale: f64,
}

impl CsvOut {
    /// Result file. `percent` scales accuracies to `[0, 100]`.
    pub fn results(path: &Path, percent: bool, header: &[&str]) -> Result<Self, CliError> {
        let mut file = File::create(path)?;
        writeln!(
            file,
            "# accuracy_scale={}",
            if percent { "percent" } else { "fraction" }
        )?;
        Self::with_file(file, if percent { 100.0 } else { 1.0 }, header)
    }

    /// Timing file; no accuracy columns.
    pub fn timing(path: &Path, header: &[&str]) -> Result<Self, CliError> {
        Self::with_file(File::create(path)?, 1.0, header)
    }

    fn with_file(file: File, scale: f64, header: &[&str]) -> Result<Self, CliError> {
        let mut writer = csv::Writer::from_writer(file);
        writer.write_record(header)?;
        Ok(Self { writer, scale })
    }

    pub fn acc(&self, v: f64) -> String {
        format!("{:.6}", v * self.scale)
    }

    pub fn row<I, S>(&mut self, fields: I) -> Result<(), CliError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<[u8]>,
    {
        self.writer.write_record(fields)?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<(), CliError> {
        self.writer.flush()?;
        Ok(())
    }
}

pub fn secs(v: f64) -> String {
    format!("{v:.3}")
}

/// Reads a result CSV back, skipping comment lines.
pub fn read_rows(path: &Path) -> Result<Vec<csv::StringRecord>, CliError> {
    let mut reader = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path)?;
    Ok(reader.records().collect::<Result<_, _>>()?)
}
