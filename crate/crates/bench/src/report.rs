//! CSV tables with an in-file schema row, and line-delimited JSON logs.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use slicequant::trainer::StepRecord;

use crate::BenchError;

pub const SCHEMA_VERSION: u32 = 1;

/// Column name and its one-line description.
pub type Column = (&'static str, &'static str);

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> BenchError + '_ {
    move |source| BenchError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Writes `# schema=<name> v<N>; col: desc; ...`, the header, then the rows.
pub fn write_csv(path: &Path, schema: &str, columns: &[Column], rows: &[Vec<String>]) -> Result<(), BenchError> {
    let mut file = BufWriter::new(File::create(path).map_err(io_err(path))?);
    let doc: Vec<String> = columns.iter().map(|(c, d)| format!("{c}: {d}")).collect();
    writeln!(file, "# schema={schema} v{SCHEMA_VERSION}; {}", doc.join("; ")).map_err(io_err(path))?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(columns.iter().map(|(c, _)| *c))?;
    for row in rows {
        w.write_record(row)?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

/// Reads a table written by [`write_csv`]: header plus string rows.
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>), BenchError> {
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)?;
    let header = r.headers()?.iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| rec.map(|r| r.iter().map(String::from).collect()))
        .collect::<Result<_, _>>()?;
    Ok((header, rows))
}

#[derive(Serialize)]
struct LogHeader<'a> {
    schema: &'a str,
    version: u32,
}

#[derive(Serialize)]
struct LogLine {
    layer: usize,
    step: usize,
    stage1_loss: Option<f64>,
    loss: f64,
    data_term: f64,
    reg_term: f64,
    avg_bits: f64,
    b_sched: f64,
    tau: Option<f64>,
}

pub fn write_train_log<'a>(path: &Path, records: impl IntoIterator<Item = &'a StepRecord>) -> Result<(), BenchError> {
    let mut file = BufWriter::new(File::create(path).map_err(io_err(path))?);
    let header = LogHeader {
        schema: "train_log",
        version: SCHEMA_VERSION,
    };
    writeln!(file, "{}", serde_json::to_string(&header)?).map_err(io_err(path))?;
    for r in records {
        let line = LogLine {
            layer: r.layer,
            step: r.step,
            stage1_loss: r.stage1_loss,
            loss: r.loss,
            data_term: r.data_term,
            reg_term: r.reg_term,
            avg_bits: r.avg_bits,
            b_sched: r.b_sched,
            tau: r.tau,
        };
        writeln!(file, "{}", serde_json::to_string(&line)?).map_err(io_err(path))?;
    }
    file.flush().map_err(io_err(path))?;
    Ok(())
}

pub fn write_text(path: &Path, text: &str) -> Result<(), BenchError> {
    std::fs::write(path, text).map_err(io_err(path))
}

pub fn create_dir(path: &Path) -> Result<(), BenchError> {
    std::fs::create_dir_all(path).map_err(io_err(path))
}
