use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use crate::cluster::EpochMetrics;
use crate::error::{Error, Result};

/// One line of the per-epoch metrics CSV.
pub type MetricsRow = EpochMetrics;

pub const METRICS_HEADER: &str =
    "epoch,sim_time,train_loss,train_acc,test_acc,throughput,mean_staleness";

fn csv_err(e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        kind => {
            let message = format!("{kind:?}");
            match line {
                Some(l) => Error::format_at(l, message),
                None => Error::format(message),
            }
        }
    }
}

pub fn write_metrics(rows: &[MetricsRow], out: impl Write) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out);
    if rows.is_empty() {
        w.write_record(METRICS_HEADER.split(',')).map_err(csv_err)?;
    }
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_metrics_file(rows: &[MetricsRow], path: impl AsRef<Path>) -> Result<()> {
    write_metrics(rows, File::create(path)?)
}

pub fn read_metrics(input: impl Read) -> Result<Vec<MetricsRow>> {
    let mut r = csv::ReaderBuilder::new().from_reader(input);
    let header = r.headers().map_err(csv_err)?;
    if header.iter().collect::<Vec<_>>().join(",") != METRICS_HEADER {
        return Err(Error::format_at(
            1,
            format!("expected header `{METRICS_HEADER}`"),
        ));
    }
    let mut rows: Vec<MetricsRow> = Vec::new();
    for rec in r.deserialize() {
        let row: MetricsRow = rec.map_err(csv_err)?;
        if let Some(prev) = rows.last() {
            if row.epoch <= prev.epoch {
                return Err(Error::format_at(
                    rows.len() + 2,
                    format!("epoch {} does not follow {}", row.epoch, prev.epoch),
                ));
            }
        }
        rows.push(row);
    }
    Ok(rows)
}

pub fn read_metrics_file(path: impl AsRef<Path>) -> Result<Vec<MetricsRow>> {
    read_metrics(File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(epoch: u64, test: Option<f64>) -> MetricsRow {
        MetricsRow {
            epoch,
            sim_time: 12.5 * (epoch + 1) as f64,
            train_loss: 0.1 / (epoch + 1) as f64,
            train_acc: 0.9,
            test_acc: test,
            throughput: 309.782,
            mean_staleness: 1.0,
        }
    }

    #[test]
    fn header_and_round_trip() {
        let rows = vec![row(0, Some(0.5)), row(1, None), row(2, Some(1.0 / 3.0))];
        let mut buf = Vec::new();
        write_metrics(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with(&format!("{METRICS_HEADER}\n")));
        assert!(!text.contains('\r'));
        assert_eq!(read_metrics(&buf[..]).unwrap(), rows);
    }

    #[test]
    fn empty_file_keeps_header() {
        let mut buf = Vec::new();
        write_metrics(&[], &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            format!("{METRICS_HEADER}\n")
        );
    }

    #[test]
    fn malformed_rows_report_line() {
        let text = format!("{METRICS_HEADER}\n0,1,0.5,0.5,0.5,1,0\n1,x,0.5,0.5,0.5,1,0\n");
        match read_metrics(text.as_bytes()) {
            Err(Error::Format { line: Some(3), .. }) => {}
            other => panic!("{other:?}"),
        }
        let text = format!("{METRICS_HEADER}\n1,1,0.5,0.5,0.5,1,0\n1,2,0.5,0.5,0.5,1,0\n");
        assert!(matches!(
            read_metrics(text.as_bytes()),
            Err(Error::Format { line: Some(3), .. })
        ));
        assert!(matches!(
            read_metrics("a,b\n".as_bytes()),
            Err(Error::Format { line: Some(1), .. })
        ));
    }
}
