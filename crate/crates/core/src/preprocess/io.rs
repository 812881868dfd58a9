//! Dataset directory format.
//!
//! A dataset is a directory of UTF-8, comma-separated files with `.` decimal
//! points:
//!
//! - `spots.csv` — header `spot_id,x,y`, one row per spot
//! - `expression.csv` — header row = gene ids, one row per spot aligned with
//!   `spots.csv`
//! - `image_features.csv` — header `f0..f{D-1}`, one row per spot
//! - `gene_list.txt` — one gene id per line (optional)
//!
//! Processed datasets round-trip through the same format.

use super::{GeneList, Spot, SpotDataset};
use crate::error::{Error, Result};
use std::fs;
use std::path::Path;

fn parse_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        detail: detail.into(),
    }
}

fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(|e| parse_err(path, e.to_string()))?;
    let headers = reader
        .headers()
        .map_err(|e| parse_err(path, e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect::<Vec<_>>();
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| parse_err(path, format!("row {}: {e}", i + 2)))?;
        if record.len() != headers.len() {
            return Err(parse_err(
                path,
                format!(
                    "row {}: expected {} columns, got {}",
                    i + 2,
                    headers.len(),
                    record.len()
                ),
            ));
        }
        rows.push(record.iter().map(str::to_string).collect());
    }
    Ok((headers, rows))
}

fn parse_f64(path: &Path, row: usize, col: usize, raw: &str) -> Result<f64> {
    let v: f64 = raw
        .trim()
        .parse()
        .map_err(|_| parse_err(path, format!("row {row}, column {col}: bad number {raw:?}")))?;
    if !v.is_finite() {
        return Err(parse_err(
            path,
            format!("row {row}, column {col}: non-finite value {raw:?}"),
        ));
    }
    Ok(v)
}

/// Reads a dataset directory.
pub fn read_dataset(dir: &Path) -> Result<SpotDataset> {
    let spots_path = dir.join("spots.csv");
    let expr_path = dir.join("expression.csv");
    let feat_path = dir.join("image_features.csv");

    let (spot_headers, spot_rows) = read_csv(&spots_path)?;
    if spot_headers != ["spot_id", "x", "y"] {
        return Err(parse_err(
            &spots_path,
            format!("expected header spot_id,x,y, got {}", spot_headers.join(",")),
        ));
    }
    let (gene_ids, expr_rows) = read_csv(&expr_path)?;
    let (_, feat_rows) = read_csv(&feat_path)?;
    if expr_rows.len() != spot_rows.len() || feat_rows.len() != spot_rows.len() {
        return Err(parse_err(
            dir,
            format!(
                "row counts differ: {} spots, {} expression rows, {} image feature rows",
                spot_rows.len(),
                expr_rows.len(),
                feat_rows.len()
            ),
        ));
    }

    let image_dim = feat_rows.first().map_or(0, Vec::len);
    let mut spots = Vec::with_capacity(spot_rows.len());
    for (i, row) in spot_rows.iter().enumerate() {
        let csv_row = i + 2;
        let x: i64 = row[1]
            .trim()
            .parse()
            .map_err(|_| parse_err(&spots_path, format!("row {csv_row}, column 2: bad integer {:?}", row[1])))?;
        let y: i64 = row[2]
            .trim()
            .parse()
            .map_err(|_| parse_err(&spots_path, format!("row {csv_row}, column 3: bad integer {:?}", row[2])))?;
        let expression = expr_rows[i]
            .iter()
            .enumerate()
            .map(|(j, raw)| parse_f64(&expr_path, csv_row, j + 1, raw))
            .collect::<Result<Vec<f64>>>()?;
        let image_feature = feat_rows[i]
            .iter()
            .enumerate()
            .map(|(j, raw)| parse_f64(&feat_path, csv_row, j + 1, raw))
            .collect::<Result<Vec<f64>>>()?;
        spots.push(Spot {
            spot_id: row[0].clone(),
            grid_xy: (x, y),
            expression,
            image_feature,
        });
    }
    SpotDataset::new(spots, gene_ids, image_dim)
}

/// Writes a dataset directory, creating it if needed.
pub fn write_dataset(dir: &Path, ds: &SpotDataset) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;

    let mut spots = csv_writer(&dir.join("spots.csv"))?;
    write_record(&mut spots, ["spot_id", "x", "y"].iter())?;
    for spot in ds.spots() {
        write_record(
            &mut spots,
            [
                spot.spot_id.clone(),
                spot.grid_xy.0.to_string(),
                spot.grid_xy.1.to_string(),
            ]
            .iter(),
        )?;
    }
    finish(spots)?;

    let mut expr = csv_writer(&dir.join("expression.csv"))?;
    write_record(&mut expr, ds.gene_ids().iter())?;
    for spot in ds.spots() {
        write_record(&mut expr, spot.expression.iter().map(format_f64).collect::<Vec<_>>().iter())?;
    }
    finish(expr)?;

    let mut feats = csv_writer(&dir.join("image_features.csv"))?;
    let header: Vec<String> = (0..ds.image_dim()).map(|j| format!("f{j}")).collect();
    write_record(&mut feats, header.iter())?;
    for spot in ds.spots() {
        write_record(
            &mut feats,
            spot.image_feature.iter().map(format_f64).collect::<Vec<_>>().iter(),
        )?;
    }
    finish(feats)?;
    Ok(())
}

/// Shortest decimal text that parses back to the same f64.
pub fn format_f64(v: &f64) -> String {
    let mut buf = ryu_format(*v);
    if !buf.contains(['.', 'e', 'E']) {
        buf.push_str(".0");
    }
    buf
}

fn ryu_format(v: f64) -> String {
    // `{}` on f64 prints the shortest representation that round-trips.
    format!("{v}")
}

struct LabeledWriter {
    path: String,
    writer: csv::Writer<fs::File>,
}

fn csv_writer(path: &Path) -> Result<LabeledWriter> {
    let file = fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(LabeledWriter {
        path: path.display().to_string(),
        writer: csv::Writer::from_writer(file),
    })
}

fn write_record<T: AsRef<str>>(w: &mut LabeledWriter, fields: impl Iterator<Item = T>) -> Result<()> {
    w.writer
        .write_record(fields.map(|f| f.as_ref().to_string()))
        .map_err(|e| Error::io(w.path.clone(), std::io::Error::other(e)))
}

fn finish(mut w: LabeledWriter) -> Result<()> {
    w.writer
        .flush()
        .map_err(|e| Error::io(w.path.clone(), e))
}

/// Reads a gene list file: one id per line, blank lines ignored.
pub fn read_gene_list(path: &Path) -> Result<GeneList> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    GeneList::new(
        text.lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(str::to_string),
    )
}

/// Writes `labels.csv` with columns `spot_id,true_label`.
pub fn write_labels(path: &Path, ds: &SpotDataset, labels: &[usize]) -> Result<()> {
    let mut w = csv_writer(path)?;
    write_record(&mut w, ["spot_id", "true_label"].iter())?;
    for (spot, label) in ds.spots().iter().zip(labels) {
        write_record(&mut w, [spot.spot_id.clone(), label.to_string()].iter())?;
    }
    finish(w)
}

/// Writes a plain numeric matrix CSV with a generated `c0..c{D-1}` header.
pub fn write_matrix(path: &Path, m: &crate::numcore::Matrix) -> Result<()> {
    let mut w = csv_writer(path)?;
    let header: Vec<String> = (0..m.cols()).map(|j| format!("c{j}")).collect();
    write_record(&mut w, header.iter())?;
    for r in 0..m.rows() {
        write_record(&mut w, m.row(r).iter().map(format_f64).collect::<Vec<_>>().iter())?;
    }
    finish(w)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_dataset() -> SpotDataset {
        let spots = vec![
            Spot {
                spot_id: "s0".into(),
                grid_xy: (0, 0),
                expression: vec![1.5, 0.0, 0.125],
                image_feature: vec![0.25, -1.75],
            },
            Spot {
                spot_id: "s1".into(),
                grid_xy: (1, 0),
                expression: vec![0.0, 2.0, 0.0625],
                image_feature: vec![-0.5, 0.375],
            },
        ];
        SpotDataset::new(
            spots,
            vec!["GENE_A".into(), "GENE_B".into(), "GENE_C".into()],
            2,
        )
        .unwrap()
    }

    #[test]
    fn dataset_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let ds = sample_dataset();
        write_dataset(dir.path(), &ds).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(ds, back);
    }

    #[test]
    fn malformed_number_reports_location() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &sample_dataset()).unwrap();
        let expr = dir.path().join("expression.csv");
        let text = fs::read_to_string(&expr).unwrap().replace("2.0", "oops");
        fs::write(&expr, text).unwrap();
        let err = read_dataset(dir.path()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("row 3"), "{msg}");
        assert!(msg.contains("column 2"), "{msg}");
    }

    #[test]
    fn gene_list_reads_and_dedupes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gene_list.txt");
        fs::write(&path, "A\n\nB\nA\n").unwrap();
        let list = read_gene_list(&path).unwrap();
        assert_eq!(list.len(), 2);
        let empty = dir.path().join("empty.txt");
        fs::write(&empty, "\n").unwrap();
        assert!(read_gene_list(&empty).is_err());
    }
}
