//! One batch per CSV file: header `cluster_id,y,x1,...,xp`, rows grouped by cluster.

use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Cluster, ClusterBatch};

fn parse_err(line: u64, message: impl Into<String>) -> Error {
    Error::Parse { line: line as usize, message: message.into() }
}

fn check_header(header: &csv::StringRecord) -> Result<usize> {
    let cols: Vec<&str> = header.iter().map(str::trim).collect();
    if cols.len() < 3 || cols[0] != "cluster_id" || cols[1] != "y" {
        return Err(parse_err(1, "header must be cluster_id,y,x1,...,xp"));
    }
    for (k, c) in cols[2..].iter().enumerate() {
        if *c != format!("x{}", k + 1) {
            return Err(parse_err(1, format!("expected column x{} but found '{c}'", k + 1)));
        }
    }
    Ok(cols.len() - 2)
}

/// Parses a batch. `expected_p` rejects files with a different covariate count.
pub fn read_batch<R: Read>(reader: R, batch_id: u64, expected_p: Option<usize>) -> Result<ClusterBatch> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(true).trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    let p = check_header(&header)?;
    if let Some(want) = expected_p {
        if want != p {
            return Err(parse_err(1, format!("file has {p} covariates, model expects {want}")));
        }
    }
    let mut clusters: Vec<Cluster> = Vec::new();
    let mut seen = HashSet::new();
    let mut current: Option<String> = None;
    let mut record = csv::StringRecord::new();
    loop {
        let more = rdr.read_record(&mut record).map_err(|e| {
            let line = e.position().map_or(0, |pos| pos.line());
            parse_err(line, e.to_string())
        })?;
        if !more {
            break;
        }
        let line = record.position().map_or(0, |pos| pos.line());
        if record.len() != p + 2 {
            return Err(parse_err(line, format!("expected {} fields, found {}", p + 2, record.len())));
        }
        let mut values = Vec::with_capacity(p + 1);
        for (k, field) in record.iter().enumerate().skip(1) {
            let v: f64 = field.parse().map_err(|_| parse_err(line, format!("field {} '{field}' is not a number", k + 1)))?;
            if !v.is_finite() {
                return Err(parse_err(line, format!("field {} is not finite", k + 1)));
            }
            values.push(v);
        }
        let id = &record[0];
        if current.as_deref() != Some(id) {
            if !seen.insert(id.to_string()) {
                return Err(parse_err(line, format!("cluster '{id}' is not contiguous")));
            }
            current = Some(id.to_string());
            clusters.push(Cluster::new(Vec::new(), Vec::new()));
        }
        let c = clusters.last_mut().expect("cluster started");
        c.y.push(values[0]);
        c.x.extend_from_slice(&values[1..]);
    }
    Ok(ClusterBatch::new(batch_id, p, clusters))
}

pub fn load_batch(path: &Path, batch_id: u64, expected_p: Option<usize>) -> Result<ClusterBatch> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_batch(std::io::BufReader::new(file), batch_id, expected_p)
}

/// Writes clusters with ids `0..n` in the batch-file format.
pub fn write_batch<W: Write>(writer: W, batch: &ClusterBatch) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["cluster_id".to_string(), "y".to_string()];
    header.extend((1..=batch.p).map(|k| format!("x{k}")));
    w.write_record(&header)?;
    let mut row = Vec::with_capacity(batch.p + 2);
    for (i, c) in batch.clusters.iter().enumerate() {
        for j in 0..c.size() {
            row.clear();
            row.push(i.to_string());
            row.push(format_f64(c.y[j]));
            row.extend(c.row(j, batch.p).iter().map(|v| format_f64(*v)));
            w.write_record(&row)?;
        }
    }
    w.flush()
}

pub fn save_batch(path: &Path, batch: &ClusterBatch) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_batch(std::io::BufWriter::new(file), batch).map_err(|e| Error::io(path, e))
}

/// Shortest representation that parses back to the same bits.
fn format_f64(v: f64) -> String {
    format!("{v:?}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Family;
    use crate::simulate::{gen_batch, SimConfig};

    #[test]
    fn roundtrip_is_exact() {
        let batch = gen_batch(&SimConfig::standard(Family::GaussianIdentity, 20, 1, 4), 1).unwrap();
        let mut buf = Vec::new();
        write_batch(&mut buf, &batch).unwrap();
        let back = read_batch(buf.as_slice(), 1, Some(5)).unwrap();
        assert_eq!(back, batch);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let text = "cluster_id,y,x1,x2\na,1,0.5,1\na,0,0.5,oops\n";
        match read_batch(text.as_bytes(), 0, None) {
            Err(Error::Parse { line: 3, .. }) => {}
            other => panic!("{other:?}"),
        }
        let split = "cluster_id,y,x1\na,1,0\nb,1,0\na,1,1\n";
        assert!(matches!(read_batch(split.as_bytes(), 0, None), Err(Error::Parse { line: 4, .. })));
        let short = "cluster_id,y,x1,x2\na,1,0\n";
        assert!(matches!(read_batch(short.as_bytes(), 0, None), Err(Error::Parse { line: 2, .. })));
        let header = "id,y,x1\n";
        assert!(matches!(read_batch(header.as_bytes(), 0, None), Err(Error::Parse { line: 1, .. })));
        let wrong_p = "cluster_id,y,x1\na,1,0\n";
        assert!(matches!(read_batch(wrong_p.as_bytes(), 0, Some(2)), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn groups_rows_into_clusters() {
        let text = "cluster_id,y,x1,x2\n7,1,1,0.5\n7,0,1,-0.5\n9,1,1,2\n";
        let b = read_batch(text.as_bytes(), 3, None).unwrap();
        assert_eq!(b.len(), 2);
        assert_eq!(b.clusters[0].y, vec![1.0, 0.0]);
        assert_eq!(b.clusters[0].x, vec![1.0, 0.5, 1.0, -0.5]);
        assert_eq!(b.clusters[1].size(), 1);
    }
}
