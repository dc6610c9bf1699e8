use std::collections::{HashMap, HashSet};
use std::path::Path;

use super::{write_atomic, SpeedTensor};
use crate::error::{Error, Result};
use crate::graph::SensorGraph;
use crate::tensor::Tensor;

fn parse_err(path: &Path, line: u64, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line: line as usize,
        msg: msg.into(),
    }
}

fn reader(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io_at(path, io),
        other => parse_err(path, line, format!("{other:?}")),
    }
}

fn looks_like_timestamp(s: &str) -> bool {
    if s.parse::<i64>().is_ok() {
        return true;
    }
    let b = s.as_bytes();
    b.len() >= 10
        && b[..4].iter().all(u8::is_ascii_digit)
        && b[4] == b'-'
        && b[5..7].iter().all(u8::is_ascii_digit)
        && b[7] == b'-'
        && b[8..10].iter().all(u8::is_ascii_digit)
}

/// Reads a speeds table: a header of node ids after a timestamp column,
/// then one row per time step. Empty cells and cells equal to `sentinel`
/// are flagged missing.
pub fn load_speeds_csv(path: &Path, sentinel: Option<f64>) -> Result<SpeedTensor> {
    let mut rdr = reader(path)?;
    let mut records = rdr.records();
    let header = match records.next() {
        Some(r) => r.map_err(|e| csv_error(path, e))?,
        None => return Err(parse_err(path, 1, "empty file: expected a header of node ids")),
    };
    let node_ids: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    if node_ids.is_empty() {
        return Err(parse_err(path, 1, "header has no node columns"));
    }
    let mut seen = HashSet::new();
    for id in &node_ids {
        if id.is_empty() {
            return Err(parse_err(path, 1, "empty node id in header"));
        }
        if !seen.insert(id.as_str()) {
            return Err(parse_err(path, 1, format!("duplicate node id {id:?}")));
        }
    }
    let n = node_ids.len();
    let mut timestamps = Vec::new();
    let mut values = Vec::new();
    let mut missing = Vec::new();
    for rec in records {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != n + 1 {
            return Err(parse_err(
                path,
                line,
                format!("expected {} cells, found {}", n + 1, rec.len()),
            ));
        }
        let ts = &rec[0];
        if !looks_like_timestamp(ts) {
            return Err(parse_err(
                path,
                line,
                format!("{ts:?} is neither an integer index nor an ISO-8601 timestamp"),
            ));
        }
        timestamps.push(ts.to_string());
        for (col, cell) in rec.iter().skip(1).enumerate() {
            if cell.is_empty() {
                values.push(0.0);
                missing.push(true);
                continue;
            }
            let v: f64 = cell.parse().map_err(|_| {
                parse_err(path, line, format!("non-numeric cell {cell:?} for node {}", node_ids[col]))
            })?;
            if !v.is_finite() {
                return Err(parse_err(path, line, format!("non-finite cell {cell:?}")));
            }
            values.push(v);
            missing.push(sentinel == Some(v));
        }
    }
    if timestamps.is_empty() {
        return Err(parse_err(path, 2, "no data rows"));
    }
    let t = timestamps.len();
    Ok(SpeedTensor {
        timestamps,
        node_ids,
        values: Tensor::new(vec![t, n, 1], values)?,
        missing,
    })
}

/// Writes rows of string cells with a header, atomically.
pub fn write_csv<I, R>(path: &Path, header: &[&str], rows: I) -> Result<()>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator<Item = String>,
{
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(header).map_err(io)?;
    for r in rows {
        w.write_record(r).map_err(io)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    write_atomic(path, &bytes)
}

/// Inverse of [`load_speeds_csv`]: missing entries become empty cells and
/// values use the shortest representation that reads back exactly.
pub fn save_speeds_csv(path: &Path, speeds: &SpeedTensor) -> Result<()> {
    let n = speeds.nodes();
    let c = speeds.values.shape()[2];
    if c != 1 {
        return Err(Error::shape(format!("speeds CSV holds one channel, got {c}")));
    }
    let mut header = vec!["timestamp"];
    header.extend(speeds.node_ids.iter().map(String::as_str));
    let rows = speeds.timestamps.iter().enumerate().map(|(t, ts)| {
        let mut r = vec![ts.clone()];
        for i in 0..n {
            let k = t * n + i;
            r.push(if speeds.missing[k] {
                String::new()
            } else {
                format!("{}", speeds.values.data()[k])
            });
        }
        r
    });
    write_csv(path, &header, rows)
}

/// Reads `from,to,distance` rows into a directed distance matrix over
/// `node_ids`; pairs without a row have no edge.
pub fn load_distances_csv(path: &Path, node_ids: &[String]) -> Result<SensorGraph> {
    let mut rdr = reader(path)?;
    let mut records = rdr.records();
    let header = match records.next() {
        Some(r) => r.map_err(|e| csv_error(path, e))?,
        None => return Err(parse_err(path, 1, "empty file: expected header from,to,distance")),
    };
    if header.iter().collect::<Vec<_>>() != ["from", "to", "distance"] {
        return Err(parse_err(path, 1, "header must be from,to,distance"));
    }
    if node_ids.len() < 2 {
        return Err(parse_err(path, 1, "a graph needs at least two nodes"));
    }
    let index: HashMap<&str, usize> = node_ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let n = node_ids.len();
    let mut d = vec![f64::INFINITY; n * n];
    let mut rows = 0;
    for rec in records {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != 3 {
            return Err(parse_err(path, line, format!("expected 3 cells, found {}", rec.len())));
        }
        let lookup = |id: &str| {
            index
                .get(id)
                .copied()
                .ok_or_else(|| parse_err(path, line, format!("unknown node id {id:?}")))
        };
        let (a, b) = (lookup(&rec[0])?, lookup(&rec[1])?);
        let v: f64 = rec[2]
            .parse()
            .map_err(|_| parse_err(path, line, format!("non-numeric distance {:?}", &rec[2])))?;
        if !(v >= 0.0) || v.is_infinite() {
            return Err(parse_err(path, line, format!("distance {v} must be finite and non-negative")));
        }
        rows += 1;
        if a == b {
            if v != 0.0 {
                log::warn!("{}:{line}: self-distance {v} for {:?} set to 0", path.display(), &rec[0]);
            }
            continue;
        }
        d[a * n + b] = v;
    }
    if rows == 0 {
        return Err(parse_err(path, 2, "no distance rows"));
    }
    SensorGraph::new(node_ids.to_vec(), d)
}

/// Node ids named in a distances file, in order of first appearance.
pub fn distance_node_ids(path: &Path) -> Result<Vec<String>> {
    let mut rdr = reader(path)?;
    let mut ids: Vec<String> = Vec::new();
    let mut seen = HashSet::new();
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        if k == 0 {
            continue;
        }
        for id in rec.iter().take(2) {
            if seen.insert(id.to_string()) {
                ids.push(id.to_string());
            }
        }
    }
    Ok(ids)
}

/// Writes every finite off-diagonal distance as a `from,to,distance` row.
pub fn save_distances_csv(path: &Path, graph: &SensorGraph) -> Result<()> {
    let ids = graph.node_ids();
    let n = ids.len();
    let rows = (0..n * n).filter_map(|k| {
        let (i, j) = (k / n, k % n);
        let v = graph.distance(i, j);
        (i != j && v.is_finite()).then(|| vec![ids[i].clone(), ids[j].clone(), format!("{v}")])
    });
    write_csv(path, &["from", "to", "distance"], rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn file(dir: &tempfile::TempDir, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.path().join(name);
        fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn speeds_shapes_and_missing() {
        let dir = tempfile::tempdir().unwrap();
        let p = file(&dir, "s.csv", "time,a,b\n0,60.5,0\n1,,58\n2,61,59.25\n");
        let s = load_speeds_csv(&p, Some(0.0)).unwrap();
        assert_eq!(s.values.shape(), &[3, 2, 1]);
        assert_eq!(s.missing, vec![false, true, true, false, false, false]);
        let s = load_speeds_csv(&p, None).unwrap();
        assert_eq!(s.missing, vec![false, false, true, false, false, false]);
        let iso = file(&dir, "i.csv", "t,a,b\n2012-03-01T00:00:00,1,2\n");
        assert_eq!(load_speeds_csv(&iso, None).unwrap().timestamps[0], "2012-03-01T00:00:00");
    }

    #[test]
    fn speeds_errors_carry_lines() {
        let dir = tempfile::tempdir().unwrap();
        let cases = [
            ("time,a,a\n0,1,2\n", 1),
            ("time,a,b\n0,1,2\n1,1\n", 3),
            ("time,a,b\n0,1,x\n", 2),
            ("time,a,b\nnoon,1,2\n", 2),
        ];
        for (body, line) in cases {
            let p = file(&dir, "bad.csv", body);
            match load_speeds_csv(&p, None) {
                Err(Error::Parse { line: l, .. }) => assert_eq!(l, line, "{body}"),
                other => panic!("{body}: {other:?}"),
            }
        }
    }

    #[test]
    fn speeds_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = file(&dir, "s.csv", "time,a,b\n0,60.123456789012345,0.1\n1,,58\n");
        let s = load_speeds_csv(&p, None).unwrap();
        let q = dir.path().join("out.csv");
        save_speeds_csv(&q, &s).unwrap();
        assert_eq!(load_speeds_csv(&q, None).unwrap(), s);
    }

    #[test]
    fn distances() {
        let dir = tempfile::tempdir().unwrap();
        let ids: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let p = file(&dir, "d.csv", "from,to,distance\na,b,2.0\nc,c,5\n");
        let g = load_distances_csv(&p, &ids).unwrap();
        assert_eq!(g.distance(0, 1), 2.0);
        assert!(g.distance(1, 0).is_infinite());
        assert_eq!(g.distance(2, 2), 0.0);
        for body in ["", "from,to,distance\na,z,1\n", "from,to,distance\na,b,-1\n"] {
            let p = file(&dir, "bad.csv", body);
            assert!(matches!(load_distances_csv(&p, &ids), Err(Error::Parse { .. })), "{body}");
        }
        let q = dir.path().join("round.csv");
        save_distances_csv(&q, &g).unwrap();
        assert_eq!(load_distances_csv(&q, &ids).unwrap(), g);
    }
}
