//! Data ingestion and emission: speeds and distances CSVs, the synthetic
//! generator, run configuration, and atomic file writes.

mod config;
mod csv_files;
mod synthetic;

use std::fs;
use std::io::Write;
use std::path::Path;

pub use config::{DataConfig, EvalConfig, GraphConfig, OutputConfig, RunConfig};
pub use csv_files::{
    distance_node_ids, load_distances_csv, load_speeds_csv, save_distances_csv, save_speeds_csv, write_csv,
};
pub use synthetic::{generate_synthetic, SyntheticParams};

use crate::error::{Error, Result};
use crate::graph::SensorGraph;
use crate::tensor::Tensor;

/// Speed observations: `values` is `[T_total, N, 1]`; `missing` flags
/// entries that were empty or matched the sentinel.
#[derive(Clone, Debug, PartialEq)]
pub struct SpeedTensor {
    pub timestamps: Vec<String>,
    pub node_ids: Vec<String>,
    pub values: Tensor,
    pub missing: Vec<bool>,
}

impl SpeedTensor {
    pub fn steps(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn nodes(&self) -> usize {
        self.values.shape()[1]
    }

    /// Steps `range` as a new series.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Result<SpeedTensor> {
        if range.end > self.steps() || range.start >= range.end {
            return Err(Error::param(format!(
                "time range {range:?} outside 0..{}",
                self.steps()
            )));
        }
        let row: usize = self.values.shape()[1..].iter().product();
        let mut shape = self.values.shape().to_vec();
        shape[0] = range.len();
        let data = self.values.data()[range.start * row..range.end * row].to_vec();
        Ok(SpeedTensor {
            timestamps: self.timestamps[range.clone()].to_vec(),
            node_ids: self.node_ids.clone(),
            values: Tensor::new(shape, data)?,
            missing: self.missing[range.start * row..range.end * row].to_vec(),
        })
    }
}

/// Speeds and the sensor graph, with columns in graph node order.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetBundle {
    pub speeds: SpeedTensor,
    pub graph: SensorGraph,
    pub source: String,
}

impl DatasetBundle {
    pub fn new(speeds: SpeedTensor, graph: SensorGraph, source: impl Into<String>) -> Result<Self> {
        if speeds.node_ids != graph.node_ids() {
            return Err(Error::input("speed columns do not match the graph node order"));
        }
        Ok(DatasetBundle {
            speeds,
            graph,
            source: source.into(),
        })
    }

    /// Loads a speeds CSV and a distances CSV over its node ids.
    pub fn load(speeds: &Path, distances: &Path, sentinel: Option<f64>) -> Result<Self> {
        let s = load_speeds_csv(speeds, sentinel)?;
        let g = load_distances_csv(distances, &s.node_ids)?;
        Self::new(s, g, format!("{} + {}", speeds.display(), distances.display()))
    }

    /// Index of each node id.
    pub fn node_index(&self, id: &str) -> Option<usize> {
        self.speeds.node_ids.iter().position(|n| n == id)
    }
}

/// Writes `bytes` to a sibling temporary file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(d) = dir {
        fs::create_dir_all(d).map_err(|e| Error::io_at(d, e))?;
    }
    let name = path
        .file_name()
        .ok_or_else(|| Error::Usage(format!("{} is not a file path", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let written = fs::File::create(&tmp).and_then(|mut f| {
        f.write_all(bytes)?;
        f.sync_all()
    });
    written.and_then(|_| fs::rename(&tmp, path)).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io_at(path, e)
    })
}
