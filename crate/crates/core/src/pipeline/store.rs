//! Sample store: little-endian f64 blocks in `samples.bin` with a JSON index.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{io_err, read_json, write_json, PipelineError};
use crate::dataset::{CovariateGrid, Standardizer};
use crate::ndmath::Tensor;

pub const STORE_FORMAT: &str = "diffnorm-samples/v1";
const DATA_FILE: &str = "samples.bin";
const INDEX_FILE: &str = "samples.json";
pub const HOLDOUT_BLOCK: &str = "holdout";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub name: String,
    pub age: Option<f64>,
    pub sex: Option<u8>,
    /// Offset in values (not bytes) into the data file.
    pub offset: usize,
    pub rows: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoreIndex {
    pub format: String,
    pub d: usize,
    pub idp_names: Vec<String>,
    /// Values are in standardised units; `standardizer` maps them back.
    pub standardizer: Standardizer,
    /// `model` or `oracle`.
    pub source: String,
    pub seed: u64,
    pub grid: CovariateGrid,
    pub blocks: Vec<Block>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleStore {
    pub index: StoreIndex,
    data: Vec<f64>,
}

impl SampleStore {
    pub fn new(index_base: StoreIndex) -> Self {
        Self { index: StoreIndex { blocks: Vec::new(), ..index_base }, data: Vec::new() }
    }

    pub fn push(&mut self, name: String, age: Option<f64>, sex: Option<u8>, values: &Tensor) -> Result<(), PipelineError> {
        if values.last_dim() != self.index.d {
            return Err(PipelineError::Format(format!("block {name} has width {}, store expects {}", values.last_dim(), self.index.d)));
        }
        self.index.blocks.push(Block { name, age, sex, offset: self.data.len(), rows: values.outer_len() });
        self.data.extend_from_slice(values.data());
        Ok(())
    }

    pub fn block(&self, name: &str) -> Option<Tensor> {
        let b = self.index.blocks.iter().find(|b| b.name == name)?;
        Some(self.tensor(b))
    }

    fn tensor(&self, b: &Block) -> Tensor {
        let d = self.index.d;
        Tensor::new(vec![b.rows, d], self.data[b.offset..b.offset + b.rows * d].to_vec()).expect("block in bounds")
    }

    /// Per-grid-cell samples, in grid order.
    pub fn cell_samples(&self) -> Result<Vec<Tensor>, PipelineError> {
        (0..self.index.grid.cells.len())
            .map(|i| self.block(&cell_name(i)).ok_or_else(|| PipelineError::Format(format!("missing block {}", cell_name(i)))))
            .collect()
    }

    /// A block back in native IDP units.
    pub fn native(&self, name: &str) -> Option<Tensor> {
        self.block(name).map(|t| self.index.standardizer.inverse(&t))
    }

    pub fn write(&self, dir: &Path) -> Result<(), PipelineError> {
        let path = dir.join(DATA_FILE);
        let bytes: Vec<u8> = self.data.iter().flat_map(|v| v.to_le_bytes()).collect();
        fs::write(&path, bytes).map_err(io_err(&path))?;
        write_json(&dir.join(INDEX_FILE), &self.index)
    }

    pub fn read(dir: &Path) -> Result<Self, PipelineError> {
        let index: StoreIndex = read_json(&dir.join(INDEX_FILE))?;
        if index.format != STORE_FORMAT {
            return Err(PipelineError::Format(format!("sample store format {:?}, expected {STORE_FORMAT:?}", index.format)));
        }
        let path = dir.join(DATA_FILE);
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        if bytes.len() % 8 != 0 {
            return Err(PipelineError::Format(format!("{} is not a whole number of f64 values", path.display())));
        }
        let data: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        if let Some(b) = index.blocks.iter().find(|b| b.offset + b.rows * index.d > data.len()) {
            return Err(PipelineError::Format(format!("block {} runs past the end of {}", b.name, path.display())));
        }
        Ok(Self { index, data })
    }
}

pub(crate) fn cell_name(i: usize) -> String {
    format!("cell{i}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_unscale() {
        let grid = CovariateGrid::covering(50.0, 50.0);
        let st = Standardizer { means: vec![10.0, -1.0], sds: vec![2.0, 0.5] };
        let mut s = SampleStore::new(StoreIndex {
            format: STORE_FORMAT.into(),
            d: 2,
            idp_names: vec!["a".into(), "b".into()],
            standardizer: st,
            source: "model".into(),
            seed: 0,
            grid,
            blocks: Vec::new(),
        });
        let t0 = Tensor::from_rows(&[vec![0.1, -0.3], vec![1.0 / 3.0, 2.5]]).unwrap();
        let t1 = Tensor::from_rows(&[vec![f64::MIN_POSITIVE, 7.0]]).unwrap();
        s.push(cell_name(0), Some(50.0), Some(0), &t0).unwrap();
        s.push(cell_name(1), Some(50.0), Some(1), &t1).unwrap();
        assert!(s.push("bad".into(), None, None, &Tensor::zeros(&[1, 3])).is_err());
        let dir = tempfile::tempdir().unwrap();
        s.write(dir.path()).unwrap();
        let back = SampleStore::read(dir.path()).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.cell_samples().unwrap(), vec![t0.clone(), t1]);
        let native = back.native(&cell_name(0)).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let scaled = t0.row(i)[j];
                let expect = scaled * [2.0, 0.5][j] + [10.0, -1.0][j];
                assert!((native.row(i)[j] - expect).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn rejects_truncated_data() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = SampleStore::new(StoreIndex {
            format: STORE_FORMAT.into(),
            d: 1,
            idp_names: vec!["a".into()],
            standardizer: Standardizer { means: vec![0.0], sds: vec![1.0] },
            source: "model".into(),
            seed: 0,
            grid: CovariateGrid::covering(50.0, 50.0),
            blocks: Vec::new(),
        });
        s.push(cell_name(0), None, None, &Tensor::zeros(&[4, 1])).unwrap();
        s.write(dir.path()).unwrap();
        fs::write(dir.path().join(DATA_FILE), [0u8; 12]).unwrap();
        assert!(matches!(SampleStore::read(dir.path()), Err(PipelineError::Format(_))));
    }
}
