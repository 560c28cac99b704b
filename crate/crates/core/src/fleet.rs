//! The collection of per-cell emulators: parallel training, parallel
//! evaluation on a set of test parameters, and persistence.
//!
//! Every cell is an independent task. Each task's random stream is seeded
//! from the global seed and the cell identity alone, and results are gathered
//! in grid order, so outputs do not depend on the number of workers.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ParameterVector, TrainingSet};
use crate::error::{Error, Result};
use crate::gp::{fit, CellEmulator, FitConfig};
use crate::grid::SpaceTimePoint;
use crate::parallel::with_workers;

pub const FLEET_FORMAT_VERSION: u32 = 1;
pub const TABLE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FleetConfig {
    pub fit: FitConfig,
    pub seed: u64,
    /// Worker threads; 0 uses the ambient rayon pool.
    #[serde(skip)]
    pub workers: usize,
}

pub(crate) fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for a cell's restarts, derived from the global seed and the cell id.
pub fn cell_seed(seed: u64, cell: &SpaceTimePoint) -> u64 {
    let mut h = splitmix64(seed);
    for word in [cell.time as u64, (cell.lat + 0.0).to_bits(), (cell.lon + 0.0).to_bits()] {
        h = splitmix64(h ^ word);
    }
    h
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitFailure {
    pub cell: SpaceTimePoint,
    pub message: String,
}

#[derive(Debug, Clone)]
pub struct EmulatorFleet {
    cells: Vec<SpaceTimePoint>,
    emulators: Vec<CellEmulator>,
    failures: Vec<FitFailure>,
    seed: u64,
    fit: FitConfig,
}

impl EmulatorFleet {
    pub fn cells(&self) -> &[SpaceTimePoint] {
        &self.cells
    }

    pub fn emulators(&self) -> &[CellEmulator] {
        &self.emulators
    }

    pub fn failures(&self) -> &[FitFailure] {
        &self.failures
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn get(&self, cell: &SpaceTimePoint) -> Option<&CellEmulator> {
        self.cells.binary_search(cell).ok().map(|i| &self.emulators[i])
    }

    /// Writes `index.json` plus one `cell_NNNNNN.json` per emulator into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut entries = Vec::with_capacity(self.len());
        for (i, (cell, emu)) in self.cells.iter().zip(&self.emulators).enumerate() {
            let file = format!("cell_{i:06}.json");
            let path = dir.join(&file);
            let bytes = serde_json::to_vec(emu)?;
            fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
            entries.push(IndexEntry { cell: *cell, file });
        }
        let index = FleetIndex {
            version: FLEET_FORMAT_VERSION,
            seed: self.seed,
            fit: self.fit.clone(),
            cells: entries,
            failures: self.failures.clone(),
        };
        let path = dir.join("index.json");
        fs::write(&path, serde_json::to_vec_pretty(&index)?).map_err(|e| Error::io(&path, e))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("index.json");
        let f = File::open(&path).map_err(|e| Error::io(&path, e))?;
        let index: FleetIndex = serde_json::from_reader(BufReader::new(f))?;
        if index.version != FLEET_FORMAT_VERSION {
            return Err(Error::Schema(format!("unsupported fleet version {}", index.version)));
        }
        let mut cells = Vec::with_capacity(index.cells.len());
        let mut emulators = Vec::with_capacity(index.cells.len());
        for e in index.cells {
            let path = dir.join(&e.file);
            let f = File::open(&path).map_err(|err| Error::io(&path, err))?;
            emulators.push(serde_json::from_reader(BufReader::new(f))?);
            cells.push(e.cell);
        }
        Ok(EmulatorFleet {
            cells,
            emulators,
            failures: index.failures,
            seed: index.seed,
            fit: index.fit,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct IndexEntry {
    cell: SpaceTimePoint,
    file: String,
}

#[derive(Serialize, Deserialize)]
struct FleetIndex {
    version: u32,
    seed: u64,
    fit: FitConfig,
    cells: Vec<IndexEntry>,
    failures: Vec<FitFailure>,
}

/// Fits one emulator per grid cell. Cells whose fit fails are left out of the
/// fleet and listed in [`EmulatorFleet::failures`].
pub fn train_fleet(train: &TrainingSet, cfg: &FleetConfig) -> Result<EmulatorFleet> {
    if train.grid().is_empty() {
        return Err(Error::InvalidInput("training set covers no cells".into()));
    }
    let cells: Vec<SpaceTimePoint> = train.grid().sim_points().collect();
    let results: Vec<Result<CellEmulator>> = with_workers(cfg.workers, || {
        cells
            .par_iter()
            .enumerate()
            .map(|(i, cell)| {
                let fit_cfg = FitConfig {
                    seed: cell_seed(cfg.seed, cell),
                    ..cfg.fit.clone()
                };
                fit(train.members(), train.cell_outputs(i), &fit_cfg)
            })
            .collect()
    });

    let mut fleet = EmulatorFleet {
        cells: Vec::with_capacity(cells.len()),
        emulators: Vec::with_capacity(cells.len()),
        failures: Vec::new(),
        seed: cfg.seed,
        fit: cfg.fit.clone(),
    };
    for (cell, r) in cells.into_iter().zip(results) {
        match r {
            Ok(emu) => {
                fleet.cells.push(cell);
                fleet.emulators.push(emu);
            }
            Err(e) => {
                warn!("emulator fit failed at {cell}: {e}");
                fleet.failures.push(FitFailure {
                    cell,
                    message: e.to_string(),
                });
            }
        }
    }
    Ok(fleet)
}

/// Emulator predictions for every (cell, test parameter) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionTable {
    cells: Vec<SpaceTimePoint>,
    tests: Vec<ParameterVector>,
    /// Row-major `cells x tests`.
    mean: Vec<f64>,
    var: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TableHeader {
    version: u32,
    n_cells: usize,
    n_tests: usize,
    dtype: String,
    layout: String,
    fleet_seed: u64,
    config_hash: String,
    cells: Vec<SpaceTimePoint>,
    tests: Vec<ParameterVector>,
}

impl PredictionTable {
    pub fn new(cells: Vec<SpaceTimePoint>, tests: Vec<ParameterVector>, mean: Vec<f64>, var: Vec<f64>) -> Result<Self> {
        let size = cells.len() * tests.len();
        if mean.len() != size || var.len() != size {
            return Err(Error::InvalidInput(format!(
                "prediction arrays must hold {} x {} entries",
                cells.len(),
                tests.len()
            )));
        }
        if mean.iter().any(|m| !m.is_finite()) || var.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidInput(
                "predictions must be finite with nonnegative variance".into(),
            ));
        }
        if cells.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidInput("prediction cells must be in grid order".into()));
        }
        Ok(PredictionTable {
            cells,
            tests,
            mean,
            var,
        })
    }

    pub fn cells(&self) -> &[SpaceTimePoint] {
        &self.cells
    }

    pub fn tests(&self) -> &[ParameterVector] {
        &self.tests
    }

    pub fn n_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn n_tests(&self) -> usize {
        self.tests.len()
    }

    pub fn row_of(&self, cell: &SpaceTimePoint) -> Option<usize> {
        self.cells.binary_search(cell).ok()
    }

    #[inline]
    pub fn mean(&self, row: usize, k: usize) -> f64 {
        self.mean[row * self.tests.len() + k]
    }

    #[inline]
    pub fn var(&self, row: usize, k: usize) -> f64 {
        self.var[row * self.tests.len() + k]
    }

    /// Writes `<stem>.json` (header) and `<stem>.bin` (little-endian f64 means
    /// followed by variances, both row-major cells x tests).
    pub fn save(&self, dir: &Path, stem: &str, fleet_seed: u64, config_hash: &str) -> Result<()> {
        let header = TableHeader {
            version: TABLE_FORMAT_VERSION,
            n_cells: self.n_cells(),
            n_tests: self.n_tests(),
            dtype: "f64le".into(),
            layout: "mean[cells][tests] then var[cells][tests]".into(),
            fleet_seed,
            config_hash: config_hash.into(),
            cells: self.cells.clone(),
            tests: self.tests.clone(),
        };
        let hpath = dir.join(format!("{stem}.json"));
        fs::write(&hpath, serde_json::to_vec_pretty(&header)?).map_err(|e| Error::io(&hpath, e))?;
        let bpath = dir.join(format!("{stem}.bin"));
        let f = File::create(&bpath).map_err(|e| Error::io(&bpath, e))?;
        let mut w = BufWriter::new(f);
        for v in self.mean.iter().chain(&self.var) {
            w.write_all(&v.to_le_bytes()).map_err(|e| Error::io(&bpath, e))?;
        }
        w.flush().map_err(|e| Error::io(&bpath, e))?;
        Ok(())
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let hpath = dir.join(format!("{stem}.json"));
        let f = File::open(&hpath).map_err(|e| Error::io(&hpath, e))?;
        let header: TableHeader = serde_json::from_reader(BufReader::new(f))?;
        if header.version != TABLE_FORMAT_VERSION || header.dtype != "f64le" {
            return Err(Error::Schema("unsupported prediction table format".into()));
        }
        let bpath = dir.join(format!("{stem}.bin"));
        let mut bytes = Vec::new();
        File::open(&bpath)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(&bpath, e))?;
        let size = header.n_cells * header.n_tests;
        if bytes.len() != 16 * size || header.cells.len() != header.n_cells || header.tests.len() != header.n_tests {
            return Err(Error::Schema("prediction table dimensions do not match".into()));
        }
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let (mean, var) = values.split_at(size);
        PredictionTable::new(header.cells, header.tests, mean.to_vec(), var.to_vec())
    }

    /// Header fields without reading the matrix.
    pub fn load_config_hash(dir: &Path, stem: &str) -> Result<String> {
        let hpath = dir.join(format!("{stem}.json"));
        let f = File::open(&hpath).map_err(|e| Error::io(&hpath, e))?;
        let header: TableHeader = serde_json::from_reader(BufReader::new(f))?;
        Ok(header.config_hash)
    }
}

/// Evaluates every emulator at every test parameter.
pub fn predict_fleet(fleet: &EmulatorFleet, tests: &[ParameterVector], workers: usize) -> Result<PredictionTable> {
    if fleet.is_empty() {
        return Err(Error::InvalidInput("cannot predict with an empty fleet".into()));
    }
    if tests.is_empty() {
        return Err(Error::InvalidInput("no test parameters".into()));
    }
    let rows: Vec<Vec<(f64, f64)>> = with_workers(workers, || {
        fleet
            .emulators
            .par_iter()
            .map(|emu| tests.iter().map(|u| emu.predict(u)).collect())
            .collect()
    });
    let mut mean = Vec::with_capacity(fleet.len() * tests.len());
    let mut var = Vec::with_capacity(fleet.len() * tests.len());
    for row in rows {
        for (m, v) in row {
            mean.push(m);
            var.push(v);
        }
    }
    PredictionTable::new(fleet.cells.clone(), tests.to_vec(), mean, var)
}
