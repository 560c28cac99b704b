//! Stage orchestration driven by a JSON run manifest.
//!
//! Each stage writes its artifacts into `<workdir>/<stage>/` together with a
//! `stamp.json` holding the stage's config hash and the SHA-256 of every
//! output. A stage's hash covers its own settings, the hashes of its upstream
//! stages and the contents of any input file it reads, so rerunning with an
//! unchanged manifest and inputs is a no-op. Outputs are built in a scratch
//! directory and renamed into place only once complete.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::confset::{self, ConfidenceSet};
use crate::data::{
    load_ensemble, load_observations, load_parameters, sample_test_parameters, write_parameters, ParameterSpace,
    ParameterVector, SamplingStrategy,
};
use crate::discrepancy::{self, DiscrepancyConfig};
use crate::error::{Error, Result};
use crate::filter::{self, CellStatus, FilterReport};
use crate::fleet::{predict_fleet, splitmix64, train_fleet, EmulatorFleet, FleetConfig, PredictionTable};
use crate::gp::FitConfig;
use crate::grid::{match_grids, MatchedGrid, RegularGrid};
use crate::history::{self, HMConfig};
use crate::parallel::with_workers;
use crate::plausibility::{self, TestOutcome};
use crate::residuals::Alignment;
use crate::synthetic::{self, ForwardFamily, SyntheticSpec, Truth};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    pub restarts: usize,
    pub max_iters: usize,
    pub max_evals: usize,
    pub pgtol: f64,
    pub ftol: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let f = FitConfig::default();
        TrainSection {
            restarts: f.restarts,
            max_iters: f.max_iters,
            max_evals: f.max_evals,
            pgtol: f.pgtol,
            ftol: f.ftol,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TestSample {
    pub count: usize,
    pub strategy: SamplingStrategy,
    /// Appends the synthetic truth to the sample so coverage can be scored.
    pub include_truth: bool,
    /// Further parameter vectors appended after the random sample.
    pub extra: Vec<Vec<f64>>,
}

impl Default for TestSample {
    fn default() -> Self {
        TestSample {
            count: 5000,
            strategy: SamplingStrategy::Uniform,
            include_truth: false,
            extra: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterSection {
    pub gamma: Option<f64>,
    pub threshold: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TestSection {
    pub level: f64,
}

impl Default for TestSection {
    fn default() -> Self {
        TestSection { level: 0.05 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProjectionSection {
    pub bins: usize,
}

impl Default for ProjectionSection {
    fn default() -> Self {
        ProjectionSection {
            bins: confset::DEFAULT_BINS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSection {
    pub u_star: Vec<f64>,
    pub delta2: f64,
    pub meas_var: (f64, f64),
    #[serde(default)]
    pub family: ForwardFamily,
    pub n_members: usize,
    #[serde(default)]
    pub outlier_fraction: f64,
    #[serde(default = "ten")]
    pub outlier_shift: f64,
    #[serde(default)]
    pub missing_fraction: f64,
}

fn ten() -> f64 {
    10.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub workdir: PathBuf,
    pub ensemble: PathBuf,
    pub observations: PathBuf,
    pub space: ParameterSpace,
    pub sim_grid: RegularGrid,
    pub sat_grid: RegularGrid,
    #[serde(default)]
    pub seed: u64,
    /// Worker threads, 0 for all cores. Not part of any hash.
    #[serde(default)]
    pub workers: usize,
    #[serde(default)]
    pub synthetic: Option<SyntheticSection>,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub tests: TestSample,
    #[serde(default)]
    pub filter: FilterSection,
    #[serde(default)]
    pub discrepancy: DiscrepancyConfig,
    #[serde(default)]
    pub test: TestSection,
    #[serde(default)]
    pub hm: HMConfig,
    #[serde(default)]
    pub projection: ProjectionSection,
    /// Directory relative paths are resolved against.
    #[serde(skip)]
    pub base: PathBuf,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut m: RunManifest = serde_json::from_slice(&bytes)?;
        m.base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    pub fn workdir(&self) -> PathBuf {
        self.resolve(&self.workdir)
    }

    pub fn stage_dir(&self, stage: Stage) -> PathBuf {
        self.workdir().join(stage.name())
    }

    /// A small synthetic setup over `lat_count * lon_count` cells.
    pub fn synthetic_example(dim: usize, lat_count: usize, lon_count: usize, seed: u64) -> Self {
        let spec = SyntheticSpec::example(dim, lat_count, lon_count, 40, seed);
        RunManifest {
            workdir: "work".into(),
            ensemble: "ensemble.csv".into(),
            observations: "observations.csv".into(),
            space: spec.space,
            sim_grid: spec.sim_grid,
            sat_grid: spec.sat_grid,
            seed,
            workers: 0,
            synthetic: Some(SyntheticSection {
                u_star: spec.u_star,
                delta2: spec.delta2,
                meas_var: spec.meas_var,
                family: spec.family,
                n_members: spec.n_members,
                outlier_fraction: 0.02,
                outlier_shift: 10.0,
                missing_fraction: 0.0,
            }),
            train: TrainSection {
                restarts: 2,
                ..TrainSection::default()
            },
            tests: TestSample {
                count: 500,
                include_truth: true,
                ..TestSample::default()
            },
            filter: FilterSection::default(),
            discrepancy: DiscrepancyConfig::default(),
            test: TestSection::default(),
            hm: HMConfig {
                mc_samples: 10_000,
                seed,
                ..HMConfig::default()
            },
            projection: ProjectionSection::default(),
            base: PathBuf::new(),
        }
    }

    fn synthetic_spec(&self) -> Result<SyntheticSpec> {
        let s = self
            .synthetic
            .as_ref()
            .ok_or_else(|| Error::InvalidInput("manifest has no synthetic section".into()))?;
        Ok(SyntheticSpec {
            space: self.space.clone(),
            sim_grid: self.sim_grid.clone(),
            sat_grid: self.sat_grid.clone(),
            u_star: s.u_star.clone(),
            delta2: s.delta2,
            meas_var: s.meas_var,
            family: s.family.clone(),
            n_members: s.n_members,
            design_seed: splitmix64(self.seed ^ 2),
            noise_seed: splitmix64(self.seed ^ 3),
            outlier_fraction: s.outlier_fraction,
            outlier_shift: s.outlier_shift,
            missing_fraction: s.missing_fraction,
        })
    }

    fn fleet_config(&self) -> FleetConfig {
        FleetConfig {
            fit: FitConfig {
                restarts: self.train.restarts,
                seed: 0,
                max_iters: self.train.max_iters,
                max_evals: self.train.max_evals,
                pgtol: self.train.pgtol,
                ftol: self.train.ftol,
                ranges: Some(self.space.widths()),
            },
            seed: self.seed,
            workers: self.workers,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Synth,
    Match,
    Train,
    Predict,
    Filter,
    Discrep,
    Test,
    Invert,
    Hm,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 10] = [
        Stage::Synth,
        Stage::Match,
        Stage::Train,
        Stage::Predict,
        Stage::Filter,
        Stage::Discrep,
        Stage::Test,
        Stage::Invert,
        Stage::Hm,
        Stage::Report,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Match => "match",
            Stage::Train => "train",
            Stage::Predict => "predict",
            Stage::Filter => "filter",
            Stage::Discrep => "discrep",
            Stage::Test => "test",
            Stage::Invert => "invert",
            Stage::Hm => "hm",
            Stage::Report => "report",
        }
    }

    pub fn from_name(s: &str) -> Option<Stage> {
        Stage::ALL.into_iter().find(|st| st.name() == s)
    }

    pub fn upstream(&self) -> &'static [Stage] {
        match self {
            Stage::Synth | Stage::Match => &[],
            Stage::Train => &[Stage::Match],
            Stage::Predict => &[Stage::Train],
            Stage::Filter => &[Stage::Match, Stage::Predict],
            Stage::Discrep => &[Stage::Filter],
            Stage::Test => &[Stage::Discrep],
            Stage::Invert => &[Stage::Test],
            Stage::Hm => &[Stage::Discrep],
            Stage::Report => &[Stage::Invert],
        }
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

fn file_hash(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(Error::StageDependency(path.to_path_buf()));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// SHA-256 of the canonical (key-sorted, compact) JSON form of `value`.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    let v = serde_json::to_value(value)?;
    Ok(sha256_hex(serde_json::to_string(&v)?.as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stamp {
    pub stage: String,
    pub config_hash: String,
    /// Output path (relative to the stage directory, or to the manifest for
    /// files outside it) to SHA-256.
    pub outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageStatus {
    Ran,
    UpToDate,
}

/// Runs stages for one manifest.
pub struct Runner {
    pub manifest: RunManifest,
    pub force: bool,
}

const STAMP: &str = "stamp.json";

fn read_stamp(dir: &Path) -> Option<Stamp> {
    let bytes = fs::read(dir.join(STAMP)).ok()?;
    serde_json::from_slice(&bytes).ok()
}

fn hash_tree(root: &Path, dir: &Path, out: &mut BTreeMap<String, String>) -> Result<()> {
    let mut entries: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .collect::<std::io::Result<_>>()
        .map_err(|e| Error::io(dir, e))?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let p = e.path();
        if p.is_dir() {
            hash_tree(root, &p, out)?;
        } else if e.file_name() != STAMP {
            let rel = p
                .strip_prefix(root)
                .expect("inside root")
                .to_string_lossy()
                .replace('\\', "/");
            out.insert(rel, file_hash(&p)?);
        }
    }
    Ok(())
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("partial");
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Contents of the report stage's `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub matched_cells: usize,
    pub retained_cells: usize,
    pub outlier_cells: usize,
    pub missing_cells: usize,
    pub no_emulator_cells: usize,
    pub exclusion_fraction: f64,
    pub gamma: f64,
    pub threshold: f64,
    pub delta2: f64,
    pub best_k: usize,
    pub mean_meas_var: f64,
    pub mean_emu_var: f64,
    pub df: usize,
    pub level: f64,
    pub critical: f64,
    pub tested: usize,
    pub retained: usize,
    pub constraints: Vec<confset::AxisConstraint>,
    /// Whether the synthetic truth survived, when it was tested.
    pub truth_retained: Option<bool>,
    pub hm: Option<HmSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HmSummary {
    pub mode: history::HmMode,
    pub critical: f64,
    pub retained: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct TestRecord {
    delta2: f64,
    df: usize,
    level: f64,
    critical: f64,
}

impl Runner {
    pub fn new(manifest: RunManifest, force: bool) -> Self {
        Runner { manifest, force }
    }

    fn stage_settings(&self, stage: Stage) -> Result<Value> {
        let m = &self.manifest;
        Ok(match stage {
            Stage::Synth => json!({
                "synthetic": m.synthetic, "space": m.space, "sim_grid": m.sim_grid,
                "sat_grid": m.sat_grid, "seed": m.seed,
            }),
            Stage::Match => json!({ "sim_grid": m.sim_grid, "sat_grid": m.sat_grid }),
            Stage::Train => json!({
                "train": m.train, "seed": m.seed, "space": m.space,
                "ensemble": file_hash(&m.resolve(&m.ensemble))?,
            }),
            Stage::Predict => json!({
                "tests": m.tests, "seed": m.seed,
                "truth": if m.tests.include_truth { m.synthetic.as_ref().map(|s| s.u_star.clone()) } else { None },
            }),
            Stage::Filter => json!({
                "filter": m.filter, "observations": file_hash(&m.resolve(&m.observations))?,
            }),
            Stage::Discrep => json!({ "discrepancy": m.discrepancy }),
            Stage::Test => json!({ "test": m.test }),
            Stage::Invert => json!({ "projection": m.projection }),
            Stage::Hm => json!({ "hm": m.hm, "projection": m.projection }),
            Stage::Report => json!({}),
        })
    }

    /// The config hash a stage's artifacts must carry under this manifest.
    pub fn expected_hash(&self, stage: Stage) -> Result<String> {
        let upstream = stage
            .upstream()
            .iter()
            .map(|u| self.expected_hash(*u))
            .collect::<Result<Vec<_>>>()?;
        config_hash(&json!({
            "stage": stage.name(),
            "settings": self.stage_settings(stage)?,
            "upstream": upstream,
        }))
    }

    fn check_upstream(&self, stage: Stage) -> Result<()> {
        for &u in stage.upstream() {
            let dir = self.manifest.stage_dir(u);
            let stamp = read_stamp(&dir).ok_or_else(|| Error::StageDependency(dir.join(STAMP)))?;
            let expected = self.expected_hash(u)?;
            if stamp.config_hash != expected {
                if self.force {
                    warn!(
                        "{} was produced under a different config; proceeding (--force)",
                        dir.display()
                    );
                } else {
                    return Err(Error::ConfigMismatch {
                        artifact: dir,
                        expected,
                        found: stamp.config_hash,
                    });
                }
            }
        }
        Ok(())
    }

    fn up_to_date(&self, stage: Stage, hash: &str) -> bool {
        let dir = self.manifest.stage_dir(stage);
        let Some(stamp) = read_stamp(&dir) else {
            return false;
        };
        stamp.config_hash == hash
            && stamp.outputs.iter().all(|(rel, h)| {
                let p = if stage == Stage::Synth && !rel.starts_with("truth") {
                    self.manifest.resolve(Path::new(rel))
                } else {
                    dir.join(rel)
                };
                file_hash(&p).is_ok_and(|x| &x == h)
            })
    }

    /// Runs one stage unless its artifacts are already current.
    pub fn run_stage(&self, stage: Stage) -> Result<StageStatus> {
        if stage == Stage::Synth {
            // synth writes the input files other hashes depend on
            let hash = self.expected_hash(Stage::Synth)?;
            if self.up_to_date(stage, &hash) && !self.force {
                info!("synth: up to date");
                return Ok(StageStatus::UpToDate);
            }
            with_workers(self.manifest.workers, || self.run_synth(&hash))?;
            return Ok(StageStatus::Ran);
        }
        self.check_upstream(stage)?;
        let hash = self.expected_hash(stage)?;
        if self.up_to_date(stage, &hash) {
            info!("{}: up to date", stage.name());
            return Ok(StageStatus::UpToDate);
        }
        let workdir = self.manifest.workdir();
        fs::create_dir_all(&workdir).map_err(|e| Error::io(&workdir, e))?;
        let tmp = workdir.join(format!(".{}.partial", stage.name()));
        if tmp.exists() {
            fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        }
        fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let produced = with_workers(self.manifest.workers, || self.produce(stage, &tmp, &hash));
        if let Err(e) = produced {
            let _ = fs::remove_dir_all(&tmp);
            return Err(e);
        }
        let mut outputs = BTreeMap::new();
        hash_tree(&tmp, &tmp, &mut outputs)?;
        let stamp = Stamp {
            stage: stage.name().into(),
            config_hash: hash,
            outputs,
        };
        fs::write(tmp.join(STAMP), serde_json::to_vec_pretty(&stamp)?).map_err(|e| Error::io(&tmp, e))?;
        let dir = self.manifest.stage_dir(stage);
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        fs::rename(&tmp, &dir).map_err(|e| Error::io(&dir, e))?;
        info!("{}: done", stage.name());
        Ok(StageStatus::Ran)
    }

    /// Runs every applicable stage in order.
    pub fn run_all(&self) -> Result<()> {
        for stage in Stage::ALL {
            if stage == Stage::Synth && self.manifest.synthetic.is_none() {
                continue;
            }
            self.run_stage(stage)?;
        }
        Ok(())
    }

    fn run_synth(&self, hash: &str) -> Result<()> {
        let m = &self.manifest;
        let spec = m.synthetic_spec()?;
        let data = synthetic::generate(&spec)?;
        let dir = m.stage_dir(Stage::Synth);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let tmp = m.workdir().join(".synth.partial");
        if tmp.exists() {
            fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        }
        fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        synthetic::write_synthetic(&tmp, &m.space, &data)?;

        let mut outputs = BTreeMap::new();
        for (name, target) in [("ensemble.csv", &m.ensemble), ("observations.csv", &m.observations)] {
            let bytes = fs::read(tmp.join(name)).map_err(|e| Error::io(tmp.join(name), e))?;
            let dest = m.resolve(target);
            if let Some(parent) = dest.parent() {
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            write_atomic(&dest, &bytes)?;
            outputs.insert(target.to_string_lossy().into_owned(), sha256_hex(&bytes));
        }
        let truth = fs::read(tmp.join("truth.json")).map_err(|e| Error::io(tmp.join("truth.json"), e))?;
        write_atomic(&dir.join("truth.json"), &truth)?;
        outputs.insert("truth.json".into(), sha256_hex(&truth));
        fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let stamp = Stamp {
            stage: "synth".into(),
            config_hash: hash.into(),
            outputs,
        };
        write_atomic(&dir.join(STAMP), &serde_json::to_vec_pretty(&stamp)?)?;
        info!("synth: done");
        Ok(())
    }

    fn grid(&self) -> Result<MatchedGrid> {
        let p = self.manifest.stage_dir(Stage::Match).join("grid.json");
        let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    fn predictions(&self) -> Result<PredictionTable> {
        PredictionTable::load(&self.manifest.stage_dir(Stage::Predict), "predictions")
    }

    fn observations(&self, grid: &MatchedGrid) -> Result<crate::data::ObservationSet> {
        let p = self.manifest.resolve(&self.manifest.observations);
        if !p.exists() {
            return Err(Error::StageDependency(p));
        }
        load_observations(&p, grid)
    }

    fn filter_report(&self) -> Result<FilterReport> {
        FilterReport::load(&self.manifest.stage_dir(Stage::Filter).join("report.json"))
    }

    fn mstar(&self) -> Result<MatchedGrid> {
        let p = self.manifest.stage_dir(Stage::Filter).join("mstar.json");
        let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    fn delta2(&self) -> Result<(f64, usize)> {
        let (d, k, _, _) = discrepancy::read_estimate(&self.manifest.stage_dir(Stage::Discrep).join("estimate.json"))?;
        Ok((d, k))
    }

    fn test_record(&self) -> Result<TestRecord> {
        let p = self.manifest.stage_dir(Stage::Test).join("test.json");
        let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    fn tests(&self) -> Result<Vec<ParameterVector>> {
        load_parameters(
            &self.manifest.stage_dir(Stage::Predict).join("tests.csv"),
            &self.manifest.space,
        )
    }

    fn produce(&self, stage: Stage, out: &Path, hash: &str) -> Result<()> {
        let m = &self.manifest;
        match stage {
            Stage::Synth => unreachable!("handled separately"),
            Stage::Match => {
                let grid = match_grids(&m.sim_grid, &m.sat_grid)?;
                let p = out.join("grid.json");
                fs::write(&p, serde_json::to_vec_pretty(&grid)?).map_err(|e| Error::io(&p, e))?;
            }
            Stage::Train => {
                let grid = self.grid()?;
                let ens = m.resolve(&m.ensemble);
                if !ens.exists() {
                    return Err(Error::StageDependency(ens));
                }
                let train = load_ensemble(&ens, &m.space, &grid)?;
                let fleet = train_fleet(&train, &m.fleet_config())?;
                if fleet.is_empty() {
                    return Err(Error::Fit("every emulator fit failed".into()));
                }
                fleet.save(&out.join("fleet"))?;
            }
            Stage::Predict => {
                let fleet = EmulatorFleet::load(&m.stage_dir(Stage::Train).join("fleet"))?;
                let mut tests =
                    sample_test_parameters(&m.space, m.tests.count, splitmix64(m.seed ^ 4), m.tests.strategy)?;
                if m.tests.include_truth {
                    let s = m
                        .synthetic
                        .as_ref()
                        .ok_or_else(|| Error::InvalidInput("include_truth needs a synthetic section".into()))?;
                    tests.push(m.space.vector(s.u_star.clone())?);
                }
                for v in &m.tests.extra {
                    tests.push(m.space.vector(v.clone())?);
                }
                write_parameters(&out.join("tests.csv"), &m.space, &tests)?;
                let table = predict_fleet(&fleet, &tests, m.workers)?;
                table.save(out, "predictions", m.seed, hash)?;
            }
            Stage::Filter => {
                let grid = self.grid()?;
                let obs = self.observations(&grid)?;
                let preds = self.predictions()?;
                let rep = filter::find_outliers(&preds, &obs, m.filter.gamma, m.filter.threshold)?;
                rep.save(&out.join("report.json"))?;
                rep.write_csv(&out.join("cells.csv"))?;
                rep.write_qq(&out.join("qq.csv"))?;
                let mstar = rep.mstar(&grid)?;
                let p = out.join("mstar.json");
                fs::write(&p, serde_json::to_vec_pretty(&mstar)?).map_err(|e| Error::io(&p, e))?;
            }
            Stage::Discrep => {
                let grid = self.grid()?;
                let obs = self.observations(&grid)?;
                let preds = self.predictions()?;
                let mstar = self.mstar()?;
                let align = Alignment::new(&preds, &obs, &mstar)?;
                let est = discrepancy::estimate(&align, &m.discrepancy)?;
                discrepancy::write_estimate(&out.join("estimate.json"), &est, hash)?;
                discrepancy::write_per_k(&out.join("per_k.csv"), &est)?;
            }
            Stage::Test => {
                let grid = self.grid()?;
                let obs = self.observations(&grid)?;
                let preds = self.predictions()?;
                let mstar = self.mstar()?;
                let align = Alignment::new(&preds, &obs, &mstar)?;
                let (delta2, _) = self.delta2()?;
                let outcomes = plausibility::test_all(&align, delta2, m.test.level)?;
                plausibility::write_outcomes(&out.join("outcomes.csv"), &outcomes, &[])?;
                let rec = TestRecord {
                    delta2,
                    df: align.len(),
                    level: m.test.level,
                    critical: plausibility::critical_value(align.len(), m.test.level)?,
                };
                let p = out.join("test.json");
                fs::write(&p, serde_json::to_vec_pretty(&rec)?).map_err(|e| Error::io(&p, e))?;
            }
            Stage::Invert => {
                let rec = self.test_record()?;
                let outcomes =
                    plausibility::read_outcomes(&m.stage_dir(Stage::Test).join("outcomes.csv"), rec.df, rec.level)?;
                let tests = self.tests()?;
                let set = confset::invert(&outcomes, &tests, hash)?;
                self.write_projections(out, &set, &tests, &outcomes, rec.critical)?;
            }
            Stage::Hm => {
                let grid = self.grid()?;
                let obs = self.observations(&grid)?;
                let preds = self.predictions()?;
                let mstar = self.mstar()?;
                let align = Alignment::new(&preds, &obs, &mstar)?;
                let (delta2, _) = self.delta2()?;
                let outcomes = history::hm_test_all(&align, delta2, &m.hm)?;
                let (tag, value) = m.hm.mode.tag();
                let tags = [
                    (tag, value),
                    ("level", m.hm.level.to_string()),
                    ("mc_samples", m.hm.mc_samples.to_string()),
                    ("seed", m.hm.seed.to_string()),
                ];
                plausibility::write_outcomes(&out.join("outcomes.csv"), &outcomes, &tags)?;
                let tests = self.tests()?;
                let set = confset::invert(&outcomes, &tests, hash)?;
                let critical = outcomes.first().map_or(f64::NAN, |o| o.critical);
                self.write_projections(out, &set, &tests, &outcomes, critical)?;
            }
            Stage::Report => {
                let summary = self.summarize()?;
                let p = out.join("summary.json");
                fs::write(&p, serde_json::to_vec_pretty(&summary)?).map_err(|e| Error::io(&p, e))?;
                let p = out.join("summary.txt");
                fs::write(&p, render_summary(&summary, &m.space)).map_err(|e| Error::io(&p, e))?;
            }
        }
        Ok(())
    }

    fn write_projections(
        &self,
        out: &Path,
        set: &ConfidenceSet,
        tests: &[ParameterVector],
        outcomes: &[TestOutcome],
        critical: f64,
    ) -> Result<()> {
        let space = &self.manifest.space;
        let bins = self.manifest.projection.bins;
        set.write_csv(&out.join("retained.csv"), space)?;
        for (i, r) in space.ranges().iter().enumerate() {
            let pts = confset::project_1d(tests, outcomes, i)?;
            confset::write_projection_1d(
                &out.join(format!("projection_1d_{}.csv", r.name)),
                &r.name,
                critical,
                &pts,
            )?;
        }
        for i in 0..space.dim() {
            for j in i + 1..space.dim() {
                let p = confset::project_2d(space, tests, outcomes, (i, j), (bins, bins))?;
                let names = space.ranges();
                p.write_csv(
                    &out.join(format!("projection_2d_{}_{}.csv", names[i].name, names[j].name)),
                    space,
                )?;
            }
        }
        let constraints = confset::axis_constraints(space, tests, outcomes, bins)?;
        let p = out.join("constraints.json");
        fs::write(&p, serde_json::to_vec_pretty(&constraints)?).map_err(|e| Error::io(&p, e))
    }

    fn summarize(&self) -> Result<Summary> {
        let m = &self.manifest;
        let rep = self.filter_report()?;
        let rec = self.test_record()?;
        let (delta2, best_k) = self.delta2()?;
        let grid = self.grid()?;
        let obs = self.observations(&grid)?;
        let preds = self.predictions()?;
        let mstar = self.mstar()?;
        let align = Alignment::new(&preds, &obs, &mstar)?;
        let outcomes = plausibility::read_outcomes(&m.stage_dir(Stage::Test).join("outcomes.csv"), rec.df, rec.level)?;
        let tests = self.tests()?;
        let constraints = confset::axis_constraints(&m.space, &tests, &outcomes, m.projection.bins)?;
        let retained = outcomes.iter().filter(|o| !o.reject).count();

        let truth_path = m.stage_dir(Stage::Synth).join("truth.json");
        let truth_retained = if truth_path.exists() {
            let truth = Truth::load(&truth_path)?;
            tests
                .iter()
                .position(|u| u.values() == truth.u_star.as_slice())
                .map(|k| !outcomes[k].reject)
        } else {
            None
        };
        let hm_dir = m.stage_dir(Stage::Hm);
        let hm = match read_stamp(&hm_dir) {
            Some(s) if s.config_hash == self.expected_hash(Stage::Hm)? => {
                let o = plausibility::read_outcomes(&hm_dir.join("outcomes.csv"), rec.df, m.hm.level)?;
                Some(HmSummary {
                    mode: m.hm.mode,
                    critical: o.first().map_or(f64::NAN, |o| o.critical),
                    retained: o.iter().filter(|o| !o.reject).count(),
                })
            }
            _ => None,
        };
        Ok(Summary {
            matched_cells: grid.len(),
            retained_cells: mstar.len(),
            outlier_cells: rep.count(CellStatus::Outlier),
            missing_cells: rep.count(CellStatus::Missing),
            no_emulator_cells: rep.count(CellStatus::NoEmulator),
            exclusion_fraction: rep.fraction_excluded,
            gamma: rep.gamma,
            threshold: rep.threshold,
            delta2,
            best_k,
            mean_meas_var: align.mean_meas_var(),
            mean_emu_var: align.mean_emu_var(best_k),
            df: rec.df,
            level: rec.level,
            critical: rec.critical,
            tested: tests.len(),
            retained,
            constraints,
            truth_retained,
            hm,
        })
    }
}

fn yes_no(b: bool) -> &'static str {
    if b {
        "yes"
    } else {
        "no"
    }
}

/// Plain-text rendering of a [`Summary`].
pub fn render_summary(s: &Summary, space: &ParameterSpace) -> String {
    let mut t = String::new();
    let mut line = |l: String| {
        t.push_str(&l);
        t.push('\n');
    };
    line(format!("matched cells |M|: {}", s.matched_cells));
    line(format!("retained cells |M*|: {}", s.retained_cells));
    line(format!(
        "excluded: {} outliers, {} missing, {} without emulator ({:.2}%)",
        s.outlier_cells,
        s.missing_cells,
        s.no_emulator_cells,
        100.0 * s.exclusion_fraction
    ));
    line(format!("filter gamma: {:.6e}, threshold: {:.6}", s.gamma, s.threshold));
    line(format!(
        "discrepancy variance: {:.6e} (best k = {})",
        s.delta2, s.best_k
    ));
    line(format!("mean measurement variance: {:.6e}", s.mean_meas_var));
    line(format!("mean emulator variance: {:.6e}", s.mean_emu_var));
    line(format!("degrees of freedom: {}", s.df));
    line(format!("critical value at level {}: {:.6}", s.level, s.critical));
    if s.retained == 0 {
        line(format!("no parameter retained (0 of {} tested)", s.tested));
    } else {
        line(format!("retained parameters: {} of {}", s.retained, s.tested));
    }
    for (c, r) in s.constraints.iter().zip(space.ranges()) {
        let range = match (c.retained_min, c.retained_max) {
            (Some(a), Some(b)) => format!("[{a:.4}, {b:.4}]"),
            _ => "empty".into(),
        };
        line(format!(
            "  {}: retained {range} of [{}, {}]; lower end ruled out: {}, upper end ruled out: {}",
            c.name,
            r.min,
            r.max,
            yes_no(c.lower),
            yes_no(c.upper)
        ));
    }
    if let Some(tr) = s.truth_retained {
        line(format!("synthetic truth retained: {}", yes_no(tr)));
    }
    if let Some(h) = &s.hm {
        let (tag, v) = h.mode.tag();
        line(format!(
            "history matching ({tag}={v}): critical {:.6}, retained {}",
            h.critical, h.retained
        ));
    }
    t
}
