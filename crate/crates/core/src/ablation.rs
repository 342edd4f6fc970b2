//! Multi-seed ablation grids over expansion mode, selection mode, K and cue sets.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SdbError};
use crate::eval::evaluate;
use crate::flat_config;
use crate::train::{train, TrainConfig};
use crate::types::{CueMask, DemMode, ModelConfig, SsmMode};
use crate::world::{MetricsTable, ToyWorld};

flat_config! {
    /// Axes of an ablation grid; lists are comma separated.
    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    pub struct GridConfig {
        /// expansion modes to cross
        dem_modes: String = "hsg,noise".into(); "list of hsg|noise",
        /// selection modes to cross
        ssm_modes: String = "stable,rand".into(); "list of stable|rand",
        /// hypothesis counts; 0 is the bypassed baseline
        k_values: Vec<u64> = vec![0, 3]; "hypotheses",
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationGrid {
    pub dem_modes: Vec<DemMode>,
    pub ssm_modes: Vec<SsmMode>,
    pub k_values: Vec<usize>,
    pub seeds: Vec<u64>,
}

fn parse_list<T: std::str::FromStr<Err = String>>(s: &str) -> Result<Vec<T>> {
    s.split(',').map(str::trim).filter(|x| !x.is_empty()).map(|x| x.parse().map_err(SdbError::Config)).collect()
}

impl AblationGrid {
    pub fn from_config(cfg: &GridConfig, seeds: &[u64]) -> Result<Self> {
        let g = Self {
            dem_modes: parse_list(&cfg.dem_modes)?,
            ssm_modes: parse_list(&cfg.ssm_modes)?,
            k_values: cfg.k_values.iter().map(|&k| k as usize).collect(),
            seeds: seeds.to_vec(),
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dem_modes.is_empty() || self.ssm_modes.is_empty() || self.k_values.is_empty() || self.seeds.is_empty() {
            return Err(SdbError::Config("every grid axis needs at least one value".into()));
        }
        Ok(())
    }

    /// Distinct cells; K = 0 ignores the mode axes and appears once.
    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for &k in &self.k_values {
            if k == 0 {
                out.push(Cell { dem: None, ssm: None, k: 0, drop: CueMask::default() });
                continue;
            }
            for &dem in &self.dem_modes {
                for &ssm in &self.ssm_modes {
                    out.push(Cell { dem: Some(dem), ssm: Some(ssm), k, drop: CueMask::default() });
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Cell {
    pub dem: Option<DemMode>,
    pub ssm: Option<SsmMode>,
    pub k: usize,
    pub drop: CueMask,
}

impl Cell {
    pub fn model_config(&self, base: &ModelConfig, seed: u64) -> ModelConfig {
        ModelConfig {
            k: self.k,
            dem_mode: self.dem.unwrap_or(base.dem_mode),
            ssm_mode: self.ssm.unwrap_or(base.ssm_mode),
            drop_cues: self.drop,
            seed,
            ..base.clone()
        }
    }

    fn labels(&self) -> (String, String) {
        (
            self.dem.map_or_else(|| "none".to_owned(), |d| d.to_string()),
            self.ssm.map_or_else(|| "none".to_owned(), |s| s.to_string()),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub cell: Cell,
    pub seed: u64,
    pub metrics: MetricsTable,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellSummary {
    pub cell: Cell,
    pub runs: usize,
    pub mean: [f64; 5],
    pub std: [f64; 5],
}

impl CellSummary {
    pub fn sr(&self) -> (f64, f64) {
        (self.mean[2], self.std[2])
    }

    pub fn spl(&self) -> (f64, f64) {
        (self.mean[4], self.std[4])
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AblationResults {
    pub runs: Vec<RunResult>,
    pub summaries: Vec<CellSummary>,
}

fn fields(m: &MetricsTable) -> [f64; 5] {
    [m.tl, m.ne, m.sr, m.osr, m.spl]
}

fn summarize(cell: Cell, runs: &[RunResult]) -> CellSummary {
    let n = runs.len() as f64;
    let mut mean = [0.0; 5];
    let mut std = [0.0; 5];
    for r in runs {
        for (m, v) in mean.iter_mut().zip(fields(&r.metrics)) {
            *m += v / n;
        }
    }
    for r in runs {
        for ((s, v), m) in std.iter_mut().zip(fields(&r.metrics)).zip(mean) {
            *s += (v - m).powi(2) / n;
        }
    }
    std.iter_mut().for_each(|s| *s = s.sqrt());
    CellSummary { cell, runs: runs.len(), mean, std }
}

impl AblationResults {
    pub fn summary(&self, cell: &Cell) -> Option<&CellSummary> {
        self.summaries.iter().find(|s| &s.cell == cell)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn write_to<W: std::io::Write>(&self, w: &mut csv::Writer<W>) -> Result<()> {
        w.write_record([
            "kind", "dem", "ssm", "K", "drop", "seed", "TL", "NE", "SR", "OSR", "SPL", "TL_std", "NE_std", "SR_std", "OSR_std", "SPL_std",
        ])?;
        for r in &self.runs {
            let (dem, ssm) = r.cell.labels();
            let mut rec = vec!["run".to_owned(), dem, ssm, r.cell.k.to_string(), r.cell.drop.to_string(), r.seed.to_string()];
            rec.extend(fields(&r.metrics).iter().map(f64::to_string));
            rec.extend(std::iter::repeat_n(String::new(), 5));
            w.write_record(&rec)?;
        }
        for s in &self.summaries {
            let (dem, ssm) = s.cell.labels();
            let mut rec = vec!["summary".to_owned(), dem, ssm, s.cell.k.to_string(), s.cell.drop.to_string(), String::new()];
            rec.extend(s.mean.iter().map(f64::to_string));
            rec.extend(s.std.iter().map(f64::to_string));
            w.write_record(&rec)?;
        }
        Ok(())
    }
}

/// Train and evaluate one configuration on the held-out set.
pub fn run_cell(cell: &Cell, seed: u64, base: &ModelConfig, tcfg: &TrainConfig, world: &ToyWorld) -> Result<MetricsTable> {
    let cfg = cell.model_config(base, seed);
    let quiet = TrainConfig { log_path: String::new(), checkpoint_path: String::new(), eval_every: 0, ..tcfg.clone() };
    let out = train(&cfg, &quiet, world)?;
    Ok(evaluate(&out.model, &world.eval)?.metrics)
}

/// Run the cells for every seed, reporting each finished run through `progress`.
pub fn run_cells(
    cells: &[Cell],
    seeds: &[u64],
    base: &ModelConfig,
    tcfg: &TrainConfig,
    world: &ToyWorld,
    mut progress: impl FnMut(&RunResult),
) -> Result<AblationResults> {
    let mut results = AblationResults::default();
    for cell in cells {
        let mut runs = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let r = RunResult { cell: *cell, seed, metrics: run_cell(cell, seed, base, tcfg, world)? };
            progress(&r);
            runs.push(r);
        }
        results.summaries.push(summarize(*cell, &runs));
        results.runs.extend(runs);
    }
    Ok(results)
}

pub fn ablate(grid: &AblationGrid, base: &ModelConfig, tcfg: &TrainConfig, world: &ToyWorld, progress: impl FnMut(&RunResult)) -> Result<AblationResults> {
    grid.validate()?;
    run_cells(&grid.cells(), &grid.seeds, base, tcfg, world, progress)
}

/// Train with the given cues zeroed before scoring.
pub fn cue_ablation(
    drop: CueMask,
    seeds: &[u64],
    base: &ModelConfig,
    tcfg: &TrainConfig,
    world: &ToyWorld,
    progress: impl FnMut(&RunResult),
) -> Result<AblationResults> {
    let cell = Cell { dem: Some(base.dem_mode), ssm: Some(base.ssm_mode), k: base.k.max(1), drop };
    run_cells(&[cell], seeds, base, tcfg, world, progress)
}
