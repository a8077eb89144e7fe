//! Seeded, resumable experiment runner.
//!
//! A plan expands into cells `(equalizer, snr, trial)`. Every cell trains a
//! fresh model on its own streams and reports one test SER. The channel
//! streams depend on `(base_seed, snr, trial)` only, so equalizers in the
//! same trial are compared on identical data.

mod plan;
mod table;
mod verify;

use std::collections::HashSet;
use std::fs::OpenOptions;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use rayon::prelude::*;
use thiserror::Error;

use crate::channel::{transmit, ChannelError, TransmissionRecord};
use crate::equalizers::{
    evaluate_ser, Combine, EqError, Equalizer, EqualizerConfig, EqualizerKind,
};
use crate::game::GameError;
use crate::kv::KvError;

pub use plan::{derive_seed, ChannelKind, ExperimentPlan, Grid, Preset};
pub use table::{emit_plotdata, emit_results, parse_results, summarize, SummaryRow, SweepResult};
pub use verify::{emit_game_checks, game_verify, GameCheck};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid plan: {0}")]
    Plan(String),
    #[error(transparent)]
    Kv(#[from] KvError),
    #[error(transparent)]
    Equalizer(#[from] EqError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Game(#[from] GameError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// File name of the sweep table inside an output directory.
pub const RESULTS_FILE: &str = "results.csv";
/// File name of the grid table inside an output directory.
pub const GRID_FILE: &str = "grid.csv";

/// Train, validation and test streams of one `(snr, trial)` point.
#[derive(Debug, Clone)]
pub struct Streams {
    pub train: TransmissionRecord,
    pub val: TransmissionRecord,
    pub test: TransmissionRecord,
}

pub fn streams(plan: &ExperimentPlan, snr_db: f64, trial: usize) -> Result<Streams, HarnessError> {
    let make = |tag: &str, len: usize| {
        let seed = derive_seed(plan.base_seed, tag, snr_db, trial);
        transmit(&plan.channel.config(snr_db, seed), len)
    };
    Ok(Streams {
        train: make("train", plan.train_symbols)?,
        val: make("val", plan.val_symbols)?,
        test: make("test", plan.test_symbols)?,
    })
}

/// One unit of work.
#[derive(Debug, Clone)]
pub struct Cell {
    /// Equalizer label as it appears in the results table.
    pub label: String,
    pub config: EqualizerConfig,
    pub snr_db: f64,
    pub trial: usize,
}

impl Cell {
    pub fn run_id(&self) -> String {
        format!("{}-snr{}-t{}", self.label, self.snr_db, self.trial)
    }
}

/// Result of one cell; `val_ser` is only measured when asked for.
#[derive(Debug, Clone)]
pub struct CellOutcome {
    pub row: SweepResult,
    pub val_ser: f64,
}

/// Trains and scores one cell. Training failures become a row with a NaN
/// SER.
pub fn run_cell(
    plan: &ExperimentPlan,
    cell: &Cell,
    with_val: bool,
) -> Result<CellOutcome, HarnessError> {
    let data = streams(plan, cell.snr_db, cell.trial)?;
    let start = Instant::now();
    let mut row = SweepResult {
        run_id: cell.run_id(),
        equalizer: cell.label.clone(),
        channel: plan.channel.to_string(),
        snr_db: cell.snr_db,
        trial: cell.trial,
        seed: cell.config.seed,
        ser: f64::NAN,
        n_test: 0,
        train_symbols: plan.train_symbols as u64,
        wall_s: 0.0,
    };
    let mut val_ser = f64::NAN;
    match Equalizer::train(&cell.config, &data.train) {
        Ok(mut eq) => {
            let r = evaluate_ser(&mut eq, &data.test)?;
            row.ser = r.ser;
            row.n_test = r.n;
            if with_val {
                val_ser = evaluate_ser(&mut eq, &data.val)?.ser;
            }
        }
        Err(e) => log::error!("{}: training failed: {e}", row.run_id),
    }
    row.wall_s = start.elapsed().as_secs_f64();
    log::info!(
        "{}: ser {} over {} symbols in {:.1} s",
        row.run_id,
        row.ser,
        row.n_test,
        row.wall_s
    );
    Ok(CellOutcome { row, val_ser })
}

/// Rows in cell order plus the per-point summary.
#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub rows: Vec<SweepResult>,
    pub summary: Vec<SummaryRow>,
}

/// Every `(equalizer, snr, trial)` cell of the plan.
pub fn sweep_cells(plan: &ExperimentPlan) -> Vec<Cell> {
    let mut cells = Vec::new();
    for &kind in &plan.equalizers {
        for &snr in &plan.snr_db {
            for trial in 0..plan.trials {
                let label = kind.to_string();
                let seed = derive_seed(plan.base_seed, &label, snr, trial);
                cells.push(Cell {
                    config: plan.equalizer_config(kind, seed),
                    label,
                    snr_db: snr,
                    trial,
                });
            }
        }
    }
    cells
}

/// Runs the sweep. With `out`, finished rows are appended to
/// `out/results.csv` as they complete, rows already there are reused, and
/// the file is rewritten in cell order at the end.
pub fn run_sweep(plan: &ExperimentPlan, out: Option<&Path>) -> Result<SweepOutcome, HarnessError> {
    plan.validate()?;
    let outcomes = run_cells(
        plan,
        &sweep_cells(plan),
        out.map(|d| d.join(RESULTS_FILE)),
        false,
    )?;
    let rows: Vec<SweepResult> = outcomes.into_iter().map(|o| o.row).collect();
    Ok(SweepOutcome {
        summary: summarize(&rows),
        rows,
    })
}

fn run_cells(
    plan: &ExperimentPlan,
    cells: &[Cell],
    path: Option<PathBuf>,
    with_val: bool,
) -> Result<Vec<CellOutcome>, HarnessError> {
    let mut done: Vec<Option<CellOutcome>> = vec![None; cells.len()];
    let previous = match path.as_deref().filter(|p| p.exists()) {
        Some(p) => parse_results(p)?,
        None => Vec::new(),
    };
    // validation SER is not stored, so a grid always re-measures
    if !with_val && !previous.is_empty() {
        for (slot, cell) in done.iter_mut().zip(cells) {
            let id = cell.run_id();
            // failed rows are retried
            if let Some(r) = previous
                .iter()
                .rev()
                .find(|r| r.run_id == id && !r.ser.is_nan())
            {
                *slot = Some(CellOutcome {
                    row: r.clone(),
                    val_ser: f64::NAN,
                });
            }
        }
        log::info!(
            "resuming: {} of {} cells already done",
            done.iter().flatten().count(),
            cells.len()
        );
    }
    let writer = match &path {
        Some(p) => {
            std::fs::create_dir_all(p.parent().unwrap_or(Path::new(".")))?;
            let fresh = !p.exists() || std::fs::metadata(p)?.len() == 0;
            let file = OpenOptions::new().create(true).append(true).open(p)?;
            let w = csv::WriterBuilder::new()
                .has_headers(fresh)
                .from_writer(file);
            Some(Mutex::new(w))
        }
        None => None,
    };
    let pending: Vec<usize> = (0..cells.len()).filter(|&i| done[i].is_none()).collect();
    let fresh: Vec<(usize, CellOutcome)> = pending
        .par_iter()
        .map(|&i| {
            let o = run_cell(plan, &cells[i], with_val)?;
            if let Some(w) = &writer {
                let mut w = w.lock().expect("results writer poisoned");
                w.serialize(&o.row)?;
                w.flush()?;
            }
            Ok((i, o))
        })
        .collect::<Result<_, HarnessError>>()?;
    drop(writer);
    for (i, o) in fresh {
        done[i] = Some(o);
    }
    let outcomes: Vec<CellOutcome> = done
        .into_iter()
        .map(|o| o.expect("every cell ran"))
        .collect();
    if let Some(p) = &path {
        // rows of other plans sharing the file are kept ahead of ours
        let ids: HashSet<String> = cells.iter().map(Cell::run_id).collect();
        let mut rows: Vec<SweepResult> = previous
            .into_iter()
            .filter(|r| !ids.contains(&r.run_id))
            .collect();
        rows.extend(outcomes.iter().map(|o| o.row.clone()));
        let tmp = p.with_extension("csv.tmp");
        emit_results(&rows, &tmp)?;
        std::fs::rename(&tmp, p)?;
    }
    Ok(outcomes)
}

/// One point of the hyperparameter grid, aggregated over SNRs and trials.
#[derive(Debug, Clone, PartialEq)]
pub struct GridPoint {
    pub label: String,
    pub cycles: usize,
    pub k: usize,
    pub combine: Combine,
    pub val_ser_mean: f64,
    pub test_ser_mean: f64,
}

#[derive(Debug, Clone)]
pub struct GridOutcome {
    pub rows: Vec<SweepResult>,
    pub summary: Vec<SummaryRow>,
    pub points: Vec<GridPoint>,
    /// Lowest mean validation SER.
    pub best_val: GridPoint,
    /// Lowest mean test SER.
    pub best_test: GridPoint,
}

pub fn grid_label(cycles: usize, k: usize, combine: Combine) -> String {
    format!("mafenn-C{cycles}-K{k}-{combine}")
}

/// Cells for every `(C, K, combine)` point, SNR and trial. Model seeds
/// depend on the trial only, so grid points start from comparable draws.
pub fn grid_cells(plan: &ExperimentPlan) -> Vec<(GridPoint, Vec<Cell>)> {
    let mut out = Vec::new();
    for &cycles in &plan.grid.cycles {
        for &k in &plan.grid.k {
            for &combine in &plan.grid.combine {
                let label = grid_label(cycles, k, combine);
                let mut cells = Vec::new();
                for &snr in &plan.snr_db {
                    for trial in 0..plan.trials {
                        let seed = derive_seed(plan.base_seed, "mafenn", snr, trial);
                        let mut config = plan.equalizer_config(EqualizerKind::Mafenn, seed);
                        config.cycles = cycles;
                        config.k = k;
                        config.combine = combine;
                        cells.push(Cell {
                            label: label.clone(),
                            config,
                            snr_db: snr,
                            trial,
                        });
                    }
                }
                let point = GridPoint {
                    label,
                    cycles,
                    k,
                    combine,
                    val_ser_mean: f64::NAN,
                    test_ser_mean: f64::NAN,
                };
                out.push((point, cells));
            }
        }
    }
    out
}

fn mean_finite(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v
        .filter(|x| !x.is_nan())
        .fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// Lowest `metric`; ties go to fewer cycles, then the shorter window.
fn best_by(points: &[GridPoint], metric: impl Fn(&GridPoint) -> f64) -> GridPoint {
    let key = |p: &GridPoint| {
        let m = metric(p);
        (if m.is_nan() { f64::INFINITY } else { m }, p.cycles, p.k)
    };
    points
        .iter()
        .min_by(|a, b| key(a).partial_cmp(&key(b)).expect("no NaN keys"))
        .expect("non-empty grid")
        .clone()
}

/// Exhaustive evaluation of the plan's grid over the MAFENN equalizer.
pub fn grid_search(plan: &ExperimentPlan, out: Option<&Path>) -> Result<GridOutcome, HarnessError> {
    plan.validate()?;
    if plan.grid.is_empty() {
        return Err(HarnessError::Plan("the grid has no points".into()));
    }
    let groups = grid_cells(plan);
    let cells: Vec<Cell> = groups.iter().flat_map(|(_, c)| c.iter().cloned()).collect();
    let outcomes = run_cells(plan, &cells, out.map(|d| d.join(GRID_FILE)), true)?;
    let mut points = Vec::with_capacity(groups.len());
    let mut at = 0;
    for (mut p, c) in groups {
        let chunk = &outcomes[at..at + c.len()];
        at += c.len();
        p.val_ser_mean = mean_finite(chunk.iter().map(|o| o.val_ser));
        p.test_ser_mean = mean_finite(chunk.iter().map(|o| o.row.ser));
        points.push(p);
    }
    let rows: Vec<SweepResult> = outcomes.into_iter().map(|o| o.row).collect();
    Ok(GridOutcome {
        summary: summarize(&rows),
        best_val: best_by(&points, |p| p.val_ser_mean),
        best_test: best_by(&points, |p| p.test_ser_mean),
        points,
        rows,
    })
}

/// Distinct equalizer labels in first-seen order.
pub(crate) fn labels_in_order<'a>(labels: impl Iterator<Item = &'a str>) -> Vec<String> {
    let mut seen = HashSet::new();
    labels
        .filter(|l| seen.insert(l.to_string()))
        .map(str::to_string)
        .collect()
}
