//! Full-factorial experiment grid with resumable execution.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Mutex;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::AnalysisError;
use crate::augment::{AugmentArm, AugmentPolicy};
use crate::nn::{Architecture, LrSchedule, OptimizerKind};
use crate::synth::LabeledDrawing;
use crate::train::{self, LabelSource, Prepared, SplitSpec, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridSpec {
    pub archs: Vec<Architecture>,
    /// Short and long training arms.
    pub epoch_arms: [usize; 2],
    pub augment_arms: Vec<AugmentArm>,
    /// Shared by every cell.
    pub seeds: Vec<u64>,
    pub input_size: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub schedule: LrSchedule,
    pub split: SplitSpec,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec::desk(Architecture::ALL.to_vec(), vec![1, 2, 3])
    }
}

impl GridSpec {
    /// Reduced profile: 10/20 epochs at 64×64.
    pub fn desk(archs: Vec<Architecture>, seeds: Vec<u64>) -> Self {
        let t = TrainConfig::default();
        GridSpec {
            archs,
            epoch_arms: [10, 20],
            augment_arms: AugmentArm::ALL.to_vec(),
            seeds,
            input_size: 64,
            batch_size: t.batch_size,
            optimizer: t.optimizer,
            schedule: t.schedule,
            split: SplitSpec::default(),
        }
    }

    /// Full profile: 50/100 epochs at 128×128.
    pub fn paper(archs: Vec<Architecture>, seeds: Vec<u64>) -> Self {
        GridSpec { epoch_arms: [50, 100], input_size: 128, ..GridSpec::desk(archs, seeds) }
    }

    /// Cells in canonical order.
    pub fn cells(&self) -> Vec<GridCell> {
        let mut out = Vec::new();
        for &arch in &self.archs {
            for label_source in LabelSource::ALL {
                for epochs in self.epoch_arms {
                    for &augment in &self.augment_arms {
                        for &seed in &self.seeds {
                            out.push(GridCell { arch, label_source, epochs, augment, seed });
                        }
                    }
                }
            }
        }
        out
    }

    pub fn train_config(&self, cell: &GridCell) -> TrainConfig {
        TrainConfig {
            arch: cell.arch,
            input_size: self.input_size,
            label_source: cell.label_source,
            epochs: cell.epochs,
            augment: AugmentPolicy::for_arm(cell.augment),
            batch_size: self.batch_size,
            optimizer: self.optimizer,
            schedule: self.schedule,
            seed: cell.seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GridCell {
    pub arch: Architecture,
    pub label_source: LabelSource,
    pub epochs: usize,
    pub augment: AugmentArm,
    pub seed: u64,
}

impl std::fmt::Display for GridCell {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{}/{}ep/{}/seed{}", self.arch, self.label_source, self.epochs, self.augment, self.seed)
    }
}

/// One grid cell's outcome. Column order in CSV is the field order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub arch: Architecture,
    pub label_source: LabelSource,
    pub epochs: usize,
    pub augment: AugmentArm,
    pub seed: u64,
    pub val_accuracy: f64,
    pub acc_correct: Option<f64>,
    pub acc_partially_correct: Option<f64>,
    pub acc_incorrect: Option<f64>,
    /// Kept out of the record files so they stay reproducible; see
    /// [`write_timings`].
    #[serde(skip)]
    pub runtime_seconds: f64,
}

impl ExperimentRecord {
    pub fn cell(&self) -> GridCell {
        GridCell { arch: self.arch, label_source: self.label_source, epochs: self.epochs, augment: self.augment, seed: self.seed }
    }

    pub fn per_class(&self) -> [Option<f64>; 3] {
        [self.acc_correct, self.acc_partially_correct, self.acc_incorrect]
    }
}

/// Cells of `spec` with no record.
pub fn missing_cells(spec: &GridSpec, records: &[ExperimentRecord]) -> Vec<GridCell> {
    let done: BTreeSet<GridCell> = records.iter().map(|r| r.cell()).collect();
    spec.cells().into_iter().filter(|c| !done.contains(c)).collect()
}

pub fn check_complete(spec: &GridSpec, records: &[ExperimentRecord]) -> Result<(), AnalysisError> {
    let missing = missing_cells(spec, records);
    if missing.is_empty() {
        Ok(())
    } else {
        Err(AnalysisError::PartialGrid { missing: missing.iter().map(|c| c.to_string()).collect() })
    }
}

pub struct GridRun {
    /// Every cell of the spec, in canonical order.
    pub records: Vec<ExperimentRecord>,
    /// Cells trained by this call.
    pub computed: usize,
}

pub fn run_cell(prepared: &Prepared, spec: &GridSpec, cell: &GridCell) -> Result<ExperimentRecord, AnalysisError> {
    let started = Instant::now();
    let run = train::train_prepared(prepared, &spec.train_config(cell))?;
    let v = run.result.validation.as_ref().ok_or(AnalysisError::InvalidInput("empty validation split".into()))?;
    Ok(ExperimentRecord {
        arch: cell.arch,
        label_source: cell.label_source,
        epochs: cell.epochs,
        augment: cell.augment,
        seed: cell.seed,
        val_accuracy: v.accuracy,
        acc_correct: v.per_class_accuracy[0],
        acc_partially_correct: v.per_class_accuracy[1],
        acc_incorrect: v.per_class_accuracy[2],
        runtime_seconds: started.elapsed().as_secs_f64(),
    })
}

/// Trains every cell missing from `existing` on `workers` threads.
/// `on_record` sees each new record as soon as it finishes, so callers can
/// persist progress; an interrupted grid resumes from those records.
pub fn run_grid(
    data: &[LabeledDrawing],
    spec: &GridSpec,
    existing: &[ExperimentRecord],
    workers: usize,
    on_record: impl Fn(&ExperimentRecord) + Sync,
) -> Result<GridRun, AnalysisError> {
    let gold: Vec<_> = data.iter().map(|d| d.gold).collect();
    let split = train::split(&gold, &spec.split)?;
    let prepared: BTreeMap<LabelSource, Prepared> = LabelSource::ALL.iter().map(|&s| (s, Prepared::new(data, &split, s))).collect();
    let todo = missing_cells(spec, existing);
    let pool =
        rayon::ThreadPoolBuilder::new().num_threads(workers.max(1)).build().map_err(|e| AnalysisError::InvalidInput(e.to_string()))?;
    let first_error = Mutex::new(None);
    let fresh: Vec<ExperimentRecord> = pool.install(|| {
        todo.par_iter()
            .filter_map(|cell| match run_cell(&prepared[&cell.label_source], spec, cell) {
                Ok(r) => {
                    on_record(&r);
                    Some(r)
                }
                Err(e) => {
                    first_error.lock().expect("error slot").get_or_insert(e);
                    None
                }
            })
            .collect()
    });
    if let Some(e) = first_error.into_inner().expect("error slot") {
        return Err(e);
    }
    let computed = fresh.len();
    let mut by_cell: BTreeMap<GridCell, ExperimentRecord> = existing.iter().map(|r| (r.cell(), r.clone())).collect();
    by_cell.extend(fresh.into_iter().map(|r| (r.cell(), r)));
    let records = spec.cells().iter().filter_map(|c| by_cell.remove(c)).collect();
    Ok(GridRun { records, computed })
}

pub fn write_records_csv(path: &Path, records: &[ExperimentRecord]) -> Result<(), AnalysisError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records_csv(path: &Path) -> Result<Vec<ExperimentRecord>, AnalysisError> {
    let mut rd = csv::Reader::from_path(path)?;
    rd.deserialize().map(|r| r.map_err(AnalysisError::from)).collect()
}

pub fn write_records_jsonl(path: &Path, records: &[ExperimentRecord]) -> Result<(), AnalysisError> {
    let mut out = String::new();
    for r in records {
        out += &serde_json::to_string(r).map_err(|e| AnalysisError::InvalidInput(e.to_string()))?;
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn append_record_jsonl(path: &Path, record: &ExperimentRecord) -> Result<(), AnalysisError> {
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path)?;
    let line = serde_json::to_string(record).map_err(|e| AnalysisError::InvalidInput(e.to_string()))?;
    writeln!(f, "{line}")?;
    Ok(())
}

/// Reads JSON lines, skipping a torn final line from an interrupted write.
pub fn read_records_jsonl(path: &Path) -> Result<Vec<ExperimentRecord>, AnalysisError> {
    let lines: Vec<String> = BufReader::new(fs::File::open(path)?).lines().collect::<Result<_, _>>()?;
    let mut out = Vec::new();
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(line) {
            Ok(r) => out.push(r),
            Err(_) if i + 1 == lines.len() => break,
            Err(e) => return Err(AnalysisError::InvalidInput(format!("line {}: {e}", i + 1))),
        }
    }
    Ok(out)
}

/// Wall-clock seconds per cell; the one grid output that varies run to run.
pub fn write_timings(path: &Path, records: &[ExperimentRecord]) -> Result<(), AnalysisError> {
    let mut out = String::from("cell,runtime_seconds\n");
    for r in records {
        out += &format!("{},{:.3}\n", r.cell(), r.runtime_seconds);
    }
    fs::write(path, out)?;
    Ok(())
}
