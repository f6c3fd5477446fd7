use std::fs::{self, File};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{StepStats, Trainer};
use crate::field::save_checkpoint;
use crate::sampling::Strategy;
use crate::{Error, Result};

/// One row of `train_log.csv`. Deterministic for a fixed seed; wall-clock
/// time goes to `timing.csv` instead.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iteration: u64,
    pub strategy: Strategy,
    pub loss: f64,
    pub color: f64,
    pub eikonal: f64,
    pub mask: f64,
    pub kept_fraction: f64,
    pub inv_std: f64,
    pub lr: f64,
}

#[derive(Serialize)]
struct TimingRow {
    iteration: u64,
    wall_seconds: f64,
}

pub struct TrainOutcome {
    pub log: Vec<LogRow>,
    pub checkpoints: Vec<PathBuf>,
}

struct Outputs {
    dir: PathBuf,
    log: csv::Writer<File>,
    timing: csv::Writer<File>,
}

fn csv_writer(path: &Path) -> Result<csv::Writer<File>> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e))
}

impl Outputs {
    fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir.join("checkpoints")).map_err(|e| Error::io(dir, e))?;
        Ok(Outputs {
            dir: dir.to_path_buf(),
            log: csv_writer(&dir.join("train_log.csv"))?,
            timing: csv_writer(&dir.join("timing.csv"))?,
        })
    }

    fn write(&mut self, row: &LogRow, wall: f64) -> Result<()> {
        let p = self.dir.join("train_log.csv");
        self.log.serialize(row).map_err(|e| csv_err(&p, e))?;
        self.log.flush().map_err(|e| Error::io(&p, e))?;
        let p = self.dir.join("timing.csv");
        self.timing.serialize(TimingRow { iteration: row.iteration, wall_seconds: wall }).map_err(|e| csv_err(&p, e))?;
        self.timing.flush().map_err(|e| Error::io(&p, e))
    }

    fn checkpoint(&self, trainer: &Trainer) -> Result<PathBuf> {
        let path = self.dir.join("checkpoints").join(format!("iter_{:06}.json", trainer.iteration));
        save_checkpoint(&path, &trainer.checkpoint())?;
        Ok(path)
    }
}

/// Runs the schedule from the trainer's current iteration to
/// `schedule.total_iters`. With an output directory, writes
/// `train_log.csv`, `timing.csv` and `checkpoints/iter_NNNNNN.json` (initial,
/// every `checkpoint_every` iterations, and final). `observe` sees every
/// completed step.
pub fn run_training(
    trainer: &mut Trainer,
    out_dir: Option<&Path>,
    mut observe: impl FnMut(&Trainer, &StepStats),
) -> Result<TrainOutcome> {
    let mut outputs = out_dir.map(Outputs::create).transpose()?;
    let mut outcome = TrainOutcome { log: Vec::new(), checkpoints: Vec::new() };
    if let Some(o) = &outputs {
        outcome.checkpoints.push(o.checkpoint(trainer)?);
    }
    let start = Instant::now();
    let kept = trainer.pool.kept_fraction();
    let total = trainer.config.schedule.total_iters;
    let every = trainer.config.schedule.checkpoint_every;
    while trainer.iteration < total {
        let stats = trainer.step()?;
        let row = LogRow {
            iteration: stats.iteration,
            strategy: stats.strategy,
            loss: stats.losses.total,
            color: stats.losses.color,
            eikonal: stats.losses.eikonal,
            mask: stats.losses.mask,
            kept_fraction: kept,
            inv_std: stats.inv_std,
            lr: stats.lr,
        };
        if let Some(o) = &mut outputs {
            o.write(&row, start.elapsed().as_secs_f64())?;
            let done = trainer.iteration;
            if (every > 0 && done.is_multiple_of(every)) || done == total {
                outcome.checkpoints.push(o.checkpoint(trainer)?);
            }
        }
        if stats.iteration % 100 == 0 {
            log::info!(
                "iter {} [{}] loss {:.5} color {:.5} eik {:.5} mask {:.5}",
                stats.iteration,
                stats.strategy,
                row.loss,
                row.color,
                row.eikonal,
                row.mask
            );
        }
        observe(trainer, &stats);
        outcome.log.push(row);
    }
    Ok(outcome)
}
