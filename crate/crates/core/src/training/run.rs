use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde_json::json;
use twostream_autograd::Real;

use crate::data::{Dataset, MaskSource};
use crate::error::{Error, Result};
use crate::losses::LossReport;
use crate::training::checkpoint::save_checkpoint;
use crate::training::state::TrainState;

pub const LOG_FILE: &str = "losses.jsonl";
pub const LATEST: &str = "latest.tstc";

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("step_{step:07}.tstc"))
}

/// Appends one JSON record per step: step, every loss term, wall time.
pub struct LossLog {
    out: BufWriter<File>,
    path: PathBuf,
    start: Instant,
}

impl LossLog {
    pub fn open(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self {
            out: BufWriter::new(file),
            path: path.to_path_buf(),
            start: Instant::now(),
        })
    }

    pub fn record(&mut self, step: u64, r: &LossReport) -> Result<()> {
        let mut rec = serde_json::to_value(r).map_err(|e| Error::Format(e.to_string()))?;
        rec["step"] = json!(step);
        rec["wall_time"] = json!(self.start.elapsed().as_secs_f64());
        writeln!(self.out, "{rec}")
            .and_then(|_| self.out.flush())
            .map_err(|e| Error::io(&self.path, e))
    }
}

/// Runs until `config.max_steps`, checkpointing every `checkpoint_every`
/// steps and at the end. `on_step` sees each report as it is produced.
pub fn train_loop<T: Real>(
    mut state: TrainState<T>,
    ds: &Dataset,
    masks: &MaskSource,
    mut log: Option<&mut LossLog>,
    mut on_step: impl FnMut(u64, &LossReport),
) -> Result<TrainState<T>> {
    let dir = state.config.output_dir.clone();
    let every = state.config.checkpoint_every;
    let start_step = state.step;
    while state.step < state.config.max_steps {
        let batch = state.next_batch(ds, masks)?;
        let outcome = state.train_step(&batch)?;
        if let Some(l) = log.as_deref_mut() {
            l.record(state.step, &outcome.report)?;
        }
        on_step(state.step, &outcome.report);
        let last = state.step == state.config.max_steps;
        if (every > 0 && state.step % every == 0) || last {
            save_checkpoint(&state, &checkpoint_path(&dir, state.step))?;
            save_checkpoint(&state, &dir.join(LATEST))?;
        }
    }
    if state.step > start_step {
        log::info!("trained steps {}..{}", start_step + 1, state.step);
    }
    Ok(state)
}
