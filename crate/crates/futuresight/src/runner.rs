//! Training run driver: dataset in, checkpoints and a metrics log out.
//!
//! Output directory layout:
//!
//! ```text
//! out/tokenizer.json        copy of the tokenizer the run used
//! out/model_config.json     the model config
//! out/metrics.jsonl         one TrainRecord per optimizer step
//! out/step-000500.ckpt      periodic checkpoints (weights + optimizer state)
//! out/final.ckpt            written when the schedule completes
//! ```

use std::path::{Path, PathBuf};
use std::time::Instant;

use futuresight_core::model::{Model, ModelConfig};
use futuresight_core::training::{Control, PreparedExample, TrainConfig, TrainRecord, Trainer};

use crate::checkpoint::{self, TrainingState};
use crate::formats;
use crate::{Error, Result};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const TOKENIZER_FILE: &str = "tokenizer.json";
pub const MODEL_CONFIG_FILE: &str = "model_config.json";

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub dataset: PathBuf,
    pub tokenizer: PathBuf,
    pub out: PathBuf,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Save a checkpoint every this many optimizer steps; 0 disables periodic saves.
    pub checkpoint_every: u64,
    /// Continue from this checkpoint's weights, optimizer state and schedule position.
    pub resume: Option<PathBuf>,
    /// Stop after this many total optimizer steps, saving a checkpoint there.
    pub max_steps: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub steps: u64,
    pub last: Option<TrainRecord>,
    /// The last checkpoint written by this run.
    pub checkpoint: PathBuf,
    pub completed: bool,
}

pub fn step_checkpoint_path(out: &Path, step: u64) -> PathBuf {
    out.join(format!("step-{step:06}.ckpt"))
}

pub fn run_training(cfg: &RunConfig) -> Result<RunSummary> {
    let tokenizer = formats::read_tokenizer(&cfg.tokenizer)?;
    if cfg.model.vocab_size != tokenizer.vocab_size() {
        return Err(Error::Usage(format!(
            "model vocab_size {} differs from tokenizer vocabulary {}",
            cfg.model.vocab_size,
            tokenizer.vocab_size()
        )));
    }
    let examples = formats::read_dataset(&cfg.dataset)?;
    if examples.is_empty() {
        return Err(Error::Usage(format!("{}: dataset holds no examples", cfg.dataset.display())));
    }
    let prepared = examples
        .iter()
        .map(|e| PreparedExample::new(e, &tokenizer, cfg.model.max_seq))
        .collect::<futuresight_core::Result<Vec<_>>>()?;

    let (mut model, mut trainer) = match &cfg.resume {
        None => {
            let model = Model::new(cfg.model.clone())?;
            let trainer = Trainer::new(cfg.train.clone(), &model)?;
            (model, trainer)
        }
        Some(path) => {
            let ckpt = checkpoint::load(path)?;
            ckpt.expect_config(&cfg.model, path)?;
            let state = ckpt
                .training
                .ok_or_else(|| Error::checkpoint(path, "no optimizer state; cannot resume"))?;
            let trainer = Trainer::resume(cfg.train.clone(), &ckpt.model, state.adam, state.progress)?;
            (ckpt.model, trainer)
        }
    };

    std::fs::create_dir_all(&cfg.out).map_err(|e| Error::io(&cfg.out, e))?;
    formats::write_tokenizer(&cfg.out.join(TOKENIZER_FILE), &tokenizer)?;
    formats::write_json(&cfg.out.join(MODEL_CONFIG_FILE), &cfg.model)?;
    let metrics = cfg.out.join(METRICS_FILE);

    let origin = Instant::now();
    let mut last_saved: Option<PathBuf> = None;
    let mut stopped = false;
    let save = |trainer: &Trainer, model: &Model, path: PathBuf| -> Result<PathBuf> {
        let state = TrainingState {
            train_config: cfg.train.clone(),
            adam: trainer.adam().clone(),
            progress: trainer.progress(),
        };
        checkpoint::save(&path, model, Some(&state))?;
        Ok(path)
    };
    let mut io_error: Option<Error> = None;
    let records = trainer.fit(&mut model, &prepared, || origin.elapsed().as_secs_f64(), |record, trainer, model| {
        let result = (|| -> Result<Control> {
            formats::append_jsonl(&metrics, record)?;
            let at_limit = cfg.max_steps.is_some_and(|m| record.step >= m);
            if (cfg.checkpoint_every > 0 && record.step % cfg.checkpoint_every == 0) || at_limit {
                last_saved = Some(save(trainer, model, step_checkpoint_path(&cfg.out, record.step))?);
            }
            if at_limit {
                stopped = true;
                return Ok(Control::Stop);
            }
            Ok(Control::Continue)
        })();
        result.or_else(|e| {
            io_error = Some(e);
            Ok(Control::Stop)
        })
    })?;
    if let Some(e) = io_error {
        return Err(e);
    }

    let completed = !stopped && trainer.progress().epoch >= cfg.train.epochs;
    let checkpoint = if completed {
        save(&trainer, &model, cfg.out.join(FINAL_CHECKPOINT))?
    } else {
        match last_saved {
            Some(p) => p,
            None => save(&trainer, &model, step_checkpoint_path(&cfg.out, trainer.progress().step))?,
        }
    };
    Ok(RunSummary {
        steps: trainer.progress().step,
        last: records.last().cloned(),
        checkpoint,
        completed,
    })
}
