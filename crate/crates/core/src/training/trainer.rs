use std::path::{Path, PathBuf};
use std::time::Instant;

use super::{clip_grad_norm, lr_at, make_batches, AdamHyper, AdamW, Dataset, LossLog, LossRecord, Split, TrainConfig};
use crate::model::{Checkpoint, Model, RngState};
use crate::tensor::{no_grad, Float};
use crate::{Error, Result};

/// Where and how a run reports.
#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Receives `loss.csv`, `step_NNNNNN/` checkpoints and `final/`.
    pub out_dir: Option<PathBuf>,
    /// Continue from this checkpoint (the model must already hold its weights).
    pub resume: Option<&'a Checkpoint>,
    /// Called after every logged record.
    pub on_record: Option<Box<dyn FnMut(&LossRecord) + 'a>>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub records: Vec<LossRecord>,
    /// Train loss of the first step of this run.
    pub initial_loss: f64,
    /// Train loss of the last step.
    pub final_loss: f64,
    pub steps_run: u64,
    pub final_checkpoint: Option<PathBuf>,
}

struct Run<'a, S: Float> {
    cfg: &'a TrainConfig,
    data: &'a Dataset,
    log: LossLog,
    on_record: Option<Box<dyn FnMut(&LossRecord) + 'a>>,
    started: Instant,
    out_dir: Option<PathBuf>,
    opt: AdamW<S>,
    last_checkpoint: Option<PathBuf>,
}

impl<S: Float> Run<'_, S> {
    fn record(&mut self, step: u64, split: Split, loss: f64, lr: f64, tokens_seen: u64) -> Result<()> {
        let ms = (self.started.elapsed().as_secs_f64() * 1000.0).round();
        let rec = LossRecord {
            step,
            split,
            loss,
            lr,
            tokens_seen,
            wallclock_s: ms / 1000.0,
        };
        if let Some(f) = &mut self.on_record {
            f(&rec);
        }
        self.log.push(rec)
    }

    /// Mean loss over a fixed set of validation windows.
    fn evaluate(&self, model: &Model<S>) -> Result<Option<f64>> {
        let (t, b) = (self.cfg.seq_len, self.cfg.batch_size());
        if self.cfg.eval_batches == 0 || !self.data.supports(Split::Val, t) {
            return Ok(None);
        }
        let _guard = no_grad();
        let mut stream = make_batches(self.data, t, b, Split::Val, self.cfg.seed)?;
        let mut total = 0.0;
        for _ in 0..self.cfg.eval_batches {
            let batch = stream.next_batch();
            total += model.loss(&batch.inputs, &batch.targets, b, t)?.item()?.as_f64();
        }
        Ok(Some(total / self.cfg.eval_batches as f64))
    }

    fn save(&mut self, model: &Model<S>, name: &str, step: u64, tokens_seen: u64, word_pos: u128) -> Result<Option<PathBuf>> {
        let Some(out) = &self.out_dir else {
            return Ok(None);
        };
        let dir = out.join(name);
        let mut ck = Checkpoint::capture(model, step);
        ck.manifest.tokens_seen = tokens_seen;
        ck.manifest.lr = Some(lr_at(step, self.cfg));
        ck.manifest.train = Some(
            toml::Table::try_from(self.cfg).map_err(|e| Error::Checkpoint(format!("train config: {e}")))?,
        );
        ck.manifest.rng = vec![RngState {
            seed: self.cfg.seed,
            word_pos: word_pos.to_string(),
        }];
        ck.set_optimizer(self.opt.t, &self.opt.m, &self.opt.v)?;
        ck.save(&dir)?;
        self.last_checkpoint = Some(dir.clone());
        Ok(Some(dir))
    }
}

fn checkpoint_name(step: u64) -> String {
    format!("step_{step:06}")
}

/// Trains `model` in place.
///
/// Per step `s` (0-based) the train loss is measured on a fresh batch, logged
/// with `lr_at(s)`, and one AdamW update is applied. Validation runs before
/// step `s` whenever `s % eval_every == 0` and once more at the end, so a
/// `val` row at step `s` describes the weights after `s` updates. A
/// non-finite loss stops the run with an error; checkpoints already written
/// are left untouched.
pub fn train<S: Float>(
    model: &mut Model<S>,
    cfg: &TrainConfig,
    data: &Dataset,
    opts: TrainOptions<'_>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mcfg = model.config().clone();
    if cfg.seq_len > mcfg.max_seq_len {
        return Err(Error::config(format!(
            "seq_len {} exceeds the model's max_seq_len {}",
            cfg.seq_len, mcfg.max_seq_len
        )));
    }
    let (t, b) = (cfg.seq_len, cfg.batch_size());
    let mut stream = make_batches(data, t, b, Split::Train, cfg.seed)?;
    let hp = AdamHyper {
        beta1: cfg.betas[0],
        beta2: cfg.betas[1],
        eps: cfg.eps_adam,
        weight_decay: cfg.weight_decay,
    };
    let mut opt = AdamW::for_model(hp, model);
    let (mut start, mut tokens_seen) = (0u64, 0u64);
    if let Some(ck) = opts.resume {
        start = ck.manifest.step;
        tokens_seen = ck.manifest.tokens_seen;
        if let Some((step_t, m, v)) = ck.moments::<S>()? {
            opt.t = step_t;
            opt.m = m;
            opt.v = v;
        }
        if let Some(r) = ck.manifest.rng.first() {
            let pos = r
                .word_pos
                .parse::<u128>()
                .map_err(|_| Error::Checkpoint(format!("bad rng position {:?}", r.word_pos)))?;
            stream.set_word_pos(pos);
        }
    }

    let log = match &opts.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let path = dir.join("loss.csv");
            // A fresh run starts a new log; a resumed one continues it.
            if opts.resume.is_none() && path.exists() {
                std::fs::remove_file(&path)?;
            }
            LossLog::append_to(&path)?
        }
        None => LossLog::in_memory(),
    };
    let mut run = Run {
        cfg,
        data,
        log,
        on_record: opts.on_record,
        started: Instant::now(),
        out_dir: opts.out_dir,
        opt,
        last_checkpoint: None,
    };

    let (mut initial, mut last) = (f64::NAN, f64::NAN);
    for s in start..cfg.total_steps {
        if cfg.eval_every > 0 && s % cfg.eval_every == 0 {
            if let Some(v) = run.evaluate(model)? {
                run.record(s, Split::Val, v, lr_at(s, cfg), tokens_seen)?;
            }
        }
        let lr = lr_at(s, cfg);
        let batch = stream.next_batch();
        let loss = model.loss(&batch.inputs, &batch.targets, b, t)?;
        let value = loss.item()?.as_f64();
        if !value.is_finite() {
            let kept = run
                .last_checkpoint
                .as_deref()
                .map_or("none".to_string(), |p: &Path| p.display().to_string());
            return Err(Error::NonFinite(format!(
                "loss is {value} at step {s}; last good checkpoint: {kept}"
            )));
        }
        loss.backward()?;
        drop(loss);
        let mut grads: Vec<Vec<S>> = model
            .params()
            .iter()
            .map(|(_, _, p)| p.take_grad().unwrap_or_else(|| vec![S::zero(); p.numel()]))
            .collect();
        clip_grad_norm(&mut grads, cfg.grad_clip);
        run.opt.step_model(model, &grads, lr)?;
        tokens_seen += (b * t) as u64;
        if s == start {
            initial = value;
        }
        last = value;
        run.record(s, Split::Train, value, lr, tokens_seen)?;
        let done = s + 1;
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done < cfg.total_steps {
            run.save(model, &checkpoint_name(done), done, tokens_seen, stream.word_pos())?;
        }
    }
    if let Some(v) = run.evaluate(model)? {
        run.record(cfg.total_steps, Split::Val, v, lr_at(cfg.total_steps, cfg), tokens_seen)?;
    }
    let final_checkpoint = run.save(model, "final", cfg.total_steps, tokens_seen, stream.word_pos())?;
    Ok(TrainOutcome {
        records: run.log.records,
        initial_loss: initial,
        final_loss: last,
        steps_run: cfg.total_steps.saturating_sub(start),
        final_checkpoint,
    })
}
