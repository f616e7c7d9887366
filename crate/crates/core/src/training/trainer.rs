use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{OptimizerConfig, Selection};
use super::loss::label_smoothed_ce;
use super::optim::{adam_step, lr_at, TrainState};
use crate::error::{Error, Result};
use crate::model::{forward_batch, save_checkpoint, HatParameters};
use crate::tensor::{accumulate_grads, Graph, Scalar, Session, Tensor, Var};
use crate::text::{collate, EncodedExample, PAD_ID};

/// A training objective over a micro-batch.
pub trait Objective<T: Scalar> {
    /// Mean loss over the counted positions and how many were counted.
    /// `noise` seeds any input corruption the objective applies.
    fn loss(
        &self,
        s: &mut Session<'_, T>,
        params: &HatParameters<T>,
        examples: &[EncodedExample],
        noise: u64,
    ) -> Result<(Var, usize)>;
}

/// Teacher-forced label-smoothed cross-entropy on the target sequence.
#[derive(Clone, Copy, Debug)]
pub struct Seq2Seq {
    pub label_smoothing: f64,
}

impl<T: Scalar> Objective<T> for Seq2Seq {
    fn loss(
        &self,
        s: &mut Session<'_, T>,
        params: &HatParameters<T>,
        examples: &[EncodedExample],
        _noise: u64,
    ) -> Result<(Var, usize)> {
        let batch = collate(examples, PAD_ID)?;
        let out = forward_batch(s, params, &batch)?;
        let loss = label_smoothed_ce(
            &mut s.graph,
            out.logits,
            &batch.target_output,
            self.label_smoothing,
            PAD_ID,
        )?;
        Ok((loss, batch.num_target_tokens()))
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub lr: f64,
    pub train_loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub valid_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub valid_score: Option<f64>,
}

/// Higher-is-better validation score (e.g. ROUGE or BLEU of decoded outputs).
pub type Scorer<'a, T> = dyn Fn(&HatParameters<T>) -> Result<f64> + 'a;

#[derive(Default)]
pub struct TrainOptions<'a, T> {
    /// Receives `best.ckpt`, `last.ckpt` and `train_log.jsonl`.
    pub out_dir: Option<PathBuf>,
    /// Required unless selection is by loss.
    pub scorer: Option<&'a Scorer<'a, T>>,
    /// Stop as soon as the validation loss drops below this.
    pub stop_below: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub best: HatParameters<T>,
    pub last: HatParameters<T>,
    pub best_step: usize,
    pub best_valid_loss: Option<f64>,
    pub best_score: Option<f64>,
    pub steps: usize,
    pub log: Vec<LogRecord>,
    pub best_checkpoint: Option<PathBuf>,
    pub state: TrainState<T>,
}

const STREAM_MIX: u64 = 0x9E37_79B9_7F4A_7C15;

/// Draws the next micro-batch, reshuffling at epoch boundaries.
fn next_micro_batch<T>(
    data: &[EncodedExample],
    state: &mut TrainState<T>,
    order: &mut Vec<usize>,
    batch_size: usize,
) -> Vec<EncodedExample> {
    let rng = &mut state.rng;
    if rng.cursor >= data.len() || order.is_empty() {
        if !order.is_empty() {
            rng.epoch += 1;
        }
        rng.cursor = 0;
        *order = (0..data.len()).collect();
        let mut shuffle =
            ChaCha8Rng::seed_from_u64(rng.seed ^ (rng.epoch as u64).wrapping_mul(STREAM_MIX));
        order.shuffle(&mut shuffle);
    }
    let end = (rng.cursor + batch_size).min(data.len());
    let picked = order[rng.cursor..end]
        .iter()
        .map(|&i| data[i].clone())
        .collect();
    rng.cursor = end;
    rng.micro_batches += 1;
    picked
}

/// Token-weighted mean loss over `data` in inference mode.
pub fn evaluate_loss<T: Scalar, O: Objective<T>>(
    params: &HatParameters<T>,
    objective: &O,
    data: &[EncodedExample],
    batch_size: usize,
    noise: u64,
) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, chunk) in data.chunks(batch_size.max(1)).enumerate() {
        let mut s = Session::inference(&params.store);
        let (loss, n) = objective.loss(&mut s, params, chunk, noise.wrapping_add(i as u64))?;
        total += s.graph.value(loss).data()[0].to_f64_lossy() * n as f64;
        count += n;
    }
    if count == 0 {
        return Err(Error::invalid("validation set has no scored positions"));
    }
    Ok(total / count as f64)
}

struct Log {
    records: Vec<LogRecord>,
    file: Option<(PathBuf, BufWriter<File>)>,
}

impl Log {
    fn push(&mut self, rec: LogRecord) -> Result<()> {
        if let Some((path, w)) = &mut self.file {
            let line = serde_json::to_string(&rec).map_err(|e| Error::json("training log", e))?;
            writeln!(w, "{line}")
                .and_then(|_| w.flush())
                .map_err(|e| Error::io(path.clone(), e))?;
        }
        self.records.push(rec);
        Ok(())
    }
}

/// Seq2seq training with label-smoothed cross-entropy.
pub fn train<T: Scalar>(
    params: HatParameters<T>,
    cfg: &OptimizerConfig,
    train_set: &[EncodedExample],
    valid_set: &[EncodedExample],
    opts: &TrainOptions<'_, T>,
) -> Result<TrainOutcome<T>> {
    let objective = Seq2Seq {
        label_smoothing: cfg.label_smoothing,
    };
    train_objective(params, cfg, &objective, train_set, valid_set, opts)
}

/// The optimization loop shared by all objectives.
///
/// Each optimizer step averages gradients over `grad_accum_steps`
/// micro-batches, then applies AdamW at `lr_at(step)`. Validation runs every
/// `valid_every` steps and after the last one; the best model by the
/// configured selection criterion is kept (and saved if `out_dir` is set).
pub fn train_objective<T: Scalar, O: Objective<T>>(
    mut params: HatParameters<T>,
    cfg: &OptimizerConfig,
    objective: &O,
    train_set: &[EncodedExample],
    valid_set: &[EncodedExample],
    opts: &TrainOptions<'_, T>,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if cfg.selection != Selection::Loss && opts.scorer.is_none() {
        return Err(Error::invalid(format!(
            "selection by {:?} needs a validation scorer",
            cfg.selection
        )));
    }
    let mut log = Log {
        records: Vec::new(),
        file: None,
    };
    if let Some(dir) = &opts.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("train_log.jsonl");
        let f = File::create(&path).map_err(|e| Error::io(&path, e))?;
        log.file = Some((path, BufWriter::new(f)));
    }

    let mut state = TrainState::new(&params.store, cfg.seed);
    let mut order = Vec::new();
    let mut best: Option<(HatParameters<T>, usize, Option<f64>, Option<f64>)> = None;
    let mut best_key = f64::NEG_INFINITY;
    let accum_scale = T::lit(1.0 / cfg.grad_accum_steps as f64);

    while state.step < cfg.total_steps {
        let mut grads: Vec<Option<Tensor<T>>> = Vec::new();
        let mut step_loss = 0.0;
        for _ in 0..cfg.grad_accum_steps {
            let examples = next_micro_batch(train_set, &mut state, &mut order, cfg.batch_size);
            params.config.dropout = cfg.dropout_for_epoch(state.rng.epoch);
            let noise = cfg.seed ^ state.rng.micro_batches.wrapping_mul(STREAM_MIX);
            let mut s = Session::new(&params.store, Graph::new(true, noise), true);
            let (loss, _) = objective.loss(&mut s, &params, &examples, noise)?;
            step_loss += s.graph.value(loss).data()[0].to_f64_lossy();
            s.graph.backward(loss)?;
            accumulate_grads(&mut grads, s.param_grads())?;
        }
        for g in grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|x| *x *= accum_scale);
        }
        let lr = lr_at(state.step + 1, cfg)?;
        adam_step(&mut params.store, &grads, &mut state, cfg, lr)?;

        let mut rec = LogRecord {
            step: state.step,
            lr,
            train_loss: step_loss / cfg.grad_accum_steps as f64,
            valid_loss: None,
            valid_score: None,
        };
        let validate = !valid_set.is_empty()
            && (state.step.is_multiple_of(cfg.valid_every) || state.step == cfg.total_steps);
        let mut stop = false;
        if validate {
            params.config.dropout = cfg.dropout;
            let vl = evaluate_loss(&params, objective, valid_set, cfg.batch_size, cfg.seed)?;
            rec.valid_loss = Some(vl);
            let key = match (cfg.selection, opts.scorer) {
                (Selection::Loss, _) | (_, None) => -vl,
                (_, Some(score)) => {
                    let sc = score(&params)?;
                    rec.valid_score = Some(sc);
                    sc
                }
            };
            if best.is_none() || key > best_key {
                best_key = key;
                state.best_valid = Some(vl);
                best = Some((params.clone(), state.step, Some(vl), rec.valid_score));
            }
            stop = opts.stop_below.is_some_and(|t| vl < t);
        }
        log.push(rec)?;
        if stop {
            break;
        }
    }

    params.config.dropout = cfg.dropout;
    let (mut best, best_step, best_valid_loss, best_score) =
        best.unwrap_or_else(|| (params.clone(), state.step, None, None));
    best.config.dropout = cfg.dropout;
    let mut best_checkpoint = None;
    if let Some(dir) = &opts.out_dir {
        let path = dir.join("best.ckpt");
        save_checkpoint(&best, &path)?;
        save_checkpoint(&params, &dir.join("last.ckpt"))?;
        best_checkpoint = Some(path);
    }
    Ok(TrainOutcome {
        best,
        last: params,
        best_step,
        best_valid_loss,
        best_score,
        steps: state.step,
        log: log.records,
        best_checkpoint,
        state,
    })
}

/// Reads a JSONL training log back.
pub fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::json(path.display().to_string(), e)))
        .collect()
}
