//! MLM pre-training harness: AdamW, linear warmup/decay schedule, periodic
//! evaluation and run traces.

use std::fmt::Write as _;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::OperatorKind;
use crate::data::{mask_batch, stream, Corpus, CorpusSpec, MaskMode, MaskedBatch};
use crate::error::{Error, Result};
use crate::model::{is_decayed, mlm_loss, mlm_loss_and_grads, EncoderModel, ModelConfig};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub mask_prob: f64,
    #[serde(default)]
    pub mask_mode: MaskMode,
    pub eval_every: usize,
    pub eval_batches: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 600,
            batch_size: 32,
            peak_lr: 1e-4,
            warmup_steps: 30,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-12,
            weight_decay: 0.01,
            mask_prob: 0.15,
            mask_mode: MaskMode::Bert,
            eval_every: 50,
            eval_batches: 4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Desk-scale recipe: 600 steps, batch 32, 5% warmup. The peak rate is
    /// 3e-3 because 1e-4 barely moves a model this small in 600 steps.
    pub fn toy(seed: u64) -> Self {
        Self {
            peak_lr: 3e-3,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps > self.steps {
            return Err(Error::Config(format!(
                "warmup_steps {} exceeds steps {}",
                self.warmup_steps, self.steps
            )));
        }
        if self.batch_size == 0 || self.eval_every == 0 || self.eval_batches == 0 {
            return Err(Error::Config("batch_size, eval_every and eval_batches must be positive".into()));
        }
        if !(self.peak_lr > 0.0) || !(self.adam_eps > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::Config("learning rate and epsilon must be positive, decay non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.mask_prob) {
            return Err(Error::Config(format!("mask_prob must lie in [0, 1), got {}", self.mask_prob)));
        }
        Ok(())
    }
}

/// Linear ramp `0 → peak_lr` over `[0, warmup_steps]`, then linear decay to
/// zero at `steps`.
pub fn lr_at(step: usize, config: &TrainConfig) -> Result<f64> {
    let (warmup, total) = (config.warmup_steps, config.steps);
    if step > total {
        return Err(Error::StepOutOfRange { step, steps: total });
    }
    if step < warmup {
        Ok(config.peak_lr * (step as f64 / warmup as f64))
    } else if total == warmup {
        Ok(config.peak_lr)
    } else {
        Ok(config.peak_lr * ((total - step) as f64 / (total - warmup) as f64))
    }
}

/// Adam moments, one buffer per parameter tensor.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let (first_moment, second_moment) = params
            .into_iter()
            .map(|t| (vec![0.0; t.numel()], vec![0.0; t.numel()]))
            .unzip();
        Self {
            step: 0,
            first_moment,
            second_moment,
        }
    }
}

/// One bias-corrected Adam update with decoupled weight decay. Decay is
/// skipped for biases and layer-norm parameters (see [`is_decayed`]).
pub fn adamw_step(
    params: &mut [(String, &mut Tensor)],
    grads: &[Vec<f64>],
    state: &mut OptimizerState,
    lr: f64,
    config: &TrainConfig,
) -> Result<()> {
    for (i, (name, t)) in params.iter().enumerate() {
        match grads.get(i) {
            Some(g) if g.len() == t.numel() => {}
            _ => return Err(Error::MissingGradient(name.clone())),
        }
    }
    if state.first_moment.len() != params.len() {
        *state = OptimizerState::new(params.iter().map(|(_, t)| &**t));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (config.beta1, config.beta2);
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    for (i, (name, tensor)) in params.iter_mut().enumerate() {
        let decay = if is_decayed(name) { lr * config.weight_decay } else { 0.0 };
        let m = &mut state.first_moment[i];
        let v = &mut state.second_moment[i];
        for (((p, &g), m), v) in tensor.data_mut().iter_mut().zip(&grads[i]).zip(m.iter_mut()).zip(v.iter_mut()) {
            *p -= decay * *p;
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + config.adam_eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    /// Mean training loss over the updates since the previous record; NaN at
    /// step 0 (`null` in JSON).
    #[serde(with = "nan_as_null")]
    pub train_loss: f64,
    pub eval_loss: f64,
    pub lr: f64,
}

mod nan_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_nan() {
            s.serialize_none()
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub operator: OperatorKind,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub corpus: CorpusSpec,
    /// SHA-256 chained over every training batch, in order.
    pub data_digest: String,
    pub lr_schedule: String,
    pub wall_clock_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub records: Vec<TraceRecord>,
    pub meta: RunMeta,
}

pub const CSV_HEADER: &str = "step,train_loss,eval_loss,lr";

/// Ten significant digits in scientific notation.
fn fmt_sig(v: f64) -> String {
    format!("{v:.9e}")
}

pub fn records_to_csv(records: &[TraceRecord]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            r.step,
            fmt_sig(r.train_loss),
            fmt_sig(r.eval_loss),
            fmt_sig(r.lr)
        );
    }
    out
}

pub fn records_from_csv(text: &str) -> Result<Vec<TraceRecord>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(CSV_HEADER) {
        return Err(Error::Format(format!("trace CSV must start with `{CSV_HEADER}`")));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| {
            let bad = || Error::Format(format!("trace CSV row {}: `{line}`", i + 1));
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 4 {
                return Err(bad());
            }
            let num = |s: &str| s.trim().parse::<f64>().map_err(|_| bad());
            Ok(TraceRecord {
                step: fields[0].trim().parse().map_err(|_| bad())?,
                train_loss: num(fields[1])?,
                eval_loss: num(fields[2])?,
                lr: num(fields[3])?,
            })
        })
        .collect()
}

impl RunTrace {
    pub fn to_csv(&self) -> String {
        records_to_csv(&self.records)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn initial_eval(&self) -> f64 {
        self.records[0].eval_loss
    }

    pub fn final_eval(&self) -> f64 {
        self.records.last().unwrap().eval_loss
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Convergence {
    Reached(usize),
    NoConvergence,
}

/// First eval step whose improvement over the initial loss reaches
/// `fraction` of the total improvement.
pub fn steps_to_fraction(records: &[TraceRecord], fraction: f64) -> Result<Convergence> {
    if records.len() < 2 {
        return Err(Error::Config("need at least two eval records".into()));
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!("fraction must lie in (0, 1), got {fraction}")));
    }
    let initial = records[0].eval_loss;
    let total = initial - records.last().unwrap().eval_loss;
    if !(total > 0.0) {
        return Ok(Convergence::NoConvergence);
    }
    Ok(records
        .iter()
        .find(|r| initial - r.eval_loss >= fraction * total)
        .map_or(Convergence::NoConvergence, |r| Convergence::Reached(r.step)))
}

/// First eval step whose loss falls more than `margin` below the initial loss.
pub fn plateau_exit(records: &[TraceRecord], margin: f64) -> Convergence {
    let Some(first) = records.first() else {
        return Convergence::NoConvergence;
    };
    records
        .iter()
        .find(|r| r.eval_loss < first.eval_loss - margin)
        .map_or(Convergence::NoConvergence, |r| Convergence::Reached(r.step))
}

const STREAM_BATCH: u64 = 2;
const STREAM_DROPOUT: u64 = 3;
const STREAM_EVAL: u64 = 4;

fn step_stream(seed: u64, purpose: u64, step: usize) -> rand_chacha::ChaCha8Rng {
    stream(seed, (purpose << 40) | step as u64)
}

/// Training batch for `step`; depends only on `(seed, step)` and the data.
pub fn training_batch(train: &[Vec<usize>], vocab_size: usize, config: &TrainConfig, step: usize) -> Result<MaskedBatch> {
    let mut rng = step_stream(config.seed, STREAM_BATCH, step);
    let picked: Vec<Vec<usize>> = (0..config.batch_size)
        .map(|_| train[rng.gen_range(0..train.len())].clone())
        .collect();
    mask_batch(&picked, vocab_size, config.mask_prob, config.mask_mode, rng.gen())
}

/// Held-out batches, fixed before training starts.
pub fn eval_batches(eval: &[Vec<usize>], vocab_size: usize, config: &TrainConfig) -> Result<Vec<MaskedBatch>> {
    eval.chunks(config.batch_size)
        .enumerate()
        .map(|(j, seqs)| {
            let mut rng = step_stream(config.seed, STREAM_EVAL, j);
            mask_batch(seqs, vocab_size, config.mask_prob, config.mask_mode, rng.gen())
        })
        .collect()
}

pub fn evaluate(model: &EncoderModel, batches: &[MaskedBatch]) -> Result<f64> {
    let mut total = 0.0;
    for b in batches {
        total += mlm_loss(model, b)?;
    }
    Ok(total / batches.len() as f64)
}

/// Runs `config.steps` AdamW updates on `model`. The last
/// `eval_batches × batch_size` corpus sequences are held out for evaluation.
pub fn train(model: &mut EncoderModel, corpus: &Corpus, config: &TrainConfig) -> Result<RunTrace> {
    config.validate()?;
    let vocab = model.config.vocab_size;
    if corpus.spec.vocab_size != vocab {
        return Err(Error::Config(format!(
            "corpus vocab {} does not match model vocab {vocab}",
            corpus.spec.vocab_size
        )));
    }
    if corpus.spec.seq_len > model.config.max_positions {
        return Err(Error::Config(format!(
            "corpus seq_len {} exceeds max_positions {}",
            corpus.spec.seq_len, model.config.max_positions
        )));
    }
    let (train_seqs, eval_seqs) = corpus.split(config.eval_batches * config.batch_size)?;
    let eval_set = eval_batches(eval_seqs, vocab, config)?;

    let started = Instant::now();
    let mut state = OptimizerState::new(model.named_params().into_iter().map(|(_, t)| t));
    let mut digest = Sha256::new();
    let mut records = Vec::new();
    let mut pending = (0.0, 0usize);

    let mut record = |model: &EncoderModel, step: usize, pending: &mut (f64, usize)| -> Result<()> {
        let train_loss = if pending.1 == 0 { f64::NAN } else { pending.0 / pending.1 as f64 };
        *pending = (0.0, 0);
        records.push(TraceRecord {
            step,
            train_loss,
            eval_loss: evaluate(model, &eval_set)?,
            lr: lr_at(step, config)?,
        });
        Ok(())
    };

    for step in 0..config.steps {
        if step % config.eval_every == 0 {
            record(model, step, &mut pending)?;
        }
        let batch = training_batch(train_seqs, vocab, config, step)?;
        batch.feed(&mut digest);
        let mut dropout = step_stream(config.seed, STREAM_DROPOUT, step);
        let (loss, grads) = mlm_loss_and_grads(model, &batch, Some(&mut dropout))?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step, loss });
        }
        pending.0 += loss;
        pending.1 += 1;
        let lr = lr_at(step, config)?;
        adamw_step(&mut model.named_params_mut(), &grads, &mut state, lr, config)?;
    }
    record(model, config.steps, &mut pending)?;

    Ok(RunTrace {
        records,
        meta: RunMeta {
            operator: model.config.operator,
            model: model.config.clone(),
            train: config.clone(),
            corpus: corpus.spec.clone(),
            data_digest: hex::encode(digest.finalize()),
            lr_schedule: "linear warmup to peak_lr, then linear decay to 0 at the final step".into(),
            wall_clock_secs: started.elapsed().as_secs_f64(),
        },
    })
}
