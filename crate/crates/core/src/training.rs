//! Adam, the two-stage learning-rate schedule and the epoch loop.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use crate::checkpoint::{read_tensors, seal, unseal, write_tensors, Reader};
use crate::data::{Batch, Batcher};
use crate::error::{Error, Result};
use crate::model::{Model, Pass};
use crate::tensor::{Scalar, Tensor};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
/// Consecutive non-finite steps after which training gives up.
pub const DIVERGENCE_LIMIT: usize = 3;

const ADAM_MAGIC: &[u8] = b"SRADAM1\n";

/// First and second moments for every parameter, plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<F> {
    m: Vec<Tensor<F>>,
    v: Vec<Tensor<F>>,
    t: u64,
    lr: f64,
}

impl<F: Scalar> AdamState<F> {
    pub fn new(params: &[Tensor<F>], lr: f64) -> Self {
        let zeros: Vec<Tensor<F>> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        AdamState { m: zeros.clone(), v: zeros, t: 0, lr }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = ADAM_MAGIC.to_vec();
        out.extend_from_slice(format!("precision={} params={}\n", F::NAME, self.m.len()).as_bytes());
        out.extend_from_slice(&self.t.to_le_bytes());
        out.extend_from_slice(&self.lr.to_le_bytes());
        write_tensors(&mut out, self.m.iter().map(|t| ("m", t)));
        write_tensors(&mut out, self.v.iter().map(|t| ("v", t)));
        seal(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(unseal(bytes, ADAM_MAGIC)?);
        let header = crate::checkpoint::parse_header(r.line()?)?;
        let precision = crate::checkpoint::field(&header, "precision")?;
        if precision != F::NAME {
            return Err(Error::Checkpoint(format!("optimizer state holds {precision} values, expected {}", F::NAME)));
        }
        let n: usize = crate::checkpoint::parse(&header, "params")?;
        let t = r.u64()?;
        let lr = f64::from_bits(r.u64()?);
        let m = read_tensors(&mut r, n)?.into_iter().map(|(_, t)| t).collect();
        let v = read_tensors(&mut r, n)?.into_iter().map(|(_, t)| t).collect();
        if !r.is_done() {
            return Err(Error::Checkpoint("trailing bytes after optimizer state".into()));
        }
        Ok(AdamState { m, v, t, lr })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// One bias-corrected Adam update. A non-finite gradient aborts the step
/// with [`Error::NonFinite`] before anything is modified.
pub fn adam_step<F: Scalar>(params: &mut [Tensor<F>], grads: &[Tensor<F>], state: &mut AdamState<F>) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Contract(format!(
            "{} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(crate::error::dim_err("adam_step", p.shape(), g.shape()));
        }
    }
    if let Some(i) = grads.iter().position(|g| !g.all_finite()) {
        return Err(Error::NonFinite(format!("gradient of parameter {i}")));
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (F::from_f64(BETA1), F::from_f64(BETA2));
    let (one, eps, lr) = (F::one(), F::from_f64(ADAM_EPS), F::from_f64(state.lr));
    let c1 = F::from_f64(1.0 - BETA1.powi(t));
    let c2 = F::from_f64(1.0 - BETA2.powi(t));
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.m[i].values_mut();
        let v = state.v[i].values_mut();
        for (((w, &g), m), v) in p.values_mut().iter_mut().zip(g.values()).zip(m).zip(v) {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Flags non-finite gradients and, when `threshold` is set, rescales them
/// to a global L2 norm of at most `threshold`. Returns the norm before
/// rescaling.
pub fn clip_or_flag<F: Scalar>(grads: &mut [Tensor<F>], threshold: Option<f64>) -> Result<f64> {
    if let Some(i) = grads.iter().position(|g| !g.all_finite()) {
        return Err(Error::NonFinite(format!("gradient of parameter {i}")));
    }
    let norm = grads
        .iter()
        .flat_map(|g| g.values())
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt();
    if !norm.is_finite() {
        return Err(Error::NonFinite("gradient norm".into()));
    }
    if let Some(th) = threshold {
        if norm > th {
            let s = F::from_f64(th / norm);
            for g in grads.iter_mut() {
                g.values_mut().iter_mut().for_each(|v| *v = *v * s);
            }
        }
    }
    Ok(norm)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr_stage1: f64,
    pub lr_stage2: f64,
    /// Sentence pairs per batch.
    pub batch_size: usize,
    /// Validations without improvement that end a stage.
    pub patience: usize,
    /// Steps between validations; `None` validates once per epoch.
    pub val_interval: Option<usize>,
    /// Upper bound on optimizer steps over both stages.
    pub max_steps: usize,
    pub max_len: usize,
    pub seed: u64,
    /// Global gradient-norm clip; off by default.
    pub clip: Option<f64>,
    /// Keep Adam moments across the stage restart instead of resetting them.
    pub carry_adam: bool,
    /// Stop after the first stage.
    pub single_stage: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_stage1: 3e-4,
            lr_stage2: 1.5e-4,
            batch_size: 64,
            patience: 3,
            val_interval: None,
            max_steps: 100_000,
            max_len: 50,
            seed: 0,
            clip: None,
            carry_adam: false,
            single_stage: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_stage1 > 0.0 && self.lr_stage2 > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.lr_stage2 >= self.lr_stage1 {
            return Err(Error::Config(format!(
                "stage-2 learning rate {} must be below stage-1 rate {}",
                self.lr_stage2, self.lr_stage1
            )));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.val_interval == Some(0) {
            return Err(Error::Config("val_interval must be >= 1".into()));
        }
        if self.clip.is_some_and(|c| c <= 0.0) {
            return Err(Error::Config("clip threshold must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    Improved,
    Stale,
    /// `patience` consecutive validations without improvement.
    Exhausted,
}

/// Tracks the best validation perplexity and counts non-improving
/// validations since it.
#[derive(Clone, Debug)]
pub struct Plateau {
    patience: usize,
    best: f64,
    stale: usize,
}

impl Plateau {
    pub fn new(patience: usize) -> Self {
        Self::starting_from(patience, f64::INFINITY)
    }

    pub fn starting_from(patience: usize, best: f64) -> Self {
        Plateau { patience, best, stale: 0 }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn observe(&mut self, ppl: f64) -> Verdict {
        if ppl < self.best {
            self.best = ppl;
            self.stale = 0;
            Verdict::Improved
        } else {
            self.stale += 1;
            if self.stale >= self.patience {
                Verdict::Exhausted
            } else {
                Verdict::Stale
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    /// Non-pad source plus gold target tokens.
    pub tokens: usize,
}

/// Forward, backward and one Adam update on `batch`. Dropout masks are
/// drawn from `seed`. Non-finite loss or gradients leave the model
/// untouched and return [`Error::NonFinite`].
pub fn train_step<F: Scalar>(
    model: &mut Model<F>,
    batch: &Batch,
    state: &mut AdamState<F>,
    seed: u64,
    clip: Option<f64>,
) -> Result<StepStats> {
    let (loss, mut grads) = {
        let mut pass = Pass::train(model, seed);
        let mem = pass.encode(&batch.src)?;
        let logits = pass.decode_train(&batch.tgt_in, &mem)?;
        let loss = pass.nll(logits, &batch.tgt_gold)?;
        let value = pass.tape.values(loss)[0].as_f64();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("training loss {value}")));
        }
        pass.backward(loss)?;
        (value, pass.param_grads())
    };
    clip_or_flag(&mut grads, clip)?;
    adam_step(model.params_mut().tensors_mut(), &grads, state)?;
    Ok(StepStats { loss, tokens: batch.src.real_tokens() + batch.tgt_gold.real_tokens() })
}

/// Token-level perplexity of `model` over `batches`, without dropout.
pub fn perplexity<F: Scalar>(model: &Model<F>, batches: &[Batch]) -> Result<f64> {
    let mut nll = 0.0;
    let mut tokens = 0usize;
    for b in batches {
        let mut pass = Pass::eval(model);
        let mem = pass.encode(&b.src)?;
        let logits = pass.decode_train(&b.tgt_in, &mem)?;
        let loss = pass.nll(logits, &b.tgt_gold)?;
        let n = b.tgt_gold.real_tokens();
        nll += pass.tape.values(loss)[0].as_f64() * n as f64;
        tokens += n;
    }
    if tokens == 0 {
        return Err(Error::EmptyBatch);
    }
    Ok((nll / tokens as f64).exp())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Status {
    /// Every scheduled stage ran until its patience was exhausted.
    Converged,
    /// The step budget ran out first.
    StepLimit,
    /// [`DIVERGENCE_LIMIT`] consecutive non-finite steps.
    FailedToConverge,
}

impl Status {
    pub fn as_str(self) -> &'static str {
        match self {
            Status::Converged => "converged",
            Status::StepLimit => "step limit",
            Status::FailedToConverge => "failed to converge",
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<F> {
    /// Parameters with the best validation perplexity seen.
    pub best: Model<F>,
    pub best_ppl: f64,
    /// Perplexity at the last validation.
    pub last_ppl: f64,
    pub steps: usize,
    pub status: Status,
}

struct Window {
    loss: f64,
    steps: usize,
    tokens: usize,
    started: Instant,
}

impl Window {
    fn new() -> Self {
        Window { loss: 0.0, steps: 0, tokens: 0, started: Instant::now() }
    }
}

fn step_seed(seed: u64, step: usize) -> u64 {
    seed ^ (step as u64 + 1).wrapping_mul(0xA24B_AED4_963E_E407)
}

/// Runs the two-stage schedule: train at `lr_stage1` until validation
/// perplexity stops improving for `patience` validations, reload the best
/// parameters, then repeat at `lr_stage2`. Log lines go to `log`.
pub fn train_loop<F: Scalar>(
    model: Model<F>,
    train: &Batcher,
    valid: &[Batch],
    config: &TrainConfig,
    log: &mut dyn Write,
) -> Result<TrainOutcome<F>> {
    config.validate()?;
    if valid.is_empty() {
        return Err(Error::Data("validation set is empty".into()));
    }
    let mut model = model;
    let mut best = model.clone();
    let mut adam = AdamState::new(model.params().tensors(), config.lr_stage1);
    let mut plateau = Plateau::new(config.patience);
    let mut last_ppl = f64::NAN;
    let mut stage = 1;
    let mut step = 0usize;
    let mut divergent = 0usize;
    let mut window = Window::new();
    let mut epoch = 0u64;

    let status = 'outer: loop {
        let batches = train.epoch(epoch);
        epoch += 1;
        let n_batches = batches.len();
        for (i, batch) in batches.iter().enumerate() {
            if step >= config.max_steps {
                break 'outer Status::StepLimit;
            }
            step += 1;
            match train_step(&mut model, batch, &mut adam, step_seed(config.seed, step), config.clip) {
                Ok(s) => {
                    divergent = 0;
                    window.loss += s.loss;
                    window.steps += 1;
                    window.tokens += s.tokens;
                }
                Err(Error::NonFinite(_)) => {
                    divergent += 1;
                    writeln!(log, "event=diverged step={step}")?;
                    if divergent >= DIVERGENCE_LIMIT {
                        break 'outer Status::FailedToConverge;
                    }
                }
                Err(e) => return Err(e),
            }
            let due = match config.val_interval {
                Some(n) => step % n == 0,
                None => i + 1 == n_batches,
            };
            if !due {
                continue;
            }
            let ppl = perplexity(&model, valid)?;
            last_ppl = ppl;
            let elapsed = window.started.elapsed().as_secs_f64().max(1e-9);
            let loss = if window.steps > 0 { window.loss / window.steps as f64 } else { f64::NAN };
            writeln!(
                log,
                "step={step} loss={loss:.6} ppl={ppl:.6} lr={} tok_per_s={:.1} stage={stage}",
                adam.lr(),
                window.tokens as f64 / elapsed
            )?;
            window = Window::new();
            let verdict = if ppl.is_finite() { plateau.observe(ppl) } else { plateau.observe(f64::INFINITY) };
            match verdict {
                Verdict::Improved => best = model.clone(),
                Verdict::Stale => {}
                Verdict::Exhausted if stage == 1 && !config.single_stage => {
                    stage = 2;
                    model = best.clone();
                    if config.carry_adam {
                        adam.set_lr(config.lr_stage2);
                    } else {
                        adam = AdamState::new(model.params().tensors(), config.lr_stage2);
                    }
                    plateau = Plateau::starting_from(config.patience, plateau.best());
                    writeln!(log, "event=restart step={step} best_ppl={:.6} lr={}", plateau.best(), adam.lr())?;
                }
                Verdict::Exhausted => break 'outer Status::Converged,
            }
        }
    };
    Ok(TrainOutcome {
        best,
        best_ppl: plateau.best(),
        last_ppl,
        steps: step,
        status,
    })
}

/// Drops the wall-clock `tok_per_s` field so that logs of identical runs
/// compare equal.
pub fn strip_timing(log: &str) -> String {
    log.lines()
        .map(|l| l.split_whitespace().filter(|kv| !kv.starts_with("tok_per_s=")).collect::<Vec<_>>().join(" "))
        .collect::<Vec<_>>()
        .join("\n")
}

#[cfg(test)]
mod tests;
