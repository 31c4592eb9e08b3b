//! Joint optimization of the compressor and LoRA adapters under the
//! autoregressive loss, with per-group cosine learning-rate schedules,
//! global gradient clipping and decoupled weight decay. Also hosts the
//! text-only decoder pretraining pass that produces the frozen base.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::compressor::Mode;
use crate::encoder::VisualTokens;
use crate::error::{Error, Result};
use crate::pipeline::{generate_and_score, target_ids, System};
use crate::rng;
use crate::synth::SyntheticSample;
use crate::tensor::{ParamId, Params, Tape, Var};

pub const COMPRESSOR_GROUP: &str = "comp.";
pub const LORA_GROUP: &str = "lora.";

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr_comp: f64,
    pub lr_lora: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub accum_steps: usize,
    pub seed: u64,
    /// Worker threads for the per-sample forward/backward map. Gradients are
    /// reduced in sample-index order, so results do not depend on this.
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            lr_comp: 2e-4,
            lr_lora: 2e-5,
            lr_min: 1e-6,
            weight_decay: 0.01,
            grad_clip: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 1,
            accum_steps: 8,
            seed: 0,
            workers: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.accum_steps == 0 {
            return Err(Error::Config("epochs, batch and accumulation must be positive".into()));
        }
        for lr in [self.lr_comp, self.lr_lora, self.lr_min] {
            if lr <= 0.0 {
                return Err(Error::Config(format!("learning rate {lr} must be positive")));
            }
        }
        if self.lr_min > self.lr_comp || self.lr_min > self.lr_lora {
            return Err(Error::Config("lr_min must not exceed the group rates".into()));
        }
        Ok(())
    }
}

/// Cosine decay from `lr0` to `lr_min` over `total_steps`.
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64, lr_min: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::Config("cosine_lr: total_steps must be positive".into()));
    }
    let frac = step as f64 / total_steps as f64;
    Ok(lr_min + 0.5 * (lr0 - lr_min) * (1.0 + (std::f64::consts::PI * frac).cos()))
}

/// Global L2 clipping over every trainable gradient. Returns the pre-clip
/// norm; gradients are rescaled only when it exceeds `max_norm`.
pub fn clip_grad_norm(params: &mut Params, max_norm: f64) -> f64 {
    let sq: f64 = params
        .iter()
        .filter(|(_, e)| e.trainable)
        .flat_map(|(_, e)| e.grad.iter())
        .map(|g| g * g)
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for id in 0..params.len() {
            let e = params.get_mut(id);
            if e.trainable {
                for g in &mut e.grad {
                    *g *= scale;
                }
            }
        }
    }
    norm
}

/// Decoupled-weight-decay Adam with bias correction. Decay skips entries
/// flagged exempt (norm affines, positional embeddings).
pub struct AdamW {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    t: u64,
    moments: HashMap<ParamId, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(cfg: &TrainConfig) -> Self {
        AdamW {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
            t: 0,
            moments: HashMap::new(),
        }
    }

    /// One update over the given (name-prefix, learning-rate) groups. An
    /// entry belongs to the first group whose prefix matches its name.
    pub fn step(&mut self, params: &mut Params, groups: &[(&str, f64)]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for id in 0..params.len() {
            let e = params.get_mut(id);
            if !e.trainable {
                continue;
            }
            let lr = match groups.iter().find(|(p, _)| e.name.starts_with(p)) {
                Some((_, lr)) => *lr,
                None => continue,
            };
            let (m, v) = self
                .moments
                .entry(id)
                .or_insert_with(|| (vec![0.0; e.grad.len()], vec![0.0; e.grad.len()]));
            for i in 0..e.grad.len() {
                let g = e.grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                e.value.data[i] -= lr * mhat / (vhat.sqrt() + self.eps);
                if !e.decay_exempt {
                    e.value.data[i] -= lr * self.weight_decay * e.value.data[i];
                }
            }
        }
    }
}

/// Mean NLL over target positions only, with the standard one-step shift:
/// the logit at position p predicts the token at position p + 1, and visual
/// and prompt positions are ignored.
pub fn autoregressive_loss(
    tape: &mut Tape,
    logits: Var,
    targets: &[usize],
    prompt_len: usize,
    visual_len: usize,
) -> Result<Var> {
    let (rows, _) = tape.value(logits).dims2()?;
    let expect = visual_len + prompt_len + targets.len();
    if rows != expect {
        return Err(Error::Shape(format!(
            "loss: {rows} logit rows but visual {visual_len} + prompt {prompt_len} + targets {}",
            targets.len()
        )));
    }
    if visual_len + prompt_len == 0 {
        return Err(Error::Config("loss needs at least one context position".into()));
    }
    let mut shifted = vec![-1i64; rows];
    for (t, &id) in targets.iter().enumerate() {
        shifted[visual_len + prompt_len + t - 1] = id as i64;
    }
    tape.cross_entropy_from_logits(logits, &shifted, -1)
}

// ── Reports ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub lr_comp: f64,
    pub lr_lora: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub holdout_similarity: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_similarity: f64,
}

impl TrainReport {
    /// CSV schema: epoch,step,loss,lr_comp,lr_lora,holdout_similarity.
    /// Per-step rows leave the similarity column empty; epoch-end rows
    /// carry it and leave the step columns empty.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "epoch,step,loss,lr_comp,lr_lora,holdout_similarity")?;
        let mut epoch_iter = self.epochs.iter().peekable();
        for s in &self.steps {
            writeln!(w, "{},{},{},{},{},", s.epoch, s.step, s.loss, s.lr_comp, s.lr_lora)?;
            if epoch_iter.peek().is_some_and(|e| e.epoch == s.epoch)
                && self.steps.iter().filter(|r| r.epoch == s.epoch).last() == Some(s)
            {
                let e = epoch_iter.next().unwrap();
                writeln!(w, "{},,{},,,{}", e.epoch, e.mean_loss, e.holdout_similarity)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

// ── Joint training ───────────────────────────────────────────────────

/// Loss graph for one sample: visual path (compressed or raw) into the
/// decoder, cross-entropy over the markup targets.
pub fn sample_loss(
    tape: &mut Tape,
    system: &System,
    params: &Params,
    vt: &VisualTokens,
    sample: &SyntheticSample,
    mode: Mode,
) -> Result<Var> {
    let visual = system.visual_input(tape, params, vt, sample, mode)?;
    let k = tape.value(visual).shape[0];
    let prompt = system.prompt_ids();
    let targets = target_ids(sample);
    let logits = system.decoder.forward(tape, params, Some(visual), &prompt, &targets, None)?;
    autoregressive_loss(tape, logits, &targets, prompt.len(), k)
}

struct SampleResult {
    loss: f64,
    grads: Vec<(ParamId, Vec<f64>)>,
}

fn run_sample(
    system: &System,
    params: &Params,
    vt: &VisualTokens,
    sample: &SyntheticSample,
    dropout_seed: u64,
) -> Result<SampleResult> {
    let mut tape = Tape::new();
    let loss = sample_loss(&mut tape, system, params, vt, sample, Mode::Train { dropout_seed })?;
    let loss_val = tape.value(loss).data[0];
    tape.backward(loss)?;
    Ok(SampleResult { loss: loss_val, grads: tape.param_grads() })
}

/// Epoch loop with gradient accumulation, clipping, dual-group AdamW and a
/// per-epoch held-out render-similarity evaluation. The best trainable
/// snapshot by held-out score is restored into `params` before returning.
pub fn fit(
    system: &System,
    params: &mut Params,
    train: &[SyntheticSample],
    holdout: &[SyntheticSample],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Config("fit: empty training set".into()));
    }
    // The encoder is frozen, so visual tokens are computed once per sample.
    let encode_all = |set: &[SyntheticSample]| -> Result<Vec<VisualTokens>> {
        set.iter().map(|s| system.encode(params, &s.image)).collect()
    };
    let train_tokens = encode_all(train)?;
    let holdout_tokens = encode_all(holdout)?;

    let window = cfg.batch_size * cfg.accum_steps;
    let steps_per_epoch = train.len().div_ceil(window);
    let total_steps = cfg.epochs * steps_per_epoch;
    let mut optimizer = AdamW::new(cfg);
    let mut report = TrainReport::default();
    let mut best: Option<(f64, usize, Vec<(ParamId, Vec<f64>)>)> = None;
    let mut step_idx = 0usize;

    let pool = (cfg.workers > 1)
        .then(|| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(cfg.workers)
                .build()
                .map_err(|e| Error::Config(format!("worker pool: {e}")))
        })
        .transpose()?;

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        shuffle(&mut order, &mut rng::derive(cfg.seed, epoch as u64));
        let mut epoch_loss = 0.0;
        let mut epoch_count = 0usize;

        for chunk in order.chunks(window) {
            params.zero_grads();
            let jobs: Vec<(usize, u64)> = chunk
                .iter()
                .enumerate()
                .map(|(slot, &idx)| {
                    (idx, cfg.seed ^ ((step_idx as u64) << 16) ^ slot as u64)
                })
                .collect();
            let run = |&(idx, dseed): &(usize, u64)| {
                run_sample(system, params, &train_tokens[idx], &train[idx], dseed)
            };
            let results: Vec<Result<SampleResult>> = match &pool {
                Some(p) => p.install(|| {
                    use rayon::prelude::*;
                    jobs.par_iter().map(run).collect()
                }),
                None => jobs.iter().map(run).collect(),
            };
            // Reduce in sample-index order: scheduling cannot change sums.
            let scale = 1.0 / chunk.len() as f64;
            let mut window_loss = 0.0;
            for res in results {
                let res = res?;
                window_loss += res.loss;
                for (id, g) in res.grads {
                    let entry = params.get_mut(id);
                    for (dst, src) in entry.grad.iter_mut().zip(&g) {
                        *dst += scale * src;
                    }
                }
            }
            window_loss *= scale;
            if !window_loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "loss became {window_loss} at epoch {epoch}, step {step_idx}"
                )));
            }
            clip_grad_norm(params, cfg.grad_clip);
            let lr_comp = cosine_lr(step_idx, total_steps, cfg.lr_comp, cfg.lr_min)?;
            let lr_lora = cosine_lr(step_idx, total_steps, cfg.lr_lora, cfg.lr_min)?;
            optimizer.step(params, &[(COMPRESSOR_GROUP, lr_comp), (LORA_GROUP, lr_lora)]);
            report.steps.push(StepRecord { epoch, step: step_idx, loss: window_loss, lr_comp, lr_lora });
            step_idx += 1;
            epoch_loss += window_loss * chunk.len() as f64;
            epoch_count += chunk.len();
        }

        let holdout_similarity = evaluate_holdout(system, params, holdout, &holdout_tokens)?;
        report.epochs.push(EpochRecord {
            epoch,
            mean_loss: epoch_loss / epoch_count as f64,
            holdout_similarity,
        });
        // Best-checkpoint selection only makes sense with a held-out set.
        if !holdout.is_empty()
            && best.as_ref().map_or(true, |(s, _, _)| holdout_similarity > *s)
        {
            best = Some((holdout_similarity, epoch, params.snapshot_trainable()));
        }
    }

    if let Some((score, epoch, snapshot)) = best {
        params.restore_trainable(&snapshot);
        report.best_epoch = epoch;
        report.best_similarity = score;
    }
    Ok(report)
}

/// Mean greedy render-back similarity over a held-out set.
pub fn evaluate_holdout(
    system: &System,
    params: &Params,
    holdout: &[SyntheticSample],
    tokens: &[VisualTokens],
) -> Result<f64> {
    if holdout.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (sample, vt) in holdout.iter().zip(tokens) {
        let visual = system.compress_eval(params, vt, sample)?;
        let (_, _, score) = generate_and_score(system, params, Some(&visual), sample)?;
        total += score;
    }
    Ok(total / holdout.len() as f64)
}

// ── Decoder pretraining ──────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub batch: usize,
    pub seed: u64,
    /// Each pretraining sequence is offset by a random run of PAD tokens up
    /// to this length, so the frozen decoder tolerates the position shift a
    /// visual prefix introduces later.
    pub max_pad_prefix: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig { epochs: 3, lr: 1e-3, lr_min: 1e-5, batch: 8, seed: 0, max_pad_prefix: 24 }
    }
}

/// Text-only language-model pass over the markup corpus, training the whole
/// decoder; afterwards the caller freezes it and attaches adapters. Returns
/// the per-step losses.
pub fn pretrain_decoder(
    system: &System,
    params: &mut Params,
    data: &[SyntheticSample],
    cfg: &PretrainConfig,
) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::Config("pretrain: empty corpus".into()));
    }
    let train_cfg = TrainConfig {
        beta1: 0.9,
        beta2: 0.999,
        adam_eps: 1e-8,
        weight_decay: 0.01,
        ..TrainConfig::default()
    };
    let mut optimizer = AdamW::new(&train_cfg);
    let total_steps = cfg.epochs * data.len().div_ceil(cfg.batch);
    let mut losses = Vec::new();
    let mut step = 0usize;
    let prompt = system.prompt_ids();
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        shuffle(&mut order, &mut rng::derive(cfg.seed, 0xBA5E + epoch as u64));
        for chunk in order.chunks(cfg.batch) {
            params.zero_grads();
            let scale = 1.0 / chunk.len() as f64;
            let mut window_loss = 0.0;
            for &idx in chunk {
                let targets = target_ids(&data[idx]);
                let mut tape = Tape::new();
                let logits =
                    system.decoder.forward(&mut tape, params, None, &prompt, &targets, None)?;
                let loss = autoregressive_loss(&mut tape, logits, &targets, prompt.len(), 0)?;
                window_loss += tape.value(loss).data[0];
                tape.backward(loss)?;
                tape.accumulate_param_grads(params, scale);
            }
            window_loss *= scale;
            if !window_loss.is_finite() {
                return Err(Error::Numeric(format!("pretrain loss became {window_loss}")));
            }
            clip_grad_norm(params, train_cfg.grad_clip);
            let lr = cosine_lr(step, total_steps, cfg.lr, cfg.lr_min)?;
            optimizer.step(params, &[("dec.", lr)]);
            losses.push(window_loss);
            step += 1;
        }
    }
    Ok(losses)
}

/// Fisher-Yates with our seeded generator.
fn shuffle(indices: &mut [usize], r: &mut rand_chacha::ChaCha8Rng) {
    use rand::Rng;
    for i in (1..indices.len()).rev() {
        let j = r.gen_range(0..=i);
        indices.swap(i, j);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Array;

    #[test]
    fn cosine_schedule_endpoints_and_midpoint() {
        assert_eq!(cosine_lr(0, 100, 2e-4, 1e-6).unwrap(), 2e-4);
        let end = cosine_lr(100, 100, 2e-4, 1e-6).unwrap();
        assert!((end - 1e-6).abs() < 1e-18);
        let mid = cosine_lr(50, 100, 2e-4, 1e-6).unwrap();
        assert!((mid - (2e-4 + 1e-6) / 2.0).abs() < 1e-12);
        assert!(cosine_lr(0, 0, 1.0, 0.1).is_err());
    }

    #[test]
    fn clip_examples() {
        let mut p = Params::new();
        let id = p.insert("comp.w", Array::zeros(&[2]), true, false).unwrap();
        p.get_mut(id).grad.copy_from_slice(&[0.3, 0.4]);
        let norm = clip_grad_norm(&mut p, 1.0);
        assert!((norm - 0.5).abs() < 1e-12);
        assert_eq!(p.get(id).grad, vec![0.3, 0.4]);

        p.get_mut(id).grad.copy_from_slice(&[3.0, 4.0]);
        let norm = clip_grad_norm(&mut p, 1.0);
        assert!((norm - 5.0).abs() < 1e-12);
        assert!((p.get(id).grad[0] - 0.6).abs() < 1e-12);
        assert!((p.get(id).grad[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn clip_never_leaves_norm_above_bound() {
        let mut r = crate::rng::seeded(31);
        for _ in 0..50 {
            let mut p = Params::new();
            let a = p.insert("comp.a", Array::zeros(&[5]), true, false).unwrap();
            let b = p.insert("lora.b", Array::zeros(&[3]), true, false).unwrap();
            for id in [a, b] {
                let g = Array::randn(&[p.get(id).grad.len()], 0.0, 2.0, &mut r);
                p.get_mut(id).grad.copy_from_slice(&g.data);
            }
            clip_grad_norm(&mut p, 1.0);
            let sq: f64 = p.iter().flat_map(|(_, e)| e.grad.iter()).map(|g| g * g).sum();
            assert!(sq.sqrt() <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let mut cfg = TrainConfig::default();
        cfg.weight_decay = 0.0;
        let mut p = Params::new();
        let id = p.insert("comp.w", Array::filled(&[1], 1.0), true, false).unwrap();
        p.get_mut(id).grad[0] = 1.0;
        let mut opt = AdamW::new(&cfg);
        opt.step(&mut p, &[("comp.", 0.1)]);
        // After bias correction the first Adam step is lr * g/|g| = lr.
        assert!((p.get(id).value.data[0] - 0.9).abs() <= 1e-6);
    }

    #[test]
    fn adamw_decoupled_decay() {
        let cfg = TrainConfig::default();
        let mut no_decay = Params::new();
        let id1 = no_decay.insert("comp.w", Array::filled(&[1], 1.0), true, true).unwrap();
        no_decay.get_mut(id1).grad[0] = 1.0;
        let mut with_decay = Params::new();
        let id2 = with_decay.insert("comp.w", Array::filled(&[1], 1.0), true, false).unwrap();
        with_decay.get_mut(id2).grad[0] = 1.0;

        AdamW::new(&cfg).step(&mut no_decay, &[("comp.", 0.1)]);
        AdamW::new(&cfg).step(&mut with_decay, &[("comp.", 0.1)]);
        let base = no_decay.get(id1).value.data[0];
        let decayed = with_decay.get(id2).value.data[0];
        // Decay subtracts lr * wd * p after the Adam update.
        assert!((base - base * 0.1 * 0.01 - decayed).abs() < 1e-12);
    }

    #[test]
    fn groups_receive_their_own_rates() {
        let mut cfg = TrainConfig::default();
        cfg.weight_decay = 0.0;
        let mut p = Params::new();
        let c = p.insert("comp.w", Array::filled(&[1], 1.0), true, false).unwrap();
        let l = p.insert("lora.w", Array::filled(&[1], 1.0), true, false).unwrap();
        p.get_mut(c).grad[0] = 1.0;
        p.get_mut(l).grad[0] = 1.0;
        let mut opt = AdamW::new(&cfg);
        opt.step(&mut p, &[("comp.", 2e-4), ("lora.", 2e-5)]);
        let dc = 1.0 - p.get(c).value.data[0];
        let dl = 1.0 - p.get(l).value.data[0];
        assert!((dc / dl - 10.0).abs() < 1e-6, "step ratio {}", dc / dl);
    }

    #[test]
    fn default_config_has_ten_to_one_ratio() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr_comp / cfg.lr_lora, 10.0);
        cfg.validate().unwrap();
    }
}
