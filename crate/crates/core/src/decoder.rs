//! Small frozen autoregressive Transformer decoder with trainable low-rank
//! adapters on the query/value projections. The decoder consumes an optional
//! continuous visual prefix followed by embedded prompt and target tokens,
//! under plain causal attention over the whole concatenation.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::flops::MacCounter;
use crate::nn;
use crate::rng;
use crate::tensor::{matmul_nn, Array, ParamId, Params, Tape, Var};

pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct DecoderConfig {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    /// FFN width as a multiple of dim.
    pub ffn_ratio: usize,
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.dim == 0 || self.vocab_size == 0 || self.max_seq_len == 0 {
            return Err(Error::Config("decoder dims must be positive".into()));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "decoder dim {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig { rank: 16, alpha: 32.0 }
    }
}

/// Frozen base weight plus trainable low-rank factors. The effective map is
/// W + (alpha/rank) * B * A, never materialized during training so the base
/// stays frozen.
#[derive(Debug, Clone)]
pub struct LoraLinear {
    pub base: ParamId,
    pub a: ParamId,
    pub b: ParamId,
    pub rank: usize,
    pub alpha: f64,
}

impl LoraLinear {
    /// x @ W^T + (alpha/rank) * (x @ A^T) @ B^T.
    pub fn forward(&self, tape: &mut Tape, params: &Params, x: Var) -> Result<Var> {
        let w = tape.param(params, self.base);
        let wt = tape.transpose(w)?;
        let base = tape.matmul(x, wt)?;
        let a = tape.param(params, self.a);
        let at = tape.transpose(a)?;
        let xa = tape.matmul(x, at)?;
        let b = tape.param(params, self.b);
        let bt = tape.transpose(b)?;
        let xab = tape.matmul(xa, bt)?;
        let update = tape.scale(xab, self.alpha / self.rank as f64);
        tape.add(base, update)
    }

    /// W + (alpha/rank) * B @ A as a plain array, for inference export.
    pub fn merge(&self, params: &Params) -> Result<Array> {
        let w = &params.get(self.base).value;
        let a = &params.get(self.a).value;
        let b = &params.get(self.b).value;
        let (d_out, d_in) = w.dims2()?;
        let (r, a_in) = a.dims2()?;
        let (b_out, b_r) = b.dims2()?;
        if a_in != d_in || b_out != d_out || b_r != r {
            return Err(Error::Shape(format!(
                "merge_lora: W {:?}, A {:?}, B {:?} disagree",
                w.shape, a.shape, b.shape
            )));
        }
        let mut ba = vec![0.0; d_out * d_in];
        matmul_nn(&b.data, &a.data, d_out, r, d_in, &mut ba);
        let scale = self.alpha / self.rank as f64;
        let data = w.data.iter().zip(&ba).map(|(wv, uv)| wv + scale * uv).collect();
        Ok(Array { shape: vec![d_out, d_in], data })
    }
}

/// Trainable scalar count for LoRA over `layers` decoder layers:
/// layers * projections_per_layer * (rank*dim + dim*rank).
pub fn count_lora_params(layers: usize, rank: usize, dim: usize, projections_per_layer: usize) -> usize {
    layers * projections_per_layer * 2 * rank * dim
}

#[derive(Debug, Clone)]
enum Proj {
    Frozen(ParamId),
    Lora(LoraLinear),
}

impl Proj {
    fn forward(&self, tape: &mut Tape, params: &Params, x: Var) -> Result<Var> {
        match self {
            Proj::Frozen(w) => {
                let w = tape.param(params, *w);
                let wt = tape.transpose(w)?;
                tape.matmul(x, wt)
            }
            Proj::Lora(l) => l.forward(tape, params, x),
        }
    }

    fn lora_rank(&self) -> usize {
        match self {
            Proj::Frozen(_) => 0,
            Proj::Lora(l) => l.rank,
        }
    }
}

#[derive(Debug, Clone)]
struct DecoderLayer {
    ln1_gamma: ParamId,
    ln1_beta: ParamId,
    q: Proj,
    k: ParamId,
    v: Proj,
    o: ParamId,
    ln2_gamma: ParamId,
    ln2_beta: ParamId,
    ffn_w1: ParamId,
    ffn_w2: ParamId,
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub cfg: DecoderConfig,
    embed: ParamId,
    pos: ParamId,
    layers: Vec<DecoderLayer>,
    final_gamma: ParamId,
    final_beta: ParamId,
    head: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub enum GenMode {
    Greedy,
    Sample { temperature: f64, seed: u64 },
}

fn fan_in_limit(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

/// Standard sin/cos positional table, scaled down to the embedding init std.
fn sinusoidal_table(max_len: usize, d: usize) -> Array {
    let mut data = vec![0.0; max_len * d];
    for p in 0..max_len {
        for i in 0..d / 2 {
            let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / d as f64);
            let angle = p as f64 * freq;
            data[p * d + 2 * i] = 0.1 * angle.sin();
            data[p * d + 2 * i + 1] = 0.1 * angle.cos();
        }
    }
    Array { shape: vec![max_len, d], data }
}

impl Decoder {
    /// Register all decoder weights under the `dec.` prefix. `trainable`
    /// is true during the text-only pretraining pass and flipped off before
    /// adapters are attached.
    pub fn init(
        params: &mut Params,
        r: &mut ChaCha8Rng,
        cfg: DecoderConfig,
        trainable: bool,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let lim = fan_in_limit(d);
        let embed = params.insert(
            "dec.embed",
            Array::randn(&[cfg.vocab_size, d], 0.0, 0.02, r),
            trainable,
            false,
        )?;
        // Fixed sinusoidal positions: never trained, so the decoder stays
        // usable when a visual prefix shifts token positions around.
        let pos = params.insert("dec.pos", sinusoidal_table(cfg.max_seq_len, d), false, true)?;
        let mut layers = Vec::with_capacity(cfg.layers);
        for i in 0..cfg.layers {
            let p = |s: &str| format!("dec.l{i}.{s}");
            layers.push(DecoderLayer {
                ln1_gamma: params.insert(&p("ln1.gamma"), Array::filled(&[d], 1.0), trainable, true)?,
                ln1_beta: params.insert(&p("ln1.beta"), Array::zeros(&[d]), trainable, true)?,
                q: Proj::Frozen(params.insert(
                    &p("attn.wq"),
                    Array::rand_uniform(&[d, d], lim, r),
                    trainable,
                    false,
                )?),
                k: params.insert(&p("attn.wk"), Array::rand_uniform(&[d, d], lim, r), trainable, false)?,
                v: Proj::Frozen(params.insert(
                    &p("attn.wv"),
                    Array::rand_uniform(&[d, d], lim, r),
                    trainable,
                    false,
                )?),
                o: params.insert(&p("attn.wo"), Array::rand_uniform(&[d, d], lim, r), trainable, false)?,
                ln2_gamma: params.insert(&p("ln2.gamma"), Array::filled(&[d], 1.0), trainable, true)?,
                ln2_beta: params.insert(&p("ln2.beta"), Array::zeros(&[d]), trainable, true)?,
                ffn_w1: params.insert(
                    &p("ffn.w1"),
                    Array::rand_uniform(&[cfg.ffn_ratio * d, d], lim, r),
                    trainable,
                    false,
                )?,
                ffn_w2: params.insert(
                    &p("ffn.w2"),
                    Array::rand_uniform(&[d, cfg.ffn_ratio * d], fan_in_limit(cfg.ffn_ratio * d), r),
                    trainable,
                    false,
                )?,
            });
        }
        let final_gamma = params.insert("dec.final.gamma", Array::filled(&[d], 1.0), trainable, true)?;
        let final_beta = params.insert("dec.final.beta", Array::zeros(&[d]), trainable, true)?;
        let head =
            params.insert("dec.head", Array::rand_uniform(&[cfg.vocab_size, d], lim, r), trainable, false)?;
        Ok(Decoder { cfg, embed, pos, layers, final_gamma, final_beta, head })
    }

    /// Attach trainable low-rank adapters to the q and v projections of every
    /// layer. A is Gaussian with std 1/rank, B starts at zero, so the model is
    /// exactly the frozen baseline until training moves B.
    pub fn attach_lora(
        &mut self,
        params: &mut Params,
        r: &mut ChaCha8Rng,
        lora: LoraConfig,
    ) -> Result<()> {
        if lora.rank == 0 || lora.rank > self.cfg.dim {
            return Err(Error::Config(format!(
                "lora rank {} invalid for dim {}",
                lora.rank, self.cfg.dim
            )));
        }
        let d = self.cfg.dim;
        let std = 1.0 / lora.rank as f64;
        for (i, layer) in self.layers.iter_mut().enumerate() {
            for (tag, slot) in [("q", &mut layer.q), ("v", &mut layer.v)] {
                let base = match slot {
                    Proj::Frozen(w) => *w,
                    Proj::Lora(_) => {
                        return Err(Error::Config(format!("layer {i} already has {tag} adapters")))
                    }
                };
                let a = params.insert(
                    &format!("lora.l{i}.{tag}.a"),
                    Array::randn(&[lora.rank, d], 0.0, std, r),
                    true,
                    false,
                )?;
                let b = params.insert(
                    &format!("lora.l{i}.{tag}.b"),
                    Array::zeros(&[d, lora.rank]),
                    true,
                    false,
                )?;
                *slot = Proj::Lora(LoraLinear { base, a, b, rank: lora.rank, alpha: lora.alpha });
            }
        }
        Ok(())
    }

    /// Re-attach to weights already present in `params`.
    pub fn from_params(params: &Params, cfg: DecoderConfig, lora: Option<LoraConfig>) -> Result<Self> {
        cfg.validate()?;
        let proj = |i: usize, tag: &str, base: ParamId| -> Result<Proj> {
            match lora {
                None => Ok(Proj::Frozen(base)),
                Some(l) => Ok(Proj::Lora(LoraLinear {
                    base,
                    a: params.id(&format!("lora.l{i}.{tag}.a"))?,
                    b: params.id(&format!("lora.l{i}.{tag}.b"))?,
                    rank: l.rank,
                    alpha: l.alpha,
                })),
            }
        };
        let mut layers = Vec::with_capacity(cfg.layers);
        for i in 0..cfg.layers {
            let p = |s: &str| format!("dec.l{i}.{s}");
            layers.push(DecoderLayer {
                ln1_gamma: params.id(&p("ln1.gamma"))?,
                ln1_beta: params.id(&p("ln1.beta"))?,
                q: proj(i, "q", params.id(&p("attn.wq"))?)?,
                k: params.id(&p("attn.wk"))?,
                v: proj(i, "v", params.id(&p("attn.wv"))?)?,
                o: params.id(&p("attn.wo"))?,
                ln2_gamma: params.id(&p("ln2.gamma"))?,
                ln2_beta: params.id(&p("ln2.beta"))?,
                ffn_w1: params.id(&p("ffn.w1"))?,
                ffn_w2: params.id(&p("ffn.w2"))?,
            });
        }
        let dec = Decoder {
            cfg,
            embed: params.id("dec.embed")?,
            pos: params.id("dec.pos")?,
            layers,
            final_gamma: params.id("dec.final.gamma")?,
            final_beta: params.id("dec.final.beta")?,
            head: params.id("dec.head")?,
        };
        let want = vec![cfg.vocab_size, cfg.dim];
        if params.get(dec.embed).value.shape != want {
            return Err(Error::Shape(format!(
                "decoder embedding shape {:?} does not match config {:?}",
                params.get(dec.embed).value.shape,
                want
            )));
        }
        Ok(dec)
    }

    /// Full-sequence logits over [visual ‖ prompt ‖ targets] under causal
    /// self-attention. `counter`, when present, tallies the matmul MACs that
    /// the analytic prefill model covers.
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &Params,
        visual: Option<Var>,
        prompt_ids: &[usize],
        target_ids: &[usize],
        mut counter: Option<&mut MacCounter>,
    ) -> Result<Var> {
        let d = self.cfg.dim;
        let k_tokens = match visual {
            Some(v) => {
                let (k, vd) = tape.value(v).dims2()?;
                if vd != d {
                    return Err(Error::Shape(format!(
                        "visual tokens have dim {vd}, decoder expects {d}"
                    )));
                }
                k
            }
            None => 0,
        };
        let ids: Vec<usize> = prompt_ids.iter().chain(target_ids).copied().collect();
        let s = k_tokens + ids.len();
        if s == 0 {
            return Err(Error::Config("decoder forward on an empty sequence".into()));
        }
        if s > self.cfg.max_seq_len {
            return Err(Error::Config(format!(
                "length overflow: sequence {s} exceeds max_seq_len {}",
                self.cfg.max_seq_len
            )));
        }

        let mut parts = Vec::new();
        if let Some(v) = visual {
            parts.push(v);
        }
        if !ids.is_empty() {
            let table = tape.param(params, self.embed);
            parts.push(tape.embedding_lookup(table, &ids)?);
        }
        let x0 = tape.concat_rows(&parts)?;
        let pos = tape.param(params, self.pos);
        let pos_s = tape.slice_rows(pos, 0, s)?;
        let mut x = tape.add(x0, pos_s)?;

        let mask = tape.constant(nn::causal_mask(s));
        let (su, du) = (s as u64, d as u64);
        for layer in &self.layers {
            let g1 = tape.param(params, layer.ln1_gamma);
            let b1 = tape.param(params, layer.ln1_beta);
            let h = tape.layer_norm(x, g1, b1, NORM_EPS)?;
            let q = layer.q.forward(tape, params, h)?;
            let kk = tape.param(params, layer.k);
            let kk_t = tape.transpose(kk)?;
            let k = tape.matmul(h, kk_t)?;
            let v = layer.v.forward(tape, params, h)?;
            let ctx = nn::scaled_dot_attention(tape, q, k, v, self.cfg.heads, Some(mask))?;
            let wo = tape.param(params, layer.o);
            let wo_t = tape.transpose(wo)?;
            let attn = tape.matmul(ctx, wo_t)?;
            x = tape.add(x, attn)?;

            let g2 = tape.param(params, layer.ln2_gamma);
            let b2 = tape.param(params, layer.ln2_beta);
            let h2 = tape.layer_norm(x, g2, b2, NORM_EPS)?;
            let w1 = tape.param(params, layer.ffn_w1);
            let w1_t = tape.transpose(w1)?;
            let mid = tape.matmul(h2, w1_t)?;
            let mid = tape.gelu(mid);
            let w2 = tape.param(params, layer.ffn_w2);
            let w2_t = tape.transpose(w2)?;
            let ffn = tape.matmul(mid, w2_t)?;
            x = tape.add(x, ffn)?;

            if let Some(c) = counter.as_deref_mut() {
                c.projections += 4 * su * du * du;
                c.attention += 2 * su * su * du;
                c.ffn += 2 * self.cfg.ffn_ratio as u64 * su * du * du;
                let lora_macs: u64 = [layer.q.lora_rank(), layer.v.lora_rank()]
                    .iter()
                    .map(|&r| 2 * su * du * r as u64)
                    .sum();
                c.other += lora_macs;
            }
        }

        let fg = tape.param(params, self.final_gamma);
        let fb = tape.param(params, self.final_beta);
        let xn = tape.layer_norm(x, fg, fb, NORM_EPS)?;
        let head = tape.param(params, self.head);
        let head_t = tape.transpose(head)?;
        let logits = tape.matmul(xn, head_t)?;
        if let Some(c) = counter.as_deref_mut() {
            c.other += su * du * self.cfg.vocab_size as u64;
        }
        Ok(logits)
    }

    /// Autoregressive decoding without a KV cache: each step re-runs the full
    /// prefix. Greedy by default; sampling is seeded. Stops at `eos_id` (not
    /// included in the output) or after `max_new` tokens.
    pub fn generate(
        &self,
        params: &Params,
        visual: Option<&Array>,
        prompt_ids: &[usize],
        max_new: usize,
        mode: GenMode,
        eos_id: usize,
    ) -> Result<Vec<usize>> {
        let mut out: Vec<usize> = Vec::new();
        let mut sampler = match mode {
            GenMode::Greedy => None,
            GenMode::Sample { temperature, seed } => Some((temperature, rng::seeded(seed))),
        };
        for _ in 0..max_new {
            let mut tape = Tape::new();
            let vis = visual.map(|a| tape.constant(a.clone()));
            let logits = self.forward(&mut tape, params, vis, prompt_ids, &out, None)?;
            let (rows, vocab) = tape.value(logits).dims2()?;
            let last = &tape.value(logits).data[(rows - 1) * vocab..rows * vocab];
            let next = match sampler.as_mut() {
                None => argmax(last),
                Some((temp, r)) => sample_temperature(last, *temp, r),
            };
            if next == eos_id {
                break;
            }
            out.push(next);
        }
        Ok(out)
    }
}

/// Lowest index wins ties, so decoding is deterministic.
fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn sample_temperature(row: &[f64], temperature: f64, r: &mut ChaCha8Rng) -> usize {
    use rand::Rng;
    if temperature <= 0.0 {
        return argmax(row);
    }
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = row.iter().map(|&v| ((v - max) / temperature).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = r.gen::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        u -= w;
        if u <= 0.0 {
            return i;
        }
    }
    row.len() - 1
}
