//! System assembly: frozen encoder, optional compressor, decoder (+LoRA),
//! wired to one parameter registry, plus checkpointing and the render-back
//! evaluation path shared by training and the experiment harness.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::compressor::{Compressor, CompressorConfig, Mode};
use crate::decoder::{Decoder, DecoderConfig, GenMode, LoraConfig};
use crate::encoder::{FrozenEncoder, PageImage, VisualTokens};
use crate::error::{Error, Result};
use crate::rng;
use crate::synth::markup::vocab;
use crate::synth::{parse_lenient, render, similarity, SyntheticSample};
use crate::tensor::{serialize, Array, Params, Tape};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SystemConfig {
    pub encoder_seed: u64,
    pub patch_size: usize,
    pub max_grid_h: usize,
    pub max_grid_w: usize,
    /// None bypasses compression entirely (full-token adapter-only variant).
    pub compressor: Option<CompressorConfig>,
    pub decoder: DecoderConfig,
    pub lora: Option<LoraConfig>,
    /// Count of PROMPT tokens fed between visual tokens and targets.
    pub prompt_len: usize,
}

impl SystemConfig {
    /// Desk-scale defaults: 64x64 pages, 16x16 token grid, K=16 budget.
    pub fn toy(k: usize) -> Self {
        let dim = 32;
        let mut comp = CompressorConfig::new(dim, k);
        comp.groups = 8;
        comp.heads = 4;
        SystemConfig {
            encoder_seed: 7,
            patch_size: 4,
            max_grid_h: 64,
            max_grid_w: 128,
            compressor: Some(comp),
            decoder: DecoderConfig {
                layers: 2,
                dim,
                heads: 4,
                vocab_size: vocab::SIZE,
                max_seq_len: 512,
                ffn_ratio: 4,
            },
            lora: Some(LoraConfig { rank: 8, alpha: 16.0 }),
            prompt_len: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.decoder.validate()?;
        if let Some(c) = &self.compressor {
            c.validate()?;
            if c.dim != self.decoder.dim {
                return Err(Error::Config(format!(
                    "compressor dim {} must match decoder dim {}",
                    c.dim, self.decoder.dim
                )));
            }
        }
        if self.prompt_len == 0 {
            return Err(Error::Config("prompt_len must be at least 1".into()));
        }
        if self.decoder.vocab_size < vocab::SIZE {
            return Err(Error::Config(format!(
                "decoder vocab {} smaller than the markup vocabulary {}",
                self.decoder.vocab_size,
                vocab::SIZE
            )));
        }
        Ok(())
    }
}

pub struct System {
    pub cfg: SystemConfig,
    pub encoder: FrozenEncoder,
    pub compressor: Option<Compressor>,
    pub decoder: Decoder,
}

impl System {
    /// Fresh init. The decoder starts trainable for its text-only
    /// pretraining pass; call [`System::freeze_decoder`] and then
    /// [`System::attach_lora`] before joint training.
    pub fn init(params: &mut Params, cfg: SystemConfig, init_seed: u64) -> Result<System> {
        cfg.validate()?;
        let mut r = rng::derive(init_seed, 0xEC0);
        let encoder = FrozenEncoder::init(
            params,
            cfg.encoder_seed,
            cfg.patch_size,
            cfg.decoder.dim,
            cfg.max_grid_h,
            cfg.max_grid_w,
        )?;
        let decoder = Decoder::init(params, &mut r, cfg.decoder, true)?;
        let compressor = match &cfg.compressor {
            Some(c) => Some(Compressor::init(params, &mut r, c.clone())?),
            None => None,
        };
        Ok(System { cfg, encoder, compressor, decoder })
    }

    pub fn freeze_decoder(&self, params: &mut Params) {
        params.set_trainable_prefix("dec.", false);
    }

    pub fn attach_lora(&mut self, params: &mut Params, init_seed: u64) -> Result<()> {
        if let Some(lora) = self.cfg.lora {
            let mut r = rng::derive(init_seed, 0x10EA);
            self.decoder.attach_lora(params, &mut r, lora)?;
        }
        Ok(())
    }

    pub fn prompt_ids(&self) -> Vec<usize> {
        vec![vocab::PROMPT; self.cfg.prompt_len]
    }

    pub fn encode(&self, params: &Params, img: &PageImage) -> Result<VisualTokens> {
        self.encoder.encode(params, img)
    }

    /// Visual tokens entering the decoder for one sample: compressed when a
    /// compressor is configured, otherwise the raw token sequence.
    pub fn visual_input(
        &self,
        tape: &mut Tape,
        params: &Params,
        vt: &VisualTokens,
        sample: &SyntheticSample,
        mode: Mode,
    ) -> Result<crate::tensor::Var> {
        match &self.compressor {
            Some(c) => c.compress(
                tape,
                params,
                vt,
                &sample.annotation,
                (sample.image.height_px, sample.image.width_px),
                mode,
            ),
            None => Ok(tape.constant(vt.tokens.clone())),
        }
    }

    /// Eval-mode compression to a plain array (for generation and timing).
    pub fn compress_eval(
        &self,
        params: &Params,
        vt: &VisualTokens,
        sample: &SyntheticSample,
    ) -> Result<Array> {
        let mut tape = Tape::new();
        let v = self.visual_input(&mut tape, params, vt, sample, Mode::Eval)?;
        Ok(tape.value(v).clone())
    }

    pub fn save_checkpoint(&self, path: &Path, params: &Params) -> Result<()> {
        save_checkpoint(path, &self.cfg, params)
    }

    /// Rebuild a system around loaded parameters, validating presence and
    /// shape agreement of every referenced weight.
    pub fn from_checkpoint(cfg: SystemConfig, params: &Params) -> Result<System> {
        cfg.validate()?;
        let encoder = FrozenEncoder::from_params(
            params,
            cfg.patch_size,
            cfg.decoder.dim,
            cfg.max_grid_h,
            cfg.max_grid_w,
        )?;
        let decoder = Decoder::from_params(params, cfg.decoder, cfg.lora)?;
        let compressor = match &cfg.compressor {
            Some(c) => Some(Compressor::from_params(params, c.clone())?),
            None => None,
        };
        Ok(System { cfg, encoder, compressor, decoder })
    }
}

/// Target token stream for a sample: the linearized markup plus EOS.
pub fn target_ids(sample: &SyntheticSample) -> Vec<usize> {
    let mut ids = sample.markup.linearize();
    ids.push(vocab::EOS);
    ids
}

/// Upper bound on generated tokens: the longest expressible program plus EOS.
pub fn generation_budget() -> usize {
    // PAGE color + 6 rows * (ROW + 4 cells * 4 tokens) + END, rounded up.
    112
}

/// Greedy-decode markup from visual tokens, render it, and score it against
/// the ground-truth image. Returns (generated ids, parse validity, score).
pub fn generate_and_score(
    system: &System,
    params: &Params,
    visual: Option<&Array>,
    sample: &SyntheticSample,
) -> Result<(Vec<usize>, bool, f64)> {
    let ids = system.decoder.generate(
        params,
        visual,
        &system.prompt_ids(),
        generation_budget(),
        GenMode::Greedy,
        vocab::EOS,
    )?;
    let (program, valid) = parse_lenient(&ids);
    let rendered = render(&program, sample.image.height_px, sample.image.width_px);
    let score = similarity(&rendered, &sample.image)?;
    Ok((ids, valid, score))
}

// ── Checkpoint container ─────────────────────────────────────────────

const CKPT_MAGIC: &[u8; 4] = b"OPCK";
const CKPT_VERSION: u32 = 1;

pub fn save_checkpoint(path: &Path, cfg: &SystemConfig, params: &Params) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CKPT_MAGIC)?;
    w.write_all(&CKPT_VERSION.to_le_bytes())?;
    let meta = serde_json::to_vec(cfg).map_err(|e| Error::Data(format!("config encode: {e}")))?;
    w.write_all(&(meta.len() as u32).to_le_bytes())?;
    w.write_all(&meta)?;
    let entries: Vec<(&str, &Array)> =
        params.iter().map(|(_, e)| (e.name.as_str(), &e.value)).collect();
    serialize::write_container(&mut w, &entries)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(SystemConfig, Params)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CKPT_MAGIC {
        return Err(Error::Data(format!("{} is not a checkpoint", path.display())));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    if u32::from_le_bytes(b4) != CKPT_VERSION {
        return Err(Error::Data("unsupported checkpoint version".into()));
    }
    r.read_exact(&mut b4)?;
    let meta_len = u32::from_le_bytes(b4) as usize;
    let mut meta = vec![0u8; meta_len];
    r.read_exact(&mut meta)?;
    let cfg: SystemConfig =
        serde_json::from_slice(&meta).map_err(|e| Error::Data(format!("config decode: {e}")))?;
    let entries = serialize::read_container(&mut r)?;
    let mut params = Params::new();
    for (name, value) in entries {
        let trainable = name.starts_with("comp.") || name.starts_with("lora.");
        let exempt = name.ends_with(".gamma")
            || name.ends_with(".beta")
            || name == "comp.pos"
            || name == "dec.pos"
            || name == "enc.pos"
            || name == "enc.proj";
        params.insert(&name, value, trainable, exempt)?;
    }
    Ok((cfg, params))
}
