//! Shared helpers for integration tests: a miniature end-to-end system and
//! a finite-difference check over every trainable parameter of the full
//! compressor-plus-decoder graph.

use optok_core::compressor::{CompressorConfig, Mode};
use optok_core::decoder::{DecoderConfig, LoraConfig};
use optok_core::encoder::VisualTokens;
use optok_core::pipeline::{System, SystemConfig};
use optok_core::rng;
use optok_core::synth::{gen_sample, GenConfig, SyntheticSample};
use optok_core::tensor::{Array, Params, Tape};
use optok_core::train::sample_loss;

/// Smallest system that exercises every pipeline stage: 32x32 pages,
/// an 8x8 token grid, two conv blocks down to 2x2, K=4, one decoder layer.
pub fn tiny_config(seed: u64) -> SystemConfig {
    let dim = 8;
    let mut comp = CompressorConfig::new(dim, 4);
    comp.groups = 2;
    comp.heads = 2;
    comp.dropout = 0.1;
    SystemConfig {
        encoder_seed: seed,
        patch_size: 4,
        max_grid_h: 16,
        max_grid_w: 16,
        compressor: Some(comp),
        decoder: DecoderConfig {
            layers: 1,
            dim,
            heads: 2,
            vocab_size: optok_core::synth::markup::vocab::SIZE,
            max_seq_len: 128,
            ffn_ratio: 4,
        },
        lora: Some(LoraConfig { rank: 2, alpha: 4.0 }),
        prompt_len: 1,
    }
}

pub fn tiny_gen_config() -> GenConfig {
    GenConfig {
        height_px: 32,
        width_px: 32,
        patch_size: 4,
        min_rows: 1,
        max_rows: 2,
        min_cells: 1,
        max_cells: 2,
    }
}

/// Build a ready-to-train tiny system: frozen encoder + frozen (randomly
/// initialized) decoder + adapters + compressor. `randomize_lora_b`
/// de-zeroes the B factors so gradients flow through A as well.
pub fn tiny_system(seed: u64, randomize_lora_b: bool) -> (Params, System) {
    let mut params = Params::new();
    let mut system = System::init(&mut params, tiny_config(seed), seed).unwrap();
    system.freeze_decoder(&mut params);
    system.attach_lora(&mut params, seed).unwrap();
    if randomize_lora_b {
        let mut r = rng::derive(seed, 0xB0B);
        for id in 0..params.len() {
            let e = params.get_mut(id);
            if e.name.starts_with("lora.") && e.name.ends_with(".b") {
                let shape = e.value.shape.clone();
                e.value = Array::randn(&shape, 0.0, 0.2, &mut r);
            }
        }
    }
    (params, system)
}

pub fn tiny_sample(seed: u64) -> SyntheticSample {
    gen_sample(seed, &tiny_gen_config()).unwrap()
}

/// A trainable configuration with enough capacity to overfit: D=16, K=4,
/// two decoder layers, rank-4 adapters.
pub fn small_config(seed: u64) -> SystemConfig {
    let dim = 16;
    let mut comp = CompressorConfig::new(dim, 4);
    comp.groups = 4;
    comp.heads = 4;
    comp.dropout = 0.0;
    SystemConfig {
        encoder_seed: seed,
        patch_size: 4,
        max_grid_h: 16,
        max_grid_w: 16,
        compressor: Some(comp),
        decoder: DecoderConfig {
            layers: 2,
            dim,
            heads: 4,
            vocab_size: optok_core::synth::markup::vocab::SIZE,
            max_seq_len: 128,
            ffn_ratio: 4,
        },
        lora: Some(LoraConfig { rank: 4, alpha: 8.0 }),
        prompt_len: 1,
    }
}

/// Pretrain the decoder text-only on a small corpus, freeze it, attach
/// adapters. Returns the ready-to-train system.
pub fn pretrained_system(seed: u64, corpus: &[SyntheticSample]) -> (Params, System) {
    use optok_core::train::{pretrain_decoder, PretrainConfig};
    let mut params = Params::new();
    let mut system = System::init(&mut params, small_config(seed), seed).unwrap();
    let cfg = PretrainConfig { epochs: 3, lr: 3e-3, lr_min: 1e-4, batch: 8, seed };
    pretrain_decoder(&system, &mut params, corpus, &cfg).unwrap();
    system.freeze_decoder(&mut params);
    system.attach_lora(&mut params, seed).unwrap();
    (params, system)
}

/// Loss of one sample at the current parameter values (fresh tape).
pub fn loss_value(system: &System, params: &Params, vt: &VisualTokens, sample: &SyntheticSample) -> f64 {
    let mut tape = Tape::new();
    let loss = sample_loss(&mut tape, system, params, vt, sample, Mode::Eval).unwrap();
    tape.value(loss).data[0]
}

/// Max relative error between analytic and central-difference gradients over
/// every trainable parameter of the full graph, plus the frozen-gradient
/// absolute sum (which must be exactly zero).
pub fn full_graph_max_rel_err(seed: u64, h: f64) -> (f64, f64) {
    let (mut params, system) = tiny_system(seed, true);
    let sample = tiny_sample(seed + 500);
    let vt = system.encode(&params, &sample.image).unwrap();

    let mut tape = Tape::new();
    let loss = sample_loss(&mut tape, &system, &params, &vt, &sample, Mode::Eval).unwrap();
    tape.backward(loss).unwrap();
    params.zero_grads();
    tape.accumulate_param_grads(&mut params, 1.0);
    let frozen_grad_sum =
        params.grad_abs_sum(Some("dec.")) + params.grad_abs_sum(Some("enc."));

    let analytic: Vec<(usize, Vec<f64>)> = params
        .iter()
        .filter(|(_, e)| e.trainable)
        .map(|(id, e)| (id, e.grad.clone()))
        .collect();

    let mut max_err: f64 = 0.0;
    for (id, grads) in analytic {
        for j in 0..grads.len() {
            let orig = params.get(id).value.data[j];
            params.get_mut(id).value.data[j] = orig + h;
            let up = loss_value(&system, &params, &vt, &sample);
            params.get_mut(id).value.data[j] = orig - h;
            let down = loss_value(&system, &params, &vt, &sample);
            params.get_mut(id).value.data[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let err = optok_core::tensor::gradcheck::rel_err(grads[j], numeric);
            max_err = max_err.max(err);
        }
    }
    (max_err, frozen_grad_sum)
}
