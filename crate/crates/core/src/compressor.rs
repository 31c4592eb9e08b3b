//! The trainable compressor: N x D visual tokens in, K x D tokens out.
//!
//! Stages: reshape to a feature map, two stride-2 convolution blocks,
//! element-guided reweighting from UI bounding boxes, adaptive average
//! pooling to a fixed token budget, and a single pre-norm Transformer
//! refinement layer with learned positional embeddings.

use rand_chacha::ChaCha8Rng;

use crate::encoder::VisualTokens;
use crate::error::{Error, Result};
use crate::nn;
use crate::rng;
use crate::tensor::{conv_out_dim, Array, ParamId, Params, Tape, Var};

// ── Annotations and masks ────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementCategory {
    Text,
    Button,
    Icon,
    Input,
    Background,
}

impl ElementCategory {
    pub fn as_u8(self) -> u8 {
        match self {
            ElementCategory::Text => 0,
            ElementCategory::Button => 1,
            ElementCategory::Icon => 2,
            ElementCategory::Input => 3,
            ElementCategory::Background => 4,
        }
    }

    pub fn from_u8(v: u8) -> Result<Self> {
        Ok(match v {
            0 => ElementCategory::Text,
            1 => ElementCategory::Button,
            2 => ElementCategory::Icon,
            3 => ElementCategory::Input,
            4 => ElementCategory::Background,
            _ => return Err(Error::Data(format!("invalid element category byte {v}"))),
        })
    }
}

/// Detected UI boxes in original image pixel coordinates, with categories.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ElementAnnotation {
    /// (x0, y0, x1, y1), half-open on the right/bottom.
    pub boxes: Vec<(f64, f64, f64, f64)>,
    pub categories: Vec<ElementCategory>,
}

impl ElementAnnotation {
    pub fn validate(&self, width_px: usize, height_px: usize) -> Result<()> {
        if self.boxes.len() != self.categories.len() {
            return Err(Error::Data(format!(
                "annotation has {} boxes but {} categories",
                self.boxes.len(),
                self.categories.len()
            )));
        }
        for &(x0, y0, x1, y1) in &self.boxes {
            if !(0.0 <= x0 && x0 < x1 && x1 <= width_px as f64)
                || !(0.0 <= y0 && y0 < y1 && y1 <= height_px as f64)
            {
                return Err(Error::Data(format!(
                    "box ({x0}, {y0}, {x1}, {y1}) outside {width_px}x{height_px} image"
                )));
            }
        }
        Ok(())
    }
}

/// Per-category mask weights.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CategoryWeights {
    pub text: f64,
    pub button: f64,
    pub icon: f64,
    pub input: f64,
    pub background: f64,
}

impl Default for CategoryWeights {
    fn default() -> Self {
        CategoryWeights { text: 1.0, button: 1.0, icon: 0.5, input: 0.5, background: 0.2 }
    }
}

impl CategoryWeights {
    pub fn uniform(v: f64) -> Self {
        CategoryWeights { text: v, button: v, icon: v, input: v, background: v }
    }

    pub fn weight(&self, c: ElementCategory) -> f64 {
        match c {
            ElementCategory::Text => self.text,
            ElementCategory::Button => self.button,
            ElementCategory::Icon => self.icon,
            ElementCategory::Input => self.input,
            ElementCategory::Background => self.background,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for v in [self.text, self.button, self.icon, self.input, self.background] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("category weight {v} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Per-cell weight grid at the downsampled feature resolution, shape (1, h, w).
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialMask {
    pub weights: Array,
}

impl SpatialMask {
    pub fn grid_dims(&self) -> (usize, usize) {
        (self.weights.shape[1], self.weights.shape[2])
    }
}

/// Assign each grid cell the maximum weight over the boxes containing its
/// center (scaled back to pixel coordinates); uncovered cells default to the
/// background weight.
pub fn build_element_mask(
    ann: &ElementAnnotation,
    img_dims: (usize, usize),
    grid_dims: (usize, usize),
    weights: &CategoryWeights,
) -> Result<SpatialMask> {
    let (img_h, img_w) = img_dims;
    let (h, w) = grid_dims;
    if h == 0 || w == 0 {
        return Err(Error::Config(format!("mask grid {h}x{w} is empty")));
    }
    ann.validate(img_w, img_h)?;
    weights.validate()?;
    let mut data = vec![weights.background; h * w];
    for r in 0..h {
        let cy = (r as f64 + 0.5) * img_h as f64 / h as f64;
        for c in 0..w {
            let cx = (c as f64 + 0.5) * img_w as f64 / w as f64;
            let mut best = weights.background;
            for (&(x0, y0, x1, y1), &cat) in ann.boxes.iter().zip(&ann.categories) {
                if cx >= x0 && cx < x1 && cy >= y0 && cy < y1 {
                    best = best.max(weights.weight(cat));
                }
            }
            data[r * w + c] = best;
        }
    }
    Ok(SpatialMask { weights: Array { shape: vec![1, h, w], data } })
}

// ── Configuration ────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ConvKind {
    DepthwiseSeparable,
    /// Dense 3x3 convolution with matched output dims (ablation variant).
    Standard,
}

/// Forward mode: dropout only fires during training, with a seeded mask.
#[derive(Debug, Clone, Copy)]
pub enum Mode {
    Eval,
    Train { dropout_seed: u64 },
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CompressorConfig {
    /// Channel dim D, shared with the decoder.
    pub dim: usize,
    /// Target token count K.
    pub token_budget: usize,
    pub conv_blocks: usize,
    pub groups: usize,
    pub heads: usize,
    pub ffn_ratio: usize,
    pub dropout: f64,
    pub weights: CategoryWeights,
    pub conv_kind: ConvKind,
    /// When false the refinement layer (and its positional table) is dropped
    /// and pooled tokens pass through unchanged (ablation variant).
    pub refine: bool,
    /// Explicit pooling grid (h, w) with h * w == token_budget. Defaults to
    /// the square sqrt(K) x sqrt(K) grid; set it to run non-square budgets.
    pub pool_grid: Option<(usize, usize)>,
}

impl CompressorConfig {
    pub fn new(dim: usize, token_budget: usize) -> Self {
        CompressorConfig {
            dim,
            token_budget,
            conv_blocks: 2,
            groups: 8,
            heads: 8,
            ffn_ratio: 2,
            dropout: 0.1,
            weights: CategoryWeights::default(),
            conv_kind: ConvKind::DepthwiseSeparable,
            refine: true,
            pool_grid: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.token_budget == 0 || self.conv_blocks == 0 {
            return Err(Error::Config("compressor dims must be positive".into()));
        }
        if self.dim % self.groups != 0 {
            return Err(Error::Config(format!(
                "hidden dim {} not divisible by {} norm groups",
                self.dim, self.groups
            )));
        }
        if self.refine && self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden dim {} not divisible by {} attention heads",
                self.dim, self.heads
            )));
        }
        self.weights.validate()?;
        let (ph, pw) = self.pool_dims()?;
        if ph * pw != self.token_budget {
            return Err(Error::Config(format!(
                "pool grid {ph}x{pw} does not produce K = {}",
                self.token_budget
            )));
        }
        Ok(())
    }

    /// Pooling grid. Without an explicit override the budget must be a
    /// perfect square.
    pub fn pool_dims(&self) -> Result<(usize, usize)> {
        if let Some(g) = self.pool_grid {
            return Ok(g);
        }
        let root = square_root_exact(self.token_budget)
            .ok_or_else(|| Error::Config("K must be a perfect square".into()))?;
        Ok((root, root))
    }
}

pub fn square_root_exact(k: usize) -> Option<usize> {
    let r = (k as f64).sqrt().round() as usize;
    (r * r == k).then_some(r)
}

// ── Parameters ───────────────────────────────────────────────────────

#[derive(Debug, Clone)]
enum ConvBlock {
    DepthwiseSeparable { dw: ParamId, pw: ParamId, gamma: ParamId, beta: ParamId },
    Standard { w: ParamId, gamma: ParamId, beta: ParamId },
}

#[derive(Debug, Clone)]
struct RefineLayer {
    ln1_gamma: ParamId,
    ln1_beta: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    ln2_gamma: ParamId,
    ln2_beta: ParamId,
    ffn_w1: ParamId,
    ffn_w2: ParamId,
}

#[derive(Debug, Clone)]
pub struct Compressor {
    pub cfg: CompressorConfig,
    blocks: Vec<ConvBlock>,
    pos: Option<ParamId>,
    refine: Option<RefineLayer>,
}

pub const NORM_EPS: f64 = 1e-5;

/// Fan-in scaled uniform limit, the init used for conv/attention/FFN weights.
fn fan_in_limit(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

impl Compressor {
    /// Register all trainable weights under the `comp.` prefix.
    pub fn init(params: &mut Params, r: &mut ChaCha8Rng, cfg: CompressorConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let mut blocks = Vec::with_capacity(cfg.conv_blocks);
        for b in 0..cfg.conv_blocks {
            let gamma = params.insert(&format!("comp.block{b}.gamma"), Array::filled(&[d], 1.0), true, true)?;
            let beta = params.insert(&format!("comp.block{b}.beta"), Array::zeros(&[d]), true, true)?;
            match cfg.conv_kind {
                ConvKind::DepthwiseSeparable => {
                    let dw = Array::rand_uniform(&[d, 3, 3], fan_in_limit(9), r);
                    let pw = Array::rand_uniform(&[d, d], fan_in_limit(d), r);
                    let dw = params.insert(&format!("comp.block{b}.dw"), dw, true, false)?;
                    let pw = params.insert(&format!("comp.block{b}.pw"), pw, true, false)?;
                    blocks.push(ConvBlock::DepthwiseSeparable { dw, pw, gamma, beta });
                }
                ConvKind::Standard => {
                    let w = Array::rand_uniform(&[d, d, 3, 3], fan_in_limit(9 * d), r);
                    let w = params.insert(&format!("comp.block{b}.w"), w, true, false)?;
                    blocks.push(ConvBlock::Standard { w, gamma, beta });
                }
            }
        }
        let (pos, refine) = if cfg.refine {
            let k = cfg.token_budget;
            let pos = params.insert("comp.pos", Array::randn(&[k, d], 0.0, 0.02, r), true, true)?;
            let lim = fan_in_limit(d);
            let refine = RefineLayer {
                ln1_gamma: params.insert("comp.refine.ln1.gamma", Array::filled(&[d], 1.0), true, true)?,
                ln1_beta: params.insert("comp.refine.ln1.beta", Array::zeros(&[d]), true, true)?,
                wq: params.insert("comp.refine.wq", Array::rand_uniform(&[d, d], lim, r), true, false)?,
                wk: params.insert("comp.refine.wk", Array::rand_uniform(&[d, d], lim, r), true, false)?,
                wv: params.insert("comp.refine.wv", Array::rand_uniform(&[d, d], lim, r), true, false)?,
                wo: params.insert("comp.refine.wo", Array::rand_uniform(&[d, d], lim, r), true, false)?,
                ln2_gamma: params.insert("comp.refine.ln2.gamma", Array::filled(&[d], 1.0), true, true)?,
                ln2_beta: params.insert("comp.refine.ln2.beta", Array::zeros(&[d]), true, true)?,
                ffn_w1: params.insert(
                    "comp.refine.ffn.w1",
                    Array::rand_uniform(&[cfg.ffn_ratio * d, d], lim, r),
                    true,
                    false,
                )?,
                ffn_w2: params.insert(
                    "comp.refine.ffn.w2",
                    Array::rand_uniform(&[d, cfg.ffn_ratio * d], fan_in_limit(cfg.ffn_ratio * d), r),
                    true,
                    false,
                )?,
            };
            (Some(pos), Some(refine))
        } else {
            (None, None)
        };
        Ok(Compressor { cfg, blocks, pos, refine })
    }

    /// Re-attach to weights already present in `params`.
    pub fn from_params(params: &Params, cfg: CompressorConfig) -> Result<Self> {
        cfg.validate()?;
        let mut blocks = Vec::with_capacity(cfg.conv_blocks);
        for b in 0..cfg.conv_blocks {
            let gamma = params.id(&format!("comp.block{b}.gamma"))?;
            let beta = params.id(&format!("comp.block{b}.beta"))?;
            match cfg.conv_kind {
                ConvKind::DepthwiseSeparable => blocks.push(ConvBlock::DepthwiseSeparable {
                    dw: params.id(&format!("comp.block{b}.dw"))?,
                    pw: params.id(&format!("comp.block{b}.pw"))?,
                    gamma,
                    beta,
                }),
                ConvKind::Standard => blocks.push(ConvBlock::Standard {
                    w: params.id(&format!("comp.block{b}.w"))?,
                    gamma,
                    beta,
                }),
            }
        }
        let (pos, refine) = if cfg.refine {
            (
                Some(params.id("comp.pos")?),
                Some(RefineLayer {
                    ln1_gamma: params.id("comp.refine.ln1.gamma")?,
                    ln1_beta: params.id("comp.refine.ln1.beta")?,
                    wq: params.id("comp.refine.wq")?,
                    wk: params.id("comp.refine.wk")?,
                    wv: params.id("comp.refine.wv")?,
                    wo: params.id("comp.refine.wo")?,
                    ln2_gamma: params.id("comp.refine.ln2.gamma")?,
                    ln2_beta: params.id("comp.refine.ln2.beta")?,
                    ffn_w1: params.id("comp.refine.ffn.w1")?,
                    ffn_w2: params.id("comp.refine.ffn.w2")?,
                }),
            )
        } else {
            (None, None)
        };
        Ok(Compressor { cfg, blocks, pos, refine })
    }

    /// Exact count of trainable scalars for a config, by construction the
    /// same sum the allocator produces.
    pub fn count_params(cfg: &CompressorConfig) -> usize {
        let d = cfg.dim;
        let per_block = match cfg.conv_kind {
            ConvKind::DepthwiseSeparable => d * 9 + d * d + 2 * d,
            ConvKind::Standard => d * d * 9 + 2 * d,
        };
        let mut total = cfg.conv_blocks * per_block;
        if cfg.refine {
            // positions + q/k/v/o + FFN (D -> rD -> D) + two norm affines
            total += cfg.token_budget * d;
            total += 4 * d * d;
            total += 2 * cfg.ffn_ratio * d * d;
            total += 4 * d;
        }
        total
    }

    // ── Stages ───────────────────────────────────────────────────────

    /// (N, D) tokens -> (D, H, W) channel-major feature map, token n landing
    /// at (row n / W, col n % W).
    pub fn tokens_to_grid(tape: &mut Tape, v: Var, grid_h: usize, grid_w: usize) -> Result<Var> {
        let (n, d) = tape.value(v).dims2()?;
        if n != grid_h * grid_w {
            return Err(Error::Shape(format!(
                "tokens_to_grid: {n} tokens do not fill a {grid_h}x{grid_w} grid"
            )));
        }
        let t = tape.transpose(v)?;
        tape.reshape(t, &[d, grid_h, grid_w])
    }

    /// Inverse of `tokens_to_grid`.
    pub fn grid_to_tokens(tape: &mut Tape, f: Var) -> Result<Var> {
        let (d, h, w) = tape.value(f).dims3()?;
        let flat = tape.reshape(f, &[d, h * w])?;
        tape.transpose(flat)
    }

    /// One convolution block: GELU(GN(PW(DW(f)))) in the separable case, or
    /// GELU(GN(Conv(f))) for the dense ablation. Spatial dims roughly halve.
    pub fn conv_block(&self, tape: &mut Tape, params: &Params, index: usize, f: Var) -> Result<Var> {
        let block = &self.blocks[index];
        match block {
            ConvBlock::DepthwiseSeparable { dw, pw, gamma, beta } => {
                let dw = tape.param(params, *dw);
                let pw = tape.param(params, *pw);
                let gamma = tape.param(params, *gamma);
                let beta = tape.param(params, *beta);
                let x = tape.conv2d_depthwise(f, dw, 2, 1)?;
                let x = tape.conv2d_pointwise(x, pw)?;
                let x = tape.group_norm(x, gamma, beta, self.cfg.groups, NORM_EPS)?;
                Ok(tape.gelu(x))
            }
            ConvBlock::Standard { w, gamma, beta } => {
                let w = tape.param(params, *w);
                let gamma = tape.param(params, *gamma);
                let beta = tape.param(params, *beta);
                let x = tape.conv2d(f, w, 2, 1)?;
                let x = tape.group_norm(x, gamma, beta, self.cfg.groups, NORM_EPS)?;
                Ok(tape.gelu(x))
            }
        }
    }

    /// F ⊙ M with the mask broadcast over channels. The mask is a constant:
    /// gradients flow to the features only.
    pub fn reweight(tape: &mut Tape, f: Var, mask: &SpatialMask) -> Result<Var> {
        let (c, h, w) = tape.value(f).dims3()?;
        let (mh, mw) = mask.grid_dims();
        if (mh, mw) != (h, w) {
            return Err(Error::Shape(format!(
                "reweight: mask {mh}x{mw} does not match feature map {h}x{w}"
            )));
        }
        let mut tiled = Vec::with_capacity(c * h * w);
        for _ in 0..c {
            tiled.extend_from_slice(&mask.weights.data);
        }
        let m = tape.constant(Array { shape: vec![c, h, w], data: tiled });
        tape.mul(f, m)
    }

    /// Adaptive-average-pool to the configured grid, then flatten to (K, D).
    pub fn pool_and_flatten(&self, tape: &mut Tape, f: Var) -> Result<Var> {
        let (ph, pw) = self.cfg.pool_dims()?;
        let (_, h, w) = tape.value(f).dims3()?;
        if ph > h || pw > w {
            return Err(Error::Config(format!(
                "pool grid {ph}x{pw} exceeds feature map {h}x{w}"
            )));
        }
        let pooled = tape.adaptive_avg_pool2d(f, ph, pw)?;
        Self::grid_to_tokens(tape, pooled)
    }

    /// Pre-norm Transformer refinement over (K, D) pooled tokens:
    /// x = z + P, then attention and FFN sublayers with residuals.
    pub fn refine(&self, tape: &mut Tape, params: &Params, z: Var, mode: Mode) -> Result<Var> {
        let (layer, pos) = match (&self.refine, self.pos) {
            (Some(l), Some(p)) => (l, p),
            _ => return Ok(z), // refinement ablated away: identity on Z
        };
        let (k_tokens, d) = tape.value(z).dims2()?;
        let pos = tape.param(params, pos);
        let mut x = tape.add(z, pos)?;

        let mut dropout_rng = match mode {
            Mode::Train { dropout_seed } if self.cfg.dropout > 0.0 => Some(rng::seeded(dropout_seed)),
            _ => None,
        };
        let mut maybe_dropout = |tape: &mut Tape, v: Var| -> Result<Var> {
            if let Some(r) = dropout_rng.as_mut() {
                let m = nn::dropout_mask(&[k_tokens, d], self.cfg.dropout, r);
                let m = tape.constant(m);
                tape.mul(v, m)
            } else {
                Ok(v)
            }
        };

        // Attention sublayer.
        let ln1_g = tape.param(params, layer.ln1_gamma);
        let ln1_b = tape.param(params, layer.ln1_beta);
        let h = tape.layer_norm(x, ln1_g, ln1_b, NORM_EPS)?;
        let wq = tape.param(params, layer.wq);
        let wk = tape.param(params, layer.wk);
        let wv = tape.param(params, layer.wv);
        let wo = tape.param(params, layer.wo);
        let wq_t = tape.transpose(wq)?;
        let wk_t = tape.transpose(wk)?;
        let wv_t = tape.transpose(wv)?;
        let q = tape.matmul(h, wq_t)?;
        let k = tape.matmul(h, wk_t)?;
        let v = tape.matmul(h, wv_t)?;
        let ctx = nn::scaled_dot_attention(tape, q, k, v, self.cfg.heads, None)?;
        let wo_t = tape.transpose(wo)?;
        let attn = tape.matmul(ctx, wo_t)?;
        let attn = maybe_dropout(tape, attn)?;
        x = tape.add(x, attn)?;

        // FFN sublayer: D -> ratio*D -> D with GELU.
        let ln2_g = tape.param(params, layer.ln2_gamma);
        let ln2_b = tape.param(params, layer.ln2_beta);
        let h2 = tape.layer_norm(x, ln2_g, ln2_b, NORM_EPS)?;
        let w1 = tape.param(params, layer.ffn_w1);
        let w2 = tape.param(params, layer.ffn_w2);
        let w1_t = tape.transpose(w1)?;
        let mid = tape.matmul(h2, w1_t)?;
        let mid = tape.gelu(mid);
        let w2_t = tape.transpose(w2)?;
        let ffn = tape.matmul(mid, w2_t)?;
        let ffn = maybe_dropout(tape, ffn)?;
        tape.add(x, ffn)
    }

    /// Post-conv feature grid for an input grid, after `conv_blocks`
    /// stride-2, pad-1, 3x3 stages.
    pub fn downsampled_dims(&self, grid_h: usize, grid_w: usize) -> (usize, usize) {
        let mut h = grid_h;
        let mut w = grid_w;
        for _ in 0..self.cfg.conv_blocks {
            h = conv_out_dim(h, 3, 2, 1);
            w = conv_out_dim(w, 3, 2, 1);
        }
        (h, w)
    }

    /// Full pipeline: grid reshape, conv blocks, element mask built at the
    /// post-conv resolution, reweight, pool, refine. Deterministic in eval
    /// mode.
    pub fn compress(
        &self,
        tape: &mut Tape,
        params: &Params,
        v: &VisualTokens,
        ann: &ElementAnnotation,
        img_dims: (usize, usize),
        mode: Mode,
    ) -> Result<Var> {
        let tokens = tape.constant(v.tokens.clone());
        let mut f = Self::tokens_to_grid(tape, tokens, v.grid_h, v.grid_w)?;
        for b in 0..self.blocks.len() {
            f = self.conv_block(tape, params, b, f)?;
        }
        let (_, h, w) = tape.value(f).dims3()?;
        let mask = build_element_mask(ann, img_dims, (h, w), &self.cfg.weights)?;
        let f = Self::reweight(tape, f, &mask)?;
        let z = self.pool_and_flatten(tape, f)?;
        self.refine(tape, params, z, mode)
    }
}

/// Standalone square-budget pooling entry point: pool to sqrt(K) x sqrt(K)
/// and flatten. Rejects non-square budgets.
pub fn pool_and_flatten(tape: &mut Tape, f: Var, k: usize) -> Result<Var> {
    let root =
        square_root_exact(k).ok_or_else(|| Error::Config("K must be a perfect square".into()))?;
    let (_, h, w) = tape.value(f).dims3()?;
    if root > h || root > w {
        return Err(Error::Config(format!("pool grid {root}x{root} exceeds feature map {h}x{w}")));
    }
    let pooled = tape.adaptive_avg_pool2d(f, root, root)?;
    Compressor::grid_to_tokens(tape, pooled)
}

/// N / K, the headline compression ratio.
pub fn compression_ratio(n: usize, k: usize) -> f64 {
    n as f64 / k as f64
}
