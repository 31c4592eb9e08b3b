//! Analytic prefill cost model and an instrumented counter that validates it
//! against the toy decoder.
//!
//! Per decoder layer on a length-S prefix the model charges
//! `4*S*D^2 + 2*S^2*D + 4*ratio*S*D^2` (projections, self-attention, FFN;
//! ratio = FFN width / D, default 4). The coefficient structure is mixed:
//! the projection and attention terms enter at one count per
//! multiply-accumulate, the FFN term at two. The instrumented counter tracks
//! raw MACs per term and converts with the matching per-term factors, so the
//! two sides agree exactly whenever the decoder really has the assumed shape.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PrefillSpec {
    /// Visual token count (N before compression, K after).
    pub visual_tokens: usize,
    /// Text prompt token count P (a token count, not a positional table).
    pub prompt_len: usize,
    /// Hidden dim D.
    pub hidden: usize,
    /// Decoder layer count.
    pub layers: usize,
    /// FFN width as a multiple of D.
    pub ffn_ratio: usize,
}

impl PrefillSpec {
    pub fn new(visual_tokens: usize, prompt_len: usize, hidden: usize, layers: usize) -> Self {
        PrefillSpec { visual_tokens, prompt_len, hidden, layers, ffn_ratio: 4 }
    }

    pub fn seq_len(&self) -> usize {
        self.visual_tokens + self.prompt_len
    }

    pub fn validate(&self) -> Result<()> {
        if self.visual_tokens == 0 || self.hidden == 0 || self.layers == 0 || self.ffn_ratio == 0 {
            return Err(Error::Config("prefill spec fields must be positive".into()));
        }
        Ok(())
    }

    pub fn with_visual_tokens(&self, visual_tokens: usize) -> Self {
        PrefillSpec { visual_tokens, ..*self }
    }
}

/// Per-layer cost split into the three matmul families.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerFlops {
    pub projections: u64,
    pub attention: u64,
    pub ffn: u64,
}

impl LayerFlops {
    pub fn total(&self) -> u64 {
        self.projections + self.attention + self.ffn
    }
}

/// Cost of one decoder layer for a prefill of S = visual + prompt tokens.
pub fn flops_layer(spec: &PrefillSpec) -> LayerFlops {
    let s = spec.seq_len() as u64;
    let d = spec.hidden as u64;
    LayerFlops {
        projections: 4 * s * d * d,
        attention: 2 * s * s * d,
        ffn: 4 * spec.ffn_ratio as u64 * s * d * d,
    }
}

/// Total prefill cost: layers x per-layer.
pub fn flops_prefill(spec: &PrefillSpec) -> u64 {
    spec.layers as u64 * flops_layer(spec).total()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpeedupReport {
    /// flops_prefill(N) / flops_prefill(K), all terms included.
    pub exact: f64,
    /// N^2 / K^2, the attention-dominated approximation.
    pub approx: f64,
}

/// Prefill speedup from compressing `spec_n.visual_tokens` down to
/// `spec_k.visual_tokens`. Both specs must agree on D, layers and prompt.
pub fn speedup(spec_n: &PrefillSpec, spec_k: &PrefillSpec) -> SpeedupReport {
    assert_eq!(
        (spec_n.hidden, spec_n.layers, spec_n.prompt_len, spec_n.ffn_ratio),
        (spec_k.hidden, spec_k.layers, spec_k.prompt_len, spec_k.ffn_ratio),
        "speedup: specs must share D, layers, prompt length and FFN ratio"
    );
    let exact = flops_prefill(spec_n) as f64 / flops_prefill(spec_k) as f64;
    let n = spec_n.visual_tokens as f64;
    let k = spec_k.visual_tokens as f64;
    SpeedupReport { exact, approx: (n * n) / (k * k) }
}

/// N / K.
pub fn compression_ratio(n: usize, k: usize) -> f64 {
    n as f64 / k as f64
}

/// Raw multiply-accumulate tallies from an instrumented decoder forward.
/// `other` collects matmuls outside the analytic model's scope (LoRA factors,
/// the output head) so exactness checks are unaffected by them.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MacCounter {
    pub projections: u64,
    pub attention: u64,
    pub ffn: u64,
    pub other: u64,
}

impl MacCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn total_macs(&self) -> u64 {
        self.projections + self.attention + self.ffn + self.other
    }

    /// Convert counted MACs into the analytic model's units: projection and
    /// attention MACs enter at factor 1, FFN MACs at factor 2 (matching the
    /// model's coefficient structure).
    pub fn model_flops(&self) -> u64 {
        self.projections + self.attention + 2 * self.ffn
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_substitution() {
        // S = K + P = 1, D = 1: terms are 4 + 2 + 16 = 22.
        let spec = PrefillSpec::new(1, 0, 1, 1);
        let lf = flops_layer(&spec);
        assert_eq!((lf.projections, lf.attention, lf.ffn), (4, 2, 16));
        assert_eq!(lf.total(), 22);
    }

    #[test]
    fn degree_in_hidden_dim() {
        // Doubling D multiplies projection/FFN terms by 4, attention by 2.
        let a = flops_layer(&PrefillSpec::new(64, 8, 128, 1));
        let b = flops_layer(&PrefillSpec::new(64, 8, 256, 1));
        assert_eq!(b.projections, 4 * a.projections);
        assert_eq!(b.ffn, 4 * a.ffn);
        assert_eq!(b.attention, 2 * a.attention);
    }

    #[test]
    fn independent_re_evaluation() {
        // K=256, P=64, D=512 recomputed from scratch.
        let spec = PrefillSpec::new(256, 64, 512, 1);
        let s: u64 = 320;
        let d: u64 = 512;
        let expect = 4 * s * d * d + 2 * s * s * d + 16 * s * d * d;
        assert_eq!(flops_layer(&spec).total(), expect);
    }

    #[test]
    fn paper_scale_constants() {
        let base = PrefillSpec::new(6517, 64, 4096, 32);
        let rep = speedup(&base, &base.with_visual_tokens(256));
        assert!((rep.approx - 648.07).abs() <= 0.1, "approx {}", rep.approx);
        assert_eq!(rep.approx, speedup(&base, &base.with_visual_tokens(256)).approx);

        let ratio = compression_ratio(6517, 256);
        assert!((ratio - 25.46).abs() < 0.01);
        assert_eq!(format!("{ratio:.1}x"), "25.5x");
    }

    #[test]
    fn speedup_identity() {
        let spec = PrefillSpec::new(128, 16, 64, 4);
        let rep = speedup(&spec, &spec);
        assert_eq!(rep.exact, 1.0);
        assert_eq!(rep.approx, 1.0);
    }

    #[test]
    fn strictly_increasing_in_every_field() {
        let base = PrefillSpec::new(128, 16, 64, 4);
        let f0 = flops_prefill(&base);
        assert!(flops_prefill(&base.with_visual_tokens(129)) > f0);
        assert!(flops_prefill(&PrefillSpec { prompt_len: 17, ..base }) > f0);
        assert!(flops_prefill(&PrefillSpec { hidden: 65, ..base }) > f0);
        assert!(flops_prefill(&PrefillSpec { layers: 5, ..base }) > f0);
    }

    #[test]
    fn approx_approaches_exact_as_attention_dominates() {
        // With (K+P)*D fixed, growing K+P makes the quadratic term dominate
        // and drives exact toward approx = (S_n/S_k)^2-ish ratios.
        let mut prev_gap = f64::INFINITY;
        for (s, d) in [(128usize, 4096usize), (512, 1024), (2048, 256), (8192, 64)] {
            let n_spec = PrefillSpec::new(s, 0, d, 1);
            let k_spec = n_spec.with_visual_tokens(s / 4);
            let rep = speedup(&n_spec, &k_spec);
            let gap = (rep.exact - rep.approx).abs() / rep.approx;
            assert!(gap < prev_gap, "gap should shrink: {gap} vs {prev_gap}");
            prev_gap = gap;
        }
    }

    #[test]
    fn exact_speedup_bounded_by_term_ratios() {
        let n_spec = PrefillSpec::new(6517, 64, 512, 4);
        let k_spec = n_spec.with_visual_tokens(256);
        let ln = flops_layer(&n_spec);
        let lk = flops_layer(&k_spec);
        let ratios = [
            ln.projections as f64 / lk.projections as f64,
            ln.attention as f64 / lk.attention as f64,
            ln.ffn as f64 / lk.ffn as f64,
        ];
        let rep = speedup(&n_spec, &k_spec);
        let lo = ratios.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = ratios.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(rep.exact >= lo && rep.exact <= hi);
    }
}
