//! Frozen encoder frontend: turns a page image into visual tokens with an
//! explicit 2-D grid. A seeded random linear patch embedder stands in for a
//! pretrained vision tower; it is registered frozen and never trained.

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{matmul_nn, Array, ParamId, Params};

/// RGB page image with pixel values in [0, 1], row-major (y, x, channel).
#[derive(Debug, Clone, PartialEq)]
pub struct PageImage {
    pub height_px: usize,
    pub width_px: usize,
    pub pixels: Vec<f64>,
}

impl PageImage {
    pub fn new(height_px: usize, width_px: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != height_px * width_px * 3 {
            return Err(Error::Shape(format!(
                "image {height_px}x{width_px} needs {} pixel values, got {}",
                height_px * width_px * 3,
                pixels.len()
            )));
        }
        Ok(PageImage { height_px, width_px, pixels })
    }

    pub fn filled(height_px: usize, width_px: usize, rgb: [f64; 3]) -> Self {
        let mut pixels = Vec::with_capacity(height_px * width_px * 3);
        for _ in 0..height_px * width_px {
            pixels.extend_from_slice(&rgb);
        }
        PageImage { height_px, width_px, pixels }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width_px + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        let i = (y * self.width_px + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }
}

/// Encoder output: an N x D token matrix plus the grid it was cut from.
#[derive(Debug, Clone)]
pub struct VisualTokens {
    pub tokens: Array,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl VisualTokens {
    pub fn count(&self) -> usize {
        self.tokens.shape[0]
    }

    pub fn dim(&self) -> usize {
        self.tokens.shape[1]
    }
}

/// Frozen patch encoder: non-overlapping p x p patches, a fixed linear
/// projection, fixed positional offsets.
#[derive(Debug, Clone)]
pub struct FrozenEncoder {
    pub patch_size: usize,
    pub dim: usize,
    pub max_grid_h: usize,
    pub max_grid_w: usize,
    proj: ParamId,
    pos: ParamId,
}

pub const PROJ_NAME: &str = "enc.proj";
pub const POS_NAME: &str = "enc.pos";

impl FrozenEncoder {
    /// Seeded init: projection ~ N(0, 1/sqrt(3 p^2)), positions ~ N(0, 0.02).
    /// Both are registered non-trainable.
    pub fn init(
        params: &mut Params,
        seed: u64,
        patch_size: usize,
        dim: usize,
        max_grid_h: usize,
        max_grid_w: usize,
    ) -> Result<Self> {
        let mut r = rng::seeded(seed);
        let in_dim = 3 * patch_size * patch_size;
        let proj_std = 1.0 / (in_dim as f64).sqrt();
        let proj = Array::randn(&[in_dim, dim], 0.0, proj_std, &mut r);
        let pos = Array::randn(&[max_grid_h * max_grid_w, dim], 0.0, 0.02, &mut r);
        let proj = params.insert(PROJ_NAME, proj, false, true)?;
        let pos = params.insert(POS_NAME, pos, false, true)?;
        Ok(FrozenEncoder { patch_size, dim, max_grid_h, max_grid_w, proj, pos })
    }

    /// Re-attach to weights already present in `params` (checkpoint load).
    pub fn from_params(
        params: &Params,
        patch_size: usize,
        dim: usize,
        max_grid_h: usize,
        max_grid_w: usize,
    ) -> Result<Self> {
        let proj = params.id(PROJ_NAME)?;
        let pos = params.id(POS_NAME)?;
        let want = vec![3 * patch_size * patch_size, dim];
        if params.get(proj).value.shape != want {
            return Err(Error::Shape(format!(
                "encoder projection shape {:?} does not match config {:?}",
                params.get(proj).value.shape,
                want
            )));
        }
        Ok(FrozenEncoder { patch_size, dim, max_grid_h, max_grid_w, proj, pos })
    }

    /// Cut the image into p x p patches (flattened row-major as (y, x, rgb)),
    /// project each to D dims and add the positional offset for its grid slot.
    pub fn encode(&self, params: &Params, img: &PageImage) -> Result<VisualTokens> {
        let p = self.patch_size;
        if img.height_px % p != 0 || img.width_px % p != 0 {
            return Err(Error::Config(format!(
                "image {}x{} not divisible by patch size {p}",
                img.height_px, img.width_px
            )));
        }
        let grid_h = img.height_px / p;
        let grid_w = img.width_px / p;
        if grid_h > self.max_grid_h || grid_w > self.max_grid_w {
            return Err(Error::Config(format!(
                "grid {grid_h}x{grid_w} exceeds encoder maximum {}x{}",
                self.max_grid_h, self.max_grid_w
            )));
        }
        let n = grid_h * grid_w;
        let in_dim = 3 * p * p;
        let proj = &params.get(self.proj).value;
        let pos = &params.get(self.pos).value;

        let mut patches = vec![0.0; n * in_dim];
        for gy in 0..grid_h {
            for gx in 0..grid_w {
                let row = &mut patches[(gy * grid_w + gx) * in_dim..(gy * grid_w + gx + 1) * in_dim];
                let mut k = 0;
                for py in 0..p {
                    for px in 0..p {
                        let rgb = img.get(gy * p + py, gx * p + px);
                        row[k..k + 3].copy_from_slice(&rgb);
                        k += 3;
                    }
                }
            }
        }
        let mut tokens = vec![0.0; n * self.dim];
        matmul_nn(&patches, &proj.data, n, in_dim, self.dim, &mut tokens);
        for t in 0..n {
            for d in 0..self.dim {
                tokens[t * self.dim + d] += pos.data[t * self.dim + d];
            }
        }
        Ok(VisualTokens {
            tokens: Array { shape: vec![n, self.dim], data: tokens },
            grid_h,
            grid_w,
        })
    }
}

/// Average-pool each factor x factor pixel block; the token count after
/// `encode` shrinks by factor^2.
pub fn resolution_scale(img: &PageImage, factor: usize) -> Result<PageImage> {
    if factor == 0 {
        return Err(Error::Config("resolution_scale: factor must be positive".into()));
    }
    if img.height_px % factor != 0 || img.width_px % factor != 0 {
        return Err(Error::Config(format!(
            "image {}x{} not divisible by scale factor {factor}",
            img.height_px, img.width_px
        )));
    }
    if factor == 1 {
        return Ok(img.clone());
    }
    let h = img.height_px / factor;
    let w = img.width_px / factor;
    let mut pixels = vec![0.0; h * w * 3];
    let area = (factor * factor) as f64;
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0; 3];
            for dy in 0..factor {
                for dx in 0..factor {
                    let rgb = img.get(y * factor + dy, x * factor + dx);
                    for c in 0..3 {
                        acc[c] += rgb[c];
                    }
                }
            }
            for c in 0..3 {
                pixels[(y * w + x) * 3 + c] = acc[c] / area;
            }
        }
    }
    Ok(PageImage { height_px: h, width_px: w, pixels })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup(seed: u64) -> (Params, FrozenEncoder) {
        let mut params = Params::new();
        let enc = FrozenEncoder::init(&mut params, seed, 4, 8, 16, 16).unwrap();
        (params, enc)
    }

    #[test]
    fn grid_dims_from_image() {
        let (params, enc) = setup(1);
        let img = PageImage::filled(32, 32, [0.5, 0.5, 0.5]);
        let vt = enc.encode(&params, &img).unwrap();
        assert_eq!(vt.count(), 64);
        assert_eq!((vt.grid_h, vt.grid_w), (8, 8));
    }

    #[test]
    fn zero_image_yields_positional_offsets() {
        let (params, enc) = setup(2);
        let img = PageImage::filled(16, 16, [0.0, 0.0, 0.0]);
        let vt = enc.encode(&params, &img).unwrap();
        let pos = &params.by_name(POS_NAME).unwrap().value;
        for t in 0..vt.count() {
            for d in 0..vt.dim() {
                assert_eq!(vt.tokens.data[t * 8 + d], pos.data[t * 8 + d]);
            }
        }
    }

    #[test]
    fn frozen_and_deterministic() {
        let (params_a, enc_a) = setup(3);
        let (params_b, enc_b) = setup(3);
        assert_eq!(
            params_a.by_name(PROJ_NAME).unwrap().value,
            params_b.by_name(PROJ_NAME).unwrap().value
        );
        assert!(!params_a.by_name(PROJ_NAME).unwrap().trainable);
        assert!(!params_a.by_name(POS_NAME).unwrap().trainable);

        let (params_c, _) = setup(4);
        assert_ne!(
            params_a.by_name(PROJ_NAME).unwrap().value,
            params_c.by_name(PROJ_NAME).unwrap().value
        );

        let img = PageImage::filled(16, 16, [0.3, 0.6, 0.9]);
        let one = enc_a.encode(&params_a, &img).unwrap();
        let two = enc_b.encode(&params_b, &img).unwrap();
        assert_eq!(one.tokens, two.tokens);
    }

    #[test]
    fn encode_rejects_indivisible_image() {
        let (params, enc) = setup(5);
        let img = PageImage::filled(30, 32, [0.0; 3]);
        assert!(enc.encode(&params, &img).is_err());
    }

    #[test]
    fn resolution_scale_examples() {
        let img = PageImage::filled(32, 32, [0.25, 0.5, 0.75]);
        let same = resolution_scale(&img, 1).unwrap();
        assert_eq!(same, img);

        let half = resolution_scale(&img, 2).unwrap();
        assert_eq!((half.height_px, half.width_px), (16, 16));
        assert_eq!(half.get(3, 7), [0.25, 0.5, 0.75]);

        let (params, enc) = setup(6);
        let n_full = enc.encode(&params, &img).unwrap().count();
        let n_half = enc.encode(&params, &half).unwrap().count();
        assert_eq!(n_full, 64);
        assert_eq!(n_half, n_full / 4);

        assert!(resolution_scale(&img, 3).is_err());
    }
}
