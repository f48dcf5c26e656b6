//! Patch-token vision transformer for RGB images.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::RgbImage;
use crate::error::{Error, Result};
use crate::features::FeatureGrid;
use crate::nn::{BlockSpec, Linear, TransformerBlock};
use crate::params::{Binder, ParamGroup, ParamId, ParamStore};
use crate::tensor::Mat;

#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub tokens: Mat,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RgbEncoderConfig {
    pub patch: usize,
    /// Image side the positional embedding is laid out for.
    pub image_size: usize,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub taps: Vec<usize>,
    pub init_std: f64,
}

impl Default for RgbEncoderConfig {
    fn default() -> Self {
        RgbEncoderConfig {
            patch: 8,
            image_size: 32,
            width: 96,
            depth: 12,
            heads: 4,
            taps: vec![3, 7, 11],
            init_std: 0.02,
        }
    }
}

impl RgbEncoderConfig {
    pub fn out_dim(&self) -> usize {
        self.width * self.taps.len()
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.image_size % self.patch != 0 {
            return Err(Error::config("rgb.patch", "patch must divide image_size"));
        }
        if self.taps.is_empty() || self.taps.iter().any(|&t| t >= self.depth) {
            return Err(Error::config(
                "rgb.taps",
                format!("taps must be non-empty block indices below {}", self.depth),
            ));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::config("rgb.heads", "width must be divisible by heads"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct RgbEncoder {
    cfg: RgbEncoderConfig,
    embed: Linear,
    pos: ParamId,
    blocks: Vec<TransformerBlock>,
}

impl RgbEncoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: RgbEncoderConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let g = ParamGroup::Frozen;
        let input = cfg.patch * cfg.patch * 3;
        let embed = Linear::fan_in(store, "rgb_encoder.embed", input, cfg.width, g, rng);
        let n = cfg.grid() * cfg.grid();
        let pos = store.randn("rgb_encoder.pos", n, cfg.width, 0.5, g, rng);
        let spec = BlockSpec {
            width: cfg.width,
            heads: cfg.heads,
            mlp_ratio: 4,
            init_std: cfg.init_std,
        };
        let blocks = (0..cfg.depth)
            .map(|i| TransformerBlock::new(store, &format!("rgb_encoder.block{i}"), spec, g, rng))
            .collect();
        Ok(RgbEncoder { cfg, embed, pos, blocks })
    }

    pub fn config(&self) -> &RgbEncoderConfig {
        &self.cfg
    }

    /// Flattens non-overlapping patches (row-major pixels, RGB interleaved,
    /// centered at 0.5) and embeds them.
    pub fn patchify(&self, store: &ParamStore, img: &RgbImage) -> Result<TokenSequence> {
        let p = self.cfg.patch;
        if img.height % p != 0 || img.width % p != 0 {
            return Err(Error::invalid(format!(
                "patch {p} does not divide {}x{}",
                img.height, img.width
            )));
        }
        let (rows, cols) = (img.height / p, img.width / p);
        if rows * cols != store.get(self.pos).rows() {
            return Err(Error::shape(format!(
                "{rows}x{cols} patches but positional embedding for {} tokens",
                store.get(self.pos).rows()
            )));
        }
        let mut flat = Mat::zeros(rows * cols, p * p * 3);
        for pr in 0..rows {
            for pc in 0..cols {
                let row = flat.row_mut(pr * cols + pc);
                let mut k = 0;
                for r in 0..p {
                    for c in 0..p {
                        for v in img.px(pr * p + r, pc * p + c) {
                            row[k] = v - 0.5;
                            k += 1;
                        }
                    }
                }
            }
        }
        let mut b = Binder::inference(store);
        let x = b.graph.constant(flat);
        let e = self.embed.forward(&mut b, x);
        let pos = b.param(self.pos);
        let t = b.graph.add(e, pos);
        Ok(TokenSequence {
            tokens: b.graph.value(t).clone(),
            rows,
            cols,
        })
    }

    pub fn encode(&self, store: &ParamStore, ts: &TokenSequence) -> FeatureGrid {
        let mut b = Binder::inference(store);
        let mut x = b.graph.constant(ts.tokens.clone());
        let mut outputs = Vec::with_capacity(self.blocks.len());
        for blk in &self.blocks {
            x = blk.forward(&mut b, x);
            outputs.push(x);
        }
        let tapped: Vec<_> = self.cfg.taps.iter().map(|&t| outputs[t]).collect();
        let f = b.graph.concat_cols(&tapped);
        FeatureGrid::new(ts.rows, ts.cols, b.graph.value(f).clone())
    }

    pub fn extract(&self, store: &ParamStore, img: &RgbImage) -> Result<FeatureGrid> {
        Ok(self.encode(store, &self.patchify(store, img)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small(taps: Vec<usize>) -> RgbEncoderConfig {
        RgbEncoderConfig {
            width: 48,
            depth: 3,
            taps,
            ..Default::default()
        }
    }

    fn image(seed: u64) -> RgbImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RgbImage {
            height: 32,
            width: 32,
            pixels: (0..32 * 32 * 3).map(|_| rng.random::<f64>()).collect(),
        }
    }

    #[test]
    fn patchify_shapes_and_locality() {
        let mut store = ParamStore::new();
        let enc = RgbEncoder::new(&mut store, small(vec![2]), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let img = image(1);
        let ts = enc.patchify(&store, &img).unwrap();
        assert_eq!((ts.rows, ts.cols, ts.tokens.rows()), (4, 4, 16));

        let mut other = img.clone();
        other.set_px(9, 17, [0.0, 1.0, 0.0]);
        let ts2 = enc.patchify(&store, &other).unwrap();
        for t in 0..16 {
            let same = ts.tokens.row(t) == ts2.tokens.row(t);
            assert_eq!(same, t != 4 + 2, "token {t}");
        }

        let bad = RgbImage::filled(30, 32, 0.5);
        assert!(enc.patchify(&store, &bad).is_err());
    }

    #[test]
    fn mid_gray_with_zero_bias_gives_positional_embedding() {
        let mut store = ParamStore::new();
        let enc = RgbEncoder::new(&mut store, small(vec![2]), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        // Patch values are centered at 0.5, so a mid-gray image is the zero input.
        let ts = enc.patchify(&store, &RgbImage::filled(32, 32, 0.5)).unwrap();
        assert_eq!(&ts.tokens, store.get(enc.pos));
    }

    #[test]
    fn tap_widths_and_determinism() {
        let mut store = ParamStore::new();
        let enc = RgbEncoder::new(&mut store, small(vec![2]), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(enc.extract(&store, &image(2)).unwrap().dim(), 48);

        let mut store = ParamStore::new();
        let enc = RgbEncoder::new(&mut store, small(vec![1, 2]), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let a = enc.extract(&store, &image(2)).unwrap();
        assert_eq!((a.rows, a.cols, a.dim()), (4, 4, 96));
        assert_eq!(a, enc.extract(&store, &image(2)).unwrap());
    }

    #[test]
    fn output_is_continuous() {
        let mut store = ParamStore::new();
        let enc = RgbEncoder::new(&mut store, small(vec![1, 2]), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut worst: f64 = 0.0;
        for trial in 0..5 {
            let img = image(10 + trial);
            let base = enc.extract(&store, &img).unwrap();
            let dir: Vec<f64> = (0..img.pixels.len()).map(|_| rng.random::<f64>() - 0.5).collect();
            let mut prev = 0.0;
            for scale in [1e-4, 1e-3, 1e-2] {
                let mut moved = img.clone();
                moved.pixels.iter_mut().zip(&dir).for_each(|(p, d)| *p += scale * d);
                let out = enc.extract(&store, &moved).unwrap();
                let d_out = out.features.zip_map(&base.features, |a, b| a - b).frobenius();
                let d_in = scale * dir.iter().map(|d| d * d).sum::<f64>().sqrt();
                assert!(d_out >= prev, "output change shrinks as input change grows");
                prev = d_out;
                worst = worst.max(d_out / d_in);
            }
        }
        eprintln!("measured Lipschitz ratio {worst:.3}");
        assert!(worst.is_finite() && worst < 1e3);
    }
}
