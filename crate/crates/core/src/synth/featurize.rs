use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::RawGrid;
use crate::error::{shape_err, Result};
use crate::params::normal;
use crate::tensor::Tensor;

/// Seed of the frozen patch projection. Part of the model definition, not of
/// any experiment, so it never follows `--seed`.
pub const FEATURIZER_SEED: u64 = 0xF00D_CAFE;
const PE_SCALE: f64 = 0.25;

/// `C × H' × W'` feature map with both token layouts precomputed.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// `C × N`, one row per channel.
    pub by_channel: Tensor,
    /// `N × C`, one row per spatial token.
    pub tokens: Tensor,
}

impl FeatureMap {
    pub fn from_channels(by_channel: Tensor, height: usize, width: usize) -> Result<Self> {
        let (c, n) = by_channel.expect_matrix()?;
        if n != height * width {
            return Err(shape_err!("{n} tokens for a {height}x{width} map"));
        }
        let tokens = by_channel.transpose()?;
        Ok(FeatureMap {
            channels: c,
            height,
            width,
            by_channel,
            tokens,
        })
    }

    pub fn n_tokens(&self) -> usize {
        self.height * self.width
    }

    /// `[C, H', W']` view of the data.
    pub fn as_tensor(&self) -> Tensor {
        self.by_channel
            .reshape(&[self.channels, self.height, self.width])
            .expect("consistent dims")
    }
}

/// Frozen patch embedding: seeded random projection plus sinusoidal positions.
#[derive(Clone, Debug)]
pub struct Featurizer {
    pub grid_size: usize,
    pub patch: usize,
    pub channels: usize,
    proj: Tensor,
    pos: Tensor,
}

impl Featurizer {
    pub fn new(grid_size: usize, patch: usize, channels: usize) -> Result<Self> {
        if patch == 0 || grid_size % patch != 0 {
            return Err(shape_err!("grid {grid_size} not divisible by patch {patch}"));
        }
        let side = grid_size / patch;
        let dim = patch * patch * 3;
        let mut rng = ChaCha8Rng::seed_from_u64(FEATURIZER_SEED);
        let proj = normal(&mut rng, &[channels, dim], 1.0 / (dim as f64).sqrt());
        let pos = positional_encoding(channels, side, side);
        Ok(Featurizer {
            grid_size,
            patch,
            channels,
            proj,
            pos,
        })
    }

    pub fn side(&self) -> usize {
        self.grid_size / self.patch
    }

    /// Positional term alone, `C × N`.
    pub fn positional(&self) -> &Tensor {
        &self.pos
    }

    pub fn featurize(&self, raw: &RawGrid) -> Result<FeatureMap> {
        if raw.size != self.grid_size {
            return Err(shape_err!(
                "grid of size {} given to a featurizer for {}",
                raw.size,
                self.grid_size
            ));
        }
        let (p, side) = (self.patch, self.side());
        let n = side * side;
        let dim = p * p * 3;
        let mut patches = Tensor::zeros(&[dim, n]);
        for pr in 0..side {
            for pc in 0..side {
                let token = pr * side + pc;
                for r in 0..p {
                    for c in 0..p {
                        let px = raw.px(pr * p + r, pc * p + c);
                        for (ch, v) in px.iter().enumerate() {
                            patches.set((r * p + c) * 3 + ch, token, *v as f64);
                        }
                    }
                }
            }
        }
        let mut z = self.proj.matmul(&patches)?;
        for (x, e) in z.data_mut().iter_mut().zip(self.pos.data()) {
            *x += e;
        }
        FeatureMap::from_channels(z, side, side)
    }
}

/// Half the channels encode the row, half the column, as sin/cos pairs.
fn positional_encoding(channels: usize, h: usize, w: usize) -> Tensor {
    let half = (channels / 2).max(1);
    let mut pe = Tensor::zeros(&[channels, h * w]);
    for c in 0..channels {
        let (axis_c, use_col) = if c < half { (c, false) } else { (c - half, true) };
        let pair = (axis_c / 2) as f64;
        let freq = 1.0 / 100f64.powf(2.0 * pair / half as f64);
        for r in 0..h {
            for col in 0..w {
                let pos = if use_col { col } else { r } as f64;
                let v = if axis_c % 2 == 0 {
                    (pos * freq).sin()
                } else {
                    (pos * freq).cos()
                };
                pe.set(c, r * w + col, PE_SCALE * v);
            }
        }
    }
    pe
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_arithmetic() {
        let f = Featurizer::new(32, 4, 64).unwrap();
        let z = f.featurize(&RawGrid::filled(32, 0.3)).unwrap();
        assert_eq!(z.as_tensor().shape(), &[64, 8, 8]);
        assert_eq!(z.tokens.shape(), &[64, 64]);
    }

    #[test]
    fn zero_image_gives_positional_encoding() {
        let f = Featurizer::new(32, 4, 64).unwrap();
        let z = f.featurize(&RawGrid::filled(32, 0.0)).unwrap();
        assert_eq!(&z.by_channel, f.positional());
    }

    #[test]
    fn frozen_and_deterministic() {
        let a = Featurizer::new(32, 4, 64).unwrap();
        let b = Featurizer::new(32, 4, 64).unwrap();
        let g = RawGrid::filled(32, 0.7);
        assert_eq!(a.featurize(&g).unwrap(), b.featurize(&g).unwrap());
    }

    #[test]
    fn indivisible_grid_is_shape_error() {
        assert!(Featurizer::new(30, 4, 64).is_err());
        let f = Featurizer::new(32, 4, 8).unwrap();
        assert!(f.featurize(&RawGrid::filled(16, 0.0)).is_err());
    }
}
