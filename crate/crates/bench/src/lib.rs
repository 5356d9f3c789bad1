//! Seeded inputs shared by the benchmarks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use iwin_core::layers::{AttentionParams, DepthwiseConvParams};
use iwin_core::{ParamStore, Result, Tensor};

/// A `(1, size, size, channels)` map of unit normals.
pub fn feature_map(size: usize, channels: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::randn(&[1, size, size, channels], 1.0, &mut rng)
}

pub fn attention(channels: usize, heads: usize, seed: u64) -> Result<(ParamStore, AttentionParams)> {
    let mut store = ParamStore::new(seed);
    let a = AttentionParams::new(&mut store, "attn", channels, heads)?;
    Ok((store, a))
}

pub fn depthwise(channels: usize, kernel: usize, seed: u64) -> Result<(ParamStore, DepthwiseConvParams)> {
    let mut store = ParamStore::new(seed);
    let c = DepthwiseConvParams::new(&mut store, "conv", channels, kernel, false)?;
    Ok((store, c))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixtures_are_seeded() {
        assert!(feature_map(8, 4, 1).bit_eq(&feature_map(8, 4, 1)));
        assert!(!feature_map(8, 4, 1).bit_eq(&feature_map(8, 4, 2)));
        assert!(attention(8, 2, 0).is_ok());
        assert!(depthwise(8, 4, 0).is_err());
    }
}
