//! Activation blinding for forward requests.
//!
//! The client adds a random matrix `n` to a layer input before sending it.
//! Because every base layer is affine, the executor's reply is
//! `(x + n)W + b = (xW + b) + nW`, so subtracting the precomputed, bias-free
//! effect `nW` recovers the plain output exactly up to rounding.
//! Backward requests are not blinded.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{LayerAddress, ModelConfig};
use crate::protocol::Pass;
use crate::tensor::{Tensor, TensorError};
use crate::transport::{LayerTransport, TransportError};

/// Largest accepted gap between a precomputed noise effect and the effect
/// re-derived from two plain forward requests.
pub const EFFECT_TOLERANCE: f32 = 1e-5;

#[derive(Debug, Error)]
pub enum PrivacyError {
    #[error("privacy config: {0}")]
    Config(String),
    #[error("{layer}: noise effect off by {error:e} from its re-derived value")]
    EffectMismatch { layer: LayerAddress, error: f32 },
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrivacyConfig {
    pub enabled: bool,
    /// Noise matrices per layer.
    pub k: usize,
    /// Noise is uniform in `[-scale, scale]`.
    pub scale: f32,
    pub seed: u64,
}

impl Default for PrivacyConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            k: 2,
            scale: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseEntry {
    /// `[t_max, d_in]`
    pub noise: Tensor,
    /// `[t_max, d_out]`, equal to `noise · W` without bias.
    pub effect: Tensor,
}

/// Per-layer noise matrices and their effects, owned by one client.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSet {
    t_max: usize,
    seed: u64,
    layers: BTreeMap<LayerAddress, Vec<NoiseEntry>>,
}

impl NoiseSet {
    pub fn new(t_max: usize, seed: u64, layers: BTreeMap<LayerAddress, Vec<NoiseEntry>>) -> Self {
        Self { t_max, seed, layers }
    }

    pub fn t_max(&self) -> usize {
        self.t_max
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn covers(&self, layer: LayerAddress) -> bool {
        self.layers.contains_key(&layer)
    }

    pub fn entries(&self, layer: LayerAddress) -> Option<&[NoiseEntry]> {
        self.layers.get(&layer).map(Vec::as_slice)
    }

    pub fn layers(&self) -> impl Iterator<Item = LayerAddress> + '_ {
        self.layers.keys().copied()
    }

    pub fn nbytes(&self) -> u64 {
        self.layers
            .values()
            .flatten()
            .map(|e| e.noise.nbytes() + e.effect.nbytes())
            .sum()
    }
}

fn mix(mut z: u64) -> u64 {
    // splitmix64 finalizer
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn layer_key(layer: LayerAddress) -> u64 {
    (u64::from(layer.block) << 8) | u64::from(layer.role.code())
}

/// Index of the noise matrix `layer` uses in `iteration`. Deterministic in
/// `(seed, layer, iteration)`; different layers pick independently.
pub fn rotate(seed: u64, layer: LayerAddress, iteration: u64, k: usize) -> usize {
    if k <= 1 {
        return 0;
    }
    let h = mix(mix(seed ^ mix(layer_key(layer))) ^ iteration);
    (h % k as u64) as usize
}

/// Draws noise matrix `index` for `layer`, uniform in `±scale`.
pub fn draw_noise(layer: LayerAddress, index: usize, rows: usize, cols: usize, scale: f32, seed: u64) -> Tensor {
    if scale == 0.0 {
        return Tensor::zeros(&[rows, cols]);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed ^ mix(layer_key(layer))));
    rng.set_stream(index as u64);
    let data = (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor::new(vec![rows, cols], data).expect("shape matches data")
}

/// Draws `k` noise matrices per layer and obtains their effects from the
/// executor's bias-free path.
///
/// Each effect is checked against a second, independent route: the plain
/// forward of the noise minus the plain forward of a zero row (the bias).
pub fn precompute_noise(
    transport: &mut dyn LayerTransport,
    config: &ModelConfig,
    layers: &[LayerAddress],
    t_max: usize,
    params: &PrivacyConfig,
) -> Result<NoiseSet, PrivacyError> {
    if params.k == 0 {
        return Err(PrivacyError::Config("k must be at least 1".into()));
    }
    if !(params.scale >= 0.0 && params.scale.is_finite()) {
        return Err(PrivacyError::Config(format!("invalid noise scale {}", params.scale)));
    }
    let mut out = BTreeMap::new();
    for &layer in layers {
        let (d_in, _) = config.dims(layer.role);
        let bias = transport.call(layer, Pass::Forward, &Tensor::zeros(&[1, d_in]))?;
        let mut entries = Vec::with_capacity(params.k);
        for i in 0..params.k {
            let noise = draw_noise(layer, i, t_max, d_in, params.scale, params.seed);
            let effect = transport.call(layer, Pass::NoiseEffect, &noise)?;
            let plain = transport.call(layer, Pass::Forward, &noise)?;
            let mut error = 0.0f32;
            for r in 0..t_max {
                for ((p, b), e) in plain.row(r).iter().zip(bias.row(0)).zip(effect.row(r)) {
                    error = error.max(((p - b) - e).abs());
                }
            }
            if error > EFFECT_TOLERANCE {
                return Err(PrivacyError::EffectMismatch { layer, error });
            }
            entries.push(NoiseEntry { noise, effect });
        }
        out.insert(layer, entries);
    }
    Ok(NoiseSet::new(t_max, params.seed, out))
}

/// Adds noise `index` to `x`, truncated to `x`'s row count.
pub fn blind(x: &Tensor, entry: &NoiseEntry) -> Result<Tensor, TensorError> {
    x.add(&entry.noise.slice_rows(0, x.rows())?)
}

/// Sends `x + n` for `layer` and returns `y_noisy − n_effect`.
pub fn blind_forward(
    transport: &mut dyn LayerTransport,
    layer: LayerAddress,
    x: &Tensor,
    noise: &NoiseSet,
    iteration: u64,
) -> Result<Tensor, PrivacyError> {
    let entries = noise
        .entries(layer)
        .ok_or_else(|| PrivacyError::Config(format!("no noise for {layer}")))?;
    if x.rows() > noise.t_max() {
        return Err(PrivacyError::Config(format!(
            "{layer}: {} tokens exceed noise rows {}",
            x.rows(),
            noise.t_max()
        )));
    }
    let entry = &entries[rotate(noise.seed(), layer, iteration, entries.len())];
    let sent = blind(x, entry)?;
    let y_noisy = transport.call(layer, Pass::Forward, &sent)?;
    Ok(y_noisy.sub(&entry.effect.slice_rows(0, x.rows())?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Role;

    #[test]
    fn rotation_is_deterministic_and_balanced() {
        let l = LayerAddress::new(1, Role::V);
        assert!((0..50).all(|i| rotate(7, l, i, 1) == 0));
        let a: Vec<_> = (0..100).map(|i| rotate(7, l, i, 4)).collect();
        let b: Vec<_> = (0..100).map(|i| rotate(7, l, i, 4)).collect();
        assert_eq!(a, b);
        let mut counts = [0usize; 4];
        for i in 0..1000 {
            counts[rotate(7, l, i, 4)] += 1;
        }
        for c in counts {
            let f = c as f64 / 1000.0;
            assert!((f - 0.25).abs() <= 0.05, "{counts:?}");
        }
    }

    #[test]
    fn layers_rotate_independently() {
        let a = LayerAddress::new(0, Role::Q);
        let b = LayerAddress::new(0, Role::K);
        let differs = (0..64).any(|i| rotate(3, a, i, 4) != rotate(3, b, i, 4));
        assert!(differs);
    }

    #[test]
    fn noise_draws_depend_on_seed_and_index() {
        let l = LayerAddress::new(0, Role::Q);
        let n1 = draw_noise(l, 0, 4, 8, 1.0, 1);
        assert!(n1.bitwise_eq(&draw_noise(l, 0, 4, 8, 1.0, 1)));
        assert!(!n1.bitwise_eq(&draw_noise(l, 0, 4, 8, 1.0, 2)));
        assert!(!n1.bitwise_eq(&draw_noise(l, 1, 4, 8, 1.0, 1)));
        assert!(n1.data().iter().all(|v| v.abs() <= 1.0));
        assert!(draw_noise(l, 0, 2, 3, 0.0, 1).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn blinded_payload_differs_everywhere() {
        let l = LayerAddress::new(0, Role::FfUp);
        let x = draw_noise(l, 9, 64, 64, 1.0, 99);
        let entry = NoiseEntry {
            noise: draw_noise(l, 0, 64, 64, 1.0, 5),
            effect: Tensor::zeros(&[64, 1]),
        };
        let sent = blind(&x, &entry).unwrap();
        let changed = sent.data().iter().zip(x.data()).filter(|(a, b)| a != b).count();
        assert!(changed as f64 / x.len() as f64 >= 0.99);
    }
}
