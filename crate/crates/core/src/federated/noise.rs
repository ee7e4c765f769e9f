use serde::{Deserialize, Serialize};

use super::UploadPayload;
use crate::error::{Error, Result};
use crate::tensor::Rng;

const NOISE_STREAM: u64 = 0x4E_4F_49_53;

/// Zero-mean Laplace perturbation of uploaded deltas.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    /// Laplace scale `s`; the per-entry variance is `2 s²`.
    pub strength: f64,
    pub seed: u64,
}

impl NoiseConfig {
    pub fn new(strength: f64, seed: u64) -> Result<Self> {
        if !(strength >= 0.0 && strength.is_finite()) {
            return Err(Error::Config(format!(
                "noise strength must be a finite value >= 0, got {strength}"
            )));
        }
        Ok(Self { strength, seed })
    }
}

/// What was added to a payload.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseRecord {
    pub strength: f64,
    pub draws: usize,
}

/// One Laplace(0, scale) draw by inverting the CDF.
pub fn laplace(rng: &mut Rng, scale: f64) -> f64 {
    // u in (-1/2, 1/2); the open lower end keeps the log finite
    let u = loop {
        let u = rng.next_f64() - 0.5;
        if u > -0.5 {
            break u;
        }
    };
    -scale * u.signum() * (1.0 - 2.0 * u.abs()).ln()
}

/// Adds independent Laplace noise to every delta entry. The stream depends
/// only on the noise seed, the round and the client, so results do not
/// depend on scheduling. Strength 0 returns the payload untouched.
pub fn add_dp_noise(mut payload: UploadPayload, noise: &NoiseConfig, round: usize) -> UploadPayload {
    if noise.strength == 0.0 {
        return payload;
    }
    let mut rng = Rng::stream(noise.seed, &[NOISE_STREAM, round as u64, payload.client as u64]);
    let mut draws = 0;
    for d in &mut payload.deltas {
        for v in &mut d.values {
            *v += laplace(&mut rng, noise.strength);
        }
        draws += d.values.len();
    }
    payload.noise = Some(NoiseRecord {
        strength: noise.strength,
        draws,
    });
    payload
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::federated::Delta;

    fn payload(values: Vec<f64>) -> UploadPayload {
        UploadPayload {
            client: 3,
            n_samples: 1,
            deltas: vec![Delta {
                name: "pos_emb".into(),
                values,
            }],
            assignments: vec![0],
            noise: None,
        }
    }

    #[test]
    fn zero_strength_is_identity() {
        let p = payload(vec![0.1, -2.0, 3.5]);
        let q = add_dp_noise(p.clone(), &NoiseConfig::new(0.0, 1).unwrap(), 4);
        assert_eq!(p, q);
    }

    #[test]
    fn moments_match_laplace() {
        let s = 0.3;
        let p = payload(vec![0.0; 1_000_000]);
        let q = add_dp_noise(p, &NoiseConfig::new(s, 11).unwrap(), 0);
        let v = &q.deltas[0].values;
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() <= 0.002, "{mean}");
        assert!((var / (2.0 * s * s) - 1.0).abs() <= 0.05, "{var}");
        assert_eq!(q.noise.unwrap().draws, 1_000_000);
    }

    #[test]
    fn deterministic_given_seed() {
        let cfg = NoiseConfig::new(0.2, 5).unwrap();
        let a = add_dp_noise(payload(vec![1.0; 10]), &cfg, 2);
        let b = add_dp_noise(payload(vec![1.0; 10]), &cfg, 2);
        let c = add_dp_noise(payload(vec![1.0; 10]), &cfg, 3);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn negative_strength_rejected() {
        assert!(NoiseConfig::new(-0.1, 0).is_err());
        assert!(NoiseConfig::new(f64::NAN, 0).is_err());
    }
}
