use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{EncodeRequest, EncoderBackend};
use crate::error::{Error, Result};

/// Deterministic stand-in for a language model.
///
/// The text and template id seed a ChaCha8 stream that draws a base vector
/// `h` uniform in `[-1, 1]^dim`. With placeholders the output is
/// `normalize(0.5 h + 0.5 mean(placeholders))`, otherwise `normalize(h)`.
#[derive(Debug, Clone)]
pub struct MockBackend {
    dim: usize,
}

impl MockBackend {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "mock encoder dimension must be positive");
        Self { dim }
    }

    fn seed(template_id: &str, text: &str) -> u64 {
        let mut h = Sha256::new();
        h.update((template_id.len() as u64).to_le_bytes());
        h.update(template_id.as_bytes());
        h.update(text.as_bytes());
        u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
    }
}

impl EncoderBackend for MockBackend {
    fn name(&self) -> &str {
        "mock"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, req: &EncodeRequest<'_>) -> Result<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(Self::seed(req.template_id, req.text));
        let mut out: Vec<f64> = (0..self.dim).map(|_| rng.gen_range(-1.0..=1.0)).collect();
        if !req.placeholders.is_empty() {
            let n = req.placeholders.len() as f64;
            for p in req.placeholders {
                if p.len() != self.dim {
                    return Err(Error::Encoder(format!(
                        "placeholder of dimension {} for a {}-dimensional encoder",
                        p.len(),
                        self.dim
                    )));
                }
            }
            for (j, o) in out.iter_mut().enumerate() {
                let mean = req.placeholders.iter().map(|p| p[j]).sum::<f64>() / n;
                *o = 0.5 * *o + 0.5 * mean;
            }
        }
        let norm = out.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            out.iter_mut().for_each(|x| *x /= norm);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::Pooling;

    fn req<'a>(text: &'a str, ph: &'a [Vec<f64>]) -> EncodeRequest<'a> {
        EncodeRequest { template_id: "node_text", text, placeholders: ph, pooling: Pooling::Mean }
    }

    #[test]
    fn deterministic_unit_norm() {
        let b = MockBackend::new(16);
        let a = b.encode(&req("hello", &[])).unwrap();
        let c = b.encode(&req("hello", &[])).unwrap();
        assert_eq!(a, c);
        assert_eq!(a.len(), 16);
        let norm: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-9);
    }

    #[test]
    fn sensitive_to_placeholders() {
        let b = MockBackend::new(4);
        let p1 = vec![vec![1.0, 0.0, 0.0, 0.0]];
        let p2 = vec![vec![0.0, 1.0, 0.0, 0.0]];
        assert_ne!(b.encode(&req("x", &p1)).unwrap(), b.encode(&req("x", &p2)).unwrap());
    }

    #[test]
    fn placeholder_dimension_checked() {
        let b = MockBackend::new(4);
        assert!(b.encode(&req("x", &[vec![0.0; 3]])).is_err());
    }
}
