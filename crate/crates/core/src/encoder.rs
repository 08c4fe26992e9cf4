//! State embeddings, cosine similarity and the encoder backends.

use std::collections::HashMap;
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PoemError, Result};

/// A dense embedding vector. Entries are finite and the norm is positive.
///
/// Values are kept exactly as the backend returned them; normalization only
/// happens inside [`cosine_similarity`].
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(PoemError::invalid(
                "embedding must have at least one dimension",
            ));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(PoemError::invalid(format!(
                "embedding entry {pos} is not finite"
            )));
        }
        let emb = Embedding(values);
        if emb.norm() == 0.0 {
            return Err(PoemError::invalid("embedding has zero norm"));
        }
        Ok(emb)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

impl<'de> Deserialize<'de> for Embedding {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        let values = Vec::<f64>::deserialize(de)?;
        Embedding::new(values).map_err(serde::de::Error::custom)
    }
}

/// Cosine of the angle between `a` and `b`.
pub fn cosine_similarity(a: &Embedding, b: &Embedding) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(PoemError::invalid(format!(
            "dimension mismatch: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(PoemError::invalid("zero-norm vector in cosine similarity"));
    }
    let dot: f64 = a.0.iter().zip(&b.0).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// A text encoder. Implementations must be deterministic within a run and
/// return exactly one embedding per input text, in input order.
pub trait EncoderBackend: Send + Sync {
    fn id(&self) -> &str;

    fn encode(&self, texts: &[&str]) -> Result<Vec<Embedding>>;
}

impl<T: EncoderBackend + ?Sized> EncoderBackend for Box<T> {
    fn id(&self) -> &str {
        (**self).id()
    }

    fn encode(&self, texts: &[&str]) -> Result<Vec<Embedding>> {
        (**self).encode(texts)
    }
}

impl<T: EncoderBackend + ?Sized> EncoderBackend for std::sync::Arc<T> {
    fn id(&self) -> &str {
        (**self).id()
    }

    fn encode(&self, texts: &[&str]) -> Result<Vec<Embedding>> {
        (**self).encode(texts)
    }
}

/// Encodes a single query text into its state embedding.
pub fn encode_state<B: EncoderBackend + ?Sized>(text: &str, backend: &B) -> Result<Embedding> {
    if text.is_empty() {
        return Err(PoemError::invalid("cannot encode empty text"));
    }
    let mut out = backend.encode(&[text])?;
    if out.len() != 1 {
        return Err(PoemError::Protocol {
            backend: backend.id().to_string(),
            detail: format!("expected 1 embedding, got {}", out.len()),
        });
    }
    Ok(out.remove(0))
}

/// Offline deterministic encoder: every word unigram, word bigram and
/// character trigram is mapped to a pseudo-random direction derived from
/// `(seed, gram)`; the directions are summed and L2-normalized.
#[derive(Debug, Clone)]
pub struct HashEncoder {
    dim: usize,
    seed: u64,
    id: String,
}

pub fn hash_test_encoder(dim: usize, seed: u64) -> Result<HashEncoder> {
    if dim < 2 {
        return Err(PoemError::invalid(format!(
            "hash encoder needs dim >= 2, got {dim}"
        )));
    }
    Ok(HashEncoder {
        dim,
        seed,
        id: format!("hash(dim={dim},seed={seed})"),
    })
}

impl HashEncoder {
    pub fn dim(&self) -> usize {
        self.dim
    }

    fn grams(text: &str) -> Vec<String> {
        let lowered = text.to_lowercase();
        let words: Vec<&str> = lowered
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .collect();
        if words.is_empty() {
            return vec![format!("raw:{lowered}")];
        }
        let mut grams = Vec::with_capacity(words.len() * 4);
        for w in &words {
            grams.push(format!("w:{w}"));
            let padded: Vec<char> = format!("#{w}#").chars().collect();
            for tri in padded.windows(3) {
                grams.push(format!("c:{}", tri.iter().collect::<String>()));
            }
        }
        for pair in words.windows(2) {
            grams.push(format!("b:{} {}", pair[0], pair[1]));
        }
        grams
    }

    fn direction(&self, gram: &str, weight: f64, acc: &mut [f64]) {
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(gram.as_bytes()) ^ self.seed.rotate_left(17));
        for slot in acc.iter_mut() {
            *slot += weight * rng.random_range(-1.0..1.0);
        }
    }

    fn encode_one(&self, text: &str) -> Result<Embedding> {
        if text.is_empty() {
            return Err(PoemError::invalid("cannot encode empty text"));
        }
        let mut acc = vec![0.0; self.dim];
        for gram in Self::grams(text) {
            // character trigrams are down-weighted so that shared words dominate
            let weight = if gram.starts_with("c:") { 0.5 } else { 1.0 };
            self.direction(&gram, weight, &mut acc);
        }
        let norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(PoemError::invalid(format!(
                "text {text:?} hashed to a zero vector"
            )));
        }
        acc.iter_mut().for_each(|v| *v /= norm);
        Embedding::new(acc)
    }
}

impl EncoderBackend for HashEncoder {
    fn id(&self) -> &str {
        &self.id
    }

    fn encode(&self, texts: &[&str]) -> Result<Vec<Embedding>> {
        texts.iter().map(|t| self.encode_one(t)).collect()
    }
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Wraps a backend with an exact-text cache and enforces a single
/// embedding dimension across the run.
pub struct CachedEncoder<B> {
    inner: B,
    cache: Mutex<HashMap<String, Embedding>>,
    dim: Mutex<Option<usize>>,
}

impl<B: EncoderBackend> CachedEncoder<B> {
    pub fn new(inner: B) -> Self {
        CachedEncoder {
            inner,
            cache: Mutex::new(HashMap::new()),
            dim: Mutex::new(None),
        }
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }

    pub fn cached_len(&self) -> usize {
        self.cache.lock().expect("encoder cache poisoned").len()
    }

    fn check_dim(&self, emb: &Embedding) -> Result<()> {
        let mut dim = self.dim.lock().expect("encoder dim poisoned");
        match *dim {
            None => {
                *dim = Some(emb.dim());
                Ok(())
            }
            Some(d) if d == emb.dim() => Ok(()),
            Some(d) => Err(PoemError::Protocol {
                backend: self.inner.id().to_string(),
                detail: format!("embedding dim changed from {d} to {}", emb.dim()),
            }),
        }
    }
}

impl<B: EncoderBackend> EncoderBackend for CachedEncoder<B> {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn encode(&self, texts: &[&str]) -> Result<Vec<Embedding>> {
        let mut missing: Vec<&str> = {
            let cache = self.cache.lock().expect("encoder cache poisoned");
            texts
                .iter()
                .copied()
                .filter(|t| !cache.contains_key(*t))
                .collect()
        };
        missing.sort_unstable();
        missing.dedup();
        if !missing.is_empty() {
            let fresh = self.inner.encode(&missing)?;
            if fresh.len() != missing.len() {
                return Err(PoemError::Protocol {
                    backend: self.inner.id().to_string(),
                    detail: format!(
                        "requested {} embeddings, got {}",
                        missing.len(),
                        fresh.len()
                    ),
                });
            }
            for emb in &fresh {
                self.check_dim(emb)?;
            }
            let mut cache = self.cache.lock().expect("encoder cache poisoned");
            for (text, emb) in missing.into_iter().zip(fresh) {
                cache.insert(text.to_string(), emb);
            }
        }
        let cache = self.cache.lock().expect("encoder cache poisoned");
        Ok(texts.iter().map(|t| cache[*t].clone()).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn emb(v: &[f64]) -> Embedding {
        Embedding::new(v.to_vec()).unwrap()
    }

    #[test]
    fn cosine_examples() {
        let v = emb(&[0.3, -1.2, 4.0]);
        assert!((cosine_similarity(&v, &v).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(
            cosine_similarity(&emb(&[1.0, 0.0]), &emb(&[0.0, 1.0])).unwrap(),
            0.0
        );
        let c = cosine_similarity(&emb(&[1.0, 0.0]), &emb(&[1.0, 1.0])).unwrap();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-8);
    }

    #[test]
    fn cosine_rejects_dim_mismatch() {
        let err = cosine_similarity(&emb(&[1.0, 0.0]), &emb(&[1.0, 0.0, 0.0])).unwrap_err();
        assert!(matches!(err, PoemError::InvalidInput(_)));
    }

    #[test]
    fn embedding_rejects_zero_and_nan() {
        assert!(Embedding::new(vec![0.0, 0.0]).is_err());
        assert!(Embedding::new(vec![1.0, f64::NAN]).is_err());
        assert!(Embedding::new(vec![]).is_err());
        assert!(serde_json::from_str::<Embedding>("[0.0, 0.0]").is_err());
    }

    #[test]
    fn hash_encoder_is_deterministic() {
        let enc = hash_test_encoder(32, 7).unwrap();
        let a = encode_state("good movie", &enc).unwrap();
        let b = encode_state("good movie", &enc).unwrap();
        assert_eq!(a, b);
        let c = encode_state("terrible plot", &enc).unwrap();
        assert!(cosine_similarity(&a, &c).unwrap() < 1.0);
    }

    #[test]
    fn hash_encoder_seed_changes_output() {
        let one = encode_state("abc", &hash_test_encoder(16, 1).unwrap()).unwrap();
        let two = encode_state("abc", &hash_test_encoder(16, 2).unwrap()).unwrap();
        assert_ne!(one, two);
    }

    #[test]
    fn hash_encoder_near_duplicates_score_higher() {
        let enc = hash_test_encoder(64, 0).unwrap();
        let base = encode_state("the cat sat", &enc).unwrap();
        let near = encode_state("the cat sat.", &enc).unwrap();
        let near_sim = cosine_similarity(&base, &near).unwrap();
        for probe in [
            "stock prices fell sharply",
            "a rainy tuesday",
            "quantum field theory",
        ] {
            let other = encode_state(probe, &enc).unwrap();
            assert!(
                near_sim > cosine_similarity(&base, &other).unwrap(),
                "{probe}"
            );
        }
    }

    #[test]
    fn hash_encoder_guards() {
        assert!(hash_test_encoder(1, 0).is_err());
        let enc = hash_test_encoder(8, 0).unwrap();
        assert!(encode_state("", &enc).is_err());
        assert_eq!(enc.encode(&["a", "b", "c"]).unwrap().len(), 3);
    }

    #[test]
    fn cache_is_transparent() {
        let raw = hash_test_encoder(16, 3).unwrap();
        let cached = CachedEncoder::new(raw.clone());
        let texts = ["x y", "z", "x y"];
        let direct = raw.encode(&texts).unwrap();
        assert_eq!(cached.encode(&texts).unwrap(), direct);
        assert_eq!(cached.encode(&texts).unwrap(), direct);
        assert_eq!(cached.cached_len(), 2);
    }
}
