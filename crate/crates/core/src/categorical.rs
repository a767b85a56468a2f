//! Probability vectors over a token vocabulary.
//!
//! A [`Categorical`] is either a normalized distribution or a flagged zero
//! vector. Zero vectors are ordinary values: they show up when the target
//! equals the draft ([`ZeroKind::NoResidual`]) or when every token with mass
//! has been drawn at a tree position ([`ZeroKind::Exhausted`]). They can be
//! inspected but never sampled.
//!
//! Randomness is keyed rather than streamed. [`RandomKey`] maps
//! `(seed, position tag, sampling index)` to one uniform draw, so the k-th
//! sampling at a given tree position sees the same number no matter which
//! construction order reached it.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on the total mass of a freshly constructed distribution.
pub const NORMALIZATION_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenId(pub u32);

impl TokenId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl From<usize> for TokenId {
    fn from(i: usize) -> Self {
        TokenId(i as u32)
    }
}

impl fmt::Display for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Why a [`Categorical`] carries no mass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ZeroKind {
    /// `relu(T - D)` vanished because `T == D`.
    NoResidual,
    /// All tokens with positive mass were removed.
    Exhausted,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Categorical {
    probs: Vec<f64>,
    zero: Option<ZeroKind>,
}

impl Categorical {
    /// Builds a distribution from probabilities that already sum to one
    /// (within [`NORMALIZATION_TOL`]). The stored vector is renormalized.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        let total = check_weights(&probs)?;
        if (total - 1.0).abs() > NORMALIZATION_TOL {
            return Err(Error::InvalidDistribution(format!(
                "entries sum to {total}, expected 1"
            )));
        }
        Ok(Self::normalized(probs, total))
    }

    /// Normalizes arbitrary non-negative weights. All-zero input is an error.
    pub fn from_weights(weights: Vec<f64>) -> Result<Self> {
        let total = check_weights(&weights)?;
        if total <= 0.0 {
            return Err(Error::InvalidDistribution("all weights are zero".into()));
        }
        Ok(Self::normalized(weights, total))
    }

    pub fn point_mass(vocab: usize, token: TokenId) -> Result<Self> {
        if token.index() >= vocab {
            return Err(Error::TokenOutOfRange(token));
        }
        let mut probs = vec![0.0; vocab];
        probs[token.index()] = 1.0;
        Ok(Self { probs, zero: None })
    }

    pub fn uniform(vocab: usize) -> Result<Self> {
        if vocab == 0 {
            return Err(Error::Empty("vocabulary".into()));
        }
        Ok(Self {
            probs: vec![1.0 / vocab as f64; vocab],
            zero: None,
        })
    }

    pub fn zero(vocab: usize, kind: ZeroKind) -> Self {
        Self {
            probs: vec![0.0; vocab],
            zero: Some(kind),
        }
    }

    fn normalized(mut probs: Vec<f64>, total: f64) -> Self {
        for p in probs.iter_mut() {
            *p /= total;
        }
        Self { probs, zero: None }
    }

    #[inline]
    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    #[inline]
    pub fn prob(&self, token: TokenId) -> f64 {
        self.probs.get(token.index()).copied().unwrap_or(0.0)
    }

    #[inline]
    pub fn vocab_size(&self) -> usize {
        self.probs.len()
    }

    pub fn support_size(&self) -> usize {
        self.probs.iter().filter(|&&p| p > 0.0).count()
    }

    #[inline]
    pub fn is_zero(&self) -> bool {
        self.zero.is_some()
    }

    pub fn zero_kind(&self) -> Option<ZeroKind> {
        self.zero
    }

    /// Lowest index among the maximal entries.
    pub fn argmax(&self) -> TokenId {
        argmax_lowest(&self.probs).into()
    }

    /// Inverse-CDF sampling over the stored order with a uniform in `[0, 1)`.
    pub fn sample(&self, uniform: f64) -> Result<TokenId> {
        if self.is_zero() {
            return Err(Error::EmptySupport);
        }
        let mut cumulative = 0.0;
        let mut last_positive = None;
        for (i, &p) in self.probs.iter().enumerate() {
            if p <= 0.0 {
                continue;
            }
            cumulative += p;
            last_positive = Some(i);
            if uniform < cumulative {
                return Ok(i.into());
            }
        }
        // Rounding can leave the cumulative sum a hair below one.
        last_positive.map(TokenId::from).ok_or(Error::EmptySupport)
    }

    /// Zeroes `token` and renormalizes the remaining mass.
    ///
    /// Removing the last token with mass yields a [`ZeroKind::Exhausted`] vector.
    pub fn remove_and_renorm(&self, token: TokenId) -> Result<Categorical> {
        if self.is_zero() {
            return Err(Error::EmptySupport);
        }
        if token.index() >= self.probs.len() {
            return Err(Error::TokenOutOfRange(token));
        }
        let mut probs = self.probs.clone();
        probs[token.index()] = 0.0;
        let total: f64 = probs.iter().sum();
        if total <= 0.0 {
            return Ok(Categorical::zero(probs.len(), ZeroKind::Exhausted));
        }
        Ok(Self::normalized(probs, total))
    }
}

fn check_weights(weights: &[f64]) -> Result<f64> {
    if weights.is_empty() {
        return Err(Error::InvalidDistribution("empty vector".into()));
    }
    let mut total = 0.0;
    for (i, &w) in weights.iter().enumerate() {
        if !w.is_finite() || w < 0.0 {
            return Err(Error::InvalidDistribution(format!(
                "entry {i} is {w}, expected a finite non-negative value"
            )));
        }
        total += w;
    }
    Ok(total)
}

fn argmax_lowest(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// `softmax(logits / temp)`; `temp == 0` gives a one-hot at the argmax,
/// ties going to the lowest index.
pub fn softmax_with_temperature(logits: &[f64], temp: f64) -> Result<Categorical> {
    if logits.is_empty() {
        return Err(Error::Empty("logits".into()));
    }
    if let Some(i) = logits.iter().position(|l| !l.is_finite()) {
        return Err(Error::NonFiniteLogits(i));
    }
    if !temp.is_finite() || temp < 0.0 {
        return Err(Error::InvalidTemperature(temp));
    }
    if temp == 0.0 {
        return Categorical::point_mass(logits.len(), argmax_lowest(logits).into());
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits.iter().map(|&l| ((l - max) / temp).exp()).collect();
    Categorical::from_weights(weights)
}

/// `normalize(max(T - D, 0))`, the distribution a rejected draft falls back to.
pub fn residual_target(target: &Categorical, draft: &Categorical) -> Result<Categorical> {
    if target.vocab_size() != draft.vocab_size() {
        return Err(Error::VocabMismatch {
            expected: target.vocab_size(),
            found: draft.vocab_size(),
        });
    }
    let relu: Vec<f64> = target
        .probs
        .iter()
        .zip(&draft.probs)
        .map(|(t, d)| (t - d).max(0.0))
        .collect();
    let total: f64 = relu.iter().sum();
    if total <= 0.0 {
        return Ok(Categorical::zero(relu.len(), ZeroKind::NoResidual));
    }
    Ok(Categorical::normalized(relu, total))
}

/// Half the L1 distance between two distributions of equal size.
pub fn total_variation(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

/// Path-derived identifier of a tree position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PositionTag(pub u64);

impl PositionTag {
    /// FNV-1a over the token path, length included.
    pub fn from_path(path: &[TokenId]) -> Self {
        const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
        const PRIME: u64 = 0x0000_0100_0000_01b3;
        let mut h = OFFSET;
        for t in path {
            for b in t.0.to_le_bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(PRIME);
            }
        }
        for b in (path.len() as u64).to_le_bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(PRIME);
        }
        PositionTag(h)
    }
}

/// Key of a single uniform draw.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RandomKey {
    pub seed: u64,
    pub position_tag: PositionTag,
    pub sampling_index: u64,
}

impl RandomKey {
    pub fn new(seed: u64, position_tag: PositionTag, sampling_index: u64) -> Self {
        Self {
            seed,
            position_tag,
            sampling_index,
        }
    }

    /// Uniform in `[0, 1)`, a pure function of the key.
    pub fn uniform(&self) -> f64 {
        let mut bytes = [0u8; 32];
        bytes[..8].copy_from_slice(&self.seed.to_le_bytes());
        bytes[8..16].copy_from_slice(&self.position_tag.0.to_le_bytes());
        bytes[16..24].copy_from_slice(&self.sampling_index.to_le_bytes());
        bytes[24..].copy_from_slice(b"dyspec\0\0");
        ChaCha8Rng::from_seed(bytes).random::<f64>()
    }
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives an independent sub-seed from a base seed and a list of salts
/// (step number, trial index, purpose tag, ...).
pub fn derive_seed(base: u64, salts: &[u64]) -> u64 {
    let mut h = splitmix64(base);
    for &s in salts {
        h = splitmix64(h ^ splitmix64(s));
    }
    h
}

/// Sequential generator for places where draws are consumed in visit order.
pub fn stream_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn softmax_examples() {
        let d = softmax_with_temperature(&[0.0, 0.0], 1.0).unwrap();
        assert!(close(d.probs(), &[0.5, 0.5], 1e-15));

        let d = softmax_with_temperature(&[3.0, 1.0], 0.0).unwrap();
        assert_eq!(d.probs(), &[1.0, 0.0]);
        assert_eq!(d.support_size(), 1);

        let d = softmax_with_temperature(&[2f64.ln(), 0.0], 1.0).unwrap();
        assert!(close(d.probs(), &[2.0 / 3.0, 1.0 / 3.0], 1e-15));
    }

    #[test]
    fn softmax_zero_temp_ties_lowest_index() {
        let d = softmax_with_temperature(&[1.0, 5.0, 5.0], 0.0).unwrap();
        assert_eq!(d.argmax(), TokenId(1));
        assert_eq!(d.probs(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn softmax_rejects_bad_input() {
        assert_eq!(
            softmax_with_temperature(&[0.0, f64::NAN], 1.0),
            Err(Error::NonFiniteLogits(1))
        );
        assert!(softmax_with_temperature(&[0.0, f64::INFINITY], 1.0).is_err());
        assert!(softmax_with_temperature(&[0.0], -1.0).is_err());
    }

    #[test]
    fn sample_examples() {
        let d = Categorical::new(vec![1.0, 0.0, 0.0]).unwrap();
        for u in [0.0, 0.3, 0.999_999] {
            assert_eq!(d.sample(u).unwrap(), TokenId(0));
        }
        let d = Categorical::new(vec![0.5, 0.5]).unwrap();
        assert_eq!(d.sample(0.25).unwrap(), TokenId(0));
        let d = Categorical::new(vec![0.2, 0.3, 0.5]).unwrap();
        assert_eq!(d.sample(0.6).unwrap(), TokenId(2));
        assert_eq!(d.sample(0.45).unwrap(), TokenId(1));
    }

    #[test]
    fn sample_zero_vector_errors() {
        let z = Categorical::zero(3, ZeroKind::Exhausted);
        assert_eq!(z.sample(0.1), Err(Error::EmptySupport));
    }

    #[test]
    fn sample_never_returns_zero_mass_token() {
        let d = Categorical::new(vec![0.5, 0.5, 0.0]).unwrap();
        assert_eq!(d.sample(1.0 - f64::EPSILON).unwrap(), TokenId(1));
    }

    #[test]
    fn residual_examples() {
        let t = Categorical::new(vec![0.3, 0.7]).unwrap();
        let d = Categorical::new(vec![0.6, 0.4]).unwrap();
        let r = residual_target(&t, &d).unwrap();
        assert!(close(r.probs(), &[0.0, 1.0], 1e-15));

        let t = Categorical::new(vec![0.5, 0.5]).unwrap();
        let r = residual_target(&t, &t).unwrap();
        assert_eq!(r.zero_kind(), Some(ZeroKind::NoResidual));

        let t = Categorical::new(vec![0.5, 0.25, 0.25]).unwrap();
        let d = Categorical::new(vec![0.25, 0.5, 0.25]).unwrap();
        let r = residual_target(&t, &d).unwrap();
        assert!(close(r.probs(), &[1.0, 0.0, 0.0], 1e-15));
    }

    #[test]
    fn residual_vocab_mismatch() {
        let t = Categorical::new(vec![0.5, 0.5]).unwrap();
        let d = Categorical::new(vec![1.0, 0.0, 0.0]).unwrap();
        assert!(matches!(
            residual_target(&t, &d),
            Err(Error::VocabMismatch { .. })
        ));
    }

    #[test]
    fn remove_examples() {
        let d = Categorical::new(vec![0.5, 0.3, 0.2]).unwrap();
        let r = d.remove_and_renorm(TokenId(0)).unwrap();
        assert!(close(r.probs(), &[0.0, 0.6, 0.4], 1e-15));

        let d = Categorical::new(vec![1.0, 0.0]).unwrap();
        let r = d.remove_and_renorm(TokenId(0)).unwrap();
        assert_eq!(r.zero_kind(), Some(ZeroKind::Exhausted));

        let d = Categorical::new(vec![0.25, 0.25, 0.5]).unwrap();
        let r = d.remove_and_renorm(TokenId(2)).unwrap();
        assert!(close(r.probs(), &[0.5, 0.5, 0.0], 1e-15));
    }

    #[test]
    fn construction_tolerance() {
        assert!(Categorical::new(vec![0.5, 0.5 + 5e-10]).is_ok());
        assert!(Categorical::new(vec![0.5, 0.6]).is_err());
        assert!(Categorical::new(vec![-0.1, 1.1]).is_err());
        assert!(Categorical::from_weights(vec![0.0, 0.0]).is_err());
    }

    #[test]
    fn random_key_is_pure() {
        let k = RandomKey::new(7, PositionTag::from_path(&[TokenId(1), TokenId(2)]), 3);
        assert_eq!(k.uniform().to_bits(), k.uniform().to_bits());
        let other = RandomKey::new(7, PositionTag::from_path(&[TokenId(2), TokenId(1)]), 3);
        assert_ne!(k.uniform(), other.uniform());
        let u = k.uniform();
        assert!((0.0..1.0).contains(&u));
    }

    #[test]
    fn position_tag_distinguishes_length() {
        assert_ne!(
            PositionTag::from_path(&[]),
            PositionTag::from_path(&[TokenId(0)])
        );
        assert_ne!(
            PositionTag::from_path(&[TokenId(0)]),
            PositionTag::from_path(&[TokenId(0), TokenId(0)])
        );
    }

    #[test]
    fn derive_seed_separates_salts() {
        assert_ne!(derive_seed(1, &[0]), derive_seed(1, &[1]));
        assert_ne!(derive_seed(1, &[0, 1]), derive_seed(1, &[1, 0]));
        assert_eq!(derive_seed(9, &[4, 2]), derive_seed(9, &[4, 2]));
    }
}
