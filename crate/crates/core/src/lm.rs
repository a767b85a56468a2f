//! Conditional next-token models.
//!
//! The synthetic family here stands in for real draft/target checkpoints:
//! an order-n Markov table whose rows are Dirichlet draws, and a draft
//! derived from it by adding keyed Gaussian noise to the logits. The noise
//! scale controls how far the draft strays from the target.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::categorical::{
    derive_seed, softmax_with_temperature, Categorical, PositionTag, TokenId,
};
use crate::error::{Error, Result};
use crate::token_tree::{PositionMap, TokenTree};

/// Largest `rows * vocab` table that is materialized up front.
const MAX_TABLE_ENTRIES: usize = 1 << 22;

/// Salt separating draft noise seeds from target seeds.
const DRAFT_SALT: u64 = 0x0064_7261_6674;

pub trait LanguageModel: Send + Sync {
    fn vocab_size(&self) -> usize;

    /// Raw logits for the token following `context`. Pure in `context`.
    fn next_logits(&self, context: &[TokenId]) -> Vec<f64>;

    /// Number of trailing tokens the model conditions on, if bounded.
    fn context_window(&self) -> Option<usize> {
        None
    }

    fn next_distribution(&self, context: &[TokenId], temp: f64) -> Result<Categorical> {
        softmax_with_temperature(&self.next_logits(context), temp)
    }
}

impl<M: LanguageModel + ?Sized> LanguageModel for Arc<M> {
    fn vocab_size(&self) -> usize {
        (**self).vocab_size()
    }
    fn next_logits(&self, context: &[TokenId]) -> Vec<f64> {
        (**self).next_logits(context)
    }
    fn context_window(&self) -> Option<usize> {
        (**self).context_window()
    }
}

/// A model paired with the temperature it is queried at.
#[derive(Clone, Copy)]
pub struct Tempered<'a> {
    pub model: &'a dyn LanguageModel,
    pub temp: f64,
}

impl<'a> Tempered<'a> {
    pub fn new(model: &'a dyn LanguageModel, temp: f64) -> Self {
        Self { model, temp }
    }

    pub fn distribution(&self, context: &[TokenId]) -> Result<Categorical> {
        self.model.next_distribution(context, self.temp)
    }

    pub fn vocab_size(&self) -> usize {
        self.model.vocab_size()
    }
}

fn default_concentration() -> f64 {
    0.3
}
fn default_draft_temp() -> f64 {
    0.6
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelPairSpec {
    pub vocab_size: usize,
    #[serde(default = "one")]
    pub markov_order: usize,
    pub target_seed: u64,
    /// Defaults to a value derived from `target_seed`.
    #[serde(default)]
    pub draft_seed: Option<u64>,
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default = "default_concentration")]
    pub concentration: f64,
    #[serde(default = "default_draft_temp")]
    pub draft_temp: f64,
    #[serde(default)]
    pub target_temp: f64,
}

fn one() -> usize {
    1
}

impl ModelPairSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::InvalidParameter(
                "vocab_size must be at least 2".into(),
            ));
        }
        if self.markov_order < 1 {
            return Err(Error::InvalidParameter(
                "markov_order must be at least 1".into(),
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::InvalidParameter("noise_sigma must be >= 0".into()));
        }
        if !(self.concentration > 0.0 && self.concentration.is_finite()) {
            return Err(Error::InvalidParameter("concentration must be > 0".into()));
        }
        for (name, t) in [
            ("draft_temp", self.draft_temp),
            ("target_temp", self.target_temp),
        ] {
            if !(t >= 0.0 && t.is_finite()) {
                return Err(Error::InvalidParameter(format!("{name} must be >= 0")));
            }
        }
        Ok(())
    }

    pub fn draft_seed(&self) -> u64 {
        self.draft_seed
            .unwrap_or_else(|| derive_seed(self.target_seed, &[DRAFT_SALT]))
    }

    /// Builds the target table model and the noisy draft derived from it.
    pub fn build(&self) -> Result<(Arc<MarkovLm>, DraftLm)> {
        self.validate()?;
        let target = Arc::new(make_markov_lm(self)?);
        let draft = derive_draft(target.clone(), self.noise_sigma, self.draft_seed())?;
        Ok((target, draft))
    }
}

/// Last `window` tokens of `context`, left-padded with token 0.
fn context_key(context: &[TokenId], window: usize) -> Vec<TokenId> {
    let mut key = vec![TokenId(0); window];
    let take = context.len().min(window);
    key[window - take..].copy_from_slice(&context[context.len() - take..]);
    key
}

fn table_rows(vocab: usize, window: usize) -> Option<usize> {
    let rows = vocab.checked_pow(window as u32)?;
    (rows.checked_mul(vocab)? <= MAX_TABLE_ENTRIES).then_some(rows)
}

fn key_index(key: &[TokenId], vocab: usize) -> usize {
    key.iter().fold(0, |acc, t| acc * vocab + t.index())
}

fn key_from_index(mut index: usize, vocab: usize, window: usize) -> Vec<TokenId> {
    let mut key = vec![TokenId(0); window];
    for slot in key.iter_mut().rev() {
        *slot = TokenId::from(index % vocab);
        index /= vocab;
    }
    key
}

/// Order-n table model with Dirichlet-distributed rows.
#[derive(Debug, Clone)]
pub struct MarkovLm {
    vocab: usize,
    order: usize,
    seed: u64,
    gamma: Gamma<f64>,
    table: Option<Vec<f64>>,
}

impl MarkovLm {
    pub fn order(&self) -> usize {
        self.order
    }

    fn row_from_key(&self, key: &[TokenId]) -> Vec<f64> {
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &[PositionTag::from_path(key).0]));
        (0..self.vocab)
            .map(|_| self.gamma.sample(&mut rng).max(f64::MIN_POSITIVE).ln())
            .collect()
    }
}

impl LanguageModel for MarkovLm {
    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn next_logits(&self, context: &[TokenId]) -> Vec<f64> {
        let key = context_key(context, self.order);
        match &self.table {
            Some(table) => {
                let row = key_index(&key, self.vocab);
                table[row * self.vocab..(row + 1) * self.vocab].to_vec()
            }
            None => self.row_from_key(&key),
        }
    }

    fn context_window(&self) -> Option<usize> {
        Some(self.order)
    }
}

/// Model backed by a closure; handy for hand-built distributions.
pub struct ClosureLm<F> {
    vocab: usize,
    logits: F,
}

impl<F> ClosureLm<F>
where
    F: Fn(&[TokenId]) -> Vec<f64> + Send + Sync,
{
    pub fn new(vocab: usize, logits: F) -> Self {
        Self { vocab, logits }
    }
}

impl<F> LanguageModel for ClosureLm<F>
where
    F: Fn(&[TokenId]) -> Vec<f64> + Send + Sync,
{
    fn vocab_size(&self) -> usize {
        self.vocab
    }
    fn next_logits(&self, context: &[TokenId]) -> Vec<f64> {
        (self.logits)(context)
    }
}

/// Builds the target table model. Rows are `ln g` with `g_i ~ Gamma(concentration)`,
/// so temperature-1 rows are Dirichlet samples.
pub fn make_markov_lm(spec: &ModelPairSpec) -> Result<MarkovLm> {
    spec.validate()?;
    let gamma = Gamma::new(spec.concentration, 1.0)
        .map_err(|e| Error::InvalidParameter(format!("concentration: {e}")))?;
    let mut model = MarkovLm {
        vocab: spec.vocab_size,
        order: spec.markov_order,
        seed: spec.target_seed,
        gamma,
        table: None,
    };
    if let Some(rows) = table_rows(model.vocab, model.order) {
        let mut table = Vec::with_capacity(rows * model.vocab);
        for r in 0..rows {
            table.extend(model.row_from_key(&key_from_index(r, model.vocab, model.order)));
        }
        model.table = Some(table);
    }
    Ok(model)
}

/// Target logits plus keyed Gaussian noise of scale `sigma`.
pub struct DraftLm {
    target: Arc<dyn LanguageModel>,
    sigma: f64,
    seed: u64,
    table: Option<Vec<f64>>,
}

impl DraftLm {
    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    fn noisy(&self, context: &[TokenId]) -> Vec<f64> {
        let mut logits = self.target.next_logits(context);
        if self.sigma == 0.0 {
            return logits;
        }
        let key = match self.target.context_window() {
            Some(w) => context_key(context, w),
            None => context.to_vec(),
        };
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &[PositionTag::from_path(&key).0]));
        for l in logits.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *l += self.sigma * z;
        }
        logits
    }
}

impl LanguageModel for DraftLm {
    fn vocab_size(&self) -> usize {
        self.target.vocab_size()
    }

    fn next_logits(&self, context: &[TokenId]) -> Vec<f64> {
        match (&self.table, self.target.context_window()) {
            (Some(table), Some(w)) => {
                let v = self.vocab_size();
                let row = key_index(&context_key(context, w), v);
                table[row * v..(row + 1) * v].to_vec()
            }
            _ => self.noisy(context),
        }
    }

    fn context_window(&self) -> Option<usize> {
        self.target.context_window()
    }
}

pub fn derive_draft(
    target: Arc<dyn LanguageModel>,
    noise_sigma: f64,
    seed: u64,
) -> Result<DraftLm> {
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(Error::InvalidParameter("noise_sigma must be >= 0".into()));
    }
    let mut draft = DraftLm {
        target,
        sigma: noise_sigma,
        seed,
        table: None,
    };
    let v = draft.vocab_size();
    if let Some(w) = draft.target.context_window() {
        if let Some(rows) = table_rows(v, w) {
            let mut table = Vec::with_capacity(rows * v);
            for r in 0..rows {
                table.extend(draft.noisy(&key_from_index(r, v, w)));
            }
            draft.table = Some(table);
        }
    }
    Ok(draft)
}

/// `KL(D || T)` with `0 log 0 = 0`; `+inf` when `D` has mass outside the support of `T`.
pub fn kl_divergence(draft: &Categorical, target: &Categorical) -> f64 {
    let mut kl = 0.0;
    for (&d, &t) in draft.probs().iter().zip(target.probs()) {
        if d <= 0.0 {
            continue;
        }
        if t <= 0.0 {
            return f64::INFINITY;
        }
        kl += d * (d / t).ln();
    }
    kl.max(0.0)
}

/// Target next-token distributions for the root position and every node,
/// conditioned on `prefix` plus the node's ancestor path.
pub fn target_distributions_for_tree(
    target: Tempered<'_>,
    prefix: &[TokenId],
    tree: &TokenTree,
) -> Result<PositionMap<Categorical>> {
    let root = target.distribution(prefix)?;
    let mut context = prefix.to_vec();
    let mut nodes = Vec::with_capacity(tree.len());
    for id in tree.node_ids() {
        context.truncate(prefix.len());
        context.extend(tree.path_tokens(id)?);
        nodes.push(target.distribution(&context)?);
    }
    Ok(PositionMap::new(root, nodes))
}
