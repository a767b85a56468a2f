//! Generation loop, baseline tree shapes and run metrics.
//!
//! Each step builds a tree from the current context, evaluates the target
//! at every tree position (one logical batch), verifies, and appends the
//! accepted tokens plus the bonus token.

use serde::{Deserialize, Serialize};

use crate::categorical::{derive_seed, stream_rng, TokenId};
use crate::construct::{
    build_tree_fixed, build_tree_threshold, draw_at, ensure_open, estimate_latency, CostParams,
    LatencyMode,
};
use crate::error::{Error, Result};
use crate::lm::{target_distributions_for_tree, Tempered};
use crate::token_tree::{NodeId, Position, TokenTree};
use crate::verify::verify_tree;

use rand::Rng;

/// Tree shape used for each speculation step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Structure {
    #[default]
    Dynamic,
    Chain,
    StaticTree {
        branching: Vec<usize>,
    },
    KChains {
        k: usize,
    },
}

impl Structure {
    pub fn name(&self) -> &'static str {
        match self {
            Structure::Dynamic => "dynamic",
            Structure::Chain => "chain",
            Structure::StaticTree { .. } => "static_tree",
            Structure::KChains { .. } => "k_chains",
        }
    }

    /// A fixed-shape tree that fits `budget`: four root branches, then
    /// binary levels while they fit, then single-child levels.
    pub fn static_for_budget(budget: usize) -> Structure {
        let mut branching: Vec<usize> = Vec::new();
        let mut total = 0;
        let mut width = 1;
        let first = budget.clamp(1, 4);
        for b in std::iter::once(first).chain(std::iter::repeat(2)) {
            if total + width * b > budget {
                break;
            }
            width *= b;
            total += width;
            branching.push(b);
        }
        while total + width <= budget && width > 0 {
            total += width;
            branching.push(1);
        }
        Structure::StaticTree { branching }
    }
}

/// How much to speculate per step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Speculation {
    Budget(usize),
    Threshold { threshold: f64, size_cap: usize },
}

impl Speculation {
    /// Node limit: the budget or the size cap.
    pub fn max_nodes(&self) -> usize {
        match *self {
            Speculation::Budget(m) => m,
            Speculation::Threshold { size_cap, .. } => size_cap,
        }
    }
}

fn default_len() -> usize {
    128
}
fn default_draft_temp() -> f64 {
    0.6
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    #[serde(default = "default_len")]
    pub prefix_len: usize,
    #[serde(default = "default_len")]
    pub gen_len: usize,
    #[serde(default)]
    pub budget: Option<usize>,
    #[serde(default)]
    pub threshold: Option<f64>,
    #[serde(default)]
    pub size_cap: Option<usize>,
    #[serde(default = "default_draft_temp")]
    pub draft_temp: f64,
    #[serde(default)]
    pub target_temp: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub structure: Structure,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            prefix_len: default_len(),
            gen_len: default_len(),
            budget: Some(64),
            threshold: None,
            size_cap: None,
            draft_temp: default_draft_temp(),
            target_temp: 0.0,
            seed: 0,
            structure: Structure::Dynamic,
        }
    }
}

impl GenConfig {
    pub fn speculation(&self) -> Result<Speculation> {
        match (self.budget, self.threshold) {
            (Some(0), None) => Err(Error::ZeroBudget),
            (Some(m), None) => Ok(Speculation::Budget(m)),
            (None, Some(c)) => {
                if !(c > 0.0 && c <= 1.0) {
                    return Err(Error::InvalidParameter(format!(
                        "threshold must lie in (0, 1], got {c}"
                    )));
                }
                let size_cap = self.size_cap.ok_or_else(|| {
                    Error::InvalidParameter("threshold mode requires size_cap".into())
                })?;
                if size_cap == 0 {
                    return Err(Error::ZeroBudget);
                }
                Ok(Speculation::Threshold {
                    threshold: c,
                    size_cap,
                })
            }
            _ => Err(Error::InvalidParameter(
                "set exactly one of budget and threshold".into(),
            )),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.speculation()?;
        if self.gen_len == 0 {
            return Err(Error::InvalidParameter("gen_len must be at least 1".into()));
        }
        for (name, t) in [
            ("draft_temp", self.draft_temp),
            ("target_temp", self.target_temp),
        ] {
            if !(t >= 0.0 && t.is_finite()) {
                return Err(Error::InvalidParameter(format!("{name} must be >= 0")));
            }
        }
        match &self.structure {
            Structure::KChains { k } if *k == 0 => {
                Err(Error::InvalidParameter("k_chains needs k >= 1".into()))
            }
            Structure::StaticTree { branching } if branching.contains(&0) => Err(
                Error::InvalidParameter("static_tree branching entries must be >= 1".into()),
            ),
            _ => Ok(()),
        }
    }

    fn latency_mode(&self) -> LatencyMode {
        match (&self.structure, self.threshold) {
            (Structure::Dynamic, None) | (Structure::Chain, _) => LatencyMode::Greedy,
            _ => LatencyMode::Layered,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub tree_size: usize,
    pub tree_depth: usize,
    /// Tokens emitted this step, bonus included.
    pub accepted: usize,
    pub modeled_latency: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub accepted_includes_bonus: bool,
    pub steps: Vec<StepMetrics>,
    pub mean_accepted: f64,
    pub mean_tree_size: f64,
    pub tokens_per_modeled_second: f64,
}

impl RunMetrics {
    pub fn from_steps(steps: Vec<StepMetrics>) -> Self {
        let n = steps.len().max(1) as f64;
        let tokens: usize = steps.iter().map(|s| s.accepted).sum();
        let time: f64 = steps
            .iter()
            .map(|s| s.modeled_latency * s.accepted as f64)
            .sum();
        Self {
            accepted_includes_bonus: true,
            mean_accepted: tokens as f64 / n,
            mean_tree_size: steps.iter().map(|s| s.tree_size).sum::<usize>() as f64 / n,
            tokens_per_modeled_second: if time > 0.0 {
                tokens as f64 / time
            } else {
                0.0
            },
            steps,
        }
    }

    pub fn steps_csv(&self) -> Result<String> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        w.write_record([
            "step",
            "tree_size",
            "tree_depth",
            "accepted",
            "modeled_latency",
        ])
        .map_err(csv_err)?;
        for s in &self.steps {
            w.write_record([
                s.step.to_string(),
                s.tree_size.to_string(),
                s.tree_depth.to_string(),
                s.accepted.to_string(),
                s.modeled_latency.to_string(),
            ])
            .map_err(csv_err)?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| Error::InvalidParameter(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::InvalidParameter(format!("csv: {e}"))
}

/// One branch test: the draft probability of the proposed token and whether it passed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BranchEvent {
    pub draft_prob: f64,
    pub accepted: bool,
    /// 0 for the first token tested at a node.
    pub sibling: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationRun {
    pub tokens: Vec<TokenId>,
    pub metrics: RunMetrics,
    pub branch_events: Vec<BranchEvent>,
}

/// Samples a prompt of `len` tokens from `model`.
pub fn sample_prompt(model: Tempered<'_>, len: usize, seed: u64) -> Result<Vec<TokenId>> {
    let mut rng = stream_rng(seed);
    let mut prompt = Vec::with_capacity(len);
    for _ in 0..len {
        let d = model.distribution(&prompt)?;
        prompt.push(d.sample(rng.random::<f64>())?);
    }
    Ok(prompt)
}

/// Draws up to `count` successive samplings at `pos`, the first with reach
/// value `entry_value`. Stops early when the position's residual is exhausted.
fn draw_siblings(
    draft: Tempered<'_>,
    prefix: &[TokenId],
    tree: &mut TokenTree,
    pos: Position,
    entry_value: f64,
    count: usize,
    seed: u64,
) -> Result<Vec<NodeId>> {
    ensure_open(draft, prefix, tree, pos)?;
    let mut v = entry_value;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        if tree.position(pos).expect("open").residual.is_zero() || v <= 0.0 {
            break;
        }
        let (id, r) = draw_at(tree, pos, v, seed)?;
        out.push(id);
        v *= 1.0 - r;
    }
    Ok(out)
}

fn child_value(tree: &TokenTree, id: NodeId) -> f64 {
    let n = &tree.nodes()[id];
    n.value * n.sample_prob
}

fn extend_chain(
    draft: Tempered<'_>,
    prefix: &[TokenId],
    tree: &mut TokenTree,
    mut from: NodeId,
    extra: usize,
    seed: u64,
) -> Result<()> {
    for _ in 0..extra {
        let v = child_value(tree, from);
        match draw_siblings(draft, prefix, tree, Position::Node(from), v, 1, seed)?.first() {
            Some(&id) => from = id,
            None => break,
        }
    }
    Ok(())
}

/// Builds one of the fixed-shape comparison trees with at most `budget` nodes.
pub fn build_baseline_tree(
    structure: &Structure,
    draft: Tempered<'_>,
    prefix: &[TokenId],
    budget: usize,
    seed: u64,
) -> Result<TokenTree> {
    if budget == 0 {
        return Err(Error::ZeroBudget);
    }
    let mut tree = TokenTree::new(prefix.len());
    match structure {
        Structure::Dynamic => {
            return Err(Error::InvalidParameter(
                "dynamic is not a baseline shape".into(),
            ));
        }
        Structure::Chain => {
            if let Some(&first) =
                draw_siblings(draft, prefix, &mut tree, Position::Root, 1.0, 1, seed)?.first()
            {
                extend_chain(draft, prefix, &mut tree, first, budget - 1, seed)?;
            }
        }
        Structure::KChains { k } => {
            if *k == 0 || *k > budget {
                return Err(Error::InvalidParameter(format!(
                    "k_chains needs 1 <= k <= budget ({budget}), got {k}"
                )));
            }
            let len = budget / k;
            let heads = draw_siblings(draft, prefix, &mut tree, Position::Root, 1.0, *k, seed)?;
            for head in heads {
                extend_chain(draft, prefix, &mut tree, head, len - 1, seed)?;
            }
        }
        Structure::StaticTree { branching } => {
            let mut width = 1usize;
            let mut total = 0usize;
            for &b in branching {
                width = width.saturating_mul(b);
                total = total.saturating_add(width);
            }
            if total > budget {
                return Err(Error::InvalidParameter(format!(
                    "static tree {branching:?} has {total} nodes, over the budget of {budget}"
                )));
            }
            let mut level = vec![(Position::Root, 1.0)];
            for &b in branching {
                let mut next = Vec::new();
                for (pos, v) in level {
                    for id in draw_siblings(draft, prefix, &mut tree, pos, v, b, seed)? {
                        next.push((Position::Node(id), child_value(&tree, id)));
                    }
                }
                level = next;
            }
        }
    }
    Ok(tree)
}

/// Builds the tree a step would speculate with.
pub fn build_step_tree(
    config: &GenConfig,
    draft: Tempered<'_>,
    context: &[TokenId],
    seed: u64,
) -> Result<TokenTree> {
    let spec = config.speculation()?;
    match (&config.structure, spec) {
        (Structure::Dynamic, Speculation::Budget(m)) => build_tree_fixed(draft, context, m, seed),
        (
            Structure::Dynamic,
            Speculation::Threshold {
                threshold,
                size_cap,
            },
        ) => build_tree_threshold(draft, context, threshold, size_cap, seed),
        (s, spec) => build_baseline_tree(s, draft, context, spec.max_nodes(), seed),
    }
}

/// Runs speculative generation until `gen_len` tokens are produced.
pub fn generate(
    target: Tempered<'_>,
    draft: Tempered<'_>,
    prompt: &[TokenId],
    config: &GenConfig,
    costs: &CostParams,
) -> Result<GenerationRun> {
    config.validate()?;
    costs.validate()?;
    if prompt.len() != config.prefix_len {
        return Err(Error::InvalidParameter(format!(
            "prompt has {} tokens, expected prefix_len {}",
            prompt.len(),
            config.prefix_len
        )));
    }
    let mode = config.latency_mode();
    let mut context = prompt.to_vec();
    let mut steps = Vec::new();
    let mut events = Vec::new();
    let mut produced = 0;

    while produced < config.gen_len {
        let step = steps.len();
        let tree = build_step_tree(
            config,
            draft,
            &context,
            derive_seed(config.seed, &[step as u64, 0]),
        )?;
        let targets = target_distributions_for_tree(target, &context, &tree)?;
        let result = verify_tree(&tree, &targets, derive_seed(config.seed, &[step as u64, 1]))?;

        events.extend(result.trace.iter().map(|b| BranchEvent {
            draft_prob: b.draft_prob,
            accepted: b.accepted,
            sibling: b.sibling,
        }));
        let accepted = result.accepted.len();
        let size = tree.len();
        let depth = tree.depth();
        steps.push(StepMetrics {
            step,
            tree_size: size,
            tree_depth: depth,
            accepted,
            modeled_latency: estimate_latency(
                size.max(1),
                depth.max(1),
                accepted as f64,
                costs,
                mode,
            )?,
        });
        context.extend_from_slice(&result.accepted);
        produced += accepted;
    }

    let mut tokens = context.split_off(prompt.len());
    tokens.truncate(config.gen_len);
    Ok(GenerationRun {
        tokens,
        metrics: RunMetrics::from_steps(steps),
        branch_events: events,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinStat {
    pub lo: f64,
    pub hi: f64,
    pub acc_rate: f64,
    pub count: u64,
}

/// Buckets branch tests by draft probability into `bins` equal-width bins
/// over `[0, 1]`; the last bin is closed on the right.
pub fn acceptance_vs_draft_bins(events: &[BranchEvent], bins: usize) -> Result<Vec<BinStat>> {
    if events.is_empty() {
        return Err(Error::Empty("branch trace".into()));
    }
    if bins == 0 {
        return Err(Error::InvalidParameter(
            "bin count must be at least 1".into(),
        ));
    }
    let mut hits = vec![0u64; bins];
    let mut counts = vec![0u64; bins];
    for e in events {
        let b = ((e.draft_prob * bins as f64) as usize).min(bins - 1);
        counts[b] += 1;
        hits[b] += u64::from(e.accepted);
    }
    Ok((0..bins)
        .map(|b| BinStat {
            lo: b as f64 / bins as f64,
            hi: (b + 1) as f64 / bins as f64,
            acc_rate: if counts[b] > 0 {
                hits[b] as f64 / counts[b] as f64
            } else {
                0.0
            },
            count: counts[b],
        })
        .collect())
}

fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation (average ranks for ties). `None` when either
/// side is constant or there are fewer than two points.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let (rx, ry) = (average_ranks(xs), average_ranks(ys));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

/// Rank correlation between bin index and acceptance rate over non-empty bins.
pub fn bin_trend(bins: &[BinStat]) -> Option<f64> {
    let (xs, ys): (Vec<f64>, Vec<f64>) = bins
        .iter()
        .enumerate()
        .filter(|(_, b)| b.count > 0)
        .map(|(i, b)| (i as f64, b.acc_rate))
        .unzip();
    spearman(&xs, &ys)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::ClosureLm;

    fn point_mass_lm(v: usize) -> ClosureLm<impl Fn(&[TokenId]) -> Vec<f64> + Send + Sync> {
        ClosureLm::new(v, move |ctx: &[TokenId]| {
            let next = ctx.last().map_or(0, |t| (t.index() + 1) % v);
            (0..v).map(|i| if i == next { 1.0 } else { 0.0 }).collect()
        })
    }

    fn smooth_lm(v: usize, shift: f64) -> ClosureLm<impl Fn(&[TokenId]) -> Vec<f64> + Send + Sync> {
        ClosureLm::new(v, move |ctx: &[TokenId]| {
            let s = ctx.iter().rev().take(2).map(|t| t.0 as f64).sum::<f64>();
            (0..v)
                .map(|i| ((i as f64 + 0.7) * (s + shift)).sin() * 2.5)
                .collect()
        })
    }

    fn cfg(budget: usize, structure: Structure) -> GenConfig {
        GenConfig {
            prefix_len: 4,
            gen_len: 32,
            budget: Some(budget),
            structure,
            ..GenConfig::default()
        }
    }

    #[test]
    fn identical_point_mass_models_accept_whole_chain() {
        let m = point_mass_lm(5);
        let t = Tempered::new(&m, 0.0);
        let prompt = vec![TokenId(0); 4];
        let run = generate(
            t,
            t,
            &prompt,
            &cfg(8, Structure::Dynamic),
            &CostParams::default(),
        )
        .unwrap();
        assert!(run
            .metrics
            .steps
            .iter()
            .all(|s| s.tree_depth == 8 && s.accepted == 9));
        assert_eq!(run.metrics.mean_accepted, 9.0);
        // tokens follow the deterministic cycle
        let mut expect = TokenId(1);
        for &tok in &run.tokens {
            assert_eq!(tok, expect);
            expect = TokenId::from((expect.index() + 1) % 5);
        }
    }

    #[test]
    fn budget_one_accepts_one_or_two() {
        let (d, t) = (smooth_lm(6, 0.3), smooth_lm(6, 0.9));
        let prompt = vec![TokenId(1); 4];
        let run = generate(
            Tempered::new(&t, 1.0),
            Tempered::new(&d, 0.6),
            &prompt,
            &cfg(1, Structure::Dynamic),
            &CostParams::default(),
        )
        .unwrap();
        assert!(run
            .metrics
            .steps
            .iter()
            .all(|s| (1..=2).contains(&s.accepted)));
    }

    #[test]
    fn output_length_is_exact() {
        let m = smooth_lm(8, 0.5);
        let t = Tempered::new(&m, 0.6);
        let config = GenConfig {
            prefix_len: 128,
            gen_len: 128,
            budget: Some(16),
            ..GenConfig::default()
        };
        let prompt = sample_prompt(t, 128, 3).unwrap();
        let run = generate(t, t, &prompt, &config, &CostParams::default()).unwrap();
        assert_eq!(run.tokens.len(), 128);
    }

    #[test]
    fn generation_is_deterministic() {
        let (d, t) = (smooth_lm(6, 0.3), smooth_lm(6, 0.9));
        let prompt = vec![TokenId(2); 4];
        let c = cfg(12, Structure::Dynamic);
        let a = generate(
            Tempered::new(&t, 0.6),
            Tempered::new(&d, 0.6),
            &prompt,
            &c,
            &CostParams::default(),
        )
        .unwrap();
        let b = generate(
            Tempered::new(&t, 0.6),
            Tempered::new(&d, 0.6),
            &prompt,
            &c,
            &CostParams::default(),
        )
        .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn step_metric_bounds() {
        let (d, t) = (smooth_lm(7, 0.3), smooth_lm(7, 1.1));
        let prompt = vec![TokenId(2); 4];
        for structure in [
            Structure::Dynamic,
            Structure::Chain,
            Structure::KChains { k: 3 },
            Structure::static_for_budget(20),
        ] {
            let c = cfg(20, structure);
            let run = generate(
                Tempered::new(&t, 1.0),
                Tempered::new(&d, 0.6),
                &prompt,
                &c,
                &CostParams::default(),
            )
            .unwrap();
            for s in &run.metrics.steps {
                assert!(s.accepted >= 1 && s.accepted <= s.tree_depth + 1);
                assert!(s.tree_size <= 20);
            }
        }
    }

    #[test]
    fn run_metrics_recompute() {
        let steps = vec![
            StepMetrics {
                step: 0,
                tree_size: 4,
                tree_depth: 2,
                accepted: 3,
                modeled_latency: 2.0,
            },
            StepMetrics {
                step: 1,
                tree_size: 6,
                tree_depth: 3,
                accepted: 1,
                modeled_latency: 4.0,
            },
        ];
        let m = RunMetrics::from_steps(steps);
        assert_eq!(m.mean_accepted, 2.0);
        assert_eq!(m.mean_tree_size, 5.0);
        assert!((m.tokens_per_modeled_second - 4.0 / 10.0).abs() < 1e-15);
        assert_eq!(
            m.steps_csv().unwrap(),
            "step,tree_size,tree_depth,accepted,modeled_latency\n0,4,2,3,2\n1,6,3,1,4\n"
        );
    }

    #[test]
    fn baseline_shapes() {
        let m = smooth_lm(9, 0.4);
        let d = Tempered::new(&m, 1.0);
        let prefix = [TokenId(1)];

        let chain = build_baseline_tree(&Structure::Chain, d, &prefix, 4, 1).unwrap();
        assert_eq!((chain.len(), chain.depth()), (4, 4));

        let st = build_baseline_tree(
            &Structure::StaticTree {
                branching: vec![2, 2],
            },
            d,
            &prefix,
            6,
            1,
        )
        .unwrap();
        assert_eq!((st.len(), st.depth()), (6, 2));

        let kc = build_baseline_tree(&Structure::KChains { k: 2 }, d, &prefix, 6, 1).unwrap();
        assert_eq!((kc.len(), kc.depth()), (6, 3));
        assert_eq!(kc.children(Position::Root).len(), 2);

        assert!(build_baseline_tree(
            &Structure::StaticTree {
                branching: vec![3, 3]
            },
            d,
            &prefix,
            6,
            1
        )
        .is_err());
        assert!(build_baseline_tree(&Structure::Dynamic, d, &prefix, 6, 1).is_err());
    }

    #[test]
    fn baseline_values_follow_recurrence() {
        let m = smooth_lm(9, 0.4);
        let d = Tempered::new(&m, 1.0);
        let t = build_baseline_tree(
            &Structure::StaticTree {
                branching: vec![3, 2, 2],
            },
            d,
            &[],
            40,
            5,
        )
        .unwrap();
        for n in t.nodes() {
            assert!((n.value - t.closed_form_value(n.id).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn static_shape_for_budget() {
        assert_eq!(
            Structure::static_for_budget(64),
            Structure::StaticTree {
                branching: vec![4, 2, 2, 2]
            }
        );
        assert_eq!(
            Structure::static_for_budget(8),
            Structure::StaticTree {
                branching: vec![4, 1]
            }
        );
        assert_eq!(
            Structure::static_for_budget(1),
            Structure::StaticTree { branching: vec![1] }
        );
        assert_eq!(
            Structure::static_for_budget(768),
            Structure::StaticTree {
                branching: vec![4, 2, 2, 2, 2, 2, 2, 1]
            }
        );
    }

    #[test]
    fn speculation_config_checks() {
        let mut c = GenConfig::default();
        assert_eq!(c.speculation().unwrap(), Speculation::Budget(64));
        c.threshold = Some(0.01);
        assert!(c.speculation().is_err());
        c.budget = None;
        assert!(c.speculation().is_err());
        c.size_cap = Some(100);
        assert_eq!(
            c.speculation().unwrap(),
            Speculation::Threshold {
                threshold: 0.01,
                size_cap: 100
            }
        );
        c.gen_len = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn prompt_length_must_match() {
        let m = smooth_lm(4, 0.2);
        let t = Tempered::new(&m, 1.0);
        let r = generate(
            t,
            t,
            &[TokenId(0)],
            &cfg(4, Structure::Dynamic),
            &CostParams::default(),
        );
        assert!(r.is_err());
    }

    #[test]
    fn bins_definition() {
        let events: Vec<BranchEvent> = (0..=10)
            .map(|i| BranchEvent {
                draft_prob: i as f64 / 10.0,
                accepted: true,
                sibling: 0,
            })
            .collect();
        let bins = acceptance_vs_draft_bins(&events, 10).unwrap();
        assert_eq!(bins.len(), 10);
        assert_eq!(bins[0].lo, 0.0);
        assert!((bins[9].lo - 0.9).abs() < 1e-15 && bins[9].hi == 1.0);
        // 0.9 and 1.0 both land in the closed last bin
        assert_eq!(bins[9].count, 2);
        assert!(bins.iter().all(|b| b.acc_rate == 1.0));
        assert!(acceptance_vs_draft_bins(&[], 10).is_err());
    }

    #[test]
    fn identical_models_bin_rates_are_one() {
        let m = smooth_lm(6, 0.2);
        let t = Tempered::new(&m, 0.6);
        let prompt = vec![TokenId(0); 4];
        let run = generate(
            t,
            t,
            &prompt,
            &cfg(10, Structure::Dynamic),
            &CostParams::default(),
        )
        .unwrap();
        let bins = acceptance_vs_draft_bins(&run.branch_events, 10).unwrap();
        assert!(bins
            .iter()
            .filter(|b| b.count > 0)
            .all(|b| b.acc_rate == 1.0));
    }

    #[test]
    fn spearman_basics() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]), Some(1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), Some(-1.0));
        assert_eq!(spearman(&[1.0, 2.0], &[5.0, 5.0]), None);
        let r = spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap();
        assert!((r - 0.8).abs() < 1e-12);
    }
}
