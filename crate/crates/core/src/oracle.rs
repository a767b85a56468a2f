//! Brute-force ground truth: exact verification output laws, exhaustive
//! optimal-subtree search and Monte Carlo estimators.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::categorical::{
    derive_seed, residual_target, stream_rng, total_variation, Categorical, PositionTag, RandomKey,
    TokenId,
};
use crate::construct::{
    build_tree_fixed, build_tree_threshold, expected_accepted, expected_accepted_draft_approx,
};
use crate::engine::{build_step_tree, GenConfig};
use crate::error::{Error, Result};
use crate::lm::{target_distributions_for_tree, ModelPairSpec, Tempered};
use crate::par;
use crate::token_tree::{Position, PositionMap, TokenTree};
use crate::verify::verify_tree;

/// How many branches a position draws.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchPolicy {
    /// Exactly `k` draws, or fewer if the draft support runs out.
    Count(usize),
    /// Keep drawing while the next sibling slot value, starting from 1, is at least `c`.
    Threshold(f64),
}

impl BranchPolicy {
    fn wants_more(&self, drawn: usize, slot_value: f64) -> bool {
        match *self {
            BranchPolicy::Count(k) => drawn < k,
            BranchPolicy::Threshold(c) => slot_value >= c,
        }
    }
}

/// State of the verifier at one position after some rejections.
#[derive(Clone)]
struct VerifyState {
    residual: Categorical,
    draft: Categorical,
    /// Probability that every branch so far was rejected.
    reach: f64,
}

impl VerifyState {
    fn new(draft: &Categorical, target: &Categorical) -> Self {
        Self {
            residual: target.clone(),
            draft: draft.clone(),
            reach: 1.0,
        }
    }

    /// Tests branch `y`: adds `weight · P(accept y)` to `out[y]` and returns
    /// the state after a rejection, or `None` if rejection is impossible or
    /// the draft is exhausted.
    fn test(&self, y: TokenId, weight: f64, out: &mut [f64]) -> Result<Option<VerifyState>> {
        let d = self.draft.prob(y);
        if d <= 0.0 {
            return Err(Error::ZeroProbabilityToken { token: y });
        }
        let a = (self.residual.prob(y) / d).min(1.0);
        out[y.index()] += weight * self.reach * a;
        let reach = self.reach * (1.0 - a);
        if reach == 0.0 {
            return Ok(None);
        }
        let residual = residual_target(&self.residual, &self.draft)?;
        if residual.is_zero() {
            return Err(Error::ResidualCollapsed(y));
        }
        Ok(Some(VerifyState {
            residual,
            draft: self.draft.remove_and_renorm(y)?,
            reach,
        }))
    }

    fn finish(&self, weight: f64, out: &mut [f64]) {
        for (o, r) in out.iter_mut().zip(self.residual.probs()) {
            *o += weight * self.reach * r;
        }
    }
}

fn check_pair(draft: &Categorical, target: &Categorical) -> Result<()> {
    if draft.vocab_size() != target.vocab_size() {
        return Err(Error::VocabMismatch {
            expected: target.vocab_size(),
            found: draft.vocab_size(),
        });
    }
    if draft.is_zero() || target.is_zero() {
        return Err(Error::EmptySupport);
    }
    Ok(())
}

/// Law of the token emitted at one position when the branch tokens are
/// fixed to `branches` (in sampling order), integrating over the verifier's
/// uniforms only. This is generally not the target distribution.
pub fn conditional_output_distribution(
    draft: &Categorical,
    target: &Categorical,
    branches: &[TokenId],
) -> Result<Categorical> {
    check_pair(draft, target)?;
    let mut out = vec![0.0; target.vocab_size()];
    for (i, &y) in branches.iter().enumerate() {
        if branches[..i].contains(&y) {
            return Err(Error::DuplicateToken { token: y });
        }
    }
    let mut state = VerifyState::new(draft, target);
    for &y in branches {
        match state.test(y, 1.0, &mut out)? {
            Some(next) if !next.draft.is_zero() => state = next,
            Some(next) => {
                next.finish(1.0, &mut out);
                return Categorical::new(out);
            }
            None => return Categorical::new(out),
        }
    }
    state.finish(1.0, &mut out);
    Categorical::new(out)
}

/// Law of the token emitted at one position, integrating over both the
/// draft sampling of the branch tokens (without replacement, under
/// `policy`) and the verifier's uniforms. Equals `target` exactly.
pub fn exact_verify_distribution(
    draft: &Categorical,
    target: &Categorical,
    policy: BranchPolicy,
) -> Result<Categorical> {
    check_pair(draft, target)?;
    let mut out = vec![0.0; target.vocab_size()];

    // `weight` is the probability of the branch tokens drawn so far.
    fn rec(
        state: &VerifyState,
        policy: BranchPolicy,
        drawn: usize,
        slot_value: f64,
        weight: f64,
        out: &mut [f64],
    ) -> Result<()> {
        if !policy.wants_more(drawn, slot_value) {
            state.finish(weight, out);
            return Ok(());
        }
        for (i, &p) in state.draft.probs().iter().enumerate() {
            if p <= 0.0 {
                continue;
            }
            let w = weight * p;
            match state.test(TokenId::from(i), w, out)? {
                Some(next) if next.draft.is_zero() => next.finish(w, out),
                Some(next) => rec(&next, policy, drawn + 1, slot_value * (1.0 - p), w, out)?,
                None => {}
            }
        }
        Ok(())
    }

    rec(
        &VerifyState::new(draft, target),
        policy,
        0,
        1.0,
        1.0,
        &mut out,
    )?;
    Categorical::new(out)
}

/// Per-node acceptance probability given the node is tested, i.e. its
/// parent was accepted and all earlier siblings were rejected.
pub fn true_acceptance_probs(
    tree: &TokenTree,
    targets: &PositionMap<Categorical>,
) -> Result<Vec<f64>> {
    let mut sd = vec![0.0; tree.len()];
    let positions = std::iter::once(Position::Root).chain(tree.node_ids().map(Position::Node));
    for pos in positions {
        let children = tree.children(pos);
        if children.is_empty() {
            continue;
        }
        let target = targets
            .get(pos)
            .ok_or_else(|| Error::MissingTargetDistribution(pos.to_string()))?;
        let mut draft = tree.position(pos).expect("open").draft_full.clone();
        let mut residual = target.clone();
        for &c in children {
            let y = tree.nodes()[c].token;
            let a = (residual.prob(y) / draft.prob(y)).min(1.0);
            sd[c] = a;
            if a >= 1.0 {
                // later siblings are never tested
                break;
            }
            residual = residual_target(&residual, &draft)?;
            draft = draft.remove_and_renorm(y)?;
            if residual.is_zero() || draft.is_zero() {
                break;
            }
        }
    }
    Ok(sd)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStderr {
    pub mean: f64,
    pub stderr: f64,
    pub trials: usize,
}

impl MeanStderr {
    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len();
        let mean = xs.iter().sum::<f64>() / n.max(1) as f64;
        let stderr = if n > 1 {
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        Self {
            mean,
            stderr,
            trials: n,
        }
    }
}

/// Mean number of accepted tree tokens (bonus excluded) over `trials`
/// verifications of a fixed tree.
pub fn monte_carlo_expected_accepted(
    tree: &TokenTree,
    targets: &PositionMap<Categorical>,
    trials: usize,
    seed: u64,
) -> Result<MeanStderr> {
    let counts = par::try_map_indexed(trials, |i| {
        verify_tree(tree, targets, derive_seed(seed, &[i as u64]))
            .map(|r| r.accepted_tree_tokens() as f64)
    })?;
    Ok(MeanStderr::from_samples(&counts))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputDistribution {
    pub empirical: Vec<f64>,
    pub target: Vec<f64>,
    pub tv: f64,
    pub trials: usize,
}

/// Empirical law of the first emitted token over `trials` independent
/// speculation steps from `prefix`, against the target at `prefix`.
pub fn monte_carlo_output_distribution(
    target: Tempered<'_>,
    draft: Tempered<'_>,
    prefix: &[TokenId],
    config: &GenConfig,
    trials: usize,
    seed: u64,
) -> Result<OutputDistribution> {
    if trials == 0 {
        return Err(Error::InvalidParameter("trials must be >= 1".into()));
    }
    config.speculation()?;
    let tokens = par::try_map_indexed(trials, |i| {
        let tree = build_step_tree(config, draft, prefix, derive_seed(seed, &[i as u64, 0]))?;
        let targets = target_distributions_for_tree(target, prefix, &tree)?;
        let r = verify_tree(&tree, &targets, derive_seed(seed, &[i as u64, 1]))?;
        Ok(r.accepted[0])
    })?;
    let root = target.distribution(prefix)?;
    let mut empirical = vec![0.0; root.vocab_size()];
    for t in &tokens {
        empirical[t.index()] += 1.0;
    }
    empirical.iter_mut().for_each(|c| *c /= trials as f64);
    Ok(OutputDistribution {
        tv: total_variation(&empirical, root.probs()),
        empirical,
        target: root.probs().to_vec(),
        trials,
    })
}

/// Rooted tree with conditional edge probabilities; a node's weight is the
/// product of edge probabilities on its root path (the root weighs 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedTree {
    parents: Vec<Option<usize>>,
    edge: Vec<f64>,
    weight: Vec<f64>,
    children: Vec<Vec<usize>>,
}

impl WeightedTree {
    /// Node 0 is the root; every other node names an earlier parent and the
    /// conditional probability of the edge to it.
    pub fn new(parents: Vec<Option<usize>>, edge: Vec<f64>) -> Result<Self> {
        let n = parents.len();
        if n == 0 || edge.len() != n {
            return Err(Error::ShapeMismatch(
                "need one edge weight per node, at least a root".into(),
            ));
        }
        if parents[0].is_some() || parents[1..].iter().any(Option::is_none) {
            return Err(Error::ShapeMismatch("node 0 must be the only root".into()));
        }
        let mut children = vec![Vec::new(); n];
        let mut weight = vec![1.0; n];
        for i in 1..n {
            let p = parents[i].expect("checked");
            if p >= i {
                return Err(Error::ShapeMismatch(format!("node {i} has parent {p}")));
            }
            if !(0.0..=1.0).contains(&edge[i]) {
                return Err(Error::ProbabilityOutOfRange(edge[i]));
            }
            children[p].push(i);
            weight[i] = weight[p] * edge[i];
        }
        for (i, kids) in children.iter().enumerate() {
            let s: f64 = kids.iter().map(|&c| edge[c]).sum();
            if s > 1.0 + 1e-12 {
                return Err(Error::InvalidDistribution(format!(
                    "edges below node {i} sum to {s}"
                )));
            }
        }
        Ok(Self {
            parents,
            edge,
            weight,
            children,
        })
    }

    /// Full `k`-ary tree of the given depth with random edge probabilities;
    /// each node's edges are the first `k` parts of a Dirichlet(1, …, 1)
    /// split of `k + 1` parts, so they sum to less than one.
    pub fn random(k: usize, depth: usize, seed: u64) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidParameter("k must be >= 1".into()));
        }
        let mut rng = stream_rng(seed);
        let mut parents = vec![None];
        let mut edge = vec![1.0];
        let mut level = vec![0usize];
        for _ in 0..depth {
            let mut next = Vec::new();
            for &u in &level {
                let parts = dirichlet_parts(&mut rng, k + 1, 1.0);
                for &p in &parts[..k] {
                    next.push(parents.len());
                    parents.push(Some(u));
                    edge.push(p);
                }
            }
            level = next;
        }
        Self::new(parents, edge)
    }

    /// Left-child/right-sibling view of the greedy builder's slot space.
    ///
    /// Each node is one draw at a position. Its first child is the first
    /// draw below that token (edge `r`, the probability the token was drawn
    /// with) and its second child is the next draw at the same position
    /// (edge `1 - r`). Node weights are exactly the builder's slot values.
    /// Only slots within `levels` edges of the first draw are included.
    pub fn from_sampling_space(
        draft: Tempered<'_>,
        prefix: &[TokenId],
        levels: usize,
        seed: u64,
    ) -> Result<Self> {
        struct Slot {
            path: Vec<TokenId>,
            index: u64,
            residual: Categorical,
            value: f64,
            parent: Option<usize>,
            edge: f64,
            level: usize,
        }
        let root_draft = draft.distribution(prefix)?;
        let mut queue = std::collections::VecDeque::from([Slot {
            path: Vec::new(),
            index: 0,
            residual: root_draft,
            value: 1.0,
            parent: None,
            edge: 1.0,
            level: 0,
        }]);
        let mut parents = Vec::new();
        let mut edge = Vec::new();
        let mut weights = Vec::new();
        let mut context = prefix.to_vec();
        while let Some(s) = queue.pop_front() {
            let id = parents.len();
            parents.push(s.parent);
            edge.push(s.edge);
            weights.push(s.value);
            if s.level == levels {
                continue;
            }
            let key = RandomKey::new(seed, PositionTag::from_path(&s.path), s.index);
            let token = s.residual.sample(key.uniform())?;
            let r = s.residual.prob(token);

            let mut child_path = s.path.clone();
            child_path.push(token);
            context.truncate(prefix.len());
            context.extend_from_slice(&child_path);
            queue.push_back(Slot {
                path: child_path,
                index: 0,
                residual: draft.distribution(&context)?,
                value: s.value * r,
                parent: Some(id),
                edge: r,
                level: s.level + 1,
            });
            let sibling = s.residual.remove_and_renorm(token)?;
            if !sibling.is_zero() {
                queue.push_back(Slot {
                    path: s.path,
                    index: s.index + 1,
                    residual: sibling,
                    value: s.value * (1.0 - r),
                    parent: Some(id),
                    edge: 1.0 - r,
                    level: s.level + 1,
                });
            }
        }
        let mut tree = Self::new(parents, edge)?;
        // keep the builder's exact floating-point products
        tree.weight = weights;
        Ok(tree)
    }

    pub fn len(&self) -> usize {
        self.parents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parents.is_empty()
    }

    pub fn weight(&self, id: usize) -> f64 {
        self.weight[id]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weight
    }

    pub fn edge(&self, id: usize) -> f64 {
        self.edge[id]
    }

    pub fn parent(&self, id: usize) -> Option<usize> {
        self.parents[id]
    }

    pub fn children(&self, id: usize) -> &[usize] {
        &self.children[id]
    }

    /// Sum of node weights in ascending order, so equal multisets give
    /// bit-identical totals.
    pub fn total_weight(&self, nodes: &[usize]) -> f64 {
        canonical_sum(nodes.iter().map(|&u| self.weight[u]).collect())
    }
}

/// Sum in ascending order.
pub fn canonical_sum(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    xs.iter().sum()
}

fn dirichlet_parts(rng: &mut ChaCha8Rng, k: usize, alpha: f64) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("valid gamma parameters");
    loop {
        let g: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
        let s: f64 = g.iter().sum();
        if s > 0.0 {
            return g.iter().map(|x| x / s).collect();
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubtreeSearchResult {
    pub best_weight: f64,
    /// Node ids, ascending.
    pub best_subtree: Vec<usize>,
    pub enumerated_count: u64,
}

pub const DEFAULT_ENUMERATION_CAP: u64 = 10_000_000;

/// Exhaustive search over connected subtrees containing the root with at
/// most `n` nodes. Fails once more than `cap` subtrees have been visited.
pub fn brute_force_optimal_subtree(
    tree: &WeightedTree,
    n: usize,
    cap: u64,
) -> Result<SubtreeSearchResult> {
    if n == 0 {
        return Err(Error::ZeroBudget);
    }
    struct Search<'a> {
        tree: &'a WeightedTree,
        n: usize,
        cap: u64,
        count: u64,
        best: (f64, Vec<usize>),
    }
    impl Search<'_> {
        fn visit(&mut self, chosen: &mut Vec<usize>, frontier: &[usize]) -> Result<()> {
            self.count += 1;
            if self.count > self.cap {
                return Err(Error::EnumerationCapExceeded { cap: self.cap });
            }
            let w = self.tree.total_weight(chosen);
            if w > self.best.0 {
                let mut s = chosen.clone();
                s.sort_unstable();
                self.best = (w, s);
            }
            if chosen.len() == self.n {
                return Ok(());
            }
            for (i, &v) in frontier.iter().enumerate() {
                let mut next: Vec<usize> = frontier[i + 1..].to_vec();
                next.extend_from_slice(self.tree.children(v));
                chosen.push(v);
                self.visit(chosen, &next)?;
                chosen.pop();
            }
            Ok(())
        }
    }
    let mut search = Search {
        tree,
        n,
        cap,
        count: 0,
        best: (f64::NEG_INFINITY, Vec::new()),
    };
    search.visit(&mut vec![0], tree.children(0))?;
    Ok(SubtreeSearchResult {
        best_weight: search.best.0,
        best_subtree: search.best.1,
        enumerated_count: search.count,
    })
}

/// Grows from the root, always adding the heaviest node adjacent to the
/// current subtree (ties to the lower id), until it has `n` nodes.
pub fn greedy_subtree(tree: &WeightedTree, n: usize) -> Result<SubtreeSearchResult> {
    if n == 0 {
        return Err(Error::ZeroBudget);
    }
    let mut chosen = vec![0];
    let mut candidates: Vec<usize> = tree.children(0).to_vec();
    let mut steps = 0u64;
    while chosen.len() < n && !candidates.is_empty() {
        steps += 1;
        let (k, _) = candidates
            .iter()
            .enumerate()
            .max_by(|(_, &a), (_, &b)| tree.weight[a].total_cmp(&tree.weight[b]).then(b.cmp(&a)))
            .expect("non-empty");
        let v = candidates.swap_remove(k);
        chosen.push(v);
        candidates.extend_from_slice(tree.children(v));
    }
    let best_weight = tree.total_weight(&chosen);
    chosen.sort_unstable();
    Ok(SubtreeSearchResult {
        best_weight,
        best_subtree: chosen,
        enumerated_count: steps,
    })
}

/// Random categorical over `vocab` tokens from a symmetric Dirichlet with
/// a random concentration; about a quarter of the entries are zeroed.
pub fn random_categorical(rng: &mut ChaCha8Rng, vocab: usize) -> Result<Categorical> {
    let alpha = 0.2 + 2.0 * rng.random::<f64>();
    let mut p = dirichlet_parts(rng, vocab, alpha);
    for x in p.iter_mut() {
        if rng.random::<f64>() < 0.25 {
            *x = 0.0;
        }
    }
    if p.iter().all(|&x| x == 0.0) {
        p[rng.random_range(0..vocab)] = 1.0;
    }
    Categorical::from_weights(p)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseReport {
    pub instance: serde_json::Value,
    pub expected: f64,
    pub observed: f64,
    pub tolerance: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub suite: String,
    pub instances: usize,
    pub passed: usize,
    /// Cases that must pass for the suite to pass.
    pub required: usize,
    pub pass: bool,
    pub cases: Vec<CaseReport>,
}

impl SuiteReport {
    fn new(suite: &str, cases: Vec<CaseReport>, required: usize) -> Self {
        let passed = cases.iter().filter(|c| c.pass).count();
        Self {
            suite: suite.to_string(),
            instances: cases.len(),
            passed,
            required,
            pass: passed >= required,
            cases,
        }
    }

    pub fn summary(&self) -> String {
        format!(
            "{}: {}/{} passed (need {}) -> {}",
            self.suite,
            self.passed,
            self.instances,
            self.required,
            if self.pass { "pass" } else { "FAIL" }
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Suite {
    Unbiasedness,
    Optimality,
    Expectation,
    ThresholdEquivalence,
}

impl Suite {
    pub const ALL: [Suite; 4] = [
        Suite::Unbiasedness,
        Suite::Optimality,
        Suite::Expectation,
        Suite::ThresholdEquivalence,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Unbiasedness => "unbiasedness",
            Suite::Optimality => "optimality",
            Suite::Expectation => "expectation",
            Suite::ThresholdEquivalence => "threshold-equivalence",
        }
    }

    pub fn parse(s: &str) -> Option<Suite> {
        Suite::ALL.into_iter().find(|x| x.name() == s)
    }
}

pub const EXACT_TOLERANCE: f64 = 1e-9;
pub const TV_TOLERANCE: f64 = 0.01;

/// Exact per-position output law against the target on random instances
/// with `V <= 8` and up to six branches (count or threshold policy).
pub fn exact_unbiasedness_cases(instances: usize, seed: u64) -> Result<Vec<CaseReport>> {
    par::try_map_indexed(instances, |i| {
        let mut rng = stream_rng(derive_seed(seed, &[i as u64]));
        let v = rng.random_range(2..=8);
        let d = random_categorical(&mut rng, v)?;
        let t = random_categorical(&mut rng, v)?;
        let policy = if i % 4 == 3 {
            BranchPolicy::Threshold(0.05 + 0.5 * rng.random::<f64>())
        } else {
            BranchPolicy::Count(rng.random_range(1..=6))
        };
        let out = exact_verify_distribution(&d, &t, policy)?;
        let err = out
            .probs()
            .iter()
            .zip(t.probs())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        Ok(CaseReport {
            instance: serde_json::json!({
                "vocab": v, "policy": policy, "draft": d.probs(), "target": t.probs(),
            }),
            expected: 0.0,
            observed: err,
            tolerance: EXACT_TOLERANCE,
            pass: err <= EXACT_TOLERANCE,
        })
    })
}

/// First-token frequency against the target for a V = 16 synthetic pair,
/// budget 8, at both temperature regimes.
pub fn monte_carlo_unbiasedness_cases(trials: usize, seed: u64) -> Result<Vec<CaseReport>> {
    let mut cases = Vec::new();
    for temp in [0.0, 0.6] {
        let spec = ModelPairSpec {
            vocab_size: 16,
            markov_order: 1,
            target_seed: seed,
            draft_seed: None,
            noise_sigma: 1.0,
            concentration: 0.3,
            draft_temp: temp,
            target_temp: temp,
        };
        let (target, draft) = spec.build()?;
        let config = GenConfig {
            prefix_len: 1,
            budget: Some(8),
            ..GenConfig::default()
        };
        let prefix = [TokenId(3)];
        let r = monte_carlo_output_distribution(
            Tempered::new(&*target, temp),
            Tempered::new(&draft, temp),
            &prefix,
            &config,
            trials,
            derive_seed(seed, &[temp.to_bits()]),
        )?;
        cases.push(CaseReport {
            instance: serde_json::json!({
                "vocab": 16, "budget": 8, "temp": temp, "trials": trials, "noise_sigma": 1.0,
            }),
            expected: 0.0,
            observed: r.tv,
            tolerance: TV_TOLERANCE,
            pass: r.tv < TV_TOLERANCE,
        });
    }
    Ok(cases)
}

/// Greedy against exhaustive search on random trees with `k <= 3`,
/// depth `<= 4`, `N <= 8`.
pub fn optimality_cases(instances: usize, seed: u64) -> Result<Vec<CaseReport>> {
    par::try_map_indexed(instances, |i| {
        let mut rng = stream_rng(derive_seed(seed, &[i as u64]));
        let k = rng.random_range(1..=3);
        let depth = rng.random_range(1..=4);
        let n = rng.random_range(1..=8);
        let tree = WeightedTree::random(k, depth, rng.random())?;
        let brute = brute_force_optimal_subtree(&tree, n, DEFAULT_ENUMERATION_CAP)?;
        let greedy = greedy_subtree(&tree, n)?;
        Ok(CaseReport {
            instance: serde_json::json!({
                "k": k, "depth": depth, "n": n, "enumerated": brute.enumerated_count,
            }),
            expected: brute.best_weight,
            observed: greedy.best_weight,
            tolerance: 0.0,
            pass: brute.best_weight == greedy.best_weight,
        })
    })
}

fn random_pair(rng: &mut ChaCha8Rng, vocab: usize) -> ModelPairSpec {
    ModelPairSpec {
        vocab_size: vocab,
        markov_order: 1,
        target_seed: rng.random(),
        draft_seed: None,
        noise_sigma: 0.25 + 1.25 * rng.random::<f64>(),
        concentration: 0.2 + 0.8 * rng.random::<f64>(),
        draft_temp: 1.0,
        target_temp: 1.0,
    }
}

/// Monte Carlo mean accepted against the exact expectation on random
/// V = 8, budget 6 trees. Each case passes within three standard errors.
pub fn expectation_cases(instances: usize, trials: usize, seed: u64) -> Result<Vec<CaseReport>> {
    par::try_map_indexed(instances, |i| {
        let mut rng = stream_rng(derive_seed(seed, &[i as u64]));
        let spec = random_pair(&mut rng, 8);
        let (target, draft) = spec.build()?;
        let prefix = [TokenId::from(rng.random_range(0..8usize))];
        let tree = build_tree_fixed(
            Tempered::new(&draft, spec.draft_temp),
            &prefix,
            6,
            rng.random(),
        )?;
        let targets = target_distributions_for_tree(
            Tempered::new(&*target, spec.target_temp),
            &prefix,
            &tree,
        )?;
        let sd = true_acceptance_probs(&tree, &targets)?;
        let exact = expected_accepted(&tree, &sd)?;
        let mc = monte_carlo_expected_accepted(&tree, &targets, trials, rng.random())?;
        let tol = (3.0 * mc.stderr).max(1e-12);
        Ok(CaseReport {
            instance: serde_json::json!({
                "spec": spec,
                "prefix": prefix,
                "tree_size": tree.len(),
                "mc_stderr": mc.stderr,
                "draft_approx": expected_accepted_draft_approx(&tree)?,
            }),
            expected: exact,
            observed: mc.mean,
            tolerance: tol,
            pass: (mc.mean - exact).abs() <= tol,
        })
    })
}

fn node_keys(tree: &TokenTree) -> Result<Vec<(Vec<TokenId>, usize)>> {
    let mut keys = tree
        .nodes()
        .iter()
        .map(|n| Ok((tree.path_tokens(n.id)?, n.sibling_index)))
        .collect::<Result<Vec<_>>>()?;
    keys.sort();
    Ok(keys)
}

/// Threshold construction at the m-th popped value against the fixed
/// construction with budget m (m <= 32), compared as node sets.
pub fn threshold_equivalence_cases(instances: usize, seed: u64) -> Result<Vec<CaseReport>> {
    par::try_map_indexed(instances, |i| {
        let mut rng = stream_rng(derive_seed(seed, &[i as u64]));
        let vocab = rng.random_range(2..=32);
        let spec = random_pair(&mut rng, vocab);
        let (_, draft) = spec.build()?;
        let d = Tempered::new(&draft, 0.6 + rng.random::<f64>());
        let m = rng.random_range(1..=32);
        let build_seed = rng.random();
        let prefix = [TokenId::from(rng.random_range(0..vocab))];
        let fixed = build_tree_fixed(d, &prefix, m, build_seed)?;
        let c = fixed.nodes().last().expect("budget >= 1").value;
        let thr = build_tree_threshold(d, &prefix, c, m, build_seed)?;
        let same = node_keys(&fixed)? == node_keys(&thr)?;
        Ok(CaseReport {
            instance: serde_json::json!({
                "vocab": vocab, "budget": m, "threshold": c, "fixed_size": fixed.len(), "threshold_size": thr.len(),
            }),
            expected: 1.0,
            observed: if same { 1.0 } else { 0.0 },
            tolerance: 0.0,
            pass: same,
        })
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SuiteParams {
    pub instances: usize,
    pub trials: usize,
    pub seed: u64,
}

/// Runs a suite. Unbiasedness and expectation use `trials` for their
/// Monte Carlo parts; expectation passes when at least 99% of cases do.
pub fn run_suite(suite: Suite, params: SuiteParams) -> Result<SuiteReport> {
    let SuiteParams {
        instances,
        trials,
        seed,
    } = params;
    Ok(match suite {
        Suite::Unbiasedness => {
            let mut cases = exact_unbiasedness_cases(instances, seed)?;
            if trials > 0 {
                cases.extend(monte_carlo_unbiasedness_cases(trials, seed)?);
            }
            let n = cases.len();
            SuiteReport::new(suite.name(), cases, n)
        }
        Suite::Optimality => {
            let cases = optimality_cases(instances, seed)?;
            let n = cases.len();
            SuiteReport::new(suite.name(), cases, n)
        }
        Suite::Expectation => {
            let cases = expectation_cases(instances, trials.max(2), seed)?;
            let required = (cases.len() * 99).div_ceil(100);
            SuiteReport::new(suite.name(), cases, required)
        }
        Suite::ThresholdEquivalence => {
            let cases = threshold_equivalence_cases(instances, seed)?;
            let n = cases.len();
            SuiteReport::new(suite.name(), cases, n)
        }
    })
}
