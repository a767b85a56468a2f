//! Dynamic token-tree construction.
//!
//! Every sampling slot in the tree has an estimated value: the probability,
//! under the draft-probability proxy, that verification ever reaches it. The
//! first sampling at the root has value 1. Drawing `y` from residual `R` at a
//! slot of value `v` opens two new slots:
//!
//! * the first child of `y`, value `v * R[y]`, residual = draft at the new context;
//! * the next sibling at the same position, value `v * (1 - R[y])`, residual =
//!   `R` with `y` removed.
//!
//! Values only shrink along both kinds of edges, so picking the best open
//! slot each time ([`build_tree_fixed`]) yields the value-maximizing tree of
//! the requested size. [`build_tree_threshold`] selects the same slots by
//! keeping everything above a cutoff, one layer at a time.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use crate::categorical::{Categorical, PositionTag, RandomKey, TokenId};
use crate::error::{Error, Result};
use crate::lm::Tempered;
use crate::token_tree::{Position, TokenTree};

/// An open sampling slot.
#[derive(Debug, Clone)]
pub struct HeapEntry {
    pub value: f64,
    pub residual: Categorical,
    pub position: Position,
    pub position_tag: PositionTag,
    seq: u64,
}

impl PartialEq for HeapEntry {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for HeapEntry {}

impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for HeapEntry {
    // Max-heap on value; equal values pop in insertion order.
    fn cmp(&self, other: &Self) -> Ordering {
        self.value
            .total_cmp(&other.value)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

#[derive(Default)]
struct SlotHeap {
    heap: BinaryHeap<HeapEntry>,
    next_seq: u64,
}

impl SlotHeap {
    fn push(
        &mut self,
        value: f64,
        residual: Categorical,
        position: Position,
        position_tag: PositionTag,
    ) {
        if residual.is_zero() || value <= 0.0 {
            return;
        }
        self.heap.push(HeapEntry {
            value,
            residual,
            position,
            position_tag,
            seq: self.next_seq,
        });
        self.next_seq += 1;
    }

    fn pop(&mut self) -> Option<HeapEntry> {
        self.heap.pop()
    }
}

fn context_for(prefix: &[TokenId], tree: &TokenTree, pos: Position) -> Result<Vec<TokenId>> {
    let mut ctx = prefix.to_vec();
    ctx.extend(tree.position_path(pos)?);
    Ok(ctx)
}

/// Draws the next sibling at `pos` with the keyed uniform for its sampling
/// index, records it with reach value `value`, and returns the new node with
/// the residual probability it was drawn with.
pub(crate) fn draw_at(
    tree: &mut TokenTree,
    pos: Position,
    value: f64,
    seed: u64,
) -> Result<(usize, f64)> {
    let state = tree
        .position(pos)
        .ok_or_else(|| Error::PositionNotOpen(pos.to_string()))?;
    let key = RandomKey::new(seed, state.tag, state.sampled.len() as u64);
    let token = state.residual.sample(key.uniform())?;
    let r = state.residual.prob(token);
    let id = tree.add_node(pos, token, value)?;
    Ok((id, r))
}

/// Opens `pos` with the draft distribution at its context if not yet open.
pub(crate) fn ensure_open(
    draft: Tempered<'_>,
    prefix: &[TokenId],
    tree: &mut TokenTree,
    pos: Position,
) -> Result<()> {
    if !tree.is_open(pos) {
        let d = draft.distribution(&context_for(prefix, tree, pos)?)?;
        tree.open_position(pos, d)?;
    }
    Ok(())
}

/// Greedy fixed-budget construction: pop the best open slot `budget` times.
///
/// Node values are the popped slot values, so they appear in non-increasing
/// order of node id. Fewer than `budget` nodes are produced only when every
/// slot is exhausted.
pub fn build_tree_fixed(
    draft: Tempered<'_>,
    prefix: &[TokenId],
    budget: usize,
    seed: u64,
) -> Result<TokenTree> {
    if budget == 0 {
        return Err(Error::ZeroBudget);
    }
    let mut tree = TokenTree::new(prefix.len());
    ensure_open(draft, prefix, &mut tree, Position::Root)?;
    let root = tree.position(Position::Root).expect("root open");
    let mut heap = SlotHeap::default();
    heap.push(1.0, root.draft_full.clone(), Position::Root, root.tag);

    while tree.len() < budget {
        let Some(entry) = heap.pop() else { break };
        let (id, r) = draw_at(&mut tree, entry.position, entry.value, seed)?;
        let token = tree.nodes()[id].token;
        debug_assert_eq!(
            tree.position(entry.position).map(|s| s.sampled.len()),
            Some(tree.nodes()[id].sibling_index + 1)
        );

        let sibling = entry.residual.remove_and_renorm(token)?;
        heap.push(
            entry.value * (1.0 - r),
            sibling,
            entry.position,
            entry.position_tag,
        );

        // The child slot of the last node can never be popped.
        if tree.len() < budget {
            let child = Position::Node(id);
            ensure_open(draft, prefix, &mut tree, child)?;
            let state = tree.position(child).expect("child open");
            let (d, tag) = (state.draft_full.clone(), state.tag);
            heap.push(entry.value * r, d, child, tag);
        }
    }
    Ok(tree)
}

/// Keeps the `cap` largest values seen so far.
struct TopValues {
    cap: usize,
    heap: BinaryHeap<Reverse<OrdF64>>,
}

struct OrdF64(f64);
impl PartialEq for OrdF64 {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for OrdF64 {}
impl PartialOrd for OrdF64 {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for OrdF64 {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

impl TopValues {
    fn new(cap: usize) -> Self {
        Self {
            cap,
            heap: BinaryHeap::with_capacity(cap + 1),
        }
    }

    /// False once `cap` strictly larger values are known. Ties stay in so the
    /// final cut can apply the fixed builder's order.
    fn admits(&self, v: f64) -> bool {
        self.heap.len() < self.cap || self.heap.peek().is_some_and(|m| v >= m.0 .0)
    }

    fn push(&mut self, v: f64) {
        self.heap.push(Reverse(OrdF64(v)));
        if self.heap.len() > self.cap {
            self.heap.pop();
        }
    }
}

/// Layer-by-layer construction keeping every slot with value `>= threshold`.
///
/// Within one position, siblings are drawn while the next slot's value stays
/// at or above the threshold; a node's child slot is queued for the next
/// layer when its value clears it too. When more than `size_cap` slots
/// qualify, the `size_cap` largest are kept, ties resolved as in
/// [`build_tree_fixed`].
pub fn build_tree_threshold(
    draft: Tempered<'_>,
    prefix: &[TokenId],
    threshold: f64,
    size_cap: usize,
    seed: u64,
) -> Result<TokenTree> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "threshold must lie in (0, 1], got {threshold}"
        )));
    }
    if size_cap == 0 {
        return Err(Error::ZeroBudget);
    }
    let mut tree = TokenTree::new(prefix.len());
    let mut top = TopValues::new(size_cap);
    // Each entry carries the slot depth of its first draw: the number of
    // slots that must be popped before it, itself included. A node deeper
    // than `size_cap` can never make the cut.
    let mut layer = vec![(Position::Root, 1.0, 1usize)];

    while !layer.is_empty() {
        let mut next = Vec::new();
        for (pos, entry_value, entry_depth) in layer {
            if !top.admits(entry_value) || entry_depth > size_cap {
                continue;
            }
            ensure_open(draft, prefix, &mut tree, pos)?;
            let mut v = entry_value;
            let mut depth = entry_depth;
            while v >= threshold && top.admits(v) && depth <= size_cap {
                if tree.position(pos).expect("open").residual.is_zero() {
                    break;
                }
                let (id, r) = draw_at(&mut tree, pos, v, seed)?;
                top.push(v);
                let child = v * r;
                if child >= threshold && top.admits(child) {
                    next.push((Position::Node(id), child, depth + 1));
                }
                v *= 1.0 - r;
                depth += 1;
            }
        }
        layer = next;
    }

    if tree.len() <= size_cap {
        return Ok(tree);
    }
    truncate_to_top(&tree, size_cap)
}

/// Rebuilds `tree` with the `keep` nodes [`build_tree_fixed`] would pop
/// first: the slot heap is replayed over the drawn nodes, so equal values
/// resolve by insertion order exactly as in the fixed builder.
fn truncate_to_top(tree: &TokenTree, keep: usize) -> Result<TokenTree> {
    let mut kept = vec![false; tree.len()];
    let mut heap = BinaryHeap::new();
    let mut seq = 0u64;
    let mut push = |heap: &mut BinaryHeap<(OrdF64, Reverse<u64>, usize)>, id: usize| {
        heap.push((OrdF64(tree.nodes()[id].value), Reverse(seq), id));
        seq += 1;
    };
    if let Some(&first) = tree.children(Position::Root).first() {
        push(&mut heap, first);
    }
    for _ in 0..keep {
        let Some((_, _, id)) = heap.pop() else { break };
        kept[id] = true;
        let node = &tree.nodes()[id];
        if let Some(&next) = tree.children(node.position()).get(node.sibling_index + 1) {
            push(&mut heap, next);
        }
        if let Some(&child) = tree.children(Position::Node(id)).first() {
            push(&mut heap, child);
        }
    }

    let mut out = TokenTree::new(tree.prefix_len());
    let mut remap = vec![usize::MAX; tree.len()];
    let root = tree.position(Position::Root).expect("root open");
    out.open_position(Position::Root, root.draft_full.clone())?;
    for node in tree.nodes().iter().filter(|n| kept[n.id]) {
        let pos = match node.parent {
            None => Position::Root,
            Some(p) => {
                debug_assert!(kept[p]);
                let np = Position::Node(remap[p]);
                if !out.is_open(np) {
                    let d = tree.position(Position::Node(p)).expect("parent expanded");
                    out.open_position(np, d.draft_full.clone())?;
                }
                np
            }
        };
        remap[node.id] = out.add_node(pos, node.token, node.value)?;
    }
    for node in tree.nodes().iter().filter(|n| kept[n.id]) {
        if let Some(state) = tree.position(Position::Node(node.id)) {
            out.open_position(Position::Node(remap[node.id]), state.draft_full.clone())?;
        }
    }
    Ok(out)
}

/// Expected number of accepted tree tokens (bonus excluded) given the
/// per-node conditional acceptance probabilities `sd`.
///
/// A node is tested when its parent was accepted (the root always counts as
/// accepted) and every earlier sibling was rejected; it then contributes
/// `sd[u]`. The parent's acceptance probability already carries its own
/// sibling factors.
pub fn expected_accepted(tree: &TokenTree, sd: &[f64]) -> Result<f64> {
    if sd.len() != tree.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} acceptance probabilities for {} nodes",
            sd.len(),
            tree.len()
        )));
    }
    if let Some(&bad) = sd.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::ProbabilityOutOfRange(bad));
    }
    // running[slot] = probability every sibling drawn so far at that slot was rejected
    let mut running = vec![1.0; tree.len() + 1];
    let mut accept = vec![0.0; tree.len()];
    for node in tree.nodes() {
        let base = node.parent.map_or(1.0, |p| accept[p]);
        let slot = node.position().slot();
        accept[node.id] = base * running[slot] * sd[node.id];
        running[slot] *= 1.0 - sd[node.id];
    }
    Ok(accept.iter().sum())
}

/// [`expected_accepted`] with each node's acceptance approximated by the
/// probability it was sampled with from its position's residual.
pub fn expected_accepted_draft_approx(tree: &TokenTree) -> Result<f64> {
    let sd: Vec<f64> = tree.nodes().iter().map(|n| n.sample_prob).collect();
    expected_accepted(tree, &sd)
}

fn default_draft_step() -> f64 {
    1.0
}
fn default_target_step() -> f64 {
    2000.0
}

/// Unit costs for the latency model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostParams {
    #[serde(default = "default_draft_step")]
    pub draft_step: f64,
    #[serde(default = "default_target_step")]
    pub target_step: f64,
    #[serde(default)]
    pub per_node_overhead: f64,
}

impl Default for CostParams {
    fn default() -> Self {
        Self {
            draft_step: default_draft_step(),
            target_step: default_target_step(),
            per_node_overhead: 0.0,
        }
    }
}

impl CostParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("draft_step", self.draft_step),
            ("target_step", self.target_step),
            ("per_node_overhead", self.per_node_overhead),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidParameter(format!("{name} must be >= 0")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatencyMode {
    /// One draft call per node.
    Greedy,
    /// One batched draft call per tree layer.
    Layered,
}

/// Modeled time per generated token for one speculation step.
///
/// Greedy: `(c N log2 N + T_t + N T_d) / e`; layered: `(c N log2 N + T_t + D T_d) / e`.
pub fn estimate_latency(
    tree_size: usize,
    depth: usize,
    accepted: f64,
    costs: &CostParams,
    mode: LatencyMode,
) -> Result<f64> {
    if accepted.is_nan() || accepted <= 0.0 {
        return Err(Error::InvalidParameter(format!(
            "accepted tokens per step must be > 0, got {accepted}"
        )));
    }
    if tree_size == 0 || depth == 0 || depth > tree_size {
        return Err(Error::InvalidParameter(format!(
            "need 1 <= depth ({depth}) <= tree size ({tree_size})"
        )));
    }
    let n = tree_size as f64;
    let draft_calls = match mode {
        LatencyMode::Greedy => n,
        LatencyMode::Layered => depth as f64,
    };
    let step =
        costs.per_node_overhead * n * n.log2() + costs.target_step + draft_calls * costs.draft_step;
    Ok(step / accepted)
}
