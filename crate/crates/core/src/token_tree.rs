//! The speculative token tree.
//!
//! Nodes are stored in creation order. Every expanded position (the root, or
//! a node whose children have been drawn) carries a [`PositionState`] with the
//! full draft distribution, the tokens drawn there so far, and the residual
//! left after removing them. Siblings are successive draws at one position.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::categorical::{Categorical, PositionTag, TokenId};
use crate::error::{Error, Result};

pub type NodeId = usize;

/// A place where tokens can be drawn: the prompt end or after a node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Position {
    Root,
    Node(NodeId),
}

impl Position {
    /// Dense index: the root is 0, node `i` is `i + 1`.
    #[inline]
    pub fn slot(self) -> usize {
        match self {
            Position::Root => 0,
            Position::Node(i) => i + 1,
        }
    }

    pub fn from_parent(parent: Option<NodeId>) -> Self {
        parent.map_or(Position::Root, Position::Node)
    }
}

impl fmt::Display for Position {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Position::Root => write!(f, "root"),
            Position::Node(i) => write!(f, "node {i}"),
        }
    }
}

/// One value per position: the root plus each node.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionMap<T> {
    root: T,
    nodes: Vec<T>,
}

impl<T> PositionMap<T> {
    pub fn new(root: T, nodes: Vec<T>) -> Self {
        Self { root, nodes }
    }

    pub fn get(&self, pos: Position) -> Option<&T> {
        match pos {
            Position::Root => Some(&self.root),
            Position::Node(i) => self.nodes.get(i),
        }
    }

    pub fn root(&self) -> &T {
        &self.root
    }

    pub fn nodes(&self) -> &[T] {
        &self.nodes
    }

    /// Total entries, root included.
    pub fn len(&self) -> usize {
        self.nodes.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeNode {
    pub id: NodeId,
    pub parent: Option<NodeId>,
    pub token: TokenId,
    pub sibling_index: usize,
    pub depth: usize,
    /// Estimated probability that this sampling is reached during verification.
    pub value: f64,
    /// Probability of `token` under the residual it was drawn from.
    pub sample_prob: f64,
}

impl TreeNode {
    pub fn position(&self) -> Position {
        Position::from_parent(self.parent)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PositionState {
    pub owner: Position,
    pub tag: PositionTag,
    pub draft_full: Categorical,
    pub sampled: Vec<TokenId>,
    pub children: Vec<NodeId>,
    pub residual: Categorical,
}

impl PositionState {
    fn new(owner: Position, tag: PositionTag, draft_full: Categorical) -> Self {
        Self {
            owner,
            tag,
            residual: draft_full.clone(),
            draft_full,
            sampled: Vec::new(),
            children: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeDump {
    pub id: NodeId,
    pub parent: Option<NodeId>,
    pub token: TokenId,
    pub sibling_index: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenTree {
    nodes: Vec<TreeNode>,
    positions: Vec<Option<PositionState>>,
    prefix_len: usize,
}

impl TokenTree {
    pub fn new(prefix_len: usize) -> Self {
        Self {
            nodes: Vec::new(),
            positions: vec![None],
            prefix_len,
        }
    }

    pub fn prefix_len(&self) -> usize {
        self.prefix_len
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    pub fn node_ids(&self) -> std::ops::Range<NodeId> {
        0..self.nodes.len()
    }

    pub fn node(&self, id: NodeId) -> Result<&TreeNode> {
        self.nodes.get(id).ok_or(Error::UnknownNode(id))
    }

    /// Deepest node depth, 0 for an empty tree.
    pub fn depth(&self) -> usize {
        self.nodes.iter().map(|n| n.depth).max().unwrap_or(0)
    }

    fn check_position(&self, pos: Position) -> Result<()> {
        match pos {
            Position::Root => Ok(()),
            Position::Node(i) if i < self.nodes.len() => Ok(()),
            Position::Node(i) => Err(Error::UnknownNode(i)),
        }
    }

    pub fn position(&self, pos: Position) -> Option<&PositionState> {
        self.positions.get(pos.slot()).and_then(Option::as_ref)
    }

    pub fn positions(&self) -> impl Iterator<Item = &PositionState> {
        self.positions.iter().flatten()
    }

    pub fn is_open(&self, pos: Position) -> bool {
        self.position(pos).is_some()
    }

    /// Children drawn at `pos`, in sampling order.
    pub fn children(&self, pos: Position) -> &[NodeId] {
        self.position(pos).map_or(&[], |s| s.children.as_slice())
    }

    /// Attaches the draft distribution at `pos`. Re-opening is a no-op that
    /// keeps the existing state.
    pub fn open_position(
        &mut self,
        pos: Position,
        draft_full: Categorical,
    ) -> Result<&PositionState> {
        self.check_position(pos)?;
        if draft_full.is_zero() {
            return Err(Error::EmptySupport);
        }
        if self.positions[pos.slot()].is_none() {
            let tag = self.position_tag(pos)?;
            self.positions[pos.slot()] = Some(PositionState::new(pos, tag, draft_full));
        }
        Ok(self.positions[pos.slot()].as_ref().expect("just opened"))
    }

    /// Records a draw of `token` at `pos` with estimated reach probability `value`.
    pub fn add_node(&mut self, pos: Position, token: TokenId, value: f64) -> Result<NodeId> {
        self.check_position(pos)?;
        if !(value.is_finite() && value > 0.0 && value <= 1.0 + 1e-12) {
            return Err(Error::InvalidParameter(format!(
                "node value {value} is outside (0, 1]"
            )));
        }
        let depth = match pos {
            Position::Root => 1,
            Position::Node(p) => self.nodes[p].depth + 1,
        };
        let id = self.nodes.len();
        let state = self.positions[pos.slot()]
            .as_mut()
            .ok_or_else(|| Error::PositionNotOpen(pos.to_string()))?;
        if token.index() >= state.draft_full.vocab_size() {
            return Err(Error::TokenOutOfRange(token));
        }
        if state.sampled.contains(&token) {
            return Err(Error::DuplicateToken { token });
        }
        let sample_prob = state.residual.prob(token);
        if sample_prob <= 0.0 {
            return Err(Error::ZeroProbabilityToken { token });
        }
        let residual = state.residual.remove_and_renorm(token)?;
        let sibling_index = state.sampled.len();
        state.sampled.push(token);
        state.children.push(id);
        state.residual = residual;

        self.nodes.push(TreeNode {
            id,
            parent: match pos {
                Position::Root => None,
                Position::Node(p) => Some(p),
            },
            token,
            sibling_index,
            depth,
            value,
            sample_prob,
        });
        self.positions.push(None);
        Ok(id)
    }

    /// Path from the top of the tree down to `id`, inclusive.
    pub fn ancestors(&self, id: NodeId) -> Result<Vec<NodeId>> {
        let mut path = Vec::with_capacity(self.node(id)?.depth);
        let mut cur = Some(id);
        while let Some(n) = cur {
            path.push(n);
            cur = self.nodes[n].parent;
        }
        path.reverse();
        Ok(path)
    }

    pub fn previous_siblings(&self, id: NodeId) -> Result<Vec<NodeId>> {
        let node = self.node(id)?;
        Ok(self.children(node.position())[..node.sibling_index].to_vec())
    }

    /// Tokens along the path to `id`, inclusive.
    pub fn path_tokens(&self, id: NodeId) -> Result<Vec<TokenId>> {
        Ok(self
            .ancestors(id)?
            .into_iter()
            .map(|n| self.nodes[n].token)
            .collect())
    }

    pub fn position_path(&self, pos: Position) -> Result<Vec<TokenId>> {
        match pos {
            Position::Root => Ok(Vec::new()),
            Position::Node(id) => self.path_tokens(id),
        }
    }

    pub fn position_tag(&self, pos: Position) -> Result<PositionTag> {
        Ok(PositionTag::from_path(&self.position_path(pos)?))
    }

    /// Reach probability in closed form: the product of the full draft
    /// probabilities of the strict ancestors, times one minus the full draft
    /// mass of the earlier siblings.
    pub fn closed_form_value(&self, id: NodeId) -> Result<f64> {
        let node = self.node(id)?;
        let mut reach = 1.0;
        let mut cur = node.parent;
        while let Some(a) = cur {
            let an = &self.nodes[a];
            reach *= self.full_draft_prob(an)?;
            cur = an.parent;
        }
        let state = self
            .position(node.position())
            .ok_or_else(|| Error::PositionNotOpen(node.position().to_string()))?;
        let prior: f64 = state.sampled[..node.sibling_index]
            .iter()
            .map(|&t| state.draft_full.prob(t))
            .sum();
        Ok(reach * (1.0 - prior))
    }

    fn full_draft_prob(&self, node: &TreeNode) -> Result<f64> {
        self.position(node.position())
            .map(|s| s.draft_full.prob(node.token))
            .ok_or_else(|| Error::PositionNotOpen(node.position().to_string()))
    }

    /// Parent pointers, for mask analysis.
    pub fn parents(&self) -> Vec<Option<NodeId>> {
        self.nodes.iter().map(|n| n.parent).collect()
    }

    pub fn dump(&self) -> Vec<NodeDump> {
        self.nodes
            .iter()
            .map(|n| NodeDump {
                id: n.id,
                parent: n.parent,
                token: n.token,
                sibling_index: n.sibling_index,
                value: n.value,
            })
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.dump()).expect("tree dump serializes")
    }
}
