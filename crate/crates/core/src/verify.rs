//! Tree verification by multi-branch rejection sampling.
//!
//! At each position the branches are tested in sampling order. Branch `y` is
//! accepted with probability `min(1, R[y] / D[y])`, where `D` is the draft
//! residual it was drawn from and `R` starts as the target distribution. A
//! rejection replaces `R` with `normalize(max(R - D, 0))` and removes `y`
//! from `D`. If nothing is accepted a bonus token is drawn from `R`; if the
//! walk ends on a node without children the bonus comes from the target at
//! that node. Either way the emitted token at every position is distributed
//! exactly as the target.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::categorical::{residual_target, stream_rng, Categorical, TokenId};
use crate::error::{Error, Result};
use crate::token_tree::{NodeId, Position, PositionMap, TokenTree};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchRecord {
    pub node: NodeId,
    pub accepted: bool,
    pub uniform: f64,
    /// `min(1, R[y] / D[y])` at the time of the test.
    pub accept_prob: f64,
    /// `D[y]`: probability of the token under the draft residual it was drawn from.
    pub draft_prob: f64,
    /// Position among the siblings tested at this node; 0 is drawn from the full draft.
    pub sibling: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyResult {
    /// Accepted tree tokens followed by the bonus token.
    pub accepted: Vec<TokenId>,
    pub accepted_node_ids: Vec<NodeId>,
    pub bonus_from_residual: bool,
    pub bonus_token: TokenId,
    pub trace: Vec<BranchRecord>,
}

impl VerifyResult {
    /// Tree tokens accepted, bonus excluded.
    pub fn accepted_tree_tokens(&self) -> usize {
        self.accepted_node_ids.len()
    }

    /// One JSON object per branch test.
    pub fn trace_json_lines(&self) -> String {
        let mut out = String::new();
        for rec in &self.trace {
            out.push_str(&serde_json::to_string(rec).expect("trace record serializes"));
            out.push('\n');
        }
        out
    }
}

fn target_at(targets: &PositionMap<Categorical>, pos: Position) -> Result<&Categorical> {
    targets
        .get(pos)
        .ok_or_else(|| Error::MissingTargetDistribution(pos.to_string()))
}

pub fn verify_tree(
    tree: &TokenTree,
    targets: &PositionMap<Categorical>,
    seed: u64,
) -> Result<VerifyResult> {
    let mut rng = stream_rng(seed);
    let mut accepted = Vec::new();
    let mut accepted_node_ids = Vec::new();
    let mut trace = Vec::new();
    let mut pos = Position::Root;

    loop {
        let target = target_at(targets, pos)?;
        let children = tree.children(pos);
        if children.is_empty() {
            let bonus = target.sample(rng.random::<f64>())?;
            accepted.push(bonus);
            return Ok(VerifyResult {
                accepted,
                accepted_node_ids,
                bonus_from_residual: false,
                bonus_token: bonus,
                trace,
            });
        }

        let state = tree.position(pos).expect("position with children is open");
        let mut draft = state.draft_full.clone();
        let mut residual = target.clone();
        let mut next = None;
        for (sibling, &child) in children.iter().enumerate() {
            let y = tree.nodes()[child].token;
            let d = draft.prob(y);
            debug_assert!(d > 0.0, "branch token drawn with zero draft mass");
            let accept_prob = (residual.prob(y) / d).min(1.0);
            let u = rng.random::<f64>();
            let ok = u < accept_prob;
            trace.push(BranchRecord {
                node: child,
                accepted: ok,
                uniform: u,
                accept_prob,
                draft_prob: d,
                sibling,
            });
            if ok {
                next = Some(child);
                break;
            }
            residual = residual_target(&residual, &draft)?;
            if residual.is_zero() {
                return Err(Error::ResidualCollapsed(y));
            }
            draft = draft.remove_and_renorm(y)?;
            if draft.is_zero() {
                break;
            }
        }

        match next {
            Some(child) => {
                accepted.push(tree.nodes()[child].token);
                accepted_node_ids.push(child);
                pos = Position::Node(child);
            }
            None => {
                let bonus = residual.sample(rng.random::<f64>())?;
                accepted.push(bonus);
                return Ok(VerifyResult {
                    accepted,
                    accepted_node_ids,
                    bonus_from_residual: true,
                    bonus_token: bonus,
                    trace,
                });
            }
        }
    }
}
