//! Tree-attention masks, block occupancy and block-friendly node orders.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::categorical::stream_rng;
use crate::error::{Error, Result};
use crate::par;
use crate::token_tree::TokenTree;

/// Parent array of a forest whose parents precede their children.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeShape {
    parents: Vec<Option<usize>>,
}

impl TreeShape {
    pub fn new(parents: Vec<Option<usize>>) -> Result<Self> {
        for (i, p) in parents.iter().enumerate() {
            if let Some(p) = *p {
                if p >= i {
                    return Err(Error::ShapeMismatch(format!(
                        "node {i} has parent {p}, parents must precede children"
                    )));
                }
            }
        }
        Ok(Self { parents })
    }

    pub fn from_tree(tree: &TokenTree) -> Self {
        Self {
            parents: tree.parents(),
        }
    }

    pub fn chain(n: usize) -> Self {
        Self {
            parents: (0..n).map(|i| i.checked_sub(1)).collect(),
        }
    }

    /// Node 0 with `n - 1` children.
    pub fn star(n: usize) -> Self {
        Self {
            parents: (0..n).map(|i| (i > 0).then_some(0)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.parents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parents.is_empty()
    }

    pub fn parents(&self) -> &[Option<usize>] {
        &self.parents
    }

    /// Children of each node in index order, plus the top-level nodes.
    fn children(&self) -> (Vec<Vec<usize>>, Vec<usize>) {
        let mut kids = vec![Vec::new(); self.len()];
        let mut roots = Vec::new();
        for (i, p) in self.parents.iter().enumerate() {
            match p {
                Some(p) => kids[*p].push(i),
                None => roots.push(i),
            }
        }
        (kids, roots)
    }

    pub fn subtree_sizes(&self) -> Vec<usize> {
        let mut size = vec![1; self.len()];
        for i in (0..self.len()).rev() {
            if let Some(p) = self.parents[i] {
                size[p] += size[i];
            }
        }
        size
    }

    pub fn depths(&self) -> Vec<usize> {
        let mut depth = vec![0; self.len()];
        for i in 0..self.len() {
            if let Some(p) = self.parents[i] {
                depth[i] = depth[p] + 1;
            }
        }
        depth
    }
}

/// Uniform random-attachment tree: node `i > 0` picks its parent uniformly
/// from `0..i`.
pub fn random_tree(n: usize, seed: u64) -> Result<TreeShape> {
    if n == 0 {
        return Err(Error::InvalidParameter("random tree needs n >= 1".into()));
    }
    let mut rng = stream_rng(seed);
    let parents = (0..n)
        .map(|i| (i > 0).then(|| rng.random_range(0..i)))
        .collect();
    Ok(TreeShape { parents })
}

/// Node order: `order[k]` is the node placed at row/column `k`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Permutation {
    pub order: Vec<usize>,
}

impl Permutation {
    pub fn identity(n: usize) -> Self {
        Self {
            order: (0..n).collect(),
        }
    }
}

fn preorder(shape: &TreeShape, sort_children: impl Fn(&mut Vec<usize>)) -> Permutation {
    let (mut kids, mut roots) = shape.children();
    for k in &mut kids {
        sort_children(k);
    }
    sort_children(&mut roots);
    let mut order = Vec::with_capacity(shape.len());
    let mut stack: Vec<usize> = roots.into_iter().rev().collect();
    while let Some(u) = stack.pop() {
        order.push(u);
        stack.extend(kids[u].iter().rev());
    }
    Permutation { order }
}

/// Depth-first preorder, siblings in sampling (index) order.
pub fn dfs_order(shape: &TreeShape) -> Permutation {
    preorder(shape, |_| {})
}

/// Preorder visiting larger subtrees first; equal sizes keep sampling order.
pub fn hpd_order(shape: &TreeShape) -> Permutation {
    let size = shape.subtree_sizes();
    preorder(shape, |k| {
        k.sort_by(|&a, &b| size[b].cmp(&size[a]).then(a.cmp(&b)))
    })
}

/// Relabels `shape` so that node `perm.order[k]` becomes node `k`.
pub fn apply_permutation(shape: &TreeShape, perm: &Permutation) -> Result<TreeShape> {
    let n = shape.len();
    if perm.order.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "permutation of {} entries for {n} nodes",
            perm.order.len()
        )));
    }
    let mut new_index = vec![usize::MAX; n];
    for (k, &u) in perm.order.iter().enumerate() {
        if u >= n || new_index[u] != usize::MAX {
            return Err(Error::InvalidParameter("order is not a permutation".into()));
        }
        new_index[u] = k;
    }
    let mut parents = vec![None; n];
    for (k, &u) in perm.order.iter().enumerate() {
        if let Some(p) = shape.parents[u] {
            if new_index[p] > k {
                return Err(Error::NonTopologicalPermutation);
            }
            parents[k] = Some(new_index[p]);
        }
    }
    Ok(TreeShape { parents })
}

/// Boolean attention mask: one row per tree node, columns are the prefix
/// followed by the tree nodes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TreeMask {
    n: usize,
    prefix_len: usize,
    bits: Vec<bool>,
}

impl TreeMask {
    pub fn from_bits(rows: Vec<Vec<bool>>, prefix_len: usize) -> Result<Self> {
        let n = rows.len();
        let width = prefix_len + n;
        if rows.iter().any(|r| r.len() != width) {
            return Err(Error::ShapeMismatch(format!(
                "every row needs {width} columns"
            )));
        }
        Ok(Self {
            n,
            prefix_len,
            bits: rows.into_iter().flatten().collect(),
        })
    }

    pub fn rows(&self) -> usize {
        self.n
    }

    pub fn cols(&self) -> usize {
        self.prefix_len + self.n
    }

    pub fn prefix_len(&self) -> usize {
        self.prefix_len
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.cols() + col]
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Plain-text PBM (P1) image, 1 = attend.
    pub fn to_pbm(&self) -> String {
        let mut s = format!("P1\n{} {}\n", self.cols(), self.rows());
        for r in 0..self.rows() {
            let row: Vec<&str> = (0..self.cols())
                .map(|c| if self.get(r, c) { "1" } else { "0" })
                .collect();
            s.push_str(&row.join(" "));
            s.push('\n');
        }
        s
    }
}

/// Each node attends to the prefix, its ancestors and itself.
pub fn mask_from_tree(shape: &TreeShape, prefix_len: usize) -> Result<TreeMask> {
    if shape.is_empty() {
        return Err(Error::Empty("tree".into()));
    }
    let n = shape.len();
    let cols = prefix_len + n;
    let mut bits = vec![false; n * cols];
    for i in 0..n {
        let row = &mut bits[i * cols..(i + 1) * cols];
        row[..prefix_len].fill(true);
        let mut u = Some(i);
        while let Some(j) = u {
            row[prefix_len + j] = true;
            u = shape.parents[j];
        }
    }
    Ok(TreeMask {
        n,
        prefix_len,
        bits,
    })
}

/// Number of grid-aligned `block`×`block` tiles holding at least one set
/// bit; ragged edge tiles count as whole tiles.
pub fn count_nonzero_blocks(mask: &TreeMask, block: usize) -> Result<usize> {
    if block == 0 {
        return Err(Error::InvalidParameter("block size must be >= 1".into()));
    }
    let col_tiles = mask.cols().div_ceil(block);
    let mut count = 0;
    let mut seen = vec![false; col_tiles];
    for r0 in (0..mask.rows()).step_by(block) {
        seen.fill(false);
        for r in r0..(r0 + block).min(mask.rows()) {
            for c in 0..mask.cols() {
                if mask.get(r, c) {
                    seen[c / block] = true;
                }
            }
        }
        count += seen.iter().filter(|&&s| s).count();
    }
    Ok(count)
}

/// Block count of `shape` laid out in `perm` order.
pub fn blocks_in_order(
    shape: &TreeShape,
    perm: &Permutation,
    prefix_len: usize,
    block: usize,
) -> Result<usize> {
    count_nonzero_blocks(
        &mask_from_tree(&apply_permutation(shape, perm)?, prefix_len)?,
        block,
    )
}

/// Result of the exhaustive order search.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OrderSearch {
    pub best_count: usize,
    pub best_order: Permutation,
    pub orders_examined: u64,
}

pub const EXHAUSTIVE_MAX_NODES: usize = 10;

/// Minimum block count over every topological order (n ≤ 10).
pub fn exhaustive_best_order(
    shape: &TreeShape,
    prefix_len: usize,
    block: usize,
) -> Result<OrderSearch> {
    let n = shape.len();
    if n > EXHAUSTIVE_MAX_NODES {
        return Err(Error::InvalidParameter(format!(
            "exhaustive order search supports at most {EXHAUSTIVE_MAX_NODES} nodes, got {n}"
        )));
    }
    if n == 0 {
        return Err(Error::Empty("tree".into()));
    }
    let mut best: Option<(usize, Vec<usize>)> = None;
    let mut examined = 0u64;
    let mut placed = vec![false; n];
    let mut order = Vec::with_capacity(n);

    fn rec(
        shape: &TreeShape,
        prefix_len: usize,
        block: usize,
        placed: &mut [bool],
        order: &mut Vec<usize>,
        best: &mut Option<(usize, Vec<usize>)>,
        examined: &mut u64,
    ) -> Result<()> {
        let n = shape.len();
        if order.len() == n {
            *examined += 1;
            let c = blocks_in_order(
                shape,
                &Permutation {
                    order: order.clone(),
                },
                prefix_len,
                block,
            )?;
            if best.as_ref().is_none_or(|(b, _)| c < *b) {
                *best = Some((c, order.clone()));
            }
            return Ok(());
        }
        for u in 0..n {
            let ready = !placed[u] && shape.parents[u].is_none_or(|p| placed[p]);
            if ready {
                placed[u] = true;
                order.push(u);
                rec(shape, prefix_len, block, placed, order, best, examined)?;
                order.pop();
                placed[u] = false;
            }
        }
        Ok(())
    }

    rec(
        shape,
        prefix_len,
        block,
        &mut placed,
        &mut order,
        &mut best,
        &mut examined,
    )?;
    let (best_count, order) = best.expect("at least one topological order");
    Ok(OrderSearch {
        best_count,
        best_order: Permutation { order },
        orders_examined: examined,
    })
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn random(rows: usize, cols: usize, seed: u64) -> Self {
        let mut rng = stream_rng(seed);
        let data = (0..rows * cols)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        Self { rows, cols, data }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

fn check_attention_shapes(q: &Matrix, k: &Matrix, v: &Matrix, mask: &TreeMask) -> Result<()> {
    if q.rows != mask.rows() {
        return Err(Error::ShapeMismatch(format!(
            "Q has {} rows, mask {}",
            q.rows,
            mask.rows()
        )));
    }
    if k.rows != mask.cols() || v.rows != mask.cols() {
        return Err(Error::ShapeMismatch(format!(
            "K/V need {} rows, got {}/{}",
            mask.cols(),
            k.rows,
            v.rows
        )));
    }
    if q.cols != k.cols {
        return Err(Error::ShapeMismatch("Q and K head dims differ".into()));
    }
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `softmax(Q Kᵀ / sqrt(d), masked) V` computed row by row over the full width.
pub fn dense_masked_attention(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    mask: &TreeMask,
) -> Result<Matrix> {
    check_attention_shapes(q, k, v, mask)?;
    let scale = 1.0 / (q.cols as f64).sqrt();
    let mut out = vec![0.0; q.rows * v.cols];
    for i in 0..q.rows {
        let scores: Vec<Option<f64>> = (0..k.rows)
            .map(|j| mask.get(i, j).then(|| dot(q.row(i), k.row(j)) * scale))
            .collect();
        let max = scores
            .iter()
            .flatten()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(Error::NoUnmaskedEntries(i));
        }
        let mut z = 0.0;
        let row = &mut out[i * v.cols..(i + 1) * v.cols];
        for (j, s) in scores.iter().enumerate() {
            if let Some(s) = s {
                let w = (s - max).exp();
                z += w;
                for (o, x) in row.iter_mut().zip(v.row(j)) {
                    *o += w * x;
                }
            }
        }
        row.iter_mut().for_each(|o| *o /= z);
    }
    Matrix::new(q.rows, v.cols, out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockedAttention {
    pub output: Matrix,
    pub tiles_computed: usize,
    pub tiles_skipped: usize,
}

/// Tile-by-tile masked attention with an online softmax; tiles whose mask
/// is all zero are never touched.
pub fn blocked_masked_attention_reference(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    mask: &TreeMask,
    block: usize,
) -> Result<BlockedAttention> {
    check_attention_shapes(q, k, v, mask)?;
    if block == 0 {
        return Err(Error::InvalidParameter("block size must be >= 1".into()));
    }
    let scale = 1.0 / (q.cols as f64).sqrt();
    let dv = v.cols;
    let mut out = vec![0.0; q.rows * dv];
    let (mut computed, mut skipped) = (0, 0);

    for r0 in (0..q.rows).step_by(block) {
        let r1 = (r0 + block).min(q.rows);
        let mut m = vec![f64::NEG_INFINITY; r1 - r0];
        let mut l = vec![0.0; r1 - r0];
        let mut acc = vec![0.0; (r1 - r0) * dv];
        for c0 in (0..k.rows).step_by(block) {
            let c1 = (c0 + block).min(k.rows);
            if !(r0..r1).any(|i| (c0..c1).any(|j| mask.get(i, j))) {
                skipped += 1;
                continue;
            }
            computed += 1;
            for i in r0..r1 {
                let li = i - r0;
                let scores: Vec<(usize, f64)> = (c0..c1)
                    .filter(|&j| mask.get(i, j))
                    .map(|j| (j, dot(q.row(i), k.row(j)) * scale))
                    .collect();
                let Some(tile_max) = scores.iter().map(|s| s.1).reduce(f64::max) else {
                    continue;
                };
                let new_m = m[li].max(tile_max);
                let correction = (m[li] - new_m).exp();
                l[li] *= correction;
                let a = &mut acc[li * dv..(li + 1) * dv];
                a.iter_mut().for_each(|x| *x *= correction);
                for (j, s) in scores {
                    let w = (s - new_m).exp();
                    l[li] += w;
                    for (x, y) in a.iter_mut().zip(v.row(j)) {
                        *x += w * y;
                    }
                }
                m[li] = new_m;
            }
        }
        for i in r0..r1 {
            let li = i - r0;
            if l[li] == 0.0 {
                return Err(Error::NoUnmaskedEntries(i));
            }
            for d in 0..dv {
                out[i * dv + d] = acc[li * dv + d] / l[li];
            }
        }
    }
    Ok(BlockedAttention {
        output: Matrix::new(q.rows, dv, out)?,
        tiles_computed: computed,
        tiles_skipped: skipped,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum OrderKind {
    Original,
    Dfs,
    Hpd,
}

impl OrderKind {
    pub const ALL: [OrderKind; 3] = [OrderKind::Original, OrderKind::Dfs, OrderKind::Hpd];

    pub fn name(self) -> &'static str {
        match self {
            OrderKind::Original => "original",
            OrderKind::Dfs => "dfs",
            OrderKind::Hpd => "hpd",
        }
    }

    pub fn permutation(self, shape: &TreeShape) -> Permutation {
        match self {
            OrderKind::Original => Permutation::identity(shape.len()),
            OrderKind::Dfs => dfs_order(shape),
            OrderKind::Hpd => hpd_order(shape),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockCountStat {
    pub n: usize,
    pub prefix: usize,
    pub block: usize,
    pub order: OrderKind,
    pub mean: f64,
    pub stddev: f64,
    pub samples: usize,
}

/// Mean and sample standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Block counts for each order over a set of trees.
pub fn block_count_stats(
    shapes: &[TreeShape],
    prefix: usize,
    block: usize,
    orders: &[OrderKind],
) -> Result<Vec<BlockCountStat>> {
    let n = shapes.first().map_or(0, TreeShape::len);
    let per_tree = par::try_map_slice(shapes, |s| {
        orders
            .iter()
            .map(|o| blocks_in_order(s, &o.permutation(s), prefix, block).map(|c| c as f64))
            .collect::<Result<Vec<f64>>>()
    })?;
    Ok(orders
        .iter()
        .enumerate()
        .map(|(k, &order)| {
            let xs: Vec<f64> = per_tree.iter().map(|v| v[k]).collect();
            let (mean, stddev) = mean_std(&xs);
            BlockCountStat {
                n,
                prefix,
                block,
                order,
                mean,
                stddev,
                samples: xs.len(),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(mask: &TreeMask) -> Vec<Vec<u8>> {
        (0..mask.rows())
            .map(|r| (0..mask.cols()).map(|c| u8::from(mask.get(r, c))).collect())
            .collect()
    }

    #[test]
    fn chain_mask_is_lower_triangular() {
        let m = mask_from_tree(&TreeShape::chain(3), 0).unwrap();
        assert_eq!(rows(&m), vec![vec![1, 0, 0], vec![1, 1, 0], vec![1, 1, 1]]);
    }

    #[test]
    fn star_mask() {
        let m = mask_from_tree(&TreeShape::star(3), 0).unwrap();
        assert_eq!(rows(&m), vec![vec![1, 0, 0], vec![1, 1, 0], vec![1, 0, 1]]);
    }

    #[test]
    fn prefix_columns_dense() {
        let shape = random_tree(9, 4).unwrap();
        let m = mask_from_tree(&shape, 2).unwrap();
        assert!((0..9).all(|r| m.get(r, 0) && m.get(r, 1)));
        assert_eq!(m.cols(), 11);
    }

    #[test]
    fn empty_tree_rejected() {
        assert!(mask_from_tree(&TreeShape::new(vec![]).unwrap(), 0).is_err());
    }

    #[test]
    fn analytic_block_counts() {
        let chain = mask_from_tree(&TreeShape::chain(64), 0).unwrap();
        assert_eq!(count_nonzero_blocks(&chain, 32).unwrap(), 3);
        let star = mask_from_tree(&TreeShape::star(64), 0).unwrap();
        assert_eq!(count_nonzero_blocks(&star, 32).unwrap(), 3);
        let zero = TreeMask::from_bits(vec![vec![false; 3]; 3], 0).unwrap();
        assert_eq!(count_nonzero_blocks(&zero, 2).unwrap(), 0);
        assert!(count_nonzero_blocks(&chain, 0).is_err());
    }

    #[test]
    fn ragged_tiles_and_prefix() {
        // 5 rows, 2 + 5 columns, block 4: both row bands touch both column tiles
        let m = mask_from_tree(&TreeShape::chain(5), 2).unwrap();
        assert_eq!(count_nonzero_blocks(&m, 4).unwrap(), 4);
        let m = mask_from_tree(&TreeShape::chain(2), 2).unwrap();
        assert_eq!(count_nonzero_blocks(&m, 4).unwrap(), 1);
    }

    #[test]
    fn block_count_upper_bound() {
        for seed in 0..20 {
            let shape = random_tree(100, seed).unwrap();
            let m = mask_from_tree(&shape, 7).unwrap();
            let b = 16;
            let c = count_nonzero_blocks(&m, b).unwrap();
            assert!(c <= m.rows().div_ceil(b) * m.cols().div_ceil(b));
        }
    }

    #[test]
    fn dfs_examples() {
        assert_eq!(dfs_order(&TreeShape::chain(6)), Permutation::identity(6));
        // root, a, b, c with c under a
        let shape = TreeShape::new(vec![None, Some(0), Some(0), Some(1)]).unwrap();
        assert_eq!(dfs_order(&shape).order, vec![0, 1, 3, 2]);
    }

    #[test]
    fn hpd_examples() {
        assert_eq!(hpd_order(&TreeShape::chain(6)), Permutation::identity(6));
        // child 1 has subtree size 2, child 2 has size 5
        let shape = TreeShape::new(vec![
            None,
            Some(0),
            Some(0),
            Some(1),
            Some(2),
            Some(2),
            Some(4),
            Some(5),
        ])
        .unwrap();
        let order = hpd_order(&shape).order;
        assert_eq!(order, vec![0, 2, 4, 6, 5, 7, 1, 3]);
        let balanced = TreeShape::new(vec![
            None,
            Some(0),
            Some(0),
            Some(1),
            Some(1),
            Some(2),
            Some(2),
        ])
        .unwrap();
        assert_eq!(hpd_order(&balanced), dfs_order(&balanced));
    }

    #[test]
    fn orders_are_topological_and_preserve_bits() {
        for seed in 0..200 {
            let shape = random_tree(1 + (seed as usize % 40), seed).unwrap();
            let base = mask_from_tree(&shape, 3).unwrap().count_ones();
            for kind in OrderKind::ALL {
                let p = kind.permutation(&shape);
                let relabeled = apply_permutation(&shape, &p).unwrap();
                assert_eq!(mask_from_tree(&relabeled, 3).unwrap().count_ones(), base);
            }
        }
    }

    #[test]
    fn identity_permutation_keeps_mask() {
        let shape = random_tree(30, 1).unwrap();
        let same = apply_permutation(&shape, &Permutation::identity(30)).unwrap();
        assert_eq!(
            mask_from_tree(&same, 0).unwrap(),
            mask_from_tree(&shape, 0).unwrap()
        );
    }

    #[test]
    fn non_topological_permutation_rejected() {
        let shape = TreeShape::chain(3);
        let bad = Permutation {
            order: vec![1, 0, 2],
        };
        assert_eq!(
            apply_permutation(&shape, &bad),
            Err(Error::NonTopologicalPermutation)
        );
        let dup = Permutation {
            order: vec![0, 0, 2],
        };
        assert!(apply_permutation(&shape, &dup).is_err());
    }

    #[test]
    fn random_tree_small_cases() {
        assert_eq!(random_tree(1, 5).unwrap().parents(), &[None]);
        assert_eq!(random_tree(2, 5).unwrap().parents(), &[None, Some(0)]);
        assert!(random_tree(0, 5).is_err());
    }

    #[test]
    fn random_tree_depth_is_logarithmic() {
        let depths: Vec<f64> = (0..100)
            .map(|s| {
                let d = random_tree(1024, s).unwrap().depths();
                d.iter().sum::<usize>() as f64 / d.len() as f64
            })
            .collect();
        let mean = depths.iter().sum::<f64>() / depths.len() as f64;
        assert!((5.0..=25.0).contains(&mean), "mean depth {mean}");
    }

    #[test]
    fn chain_counts_equal_across_orders() {
        let shape = TreeShape::chain(100);
        let stats = block_count_stats(&[shape], 0, 32, &OrderKind::ALL).unwrap();
        assert!(stats.windows(2).all(|w| w[0].mean == w[1].mean));
    }

    #[test]
    fn exhaustive_search_bounds_heuristics() {
        for seed in 0..30 {
            let shape = random_tree(7, seed).unwrap();
            let best = exhaustive_best_order(&shape, 1, 2).unwrap();
            for kind in OrderKind::ALL {
                let c = blocks_in_order(&shape, &kind.permutation(&shape), 1, 2).unwrap();
                assert!(best.best_count <= c);
            }
        }
        // a star of n nodes has (n-1)! topological orders
        assert_eq!(
            exhaustive_best_order(&TreeShape::star(6), 0, 2)
                .unwrap()
                .orders_examined,
            120
        );
        assert!(exhaustive_best_order(&TreeShape::chain(11), 0, 2).is_err());
    }

    #[test]
    fn blocked_attention_matches_dense() {
        let shape = random_tree(128, 9).unwrap();
        let mask = mask_from_tree(&shape, 0).unwrap();
        let (q, k, v) = (
            Matrix::random(128, 8, 1),
            Matrix::random(128, 8, 2),
            Matrix::random(128, 8, 3),
        );
        let dense = dense_masked_attention(&q, &k, &v, &mask).unwrap();
        let blocked = blocked_masked_attention_reference(&q, &k, &v, &mask, 32).unwrap();
        assert!(dense.max_abs_diff(&blocked.output) < 1e-6);
        assert_eq!(
            blocked.tiles_computed,
            count_nonzero_blocks(&mask, 32).unwrap()
        );
        assert_eq!(blocked.tiles_computed + blocked.tiles_skipped, 16);
    }

    #[test]
    fn full_mask_is_plain_attention() {
        let n = 5;
        let mask = TreeMask::from_bits(vec![vec![true; n]; n], 0).unwrap();
        let (q, k, v) = (
            Matrix::random(n, 4, 1),
            Matrix::random(n, 4, 2),
            Matrix::random(n, 3, 3),
        );
        let out = blocked_masked_attention_reference(&q, &k, &v, &mask, 2)
            .unwrap()
            .output;
        let scale = 0.5;
        for i in 0..n {
            let w: Vec<f64> = (0..n)
                .map(|j| (dot(q.row(i), k.row(j)) * scale).exp())
                .collect();
            let z: f64 = w.iter().sum();
            for d in 0..3 {
                let want: f64 = (0..n).map(|j| w[j] * v.row(j)[d]).sum::<f64>() / z;
                assert!((out.row(i)[d] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn chain_mask_is_causal() {
        let n = 9;
        let mask = mask_from_tree(&TreeShape::chain(n), 0).unwrap();
        let causal = TreeMask::from_bits(
            (0..n).map(|i| (0..n).map(|j| j <= i).collect()).collect(),
            0,
        )
        .unwrap();
        assert_eq!(mask, causal);
    }

    #[test]
    fn empty_row_is_an_error() {
        let mask = TreeMask::from_bits(vec![vec![true, false], vec![false, false]], 0).unwrap();
        let m = Matrix::random(2, 2, 0);
        assert_eq!(
            blocked_masked_attention_reference(&m, &m, &m, &mask, 1).unwrap_err(),
            Error::NoUnmaskedEntries(1)
        );
        assert_eq!(
            dense_masked_attention(&m, &m, &m, &mask).unwrap_err(),
            Error::NoUnmaskedEntries(1)
        );
    }

    #[test]
    fn pbm_dump() {
        let m = mask_from_tree(&TreeShape::star(3), 1).unwrap();
        assert_eq!(m.to_pbm(), "P1\n4 3\n1 1 0 0\n1 1 1 0\n1 1 0 1\n");
    }
}
