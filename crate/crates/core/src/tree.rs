//! Rooted decomposition trees and the forest state grown during structure search.
//!
//! Node ids follow one convention throughout the crate: a leaf's id is the
//! index of the observed variable it stands for, and hidden nodes get ids
//! `>= n` handed out by [`ForestState`] (or by the generator in
//! [`crate::synth`]). Ids are never reassigned once issued.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type NodeId = usize;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TreeError {
    #[error("variable {0} is not an independent node")]
    NotIndependent(usize),
    #[error("participants overlap or repeat variable {0}")]
    Overlap(usize),
    #[error("no tree with root id {0}")]
    UnknownTree(NodeId),
    #[error("cannot combine tree {0} with itself")]
    SameTree(NodeId),
    #[error("malformed tree: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NodeKind {
    /// An observed variable.
    Leaf(usize),
    /// A hidden (non-terminating) node.
    Internal,
}

/// Simplification applied after structure search.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SimplifyPolicy {
    /// Remove every non-terminating node; all leaves hang off the root.
    FlattenAll,
    /// Remove hidden nodes with exactly two incident edges, joining their
    /// neighbours. Dangling hidden nodes (one incident edge) are dropped too.
    #[default]
    SuppressDegree2,
}

/// A rooted tree whose leaves are observed variables and whose internal nodes are hidden.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "TreeJson", into = "TreeJson")]
pub struct DecompTree {
    root: NodeId,
    kinds: BTreeMap<NodeId, NodeKind>,
    children: BTreeMap<NodeId, Vec<NodeId>>,
    leaves: BTreeSet<usize>,
}

impl DecompTree {
    /// Builds and validates a tree from a root and a list of `(parent, child)` edges.
    pub fn from_edges(
        root: NodeId,
        kinds: BTreeMap<NodeId, NodeKind>,
        edges: &[(NodeId, NodeId)],
    ) -> Result<Self, TreeError> {
        let mut children: BTreeMap<NodeId, Vec<NodeId>> = BTreeMap::new();
        for &(p, c) in edges {
            children.entry(p).or_default().push(c);
        }
        let tree = Self::assemble(root, kinds, children);
        tree.validate()?;
        Ok(tree)
    }

    fn assemble(
        root: NodeId,
        kinds: BTreeMap<NodeId, NodeKind>,
        mut children: BTreeMap<NodeId, Vec<NodeId>>,
    ) -> Self {
        children.retain(|_, v| !v.is_empty());
        for v in children.values_mut() {
            v.sort_unstable();
        }
        let leaves = kinds
            .values()
            .filter_map(|k| match k {
                NodeKind::Leaf(v) => Some(*v),
                NodeKind::Internal => None,
            })
            .collect();
        Self {
            root,
            kinds,
            children,
            leaves,
        }
    }

    pub(crate) fn single_leaf(var: usize) -> Self {
        let kinds = BTreeMap::from([(var, NodeKind::Leaf(var))]);
        Self::assemble(var, kinds, BTreeMap::new())
    }

    /// A hidden node `id` whose children are the given leaves.
    pub fn star(id: NodeId, leaves: &[usize]) -> Self {
        let parts = leaves.iter().map(|&v| Self::single_leaf(v)).collect();
        Self::join(id, parts)
    }

    /// A new root `id` whose children are the roots of `parts`.
    pub(crate) fn join(id: NodeId, parts: Vec<DecompTree>) -> Self {
        let mut kinds = BTreeMap::from([(id, NodeKind::Internal)]);
        let mut children = BTreeMap::new();
        let mut roots = Vec::with_capacity(parts.len());
        for part in parts {
            roots.push(part.root);
            kinds.extend(part.kinds);
            children.extend(part.children);
        }
        children.insert(id, roots);
        Self::assemble(id, kinds, children)
    }

    fn validate(&self) -> Result<(), TreeError> {
        let bad = |s: String| Err(TreeError::Malformed(s));
        if !self.kinds.contains_key(&self.root) {
            return bad(format!("root {} is not a node", self.root));
        }
        for (&id, kind) in &self.kinds {
            if let NodeKind::Leaf(v) = kind {
                if *v != id {
                    return bad(format!("leaf node {id} must carry variable {id}, found {v}"));
                }
            }
        }
        let mut parent: BTreeMap<NodeId, NodeId> = BTreeMap::new();
        for (&p, kids) in &self.children {
            match self.kinds.get(&p) {
                None => return bad(format!("edge from unknown node {p}")),
                Some(NodeKind::Leaf(_)) => return bad(format!("leaf {p} has children")),
                Some(NodeKind::Internal) => {}
            }
            for &c in kids {
                if !self.kinds.contains_key(&c) {
                    return bad(format!("edge to unknown node {c}"));
                }
                if c == self.root {
                    return bad(format!("root {c} has a parent"));
                }
                if parent.insert(c, p).is_some() {
                    return bad(format!("node {c} has two parents"));
                }
            }
        }
        let reached = self.preorder().len();
        if reached != self.kinds.len() {
            return bad(format!(
                "{} of {} nodes reachable from root",
                reached,
                self.kinds.len()
            ));
        }
        for (&id, kind) in &self.kinds {
            if *kind == NodeKind::Internal && self.children(id).is_empty() {
                return bad(format!("hidden node {id} has no children"));
            }
        }
        let internal = self.internal_count();
        if !self.leaves.is_empty() && internal > self.leaves.len().saturating_sub(1).max(1) {
            return bad(format!(
                "{internal} hidden nodes exceed leaf count {} - 1",
                self.leaves.len()
            ));
        }
        Ok(())
    }

    pub fn root(&self) -> NodeId {
        self.root
    }

    pub fn leaf_set(&self) -> &BTreeSet<usize> {
        &self.leaves
    }

    pub fn kind(&self, id: NodeId) -> Option<NodeKind> {
        self.kinds.get(&id).copied()
    }

    pub fn is_leaf(&self, id: NodeId) -> bool {
        matches!(self.kinds.get(&id), Some(NodeKind::Leaf(_)))
    }

    pub fn nodes(&self) -> impl Iterator<Item = (NodeId, NodeKind)> + '_ {
        self.kinds.iter().map(|(&id, &k)| (id, k))
    }

    pub fn children(&self, id: NodeId) -> &[NodeId] {
        self.children.get(&id).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn internal_nodes(&self) -> Vec<NodeId> {
        self.kinds
            .iter()
            .filter(|(_, k)| **k == NodeKind::Internal)
            .map(|(&id, _)| id)
            .collect()
    }

    pub fn internal_count(&self) -> usize {
        self.kinds.len() - self.leaves.len()
    }

    pub fn node_count(&self) -> usize {
        self.kinds.len()
    }

    /// All `(parent, child)` edges in preorder.
    pub fn edges(&self) -> Vec<(NodeId, NodeId)> {
        self.preorder()
            .into_iter()
            .flat_map(|p| self.children(p).iter().map(move |&c| (p, c)))
            .collect()
    }

    pub fn preorder(&self) -> Vec<NodeId> {
        let mut out = Vec::with_capacity(self.kinds.len());
        let mut stack = vec![self.root];
        while let Some(v) = stack.pop() {
            out.push(v);
            stack.extend(self.children(v).iter().rev());
        }
        out
    }

    pub fn parents(&self) -> BTreeMap<NodeId, NodeId> {
        self.children
            .iter()
            .flat_map(|(&p, kids)| kids.iter().map(move |&c| (c, p)))
            .collect()
    }

    /// Undirected adjacency lists.
    pub fn adjacency(&self) -> BTreeMap<NodeId, Vec<NodeId>> {
        let mut adj: BTreeMap<NodeId, Vec<NodeId>> =
            self.kinds.keys().map(|&id| (id, Vec::new())).collect();
        for (&p, kids) in &self.children {
            for &c in kids {
                adj.get_mut(&p).unwrap().push(c);
                adj.get_mut(&c).unwrap().push(p);
            }
        }
        adj
    }

    /// Undirected degree of a node.
    pub fn degree(&self, id: NodeId) -> usize {
        self.children(id).len() + usize::from(id != self.root)
    }

    /// Node sequence of the unique path from `a` to `b`, both ends included.
    pub fn path(&self, a: NodeId, b: NodeId) -> Vec<NodeId> {
        let parents = self.parents();
        let up = |mut v: NodeId| {
            let mut chain = vec![v];
            while let Some(&p) = parents.get(&v) {
                chain.push(p);
                v = p;
            }
            chain
        };
        let ua = up(a);
        let ub = up(b);
        let on_b: BTreeSet<NodeId> = ub.iter().copied().collect();
        let meet = *ua.iter().find(|v| on_b.contains(v)).expect("nodes share a root");
        let mut path: Vec<NodeId> = ua.iter().copied().take_while(|&v| v != meet).collect();
        path.push(meet);
        let tail: Vec<NodeId> = ub.iter().copied().take_while(|&v| v != meet).collect();
        path.extend(tail.into_iter().rev());
        path
    }

    /// Leaves below every node.
    pub fn clusters(&self) -> BTreeMap<NodeId, BTreeSet<usize>> {
        let mut out: BTreeMap<NodeId, BTreeSet<usize>> = BTreeMap::new();
        for v in self.preorder().into_iter().rev() {
            let mut set = BTreeSet::new();
            if let Some(NodeKind::Leaf(x)) = self.kind(v) {
                set.insert(x);
            }
            for c in self.children(v) {
                set.extend(out[c].iter().copied());
            }
            out.insert(v, set);
        }
        out
    }

    /// For every edge, the side of the leaf bipartition that excludes the
    /// smallest leaf. Two trees over the same leaves share an edge exactly
    /// when they share its key.
    pub fn edge_splits(&self) -> BTreeMap<(NodeId, NodeId), Vec<usize>> {
        let clusters = self.clusters();
        let min_leaf = self.leaves.iter().next().copied();
        self.edges()
            .into_iter()
            .map(|(p, c)| {
                let below = &clusters[&c];
                let key = if min_leaf.is_some_and(|m| below.contains(&m)) {
                    self.leaves.difference(below).copied().collect()
                } else {
                    below.iter().copied().collect()
                };
                ((p, c), key)
            })
            .collect()
    }

    /// Non-trivial leaf bipartitions (both sides with at least two leaves).
    pub fn splits(&self) -> BTreeSet<Vec<usize>> {
        let total = self.leaves.len();
        self.edge_splits()
            .into_values()
            .filter(|s| s.len() >= 2 && total - s.len() >= 2)
            .collect()
    }

    /// Hop distance between every pair of nodes reachable via leaves.
    fn leaf_distances(&self) -> BTreeMap<(usize, usize), usize> {
        let adj = self.adjacency();
        let mut out = BTreeMap::new();
        for &a in &self.leaves {
            let mut dist: BTreeMap<NodeId, usize> = BTreeMap::from([(a, 0)]);
            let mut queue = VecDeque::from([a]);
            while let Some(v) = queue.pop_front() {
                let d = dist[&v];
                for &w in &adj[&v] {
                    if let std::collections::btree_map::Entry::Vacant(slot) = dist.entry(w) {
                        slot.insert(d + 1);
                        queue.push_back(w);
                    }
                }
            }
            for &b in &self.leaves {
                out.insert((a, b), dist[&b]);
            }
        }
        out
    }

    /// Pairwise leaf distances in edges, as a closure-friendly table.
    pub fn distance_table(&self) -> LeafDistances {
        LeafDistances {
            d: self.leaf_distances(),
        }
    }

    /// Same unrooted topology: identical leaf sets and identical non-trivial splits.
    pub fn same_topology(&self, other: &DecompTree) -> bool {
        self.leaves == other.leaves && self.splits() == other.splits()
    }

    /// Removes every non-terminating node below `node` and hangs the leaves off it.
    pub fn flatten_at(&self, node: NodeId) -> DecompTree {
        if self.is_leaf(node) || !self.kinds.contains_key(&node) {
            return self.clone();
        }
        let clusters = self.clusters();
        let below: BTreeSet<usize> = clusters[&node].clone();
        let mut kinds = self.kinds.clone();
        let mut children = self.children.clone();
        let mut stack: Vec<NodeId> = self.children(node).to_vec();
        while let Some(v) = stack.pop() {
            stack.extend(self.children(v).iter().copied());
            if !self.is_leaf(v) {
                kinds.remove(&v);
                children.remove(&v);
            }
        }
        children.insert(node, below.into_iter().collect());
        Self::assemble(self.root, kinds, children)
    }

    pub fn simplify(&self, policy: SimplifyPolicy) -> DecompTree {
        match policy {
            SimplifyPolicy::FlattenAll => self.flatten_at(self.root),
            SimplifyPolicy::SuppressDegree2 => self.suppress_degree_2(),
        }
    }

    fn suppress_degree_2(&self) -> DecompTree {
        if self.leaves.len() <= 2 {
            return self.clone();
        }
        let mut adj: BTreeMap<NodeId, BTreeSet<NodeId>> = self
            .adjacency()
            .into_iter()
            .map(|(k, v)| (k, v.into_iter().collect()))
            .collect();
        loop {
            let target = adj
                .iter()
                .find(|(id, nb)| !self.is_leaf(**id) && nb.len() <= 2)
                .map(|(&id, _)| id);
            let Some(v) = target else { break };
            let nb: Vec<NodeId> = adj.remove(&v).unwrap().into_iter().collect();
            if nb.len() < 2 {
                for x in nb {
                    adj.get_mut(&x).unwrap().remove(&v);
                }
                continue;
            }
            let (a, b) = (nb[0], nb[1]);
            for (x, y) in [(a, b), (b, a)] {
                let set = adj.get_mut(&x).unwrap();
                set.remove(&v);
                set.insert(y);
            }
        }
        let root = if adj.contains_key(&self.root) {
            self.root
        } else {
            *adj.keys()
                .find(|id| !self.is_leaf(**id))
                .expect("a tree with three or more leaves keeps a hidden node")
        };
        let kinds: BTreeMap<NodeId, NodeKind> = adj.keys().map(|&id| (id, self.kinds[&id])).collect();
        let mut children: BTreeMap<NodeId, Vec<NodeId>> = BTreeMap::new();
        let mut seen = BTreeSet::from([root]);
        let mut queue = VecDeque::from([root]);
        while let Some(v) = queue.pop_front() {
            for &w in &adj[&v] {
                if seen.insert(w) {
                    children.entry(v).or_default().push(w);
                    queue.push_back(w);
                }
            }
        }
        Self::assemble(root, kinds, children)
    }

    /// Graphviz rendering: leaves as boxes, hidden nodes as circles.
    pub fn to_dot(&self) -> String {
        let mut out = String::from("digraph decomposition {\n");
        for (id, kind) in self.nodes() {
            match kind {
                NodeKind::Leaf(v) => {
                    out.push_str(&format!("  n{id} [shape=box, label=\"x{v}\"];\n"))
                }
                NodeKind::Internal => {
                    out.push_str(&format!("  n{id} [shape=circle, label=\"w{id}\"];\n"))
                }
            }
        }
        for (p, c) in self.edges() {
            out.push_str(&format!("  n{p} -> n{c};\n"));
        }
        out.push_str("}\n");
        out
    }
}

/// Leaf-to-leaf hop distances.
#[derive(Debug, Clone)]
pub struct LeafDistances {
    d: BTreeMap<(usize, usize), usize>,
}

impl LeafDistances {
    pub fn get(&self, a: usize, b: usize) -> usize {
        self.d[&(a, b)]
    }

    /// The pairing `{{a, b}, {c, d}}` the tree induces on a quartet, returned
    /// as `[a', b', c', d']` with `a'b' | c'd'`. `None` if the tree leaves the
    /// quartet unresolved.
    pub fn quartet_split(&self, q: [usize; 4]) -> Option<[usize; 4]> {
        let [a, b, c, d] = q;
        let sums = [
            (self.get(a, b) + self.get(c, d), [a, b, c, d]),
            (self.get(a, c) + self.get(b, d), [a, c, b, d]),
            (self.get(a, d) + self.get(b, c), [a, d, b, c]),
        ];
        let min = sums.iter().map(|s| s.0).min().unwrap();
        let mut winners = sums.iter().filter(|s| s.0 == min);
        let first = winners.next().unwrap();
        if winners.next().is_some() {
            None
        } else {
            Some(first.1)
        }
    }
}

/// The partition of variables into independent nodes and rooted trees.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForestState {
    n: usize,
    independent: BTreeSet<usize>,
    trees: BTreeMap<NodeId, DecompTree>,
    next_hidden_id: NodeId,
}

impl ForestState {
    /// All `n` variables independent, hidden ids starting at `n`.
    pub fn new(n: usize) -> Self {
        Self {
            n,
            independent: (0..n).collect(),
            trees: BTreeMap::new(),
            next_hidden_id: n,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn independent(&self) -> &BTreeSet<usize> {
        &self.independent
    }

    /// Trees keyed by the id of their root.
    pub fn trees(&self) -> &BTreeMap<NodeId, DecompTree> {
        &self.trees
    }

    pub fn tree(&self, id: NodeId) -> Result<&DecompTree, TreeError> {
        self.trees.get(&id).ok_or(TreeError::UnknownTree(id))
    }

    pub fn next_hidden_id(&self) -> NodeId {
        self.next_hidden_id
    }

    /// Independent nodes plus trees.
    pub fn unit_count(&self) -> usize {
        self.independent.len() + self.trees.len()
    }

    pub fn is_complete(&self) -> bool {
        self.independent.is_empty() && self.trees.len() == 1
    }

    fn check_independent(&self, vars: &[usize]) -> Result<(), TreeError> {
        for (a, &v) in vars.iter().enumerate() {
            if vars[..a].contains(&v) {
                return Err(TreeError::Overlap(v));
            }
            if !self.independent.contains(&v) {
                return Err(TreeError::NotIndependent(v));
            }
        }
        Ok(())
    }

    fn fresh(&mut self) -> NodeId {
        let id = self.next_hidden_id;
        self.next_hidden_id += 1;
        id
    }

    fn cherry(&mut self, a: usize, b: usize) -> DecompTree {
        let id = self.fresh();
        DecompTree::star(id, &[a, b])
    }

    /// Two independent pairs become `w(w_a(i, j), w_b(k, l))`.
    pub fn combine_pair_pair(&self, i: usize, j: usize, k: usize, l: usize) -> Result<Self, TreeError> {
        self.check_independent(&[i, j, k, l])?;
        let mut next = self.clone();
        let left = next.cherry(i, j);
        let right = next.cherry(k, l);
        let root = next.fresh();
        for v in [i, j, k, l] {
            next.independent.remove(&v);
        }
        next.trees.insert(root, DecompTree::join(root, vec![left, right]));
        Ok(next)
    }

    /// An independent pair joins tree `t`; the old root becomes non-terminating.
    pub fn combine_pair_tree(&self, i: usize, j: usize, t: NodeId) -> Result<Self, TreeError> {
        self.check_independent(&[i, j])?;
        self.tree(t)?;
        let mut next = self.clone();
        let old = next.trees.remove(&t).unwrap();
        let pair = next.cherry(i, j);
        let root = next.fresh();
        next.independent.remove(&i);
        next.independent.remove(&j);
        next.trees.insert(root, DecompTree::join(root, vec![pair, old]));
        Ok(next)
    }

    pub fn combine_tree_tree(&self, t1: NodeId, t2: NodeId) -> Result<Self, TreeError> {
        if t1 == t2 {
            return Err(TreeError::SameTree(t1));
        }
        self.tree(t1)?;
        self.tree(t2)?;
        let mut next = self.clone();
        let a = next.trees.remove(&t1).unwrap();
        let b = next.trees.remove(&t2).unwrap();
        let root = next.fresh();
        next.trees.insert(root, DecompTree::join(root, vec![a, b]));
        Ok(next)
    }

    /// A single independent node joins tree `t` under a new root.
    pub fn combine_node_tree(&self, i: usize, t: NodeId) -> Result<Self, TreeError> {
        self.check_independent(&[i])?;
        self.tree(t)?;
        let mut next = self.clone();
        let old = next.trees.remove(&t).unwrap();
        let root = next.fresh();
        next.independent.remove(&i);
        next.trees
            .insert(root, DecompTree::join(root, vec![DecompTree::single_leaf(i), old]));
        Ok(next)
    }
}

/// Wire form of [`DecompTree`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeJson {
    pub nodes: Vec<NodeJson>,
    pub edges: Vec<[NodeId; 2]>,
    pub root: NodeId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeJson {
    pub id: NodeId,
    pub kind: NodeKindJson,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub var: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKindJson {
    Leaf,
    Internal,
}

impl From<DecompTree> for TreeJson {
    fn from(t: DecompTree) -> Self {
        let nodes = t
            .nodes()
            .map(|(id, k)| match k {
                NodeKind::Leaf(v) => NodeJson {
                    id,
                    kind: NodeKindJson::Leaf,
                    var: Some(v),
                },
                NodeKind::Internal => NodeJson {
                    id,
                    kind: NodeKindJson::Internal,
                    var: None,
                },
            })
            .collect();
        let edges = t.edges().into_iter().map(|(p, c)| [p, c]).collect();
        TreeJson {
            nodes,
            edges,
            root: t.root,
        }
    }
}

impl TryFrom<TreeJson> for DecompTree {
    type Error = TreeError;

    fn try_from(j: TreeJson) -> Result<Self, Self::Error> {
        let mut kinds = BTreeMap::new();
        for node in &j.nodes {
            let kind = match (node.kind, node.var) {
                (NodeKindJson::Leaf, Some(v)) => NodeKind::Leaf(v),
                (NodeKindJson::Leaf, None) => {
                    return Err(TreeError::Malformed(format!("leaf {} has no var", node.id)))
                }
                (NodeKindJson::Internal, _) => NodeKind::Internal,
            };
            if kinds.insert(node.id, kind).is_some() {
                return Err(TreeError::Malformed(format!("duplicate node id {}", node.id)));
            }
        }
        let edges: Vec<(NodeId, NodeId)> = j.edges.iter().map(|e| (e[0], e[1])).collect();
        DecompTree::from_edges(j.root, kinds, &edges)
    }
}
