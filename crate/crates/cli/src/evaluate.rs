use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use latent_tree::parameters::Stage2Report;
use latent_tree::synth::GeneratorModel;
use latent_tree::{DecompTree, NodeId, SimplifyPolicy};
use serde::Serialize;

pub enum Recovered {
    Tree(DecompTree),
    Report(Box<Stage2Report>),
}

impl Recovered {
    pub fn parse(text: &str) -> Result<Self, String> {
        if let Ok(report) = serde_json::from_str::<Stage2Report>(text) {
            return Ok(Recovered::Report(Box::new(report)));
        }
        serde_json::from_str::<DecompTree>(text)
            .map(Recovered::Tree)
            .map_err(|e| format!("neither a tree nor a parameter report: {e}"))
    }

    fn tree(&self) -> &DecompTree {
        match self {
            Recovered::Tree(t) => t,
            Recovered::Report(r) => &r.tree,
        }
    }
}

#[derive(Debug, Serialize)]
pub struct EdgeRow {
    /// Leaf side of the edge's bipartition that excludes the smallest leaf.
    pub split: Vec<usize>,
    pub true_rho: f64,
    pub recovered_rho: Option<f64>,
    pub error: Option<f64>,
}

#[derive(Debug, Serialize)]
pub struct HiddenRow {
    pub model_node: NodeId,
    pub recovered_node: NodeId,
    pub prior_error: f64,
    pub max_conditional_error: f64,
}

#[derive(Debug, Serialize)]
pub struct Verdict {
    pub leaves: usize,
    pub topology_match: bool,
    pub edges: Vec<EdgeRow>,
    /// Over edges present in both trees; absent when only a tree was given.
    pub max_edge_error: Option<f64>,
    pub hidden: Vec<HiddenRow>,
}

/// Each hidden node keyed by the splits of its incident edges.
fn hidden_keys(tree: &DecompTree) -> BTreeMap<BTreeSet<Vec<usize>>, NodeId> {
    let mut incident: BTreeMap<NodeId, BTreeSet<Vec<usize>>> = BTreeMap::new();
    for ((p, c), split) in tree.edge_splits() {
        incident.entry(p).or_default().insert(split.clone());
        incident.entry(c).or_default().insert(split);
    }
    incident
        .into_iter()
        .filter(|(id, _)| !tree.is_leaf(*id))
        .map(|(id, key)| (key, id))
        .collect()
}

/// Path products from `from` to every node.
fn path_products(tree: &DecompTree, rho: &BTreeMap<(NodeId, NodeId), f64>, from: NodeId) -> BTreeMap<NodeId, f64> {
    let adj = tree.adjacency();
    let mut out = BTreeMap::from([(from, 1.0)]);
    let mut stack = vec![from];
    while let Some(v) = stack.pop() {
        for &w in &adj[&v] {
            if !out.contains_key(&w) {
                let r = rho.get(&(v, w)).or_else(|| rho.get(&(w, v))).copied().unwrap_or(f64::NAN);
                out.insert(w, out[&v] * r);
                stack.push(w);
            }
        }
    }
    out
}

/// `p(leaf = 1 | hidden = 1)` from the leaf-hidden correlation.
fn conditional(p_leaf: f64, prior: f64, rho: f64) -> f64 {
    p_leaf + rho * (p_leaf * (1.0 - p_leaf)).sqrt() * ((1.0 - prior) / prior).sqrt()
}

pub fn evaluate(model: &GeneratorModel, recovered: &Recovered) -> Result<Verdict, String> {
    let truth = model.topology.simplify(SimplifyPolicy::SuppressDegree2);
    let found = recovered.tree().simplify(SimplifyPolicy::SuppressDegree2);
    if truth.leaf_set() != found.leaf_set() {
        return Err(format!(
            "leaf sets differ: model has {} leaves, recovered tree has {}",
            truth.leaf_set().len(),
            found.leaf_set().len()
        ));
    }
    let topology_match = truth.same_topology(&found);

    let true_rho = model.edge_rho();
    let recovered_rho: BTreeMap<Vec<usize>, f64> = match recovered {
        Recovered::Report(r) => {
            let by_edge: BTreeMap<(NodeId, NodeId), f64> =
                r.edges.iter().map(|e| ((e.parent, e.child), e.rho)).collect();
            r.tree
                .edge_splits()
                .into_iter()
                .filter_map(|(e, s)| by_edge.get(&e).map(|&rho| (s, rho)))
                .collect()
        }
        Recovered::Tree(_) => BTreeMap::new(),
    };
    let edges: Vec<EdgeRow> = model
        .topology
        .edge_splits()
        .into_iter()
        .map(|(e, split)| {
            let t = true_rho[&e];
            let r = recovered_rho.get(&split).copied();
            EdgeRow {
                error: r.map(|r| (r - t).abs()),
                split,
                true_rho: t,
                recovered_rho: r,
            }
        })
        .collect();
    let max_edge_error = match recovered {
        Recovered::Report(_) => Some(edges.iter().filter_map(|e| e.error).fold(0.0, f64::max)),
        Recovered::Tree(_) => None,
    };

    let mut hidden = Vec::new();
    if let Recovered::Report(r) = recovered {
        let marg = model.marginals();
        let found_keys = hidden_keys(&r.tree);
        let reports: BTreeMap<NodeId, _> = r.hidden.iter().map(|h| (h.id, h)).collect();
        for (key, w) in hidden_keys(&model.topology) {
            let (Some(&id), Some(prior)) = (found_keys.get(&key), marg.get(&w)) else {
                continue;
            };
            let Some(rep) = reports.get(&id) else { continue };
            let prod = path_products(&model.topology, &true_rho, w);
            let max_conditional_error = rep
                .conditionals
                .iter()
                .map(|(&leaf, &c)| (conditional(marg[&leaf], *prior, prod[&leaf]) - c).abs())
                .fold(0.0, f64::max);
            hidden.push(HiddenRow {
                model_node: w,
                recovered_node: id,
                prior_error: (rep.prior - prior).abs(),
                max_conditional_error,
            });
        }
    }

    Ok(Verdict {
        leaves: truth.leaf_set().len(),
        topology_match,
        edges,
        max_edge_error,
        hidden,
    })
}

impl Verdict {
    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "leaves          {}", self.leaves);
        let _ = writeln!(out, "topology match  {}", self.topology_match);
        if let Some(e) = self.max_edge_error {
            let _ = writeln!(out, "max edge error  {e:e}");
        }
        let _ = writeln!(out, "\n{:<28} {:>10} {:>12} {:>10}", "split", "true", "recovered", "error");
        for row in &self.edges {
            let split = row.split.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" ");
            let fmt = |v: Option<f64>, prec: usize| v.map_or("-".to_string(), |v| format!("{v:.prec$}"));
            let _ = writeln!(
                out,
                "{:<28} {:>10.6} {:>12} {:>10}",
                split,
                row.true_rho,
                fmt(row.recovered_rho, 6),
                row.error.map_or("-".to_string(), |e| format!("{e:.2e}")),
            );
        }
        if !self.hidden.is_empty() {
            let _ = writeln!(out, "\n{:<8} {:<10} {:>12} {:>16}", "model", "recovered", "prior err", "conditional err");
            for h in &self.hidden {
                let _ = writeln!(
                    out,
                    "{:<8} {:<10} {:>12.2e} {:>16.2e}",
                    h.model_node, h.recovered_node, h.prior_error, h.max_conditional_error
                );
            }
        }
        out
    }
}
