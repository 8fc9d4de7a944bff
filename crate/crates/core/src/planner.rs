//! Splits the demanded part of a DAG into an ordered list of steps, each
//! either one fused kernel or one library call.
//!
//! The traversal follows the classic worklist formulation: starting at the
//! forced root, predecessors are claimed into the current subgraph until a
//! materialized node is reached. Nodes that cannot be fused (reductions,
//! scans, library calls) and the operands of library calls recursively start
//! subgraphs of their own. A node reached by one subgraph after it was
//! claimed by another is materialized so that it becomes a leaf to both.
//!
//! The recursion decides *which* nodes get materialized. A settling pass then
//! rebuilds every step as the backward closure of its root, re-applies the
//! multiple-use rule to anything still shared, splits oversized fused steps,
//! and orders the steps so that each runs after everything it reads.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt::{self, Write as _};

use serde::Serialize;

use crate::dag::{node_label, Graph, Node, NodeId, OpKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum KernelKind {
    Map,
    MapReduce,
    MapScan,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum LibraryKind {
    Gemm,
    Gemv,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum StepKind {
    Fused(KernelKind),
    /// `operands[i]` is read transposed when `trans[i]` is set.
    Library { call: LibraryKind, operands: Vec<NodeId>, trans: Vec<bool> },
}

impl fmt::Display for StepKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StepKind::Fused(KernelKind::Map) => write!(f, "fused map"),
            StepKind::Fused(KernelKind::MapReduce) => write!(f, "fused map-reduce"),
            StepKind::Fused(KernelKind::MapScan) => write!(f, "fused map-scan"),
            StepKind::Library { call, trans, .. } => {
                let name = match call {
                    LibraryKind::Gemm => "gemm",
                    LibraryKind::Gemv => "gemv",
                };
                write!(f, "library {name}")?;
                for (i, t) in trans.iter().enumerate() {
                    if *t {
                        write!(f, " trans{}", ['A', 'B'][i.min(1)])?;
                    }
                }
                Ok(())
            }
        }
    }
}

/// One unit of execution.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PlanStep {
    pub kind: StepKind,
    pub root: NodeId,
    /// Interior nodes including the root. For library steps this also holds
    /// absorbed transposes, which are never computed.
    pub nodes: BTreeSet<NodeId>,
    /// Nodes read by this step; materialized before it runs.
    pub leaves: BTreeSet<NodeId>,
    pub order_index: usize,
}

impl PlanStep {
    pub fn is_fused(&self) -> bool {
        matches!(self.kind, StepKind::Fused(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlannerLimits {
    pub max_fused_nodes: usize,
}

impl Default for PlannerLimits {
    fn default() -> Self {
        PlannerLimits { max_fused_nodes: 100 }
    }
}

impl PlannerLimits {
    pub fn new(max_fused_nodes: usize) -> Self {
        assert!(max_fused_nodes >= 1, "max_fused_nodes must be positive");
        PlannerLimits { max_fused_nodes }
    }
}

/// Everything reachable backwards from `root` without passing through a
/// materialized node. Materialized frontier nodes are included.
pub fn demand_set(root: NodeId, g: &Graph) -> BTreeSet<NodeId> {
    let mut seen = BTreeSet::new();
    let mut stack = vec![root];
    while let Some(n) = stack.pop() {
        if !seen.insert(n) {
            continue;
        }
        let node = g.node(n);
        if !node.is_materialized() {
            stack.extend(node.preds.iter().copied());
        }
    }
    seen
}

/// Whether `n` must be computed by a step of its own rather than fused into
/// its consumers.
pub fn materialize_node(n: &Node) -> bool {
    n.op.is_library() || n.op.is_reduction_like()
}

/// Whether predecessor `p` must be materialized before `n` runs. A rank-2
/// transpose feeding a library call is absorbed into the call instead (its
/// own operand is materialized and a transpose flag set).
pub fn materialize_pred_of_node(n: &Node, p: &Node) -> bool {
    n.op.is_library() && !absorbs_transpose(n, p)
}

fn absorbs_transpose(n: &Node, p: &Node) -> bool {
    n.op.is_library() && p.op.is_matrix_transpose()
}

pub fn plan(root: NodeId, g: &Graph, limits: PlannerLimits) -> Vec<PlanStep> {
    if g.node(root).is_materialized() {
        return Vec::new();
    }
    let mut planner = Planner { g, planned: HashSet::new(), limits };
    let mut order = Vec::new();
    let mut visited = HashSet::new();
    planner.create_subgraph(root, &mut order, &mut visited);
    planner.settle(root, order)
}

struct Planner<'g> {
    g: &'g Graph,
    /// Nodes that some step of this plan will materialize.
    planned: HashSet<NodeId>,
    limits: PlannerLimits,
}

impl Planner<'_> {
    /// Has data now, or will have it once its step runs.
    fn is_materialized(&self, n: NodeId) -> bool {
        self.g.node(n).is_materialized() || self.planned.contains(&n)
    }

    /// Ensures `n` is produced by some step, starting a subgraph for it if
    /// needed. A node already claimed by another traversal is re-rooted with
    /// a fresh visited set.
    fn demand(&mut self, n: NodeId, graph_list: &mut Vec<NodeId>, visited: &mut HashSet<NodeId>) {
        if self.is_materialized(n) {
            return;
        }
        if visited.contains(&n) {
            let mut fresh = HashSet::new();
            self.create_subgraph(n, graph_list, &mut fresh);
        } else {
            self.create_subgraph(n, graph_list, visited);
        }
    }

    fn create_subgraph(&mut self, root: NodeId, graph_list: &mut Vec<NodeId>, visited: &mut HashSet<NodeId>) {
        if self.is_materialized(root) || !visited.insert(root) {
            return;
        }
        self.planned.insert(root);
        let mut members: HashSet<NodeId> = HashSet::from([root]);
        let mut candidates = vec![root];
        while let Some(id) = candidates.pop() {
            let node = self.g.node(id);
            if id != root && self.is_materialized(id) {
                continue;
            }
            for &pred_id in &node.preds {
                let pred = self.g.node(pred_id);
                if !visited.contains(&pred_id) {
                    if absorbs_transpose(node, pred) && !self.is_materialized(pred_id) {
                        self.demand(pred.preds[0], graph_list, visited);
                    } else if materialize_pred_of_node(node, pred) || materialize_node(pred) {
                        self.create_subgraph(pred_id, graph_list, visited);
                    } else if !self.is_materialized(pred_id) {
                        visited.insert(pred_id);
                        members.insert(pred_id);
                        candidates.push(pred_id);
                    }
                } else if !members.contains(&pred_id) && !self.is_materialized(pred_id) {
                    // Claimed by another subgraph: materialize it so it
                    // becomes a leaf of both.
                    let mut fresh = HashSet::new();
                    self.create_subgraph(pred_id, graph_list, &mut fresh);
                }
            }
        }
        graph_list.push(root);
    }

    fn settle(&mut self, root: NodeId, mut order: Vec<NodeId>) -> Vec<PlanStep> {
        loop {
            let steps: Vec<PlanStep> = order.iter().map(|&r| self.build_step(r)).collect();

            let mut owners: BTreeMap<NodeId, Vec<usize>> = BTreeMap::new();
            for (i, s) in steps.iter().enumerate() {
                for &n in &s.nodes {
                    if n != s.root && s.is_fused() {
                        owners.entry(n).or_default().push(i);
                    }
                }
            }
            let shared: Vec<(NodeId, usize)> = owners
                .into_iter()
                .filter(|(_, o)| o.len() > 1)
                .map(|(n, o)| (n, o[0]))
                .collect();
            if !shared.is_empty() {
                for (n, first_owner) in shared.into_iter().rev() {
                    if self.planned.insert(n) {
                        order.insert(first_owner, n);
                    }
                }
                continue;
            }

            let split = steps
                .iter()
                .enumerate()
                .find_map(|(i, s)| self.split_point(s).map(|n| (i, n)));
            if let Some((i, n)) = split {
                self.planned.insert(n);
                order.insert(i, n);
                continue;
            }

            return self.ordered(root, &order, steps);
        }
    }

    fn build_step(&self, root: NodeId) -> PlanStep {
        let node = self.g.node(root);
        let mut nodes = BTreeSet::from([root]);
        let mut leaves = BTreeSet::new();
        let kind = if node.op.is_library() {
            let mut operands = Vec::new();
            let mut trans = Vec::new();
            for &p in &node.preds {
                let pn = self.g.node(p);
                if absorbs_transpose(node, pn) && !self.is_materialized(p) {
                    nodes.insert(p);
                    operands.push(pn.preds[0]);
                    trans.push(true);
                } else {
                    operands.push(p);
                    trans.push(false);
                }
            }
            leaves.extend(operands.iter().copied());
            let call = match node.op {
                OpKind::MatMul => LibraryKind::Gemm,
                _ => LibraryKind::Gemv,
            };
            StepKind::Library { call, operands, trans }
        } else {
            let mut stack = vec![root];
            while let Some(id) = stack.pop() {
                for &p in &self.g.node(id).preds {
                    if self.is_materialized(p) {
                        leaves.insert(p);
                    } else if nodes.insert(p) {
                        stack.push(p);
                    }
                }
            }
            StepKind::Fused(match node.op {
                OpKind::Reduce { .. } => KernelKind::MapReduce,
                OpKind::Scan { .. } => KernelKind::MapScan,
                _ => KernelKind::Map,
            })
        };
        PlanStep { kind, root, nodes, leaves, order_index: 0 }
    }

    /// For an oversized fused step, the interior node of greatest height
    /// whose own sub-DAG fits under the limit (ties: lowest id).
    fn split_point(&self, step: &PlanStep) -> Option<NodeId> {
        if !step.is_fused() || step.nodes.len() <= self.limits.max_fused_nodes {
            return None;
        }
        let mut height: HashMap<NodeId, usize> = HashMap::new();
        // Ascending ids are a topological order.
        for &n in &step.nodes {
            let h = self
                .g
                .node(n)
                .preds
                .iter()
                .filter_map(|p| height.get(p))
                .max()
                .map_or(1, |h| h + 1);
            height.insert(n, h);
        }
        let mut best: Option<(usize, NodeId)> = None;
        for &n in &step.nodes {
            if n == step.root {
                continue;
            }
            let size = self.interior_size(n, &step.nodes);
            if size > self.limits.max_fused_nodes {
                continue;
            }
            let h = height[&n];
            if best.is_none_or(|(bh, _)| h > bh) {
                best = Some((h, n));
            }
        }
        best.map(|(_, n)| n)
    }

    fn interior_size(&self, n: NodeId, interior: &BTreeSet<NodeId>) -> usize {
        let mut seen = HashSet::from([n]);
        let mut stack = vec![n];
        while let Some(id) = stack.pop() {
            for &p in &self.g.node(id).preds {
                if interior.contains(&p) && seen.insert(p) {
                    stack.push(p);
                }
            }
        }
        seen.len()
    }

    /// Stable topological order: among ready steps, the earliest in `order`
    /// runs first.
    fn ordered(&self, root: NodeId, order: &[NodeId], steps: Vec<PlanStep>) -> Vec<PlanStep> {
        let produced: HashSet<NodeId> = order.iter().copied().collect();
        let mut by_root: HashMap<NodeId, PlanStep> = steps.into_iter().map(|s| (s.root, s)).collect();
        let mut done: HashSet<NodeId> = HashSet::new();
        let mut out = Vec::with_capacity(order.len());
        while out.len() < order.len() {
            let next = order
                .iter()
                .copied()
                .find(|r| {
                    !done.contains(r)
                        && by_root[r]
                            .leaves
                            .iter()
                            .all(|l| !produced.contains(l) || done.contains(l))
                })
                .expect("plan dependencies are acyclic");
            done.insert(next);
            let mut step = by_root.remove(&next).unwrap();
            step.order_index = out.len();
            out.push(step);
        }
        debug_assert_eq!(out.last().map(|s| s.root), Some(root));
        out
    }
}

/// Replays `plan` against the materialization state of `g` and checks every
/// step invariant. Returns a description of the first violation.
pub fn check_plan(g: &Graph, root: NodeId, plan: &[PlanStep]) -> Result<(), String> {
    let mut materialized: HashSet<NodeId> =
        g.nodes().iter().filter(|n| n.is_materialized()).map(|n| n.id).collect();
    if materialized.contains(&root) {
        return if plan.is_empty() { Ok(()) } else { Err("plan for a materialized root".into()) };
    }
    let demanded = demand_set(root, g);
    let mut covered: HashSet<NodeId> = HashSet::new();
    for (i, step) in plan.iter().enumerate() {
        if step.order_index != i {
            return Err(format!("step {i} has order_index {}", step.order_index));
        }
        for &l in &step.leaves {
            if !materialized.contains(&l) {
                return Err(format!("step {i}: leaf {l} not materialized"));
            }
        }
        for &n in &step.nodes {
            if materialized.contains(&n) {
                return Err(format!("step {i}: interior node {n} already materialized"));
            }
        }
        let root_op = &g.node(step.root).op;
        match &step.kind {
            StepKind::Fused(kind) => {
                let expected = match root_op {
                    OpKind::Reduce { .. } => KernelKind::MapReduce,
                    OpKind::Scan { .. } => KernelKind::MapScan,
                    _ => KernelKind::Map,
                };
                if *kind != expected {
                    return Err(format!("step {i}: {kind:?} step rooted at {root_op}"));
                }
                for &n in &step.nodes {
                    let op = &g.node(n).op;
                    if n != step.root && (materialize_node(g.node(n)) || matches!(op, OpKind::Input)) {
                        return Err(format!("step {i}: {op} node {n} inside fused step"));
                    }
                    for &p in &g.node(n).preds {
                        if !step.nodes.contains(&p) && !step.leaves.contains(&p) {
                            return Err(format!("step {i}: edge {p}->{n} leaves the step"));
                        }
                    }
                }
            }
            StepKind::Library { operands, trans, .. } => {
                if !root_op.is_library() {
                    return Err(format!("step {i}: library step rooted at {root_op}"));
                }
                for (k, (&op, &t)) in operands.iter().zip(trans).enumerate() {
                    let pred = g.node(step.root).preds[k];
                    let ok = if t {
                        g.node(pred).op.is_matrix_transpose() && g.node(pred).preds[0] == op
                    } else {
                        pred == op
                    };
                    if !ok {
                        return Err(format!("step {i}: operand {k} does not match the graph"));
                    }
                }
            }
        }
        // Absorbed transposes are never computed, so they may be shared.
        let computed: Vec<NodeId> = if step.is_fused() { step.nodes.iter().copied().collect() } else { vec![step.root] };
        for n in computed {
            if !covered.insert(n) {
                return Err(format!("node {n} is interior to two steps"));
            }
        }
        materialized.insert(step.root);
    }
    if !materialized.contains(&root) {
        return Err("plan does not produce the root".into());
    }
    for n in demanded {
        if !materialized.contains(&n) && !covered.contains(&n) && !plan.iter().any(|s| s.nodes.contains(&n)) {
            return Err(format!("demanded node {n} is never computed"));
        }
    }
    Ok(())
}

/// Graphviz rendering of a plan: one cluster per step, dashed edges where a
/// value crosses a step boundary through memory.
pub fn plan_to_dot(g: &Graph, plan: &[PlanStep]) -> String {
    let mut out = String::from("digraph plan {\n  node [shape=record];\n");
    let mut owner: HashMap<NodeId, usize> = HashMap::new();
    for step in plan {
        let _ = writeln!(out, "  subgraph cluster_{} {{", step.order_index);
        let _ = writeln!(out, "    label=\"#{} {}\";", step.order_index, step.kind);
        for &n in &step.nodes {
            owner.insert(n, step.order_index);
            let _ = writeln!(out, "    n{n} [label=\"{}\"];", node_label(g.node(n)));
        }
        out.push_str("  }\n");
    }
    let mut external: BTreeSet<NodeId> = BTreeSet::new();
    for step in plan {
        for &l in &step.leaves {
            if !owner.contains_key(&l) {
                external.insert(l);
            }
        }
    }
    for &n in &external {
        let _ = writeln!(out, "  n{n} [label=\"{}\"];", node_label(g.node(n)));
    }
    for step in plan {
        for &n in &step.nodes {
            for &p in &g.node(n).preds {
                let style = if owner.get(&p) == Some(&step.order_index) { "" } else { " [style=dashed]" };
                if owner.contains_key(&p) || external.contains(&p) {
                    let _ = writeln!(out, "  n{p} -> n{n}{style};");
                }
            }
        }
    }
    out.push_str("}\n");
    out
}
