//! Evidence graphs and the graph attention verifier.
//!
//! Node layout: Prog-Exec nodes `0..M` (one per verbalized operation, in
//! post-order), entity nodes `M..K-1`, and the statement-table node `K-1`.
//! Three symmetric masks carry the three edge types:
//!
//! 1. program tree parent/child pairs between Prog-Exec nodes
//! 2. each Prog-Exec node to its own argument and answer entities
//! 3. every Prog-Exec node to the statement-table node
//!
//! Each edge type gets one attention head. For head `d` and node `i`:
//!
//! ```text
//! e_ij = LeakyReLU(a_d · [U_d h_i ; U_d h_j])     (j a neighbor under mask d)
//! α_ij = softmax_j(e_ij)
//! out_i = ELU(Σ_j α_ij W_d h_j)                    (zero without neighbors)
//! ```
//!
//! The three head outputs are concatenated and fused by `ELU(x W + b)`.

use std::rc::Rc;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value as Json};
use thiserror::Error;

use crate::encode::DocEncoding;
use crate::learn::{glorot, ParamId, ParamStore, Tape, Tensor, Var};
use crate::program::Program;
use crate::verbalize::{SpanSource, VerbalizedExecution};

pub const HEADS: usize = 3;
pub const LEAKY_SLOPE: f64 = 0.2;
pub const DEFAULT_ATT_DIM: usize = 32;

#[derive(Debug, Error)]
pub enum GvatError {
    #[error("document has {doc} sentences but the program has {program} operations")]
    CountMismatch { doc: usize, program: usize },
    #[error("graph document: {0}")]
    Import(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeType {
    Program,
    Entity,
    StatementTable,
}

pub const EDGE_TYPES: [EdgeType; HEADS] = [EdgeType::Program, EdgeType::Entity, EdgeType::StatementTable];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum NodeInfo {
    ProgExec { op: String, sentence: String },
    Entity { text: String, source: SpanSource, owner: usize },
    StatementTable,
}

/// Node layout and adjacency, independent of node features.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphStructure {
    pub m: usize,
    pub e: usize,
    pub nodes: Vec<NodeInfo>,
    /// K×K row-major masks, one per edge type.
    pub masks: [Arc<[bool]>; HEADS],
}

impl GraphStructure {
    pub fn k(&self) -> usize {
        self.m + self.e + 1
    }

    pub fn st_index(&self) -> usize {
        self.k() - 1
    }

    pub fn has_edge(&self, d: usize, i: usize, j: usize) -> bool {
        self.masks[d][i * self.k() + j]
    }

    /// Undirected edges `(i, j)` with `i < j` for head `d`.
    pub fn edges(&self, d: usize) -> Vec<(usize, usize)> {
        let k = self.k();
        let mut out = Vec::new();
        for i in 0..k {
            for j in i + 1..k {
                if self.masks[d][i * k + j] {
                    out.push((i, j));
                }
            }
        }
        out
    }

    pub fn degree(&self, d: usize, i: usize) -> usize {
        let k = self.k();
        self.masks[d][i * k..(i + 1) * k].iter().filter(|x| **x).count()
    }

    fn from_edges(m: usize, e: usize, nodes: Vec<NodeInfo>, edges: [Vec<(usize, usize)>; HEADS]) -> Self {
        let k = m + e + 1;
        let masks = edges.map(|list| {
            let mut mask = vec![false; k * k];
            for (i, j) in list {
                mask[i * k + j] = true;
                mask[j * k + i] = true;
            }
            Arc::from(mask)
        });
        GraphStructure { m, e, nodes, masks }
    }

    /// Builds nodes and masks from a program and its verbalization.
    pub fn build(p: &Program, v: &VerbalizedExecution) -> Result<Self, GvatError> {
        let post = p.post_order();
        let m = post.len();
        if v.sentences.len() != m {
            return Err(GvatError::CountMismatch {
                doc: v.sentences.len(),
                program: m,
            });
        }
        let e = v.entity_count();
        let k = m + e + 1;
        let mut nodes: Vec<NodeInfo> = post
            .iter()
            .zip(&v.sentences)
            .map(|(n, s)| NodeInfo::ProgExec {
                op: n.op.op.name().to_string(),
                sentence: s.clone(),
            })
            .collect();
        let mut tree = Vec::new();
        for (i, n) in post.iter().enumerate() {
            for &c in &n.children {
                tree.push((c, i));
            }
        }
        let mut ent = Vec::new();
        for (i, spans) in v.spans.iter().enumerate() {
            for span in spans {
                ent.push((i, nodes.len()));
                nodes.push(NodeInfo::Entity {
                    text: span.text.clone(),
                    source: span.source,
                    owner: i,
                });
            }
        }
        nodes.push(NodeInfo::StatementTable);
        let st = (0..m).map(|i| (i, k - 1)).collect();
        Ok(Self::from_edges(m, e, nodes, [tree, ent, st]))
    }

    /// Same graph with node `i` moved to `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let k = self.k();
        let masks = std::array::from_fn(|d| {
            let mut mask = vec![false; k * k];
            for i in 0..k {
                for j in 0..k {
                    mask[perm[i] * k + perm[j]] = self.masks[d][i * k + j];
                }
            }
            Arc::from(mask)
        });
        let mut nodes = self.nodes.clone();
        for (i, n) in self.nodes.iter().enumerate() {
            nodes[perm[i]] = n.clone();
        }
        GraphStructure {
            m: self.m,
            e: self.e,
            nodes,
            masks,
        }
    }
}

/// A graph with initial node features.
#[derive(Debug, Clone, PartialEq)]
pub struct EvidenceGraph {
    pub structure: GraphStructure,
    /// K×F
    pub h: Tensor,
}

pub fn build_graph(
    p: &Program,
    v: &VerbalizedExecution,
    doc: &DocEncoding,
    h_st: &[f64],
) -> Result<EvidenceGraph, GvatError> {
    if doc.cls.rows != p.size() {
        return Err(GvatError::CountMismatch {
            doc: doc.cls.rows,
            program: p.size(),
        });
    }
    let structure = GraphStructure::build(p, v)?;
    let f = doc.cls.cols;
    let mut data = doc.cls.data.clone();
    for ents in &doc.entities {
        for e in ents {
            data.extend_from_slice(e);
        }
    }
    data.extend_from_slice(h_st);
    let h = Tensor::from_vec(structure.k(), f, data);
    Ok(EvidenceGraph { structure, h })
}

#[derive(Debug, Clone)]
pub struct Head {
    pub u: ParamId,
    pub w: ParamId,
    pub a: ParamId,
}

#[derive(Debug, Clone)]
pub struct Layer {
    pub heads: [Head; HEADS],
    pub fuse_w: ParamId,
    pub fuse_b: ParamId,
}

/// The verifier's graph tensors inside a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Gvat {
    pub dim: usize,
    pub att_dim: usize,
    pub layers: Vec<Layer>,
    pub w_f: ParamId,
    pub b_f: ParamId,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForwardOptions {
    /// Skip propagation; gate and pool the initial features.
    pub no_graph: bool,
    /// Gate with the propagated statement-table vector instead of the
    /// initial one.
    pub gate_updated: bool,
}

#[derive(Debug, Clone)]
pub struct ForwardVars {
    pub h_new: Var,
    /// Attention per layer and head, each K×K.
    pub alphas: Vec<[Var; HEADS]>,
    /// M×1 gate weights.
    pub gates: Var,
    pub h_final: Var,
    pub logit: Var,
    pub y: Var,
}

impl Gvat {
    pub fn new<R: Rng>(store: &mut ParamStore, dim: usize, att_dim: usize, layers: usize, rng: &mut R) -> Self {
        let layers = (0..layers.max(1))
            .map(|l| Layer {
                heads: std::array::from_fn(|d| Head {
                    u: store.add(format!("gvat.l{l}.h{d}.u"), glorot(rng, dim, att_dim)),
                    w: store.add(format!("gvat.l{l}.h{d}.w"), glorot(rng, dim, dim)),
                    a: store.add(format!("gvat.l{l}.h{d}.a"), glorot(rng, 2 * att_dim, 1)),
                }),
                fuse_w: store.add(format!("gvat.l{l}.fuse_w"), glorot(rng, HEADS * dim, dim)),
                fuse_b: store.add(format!("gvat.l{l}.fuse_b"), Tensor::zeros(1, dim)),
            })
            .collect();
        let w_f = store.add("gvat.w_f", glorot(rng, 2 * dim, 1));
        let b_f = store.add("gvat.b_f", Tensor::zeros(1, 1));
        Gvat {
            dim,
            att_dim,
            layers,
            w_f,
            b_f,
        }
    }

    pub fn attach(store: &ParamStore) -> Option<Self> {
        let mut layers = Vec::new();
        while let Some(fuse_w) = store.id(&format!("gvat.l{}.fuse_w", layers.len())) {
            let l = layers.len();
            let head = |d: usize| -> Option<Head> {
                Some(Head {
                    u: store.id(&format!("gvat.l{l}.h{d}.u"))?,
                    w: store.id(&format!("gvat.l{l}.h{d}.w"))?,
                    a: store.id(&format!("gvat.l{l}.h{d}.a"))?,
                })
            };
            layers.push(Layer {
                heads: [head(0)?, head(1)?, head(2)?],
                fuse_w,
                fuse_b: store.id(&format!("gvat.l{l}.fuse_b"))?,
            });
        }
        let first = layers.first()?;
        let (dim, att_dim) = store.value(first.heads[0].u).shape();
        Some(Gvat {
            dim,
            att_dim,
            layers,
            w_f: store.id("gvat.w_f")?,
            b_f: store.id("gvat.b_f")?,
        })
    }

    /// One propagation layer. Returns the updated K×F features and the
    /// per-head attention matrices.
    pub fn layer_var(&self, tape: &mut Tape, store: &ParamStore, g: &GraphStructure, layer: usize, h: Var) -> (Var, [Var; HEADS]) {
        let l = &self.layers[layer];
        let att = self.att_dim;
        let first: Vec<usize> = (0..att).collect();
        let second: Vec<usize> = (att..2 * att).collect();
        let mut outs = Vec::with_capacity(HEADS);
        let mut alphas = Vec::with_capacity(HEADS);
        for (d, head) in l.heads.iter().enumerate() {
            let u = tape.param(store, head.u);
            let hu = tape.matmul(h, u);
            let a = tape.param(store, head.a);
            let a1 = tape.select_rows(a, &first);
            let a2 = tape.select_rows(a, &second);
            let s1 = tape.matmul(hu, a1);
            let s2 = tape.matmul(hu, a2);
            let s2t = tape.transpose(s2);
            let e = tape.outer_add(s1, s2t);
            let e = tape.leaky_relu(e, LEAKY_SLOPE);
            let alpha = tape.masked_softmax(e, Rc::from(&g.masks[d][..]));
            let w = tape.param(store, head.w);
            let hw = tape.matmul(h, w);
            let agg = tape.matmul(alpha, hw);
            outs.push(tape.elu(agg));
            alphas.push(alpha);
        }
        let cat = tape.concat_cols(&outs);
        let fw = tape.param(store, l.fuse_w);
        let fb = tape.param(store, l.fuse_b);
        let lin = tape.matmul(cat, fw);
        let lin = tape.add_row(lin, fb);
        let out = tape.elu(lin);
        (out, [alphas[0], alphas[1], alphas[2]])
    }

    pub fn propagate_var(&self, tape: &mut Tape, store: &ParamStore, g: &GraphStructure, h: Var) -> (Var, Vec<[Var; HEADS]>) {
        let mut cur = h;
        let mut alphas = Vec::with_capacity(self.layers.len());
        for l in 0..self.layers.len() {
            let (next, a) = self.layer_var(tape, store, g, l, cur);
            cur = next;
            alphas.push(a);
        }
        (cur, alphas)
    }

    /// `p_i = σ(h_gate · h_new_i)` over Prog-Exec nodes and
    /// `H_final = Σ p_i h_new_i`.
    pub fn gated_aggregate_var(tape: &mut Tape, g: &GraphStructure, h_new: Var, h_gate: Var) -> (Var, Var) {
        let rows: Vec<usize> = (0..g.m).collect();
        let hp = tape.select_rows(h_new, &rows);
        let gt = tape.transpose(h_gate);
        let scores = tape.matmul(hp, gt);
        let p = tape.sigmoid(scores);
        let pt = tape.transpose(p);
        let pooled = tape.matmul(pt, hp);
        (pooled, p)
    }

    /// Logit and probability of `σ(w_f · [H_final ; h_st] + b)`.
    pub fn classify_var(&self, tape: &mut Tape, store: &ParamStore, h_final: Var, h_st: Var) -> (Var, Var) {
        let cat = tape.concat_cols(&[h_final, h_st]);
        let w = tape.param(store, self.w_f);
        let b = tape.param(store, self.b_f);
        let z = tape.matmul(cat, w);
        let logit = tape.add(z, b);
        let y = tape.sigmoid(logit);
        (logit, y)
    }

    pub fn forward_var(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        g: &GraphStructure,
        h: Var,
        options: ForwardOptions,
    ) -> ForwardVars {
        let st = g.st_index();
        let h_st = tape.select_rows(h, &[st]);
        let (h_new, alphas) = if options.no_graph {
            (h, Vec::new())
        } else {
            self.propagate_var(tape, store, g, h)
        };
        let h_gate = if options.gate_updated && !options.no_graph {
            tape.select_rows(h_new, &[st])
        } else {
            h_st
        };
        let (h_final, gates) = Self::gated_aggregate_var(tape, g, h_new, h_gate);
        let (logit, y) = self.classify_var(tape, store, h_final, h_st);
        ForwardVars {
            h_new,
            alphas,
            gates,
            h_final,
            logit,
            y,
        }
    }
}

/// Binary cross-entropy `-(y log p + (1-y) log(1-p))` from a logit.
pub fn bce_var(tape: &mut Tape, logit: Var, target: f64) -> Var {
    let p = tape.sigmoid(logit);
    let neg = tape.scale(logit, -1.0);
    let q = tape.sigmoid(neg);
    let lp = tape.log(p);
    let lq = tape.log(q);
    let a = tape.scale(lp, -target);
    let b = tape.scale(lq, -(1.0 - target));
    tape.add(a, b)
}

/// Propagated features and attention for a graph, off the tape.
#[derive(Debug, Clone)]
pub struct Propagation {
    pub h_new: Tensor,
    pub alphas: Vec<[Tensor; HEADS]>,
}

pub fn propagate(g: &EvidenceGraph, store: &ParamStore, params: &Gvat) -> Propagation {
    let mut tape = Tape::new();
    let h = tape.constant(g.h.clone());
    let (h_new, alphas) = params.propagate_var(&mut tape, store, &g.structure, h);
    Propagation {
        h_new: tape.value(h_new).clone(),
        alphas: alphas
            .iter()
            .map(|a| [0, 1, 2].map(|d| tape.value(a[d]).clone()))
            .collect(),
    }
}

/// Returns `(H_final, gate weights)`. The gate vector is the initial
/// statement-table row of `g`.
pub fn gated_aggregate(g: &EvidenceGraph, h_new: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let mut tape = Tape::new();
    let hn = tape.constant(h_new.clone());
    let gate = tape.constant(Tensor::row_vector(g.h.row(g.structure.st_index()).to_vec()));
    let (pooled, p) = Gvat::gated_aggregate_var(&mut tape, &g.structure, hn, gate);
    (tape.value(pooled).data.clone(), tape.value(p).data.clone())
}

pub fn classify(h_final: &[f64], h_st: &[f64], store: &ParamStore, params: &Gvat) -> f64 {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::row_vector(h_final.to_vec()));
    let b = tape.constant(Tensor::row_vector(h_st.to_vec()));
    let (_, y) = params.classify_var(&mut tape, store, a, b);
    tape.value(y).item()
}

pub fn forward(g: &EvidenceGraph, store: &ParamStore, params: &Gvat, options: ForwardOptions) -> f64 {
    let mut tape = Tape::new();
    let h = tape.constant(g.h.clone());
    let out = params.forward_var(&mut tape, store, &g.structure, h, options);
    tape.value(out.y).item()
}

pub fn forward_no_graph(g: &EvidenceGraph, store: &ParamStore, params: &Gvat) -> f64 {
    forward(
        g,
        store,
        params,
        ForwardOptions {
            no_graph: true,
            gate_updated: false,
        },
    )
}

fn edge_key(t: EdgeType) -> &'static str {
    match t {
        EdgeType::Program => "program",
        EdgeType::Entity => "entity",
        EdgeType::StatementTable => "statement_table",
    }
}

/// Nodes with their labels plus one edge list per edge type.
pub fn export_json(g: &GraphStructure) -> Json {
    let nodes: Vec<Json> = g
        .nodes
        .iter()
        .enumerate()
        .map(|(i, n)| {
            let mut v = serde_json::to_value(n).expect("node serializes");
            v["id"] = json!(i);
            v
        })
        .collect();
    let mut edges = serde_json::Map::new();
    for (d, t) in EDGE_TYPES.iter().enumerate() {
        edges.insert(edge_key(*t).into(), json!(g.edges(d)));
    }
    json!({ "m": g.m, "e": g.e, "k": g.k(), "nodes": nodes, "edges": edges })
}

pub fn import_json(doc: &Json) -> Result<GraphStructure, GvatError> {
    let err = |m: &str| GvatError::Import(m.to_string());
    let m = doc["m"].as_u64().ok_or_else(|| err("missing m"))? as usize;
    let e = doc["e"].as_u64().ok_or_else(|| err("missing e"))? as usize;
    let raw_nodes = doc["nodes"].as_array().ok_or_else(|| err("missing nodes"))?;
    let nodes = raw_nodes
        .iter()
        .map(|n| {
            let mut n = n.clone();
            if let Some(obj) = n.as_object_mut() {
                obj.remove("id");
            }
            serde_json::from_value::<NodeInfo>(n).map_err(|x| GvatError::Import(x.to_string()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    if nodes.len() != m + e + 1 {
        return Err(err("node count does not equal m + e + 1"));
    }
    let mut lists: [Vec<(usize, usize)>; HEADS] = Default::default();
    for (d, t) in EDGE_TYPES.iter().enumerate() {
        let list: Vec<(usize, usize)> = serde_json::from_value(doc["edges"][edge_key(*t)].clone())
            .map_err(|x| GvatError::Import(x.to_string()))?;
        if list.iter().any(|(i, j)| *i >= nodes.len() || *j >= nodes.len() || i == j) {
            return Err(err("edge endpoint out of range"));
        }
        lists[d] = list;
    }
    Ok(GraphStructure::from_edges(m, e, nodes, lists))
}

fn dot_escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"")
}

pub fn export_dot(g: &GraphStructure) -> String {
    let mut out = String::from("graph evidence {\n");
    for (i, n) in g.nodes.iter().enumerate() {
        let (label, shape) = match n {
            NodeInfo::ProgExec { op, sentence } => (format!("{op}: {sentence}"), "box"),
            NodeInfo::Entity { text, .. } => (text.clone(), "ellipse"),
            NodeInfo::StatementTable => ("statement + table".to_string(), "diamond"),
        };
        out.push_str(&format!("  n{i} [label=\"{}\", shape={shape}];\n", dot_escape(&label)));
    }
    for (d, t) in EDGE_TYPES.iter().enumerate() {
        for (i, j) in g.edges(d) {
            out.push_str(&format!("  n{i} -- n{j} [type={}];\n", edge_key(*t)));
        }
    }
    out.push_str("}\n");
    out
}
