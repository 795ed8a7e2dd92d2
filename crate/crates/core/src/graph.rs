//! Typed graph model, schema validation and JSON Lines ingestion.
//!
//! Node ids are opaque strings on disk and dense indices in memory. Edges
//! keep their declared direction (used when rendering relation sentences)
//! but are traversable from both endpoints.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type NodeIdx = usize;
pub type TypeIdx = usize;
pub type EdgeTypeIdx = usize;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeTypeDef {
    pub name: String,
    pub src: String,
    pub dst: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchemaDef {
    pub node_types: Vec<String>,
    pub edge_types: Vec<EdgeTypeDef>,
    /// Prompt preamble subject, e.g. "an academic network".
    pub domain_blurb: String,
    /// Label vocabulary per node type that is a classification target.
    #[serde(default)]
    pub class_labels: BTreeMap<String, Vec<String>>,
    /// What a class label denotes in classification prompts, e.g. "research field".
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_noun: Option<String>,
}

impl SchemaDef {
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for t in &self.node_types {
            if t.is_empty() {
                return Err(Error::Schema("empty node type name".into()));
            }
            if !seen.insert(t.as_str()) {
                return Err(Error::Schema(format!("duplicate node type `{t}`")));
            }
        }
        let mut seen = HashSet::new();
        for et in &self.edge_types {
            if !seen.insert(et.name.as_str()) {
                return Err(Error::Schema(format!("duplicate edge type `{}`", et.name)));
            }
            for end in [&et.src, &et.dst] {
                if self.node_type(end).is_none() {
                    return Err(Error::Schema(format!(
                        "edge type `{}` references undeclared node type `{end}`",
                        et.name
                    )));
                }
            }
        }
        for (t, labels) in &self.class_labels {
            if self.node_type(t).is_none() {
                return Err(Error::Schema(format!(
                    "class labels declared for undeclared node type `{t}`"
                )));
            }
            if labels.is_empty() {
                return Err(Error::Schema(format!("empty label vocabulary for `{t}`")));
            }
        }
        Ok(())
    }

    pub fn node_type(&self, name: &str) -> Option<TypeIdx> {
        self.node_types.iter().position(|t| t == name)
    }

    pub fn edge_type(&self, name: &str) -> Option<EdgeTypeIdx> {
        self.edge_types.iter().position(|t| t.name == name)
    }

    pub fn type_name(&self, t: TypeIdx) -> &str {
        &self.node_types[t]
    }

    pub fn edge_endpoints(&self, et: EdgeTypeIdx) -> (TypeIdx, TypeIdx) {
        let def = &self.edge_types[et];
        (
            self.node_type(&def.src).expect("validated schema"),
            self.node_type(&def.dst).expect("validated schema"),
        )
    }

    /// Whether some edge type connects the two node types, in either direction.
    pub fn connects(&self, a: TypeIdx, b: TypeIdx) -> bool {
        (0..self.edge_types.len()).any(|et| {
            let (s, d) = self.edge_endpoints(et);
            (s == a && d == b) || (s == b && d == a)
        })
    }

    pub fn labels_for(&self, node_type: &str) -> Option<&[String]> {
        self.class_labels.get(node_type).map(Vec::as_slice)
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let schema: SchemaDef = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            msg: e.to_string(),
        })?;
        schema.validate()?;
        Ok(schema)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Edge {
    pub src: NodeIdx,
    pub dst: NodeIdx,
    pub etype: EdgeTypeIdx,
}

/// Immutable heterogeneous graph. Build with [`GraphBuilder`].
#[derive(Debug, Clone)]
pub struct HeteroGraph {
    schema: SchemaDef,
    ids: Vec<String>,
    types: Vec<TypeIdx>,
    text: Vec<Option<String>>,
    index: HashMap<String, NodeIdx>,
    edges: Vec<Edge>,
    edge_set: HashSet<Edge>,
    // (neighbor, edge type), sorted; both directions of every edge.
    adj: Vec<Vec<(NodeIdx, EdgeTypeIdx)>>,
    // distinct neighbors, sorted
    nbrs: Vec<Vec<NodeIdx>>,
    by_type: Vec<Vec<NodeIdx>>,
}

impl HeteroGraph {
    pub fn builder(schema: SchemaDef) -> Result<GraphBuilder> {
        GraphBuilder::new(schema)
    }

    pub fn schema(&self) -> &SchemaDef {
        &self.schema
    }

    pub fn num_nodes(&self) -> usize {
        self.ids.len()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn num_node_types(&self) -> usize {
        self.schema.node_types.len()
    }

    pub fn num_edge_types(&self) -> usize {
        self.schema.edge_types.len()
    }

    pub fn node_id(&self, v: NodeIdx) -> &str {
        &self.ids[v]
    }

    pub fn node_index(&self, id: &str) -> Result<NodeIdx> {
        self.index
            .get(id)
            .copied()
            .ok_or_else(|| Error::UnknownNode(id.to_string()))
    }

    pub fn node_type(&self, v: NodeIdx) -> TypeIdx {
        self.types[v]
    }

    pub fn node_type_name(&self, v: NodeIdx) -> &str {
        self.schema.type_name(self.types[v])
    }

    pub fn node_text(&self, v: NodeIdx) -> Option<&str> {
        self.text[v].as_deref()
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn nodes_of_type(&self, t: TypeIdx) -> &[NodeIdx] {
        &self.by_type[t]
    }

    /// Node count per type, keyed by type name.
    pub fn type_counts(&self) -> BTreeMap<String, usize> {
        self.schema
            .node_types
            .iter()
            .zip(&self.by_type)
            .map(|(name, members)| (name.clone(), members.len()))
            .collect()
    }

    pub fn contains_node(&self, v: NodeIdx) -> bool {
        v < self.ids.len()
    }

    /// Whether an edge of type `et` joins `a` and `b`, in either orientation.
    pub fn has_edge(&self, a: NodeIdx, b: NodeIdx, et: EdgeTypeIdx) -> bool {
        self.edge_set.contains(&Edge { src: a, dst: b, etype: et })
            || self.edge_set.contains(&Edge { src: b, dst: a, etype: et })
    }

    /// Distinct neighbors of `v` over all edge types, ascending.
    pub fn neighbors(&self, v: NodeIdx) -> &[NodeIdx] {
        &self.nbrs[v]
    }

    /// Neighbors of `v`, optionally restricted to one edge type; ascending
    /// and deduplicated.
    pub fn typed_neighbors(&self, v: NodeIdx, et: Option<EdgeTypeIdx>) -> Result<Vec<NodeIdx>> {
        if !self.contains_node(v) {
            return Err(Error::UnknownNode(format!("#{v}")));
        }
        Ok(match et {
            None => self.nbrs[v].clone(),
            Some(et) => {
                if et >= self.num_edge_types() {
                    return Err(Error::UnknownEdgeType(format!("#{et}")));
                }
                let mut out: Vec<NodeIdx> = self.adj[v]
                    .iter()
                    .filter(|(_, t)| *t == et)
                    .map(|(n, _)| *n)
                    .collect();
                out.dedup();
                out
            }
        })
    }

    /// Same as [`typed_neighbors`](Self::typed_neighbors) addressed by the
    /// original string ids.
    pub fn typed_neighbors_by_id(&self, id: &str, et: Option<&str>) -> Result<Vec<String>> {
        let v = self.node_index(id)?;
        let et = et
            .map(|name| {
                self.schema
                    .edge_type(name)
                    .ok_or_else(|| Error::UnknownEdgeType(name.to_string()))
            })
            .transpose()?;
        Ok(self
            .typed_neighbors(v, et)?
            .into_iter()
            .map(|n| self.ids[n].clone())
            .collect())
    }

    /// Copy of this graph without the listed edges (matched in either
    /// orientation). Used to hold out evaluation edges.
    pub fn without_edges(&self, removed: &[Edge]) -> HeteroGraph {
        let drop: HashSet<Edge> = removed
            .iter()
            .flat_map(|e| {
                [
                    *e,
                    Edge { src: e.dst, dst: e.src, etype: e.etype },
                ]
            })
            .collect();
        let mut b = GraphBuilder::new(self.schema.clone()).expect("schema already validated");
        for v in 0..self.num_nodes() {
            b.add_node_idx(self.ids[v].clone(), self.types[v], self.text[v].clone())
                .expect("ids already unique");
        }
        for e in &self.edges {
            if !drop.contains(e) {
                b.push_edge(*e);
            }
        }
        b.build()
    }

    /// Write `nodes.jsonl`, `edges.jsonl` and `schema.json` into `dir`.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut w = BufWriter::new(File::create(dir.join(NODES_FILE))?);
        for v in 0..self.num_nodes() {
            let rec = NodeRecord {
                id: self.ids[v].clone(),
                node_type: self.node_type_name(v).to_string(),
                text: self.text[v].clone(),
            };
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        let mut w = BufWriter::new(File::create(dir.join(EDGES_FILE))?);
        for e in &self.edges {
            let rec = EdgeRecord {
                src: self.ids[e.src].clone(),
                dst: self.ids[e.dst].clone(),
                etype: self.schema.edge_types[e.etype].name.clone(),
            };
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        std::fs::write(
            dir.join(SCHEMA_FILE),
            serde_json::to_string_pretty(&self.schema)?,
        )?;
        Ok(())
    }

    pub fn load_dir(dir: &Path) -> Result<(HeteroGraph, LoadReport)> {
        load_graph(
            &dir.join(NODES_FILE),
            &dir.join(EDGES_FILE),
            &dir.join(SCHEMA_FILE),
        )
    }
}

pub const NODES_FILE: &str = "nodes.jsonl";
pub const EDGES_FILE: &str = "edges.jsonl";
pub const SCHEMA_FILE: &str = "schema.json";

#[derive(Debug, Serialize, Deserialize)]
struct NodeRecord {
    id: String,
    #[serde(rename = "type")]
    node_type: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    text: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct EdgeRecord {
    src: String,
    dst: String,
    etype: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub duplicate_edges: usize,
}

pub struct GraphBuilder {
    schema: SchemaDef,
    ids: Vec<String>,
    types: Vec<TypeIdx>,
    text: Vec<Option<String>>,
    index: HashMap<String, NodeIdx>,
    edges: Vec<Edge>,
    edge_set: HashSet<Edge>,
    duplicates: usize,
}

impl GraphBuilder {
    pub fn new(schema: SchemaDef) -> Result<Self> {
        schema.validate()?;
        Ok(Self {
            schema,
            ids: Vec::new(),
            types: Vec::new(),
            text: Vec::new(),
            index: HashMap::new(),
            edges: Vec::new(),
            edge_set: HashSet::new(),
            duplicates: 0,
        })
    }

    pub fn schema(&self) -> &SchemaDef {
        &self.schema
    }

    pub fn add_node(&mut self, id: &str, node_type: &str, text: Option<&str>) -> Result<NodeIdx> {
        let t = self
            .schema
            .node_type(node_type)
            .ok_or_else(|| Error::UnknownNodeType(node_type.to_string()))?;
        self.add_node_idx(id.to_string(), t, text.map(str::to_string))
    }

    pub fn add_node_idx(&mut self, id: String, t: TypeIdx, text: Option<String>) -> Result<NodeIdx> {
        if self.index.contains_key(&id) {
            return Err(Error::Graph(format!("duplicate node id `{id}`")));
        }
        let v = self.ids.len();
        self.index.insert(id.clone(), v);
        self.ids.push(id);
        self.types.push(t);
        self.text.push(text);
        Ok(v)
    }

    /// Adds an edge by string ids. Returns `false` when it duplicates an
    /// existing edge, which is then dropped.
    pub fn add_edge(&mut self, src: &str, dst: &str, etype: &str) -> Result<bool> {
        let s = *self
            .index
            .get(src)
            .ok_or_else(|| Error::UnknownNode(src.to_string()))?;
        let d = *self
            .index
            .get(dst)
            .ok_or_else(|| Error::UnknownNode(dst.to_string()))?;
        let et = self
            .schema
            .edge_type(etype)
            .ok_or_else(|| Error::UnknownEdgeType(etype.to_string()))?;
        self.add_edge_idx(s, d, et)
    }

    pub fn add_edge_idx(&mut self, s: NodeIdx, d: NodeIdx, et: EdgeTypeIdx) -> Result<bool> {
        let (st, dt) = self.schema.edge_endpoints(et);
        if self.types[s] != st || self.types[d] != dt {
            let def = &self.schema.edge_types[et];
            return Err(Error::Graph(format!(
                "edge `{}` -> `{}` has endpoint types ({}, {}) but `{}` expects ({}, {})",
                self.ids[s],
                self.ids[d],
                self.schema.node_types[self.types[s]],
                self.schema.node_types[self.types[d]],
                def.name,
                def.src,
                def.dst
            )));
        }
        Ok(self.push_edge(Edge { src: s, dst: d, etype: et }))
    }

    fn push_edge(&mut self, e: Edge) -> bool {
        let rev = Edge { src: e.dst, dst: e.src, etype: e.etype };
        if self.edge_set.contains(&e) || self.edge_set.contains(&rev) {
            self.duplicates += 1;
            return false;
        }
        self.edge_set.insert(e);
        self.edges.push(e);
        true
    }

    pub fn duplicates(&self) -> usize {
        self.duplicates
    }

    pub fn build(self) -> HeteroGraph {
        let n = self.ids.len();
        let mut adj: Vec<Vec<(NodeIdx, EdgeTypeIdx)>> = vec![Vec::new(); n];
        for e in &self.edges {
            adj[e.src].push((e.dst, e.etype));
            if e.src != e.dst {
                adj[e.dst].push((e.src, e.etype));
            }
        }
        let nbrs = adj
            .iter_mut()
            .map(|list| {
                list.sort_unstable();
                let mut ns: Vec<NodeIdx> = list.iter().map(|(v, _)| *v).collect();
                ns.dedup();
                ns
            })
            .collect();
        let mut by_type = vec![Vec::new(); self.schema.node_types.len()];
        for (v, &t) in self.types.iter().enumerate() {
            by_type[t].push(v);
        }
        let (nt, et) = (self.schema.node_types.len(), self.schema.edge_types.len());
        if nt + et <= 2 {
            warn!("graph is not heterogeneous: {nt} node type(s) and {et} edge type(s)");
        }
        HeteroGraph {
            schema: self.schema,
            ids: self.ids,
            types: self.types,
            text: self.text,
            index: self.index,
            edges: self.edges,
            edge_set: self.edge_set,
            adj,
            nbrs,
            by_type,
        }
    }
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

/// Load a graph from JSON Lines node and edge files plus a JSON schema.
///
/// Blank lines are skipped. Duplicate edges are collapsed and counted in the
/// returned [`LoadReport`].
pub fn load_graph(
    nodes_path: &Path,
    edges_path: &Path,
    schema_path: &Path,
) -> Result<(HeteroGraph, LoadReport)> {
    let schema = SchemaDef::from_json_file(schema_path)?;
    let mut b = GraphBuilder::new(schema)?;

    let reader = BufReader::new(File::open(nodes_path)?);
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: NodeRecord =
            serde_json::from_str(&line).map_err(|e| parse_err(nodes_path, lineno, e.to_string()))?;
        b.add_node(&rec.id, &rec.node_type, rec.text.as_deref())
            .map_err(|e| parse_err(nodes_path, lineno, e.to_string()))?;
    }

    let reader = BufReader::new(File::open(edges_path)?);
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: EdgeRecord =
            serde_json::from_str(&line).map_err(|e| parse_err(edges_path, lineno, e.to_string()))?;
        b.add_edge(&rec.src, &rec.dst, &rec.etype)
            .map_err(|e| parse_err(edges_path, lineno, e.to_string()))?;
    }

    let report = LoadReport {
        duplicate_edges: b.duplicates(),
    };
    if report.duplicate_edges > 0 {
        warn!("collapsed {} duplicate edge(s)", report.duplicate_edges);
    }
    Ok((b.build(), report))
}
