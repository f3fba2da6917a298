//! Hierarchical label graph.
//!
//! Labels form a rooted tree: level-1 nodes are the base classes, deeper
//! nodes are subclasses, and each dataset annotates at the levels its rules
//! define. Every non-root node carries a text embedding from a provider;
//! a message-passing graph encoder turns those into hierarchical text
//! embeddings that also encode granularity and kinship.
//!
//! Hierarchy file format: one node per line, `id<TAB>parent_id<TAB>level
//! <TAB>text`, root has parent_id −1, `#` starts a comment.
//!
//! CSEM embedding table: magic `CSEM`, u32 version = 1, u32 C, then
//! `(u32 text_len, text bytes, C × f32)` records, little-endian.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numcore::ParamStore;

pub type NodeId = u16;

const CSEM_MAGIC: &[u8; 4] = b"CSEM";
const CSEM_VERSION: u32 = 1;

/// One label node.
#[derive(Debug, Clone, PartialEq)]
pub struct HierarchyNode {
    pub id: NodeId,
    pub text: String,
    /// Depth from the root (root = 0, base classes = 1).
    pub level: u8,
    /// `None` only for the root.
    pub parent: Option<NodeId>,
    /// Ascending child ids.
    pub children: Vec<NodeId>,
    /// Domains that annotate at this node.
    pub dataset_tags: Vec<u16>,
}

/// Validated rooted label tree. Immutable; mutations return a new value.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelHierarchy {
    nodes: BTreeMap<NodeId, HierarchyNode>,
    root_id: NodeId,
    depth: u8,
}

impl LabelHierarchy {
    /// Build and validate from raw `(id, parent, level, text)` rows.
    pub fn from_rows(rows: Vec<(NodeId, Option<NodeId>, u8, String)>) -> Result<Self> {
        let mut nodes: BTreeMap<NodeId, HierarchyNode> = BTreeMap::new();
        let mut root_id = None;
        for (id, parent, level, text) in rows {
            if nodes.contains_key(&id) {
                return Err(Error::Validation(format!("duplicate node id {id}")));
            }
            if parent.is_none() {
                if let Some(prev) = root_id {
                    return Err(Error::Validation(format!(
                        "multiple roots: node {prev} and node {id}"
                    )));
                }
                root_id = Some(id);
            }
            nodes.insert(
                id,
                HierarchyNode {
                    id,
                    text,
                    level,
                    parent,
                    children: Vec::new(),
                    dataset_tags: Vec::new(),
                },
            );
        }
        let root_id = root_id.ok_or_else(|| Error::Validation("no root node".into()))?;

        let ids: Vec<NodeId> = nodes.keys().copied().collect();
        for id in &ids {
            if let Some(p) = nodes[id].parent {
                if !nodes.contains_key(&p) {
                    return Err(Error::Validation(format!(
                        "node {id} references missing parent {p}"
                    )));
                }
                let child_id = *id;
                nodes.get_mut(&p).unwrap().children.push(child_id);
            }
        }
        for node in nodes.values_mut() {
            node.children.sort_unstable();
        }

        // BFS from the root assigns levels; every node must be reached
        // (unreached ⇒ orphan subtree or cycle) and must agree with its
        // declared level.
        let mut level_by_bfs: BTreeMap<NodeId, u8> = BTreeMap::new();
        let mut queue = std::collections::VecDeque::from([root_id]);
        level_by_bfs.insert(root_id, 0);
        let mut depth = 0u8;
        while let Some(id) = queue.pop_front() {
            let lvl = level_by_bfs[&id];
            depth = depth.max(lvl);
            for &c in &nodes[&id].children {
                if level_by_bfs.contains_key(&c) {
                    return Err(Error::Validation(format!("cycle through node {c}")));
                }
                level_by_bfs.insert(c, lvl + 1);
                queue.push_back(c);
            }
        }
        for (id, node) in &nodes {
            match level_by_bfs.get(id) {
                None => {
                    return Err(Error::Validation(format!(
                        "node {id} is not reachable from the root (cycle or orphan)"
                    )))
                }
                Some(&lvl) if lvl != node.level => {
                    return Err(Error::Validation(format!(
                        "node {id} declares level {} but sits at depth {lvl}",
                        node.level
                    )))
                }
                _ => {}
            }
        }
        Ok(LabelHierarchy { nodes, root_id, depth })
    }

    /// Parse the tab-separated hierarchy file format.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, 0, e))?;
        let mut rows = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 4 {
                return Err(Error::format(
                    path,
                    format!("line {}: expected 4 tab-separated columns", lineno + 1),
                ));
            }
            let id: NodeId = cols[0].parse().map_err(|_| {
                Error::format(path, format!("line {}: bad node id {:?}", lineno + 1, cols[0]))
            })?;
            let parent: i32 = cols[1].parse().map_err(|_| {
                Error::format(path, format!("line {}: bad parent id {:?}", lineno + 1, cols[1]))
            })?;
            let level: u8 = cols[2].parse().map_err(|_| {
                Error::format(path, format!("line {}: bad level {:?}", lineno + 1, cols[2]))
            })?;
            let parent = if parent < 0 { None } else { Some(parent as NodeId) };
            rows.push((id, parent, level, cols[3].to_string()));
        }
        Self::from_rows(rows)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::from("# id\tparent_id\tlevel\ttext\n");
        for node in self.nodes.values() {
            let parent = node.parent.map_or(-1i32, |p| p as i32);
            out.push_str(&format!("{}\t{}\t{}\t{}\n", node.id, parent, node.level, node.text));
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, 0, e))
    }

    pub fn root_id(&self) -> NodeId {
        self.root_id
    }

    pub fn depth(&self) -> u8 {
        self.depth
    }

    pub fn node(&self, id: NodeId) -> Option<&HierarchyNode> {
        self.nodes.get(&id)
    }

    pub fn nodes(&self) -> impl Iterator<Item = &HierarchyNode> {
        self.nodes.values()
    }

    /// Non-root node ids in ascending order.
    pub fn label_ids(&self) -> Vec<NodeId> {
        self.nodes
            .values()
            .filter(|n| n.parent.is_some())
            .map(|n| n.id)
            .collect()
    }

    /// Base classes: the level-1 nodes.
    pub fn base_ids(&self) -> Vec<NodeId> {
        self.nodes
            .values()
            .filter(|n| n.level == 1)
            .map(|n| n.id)
            .collect()
    }

    /// Nodes at a given level.
    pub fn ids_at_level(&self, level: u8) -> Vec<NodeId> {
        self.nodes
            .values()
            .filter(|n| n.level == level)
            .map(|n| n.id)
            .collect()
    }

    /// Children of `v`'s parent, excluding `v`. Root has no siblings.
    pub fn siblings(&self, v: NodeId) -> Result<Vec<NodeId>> {
        let node = self
            .nodes
            .get(&v)
            .ok_or_else(|| Error::Validation(format!("unknown node {v}")))?;
        let parent = node
            .parent
            .ok_or_else(|| Error::Domain("root has no siblings".into()))?;
        Ok(self.nodes[&parent]
            .children
            .iter()
            .copied()
            .filter(|&c| c != v)
            .collect())
    }

    /// The level-1 ancestor on the unique root path (itself for level-1).
    pub fn merge_to_base(&self, v: NodeId) -> Result<NodeId> {
        let mut node = self
            .nodes
            .get(&v)
            .ok_or_else(|| Error::Validation(format!("unknown node {v}")))?;
        if node.parent.is_none() {
            return Err(Error::Domain("root has no base class".into()));
        }
        while node.level > 1 {
            node = &self.nodes[&node.parent.expect("non-root above level 1")];
        }
        Ok(node.id)
    }

    /// Insert a leaf under `parent_id` with a fresh id; existing nodes keep
    /// their ids. Returns the new hierarchy and the new node's id.
    pub fn insert_leaf(&self, parent_id: NodeId, text: &str) -> Result<(LabelHierarchy, NodeId)> {
        let parent = self
            .nodes
            .get(&parent_id)
            .ok_or_else(|| Error::Validation(format!("unknown parent node {parent_id}")))?;
        let new_id = self
            .nodes
            .keys()
            .max()
            .map(|&m| m + 1)
            .unwrap_or(0);
        let mut nodes = self.nodes.clone();
        let level = parent.level + 1;
        nodes.get_mut(&parent_id).unwrap().children.push(new_id);
        nodes.get_mut(&parent_id).unwrap().children.sort_unstable();
        nodes.insert(
            new_id,
            HierarchyNode {
                id: new_id,
                text: text.to_string(),
                level,
                parent: Some(parent_id),
                children: Vec::new(),
                dataset_tags: Vec::new(),
            },
        );
        Ok((
            LabelHierarchy {
                nodes,
                root_id: self.root_id,
                depth: self.depth.max(level),
            },
            new_id,
        ))
    }

    /// Tag nodes with the domains that annotate at their level.
    pub fn apply_domain_levels(&mut self, domain_id: u16, levels: &[u8]) {
        for node in self.nodes.values_mut() {
            if levels.contains(&node.level) && !node.dataset_tags.contains(&domain_id) {
                node.dataset_tags.push(domain_id);
                node.dataset_tags.sort_unstable();
            }
        }
    }

    /// Ascending ids of the nodes a domain annotates.
    pub fn active_set(&self, domain_id: u16) -> Vec<NodeId> {
        self.nodes
            .values()
            .filter(|n| n.dataset_tags.contains(&domain_id))
            .map(|n| n.id)
            .collect()
    }

    /// Tree distance (hops) between two nodes.
    pub fn distance(&self, a: NodeId, b: NodeId) -> Option<u32> {
        let path = |mut v: NodeId| -> Vec<NodeId> {
            let mut out = vec![v];
            while let Some(p) = self.nodes.get(&v).and_then(|n| n.parent) {
                out.push(p);
                v = p;
            }
            out
        };
        if !self.nodes.contains_key(&a) || !self.nodes.contains_key(&b) {
            return None;
        }
        let pa = path(a);
        let pb = path(b);
        let sa: BTreeMap<NodeId, usize> = pa.iter().enumerate().map(|(i, &n)| (n, i)).collect();
        for (j, n) in pb.iter().enumerate() {
            if let Some(&i) = sa.get(n) {
                return Some((i + j) as u32);
            }
        }
        None
    }
}

/// Per-node text embeddings (root excluded), fixed width C.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbeddings {
    pub width: usize,
    pub rows: BTreeMap<NodeId, Vec<f64>>,
}

/// Per-node hierarchical embeddings after `layers` rounds of message
/// passing; rows are unit-norm when `layers > 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct HierarchicalEmbeddings {
    pub width: usize,
    pub layers: usize,
    pub rows: BTreeMap<NodeId, Vec<f64>>,
}

impl HierarchicalEmbeddings {
    pub fn row(&self, id: NodeId) -> Result<&[f64]> {
        self.rows
            .get(&id)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Validation(format!("no embedding for node {id}")))
    }
}

/// Source of per-label text embeddings: a deterministic seeded hash (the
/// offline stand-in for a frozen text encoder) or a CSEM file table.
#[derive(Debug, Clone)]
pub enum EmbeddingProvider {
    Hashed { seed: u64, width: usize },
    File { table: BTreeMap<String, Vec<f64>>, width: usize },
}

impl EmbeddingProvider {
    pub fn from_csem(path: &Path) -> Result<Self> {
        let (width, entries) = read_csem(path)?;
        Ok(EmbeddingProvider::File {
            table: entries.into_iter().collect(),
            width,
        })
    }

    pub fn width(&self) -> usize {
        match self {
            EmbeddingProvider::Hashed { width, .. } => *width,
            EmbeddingProvider::File { width, .. } => *width,
        }
    }

    /// Unit-norm vector for a label text; same text ⇒ same vector.
    pub fn embed(&self, text: &str) -> Result<Vec<f64>> {
        match self {
            EmbeddingProvider::Hashed { seed, width } => {
                let mut hasher = Sha256::new();
                hasher.update(seed.to_le_bytes());
                hasher.update(text.as_bytes());
                let digest = hasher.finalize();
                let mut rng = ChaCha8Rng::from_seed(digest.into());
                let mut v: Vec<f64> = (0..*width)
                    .map(|_| StandardNormal.sample(&mut rng))
                    .collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                // 32 gaussian coordinates are never all ~0 in practice, but guard anyway
                if norm < 1e-12 {
                    v[0] = 1.0;
                    return Ok(v);
                }
                for x in &mut v {
                    *x /= norm;
                }
                Ok(v)
            }
            EmbeddingProvider::File { table, .. } => table
                .get(text)
                .cloned()
                .ok_or_else(|| Error::Lookup(text.to_string())),
        }
    }
}

/// Embed every non-root label.
pub fn embed_labels(h: &LabelHierarchy, provider: &EmbeddingProvider) -> Result<TextEmbeddings> {
    let mut rows = BTreeMap::new();
    for node in h.nodes() {
        if node.parent.is_some() {
            rows.insert(node.id, provider.embed(&node.text)?);
        }
    }
    Ok(TextEmbeddings {
        width: provider.width(),
        rows,
    })
}

/// Write a CSEM table. Entries are sorted by text so the bytes are
/// deterministic.
pub fn write_csem(path: &Path, width: usize, entries: &BTreeMap<String, Vec<f64>>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, 0, e))?;
    let mut w = BufWriter::new(file);
    let mut offset = 0u64;
    let put = |w: &mut BufWriter<File>, bytes: &[u8], offset: &mut u64| -> Result<()> {
        w.write_all(bytes).map_err(|e| Error::io(path, *offset, e))?;
        *offset += bytes.len() as u64;
        Ok(())
    };
    put(&mut w, CSEM_MAGIC, &mut offset)?;
    put(&mut w, &CSEM_VERSION.to_le_bytes(), &mut offset)?;
    put(&mut w, &(width as u32).to_le_bytes(), &mut offset)?;
    for (text, vec) in entries {
        if vec.len() != width {
            return Err(Error::Shape(format!(
                "embedding for {text:?} has width {}, table width is {width}",
                vec.len()
            )));
        }
        put(&mut w, &(text.len() as u32).to_le_bytes(), &mut offset)?;
        put(&mut w, text.as_bytes(), &mut offset)?;
        for &v in vec {
            put(&mut w, &(v as f32).to_le_bytes(), &mut offset)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, offset, e))
}

/// Read a CSEM table written by [`write_csem`].
pub fn read_csem(path: &Path) -> Result<(usize, Vec<(String, Vec<f64>)>)> {
    let file = File::open(path).map_err(|e| Error::io(path, 0, e))?;
    let mut r = BufReader::new(file);
    let mut offset = 0u64;
    let take = |r: &mut BufReader<File>, buf: &mut [u8], offset: &mut u64| -> Result<()> {
        r.read_exact(buf).map_err(|e| Error::io(path, *offset, e))?;
        *offset += buf.len() as u64;
        Ok(())
    };
    let mut magic = [0u8; 4];
    take(&mut r, &mut magic, &mut offset)?;
    if &magic != CSEM_MAGIC {
        return Err(Error::format(path, format!("bad magic {magic:?}")));
    }
    let mut b4 = [0u8; 4];
    take(&mut r, &mut b4, &mut offset)?;
    let version = u32::from_le_bytes(b4);
    if version != CSEM_VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    take(&mut r, &mut b4, &mut offset)?;
    let width = u32::from_le_bytes(b4) as usize;
    let mut entries = Vec::new();
    loop {
        let mut len_buf = [0u8; 4];
        match r.read_exact(&mut len_buf) {
            Ok(()) => offset += 4,
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(Error::io(path, offset, e)),
        }
        let text_len = u32::from_le_bytes(len_buf) as usize;
        if text_len > 65536 {
            return Err(Error::format(path, format!("text length {text_len} out of range")));
        }
        let mut text = vec![0u8; text_len];
        take(&mut r, &mut text, &mut offset)?;
        let text = String::from_utf8(text)
            .map_err(|_| Error::format(path, "label text is not UTF-8"))?;
        let mut vec = Vec::with_capacity(width);
        for _ in 0..width {
            take(&mut r, &mut b4, &mut offset)?;
            vec.push(f32::from_le_bytes(b4) as f64);
        }
        entries.push((text, vec));
    }
    Ok((width, entries))
}

/// Number of graph-encoder layers present in a parameter store.
pub fn graph_layer_count(params: &ParamStore) -> usize {
    params
        .names()
        .filter(|n| n.starts_with("graph.l") && n.ends_with(".w"))
        .count()
}

/// Parameter names for an `layers`-deep graph encoder of width `c`.
pub fn graph_param_names(layers: usize) -> Vec<String> {
    let mut names = vec!["graph.root".to_string()];
    for l in 0..layers {
        names.push(format!("graph.l{l}.w"));
        names.push(format!("graph.l{l}.b"));
    }
    names
}

/// Define graph-encoder parameters in `params` (root vector, per-layer
/// `W: 2C×C` and bias).
pub fn init_graph_params(
    params: &mut ParamStore,
    c: usize,
    layers: usize,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    params.define("graph.root", crate::network::xavier(rng, vec![c], c, c))?;
    for l in 0..layers {
        params.define(
            &format!("graph.l{l}.w"),
            crate::network::xavier(rng, vec![2 * c, c], 2 * c, c),
        )?;
        params.define(&format!("graph.l{l}.b"), crate::numcore::Tensor::zeros(vec![c]))?;
    }
    Ok(())
}

/// Intermediate activations kept for [`graph_encode_backward`].
#[derive(Debug, Clone)]
pub struct GraphCache {
    /// h⁰ … h^L per node.
    acts: Vec<BTreeMap<NodeId, Vec<f64>>>,
    /// Pre-normalization row norms (empty when layers == 0).
    norms: BTreeMap<NodeId, f64>,
}

fn neighbor_ids(h: &LabelHierarchy, node: &HierarchyNode) -> Vec<Option<NodeId>> {
    // Parent first (None stands for the root's learned vector), then children.
    let mut out = Vec::with_capacity(1 + node.children.len());
    match node.parent {
        Some(p) if p == h.root_id() => out.push(None),
        Some(p) => out.push(Some(p)),
        None => {}
    }
    out.extend(node.children.iter().map(|&c| Some(c)));
    out
}

/// Message passing over the label tree (Ê⁰ = E_t; each layer applies a
/// linear map to `concat(own, mean over neighbors)` followed by tanh; final
/// rows are L2-normalized). The root contributes a learned vector as a
/// neighbor but has no embedding of its own.
pub fn graph_encode(
    h: &LabelHierarchy,
    text: &TextEmbeddings,
    params: &ParamStore,
    layers: usize,
) -> Result<(HierarchicalEmbeddings, GraphCache)> {
    let c = text.width;
    for node in h.nodes() {
        if node.parent.is_some() && !text.rows.contains_key(&node.id) {
            return Err(Error::Validation(format!("node {} has no text embedding", node.id)));
        }
    }
    let root_vec = params.get("graph.root")?;
    if root_vec.shape() != [c] {
        return Err(Error::Shape(format!(
            "graph.root width {:?} vs embedding width {c}",
            root_vec.shape()
        )));
    }

    let mut acts: Vec<BTreeMap<NodeId, Vec<f64>>> = vec![text.rows.clone()];
    for l in 0..layers {
        let w = params.get(&format!("graph.l{l}.w"))?;
        let b = params.get(&format!("graph.l{l}.b"))?;
        let (wr, wc) = w.dims2()?;
        if wr != 2 * c || wc != c {
            return Err(Error::Shape(format!("graph.l{l}.w is {wr}×{wc}, want {}×{c}", 2 * c)));
        }
        let prev = &acts[l];
        let mut next: BTreeMap<NodeId, Vec<f64>> = BTreeMap::new();
        for node in h.nodes() {
            if node.parent.is_none() {
                continue;
            }
            let neigh = neighbor_ids(h, node);
            let mut mean = vec![0.0f64; c];
            for n in &neigh {
                let src: &[f64] = match n {
                    None => root_vec.data(),
                    Some(id) => &prev[id],
                };
                for (m, &v) in mean.iter_mut().zip(src) {
                    *m += v;
                }
            }
            let inv = 1.0 / neigh.len() as f64;
            for m in &mut mean {
                *m *= inv;
            }
            let own = &prev[&node.id];
            // z = [own ; mean], a = zᵀW + b, h = tanh(a)
            let mut out = b.data().to_vec();
            for (j, &zj) in own.iter().chain(mean.iter()).enumerate() {
                let wrow = &w.data()[j * c..(j + 1) * c];
                for (o, &wv) in out.iter_mut().zip(wrow) {
                    *o += zj * wv;
                }
            }
            for o in &mut out {
                *o = o.tanh();
            }
            next.insert(node.id, out);
        }
        acts.push(next);
    }

    let mut rows = acts[layers].clone();
    let mut norms = BTreeMap::new();
    if layers > 0 {
        for (id, row) in rows.iter_mut() {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(n.is_finite() && n > 1e-30) {
                return Err(Error::Numeric(format!("zero-norm hierarchical embedding at node {id}")));
            }
            norms.insert(*id, n);
            let inv = 1.0 / n;
            for v in row.iter_mut() {
                *v *= inv;
            }
        }
    }
    Ok((
        HierarchicalEmbeddings {
            width: c,
            layers,
            rows,
        },
        GraphCache { acts, norms },
    ))
}

/// Backpropagate `d_rows` (cotangents of the final hierarchical embeddings)
/// into the graph-encoder parameter gradients.
pub fn graph_encode_backward(
    h: &LabelHierarchy,
    emb: &HierarchicalEmbeddings,
    cache: &GraphCache,
    params: &mut ParamStore,
    d_rows: &BTreeMap<NodeId, Vec<f64>>,
) -> Result<()> {
    let c = emb.width;
    let layers = emb.layers;
    // Through the final L2 normalization: dx = (dy − y (y·dy)) / ‖x‖.
    let mut d_act: BTreeMap<NodeId, Vec<f64>> = BTreeMap::new();
    for (id, dy) in d_rows {
        if layers == 0 {
            continue; // identity case: no parameters were involved
        }
        let y = &emb.rows[id];
        let norm = cache.norms[id];
        let dot: f64 = y.iter().zip(dy).map(|(a, b)| a * b).sum();
        let dx: Vec<f64> = y
            .iter()
            .zip(dy)
            .map(|(&yv, &dyv)| (dyv - yv * dot) / norm)
            .collect();
        d_act.insert(*id, dx);
    }
    if layers == 0 {
        return Ok(());
    }

    let mut d_root = vec![0.0f64; c];
    for l in (0..layers).rev() {
        let w = params.get(&format!("graph.l{l}.w"))?.clone();
        let prev = &cache.acts[l];
        let cur = &cache.acts[l + 1];
        let mut dw = vec![0.0f64; 2 * c * c];
        let mut db = vec![0.0f64; c];
        let mut d_prev: BTreeMap<NodeId, Vec<f64>> = BTreeMap::new();
        for node in h.nodes() {
            if node.parent.is_none() {
                continue;
            }
            let Some(dh) = d_act.get(&node.id) else { continue };
            let hv = &cur[&node.id];
            // through tanh
            let da: Vec<f64> = dh.iter().zip(hv).map(|(&g, &y)| g * (1.0 - y * y)).collect();
            for (j, &v) in da.iter().enumerate() {
                db[j] += v;
            }
            let neigh = neighbor_ids(h, node);
            let mut mean = vec![0.0f64; c];
            for n in &neigh {
                let src: &[f64] = match n {
                    None => params.get("graph.root")?.data(),
                    Some(id) => &prev[id],
                };
                for (m, &v) in mean.iter_mut().zip(src) {
                    *m += v;
                }
            }
            let inv = 1.0 / neigh.len() as f64;
            for m in &mut mean {
                *m *= inv;
            }
            let own = &prev[&node.id];
            // dW[j][k] += z[j]·da[k]; dz[j] = Σ_k W[j][k]·da[k]
            let mut dz = vec![0.0f64; 2 * c];
            for (j, &zj) in own.iter().chain(mean.iter()).enumerate() {
                let wrow = &w.data()[j * c..(j + 1) * c];
                let dwrow = &mut dw[j * c..(j + 1) * c];
                let mut acc = 0.0;
                for ((dwv, &wv), &dav) in dwrow.iter_mut().zip(wrow).zip(&da) {
                    *dwv += zj * dav;
                    acc += wv * dav;
                }
                dz[j] = acc;
            }
            // own half
            let entry = d_prev.entry(node.id).or_insert_with(|| vec![0.0; c]);
            for (e, &v) in entry.iter_mut().zip(&dz[..c]) {
                *e += v;
            }
            // mean half distributes to neighbors
            for n in &neigh {
                match n {
                    None => {
                        for (e, &v) in d_root.iter_mut().zip(&dz[c..]) {
                            *e += v * inv;
                        }
                    }
                    Some(id) => {
                        let entry = d_prev.entry(*id).or_insert_with(|| vec![0.0; c]);
                        for (e, &v) in entry.iter_mut().zip(&dz[c..]) {
                            *e += v * inv;
                        }
                    }
                }
            }
        }
        params.add_grad(
            &format!("graph.l{l}.w"),
            &crate::numcore::Tensor::new(vec![2 * c, c], dw)?,
        )?;
        params.add_grad(&format!("graph.l{l}.b"), &crate::numcore::Tensor::new(vec![c], db)?)?;
        d_act = d_prev;
    }
    params.add_grad("graph.root", &crate::numcore::Tensor::new(vec![c], d_root)?)?;
    Ok(())
}

#[cfg(test)]
pub(crate) mod tests_support {
    use super::*;

    /// root(0) → ground(1), building(2), object(3); soil(4)<ground,
    /// house(5)<building, car(6)<object.
    pub(crate) fn tiny_hierarchy() -> LabelHierarchy {
        LabelHierarchy::from_rows(vec![
            (0, None, 0, "everything".into()),
            (1, Some(0), 1, "ground".into()),
            (2, Some(0), 1, "building".into()),
            (3, Some(0), 1, "object".into()),
            (4, Some(1), 2, "soil".into()),
            (5, Some(2), 2, "house".into()),
            (6, Some(3), 2, "car".into()),
        ])
        .unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::tests_support::tiny_hierarchy;
    use super::*;
    use rand::Rng;

    #[test]
    fn five_base_classes_fixture() {
        let h = LabelHierarchy::from_rows(vec![
            (0, None, 0, "everything".into()),
            (1, Some(0), 1, "ground".into()),
            (2, Some(0), 1, "vegetation".into()),
            (3, Some(0), 1, "building".into()),
            (4, Some(0), 1, "water".into()),
            (5, Some(0), 1, "object".into()),
        ])
        .unwrap();
        assert_eq!(h.depth(), 1);
        assert_eq!(h.base_ids().len(), 5);
    }

    #[test]
    fn single_node_hierarchy_is_valid() {
        let h = LabelHierarchy::from_rows(vec![(0, None, 0, "everything".into())]).unwrap();
        assert_eq!(h.depth(), 0);
        assert!(h.label_ids().is_empty());
    }

    #[test]
    fn cycle_is_rejected() {
        let err = LabelHierarchy::from_rows(vec![
            (0, None, 0, "root".into()),
            (1, Some(2), 1, "a".into()),
            (2, Some(1), 1, "b".into()),
        ])
        .unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn duplicate_multiple_roots_and_orphans_rejected() {
        assert!(LabelHierarchy::from_rows(vec![
            (0, None, 0, "r".into()),
            (0, Some(0), 1, "dup".into()),
        ])
        .is_err());
        assert!(LabelHierarchy::from_rows(vec![
            (0, None, 0, "r1".into()),
            (1, None, 0, "r2".into()),
        ])
        .is_err());
        assert!(LabelHierarchy::from_rows(vec![
            (0, None, 0, "r".into()),
            (1, Some(9), 1, "orphan".into()),
        ])
        .is_err());
    }

    #[test]
    fn level_mismatch_names_the_node() {
        let err = LabelHierarchy::from_rows(vec![
            (0, None, 0, "r".into()),
            (1, Some(0), 2, "wrong".into()),
        ])
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("node 1"), "{msg}");
    }

    #[test]
    fn hierarchy_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.tsv");
        let h = tiny_hierarchy();
        h.save(&path).unwrap();
        let back = LabelHierarchy::load(&path).unwrap();
        assert_eq!(back, h);
    }

    #[test]
    fn siblings_basic_cases() {
        let h = LabelHierarchy::from_rows(vec![
            (0, None, 0, "r".into()),
            (1, Some(0), 1, "p".into()),
            (2, Some(1), 2, "a".into()),
            (3, Some(1), 2, "b".into()),
            (4, Some(1), 2, "c".into()),
            (5, Some(0), 1, "only".into()),
        ])
        .unwrap();
        assert_eq!(h.siblings(3).unwrap(), vec![2, 4]);
        // `only` shares the root parent with `p`
        assert_eq!(h.siblings(5).unwrap(), vec![1]);
        assert!(matches!(h.siblings(0), Err(Error::Domain(_))));
        // only child
        let h2 = LabelHierarchy::from_rows(vec![
            (0, None, 0, "r".into()),
            (1, Some(0), 1, "lonely".into()),
        ])
        .unwrap();
        assert!(h2.siblings(1).unwrap().is_empty());
    }

    fn random_tree(rng: &mut ChaCha8Rng, n: usize) -> LabelHierarchy {
        let mut rows = vec![(0u16, None, 0u8, "root".to_string())];
        let mut levels = vec![0u8];
        for i in 1..n {
            let parent = rng.gen_range(0..i) as u16;
            let level = levels[parent as usize] + 1;
            levels.push(level);
            rows.push((i as u16, Some(parent), level, format!("n{i}")));
        }
        LabelHierarchy::from_rows(rows).unwrap()
    }

    #[test]
    fn sibling_count_property_on_random_trees() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..50 {
            let n = rng.gen_range(2..40);
            let h = random_tree(&mut rng, n);
            for node in h.nodes() {
                if let Some(p) = node.parent {
                    let s = h.siblings(node.id).unwrap();
                    assert_eq!(s.len() + 1, h.node(p).unwrap().children.len());
                }
            }
        }
    }

    #[test]
    fn merge_to_base_walks_to_level_one_and_is_idempotent() {
        let h = LabelHierarchy::from_rows(vec![
            (0, None, 0, "r".into()),
            (1, Some(0), 1, "object".into()),
            (2, Some(1), 2, "vehicle".into()),
            (3, Some(2), 3, "car".into()),
        ])
        .unwrap();
        assert_eq!(h.merge_to_base(3).unwrap(), 1);
        assert_eq!(h.merge_to_base(2).unwrap(), 1);
        assert_eq!(h.merge_to_base(1).unwrap(), 1);
        let m = h.merge_to_base(3).unwrap();
        assert_eq!(h.merge_to_base(m).unwrap(), m);
        assert!(matches!(h.merge_to_base(0), Err(Error::Domain(_))));
    }

    #[test]
    fn subtree_labels_share_a_base() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = random_tree(&mut rng, 30);
        for node in h.nodes() {
            if node.parent.is_some() && node.level >= 2 {
                let base = h.merge_to_base(node.id).unwrap();
                let parent_base = h.merge_to_base(node.parent.unwrap()).unwrap();
                assert_eq!(base, parent_base);
            }
        }
    }

    #[test]
    fn hashed_provider_is_deterministic_and_unit_norm() {
        let p = EmbeddingProvider::Hashed { seed: 5, width: 16 };
        let a = p.embed("car").unwrap();
        let b = p.embed("car").unwrap();
        assert_eq!(a, b);
        let n: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-9);
        let c = p.embed("truck").unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn same_text_different_nodes_same_embedding() {
        let h = LabelHierarchy::from_rows(vec![
            (0, None, 0, "r".into()),
            (1, Some(0), 1, "car".into()),
            (2, Some(0), 1, "object".into()),
            (3, Some(2), 2, "car".into()),
        ])
        .unwrap();
        let p = EmbeddingProvider::Hashed { seed: 1, width: 8 };
        let e = embed_labels(&h, &p).unwrap();
        assert_eq!(e.rows[&1], e.rows[&3]);
        assert!(!e.rows.contains_key(&0));
    }

    #[test]
    fn csem_roundtrip_through_file_provider() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.csem");
        let p = EmbeddingProvider::Hashed { seed: 2, width: 4 };
        let mut table = BTreeMap::new();
        for text in ["ground", "water", "car"] {
            // f32-representable values so the round-trip is exact
            let v: Vec<f64> = p.embed(text).unwrap().iter().map(|&x| x as f32 as f64).collect();
            table.insert(text.to_string(), v);
        }
        write_csem(&path, 4, &table).unwrap();
        let file = EmbeddingProvider::from_csem(&path).unwrap();
        assert_eq!(file.width(), 4);
        for (text, v) in &table {
            assert_eq!(&file.embed(text).unwrap(), v);
        }
        assert!(matches!(file.embed("unknown"), Err(Error::Lookup(_))));
    }

    fn graph_setup(
        h: &LabelHierarchy,
        c: usize,
        layers: usize,
        seed: u64,
    ) -> (TextEmbeddings, ParamStore) {
        let provider = EmbeddingProvider::Hashed { seed, width: c };
        let text = embed_labels(h, &provider).unwrap();
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
        init_graph_params(&mut params, c, layers, &mut rng).unwrap();
        (text, params)
    }

    #[test]
    fn zero_layers_is_identity() {
        let h = tiny_hierarchy();
        let (text, params) = graph_setup(&h, 8, 2, 1);
        let (emb, _) = graph_encode(&h, &text, &params, 0).unwrap();
        assert_eq!(emb.rows, text.rows);
    }

    #[test]
    fn rows_are_unit_norm_after_encoding() {
        let h = tiny_hierarchy();
        let (text, params) = graph_setup(&h, 8, 2, 2);
        let (emb, _) = graph_encode(&h, &text, &params, 2).unwrap();
        for row in emb.rows.values() {
            let n: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn same_text_different_parent_distinguished_by_graph() {
        let h = LabelHierarchy::from_rows(vec![
            (0, None, 0, "r".into()),
            (1, Some(0), 1, "ground".into()),
            (2, Some(0), 1, "object".into()),
            (3, Some(1), 2, "flat".into()),
            (4, Some(2), 2, "flat".into()),
        ])
        .unwrap();
        let (text, params) = graph_setup(&h, 8, 1, 3);
        assert_eq!(text.rows[&3], text.rows[&4]);
        let (emb, _) = graph_encode(&h, &text, &params, 1).unwrap();
        let d: f64 = emb.rows[&3]
            .iter()
            .zip(&emb.rows[&4])
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        assert!(d > 1e-6, "graph encoder failed to disambiguate, d={d}");
    }

    #[test]
    fn graph_encoder_gradients_pass_finite_difference() {
        use crate::numcore::{central_diff_grad, max_rel_err};
        let h = tiny_hierarchy();
        let c = 4;
        let layers = 2;
        for seed in 0..10u64 {
            let (text, mut params) = graph_setup(&h, c, layers, seed);
            let names: Vec<String> = graph_param_names(layers);
            // fixed random mixing weights make the scalar sensitive to all rows
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x55);
            let mix: BTreeMap<NodeId, Vec<f64>> = h
                .label_ids()
                .iter()
                .map(|&id| (id, (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect()))
                .collect();

            let value = |params: &ParamStore| -> crate::error::Result<f64> {
                let (emb, _) = graph_encode(&h, &text, params, layers)?;
                Ok(mix
                    .iter()
                    .map(|(id, m)| {
                        emb.rows[id]
                            .iter()
                            .zip(m)
                            .map(|(a, b)| a * b)
                            .sum::<f64>()
                    })
                    .sum())
            };

            // analytic gradient
            params.zero_grads();
            let (emb, cache) = graph_encode(&h, &text, &params, layers).unwrap();
            graph_encode_backward(&h, &emb, &cache, &mut params, &mix).unwrap();
            let analytic = params.flat_grads_for(&names).unwrap();

            // numeric gradient over the flattened parameter vector
            let flat = params.flat_values_for(&names).unwrap();
            let mut probe = params.clone();
            let numeric = central_diff_grad(
                |x| {
                    probe.set_flat_values_for(&names, x).unwrap();
                    value(&probe)
                },
                &flat,
                1e-5,
            )
            .unwrap();
            let err = max_rel_err(&analytic, &numeric);
            assert!(err < 1e-4, "seed {seed}: graph gradcheck err={err}");
        }
    }

    #[test]
    fn insert_leaf_grows_tree_and_preserves_existing_embeddings() {
        let h = tiny_hierarchy();
        let provider = EmbeddingProvider::Hashed { seed: 4, width: 8 };
        let before = embed_labels(&h, &provider).unwrap();
        // insert under an existing leaf: that leaf becomes internal
        let (h2, new_id) = h.insert_leaf(6, "taxi").unwrap();
        assert_eq!(h2.node(new_id).unwrap().level, 3);
        assert_eq!(h2.depth(), 3);
        assert!(h2.node(6).unwrap().children.contains(&new_id));
        for node in h.nodes() {
            assert_eq!(h.node(node.id).unwrap().text, h2.node(node.id).unwrap().text);
        }
        let after = embed_labels(&h2, &provider).unwrap();
        for (id, row) in &before.rows {
            assert_eq!(row, &after.rows[id]);
        }
        assert!(matches!(h.insert_leaf(999, "x"), Err(Error::Validation(_))));
    }

    #[test]
    fn message_passing_locality_is_exact() {
        // After inserting a leaf, nodes farther than `layers` hops from the
        // insertion keep bitwise-identical embeddings.
        let h = LabelHierarchy::from_rows(vec![
            (0, None, 0, "r".into()),
            (1, Some(0), 1, "a".into()),
            (2, Some(1), 2, "b".into()),
            (3, Some(2), 3, "c".into()),
            (4, Some(3), 4, "d".into()),
            (5, Some(0), 1, "far".into()),
            (6, Some(5), 2, "farther".into()),
        ])
        .unwrap();
        let c = 8;
        let layers = 2;
        let (text, params) = graph_setup(&h, c, layers, 7);
        let (before, _) = graph_encode(&h, &text, &params, layers).unwrap();

        let (h2, new_id) = h.insert_leaf(4, "new".into()).unwrap();
        let provider = EmbeddingProvider::Hashed { seed: 7, width: c };
        let text2 = embed_labels(&h2, &provider).unwrap();
        let (after, _) = graph_encode(&h2, &text2, &params, layers).unwrap();

        for node in h.nodes() {
            if node.parent.is_none() {
                continue;
            }
            let dist = h2.distance(node.id, new_id).unwrap();
            if dist > layers as u32 {
                assert_eq!(
                    before.rows[&node.id], after.rows[&node.id],
                    "node {} at distance {dist} changed",
                    node.id
                );
            }
        }
        // the parent of the insertion (distance 1 ≤ L) must change
        assert_ne!(before.rows[&4], after.rows[&4]);
    }

    #[test]
    fn active_set_follows_domain_levels() {
        let mut h = tiny_hierarchy();
        h.apply_domain_levels(0, &[1]);
        h.apply_domain_levels(1, &[2]);
        assert_eq!(h.active_set(0), vec![1, 2, 3]);
        assert_eq!(h.active_set(1), vec![4, 5, 6]);
    }
}
