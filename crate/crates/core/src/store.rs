//! Sorted flat-file node and edge tables with forward and reverse adjacency
//! offsets.
//!
//! Node rows are sorted by alias and fixed width. Edge rows are sorted by
//! `(a, b)`; the forward index maps a node row to its outgoing range and the
//! reverse index is a permutation of edge positions sorted by `(b, a)` with
//! its own offsets. All offsets are relative, so the files can be mapped
//! anywhere. The byte layout is described in `docs/store-layout.md`.

use std::fmt::Write as _;
use std::fs;
use std::io::{self, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian as LE};
use rand::Rng;
use thiserror::Error;

use crate::cluster::ClusterAlias;
use crate::edges::{EdgeRecord, EDGE_CSV_HEADER};
use crate::labels::Category;
use crate::nodes::{NodeRecord, NODE_CSV_HEADER};

pub const STORE_VERSION: u32 = 1;
pub const NODE_ROW_WIDTH: usize = 161;
pub const EDGE_ROW_WIDTH: usize = 64;
const NODES_MAGIC: &[u8; 8] = b"FGNODES\0";
const EDGES_MAGIC: &[u8; 8] = b"FGEDGES\0";
const INDEX_MAGIC: &[u8; 8] = b"FGINDEX\0";
const ABSENT: u64 = u64::MAX;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{table} header does not match the schema: {found:?}")]
    SchemaMismatch { table: &'static str, found: String },
    #[error("duplicate edge {0}->{1}")]
    DuplicateEdgeKey(ClusterAlias, ClusterAlias),
    #[error("duplicate node {0}")]
    DuplicateNodeKey(ClusterAlias),
    #[error("edge {a}->{b} references a node missing from the node table")]
    DanglingEdge { a: ClusterAlias, b: ClusterAlias },
    #[error("unknown alias {0}")]
    UnknownAlias(ClusterAlias),
    #[error("{table} line {line}: {reason}")]
    BadRow {
        table: &'static str,
        line: usize,
        reason: String,
    },
    #[error("corrupt store file {file}: {reason}")]
    Corrupt { file: String, reason: String },
    #[error("i/o failure: {0}")]
    IoFailure(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct StoredNode {
    pub alias: ClusterAlias,
    pub label: Option<Category>,
    pub degree: u64,
    pub degree_in: u64,
    pub degree_out: u64,
    pub total_transaction_in: u64,
    pub total_transaction_out: u64,
    pub first_transaction_in: Option<u64>,
    pub last_transaction_in: Option<u64>,
    pub first_transaction_out: Option<u64>,
    pub last_transaction_out: Option<u64>,
    pub min_sent: f64,
    pub max_sent: f64,
    pub total_sent: f64,
    pub min_received: f64,
    pub max_received: f64,
    pub total_received: f64,
    pub cluster_size: u64,
    pub cluster_num_edges: u64,
    pub cluster_num_cc: u64,
    pub cluster_num_nodes_in_cc: u64,
}

impl From<&NodeRecord> for StoredNode {
    fn from(n: &NodeRecord) -> Self {
        StoredNode {
            alias: n.alias,
            label: n.label,
            degree: n.degree,
            degree_in: n.degree_in,
            degree_out: n.degree_out,
            total_transaction_in: n.total_transaction_in,
            total_transaction_out: n.total_transaction_out,
            first_transaction_in: n.first_transaction_in,
            last_transaction_in: n.last_transaction_in,
            first_transaction_out: n.first_transaction_out,
            last_transaction_out: n.last_transaction_out,
            min_sent: n.min_sent.to_f64(),
            max_sent: n.max_sent.to_f64(),
            total_sent: n.total_sent.to_f64(),
            min_received: n.min_received.to_f64(),
            max_received: n.max_received.to_f64(),
            total_received: n.total_received.to_f64(),
            cluster_size: n.cluster_size,
            cluster_num_edges: n.cluster_num_edges,
            cluster_num_cc: n.cluster_num_cc,
            cluster_num_nodes_in_cc: n.cluster_num_nodes_in_cc,
        }
    }
}

fn opt_cell(v: Option<u64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl StoredNode {
    fn counts(&self) -> [u64; 5] {
        [
            self.degree,
            self.degree_in,
            self.degree_out,
            self.total_transaction_in,
            self.total_transaction_out,
        ]
    }

    fn temporal(&self) -> [Option<u64>; 4] {
        [
            self.first_transaction_in,
            self.last_transaction_in,
            self.first_transaction_out,
            self.last_transaction_out,
        ]
    }

    fn values(&self) -> [f64; 6] {
        [
            self.min_sent,
            self.max_sent,
            self.total_sent,
            self.min_received,
            self.max_received,
            self.total_received,
        ]
    }

    fn cluster(&self) -> [u64; 4] {
        [
            self.cluster_size,
            self.cluster_num_edges,
            self.cluster_num_cc,
            self.cluster_num_nodes_in_cc,
        ]
    }

    pub fn csv_row(&self) -> String {
        let mut s = format!("{},{}", self.alias, self.label.map(|c| c.as_str()).unwrap_or(""));
        for c in self.counts() {
            write!(s, ",{c}").unwrap();
        }
        for t in self.temporal() {
            write!(s, ",{}", opt_cell(t)).unwrap();
        }
        for v in self.values() {
            write!(s, ",{v}").unwrap();
        }
        for c in self.cluster() {
            write!(s, ",{c}").unwrap();
        }
        s
    }

    fn from_csv(row: &csv::StringRecord) -> Result<Self, String> {
        let int = |i: usize| row[i].parse::<u64>().map_err(|_| format!("column {i}: {:?}", &row[i]));
        let opt = |i: usize| {
            if row[i].is_empty() {
                Ok(None)
            } else {
                int(i).map(Some)
            }
        };
        let real = |i: usize| row[i].parse::<f64>().map_err(|_| format!("column {i}: {:?}", &row[i]));
        let label = match &row[1] {
            "" => None,
            s => Some(s.parse::<Category>().map_err(|c| format!("unknown label {c:?}"))?),
        };
        Ok(StoredNode {
            alias: ClusterAlias(int(0)?),
            label,
            degree: int(2)?,
            degree_in: int(3)?,
            degree_out: int(4)?,
            total_transaction_in: int(5)?,
            total_transaction_out: int(6)?,
            first_transaction_in: opt(7)?,
            last_transaction_in: opt(8)?,
            first_transaction_out: opt(9)?,
            last_transaction_out: opt(10)?,
            min_sent: real(11)?,
            max_sent: real(12)?,
            total_sent: real(13)?,
            min_received: real(14)?,
            max_received: real(15)?,
            total_received: real(16)?,
            cluster_size: int(17)?,
            cluster_num_edges: int(18)?,
            cluster_num_cc: int(19)?,
            cluster_num_nodes_in_cc: int(20)?,
        })
    }

    fn encode(&self, out: &mut [u8]) {
        LE::write_u64(&mut out[0..8], self.alias.0);
        out[8] = self.label.map_or(0, Category::code);
        let mut at = 9;
        let mut put = |v: u64| {
            LE::write_u64(&mut out[at..at + 8], v);
            at += 8;
        };
        self.counts().into_iter().for_each(&mut put);
        self.temporal().into_iter().for_each(|t| put(t.unwrap_or(ABSENT)));
        self.values().into_iter().for_each(|v| put(v.to_bits()));
        self.cluster().into_iter().for_each(&mut put);
        debug_assert_eq!(at, NODE_ROW_WIDTH);
    }

    fn decode(row: &[u8]) -> Result<Self, String> {
        let label = Category::from_code(row[8]).ok_or_else(|| format!("label code {}", row[8]))?;
        let w: Vec<u64> = row[9..].chunks_exact(8).map(LE::read_u64).collect();
        let t = |v: u64| (v != ABSENT).then_some(v);
        let f = f64::from_bits;
        Ok(StoredNode {
            alias: ClusterAlias(LE::read_u64(&row[0..8])),
            label,
            degree: w[0],
            degree_in: w[1],
            degree_out: w[2],
            total_transaction_in: w[3],
            total_transaction_out: w[4],
            first_transaction_in: t(w[5]),
            last_transaction_in: t(w[6]),
            first_transaction_out: t(w[7]),
            last_transaction_out: t(w[8]),
            min_sent: f(w[9]),
            max_sent: f(w[10]),
            total_sent: f(w[11]),
            min_received: f(w[12]),
            max_received: f(w[13]),
            total_received: f(w[14]),
            cluster_size: w[15],
            cluster_num_edges: w[16],
            cluster_num_cc: w[17],
            cluster_num_nodes_in_cc: w[18],
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StoredEdge {
    pub a: ClusterAlias,
    pub b: ClusterAlias,
    pub reveal: u64,
    pub last_seen: u64,
    pub total: u64,
    pub min_sent: f64,
    pub max_sent: f64,
    pub total_sent: f64,
}

impl From<&EdgeRecord> for StoredEdge {
    fn from(e: &EdgeRecord) -> Self {
        StoredEdge {
            a: e.a,
            b: e.b,
            reveal: e.reveal,
            last_seen: e.last_seen,
            total: e.total,
            min_sent: e.min_sent.to_f64(),
            max_sent: e.max_sent.to_f64(),
            total_sent: e.total_sent.to_f64(),
        }
    }
}

impl StoredEdge {
    pub fn key(&self) -> (ClusterAlias, ClusterAlias) {
        (self.a, self.b)
    }

    /// The endpoint that is not `alias`.
    pub fn other(&self, alias: ClusterAlias) -> ClusterAlias {
        if self.a == alias {
            self.b
        } else {
            self.a
        }
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.a, self.b, self.reveal, self.last_seen, self.total, self.min_sent, self.max_sent, self.total_sent
        )
    }

    fn from_csv(row: &csv::StringRecord) -> Result<Self, String> {
        let int = |i: usize| row[i].parse::<u64>().map_err(|_| format!("column {i}: {:?}", &row[i]));
        let real = |i: usize| row[i].parse::<f64>().map_err(|_| format!("column {i}: {:?}", &row[i]));
        Ok(StoredEdge {
            a: ClusterAlias(int(0)?),
            b: ClusterAlias(int(1)?),
            reveal: int(2)?,
            last_seen: int(3)?,
            total: int(4)?,
            min_sent: real(5)?,
            max_sent: real(6)?,
            total_sent: real(7)?,
        })
    }

    fn encode(&self, out: &mut [u8]) {
        let words = [
            self.a.0,
            self.b.0,
            self.reveal,
            self.last_seen,
            self.total,
            self.min_sent.to_bits(),
            self.max_sent.to_bits(),
            self.total_sent.to_bits(),
        ];
        for (chunk, w) in out.chunks_exact_mut(8).zip(words) {
            LE::write_u64(chunk, w);
        }
    }

    fn decode(row: &[u8]) -> Self {
        let w: Vec<u64> = row.chunks_exact(8).map(LE::read_u64).collect();
        StoredEdge {
            a: ClusterAlias(w[0]),
            b: ClusterAlias(w[1]),
            reveal: w[2],
            last_seen: w[3],
            total: w[4],
            min_sent: f64::from_bits(w[5]),
            max_sent: f64::from_bits(w[6]),
            total_sent: f64::from_bits(w[7]),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct NodeStore {
    rows: Vec<StoredNode>,
}

impl NodeStore {
    pub fn new(mut rows: Vec<StoredNode>) -> Result<Self, StoreError> {
        rows.sort_by_key(|n| n.alias);
        if let Some(w) = rows.windows(2).find(|w| w[0].alias == w[1].alias) {
            return Err(StoreError::DuplicateNodeKey(w[0].alias));
        }
        Ok(NodeStore { rows })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn rows(&self) -> &[StoredNode] {
        &self.rows
    }

    pub fn row_of(&self, alias: ClusterAlias) -> Option<usize> {
        // dense aliases hit directly
        match self.rows.get(alias.0 as usize) {
            Some(n) if n.alias == alias => Some(alias.0 as usize),
            _ => self.rows.binary_search_by_key(&alias, |n| n.alias).ok(),
        }
    }

    pub fn get(&self, alias: ClusterAlias) -> Option<&StoredNode> {
        self.row_of(alias).map(|r| &self.rows[r])
    }

    pub fn set_label(&mut self, alias: ClusterAlias, label: Option<Category>) -> Result<(), StoreError> {
        let r = self.row_of(alias).ok_or(StoreError::UnknownAlias(alias))?;
        self.rows[r].label = label;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Out,
    In,
    Both,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EdgeStore {
    edges: Vec<StoredEdge>,
    /// `fwd[r]..fwd[r + 1]` are the outgoing edges of node row `r`.
    fwd: Vec<u64>,
    /// Edge positions sorted by `(b, a)`.
    rev_perm: Vec<u64>,
    /// `rev[r]..rev[r + 1]` index `rev_perm` for the incoming edges of row `r`.
    rev: Vec<u64>,
}

impl EdgeStore {
    pub fn build(mut edges: Vec<StoredEdge>, nodes: &NodeStore) -> Result<Self, StoreError> {
        edges.sort_by_key(StoredEdge::key);
        if let Some(w) = edges.windows(2).find(|w| w[0].key() == w[1].key()) {
            return Err(StoreError::DuplicateEdgeKey(w[0].a, w[0].b));
        }
        let n = nodes.len();
        let mut rows = Vec::with_capacity(edges.len());
        for e in &edges {
            match (nodes.row_of(e.a), nodes.row_of(e.b)) {
                (Some(ra), Some(rb)) => rows.push((ra, rb)),
                _ => return Err(StoreError::DanglingEdge { a: e.a, b: e.b }),
            }
        }
        let mut fwd = vec![0u64; n + 1];
        let mut rev = vec![0u64; n + 1];
        for &(ra, rb) in &rows {
            fwd[ra + 1] += 1;
            rev[rb + 1] += 1;
        }
        for r in 0..n {
            fwd[r + 1] += fwd[r];
            rev[r + 1] += rev[r];
        }
        let mut rev_perm: Vec<u64> = (0..edges.len() as u64).collect();
        rev_perm.sort_by_key(|&i| (edges[i as usize].b, edges[i as usize].a));
        Ok(EdgeStore {
            edges,
            fwd,
            rev_perm,
            rev,
        })
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    pub fn edges(&self) -> &[StoredEdge] {
        &self.edges
    }

    fn out_range(&self, row: usize) -> std::ops::Range<usize> {
        self.fwd[row] as usize..self.fwd[row + 1] as usize
    }

    fn in_range(&self, row: usize) -> std::ops::Range<usize> {
        self.rev[row] as usize..self.rev[row + 1] as usize
    }
}

/// Node and edge tables sealed together.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GraphStore {
    pub nodes: NodeStore,
    pub edges: EdgeStore,
}

impl GraphStore {
    pub fn new(nodes: Vec<StoredNode>, edges: Vec<StoredEdge>) -> Result<Self, StoreError> {
        let nodes = NodeStore::new(nodes)?;
        let edges = EdgeStore::build(edges, &nodes)?;
        Ok(GraphStore { nodes, edges })
    }

    pub fn from_records(nodes: &[NodeRecord], edges: &[EdgeRecord]) -> Result<Self, StoreError> {
        GraphStore::new(
            nodes.iter().map(Into::into).collect(),
            edges.iter().map(Into::into).collect(),
        )
    }

    /// `(nodes, edges)` row counts.
    pub fn counts(&self) -> (usize, usize) {
        (self.nodes.len(), self.edges.len())
    }

    fn row(&self, alias: ClusterAlias) -> Result<usize, StoreError> {
        self.nodes.row_of(alias).ok_or(StoreError::UnknownAlias(alias))
    }

    pub fn degree(&self, alias: ClusterAlias, dir: Direction) -> Result<usize, StoreError> {
        let r = self.row(alias)?;
        let (o, i) = (self.edges.out_range(r).len(), self.edges.in_range(r).len());
        Ok(match dir {
            Direction::Out => o,
            Direction::In => i,
            Direction::Both => o + i,
        })
    }

    /// Incident edges: outgoing first, then incoming, each in key order.
    pub fn adjacency(
        &self,
        alias: ClusterAlias,
        dir: Direction,
    ) -> Result<impl Iterator<Item = &StoredEdge> + '_, StoreError> {
        let r = self.row(alias)?;
        let out = match dir {
            Direction::Out | Direction::Both => self.edges.out_range(r),
            Direction::In => 0..0,
        };
        let inc = match dir {
            Direction::In | Direction::Both => self.edges.in_range(r),
            Direction::Out => 0..0,
        };
        let e = &self.edges;
        Ok(e.edges[out]
            .iter()
            .chain(e.rev_perm[inc].iter().map(move |&i| &e.edges[i as usize])))
    }

    /// The `i`-th record of `adjacency(alias, Both)`, by row.
    fn incident(&self, row: usize, i: usize) -> &StoredEdge {
        let out = self.edges.out_range(row);
        if i < out.len() {
            &self.edges.edges[out.start + i]
        } else {
            let j = self.edges.in_range(row).start + i - out.len();
            &self.edges.edges[self.edges.rev_perm[j] as usize]
        }
    }

    /// `k` incident records drawn uniformly without replacement, in
    /// adjacency order; every record when the degree is at most `k`.
    pub fn random_edge_sample<R: Rng + ?Sized>(
        &self,
        alias: ClusterAlias,
        k: usize,
        rng: &mut R,
    ) -> Result<Vec<&StoredEdge>, StoreError> {
        let r = self.row(alias)?;
        let d = self.edges.out_range(r).len() + self.edges.in_range(r).len();
        if d <= k {
            return Ok((0..d).map(|i| self.incident(r, i)).collect());
        }
        let mut picks = rand::seq::index::sample(rng, d, k).into_vec();
        picks.sort_unstable();
        Ok(picks.into_iter().map(|i| self.incident(r, i)).collect())
    }

    pub fn import_csv(nodes: impl Read, edges: impl Read) -> Result<Self, StoreError> {
        GraphStore::new(read_nodes_csv(nodes)?, read_edges_csv(edges)?)
    }

    pub fn write_nodes_csv(&self, w: &mut impl Write) -> io::Result<()> {
        writeln!(w, "{NODE_CSV_HEADER}")?;
        for n in self.nodes.rows() {
            writeln!(w, "{}", n.csv_row())?;
        }
        Ok(())
    }

    pub fn write_edges_csv(&self, w: &mut impl Write) -> io::Result<()> {
        writeln!(w, "{EDGE_CSV_HEADER}")?;
        for e in self.edges.edges() {
            writeln!(w, "{}", e.csv_row())?;
        }
        Ok(())
    }

    /// `CREATE TABLE` for both tables followed by batched `INSERT`s.
    pub fn write_sql(&self, w: &mut impl Write) -> io::Result<()> {
        const BATCH: usize = 1000;
        writeln!(w, "{}", create_table("nodes", NODE_CSV_HEADER, node_column_type))?;
        writeln!(w, "{}", create_table("edges", EDGE_CSV_HEADER, edge_column_type))?;
        for chunk in self.nodes.rows().chunks(BATCH) {
            write_insert(
                w,
                "nodes",
                NODE_CSV_HEADER,
                chunk.iter().map(|n| sql_values(&n.csv_row(), 1)),
            )?;
        }
        for chunk in self.edges.edges().chunks(BATCH) {
            write_insert(
                w,
                "edges",
                EDGE_CSV_HEADER,
                chunk.iter().map(|e| sql_values(&e.csv_row(), usize::MAX)),
            )?;
        }
        Ok(())
    }

    pub fn export(&self, dir: &Path, format: ExportFormat) -> Result<(), StoreError> {
        fs::create_dir_all(dir)?;
        match format {
            ExportFormat::Csv => {
                write_file(&dir.join("nodes.csv"), |w| self.write_nodes_csv(w))?;
                write_file(&dir.join("edges.csv"), |w| self.write_edges_csv(w))?;
            }
            ExportFormat::SqlText => write_file(&dir.join("graph.sql"), |w| self.write_sql(w))?,
            ExportFormat::Binary => self.write_binary(dir)?,
        }
        Ok(())
    }

    /// Writes `nodes.bin`, `edges.bin` and `edges.idx`.
    pub fn write_binary(&self, dir: &Path) -> Result<(), StoreError> {
        fs::create_dir_all(dir)?;
        write_file(&dir.join("nodes.bin"), |w| {
            write_preamble(w, NODES_MAGIC, NODE_ROW_WIDTH, self.nodes.len())?;
            let mut row = [0u8; NODE_ROW_WIDTH];
            for n in self.nodes.rows() {
                n.encode(&mut row);
                w.write_all(&row)?;
            }
            Ok(())
        })?;
        write_file(&dir.join("edges.bin"), |w| {
            write_preamble(w, EDGES_MAGIC, EDGE_ROW_WIDTH, self.edges.len())?;
            let mut row = [0u8; EDGE_ROW_WIDTH];
            for e in self.edges.edges() {
                e.encode(&mut row);
                w.write_all(&row)?;
            }
            Ok(())
        })?;
        write_file(&dir.join("edges.idx"), |w| {
            write_preamble(w, INDEX_MAGIC, 8, self.nodes.len())?;
            for v in self.edges.fwd.iter().chain(&self.edges.rev).chain(&self.edges.rev_perm) {
                w.write_all(&v.to_le_bytes())?;
            }
            Ok(())
        })
    }

    pub fn read_binary(dir: &Path) -> Result<Self, StoreError> {
        let nodes_bytes = fs::read(dir.join("nodes.bin"))?;
        let node_rows = read_preamble(&nodes_bytes, "nodes.bin", NODES_MAGIC, NODE_ROW_WIDTH)?;
        let nodes = node_rows
            .chunks_exact(NODE_ROW_WIDTH)
            .map(StoredNode::decode)
            .collect::<Result<Vec<_>, _>>()
            .map_err(|reason| StoreError::Corrupt {
                file: "nodes.bin".into(),
                reason,
            })?;
        let edges_bytes = fs::read(dir.join("edges.bin"))?;
        let edge_rows = read_preamble(&edges_bytes, "edges.bin", EDGES_MAGIC, EDGE_ROW_WIDTH)?;
        let edges: Vec<StoredEdge> = edge_rows.chunks_exact(EDGE_ROW_WIDTH).map(StoredEdge::decode).collect();
        let idx_bytes = fs::read(dir.join("edges.idx"))?;
        let idx = read_preamble(&idx_bytes, "edges.idx", INDEX_MAGIC, 8)?;
        let words: Vec<u64> = idx.chunks_exact(8).map(LE::read_u64).collect();
        let n = nodes.len();
        if words.len() != 2 * (n + 1) + edges.len() {
            return Err(StoreError::Corrupt {
                file: "edges.idx".into(),
                reason: format!("{} words for {} nodes and {} edges", words.len(), n, edges.len()),
            });
        }
        let store = GraphStore {
            nodes: NodeStore { rows: nodes },
            edges: EdgeStore {
                edges,
                fwd: words[..=n].to_vec(),
                rev: words[n + 1..2 * (n + 1)].to_vec(),
                rev_perm: words[2 * (n + 1)..].to_vec(),
            },
        };
        // the index is derivable; rebuilding it validates the file
        let rebuilt = GraphStore::new(store.nodes.rows.clone(), store.edges.edges.clone())?;
        if rebuilt != store {
            return Err(StoreError::Corrupt {
                file: "edges.idx".into(),
                reason: "index disagrees with edge table".into(),
            });
        }
        Ok(store)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportFormat {
    Csv,
    SqlText,
    Binary,
}

fn write_file(path: &Path, body: impl FnOnce(&mut BufWriter<fs::File>) -> io::Result<()>) -> Result<(), StoreError> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    body(&mut w)?;
    w.flush()?;
    Ok(())
}

fn write_preamble(w: &mut impl Write, magic: &[u8; 8], width: usize, count: usize) -> io::Result<()> {
    w.write_all(magic)?;
    w.write_all(&STORE_VERSION.to_le_bytes())?;
    w.write_all(&(width as u32).to_le_bytes())?;
    w.write_all(&(count as u64).to_le_bytes())
}

fn read_preamble<'a>(bytes: &'a [u8], file: &str, magic: &[u8; 8], width: usize) -> Result<&'a [u8], StoreError> {
    let corrupt = |reason: String| StoreError::Corrupt {
        file: file.into(),
        reason,
    };
    if bytes.len() < 24 || &bytes[..8] != magic {
        return Err(corrupt("bad magic".into()));
    }
    let version = LE::read_u32(&bytes[8..12]);
    if version != STORE_VERSION {
        return Err(corrupt(format!("version {version}")));
    }
    if LE::read_u32(&bytes[12..16]) as usize != width {
        return Err(corrupt("row width".into()));
    }
    let body = &bytes[24..];
    if !body.len().is_multiple_of(width) {
        return Err(corrupt("truncated row".into()));
    }
    Ok(body)
}

/// Rows of a node table in file order.
pub fn read_nodes_csv(reader: impl Read) -> Result<Vec<StoredNode>, StoreError> {
    read_table(reader, "nodes", NODE_CSV_HEADER, StoredNode::from_csv)
}

/// Rows of an edge table in file order.
pub fn read_edges_csv(reader: impl Read) -> Result<Vec<StoredEdge>, StoreError> {
    read_table(reader, "edges", EDGE_CSV_HEADER, StoredEdge::from_csv)
}

fn read_table<T>(
    reader: impl Read,
    table: &'static str,
    header: &str,
    parse: impl Fn(&csv::StringRecord) -> Result<T, String>,
) -> Result<Vec<T>, StoreError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).from_reader(reader);
    let mut rows = rdr.records();
    let found = match rows.next() {
        Some(r) => r
            .map_err(|e| StoreError::BadRow {
                table,
                line: 1,
                reason: e.to_string(),
            })?
            .iter()
            .collect::<Vec<_>>()
            .join(","),
        None => String::new(),
    };
    if found != header {
        return Err(StoreError::SchemaMismatch { table, found });
    }
    let mut out = Vec::new();
    for (i, row) in rows.enumerate() {
        let bad = |reason: String| StoreError::BadRow {
            table,
            line: i + 2,
            reason,
        };
        let row = row.map_err(|e| bad(e.to_string()))?;
        out.push(parse(&row).map_err(bad)?);
    }
    Ok(out)
}

fn node_column_type(col: &str) -> &'static str {
    match col {
        "label" => "text",
        c if c.starts_with("min_") || c.starts_with("max_") || c.starts_with("total_s") || c.starts_with("total_r") => {
            "double precision"
        }
        _ => "integer",
    }
}

fn edge_column_type(col: &str) -> &'static str {
    match col {
        "min_sent" | "max_sent" | "total_sent" => "double precision",
        _ => "integer",
    }
}

fn create_table(name: &str, header: &str, ty: fn(&str) -> &'static str) -> String {
    let cols: Vec<String> = header.split(',').map(|c| format!("    {c} {}", ty(c))).collect();
    format!("CREATE TABLE {name} (\n{}\n);", cols.join(",\n"))
}

/// Turns a CSV row into a SQL tuple; `text_col` is quoted, empty cells become NULL.
fn sql_values(csv_row: &str, text_col: usize) -> String {
    let cells: Vec<String> = csv_row
        .split(',')
        .enumerate()
        .map(|(i, c)| match (c.is_empty(), i == text_col) {
            (true, _) => "NULL".to_string(),
            (false, true) => format!("'{}'", c.replace('\'', "''")),
            (false, false) => c.to_string(),
        })
        .collect();
    format!("({})", cells.join(", "))
}

fn write_insert(w: &mut impl Write, table: &str, header: &str, rows: impl Iterator<Item = String>) -> io::Result<()> {
    writeln!(w, "INSERT INTO {table} ({}) VALUES", header.replace(',', ", "))?;
    let rows: Vec<String> = rows.collect();
    writeln!(w, "{};", rows.join(",\n"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn node(a: u64) -> StoredNode {
        StoredNode {
            alias: ClusterAlias(a),
            cluster_size: 1,
            ..Default::default()
        }
    }

    fn edge(a: u64, b: u64) -> StoredEdge {
        StoredEdge {
            a: ClusterAlias(a),
            b: ClusterAlias(b),
            reveal: 1,
            last_seen: 2,
            total: 1,
            min_sent: 0.5,
            max_sent: 0.5,
            total_sent: 0.5,
        }
    }

    fn keys<'a>(it: impl Iterator<Item = &'a StoredEdge>) -> Vec<(u64, u64)> {
        it.map(|e| (e.a.0, e.b.0)).collect()
    }

    // a = 0, b = 1, c = 2
    fn abc() -> GraphStore {
        GraphStore::new(vec![node(0), node(1), node(2), node(3)], vec![edge(0, 1), edge(2, 0)]).unwrap()
    }

    #[test]
    fn adjacency_directions() {
        let g = abc();
        let a = ClusterAlias(0);
        assert_eq!(keys(g.adjacency(a, Direction::Out).unwrap()), vec![(0, 1)]);
        assert_eq!(keys(g.adjacency(a, Direction::In).unwrap()), vec![(2, 0)]);
        assert_eq!(keys(g.adjacency(a, Direction::Both).unwrap()), vec![(0, 1), (2, 0)]);
        assert_eq!(g.adjacency(ClusterAlias(3), Direction::Both).unwrap().count(), 0);
        assert!(matches!(
            g.adjacency(ClusterAlias(9), Direction::Out),
            Err(StoreError::UnknownAlias(_))
        ));
    }

    #[test]
    fn import_counts_and_canonical_order() {
        let nodes = format!(
            "{NODE_CSV_HEADER}\n2,,0,0,0,0,0,,,,,0,0,0,0,0,0,1,0,0,0\n0,exchange,1,0,1,0,1,,,3,3,1.5,1.5,1.5,0,0,0,1,0,0,0\n1,,1,1,0,1,0,3,3,,,0,0,0,1.5,1.5,1.5,1,0,0,0\n"
        );
        let edges = format!("{EDGE_CSV_HEADER}\n0,1,3,3,1,1.5,1.5,1.5\n");
        let g = GraphStore::import_csv(nodes.as_bytes(), edges.as_bytes()).unwrap();
        assert_eq!(g.counts(), (3, 1));
        assert_eq!(g.nodes.get(ClusterAlias(0)).unwrap().label, Some(Category::Exchange));
        let mut out = Vec::new();
        g.write_nodes_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(text.lines().nth(1).unwrap().starts_with("0,exchange,"));
    }

    #[test]
    fn schema_and_key_errors() {
        let bad_header = "b,a,reveal,last_seen,total,min_sent,max_sent,total_sent\n";
        assert!(matches!(
            GraphStore::import_csv(format!("{NODE_CSV_HEADER}\n").as_bytes(), bad_header.as_bytes()),
            Err(StoreError::SchemaMismatch { table: "edges", .. })
        ));
        assert!(matches!(
            GraphStore::new(vec![node(0), node(1)], vec![edge(0, 1), edge(0, 1)]),
            Err(StoreError::DuplicateEdgeKey(..))
        ));
        assert!(matches!(
            GraphStore::new(vec![node(0)], vec![edge(0, 1)]),
            Err(StoreError::DanglingEdge { .. })
        ));
        assert!(matches!(
            GraphStore::new(vec![node(0), node(0)], vec![]),
            Err(StoreError::DuplicateNodeKey(_))
        ));
    }

    #[test]
    fn sparse_aliases() {
        let g = GraphStore::new(vec![node(10), node(500)], vec![edge(500, 10)]).unwrap();
        assert_eq!(g.degree(ClusterAlias(10), Direction::In).unwrap(), 1);
        assert_eq!(g.degree(ClusterAlias(500), Direction::Out).unwrap(), 1);
    }

    #[test]
    fn edge_sampling() {
        let n = 2000u64;
        let nodes = (0..=n).map(node).collect();
        let edges = (1..=n)
            .map(|i| if i % 2 == 0 { edge(0, i) } else { edge(i, 0) })
            .collect();
        let g = GraphStore::new(nodes, edges).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = g.random_edge_sample(ClusterAlias(0), 100, &mut rng).unwrap();
        let mut k = keys(s.iter().copied());
        k.dedup();
        assert_eq!(k.len(), 100);
        let again = g
            .random_edge_sample(ClusterAlias(0), 100, &mut ChaCha8Rng::seed_from_u64(1))
            .unwrap();
        assert_eq!(s, again);
        assert_eq!(g.random_edge_sample(ClusterAlias(5), 10, &mut rng).unwrap().len(), 1);
    }

    #[test]
    fn sql_text() {
        let g = GraphStore::new(vec![node(0)], vec![]).unwrap();
        let mut out = Vec::new();
        g.write_sql(&mut out).unwrap();
        let sql = String::from_utf8(out).unwrap();
        assert_eq!(sql.matches("CREATE TABLE").count(), 2);
        assert_eq!(sql.matches("INSERT INTO").count(), 1);
        assert!(sql.contains("(0, NULL, 0, 0, 0, 0, 0, NULL, NULL, NULL, NULL, 0, 0, 0, 0, 0, 0, 1, 0, 0, 0)"));
        assert!(sql.contains("total_received double precision"));
        assert!(sql.contains("label text"));

        let empty = GraphStore::default();
        let mut out = Vec::new();
        empty.write_sql(&mut out).unwrap();
        assert!(!String::from_utf8(out).unwrap().contains("INSERT"));
        let mut csv = Vec::new();
        empty.write_edges_csv(&mut csv).unwrap();
        assert_eq!(String::from_utf8(csv).unwrap(), format!("{EDGE_CSV_HEADER}\n"));
    }

    #[test]
    fn binary_round_trip() {
        let mut g = abc();
        g.nodes.set_label(ClusterAlias(1), Some(Category::Mixer)).unwrap();
        g.nodes.rows[2].first_transaction_out = Some(7);
        let dir = tempfile::tempdir().unwrap();
        g.write_binary(dir.path()).unwrap();
        assert_eq!(GraphStore::read_binary(dir.path()).unwrap(), g);
        let len = fs::metadata(dir.path().join("nodes.bin")).unwrap().len();
        assert_eq!(len, 24 + 4 * NODE_ROW_WIDTH as u64);
    }

    #[test]
    fn corrupt_binary_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        abc().write_binary(dir.path()).unwrap();
        let p = dir.path().join("edges.idx");
        let mut bytes = fs::read(&p).unwrap();
        let last = bytes.len() - 8;
        bytes[last] ^= 1;
        fs::write(&p, bytes).unwrap();
        assert!(matches!(
            GraphStore::read_binary(dir.path()),
            Err(StoreError::Corrupt { .. })
        ));
    }
}
