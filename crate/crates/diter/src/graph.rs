//! Directed graph in compressed sparse row form, loaded from `src dst`
//! edge lists. Out-edges (children) are what diffusion follows; in/out
//! degrees feed the selection heuristic and the cost-balanced partitioner.

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use flate2::bufread::GzDecoder;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("line {line}: malformed edge `{content}` (expected `src dst`)")]
    Malformed { line: usize, content: String },
    #[error("empty edge list and no node count given")]
    Empty,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Immutable directed graph. Node ids are dense `0..n`; children lists are
/// sorted and duplicate-free (parallel edges collapse), self-loops kept.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    n: usize,
    edge_count: usize,
    offsets: Vec<usize>,
    children: Vec<u32>,
    in_degree: Vec<u32>,
    dangling: Vec<u32>,
}

/// Summary row produced by `stats`.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphStats {
    pub n: usize,
    pub edge_count: usize,
    pub avg_degree: f64,
    pub dangling_count: usize,
    pub dangling_fraction: f64,
}

impl Graph {
    /// Builds a graph over `0..n` from an edge slice. Duplicates collapse,
    /// self-loops stay. Panics if an endpoint is out of range.
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Self {
        assert!(n <= u32::MAX as usize, "node ids must fit in u32");
        let mut pairs: Vec<(u32, u32)> = edges
            .iter()
            .map(|&(s, t)| {
                assert!(s < n && t < n, "edge ({s}, {t}) out of range for n = {n}");
                (s as u32, t as u32)
            })
            .collect();
        pairs.sort_unstable();
        pairs.dedup();

        let mut offsets = vec![0usize; n + 1];
        for &(s, _) in &pairs {
            offsets[s as usize + 1] += 1;
        }
        for i in 0..n {
            offsets[i + 1] += offsets[i];
        }
        let mut in_degree = vec![0u32; n];
        let children: Vec<u32> = pairs
            .iter()
            .map(|&(_, t)| {
                in_degree[t as usize] += 1;
                t
            })
            .collect();
        let dangling = (0..n as u32)
            .filter(|&v| offsets[v as usize + 1] == offsets[v as usize])
            .collect();
        Graph {
            n,
            edge_count: children.len(),
            offsets,
            children,
            in_degree,
            dangling,
        }
    }

    /// Parses a whitespace-separated edge list. Lines starting with `#` and
    /// blank lines are skipped. With `max_node = Some(m)` the result is the
    /// subgraph induced on `0..m`: edges touching a node `>= m` are dropped
    /// and the graph has exactly `m` nodes even if some never appear.
    /// Without `max_node`, `n` is one past the largest id seen.
    pub fn load_edge_list(reader: impl BufRead, max_node: Option<usize>) -> Result<Self, GraphError> {
        let mut edges: Vec<(usize, usize)> = Vec::new();
        let mut seen_max = 0usize;
        for (idx, line) in reader.lines().enumerate() {
            let line = line?;
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let mut tokens = trimmed.split_whitespace();
            let (src, dst) = match (tokens.next(), tokens.next(), tokens.next()) {
                (Some(a), Some(b), None) => {
                    let parse = |tok: &str| {
                        tok.parse::<usize>().map_err(|_| GraphError::Malformed {
                            line: idx + 1,
                            content: trimmed.to_string(),
                        })
                    };
                    (parse(a)?, parse(b)?)
                }
                _ => {
                    return Err(GraphError::Malformed {
                        line: idx + 1,
                        content: trimmed.to_string(),
                    })
                }
            };
            if let Some(m) = max_node {
                if src >= m || dst >= m {
                    continue;
                }
            }
            seen_max = seen_max.max(src).max(dst);
            edges.push((src, dst));
        }
        let n = match max_node {
            Some(m) => m,
            None if edges.is_empty() => return Err(GraphError::Empty),
            None => seen_max + 1,
        };
        Ok(Graph::from_edges(n, &edges))
    }

    /// Loads an edge list from a file, transparently decompressing gzip
    /// (detected by the `1f 8b` magic bytes, not the file name).
    pub fn load_path(path: impl AsRef<Path>, max_node: Option<usize>) -> Result<Self, GraphError> {
        let mut reader = BufReader::new(File::open(path)?);
        let gz = reader.fill_buf()?.starts_with(&[0x1f, 0x8b]);
        if gz {
            Self::load_edge_list(BufReader::new(GzDecoder::new(reader)), max_node)
        } else {
            Self::load_edge_list(reader, max_node)
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn edge_count(&self) -> usize {
        self.edge_count
    }

    /// Sorted out-neighbours of `node`.
    pub fn children(&self, node: usize) -> &[u32] {
        &self.children[self.offsets[node]..self.offsets[node + 1]]
    }

    pub fn out_degree(&self, node: usize) -> usize {
        self.offsets[node + 1] - self.offsets[node]
    }

    pub fn in_degree(&self, node: usize) -> usize {
        self.in_degree[node] as usize
    }

    /// Nodes with no out-edges, ascending.
    pub fn dangling(&self) -> &[u32] {
        &self.dangling
    }

    pub fn stats(&self) -> GraphStats {
        GraphStats {
            n: self.n,
            edge_count: self.edge_count,
            avg_degree: self.edge_count as f64 / self.n as f64,
            dangling_count: self.dangling.len(),
            dangling_fraction: self.dangling.len() as f64 / self.n as f64,
        }
    }
}

impl GraphStats {
    pub const CSV_HEADER: &'static str = "n,edges,avg_degree,dangling,dangling_pct";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.n,
            self.edge_count,
            self.avg_degree,
            self.dangling_count,
            self.dangling_fraction * 100.0
        )
    }
}

/// Writes a graph back out as a plain `src dst` edge list.
pub fn write_edge_list(g: &Graph, mut w: impl std::io::Write) -> std::io::Result<()> {
    for u in 0..g.n() {
        for &v in g.children(u) {
            writeln!(w, "{u} {v}")?;
        }
    }
    Ok(())
}
