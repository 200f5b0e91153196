//! Interaction-energy distributions and graph kernels.
//!
//! Each kept shot maps to the interaction energy of its excitation pattern.
//! Energies from the whole corpus share one binning, every graph becomes a
//! 100-bin histogram, and graphs are compared through the Jensen-Shannon
//! divergence of those histograms (QEK) or through the classical
//! shortest-path kernel (SPK).

use std::collections::BTreeMap;
use std::f64::consts::LN_2;
use std::io::{BufRead, Write as IoWrite};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::Register;
use crate::emulator::MeasurementSet;
use crate::graph::Graph;
use crate::{Error, Result};

pub const NUM_BINS: usize = 100;

/// Interaction energy of one excitation pattern, rad/us: the sum of
/// V_jk = c6_over_hbar / d_jk^6 over all excited pairs, every pair counted,
/// not only graph edges.
pub fn interaction_energy(mask: u64, register: &Register, c6_over_hbar: f64) -> f64 {
    let n = register.positions.len();
    let mut total = 0.0;
    let mut rest = mask;
    while rest != 0 {
        let j = rest.trailing_zeros() as usize;
        rest &= rest - 1;
        if j >= n {
            break;
        }
        let mut others = rest;
        while others != 0 {
            let k = others.trailing_zeros() as usize;
            others &= others - 1;
            if k >= n {
                break;
            }
            total += c6_over_hbar / register.distance(j, k).powi(6);
        }
    }
    total
}

/// Per-shot energies of one graph's measurement set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergySample {
    pub graph_id: u64,
    pub values: Vec<f64>,
}

pub fn energy_sample(graph_id: u64, measurements: &MeasurementSet, register: &Register, c6_over_hbar: f64) -> EnergySample {
    EnergySample {
        graph_id,
        values: measurements
            .shots
            .iter()
            .map(|&m| interaction_energy(m, register, c6_over_hbar))
            .collect(),
    }
}

/// A shared support of 100 equal bins over the corpus-wide energy range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Binning {
    pub e1: f64,
    pub e2: f64,
    /// 101 edges; edges[0] = e1, edges[100] = e2.
    pub edges: Vec<f64>,
}

impl Binning {
    /// Rebuild the uniform edge grid from a stored support.
    pub fn from_support(e1: f64, e2: f64) -> Result<Self> {
        if !e1.is_finite() || !e2.is_finite() || e2 < e1 {
            return Err(Error::Config(format!("bad binning support [{e1}, {e2}]")));
        }
        let mut edges: Vec<f64> = (0..=NUM_BINS)
            .map(|k| e1 + (e2 - e1) * (k as f64 / NUM_BINS as f64))
            .collect();
        edges[0] = e1;
        edges[NUM_BINS] = e2;
        Ok(Binning { e1, e2, edges })
    }

    pub fn is_degenerate(&self) -> bool {
        self.e1 == self.e2
    }

    /// Bin of `v`: half-open [edge_k, edge_{k+1}) except the last, which is
    /// closed so e2 is counted.
    pub fn bin_of(&self, v: f64) -> Result<usize> {
        if v < self.e1 || v > self.e2 || !v.is_finite() {
            return Err(Error::OutOfSupport {
                value: v,
                lo: self.e1,
                hi: self.e2,
            });
        }
        if self.is_degenerate() {
            return Ok(0);
        }
        let interior = &self.edges[1..NUM_BINS];
        Ok(interior.partition_point(|&e| e <= v))
    }
}

/// Corpus-wide binning: e1 is the minimum and e2 the maximum energy seen
/// across every non-empty sample.
pub fn global_binning(samples: &[EnergySample]) -> Result<Binning> {
    let mut e1 = f64::INFINITY;
    let mut e2 = f64::NEG_INFINITY;
    for s in samples {
        for &v in &s.values {
            e1 = e1.min(v);
            e2 = e2.max(v);
        }
    }
    if !e1.is_finite() || !e2.is_finite() {
        return Err(Error::EmptyInput(
            "global binning needs at least one non-empty energy sample".into(),
        ));
    }
    Binning::from_support(e1, e2)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyDistribution {
    pub graph_id: u64,
    /// 100 probabilities summing to 1.
    pub probabilities: Vec<f64>,
}

/// Histogram of one sample on the shared support, normalized by its own
/// kept-shot count.
pub fn to_distribution(sample: &EnergySample, binning: &Binning) -> Result<EnergyDistribution> {
    if sample.values.is_empty() {
        return Err(Error::EmptyInput(format!(
            "graph {} has no kept shots to bin",
            sample.graph_id
        )));
    }
    let mut counts = [0u64; NUM_BINS];
    for &v in &sample.values {
        counts[binning.bin_of(v)?] += 1;
    }
    let k = sample.values.len() as f64;
    Ok(EnergyDistribution {
        graph_id: sample.graph_id,
        probabilities: counts.iter().map(|&c| c as f64 / k).collect(),
    })
}

fn entropy(p: &[f64]) -> f64 {
    p.iter().map(|&x| if x > 0.0 { -x * x.ln() } else { 0.0 }).sum()
}

fn check_distribution(p: &[f64]) -> Result<()> {
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > 1e-9 || p.iter().any(|&x| !(0.0..=1.0).contains(&x)) {
        return Err(Error::NotNormalized { sum });
    }
    Ok(())
}

/// Jensen-Shannon divergence with natural log, clamped to [0, ln 2].
pub fn js_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::DimensionMismatch {
            expected: p.len(),
            got: q.len(),
        });
    }
    check_distribution(p)?;
    check_distribution(q)?;
    // Disjoint supports sit at the analytic maximum; returning it directly
    // keeps exp(-mu ln 2) exactly 2^-mu instead of a float-noise neighbor.
    if p.iter().zip(q).all(|(&a, &b)| a == 0.0 || b == 0.0) {
        return Ok(LN_2);
    }
    let mid: f64 = p
        .iter()
        .zip(q)
        .map(|(&a, &b)| {
            let m = 0.5 * (a + b);
            if m > 0.0 {
                -m * m.ln()
            } else {
                0.0
            }
        })
        .sum();
    let js = mid - 0.5 * (entropy(p) + entropy(q));
    Ok(js.clamp(0.0, LN_2))
}

/// K_mu = exp(-mu JS). Disjoint supports hit JS = ln 2 and the value becomes
/// exactly 2^-mu.
pub fn qek_value(p: &[f64], q: &[f64], mu: f64) -> Result<f64> {
    let js = js_divergence(p, q)?;
    Ok(if js >= LN_2 { (-mu).exp2() } else { (-mu * js).exp() })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum KernelKind {
    Qek { mu: f64 },
    Spk,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelMatrix {
    pub kind: KernelKind,
    pub graph_ids: Vec<u64>,
    /// Row-major n x n values.
    pub values: Vec<f64>,
}

impl KernelMatrix {
    pub fn n(&self) -> usize {
        self.graph_ids.len()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n() + j]
    }

    /// The principal submatrix over `indices`, in their order.
    pub fn submatrix(&self, indices: &[usize]) -> Vec<f64> {
        indices
            .iter()
            .flat_map(|&i| indices.iter().map(move |&j| self.get(i, j)))
            .collect()
    }

    pub fn check_symmetric(&self, tol: f64) -> Result<()> {
        let n = self.n();
        for i in 0..n {
            for j in (i + 1)..n {
                if (self.get(i, j) - self.get(j, i)).abs() > tol {
                    return Err(Error::NotSymmetric { i, j });
                }
            }
        }
        Ok(())
    }
}

/// Full QEK Gram matrix; symmetric with an exactly-unit diagonal.
pub fn qek_matrix(distributions: &[EnergyDistribution], mu: f64) -> Result<KernelMatrix> {
    if distributions.len() < 2 {
        return Err(Error::EmptyInput(format!(
            "a kernel matrix needs >= 2 distributions, got {}",
            distributions.len()
        )));
    }
    if !(mu.is_finite() && mu > 0.0) {
        return Err(Error::Config(format!("mu must be positive, got {mu}")));
    }
    let n = distributions.len();
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| ((i + 1)..n).map(move |j| (i, j))).collect();
    let computed: Vec<((usize, usize), f64)> = pairs
        .par_iter()
        .map(|&(i, j)| {
            qek_value(&distributions[i].probabilities, &distributions[j].probabilities, mu).map(|v| ((i, j), v))
        })
        .collect::<Result<_>>()?;

    let mut values = vec![0.0; n * n];
    for i in 0..n {
        values[i * n + i] = 1.0;
    }
    for ((i, j), v) in computed {
        values[i * n + j] = v;
        values[j * n + i] = v;
    }
    Ok(KernelMatrix {
        kind: KernelKind::Qek { mu },
        graph_ids: distributions.iter().map(|d| d.graph_id).collect(),
        values,
    })
}

/// Multiset of unordered-pair BFS distances, as length -> count.
fn path_length_counts(graph: &Graph) -> BTreeMap<u32, u64> {
    let adj = graph.adjacency();
    let n = graph.num_nodes;
    let mut counts = BTreeMap::new();
    let mut dist = vec![u32::MAX; n];
    let mut queue = std::collections::VecDeque::new();
    for s in 0..n {
        dist.iter_mut().for_each(|d| *d = u32::MAX);
        dist[s] = 0;
        queue.clear();
        queue.push_back(s);
        while let Some(u) = queue.pop_front() {
            for &v in &adj[u] {
                let v = v as usize;
                if dist[v] == u32::MAX {
                    dist[v] = dist[u] + 1;
                    queue.push_back(v);
                }
            }
        }
        for &d in dist.iter().skip(s + 1) {
            if d != u32::MAX {
                *counts.entry(d).or_insert(0) += 1;
            }
        }
    }
    counts
}

fn delta_match(a: &BTreeMap<u32, u64>, b: &BTreeMap<u32, u64>) -> f64 {
    a.iter()
        .map(|(len, &ca)| ca as f64 * *b.get(len).unwrap_or(&0) as f64)
        .sum()
}

/// Normalized shortest-path delta kernel.
pub fn spk_matrix(graphs: &[Graph]) -> Result<KernelMatrix> {
    if graphs.len() < 2 {
        return Err(Error::EmptyInput(format!(
            "a kernel matrix needs >= 2 graphs, got {}",
            graphs.len()
        )));
    }
    let counts: Vec<BTreeMap<u32, u64>> = graphs.par_iter().map(path_length_counts).collect();
    let self_match: Vec<f64> = counts.iter().map(|c| delta_match(c, c)).collect();

    let n = graphs.len();
    let mut values = vec![0.0; n * n];
    for i in 0..n {
        values[i * n + i] = 1.0;
        for j in (i + 1)..n {
            let denom = (self_match[i] * self_match[j]).sqrt();
            let v = if denom > 0.0 {
                delta_match(&counts[i], &counts[j]) / denom
            } else {
                0.0
            };
            values[i * n + j] = v;
            values[j * n + i] = v;
        }
    }
    Ok(KernelMatrix {
        kind: KernelKind::Spk,
        graph_ids: graphs.iter().map(|g| g.id).collect(),
        values,
    })
}

/// CSV layout: header `graph_id,<id>,...`; one row per graph, id first.
pub fn write_kernel_csv<W: IoWrite>(kernel: &KernelMatrix, mut w: W) -> std::io::Result<()> {
    write!(w, "graph_id")?;
    for id in &kernel.graph_ids {
        write!(w, ",{id}")?;
    }
    writeln!(w)?;
    for (i, id) in kernel.graph_ids.iter().enumerate() {
        write!(w, "{id}")?;
        for j in 0..kernel.n() {
            write!(w, ",{}", kernel.get(i, j))?;
        }
        writeln!(w)?;
    }
    Ok(())
}

/// Parse a kernel CSV written by [`write_kernel_csv`]. The kind cannot be
/// recovered from the file, so the caller supplies it.
pub fn read_kernel_csv<R: BufRead>(reader: R, kind: KernelKind, path: &str) -> Result<KernelMatrix> {
    let mut lines = reader.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::parse(path, None, "empty kernel CSV"))?
        .1
        .map_err(|e| Error::io(path, e))
        .map(|h| (0usize, h))?;
    let mut cols = header.split(',');
    if cols.next() != Some("graph_id") {
        return Err(Error::parse(path, Some(1), "header must start with graph_id"));
    }
    let graph_ids: Vec<u64> = cols
        .map(|c| c.trim().parse::<u64>().map_err(|_| Error::parse(path, Some(1), format!("bad graph id {c:?}"))))
        .collect::<Result<_>>()?;
    let n = graph_ids.len();
    if n == 0 {
        return Err(Error::parse(path, Some(1), "kernel CSV has no graph columns"));
    }

    let mut values = vec![0.0; n * n];
    let mut rows_seen = 0usize;
    for (lineno, line) in lines {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        if rows_seen >= n {
            return Err(Error::parse(path, Some(lineno + 1), "more rows than header columns"));
        }
        let mut fields = line.split(',');
        let row_id: u64 = fields
            .next()
            .unwrap_or("")
            .trim()
            .parse()
            .map_err(|_| Error::parse(path, Some(lineno + 1), "bad row id"))?;
        if row_id != graph_ids[rows_seen] {
            return Err(Error::IdMismatch(format!(
                "row {} has id {row_id}, header says {}",
                rows_seen + 1,
                graph_ids[rows_seen]
            )));
        }
        let mut count = 0;
        for (j, f) in fields.enumerate() {
            if j >= n {
                return Err(Error::parse(path, Some(lineno + 1), "too many values in row"));
            }
            values[rows_seen * n + j] = f
                .trim()
                .parse::<f64>()
                .map_err(|_| Error::parse(path, Some(lineno + 1), format!("bad value {f:?}")))?;
            count += 1;
        }
        if count != n {
            return Err(Error::parse(
                path,
                Some(lineno + 1),
                format!("expected {n} values, found {count}"),
            ));
        }
        rows_seen += 1;
    }
    if rows_seen != n {
        return Err(Error::parse(path, None, format!("expected {n} rows, found {rows_seen}")));
    }
    Ok(KernelMatrix {
        kind,
        graph_ids,
        values,
    })
}
