//! Embedding datasets, the FEMB file format, partitioners and synthetic blobs.
//!
//! FEMB layout (little-endian): magic `FEMB`, version `u16`, dtype `u8`
//! (0 = f32), sample count `u64`, dim `u32`, class count `u32`, then
//! `sample_count` `u32` labels and the row-major `f32` feature matrix.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::error::{input, CoreError, Result};

const FEMB_MAGIC: &[u8; 4] = b"FEMB";
const FEMB_VERSION: u16 = 1;
const DTYPE_F32: u8 = 0;
pub const FEMB_HEADER_LEN: usize = 4 + 2 + 1 + 8 + 4 + 4;

/// Samples × features matrix with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingDataset {
    pub data: DMatrix<f64>,
    pub labels: Vec<usize>,
    pub n_classes: usize,
}

impl EmbeddingDataset {
    pub fn new(data: DMatrix<f64>, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        let ds = Self { data, labels, n_classes };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let (m, n) = self.data.shape();
        if m == 0 || n == 0 {
            return input(format!("dataset must be non-empty, got {m} × {n}"));
        }
        if self.labels.len() != m {
            return input(format!("{} labels for {m} samples", self.labels.len()));
        }
        if self.n_classes == 0 {
            return input("class count must be positive");
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= self.n_classes) {
            return input(format!("label {bad} outside [0, {})", self.n_classes));
        }
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::Numeric("non-finite feature value".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.data.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    /// Rows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let data = self.data.select_rows(indices);
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Self { data, labels, n_classes: self.n_classes }
    }

    /// Row-wise concatenation.
    pub fn concat(parts: &[&EmbeddingDataset]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| CoreError::Input("nothing to concatenate".into()))?;
        let dim = first.dim();
        if parts.iter().any(|p| p.dim() != dim || p.n_classes != first.n_classes) {
            return input("datasets disagree on dimension or class count");
        }
        let rows: usize = parts.iter().map(|p| p.len()).sum();
        let mut data = DMatrix::zeros(rows, dim);
        let mut labels = Vec::with_capacity(rows);
        let mut at = 0;
        for p in parts {
            data.rows_mut(at, p.len()).copy_from(&p.data);
            labels.extend_from_slice(&p.labels);
            at += p.len();
        }
        Ok(Self { data, labels, n_classes: first.n_classes })
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        histogram(self.labels.iter().copied(), self.n_classes)
    }
}

fn histogram(labels: impl Iterator<Item = usize>, classes: usize) -> Vec<usize> {
    let mut h = vec![0; classes];
    for l in labels {
        h[l] += 1;
    }
    h
}

pub fn femb_to_bytes(ds: &EmbeddingDataset) -> Vec<u8> {
    let (m, n) = ds.data.shape();
    let mut out = Vec::with_capacity(FEMB_HEADER_LEN + 4 * m + 4 * m * n);
    out.extend_from_slice(FEMB_MAGIC);
    out.extend_from_slice(&FEMB_VERSION.to_le_bytes());
    out.push(DTYPE_F32);
    out.extend_from_slice(&(m as u64).to_le_bytes());
    out.extend_from_slice(&(n as u32).to_le_bytes());
    out.extend_from_slice(&(ds.n_classes as u32).to_le_bytes());
    for &l in &ds.labels {
        out.extend_from_slice(&(l as u32).to_le_bytes());
    }
    for i in 0..m {
        for j in 0..n {
            out.extend_from_slice(&(ds.data[(i, j)] as f32).to_le_bytes());
        }
    }
    out
}

pub fn femb_from_bytes(bytes: &[u8]) -> Result<EmbeddingDataset> {
    let fmt = |msg: String| CoreError::Format(msg);
    if bytes.len() < FEMB_HEADER_LEN {
        return Err(fmt(format!(
            "FEMB header truncated: {} bytes missing",
            FEMB_HEADER_LEN - bytes.len()
        )));
    }
    if &bytes[..4] != FEMB_MAGIC {
        return Err(fmt("bad FEMB magic".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FEMB_VERSION {
        return Err(fmt(format!("unsupported FEMB version {version}")));
    }
    if bytes[6] != DTYPE_F32 {
        return Err(fmt(format!("unsupported FEMB dtype {}", bytes[6])));
    }
    let m = u64::from_le_bytes(bytes[7..15].try_into().unwrap());
    let n = u32::from_le_bytes(bytes[15..19].try_into().unwrap()) as u64;
    let classes = u32::from_le_bytes(bytes[19..23].try_into().unwrap()) as usize;
    let expected = (m.checked_mul(4))
        .and_then(|l| m.checked_mul(n)?.checked_mul(4)?.checked_add(l))
        .and_then(|b| b.checked_add(FEMB_HEADER_LEN as u64))
        .ok_or_else(|| fmt("FEMB header sizes overflow".into()))?;
    let actual = bytes.len() as u64;
    if actual < expected {
        return Err(fmt(format!("FEMB file truncated: {} bytes missing", expected - actual)));
    }
    if actual > expected {
        return Err(fmt(format!("FEMB file has {} trailing bytes", actual - expected)));
    }
    let (m, n) = (m as usize, n as usize);
    let word = |off: usize| -> [u8; 4] { bytes[off..off + 4].try_into().unwrap() };
    let labels: Vec<usize> =
        (0..m).map(|i| u32::from_le_bytes(word(FEMB_HEADER_LEN + 4 * i)) as usize).collect();
    let base = FEMB_HEADER_LEN + 4 * m;
    let data = DMatrix::from_fn(m, n, |i, j| f32::from_le_bytes(word(base + 4 * (i * n + j))) as f64);
    let ds = EmbeddingDataset { data, labels, n_classes: classes };
    ds.validate().map_err(|e| fmt(e.to_string()))?;
    Ok(ds)
}

pub fn save_femb(ds: &EmbeddingDataset, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, femb_to_bytes(ds))?;
    Ok(())
}

pub fn load_femb(path: impl AsRef<Path>) -> Result<EmbeddingDataset> {
    femb_from_bytes(&std::fs::read(path)?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Scheme {
    Iid,
    Dirichlet { alpha: f64 },
    SingleClass,
}

impl Scheme {
    /// Concentration used to label curves; IID is reported as infinity and
    /// single-class as zero.
    pub fn alpha_label(&self) -> f64 {
        match self {
            Scheme::Iid => f64::INFINITY,
            Scheme::Dirichlet { alpha } => *alpha,
            Scheme::SingleClass => 0.0,
        }
    }
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Scheme::Iid => write!(f, "iid"),
            Scheme::Dirichlet { alpha } => write!(f, "dirichlet({alpha})"),
            Scheme::SingleClass => write!(f, "single-class"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PartitionSpec {
    pub scheme: Scheme,
    pub clients: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartitionPlan {
    pub assignments: Vec<Vec<usize>>,
    pub histograms: Vec<Vec<usize>>,
}

impl PartitionPlan {
    pub fn clients(&self) -> usize {
        self.assignments.len()
    }

    /// Line-oriented `client_id<TAB>sample_index` listing.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, idx) in self.assignments.iter().enumerate() {
            for i in idx {
                writeln!(out, "{k}\t{i}").unwrap();
            }
        }
        out
    }

    pub fn from_text(text: &str, labels: &[usize], classes: usize) -> Result<Self> {
        let mut assignments: Vec<Vec<usize>> = Vec::new();
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let parse = |s: Option<&str>| -> Result<usize> {
                s.and_then(|v| v.trim().parse().ok())
                    .ok_or_else(|| CoreError::Format(format!("plan line {}: expected `client<TAB>index`", n + 1)))
            };
            let mut parts = line.split('\t');
            let (k, i) = (parse(parts.next())?, parse(parts.next())?);
            if i >= labels.len() {
                return Err(CoreError::Format(format!("plan line {}: sample {i} out of range", n + 1)));
            }
            if assignments.len() <= k {
                assignments.resize(k + 1, Vec::new());
            }
            assignments[k].push(i);
        }
        let plan = Self::with_histograms(assignments, labels, classes);
        plan.check_cover(labels.len())?;
        Ok(plan)
    }

    fn with_histograms(assignments: Vec<Vec<usize>>, labels: &[usize], classes: usize) -> Self {
        let histograms =
            assignments.iter().map(|idx| histogram(idx.iter().map(|&i| labels[i]), classes)).collect();
        Self { assignments, histograms }
    }

    /// Checks the plan is a disjoint cover of `0..m` with no empty client.
    pub fn check_cover(&self, m: usize) -> Result<()> {
        let mut seen = vec![false; m];
        for (k, idx) in self.assignments.iter().enumerate() {
            if idx.is_empty() {
                return input(format!("client {k} has no samples"));
            }
            for &i in idx {
                if i >= m || std::mem::replace(&mut seen[i], true) {
                    return input(format!("sample {i} assigned twice or out of range"));
                }
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return input(format!("sample {i} not assigned"));
        }
        Ok(())
    }
}

pub fn partition(ds: &EmbeddingDataset, spec: &PartitionSpec) -> Result<PartitionPlan> {
    partition_labels(&ds.labels, ds.n_classes, spec)
}

pub fn partition_labels(labels: &[usize], classes: usize, spec: &PartitionSpec) -> Result<PartitionPlan> {
    let (m, k) = (labels.len(), spec.clients);
    if k == 0 {
        return input("client count must be at least 1");
    }
    if m < k {
        return input(format!("{m} samples cannot cover {k} clients"));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
    let by_class = |c: usize| -> Vec<usize> { (0..m).filter(|&i| labels[i] == c).collect() };
    let mut assignments = vec![Vec::new(); k];
    match spec.scheme {
        Scheme::Iid => {
            let mut idx: Vec<usize> = (0..m).collect();
            idx.shuffle(&mut rng);
            for (n, i) in idx.into_iter().enumerate() {
                assignments[n % k].push(i);
            }
        }
        Scheme::Dirichlet { alpha } => {
            if !(alpha > 0.0 && alpha.is_finite()) {
                return input(format!("Dirichlet alpha must be positive, got {alpha}"));
            }
            for c in 0..classes {
                let mut idx = by_class(c);
                let p = sample_dirichlet(alpha, k, &mut rng);
                let counts = largest_remainder(&p, idx.len());
                idx.shuffle(&mut rng);
                let mut at = 0;
                for (client, &cnt) in counts.iter().enumerate() {
                    assignments[client].extend_from_slice(&idx[at..at + cnt]);
                    at += cnt;
                }
            }
        }
        Scheme::SingleClass => {
            for c in 0..classes {
                let mut idx = by_class(c);
                idx.shuffle(&mut rng);
                // With fewer clients than classes, class c wraps onto client c mod K.
                let owners: Vec<usize> = if k >= classes { (c..k).step_by(classes).collect() } else { vec![c % k] };
                for (n, i) in idx.into_iter().enumerate() {
                    assignments[owners[n % owners.len()]].push(i);
                }
            }
        }
    }
    repair_empty(&mut assignments);
    for a in &mut assignments {
        a.sort_unstable();
    }
    let plan = PartitionPlan::with_histograms(assignments, labels, classes);
    debug_assert!(plan.check_cover(m).is_ok());
    Ok(plan)
}

/// Moves one sample from the largest client (lowest index on ties) into
/// each empty client.
fn repair_empty(assignments: &mut [Vec<usize>]) {
    while let Some(empty) = assignments.iter().position(Vec::is_empty) {
        let largest = (0..assignments.len())
            .max_by_key(|&i| (assignments[i].len(), std::cmp::Reverse(i)))
            .expect("at least one client");
        let moved = assignments[largest].pop().expect("m >= K guarantees a donor");
        assignments[empty].push(moved);
    }
}

/// Dirichlet draw computed in log space so tiny concentrations do not
/// underflow to an all-zero vector.
fn sample_dirichlet(alpha: f64, k: usize, rng: &mut impl Rng) -> Vec<f64> {
    // Gamma(α) = Gamma(α + 1) · U^{1/α}
    let gamma = Gamma::new(alpha + 1.0, 1.0).expect("alpha + 1 > 0");
    let logs: Vec<f64> = (0..k)
        .map(|_| {
            let g: f64 = gamma.sample(rng);
            let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            g.ln() + u.ln() / alpha
        })
        .collect();
    let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = w.iter().sum();
    w.into_iter().map(|x| x / sum).collect()
}

/// Integer counts summing to `total` proportional to `p`, remainders going
/// to the largest fractional parts (lowest index on ties).
pub fn largest_remainder(p: &[f64], total: usize) -> Vec<usize> {
    let raw: Vec<f64> = p.iter().map(|&x| x * total as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|&r| r.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| {
        let (fa, fb) = (raw[a] - raw[a].floor(), raw[b] - raw[b].floor());
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Gaussian blobs with unit covariance and class means `separation · e_c`.
/// Samples are grouped by class.
pub fn synth_blobs(
    classes: usize,
    dim: usize,
    per_class: usize,
    separation: f64,
    seed: u64,
) -> Result<EmbeddingDataset> {
    if classes == 0 || per_class == 0 || dim == 0 {
        return input("blob counts must be positive");
    }
    if classes > dim {
        return input(format!("{classes} axis-aligned means need dim >= classes, got {dim}"));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let m = classes * per_class;
    let mut data = DMatrix::zeros(m, dim);
    let mut labels = Vec::with_capacity(m);
    for i in 0..m {
        let c = i / per_class;
        for j in 0..dim {
            let z: f64 = StandardNormal.sample(&mut rng);
            data[(i, j)] = z + if j == c { separation } else { 0.0 };
        }
        labels.push(c);
    }
    EmbeddingDataset::new(data, labels, classes)
}

/// Mean Shannon entropy (nats) of the per-client class histograms.
pub fn mean_histogram_entropy(plan: &PartitionPlan) -> f64 {
    let entropy = |h: &Vec<usize>| {
        let total: usize = h.iter().sum();
        h.iter()
            .filter(|&&c| c > 0)
            .map(|&c| {
                let p = c as f64 / total as f64;
                -p * p.ln()
            })
            .sum::<f64>()
    };
    plan.histograms.iter().map(entropy).sum::<f64>() / plan.clients() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn largest_remainder_sums_to_total() {
        assert_eq!(largest_remainder(&[0.5, 0.25, 0.25], 5), vec![3, 1, 1]);
        assert_eq!(largest_remainder(&[1.0 / 3.0; 3], 10), vec![4, 3, 3]);
        assert_eq!(largest_remainder(&[0.0, 1.0], 7), vec![0, 7]);
    }

    #[test]
    fn dirichlet_draw_is_a_distribution_even_for_tiny_alpha() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        for alpha in [1e-3, 0.01, 1.0, 1e4] {
            let p = sample_dirichlet(alpha, 7, &mut rng);
            assert!(p.iter().all(|x| x.is_finite() && *x >= 0.0));
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn repair_fills_empty_clients() {
        let mut a = vec![vec![0, 1, 2, 3], vec![], vec![4, 5], vec![]];
        repair_empty(&mut a);
        assert!(a.iter().all(|c| !c.is_empty()));
        assert_eq!(a.iter().map(Vec::len).sum::<usize>(), 6);
    }
}
