//! Exact k-nearest-neighbour exemplar index over extractor style codes.
//! Queries scan the whole table in fixed-size blocks with a bounded
//! worst-first heap, exclude same-patient entries, and break distance ties
//! by window id so results never depend on insertion order.
//!
//! An index may carry a style transform (PCA whitening fitted on the
//! indexed codes): entries then store transformed codes, and queries must
//! be passed through [`ExemplarIndex::project`] first. Whitening equalizes
//! the per-direction variance of the style space so that retrieval is not
//! dominated by a few high-variance nuisance directions.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{EgnError, Result};
use crate::extractor::GlobalView;
use crate::tensor::Tensor;

pub const EGNI_MAGIC: &[u8; 4] = b"EGNI";
pub const EGNI_VERSION: u32 = 2;
const SCAN_BLOCK: usize = 256;
/// Relative eigenvalue floor for whitening; caps the amplification of
/// near-degenerate style directions.
const WHITEN_EIG_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceMetric {
    L2,
    L1,
    Cosine,
}

impl Default for DistanceMetric {
    fn default() -> Self {
        DistanceMetric::L2
    }
}

pub fn distance(metric: DistanceMetric, a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(EgnError::shape(
            "distance",
            format!("vector lengths differ: {} vs {}", a.len(), b.len()),
        ));
    }
    match metric {
        DistanceMetric::L2 => Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()),
        DistanceMetric::L1 => Ok(a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()),
        DistanceMetric::Cosine => {
            let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            if na == 0.0 || nb == 0.0 {
                return Err(EgnError::Degenerate(
                    "cosine distance is undefined for a zero vector".into(),
                ));
            }
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            Ok(1.0 - dot / (na * nb))
        }
    }
}

/// Affine map applied to raw style codes before they enter the index:
/// projected = w * (x - mean), with w = diag(1/sqrt(eig)) * V^T from the
/// eigendecomposition of the code covariance.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleTransform {
    pub mean: Vec<f64>,
    /// Row-major [D, D].
    pub w: Vec<f64>,
}

impl StyleTransform {
    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        let d = self.mean.len();
        if x.len() != d {
            return Err(EgnError::shape(
                "style_transform",
                format!("vector has {} entries, transform expects {d}", x.len()),
            ));
        }
        let centered: Vec<f64> = x.iter().zip(&self.mean).map(|(v, m)| v - m).collect();
        let mut out = vec![0.0; d];
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.w[i * d..(i + 1) * d].iter().zip(&centered).map(|(w, c)| w * c).sum();
        }
        Ok(out)
    }

    /// Fit PCA whitening on the rows of `codes` ([N, D] flattened).
    fn fit(codes: &[Vec<f64>]) -> StyleTransform {
        let n = codes.len();
        let d = codes[0].len();
        let mut mean = vec![0.0; d];
        for row in codes {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v / n as f64;
            }
        }
        // covariance, exploiting symmetry
        let mut cov = vec![0.0; d * d];
        for row in codes {
            let c: Vec<f64> = row.iter().zip(&mean).map(|(v, m)| v - m).collect();
            for i in 0..d {
                for j in i..d {
                    cov[i * d + j] += c[i] * c[j] / n as f64;
                }
            }
        }
        for i in 0..d {
            for j in 0..i {
                cov[i * d + j] = cov[j * d + i];
            }
        }
        let (eigvals, eigvecs) = symmetric_eigen(cov, d);
        let lam_max = eigvals.iter().cloned().fold(0.0f64, f64::max).max(f64::MIN_POSITIVE);
        let mut w = vec![0.0; d * d];
        for i in 0..d {
            let scale = 1.0 / eigvals[i].max(WHITEN_EIG_FLOOR * lam_max).sqrt();
            for j in 0..d {
                // row i of w = eigenvector i (a column of V), scaled
                w[i * d + j] = scale * eigvecs[j * d + i];
            }
        }
        StyleTransform { mean, w }
    }
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues (descending) and row-major eigenvectors V with
/// column i belonging to eigenvalue i.
fn symmetric_eigen(mut a: Vec<f64>, d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut v = vec![0.0; d * d];
    for i in 0..d {
        v[i * d + i] = 1.0;
    }
    let frob: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let tol = 1e-14 * frob.max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..d {
            for q in (p + 1)..d {
                off += a[p * d + q] * a[p * d + q];
            }
        }
        if off.sqrt() <= tol {
            break;
        }
        for p in 0..d {
            for q in (p + 1)..d {
                let apq = a[p * d + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * d + q] - a[p * d + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let akp = a[k * d + p];
                    let akq = a[k * d + q];
                    a[k * d + p] = c * akp - s * akq;
                    a[k * d + q] = s * akp + c * akq;
                }
                for k in 0..d {
                    let apk = a[p * d + k];
                    let aqk = a[q * d + k];
                    a[p * d + k] = c * apk - s * aqk;
                    a[q * d + k] = s * apk + c * aqk;
                }
                for k in 0..d {
                    let vkp = v[k * d + p];
                    let vkq = v[k * d + q];
                    v[k * d + p] = c * vkp - s * vkq;
                    v[k * d + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| a[j * d + j].total_cmp(&a[i * d + i]).then(i.cmp(&j)));
    let eigvals: Vec<f64> = order.iter().map(|&i| a[i * d + i].max(0.0)).collect();
    let mut vecs = vec![0.0; d * d];
    for (new_col, &old_col) in order.iter().enumerate() {
        for k in 0..d {
            vecs[k * d + new_col] = v[k * d + old_col];
        }
    }
    (eigvals, vecs)
}

/// One indexed window: its style code and its normalized expression row.
#[derive(Clone, Debug)]
pub struct IndexEntry {
    pub window_id: u64,
    pub patient_id: u64,
    pub encoding: Vec<f64>,
    pub expression: Vec<f64>,
}

/// The k retrieved exemplars for one query, nearest first.
#[derive(Clone, Debug)]
pub struct ExemplarSet {
    pub window_ids: Vec<u64>,
    pub patient_ids: Vec<u64>,
    pub distances: Vec<f64>,
    /// [k, D] style codes, row order matching `window_ids`.
    pub encodings: Tensor,
    /// [k, M] normalized expression rows.
    pub expressions: Tensor,
}

#[derive(Debug)]
pub struct ExemplarIndex {
    pub style_dim: usize,
    pub num_genes: usize,
    pub entries: Vec<IndexEntry>,
    /// When present, entry encodings are stored in the transformed space
    /// and raw query codes must go through [`ExemplarIndex::project`].
    pub transform: Option<StyleTransform>,
}

// heap item ordered so the *worst* kept candidate is at the top
#[derive(PartialEq)]
struct Candidate {
    dist: f64,
    window_id: u64,
    idx: usize,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist
            .total_cmp(&other.dist)
            .then(self.window_id.cmp(&other.window_id))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl ExemplarIndex {
    /// Assemble an index from per-window style codes and the matching
    /// normalized expression matrix ([N, M], row i for views[i]).
    pub fn build(views: &[GlobalView], expression: &Tensor) -> Result<Self> {
        if views.is_empty() {
            return Err(EgnError::Data("cannot build an index from zero windows".into()));
        }
        if expression.rank() != 2 || expression.shape()[0] != views.len() {
            return Err(EgnError::shape(
                "build_index",
                format!(
                    "expression must be [{}, M], got {:?}",
                    views.len(),
                    expression.shape()
                ),
            ));
        }
        let style_dim = views[0].vector.len();
        let num_genes = expression.shape()[1];
        let mut entries = Vec::with_capacity(views.len());
        for (i, v) in views.iter().enumerate() {
            if v.vector.len() != style_dim {
                return Err(EgnError::shape(
                    "build_index",
                    format!(
                        "style code {} has {} entries, expected {}",
                        i,
                        v.vector.len(),
                        style_dim
                    ),
                ));
            }
            let row = expression.data()[i * num_genes..(i + 1) * num_genes].to_vec();
            entries.push(IndexEntry {
                window_id: v.source_window_id,
                patient_id: v.patient_id,
                encoding: v.vector.clone(),
                expression: row,
            });
        }
        let mut ids: Vec<u64> = entries.iter().map(|e| e.window_id).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != entries.len() {
            return Err(EgnError::Data("duplicate window ids in index input".into()));
        }
        Ok(ExemplarIndex { style_dim, num_genes, entries, transform: None })
    }

    /// Like [`ExemplarIndex::build`], but fits PCA whitening on the style
    /// codes and stores every encoding in the whitened space.
    pub fn build_whitened(views: &[GlobalView], expression: &Tensor) -> Result<Self> {
        let mut index = Self::build(views, expression)?;
        let codes: Vec<Vec<f64>> = index.entries.iter().map(|e| e.encoding.clone()).collect();
        let transform = StyleTransform::fit(&codes);
        for e in index.entries.iter_mut() {
            e.encoding = transform.apply(&e.encoding)?;
        }
        index.transform = Some(transform);
        Ok(index)
    }

    /// Map a raw style code into the space the entries live in (identity
    /// for an index built without whitening).
    pub fn project(&self, raw: &[f64]) -> Result<Vec<f64>> {
        match &self.transform {
            Some(t) => t.apply(raw),
            None => {
                if raw.len() != self.style_dim {
                    return Err(EgnError::shape(
                        "project",
                        format!("vector has {} entries, index stores {}", raw.len(), self.style_dim),
                    ));
                }
                Ok(raw.to_vec())
            }
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// k nearest cross-patient exemplars for one query code, optionally
    /// restricted to an allowed set of patients.
    pub fn query(
        &self,
        encoding: &[f64],
        query_patient: u64,
        k: usize,
        metric: DistanceMetric,
        allowed_patients: Option<&[u64]>,
    ) -> Result<ExemplarSet> {
        if k == 0 {
            return Err(EgnError::Contract("k must be positive".into()));
        }
        if encoding.len() != self.style_dim {
            return Err(EgnError::shape(
                "query",
                format!("query has {} entries, index stores {}", encoding.len(), self.style_dim),
            ));
        }
        let mut heap: BinaryHeap<Candidate> = BinaryHeap::with_capacity(k + 1);
        let mut eligible = 0usize;
        for block_start in (0..self.entries.len()).step_by(SCAN_BLOCK) {
            let block = &self.entries[block_start..(block_start + SCAN_BLOCK).min(self.entries.len())];
            for (j, e) in block.iter().enumerate() {
                if e.patient_id == query_patient {
                    continue;
                }
                if let Some(allowed) = allowed_patients {
                    if !allowed.contains(&e.patient_id) {
                        continue;
                    }
                }
                eligible += 1;
                let d = distance(metric, encoding, &e.encoding)?;
                heap.push(Candidate { dist: d, window_id: e.window_id, idx: block_start + j });
                if heap.len() > k {
                    heap.pop();
                }
            }
        }
        if eligible < k {
            return Err(EgnError::InsufficientExemplars { requested: k, eligible });
        }
        let mut kept: Vec<Candidate> = heap.into_vec();
        kept.sort_by(|a, b| a.cmp(b));
        let mut window_ids = Vec::with_capacity(k);
        let mut patient_ids = Vec::with_capacity(k);
        let mut distances = Vec::with_capacity(k);
        let mut enc = Vec::with_capacity(k * self.style_dim);
        let mut expr = Vec::with_capacity(k * self.num_genes);
        for c in &kept {
            let e = &self.entries[c.idx];
            window_ids.push(e.window_id);
            patient_ids.push(e.patient_id);
            distances.push(c.dist);
            enc.extend_from_slice(&e.encoding);
            expr.extend_from_slice(&e.expression);
        }
        Ok(ExemplarSet {
            window_ids,
            patient_ids,
            distances,
            encodings: Tensor::new(vec![k, self.style_dim], enc)?,
            expressions: Tensor::new(vec![k, self.num_genes], expr)?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(EGNI_MAGIC);
        buf.extend_from_slice(&EGNI_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.style_dim as u64).to_le_bytes());
        buf.extend_from_slice(&(self.num_genes as u64).to_le_bytes());
        buf.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        match &self.transform {
            Some(t) => {
                buf.push(1);
                for v in &t.mean {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
                for v in &t.w {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
            None => buf.push(0),
        }
        for e in &self.entries {
            buf.extend_from_slice(&e.window_id.to_le_bytes());
            buf.extend_from_slice(&e.patient_id.to_le_bytes());
            for v in &e.encoding {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            for v in &e.expression {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent)?;
            }
        }
        fs::File::create(path)?.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = fs::read(path).map_err(|_| EgnError::MissingArtifact {
            what: path.display().to_string(),
            produced_by: "egn build-index".to_string(),
        })?;
        let mut off = 0usize;
        let take = |off: &mut usize, n: usize| -> Result<&[u8]> {
            if buf.len() < *off + n {
                return Err(EgnError::Data(format!("{}: truncated index file", path.display())));
            }
            let s = &buf[*off..*off + n];
            *off += n;
            Ok(s)
        };
        if take(&mut off, 4)? != EGNI_MAGIC {
            return Err(EgnError::Data(format!("{}: bad magic (expected EGNI)", path.display())));
        }
        let version = u32::from_le_bytes(take(&mut off, 4)?.try_into().expect("4 bytes"));
        if version != EGNI_VERSION {
            return Err(EgnError::Data(format!("{}: unsupported version {version}", path.display())));
        }
        let style_dim = u64::from_le_bytes(take(&mut off, 8)?.try_into().expect("8 bytes")) as usize;
        let num_genes = u64::from_le_bytes(take(&mut off, 8)?.try_into().expect("8 bytes")) as usize;
        let count = u64::from_le_bytes(take(&mut off, 8)?.try_into().expect("8 bytes")) as usize;
        let read_f64s = |bytes: &[u8]| -> Vec<f64> {
            bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect()
        };
        let transform = match take(&mut off, 1)?[0] {
            0 => None,
            1 => {
                let mean = read_f64s(take(&mut off, 8 * style_dim)?);
                let w = read_f64s(take(&mut off, 8 * style_dim * style_dim)?);
                Some(StyleTransform { mean, w })
            }
            other => {
                return Err(EgnError::Data(format!(
                    "{}: bad transform flag {other}",
                    path.display()
                )))
            }
        };
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let window_id = u64::from_le_bytes(take(&mut off, 8)?.try_into().expect("8 bytes"));
            let patient_id = u64::from_le_bytes(take(&mut off, 8)?.try_into().expect("8 bytes"));
            let encoding = read_f64s(take(&mut off, 8 * style_dim)?);
            let expression = read_f64s(take(&mut off, 8 * num_genes)?);
            entries.push(IndexEntry { window_id, patient_id, encoding, expression });
        }
        Ok(ExemplarIndex { style_dim, num_genes, entries, transform })
    }
}
