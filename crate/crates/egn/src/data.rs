//! Slide-window dataset bundles: synthetic generation with planted
//! image-to-expression structure, the on-disk manifest + "EGND" blob
//! format, and ingestion of external window/expression data.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{EgnError, Result};
use crate::tensor::Tensor;

pub const EGND_MAGIC: &[u8; 4] = b"EGND";
pub const EGND_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct WindowMeta {
    pub window_id: u64,
    pub patient_id: u64,
    pub slide_id: u64,
}

/// A small colored blob template whose per-window count drives a subset of
/// genes.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MotifSpec {
    pub radius: f64,
    pub color: [f64; 3],
    pub genes: Vec<usize>,
    pub weights: Vec<f64>,
    /// Lognormal-style amplification applied to genes marked as skewed.
    pub tail_exponent: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GenMeta {
    pub seed: u64,
    pub motifs: Vec<MotifSpec>,
    /// Per window, per motif: how many instances were planted.
    pub motif_counts: Vec<Vec<u32>>,
    /// Genes whose expression was long-tail transformed.
    pub skewed_genes: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct DatasetBundle {
    pub gene_names: Vec<String>,
    meta: Vec<WindowMeta>,
    /// N images, each [3, H, W] with values in [0, 1].
    pub windows: Vec<Tensor>,
    /// N x M nonnegative raw counts.
    pub raw_expression: Vec<Vec<f64>>,
    pub image_size: usize,
    pub gen_meta: Option<GenMeta>,
}

impl DatasetBundle {
    pub fn len(&self) -> usize {
        self.meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.is_empty()
    }

    pub fn num_genes(&self) -> usize {
        self.gene_names.len()
    }

    pub fn windows_meta(&self) -> &[WindowMeta] {
        &self.meta
    }

    pub fn window_by_id(&self, id: u64) -> Option<usize> {
        self.meta.iter().position(|w| w.window_id == id)
    }

    pub fn patients(&self) -> Vec<u64> {
        let mut ps: Vec<u64> = self.meta.iter().map(|w| w.patient_id).collect();
        ps.sort_unstable();
        ps.dedup();
        ps
    }
}

// ── synthetic generation ──

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerateConfig {
    pub seed: u64,
    pub n_patients: usize,
    pub windows_per_patient: usize,
    pub num_genes: usize,
    pub image_size: usize,
    pub skew_fraction: f64,
    pub slides_per_patient: usize,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        GenerateConfig {
            seed: 0,
            n_patients: 6,
            windows_per_patient: 60,
            num_genes: 16,
            image_size: 32,
            skew_fraction: 0.3,
            slides_per_patient: 2,
        }
    }
}

/// Deterministic synthetic bundle: textured backgrounds with per-patient
/// color shifts, Poisson-placed motifs at random positions, and expression
/// driven by motif counts so that the signal is spatially scattered.
pub fn generate(cfg: &GenerateConfig) -> Result<DatasetBundle> {
    if cfg.n_patients == 0 || cfg.windows_per_patient == 0 || cfg.num_genes == 0 || cfg.image_size < 8 {
        return Err(EgnError::Config("generate: all counts must be positive (image_size >= 8)".into()));
    }
    if !(0.0..=1.0).contains(&cfg.skew_fraction) {
        return Err(EgnError::Config(format!("skew_fraction {} outside [0,1]", cfg.skew_fraction)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let m = cfg.num_genes;
    let n_motifs = 6.min(m);
    let palette: [[f64; 3]; 6] = [
        [0.85, 0.15, 0.15],
        [0.10, 0.75, 0.20],
        [0.15, 0.25, 0.90],
        [0.85, 0.80, 0.10],
        [0.80, 0.15, 0.80],
        [0.10, 0.75, 0.80],
    ];
    let mut motifs = Vec::with_capacity(n_motifs);
    for mi in 0..n_motifs {
        let n_driven = rng.gen_range(2..=4.min(m));
        let mut genes: Vec<usize> = Vec::new();
        while genes.len() < n_driven {
            let g = rng.gen_range(0..m);
            if !genes.contains(&g) {
                genes.push(g);
            }
        }
        let weights = genes.iter().map(|_| rng.gen_range(1.0..3.0)).collect();
        motifs.push(MotifSpec {
            radius: rng.gen_range(2.0..3.5),
            color: palette[mi % palette.len()],
            genes,
            weights,
            tail_exponent: 1.6,
        });
    }
    // make sure every gene is driven by at least one motif
    for g in 0..m {
        if !motifs.iter().any(|mo| mo.genes.contains(&g)) {
            let mi = g % n_motifs;
            motifs[mi].genes.push(g);
            let w = rng.gen_range(1.0..3.0);
            motifs[mi].weights.push(w);
        }
    }

    let n_skewed = (cfg.skew_fraction * m as f64).round() as usize;
    let mut gene_order: Vec<usize> = (0..m).collect();
    // deterministic shuffle for the skewed subset
    for i in (1..m).rev() {
        let j = rng.gen_range(0..=i);
        gene_order.swap(i, j);
    }
    let mut skewed_genes: Vec<usize> = gene_order[..n_skewed].to_vec();
    skewed_genes.sort_unstable();

    let s = cfg.image_size;
    let poisson = Poisson::new(1.2).expect("valid lambda");
    let noise_dist = LogNormal::new(-3.0, 0.5).expect("valid lognormal");

    let mut meta = Vec::new();
    let mut windows = Vec::new();
    let mut base_expression: Vec<Vec<f64>> = Vec::new();
    let mut motif_counts: Vec<Vec<u32>> = Vec::new();
    let mut window_id = 0u64;
    for p in 0..cfg.n_patients {
        // patient batch effect: a small color shift shared by all the
        // patient's windows
        let shift: [f64; 3] = [
            rng.gen_range(-0.015..0.015),
            rng.gen_range(-0.015..0.015),
            rng.gen_range(-0.015..0.015),
        ];
        for w in 0..cfg.windows_per_patient {
            let slide = (p * cfg.slides_per_patient + w % cfg.slides_per_patient) as u64;
            let mut img = vec![0.0; 3 * s * s];
            let fx = rng.gen_range(0.15..0.45);
            let fy = rng.gen_range(0.15..0.45);
            for c in 0..3 {
                for i in 0..s {
                    for j in 0..s {
                        let tex = 0.015 * ((i as f64 * fx).sin() * (j as f64 * fy).cos());
                        img[c * s * s + i * s + j] = 0.5 + shift[c] + tex + rng.gen_range(-0.01..0.01);
                    }
                }
            }
            let mut counts = vec![0u32; motifs.len()];
            for (mi, motif) in motifs.iter().enumerate() {
                let count = poisson.sample(&mut rng) as u32;
                counts[mi] = count;
                for _ in 0..count {
                    let cy = rng.gen_range(0.0..s as f64);
                    let cx = rng.gen_range(0.0..s as f64);
                    stamp_blob(&mut img, s, cy, cx, motif.radius, &motif.color);
                }
            }
            for v in img.iter_mut() {
                *v = v.clamp(0.0, 1.0);
            }
            let mut expr = vec![0.0; m];
            for (mi, motif) in motifs.iter().enumerate() {
                for (g, w) in motif.genes.iter().zip(&motif.weights) {
                    expr[*g] += counts[mi] as f64 * w;
                }
            }
            for e in expr.iter_mut() {
                *e += noise_dist.sample(&mut rng);
            }
            meta.push(WindowMeta { window_id, patient_id: p as u64, slide_id: slide });
            windows.push(Tensor::new(vec![3, s, s], img)?);
            base_expression.push(expr);
            motif_counts.push(counts);
            window_id += 1;
        }
    }

    // long-tail transform for the skewed genes: standardized base value fed
    // through exp(tau * z), which is monotone in the planted signal
    let n = base_expression.len();
    let mut raw_expression = base_expression.clone();
    for &g in &skewed_genes {
        let tau = motifs
            .iter()
            .filter(|mo| mo.genes.contains(&g))
            .map(|mo| mo.tail_exponent)
            .fold(1.6, f64::max);
        let mu = base_expression.iter().map(|r| r[g]).sum::<f64>() / n as f64;
        let var = base_expression.iter().map(|r| (r[g] - mu) * (r[g] - mu)).sum::<f64>() / n as f64;
        let sd = var.sqrt().max(1e-9);
        for (row, base) in raw_expression.iter_mut().zip(&base_expression) {
            row[g] = (tau * (base[g] - mu) / sd).exp();
        }
    }

    Ok(DatasetBundle {
        gene_names: (0..m).map(|g| format!("gene_{g:03}")).collect(),
        meta,
        windows,
        raw_expression,
        image_size: s,
        gen_meta: Some(GenMeta { seed: cfg.seed, motifs, motif_counts, skewed_genes }),
    })
}

fn stamp_blob(img: &mut [f64], s: usize, cy: f64, cx: f64, radius: f64, color: &[f64; 3]) {
    let r = radius.ceil() as isize + 1;
    let (icy, icx) = (cy as isize, cx as isize);
    for di in -r..=r {
        for dj in -r..=r {
            let (i, j) = (icy + di, icx + dj);
            if i < 0 || j < 0 || i as usize >= s || j as usize >= s {
                continue;
            }
            let d = ((i as f64 - cy).powi(2) + (j as f64 - cx).powi(2)).sqrt();
            let a = (1.0 - d / radius).max(0.0);
            if a <= 0.0 {
                continue;
            }
            for c in 0..3 {
                let idx = c * s * s + i as usize * s + j as usize;
                img[idx] = img[idx] * (1.0 - a) + color[c] * a;
            }
        }
    }
}

// ── on-disk format ──

#[derive(Serialize, Deserialize)]
struct ManifestWindow {
    id: u64,
    image: serde_json::Value, // offset (number) into the blob or a file path
    expression_row: usize,
}

#[derive(Serialize, Deserialize)]
struct ManifestSlide {
    id: u64,
    windows: Vec<ManifestWindow>,
}

#[derive(Serialize, Deserialize)]
struct ManifestPatient {
    id: u64,
    slides: Vec<ManifestSlide>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    patients: Vec<ManifestPatient>,
    genes: Vec<String>,
}

fn write_f64s(out: &mut Vec<u8>, vals: &[f64]) {
    for v in vals {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_f64s(buf: &[u8], off: &mut usize, n: usize) -> Result<Vec<f64>> {
    if buf.len() < *off + 8 * n {
        return Err(EgnError::Data("EGND blob truncated".into()));
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let b: [u8; 8] = buf[*off + 8 * i..*off + 8 * i + 8].try_into().expect("8 bytes");
        out.push(f64::from_le_bytes(b));
    }
    *off += 8 * n;
    Ok(out)
}

fn read_u64(buf: &[u8], off: &mut usize) -> Result<u64> {
    if buf.len() < *off + 8 {
        return Err(EgnError::Data("EGND blob truncated".into()));
    }
    let b: [u8; 8] = buf[*off..*off + 8].try_into().expect("8 bytes");
    *off += 8;
    Ok(u64::from_le_bytes(b))
}

/// Writes manifest.json + data.egnd (+ generation.json when synthetic) into
/// `dir`.
pub fn save_bundle(bundle: &DatasetBundle, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let n = bundle.len();
    let m = bundle.num_genes();
    let s = bundle.image_size;

    let mut blob = Vec::new();
    blob.extend_from_slice(EGND_MAGIC);
    blob.extend_from_slice(&EGND_VERSION.to_le_bytes());
    blob.extend_from_slice(&(n as u64).to_le_bytes());
    blob.extend_from_slice(&(m as u64).to_le_bytes());
    blob.extend_from_slice(&(s as u64).to_le_bytes());
    blob.extend_from_slice(&(s as u64).to_le_bytes());
    for w in &bundle.windows {
        write_f64s(&mut blob, w.data());
    }
    for row in &bundle.raw_expression {
        write_f64s(&mut blob, row);
    }
    fs::File::create(dir.join("data.egnd"))?.write_all(&blob)?;

    // group windows into the patient -> slide -> window hierarchy
    let mut patients: BTreeMap<u64, BTreeMap<u64, Vec<ManifestWindow>>> = BTreeMap::new();
    for (idx, w) in bundle.meta.iter().enumerate() {
        patients.entry(w.patient_id).or_default().entry(w.slide_id).or_default().push(ManifestWindow {
            id: w.window_id,
            image: serde_json::json!(idx),
            expression_row: idx,
        });
    }
    let manifest = Manifest {
        patients: patients
            .into_iter()
            .map(|(pid, slides)| ManifestPatient {
                id: pid,
                slides: slides.into_iter().map(|(sid, windows)| ManifestSlide { id: sid, windows }).collect(),
            })
            .collect(),
        genes: bundle.gene_names.clone(),
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    if let Some(gm) = &bundle.gen_meta {
        fs::write(dir.join("generation.json"), serde_json::to_string_pretty(gm)?)?;
    }
    Ok(())
}

pub fn load_bundle(dir: &Path) -> Result<DatasetBundle> {
    let manifest_path = dir.join("manifest.json");
    if !manifest_path.exists() {
        return Err(EgnError::MissingArtifact {
            what: format!("{}", manifest_path.display()),
            produced_by: "egn gen-data".into(),
        });
    }
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(&manifest_path)?)?;
    let blob = fs::read(dir.join("data.egnd"))?;
    if blob.len() < 44 || &blob[..4] != EGND_MAGIC {
        return Err(EgnError::Data("data.egnd: bad magic".into()));
    }
    let version = u32::from_le_bytes(blob[4..8].try_into().expect("4 bytes"));
    if version != EGND_VERSION {
        return Err(EgnError::Data(format!("data.egnd: unsupported version {version}")));
    }
    let mut off = 8;
    let n = read_u64(&blob, &mut off)? as usize;
    let m = read_u64(&blob, &mut off)? as usize;
    let h = read_u64(&blob, &mut off)? as usize;
    let w = read_u64(&blob, &mut off)? as usize;
    if h != w {
        return Err(EgnError::Data(format!("non-square windows {h}x{w} unsupported")));
    }
    let mut windows = Vec::with_capacity(n);
    for _ in 0..n {
        windows.push(Tensor::new(vec![3, h, w], read_f64s(&blob, &mut off, 3 * h * w)?)?);
    }
    let mut raw_expression = Vec::with_capacity(n);
    for _ in 0..n {
        raw_expression.push(read_f64s(&blob, &mut off, m)?);
    }
    if manifest.genes.len() != m {
        return Err(EgnError::Data(format!(
            "manifest lists {} genes, blob has {m}",
            manifest.genes.len()
        )));
    }
    let mut meta = vec![None; n];
    for p in &manifest.patients {
        for sl in &p.slides {
            for win in &sl.windows {
                let idx = win.image.as_u64().ok_or_else(|| {
                    EgnError::Data(format!("window {}: blob bundles need numeric image offsets", win.id))
                })? as usize;
                if idx >= n {
                    return Err(EgnError::Data(format!("window {}: offset {idx} out of range", win.id)));
                }
                meta[idx] = Some(WindowMeta { window_id: win.id, patient_id: p.id, slide_id: sl.id });
            }
        }
    }
    let meta: Vec<WindowMeta> = meta
        .into_iter()
        .enumerate()
        .map(|(i, m)| m.ok_or_else(|| EgnError::Data(format!("blob row {i} not referenced by manifest"))))
        .collect::<Result<_>>()?;
    let gen_meta = match fs::read_to_string(dir.join("generation.json")) {
        Ok(s) => Some(serde_json::from_str(&s)?),
        Err(_) => None,
    };
    Ok(DatasetBundle {
        gene_names: manifest.genes,
        meta,
        windows,
        raw_expression,
        image_size: h,
        gen_meta,
    })
}

/// Ingests an external manifest whose windows reference image files on disk
/// and whose expression lives in `expression.csv` next to the manifest
/// (header row of gene names, one row per `expression_row` index).
///
/// Keeps the `target_genes` genes with the largest mean across the dataset
/// (all genes when None).
pub fn ingest_external(manifest_path: &Path, target_genes: Option<usize>) -> Result<DatasetBundle> {
    let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(manifest_path)?)?;
    if dir.join("data.egnd").exists() {
        let bundle = load_bundle(dir)?;
        return match target_genes {
            Some(t) => select_top_genes(bundle, t),
            None => Ok(bundle),
        };
    }

    let csv_path = dir.join("expression.csv");
    if !csv_path.exists() {
        return Err(EgnError::Data(format!("expression table {} not found", csv_path.display())));
    }
    let mut text = String::new();
    fs::File::open(&csv_path)?.read_to_string(&mut text)?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| EgnError::Data("expression.csv is empty".into()))?;
    let genes: Vec<String> = header.split(',').map(|s| s.trim().to_string()).collect();
    let m = genes.len();
    let mut table: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: Vec<f64> = line
            .split(',')
            .map(|v| {
                v.trim()
                    .parse::<f64>()
                    .map_err(|_| EgnError::Data(format!("expression.csv line {}: bad value `{v}`", lineno + 2)))
            })
            .collect::<Result<_>>()?;
        if row.len() != m {
            return Err(EgnError::Data(format!(
                "expression.csv line {}: {} values, expected {m}",
                lineno + 2,
                row.len()
            )));
        }
        if let Some(v) = row.iter().find(|v| **v < 0.0) {
            return Err(EgnError::Data(format!("expression.csv line {}: negative value {v}", lineno + 2)));
        }
        table.push(row);
    }

    let mut meta = Vec::new();
    let mut windows = Vec::new();
    let mut raw_expression = Vec::new();
    let mut image_size = 0usize;
    for p in &manifest.patients {
        for sl in &p.slides {
            for win in &sl.windows {
                let rel = win.image.as_str().ok_or_else(|| {
                    EgnError::Data(format!("window {}: expected an image path", win.id))
                })?;
                let path = dir.join(rel);
                if !path.exists() {
                    return Err(EgnError::Data(format!("window {}: missing image file {}", win.id, path.display())));
                }
                let img = load_png(&path)?;
                let s = img.shape()[1];
                if image_size == 0 {
                    image_size = s;
                } else if image_size != s {
                    return Err(EgnError::Data(format!(
                        "window {}: image size {s} differs from {image_size}",
                        win.id
                    )));
                }
                let row = table.get(win.expression_row).ok_or_else(|| {
                    EgnError::Data(format!(
                        "window {}: expression_row {} out of range ({} rows)",
                        win.id,
                        win.expression_row,
                        table.len()
                    ))
                })?;
                meta.push(WindowMeta { window_id: win.id, patient_id: p.id, slide_id: sl.id });
                windows.push(img);
                raw_expression.push(row.clone());
            }
        }
    }
    let bundle = DatasetBundle {
        gene_names: genes,
        meta,
        windows,
        raw_expression,
        image_size,
        gen_meta: None,
    };
    match target_genes {
        Some(t) => select_top_genes(bundle, t),
        None => Ok(bundle),
    }
}

/// Keep the genes with the largest mean across the dataset.
pub fn select_top_genes(bundle: DatasetBundle, keep: usize) -> Result<DatasetBundle> {
    let m = bundle.num_genes();
    if keep == 0 || keep > m {
        return Err(EgnError::Config(format!("cannot keep {keep} of {m} genes")));
    }
    let n = bundle.len() as f64;
    let mut means: Vec<(usize, f64)> = (0..m)
        .map(|g| (g, bundle.raw_expression.iter().map(|r| r[g]).sum::<f64>() / n))
        .collect();
    means.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut idx: Vec<usize> = means[..keep].iter().map(|(g, _)| *g).collect();
    idx.sort_unstable();
    Ok(DatasetBundle {
        gene_names: idx.iter().map(|&g| bundle.gene_names[g].clone()).collect(),
        raw_expression: bundle
            .raw_expression
            .iter()
            .map(|r| idx.iter().map(|&g| r[g]).collect())
            .collect(),
        meta: bundle.meta,
        windows: bundle.windows,
        image_size: bundle.image_size,
        gen_meta: bundle.gen_meta,
    })
}

/// Loads a window image: PNG files, or the raw `.rgb` format
/// (u32 LE width, u32 LE height, then width*height*3 bytes row-major RGB).
fn load_png(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    if path.extension().and_then(|e| e.to_str()) == Some("png") {
        let img = image::load_from_memory(&bytes)
            .map_err(|e| EgnError::Data(format!("{}: {e}", path.display())))?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut data = vec![0.0; 3 * h * w];
        for (j, i, px) in img.enumerate_pixels() {
            for c in 0..3 {
                data[c * h * w + i as usize * w + j as usize] = px.0[c] as f64 / 255.0;
            }
        }
        return Tensor::new(vec![3, h, w], data);
    }
    if path.extension().and_then(|e| e.to_str()) == Some("rgb") {
        if bytes.len() < 8 {
            return Err(EgnError::Data(format!("{}: truncated raw image", path.display())));
        }
        let w = u32::from_le_bytes(bytes[0..4].try_into().expect("4 bytes")) as usize;
        let h = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
        if bytes.len() != 8 + 3 * w * h {
            return Err(EgnError::Data(format!("{}: raw image size mismatch", path.display())));
        }
        let mut data = vec![0.0; 3 * h * w];
        for i in 0..h {
            for j in 0..w {
                for c in 0..3 {
                    data[c * h * w + i * w + j] = bytes[8 + (i * w + j) * 3 + c] as f64 / 255.0;
                }
            }
        }
        return Tensor::new(vec![3, h, w], data);
    }
    Err(EgnError::Data(format!(
        "{}: unsupported image format (use .png, raw .rgb, or an EGND blob)",
        path.display()
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::make_folds;

    fn skewness(xs: &[f64]) -> f64 {
        let n = xs.len() as f64;
        let mu = xs.iter().sum::<f64>() / n;
        let m2 = xs.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / n;
        let m3 = xs.iter().map(|x| (x - mu).powi(3)).sum::<f64>() / n;
        m3 / m2.powf(1.5)
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = GenerateConfig { n_patients: 3, windows_per_patient: 5, ..Default::default() };
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert_eq!(a.raw_expression, b.raw_expression);
        for (x, y) in a.windows.iter().zip(&b.windows) {
            assert_eq!(x.data(), y.data());
        }
    }

    #[test]
    fn skew_statistics_follow_skew_fraction() {
        let base = GenerateConfig {
            n_patients: 4,
            windows_per_patient: 80,
            skew_fraction: 0.0,
            ..Default::default()
        };
        let flat = generate(&base).unwrap();
        let m = flat.num_genes();
        let n = flat.len();
        for g in 0..m {
            let col: Vec<f64> = flat.raw_expression.iter().map(|r| r[g]).collect();
            assert!(skewness(&col).abs() < 2.0, "gene {g} skew {}", skewness(&col));
        }
        let skewed = generate(&GenerateConfig { skew_fraction: 0.5, ..base }).unwrap();
        assert_eq!(skewed.len(), n);
        let heavy = (0..m)
            .filter(|&g| {
                let col: Vec<f64> = skewed.raw_expression.iter().map(|r| r[g]).collect();
                skewness(&col) > 2.0
            })
            .count();
        assert!(heavy as f64 >= 0.4 * m as f64, "only {heavy}/{m} genes heavy-tailed");
    }

    #[test]
    fn zero_motif_windows_sit_at_the_noise_floor() {
        let cfg = GenerateConfig { n_patients: 4, windows_per_patient: 60, skew_fraction: 0.0, ..Default::default() };
        let bundle = generate(&cfg).unwrap();
        let gm = bundle.gen_meta.as_ref().unwrap();
        let mut seen = 0;
        for (i, counts) in gm.motif_counts.iter().enumerate() {
            for (mi, motif) in gm.motifs.iter().enumerate() {
                if counts[mi] > 0 {
                    continue;
                }
                // genes driven only by this motif and no other planted motif
                for &g in &motif.genes {
                    let other_signal: f64 = gm
                        .motifs
                        .iter()
                        .enumerate()
                        .filter(|(mj, mo)| *mj != mi && mo.genes.contains(&g))
                        .map(|(mj, mo)| {
                            let wi = mo.genes.iter().position(|&x| x == g).unwrap();
                            counts[mj] as f64 * mo.weights[wi]
                        })
                        .sum();
                    if other_signal == 0.0 {
                        // lognormal(-3, 0.5) noise stays well under 0.6
                        assert!(bundle.raw_expression[i][g] < 0.6,
                            "window {i} gene {g}: {}", bundle.raw_expression[i][g]);
                        seen += 1;
                    }
                }
            }
        }
        assert!(seen > 0, "no noise-floor cases found");
    }

    #[test]
    fn expression_is_nonnegative_and_partition_holds() {
        let bundle = generate(&GenerateConfig::default()).unwrap();
        assert!(bundle.raw_expression.iter().flatten().all(|v| *v >= 0.0));
        // all windows of one slide share one patient
        let mut slide_patient: BTreeMap<u64, u64> = BTreeMap::new();
        for w in bundle.windows_meta() {
            let p = slide_patient.entry(w.slide_id).or_insert(w.patient_id);
            assert_eq!(*p, w.patient_id);
        }
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let bundle = generate(&GenerateConfig { n_patients: 2, windows_per_patient: 3, ..Default::default() }).unwrap();
        save_bundle(&bundle, dir.path()).unwrap();
        let back = load_bundle(dir.path()).unwrap();
        assert_eq!(back.len(), bundle.len());
        assert_eq!(back.raw_expression, bundle.raw_expression);
        assert_eq!(back.windows_meta(), bundle.windows_meta());
        for (a, b) in back.windows.iter().zip(&bundle.windows) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn save_is_deterministic() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let cfg = GenerateConfig { n_patients: 2, windows_per_patient: 3, ..Default::default() };
        save_bundle(&generate(&cfg).unwrap(), d1.path()).unwrap();
        save_bundle(&generate(&cfg).unwrap(), d2.path()).unwrap();
        assert_eq!(fs::read(d1.path().join("data.egnd")).unwrap(), fs::read(d2.path().join("data.egnd")).unwrap());
    }

    #[test]
    fn top_gene_selection_by_mean() {
        let mut bundle = generate(&GenerateConfig { n_patients: 2, windows_per_patient: 2, num_genes: 5, ..Default::default() }).unwrap();
        bundle.raw_expression = vec![
            vec![3.0, 1.0, 4.0, 1.0, 5.0],
            vec![3.0, 1.0, 4.0, 1.0, 5.0],
            vec![3.0, 1.0, 4.0, 1.0, 5.0],
            vec![3.0, 1.0, 4.0, 1.0, 5.0],
        ];
        let picked = select_top_genes(bundle, 2).unwrap();
        assert_eq!(picked.gene_names, vec!["gene_002".to_string(), "gene_004".to_string()]);
        assert_eq!(picked.raw_expression[0], vec![4.0, 5.0]);
    }

    #[test]
    fn external_ingestion_with_raw_images() {
        let dir = tempfile::tempdir().unwrap();
        // two tiny 4x4 windows in the raw .rgb format
        for (name, fill) in [("w0.rgb", 10u8), ("w1.rgb", 200u8)] {
            let mut bytes = Vec::new();
            bytes.extend_from_slice(&4u32.to_le_bytes());
            bytes.extend_from_slice(&4u32.to_le_bytes());
            bytes.extend(std::iter::repeat(fill).take(4 * 4 * 3));
            fs::write(dir.path().join(name), bytes).unwrap();
        }
        fs::write(dir.path().join("expression.csv"), "gA,gB\n1.0,2.0\n3.0,4.0\n").unwrap();
        let manifest = serde_json::json!({
            "patients": [
                {"id": 0, "slides": [{"id": 0, "windows": [{"id": 0, "image": "w0.rgb", "expression_row": 0}]}]},
                {"id": 1, "slides": [{"id": 1, "windows": [{"id": 1, "image": "w1.rgb", "expression_row": 1}]}]}
            ],
            "genes": ["gA", "gB"]
        });
        let mpath = dir.path().join("manifest.json");
        fs::write(&mpath, manifest.to_string()).unwrap();
        let bundle = ingest_external(&mpath, None).unwrap();
        assert_eq!(bundle.len(), 2);
        assert_eq!(bundle.raw_expression[1], vec![3.0, 4.0]);
    }

    #[test]
    fn malformed_expression_row_cites_line() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("expression.csv"), "gA,gB\n1.0,2.0\n3.0\n").unwrap();
        let manifest = serde_json::json!({
            "patients": [{"id": 0, "slides": [{"id": 0, "windows": [{"id": 0, "image": "w0.rgb", "expression_row": 0}]}]}],
            "genes": ["gA", "gB"]
        });
        let mpath = dir.path().join("manifest.json");
        fs::write(&mpath, manifest.to_string()).unwrap();
        let err = ingest_external(&mpath, None).unwrap_err().to_string();
        assert!(err.contains("line 3"), "{err}");
    }

    #[test]
    fn folds_partition_patients() {
        let bundle = generate(&GenerateConfig { n_patients: 4, windows_per_patient: 6, ..Default::default() }).unwrap();
        let folds = make_folds(&bundle, 4).unwrap();
        let mut per_fold = vec![0usize; 4];
        for (_, f) in &folds {
            per_fold[*f] += 1;
        }
        assert_eq!(per_fold, vec![1, 1, 1, 1]);
        // no patient appears twice
        let mut ps: Vec<u64> = folds.iter().map(|(p, _)| *p).collect();
        ps.sort_unstable();
        ps.dedup();
        assert_eq!(ps.len(), 4);
        assert!(make_folds(&bundle, 5).is_err());
    }

    #[test]
    fn fold_balance_bound() {
        for seed in 0..5 {
            let bundle = generate(&GenerateConfig { seed, n_patients: 5, windows_per_patient: 7, ..Default::default() }).unwrap();
            let folds = make_folds(&bundle, 2).unwrap();
            let count_of = |f: usize| -> usize {
                bundle
                    .windows_meta()
                    .iter()
                    .filter(|w| folds.iter().any(|(p, ff)| *p == w.patient_id && *ff == f))
                    .count()
            };
            let spread = count_of(0).abs_diff(count_of(1));
            let max_patient = 7; // windows_per_patient
            assert!(spread <= max_patient);
        }
    }
}
