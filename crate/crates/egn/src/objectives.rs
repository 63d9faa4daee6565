//! Training losses, evaluation metrics, target normalization, and
//! patient-level cross-validation folds.

use serde::{Deserialize, Serialize};

use crate::data::DatasetBundle;
use crate::error::{EgnError, Result};
use crate::nn::Ctx;
use crate::tape::VarId;
use crate::tensor::Tensor;

pub const NORM_EPS: f64 = 1e-8;
pub const PCC_EPS: f64 = 1e-8;

/// Per-gene min/max of log1p-transformed expression, fitted on training
/// folds only.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NormalizationParams {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
    pub epsilon: f64,
}

/// log1p then per-gene min-max scaling. With `params` supplied (test folds)
/// the stored statistics are reused; otherwise they are fitted from `raw`.
pub fn normalize_targets(
    raw: &[Vec<f64>],
    params: Option<&NormalizationParams>,
) -> Result<(Vec<Vec<f64>>, NormalizationParams)> {
    if raw.is_empty() {
        return Err(EgnError::Data("empty expression matrix".into()));
    }
    let m = raw[0].len();
    for (i, row) in raw.iter().enumerate() {
        if row.len() != m {
            return Err(EgnError::Data(format!("row {i} has {} genes, expected {m}", row.len())));
        }
        if let Some(v) = row.iter().find(|v| **v < 0.0) {
            return Err(EgnError::Data(format!("negative expression value {v} in row {i}")));
        }
    }
    let logged: Vec<Vec<f64>> = raw.iter().map(|r| r.iter().map(|v| v.ln_1p()).collect()).collect();
    let params = match params {
        Some(p) => {
            if p.min.len() != m {
                return Err(EgnError::Data(format!(
                    "normalization params cover {} genes, data has {m}",
                    p.min.len()
                )));
            }
            p.clone()
        }
        None => {
            let mut min = vec![f64::INFINITY; m];
            let mut max = vec![f64::NEG_INFINITY; m];
            for row in &logged {
                for g in 0..m {
                    min[g] = min[g].min(row[g]);
                    max[g] = max[g].max(row[g]);
                }
            }
            NormalizationParams { min, max, epsilon: NORM_EPS }
        }
    };
    let out = logged
        .iter()
        .map(|row| {
            (0..m)
                .map(|g| (row[g] - params.min[g]) / (params.max[g] - params.min[g] + params.epsilon))
                .collect()
        })
        .collect();
    Ok((out, params))
}

pub fn denormalize_targets(normalized: &[Vec<f64>], params: &NormalizationParams) -> Vec<Vec<f64>> {
    normalized
        .iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .map(|(g, v)| {
                    let logged = v * (params.max[g] - params.min[g] + params.epsilon) + params.min[g];
                    logged.exp_m1()
                })
                .collect()
        })
        .collect()
}

/// L_total = L2 + L_pcc on the tape, for a B x M prediction batch.
///
/// L2 is the mean squared deviation over all B*M cells. L_pcc averages
/// (1 - pcc_g) over genes, with the per-gene Pearson correlation computed
/// across the batch under an epsilon-stabilized denominator; a zero-variance
/// gene yields pcc 0 and contributes 1.
pub fn loss_total(ctx: &mut Ctx, yhat: VarId, y: &Tensor) -> Result<VarId> {
    let shape = ctx.tape.value(yhat).shape().to_vec();
    if shape.len() != 2 || shape != y.shape() {
        return Err(EgnError::shape(
            "loss_total",
            format!("predictions {:?} vs targets {:?}", shape, y.shape()),
        ));
    }
    let (b, m) = (shape[0], shape[1]);
    if b < 2 {
        return Err(EgnError::Contract(format!(
            "loss_total needs a batch of at least 2 for the PCC term, got {b}"
        )));
    }
    let yv = ctx.input(y.clone());
    let diff = ctx.tape.sub(yhat, yv)?;
    let sq = ctx.tape.mul(diff, diff)?;
    let l2 = ctx.tape.mean_all(sq);

    let mut pcc_terms = Vec::with_capacity(m);
    for g in 0..m {
        let ph = ctx.tape.slice(yhat, 1, g, 1)?; // B x 1
        let pt = ctx.tape.slice(yv, 1, g, 1)?;
        let mh = ctx.tape.mean_all(ph);
        let mt = ctx.tape.mean_all(pt);
        let ch = ctx.tape.sub(ph, mh)?;
        let ct = ctx.tape.sub(pt, mt)?;
        let cross = ctx.tape.mul(ch, ct)?;
        let num = ctx.tape.sum_all(cross);
        let ch2 = ctx.tape.mul(ch, ch)?;
        let ct2 = ctx.tape.mul(ct, ct)?;
        let sh2 = ctx.tape.sum_all(ch2);
        let st2 = ctx.tape.sum_all(ct2);
        let sh2e = ctx.tape.add_scalar(sh2, PCC_EPS);
        let st2e = ctx.tape.add_scalar(st2, PCC_EPS);
        let sh = ctx.tape.sqrt(sh2e);
        let st = ctx.tape.sqrt(st2e);
        let denom = ctx.tape.mul(sh, st)?;
        let pcc = ctx.tape.div(num, denom)?;
        let one_minus = ctx.tape.neg(pcc);
        let term = ctx.tape.add_scalar(one_minus, 1.0);
        pcc_terms.push(term);
    }
    let stacked = ctx.tape.concat(0, &pcc_terms)?;
    let lpcc = ctx.tape.mean_all(stacked);
    ctx.tape.add(l2, lpcc)
}

/// Plain (non-tape) Pearson correlation; None when either side has zero
/// variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b) {
        num += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return None;
    }
    Some(num / (va.sqrt() * vb.sqrt()))
}

/// Linear-interpolation quantile of a sorted slice (numpy convention).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    assert!(n > 0);
    if n == 1 {
        return sorted[0];
    }
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricReport {
    pub mse: f64,
    pub mae: f64,
    /// Per-gene PCC; None for zero-variance target genes.
    pub per_gene_pcc: Vec<Option<f64>>,
    /// Genes excluded from the PCC aggregates (zero target variance).
    pub excluded_genes: Vec<usize>,
    pub pcc_at_f: f64,
    pub pcc_at_s: f64,
    pub pcc_at_m: f64,
}

impl MetricReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("gene,pcc\n");
        for (g, p) in self.per_gene_pcc.iter().enumerate() {
            match p {
                Some(v) => s.push_str(&format!("{g},{v}\n")),
                None => s.push_str(&format!("{g},undefined\n")),
            }
        }
        s.push_str("summary,mse,mae,pcc_at_f,pcc_at_s,pcc_at_m\n");
        s.push_str(&format!(
            "summary,{},{},{},{},{}\n",
            self.mse, self.mae, self.pcc_at_f, self.pcc_at_s, self.pcc_at_m
        ));
        s
    }
}

/// Per-gene PCC across windows plus MSE/MAE over all cells. PCC@F is the
/// 25th percentile, PCC@S the median, PCC@M the mean, each over genes whose
/// targets vary.
pub fn evaluate(predictions: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<MetricReport> {
    let n = predictions.len();
    if n < 2 {
        return Err(EgnError::Contract(format!("evaluate needs at least 2 windows, got {n}")));
    }
    if targets.len() != n || predictions[0].len() != targets[0].len() {
        return Err(EgnError::shape(
            "evaluate",
            format!("{}x{} predictions vs {}x{} targets", n, predictions[0].len(), targets.len(), targets[0].len()),
        ));
    }
    let m = predictions[0].len();
    let mut mse = 0.0;
    let mut mae = 0.0;
    for (p, t) in predictions.iter().zip(targets) {
        for (x, y) in p.iter().zip(t) {
            mse += (x - y) * (x - y);
            mae += (x - y).abs();
        }
    }
    mse /= (n * m) as f64;
    mae /= (n * m) as f64;

    let mut per_gene = Vec::with_capacity(m);
    let mut excluded = Vec::new();
    let mut defined = Vec::new();
    for g in 0..m {
        let pcol: Vec<f64> = predictions.iter().map(|r| r[g]).collect();
        let tcol: Vec<f64> = targets.iter().map(|r| r[g]).collect();
        // gene excluded when the *targets* carry no signal
        let tvar = {
            let mu = tcol.iter().sum::<f64>() / n as f64;
            tcol.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>()
        };
        if tvar == 0.0 {
            per_gene.push(None);
            excluded.push(g);
            continue;
        }
        match pearson(&pcol, &tcol) {
            Some(p) => {
                per_gene.push(Some(p));
                defined.push(p);
            }
            None => {
                // prediction constant on a varying gene: correlation 0
                per_gene.push(Some(0.0));
                defined.push(0.0);
            }
        }
    }
    if defined.is_empty() {
        return Err(EgnError::Data("all target genes have zero variance".into()));
    }
    defined.sort_by(|a, b| a.total_cmp(b));
    let pcc_at_f = quantile_sorted(&defined, 0.25);
    let pcc_at_s = quantile_sorted(&defined, 0.5);
    let pcc_at_m = defined.iter().sum::<f64>() / defined.len() as f64;
    Ok(MetricReport { mse, mae, per_gene_pcc: per_gene, excluded_genes: excluded, pcc_at_f, pcc_at_s, pcc_at_m })
}

/// Patient-level fold assignment: patients sorted by descending window
/// count (id as tie-break) and dealt round-robin. Every window inherits its
/// patient's fold.
pub fn make_folds(bundle: &DatasetBundle, n_folds: usize) -> Result<Vec<(u64, usize)>> {
    let mut counts: Vec<(u64, usize)> = Vec::new();
    for w in bundle.windows_meta() {
        match counts.iter_mut().find(|(p, _)| *p == w.patient_id) {
            Some((_, c)) => *c += 1,
            None => counts.push((w.patient_id, 1)),
        }
    }
    if n_folds == 0 || counts.len() < n_folds {
        return Err(EgnError::Config(format!(
            "n_folds={} but bundle has {} patients",
            n_folds,
            counts.len()
        )));
    }
    counts.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(counts.iter().enumerate().map(|(i, (p, _))| (*p, i % n_folds)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn normalize_constant_gene_maps_to_zero() {
        let raw = vec![vec![3.0, 1.0], vec![3.0, 2.0], vec![3.0, 5.0]];
        let (norm, _) = normalize_targets(&raw, None).unwrap();
        for row in &norm {
            assert!(row[0].abs() < 1e-12);
        }
    }

    #[test]
    fn normalize_zero_raw_is_zero_when_min_zero() {
        let raw = vec![vec![0.0], vec![4.0]];
        let (norm, _) = normalize_targets(&raw, None).unwrap();
        assert_eq!(norm[0][0], 0.0);
    }

    #[test]
    fn normalize_rejects_negative() {
        let raw = vec![vec![-1.0]];
        assert!(normalize_targets(&raw, None).is_err());
    }

    #[test]
    fn normalize_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let raw: Vec<Vec<f64>> = (0..10)
            .map(|_| (0..6).map(|_| rng.gen_range(0.0..50.0)).collect())
            .collect();
        let (norm, params) = normalize_targets(&raw, None).unwrap();
        for row in &norm {
            assert!(row.iter().all(|v| (-1e-12..=1.0 + 1e-12).contains(v)));
        }
        let back = denormalize_targets(&norm, &params);
        for (a, b) in raw.iter().zip(&back) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-9, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn loss_zero_for_perfect_prediction() {
        let store = ParamStore::new();
        let mut ctx = Ctx::new(&store);
        let y = Tensor::new(vec![3, 2], vec![0.1, 0.9, 0.4, 0.2, 0.8, 0.5]).unwrap();
        let yhat = ctx.input(y.clone());
        let l = loss_total(&mut ctx, yhat, &y).unwrap();
        assert!(ctx.tape.value(l).item().abs() < 1e-7);
    }

    #[test]
    fn anticorrelated_gene_contributes_two() {
        let store = ParamStore::new();
        let mut ctx = Ctx::new(&store);
        let y = Tensor::new(vec![4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let yhat_t = Tensor::new(vec![4, 1], vec![-1.0, -2.0, -3.0, -4.0]).unwrap();
        let yhat = ctx.input(yhat_t.clone());
        let l = loss_total(&mut ctx, yhat, &y).unwrap();
        // L2 part: mean((yhat-y)^2) = mean(4,16,36,64) = 30; L_pcc = 2
        assert!((ctx.tape.value(l).item() - 32.0).abs() < 1e-6);
    }

    #[test]
    fn loss_rejects_batch_of_one() {
        let store = ParamStore::new();
        let mut ctx = Ctx::new(&store);
        let y = Tensor::new(vec![1, 2], vec![0.0, 1.0]).unwrap();
        let yhat = ctx.input(y.clone());
        assert!(loss_total(&mut ctx, yhat, &y).is_err());
    }

    #[test]
    fn pcc_loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let y = Tensor::uniform(&[8, 5], 1.0, &mut rng);
        let yhat0 = Tensor::uniform(&[8, 5], 1.0, &mut rng);
        let f = |yh: &Tensor| -> f64 {
            let store = ParamStore::new();
            let mut ctx = Ctx::new(&store);
            let v = ctx.input(yh.clone());
            let l = loss_total(&mut ctx, v, &y).unwrap();
            ctx.tape.value(l).item()
        };
        let store = ParamStore::new();
        let mut ctx = Ctx::new(&store);
        let v = ctx.tape.leaf(yhat0.clone(), true);
        let l = loss_total(&mut ctx, v, &y).unwrap();
        let grads = ctx.tape.backward(l).unwrap();
        let g = grads.get(v).unwrap();
        let h = 1e-6;
        for i in 0..yhat0.numel() {
            let mut p = yhat0.clone();
            p.data_mut()[i] += h;
            let mut m = yhat0.clone();
            m.data_mut()[i] -= h;
            let fd = (f(&p) - f(&m)) / (2.0 * h);
            let an = g.data()[i];
            assert!((fd - an).abs() <= 1e-4 * an.abs().max(1e-6), "i={i} fd={fd} an={an}");
        }
    }

    #[test]
    fn evaluate_perfect_prediction() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t: Vec<Vec<f64>> = (0..6).map(|_| (0..4).map(|_| rng.gen_range(0.0..1.0)).collect()).collect();
        let rep = evaluate(&t, &t).unwrap();
        assert_eq!(rep.mse, 0.0);
        assert_eq!(rep.mae, 0.0);
        for p in rep.per_gene_pcc.iter().flatten() {
            assert!((p - 1.0).abs() < 1e-12);
        }
        assert!((rep.pcc_at_f - 1.0).abs() < 1e-12);
        assert!((rep.pcc_at_s - 1.0).abs() < 1e-12);
        assert!((rep.pcc_at_m - 1.0).abs() < 1e-12);
    }

    #[test]
    fn evaluate_shift_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t: Vec<Vec<f64>> = (0..8).map(|_| (0..3).map(|_| rng.gen_range(0.0..1.0)).collect()).collect();
        let c = 0.3;
        let p: Vec<Vec<f64>> = t.iter().map(|r| r.iter().map(|v| v + c).collect()).collect();
        let rep = evaluate(&p, &t).unwrap();
        for pc in rep.per_gene_pcc.iter().flatten() {
            assert!((pc - 1.0).abs() < 1e-10);
        }
        assert!((rep.mse - c * c).abs() < 1e-12);
        assert!((rep.mae - c).abs() < 1e-12);
    }

    #[test]
    fn evaluate_excludes_zero_variance_targets() {
        let t = vec![vec![1.0, 0.1], vec![1.0, 0.5], vec![1.0, 0.9]];
        let p = vec![vec![0.2, 0.1], vec![0.3, 0.5], vec![0.1, 0.9]];
        let rep = evaluate(&p, &t).unwrap();
        assert_eq!(rep.excluded_genes, vec![0]);
        assert!(rep.per_gene_pcc[0].is_none());
    }

    #[test]
    fn quantiles_linear_interpolation() {
        let v = [0.1, 0.2, 0.3, 0.4];
        assert!((quantile_sorted(&v, 0.25) - 0.175).abs() < 1e-12);
        assert!((quantile_sorted(&v, 0.5) - 0.25).abs() < 1e-12);
    }

    proptest::proptest! {
        /// PCC is invariant to positive affine transforms.
        #[test]
        fn pcc_affine_invariance(seed in 0u64..500, a in 0.1f64..5.0, b in -2.0f64..2.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let y: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
            if let (Some(p1), Some(p2)) = (pearson(&x, &y), &pearson(&x.iter().map(|v| a * v + b).collect::<Vec<_>>(), &y)) {
                proptest::prop_assert!((p1 - p2).abs() < 1e-10);
            }
        }

        /// PCC@F <= PCC@S and min <= PCC@M <= max.
        #[test]
        fn metric_ordering(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 10;
            let m = 6;
            let t: Vec<Vec<f64>> = (0..n).map(|_| (0..m).map(|_| rng.gen_range(0.0..1.0)).collect()).collect();
            let p: Vec<Vec<f64>> = (0..n).map(|_| (0..m).map(|_| rng.gen_range(0.0..1.0)).collect()).collect();
            let rep = evaluate(&p, &t).unwrap();
            proptest::prop_assert!(rep.pcc_at_f <= rep.pcc_at_s + 1e-12);
            let defined: Vec<f64> = rep.per_gene_pcc.iter().flatten().copied().collect();
            let lo = defined.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = defined.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            proptest::prop_assert!(lo - 1e-12 <= rep.pcc_at_m && rep.pcc_at_m <= hi + 1e-12);
        }
    }
}
