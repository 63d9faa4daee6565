//! Pipeline commands: dataset generation, extractor training, index
//! construction, exemplar retrieval, cross-validated model training, and
//! evaluation. Every artifact lands under the configured run directory.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::RunConfig;
use crate::data::{self, DatasetBundle};
use crate::error::{EgnError, Result};
use crate::extractor::{encode_bundle, train_extractor, Extractor};
use crate::gradcheck::{gradcheck, GradcheckReport};
use crate::index::{ExemplarIndex, ExemplarSet};
use crate::model::{EgnModel, Variant};
use crate::nn::{cosine_lr, AdamW, Ctx};
use crate::objectives::{self, evaluate, loss_total, make_folds, MetricReport};
use crate::tensor::Tensor;

/// Exclusive ownership of a run directory for the duration of a command.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(run_dir: &Path) -> Result<Self> {
        fs::create_dir_all(run_dir)?;
        let path = run_dir.join(".lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(RunLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(EgnError::Contract(format!(
                "run directory {} is locked by another command (delete {} if stale)",
                run_dir.display(),
                path.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn extractor_path(cfg: &RunConfig) -> PathBuf {
    cfg.artifacts_dir().join("extractor.egnx")
}

fn index_path(cfg: &RunConfig) -> PathBuf {
    cfg.artifacts_dir().join("index.egni")
}

fn model_path(cfg: &RunConfig, fold: usize) -> PathBuf {
    cfg.run_dir.join(format!("model_fold{fold}.egnm"))
}

pub fn cmd_gen_data(cfg: &RunConfig) -> Result<String> {
    let mut gen = cfg.generate;
    gen.seed = cfg.seed;
    let bundle = data::generate(&gen)?;
    data::save_bundle(&bundle, &cfg.data_dir)?;
    Ok(format!(
        "wrote bundle: {} windows, {} genes, {} patients -> {}",
        bundle.len(),
        bundle.num_genes(),
        bundle.patients().len(),
        cfg.data_dir.display()
    ))
}

pub fn cmd_train_extractor(cfg: &RunConfig) -> Result<String> {
    let _lock = RunLock::acquire(cfg.artifacts_dir())?;
    let bundle = data::load_bundle(&cfg.data_dir)?;
    let mut tc = cfg.extractor_train;
    tc.seed = cfg.seed;
    let (ex, log) = train_extractor(&bundle, cfg.extractor.clone(), &tc)?;
    ex.save(&extractor_path(cfg))?;
    let mut csv = String::from("epoch,recon_l1,adv_gen,adv_disc\n");
    for row in &log {
        csv.push_str(&format!(
            "{},{},{},{}\n",
            row.epoch,
            row.recon_l1,
            row.adv_gen.map(|v| v.to_string()).unwrap_or_default(),
            row.adv_disc.map(|v| v.to_string()).unwrap_or_default()
        ));
    }
    fs::write(cfg.artifacts_dir().join("extractor_log.csv"), csv)?;
    let last = log.last().map(|r| r.recon_l1).unwrap_or(f64::NAN);
    Ok(format!("extractor trained ({} epochs, final L1 {last:.5})", log.len()))
}

pub fn cmd_build_index(cfg: &RunConfig) -> Result<String> {
    let _lock = RunLock::acquire(cfg.artifacts_dir())?;
    let bundle = data::load_bundle(&cfg.data_dir)?;
    let ex = Extractor::load(&extractor_path(cfg))?;
    let views = encode_bundle(&ex, &bundle)?;
    // index entries carry normalized expression; the whole-bundle fit is a
    // model input (exemplar y_j), not a training target
    let (normed, _) = objectives::normalize_targets(&bundle.raw_expression, None)?;
    let m = bundle.num_genes();
    let flat: Vec<f64> = normed.iter().flatten().copied().collect();
    let expr = Tensor::new(vec![bundle.len(), m], flat)?;
    // whitening keeps retrieval from being dominated by a few high-variance
    // nuisance directions of the style space (e.g. slide-level color casts)
    let index = ExemplarIndex::build_whitened(&views, &expr)?;
    index.save(&index_path(cfg))?;
    Ok(format!("index built: {} entries, D={}, M={}", index.len(), index.style_dim, index.num_genes))
}

pub fn cmd_retrieve(cfg: &RunConfig, window_id: Option<u64>) -> Result<String> {
    let bundle = data::load_bundle(&cfg.data_dir)?;
    let index = ExemplarIndex::load(&index_path(cfg))?;
    let meta = match window_id {
        Some(id) => {
            let i = bundle
                .window_by_id(id)
                .ok_or_else(|| EgnError::Data(format!("window id {id} not in bundle")))?;
            bundle.windows_meta()[i]
        }
        None => bundle.windows_meta()[0],
    };
    let entry = index
        .entries
        .iter()
        .find(|e| e.window_id == meta.window_id)
        .ok_or_else(|| EgnError::Data(format!("window id {} not in index", meta.window_id)))?;
    let encoding = entry.encoding.clone();
    let set = index.query(
        &encoding,
        meta.patient_id,
        cfg.model.num_exemplars,
        cfg.retrieval.metric,
        None,
    )?;
    let mut out = format!(
        "query window {} (patient {}), k={}, metric {:?}\n",
        meta.window_id, meta.patient_id, cfg.model.num_exemplars, cfg.retrieval.metric
    );
    for i in 0..set.window_ids.len() {
        out.push_str(&format!(
            "  #{}: window {} (patient {}) distance {:.6}\n",
            i + 1,
            set.window_ids[i],
            set.patient_ids[i],
            set.distances[i]
        ));
    }
    Ok(out)
}

/// Everything one fold needs: split indices, normalized targets, and the
/// fixed per-window exemplar sets (retrieved from training-fold patients
/// only).
struct FoldData {
    train_idx: Vec<usize>,
    val_idx: Vec<usize>,
    test_idx: Vec<usize>,
    targets: Vec<Vec<f64>>,
    views: Vec<Vec<f64>>,
    exemplars: Vec<ExemplarSet>,
}

/// Target-normalization parameters for one fold, fitted on the expression
/// rows of non-test patients only so the held-out fold cannot leak into
/// them.
pub fn fold_normalization(
    bundle: &DatasetBundle,
    folds: &[(u64, usize)],
    fold: usize,
) -> Result<crate::objectives::NormalizationParams> {
    let fold_of: HashMap<u64, usize> = folds.iter().copied().collect();
    let mut fit_rows = Vec::new();
    for (i, w) in bundle.windows_meta().iter().enumerate() {
        let f = *fold_of
            .get(&w.patient_id)
            .ok_or_else(|| EgnError::Data(format!("patient {} missing from folds", w.patient_id)))?;
        if f != fold {
            fit_rows.push(bundle.raw_expression[i].clone());
        }
    }
    let (_, params) = objectives::normalize_targets(&fit_rows, None)?;
    Ok(params)
}

fn prepare_fold(
    cfg: &RunConfig,
    bundle: &DatasetBundle,
    index: &ExemplarIndex,
    folds: &[(u64, usize)],
    fold: usize,
) -> Result<FoldData> {
    let fold_of: HashMap<u64, usize> = folds.iter().copied().collect();
    let test_patients: Vec<u64> = folds.iter().filter(|(_, f)| *f == fold).map(|(p, _)| *p).collect();
    let mut train_patients: Vec<u64> =
        folds.iter().filter(|(_, f)| *f != fold).map(|(p, _)| *p).collect();
    train_patients.sort_unstable();
    if train_patients.len() < 2 {
        return Err(EgnError::Contract(format!(
            "fold {fold}: need at least 2 non-test patients (train + validation), got {}",
            train_patients.len()
        )));
    }
    // hold out the training patient with the fewest windows for validation
    let mut counts: HashMap<u64, usize> = HashMap::new();
    for w in bundle.windows_meta() {
        *counts.entry(w.patient_id).or_insert(0) += 1;
    }
    let val_patient = *train_patients
        .iter()
        .min_by_key(|p| (counts.get(p).copied().unwrap_or(0), **p))
        .expect("non-empty");

    let mut train_idx = Vec::new();
    let mut val_idx = Vec::new();
    let mut test_idx = Vec::new();
    for (i, w) in bundle.windows_meta().iter().enumerate() {
        let f = *fold_of
            .get(&w.patient_id)
            .ok_or_else(|| EgnError::Data(format!("patient {} missing from folds", w.patient_id)))?;
        if f == fold {
            test_idx.push(i);
        } else if w.patient_id == val_patient {
            val_idx.push(i);
        } else {
            train_idx.push(i);
        }
    }

    // normalization fitted on non-test patients only, reused for the test fold
    let params = fold_normalization(bundle, folds, fold)?;
    let (targets, _) = objectives::normalize_targets(&bundle.raw_expression, Some(&params))?;

    // style codes and fixed exemplar sets straight from the index
    let by_id: HashMap<u64, usize> = index
        .entries
        .iter()
        .enumerate()
        .map(|(i, e)| (e.window_id, i))
        .collect();
    let mut views = Vec::with_capacity(bundle.len());
    let mut exemplars = Vec::with_capacity(bundle.len());
    for w in bundle.windows_meta() {
        let ei = *by_id
            .get(&w.window_id)
            .ok_or_else(|| EgnError::Data(format!("window {} not in index", w.window_id)))?;
        let enc = index.entries[ei].encoding.clone();
        let set = index.query(
            &enc,
            w.patient_id,
            cfg.model.num_exemplars,
            cfg.retrieval.metric,
            Some(&train_patients),
        )?;
        views.push(enc);
        exemplars.push(set);
    }
    let _ = test_patients;
    Ok(FoldData { train_idx, val_idx, test_idx, targets, views, exemplars })
}

fn batch_loss<'a>(
    model: &'a EgnModel,
    data: &FoldData,
    bundle: &DatasetBundle,
    batch: &[usize],
) -> Result<(Ctx<'a>, crate::tape::VarId)> {
    let mut ctx = Ctx::new(&model.store);
    let mut rows = Vec::with_capacity(batch.len());
    let m = bundle.num_genes();
    let mut target = Vec::with_capacity(batch.len() * m);
    for &i in batch {
        let (ev, ex) = match model.variant {
            Variant::BackboneOnly => (None, None),
            Variant::WoEb => (Some(data.views[i].as_slice()), None),
            _ => (Some(data.views[i].as_slice()), Some(&data.exemplars[i])),
        };
        let y = model.forward_on(&mut ctx, &bundle.windows[i], ev, ex)?;
        rows.push(ctx.tape.reshape(y, vec![1, m])?);
        target.extend_from_slice(&data.targets[i]);
    }
    let yhat = ctx.tape.concat(0, &rows)?;
    let t = Tensor::new(vec![batch.len(), m], target)?;
    let loss = loss_total(&mut ctx, yhat, &t)?;
    Ok((ctx, loss))
}

fn predict(model: &EgnModel, data: &FoldData, bundle: &DatasetBundle, idx: &[usize]) -> Result<Vec<Vec<f64>>> {
    idx.iter()
        .map(|&i| {
            let (ev, ex) = match model.variant {
                Variant::BackboneOnly => (None, None),
                Variant::WoEb => (Some(data.views[i].as_slice()), None),
                _ => (Some(data.views[i].as_slice()), Some(&data.exemplars[i])),
            };
            Ok(model.forward(&bundle.windows[i], ev, ex)?.into_data())
        })
        .collect()
}

fn split_loss(model: &EgnModel, data: &FoldData, bundle: &DatasetBundle, idx: &[usize], batch_size: usize) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for chunk in idx.chunks(batch_size) {
        if chunk.len() < 2 {
            continue;
        }
        let (ctx, loss) = batch_loss(model, data, bundle, chunk)?;
        total += ctx.tape.value(loss).item() * chunk.len() as f64;
        n += chunk.len();
    }
    if n == 0 {
        return Err(EgnError::Contract("validation split has fewer than 2 windows".into()));
    }
    Ok(total / n as f64)
}

#[derive(Clone, Debug, Serialize)]
pub struct FoldOutcome {
    pub fold: usize,
    pub best_epoch: usize,
    pub report: MetricReport,
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainOutcome {
    pub variant: String,
    pub folds: Vec<FoldOutcome>,
    pub overall: MetricReport,
}

fn fold_seed(base: u64, fold: usize) -> u64 {
    base.wrapping_mul(6364136223846793005).wrapping_add(fold as u64 + 1)
}

/// Train one fold and evaluate the best-by-validation model on its test
/// patients. Returns the outcome plus (predictions, targets) for pooling.
fn train_fold(
    cfg: &RunConfig,
    bundle: &DatasetBundle,
    index: &ExemplarIndex,
    folds: &[(u64, usize)],
    fold: usize,
    loss_curve: &mut String,
) -> Result<(FoldOutcome, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let data = prepare_fold(cfg, bundle, index, folds, fold)?;
    let variant = Variant::parse(&cfg.variant)?;
    let mut model = EgnModel::new(cfg.model.clone(), variant, fold_seed(cfg.seed, fold))?;
    let mut opt = AdamW::new(cfg.train.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(fold_seed(cfg.seed, fold) ^ 0x5eed);
    let mut order = data.train_idx.clone();
    let mut best = (f64::INFINITY, 0usize, model.store.clone());
    for epoch in 0..cfg.train.epochs {
        let lr = cosine_lr(cfg.train.lr, epoch, cfg.train.epochs);
        order.shuffle(&mut rng);
        let mut train_loss = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(cfg.train.batch_size) {
            if chunk.len() < 2 {
                continue; // PCC term needs at least 2 rows
            }
            let (ctx, loss) = batch_loss(&model, &data, bundle, chunk)?;
            let lv = ctx.tape.value(loss).item();
            if !lv.is_finite() {
                return Err(EgnError::Nan(format!("training, fold {fold}, epoch {epoch}")));
            }
            train_loss += lv * chunk.len() as f64;
            seen += chunk.len();
            let grads = ctx.backward(loss)?;
            opt.step(&mut model.store, &grads, lr);
        }
        let train_loss = train_loss / seen.max(1) as f64;
        let val_loss = split_loss(&model, &data, bundle, &data.val_idx, cfg.train.batch_size)?;
        loss_curve.push_str(&format!("{fold},{epoch},{train_loss},{val_loss}\n"));
        if val_loss < best.0 {
            best = (val_loss, epoch, model.store.clone());
        }
    }
    model.store = best.2.clone();
    model.save(&model_path(cfg, fold))?;

    let preds = predict(&model, &data, bundle, &data.test_idx)?;
    let targets: Vec<Vec<f64>> = data.test_idx.iter().map(|&i| data.targets[i].clone()).collect();
    let report = evaluate(&preds, &targets)?;
    Ok((FoldOutcome { fold, best_epoch: best.1, report }, preds, targets))
}

fn folds_to_run(cfg: &RunConfig) -> std::ops::Range<usize> {
    0..cfg.train.eval_folds.unwrap_or(cfg.train.n_folds)
}

fn check_dims(cfg: &RunConfig, bundle: &DatasetBundle, index: &ExemplarIndex) -> Result<()> {
    if bundle.num_genes() != cfg.model.num_genes {
        return Err(EgnError::Config(format!(
            "bundle has {} genes, model.num_genes is {}",
            bundle.num_genes(),
            cfg.model.num_genes
        )));
    }
    if bundle.image_size != cfg.model.image_size {
        return Err(EgnError::Config(format!(
            "bundle windows are {}px, model.image_size is {}",
            bundle.image_size, cfg.model.image_size
        )));
    }
    if index.style_dim != cfg.model.style_dim {
        return Err(EgnError::Config(format!(
            "index style dim {} != model.style_dim {}",
            index.style_dim, cfg.model.style_dim
        )));
    }
    Ok(())
}

pub fn cmd_train(cfg: &RunConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let _lock = RunLock::acquire(&cfg.run_dir)?;
    let bundle = data::load_bundle(&cfg.data_dir)?;
    let index = ExemplarIndex::load(&index_path(cfg))?;
    check_dims(cfg, &bundle, &index)?;
    let folds = make_folds(&bundle, cfg.train.n_folds)?;
    let mut loss_curve = String::from("fold,epoch,train_loss,val_loss\n");
    let mut outcomes = Vec::new();
    let mut all_preds = Vec::new();
    let mut all_targets = Vec::new();
    for fold in folds_to_run(cfg) {
        let (outcome, preds, targets) =
            train_fold(cfg, &bundle, &index, &folds, fold, &mut loss_curve)?;
        outcomes.push(outcome);
        all_preds.extend(preds);
        all_targets.extend(targets);
    }
    fs::write(cfg.run_dir.join("loss_curve.csv"), loss_curve)?;
    let overall = evaluate(&all_preds, &all_targets)?;
    let outcome = TrainOutcome { variant: cfg.variant.clone(), folds: outcomes, overall };
    write_metrics(cfg, &outcome)?;
    Ok(outcome)
}

fn write_metrics(cfg: &RunConfig, outcome: &TrainOutcome) -> Result<()> {
    let json = serde_json::to_string_pretty(outcome)?;
    fs::write(cfg.run_dir.join("metrics.json"), json + "\n")?;
    let mut f = fs::File::create(cfg.run_dir.join("metrics.csv"))?;
    f.write_all(outcome.overall.to_csv().as_bytes())?;
    Ok(())
}

/// Re-derive test-fold predictions from saved checkpoints and rewrite the
/// metric files; verifies the persisted artifacts stand on their own.
pub fn cmd_eval(cfg: &RunConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let _lock = RunLock::acquire(&cfg.run_dir)?;
    let bundle = data::load_bundle(&cfg.data_dir)?;
    let index = ExemplarIndex::load(&index_path(cfg))?;
    check_dims(cfg, &bundle, &index)?;
    let folds = make_folds(&bundle, cfg.train.n_folds)?;
    let mut outcomes = Vec::new();
    let mut all_preds = Vec::new();
    let mut all_targets = Vec::new();
    for fold in folds_to_run(cfg) {
        let data = prepare_fold(cfg, &bundle, &index, &folds, fold)?;
        let model = EgnModel::load(&model_path(cfg, fold))?;
        if model.cfg != cfg.model {
            return Err(EgnError::Config(format!(
                "checkpoint {} was trained with a different model config",
                model_path(cfg, fold).display()
            )));
        }
        let preds = predict(&model, &data, &bundle, &data.test_idx)?;
        let targets: Vec<Vec<f64>> = data.test_idx.iter().map(|&i| data.targets[i].clone()).collect();
        let report = evaluate(&preds, &targets)?;
        outcomes.push(FoldOutcome { fold, best_epoch: 0, report });
        all_preds.extend(preds);
        all_targets.extend(targets);
    }
    let overall = evaluate(&all_preds, &all_targets)?;
    let outcome = TrainOutcome { variant: cfg.variant.clone(), folds: outcomes, overall };
    write_metrics(cfg, &outcome)?;
    Ok(outcome)
}

/// End-to-end finite-difference check of the model + loss at a toy size.
pub fn cmd_gradcheck(cfg: &RunConfig, max_coords: usize) -> Result<GradcheckReport> {
    let mut mc = cfg.model.clone();
    mc.image_size = 16;
    mc.patch_size = 8;
    mc.model_dim = 16;
    mc.ffn_dim = 32;
    mc.backbone_heads = 2;
    mc.depth = 2;
    mc.eb_heads = 2;
    mc.eb_head_dim = 4;
    mc.eb_frequency = 1;
    mc.num_exemplars = 2;
    mc.num_genes = 4;
    mc.style_dim = 8;
    gradcheck_model(&mc, Variant::parse(&cfg.variant)?, cfg.seed, max_coords)
}

/// Finite-difference check for a given model config/variant; batch of 3
/// windows through the full L_total objective.
pub fn gradcheck_model(
    mc: &crate::model::ModelConfig,
    variant: Variant,
    seed: u64,
    max_coords: usize,
) -> Result<GradcheckReport> {
    use rand::Rng;
    let model = EgnModel::new(mc.clone(), variant, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfd);
    let b = 3usize;
    let windows: Vec<Tensor> = (0..b)
        .map(|_| Tensor::uniform(&[3, mc.image_size, mc.image_size], 0.5, &mut rng))
        .collect();
    let views: Vec<Vec<f64>> = (0..b)
        .map(|_| (0..mc.style_dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    let exemplars: Vec<ExemplarSet> = (0..b)
        .map(|_| ExemplarSet {
            window_ids: (0..mc.num_exemplars as u64).collect(),
            patient_ids: vec![99; mc.num_exemplars],
            distances: vec![0.1; mc.num_exemplars],
            encodings: Tensor::uniform(&[mc.num_exemplars, mc.style_dim], 1.0, &mut rng),
            expressions: Tensor::uniform(&[mc.num_exemplars, mc.num_genes], 0.5, &mut rng),
        })
        .collect();
    let mut target = Vec::with_capacity(b * mc.num_genes);
    for _ in 0..b * mc.num_genes {
        target.push(rng.gen_range(0.0..1.0));
    }
    let target = Tensor::new(vec![b, mc.num_genes], target)?;

    let mut store = model.store.clone();
    let m = mc.num_genes;
    gradcheck(
        &mut store,
        |st, want_grads| {
            // forward_on reads parameters through the ctx, so the model's
            // own store is only a layout template here
            let mut ctx = Ctx::new(st);
            let mut rows = Vec::new();
            for i in 0..b {
                let (ev, ex) = match variant {
                    Variant::BackboneOnly => (None, None),
                    Variant::WoEb => (Some(views[i].as_slice()), None),
                    _ => (Some(views[i].as_slice()), Some(&exemplars[i])),
                };
                let y = model.forward_on(&mut ctx, &windows[i], ev, ex)?;
                rows.push(ctx.tape.reshape(y, vec![1, m])?);
            }
            let yhat = ctx.tape.concat(0, &rows)?;
            let loss = loss_total(&mut ctx, yhat, &target)?;
            let lv = ctx.tape.value(loss).item();
            if want_grads {
                let grads = ctx.backward(loss)?;
                Ok((lv, Some(grads)))
            } else {
                Ok((lv, None))
            }
        },
        1e-4,
        1e-8,
        max_coords,
        seed,
    )
}

/// Fan `jobs` out over at most EGN_THREADS worker threads (default: all
/// available cores). Results come back in job order.
pub fn parallel_map<T, R, F>(jobs: Vec<T>, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Sync,
{
    let cap = std::env::var("EGN_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1));
    let n = jobs.len();
    let workers = cap.min(n.max(1));
    let queue: Mutex<Vec<(usize, T)>> = Mutex::new(jobs.into_iter().enumerate().rev().collect());
    let results: Mutex<Vec<Option<R>>> = Mutex::new((0..n).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let job = queue.lock().expect("queue lock").pop();
                match job {
                    Some((i, t)) => {
                        let r = f(t);
                        results.lock().expect("results lock")[i] = Some(r);
                    }
                    None => break,
                }
            });
        }
    });
    results
        .into_inner()
        .expect("results lock")
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let lock = RunLock::acquire(dir.path()).unwrap();
        let err = RunLock::acquire(dir.path()).unwrap_err().to_string();
        assert!(err.contains("locked"), "{err}");
        drop(lock);
        RunLock::acquire(dir.path()).unwrap();
    }

    #[test]
    fn parallel_map_preserves_order() {
        std::env::set_var("EGN_THREADS", "2");
        let out = parallel_map((0..20).collect(), |x: i32| x * x);
        std::env::remove_var("EGN_THREADS");
        assert_eq!(out, (0..20).map(|x| x * x).collect::<Vec<_>>());
    }

    #[test]
    fn fold_seed_is_injective_over_small_ranges() {
        let mut seen = std::collections::HashSet::new();
        for seed in 0..5u64 {
            for fold in 0..5usize {
                assert!(seen.insert(fold_seed(seed, fold)));
            }
        }
    }
}
