//! Integration tests for the command pipeline: artifact handoff between
//! commands, evaluation from persisted checkpoints, and the extractor's
//! learning signal.

use std::path::Path;

use egn::config::RunConfig;
use egn::data;
use egn::extractor::{reconstruction_loss, train_extractor, ExtractorTrainConfig};
use egn::tensor::Tensor;
use egn::train;
use egn::EgnError;

fn tiny_cfg(base: &Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.run_dir = base.join("run");
    cfg.data_dir = base.join("data");
    cfg.seed = 3;
    cfg.generate.n_patients = 4;
    cfg.generate.windows_per_patient = 12;
    cfg.generate.num_genes = 8;
    cfg.model.num_genes = 8;
    cfg.extractor_train.epochs = 2;
    cfg.train.epochs = 2;
    cfg.train.batch_size = 4;
    cfg.train.n_folds = 2;
    cfg
}

#[test]
fn missing_artifacts_name_the_producing_command() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_cfg(dir.path());

    // no bundle yet: train-extractor should point at gen-data
    let err = train::cmd_train_extractor(&cfg).unwrap_err().to_string();
    assert!(err.contains("egn gen-data"), "{err}");

    // bundle but no extractor: build-index should point at train-extractor
    train::cmd_gen_data(&cfg).unwrap();
    let err = train::cmd_build_index(&cfg).unwrap_err().to_string();
    assert!(err.contains("egn train-extractor"), "{err}");

    // extractor but no index: train should point at build-index
    train::cmd_train_extractor(&cfg).unwrap();
    let err = train::cmd_train(&cfg).unwrap_err().to_string();
    assert!(err.contains("egn build-index"), "{err}");

    // everything but model checkpoints: eval should point at train
    train::cmd_build_index(&cfg).unwrap();
    let err = train::cmd_eval(&cfg).unwrap_err().to_string();
    assert!(err.contains("egn train"), "{err}");
}

#[test]
fn eval_reproduces_training_metrics_from_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_cfg(dir.path());
    train::cmd_gen_data(&cfg).unwrap();
    train::cmd_train_extractor(&cfg).unwrap();
    train::cmd_build_index(&cfg).unwrap();
    let trained = train::cmd_train(&cfg).unwrap();
    let evaled = train::cmd_eval(&cfg).unwrap();

    assert_eq!(trained.folds.len(), evaled.folds.len());
    assert_eq!(trained.overall.mse.to_bits(), evaled.overall.mse.to_bits());
    assert_eq!(trained.overall.mae.to_bits(), evaled.overall.mae.to_bits());
    assert_eq!(
        trained.overall.pcc_at_m.to_bits(),
        evaled.overall.pcc_at_m.to_bits()
    );
    for (a, b) in trained.folds.iter().zip(&evaled.folds) {
        assert_eq!(a.report.pcc_at_m.to_bits(), b.report.pcc_at_m.to_bits());
    }
}

#[test]
fn dimension_mismatches_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_cfg(dir.path());
    train::cmd_gen_data(&cfg).unwrap();
    train::cmd_train_extractor(&cfg).unwrap();
    train::cmd_build_index(&cfg).unwrap();
    cfg.model.num_genes = 16;
    cfg.generate.num_genes = 16;
    let err = train::cmd_train(&cfg).unwrap_err();
    assert!(matches!(err, EgnError::Config(_)), "{err}");
    assert!(err.to_string().contains("genes"), "{err}");
}

#[test]
fn trained_extractor_beats_the_mean_image_baseline() {
    let mut gen = egn::data::GenerateConfig::default();
    gen.seed = 11;
    gen.n_patients = 3;
    gen.windows_per_patient = 10;
    gen.num_genes = 8;
    let bundle = data::generate(&gen).unwrap();

    let mut tc = ExtractorTrainConfig::default();
    tc.epochs = 20;
    tc.batch_size = 8;
    tc.seed = 11;
    let cfg = egn::extractor::ExtractorConfig::default();
    let (ex, log) = train_extractor(&bundle, cfg, &tc).unwrap();
    assert_eq!(log.len(), tc.epochs);
    // loss log should move in the right direction overall
    assert!(log.last().unwrap().recon_l1 <= log.first().unwrap().recon_l1);

    // baseline: predict the per-pixel mean image for every window
    let n = bundle.windows.len() as f64;
    let mut mean = Tensor::zeros(bundle.windows[0].shape());
    for w in &bundle.windows {
        for (m, v) in mean.data_mut().iter_mut().zip(w.data()) {
            *m += v / n;
        }
    }
    let mut baseline = 0.0;
    let mut trained = 0.0;
    for (i, w) in bundle.windows.iter().enumerate() {
        baseline += reconstruction_loss(w, &mean).unwrap();
        let meta = bundle.windows_meta()[i];
        let view = ex.encode(w, meta.window_id, meta.patient_id).unwrap();
        let recon = ex.decode(&view.vector).unwrap();
        trained += reconstruction_loss(w, &recon).unwrap();
    }
    assert!(
        trained < baseline,
        "trained recon L1 {trained} should beat mean-image baseline {baseline}"
    );
}
