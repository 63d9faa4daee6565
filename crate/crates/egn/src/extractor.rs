//! Global-view extractor: a conv encoder producing a style-code vector,
//! trained jointly with a style-modulated decoder under an L1
//! reconstruction objective (optionally with an adversarial term).

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::DatasetBundle;
use crate::error::{EgnError, Result};
use crate::nn::{AdamW, Ctx, Linear, ParamId, ParamStore};
use crate::tape::VarId;
use crate::tensor::Tensor;

pub const EGNX_MAGIC: &[u8; 4] = b"EGNX";

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractorConfig {
    /// Style-code dimension D.
    pub style_dim: usize,
    /// Square input resolution; must be divisible by 16.
    pub image_size: usize,
    /// Channel widths of the two stride-2 encoder stages (a pointwise
    /// color stage followed by a 3x3 stage).
    pub enc_channels: [usize; 2],
    /// Channel width of the learned 4x4 seed map; halved per decoder stage.
    pub dec_base_channels: usize,
    pub adversarial: bool,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        ExtractorConfig {
            style_dim: 64,
            image_size: 32,
            enc_channels: [32, 32],
            dec_base_channels: 64,
            adversarial: false,
        }
    }
}

impl ExtractorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 16 || self.image_size % 16 != 0 {
            return Err(EgnError::Config(format!(
                "extractor image_size {} must be a positive multiple of 16",
                self.image_size
            )));
        }
        if self.style_dim == 0 {
            return Err(EgnError::Config("style_dim must be positive".into()));
        }
        Ok(())
    }

    fn dec_stages(&self) -> usize {
        // seed map is 4x4; each stage doubles resolution
        (self.image_size / 4).trailing_zeros() as usize
    }
}

/// Per-window style code plus provenance.
#[derive(Clone, Debug)]
pub struct GlobalView {
    pub vector: Vec<f64>,
    pub source_window_id: u64,
    pub patient_id: u64,
}

struct ConvLayer {
    w: ParamId,
    b: ParamId,
}

fn conv_layer(store: &mut ParamStore, rng: &mut impl Rng, name: &str, co: usize, ci: usize, k: usize) -> ConvLayer {
    let bound = 1.0 / ((ci * k * k) as f64).sqrt();
    ConvLayer {
        w: store.add(format!("{name}.w"), Tensor::uniform(&[co, ci, k, k], bound, rng)),
        b: store.add(format!("{name}.b"), Tensor::uniform(&[co], bound, rng)),
    }
}

pub struct Extractor {
    pub cfg: ExtractorConfig,
    pub store: ParamStore,
    enc_convs: Vec<ConvLayer>,
    enc_fc: Linear,
    dec_seed: ParamId,
    dec_convs: Vec<ConvLayer>,
    dec_style: Vec<Linear>, // style vector -> 2 * C_out per stage
    dec_final: ConvLayer,
    disc_convs: Vec<ConvLayer>,
    disc_fc: Option<Linear>,
    disc_params: Vec<ParamId>,
}

impl Extractor {
    pub fn new(cfg: ExtractorConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut enc_convs = Vec::new();
        let mut ci = 3;
        for (i, &co) in cfg.enc_channels.iter().enumerate() {
            // pointwise first stage: per-pixel color features whose pooled
            // means act as a soft color histogram in the style code
            let k = if i == 0 { 1 } else { 3 };
            enc_convs.push(conv_layer(&mut store, &mut rng, &format!("enc.conv{i}"), co, ci, k));
            ci = co;
        }
        let spatial = cfg.image_size / 16;
        // the style head sees spatially pooled channel statistics from both
        // stages, so the code describes how much of each content appears
        // (pointwise stage: color masses, 3x3 stage: local textures), not
        // where it appears
        let pooled_dim: usize = cfg.enc_channels.iter().sum();
        let enc_fc = Linear::new(&mut store, &mut rng, "enc.fc", pooled_dim, cfg.style_dim);

        let stages = cfg.dec_stages();
        let dec_seed = store.add(
            "dec.seed",
            Tensor::uniform(&[cfg.dec_base_channels, 4, 4], 0.5, &mut rng),
        );
        let mut dec_convs = Vec::new();
        let mut dec_style = Vec::new();
        let mut ch = cfg.dec_base_channels;
        for i in 0..stages {
            let co = (ch / 2).max(8);
            dec_convs.push(conv_layer(&mut store, &mut rng, &format!("dec.conv{i}"), co, ch, 3));
            dec_style.push(Linear::new(&mut store, &mut rng, &format!("dec.style{i}"), cfg.style_dim, 2 * co));
            ch = co;
        }
        let dec_final = conv_layer(&mut store, &mut rng, "dec.final", 3, ch, 3);

        let mut disc_convs = Vec::new();
        let mut disc_fc = None;
        let mut disc_params = Vec::new();
        if cfg.adversarial {
            let mut ci = 3;
            for (i, co) in [8usize, 16, 32, 32].into_iter().enumerate() {
                let layer = conv_layer(&mut store, &mut rng, &format!("disc.conv{i}"), co, ci, 3);
                disc_params.push(layer.w);
                disc_params.push(layer.b);
                disc_convs.push(layer);
                ci = co;
            }
            let fc = Linear::new(&mut store, &mut rng, "disc.fc", 32 * spatial * spatial, 1);
            disc_params.push(fc.w);
            disc_params.push(fc.b);
            disc_fc = Some(fc);
        }

        Ok(Extractor {
            cfg,
            store,
            enc_convs,
            enc_fc,
            dec_seed,
            dec_convs,
            dec_style,
            dec_final,
            disc_convs,
            disc_fc,
            disc_params,
        })
    }

    fn check_window(&self, window: &Tensor) -> Result<()> {
        let s = self.cfg.image_size;
        if window.shape() != [3, s, s] {
            return Err(EgnError::shape(
                "encode",
                format!("expected window [3, {s}, {s}], got {:?}", window.shape()),
            ));
        }
        Ok(())
    }

    pub fn encode_on(&self, ctx: &mut Ctx, x: VarId) -> Result<VarId> {
        let mut h = x;
        let mut pooled = Vec::with_capacity(self.enc_convs.len());
        for (i, conv) in self.enc_convs.iter().enumerate() {
            let w = ctx.param(conv.w);
            let b = ctx.param(conv.b);
            let pad = if i == 0 { 0 } else { 1 };
            h = ctx.tape.conv2d(h, w, b, 2, pad)?;
            h = ctx.tape.relu(h);
            // global average pool: [C, H, W] -> [C]
            let shape = ctx.tape.value(h).shape().to_vec();
            let (c, hw) = (shape[0], shape[1] * shape[2]);
            let flat = ctx.tape.reshape(h, vec![c, hw])?;
            let t = ctx.tape.transpose(flat)?;
            pooled.push(ctx.tape.mean_axis(t, 0)?);
        }
        let stats = ctx.tape.concat(0, &pooled)?;
        self.enc_fc.forward(ctx, stats)
    }

    pub fn decode_on(&self, ctx: &mut Ctx, style: VarId) -> Result<VarId> {
        if ctx.tape.value(style).numel() != self.cfg.style_dim {
            return Err(EgnError::shape(
                "decode",
                format!(
                    "style vector has {} entries, expected {}",
                    ctx.tape.value(style).numel(),
                    self.cfg.style_dim
                ),
            ));
        }
        let mut h = ctx.param(self.dec_seed);
        for (conv, style_lin) in self.dec_convs.iter().zip(&self.dec_style) {
            h = ctx.tape.upsample2x(h)?;
            let w = ctx.param(conv.w);
            let b = ctx.param(conv.b);
            h = ctx.tape.conv2d(h, w, b, 1, 1)?;
            let mods = style_lin.forward(ctx, style)?;
            let co = ctx.tape.value(h).shape()[0];
            let scale = ctx.tape.slice(mods, 0, 0, co)?;
            let shift = ctx.tape.slice(mods, 0, co, co)?;
            h = ctx.tape.channel_affine(h, scale, shift)?;
            h = ctx.tape.relu(h);
        }
        let w = ctx.param(self.dec_final.w);
        let b = ctx.param(self.dec_final.b);
        let out = ctx.tape.conv2d(h, w, b, 1, 1)?;
        Ok(ctx.tape.sigmoid(out))
    }

    fn discriminate_on(&self, ctx: &mut Ctx, x: VarId) -> Result<VarId> {
        let fc = self.disc_fc.as_ref().ok_or_else(|| {
            EgnError::Contract("adversarial term requested but discriminator is disabled".into())
        })?;
        let mut h = x;
        for conv in &self.disc_convs {
            let w = ctx.param(conv.w);
            let b = ctx.param(conv.b);
            h = ctx.tape.conv2d(h, w, b, 2, 1)?;
            h = ctx.tape.relu(h);
        }
        let n = ctx.tape.value(h).numel();
        let flat = ctx.tape.reshape(h, vec![n])?;
        fc.forward(ctx, flat)
    }

    /// Style code of one window. Deterministic.
    pub fn encode(&self, window: &Tensor, meta_window: u64, meta_patient: u64) -> Result<GlobalView> {
        self.check_window(window)?;
        let mut ctx = Ctx::new(&self.store);
        let x = ctx.input(window.clone());
        let e = self.encode_on(&mut ctx, x)?;
        Ok(GlobalView {
            vector: ctx.tape.value(e).data().to_vec(),
            source_window_id: meta_window,
            patient_id: meta_patient,
        })
    }

    /// Reconstruction from a style code; output in [0, 1] with shape
    /// [3, image_size, image_size].
    pub fn decode(&self, view: &[f64]) -> Result<Tensor> {
        let mut ctx = Ctx::new(&self.store);
        let style = ctx.input(Tensor::from_vec(view.to_vec()));
        let out = self.decode_on(&mut ctx, style)?;
        Ok(ctx.tape.value(out).clone())
    }

    /// Post-modulation activations of every decoder stage (used to probe
    /// the per-channel style modulation).
    pub fn decode_stage_affines(&self, view: &[f64]) -> Result<Vec<Tensor>> {
        let mut ctx = Ctx::new(&self.store);
        let style = ctx.input(Tensor::from_vec(view.to_vec()));
        let mut h = ctx.param(self.dec_seed);
        let mut affines = Vec::new();
        for (conv, style_lin) in self.dec_convs.iter().zip(&self.dec_style) {
            h = ctx.tape.upsample2x(h)?;
            let w = ctx.param(conv.w);
            let b = ctx.param(conv.b);
            h = ctx.tape.conv2d(h, w, b, 1, 1)?;
            let mods = style_lin.forward(&mut ctx, style)?;
            let co = ctx.tape.value(h).shape()[0];
            let scale = ctx.tape.slice(mods, 0, 0, co)?;
            let shift = ctx.tape.slice(mods, 0, co, co)?;
            h = ctx.tape.channel_affine(h, scale, shift)?;
            affines.push(ctx.tape.value(h).clone());
            h = ctx.tape.relu(h);
        }
        Ok(affines)
    }

    pub fn style_modulation_param(&self, stage: usize) -> Linear {
        self.dec_style[stage]
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let cfg = serde_json::to_string(&self.cfg)?;
        checkpoint::save_checkpoint(path, EGNX_MAGIC, &cfg, &self.store)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (cfg_json, tensors) = checkpoint::load_checkpoint(path, EGNX_MAGIC)?;
        let cfg: ExtractorConfig = serde_json::from_str(&cfg_json)?;
        let mut ex = Extractor::new(cfg, 0)?;
        checkpoint::restore_params(&mut ex.store, &tensors)?;
        Ok(ex)
    }
}

/// Mean absolute deviation between two same-shaped images.
pub fn reconstruction_loss(x: &Tensor, xhat: &Tensor) -> Result<f64> {
    if x.shape() != xhat.shape() {
        return Err(EgnError::shape(
            "reconstruction_loss",
            format!("{:?} vs {:?}", x.shape(), xhat.shape()),
        ));
    }
    let n = x.numel() as f64;
    Ok(x.data().iter().zip(xhat.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / n)
}

/// Generator and discriminator softplus terms for one (real, reconstructed)
/// pair: the discriminator minimizes softplus(-F(x)) + softplus(F(xhat)),
/// the generator minimizes softplus(-F(xhat)).
pub fn adversarial_losses(extractor: &Extractor, x: &Tensor, xhat: &Tensor) -> Result<(f64, f64)> {
    let mut ctx = Ctx::new(&extractor.store);
    let xv = ctx.input(x.clone());
    let xhv = ctx.input(xhat.clone());
    let f_real = extractor.discriminate_on(&mut ctx, xv)?;
    let f_fake = extractor.discriminate_on(&mut ctx, xhv)?;
    let neg_real = ctx.tape.neg(f_real);
    let sp_neg_real = ctx.tape.softplus(neg_real);
    let sp_fake = ctx.tape.softplus(f_fake);
    let neg_fake = ctx.tape.neg(f_fake);
    let sp_neg_fake = ctx.tape.softplus(neg_fake);
    let gen = ctx.tape.value(sp_neg_fake).item();
    let disc = ctx.tape.value(sp_neg_real).item() + ctx.tape.value(sp_fake).item();
    if !gen.is_finite() || !disc.is_finite() {
        return Err(EgnError::Nan("adversarial_losses".into()));
    }
    Ok((gen, disc))
}

#[derive(Clone, Debug, Serialize)]
pub struct ExtractorLogRow {
    pub epoch: usize,
    pub recon_l1: f64,
    pub adv_gen: Option<f64>,
    pub adv_disc: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractorTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub adversarial_weight: f64,
    pub seed: u64,
}

impl Default for ExtractorTrainConfig {
    fn default() -> Self {
        ExtractorTrainConfig {
            epochs: 20,
            batch_size: 16,
            lr: 1e-3,
            weight_decay: 1e-4,
            adversarial_weight: 0.1,
            seed: 0,
        }
    }
}

/// Joint encoder/decoder training by image reconstruction.
pub fn train_extractor(
    bundle: &DatasetBundle,
    model_cfg: ExtractorConfig,
    train_cfg: &ExtractorTrainConfig,
) -> Result<(Extractor, Vec<ExtractorLogRow>)> {
    if bundle.is_empty() {
        return Err(EgnError::Data("cannot train the extractor on an empty bundle".into()));
    }
    if bundle.image_size != model_cfg.image_size {
        return Err(EgnError::shape(
            "train_extractor",
            format!("bundle windows are {0}x{0}, extractor expects {1}x{1}", bundle.image_size, model_cfg.image_size),
        ));
    }
    let adversarial = model_cfg.adversarial;
    let mut ex = Extractor::new(model_cfg, train_cfg.seed)?;
    let mut opt = AdamW::new(train_cfg.weight_decay);
    let mut disc_opt = AdamW::new(train_cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.seed.wrapping_add(1));
    let mut log = Vec::new();
    let n = bundle.len();
    let mut order: Vec<usize> = (0..n).collect();
    let is_disc: std::collections::HashSet<ParamId> = ex.disc_params.iter().copied().collect();

    for epoch in 0..train_cfg.epochs {
        order.shuffle(&mut rng);
        let lr = crate::nn::cosine_lr(train_cfg.lr, epoch, train_cfg.epochs);
        let mut epoch_l1 = 0.0;
        let mut epoch_gen = 0.0;
        let mut epoch_disc = 0.0;
        let mut batches = 0.0f64;
        for (bi, chunk) in order.chunks(train_cfg.batch_size).enumerate() {
            let mut ctx = Ctx::new(&ex.store);
            let mut sample_losses = Vec::new();
            let mut recons: Vec<Tensor> = Vec::new();
            for &i in chunk {
                let x = ctx.input(bundle.windows[i].clone());
                let e = ex.encode_on(&mut ctx, x)?;
                let xhat = ex.decode_on(&mut ctx, e)?;
                let diff = ctx.tape.sub(x, xhat)?;
                let ad = ctx.tape.abs(diff);
                let l1 = ctx.tape.mean_all(ad);
                if adversarial {
                    recons.push(ctx.tape.value(xhat).clone());
                    let f_fake = ex.discriminate_on(&mut ctx, xhat)?;
                    let neg = ctx.tape.neg(f_fake);
                    let sp = ctx.tape.softplus(neg);
                    let spm = ctx.tape.mean_all(sp);
                    let weighted = ctx.tape.scale(spm, train_cfg.adversarial_weight);
                    let total = ctx.tape.add(l1, weighted)?;
                    sample_losses.push(total);
                    epoch_gen += ctx.tape.value(spm).item();
                } else {
                    sample_losses.push(l1);
                }
                epoch_l1 += ctx.tape.value(*sample_losses.last().expect("pushed")).item();
            }
            let stacked = ctx.tape.concat(0, &sample_losses)?;
            let loss = ctx.tape.mean_all(stacked);
            let loss_val = ctx.tape.value(loss).item();
            if !loss_val.is_finite() {
                return Err(EgnError::Nan(format!("extractor training, epoch {epoch}, batch {bi}")));
            }
            let mut grads = ctx.backward(loss)?;
            grads.retain(|id, _| !is_disc.contains(id));
            opt.step(&mut ex.store, &grads, lr);
            batches += 1.0;

            if adversarial {
                let mut dctx = Ctx::new(&ex.store);
                let mut terms = Vec::new();
                for (&i, xhat) in chunk.iter().zip(&recons) {
                    let xv = dctx.input(bundle.windows[i].clone());
                    let fv = dctx.input(xhat.clone());
                    let f_real = ex.discriminate_on(&mut dctx, xv)?;
                    let f_fake = ex.discriminate_on(&mut dctx, fv)?;
                    let nr = dctx.tape.neg(f_real);
                    let a = dctx.tape.softplus(nr);
                    let b = dctx.tape.softplus(f_fake);
                    let s = dctx.tape.add(a, b)?;
                    terms.push(s);
                }
                let stacked = dctx.tape.concat(0, &terms)?;
                let dloss = dctx.tape.mean_all(stacked);
                let dval = dctx.tape.value(dloss).item();
                if !dval.is_finite() {
                    return Err(EgnError::Nan(format!("discriminator training, epoch {epoch}, batch {bi}")));
                }
                epoch_disc += dval;
                let mut dgrads = dctx.backward(dloss)?;
                dgrads.retain(|id, _| is_disc.contains(id));
                disc_opt.step(&mut ex.store, &dgrads, lr);
            }
        }
        log.push(ExtractorLogRow {
            epoch,
            recon_l1: epoch_l1 / n as f64,
            adv_gen: adversarial.then_some(epoch_gen / n as f64),
            adv_disc: adversarial.then_some(epoch_disc / batches.max(1.0)),
        });
    }
    Ok((ex, log))
}

/// Encode every window of a bundle in manifest order.
pub fn encode_bundle(ex: &Extractor, bundle: &DatasetBundle) -> Result<Vec<GlobalView>> {
    bundle
        .windows_meta()
        .iter()
        .zip(&bundle.windows)
        .map(|(m, w)| ex.encode(w, m.window_id, m.patient_id))
        .collect()
}
