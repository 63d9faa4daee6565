//! The prediction network: projector, ViT-style backbone, interleaved
//! exemplar-bridging (EB) blocks, and an attention-pooled head.
//!
//! Ablation variants are separate parameter layouts over the same naming
//! scheme, so weights shared between variants can be copied by name.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{EgnError, Result};
use crate::index::ExemplarSet;
use crate::nn::{check_finite, Ctx, Linear, LayerNorm, Mlp2, ParamStore};
use crate::tape::VarId;
use crate::tensor::Tensor;

pub const EGNM_MAGIC: &[u8; 4] = b"EGNM";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    BackboneOnly,
    WoEb,
    WoProjector,
}

impl Variant {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "full" => Ok(Variant::Full),
            "backbone_only" => Ok(Variant::BackboneOnly),
            "wo_eb" => Ok(Variant::WoEb),
            "wo_projector" => Ok(Variant::WoProjector),
            other => Err(EgnError::Config(format!(
                "unknown model variant `{other}` (expected full, backbone_only, wo_eb, or wo_projector)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::BackboneOnly => "backbone_only",
            Variant::WoEb => "wo_eb",
            Variant::WoProjector => "wo_projector",
        }
    }

    fn has_projector(&self) -> bool {
        !matches!(self, Variant::BackboneOnly)
    }

    fn has_eb(&self) -> bool {
        matches!(self, Variant::Full | Variant::WoProjector)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub model_dim: usize,
    pub ffn_dim: usize,
    pub backbone_heads: usize,
    pub depth: usize,
    pub eb_heads: usize,
    pub eb_head_dim: usize,
    pub eb_frequency: usize,
    pub num_exemplars: usize,
    pub num_genes: usize,
    pub style_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::desk()
    }
}

impl ModelConfig {
    /// Small configuration suitable for CPU experiments.
    pub fn desk() -> Self {
        ModelConfig {
            image_size: 32,
            patch_size: 8,
            model_dim: 64,
            ffn_dim: 256,
            backbone_heads: 4,
            depth: 4,
            eb_heads: 4,
            eb_head_dim: 16,
            eb_frequency: 2,
            num_exemplars: 4,
            num_genes: 16,
            style_dim: 64,
        }
    }

    /// Published full-scale configuration (not trainable at desk scale;
    /// kept for dimension arithmetic).
    pub fn paper() -> Self {
        ModelConfig {
            image_size: 1024,
            patch_size: 32,
            model_dim: 1024,
            ffn_dim: 4096,
            backbone_heads: 16,
            depth: 8,
            eb_heads: 8,
            eb_head_dim: 64,
            eb_frequency: 2,
            num_exemplars: 9,
            num_genes: 250,
            style_dim: 256,
        }
    }

    pub fn num_patches(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        for (name, v) in [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("model_dim", self.model_dim),
            ("ffn_dim", self.ffn_dim),
            ("backbone_heads", self.backbone_heads),
            ("depth", self.depth),
            ("eb_heads", self.eb_heads),
            ("eb_head_dim", self.eb_head_dim),
            ("eb_frequency", self.eb_frequency),
            ("num_exemplars", self.num_exemplars),
            ("num_genes", self.num_genes),
            ("style_dim", self.style_dim),
        ] {
            if v == 0 {
                errs.push(format!("{name} must be positive"));
            }
        }
        if self.patch_size > 0 && self.image_size % self.patch_size != 0 {
            errs.push(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.backbone_heads > 0 && self.model_dim % self.backbone_heads != 0 {
            errs.push(format!(
                "model_dim {} not divisible by backbone_heads {}",
                self.model_dim, self.backbone_heads
            ));
        }
        if self.eb_frequency > self.depth {
            errs.push(format!(
                "eb_frequency {} exceeds depth {}",
                self.eb_frequency, self.depth
            ));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(EgnError::Config(errs.join("; ")))
        }
    }
}

struct Projector {
    /// Two-layer trunk on [e; y] with the query's y slot zero-padded, so
    /// the query and exemplar paths share the same first two layers.
    trunk: Mlp2,
    /// Absent in the w/o-EB variant, which only projects the query.
    r_extra: Option<Linear>,
    s_mlp: Option<Mlp2>,
}

struct LinearProjector {
    h: Linear,
    r: Linear,
    s: Linear,
}

struct Block {
    ln1: LayerNorm,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    ln2: LayerNorm,
    ffn: Mlp2,
}

struct EbBlock {
    s_lin: Linear,
    m_mlp: Mlp2,
    gate_lin: Linear,
    o_lin: Linear,
    z_out: Linear,
    h_out: Linear,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    config: ModelConfig,
    variant: Variant,
}

pub struct EgnModel {
    pub cfg: ModelConfig,
    pub variant: Variant,
    pub store: ParamStore,
    projector: Option<Projector>,
    linear_projector: Option<LinearProjector>,
    embed: Linear,
    pos: crate::nn::ParamId,
    blocks: Vec<Block>,
    ebs: Vec<EbBlock>,
    att_q: crate::nn::ParamId,
    head: Linear,
}

impl EgnModel {
    pub fn new(cfg: ModelConfig, variant: Variant, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let dm = cfg.model_dim;
        let (d, m) = (cfg.style_dim, cfg.num_genes);
        let l = cfg.num_patches();

        let mut projector = None;
        let mut linear_projector = None;
        match variant {
            Variant::Full | Variant::WoEb => {
                // the trunk keeps its name in w/o-EB so weights stay
                // copyable from the full model
                let trunk = Mlp2::new(&mut store, &mut rng, "proj.trunk", d + m, dm, dm);
                let exemplar_path = variant == Variant::Full;
                projector = Some(Projector {
                    trunk,
                    r_extra: exemplar_path
                        .then(|| Linear::new(&mut store, &mut rng, "proj.r_extra", dm, dm)),
                    s_mlp: exemplar_path
                        .then(|| Mlp2::new(&mut store, &mut rng, "proj.s", m, dm, dm)),
                });
            }
            Variant::WoProjector => {
                linear_projector = Some(LinearProjector {
                    h: Linear::new(&mut store, &mut rng, "linproj.h", d + m, dm),
                    r: Linear::new(&mut store, &mut rng, "linproj.r", d + m, dm),
                    s: Linear::new(&mut store, &mut rng, "linproj.s", m, dm),
                });
            }
            Variant::BackboneOnly => {}
        }

        let patch_dim = 3 * cfg.patch_size * cfg.patch_size;
        let embed = Linear::new(&mut store, &mut rng, "embed", patch_dim, dm);
        let pos = store.add("pos", Tensor::uniform(&[l, dm], 0.02, &mut rng));

        let mut blocks = Vec::new();
        for t in 0..cfg.depth {
            blocks.push(Block {
                ln1: LayerNorm::new(&mut store, &format!("block{t}.ln1"), dm),
                wq: Linear::new(&mut store, &mut rng, &format!("block{t}.wq"), dm, dm),
                wk: Linear::new(&mut store, &mut rng, &format!("block{t}.wk"), dm, dm),
                wv: Linear::new(&mut store, &mut rng, &format!("block{t}.wv"), dm, dm),
                wo: Linear::new(&mut store, &mut rng, &format!("block{t}.wo"), dm, dm),
                ln2: LayerNorm::new(&mut store, &format!("block{t}.ln2"), dm),
                ffn: Mlp2::new(&mut store, &mut rng, &format!("block{t}.ffn"), dm, cfg.ffn_dim, dm),
            });
        }

        let mut ebs = Vec::new();
        if variant.has_eb() {
            let n_eb = cfg.depth / cfg.eb_frequency;
            let gd = cfg.eb_heads * cfg.eb_head_dim;
            for n in 0..n_eb {
                ebs.push(EbBlock {
                    s_lin: Linear::new(&mut store, &mut rng, &format!("eb{n}.s"), dm, dm),
                    m_mlp: Mlp2::new(&mut store, &mut rng, &format!("eb{n}.m"), 2 * dm, 2 * dm, 2 * dm),
                    gate_lin: Linear::new(&mut store, &mut rng, &format!("eb{n}.gate"), dm, cfg.eb_heads * l),
                    o_lin: Linear::new(&mut store, &mut rng, &format!("eb{n}.o"), dm, 2 * gd),
                    z_out: Linear::new(&mut store, &mut rng, &format!("eb{n}.z_out"), gd, dm),
                    h_out: Linear::new(&mut store, &mut rng, &format!("eb{n}.h_out"), gd, dm),
                });
            }
        }

        let att_q = store.add("attpool.q", Tensor::uniform(&[dm], 1.0 / (dm as f64).sqrt(), &mut rng));
        let head_in = if variant.has_projector() { 2 * dm } else { dm };
        let head = Linear::new(&mut store, &mut rng, "head", head_in, cfg.num_genes);

        Ok(EgnModel {
            cfg,
            variant,
            store,
            projector,
            linear_projector,
            embed,
            pos,
            blocks,
            ebs,
            att_q,
            head,
        })
    }

    fn check_exemplars(&self, ex: &ExemplarSet) -> Result<()> {
        let k = self.cfg.num_exemplars;
        if ex.encodings.shape() != [k, self.cfg.style_dim] {
            return Err(EgnError::shape(
                "forward",
                format!(
                    "exemplar encodings {:?}, expected [{k}, {}]",
                    ex.encodings.shape(),
                    self.cfg.style_dim
                ),
            ));
        }
        if ex.expressions.shape() != [k, self.cfg.num_genes] {
            return Err(EgnError::shape(
                "forward",
                format!(
                    "exemplar expressions {:?}, expected [{k}, {}]",
                    ex.expressions.shape(),
                    self.cfg.num_genes
                ),
            ));
        }
        Ok(())
    }

    /// State at t=0: (h0, R0 [k x D_m], S0 [k x D_m]).
    pub fn project_inputs_on(
        &self,
        ctx: &mut Ctx,
        e: VarId,
        ex_enc: VarId,
        ex_expr: VarId,
    ) -> Result<(VarId, VarId, VarId)> {
        if let Some(p) = &self.projector {
            let (r_extra, s_mlp) = match (&p.r_extra, &p.s_mlp) {
                (Some(r), Some(s)) => (r, s),
                _ => {
                    return Err(EgnError::Contract(format!(
                        "variant {} does not project exemplars",
                        self.variant.as_str()
                    )))
                }
            };
            let pad = ctx.input(Tensor::zeros(&[self.cfg.num_genes]));
            let he_in = ctx.tape.concat(0, &[e, pad])?;
            let h = p.trunk.forward(ctx, he_in)?;
            let r_in = ctx.tape.concat(1, &[ex_enc, ex_expr])?;
            let r_mid = p.trunk.forward(ctx, r_in)?;
            let r = r_extra.forward(ctx, r_mid)?;
            let s = s_mlp.forward(ctx, ex_expr)?;
            Ok((h, r, s))
        } else if let Some(p) = &self.linear_projector {
            let pad = ctx.input(Tensor::zeros(&[self.cfg.num_genes]));
            let he_in = ctx.tape.concat(0, &[e, pad])?;
            let h = p.h.forward(ctx, he_in)?;
            let r_in = ctx.tape.concat(1, &[ex_enc, ex_expr])?;
            let r = p.r.forward(ctx, r_in)?;
            let s = p.s.forward(ctx, ex_expr)?;
            Ok((h, r, s))
        } else {
            Err(EgnError::Contract(format!(
                "variant {} has no projector",
                self.variant.as_str()
            )))
        }
    }

    pub fn patch_embed_on(&self, ctx: &mut Ctx, window: VarId) -> Result<VarId> {
        let patches = ctx.tape.im2patches(window, self.cfg.patch_size)?;
        let z = self.embed.forward(ctx, patches)?;
        let pos = ctx.param(self.pos);
        ctx.tape.add(z, pos)
    }

    pub fn transformer_block_on(&self, ctx: &mut Ctx, t: usize, z: VarId) -> Result<VarId> {
        let blk = &self.blocks[t];
        let dm = self.cfg.model_dim;
        let heads = self.cfg.backbone_heads;
        let dk = dm / heads;
        let x = blk.ln1.forward(ctx, z)?;
        let q = blk.wq.forward(ctx, x)?;
        let k = blk.wk.forward(ctx, x)?;
        let v = blk.wv.forward(ctx, x)?;
        let mut parts = Vec::with_capacity(heads);
        for hidx in 0..heads {
            let qh = ctx.tape.slice(q, 1, hidx * dk, dk)?;
            let kh = ctx.tape.slice(k, 1, hidx * dk, dk)?;
            let vh = ctx.tape.slice(v, 1, hidx * dk, dk)?;
            let kt = ctx.tape.transpose(kh)?;
            let scores = ctx.tape.matmul(qh, kt)?;
            let scaled = ctx.tape.scale(scores, 1.0 / (dk as f64).sqrt());
            let attn = ctx.tape.softmax(scaled);
            parts.push(ctx.tape.matmul(attn, vh)?);
        }
        let merged = ctx.tape.concat(1, &parts)?;
        let out = blk.wo.forward(ctx, merged)?;
        let z = ctx.tape.add(z, out)?;
        let x2 = blk.ln2.forward(ctx, z)?;
        let f = blk.ffn.forward(ctx, x2)?;
        ctx.tape.add(z, f)
    }

    /// EB stage 1: exemplar interaction. Returns (h_hat, R', S').
    pub fn eb_stage1_on(
        &self,
        ctx: &mut Ctx,
        n: usize,
        h: VarId,
        r: VarId,
        s: VarId,
    ) -> Result<(VarId, VarId, VarId)> {
        let eb = &self.ebs[n];
        let k = ctx.tape.value(r).shape()[0];
        let s_next = eb.s_lin.forward(ctx, s)?;
        let hb = ctx.tape.broadcast_rows(h, k)?;
        let diff = ctx.tape.sub(hb, r)?;
        let cat = ctx.tape.concat(1, &[hb, diff])?;
        let m_raw = eb.m_mlp.forward(ctx, cat)?;
        let m = ctx.tape.sigmoid(m_raw);
        let (m_h, m_r) = ctx.tape.chunk(m, 1)?;
        let upd_h = ctx.tape.mul(m_h, s_next)?;
        let mean_upd = ctx.tape.mean_axis(upd_h, 0)?;
        let h_hat = ctx.tape.add(h, mean_upd)?;
        let upd_r = ctx.tape.mul(m_r, s_next)?;
        let r_next = ctx.tape.add(r, upd_r)?;
        Ok((h_hat, r_next, s_next))
    }

    /// EB stage 2: patch revision. Returns (h', Z').
    pub fn eb_stage2_on(&self, ctx: &mut Ctx, n: usize, h_hat: VarId, z: VarId) -> Result<(VarId, VarId)> {
        let eb = &self.ebs[n];
        let l = self.cfg.num_patches();
        let g = self.cfg.eb_heads;
        let gd = g * self.cfg.eb_head_dim;
        let gate_raw = eb.gate_lin.forward(ctx, h_hat)?;
        let gate = ctx.tape.sigmoid(gate_raw);
        let gate_gl = ctx.tape.reshape(gate, vec![g, l])?;
        let gate_lg = ctx.tape.transpose(gate_gl)?;
        let gate_e = ctx.tape.expand_cols(gate_lg, self.cfg.eb_head_dim)?;
        let p = eb.o_lin.forward(ctx, z)?;
        let p_h = ctx.tape.slice(p, 1, 0, gd)?;
        let p_z = ctx.tape.slice(p, 1, gd, gd)?;
        let o_h = ctx.tape.mul(gate_e, p_h)?;
        let o_z = ctx.tape.mul(gate_e, p_z)?;
        let z_upd = eb.z_out.forward(ctx, o_z)?;
        let z_next = ctx.tape.add(z, z_upd)?;
        let pooled_oh = ctx.tape.mean_axis(o_h, 0)?;
        let h_upd = eb.h_out.forward(ctx, pooled_oh)?;
        let h_next = ctx.tape.add(h_hat, h_upd)?;
        Ok((h_next, z_next))
    }

    fn attpool_on(&self, ctx: &mut Ctx, z: VarId) -> Result<VarId> {
        let dm = self.cfg.model_dim;
        let l = self.cfg.num_patches();
        let q = ctx.param(self.att_q);
        let q_col = ctx.tape.reshape(q, vec![dm, 1])?;
        let scores = ctx.tape.matmul(z, q_col)?;
        let scaled = ctx.tape.scale(scores, 1.0 / (dm as f64).sqrt());
        let flat = ctx.tape.reshape(scaled, vec![l])?;
        let w = ctx.tape.softmax(flat);
        let w_row = ctx.tape.reshape(w, vec![1, l])?;
        let pooled = ctx.tape.matmul(w_row, z)?;
        ctx.tape.reshape(pooled, vec![dm])
    }

    /// Tape-level forward pass; `exemplars` may be None only for the
    /// backbone-only variant.
    pub fn forward_on(
        &self,
        ctx: &mut Ctx,
        window: &Tensor,
        e: Option<&[f64]>,
        exemplars: Option<&ExemplarSet>,
    ) -> Result<VarId> {
        let s = self.cfg.image_size;
        if window.shape() != [3, s, s] {
            return Err(EgnError::shape(
                "forward",
                format!("expected window [3, {s}, {s}], got {:?}", window.shape()),
            ));
        }
        let x = ctx.input(window.clone());
        let mut z = self.patch_embed_on(ctx, x)?;
        check_finite(ctx, z, "patch_embed")?;

        let mut state = if self.variant.has_projector() {
            let ev = e.ok_or_else(|| EgnError::Contract("this variant requires a query global view".into()))?;
            if ev.len() != self.cfg.style_dim {
                return Err(EgnError::shape(
                    "forward",
                    format!("global view has {} entries, expected {}", ev.len(), self.cfg.style_dim),
                ));
            }
            if self.variant.has_eb() {
                let ex = exemplars
                    .ok_or_else(|| EgnError::Contract("this variant requires exemplars".into()))?;
                self.check_exemplars(ex)?;
                let e_var = ctx.input(Tensor::from_vec(ev.to_vec()));
                let enc = ctx.input(ex.encodings.clone());
                let expr = ctx.input(ex.expressions.clone());
                let (h, r, s) = self.project_inputs_on(ctx, e_var, enc, expr)?;
                check_finite(ctx, h, "project_inputs")?;
                Some((h, Some((r, s))))
            } else {
                // w/o-EB: query path only
                let p = self.projector.as_ref().expect("wo_eb has a trunk");
                let e_var = ctx.input(Tensor::from_vec(ev.to_vec()));
                let pad = ctx.input(Tensor::zeros(&[self.cfg.num_genes]));
                let he_in = ctx.tape.concat(0, &[e_var, pad])?;
                let h = p.trunk.forward(ctx, he_in)?;
                check_finite(ctx, h, "project_inputs")?;
                Some((h, None))
            }
        } else {
            None
        };

        let mut eb_idx = 0usize;
        for t in 0..self.cfg.depth {
            z = self.transformer_block_on(ctx, t, z)?;
            check_finite(ctx, z, &format!("transformer block {t}"))?;
            if self.variant.has_eb() && (t + 1) % self.cfg.eb_frequency == 0 && eb_idx < self.ebs.len() {
                let (h, rs) = state.take().expect("EB variants carry state");
                let (r, sv) = rs.expect("EB variants carry exemplar state");
                let (h_hat, r2, s2) = self.eb_stage1_on(ctx, eb_idx, h, r, sv)?;
                let (h2, z2) = self.eb_stage2_on(ctx, eb_idx, h_hat, z)?;
                z = z2;
                check_finite(ctx, z, &format!("eb block {eb_idx}"))?;
                check_finite(ctx, h2, &format!("eb block {eb_idx}"))?;
                state = Some((h2, Some((r2, s2))));
                eb_idx += 1;
            }
        }

        let pooled = self.attpool_on(ctx, z)?;
        let head_in = match &state {
            Some((h, _)) => ctx.tape.concat(0, &[*h, pooled])?,
            None => pooled,
        };
        let y = self.head.forward(ctx, head_in)?;
        check_finite(ctx, y, "prediction head")?;
        Ok(y)
    }

    /// Convenience forward returning the M-vector prediction.
    pub fn forward(
        &self,
        window: &Tensor,
        e: Option<&[f64]>,
        exemplars: Option<&ExemplarSet>,
    ) -> Result<Tensor> {
        let mut ctx = Ctx::new(&self.store);
        let y = self.forward_on(&mut ctx, window, e, exemplars)?;
        Ok(ctx.tape.value(y).clone())
    }

    /// Copy every parameter whose name and shape both match from `other`.
    /// Returns the number of tensors copied.
    pub fn copy_shared_from(&mut self, other: &EgnModel) -> usize {
        let mut copied = 0;
        let names: Vec<(crate::nn::ParamId, String)> = self
            .store
            .iter()
            .map(|(id, name, _)| (id, name.to_string()))
            .collect();
        for (id, name) in names {
            if let Some(src) = other.store.find(&name) {
                if other.store.get(src).shape() == self.store.get(id).shape() {
                    *self.store.get_mut(id) = other.store.get(src).clone();
                    copied += 1;
                }
            }
        }
        copied
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = CheckpointMeta { config: self.cfg.clone(), variant: self.variant };
        let json = serde_json::to_string(&meta)?;
        checkpoint::save_checkpoint(path, EGNM_MAGIC, &json, &self.store)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (json, tensors) = checkpoint::load_checkpoint(path, EGNM_MAGIC)?;
        let meta: CheckpointMeta = serde_json::from_str(&json)?;
        let mut model = EgnModel::new(meta.config, meta.variant, 0)?;
        checkpoint::restore_params(&mut model.store, &tensors)?;
        Ok(model)
    }
}

/// Build a variant by name; unknown names are a config error.
pub fn build_variant(cfg: ModelConfig, variant_name: &str, seed: u64) -> Result<EgnModel> {
    EgnModel::new(cfg, Variant::parse(variant_name)?, seed)
}
