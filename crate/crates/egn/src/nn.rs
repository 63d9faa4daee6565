//! Parameter storage, layers, and the optimizer.
//!
//! Parameters live in a [`ParamStore`] outside any tape; a [`Ctx`] registers
//! them as tape leaves on demand, memoizing the VarId so that shared
//! parameters (the projector's tied layers) map to a single leaf and
//! accumulate gradients once.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{EgnError, Result};
use crate::tape::{Gradients, Tape, VarId};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore { names: Vec::new(), tensors: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(t);
        ParamId(self.names.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.tensors
            .iter()
            .enumerate()
            .map(|(i, t)| (ParamId(i), self.names[i].as_str(), t))
    }

    pub fn total_params(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

/// One forward/backward episode: a tape plus the param-leaf memo table.
pub struct Ctx<'a> {
    pub tape: Tape,
    store: &'a ParamStore,
    param_vars: HashMap<ParamId, VarId>,
}

impl<'a> Ctx<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Ctx { tape: Tape::new(), store, param_vars: HashMap::new() }
    }

    /// Register a parameter as a requires-grad leaf (memoized).
    pub fn param(&mut self, id: ParamId) -> VarId {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let v = self.tape.leaf(self.store.get(id).clone(), true);
        self.param_vars.insert(id, v);
        v
    }

    pub fn input(&mut self, t: Tensor) -> VarId {
        self.tape.leaf(t, false)
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// Run backward and collect gradients keyed by ParamId.
    pub fn backward(self, loss: VarId) -> Result<HashMap<ParamId, Tensor>> {
        let vars = self.param_vars;
        let grads: Gradients = self.tape.backward(loss)?;
        let mut out = HashMap::new();
        for (pid, vid) in vars {
            if let Some(g) = grads.get(vid) {
                out.insert(pid, g.clone());
            }
        }
        Ok(out)
    }
}

/// Fully connected layer. With `rank() == 1` inputs the vector is treated as
/// a single row.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId, // [in, out]
    pub b: ParamId, // [out]
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let w = store.add(format!("{name}.w"), Tensor::uniform(&[in_dim, out_dim], bound, rng));
        let b = store.add(format!("{name}.b"), Tensor::uniform(&[out_dim], bound, rng));
        Linear { w, b, in_dim, out_dim }
    }

    /// Zero-initialized variant (used for residual output projections).
    pub fn zeros(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let w = store.add(format!("{name}.w"), Tensor::zeros(&[in_dim, out_dim]));
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[out_dim]));
        Linear { w, b, in_dim, out_dim }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: VarId) -> Result<VarId> {
        let w = ctx.param(self.w);
        let b = ctx.param(self.b);
        let rank1 = ctx.tape.value(x).rank() == 1;
        let x2 = if rank1 {
            let n = ctx.tape.value(x).numel();
            ctx.tape.reshape(x, vec![1, n])?
        } else {
            x
        };
        let y = ctx.tape.matmul(x2, w)?;
        let y = ctx.tape.add(y, b)?;
        if rank1 {
            ctx.tape.reshape(y, vec![self.out_dim])
        } else {
            Ok(y)
        }
    }
}

/// Two-layer perceptron with ReLU.
#[derive(Clone, Copy, Debug)]
pub struct Mlp2 {
    pub l1: Linear,
    pub l2: Linear,
}

impl Mlp2 {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, in_dim: usize, hidden: usize, out_dim: usize) -> Self {
        Mlp2 {
            l1: Linear::new(store, rng, &format!("{name}.l1"), in_dim, hidden),
            l2: Linear::new(store, rng, &format!("{name}.l2"), hidden, out_dim),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: VarId) -> Result<VarId> {
        let h = self.l1.forward(ctx, x)?;
        let h = ctx.tape.relu(h);
        self.l2.forward(ctx, h)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[dim])),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim])),
            eps: 1e-6,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: VarId) -> Result<VarId> {
        let n = ctx.tape.layer_norm_row(x, self.eps);
        let g = ctx.param(self.gamma);
        let b = ctx.param(self.beta);
        let y = ctx.tape.mul(n, g)?;
        ctx.tape.add(y, b)
    }
}

/// Adaptive-moment optimizer with decoupled weight decay.
pub struct AdamW {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    step: u64,
    m: HashMap<ParamId, Vec<f64>>,
    v: HashMap<ParamId, Vec<f64>>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &HashMap<ParamId, Tensor>, lr: f64) {
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        // fixed parameter order for determinism
        let mut ids: Vec<ParamId> = grads.keys().copied().collect();
        ids.sort_by_key(|p| p.0);
        for id in ids {
            let g = &grads[&id];
            let n = g.numel();
            let m = self.m.entry(id).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(id).or_insert_with(|| vec![0.0; n]);
            let p = store.get_mut(id);
            for i in 0..n {
                let gi = g.data()[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                let d = p.data_mut();
                d[i] -= lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * d[i]);
            }
        }
    }
}

/// Cosine annealing from `lr` at epoch 0 to 0 at the final epoch.
pub fn cosine_lr(base_lr: f64, epoch: usize, total_epochs: usize) -> f64 {
    if total_epochs <= 1 {
        return base_lr;
    }
    let frac = epoch as f64 / (total_epochs - 1) as f64;
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Validate that no tracked value went non-finite; names the offending site.
pub fn check_finite(ctx: &Ctx, id: VarId, site: &str) -> Result<()> {
    if ctx.tape.value(id).all_finite() {
        Ok(())
    } else {
        Err(EgnError::Nan(site.to_string()))
    }
}
