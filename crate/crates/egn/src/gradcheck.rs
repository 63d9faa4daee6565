//! Central finite-difference verification of tape adjoints.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{EgnError, Result};
use crate::nn::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-6;

#[derive(Debug)]
pub struct GroupResult {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
}

#[derive(Debug)]
pub struct GradcheckReport {
    pub groups: Vec<GroupResult>,
    pub rtol: f64,
    pub atol: f64,
    pub coords_checked: usize,
}

impl GradcheckReport {
    pub fn pass(&self) -> bool {
        self.groups.iter().all(|g| g.max_rel_err <= self.rtol)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_err).fold(0.0, f64::max)
    }
}

impl std::fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for g in &self.groups {
            writeln!(
                f,
                "{:<40} coords={:<6} max_rel_err={:.3e} {}",
                g.name,
                g.checked,
                g.max_rel_err,
                if g.max_rel_err <= self.rtol { "ok" } else { "FAIL" }
            )?;
        }
        writeln!(
            f,
            "overall: {} ({} coords, rtol {:.1e}, atol {:.1e})",
            if self.pass() { "PASS" } else { "FAIL" },
            self.coords_checked,
            self.rtol,
            self.atol
        )
    }
}

/// Check tape adjoints of a deterministic scalar closure against central
/// finite differences, sampling up to `max_coords` parameter coordinates.
///
/// The closure is called with `need_grad = true` once to obtain analytic
/// gradients, and with `need_grad = false` for every probe evaluation.
pub fn gradcheck<F>(
    store: &mut ParamStore,
    mut f: F,
    rtol: f64,
    atol: f64,
    max_coords: usize,
    seed: u64,
) -> Result<GradcheckReport>
where
    F: FnMut(&ParamStore, bool) -> Result<(f64, Option<HashMap<ParamId, Tensor>>)>,
{
    let (loss_a, grads) = f(store, true)?;
    let (loss_b, _) = f(store, false)?;
    if loss_a.to_bits() != loss_b.to_bits() {
        return Err(EgnError::NonDeterministic(format!(
            "closure returned {loss_a} then {loss_b} for identical parameters"
        )));
    }
    let grads = grads.ok_or_else(|| EgnError::Contract("closure returned no gradients".into()))?;

    // Enumerate all coordinates, then sample if over budget.
    let mut coords: Vec<(ParamId, usize)> = Vec::new();
    for (id, _, t) in store.iter() {
        for i in 0..t.numel() {
            coords.push((id, i));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if coords.len() > max_coords {
        coords.shuffle(&mut rng);
        coords.truncate(max_coords);
    }

    let mut per_group: HashMap<ParamId, GroupResult> = HashMap::new();
    for &(id, i) in &coords {
        let orig = store.get(id).data()[i];
        store.get_mut(id).data_mut()[i] = orig + FD_STEP;
        let (lp, _) = f(store, false)?;
        store.get_mut(id).data_mut()[i] = orig - FD_STEP;
        let (lm, _) = f(store, false)?;
        store.get_mut(id).data_mut()[i] = orig;
        let fd = (lp - lm) / (2.0 * FD_STEP);
        let an = grads.get(&id).map(|g| g.data()[i]).unwrap_or(0.0);
        let scale = an.abs().max(fd.abs()).max(atol / rtol);
        let rel = (fd - an).abs() / scale;
        let entry = per_group.entry(id).or_insert_with(|| GroupResult {
            name: store.name(id).to_string(),
            checked: 0,
            max_rel_err: 0.0,
        });
        entry.checked += 1;
        entry.max_rel_err = entry.max_rel_err.max(rel);
    }

    let mut groups: Vec<GroupResult> = per_group.into_values().collect();
    groups.sort_by(|a, b| a.name.cmp(&b.name));
    Ok(GradcheckReport { groups, rtol, atol, coords_checked: coords.len() })
}
