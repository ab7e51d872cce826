//! Low-rank adaptation of linear layers: config, injection, and weight
//! merging.
//!
//! A wrapped layer computes `W x + (alpha/r) * B A dropout(x)` with `A` drawn
//! from `N(0, 0.02^2)` and `B` zero-initialized, so a freshly wrapped model
//! reproduces the base model bit for bit. For inference the update can be
//! folded into `W` once (`merge`) and undone again (`unmerge`).

use crate::error::{Error, Result};
use crate::nn::{normal, Linear, ParamId, Params, Session};
use crate::scalar::Scalar;
use crate::tensor::Var;
use ndarray::{ArrayD, Ix2, IxDyn};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Adapter hyperparameters.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LoraConfig {
    /// Rank of the update.
    pub rank: usize,
    /// Numerator of the `alpha/rank` scaling.
    pub alpha: f64,
    /// Dropout on the adapter input during training.
    pub dropout: f64,
    /// Layer-name suffixes to wrap (matched against the last dotted segment).
    pub targets: Vec<String>,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            rank: 8,
            alpha: 16.0,
            dropout: 0.3,
            targets: ["qkv", "proj", "fc1", "fc2"]
                .into_iter()
                .map(String::from)
                .collect(),
        }
    }
}

impl LoraConfig {
    /// The `alpha/rank` factor applied to the low-rank path.
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::InvalidParameter("adapter rank must be >= 1".into()));
        }
        if self.alpha <= 0.0 {
            return Err(Error::InvalidParameter("adapter alpha must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidParameter(
                "adapter dropout must be in [0, 1)".into(),
            ));
        }
        if self.targets.is_empty() {
            return Err(Error::InvalidParameter(
                "adapter target list must not be empty".into(),
            ));
        }
        Ok(())
    }
}

/// Adapter state attached to one [`Linear`] layer.
pub struct LoraAdapter {
    /// Down-projection, shape `(rank, d_in)`.
    pub a: ParamId,
    /// Up-projection, shape `(d_out, rank)`, zero-initialized.
    pub b: ParamId,
    pub scaling: f64,
    pub dropout: f64,
    /// When true the update is folded into the base weight and the adapter
    /// path is skipped in forward passes.
    pub merged: bool,
}

impl LoraAdapter {
    /// Add the scaled low-rank path to `base`, where `x_flat` is the layer
    /// input flattened to `(m, d_in)`.
    pub fn forward<T: Scalar>(
        &self,
        sess: &mut Session<'_, T>,
        x_flat: Var,
        base: Var,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Var {
        let a = sess.p(self.a);
        let b = sess.p(self.b);
        let mut h = x_flat;
        if sess.train && self.dropout > 0.0 {
            let rng = rng.expect("adapter dropout needs an rng during training");
            h = sess.tape.dropout(h, self.dropout, rng);
        }
        let down = sess.tape.matmul_nt(h, a);
        let up = sess.tape.matmul_nt(down, b);
        let scaled = sess.tape.scale(up, T::of_f64(self.scaling));
        sess.tape.add(base, scaled)
    }
}

/// A model exposing the linear layers an adapter may wrap.
pub trait AdapterHost {
    /// Dotted-path names and the layers behind them, in a stable order.
    fn adapter_sites(&mut self) -> Vec<(String, &mut Linear)>;
}

/// Freeze every existing parameter, then wrap all layers whose last name
/// segment is in `cfg.targets` with trainable rank-`r` adapters.
///
/// Returns the wrapped layer names. The caller re-enables any head
/// parameters that should keep training.
pub fn apply_lora<T: Scalar>(
    model: &mut impl AdapterHost,
    params: &mut Params<T>,
    cfg: &LoraConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<String>> {
    cfg.validate()?;
    params.freeze_all();
    let mut wrapped = Vec::new();
    let mut available = Vec::new();
    for (name, lin) in model.adapter_sites() {
        available.push(name.clone());
        let suffix = name.rsplit('.').next().unwrap_or(name.as_str());
        if !cfg.targets.iter().any(|t| t == suffix) {
            continue;
        }
        let a = params.add(
            format!("{name}.lora_a"),
            normal(rng, &[cfg.rank, lin.d_in], 0.02),
            true,
        );
        let b = params.add(
            format!("{name}.lora_b"),
            ArrayD::zeros(IxDyn(&[lin.d_out, cfg.rank])),
            true,
        );
        lin.adapter = Some(LoraAdapter {
            a,
            b,
            scaling: cfg.scaling(),
            dropout: cfg.dropout,
            merged: false,
        });
        wrapped.push(name);
    }
    if wrapped.is_empty() {
        return Err(Error::NoAdapterTargets {
            targets: cfg.targets.clone(),
            available,
        });
    }
    Ok(wrapped)
}

/// Fold every adapter update into its base weight (`W += s * B A`).
///
/// Returns the number of layers merged. Fails without touching anything if
/// some adapter is already merged.
pub fn merge_lora<T: Scalar>(
    model: &mut impl AdapterHost,
    params: &mut Params<T>,
) -> Result<usize> {
    let sites = model.adapter_sites();
    if sites
        .iter()
        .any(|(_, l)| l.adapter.as_ref().is_some_and(|a| a.merged))
    {
        return Err(Error::AlreadyMerged);
    }
    let mut n = 0;
    for (_, lin) in sites {
        if let Some(ad) = &mut lin.adapter {
            add_update(params, lin.w, ad, T::one());
            ad.merged = true;
            n += 1;
        }
    }
    Ok(n)
}

/// Overwrite the merged flag on every adapter site.
///
/// Useful when one model structure fronts several weight stores (e.g. an
/// ensemble of checkpoints): the flag describes whichever store is active, so
/// it must be reset before merging the next one.
pub fn set_adapter_merged(model: &mut impl AdapterHost, merged: bool) {
    for (_, lin) in model.adapter_sites() {
        if let Some(ad) = &mut lin.adapter {
            ad.merged = merged;
        }
    }
}

/// Undo [`merge_lora`], restoring the separate base weight and adapter path.
pub fn unmerge_lora<T: Scalar>(
    model: &mut impl AdapterHost,
    params: &mut Params<T>,
) -> Result<usize> {
    let sites = model.adapter_sites();
    if sites
        .iter()
        .any(|(_, l)| l.adapter.as_ref().is_some_and(|a| !a.merged))
    {
        return Err(Error::NotMerged);
    }
    let mut n = 0;
    for (_, lin) in sites {
        if let Some(ad) = &mut lin.adapter {
            add_update(params, lin.w, ad, -T::one());
            ad.merged = false;
            n += 1;
        }
    }
    Ok(n)
}

fn add_update<T: Scalar>(params: &mut Params<T>, w: ParamId, ad: &LoraAdapter, sign: T) {
    let a = params
        .value(ad.a)
        .view()
        .into_dimensionality::<Ix2>()
        .unwrap()
        .to_owned();
    let b = params
        .value(ad.b)
        .view()
        .into_dimensionality::<Ix2>()
        .unwrap()
        .to_owned();
    let scale = sign * T::of_f64(ad.scaling);
    let delta = b.dot(&a).mapv(|v| v * scale);
    *params.value_mut(w) += &delta.into_dyn();
}
