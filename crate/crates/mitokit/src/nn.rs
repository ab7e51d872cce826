//! Parameter registry, layers, initializers, optimizers, and checkpoints.
//!
//! Parameters live in a [`Params`] store keyed by dotted path names
//! (`blocks.0.attn.qkv.weight`). A forward pass opens a [`Session`], which
//! binds parameters onto a fresh tape — trainable ones as tracked leaves,
//! frozen ones as constants — so the backward pass automatically skips
//! gradient work for frozen weights.

use crate::error::{Error, Result};
use crate::lora::LoraAdapter;
use crate::scalar::Scalar;
use crate::tensor::{Tape, Var};
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};

/// Handle to one parameter in a [`Params`] store.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct ParamId(usize);

#[derive(Clone)]
struct ParamEntry<T: Scalar> {
    name: String,
    value: ArrayD<T>,
    trainable: bool,
    grad: Option<ArrayD<T>>,
}

/// Named parameter store with trainability flags and gradient slots.
#[derive(Clone)]
pub struct Params<T: Scalar> {
    entries: Vec<ParamEntry<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Scalar> Default for Params<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Params<T> {
    pub fn new() -> Self {
        Params {
            entries: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: ArrayD<T>, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name `{name}`"
        );
        let idx = self.entries.len();
        self.by_name.insert(name.clone(), idx);
        self.entries.push(ParamEntry {
            name,
            value,
            trainable,
            grad: None,
        });
        ParamId(idx)
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<T> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<T> {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.entries[id.0].trainable = trainable;
    }

    pub fn freeze_all(&mut self) {
        for e in &mut self.entries {
            e.trainable = false;
        }
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    /// Total number of scalar elements across all parameters.
    pub fn total_len(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Number of scalar elements in trainable parameters.
    pub fn trainable_len(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.len())
            .sum()
    }

    pub fn grad(&self, id: ParamId) -> Option<&ArrayD<T>> {
        self.entries[id.0].grad.as_ref()
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad = None;
        }
    }

    /// Add a session's gradients into the store (accumulating across calls).
    pub fn accumulate(&mut self, grads: &SessionGrads<T>) {
        for (&idx, g) in &grads.by_param {
            let slot = &mut self.entries[idx].grad;
            match slot {
                Some(acc) => *acc += g,
                None => *slot = Some(g.clone()),
            }
        }
    }

    /// Serialize every parameter as `f64` with its shape and flag.
    pub fn snapshot(&self) -> ParamSnapshot {
        let entries = self
            .entries
            .iter()
            .map(|e| {
                (
                    e.name.clone(),
                    SnapshotEntry {
                        shape: e.value.shape().to_vec(),
                        trainable: e.trainable,
                        data: e.value.iter().map(|v| v.as_f64()).collect(),
                    },
                )
            })
            .collect();
        ParamSnapshot { entries }
    }

    /// Restore values (and trainability) from a snapshot.
    ///
    /// Every parameter in the store must appear in the snapshot with a
    /// matching shape; extra snapshot entries are rejected.
    pub fn load_snapshot(&mut self, snap: &ParamSnapshot) -> Result<()> {
        for name in snap.entries.keys() {
            if !self.by_name.contains_key(name) {
                return Err(Error::InvalidParameter(format!(
                    "snapshot entry `{name}` has no matching parameter"
                )));
            }
        }
        for e in &mut self.entries {
            let Some(se) = snap.entries.get(&e.name) else {
                return Err(Error::InvalidParameter(format!(
                    "snapshot is missing parameter `{}`",
                    e.name
                )));
            };
            if se.shape != e.value.shape() {
                return Err(Error::ShapeMismatch {
                    expected: e.value.shape().to_vec(),
                    got: se.shape.clone(),
                });
            }
            e.value = ArrayD::from_shape_vec(
                IxDyn(&se.shape),
                se.data.iter().map(|&v| T::of_f64(v)).collect(),
            )
            .expect("snapshot shape/data agreement");
            e.trainable = se.trainable;
        }
        Ok(())
    }
}

/// One parameter in a [`ParamSnapshot`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnapshotEntry {
    pub shape: Vec<usize>,
    pub trainable: bool,
    pub data: Vec<f64>,
}

/// JSON-serializable copy of a whole parameter store.
///
/// Values are stored as `f64`, which round-trips `f32` weights exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSnapshot {
    pub entries: BTreeMap<String, SnapshotEntry>,
}

impl ParamSnapshot {
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(file, self)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let file = std::io::BufReader::new(
            std::fs::File::open(path).map_err(|_| Error::MissingFile(path.to_path_buf()))?,
        );
        Ok(serde_json::from_reader(file)?)
    }
}

/// One forward pass: a tape plus the parameter bindings made onto it.
pub struct Session<'p, T: Scalar> {
    pub tape: Tape<T>,
    params: &'p Params<T>,
    bound: HashMap<usize, Var>,
    pub train: bool,
}

impl<'p, T: Scalar> Session<'p, T> {
    pub fn new(params: &'p Params<T>, train: bool) -> Self {
        Session {
            tape: Tape::new(),
            params,
            bound: HashMap::new(),
            train,
        }
    }

    /// Bind a parameter onto the tape (cached per session).
    ///
    /// Trainable parameters become tracked leaves; frozen ones constants, so
    /// no gradient is ever computed for them.
    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id.0) {
            return v;
        }
        let value = self.params.value(id).clone();
        let v = if self.train && self.params.is_trainable(id) {
            self.tape.leaf(value)
        } else {
            self.tape.constant(value)
        };
        self.bound.insert(id.0, v);
        v
    }

    pub fn input(&mut self, value: ArrayD<T>) -> Var {
        self.tape.constant(value)
    }

    /// Run the backward pass and collect per-parameter gradients.
    pub fn backward(self, root: Var) -> SessionGrads<T> {
        let grads = self.tape.backward(root);
        let mut by_param = HashMap::new();
        for (idx, var) in self.bound {
            if let Some(g) = grads.of(var) {
                by_param.insert(idx, g.clone());
            }
        }
        SessionGrads { by_param }
    }
}

/// Gradients of one backward pass, keyed by parameter.
pub struct SessionGrads<T: Scalar> {
    by_param: HashMap<usize, ArrayD<T>>,
}

impl<T: Scalar> SessionGrads<T> {
    pub fn of(&self, id: ParamId) -> Option<&ArrayD<T>> {
        self.by_param.get(&id.0)
    }
}

// ---- initializers ----

/// Uniform `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub fn uniform_fan_in<T: Scalar>(
    rng: &mut ChaCha8Rng,
    shape: &[usize],
    fan_in: usize,
) -> ArrayD<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    ArrayD::from_shape_fn(IxDyn(shape), |_| {
        T::of_f64(rng.gen_range(-bound..bound))
    })
}

/// Gaussian `N(0, std^2)` via Box-Muller.
pub fn normal<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> ArrayD<T> {
    ArrayD::from_shape_fn(IxDyn(shape), |_| {
        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        T::of_f64(std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos())
    })
}

// ---- layers ----

/// Fully connected layer with row-major `(d_out, d_in)` weights and an
/// optional low-rank adapter.
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
    pub adapter: Option<LoraAdapter>,
}

impl Linear {
    pub fn init<T: Scalar>(
        params: &mut Params<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
    ) -> Self {
        let w = params.add(
            format!("{name}.weight"),
            uniform_fan_in(rng, &[d_out, d_in], d_in),
            true,
        );
        let b = bias.then(|| {
            params.add(
                format!("{name}.bias"),
                uniform_fan_in(rng, &[d_out], d_in),
                true,
            )
        });
        Linear {
            w,
            b,
            d_in,
            d_out,
            adapter: None,
        }
    }

    /// Apply to the last axis of `x`; leading axes are preserved.
    ///
    /// With an unmerged adapter attached, the low-rank path is added to the
    /// base product; `rng` drives adapter dropout when training.
    pub fn forward<T: Scalar>(
        &self,
        sess: &mut Session<'_, T>,
        x: Var,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Var {
        let shape = sess.tape.value(x).shape().to_vec();
        let d_in = *shape.last().expect("linear input rank");
        assert_eq!(d_in, self.d_in, "linear input width");
        let m: usize = shape[..shape.len() - 1].iter().product();
        let flat = sess.tape.reshape(x, &[m, d_in]);
        let w = sess.p(self.w);
        let mut out = sess.tape.matmul_nt(flat, w);
        if let Some(ad) = &self.adapter {
            if !ad.merged {
                out = ad.forward(sess, flat, out, rng);
            }
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = self.d_out;
        let mut y = sess.tape.reshape(out, &out_shape);
        if let Some(b) = self.b {
            let bv = sess.p(b);
            y = sess.tape.add_bias_last(y, bv);
        }
        y
    }
}

/// Same-padded stride-1 convolution layer.
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
}

impl Conv2d {
    pub fn init<T: Scalar>(
        params: &mut Params<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
    ) -> Self {
        let fan_in = c_in * k * k;
        Conv2d {
            w: params.add(
                format!("{name}.weight"),
                uniform_fan_in(rng, &[c_out, c_in, k, k], fan_in),
                true,
            ),
            b: params.add(
                format!("{name}.bias"),
                uniform_fan_in(rng, &[c_out], fan_in),
                true,
            ),
        }
    }

    pub fn forward<T: Scalar>(&self, sess: &mut Session<'_, T>, x: Var) -> Var {
        let w = sess.p(self.w);
        let b = sess.p(self.b);
        sess.tape.conv2d(x, w, Some(b))
    }
}

/// Layer normalization over the last axis.
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn init<T: Scalar>(params: &mut Params<T>, name: &str, d: usize) -> Self {
        LayerNorm {
            gamma: params.add(format!("{name}.gamma"), ArrayD::ones(IxDyn(&[d])), true),
            beta: params.add(format!("{name}.beta"), ArrayD::zeros(IxDyn(&[d])), true),
        }
    }

    pub fn forward<T: Scalar>(&self, sess: &mut Session<'_, T>, x: Var) -> Var {
        let gamma = sess.p(self.gamma);
        let beta = sess.p(self.beta);
        sess.tape.layernorm_last(x, gamma, beta, 1e-5)
    }
}

// ---- optimizers ----

/// Adam configuration; `decoupled` selects AdamW-style weight decay.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub decoupled: bool,
}

impl AdamConfig {
    /// Classic Adam: weight decay folded into the gradient.
    pub fn adam(lr: f64, weight_decay: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            decoupled: false,
        }
    }

    /// AdamW: weight decay applied directly to the weights.
    pub fn adamw(lr: f64, weight_decay: f64) -> Self {
        AdamConfig {
            decoupled: true,
            ..Self::adam(lr, weight_decay)
        }
    }
}

/// Adam/AdamW with bias correction; state is kept per parameter.
///
/// Only trainable parameters with a pending gradient are touched, so frozen
/// weights stay bit-identical across steps.
pub struct Adam<T: Scalar> {
    pub cfg: AdamConfig,
    t: u64,
    m: HashMap<usize, ArrayD<T>>,
    v: HashMap<usize, ArrayD<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            t: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    /// Apply one update from the gradients accumulated in `params`,
    /// consuming them.
    pub fn step(&mut self, params: &mut Params<T>) {
        self.t += 1;
        let lr = T::of_f64(self.cfg.lr);
        let b1 = T::of_f64(self.cfg.beta1);
        let b2 = T::of_f64(self.cfg.beta2);
        let eps = T::of_f64(self.cfg.eps);
        let wd = T::of_f64(self.cfg.weight_decay);
        let bc1 = T::of_f64(1.0 - self.cfg.beta1.powi(self.t as i32));
        let bc2 = T::of_f64(1.0 - self.cfg.beta2.powi(self.t as i32));
        for idx in 0..params.entries.len() {
            if !params.entries[idx].trainable {
                params.entries[idx].grad = None;
                continue;
            }
            let Some(mut g) = params.entries[idx].grad.take() else {
                continue;
            };
            let w = &mut params.entries[idx].value;
            if self.cfg.weight_decay != 0.0 {
                if self.cfg.decoupled {
                    w.mapv_inplace(|x| x - lr * wd * x);
                } else {
                    g.zip_mut_with(w, |gv, &wv| *gv += wd * wv);
                }
            }
            let m = self
                .m
                .entry(idx)
                .or_insert_with(|| ArrayD::zeros(w.raw_dim()));
            let v = self
                .v
                .entry(idx)
                .or_insert_with(|| ArrayD::zeros(w.raw_dim()));
            m.zip_mut_with(&g, |mv, &gv| *mv = b1 * *mv + (T::one() - b1) * gv);
            v.zip_mut_with(&g, |vv, &gv| *vv = b2 * *vv + (T::one() - b2) * gv * gv);
            ndarray::Zip::from(w)
                .and(&*m)
                .and(&*v)
                .for_each(|wv, &mv, &vv| {
                    let mhat = mv / bc1;
                    let vhat = vv / bc2;
                    *wv = *wv - lr * mhat / (vhat.sqrt() + eps);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;
    use rand::SeedableRng;

    #[test]
    fn session_binds_trainable_as_leaves() {
        let mut params = Params::<f64>::new();
        let a = params.add("a", ArrayD::from_elem(IxDyn(&[2]), 1.0), true);
        let b = params.add("b", ArrayD::from_elem(IxDyn(&[2]), 2.0), false);
        let mut sess = Session::new(&params, true);
        let av = sess.p(a);
        let bv = sess.p(b);
        assert!(sess.tape.needs_grad(av));
        assert!(!sess.tape.needs_grad(bv));
        // cached binding returns the same node
        assert_eq!(sess.p(a), av);

        let s = sess.tape.mul(av, bv);
        let loss = sess.tape.sum_all(s);
        let grads = sess.backward(loss);
        assert!(grads.of(a).is_some());
        assert!(grads.of(b).is_none());
        let ga = grads.of(a).unwrap();
        assert!(ga.iter().all(|&g| (g - 2.0).abs() < 1e-12));
    }

    #[test]
    fn adam_coupled_decay_moves_zero_grad_params() {
        // with plain Adam, L2 decay alone must move a weight whose loss
        // gradient is exactly zero
        let mut params = Params::<f64>::new();
        let id = params.add("w", ArrayD::from_elem(IxDyn(&[3]), 1.0), true);
        let before = params.value(id).clone();
        let mut grads_by_param = HashMap::new();
        grads_by_param.insert(0usize, ArrayD::zeros(IxDyn(&[3])));
        params.accumulate(&SessionGrads {
            by_param: grads_by_param,
        });
        let mut opt = Adam::new(AdamConfig::adam(5e-5, 1e-5));
        opt.step(&mut params);
        let after = params.value(id);
        for (b, a) in before.iter().zip(after.iter()) {
            assert!(a < b, "weight should shrink under coupled decay");
        }
    }

    #[test]
    fn adamw_decay_is_decoupled() {
        // one step with zero gradient: AdamW shrinks weights by exactly lr*wd*w
        let mut params = Params::<f64>::new();
        params.add("w", ArrayD::from_elem(IxDyn(&[2]), 2.0), true);
        let mut grads_by_param = HashMap::new();
        grads_by_param.insert(0usize, ArrayD::zeros(IxDyn(&[2])));
        params.accumulate(&SessionGrads {
            by_param: grads_by_param,
        });
        let mut opt = Adam::new(AdamConfig::adamw(4e-4, 0.01));
        opt.step(&mut params);
        let expected = 2.0 - 4e-4 * 0.01 * 2.0;
        let got = params.value(params.lookup("w").unwrap())[[0]];
        assert!((got - expected).abs() < 1e-12, "got {got}");
    }

    #[test]
    fn adam_converges_on_quadratic() {
        // minimize (w - 3)^2 elementwise
        let mut params = Params::<f64>::new();
        let id = params.add("w", ArrayD::zeros(IxDyn(&[4])), true);
        let mut opt = Adam::new(AdamConfig::adam(0.1, 0.0));
        for _ in 0..300 {
            let g = params.value(id).mapv(|w| 2.0 * (w - 3.0));
            let mut by_param = HashMap::new();
            by_param.insert(0usize, g);
            params.accumulate(&SessionGrads { by_param });
            opt.step(&mut params);
        }
        for &w in params.value(id).iter() {
            assert!((w - 3.0).abs() < 1e-3, "w = {w}");
        }
    }

    #[test]
    fn frozen_params_ignore_stale_grads() {
        let mut params = Params::<f64>::new();
        let id = params.add("w", ArrayD::from_elem(IxDyn(&[2]), 1.0), true);
        let mut by_param = HashMap::new();
        by_param.insert(0usize, ArrayD::from_elem(IxDyn(&[2]), 10.0));
        params.accumulate(&SessionGrads { by_param });
        params.set_trainable(id, false);
        let before = params.value(id).clone();
        let mut opt = Adam::new(AdamConfig::adam(0.1, 0.0));
        opt.step(&mut params);
        assert_eq!(params.value(id), &before);
    }

    #[test]
    fn snapshot_round_trips_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut params = Params::<f32>::new();
        params.add("a.weight", normal(&mut rng, &[3, 4], 0.02), true);
        params.add("a.bias", uniform_fan_in(&mut rng, &[3], 4), false);
        let snap = params.snapshot();
        let json = serde_json::to_string(&snap).unwrap();
        let back: ParamSnapshot = serde_json::from_str(&json).unwrap();

        let mut restored = Params::<f32>::new();
        restored.add("a.weight", ArrayD::zeros(IxDyn(&[3, 4])), false);
        restored.add("a.bias", ArrayD::zeros(IxDyn(&[3])), true);
        restored.load_snapshot(&back).unwrap();
        let a = params.lookup("a.weight").unwrap();
        let b = restored.lookup("a.weight").unwrap();
        assert_eq!(params.value(a), restored.value(b));
        // trainability flags travel with the snapshot
        assert!(restored.is_trainable(b));
        assert!(!restored.is_trainable(restored.lookup("a.bias").unwrap()));
    }

    #[test]
    fn snapshot_shape_mismatch_is_an_error() {
        let mut params = Params::<f32>::new();
        params.add("w", ArrayD::zeros(IxDyn(&[2, 2])), true);
        let snap = params.snapshot();
        let mut other = Params::<f32>::new();
        other.add("w", ArrayD::zeros(IxDyn(&[3, 2])), true);
        assert!(matches!(
            other.load_snapshot(&snap),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn linear_layer_matches_manual_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut params = Params::<f64>::new();
        let lin = Linear::init(&mut params, &mut rng, "fc", 4, 3, true);
        let x = crate::nn::normal::<f64>(&mut rng, &[2, 5, 4], 1.0);
        let mut sess = Session::new(&params, false);
        let xv = sess.input(x.clone());
        let y = lin.forward(&mut sess, xv, None);
        assert_eq!(sess.tape.value(y).shape(), &[2, 5, 3]);

        let w = params.value(lin.w);
        let b = params.value(lin.b.unwrap());
        let y0 = sess.tape.value(y)[[0, 0, 0]];
        let manual: f64 = (0..4).map(|k| x[[0, 0, k]] * w[[0, k]]).sum::<f64>() + b[[0]];
        assert!((y0 - manual).abs() < 1e-12);
    }
}
