//! Parameter storage and the trainable building blocks shared by the
//! supernet and the discrete networks.
//!
//! Parameters live outside any tape in a [`ParamStore`]; every forward pass
//! opens a [`Forward`] context that binds each parameter into the tape as a
//! leaf exactly once. After `backward`, gradients are read back through the
//! same binding, so the optimiser only ever touches store buffers.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Scalar;
use crate::tape::{BnMode, ConvSpec, Tape, TensorId};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Which optimiser owns a trainable entry: model weights are updated by
/// SGD in the weight step, architecture weights by Adam in the alpha step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Weight,
    Arch,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone)]
pub struct ParamEntry<F: Scalar> {
    pub name: String,
    pub value: Tensor<F>,
    pub trainable: bool,
    pub group: ParamGroup,
}

#[derive(Clone)]
pub struct ParamStore<F: Scalar> {
    entries: Vec<ParamEntry<F>>,
    by_name: HashMap<String, ParamId>,
}

impl<F: Scalar> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new(), by_name: HashMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<F>, group: ParamGroup) -> ParamId {
        self.insert(name.into(), value, true, group)
    }

    /// Non-trainable state (running statistics); checkpointed but never updated
    /// by an optimiser.
    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor<F>) -> ParamId {
        self.insert(name.into(), value, false, ParamGroup::Weight)
    }

    fn insert(&mut self, name: String, value: Tensor<F>, trainable: bool, group: ParamGroup) -> ParamId {
        assert!(!self.by_name.contains_key(&name), "duplicate parameter name {name}");
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.clone(), id);
        self.entries.push(ParamEntry { name, value, trainable, group });
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<F> {
        &self.entries[id.0]
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn entries(&self) -> impl Iterator<Item = (ParamId, &ParamEntry<F>)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    /// Two distinct entries mutably (used by batch norm for its stat pair).
    pub fn pair_mut(&mut self, a: ParamId, b: ParamId) -> (&mut Tensor<F>, &mut Tensor<F>) {
        assert_ne!(a.0, b.0, "pair_mut with identical ids");
        if a.0 < b.0 {
            let (lo, hi) = self.entries.split_at_mut(b.0);
            (&mut lo[a.0].value, &mut hi[0].value)
        } else {
            let (lo, hi) = self.entries.split_at_mut(a.0);
            (&mut hi[0].value, &mut lo[b.0].value)
        }
    }

    pub fn trainable_ids(&self, group: ParamGroup) -> Vec<ParamId> {
        self.entries()
            .filter(|(_, e)| e.trainable && e.group == group)
            .map(|(id, _)| id)
            .collect()
    }

    /// Number of trainable floats in a group.
    pub fn trainable_floats(&self, group: ParamGroup) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable && e.group == group)
            .map(|e| e.value.numel())
            .sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|e| e.value.all_finite())
    }
}

/// Deterministic weight initialisation stream.
pub struct Init {
    rng: rand_chacha::ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64, tag: &str) -> Self {
        Init { rng: rng::seeded(seed, tag) }
    }

    /// He-normal fill for a convolution kernel [o, i, kh, kw].
    pub fn conv_kernel<F: Scalar>(&mut self, o: usize, i: usize, kh: usize, kw: usize) -> Tensor<F> {
        let fan_in = (i * kh * kw) as f64;
        Tensor::randn(&[o, i, kh, kw], (2.0 / fan_in).sqrt(), &mut self.rng)
    }

    pub fn linear_weight<F: Scalar>(&mut self, out: usize, inp: usize) -> Tensor<F> {
        Tensor::randn(&[out, inp], (1.0 / inp as f64).sqrt(), &mut self.rng)
    }

    pub fn alpha_noise<F: Scalar>(&mut self, rows: usize, cols: usize, std: f64) -> Tensor<F> {
        Tensor::randn(&[rows, cols], std, &mut self.rng)
    }
}

/// One forward/backward pass over the store.
pub struct Forward<'s, F: Scalar> {
    pub tape: Tape<F>,
    store: &'s mut ParamStore<F>,
    mode: Mode,
    bound: Vec<Option<TensorId>>,
}

impl<'s, F: Scalar> Forward<'s, F> {
    pub fn new(store: &'s mut ParamStore<F>, mode: Mode) -> Self {
        let bound = vec![None; store.len()];
        Forward { tape: Tape::new(), store, mode, bound }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn bn_mode(&self) -> BnMode {
        match self.mode {
            Mode::Train => BnMode::Train,
            Mode::Eval => BnMode::Eval,
        }
    }

    /// Insert a non-trainable network input.
    pub fn input(&mut self, value: Tensor<F>) -> TensorId {
        self.tape.leaf(value, false)
    }

    /// Bind a store parameter as a tape leaf (cached per pass).
    pub fn bind(&mut self, id: ParamId) -> TensorId {
        if let Some(t) = self.bound[id.index()] {
            return t;
        }
        let entry = self.store.entry(id);
        let t = self.tape.leaf(entry.value.clone(), entry.trainable);
        self.bound[id.index()] = Some(t);
        t
    }

    pub fn parts(&mut self) -> (&mut Tape<F>, &mut ParamStore<F>) {
        (&mut self.tape, self.store)
    }

    /// Gradient of the most recent backward target w.r.t. a bound parameter.
    pub fn grad(&self, id: ParamId) -> Option<&[F]> {
        self.bound[id.index()].and_then(|t| self.tape.grad(t))
    }

    /// Gradients for every bound trainable parameter of a group.
    pub fn collect_grads(&self, group: ParamGroup) -> Vec<(ParamId, Vec<F>)> {
        let mut out = Vec::new();
        for (id, entry) in self.store.entries() {
            if !entry.trainable || entry.group != group {
                continue;
            }
            if let Some(g) = self.grad(id) {
                out.push((id, g.to_vec()));
            }
        }
        out
    }
}

// ---- layers -------------------------------------------------------------

/// Convolution without bias (always followed by a batch norm here).
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub spec: ConvSpec,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        init: &mut Init,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        spec: ConvSpec,
    ) -> Self {
        let kernel = init.conv_kernel(out_ch, in_ch / spec.groups, k, k);
        let weight = store.add(format!("{name}.weight"), kernel, ParamGroup::Weight);
        Conv2d { weight, spec }
    }

    pub fn forward<F: Scalar>(&self, fwd: &mut Forward<F>, x: TensorId) -> Result<TensorId> {
        let w = fwd.bind(self.weight);
        fwd.tape.conv2d(x, w, self.spec)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm2d {
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, name: &str, channels: usize) -> Self {
        let gamma =
            store.add(format!("{name}.gamma"), Tensor::full(&[channels], F::one()), ParamGroup::Weight);
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[channels]), ParamGroup::Weight);
        let running_mean = store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels]));
        let running_var =
            store.add_buffer(format!("{name}.running_var"), Tensor::full(&[channels], F::one()));
        BatchNorm2d { gamma, beta, running_mean, running_var }
    }

    pub fn forward<F: Scalar>(&self, fwd: &mut Forward<F>, x: TensorId) -> Result<TensorId> {
        let gamma = fwd.bind(self.gamma);
        let beta = fwd.bind(self.beta);
        let mode = fwd.bn_mode();
        let (tape, store) = fwd.parts();
        let (rm, rv) = store.pair_mut(self.running_mean, self.running_var);
        tape.batch_norm(
            x,
            gamma,
            beta,
            rm.data_mut(),
            rv.data_mut(),
            mode,
            F::from_f64(BN_EPS),
            F::from_f64(BN_MOMENTUM),
        )
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        init: &mut Init,
        name: &str,
        in_features: usize,
        out_features: usize,
    ) -> Self {
        let w = init.linear_weight(out_features, in_features);
        let weight = store.add(format!("{name}.weight"), w, ParamGroup::Weight);
        let bias =
            store.add(format!("{name}.bias"), Tensor::zeros(&[out_features]), ParamGroup::Weight);
        Linear { weight, bias }
    }

    pub fn forward<F: Scalar>(&self, fwd: &mut Forward<F>, x: TensorId) -> Result<TensorId> {
        let w = fwd.bind(self.weight);
        let b = fwd.bind(self.bias);
        fwd.tape.linear(x, w, b)
    }
}

/// ReLU -> KxK convolution -> BN, the standard block of every convolutional
/// candidate operation and of the cell input preprocessing.
#[derive(Clone, Debug)]
pub struct ReluConvBn {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl ReluConvBn {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        init: &mut Init,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        spec: ConvSpec,
    ) -> Self {
        let conv = Conv2d::new(store, init, &format!("{name}.conv"), in_ch, out_ch, k, spec);
        let bn = BatchNorm2d::new(store, &format!("{name}.bn"), out_ch);
        ReluConvBn { conv, bn }
    }

    pub fn forward<F: Scalar>(&self, fwd: &mut Forward<F>, x: TensorId) -> Result<TensorId> {
        let r = fwd.tape.relu(x);
        let c = self.conv.forward(fwd, r)?;
        self.bn.forward(fwd, c)
    }
}

/// Channel-preserving spatial halving: two offset stride-2 1x1 convolutions
/// concatenated, then BN. Keeps the edge trainable where a naive subsample
/// would not be.
#[derive(Clone, Debug)]
pub struct FactorizedReduce {
    conv_even: Conv2d,
    conv_odd: Conv2d,
    bn: BatchNorm2d,
}

impl FactorizedReduce {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        init: &mut Init,
        name: &str,
        in_ch: usize,
        out_ch: usize,
    ) -> Self {
        let spec = ConvSpec::plain(2, 0);
        let half_hi = out_ch - out_ch / 2;
        let half_lo = out_ch / 2;
        let conv_even = Conv2d::new(store, init, &format!("{name}.conv_even"), in_ch, half_hi, 1, spec);
        let conv_odd = Conv2d::new(store, init, &format!("{name}.conv_odd"), in_ch, half_lo, 1, spec);
        let bn = BatchNorm2d::new(store, &format!("{name}.bn"), out_ch);
        FactorizedReduce { conv_even, conv_odd, bn }
    }

    pub fn forward<F: Scalar>(&self, fwd: &mut Forward<F>, x: TensorId) -> Result<TensorId> {
        let r = fwd.tape.relu(x);
        let a = self.conv_even.forward(fwd, r)?;
        let shifted = fwd.tape.shift2d(r, 1, 1)?;
        let b = self.conv_odd.forward(fwd, shifted)?;
        let cat = fwd.tape.concat_channels(&[a, b])?;
        self.bn.forward(fwd, cat)
    }
}

/// Shape check helper for network assembly.
pub fn expect_spatial(op: &'static str, shape: &[usize], h: usize, w: usize) -> Result<()> {
    if shape.len() != 4 || shape[2] != h || shape[3] != w {
        return Err(Error::contract(op, format!("expected spatial {h}x{w}, got {shape:?}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn store_binds_each_param_once() {
        let mut store = ParamStore::<f64>::new();
        let mut init = Init::new(0, "t");
        let lin = Linear::new(&mut store, &mut init, "clf", 8, 4);
        let mut fwd = Forward::new(&mut store, Mode::Train);
        let a = fwd.bind(lin.weight);
        let b = fwd.bind(lin.weight);
        assert_eq!(a, b);
        assert_eq!(fwd.tape.len(), 1);
    }

    #[test]
    fn factorized_reduce_halves_odd_extents() {
        let mut store = ParamStore::<f64>::new();
        let mut init = Init::new(1, "t");
        let fr = FactorizedReduce::new(&mut store, &mut init, "fr", 6, 6);
        let mut rng = crate::rng::seeded(2, "x");
        let x = Tensor::randn(&[1, 6, 25, 9], 1.0, &mut rng);
        let mut fwd = Forward::new(&mut store, Mode::Train);
        let xid = fwd.input(x);
        let y = fr.forward(&mut fwd, xid).unwrap();
        assert_eq!(fwd.tape.shape(y), &[1, 6, 13, 5]);
    }

    #[test]
    fn trainable_float_accounting() {
        let mut store = ParamStore::<f32>::new();
        let mut init = Init::new(3, "t");
        let _rcb = ReluConvBn::new(&mut store, &mut init, "b", 4, 8, 3, ConvSpec::plain(1, 1));
        // conv 8*4*3*3 + bn gamma/beta 2*8; running stats are buffers
        assert_eq!(store.trainable_floats(ParamGroup::Weight), 8 * 4 * 9 + 16);
    }

    #[test]
    fn grads_flow_back_to_store_params() {
        let mut store = ParamStore::<f64>::new();
        let mut init = Init::new(4, "t");
        let lin = Linear::new(&mut store, &mut init, "clf", 3, 2);
        let mut fwd = Forward::new(&mut store, Mode::Train);
        let x = fwd.input(Tensor::full(&[1, 3], 1.0));
        let y = lin.forward(&mut fwd, x).unwrap();
        let loss = fwd.tape.sum(y);
        fwd.tape.backward(loss).unwrap();
        let grads = fwd.collect_grads(ParamGroup::Weight);
        assert_eq!(grads.len(), 2);
        let bias_grad = fwd.grad(lin.bias).unwrap();
        assert_eq!(bias_grad, &[1.0, 1.0]);
    }
}
