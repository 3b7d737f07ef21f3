//! Alternating bi-level optimisation.
//!
//! Each step first updates the architecture weights by Adam on the gradient
//! of the validation loss at the current model weights (first-order), then
//! updates the model weights by SGD with momentum on the training loss at the
//! just-updated architecture. The weight learning rate follows a cosine
//! annealing schedule over epochs; weight gradients are clipped at a global
//! norm of 5.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::checkpoint::Checkpoint;
use crate::data::{Batch, BatchSource, Split};
use crate::error::{Error, Result};
use crate::nn::{Forward, Init, Mode, ParamGroup, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::supernet::{init_arch_params, mean_row_entropy, Supernet, SupernetConfig};
use crate::tape::TensorId;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct SearchConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub w_lr: f64,
    pub w_lr_min: f64,
    pub w_momentum: f64,
    pub w_weight_decay: f64,
    pub grad_clip: f64,
    pub alpha_lr: f64,
    pub alpha_beta1: f64,
    pub alpha_beta2: f64,
    pub alpha_weight_decay: f64,
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            epochs: 50,
            batch_size: 16,
            w_lr: 0.025,
            w_lr_min: 0.0,
            w_momentum: 0.9,
            w_weight_decay: 3e-4,
            grad_clip: 5.0,
            alpha_lr: 3e-4,
            alpha_beta1: 0.5,
            alpha_beta2: 0.999,
            alpha_weight_decay: 1e-3,
            seed: 0,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::contract("SearchConfig", "epochs must be >= 1".to_string()));
        }
        if self.batch_size == 0 {
            return Err(Error::contract("SearchConfig", "batch_size must be >= 1".to_string()));
        }
        if self.w_lr < 0.0 || self.alpha_lr < 0.0 {
            return Err(Error::contract("SearchConfig", "learning rates must be >= 0".to_string()));
        }
        Ok(())
    }
}

/// Cosine annealing: lr_min + (lr_max - lr_min) (1 + cos(pi epoch / total)) / 2.
pub fn cosine_lr(epoch: usize, total: usize, lr_max: f64, lr_min: f64) -> f64 {
    debug_assert!(epoch <= total);
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * epoch as f64 / total as f64).cos())
}

/// SGD momentum buffers, keyed by parameter.
pub struct SgdState<F: Scalar> {
    v: HashMap<ParamId, Vec<F>>,
}

impl<F: Scalar> Default for SgdState<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> SgdState<F> {
    pub fn new() -> Self {
        SgdState { v: HashMap::new() }
    }
}

/// v <- momentum v + (grad + weight_decay param); param <- param - lr v
pub fn sgd_momentum_step<F: Scalar>(
    store: &mut ParamStore<F>,
    grads: &[(ParamId, Vec<F>)],
    state: &mut SgdState<F>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    let lr = F::from_f64(lr);
    let mom = F::from_f64(momentum);
    let wd = F::from_f64(weight_decay);
    for (id, grad) in grads {
        let v = state.v.entry(*id).or_insert_with(|| vec![F::zero(); grad.len()]);
        let param = store.get_mut(*id).data_mut();
        for ((pv, gv), vv) in param.iter_mut().zip(grad).zip(v.iter_mut()) {
            *vv = mom * *vv + (*gv + wd * *pv);
            *pv = *pv - lr * *vv;
        }
    }
}

/// Bias-corrected Adam moment buffers plus the shared step counter.
pub struct AdamState<F: Scalar> {
    m: HashMap<ParamId, Vec<F>>,
    v: HashMap<ParamId, Vec<F>>,
    t: u64,
}

impl<F: Scalar> Default for AdamState<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> AdamState<F> {
    pub fn new() -> Self {
        AdamState { m: HashMap::new(), v: HashMap::new(), t: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

pub const ADAM_EPS: f64 = 1e-8;

/// Standard bias-corrected Adam; weight decay is added into the gradient.
#[allow(clippy::too_many_arguments)]
pub fn adam_step<F: Scalar>(
    store: &mut ParamStore<F>,
    grads: &[(ParamId, Vec<F>)],
    state: &mut AdamState<F>,
    lr: f64,
    beta1: f64,
    beta2: f64,
    weight_decay: f64,
    eps: f64,
) {
    state.t += 1;
    let t = state.t as i32;
    let lr = F::from_f64(lr);
    let b1 = F::from_f64(beta1);
    let b2 = F::from_f64(beta2);
    let wd = F::from_f64(weight_decay);
    let eps = F::from_f64(eps);
    let c1 = F::one() - F::from_f64(beta1.powi(t));
    let c2 = F::one() - F::from_f64(beta2.powi(t));
    for (id, grad) in grads {
        let m = state.m.entry(*id).or_insert_with(|| vec![F::zero(); grad.len()]);
        let v = state.v.entry(*id).or_insert_with(|| vec![F::zero(); grad.len()]);
        let param = store.get_mut(*id).data_mut();
        for (((pv, gv), mv), vv) in param.iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
            let g = *gv + wd * *pv;
            *mv = b1 * *mv + (F::one() - b1) * g;
            *vv = b2 * *vv + (F::one() - b2) * g * g;
            let mhat = *mv / c1;
            let vhat = *vv / c2;
            *pv = *pv - lr * mhat / (vhat.sqrt() + eps);
        }
    }
}

/// Scale gradients so their global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm<F: Scalar>(grads: &mut [(ParamId, Vec<F>)], max_norm: f64) -> f64 {
    let mut sq = 0.0f64;
    for (_, g) in grads.iter() {
        for v in g {
            let x = v.as_f64();
            sq += x * x;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = F::from_f64(max_norm / norm);
        for (_, g) in grads.iter_mut() {
            for v in g.iter_mut() {
                *v = *v * scale;
            }
        }
    }
    norm
}

fn forward_loss<F: Scalar>(
    net: &Supernet,
    fwd: &mut Forward<F>,
    batch: &Batch<F>,
) -> Result<TensorId> {
    let x = fwd.input(batch.features.clone());
    let logits = net.forward(fwd, x)?;
    fwd.tape.softmax_cross_entropy(logits, &batch.labels)
}

/// Adam update of the architecture weights from the validation loss at the
/// current model weights. Returns the validation loss.
pub fn alpha_step<F: Scalar>(
    net: &Supernet,
    store: &mut ParamStore<F>,
    val_batch: &Batch<F>,
    adam: &mut AdamState<F>,
    cfg: &SearchConfig,
) -> Result<F> {
    if val_batch.is_empty() {
        return Err(Error::contract("alpha_step", "empty validation batch".to_string()));
    }
    let mut fwd = Forward::new(store, Mode::Train);
    let loss = forward_loss(net, &mut fwd, val_batch)?;
    fwd.tape.backward(loss)?;
    let loss_value = fwd.tape.value(loss).item();
    let grads = fwd.collect_grads(ParamGroup::Arch);
    drop(fwd);
    adam_step(
        store,
        &grads,
        adam,
        cfg.alpha_lr,
        cfg.alpha_beta1,
        cfg.alpha_beta2,
        cfg.alpha_weight_decay,
        ADAM_EPS,
    );
    Ok(loss_value)
}

/// SGD update of the model weights from the training loss. Returns the
/// training loss.
pub fn weight_step<F: Scalar>(
    net: &Supernet,
    store: &mut ParamStore<F>,
    train_batch: &Batch<F>,
    sgd: &mut SgdState<F>,
    lr: f64,
    cfg: &SearchConfig,
) -> Result<F> {
    if train_batch.is_empty() {
        return Err(Error::contract("weight_step", "empty training batch".to_string()));
    }
    let mut fwd = Forward::new(store, Mode::Train);
    let loss = forward_loss(net, &mut fwd, train_batch)?;
    fwd.tape.backward(loss)?;
    let loss_value = fwd.tape.value(loss).item();
    let mut grads = fwd.collect_grads(ParamGroup::Weight);
    drop(fwd);
    clip_global_norm(&mut grads, cfg.grad_clip);
    sgd_momentum_step(store, &grads, sgd, lr, cfg.w_momentum, cfg.w_weight_decay);
    Ok(loss_value)
}

/// One alternating step: alpha first (validation batch), then the weights
/// (training batch) at the updated alpha.
#[allow(clippy::too_many_arguments)]
pub fn search_step<F: Scalar>(
    net: &Supernet,
    store: &mut ParamStore<F>,
    train_batch: &Batch<F>,
    val_batch: &Batch<F>,
    cfg: &SearchConfig,
    w_lr_now: f64,
    sgd: &mut SgdState<F>,
    adam: &mut AdamState<F>,
) -> Result<(F, F)> {
    let val_loss = alpha_step(net, store, val_batch, adam, cfg)?;
    let train_loss = weight_step(net, store, train_batch, sgd, w_lr_now, cfg)?;
    Ok((train_loss, val_loss))
}

pub struct EvalStats {
    pub accuracy: f64,
    pub loss: f64,
    pub count: usize,
    /// confusion[true][predicted]
    pub confusion: Vec<Vec<usize>>,
}

/// Run a full split in eval mode through an arbitrary model closure.
pub fn evaluate_split<F: Scalar>(
    model: impl Fn(&mut Forward<F>, TensorId) -> Result<TensorId>,
    store: &mut ParamStore<F>,
    data: &mut dyn BatchSource<F>,
    split: Split,
    batch_size: usize,
    epoch_tag: u64,
) -> Result<EvalStats> {
    let k = data.num_classes();
    let mut confusion = vec![vec![0usize; k]; k];
    let mut correct = 0usize;
    let mut count = 0usize;
    let mut loss_sum = 0.0f64;
    let mut batches = 0usize;
    data.begin_epoch(split, epoch_tag);
    while let Some(batch) = data.next_batch(split, batch_size) {
        let mut fwd = Forward::new(store, Mode::Eval);
        let x = fwd.input(batch.features.clone());
        let logits = model(&mut fwd, x)?;
        let loss = fwd.tape.softmax_cross_entropy(logits, &batch.labels)?;
        loss_sum += fwd.tape.value(loss).item().as_f64();
        batches += 1;
        let values = fwd.tape.value(logits).data();
        for (row, &label) in values.chunks(k).zip(&batch.labels) {
            let mut best = 0usize;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            confusion[label][best] += 1;
            if best == label {
                correct += 1;
            }
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::contract("evaluate_split", "empty split".to_string()));
    }
    Ok(EvalStats {
        accuracy: correct as f64 / count as f64,
        loss: loss_sum / batches as f64,
        count,
        confusion,
    })
}

#[derive(Clone, Copy, Debug)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub alpha_entropy: f64,
    pub lr: f64,
}

pub const METRICS_HEADER: &str = "epoch,train_loss,val_loss,val_acc,alpha_entropy,lr";

pub struct SearchOutcome<F: Scalar> {
    pub alpha_normal: Tensor<F>,
    pub alpha_reduce: Tensor<F>,
    pub history: Vec<EpochMetrics>,
}

fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("search_epoch{epoch}.ckpt"))
}

/// Most recent `search_epoch{N}.ckpt` in the directory, by N.
fn latest_checkpoint(dir: &Path) -> Option<(usize, PathBuf)> {
    let mut best: Option<(usize, PathBuf)> = None;
    for entry in std::fs::read_dir(dir).ok()?.flatten() {
        let name = entry.file_name();
        let name = name.to_string_lossy();
        if let Some(num) = name.strip_prefix("search_epoch").and_then(|s| s.strip_suffix(".ckpt")) {
            if let Ok(n) = num.parse::<usize>() {
                if best.as_ref().map_or(true, |(b, _)| n > *b) {
                    best = Some((n, entry.path()));
                }
            }
        }
    }
    best
}

fn save_search_state<F: Scalar>(
    path: &Path,
    store: &ParamStore<F>,
    sgd: &SgdState<F>,
    adam: &AdamState<F>,
    history: &[EpochMetrics],
) -> Result<()> {
    let mut ckpt = Checkpoint::from_store(store);
    for (id, buf) in &sgd.v {
        let name = format!("opt.sgd.v.{}", store.entry(*id).name);
        ckpt.insert(name, &Tensor::new(vec![buf.len()], buf.clone()).expect("flat"));
    }
    for (id, buf) in &adam.m {
        let name = format!("opt.adam.m.{}", store.entry(*id).name);
        ckpt.insert(name, &Tensor::new(vec![buf.len()], buf.clone()).expect("flat"));
    }
    for (id, buf) in &adam.v {
        let name = format!("opt.adam.v.{}", store.entry(*id).name);
        ckpt.insert(name, &Tensor::new(vec![buf.len()], buf.clone()).expect("flat"));
    }
    ckpt.insert("opt.adam.t", &Tensor::scalar(adam.t as f64));
    let mut rows = Vec::with_capacity(history.len() * 6);
    for m in history {
        rows.extend_from_slice(&[
            m.epoch as f64,
            m.train_loss,
            m.val_loss,
            m.val_acc,
            m.alpha_entropy,
            m.lr,
        ]);
    }
    if !history.is_empty() {
        ckpt.insert("meta.history", &Tensor::new(vec![history.len(), 6], rows).expect("rows"));
    }
    ckpt.save(path)
}

fn load_search_state<F: Scalar>(
    path: &Path,
    store: &mut ParamStore<F>,
    sgd: &mut SgdState<F>,
    adam: &mut AdamState<F>,
) -> Result<Vec<EpochMetrics>> {
    let ckpt = Checkpoint::load(path)?;
    ckpt.apply_to_store(store)?;
    let restore = |prefix: &str, map: &mut HashMap<ParamId, Vec<F>>| {
        for name in ckpt.names() {
            if let Some(pname) = name.strip_prefix(prefix) {
                if let Some(id) = store.lookup(pname) {
                    let t = ckpt.get(name).expect("listed name");
                    map.insert(id, t.data().iter().map(|&v| F::from_f64(v as f64)).collect());
                }
            }
        }
    };
    restore("opt.sgd.v.", &mut sgd.v);
    restore("opt.adam.m.", &mut adam.m);
    restore("opt.adam.v.", &mut adam.v);
    adam.t = ckpt
        .get("opt.adam.t")
        .map(|t| t.data()[0] as u64)
        .ok_or_else(|| Error::Checkpoint("missing opt.adam.t".into()))?;
    let mut history = Vec::new();
    if let Some(h) = ckpt.get("meta.history") {
        for row in h.data().chunks(6) {
            history.push(EpochMetrics {
                epoch: row[0] as usize,
                train_loss: row[1] as f64,
                val_loss: row[2] as f64,
                val_acc: row[3] as f64,
                alpha_entropy: row[4] as f64,
                lr: row[5] as f64,
            });
        }
    }
    Ok(history)
}

fn rewrite_metrics(path: &Path, history: &[EpochMetrics]) -> Result<()> {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for m in history {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            m.epoch, m.train_loss, m.val_loss, m.val_acc, m.alpha_entropy, m.lr
        ));
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}

/// Full search: builds the supernet from the seed, runs `epochs` epochs of
/// alternating steps with cosine-annealed weight learning rate, checkpoints
/// after every epoch, and resumes from the latest checkpoint in `out_dir`
/// if one exists.
pub fn run_search<F: Scalar>(
    data: &mut dyn BatchSource<F>,
    cfg: &SearchConfig,
    net_cfg: SupernetConfig,
    out_dir: Option<&Path>,
) -> Result<SearchOutcome<F>> {
    cfg.validate()?;
    net_cfg.validate()?;
    let mut store = ParamStore::<F>::new();
    let arch = init_arch_params(&mut store, net_cfg.op_set, cfg.seed);
    let alpha_normal = arch.alpha_normal;
    let alpha_reduce = arch.alpha_reduce;
    let mut init = Init::new(cfg.seed, "weights");
    let net = Supernet::build(&mut store, &mut init, net_cfg, arch)?;

    let mut sgd = SgdState::new();
    let mut adam = AdamState::new();
    let mut history: Vec<EpochMetrics> = Vec::new();
    let mut start_epoch = 0usize;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        if let Some((epoch, path)) = latest_checkpoint(dir) {
            history = load_search_state(&path, &mut store, &mut sgd, &mut adam)?;
            history.truncate(epoch);
            start_epoch = epoch;
        }
    }

    for epoch in start_epoch..cfg.epochs {
        let lr = cosine_lr(epoch, cfg.epochs, cfg.w_lr, cfg.w_lr_min);
        data.begin_epoch(Split::Train, epoch as u64);
        data.begin_epoch(Split::Val, epoch as u64);
        let mut val_cycle = 0u64;
        let mut train_sum = 0.0;
        let mut val_sum = 0.0;
        let mut steps = 0usize;
        while let Some(train_batch) = data.next_batch(Split::Train, cfg.batch_size) {
            let val_batch = match data.next_batch(Split::Val, cfg.batch_size) {
                Some(b) => b,
                None => {
                    // validation split exhausted mid-epoch: cycle it
                    val_cycle += 1;
                    data.begin_epoch(Split::Val, (epoch as u64) << 16 | val_cycle);
                    data.next_batch(Split::Val, cfg.batch_size).ok_or_else(|| {
                        Error::contract("run_search", "validation split is empty".to_string())
                    })?
                }
            };
            let (tl, vl) =
                search_step(&net, &mut store, &train_batch, &val_batch, cfg, lr, &mut sgd, &mut adam)?;
            train_sum += tl.as_f64();
            val_sum += vl.as_f64();
            steps += 1;
        }
        if steps == 0 {
            return Err(Error::contract("run_search", "training split is empty".to_string()));
        }
        if !store.all_finite() {
            return Err(Error::contract("run_search", format!("non-finite parameter after epoch {epoch}")));
        }
        let stats =
            evaluate_split(|fwd, x| net.forward(fwd, x), &mut store, data, Split::Val, cfg.batch_size, epoch as u64)?;
        let entropy_n = mean_row_entropy(store.get(alpha_normal));
        let entropy_r = mean_row_entropy(store.get(alpha_reduce));
        history.push(EpochMetrics {
            epoch: epoch + 1,
            train_loss: train_sum / steps as f64,
            val_loss: val_sum / steps as f64,
            val_acc: stats.accuracy,
            alpha_entropy: 0.5 * (entropy_n + entropy_r),
            lr,
        });
        if let Some(dir) = out_dir {
            rewrite_metrics(&dir.join("metrics.csv"), &history)?;
            save_search_state(&checkpoint_path(dir, epoch + 1), &store, &sgd, &adam, &history)?;
        }
    }

    Ok(SearchOutcome {
        alpha_normal: store.get(alpha_normal).clone(),
        alpha_reduce: store.get(alpha_reduce).clone(),
        history,
    })
}
