//! The continuous search network.
//!
//! A cell is a DAG over 7 nodes: nodes 0 and 1 are the outputs of the two
//! previous cells (preprocessed to the cell's working width), nodes 2-5 are
//! intermediate, and node 6 concatenates nodes 2-5 along channels. Every
//! intermediate node receives one mixed edge from each earlier node - 14
//! mixed edges per cell - and each mixed edge computes the softmax-weighted
//! sum of every candidate operation applied to its source.
//!
//! All normal cells share one alpha matrix, all reduction cells another.
//! Stacking follows the rule that every two normal cells are followed by a
//! reduction cell (cell index i is a reduction iff i % 3 == 2), and the
//! working width doubles at each reduction.

use crate::error::{Error, Result};
use crate::nn::{
    BatchNorm2d, Conv2d, FactorizedReduce, Forward, Init, Linear, ParamGroup, ParamId, ParamStore,
    ReluConvBn,
};
use crate::ops::{build_op, OpInstance, OpSet};
use crate::scalar::Scalar;
use crate::tape::{ConvSpec, TensorId};
use crate::tensor::Tensor;

pub const NUM_INTERMEDIATE: usize = 4;
pub const NUM_EDGES: usize = 14; // 2 + 3 + 4 + 5

/// (node, predecessor) pairs in row order; node indices run 2..=5,
/// predecessors 0..node.
pub fn edge_list() -> Vec<(usize, usize)> {
    let mut edges = Vec::with_capacity(NUM_EDGES);
    for node in 2..2 + NUM_INTERMEDIATE {
        for pred in 0..node {
            edges.push((node, pred));
        }
    }
    edges
}

/// Alpha row of the edge from `pred` into `node`.
pub fn edge_row(node: usize, pred: usize) -> usize {
    debug_assert!((2..6).contains(&node) && pred < node);
    let offset = match node {
        2 => 0,
        3 => 2,
        4 => 5,
        _ => 9,
    };
    offset + pred
}

/// Architecture weights: one row per edge, one column per candidate op.
pub struct ArchParams {
    pub alpha_normal: ParamId,
    pub alpha_reduce: ParamId,
    pub op_set: OpSet,
}

impl ArchParams {
    pub fn num_params(&self) -> usize {
        2 * NUM_EDGES * self.op_set.size()
    }
}

/// Near-uniform initial mixture: zero-mean noise with sigma 1e-3 keeps every
/// softmax row within 1e-3 of uniform while breaking ties deterministically.
pub fn init_arch_params<F: Scalar>(store: &mut ParamStore<F>, op_set: OpSet, seed: u64) -> ArchParams {
    let mut init = Init::new(seed, "alpha");
    let k = op_set.size();
    let normal = init.alpha_noise(NUM_EDGES, k, 1e-3);
    let reduce = init.alpha_noise(NUM_EDGES, k, 1e-3);
    let alpha_normal = store.add("alpha_normal", normal, ParamGroup::Arch);
    let alpha_reduce = store.add("alpha_reduce", reduce, ParamGroup::Arch);
    ArchParams { alpha_normal, alpha_reduce, op_set }
}

/// Mean over rows of the softmax entropy, in nats.
pub fn mean_row_entropy<F: Scalar>(alpha: &Tensor<F>) -> f64 {
    let k = *alpha.shape().last().expect("non-empty alpha");
    let mut total = 0.0;
    let mut rows = 0usize;
    for row in alpha.data().chunks(k) {
        let mx = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v.as_f64()));
        let exps: Vec<f64> = row.iter().map(|&v| (v.as_f64() - mx).exp()).collect();
        let z: f64 = exps.iter().sum();
        let mut h = 0.0;
        for e in exps {
            let p = e / z;
            if p > 0.0 {
                h -= p * p.ln();
            }
        }
        total += h;
        rows += 1;
    }
    total / rows as f64
}

/// Softmax-weighted sum over candidate ops, reading weights from the
/// already-softmaxed tensor `weights` starting at flat offset `base`.
fn mixed_sum<F: Scalar>(
    fwd: &mut Forward<F>,
    x: TensorId,
    weights: TensorId,
    base: usize,
    ops: &[OpInstance],
) -> Result<TensorId> {
    let mut acc: Option<TensorId> = None;
    for (o, op) in ops.iter().enumerate() {
        let y = op.forward(fwd, x)?;
        let s = fwd.tape.select(weights, base + o)?;
        let term = fwd.tape.scale(y, s)?;
        acc = Some(match acc {
            None => term,
            Some(a) => fwd.tape.add(a, term)?,
        });
    }
    acc.ok_or_else(|| Error::contract("mixed_edge_forward", "empty op list".to_string()))
}

/// One mixed edge in isolation: softmax the raw alpha row and weight every
/// candidate's output by its probability.
pub fn mixed_edge_forward<F: Scalar>(
    fwd: &mut Forward<F>,
    x: TensorId,
    alpha_row: TensorId,
    ops: &[OpInstance],
) -> Result<TensorId> {
    if fwd.tape.value(alpha_row).numel() != ops.len() {
        return Err(Error::contract(
            "mixed_edge_forward",
            format!("{} alpha entries for {} ops", fwd.tape.value(alpha_row).numel(), ops.len()),
        ));
    }
    let w = fwd.tape.softmax_rows(alpha_row)?;
    mixed_sum(fwd, x, w, 0, ops)
}

/// Aligns a cell input to the working width: a 1x1 ReLU-Conv-BN normally, a
/// factorized reduce when the producing side of the skip path was a
/// reduction (the input is spatially twice as large as its sibling).
#[derive(Clone)]
pub(crate) enum Preprocess {
    Std(ReluConvBn),
    Reduce(FactorizedReduce),
}

impl Preprocess {
    pub(crate) fn build<F: Scalar>(
        store: &mut ParamStore<F>,
        init: &mut Init,
        name: &str,
        c_in: usize,
        c_out: usize,
        reduce: bool,
    ) -> Self {
        if reduce {
            Preprocess::Reduce(FactorizedReduce::new(store, init, name, c_in, c_out))
        } else {
            Preprocess::Std(ReluConvBn::new(store, init, name, c_in, c_out, 1, ConvSpec::plain(1, 0)))
        }
    }

    pub(crate) fn forward<F: Scalar>(&self, fwd: &mut Forward<F>, x: TensorId) -> Result<TensorId> {
        match self {
            Preprocess::Std(p) => p.forward(fwd, x),
            Preprocess::Reduce(p) => p.forward(fwd, x),
        }
    }
}

pub struct SearchCell {
    pub reduction: bool,
    pub c_work: usize,
    pre0: Preprocess,
    pre1: ReluConvBn,
    /// 14 mixed edges, each holding one instance per candidate op.
    edges: Vec<Vec<OpInstance>>,
}

impl SearchCell {
    /// `reduction_prev` marks that the cell producing `s_prev_prev`'s
    /// successor was a reduction, i.e. the two inputs disagree spatially and
    /// input 0 must be factorized-reduced into alignment.
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        init: &mut Init,
        name: &str,
        op_set: OpSet,
        c_prev_prev: usize,
        c_prev: usize,
        c_work: usize,
        reduction: bool,
        reduction_prev: bool,
    ) -> Result<Self> {
        let pre0 = Preprocess::build(store, init, &format!("{name}.pre0"), c_prev_prev, c_work, reduction_prev);
        let pre1 = ReluConvBn::new(
            store,
            init,
            &format!("{name}.pre1"),
            c_prev,
            c_work,
            1,
            ConvSpec::plain(1, 0),
        );
        let mut edges = Vec::with_capacity(NUM_EDGES);
        for (row, (node, pred)) in edge_list().into_iter().enumerate() {
            let stride = if reduction && pred < 2 { 2 } else { 1 };
            let mut ops = Vec::with_capacity(op_set.size());
            for &kind in op_set.ops() {
                let op_name = format!("{name}.e{row}_{node}_{pred}.{}", kind.name());
                ops.push(build_op(store, init, &op_name, kind, c_work, stride)?);
            }
            edges.push(ops);
        }
        Ok(SearchCell { reduction, c_work, pre0, pre1, edges })
    }

    /// `weights` is the softmaxed [14, |O|] matrix for this cell kind.
    pub fn forward<F: Scalar>(
        &self,
        fwd: &mut Forward<F>,
        s_prev_prev: TensorId,
        s_prev: TensorId,
        weights: TensorId,
    ) -> Result<TensorId> {
        let k = self.edges[0].len();
        let s0 = self.pre0.forward(fwd, s_prev_prev)?;
        let s1 = self.pre1.forward(fwd, s_prev)?;
        let sh0 = fwd.tape.shape(s0).to_vec();
        let sh1 = fwd.tape.shape(s1).to_vec();
        if sh0 != sh1 {
            return Err(Error::contract(
                "cell_forward",
                format!("preprocessed inputs disagree: {sh0:?} vs {sh1:?}"),
            ));
        }
        let mut states = vec![s0, s1];
        for node in 2..2 + NUM_INTERMEDIATE {
            let mut acc: Option<TensorId> = None;
            for pred in 0..node {
                let row = edge_row(node, pred);
                let term = mixed_sum(fwd, states[pred], weights, row * k, &self.edges[row])?;
                acc = Some(match acc {
                    None => term,
                    Some(a) => fwd.tape.add(a, term)?,
                });
            }
            states.push(acc.expect("node has predecessors"));
        }
        fwd.tape.concat_channels(&states[2..])
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SupernetConfig {
    pub num_cells: usize,
    pub init_channels: usize,
    pub num_classes: usize,
    pub op_set: OpSet,
}

impl Default for SupernetConfig {
    fn default() -> Self {
        SupernetConfig { num_cells: 6, init_channels: 16, num_classes: 12, op_set: OpSet::Nas1 }
    }
}

impl SupernetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_cells == 0 {
            return Err(Error::contract("SupernetConfig", "num_cells must be >= 1".to_string()));
        }
        if self.init_channels == 0 {
            return Err(Error::contract("SupernetConfig", "init_channels must be >= 1".to_string()));
        }
        if self.num_classes < 2 {
            return Err(Error::contract("SupernetConfig", "num_classes must be >= 2".to_string()));
        }
        Ok(())
    }
}

/// Cell index i is a reduction iff i % 3 == 2: every two normal cells are
/// followed by a reduction cell.
pub fn is_reduction_position(index: usize) -> bool {
    index % 3 == 2
}

pub struct Supernet {
    pub cfg: SupernetConfig,
    pub arch: ArchParams,
    head_conv: Conv2d,
    head_bn: BatchNorm2d,
    cells: Vec<SearchCell>,
    classifier: Linear,
}

impl Supernet {
    /// Head: 3x3 convolution from 1 channel to 3 * init_channels, BN.
    /// Stem: global average pool + linear classifier.
    pub fn build<F: Scalar>(
        store: &mut ParamStore<F>,
        init: &mut Init,
        cfg: SupernetConfig,
        arch: ArchParams,
    ) -> Result<Self> {
        cfg.validate()?;
        let c_head = 3 * cfg.init_channels;
        let head_conv = Conv2d::new(store, init, "head.conv", 1, c_head, 3, ConvSpec::plain(1, 1));
        let head_bn = BatchNorm2d::new(store, "head.bn", c_head);
        let mut cells = Vec::with_capacity(cfg.num_cells);
        let (mut c_pp, mut c_p) = (c_head, c_head);
        let mut c_work = cfg.init_channels;
        let mut reduction_prev = false;
        for i in 0..cfg.num_cells {
            let reduction = is_reduction_position(i);
            if reduction {
                c_work *= 2;
            }
            let cell = SearchCell::new(
                store,
                init,
                &format!("cells.{i}"),
                cfg.op_set,
                c_pp,
                c_p,
                c_work,
                reduction,
                reduction_prev,
            )?;
            cells.push(cell);
            c_pp = c_p;
            c_p = NUM_INTERMEDIATE * c_work;
            reduction_prev = reduction;
        }
        let classifier = Linear::new(store, init, "classifier", c_p, cfg.num_classes);
        Ok(Supernet { cfg, arch, head_conv, head_bn, cells, classifier })
    }

    pub fn cells(&self) -> &[SearchCell] {
        &self.cells
    }

    pub fn forward<F: Scalar>(&self, fwd: &mut Forward<F>, x: TensorId) -> Result<TensorId> {
        let c = self.head_conv.forward(fwd, x)?;
        let stem = self.head_bn.forward(fwd, c)?;
        let alpha_n = fwd.bind(self.arch.alpha_normal);
        let alpha_r = fwd.bind(self.arch.alpha_reduce);
        let w_normal = fwd.tape.softmax_rows(alpha_n)?;
        let w_reduce = fwd.tape.softmax_rows(alpha_r)?;
        let (mut s_pp, mut s_p) = (stem, stem);
        for cell in &self.cells {
            let w = if cell.reduction { w_reduce } else { w_normal };
            let out = cell.forward(fwd, s_pp, s_p, w)?;
            s_pp = s_p;
            s_p = out;
        }
        let pooled = fwd.tape.global_avg_pool(s_p)?;
        self.classifier.forward(fwd, pooled)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Mode;
    use crate::rng::seeded;

    fn build_edge_ops<F: Scalar>(
        store: &mut ParamStore<F>,
        seed: u64,
        op_set: OpSet,
        channels: usize,
        stride: usize,
    ) -> Vec<OpInstance> {
        let mut init = Init::new(seed, "edge");
        op_set
            .ops()
            .iter()
            .map(|&k| build_op(store, &mut init, &format!("e.{}", k.name()), k, channels, stride).unwrap())
            .collect()
    }

    #[test]
    fn edge_topology_has_fourteen_rows() {
        let edges = edge_list();
        assert_eq!(edges.len(), NUM_EDGES);
        for (row, (node, pred)) in edges.iter().enumerate() {
            assert_eq!(edge_row(*node, *pred), row);
            assert!(*pred < *node);
        }
    }

    #[test]
    fn mixed_edge_uniform_alpha_weights_every_op_equally() {
        let mut store = ParamStore::<f64>::new();
        let ops = build_edge_ops(&mut store, 1, OpSet::Nas2, 4, 1);
        let mut rng = seeded(2, "x");
        let x = Tensor::randn(&[1, 4, 6, 6], 1.0, &mut rng);

        // oracle: per-op outputs on an isolated store copy, averaged by 1/7
        let mut oracle_store = store.clone();
        let mut expected = vec![0.0f64; x.numel()];
        for op in &ops {
            let mut fwd = Forward::new(&mut oracle_store, Mode::Train);
            let xid = fwd.input(x.clone());
            let y = op.forward(&mut fwd, xid).unwrap();
            for (e, &v) in expected.iter_mut().zip(fwd.tape.value(y).data()) {
                *e += v / 7.0;
            }
        }

        let mut fwd = Forward::new(&mut store, Mode::Train);
        let xid = fwd.input(x.clone());
        let alpha = fwd.tape.leaf(Tensor::zeros(&[7]), false);
        let y = mixed_edge_forward(&mut fwd, xid, alpha, &ops).unwrap();
        for (&got, &want) in fwd.tape.value(y).data().iter().zip(&expected) {
            assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        }
    }

    #[test]
    fn mixed_edge_saturates_to_identity() {
        let mut store = ParamStore::<f64>::new();
        let ops = build_edge_ops(&mut store, 3, OpSet::Nas1, 4, 1);
        let identity_pos = OpSet::Nas1.position(crate::ops::OpKind::Identity).unwrap();
        let mut alpha = Tensor::zeros(&[9]);
        alpha.data_mut()[identity_pos] = 50.0;
        let mut rng = seeded(4, "x");
        let x = Tensor::randn(&[1, 4, 5, 5], 1.0, &mut rng);
        let mut fwd = Forward::new(&mut store, Mode::Train);
        let xid = fwd.input(x.clone());
        let aid = fwd.tape.leaf(alpha, false);
        let y = mixed_edge_forward(&mut fwd, xid, aid, &ops).unwrap();
        for (&got, &want) in fwd.tape.value(y).data().iter().zip(x.data()) {
            assert!((got - want).abs() < 1e-4, "{got} vs {want}");
        }
    }

    #[test]
    fn mixed_edge_matches_direct_summation_oracle() {
        for (seed, op_set) in [(5u64, OpSet::Nas1), (6, OpSet::Nas2)] {
            let mut store = ParamStore::<f64>::new();
            let ops = build_edge_ops(&mut store, seed, op_set, 6, 1);
            let mut rng = seeded(seed, "inputs");
            let x = Tensor::randn(&[2, 6, 7, 5], 1.0, &mut rng);
            let alpha: Tensor<f64> = Tensor::randn(&[op_set.size()], 1.5, &mut rng);

            // softmax weights recomputed independently
            let mx = alpha.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = alpha.data().iter().map(|&v| (v - mx).exp()).collect();
            let z: f64 = exps.iter().sum();
            let mut expected = vec![0.0f64; x.numel()];
            let mut oracle_store = store.clone();
            for (o, op) in ops.iter().enumerate() {
                let mut fwd = Forward::new(&mut oracle_store, Mode::Train);
                let xid = fwd.input(x.clone());
                let y = op.forward(&mut fwd, xid).unwrap();
                let w = exps[o] / z;
                for (e, &v) in expected.iter_mut().zip(fwd.tape.value(y).data()) {
                    *e += w * v;
                }
            }

            let mut fwd = Forward::new(&mut store, Mode::Train);
            let xid = fwd.input(x.clone());
            let aid = fwd.tape.leaf(alpha, false);
            let y = mixed_edge_forward(&mut fwd, xid, aid, &ops).unwrap();
            for (&got, &want) in fwd.tape.value(y).data().iter().zip(&expected) {
                assert!((got - want).abs() < 1e-6, "{op_set:?}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn mixed_edge_length_mismatch_is_rejected() {
        let mut store = ParamStore::<f64>::new();
        let ops = build_edge_ops(&mut store, 7, OpSet::Nas2, 4, 1);
        let mut fwd = Forward::new(&mut store, Mode::Train);
        let x = fwd.input(Tensor::zeros(&[1, 4, 5, 5]));
        let alpha = fwd.tape.leaf(Tensor::<f64>::zeros(&[9]), false);
        let err = mixed_edge_forward(&mut fwd, x, alpha, &ops).unwrap_err();
        assert!(matches!(err, Error::Contract { op: "mixed_edge_forward", .. }));
    }

    #[test]
    fn mixed_edge_is_permutation_stable() {
        let mut store = ParamStore::<f64>::new();
        let ops = build_edge_ops(&mut store, 8, OpSet::Nas2, 4, 1);
        let mut rng = seeded(9, "x");
        let x = Tensor::randn(&[1, 4, 6, 6], 1.0, &mut rng);
        let alpha: Tensor<f64> = Tensor::randn(&[7], 1.0, &mut rng);

        let perm = [3usize, 0, 6, 1, 5, 2, 4];
        let permuted_ops: Vec<OpInstance> = perm.iter().map(|&i| ops[i].clone()).collect();
        let mut alpha_perm = Tensor::zeros(&[7]);
        for (new_pos, &old_pos) in perm.iter().enumerate() {
            alpha_perm.data_mut()[new_pos] = alpha.data()[old_pos];
        }

        let run = |store: &mut ParamStore<f64>, ops: &[OpInstance], alpha: Tensor<f64>| {
            let mut fwd = Forward::new(store, Mode::Train);
            let xid = fwd.input(x.clone());
            let aid = fwd.tape.leaf(alpha, false);
            let y = mixed_edge_forward(&mut fwd, xid, aid, ops).unwrap();
            fwd.tape.value(y).data().to_vec()
        };
        let base = run(&mut store.clone(), &ops, alpha.clone());
        let perm_out = run(&mut store.clone(), &permuted_ops, alpha_perm);
        for (a, b) in base.iter().zip(&perm_out) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn normal_cell_preserves_shape() {
        let mut store = ParamStore::<f32>::new();
        let mut init = Init::new(10, "cell");
        let cell =
            SearchCell::new(&mut store, &mut init, "c", OpSet::Nas2, 64, 64, 16, false, false).unwrap();
        let arch = init_arch_params(&mut store, OpSet::Nas2, 10);
        let mut rng = seeded(11, "x");
        let s0: Tensor<f32> = Tensor::randn(&[1, 64, 25, 10], 1.0, &mut rng);
        let s1: Tensor<f32> = Tensor::randn(&[1, 64, 25, 10], 1.0, &mut rng);
        let mut fwd = Forward::new(&mut store, Mode::Train);
        let a = fwd.input(s0);
        let b = fwd.input(s1);
        let alpha = fwd.bind(arch.alpha_normal);
        let w = fwd.tape.softmax_rows(alpha).unwrap();
        let y = cell.forward(&mut fwd, a, b, w).unwrap();
        assert_eq!(fwd.tape.shape(y), &[1, 64, 25, 10]);
    }

    #[test]
    fn reduction_cell_doubles_channels_and_halves_space() {
        let mut store = ParamStore::<f32>::new();
        let mut init = Init::new(12, "cell");
        let cell =
            SearchCell::new(&mut store, &mut init, "c", OpSet::Nas2, 64, 64, 32, true, false).unwrap();
        let arch = init_arch_params(&mut store, OpSet::Nas2, 12);
        let mut rng = seeded(13, "x");
        let s0: Tensor<f32> = Tensor::randn(&[1, 64, 25, 10], 1.0, &mut rng);
        let s1: Tensor<f32> = Tensor::randn(&[1, 64, 25, 10], 1.0, &mut rng);
        let mut fwd = Forward::new(&mut store, Mode::Train);
        let a = fwd.input(s0);
        let b = fwd.input(s1);
        let alpha = fwd.bind(arch.alpha_reduce);
        let w = fwd.tape.softmax_rows(alpha).unwrap();
        let y = cell.forward(&mut fwd, a, b, w).unwrap();
        assert_eq!(fwd.tape.shape(y), &[1, 128, 13, 5]);
    }

    #[test]
    fn all_zero_alpha_propagates_zeros() {
        let mut store = ParamStore::<f32>::new();
        let mut init = Init::new(14, "cell");
        let cell =
            SearchCell::new(&mut store, &mut init, "c", OpSet::Nas2, 16, 16, 8, false, false).unwrap();
        // +500 on zero (column 0), -500 elsewhere: softmax underflows the rest
        let mut alpha = Tensor::full(&[NUM_EDGES, 7], -500.0f32);
        for row in 0..NUM_EDGES {
            alpha.data_mut()[row * 7] = 500.0;
        }
        let mut rng = seeded(15, "x");
        let s0: Tensor<f32> = Tensor::randn(&[1, 16, 8, 8], 1.0, &mut rng);
        let s1: Tensor<f32> = Tensor::randn(&[1, 16, 8, 8], 1.0, &mut rng);
        let mut fwd = Forward::new(&mut store, Mode::Train);
        let a = fwd.input(s0);
        let b = fwd.input(s1);
        let aid = fwd.tape.leaf(alpha, false);
        let w = fwd.tape.softmax_rows(aid).unwrap();
        let y = cell.forward(&mut fwd, a, b, w).unwrap();
        assert!(fwd.tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn supernet_end_to_end_shapes_and_widths() {
        let mut store = ParamStore::<f32>::new();
        let mut init = Init::new(16, "net");
        let cfg = SupernetConfig::default();
        let arch = init_arch_params(&mut store, cfg.op_set, 16);
        let net = Supernet::build(&mut store, &mut init, cfg, arch).unwrap();

        let widths: Vec<usize> = net.cells().iter().map(|c| c.c_work).collect();
        assert_eq!(widths, vec![16, 16, 32, 32, 32, 64]);
        let kinds: Vec<bool> = net.cells().iter().map(|c| c.reduction).collect();
        assert_eq!(kinds, vec![false, false, true, false, false, true]);
        assert_eq!(store.trainable_floats(ParamGroup::Arch), 252);
        assert_eq!(net.arch.num_params(), 252);

        let mut rng = seeded(17, "x");
        let x: Tensor<f32> = Tensor::randn(&[1, 1, 101, 40], 1.0, &mut rng);
        let mut fwd = Forward::new(&mut store, Mode::Train);
        let xid = fwd.input(x);
        let logits = net.forward(&mut fwd, xid).unwrap();
        assert_eq!(fwd.tape.shape(logits), &[1, 12]);
    }

    #[test]
    fn arch_init_is_near_uniform_and_deterministic() {
        for op_set in [OpSet::Nas1, OpSet::Nas2] {
            let mut store = ParamStore::<f32>::new();
            let arch = init_arch_params(&mut store, op_set, 21);
            let k = op_set.size();
            let alpha = store.get(arch.alpha_normal);
            for row in alpha.data().chunks(k) {
                let mx = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                let exps: Vec<f64> = row.iter().map(|&v| ((v - mx) as f64).exp()).collect();
                let z: f64 = exps.iter().sum();
                for e in &exps {
                    let p = e / z;
                    assert!((p - 1.0 / k as f64).abs() < 1e-3, "entry {p} far from uniform");
                }
            }
            let entropy = mean_row_entropy(alpha);
            assert!(entropy >= 0.999 * (k as f64).ln(), "entropy {entropy}");

            let mut store2 = ParamStore::<f32>::new();
            let arch2 = init_arch_params(&mut store2, op_set, 21);
            assert_eq!(store.get(arch.alpha_normal).data(), store2.get(arch2.alpha_normal).data());
            assert_eq!(store.get(arch.alpha_reduce).data(), store2.get(arch2.alpha_reduce).data());
        }
    }
}
