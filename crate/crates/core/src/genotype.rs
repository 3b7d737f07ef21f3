//! Discretisation of trained architecture weights and everything downstream
//! of it: the genotype text format, instantiation of the final network,
//! exact parameter accounting and from-scratch training.

use std::fmt::Write as _;

use crate::data::{BatchSource, Split};
use crate::error::{Error, Result};
use crate::nn::{
    BatchNorm2d, Conv2d, Forward, Init, Linear, Mode, ParamGroup, ParamStore,
};
use crate::ops::{build_op, op_param_count, OpInstance, OpKind, OpSet};
use crate::scalar::Scalar;
use crate::search::{
    clip_global_norm, cosine_lr, evaluate_split, sgd_momentum_step, SearchConfig, SgdState,
};
use crate::supernet::{edge_row, is_reduction_position, Preprocess, NUM_INTERMEDIATE};
use crate::tape::{ConvSpec, TensorId};
use crate::tensor::Tensor;

pub const PAIRS_PER_NODE: usize = 2;
pub const GENOTYPE_VERSION: &str = "v1";

/// Selected (operation, predecessor) pair of a discrete cell edge.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GenePair {
    pub op: OpKind,
    pub pred: usize,
}

/// Discrete description of the two searched cells. Per intermediate node
/// (2..=5) exactly two incoming pairs, stored in predecessor order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Genotype {
    pub op_set: OpSet,
    pub normal: Vec<GenePair>,
    pub reduce: Vec<GenePair>,
}

impl Genotype {
    /// Pairs of one intermediate node (0-based node slot, i.e. node 2 is slot 0).
    pub fn node_pairs(half: &[GenePair], slot: usize) -> &[GenePair] {
        &half[slot * PAIRS_PER_NODE..(slot + 1) * PAIRS_PER_NODE]
    }

    pub fn validate(&self) -> Result<()> {
        for (tag, half) in [("normal", &self.normal), ("reduce", &self.reduce)] {
            if half.len() != NUM_INTERMEDIATE * PAIRS_PER_NODE {
                return Err(Error::contract(
                    "Genotype",
                    format!("{tag} half has {} pairs, expected 8", half.len()),
                ));
            }
            for slot in 0..NUM_INTERMEDIATE {
                let node = slot + 2;
                let pairs = Self::node_pairs(half, slot);
                for p in pairs {
                    if p.op == OpKind::Zero {
                        return Err(Error::contract("Genotype", format!("{tag} node {node} selects zero")));
                    }
                    if !self.op_set.contains(p.op) {
                        return Err(Error::contract(
                            "Genotype",
                            format!("{tag} node {node}: {} not in {}", p.op.name(), self.op_set.name()),
                        ));
                    }
                    if p.pred >= node {
                        return Err(Error::contract(
                            "Genotype",
                            format!("{tag} node {node}: predecessor {} out of range", p.pred),
                        ));
                    }
                }
                if pairs[0].pred >= pairs[1].pred {
                    return Err(Error::contract(
                        "Genotype",
                        format!("{tag} node {node}: predecessors must be distinct and ascending"),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Every node fed by the given op from its two lowest predecessors.
    pub fn uniform(op_set: OpSet, op: OpKind) -> Self {
        let half: Vec<GenePair> = (0..NUM_INTERMEDIATE)
            .flat_map(|_| [GenePair { op, pred: 0 }, GenePair { op, pred: 1 }])
            .collect();
        Genotype { op_set, normal: half.clone(), reduce: half }
    }

    /// Seeded random genotype in canonical form; used by fuzz and accounting
    /// tests.
    pub fn random<R: rand::Rng>(rng: &mut R, op_set: OpSet) -> Self {
        let half = |rng: &mut R| {
            let mut pairs = Vec::with_capacity(NUM_INTERMEDIATE * PAIRS_PER_NODE);
            for slot in 0..NUM_INTERMEDIATE {
                let node = slot + 2;
                let a = rng.random_range(0..node);
                let mut b = rng.random_range(0..node - 1);
                if b >= a {
                    b += 1;
                }
                let (lo, hi) = (a.min(b), a.max(b));
                for pred in [lo, hi] {
                    let non_zero: Vec<OpKind> =
                        op_set.ops().iter().copied().filter(|&k| k != OpKind::Zero).collect();
                    let op = non_zero[rng.random_range(0..non_zero.len())];
                    pairs.push(GenePair { op, pred });
                }
            }
            pairs
        };
        Genotype { op_set, normal: half(rng), reduce: half(rng) }
    }
}

// ---- derivation -----------------------------------------------------------

fn softmax_f64(row: &[f64]) -> Vec<f64> {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&v| (v - mx).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|e| e / z).collect()
}

fn derive_half<F: Scalar>(alpha: &Tensor<F>, op_set: OpSet) -> Vec<GenePair> {
    let k = op_set.size();
    debug_assert_eq!(alpha.shape(), &[crate::supernet::NUM_EDGES, k]);
    // per edge: strongest non-zero candidate and its softmax weight
    let mut best: Vec<(OpKind, f64)> = Vec::with_capacity(crate::supernet::NUM_EDGES);
    for row in alpha.data().chunks(k) {
        let probs = softmax_f64(&row.iter().map(|&v| v.as_f64()).collect::<Vec<_>>());
        let mut chosen = None;
        for (idx, &kind) in op_set.ops().iter().enumerate() {
            if kind == OpKind::Zero {
                continue;
            }
            let w = probs[idx];
            // strict comparison: earlier candidates win ties
            if chosen.map_or(true, |(_, bw)| w > bw) {
                chosen = Some((kind, w));
            }
        }
        best.push(chosen.expect("op set contains non-zero candidates"));
    }
    // per node: keep the two incoming edges with the largest selected weight
    let mut pairs = Vec::with_capacity(NUM_INTERMEDIATE * PAIRS_PER_NODE);
    for slot in 0..NUM_INTERMEDIATE {
        let node = slot + 2;
        let mut candidates: Vec<(usize, OpKind, f64)> = (0..node)
            .map(|pred| {
                let (op, w) = best[edge_row(node, pred)];
                (pred, op, w)
            })
            .collect();
        // weight descending, predecessor ascending on ties
        candidates.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap().then(a.0.cmp(&b.0)));
        let mut top: Vec<(usize, OpKind)> =
            candidates.into_iter().take(PAIRS_PER_NODE).map(|(p, o, _)| (p, o)).collect();
        top.sort_by_key(|&(p, _)| p);
        for (pred, op) in top {
            pairs.push(GenePair { op, pred });
        }
    }
    pairs
}

/// Argmax-discretise trained architecture weights. Zero is excluded from
/// both the per-edge argmax and the per-node top-2 ranking.
pub fn derive_genotype<F: Scalar>(
    alpha_normal: &Tensor<F>,
    alpha_reduce: &Tensor<F>,
    op_set: OpSet,
) -> Genotype {
    Genotype {
        op_set,
        normal: derive_half(alpha_normal, op_set),
        reduce: derive_half(alpha_reduce, op_set),
    }
}

// ---- text format ------------------------------------------------------------

/// Human-readable, versioned genotype text:
///
/// ```text
/// genotype v1
/// op_set nas1
/// normal 2 <op> <pred> <op> <pred>
/// ...            (nodes 2..5)
/// reduce 2 <op> <pred> <op> <pred>
/// ...
/// ```
pub fn serialize_genotype(g: &Genotype) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "genotype {GENOTYPE_VERSION}");
    let _ = writeln!(out, "op_set {}", g.op_set.name());
    for (tag, half) in [("normal", &g.normal), ("reduce", &g.reduce)] {
        for slot in 0..NUM_INTERMEDIATE {
            let p = Genotype::node_pairs(half, slot);
            let _ = writeln!(
                out,
                "{tag} {} {} {} {} {}",
                slot + 2,
                p[0].op.name(),
                p[0].pred,
                p[1].op.name(),
                p[1].pred
            );
        }
    }
    out
}

fn parse_err(line: usize, detail: impl Into<String>) -> Error {
    Error::GenotypeParse { line, detail: detail.into() }
}

pub fn parse_genotype(text: &str) -> Result<Genotype> {
    let lines: Vec<(usize, &str)> = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
        .collect();
    let end_line = text.lines().count() + 1;
    let mut cursor = lines.into_iter();
    let mut next_line = |expect: &str| cursor.next().ok_or_else(|| parse_err(end_line, format!("missing {expect}")));

    let (ln, header) = next_line("header `genotype v1`")?;
    let mut fields = header.split_whitespace();
    if fields.next() != Some("genotype") {
        return Err(parse_err(ln, "expected header `genotype v1`"));
    }
    match fields.next() {
        Some(GENOTYPE_VERSION) => {}
        Some(v) => return Err(parse_err(ln, format!("unsupported version `{v}`"))),
        None => return Err(parse_err(ln, "missing format version")),
    }

    let (ln, set_line) = next_line("op_set line")?;
    let mut fields = set_line.split_whitespace();
    if fields.next() != Some("op_set") {
        return Err(parse_err(ln, "expected `op_set <nas1|nas2>`"));
    }
    let set_name = fields.next().ok_or_else(|| parse_err(ln, "missing op_set value"))?;
    let op_set = OpSet::from_name(set_name)
        .ok_or_else(|| parse_err(ln, format!("unknown op_set `{set_name}`")))?;

    let mut normal = Vec::new();
    let mut reduce = Vec::new();
    for expect_tag in ["normal", "reduce"] {
        for slot in 0..NUM_INTERMEDIATE {
            let node = slot + 2;
            let (ln, line) = next_line(&format!("{expect_tag} node {node} line"))?;
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 6 {
                return Err(parse_err(ln, format!("expected 6 fields, got {}", fields.len())));
            }
            if fields[0] != expect_tag {
                return Err(parse_err(ln, format!("expected section `{expect_tag}`, got `{}`", fields[0])));
            }
            let file_node: usize =
                fields[1].parse().map_err(|_| parse_err(ln, format!("bad node index `{}`", fields[1])))?;
            if file_node != node {
                return Err(parse_err(ln, format!("expected node {node}, got {file_node}")));
            }
            let mut pairs = Vec::with_capacity(2);
            for chunk in fields[2..].chunks(2) {
                let op = OpKind::from_name(chunk[0])
                    .ok_or_else(|| parse_err(ln, format!("unknown operation `{}`", chunk[0])))?;
                let pred: usize = chunk[1]
                    .parse()
                    .map_err(|_| parse_err(ln, format!("bad predecessor `{}`", chunk[1])))?;
                pairs.push(GenePair { op, pred });
            }
            pairs.sort_by_key(|p| p.pred);
            let half = if expect_tag == "normal" { &mut normal } else { &mut reduce };
            half.extend(pairs);
        }
    }
    if let Some((ln, _)) = cursor.next() {
        return Err(parse_err(ln, "trailing content after reduce node 5"));
    }
    let g = Genotype { op_set, normal, reduce };
    g.validate().map_err(|e| parse_err(end_line, e.to_string()))?;
    Ok(g)
}

// ---- the final network -------------------------------------------------------

/// Fully resolved stack: genotype plus depth/width/classes.
#[derive(Clone, Debug)]
pub struct NetworkPlan {
    pub genotype: Genotype,
    pub depth: usize,
    pub init_channels: usize,
    pub num_classes: usize,
}

impl NetworkPlan {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::contract("NetworkPlan", "depth must be >= 1".to_string()));
        }
        if self.init_channels == 0 {
            return Err(Error::contract("NetworkPlan", "init_channels must be >= 1".to_string()));
        }
        if self.num_classes < 2 {
            return Err(Error::contract("NetworkPlan", "num_classes must be >= 2".to_string()));
        }
        self.genotype.validate()
    }

    /// Reduction flags of the stacked cells (true = reduction).
    pub fn cell_kinds(&self) -> Vec<bool> {
        (0..self.depth).map(is_reduction_position).collect()
    }
}

struct DiscreteCell {
    reduction: bool,
    pre0: Preprocess,
    pre1: Preprocess,
    /// 8 selected edges in node order: (instance, predecessor).
    edges: Vec<(OpInstance, usize)>,
}

impl DiscreteCell {
    #[allow(clippy::too_many_arguments)]
    fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        init: &mut Init,
        name: &str,
        genotype: &Genotype,
        c_prev_prev: usize,
        c_prev: usize,
        c_work: usize,
        reduction: bool,
        reduction_prev: bool,
    ) -> Result<Self> {
        let pre0 = Preprocess::build(store, init, &format!("{name}.pre0"), c_prev_prev, c_work, reduction_prev);
        let pre1 = Preprocess::build(store, init, &format!("{name}.pre1"), c_prev, c_work, false);
        let half = if reduction { &genotype.reduce } else { &genotype.normal };
        let mut edges = Vec::with_capacity(half.len());
        for (i, pair) in half.iter().enumerate() {
            let stride = if reduction && pair.pred < 2 { 2 } else { 1 };
            let op_name = format!("{name}.op{i}.{}", pair.op.name());
            let op = build_op(store, init, &op_name, pair.op, c_work, stride)?;
            edges.push((op, pair.pred));
        }
        Ok(DiscreteCell { reduction, pre0, pre1, edges })
    }

    fn forward<F: Scalar>(
        &self,
        fwd: &mut Forward<F>,
        s_prev_prev: TensorId,
        s_prev: TensorId,
    ) -> Result<TensorId> {
        let s0 = self.pre0.forward(fwd, s_prev_prev)?;
        let s1 = self.pre1.forward(fwd, s_prev)?;
        if fwd.tape.shape(s0) != fwd.tape.shape(s1) {
            return Err(Error::contract(
                "DiscreteCell::forward",
                format!("preprocessed inputs disagree: {:?} vs {:?}", fwd.tape.shape(s0), fwd.tape.shape(s1)),
            ));
        }
        let mut states = vec![s0, s1];
        for slot in 0..NUM_INTERMEDIATE {
            let pairs = &self.edges[slot * PAIRS_PER_NODE..(slot + 1) * PAIRS_PER_NODE];
            let mut acc: Option<TensorId> = None;
            for (op, pred) in pairs {
                let y = op.forward(fwd, states[*pred])?;
                acc = Some(match acc {
                    None => y,
                    Some(a) => fwd.tape.add(a, y)?,
                });
            }
            states.push(acc.expect("two pairs per node"));
        }
        fwd.tape.concat_channels(&states[2..])
    }
}

pub struct DiscreteNetwork {
    pub plan: NetworkPlan,
    head_conv: Conv2d,
    head_bn: BatchNorm2d,
    cells: Vec<DiscreteCell>,
    classifier: Linear,
}

/// Allocate the discrete network described by the plan: head 3x3 conv to
/// 3 x init_channels, the genotype cells under the stacking rule, global
/// average pooling and a linear classifier.
pub fn instantiate_network<F: Scalar>(
    store: &mut ParamStore<F>,
    init: &mut Init,
    plan: NetworkPlan,
) -> Result<DiscreteNetwork> {
    plan.validate()?;
    let c_head = 3 * plan.init_channels;
    let head_conv = Conv2d::new(store, init, "head.conv", 1, c_head, 3, ConvSpec::plain(1, 1));
    let head_bn = BatchNorm2d::new(store, "head.bn", c_head);
    let mut cells = Vec::with_capacity(plan.depth);
    let (mut c_pp, mut c_p) = (c_head, c_head);
    let mut c_work = plan.init_channels;
    let mut reduction_prev = false;
    for i in 0..plan.depth {
        let reduction = is_reduction_position(i);
        if reduction {
            c_work *= 2;
        }
        cells.push(DiscreteCell::new(
            store,
            init,
            &format!("cells.{i}"),
            &plan.genotype,
            c_pp,
            c_p,
            c_work,
            reduction,
            reduction_prev,
        )?);
        c_pp = c_p;
        c_p = NUM_INTERMEDIATE * c_work;
        reduction_prev = reduction;
    }
    let classifier = Linear::new(store, init, "classifier", c_p, plan.num_classes);
    Ok(DiscreteNetwork { plan, head_conv, head_bn, cells, classifier })
}

impl DiscreteNetwork {
    pub fn forward<F: Scalar>(&self, fwd: &mut Forward<F>, x: TensorId) -> Result<TensorId> {
        let c = self.head_conv.forward(fwd, x)?;
        let stem = self.head_bn.forward(fwd, c)?;
        let (mut s_pp, mut s_p) = (stem, stem);
        for cell in &self.cells {
            let out = cell.forward(fwd, s_pp, s_p)?;
            s_pp = s_p;
            s_p = out;
        }
        let pooled = fwd.tape.global_avg_pool(s_p)?;
        self.classifier.forward(fwd, pooled)
    }

    pub fn reduction_cells(&self) -> Vec<usize> {
        self.cells
            .iter()
            .enumerate()
            .filter(|(_, c)| c.reduction)
            .map(|(i, _)| i)
            .collect()
    }
}

// ---- parameter accounting ------------------------------------------------------

#[derive(Clone, Debug)]
pub struct ParamBreakdown {
    pub head: usize,
    /// One entry per cell: (is_reduction, trainable floats).
    pub cells: Vec<(bool, usize)>,
    pub classifier: usize,
    pub total: usize,
}

/// Closed-form trainable float count of one selected edge.
fn edge_params(op: OpKind, c_work: usize, stride: usize) -> usize {
    if op == OpKind::Identity && stride == 2 {
        // factorized reduce: two 1x1 convs summing to c*c, plus BN affine
        c_work * c_work + 2 * c_work
    } else {
        op_param_count(op, c_work)
    }
}

/// Exact analytic parameter accounting for a plan; the test suites compare
/// this against enumeration of the actually allocated tensors.
pub fn param_breakdown(plan: &NetworkPlan) -> ParamBreakdown {
    let c_head = 3 * plan.init_channels;
    let head = 9 * c_head + 2 * c_head;
    let mut cells = Vec::with_capacity(plan.depth);
    let (mut c_pp, mut c_p) = (c_head, c_head);
    let mut c_work = plan.init_channels;
    let mut total = head;
    for i in 0..plan.depth {
        let reduction = is_reduction_position(i);
        if reduction {
            c_work *= 2;
        }
        // both preprocess variants hold c_in*c_out conv weights + BN affine
        let mut cell = c_pp * c_work + 2 * c_work;
        cell += c_p * c_work + 2 * c_work;
        let half = if reduction { &plan.genotype.reduce } else { &plan.genotype.normal };
        for pair in half {
            let stride = if reduction && pair.pred < 2 { 2 } else { 1 };
            cell += edge_params(pair.op, c_work, stride);
        }
        cells.push((reduction, cell));
        total += cell;
        c_pp = c_p;
        c_p = NUM_INTERMEDIATE * c_work;
    }
    let classifier = plan.num_classes * c_p + plan.num_classes;
    total += classifier;
    ParamBreakdown { head, cells, classifier, total }
}

pub fn count_parameters(plan: &NetworkPlan) -> usize {
    param_breakdown(plan).total
}

// ---- final training ---------------------------------------------------------

pub struct TrainedModel<F: Scalar> {
    pub store: ParamStore<F>,
    pub net: DiscreteNetwork,
    pub test_accuracy: f64,
    pub train_accuracy: f64,
    pub confusion: Vec<Vec<usize>>,
    /// (epoch, mean train loss)
    pub history: Vec<(usize, f64)>,
}

/// From-scratch training of a plan: fresh seeded initialisation, SGD with
/// momentum and cosine annealing over `epochs` on the merged train+val
/// split, then evaluation on the untouched test split.
pub fn train_final<F: Scalar>(
    plan: NetworkPlan,
    data: &mut dyn BatchSource<F>,
    cfg: &SearchConfig,
    epochs: usize,
) -> Result<TrainedModel<F>> {
    let mut store = ParamStore::<F>::new();
    let mut init = Init::new(cfg.seed, "final");
    let net = instantiate_network(&mut store, &mut init, plan)?;
    let mut sgd = SgdState::new();
    let mut history = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let lr = cosine_lr(epoch, epochs, cfg.w_lr, cfg.w_lr_min);
        data.begin_epoch(Split::TrainVal, epoch as u64);
        let mut loss_sum = 0.0;
        let mut steps = 0usize;
        while let Some(batch) = data.next_batch(Split::TrainVal, cfg.batch_size) {
            let mut fwd = Forward::new(&mut store, Mode::Train);
            let x = fwd.input(batch.features.clone());
            let logits = net.forward(&mut fwd, x)?;
            let loss = fwd.tape.softmax_cross_entropy(logits, &batch.labels)?;
            fwd.tape.backward(loss)?;
            loss_sum += fwd.tape.value(loss).item().as_f64();
            let mut grads = fwd.collect_grads(ParamGroup::Weight);
            drop(fwd);
            clip_global_norm(&mut grads, cfg.grad_clip);
            sgd_momentum_step(&mut store, &grads, &mut sgd, lr, cfg.w_momentum, cfg.w_weight_decay);
            steps += 1;
        }
        if steps == 0 {
            return Err(Error::contract("train_final", "merged training split is empty".to_string()));
        }
        if !store.all_finite() {
            return Err(Error::contract("train_final", format!("non-finite parameter after epoch {epoch}")));
        }
        history.push((epoch + 1, loss_sum / steps as f64));
    }
    let test =
        evaluate_split(|fwd, x| net.forward(fwd, x), &mut store, data, Split::Test, cfg.batch_size, 0)?;
    let train =
        evaluate_split(|fwd, x| net.forward(fwd, x), &mut store, data, Split::TrainVal, cfg.batch_size, 0)?;
    Ok(TrainedModel {
        store,
        net,
        test_accuracy: test.accuracy,
        train_accuracy: train.accuracy,
        confusion: test.confusion,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use crate::supernet::NUM_EDGES;

    fn alpha_with(op_set: OpSet, fill: f32, bumps: &[(usize, usize, f32)]) -> Tensor<f32> {
        let k = op_set.size();
        let mut t = Tensor::full(&[NUM_EDGES, k], fill);
        for &(row, col, v) in bumps {
            t.data_mut()[row * k + col] = v;
        }
        t
    }

    #[test]
    fn saturated_alpha_selects_the_bumped_pairs() {
        let set = OpSet::Nas1;
        let id = set.position(OpKind::Identity).unwrap();
        let sep5 = set.position(OpKind::SepConv5).unwrap();
        // node 2: identity on edge 0->2, sep_conv_5x5 on edge 1->2
        let alpha = alpha_with(set, -10.0, &[(edge_row(2, 0), id, 10.0), (edge_row(2, 1), sep5, 10.0)]);
        let g = derive_genotype(&alpha, &alpha, set);
        assert_eq!(
            Genotype::node_pairs(&g.normal, 0),
            &[GenePair { op: OpKind::Identity, pred: 0 }, GenePair { op: OpKind::SepConv5, pred: 1 }]
        );
        g.validate().unwrap();
    }

    #[test]
    fn zero_is_excluded_even_when_maximal() {
        let set = OpSet::Nas2;
        let zero = set.position(OpKind::Zero).unwrap();
        let dil3 = set.position(OpKind::DilConv3).unwrap();
        // zero dominates edge 0->2; dil_conv_3x3 is runner-up
        let alpha = alpha_with(set, -5.0, &[(edge_row(2, 0), zero, 20.0), (edge_row(2, 0), dil3, 1.0)]);
        let g = derive_genotype(&alpha, &alpha, set);
        let node2 = Genotype::node_pairs(&g.normal, 0);
        assert!(node2.iter().all(|p| p.op != OpKind::Zero));
        assert_eq!(node2[0], GenePair { op: OpKind::DilConv3, pred: 0 });
    }

    /// Independent brute-force re-statement of the derivation rule.
    fn derive_oracle(alpha: &Tensor<f32>, op_set: OpSet) -> Vec<GenePair> {
        let k = op_set.size();
        let mut out = Vec::new();
        for node in 2..6 {
            // enumerate every (pred, op) candidate with its softmax weight
            let mut per_edge: Vec<(usize, OpKind, f64)> = Vec::new();
            for pred in 0..node {
                let row = edge_row(node, pred);
                let raw: Vec<f64> =
                    alpha.data()[row * k..(row + 1) * k].iter().map(|&v| v as f64).collect();
                let probs = softmax_f64(&raw);
                let mut best: Option<(OpKind, f64)> = None;
                for (i, &kind) in op_set.ops().iter().enumerate() {
                    if kind == OpKind::Zero {
                        continue;
                    }
                    match best {
                        Some((_, bw)) if probs[i] <= bw => {}
                        _ => best = Some((kind, probs[i])),
                    }
                }
                let (op, w) = best.unwrap();
                per_edge.push((pred, op, w));
            }
            // exhaustive top-2: the pair of predecessors with the largest
            // summed weight is exactly the two individually largest weights;
            // scanning (a, b) in ascending order keeps lower predecessors on
            // exact ties
            let mut chosen: Option<Vec<(usize, OpKind)>> = None;
            let mut chosen_score = f64::NEG_INFINITY;
            for a in 0..per_edge.len() {
                for b in a + 1..per_edge.len() {
                    let score = per_edge[a].2 + per_edge[b].2;
                    if score > chosen_score {
                        chosen_score = score;
                        chosen =
                            Some(vec![(per_edge[a].0, per_edge[a].1), (per_edge[b].0, per_edge[b].1)]);
                    }
                }
            }
            for (pred, op) in chosen.unwrap() {
                out.push(GenePair { op, pred });
            }
        }
        out
    }

    #[test]
    fn derivation_matches_brute_force_on_random_draws() {
        let mut rng = seeded(31, "derive");
        for trial in 0..50 {
            for op_set in [OpSet::Nas1, OpSet::Nas2] {
                let alpha: Tensor<f32> = Tensor::randn(&[NUM_EDGES, op_set.size()], 1.0, &mut rng);
                let g = derive_genotype(&alpha, &alpha, op_set);
                g.validate().unwrap();
                let oracle = derive_oracle(&alpha, op_set);
                assert_eq!(g.normal, oracle, "trial {trial} {op_set:?}");
            }
        }
    }

    #[test]
    fn derivation_handles_exact_ties() {
        // all-equal alpha: every edge picks the first non-zero op; nodes keep
        // the two lowest predecessors
        let set = OpSet::Nas2;
        let alpha = Tensor::full(&[NUM_EDGES, set.size()], 0.25f32);
        let g = derive_genotype(&alpha, &alpha, set);
        for slot in 0..NUM_INTERMEDIATE {
            let pairs = Genotype::node_pairs(&g.normal, slot);
            assert_eq!(pairs[0], GenePair { op: OpKind::MaxPool3, pred: 0 });
            assert_eq!(pairs[1], GenePair { op: OpKind::MaxPool3, pred: 1 });
        }
    }

    #[test]
    fn derivation_is_invariant_to_row_shifts() {
        let mut rng = seeded(32, "shift");
        for _ in 0..10 {
            let set = OpSet::Nas1;
            let alpha: Tensor<f32> = Tensor::randn(&[NUM_EDGES, set.size()], 1.0, &mut rng);
            let mut shifted = alpha.clone();
            use rand::Rng;
            for row in 0..NUM_EDGES {
                let c: f32 = rng.random_range(-3.0..3.0);
                for v in &mut shifted.data_mut()[row * set.size()..(row + 1) * set.size()] {
                    *v += c;
                }
            }
            let a = derive_genotype(&alpha, &alpha, set);
            let b = derive_genotype(&shifted, &shifted, set);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn serialization_round_trips_random_genotypes() {
        let mut rng = seeded(33, "fuzz");
        for _ in 0..100 {
            for op_set in [OpSet::Nas1, OpSet::Nas2] {
                let g = Genotype::random(&mut rng, op_set);
                g.validate().unwrap();
                let text = serialize_genotype(&g);
                let parsed = parse_genotype(&text).unwrap();
                assert_eq!(g, parsed);
            }
        }
    }

    #[test]
    fn parse_rejects_unknown_op_naming_the_token() {
        let g = Genotype::uniform(OpSet::Nas1, OpKind::Identity);
        let text = serialize_genotype(&g).replace("identity", "wavelet_conv");
        let err = parse_genotype(&text).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("wavelet_conv"), "{msg}");
    }

    #[test]
    fn parse_rejects_missing_op_set() {
        let g = Genotype::uniform(OpSet::Nas1, OpKind::Identity);
        let text: String = serialize_genotype(&g)
            .lines()
            .filter(|l| !l.starts_with("op_set"))
            .map(|l| format!("{l}\n"))
            .collect();
        let err = parse_genotype(&text).unwrap_err();
        assert!(err.to_string().contains("op_set"), "{err}");
    }

    #[test]
    fn parse_rejects_out_of_set_op() {
        let g = Genotype::uniform(OpSet::Nas1, OpKind::SepConv9);
        let text = serialize_genotype(&g).replace("op_set nas1", "op_set nas2");
        let err = parse_genotype(&text).unwrap_err();
        assert!(err.to_string().contains("sep_conv_9x9"), "{err}");
    }

    fn toy_plan(depth: usize, channels: usize, op_set: OpSet) -> NetworkPlan {
        let mut rng = seeded(34, "plan");
        NetworkPlan {
            genotype: Genotype::random(&mut rng, op_set),
            depth,
            init_channels: channels,
            num_classes: 12,
        }
    }

    #[test]
    fn network_forward_shape_is_genotype_independent() {
        for plan in [toy_plan(6, 4, OpSet::Nas2), NetworkPlan {
            genotype: Genotype::uniform(OpSet::Nas2, OpKind::Identity),
            depth: 6,
            init_channels: 4,
            num_classes: 12,
        }] {
            let mut store = ParamStore::<f32>::new();
            let mut init = Init::new(35, "net");
            let net = instantiate_network(&mut store, &mut init, plan).unwrap();
            let mut rng = seeded(36, "x");
            let x: Tensor<f32> = Tensor::randn(&[1, 1, 101, 40], 1.0, &mut rng);
            let mut fwd = Forward::new(&mut store, Mode::Train);
            let xid = fwd.input(x);
            let logits = net.forward(&mut fwd, xid).unwrap();
            assert_eq!(fwd.tape.shape(logits), &[1, 12]);
        }
    }

    #[test]
    fn depth_twelve_has_four_reductions() {
        let plan = toy_plan(12, 4, OpSet::Nas2);
        assert_eq!(
            plan.cell_kinds().iter().enumerate().filter(|(_, &r)| r).map(|(i, _)| i).collect::<Vec<_>>(),
            vec![2, 5, 8, 11]
        );
        let mut store = ParamStore::<f32>::new();
        let mut init = Init::new(37, "net");
        let net = instantiate_network(&mut store, &mut init, plan).unwrap();
        assert_eq!(net.reduction_cells(), vec![2, 5, 8, 11]);
    }

    #[test]
    fn classifier_accounting_closed_form() {
        let plan = toy_plan(6, 16, OpSet::Nas1);
        let breakdown = param_breakdown(&plan);
        // final working width 64 -> concat width 256
        assert_eq!(breakdown.classifier, 12 * 256 + 12);
    }

    #[test]
    fn count_matches_enumeration_for_identity_genotype() {
        let plan = NetworkPlan {
            genotype: Genotype::uniform(OpSet::Nas1, OpKind::Identity),
            depth: 6,
            init_channels: 16,
            num_classes: 12,
        };
        let mut store = ParamStore::<f32>::new();
        let mut init = Init::new(38, "net");
        let _net = instantiate_network(&mut store, &mut init, plan.clone()).unwrap();
        assert_eq!(count_parameters(&plan), store.trainable_floats(ParamGroup::Weight));
    }

    #[test]
    fn count_is_monotonic_in_width_and_depth() {
        let base = toy_plan(6, 16, OpSet::Nas1);
        let wider = NetworkPlan { init_channels: 32, ..base.clone() };
        let deeper = NetworkPlan { depth: 12, ..base.clone() };
        assert!(count_parameters(&wider) > count_parameters(&base));
        assert!(count_parameters(&deeper) > count_parameters(&base));
    }
}
