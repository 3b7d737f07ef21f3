//! Catalog of candidate cell operations: reusable differentiable blocks
//! parameterised by channel count and stride.
//!
//! Stride-1 instances preserve the spatial extents; stride-2 instances halve
//! them (ceiling division). Every convolution runs as ReLU -> Conv -> BN with
//! no conv bias; separable convolutions chain two such sequences. Pooling is
//! used raw. `zero` multiplies its input away and subsamples under stride.

use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Conv2d, FactorizedReduce, Forward, Init, ParamId, ParamStore, ReluConvBn};
use crate::scalar::Scalar;
use crate::tape::{ConvSpec, TensorId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Zero,
    MaxPool3,
    AvgPool3,
    Identity,
    DilConv3,
    DilConv5,
    SepConv5,
    SepConv7,
    SepConv9,
    RegConv3,
}

/// Candidate order is fixed; it is the tie-break order during genotype
/// derivation and the layout of every alpha row.
pub const NAS1_OPS: [OpKind; 9] = [
    OpKind::Zero,
    OpKind::MaxPool3,
    OpKind::AvgPool3,
    OpKind::Identity,
    OpKind::DilConv3,
    OpKind::DilConv5,
    OpKind::SepConv5,
    OpKind::SepConv7,
    OpKind::SepConv9,
];

pub const NAS2_OPS: [OpKind; 7] = [
    OpKind::Zero,
    OpKind::MaxPool3,
    OpKind::AvgPool3,
    OpKind::Identity,
    OpKind::DilConv3,
    OpKind::DilConv5,
    OpKind::RegConv3,
];

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Zero => "zero",
            OpKind::MaxPool3 => "max_pool_3x3",
            OpKind::AvgPool3 => "avg_pool_3x3",
            OpKind::Identity => "identity",
            OpKind::DilConv3 => "dil_conv_3x3",
            OpKind::DilConv5 => "dil_conv_5x5",
            OpKind::SepConv5 => "sep_conv_5x5",
            OpKind::SepConv7 => "sep_conv_7x7",
            OpKind::SepConv9 => "sep_conv_9x9",
            OpKind::RegConv3 => "conv_3x3",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        Some(match name {
            "zero" => OpKind::Zero,
            "max_pool_3x3" => OpKind::MaxPool3,
            "avg_pool_3x3" => OpKind::AvgPool3,
            "identity" => OpKind::Identity,
            "dil_conv_3x3" => OpKind::DilConv3,
            "dil_conv_5x5" => OpKind::DilConv5,
            "sep_conv_5x5" => OpKind::SepConv5,
            "sep_conv_7x7" => OpKind::SepConv7,
            "sep_conv_9x9" => OpKind::SepConv9,
            "conv_3x3" => OpKind::RegConv3,
            _ => return None,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpSet {
    Nas1,
    Nas2,
}

impl OpSet {
    pub fn ops(self) -> &'static [OpKind] {
        match self {
            OpSet::Nas1 => &NAS1_OPS,
            OpSet::Nas2 => &NAS2_OPS,
        }
    }

    pub fn size(self) -> usize {
        self.ops().len()
    }

    pub fn name(self) -> &'static str {
        match self {
            OpSet::Nas1 => "nas1",
            OpSet::Nas2 => "nas2",
        }
    }

    pub fn from_name(name: &str) -> Option<OpSet> {
        match name {
            "nas1" => Some(OpSet::Nas1),
            "nas2" => Some(OpSet::Nas2),
            _ => None,
        }
    }

    pub fn contains(self, kind: OpKind) -> bool {
        self.ops().contains(&kind)
    }

    /// Position of a kind inside this set's candidate order.
    pub fn position(self, kind: OpKind) -> Option<usize> {
        self.ops().iter().position(|&k| k == kind)
    }
}

/// ReLU -> depthwise KxK -> pointwise 1x1 -> BN.
#[derive(Clone, Debug)]
struct DwPwBn {
    dw: Conv2d,
    pw: Conv2d,
    bn: BatchNorm2d,
}

impl DwPwBn {
    fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        init: &mut Init,
        name: &str,
        channels: usize,
        k: usize,
        stride: usize,
        dilation: usize,
    ) -> Self {
        let spec = ConvSpec {
            stride,
            padding: dilation * (k - 1) / 2,
            dilation,
            groups: channels,
        };
        let dw = Conv2d::new(store, init, &format!("{name}.dw"), channels, channels, k, spec);
        let pw =
            Conv2d::new(store, init, &format!("{name}.pw"), channels, channels, 1, ConvSpec::plain(1, 0));
        let bn = BatchNorm2d::new(store, &format!("{name}.bn"), channels);
        DwPwBn { dw, pw, bn }
    }

    fn forward<F: Scalar>(&self, fwd: &mut Forward<F>, x: TensorId) -> Result<TensorId> {
        let r = fwd.tape.relu(x);
        let d = self.dw.forward(fwd, r)?;
        let p = self.pw.forward(fwd, d)?;
        self.bn.forward(fwd, p)
    }
}

#[derive(Clone, Debug)]
enum OpBody {
    Zero,
    Identity,
    FactorizedIdentity(FactorizedReduce),
    MaxPool,
    AvgPool,
    DilConv(DwPwBn),
    SepConv(DwPwBn, DwPwBn),
    RegConv(ReluConvBn),
}

/// One built candidate operation: owns its parameters in the store.
#[derive(Clone, Debug)]
pub struct OpInstance {
    pub kind: OpKind,
    pub channels: usize,
    pub stride: usize,
    body: OpBody,
    params: Vec<ParamId>,
}

/// Build a candidate operation at the given width and stride.
pub fn build_op<F: Scalar>(
    store: &mut ParamStore<F>,
    init: &mut Init,
    name: &str,
    kind: OpKind,
    channels: usize,
    stride: usize,
) -> Result<OpInstance> {
    if !(stride == 1 || stride == 2) {
        return Err(Error::contract("build_op", format!("stride must be 1 or 2, got {stride}")));
    }
    if channels == 0 {
        return Err(Error::contract("build_op", "channels must be positive".to_string()));
    }
    let start = store.len();
    let body = match kind {
        OpKind::Zero => OpBody::Zero,
        OpKind::Identity => {
            if stride == 1 {
                OpBody::Identity
            } else {
                OpBody::FactorizedIdentity(FactorizedReduce::new(store, init, name, channels, channels))
            }
        }
        OpKind::MaxPool3 => OpBody::MaxPool,
        OpKind::AvgPool3 => OpBody::AvgPool,
        OpKind::DilConv3 => OpBody::DilConv(DwPwBn::new(store, init, name, channels, 3, stride, 2)),
        OpKind::DilConv5 => OpBody::DilConv(DwPwBn::new(store, init, name, channels, 5, stride, 2)),
        OpKind::SepConv5 | OpKind::SepConv7 | OpKind::SepConv9 => {
            let k = match kind {
                OpKind::SepConv5 => 5,
                OpKind::SepConv7 => 7,
                _ => 9,
            };
            // stride applies in the first sequence only
            let a = DwPwBn::new(store, init, &format!("{name}.s0"), channels, k, stride, 1);
            let b = DwPwBn::new(store, init, &format!("{name}.s1"), channels, k, 1, 1);
            OpBody::SepConv(a, b)
        }
        OpKind::RegConv3 => OpBody::RegConv(ReluConvBn::new(
            store,
            init,
            name,
            channels,
            channels,
            3,
            ConvSpec::plain(stride, 1),
        )),
    };
    let params = store
        .entries()
        .skip(start)
        .filter(|(_, e)| e.trainable)
        .map(|(id, _)| id)
        .collect();
    Ok(OpInstance { kind, channels, stride, body, params })
}

impl OpInstance {
    pub fn forward<F: Scalar>(&self, fwd: &mut Forward<F>, x: TensorId) -> Result<TensorId> {
        match &self.body {
            OpBody::Zero => fwd.tape.zeros_strided(x, self.stride),
            OpBody::Identity => Ok(x),
            OpBody::FactorizedIdentity(fr) => fr.forward(fwd, x),
            OpBody::MaxPool => fwd.tape.max_pool2d(x, 3, self.stride, 1),
            OpBody::AvgPool => fwd.tape.avg_pool2d(x, 3, self.stride, 1),
            OpBody::DilConv(seq) => seq.forward(fwd, x),
            OpBody::SepConv(a, b) => {
                let y = a.forward(fwd, x)?;
                b.forward(fwd, y)
            }
            OpBody::RegConv(rcb) => rcb.forward(fwd, x),
        }
    }

    /// Number of trainable floats actually allocated for this instance.
    pub fn param_floats<F: Scalar>(&self, store: &ParamStore<F>) -> usize {
        self.params.iter().map(|&id| store.get(id).numel()).sum()
    }
}

/// Closed-form trainable parameter count of a stride-1 instance:
/// convolution weights plus BN gamma/beta. Pools, zero and identity are free.
pub fn op_param_count(kind: OpKind, channels: usize) -> usize {
    let c = channels;
    match kind {
        OpKind::Zero | OpKind::Identity | OpKind::MaxPool3 | OpKind::AvgPool3 => 0,
        OpKind::DilConv3 => 9 * c + c * c + 2 * c,
        OpKind::DilConv5 => 25 * c + c * c + 2 * c,
        OpKind::SepConv5 => 2 * (25 * c + c * c + 2 * c),
        OpKind::SepConv7 => 2 * (49 * c + c * c + 2 * c),
        OpKind::SepConv9 => 2 * (81 * c + c * c + 2 * c),
        OpKind::RegConv3 => 9 * c * c + 2 * c,
    }
}
