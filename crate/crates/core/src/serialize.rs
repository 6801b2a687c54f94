//! Versioned binary model container.
//!
//! Layout (all integers little-endian, floats as IEEE-754 bit patterns):
//!
//! ```text
//! magic       8 bytes  "BNKITMDL"
//! version     u32      currently 1
//! layer count u32
//! per layer   u8 tag, then tag-specific payload:
//!   0 dense      in u32, out u32, weight f64[in*out], bias f64[out]
//!   1 conv2d     cout u32, cin u32, kh u32, kw u32, stride u32,
//!                kernel f64[cout*cin*kh*kw], bias f64[cout]
//!   2 relu       (empty)
//!   3 flatten    (empty)
//!   4 batchnorm  features u32, kind u8 (0 l2 / 1 l1 / 2 topk), eps f64,
//!                gauss_correction u8, k u32, momentum f64,
//!                gamma/beta/running_mean/running_sigma f64[features] each
//! ```
//!
//! Writing the same model always produces the same bytes.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::layers::Layer;
use crate::model::SequentialModel;
use crate::norm::{BatchNormLayer, NormKind};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"BNKITMDL";
const VERSION: u32 = 1;

const TAG_DENSE: u8 = 0;
const TAG_CONV2D: u8 = 1;
const TAG_RELU: u8 = 2;
const TAG_FLATTEN: u8 = 3;
const TAG_BATCHNORM: u8 = 4;

const KIND_L2: u8 = 0;
const KIND_L1: u8 = 1;
const KIND_TOPK: u8 = 2;

pub fn save_model(model: &SequentialModel, out: &mut impl Write) -> Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(model.layers.len() as u32).to_le_bytes())?;
    for layer in &model.layers {
        match layer {
            Layer::Dense { weight, bias } => {
                out.write_all(&[TAG_DENSE])?;
                out.write_all(&(weight.shape()[0] as u32).to_le_bytes())?;
                out.write_all(&(weight.shape()[1] as u32).to_le_bytes())?;
                write_f64s(out, weight.data())?;
                write_f64s(out, bias.data())?;
            }
            Layer::Conv2d {
                kernel,
                bias,
                stride,
            } => {
                out.write_all(&[TAG_CONV2D])?;
                for &extent in kernel.shape() {
                    out.write_all(&(extent as u32).to_le_bytes())?;
                }
                out.write_all(&(*stride as u32).to_le_bytes())?;
                write_f64s(out, kernel.data())?;
                write_f64s(out, bias.data())?;
            }
            Layer::ReLU => out.write_all(&[TAG_RELU])?,
            Layer::Flatten => out.write_all(&[TAG_FLATTEN])?,
            Layer::BatchNorm(bn) => {
                out.write_all(&[TAG_BATCHNORM])?;
                out.write_all(&(bn.features as u32).to_le_bytes())?;
                let (kind, eps, gauss, k) = match bn.kind {
                    NormKind::L2 { eps } => (KIND_L2, eps, 0u8, 0u32),
                    NormKind::L1 {
                        eps,
                        gauss_correction,
                    } => (KIND_L1, eps, gauss_correction as u8, 0u32),
                    NormKind::TopK { eps, k } => (KIND_TOPK, eps, 0u8, k as u32),
                };
                out.write_all(&[kind])?;
                out.write_all(&eps.to_bits().to_le_bytes())?;
                out.write_all(&[gauss])?;
                out.write_all(&k.to_le_bytes())?;
                out.write_all(&bn.momentum.to_bits().to_le_bytes())?;
                write_f64s(out, bn.gamma.data())?;
                write_f64s(out, bn.beta.data())?;
                write_f64s(out, bn.running_mean.data())?;
                write_f64s(out, bn.running_sigma.data())?;
            }
        }
    }
    Ok(())
}

pub fn save_model_to_path(model: &SequentialModel, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    save_model(model, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

fn write_f64s(out: &mut impl Write, values: &[f64]) -> Result<()> {
    for &v in values {
        out.write_all(&v.to_bits().to_le_bytes())?;
    }
    Ok(())
}

struct Reader<R> {
    inner: R,
    pos: usize,
}

impl<R: Read> Reader<R> {
    fn take<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner
            .read_exact(&mut buf)
            .map_err(|_| Error::format(self.pos, format!("truncated while reading {what}")))?;
        self.pos += N;
        Ok(buf)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take::<1>(what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take::<4>(what)?))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_bits(u64::from_le_bytes(self.take::<8>(what)?)))
    }

    fn tensor(&mut self, shape: Vec<usize>, what: &str) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(self.f64(what)?);
        }
        Tensor::from_vec(shape, data)
    }
}

pub fn load_model(input: &mut impl Read) -> Result<SequentialModel> {
    let mut r = Reader {
        inner: input,
        pos: 0,
    };
    let magic = r.take::<8>("magic")?;
    if &magic != MAGIC {
        return Err(Error::format(0, "not a model file (bad magic)"));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::format(
            8,
            format!("unsupported model version {version}, expected {VERSION}"),
        ));
    }
    let count = r.u32("layer count")? as usize;
    let mut layers = Vec::with_capacity(count);
    for index in 0..count {
        let tag_pos = r.pos;
        let tag = r.u8("layer tag")?;
        let layer = match tag {
            TAG_DENSE => {
                let rows = r.u32("dense input width")? as usize;
                let cols = r.u32("dense output width")? as usize;
                Layer::Dense {
                    weight: r.tensor(vec![rows, cols], "dense weight")?,
                    bias: r.tensor(vec![cols], "dense bias")?,
                }
            }
            TAG_CONV2D => {
                let cout = r.u32("conv cout")? as usize;
                let cin = r.u32("conv cin")? as usize;
                let kh = r.u32("conv kh")? as usize;
                let kw = r.u32("conv kw")? as usize;
                let stride = r.u32("conv stride")? as usize;
                Layer::Conv2d {
                    kernel: r.tensor(vec![cout, cin, kh, kw], "conv kernel")?,
                    bias: r.tensor(vec![cout], "conv bias")?,
                    stride,
                }
            }
            TAG_RELU => Layer::ReLU,
            TAG_FLATTEN => Layer::Flatten,
            TAG_BATCHNORM => {
                let features = r.u32("batchnorm features")? as usize;
                let kind_tag = r.u8("norm kind")?;
                let eps = r.f64("norm eps")?;
                let gauss = r.u8("gauss correction flag")?;
                let k = r.u32("topk k")? as usize;
                let momentum = r.f64("momentum")?;
                let kind = match kind_tag {
                    KIND_L2 => NormKind::L2 { eps },
                    KIND_L1 => NormKind::L1 {
                        eps,
                        gauss_correction: gauss != 0,
                    },
                    KIND_TOPK => NormKind::TopK { eps, k },
                    other => {
                        return Err(Error::format(
                            tag_pos,
                            format!("unknown norm kind tag {other} in layer {index}"),
                        ))
                    }
                };
                let mut bn = BatchNormLayer::new(features, kind);
                bn.momentum = momentum;
                bn.gamma = r.tensor(vec![features], "gamma")?;
                bn.beta = r.tensor(vec![features], "beta")?;
                bn.running_mean = r.tensor(vec![features], "running mean")?;
                bn.running_sigma = r.tensor(vec![features], "running sigma")?;
                Layer::BatchNorm(bn)
            }
            other => {
                return Err(Error::format(
                    tag_pos,
                    format!("unknown layer tag {other} at layer {index}"),
                ))
            }
        };
        layers.push(layer);
    }
    Ok(SequentialModel::new(layers))
}

pub fn load_model_from_path(path: &Path) -> Result<SequentialModel> {
    let bytes = std::fs::read(path)?;
    load_model(&mut bytes.as_slice())
}
