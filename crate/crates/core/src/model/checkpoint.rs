//! Versioned binary model container.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "SGNN"
//! 4       2     version (u16 LE) = 1
//! 6       1     architecture: 0 = gcn, 1 = gat, 2 = sage
//! 7       1     variant: head count (gat), 0 = mean / 1 = max (sage), 0 (gcn)
//! 8       16    input width, hidden[0..3] (u32 LE each)
//! 24      8     GAT LeakyReLU slope (f64 LE; 0 for other architectures)
//! 32      4     parameter count P (u32 LE)
//! 36      ...   P records: rows (u32), cols (u32), rows*cols f64 LE row-major
//! ```
//!
//! Parameters appear in [`GnnModel::parameters`] order. The encoding is a pure
//! function of the model, so identical parameters give identical bytes.

use std::path::Path;

use crate::error::{Error, Result};
use crate::io::binary::{put_f64, put_u16, put_u32, to_u32, Reader};
use crate::layers::{GatHead, GatLayer, GcnLayer, Layer, SageAggregator, SageLayer};
use crate::tensor::{Activation, Matrix};

use super::{Architecture, DimensionPlan, GnnModel, NUM_LAYERS};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SGNN";
pub const CHECKPOINT_VERSION: u16 = 1;

pub fn encode_checkpoint(model: &GnnModel) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u16(&mut out, CHECKPOINT_VERSION);
    let (tag, variant) = match model.architecture() {
        Architecture::Gcn => (0u8, 0u8),
        Architecture::Gat { heads } => (1, heads),
        Architecture::Sage(SageAggregator::Mean) => (2, 0),
        Architecture::Sage(SageAggregator::Max) => (2, 1),
    };
    out.push(tag);
    out.push(variant);
    let plan = model.plan();
    put_u32(&mut out, to_u32(plan.input, "input width")?);
    for h in plan.hidden {
        put_u32(&mut out, to_u32(h, "hidden width")?);
    }
    let slope = match &model.layers()[0] {
        Layer::Gat(l) => l.leaky_slope,
        _ => 0.0,
    };
    put_f64(&mut out, slope);
    let params = model.parameters();
    put_u32(&mut out, to_u32(params.len(), "parameter count")?);
    for p in params {
        put_u32(&mut out, to_u32(p.rows(), "rows")?);
        put_u32(&mut out, to_u32(p.cols(), "cols")?);
        for &v in p.as_slice() {
            put_f64(&mut out, v);
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<GnnModel> {
    let mut r = Reader::new(bytes);
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: "bad checkpoint magic".into(),
        });
    }
    let version = r.u16("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format {
            offset: 4,
            message: format!("unsupported checkpoint version {version}"),
        });
    }
    let tag = r.u8("architecture")?;
    let variant = r.u8("variant")?;
    let architecture = match (tag, variant) {
        (0, 0) => Architecture::Gcn,
        (1, h @ (1 | 2)) => Architecture::Gat { heads: h },
        (2, 0) => Architecture::Sage(SageAggregator::Mean),
        (2, 1) => Architecture::Sage(SageAggregator::Max),
        _ => {
            return Err(Error::Format {
                offset: 6,
                message: format!("unknown architecture tag ({tag}, {variant})"),
            })
        }
    };
    let input = r.u32("input width")? as usize;
    let mut hidden = [0usize; NUM_LAYERS];
    for h in hidden.iter_mut() {
        *h = r.u32("hidden width")? as usize;
    }
    let plan = DimensionPlan::new(input, hidden);
    let slope = r.f64("leaky slope")?;
    let count = r.u32("parameter count")? as usize;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let rows = r.u32("rows")? as usize;
        let cols = r.u32("cols")? as usize;
        let n = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| r.format_error("parameter size overflow"))?;
        let raw = r.take(n, "parameter values")?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.push(Matrix::from_vec(rows, cols, values)?);
    }
    if r.remaining() != 0 {
        return Err(r.format_error(format!("{} trailing bytes", r.remaining())));
    }

    let mut it = params.into_iter();
    let mut next = |what: &str| {
        it.next()
            .ok_or_else(|| Error::Validation(format!("checkpoint is missing {what}")))
    };
    let act = Activation::Relu;
    let mut layers = Vec::with_capacity(NUM_LAYERS);
    for _ in 0..NUM_LAYERS {
        let layer = match architecture {
            Architecture::Gcn => Layer::Gcn(GcnLayer {
                weight: next("gcn weight")?,
                activation: act,
            }),
            Architecture::Gat { heads } => {
                let mut hs = Vec::with_capacity(usize::from(heads));
                for _ in 0..heads {
                    hs.push(GatHead {
                        weight: next("gat weight")?,
                        attention: next("gat attention")?,
                    });
                }
                Layer::Gat(GatLayer {
                    heads: hs,
                    activation: act,
                    leaky_slope: slope,
                })
            }
            Architecture::Sage(aggregator) => Layer::Sage(SageLayer {
                weight: next("sage weight")?,
                aggregator,
                activation: act,
            }),
        };
        layers.push(layer);
    }
    let head_weight = next("head weight")?;
    let head_bias = next("head bias")?;
    if it.next().is_some() {
        return Err(Error::Validation("checkpoint has surplus parameters".into()));
    }
    GnnModel::from_parts(architecture, plan, layers, head_weight, head_bias)
}

pub fn write_checkpoint(model: &GnnModel, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(model)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<GnnModel> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
