//! Binary checkpoints for dynamics models.
//!
//! Layout, all integers little-endian:
//!
//! | field          | type                         |
//! |----------------|------------------------------|
//! | magic          | `b"NE3M"`                    |
//! | version        | u32 (currently 1)            |
//! | output kind    | u8: 0 plain, 1 residual, 2 Bernoulli |
//! | num_actions    | u32                          |
//! | layer count    | u32                          |
//! | layer sizes    | u32 each                     |
//! | param count    | u64                          |
//! | parameters     | f64 each, in layer order     |

use std::io::{Read, Write};

use super::nn::{DynamicsNet, OutputKind};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"NE3M";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(net: &DynamicsNet, out: &mut W) -> Result<()> {
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    let kind: u8 = match net.kind() {
        OutputKind::Deterministic { residual: false } => 0,
        OutputKind::Deterministic { residual: true } => 1,
        OutputKind::Bernoulli => 2,
    };
    out.write_all(&[kind])?;
    out.write_all(&(net.num_actions() as u32).to_le_bytes())?;
    out.write_all(&(net.layer_sizes().len() as u32).to_le_bytes())?;
    for &s in net.layer_sizes() {
        out.write_all(&(s as u32).to_le_bytes())?;
    }
    out.write_all(&(net.params().len() as u64).to_le_bytes())?;
    for p in net.params() {
        out.write_all(&p.to_le_bytes())?;
    }
    Ok(())
}

fn read_array<R: Read, const N: usize>(input: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    input
        .read_exact(&mut buf)
        .map_err(|e| Error::Checkpoint(format!("truncated checkpoint: {e}")))?;
    Ok(buf)
}

pub fn read_checkpoint<R: Read>(input: &mut R) -> Result<DynamicsNet> {
    let magic: [u8; 4] = read_array(input)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!("bad magic {magic:?}")));
    }
    let version = u32::from_le_bytes(read_array(input)?);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let kind = match read_array::<_, 1>(input)?[0] {
        0 => OutputKind::Deterministic { residual: false },
        1 => OutputKind::Deterministic { residual: true },
        2 => OutputKind::Bernoulli,
        k => return Err(Error::Checkpoint(format!("unknown output kind {k}"))),
    };
    let num_actions = u32::from_le_bytes(read_array(input)?) as usize;
    let layers = u32::from_le_bytes(read_array(input)?) as usize;
    if layers > 64 {
        return Err(Error::Checkpoint(format!(
            "implausible layer count {layers}"
        )));
    }
    let sizes = (0..layers)
        .map(|_| read_array(input).map(|b| u32::from_le_bytes(b) as usize))
        .collect::<Result<Vec<_>>>()?;
    let count = u64::from_le_bytes(read_array(input)?) as usize;
    if sizes.len() >= 3 && count != DynamicsNet::param_count(&sizes, num_actions) {
        return Err(Error::Checkpoint(format!(
            "parameter count {count} does not match the layer sizes"
        )));
    }
    let params = (0..count)
        .map(|_| read_array(input).map(f64::from_le_bytes))
        .collect::<Result<Vec<_>>>()?;
    DynamicsNet::from_params(&sizes, num_actions, kind, params)
        .map_err(|e| Error::Checkpoint(e.to_string()))
}
