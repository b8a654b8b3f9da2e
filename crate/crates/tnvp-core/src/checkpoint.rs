//! Bit-exact binary model checkpoints.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic        8 bytes  "TNVPCKPT"
//! version      u32      currently 1
//! dim          u32      data dimension D
//! n_units      u32      mapping units per stack
//! blocks       u32      residual blocks per coupling net
//! width        u32      hidden width per coupling net
//! mask_style   u32      BinaryMask style code
//! structure    u32      transition structure code
//! seed         u64      seed the model was created with
//! tensors      per parameter tensor, in flatten order
//!              (first stack, second stack, transition):
//!                rank     u32
//!                extents  rank x u32
//!                data     product(extents) x f64 raw bits
//! ```
//!
//! Parameters are stored as raw f64 bit patterns, so a save/load round
//! trip reproduces every evaluation bit-identically. The format is fixed
//! to f64; checkpointing other scalar types is out of scope.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::coupling::StackShape;
use crate::error::{Error, Result};
use crate::mask::MaskStyle;
use crate::model::{ModelShape, TNVPModel, TransitionStructure};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TNVPCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// A model together with the hyperparameters needed to rebuild it and
/// the seed it was created from.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: TNVPModel,
    pub shape: ModelShape,
    pub seed: u64,
}

impl Checkpoint {
    /// Bundle a model with its build shape. The shape must describe the
    /// model: dimension, unit count, and transition structure are
    /// checked here, tensor shapes again on load.
    pub fn new(model: TNVPModel, shape: ModelShape, seed: u64) -> Result<Self> {
        if model.dim() != shape.stack.dim {
            return Err(Error::invalid(format!(
                "model dimension {} does not match shape dimension {}",
                model.dim(),
                shape.stack.dim
            )));
        }
        if model.f1().units().len() != shape.stack.n_units
            || model.f2().units().len() != shape.stack.n_units
        {
            return Err(Error::invalid(format!(
                "model has {}/{} units, shape declares {}",
                model.f1().units().len(),
                model.f2().units().len(),
                shape.stack.n_units
            )));
        }
        if model.transition().structure() != shape.w_structure {
            return Err(Error::invalid(
                "model transition structure does not match shape",
            ));
        }
        Ok(Checkpoint { model, shape, seed })
    }
}

fn shape_field(value: usize, what: &str) -> Result<u32> {
    u32::try_from(value)
        .map_err(|_| Error::invalid(format!("{what} {value} exceeds checkpoint field range")))
}

fn write_tensor(out: &mut impl Write, tensor: &Tensor) -> Result<()> {
    out.write_u32::<LittleEndian>(shape_field(tensor.shape().len(), "tensor rank")?)?;
    for &extent in tensor.shape() {
        out.write_u32::<LittleEndian>(shape_field(extent, "tensor extent")?)?;
    }
    for &v in tensor.data() {
        out.write_f64::<LittleEndian>(v)?;
    }
    Ok(())
}

/// Serialize a checkpoint to any writer.
pub fn write_checkpoint(ck: &Checkpoint, mut out: impl Write) -> Result<()> {
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
    out.write_u32::<LittleEndian>(shape_field(ck.shape.stack.dim, "dimension")?)?;
    out.write_u32::<LittleEndian>(shape_field(ck.shape.stack.n_units, "unit count")?)?;
    out.write_u32::<LittleEndian>(shape_field(ck.shape.stack.blocks, "block count")?)?;
    out.write_u32::<LittleEndian>(shape_field(ck.shape.stack.width, "width")?)?;
    out.write_u32::<LittleEndian>(ck.shape.stack.mask_style.code())?;
    out.write_u32::<LittleEndian>(ck.shape.w_structure.code())?;
    out.write_u64::<LittleEndian>(ck.seed)?;
    for store in [
        ck.model.f1().store(),
        ck.model.f2().store(),
        ck.model.transition().store(),
    ] {
        for tensor in store.slots() {
            write_tensor(&mut out, tensor)?;
        }
    }
    Ok(())
}

/// Save a checkpoint to a file.
pub fn save_checkpoint(ck: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_checkpoint(ck, &mut out)?;
    out.flush()?;
    Ok(())
}

/// Distinguish "file ended early" from other I/O failures.
fn reading<T>(result: io::Result<T>, context: &str) -> Result<T> {
    result.map_err(|e| {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            Error::Truncated {
                context: context.to_string(),
            }
        } else {
            Error::Io(e)
        }
    })
}

/// Deserialize a checkpoint from any reader. The reader must end exactly
/// after the last tensor.
pub fn read_checkpoint(mut input: impl Read) -> Result<Checkpoint> {
    let mut magic = [0u8; 8];
    reading(input.read_exact(&mut magic), "magic bytes")?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic);
    }
    let version = reading(input.read_u32::<LittleEndian>(), "version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }

    let dim = reading(input.read_u32::<LittleEndian>(), "dimension")? as usize;
    let n_units = reading(input.read_u32::<LittleEndian>(), "unit count")? as usize;
    let blocks = reading(input.read_u32::<LittleEndian>(), "block count")? as usize;
    let width = reading(input.read_u32::<LittleEndian>(), "width")? as usize;
    let mask_code = reading(input.read_u32::<LittleEndian>(), "mask style")?;
    let structure_code = reading(input.read_u32::<LittleEndian>(), "transition structure")?;
    let seed = reading(input.read_u64::<LittleEndian>(), "seed")?;

    let shape = ModelShape {
        stack: StackShape {
            dim,
            n_units,
            blocks,
            width,
            mask_style: MaskStyle::from_code(mask_code)?,
        },
        w_structure: TransitionStructure::from_code(structure_code)?,
    };

    // Rebuild the skeleton from the hyperparameters, then overwrite every
    // parameter with the stored bits. The init rng is irrelevant.
    let mut model = TNVPModel::make_default(&shape, &mut ChaCha8Rng::seed_from_u64(0))?;

    let expected_shapes: Vec<Vec<usize>> = [
        model.f1().store(),
        model.f2().store(),
        model.transition().store(),
    ]
    .iter()
    .flat_map(|store| store.slots().iter().map(|t| t.shape().to_vec()))
    .collect();

    let mut flat = Vec::with_capacity(model.num_params());
    for expected in &expected_shapes {
        let rank = reading(input.read_u32::<LittleEndian>(), "tensor rank")? as usize;
        let mut extents = Vec::with_capacity(rank);
        for _ in 0..rank {
            extents.push(reading(input.read_u32::<LittleEndian>(), "tensor extent")? as usize);
        }
        if &extents != expected {
            return Err(Error::ShapeMismatch {
                op: "load checkpoint tensor",
                left: expected.clone(),
                right: extents,
            });
        }
        let len: usize = extents.iter().product();
        for _ in 0..len {
            flat.push(reading(input.read_f64::<LittleEndian>(), "tensor data")?);
        }
    }
    model.unflatten_params(&flat)?;

    let mut probe = [0u8; 1];
    match input.read(&mut probe)? {
        0 => Ok(Checkpoint { model, shape, seed }),
        _ => Err(Error::invalid(
            "trailing bytes after the last checkpoint tensor",
        )),
    }
}

/// Load a checkpoint from a file.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    read_checkpoint(BufReader::new(File::open(path)?))
}
