use std::collections::BTreeMap;
use std::rc::Rc;

use crate::compression::{wap_compress, BlockPartition, FeatureMap};
use crate::encoder::{block_shapes, init_dense, transformer_block, ParamVars};
use crate::error::{Error, Result};
use crate::numerics::{Element, Tape, Tensor, Var};
use crate::rng::SplitMix64;

/// Number of transformer blocks in the reconstruction decoder.
pub const DECODER_BLOCKS: usize = 2;

/// WAP-compressed teacher tokens flattened to `[(N/r), D]`.
pub fn ctd_target<E: Element>(teacher_dense: &FeatureMap<E>, part: &BlockPartition) -> Result<Tensor<E>> {
    Ok(wap_compress(teacher_dense, part)?.flat_tokens())
}

/// Outlier-clipped MSE between the student's projected tokens and the
/// compressed teacher target. The target enters the tape as a constant.
pub fn ctd_loss<E: Element>(
    tape: &Tape<E>,
    student_out: &Var<E>,
    teacher_dense: &FeatureMap<E>,
    part: &BlockPartition,
    sigma: f64,
) -> Result<Var<E>> {
    let target = ctd_target(teacher_dense, part)?;
    if student_out.shape() != target.shape() {
        return Err(Error::Dimension(format!(
            "student output {:?} vs compressed target {:?}",
            student_out.shape(),
            target.shape()
        )));
    }
    tape.outlier_clipped_mse(student_out, &tape.constant(target), sigma)
}

/// Plain MSE against the teacher's dense patch tokens `[N, D]`.
pub fn rtd_loss<E: Element>(
    tape: &Tape<E>,
    reconstruction: &Var<E>,
    teacher_dense: &FeatureMap<E>,
) -> Result<Var<E>> {
    let target = teacher_dense.flat_tokens();
    if reconstruction.shape() != target.shape() {
        return Err(Error::Dimension(format!(
            "reconstruction {:?} vs teacher tokens {:?}",
            reconstruction.shape(),
            target.shape()
        )));
    }
    tape.mse(reconstruction, &tape.constant(target))
}

/// Auxiliary decoder for reconstructive distillation: an offset embedding
/// `[r, D]` and [`DECODER_BLOCKS`] transformer blocks named `dec.{k}.*`.
#[derive(Clone, Debug, PartialEq)]
pub struct RtdDecoder<E: Element = f32> {
    pub dim: usize,
    pub heads: usize,
    pub ratio: usize,
    pub tensors: BTreeMap<String, Tensor<E>>,
}

impl<E: Element> RtdDecoder<E> {
    /// Offset embedding starts at zero; blocks use the encoder's dense
    /// initialization.
    pub fn new(dim: usize, heads: usize, ratio: usize, seed: u64) -> Result<Self> {
        if dim == 0 || heads == 0 || dim % heads != 0 || ratio == 0 {
            return Err(Error::Config(format!(
                "decoder dim {dim}, heads {heads}, ratio {ratio} is not admissible"
            )));
        }
        let mut rng = SplitMix64::new(seed);
        let residual = 1.0 / (2.0 * DECODER_BLOCKS as f64).sqrt();
        let mut tensors = BTreeMap::new();
        tensors.insert("offset".to_string(), Tensor::zeros(&[ratio, dim]));
        for k in 0..DECODER_BLOCKS {
            for (name, shape) in block_shapes(&format!("dec.{k}."), dim) {
                let t = init_dense(&name, &shape, dim, residual, &mut rng)?;
                tensors.insert(name, t);
            }
        }
        Ok(Self {
            dim,
            heads,
            ratio,
            tensors,
        })
    }

    pub fn num_params(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }
}

/// Nearest-neighbor unpooling of `[(N/r), D]` to `[N, D]` in source token
/// order, plus the offset embedding of each token's position in its block,
/// followed by the decoder blocks over all `N` tokens at once.
pub fn rtd_decoder_forward<E: Element>(
    tape: &Tape<E>,
    student_out: &Var<E>,
    vars: &ParamVars<E>,
    heads: usize,
    part: &BlockPartition,
) -> Result<Var<E>> {
    let s = student_out.shape();
    let offset = vars.get("offset")?;
    let (r, d) = (offset.shape()[0], offset.shape()[1]);
    if s.len() != 2 || s[0] != part.num_blocks() || s[1] != d || r != part.ratio() {
        return Err(Error::Dimension(format!(
            "decoder input {s:?} with offset table {:?} for {} blocks of {}",
            offset.shape(),
            part.num_blocks(),
            part.ratio()
        )));
    }
    let assign = part.source_assignment();
    let n = assign.len();
    let up = tape.gather_rows(student_out, Rc::new(assign.iter().map(|a| a.0).collect()))?;
    let pos = tape.gather_rows(offset, Rc::new(assign.iter().map(|a| a.1).collect()))?;
    let mut x = tape.reshape(&tape.add(&up, &pos)?, &[1, n, d])?;
    for k in 0..DECODER_BLOCKS {
        x = transformer_block(tape, vars, &format!("dec.{k}."), heads, &x)?;
    }
    tape.reshape(&x, &[n, d])
}
