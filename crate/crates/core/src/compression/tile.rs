use crate::error::{Error, Result};
use crate::numerics::{Element, Tensor};

/// Splits `[T, Hpx, Wpx, 3]` frames into `base×base` tile clips, row-major
/// over the tile grid. No resizing: `base` must divide both resolutions.
pub fn tile_frames<E: Element>(frames: &Tensor<E>, base: usize) -> Result<Vec<Tensor<E>>> {
    let s = frames.shape();
    if s.len() != 4 || s[3] != 3 {
        return Err(Error::Dimension(format!("frames must be T×H×W×3, got {s:?}")));
    }
    let (t, hpx, wpx) = (s[0], s[1], s[2]);
    if base == 0 || hpx % base != 0 || wpx % base != 0 {
        return Err(Error::Tiling(format!(
            "{hpx}x{wpx} frames do not split into {base}px tiles"
        )));
    }
    let (rows, cols) = (hpx / base, wpx / base);
    let x = frames.data();
    let mut tiles = Vec::with_capacity(rows * cols);
    for tr in 0..rows {
        for tc in 0..cols {
            let mut data = Vec::with_capacity(t * base * base * 3);
            for f in 0..t {
                for y in 0..base {
                    let start = ((f * hpx + tr * base + y) * wpx + tc * base) * 3;
                    data.extend_from_slice(&x[start..start + base * 3]);
                }
            }
            tiles.push(Tensor::new(&[t, base, base, 3], data)?);
        }
    }
    Ok(tiles)
}

/// Inverse of [`tile_frames`] for a `rows × cols` tile grid.
pub fn untile_frames<E: Element>(tiles: &[Tensor<E>], rows: usize, cols: usize) -> Result<Tensor<E>> {
    if tiles.len() != rows * cols || tiles.is_empty() {
        return Err(Error::Tiling(format!(
            "{} tiles for a {rows}x{cols} grid",
            tiles.len()
        )));
    }
    let s = tiles[0].shape().to_vec();
    if tiles.iter().any(|t| t.shape() != s.as_slice()) {
        return Err(Error::Dimension("tiles differ in shape".into()));
    }
    let (t, base) = (s[0], s[1]);
    let (hpx, wpx) = (rows * base, cols * base);
    let mut out = vec![E::zero(); t * hpx * wpx * 3];
    for (k, tile) in tiles.iter().enumerate() {
        let (tr, tc) = (k / cols, k % cols);
        for f in 0..t {
            for y in 0..base {
                let dst = ((f * hpx + tr * base + y) * wpx + tc * base) * 3;
                let src = (f * base + y) * base * 3;
                out[dst..dst + base * 3].copy_from_slice(&tile.data()[src..src + base * 3]);
            }
        }
    }
    Tensor::new(&[t, hpx, wpx, 3], out)
}
