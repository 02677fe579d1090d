use crate::numerics::{bilinear_resize, Real, Tensor};
use crate::Error;

fn image_dims<T: Real>(images: &Tensor<T>) -> Result<(usize, usize, usize), Error> {
    match *images.shape() {
        [b, h, w, c] if h == w => Ok((b, h, c)),
        [h, w, c] if h == w => Ok((1, h, c)),
        _ => Err(Error::Config(format!(
            "expected square [S, S, C] or [B, S, S, C] images, got {:?}",
            images.shape()
        ))),
    }
}

/// Cuts square images into `side x side` non-overlapping patches in
/// row-major spatial order.
///
/// `[S, S, C]` yields `[N, P, P, C]`; `[B, S, S, C]` yields
/// `[B * N, P, P, C]` with each image's patches contiguous.
pub fn split_patches<T: Real>(images: &Tensor<T>, side: usize) -> Result<Tensor<T>, Error> {
    let (batch, s, c) = image_dims(images)?;
    if side == 0 || s % side != 0 {
        return Err(Error::Config(format!(
            "image side {s} is not divisible into a {side}x{side} grid"
        )));
    }
    let p = s / side;
    let src = images.data();
    let mut out = Vec::with_capacity(src.len());
    for b in 0..batch {
        let img = &src[b * s * s * c..(b + 1) * s * s * c];
        for py in 0..side {
            for px in 0..side {
                for y in 0..p {
                    let row = ((py * p + y) * s + px * p) * c;
                    out.extend_from_slice(&img[row..row + p * c]);
                }
            }
        }
    }
    Ok(Tensor::new(vec![batch * side * side, p, p, c], out)?)
}

/// Inverse of [`split_patches`] for a single image.
pub fn merge_patches<T: Real>(patches: &Tensor<T>, side: usize) -> Result<Tensor<T>, Error> {
    let [n, p, p2, c] = *patches.shape() else {
        return Err(Error::Config(format!("expected [N, P, P, C] patches, got {:?}", patches.shape())));
    };
    if n != side * side || p != p2 {
        return Err(Error::Config(format!("{n} patches do not form a {side}x{side} grid")));
    }
    let s = side * p;
    let mut out = vec![T::zero(); s * s * c];
    for (i, patch) in patches.data().chunks(p * p * c).enumerate() {
        let (py, px) = (i / side, i % side);
        for y in 0..p {
            let dst = ((py * p + y) * s + px * p) * c;
            out[dst..dst + p * c].copy_from_slice(&patch[y * p * c..(y + 1) * p * c]);
        }
    }
    Ok(Tensor::new(vec![s, s, c], out)?)
}

/// Splits every image on a `side` grid, resizes each patch to
/// `base x base` and flattens it: returns `[B, N, base * base * C]`.
pub fn aligned_patch_features<T: Real>(images: &Tensor<T>, side: usize, base: usize) -> Result<Tensor<T>, Error> {
    let (batch, _, c) = image_dims(images)?;
    let patches = split_patches(images, side)?;
    let resized = bilinear_resize(&patches, base, base)?;
    Ok(resized.reshape(&[batch, side * side, base * base * c])?)
}
