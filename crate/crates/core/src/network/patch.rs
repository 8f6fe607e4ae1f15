use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn check(h: usize, w: usize, p: usize) -> Result<()> {
    if p == 0 || h == 0 || w == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::InvalidArgument(format!(
            "{h}x{w} image is not divisible into {p}x{p} patches"
        )));
    }
    Ok(())
}

pub fn token_count(h: usize, w: usize, p: usize) -> Result<usize> {
    check(h, w, p)?;
    Ok((h / p) * (w / p))
}

/// Flat gather index turning `[batch, h·w]` row-major images into
/// `[batch·tokens, p·p]` patch rows (patches in raster order).
pub fn patchify_index(h: usize, w: usize, p: usize, batch: usize) -> Result<Vec<usize>> {
    check(h, w, p)?;
    let (th, tw) = (h / p, w / p);
    let mut idx = Vec::with_capacity(batch * h * w);
    for b in 0..batch {
        for ty in 0..th {
            for tx in 0..tw {
                for py in 0..p {
                    for px in 0..p {
                        idx.push(b * h * w + (ty * p + py) * w + tx * p + px);
                    }
                }
            }
        }
    }
    Ok(idx)
}

/// Inverse of [`patchify_index`]: gather index from patch rows back to images.
pub fn unpatchify_index(h: usize, w: usize, p: usize, batch: usize) -> Result<Vec<usize>> {
    let fwd = patchify_index(h, w, p, batch)?;
    let mut inv = vec![0; fwd.len()];
    for (i, &src) in fwd.iter().enumerate() {
        inv[src] = i;
    }
    Ok(inv)
}

/// Rearrange one `h × w` image into `[tokens, p·p]`.
pub fn patchify(img: &Tensor, p: usize) -> Result<Tensor> {
    let (h, w) = image_dims(img)?;
    let idx = patchify_index(h, w, p, 1)?;
    Tensor::new(vec![token_count(h, w, p)?, p * p], idx.iter().map(|&i| img.data()[i]).collect())
}

/// Inverse of [`patchify`].
pub fn unpatchify(tokens: &Tensor, h: usize, w: usize, p: usize) -> Result<Tensor> {
    let idx = unpatchify_index(h, w, p, 1)?;
    if tokens.numel() != h * w {
        return Err(Error::ShapeMismatch {
            op: "unpatchify",
            lhs: tokens.shape().to_vec(),
            rhs: vec![h, w],
        });
    }
    Tensor::new(vec![h, w], idx.iter().map(|&i| tokens.data()[i]).collect())
}

fn image_dims(img: &Tensor) -> Result<(usize, usize)> {
    match img.shape() {
        [h, w] => Ok((*h, *w)),
        s => Err(Error::InvalidShape {
            op: "patchify",
            shape: s.to_vec(),
            reason: "expected an [h, w] image".into(),
        }),
    }
}

/// Fixed 2-D sin-cos position table `[tokens, dim]`; the first half of each
/// row encodes the patch row, the second half the patch column.
pub fn pos_embedding(grid_h: usize, grid_w: usize, dim: usize) -> Result<Vec<f64>> {
    if dim % 4 != 0 {
        return Err(Error::InvalidArgument(format!("position embedding dim {dim} must be divisible by 4")));
    }
    let quarter = dim / 4;
    let mut out = Vec::with_capacity(grid_h * grid_w * dim);
    for y in 0..grid_h {
        for x in 0..grid_w {
            for pos in [y, x] {
                let mut sin = Vec::with_capacity(quarter);
                let mut cos = Vec::with_capacity(quarter);
                for i in 0..quarter {
                    let omega = 1.0 / 10_000f64.powf(i as f64 / quarter as f64);
                    let a = pos as f64 * omega;
                    sin.push(a.sin());
                    cos.push(a.cos());
                }
                out.extend(sin);
                out.extend(cos);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn token_counts() {
        assert_eq!(token_count(16, 16, 4).unwrap(), 16);
        assert_eq!(token_count(16, 16, 2).unwrap(), 64);
        assert!(token_count(16, 15, 4).is_err());
    }

    #[test]
    fn roundtrip() {
        let img = Tensor::new(vec![8, 12], (0..96).map(f64::from).collect()).unwrap();
        for p in [1, 2, 4] {
            let t = patchify(&img, p).unwrap();
            assert_eq!(t.shape(), &[96 / (p * p), p * p]);
            assert_eq!(unpatchify(&t, 8, 12, p).unwrap(), img);
        }
        let t = patchify(&img, 4).unwrap();
        assert_eq!(&t.data()[..5], &[0.0, 1.0, 2.0, 3.0, 12.0]);
    }
}
