//! Layer-level functions for NCHW feature maps.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use crate::sparse::SparseMap;
use crate::var::Var;

thread_local! {
    static MAP_CACHE: RefCell<HashMap<String, Rc<SparseMap>>> = RefCell::new(HashMap::new());
}

/// Returns a cached map for `key`, building it on first use.
pub fn cached_map(key: String, build: impl FnOnce() -> SparseMap) -> Rc<SparseMap> {
    if let Some(m) = MAP_CACHE.with(|c| c.borrow().get(&key).cloned()) {
        return m;
    }
    let map = Rc::new(build());
    MAP_CACHE.with(|c| c.borrow_mut().insert(key, map.clone()));
    map
}

pub fn dims4(x: &Var) -> (usize, usize, usize, usize) {
    let s = x.shape();
    assert_eq!(s.len(), 4, "expected an NCHW tensor, got shape {:?}", s);
    (s[0], s[1], s[2], s[3])
}

pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Patch matrix of shape `(C*k*k, N*Ho*Wo)`; out-of-range taps read zero.
pub fn im2col_map(
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Rc<SparseMap> {
    let key = format!("im2col:{n}:{c}:{h}:{w}:{k}:{stride}:{pad}");
    cached_map(key, || {
        assert!(h + 2 * pad >= k && w + 2 * pad >= k, "kernel larger than padded input");
        let ho = conv_out_dim(h, k, stride, pad);
        let wo = conv_out_dim(w, k, stride, pad);
        let cols = n * ho * wo;
        SparseMap::gather(&[n, c, h, w], &[c * k * k, cols], |i| {
            let (r, col) = (i / cols, i % cols);
            let (ci, ki, kj) = (r / (k * k), (r / k) % k, r % k);
            let (ni, oy, ox) = (col / (ho * wo), (col / wo) % ho, col % wo);
            let iy = (oy * stride + ki) as isize - pad as isize;
            let ix = (ox * stride + kj) as isize - pad as isize;
            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                return None;
            }
            Some(((ni * c + ci) * h + iy as usize) * w + ix as usize)
        })
    })
}

/// 2-D cross-correlation. `weight` is `(Cout, Cin, k, k)`, `bias` is `(Cout,)`.
pub fn conv2d(x: &Var, weight: &Var, bias: Option<&Var>, stride: usize, pad: usize) -> Var {
    let (n, c, h, w) = dims4(x);
    let ws = weight.shape();
    assert_eq!(ws.len(), 4, "conv weight must be 4-D");
    let (cout, cin, k) = (ws[0], ws[1], ws[2]);
    assert_eq!(cin, c, "conv input channels");
    assert_eq!(ws[3], k, "square kernels only");
    let ho = conv_out_dim(h, k, stride, pad);
    let wo = conv_out_dim(w, k, stride, pad);
    let y = if k == 1 && stride == 1 && pad == 0 {
        let flat = x.permute(&[1, 0, 2, 3]).reshape(&[c, n * h * w]);
        weight.reshape(&[cout, c]).matmul(&flat)
    } else {
        let cols = x.sparse(&im2col_map(n, c, h, w, k, stride, pad));
        weight.reshape(&[cout, c * k * k]).matmul(&cols)
    };
    let y = y.reshape(&[cout, n, ho, wo]).permute(&[1, 0, 2, 3]);
    match bias {
        Some(b) => y.add(&b.reshape(&[1, cout, 1, 1])),
        None => y,
    }
}

/// `x @ weight^T + bias` for `x` of shape `(N, in)` and `weight` of `(out, in)`.
pub fn linear(x: &Var, weight: &Var, bias: Option<&Var>) -> Var {
    let y = x.matmul(&weight.transpose_last());
    match bias {
        Some(b) => y.add(&b.reshape(&[1, b.len()])),
        None => y,
    }
}

/// Mean over non-overlapping `k`×`k` blocks (trailing rows/cols dropped).
pub fn avg_pool(x: &Var, k: usize) -> Var {
    let (n, c, h, w) = dims4(x);
    let (ho, wo) = (h / k, w / k);
    assert!(ho > 0 && wo > 0, "avg_pool window larger than input");
    let key = format!("avgpool:{n}:{c}:{h}:{w}:{k}");
    let scale = 1.0 / (k * k) as f64;
    let map = cached_map(key, || {
        SparseMap::from_rows(&[n, c, h, w], &[n, c, ho, wo], |i, row| {
            let (nc, oy, ox) = (i / (ho * wo), (i / wo) % ho, i % wo);
            for dy in 0..k {
                for dx in 0..k {
                    row.push(((nc * h + oy * k + dy) * w + ox * k + dx, scale));
                }
            }
        })
    });
    x.sparse(&map)
}

pub fn upsample_nearest(x: &Var, factor: usize) -> Var {
    let (n, c, h, w) = dims4(x);
    let (ho, wo) = (h * factor, w * factor);
    let key = format!("nearest:{n}:{c}:{h}:{w}:{factor}");
    let map = cached_map(key, || {
        SparseMap::gather(&[n, c, h, w], &[n, c, ho, wo], |i| {
            let (nc, oy, ox) = (i / (ho * wo), (i / wo) % ho, i % wo);
            Some((nc * h + oy / factor) * w + ox / factor)
        })
    });
    x.sparse(&map)
}

/// Mirror index without repeating the edge sample (`dcb|abcd|cba`).
/// Folds repeatedly, so any offset maps into range for `len >= 2`.
pub fn reflect_index(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let m = i.rem_euclid(period);
    if m < len as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Reflect padding on the spatial axes: `(top, bottom, left, right)`.
pub fn reflect_pad(x: &Var, top: usize, bottom: usize, left: usize, right: usize) -> Var {
    if top + bottom + left + right == 0 {
        return x.clone();
    }
    let (n, c, h, w) = dims4(x);
    let (ho, wo) = (h + top + bottom, w + left + right);
    let key = format!("reflect:{n}:{c}:{h}:{w}:{top}:{bottom}:{left}:{right}");
    let map = cached_map(key, || {
        SparseMap::gather(&[n, c, h, w], &[n, c, ho, wo], |i| {
            let (nc, oy, ox) = (i / (ho * wo), (i / wo) % ho, i % wo);
            let sy = reflect_index(oy as isize - top as isize, h);
            let sx = reflect_index(ox as isize - left as isize, w);
            Some((nc * h + sy) * w + sx)
        })
    });
    x.sparse(&map)
}

/// Spatial crop starting at `(top, left)` with size `(ho, wo)`.
pub fn crop(x: &Var, top: usize, left: usize, ho: usize, wo: usize) -> Var {
    let (n, c, h, w) = dims4(x);
    if top == 0 && left == 0 && ho == h && wo == w {
        return x.clone();
    }
    assert!(top + ho <= h && left + wo <= w, "crop out of bounds");
    let key = format!("crop:{n}:{c}:{h}:{w}:{top}:{left}:{ho}:{wo}");
    let map = cached_map(key, || {
        SparseMap::gather(&[n, c, h, w], &[n, c, ho, wo], |i| {
            let (nc, oy, ox) = (i / (ho * wo), (i / wo) % ho, i % wo);
            Some((nc * h + top + oy) * w + left + ox)
        })
    });
    x.sparse(&map)
}

/// Channels `start..start + len`.
pub fn narrow_channels(x: &Var, start: usize, len: usize) -> Var {
    let (n, c, h, w) = dims4(x);
    assert!(start + len <= c, "channel range out of bounds");
    let hw = h * w;
    let key = format!("narrow:{n}:{c}:{h}:{w}:{start}:{len}");
    let map = cached_map(key, || {
        SparseMap::gather(&[n, c, h, w], &[n, len, h, w], |i| {
            let (ni, ci, p) = (i / (len * hw), (i / hw) % len, i % hw);
            Some((ni * c + start + ci) * hw + p)
        })
    });
    x.sparse(&map)
}

/// Concatenation along the channel axis.
pub fn concat_channels(a: &Var, b: &Var) -> Var {
    let (n, ca, h, w) = dims4(a);
    let (nb, cb, hb, wb) = dims4(b);
    assert_eq!((n, h, w), (nb, hb, wb), "concat needs matching N, H, W");
    let c = ca + cb;
    let hw = h * w;
    let embed = |offset: usize, cpart: usize| {
        let key = format!("embed:{n}:{cpart}:{h}:{w}:{offset}:{c}");
        cached_map(key, || {
            SparseMap::gather(&[n, cpart, h, w], &[n, c, h, w], |i| {
                let (ni, ci, p) = (i / (c * hw), (i / hw) % c, i % hw);
                (ci >= offset && ci < offset + cpart).then(|| (ni * cpart + ci - offset) * hw + p)
            })
        })
    };
    a.sparse(&embed(0, ca)).add(&b.sparse(&embed(ca, cb)))
}

/// Bilinear resize with half-pixel centres (corners not aligned).
pub fn bilinear_resize(x: &Var, ho: usize, wo: usize) -> Var {
    let (n, c, h, w) = dims4(x);
    let key = format!("bilinear:{n}:{c}:{h}:{w}:{ho}:{wo}");
    let map = cached_map(key, || {
        let ytaps: Vec<_> = (0..ho).map(|o| bilinear_taps(o, h, ho)).collect();
        let xtaps: Vec<_> = (0..wo).map(|o| bilinear_taps(o, w, wo)).collect();
        SparseMap::from_rows(&[n, c, h, w], &[n, c, ho, wo], |i, row| {
            let (nc, oy, ox) = (i / (ho * wo), (i / wo) % ho, i % wo);
            for &(sy, wy) in &ytaps[oy] {
                for &(sx, wx) in &xtaps[ox] {
                    if wy * wx != 0.0 {
                        row.push(((nc * h + sy) * w + sx, wy * wx));
                    }
                }
            }
        })
    });
    x.sparse(&map)
}

/// Source samples and weights for output coordinate `o` when resampling
/// `len_in` samples to `len_out`.
pub fn bilinear_taps(o: usize, len_in: usize, len_out: usize) -> [(usize, f64); 2] {
    let src = ((o as f64 + 0.5) * len_in as f64 / len_out as f64 - 0.5).max(0.0);
    let i0 = (src.floor() as usize).min(len_in - 1);
    let i1 = (i0 + 1).min(len_in - 1);
    let t = if i1 == i0 { 0.0 } else { src - i0 as f64 };
    [(i0, 1.0 - t), (i1, t)]
}

/// Per-sample, per-channel normalisation over the spatial axes.
pub fn instance_norm(x: &Var, eps: f64) -> Var {
    let mean = x.mean_axes(&[2, 3]);
    let centred = x.sub(&mean);
    let var = centred.square().mean_axes(&[2, 3]);
    centred.div(&var.add_scalar(eps).sqrt())
}

/// Batch normalisation with batch statistics. Returns the normalised tensor
/// and the per-channel batch mean and (biased) variance.
pub fn batch_norm_train(x: &Var, eps: f64) -> (Var, Var, Var) {
    let mean = x.mean_axes(&[0, 2, 3]);
    let centred = x.sub(&mean);
    let var = centred.square().mean_axes(&[0, 2, 3]);
    let y = centred.div(&var.add_scalar(eps).sqrt());
    (y, mean, var)
}

/// Per-channel affine `x * gamma + beta` for `(C,)` parameters.
pub fn channel_affine(x: &Var, gamma: &Var, beta: &Var) -> Var {
    let c = gamma.len();
    x.mul(&gamma.reshape(&[1, c, 1, 1]))
        .add(&beta.reshape(&[1, c, 1, 1]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array, IxDyn};

    fn ramp(shape: &[usize]) -> Var {
        let n: usize = shape.iter().product();
        Var::constant(
            Array::from_shape_vec(IxDyn(shape), (0..n).map(|v| v as f64).collect()).unwrap(),
        )
    }

    #[test]
    fn conv_matches_direct_loop() {
        let x = ramp(&[2, 3, 5, 4]);
        let w = Var::constant(
            Array::from_shape_fn(IxDyn(&[2, 3, 3, 3]), |d| {
                ((d[0] * 7 + d[1] * 5 + d[2] * 3 + d[3]) % 5) as f64 - 2.0
            }),
        );
        let b = Var::constant(Array::from_vec(vec![0.5, -1.0]).into_dyn());
        let y = conv2d(&x, &w, Some(&b), 2, 1);
        assert_eq!(y.shape(), &[2, 2, 3, 2]);
        let (xv, wv) = (x.value(), w.value());
        for n in 0..2 {
            for o in 0..2 {
                for oy in 0..3 {
                    for ox in 0..2 {
                        let mut acc = b.value()[[o]];
                        for c in 0..3 {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let iy = (oy * 2 + ky) as isize - 1;
                                    let ix = (ox * 2 + kx) as isize - 1;
                                    if iy >= 0 && ix >= 0 && iy < 5 && ix < 4 {
                                        acc += xv[[n, c, iy as usize, ix as usize]]
                                            * wv[[o, c, ky, kx]];
                                    }
                                }
                            }
                        }
                        assert!((y.value()[[n, o, oy, ox]] - acc).abs() < 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn reflect_index_folds() {
        let got: Vec<usize> = (-3..7).map(|i| reflect_index(i, 4)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 2, 1, 0]);
        assert_eq!(reflect_index(-5, 1), 0);
    }

    #[test]
    fn concat_then_narrow_recovers_parts() {
        let a = ramp(&[2, 2, 3, 3]);
        let b = ramp(&[2, 1, 3, 3]).scale(-1.0);
        let ab = concat_channels(&a, &b);
        assert_eq!(ab.shape(), &[2, 3, 3, 3]);
        assert_eq!(narrow_channels(&ab, 0, 2).value(), a.value());
        assert_eq!(narrow_channels(&ab, 2, 1).value(), b.value());
    }
}
