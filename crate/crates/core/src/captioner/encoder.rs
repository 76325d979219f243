//! Four-layer strided conv stack followed by adaptive average pooling onto a
//! square grid of feature positions. Activations are `(positions, channels)`
//! matrices in row-major spatial order.

use ndarray::{s, Array1, Array2, Axis};

use super::params::Params;

const K: usize = 3;
const STRIDE: usize = 2;
const PAD: usize = 1;

pub(crate) struct ConvCache {
    cols: Array2<f64>,
    /// Post-ReLU output, doubles as the ReLU mask.
    out: Array2<f64>,
    in_hw: (usize, usize),
    in_ch: usize,
}

pub(crate) struct EncoderCache {
    convs: Vec<ConvCache>,
    last_hw: (usize, usize),
    grid: usize,
}

fn out_len(n: usize) -> usize {
    (n + 2 * PAD - K) / STRIDE + 1
}

fn im2col(input: &Array2<f64>, (h, w): (usize, usize)) -> (Array2<f64>, (usize, usize)) {
    let c = input.ncols();
    let (oh, ow) = (out_len(h), out_len(w));
    let mut cols = Array2::zeros((oh * ow, K * K * c));
    for oy in 0..oh {
        for ox in 0..ow {
            let mut row = cols.row_mut(oy * ow + ox);
            for ky in 0..K {
                let iy = (oy * STRIDE + ky) as isize - PAD as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..K {
                    let ix = (ox * STRIDE + kx) as isize - PAD as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let src = input.row(iy as usize * w + ix as usize);
                    let off = (ky * K + kx) * c;
                    row.slice_mut(s![off..off + c]).assign(&src);
                }
            }
        }
    }
    (cols, (oh, ow))
}

fn col2im(dcols: &Array2<f64>, (h, w): (usize, usize), c: usize) -> Array2<f64> {
    let (oh, ow) = (out_len(h), out_len(w));
    let mut dx = Array2::zeros((h * w, c));
    for oy in 0..oh {
        for ox in 0..ow {
            let row = dcols.row(oy * ow + ox);
            for ky in 0..K {
                let iy = (oy * STRIDE + ky) as isize - PAD as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..K {
                    let ix = (ox * STRIDE + kx) as isize - PAD as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let off = (ky * K + kx) * c;
                    let mut dst = dx.row_mut(iy as usize * w + ix as usize);
                    dst += &row.slice(s![off..off + c]);
                }
            }
        }
    }
    dx
}

/// Half-open bin `[start, end)` of adaptive pooling cell `i` of `g` over `n`.
fn bin(i: usize, g: usize, n: usize) -> (usize, usize) {
    (i * n / g, ((i + 1) * n).div_ceil(g))
}

fn pool(input: &Array2<f64>, (h, w): (usize, usize), g: usize) -> Array2<f64> {
    let mut out = Array2::zeros((g * g, input.ncols()));
    for gy in 0..g {
        let (y0, y1) = bin(gy, g, h);
        for gx in 0..g {
            let (x0, x1) = bin(gx, g, w);
            let n = ((y1 - y0) * (x1 - x0)) as f64;
            let mut dst = out.row_mut(gy * g + gx);
            for y in y0..y1 {
                for x in x0..x1 {
                    dst += &input.row(y * w + x);
                }
            }
            dst /= n;
        }
    }
    out
}

fn pool_backward(dout: &Array2<f64>, (h, w): (usize, usize), g: usize) -> Array2<f64> {
    let mut dx = Array2::zeros((h * w, dout.ncols()));
    for gy in 0..g {
        let (y0, y1) = bin(gy, g, h);
        for gx in 0..g {
            let (x0, x1) = bin(gx, g, w);
            let n = ((y1 - y0) * (x1 - x0)) as f64;
            let src = dout.row(gy * g + gx).mapv(|v| v / n);
            for y in y0..y1 {
                for x in x0..x1 {
                    let mut d = dx.row_mut(y * w + x);
                    d += &src;
                }
            }
        }
    }
    dx
}

fn conv_layers(p: &Params) -> [(&Array2<f64>, &Array1<f64>); 4] {
    [
        (&p.conv0_w, &p.conv0_b),
        (&p.conv1_w, &p.conv1_b),
        (&p.conv2_w, &p.conv2_b),
        (&p.conv3_w, &p.conv3_b),
    ]
}

/// `input` is `(side*side, 3)` with values in [0, 1]; returns `(grid², D)` features.
pub(crate) fn forward(p: &Params, input: Array2<f64>, side: usize, grid: usize) -> (Array2<f64>, EncoderCache) {
    let mut act = input;
    let mut hw = (side, side);
    let mut convs = Vec::with_capacity(4);
    for (w, b) in conv_layers(p) {
        let in_ch = act.ncols();
        let (cols, out_hw) = im2col(&act, hw);
        let mut out = cols.dot(w);
        out += b;
        out.mapv_inplace(|v| v.max(0.0));
        convs.push(ConvCache {
            cols,
            out: out.clone(),
            in_hw: hw,
            in_ch,
        });
        act = out;
        hw = out_hw;
    }
    let feats = pool(&act, hw, grid);
    (
        feats,
        EncoderCache {
            convs,
            last_hw: hw,
            grid,
        },
    )
}

/// Accumulate encoder parameter gradients from `dfeats` (gradient w.r.t. the pooled grid).
pub(crate) fn backward(p: &Params, cache: &EncoderCache, dfeats: &Array2<f64>, grads: &mut Params) {
    let mut d = pool_backward(dfeats, cache.last_hw, cache.grid);
    let weights = conv_layers(p);
    for (layer, cc) in cache.convs.iter().enumerate().rev() {
        ndarray::Zip::from(&mut d).and(&cc.out).for_each(|g, &o| {
            if o <= 0.0 {
                *g = 0.0;
            }
        });
        let (gw, gb) = match layer {
            0 => (&mut grads.conv0_w, &mut grads.conv0_b),
            1 => (&mut grads.conv1_w, &mut grads.conv1_b),
            2 => (&mut grads.conv2_w, &mut grads.conv2_b),
            _ => (&mut grads.conv3_w, &mut grads.conv3_b),
        };
        ndarray::linalg::general_mat_mul(1.0, &cc.cols.t(), &d, 1.0, gw);
        *gb += &d.sum_axis(Axis(0));
        if layer > 0 {
            let dcols = d.dot(&weights[layer].0.t());
            d = col2im(&dcols, cc.in_hw, cc.in_ch);
        }
    }
}
