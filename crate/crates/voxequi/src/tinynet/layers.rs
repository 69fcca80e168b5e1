//! Layer primitives with explicit forward and backward passes.
//!
//! Everything operates on flat `f64` buffers in `[c][d][h][w]` order for
//! volumes and plain vectors for the head. Backward functions take the
//! cached forward inputs they need; there is no computation graph.

/// 3D convolution, kernel 3, zero padding 1.
/// `l_out = (l_in + 2 - 3)/stride + 1`.
pub fn conv_out_size(l_in: usize, stride: usize) -> usize {
    (l_in - 1) / stride + 1
}

#[allow(clippy::too_many_arguments)]
pub fn conv3d_forward(
    x: &[f64],
    cin: usize,
    l_in: usize,
    w: &[f64],
    b: &[f64],
    cout: usize,
    stride: usize,
    y: &mut Vec<f64>,
) -> usize {
    let l_out = conv_out_size(l_in, stride);
    let n_out = l_out * l_out * l_out;
    let n_in = l_in * l_in * l_in;
    y.clear();
    y.resize(cout * n_out, 0.0);
    let li = l_in as isize;

    for co in 0..cout {
        let ybase = co * n_out;
        for v in &mut y[ybase..ybase + n_out] {
            *v = b[co];
        }
        for ci in 0..cin {
            let xbase = ci * n_in;
            let wbase = (co * cin + ci) * 27;
            for od in 0..l_out {
                let id0 = (od * stride) as isize - 1;
                for oh in 0..l_out {
                    let ih0 = (oh * stride) as isize - 1;
                    let yrow = ybase + (od * l_out + oh) * l_out;
                    for (kd, kh) in KERNEL_2D {
                        let id = id0 + kd;
                        let ih = ih0 + kh;
                        if id < 0 || id >= li || ih < 0 || ih >= li {
                            continue;
                        }
                        let xrow = xbase + ((id as usize) * l_in + ih as usize) * l_in;
                        let wrow = wbase + ((kd as usize) * 3 + kh as usize) * 3;
                        for ow in 0..l_out {
                            let iw0 = (ow * stride) as isize - 1;
                            let mut acc = 0.0;
                            for kw in 0..3isize {
                                let iw = iw0 + kw;
                                if iw >= 0 && iw < li {
                                    acc += w[wrow + kw as usize] * x[xrow + iw as usize];
                                }
                            }
                            y[yrow + ow] += acc;
                        }
                    }
                }
            }
        }
    }
    l_out
}

const KERNEL_2D: [(isize, isize); 9] = [
    (0, 0),
    (0, 1),
    (0, 2),
    (1, 0),
    (1, 1),
    (1, 2),
    (2, 0),
    (2, 1),
    (2, 2),
];

/// Backward of `conv3d_forward`: accumulates into `gw`/`gb` (caller zeroes)
/// and writes `gx`.
#[allow(clippy::too_many_arguments)]
pub fn conv3d_backward(
    x: &[f64],
    cin: usize,
    l_in: usize,
    w: &[f64],
    cout: usize,
    stride: usize,
    gy: &[f64],
    gx: &mut Vec<f64>,
    gw: &mut [f64],
    gb: &mut [f64],
) {
    let l_out = conv_out_size(l_in, stride);
    let n_out = l_out * l_out * l_out;
    let n_in = l_in * l_in * l_in;
    gx.clear();
    gx.resize(cin * n_in, 0.0);
    let li = l_in as isize;

    for co in 0..cout {
        let ybase = co * n_out;
        for g in &gy[ybase..ybase + n_out] {
            gb[co] += g;
        }
        for ci in 0..cin {
            let xbase = ci * n_in;
            let wbase = (co * cin + ci) * 27;
            for od in 0..l_out {
                let id0 = (od * stride) as isize - 1;
                for oh in 0..l_out {
                    let ih0 = (oh * stride) as isize - 1;
                    let yrow = ybase + (od * l_out + oh) * l_out;
                    for (kd, kh) in KERNEL_2D {
                        let id = id0 + kd;
                        let ih = ih0 + kh;
                        if id < 0 || id >= li || ih < 0 || ih >= li {
                            continue;
                        }
                        let xrow = xbase + ((id as usize) * l_in + ih as usize) * l_in;
                        let wrow = wbase + ((kd as usize) * 3 + kh as usize) * 3;
                        for ow in 0..l_out {
                            let iw0 = (ow * stride) as isize - 1;
                            let g = gy[yrow + ow];
                            if g == 0.0 {
                                continue;
                            }
                            for kw in 0..3isize {
                                let iw = iw0 + kw;
                                if iw >= 0 && iw < li {
                                    gx[xrow + iw as usize] += w[wrow + kw as usize] * g;
                                    gw[wrow + kw as usize] += x[xrow + iw as usize] * g;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Shifted SoftPlus: `ln(1 + e^x) - ln 2`; smooth, zero at zero.
pub fn ssp_forward(x: &mut [f64]) {
    for v in x {
        let a = *v;
        *v = a.max(0.0) + (-a.abs()).exp().ln_1p() - std::f64::consts::LN_2;
    }
}

/// d/dx softplus = sigmoid(x); needs the pre-activation input.
pub fn ssp_backward(pre: &[f64], gy: &mut [f64]) {
    for (g, &x) in gy.iter_mut().zip(pre) {
        let s = if x >= 0.0 { 1.0 / (1.0 + (-x).exp()) } else { let e = x.exp(); e / (1.0 + e) };
        *g *= s;
    }
}

/// Nearest-neighbor upsampling by 2 in each spatial dimension.
pub fn upsample2_forward(x: &[f64], c: usize, l: usize, y: &mut Vec<f64>) -> usize {
    let l2 = l * 2;
    y.clear();
    y.resize(c * l2 * l2 * l2, 0.0);
    for ch in 0..c {
        for d in 0..l2 {
            for h in 0..l2 {
                let xrow = (ch * l + d / 2) * l * l + (h / 2) * l;
                let yrow = (ch * l2 + d) * l2 * l2 + h * l2;
                for w_ in 0..l2 {
                    y[yrow + w_] = x[xrow + w_ / 2];
                }
            }
        }
    }
    l2
}

/// Each input voxel collects the gradients of its 8 children.
pub fn upsample2_backward(gy: &[f64], c: usize, l: usize, gx: &mut Vec<f64>) {
    let l2 = l * 2;
    gx.clear();
    gx.resize(c * l * l * l, 0.0);
    for ch in 0..c {
        for d in 0..l2 {
            for h in 0..l2 {
                let xrow = (ch * l + d / 2) * l * l + (h / 2) * l;
                let yrow = (ch * l2 + d) * l2 * l2 + h * l2;
                for w_ in 0..l2 {
                    gx[xrow + w_ / 2] += gy[yrow + w_];
                }
            }
        }
    }
}

/// Global average pooling over the spatial dimensions.
pub fn gap_forward(x: &[f64], c: usize, l: usize) -> Vec<f64> {
    let n = l * l * l;
    (0..c).map(|ch| x[ch * n..(ch + 1) * n].iter().sum::<f64>() / n as f64).collect()
}

pub fn gap_backward(gy: &[f64], c: usize, l: usize, gx: &mut [f64]) {
    let n = l * l * l;
    for ch in 0..c {
        let g = gy[ch] / n as f64;
        for v in &mut gx[ch * n..(ch + 1) * n] {
            *v += g;
        }
    }
}

/// Dense layer: `y = W x + b`, `W` row-major `[out][in]`.
pub fn linear_forward(x: &[f64], w: &[f64], b: &[f64], n_out: usize) -> Vec<f64> {
    let n_in = x.len();
    (0..n_out)
        .map(|o| {
            let row = &w[o * n_in..(o + 1) * n_in];
            b[o] + row.iter().zip(x).map(|(wi, xi)| wi * xi).sum::<f64>()
        })
        .collect()
}

pub fn linear_backward(
    x: &[f64],
    w: &[f64],
    gy: &[f64],
    gx: &mut Vec<f64>,
    gw: &mut [f64],
    gb: &mut [f64],
) {
    let n_in = x.len();
    let n_out = gy.len();
    gx.clear();
    gx.resize(n_in, 0.0);
    for o in 0..n_out {
        let g = gy[o];
        gb[o] += g;
        let row = &w[o * n_in..(o + 1) * n_in];
        let grow = &mut gw[o * n_in..(o + 1) * n_in];
        for i in 0..n_in {
            gx[i] += row[i] * g;
            grow[i] += x[i] * g;
        }
    }
}

pub const LN_EPS: f64 = 1e-5;

/// Layer normalization over the feature vector of one sample.
/// Returns `(y, x_hat, inv_std)` for the backward pass.
pub fn layernorm_forward(x: &[f64], gain: &[f64], bias: &[f64]) -> (Vec<f64>, Vec<f64>, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv_std = 1.0 / (var + LN_EPS).sqrt();
    let x_hat: Vec<f64> = x.iter().map(|v| (v - mean) * inv_std).collect();
    let y: Vec<f64> = x_hat.iter().zip(gain).zip(bias).map(|((h, g), b)| h * g + b).collect();
    (y, x_hat, inv_std)
}

pub fn layernorm_backward(
    x_hat: &[f64],
    inv_std: f64,
    gain: &[f64],
    gy: &[f64],
    gx: &mut Vec<f64>,
    ggain: &mut [f64],
    gbias: &mut [f64],
) {
    let n = x_hat.len() as f64;
    let gxhat: Vec<f64> = gy.iter().zip(gain).map(|(g, w)| g * w).collect();
    let mean_gxhat = gxhat.iter().sum::<f64>() / n;
    let mean_gxhat_xhat = gxhat.iter().zip(x_hat).map(|(g, h)| g * h).sum::<f64>() / n;
    gx.clear();
    gx.extend(
        gxhat
            .iter()
            .zip(x_hat)
            .map(|(g, h)| inv_std * (g - mean_gxhat - h * mean_gxhat_xhat)),
    );
    for ((gg, gb), (g, h)) in ggain.iter_mut().zip(gbias.iter_mut()).zip(gy.iter().zip(x_hat)) {
        *gg += g * h;
        *gb += g;
    }
}

/// Inverted dropout: the mask holds `0` or `1/(1-p)` multipliers.
pub fn dropout_mask<R: rand::Rng>(n: usize, p: f64, rng: &mut R) -> Vec<f64> {
    let keep = 1.0 - p;
    (0..n).map(|_| if rng.gen_range(0.0..1.0) < keep { 1.0 / keep } else { 0.0 }).collect()
}

pub fn dropout_apply(x: &mut [f64], mask: &[f64]) {
    for (v, m) in x.iter_mut().zip(mask) {
        *v *= m;
    }
}

/// Tanhshrink: `y = x - tanh(x)`; `dy/dx = tanh(x)^2`.
pub fn tanhshrink_forward(x: f64) -> f64 {
    x - x.tanh()
}

pub fn tanhshrink_backward(x: f64, gy: f64) -> f64 {
    let t = x.tanh();
    gy * t * t
}
