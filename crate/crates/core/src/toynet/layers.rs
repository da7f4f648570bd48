//! Dense kernels for the toy network: 3x3 same-padded convolution and
//! fully-connected layers, forward and backward. Layout is `[channel][row][col]`.

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }
}

#[inline]
fn valid_range(len: usize, d: isize) -> std::ops::Range<usize> {
    let lo = (-d).max(0) as usize;
    let hi = (len as isize - d).min(len as isize).max(0) as usize;
    lo..hi.max(lo)
}

/// `out[co] = bias[co] + sum_ci W[co, ci] * in[ci]` with zero padding 1.
pub fn conv3x3_forward(
    input: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    bias: &[f64],
    out: &mut [f64],
) {
    let cout = bias.len();
    let hw = h * w;
    debug_assert_eq!(weight.len(), cout * cin * 9);
    debug_assert_eq!(out.len(), cout * hw);
    for co in 0..cout {
        let plane = &mut out[co * hw..(co + 1) * hw];
        plane.fill(bias[co]);
        for ci in 0..cin {
            let src = &input[ci * hw..(ci + 1) * hw];
            for ky in 0..3 {
                let dy = ky as isize - 1;
                for kx in 0..3 {
                    let dx = kx as isize - 1;
                    let wv = weight[((co * cin + ci) * 3 + ky) * 3 + kx];
                    let cols = valid_range(w, dx);
                    for y in valid_range(h, dy) {
                        let sy = (y as isize + dy) as usize;
                        let o = &mut plane[y * w + cols.start..y * w + cols.end];
                        let sx0 = (cols.start as isize + dx) as usize;
                        let s = &src[sy * w + sx0..sy * w + sx0 + cols.len()];
                        for (ov, sv) in o.iter_mut().zip(s) {
                            *ov += wv * sv;
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates weight/bias gradients and, when requested, the input gradient.
#[allow(clippy::too_many_arguments)]
pub fn conv3x3_backward(
    input: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    d_out: &[f64],
    d_weight: &mut [f64],
    d_bias: &mut [f64],
    mut d_input: Option<&mut [f64]>,
) {
    let cout = d_bias.len();
    let hw = h * w;
    for co in 0..cout {
        let g = &d_out[co * hw..(co + 1) * hw];
        d_bias[co] += g.iter().sum::<f64>();
        for ci in 0..cin {
            let src = &input[ci * hw..(ci + 1) * hw];
            for ky in 0..3 {
                let dy = ky as isize - 1;
                for kx in 0..3 {
                    let dx = kx as isize - 1;
                    let widx = ((co * cin + ci) * 3 + ky) * 3 + kx;
                    let wv = weight[widx];
                    let cols = valid_range(w, dx);
                    let sx0 = (cols.start as isize + dx) as usize;
                    let mut acc = 0.0;
                    for y in valid_range(h, dy) {
                        let sy = (y as isize + dy) as usize;
                        let go = &g[y * w + cols.start..y * w + cols.end];
                        let s = &src[sy * w + sx0..sy * w + sx0 + cols.len()];
                        acc += go.iter().zip(s).map(|(a, b)| a * b).sum::<f64>();
                        if let Some(di) = d_input.as_deref_mut() {
                            let d = &mut di[ci * hw + sy * w + sx0..ci * hw + sy * w + sx0 + cols.len()];
                            for (dv, gv) in d.iter_mut().zip(go) {
                                *dv += wv * gv;
                            }
                        }
                    }
                    d_weight[widx] += acc;
                }
            }
        }
    }
}

/// `y = W x + b`, `W` stored `[out][in]`.
pub fn linear_forward(x: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let nin = x.len();
    bias.iter()
        .enumerate()
        .map(|(o, b)| b + weight[o * nin..(o + 1) * nin].iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
        .collect()
}

/// Returns `dL/dx`; accumulates into the weight and bias gradients.
pub fn linear_backward(x: &[f64], weight: &[f64], d_y: &[f64], d_weight: &mut [f64], d_bias: &mut [f64]) -> Vec<f64> {
    let nin = x.len();
    let mut d_x = vec![0.0; nin];
    for (o, &g) in d_y.iter().enumerate() {
        d_bias[o] += g;
        let row = &weight[o * nin..(o + 1) * nin];
        let d_row = &mut d_weight[o * nin..(o + 1) * nin];
        for i in 0..nin {
            d_row[i] += g * x[i];
            d_x[i] += g * row[i];
        }
    }
    d_x
}

#[inline]
pub fn relu(v: f64) -> f64 {
    v.max(0.0)
}

#[inline]
pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus(v: f64) -> f64 {
    v.max(0.0) + (-v.abs()).exp().ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn naive_conv(input: &[f64], cin: usize, h: usize, w: usize, weight: &[f64], bias: &[f64]) -> Vec<f64> {
        let cout = bias.len();
        let mut out = vec![0.0; cout * h * w];
        for co in 0..cout {
            for y in 0..h as isize {
                for x in 0..w as isize {
                    let mut acc = bias[co];
                    for ci in 0..cin {
                        for ky in 0..3isize {
                            for kx in 0..3isize {
                                let (sy, sx) = (y + ky - 1, x + kx - 1);
                                if sy >= 0 && sx >= 0 && sy < h as isize && sx < w as isize {
                                    acc += weight[((co * cin + ci) * 3 + ky as usize) * 3 + kx as usize]
                                        * input[ci * h * w + sy as usize * w + sx as usize];
                                }
                            }
                        }
                    }
                    out[co * h * w + y as usize * w + x as usize] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive() {
        let mut rng = SplitMix64::new(11);
        let (cin, cout, h, w) = (3, 4, 5, 7);
        let input: Vec<f64> = (0..cin * h * w).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
        let weight: Vec<f64> = (0..cout * cin * 9).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
        let bias: Vec<f64> = (0..cout).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
        let mut out = vec![0.0; cout * h * w];
        conv3x3_forward(&input, cin, h, w, &weight, &bias, &mut out);
        let expect = naive_conv(&input, cin, h, w, &weight, &bias);
        for (a, b) in out.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_backward_is_adjoint() {
        // <d_out, conv(x)> is linear in x and W: its gradients are the backward outputs.
        let mut rng = SplitMix64::new(5);
        let (cin, cout, h, w) = (2, 3, 4, 6);
        let input: Vec<f64> = (0..cin * h * w).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
        let weight: Vec<f64> = (0..cout * cin * 9).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
        let d_out: Vec<f64> = (0..cout * h * w).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
        let mut dw = vec![0.0; weight.len()];
        let mut db = vec![0.0; cout];
        let mut dx = vec![0.0; input.len()];
        conv3x3_backward(&input, cin, h, w, &weight, &d_out, &mut dw, &mut db, Some(&mut dx));
        let zero_bias = vec![0.0; cout];
        let pair = |x: &[f64], wt: &[f64]| -> f64 {
            let y = naive_conv(x, cin, h, w, wt, &zero_bias);
            y.iter().zip(&d_out).map(|(a, b)| a * b).sum()
        };
        for i in [0, 7, 20, input.len() - 1] {
            let mut e = vec![0.0; input.len()];
            e[i] = 1.0;
            assert!((pair(&e, &weight) - dx[i]).abs() < 1e-12);
        }
        for k in [0, 9, 30, weight.len() - 1] {
            let mut e = vec![0.0; weight.len()];
            e[k] = 1.0;
            assert!((pair(&input, &e) - dw[k]).abs() < 1e-12);
        }
        assert!((db[1] - d_out[h * w..2 * h * w].iter().sum::<f64>()).abs() < 1e-12);
    }

    #[test]
    fn activations() {
        assert_eq!(softplus(0.0), std::f64::consts::LN_2);
        assert!((softplus(50.0) - 50.0).abs() < 1e-12);
        assert!(softplus(-50.0) > 0.0);
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
        assert_eq!(relu(-1.0), 0.0);
    }
}
