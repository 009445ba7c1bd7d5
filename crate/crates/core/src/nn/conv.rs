use super::{NnError, Scalar, Tensor};

/// 2-D convolution geometry. The kernel is applied as a cross-correlation
/// (no flip): `out[o,y,x] = Σ_{c,i,j} w[o,c,i,j] · in[c, y·s+i−p, x·s+j−p]`,
/// with zero padding outside the image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize) -> Self {
        Conv2dSpec { in_channels, out_channels, kernel, stride, padding: 1 }
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel, self.kernel]
    }

    pub fn output_size(&self, height: usize, width: usize) -> Option<(usize, usize)> {
        let span = |n: usize| (n + 2 * self.padding).checked_sub(self.kernel).map(|d| d / self.stride + 1);
        Some((span(height)?, span(width)?))
    }
}

#[derive(Clone, Debug)]
pub struct Conv2dGrads<T> {
    pub input: Tensor<T>,
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Output indices `o` for which `o·stride + offset − padding` lands inside `[0, len)`.
fn valid_range(offset: usize, padding: usize, stride: usize, len: usize, out_len: usize) -> (usize, usize) {
    let lo = if offset >= padding { 0 } else { (padding - offset).div_ceil(stride) };
    let hi = if len + padding > offset { (len + padding - offset - 1) / stride + 1 } else { 0 };
    (lo.min(out_len), hi.min(out_len))
}

fn geometry<T: Scalar>(
    op: &'static str,
    input: &Tensor<T>,
    weights: &Tensor<T>,
    spec: &Conv2dSpec,
) -> Result<(usize, usize, usize, usize), NnError> {
    let s = input.shape();
    if s.len() != 3 || s[0] != spec.in_channels {
        return Err(NnError::shape(op, format!("[{}, H, W]", spec.in_channels), format!("{s:?}")));
    }
    weights.expect_shape(op, &spec.weight_shape())?;
    let (h, w) = (s[1], s[2]);
    let (ho, wo) = spec
        .output_size(h, w)
        .ok_or_else(|| NnError::shape(op, format!("spatial size ≥ {}", spec.kernel), format!("{h}x{w}")))?;
    Ok((h, w, ho, wo))
}

pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: &Conv2dSpec,
) -> Result<Tensor<T>, NnError> {
    let (h, w, ho, wo) = geometry("conv2d", input, weights, spec)?;
    let k = spec.kernel;
    let mut out = Tensor::zeros(&[spec.out_channels, ho, wo]);
    if let Some(b) = bias {
        b.expect_shape("conv2d bias", &[spec.out_channels])?;
        for o in 0..spec.out_channels {
            out.data_mut()[o * ho * wo..(o + 1) * ho * wo].iter_mut().for_each(|x| *x = b.data()[o]);
        }
    }
    let (x, wt) = (input.data(), weights.data());
    let y = out.data_mut();
    for o in 0..spec.out_channels {
        for c in 0..spec.in_channels {
            for ky in 0..k {
                let (oy_lo, oy_hi) = valid_range(ky, spec.padding, spec.stride, h, ho);
                for kx in 0..k {
                    let wv = wt[((o * spec.in_channels + c) * k + ky) * k + kx];
                    if wv == T::zero() {
                        continue;
                    }
                    let (ox_lo, ox_hi) = valid_range(kx, spec.padding, spec.stride, w, wo);
                    for oy in oy_lo..oy_hi {
                        let iy = oy * spec.stride + ky - spec.padding;
                        let in_row = &x[(c * h + iy) * w..(c * h + iy + 1) * w];
                        let out_row = &mut y[(o * ho + oy) * wo..(o * ho + oy + 1) * wo];
                        for ox in ox_lo..ox_hi {
                            out_row[ox] += wv * in_row[ox * spec.stride + kx - spec.padding];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Exact gradients of [`conv2d`]. `input_grad = false` skips the (costly)
/// input gradient and returns an empty tensor in its place.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    grad_out: &Tensor<T>,
    spec: &Conv2dSpec,
    input_grad: bool,
) -> Result<Conv2dGrads<T>, NnError> {
    let (h, w, ho, wo) = geometry("conv2d_backward", input, weights, spec)?;
    grad_out.expect_shape("conv2d_backward grad", &[spec.out_channels, ho, wo])?;
    let k = spec.kernel;
    let mut g_in = if input_grad { Tensor::zeros(input.shape()) } else { Tensor::zeros(&[0]) };
    let mut g_w = Tensor::zeros(&spec.weight_shape());
    let mut g_b = Tensor::zeros(&[spec.out_channels]);
    let (x, wt, g) = (input.data(), weights.data(), grad_out.data());

    for o in 0..spec.out_channels {
        g_b.data_mut()[o] = g[o * ho * wo..(o + 1) * ho * wo].iter().copied().sum();
        for c in 0..spec.in_channels {
            for ky in 0..k {
                let (oy_lo, oy_hi) = valid_range(ky, spec.padding, spec.stride, h, ho);
                for kx in 0..k {
                    let widx = ((o * spec.in_channels + c) * k + ky) * k + kx;
                    let wv = wt[widx];
                    let (ox_lo, ox_hi) = valid_range(kx, spec.padding, spec.stride, w, wo);
                    let mut acc = T::zero();
                    for oy in oy_lo..oy_hi {
                        let iy = oy * spec.stride + ky - spec.padding;
                        let g_row = &g[(o * ho + oy) * wo..(o * ho + oy + 1) * wo];
                        let in_off = (c * h + iy) * w;
                        for ox in ox_lo..ox_hi {
                            let ix = ox * spec.stride + kx - spec.padding;
                            acc += g_row[ox] * x[in_off + ix];
                        }
                        if input_grad {
                            let gi = g_in.data_mut();
                            for ox in ox_lo..ox_hi {
                                let ix = ox * spec.stride + kx - spec.padding;
                                gi[in_off + ix] += wv * g_row[ox];
                            }
                        }
                    }
                    g_w.data_mut()[widx] = acc;
                }
            }
        }
    }
    Ok(Conv2dGrads { input: g_in, weights: g_w, bias: g_b })
}

/// Nearest-neighbour 2× upsampling of a `[C, H, W]` tensor.
pub fn upsample2x<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>, NnError> {
    let s = input.shape();
    if s.len() != 3 {
        return Err(NnError::shape("upsample2x", "[C, H, W]", format!("{s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let mut out = Tensor::zeros(&[c, 2 * h, 2 * w]);
    let (x, y) = (input.data(), out.data_mut());
    for ch in 0..c {
        for iy in 0..2 * h {
            for ix in 0..2 * w {
                y[(ch * 2 * h + iy) * 2 * w + ix] = x[(ch * h + iy / 2) * w + ix / 2];
            }
        }
    }
    Ok(out)
}

pub fn upsample2x_backward<T: Scalar>(grad_out: &Tensor<T>) -> Result<Tensor<T>, NnError> {
    let s = grad_out.shape();
    if s.len() != 3 || s[1] % 2 != 0 || s[2] % 2 != 0 {
        return Err(NnError::shape("upsample2x_backward", "[C, 2H, 2W]", format!("{s:?}")));
    }
    let (c, h, w) = (s[0], s[1] / 2, s[2] / 2);
    let mut out = Tensor::zeros(&[c, h, w]);
    let (g, y) = (grad_out.data(), out.data_mut());
    for ch in 0..c {
        for iy in 0..2 * h {
            for ix in 0..2 * w {
                y[(ch * h + iy / 2) * w + ix / 2] += g[(ch * 2 * h + iy) * 2 * w + ix];
            }
        }
    }
    Ok(out)
}
