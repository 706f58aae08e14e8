use serde::{Deserialize, Serialize};

/// Spatial padding policy for [`Graph::conv2d`](super::Graph::conv2d).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// Output size `ceil(input / stride)`, extra padding at the bottom/right.
    Same,
    Valid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn new(c_in: usize, h: usize, w: usize, kh: usize, kw: usize, stride: usize, padding: Padding) -> Option<Self> {
        let (h_out, w_out, pad_top, pad_left) = match padding {
            Padding::Same => {
                let ho = h.div_ceil(stride);
                let wo = w.div_ceil(stride);
                let ph = ((ho - 1) * stride + kh).saturating_sub(h);
                let pw = ((wo - 1) * stride + kw).saturating_sub(w);
                (ho, wo, ph / 2, pw / 2)
            }
            Padding::Valid => {
                if h < kh || w < kw {
                    return None;
                }
                ((h - kh) / stride + 1, (w - kw) / stride + 1, 0, 0)
            }
        };
        if h_out == 0 || w_out == 0 {
            return None;
        }
        Some(Self {
            c_in,
            h,
            w,
            kh,
            kw,
            stride,
            pad_top,
            pad_left,
            h_out,
            w_out,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    pub fn positions(&self) -> usize {
        self.h_out * self.w_out
    }

    /// Input index feeding output position `o` (along one axis) through tap `k`.
    #[inline]
    fn src(o: usize, k: usize, stride: usize, pad: usize, len: usize) -> Option<usize> {
        let i = (o * stride + k).checked_sub(pad)?;
        (i < len).then_some(i)
    }

    /// `[patch_len x positions]` column matrix of one `[c_in, h, w]` image.
    pub fn im2col(&self, img: &[f64], cols: &mut [f64]) {
        let p = self.positions();
        for c in 0..self.c_in {
            let plane = &img[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let out = &mut cols[row * p..(row + 1) * p];
                    for oh in 0..self.h_out {
                        let dst = &mut out[oh * self.w_out..(oh + 1) * self.w_out];
                        match Self::src(oh, ki, self.stride, self.pad_top, self.h) {
                            None => dst.iter_mut().for_each(|v| *v = 0.0),
                            Some(ih) => {
                                let line = &plane[ih * self.w..(ih + 1) * self.w];
                                for (ow, d) in dst.iter_mut().enumerate() {
                                    *d = match Self::src(ow, kj, self.stride, self.pad_left, self.w) {
                                        Some(iw) => line[iw],
                                        None => 0.0,
                                    };
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Scatter-add a column matrix back into an image gradient.
    pub fn col2im(&self, cols: &[f64], img: &mut [f64]) {
        let p = self.positions();
        for c in 0..self.c_in {
            let plane = &mut img[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * p..(row + 1) * p];
                    for oh in 0..self.h_out {
                        let Some(ih) = Self::src(oh, ki, self.stride, self.pad_top, self.h) else {
                            continue;
                        };
                        let line = &mut plane[ih * self.w..(ih + 1) * self.w];
                        for ow in 0..self.w_out {
                            if let Some(iw) = Self::src(ow, kj, self.stride, self.pad_left, self.w) {
                                line[iw] += src[oh * self.w_out + ow];
                            }
                        }
                    }
                }
            }
        }
    }
}
