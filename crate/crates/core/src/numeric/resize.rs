//! Bilinear interpolation weights, half-pixel (align-corners = false) convention.
//!
//! Output pixel `o` samples the input at `(o + 0.5) * in / out - 0.5`, clamped
//! below at zero; the upper neighbour is clamped to the last input index.

/// Two-tap interpolation along one axis for every output index.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct AxisTaps {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub w_lo: Vec<f64>,
    pub w_hi: Vec<f64>,
}

/// Source coordinate sampled by output index `o`.
pub fn source_coord(o: usize, in_len: usize, out_len: usize) -> f64 {
    let scale = in_len as f64 / out_len as f64;
    ((o as f64 + 0.5) * scale - 0.5).max(0.0)
}

impl AxisTaps {
    pub fn new(in_len: usize, out_len: usize) -> Self {
        let mut taps = AxisTaps {
            lo: Vec::with_capacity(out_len),
            hi: Vec::with_capacity(out_len),
            w_lo: Vec::with_capacity(out_len),
            w_hi: Vec::with_capacity(out_len),
        };
        for o in 0..out_len {
            let src = source_coord(o, in_len, out_len);
            let lo = (src.floor() as usize).min(in_len - 1);
            let hi = (lo + 1).min(in_len - 1);
            let frac = if hi == lo { 0.0 } else { src - lo as f64 };
            taps.lo.push(lo);
            taps.hi.push(hi);
            taps.w_lo.push(1.0 - frac);
            taps.w_hi.push(frac);
        }
        taps
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct ResizePlan {
    pub channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub rows: AxisTaps,
    pub cols: AxisTaps,
}

impl ResizePlan {
    pub fn new(channels: usize, in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Self {
        ResizePlan {
            channels,
            in_h,
            in_w,
            out_h,
            out_w,
            rows: AxisTaps::new(in_h, out_h),
            cols: AxisTaps::new(in_w, out_w),
        }
    }

    /// Four taps per output element.
    pub fn muladds(&self) -> u64 {
        4 * (self.channels * self.out_h * self.out_w) as u64
    }
}
