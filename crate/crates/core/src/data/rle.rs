//! Uncompressed COCO-style run-length masks.
//!
//! Runs alternate zeros and ones starting with zeros, scanning in
//! column-major order. Decoded masks are row-major `u8` with values 0/1.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RleMask {
    /// `[height, width]`
    pub size: [u32; 2],
    pub counts: Vec<u32>,
}

impl RleMask {
    pub fn height(&self) -> usize {
        self.size[0] as usize
    }

    pub fn width(&self) -> usize {
        self.size[1] as usize
    }

    /// Encodes a row-major mask; any non-zero byte counts as foreground.
    pub fn encode(mask: &[u8], height: usize, width: usize) -> Result<Self> {
        if mask.len() != height * width {
            return Err(Error::dim(
                "rle_encode",
                format!("mask has {} pixels, expected {height}x{width}", mask.len()),
            ));
        }
        let mut counts = Vec::new();
        let mut current = 0u8;
        let mut run = 0u32;
        for x in 0..width {
            for y in 0..height {
                let v = u8::from(mask[y * width + x] != 0);
                if v != current {
                    counts.push(run);
                    run = 0;
                    current = v;
                }
                run += 1;
            }
        }
        counts.push(run);
        Ok(RleMask {
            size: [height as u32, width as u32],
            counts,
        })
    }

    /// Row-major 0/1 mask.
    pub fn decode(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let (h, w) = (self.height(), self.width());
        let mut mask = vec![0u8; h * w];
        let mut pos = 0usize;
        for (i, &c) in self.counts.iter().enumerate() {
            let v = (i % 2) as u8;
            for p in pos..pos + c as usize {
                if v == 1 {
                    mask[(p % h) * w + p / h] = 1;
                }
            }
            pos += c as usize;
        }
        Ok(mask)
    }

    pub fn validate(&self) -> Result<()> {
        let total: u64 = self.counts.iter().map(|&c| c as u64).sum();
        let want = self.size[0] as u64 * self.size[1] as u64;
        if total != want {
            return Err(Error::Format(format!(
                "RLE counts sum to {total}, mask is {}x{} = {want}",
                self.size[0], self.size[1]
            )));
        }
        Ok(())
    }

    /// Foreground pixel count, read straight from the runs.
    pub fn area(&self) -> u64 {
        self.counts.iter().skip(1).step_by(2).map(|&c| c as u64).sum()
    }

    /// Tight `[x, y, w, h]` box around the foreground, all zeros when empty.
    pub fn bbox(&self) -> Result<[u32; 4]> {
        bbox(&self.decode()?, self.height(), self.width())
    }
}

/// Tight `[x, y, w, h]` box of a row-major mask.
pub fn bbox(mask: &[u8], height: usize, width: usize) -> Result<[u32; 4]> {
    if mask.len() != height * width {
        return Err(Error::dim(
            "bbox",
            format!("mask has {} pixels, expected {height}x{width}", mask.len()),
        ));
    }
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for y in 0..height {
        for x in 0..width {
            if mask[y * width + x] != 0 {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x + 1);
                y1 = y1.max(y + 1);
            }
        }
    }
    if x0 == usize::MAX {
        return Ok([0; 4]);
    }
    Ok([x0 as u32, y0 as u32, (x1 - x0) as u32, (y1 - y0) as u32])
}
