//! Fixed per-pixel feature map: raw intensity, box means at several radii,
//! a local standard deviation, and optional whole-image context statistics.

use serde::{Deserialize, Serialize};

use crate::datasets::Image;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureSpec {
    /// Box-mean radii, in pixels.
    pub radii: Vec<usize>,
    /// Radius of the local standard deviation window; `None` disables it.
    pub std_radius: Option<usize>,
    /// Append per-image channel mean and standard deviation to every pixel.
    pub context: bool,
}

impl Default for FeatureSpec {
    fn default() -> Self {
        Self { radii: vec![1, 2, 4], std_radius: Some(2), context: true }
    }
}

impl FeatureSpec {
    pub fn dim(&self, channels: usize) -> usize {
        let per_channel = 1 + self.radii.len() + usize::from(self.std_radius.is_some()) + 2 * usize::from(self.context);
        channels * per_channel
    }

    /// Row-major `pixels x dim` feature matrix.
    pub fn extract(&self, image: &Image) -> Vec<f64> {
        let (h, w, ch) = (image.height(), image.width(), image.channels());
        let dim = self.dim(ch);
        let mut out = vec![0.0; h * w * dim];
        let mut col = 0;
        for c in 0..ch {
            let plane: Vec<f64> = (0..h * w).map(|p| image.data()[p * ch + c]).collect();
            let integral = Integral::new(&plane, h, w);
            for p in 0..h * w {
                out[p * dim + col] = plane[p];
            }
            col += 1;
            for &r in &self.radii {
                for y in 0..h {
                    for x in 0..w {
                        out[(y * w + x) * dim + col] = integral.mean(y, x, r);
                    }
                }
                col += 1;
            }
            if let Some(r) = self.std_radius {
                for y in 0..h {
                    for x in 0..w {
                        out[(y * w + x) * dim + col] = integral.std(y, x, r);
                    }
                }
                col += 1;
            }
            if self.context {
                let n = (h * w) as f64;
                let mean = plane.iter().sum::<f64>() / n;
                let sd = (plane.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
                for p in 0..h * w {
                    out[p * dim + col] = mean;
                    out[p * dim + col + 1] = sd;
                }
                col += 2;
            }
        }
        debug_assert_eq!(col, dim);
        out
    }
}

/// Summed-area tables of values and squares.
struct Integral {
    h: usize,
    w: usize,
    sum: Vec<f64>,
    sq: Vec<f64>,
}

impl Integral {
    fn new(plane: &[f64], h: usize, w: usize) -> Self {
        let stride = w + 1;
        let mut sum = vec![0.0; (h + 1) * stride];
        let mut sq = vec![0.0; (h + 1) * stride];
        for y in 0..h {
            let (mut row, mut row_sq) = (0.0, 0.0);
            for x in 0..w {
                let v = plane[y * w + x];
                row += v;
                row_sq += v * v;
                sum[(y + 1) * stride + x + 1] = sum[y * stride + x + 1] + row;
                sq[(y + 1) * stride + x + 1] = sq[y * stride + x + 1] + row_sq;
            }
        }
        Self { h, w, sum, sq }
    }

    fn window(&self, y: usize, x: usize, r: usize) -> (usize, usize, usize, usize) {
        (y.saturating_sub(r), x.saturating_sub(r), (y + r + 1).min(self.h), (x + r + 1).min(self.w))
    }

    fn rect(table: &[f64], stride: usize, (y0, x0, y1, x1): (usize, usize, usize, usize)) -> f64 {
        table[y1 * stride + x1] - table[y0 * stride + x1] - table[y1 * stride + x0] + table[y0 * stride + x0]
    }

    fn mean(&self, y: usize, x: usize, r: usize) -> f64 {
        let win = self.window(y, x, r);
        let n = ((win.2 - win.0) * (win.3 - win.1)) as f64;
        Self::rect(&self.sum, self.w + 1, win) / n
    }

    fn std(&self, y: usize, x: usize, r: usize) -> f64 {
        let win = self.window(y, x, r);
        let n = ((win.2 - win.0) * (win.3 - win.1)) as f64;
        let m = Self::rect(&self.sum, self.w + 1, win) / n;
        let m2 = Self::rect(&self.sq, self.w + 1, win) / n;
        (m2 - m * m).max(0.0).sqrt()
    }
}
