use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, Shape};

/// Gaussian-window SSIM settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    /// Dynamic range L of the pixel values.
    pub dynamic_range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            dynamic_range: 255.0,
        }
    }
}

impl SsimParams {
    pub fn c1(&self) -> f64 {
        (self.k1 * self.dynamic_range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.dynamic_range).powi(2)
    }

    fn kernel(&self) -> Vec<f64> {
        let c = (self.window as f64 - 1.0) / 2.0;
        let raw: Vec<f64> = (0..self.window)
            .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * self.sigma * self.sigma)).exp())
            .collect();
        let sum: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / sum).collect()
    }
}

/// Separable "valid" Gaussian filtering of a single plane.
fn filter(plane: &[f64], h: usize, w: usize, kernel: &[f64]) -> Vec<f64> {
    let n = kernel.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        let src = &plane[y * w..(y + 1) * w];
        for x in 0..ow {
            rows[y * ow + x] = kernel.iter().zip(&src[x..x + n]).map(|(k, v)| k * v).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, g)| g * rows[(y + k) * ow + x])
                .sum();
        }
    }
    out
}

/// Local SSIM values over every full window position.
pub fn ssim_map(x: &Grid<f64>, y: &Grid<f64>, params: &SsimParams) -> Result<Grid<f64>> {
    y.ensure_shape(x.shape())?;
    let s = x.shape();
    if s.channels != 1 {
        return Err(Error::invalid(
            "SSIM expects a single-channel (grayscale) image",
        ));
    }
    if params.window == 0 || params.window > s.height || params.window > s.width {
        return Err(Error::invalid(format!(
            "SSIM window {} does not fit a {}x{} image",
            params.window, s.height, s.width
        )));
    }
    let kernel = params.kernel();
    let (h, w) = (s.height, s.width);
    let (xs, ys) = (x.as_slice(), y.as_slice());
    let xx: Vec<f64> = xs.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = ys.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = xs.iter().zip(ys).map(|(a, b)| a * b).collect();

    let mu_x = filter(xs, h, w, &kernel);
    let mu_y = filter(ys, h, w, &kernel);
    let e_xx = filter(&xx, h, w, &kernel);
    let e_yy = filter(&yy, h, w, &kernel);
    let e_xy = filter(&xy, h, w, &kernel);

    let (c1, c2) = (params.c1(), params.c2());
    let values = (0..mu_x.len())
        .map(|i| {
            let (mx, my) = (mu_x[i], mu_y[i]);
            let vx = e_xx[i] - mx * mx;
            let vy = e_yy[i] - my * my;
            let cov = e_xy[i] - mx * my;
            ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
        })
        .collect();
    let n = params.window;
    Grid::new(Shape::plane(h - n + 1, w - n + 1), values)
}

/// Mean of the local SSIM map.
pub fn ssim(x: &Grid<f64>, y: &Grid<f64>, params: &SsimParams) -> Result<f64> {
    Ok(ssim_map(x, y, params)?.mean())
}
