//! Confidence maps over a 2-D input plane.

use std::fmt::Write as _;

use crate::error::{GimError, Result};
use crate::model::Model;
use crate::tensor::Tensor;

/// Scores and predicted classes on a `resolution × resolution` grid. Row 0
/// is the top of the image (largest `y`).
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub resolution: usize,
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    /// Row-major, `resolution²` entries.
    pub scores: Vec<f64>,
    pub classes: Vec<usize>,
}

fn linspace(range: [f64; 2], n: usize) -> Vec<f64> {
    let step = (range[1] - range[0]) / (n - 1) as f64;
    (0..n).map(|i| range[0] + step * i as f64).collect()
}

pub fn evaluate_grid(model: &Model, x_range: [f64; 2], y_range: [f64; 2], resolution: usize) -> Result<Grid> {
    if model.input_dim() != 2 {
        return Err(GimError::Contract(format!(
            "decision maps need a 2-D model, this one takes {} inputs",
            model.input_dim()
        )));
    }
    if resolution < 2 || !(x_range[0] < x_range[1]) || !(y_range[0] < y_range[1]) {
        return Err(GimError::Contract("grid needs resolution >= 2 and increasing ranges".into()));
    }
    let xs = linspace(x_range, resolution);
    let mut ys = linspace(y_range, resolution);
    ys.reverse();
    let mut points = Vec::with_capacity(2 * resolution * resolution);
    for &y in &ys {
        for &x in &xs {
            points.push(x);
            points.push(y);
        }
    }
    let out = model.classify(&Tensor::matrix(resolution * resolution, 2, points)?)?;
    Ok(Grid {
        resolution,
        xs,
        ys,
        scores: out.iter().map(|&(_, s)| s).collect(),
        classes: out.iter().map(|&(c, _)| c).collect(),
    })
}

impl Grid {
    /// 8-bit gray levels, min–max normalized over the finite scores.
    pub fn gray_levels(&self) -> Vec<u8> {
        let finite = self.scores.iter().copied().filter(|s| s.is_finite());
        let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), s| (a.min(s), b.max(s)));
        self.scores
            .iter()
            .map(|&s| {
                if !s.is_finite() || !(hi > lo) {
                    0
                } else {
                    (255.0 * (s - lo) / (hi - lo)).round() as u8
                }
            })
            .collect()
    }

    /// Binary (P5) portable graymap.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{r} {r}\n255\n", r = self.resolution).into_bytes();
        out.extend(self.gray_levels());
        out
    }

    /// `x,y,score,class` per grid point.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("x,y,score,class\n");
        let r = self.resolution;
        for (i, &y) in self.ys.iter().enumerate() {
            for (j, &x) in self.xs.iter().enumerate() {
                let _ = writeln!(s, "{x},{y},{},{}", self.scores[i * r + j], self.classes[i * r + j]);
            }
        }
        s
    }
}
