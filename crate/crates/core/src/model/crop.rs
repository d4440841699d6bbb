//! Mapping of normalized glimpse locations onto feature-map windows.
//!
//! A location `(l_x, l_y) ∈ [-1, 1]²` maps to the pixel centre
//! `(l + 1) / 2 · (side − 1)`. The window's first row/column is that centre
//! minus `(p − 1) / 2`, rounded half-up and clamped so the whole `p×p` window
//! stays inside the map. Locations outside `[-1, 1]` clamp the same way.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::Action;

/// A `size×size` window of the feature map, in feature-map pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub top: usize,
    pub left: usize,
    pub size: usize,
}

impl Window {
    pub fn rows(&self) -> std::ops::Range<usize> {
        self.top..self.top + self.size
    }

    pub fn cols(&self) -> std::ops::Range<usize> {
        self.left..self.left + self.size
    }
}

fn axis_start(l: f64, side: usize, p: usize) -> usize {
    let max_start = (side - p) as f64;
    let l = if l.is_nan() { 0.0 } else { l };
    let centre = (l + 1.0) / 2.0 * (side as f64 - 1.0);
    let start = (centre - (p as f64 - 1.0) / 2.0 + 0.5).floor();
    start.clamp(0.0, max_start) as usize
}

/// Window cropped for `loc` on a square map of `side` pixels.
pub fn crop_window(loc: Action, side: usize, p: usize) -> Result<Window> {
    if p == 0 || p > side {
        return Err(Error::Config(format!(
            "patch size {p} does not fit a feature map of side {side}"
        )));
    }
    Ok(Window {
        top: axis_start(loc.y, side, p),
        left: axis_start(loc.x, side, p),
        size: p,
    })
}

/// Normalized location whose window starts exactly at (`top`, `left`).
pub fn window_center(top: usize, left: usize, side: usize, p: usize) -> Action {
    let to_norm = |start: usize| {
        if side == 1 {
            return 0.0;
        }
        let centre = start as f64 + (p as f64 - 1.0) / 2.0;
        2.0 * centre / (side as f64 - 1.0) - 1.0
    };
    Action {
        x: to_norm(left),
        y: to_norm(top),
    }
}
