//! Trajectory overlays, per-step confidence series and class activation maps.

use std::io::Write;

use crate::data::{Label, RgbImage};
use crate::error::{Error, Result};
use crate::metrics::format_sig9;
use crate::model::{EpisodeOutput, Fusion, Network, Window};

/// 3×5 bitmaps for the digits 0–9, one row per entry, MSB on the left.
const DIGITS: [[u8; 5]; 10] = [
    [0b111, 0b101, 0b101, 0b101, 0b111],
    [0b010, 0b110, 0b010, 0b010, 0b111],
    [0b111, 0b001, 0b111, 0b100, 0b111],
    [0b111, 0b001, 0b111, 0b001, 0b111],
    [0b101, 0b101, 0b111, 0b001, 0b001],
    [0b111, 0b100, 0b111, 0b001, 0b111],
    [0b111, 0b100, 0b111, 0b101, 0b111],
    [0b111, 0b001, 0b010, 0b010, 0b010],
    [0b111, 0b101, 0b111, 0b101, 0b111],
    [0b111, 0b101, 0b111, 0b001, 0b111],
];

const PALETTE: [[u8; 3]; 6] = [
    [255, 40, 40],
    [40, 220, 40],
    [60, 120, 255],
    [255, 200, 0],
    [255, 0, 255],
    [0, 230, 230],
];

/// Image-pixel rectangle `(top, left, height, width)` of a feature-map window.
pub fn window_in_image(w: &Window, feature_side: usize, image_side: usize) -> (usize, usize, usize, usize) {
    let stride = image_side / feature_side;
    (w.top * stride, w.left * stride, w.size * stride, w.size * stride)
}

fn put(img: &mut image::RgbImage, x: usize, y: usize, c: [u8; 3]) {
    if (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, image::Rgb(c));
    }
}

fn draw_number(img: &mut image::RgbImage, x0: usize, y0: usize, n: usize, c: [u8; 3]) {
    for (k, ch) in n.to_string().bytes().enumerate() {
        let glyph = DIGITS[(ch - b'0') as usize];
        for (row, bits) in glyph.iter().enumerate() {
            for col in 0..3 {
                if bits >> (2 - col) & 1 == 1 {
                    put(img, x0 + k * 4 + col, y0 + row, c);
                }
            }
        }
    }
}

/// The image upscaled by `scale` with every window outlined and labeled with
/// its 1-based step index.
pub fn trajectory_overlay(image: &RgbImage, windows: &[Window], feature_side: usize, scale: usize) -> image::RgbImage {
    let scale = scale.max(1);
    let base = image.to_rgb8();
    let mut out = image::imageops::resize(
        &base,
        base.width() * scale as u32,
        base.height() * scale as u32,
        image::imageops::FilterType::Nearest,
    );
    for (t, w) in windows.iter().enumerate() {
        let c = PALETTE[t % PALETTE.len()];
        let (top, left, h, wd) = window_in_image(w, feature_side, image.height);
        let (top, left, h, wd) = (top * scale, left * scale, h * scale, wd * scale);
        for x in left..left + wd {
            put(&mut out, x, top, c);
            put(&mut out, x, top + h - 1, c);
        }
        for y in top..top + h {
            put(&mut out, left, y, c);
            put(&mut out, left + wd - 1, y, c);
        }
        draw_number(&mut out, left + 2, top + 2, t + 1, c);
    }
    out
}

/// CSV `t,l_x,l_y,c_t` for one episode.
pub fn write_confidence_series(out: impl Write, episode: &EpisodeOutput) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["t", "l_x", "l_y", "c_t"])?;
    for (t, (step, c)) in episode.trajectory.iter().zip(&episode.step_confidences).enumerate() {
        w.write_record([
            (t + 1).to_string(),
            format_sig9(step.action.x),
            format_sig9(step.action.y),
            format_sig9(*c),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<confidence series>", e))?;
    Ok(())
}

/// Min-max normalization; a constant map becomes all zeros.
pub fn normalize(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi - lo > 0.0) {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

/// Bilinear resize of a row-major `h×w` map to `out_h×out_w` (pixel-centre aligned).
pub fn upsample(values: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let sample = |src: usize, dst: usize, i: usize| -> (usize, usize, f64) {
        let pos = ((i as f64 + 0.5) * src as f64 / dst as f64 - 0.5).clamp(0.0, (src - 1) as f64);
        let a = pos.floor() as usize;
        let b = (a + 1).min(src - 1);
        (a, b, pos - a as f64)
    };
    let mut out = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let (y0, y1, fy) = sample(h, out_h, y);
        for x in 0..out_w {
            let (x0, x1, fx) = sample(w, out_w, x);
            let top = values[y0 * w + x0] * (1.0 - fx) + values[y0 * w + x1] * fx;
            let bottom = values[y1 * w + x0] * (1.0 - fx) + values[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

/// Attack-class activation map over the global branch, in `[0, 1]`, at input
/// resolution (row-major `input×input`).
pub fn cam_heatmap(net: &Network, image: &RgbImage) -> Result<Vec<f64>> {
    if !net.ablation.uses_global() {
        return Err(Error::Config("class activation maps need the global branch".into()));
    }
    let fmap = net.backbone_embed(image)?;
    let act = net.global_activation(&fmap)?;
    let (d, h, w) = act.chw()?;
    let weights = net.store.get(net.classifier.weight);
    let row = &weights.data()[Label::Attack.index() * weights.shape()[1]..][..d];
    let slot_scale = match net.config.fusion {
        Fusion::Concat => 1.0,
        Fusion::Average => 0.5,
        Fusion::WeightedAverage => net.fusion_weights()[0],
    };
    let a = act.data();
    let small: Vec<f64> = (0..h * w)
        .map(|px| (0..d).map(|c| slot_scale * row[c] * a[c * h * w + px]).sum())
        .collect();
    let s = net.config.input_size;
    Ok(normalize(&upsample(&normalize(&small), h, w, s, s)))
}

/// Blue-to-red rendering of a `[0, 1]` map.
pub fn heatmap_image(values: &[f64], side: usize) -> image::RgbImage {
    let mut img = image::RgbImage::new(side as u32, side as u32);
    for (i, &v) in values.iter().enumerate() {
        let v = v.clamp(0.0, 1.0);
        let r = (255.0 * (1.5 * v - 0.25).clamp(0.0, 1.0)).round() as u8;
        let g = (255.0 * (1.0 - (2.0 * v - 1.0).abs())).round() as u8;
        let b = (255.0 * (1.25 - 1.5 * v).clamp(0.0, 1.0)).round() as u8;
        img.put_pixel((i % side) as u32, (i / side) as u32, image::Rgb([r, g, b]));
    }
    img
}
