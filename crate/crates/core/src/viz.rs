//! PNG dumps: reconstruction panels and the discriminator time series.

use std::path::Path;

use candle_core::{DType, Tensor};

use crate::error::{Error, Result};
use crate::world_model::MaskedReconstruction;

/// Columns of a panel row: `o`, `o_hat`, `o_hat+`, `o_hat-`, `M`.
pub const PANEL_COLUMNS: usize = 5;
pub const AGENT_BORDER: [u8; 3] = [0, 190, 0];
pub const EXPERT_BORDER: [u8; 3] = [220, 0, 0];
const BORDER: usize = 2;
const GAP: usize = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn filled(width: usize, height: usize, color: [u8; 3]) -> Self {
        Self {
            width,
            height,
            data: color.iter().copied().cycle().take(width * height * 3).collect(),
        }
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn put(&mut self, x: usize, y: usize, color: [u8; 3]) {
        if x < self.width && y < self.height {
            let i = (y * self.width + x) * 3;
            self.data[i..i + 3].copy_from_slice(&color);
        }
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, self.width as u32, self.height as u32);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Eight);
            let mut writer = enc.write_header().map_err(|e| Error::format("png", e.to_string()))?;
            writer
                .write_image_data(&self.data)
                .map_err(|e| Error::format("png", e.to_string()))?;
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode_png()?).map_err(|e| Error::io(path, e))
    }
}

/// One panel row; every image is `size x size`, HWC, values in `[0, 1]`.
/// The mask is single-channel.
#[derive(Debug, Clone)]
pub struct PanelRow {
    pub size: usize,
    pub observation: Vec<f32>,
    pub o_hat: Vec<f32>,
    pub o_hat_plus: Vec<f32>,
    pub o_hat_minus: Vec<f32>,
    pub mask: Vec<f32>,
}

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// `[N, C, H, W]` to per-sample HWC vectors, shifted by `offset` first.
fn tensor_to_hwc(t: &Tensor, offset: f64) -> Result<Vec<Vec<f32>>> {
    let t = (t.to_dtype(DType::F32)? + offset)?
        .permute((0, 2, 3, 1))?
        .contiguous()?;
    let n = t.dim(0)?;
    let flat = t.flatten_all()?.to_vec1::<f32>()?;
    let per = flat.len() / n.max(1);
    Ok(flat.chunks(per).map(<[f32]>::to_vec).collect())
}

/// Builds rows for the listed frames. `observations` is `[N, 3, H, W]` in
/// `[0, 1]`; reconstructions are in the decoders' centered range.
pub fn panel_rows(observations: &Tensor, rec: &MaskedReconstruction, frames: &[usize]) -> Result<Vec<PanelRow>> {
    let size = observations.dim(3)?;
    let obs = tensor_to_hwc(observations, 0.0)?;
    let o_hat = tensor_to_hwc(&rec.o_hat, 0.5)?;
    let plus = tensor_to_hwc(&rec.o_hat_plus, 0.5)?;
    let minus = tensor_to_hwc(&rec.o_hat_minus, 0.5)?;
    let mask = tensor_to_hwc(&rec.mask_final, 0.0)?;
    frames
        .iter()
        .map(|&f| {
            if f >= obs.len() {
                return Err(Error::Shape(format!("frame {f} outside {} frames", obs.len())));
            }
            Ok(PanelRow {
                size,
                observation: obs[f].clone(),
                o_hat: o_hat[f].clone(),
                o_hat_plus: plus[f].clone(),
                o_hat_minus: minus[f].clone(),
                mask: mask[f].clone(),
            })
        })
        .collect()
}

/// Grid of rows by [`PANEL_COLUMNS`] tiles inside a colored border.
pub fn render_panel(rows: &[PanelRow], border: [u8; 3]) -> Result<RgbImage> {
    let size = rows
        .first()
        .map(|r| r.size)
        .ok_or_else(|| Error::Invalid("panel needs at least one row".into()))?;
    let tile = size + GAP;
    let width = 2 * BORDER + PANEL_COLUMNS * tile - GAP;
    let height = 2 * BORDER + rows.len() * tile - GAP;
    let mut img = RgbImage::filled(width, height, [255, 255, 255]);
    for x in 0..width {
        for y in 0..height {
            if x < BORDER || y < BORDER || x >= width - BORDER || y >= height - BORDER {
                img.put(x, y, border);
            }
        }
    }
    for (r, row) in rows.iter().enumerate() {
        if row.size != size {
            return Err(Error::Shape("panel rows disagree on image size".into()));
        }
        let color_tiles = [&row.observation, &row.o_hat, &row.o_hat_plus, &row.o_hat_minus];
        for y in 0..size {
            for x in 0..size {
                let py = BORDER + r * tile + y;
                for (c, tile_px) in color_tiles.iter().enumerate() {
                    let i = (y * size + x) * 3;
                    let px = [to_byte(tile_px[i]), to_byte(tile_px[i + 1]), to_byte(tile_px[i + 2])];
                    img.put(BORDER + c * tile + x, py, px);
                }
                let m = to_byte(row.mask[y * size + x]);
                img.put(BORDER + 4 * tile + x, py, [m, m, m]);
            }
        }
    }
    Ok(img)
}

/// Line plot of `values` in `[0, 1]` with a dashed reference at 0.5.
pub fn plot_series(values: &[f64], width: usize, height: usize) -> RgbImage {
    let mut img = RgbImage::filled(width, height, [255, 255, 255]);
    let margin = 4;
    let (w, h) = (width - 2 * margin, height - 2 * margin);
    let to_y = |v: f64| margin + ((1.0 - v.clamp(0.0, 1.0)) * (h - 1) as f64).round() as usize;
    for x in (margin..margin + w).step_by(4) {
        img.put(x, to_y(0.5), [160, 160, 160]);
        img.put(x + 1, to_y(0.5), [160, 160, 160]);
    }
    for y in margin..margin + h {
        img.put(margin, y, [0, 0, 0]);
    }
    for x in margin..margin + w {
        img.put(x, margin + h - 1, [0, 0, 0]);
    }
    if values.is_empty() {
        return img;
    }
    let to_x = |i: usize| {
        if values.len() == 1 {
            margin
        } else {
            margin + i * (w - 1) / (values.len() - 1)
        }
    };
    let mut prev = (to_x(0), to_y(values[0]));
    for (i, &v) in values.iter().enumerate() {
        let cur = (to_x(i), to_y(v));
        draw_line(&mut img, prev, cur, [30, 60, 200]);
        prev = cur;
    }
    img
}

fn draw_line(img: &mut RgbImage, from: (usize, usize), to: (usize, usize), color: [u8; 3]) {
    let (mut x0, mut y0) = (from.0 as i64, from.1 as i64);
    let (x1, y1) = (to.0 as i64, to.1 as i64);
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let mut err = dx + dy;
    loop {
        img.put(x0 as usize, y0 as usize, color);
        if x0 == x1 && y0 == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x0 += sx;
        }
        if e2 <= dx {
            err += dx;
            y0 += sy;
        }
    }
}

/// Intersection over union of two binary masks; 1 when both are empty.
pub fn mask_iou(predicted: &[bool], truth: &[bool]) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &t) in predicted.iter().zip(truth) {
        inter += (p && t) as usize;
        union += (p || t) as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(size: usize, v: f32) -> PanelRow {
        PanelRow {
            size,
            observation: vec![v; size * size * 3],
            o_hat: vec![v; size * size * 3],
            o_hat_plus: vec![v; size * size * 3],
            o_hat_minus: vec![v; size * size * 3],
            mask: vec![1.0; size * size],
        }
    }

    #[test]
    fn panel_has_five_tiles_per_row_and_colored_border() {
        let img = render_panel(&[row(4, 0.5), row(4, 0.2)], AGENT_BORDER).unwrap();
        assert_eq!(img.width, 2 * BORDER + PANEL_COLUMNS * (4 + GAP) - GAP);
        assert_eq!(img.height, 2 * BORDER + 2 * (4 + GAP) - GAP);
        assert_eq!(img.get(0, 0), AGENT_BORDER);
        assert_eq!(img.get(BORDER + 4 * 5, BORDER), [255, 255, 255]);
        let png = img.encode_png().unwrap();
        assert_eq!(&png[1..4], b"PNG");
    }

    #[test]
    fn iou_values() {
        assert_eq!(mask_iou(&[true, true, false], &[true, false, false]), 0.5);
        assert_eq!(mask_iou(&[false; 3], &[false; 3]), 1.0);
        assert_eq!(mask_iou(&[true, false], &[false, true]), 0.0);
    }

    #[test]
    fn series_plot_draws_within_bounds() {
        let img = plot_series(&[0.5, 0.9, 0.1, 0.5], 64, 32);
        assert_eq!(img.data.len(), 64 * 32 * 3);
        assert!(img.data.chunks(3).any(|p| p == [30, 60, 200]));
    }
}
