//! Label overlays, probability heatmaps and the 2x3 qualitative panel.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use ndarray::{ArrayView2, ArrayView3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Plane;
use crate::font::{draw_text, GLYPH_HEIGHT};
use crate::{GRAY_MATTER, NUM_CLASSES, WHITE_MATTER};

#[derive(Debug, Error)]
pub enum VizError {
    #[error("shape mismatch: {what} is {got:?}, expected {expected:?}")]
    ShapeMismatch {
        what: &'static str,
        got: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("{what} value {value} at {index:?} is outside [0, 1]")]
    OutOfRange {
        what: &'static str,
        value: f32,
        index: (usize, usize),
    },
    #[error("failed to write {path}: {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("failed to create {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = VizError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PanelStyle {
    pub overlay_alpha: f32,
    pub gm_color: [u8; 3],
    pub wm_color: [u8; 3],
    pub heat_color: [u8; 3],
    pub margin: u32,
    pub text_scale: u32,
    pub background: [u8; 3],
    pub text_color: [u8; 3],
}

impl Default for PanelStyle {
    fn default() -> Self {
        Self {
            overlay_alpha: 0.5,
            gm_color: [255, 0, 0],
            wm_color: [0, 255, 0],
            heat_color: [255, 255, 0],
            margin: 8,
            text_scale: 2,
            background: [24, 24, 24],
            text_color: [255, 255, 255],
        }
    }
}

pub const PANEL_TITLES: [&str; 6] = [
    "INPUT",
    "GROUND TRUTH",
    "PREDICTION",
    "BG PROB",
    "GM PROB",
    "WM PROB",
];

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn check_unit(what: &'static str, a: ArrayView2<f32>) -> Result<()> {
    for ((r, c), &v) in a.indexed_iter() {
        if !(0.0..=1.0).contains(&v) {
            return Err(VizError::OutOfRange {
                what,
                value: v,
                index: (r, c),
            });
        }
    }
    Ok(())
}

/// Grayscale rendering of a slice already in `[0, 1]`.
pub fn render_gray(image: ArrayView2<f32>) -> Result<RgbImage> {
    check_unit("image", image)?;
    let (rows, cols) = image.dim();
    Ok(RgbImage::from_fn(cols as u32, rows as u32, |x, y| {
        let g = to_u8(image[[y as usize, x as usize]]);
        Rgb([g, g, g])
    }))
}

/// Blend GM and WM colors over the grayscale image; background pixels keep
/// the plain grayscale value.
pub fn render_overlay(
    image: ArrayView2<f32>,
    label: ArrayView2<u8>,
    style: &PanelStyle,
) -> Result<RgbImage> {
    if image.dim() != label.dim() {
        return Err(VizError::ShapeMismatch {
            what: "label",
            got: label.shape().to_vec(),
            expected: image.shape().to_vec(),
        });
    }
    let mut out = render_gray(image)?;
    let a = style.overlay_alpha.clamp(0.0, 1.0);
    for (x, y, px) in out.enumerate_pixels_mut() {
        let color = match label[[y as usize, x as usize]] {
            GRAY_MATTER => style.gm_color,
            WHITE_MATTER => style.wm_color,
            _ => continue,
        };
        for ch in 0..3 {
            let g = px.0[ch] as f32;
            px.0[ch] = ((1.0 - a) * g + a * color[ch] as f32).round() as u8;
        }
    }
    Ok(out)
}

/// Single-hue ramp: 0 maps to black, 1 to `color`.
pub fn render_heatmap(prob: ArrayView2<f32>, color: [u8; 3]) -> Result<RgbImage> {
    check_unit("probability", prob)?;
    let (rows, cols) = prob.dim();
    Ok(RgbImage::from_fn(cols as u32, rows as u32, |x, y| {
        let p = prob[[y as usize, x as usize]];
        Rgb(color.map(|c| (c as f32 * p).round() as u8))
    }))
}

/// Assemble the 2x3 panel: input, ground truth and prediction overlays on
/// top, per-class probability maps below.
pub fn render_panel(
    image: ArrayView2<f32>,
    gt: ArrayView2<u8>,
    pred: ArrayView2<u8>,
    probs: ArrayView3<f32>,
    style: &PanelStyle,
) -> Result<RgbImage> {
    let (rows, cols) = image.dim();
    if pred.dim() != image.dim() {
        return Err(VizError::ShapeMismatch {
            what: "prediction",
            got: pred.shape().to_vec(),
            expected: image.shape().to_vec(),
        });
    }
    if probs.dim() != (NUM_CLASSES, rows, cols) {
        return Err(VizError::ShapeMismatch {
            what: "probabilities",
            got: probs.shape().to_vec(),
            expected: vec![NUM_CLASSES, rows, cols],
        });
    }
    let mut cells = vec![
        render_gray(image)?,
        render_overlay(image, gt, style)?,
        render_overlay(image, pred, style)?,
    ];
    for k in 0..NUM_CLASSES {
        cells.push(render_heatmap(probs.index_axis(ndarray::Axis(0), k), style.heat_color)?);
    }

    let (cw, ch) = (cols as u32, rows as u32);
    let m = style.margin;
    let title_h = GLYPH_HEIGHT * style.text_scale + m / 2;
    let width = 3 * cw + 4 * m;
    let height = 2 * (title_h + ch) + 3 * m;
    let mut panel = RgbImage::from_pixel(width, height, Rgb(style.background));
    for (i, cell) in cells.iter().enumerate() {
        let (gx, gy) = (i as u32 % 3, i as u32 / 3);
        let x = m + gx * (cw + m);
        let y = m + gy * (title_h + ch + m);
        draw_text(&mut panel, x, y, PANEL_TITLES[i], style.text_scale, style.text_color);
        image::imageops::replace(&mut panel, cell, x as i64, (y + title_h) as i64);
    }
    Ok(panel)
}

/// `<model>_<plane>_<subject>_<index>_panel.png`
pub fn panel_file_name(model_id: &str, plane: Plane, subject_id: &str, index: usize) -> String {
    format!("{model_id}_{plane}_{subject_id}_{index}_panel.png")
}

/// Render a panel and write it as PNG, creating parent directories.
pub fn save_panel(
    path: &Path,
    image: ArrayView2<f32>,
    gt: ArrayView2<u8>,
    pred: ArrayView2<u8>,
    probs: ArrayView3<f32>,
    style: &PanelStyle,
) -> Result<()> {
    let panel = render_panel(image, gt, pred, probs, style)?;
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|source| VizError::Io {
            path: parent.to_path_buf(),
            source,
        })?;
    }
    panel.save(path).map_err(|source| VizError::Write {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array2, Array3};

    #[test]
    fn overlay_blends_only_tissue() {
        let img = Array2::from_elem((2, 2), 0.2f32);
        let label = ndarray::array![[0u8, 1], [2, 0]];
        let out = render_overlay(img.view(), label.view(), &PanelStyle::default()).unwrap();
        let g = to_u8(0.2) as f32;
        assert_eq!(out.get_pixel(0, 0).0, [51, 51, 51]);
        let r = (0.5 * g + 127.5).round() as u8;
        let o = (0.5 * g).round() as u8;
        assert_eq!(out.get_pixel(1, 0).0, [r, o, o]);
        assert_eq!(out.get_pixel(0, 1).0, [o, r, o]);
    }

    #[test]
    fn heatmap_range_and_errors() {
        let p = ndarray::array![[0.0f32, 1.0]];
        let h = render_heatmap(p.view(), [255, 255, 0]).unwrap();
        assert_eq!(h.get_pixel(0, 0).0, [0, 0, 0]);
        assert_eq!(h.get_pixel(1, 0).0, [255, 255, 0]);
        let bad = ndarray::array![[0.5f32, 1.5]];
        assert!(matches!(
            render_heatmap(bad.view(), [255, 0, 0]),
            Err(VizError::OutOfRange { index: (0, 1), .. })
        ));
        let nan = ndarray::array![[f32::NAN]];
        assert!(render_heatmap(nan.view(), [255, 0, 0]).is_err());
    }

    #[test]
    fn panel_dimensions() {
        let s = PanelStyle::default();
        let img = Array2::<f32>::zeros((16, 20));
        let lab = Array2::<u8>::zeros((16, 20));
        let probs = Array3::<f32>::zeros((3, 16, 20));
        let p = render_panel(img.view(), lab.view(), lab.view(), probs.view(), &s).unwrap();
        assert_eq!(p.width(), 3 * 20 + 4 * s.margin);
        let bad = Array3::<f32>::zeros((2, 16, 20));
        assert!(render_panel(img.view(), lab.view(), lab.view(), bad.view(), &s).is_err());
    }

    #[test]
    fn file_name_pattern() {
        assert_eq!(
            panel_file_name("unified", Plane::Coronal, "sub-01", 42),
            "unified_coronal_sub-01_42_panel.png"
        );
    }
}
