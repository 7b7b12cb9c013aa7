//! PNG rendering of speed maps, backprojections and UQ maps, with a JSON
//! sidecar recording the value range of every panel.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};
use uflow_core::Tensor;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Palette {
    /// Black to white over `[min, max]`.
    Gray,
    /// Blue-white-red, symmetric around zero.
    Diverging,
    /// White to red: high relative uncertainty stands out in red.
    Uncertainty,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelInfo {
    pub label: String,
    pub palette: Palette,
    pub min: f64,
    pub max: f64,
    /// Horizontal pixel offset of the panel in the image.
    pub x_offset: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub width: u32,
    pub height: u32,
    pub panels: Vec<PanelInfo>,
}

pub struct Panel<'a> {
    pub label: String,
    pub image: &'a Tensor,
    pub palette: Palette,
}

/// Pixels between panels.
const GAP: u32 = 2;

fn square(t: &Tensor) -> Result<(u32, u32)> {
    match t.shape() {
        [h, w] => Ok((*w as u32, *h as u32)),
        [1, 1, h, w] | [1, h, w] => Ok((*w as u32, *h as u32)),
        s => Err(Error::Config(format!("cannot render a tensor of shape {s:?}"))),
    }
}

fn range(t: &Tensor) -> (f64, f64) {
    t.data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

fn colour(v: f64, lo: f64, hi: f64, palette: Palette) -> Rgb<u8> {
    let byte = |x: f64| (x.clamp(0.0, 1.0) * 255.0).round() as u8;
    match palette {
        Palette::Gray => {
            let g = if hi > lo { byte((v - lo) / (hi - lo)) } else { 0 };
            Rgb([g, g, g])
        }
        Palette::Diverging => {
            let m = lo.abs().max(hi.abs());
            let x = if m > 0.0 { v / m } else { 0.0 };
            if x >= 0.0 {
                Rgb([255, byte(1.0 - x), byte(1.0 - x)])
            } else {
                Rgb([byte(1.0 + x), byte(1.0 + x), 255])
            }
        }
        Palette::Uncertainty => {
            let x = if hi > 0.0 { v / hi } else { 0.0 };
            Rgb([255, byte(1.0 - x), byte(1.0 - x)])
        }
    }
}

/// Lay panels side by side.
pub fn compose(panels: &[Panel]) -> Result<(RgbImage, Sidecar)> {
    if panels.is_empty() {
        return Err(Error::Config("nothing to render".into()));
    }
    let dims = panels.iter().map(|p| square(p.image)).collect::<Result<Vec<_>>>()?;
    let height = dims.iter().map(|d| d.1).max().unwrap_or(0);
    let width = dims.iter().map(|d| d.0).sum::<u32>() + GAP * (panels.len() as u32 - 1);
    let mut img = RgbImage::from_pixel(width, height, Rgb([0, 0, 0]));
    let mut infos = Vec::with_capacity(panels.len());
    let mut x0 = 0;
    for (p, &(w, h)) in panels.iter().zip(&dims) {
        let (lo, hi) = range(p.image);
        for y in 0..h {
            for x in 0..w {
                let v = p.image.data()[(y * w + x) as usize];
                // row 0 of the tensor is the smallest y coordinate; draw it at the bottom
                img.put_pixel(x0 + x, h - 1 - y, colour(v, lo, hi, p.palette));
            }
        }
        infos.push(PanelInfo {
            label: p.label.clone(),
            palette: p.palette,
            min: lo,
            max: hi,
            x_offset: x0,
        });
        x0 += w + GAP;
    }
    Ok((
        img,
        Sidecar {
            width,
            height,
            panels: infos,
        },
    ))
}

pub fn sidecar_path(png: &Path) -> PathBuf {
    png.with_extension("json")
}

/// Write the composed panels to `png` and the sidecar next to it.
pub fn write(panels: &[Panel], png: &Path) -> Result<Sidecar> {
    let (img, side) = compose(panels)?;
    if let Some(parent) = png.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    img.save(png)?;
    let path = sidecar_path(png);
    std::fs::write(&path, serde_json::to_string_pretty(&side)?).map_err(|e| Error::io(&path, e))?;
    Ok(side)
}
