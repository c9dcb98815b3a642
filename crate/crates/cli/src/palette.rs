use image::{Rgb, RgbImage};

use crate::CliError;

const BASE: [[u8; 3]; 16] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
    [0, 128, 128],
    [220, 190, 255],
    [170, 110, 40],
    [255, 250, 200],
    [128, 0, 0],
    [170, 255, 195],
];

/// Class colors; label 0 is always black.
#[derive(Clone, Debug, Default)]
pub struct Palette {
    custom: Vec<[u8; 3]>,
}

impl Palette {
    /// One color per line, `#rrggbb` or `r,g,b`. Blank lines and `#` comments
    /// (a `#` followed by a space) are skipped.
    pub fn parse(text: &str) -> Result<Self, String> {
        let mut custom = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with("# ") {
                continue;
            }
            let color = if let Some(hex) = line.strip_prefix('#') {
                let v = u32::from_str_radix(hex, 16).map_err(|_| format!("line {}: bad color {line:?}", i + 1))?;
                if hex.len() != 6 {
                    return Err(format!("line {}: bad color {line:?}", i + 1));
                }
                [(v >> 16) as u8, (v >> 8) as u8, v as u8]
            } else {
                let parts: Vec<u8> = line
                    .split(',')
                    .map(|p| p.trim().parse::<u8>())
                    .collect::<Result<_, _>>()
                    .map_err(|_| format!("line {}: bad color {line:?}", i + 1))?;
                <[u8; 3]>::try_from(parts).map_err(|_| format!("line {}: bad color {line:?}", i + 1))?
            };
            custom.push(color);
        }
        if custom.is_empty() {
            return Err("palette has no colors".into());
        }
        Ok(Self { custom })
    }

    pub fn color(&self, label: u16) -> Result<[u8; 3], CliError> {
        if label == 0 {
            return Ok([0, 0, 0]);
        }
        let i = label as usize - 1;
        if !self.custom.is_empty() {
            return self
                .custom
                .get(i)
                .copied()
                .ok_or_else(|| CliError::Usage(format!("palette has no color for class {label}")));
        }
        Ok(BASE.get(i).copied().unwrap_or_else(|| generated(i)))
    }
}

/// Golden-angle hues at full value, distinct for every index.
fn generated(i: usize) -> [u8; 3] {
    let hue = (i as f64 * 137.507_764) % 360.0;
    let sat = 0.55 + 0.4 * ((i / 7) % 2) as f64;
    let c = sat;
    let x = c * (1.0 - ((hue / 60.0) % 2.0 - 1.0).abs());
    let m = 1.0 - c;
    let (r, g, b) = match (hue / 60.0) as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let q = |v: f64| ((v + m) * 255.0).round() as u8;
    [q(r), q(g), q(b)]
}

pub fn render(height: usize, width: usize, labels: &[u16], palette: &Palette) -> Result<RgbImage, CliError> {
    let (w, h) = (
        u32::try_from(width).map_err(|_| CliError::Data("image too wide".into()))?,
        u32::try_from(height).map_err(|_| CliError::Data("image too tall".into()))?,
    );
    let mut img = RgbImage::new(w, h);
    for (p, &label) in labels.iter().enumerate() {
        let (x, y) = ((p % width) as u32, (p / width) as u32);
        img.put_pixel(x, y, Rgb(palette.color(label)?));
    }
    Ok(img)
}
