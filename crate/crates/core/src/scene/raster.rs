use std::io::{self, Write};

use super::SceneSpec;
use crate::geometry::BBox;
use crate::vocab::{Shape, BACKGROUND_RGB};

/// 8-bit RGB image, row-major, 3 bytes per pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

impl Image {
    pub fn filled(height: usize, width: usize, rgb: [u8; 3]) -> Self {
        let mut pixels = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            pixels.extend_from_slice(&rgb);
        }
        Self {
            height,
            width,
            pixels,
        }
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    #[inline]
    fn put(&mut self, y: usize, x: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    /// Binary PPM (P6).
    pub fn write_ppm<W: Write>(&self, out: &mut W) -> io::Result<()> {
        write!(out, "P6\n{} {}\n255\n", self.width, self.height)?;
        out.write_all(&self.pixels)
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut v = Vec::with_capacity(self.pixels.len() + 16);
        self.write_ppm(&mut v).expect("writing to a Vec cannot fail");
        v
    }

    /// Fills every pixel whose center falls inside `shape` inscribed in `bbox`.
    pub fn draw(&mut self, shape: Shape, bbox: &BBox, rgb: [u8; 3]) {
        let (w, h) = (self.width as f64, self.height as f64);
        let [x0, y0, x1, y1] = bbox.corners();
        let px0 = ((x0 * w).floor().max(0.0)) as usize;
        let py0 = ((y0 * h).floor().max(0.0)) as usize;
        let px1 = ((x1 * w).ceil().min(w)) as usize;
        let py1 = ((y1 * h).ceil().min(h)) as usize;
        for py in py0..py1 {
            for px in px0..px1 {
                // pixel center in box-local unit coordinates
                let u = ((px as f64 + 0.5) / w - x0) / (x1 - x0);
                let v = ((py as f64 + 0.5) / h - y0) / (y1 - y0);
                if !(0.0..=1.0).contains(&u) || !(0.0..=1.0).contains(&v) {
                    continue;
                }
                let inside = match shape {
                    Shape::Square => true,
                    Shape::Circle => (u - 0.5).powi(2) + (v - 0.5).powi(2) <= 0.25,
                    Shape::Triangle => (u - 0.5).abs() <= v / 2.0,
                };
                if inside {
                    self.put(py, px, rgb);
                }
            }
        }
    }
}

/// Draws objects in order over a mid-gray background.
pub fn rasterize(spec: &SceneSpec) -> Image {
    let mut img = Image::filled(spec.height(), spec.width(), BACKGROUND_RGB);
    for o in &spec.objects {
        img.draw(o.shape, &o.bbox, o.color.rgb());
    }
    img
}
