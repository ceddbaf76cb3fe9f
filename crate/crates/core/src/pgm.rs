//! Binary (P5) PGM output for perturbation grids.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::PerturbationGrid;
use crate::paths::IMAGE_SIDE;

/// Background value of the gutters between tiles.
const GUTTER_VALUE: u8 = 128;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        Self {
            width,
            height,
            pixels: vec![value; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    /// Copies a `side × side` block of values in [0, 1] with its top-left
    /// corner at `(x0, y0)`.
    fn blit(&mut self, x0: usize, y0: usize, side: usize, values: &[f64]) {
        for y in 0..side {
            for x in 0..side {
                self.pixels[(y0 + y) * self.width + x0 + x] = quantize(values[y * side + x]);
            }
        }
    }
}

/// Maps [0, 1] to 0..=255, clamping out-of-range values.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

pub fn write_pgm(path: impl AsRef<Path>, img: &GrayImage) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_pgm(img)).map_err(|e| Error::io(path, e))
}

/// Tile geometry of [`grid_image`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridLayout {
    pub rows: usize,
    pub cols: usize,
    pub gutter: usize,
}

impl GridLayout {
    pub const TILE: usize = IMAGE_SIDE;

    /// Top-left pixel of tile `(row, col)`.
    pub fn origin(&self, row: usize, col: usize) -> (usize, usize) {
        let pitch = Self::TILE + self.gutter;
        (self.gutter + col * pitch, self.gutter + row * pitch)
    }

    pub fn size(&self) -> (usize, usize) {
        let pitch = Self::TILE + self.gutter;
        (self.gutter + self.cols * pitch, self.gutter + self.rows * pitch)
    }
}

/// One row per perturbed dimension. Each row starts with the input and the
/// unperturbed reconstruction, followed by one tile per sweep value.
pub fn grid_image(grid: &PerturbationGrid, gutter: usize) -> (GrayImage, GridLayout) {
    let layout = GridLayout {
        rows: grid.rows.len().max(1),
        cols: 2 + grid.values.len(),
        gutter,
    };
    let (w, h) = layout.size();
    let mut img = GrayImage::filled(w, h, GUTTER_VALUE);
    for r in 0..layout.rows {
        let (x, y) = layout.origin(r, 0);
        img.blit(x, y, GridLayout::TILE, grid.input.data());
        let (x, y) = layout.origin(r, 1);
        img.blit(x, y, GridLayout::TILE, grid.reconstruction.data());
        if let Some(tiles) = grid.rows.get(r) {
            for (k, tile) in tiles.iter().enumerate() {
                let (x, y) = layout.origin(r, 2 + k);
                img.blit(x, y, GridLayout::TILE, tile.data());
            }
        }
    }
    (img, layout)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    /// Minimal P5 parser written against the netpbm description.
    fn parse(bytes: &[u8]) -> (usize, usize, usize, Vec<u8>) {
        let mut fields = Vec::new();
        let mut i = 2;
        assert_eq!(&bytes[..2], b"P5");
        while fields.len() < 3 {
            while bytes[i].is_ascii_whitespace() {
                i += 1;
            }
            let start = i;
            while !bytes[i].is_ascii_whitespace() {
                i += 1;
            }
            fields.push(std::str::from_utf8(&bytes[start..i]).unwrap().parse::<usize>().unwrap());
        }
        i += 1;
        (fields[0], fields[1], fields[2], bytes[i..].to_vec())
    }

    #[test]
    fn header_and_payload() {
        let img = GrayImage {
            width: 3,
            height: 2,
            pixels: vec![0, 1, 2, 253, 254, 255],
        };
        let bytes = encode_pgm(&img);
        assert_eq!(&bytes[..11], b"P5\n3 2\n255\n");
        assert_eq!(parse(&bytes), (3, 2, 255, img.pixels));
    }

    #[test]
    fn quantization() {
        assert_eq!(quantize(0.0), 0);
        assert_eq!(quantize(1.0), 255);
        assert_eq!(quantize(0.5), 128);
        assert_eq!(quantize(-3.0), 0);
        assert_eq!(quantize(7.0), 255);
    }

    #[test]
    fn grid_tiles_land_where_expected() {
        let tile = |v: f64| Tensor::full(&[28, 28], v);
        let grid = PerturbationGrid {
            input: tile(1.0),
            digit: 3,
            reconstruction: tile(0.5),
            dims: vec![0, 1],
            values: vec![-0.1, 0.1],
            rows: vec![vec![tile(0.0), tile(0.2)], vec![tile(0.4), tile(0.6)]],
            capsule: vec![0.0; 16],
        };
        let (img, layout) = grid_image(&grid, 2);
        assert_eq!((img.width, img.height), (2 + 4 * 30, 2 + 2 * 30));
        for (r, c, v) in [(0, 0, 255), (1, 0, 255), (0, 1, 128), (0, 2, 0), (0, 3, 51), (1, 2, 102), (1, 3, 153)] {
            let (x, y) = layout.origin(r, c);
            assert_eq!(img.get(x, y), v);
            assert_eq!(img.get(x + 27, y + 27), v);
        }
        assert_eq!(img.get(0, 0), GUTTER_VALUE);
    }
}
