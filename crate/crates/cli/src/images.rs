//! Plain (ASCII) PGM and PPM images with a maximum value of 255.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use seqenc::{Error, Result};

/// Fixed class colors; index = class.
pub const PALETTE: [[u8; 3]; 17] = [
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
    [128, 128, 0],
];
/// Color of ignored pixels.
pub const IGNORE_COLOR: [u8; 3] = [0, 0, 0];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// 1 (gray) or 3 (RGB).
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn gray(width: usize, height: usize, data: Vec<u8>) -> Self {
        assert_eq!(data.len(), width * height);
        Image { width, height, channels: 1, data }
    }

    pub fn rgb(width: usize, height: usize, pixels: &[[u8; 3]]) -> Self {
        assert_eq!(pixels.len(), width * height);
        Image { width, height, channels: 3, data: pixels.concat() }
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[u8] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    fn encode(&self) -> String {
        let magic = if self.channels == 1 { "P2" } else { "P3" };
        let mut s = format!("{magic}\n{} {}\n255\n", self.width, self.height);
        // keep lines under 70 characters
        let per_line = 17 / self.channels * self.channels;
        for row in self.data.chunks(self.width * self.channels) {
            for line in row.chunks(per_line) {
                let mut first = true;
                for v in line {
                    if !first {
                        s.push(' ');
                    }
                    first = false;
                    write!(s, "{v}").expect("string write");
                }
                s.push('\n');
            }
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Image> {
        let text = fs::read_to_string(path)?;
        let mut tokens = text.lines().map(|l| l.split('#').next().unwrap_or("")).flat_map(str::split_whitespace);
        let bad = |m: &str| Error::Format(format!("{}: {m}", path.display()));
        let channels = match tokens.next() {
            Some("P2") => 1,
            Some("P3") => 3,
            _ => return Err(bad("not a plain PGM/PPM")),
        };
        let mut num = || -> Result<usize> { tokens.next().and_then(|t| t.parse().ok()).ok_or_else(|| bad("bad header or pixel")) };
        let (width, height, max) = (num()?, num()?, num()?);
        if max != 255 {
            return Err(bad("maximum value must be 255"));
        }
        let data = (0..width * height * channels)
            .map(|_| num().and_then(|v| u8::try_from(v).map_err(|_| bad("pixel above 255"))))
            .collect::<Result<Vec<u8>>>()?;
        Ok(Image { width, height, channels, data })
    }
}

/// `[0, 1] -> 0..=255`, clipped.
pub fn unit_to_byte(v: f64) -> u8 {
    (255.0 * v.clamp(0.0, 1.0)).round() as u8
}

/// `[-1, 1] -> 0..=255`, clipped.
pub fn symmetric_to_byte(v: f64) -> u8 {
    unit_to_byte((v.clamp(-1.0, 1.0) + 1.0) / 2.0)
}

/// Upscale each matrix entry to a `cell × cell` block.
pub fn heatmap(matrix: &[Vec<f64>], cell: usize) -> Image {
    let n = matrix.len();
    let side = n * cell;
    let mut data = vec![0u8; side * side];
    for (i, row) in matrix.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            let b = unit_to_byte(v);
            for y in i * cell..(i + 1) * cell {
                data[y * side + j * cell..y * side + (j + 1) * cell].fill(b);
            }
        }
    }
    Image::gray(side, side, data)
}
