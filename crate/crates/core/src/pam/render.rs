use std::path::Path;

use image::{Rgb, RgbImage};

use super::{PatternAssignmentMap, BACKGROUND};
use crate::error::{H2tError, Result};

const PALETTE: [[u8; 3]; 20] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [127, 127, 127],
    [188, 189, 34],
    [23, 190, 207],
    [174, 199, 232],
    [255, 187, 120],
    [152, 223, 138],
    [255, 152, 150],
    [197, 176, 213],
    [196, 156, 148],
    [247, 182, 210],
    [199, 199, 199],
    [219, 219, 141],
    [158, 218, 229],
];

const BACKGROUND_COLOR: [u8; 3] = [255, 255, 255];

/// Fixed color of a pattern index (cycled past 20 patterns); white for background.
pub fn palette_color(cell: i32) -> [u8; 3] {
    if cell == BACKGROUND {
        BACKGROUND_COLOR
    } else {
        PALETTE[cell as usize % PALETTE.len()]
    }
}

/// Renders the map as a PNG, each cell a `scale × scale` block.
pub fn render_pam(pam: &PatternAssignmentMap, scale: u32, path: impl AsRef<Path>) -> Result<()> {
    if scale == 0 {
        return Err(H2tError::invalid("render scale must be at least 1"));
    }
    let w = pam.width() as u32 * scale;
    let h = pam.height() as u32 * scale;
    let img = RgbImage::from_fn(w, h, |px, py| {
        Rgb(palette_color(pam.get((px / scale) as usize, (py / scale) as usize)))
    });
    let path = path.as_ref();
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| H2tError::Format(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_scaled_png() {
        let pam = PatternAssignmentMap::new(2, 1, 2, vec![0, -1]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pam.png");
        render_pam(&pam, 3, &path).unwrap();
        let img = image::open(&path).unwrap().to_rgb8();
        assert_eq!(img.dimensions(), (6, 3));
        assert_eq!(img.get_pixel(0, 0).0, PALETTE[0]);
        assert_eq!(img.get_pixel(5, 2).0, BACKGROUND_COLOR);
    }
}
