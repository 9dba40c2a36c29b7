//! 8-bit RGB PNG in and out of [`Grid`] form. Values map to [0, 1] as
//! k / 255; saving rounds to nearest, so save-then-load is exact for
//! anything that came from a PNG.

use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::Grid;

pub fn load_image(path: &Path) -> Result<Grid> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let rgb = match img {
        image::DynamicImage::ImageRgb8(rgb) => rgb,
        other => {
            return Err(Error::Image {
                path: path.to_path_buf(),
                reason: format!("expected 8-bit RGB, got {:?}", other.color()),
            })
        }
    };
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut grid = Grid::zeros(3, h, w);
    for y in 0..h {
        for x in 0..w {
            let px = rgb.get_pixel(x as u32, y as u32);
            for c in 0..3 {
                *grid.at_mut(c, y, x) = px[c] as f32 / 255.0;
            }
        }
    }
    Ok(grid)
}

/// Saves a 3-channel grid, clamping to [0, 1] and rounding to nearest.
pub fn save_image(path: &Path, grid: &Grid) -> Result<()> {
    if grid.channels() != 3 {
        return Err(Error::shape(format!(
            "png output needs 3 channels, got {}",
            grid.channels()
        )));
    }
    let (h, w) = (grid.height(), grid.width());
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px: [u8; 3] = std::array::from_fn(|c| {
                (grid.at(c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8
            });
            img.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    img.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}
