//! PNG masks: any pixel with a nonzero channel is masked.

use std::path::Path;

use dragscene_core::grid::MaskGrid;

use crate::{Error, Result};

pub fn read_mask_png(path: &Path) -> Result<MaskGrid> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    // only channels the file actually has; converting grey to RGBA would
    // invent an opaque alpha and mask everything
    let has_alpha = img.color().has_alpha();
    let rgba = img.to_rgba16();
    let (w, h) = rgba.dimensions();
    let used = if has_alpha { 4 } else { 3 };
    Ok(MaskGrid::from_fn(h as usize, w as usize, |v, u| {
        let p = rgba.get_pixel(u as u32, v as u32);
        if p.0[..used].iter().any(|&c| c != 0) {
            1.0
        } else {
            0.0
        }
    }))
}

/// Grey PNG, 255 where the mask is at least 0.5.
pub fn write_mask_png(path: &Path, mask: &MaskGrid) -> Result<()> {
    let img = image::GrayImage::from_fn(mask.width() as u32, mask.height() as u32, |u, v| {
        image::Luma([if mask.get(v as usize, u as usize) >= 0.5 { 255 } else { 0 }])
    });
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    img.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })
}
