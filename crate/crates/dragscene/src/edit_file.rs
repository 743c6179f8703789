//! `edit.json`: reference view, drag points and a mask file.

use std::path::Path;

use dragscene_core::drag::EditSpec;
use serde::{Deserialize, Serialize};

use crate::io::{read_json, write_json};
use crate::mask_png::read_mask_png;
use crate::tensor::{read_tensor, write_tensor, Tensor};
use crate::{Error, Result};

pub const EDIT_FILE: &str = "edit.json";
pub const EDIT_MASK_FILE: &str = "edit_mask.dstn";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditFile {
    pub ref_view: usize,
    /// `[u, v]` pixel coordinates.
    pub handles: Vec<[f64; 2]>,
    pub targets: Vec<[f64; 2]>,
    /// Mask path relative to this file: `.png` (nonzero = masked) or
    /// `.dstn` (h × w weights).
    pub mask: String,
}

pub fn read_mask(path: &Path) -> Result<dragscene_core::grid::MaskGrid> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("png") => read_mask_png(path),
        Some("dstn") => read_tensor(path)?.to_mask().map_err(|e| Error::tensor(path, e)),
        _ => Err(Error::format(path, "mask must be a .png or .dstn file")),
    }
}

pub fn load_edit(path: &Path) -> Result<EditSpec> {
    let file: EditFile = read_json(path)?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let mask = read_mask(&dir.join(&file.mask))?;
    let pts = |v: &[[f64; 2]]| v.iter().map(|p| (p[0], p[1])).collect();
    EditSpec::new(file.ref_view, mask, pts(&file.handles), pts(&file.targets)).map_err(|e| Error::format(path, e.to_string()))
}

/// Writes `edit.json` with its mask as a tensor next to it.
pub fn save_edit(dir: &Path, spec: &EditSpec) -> Result<()> {
    write_tensor(&dir.join(EDIT_MASK_FILE), &Tensor::from_mask(&spec.mask))?;
    let pts = |v: &[(f64, f64)]| v.iter().map(|&(u, v)| [u, v]).collect();
    let file = EditFile {
        ref_view: spec.ref_view,
        handles: pts(&spec.handles),
        targets: pts(&spec.targets),
        mask: EDIT_MASK_FILE.to_string(),
    };
    write_json(&dir.join(EDIT_FILE), &file)
}

#[cfg(test)]
mod tests {
    use super::*;
    use dragscene_core::grid::MaskGrid;

    #[test]
    fn edit_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let mask = MaskGrid::from_fn(6, 8, |v, u| if u > 2 && v < 4 { 1.0 } else { 0.0 });
        let spec = EditSpec::new(1, mask, vec![(3.5, 1.25)], vec![(5.0, 2.0)]).unwrap();
        save_edit(dir.path(), &spec).unwrap();
        assert_eq!(load_edit(&dir.path().join(EDIT_FILE)).unwrap(), spec);
    }

    #[test]
    fn png_masks_are_accepted() {
        let dir = tempfile::tempdir().unwrap();
        let mask = MaskGrid::from_fn(5, 5, |v, _| if v == 2 { 1.0 } else { 0.0 });
        crate::mask_png::write_mask_png(&dir.path().join("m.png"), &mask).unwrap();
        std::fs::write(
            dir.path().join("e.json"),
            r#"{"ref_view": 0, "handles": [[1, 2]], "targets": [[3, 2]], "mask": "m.png"}"#,
        )
        .unwrap();
        let spec = load_edit(&dir.path().join("e.json")).unwrap();
        assert_eq!(spec.mask, mask);
        assert_eq!(spec.targets, vec![(3.0, 2.0)]);
    }

    #[test]
    fn out_of_image_points_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let spec = EditSpec::new(0, MaskGrid::ones(4, 4), vec![(1.0, 1.0)], vec![(2.0, 2.0)]).unwrap();
        save_edit(dir.path(), &spec).unwrap();
        let path = dir.path().join(EDIT_FILE);
        let text = std::fs::read_to_string(&path).unwrap().replace("2.0,\n      2.0", "9.0,\n      2.0");
        std::fs::write(&path, text).unwrap();
        assert!(matches!(load_edit(&path), Err(Error::Format { .. })));
    }
}
