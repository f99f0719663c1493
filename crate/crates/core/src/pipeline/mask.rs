use std::path::{Path, PathBuf};

use super::io;
use crate::backends::FaceParser;
use crate::error::Result;
use crate::masking::{build_mask, FaceMask, LabelMap, ParseMap, RegionSet};

/// Files written by [`cmd_mask`] and a summary of the mask.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskArtifacts {
    pub parse_path: PathBuf,
    pub mask_path: PathBuf,
    pub parse: ParseMap,
    pub mask: FaceMask,
    pub editable_fraction: f64,
    pub warning: Option<String>,
}

/// Parse one image and write `<id>_parse.png` (raw labels) and
/// `<id>_mask.png` (0 kept, 255 editable) into `out_dir`.
pub fn cmd_mask(
    input: &Path,
    keep: &RegionSet,
    label_map: &LabelMap,
    parser: &dyn FaceParser,
    dilation: usize,
    out_dir: &Path,
) -> Result<MaskArtifacts> {
    label_map.validate()?;
    let pixels = io::load_rgb(input)?;
    let parse = parser.parse(&io::to_unit(&pixels))?;
    let mask = build_mask(&parse, keep, label_map, dilation)?;

    std::fs::create_dir_all(out_dir)?;
    let id = io::image_id(input);
    let parse_path = out_dir.join(format!("{id}_parse.png"));
    let mask_path = out_dir.join(format!("{id}_mask.png"));
    parse.to_gray_image().save(&parse_path)?;
    mask.to_gray_image().save(&mask_path)?;

    let warning = (mask.editable_count() == 0).then(|| {
        let msg = format!("{id}: mask is empty, nothing would be anonymized");
        log::warn!("{msg}");
        msg
    });
    Ok(MaskArtifacts {
        parse_path,
        mask_path,
        editable_fraction: mask.editable_fraction(),
        parse,
        mask,
        warning,
    })
}
