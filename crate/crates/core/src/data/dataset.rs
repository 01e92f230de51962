//! On-disk layout: `<root>/<id>.rgb.ppm`, `<root>/<id>.depth.pfm` and a
//! manifest listing ids one per line.

use std::path::Path;

use super::{pfm, pnm, DepthSample};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.txt";

/// Writes samples with 16-bit rgb and float depth.
pub fn save_dataset(root: impl AsRef<Path>, samples: &[DepthSample]) -> Result<()> {
    let root = root.as_ref();
    std::fs::create_dir_all(root)?;
    let mut manifest = String::new();
    for s in samples {
        if s.id().is_empty() || s.id().contains(['/', '\\', '\n']) {
            return Err(Error::invalid(format!("sample id {:?} is not a file name", s.id())));
        }
        pnm::write(root.join(format!("{}.rgb.ppm", s.id())), s.rgb(), pnm::BitDepth::Sixteen)?;
        pfm::write(root.join(format!("{}.depth.pfm", s.id())), s.depth())?;
        manifest.push_str(s.id());
        manifest.push('\n');
    }
    std::fs::write(root.join(MANIFEST_FILE), manifest)?;
    Ok(())
}

pub fn load_dataset(root: impl AsRef<Path>) -> Result<Vec<DepthSample>> {
    let root = root.as_ref();
    let manifest = std::fs::read_to_string(root.join(MANIFEST_FILE))?;
    manifest
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|id| {
            let (rgb, _) = pnm::read(root.join(format!("{id}.rgb.ppm")))?;
            let depth = pfm::read(root.join(format!("{id}.depth.pfm")))?;
            DepthSample::new(id, rgb, depth)
        })
        .collect()
}
