//! Tab-separated dataset manifests: `xa_path<TAB>xb_path<TAB>mask_path`.

use std::path::{Path, PathBuf};

use super::pnm::{read_image, write_image};
use super::synth::ImagePairSample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub xa: PathBuf,
    pub xb: PathBuf,
    pub mask: PathBuf,
}

/// Images of one manifest line: `3 x H x W` pair and binary `1 x H x W` mask.
#[derive(Clone, Debug, PartialEq)]
pub struct PairData {
    pub xa: Tensor<f64>,
    pub xb: Tensor<f64>,
    pub mask: Tensor<f64>,
}

/// Relative paths are resolved against `base`. Blank lines are skipped.
pub fn parse_manifest(text: &str, base: &Path) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let start = offset;
        offset += line.len();
        let line = line.trim_end_matches(['\n', '\r']);
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 || cols.iter().any(|c| c.is_empty()) {
            return Err(Error::Format {
                kind: "manifest",
                offset: start,
                msg: format!("expected 3 tab-separated paths, got {}", cols.len()),
            });
        }
        let p = |s: &str| base.join(s);
        out.push(ManifestEntry {
            xa: p(cols[0]),
            xb: p(cols[1]),
            mask: p(cols[2]),
        });
    }
    Ok(out)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text, path.parent().unwrap_or(Path::new(".")))
}

pub fn load_pair(e: &ManifestEntry) -> Result<PairData> {
    let xa = read_image(&e.xa)?;
    let xb = read_image(&e.xb)?;
    let m = read_image(&e.mask)?;
    if xa.shape() != xb.shape() || xa.shape()[0] != 3 {
        return Err(Error::shape("load_pair", xa.shape(), xb.shape()));
    }
    if m.shape()[1..] != xa.shape()[1..] {
        return Err(Error::shape("load_pair mask", m.shape(), xa.shape()));
    }
    // A colour mask counts a pixel as changed when any channel is set.
    let (c, h, w) = (m.shape()[0], m.shape()[1], m.shape()[2]);
    let hw = h * w;
    let mask = (0..hw)
        .map(|p| {
            if (0..c).any(|ch| m.data()[ch * hw + p] >= 0.5) {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    Ok(PairData {
        xa,
        xb,
        mask: Tensor::new(&[1, h, w], mask)?,
    })
}

/// Writes images under `dir/split/` and the manifest `dir/split.tsv`.
pub fn write_split(dir: &Path, split: &str, samples: &[ImagePairSample]) -> Result<PathBuf> {
    let sub = dir.join(split);
    std::fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
    let mut text = String::new();
    for (i, s) in samples.iter().enumerate() {
        let names = [
            format!("{split}/xa_{i:05}.ppm"),
            format!("{split}/xb_{i:05}.ppm"),
            format!("{split}/mask_{i:05}.pgm"),
        ];
        write_image(&dir.join(&names[0]), &s.xa)?;
        write_image(&dir.join(&names[1]), &s.xb)?;
        write_image(&dir.join(&names[2]), &s.mask)?;
        text.push_str(&names.join("\t"));
        text.push('\n');
    }
    let path = dir.join(format!("{split}.tsv"));
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
