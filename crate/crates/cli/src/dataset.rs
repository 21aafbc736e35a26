//! Dataset directory layout:
//!
//! ```text
//! <root>/
//!   manifest.csv            image,mask,spacing_mm,split
//!   images/<name>.pgm       8-bit grayscale (P5)
//!   masks/<name>.pgm        {0, 255}
//! ```
//!
//! Paths in the manifest are relative to the root. Masks decode with a
//! >= 128 threshold.

use monounet_core::error::{Error, Result};
use monounet_core::metrics::BinaryMask;
use monounet_core::pgm::{self, GrayImage};
use monounet_core::phantom::Phantom;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub mask: PathBuf,
    pub spacing_mm: f64,
    pub split: String,
}

impl ManifestEntry {
    pub fn stem(&self) -> String {
        self.image
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    }
}

#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join("manifest.csv");
        let text =
            std::fs::read_to_string(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut lines = text.lines();
        match lines.next() {
            Some("image,mask,spacing_mm,split") => {}
            other => {
                return Err(Error::Data(format!(
                    "{}: bad manifest header {:?}",
                    path.display(),
                    other
                )));
            }
        }
        let mut entries = Vec::new();
        for (lineno, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 4 {
                return Err(Error::Data(format!(
                    "{}: line {}: expected 4 fields",
                    path.display(),
                    lineno + 2
                )));
            }
            let spacing_mm: f64 = fields[2].parse().map_err(|_| {
                Error::Data(format!(
                    "{}: line {}: bad spacing '{}'",
                    path.display(),
                    lineno + 2,
                    fields[2]
                ))
            })?;
            if !(spacing_mm > 0.0) {
                return Err(Error::Data(format!(
                    "{}: line {}: spacing must be positive",
                    path.display(),
                    lineno + 2
                )));
            }
            let entry = ManifestEntry {
                image: root.join(fields[0]),
                mask: root.join(fields[1]),
                spacing_mm,
                split: fields[3].to_string(),
            };
            for p in [&entry.image, &entry.mask] {
                if !p.exists() {
                    return Err(Error::Data(format!(
                        "manifest references missing file {}",
                        p.display()
                    )));
                }
            }
            entries.push(entry);
        }
        Ok(DatasetManifest {
            root: root.to_path_buf(),
            entries,
        })
    }

    pub fn filtered(&self, split: Option<&str>) -> Vec<&ManifestEntry> {
        self.entries
            .iter()
            .filter(|e| split.is_none_or(|s| e.split == s))
            .collect()
    }
}

pub fn load_image(entry: &ManifestEntry) -> Result<GrayImage> {
    pgm::read_pgm(&entry.image)
}

pub fn load_mask(entry: &ManifestEntry) -> Result<BinaryMask> {
    let img = pgm::read_pgm(&entry.mask)?;
    BinaryMask::new(
        img.h,
        img.w,
        img.pixels.iter().map(|&v| v >= 128).collect(),
        entry.spacing_mm,
    )
}

pub fn mask_to_pgm(mask: &BinaryMask) -> GrayImage {
    GrayImage {
        h: mask.h(),
        w: mask.w(),
        pixels: mask.data().iter().map(|&b| if b { 255 } else { 0 }).collect(),
    }
}

/// Write phantoms as a dataset directory with the given split tag.
pub fn write_phantom_dataset(out: &Path, phantoms: &[Phantom], split: &str) -> Result<()> {
    let images = out.join("images");
    let masks = out.join("masks");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(images.display().to_string(), e))?;
    std::fs::create_dir_all(&masks).map_err(|e| Error::io(masks.display().to_string(), e))?;
    let mut manifest = String::from("image,mask,spacing_mm,split\n");
    for (i, p) in phantoms.iter().enumerate() {
        let name = format!("phantom_{i:04}.pgm");
        pgm::write_pgm(&images.join(&name), &p.image)?;
        let mask_img = GrayImage {
            h: p.image.h,
            w: p.image.w,
            pixels: p.mask.iter().map(|&b| if b { 255 } else { 0 }).collect(),
        };
        pgm::write_pgm(&masks.join(&name), &mask_img)?;
        manifest.push_str(&format!(
            "images/{name},masks/{name},{},{split}\n",
            p.pixel_spacing
        ));
    }
    let path = out.join("manifest.csv");
    std::fs::write(&path, manifest).map_err(|e| Error::io(path.display().to_string(), e))
}
