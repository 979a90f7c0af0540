//! Tile-pair dataset: `<root>/<split>/A/*.png`, `/B/*.png`, `/label/*.png`
//! with identical basenames. Labels are strict 0/255 unless lenient
//! ingestion (threshold 128) is enabled.

use std::path::{Path, PathBuf};

use crate::data::image_io::{load_gray, load_rgb};
use crate::data::synthetic::generate_synthetic_pair;
use crate::error::{Error, Result};
use crate::rng::substream;

#[derive(Clone, Debug)]
pub struct TileItem {
    pub name: String,
    /// Channel-major RGB bytes, `[3, h, w]`.
    pub img_t1: Vec<u8>,
    pub img_t2: Vec<u8>,
    /// Binary mask, `[h, w]`, values 0/1.
    pub label: Vec<u8>,
}

#[derive(Clone, Debug)]
pub struct TileDataset {
    pub items: Vec<TileItem>,
    pub tile: usize,
}

fn png_basenames(dir: &Path) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for entry in std::fs::read_dir(dir)
        .map_err(|e| Error::Data(format!("{}: {e}", dir.display())))?
    {
        let entry = entry?;
        let path = entry.path();
        if path.extension().and_then(|s| s.to_str()) == Some("png") {
            names.push(
                path.file_name()
                    .unwrap()
                    .to_string_lossy()
                    .into_owned(),
            );
        }
    }
    names.sort();
    Ok(names)
}

fn binarize_label(raw: &[u8], lenient: bool, path: &Path) -> Result<Vec<u8>> {
    if lenient {
        let strict = raw.iter().all(|&v| v == 0 || v == 255);
        if !strict {
            eprintln!(
                "warning: {} has non-binary values; thresholding at 128",
                path.display()
            );
        }
        return Ok(raw.iter().map(|&v| u8::from(v >= 128)).collect());
    }
    if let Some(&bad) = raw.iter().find(|&&v| v != 0 && v != 255) {
        return Err(Error::Data(format!(
            "label {} contains value {bad}; expected 0 or 255",
            path.display()
        )));
    }
    Ok(raw.iter().map(|&v| u8::from(v == 255)).collect())
}

/// Load one split. Ordering is deterministic (sorted basenames); every
/// item must have all three files with matching dimensions.
pub fn load_tile_dataset(root: &Path, split: &str, lenient_labels: bool) -> Result<TileDataset> {
    let base = root.join(split);
    let a_dir = base.join("A");
    let b_dir = base.join("B");
    let label_dir = base.join("label");
    if !a_dir.is_dir() {
        return Err(Error::Data(format!(
            "dataset split directory not found: {}",
            a_dir.display()
        )));
    }
    let names = png_basenames(&a_dir)?;
    if names.is_empty() {
        return Err(Error::Data(format!("no tiles found in {}", a_dir.display())));
    }
    let mut items = Vec::with_capacity(names.len());
    let mut tile = None;
    for name in names {
        let a_path = a_dir.join(&name);
        let b_path = b_dir.join(&name);
        let l_path = label_dir.join(&name);
        for p in [&b_path, &l_path] {
            if !p.is_file() {
                return Err(Error::Data(format!(
                    "missing counterpart for {name}: {}",
                    p.display()
                )));
            }
        }
        let (t1, h1, w1) = load_rgb(&a_path)?;
        let (t2, h2, w2) = load_rgb(&b_path)?;
        let (lraw, h3, w3) = load_gray(&l_path)?;
        if (h1, w1) != (h2, w2) || (h1, w1) != (h3, w3) {
            return Err(Error::Data(format!(
                "size mismatch for {name}: A {h1}x{w1}, B {h2}x{w2}, label {h3}x{w3}"
            )));
        }
        if h1 != w1 {
            return Err(Error::Data(format!(
                "tiles must be square, {name} is {h1}x{w1}"
            )));
        }
        match tile {
            None => tile = Some(h1),
            Some(t) if t != h1 => {
                return Err(Error::Data(format!(
                    "inconsistent tile sizes: {t} vs {h1} ({name})"
                )))
            }
            _ => {}
        }
        let label = binarize_label(&lraw, lenient_labels, &l_path)?;
        items.push(TileItem {
            name,
            img_t1: t1,
            img_t2: t2,
            label,
        });
    }
    Ok(TileDataset {
        items,
        tile: tile.unwrap(),
    })
}

impl TileDataset {
    /// Deterministic in-memory synthetic split. Tile i draws from an
    /// independent substream of (seed, split), so splits never overlap.
    pub fn synthetic(seed: u64, split: &str, size: usize, count: usize, n_shapes: usize) -> Self {
        let items = (0..count)
            .map(|i| {
                let tile_seed = substream(seed, &format!("synth.{split}"), i as u64)
                    .next_u64();
                let t = generate_synthetic_pair(tile_seed, size, n_shapes);
                TileItem {
                    name: format!("{split}_{i:04}.png"),
                    img_t1: t.img_t1,
                    img_t2: t.img_t2,
                    label: t.label,
                }
            })
            .collect();
        TileDataset { items, tile: size }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Write the dataset to disk in the standard layout.
    pub fn write_to(&self, root: &Path, split: &str) -> Result<Vec<PathBuf>> {
        use crate::data::image_io::{save_gray, save_rgb};
        let base = root.join(split);
        for sub in ["A", "B", "label"] {
            std::fs::create_dir_all(base.join(sub))?;
        }
        let mut written = Vec::new();
        for item in &self.items {
            let t = self.tile;
            let a = base.join("A").join(&item.name);
            save_rgb(&a, &item.img_t1, t, t)?;
            let b = base.join("B").join(&item.name);
            save_rgb(&b, &item.img_t2, t, t)?;
            let l = base.join("label").join(&item.name);
            let raw: Vec<u8> = item.label.iter().map(|&v| if v != 0 { 255 } else { 0 }).collect();
            save_gray(&l, &raw, t, t)?;
            written.extend([a, b, l]);
        }
        Ok(written)
    }
}
