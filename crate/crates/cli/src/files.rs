//! File helpers shared by the commands.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use layout_lidar::cloud::LabeledPointCloud;
use layout_lidar::config::Config;
use layout_lidar::layout::{parse_layout, serialize_layout, Layout};
use layout_lidar::sensor::RangeImage;

pub const IMAGE_EXT: &str = "lri";
pub const COND_SUFFIX: &str = ".cond.lri";
pub const CLOUD_SUFFIX: &str = ".cloud.txt";

pub fn read_config(path: Option<&Path>) -> Result<Config> {
    match path {
        Some(p) => Config::from_file(p).with_context(|| format!("config {}", p.display())),
        None => Ok(Config::default()),
    }
}

pub fn read_layout(path: &Path) -> Result<Layout> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_layout(&text).with_context(|| format!("layout {}", path.display()))
}

pub fn write_layout(path: &Path, layout: &Layout) -> Result<()> {
    fs::write(path, serialize_layout(layout)).with_context(|| format!("writing {}", path.display()))
}

pub fn read_image(path: &Path) -> Result<RangeImage> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    RangeImage::read_lri(BufReader::new(f))
        .with_context(|| format!("range image {}", path.display()))
}

pub fn write_image(path: &Path, img: &RangeImage) -> Result<()> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(f);
    img.write_lri(&mut w)?;
    w.flush()?;
    Ok(())
}

pub fn read_cloud(path: &Path) -> Result<LabeledPointCloud> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    LabeledPointCloud::read_text(BufReader::new(f))
        .with_context(|| format!("point cloud {}", path.display()))
}

pub fn write_cloud(path: &Path, cloud: &LabeledPointCloud) -> Result<()> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(f);
    cloud.write_text(&mut w)?;
    w.flush()?;
    Ok(())
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating directory {}", dir.display()))
}

/// `a/b/name.lri` becomes `a/b/name<suffix>`.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let name = path
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or_default();
    let stem = name.strip_suffix(".lri").unwrap_or(name);
    path.with_file_name(format!("{stem}{suffix}"))
}

/// Range images in `dir` sorted by name, excluding condition images.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let path = entry?.path();
        let name = path
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or_default();
        if path.extension().and_then(|e| e.to_str()) == Some(IMAGE_EXT)
            && !name.ends_with(COND_SUFFIX)
        {
            out.push(path);
        }
    }
    out.sort();
    if out.is_empty() {
        bail!("no .{IMAGE_EXT} images in {}", dir.display());
    }
    Ok(out)
}

/// Single-channel 8- or 16-bit PGM/PNG as `(width, height, values)`.
pub fn read_gray(path: &Path) -> Result<(usize, usize, Vec<u16>)> {
    let img = image::open(path).with_context(|| format!("reading {}", path.display()))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let values = match img {
        image::DynamicImage::ImageLuma8(b) => b.into_raw().into_iter().map(u16::from).collect(),
        image::DynamicImage::ImageLuma16(b) => b.into_raw(),
        other => bail!(
            "{} must be single-channel, found {:?}",
            path.display(),
            other.color()
        ),
    };
    Ok((w, h, values))
}
