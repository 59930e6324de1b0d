//! 8-bit single-channel PNG label maps: pixel value is the class id, 255 is ignore.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use anyhow::{bail, Context, Result};

/// Row-major labels with their size.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u8>,
}

pub fn write_label_png(path: &Path, map: &LabelMap) -> Result<()> {
    if map.labels.len() != map.height * map.width {
        bail!("label map {}x{} holds {} values", map.height, map.width, map.labels.len());
    }
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), map.width as u32, map.height as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let mut w = enc.write_header()?;
    w.write_image_data(&map.labels)?;
    w.finish()?;
    Ok(())
}

pub fn read_label_png(path: &Path) -> Result<LabelMap> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut dec = png::Decoder::new(std::io::BufReader::new(file));
    dec.set_transformations(png::Transformations::IDENTITY);
    let mut reader = dec.read_info().with_context(|| format!("decoding {}", path.display()))?;
    let info = reader.info();
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Eight {
        bail!(
            "{}: label PNGs must be 8-bit grayscale, found {:?} {:?}",
            path.display(),
            info.color_type,
            info.bit_depth
        );
    }
    let (width, height) = (info.width as usize, info.height as usize);
    let mut buf = vec![0; reader.output_buffer_size().context("PNG too large")?];
    let frame = reader.next_frame(&mut buf)?;
    buf.truncate(frame.buffer_size());
    if frame.line_size != width {
        bail!("{}: unexpected row stride {}", path.display(), frame.line_size);
    }
    Ok(LabelMap { height, width, labels: buf })
}
