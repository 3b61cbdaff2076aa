//! IDX containers, plain or gzipped.
//!
//! Reads unsigned-byte images (`0x00000803`, scaled to `[0, 1]`), unsigned-byte
//! labels (`0x00000801`) and float64 frame matrices (`0x00000E02`). Writes the
//! last two.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use crate::error::{Error, Result};
use crate::tensor::DenseVector;

use super::{FrameDataset, Ordering};

const IMAGES_U8: u32 = 0x0000_0803;
const LABELS_U8: u32 = 0x0000_0801;
const FRAMES_F64: u32 = 0x0000_0E02;

fn malformed(detail: String) -> Error {
    Error::Format {
        what: "IDX file",
        detail,
    }
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    File::open(path)?.read_to_end(&mut raw)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| malformed(format!("{}: bad gzip stream: {e}", path.display())))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn header(bytes: &[u8], n_words: usize) -> Result<Vec<u32>> {
    if bytes.len() < 4 * n_words {
        return Err(malformed(format!("header needs {} bytes, file has {}", 4 * n_words, bytes.len())));
    }
    Ok(bytes[..4 * n_words]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes(c.try_into().expect("4-byte chunk")))
        .collect())
}

fn payload(bytes: &[u8], offset: usize, len: usize) -> Result<&[u8]> {
    let have = bytes.len() - offset;
    if have != len {
        return Err(malformed(format!("payload is {have} bytes, header promises {len}")));
    }
    Ok(&bytes[offset..])
}

/// Image frames from an IDX file.
pub fn read_idx_images(path: &Path) -> Result<Vec<DenseVector>> {
    let bytes = read_maybe_gz(path)?;
    let magic = header(&bytes, 1)?[0];
    match magic {
        IMAGES_U8 => {
            let h = header(&bytes, 4)?;
            let (n, width) = (h[1] as usize, h[2] as usize * h[3] as usize);
            let data = payload(&bytes, 16, n * width)?;
            if width == 0 {
                return Err(malformed("zero-sized images".into()));
            }
            Ok(data
                .chunks_exact(width)
                .map(|px| px.iter().map(|p| *p as f64 / 255.0).collect::<Vec<_>>().into())
                .collect())
        }
        FRAMES_F64 => {
            let h = header(&bytes, 3)?;
            let (n, width) = (h[1] as usize, h[2] as usize);
            if width == 0 {
                return Err(malformed("zero-width frames".into()));
            }
            let data = payload(&bytes, 12, n * width * 8)?;
            Ok(data
                .chunks_exact(width * 8)
                .map(|row| {
                    row.chunks_exact(8)
                        .map(|c| f64::from_be_bytes(c.try_into().expect("8-byte chunk")))
                        .collect::<Vec<_>>()
                        .into()
                })
                .collect())
        }
        m => Err(malformed(format!("{}: unexpected image magic {m:#010x}", path.display()))),
    }
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes = read_maybe_gz(path)?;
    let h = header(&bytes, 2)?;
    if h[0] != LABELS_U8 {
        return Err(malformed(format!("{}: unexpected label magic {:#010x}", path.display(), h[0])));
    }
    Ok(payload(&bytes, 8, h[1] as usize)?.to_vec())
}

/// Images and labels as one dataset in file order.
pub fn load_idx(images: &Path, labels: &Path) -> Result<FrameDataset> {
    let frames = read_idx_images(images)?;
    let labels = read_idx_labels(labels)?;
    if frames.len() != labels.len() {
        return Err(malformed(format!(
            "{} images but {} labels",
            frames.len(),
            labels.len()
        )));
    }
    if frames.is_empty() {
        return Err(malformed("dataset is empty".into()));
    }
    FrameDataset::new(frames, Some(labels), Ordering::Original)
}

fn create(path: &Path) -> Result<Box<dyn Write>> {
    let file = BufWriter::new(File::create(path)?);
    if path.extension().is_some_and(|e| e == "gz") {
        Ok(Box::new(GzEncoder::new(file, Compression::default())))
    } else {
        Ok(Box::new(file))
    }
}

/// Writes frames as float64 IDX, labels (if any) as ubyte IDX, and
/// `sidecar` as pretty JSON. Paths ending in `.gz` are compressed.
pub fn write_idx(
    ds: &FrameDataset,
    frames_path: &Path,
    labels_path: Option<&Path>,
    sidecar: Option<(&Path, &serde_json::Value)>,
) -> Result<()> {
    let mut w = create(frames_path)?;
    w.write_all(&FRAMES_F64.to_be_bytes())?;
    w.write_all(&(ds.len() as u32).to_be_bytes())?;
    w.write_all(&(ds.width() as u32).to_be_bytes())?;
    for f in ds.frames() {
        for v in f.iter() {
            w.write_all(&v.to_be_bytes())?;
        }
    }
    w.flush()?;
    drop(w);
    if let (Some(path), Some(labels)) = (labels_path, ds.labels()) {
        let mut w = create(path)?;
        w.write_all(&LABELS_U8.to_be_bytes())?;
        w.write_all(&(labels.len() as u32).to_be_bytes())?;
        w.write_all(labels)?;
        w.flush()?;
    }
    if let Some((path, meta)) = sidecar {
        serde_json::to_writer_pretty(BufWriter::new(File::create(path)?), meta)?;
    }
    Ok(())
}
