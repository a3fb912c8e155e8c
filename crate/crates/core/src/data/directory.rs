//! Dataset ingestion and export: PNG class folders and a single binary record
//! file with an explicit header.
//!
//! Binary record layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  b"NGDSET01"
//! u32      num_classes
//! u32 x4   n, channels, height, width
//! u32 x3   split lengths: train, test, defender
//! u32 x *  split indices, concatenated in that order
//! u32 x n  labels
//! f32 x *  image data, n * channels * height * width values
//! ```

use ndarray::Array4;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use super::{DatasetHandle, DatasetSource, Normalization, Splits};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DirectoryLayout {
    /// `<root>/<class_name>/*.png`, split assignment derived deterministically.
    ClassFolders,
    /// One binary record file carrying data, labels and splits.
    BinaryRecord,
}

const MAGIC: &[u8; 8] = b"NGDSET01";

fn ingest_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Ingestion { path: path.to_path_buf(), msg: msg.into() }
}

/// Load a dataset from disk. For class folders, samples are ordered by
/// (class, file name) and split 70/15/15 per class deterministically.
pub fn load_directory_dataset(path: &Path, layout: DirectoryLayout) -> Result<DatasetHandle> {
    match layout {
        DirectoryLayout::ClassFolders => load_class_folders(path),
        DirectoryLayout::BinaryRecord => load_binary_record(path),
    }
}

fn load_class_folders(root: &Path) -> Result<DatasetHandle> {
    if !root.is_dir() {
        return Err(ingest_err(root, "not a directory"));
    }
    let mut class_dirs: Vec<PathBuf> = fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    class_dirs.sort();
    if class_dirs.is_empty() {
        return Err(ingest_err(root, "no class subdirectories"));
    }

    let mut files_per_class: Vec<Vec<PathBuf>> = Vec::new();
    for dir in &class_dirs {
        let mut files: Vec<PathBuf> = fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().map(|e| e == "png").unwrap_or(false))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(ingest_err(dir, "class folder holds no PNG files"));
        }
        files_per_class.push(files);
    }

    let first = image::open(&files_per_class[0][0])
        .map_err(|e| ingest_err(&files_per_class[0][0], e.to_string()))?
        .to_rgb8();
    let (w, h) = (first.width() as usize, first.height() as usize);
    let channels = 3;
    let n: usize = files_per_class.iter().map(|f| f.len()).sum();

    let mut images = Array4::zeros((n, channels, h, w));
    let mut labels = vec![0usize; n];
    let mut splits = Splits { train: vec![], test: vec![], defender: vec![] };
    let mut idx = 0;
    for (class, files) in files_per_class.iter().enumerate() {
        let m = files.len();
        // Deterministic per-class 70/15/15 assignment by position.
        let train_end = (m as f32 * 0.70).round() as usize;
        let test_end = train_end + (m as f32 * 0.15).round() as usize;
        for (pos, file) in files.iter().enumerate() {
            let img = image::open(file).map_err(|e| ingest_err(file, e.to_string()))?.to_rgb8();
            if img.width() as usize != w || img.height() as usize != h {
                return Err(ingest_err(file, format!("expected {w}x{h} image")));
            }
            for i in 0..h {
                for j in 0..w {
                    let p = img.get_pixel(j as u32, i as u32);
                    for c in 0..channels {
                        images[[idx, c, i, j]] = p.0[c] as f32 / 255.0;
                    }
                }
            }
            labels[idx] = class;
            if pos < train_end {
                splits.train.push(idx);
            } else if pos < test_end {
                splits.test.push(idx);
            } else {
                splits.defender.push(idx);
            }
            idx += 1;
        }
    }

    let handle = DatasetHandle {
        images,
        labels,
        num_classes: class_dirs.len(),
        image_shape: (channels, h, w),
        splits,
        source: DatasetSource::Directory {
            path: root.to_path_buf(),
            layout: DirectoryLayout::ClassFolders,
        },
        seed: 0,
        normalization: Normalization::identity(channels),
    };
    handle.validate()?;
    Ok(handle)
}

fn load_binary_record(path: &Path) -> Result<DatasetHandle> {
    let mut file = fs::File::open(path).map_err(|e| ingest_err(path, e.to_string()))?;
    let mut buf = Vec::new();
    file.read_to_end(&mut buf).map_err(|e| ingest_err(path, e.to_string()))?;
    let mut off = 0usize;
    let take = |buf: &[u8], off: &mut usize, n: usize| -> Result<Vec<u8>> {
        if *off + n > buf.len() {
            return Err(ingest_err(path, "truncated record"));
        }
        let out = buf[*off..*off + n].to_vec();
        *off += n;
        Ok(out)
    };
    let read_u32 = |buf: &[u8], off: &mut usize| -> Result<u32> {
        let b = take(buf, off, 4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    };

    let magic = take(&buf, &mut off, 8)?;
    if magic != MAGIC {
        return Err(ingest_err(path, "bad magic"));
    }
    let num_classes = read_u32(&buf, &mut off)? as usize;
    let n = read_u32(&buf, &mut off)? as usize;
    let c = read_u32(&buf, &mut off)? as usize;
    let h = read_u32(&buf, &mut off)? as usize;
    let w = read_u32(&buf, &mut off)? as usize;
    let read_split = |buf: &[u8], off: &mut usize| -> Result<Vec<usize>> {
        let len = read_u32(buf, off)? as usize;
        let mut v = Vec::with_capacity(len);
        for _ in 0..len {
            v.push(read_u32(buf, off)? as usize);
        }
        Ok(v)
    };
    let train = read_split(&buf, &mut off)?;
    let test = read_split(&buf, &mut off)?;
    let defender = read_split(&buf, &mut off)?;
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        labels.push(read_u32(&buf, &mut off)? as usize);
    }
    let data_len = n * c * h * w;
    let bytes = take(&buf, &mut off, data_len * 4)?;
    let mut flat = Vec::with_capacity(data_len);
    for chunk in bytes.chunks_exact(4) {
        flat.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
    }
    let images = Array4::from_shape_vec((n, c, h, w), flat)
        .map_err(|e| ingest_err(path, e.to_string()))?;

    let handle = DatasetHandle {
        images,
        labels,
        num_classes,
        image_shape: (c, h, w),
        splits: Splits { train, test, defender },
        source: DatasetSource::Directory {
            path: path.to_path_buf(),
            layout: DirectoryLayout::BinaryRecord,
        },
        seed: 0,
        normalization: Normalization::identity(c),
    };
    handle.validate()?;
    Ok(handle)
}

/// Export a dataset. Class folders write 8-bit PNGs named by global sample
/// index; the binary record preserves splits and float data exactly.
pub fn export_dataset(handle: &DatasetHandle, path: &Path, layout: DirectoryLayout) -> Result<()> {
    match layout {
        DirectoryLayout::ClassFolders => export_class_folders(handle, path),
        DirectoryLayout::BinaryRecord => export_binary_record(handle, path),
    }
}

fn export_class_folders(handle: &DatasetHandle, root: &Path) -> Result<()> {
    let (c, h, w) = handle.image_shape;
    if c != 3 {
        return Err(Error::Input("PNG export requires 3-channel images".into()));
    }
    for class in 0..handle.num_classes {
        fs::create_dir_all(root.join(format!("class_{class:03}")))?;
    }
    for idx in 0..handle.len() {
        let class = handle.labels[idx];
        let mut img = image::RgbImage::new(w as u32, h as u32);
        for i in 0..h {
            for j in 0..w {
                let px = [
                    (handle.images[[idx, 0, i, j]].clamp(0.0, 1.0) * 255.0).round() as u8,
                    (handle.images[[idx, 1, i, j]].clamp(0.0, 1.0) * 255.0).round() as u8,
                    (handle.images[[idx, 2, i, j]].clamp(0.0, 1.0) * 255.0).round() as u8,
                ];
                img.put_pixel(j as u32, i as u32, image::Rgb(px));
            }
        }
        let file = root.join(format!("class_{class:03}/img_{idx:06}.png"));
        img.save(&file).map_err(|e| ingest_err(&file, e.to_string()))?;
    }
    Ok(())
}

fn export_binary_record(handle: &DatasetHandle, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(MAGIC)?;
        let (c, h, w) = handle.image_shape;
        for v in [handle.num_classes, handle.len(), c, h, w] {
            f.write_all(&(v as u32).to_le_bytes())?;
        }
        for split in [&handle.splits.train, &handle.splits.test, &handle.splits.defender] {
            f.write_all(&(split.len() as u32).to_le_bytes())?;
            for &i in split.iter() {
                f.write_all(&(i as u32).to_le_bytes())?;
            }
        }
        for &l in &handle.labels {
            f.write_all(&(l as u32).to_le_bytes())?;
        }
        let mut bytes = Vec::with_capacity(handle.images.len() * 4);
        for &v in handle.images.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}
