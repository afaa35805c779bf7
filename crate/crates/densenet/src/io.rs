//! Patch datasets on disk: a CSV manifest with header `id,label` next to a
//! directory of 8-bit RGB PNGs named `<id>.png`.

use std::collections::HashSet;
use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use densenet_core::data::{Dataset, Sample};
use densenet_core::Tensor;
use image::{DynamicImage, ImageFormat, RgbImage};

use crate::error::{io_err, Error, Result};

/// Reads an 8-bit RGB PNG as a 3×H×W tensor scaled to [0,1].
pub fn read_png(path: &Path) -> Result<Tensor> {
    let file = File::open(path).map_err(io_err(path))?;
    let img = image::load(BufReader::new(file), ImageFormat::Png).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let rgb = match img {
        DynamicImage::ImageRgb8(rgb) => rgb,
        other => {
            return Err(Error::Image {
                path: path.to_path_buf(),
                reason: format!("expected 8-bit RGB, found {:?}", other.color()),
            })
        }
    };
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let raw = rgb.as_raw();
    Ok(Tensor::from_fn([3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        raw[p * 3 + c] as f64 / 255.0
    }))
}

/// Writes a 3×H×W tensor with values in [0,1] as an 8-bit RGB PNG.
pub fn write_png(path: &Path, image: &Tensor) -> Result<()> {
    let &[3, h, w] = image.shape() else {
        return Err(Error::Image {
            path: path.to_path_buf(),
            reason: format!("expected a 3×H×W tensor, found {:?}", image.shape()),
        });
    };
    let d = image.data();
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let p = y as usize * w + x as usize;
        image::Rgb([0, 1, 2].map(|c| (d[c * h * w + p].clamp(0.0, 1.0) * 255.0).round() as u8))
    });
    img.save_with_format(path, ImageFormat::Png).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Writes a labels manifest.
pub fn write_manifest<'a>(path: &Path, rows: impl IntoIterator<Item = (&'a str, u8)>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    w.write_record(["id", "label"]).map_err(|e| csv_io(path, e))?;
    for (id, label) in rows {
        w.write_record([id, &label.to_string()]).map_err(|e| csv_io(path, e))?;
    }
    w.flush().map_err(io_err(path))
}

/// Loads every manifest row in order. Rows are numbered from 1, not
/// counting the header.
pub fn load_dataset(image_dir: &Path, manifest: &Path) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(manifest)
        .map_err(|e| csv_io(manifest, e))?;
    let header = reader.headers().map_err(|e| csv_io(manifest, e))?;
    if header.iter().collect::<Vec<_>>() != ["id", "label"] {
        return Err(Error::ManifestHeader {
            path: manifest.to_path_buf(),
            found: header.iter().collect::<Vec<_>>().join(","),
        });
    }

    let mut samples = Vec::new();
    let mut seen = HashSet::new();
    let mut shape: Option<Vec<usize>> = None;
    for (i, record) in reader.records().enumerate() {
        let row = i as u64 + 1;
        let bad = |reason: String| Error::Manifest {
            path: manifest.to_path_buf(),
            row,
            reason,
        };
        let record = record.map_err(|e| bad(e.to_string()))?;
        let (id, label) = (&record[0], &record[1]);
        if id.is_empty() || id.contains(['/', '\\']) || id == "." || id == ".." {
            return Err(bad(format!("invalid id `{id}`")));
        }
        if !seen.insert(id.to_string()) {
            return Err(bad(format!("duplicate id `{id}`")));
        }
        let label = match label {
            "0" => 0,
            "1" => 1,
            other => return Err(bad(format!("label must be 0 or 1, found `{other}`"))),
        };
        let path = image_dir.join(format!("{id}.png"));
        if !path.is_file() {
            return Err(bad(format!("missing image {}", path.display())));
        }
        let image = read_png(&path).map_err(|e| bad(e.to_string()))?;
        match &shape {
            Some(s) if s != image.shape() => {
                return Err(bad(format!("image shape {:?} differs from earlier rows {:?}", image.shape(), s)));
            }
            Some(_) => {}
            None => shape = Some(image.shape().to_vec()),
        }
        samples.push(Sample {
            id: id.to_string(),
            image,
            label,
        });
    }
    Ok(Dataset::new(samples, Some(manifest.display().to_string()))?)
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e.into(),
    }
}
