//! PNG codec and paired low/normal-light directory ingestion.

use std::collections::BTreeSet;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use image::{ColorType, ExtendedColorType, ImageFormat, ImageReader};
use rayon::prelude::*;

use crate::tensor::{Shape, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: unsupported image ({detail}); only 8-bit grayscale or RGB PNG is accepted")]
    Unsupported { path: PathBuf, detail: String },
    #[error("{path}: cannot decode image: {detail}")]
    Decode { path: PathBuf, detail: String },
    #[error("{path}: cannot encode image: {detail}")]
    Encode { path: PathBuf, detail: String },
    #[error("expected a [1, H, W, 3] image tensor, got {0}")]
    TensorShape(Shape),
    #[error("pair `{name}`: low image is {low_h}x{low_w} but reference is {ref_h}x{ref_w}")]
    PairDimensions {
        name: String,
        low_h: usize,
        low_w: usize,
        ref_h: usize,
        ref_w: usize,
    },
    #[error("no matching file names between {low} and {reference}")]
    NoPairs { low: PathBuf, reference: PathBuf },
}

/// A low-light image and its reference, both `[1, H, W, 3]` in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePair {
    pub name: String,
    pub low: Tensor,
    pub reference: Tensor,
}

/// File locations of one matched pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairEntry {
    pub name: String,
    pub low: PathBuf,
    pub reference: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairScan {
    pub pairs: Vec<PairEntry>,
    /// One message per file present in only one directory.
    pub warnings: Vec<String>,
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_owned(),
        source,
    }
}

/// Reads an 8-bit grayscale or RGB PNG as `[1, H, W, 3]` scaled by 1/255.
/// Grayscale is replicated to three channels; an alpha channel is dropped.
pub fn load_image(path: &Path) -> Result<Tensor, DataError> {
    let reader = ImageReader::open(path)
        .map_err(io_err(path))?
        .with_guessed_format()
        .map_err(io_err(path))?;
    match reader.format() {
        Some(ImageFormat::Png) => {}
        Some(f) => {
            return Err(DataError::Unsupported {
                path: path.into(),
                detail: format!("{f:?} format"),
            })
        }
        None => {
            return Err(DataError::Unsupported {
                path: path.into(),
                detail: "unrecognized format".into(),
            })
        }
    }
    let img = reader.decode().map_err(|e| match e {
        image::ImageError::Unsupported(u) => DataError::Unsupported {
            path: path.into(),
            detail: u.to_string(),
        },
        other => DataError::Decode {
            path: path.into(),
            detail: other.to_string(),
        },
    })?;
    let color = img.color();
    let rgb = match color {
        ColorType::L8 | ColorType::Rgb8 => img.to_rgb8(),
        ColorType::La8 | ColorType::Rgba8 => {
            log::warn!("{}: ignoring alpha channel", path.display());
            img.to_rgb8()
        }
        other => {
            return Err(DataError::Unsupported {
                path: path.into(),
                detail: format!("{other:?} pixels"),
            })
        }
    };
    let (w, h) = rgb.dimensions();
    let data = rgb.into_raw().into_iter().map(|b| b as f64 / 255.0).collect();
    Ok(Tensor::new(Shape::new(1, h as usize, w as usize, 3), data).expect("RGB buffer matches its dimensions"))
}

/// Round to nearest with ties away from zero after clamping to `[0, 1]`.
/// Returns the byte and whether clamping was needed.
pub fn quantize(v: f64) -> (u8, bool) {
    if v.is_nan() {
        return (0, true);
    }
    let c = v.clamp(0.0, 1.0);
    ((c * 255.0).round() as u8, c != v)
}

/// Writes a `[1, H, W, 3]` tensor as an 8-bit RGB PNG. Values outside
/// `[0, 1]` are clamped and reported once as a warning.
pub fn save_image(t: &Tensor, path: &Path) -> Result<(), DataError> {
    let s = t.shape();
    if s.n != 1 || s.c != 3 || s.h == 0 || s.w == 0 {
        return Err(DataError::TensorShape(s));
    }
    let mut clamped = 0usize;
    let bytes: Vec<u8> = t
        .data()
        .iter()
        .map(|&v| {
            let (b, c) = quantize(v);
            clamped += c as usize;
            b
        })
        .collect();
    if clamped > 0 {
        log::warn!("{}: clamped {clamped} out-of-range values", path.display());
    }
    image::save_buffer_with_format(path, &bytes, s.w as u32, s.h as u32, ExtendedColorType::Rgb8, ImageFormat::Png)
        .map_err(|e| match e {
            image::ImageError::IoError(source) => DataError::Io {
                path: path.into(),
                source,
            },
            other => DataError::Encode {
                path: path.into(),
                detail: other.to_string(),
            },
        })
}

/// Sorted names of the `.png` files directly inside `dir`.
pub fn list_pngs(dir: &Path) -> Result<BTreeSet<String>, DataError> {
    let mut out = BTreeSet::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let entry = entry.map_err(io_err(dir))?;
        let path = entry.path();
        let is_png = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if is_png && path.is_file() {
            if let Some(name) = path.file_name().and_then(|n| n.to_str()) {
                out.insert(name.to_owned());
            }
        }
    }
    Ok(out)
}

/// Matches PNGs by identical file name, in byte-wise lexicographic order.
pub fn scan_pairs(low_dir: &Path, ref_dir: &Path) -> Result<PairScan, DataError> {
    let low = list_pngs(low_dir)?;
    let refs = list_pngs(ref_dir)?;
    let mut warnings = Vec::new();
    for name in low.difference(&refs) {
        warnings.push(format!("{name}: no reference image in {}", ref_dir.display()));
    }
    for name in refs.difference(&low) {
        warnings.push(format!("{name}: no low-light image in {}", low_dir.display()));
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    let pairs: Vec<PairEntry> = low
        .intersection(&refs)
        .map(|name| PairEntry {
            name: name.clone(),
            low: low_dir.join(name),
            reference: ref_dir.join(name),
        })
        .collect();
    if pairs.is_empty() {
        return Err(DataError::NoPairs {
            low: low_dir.into(),
            reference: ref_dir.into(),
        });
    }
    Ok(PairScan { pairs, warnings })
}

/// Decodes one pair, rejecting mismatched dimensions.
pub fn load_pair(entry: &PairEntry) -> Result<ImagePair, DataError> {
    let low = load_image(&entry.low)?;
    let reference = load_image(&entry.reference)?;
    let (a, b) = (low.shape(), reference.shape());
    if (a.h, a.w) != (b.h, b.w) {
        return Err(DataError::PairDimensions {
            name: entry.name.clone(),
            low_h: a.h,
            low_w: a.w,
            ref_h: b.h,
            ref_w: b.w,
        });
    }
    Ok(ImagePair {
        name: entry.name.clone(),
        low,
        reference,
    })
}

/// Loads every pair in parallel, keeping scan order. Failed pairs are
/// returned separately.
pub fn load_pairs(entries: &[PairEntry]) -> (Vec<ImagePair>, Vec<DataError>) {
    let results: Vec<Result<ImagePair, DataError>> = entries.par_iter().map(load_pair).collect();
    let mut ok = Vec::new();
    let mut bad = Vec::new();
    for r in results {
        match r {
            Ok(p) => ok.push(p),
            Err(e) => {
                log::warn!("skipping pair: {e}");
                bad.push(e);
            }
        }
    }
    (ok, bad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};

    #[test]
    fn loads_rgb_scaled() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        RgbImage::from_pixel(1, 1, Rgb([255, 0, 128])).save(&p).unwrap();
        let t = load_image(&p).unwrap();
        assert_eq!(t.shape(), Shape::new(1, 1, 1, 3));
        assert_eq!(t.data(), &[1.0, 0.0, 128.0 / 255.0]);
    }

    #[test]
    fn grayscale_is_replicated() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.png");
        GrayImage::from_pixel(2, 1, Luma([51])).save(&p).unwrap();
        let t = load_image(&p).unwrap();
        assert_eq!(t.data(), &[0.2; 6]);
    }

    #[test]
    fn sixteen_bit_and_truncated_files_fail_differently() {
        let dir = tempfile::tempdir().unwrap();
        let p16 = dir.path().join("deep.png");
        ImageBuffer::<Rgb<u16>, _>::from_pixel(2, 2, Rgb([1000u16, 2, 3])).save(&p16).unwrap();
        assert!(matches!(load_image(&p16), Err(DataError::Unsupported { .. })));

        let good = dir.path().join("good.png");
        RgbImage::from_pixel(16, 16, Rgb([9, 8, 7])).save(&good).unwrap();
        let bytes = fs::read(&good).unwrap();
        let cut = dir.path().join("cut.png");
        fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_image(&cut), Err(DataError::Decode { .. })));
        assert!(matches!(load_image(&dir.path().join("missing.png")), Err(DataError::Io { .. })));
    }

    #[test]
    fn quantization_rules() {
        assert_eq!(quantize(0.5), (128, false));
        assert_eq!(quantize(1.0), (255, false));
        assert_eq!(quantize(0.0), (0, false));
        assert_eq!(quantize(1.7), (255, true));
        assert_eq!(quantize(-0.2), (0, true));
    }

    #[test]
    fn save_load_round_trips_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.png");
        let t = Tensor::from_fn(Shape::new(1, 5, 7, 3), |_, y, x, c| ((y * 37 + x * 11 + c * 101) % 256) as f64 / 255.0);
        save_image(&t, &p).unwrap();
        assert_eq!(load_image(&p).unwrap(), t);
        let over = t.map(|v| v * 3.0 - 1.0);
        save_image(&over, &p).unwrap();
        assert!(load_image(&p).unwrap().data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(save_image(&Tensor::zeros(Shape::new(2, 1, 1, 3)), &p).is_err());
    }

    #[test]
    fn scan_matches_names_and_warns() {
        let dir = tempfile::tempdir().unwrap();
        let (low, high) = (dir.path().join("low"), dir.path().join("high"));
        fs::create_dir_all(&low).unwrap();
        fs::create_dir_all(&high).unwrap();
        let px = RgbImage::from_pixel(2, 2, Rgb([1, 2, 3]));
        px.save(low.join("b.png")).unwrap();
        px.save(low.join("a.png")).unwrap();
        px.save(high.join("a.png")).unwrap();
        fs::write(low.join("notes.txt"), "x").unwrap();
        let scan = scan_pairs(&low, &high).unwrap();
        assert_eq!(scan.pairs.len(), 1);
        assert_eq!(scan.pairs[0].name, "a.png");
        assert_eq!(scan.warnings.len(), 1);
        assert!(scan.warnings[0].starts_with("b.png"));

        fs::remove_file(high.join("a.png")).unwrap();
        assert!(matches!(scan_pairs(&low, &high), Err(DataError::NoPairs { .. })));
    }

    #[test]
    fn mismatched_pair_is_rejected_by_name() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("l.png");
        let b = dir.path().join("r.png");
        RgbImage::new(4, 4).save(&a).unwrap();
        RgbImage::new(4, 6).save(&b).unwrap();
        let entry = PairEntry {
            name: "x.png".into(),
            low: a,
            reference: b,
        };
        let (ok, bad) = load_pairs(&[entry]);
        assert!(ok.is_empty());
        assert!(bad[0].to_string().contains("x.png"));
    }
}
