//! Netpbm-family image files and the on-disk sample layout.
//!
//! Depth is grayscale PFM (`Pf`, rows stored bottom to top, negative scale
//! meaning little-endian); a non-positive or non-finite value marks an
//! invalid pixel. Colour is binary PPM (`P6`, 8-bit), masks binary PGM
//! (`P5`, 0 or 255). A sample `<id>` in a directory consists of
//! `<id>_rgb.ppm`, `<id>_gt.pfm`, `<id>_gt_mask.pgm` and optionally
//! `<id>_x.pfm` with `<id>_x_mask.pgm`. When a mask file is present it
//! decides validity, so a valid depth of exactly 0 survives a round trip.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::field::{DepthField, RgbField};

/// Value written for invalid pixels in PFM files.
pub const PFM_INVALID: f32 = -1.0;

struct Header {
    magic: [u8; 2],
    fields: Vec<String>,
    data_start: usize,
}

/// Reads the magic and `count` whitespace-separated header fields (with
/// `#` comments), then skips the single whitespace byte before the payload.
fn parse_header(bytes: &[u8], count: usize, path: &Path) -> Result<Header> {
    if bytes.len() < 2 {
        return Err(Error::format(path, "file too short for a header"));
    }
    let magic = [bytes[0], bytes[1]];
    let mut pos = 2;
    let mut fields = Vec::with_capacity(count);
    while fields.len() < count {
        match bytes.get(pos) {
            None => return Err(Error::format(path, "truncated header")),
            Some(b'#') => {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            }
            Some(c) if c.is_ascii_whitespace() => pos += 1,
            Some(_) => {
                let start = pos;
                while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                    pos += 1;
                }
                fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
            }
        }
    }
    match bytes.get(pos) {
        Some(c) if c.is_ascii_whitespace() => pos += 1,
        _ => {
            return Err(Error::format(
                path,
                "header must end with one whitespace byte",
            ))
        }
    }
    Ok(Header {
        magic,
        fields,
        data_start: pos,
    })
}

fn parse_dim(s: &str, what: &str, path: &Path) -> Result<usize> {
    match s.parse::<usize>() {
        Ok(v) if v > 0 => Ok(v),
        _ => Err(Error::format(path, format!("bad {what} {s:?}"))),
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn payload<'a>(bytes: &'a [u8], h: &Header, len: usize, path: &Path) -> Result<&'a [u8]> {
    let data = &bytes[h.data_start..];
    if data.len() < len {
        return Err(Error::format(
            path,
            format!("truncated payload: {} of {len} bytes", data.len()),
        ));
    }
    Ok(&data[..len])
}

/// Raw PFM values in top-to-bottom row order, with the dimensions.
pub fn read_pfm(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<f32>)> {
    let path = path.as_ref();
    let bytes = read(path)?;
    let h = parse_header(&bytes, 3, path)?;
    if &h.magic != b"Pf" {
        return Err(Error::format(path, "not a grayscale PFM (expected \"Pf\")"));
    }
    let width = parse_dim(&h.fields[0], "width", path)?;
    let height = parse_dim(&h.fields[1], "height", path)?;
    let scale: f32 = h.fields[2]
        .parse()
        .map_err(|_| Error::format(path, format!("bad scale {:?}", h.fields[2])))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(Error::format(path, "scale must be finite and non-zero"));
    }
    let data = payload(&bytes, &h, width * height * 4, path)?;
    let mut values = vec![0f32; width * height];
    for (k, c) in data.chunks_exact(4).enumerate() {
        let b: [u8; 4] = c.try_into().expect("4 bytes");
        let v = if scale < 0.0 {
            f32::from_le_bytes(b)
        } else {
            f32::from_be_bytes(b)
        };
        let (row, col) = (k / width, k % width);
        values[(height - 1 - row) * width + col] = v;
    }
    Ok((height, width, values))
}

/// Writes top-to-bottom `values` as a little-endian PFM.
pub fn write_pfm(
    path: impl AsRef<Path>,
    height: usize,
    width: usize,
    values: &[f32],
) -> Result<()> {
    assert_eq!(values.len(), height * width);
    let mut out = format!("Pf\n{width} {height}\n-1.0\n").into_bytes();
    for row in (0..height).rev() {
        for &v in &values[row * width..(row + 1) * width] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    write(path.as_ref(), &out)
}

/// Depth from a PFM; pixels with non-positive or non-finite values are
/// invalid.
pub fn read_depth(path: impl AsRef<Path>) -> Result<DepthField<f64>> {
    let (h, w, raw) = read_pfm(path)?;
    let valid: Vec<bool> = raw.iter().map(|v| v.is_finite() && *v > 0.0).collect();
    let values = raw
        .iter()
        .zip(&valid)
        .map(|(&v, &ok)| if ok { v as f64 } else { 0.0 })
        .collect();
    DepthField::new(h, w, values, valid)
}

/// Depth from a PFM with validity taken from a PGM mask.
pub fn read_depth_masked(pfm: impl AsRef<Path>, mask: impl AsRef<Path>) -> Result<DepthField<f64>> {
    let pfm = pfm.as_ref();
    let (h, w, raw) = read_pfm(pfm)?;
    let (mh, mw, valid) = read_mask(mask.as_ref())?;
    if (mh, mw) != (h, w) {
        return Err(Error::format(
            mask.as_ref(),
            format!("mask is {mh}x{mw}, depth is {h}x{w}"),
        ));
    }
    let mut values = Vec::with_capacity(h * w);
    for (&v, &ok) in raw.iter().zip(&valid) {
        if ok && !(v.is_finite() && v >= 0.0) {
            return Err(Error::format(pfm, format!("valid pixel holds {v}")));
        }
        values.push(if ok { v as f64 } else { 0.0 });
    }
    DepthField::new(h, w, values, valid)
}

pub fn write_depth(path: impl AsRef<Path>, z: &DepthField<f64>) -> Result<()> {
    let values: Vec<f32> = z
        .values()
        .iter()
        .zip(z.valid())
        .map(|(&v, &ok)| if ok { v as f32 } else { PFM_INVALID })
        .collect();
    write_pfm(path, z.height(), z.width(), &values)
}

/// 8-bit binary PPM mapped to [0, 1].
pub fn read_rgb(path: impl AsRef<Path>) -> Result<RgbField<f64>> {
    let path = path.as_ref();
    let bytes = read(path)?;
    let h = parse_header(&bytes, 3, path)?;
    if &h.magic != b"P6" {
        return Err(Error::format(path, "not a binary PPM (expected \"P6\")"));
    }
    let width = parse_dim(&h.fields[0], "width", path)?;
    let height = parse_dim(&h.fields[1], "height", path)?;
    let maxval = parse_dim(&h.fields[2], "maxval", path)?;
    if maxval > 255 {
        return Err(Error::format(
            path,
            format!("only 8-bit PPM is supported, maxval {maxval}"),
        ));
    }
    let data = payload(&bytes, &h, width * height * 3, path)?;
    let scale = 1.0 / maxval as f64;
    RgbField::new(
        height,
        width,
        data.iter().map(|&b| (b as f64 * scale).min(1.0)).collect(),
    )
}

pub fn write_rgb(path: impl AsRef<Path>, rgb: &RgbField<f64>) -> Result<()> {
    let mut out = format!("P6\n{} {}\n255\n", rgb.width(), rgb.height()).into_bytes();
    out.extend(
        rgb.data()
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    write(path.as_ref(), &out)
}

/// Binary PGM mask; any non-zero sample is valid.
pub fn read_mask(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<bool>)> {
    let path = path.as_ref();
    let bytes = read(path)?;
    let h = parse_header(&bytes, 3, path)?;
    if &h.magic != b"P5" {
        return Err(Error::format(path, "not a binary PGM (expected \"P5\")"));
    }
    let width = parse_dim(&h.fields[0], "width", path)?;
    let height = parse_dim(&h.fields[1], "height", path)?;
    let maxval = parse_dim(&h.fields[2], "maxval", path)?;
    if maxval > 255 {
        return Err(Error::format(
            path,
            format!("only 8-bit PGM is supported, maxval {maxval}"),
        ));
    }
    let data = payload(&bytes, &h, width * height, path)?;
    Ok((height, width, data.iter().map(|&b| b != 0).collect()))
}

pub fn write_mask(
    path: impl AsRef<Path>,
    height: usize,
    width: usize,
    valid: &[bool],
) -> Result<()> {
    assert_eq!(valid.len(), height * width);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(valid.iter().map(|&v| if v { 255u8 } else { 0 }));
    write(path.as_ref(), &out)
}

/// Files of one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub rgb: RgbField<f64>,
    pub gt: DepthField<f64>,
    pub x: Option<DepthField<f64>>,
}

pub fn sample_path(dir: &Path, id: &str, suffix: &str) -> PathBuf {
    dir.join(format!("{id}_{suffix}"))
}

pub fn write_sample(
    dir: &Path,
    id: &str,
    rgb: &RgbField<f64>,
    gt: &DepthField<f64>,
    x: Option<&DepthField<f64>>,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_rgb(sample_path(dir, id, "rgb.ppm"), rgb)?;
    write_depth(sample_path(dir, id, "gt.pfm"), gt)?;
    write_mask(
        sample_path(dir, id, "gt_mask.pgm"),
        gt.height(),
        gt.width(),
        gt.valid(),
    )?;
    if let Some(x) = x {
        write_depth(sample_path(dir, id, "x.pfm"), x)?;
        write_mask(
            sample_path(dir, id, "x_mask.pgm"),
            x.height(),
            x.width(),
            x.valid(),
        )?;
    }
    Ok(())
}

fn read_depth_auto(dir: &Path, id: &str, stem: &str) -> Result<DepthField<f64>> {
    let pfm = sample_path(dir, id, &format!("{stem}.pfm"));
    let mask = sample_path(dir, id, &format!("{stem}_mask.pgm"));
    if mask.exists() {
        read_depth_masked(pfm, mask)
    } else {
        read_depth(pfm)
    }
}

pub fn read_sample(dir: &Path, id: &str) -> Result<Sample> {
    let rgb = read_rgb(sample_path(dir, id, "rgb.ppm"))?;
    let gt = read_depth_auto(dir, id, "gt")?;
    let x = if sample_path(dir, id, "x.pfm").exists() {
        Some(read_depth_auto(dir, id, "x")?)
    } else {
        None
    };
    if gt.dims() != rgb.dims() || x.as_ref().is_some_and(|x| x.dims() != rgb.dims()) {
        return Err(Error::format(
            sample_path(dir, id, "rgb.ppm"),
            "sample files differ in size",
        ));
    }
    Ok(Sample {
        id: id.to_string(),
        rgb,
        gt,
        x,
    })
}

/// Sorted ids of the samples in `dir` (every `<id>_rgb.ppm`).
pub fn list_samples(dir: &Path) -> Result<Vec<String>> {
    let mut ids = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        if let Some(id) = entry
            .file_name()
            .to_str()
            .and_then(|n| n.strip_suffix("_rgb.ppm"))
        {
            ids.push(id.to_string());
        }
    }
    ids.sort();
    Ok(ids)
}

pub fn read_dataset(dir: &Path) -> Result<Vec<Sample>> {
    let ids = list_samples(dir)?;
    if ids.is_empty() {
        return Err(Error::format(dir, "no samples (*_rgb.ppm) found"));
    }
    ids.iter().map(|id| read_sample(dir, id)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pfm_round_trip_and_invalid_rule() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.pfm");
        let z = DepthField::new(
            2,
            3,
            vec![0.5, 1.25, 0.0, 3.0, 1e-3, 7.0],
            vec![true, true, false, true, true, true],
        )
        .unwrap();
        write_depth(&p, &z).unwrap();
        assert_eq!(read_depth(&p).unwrap(), z.cast::<f32>().cast::<f64>());
        let (_, _, raw) = read_pfm(&p).unwrap();
        assert_eq!(raw[2], -1.0);
        let bytes = fs::read(&p).unwrap();
        // bottom row is stored first
        assert_eq!(
            &bytes[bytes.len() - 12..bytes.len() - 8],
            &0.5f32.to_le_bytes()
        );
    }

    #[test]
    fn big_endian_pfm_is_read() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("be.pfm");
        let mut bytes = b"Pf\n2 1\n1.0\n".to_vec();
        bytes.extend_from_slice(&2.5f32.to_be_bytes());
        bytes.extend_from_slice(&(-1f32).to_be_bytes());
        fs::write(&p, bytes).unwrap();
        let z = read_depth(&p).unwrap();
        assert_eq!(z.values(), &[2.5, 0.0]);
        assert_eq!(z.valid(), &[true, false]);
    }

    #[test]
    fn ppm_scaling_and_comments() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.ppm");
        let mut bytes = b"P6\n# made by hand\n1 1\n255\n".to_vec();
        bytes.extend_from_slice(&[255, 0, 51]);
        fs::write(&p, bytes).unwrap();
        let rgb = read_rgb(&p).unwrap();
        assert_eq!(rgb.pixel(0, 0), [1.0, 0.0, 0.2]);
        write_rgb(&p, &rgb).unwrap();
        assert_eq!(read_rgb(&p).unwrap(), rgb);
    }

    #[test]
    fn malformed_files_are_format_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad");
        for bytes in [
            b"P6\n2 2\n255\n\x00\x01".as_slice(),
            b"P3\n1 1\n255\n",
            b"Pf\n1 1\n",
            b"Pf\nx 1\n-1\n0000",
        ] {
            fs::write(&p, bytes).unwrap();
            let e = read_rgb(&p).err().or(read_depth(&p).err()).unwrap();
            assert_eq!(e.exit_code(), 2);
        }
        assert_eq!(
            read_rgb(dir.path().join("missing"))
                .unwrap_err()
                .exit_code(),
            2
        );
    }

    #[test]
    fn sample_round_trip_keeps_valid_zeros() {
        let dir = tempfile::tempdir().unwrap();
        let rgb = RgbField::new(2, 2, (0..12).map(|i| i as f64 / 255.0).collect()).unwrap();
        let gt = DepthField::dense(2, 2, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let x = DepthField::new(
            2,
            2,
            vec![0.0, 1.0, 0.0, 0.0],
            vec![true, true, false, false],
        )
        .unwrap();
        write_sample(dir.path(), "s01", &rgb, &gt, Some(&x)).unwrap();
        write_sample(dir.path(), "s00", &rgb, &gt, None).unwrap();
        assert_eq!(list_samples(dir.path()).unwrap(), vec!["s00", "s01"]);
        let back = read_sample(dir.path(), "s01").unwrap();
        assert_eq!(back.x.unwrap(), x);
        assert_eq!(back.gt.values(), gt.cast::<f32>().cast::<f64>().values());
        assert!(read_sample(dir.path(), "s00").unwrap().x.is_none());
    }
}
