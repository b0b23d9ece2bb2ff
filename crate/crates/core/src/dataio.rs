//! Binary PGM/PPM images, `path,label` manifests and the mean image.

use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

fn header_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() && bytes[*pos] != b'#' {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::data("truncated image header"));
    }
    Ok(&bytes[start..*pos])
}

fn header_number(bytes: &[u8], pos: &mut usize, what: &str) -> Result<usize> {
    let tok = header_token(bytes, pos)?;
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::data(format!("bad image {what} `{}`", String::from_utf8_lossy(tok))))
}

/// Decodes binary PGM (P5) or PPM (P6) with maxval 255 into planar (C,H,W).
pub fn decode_image(bytes: &[u8]) -> Result<Tensor> {
    let mut pos = 0;
    let magic = header_token(bytes, &mut pos)?;
    let channels = match magic {
        b"P5" => 1,
        b"P6" => 3,
        m => {
            return Err(Error::data(format!(
                "unsupported image format `{}` (expected binary P5 or P6)",
                String::from_utf8_lossy(m)
            )))
        }
    };
    let width = header_number(bytes, &mut pos, "width")?;
    let height = header_number(bytes, &mut pos, "height")?;
    let maxval = header_number(bytes, &mut pos, "maxval")?;
    if maxval != 255 {
        return Err(Error::data(format!("unsupported maxval {maxval} (expected 255)")));
    }
    if width == 0 || height == 0 {
        return Err(Error::data("image has a zero dimension"));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let need = width * height * channels;
    let raster = bytes.get(pos..pos + need).ok_or_else(|| {
        Error::data(format!("truncated image payload: need {need} bytes, have {}", bytes.len().saturating_sub(pos)))
    })?;
    let plane = width * height;
    let mut data = vec![0.0f32; need];
    for (i, &b) in raster.iter().enumerate() {
        data[(i % channels) * plane + i / channels] = b as f32;
    }
    Tensor::from_vec(Shape::new(vec![channels, height, width])?, data)
}

/// Encodes a (1,H,W) or (3,H,W) tensor as P5/P6, rounding and clamping to [0,255].
pub fn encode_image(image: &Tensor) -> Result<Vec<u8>> {
    let (c, h, w) = match image.dims() {
        &[c @ (1 | 3), h, w] => (c, h, w),
        _ => return Err(Error::shape(format!("cannot encode image of shape {}", image.shape()))),
    };
    let mut out = format!("P{}\n{w} {h}\n255\n", if c == 1 { 5 } else { 6 }).into_bytes();
    let plane = h * w;
    for i in 0..plane {
        for ch in 0..c {
            out.push(image.data()[ch * plane + i].round().clamp(0.0, 255.0) as u8);
        }
    }
    Ok(out)
}

pub fn load_image(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    decode_image(&bytes).map_err(|e| match e {
        Error::Data(m) => Error::data(format!("{}: {m}", path.display())),
        e => e,
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: String,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    pub label_count: usize,
}

impl Manifest {
    /// Entry paths resolved against `base` when relative.
    pub fn resolved_paths(&self, base: &Path) -> Vec<PathBuf> {
        self.entries
            .iter()
            .map(|e| {
                let p = Path::new(&e.path);
                if p.is_absolute() {
                    p.to_path_buf()
                } else {
                    base.join(p)
                }
            })
            .collect()
    }
}

/// Parses `name,label` lines without any constraint on the label set.
/// Blank lines and `#` comments are skipped; names must be unique.
pub fn read_labelled(text: &str) -> Result<Vec<ManifestEntry>> {
    let mut entries = Vec::new();
    let mut seen = HashSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (path, label) = line
            .rsplit_once(',')
            .ok_or_else(|| Error::data(format!("line {}: expected `path,label`", i + 1)))?;
        let path = path.trim();
        let label: usize = label
            .trim()
            .parse()
            .map_err(|_| Error::data(format!("line {}: bad label `{}`", i + 1, label.trim())))?;
        if path.is_empty() {
            return Err(Error::data(format!("line {}: empty path", i + 1)));
        }
        if !seen.insert(path.to_string()) {
            return Err(Error::data(format!("line {}: duplicate path `{path}`", i + 1)));
        }
        entries.push(ManifestEntry { path: path.to_string(), label });
    }
    Ok(entries)
}

/// Parses a `path,label` manifest whose labels must cover `0..label_count`.
pub fn read_manifest(text: &str) -> Result<Manifest> {
    let entries = read_labelled(text)?;
    if entries.is_empty() {
        return Err(Error::data("empty manifest"));
    }
    let labels: BTreeSet<usize> = entries.iter().map(|e| e.label).collect();
    let label_count = labels.last().map_or(0, |&m| m + 1);
    if labels.len() != label_count {
        let missing: Vec<String> = (0..label_count).filter(|l| !labels.contains(l)).map(|l| l.to_string()).collect();
        return Err(Error::data(format!("manifest labels are not contiguous; missing {}", missing.join(", "))));
    }
    Ok(Manifest { entries, label_count })
}

/// Elementwise mean, accumulated in f64 in the given order.
pub fn mean_image<'a, S: AsRef<str>>(images: impl IntoIterator<Item = (S, &'a Tensor)>) -> Result<Tensor> {
    let mut acc: Option<(Shape, Vec<f64>)> = None;
    let mut n = 0usize;
    for (name, img) in images {
        match &mut acc {
            None => acc = Some((img.shape().clone(), img.data().iter().map(|&v| v as f64).collect())),
            Some((shape, sum)) => {
                if shape != img.shape() {
                    return Err(Error::data(format!(
                        "image `{}` has shape {}, expected {shape}",
                        name.as_ref(),
                        img.shape()
                    )));
                }
                for (s, &v) in sum.iter_mut().zip(img.data()) {
                    *s += v as f64;
                }
            }
        }
        n += 1;
    }
    let (shape, sum) = acc.ok_or_else(|| Error::data("mean of an empty dataset"))?;
    Tensor::from_vec(shape, sum.into_iter().map(|s| (s / n as f64) as f32).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn decode_examples() {
        let t = decode_image(b"P5\n2 2\n255\n\x00\xff\x80\x40").unwrap();
        assert_eq!(t.dims(), &[1, 2, 2]);
        assert_eq!(t.data(), &[0.0, 255.0, 128.0, 64.0]);
        let t = decode_image(b"P6 1 1 255\n\x0a\x14\x1e").unwrap();
        assert_eq!(t.dims(), &[3, 1, 1]);
        assert_eq!(t.data(), &[10.0, 20.0, 30.0]);
    }

    #[test]
    fn decode_header_comments() {
        let t = decode_image(b"P5\n# made by hand\n1 2\n# max\n255\n\x01\x02").unwrap();
        assert_eq!(t.data(), &[1.0, 2.0]);
    }

    #[test]
    fn decode_errors() {
        let e = decode_image(b"P4\n1 1\n\x00").unwrap_err();
        assert!(matches!(&e, Error::Data(m) if m.contains("P4")));
        assert!(matches!(decode_image(b"P5\n2 2\n255\n\x00\x01"), Err(Error::Data(_))));
        assert!(matches!(decode_image(b"P5\n1 1\n65535\n\x00\x00"), Err(Error::Data(_))));
        assert!(matches!(decode_image(b"P5\n1"), Err(Error::Data(_))));
    }

    proptest! {
        #[test]
        fn encode_decode_round_trip(
            (c, h, w, bytes) in (prop::sample::select(vec![1usize, 3]), 1usize..6, 1usize..6)
                .prop_flat_map(|(c, h, w)| (Just(c), Just(h), Just(w), prop::collection::vec(any::<u8>(), c * h * w)))
        ) {
            let t = Tensor::from_dims(&[c, h, w], bytes.iter().map(|&b| b as f32).collect());
            let enc = encode_image(&t).unwrap();
            prop_assert_eq!(&decode_image(&enc).unwrap(), &t);
            prop_assert_eq!(encode_image(&decode_image(&enc).unwrap()).unwrap(), enc);
        }
    }

    #[test]
    fn manifest_examples() {
        let m = read_manifest("a.pgm,0\nb.pgm,1\n").unwrap();
        assert_eq!(m.label_count, 2);
        assert_eq!(m.entries[1], ManifestEntry { path: "b.pgm".into(), label: 1 });
        let e = read_manifest("a.pgm,0\nb.pgm,2\n").unwrap_err();
        assert!(matches!(&e, Error::Data(m) if m.contains("missing 1")), "{e}");
        assert!(matches!(read_manifest(""), Err(Error::Data(m)) if m.contains("empty")));
        assert!(matches!(read_manifest("a,0\na,1\n"), Err(Error::Data(m)) if m.contains("duplicate")));
        assert!(matches!(read_manifest("a,x\n"), Err(Error::Data(_))));
    }

    fn c(v: f32) -> Tensor {
        Tensor::filled(Shape::new(vec![1, 2, 2]).unwrap(), v)
    }

    #[test]
    fn mean_examples() {
        let x = Tensor::from_dims(&[1, 1, 3], vec![1.0, -2.0, 3.5]);
        assert_eq!(mean_image([("x", &x)]).unwrap(), x);
        let nx = x.map(|v| -v);
        assert!(mean_image([("x", &x), ("nx", &nx)]).unwrap().data().iter().all(|&v| v == 0.0));
        let (a, b, cc) = (c(1.0), c(2.0), c(3.0));
        assert_eq!(mean_image([("a", &a), ("b", &b), ("c", &cc)]).unwrap(), c(2.0));
        let odd = Tensor::filled(Shape::new(vec![1, 2, 3]).unwrap(), 0.0);
        let e = mean_image([("a", &a), ("odd.pgm", &odd)]).unwrap_err();
        assert!(matches!(&e, Error::Data(m) if m.contains("odd.pgm")));
    }

    #[test]
    fn mean_permutation_invariant() {
        let imgs: Vec<Tensor> = (0..7).map(|i| Tensor::from_dims(&[1, 1, 2], vec![i as f32 * 0.37, 1.0 / (i + 1) as f32])).collect();
        let fwd = mean_image(imgs.iter().map(|t| ("", t))).unwrap();
        let rev = mean_image(imgs.iter().rev().map(|t| ("", t))).unwrap();
        assert_eq!(fwd, rev);
    }
}
