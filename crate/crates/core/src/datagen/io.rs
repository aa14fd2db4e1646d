//! Binary image I/O (PPM P6 for RGB, PGM P5 for masks) and whole-corpus
//! directory layout. Pixels are already quantized to the u8 grid, so writing
//! and re-reading a corpus is lossless; all writes go through a temp file and
//! rename, so a crash never leaves a half-written artifact behind.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use super::{
    compute_stats, mean_color, Corpus, CorpusSpec, DatagenError, LabeledSample, Result, ShapeClass,
};
use crate::numerics::Tensor;

fn io_err(path: &Path, source: std::io::Error) -> DatagenError {
    DatagenError::Io { path: path.display().to_string(), source }
}

fn format_err(path: &Path, reason: impl Into<String>) -> DatagenError {
    DatagenError::Format { path: path.display().to_string(), reason: reason.into() }
}

/// Write bytes via a temp sibling + rename so readers never observe a
/// partial file.
pub(crate) fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp-write");
    {
        let mut f = fs::File::create(&tmp).map_err(|e| io_err(&tmp, e))?;
        f.write_all(bytes).map_err(|e| io_err(&tmp, e))?;
        f.sync_all().map_err(|e| io_err(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

/// Serialize a [3, h, w] unit-interval image as binary PPM.
pub fn write_ppm(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let shape = image.shape();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(DatagenError::Contract(format!(
            "write_ppm expects [3, h, w], got {shape:?}"
        )));
    }
    let (h, w) = (shape[1], shape[2]);
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    let n_px = h * w;
    for p in 0..n_px {
        for c in 0..3 {
            bytes.push(to_u8(image.data()[c * n_px + p]));
        }
    }
    atomic_write(path, &bytes)
}

/// Serialize an [h, w] unit-interval mask as binary PGM.
pub fn write_pgm(path: &Path, mask: &Tensor<f32>) -> Result<()> {
    let shape = mask.shape();
    if shape.len() != 2 {
        return Err(DatagenError::Contract(format!(
            "write_pgm expects [h, w], got {shape:?}"
        )));
    }
    let (h, w) = (shape[0], shape[1]);
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend(mask.data().iter().map(|&v| to_u8(v)));
    atomic_write(path, &bytes)
}

pub fn read_ppm(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    let (w, h, raster) = parse_pnm(path, &bytes, b'6')?;
    let n_px = w * h;
    if raster.len() != 3 * n_px {
        return Err(format_err(
            path,
            format!("expected {} raster bytes, found {}", 3 * n_px, raster.len()),
        ));
    }
    let mut data = vec![0.0f32; 3 * n_px];
    for p in 0..n_px {
        for c in 0..3 {
            data[c * n_px + p] = from_u8(raster[p * 3 + c]);
        }
    }
    Ok(Tensor::new(&[3, h, w], data).expect("sized above"))
}

pub fn read_pgm(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    let (w, h, raster) = parse_pnm(path, &bytes, b'5')?;
    if raster.len() != w * h {
        return Err(format_err(
            path,
            format!("expected {} raster bytes, found {}", w * h, raster.len()),
        ));
    }
    let data = raster.iter().map(|&b| from_u8(b)).collect();
    Ok(Tensor::new(&[h, w], data).expect("sized above"))
}

#[inline]
fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[inline]
fn from_u8(b: u8) -> f32 {
    f32::from(b) / 255.0
}

/// Parse a binary PNM header ("P5"/"P6", dimensions, maxval 255) tolerating
/// `#` comments, and return (width, height, raster bytes).
fn parse_pnm<'a>(path: &Path, bytes: &'a [u8], kind: u8) -> Result<(usize, usize, &'a [u8])> {
    if bytes.len() < 2 || bytes[0] != b'P' || bytes[1] != kind {
        return Err(format_err(path, format!("not a P{} file", char::from(kind))));
    }
    let mut pos = 2usize;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // Skip whitespace and comment lines.
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(format_err(path, "truncated header"));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("digits are utf8");
        *field = text
            .parse()
            .map_err(|_| format_err(path, "header field out of range"))?;
    }
    let [w, h, maxval] = fields;
    if maxval != 255 {
        return Err(format_err(path, format!("unsupported maxval {maxval}")));
    }
    if w == 0 || h == 0 || w > 4096 || h > 4096 {
        return Err(format_err(path, format!("implausible dimensions {w}x{h}")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(format_err(path, "missing raster separator"));
    }
    Ok((w, h, &bytes[pos + 1..]))
}

/// Write a corpus as a self-describing directory:
/// `images/*.ppm`, `masks/*.pgm`, `manifest.csv`, `spec.csv`.
pub fn write_corpus(dir: &Path, corpus: &Corpus) -> Result<()> {
    let images = dir.join("images");
    let masks = dir.join("masks");
    fs::create_dir_all(&images).map_err(|e| io_err(&images, e))?;
    fs::create_dir_all(&masks).map_err(|e| io_err(&masks, e))?;

    let mut manifest = String::from("image,mask,class,mean_r,mean_g,mean_b\n");
    let mut per_class = std::collections::HashMap::new();
    for sample in &corpus.samples {
        let idx = per_class.entry(sample.label).or_insert(0usize);
        let stem = format!("{}_{:04}", sample.label.name(), idx);
        *idx += 1;
        let image_rel = format!("images/{stem}.ppm");
        let mask_rel = format!("masks/{stem}.pgm");
        write_ppm(&dir.join(&image_rel), &sample.image)?;
        write_pgm(&dir.join(&mask_rel), &sample.mask)?;
        manifest.push_str(&format!(
            "{image_rel},{mask_rel},{},{},{},{}\n",
            sample.label.name(),
            sample.mean_color[0],
            sample.mean_color[1],
            sample.mean_color[2],
        ));
    }
    atomic_write(&dir.join("manifest.csv"), manifest.as_bytes())?;

    let spec = &corpus.spec;
    let spec_csv = format!(
        "key,value\nn_per_class,{}\nsize,{}\nseed,{}\nmax_clutter,{}\nnoise,{}\n",
        spec.n_per_class, spec.size, spec.seed, spec.max_clutter, spec.noise
    );
    atomic_write(&dir.join("spec.csv"), spec_csv.as_bytes())
}

/// Load a corpus directory back. Mean colors and channel statistics are
/// recomputed from pixel data, so they can never drift from the images.
pub fn read_corpus(dir: &Path) -> Result<Corpus> {
    let manifest_path = dir.join("manifest.csv");
    let manifest =
        fs::read_to_string(&manifest_path).map_err(|e| io_err(&manifest_path, e))?;
    let mut lines = manifest.lines();
    match lines.next() {
        Some("image,mask,class,mean_r,mean_g,mean_b") => {}
        _ => return Err(format_err(&manifest_path, "unrecognized manifest header")),
    }
    let mut samples = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(format_err(
                &manifest_path,
                format!("line {}: expected 6 fields, found {}", lineno + 2, fields.len()),
            ));
        }
        let class = ShapeClass::ALL
            .iter()
            .copied()
            .find(|c| c.name() == fields[2])
            .ok_or_else(|| {
                format_err(&manifest_path, format!("line {}: unknown class {}", lineno + 2, fields[2]))
            })?;
        let image = read_ppm(&join_checked(dir, fields[0], &manifest_path)?)?;
        let mask = read_pgm(&join_checked(dir, fields[1], &manifest_path)?)?;
        let mean = mean_color(&image, &mask)?;
        samples.push(LabeledSample { image, mask, label: class, mean_color: mean });
    }
    if samples.is_empty() {
        return Err(format_err(&manifest_path, "manifest lists no samples"));
    }

    let spec = read_spec(&dir.join("spec.csv"))?;
    let stats = compute_stats(&samples);
    Ok(Corpus { spec, samples, stats })
}

/// Reject manifest entries that escape the corpus directory.
fn join_checked(dir: &Path, rel: &str, manifest: &Path) -> Result<PathBuf> {
    if rel.contains("..") || rel.starts_with('/') {
        return Err(format_err(manifest, format!("suspicious path {rel}")));
    }
    Ok(dir.join(rel))
}

fn read_spec(path: &Path) -> Result<CorpusSpec> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut spec = CorpusSpec::default();
    for line in text.lines().skip(1) {
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once(',')
            .ok_or_else(|| format_err(path, format!("bad spec line: {line}")))?;
        macro_rules! parse {
            () => {
                value
                    .parse()
                    .map_err(|_| format_err(path, format!("bad value for {key}: {value}")))?
            };
        }
        match key {
            "n_per_class" => spec.n_per_class = parse!(),
            "size" => spec.size = parse!(),
            "seed" => spec.seed = parse!(),
            "max_clutter" => spec.max_clutter = parse!(),
            "noise" => spec.noise = parse!(),
            other => return Err(format_err(path, format!("unknown spec key {other}"))),
        }
    }
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::generate_corpus;

    fn spec() -> CorpusSpec {
        CorpusSpec { n_per_class: 4, size: 16, seed: 5, max_clutter: 2, noise: 0.02 }
    }

    #[test]
    fn ppm_round_trip_is_bit_exact() {
        let corpus = generate_corpus(&spec()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ppm");
        write_ppm(&path, &corpus.samples[0].image).unwrap();
        let back = read_ppm(&path).unwrap();
        assert_eq!(back.shape(), corpus.samples[0].image.shape());
        assert_eq!(back.data(), corpus.samples[0].image.data());
    }

    #[test]
    fn pgm_round_trip_preserves_binary_masks() {
        let corpus = generate_corpus(&spec()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pgm");
        write_pgm(&path, &corpus.samples[1].mask).unwrap();
        let back = read_pgm(&path).unwrap();
        assert_eq!(back.data(), corpus.samples[1].mask.data());
    }

    #[test]
    fn corpus_round_trip_reproduces_everything() {
        let corpus = generate_corpus(&spec()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_corpus(dir.path(), &corpus).unwrap();
        let back = read_corpus(dir.path()).unwrap();
        assert_eq!(back.samples.len(), corpus.samples.len());
        for (a, b) in back.samples.iter().zip(&corpus.samples) {
            assert_eq!(a.label, b.label);
            assert_eq!(a.image.data(), b.image.data());
            assert_eq!(a.mask.data(), b.mask.data());
            assert_eq!(a.mean_color, b.mean_color);
        }
        assert_eq!(back.stats, corpus.stats);
        assert_eq!(back.spec.seed, corpus.spec.seed);
        assert_eq!(back.spec.n_per_class, corpus.spec.n_per_class);
    }

    #[test]
    fn truncated_raster_is_a_format_error() {
        let corpus = generate_corpus(&spec()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ppm");
        write_ppm(&path, &corpus.samples[0].image).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
        let err = read_ppm(&path).unwrap_err();
        assert!(err.to_string().contains("raster bytes"), "{err}");
    }

    #[test]
    fn wrong_magic_and_bad_maxval_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ppm");
        std::fs::write(&path, b"P5\n2 2\n255\n0000").unwrap();
        assert!(read_ppm(&path).is_err());
        std::fs::write(&path, b"P6\n2 2\n65535\n00000000000000000000000000000000").unwrap();
        let err = read_ppm(&path).unwrap_err();
        assert!(err.to_string().contains("maxval"), "{err}");
    }

    #[test]
    fn header_comments_are_tolerated() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ppm");
        let mut bytes = b"P6\n# made by hand\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[255, 0, 0, 0, 255, 0]);
        std::fs::write(&path, &bytes).unwrap();
        let img = read_ppm(&path).unwrap();
        assert_eq!(img.shape(), &[3, 1, 2]);
        assert_eq!(img.data()[0], 1.0); // red channel, first pixel
    }

    #[test]
    fn manifest_path_escape_is_rejected() {
        let corpus = generate_corpus(&spec()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_corpus(dir.path(), &corpus).unwrap();
        let manifest = dir.path().join("manifest.csv");
        let text = std::fs::read_to_string(&manifest).unwrap();
        let evil = text.replace("images/circle_0000.ppm", "../evil.ppm");
        std::fs::write(&manifest, evil).unwrap();
        let err = read_corpus(dir.path()).unwrap_err();
        assert!(err.to_string().contains("suspicious"), "{err}");
    }
}
