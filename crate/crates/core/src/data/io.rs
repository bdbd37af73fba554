use std::fs;
use std::path::Path;

use super::volume::Volume;
use super::{Dataset, LabeledSample, Split, SplitManifest};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const PGM_MAX: f64 = 65535.0;
const RAWV_MAGIC: &[u8; 4] = b"RAWV";

fn parse_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        offset,
        message: message.into(),
    }
}

/// Binary 16-bit PGM (`P5`, maxval 65535) of an image in `[0, 1]`. Values
/// outside the range are clamped.
pub fn encode_pgm(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let (h, w) = image.dims2()?;
    let mut out = format!("P5\n{w} {h}\n65535\n").into_bytes();
    out.reserve(2 * h * w);
    for &v in image.data() {
        let q = (v.clamp(0.0, 1.0) as f64 * PGM_MAX).round() as u16;
        out.extend_from_slice(&q.to_be_bytes());
    }
    Ok(out)
}

/// Read one whitespace-delimited header token, skipping `#` comments.
fn header_token(bytes: &[u8], pos: &mut usize) -> Result<(usize, String)> {
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
        return Err(parse_err(start, "unexpected end of header"));
    }
    Ok((start, String::from_utf8_lossy(&bytes[start..*pos]).into_owned()))
}

fn header_number(bytes: &[u8], pos: &mut usize, what: &str) -> Result<usize> {
    let (at, tok) = header_token(bytes, pos)?;
    tok.parse()
        .map_err(|_| parse_err(at, format!("invalid {what} {tok:?}")))
}

pub fn decode_pgm(bytes: &[u8]) -> Result<Tensor<f32>> {
    let mut pos = 0;
    let (_, magic) = header_token(bytes, &mut pos)?;
    if magic != "P5" {
        return Err(parse_err(0, format!("expected P5 magic, found {magic:?}")));
    }
    let w = header_number(bytes, &mut pos, "width")?;
    let h = header_number(bytes, &mut pos, "height")?;
    let at = pos;
    let maxval = header_number(bytes, &mut pos, "maxval")?;
    if maxval == 0 || maxval > 65535 {
        return Err(parse_err(at, format!("maxval {maxval} out of range")));
    }
    if w == 0 || h == 0 {
        return Err(parse_err(0, format!("empty image {w}x{h}")));
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(parse_err(pos, "missing whitespace after header"));
    }
    pos += 1;
    let width = if maxval > 255 { 2 } else { 1 };
    let need = w * h * width;
    let have = bytes.len() - pos;
    if have < need {
        return Err(parse_err(
            bytes.len(),
            format!("truncated pixel data: missing {} bytes", need - have),
        ));
    }
    let scale = maxval as f64;
    let data = bytes[pos..pos + need]
        .chunks_exact(width)
        .map(|c| {
            let q = if width == 2 { u16::from_be_bytes([c[0], c[1]]) } else { c[0] as u16 };
            (q as f64 / scale) as f32
        })
        .collect();
    Tensor::new(&[h, w], data)
}

pub fn write_pgm(path: &Path, image: &Tensor<f32>) -> Result<()> {
    fs::write(path, encode_pgm(image)?)?;
    Ok(())
}

pub fn read_pgm(path: &Path) -> Result<Tensor<f32>> {
    decode_pgm(&fs::read(path)?)
}

/// `"RAWV"`, `Dz Dy Dx` as little-endian `u32`, then little-endian `f32`
/// voxels with `x` fastest.
pub fn encode_rawv(volume: &Volume) -> Vec<u8> {
    let mut out = Vec::from(&RAWV_MAGIC[..]);
    for e in volume.extents() {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for v in volume.voxels() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_rawv(bytes: &[u8]) -> Result<Volume> {
    if bytes.len() < 4 || &bytes[..4] != RAWV_MAGIC {
        return Err(parse_err(0, "expected RAWV magic"));
    }
    if bytes.len() < 16 {
        return Err(parse_err(
            bytes.len(),
            format!("truncated header: missing {} bytes", 16 - bytes.len()),
        ));
    }
    let mut extents = [0usize; 3];
    for (i, e) in extents.iter_mut().enumerate() {
        let o = 4 + 4 * i;
        *e = u32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]) as usize;
    }
    if extents.contains(&0) {
        return Err(parse_err(4, format!("zero extent in {extents:?}")));
    }
    let need = extents
        .iter()
        .try_fold(4usize, |acc, &e| acc.checked_mul(e))
        .ok_or_else(|| parse_err(4, format!("extents {extents:?} overflow")))?;
    let have = bytes.len() - 16;
    if have < need {
        return Err(parse_err(
            bytes.len(),
            format!("truncated voxel data: missing {} bytes", need - have),
        ));
    }
    if have > need {
        return Err(parse_err(16 + need, format!("{} trailing bytes", have - need)));
    }
    let voxels = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Volume::new(extents, voxels).map_err(|e| parse_err(16, e.to_string()))
}

pub fn write_rawv(path: &Path, volume: &Volume) -> Result<()> {
    fs::write(path, encode_rawv(volume))?;
    Ok(())
}

pub fn read_rawv(path: &Path) -> Result<Volume> {
    decode_rawv(&fs::read(path)?)
}

pub const MANIFEST_NAME: &str = "manifest.tsv";

pub fn frontal_name(subject: &str) -> String {
    format!("{subject}_frontal.pgm")
}

pub fn lateral_name(subject: &str) -> String {
    format!("{subject}_lateral.pgm")
}

/// `subject_id<TAB>split<TAB>label` per line, in dataset order.
pub fn format_manifest(dataset: &Dataset) -> String {
    let mut out = String::new();
    for s in &dataset.samples {
        let split = dataset.manifest.split_of(&s.subject_id).map_or("unassigned", |s| s.name());
        out.push_str(&format!("{}\t{}\t{}\n", s.subject_id, split, u8::from(s.label)));
    }
    out
}

/// Parsed manifest rows: subject, split, label.
pub fn parse_manifest(text: &str) -> Result<Vec<(String, Split, bool)>> {
    let mut rows = Vec::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let body = line.trim_end_matches(['\n', '\r']);
        if !body.trim().is_empty() {
            let fields: Vec<&str> = body.split('\t').collect();
            if fields.len() != 3 {
                return Err(parse_err(offset, format!("expected 3 tab-separated fields, got {}", fields.len())));
            }
            let split = fields[1]
                .parse()
                .map_err(|_| parse_err(offset, format!("unknown split {:?}", fields[1])))?;
            let label = match fields[2] {
                "0" => false,
                "1" => true,
                other => return Err(parse_err(offset, format!("label must be 0 or 1, got {other:?}"))),
            };
            rows.push((fields[0].to_string(), split, label));
        }
        offset += line.len();
    }
    Ok(rows)
}

/// Write images and manifest into `dir`, which must exist.
pub fn write_dataset(dir: &Path, dataset: &Dataset) -> Result<()> {
    for s in &dataset.samples {
        write_pgm(&dir.join(frontal_name(&s.subject_id)), &s.frontal)?;
        write_pgm(&dir.join(lateral_name(&s.subject_id)), &s.lateral)?;
    }
    fs::write(dir.join(MANIFEST_NAME), format_manifest(dataset))?;
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let rows = parse_manifest(&fs::read_to_string(dir.join(MANIFEST_NAME))?)?;
    let mut samples = Vec::with_capacity(rows.len());
    let mut manifest = SplitManifest::default();
    for (subject_id, split, label) in rows {
        let frontal = read_pgm(&dir.join(frontal_name(&subject_id)))?;
        let lateral = read_pgm(&dir.join(lateral_name(&subject_id)))?;
        if frontal.shape() != lateral.shape() {
            return Err(Error::mismatch("views", frontal.shape(), lateral.shape()));
        }
        manifest.ids_mut(split).push(subject_id.clone());
        samples.push(LabeledSample {
            frontal,
            lateral,
            label,
            subject_id,
        });
    }
    manifest.validate()?;
    Ok(Dataset { samples, manifest })
}
