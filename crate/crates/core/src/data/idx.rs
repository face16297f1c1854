//! The IDX binary array format.
//!
//! Layout: two zero bytes, an element-type byte (only `0x08`, unsigned
//! byte, is supported), a dimension-count byte, one big-endian `u32` extent
//! per dimension, then the elements in row-major order.

use std::fs;
use std::path::Path;

use super::{DatasetSplit, Provenance, Sample, SUBSET_NAMES};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

const UNSIGNED_BYTE: u8 = 0x08;

/// A decoded IDX array of unsigned bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

fn format_err(offset: usize, detail: impl Into<String>) -> Error {
    Error::Format {
        offset,
        detail: detail.into(),
    }
}

pub fn parse_idx(bytes: &[u8]) -> Result<IdxArray> {
    let byte = |i: usize| {
        bytes
            .get(i)
            .copied()
            .ok_or_else(|| format_err(i, "file ends inside the header"))
    };
    for i in 0..2 {
        let b = byte(i)?;
        if b != 0 {
            return Err(format_err(
                i,
                format!("magic byte must be 0, found {b:#04x}"),
            ));
        }
    }
    let kind = byte(2)?;
    if kind != UNSIGNED_BYTE {
        return Err(format_err(
            2,
            format!("unsupported element type {kind:#04x}, expected 0x08"),
        ));
    }
    let ndims = byte(3)? as usize;
    if ndims == 0 {
        return Err(format_err(3, "dimension count is zero"));
    }
    let mut dims = Vec::with_capacity(ndims);
    for d in 0..ndims {
        let at = 4 + 4 * d;
        let Some(raw) = bytes.get(at..at + 4) else {
            return Err(format_err(
                bytes.len(),
                format!("file ends inside extent {d}"),
            ));
        };
        let extent = u32::from_be_bytes(raw.try_into().expect("4-byte slice")) as usize;
        if extent == 0 {
            return Err(format_err(at, format!("extent {d} is zero")));
        }
        dims.push(extent);
    }
    let start = 4 + 4 * ndims;
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| format_err(4, "element count overflows"))?;
    let end = start
        .checked_add(count)
        .ok_or_else(|| format_err(4, "element count overflows"))?;
    if bytes.len() < end {
        return Err(format_err(
            bytes.len(),
            format!("payload truncated: expected {count} bytes from offset {start}"),
        ));
    }
    if bytes.len() > end {
        return Err(format_err(
            end,
            format!("{} trailing bytes after payload", bytes.len() - end),
        ));
    }
    Ok(IdxArray {
        dims,
        data: bytes[start..end].to_vec(),
    })
}

pub fn encode_idx(array: &IdxArray) -> Result<Vec<u8>> {
    if array.dims.is_empty() || array.dims.len() > u8::MAX as usize {
        return Err(Error::Contract(format!(
            "cannot encode {} dimensions",
            array.dims.len()
        )));
    }
    let count: usize = array.dims.iter().product();
    if count != array.data.len() {
        return Err(Error::dim(
            "encode_idx",
            format!(
                "dims {:?} need {count} bytes, got {}",
                array.dims,
                array.data.len()
            ),
        ));
    }
    let mut out = Vec::with_capacity(4 + 4 * array.dims.len() + count);
    out.extend_from_slice(&[0, 0, UNSIGNED_BYTE, array.dims.len() as u8]);
    for &d in &array.dims {
        let d = u32::try_from(d).map_err(|_| Error::Contract(format!("extent {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_be_bytes());
    }
    out.extend_from_slice(&array.data);
    Ok(out)
}

pub fn read_idx(path: impl AsRef<Path>) -> Result<IdxArray> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_idx(&bytes)
}

pub fn write_idx(path: impl AsRef<Path>, array: &IdxArray) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_idx(array)?).map_err(|e| Error::io(path, e))
}

/// Reads an IDX file as tensors scaled to `[0, 1]`.
///
/// A one-dimensional file yields a single tensor; otherwise the leading
/// axis indexes items and each item keeps the remaining extents.
pub fn load_idx(path: impl AsRef<Path>) -> Result<Vec<Tensor>> {
    let array = read_idx(path)?;
    let scaled: Vec<f64> = array.data.iter().map(|&b| f64::from(b) / 255.0).collect();
    if array.dims.len() == 1 {
        return Ok(vec![Tensor::new(array.dims, scaled)?]);
    }
    let item_shape = array.dims[1..].to_vec();
    let item_len: usize = item_shape.iter().product();
    scaled
        .chunks(item_len)
        .map(|chunk| Tensor::new(item_shape.clone(), chunk.to_vec()))
        .collect()
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes `<subset>.idx` and `<subset>.targets.idx` for every subset.
/// Images are clipped to `[0, 1]` and quantized to bytes.
pub fn write_cache(split: &DatasetSplit, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, subset) in split.subsets() {
        let first = subset
            .first()
            .ok_or_else(|| Error::Contract(format!("subset `{name}` is empty")))?;
        let (h, w) = match first.image.shape() {
            [1, h, w] => (*h, *w),
            s => {
                return Err(Error::dim(
                    "write_cache",
                    format!("expected 1×H×W images, got {s:?}"),
                ))
            }
        };
        let mut pixels = Vec::with_capacity(subset.len() * h * w);
        for s in subset {
            if s.image.shape() != first.image.shape() {
                return Err(Error::dim("write_cache", "images of different sizes"));
            }
            pixels.extend(s.image.data().iter().map(|&v| quantize(v)));
        }
        let labels = subset
            .iter()
            .map(|s| {
                u8::try_from(s.label)
                    .map_err(|_| Error::Contract(format!("label {} exceeds a byte", s.label)))
            })
            .collect::<Result<Vec<u8>>>()?;
        write_idx(
            dir.join(format!("{name}.idx")),
            &IdxArray {
                dims: vec![subset.len(), h, w],
                data: pixels,
            },
        )?;
        write_idx(
            dir.join(format!("{name}.targets.idx")),
            &IdxArray {
                dims: vec![subset.len()],
                data: labels,
            },
        )?;
    }
    Ok(())
}

/// Reads a directory written by [`write_cache`]. Sample ids are assigned
/// sequentially across subsets in `train, val, pre, test` order.
pub fn read_cache(dir: impl AsRef<Path>) -> Result<DatasetSplit> {
    let dir = dir.as_ref();
    let mut next_id = 0u64;
    let mut subsets = Vec::with_capacity(4);
    for name in SUBSET_NAMES {
        let images = read_idx(dir.join(format!("{name}.idx")))?;
        let labels = read_idx(dir.join(format!("{name}.targets.idx")))?;
        if images.dims.len() != 3 || labels.dims != [images.dims[0]] {
            return Err(Error::dim(
                "read_cache",
                format!(
                    "`{name}`: images {:?} vs targets {:?}",
                    images.dims, labels.dims
                ),
            ));
        }
        let (h, w) = (images.dims[1], images.dims[2]);
        let samples = images
            .data
            .chunks(h * w)
            .zip(&labels.data)
            .map(|(px, &label)| {
                let s = Sample {
                    id: next_id,
                    image: Tensor::new(
                        vec![1, h, w],
                        px.iter().map(|&b| f64::from(b) / 255.0).collect(),
                    )?,
                    label: label as usize,
                };
                next_id += 1;
                Ok(s)
            })
            .collect::<Result<Vec<_>>>()?;
        subsets.push(samples);
    }
    let test = subsets.pop().unwrap_or_default();
    let pre = subsets.pop().unwrap_or_default();
    let val = subsets.pop().unwrap_or_default();
    let train = subsets.pop().unwrap_or_default();
    Ok(DatasetSplit {
        provenance: Provenance {
            source: format!("idx:{}", dir.display()),
            seed: 0,
            pre_pool_size: train.len() + val.len() + pre.len(),
        },
        train,
        val,
        pre,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_fixture() {
        let bytes = [0, 0, 0x08, 1, 0, 0, 0, 3, 0, 128, 255];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tiny.idx");
        fs::write(&path, bytes).unwrap();
        let t = load_idx(&path).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t[0].data(), &[0.0, 128.0 / 255.0, 1.0]);
    }

    #[test]
    fn error_offsets() {
        let offset = |b: &[u8]| match parse_idx(b) {
            Err(Error::Format { offset, .. }) => offset,
            other => panic!("expected format error, got {other:?}"),
        };
        assert_eq!(offset(&[0, 1, 8, 1, 0, 0, 0, 1, 5]), 1);
        assert_eq!(offset(&[0, 0, 0x0D, 1, 0, 0, 0, 1, 5]), 2);
        assert_eq!(offset(&[0, 0, 8]), 3);
        assert_eq!(offset(&[0, 0, 8, 2, 0, 0, 0, 1, 0, 0]), 10);
        // Payload of 3 declared, 2 present: the first missing byte is at 10.
        assert_eq!(offset(&[0, 0, 8, 1, 0, 0, 0, 3, 1, 2]), 10);
        assert_eq!(offset(&[0, 0, 8, 1, 0, 0, 0, 1, 1, 2]), 9);
        assert_eq!(offset(&[0, 0, 8, 1, 0, 0, 0, 0]), 4);
    }

    #[test]
    fn encode_parse_round_trip() {
        let bytes = vec![0, 0, 8, 2, 0, 0, 0, 2, 0, 0, 0, 3, 1, 2, 3, 4, 5, 6];
        let parsed = parse_idx(&bytes).unwrap();
        assert_eq!(parsed.dims, vec![2, 3]);
        assert_eq!(encode_idx(&parsed).unwrap(), bytes);
    }
}
