//! Minimal single-file NIfTI-1 reader (`.nii`, uncompressed, float32 or int16).

use std::fs;
use std::path::Path;

use super::Volume;
use crate::error::{Error, Result};

const HEADER_SIZE: usize = 348;
const DT_INT16: i16 = 4;
const DT_FLOAT32: i16 = 16;

struct Reader<'a> {
    bytes: &'a [u8],
    big_endian: bool,
}

impl Reader<'_> {
    fn i16(&self, off: usize) -> i16 {
        let b = [self.bytes[off], self.bytes[off + 1]];
        if self.big_endian {
            i16::from_be_bytes(b)
        } else {
            i16::from_le_bytes(b)
        }
    }


    fn f32(&self, off: usize) -> f32 {
        let b = self.word(off);
        if self.big_endian {
            f32::from_be_bytes(b)
        } else {
            f32::from_le_bytes(b)
        }
    }

    fn word(&self, off: usize) -> [u8; 4] {
        [
            self.bytes[off],
            self.bytes[off + 1],
            self.bytes[off + 2],
            self.bytes[off + 3],
        ]
    }
}

pub(super) fn read(path: &Path) -> Result<Volume> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse(&bytes)
}

pub(super) fn parse(bytes: &[u8]) -> Result<Volume> {
    if bytes.len() < HEADER_SIZE {
        return Err(Error::format(
            "sizeof_hdr",
            format!("file holds {} bytes, shorter than a header", bytes.len()),
        ));
    }
    let big_endian = match (
        i32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]),
        i32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]),
    ) {
        (348, _) => false,
        (_, 348) => true,
        (n, _) => return Err(Error::format("sizeof_hdr", format!("expected 348, got {n}"))),
    };
    let r = Reader { bytes, big_endian };

    let magic = &bytes[344..348];
    if magic != b"n+1\0" {
        return Err(Error::format(
            "magic",
            format!("expected single-file \"n+1\", got {magic:?}"),
        ));
    }

    let ndim = r.i16(40);
    if !(3..=7).contains(&ndim) {
        return Err(Error::format("dim[0]", format!("expected 3..=7, got {ndim}")));
    }
    let mut dims = [0usize; 3];
    for (i, d) in dims.iter_mut().enumerate() {
        let n = r.i16(42 + 2 * i);
        if n < 1 {
            return Err(Error::format(format!("dim[{}]", i + 1), format!("got {n}")));
        }
        *d = n as usize;
    }
    for i in 4..=ndim as usize {
        let n = r.i16(40 + 2 * i);
        if n > 1 {
            return Err(Error::format(
                format!("dim[{i}]"),
                format!("only 3D volumes are supported, got extent {n}"),
            ));
        }
    }

    let datatype = r.i16(70);
    let bitpix = r.i16(72);
    let sample_size = match (datatype, bitpix) {
        (DT_FLOAT32, 32) => 4,
        (DT_INT16, 16) => 2,
        (DT_FLOAT32 | DT_INT16, b) => {
            return Err(Error::format("bitpix", format!("{b} does not match datatype")))
        }
        (d, _) => {
            return Err(Error::format(
                "datatype",
                format!("only float32 (16) and int16 (4) are supported, got {d}"),
            ))
        }
    };

    let mut spacing = [0.0; 3];
    for (i, s) in spacing.iter_mut().enumerate() {
        let p = r.f32(80 + 4 * i);
        if !(p.is_finite() && p > 0.0) {
            return Err(Error::format(
                format!("pixdim[{}]", i + 1),
                format!("must be positive, got {p}"),
            ));
        }
        *s = p as f64;
    }

    let vox_offset = r.f32(108);
    if !(vox_offset.is_finite() && vox_offset >= HEADER_SIZE as f32) || vox_offset.fract() != 0.0 {
        return Err(Error::format("vox_offset", format!("got {vox_offset}")));
    }
    let offset = vox_offset as usize;

    let mut slope = r.f32(112) as f64;
    let inter = r.f32(116) as f64;
    if slope == 0.0 || !slope.is_finite() {
        slope = 1.0;
    }
    let inter = if inter.is_finite() { inter } else { 0.0 };

    let origin = if r.i16(252) > 0 {
        [r.f32(268) as f64, r.f32(272) as f64, r.f32(276) as f64]
    } else {
        [0.0; 3]
    };

    let count = dims[0] * dims[1] * dims[2];
    let payload = bytes.get(offset..).unwrap_or(&[]);
    if payload.len() < count * sample_size {
        return Err(Error::SizeMismatch(format!(
            "header dims {:?} need {} bytes of data after offset {}, file has {}",
            dims,
            count * sample_size,
            offset,
            payload.len()
        )));
    }
    let payload_reader = Reader {
        bytes: payload,
        big_endian,
    };
    let data: Vec<f32> = (0..count)
        .map(|i| {
            let raw = if sample_size == 4 {
                payload_reader.f32(4 * i) as f64
            } else {
                payload_reader.i16(2 * i) as f64
            };
            (raw * slope + inter) as f32
        })
        .collect();
    Volume::new(dims, spacing, origin, data)
}
