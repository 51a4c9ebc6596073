//! Middlebury `.flo` interchange format.
//!
//! Layout, all little-endian: `f32` magic `202021.25`, `i32` width, `i32`
//! height, then `width * height` interleaved `(u, v)` `f32` pairs in
//! row-major order.

use std::io::{Read, Write};

use super::FlowField;
use crate::error::{Error, Result};

pub const FLO_MAGIC: f32 = 202021.25;
/// Sanity bound on header dimensions, as in the reference tooling.
const MAX_SIDE: i32 = 99_999;

pub fn write_flo<W: Write>(field: &FlowField, mut sink: W) -> Result<()> {
    let mut buf = Vec::with_capacity(12 + field.u().len() * 8);
    buf.extend_from_slice(&FLO_MAGIC.to_le_bytes());
    buf.extend_from_slice(&(field.width() as i32).to_le_bytes());
    buf.extend_from_slice(&(field.height() as i32).to_le_bytes());
    for (u, v) in field.u().iter().zip(field.v()) {
        buf.extend_from_slice(&u.to_le_bytes());
        buf.extend_from_slice(&v.to_le_bytes());
    }
    sink.write_all(&buf)?;
    Ok(())
}

fn format_err(offset: u64, message: impl Into<String>) -> Error {
    Error::Format { offset, message: message.into() }
}

fn read_exact_at<R: Read>(src: &mut R, buf: &mut [u8], offset: u64, what: &str) -> Result<()> {
    let mut filled = 0;
    while filled < buf.len() {
        match src.read(&mut buf[filled..]) {
            Ok(0) => {
                return Err(format_err(
                    offset + filled as u64,
                    format!("truncated {what}: expected {} bytes, got {filled}", buf.len()),
                ))
            }
            Ok(n) => filled += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(())
}

pub fn read_flo<R: Read>(mut source: R) -> Result<FlowField> {
    let mut header = [0u8; 12];
    read_exact_at(&mut source, &mut header, 0, "header")?;
    let magic = f32::from_le_bytes(header[0..4].try_into().unwrap());
    if magic != FLO_MAGIC {
        return Err(format_err(0, format!("bad magic {magic}, expected {FLO_MAGIC}")));
    }
    let width = i32::from_le_bytes(header[4..8].try_into().unwrap());
    let height = i32::from_le_bytes(header[8..12].try_into().unwrap());
    if !(1..=MAX_SIDE).contains(&width) {
        return Err(format_err(4, format!("implausible width {width}")));
    }
    if !(1..=MAX_SIDE).contains(&height) {
        return Err(format_err(8, format!("implausible height {height}")));
    }
    let (w, h) = (width as usize, height as usize);
    let mut payload = vec![0u8; w * h * 8];
    read_exact_at(&mut source, &mut payload, 12, "payload")?;
    let mut u = Vec::with_capacity(w * h);
    let mut v = Vec::with_capacity(w * h);
    for pair in payload.chunks_exact(8) {
        u.push(f32::from_le_bytes(pair[0..4].try_into().unwrap()));
        v.push(f32::from_le_bytes(pair[4..8].try_into().unwrap()));
    }
    FlowField::new(w, h, u, v).map_err(|e| format_err(12, e.to_string()))
}
