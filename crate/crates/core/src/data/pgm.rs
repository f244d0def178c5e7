//! Binary netpbm images: P5 (grey) for masks, P6 (colour) for overlays.
//! A multi-frame mask file is a plain concatenation of P5 images.

use std::path::Path;

use crate::error::{Result, SlvError};

/// Encodes `frames` binary masks of `height x width` (values 0/1) as
/// concatenated P5 images with 0 = background, 255 = foreground.
pub fn encode_masks(masks: &[u8], frames: usize, height: usize, width: usize) -> Vec<u8> {
    let n = height * width;
    assert_eq!(masks.len(), frames * n);
    let header = format!("P5\n{width} {height}\n255\n");
    let mut out = Vec::with_capacity(frames * (header.len() + n));
    for f in 0..frames {
        out.extend_from_slice(header.as_bytes());
        out.extend(masks[f * n..(f + 1) * n].iter().map(|&m| if m != 0 { 255u8 } else { 0 }));
    }
    out
}

/// Decodes concatenated P5 masks; any pixel above 127 is foreground.
pub fn decode_masks(bytes: &[u8], path: &Path, frames: usize, height: usize, width: usize) -> Result<Vec<u8>> {
    let n = height * width;
    let header = format!("P5\n{width} {height}\n255\n");
    let expected = frames * (header.len() + n);
    if bytes.len() != expected {
        return Err(SlvError::load(
            path,
            format!(
                "expected {expected} bytes ({frames} P5 frames of {width}x{height}), found {}",
                bytes.len()
            ),
        ));
    }
    let mut out = Vec::with_capacity(frames * n);
    let mut rest = bytes;
    for f in 0..frames {
        if !rest.starts_with(header.as_bytes()) {
            return Err(SlvError::load(path, format!("frame {f}: malformed P5 header")));
        }
        rest = &rest[header.len()..];
        out.extend(rest[..n].iter().map(|&v| u8::from(v > 127)));
        rest = &rest[n..];
    }
    Ok(out)
}

/// Encodes an RGB image (`height x width x 3` bytes) as P6.
pub fn encode_ppm(rgb: &[u8], height: usize, width: usize) -> Vec<u8> {
    assert_eq!(rgb.len(), height * width * 3);
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    out
}
