use std::path::Path;

use crate::error::{arg_err, Result};

/// Something that can be written as a binary PGM/PPM.
pub enum ImagePayload<'a> {
    /// Single channel in `[0, 1]`, written as PGM.
    Gray { width: usize, height: usize, values: &'a [f64] },
    /// Channel-major `3·h·w` in `[0, 1]`, written as PPM.
    Rgb { width: usize, height: usize, values: &'a [f64] },
    /// A channel-major image (1 or 3 channels) blended half and half with the
    /// colormapped `h·w` saliency, written as PPM.
    Overlay { width: usize, height: usize, channels: usize, image: &'a [f64], saliency: &'a [f64] },
}

/// `round(v·255)` clamped to a byte; non-finite values map to 0.
pub fn quantize(v: f64) -> u8 {
    if !v.is_finite() {
        return 0;
    }
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Blue → green → red ramp over `[0, 1]`.
pub fn colormap(v: f64) -> [f64; 3] {
    let v = if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 };
    if v < 0.5 {
        let t = v * 2.0;
        [0.0, t, 1.0 - t]
    } else {
        let t = (v - 0.5) * 2.0;
        [t, 1.0 - t, 0.0]
    }
}

fn check(len: usize, expected: usize, what: &str) -> Result<()> {
    if len != expected || expected == 0 {
        return Err(arg_err("write_image", format!("{what} has {len} values, expected {expected}")));
    }
    Ok(())
}

pub fn encode_image(payload: &ImagePayload<'_>) -> Result<Vec<u8>> {
    match *payload {
        ImagePayload::Gray { width, height, values } => {
            check(values.len(), width * height, "gray image")?;
            let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
            out.extend(values.iter().map(|&v| quantize(v)));
            Ok(out)
        }
        ImagePayload::Rgb { width, height, values } => {
            let plane = width * height;
            check(values.len(), 3 * plane, "rgb image")?;
            let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
            for i in 0..plane {
                out.extend((0..3).map(|c| quantize(values[c * plane + i])));
            }
            Ok(out)
        }
        ImagePayload::Overlay { width, height, channels, image, saliency } => {
            let plane = width * height;
            if channels != 1 && channels != 3 {
                return Err(arg_err("write_image", format!("overlay needs 1 or 3 channels, got {channels}")));
            }
            check(image.len(), channels * plane, "overlay image")?;
            check(saliency.len(), plane, "saliency")?;
            let mut rgb = vec![0.0; 3 * plane];
            for i in 0..plane {
                let heat = colormap(saliency[i]);
                for c in 0..3 {
                    let base = image[(if channels == 1 { 0 } else { c }) * plane + i].clamp(0.0, 1.0);
                    rgb[c * plane + i] = 0.5 * base + 0.5 * heat[c];
                }
            }
            encode_image(&ImagePayload::Rgb { width, height, values: &rgb })
        }
    }
}

pub fn write_image(path: &Path, payload: &ImagePayload<'_>) -> Result<()> {
    std::fs::write(path, encode_image(payload)?)?;
    Ok(())
}
