//! 8-bit grayscale PNG encode/decode for canvases.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `round(clamp01(v) * 255)`.
pub fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encodes `[0, 1]` values with the given `width` as a grayscale PNG.
pub fn encode_png(values: &[f32], width: usize) -> Result<Vec<u8>> {
    if width == 0 || values.is_empty() || values.len() % width != 0 {
        return Err(Error::Png(format!(
            "{} values do not form rows of width {width}",
            values.len()
        )));
    }
    let height = values.len() / width;
    let bytes: Vec<u8> = values.iter().map(|&v| to_byte(v)).collect();
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().map_err(|e| Error::Png(e.to_string()))?;
        w.write_image_data(&bytes)
            .map_err(|e| Error::Png(e.to_string()))?;
    }
    Ok(out)
}

/// Encodes a network-range image (`[-1, 1]`, last axis is the width).
pub fn encode_network_png(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let width = *image.shape().last().expect("tensors have rank >= 1");
    let unit: Vec<f32> = image.data().iter().map(|&v| (v + 1.0) / 2.0).collect();
    encode_png(&unit, width)
}

/// Decodes an 8-bit grayscale PNG to `[1, H, W]` in `[0, 1]`.
pub fn decode_png(bytes: &[u8]) -> Result<Tensor<f32>> {
    let decoder = png::Decoder::new(bytes);
    let mut reader = decoder.read_info().map_err(|e| Error::Png(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Png(e.to_string()))?;
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Png(format!(
            "expected 8-bit grayscale, found {:?} {:?}",
            info.color_type, info.bit_depth
        )));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let data = buf[..w * h].iter().map(|&b| f32::from(b) / 255.0).collect();
    Tensor::new(vec![1, h, w], data)
}

pub fn write_png(path: impl AsRef<Path>, values: &[f32], width: usize) -> Result<()> {
    std::fs::write(path, encode_png(values, width)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_quantizes_to_bytes() {
        let values: Vec<f32> = (0..28 * 112).map(|i| (i % 256) as f32 / 255.0).collect();
        let png = encode_png(&values, 112).unwrap();
        let back = decode_png(&png).unwrap();
        assert_eq!(back.shape(), &[1, 28, 112]);
        for (a, b) in values.iter().zip(back.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn clamps_and_rounds() {
        assert_eq!(to_byte(-0.5), 0);
        assert_eq!(to_byte(2.0), 255);
        assert_eq!(to_byte(0.5), 128);
        let net = Tensor::new(vec![1, 1, 2], vec![-1.0, 1.0]).unwrap();
        let back = decode_png(&encode_network_png(&net).unwrap()).unwrap();
        assert_eq!(back.data(), &[0.0, 1.0]);
    }

    #[test]
    fn rejects_ragged_rows() {
        assert!(encode_png(&[0.0; 5], 2).is_err());
    }
}
