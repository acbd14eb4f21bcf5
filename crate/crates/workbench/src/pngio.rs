//! 8-bit PNG encoding of images and attention heatmaps.

use gradia_core::grid::{Grid, Image};

use crate::error::{Result, WorkbenchError};

fn encode(width: usize, height: usize, color: png::ColorType, data: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    let mut encoder = png::Encoder::new(&mut out, width as u32, height as u32);
    encoder.set_color(color);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder
        .write_header()
        .map_err(|e| WorkbenchError::Runtime(format!("png header: {e}")))?;
    writer
        .write_image_data(data)
        .map_err(|e| WorkbenchError::Runtime(format!("png data: {e}")))?;
    writer
        .finish()
        .map_err(|e| WorkbenchError::Runtime(format!("png finish: {e}")))?;
    Ok(out)
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Grayscale PNG of a single-channel image with values in `[0, 1]`.
pub fn encode_gray(image: &Image) -> Result<Vec<u8>> {
    if image.channels() != 1 {
        return Err(WorkbenchError::Config(format!(
            "grayscale PNG needs one channel, image has {}",
            image.channels()
        )));
    }
    let bytes: Vec<u8> = image.as_slice().iter().map(|&v| to_byte(v)).collect();
    encode(image.width(), image.height(), png::ColorType::Grayscale, &bytes)
}

/// Inverse of [`encode_gray`]: byte `b` becomes `b / 255`.
pub fn decode_gray(bytes: &[u8]) -> Result<Image> {
    let bad = |e: String| WorkbenchError::Config(format!("not a readable PNG: {e}"));
    let decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    let mut reader = decoder.read_info().map_err(|e| bad(e.to_string()))?;
    let info = reader.info();
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Eight {
        return Err(bad(format!(
            "expected 8-bit grayscale, got {:?} at {:?}",
            info.color_type, info.bit_depth
        )));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let mut buf = vec![0u8; reader.output_buffer_size().ok_or_else(|| bad("image too large".into()))?];
    let frame = reader.next_frame(&mut buf).map_err(|e| bad(e.to_string()))?;
    let data = buf[..frame.buffer_size()].iter().map(|&b| f64::from(b) / 255.0).collect();
    Ok(Image::from_vec(1, h, w, data)?)
}

/// Blue → cyan → yellow → red ramp for a value in `[0, 1]`.
pub fn heat_color(v: f64) -> [u8; 3] {
    let v = v.clamp(0.0, 1.0);
    let stops: [(f64, [f64; 3]); 4] = [
        (0.0, [0.0, 0.0, 0.5]),
        (1.0 / 3.0, [0.0, 0.8, 1.0]),
        (2.0 / 3.0, [1.0, 0.9, 0.0]),
        (1.0, [0.8, 0.0, 0.0]),
    ];
    let i = stops.iter().rposition(|s| s.0 <= v).unwrap_or(0).min(stops.len() - 2);
    let (a, b) = (stops[i], stops[i + 1]);
    let t = (v - a.0) / (b.0 - a.0);
    [0, 1, 2].map(|c| to_byte(a.1[c] + t * (b.1[c] - a.1[c])))
}

/// RGB heatmap PNG of a grid with values in `[0, 1]`.
pub fn encode_heatmap(grid: &Grid) -> Result<Vec<u8>> {
    let bytes: Vec<u8> = grid.as_slice().iter().flat_map(|&v| heat_color(v)).collect();
    encode(grid.cols(), grid.rows(), png::ColorType::Rgb, &bytes)
}
