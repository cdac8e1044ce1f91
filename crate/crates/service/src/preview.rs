//! 8-bit PNG previews of tile blocks for annotators.
//!
//! Thermal and LiDAR are drawn as grayscale stretched over the tile's own
//! min-max; RGB is stretched per channel.

use base64::Engine;
use rarequery_core::tilestore::Band;

fn stretch(values: impl Iterator<Item = f32> + Clone) -> impl Fn(f32) -> u8 {
    let (lo, hi) = values.fold((f32::INFINITY, f32::NEG_INFINITY), |(l, h), v| {
        (l.min(v), h.max(v))
    });
    move |v| {
        if hi > lo {
            (((v - lo) / (hi - lo)) * 255.0).round().clamp(0.0, 255.0) as u8
        } else {
            0
        }
    }
}

pub fn render_png(
    block: &[f32],
    height: usize,
    width: usize,
    channels: usize,
    band: Band,
) -> Vec<u8> {
    let (color, bytes): (_, Vec<u8>) = if band == Band::Rgb && channels == 3 {
        let maps: Vec<_> = (0..3)
            .map(|c| stretch(block.iter().skip(c).step_by(3).copied()))
            .collect();
        let bytes = block
            .iter()
            .enumerate()
            .map(|(i, &v)| maps[i % 3](v))
            .collect();
        (png::ColorType::Rgb, bytes)
    } else {
        let plane = block.iter().step_by(channels.max(1)).copied();
        let map = stretch(plane.clone());
        (png::ColorType::Grayscale, plane.map(map).collect())
    };
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().expect("in-memory png header");
        writer.write_image_data(&bytes).expect("in-memory png data");
    }
    out
}

pub fn render_base64(
    block: &[f32],
    height: usize,
    width: usize,
    channels: usize,
    band: Band,
) -> String {
    base64::engine::general_purpose::STANDARD
        .encode(render_png(block, height, width, channels, band))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_signature_and_size() {
        let block: Vec<f32> = (0..16).map(|v| v as f32).collect();
        let png = render_png(&block, 4, 4, 1, Band::Thermal);
        assert_eq!(&png[..8], b"\x89PNG\r\n\x1a\n");
        let rgb = render_png(&[0.5; 4 * 4 * 3], 4, 4, 3, Band::Rgb);
        assert_eq!(&rgb[..8], b"\x89PNG\r\n\x1a\n");
    }
}
