use image::{DynamicImage, GenericImage, GenericImageView, Rgba, RgbaImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::FrameSample;
use crate::media::ImagePayload;

#[derive(Debug, Error, PartialEq)]
pub enum CollageError {
    #[error("collage needs at least one frame")]
    Empty,
    #[error("columns must be positive")]
    NoColumns,
    #[error("frame {frame} is {got:?}, expected {expected:?}")]
    MixedDimensions {
        frame: u64,
        expected: (u32, u32),
        got: (u32, u32),
    },
    #[error("frame image error: {0}")]
    Image(String),
}

/// Where one frame landed in the collage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileRect {
    pub frame_number: u64,
    pub x: u32,
    pub y: u32,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone)]
pub struct Collage {
    pub image: ImagePayload,
    pub columns: u32,
    pub rows: u32,
    pub tiles: Vec<TileRect>,
}

/// Tiles `frames` row-major in the given order, `columns` per row (fewer when
/// there are fewer frames). Unused cells of the last row stay black. Each tile
/// carries its frame number in the top-left corner.
pub fn build_collage(frames: &[FrameSample], columns: u32) -> Result<Collage, CollageError> {
    if columns == 0 {
        return Err(CollageError::NoColumns);
    }
    let first = frames.first().ok_or(CollageError::Empty)?;
    let decoded: Vec<DynamicImage> = frames
        .iter()
        .map(|f| f.image.decode().map_err(|e| CollageError::Image(e.to_string())))
        .collect::<Result<_, _>>()?;
    let (tw, th) = decoded[0].dimensions();
    for (f, img) in frames.iter().zip(&decoded) {
        if img.dimensions() != (tw, th) {
            return Err(CollageError::MixedDimensions {
                frame: f.frame_number,
                expected: (tw, th),
                got: img.dimensions(),
            });
        }
    }

    let n = frames.len() as u32;
    let cols = columns.min(n);
    let rows = n.div_ceil(cols);
    let mut canvas = RgbaImage::from_pixel(cols * tw, rows * th, Rgba([0, 0, 0, 255]));
    let mut tiles = Vec::with_capacity(frames.len());
    for (i, (frame, img)) in frames.iter().zip(&decoded).enumerate() {
        let i = i as u32;
        let rect = TileRect {
            frame_number: frame.frame_number,
            x: (i % cols) * tw,
            y: (i / cols) * th,
            width: tw,
            height: th,
        };
        canvas
            .copy_from(&img.to_rgba8(), rect.x, rect.y)
            .map_err(|e| CollageError::Image(e.to_string()))?;
        draw_label(&mut canvas, &rect, &frame.frame_number.to_string());
        tiles.push(rect);
    }

    let media_type = if first.image.media_type == "image/jpeg" {
        "image/jpeg"
    } else {
        "image/png"
    };
    let image = ImagePayload::encode(&DynamicImage::ImageRgba8(canvas), media_type)
        .map_err(|e| CollageError::Image(e.to_string()))?;
    Ok(Collage {
        image,
        columns: cols,
        rows,
        tiles,
    })
}

// 3x5 glyphs, one row per byte, high bit on the left.
const DIGITS: [[u8; 5]; 10] = [
    [0b111, 0b101, 0b101, 0b101, 0b111],
    [0b010, 0b110, 0b010, 0b010, 0b111],
    [0b111, 0b001, 0b111, 0b100, 0b111],
    [0b111, 0b001, 0b111, 0b001, 0b111],
    [0b101, 0b101, 0b111, 0b001, 0b001],
    [0b111, 0b100, 0b111, 0b001, 0b111],
    [0b111, 0b100, 0b111, 0b101, 0b111],
    [0b111, 0b001, 0b010, 0b010, 0b010],
    [0b111, 0b101, 0b111, 0b101, 0b111],
    [0b111, 0b101, 0b111, 0b001, 0b111],
];

/// Size of the label box for `text` at `scale`, padding included.
fn label_size(text: &str, scale: u32) -> (u32, u32) {
    let n = text.len() as u32;
    ((4 * n + 1) * scale, 7 * scale)
}

fn draw_label(canvas: &mut RgbaImage, tile: &TileRect, text: &str) {
    let scale = (tile.height / 60).max(1);
    let (bw, bh) = label_size(text, scale);
    let bw = bw.min(tile.width);
    let bh = bh.min(tile.height);
    for y in 0..bh {
        for x in 0..bw {
            canvas.put_pixel(tile.x + x, tile.y + y, Rgba([0, 0, 0, 255]));
        }
    }
    for (k, ch) in text.bytes().enumerate() {
        let glyph = DIGITS[(ch - b'0') as usize];
        let gx = (1 + 4 * k as u32) * scale;
        for (row, bits) in glyph.iter().enumerate() {
            for col in 0..3u32 {
                if bits & (0b100 >> col) == 0 {
                    continue;
                }
                for dy in 0..scale {
                    for dx in 0..scale {
                        let x = gx + col * scale + dx;
                        let y = (1 + row as u32) * scale + dy;
                        if x < bw && y < bh {
                            canvas.put_pixel(tile.x + x, tile.y + y, Rgba([255, 255, 255, 255]));
                        }
                    }
                }
            }
        }
    }
}
