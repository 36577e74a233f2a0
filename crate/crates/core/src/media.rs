//! Encoded image payloads passed between ingest, the detector backends and the
//! provider wire format.

use std::io::Cursor;
use std::path::Path;
use std::sync::Arc;

use base64::Engine;
use image::{DynamicImage, ImageFormat};
use serde::{Deserialize, Serialize};

/// Encoded raster bytes plus their media type. Cloning is cheap.
#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImagePayload {
    pub media_type: String,
    #[serde(with = "b64")]
    pub data: Arc<[u8]>,
}

impl std::fmt::Debug for ImagePayload {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ImagePayload")
            .field("media_type", &self.media_type)
            .field("len", &self.data.len())
            .finish()
    }
}

impl ImagePayload {
    pub fn new(media_type: impl Into<String>, data: impl Into<Arc<[u8]>>) -> Self {
        Self {
            media_type: media_type.into(),
            data: data.into(),
        }
    }

    pub fn read(path: &Path) -> std::io::Result<Self> {
        let data = std::fs::read(path)?;
        let media_type = media_type_for_path(path)
            .or_else(|| sniff_media_type(&data))
            .unwrap_or("application/octet-stream");
        Ok(Self::new(media_type, data))
    }

    pub fn base64(&self) -> String {
        base64::engine::general_purpose::STANDARD.encode(&self.data)
    }

    pub fn decode(&self) -> image::ImageResult<DynamicImage> {
        image::load_from_memory(&self.data)
    }

    /// Encodes `img` in the format named by `media_type`, PNG when unknown.
    pub fn encode(img: &DynamicImage, media_type: &str) -> image::ImageResult<Self> {
        let format = format_for_media_type(media_type).unwrap_or(ImageFormat::Png);
        let mut buf = Cursor::new(Vec::new());
        match format {
            // JPEG has no alpha channel.
            ImageFormat::Jpeg => DynamicImage::ImageRgb8(img.to_rgb8()).write_to(&mut buf, format)?,
            _ => img.write_to(&mut buf, format)?,
        }
        Ok(Self::new(
            media_type_for_format(format).unwrap_or("image/png"),
            buf.into_inner(),
        ))
    }

    pub fn extension(&self) -> &'static str {
        match self.media_type.as_str() {
            "image/jpeg" => "jpg",
            "image/bmp" => "bmp",
            "image/webp" => "webp",
            _ => "png",
        }
    }
}

pub fn media_type_for_path(path: &Path) -> Option<&'static str> {
    let ext = path.extension()?.to_str()?.to_ascii_lowercase();
    match ext.as_str() {
        "png" => Some("image/png"),
        "jpg" | "jpeg" => Some("image/jpeg"),
        "bmp" => Some("image/bmp"),
        "webp" => Some("image/webp"),
        _ => None,
    }
}

pub fn is_raster_path(path: &Path) -> bool {
    media_type_for_path(path).is_some()
}

fn sniff_media_type(data: &[u8]) -> Option<&'static str> {
    image::guess_format(data).ok().and_then(media_type_for_format)
}

fn format_for_media_type(media_type: &str) -> Option<ImageFormat> {
    match media_type {
        "image/png" => Some(ImageFormat::Png),
        "image/jpeg" => Some(ImageFormat::Jpeg),
        "image/bmp" => Some(ImageFormat::Bmp),
        _ => None,
    }
}

fn media_type_for_format(format: ImageFormat) -> Option<&'static str> {
    match format {
        ImageFormat::Png => Some("image/png"),
        ImageFormat::Jpeg => Some("image/jpeg"),
        ImageFormat::Bmp => Some("image/bmp"),
        ImageFormat::WebP => Some("image/webp"),
        _ => None,
    }
}

mod b64 {
    use std::sync::Arc;

    use base64::Engine;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(data: &Arc<[u8]>, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&base64::engine::general_purpose::STANDARD.encode(data))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Arc<[u8]>, D::Error> {
        let text = String::deserialize(d)?;
        base64::engine::general_purpose::STANDARD
            .decode(text)
            .map(Arc::from)
            .map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{Rgb, RgbImage};

    #[test]
    fn encode_decode_keeps_dimensions() {
        let img = DynamicImage::ImageRgb8(RgbImage::from_pixel(7, 5, Rgb([10, 20, 30])));
        let png = ImagePayload::encode(&img, "image/png").unwrap();
        assert_eq!(png.media_type, "image/png");
        let back = png.decode().unwrap();
        assert_eq!((back.width(), back.height()), (7, 5));
        let jpg = ImagePayload::encode(&img, "image/jpeg").unwrap();
        assert_eq!(jpg.extension(), "jpg");
        assert_eq!(sniff_media_type(&jpg.data), Some("image/jpeg"));
    }

    #[test]
    fn payload_serialises_as_base64() {
        let p = ImagePayload::new("image/png", vec![1u8, 2, 3]);
        let json = serde_json::to_string(&p).unwrap();
        assert_eq!(json, r#"{"media_type":"image/png","data":"AQID"}"#);
        let back: ImagePayload = serde_json::from_str(&json).unwrap();
        assert_eq!(back, p);
    }
}
