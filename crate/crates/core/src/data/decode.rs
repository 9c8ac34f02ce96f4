use super::quality::ImageRecord;
use super::DataError;
use crate::augment::{crop_resize, CropBox};
use crate::tensor::Tensor;

/// Decodes encoded bytes to an RGB `[3, H, W]` tensor in `[0, 1]`.
pub fn decode_rgb(bytes: &[u8]) -> Result<Tensor, image::ImageError> {
    let img = image::load_from_memory(bytes)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    let mut data = vec![0.0f32; 3 * h * w];
    for (i, px) in raw.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * h * w + i] = px[c] as f32 / 255.0;
        }
    }
    Ok(Tensor::new([3, h, w], data).expect("decoded image has positive extents"))
}

/// Bilinear resize of a `[C, H, W]` tensor to `(height, width)`.
pub fn resize(image: &Tensor, size: (usize, usize)) -> Tensor {
    let s = image.shape();
    if (s[1], s[2]) == size {
        return image.clone();
    }
    crop_resize(image, CropBox { top: 0, left: 0, height: s[1], width: s[2] }, size.0, size.1).expect("full-image crop is valid")
}

/// RGB (grayscale expanded), bilinear-resized to `size`, scaled to `[0, 1]`.
pub fn decode_resize(record: &ImageRecord, size: (usize, usize)) -> Result<Tensor, DataError> {
    let img = decode_rgb(&record.bytes).map_err(|e| DataError::Decode { id: record.id.clone(), reason: e.to_string() })?;
    Ok(resize(&img, size))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::quality::QualityChecker;
    use image::{GrayImage, ImageEncoder, RgbImage};

    fn encode_rgb(img: &RgbImage) -> Vec<u8> {
        let mut out = Vec::new();
        image::codecs::png::PngEncoder::new(&mut out).write_image(img.as_raw(), img.width(), img.height(), image::ExtendedColorType::Rgb8).unwrap();
        out
    }

    fn record(bytes: Vec<u8>) -> ImageRecord {
        QualityChecker::new(1).check_bytes("x", None, &bytes).unwrap()
    }

    #[test]
    fn solid_images() {
        let white = record(encode_rgb(&RgbImage::from_pixel(5, 7, image::Rgb([255, 255, 255]))));
        assert!(decode_resize(&white, (4, 4)).unwrap().data().iter().all(|&v| v == 1.0));
        let black = record(encode_rgb(&RgbImage::from_pixel(5, 7, image::Rgb([0, 0, 0]))));
        assert!(decode_resize(&black, (9, 3)).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn grayscale_is_expanded() {
        let g = GrayImage::from_fn(3, 2, |x, _| image::Luma([(x * 100) as u8]));
        let mut out = Vec::new();
        image::codecs::png::PngEncoder::new(&mut out).write_image(g.as_raw(), 3, 2, image::ExtendedColorType::L8).unwrap();
        let t = decode_resize(&record(out), (2, 3)).unwrap();
        assert_eq!(t.shape(), &[3, 2, 3]);
        assert_eq!(t.data()[..6], t.data()[6..12]);
        assert!((t.data()[1] - 100.0 / 255.0).abs() < 1e-7);
    }

    #[test]
    fn checkerboard_corners_survive_upsampling() {
        let img = RgbImage::from_fn(2, 2, |x, y| if (x + y) % 2 == 0 { image::Rgb([0, 0, 0]) } else { image::Rgb([255, 255, 255]) });
        let t = decode_resize(&record(encode_rgb(&img)), (4, 4)).unwrap();
        for c in 0..3 {
            let p = &t.data()[c * 16..(c + 1) * 16];
            assert_eq!((p[0], p[3], p[12], p[15]), (0.0, 1.0, 1.0, 0.0));
        }
    }

    #[test]
    fn corrupted_record_is_an_error() {
        let mut r = record(encode_rgb(&RgbImage::from_pixel(4, 4, image::Rgb([1, 2, 3]))));
        r.bytes.truncate(20);
        assert!(matches!(decode_resize(&r, (4, 4)), Err(DataError::Decode { .. })));
    }
}
