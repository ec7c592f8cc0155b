//! Resampling between the network grid and original image resolution.

use crate::tensor::{ImageTensor, LabelMap};

/// Bilinear resize using pixel-center alignment.
pub fn resize_bilinear(img: &ImageTensor, height: usize, width: usize) -> ImageTensor {
    if img.height() == height && img.width() == width {
        return img.clone();
    }
    let sy = img.height() as f64 / height as f64;
    let sx = img.width() as f64 / width as f64;
    let max_y = img.height() - 1;
    let max_x = img.width() - 1;
    ImageTensor::from_fn(height, width, img.channels(), |y, x, c| {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, max_y as f64);
        let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, max_x as f64);
        let y0 = fy.floor() as usize;
        let x0 = fx.floor() as usize;
        let y1 = (y0 + 1).min(max_y);
        let x1 = (x0 + 1).min(max_x);
        let ty = fy - y0 as f64;
        let tx = fx - x0 as f64;
        let top = img.get(y0, x0, c) * (1.0 - tx) + img.get(y0, x1, c) * tx;
        let bottom = img.get(y1, x0, c) * (1.0 - tx) + img.get(y1, x1, c) * tx;
        top * (1.0 - ty) + bottom * ty
    })
}

/// Nearest-neighbour resize of a label map.
pub fn resize_nearest(labels: &LabelMap, height: usize, width: usize) -> LabelMap {
    if labels.height() == height && labels.width() == width {
        return labels.clone();
    }
    let sy = labels.height() as f64 / height as f64;
    let sx = labels.width() as f64 / width as f64;
    LabelMap::from_fn(height, width, |y, x| {
        let src_y = (((y as f64 + 0.5) * sy) as usize).min(labels.height() - 1);
        let src_x = (((x as f64 + 0.5) * sx) as usize).min(labels.width() - 1);
        labels.get(src_y, src_x)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_size_is_noop() {
        let img = ImageTensor::from_fn(3, 4, 1, |y, x, _| (y * 4 + x) as f64 / 12.0);
        assert_eq!(resize_bilinear(&img, 3, 4), img);
    }

    #[test]
    fn constant_image_stays_constant() {
        let img = ImageTensor::from_fn(5, 7, 3, |_, _, c| 0.1 * c as f64);
        let out = resize_bilinear(&img, 16, 16);
        for y in 0..16 {
            for x in 0..16 {
                for c in 0..3 {
                    assert!((out.get(y, x, c) - 0.1 * c as f64).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn nearest_doubling_replicates_blocks() {
        let m = LabelMap::new(2, 2, vec![0, 1, 2, 3]).unwrap();
        let up = resize_nearest(&m, 4, 4);
        assert_eq!(
            up.labels(),
            &[0, 0, 1, 1, 0, 0, 1, 1, 2, 2, 3, 3, 2, 2, 3, 3]
        );
    }
}
