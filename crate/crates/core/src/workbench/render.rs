//! Heatmap rendering as binary portable pixmaps (P6).

use crate::attribution::AttributionMap;
use crate::spectral::ImageTensor;

#[derive(Debug, thiserror::Error)]
pub enum RenderError {
    #[error("map is {map_h}x{map_w} but underlay is {img_h}x{img_w}")]
    ShapeMismatch { map_h: usize, map_w: usize, img_h: usize, img_w: usize },
}

/// Render a side-by-side P6 pixmap: left the grayscale underlay, right the
/// signed attribution overlay with positive values as green intensity and
/// negative as red, each channel scaled by `max |A|`. An all-zero map
/// renders a neutral (black) overlay.
pub fn render_heatmap(
    attr: &AttributionMap,
    underlay: &ImageTensor,
) -> Result<Vec<u8>, RenderError> {
    if attr.h != underlay.h || attr.w != underlay.w {
        return Err(RenderError::ShapeMismatch {
            map_h: attr.h,
            map_w: attr.w,
            img_h: underlay.h,
            img_w: underlay.w,
        });
    }
    let (h, w) = (attr.h, attr.w);
    let max_abs = attr.values.iter().fold(0.0f32, |m, &v| m.max(v.abs()));

    let mut bytes = Vec::with_capacity(64 + h * 2 * w * 3);
    bytes.extend_from_slice(format!("P6\n{} {}\n255\n", 2 * w, h).as_bytes());
    for row in 0..h {
        // Left: underlay in gray.
        for col in 0..w {
            let g = (underlay.at(row, col).clamp(0.0, 1.0) * 255.0).round() as u8;
            bytes.extend_from_slice(&[g, g, g]);
        }
        // Right: signed overlay.
        for col in 0..w {
            let a = attr.at(row, col);
            let (r, g) = if max_abs > 0.0 {
                let r = ((-a).max(0.0) / max_abs * 255.0).round() as u8;
                let g = (a.max(0.0) / max_abs * 255.0).round() as u8;
                (r, g)
            } else {
                (0, 0)
            };
            bytes.extend_from_slice(&[r, g, 0]);
        }
    }
    Ok(bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map_1x1(v: f32) -> AttributionMap {
        AttributionMap {
            values: vec![v],
            h: 1,
            w: 1,
            method: "ig".into(),
            target_class: 0,
            baseline_ref: "zero".into(),
        }
    }

    fn pixel_at(bytes: &[u8], idx: usize) -> [u8; 3] {
        // Header "P6\n{w} {h}\n255\n" then raw RGB.
        let header_end = bytes
            .windows(4)
            .position(|w| w == b"255\n")
            .map(|p| p + 4)
            .unwrap();
        let p = &bytes[header_end + idx * 3..header_end + idx * 3 + 3];
        [p[0], p[1], p[2]]
    }

    #[test]
    fn positive_max_is_pure_green() {
        let img = ImageTensor::new(vec![0.0], 1, 1).unwrap();
        let bytes = render_heatmap(&map_1x1(0.7), &img).unwrap();
        assert_eq!(pixel_at(&bytes, 1), [0, 255, 0]);
    }

    #[test]
    fn negative_max_is_pure_red() {
        let img = ImageTensor::new(vec![0.0], 1, 1).unwrap();
        let bytes = render_heatmap(&map_1x1(-0.7), &img).unwrap();
        assert_eq!(pixel_at(&bytes, 1), [255, 0, 0]);
    }

    #[test]
    fn zero_map_renders_black_overlay() {
        let img = ImageTensor::new(vec![1.0], 1, 1).unwrap();
        let bytes = render_heatmap(&map_1x1(0.0), &img).unwrap();
        assert_eq!(pixel_at(&bytes, 0), [255, 255, 255], "underlay");
        assert_eq!(pixel_at(&bytes, 1), [0, 0, 0], "overlay");
    }

    #[test]
    fn rendering_is_deterministic() {
        let img = ImageTensor::new(vec![0.25, 0.5, 0.75, 1.0], 2, 2).unwrap();
        let attr = AttributionMap {
            values: vec![0.1, -0.4, 0.0, 0.9],
            h: 2,
            w: 2,
            method: "ig".into(),
            target_class: 1,
            baseline_ref: "zero".into(),
        };
        assert_eq!(
            render_heatmap(&attr, &img).unwrap(),
            render_heatmap(&attr, &img).unwrap()
        );
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let img = ImageTensor::new(vec![0.0; 4], 2, 2).unwrap();
        assert!(render_heatmap(&map_1x1(1.0), &img).is_err());
    }
}
