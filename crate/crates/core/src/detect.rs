//! Face detection, alignment and the minimum-size filter.

use std::collections::VecDeque;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::encoder::{AlignedFace, FaceSource};
use crate::image::Image;

/// Axis-aligned box in pixel coordinates, `[x0, x1) × [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BoundingBox {
    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn short_side(&self) -> f64 {
        self.width().min(self.height())
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BoundingBox,
    /// Left and right eye centres, when found.
    pub eyes: Option<([f64; 2], [f64; 2])>,
}

/// Pluggable face detector.
pub trait FaceDetector: Send + Sync {
    /// The largest face in the image, if any.
    fn detect(&self, image: &Image) -> Option<Detection>;
}

/// Deterministic detector for the procedural faces: the largest connected
/// region that differs from the border colour, with eyes located from the
/// whites on either side of the box's upper-middle band.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyDetector {
    /// Colour distance from the background that counts as foreground.
    pub threshold: f64,
    /// Components with fewer pixels are ignored.
    pub min_pixels: usize,
}

impl Default for ToyDetector {
    fn default() -> Self {
        Self {
            threshold: 0.2,
            min_pixels: 24,
        }
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Every channel above this counts as eye white.
const SCLERA_MIN: f64 = 0.75;

impl ToyDetector {
    fn background(image: &Image) -> [f64; 3] {
        let (w, h) = (image.width(), image.height());
        let mut border = Vec::with_capacity(2 * (w + h));
        for x in 0..w {
            border.push(image.pixel(x, 0));
            border.push(image.pixel(x, h - 1));
        }
        for y in 1..h.saturating_sub(1) {
            border.push(image.pixel(0, y));
            border.push(image.pixel(w - 1, y));
        }
        [0, 1, 2].map(|k| median(border.iter().map(|p| p[k]).collect()))
    }

    /// Pixels of the largest 4-connected foreground component.
    fn largest_component(&self, image: &Image) -> Vec<(usize, usize)> {
        let (w, h) = (image.width(), image.height());
        let bg = Self::background(image);
        let fg: Vec<bool> = (0..w * h)
            .map(|i| dist(image.pixel(i % w, i / w), bg) > self.threshold)
            .collect();
        let mut seen = vec![false; w * h];
        let mut best: Vec<(usize, usize)> = Vec::new();
        for start in 0..w * h {
            if !fg[start] || seen[start] {
                continue;
            }
            let mut comp = Vec::new();
            let mut queue = VecDeque::from([start]);
            seen[start] = true;
            while let Some(i) = queue.pop_front() {
                let (x, y) = (i % w, i / w);
                comp.push((x, y));
                let mut visit = |j: usize| {
                    if fg[j] && !seen[j] {
                        seen[j] = true;
                        queue.push_back(j);
                    }
                };
                if x > 0 {
                    visit(i - 1);
                }
                if x + 1 < w {
                    visit(i + 1);
                }
                if y > 0 {
                    visit(i - w);
                }
                if y + 1 < h {
                    visit(i + w);
                }
            }
            // Ties keep the earlier component, so scanning order decides.
            if comp.len() > best.len() {
                best = comp;
            }
        }
        best
    }

    /// Eye centres as the centroids of the near-white sclera pixels on each
    /// side of the box's upper-middle band.
    fn find_eyes(image: &Image, bbox: &BoundingBox) -> Option<([f64; 2], [f64; 2])> {
        let (cx, _) = bbox.center();
        let y_lo = (bbox.y0 + 0.25 * bbox.height()).max(0.0) as usize;
        let y_hi = ((bbox.y0 + 0.65 * bbox.height()) as usize).min(image.height());
        let reach = 0.4 * bbox.width();
        let x_lo = (cx - reach).max(0.0) as usize;
        let x_hi = ((cx + reach) as usize).min(image.width());
        let mut sums = [[0.0; 3]; 2];
        for y in y_lo..y_hi {
            for x in x_lo..x_hi {
                let p = image.pixel(x, y);
                if p.iter().copied().fold(f64::INFINITY, f64::min) > SCLERA_MIN {
                    let side = usize::from(x as f64 + 0.5 >= cx);
                    sums[side][0] += x as f64 + 0.5;
                    sums[side][1] += y as f64 + 0.5;
                    sums[side][2] += 1.0;
                }
            }
        }
        if sums.iter().any(|s| s[2] < 2.0) {
            return None;
        }
        let [l, r] = sums.map(|s| [s[0] / s[2], s[1] / s[2]]);
        let sep = r[0] - l[0];
        if sep < 0.15 * bbox.width() || (r[1] - l[1]).abs() > 0.5 * sep {
            return None;
        }
        Some((l, r))
    }
}

impl FaceDetector for ToyDetector {
    fn detect(&self, image: &Image) -> Option<Detection> {
        let comp = self.largest_component(image);
        if comp.len() < self.min_pixels {
            return None;
        }
        let bbox = BoundingBox {
            x0: comp.iter().map(|p| p.0).min()? as f64,
            y0: comp.iter().map(|p| p.1).min()? as f64,
            x1: comp.iter().map(|p| p.0).max()? as f64 + 1.0,
            y1: comp.iter().map(|p| p.1).max()? as f64 + 1.0,
        };
        let eyes = Self::find_eyes(image, &bbox);
        Some(Detection { bbox, eyes })
    }
}

/// Why a candidate image produced no aligned face.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "kebab-case")]
pub enum Rejection {
    NoFace,
    TooSmall { short_side: f64, min_side: f64 },
}

impl Rejection {
    pub fn code(&self) -> &'static str {
        match self {
            Rejection::NoFace => "no-face",
            Rejection::TooSmall { .. } => "too-small",
        }
    }
}

impl fmt::Display for Rejection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Rejection::NoFace => write!(f, "no face"),
            Rejection::TooSmall {
                short_side,
                min_side,
            } => write!(f, "face short side {short_side} is not above {min_side}"),
        }
    }
}

/// Full-scale minimum face size at full-scale resolution.
pub const FULL_SCALE_MIN_SIDE: f64 = 128.0;
pub const FULL_SCALE_RESOLUTION: f64 = 512.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CropConfig {
    /// Side of the aligned output crop.
    pub output_size: usize,
    /// Faces whose box short side is not strictly larger are rejected.
    /// `None` scales the full-scale threshold to the image size.
    pub min_side: Option<f64>,
    /// Extra context around the box, as a fraction of its long side.
    pub margin: f64,
    /// Roll estimates from eye landmarks are applied only inside
    /// `[min, max]` degrees; smaller ones are landmark jitter.
    pub min_roll_degrees: f64,
    pub max_roll_degrees: f64,
}

impl Default for CropConfig {
    fn default() -> Self {
        Self {
            output_size: 64,
            min_side: None,
            margin: 0.15,
            min_roll_degrees: 6.0,
            max_roll_degrees: 15.0,
        }
    }
}

impl CropConfig {
    pub fn min_side_for(&self, image: &Image) -> f64 {
        self.min_side.unwrap_or_else(|| {
            let short = image.width().min(image.height()) as f64;
            FULL_SCALE_MIN_SIDE * short / FULL_SCALE_RESOLUTION
        })
    }
}

/// Square crop around the detection, rotated upright by the eye line and
/// resampled bilinearly to `output_size`.
pub fn align_crop(image: &Image, det: &Detection, cfg: &CropConfig) -> Image {
    let (cx, cy) = det.bbox.center();
    let side = det.bbox.width().max(det.bbox.height()) * (1.0 + cfg.margin);
    let roll = det
        .eyes
        .map(|(l, r)| (r[1] - l[1]).atan2(r[0] - l[0]))
        .filter(|a| {
            (cfg.min_roll_degrees.to_radians()..=cfg.max_roll_degrees.to_radians()).contains(&a.abs())
        })
        .unwrap_or(0.0);
    let (sin, cos) = roll.sin_cos();
    let n = cfg.output_size;
    let step = side / n as f64;
    let mut out = Image::filled(n, n, [0.0; 3]);
    for v in 0..n {
        for u in 0..n {
            let du = (u as f64 + 0.5) * step - side / 2.0;
            let dv = (v as f64 + 0.5) * step - side / 2.0;
            let x = cx + du * cos - dv * sin;
            let y = cy + du * sin + dv * cos;
            out.set_pixel(u, v, image.sample(x - 0.5, y - 0.5));
        }
    }
    out
}

/// Detects, size-filters and aligns the largest face.
pub fn crop_align_filter(
    detector: &dyn FaceDetector,
    image: &Image,
    cfg: &CropConfig,
    identity_id: &str,
    source: FaceSource,
) -> std::result::Result<AlignedFace, Rejection> {
    let det = detector.detect(image).ok_or(Rejection::NoFace)?;
    let min_side = cfg.min_side_for(image);
    let short_side = det.bbox.short_side();
    if short_side <= min_side {
        return Err(Rejection::TooSmall {
            short_side,
            min_side,
        });
    }
    let crop = align_crop(image, &det, cfg).clamped();
    AlignedFace::new(crop, identity_id, source).map_err(|_| Rejection::NoFace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::face::{render, FaceParams, RenderOpts};

    #[test]
    fn blank_image_has_no_face() {
        let img = Image::filled(64, 64, [0.2, 0.2, 0.2]);
        let r = crop_align_filter(&ToyDetector::default(), &img, &CropConfig::default(), "x", FaceSource::Real);
        assert_eq!(r.unwrap_err(), Rejection::NoFace);
    }

    #[test]
    fn square_box_is_found_exactly() {
        let mut img = Image::filled(40, 30, [0.5, 0.5, 0.5]);
        for y in 5..17 {
            for x in 8..28 {
                img.set_pixel(x, y, [-0.5, 0.0, 0.1]);
            }
        }
        let det = ToyDetector::default().detect(&img).unwrap();
        assert_eq!(
            det.bbox,
            BoundingBox {
                x0: 8.0,
                y0: 5.0,
                x1: 28.0,
                y1: 17.0
            }
        );
    }

    #[test]
    fn rendered_faces_have_eyes_and_an_upright_crop() {
        let f = FaceParams::from_seed(4);
        let img = render(&f, &RenderOpts::default());
        let det = ToyDetector::default().detect(&img).unwrap();
        let (l, r) = det.eyes.expect("eyes");
        assert!(l[0] < 32.0 && r[0] > 32.0);
        assert!((l[1] - r[1]).abs() < 1.5);
        let face = crop_align_filter(&ToyDetector::default(), &img, &CropConfig::default(), "a", FaceSource::Real)
            .unwrap();
        assert_eq!(face.resolution(), 64);
    }

    #[test]
    fn scaled_threshold() {
        let cfg = CropConfig::default();
        assert_eq!(cfg.min_side_for(&Image::filled(64, 64, [0.0; 3])), 16.0);
        assert_eq!(cfg.min_side_for(&Image::filled(512, 600, [0.0; 3])), 128.0);
    }
}
