//! Procedural toy faces.
//!
//! Identities are parameter vectors (colours and facial geometry). Rendering
//! adds per-photo nuisance (position, scale, expression, background) and the
//! optional visual effect of an editing prompt. These renders play the role
//! of the real-face corpus and of the concepts the toy diffusion backend is
//! pre-trained on.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::image::Image;
use crate::rng::{self, SeededRng};

/// Canvas size the geometry below is expressed in.
const BASE: f64 = 64.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaceParams {
    pub skin: [f64; 3],
    pub hair: [f64; 3],
    pub eyes: [f64; 3],
    pub lips: [f64; 3],
    pub face_rx: f64,
    pub face_ry: f64,
    pub eye_dx: f64,
    pub eye_y: f64,
    pub eye_r: f64,
    pub mouth_w: f64,
    pub mouth_y: f64,
    pub hair_top: f64,
    pub hair_side: f64,
    pub hair_len: f64,
}

impl FaceParams {
    pub fn random(rng: &mut impl Rng) -> Self {
        let mut u = |lo: f64, hi: f64| lo + (hi - lo) * rng.random::<f64>();
        let tone = u(0.0, 1.0);
        let skin = [
            0.95 - 0.75 * tone + u(-0.08, 0.08),
            0.65 - 0.75 * tone + u(-0.12, 0.12),
            0.45 - 0.7 * tone + u(-0.15, 0.15),
        ];
        let hair_kind = u(0.0, 1.0);
        let hair = if hair_kind < 0.45 {
            let d = u(-0.95, -0.55);
            [d + u(0.0, 0.15), d + u(0.0, 0.1), d]
        } else if hair_kind < 0.75 {
            [u(-0.3, 0.4), u(-0.6, 0.0), u(-0.9, -0.5)]
        } else if hair_kind < 0.9 {
            [u(0.3, 0.8), u(0.1, 0.6), u(-0.6, 0.0)]
        } else {
            let g = u(0.2, 0.7);
            [g, g, g + u(0.0, 0.1)]
        };
        let eyes = [u(-0.9, -0.2), u(-0.8, 0.2), u(-0.8, 0.5)];
        let lips = [u(0.1, 0.7), u(-0.7, -0.2), u(-0.6, -0.2)];
        Self {
            skin: skin.map(|c| c.clamp(-0.9, 0.95)),
            hair,
            eyes,
            lips,
            face_rx: u(10.0, 14.0),
            face_ry: u(13.0, 17.0),
            eye_dx: u(4.0, 6.5),
            eye_y: u(-5.5, -2.0),
            eye_r: u(1.4, 2.6),
            mouth_w: u(3.0, 6.5),
            mouth_y: u(5.0, 8.5),
            hair_top: u(1.5, 7.0),
            hair_side: u(0.5, 4.0),
            hair_len: u(-4.0, 10.0),
        }
    }

    pub fn from_seed(seed: u64) -> Self {
        Self::random(&mut rng::rng(seed))
    }

    /// Stable identity attached to a name; the toy backend learns these.
    pub fn for_name(name: &str) -> Self {
        Self::from_seed(rng::derive_seed(0, &["celebrity", &name.to_lowercase()]))
    }
}

/// Visual effect of an editing prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Edit {
    OilPainting,
    Watercolor,
    PencilArt,
    Fauvism,
    Wizard,
    Hat,
    Chef,
    Nurse,
    Police,
}

impl Edit {
    pub const ALL: [Edit; 9] = [
        Edit::OilPainting,
        Edit::Watercolor,
        Edit::PencilArt,
        Edit::Fauvism,
        Edit::Wizard,
        Edit::Hat,
        Edit::Chef,
        Edit::Nurse,
        Edit::Police,
    ];

    /// Effect described by a prompt, if any.
    pub fn from_prompt(prompt: &str) -> Option<Edit> {
        let p = prompt.to_lowercase();
        let table = [
            ("oil painting", Edit::OilPainting),
            ("watercolor", Edit::Watercolor),
            ("pencil", Edit::PencilArt),
            ("fauvism", Edit::Fauvism),
            ("wizard", Edit::Wizard),
            ("chef", Edit::Chef),
            ("nurse", Edit::Nurse),
            ("police", Edit::Police),
            ("hat", Edit::Hat),
        ];
        table
            .iter()
            .find(|(k, _)| p.contains(k))
            .map(|(_, e)| *e)
    }
}

/// Per-photo nuisance factors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderOpts {
    pub size: usize,
    pub offset: (f64, f64),
    pub scale: f64,
    pub smile: f64,
    pub background: [f64; 3],
    pub edit: Option<Edit>,
}

impl Default for RenderOpts {
    fn default() -> Self {
        Self {
            size: 64,
            offset: (0.0, 0.0),
            scale: 1.0,
            smile: 0.3,
            background: [0.55, 0.55, 0.6],
            edit: None,
        }
    }
}

impl RenderOpts {
    pub fn jittered(rng: &mut SeededRng, size: usize) -> Self {
        let mut u = |lo: f64, hi: f64| lo + (hi - lo) * rng.random::<f64>();
        let bg = u(0.4, 0.75);
        Self {
            size,
            offset: (u(-2.5, 2.5), u(-2.0, 2.0)),
            scale: u(0.92, 1.08),
            smile: u(-0.6, 1.0),
            background: [bg + u(-0.05, 0.05), bg + u(-0.05, 0.05), bg + u(-0.05, 0.1)],
            edit: None,
        }
    }

    pub fn with_edit(mut self, edit: Option<Edit>) -> Self {
        self.edit = edit;
        self
    }
}

fn coverage(sd: f64) -> f64 {
    (0.5 - sd).clamp(0.0, 1.0)
}

fn ellipse_sd(x: f64, y: f64, cx: f64, cy: f64, rx: f64, ry: f64) -> f64 {
    let dx = (x - cx) / rx;
    let dy = (y - cy) / ry;
    ((dx * dx + dy * dy).sqrt() - 1.0) * rx.min(ry)
}

fn blend(dst: &mut [f64; 3], src: [f64; 3], a: f64) {
    for k in 0..3 {
        dst[k] = dst[k] * (1.0 - a) + src[k] * a;
    }
}

/// Axis-aligned box signed distance.
fn box_sd(x: f64, y: f64, x0: f64, y0: f64, x1: f64, y1: f64) -> f64 {
    let dx = (x0 - x).max(x - x1);
    let dy = (y0 - y).max(y - y1);
    dx.max(dy)
}

pub fn render(face: &FaceParams, opts: &RenderOpts) -> Image {
    let n = opts.size;
    let s = n as f64 / BASE * opts.scale;
    let cx = n as f64 / 2.0 + opts.offset.0 * n as f64 / BASE;
    let cy = n as f64 / 2.0 + 3.0 * s + opts.offset.1 * n as f64 / BASE;
    let mut img = Image::filled(n, n, opts.background);
    let (rx, ry) = (face.face_rx * s, face.face_ry * s);
    let head_top = cy - ry;

    for py in 0..n {
        for px in 0..n {
            let x = px as f64 + 0.5;
            let y = py as f64 + 0.5;
            let mut c = opts.background;

            // hair mass behind the head
            let hrx = rx + face.hair_side * s;
            let hry = ry + face.hair_top * s;
            let hair_cy = cy - face.hair_top * s * 0.5;
            let cut = cy + face.hair_len * s;
            let a = coverage(ellipse_sd(x, y, cx, hair_cy, hrx, hry)) * coverage(y - cut);
            blend(&mut c, face.hair, a);

            // face
            blend(&mut c, face.skin, coverage(ellipse_sd(x, y, cx, cy, rx, ry)));

            // fringe
            let fringe = coverage(ellipse_sd(x, y, cx, head_top + 2.0 * s, rx * 0.95, 4.5 * s))
                * coverage(y - (head_top + 3.0 * s));
            blend(&mut c, face.hair, fringe);

            // eyes
            let ey = cy + face.eye_y * s;
            for side in [-1.0, 1.0] {
                let ex = cx + side * face.eye_dx * s;
                let r = face.eye_r * s;
                blend(
                    &mut c,
                    [0.95, 0.95, 0.95],
                    coverage(ellipse_sd(x, y, ex, ey, r * 1.5, r)),
                );
                blend(&mut c, face.eyes, coverage(ellipse_sd(x, y, ex, ey, r * 0.8, r * 0.8)));
                blend(
                    &mut c,
                    face.hair,
                    coverage(box_sd(x, y, ex - r * 1.4, ey - r * 2.2, ex + r * 1.4, ey - r * 1.6)),
                );
            }

            // mouth: a parabola whose curvature is the smile
            let mw = face.mouth_w * s;
            let dx = (x - cx) / mw;
            if dx.abs() <= 1.0 {
                let mouth_line = cy + face.mouth_y * s + opts.smile * 2.0 * s * (1.0 - dx * dx);
                blend(&mut c, face.lips, coverage((y - mouth_line).abs() - 0.9 * s));
            }

            if let Some(edit) = opts.edit {
                accessory(&mut c, edit, x, y, cx, head_top, rx, s);
            }
            img.set_pixel(px, py, c.map(|v| v.clamp(-1.0, 1.0)));
        }
    }
    match opts.edit {
        Some(Edit::OilPainting) => oil_painting(&img),
        Some(Edit::Watercolor) => watercolor(&img),
        Some(Edit::PencilArt) => pencil(&img),
        Some(Edit::Fauvism) => fauvism(&img),
        _ => img,
    }
}

#[allow(clippy::too_many_arguments)]
fn accessory(c: &mut [f64; 3], edit: Edit, x: f64, y: f64, cx: f64, top: f64, rx: f64, s: f64) {
    match edit {
        Edit::Hat => {
            let brim = box_sd(x, y, cx - rx * 1.35, top - 1.0 * s, cx + rx * 1.35, top + 1.5 * s);
            let crown = box_sd(x, y, cx - rx * 0.8, top - 9.0 * s, cx + rx * 0.8, top);
            blend(c, [-0.2, -0.55, -0.8], coverage(brim.min(crown)));
        }
        Edit::Chef => {
            let band = box_sd(x, y, cx - rx * 0.9, top - 4.0 * s, cx + rx * 0.9, top + 2.0 * s);
            let puff = ellipse_sd(x, y, cx, top - 8.0 * s, rx * 1.1, 6.0 * s);
            blend(c, [0.98, 0.98, 0.98], coverage(band.min(puff)));
        }
        Edit::Wizard => {
            let h = 20.0 * s;
            let t = ((top + 1.0 * s) - y) / h;
            if (0.0..=1.0).contains(&t) {
                let half = rx * 1.2 * (1.0 - t);
                blend(c, [-0.3, -0.8, 0.5], coverage((x - cx).abs() - half));
            }
            blend(
                c,
                [0.9, 0.8, -0.6],
                coverage(ellipse_sd(x, y, cx + 2.0 * s, top - 8.0 * s, 1.8 * s, 1.8 * s)),
            );
        }
        Edit::Nurse => {
            let cap = box_sd(x, y, cx - rx * 0.75, top - 5.0 * s, cx + rx * 0.75, top + 1.5 * s);
            blend(c, [0.97, 0.97, 0.97], coverage(cap));
            let cross = box_sd(x, y, cx - 2.5 * s, top - 2.5 * s, cx + 2.5 * s, top - 1.2 * s)
                .min(box_sd(x, y, cx - 0.7 * s, top - 4.3 * s, cx + 0.7 * s, top + 0.6 * s));
            blend(c, [0.9, -0.8, -0.8], coverage(cross));
        }
        Edit::Police => {
            let cap = box_sd(x, y, cx - rx * 0.95, top - 6.0 * s, cx + rx * 0.95, top + 1.0 * s);
            let visor = box_sd(x, y, cx - rx * 1.1, top + 1.0 * s, cx + rx * 1.1, top + 2.5 * s);
            blend(c, [-0.8, -0.75, -0.3], coverage(cap.min(visor)));
            blend(
                c,
                [0.9, 0.75, -0.5],
                coverage(ellipse_sd(x, y, cx, top - 3.0 * s, 1.5 * s, 1.5 * s)),
            );
        }
        _ => {}
    }
}

fn map_pixels(img: &Image, f: impl Fn([f64; 3]) -> [f64; 3]) -> Image {
    let mut out = img.clone();
    for y in 0..img.height() {
        for x in 0..img.width() {
            out.set_pixel(x, y, f(img.pixel(x, y)).map(|v| v.clamp(-1.0, 1.0)));
        }
    }
    out
}

fn box_blur(img: &Image, r: isize) -> Image {
    let (w, h) = (img.width() as isize, img.height() as isize);
    let mut out = img.clone();
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0; 3];
            let mut n = 0.0;
            for dy in -r..=r {
                for dx in -r..=r {
                    let (sx, sy) = ((x + dx).clamp(0, w - 1), (y + dy).clamp(0, h - 1));
                    let p = img.pixel(sx as usize, sy as usize);
                    for k in 0..3 {
                        acc[k] += p[k];
                    }
                    n += 1.0;
                }
            }
            out.set_pixel(x as usize, y as usize, acc.map(|v| v / n));
        }
    }
    out
}

fn oil_painting(img: &Image) -> Image {
    map_pixels(img, |p| {
        let mean = (p[0] + p[1] + p[2]) / 3.0;
        p.map(|v| {
            let sat = mean + 1.6 * (v - mean);
            (sat * 2.0).round() / 2.0 * 0.9 + 0.05
        })
    })
}

fn watercolor(img: &Image) -> Image {
    let soft = box_blur(img, 1);
    map_pixels(&soft, |p| p.map(|v| 0.45 * v + 0.5))
}

fn pencil(img: &Image) -> Image {
    let (w, h) = (img.width(), img.height());
    let lum = |x: usize, y: usize| {
        let p = img.pixel(x.min(w - 1), y.min(h - 1));
        0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
    };
    let mut out = img.clone();
    for y in 0..h {
        for x in 0..w {
            let gx = lum(x + 1, y) - lum(x.saturating_sub(1), y);
            let gy = lum(x, y + 1) - lum(x, y.saturating_sub(1));
            let edge = (gx * gx + gy * gy).sqrt();
            let v = (0.85 - 2.2 * edge + 0.15 * lum(x, y)).clamp(-1.0, 1.0);
            out.set_pixel(x, y, [v, v, v * 0.98]);
        }
    }
    out
}

fn fauvism(img: &Image) -> Image {
    map_pixels(img, |p| {
        let mean = (p[0] + p[1] + p[2]) / 3.0;
        let r = [p[1], p[2], p[0]];
        r.map(|v| mean + 1.8 * (v - mean) + 0.1)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_is_deterministic_and_in_range() {
        let f = FaceParams::from_seed(5);
        let a = render(&f, &RenderOpts::default());
        let b = render(&f, &RenderOpts::default());
        assert_eq!(a, b);
        assert!(a.in_range());
        for e in Edit::ALL {
            assert!(render(&f, &RenderOpts::default().with_edit(Some(e))).in_range());
        }
    }

    #[test]
    fn identities_differ() {
        let a = render(&FaceParams::for_name("Ada Vell"), &RenderOpts::default());
        let b = render(&FaceParams::for_name("Bo Tarn"), &RenderOpts::default());
        assert_ne!(a, b);
        assert_eq!(FaceParams::for_name("Ada Vell"), FaceParams::for_name("ada vell"));
    }

    #[test]
    fn edit_keywords() {
        assert_eq!(
            Edit::from_prompt("Oil painting style, S* face"),
            Some(Edit::OilPainting)
        );
        assert_eq!(
            Edit::from_prompt("S* as a chef, looking at the camera"),
            Some(Edit::Chef)
        );
        assert_eq!(
            Edit::from_prompt("S* wearing a hat, looking at the camera"),
            Some(Edit::Hat)
        );
        assert_eq!(Edit::from_prompt("a photo of S* face"), None);
    }

    #[test]
    fn face_is_centred_on_canvas() {
        let img = render(&FaceParams::from_seed(1), &RenderOpts::default());
        let bg = RenderOpts::default().background;
        let centre = img.pixel(32, 36);
        let d: f64 = (0..3).map(|k| (centre[k] - bg[k]).abs()).sum();
        assert!(d > 0.1);
        assert_eq!(img.pixel(0, 63), bg);
    }
}
