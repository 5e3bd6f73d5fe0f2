//! Deterministic integer rasterizer.
//!
//! Pixel decisions use integer arithmetic only; there is no anti-aliasing, so
//! object footprints (and therefore masks) are exact. The formulas are
//! written out in `docs/rendering.md`.
//!
//! Per pixel `(x, y)` of an object with base color `c`:
//!
//! - the pixel is *inside* when its center lies in the shape inscribed in the
//!   object's raster rectangle (rectangle, axis-aligned ellipse, or isosceles
//!   triangle with its apex at the top);
//! - it is *rim* when one of the four pixels at distance `t = rim_width(size)`
//!   along the axes is not inside;
//! - its color is `c - d` per channel, with `d = 56` on the rim and
//!   `d = pattern_darkening(material, hash(id), x, y)` elsewhere.

use image::RgbImage;
use thiserror::Error;

use super::{ObjectId, ObjectSpec, PixelRect, SceneState};
use crate::mask::BitMask;
use crate::par::{self, Exec};
use crate::scene::vocab::{Material, Shape, Size};

pub const MIN_RENDER_DIM: u32 = 16;
pub const RIM_DARKENING: u8 = 56;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RenderError {
    #[error("render dimensions {0}x{1} are below the {MIN_RENDER_DIM}px minimum")]
    DimensionTooSmall(u32, u32),
    #[error("unknown object `{0}`")]
    UnknownObject(ObjectId),
}

/// 64-bit FNV-1a of the object id.
pub fn object_hash(id: &ObjectId) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in id.as_str().bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Procedural material pattern: how much to darken pixel `(x, y)`.
pub fn pattern_darkening(material: Material, hash: u64, x: u32, y: u32) -> u8 {
    let (x, y) = (x as u64, y as u64);
    match material {
        Material::Matte => 0,
        Material::Striped => {
            let period = 6 + (hash >> 8) % 6;
            if ((x + y + hash % 97) / period) % 2 == 1 {
                40
            } else {
                0
            }
        }
        Material::Dotted => {
            let spacing = 8 + (hash >> 16) % 5;
            let ox = (hash >> 24) % spacing;
            let oy = (hash >> 32) % spacing;
            let dx = ((x + ox) % spacing) as i64 - (spacing / 2) as i64;
            let dy = ((y + oy) % spacing) as i64 - (spacing / 2) as i64;
            let radius = (spacing / 4) as i64;
            if dx * dx + dy * dy <= radius * radius {
                48
            } else {
                0
            }
        }
        Material::Glossy => {
            let t = (x + 2 * y + hash % 61) % 40;
            if t < 4 {
                48
            } else if t < 10 {
                24
            } else {
                0
            }
        }
    }
}

/// Rim thickness in pixels: 1/2/3 for small/medium/large, scaled by every
/// full 256 px of the shorter canvas side.
pub fn rim_width(size: Size, width: u32, height: u32) -> u32 {
    let base = match size {
        Size::Small => 1,
        Size::Medium => 2,
        Size::Large => 3,
    };
    base * (width.min(height) / 256).max(1)
}

fn shade(base: [u8; 3], darken: u8) -> [u8; 3] {
    base.map(|c| c.saturating_sub(darken))
}

/// An object prepared for rasterization at one resolution.
#[derive(Clone, Debug)]
pub(crate) struct Raster {
    pub rect: PixelRect,
    shape: Shape,
    material: Material,
    base: [u8; 3],
    hash: u64,
    rim: u32,
}

impl Raster {
    pub fn new(o: &ObjectSpec, width: u32, height: u32) -> Raster {
        Raster {
            rect: o.bbox.raster(width, height),
            shape: o.shape,
            material: o.material,
            base: o.color.rgb().to_array(),
            hash: object_hash(&o.id),
            rim: rim_width(o.size, width, height),
        }
    }

    /// Whether the center of pixel `(x, y)` lies in the shape.
    pub fn inside(&self, x: i64, y: i64) -> bool {
        let r = &self.rect;
        let (x0, y0) = (r.x as i64, r.y as i64);
        let (x1, y1) = (x0 + r.w as i64, y0 + r.h as i64);
        if x < x0 || x >= x1 || y < y0 || y >= y1 {
            return false;
        }
        // doubled coordinates keep pixel centers integral
        let (px, py) = (2 * x + 1, 2 * y + 1);
        match self.shape {
            Shape::Rectangle => true,
            Shape::Circle => {
                let (w, h) = (x1 - x0, y1 - y0);
                let dx = px - (x0 + x1);
                let dy = py - (y0 + y1);
                dx * dx * h * h + dy * dy * w * w <= w * w * h * h
            }
            Shape::Triangle => {
                let a = (x0 + x1, 2 * y0);
                let b = (2 * x0, 2 * y1);
                let c = (2 * x1, 2 * y1);
                let edge = |u: (i64, i64), v: (i64, i64)| (v.0 - u.0) * (py - u.1) - (v.1 - u.1) * (px - u.0);
                let (e0, e1, e2) = (edge(a, b), edge(b, c), edge(c, a));
                (e0 >= 0 && e1 >= 0 && e2 >= 0) || (e0 <= 0 && e1 <= 0 && e2 <= 0)
            }
        }
    }

    fn is_rim(&self, x: i64, y: i64) -> bool {
        let t = self.rim as i64;
        !(self.inside(x - t, y) && self.inside(x + t, y) && self.inside(x, y - t) && self.inside(x, y + t))
    }

    /// Color of an inside pixel.
    pub fn color_at(&self, x: u32, y: u32) -> [u8; 3] {
        let darken = if self.is_rim(x as i64, y as i64) {
            RIM_DARKENING
        } else {
            pattern_darkening(self.material, self.hash, x, y)
        };
        shade(self.base, darken)
    }
}

pub(crate) fn rasters(state: &SceneState, width: u32, height: u32) -> Vec<Raster> {
    state
        .draw_order()
        .into_iter()
        .map(|o| Raster::new(o, width, height))
        .collect()
}

/// Renders the whole canvas at `width x height`.
pub fn render(state: &SceneState, width: u32, height: u32) -> Result<RgbImage, RenderError> {
    render_window(state, width, height, PixelRect::full(width, height))
}

/// Same as [`render`] with an explicit execution mode.
pub fn render_with(exec: Exec, state: &SceneState, width: u32, height: u32) -> Result<RgbImage, RenderError> {
    render_window_with(exec, state, width, height, PixelRect::full(width, height))
}

/// Renders only `window` of the `width x height` canvas. Pixel `(i, j)` of
/// the result equals pixel `(window.x + i, window.y + j)` of [`render`].
pub fn render_window(state: &SceneState, width: u32, height: u32, window: PixelRect) -> Result<RgbImage, RenderError> {
    render_window_with(Exec::default(), state, width, height, window)
}

pub fn render_window_with(
    exec: Exec,
    state: &SceneState,
    width: u32,
    height: u32,
    window: PixelRect,
) -> Result<RgbImage, RenderError> {
    if width < MIN_RENDER_DIM || height < MIN_RENDER_DIM {
        return Err(RenderError::DimensionTooSmall(width, height));
    }
    let window = window.intersect(&PixelRect::full(width, height));
    let bg = state.background.rgb().to_array();
    let objs: Vec<Raster> = rasters(state, width, height)
        .into_iter()
        .filter(|r| r.rect.intersects(&window))
        .collect();
    let mut buf = vec![0u8; window.w as usize * window.h as usize * 3];
    par::for_each_row(exec, &mut buf, window.w as usize * 3, |j, row| {
        let y = window.y + j as u32;
        for px in row.chunks_exact_mut(3) {
            px.copy_from_slice(&bg);
        }
        for o in &objs {
            if y < o.rect.y || y >= o.rect.bottom() {
                continue;
            }
            let x0 = o.rect.x.max(window.x);
            let x1 = o.rect.right().min(window.right());
            for x in x0..x1 {
                if o.inside(x as i64, y as i64) {
                    let i = (x - window.x) as usize * 3;
                    row[i..i + 3].copy_from_slice(&o.color_at(x, y));
                }
            }
        }
    });
    Ok(RgbImage::from_raw(window.w, window.h, buf).expect("buffer sized to window"))
}

/// Pixels of the shape itself, ignoring occlusion.
pub fn footprint(state: &SceneState, id: &ObjectId, width: u32, height: u32) -> Result<BitMask, RenderError> {
    let o = state.object(id).ok_or_else(|| RenderError::UnknownObject(id.clone()))?;
    let r = Raster::new(o, width, height);
    let mut m = BitMask::new(width, height);
    for y in r.rect.y..r.rect.bottom() {
        for x in r.rect.x..r.rect.right() {
            if r.inside(x as i64, y as i64) {
                m.set(x, y, true);
            }
        }
    }
    Ok(m)
}

/// Exact visible footprint: the pixels [`render`] colors with this object
/// (shape pixels not covered by anything drawn later).
pub fn object_mask(state: &SceneState, id: &ObjectId, width: u32, height: u32) -> Result<BitMask, RenderError> {
    let order = state.draw_order();
    let idx = order
        .iter()
        .position(|o| &o.id == id)
        .ok_or_else(|| RenderError::UnknownObject(id.clone()))?;
    let me = Raster::new(order[idx], width, height);
    let above: Vec<Raster> = order[idx + 1..]
        .iter()
        .map(|o| Raster::new(o, width, height))
        .filter(|r| r.rect.intersects(&me.rect))
        .collect();
    let mut m = BitMask::new(width, height);
    for y in me.rect.y..me.rect.bottom() {
        for x in me.rect.x..me.rect.right() {
            let (xi, yi) = (x as i64, y as i64);
            if me.inside(xi, yi) && !above.iter().any(|a| a.inside(xi, yi)) {
                m.set(x, y, true);
            }
        }
    }
    Ok(m)
}

/// Visible share of an object's own footprint, in `[0, 1]`. Objects whose
/// footprint is empty at this resolution report 0.
pub fn visible_fraction(state: &SceneState, id: &ObjectId, width: u32, height: u32) -> Result<f64, RenderError> {
    let total = footprint(state, id, width, height)?.count();
    if total == 0 {
        return Ok(0.0);
    }
    let visible = object_mask(state, id, width, height)?.count();
    Ok(visible as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::testutil::*;
    use crate::scene::{apply_transition, Color, EditCommand};

    #[test]
    fn empty_scene_is_background() {
        let s = SceneState::new(64, 64, Color::Teal);
        let img = render(&s, 64, 64).unwrap();
        assert_eq!(img.dimensions(), (64, 64));
        assert!(img.pixels().all(|p| p.0 == Color::Teal.rgb().to_array()));
    }

    #[test]
    fn too_small() {
        let s = SceneState::new(64, 64, Color::Teal);
        assert_eq!(render(&s, 15, 64), Err(RenderError::DimensionTooSmall(15, 64)));
    }

    #[test]
    fn deterministic_and_mode_independent() {
        let s = three_objects();
        let a = render_with(Exec::Sequential, &s, 200, 150).unwrap();
        let b = render_with(Exec::Parallel, &s, 200, 150).unwrap();
        assert_eq!(a.as_raw(), b.as_raw());
        assert_eq!(a.as_raw(), render(&s, 200, 150).unwrap().as_raw());
    }

    #[test]
    fn glossy_red_circle_center_pixel() {
        let mut s = SceneState::new(128, 128, Color::White);
        let mut o = obj("ball", Color::Red, Shape::Circle, bbox("0.25", "0.25", "0.5", "0.5"), 0);
        o.material = Material::Glossy;
        s.objects.push(o);
        let img = render(&s, 128, 128).unwrap();

        // FNV-1a("ball") and the glossy band formula, evaluated by hand
        let mut h: u64 = 0xcbf29ce484222325;
        for b in b"ball" {
            h = (h ^ *b as u64).wrapping_mul(0x100000001b3);
        }
        let t = (64 + 2 * 64 + h % 61) % 40;
        let d: u8 = if t < 4 {
            48
        } else if t < 10 {
            24
        } else {
            0
        };
        let [r, g, b] = [220u8, 64, 64];
        assert_eq!(img.get_pixel(64, 64).0, [r - d, g - d, b - d]);
    }

    #[test]
    fn full_canvas_rectangle_mask_is_full() {
        let mut s = SceneState::new(32, 32, Color::White);
        s.objects
            .push(obj("wall", Color::Gray, Shape::Rectangle, bbox("0", "0", "1", "1"), 0));
        let m = object_mask(&s, &"wall".into(), 32, 32).unwrap();
        assert_eq!(m.count(), 32 * 32);
    }

    #[test]
    fn fully_occluded_mask_is_empty() {
        let mut s = SceneState::new(32, 32, Color::White);
        s.objects.push(obj(
            "small",
            Color::Red,
            Shape::Circle,
            bbox("0.4", "0.4", "0.2", "0.2"),
            0,
        ));
        s.objects
            .push(obj("big", Color::Gray, Shape::Rectangle, bbox("0", "0", "1", "1"), 1));
        assert_eq!(object_mask(&s, &"small".into(), 32, 32).unwrap().count(), 0);
        assert!(matches!(
            object_mask(&s, &"nope".into(), 32, 32),
            Err(RenderError::UnknownObject(_))
        ));
    }

    #[test]
    fn mask_matches_two_render_pixel_diff() {
        let s = three_objects();
        for o in &s.objects {
            let (w, h) = (160, 120);
            let with = render(&s, w, h).unwrap();
            let without = render(
                &apply_transition(&s, &[EditCommand::remove(o.id.clone())]).unwrap(),
                w,
                h,
            )
            .unwrap();
            let m = object_mask(&s, &o.id, w, h).unwrap();
            for y in 0..h {
                for x in 0..w {
                    let differs = with.get_pixel(x, y) != without.get_pixel(x, y);
                    assert_eq!(m.get(x, y), differs, "{} at ({x},{y})", o.id);
                }
            }
        }
    }

    #[test]
    fn window_matches_full_render() {
        let s = three_objects();
        let full = render(&s, 128, 96).unwrap();
        let win = PixelRect {
            x: 37,
            y: 11,
            w: 50,
            h: 60,
        };
        let part = render_window(&s, 128, 96, win).unwrap();
        for j in 0..win.h {
            for i in 0..win.w {
                assert_eq!(part.get_pixel(i, j), full.get_pixel(win.x + i, win.y + j));
            }
        }
    }

    #[test]
    fn shaded_palette_values_never_coincide_across_colors() {
        // pixel equality between different colors would make masks ambiguous
        let levels = [0u8, 24, 40, 48, 56];
        for a in Color::ALL {
            for b in Color::ALL {
                if a == b {
                    continue;
                }
                for &da in &levels {
                    for &db in &levels {
                        assert_ne!(shade(a.rgb().to_array(), da), shade(b.rgb().to_array(), db), "{a} {b}");
                    }
                }
            }
        }
    }
}
