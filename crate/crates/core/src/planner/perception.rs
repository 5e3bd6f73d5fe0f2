//! Image → scene-state providers used by the quality test.

use std::collections::HashMap;
use std::path::Path;

use image::RgbImage;
use thiserror::Error;

use crate::imageio::pixel_digest;
use crate::mask::BitMask;
use crate::par::Exec;
use crate::scene::render::{render_window_with, render_with};
use crate::scene::{
    AttrValue, Attribute, BBox, Color, Material, ObjectId, ObjectSpec, PixelRect, Ratio, RenderError, SceneState,
    Shape, Size,
};

#[derive(Debug, Error)]
pub enum PerceptionError {
    #[error("no perception fixture for image {0}")]
    Unknown(String),
    #[error("bad perception fixture: {0}")]
    Fixture(String),
    #[error(transparent)]
    Render(#[from] RenderError),
}

/// What the caller believes the image shows. Providers may use it to
/// narrow their search; they must not simply echo it.
pub struct PerceptionHint<'a> {
    pub expected: &'a SceneState,
    pub previous: &'a SceneState,
}

pub trait Perception: Send + Sync {
    fn name(&self) -> &'static str;

    fn perceive(&self, image: &RgbImage, hint: &PerceptionHint<'_>) -> Result<SceneState, PerceptionError>;
}

/// Analysis by synthesis against the bundled renderer.
///
/// An exact re-render of the expected state short-circuits. Otherwise each
/// object in turn is set to whichever candidate (absent, its expected or
/// previous spec, or the expected spec with one attribute swapped) minimises
/// the absolute difference to the image over the object's region, until a
/// pass changes nothing.
#[derive(Clone, Copy, Debug, Default)]
pub struct SymbolicPerception {
    pub exec: Exec,
}

const MAX_PASSES: usize = 3;

fn variants(o: &ObjectSpec) -> Vec<ObjectSpec> {
    let mut out = Vec::new();
    let mut push = |v: AttrValue| {
        if o.get(v.attribute()) != v {
            let mut c = o.clone();
            c.set(v);
            out.push(c);
        }
    };
    for attr in Attribute::ALL {
        match attr {
            Attribute::Color => Color::ALL.iter().for_each(|&v| push(AttrValue::Color(v))),
            Attribute::Size => Size::ALL.iter().for_each(|&v| push(AttrValue::Size(v))),
            Attribute::Material => Material::ALL.iter().for_each(|&v| push(AttrValue::Material(v))),
            Attribute::Shape => Shape::ALL.iter().for_each(|&v| push(AttrValue::Shape(v))),
        }
    }
    out
}

fn with_object(scene: &SceneState, id: &ObjectId, spec: Option<&ObjectSpec>) -> SceneState {
    let mut s = scene.clone();
    let pos = s.objects.iter().position(|o| &o.id == id);
    match (pos, spec) {
        (Some(i), Some(o)) => s.objects[i] = o.clone(),
        (Some(i), None) => {
            s.objects.remove(i);
        }
        (None, Some(o)) => s.objects.push(o.clone()),
        (None, None) => {}
    }
    s
}

fn hull(a: PixelRect, b: PixelRect) -> PixelRect {
    if a.is_empty() {
        return b;
    }
    if b.is_empty() {
        return a;
    }
    let (x0, y0) = (a.x.min(b.x), a.y.min(b.y));
    let (x1, y1) = (a.right().max(b.right()), a.bottom().max(b.bottom()));
    PixelRect {
        x: x0,
        y: y0,
        w: x1 - x0,
        h: y1 - y0,
    }
}

fn sad(image: &RgbImage, window: PixelRect, rendered: &RgbImage) -> u64 {
    let mut total = 0u64;
    for y in 0..window.h {
        for x in 0..window.w {
            let a = image.get_pixel(window.x + x, window.y + y).0;
            let b = rendered.get_pixel(x, y).0;
            for c in 0..3 {
                total += a[c].abs_diff(b[c]) as u64;
            }
        }
    }
    total
}

impl Perception for SymbolicPerception {
    fn name(&self) -> &'static str {
        "symbolic"
    }

    fn perceive(&self, image: &RgbImage, hint: &PerceptionHint<'_>) -> Result<SceneState, PerceptionError> {
        let (w, h) = image.dimensions();
        if &render_with(self.exec, hint.expected, w, h)? == image {
            return Ok(hint.expected.clone());
        }
        let mut ids: Vec<ObjectId> = hint.expected.objects.iter().map(|o| o.id.clone()).collect();
        for o in &hint.previous.objects {
            if !ids.contains(&o.id) {
                ids.push(o.id.clone());
            }
        }
        let mut est = hint.expected.clone();
        for _ in 0..MAX_PASSES {
            let mut changed = false;
            for id in &ids {
                let current = est.object(id).cloned();
                let mut cands: Vec<Option<ObjectSpec>> = vec![current.clone(), None];
                for src in [hint.expected.object(id), hint.previous.object(id)]
                    .into_iter()
                    .flatten()
                {
                    cands.push(Some(src.clone()));
                }
                if let Some(e) = hint.expected.object(id) {
                    cands.extend(variants(e).into_iter().map(Some));
                }
                let mut seen = Vec::new();
                cands.retain(|c| {
                    let fresh = !seen.contains(c);
                    if fresh {
                        seen.push(c.clone());
                    }
                    fresh
                });
                let window = cands
                    .iter()
                    .flatten()
                    .fold(PixelRect { x: 0, y: 0, w: 0, h: 0 }, |acc, o| {
                        hull(acc, o.bbox.raster(w, h))
                    });
                if window.is_empty() {
                    continue;
                }
                let mut best: Option<(u64, usize)> = None;
                for (i, c) in cands.iter().enumerate() {
                    let hyp = with_object(&est, id, c.as_ref());
                    let score = sad(image, window, &render_window_with(self.exec, &hyp, w, h, window)?);
                    if best.is_none_or(|(b, _)| score < b) {
                        best = Some((score, i));
                    }
                }
                let (_, pick) = best.expect("at least one candidate");
                if pick != 0 {
                    est = with_object(&est, id, cands[pick].as_ref());
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }
        if let Some(extra) = unexplained(image, &est, self.exec)? {
            est.objects.push(extra);
        }
        Ok(est)
    }
}

/// Channel difference above which a pixel counts as unexplained.
const RESIDUAL_LEVEL: u8 = 48;
/// Erosion applied to the unexplained set; blur halos along edges are
/// narrower than this and vanish.
const RESIDUAL_ERODE: u32 = 2;
const RESIDUAL_MIN_PIXELS: u64 = 16;

/// Content the best estimate cannot account for, reported as one extra
/// object so that the quality test and the scorer see it.
fn unexplained(image: &RgbImage, est: &SceneState, exec: Exec) -> Result<Option<ObjectSpec>, PerceptionError> {
    let (w, h) = image.dimensions();
    let rendered = render_with(exec, est, w, h)?;
    let off = BitMask::from_fn(w, h, |x, y| {
        let (a, b) = (image.get_pixel(x, y).0, rendered.get_pixel(x, y).0);
        (0..3).any(|c| a[c].abs_diff(b[c]) > RESIDUAL_LEVEL)
    })
    .erode(RESIDUAL_ERODE);
    if off.count() < RESIDUAL_MIN_PIXELS {
        return Ok(None);
    }
    let r = off
        .bounding_box()
        .expect("nonempty mask")
        .dilate_clamped(RESIDUAL_ERODE, w, h);
    let mut sum = [0u64; 3];
    for (x, y) in off.iter_ones() {
        let p = image.get_pixel(x, y).0;
        (0..3).for_each(|c| sum[c] += p[c] as u64);
    }
    let n = off.count();
    let mean = sum.map(|v| (v / n) as i64);
    let color = *Color::ALL
        .iter()
        .min_by_key(|c| {
            let q = c.rgb();
            (q.r as i64 - mean[0]).pow(2) + (q.g as i64 - mean[1]).pow(2) + (q.b as i64 - mean[2]).pow(2)
        })
        .expect("palette nonempty");
    let frac = |v: u32, of: u32| Ratio::new(v, of).expect("within the canvas");
    let bbox = BBox::new(frac(r.x, w), frac(r.y, h), frac(r.w, w), frac(r.h, h)).expect("box inside the canvas");
    Ok(Some(ObjectSpec {
        id: ObjectId::new(UNEXPLAINED_ID),
        name: "unknown".into(),
        color,
        size: Size::Medium,
        material: Material::Matte,
        shape: Shape::Rectangle,
        bbox,
        z_order: est.max_z().map_or(0, |z| z + 1),
    }))
}

/// Id of the object standing in for unexplained content.
pub const UNEXPLAINED_ID: &str = "unexplained";

/// Static answers keyed by image digest, for tests and recorded sessions.
#[derive(Clone, Debug, Default)]
pub struct FixturePerception {
    by_digest: HashMap<String, SceneState>,
}

impl FixturePerception {
    pub fn new() -> FixturePerception {
        FixturePerception::default()
    }

    pub fn insert(&mut self, image: &RgbImage, state: SceneState) {
        self.by_digest.insert(pixel_digest(image), state);
    }

    /// Loads a JSON object mapping pixel digests to scene states.
    pub fn load(path: &Path) -> Result<FixturePerception, PerceptionError> {
        let text = std::fs::read_to_string(path).map_err(|e| PerceptionError::Fixture(e.to_string()))?;
        let by_digest = serde_json::from_str(&text).map_err(|e| PerceptionError::Fixture(e.to_string()))?;
        Ok(FixturePerception { by_digest })
    }
}

impl Perception for FixturePerception {
    fn name(&self) -> &'static str {
        "fixture"
    }

    fn perceive(&self, image: &RgbImage, _hint: &PerceptionHint<'_>) -> Result<SceneState, PerceptionError> {
        let d = pixel_digest(image);
        self.by_digest.get(&d).cloned().ok_or(PerceptionError::Unknown(d))
    }
}
