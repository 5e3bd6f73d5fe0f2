//! Decompose-edit-fuse executor.
//!
//! An atomic edit is localized to a mask, the mask's neighbourhood is cut out
//! losslessly as a [`LayerPatch`], a [`Backend`] edits only that patch, and
//! the result is blended back with a Gaussian-feathered alpha. Pixels where
//! the alpha is exactly zero are copied from the input, so everything outside
//! the blend support keeps its bytes.

mod backend;
mod remote;

use image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mask::BitMask;
use crate::par::{self, Exec};
use crate::scene::{apply_transition, object_mask, EditCommand, PixelRect, RenderError, SceneState, TransitionError};
use crate::store::{describe_transition, ImageContext, ImageUri, Store, StoreError, TransformationType};

pub use backend::{
    degrade, Backend, BackendError, BackendRequest, BackendResponse, DegradingBackend, EditScope, ScriptedBackend,
    ScriptedStep, SymbolicBackend,
};
pub use remote::{RemoteBackend, RemoteConfig};

#[derive(Debug, Error)]
pub enum IldError {
    #[error("the edit mask is empty")]
    EmptyMask,
    #[error("mask is {mask:?} but the image is {image:?}")]
    MaskSize { mask: (u32, u32), image: (u32, u32) },
    #[error("patch at {origin:?} of size {size:?} does not fit a {image:?} image")]
    PatchOutOfBounds {
        origin: (u32, u32),
        size: (u32, u32),
        image: (u32, u32),
    },
    #[error("undo is not localized")]
    UndoNotLocal,
    #[error("add needs a placement box")]
    MissingPlacement,
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Transition(#[from] TransitionError),
}

#[derive(Debug, Error)]
pub enum ExecError {
    #[error(transparent)]
    Geometry(#[from] IldError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("nothing to undo: the head is the root")]
    NothingToUndo,
    #[error("the input image is not a node of the graph")]
    InputNotRecorded,
}

impl ExecError {
    /// Backend failures may succeed on another attempt; everything else is
    /// a property of the command or the graph.
    pub fn is_retryable(&self) -> bool {
        matches!(self, ExecError::Backend(e) if e.is_retryable())
    }
}

/// A losslessly cut rectangle of an image, with the edit mask in its own
/// coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerPatch {
    pub pixels: RgbImage,
    pub origin: (u32, u32),
    pub mask_local: BitMask,
    pub padding: u32,
}

impl LayerPatch {
    pub fn rect(&self) -> PixelRect {
        PixelRect {
            x: self.origin.0,
            y: self.origin.1,
            w: self.pixels.width(),
            h: self.pixels.height(),
        }
    }
}

/// Executor knobs. `None` selects the size-relative default.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExecConfig {
    /// Mask dilation radius in pixels; default 2% of the image diagonal, and
    /// never less than the smallest default feather radius.
    #[serde(default)]
    pub margin: Option<u32>,
    /// Context ring around the mask box, in pixels.
    pub padding: u32,
    /// Blend feather sigma; default max(2, 0.3% of the patch diagonal).
    #[serde(default)]
    pub feather: Option<f64>,
    #[serde(skip)]
    pub exec: Exec,
}

impl Default for ExecConfig {
    fn default() -> ExecConfig {
        ExecConfig {
            margin: None,
            padding: 16,
            feather: None,
            exec: Exec::default(),
        }
    }
}

impl ExecConfig {
    /// Margin 0, feather 0: the configuration for bit-exactness checks.
    pub fn exact() -> ExecConfig {
        ExecConfig {
            margin: Some(0),
            feather: Some(0.0),
            ..ExecConfig::default()
        }
    }

    pub fn margin_for(&self, width: u32, height: u32) -> u32 {
        self.margin.unwrap_or_else(|| default_margin(width, height))
    }

    pub fn feather_for(&self, patch: PixelRect) -> f64 {
        self.feather.unwrap_or_else(|| default_feather(patch))
    }
}

fn diagonal(w: u32, h: u32) -> f64 {
    ((w as f64).powi(2) + (h as f64).powi(2)).sqrt()
}

/// Smallest default feather radius, `ceil(3 * 2.0)`.
const MIN_FEATHER_RADIUS: u32 = 6;

/// With the margin at least as wide as the feather kernel, partially blended
/// pixels only occur where the edit left the image unchanged.
pub fn default_margin(width: u32, height: u32) -> u32 {
    ((0.02 * diagonal(width, height)).round() as u32).max(MIN_FEATHER_RADIUS)
}

pub fn default_feather(patch: PixelRect) -> f64 {
    (0.003 * diagonal(patch.w, patch.h)).max(2.0)
}

/// Pixels a command may touch, dilated by `margin`.
///
/// Remove uses the target's visible footprint. Replace and Adjust use the
/// union of the visible footprints before and after, since a new shape can
/// cover pixels the old one did not. Add uses its placement box.
pub fn localize(
    scene: &SceneState,
    command: &EditCommand,
    width: u32,
    height: u32,
    margin: u32,
) -> Result<BitMask, IldError> {
    let mask = match command {
        EditCommand::Undo => return Err(IldError::UndoNotLocal),
        EditCommand::Add { object } => {
            object.bbox.validate().map_err(|_| IldError::MissingPlacement)?;
            let mut m = BitMask::new(width, height);
            m.fill_rect(object.bbox.raster(width, height), true);
            m
        }
        EditCommand::Remove { target } => object_mask(scene, target, width, height)?,
        EditCommand::Replace { target, .. } | EditCommand::Adjust { target, .. } => {
            let post = apply_transition(scene, std::slice::from_ref(command))?;
            object_mask(scene, target, width, height)?.union(&object_mask(&post, target, width, height)?)
        }
    };
    if mask.is_empty() {
        return Err(IldError::EmptyMask);
    }
    Ok(mask.dilate(margin))
}

/// Cuts the mask's bounding box, grown by `padding` and clamped to the
/// image, into a patch.
pub fn crop_layer(image: &RgbImage, mask: &BitMask, padding: u32) -> Result<LayerPatch, IldError> {
    if mask.dimensions() != image.dimensions() {
        return Err(IldError::MaskSize {
            mask: mask.dimensions(),
            image: image.dimensions(),
        });
    }
    let bbox = mask.bounding_box().ok_or(IldError::EmptyMask)?;
    let rect = bbox.dilate_clamped(padding, image.width(), image.height());
    Ok(cut(image, mask, rect, padding))
}

fn cut(image: &RgbImage, mask: &BitMask, rect: PixelRect, padding: u32) -> LayerPatch {
    let pixels = image::imageops::crop_imm(image, rect.x, rect.y, rect.w, rect.h).to_image();
    LayerPatch {
        pixels,
        origin: (rect.x, rect.y),
        mask_local: mask.crop(rect),
        padding,
    }
}

/// Copies the patch pixels into the image without blending.
pub fn paste(image: &RgbImage, patch: &LayerPatch) -> Result<RgbImage, IldError> {
    check_fits(image, patch)?;
    let mut out = image.clone();
    image::imageops::replace(&mut out, &patch.pixels, patch.origin.0 as i64, patch.origin.1 as i64);
    Ok(out)
}

fn check_fits(image: &RgbImage, patch: &LayerPatch) -> Result<(), IldError> {
    let r = patch.rect();
    let fits = r.right() <= image.width()
        && r.bottom() <= image.height()
        && patch.mask_local.dimensions() == patch.pixels.dimensions();
    if fits {
        Ok(())
    } else {
        Err(IldError::PatchOutOfBounds {
            origin: patch.origin,
            size: patch.pixels.dimensions(),
            image: image.dimensions(),
        })
    }
}

/// Normalized sampled Gaussian of standard deviation `sigma`, radius
/// `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as i64;
    let raw: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / sum).collect()
}

/// Blend alpha for a patch: the local mask convolved with a Gaussian,
/// extending the patch edge outward (so masks touching the image border stay
/// opaque there), clamped to `[0, 1]`.
/// Sigma 0 gives the binary mask. Row-major, one value per patch pixel.
pub fn feather_alpha(mask: &BitMask, sigma: f64) -> Vec<f64> {
    let (w, h) = (mask.width() as usize, mask.height() as usize);
    let mut a: Vec<f64> = (0..w * h)
        .map(|i| mask.get((i % w) as u32, (i / w) as u32) as u8 as f64)
        .collect();
    if sigma <= 0.0 {
        return a;
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let xx = (x as i64 + i as i64 - r).clamp(0, w as i64 - 1) as usize;
                s += kv * a[y * w + xx];
            }
            tmp[y * w + x] = s;
        }
    }
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let yy = (y as i64 + i as i64 - r).clamp(0, h as i64 - 1) as usize;
                s += kv * tmp[yy * w + x];
            }
            a[y * w + x] = s.clamp(0.0, 1.0);
        }
    }
    a
}

/// `out = alpha * patch + (1 - alpha) * original` over the patch rectangle,
/// rounded half away from zero. Pixels with alpha exactly 0 are copied from
/// `original` untouched.
pub fn blend(original: &RgbImage, patch: &LayerPatch, feather_sigma: f64) -> Result<RgbImage, IldError> {
    blend_with(Exec::default(), original, patch, feather_sigma)
}

pub fn blend_with(
    exec: Exec,
    original: &RgbImage,
    patch: &LayerPatch,
    feather_sigma: f64,
) -> Result<RgbImage, IldError> {
    check_fits(original, patch)?;
    let alpha = feather_alpha(&patch.mask_local, feather_sigma);
    let mut out = original.clone();
    let (ox, oy) = patch.origin;
    let pw = patch.pixels.width() as usize;
    let row_len = original.width() as usize * 3;
    let rect = patch.rect();
    let buf: &mut [u8] = &mut out;
    par::for_each_row(exec, buf, row_len, |y, row| {
        let y = y as u32;
        if y < rect.y || y >= rect.bottom() {
            return;
        }
        let ly = (y - oy) as usize;
        for lx in 0..pw {
            let a = alpha[ly * pw + lx];
            if a == 0.0 {
                continue;
            }
            let p = patch.pixels.get_pixel(lx as u32, ly as u32).0;
            let i = (ox as usize + lx) * 3;
            for c in 0..3 {
                row[i + c] = if a == 1.0 {
                    p[c]
                } else {
                    (a * p[c] as f64 + (1.0 - a) * row[i + c] as f64)
                        .round()
                        .clamp(0.0, 255.0) as u8
                };
            }
        }
    });
    Ok(out)
}

/// Objects whose raster meets `window`; the rest cannot affect it.
pub fn restrict_scene(scene: &SceneState, width: u32, height: u32, window: PixelRect) -> SceneState {
    let mut local = scene.clone();
    local
        .objects
        .retain(|o| o.bbox.raster(width, height).intersects(&window));
    local
}

/// Result of one atomic action.
#[derive(Clone, Debug)]
pub struct Executed {
    pub image: RgbImage,
    pub node: ImageContext,
    /// Symbolic post-state.
    pub scene: SceneState,
    pub mask: Option<BitMask>,
    pub patch_rect: Option<PixelRect>,
    pub feather: f64,
    pub backend_attempts: u32,
    pub diagnostics: String,
}

/// Runs one atomic action against `store`, whose graph must already hold
/// `image`.
///
/// Undo moves the head to [`StateGraph::undo_target`] and returns that
/// image. Every other command goes through localize, crop, backend, blend,
/// and the result is recorded as a child of `image` carrying the symbolic
/// post-state. On error nothing is recorded and the head does not move.
///
/// [`StateGraph::undo_target`]: crate::store::StateGraph::undo_target
pub fn execute_atomic(
    store: &mut Store,
    image: &RgbImage,
    scene: &SceneState,
    command: &EditCommand,
    backend: &dyn Backend,
    cfg: &ExecConfig,
) -> Result<Executed, ExecError> {
    if let EditCommand::Undo = command {
        let target = store.graph().undo_target().ok_or(ExecError::NothingToUndo)?;
        let img = store.image(&target)?;
        let node = store.rollback(&target)?;
        let scene = node.scene_ref.clone().unwrap_or_else(|| scene.clone());
        return Ok(Executed {
            image: img,
            node,
            scene,
            mask: None,
            patch_rect: None,
            feather: 0.0,
            backend_attempts: 0,
            diagnostics: String::new(),
        });
    }

    let parent = ImageUri::of(image);
    if store.graph().node(&parent).is_none() {
        return Err(ExecError::InputNotRecorded);
    }
    let (w, h) = image.dimensions();
    let post = apply_transition(scene, std::slice::from_ref(command)).map_err(IldError::from)?;
    let mask = localize(scene, command, w, h, cfg.margin_for(w, h))?;
    let patch = match backend.scope() {
        EditScope::Patch => crop_layer(image, &mask, cfg.padding)?,
        EditScope::FullFrame => cut(image, &mask, PixelRect::full(w, h), 0),
    };
    let rect = patch.rect();
    let request = BackendRequest {
        operation: command.kind(),
        command: command.clone(),
        local_scene: Some(restrict_scene(scene, w, h, rect)),
        canvas: (w, h),
        patch,
    };
    let response = backend.edit(&request)?;
    if response.patch.pixels.dimensions() != request.patch.pixels.dimensions()
        || response.patch.origin != request.patch.origin
    {
        return Err(BackendError::DimensionMismatch {
            expected: request.patch.pixels.dimensions(),
            got: response.patch.pixels.dimensions(),
        }
        .into());
    }
    let (out, feather) = match backend.scope() {
        EditScope::Patch => {
            let sigma = cfg.feather_for(rect);
            // the request mask is authoritative; backends may not widen it
            let fused = LayerPatch {
                mask_local: request.patch.mask_local.clone(),
                ..response.patch
            };
            (blend_with(cfg.exec, image, &fused, sigma)?, sigma)
        }
        EditScope::FullFrame => (response.patch.pixels, 0.0),
    };
    let node = store.record_image(
        &out,
        Some(&parent),
        TransformationType::from(command.kind()),
        describe_transition(scene, &post),
        Some(post.clone()),
    )?;
    Ok(Executed {
        image: out,
        node,
        scene: post,
        mask: Some(mask),
        patch_rect: Some(rect),
        feather,
        backend_attempts: response.attempts,
        diagnostics: response.diagnostics,
    })
}
