use std::collections::VecDeque;
use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::Mutex;

use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::{gaussian_kernel, LayerPatch};
use crate::imageio::pixel_digest;
use crate::par::{self, Exec};
use crate::scene::{apply_transition, CommandKind, EditCommand, RenderError, SceneState, TransitionError};

/// What an editor receives: the patch, the command, and for symbolic
/// editors the scene restricted to objects that reach the patch.
#[derive(Clone, Debug)]
pub struct BackendRequest {
    pub operation: CommandKind,
    pub patch: LayerPatch,
    pub command: EditCommand,
    pub local_scene: Option<SceneState>,
    /// Full image size, needed to place the patch window.
    pub canvas: (u32, u32),
}

#[derive(Clone, Debug)]
pub struct BackendResponse {
    /// Same size and origin as the request patch.
    pub patch: LayerPatch,
    pub diagnostics: String,
    /// Transport-level invocations it took, including retries.
    pub attempts: u32,
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("backend timed out after {attempts} attempt(s)")]
    Timeout { attempts: u32 },
    #[error("backend rejected the request after {attempts} attempt(s): {reason}")]
    Rejected { reason: String, attempts: u32 },
    #[error("backend returned a {got:?} patch for a {expected:?} request")]
    DimensionMismatch { expected: (u32, u32), got: (u32, u32) },
    #[error("symbolic backends need the local scene")]
    MissingScene,
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Transition(#[from] TransitionError),
}

impl BackendError {
    pub fn is_retryable(&self) -> bool {
        matches!(
            self,
            BackendError::Timeout { .. } | BackendError::Rejected { .. } | BackendError::DimensionMismatch { .. }
        )
    }

    pub fn attempts(&self) -> u32 {
        match self {
            BackendError::Timeout { attempts } | BackendError::Rejected { attempts, .. } => *attempts,
            _ => 1,
        }
    }
}

/// How much of the image a backend sees and returns.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EditScope {
    /// A padded patch around the mask, blended back by the executor.
    Patch,
    /// The whole image, whose response replaces the image outright. Models
    /// editors that regenerate every pixel on every call.
    FullFrame,
}

pub trait Backend: Send + Sync {
    fn name(&self) -> &'static str;

    fn scope(&self) -> EditScope {
        EditScope::Patch
    }

    fn edit(&self, request: &BackendRequest) -> Result<BackendResponse, BackendError>;
}

fn symbolic_window(req: &BackendRequest, exec: Exec) -> Result<RgbImage, BackendError> {
    let local = req.local_scene.as_ref().ok_or(BackendError::MissingScene)?;
    let post = apply_transition(local, std::slice::from_ref(&req.command))?;
    let (w, h) = req.canvas;
    Ok(crate::scene::render::render_window_with(
        exec,
        &post,
        w,
        h,
        req.patch.rect(),
    )?)
}

/// Deterministic oracle editor: re-renders the patch window from the
/// symbolic post-state.
#[derive(Clone, Copy, Debug, Default)]
pub struct SymbolicBackend {
    pub exec: Exec,
}

impl Backend for SymbolicBackend {
    fn name(&self) -> &'static str {
        "symbolic"
    }

    fn edit(&self, req: &BackendRequest) -> Result<BackendResponse, BackendError> {
        Ok(BackendResponse {
            patch: LayerPatch {
                pixels: symbolic_window(req, self.exec)?,
                ..req.patch.clone()
            },
            diagnostics: String::new(),
            attempts: 1,
        })
    }
}

/// Full-frame baseline: performs the symbolic edit inside the mask, then
/// passes the entire image through a Gaussian blur and seeded uniform noise,
/// the way a model that re-synthesizes the whole frame would.
#[derive(Clone, Copy, Debug)]
pub struct DegradingBackend {
    pub sigma: f64,
    /// Noise amplitude in byte units (2 means uniform in [-2, 2]).
    pub amplitude: f64,
    pub seed: u64,
    pub exec: Exec,
}

impl Default for DegradingBackend {
    fn default() -> DegradingBackend {
        DegradingBackend {
            sigma: 0.6,
            amplitude: 2.0,
            seed: 0,
            exec: Exec::default(),
        }
    }
}

impl Backend for DegradingBackend {
    fn name(&self) -> &'static str {
        "degrading"
    }

    fn scope(&self) -> EditScope {
        EditScope::FullFrame
    }

    fn edit(&self, req: &BackendRequest) -> Result<BackendResponse, BackendError> {
        let edited = symbolic_window(req, self.exec)?;
        let mut out = req.patch.pixels.clone();
        for (x, y, p) in out.enumerate_pixels_mut() {
            if req.patch.mask_local.get(x, y) {
                *p = *edited.get_pixel(x, y);
            }
        }
        // noise depends on the input pixels too, so repeated calls on
        // different images draw different noise while staying pure
        let digest = pixel_digest(&req.patch.pixels);
        let salt = u64::from_str_radix(&digest[..16], 16).expect("hex digest");
        let out = degrade(&out, self.sigma, self.amplitude, self.seed ^ salt, self.exec);
        Ok(BackendResponse {
            patch: LayerPatch {
                pixels: out,
                ..req.patch.clone()
            },
            diagnostics: format!("full-frame resample sigma={} noise={}", self.sigma, self.amplitude),
            attempts: 1,
        })
    }
}

/// Separable Gaussian blur (edge-clamped) followed by uniform noise in
/// `[-amplitude, amplitude]`, rounded half away from zero. Row `y` draws
/// its noise from ChaCha8 stream `y` of `seed`, so the result does not
/// depend on the execution mode.
pub fn degrade(img: &RgbImage, sigma: f64, amplitude: f64, seed: u64, exec: Exec) -> RgbImage {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let src: Vec<f64> = img.as_raw().iter().map(|&v| v as f64).collect();
    let k = if sigma > 0.0 { gaussian_kernel(sigma) } else { vec![1.0] };
    let r = (k.len() / 2) as i64;
    let clamp = |v: i64, n: usize| v.clamp(0, n as i64 - 1) as usize;
    let mut tmp = vec![0.0f64; w * h * 3];
    par::for_each_row(exec, &mut tmp, w * 3, |y, row| {
        for x in 0..w {
            for c in 0..3 {
                let mut s = 0.0;
                for (i, kv) in k.iter().enumerate() {
                    let xx = clamp(x as i64 + i as i64 - r, w);
                    s += kv * src[(y * w + xx) * 3 + c];
                }
                row[x * 3 + c] = s;
            }
        }
    });
    let mut out = vec![0u8; w * h * 3];
    par::for_each_row(exec, &mut out, w * 3, |y, row| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(y as u64);
        for x in 0..w {
            for c in 0..3 {
                let mut s = 0.0;
                for (i, kv) in k.iter().enumerate() {
                    let yy = clamp(y as i64 + i as i64 - r, h);
                    s += kv * tmp[(yy * w + x) * 3 + c];
                }
                let noise = if amplitude > 0.0 {
                    rng.random_range(-amplitude..=amplitude)
                } else {
                    0.0
                };
                row[x * 3 + c] = (s + noise).round().clamp(0.0, 255.0) as u8;
            }
        }
    });
    RgbImage::from_raw(w as u32, h as u32, out).expect("sized buffer")
}

/// One scheduled behaviour of a [`ScriptedBackend`] call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScriptedStep {
    /// Delegate to the wrapped backend.
    Pass,
    /// Fail with a retryable rejection.
    Fail,
    /// Fail with a timeout.
    Timeout,
    /// Return the request patch unedited.
    Ignore,
    /// Invert every masked pixel.
    Scramble,
    /// Return a patch one pixel narrower.
    WrongSize,
}

/// Fault-injection wrapper that follows a fixed schedule and then passes
/// everything through.
pub struct ScriptedBackend<B> {
    inner: B,
    steps: Mutex<VecDeque<ScriptedStep>>,
    calls: AtomicU32,
}

impl<B: Backend> ScriptedBackend<B> {
    pub fn new(inner: B, steps: impl IntoIterator<Item = ScriptedStep>) -> ScriptedBackend<B> {
        ScriptedBackend {
            inner,
            steps: Mutex::new(steps.into_iter().collect()),
            calls: AtomicU32::new(0),
        }
    }

    pub fn calls(&self) -> u32 {
        self.calls.load(Ordering::SeqCst)
    }
}

impl<B: Backend> Backend for ScriptedBackend<B> {
    fn name(&self) -> &'static str {
        "scripted"
    }

    fn scope(&self) -> EditScope {
        self.inner.scope()
    }

    fn edit(&self, req: &BackendRequest) -> Result<BackendResponse, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let step = self
            .steps
            .lock()
            .expect("script lock")
            .pop_front()
            .unwrap_or(ScriptedStep::Pass);
        let passthrough = |pixels: RgbImage, note: &str| BackendResponse {
            patch: LayerPatch {
                pixels,
                ..req.patch.clone()
            },
            diagnostics: note.to_string(),
            attempts: 1,
        };
        match step {
            ScriptedStep::Pass => self.inner.edit(req),
            ScriptedStep::Fail => Err(BackendError::Rejected {
                reason: "injected failure".into(),
                attempts: 1,
            }),
            ScriptedStep::Timeout => Err(BackendError::Timeout { attempts: 1 }),
            ScriptedStep::Ignore => Ok(passthrough(req.patch.pixels.clone(), "ignored")),
            ScriptedStep::Scramble => {
                let mut px = self.inner.edit(req)?.patch.pixels;
                for (x, y, p) in px.enumerate_pixels_mut() {
                    if req.patch.mask_local.get(x, y) {
                        p.0 = p.0.map(|v| 255 - v);
                    }
                }
                Ok(passthrough(px, "scrambled"))
            }
            ScriptedStep::WrongSize => {
                let (w, h) = req.patch.pixels.dimensions();
                let px = image::imageops::crop_imm(&req.patch.pixels, 0, 0, w.saturating_sub(1), h).to_image();
                Ok(passthrough(px, "wrong size"))
            }
        }
    }
}

impl<B: Backend + ?Sized> Backend for Box<B> {
    fn name(&self) -> &'static str {
        (**self).name()
    }

    fn scope(&self) -> EditScope {
        (**self).scope()
    }

    fn edit(&self, request: &BackendRequest) -> Result<BackendResponse, BackendError> {
        (**self).edit(request)
    }
}

impl<B: Backend + ?Sized> Backend for std::sync::Arc<B> {
    fn name(&self) -> &'static str {
        (**self).name()
    }

    fn scope(&self) -> EditScope {
        (**self).scope()
    }

    fn edit(&self, request: &BackendRequest) -> Result<BackendResponse, BackendError> {
        (**self).edit(request)
    }
}
