//! HTTP bridge to an external patch editor.
//!
//! Request body:
//!
//! ```json
//! {"operation": "adjust", "command": {...}, "patch_png_base64": "...",
//!  "mask_png_base64": "...", "origin": {"x": 10, "y": 20}}
//! ```
//!
//! Expected response: `{"patch_png_base64": "...", "diagnostics": "..."}`.

use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::backend::{Backend, BackendError, BackendRequest, BackendResponse};
use super::LayerPatch;
use crate::imageio;
use crate::scene::{CommandKind, EditCommand};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RemoteConfig {
    pub url: String,
    #[serde(default, skip_serializing)]
    pub token: Option<String>,
    pub timeout_ms: u64,
    /// Retries after the first attempt.
    pub retries: u32,
    /// First backoff delay; doubles per retry.
    pub backoff_ms: u64,
}

impl RemoteConfig {
    pub fn new(url: impl Into<String>) -> RemoteConfig {
        RemoteConfig {
            url: url.into(),
            token: None,
            timeout_ms: 30_000,
            retries: 3,
            backoff_ms: 200,
        }
    }
}

#[derive(Serialize)]
struct Origin {
    x: u32,
    y: u32,
}

#[derive(Serialize)]
struct WireRequest<'a> {
    operation: CommandKind,
    command: &'a EditCommand,
    patch_png_base64: String,
    mask_png_base64: String,
    origin: Origin,
}

#[derive(Deserialize)]
struct WireResponse {
    patch_png_base64: String,
    #[serde(default)]
    diagnostics: String,
}

pub struct RemoteBackend {
    cfg: RemoteConfig,
    agent: ureq::Agent,
}

enum Attempt {
    Retry(BackendError),
    Fatal(BackendError),
}

impl RemoteBackend {
    pub fn new(cfg: RemoteConfig) -> RemoteBackend {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(cfg.timeout_ms)))
            .http_status_as_error(false)
            .build()
            .into();
        RemoteBackend { cfg, agent }
    }

    pub fn config(&self) -> &RemoteConfig {
        &self.cfg
    }

    fn once(
        &self,
        body: &WireRequest<'_>,
        attempt: u32,
        want: (u32, u32),
    ) -> Result<(LayerPatchPixels, String), Attempt> {
        let mut req = self.agent.post(&self.cfg.url);
        if let Some(t) = &self.cfg.token {
            req = req.header("Authorization", format!("Bearer {t}"));
        }
        let mut resp = match req.send_json(body) {
            Ok(r) => r,
            Err(ureq::Error::Timeout(_)) => return Err(Attempt::Retry(BackendError::Timeout { attempts: attempt })),
            Err(e) => {
                return Err(Attempt::Retry(BackendError::Rejected {
                    reason: format!("transport: {e}"),
                    attempts: attempt,
                }))
            }
        };
        let status = resp.status().as_u16();
        if status >= 500 || status == 429 {
            return Err(Attempt::Retry(BackendError::Rejected {
                reason: format!("status {status}"),
                attempts: attempt,
            }));
        }
        if !(200..300).contains(&status) {
            return Err(Attempt::Fatal(BackendError::Rejected {
                reason: format!("status {status}"),
                attempts: attempt,
            }));
        }
        let malformed = |why: String| {
            Attempt::Fatal(BackendError::Rejected {
                reason: format!("malformed response: {why}"),
                attempts: attempt,
            })
        };
        let wire: WireResponse = match resp.body_mut().with_config().limit(u64::MAX).read_json() {
            Ok(w) => w,
            Err(ureq::Error::Timeout(_)) => return Err(Attempt::Retry(BackendError::Timeout { attempts: attempt })),
            Err(e) => return Err(malformed(e.to_string())),
        };
        let pixels = imageio::png_from_base64(&wire.patch_png_base64).map_err(|e| malformed(e.to_string()))?;
        if pixels.dimensions() != want {
            return Err(Attempt::Fatal(BackendError::DimensionMismatch {
                expected: want,
                got: pixels.dimensions(),
            }));
        }
        Ok((pixels, wire.diagnostics))
    }
}

type LayerPatchPixels = image::RgbImage;

impl Backend for RemoteBackend {
    fn name(&self) -> &'static str {
        "remote"
    }

    fn edit(&self, req: &BackendRequest) -> Result<BackendResponse, BackendError> {
        let body = WireRequest {
            operation: req.operation,
            command: &req.command,
            patch_png_base64: imageio::png_base64(&req.patch.pixels),
            mask_png_base64: imageio::gray_png_base64(&req.patch.mask_local.to_gray_image()),
            origin: Origin {
                x: req.patch.origin.0,
                y: req.patch.origin.1,
            },
        };
        let want = req.patch.pixels.dimensions();
        let mut delay = Duration::from_millis(self.cfg.backoff_ms);
        let mut attempt = 1;
        loop {
            match self.once(&body, attempt, want) {
                Ok((pixels, diagnostics)) => {
                    return Ok(BackendResponse {
                        patch: LayerPatch {
                            pixels,
                            ..req.patch.clone()
                        },
                        diagnostics,
                        attempts: attempt,
                    })
                }
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Retry(e)) => {
                    if attempt > self.cfg.retries {
                        return Err(e);
                    }
                    thread::sleep(delay);
                    delay *= 2;
                    attempt += 1;
                }
            }
        }
    }
}
