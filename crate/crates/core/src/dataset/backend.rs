//! Text-to-image backends.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::GenerationRequest;
use crate::image::{self, ImageError, ImageGray};

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("backend unreachable: {0}")]
    Unreachable(String),
    #[error("backend returned HTTP status {0}")]
    Status(u16),
    #[error("no recorded image at {0}")]
    Missing(PathBuf),
    #[error("backend returned an undecodable image: {0}")]
    Decode(#[from] ImageError),
}

/// A deterministic generator of images from `(prompt, seed, cfg_scale)`.
pub trait T2IBackend: Send + Sync {
    fn generate(&self, req: &GenerationRequest) -> Result<ImageGray, BackendError>;

    fn describe(&self) -> String;
}

impl<B: T2IBackend + ?Sized> T2IBackend for Box<B> {
    fn generate(&self, req: &GenerationRequest) -> Result<ImageGray, BackendError> {
        (**self).generate(req)
    }

    fn describe(&self) -> String {
        (**self).describe()
    }
}

/// First 16 hex digits of the SHA-256 of a prompt.
pub fn prompt_hash(prompt: &str) -> String {
    let digest = Sha256::digest(prompt.as_bytes());
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Canonical text form of a CFG scale, four decimals.
pub fn cfg_label(cfg: f64) -> String {
    format!("{cfg:.4}")
}

fn mix(prompt: &str, seed: u64, salt: u64) -> u64 {
    let digest = Sha256::digest(prompt.as_bytes());
    let h = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
    h ^ seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ salt.rotate_left(29)
}

/// Offline synthetic scenes.
///
/// Each `(prompt, seed)` fixes a scene: a smooth low-frequency background
/// with a handful of strongly textured patches. The CFG value seeds a
/// small perturbation concentrated inside the textured patches, standing in
/// for the content-preserving fluctuation of a real diffusion model.
#[derive(Debug, Clone)]
pub struct ProceduralBackend {
    pub height: usize,
    pub width: usize,
    /// Perturbation amplitude in gray levels inside textured patches.
    pub amplitude: f64,
}

impl ProceduralBackend {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            amplitude: 2.0,
        }
    }

    /// Scene intensity in `[0, 255]` and texture mask in `[0, 1]`.
    pub fn scene(&self, prompt: &str, seed: u64) -> (Vec<f64>, Vec<f64>) {
        let (h, w) = (self.height, self.width);
        let mut rng = ChaCha8Rng::seed_from_u64(mix(prompt, seed, 1));
        let base: f64 = rng.random_range(70.0..180.0);
        let gy: f64 = rng.random_range(-50.0..50.0);
        let gx: f64 = rng.random_range(-50.0..50.0);
        let fy: f64 = rng.random_range(0.5..2.0);
        let fx: f64 = rng.random_range(0.5..2.0);
        let mut img = vec![0.0; h * w];
        let mut mask = vec![0.0; h * w];
        for i in 0..h {
            for j in 0..w {
                let (y, x) = (i as f64 / h as f64, j as f64 / w as f64);
                img[i * w + j] = base
                    + gy * (y - 0.5)
                    + gx * (x - 0.5)
                    + 12.0 * (std::f64::consts::PI * (fy * y + fx * x)).sin();
            }
        }
        let patches = rng.random_range(2..=4);
        for _ in 0..patches {
            let ph = rng.random_range(h / 5..=h / 2).max(2);
            let pw = rng.random_range(w / 5..=w / 2).max(2);
            let top = rng.random_range(0..=h - ph);
            let left = rng.random_range(0..=w - pw);
            let strength: f64 = rng.random_range(20.0..45.0);
            let period: f64 = rng.random_range(2.0..5.0);
            let phase: f64 = rng.random_range(0.0..6.3);
            for i in top..top + ph {
                for j in left..left + pw {
                    let stripe = ((i as f64 + 0.7 * j as f64) / period + phase).sin();
                    let grain: f64 = rng.random_range(-1.0..1.0);
                    img[i * w + j] += strength * (0.5 * stripe + grain);
                    mask[i * w + j] = 1.0;
                }
            }
        }
        (img, mask)
    }
}

impl T2IBackend for ProceduralBackend {
    fn generate(&self, req: &GenerationRequest) -> Result<ImageGray, BackendError> {
        let (img, mask) = self.scene(&req.prompt, req.seed);
        let salt = (req.cfg_scale * 1e4).round() as u64;
        let mut rng = ChaCha8Rng::seed_from_u64(mix(&req.prompt, req.seed, 2 ^ (salt << 8)));
        let pixels = img
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| {
                let amp = self.amplitude * (0.1 + 0.9 * m);
                let noise: f64 = rng.random_range(-1.0..1.0) * amp * 3f64.sqrt();
                (v + noise).round().clamp(0.0, 255.0) as u8
            })
            .collect();
        Ok(ImageGray::new(self.height, self.width, pixels).expect("positive size"))
    }

    fn describe(&self) -> String {
        format!(
            "procedural {}x{} amplitude {}",
            self.height, self.width, self.amplitude
        )
    }
}

/// Images read from `<root>/<prompt-hash>/<seed>/<cfg>.pgm`.
#[derive(Debug, Clone)]
pub struct RecordedBackend {
    pub root: PathBuf,
}

impl RecordedBackend {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn path_for(&self, req: &GenerationRequest) -> PathBuf {
        self.root
            .join(prompt_hash(&req.prompt))
            .join(req.seed.to_string())
            .join(format!("{}.pgm", cfg_label(req.cfg_scale)))
    }

    /// Store an image under the key of `req`.
    pub fn record(&self, req: &GenerationRequest, img: &ImageGray) -> Result<(), ImageError> {
        let path = self.path_for(req);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|source| ImageError::Io {
                path: dir.display().to_string(),
                source,
            })?;
        }
        image::save_image(img, &path)
    }
}

impl T2IBackend for RecordedBackend {
    fn generate(&self, req: &GenerationRequest) -> Result<ImageGray, BackendError> {
        let path = self.path_for(req);
        if !path.exists() {
            return Err(BackendError::Missing(path));
        }
        Ok(image::load_image(&path)?)
    }

    fn describe(&self) -> String {
        format!("recorded {}", self.root.display())
    }
}

/// Client of a generation service.
///
/// Sends `POST <endpoint>` with a JSON body
/// `{"prompt": .., "seed": .., "cfg_scale": ..}` and expects a PGM or PPM
/// image in the response body.
#[derive(Debug, Clone)]
pub struct HttpBackend {
    pub endpoint: String,
    pub token: Option<String>,
    pub timeout: Duration,
    pub retries: u32,
}

impl HttpBackend {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            token: None,
            timeout: Duration::from_secs(120),
            retries: 2,
        }
    }

    fn attempt(&self, agent: &ureq::Agent, body: &[u8]) -> Result<Vec<u8>, BackendError> {
        let mut request = agent.post(&self.endpoint).content_type("application/json");
        if let Some(token) = &self.token {
            request = request.header("Authorization", format!("Bearer {token}"));
        }
        let mut response = request
            .send(body)
            .map_err(|e| BackendError::Unreachable(e.to_string()))?;
        let status = response.status().as_u16();
        if status != 200 {
            return Err(BackendError::Status(status));
        }
        response
            .body_mut()
            .with_config()
            .limit(256 * 1024 * 1024)
            .read_to_vec()
            .map_err(|e| BackendError::Unreachable(e.to_string()))
    }
}

impl T2IBackend for HttpBackend {
    fn generate(&self, req: &GenerationRequest) -> Result<ImageGray, BackendError> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(self.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        let body = serde_json::to_vec(req).expect("request serializes");
        let mut last = None;
        for attempt in 0..=self.retries {
            match self.attempt(&agent, &body) {
                Ok(bytes) => return Ok(image::decode_pnm(&bytes)?),
                // Client errors will not improve on retry.
                Err(BackendError::Status(s)) if (400..500).contains(&s) => {
                    return Err(BackendError::Status(s))
                }
                Err(e) => {
                    log::warn!("backend attempt {} failed: {e}", attempt + 1);
                    last = Some(e);
                }
            }
        }
        Err(last.expect("at least one attempt"))
    }

    fn describe(&self) -> String {
        format!("http {}", self.endpoint)
    }
}

/// Resizes every image from an inner backend to a fixed size.
#[derive(Debug, Clone)]
pub struct ResizeOnIngest<B> {
    pub inner: B,
    pub height: usize,
    pub width: usize,
}

impl<B: T2IBackend> T2IBackend for ResizeOnIngest<B> {
    fn generate(&self, req: &GenerationRequest) -> Result<ImageGray, BackendError> {
        Ok(self.inner.generate(req)?.resize(self.height, self.width))
    }

    fn describe(&self) -> String {
        format!(
            "{} resized to {}x{}",
            self.inner.describe(),
            self.height,
            self.width
        )
    }
}

/// Convenience for tests and tools: the path a recorded backend reads.
pub fn recorded_path(root: &Path, req: &GenerationRequest) -> PathBuf {
    RecordedBackend::new(root).path_for(req)
}
