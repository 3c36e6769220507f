//! JSON-over-HTTP inference endpoint for the click loop.
//!
//! Routes: `POST /segment`, `GET /variants`, `GET /samples`. The protocol
//! is stateless: every request carries the full click list.

use std::io::{Cursor, Read};
use std::net::SocketAddr;
use std::sync::Arc;
use std::thread::JoinHandle;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use image::imageops::FilterType;
use image::{GrayImage, ImageFormat, ImageReader, Luma};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::data::SegmentationSample;
use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::model::{ClickLabel, ClickPrompt, SegModel, Segmenter};
use crate::train::dice;

/// Largest accepted image side.
pub const MAX_IMAGE_SIDE: u32 = 4096;
const MAX_BODY_BYTES: u64 = 256 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClickIn {
    pub x: f64,
    pub y: f64,
    pub label: ClickLabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentRequest {
    #[serde(default)]
    pub image: Option<String>,
    #[serde(default)]
    pub sample_id: Option<String>,
    pub clicks: Vec<ClickIn>,
    #[serde(default)]
    pub variant: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentResponse {
    pub mask: String,
    pub width: u32,
    pub height: u32,
    pub iou_estimate: f64,
    pub dice_vs_gt: Option<f64>,
    pub model_variant: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantInfo {
    pub name: String,
    pub image_size: usize,
}

pub struct Variant {
    pub name: String,
    pub model: SegModel,
}

/// Read-only state shared by all requests. The first variant is the
/// default.
pub struct ServerState {
    variants: Vec<Variant>,
    samples: Vec<SegmentationSample>,
}

impl ServerState {
    /// Variants are named after their adapter placement; repeated names
    /// get a `#n` suffix.
    pub fn new(models: Vec<SegModel>, samples: Vec<SegmentationSample>) -> Result<Self> {
        if models.is_empty() {
            return Err(Error::Config("serve needs at least one checkpoint".into()));
        }
        let mut variants: Vec<Variant> = Vec::new();
        for model in models {
            let base = model.variant_name();
            let mut name = base.clone();
            let mut n = 1;
            while variants.iter().any(|v| v.name == name) {
                n += 1;
                name = format!("{base}#{n}");
            }
            variants.push(Variant { name, model });
        }
        Ok(Self { variants, samples })
    }

    pub fn variants(&self) -> &[Variant] {
        &self.variants
    }

    pub fn samples(&self) -> &[SegmentationSample] {
        &self.samples
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpResponse {
    pub status: u16,
    pub body: String,
}

impl HttpResponse {
    fn json(status: u16, value: &impl Serialize) -> Self {
        Self {
            status,
            body: serde_json::to_string(value).expect("response types serialize"),
        }
    }

    fn error(status: u16, message: impl Into<String>) -> Self {
        #[derive(Serialize)]
        struct Body {
            error: String,
        }
        Self::json(
            status,
            &Body {
                error: message.into(),
            },
        )
    }
}

struct Reject(u16, String);

fn bad(msg: impl Into<String>) -> Reject {
    Reject(400, msg.into())
}

pub fn encode_png(img: &GrayImage) -> String {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)
        .expect("PNG encoding into memory");
    B64.encode(buf.into_inner())
}

/// Decodes a base64 PNG to model resolution, returning the tensor and the
/// submitted size.
fn decode_image(data: &str, size: usize) -> std::result::Result<(Tensor, u32, u32), Reject> {
    let bytes = B64
        .decode(data.trim())
        .map_err(|e| bad(format!("image is not base64: {e}")))?;
    let (w, h) = ImageReader::with_format(Cursor::new(&bytes), ImageFormat::Png)
        .into_dimensions()
        .map_err(|e| bad(format!("image is not a PNG: {e}")))?;
    if w > MAX_IMAGE_SIDE || h > MAX_IMAGE_SIDE {
        return Err(Reject(
            413,
            format!("image {w}x{h} exceeds {MAX_IMAGE_SIDE}x{MAX_IMAGE_SIDE}"),
        ));
    }
    let img = ImageReader::with_format(Cursor::new(&bytes), ImageFormat::Png)
        .decode()
        .map_err(|e| bad(format!("image is not a PNG: {e}")))?;
    let mut gray = img.to_luma8();
    let side = size as u32;
    if gray.dimensions() != (side, side) {
        gray = image::imageops::resize(&gray, side, side, FilterType::Triangle);
    }
    let pixels = gray.pixels().map(|Luma([v])| *v as f64 / 255.0).collect();
    let t = Tensor::new(vec![size, size, 1], pixels).map_err(|e| Reject(500, e.to_string()))?;
    Ok((t.with_grad(false), w, h))
}

/// Maps a click in a `w × h` image to the pixel grid of the model.
fn scale_click(
    c: &ClickIn,
    w: u32,
    h: u32,
    size: usize,
) -> std::result::Result<ClickPrompt, Reject> {
    if !(c.x.is_finite()
        && c.y.is_finite()
        && c.x >= 0.0
        && c.y >= 0.0
        && c.x < w as f64
        && c.y < h as f64)
    {
        return Err(bad(format!(
            "click ({}, {}) outside the {w}x{h} image",
            c.x, c.y
        )));
    }
    let px = ((c.x * size as f64 / w as f64).floor() as usize).min(size - 1);
    let py = ((c.y * size as f64 / h as f64).floor() as usize).min(size - 1);
    Ok(ClickPrompt {
        x: px,
        y: py,
        label: c.label,
    })
}

fn segment(state: &ServerState, body: &[u8]) -> std::result::Result<SegmentResponse, Reject> {
    let req: SegmentRequest =
        serde_json::from_slice(body).map_err(|e| bad(format!("malformed request: {e}")))?;
    if req.clicks.is_empty() {
        return Err(bad("at least one click is required"));
    }
    let variant = match &req.variant {
        None => &state.variants[0],
        Some(name) => state
            .variants
            .iter()
            .find(|v| &v.name == name)
            .ok_or_else(|| bad(format!("unknown variant `{name}`")))?,
    };
    let size = variant.model.image_size();
    let (image, gt, w, h) = match (&req.image, &req.sample_id) {
        (Some(data), None) => {
            let (t, w, h) = decode_image(data, size)?;
            (t, None, w, h)
        }
        (None, Some(id)) => {
            let s = state
                .samples
                .iter()
                .find(|s| &s.id == id)
                .ok_or_else(|| bad(format!("unknown sample `{id}`")))?;
            if s.mask.dims() != (size, size) {
                return Err(bad(format!(
                    "sample `{id}` does not match model resolution {size}"
                )));
            }
            (s.image.clone(), Some(&s.mask), size as u32, size as u32)
        }
        _ => return Err(bad("exactly one of `image` and `sample_id` is required")),
    };
    let clicks = req
        .clicks
        .iter()
        .map(|c| scale_click(c, w, h, size))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let internal = |e: Error| Reject(500, format!("prediction failed: {e}"));
    let pred = variant.model.predict(&image, &clicks).map_err(internal)?;
    let mask = pred.binary_mask();
    let dice_vs_gt = gt.map(|g| dice(&mask, g)).transpose().map_err(internal)?;
    let out: BinaryMask = mask.resize_nearest(h as usize, w as usize);
    Ok(SegmentResponse {
        mask: encode_png(&crate::data::mask_to_png_gray(&out)),
        width: w,
        height: h,
        iou_estimate: pred.iou_estimate,
        dice_vs_gt,
        model_variant: variant.name.clone(),
    })
}

/// Routes one request. Pure apart from reading `state`.
pub fn handle(state: &ServerState, method: &str, path: &str, body: &[u8]) -> HttpResponse {
    let path = path.split('?').next().unwrap_or(path);
    match (method, path) {
        ("POST", "/segment") => match segment(state, body) {
            Ok(r) => HttpResponse::json(200, &r),
            Err(Reject(code, msg)) => HttpResponse::error(code, msg),
        },
        ("GET", "/variants") => {
            #[derive(Serialize)]
            struct Body {
                variants: Vec<VariantInfo>,
            }
            let variants = state
                .variants
                .iter()
                .map(|v| VariantInfo {
                    name: v.name.clone(),
                    image_size: v.model.image_size(),
                })
                .collect();
            HttpResponse::json(200, &Body { variants })
        }
        ("GET", "/samples") => {
            #[derive(Serialize)]
            struct Body {
                samples: Vec<String>,
            }
            let samples = state.samples.iter().map(|s| s.id.clone()).collect();
            HttpResponse::json(200, &Body { samples })
        }
        (_, "/segment" | "/variants" | "/samples") => {
            HttpResponse::error(405, format!("{method} not allowed on {path}"))
        }
        _ => HttpResponse::error(404, format!("no route for {path}")),
    }
}

fn respond(req: tiny_http::Request, resp: HttpResponse) {
    let headers = [
        tiny_http::Header::from_bytes("Content-Type", "application/json").expect("static header"),
        tiny_http::Header::from_bytes("Access-Control-Allow-Origin", "*").expect("static header"),
        tiny_http::Header::from_bytes("Access-Control-Allow-Headers", "Content-Type")
            .expect("static header"),
    ];
    let mut r = tiny_http::Response::from_string(resp.body).with_status_code(resp.status);
    for h in headers {
        r = r.with_header(h);
    }
    if let Err(e) = req.respond(r) {
        log::warn!("failed to send response: {e}");
    }
}

fn worker(server: &tiny_http::Server, state: &ServerState) {
    while let Ok(mut req) = server.recv() {
        let method = req.method().as_str().to_ascii_uppercase();
        let url = req.url().to_string();
        if method == "OPTIONS" {
            respond(
                req,
                HttpResponse {
                    status: 204,
                    body: String::new(),
                },
            );
            continue;
        }
        let mut body = Vec::new();
        let read = req
            .as_reader()
            .take(MAX_BODY_BYTES + 1)
            .read_to_end(&mut body);
        let resp = match read {
            Err(e) => HttpResponse::error(400, format!("cannot read body: {e}")),
            Ok(n) if n as u64 > MAX_BODY_BYTES => {
                HttpResponse::error(413, "request body too large")
            }
            Ok(_) => handle(state, &method, &url, &body),
        };
        log::info!("{method} {url} -> {}", resp.status);
        respond(req, resp);
    }
}

pub struct ServerHandle {
    server: Arc<tiny_http::Server>,
    workers: Vec<JoinHandle<()>>,
    addr: SocketAddr,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Blocks until every worker exits.
    pub fn join(self) {
        for w in self.workers {
            let _ = w.join();
        }
    }

    pub fn shutdown(self) {
        for _ in &self.workers {
            self.server.unblock();
        }
        self.join();
    }
}

/// Binds `addr` (port 0 picks a free port) and serves on `threads` workers.
pub fn spawn(state: Arc<ServerState>, addr: &str, threads: usize) -> Result<ServerHandle> {
    let server = tiny_http::Server::http(addr)
        .map_err(|e| Error::Invalid(format!("cannot bind {addr}: {e}")))?;
    let bound = server
        .server_addr()
        .to_ip()
        .ok_or_else(|| Error::Invalid(format!("{addr} is not an IP address")))?;
    let server = Arc::new(server);
    let workers = (0..threads.max(1))
        .map(|_| {
            let server = Arc::clone(&server);
            let state = Arc::clone(&state);
            std::thread::spawn(move || worker(&server, &state))
        })
        .collect();
    Ok(ServerHandle {
        server,
        workers,
        addr: bound,
    })
}
