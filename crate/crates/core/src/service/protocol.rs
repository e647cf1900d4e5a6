//! Little-endian framing: `"SPF1"`, a `u8` message type, a `u32` body length,
//! then the body.

use std::io::{self, Read};

use crate::imageio::{dequantize, quantize};
use crate::model::Label;
use crate::nn::Tensor;
use crate::pem::{patch_shape, PatchSet};

use super::ServiceError;

pub const MAGIC: [u8; 4] = *b"SPF1";
pub const PROTOCOL_VERSION: u16 = 1;
/// Magic, type and body length.
pub const FRAME_HEADER_LEN: usize = 9;
/// Version, request id and patch count.
pub const PREDICT_HEADER_LEN: usize = 2 + 8 + 1;
/// Side length and channel count in front of each patch.
pub const PATCH_HEADER_LEN: usize = 2 + 1;
pub const MAX_PATCHES: usize = 3;
pub const CHANNELS: usize = 3;
/// Largest body the server will read.
pub const MAX_BODY_LEN: usize = 4 << 20;
pub const PREDICT_RESPONSE_LEN: usize = 8 + 4 + 1 + 4 + 32;
pub const HEALTH_RESPONSE_LEN: usize = 2 + 1 + 2 + 8 + 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum MsgType {
    Predict = 1,
    Health = 2,
    Error = 255,
}

impl MsgType {
    pub fn from_u8(b: u8) -> Option<MsgType> {
        match b {
            1 => Some(MsgType::Predict),
            2 => Some(MsgType::Health),
            255 => Some(MsgType::Error),
            _ => None,
        }
    }
}

/// Codes carried by error frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u16)]
pub enum ErrorCode {
    BadMagic = 1,
    BadType = 2,
    TooLarge = 3,
    BadVersion = 4,
    Arity = 5,
    Shape = 6,
    Length = 7,
    Busy = 8,
    Internal = 9,
}

impl ErrorCode {
    pub fn from_u16(v: u16) -> Option<ErrorCode> {
        use ErrorCode::*;
        [BadMagic, BadType, TooLarge, BadVersion, Arity, Shape, Length, Busy, Internal]
            .into_iter()
            .find(|c| *c as u16 == v)
    }

    pub fn name(self) -> &'static str {
        match self {
            ErrorCode::BadMagic => "BAD_MAGIC",
            ErrorCode::BadType => "BAD_TYPE",
            ErrorCode::TooLarge => "TOO_LARGE",
            ErrorCode::BadVersion => "BAD_VERSION",
            ErrorCode::Arity => "ARITY",
            ErrorCode::Shape => "SHAPE",
            ErrorCode::Length => "LENGTH",
            ErrorCode::Busy => "BUSY",
            ErrorCode::Internal => "INTERNAL",
        }
    }
}

/// A protocol violation detected while decoding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub code: ErrorCode,
    pub message: String,
}

impl Violation {
    pub fn new(code: ErrorCode, message: impl Into<String>) -> Self {
        Violation {
            code,
            message: message.into(),
        }
    }
}

pub fn frame(ty: MsgType, body: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(FRAME_HEADER_LEN + body.len());
    out.extend_from_slice(&MAGIC);
    out.push(ty as u8);
    out.extend_from_slice(&(body.len() as u32).to_le_bytes());
    out.extend_from_slice(body);
    out
}

/// Parses a frame header into the raw type byte and body length.
pub fn parse_header(h: &[u8; FRAME_HEADER_LEN]) -> Result<(u8, usize), Violation> {
    if h[..4] != MAGIC {
        return Err(Violation::new(ErrorCode::BadMagic, "frame does not start with SPF1"));
    }
    let len = u32::from_le_bytes([h[5], h[6], h[7], h[8]]) as usize;
    if len > MAX_BODY_LEN {
        return Err(Violation::new(ErrorCode::TooLarge, format!("body of {len} bytes exceeds {MAX_BODY_LEN}")));
    }
    Ok((h[4], len))
}

/// Reads one frame. `Ok(None)` on a clean end of stream before any header byte.
pub fn read_frame(r: &mut impl Read) -> Result<Option<(MsgType, Vec<u8>)>, ServiceError> {
    let mut h = [0u8; FRAME_HEADER_LEN];
    let mut got = 0;
    while got < h.len() {
        match r.read(&mut h[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(ServiceError::Protocol("stream ended inside a frame header".into())),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(ServiceError::from_io(e)),
        }
    }
    let (ty, len) = parse_header(&h).map_err(|v| ServiceError::Protocol(v.message))?;
    let ty = MsgType::from_u8(ty).ok_or_else(|| ServiceError::Protocol(format!("unknown message type {ty}")))?;
    let mut body = vec![0u8; len];
    r.read_exact(&mut body).map_err(ServiceError::from_io)?;
    Ok(Some((ty, body)))
}

/// Exact request size for `k` patches of side `s`.
pub fn predict_request_len(k: usize, s: usize) -> usize {
    FRAME_HEADER_LEN + PREDICT_HEADER_LEN + k * (PATCH_HEADER_LEN + CHANNELS * s * s)
}

/// Serializes a patch set as a predict frame. Only patch tensors reach the buffer.
pub fn encode_predict(id: u64, patches: &PatchSet) -> Result<Vec<u8>, ServiceError> {
    let k = patches.len();
    if !(1..=MAX_PATCHES).contains(&k) {
        return Err(ServiceError::Request(format!("patch count {k} outside 1..={MAX_PATCHES}")));
    }
    let s = patches
        .patch_size()
        .ok_or_else(|| ServiceError::Request("empty patch set".into()))?;
    if s > u16::MAX as usize || s == 0 {
        return Err(ServiceError::Request(format!("patch side {s} not representable")));
    }
    let mut body = Vec::with_capacity(predict_request_len(k, s) - FRAME_HEADER_LEN);
    body.extend_from_slice(&PROTOCOL_VERSION.to_le_bytes());
    body.extend_from_slice(&id.to_le_bytes());
    body.push(k as u8);
    for p in &patches.patches {
        if p.shape() != patch_shape(s) {
            return Err(ServiceError::Request(format!("patch has shape {}, expected 1x3x{s}x{s}", p.shape())));
        }
        body.extend_from_slice(&(s as u16).to_le_bytes());
        body.push(CHANNELS as u8);
        body.extend(p.data().iter().map(|&v| quantize(v)));
    }
    Ok(frame(MsgType::Predict, &body))
}

/// A decoded predict body.
#[derive(Debug, Clone)]
pub struct PredictRequest {
    pub id: u64,
    pub patches: Vec<Tensor>,
    pub patch_size: usize,
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], Violation> {
        if self.buf.len() - self.pos < n {
            return Err(Violation::new(ErrorCode::Length, "body shorter than its contents"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, Violation> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, Violation> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, Violation> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32, Violation> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, Violation> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn digest(&mut self) -> Result<[u8; 32], Violation> {
        Ok(self.take(32)?.try_into().unwrap())
    }

    fn finish(&self) -> Result<(), Violation> {
        if self.pos == self.buf.len() {
            Ok(())
        } else {
            Err(Violation::new(ErrorCode::Length, format!("{} trailing bytes", self.buf.len() - self.pos)))
        }
    }
}

fn check_version(c: &mut Cursor) -> Result<(), Violation> {
    let v = c.u16()?;
    if v != PROTOCOL_VERSION {
        return Err(Violation::new(ErrorCode::BadVersion, format!("protocol version {v}, server speaks {PROTOCOL_VERSION}")));
    }
    Ok(())
}

pub fn decode_predict(body: &[u8]) -> Result<PredictRequest, Violation> {
    let mut c = Cursor { buf: body, pos: 0 };
    check_version(&mut c)?;
    let id = c.u64()?;
    let k = c.u8()? as usize;
    if !(1..=MAX_PATCHES).contains(&k) {
        return Err(Violation::new(ErrorCode::Arity, format!("patch count {k} outside 1..={MAX_PATCHES}")));
    }
    let mut patches = Vec::with_capacity(k);
    let mut size = None;
    for i in 0..k {
        let s = c.u16()? as usize;
        let ch = c.u8()? as usize;
        if s == 0 || ch != CHANNELS {
            return Err(Violation::new(ErrorCode::Shape, format!("patch {i}: side {s}, {ch} channels")));
        }
        if *size.get_or_insert(s) != s {
            return Err(Violation::new(ErrorCode::Shape, format!("patch {i} is {s}px, earlier patches differ")));
        }
        let pixels = c.take(CHANNELS * s * s)?;
        let data = pixels.iter().map(|&b| dequantize(b)).collect();
        patches.push(Tensor::new(patch_shape(s), data).expect("length checked"));
    }
    c.finish()?;
    Ok(PredictRequest {
        id,
        patches,
        patch_size: size.unwrap_or(0),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictionResponse {
    pub id: u64,
    pub p_bona_fide: f32,
    pub label: Label,
    /// Server-side inference time.
    pub inference_ms: f32,
    pub model_digest: [u8; 32],
}

impl PredictionResponse {
    pub fn encode(&self) -> Vec<u8> {
        let mut b = Vec::with_capacity(PREDICT_RESPONSE_LEN);
        b.extend_from_slice(&self.id.to_le_bytes());
        b.extend_from_slice(&self.p_bona_fide.to_le_bytes());
        b.push(self.label as u8);
        b.extend_from_slice(&self.inference_ms.to_le_bytes());
        b.extend_from_slice(&self.model_digest);
        frame(MsgType::Predict, &b)
    }

    pub fn decode(body: &[u8]) -> Result<Self, Violation> {
        let mut c = Cursor { buf: body, pos: 0 };
        let id = c.u64()?;
        let p_bona_fide = c.f32()?;
        let label = Label::from_index(c.u8()?).ok_or_else(|| Violation::new(ErrorCode::Shape, "unknown label"))?;
        let inference_ms = c.f32()?;
        let model_digest = c.digest()?;
        c.finish()?;
        Ok(PredictionResponse {
            id,
            p_bona_fide,
            label,
            inference_ms,
            model_digest,
        })
    }
}

pub fn encode_health_request() -> Vec<u8> {
    frame(MsgType::Health, &PROTOCOL_VERSION.to_le_bytes())
}

pub fn decode_health_request(body: &[u8]) -> Result<(), Violation> {
    let mut c = Cursor { buf: body, pos: 0 };
    check_version(&mut c)?;
    c.finish()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HealthStatus {
    pub version: u16,
    pub branches: u8,
    pub patch_size: u16,
    pub threshold: f64,
    pub model_digest: [u8; 32],
}

impl HealthStatus {
    pub fn encode(&self) -> Vec<u8> {
        let mut b = Vec::with_capacity(HEALTH_RESPONSE_LEN);
        b.extend_from_slice(&self.version.to_le_bytes());
        b.push(self.branches);
        b.extend_from_slice(&self.patch_size.to_le_bytes());
        b.extend_from_slice(&self.threshold.to_le_bytes());
        b.extend_from_slice(&self.model_digest);
        frame(MsgType::Health, &b)
    }

    pub fn decode(body: &[u8]) -> Result<Self, Violation> {
        let mut c = Cursor { buf: body, pos: 0 };
        let s = HealthStatus {
            version: c.u16()?,
            branches: c.u8()?,
            patch_size: c.u16()?,
            threshold: c.f64()?,
            model_digest: c.digest()?,
        };
        c.finish()?;
        Ok(s)
    }
}

/// Error body: `u16` code followed by a UTF-8 message.
pub fn encode_error(v: &Violation) -> Vec<u8> {
    let mut b = (v.code as u16).to_le_bytes().to_vec();
    b.extend_from_slice(v.message.as_bytes());
    frame(MsgType::Error, &b)
}

/// Returns the raw code and message of an error body.
pub fn decode_error(body: &[u8]) -> (u16, String) {
    if body.len() < 2 {
        return (0, String::from_utf8_lossy(body).into_owned());
    }
    (u16::from_le_bytes([body[0], body[1]]), String::from_utf8_lossy(&body[2..]).into_owned())
}
