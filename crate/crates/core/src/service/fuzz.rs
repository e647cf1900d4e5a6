//! Robustness harness: throws malformed and well-formed byte streams at a
//! running server and classifies what comes back.

use std::io::{Read, Write};
use std::net::{Shutdown, SocketAddr, TcpStream};
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::protocol::{self, MsgType, FRAME_HEADER_LEN};
use super::{Client, PredictionResponse, ServiceError};
use crate::nn::Tensor;
use crate::pem::{patch_shape, PatchSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Case {
    RandomBytes,
    BitFlips,
    Truncated,
    BadHeader,
    FieldMutation,
    WellFormed,
}

const CASES: [Case; 6] = [
    Case::RandomBytes,
    Case::BitFlips,
    Case::Truncated,
    Case::BadHeader,
    Case::FieldMutation,
    Case::WellFormed,
];

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FuzzReport {
    pub sent: usize,
    pub well_formed: usize,
    /// Well-formed requests answered with a response carrying their id.
    pub well_formed_answered: usize,
    pub error_frames: usize,
    pub disconnects: usize,
    /// Mutated requests that still decoded and were answered.
    pub benign_answers: usize,
    /// Requests whose pixel bytes were exactly `k * 3 * S * S`.
    pub payload_accounted: usize,
    /// Replies that were neither a frame nor a clean close, or timed out.
    pub anomalies: Vec<String>,
}

impl FuzzReport {
    pub fn clean(&self) -> bool {
        self.anomalies.is_empty() && self.well_formed_answered == self.well_formed
    }
}

fn random_patches(rng: &mut ChaCha8Rng, k: usize, s: usize) -> PatchSet {
    PatchSet::from_patches(
        (0..k)
            .map(|_| Tensor::from_fn(patch_shape(s), |_, _, _, _| rng.gen::<f32>()))
            .collect(),
    )
}

fn build_case(case: Case, rng: &mut ChaCha8Rng, k: usize, s: usize, id: u64) -> Vec<u8> {
    let valid = || protocol::encode_predict(id, &random_patches(&mut ChaCha8Rng::seed_from_u64(id), k, s)).expect("valid request");
    match case {
        Case::RandomBytes => {
            let n = rng.gen_range(0..256);
            (0..n).map(|_| rng.gen()).collect()
        }
        Case::BitFlips => {
            let mut b = valid();
            for _ in 0..rng.gen_range(1..=8) {
                let i = rng.gen_range(0..b.len());
                b[i] ^= 1 << rng.gen_range(0..8);
            }
            b
        }
        Case::Truncated => {
            let mut b = valid();
            b.truncate(rng.gen_range(0..b.len()));
            b
        }
        Case::BadHeader => {
            let mut b = valid();
            match rng.gen_range(0..3) {
                0 => b[4] = rng.gen(),
                1 => b[5..9].copy_from_slice(&rng.gen::<u32>().to_le_bytes()),
                _ => b[..4].copy_from_slice(&rng.gen::<[u8; 4]>()),
            }
            b
        }
        Case::FieldMutation => {
            let mut b = valid();
            let body = FRAME_HEADER_LEN;
            match rng.gen_range(0..4) {
                0 => b[body..body + 2].copy_from_slice(&rng.gen::<u16>().to_le_bytes()),
                1 => b[body + 10] = rng.gen(),
                2 => b[body + 11..body + 13].copy_from_slice(&rng.gen::<u16>().to_le_bytes()),
                _ => b[body + 13] = rng.gen(),
            }
            b
        }
        Case::WellFormed => valid(),
    }
}

/// Reads the reply to one fuzz case: a frame, a clean close, or an anomaly.
fn exchange(addr: SocketAddr, bytes: &[u8], timeout: Duration) -> Result<Option<(MsgType, Vec<u8>)>, String> {
    let mut stream = TcpStream::connect_timeout(&addr, timeout).map_err(|e| format!("connect: {e}"))?;
    stream.set_read_timeout(Some(timeout)).map_err(|e| e.to_string())?;
    // the server may close early and reset the write; that still counts as a reply
    let _ = stream.write_all(bytes);
    let _ = stream.shutdown(Shutdown::Write);
    let mut reply = Vec::new();
    match stream.read_to_end(&mut reply) {
        Ok(_) => {}
        Err(e) if matches!(e.kind(), std::io::ErrorKind::ConnectionReset) => {}
        Err(e) => return Err(format!("read: {e}")),
    }
    if reply.is_empty() {
        return Ok(None);
    }
    let mut r = reply.as_slice();
    match protocol::read_frame(&mut r) {
        Ok(Some(f)) if r.is_empty() => Ok(Some(f)),
        Ok(Some(_)) => Err(format!("{} bytes after the reply frame", r.len())),
        Ok(None) => Ok(None),
        Err(e) => Err(format!("unparseable reply: {e}")),
    }
}

/// Sends `n` cases to the server behind `client`, one connection each.
pub fn fuzz_server(client: &Client, n: usize, seed: u64) -> Result<FuzzReport, ServiceError> {
    let health = client.health()?;
    let (k, s) = (health.branches as usize, health.patch_size as usize);
    let timeout = Duration::from_secs(5);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = FuzzReport::default();
    for i in 0..n {
        let case = CASES[rng.gen_range(0..CASES.len())];
        let id = seed.wrapping_mul(1_000_003).wrapping_add(i as u64);
        let bytes = build_case(case, &mut rng, k, s, id);
        report.sent += 1;
        if case == Case::WellFormed {
            report.well_formed += 1;
            let pixels = protocol::decode_predict(&bytes[FRAME_HEADER_LEN..])
                .map(|r| r.patches.iter().map(Tensor::len).sum::<usize>())
                .unwrap_or(0);
            if bytes.len() == protocol::predict_request_len(k, s) && pixels == k * 3 * s * s {
                report.payload_accounted += 1;
            }
        }
        match exchange(client.addr(), &bytes, timeout) {
            Err(e) => report.anomalies.push(format!("case {i} ({case:?}): {e}")),
            Ok(None) => report.disconnects += 1,
            Ok(Some((MsgType::Error, _))) => report.error_frames += 1,
            Ok(Some((MsgType::Predict, body))) => match PredictionResponse::decode(&body) {
                Ok(r) if case == Case::WellFormed && r.id == id => report.well_formed_answered += 1,
                Ok(_) if case != Case::WellFormed => report.benign_answers += 1,
                Ok(r) => report.anomalies.push(format!("case {i}: response id {} for request {id}", r.id)),
                Err(v) => report.anomalies.push(format!("case {i}: bad response body: {}", v.message)),
            },
            Ok(Some((MsgType::Health, _))) if case != Case::WellFormed => report.benign_answers += 1,
            Ok(Some((MsgType::Health, _))) => report.anomalies.push(format!("case {i}: health reply to a predict request")),
        }
    }
    Ok(report)
}
