use std::io::{Read, Write};
use std::net::TcpStream;
use std::sync::Arc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::protocol::*;
use super::*;
use crate::model::{ConvBlock, Label, ModelConfig, Score};
use crate::nn::Tensor;
use crate::pem::synthetic::random_face;
use crate::pem::patch_shape;

fn small_model(seed: u64) -> Model {
    Model::build(ModelConfig {
        branches: 2,
        backbone: vec![ConvBlock::new(4, 3, 1), ConvBlock::new(8, 3, 1)],
        patch_size: 64,
        seed,
        ..ModelConfig::default()
    })
    .unwrap()
}

fn zero_head(mut model: Model) -> Model {
    for name in ["head.weight", "head.bias"] {
        model.params_mut().find_mut(name).unwrap().value.fill(0.0);
    }
    model
}

fn start(model: Model) -> (Server, Client) {
    let server = serve(model, ServerConfig::default(), "127.0.0.1:0").unwrap();
    let client = Client::new(server.local_addr());
    (server, client)
}

fn patches(seed: u64, k: usize, s: usize) -> PatchSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    PatchSet::from_patches((0..k).map(|_| Tensor::from_fn(patch_shape(s), |_, _, _, _| rng.gen())).collect())
}

/// Sends raw bytes and returns everything the server wrote before closing.
fn raw_exchange(client: &Client, bytes: &[u8]) -> Vec<u8> {
    let mut s = TcpStream::connect(client.addr()).unwrap();
    s.set_read_timeout(Some(DEFAULT_TIMEOUT)).unwrap();
    s.write_all(bytes).unwrap();
    let mut out = Vec::new();
    s.read_to_end(&mut out).unwrap();
    out
}

fn error_code(reply: &[u8]) -> u16 {
    let mut r = reply;
    let (ty, body) = read_frame(&mut r).unwrap().unwrap();
    assert_eq!(ty, MsgType::Error);
    assert!(r.is_empty(), "server kept talking after the error frame");
    decode_error(&body).0
}

proptest! {
    #[test]
    fn request_length_is_header_plus_pixels(k in 1usize..=3, s in 1usize..24, id: u64, seed: u64) {
        let bytes = encode_predict(id, &patches(seed, k, s)).unwrap();
        prop_assert_eq!(bytes.len(), predict_request_len(k, s));
        prop_assert_eq!(bytes.len() - FRAME_HEADER_LEN - PREDICT_HEADER_LEN - k * PATCH_HEADER_LEN, k * 3 * s * s);
        let req = decode_predict(&bytes[FRAME_HEADER_LEN..]).unwrap();
        prop_assert_eq!(req.id, id);
        prop_assert_eq!(req.patches.len(), k);
    }

    #[test]
    fn wire_quantization_error_is_half_a_level(seed: u64) {
        let p = patches(seed, 2, 8);
        let bytes = encode_predict(1, &p).unwrap();
        let back = decode_predict(&bytes[FRAME_HEADER_LEN..]).unwrap();
        for (a, b) in p.patches.iter().zip(&back.patches) {
            for (x, y) in a.data().iter().zip(b.data()) {
                prop_assert!((x - y).abs() <= 0.5 / 255.0 + 1e-6);
            }
        }
    }

    #[test]
    fn decoder_never_panics(bytes in proptest::collection::vec(any::<u8>(), 0..512)) {
        let _ = decode_predict(&bytes);
        let _ = PredictionResponse::decode(&bytes);
        let _ = HealthStatus::decode(&bytes);
        let _ = decode_error(&bytes);
    }
}

#[test]
fn serializer_rejects_bad_patch_sets() {
    assert!(encode_predict(0, &PatchSet::from_patches(vec![])).is_err());
    assert!(encode_predict(0, &patches(0, 4, 8)).is_err());
    let mut mixed = patches(0, 2, 8);
    mixed.patches[1] = Tensor::zeros(patch_shape(9));
    assert!(encode_predict(0, &mixed).is_err());
}

#[test]
fn response_frames_round_trip() {
    let r = PredictionResponse {
        id: 77,
        p_bona_fide: 0.625,
        label: Label::BonaFide,
        inference_ms: 1.5,
        model_digest: [9; 32],
    };
    let mut bytes = r.encode().as_slice().to_vec();
    assert_eq!(bytes.len(), FRAME_HEADER_LEN + PREDICT_RESPONSE_LEN);
    let (ty, body) = read_frame(&mut bytes.as_slice()).unwrap().unwrap();
    assert_eq!(ty, MsgType::Predict);
    assert_eq!(PredictionResponse::decode(&body).unwrap(), r);
    bytes[FRAME_HEADER_LEN + 12] = 7;
    assert!(PredictionResponse::decode(&bytes[FRAME_HEADER_LEN..]).is_err());
}

#[test]
fn well_formed_request_gets_matching_id() {
    let model = small_model(3);
    let p = patches(5, 2, 64);
    let local = model.forward(&p).unwrap();
    let (_server, client) = start(model);
    let r = client.predict(0xDEAD_BEEF, &p).unwrap();
    assert_eq!(r.id, 0xDEAD_BEEF);
    assert!(r.p_bona_fide > 0.0 && r.p_bona_fide < 1.0);
    assert_eq!(r.label, decide(&Score::from_bona_fide(r.p_bona_fide), &DecisionConfig::default()));
    assert!((r.p_bona_fide - local.p_bona_fide).abs() < 0.02);
}

#[test]
fn four_patches_is_an_arity_error() {
    let (_server, client) = start(small_model(0));
    // build a k=4 body by hand: the serializer refuses it
    let s = 64;
    let mut body = PROTOCOL_VERSION.to_le_bytes().to_vec();
    body.extend_from_slice(&1u64.to_le_bytes());
    body.push(4);
    for _ in 0..4 {
        body.extend_from_slice(&(s as u16).to_le_bytes());
        body.push(3);
        body.extend(std::iter::repeat(128u8).take(3 * s * s));
    }
    let reply = raw_exchange(&client, &frame(MsgType::Predict, &body));
    assert_eq!(error_code(&reply), ErrorCode::Arity as u16);
}

#[test]
fn arity_mismatch_with_model_is_surfaced() {
    let (_server, client) = start(small_model(0));
    match client.predict(1, &patches(0, 1, 64)) {
        Err(ServiceError::Remote { code, name, .. }) => {
            assert_eq!(code, ErrorCode::Arity as u16);
            assert_eq!(name, "ARITY");
        }
        other => panic!("expected an ARITY error, got {other:?}"),
    }
    match client.predict(1, &patches(0, 2, 32)) {
        Err(ServiceError::Remote { code, .. }) => assert_eq!(code, ErrorCode::Shape as u16),
        other => panic!("expected a SHAPE error, got {other:?}"),
    }
}

#[test]
fn header_violations() {
    let (_server, client) = start(small_model(0));
    let good = encode_predict(1, &patches(0, 2, 64)).unwrap();
    let mut bad_magic = good.clone();
    bad_magic[0] = b'X';
    assert_eq!(error_code(&raw_exchange(&client, &bad_magic)), ErrorCode::BadMagic as u16);
    let mut bad_type = good.clone();
    bad_type[4] = 9;
    assert_eq!(error_code(&raw_exchange(&client, &bad_type)), ErrorCode::BadType as u16);
    let mut huge = good.clone();
    huge[5..9].copy_from_slice(&u32::MAX.to_le_bytes());
    assert_eq!(error_code(&raw_exchange(&client, &huge)), ErrorCode::TooLarge as u16);
    let mut version = good;
    version[FRAME_HEADER_LEN] = 2;
    assert_eq!(error_code(&raw_exchange(&client, &version)), ErrorCode::BadVersion as u16);
}

#[test]
fn zero_head_model_gives_one_half_remotely() {
    let (_server, client) = start(zero_head(small_model(1)));
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let face = random_face(&mut rng, "face");
    let r = client.predict_remote(&face, &PemConfig::default(), 42).unwrap();
    assert_eq!(r.id, 42);
    assert_eq!(r.p_bona_fide, 0.5);
    // ties go to Attack
    assert_eq!(r.label, Label::Attack);
}

#[test]
fn remote_request_carries_only_patch_bytes() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let face = random_face(&mut rng, "face");
    let cfg = PemConfig::default();
    let set = extract_face(&face, REMOTE_K, &cfg, 9).unwrap();
    let bytes = encode_predict(9, &set).unwrap();
    assert_eq!(bytes.len(), FRAME_HEADER_LEN + PREDICT_HEADER_LEN + 2 * PATCH_HEADER_LEN + 2 * 3 * 64 * 64);
    assert!(bytes.len() < face.image.len());
}

#[test]
fn remote_scores_track_local_scores() {
    let model = small_model(8);
    let cfg = PemConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let faces: Vec<_> = (0..100).map(|i| random_face(&mut rng, format!("f{i}"))).collect();
    let local: Vec<f32> = faces
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let set = extract_face(f, REMOTE_K, &cfg, i as u64).unwrap();
            model.forward(&set).unwrap().p_bona_fide
        })
        .collect();
    let (_server, client) = start(model);
    let worst = faces
        .iter()
        .enumerate()
        .map(|(i, f)| (client.predict_remote(f, &cfg, i as u64).unwrap().p_bona_fide - local[i]).abs())
        .fold(0.0f32, f32::max);
    assert!(worst <= 0.02, "worst local/remote gap {worst}");
}

#[test]
fn health_reports_digest_and_detects_stopped_server() {
    let a = small_model(1);
    let digest = a.digest();
    let (server, client) = start(a);
    let h = client.health().unwrap();
    assert_eq!(h.model_digest, digest);
    assert_eq!((h.version, h.branches, h.patch_size), (PROTOCOL_VERSION, 2, 64));
    server.shutdown();
    assert!(matches!(client.health(), Err(ServiceError::Connection(_))));
}

#[test]
fn digest_follows_the_loaded_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let mut digests = Vec::new();
    for seed in [1, 2] {
        let path = dir.path().join(format!("ckpt{seed}"));
        crate::model::save_checkpoint(&small_model(seed), &path).unwrap();
        let (_server, client) = start(crate::model::load_checkpoint(&path).unwrap());
        digests.push(client.health().unwrap().model_digest);
    }
    assert_ne!(digests[0], digests[1]);
}

#[test]
fn concurrent_identical_requests() {
    let (server, client) = start(small_model(4));
    let p = Arc::new(patches(3, 2, 64));
    let handles: Vec<_> = (0..32u64)
        .map(|i| {
            let (client, p) = (client.clone(), p.clone());
            std::thread::spawn(move || client.predict(i, &p).unwrap())
        })
        .collect();
    let responses: Vec<_> = handles.into_iter().map(|h| h.join().unwrap()).collect();
    for (i, r) in responses.iter().enumerate() {
        assert_eq!(r.id, i as u64);
        assert_eq!(r.p_bona_fide, responses[0].p_bona_fide);
        assert_eq!(r.label, responses[0].label);
    }
    assert_eq!(server.stats().predictions.load(std::sync::atomic::Ordering::Relaxed), 32);
}

#[test]
fn connection_limit_answers_busy() {
    let server = serve(
        small_model(0),
        ServerConfig {
            max_connections: 1,
            ..ServerConfig::default()
        },
        "127.0.0.1:0",
    )
    .unwrap();
    let client = Client::new(server.local_addr());
    let _hold = TcpStream::connect(server.local_addr()).unwrap();
    std::thread::sleep(std::time::Duration::from_millis(100));
    match client.health() {
        Err(ServiceError::Remote { name, .. }) => assert_eq!(name, "BUSY"),
        other => panic!("expected BUSY, got {other:?}"),
    }
}

#[test]
fn bind_failure_is_a_startup_error() {
    let first = serve(small_model(0), ServerConfig::default(), "127.0.0.1:0").unwrap();
    let err = serve(small_model(0), ServerConfig::default(), first.local_addr()).err().unwrap();
    assert!(matches!(err, ServiceError::Bind(..)));
}

#[test]
fn timeout_is_reported() {
    // a listener that never answers
    let silent = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let client = Client::new(silent.local_addr().unwrap()).with_timeout(std::time::Duration::from_millis(100));
    assert!(matches!(client.health(), Err(ServiceError::Timeout)));
}

#[test]
fn fuzzed_streams_never_crash_the_server() {
    let (server, client) = start(small_model(6));
    let report = fuzz::fuzz_server(&client, 600, 1).unwrap();
    assert!(report.clean(), "{:?}", report.anomalies);
    assert!(report.well_formed > 50);
    assert_eq!(report.payload_accounted, report.well_formed);
    assert!(report.error_frames > 200);
    assert_eq!(server.stats().handler_panics.load(std::sync::atomic::Ordering::Relaxed), 0);
    assert!(client.health().is_ok());
}
