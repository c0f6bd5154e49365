//! One-request/one-response inference over a stream socket.
//!
//! A connection carries exactly one length-delimited `ENSP` frame each way:
//! the request holds the run-config digest, the key id and the encrypted
//! input matrix; the response holds the encrypted output and the stage
//! report. The server is built from evaluation-side key material only and
//! has no decryption capability.

use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::sync::Arc;

use crate::blocks::{run_kernel, LayerWeights};
use crate::config::{Kernel, RunConfig};
use crate::engine::Engine;
use crate::error::{Error, Result};
use crate::io::{read_packed_matrix, write_packed_matrix, ByteReader, ByteWriter, FORMAT_VERSION};
use crate::keys::KeyMaterial;
use crate::metrics::{render_records, StageRecord};
use crate::packing::PackedMatrix;

pub const WIRE_MAGIC: &[u8; 4] = b"ENSP";

const MAX_FRAME_BYTES: u64 = 1 << 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameType {
    Request = 0,
    Response = 1,
    Error = 2,
}

/// Writes one frame: magic, version, message type, body length, body.
pub fn write_frame(stream: &mut impl Write, frame_type: FrameType, body: &[u8]) -> Result<()> {
    let mut header = ByteWriter::new();
    header.magic(WIRE_MAGIC);
    header.u8(FORMAT_VERSION);
    header.u8(frame_type as u8);
    header.u64(body.len() as u64);
    stream.write_all(&header.into_bytes())?;
    stream.write_all(body)?;
    stream.flush()?;
    Ok(())
}

pub fn read_frame(stream: &mut impl Read) -> Result<(FrameType, Vec<u8>)> {
    let mut header = [0u8; 14];
    stream.read_exact(&mut header)?;
    let mut r = ByteReader::new(&header);
    r.magic(WIRE_MAGIC)?;
    let version = r.u8("protocol version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Protocol(format!(
            "unsupported protocol version {version}"
        )));
    }
    let frame_type = match r.u8("message type")? {
        0 => FrameType::Request,
        1 => FrameType::Response,
        2 => FrameType::Error,
        other => return Err(Error::Protocol(format!("unknown message type {other}"))),
    };
    let len = r.u64("body length")?;
    if len > MAX_FRAME_BYTES {
        return Err(Error::Protocol(format!(
            "frame of {len} bytes is too large"
        )));
    }
    let mut body = vec![0u8; len as usize];
    stream.read_exact(&mut body)?;
    Ok((frame_type, body))
}

pub struct Request {
    pub config_digest: u64,
    pub key_id: u64,
    pub matrix: PackedMatrix,
}

pub fn encode_request(config: &RunConfig, key_id: u64, matrix: &PackedMatrix) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.u64(config.digest());
    w.u64(key_id);
    w.bytes(&write_packed_matrix(matrix));
    w.into_bytes()
}

pub fn decode_request(body: &[u8]) -> Result<Request> {
    let mut r = ByteReader::new(body);
    let config_digest = r.u64("config digest")?;
    let key_id = r.u64("key id")?;
    let matrix = read_packed_matrix(r.bytes(r.remaining(), "matrix")?)?;
    Ok(Request {
        config_digest,
        key_id,
        matrix,
    })
}

pub struct Response {
    pub matrix: PackedMatrix,
    pub report: String,
}

pub fn encode_response(matrix: &PackedMatrix, report: &str) -> Vec<u8> {
    let mut w = ByteWriter::new();
    let report = report.as_bytes();
    w.u32(report.len() as u32);
    w.bytes(report);
    w.bytes(&write_packed_matrix(matrix));
    w.into_bytes()
}

pub fn decode_response(body: &[u8]) -> Result<Response> {
    let mut r = ByteReader::new(body);
    let report_len = r.u32("report length")? as usize;
    let report = String::from_utf8(r.bytes(report_len, "report")?.to_vec())
        .map_err(|_| Error::Protocol("report is not UTF-8".into()))?;
    let matrix = read_packed_matrix(r.bytes(r.remaining(), "matrix")?)?;
    Ok(Response { matrix, report })
}

fn encode_error(code: u16, message: &str) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.u16(code);
    let msg = message.as_bytes();
    w.u32(msg.len() as u32);
    w.bytes(msg);
    w.into_bytes()
}

pub fn decode_error(body: &[u8]) -> Result<(u16, String)> {
    let mut r = ByteReader::new(body);
    let code = r.u16("error code")?;
    let len = r.u32("message length")? as usize;
    let msg = String::from_utf8(r.bytes(len, "message")?.to_vec())
        .map_err(|_| Error::Protocol("error message is not UTF-8".into()))?;
    Ok((code, msg))
}

/// Server state: an evaluate-only engine plus the agreed configuration.
pub struct Server {
    engine: Engine,
    config: RunConfig,
    weights: LayerWeights,
    kernel: Kernel,
}

impl Server {
    /// Builds a server from evaluation-side key material. Refuses key
    /// material that still carries the secret key: the serving path must be
    /// unable to decrypt by construction.
    pub fn new(
        keys: Arc<KeyMaterial>,
        config: RunConfig,
        weights: LayerWeights,
        kernel: Kernel,
    ) -> Result<Server> {
        if keys.secret.is_some() {
            return Err(Error::Protocol(
                "server refuses key material containing a secret key".into(),
            ));
        }
        config.validate()?;
        weights.validate()?;
        Ok(Server {
            engine: Engine::new(keys)?,
            config,
            weights,
            kernel,
        })
    }

    pub fn engine(&self) -> &Engine {
        &self.engine
    }

    /// Processes one request body into a response body.
    pub fn handle(&self, body: &[u8]) -> Result<Vec<u8>> {
        let request = decode_request(body)?;
        if request.config_digest != self.config.digest() {
            return Err(Error::Protocol(format!(
                "config digest mismatch: client {:#018x}, server {:#018x}",
                request.config_digest,
                self.config.digest()
            )));
        }
        if request.key_id != self.engine.key_id() {
            return Err(Error::Protocol(format!(
                "evaluation keys {:#018x} do not match request key id {:#018x}",
                self.engine.key_id(),
                request.key_id
            )));
        }
        self.engine.tracker().clear();
        let out = run_kernel(
            &self.engine,
            &request.matrix,
            &self.weights,
            &self.config.layer_config()?,
            self.kernel,
        )?;
        let report = render_records(&self.engine.tracker().records());
        Ok(encode_response(&out, &report))
    }

    /// Accepts and serves exactly one connection.
    pub fn serve_one(&self, listener: &TcpListener) -> Result<()> {
        let (mut stream, _) = listener.accept()?;
        self.serve_stream(&mut stream)
    }

    pub fn serve_stream(&self, stream: &mut TcpStream) -> Result<()> {
        let (frame_type, body) = read_frame(stream)?;
        if frame_type != FrameType::Request {
            write_frame(
                stream,
                FrameType::Error,
                &encode_error(400, "expected a request frame"),
            )?;
            return Err(Error::Protocol("expected a request frame".into()));
        }
        match self.handle(&body) {
            Ok(response) => write_frame(stream, FrameType::Response, &response),
            Err(e) => {
                write_frame(stream, FrameType::Error, &encode_error(500, &e.to_string()))?;
                Err(e)
            }
        }
    }

    /// Serves connections until `accept` fails; one inference per connection.
    pub fn serve_forever(&self, listener: &TcpListener) -> Result<()> {
        loop {
            if let Err(e) = self.serve_one(listener) {
                eprintln!("request failed: {e}");
            }
        }
    }
}

#[derive(Debug)]
pub struct ClientReply {
    pub matrix: PackedMatrix,
    pub report: String,
    pub records: Vec<StageRecord>,
}

/// One round trip: connect, send the encrypted input, receive the encrypted
/// output and stage report.
pub fn request(
    addr: impl ToSocketAddrs,
    config: &RunConfig,
    key_id: u64,
    matrix: &PackedMatrix,
) -> Result<ClientReply> {
    let mut stream = TcpStream::connect(addr)?;
    write_frame(
        &mut stream,
        FrameType::Request,
        &encode_request(config, key_id, matrix),
    )?;
    let (frame_type, body) = read_frame(&mut stream)?;
    match frame_type {
        FrameType::Response => {
            let resp = decode_response(&body)?;
            let records = resp
                .report
                .lines()
                .filter_map(|l| serde_json::from_str(l).ok())
                .collect();
            Ok(ClientReply {
                matrix: resp.matrix,
                report: resp.report,
                records,
            })
        }
        FrameType::Error => {
            let (code, msg) = decode_error(&body)?;
            Err(Error::Protocol(format!("server error {code}: {msg}")))
        }
        FrameType::Request => Err(Error::Protocol("unexpected request frame".into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::packing::{pack_columns, unpack};
    use crate::params::BackendKind;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn desk_clear_config() -> RunConfig {
        let mut cfg = RunConfig::desk();
        cfg.backend = BackendKind::Clear;
        cfg.model = crate::config::ModelDims {
            seq_len: 4,
            dim: 4,
            heads: 2,
            ffn_dim: 8,
        };
        cfg.params.max_level = 36;
        cfg
    }

    #[test]
    fn frame_roundtrip_over_loopback() {
        let cfg = desk_clear_config();
        let keys = Arc::new(KeyMaterial::generate(&cfg.params, cfg.backend, true).unwrap());
        let client_engine = Engine::new(keys.clone()).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
        let weights = LayerWeights::random(cfg.model.dim, cfg.model.ffn_dim, &mut rng);

        let server = Server::new(
            Arc::new(keys.evaluation_only()),
            cfg.clone(),
            weights.clone(),
            Kernel::Pcmm,
        )
        .unwrap();

        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let handle = std::thread::spawn(move || server.serve_one(&listener));

        let x = [
            0.5, -0.25, 1.0, 0.0, 0.75, -1.0, 0.25, 0.5, -0.5, 0.25, -1.0, 0.0, 1.0, 0.75, -0.25,
            -0.75,
        ];
        let pm = pack_columns(&client_engine, &x, 4, 4).unwrap();
        let reply = request(addr, &cfg, client_engine.key_id(), &pm).unwrap();
        handle.join().unwrap().unwrap();

        let got = unpack(&client_engine, &reply.matrix).unwrap();
        let want = crate::reference::matmul(&x, &weights.wq.to_f64(), 4, 4, 4);
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-9);
        }
        assert!(reply.records.iter().any(|r| r.label == "pcmm"));
    }

    #[test]
    fn server_rejects_secret_key_material() {
        let cfg = desk_clear_config();
        let keys = KeyMaterial::generate(&cfg.params, cfg.backend, true).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let weights = LayerWeights::random(cfg.model.dim, cfg.model.ffn_dim, &mut rng);
        // Clear-backend key material has no secret; fabricate a CKKS one.
        let ckks_params = crate::params::HeParams::tiny().with_seed(3);
        let ckks_keys = KeyMaterial::generate(&ckks_params, BackendKind::Ckks, true).unwrap();
        assert!(Server::new(
            Arc::new(ckks_keys),
            cfg.clone(),
            weights.clone(),
            Kernel::Pcmm
        )
        .is_err());
        assert!(Server::new(Arc::new(keys.evaluation_only()), cfg, weights, Kernel::Pcmm).is_ok());
    }

    #[test]
    fn error_frames_reach_the_client() {
        let cfg = desk_clear_config();
        let keys = Arc::new(KeyMaterial::generate(&cfg.params, cfg.backend, true).unwrap());
        let client_engine = Engine::new(keys.clone()).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let weights = LayerWeights::random(cfg.model.dim, cfg.model.ffn_dim, &mut rng);
        let server = Server::new(
            Arc::new(keys.evaluation_only()),
            cfg.clone(),
            weights,
            Kernel::Pcmm,
        )
        .unwrap();

        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let handle = std::thread::spawn(move || {
            let _ = server.serve_one(&listener);
        });

        // A config the server does not agree with: the digest check fails
        // server-side and an error frame comes back over the wire.
        let mut mismatched = cfg.clone();
        mismatched.seed ^= 7;
        let pm = pack_columns(&client_engine, &vec![0.0; 16], 4, 4).unwrap();
        let err = request(addr, &mismatched, client_engine.key_id(), &pm).unwrap_err();
        handle.join().unwrap();
        let msg = err.to_string();
        assert!(msg.contains("server error 500"), "{msg}");
        assert!(msg.contains("digest"), "{msg}");
    }

    #[test]
    fn mismatched_digest_is_refused() {
        let cfg = desk_clear_config();
        let keys = Arc::new(KeyMaterial::generate(&cfg.params, cfg.backend, true).unwrap());
        let client_engine = Engine::new(keys.clone()).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let weights = LayerWeights::random(cfg.model.dim, cfg.model.ffn_dim, &mut rng);
        let server = Server::new(
            Arc::new(keys.evaluation_only()),
            cfg.clone(),
            weights,
            Kernel::Pcmm,
        )
        .unwrap();

        let pm = pack_columns(&client_engine, &vec![0.0; 16], 4, 4).unwrap();
        let mut other = cfg.clone();
        other.seed ^= 1;
        let body = encode_request(&other, client_engine.key_id(), &pm);
        let err = server.handle(&body).unwrap_err();
        assert!(err.to_string().contains("digest"));
    }
}
