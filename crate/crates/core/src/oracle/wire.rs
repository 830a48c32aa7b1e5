//! Service mode: length-prefixed JSON over TCP.
//!
//! Every frame is a 4-byte big-endian payload length followed by one JSON
//! object. Failures are answered with `{"error": "..."}` and the connection
//! stays open.

use std::io::{Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use ndarray::Array4;
use serde::{Deserialize, Serialize};

use super::session::{OracleClient, OracleService, SessionId, SubmitOutcome};
use crate::data::ImageTensor;
use crate::error::{Error, Result};

/// Upper bound on a single frame payload.
pub const MAX_FRAME_BYTES: usize = 256 << 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
pub enum Request {
    Open,
    Submit { session: SessionId, shape: [usize; 4], data: String },
    Finalize { session: SessionId },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Response {
    Session { session: SessionId },
    Accepted { accepted: usize },
    Rejected { rejected: Vec<String> },
    Labels { labels: Vec<u32> },
    Error { error: String },
}

impl Request {
    pub fn submit(session: SessionId, images: &ImageTensor) -> Self {
        let [w, h, c] = images.image_shape();
        let mut bytes = Vec::with_capacity(4 * images.len() * w * h * c);
        for v in images.view().iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        Request::Submit { session, shape: [images.len(), w, h, c], data: STANDARD.encode(bytes) }
    }
}

fn decode_images(shape: [usize; 4], data: &str) -> Result<ImageTensor> {
    let bytes = STANDARD.decode(data).map_err(|e| Error::Protocol(format!("bad base64 payload: {e}")))?;
    let count = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
    if count.and_then(|c| c.checked_mul(4)) != Some(bytes.len()) {
        return Err(Error::Protocol(format!("shape {shape:?} does not match {} payload bytes", bytes.len())));
    }
    let values: Vec<f32> = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
    let array = Array4::from_shape_vec((shape[0], shape[1], shape[2], shape[3]), values)
        .map_err(|e| Error::Shape(e.to_string()))?;
    ImageTensor::new(array)
}

pub(crate) fn write_frame(stream: &mut impl Write, payload: &[u8]) -> Result<()> {
    if payload.len() > MAX_FRAME_BYTES {
        return Err(Error::Protocol(format!("frame of {} bytes exceeds limit", payload.len())));
    }
    stream.write_all(&(payload.len() as u32).to_be_bytes())?;
    stream.write_all(payload)?;
    stream.flush()?;
    Ok(())
}

/// `Ok(None)` on a clean end of stream before a frame starts.
pub(crate) fn read_frame(stream: &mut impl Read) -> Result<Option<Vec<u8>>> {
    let mut len = [0u8; 4];
    match stream.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let len = u32::from_be_bytes(len) as usize;
    if len > MAX_FRAME_BYTES {
        return Err(Error::Protocol(format!("frame of {len} bytes exceeds limit")));
    }
    let mut payload = vec![0u8; len];
    stream.read_exact(&mut payload)?;
    Ok(Some(payload))
}

/// Applies one request to the service. Never fails: errors become [`Response::Error`].
pub fn handle_request(service: &OracleService, request: Request) -> Response {
    let result = match request {
        Request::Open => Ok(Response::Session { session: service.open_session() }),
        Request::Submit { session, shape, data } => decode_images(shape, &data)
            .and_then(|images| service.submit_batch(session, images))
            .map(|outcome| match outcome {
                SubmitOutcome::Accepted(n) => Response::Accepted { accepted: n },
                SubmitOutcome::Rejected(ids) => Response::Rejected { rejected: ids },
            }),
        Request::Finalize { session } => service.finalize_session(session).map(|labels| Response::Labels { labels }),
    };
    result.unwrap_or_else(|e| Response::Error { error: e.to_string() })
}

fn handle_connection(service: &OracleService, mut stream: TcpStream) -> Result<()> {
    while let Some(frame) = read_frame(&mut stream)? {
        let response = match serde_json::from_slice::<Request>(&frame) {
            Ok(request) => handle_request(service, request),
            Err(e) => Response::Error { error: format!("malformed request: {e}") },
        };
        write_frame(&mut stream, &serde_json::to_vec(&response)?)?;
    }
    Ok(())
}

/// A bound listener serving one thread per connection.
#[derive(Debug)]
pub struct OracleServer {
    listener: TcpListener,
    service: Arc<OracleService>,
}

impl OracleServer {
    pub fn bind(addr: impl ToSocketAddrs, service: Arc<OracleService>) -> Result<Self> {
        Ok(Self { listener: TcpListener::bind(addr)?, service })
    }

    pub fn local_addr(&self) -> Result<SocketAddr> {
        Ok(self.listener.local_addr()?)
    }

    pub fn service(&self) -> &Arc<OracleService> {
        &self.service
    }

    /// Accepts connections until the listener fails.
    pub fn run(self) -> Result<()> {
        for stream in self.listener.incoming() {
            let stream = stream?;
            let service = Arc::clone(&self.service);
            thread::spawn(move || {
                let peer = stream.peer_addr().ok();
                if let Err(e) = handle_connection(&service, stream) {
                    log::warn!("connection {peer:?} closed: {e}");
                }
            });
        }
        Ok(())
    }

    pub fn spawn(self) -> JoinHandle<Result<()>> {
        thread::spawn(move || self.run())
    }
}

/// Binds `addr` and serves forever.
pub fn serve(addr: impl ToSocketAddrs, service: Arc<OracleService>) -> Result<()> {
    let server = OracleServer::bind(addr, service)?;
    log::info!("oracle listening on {}", server.local_addr()?);
    server.run()
}

/// Remote oracle over one persistent connection.
#[derive(Debug)]
pub struct TcpOracleClient {
    stream: Mutex<TcpStream>,
}

impl TcpOracleClient {
    /// Accepts `host:port` or `tcp://host:port`.
    pub fn connect(addr: &str) -> Result<Self> {
        let addr = addr.strip_prefix("tcp://").unwrap_or(addr);
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        Ok(Self { stream: Mutex::new(stream) })
    }

    pub fn call(&self, request: &Request) -> Result<Response> {
        let mut stream = self.stream.lock().expect("connection poisoned");
        write_frame(&mut *stream, &serde_json::to_vec(request)?)?;
        let frame = read_frame(&mut *stream)?.ok_or_else(|| Error::Protocol("server closed the connection".into()))?;
        match serde_json::from_slice(&frame)? {
            Response::Error { error } => Err(Error::Protocol(error)),
            other => Ok(other),
        }
    }
}

fn unexpected(response: Response) -> Error {
    Error::Protocol(format!("unexpected response {response:?}"))
}

impl OracleClient for TcpOracleClient {
    fn open(&self) -> Result<SessionId> {
        match self.call(&Request::Open)? {
            Response::Session { session } => Ok(session),
            other => Err(unexpected(other)),
        }
    }

    fn submit(&self, session: SessionId, images: &ImageTensor) -> Result<SubmitOutcome> {
        match self.call(&Request::submit(session, images))? {
            Response::Accepted { accepted } => Ok(SubmitOutcome::Accepted(accepted)),
            Response::Rejected { rejected } => Ok(SubmitOutcome::Rejected(rejected)),
            other => Err(unexpected(other)),
        }
    }

    fn finalize(&self, session: SessionId) -> Result<Vec<u32>> {
        match self.call(&Request::Finalize { session })? {
            Response::Labels { labels } => Ok(labels),
            other => Err(unexpected(other)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn request_json_matches_documented_shape() {
        assert_eq!(serde_json::to_string(&Request::Open).unwrap(), r#"{"op":"open"}"#);
        assert_eq!(
            serde_json::to_string(&Request::Finalize { session: SessionId(3) }).unwrap(),
            r#"{"op":"finalize","session":3}"#
        );
        let parsed: Request =
            serde_json::from_str(r#"{"op":"submit","session":1,"shape":[1,1,1,1],"data":"AACAPw=="}"#).unwrap();
        let Request::Submit { shape, data, .. } = parsed else { panic!("not a submit") };
        assert_eq!(decode_images(shape, &data).unwrap().view()[[0, 0, 0, 0]], 1.0);
    }

    #[test]
    fn responses_parse_back() {
        for r in [
            Response::Session { session: SessionId(1) },
            Response::Accepted { accepted: 4 },
            Response::Rejected { rejected: vec!["ab".into()] },
            Response::Labels { labels: vec![0, 2, 1] },
            Response::Error { error: "nope".into() },
        ] {
            let text = serde_json::to_string(&r).unwrap();
            assert_eq!(serde_json::from_str::<Response>(&text).unwrap(), r);
        }
    }

    #[test]
    fn submit_round_trips_bit_exactly() {
        let x =
            ImageTensor::new(Array4::from_shape_fn((2, 3, 2, 1), |(i, p, q, _)| (i + p * 2 + q) as f32 / 7.0)).unwrap();
        let Request::Submit { shape, data, .. } = Request::submit(SessionId(0), &x) else { unreachable!() };
        assert_eq!(decode_images(shape, &data).unwrap(), x);
        assert!(decode_images([2, 3, 2, 2], &data).is_err());
    }

    #[test]
    fn framing_round_trip_and_limits() {
        let mut buf = Vec::new();
        write_frame(&mut buf, b"{}").unwrap();
        assert_eq!(&buf[..4], &[0, 0, 0, 2]);
        let mut cursor = std::io::Cursor::new(buf);
        assert_eq!(read_frame(&mut cursor).unwrap().unwrap(), b"{}");
        assert!(read_frame(&mut cursor).unwrap().is_none());
        let mut huge = std::io::Cursor::new(u32::MAX.to_be_bytes().to_vec());
        assert!(matches!(read_frame(&mut huge), Err(Error::Protocol(_))));
    }
}
