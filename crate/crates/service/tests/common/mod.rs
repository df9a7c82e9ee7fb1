#![allow(dead_code)]

use cellscope_core::data::cells::render_cell;
use cellscope_core::data::image::{encode_png, rgb_to_tensor};
use cellscope_core::model::{default_classifier, Classifier, Scale};
use cellscope_core::pointcloud::GeneratorSpec;
use cellscope_service::{Generator, LoadedModels};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::TcpStream;

pub fn cell_png(seed: u64, parasitized: bool) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    encode_png(&rgb_to_tensor(&render_cell(&mut rng, parasitized))).unwrap()
}

pub fn classifier(seed: u64) -> Classifier {
    let spec = default_classifier(Scale::Mini).unwrap();
    let w = spec.network.init_weights::<f32>(seed).unwrap();
    Classifier::new(spec, w, "test-v1").unwrap()
}

pub fn small_generator(seed: u64) -> Generator {
    let spec = GeneratorSpec::new(2, (8, 8), 6, 3.0, 8.0).unwrap();
    let weights = spec.init_weights(seed).unwrap();
    Generator { spec, weights }
}

pub fn models() -> LoadedModels {
    LoadedModels::new(classifier(5), Some(small_generator(6))).unwrap()
}

pub struct RawResponse {
    pub status: u16,
    pub headers: Vec<(String, String)>,
    pub body: Vec<u8>,
}

impl RawResponse {
    pub fn header(&self, name: &str) -> Option<&str> {
        self.headers
            .iter()
            .find(|(k, _)| k.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.as_str())
    }
}

/// One HTTP/1.1 request over a fresh connection, read until close.
pub async fn http(addr: std::net::SocketAddr, method: &str, path: &str, content_type: &str, body: &[u8]) -> RawResponse {
    let mut s = TcpStream::connect(addr).await.unwrap();
    let head = format!(
        "{method} {path} HTTP/1.1\r\nHost: {addr}\r\nContent-Type: {content_type}\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
        body.len()
    );
    s.write_all(head.as_bytes()).await.unwrap();
    s.write_all(body).await.unwrap();
    let mut raw = Vec::new();
    s.read_to_end(&mut raw).await.unwrap();
    let split = raw.windows(4).position(|w| w == b"\r\n\r\n").expect("response head");
    let head = String::from_utf8_lossy(&raw[..split]).to_string();
    let mut lines = head.split("\r\n");
    let status = lines.next().unwrap().split(' ').nth(1).unwrap().parse().unwrap();
    let headers = lines
        .filter_map(|l| l.split_once(':'))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect();
    RawResponse {
        status,
        headers,
        body: raw[split + 4..].to_vec(),
    }
}
