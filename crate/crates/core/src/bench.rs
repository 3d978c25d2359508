//! Encoding throughput and train-and-evaluate wall time.
//!
//! Every measurement is the median of at least three timed repetitions
//! taken after one untimed warm-up, on the monotonic clock.

use std::collections::HashMap;
use std::fs;
use std::ops::Range;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::embeddings::EmbeddingStore;
use crate::error::{Error, Result};
use crate::experiments::{prepare, ExperimentSpec};

pub const DEFAULT_BATCH_SIZE: usize = 15;
pub const MIN_REPETITIONS: usize = 3;

/// Published CPU encoding throughputs (sentences per second), shown next to
/// local measurements for context only.
pub const REFERENCE_CPU_THROUGHPUT: [(&str, f64); 3] = [("convert", 58.3), ("use", 53.5), ("bert-large", 2.4)];

/// Published CPU train-and-evaluate times in seconds for the 10-shot
/// banking setting, end to end including encoding.
pub const REFERENCE_CPU_TRAIN_SECONDS: [(&str, f64); 2] = [("use", 65.0), ("convert", 73.0)];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub name: String,
    pub hardware: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    pub repetitions: usize,
    pub median: f64,
    pub raw: Vec<f64>,
    /// `sentences/s` or `s`.
    pub unit: String,
}

impl BenchResult {
    fn new(name: String, hardware: &str, batch_size: Option<usize>, raw: Vec<f64>, unit: &str) -> Result<Self> {
        if hardware.trim().is_empty() {
            return Err(Error::Bench("a hardware description is required".into()));
        }
        if let Some(bad) = raw.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
            return Err(Error::Bench(format!("non-positive measurement {bad}")));
        }
        Ok(Self {
            name,
            hardware: hardware.to_string(),
            batch_size,
            repetitions: raw.len(),
            median: median(&raw),
            raw,
            unit: unit.to_string(),
        })
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => v[n / 2],
        _ => (v[n / 2 - 1] + v[n / 2]) / 2.0,
    }
}

/// Consecutive index ranges of at most `size` items; the last may be short.
pub fn batches(len: usize, size: usize) -> Vec<Range<usize>> {
    (0..len).step_by(size.max(1)).map(|s| s..(s + size).min(len)).collect()
}

/// CPU model and logical core count, from `/proc/cpuinfo` where available.
pub fn detect_hardware() -> String {
    let cores = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let model = fs::read_to_string("/proc/cpuinfo").ok().and_then(|info| {
        info.lines()
            .find(|l| l.starts_with("model name"))
            .and_then(|l| l.split_once(':'))
            .map(|(_, v)| v.trim().to_string())
    });
    match model {
        Some(m) => format!("{m}, {cores} logical cores"),
        None => format!("{} cpu, {cores} logical cores", std::env::consts::ARCH),
    }
}

/// Anything that turns sentences into vectors.
pub trait EmbeddingProvider {
    fn name(&self) -> String;
    fn encode(&mut self, texts: &[String]) -> Result<Vec<Vec<f32>>>;
}

/// Serves vectors from a precomputed store by exact text match.
pub struct StoreProvider {
    store: EmbeddingStore,
    rows: HashMap<String, usize>,
}

impl StoreProvider {
    pub fn new(dataset: &Dataset, store: EmbeddingStore) -> Result<Self> {
        store.check_against(dataset)?;
        let mut rows = HashMap::with_capacity(dataset.len());
        for row in dataset.rows() {
            rows.entry(row.text.clone()).or_insert(row.index);
        }
        Ok(Self { store, rows })
    }
}

impl EmbeddingProvider for StoreProvider {
    fn name(&self) -> String {
        format!("store:{}", self.store.encoder_tag())
    }

    fn encode(&mut self, texts: &[String]) -> Result<Vec<Vec<f32>>> {
        texts
            .iter()
            .map(|t| {
                let row = self
                    .rows
                    .get(t)
                    .ok_or_else(|| Error::Provider(format!("text not in store: {t:?}")))?;
                Ok(self.store.lookup(*row)?.to_vec())
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub encoder: String,
    pub dim: usize,
}

#[derive(Serialize)]
struct EncodeRequest<'a> {
    texts: &'a [String],
}

#[derive(Deserialize)]
struct EncodeResponse {
    dim: usize,
    embeddings: Vec<Vec<f32>>,
}

/// Client for an encoding service exposing `POST /encode` and `GET /health`.
pub struct HttpProvider {
    base: String,
    agent: ureq::Agent,
}

impl HttpProvider {
    pub fn new(base_url: &str, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            base: base_url.trim_end_matches('/').to_string(),
            agent,
        }
    }

    fn check_status(resp: &mut ureq::http::Response<ureq::Body>, what: &str) -> Result<()> {
        let status = resp.status();
        if status.is_success() {
            return Ok(());
        }
        let body = resp.body_mut().read_to_string().unwrap_or_default();
        Err(Error::Provider(format!("{what}: HTTP {status}: {}", body.trim())))
    }

    pub fn health(&self) -> Result<Health> {
        let mut resp = self
            .agent
            .get(&format!("{}/health", self.base))
            .call()
            .map_err(|e| Error::Provider(format!("health: {e}")))?;
        Self::check_status(&mut resp, "health")?;
        let health: Health = resp
            .body_mut()
            .read_json()
            .map_err(|e| Error::Provider(format!("health: {e}")))?;
        if health.status != "ok" {
            return Err(Error::Provider(format!("health: status `{}`", health.status)));
        }
        Ok(health)
    }
}

impl EmbeddingProvider for HttpProvider {
    fn name(&self) -> String {
        format!("http:{}", self.base)
    }

    fn encode(&mut self, texts: &[String]) -> Result<Vec<Vec<f32>>> {
        let mut resp = self
            .agent
            .post(&format!("{}/encode", self.base))
            .send_json(EncodeRequest { texts })
            .map_err(|e| Error::Provider(format!("encode: {e}")))?;
        Self::check_status(&mut resp, "encode")?;
        let body: EncodeResponse = resp
            .body_mut()
            .with_config()
            .limit(u64::MAX)
            .read_json()
            .map_err(|e| Error::Provider(format!("encode: {e}")))?;
        if body.embeddings.len() != texts.len() {
            return Err(Error::Provider(format!(
                "encode: sent {} texts, got {} vectors",
                texts.len(),
                body.embeddings.len()
            )));
        }
        for (i, v) in body.embeddings.iter().enumerate() {
            if v.len() != body.dim {
                return Err(Error::Provider(format!(
                    "encode: vector {i} has {} values, declared dim {}",
                    v.len(),
                    body.dim
                )));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Provider(format!("encode: vector {i} is not finite")));
            }
        }
        Ok(body.embeddings)
    }
}

fn encode_all(provider: &mut dyn EmbeddingProvider, sentences: &[String], batch_size: usize) -> Result<()> {
    for range in batches(sentences.len(), batch_size) {
        let out = provider.encode(&sentences[range.clone()])?;
        if out.len() != range.len() {
            return Err(Error::Provider(format!(
                "{} vectors for a batch of {}",
                out.len(),
                range.len()
            )));
        }
    }
    Ok(())
}

/// Median sentences per second encoding `sentences` in batches of
/// `batch_size`; a trailing short batch is included.
pub fn bench_encoding(
    provider: &mut dyn EmbeddingProvider,
    sentences: &[String],
    batch_size: usize,
    repetitions: usize,
    hardware: &str,
) -> Result<BenchResult> {
    if sentences.is_empty() {
        return Err(Error::Bench("no sentences to encode".into()));
    }
    if batch_size == 0 {
        return Err(Error::Bench("batch size must be positive".into()));
    }
    check_repetitions(repetitions)?;
    encode_all(provider, sentences, batch_size)?;
    let mut raw = Vec::with_capacity(repetitions);
    for _ in 0..repetitions {
        let start = Instant::now();
        encode_all(provider, sentences, batch_size)?;
        let secs = start.elapsed().as_secs_f64().max(1e-9);
        raw.push(sentences.len() as f64 / secs);
    }
    BenchResult::new(
        format!("encode {}", provider.name()),
        hardware,
        Some(batch_size),
        raw,
        "sentences/s",
    )
}

fn check_repetitions(repetitions: usize) -> Result<()> {
    if repetitions < MIN_REPETITIONS {
        return Err(Error::Bench(format!(
            "at least {MIN_REPETITIONS} repetitions are required, got {repetitions}"
        )));
    }
    Ok(())
}

/// Median seconds to sample, train and evaluate one model for the first
/// seed of `spec`. Loading data files is timed only with `include_loading`.
pub fn bench_training(
    spec: &ExperimentSpec,
    repetitions: usize,
    include_loading: bool,
    hardware: &str,
) -> Result<BenchResult> {
    check_repetitions(repetitions)?;
    spec.validate()?;
    let seed = spec.seeds[0];
    let preloaded = if include_loading { None } else { Some(prepare(spec)?) };
    let mut raw = Vec::with_capacity(repetitions);
    for rep in 0..=repetitions {
        let start = Instant::now();
        let fresh;
        let data = match &preloaded {
            Some(d) => d,
            None => {
                fresh = prepare(spec)?;
                &fresh
            }
        };
        data.run_once(spec.regime, &spec.config, seed, None)?;
        let secs = start.elapsed().as_secs_f64().max(1e-9);
        if rep > 0 {
            raw.push(secs);
        }
    }
    let scope = if include_loading { "load+train+eval" } else { "train+eval" };
    BenchResult::new(
        format!("{scope} {}/{} {}", spec.dataset, spec.regime, spec.config.label()),
        hardware,
        None,
        raw,
        "s",
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::{Arc, Mutex};

    #[test]
    fn medians() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn batching_keeps_the_tail() {
        let b = batches(1000, 15);
        assert_eq!(b.len(), 67);
        assert!(b[..66].iter().all(|r| r.len() == 15));
        assert_eq!(b[66], 990..1000);
        assert_eq!(batches(30, 15).len(), 2);
    }

    struct Counting {
        sizes: Vec<usize>,
    }

    impl EmbeddingProvider for Counting {
        fn name(&self) -> String {
            "counting".into()
        }
        fn encode(&mut self, texts: &[String]) -> Result<Vec<Vec<f32>>> {
            self.sizes.push(texts.len());
            Ok(texts.iter().map(|_| vec![0.0; 4]).collect())
        }
    }

    fn sentences(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("sentence {i}")).collect()
    }

    #[test]
    fn encoding_bench_batches_and_warms_up() {
        let mut p = Counting { sizes: Vec::new() };
        let r = bench_encoding(&mut p, &sentences(45), 15, 3, "test host").unwrap();
        assert_eq!(p.sizes, vec![15; 12]);
        assert_eq!(r.repetitions, 3);
        assert_eq!(r.batch_size, Some(15));
        assert!(r.median > 0.0);
    }

    #[test]
    fn store_provider_lookup_bench() {
        let n = 1000;
        let ds = Dataset::from_pairs("d", sentences(n).into_iter().map(|s| (s, "x".to_string()))).unwrap();
        let values = (0..n * 8).map(|i| i as f32).collect();
        let store = EmbeddingStore::new(ds.digest(), 8, "blob", values).unwrap();
        let mut p = StoreProvider::new(&ds, store).unwrap();
        let got = p.encode(&["sentence 3".to_string()]).unwrap();
        assert_eq!(got[0], (24..32).map(|i| i as f32).collect::<Vec<_>>());
        assert!(matches!(p.encode(&["nope".to_string()]), Err(Error::Provider(_))));
        let r = bench_encoding(&mut p, &sentences(n), 15, 3, "test host").unwrap();
        assert!(r.raw.iter().all(|v| *v > 0.0));
    }

    #[test]
    fn rejects_bad_settings() {
        let mut p = Counting { sizes: Vec::new() };
        assert!(bench_encoding(&mut p, &sentences(5), 15, 2, "h").is_err());
        assert!(bench_encoding(&mut p, &sentences(5), 15, 3, "  ").is_err());
        assert!(bench_encoding(&mut p, &[], 15, 3, "h").is_err());
        assert!(bench_encoding(&mut p, &sentences(5), 0, 3, "h").is_err());
    }

    #[test]
    fn hardware_is_described() {
        assert!(!detect_hardware().is_empty());
    }

    type Handler = dyn Fn(&str, &str, &str) -> (u16, String) + Send + Sync;

    /// Minimal HTTP/1.1 server answering each connection once.
    fn serve(handler: Arc<Handler>) -> (String, Arc<Mutex<Vec<String>>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let seen = Arc::new(Mutex::new(Vec::new()));
        let log = seen.clone();
        std::thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(mut stream) = stream else { break };
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut request_line = String::new();
                reader.read_line(&mut request_line).unwrap();
                let mut len = 0;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if line.trim().is_empty() {
                        break;
                    }
                    if let Some((k, v)) = line.split_once(':') {
                        if k.eq_ignore_ascii_case("content-length") {
                            len = v.trim().parse().unwrap();
                        }
                    }
                }
                let mut body = vec![0; len];
                reader.read_exact(&mut body).unwrap();
                let body = String::from_utf8(body).unwrap();
                let mut parts = request_line.split_whitespace();
                let (method, path) = (parts.next().unwrap_or(""), parts.next().unwrap_or(""));
                log.lock().unwrap().push(format!("{method} {path} {body}"));
                let (status, reply) = handler(method, path, &body);
                let _ = write!(
                    stream,
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{reply}",
                    reply.len()
                );
            }
        });
        (format!("http://{addr}"), seen)
    }

    fn encoder(method: &str, path: &str, body: &str) -> (u16, String) {
        match (method, path) {
            ("GET", "/health") => (200, r#"{"status":"ok","encoder":"fake","dim":3}"#.into()),
            ("POST", "/encode") => {
                let req: serde_json::Value = match serde_json::from_str(body) {
                    Ok(v) => v,
                    Err(_) => return (400, r#"{"error":"bad json"}"#.into()),
                };
                let texts = req["texts"].as_array().unwrap();
                if texts.len() > 15 {
                    return (413, r#"{"error":"batch too large"}"#.into());
                }
                let rows: Vec<Vec<f32>> = texts
                    .iter()
                    .map(|t| {
                        let n = t.as_str().unwrap().len() as f32;
                        vec![n, 1.0, -n]
                    })
                    .collect();
                (200, serde_json::json!({"dim": 3, "embeddings": rows}).to_string())
            }
            _ => (404, "{}".into()),
        }
    }

    #[test]
    fn http_provider_round_trip() {
        let (url, seen) = serve(Arc::new(encoder));
        let mut p = HttpProvider::new(&url, Duration::from_secs(5));
        let h = p.health().unwrap();
        assert_eq!(h.encoder, "fake");
        assert_eq!(h.dim, 3);
        let out = p.encode(&["ab".to_string(), "hello".to_string()]).unwrap();
        assert_eq!(out, vec![vec![2.0, 1.0, -2.0], vec![5.0, 1.0, -5.0]]);
        let log = seen.lock().unwrap();
        let body = log.iter().find_map(|l| l.strip_prefix("POST /encode ")).unwrap();
        let body: serde_json::Value = serde_json::from_str(body).unwrap();
        assert_eq!(body, serde_json::json!({"texts": ["ab", "hello"]}));
    }

    #[test]
    fn http_provider_bench_uses_batches_of_fifteen() {
        let (url, seen) = serve(Arc::new(encoder));
        let mut p = HttpProvider::new(&url, Duration::from_secs(5));
        let r = bench_encoding(&mut p, &sentences(31), DEFAULT_BATCH_SIZE, 3, "test host").unwrap();
        assert!(r.median > 0.0);
        // Batches of 15, 15 and 1, for one warm-up pass and three timed ones.
        assert_eq!(seen.lock().unwrap().len(), 3 * 4);
    }

    #[test]
    fn http_errors_surface() {
        let (url, _) = serve(Arc::new(encoder));
        let mut p = HttpProvider::new(&url, Duration::from_secs(5));
        let err = p.encode(&sentences(16)).unwrap_err();
        assert!(err.to_string().contains("413"), "{err}");

        let (url, _) = serve(Arc::new(|_: &str, _: &str, _: &str| {
            (200, r#"{"dim":2,"embeddings":[[1.0]]}"#.to_string())
        }));
        let mut p = HttpProvider::new(&url, Duration::from_secs(5));
        assert!(matches!(p.encode(&sentences(1)), Err(Error::Provider(_))));

        let (url, _) = serve(Arc::new(|_: &str, _: &str, _: &str| {
            (200, r#"{"status":"loading","encoder":"x","dim":1}"#.to_string())
        }));
        assert!(HttpProvider::new(&url, Duration::from_secs(5)).health().is_err());
    }

    #[test]
    fn unreachable_service_is_a_provider_error() {
        let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
        let p = HttpProvider::new(&format!("http://127.0.0.1:{port}"), Duration::from_secs(2));
        assert!(matches!(p.health(), Err(Error::Provider(_))));
    }

    #[test]
    fn training_bench_times_fewer_iterations_faster() {
        use crate::experiments::Regime;
        use crate::mlp::MlpConfig;
        use crate::synthetic::{write_fixture, BlobSpec};
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path(), &BlobSpec::new(10, 64, 12), 1, "blob").unwrap();
        let mk = |iterations| {
            ExperimentSpec::from_dataset_dir(
                dir.path(),
                &["blob.embs".into()],
                Regime::K10,
                MlpConfig {
                    hidden_dim: 64,
                    iterations,
                    ..MlpConfig::pivot()
                },
                vec![1],
            )
            .unwrap()
        };
        let short = bench_training(&mk(1), 3, false, "test host").unwrap();
        let long = bench_training(&mk(200), 3, false, "test host").unwrap();
        assert!(short.median < long.median, "{} vs {}", short.median, long.median);
        assert_eq!(long.unit, "s");
        assert!(bench_training(&mk(1), 3, true, "test host").is_ok());
    }
}
