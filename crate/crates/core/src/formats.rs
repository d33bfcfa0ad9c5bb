//! File formats: clicks-v1, jhist-v1, jdist-v1, dmat-v1, igrid-v1, plus run manifests.
//!
//! Text-headed formats start with one JSON line, followed by the payload.
//! All writers go through a temporary file in the target directory and a rename.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::detection::{DetectionMatrix, DetectorSpec, Method};
use crate::error::{Error, Result};
use crate::ingest::{GroupingPolicy, JointHistogram};
use crate::model::{JointDist, Kind};
use crate::quasidist::IntensityGrid;
use crate::simulate::{ClickStream, StreamMeta};

pub const CLICKS_MAGIC: &[u8; 8] = b"TWBCLICK";
pub const CLICKS_VERSION: u32 = 1;

fn fmt_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Format(msg.into()))
}

/// Writes `bytes` to `path` via temp file + rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(&dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    with_suffix(path, ".json")
}

pub fn manifest_path(path: &Path) -> PathBuf {
    with_suffix(path, ".manifest.json")
}

fn f64_bytes(v: &[f64]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

fn read_f64s(bytes: &[u8], n: usize) -> Result<Vec<f64>> {
    if bytes.len() != 8 * n {
        return fmt_err(format!("payload has {} bytes, expected {}", bytes.len(), 8 * n));
    }
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

fn split_header(bytes: &[u8]) -> Result<(Value, &[u8])> {
    let Some(pos) = bytes.iter().position(|&b| b == b'\n') else {
        return fmt_err("missing header line");
    };
    let header: Value = serde_json::from_slice(&bytes[..pos])?;
    Ok((header, &bytes[pos + 1..]))
}

fn check_format(h: &Value, name: &str) -> Result<()> {
    match h.get("format").and_then(Value::as_str) {
        Some(f) if f == name => Ok(()),
        other => fmt_err(format!("expected format {name}, found {other:?}")),
    }
}

fn header_line<T: Serialize>(h: &T) -> Result<Vec<u8>> {
    let mut v = serde_json::to_vec(h)?;
    v.push(b'\n');
    Ok(v)
}

// ---------- clicks-v1

pub fn encode_clicks(stream: &ClickStream) -> Vec<u8> {
    let mut out = Vec::with_capacity(24 + stream.len());
    out.extend_from_slice(CLICKS_MAGIC);
    out.extend_from_slice(&CLICKS_VERSION.to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    out.extend_from_slice(&(stream.len() as u64).to_le_bytes());
    out.extend_from_slice(&stream.windows);
    out
}

pub fn decode_clicks(bytes: &[u8]) -> Result<Vec<u8>> {
    if bytes.len() < 24 || &bytes[..8] != CLICKS_MAGIC {
        return fmt_err("not a clicks-v1 file");
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CLICKS_VERSION {
        return fmt_err(format!("unsupported clicks version {version}"));
    }
    let n = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
    let body = &bytes[24..];
    if body.len() != n {
        return fmt_err(format!("declared {n} windows, found {}", body.len()));
    }
    if let Some(b) = body.iter().find(|&&b| b > 3) {
        return fmt_err(format!("invalid window byte {b:#x}"));
    }
    Ok(body.to_vec())
}

pub fn write_clicks(path: &Path, stream: &ClickStream) -> Result<()> {
    write_atomic(path, &encode_clicks(stream))?;
    if let Some(m) = &stream.meta {
        write_atomic(&sidecar_path(path), &serde_json::to_vec_pretty(m)?)?;
    }
    Ok(())
}

pub fn read_clicks(path: &Path) -> Result<ClickStream> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let windows = decode_clicks(&bytes)?;
    let side = sidecar_path(path);
    let meta: Option<StreamMeta> = if side.exists() { Some(serde_json::from_slice(&fs::read(side)?)?) } else { None };
    Ok(ClickStream { windows, meta })
}

// ---------- jhist-v1

#[derive(Serialize, Deserialize)]
struct HistHeader {
    format: String,
    side: usize,
    n_groups: u64,
    policy: GroupingPolicy,
}

pub fn encode_histogram(h: &JointHistogram) -> Result<Vec<u8>> {
    let mut out = header_line(&HistHeader {
        format: "jhist-v1".into(),
        side: h.side(),
        n_groups: h.n_groups,
        policy: h.policy,
    })?;
    for row in h.counts().chunks(h.side()) {
        let line: Vec<String> = row.iter().map(u64::to_string).collect();
        out.extend_from_slice(line.join(",").as_bytes());
        out.push(b'\n');
    }
    Ok(out)
}

pub fn decode_histogram(bytes: &[u8]) -> Result<JointHistogram> {
    let (hv, body) = split_header(bytes)?;
    check_format(&hv, "jhist-v1")?;
    let hd: HistHeader = serde_json::from_value(hv)?;
    let mut counts = Vec::with_capacity(hd.side * hd.side);
    for line in BufReader::new(body).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        for f in line.split(',') {
            counts.push(f.trim().parse::<u64>().map_err(|e| Error::Format(format!("bad count {f:?}: {e}")))?);
        }
    }
    if hd.side != hd.policy.n + 1 || counts.len() != hd.side * hd.side {
        return fmt_err("histogram payload does not match header");
    }
    let h = JointHistogram::from_counts(hd.policy, counts)?;
    if h.n_groups != hd.n_groups {
        return fmt_err("histogram total does not match header");
    }
    Ok(h)
}

pub fn write_histogram(path: &Path, h: &JointHistogram) -> Result<()> {
    write_atomic(path, &encode_histogram(h)?)
}

pub fn read_histogram(path: &Path) -> Result<JointHistogram> {
    decode_histogram(&fs::read(path)?)
}

// ---------- jdist-v1

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Encoding {
    #[default]
    Csv,
    Binary,
}

#[derive(Serialize, Deserialize)]
struct DistHeader {
    format: String,
    rows: usize,
    cols: usize,
    kind: Kind,
    tail_mass: f64,
    encoding: Encoding,
}

pub fn encode_dist(d: &JointDist, enc: Encoding) -> Result<Vec<u8>> {
    let mut out = header_line(&DistHeader {
        format: "jdist-v1".into(),
        rows: d.rows(),
        cols: d.cols(),
        kind: d.kind,
        tail_mass: d.tail_mass,
        encoding: enc,
    })?;
    match enc {
        Encoding::Binary => out.extend(f64_bytes(d.table())),
        Encoding::Csv => {
            for a in 0..d.rows() {
                // Debug formatting of f64 is the shortest round-tripping form
                let line: Vec<String> = d.row(a).iter().map(|x| format!("{x:?}")).collect();
                out.extend_from_slice(line.join(",").as_bytes());
                out.push(b'\n');
            }
        }
    }
    Ok(out)
}

pub fn decode_dist(bytes: &[u8]) -> Result<JointDist> {
    let (hv, body) = split_header(bytes)?;
    check_format(&hv, "jdist-v1")?;
    let hd: DistHeader = serde_json::from_value(hv)?;
    let n = hd.rows * hd.cols;
    let table = match hd.encoding {
        Encoding::Binary => read_f64s(body, n)?,
        Encoding::Csv => {
            let text = std::str::from_utf8(body).map_err(|e| Error::Format(e.to_string()))?;
            let v: Vec<f64> = text
                .lines()
                .filter(|l| !l.trim().is_empty())
                .flat_map(|l| l.split(','))
                .map(|f| f.trim().parse::<f64>().map_err(|e| Error::Format(format!("bad value {f:?}: {e}"))))
                .collect::<Result<_>>()?;
            if v.len() != n {
                return fmt_err("distribution payload does not match header");
            }
            v
        }
    };
    JointDist::new(hd.rows, hd.cols, table, hd.tail_mass, hd.kind)
}

pub fn write_dist(path: &Path, d: &JointDist, enc: Encoding) -> Result<()> {
    write_atomic(path, &encode_dist(d, enc)?)
}

pub fn read_dist(path: &Path) -> Result<JointDist> {
    decode_dist(&fs::read(path)?)
}

// ---------- dmat-v1

#[derive(Serialize, Deserialize)]
struct MatHeader {
    format: String,
    eta: f64,
    dark: f64,
    pixels: usize,
    n_max: usize,
    precision_bits: u32,
    method: Method,
}

pub fn encode_matrix(t: &DetectionMatrix) -> Result<Vec<u8>> {
    let mut out = header_line(&MatHeader {
        format: "dmat-v1".into(),
        eta: t.spec.eta,
        dark: t.spec.dark,
        pixels: t.pixels(),
        n_max: t.n_max(),
        precision_bits: t.precision_bits,
        method: t.method,
    })?;
    out.extend(f64_bytes(t.entries()));
    Ok(out)
}

pub fn decode_matrix(bytes: &[u8]) -> Result<DetectionMatrix> {
    let (hv, body) = split_header(bytes)?;
    check_format(&hv, "dmat-v1")?;
    let hd: MatHeader = serde_json::from_value(hv)?;
    let entries = read_f64s(body, (hd.pixels + 1) * (hd.n_max + 1))?;
    DetectionMatrix::from_parts(DetectorSpec::new(hd.eta, hd.dark, hd.pixels), hd.n_max, entries, hd.precision_bits, hd.method)
}

pub fn write_matrix(path: &Path, t: &DetectionMatrix) -> Result<()> {
    write_atomic(path, &encode_matrix(t)?)
}

pub fn read_matrix(path: &Path) -> Result<DetectionMatrix> {
    decode_matrix(&fs::read(path)?)
}

// ---------- igrid-v1

#[derive(Serialize, Deserialize)]
struct GridHeader {
    format: String,
    s: f64,
    w_max_s: f64,
    w_max_i: f64,
    steps: usize,
    edge_ratio: f64,
    cancellation_ratio: f64,
    divergent: bool,
}

pub fn encode_grid(g: &IntensityGrid) -> Result<Vec<u8>> {
    let mut out = header_line(&GridHeader {
        format: "igrid-v1".into(),
        s: g.s,
        w_max_s: g.w_max_s,
        w_max_i: g.w_max_i,
        steps: g.steps,
        edge_ratio: g.edge_ratio,
        cancellation_ratio: g.cancellation_ratio,
        divergent: g.divergent,
    })?;
    out.extend(f64_bytes(&g.values));
    Ok(out)
}

pub fn decode_grid(bytes: &[u8]) -> Result<IntensityGrid> {
    let (hv, body) = split_header(bytes)?;
    check_format(&hv, "igrid-v1")?;
    let hd: GridHeader = serde_json::from_value(hv)?;
    let values = read_f64s(body, hd.steps * hd.steps)?;
    Ok(IntensityGrid {
        s: hd.s,
        w_max_s: hd.w_max_s,
        w_max_i: hd.w_max_i,
        steps: hd.steps,
        values,
        edge_ratio: hd.edge_ratio,
        cancellation_ratio: hd.cancellation_ratio,
        divergent: hd.divergent,
    })
}

pub fn write_grid(path: &Path, g: &IntensityGrid) -> Result<()> {
    write_atomic(path, &encode_grid(g)?)
}

pub fn read_grid(path: &Path) -> Result<IntensityGrid> {
    decode_grid(&fs::read(path)?)
}

// ---------- manifests and reports

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub argv: Vec<String>,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub parameters: Value,
    pub seed: Option<u64>,
}

pub fn write_manifest(output: &Path, m: &Manifest) -> Result<()> {
    write_atomic(&manifest_path(output), &serde_json::to_vec_pretty(m)?)
}

pub fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let mut b = serde_json::to_vec_pretty(v)?;
    b.push(b'\n');
    write_atomic(path, &b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detection::detection_matrix;
    use crate::model::{joint_twb_auto, TwbParams};

    #[test]
    fn clicks_layout() {
        let s = ClickStream::from_pairs(&[(1, 1), (0, 1), (1, 0)]);
        let b = encode_clicks(&s);
        assert_eq!(&b[..8], b"TWBCLICK");
        assert_eq!(b.len(), 27);
        assert_eq!(&b[24..], &[3, 2, 1]);
        assert_eq!(decode_clicks(&b).unwrap(), s.windows);
        let mut bad = b.clone();
        bad[26] = 9;
        assert!(decode_clicks(&bad).is_err());
        assert!(decode_clicks(&b[..26]).is_err());
    }

    #[test]
    fn dist_round_trip_both_encodings() {
        let d = joint_twb_auto(&TwbParams::new(2.0, 1.0, 1.0, 0.3, 0.01, 0.02)).unwrap();
        for enc in [Encoding::Csv, Encoding::Binary] {
            let back = decode_dist(&encode_dist(&d, enc).unwrap()).unwrap();
            assert_eq!(back, d);
        }
    }

    #[test]
    fn matrix_and_grid_round_trip() {
        let t = detection_matrix(&DetectorSpec::new(0.4, 1e-3, 5), 12).unwrap();
        assert_eq!(decode_matrix(&encode_matrix(&t).unwrap()).unwrap(), t);
        let g = IntensityGrid {
            s: 0.5,
            w_max_s: 2.0,
            w_max_i: 3.0,
            steps: 2,
            values: vec![1.0, -0.5, 1e-300, 0.1],
            edge_ratio: 0.0,
            cancellation_ratio: 1.0,
            divergent: false,
        };
        assert_eq!(decode_grid(&encode_grid(&g).unwrap()).unwrap(), g);
    }

    #[test]
    fn wrong_format_rejected() {
        let t = detection_matrix(&DetectorSpec::new(0.4, 0.0, 1), 3).unwrap();
        assert!(decode_dist(&encode_matrix(&t).unwrap()).is_err());
    }

    #[test]
    fn atomic_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/h.jhist");
        let h = JointHistogram::from_counts(GroupingPolicy::disjoint(1), vec![1, 2, 3, 4]).unwrap();
        write_histogram(&p, &h).unwrap();
        assert_eq!(read_histogram(&p).unwrap(), h);
    }
}
