//! On-disk formats: CSV tables, JSON summaries and binary field snapshots.
//!
//! Snapshot files (`.snap`), all integers and reals little-endian:
//!
//! | offset | size | content                               |
//! |--------|------|---------------------------------------|
//! | 0      | 8    | magic `SOLFGRSN`                      |
//! | 8      | 4    | version (u32, currently 1)            |
//! | 12     | 4    | dimension d (u32)                     |
//! | 16     | 8    | grid intervals M (u64)                |
//! | 24     | 8    | node count n = M - 1 (u64)            |
//! | 32     | 8    | radius R (f64)                        |
//! | 40     | 8    | ω of the underlying ground state (f64)|
//! | 48     | 8    | dt (f64)                              |
//! | 56     | 64   | grid hash, ASCII hex                  |
//! | 120    | 64   | config hash, ASCII hex                |
//!
//! followed by frames of `8 (2n + 1)` bytes: the time `t`, then the `n` real parts,
//! then the `n` imaginary parts of `u(t, r_j)`, `r_j = j R / M`, `j = 1..M-1`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use solfgr_core::C64;

use crate::error::{LabError, LabResult};

pub const MAGIC: &[u8; 8] = b"SOLFGRSN";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 184;

/// Provenance stamped into every artifact.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, serde::Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub grid_hash: String,
}

/// Writes a CSV table preceded by `# key=value` provenance comment lines.
pub fn write_csv(path: &Path, prov: &Provenance, header: &[&str], rows: &[Vec<f64>]) -> LabResult<()> {
    let file = File::create(path).map_err(|e| LabError::io(path, e))?;
    let mut out = BufWriter::new(file);
    let io = |e| LabError::io(path, e);
    writeln!(out, "# config_hash={}", prov.config_hash).map_err(io)?;
    writeln!(out, "# grid_hash={}", prov.grid_hash).map_err(io)?;
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| LabError::Format { path: path.to_path_buf(), detail: e.to_string() };
    w.write_record(header).map_err(csv_err)?;
    for row in rows {
        w.write_record(row.iter().map(|v| format!("{v:e}"))).map_err(csv_err)?;
    }
    w.flush().map_err(io)?;
    Ok(())
}

/// Reads back a table written by [`write_csv`].
pub fn read_csv(path: &Path) -> LabResult<(Provenance, Vec<String>, Vec<Vec<f64>>)> {
    let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
    let bad = |d: String| LabError::Format { path: path.to_path_buf(), detail: d };
    let mut lines = text.lines();
    let mut field = |key: &str| -> LabResult<String> {
        let l = lines.next().ok_or_else(|| bad("missing provenance".into()))?;
        l.strip_prefix(&format!("# {key}=")).map(str::to_string).ok_or_else(|| bad(format!("expected `# {key}=`")))
    };
    let prov = Provenance { config_hash: field("config_hash")?, grid_hash: field("grid_hash")? };
    let body: String = text.lines().skip(2).collect::<Vec<_>>().join("\n");
    let mut r = csv::Reader::from_reader(body.as_bytes());
    let header = r.headers().map_err(|e| bad(e.to_string()))?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        rows.push(rec.iter().map(|s| s.parse::<f64>().map_err(|e| bad(e.to_string()))).collect::<LabResult<Vec<f64>>>()?);
    }
    Ok((prov, header, rows))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> LabResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| LabError::Format { path: path.to_path_buf(), detail: e.to_string() })?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| LabError::io(path, e))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> LabResult<T> {
    let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| LabError::Format { path: path.to_path_buf(), detail: e.to_string() })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SnapshotHeader {
    pub dim: u32,
    pub intervals: u64,
    pub nodes: u64,
    pub radius: f64,
    pub omega: f64,
    pub dt: f64,
    pub provenance: Provenance,
}

fn hash_bytes(h: &str) -> [u8; 64] {
    let mut out = [b'0'; 64];
    let b = h.as_bytes();
    out[..b.len().min(64)].copy_from_slice(&b[..b.len().min(64)]);
    out
}

impl SnapshotHeader {
    fn encode(&self) -> Vec<u8> {
        let mut b = Vec::with_capacity(HEADER_LEN);
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&VERSION.to_le_bytes());
        b.extend_from_slice(&self.dim.to_le_bytes());
        b.extend_from_slice(&self.intervals.to_le_bytes());
        b.extend_from_slice(&self.nodes.to_le_bytes());
        b.extend_from_slice(&self.radius.to_le_bytes());
        b.extend_from_slice(&self.omega.to_le_bytes());
        b.extend_from_slice(&self.dt.to_le_bytes());
        b.extend_from_slice(&hash_bytes(&self.provenance.grid_hash));
        b.extend_from_slice(&hash_bytes(&self.provenance.config_hash));
        debug_assert_eq!(b.len(), HEADER_LEN);
        b
    }

    fn decode(b: &[u8], path: &Path) -> LabResult<Self> {
        let bad = |d: &str| LabError::Format { path: path.to_path_buf(), detail: d.to_string() };
        if b.len() < HEADER_LEN || &b[..8] != MAGIC {
            return Err(bad("not a snapshot file"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(b[o..o + 4].try_into().unwrap());
        let u64_at = |o: usize| u64::from_le_bytes(b[o..o + 8].try_into().unwrap());
        let f64_at = |o: usize| f64::from_le_bytes(b[o..o + 8].try_into().unwrap());
        if u32_at(8) != VERSION {
            return Err(bad("unsupported snapshot version"));
        }
        let text = |o: usize| String::from_utf8(b[o..o + 64].to_vec()).map_err(|_| bad("hash is not ASCII"));
        Ok(SnapshotHeader {
            dim: u32_at(12),
            intervals: u64_at(16),
            nodes: u64_at(24),
            radius: f64_at(32),
            omega: f64_at(40),
            dt: f64_at(48),
            provenance: Provenance { grid_hash: text(56)?, config_hash: text(120)? },
        })
    }
}

pub struct SnapshotWriter {
    out: BufWriter<File>,
    nodes: usize,
    path: PathBuf,
    frames: usize,
}

impl SnapshotWriter {
    pub fn create(path: &Path, header: &SnapshotHeader) -> LabResult<Self> {
        let file = File::create(path).map_err(|e| LabError::io(path, e))?;
        let mut out = BufWriter::new(file);
        out.write_all(&header.encode()).map_err(|e| LabError::io(path, e))?;
        Ok(SnapshotWriter { out, nodes: header.nodes as usize, path: path.to_path_buf(), frames: 0 })
    }

    pub fn push(&mut self, t: f64, u: &[C64]) -> LabResult<()> {
        if u.len() != self.nodes {
            return Err(LabError::Format { path: self.path.clone(), detail: format!("frame of {} nodes, header says {}", u.len(), self.nodes) });
        }
        let mut buf = Vec::with_capacity(8 * (2 * u.len() + 1));
        buf.extend_from_slice(&t.to_le_bytes());
        for x in u {
            buf.extend_from_slice(&x.re.to_le_bytes());
        }
        for x in u {
            buf.extend_from_slice(&x.im.to_le_bytes());
        }
        self.out.write_all(&buf).map_err(|e| LabError::io(&self.path, e))?;
        self.frames += 1;
        Ok(())
    }

    pub fn finish(mut self) -> LabResult<usize> {
        self.out.flush().map_err(|e| LabError::io(&self.path, e))?;
        Ok(self.frames)
    }
}

/// Streams frames `(t, u)` out of a snapshot file.
pub struct SnapshotReader {
    input: BufReader<File>,
    pub header: SnapshotHeader,
    path: PathBuf,
    buf: Vec<u8>,
}

impl SnapshotReader {
    pub fn open(path: &Path) -> LabResult<Self> {
        let file = File::open(path).map_err(|e| LabError::io(path, e))?;
        let mut input = BufReader::new(file);
        let mut head = vec![0u8; HEADER_LEN];
        input.read_exact(&mut head).map_err(|e| LabError::io(path, e))?;
        let header = SnapshotHeader::decode(&head, path)?;
        let n = header.nodes as usize;
        Ok(SnapshotReader { input, header, path: path.to_path_buf(), buf: vec![0u8; 8 * (2 * n + 1)] })
    }

    /// Next frame, or `None` at a clean end of file.
    pub fn next_frame(&mut self) -> LabResult<Option<(f64, Vec<C64>)>> {
        let mut filled = 0;
        while filled < self.buf.len() {
            let k = self.input.read(&mut self.buf[filled..]).map_err(|e| LabError::io(&self.path, e))?;
            if k == 0 {
                break;
            }
            filled += k;
        }
        if filled == 0 {
            return Ok(None);
        }
        if filled < self.buf.len() {
            return Err(LabError::Format { path: self.path.clone(), detail: "truncated frame".into() });
        }
        let n = self.header.nodes as usize;
        let f = |i: usize| f64::from_le_bytes(self.buf[8 * i..8 * i + 8].try_into().unwrap());
        let t = f(0);
        let u = (0..n).map(|j| C64::new(f(1 + j), f(1 + n + j))).collect();
        Ok(Some((t, u)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn prov() -> Provenance {
        Provenance { config_hash: "ab".repeat(32), grid_hash: "cd".repeat(32) }
    }

    #[test]
    fn snapshot_layout_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.snap");
        let header = SnapshotHeader { dim: 3, intervals: 4, nodes: 3, radius: 2.0, omega: 0.5, dt: 0.1, provenance: prov() };
        let mut w = SnapshotWriter::create(&path, &header).unwrap();
        let u = vec![C64::new(1.0, -2.0), C64::new(0.5, 0.25), C64::new(-3.0, 1e-300)];
        w.push(0.0, &u).unwrap();
        w.push(0.1, &u).unwrap();
        assert_eq!(w.finish().unwrap(), 2);
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(bytes.len(), HEADER_LEN + 2 * 8 * 7);
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(f64::from_le_bytes(bytes[32..40].try_into().unwrap()), 2.0);
        // first frame: t, then real parts, then imaginary parts
        let at = |o: usize| f64::from_le_bytes(bytes[HEADER_LEN + 8 * o..HEADER_LEN + 8 * o + 8].try_into().unwrap());
        assert_eq!([at(0), at(1), at(4)], [0.0, 1.0, -2.0]);
        let mut r = SnapshotReader::open(&path).unwrap();
        assert_eq!(r.header, header);
        assert_eq!(r.next_frame().unwrap(), Some((0.0, u.clone())));
        assert_eq!(r.next_frame().unwrap(), Some((0.1, u)));
        assert_eq!(r.next_frame().unwrap(), None);
    }

    proptest::proptest! {
        #[test]
        fn snapshot_frames_round_trip(frames in proptest::collection::vec(proptest::collection::vec((-1e3f64..1e3, -1e3f64..1e3), 5), 0..6)) {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("p.snap");
            let header = SnapshotHeader { dim: 4, intervals: 6, nodes: 5, radius: 1.5, omega: 0.3, dt: 0.25, provenance: prov() };
            let mut w = SnapshotWriter::create(&path, &header).unwrap();
            let fields: Vec<Vec<C64>> = frames.iter().map(|f| f.iter().map(|(a, b)| C64::new(*a, *b)).collect()).collect();
            for (k, u) in fields.iter().enumerate() {
                w.push(k as f64 * 0.25, u).unwrap();
            }
            w.finish().unwrap();
            let mut r = SnapshotReader::open(&path).unwrap();
            for (k, u) in fields.iter().enumerate() {
                let (t, back) = r.next_frame().unwrap().unwrap();
                proptest::prop_assert_eq!(t, k as f64 * 0.25);
                proptest::prop_assert_eq!(&back, u);
            }
            proptest::prop_assert!(r.next_frame().unwrap().is_none());
        }

        #[test]
        fn csv_values_round_trip(rows in proptest::collection::vec(proptest::collection::vec(proptest::num::f64::NORMAL | proptest::num::f64::ZERO, 3), 0..20)) {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("p.csv");
            write_csv(&path, &prov(), &["x", "y", "z"], &rows).unwrap();
            proptest::prop_assert_eq!(read_csv(&path).unwrap().2, rows);
        }
    }

    #[test]
    fn truncated_snapshot_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.snap");
        let header = SnapshotHeader { dim: 3, intervals: 3, nodes: 2, radius: 1.0, omega: 1.0, dt: 0.1, provenance: prov() };
        let mut w = SnapshotWriter::create(&path, &header).unwrap();
        w.push(0.0, &[C64::new(1.0, 0.0); 2]).unwrap();
        w.finish().unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        std::fs::write(&path, &bytes).unwrap();
        let mut r = SnapshotReader::open(&path).unwrap();
        assert!(matches!(r.next_frame(), Err(LabError::Format { .. })));
        std::fs::write(&path, b"not a snapshot").unwrap();
        assert!(SnapshotReader::open(&path).is_err());
    }

    #[test]
    fn csv_round_trips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let rows = vec![vec![0.1, -2.5e-17, 1.0 / 3.0], vec![f64::MAX, 0.0, -1.0]];
        write_csv(&path, &prov(), &["a", "b", "c"], &rows).unwrap();
        let (p, h, back) = read_csv(&path).unwrap();
        assert_eq!(p, prov());
        assert_eq!(h, vec!["a", "b", "c"]);
        assert_eq!(back, rows);
    }
}
