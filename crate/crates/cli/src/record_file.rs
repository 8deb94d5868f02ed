//! Binary measurement records.
//!
//! All fields are little-endian.
//!
//! | offset | size | field                                        |
//! |--------|------|----------------------------------------------|
//! | 0      | 4    | magic `MBNL`                                 |
//! | 4      | 2    | format version (u16)                         |
//! | 6      | 1    | convention tag                               |
//! | 7      | 1    | flags, bit 0 set when Bob is rescaled by 1/g |
//! | 8      | 8    | sampling seed (u64)                          |
//! | 16     | 32   | SHA-256 of the state block                   |
//! | 48     | 160  | state block: 16 cm entries then 4 means (f64)|
//! | 208    | 8    | shot count (u64)                             |
//! | 216    | 8    | gain applied (f64)                           |
//! | 224    | 8    | filter cutoff α_C (f64)                      |
//! | 232    | 8    | filter seed (u64)                            |
//! | 240    | 8    | shots originally requested (u64)             |
//! | 248    | 25·n | shots: quadrature u8, alice, bob_x, bob_p    |

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use mbnla::gaussian::GaussianState;
use mbnla::measurement::{Convention, MeasurementRecord, Quadrature, RecordMeta, Shot, ShotSampler};
use nalgebra::{Matrix4, Vector4};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const MAGIC: [u8; 4] = *b"MBNL";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 248;
pub const SHOT_LEN: usize = 25;
const STATE_LEN: usize = 160;
const FLAG_RESCALED: u8 = 1;

// Shards per streamed batch when sampling straight to disk.
const STREAM_BATCH_SHARDS: usize = 16;

fn state_block(state: &GaussianState) -> [u8; STATE_LEN] {
    let mut out = [0u8; STATE_LEN];
    let cm = state.cm();
    let vals = (0..4)
        .flat_map(|i| (0..4).map(move |j| (i, j)))
        .map(|(i, j)| cm[(i, j)])
        .chain(state.mean().iter().copied());
    for (k, v) in vals.enumerate() {
        out[8 * k..8 * k + 8].copy_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn state_digest(state: &GaussianState) -> [u8; 32] {
    Sha256::digest(state_block(state)).into()
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn header(meta: &RecordMeta, n: usize) -> [u8; HEADER_LEN] {
    let mut h = [0u8; HEADER_LEN];
    let block = state_block(&meta.source);
    h[0..4].copy_from_slice(&MAGIC);
    h[4..6].copy_from_slice(&VERSION.to_le_bytes());
    h[6] = meta.convention.tag();
    h[7] = if meta.rescaled { FLAG_RESCALED } else { 0 };
    h[8..16].copy_from_slice(&meta.seed.to_le_bytes());
    h[16..48].copy_from_slice(&Sha256::digest(block));
    h[48..208].copy_from_slice(&block);
    h[208..216].copy_from_slice(&(n as u64).to_le_bytes());
    h[216..224].copy_from_slice(&meta.gain.to_le_bytes());
    h[224..232].copy_from_slice(&meta.alpha_c.to_le_bytes());
    h[232..240].copy_from_slice(&meta.filter_seed.to_le_bytes());
    h[240..248].copy_from_slice(&(meta.n_requested as u64).to_le_bytes());
    h
}

fn encode_shot(s: &Shot, out: &mut [u8]) {
    out[0] = s.alice_quad.to_byte();
    out[1..9].copy_from_slice(&s.alice_value.to_le_bytes());
    out[9..17].copy_from_slice(&s.bob_x.to_le_bytes());
    out[17..25].copy_from_slice(&s.bob_p.to_le_bytes());
}

fn f64_at(b: &[u8], at: usize) -> f64 {
    f64::from_le_bytes(b[at..at + 8].try_into().expect("8 bytes"))
}

fn u64_at(b: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(b[at..at + 8].try_into().expect("8 bytes"))
}

fn write_shots<W: Write>(w: &mut W, shots: &[Shot], path: &Path) -> CliResult<()> {
    let mut buf = vec![0u8; SHOT_LEN * shots.len().min(1 << 16)];
    for chunk in shots.chunks(1 << 16) {
        let bytes = &mut buf[..SHOT_LEN * chunk.len()];
        for (s, out) in chunk.iter().zip(bytes.chunks_exact_mut(SHOT_LEN)) {
            encode_shot(s, out);
        }
        w.write_all(bytes).map_err(|e| CliError::io(path, e))?;
    }
    Ok(())
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(|e| CliError::io(path, e))?))
}

pub fn write_record(path: &Path, record: &MeasurementRecord) -> CliResult<()> {
    let mut w = create(path)?;
    w.write_all(&header(&record.meta, record.len()))
        .map_err(|e| CliError::io(path, e))?;
    write_shots(&mut w, &record.shots, path)?;
    w.flush().map_err(|e| CliError::io(path, e))
}

/// Samples shard batches straight to disk, so the record never has to fit
/// in memory. The bytes equal those of [`write_record`] on the in-memory
/// record.
pub fn write_streaming(path: &Path, mut sampler: ShotSampler) -> CliResult<()> {
    let mut w = create(path)?;
    let meta = sampler.meta().clone();
    w.write_all(&header(&meta, meta.n_requested))
        .map_err(|e| CliError::io(path, e))?;
    while let Some(batch) = sampler.next_batch(STREAM_BATCH_SHARDS) {
        write_shots(&mut w, &batch, path)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

/// Header fields as stored on disk.
#[derive(Clone, Debug)]
pub struct RecordHeader {
    pub meta: RecordMeta,
    pub n_shots: usize,
    pub digest: [u8; 32],
}

fn parse_header(path: &Path, h: &[u8; HEADER_LEN]) -> CliResult<RecordHeader> {
    if h[0..4] != MAGIC {
        return Err(CliError::format(path, "not a measurement record (bad magic)"));
    }
    let version = u16::from_le_bytes([h[4], h[5]]);
    if version != VERSION {
        return Err(CliError::format(path, format!("unsupported record version {version}")));
    }
    let convention = Convention::from_tag(h[6])
        .ok_or_else(|| CliError::format(path, format!("unknown convention tag {}", h[6])))?;
    let block = &h[48..208];
    let digest: [u8; 32] = h[16..48].try_into().expect("32 bytes");
    if <[u8; 32]>::from(Sha256::digest(block)) != digest {
        return Err(CliError::format(path, "state digest mismatch"));
    }
    let cm = Matrix4::from_fn(|i, j| f64_at(block, 8 * (4 * i + j)));
    let mean = Vector4::from_fn(|i, _| f64_at(block, 128 + 8 * i));
    let source = GaussianState::new(cm, mean, "record source")
        .map_err(|e| CliError::format(path, format!("stored state: {e}")))?;
    let meta = RecordMeta {
        source,
        seed: u64_at(h, 8),
        n_requested: u64_at(h, 240) as usize,
        convention,
        gain: f64_at(h, 216),
        alpha_c: f64_at(h, 224),
        filter_seed: u64_at(h, 232),
        rescaled: h[7] & FLAG_RESCALED != 0,
    };
    Ok(RecordHeader {
        meta,
        n_shots: u64_at(h, 208) as usize,
        digest,
    })
}

fn open(path: &Path) -> CliResult<(BufReader<File>, RecordHeader)> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    let len = file.metadata().map_err(|e| CliError::io(path, e))?.len();
    let mut r = BufReader::with_capacity(1 << 20, file);
    let mut h = [0u8; HEADER_LEN];
    r.read_exact(&mut h)
        .map_err(|_| CliError::format(path, "truncated header"))?;
    let header = parse_header(path, &h)?;
    let expected = HEADER_LEN as u64 + SHOT_LEN as u64 * header.n_shots as u64;
    if len != expected {
        return Err(CliError::format(
            path,
            format!(
                "header declares {} shots ({expected} bytes) but the file has {len} bytes",
                header.n_shots
            ),
        ));
    }
    Ok((r, header))
}

pub fn read_header(path: &Path) -> CliResult<RecordHeader> {
    open(path).map(|(_, h)| h)
}

pub fn read_record(path: &Path) -> CliResult<(MeasurementRecord, RecordHeader)> {
    let (mut r, header) = open(path)?;
    let mut shots = Vec::with_capacity(header.n_shots);
    let mut buf = vec![0u8; SHOT_LEN << 16];
    let mut left = header.n_shots;
    while left > 0 {
        let k = left.min(1 << 16);
        let bytes = &mut buf[..SHOT_LEN * k];
        r.read_exact(bytes).map_err(|e| CliError::io(path, e))?;
        for b in bytes.chunks_exact(SHOT_LEN) {
            let alice_quad = Quadrature::from_byte(b[0])
                .ok_or_else(|| CliError::format(path, format!("bad quadrature byte {}", b[0])))?;
            shots.push(Shot {
                alice_quad,
                alice_value: f64_at(b, 1),
                bob_x: f64_at(b, 9),
                bob_p: f64_at(b, 17),
            });
        }
        left -= k;
    }
    let record = MeasurementRecord {
        meta: header.meta.clone(),
        shots,
    };
    Ok((record, header))
}

/// Writes the shots as CSV for external tooling.
pub fn export_csv(path: &Path, record: &MeasurementRecord) -> CliResult<()> {
    let mut w = create(path)?;
    let io = |e| CliError::io(path, e);
    writeln!(w, "alice_quad,alice_value,bob_x,bob_p").map_err(io)?;
    for s in &record.shots {
        let q = match s.alice_quad {
            Quadrature::X => "x",
            Quadrature::P => "p",
        };
        writeln!(w, "{q},{:e},{:e},{:e}", s.alice_value, s.bob_x, s.bob_p).map_err(io)?;
    }
    w.flush().map_err(io)
}
