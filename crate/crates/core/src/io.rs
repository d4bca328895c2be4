//! On-disk formats. All integers and floats are little-endian.
//!
//! Dataset file (`.cfd`):
//!
//! ```text
//! magic     8 bytes  "CFDSET01"
//! n         u64
//! d         u64
//! cameras   u32
//! has_id    u8       1 when every record carries an identity
//! role      u8       0 = real, 1 = virtual (identity doubles as pseudo label)
//! n records:
//!   item_id   u64
//!   camera_id u32
//!   identity  u64    present only when has_id = 1
//!   features  d x f32
//! ```
//!
//! Checkpoint file (`.ckpt`): magic `"CFMCKPT1"`, then `d_in`, `d_out`,
//! `hidden`, `classes` as u64, then every parameter as f64 in the layout
//! order of [`EmbedderParams`].

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::embedding::{EmbeddingMatrix, ItemMeta};
use crate::error::{Error, Result};
use crate::eval::RankedList;
use crate::mining::MinedPair;
use crate::model::{EmbedderParams, ModelShape};
use crate::synthetic::{Role, SyntheticDataset};

const DATASET_MAGIC: &[u8; 8] = b"CFDSET01";
const CHECKPOINT_MAGIC: &[u8; 8] = b"CFMCKPT1";

fn read_exact<const N: usize>(r: &mut impl Read, what: &'static str) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::format(what, "unexpected end of file"),
        _ => Error::Io(e),
    })?;
    Ok(buf)
}

fn read_u64(r: &mut impl Read, what: &'static str) -> Result<u64> {
    Ok(u64::from_le_bytes(read_exact(r, what)?))
}

pub fn write_dataset(w: &mut impl Write, ds: &SyntheticDataset) -> Result<()> {
    let e = &ds.embeddings;
    let has_id = e.has_ground_truth();
    w.write_all(DATASET_MAGIC)?;
    w.write_all(&(e.len() as u64).to_le_bytes())?;
    w.write_all(&(e.dim() as u64).to_le_bytes())?;
    w.write_all(&e.num_cameras().to_le_bytes())?;
    w.write_all(&[has_id as u8, (ds.role == Role::Virtual) as u8])?;
    for (m, row) in e.meta().iter().zip(e.rows()) {
        w.write_all(&m.item_id.to_le_bytes())?;
        w.write_all(&m.camera_id.to_le_bytes())?;
        if has_id {
            w.write_all(&m.true_identity.unwrap_or_default().to_le_bytes())?;
        }
        for x in row {
            w.write_all(&(*x as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_dataset(r: &mut impl Read) -> Result<SyntheticDataset> {
    const WHAT: &str = "dataset file";
    if &read_exact::<8>(r, WHAT)? != DATASET_MAGIC {
        return Err(Error::format(WHAT, "bad magic"));
    }
    let n = read_u64(r, WHAT)? as usize;
    let d = read_u64(r, WHAT)? as usize;
    let cameras = u32::from_le_bytes(read_exact(r, WHAT)?);
    let [has_id, role] = read_exact::<2>(r, WHAT)?;
    if has_id > 1 || role > 1 {
        return Err(Error::format(WHAT, "bad header flags"));
    }
    let role = if role == 1 { Role::Virtual } else { Role::Real };
    if role == Role::Virtual && has_id == 0 {
        return Err(Error::format(WHAT, "virtual data without labels"));
    }
    let mut data = Vec::with_capacity(n.saturating_mul(d).min(1 << 28));
    let mut meta = Vec::with_capacity(n.min(1 << 24));
    for _ in 0..n {
        let item_id = read_u64(r, WHAT)?;
        let camera_id = u32::from_le_bytes(read_exact(r, WHAT)?);
        let identity = if has_id == 1 {
            Some(read_u64(r, WHAT)?)
        } else {
            None
        };
        for _ in 0..d {
            data.push(f32::from_le_bytes(read_exact(r, WHAT)?) as f64);
        }
        meta.push(ItemMeta {
            item_id,
            camera_id,
            true_identity: identity,
            pseudo_label: if role == Role::Virtual {
                identity
            } else {
                None
            },
        });
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::format(WHAT, "trailing bytes"));
    }
    Ok(SyntheticDataset {
        embeddings: EmbeddingMatrix::from_flat(d, data, meta, cameras)?,
        role,
    })
}

pub fn write_dataset_file(path: &Path, ds: &SyntheticDataset) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_dataset(&mut w, ds)?;
    w.flush()?;
    Ok(())
}

pub fn read_dataset_file(path: &Path) -> Result<SyntheticDataset> {
    read_dataset(&mut BufReader::new(File::open(path)?))
}

/// Reads `item_id,camera_id,identity,f0,...,f{d-1}` rows. `identity` may be
/// blank. Rows are sorted by item id; the camera count is the largest
/// camera id plus one unless given.
pub fn read_dataset_csv(path: &Path, role: Role, cameras: Option<u32>) -> Result<SyntheticDataset> {
    const WHAT: &str = "dataset csv";
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    if headers.len() < 4
        || &headers[0] != "item_id"
        || &headers[1] != "camera_id"
        || &headers[2] != "identity"
    {
        return Err(Error::format(
            WHAT,
            "expected columns item_id,camera_id,identity,f0..",
        ));
    }
    let d = headers.len() - 3;
    let mut rows: Vec<(ItemMeta, Vec<f64>)> = Vec::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec?;
        let field = |i: usize| rec.get(i).unwrap_or("").trim();
        let parse_err = |col: &str| Error::format(WHAT, format!("row {}: bad {col}", line + 1));
        let item_id: u64 = field(0).parse().map_err(|_| parse_err("item_id"))?;
        let camera_id: u32 = field(1).parse().map_err(|_| parse_err("camera_id"))?;
        let identity = match field(2) {
            "" => None,
            s => Some(s.parse::<u64>().map_err(|_| parse_err("identity"))?),
        };
        let feats = (3..3 + d)
            .map(|i| field(i).parse::<f64>().map_err(|_| parse_err("feature")))
            .collect::<Result<Vec<_>>>()?;
        rows.push((
            ItemMeta {
                item_id,
                camera_id,
                true_identity: identity,
                pseudo_label: if role == Role::Virtual {
                    identity
                } else {
                    None
                },
            },
            feats,
        ));
    }
    rows.sort_by_key(|r| r.0.item_id);
    let cams = cameras.unwrap_or_else(|| rows.iter().map(|r| r.0.camera_id + 1).max().unwrap_or(1));
    if role == Role::Virtual && rows.iter().any(|r| r.0.pseudo_label.is_none()) {
        return Err(Error::format(WHAT, "virtual rows need an identity"));
    }
    let (meta, feats): (Vec<_>, Vec<_>) = rows.into_iter().unzip();
    Ok(SyntheticDataset {
        embeddings: EmbeddingMatrix::from_flat(d, feats.concat(), meta, cams)?,
        role,
    })
}

pub fn write_checkpoint(w: &mut impl Write, params: &EmbedderParams) -> Result<()> {
    let s = params.shape();
    w.write_all(CHECKPOINT_MAGIC)?;
    for v in [s.d_in, s.d_out, s.hidden, s.classes] {
        w.write_all(&(v as u64).to_le_bytes())?;
    }
    for x in params.as_slice() {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<EmbedderParams> {
    const WHAT: &str = "checkpoint";
    if &read_exact::<8>(r, WHAT)? != CHECKPOINT_MAGIC {
        return Err(Error::format(WHAT, "bad magic"));
    }
    let mut dims = [0usize; 4];
    for d in dims.iter_mut() {
        *d = read_u64(r, WHAT)? as usize;
    }
    let shape = ModelShape {
        d_in: dims[0],
        d_out: dims[1],
        hidden: dims[2],
        classes: dims[3],
    };
    shape.validate()?;
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() != shape.num_params() * 8 {
        return Err(Error::format(
            WHAT,
            format!(
                "expected {} parameters, found {} bytes",
                shape.num_params(),
                bytes.len()
            ),
        ));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    EmbedderParams::from_raw(shape, data)
}

pub fn write_checkpoint_file(path: &Path, params: &EmbedderParams) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, params)?;
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint_file(path: &Path) -> Result<EmbedderParams> {
    read_checkpoint(&mut BufReader::new(File::open(path)?))
}

/// `anchor_id,positive_id,f_score,same_identity`; the last column is blank
/// when either item lacks a ground-truth identity.
pub fn write_pairs_csv(w: impl Write, pairs: &[MinedPair], meta: &[ItemMeta]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["anchor_id", "positive_id", "f_score", "same_identity"])?;
    for p in pairs {
        let (a, q) = (&meta[p.anchor], &meta[p.positive]);
        let same = match (a.true_identity, q.true_identity) {
            (Some(x), Some(y)) => (x == y).to_string(),
            _ => String::new(),
        };
        out.write_record([
            a.item_id.to_string(),
            q.item_id.to_string(),
            p.f_score.to_string(),
            same,
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// `query_id,ap` for every query with at least one relevant entry.
pub fn write_per_query_ap_csv(
    w: impl Write,
    lists: &[RankedList],
    meta: &[ItemMeta],
) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["query_id", "ap"])?;
    for (id, ap) in crate::eval::per_query_ap(lists, meta) {
        out.write_record([id.to_string(), ap.to_string()])?;
    }
    out.flush()?;
    Ok(())
}
