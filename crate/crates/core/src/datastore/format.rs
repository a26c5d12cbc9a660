use std::io::{self, Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use super::{Dataset, DatasetRecord, SplitSizes};
use crate::blockworld::{
    Action, BlockAttr, BlockSet, BoardState, CaptionFactors, Direction, Trajectory, VerbClass,
    Vocab, N_BLOCKS, STATE_DIM,
};
use crate::error::{ClaspError, Result};

pub const MAGIC: [u8; 4] = *b"CLSP";
pub const FORMAT_VERSION: u32 = 1;

// magic, version, body length
const PREAMBLE: usize = 4 + 4 + 8;

/// Writes `ds` as a `.clasp` container:
///
/// ```text
/// "CLSP" | u32 version | u64 body length | body | u32 crc32(everything before)
/// body = vocab | block table | split counts | length-prefixed records
/// ```
///
/// All integers little-endian, floats as raw `f32` bits.
pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    std::fs::write(path, encode(ds)?)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    decode(&std::fs::read(path)?)
}

pub(crate) fn encode(ds: &Dataset) -> Result<Vec<u8>> {
    if ds.splits.total() != ds.records.len() {
        return Err(ClaspError::InvalidInput(format!(
            "split sizes sum to {} for {} records",
            ds.splits.total(),
            ds.records.len()
        )));
    }
    let mut body = Vec::new();
    body.write_u32::<LE>(ds.vocab.len() as u32)?;
    for w in ds.vocab.words() {
        let bytes = w.as_bytes();
        let len = u8::try_from(bytes.len())
            .map_err(|_| ClaspError::InvalidInput(format!("vocabulary word too long: {w:?}")))?;
        body.write_u8(len)?;
        body.extend_from_slice(bytes);
    }
    for a in &ds.blocks.attrs {
        body.write_u8(a.color)?;
        body.write_u8(a.shape)?;
    }
    for n in [ds.splits.train, ds.splits.val, ds.splits.test] {
        body.write_u64::<LE>(n as u64)?;
    }
    let mut rec = Vec::new();
    for r in &ds.records {
        rec.clear();
        encode_record(r, &mut rec)?;
        body.write_u32::<LE>(rec.len() as u32)?;
        body.extend_from_slice(&rec);
    }

    let mut out = Vec::with_capacity(PREAMBLE + body.len() + 4);
    out.extend_from_slice(&MAGIC);
    out.write_u32::<LE>(FORMAT_VERSION)?;
    out.write_u64::<LE>(body.len() as u64)?;
    out.extend_from_slice(&body);
    let crc = crc32fast::hash(&out);
    out.write_u32::<LE>(crc)?;
    Ok(out)
}

fn encode_record(r: &DatasetRecord, out: &mut Vec<u8>) -> Result<()> {
    out.write_u64::<LE>(r.record_id)?;
    out.write_u8(r.factors.verb.id())?;
    out.write_u8(r.factors.color)?;
    out.write_u8(r.factors.shape)?;
    out.write_u8(r.factors.direction.id())?;
    let n = u8::try_from(r.caption.len())
        .map_err(|_| ClaspError::InvalidInput("caption longer than 255 tokens".into()))?;
    out.write_u8(n)?;
    for &t in &r.caption {
        let t = u16::try_from(t)
            .map_err(|_| ClaspError::InvalidInput(format!("token id {t} exceeds u16")))?;
        out.write_u16::<LE>(t)?;
    }
    let traj = &r.trajectory;
    if traj.states.len() != traj.actions.len() + 1 {
        return Err(ClaspError::InvalidInput(format!(
            "record {}: {} states for {} actions",
            r.record_id,
            traj.states.len(),
            traj.actions.len()
        )));
    }
    let t = u16::try_from(traj.actions.len())
        .map_err(|_| ClaspError::InvalidInput("trajectory too long".into()))?;
    out.write_u16::<LE>(t)?;
    for s in &traj.states {
        for v in s.to_vector() {
            out.write_f32::<LE>(v)?;
        }
    }
    for a in &traj.actions {
        out.write_f32::<LE>(a.delta.x)?;
        out.write_f32::<LE>(a.delta.y)?;
    }
    Ok(())
}

fn truncated(e: io::Error) -> ClaspError {
    if e.kind() == io::ErrorKind::UnexpectedEof {
        ClaspError::Truncated("unexpected end of data".into())
    } else {
        ClaspError::Io(e)
    }
}

pub(crate) fn decode(bytes: &[u8]) -> Result<Dataset> {
    if bytes.len() < 4 {
        return Err(ClaspError::Truncated(format!("{} byte file", bytes.len())));
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(ClaspError::BadMagic(magic));
    }
    if bytes.len() < PREAMBLE {
        return Err(ClaspError::Truncated("incomplete header".into()));
    }
    let mut cur = Cursor::new(&bytes[4..PREAMBLE]);
    let version = cur.read_u32::<LE>()?;
    if version != FORMAT_VERSION {
        return Err(ClaspError::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let body_len = cur.read_u64::<LE>()? as usize;
    let end = PREAMBLE
        .checked_add(body_len)
        .ok_or_else(|| ClaspError::Corrupt("body length overflows".into()))?;
    if bytes.len() < end + 4 {
        return Err(ClaspError::Truncated(format!(
            "expected {} bytes, found {}",
            end + 4,
            bytes.len()
        )));
    }
    if bytes.len() > end + 4 {
        return Err(ClaspError::Corrupt(format!(
            "{} trailing bytes",
            bytes.len() - end - 4
        )));
    }
    let stored = u32::from_le_bytes(bytes[end..end + 4].try_into().unwrap());
    let computed = crc32fast::hash(&bytes[..end]);
    if stored != computed {
        return Err(ClaspError::Checksum { stored, computed });
    }
    decode_body(&bytes[PREAMBLE..end])
}

fn decode_body(body: &[u8]) -> Result<Dataset> {
    let mut cur = Cursor::new(body);
    let n_words = cur.read_u32::<LE>().map_err(truncated)? as usize;
    let mut words = Vec::with_capacity(n_words.min(1 << 16));
    for _ in 0..n_words {
        let len = cur.read_u8().map_err(truncated)? as usize;
        let mut buf = vec![0u8; len];
        cur.read_exact(&mut buf).map_err(truncated)?;
        words.push(
            String::from_utf8(buf)
                .map_err(|_| ClaspError::Corrupt("vocabulary word is not UTF-8".into()))?,
        );
    }
    let vocab = Vocab::from_words(words).map_err(ClaspError::Corrupt)?;

    let mut attrs = [BlockAttr { color: 0, shape: 0 }; N_BLOCKS];
    for a in attrs.iter_mut() {
        a.color = cur.read_u8().map_err(truncated)?;
        a.shape = cur.read_u8().map_err(truncated)?;
    }
    let blocks = BlockSet::new(attrs).map_err(ClaspError::Corrupt)?;

    let mut counts = [0usize; 3];
    for c in counts.iter_mut() {
        *c = cur.read_u64::<LE>().map_err(truncated)? as usize;
    }
    let splits = SplitSizes {
        train: counts[0],
        val: counts[1],
        test: counts[2],
    };
    let total = counts
        .iter()
        .try_fold(0usize, |acc, &c| acc.checked_add(c))
        .ok_or_else(|| ClaspError::Corrupt("split counts overflow".into()))?;

    let mut records = Vec::with_capacity(total.min(1 << 20));
    for _ in 0..total {
        let len = cur.read_u32::<LE>().map_err(truncated)? as usize;
        let start = cur.position() as usize;
        let stop = start
            .checked_add(len)
            .filter(|&s| s <= body.len())
            .ok_or_else(|| ClaspError::Truncated("record runs past end of body".into()))?;
        let r = decode_record(&body[start..stop], &vocab)?;
        records.push(r);
        cur.set_position(stop as u64);
    }
    if (cur.position() as usize) != body.len() {
        return Err(ClaspError::Corrupt("bytes after the last record".into()));
    }
    Ok(Dataset {
        vocab,
        blocks,
        records,
        splits,
    })
}

fn decode_record(bytes: &[u8], vocab: &Vocab) -> Result<DatasetRecord> {
    let mut cur = Cursor::new(bytes);
    let record_id = cur.read_u64::<LE>().map_err(truncated)?;
    let bad = |what: &str| ClaspError::Corrupt(format!("record {record_id}: {what}"));
    let verb = VerbClass::from_id(cur.read_u8().map_err(truncated)?).ok_or_else(|| bad("verb"))?;
    let color = cur.read_u8().map_err(truncated)?;
    let shape = cur.read_u8().map_err(truncated)?;
    let direction =
        Direction::from_id(cur.read_u8().map_err(truncated)?).ok_or_else(|| bad("direction"))?;
    if color as usize >= crate::blockworld::N_COLORS
        || shape as usize >= crate::blockworld::N_SHAPES
    {
        return Err(bad("block attributes out of range"));
    }
    let factors = CaptionFactors {
        verb,
        color,
        shape,
        direction,
    };
    let n = cur.read_u8().map_err(truncated)? as usize;
    let mut caption = Vec::with_capacity(n);
    for _ in 0..n {
        let t = cur.read_u16::<LE>().map_err(truncated)? as u32;
        if !vocab.contains_id(t) {
            return Err(bad("caption token outside the vocabulary"));
        }
        caption.push(t);
    }
    let t = cur.read_u16::<LE>().map_err(truncated)? as usize;
    let mut states = Vec::with_capacity(t + 1);
    let mut v = [0f32; STATE_DIM];
    for _ in 0..=t {
        cur.read_f32_into::<LE>(&mut v).map_err(truncated)?;
        states.push(BoardState::from_vector(&v));
    }
    let mut actions = Vec::with_capacity(t);
    for _ in 0..t {
        let x = cur.read_f32::<LE>().map_err(truncated)?;
        let y = cur.read_f32::<LE>().map_err(truncated)?;
        actions.push(Action {
            delta: crate::blockworld::Vec2::new(x, y),
        });
    }
    if (cur.position() as usize) != bytes.len() {
        return Err(bad("record length disagrees with contents"));
    }
    Ok(DatasetRecord {
        record_id,
        trajectory: Trajectory { states, actions },
        caption,
        factors,
    })
}
