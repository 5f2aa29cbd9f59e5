//! Binary sequence file.
//!
//! Layout, little endian: magic `MNTS`, u32 N, u32 sequence count, string
//! `source` (where feature refs resolve), then per sequence: string
//! video_id, u8 label (0 none, 1 pristine, 2 fake), and N slot records
//! (u8 valid; if valid: u32 identity, u64 frame, u8 size bin, string ref).
//! Strings are a u32 byte length followed by UTF-8.

use std::io::{self, Read, Write};

use crate::embeddings::SIZE_BINS;
use crate::trackdata::Label;

use super::{InputSequence, SlotFace};

const MAGIC: &[u8; 4] = b"MNTS";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SequenceFile {
    pub sequence_length: usize,
    pub source: String,
    pub sequences: Vec<InputSequence>,
}

fn bad(msg: impl Into<String>) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg.into())
}

fn put_u32<W: Write>(w: &mut W, v: usize) -> io::Result<()> {
    let v = u32::try_from(v).map_err(|_| bad("value does not fit in u32"))?;
    w.write_all(&v.to_le_bytes())
}

fn put_str<W: Write>(w: &mut W, s: &str) -> io::Result<()> {
    put_u32(w, s.len())?;
    w.write_all(s.as_bytes())
}

fn get<const K: usize, R: Read>(r: &mut R) -> io::Result<[u8; K]> {
    let mut b = [0u8; K];
    r.read_exact(&mut b)?;
    Ok(b)
}

fn get_u32<R: Read>(r: &mut R) -> io::Result<usize> {
    Ok(u32::from_le_bytes(get(r)?) as usize)
}

fn get_str<R: Read>(r: &mut R) -> io::Result<String> {
    let n = get_u32(r)?;
    let mut b = Vec::new();
    r.take(n as u64).read_to_end(&mut b)?;
    if b.len() != n {
        return Err(io::ErrorKind::UnexpectedEof.into());
    }
    String::from_utf8(b).map_err(|_| bad("string is not UTF-8"))
}

pub fn write_sequences<W: Write>(w: &mut W, file: &SequenceFile) -> io::Result<()> {
    w.write_all(MAGIC)?;
    put_u32(w, file.sequence_length)?;
    put_u32(w, file.sequences.len())?;
    put_str(w, &file.source)?;
    for seq in &file.sequences {
        if seq.slots.len() != file.sequence_length {
            return Err(bad(format!("sequence {} has {} slots", seq.video_id, seq.slots.len())));
        }
        put_str(w, &seq.video_id)?;
        w.write_all(&[match seq.label {
            None => 0,
            Some(Label::Pristine) => 1,
            Some(Label::Fake) => 2,
        }])?;
        for slot in &seq.slots {
            match slot {
                None => w.write_all(&[0])?,
                Some(f) => {
                    w.write_all(&[1])?;
                    w.write_all(&f.identity_id.to_le_bytes())?;
                    w.write_all(&f.frame_index.to_le_bytes())?;
                    w.write_all(&[f.size_bin as u8])?;
                    put_str(w, &f.feature_ref)?;
                }
            }
        }
    }
    Ok(())
}

pub fn read_sequences<R: Read>(r: &mut R) -> io::Result<SequenceFile> {
    if &get::<4, _>(r)? != MAGIC {
        return Err(bad("not a sequence file"));
    }
    let sequence_length = get_u32(r)?;
    let count = get_u32(r)?;
    let source = get_str(r)?;
    let mut sequences = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let video_id = get_str(r)?;
        let label = match get::<1, _>(r)?[0] {
            0 => None,
            1 => Some(Label::Pristine),
            2 => Some(Label::Fake),
            b => return Err(bad(format!("bad label byte {b}"))),
        };
        let mut slots = Vec::with_capacity(sequence_length);
        for _ in 0..sequence_length {
            slots.push(match get::<1, _>(r)?[0] {
                0 => None,
                1 => {
                    let identity_id = u32::from_le_bytes(get(r)?);
                    let frame_index = u64::from_le_bytes(get(r)?);
                    let size_bin = get::<1, _>(r)?[0] as usize;
                    if size_bin >= SIZE_BINS {
                        return Err(bad(format!("size bin {size_bin} out of range")));
                    }
                    Some(SlotFace {
                        identity_id,
                        frame_index,
                        size_bin,
                        feature_ref: get_str(r)?,
                    })
                }
                b => return Err(bad(format!("bad slot flag {b}"))),
            });
        }
        sequences.push(InputSequence { video_id, label, slots });
    }
    Ok(SequenceFile {
        sequence_length,
        source,
        sequences,
    })
}
