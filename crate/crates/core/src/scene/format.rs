//! "PFD1" container: little-endian, one record per file.
//!
//! ```text
//! magic "PFD1" | kind u8 | version u16 | body
//! ```
//! Sequences store per-frame odometry, camera pose, u16 semantics, f32
//! depth and run-length encoded instance masks. Predictions store the
//! class and instance planes of a panoptic map plus per-instance confidence.

use std::path::Path;

use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};
use crate::geometry::{Extrinsics, Intrinsics, Odometry, RigidTransform};
use crate::maps::{ClassSet, Grid, Mask, PanopticMap};

use super::{Frame, Instance, SceneSequence};

pub const SEQUENCE_MAGIC: &[u8; 4] = b"PFD1";
const VERSION: u16 = 1;
const KIND_SEQUENCE: u8 = 1;
const KIND_PREDICTION: u8 = 2;

/// A forecast panoptic map with a confidence per predicted instance id.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub panoptic: PanopticMap,
    pub confidence: Vec<(u16, f64)>,
}

fn header(w: &mut Writer, kind: u8) {
    w.bytes(SEQUENCE_MAGIC);
    w.u8(kind);
    w.u16(VERSION);
}

fn read_header(r: &mut Reader<'_>, kind: u8) -> Result<()> {
    let magic = r.take(4, "magic")?;
    if magic != SEQUENCE_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: format!("bad magic {magic:?}, expected {SEQUENCE_MAGIC:?}"),
        });
    }
    let got = r.u8("record kind")?;
    if got != kind {
        return Err(Error::Format {
            offset: 4,
            message: format!("record kind {got}, expected {kind}"),
        });
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(Error::Format {
            offset: 5,
            message: format!("unsupported version {version}"),
        });
    }
    Ok(())
}

fn write_mask(w: &mut Writer, m: &Mask) {
    let mut runs = Vec::new();
    let (mut cur, mut len) = (false, 0u32);
    for &b in m.data() {
        if b != cur {
            runs.push(len);
            cur = b;
            len = 0;
        }
        len += 1;
    }
    runs.push(len);
    w.usize(runs.len());
    for r in runs {
        w.u32(r);
    }
}

fn read_mask(r: &mut Reader<'_>, h: usize, w: usize) -> Result<Mask> {
    let at = r.offset();
    let n = r.count(4, "run count")?;
    let mut bits = Vec::with_capacity(h * w);
    let mut on = false;
    for _ in 0..n {
        let len = r.u32("run length")? as usize;
        if bits.len() + len > h * w {
            return Err(r.error("mask runs overflow the frame"));
        }
        bits.extend(std::iter::repeat_n(on, len));
        on = !on;
    }
    if bits.len() != h * w {
        return Err(Error::Format {
            offset: at,
            message: format!("mask runs cover {} of {} pixels", bits.len(), h * w),
        });
    }
    Grid::from_vec(h, w, bits)
}

fn write_transform(w: &mut Writer, t: &RigidTransform) {
    for v in t.to_row_major() {
        w.f64(v);
    }
}

fn read_transform(r: &mut Reader<'_>) -> Result<RigidTransform> {
    let at = r.offset();
    let mut m = [0.0; 16];
    for v in &mut m {
        *v = r.f64("transform")?;
    }
    RigidTransform::from_row_major(&m).map_err(|e| Error::Format {
        offset: at,
        message: e.to_string(),
    })
}

pub fn encode_sequence(seq: &SceneSequence) -> Vec<u8> {
    let mut w = Writer::default();
    header(&mut w, KIND_SEQUENCE);
    for names in [&seq.classes.stuff, &seq.classes.things] {
        w.usize(names.len());
        for n in names {
            w.str(n);
        }
    }
    let k = &seq.intrinsics;
    for v in [k.fx, k.fy, k.cx, k.cy] {
        w.f64(v);
    }
    write_transform(&mut w, &seq.extrinsics.0);
    let (h, wd) = seq.dims();
    w.usize(h);
    w.usize(wd);
    w.usize(seq.frames.len());
    for (f, pose) in seq.frames.iter().zip(&seq.poses) {
        w.f64(f.odometry.v);
        w.f64(f.odometry.yaw_rate);
        w.f64(f.odometry.dt);
        write_transform(&mut w, pose);
        for &c in f.semantic.data() {
            w.u16(c);
        }
        for &d in f.depth.data() {
            w.f32(d);
        }
        w.usize(f.instances.len());
        for inst in &f.instances {
            w.u16(inst.id);
            w.u16(inst.class);
            write_mask(&mut w, &inst.mask);
        }
    }
    w.buf
}

fn read_names(r: &mut Reader<'_>) -> Result<Vec<String>> {
    let n = r.count(8, "class count")?;
    (0..n).map(|_| r.str("class name")).collect()
}

pub fn decode_sequence(buf: &[u8]) -> Result<SceneSequence> {
    let mut r = Reader::new(buf);
    read_header(&mut r, KIND_SEQUENCE)?;
    let classes = ClassSet {
        stuff: read_names(&mut r)?,
        things: read_names(&mut r)?,
    };
    let at = r.offset();
    let (fx, fy, cx, cy) = (r.f64("fx")?, r.f64("fy")?, r.f64("cx")?, r.f64("cy")?);
    let intrinsics = Intrinsics::new(fx, fy, cx, cy).map_err(|e| Error::Format {
        offset: at,
        message: e.to_string(),
    })?;
    let extrinsics = Extrinsics(read_transform(&mut r)?);
    let h = r.u64("height")? as usize;
    let w = r.u64("width")? as usize;
    let plane = h
        .checked_mul(w)
        .filter(|&n| n <= buf.len())
        .ok_or_else(|| r.error(format!("implausible frame size {h}x{w}")))?;
    let n = r.count(plane * 6, "frame count")?;
    let mut frames = Vec::with_capacity(n);
    let mut poses = Vec::with_capacity(n);
    for _ in 0..n {
        let at = r.offset();
        let odometry = Odometry::new(r.f64("speed")?, r.f64("yaw rate")?, r.f64("dt")?).map_err(|e| Error::Format {
            offset: at,
            message: e.to_string(),
        })?;
        poses.push(read_transform(&mut r)?);
        let sem = (0..plane).map(|_| r.u16("semantics")).collect::<Result<Vec<_>>>()?;
        let depth = (0..plane).map(|_| r.f32("depth")).collect::<Result<Vec<_>>>()?;
        let count = r.count(12, "instance count")?;
        let mut instances = Vec::with_capacity(count);
        for _ in 0..count {
            let id = r.u16("instance id")?;
            let class = r.u16("instance class")?;
            let mask = read_mask(&mut r, h, w)?;
            instances.push(Instance { id, class, mask });
        }
        frames.push(Frame {
            semantic: Grid::from_vec(h, w, sem)?,
            depth: Grid::from_vec(h, w, depth)?,
            instances,
            odometry,
        });
    }
    r.finish()?;
    Ok(SceneSequence {
        classes,
        intrinsics,
        extrinsics,
        frames,
        poses,
    })
}

pub fn save_sequence(seq: &SceneSequence, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_sequence(seq))?;
    Ok(())
}

pub fn load_sequence(path: impl AsRef<Path>) -> Result<SceneSequence> {
    decode_sequence(&std::fs::read(path)?)
}

pub fn encode_prediction(p: &Prediction) -> Vec<u8> {
    let mut w = Writer::default();
    header(&mut w, KIND_PREDICTION);
    let (h, wd) = p.panoptic.dims();
    w.usize(h);
    w.usize(wd);
    for &c in p.panoptic.class.data() {
        w.u16(c);
    }
    for &c in p.panoptic.instance.data() {
        w.u16(c);
    }
    w.usize(p.confidence.len());
    for &(id, c) in &p.confidence {
        w.u16(id);
        w.f64(c);
    }
    w.buf
}

pub fn decode_prediction(buf: &[u8]) -> Result<Prediction> {
    let mut r = Reader::new(buf);
    read_header(&mut r, KIND_PREDICTION)?;
    let h = r.u64("height")? as usize;
    let w = r.u64("width")? as usize;
    let plane = h
        .checked_mul(w)
        .filter(|&n| n <= buf.len())
        .ok_or_else(|| r.error(format!("implausible frame size {h}x{w}")))?;
    let class = (0..plane).map(|_| r.u16("class plane")).collect::<Result<Vec<_>>>()?;
    let inst = (0..plane).map(|_| r.u16("instance plane")).collect::<Result<Vec<_>>>()?;
    let n = r.count(10, "confidence count")?;
    let confidence = (0..n)
        .map(|_| Ok((r.u16("instance id")?, r.f64("confidence")?)))
        .collect::<Result<Vec<_>>>()?;
    r.finish()?;
    Ok(Prediction {
        panoptic: PanopticMap::new(Grid::from_vec(h, w, class)?, Grid::from_vec(h, w, inst)?)?,
        confidence,
    })
}

pub fn save_prediction(p: &Prediction, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_prediction(p))?;
    Ok(())
}

pub fn load_prediction(path: impl AsRef<Path>) -> Result<Prediction> {
    decode_prediction(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate, SceneSpec};

    fn sample() -> SceneSequence {
        generate(&SceneSpec {
            height: 16,
            width: 24,
            focal: 14.0,
            frames: 3,
            ..SceneSpec::default()
        })
        .unwrap()
    }

    #[test]
    fn sequence_round_trip_is_bitwise() {
        let seq = sample();
        let bytes = encode_sequence(&seq);
        let back = decode_sequence(&bytes).unwrap();
        assert_eq!(back, seq);
        assert_eq!(encode_sequence(&back), bytes);
    }

    #[test]
    fn corrupt_inputs_report_offsets() {
        let bytes = encode_sequence(&sample());
        match decode_sequence(&[]) {
            Err(Error::Format { offset: 0, .. }) => {}
            other => panic!("{other:?}"),
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_sequence(&bad), Err(Error::Format { offset: 0, .. })));
        let cut = &bytes[..bytes.len() - 3];
        match decode_sequence(cut) {
            Err(Error::Format { offset, .. }) => assert!(offset > 0),
            other => panic!("{other:?}"),
        }
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(decode_sequence(&long), Err(Error::Format { .. })));
    }

    #[test]
    fn prediction_round_trip_and_kind_check() {
        let seq = sample();
        let p = Prediction {
            panoptic: seq.frames[0].panoptic(),
            confidence: vec![(1, 0.75), (2, 0.5)],
        };
        let bytes = encode_prediction(&p);
        assert_eq!(decode_prediction(&bytes).unwrap(), p);
        assert!(matches!(decode_sequence(&bytes), Err(Error::Format { offset: 4, .. })));
    }

    #[test]
    fn rle_handles_leading_set_pixels() {
        let mut m = Mask::filled(2, 3, false);
        m.set(0, 0, true);
        m.set(1, 2, true);
        let mut w = Writer::default();
        write_mask(&mut w, &m);
        let back = read_mask(&mut Reader::new(&w.buf), 2, 3).unwrap();
        assert_eq!(back, m);
    }
}
