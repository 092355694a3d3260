//! Binary map container.
//!
//! ```text
//! "PRAMMAP1"                       8-byte magic
//! version: u64                     currently 1
//! section_count: u64
//! (tag: u64, byte_len: u64) * section_count
//! section payloads, in table order
//! crc: u64                         CRC-32 of every byte between magic and crc
//! ```
//!
//! Integers are u64 little-endian. Point positions, centroids and
//! descriptors are f32; camera parameters, poses (row-major rotation matrix
//! plus translation) and builder scalars are f64.

use nalgebra::{Matrix3, Vector2, Vector3};

use super::{
    BuilderConfig, Covisibility, Landmark, LandmarkLabel, MapError, MapPoint, Observation, SceneMap, UpAxis,
    VirtualReferenceFrame,
};
use crate::geometry::{CameraIntrinsics, Pose};

pub const MAP_MAGIC: &[u8; 8] = b"PRAMMAP1";
pub const MAP_VERSION: u64 = 1;

const TAG_HEADER: u64 = 1;
const TAG_LANDMARKS: u64 = 2;
const TAG_POINTS: u64 = 3;
const TAG_DESCRIPTORS: u64 = 4;
const TAG_COVISIBILITY: u64 = 5;
const SECTION_ORDER: [u64; 5] = [TAG_HEADER, TAG_LANDMARKS, TAG_POINTS, TAG_DESCRIPTORS, TAG_COVISIBILITY];

#[derive(Default)]
pub(crate) struct Writer(pub Vec<u8>);

impl Writer {
    pub fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    pub fn f32(&mut self, v: f32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    pub fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    pub fn bytes(&mut self, b: &[u8]) {
        self.0.extend_from_slice(b);
    }
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }
    pub fn take(&mut self, n: usize) -> Result<&'a [u8], String> {
        if self.buf.len() - self.pos < n {
            return Err(format!("short read of {n} bytes at offset {}", self.pos));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    pub fn u64(&mut self) -> Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    pub fn usize(&mut self) -> Result<usize, String> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| format!("count {v} overflows"))
    }
    /// A count of items each at least `min_item_bytes` long; rejects counts
    /// that cannot fit in what remains.
    pub fn count(&mut self, min_item_bytes: usize) -> Result<usize, String> {
        let n = self.usize()?;
        if n.saturating_mul(min_item_bytes.max(1)) > self.remaining() {
            return Err(format!("count {n} exceeds remaining bytes"));
        }
        Ok(n)
    }
    pub fn f32(&mut self) -> Result<f32, String> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    pub fn f64(&mut self) -> Result<f64, String> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
    pub fn finish(&self) -> Result<(), String> {
        if self.remaining() == 0 {
            Ok(())
        } else {
            Err(format!("{} trailing bytes", self.remaining()))
        }
    }
}

/// Splits `magic | body | crc`, checking magic and checksum.
pub(crate) fn open_envelope<'a>(bytes: &'a [u8], magic: &[u8; 8]) -> Result<&'a [u8], MapError> {
    if bytes.len() < 8 || &bytes[..8] != magic {
        return Err(MapError::BadMagic);
    }
    if bytes.len() < 16 {
        return Err(MapError::ChecksumMismatch {
            stored: 0,
            computed: 0,
        });
    }
    let body = &bytes[8..bytes.len() - 8];
    let stored = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().unwrap());
    let computed = crc32fast::hash(body) as u64;
    if stored != computed {
        return Err(MapError::ChecksumMismatch { stored, computed });
    }
    Ok(body)
}

pub(crate) fn seal_envelope(magic: &[u8; 8], body: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(body.len() + 16);
    out.extend_from_slice(magic);
    out.extend_from_slice(body);
    out.extend_from_slice(&(crc32fast::hash(body) as u64).to_le_bytes());
    out
}

/// Encodes a map into the versioned container. Does not validate.
pub fn serialize_map(map: &SceneMap) -> Vec<u8> {
    let mut header = Writer::default();
    header.u64(map.descriptor_dim as u64);
    header.u64(map.landmarks.len() as u64);
    header.u64(map.points.len() as u64);
    let c = &map.build_config;
    header.u64(c.lambda_l as u64);
    header.u64(c.lambda_n as u64);
    header.f64(c.lambda_v);
    header.f64(c.lambda_o);
    header.u64(c.up_axis.index() as u64);
    header.u64(c.enable_pruning as u64);
    header.u64(c.seed);

    let mut lms = Writer::default();
    for l in &map.landmarks {
        lms.u64(l.label as u64);
        lms.f32(l.centroid2d.x);
        lms.f32(l.centroid2d.y);
        lms.u64(l.vrf.source_frame_id);
        let k = &l.vrf.intrinsics;
        for v in [k.fx, k.fy, k.cx, k.cy] {
            lms.f64(v);
        }
        lms.u64(k.width as u64);
        lms.u64(k.height as u64);
        for r in 0..3 {
            for c in 0..3 {
                lms.f64(l.vrf.pose.rotation[(r, c)]);
            }
        }
        for v in l.vrf.pose.translation.iter() {
            lms.f64(*v);
        }
        lms.u64(l.point_ids.len() as u64);
        for id in &l.point_ids {
            lms.u64(*id);
        }
    }

    let mut pts = Writer::default();
    let mut descs = Writer::default();
    for p in &map.points {
        pts.u64(p.id);
        for v in p.position.iter() {
            pts.f32(*v);
        }
        pts.u64(p.landmark_label as u64);
        pts.u64(p.track.len() as u64);
        for o in &p.track {
            pts.u64(o.frame_id);
            pts.u64(o.keypoint_index as u64);
        }
        for v in &p.descriptor {
            descs.f32(*v);
        }
    }

    let mut covis = Writer::default();
    let edges = map.covisibility.edges();
    covis.u64(edges.len() as u64);
    for (a, b) in edges {
        covis.u64(a as u64);
        covis.u64(b as u64);
    }

    let sections = [header.0, lms.0, pts.0, descs.0, covis.0];
    let mut body = Writer::default();
    body.u64(MAP_VERSION);
    body.u64(sections.len() as u64);
    for (tag, s) in SECTION_ORDER.iter().zip(&sections) {
        body.u64(*tag);
        body.u64(s.len() as u64);
    }
    for s in &sections {
        body.bytes(s);
    }
    seal_envelope(MAP_MAGIC, &body.0)
}

/// Decodes and validates a map container.
pub fn deserialize_map(bytes: &[u8]) -> Result<SceneMap, MapError> {
    let body = open_envelope(bytes, MAP_MAGIC)?;
    let mut r = Reader::new(body);
    let version = r.u64().map_err(MapError::Malformed)?;
    if version != MAP_VERSION {
        return Err(MapError::UnsupportedVersion(version));
    }
    let map = decode_body(&mut r).map_err(MapError::Malformed)?;
    map.validate()?;
    Ok(map)
}

fn label(v: u64) -> Result<LandmarkLabel, String> {
    LandmarkLabel::try_from(v).map_err(|_| format!("label {v} out of range"))
}

fn decode_body(r: &mut Reader) -> Result<SceneMap, String> {
    let count = r.usize()?;
    if count != SECTION_ORDER.len() {
        return Err(format!("expected {} sections, found {count}", SECTION_ORDER.len()));
    }
    let mut lens = Vec::new();
    for expected in SECTION_ORDER {
        let tag = r.u64()?;
        if tag != expected {
            return Err(format!("expected section tag {expected}, found {tag}"));
        }
        lens.push(r.usize()?);
    }
    let mut sections = Vec::new();
    for len in lens {
        sections.push(Reader::new(r.take(len)?));
    }
    r.finish()?;
    let [mut h, mut l, mut p, mut d, mut c]: [Reader; 5] = sections.try_into().ok().unwrap();

    let descriptor_dim = h.usize()?;
    let num_landmarks = h.usize()?;
    let num_points = h.usize()?;
    let build_config = BuilderConfig {
        lambda_l: h.usize()?,
        lambda_n: h.usize()?,
        lambda_v: h.f64()?,
        lambda_o: h.f64()?,
        up_axis: UpAxis::from_index(h.u64()?).ok_or("bad up axis")?,
        enable_pruning: match h.u64()? {
            0 => false,
            1 => true,
            v => return Err(format!("bad pruning flag {v}")),
        },
        seed: h.u64()?,
    };
    h.finish()?;

    let mut landmarks = Vec::with_capacity(num_landmarks.min(1 << 20));
    for _ in 0..num_landmarks {
        let lab = label(l.u64()?)?;
        let centroid2d = Vector2::new(l.f32()?, l.f32()?);
        let source_frame_id = l.u64()?;
        let (fx, fy, cx, cy) = (l.f64()?, l.f64()?, l.f64()?, l.f64()?);
        let width = u32::try_from(l.u64()?).map_err(|_| "width overflow")?;
        let height = u32::try_from(l.u64()?).map_err(|_| "height overflow")?;
        let mut rot = Matrix3::zeros();
        for i in 0..3 {
            for j in 0..3 {
                rot[(i, j)] = l.f64()?;
            }
        }
        let t = Vector3::new(l.f64()?, l.f64()?, l.f64()?);
        let n = l.count(8)?;
        let point_ids = (0..n).map(|_| l.u64()).collect::<Result<Vec<_>, _>>()?;
        landmarks.push(Landmark {
            label: lab,
            point_ids,
            vrf: VirtualReferenceFrame {
                intrinsics: CameraIntrinsics {
                    fx,
                    fy,
                    cx,
                    cy,
                    width,
                    height,
                },
                pose: Pose::new(rot, t),
                source_frame_id,
            },
            centroid2d,
        });
    }
    l.finish()?;

    let mut points = Vec::with_capacity(num_points.min(1 << 24));
    for _ in 0..num_points {
        let id = p.u64()?;
        let position = Vector3::new(p.f32()?, p.f32()?, p.f32()?);
        let landmark_label = label(p.u64()?)?;
        let n = p.count(16)?;
        let track = (0..n)
            .map(|_| {
                Ok(Observation {
                    frame_id: p.u64()?,
                    keypoint_index: p.usize()?,
                })
            })
            .collect::<Result<Vec<_>, String>>()?;
        let descriptor = (0..descriptor_dim)
            .map(|_| d.f32())
            .collect::<Result<Vec<_>, _>>()?;
        points.push(MapPoint {
            id,
            position,
            descriptor,
            track,
            landmark_label,
        });
    }
    p.finish()?;
    d.finish()?;

    let ne = c.count(16)?;
    let mut edges = Vec::with_capacity(ne);
    for _ in 0..ne {
        let (a, b) = (label(c.u64()?)?, label(c.u64()?)?);
        if a == 0 || b == 0 || a as usize > num_landmarks || b as usize > num_landmarks || a >= b {
            return Err(format!("invalid covisibility edge ({a}, {b})"));
        }
        edges.push((a, b));
    }
    c.finish()?;

    Ok(SceneMap {
        landmarks,
        points,
        covisibility: Covisibility::from_edges(num_landmarks, edges),
        build_config,
        descriptor_dim,
    })
}
