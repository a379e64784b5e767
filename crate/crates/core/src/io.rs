//! File formats: VGRD volumes, STL meshes, 16-bit PGM frames with a JSON manifest.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{ImageStack, VoxelGrid};
use crate::mesh::{TriMesh, Vec3};
use crate::optics::OpticalConfig;
use crate::printsim::{self, PrintSession, Schedule, SessionOptions};

pub const VOLUME_MAGIC: &[u8; 4] = b"VGRD";
pub const VOLUME_VERSION: u16 = 1;
pub const VOLUME_HEADER_LEN: usize = 4 + 2 + 12 + 24 + 24;
pub const STL_MERGE_TOL_MM: f64 = 1e-6;

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(tmp.path(), e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(tmp.path(), e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_atomic(path, s.as_bytes())
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_slice(&read_file(path)?)?)
}

fn take(bytes: &[u8], offset: usize, len: usize) -> Result<&[u8]> {
    bytes.get(offset..offset + len).ok_or(Error::Truncated {
        offset,
        expected: len,
        found: bytes.len().saturating_sub(offset),
    })
}

fn f64_at(b: &[u8], at: usize) -> f64 {
    f64::from_le_bytes(b[at..at + 8].try_into().unwrap())
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().unwrap())
}

pub fn encode_volume(grid: &VoxelGrid) -> Result<Vec<u8>> {
    let dims = grid.dims();
    let mut dims32 = [0u32; 3];
    for a in 0..3 {
        dims32[a] = u32::try_from(dims[a])
            .map_err(|_| Error::InvalidInput(format!("dimension {} exceeds u32", dims[a])))?;
    }
    let n = dims.iter().product::<usize>();
    let mut out = Vec::with_capacity(VOLUME_HEADER_LEN + 4 * n);
    out.extend_from_slice(VOLUME_MAGIC);
    out.extend_from_slice(&VOLUME_VERSION.to_le_bytes());
    for d in dims32 {
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in grid.spacing_mm.iter().chain(&grid.origin_mm) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    // values are [z][y][x], so logical iteration order is already x-fastest
    for v in grid.values.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_volume(bytes: &[u8]) -> Result<VoxelGrid> {
    let head = take(bytes, 0, VOLUME_HEADER_LEN)?;
    if &head[..4] != VOLUME_MAGIC {
        return Err(Error::BadMagic {
            expected: "VGRD".into(),
            found: String::from_utf8_lossy(&head[..4]).into_owned(),
        });
    }
    let version = u16::from_le_bytes([head[4], head[5]]);
    if version != VOLUME_VERSION {
        return Err(Error::Malformed(format!("unsupported volume version {version}")));
    }
    let dims = [u32_at(head, 6), u32_at(head, 10), u32_at(head, 14)].map(|d| d as usize);
    let spacing = [f64_at(head, 18), f64_at(head, 26), f64_at(head, 34)];
    let origin = [f64_at(head, 42), f64_at(head, 50), f64_at(head, 58)];
    let payload = dims
        .iter()
        .try_fold(4usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Malformed(format!("dims {dims:?} overflow")))?;
    let found = bytes.len() - VOLUME_HEADER_LEN;
    if found != payload {
        return Err(Error::Malformed(format!(
            "payload is {found} bytes, dims {dims:?} need {payload}"
        )));
    }
    let values: Vec<f32> = bytes[VOLUME_HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let values = Array3::from_shape_vec((dims[2], dims[1], dims[0]), values)
        .map_err(|e| Error::Malformed(e.to_string()))?;
    VoxelGrid::from_values(values, spacing, origin)
}

pub fn write_volume(path: &Path, grid: &VoxelGrid) -> Result<()> {
    write_atomic(path, &encode_volume(grid)?)
}

pub fn read_volume(path: &Path) -> Result<VoxelGrid> {
    decode_volume(&read_file(path)?)
}

/// Binary STL; coordinates are narrowed to f32.
pub fn encode_stl_binary(mesh: &TriMesh) -> Vec<u8> {
    let mut out = Vec::with_capacity(84 + 50 * mesh.triangles.len());
    let mut header = [0u8; 80];
    let tag = b"binary STL";
    header[..tag.len()].copy_from_slice(tag);
    out.extend_from_slice(&header);
    out.extend_from_slice(&(mesh.triangles.len() as u32).to_le_bytes());
    for t in 0..mesh.triangles.len() {
        let tri = mesh.triangle(t);
        for c in unit_normal(&tri) {
            out.extend_from_slice(&(c as f32).to_le_bytes());
        }
        for p in tri {
            for c in p {
                out.extend_from_slice(&(c as f32).to_le_bytes());
            }
        }
        out.extend_from_slice(&[0, 0]);
    }
    out
}

pub fn encode_stl_ascii(mesh: &TriMesh, name: &str) -> String {
    let mut s = format!("solid {name}\n");
    for t in 0..mesh.triangles.len() {
        let tri = mesh.triangle(t);
        let n = unit_normal(&tri).map(|c| c as f32);
        s.push_str(&format!("  facet normal {:e} {:e} {:e}\n    outer loop\n", n[0], n[1], n[2]));
        for p in tri {
            let p = p.map(|c| c as f32);
            s.push_str(&format!("      vertex {:e} {:e} {:e}\n", p[0], p[1], p[2]));
        }
        s.push_str("    endloop\n  endfacet\n");
    }
    s.push_str(&format!("endsolid {name}\n"));
    s
}

fn unit_normal(t: &[Vec3; 3]) -> Vec3 {
    let u = [0, 1, 2].map(|a| t[1][a] - t[0][a]);
    let v = [0, 1, 2].map(|a| t[2][a] - t[0][a]);
    let n = [u[1] * v[2] - u[2] * v[1], u[2] * v[0] - u[0] * v[2], u[0] * v[1] - u[1] * v[0]];
    let l = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
    if l > 0.0 {
        n.map(|c| c / l)
    } else {
        [0.0; 3]
    }
}

/// Triangle soup from STL bytes, binary or ASCII.
pub fn parse_stl_soup(bytes: &[u8]) -> Result<Vec<[Vec3; 3]>> {
    if bytes.len() >= 84 {
        let count = u32_at(bytes, 80) as usize;
        if 84 + 50 * count == bytes.len() {
            return parse_binary(bytes, count);
        }
    }
    let text = bytes.trim_ascii_start();
    if text.starts_with(b"solid") && std::str::from_utf8(bytes).is_ok() {
        return parse_ascii(std::str::from_utf8(text).unwrap());
    }
    let head = take(bytes, 0, 84)?;
    let count = u32_at(head, 80) as usize;
    let have = (bytes.len() - 84) / 50;
    if have < count {
        let offset = 84 + 50 * have;
        return Err(Error::Truncated {
            offset,
            expected: 50,
            found: bytes.len() - offset,
        });
    }
    Err(Error::Malformed(format!(
        "STL count field says {count} triangles but {} bytes of records follow",
        bytes.len() - 84
    )))
}

fn parse_binary(bytes: &[u8], count: usize) -> Result<Vec<[Vec3; 3]>> {
    let f = |at: usize| f32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as f64;
    let mut soup = Vec::with_capacity(count);
    for t in 0..count {
        let base = 84 + 50 * t + 12;
        let tri = [0, 1, 2].map(|v| [0, 1, 2].map(|a| f(base + 12 * v + 4 * a)));
        if tri.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite("STL vertex"));
        }
        soup.push(tri);
    }
    Ok(soup)
}

fn parse_ascii(text: &str) -> Result<Vec<[Vec3; 3]>> {
    let mut soup = Vec::new();
    let mut current: Vec<Vec3> = Vec::with_capacity(3);
    let mut closed = false;
    for (line_no, line) in text.lines().enumerate() {
        let mut words = line.split_whitespace();
        match words.next() {
            Some("vertex") => {
                // STL coordinates are single precision in both encodings
                let coords: Vec<f64> = words
                    .map(|w| w.parse::<f32>().map(f64::from))
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| Error::Malformed(format!("line {}: {e}", line_no + 1)))?;
                if coords.len() != 3 || coords.iter().any(|c| !c.is_finite()) {
                    return Err(Error::Malformed(format!("line {}: bad vertex", line_no + 1)));
                }
                current.push([coords[0], coords[1], coords[2]]);
            }
            Some("endloop") => {
                if current.len() != 3 {
                    return Err(Error::Malformed(format!(
                        "line {}: facet with {} vertices",
                        line_no + 1,
                        current.len()
                    )));
                }
                soup.push([current[0], current[1], current[2]]);
                current.clear();
            }
            Some("endsolid") => {
                closed = true;
                break;
            }
            _ => {}
        }
    }
    if !closed || !current.is_empty() {
        return Err(Error::Malformed("ASCII STL ends before endsolid".into()));
    }
    Ok(soup)
}

pub fn parse_stl(bytes: &[u8]) -> Result<TriMesh> {
    let mesh = TriMesh::from_soup(&parse_stl_soup(bytes)?, STL_MERGE_TOL_MM)?;
    if !mesh.is_watertight() {
        log::warn!("STL mesh is not watertight");
    }
    Ok(mesh)
}

pub fn read_stl(path: &Path) -> Result<TriMesh> {
    parse_stl(&read_file(path)?)
}

pub fn write_stl(path: &Path, mesh: &TriMesh) -> Result<()> {
    write_atomic(path, &encode_stl_binary(mesh))
}

pub fn write_stl_ascii(path: &Path, mesh: &TriMesh) -> Result<()> {
    let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("mesh");
    write_atomic(path, encode_stl_ascii(mesh, name).as_bytes())
}

/// Binary P5 with maxval 65535 (big-endian samples).
pub fn encode_pgm16(img: &Array2<u16>) -> Vec<u8> {
    let (h, w) = img.dim();
    let mut out = format!("P5\n{w} {h}\n65535\n").into_bytes();
    out.reserve(2 * w * h);
    for v in img.iter() {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out
}

pub fn decode_pgm16(bytes: &[u8]) -> Result<Array2<u16>> {
    let mut pos = 0;
    let mut token = || -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Truncated {
                offset: pos,
                expected: 1,
                found: 0,
            });
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = token()?;
    if magic != "P5" {
        return Err(Error::BadMagic {
            expected: "P5".into(),
            found: magic,
        });
    }
    let num = |s: String| s.parse::<usize>().map_err(|e| Error::Malformed(format!("PGM header: {e}")));
    let w = num(token()?)?;
    let h = num(token()?)?;
    let maxval = num(token()?)?;
    if maxval != 65535 {
        return Err(Error::Malformed(format!("PGM maxval {maxval}, expected 65535")));
    }
    let start = pos + 1;
    let need = w
        .checked_mul(h)
        .and_then(|n| n.checked_mul(2))
        .ok_or_else(|| Error::Malformed("PGM size overflows".into()))?;
    let data = take(bytes, start, need)?;
    let px: Vec<u16> = data.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect();
    Array2::from_shape_vec((h, w), px).map_err(|e| Error::Malformed(e.to_string()))
}

pub fn write_pgm16(path: &Path, img: &Array2<u16>) -> Result<()> {
    write_atomic(path, &encode_pgm16(img))
}

pub fn read_pgm16(path: &Path) -> Result<Array2<u16>> {
    decode_pgm16(&read_file(path)?)
}

/// Describes a directory of 16-bit frames.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameManifest {
    pub count: usize,
    pub angles_deg: Vec<f64>,
    pub rows: usize,
    pub cols: usize,
    pub col_pitch_mm: f64,
    pub row_pitch_mm: f64,
    pub col_center: f64,
    pub row_center: f64,
    pub bit_depth: u32,
    /// Intensity represented by one count.
    pub value_scale: f64,
    pub config_hash: String,
    pub files: Vec<String>,
    #[serde(default, skip_serializing_if = "serde_json::Map::is_empty")]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

pub const MANIFEST_NAME: &str = "manifest.json";

impl FrameManifest {
    /// Refuses a manifest written under a different config unless `force`.
    pub fn check_config(&self, cfg: &OpticalConfig, force: bool) -> Result<()> {
        let h = cfg.hash();
        if self.config_hash != h {
            if force {
                log::warn!("config hash mismatch ignored ({} vs {h})", self.config_hash);
            } else {
                return Err(Error::HashMismatch {
                    manifest: self.config_hash.clone(),
                    config: h,
                });
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.count != self.angles_deg.len() || self.count != self.files.len() {
            return Err(Error::Malformed(format!(
                "manifest count {} but {} angles and {} files",
                self.count,
                self.angles_deg.len(),
                self.files.len()
            )));
        }
        if self.angles_deg.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Malformed("manifest angles are not strictly increasing".into()));
        }
        if self.bit_depth != 16 {
            return Err(Error::Malformed(format!("bit depth {}", self.bit_depth)));
        }
        Ok(())
    }
}

/// Quantizes `stack` to 16 bits (negative values clip to 0) and writes frames plus manifest.
pub fn write_frames(
    dir: &Path,
    stack: &ImageStack,
    cfg: &OpticalConfig,
    extra: serde_json::Map<String, serde_json::Value>,
) -> Result<FrameManifest> {
    stack.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let peak = stack
        .frames
        .iter()
        .flat_map(|f| f.iter())
        .fold(0.0f32, |m, &v| m.max(v));
    let scale = if peak > 0.0 { peak as f64 / 65535.0 } else { 1.0 };
    let width = stack.len().max(1).to_string().len().max(4);
    let mut files = Vec::with_capacity(stack.len());
    for (i, f) in stack.frames.iter().enumerate() {
        let name = format!("frame_{i:0width$}.pgm");
        let q = f.mapv(|v| (v as f64 / scale).round().clamp(0.0, 65535.0) as u16);
        write_pgm16(&dir.join(&name), &q)?;
        files.push(name);
    }
    let (rows, cols) = stack.frame_dims();
    let manifest = FrameManifest {
        count: stack.len(),
        angles_deg: stack.angles_deg.clone(),
        rows,
        cols,
        col_pitch_mm: stack.col_pitch_mm,
        row_pitch_mm: stack.row_pitch_mm,
        col_center: stack.col_center,
        row_center: stack.row_center,
        bit_depth: 16,
        value_scale: scale,
        config_hash: cfg.hash(),
        files,
        extra,
    };
    write_json(&dir.join(MANIFEST_NAME), &manifest)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<FrameManifest> {
    let m: FrameManifest = read_json(&dir.join(MANIFEST_NAME))?;
    m.validate()?;
    Ok(m)
}

pub fn read_frames(dir: &Path) -> Result<(ImageStack, FrameManifest)> {
    let m = read_manifest(dir)?;
    let mut frames = Vec::with_capacity(m.count);
    for name in &m.files {
        let path: PathBuf = dir.join(name);
        let img = read_pgm16(&path)?;
        if img.dim() != (m.rows, m.cols) {
            return Err(Error::Malformed(format!("{} is {:?}, manifest says {:?}", path.display(), img.dim(), (m.rows, m.cols))));
        }
        frames.push(img.mapv(|v| (v as f64 * m.value_scale) as f32));
    }
    let stack = ImageStack {
        frames,
        angles_deg: m.angles_deg.clone(),
        col_pitch_mm: m.col_pitch_mm,
        row_pitch_mm: m.row_pitch_mm,
        col_center: m.col_center,
        row_center: m.row_center,
    };
    Ok((stack, m))
}

/// Maps `[y][x]` values linearly onto 0..=65535 over their own range.
pub fn to_u16_image(img: &Array2<f64>) -> Array2<u16> {
    let lo = img.iter().cloned().fold(f64::INFINITY, f64::min).min(0.0);
    let hi = img.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    img.mapv(|v| ((v - lo) / span * 65535.0).round().clamp(0.0, 65535.0) as u16)
}

/// `session.json` of a saved print session.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub config: OpticalConfig,
    pub config_hash: String,
    pub options: SessionOptions,
    pub schedule: Schedule,
    pub d_gel: f64,
    pub ramp_width_frac: f64,
    pub rendered_rotations: Vec<usize>,
}

pub const SESSION_NAME: &str = "session.json";
pub const SESSION_FRAMES_DIR: &str = "frames";
pub const SESSION_PART: &str = "part.vgrd";
pub const SESSION_ROTATION_DOSE: &str = "rotation_dose.vgrd";
pub const SESSION_TRUTH_GEL: &str = "truth_gel.vgrd";
pub const SESSION_TRUTH_MESH: &str = "truth.stl";

/// Writes frames, the design mask, one rotation's dose, the final truth gel and its surface.
pub fn save_session(dir: &Path, session: &PrintSession, opts: &SessionOptions) -> Result<SessionRecord> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut extra = serde_json::Map::new();
    extra.insert("kind".into(), "camera".into());
    write_frames(&dir.join(SESSION_FRAMES_DIR), &session.frames, &session.cfg, extra)?;
    write_volume(&dir.join(SESSION_PART), &session.part)?;
    write_volume(&dir.join(SESSION_ROTATION_DOSE), &session.rotation_dose)?;
    let gel = session.truth_gel(session.final_rotation());
    write_volume(&dir.join(SESSION_TRUTH_GEL), &gel)?;
    write_stl(&dir.join(SESSION_TRUTH_MESH), &crate::isosurface::extract(&gel, 0.5))?;
    let record = SessionRecord {
        config: session.cfg.clone(),
        config_hash: session.cfg.hash(),
        options: opts.clone(),
        schedule: session.schedule.clone(),
        d_gel: session.d_gel,
        ramp_width_frac: session.ramp_width_frac,
        rendered_rotations: session.rendered_rotations.clone(),
    };
    write_json(&dir.join(SESSION_NAME), &record)?;
    Ok(record)
}

pub fn read_session_record(dir: &Path) -> Result<SessionRecord> {
    read_json(&dir.join(SESSION_NAME))
}

/// Binary truth gel of a saved session after rotation `r`.
pub fn session_truth_gel(dir: &Path, record: &SessionRecord, r: usize) -> Result<VoxelGrid> {
    let dose = read_volume(&dir.join(SESSION_ROTATION_DOSE))?;
    let k = record.schedule.exposed_rotations(r) as f32;
    let mut total = dose;
    total.values.mapv_inplace(|v| v * k);
    let mut gel = printsim::gel_field(&total, record.d_gel, record.ramp_width_frac)?;
    gel.values.mapv_inplace(|v| f32::from(u8::from(v >= 0.5)));
    Ok(gel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::box_mesh;
    use proptest::prelude::*;

    #[test]
    fn volume_layout() {
        let mut g = VoxelGrid::zeros([2, 2, 2], [0.5, 0.25, 2.0], [-1.0, 0.0, 3.0]);
        for (i, v) in g.values.iter_mut().enumerate() {
            *v = i as f32;
        }
        g.values[[0, 0, 1]] = 100.0;
        let b = encode_volume(&g).unwrap();
        assert_eq!(b.len(), 4 + 2 + 12 + 24 + 24 + 32);
        assert_eq!(&b[..4], b"VGRD");
        assert_eq!(&b[4..6], &[1, 0]);
        assert_eq!(&b[6..10], &[2, 0, 0, 0]);
        assert_eq!(f64_at(&b, 18), 0.5);
        assert_eq!(f64_at(&b, 42), -1.0);
        assert_eq!(f64_at(&b, 58), 3.0);
        // x-fastest: the second payload float is (x=1, y=0, z=0)
        assert_eq!(f32::from_le_bytes(b[70..74].try_into().unwrap()), 100.0);
        assert_eq!(decode_volume(&b).unwrap(), g);
    }

    #[test]
    fn volume_errors() {
        let g = VoxelGrid::zeros([3, 2, 1], [1.0; 3], [0.0; 3]);
        let mut b = encode_volume(&g).unwrap();
        assert!(matches!(decode_volume(&b[..b.len() - 1]), Err(Error::Malformed(_))));
        assert!(matches!(decode_volume(&b[..10]), Err(Error::Truncated { .. })));
        b[0] = b'X';
        assert!(matches!(decode_volume(&b), Err(Error::BadMagic { .. })));
        let mut huge = encode_volume(&g).unwrap();
        huge[6..18].copy_from_slice(&[0xff; 12]);
        assert!(decode_volume(&huge).is_err());
    }

    #[test]
    fn random_volume_round_trip_is_bit_exact() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut g = VoxelGrid::zeros([64, 64, 64], [0.155, 0.155, 0.2], [-5.0, -5.0, -6.4]);
        g.values.mapv_inplace(|_| f32::from_bits(rng.random::<u32>() & 0x7f7f_ffff));
        let back = decode_volume(&encode_volume(&g).unwrap()).unwrap();
        assert!(g.values.iter().zip(back.values.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn cube_binary_and_ascii() {
        let cube = box_mesh([0.0; 3], [1.0; 3]);
        let bin = parse_stl(&encode_stl_binary(&cube)).unwrap();
        assert_eq!(bin.triangles.len(), 12);
        assert_eq!(bin.vertices.len(), 8);
        assert!(bin.is_watertight());
        let ascii = parse_stl(encode_stl_ascii(&cube, "cube").as_bytes()).unwrap();
        assert_eq!(ascii, bin);
    }

    #[test]
    fn stl_truncation_names_offset() {
        let cube = box_mesh([0.0; 3], [1.0; 3]);
        let mut b = encode_stl_binary(&cube);
        b.truncate(84 + 50 * 7 + 20);
        match parse_stl(&b) {
            Err(Error::Truncated { offset, .. }) => assert_eq!(offset, 84 + 50 * 7),
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_stl(&[0u8; 30]), Err(Error::Truncated { offset: 0, .. })));
        let mut extra = encode_stl_binary(&cube);
        extra.extend_from_slice(&[0; 60]);
        assert!(matches!(parse_stl(&extra), Err(Error::Malformed(_))));
        assert!(parse_stl(b"solid x\n facet normal 0 0 1\n outer loop\n vertex 0 0\n").is_err());
    }

    #[test]
    fn pgm_round_trip_with_comment() {
        let img = Array2::from_shape_fn((3, 5), |(r, c)| (r * 20000 + c * 7) as u16);
        let b = encode_pgm16(&img);
        assert_eq!(decode_pgm16(&b).unwrap(), img);
        let mut commented = b"P5\n# cam\n5 3\n65535\n".to_vec();
        commented.extend_from_slice(&b[b.len() - 30..]);
        assert_eq!(decode_pgm16(&commented).unwrap(), img);
        assert!(matches!(decode_pgm16(b"P2\n1 1\n65535\n"), Err(Error::BadMagic { .. })));
        assert!(decode_pgm16(&b[..b.len() - 1]).is_err());
    }

    #[test]
    fn frames_round_trip_and_hash_check() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = ImageStack::new(4, 6, vec![0.0, 2.0, 4.0], 0.155, 0.2);
        for (i, f) in s.frames.iter_mut().enumerate() {
            f.indexed_iter_mut().for_each(|((r, c), v)| *v = (i + r * c) as f32 * 0.1);
        }
        let cfg = OpticalConfig::bpagda();
        write_frames(dir.path(), &s, &cfg, Default::default()).unwrap();
        let (back, m) = read_frames(dir.path()).unwrap();
        assert_eq!(back.angles_deg, s.angles_deg);
        let peak = 1.7;
        for (a, b) in s.frames.iter().zip(&back.frames) {
            assert!(a.iter().zip(b.iter()).all(|(x, y)| (x - y).abs() <= peak / 65535.0));
        }
        assert!(m.check_config(&cfg, false).is_ok());
        let other = OpticalConfig::dudma();
        assert!(matches!(m.check_config(&other, false), Err(Error::HashMismatch { .. })));
        assert!(m.check_config(&other, true).is_ok());
    }

    #[test]
    fn atomic_write_replaces() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.bin");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two!").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"two!");
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
        assert!(matches!(read_volume(&dir.path().join("missing")), Err(Error::Io { .. })));
    }

    proptest! {
        #[test]
        fn stl_fuzz_never_panics(bytes in prop::collection::vec(any::<u8>(), 0..400)) {
            let _ = parse_stl(&bytes);
        }

        #[test]
        fn volume_fuzz_never_panics(bytes in prop::collection::vec(any::<u8>(), 0..200)) {
            let _ = decode_volume(&bytes);
        }

        #[test]
        fn stl_round_trip_is_identical(pts in prop::collection::vec(prop::array::uniform3(-100.0f32..100.0), 3..30)) {
            // random f32-exact triangles: binary write then read gives the same soup
            let soup: Vec<[Vec3; 3]> = pts
                .windows(3)
                .map(|w| [w[0], w[1], w[2]].map(|p| p.map(|c| c as f64)))
                .collect();
            let mesh = TriMesh::from_soup(&soup, 0.0).unwrap();
            prop_assert_eq!(&parse_stl_soup(&encode_stl_binary(&mesh)).unwrap(), &soup);
            prop_assert_eq!(&parse_stl_soup(encode_stl_ascii(&mesh, "m").as_bytes()).unwrap(), &soup);
        }
    }
}
