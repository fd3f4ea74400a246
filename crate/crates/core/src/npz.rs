//! Minimal named-array container: uncompressed zip of `.npy` entries.
//!
//! Ground-truth bundles, checkpoints and cached latents all go through this
//! one format. Entries are stored (method 0) with zeroed timestamps so the
//! same arrays always produce byte-identical files; numpy can open them.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::ArrayD;

use crate::error::CoreError;
use crate::Result;

/// One named array payload.
#[derive(Debug, Clone, PartialEq)]
pub enum NpyData {
    F32(ArrayD<f32>),
    F64(ArrayD<f64>),
    U8(ArrayD<u8>),
}

impl NpyData {
    fn descr(&self) -> &'static str {
        match self {
            NpyData::F32(_) => "<f4",
            NpyData::F64(_) => "<f8",
            NpyData::U8(_) => "|u1",
        }
    }

    fn shape(&self) -> &[usize] {
        match self {
            NpyData::F32(a) => a.shape(),
            NpyData::F64(a) => a.shape(),
            NpyData::U8(a) => a.shape(),
        }
    }

    fn payload(&self) -> Vec<u8> {
        match self {
            NpyData::F32(a) => a.iter().flat_map(|v| v.to_le_bytes()).collect(),
            NpyData::F64(a) => a.iter().flat_map(|v| v.to_le_bytes()).collect(),
            NpyData::U8(a) => a.iter().copied().collect(),
        }
    }

    /// Converts to f64 regardless of stored precision.
    pub fn to_f64(&self) -> ArrayD<f64> {
        match self {
            NpyData::F32(a) => a.mapv(|v| v as f64),
            NpyData::F64(a) => a.clone(),
            NpyData::U8(a) => a.mapv(|v| v as f64),
        }
    }

    pub fn as_u8(&self) -> Option<&ArrayD<u8>> {
        match self {
            NpyData::U8(a) => Some(a),
            _ => None,
        }
    }
}

/// Ordered collection of named arrays.
#[derive(Debug, Default, Clone)]
pub struct Npz {
    entries: Vec<(String, NpyData)>,
}

impl Npz {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, data: NpyData) {
        if let Some(slot) = self.entries.iter_mut().find(|(n, _)| n == name) {
            slot.1 = data;
        } else {
            self.entries.push((name.to_string(), data));
        }
    }

    pub fn insert_f32(&mut self, name: &str, data: ArrayD<f32>) {
        self.insert(name, NpyData::F32(data));
    }

    pub fn insert_f64(&mut self, name: &str, data: ArrayD<f64>) {
        self.insert(name, NpyData::F64(data));
    }

    pub fn insert_u8(&mut self, name: &str, data: ArrayD<u8>) {
        self.insert(name, NpyData::U8(data));
    }

    pub fn get(&self, name: &str) -> Option<&NpyData> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, d)| d)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn required(&self, name: &str) -> Result<&NpyData> {
        self.get(name)
            .ok_or_else(|| CoreError::Data(format!("archive is missing array {name:?}")))
    }

    pub fn write_to(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes();
        let mut f = std::fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn read_from(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let mut central = Vec::new();
        let mut count = 0u16;
        for (name, data) in &self.entries {
            let file_name = format!("{name}.npy");
            let body = npy_bytes(data);
            let crc = crc32(&body);
            let offset = out.len() as u32;
            write_local_header(&mut out, &file_name, crc, body.len() as u32);
            out.extend_from_slice(&body);
            write_central_entry(&mut central, &file_name, crc, body.len() as u32, offset);
            count += 1;
        }
        let cd_offset = out.len() as u32;
        let cd_size = central.len() as u32;
        out.extend_from_slice(&central);
        // end of central directory
        out.extend_from_slice(&0x0605_4b50u32.to_le_bytes());
        out.extend_from_slice(&[0u8; 4]); // disk numbers
        out.extend_from_slice(&count.to_le_bytes());
        out.extend_from_slice(&count.to_le_bytes());
        out.extend_from_slice(&cd_size.to_le_bytes());
        out.extend_from_slice(&cd_offset.to_le_bytes());
        out.extend_from_slice(&[0u8; 2]); // comment length
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let eocd = find_eocd(bytes)?;
        let count = u16_at(bytes, eocd + 10)? as usize;
        let cd_offset = u32_at(bytes, eocd + 16)? as usize;
        let mut entries = Vec::with_capacity(count);
        let mut pos = cd_offset;
        for _ in 0..count {
            if u32_at(bytes, pos)? != 0x0201_4b50 {
                return Err(CoreError::Data("bad central directory entry".into()));
            }
            let method = u16_at(bytes, pos + 10)?;
            let usize_ = u32_at(bytes, pos + 24)? as usize;
            let name_len = u16_at(bytes, pos + 28)? as usize;
            let extra_len = u16_at(bytes, pos + 30)? as usize;
            let comment_len = u16_at(bytes, pos + 32)? as usize;
            let local_off = u32_at(bytes, pos + 42)? as usize;
            let name = std::str::from_utf8(slice_at(bytes, pos + 46, name_len)?)
                .map_err(|_| CoreError::Data("non-utf8 entry name".into()))?
                .to_string();
            if method != 0 {
                return Err(CoreError::Data(format!("entry {name:?} is compressed; only stored entries are supported")));
            }
            // local header: fixed 30 bytes + name + extra
            let lh_name = u16_at(bytes, local_off + 26)? as usize;
            let lh_extra = u16_at(bytes, local_off + 28)? as usize;
            let data_start = local_off + 30 + lh_name + lh_extra;
            let body = slice_at(bytes, data_start, usize_)?;
            let key = name.strip_suffix(".npy").unwrap_or(&name).to_string();
            entries.push((key, parse_npy(body)?));
            pos += 46 + name_len + extra_len + comment_len;
        }
        Ok(Self { entries })
    }
}

fn write_local_header(out: &mut Vec<u8>, name: &str, crc: u32, size: u32) {
    out.extend_from_slice(&0x0403_4b50u32.to_le_bytes());
    out.extend_from_slice(&20u16.to_le_bytes()); // version needed
    out.extend_from_slice(&0u16.to_le_bytes()); // flags
    out.extend_from_slice(&0u16.to_le_bytes()); // method: stored
    out.extend_from_slice(&0u16.to_le_bytes()); // mod time
    out.extend_from_slice(&0x0021u16.to_le_bytes()); // mod date (1980-01-01)
    out.extend_from_slice(&crc.to_le_bytes());
    out.extend_from_slice(&size.to_le_bytes());
    out.extend_from_slice(&size.to_le_bytes());
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes()); // extra length
    out.extend_from_slice(name.as_bytes());
}

fn write_central_entry(out: &mut Vec<u8>, name: &str, crc: u32, size: u32, offset: u32) {
    out.extend_from_slice(&0x0201_4b50u32.to_le_bytes());
    out.extend_from_slice(&20u16.to_le_bytes()); // version made by
    out.extend_from_slice(&20u16.to_le_bytes()); // version needed
    out.extend_from_slice(&0u16.to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes());
    out.extend_from_slice(&0x0021u16.to_le_bytes());
    out.extend_from_slice(&crc.to_le_bytes());
    out.extend_from_slice(&size.to_le_bytes());
    out.extend_from_slice(&size.to_le_bytes());
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(&[0u8; 2]); // extra
    out.extend_from_slice(&[0u8; 2]); // comment
    out.extend_from_slice(&[0u8; 2]); // disk
    out.extend_from_slice(&[0u8; 2]); // internal attrs
    out.extend_from_slice(&[0u8; 4]); // external attrs
    out.extend_from_slice(&offset.to_le_bytes());
    out.extend_from_slice(name.as_bytes());
}

fn find_eocd(bytes: &[u8]) -> Result<usize> {
    if bytes.len() < 22 {
        return Err(CoreError::Data("archive too small".into()));
    }
    let start = bytes.len().saturating_sub(22 + 65536);
    for pos in (start..=bytes.len() - 22).rev() {
        if u32_at(bytes, pos).ok() == Some(0x0605_4b50) {
            return Ok(pos);
        }
    }
    Err(CoreError::Data("not a zip archive (no end record)".into()))
}

fn u16_at(bytes: &[u8], pos: usize) -> Result<u16> {
    let s = slice_at(bytes, pos, 2)?;
    Ok(u16::from_le_bytes([s[0], s[1]]))
}

fn u32_at(bytes: &[u8], pos: usize) -> Result<u32> {
    let s = slice_at(bytes, pos, 4)?;
    Ok(u32::from_le_bytes([s[0], s[1], s[2], s[3]]))
}

fn slice_at(bytes: &[u8], pos: usize, len: usize) -> Result<&[u8]> {
    bytes
        .get(pos..pos + len)
        .ok_or_else(|| CoreError::Data("truncated archive".into()))
}

fn npy_bytes(data: &NpyData) -> Vec<u8> {
    let shape = data
        .shape()
        .iter()
        .map(|d| d.to_string())
        .collect::<Vec<_>>()
        .join(", ");
    let shape = if data.shape().len() == 1 { format!("{shape},") } else { shape };
    let mut header = format!(
        "{{'descr': '{}', 'fortran_order': False, 'shape': ({}), }}",
        data.descr(),
        shape
    );
    let unpadded = 10 + header.len() + 1; // magic+version+len field, header, newline
    let pad = (64 - unpadded % 64) % 64;
    header.push_str(&" ".repeat(pad));
    header.push('\n');
    let mut out = Vec::with_capacity(10 + header.len());
    out.extend_from_slice(b"\x93NUMPY\x01\x00");
    out.extend_from_slice(&(header.len() as u16).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(&data.payload());
    out
}

fn parse_npy(bytes: &[u8]) -> Result<NpyData> {
    if bytes.len() < 10 || &bytes[0..6] != b"\x93NUMPY" {
        return Err(CoreError::Data("bad npy magic".into()));
    }
    let header_len = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    let header = std::str::from_utf8(slice_at(bytes, 10, header_len)?)
        .map_err(|_| CoreError::Data("non-utf8 npy header".into()))?;
    let descr = dict_str(header, "descr")?;
    if header.contains("'fortran_order': True") {
        return Err(CoreError::Data("fortran order arrays not supported".into()));
    }
    let shape = dict_shape(header)?;
    let body = &bytes[10 + header_len..];
    let count: usize = shape.iter().product();
    let shaped = ndarray::IxDyn(&shape);
    match descr.as_str() {
        "<f4" => {
            require_len(body, count * 4)?;
            let vals: Vec<f32> = body.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            Ok(NpyData::F32(ArrayD::from_shape_vec(shaped, vals).map_err(bad_shape)?))
        }
        "<f8" => {
            require_len(body, count * 8)?;
            let vals: Vec<f64> = body
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
                .collect();
            Ok(NpyData::F64(ArrayD::from_shape_vec(shaped, vals).map_err(bad_shape)?))
        }
        "|u1" => {
            require_len(body, count)?;
            Ok(NpyData::U8(ArrayD::from_shape_vec(shaped, body.to_vec()).map_err(bad_shape)?))
        }
        other => Err(CoreError::Data(format!("unsupported npy dtype {other:?}"))),
    }
}

fn require_len(body: &[u8], want: usize) -> Result<()> {
    if body.len() < want {
        return Err(CoreError::Data("npy payload shorter than header shape".into()));
    }
    Ok(())
}

fn bad_shape(e: ndarray::ShapeError) -> CoreError {
    CoreError::Data(format!("npy shape mismatch: {e}"))
}

fn dict_str(header: &str, key: &str) -> Result<String> {
    let pat = format!("'{key}': '");
    let start = header
        .find(&pat)
        .ok_or_else(|| CoreError::Data(format!("npy header missing {key}")))?
        + pat.len();
    let end = header[start..]
        .find('\'')
        .ok_or_else(|| CoreError::Data("unterminated npy header value".into()))?;
    Ok(header[start..start + end].to_string())
}

fn dict_shape(header: &str) -> Result<Vec<usize>> {
    let pat = "'shape': (";
    let start = header
        .find(pat)
        .ok_or_else(|| CoreError::Data("npy header missing shape".into()))?
        + pat.len();
    let end = header[start..]
        .find(')')
        .ok_or_else(|| CoreError::Data("unterminated shape tuple".into()))?;
    header[start..start + end]
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<usize>()
                .map_err(|_| CoreError::Data(format!("bad shape element {s:?}")))
        })
        .collect()
}

/// IEEE CRC-32 (reflected 0xEDB88320), as used by zip.
pub fn crc32(data: &[u8]) -> u32 {
    let mut table = [0u32; 256];
    for (i, slot) in table.iter_mut().enumerate() {
        let mut c = i as u32;
        for _ in 0..8 {
            c = if c & 1 != 0 { 0xEDB8_8320 ^ (c >> 1) } else { c >> 1 };
        }
        *slot = c;
    }
    let mut crc = 0xFFFF_FFFFu32;
    for &b in data {
        crc = table[((crc ^ b as u32) & 0xFF) as usize] ^ (crc >> 8);
    }
    crc ^ 0xFFFF_FFFF
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::ArrayD;

    #[test]
    fn roundtrip_mixed_dtypes() {
        let mut npz = Npz::new();
        let f = ArrayD::from_shape_vec(ndarray::IxDyn(&[2, 3]), vec![1.0f32, -2.5, 0.0, 3.25, 1e-8, 7.0]).unwrap();
        let d = ArrayD::from_shape_vec(ndarray::IxDyn(&[4]), vec![0.1f64, 0.2, -0.3, 4.0]).unwrap();
        let u = ArrayD::from_shape_vec(ndarray::IxDyn(&[2, 2, 1]), vec![0u8, 1, 255, 128]).unwrap();
        npz.insert_f32("flows", f.clone());
        npz.insert_f64("stats", d.clone());
        npz.insert_u8("mask", u.clone());
        let bytes = npz.to_bytes();
        let back = Npz::from_bytes(&bytes).unwrap();
        assert_eq!(back.get("flows"), Some(&NpyData::F32(f)));
        assert_eq!(back.get("stats"), Some(&NpyData::F64(d)));
        assert_eq!(back.get("mask"), Some(&NpyData::U8(u)));
    }

    #[test]
    fn byte_identical_across_builds() {
        let mut a = Npz::new();
        a.insert_f32("x", ArrayD::zeros(ndarray::IxDyn(&[3, 3])));
        let mut b = Npz::new();
        b.insert_f32("x", ArrayD::zeros(ndarray::IxDyn(&[3, 3])));
        assert_eq!(a.to_bytes(), b.to_bytes());
    }

    #[test]
    fn insert_replaces_existing() {
        let mut npz = Npz::new();
        npz.insert_f64("a", ArrayD::zeros(ndarray::IxDyn(&[1])));
        npz.insert_f64("a", ArrayD::from_elem(ndarray::IxDyn(&[1]), 5.0));
        assert_eq!(npz.len(), 1);
        match npz.get("a").unwrap() {
            NpyData::F64(a) => assert_eq!(a[[0]], 5.0),
            _ => panic!("wrong dtype"),
        }
    }

    #[test]
    fn crc32_known_vector() {
        // Standard test vector for "123456789".
        assert_eq!(crc32(b"123456789"), 0xCBF4_3926);
    }

    #[test]
    fn rejects_truncated() {
        let mut npz = Npz::new();
        npz.insert_u8("m", ArrayD::zeros(ndarray::IxDyn(&[8])));
        let bytes = npz.to_bytes();
        assert!(Npz::from_bytes(&bytes[..bytes.len() - 4]).is_err());
    }
}
