//! NPY v1.0 reader and writer for little-endian `f4`, `f8` and `u1` arrays.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 6] = b"\x93NUMPY";
const MAX_RANK: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NpyDtype {
    F32,
    F64,
    U8,
}

impl NpyDtype {
    fn descr(self) -> &'static str {
        match self {
            NpyDtype::F32 => "<f4",
            NpyDtype::F64 => "<f8",
            NpyDtype::U8 => "|u1",
        }
    }

    fn parse(descr: &str) -> Result<Self> {
        match descr {
            "<f4" => Ok(NpyDtype::F32),
            "<f8" => Ok(NpyDtype::F64),
            "|u1" | "<u1" | ">u1" => Ok(NpyDtype::U8),
            other => Err(Error::Npy(format!("unsupported dtype `{other}`"))),
        }
    }

    fn width(self) -> usize {
        match self {
            NpyDtype::F32 => 4,
            NpyDtype::F64 => 8,
            NpyDtype::U8 => 1,
        }
    }
}

/// Extracts the value text following `'key':` in a header dict.
fn dict_value<'a>(header: &'a str, key: &str) -> Result<&'a str> {
    let pat = format!("'{key}'");
    let start = header
        .find(&pat)
        .ok_or_else(|| Error::Npy(format!("header lacks `{key}`")))?;
    let rest = header[start + pat.len()..].trim_start();
    let rest = rest
        .strip_prefix(':')
        .ok_or_else(|| Error::Npy(format!("malformed header near `{key}`")))?
        .trim_start();
    Ok(rest)
}

fn parse_header(header: &str) -> Result<(NpyDtype, Vec<usize>)> {
    let descr = dict_value(header, "descr")?;
    let descr = descr
        .strip_prefix('\'')
        .and_then(|s| s.split('\'').next())
        .ok_or_else(|| Error::Npy("malformed descr".into()))?;
    let dtype = NpyDtype::parse(descr)?;

    let fortran = dict_value(header, "fortran_order")?;
    if fortran.starts_with("True") {
        return Err(Error::Npy("fortran_order arrays are not supported".into()));
    } else if !fortran.starts_with("False") {
        return Err(Error::Npy("malformed fortran_order".into()));
    }

    let shape = dict_value(header, "shape")?;
    let inner = shape
        .strip_prefix('(')
        .and_then(|s| s.split(')').next())
        .ok_or_else(|| Error::Npy("malformed shape".into()))?;
    let dims = inner
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<usize>().map_err(|_| Error::Npy(format!("bad shape entry `{s}`"))))
        .collect::<Result<Vec<_>>>()?;
    if dims.len() > MAX_RANK {
        return Err(Error::Npy(format!("rank {} exceeds the supported maximum {MAX_RANK}", dims.len())));
    }
    Ok((dtype, dims))
}

/// Reads an NPY file. With `scale_u8`, byte arrays are divided by 255.
pub fn load_npy(path: &Path, scale_u8: bool) -> Result<Tensor> {
    let bytes = std::fs::read(path)?;
    let need = |n: usize, what: &str| -> Result<()> {
        if bytes.len() < n {
            Err(Error::Npy(format!(
                "truncated {what}: expected {n} bytes, file has {} ({} missing)",
                bytes.len(),
                n - bytes.len()
            )))
        } else {
            Ok(())
        }
    };
    need(10, "preamble")?;
    if &bytes[..6] != MAGIC {
        return Err(Error::Npy("bad magic, not an NPY file".into()));
    }
    if bytes[6] != 1 || bytes[7] != 0 {
        return Err(Error::Npy(format!("unsupported NPY version {}.{}", bytes[6], bytes[7])));
    }
    let hlen = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    need(10 + hlen, "header")?;
    let header = std::str::from_utf8(&bytes[10..10 + hlen]).map_err(|_| Error::Npy("header is not ASCII".into()))?;
    let (dtype, shape) = parse_header(header)?;
    let numel: usize = shape.iter().product();
    let data_start = 10 + hlen;
    need(data_start + numel * dtype.width(), "data")?;
    let raw = &bytes[data_start..data_start + numel * dtype.width()];
    if bytes.len() > data_start + raw.len() {
        return Err(Error::Npy(format!("{} trailing bytes after data", bytes.len() - data_start - raw.len())));
    }
    let data: Vec<f64> = match dtype {
        NpyDtype::F32 => raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect(),
        NpyDtype::F64 => raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect(),
        NpyDtype::U8 => raw
            .iter()
            .map(|&b| if scale_u8 { b as f64 / 255.0 } else { b as f64 })
            .collect(),
    };
    Tensor::new(shape, data).map_err(|e| Error::Npy(e.to_string()))
}

/// Writes `t` as NPY v1.0. Byte output requires integral values in `0..=255`.
pub fn save_npy(path: &Path, t: &Tensor, dtype: NpyDtype) -> Result<()> {
    if t.rank() > MAX_RANK {
        return Err(Error::Npy(format!("rank {} exceeds the supported maximum {MAX_RANK}", t.rank())));
    }
    let shape = match t.shape() {
        [d] => format!("({d},)"),
        dims => format!("({})", dims.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(", ")),
    };
    let mut header = format!(
        "{{'descr': '{}', 'fortran_order': False, 'shape': {shape}, }}",
        dtype.descr()
    );
    let unpadded = 10 + header.len() + 1;
    header.push_str(&" ".repeat((64 - unpadded % 64) % 64));
    header.push('\n');
    let mut buf = Vec::with_capacity(10 + header.len() + t.numel() * dtype.width());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&[1, 0]);
    buf.extend_from_slice(&(header.len() as u16).to_le_bytes());
    buf.extend_from_slice(header.as_bytes());
    for &v in t.data() {
        match dtype {
            NpyDtype::F32 => buf.extend_from_slice(&(v as f32).to_le_bytes()),
            NpyDtype::F64 => buf.extend_from_slice(&v.to_le_bytes()),
            NpyDtype::U8 => {
                if v.fract() != 0.0 || !(0.0..=255.0).contains(&v) {
                    return Err(Error::Npy(format!("value {v} is not representable as u8")));
                }
                buf.push(v as u8);
            }
        }
    }
    std::fs::write(path, buf)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn f64_round_trip_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.npy");
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = Tensor::from_fn(&[3, 4, 5], |_| rng.gen::<f64>() - 0.5);
        save_npy(&p, &t, NpyDtype::F64).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!((10 + u16::from_le_bytes([bytes[8], bytes[9]]) as usize) % 64, 0);
        let back = load_npy(&p, false).unwrap();
        assert_eq!(back.shape(), t.shape());
        assert!(back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn f32_and_rank_one() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.npy");
        let t = Tensor::from_fn(&[7], |i| i as f64 * 0.25);
        save_npy(&p, &t, NpyDtype::F32).unwrap();
        assert_eq!(load_npy(&p, false).unwrap(), t);
    }

    #[test]
    fn u8_scaling_endpoints() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.npy");
        let t = Tensor::new(vec![1, 3], vec![0.0, 255.0, 51.0]).unwrap();
        save_npy(&p, &t, NpyDtype::U8).unwrap();
        assert_eq!(load_npy(&p, true).unwrap().data(), &[0.0, 1.0, 0.2]);
        assert_eq!(load_npy(&p, false).unwrap(), t);
        assert!(save_npy(&p, &Tensor::full(&[2], 0.5), NpyDtype::U8).is_err());
    }

    #[test]
    fn truncated_file_names_missing_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.npy");
        save_npy(&p, &Tensor::ones(&[2, 3]), NpyDtype::F64).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 5]).unwrap();
        let err = load_npy(&p, false).unwrap_err().to_string();
        assert!(err.contains("5 missing"), "{err}");
    }

    fn write_raw(p: &Path, header: &str, payload: &[u8]) {
        let mut h = header.to_string();
        h.push('\n');
        let mut buf = MAGIC.to_vec();
        buf.extend_from_slice(&[1, 0]);
        buf.extend_from_slice(&(h.len() as u16).to_le_bytes());
        buf.extend_from_slice(h.as_bytes());
        buf.extend_from_slice(payload);
        std::fs::write(p, buf).unwrap();
    }

    #[test]
    fn rejects_unsupported_inputs() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.npy");
        write_raw(&p, "{'descr': '<i8', 'fortran_order': False, 'shape': (1,), }", &[0; 8]);
        assert!(load_npy(&p, false).unwrap_err().to_string().contains("dtype"));
        write_raw(&p, "{'descr': '<f8', 'fortran_order': True, 'shape': (1,), }", &[0; 8]);
        assert!(load_npy(&p, false).unwrap_err().to_string().contains("fortran"));
        write_raw(&p, "{'descr': '|u1', 'fortran_order': False, 'shape': (1, 1, 1, 1, 1, 1), }", &[0]);
        assert!(load_npy(&p, false).unwrap_err().to_string().contains("rank"));
        write_raw(&p, "{'descr': '<f8', 'shape': (1,), }", &[0; 8]);
        assert!(load_npy(&p, false).unwrap_err().to_string().contains("fortran_order"));
        std::fs::write(&p, b"not numpy at all").unwrap();
        assert!(load_npy(&p, false).unwrap_err().to_string().contains("magic"));
    }
}
