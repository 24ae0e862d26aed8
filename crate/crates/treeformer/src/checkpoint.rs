//! Binary checkpoint format. Little-endian throughout:
//!
//!   magic "TFCK" | version u32 | echo_len u32, echo bytes (utf-8 config echo)
//!   | tensor_count u32 | per tensor: name_len u32, name bytes, ndim u32,
//!   dims u32 each, f32 payload
//!
//! Saving the result of a load reproduces the file byte for byte.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use std::fs;
use std::path::Path;

pub const MAGIC: [u8; 4] = *b"TFCK";
pub const VERSION: u32 = 1;

pub fn save<F: Scalar>(
    path: &Path,
    config_echo: &str,
    params: &[(String, Tensor<F>)],
) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(config_echo.len() as u32).to_le_bytes());
    buf.extend_from_slice(config_echo.as_bytes());
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, tensor) in params {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
        for &d in tensor.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &x in tensor.data() {
            buf.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{}: truncated at byte {}",
                self.path.display(),
                self.pos
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        String::from_utf8(self.take(len)?.to_vec()).map_err(|_| {
            Error::Checkpoint(format!("{}: non-utf8 string field", self.path.display()))
        })
    }
}

pub fn load(path: &Path) -> Result<(String, Vec<(String, Tensor<f32>)>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { bytes: &bytes, pos: 0, path };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: unsupported version {version}, expected {VERSION}",
            path.display()
        )));
    }
    let echo = r.string()?;
    let count = r.u32()? as usize;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let name = r.string()?;
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(r.f32()?);
        }
        params.push((name, Tensor::new(shape, data)));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{}: {} trailing bytes",
            path.display(),
            bytes.len() - r.pos
        )));
    }
    Ok((echo, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn sample_params(seed: u64) -> Vec<(String, Tensor<f32>)> {
        let mut r = rng::seeded(seed);
        vec![
            ("embed".to_string(), Tensor::matrix(5, 4, rng::init_weight(&mut r, 4, 20))),
            ("tf.w_comp".to_string(), Tensor::matrix(4, 8, rng::init_weight(&mut r, 8, 32))),
            ("tf.b_comp".to_string(), Tensor::row(vec![0.0; 4])),
        ]
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.ckpt");
        let b = dir.path().join("b.ckpt");
        let params = sample_params(1);
        save(&a, "task = dyck\nseed = 7\n", &params).unwrap();
        let (echo, loaded) = load(&a).unwrap();
        assert_eq!(echo, "task = dyck\nseed = 7\n");
        assert_eq!(loaded.len(), params.len());
        for ((n1, t1), (n2, t2)) in loaded.iter().zip(params.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            assert_eq!(t1.data(), t2.data());
        }
        save(&b, &echo, &loaded).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.ckpt");
        save(&p, "", &sample_params(2)).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        bytes[4..8].copy_from_slice(&(VERSION + 1).to_le_bytes());
        fs::write(&p, bytes).unwrap();
        let err = load(&p).unwrap_err().to_string();
        assert!(err.contains("version"), "{err}");
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        fs::write(&p, b"NOPE\x01\x00\x00\x00").unwrap();
        assert!(load(&p).unwrap_err().to_string().contains("magic"));
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.ckpt");
        save(&p, "echo", &sample_params(3)).unwrap();
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(load(&p).unwrap_err().to_string().contains("truncated"));
    }

    #[test]
    fn f64_params_saved_as_f32() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.ckpt");
        let params = vec![("w".to_string(), Tensor::<f64>::row(vec![0.25, -1.5]))];
        save(&p, "", &params).unwrap();
        let (_, loaded) = load(&p).unwrap();
        assert_eq!(loaded[0].1.data(), &[0.25f32, -1.5]);
    }
}
