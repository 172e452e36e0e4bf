//! Binary tensor files: `u32` rank, `rank × u32` dims, then `f64` values, all
//! little-endian.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

use super::{Scalar, Tensor};

pub fn write_tensor<S: Scalar, W: Write>(t: &Tensor<S>, mut w: W) -> std::io::Result<()> {
    w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for v in t.data() {
        w.write_all(&v.as_f64().to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor<S: Scalar, R: Read>(mut r: R) -> Result<Tensor<S>> {
    let mut word = [0u8; 4];
    let mut next_u32 = |r: &mut R| -> Result<u32> {
        r.read_exact(&mut word)
            .map_err(|e| Error::Format(format!("truncated tensor header: {e}")))?;
        Ok(u32::from_le_bytes(word))
    };
    let rank = next_u32(&mut r)? as usize;
    if rank == 0 || rank > 8 {
        return Err(Error::Format(format!("implausible tensor rank {rank}")));
    }
    let shape = (0..rank)
        .map(|_| next_u32(&mut r).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let n: usize = shape.iter().product();
    let mut bytes = vec![0u8; n * 8];
    r.read_exact(&mut bytes)
        .map_err(|e| Error::Format(format!("tensor body shorter than shape {shape:?}: {e}")))?;
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(|e| Error::Format(e.to_string()))? != 0 {
        return Err(Error::Format(format!("trailing bytes after tensor of shape {shape:?}")));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| S::lit(f64::from_le_bytes(c.try_into().unwrap())))
        .collect();
    Tensor::new(&shape, data).map_err(|e| Error::Format(e.to_string()))
}

pub fn save_tensor<S: Scalar>(t: &Tensor<S>, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(4 + 4 * t.shape().len() + 8 * t.numel());
    write_tensor(t, &mut buf).expect("writing to a Vec cannot fail");
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_tensor<S: Scalar>(path: &Path) -> Result<Tensor<S>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_tensor(bytes.as_slice())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let t = Tensor::new(&[2, 1], vec![1.5f64, -2.0]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&t, &mut buf).unwrap();
        assert_eq!(&buf[..12], &[2, 0, 0, 0, 2, 0, 0, 0, 1, 0, 0, 0]);
        assert_eq!(&buf[12..20], &1.5f64.to_le_bytes());
        assert_eq!(buf.len(), 12 + 16);
        let back: Tensor<f64> = read_tensor(buf.as_slice()).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn truncated_and_trailing_are_format_errors() {
        let t = Tensor::new(&[3], vec![1.0f64, 2.0, 3.0]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&t, &mut buf).unwrap();
        assert!(matches!(
            read_tensor::<f64, _>(&buf[..buf.len() - 1]),
            Err(Error::Format(_))
        ));
        buf.push(0);
        assert!(matches!(read_tensor::<f64, _>(buf.as_slice()), Err(Error::Format(_))));
    }
}
