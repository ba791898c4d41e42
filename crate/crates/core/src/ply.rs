//! Minimal binary little-endian PLY for XYZ point clouds.

use nalgebra::Point3;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PlyError {
    #[error("not a PLY file")]
    BadMagic,
    #[error("unsupported PLY header: {0}")]
    Unsupported(String),
    #[error("truncated PLY body: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
}

pub fn write_ply(points: &[Point3<f64>]) -> Vec<u8> {
    let header = format!(
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\nproperty double x\nproperty double y\nproperty double z\nend_header\n",
        points.len()
    );
    let mut out = Vec::with_capacity(header.len() + points.len() * 24);
    out.extend_from_slice(header.as_bytes());
    for p in points {
        for c in [p.x, p.y, p.z] {
            out.extend_from_slice(&c.to_le_bytes());
        }
    }
    out
}

/// Reads files produced by [`write_ply`]: one vertex element with x, y, z
/// properties stored as `double` or `float`.
pub fn read_ply(bytes: &[u8]) -> Result<Vec<Point3<f64>>, PlyError> {
    const END: &[u8] = b"end_header\n";
    if !bytes.starts_with(b"ply\n") {
        return Err(PlyError::BadMagic);
    }
    let end = bytes
        .windows(END.len())
        .position(|w| w == END)
        .ok_or_else(|| PlyError::Unsupported("missing end_header".into()))?
        + END.len();
    let header = std::str::from_utf8(&bytes[..end]).map_err(|_| PlyError::Unsupported("non-UTF-8 header".into()))?;

    let mut count = None;
    let mut props: Vec<(String, usize)> = Vec::new();
    for line in header.lines().skip(1) {
        let parts: Vec<&str> = line.split_whitespace().collect();
        match parts.as_slice() {
            ["format", "binary_little_endian", _] => {}
            ["format", other, ..] => return Err(PlyError::Unsupported(format!("format {other}"))),
            ["element", "vertex", n] => {
                count = Some(n.parse::<usize>().map_err(|_| PlyError::Unsupported(line.into()))?);
            }
            ["element", other, ..] => return Err(PlyError::Unsupported(format!("element {other}"))),
            ["property", ty, name] => {
                let size = match *ty {
                    "double" | "float64" => 8,
                    "float" | "float32" => 4,
                    _ => return Err(PlyError::Unsupported(format!("property type {ty}"))),
                };
                props.push(((*name).to_owned(), size));
            }
            ["comment", ..] | ["obj_info", ..] | ["end_header"] | [] => {}
            _ => return Err(PlyError::Unsupported(line.into())),
        }
    }
    let count = count.ok_or_else(|| PlyError::Unsupported("no vertex element".into()))?;
    let names: Vec<&str> = props.iter().map(|(n, _)| n.as_str()).collect();
    if names != ["x", "y", "z"] {
        return Err(PlyError::Unsupported(format!("properties {names:?}")));
    }
    let stride: usize = props.iter().map(|(_, s)| s).sum();
    let body = &bytes[end..];
    if body.len() < count * stride {
        return Err(PlyError::Truncated {
            expected: count * stride,
            found: body.len(),
        });
    }
    let read = |chunk: &[u8], size: usize| -> f64 {
        if size == 8 {
            f64::from_le_bytes(chunk.try_into().expect("8 bytes"))
        } else {
            f32::from_le_bytes(chunk.try_into().expect("4 bytes")) as f64
        }
    };
    let mut points = Vec::with_capacity(count);
    for i in 0..count {
        let mut off = i * stride;
        let mut c = [0.0; 3];
        for (j, (_, size)) in props.iter().enumerate() {
            c[j] = read(&body[off..off + size], *size);
            off += size;
        }
        points.push(Point3::new(c[0], c[1], c[2]));
    }
    Ok(points)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip() {
        let pts = vec![Point3::new(0.0, -1.5, 2.25), Point3::new(1e-9, 3.0, 4.0)];
        let bytes = write_ply(&pts);
        assert!(bytes.starts_with(b"ply\nformat binary_little_endian 1.0\nelement vertex 2\n"));
        assert_eq!(read_ply(&bytes).unwrap(), pts);
        assert_eq!(read_ply(&write_ply(&[])).unwrap(), vec![]);
    }

    #[test]
    fn rejects_truncated_and_ascii() {
        let mut bytes = write_ply(&[Point3::new(1.0, 2.0, 3.0)]);
        bytes.pop();
        assert!(matches!(read_ply(&bytes), Err(PlyError::Truncated { .. })));
        assert_eq!(read_ply(b"hello"), Err(PlyError::BadMagic));
        let ascii = b"ply\nformat ascii 1.0\nelement vertex 0\nend_header\n";
        assert!(matches!(read_ply(ascii), Err(PlyError::Unsupported(_))));
    }
}
