//! Binary little-endian PLY container for Gaussian sets.
//!
//! Each vertex stores, in order, as `double`: `x y z`, `opacity`,
//! `rot_0..rot_3` (w, x, y, z), `scale_0..scale_2`, then `color_0..` with
//! `3 (k+1)^2` coefficients. When provenance is present two `uint` fields
//! follow: `frame` and `pixel`. The SH degree is recorded in a
//! `comment sh_degree k` header line.

use std::fmt::Write;

use thiserror::Error;

use super::{color_width, Gaussian, GaussianSet, Provenance};

#[derive(Debug, Error, PartialEq)]
pub enum PlyError {
    #[error("byte {offset}: {msg}")]
    Malformed { offset: usize, msg: String },
}

fn malformed(offset: usize, msg: impl Into<String>) -> PlyError {
    PlyError::Malformed {
        offset,
        msg: msg.into(),
    }
}

fn property_names(sh_degree: usize, provenance: bool) -> Vec<(String, &'static str)> {
    let mut names: Vec<(String, &'static str)> = ["x", "y", "z", "opacity"]
        .iter()
        .map(|s| (s.to_string(), "double"))
        .collect();
    names.extend((0..4).map(|i| (format!("rot_{i}"), "double")));
    names.extend((0..3).map(|i| (format!("scale_{i}"), "double")));
    names.extend((0..color_width(sh_degree)).map(|i| (format!("color_{i}"), "double")));
    if provenance {
        names.push(("frame".into(), "uint"));
        names.push(("pixel".into(), "uint"));
    }
    names
}

pub fn export_ply(gs: &GaussianSet) -> Vec<u8> {
    let prov = !gs.provenance.is_empty();
    assert!(!prov || gs.provenance.len() == gs.len(), "provenance length mismatch");
    let mut header = String::new();
    header.push_str("ply\nformat binary_little_endian 1.0\n");
    writeln!(header, "comment sh_degree {}", gs.sh_degree).unwrap();
    writeln!(header, "element vertex {}", gs.len()).unwrap();
    for (name, ty) in property_names(gs.sh_degree, prov) {
        writeln!(header, "property {ty} {name}").unwrap();
    }
    header.push_str("end_header\n");
    let mut out = header.into_bytes();
    for (i, g) in gs.gaussians.iter().enumerate() {
        let opacity = [g.opacity];
        let vals = g
            .center
            .iter()
            .chain(opacity.iter())
            .chain(g.rotation.iter())
            .chain(g.scale.iter())
            .chain(g.color.iter());
        for v in vals {
            out.extend_from_slice(&v.to_le_bytes());
        }
        if prov {
            out.extend_from_slice(&gs.provenance[i].frame.to_le_bytes());
            out.extend_from_slice(&gs.provenance[i].pixel.to_le_bytes());
        }
    }
    out
}

pub fn import_ply(bytes: &[u8]) -> Result<GaussianSet, PlyError> {
    const END: &[u8] = b"end_header\n";
    let body = bytes
        .windows(END.len())
        .position(|w| w == END)
        .ok_or_else(|| malformed(0, "missing end_header"))?
        + END.len();
    let header = std::str::from_utf8(&bytes[..body]).map_err(|e| malformed(e.valid_up_to(), "header is not UTF-8"))?;

    let mut offset = 0;
    let mut lines = Vec::new();
    for line in header.split_inclusive('\n') {
        lines.push((offset, line.trim_end()));
        offset += line.len();
    }
    let mut it = lines.into_iter();
    match it.next() {
        Some((_, "ply")) => {}
        _ => return Err(malformed(0, "missing `ply` magic")),
    }
    let mut sh_degree = None;
    let mut count = None;
    let mut props: Vec<(String, String)> = Vec::new();
    for (off, line) in it {
        let f: Vec<&str> = line.split_whitespace().collect();
        match f.as_slice() {
            ["format", "binary_little_endian", "1.0"] => {}
            ["format", ..] => return Err(malformed(off, format!("unsupported format `{line}`"))),
            ["comment", "sh_degree", k] => {
                let k: usize = k.parse().map_err(|_| malformed(off, format!("bad sh_degree `{k}`")))?;
                if k > 1 {
                    return Err(malformed(off, format!("unsupported sh_degree {k}")));
                }
                sh_degree = Some(k);
            }
            ["comment", ..] => {}
            ["element", "vertex", n] => {
                let n: usize = n.parse().map_err(|_| malformed(off, format!("bad vertex count `{n}`")))?;
                count = Some((n, off));
            }
            ["element", other, ..] => return Err(malformed(off, format!("unexpected element `{other}`"))),
            ["property", ty, name] => props.push((ty.to_string(), name.to_string())),
            ["end_header"] => {}
            _ => return Err(malformed(off, format!("unrecognized header line `{line}`"))),
        }
    }
    let sh_degree = sh_degree.unwrap_or(0);
    let (count, count_off) = count.ok_or_else(|| malformed(0, "missing `element vertex`"))?;
    let prov = props.iter().any(|(_, n)| n == "frame");
    let want = property_names(sh_degree, prov);
    let got: Vec<(String, &str)> = props.iter().map(|(t, n)| (n.clone(), t.as_str())).collect();
    if got != want {
        return Err(malformed(
            count_off,
            format!("property layout does not match sh_degree {sh_degree}"),
        ));
    }
    let cw = color_width(sh_degree);
    let stride = (11 + cw) * 8 + if prov { 8 } else { 0 };
    let have = bytes.len() - body;
    let need = count.checked_mul(stride).ok_or_else(|| malformed(count_off, "vertex count overflows"))?;
    if have != need {
        return Err(malformed(
            body,
            format!("vertex count {count} implies {need} data bytes, found {have}"),
        ));
    }
    let mut gs = GaussianSet::new(sh_degree);
    let data = &bytes[body..];
    let f = |k: usize| f64::from_le_bytes(data[k..k + 8].try_into().unwrap());
    let u = |k: usize| u32::from_le_bytes(data[k..k + 4].try_into().unwrap());
    for v in 0..count {
        let b = v * stride;
        let d = |i: usize| f(b + 8 * i);
        gs.gaussians.push(Gaussian {
            center: [d(0), d(1), d(2)],
            opacity: d(3),
            rotation: [d(4), d(5), d(6), d(7)],
            scale: [d(8), d(9), d(10)],
            color: (0..cw).map(|i| d(11 + i)).collect(),
        });
        if prov {
            let pb = b + (11 + cw) * 8;
            gs.provenance.push(Provenance {
                frame: u(pb),
                pixel: u(pb + 4),
            });
        }
    }
    Ok(gs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> GaussianSet {
        let mut gs = GaussianSet::new(1);
        for i in 0..3 {
            gs.push(Gaussian {
                center: [i as f64, -0.5, 1.0 / 3.0],
                opacity: 0.25,
                rotation: [0.5, 0.5, 0.5, 0.5],
                scale: [1e-3, 2.0, std::f64::consts::PI],
                color: (0..12).map(|k| k as f64 * 0.1).collect(),
            });
            gs.provenance.push(Provenance { frame: i, pixel: 7 * i });
        }
        gs
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let gs = sample();
        assert_eq!(import_ply(&export_ply(&gs)).unwrap(), gs);
        let empty = GaussianSet::new(0);
        let bytes = export_ply(&empty);
        assert!(std::str::from_utf8(&bytes).unwrap().contains("element vertex 0"));
        assert_eq!(import_ply(&bytes).unwrap(), empty);
    }

    #[test]
    fn corrupted_count_is_reported() {
        let bytes = export_ply(&sample());
        let text = String::from_utf8_lossy(&bytes).replace("element vertex 3", "element vertex 4");
        let mut corrupted = text.as_bytes()[..text.find("end_header\n").unwrap() + 11].to_vec();
        let body = bytes.windows(11).position(|w| w == b"end_header\n").unwrap() + 11;
        corrupted.extend_from_slice(&bytes[body..]);
        let err = import_ply(&corrupted).unwrap_err();
        assert!(err.to_string().contains("vertex count 4"), "{err}");
    }

    #[test]
    fn truncated_header_is_reported() {
        assert!(import_ply(b"ply\nformat binary_little_endian 1.0\n").is_err());
        assert!(import_ply(b"obj\nend_header\n").is_err());
    }
}
