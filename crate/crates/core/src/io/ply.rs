//! Binary little-endian PLY in the usual Gaussian-splat layout plus a mask.

use std::path::Path;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::gaussian::{Gaussian, GaussianCloud};
use crate::rotation::Quat;
use crate::sh::{coeff_count, MAX_COEFFS, MAX_DEGREE};

fn property_names(sh_degree: usize) -> Vec<String> {
    let mut names: Vec<String> = ["x", "y", "z"].iter().map(|s| s.to_string()).collect();
    names.extend((0..3).map(|i| format!("f_dc_{i}")));
    names.extend((0..3 * (coeff_count(sh_degree) - 1)).map(|i| format!("f_rest_{i}")));
    names.push("opacity".into());
    names.extend((0..3).map(|i| format!("scale_{i}")));
    names.extend((0..4).map(|i| format!("rot_{i}")));
    names
}

/// Float32 values for one Gaussian in [`property_names`] order. `f_rest` is
/// channel-major, as 3D-GS viewers expect.
fn vertex_values(g: &Gaussian, sh_degree: usize) -> Vec<f32> {
    let rest = coeff_count(sh_degree) - 1;
    let mut v: Vec<f32> = g.position.iter().map(|&x| x as f32).collect();
    v.extend(g.sh[0].iter().map(|&x| x as f32));
    for c in 0..3 {
        v.extend((1..=rest).map(|k| g.sh[k][c] as f32));
    }
    v.push(g.opacity_logit as f32);
    v.extend(g.log_scale.iter().map(|&x| x as f32));
    v.extend(g.rotation.iter().map(|&x| x as f32));
    v
}

pub fn encode_ply(cloud: &GaussianCloud) -> Vec<u8> {
    let names = property_names(cloud.sh_degree);
    let mut header = format!("ply\nformat binary_little_endian 1.0\nelement vertex {}\n", cloud.len());
    for n in &names {
        header.push_str(&format!("property float {n}\n"));
    }
    header.push_str("property int mask\nend_header\n");
    let mut out = header.into_bytes();
    for g in &cloud.gaussians {
        for v in vertex_values(g, cloud.sh_degree) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(g.mask as i32).to_le_bytes());
    }
    out
}

pub fn write_ply(cloud: &GaussianCloud, path: &Path) -> Result<()> {
    std::fs::write(path, encode_ply(cloud))?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Scalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl Scalar {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Scalar::I8 | Scalar::U8 => 1,
            Scalar::I16 | Scalar::U16 => 2,
            Scalar::I32 | Scalar::U32 | Scalar::F32 => 4,
            Scalar::F64 => 8,
        }
    }

    fn read(self, b: &[u8]) -> f64 {
        match self {
            Scalar::I8 => b[0] as i8 as f64,
            Scalar::U8 => b[0] as f64,
            Scalar::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::I32 => i32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::U32 => u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::F32 => f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

fn parse_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        offset,
        message: message.into(),
    }
}

/// Parses a cloud; a missing `mask` property reads as all-static with a warning.
pub fn decode_ply(bytes: &[u8]) -> Result<GaussianCloud> {
    let mut pos = 0;
    let mut line_no = 0;
    let mut count: Option<usize> = None;
    let mut props: Vec<(String, Scalar, usize)> = Vec::new();
    let mut stride = 0;
    let mut in_vertex = false;
    loop {
        let start = pos;
        let end = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .map(|e| pos + e)
            .ok_or_else(|| parse_err(start, "unterminated header"))?;
        pos = end + 1;
        let line = std::str::from_utf8(&bytes[start..end])
            .map_err(|_| parse_err(start, "non-UTF-8 header line"))?
            .trim_end_matches('\r');
        let words: Vec<&str> = line.split_whitespace().collect();
        if line_no == 0 {
            if line != "ply" {
                return Err(parse_err(start, "missing `ply` magic"));
            }
            line_no += 1;
            continue;
        }
        line_no += 1;
        match words.as_slice() {
            ["format", "binary_little_endian", _] => {}
            ["format", other, ..] => return Err(parse_err(start, format!("unsupported format `{other}`"))),
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", name, n] => {
                if in_vertex || count.is_some() && *name != "vertex" {
                    return Err(parse_err(start, format!("unsupported extra element `{name}`")));
                }
                if *name != "vertex" {
                    return Err(parse_err(start, format!("unsupported element `{name}`")));
                }
                count = Some(n.parse().map_err(|_| parse_err(start, format!("bad vertex count `{n}`")))?);
                in_vertex = true;
            }
            ["property", "list", ..] => return Err(parse_err(start, "list properties are not supported")),
            ["property", ty, name] => {
                if !in_vertex {
                    return Err(parse_err(start, "property outside vertex element"));
                }
                let s = Scalar::parse(ty).ok_or_else(|| parse_err(start, format!("unknown property type `{ty}`")))?;
                props.push((name.to_string(), s, stride));
                stride += s.size();
            }
            ["end_header"] => break,
            _ => return Err(parse_err(start, format!("unexpected header line `{line}`"))),
        }
    }
    let header_end = pos;
    let count = count.ok_or_else(|| parse_err(header_end, "no vertex element"))?;
    let find = |name: &str| props.iter().find(|(n, _, _)| n == name).map(|&(_, s, o)| (s, o));
    let need = |name: &str| find(name).ok_or_else(|| parse_err(header_end, format!("missing property `{name}`")));
    let n_rest = props.iter().filter(|(n, _, _)| n.starts_with("f_rest_")).count();
    let rest = n_rest / 3;
    let sh_degree = (0..=MAX_DEGREE)
        .find(|&d| coeff_count(d) - 1 == rest && n_rest % 3 == 0)
        .ok_or_else(|| parse_err(header_end, format!("{n_rest} f_rest properties match no SH degree")))?;
    let mut fields = Vec::new();
    for name in property_names(sh_degree) {
        fields.push(need(&name)?);
    }
    let mask = find("mask");
    if mask.is_none() {
        log::warn!("PLY has no mask property; all Gaussians read as static");
    }
    let body = &bytes[header_end..];
    if body.len() < count * stride {
        let whole = body.len() / stride.max(1);
        return Err(parse_err(
            header_end + whole * stride,
            format!("truncated data: {count} vertices declared, {whole} complete"),
        ));
    }
    let mut cloud = GaussianCloud::new(sh_degree);
    for i in 0..count {
        let row = &body[i * stride..(i + 1) * stride];
        let v: Vec<f64> = fields.iter().map(|&(s, o)| s.read(&row[o..])).collect();
        let mut sh = [[0.0; 3]; MAX_COEFFS];
        sh[0] = [v[3], v[4], v[5]];
        for c in 0..3 {
            for k in 1..=rest {
                sh[k][c] = v[6 + c * rest + (k - 1)];
            }
        }
        let o = 6 + 3 * rest;
        cloud.gaussians.push(Gaussian {
            position: Vector3::new(v[0], v[1], v[2]),
            sh,
            opacity_logit: v[o],
            log_scale: Vector3::new(v[o + 1], v[o + 2], v[o + 3]),
            rotation: Quat::new(v[o + 4], v[o + 5], v[o + 6], v[o + 7]),
            mask: match mask {
                Some((s, off)) => {
                    let m = s.read(&row[off..]);
                    if m < 0.0 {
                        return Err(parse_err(header_end + i * stride + off, format!("negative mask {m}")));
                    }
                    m as u32
                }
                None => 0,
            },
        });
    }
    Ok(cloud)
}

pub fn read_ply(path: &Path) -> Result<GaussianCloud> {
    decode_ply(&std::fs::read(path)?)
}
