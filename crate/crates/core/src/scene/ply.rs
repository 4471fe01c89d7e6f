//! Binary little-endian PLY in the common Gaussian-splat vertex layout.
//!
//! Vertex properties written: x y z nx ny nz f_dc_0..2 [f_rest_*] opacity
//! scale_0..2 rot_0..3, plus an optional `label` column when any primitive
//! carries a nonzero entity label.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use super::{GaussianPrimitive, GaussianScene, Label};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
enum ScalarType {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl ScalarType {
    fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "char" | "int8" => Self::I8,
            "uchar" | "uint8" => Self::U8,
            "short" | "int16" => Self::I16,
            "ushort" | "uint16" => Self::U16,
            "int" | "int32" => Self::I32,
            "uint" | "uint32" => Self::U32,
            "float" | "float32" => Self::F32,
            "double" | "float64" => Self::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Self::I8 | Self::U8 => 1,
            Self::I16 | Self::U16 => 2,
            Self::I32 | Self::U32 | Self::F32 => 4,
            Self::F64 => 8,
        }
    }

    fn read(self, b: &[u8]) -> f64 {
        match self {
            Self::I8 => b[0] as i8 as f64,
            Self::U8 => b[0] as f64,
            Self::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Self::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Self::I32 => i32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Self::U32 => u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Self::F32 => f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Self::F64 => f64::from_le_bytes([b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7]]),
        }
    }

    /// f32 values are returned without a detour through f64 rounding.
    fn read_f32(self, b: &[u8]) -> f32 {
        match self {
            Self::F32 => f32::from_le_bytes([b[0], b[1], b[2], b[3]]),
            other => other.read(b) as f32,
        }
    }
}

struct Element {
    name: String,
    count: usize,
    properties: Vec<(String, ScalarType)>,
}

struct Header {
    elements: Vec<Element>,
    body_offset: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    const END: &[u8] = b"end_header";
    let end = bytes
        .windows(END.len())
        .position(|w| w == END)
        .ok_or_else(|| Error::Format("ply: missing end_header".into()))?;
    let mut body_offset = end + END.len();
    // header line terminator: "\n" or "\r\n"
    if bytes.get(body_offset) == Some(&b'\r') {
        body_offset += 1;
    }
    if bytes.get(body_offset) != Some(&b'\n') {
        return Err(Error::Format("ply: malformed end_header line".into()));
    }
    body_offset += 1;
    let text = std::str::from_utf8(&bytes[..end])
        .map_err(|_| Error::Format("ply: header is not ASCII".into()))?;
    let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
    if lines.next() != Some("ply") {
        return Err(Error::Format("ply: missing magic".into()));
    }
    let mut elements: Vec<Element> = Vec::new();
    let mut saw_format = false;
    for line in lines {
        let tokens: Vec<&str> = line.split_whitespace().collect();
        match tokens.as_slice() {
            ["format", fmt, _version] => {
                if *fmt != "binary_little_endian" {
                    return Err(Error::Format(format!("ply: unsupported format {fmt}")));
                }
                saw_format = true;
            }
            ["comment", ..] | ["obj_info", ..] => {}
            ["element", name, count] => {
                let count = count
                    .parse()
                    .map_err(|_| Error::Format(format!("ply: bad element count {count}")))?;
                elements.push(Element {
                    name: name.to_string(),
                    count,
                    properties: Vec::new(),
                });
            }
            ["property", "list", ..] => {
                let el = elements
                    .last()
                    .ok_or_else(|| Error::Format("ply: property before element".into()))?;
                if el.name == "vertex" || elements.iter().all(|e| e.name != "vertex") {
                    return Err(Error::Format(format!(
                        "ply: list property in element {} is not supported",
                        el.name
                    )));
                }
            }
            ["property", ty, name] => {
                let ty = ScalarType::parse(ty)
                    .ok_or_else(|| Error::Format(format!("ply: unknown property type {ty}")))?;
                elements
                    .last_mut()
                    .ok_or_else(|| Error::Format("ply: property before element".into()))?
                    .properties
                    .push((name.to_string(), ty));
            }
            other => {
                return Err(Error::Format(format!("ply: unexpected header line {other:?}")));
            }
        }
    }
    if !saw_format {
        return Err(Error::Format("ply: missing format line".into()));
    }
    Ok(Header {
        elements,
        body_offset,
    })
}

/// Load a splat PLY. Opacities stay as logits and scales as logs; the
/// quaternion is renormalised when its norm is off by more than 1e-6.
pub fn load_scene(path: &Path) -> Result<GaussianScene> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_scene(&bytes)
}

pub fn decode_scene(bytes: &[u8]) -> Result<GaussianScene> {
    let header = parse_header(bytes)?;
    let mut offset = header.body_offset;
    let mut vertex: Option<&Element> = None;
    for el in &header.elements {
        if el.name == "vertex" {
            vertex = Some(el);
            break;
        }
        let stride: usize = el.properties.iter().map(|p| p.1.size()).sum();
        offset += stride * el.count;
    }
    let vertex = vertex.ok_or_else(|| Error::Format("ply: missing vertex element".into()))?;

    let mut columns: HashMap<&str, (usize, ScalarType)> = HashMap::new();
    let mut pos = 0;
    for (name, ty) in &vertex.properties {
        columns.insert(name.as_str(), (pos, *ty));
        pos += ty.size();
    }
    let stride = pos;
    let required = |name: &str| -> Result<(usize, ScalarType)> {
        columns
            .get(name)
            .copied()
            .ok_or_else(|| Error::Format(format!("ply: missing vertex property `{name}`")))
    };
    let xyz = [required("x")?, required("y")?, required("z")?];
    let dc = [required("f_dc_0")?, required("f_dc_1")?, required("f_dc_2")?];
    let opacity = required("opacity")?;
    let scale = [required("scale_0")?, required("scale_1")?, required("scale_2")?];
    let rot = [
        required("rot_0")?,
        required("rot_1")?,
        required("rot_2")?,
        required("rot_3")?,
    ];
    let mut rest = Vec::new();
    loop {
        match columns.get(format!("f_rest_{}", rest.len()).as_str()) {
            Some(&c) => rest.push(c),
            None => break,
        }
    }
    let label = columns.get("label").copied();

    let needed = offset + stride * vertex.count;
    if bytes.len() < needed {
        return Err(Error::Format(format!(
            "ply: body holds {} bytes, {} vertices need {}",
            bytes.len() - header.body_offset,
            vertex.count,
            needed - header.body_offset
        )));
    }

    let mut primitives = Vec::with_capacity(vertex.count);
    let mut labels: Vec<Label> = Vec::with_capacity(vertex.count);
    for i in 0..vertex.count {
        let row = &bytes[offset + i * stride..offset + (i + 1) * stride];
        let get = |(at, ty): (usize, ScalarType)| ty.read_f32(&row[at..]);
        primitives.push(GaussianPrimitive {
            center: xyz.map(get),
            log_scale: scale.map(get),
            rotation: rot.map(get),
            opacity_logit: get(opacity),
            color_dc: dc.map(get),
            sh_rest: rest.iter().map(|&c| get(c)).collect(),
        });
        labels.push(match label {
            Some((at, ty)) => {
                let v = ty.read(&row[at..]);
                if !(v >= 0.0 && v.fract() == 0.0) {
                    return Err(Error::Data(format!("invalid label {v} in primitive {i}")));
                }
                v as Label
            }
            None => 0,
        });
    }
    GaussianScene::from_raw(primitives, labels)
}

pub fn encode_scene(scene: &GaussianScene) -> Result<Vec<u8>> {
    if scene.is_empty() {
        return Err(Error::EmptyScene);
    }
    let rest_len = scene.primitives()[0].sh_rest.len();
    if let Some(i) = scene
        .primitives()
        .iter()
        .position(|p| p.sh_rest.len() != rest_len)
    {
        return Err(Error::Argument(format!(
            "primitive {i} has {} higher-order SH coefficients, expected {rest_len}",
            scene.primitives()[i].sh_rest.len()
        )));
    }
    let with_labels = scene.labels().iter().any(|&l| l != 0);

    let mut out = Vec::new();
    let mut header = format!(
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\n",
        scene.len()
    );
    for name in ["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2"] {
        header.push_str(&format!("property float {name}\n"));
    }
    for k in 0..rest_len {
        header.push_str(&format!("property float f_rest_{k}\n"));
    }
    for name in [
        "opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3",
    ] {
        header.push_str(&format!("property float {name}\n"));
    }
    if with_labels {
        header.push_str("property uint label\n");
    }
    header.push_str("end_header\n");
    out.extend_from_slice(header.as_bytes());

    for (p, &label) in scene.primitives().iter().zip(scene.labels()) {
        let mut put = |v: f32| out.extend_from_slice(&v.to_le_bytes());
        p.center.iter().for_each(|&v| put(v));
        [0.0f32; 3].iter().for_each(|&v| put(v));
        p.color_dc.iter().for_each(|&v| put(v));
        p.sh_rest.iter().for_each(|&v| put(v));
        put(p.opacity_logit);
        p.log_scale.iter().for_each(|&v| put(v));
        p.rotation.iter().for_each(|&v| put(v));
        if with_labels {
            out.extend_from_slice(&label.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save_scene(scene: &GaussianScene, path: &Path) -> Result<()> {
    let bytes = encode_scene(scene)?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{UnitQuaternion, Vector3};
    use proptest::prelude::*;

    fn sample_prim(seed: f32, rest: usize) -> GaussianPrimitive {
        let q = UnitQuaternion::from_euler_angles(seed as f64, 0.3, -0.2);
        let mut p = GaussianPrimitive::new(
            Vector3::new(seed as f64, -1.5, 2.0),
            Vector3::new(0.1, 0.2, 0.05),
            q,
            0.7,
            [0.1, 0.5, 0.9],
        );
        p.sh_rest = (0..rest).map(|k| k as f32 * 0.01 - seed).collect();
        p
    }

    #[test]
    fn single_gaussian_logit_zero_is_half_opacity() {
        let p = GaussianPrimitive {
            center: [0.0; 3],
            log_scale: [0.0; 3],
            rotation: [1.0, 0.0, 0.0, 0.0],
            opacity_logit: 0.0,
            color_dc: [0.0; 3],
            sh_rest: vec![],
        };
        let bytes = encode_scene(&GaussianScene::new(vec![p])).unwrap();
        let s = decode_scene(&bytes).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s.primitives()[0].opacity(), 0.5);
        assert_eq!(s.labels(), &[0]);
    }

    #[test]
    fn empty_scene_is_rejected() {
        let err = encode_scene(&GaussianScene::default()).unwrap_err();
        assert_eq!(err.to_string(), "empty scene");
    }

    #[test]
    fn missing_field_is_named() {
        let bytes = encode_scene(&GaussianScene::new(vec![sample_prim(0.0, 0)])).unwrap();
        let text = String::from_utf8_lossy(&bytes).replace("property float rot_2\n", "property float rot_x\n");
        // header length unchanged, so the body still lines up
        let err = decode_scene(text.as_bytes()).unwrap_err();
        assert!(err.to_string().contains("rot_2"), "{err}");
    }

    #[test]
    fn nonfinite_value_reports_index() {
        let mut bad = sample_prim(1.0, 0);
        bad.opacity_logit = f32::INFINITY;
        // bypass constructor checks by encoding raw
        let scene = GaussianScene::new(vec![sample_prim(0.0, 0), bad]);
        let bytes = encode_scene(&scene).unwrap();
        let err = decode_scene(&bytes).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
        assert!(err.to_string().contains("primitive 1"), "{err}");
    }

    #[test]
    fn unnormalized_quaternion_is_fixed_on_load() {
        let mut p = sample_prim(0.0, 0);
        p.rotation = [2.0, 0.0, 0.0, 0.0];
        let bytes = encode_scene(&GaussianScene::new(vec![p])).unwrap();
        let s = decode_scene(&bytes).unwrap();
        assert_eq!(s.primitives()[0].rotation, [1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let prims: Vec<_> = (0..5).map(|i| sample_prim(i as f32, 45)).collect();
        let scene = GaussianScene::with_labels(prims, vec![0, 1, 1, 2, 0]).unwrap();
        let first = encode_scene(&scene).unwrap();
        let loaded = decode_scene(&first).unwrap();
        assert_eq!(loaded, scene);
        assert_eq!(encode_scene(&loaded).unwrap(), first);
    }

    #[test]
    fn foreign_properties_are_skipped() {
        let p = sample_prim(0.5, 0);
        let mut header = String::from("ply\nformat binary_little_endian 1.0\ncomment test\nelement vertex 1\n");
        let names = [
            "x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity", "scale_0", "scale_1",
            "scale_2", "rot_0", "rot_1", "rot_2", "rot_3",
        ];
        header.push_str("property uchar red\n");
        for n in names {
            header.push_str(&format!("property float {n}\n"));
        }
        header.push_str("property double extra\nend_header\n");
        let mut bytes = header.into_bytes();
        bytes.push(200);
        let vals: Vec<f32> = p
            .center
            .iter()
            .chain(&p.color_dc)
            .chain(std::iter::once(&p.opacity_logit))
            .chain(&p.log_scale)
            .chain(&p.rotation)
            .copied()
            .collect();
        for v in vals {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        bytes.extend_from_slice(&1.0f64.to_le_bytes());
        let s = decode_scene(&bytes).unwrap();
        assert_eq!(s.primitives()[0], p);
    }

    proptest! {
        #[test]
        fn round_trip_is_identity(
            vals in proptest::collection::vec(-50.0f32..50.0, 14),
            labels in proptest::collection::vec(0u32..4, 1..6),
        ) {
            let prims: Vec<_> = labels.iter().enumerate().map(|(i, _)| {
                let mut p = sample_prim(i as f32, 3);
                p.center = [vals[0] + i as f32, vals[1], vals[2]];
                p.log_scale = [vals[3] / 10.0, vals[4] / 10.0, vals[5] / 10.0];
                p.opacity_logit = vals[6];
                p.color_dc = [vals[7], vals[8], vals[9]];
                p
            }).collect();
            let scene = GaussianScene::from_raw(prims, labels).unwrap();
            let back = decode_scene(&encode_scene(&scene).unwrap()).unwrap();
            prop_assert_eq!(back, scene);
        }
    }
}
