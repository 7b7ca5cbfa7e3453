//! PLY point-cloud I/O: ASCII and binary-little-endian readers plus a writer
//! for both encodings. Only vertex positions (f32 or f64) and optional u8
//! red/green/blue are interpreted; other elements and properties are
//! skipped.

use std::io::Write;
use std::path::Path;

use nalgebra::Vector3;

use crate::cloud::{CloudSource, PointCloud};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlyEncoding {
    Ascii,
    BinaryLittleEndian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
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
    fn parse(s: &str) -> Option<ScalarType> {
        match s {
            "char" | "int8" => Some(ScalarType::I8),
            "uchar" | "uint8" => Some(ScalarType::U8),
            "short" | "int16" => Some(ScalarType::I16),
            "ushort" | "uint16" => Some(ScalarType::U16),
            "int" | "int32" => Some(ScalarType::I32),
            "uint" | "uint32" => Some(ScalarType::U32),
            "float" | "float32" => Some(ScalarType::F32),
            "double" | "float64" => Some(ScalarType::F64),
            _ => None,
        }
    }

    fn size(&self) -> usize {
        match self {
            ScalarType::I8 | ScalarType::U8 => 1,
            ScalarType::I16 | ScalarType::U16 => 2,
            ScalarType::I32 | ScalarType::U32 | ScalarType::F32 => 4,
            ScalarType::F64 => 8,
        }
    }
}

#[derive(Debug, Clone)]
enum Property {
    Scalar { ty: ScalarType, name: String },
    List { count_ty: ScalarType, item_ty: ScalarType },
}

#[derive(Debug, Clone)]
struct ElementDecl {
    name: String,
    count: usize,
    properties: Vec<Property>,
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::Parse {
            offset: self.pos as u64,
            message: message.into(),
        }
    }

    fn read_line(&mut self) -> Result<&'a str> {
        let start = self.pos;
        while self.pos < self.data.len() && self.data[self.pos] != b'\n' {
            self.pos += 1;
        }
        if self.pos >= self.data.len() {
            return Err(Error::Parse {
                offset: start as u64,
                message: "unexpected end of file inside header or ascii payload".into(),
            });
        }
        let line = &self.data[start..self.pos];
        self.pos += 1; // consume '\n'
        std::str::from_utf8(line)
            .map(|s| s.trim_end_matches('\r'))
            .map_err(|_| Error::Parse {
                offset: start as u64,
                message: "non-utf8 text line".into(),
            })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(self.err(format!(
                "truncated payload: needed {} bytes, {} remain",
                n,
                self.data.len() - self.pos
            )));
        }
        let out = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn read_scalar_le(&mut self, ty: ScalarType) -> Result<f64> {
        let bytes = self.take(ty.size())?;
        Ok(match ty {
            ScalarType::I8 => bytes[0] as i8 as f64,
            ScalarType::U8 => bytes[0] as f64,
            ScalarType::I16 => i16::from_le_bytes([bytes[0], bytes[1]]) as f64,
            ScalarType::U16 => u16::from_le_bytes([bytes[0], bytes[1]]) as f64,
            ScalarType::I32 => {
                i32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]) as f64
            }
            ScalarType::U32 => {
                u32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]) as f64
            }
            ScalarType::F32 => {
                f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]) as f64
            }
            ScalarType::F64 => f64::from_le_bytes(bytes.try_into().unwrap()),
        })
    }
}

/// Parse a PLY file from bytes. Vertex x,y,z are required; red,green,blue
/// (u8) are captured when present and mapped to [0,1] by /255.
pub fn parse_ply(data: &[u8]) -> Result<PointCloud> {
    let mut cur = Cursor { data, pos: 0 };
    if cur.read_line()? != "ply" {
        return Err(Error::Parse {
            offset: 0,
            message: "missing 'ply' magic".into(),
        });
    }

    let mut encoding = None;
    let mut elements: Vec<ElementDecl> = Vec::new();
    loop {
        let line_offset = cur.pos as u64;
        let line = cur.read_line()?;
        let mut tok = line.split_whitespace();
        match tok.next() {
            Some("comment") | Some("obj_info") | None => {}
            Some("format") => {
                encoding = match tok.next() {
                    Some("ascii") => Some(PlyEncoding::Ascii),
                    Some("binary_little_endian") => Some(PlyEncoding::BinaryLittleEndian),
                    Some(other) => {
                        return Err(Error::Parse {
                            offset: line_offset,
                            message: format!("unsupported format/encoding '{other}'"),
                        })
                    }
                    None => {
                        return Err(Error::Parse {
                            offset: line_offset,
                            message: "format line missing encoding".into(),
                        })
                    }
                };
            }
            Some("element") => {
                let name = tok.next().ok_or(Error::Parse {
                    offset: line_offset,
                    message: "element line missing name".into(),
                })?;
                let count: usize = tok
                    .next()
                    .and_then(|c| c.parse().ok())
                    .ok_or(Error::Parse {
                        offset: line_offset,
                        message: "element line missing count".into(),
                    })?;
                elements.push(ElementDecl {
                    name: name.to_string(),
                    count,
                    properties: Vec::new(),
                });
            }
            Some("property") => {
                let el = elements.last_mut().ok_or(Error::Parse {
                    offset: line_offset,
                    message: "property before any element".into(),
                })?;
                let first = tok.next().ok_or(Error::Parse {
                    offset: line_offset,
                    message: "property line missing type".into(),
                })?;
                if first == "list" {
                    let count_ty = tok.next().and_then(ScalarType::parse);
                    let item_ty = tok.next().and_then(ScalarType::parse);
                    let name = tok.next();
                    match (count_ty, item_ty, name) {
                        (Some(c), Some(i), Some(_)) => el.properties.push(Property::List {
                            count_ty: c,
                            item_ty: i,
                        }),
                        _ => {
                            return Err(Error::Parse {
                                offset: line_offset,
                                message: "malformed list property".into(),
                            })
                        }
                    }
                } else {
                    let ty = ScalarType::parse(first).ok_or(Error::Parse {
                        offset: line_offset,
                        message: format!("unknown property type '{first}'"),
                    })?;
                    let name = tok.next().ok_or(Error::Parse {
                        offset: line_offset,
                        message: "property line missing name".into(),
                    })?;
                    el.properties.push(Property::Scalar {
                        ty,
                        name: name.to_string(),
                    });
                }
            }
            Some("end_header") => break,
            Some(other) => {
                return Err(Error::Parse {
                    offset: line_offset,
                    message: format!("unknown header keyword '{other}'"),
                })
            }
        }
    }

    let encoding = encoding.ok_or(Error::Parse {
        offset: cur.pos as u64,
        message: "header has no format line".into(),
    })?;

    let mut points: Vec<Vector3<f32>> = Vec::new();
    let mut colors: Vec<[f32; 3]> = Vec::new();
    let mut have_color = false;

    for el in &elements {
        let is_vertex = el.name == "vertex";
        if is_vertex {
            // x, y, z must exist as scalars.
            for want in ["x", "y", "z"] {
                let ok = el.properties.iter().any(
                    |p| matches!(p, Property::Scalar { name, ty } if name == want && matches!(ty, ScalarType::F32 | ScalarType::F64)),
                );
                if !ok {
                    return Err(Error::Parse {
                        offset: cur.pos as u64,
                        message: format!("vertex element lacks float property '{want}'"),
                    });
                }
            }
            have_color = ["red", "green", "blue"].iter().all(|want| {
                el.properties.iter().any(
                    |p| matches!(p, Property::Scalar { name, ty: ScalarType::U8 } if name == want),
                )
            });
            points.reserve(el.count);
            if have_color {
                colors.reserve(el.count);
            }
        }

        for _row in 0..el.count {
            let mut x = 0f64;
            let mut y = 0f64;
            let mut z = 0f64;
            let mut rgb = [0f64; 3];

            match encoding {
                PlyEncoding::Ascii => {
                    let line_offset = cur.pos as u64;
                    let line = cur.read_line()?;
                    let mut vals = line.split_whitespace();
                    for prop in &el.properties {
                        match prop {
                            Property::Scalar { name, .. } => {
                                let tokv = vals.next().ok_or(Error::Parse {
                                    offset: line_offset,
                                    message: format!("row missing value for '{name}'"),
                                })?;
                                if is_vertex {
                                    let v: f64 = tokv.parse().map_err(|_| Error::Parse {
                                        offset: line_offset,
                                        message: format!("bad number '{tokv}' for '{name}'"),
                                    })?;
                                    store_vertex_value(name, v, &mut x, &mut y, &mut z, &mut rgb);
                                }
                            }
                            Property::List { .. } => {
                                let n: usize = vals
                                    .next()
                                    .and_then(|t| t.parse().ok())
                                    .ok_or(Error::Parse {
                                        offset: line_offset,
                                        message: "bad list count".into(),
                                    })?;
                                for _ in 0..n {
                                    vals.next().ok_or(Error::Parse {
                                        offset: line_offset,
                                        message: "truncated list".into(),
                                    })?;
                                }
                            }
                        }
                    }
                }
                PlyEncoding::BinaryLittleEndian => {
                    for prop in &el.properties {
                        match prop {
                            Property::Scalar { ty, name } => {
                                let v = cur.read_scalar_le(*ty)?;
                                if is_vertex {
                                    store_vertex_value(name, v, &mut x, &mut y, &mut z, &mut rgb);
                                }
                            }
                            Property::List { count_ty, item_ty, .. } => {
                                let n = cur.read_scalar_le(*count_ty)? as usize;
                                cur.take(n * item_ty.size())?;
                            }
                        }
                    }
                }
            }

            if is_vertex {
                let p = Vector3::new(x as f32, y as f32, z as f32);
                if !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite()) {
                    return Err(Error::Parse {
                        offset: cur.pos as u64,
                        message: "non-finite vertex coordinate".into(),
                    });
                }
                points.push(p);
                if have_color {
                    colors.push([
                        (rgb[0] / 255.0) as f32,
                        (rgb[1] / 255.0) as f32,
                        (rgb[2] / 255.0) as f32,
                    ]);
                }
            }
        }
    }

    PointCloud::new(points, if have_color { Some(colors) } else { None }, CloudSource::PlyFile)
}

fn store_vertex_value(name: &str, v: f64, x: &mut f64, y: &mut f64, z: &mut f64, rgb: &mut [f64; 3]) {
    match name {
        "x" => *x = v,
        "y" => *y = v,
        "z" => *z = v,
        "red" => rgb[0] = v,
        "green" => rgb[1] = v,
        "blue" => rgb[2] = v,
        _ => {}
    }
}

pub fn load_ply(path: &Path) -> Result<PointCloud> {
    let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_ply(&data)
}

/// Serialize a cloud. ASCII floats use the shortest round-trip formatting,
/// so write-then-read reproduces coordinates bit-exactly in both encodings.
pub fn write_ply(cloud: &PointCloud, encoding: PlyEncoding) -> Vec<u8> {
    let mut out = Vec::new();
    let has_color = cloud.colors.is_some();
    let fmt = match encoding {
        PlyEncoding::Ascii => "ascii",
        PlyEncoding::BinaryLittleEndian => "binary_little_endian",
    };
    write!(
        out,
        "ply\nformat {fmt} 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\n",
        cloud.len()
    )
    .unwrap();
    if has_color {
        out.extend_from_slice(b"property uchar red\nproperty uchar green\nproperty uchar blue\n");
    }
    out.extend_from_slice(b"end_header\n");

    let color_u8 = |c: f32| (c.clamp(0.0, 1.0) * 255.0).round() as u8;
    for (i, p) in cloud.points.iter().enumerate() {
        match encoding {
            PlyEncoding::Ascii => {
                write!(out, "{} {} {}", p.x, p.y, p.z).unwrap();
                if let Some(cols) = &cloud.colors {
                    let c = cols[i];
                    write!(out, " {} {} {}", color_u8(c[0]), color_u8(c[1]), color_u8(c[2]))
                        .unwrap();
                }
                out.push(b'\n');
            }
            PlyEncoding::BinaryLittleEndian => {
                out.extend_from_slice(&p.x.to_le_bytes());
                out.extend_from_slice(&p.y.to_le_bytes());
                out.extend_from_slice(&p.z.to_le_bytes());
                if let Some(cols) = &cloud.colors {
                    let c = cols[i];
                    out.push(color_u8(c[0]));
                    out.push(color_u8(c[1]));
                    out.push(color_u8(c[2]));
                }
            }
        }
    }
    out
}

pub fn save_ply(cloud: &PointCloud, encoding: PlyEncoding, path: &Path) -> Result<()> {
    std::fs::write(path, write_ply(cloud, encoding)).map_err(|e| Error::io(path, e))
}
