//! PLY export and import of surfel maps, plus a point reader for reference
//! clouds.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::surfel::{KeyframeId, Surfel};

const SURFEL_HEADER_PROPS: &str = "\
property float x
property float y
property float z
property float nx
property float ny
property float nz
property uchar gray
property float radius
property float weight
property int update_count
property int keyframe_id
";

/// Writes surfels as binary little-endian PLY.
pub fn write_surfels<'a, W: Write>(mut w: W, surfels: impl ExactSizeIterator<Item = &'a Surfel>) -> io::Result<()> {
    write!(
        w,
        "ply\nformat binary_little_endian 1.0\ncomment surfel map\nelement vertex {}\n{SURFEL_HEADER_PROPS}end_header\n",
        surfels.len()
    )?;
    let mut rec = [0u8; 41];
    for s in surfels {
        let floats = [s.position.x, s.position.y, s.position.z, s.normal.x, s.normal.y, s.normal.z];
        for (i, v) in floats.iter().enumerate() {
            rec[i * 4..i * 4 + 4].copy_from_slice(&(*v as f32).to_le_bytes());
        }
        rec[24] = s.intensity.round().clamp(0.0, 255.0) as u8;
        rec[25..29].copy_from_slice(&(s.radius as f32).to_le_bytes());
        rec[29..33].copy_from_slice(&(s.weight as f32).to_le_bytes());
        rec[33..37].copy_from_slice(&(s.update_count.min(i32::MAX as u32) as i32).to_le_bytes());
        rec[37..41].copy_from_slice(&(s.attached_keyframe.0.min(i32::MAX as u32) as i32).to_le_bytes());
        w.write_all(&rec)?;
    }
    w.flush()
}

pub fn export_ply<'a>(path: &Path, surfels: impl ExactSizeIterator<Item = &'a Surfel>) -> Result<()> {
    let file = File::create(path).map_err(|e| load_err(path, e))?;
    write_surfels(BufWriter::new(file), surfels).map_err(|e| load_err(path, e))
}

fn load_err(path: &Path, e: impl ToString) -> Error {
    Error::Load {
        path: path.to_path_buf(),
        msg: e.to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
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

    fn decode(self, b: &[u8]) -> f64 {
        match self {
            Self::I8 => b[0] as i8 as f64,
            Self::U8 => b[0] as f64,
            Self::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Self::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Self::I32 => i32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::U32 => u32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

#[derive(Debug, PartialEq, Eq)]
enum Format {
    Ascii,
    BinaryLe,
}

#[derive(Debug)]
struct Element {
    name: String,
    count: usize,
    /// `None` marks a list property, which is only supported after the
    /// vertex element.
    props: Vec<(String, Option<Scalar>)>,
}

struct Header {
    format: Format,
    elements: Vec<Element>,
}

fn read_header<R: BufRead>(r: &mut R) -> std::result::Result<Header, String> {
    let mut line = String::new();
    let mut next = |line: &mut String| -> std::result::Result<(), String> {
        line.clear();
        match r.read_line(line) {
            Ok(0) => Err("unexpected end of header".into()),
            Ok(_) => Ok(()),
            Err(e) => Err(e.to_string()),
        }
    };
    next(&mut line)?;
    if line.trim_end() != "ply" {
        return Err("missing 'ply' magic".into());
    }
    let mut format = None;
    let mut elements: Vec<Element> = Vec::new();
    loop {
        next(&mut line)?;
        let tok: Vec<&str> = line.split_whitespace().collect();
        match tok.as_slice() {
            ["end_header"] => break,
            ["format", "ascii", _] => format = Some(Format::Ascii),
            ["format", "binary_little_endian", _] => format = Some(Format::BinaryLe),
            ["format", f, ..] => return Err(format!("unsupported format '{f}'")),
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", name, count] => elements.push(Element {
                name: name.to_string(),
                count: count.parse().map_err(|_| format!("bad element count '{count}'"))?,
                props: Vec::new(),
            }),
            ["property", "list", _, _, name] => elements
                .last_mut()
                .ok_or("property before element")?
                .props
                .push((name.to_string(), None)),
            ["property", ty, name] => {
                let ty = Scalar::parse(ty).ok_or_else(|| format!("unknown property type '{ty}'"))?;
                elements
                    .last_mut()
                    .ok_or("property before element")?
                    .props
                    .push((name.to_string(), Some(ty)));
            }
            _ => return Err(format!("unrecognized header line '{}'", line.trim_end())),
        }
    }
    Ok(Header {
        format: format.ok_or("missing format line")?,
        elements,
    })
}

/// Reads the vertex element as rows of `f64`, one value per listed name.
/// Missing optional columns come back as `None`.
type Columns = (Vec<Option<usize>>, Vec<Vec<f64>>);

fn read_vertex_columns<R: BufRead>(mut r: R, wanted: &[&str]) -> std::result::Result<Columns, String> {
    let header = read_header(&mut r)?;
    let mut rows = Vec::new();
    for el in &header.elements {
        let scalar_only = el.props.iter().all(|(_, t)| t.is_some());
        if el.name != "vertex" {
            if !scalar_only {
                return Err(format!("list properties in element '{}' before vertex are not supported", el.name));
            }
            skip_element(&mut r, &header.format, el)?;
            continue;
        }
        if !scalar_only {
            return Err("list properties in vertex element are not supported".into());
        }
        let columns: Vec<Option<usize>> = wanted.iter().map(|w| el.props.iter().position(|(n, _)| n == w)).collect();
        let types: Vec<Scalar> = el.props.iter().map(|(_, t)| t.unwrap()).collect();
        let row_size: usize = types.iter().map(|t| t.size()).sum();
        let mut buf = vec![0u8; row_size];
        let mut line = String::new();
        for i in 0..el.count {
            let values: Vec<f64> = match header.format {
                Format::BinaryLe => {
                    r.read_exact(&mut buf).map_err(|_| format!("truncated vertex data at vertex {i}"))?;
                    let mut off = 0;
                    types
                        .iter()
                        .map(|t| {
                            let v = t.decode(&buf[off..]);
                            off += t.size();
                            v
                        })
                        .collect()
                }
                Format::Ascii => {
                    line.clear();
                    r.read_line(&mut line).map_err(|e| e.to_string())?;
                    let v: Vec<f64> = line
                        .split_whitespace()
                        .map(|t| t.parse().map_err(|_| format!("bad value '{t}' at vertex {i}")))
                        .collect::<std::result::Result<_, _>>()?;
                    if v.len() != types.len() {
                        return Err(format!("vertex {i} has {} values, expected {}", v.len(), types.len()));
                    }
                    v
                }
            };
            rows.push(columns.iter().map(|c| c.map_or(0.0, |c| values[c])).collect());
        }
        return Ok((columns, rows));
    }
    Err("no vertex element".into())
}

fn skip_element<R: BufRead>(r: &mut R, format: &Format, el: &Element) -> std::result::Result<(), String> {
    match format {
        Format::BinaryLe => {
            let size: usize = el.props.iter().map(|(_, t)| t.unwrap().size()).sum();
            let n = (size * el.count) as u64;
            let skipped = io::copy(&mut r.take(n), &mut io::sink()).map_err(|e| e.to_string())?;
            if skipped != n {
                return Err(format!("truncated element '{}'", el.name));
            }
        }
        Format::Ascii => {
            let mut line = String::new();
            for _ in 0..el.count {
                line.clear();
                r.read_line(&mut line).map_err(|e| e.to_string())?;
            }
        }
    }
    Ok(())
}

/// Reads surfels written by [`write_surfels`]. `gray`, `update_count` and
/// `keyframe_id` are optional.
pub fn read_surfels<R: BufRead>(r: R) -> std::result::Result<Vec<Surfel>, String> {
    const NAMES: [&str; 11] = ["x", "y", "z", "nx", "ny", "nz", "gray", "radius", "weight", "update_count", "keyframe_id"];
    let (columns, rows) = read_vertex_columns(r, &NAMES)?;
    for (i, name) in NAMES.iter().enumerate() {
        if columns[i].is_none() && !matches!(*name, "gray" | "update_count" | "keyframe_id") {
            return Err(format!("vertex property '{name}' missing"));
        }
    }
    Ok(rows
        .into_iter()
        .map(|v| Surfel {
            position: Vector3::new(v[0], v[1], v[2]),
            normal: Vector3::new(v[3], v[4], v[5]),
            intensity: v[6],
            radius: v[7],
            weight: v[8],
            update_count: v[9].max(0.0) as u32,
            attached_keyframe: KeyframeId(v[10].max(0.0) as u32),
        })
        .collect())
}

pub fn import_ply(path: &Path) -> Result<Vec<Surfel>> {
    let file = File::open(path).map_err(|e| load_err(path, e))?;
    read_surfels(BufReader::new(file)).map_err(|e| load_err(path, e))
}

/// Reads vertex positions from any ASCII or binary little-endian PLY.
pub fn read_points(path: &Path) -> Result<Vec<Vector3<f64>>> {
    let file = File::open(path).map_err(|e| load_err(path, e))?;
    let (columns, rows) = read_vertex_columns(BufReader::new(file), &["x", "y", "z"]).map_err(|e| load_err(path, e))?;
    if columns.iter().any(Option::is_none) {
        return Err(load_err(path, "vertex element lacks x, y or z"));
    }
    Ok(rows.into_iter().map(|v| Vector3::new(v[0], v[1], v[2])).collect())
}
