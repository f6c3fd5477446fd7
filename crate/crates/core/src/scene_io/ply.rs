//! PLY point clouds and triangle meshes (ASCII and binary little-endian).

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::geometry::Vec3;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlyEncoding {
    Ascii,
    BinaryLittleEndian,
}

/// Vertex positions with optional attributes and faces.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PlyData {
    pub positions: Vec<Vec3>,
    pub normals: Option<Vec<Vec3>>,
    pub colors: Option<Vec<[u8; 3]>>,
    /// Extra per-vertex integer properties, written as `int`.
    pub int_properties: Vec<(String, Vec<i32>)>,
    pub faces: Vec<[u32; 3]>,
    /// Store positions and normals as `double` instead of `float`.
    pub double_precision: bool,
}

impl PlyData {
    pub fn from_points(points: Vec<Vec3>) -> Self {
        PlyData { positions: points, ..Default::default() }
    }

    pub fn int_property(&self, name: &str) -> Option<&[i32]> {
        self.int_properties.iter().find(|(n, _)| n == name).map(|(_, v)| v.as_slice())
    }
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
    fn parse(name: &str) -> Result<Scalar> {
        Ok(match name {
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            other => return Err(Error::Ply(format!("unknown scalar type `{other}`"))),
        })
    }

    fn read_le(self, r: &mut impl Read) -> Result<f64> {
        let mut b = [0u8; 8];
        let n = match self {
            Scalar::I8 | Scalar::U8 => 1,
            Scalar::I16 | Scalar::U16 => 2,
            Scalar::I32 | Scalar::U32 | Scalar::F32 => 4,
            Scalar::F64 => 8,
        };
        r.read_exact(&mut b[..n]).map_err(|e| Error::Ply(format!("truncated binary body: {e}")))?;
        Ok(match self {
            Scalar::I8 => b[0] as i8 as f64,
            Scalar::U8 => b[0] as f64,
            Scalar::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::I32 => i32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::U32 => u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::F32 => f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::F64 => f64::from_le_bytes(b),
        })
    }
}

#[derive(Debug)]
enum Property {
    Scalar { name: String, ty: Scalar },
    List { name: String, count: Scalar, item: Scalar },
}

#[derive(Debug)]
struct Element {
    name: String,
    count: usize,
    props: Vec<Property>,
}

fn parse_header(r: &mut impl BufRead) -> Result<(PlyEncoding, Vec<Element>)> {
    let mut line = String::new();
    let mut next = |line: &mut String| -> Result<bool> {
        line.clear();
        let n = r.read_line(line).map_err(|e| Error::Ply(e.to_string()))?;
        Ok(n > 0)
    };
    if !next(&mut line)? || line.trim() != "ply" {
        return Err(Error::Ply("missing `ply` magic".into()));
    }
    let mut encoding = None;
    let mut elements: Vec<Element> = Vec::new();
    loop {
        if !next(&mut line)? {
            return Err(Error::Ply("header not terminated by end_header".into()));
        }
        let tok: Vec<&str> = line.split_whitespace().collect();
        match tok.as_slice() {
            ["format", fmt, _] => {
                encoding = Some(match *fmt {
                    "ascii" => PlyEncoding::Ascii,
                    "binary_little_endian" => PlyEncoding::BinaryLittleEndian,
                    "binary_big_endian" => {
                        return Err(Error::Ply("big-endian bodies are not supported".into()))
                    }
                    other => return Err(Error::Ply(format!("unknown format `{other}`"))),
                });
            }
            ["format", ..] if encoding.is_some() => {
                return Err(Error::Ply("conflicting format lines".into()));
            }
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", name, count] => elements.push(Element {
                name: name.to_string(),
                count: count.parse().map_err(|_| Error::Ply(format!("bad element count `{count}`")))?,
                props: Vec::new(),
            }),
            ["property", "list", count, item, name] => {
                let el = elements.last_mut().ok_or_else(|| Error::Ply("property before element".into()))?;
                el.props.push(Property::List {
                    name: name.to_string(),
                    count: Scalar::parse(count)?,
                    item: Scalar::parse(item)?,
                });
            }
            ["property", ty, name] => {
                let el = elements.last_mut().ok_or_else(|| Error::Ply("property before element".into()))?;
                el.props.push(Property::Scalar { name: name.to_string(), ty: Scalar::parse(ty)? });
            }
            ["end_header"] => break,
            _ => return Err(Error::Ply(format!("unrecognized header line `{}`", line.trim()))),
        }
    }
    let encoding = encoding.ok_or_else(|| Error::Ply("missing format line".into()))?;
    Ok((encoding, elements))
}

/// Reads one element instance: scalar properties and list properties.
fn read_record(
    encoding: PlyEncoding,
    el: &Element,
    r: &mut impl BufRead,
    line: &mut String,
) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let mut scalars = Vec::with_capacity(el.props.len());
    let mut lists = Vec::new();
    match encoding {
        PlyEncoding::Ascii => {
            line.clear();
            loop {
                if r.read_line(line).map_err(|e| Error::Ply(e.to_string()))? == 0 {
                    return Err(Error::Ply(format!("unexpected end of file in `{}`", el.name)));
                }
                if !line.trim().is_empty() {
                    break;
                }
                line.clear();
            }
            let mut tok = line.split_whitespace().map(|t| {
                t.parse::<f64>().map_err(|_| Error::Ply(format!("bad number `{t}`")))
            });
            let mut take = || tok.next().unwrap_or_else(|| Err(Error::Ply("short ascii record".into())));
            for p in &el.props {
                match p {
                    Property::Scalar { .. } => scalars.push(take()?),
                    Property::List { .. } => {
                        let n = take()? as usize;
                        lists.push((0..n).map(|_| take()).collect::<Result<Vec<_>>>()?);
                    }
                }
            }
        }
        PlyEncoding::BinaryLittleEndian => {
            for p in &el.props {
                match p {
                    Property::Scalar { ty, .. } => scalars.push(ty.read_le(r)?),
                    Property::List { count, item, .. } => {
                        let n = count.read_le(r)? as usize;
                        lists.push((0..n).map(|_| item.read_le(r)).collect::<Result<Vec<_>>>()?);
                    }
                }
            }
        }
    }
    Ok((scalars, lists))
}

pub fn load_ply(path: &Path) -> Result<PlyData> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_ply(&mut BufReader::new(file))
}

pub fn read_ply(r: &mut impl BufRead) -> Result<PlyData> {
    let (encoding, elements) = parse_header(r)?;
    let mut data = PlyData::default();
    let mut line = String::new();
    for el in &elements {
        let scalar_names: Vec<(&str, Scalar)> = el
            .props
            .iter()
            .filter_map(|p| match p {
                Property::Scalar { name, ty } => Some((name.as_str(), *ty)),
                Property::List { .. } => None,
            })
            .collect();
        let find = |n: &str| scalar_names.iter().position(|(name, _)| *name == n);
        match el.name.as_str() {
            "vertex" => {
                let xyz = ["x", "y", "z"].map(find);
                if xyz.iter().any(Option::is_none) {
                    return Err(Error::Ply("vertex element lacks x, y or z".into()));
                }
                let xyz = xyz.map(Option::unwrap);
                data.double_precision = scalar_names[xyz[0]].1 == Scalar::F64;
                let nxyz = ["nx", "ny", "nz"].map(find);
                let has_normals = nxyz.iter().all(Option::is_some);
                let rgb = ["red", "green", "blue"].map(find);
                let has_rgb = rgb.iter().all(Option::is_some);
                let extra: Vec<(usize, &str)> = scalar_names
                    .iter()
                    .enumerate()
                    .filter(|(_, (n, ty))| {
                        !["x", "y", "z", "nx", "ny", "nz", "red", "green", "blue"].contains(n)
                            && matches!(ty, Scalar::I8 | Scalar::U8 | Scalar::I16 | Scalar::U16 | Scalar::I32 | Scalar::U32)
                    })
                    .map(|(i, (n, _))| (i, *n))
                    .collect();
                let mut normals = Vec::new();
                let mut colors = Vec::new();
                let mut ints: Vec<Vec<i32>> = vec![Vec::with_capacity(el.count); extra.len()];
                data.positions.reserve(el.count);
                for _ in 0..el.count {
                    let (s, _) = read_record(encoding, el, r, &mut line)?;
                    data.positions.push(Vec3::new(s[xyz[0]], s[xyz[1]], s[xyz[2]]));
                    if has_normals {
                        normals.push(Vec3::new(s[nxyz[0].unwrap()], s[nxyz[1].unwrap()], s[nxyz[2].unwrap()]));
                    }
                    if has_rgb {
                        let c = rgb.map(|i| {
                            let (v, ty) = (s[i.unwrap()], scalar_names[i.unwrap()].1);
                            if matches!(ty, Scalar::F32 | Scalar::F64) { (v * 255.0).round() as u8 } else { v as u8 }
                        });
                        colors.push(c);
                    }
                    for (slot, (i, _)) in extra.iter().enumerate() {
                        ints[slot].push(s[*i] as i32);
                    }
                }
                data.normals = has_normals.then_some(normals);
                data.colors = has_rgb.then_some(colors);
                data.int_properties =
                    extra.iter().zip(ints).map(|((_, n), v)| (n.to_string(), v)).collect();
            }
            "face" => {
                if !el.props.iter().any(|p| matches!(p, Property::List { name, .. } if name == "vertex_indices" || name == "vertex_index")) {
                    return Err(Error::Ply("face element lacks vertex_indices".into()));
                }
                for _ in 0..el.count {
                    let (_, lists) = read_record(encoding, el, r, &mut line)?;
                    let idx = &lists[0];
                    // fan-triangulate polygons
                    for k in 1..idx.len().saturating_sub(1) {
                        data.faces.push([idx[0] as u32, idx[k] as u32, idx[k + 1] as u32]);
                    }
                }
            }
            _ => {
                for _ in 0..el.count {
                    read_record(encoding, el, r, &mut line)?;
                }
            }
        }
    }
    let n = data.positions.len() as u32;
    if data.faces.iter().flatten().any(|&i| i >= n) {
        return Err(Error::Ply("face index out of range".into()));
    }
    Ok(data)
}

pub fn save_ply(path: &Path, data: &PlyData, encoding: PlyEncoding) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_ply(&mut w, data, encoding).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_ply(w: &mut impl Write, data: &PlyData, encoding: PlyEncoding) -> std::io::Result<()> {
    let n = data.positions.len();
    let fty = if data.double_precision { "double" } else { "float" };
    writeln!(w, "ply")?;
    writeln!(
        w,
        "format {} 1.0",
        match encoding {
            PlyEncoding::Ascii => "ascii",
            PlyEncoding::BinaryLittleEndian => "binary_little_endian",
        }
    )?;
    writeln!(w, "element vertex {n}")?;
    for c in ["x", "y", "z"] {
        writeln!(w, "property {fty} {c}")?;
    }
    if data.normals.is_some() {
        for c in ["nx", "ny", "nz"] {
            writeln!(w, "property {fty} {c}")?;
        }
    }
    if data.colors.is_some() {
        for c in ["red", "green", "blue"] {
            writeln!(w, "property uchar {c}")?;
        }
    }
    for (name, _) in &data.int_properties {
        writeln!(w, "property int {name}")?;
    }
    if !data.faces.is_empty() {
        writeln!(w, "element face {}", data.faces.len())?;
        writeln!(w, "property list uchar int vertex_indices")?;
    }
    writeln!(w, "end_header")?;

    let put_vec = |w: &mut dyn Write, v: &Vec3| -> std::io::Result<()> {
        match (encoding, data.double_precision) {
            (PlyEncoding::Ascii, true) => write!(w, "{} {} {}", v.x, v.y, v.z),
            (PlyEncoding::Ascii, false) => write!(w, "{} {} {}", v.x as f32, v.y as f32, v.z as f32),
            (PlyEncoding::BinaryLittleEndian, true) => {
                v.iter().try_for_each(|c| w.write_all(&c.to_le_bytes()))
            }
            (PlyEncoding::BinaryLittleEndian, false) => {
                v.iter().try_for_each(|c| w.write_all(&(*c as f32).to_le_bytes()))
            }
        }
    };
    let ascii = encoding == PlyEncoding::Ascii;
    for i in 0..n {
        put_vec(w, &data.positions[i])?;
        if let Some(normals) = &data.normals {
            if ascii {
                write!(w, " ")?;
            }
            put_vec(w, &normals[i])?;
        }
        if let Some(colors) = &data.colors {
            if ascii {
                write!(w, " {} {} {}", colors[i][0], colors[i][1], colors[i][2])?;
            } else {
                w.write_all(&colors[i])?;
            }
        }
        for (_, vals) in &data.int_properties {
            if ascii {
                write!(w, " {}", vals[i])?;
            } else {
                w.write_all(&vals[i].to_le_bytes())?;
            }
        }
        if ascii {
            writeln!(w)?;
        }
    }
    for f in &data.faces {
        if ascii {
            writeln!(w, "3 {} {} {}", f[0], f[1], f[2])?;
        } else {
            w.write_all(&[3u8])?;
            for i in f {
                w.write_all(&(*i as i32).to_le_bytes())?;
            }
        }
    }
    Ok(())
}
