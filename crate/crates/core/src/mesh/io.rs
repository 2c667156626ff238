//! OBJ and PLY mesh reading and writing.
//!
//! OBJ: `v`, `f` (any `a/b/c` form, polygons fan-triangulated, negative
//! relative indices) and `l` (loose edges). Normals and texture coordinates
//! are ignored. PLY: ASCII and binary little-endian, float or double vertex
//! positions, any integer list type for faces.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::{TriMesh, Vec3};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeshFormat {
    Obj,
    PlyAscii,
    PlyBinary,
}

impl MeshFormat {
    pub fn from_path(path: &Path) -> Result<Self> {
        match path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .as_deref()
        {
            Some("obj") => Ok(MeshFormat::Obj),
            Some("ply") => Ok(MeshFormat::PlyBinary),
            _ => Err(Error::format(
                path.display().to_string(),
                "extension",
                "expected .obj or .ply",
            )),
        }
    }
}

pub fn load_mesh(path: impl AsRef<Path>) -> Result<TriMesh> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let name = path.display().to_string();
    if bytes.starts_with(b"ply") {
        parse_ply(&bytes, &name)
    } else {
        let text = String::from_utf8(bytes)
            .map_err(|e| Error::format(&name, format!("byte {}", e.utf8_error().valid_up_to()), "invalid utf-8"))?;
        parse_obj(&text, &name)
    }
}

pub fn save_mesh(mesh: &TriMesh, path: impl AsRef<Path>, format: MeshFormat) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let res = match format {
        MeshFormat::Obj => write_obj(mesh, &mut w),
        MeshFormat::PlyAscii => write_ply(mesh, None, false, &mut w),
        MeshFormat::PlyBinary => write_ply(mesh, None, true, &mut w),
    };
    res.and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

/// Binary PLY with per-vertex `red green blue` uchar properties.
pub fn write_colored_ply(mesh: &TriMesh, colors: &[[u8; 3]], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if colors.len() != mesh.n() {
        return Err(Error::DimensionMismatch {
            expected: mesh.n(),
            got: colors.len(),
        });
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_ply(mesh, Some(colors), true, &mut w)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub(crate) fn parse_obj(text: &str, name: &str) -> Result<TriMesh> {
    let mut verts = Vec::new();
    let mut faces = Vec::new();
    let mut edges = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let loc = || format!("line {}", ln + 1);
        let line = line.split('#').next().unwrap_or("").trim();
        let mut it = line.split_whitespace();
        match it.next() {
            Some("v") => {
                let mut c = [0.0; 3];
                for slot in &mut c {
                    let tok = it
                        .next()
                        .ok_or_else(|| Error::format(name, loc(), "vertex needs 3 coordinates"))?;
                    *slot = tok
                        .parse()
                        .map_err(|_| Error::format(name, loc(), format!("bad coordinate {tok:?}")))?;
                }
                verts.push(Vec3::new(c[0], c[1], c[2]));
            }
            Some(kind @ ("f" | "l")) => {
                let mut idx = Vec::new();
                for tok in it {
                    let first = tok.split('/').next().unwrap_or("");
                    let raw: i64 = first
                        .parse()
                        .map_err(|_| Error::format(name, loc(), format!("bad index {tok:?}")))?;
                    let n = verts.len() as i64;
                    let resolved = if raw > 0 {
                        raw - 1
                    } else if raw < 0 {
                        n + raw
                    } else {
                        return Err(Error::format(
                            name,
                            loc(),
                            "index 0 is out of range (OBJ indices are 1-based)",
                        ));
                    };
                    if resolved < 0 || resolved >= n {
                        return Err(Error::format(
                            name,
                            loc(),
                            format!("index {raw} out of range for {n} vertices"),
                        ));
                    }
                    idx.push(resolved as usize);
                }
                if kind == "f" {
                    if idx.len() < 3 {
                        return Err(Error::format(name, loc(), "face needs at least 3 vertices"));
                    }
                    for k in 1..idx.len() - 1 {
                        faces.push([idx[0], idx[k], idx[k + 1]]);
                    }
                } else {
                    for w in idx.windows(2) {
                        edges.push([w[0], w[1]]);
                    }
                }
            }
            _ => {}
        }
    }
    TriMesh::with_edges(verts, faces, edges).map_err(|e| Error::format(name, "mesh", e.to_string()))
}

fn write_obj<W: Write>(mesh: &TriMesh, w: &mut W) -> std::io::Result<()> {
    for v in mesh.vertices() {
        writeln!(w, "v {} {} {}", v.x, v.y, v.z)?;
    }
    for f in mesh.faces() {
        writeln!(w, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1)?;
    }
    for e in mesh.loose_edges() {
        writeln!(w, "l {} {}", e[0] + 1, e[1] + 1)?;
    }
    Ok(())
}

fn write_ply<W: Write>(
    mesh: &TriMesh,
    colors: Option<&[[u8; 3]]>,
    binary: bool,
    w: &mut W,
) -> std::io::Result<()> {
    writeln!(w, "ply")?;
    if binary {
        writeln!(w, "format binary_little_endian 1.0")?;
    } else {
        writeln!(w, "format ascii 1.0")?;
    }
    writeln!(w, "element vertex {}", mesh.n())?;
    writeln!(w, "property double x")?;
    writeln!(w, "property double y")?;
    writeln!(w, "property double z")?;
    if colors.is_some() {
        writeln!(w, "property uchar red")?;
        writeln!(w, "property uchar green")?;
        writeln!(w, "property uchar blue")?;
    }
    writeln!(w, "element face {}", mesh.faces().len())?;
    writeln!(w, "property list uchar int vertex_indices")?;
    writeln!(w, "end_header")?;
    for (i, v) in mesh.vertices().iter().enumerate() {
        if binary {
            for c in [v.x, v.y, v.z] {
                w.write_all(&c.to_le_bytes())?;
            }
            if let Some(col) = colors {
                w.write_all(&col[i])?;
            }
        } else {
            write!(w, "{} {} {}", v.x, v.y, v.z)?;
            if let Some(col) = colors {
                write!(w, " {} {} {}", col[i][0], col[i][1], col[i][2])?;
            }
            writeln!(w)?;
        }
    }
    for f in mesh.faces() {
        if binary {
            w.write_all(&[3u8])?;
            for &i in f {
                w.write_all(&(i as i32).to_le_bytes())?;
            }
        } else {
            writeln!(w, "3 {} {} {}", f[0], f[1], f[2])?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
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

    fn read_le(self, b: &[u8]) -> f64 {
        match self {
            Scalar::I8 => b[0] as i8 as f64,
            Scalar::U8 => b[0] as f64,
            Scalar::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::I32 => i32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::U32 => u32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

#[derive(Debug, Clone)]
enum Property {
    Scalar { name: String, ty: Scalar },
    List { name: String, count: Scalar, item: Scalar },
}

#[derive(Debug, Clone)]
struct Element {
    name: String,
    count: usize,
    props: Vec<Property>,
}

fn parse_ply(bytes: &[u8], name: &str) -> Result<TriMesh> {
    parse_ply_full(bytes, name).map(|(m, _)| m)
}

/// Loads a PLY mesh together with its per-vertex colors, if present.
pub fn load_colored_ply(path: impl AsRef<Path>) -> Result<(TriMesh, Option<Vec<[u8; 3]>>)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_ply_full(&bytes, &path.display().to_string())
}

fn parse_ply_full(bytes: &[u8], name: &str) -> Result<(TriMesh, Option<Vec<[u8; 3]>>)> {
    let end_tag = b"end_header";
    let hdr_end = bytes
        .windows(end_tag.len())
        .position(|w| w == end_tag)
        .ok_or_else(|| Error::format(name, "header", "missing end_header"))?;
    let mut body_start = hdr_end + end_tag.len();
    if bytes.get(body_start) == Some(&b'\r') {
        body_start += 1;
    }
    if bytes.get(body_start) == Some(&b'\n') {
        body_start += 1;
    }
    let header = std::str::from_utf8(&bytes[..hdr_end])
        .map_err(|_| Error::format(name, "header", "non-ascii header"))?;

    let mut binary = None;
    let mut elements: Vec<Element> = Vec::new();
    for (ln, line) in header.lines().enumerate() {
        let loc = || format!("header line {}", ln + 1);
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            ["ply"] | [] => {}
            ["comment", ..] | ["obj_info", ..] => {}
            ["format", fmt, _] => {
                binary = Some(match *fmt {
                    "ascii" => false,
                    "binary_little_endian" => true,
                    other => return Err(Error::format(name, loc(), format!("unsupported format {other}"))),
                })
            }
            ["element", en, count] => elements.push(Element {
                name: en.to_string(),
                count: count
                    .parse()
                    .map_err(|_| Error::format(name, loc(), "bad element count"))?,
                props: Vec::new(),
            }),
            ["property", "list", ct, it, pn] => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| Error::format(name, loc(), "property before element"))?;
                el.props.push(Property::List {
                    name: pn.to_string(),
                    count: Scalar::parse(ct).ok_or_else(|| Error::format(name, loc(), "bad list count type"))?,
                    item: Scalar::parse(it).ok_or_else(|| Error::format(name, loc(), "bad list item type"))?,
                });
            }
            ["property", ty, pn] => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| Error::format(name, loc(), "property before element"))?;
                el.props.push(Property::Scalar {
                    name: pn.to_string(),
                    ty: Scalar::parse(ty).ok_or_else(|| Error::format(name, loc(), format!("bad type {ty}")))?,
                });
            }
            _ => return Err(Error::format(name, loc(), format!("unrecognized header line {line:?}"))),
        }
    }
    let binary = binary.ok_or_else(|| Error::format(name, "header", "missing format line"))?;

    let mut verts = Vec::new();
    let mut colors = Vec::new();
    let mut faces = Vec::new();
    let mut reader: Box<dyn ValueReader> = if binary {
        Box::new(BinReader {
            data: &bytes[body_start..],
            pos: 0,
            base: body_start,
        })
    } else {
        let text = std::str::from_utf8(&bytes[body_start..])
            .map_err(|_| Error::format(name, "body", "invalid ascii body"))?;
        Box::new(AsciiReader {
            lines: text.lines().collect(),
            line: 0,
            toks: Vec::new(),
            tok: 0,
        })
    };

    for el in &elements {
        for _ in 0..el.count {
            reader.start_record();
            let mut xyz = [None; 3];
            let mut rgb = [None; 3];
            let mut face_idx: Option<Vec<f64>> = None;
            for p in &el.props {
                match p {
                    Property::Scalar { name: pn, ty } => {
                        let v = reader.read(*ty).map_err(|loc| Error::format(name, loc, "truncated data"))?;
                        match pn.as_str() {
                            "x" => xyz[0] = Some(v),
                            "y" => xyz[1] = Some(v),
                            "z" => xyz[2] = Some(v),
                            "red" => rgb[0] = Some(v as u8),
                            "green" => rgb[1] = Some(v as u8),
                            "blue" => rgb[2] = Some(v as u8),
                            _ => {}
                        }
                    }
                    Property::List { name: pn, count, item } => {
                        let c = reader.read(*count).map_err(|loc| Error::format(name, loc, "truncated list"))?;
                        let mut items = Vec::with_capacity(c as usize);
                        for _ in 0..c as usize {
                            items.push(reader.read(*item).map_err(|loc| Error::format(name, loc, "truncated list"))?);
                        }
                        if pn == "vertex_indices" || pn == "vertex_index" {
                            face_idx = Some(items);
                        }
                    }
                }
            }
            if el.name == "vertex" {
                if let [Some(r), Some(g), Some(b)] = rgb {
                    colors.push([r, g, b]);
                }
                match xyz {
                    [Some(x), Some(y), Some(z)] => verts.push(Vec3::new(x, y, z)),
                    _ => return Err(Error::format(name, reader.location(), "vertex lacks x/y/z")),
                }
            } else if el.name == "face" {
                let idx = face_idx.ok_or_else(|| Error::format(name, reader.location(), "face lacks vertex_indices"))?;
                if idx.len() < 3 {
                    return Err(Error::format(name, reader.location(), "face needs at least 3 vertices"));
                }
                let nv = el_count(&elements, "vertex");
                let mut ids = Vec::with_capacity(idx.len());
                for &raw in &idx {
                    if raw < 0.0 || raw as usize >= nv {
                        return Err(Error::format(
                            name,
                            reader.location(),
                            format!("face index {raw} out of range"),
                        ));
                    }
                    ids.push(raw as usize);
                }
                for k in 1..ids.len() - 1 {
                    faces.push([ids[0], ids[k], ids[k + 1]]);
                }
            }
        }
    }
    let colors = (!colors.is_empty() && colors.len() == verts.len()).then_some(colors);
    let mesh = TriMesh::new(verts, faces).map_err(|e| Error::format(name, "mesh", e.to_string()))?;
    Ok((mesh, colors))
}

fn el_count(els: &[Element], name: &str) -> usize {
    els.iter().find(|e| e.name == name).map_or(0, |e| e.count)
}

trait ValueReader {
    fn start_record(&mut self);
    fn read(&mut self, ty: Scalar) -> std::result::Result<f64, String>;
    fn location(&self) -> String;
}

struct BinReader<'a> {
    data: &'a [u8],
    pos: usize,
    base: usize,
}

impl ValueReader for BinReader<'_> {
    fn start_record(&mut self) {}

    fn read(&mut self, ty: Scalar) -> std::result::Result<f64, String> {
        let sz = ty.size();
        if self.pos + sz > self.data.len() {
            return Err(self.location());
        }
        let v = ty.read_le(&self.data[self.pos..self.pos + sz]);
        self.pos += sz;
        Ok(v)
    }

    fn location(&self) -> String {
        format!("byte offset {}", self.base + self.pos)
    }
}

struct AsciiReader<'a> {
    lines: Vec<&'a str>,
    line: usize,
    toks: Vec<&'a str>,
    tok: usize,
}

impl ValueReader for AsciiReader<'_> {
    fn start_record(&mut self) {
        while self.line < self.lines.len() {
            let l = self.lines[self.line].trim();
            self.line += 1;
            if !l.is_empty() {
                self.toks = l.split_whitespace().collect();
                self.tok = 0;
                return;
            }
        }
        self.toks.clear();
        self.tok = 0;
    }

    fn read(&mut self, _ty: Scalar) -> std::result::Result<f64, String> {
        let t = self.toks.get(self.tok).ok_or_else(|| self.location())?;
        self.tok += 1;
        t.parse::<f64>().map_err(|_| self.location())
    }

    fn location(&self) -> String {
        format!("body line {}", self.line)
    }
}
