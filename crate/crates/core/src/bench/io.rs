//! ASCII PLY and XYZ point clouds, transform files, trace CSV and report JSON.
//!
//! Floats are written with Rust's shortest round-trip formatting, so a
//! save/load cycle reproduces every coordinate bit for bit.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use nalgebra::Vector3;

use crate::bench::report::{EnergyTrace, RegistrationReport, StepKind, TraceRecord};
use crate::error::{Error, Result};
use crate::lie::RigidTransform;
use crate::spatial::PointCloud;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CloudFormat {
    PlyAscii,
    Xyz,
}

impl CloudFormat {
    /// `.ply` is PLY; `.xyz`, `.txt` and `.pts` are XYZ.
    pub fn from_path(path: &Path) -> Result<Self> {
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase);
        match ext.as_deref() {
            Some("ply") => Ok(CloudFormat::PlyAscii),
            Some("xyz" | "txt" | "pts") => Ok(CloudFormat::Xyz),
            _ => Err(Error::Format(format!(
                "cannot infer point cloud format of {}; use .ply or .xyz",
                path.display()
            ))),
        }
    }
}

fn parse_err(origin: &str, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: origin.to_string(),
        line,
        msg: msg.into(),
    }
}

fn parse_f64(tok: &str, origin: &str, line: usize) -> Result<f64> {
    let v = tok
        .parse::<f64>()
        .map_err(|_| parse_err(origin, line, format!("invalid number {tok:?}")))?;
    if !v.is_finite() {
        return Err(parse_err(origin, line, format!("non-finite value {tok:?}")));
    }
    Ok(v)
}

fn build_cloud(points: Vec<Vector3<f64>>, normals: Option<Vec<Vector3<f64>>>, origin: &str) -> Result<PointCloud> {
    let Some(normals) = normals else {
        return Ok(PointCloud::new(points));
    };
    match PointCloud::with_normals(points.clone(), normals.clone()) {
        Ok(c) => Ok(c),
        Err(Error::InvalidParameter(_)) => {
            log::warn!("{origin}: normals are not unit length; rescaling");
            PointCloud::with_normalized_normals(points, normals)
                .map_err(|e| Error::Format(format!("{origin}: {e}")))
        }
        Err(e) => Err(e),
    }
}

/// Whitespace-separated rows of 3 (`x y z`) or 6 (`x y z nx ny nz`) values.
/// Blank lines and `#` comments are skipped; every row must have the same width.
pub fn parse_xyz(text: &str, origin: &str) -> Result<PointCloud> {
    let mut width = None;
    let mut points = Vec::new();
    let mut normals = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        let lineno = i + 1;
        if toks.len() != 3 && toks.len() != 6 {
            return Err(parse_err(origin, lineno, format!("expected 3 or 6 columns, found {}", toks.len())));
        }
        match width {
            None => width = Some(toks.len()),
            Some(w) if w != toks.len() => {
                return Err(parse_err(origin, lineno, format!("expected {w} columns, found {}", toks.len())));
            }
            _ => {}
        }
        let v: Vec<f64> = toks
            .iter()
            .map(|t| parse_f64(t, origin, lineno))
            .collect::<Result<_>>()?;
        points.push(Vector3::new(v[0], v[1], v[2]));
        if v.len() == 6 {
            normals.push(Vector3::new(v[3], v[4], v[5]));
        }
    }
    let normals = (width == Some(6)).then_some(normals);
    build_cloud(points, normals, origin)
}

pub fn write_xyz(cloud: &PointCloud) -> String {
    let mut out = String::new();
    for (i, p) in cloud.points().iter().enumerate() {
        write!(out, "{:?} {:?} {:?}", p.x, p.y, p.z).unwrap();
        if let Some(ns) = cloud.normals() {
            let n = ns[i];
            write!(out, " {:?} {:?} {:?}", n.x, n.y, n.z).unwrap();
        }
        out.push('\n');
    }
    out
}

struct PlyElement {
    name: String,
    count: usize,
    /// Scalar property names; `None` marks a list property.
    props: Vec<Option<String>>,
}

const SCALAR_TYPES: &[&str] = &[
    "char", "uchar", "short", "ushort", "int", "uint", "float", "double", "int8", "uint8", "int16",
    "uint16", "int32", "uint32", "float32", "float64",
];

/// ASCII PLY. Only the `vertex` element is read; its `x y z` and optional
/// `nx ny nz` properties are used and any other property is skipped with a
/// warning. Lines of other elements are skipped.
pub fn parse_ply(text: &str, origin: &str) -> Result<PointCloud> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    match lines.next() {
        Some((_, l)) if l.trim() == "ply" => {}
        _ => return Err(parse_err(origin, 1, "missing 'ply' magic line")),
    }
    let mut elements: Vec<PlyElement> = Vec::new();
    let mut saw_format = false;
    let mut last_line = 1;
    loop {
        let Some((n, raw)) = lines.next() else {
            return Err(parse_err(origin, last_line, "header has no end_header"));
        };
        last_line = n;
        let toks: Vec<&str> = raw.split_whitespace().collect();
        match toks.as_slice() {
            [] => {}
            ["comment" | "obj_info", ..] => {}
            ["format", "ascii", _] => saw_format = true,
            ["format", kind, ..] => {
                return Err(Error::Format(format!("{origin}: PLY format '{kind}' is not supported, only ascii")));
            }
            ["element", name, count] => {
                let count = count
                    .parse::<usize>()
                    .map_err(|_| parse_err(origin, n, format!("invalid element count {count:?}")))?;
                elements.push(PlyElement {
                    name: name.to_string(),
                    count,
                    props: Vec::new(),
                });
            }
            ["property", "list", _, _, _name] => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| parse_err(origin, n, "property before any element"))?;
                el.props.push(None);
            }
            ["property", ty, name] => {
                if !SCALAR_TYPES.contains(ty) {
                    return Err(parse_err(origin, n, format!("unknown property type {ty:?}")));
                }
                let el = elements
                    .last_mut()
                    .ok_or_else(|| parse_err(origin, n, "property before any element"))?;
                el.props.push(Some(name.to_string()));
            }
            ["end_header"] => break,
            _ => return Err(parse_err(origin, n, format!("unrecognized header line {:?}", raw.trim()))),
        }
    }
    if !saw_format {
        return Err(parse_err(origin, last_line, "header has no format line"));
    }
    let vertex_pos = elements
        .iter()
        .position(|e| e.name == "vertex")
        .ok_or_else(|| Error::Format(format!("{origin}: PLY has no vertex element")))?;

    let vertex = &elements[vertex_pos];
    if vertex.props.iter().any(Option::is_none) {
        return Err(Error::Format(format!("{origin}: list properties on vertices are not supported")));
    }
    let names: Vec<&str> = vertex.props.iter().map(|p| p.as_deref().unwrap()).collect();
    let col = |name: &str| names.iter().position(|p| *p == name);
    let (Some(ix), Some(iy), Some(iz)) = (col("x"), col("y"), col("z")) else {
        return Err(Error::Format(format!("{origin}: vertex element lacks x, y or z")));
    };
    let normal_cols = match (col("nx"), col("ny"), col("nz")) {
        (Some(a), Some(b), Some(c)) => Some([a, b, c]),
        (None, None, None) => None,
        _ => {
            log::warn!("{origin}: incomplete normal properties ignored");
            None
        }
    };
    for name in &names {
        let known = ["x", "y", "z"].contains(name)
            || (normal_cols.is_some() && ["nx", "ny", "nz"].contains(name));
        if !known {
            log::warn!("{origin}: skipping vertex property '{name}'");
        }
    }

    let mut data = lines.filter(|(_, l)| !l.trim().is_empty());
    let mut points = Vec::with_capacity(vertex.count);
    let mut normals = normal_cols.map(|_| Vec::with_capacity(vertex.count));
    for (ei, el) in elements.iter().enumerate() {
        for _ in 0..el.count {
            let Some((n, raw)) = data.next() else {
                return Err(parse_err(
                    origin,
                    text.lines().count(),
                    format!("unexpected end of file in element '{}'", el.name),
                ));
            };
            if ei != vertex_pos {
                continue;
            }
            let toks: Vec<&str> = raw.split_whitespace().collect();
            if toks.len() != names.len() {
                return Err(parse_err(origin, n, format!("expected {} values, found {}", names.len(), toks.len())));
            }
            let get = |i: usize| parse_f64(toks[i], origin, n);
            points.push(Vector3::new(get(ix)?, get(iy)?, get(iz)?));
            if let (Some(ns), Some([a, b, c])) = (normals.as_mut(), normal_cols) {
                ns.push(Vector3::new(get(a)?, get(b)?, get(c)?));
            }
        }
    }
    if let Some((n, _)) = data.next() {
        return Err(parse_err(origin, n, "data after the last element"));
    }
    build_cloud(points, normals, origin)
}

pub fn write_ply(cloud: &PointCloud) -> String {
    let mut out = String::from("ply\nformat ascii 1.0\n");
    writeln!(out, "element vertex {}", cloud.len()).unwrap();
    out.push_str("property double x\nproperty double y\nproperty double z\n");
    if cloud.has_normals() {
        out.push_str("property double nx\nproperty double ny\nproperty double nz\n");
    }
    out.push_str("end_header\n");
    out.push_str(&write_xyz(cloud));
    out
}

pub fn load_cloud(path: &Path, format: CloudFormat) -> Result<PointCloud> {
    let text = fs::read_to_string(path)?;
    let origin = path.display().to_string();
    match format {
        CloudFormat::PlyAscii => parse_ply(&text, &origin),
        CloudFormat::Xyz => parse_xyz(&text, &origin),
    }
}

pub fn save_cloud(cloud: &PointCloud, path: &Path, format: CloudFormat) -> Result<()> {
    let text = match format {
        CloudFormat::PlyAscii => write_ply(cloud),
        CloudFormat::Xyz => write_xyz(cloud),
    };
    fs::write(path, text)?;
    Ok(())
}

/// Loads a cloud, inferring the format from the extension.
pub fn load_cloud_auto(path: &Path) -> Result<PointCloud> {
    load_cloud(path, CloudFormat::from_path(path)?)
}

pub fn save_cloud_auto(cloud: &PointCloud, path: &Path) -> Result<()> {
    save_cloud(cloud, path, CloudFormat::from_path(path)?)
}

pub fn load_transform(path: &Path) -> Result<RigidTransform> {
    RigidTransform::from_text(&fs::read_to_string(path)?, &path.display().to_string())
}

pub fn save_transform(t: &RigidTransform, path: &Path) -> Result<()> {
    fs::write(path, t.to_text())?;
    Ok(())
}

pub const TRACE_HEADER: &str = "stage,iter,nu,energy,accepted,delta_T_fro,wall_ms";

/// One row per accepted iterate; `nu` is empty for the un-robust solvers.
pub fn write_trace_csv(trace: &EnergyTrace) -> String {
    let mut out = String::from(TRACE_HEADER);
    out.push('\n');
    for r in trace.records() {
        let nu = r.nu.map(|v| format!("{v:?}")).unwrap_or_default();
        writeln!(
            out,
            "{},{},{},{:?},{},{:?},{:?}",
            r.stage,
            r.iter,
            nu,
            r.energy,
            r.step.as_str(),
            r.delta_t_fro,
            r.wall_ms
        )
        .unwrap();
    }
    out
}

pub fn parse_trace_csv(text: &str, origin: &str) -> Result<EnergyTrace> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == TRACE_HEADER => {}
        _ => return Err(parse_err(origin, 1, format!("expected header {TRACE_HEADER:?}"))),
    }
    let mut records = Vec::new();
    for (i, raw) in lines {
        let n = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = raw.split(',').map(str::trim).collect();
        if f.len() != 7 {
            return Err(parse_err(origin, n, format!("expected 7 fields, found {}", f.len())));
        }
        let int = |s: &str| s.parse::<usize>().map_err(|_| parse_err(origin, n, format!("invalid integer {s:?}")));
        let num = |s: &str| s.parse::<f64>().map_err(|_| parse_err(origin, n, format!("invalid number {s:?}")));
        records.push(TraceRecord {
            stage: int(f[0])?,
            iter: int(f[1])?,
            nu: if f[2].is_empty() { None } else { Some(num(f[2])?) },
            energy: num(f[3])?,
            step: StepKind::from_str(f[4]).map_err(|_| parse_err(origin, n, format!("invalid step kind {:?}", f[4])))?,
            delta_t_fro: num(f[5])?,
            wall_ms: num(f[6])?,
        });
    }
    Ok(EnergyTrace::from_records(records))
}

pub fn save_trace_csv(trace: &EnergyTrace, path: &Path) -> Result<()> {
    fs::write(path, write_trace_csv(trace))?;
    Ok(())
}

pub fn save_report_json(report: &RegistrationReport, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(report)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn load_report_json(path: &Path) -> Result<RegistrationReport> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}
