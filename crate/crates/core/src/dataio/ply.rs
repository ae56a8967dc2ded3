//! ASCII PLY reader and writer.
//!
//! Only the `vertex` element is interpreted: `x`, `y`, `z` are required,
//! `label` (non-zero = anomalous) and `anomaly_score` are optional. Other
//! elements are skipped line by line.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::{io_err, DataError};
use crate::detect::min_max_normalize;
use crate::geom::{Point3, PointCloud};
use crate::Real;

/// Contents of a PLY file.
#[derive(Debug, Clone, PartialEq)]
pub struct PlyData<T> {
    pub cloud: PointCloud<T>,
    pub scores: Option<Vec<T>>,
}

struct Element {
    name: String,
    count: usize,
    props: Vec<String>,
}

/// Reads points, labels and scores.
pub fn read_ply<T: Real>(path: &Path) -> Result<PlyData<T>, DataError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse(&text, path)
}

/// Reads points and labels.
pub fn load_ply<T: Real>(path: &Path) -> Result<PointCloud<T>, DataError> {
    read_ply(path).map(|d| d.cloud)
}

fn parse<T: Real>(text: &str, path: &Path) -> Result<PlyData<T>, DataError> {
    let perr = |line: usize, message: String| DataError::Parse {
        path: PathBuf::from(path),
        line,
        message,
    };
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    match lines.next() {
        Some((_, "ply")) => {}
        _ => return Err(perr(1, "missing 'ply' magic".into())),
    }
    let mut elements: Vec<Element> = Vec::new();
    let mut vertex_line = 0;
    let mut header_end = None;
    for (no, line) in lines.by_ref() {
        let mut w = line.split_whitespace();
        match w.next() {
            Some("format") => {
                let fmt = w.next().unwrap_or("");
                if fmt != "ascii" {
                    return Err(DataError::UnsupportedFormat {
                        path: path.into(),
                        format: fmt.into(),
                    });
                }
            }
            Some("element") => {
                let name = w
                    .next()
                    .ok_or_else(|| perr(no, "element without a name".into()))?;
                let count = w
                    .next()
                    .and_then(|c| c.parse().ok())
                    .ok_or_else(|| perr(no, format!("element '{name}' without a valid count")))?;
                if name == "vertex" {
                    vertex_line = no;
                }
                elements.push(Element {
                    name: name.into(),
                    count,
                    props: Vec::new(),
                });
            }
            Some("property") => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| perr(no, "property before any element".into()))?;
                let name = line.split_whitespace().last().unwrap_or("");
                el.props.push(name.into());
            }
            Some("end_header") => {
                header_end = Some(no);
                break;
            }
            Some("comment") | Some("obj_info") | None => {}
            Some(other) => return Err(perr(no, format!("unknown header keyword '{other}'"))),
        }
    }
    let header_end =
        header_end.ok_or_else(|| perr(text.lines().count(), "missing end_header".into()))?;
    let vertex = elements
        .iter()
        .find(|e| e.name == "vertex")
        .ok_or_else(|| perr(header_end, "no vertex element".into()))?;
    let col = |name: &str| vertex.props.iter().position(|p| p == name);
    let (cx, cy, cz) = match (col("x"), col("y"), col("z")) {
        (Some(x), Some(y), Some(z)) => (x, y, z),
        _ => {
            return Err(perr(
                vertex_line,
                "vertex element lacks x/y/z properties".into(),
            ))
        }
    };
    let (c_label, c_score) = (col("label"), col("anomaly_score"));

    let mut points = Vec::with_capacity(vertex.count);
    let mut labels = Vec::new();
    let mut scores = Vec::new();
    for el in &elements {
        for k in 0..el.count {
            let (no, line) = lines.next().ok_or_else(|| {
                perr(
                    vertex_line,
                    format!(
                        "header declares {} '{}' entries but the data ends after {k}",
                        el.count, el.name
                    ),
                )
            })?;
            if el.name != "vertex" {
                continue;
            }
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|v| {
                    v.parse::<f64>()
                        .map_err(|_| perr(no, format!("not a number: '{v}'")))
                })
                .collect::<Result<_, _>>()?;
            if vals.len() != el.props.len() {
                return Err(perr(
                    no,
                    format!("expected {} values, found {}", el.props.len(), vals.len()),
                ));
            }
            points.push(Point3::new(
                T::lit(vals[cx]),
                T::lit(vals[cy]),
                T::lit(vals[cz]),
            ));
            if let Some(c) = c_label {
                labels.push(vals[c] != 0.0);
            }
            if let Some(c) = c_score {
                scores.push(T::lit(vals[c]));
            }
        }
    }
    if let Some((no, _)) = lines.find(|(_, l)| !l.is_empty()) {
        return Err(perr(
            no,
            format!("data beyond the declared element counts (header line {vertex_line})"),
        ));
    }
    if points.is_empty() {
        return Err(perr(vertex_line, "no vertices".into()));
    }
    let mut cloud = PointCloud::new(points)?;
    if c_label.is_some() {
        cloud.set_labels(Some(labels))?;
    }
    Ok(PlyData {
        cloud,
        scores: c_score.map(|_| scores),
    })
}

/// Writes an ASCII PLY. Coordinates use the shortest decimal form that
/// reads back to the same value. Labels are written when present.
pub fn save_ply<T: Real>(
    pc: &PointCloud<T>,
    path: &Path,
    scores: Option<&[T]>,
) -> Result<(), DataError> {
    write_ply(pc, path, scores, None)
}

/// Writes raw scores plus an RGB ramp (blue = lowest, red = highest) over
/// the per-cloud min-max normalized scores.
pub fn save_anomaly_map<T: Real>(
    pc: &PointCloud<T>,
    path: &Path,
    scores: &[T],
) -> Result<(), DataError> {
    let colors: Vec<[u8; 3]> = min_max_normalize(scores)
        .into_iter()
        .map(|s| {
            let r = (s.as_f64() * 255.0).round() as u8;
            [r, 0, 255 - r]
        })
        .collect();
    write_ply(pc, path, Some(scores), Some(&colors))
}

fn write_ply<T: Real>(
    pc: &PointCloud<T>,
    path: &Path,
    scores: Option<&[T]>,
    colors: Option<&[[u8; 3]]>,
) -> Result<(), DataError> {
    if pc.is_empty() {
        return Err(DataError::EmptyCloud);
    }
    if let Some(s) = scores {
        if s.len() != pc.len() {
            return Err(DataError::ChannelLength {
                what: "anomaly_score",
                expected: pc.len(),
                found: s.len(),
            });
        }
    }
    let mut out = String::new();
    out.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(out, "element vertex {}", pc.len());
    out.push_str("property double x\nproperty double y\nproperty double z\n");
    if pc.labels().is_some() {
        out.push_str("property uchar label\n");
    }
    if scores.is_some() {
        out.push_str("property double anomaly_score\n");
    }
    if colors.is_some() {
        out.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
    }
    out.push_str("end_header\n");
    for (i, p) in pc.points().iter().enumerate() {
        let _ = write!(
            out,
            "{:?} {:?} {:?}",
            p.x.as_f64(),
            p.y.as_f64(),
            p.z.as_f64()
        );
        if let Some(l) = pc.labels() {
            let _ = write!(out, " {}", u8::from(l[i]));
        }
        if let Some(s) = scores {
            let _ = write!(out, " {:?}", s[i].as_f64());
        }
        if let Some(c) = colors {
            let _ = write!(out, " {} {} {}", c[i][0], c[i][1], c[i][2]);
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(io_err(path))
}
