//! Text formats: ASCII PLY and XYZ point clouds, correspondence CSV.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::consistency::{Correspondence, CorrespondenceSet};
use crate::error::{Error, Result};
use crate::geometry::{Point3, PointCloud};

pub fn write_ply(cloud: &PointCloud) -> String {
    let mut out = String::new();
    let _ = write!(
        out,
        "ply\nformat ascii 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nend_header\n",
        cloud.len()
    );
    for p in cloud.points() {
        let _ = writeln!(out, "{} {} {}", p.x, p.y, p.z);
    }
    out
}

/// Parses an ASCII PLY file, reading `x`, `y`, `z` of the vertex element
/// and ignoring any other properties or elements.
pub fn parse_ply(text: &str) -> Result<PointCloud> {
    const WHAT: &str = "PLY";
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l.trim() == "ply" => {}
        _ => return Err(Error::format(WHAT, 1, "missing `ply` magic")),
    }

    // (element name, count, property names)
    let mut elements: Vec<(String, usize, Vec<String>)> = Vec::new();
    let mut header_done = false;
    for (no, line) in lines.by_ref() {
        let mut tok = line.split_whitespace();
        match tok.next() {
            Some("format") => {
                if tok.next() != Some("ascii") {
                    return Err(Error::format(WHAT, no + 1, "only ascii format is supported"));
                }
            }
            Some("comment") | Some("obj_info") | None => {}
            Some("element") => {
                let name = tok.next().unwrap_or_default().to_string();
                let count = tok
                    .next()
                    .and_then(|c| c.parse().ok())
                    .ok_or_else(|| Error::format(WHAT, no + 1, "bad element count"))?;
                elements.push((name, count, Vec::new()));
            }
            Some("property") => {
                let Some(el) = elements.last_mut() else {
                    return Err(Error::format(WHAT, no + 1, "property before element"));
                };
                let parts: Vec<&str> = tok.collect();
                let name = parts.last().copied().unwrap_or_default();
                el.2.push(name.to_string());
            }
            Some("end_header") => {
                header_done = true;
                break;
            }
            Some(other) => {
                return Err(Error::format(WHAT, no + 1, format!("unexpected header keyword `{other}`")));
            }
        }
    }
    if !header_done {
        return Err(Error::format(WHAT, 0, "missing end_header"));
    }

    let mut points = Vec::new();
    for (name, count, props) in &elements {
        if name != "vertex" {
            for _ in 0..*count {
                lines.next();
            }
            continue;
        }
        let col = |axis: &str| {
            props
                .iter()
                .position(|p| p == axis)
                .ok_or_else(|| Error::format(WHAT, 0, format!("vertex has no `{axis}` property")))
        };
        let (cx, cy, cz) = (col("x")?, col("y")?, col("z")?);
        for _ in 0..*count {
            let (no, line) = lines
                .next()
                .ok_or_else(|| Error::format(WHAT, 0, "fewer vertices than declared"))?;
            let vals: Vec<&str> = line.split_whitespace().collect();
            let get = |c: usize| -> Result<f64> {
                let v: f64 = vals
                    .get(c)
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| Error::format(WHAT, no + 1, "bad vertex value"))?;
                if !v.is_finite() {
                    return Err(Error::format(WHAT, no + 1, "non-finite coordinate"));
                }
                Ok(v)
            };
            points.push(Point3::new(get(cx)?, get(cy)?, get(cz)?));
        }
    }
    PointCloud::new(points)
}

pub fn write_xyz(cloud: &PointCloud) -> String {
    let mut out = String::new();
    for p in cloud.points() {
        let _ = writeln!(out, "{} {} {}", p.x, p.y, p.z);
    }
    out
}

pub fn parse_xyz(text: &str) -> Result<PointCloud> {
    let mut points = Vec::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::format("XYZ", no + 1, e.to_string()))?;
        if vals.len() < 3 {
            return Err(Error::format("XYZ", no + 1, "expected three coordinates"));
        }
        if !vals[..3].iter().all(|v| v.is_finite()) {
            return Err(Error::format("XYZ", no + 1, "non-finite coordinate"));
        }
        points.push(Point3::new(vals[0], vals[1], vals[2]));
    }
    PointCloud::new(points)
}

/// Reads `.ply` or whitespace-separated XYZ by extension.
pub fn read_cloud(path: &Path) -> Result<PointCloud> {
    let text = fs::read_to_string(path)?;
    match path.extension().and_then(|e| e.to_str()) {
        Some(e) if e.eq_ignore_ascii_case("ply") => parse_ply(&text),
        _ => parse_xyz(&text),
    }
}

pub fn write_cloud(path: &Path, cloud: &PointCloud) -> Result<()> {
    let text = match path.extension().and_then(|e| e.to_str()) {
        Some(e) if e.eq_ignore_ascii_case("ply") => write_ply(cloud),
        _ => write_xyz(cloud),
    };
    fs::write(path, text)?;
    Ok(())
}

/// Correspondence CSV with a mandatory header: six coordinates, then an
/// optional `label` column, then an optional `score` column.
pub fn write_corr_csv(corr: &CorrespondenceSet) -> String {
    let labels = corr.labels();
    let scores = corr.scores().filter(|_| labels.is_some());
    let mut out = String::from("x,y,z,x',y',z'");
    if labels.is_some() {
        out.push_str(",label");
    }
    if scores.is_some() {
        out.push_str(",score");
    }
    out.push('\n');
    for (i, c) in corr.pairs().iter().enumerate() {
        let (x, y) = (c.source, c.target);
        let _ = write!(out, "{},{},{},{},{},{}", x.x, x.y, x.z, y.x, y.y, y.z);
        if let Some(l) = labels {
            let _ = write!(out, ",{}", u8::from(l[i]));
        }
        if let Some(s) = scores {
            let _ = write!(out, ",{}", s[i]);
        }
        out.push('\n');
    }
    out
}

pub fn parse_corr_csv(text: &str) -> Result<CorrespondenceSet> {
    const WHAT: &str = "correspondence CSV";
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::format(WHAT, 1, "missing header row"))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols.len() < 6 || cols[0].parse::<f64>().is_ok() {
        return Err(Error::format(WHAT, 1, "header row must name at least six columns"));
    }
    let has_label = cols.get(6).is_some_and(|c| c.eq_ignore_ascii_case("label"));
    let has_score = cols.get(7).is_some_and(|c| c.eq_ignore_ascii_case("score"));
    if cols.len() > 6 && !has_label {
        return Err(Error::format(WHAT, 1, "seventh column must be `label`"));
    }
    if cols.len() > 7 && !has_score {
        return Err(Error::format(WHAT, 1, "eighth column must be `score`"));
    }
    if cols.len() > 8 {
        return Err(Error::format(WHAT, 1, "too many columns"));
    }
    let width = cols.len();

    let mut pairs = Vec::new();
    let mut labels = Vec::new();
    let mut scores = Vec::new();
    for (no, line) in lines {
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != width {
            return Err(Error::format(
                WHAT,
                no + 1,
                format!("expected {width} fields, found {}", fields.len()),
            ));
        }
        let mut xyz = [0.0f64; 6];
        for (k, f) in fields[..6].iter().enumerate() {
            let v: f64 = f
                .parse()
                .map_err(|_| Error::format(WHAT, no + 1, format!("bad number `{f}`")))?;
            if !v.is_finite() {
                return Err(Error::format(WHAT, no + 1, "non-finite coordinate"));
            }
            xyz[k] = v;
        }
        pairs.push(Correspondence::new(
            Point3::new(xyz[0], xyz[1], xyz[2]),
            Point3::new(xyz[3], xyz[4], xyz[5]),
        ));
        if has_label {
            labels.push(match fields[6] {
                "1" => true,
                "0" => false,
                other => return Err(Error::format(WHAT, no + 1, format!("label `{other}` is not 0/1"))),
            });
        }
        if has_score {
            let s: f64 = fields[7]
                .parse()
                .map_err(|_| Error::format(WHAT, no + 1, "bad score"))?;
            if !(0.0..=1.0).contains(&s) {
                return Err(Error::format(WHAT, no + 1, "score outside [0, 1]"));
            }
            scores.push(s);
        }
    }
    let mut set = CorrespondenceSet::new(pairs)?;
    if has_label {
        set = set.with_labels(labels)?;
    }
    if has_score {
        set = set.with_scores(scores)?;
    }
    Ok(set)
}

pub fn read_corr_csv(path: &Path) -> Result<CorrespondenceSet> {
    parse_corr_csv(&fs::read_to_string(path)?)
}
