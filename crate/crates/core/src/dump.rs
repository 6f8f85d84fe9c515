//! Stage artifact formats: structured-text dumps that round-trip exactly so
//! chained stage commands reproduce an end-to-end run bit for bit.
//!
//! Floats are written with Rust's shortest round-trip formatting, which
//! restores the exact f32 bit pattern on parse.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geom::{Similarity2D, Vec2};
use crate::tracking::{Track, TrackSet};

fn bad(path: &Path, reason: impl Into<String>) -> Error {
    Error::BadArtifact {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn parse_num<T: std::str::FromStr>(path: &Path, s: &str) -> Result<T> {
    s.parse().map_err(|_| bad(path, format!("bad number: {s}")))
}

pub fn save_tracks(path: &Path, set: &TrackSet) -> Result<()> {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "tracks {} {} {} {}",
        set.n_frames, set.width, set.height, set.grid_cell_px
    );
    for t in &set.tracks {
        let _ = writeln!(out, "track {} {}", t.spawn_frame, t.weight);
        for (i, p) in t.points.iter().enumerate() {
            if let Some(p) = p {
                let _ = writeln!(out, "p {} {} {}", i, p.x, p.y);
            }
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_tracks(path: &Path) -> Result<TrackSet> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| bad(path, "empty file"))?;
    let h: Vec<&str> = header.split_whitespace().collect();
    if h.len() != 5 || h[0] != "tracks" {
        return Err(bad(path, format!("bad header: {header}")));
    }
    let n_frames: usize = parse_num(path, h[1])?;
    let mut set = TrackSet {
        tracks: Vec::new(),
        n_frames,
        width: parse_num(path, h[2])?,
        height: parse_num(path, h[3])?,
        grid_cell_px: parse_num(path, h[4])?,
    };
    for line in lines {
        let parts: Vec<&str> = line.split_whitespace().collect();
        match parts.as_slice() {
            ["track", spawn, weight] => set.tracks.push(Track {
                points: vec![None; n_frames],
                weight: parse_num(path, weight)?,
                spawn_frame: parse_num(path, spawn)?,
            }),
            ["p", idx, x, y] => {
                let track = set
                    .tracks
                    .last_mut()
                    .ok_or_else(|| bad(path, "point before track"))?;
                let idx: usize = parse_num(path, idx)?;
                if idx >= n_frames {
                    return Err(bad(path, format!("frame index {idx} out of range")));
                }
                track.points[idx] = Some(Vec2::new(parse_num(path, x)?, parse_num(path, y)?));
            }
            [] => {}
            _ => return Err(bad(path, format!("bad line: {line}"))),
        }
    }
    Ok(set)
}

pub fn save_transforms(path: &Path, transforms: &[Similarity2D]) -> Result<()> {
    let mut out = String::new();
    let _ = writeln!(out, "transforms {}", transforms.len());
    for (i, t) in transforms.iter().enumerate() {
        let _ = writeln!(out, "{} {} {} {} {}", i, t.scale, t.theta, t.t.x, t.t.y);
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_transforms(path: &Path) -> Result<Vec<Similarity2D>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| bad(path, "empty file"))?;
    let h: Vec<&str> = header.split_whitespace().collect();
    if h.len() != 2 || h[0] != "transforms" {
        return Err(bad(path, format!("bad header: {header}")));
    }
    let n: usize = parse_num(path, h[1])?;
    let mut out = vec![Similarity2D::identity(); n];
    for line in lines {
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.is_empty() {
            continue;
        }
        if parts.len() != 5 {
            return Err(bad(path, format!("bad line: {line}")));
        }
        let i: usize = parse_num(path, parts[0])?;
        if i >= n {
            return Err(bad(path, format!("index {i} out of range")));
        }
        out[i] = Similarity2D::new(
            parse_num(path, parts[1])?,
            parse_num(path, parts[2])?,
            Vec2::new(parse_num(path, parts[3])?, parse_num(path, parts[4])?),
        );
    }
    Ok(out)
}

pub fn save_meshes(path: &Path, meshes: &[crate::alignment::MeshWarp]) -> Result<()> {
    let mut out = String::new();
    let _ = writeln!(out, "meshes {}", meshes.len());
    for (i, m) in meshes.iter().enumerate() {
        let _ = writeln!(out, "mesh {} {} {} {} {}", i, m.cols, m.rows, m.width, m.height);
        for d in &m.displacement {
            let _ = writeln!(out, "{} {}", d.x, d.y);
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_meshes(path: &Path) -> Result<Vec<crate::alignment::MeshWarp>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| bad(path, "empty file"))?;
    let h: Vec<&str> = header.split_whitespace().collect();
    if h.len() != 2 || h[0] != "meshes" {
        return Err(bad(path, format!("bad header: {header}")));
    }
    let n: usize = parse_num(path, h[1])?;
    let mut out = Vec::with_capacity(n);
    let mut lines = lines.peekable();
    while let Some(line) = lines.next() {
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.is_empty() {
            continue;
        }
        if parts.len() != 6 || parts[0] != "mesh" {
            return Err(bad(path, format!("bad mesh header: {line}")));
        }
        let cols: usize = parse_num(path, parts[2])?;
        let rows: usize = parse_num(path, parts[3])?;
        let mut mesh = crate::alignment::MeshWarp {
            cols,
            rows,
            width: parse_num(path, parts[4])?,
            height: parse_num(path, parts[5])?,
            displacement: Vec::with_capacity((cols + 1) * (rows + 1)),
        };
        for _ in 0..(cols + 1) * (rows + 1) {
            let line = lines
                .next()
                .ok_or_else(|| bad(path, "truncated mesh block"))?;
            let p: Vec<&str> = line.split_whitespace().collect();
            if p.len() != 2 {
                return Err(bad(path, format!("bad vertex line: {line}")));
            }
            mesh.displacement
                .push(Vec2::new(parse_num(path, p[0])?, parse_num(path, p[1])?));
        }
        out.push(mesh);
    }
    if out.len() != n {
        return Err(bad(path, format!("expected {n} meshes, got {}", out.len())));
    }
    Ok(out)
}

/// Selection stage result: processed prefix length plus the trail estimate.
pub fn save_selection(path: &Path, selected: usize, estimate_pct: f32) -> Result<()> {
    let out = format!("selection {selected} {estimate_pct}\n");
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_selection(path: &Path) -> Result<(usize, f32)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parts: Vec<&str> = text.split_whitespace().collect();
    if parts.len() != 3 || parts[0] != "selection" {
        return Err(bad(path, format!("bad selection file: {text}")));
    }
    Ok((parse_num(path, parts[1])?, parse_num(path, parts[2])?))
}
