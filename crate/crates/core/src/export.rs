//! Plain-text and PGM (P5) writers for images, activation maps and routing
//! summaries. Every writer takes comment lines so artifacts can carry the
//! config and build version they came from.

use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::prior::BinaryMap;

fn comment_block(comments: &[String], prefix: &str) -> String {
    let mut s = String::new();
    for c in comments {
        for line in c.lines() {
            let _ = writeln!(s, "{prefix}{line}");
        }
    }
    s
}

/// Binary PGM with maxval 255.
pub fn pgm_bytes(width: usize, height: usize, pixels: &[u8], comments: &[String]) -> Result<Vec<u8>> {
    if pixels.len() != width * height || width == 0 || height == 0 {
        return Err(Error::InvalidArgument(format!(
            "PGM of {width}x{height} needs {} pixels, got {}",
            width * height,
            pixels.len()
        )));
    }
    let mut out = format!("P5\n{}{width} {height}\n255\n", comment_block(comments, "# ")).into_bytes();
    out.extend_from_slice(pixels);
    Ok(out)
}

/// Maps [−1, 1] to [0, 255], clamping outside values.
pub fn image_to_gray(img: &[f64]) -> Vec<u8> {
    img.iter()
        .map(|&v| ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8)
        .collect()
}

/// Row-major square image in [−1, 1] as PGM.
pub fn image_pgm(img: &[f64], size: usize, comments: &[String]) -> Result<Vec<u8>> {
    pgm_bytes(size, size, &image_to_gray(img), comments)
}

/// Activation map as PGM: one row per timestep (t = 1 at the top), active
/// cells white. `cell` enlarges each entry to `cell × cell` pixels.
pub fn map_pgm(map: &BinaryMap, cell: usize, comments: &[String]) -> Result<Vec<u8>> {
    let cell = cell.max(1);
    let (w, h) = (map.cols() * cell, map.rows() * cell);
    let mut px = Vec::with_capacity(w * h);
    for r in 0..map.rows() {
        let row: Vec<u8> = map
            .row(r)
            .iter()
            .flat_map(|&b| std::iter::repeat(if b == 1 { 255 } else { 0 }).take(cell))
            .collect();
        for _ in 0..cell {
            px.extend_from_slice(&row);
        }
    }
    pgm_bytes(w, h, &px, comments)
}

/// CSV of a `T × NM` activation map. Columns are 0-indexed, `block·M + expert`;
/// the first field is the 1-based timestep.
pub fn map_csv(map: &BinaryMap, experts: usize, comments: &[String]) -> String {
    let mut s = comment_block(comments, "# ");
    s.push_str("# columns are 0-indexed: column c is block c / M, expert c % M\n");
    s.push('t');
    for c in 0..map.cols() {
        let _ = write!(s, ",b{}e{}", c / experts.max(1), c % experts.max(1));
    }
    s.push('\n');
    for r in 0..map.rows() {
        let _ = write!(s, "{}", r + 1);
        for &b in map.row(r) {
            let _ = write!(s, ",{b}");
        }
        s.push('\n');
    }
    s
}

/// CSV of per-timestep gate probabilities (`rows[t − 1]` is p_tot at t).
pub fn probs_csv(rows: &[Vec<f64>], experts: usize, comments: &[String]) -> String {
    let mut s = comment_block(comments, "# ");
    s.push_str("# columns are 0-indexed: column c is block c / M, expert c % M\n");
    s.push('t');
    let cols = rows.first().map_or(0, Vec::len);
    for c in 0..cols {
        let _ = write!(s, ",b{}e{}", c / experts.max(1), c % experts.max(1));
    }
    s.push('\n');
    for (r, row) in rows.iter().enumerate() {
        let _ = write!(s, "{}", r + 1);
        for v in row {
            let _ = write!(s, ",{v:e}");
        }
        s.push('\n');
    }
    s
}

/// Experts of one block along the denoising path.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct BlockPath {
    pub block: usize,
    /// Active at every timestep.
    pub shared: Vec<usize>,
    /// Active at some but not all timesteps, with the timesteps (1-based).
    pub specific: Vec<(usize, Vec<usize>)>,
    /// Never active.
    pub unused: Vec<usize>,
}

/// Per-block split of experts into shared, timestep-specific and unused.
pub fn path_summary(map: &BinaryMap, experts: usize) -> Result<Vec<BlockPath>> {
    if experts == 0 || map.cols() % experts != 0 {
        return Err(Error::InvalidArgument(format!(
            "map with {} columns is not a whole number of {experts}-expert blocks",
            map.cols()
        )));
    }
    let blocks = map.cols() / experts;
    let mut out = Vec::with_capacity(blocks);
    for b in 0..blocks {
        let mut p = BlockPath {
            block: b,
            shared: Vec::new(),
            specific: Vec::new(),
            unused: Vec::new(),
        };
        for e in 0..experts {
            let col = map.column(b * experts + e);
            let on: Vec<usize> = col.iter().enumerate().filter(|(_, &v)| v == 1).map(|(i, _)| i + 1).collect();
            if on.len() == map.rows() {
                p.shared.push(e);
            } else if on.is_empty() {
                p.unused.push(e);
            } else {
                p.specific.push((e, on));
            }
        }
        out.push(p);
    }
    Ok(out)
}

/// Human-readable rendering of [`path_summary`], with 1-based expert numbers.
pub fn path_summary_text(paths: &[BlockPath]) -> String {
    let list = |v: &[usize]| {
        if v.is_empty() {
            "-".to_owned()
        } else {
            v.iter().map(|e| (e + 1).to_string()).collect::<Vec<_>>().join(",")
        }
    };
    let mut s = String::new();
    for p in paths {
        let specific: Vec<usize> = p.specific.iter().map(|(e, _)| *e).collect();
        let _ = writeln!(
            s,
            "block {}: shared {{{}}} specific {{{}}} unused {{{}}}",
            p.block + 1,
            list(&p.shared),
            list(&specific),
            list(&p.unused)
        );
        for (e, ts) in &p.specific {
            let _ = writeln!(s, "  expert {} active at {}", e + 1, ranges(ts));
        }
    }
    s
}

/// `[1,2,3,7,8]` → `t=1..3,7..8`.
fn ranges(ts: &[usize]) -> String {
    let mut parts = Vec::new();
    let mut i = 0;
    while i < ts.len() {
        let start = ts[i];
        let mut end = start;
        while i + 1 < ts.len() && ts[i + 1] == end + 1 {
            i += 1;
            end = ts[i];
        }
        parts.push(if start == end { start.to_string() } else { format!("{start}..{end}") });
        i += 1;
    }
    format!("t={}", parts.join(","))
}
