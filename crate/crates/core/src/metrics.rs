//! Motion and preservation proxies plus a plain-text report table.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::mask::LatentMask;
use crate::tensor::{Real, Tensor};

/// Integer displacement of one block between consecutive frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Displacement {
    pub dy: i32,
    pub dx: i32,
}

/// Per frame pair, per block displacements in row-major block order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlowField {
    pub block: usize,
    pub rows: usize,
    pub cols: usize,
    pub pairs: Vec<Vec<Displacement>>,
}

impl FlowField {
    pub fn at(&self, pair: usize, row: usize, col: usize) -> Displacement {
        self.pairs[pair][row * self.cols + col]
    }
}

fn video_dims(v: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *v {
        [f, h, w, c] => Ok((f, h, w, c)),
        _ => Err(Error::Contract(format!("expected a [f, H, W, C] video, got {v:?}"))),
    }
}

/// Exhaustive SSD block matching of each frame against the next. Candidates
/// must lie fully inside the frame; ties go to the smaller displacement, then
/// to the earlier candidate in row-major order.
pub fn block_match_flow<F: Real>(video: &Tensor<F>, block: usize, radius: usize) -> Result<FlowField> {
    let (f, h, w, c) = video_dims(video.shape())?;
    if f < 2 {
        return Err(Error::Input("flow needs at least two frames".into()));
    }
    if block == 0 || block > h || block > w {
        return Err(Error::Config(format!("block {block} does not fit a {h}x{w} frame")));
    }
    let (rows, cols) = (h / block, w / block);
    let v = video.data();
    let px = |i: usize, y: usize, x: usize| ((i * h + y) * w + x) * c;
    let r = radius as i64;
    let mut cands: Vec<(i64, i64)> = (-r..=r).flat_map(|dy| (-r..=r).map(move |dx| (dy, dx))).collect();
    cands.sort_by_key(|&(dy, dx)| dy * dy + dx * dx);
    let mut pairs = Vec::with_capacity(f - 1);
    for i in 0..f - 1 {
        let mut field = Vec::with_capacity(rows * cols);
        for by in 0..rows {
            for bx in 0..cols {
                let (y0, x0) = ((by * block) as i64, (bx * block) as i64);
                let mut best: Option<(f64, (i64, i64))> = None;
                for &(dy, dx) in &cands {
                    let (ty, tx) = (y0 + dy, x0 + dx);
                    if ty < 0 || tx < 0 || ty as usize + block > h || tx as usize + block > w {
                        continue;
                    }
                    let mut ssd = 0.0;
                    for yy in 0..block {
                        let a = px(i, y0 as usize + yy, x0 as usize);
                        let b = px(i + 1, ty as usize + yy, tx as usize);
                        for k in 0..block * c {
                            let d = (v[a + k] - v[b + k]).as_f64();
                            ssd += d * d;
                        }
                    }
                    // cands is ordered by magnitude, then row-major, so the first minimum wins
                    let better = best.is_none_or(|(s, _)| ssd < s);
                    if better {
                        best = Some((ssd, (dy, dx)));
                    }
                }
                let (dy, dx) = best.map(|b| b.1).unwrap_or((0, 0));
                field.push(Displacement {
                    dy: dy as i32,
                    dx: dx as i32,
                });
            }
        }
        pairs.push(field);
    }
    Ok(FlowField { block, rows, cols, pairs })
}

pub const FLOW_BLOCK: usize = 4;
pub const FLOW_RADIUS: usize = 3;

/// Mean Euclidean norm of the flow difference over all blocks and frame pairs.
pub fn motion_error<F: Real>(src: &Tensor<F>, tgt: &Tensor<F>) -> Result<f64> {
    if src.shape() != tgt.shape() {
        return Err(Error::shape("motion_error", src.shape(), tgt.shape()));
    }
    let a = block_match_flow(src, FLOW_BLOCK, FLOW_RADIUS)?;
    let b = block_match_flow(tgt, FLOW_BLOCK, FLOW_RADIUS)?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for (pa, pb) in a.pairs.iter().zip(&b.pairs) {
        for (da, db) in pa.iter().zip(pb) {
            let (ey, ex) = ((da.dy - db.dy) as f64, (da.dx - db.dx) as f64);
            sum += (ey * ey + ex * ex).sqrt();
            count += 1;
        }
    }
    Ok(sum / count as f64)
}

fn masked_mse<F: Real>(src: &Tensor<F>, tgt: &Tensor<F>, region: &LatentMask, what: &'static str) -> Result<f64> {
    if src.shape() != tgt.shape() {
        return Err(Error::shape(what, src.shape(), tgt.shape()));
    }
    let (f, h, w, c) = video_dims(src.shape())?;
    if [f, h, w] != [region.frames, region.height, region.width] {
        return Err(Error::shape(what, src.shape(), &[region.frames, region.height, region.width]));
    }
    let cells = region.count();
    if cells == 0 {
        return Err(Error::Degenerate(format!("{what}: the region is empty")));
    }
    let mut sum = 0.0;
    for (k, (a, b)) in src.data().iter().zip(tgt.data()).enumerate() {
        if region.data[k / c] {
            let d = (*a - *b).as_f64();
            sum += d * d;
        }
    }
    Ok(sum / (cells * c) as f64)
}

/// Mean squared difference over the region to preserve (`preserve` set).
pub fn masked_bg_distance<F: Real>(src: &Tensor<F>, tgt: &Tensor<F>, preserve: &LatentMask) -> Result<f64> {
    masked_mse(src, tgt, preserve, "masked_bg_distance")
}

/// Mean squared difference inside the edit region; higher means the edit
/// moved the foreground further from the source.
pub fn foreground_change<F: Real>(src: &Tensor<F>, tgt: &Tensor<F>, edit_region: &LatentMask) -> Result<f64> {
    masked_mse(src, tgt, edit_region, "foreground_change")
}

/// One report line; missing metrics print as a dash.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub name: String,
    pub fc: Option<f64>,
    pub cs: Option<f64>,
    pub bl: Option<f64>,
    pub me: Option<f64>,
}

/// Metric columns: header, decimals, whether higher is better.
const COLUMNS: [(&str, usize, bool); 4] = [("FC", 3, true), ("CS", 2, true), ("BL", 3, false), ("ME", 3, false)];

impl ReportRow {
    fn values(&self) -> [Option<f64>; 4] {
        [self.fc, self.cs, self.bl, self.me]
    }
}

/// Best-per-column flags, compared at printed precision so printed ties
/// are flagged together.
pub fn best_flags(rows: &[ReportRow]) -> Vec<[bool; 4]> {
    let rounded = |v: f64, d: usize| (v * 10f64.powi(d as i32)).round() as i64;
    let mut flags = vec![[false; 4]; rows.len()];
    for (col, &(_, dec, higher)) in COLUMNS.iter().enumerate() {
        let vals: Vec<Option<i64>> = rows.iter().map(|r| r.values()[col].map(|v| rounded(v, dec))).collect();
        let best = if higher {
            vals.iter().flatten().max()
        } else {
            vals.iter().flatten().min()
        };
        if let Some(&b) = best {
            for (r, v) in vals.iter().enumerate() {
                flags[r][col] = *v == Some(b);
            }
        }
    }
    flags
}

/// Aligned text table; best values carry a trailing `*`.
pub fn render_report(rows: &[ReportRow]) -> Result<String> {
    if rows.is_empty() {
        return Err(Error::Input("report needs at least one row".into()));
    }
    let flags = best_flags(rows);
    let cells: Vec<Vec<String>> = rows
        .iter()
        .zip(&flags)
        .map(|(r, fl)| {
            let mut line = vec![r.name.clone()];
            for (col, &(_, dec, _)) in COLUMNS.iter().enumerate() {
                line.push(match r.values()[col] {
                    Some(v) => format!("{v:.dec$}{}", if fl[col] { "*" } else { " " }),
                    None => "- ".to_string(),
                });
            }
            line
        })
        .collect();
    let header: Vec<String> = std::iter::once("Method".to_string())
        .chain(COLUMNS.iter().map(|c| format!("{} ", c.0)))
        .collect();
    let width = |k: usize| {
        cells
            .iter()
            .chain(std::iter::once(&header))
            .map(|l| l[k].chars().count())
            .max()
            .unwrap_or(0)
    };
    let widths: Vec<usize> = (0..5).map(width).collect();
    let mut out = String::new();
    for line in std::iter::once(&header).chain(&cells) {
        let mut s = format!("{:<w$}", line[0], w = widths[0]);
        for k in 1..5 {
            let pad = widths[k] - line[k].chars().count();
            s.push_str("  ");
            s.push_str(&" ".repeat(pad));
            s.push_str(&line[k]);
        }
        let _ = writeln!(out, "{}", s.trim_end());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shifted(f: usize, h: usize, w: usize, dx: usize) -> Tensor<f64> {
        Tensor::from_fn(&[f, h, w, 1], |k| {
            let (i, y, x) = (k / (h * w), (k / w) % h, k % w);
            let xs = (x + 64 - i * dx) as f64;
            (0.37 * xs * xs + 1.3 * (y as f64) * xs + 0.11 * (y * y) as f64).sin()
        })
    }

    #[test]
    fn static_and_shifted_flow() {
        let still = shifted(3, 16, 16, 0);
        let flow = block_match_flow(&still, 4, 3).unwrap();
        assert!(flow.pairs.iter().flatten().all(|d| *d == Displacement::default()));
        let moving = shifted(3, 16, 16, 1);
        let flow = block_match_flow(&moving, 4, 3).unwrap();
        for p in 0..2 {
            for r in 0..4 {
                for c in 0..3 {
                    assert_eq!(flow.at(p, r, c), Displacement { dy: 0, dx: 1 });
                }
            }
        }
        // spare columns on the right keep every block's true match in frame
        let (still, moving) = (shifted(3, 16, 18, 0), shifted(3, 16, 18, 1));
        assert_eq!(motion_error(&still, &moving).unwrap(), 1.0);
        assert_eq!(motion_error(&moving, &moving).unwrap(), 0.0);
        assert!(block_match_flow(&still, 17, 3).is_err());
    }

    #[test]
    fn bg_distance_examples() {
        let a = Tensor::<f64>::zeros(&[1, 2, 2, 3]);
        let b = a.map(|v| v + 0.1);
        let all = LatentMask::filled(1, 2, 2, true);
        assert!((masked_bg_distance(&a, &b, &all).unwrap() - 0.01).abs() < 1e-15);
        assert_eq!(masked_bg_distance(&a, &a, &all).unwrap(), 0.0);
        assert!(matches!(
            masked_bg_distance(&a, &b, &LatentMask::filled(1, 2, 2, false)),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn report_flags_ties_and_dashes() {
        let rows = vec![
            ReportRow { name: "a".into(), fc: None, cs: None, bl: Some(0.1), me: Some(2.0) },
            ReportRow { name: "b".into(), fc: None, cs: None, bl: Some(0.1), me: Some(3.0) },
        ];
        let flags = best_flags(&rows);
        assert_eq!(flags[0], [false, false, true, true]);
        assert_eq!(flags[1], [false, false, true, false]);
        let text = render_report(&rows).unwrap();
        assert!(text.contains("- "));
        assert!(render_report(&[]).is_err());
    }
}
