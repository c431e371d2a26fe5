//! Top-k fusion of recorded attention onto the image-patch grid, and heatmap export.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::ImageGrid;
use crate::model::AttentionRecord;
use crate::tokenizer::Segment;
use crate::Scalar;

pub const DEFAULT_TOP_K: usize = 5;
/// Blend weight of the heat color over the base image.
pub const OVERLAY_ALPHA: f64 = 0.6;
/// Pixels per grid cell in the exported overlay.
pub const CELL_PIXELS: usize = 16;

#[derive(Debug, Error)]
pub enum AttentionError {
    #[error("k = {k} outside 1..={max}")]
    K { k: usize, max: usize },
    #[error("unknown fusion method `{0}` (expected max or mean)")]
    UnknownMethod(String),
    #[error("target position {target} outside recorded length {len}")]
    Target { target: usize, len: usize },
    #[error("record has {got} image positions, expected {expected}")]
    ImagePositions { expected: usize, got: usize },
    #[error("grid is {grid}x{grid} but image is {image}x{image}")]
    Dimension { grid: usize, image: usize },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMethod {
    Max,
    Mean,
}

impl FromStr for FusionMethod {
    type Err = AttentionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "max" => Ok(FusionMethod::Max),
            "mean" => Ok(FusionMethod::Mean),
            other => Err(AttentionError::UnknownMethod(other.to_string())),
        }
    }
}

impl fmt::Display for FusionMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionMethod::Max => "max",
            FusionMethod::Mean => "mean",
        })
    }
}

/// Fused attention of one target token, one `P x P` grid per view.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedAttentionMap {
    pub target: usize,
    pub k: usize,
    pub method: FusionMethod,
    /// Min-max normalized to [0, 1]; all zeros when `flat`.
    pub grids: Vec<Array2<f64>>,
    /// Fused scores (before normalization) of the non-image positions, in order.
    pub text_attention: Vec<f64>,
    /// Every image score was equal, so normalization had nothing to stretch.
    pub flat: bool,
    /// Largest fused image score before normalization.
    pub raw_max: f64,
}

impl FusedAttentionMap {
    /// `(view, row, col)` of the largest cell, first in row-major order on ties.
    pub fn argmax_cell(&self) -> (usize, usize, usize) {
        let mut best = (0, 0, 0);
        let mut best_v = f64::NEG_INFINITY;
        for (v, g) in self.grids.iter().enumerate() {
            for ((r, c), &x) in g.indexed_iter() {
                if x > best_v {
                    best_v = x;
                    best = (v, r, c);
                }
            }
        }
        best
    }
}

/// Per source position (column), reduces the `k` largest values of the
/// `(layer * head) x sources` stack by `method`.
pub fn topk_aggregate<T: Scalar>(
    stack: ArrayView2<'_, T>,
    k: usize,
    method: FusionMethod,
) -> Result<Vec<f64>, AttentionError> {
    let lh = stack.nrows();
    if k == 0 || k > lh {
        return Err(AttentionError::K { k, max: lh });
    }
    let mut column = Vec::with_capacity(lh);
    Ok(stack
        .columns()
        .into_iter()
        .map(|col| {
            column.clear();
            column.extend(col.iter().map(|v| v.to_f64_lossy()));
            column.sort_unstable_by(|a, b| b.total_cmp(a));
            let top = &column[..k];
            match method {
                FusionMethod::Max => top[0],
                FusionMethod::Mean => top.iter().sum::<f64>() / k as f64,
            }
        })
        .collect())
}

/// Fuses each target's attention rows across every layer and head, keeps
/// the image positions and reshapes them row-major into per-view grids.
pub fn fuse_attention_map<T: Scalar>(
    record: &AttentionRecord<T>,
    targets: &[usize],
    k: usize,
    method: FusionMethod,
) -> Result<Vec<FusedAttentionMap>, AttentionError> {
    let n = record.len();
    let p = record.grid_size;
    let image = record.image_positions();
    let expected = record.views * p * p;
    if image.len() != expected {
        return Err(AttentionError::ImagePositions {
            expected,
            got: image.len(),
        });
    }
    let lh = record.n_layers() * record.n_heads();
    if k == 0 || k > lh {
        return Err(AttentionError::K { k, max: lh });
    }
    targets
        .iter()
        .map(|&t| {
            if t >= n {
                return Err(AttentionError::Target { target: t, len: n });
            }
            let mut stack = Array2::<T>::zeros((lh, n));
            for (l, heads) in record.maps.iter().enumerate() {
                for (h, a) in heads.iter().enumerate() {
                    stack.row_mut(l * record.n_heads() + h).assign(&a.row(t));
                }
            }
            let fused = topk_aggregate(stack.view(), k, method)?;
            let scores: Vec<f64> = image.iter().map(|&pos| fused[pos]).collect();
            let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let flat = hi - lo <= 0.0;
            let grids = (0..record.views)
                .map(|v| {
                    Array2::from_shape_fn((p, p), |(r, c)| {
                        if flat {
                            0.0
                        } else {
                            (scores[v * p * p + r * p + c] - lo) / (hi - lo)
                        }
                    })
                })
                .collect();
            let text_attention = (0..n)
                .filter(|&pos| record.segments[pos] != Segment::Image)
                .map(|pos| fused[pos])
                .collect();
            Ok(FusedAttentionMap {
                target: t,
                k,
                method,
                grids,
                text_attention,
                flat,
                raw_max: hi,
            })
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct HeatmapJson {
    target: usize,
    k: usize,
    method: FusionMethod,
    grid: Vec<Vec<f64>>,
    views: Vec<Vec<Vec<f64>>>,
    text_attention: Vec<f64>,
    flat: bool,
}

fn rows(g: &Array2<f64>) -> Vec<Vec<f64>> {
    g.rows().into_iter().map(|r| r.to_vec()).collect()
}

/// RGB of a simulator color id.
pub fn palette(color: u8) -> [u8; 3] {
    const COLORS: [[u8; 3]; 8] = [
        [235, 235, 235],
        [40, 40, 40],
        [110, 110, 110],
        [150, 100, 50],
        [200, 160, 110],
        [50, 110, 220],
        [60, 170, 70],
        [230, 190, 40],
    ];
    COLORS[color as usize % COLORS.len()]
}

/// Overlay pixel for a base color and a normalized score.
pub fn blend(base: [u8; 3], score: f64) -> [u8; 3] {
    let heat = [255.0 * score, 0.0, 0.0];
    let mut out = [0u8; 3];
    for i in 0..3 {
        out[i] = ((1.0 - OVERLAY_ALPHA) * base[i] as f64 + OVERLAY_ALPHA * heat[i]).round() as u8;
    }
    out
}

/// Binary PPM with the views side by side, `CELL_PIXELS` pixels per cell.
pub fn render_overlay(map: &FusedAttentionMap, base_images: &[ImageGrid]) -> Result<Vec<u8>, AttentionError> {
    let p = map.grids.first().map_or(0, |g| g.nrows());
    if base_images.len() != map.grids.len() {
        return Err(AttentionError::ImagePositions {
            expected: map.grids.len() * p * p,
            got: base_images.len() * p * p,
        });
    }
    if let Some(img) = base_images.iter().find(|i| i.size() != p) {
        return Err(AttentionError::Dimension {
            grid: p,
            image: img.size(),
        });
    }
    let (w, h) = (p * CELL_PIXELS * map.grids.len(), p * CELL_PIXELS);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for (grid, img) in map.grids.iter().zip(base_images) {
            for x in 0..p * CELL_PIXELS {
                let (r, c) = (y / CELL_PIXELS, x / CELL_PIXELS);
                out.extend_from_slice(&blend(palette(img.get(r, c)), grid[[r, c]]));
            }
        }
    }
    Ok(out)
}

/// Writes `<stem>.json` and `<stem>.ppm`.
pub fn export_heatmap(
    map: &FusedAttentionMap,
    base_images: &[ImageGrid],
    out_stem: &Path,
) -> Result<(PathBuf, PathBuf), AttentionError> {
    let ppm = render_overlay(map, base_images)?;
    let json = HeatmapJson {
        target: map.target,
        k: map.k,
        method: map.method,
        grid: map.grids.first().map(rows).unwrap_or_default(),
        views: map.grids.iter().map(rows).collect(),
        text_attention: map.text_attention.clone(),
        flat: map.flat,
    };
    let json_path = out_stem.with_extension("json");
    let ppm_path = out_stem.with_extension("ppm");
    let write = |path: &Path, bytes: &[u8]| {
        fs::write(path, bytes).map_err(|source| AttentionError::Io {
            path: path.display().to_string(),
            source,
        })
    };
    write(&json_path, serde_json::to_string(&json).expect("heatmap serializes").as_bytes())?;
    write(&ppm_path, &ppm)?;
    Ok((json_path, ppm_path))
}

/// Reads the grids back from a file written by [`export_heatmap`].
pub fn read_heatmap_grids(path: &Path) -> Result<Vec<Array2<f64>>, AttentionError> {
    let text = fs::read_to_string(path).map_err(|source| AttentionError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let json: HeatmapJson = serde_json::from_str(&text).map_err(|e| AttentionError::Io {
        path: path.display().to_string(),
        source: std::io::Error::new(std::io::ErrorKind::InvalidData, e),
    })?;
    Ok(json
        .views
        .iter()
        .map(|g| {
            let p = g.len();
            Array2::from_shape_fn((p, p), |(r, c)| g[r][c])
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use ndarray::{array, Array2};
    use proptest::prelude::*;

    use super::*;

    fn record(n_img: usize, grid: usize, extra: usize, fill: impl Fn(usize, usize, usize) -> f64) -> AttentionRecord<f64> {
        let n = 1 + n_img + extra;
        let mut segments = vec![Segment::Special];
        segments.extend(std::iter::repeat_n(Segment::Image, n_img));
        segments.extend(std::iter::repeat_n(Segment::Action, extra));
        let maps = (0..2)
            .map(|l| (0..2).map(|h| Array2::from_shape_fn((n, n), |(q, k)| if k <= q { fill(l * 2 + h, q, k) } else { 0.0 })).collect())
            .collect();
        AttentionRecord {
            maps,
            input_ids: vec![0; n],
            segments,
            grid_size: grid,
            views: 1,
        }
    }

    #[test]
    fn method_parsing() {
        assert_eq!("max".parse::<FusionMethod>().unwrap(), FusionMethod::Max);
        assert!(matches!("median".parse::<FusionMethod>(), Err(AttentionError::UnknownMethod(_))));
    }

    #[test]
    fn single_head_identity() {
        let s = array![[0.1, 0.7, 0.2]];
        assert_eq!(topk_aggregate(s.view(), 1, FusionMethod::Max).unwrap(), vec![0.1, 0.7, 0.2]);
        assert_eq!(topk_aggregate(s.view(), 1, FusionMethod::Mean).unwrap(), vec![0.1, 0.7, 0.2]);
        assert!(topk_aggregate(s.view(), 2, FusionMethod::Max).is_err());
        assert!(topk_aggregate(s.view(), 0, FusionMethod::Max).is_err());
    }

    #[test]
    fn full_k_mean_is_plain_mean() {
        let s = array![[0.1, 0.4], [0.3, 0.2], [0.5, 0.0]];
        let m = topk_aggregate(s.view(), 3, FusionMethod::Mean).unwrap();
        assert!((m[0] - 0.3).abs() < 1e-15 && (m[1] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn delta_and_constant_maps() {
        let target = 1 + 9;
        let delta = record(9, 3, 1, |_, q, k| if q == target { if k == 5 { 1.0 } else { 0.0 } } else { 1.0 / (q + 1) as f64 });
        let m = &fuse_attention_map(&delta, &[target], 5 - 1, FusionMethod::Max).unwrap()[0];
        let mut expected = Array2::zeros((3, 3));
        expected[[1, 1]] = 1.0;
        assert_eq!(m.grids[0], expected);
        assert!(!m.flat);
        assert_eq!(m.argmax_cell(), (0, 1, 1));

        let flat = record(9, 3, 1, |_, q, _| 1.0 / (q + 1) as f64);
        let m = &fuse_attention_map(&flat, &[target], 2, FusionMethod::Mean).unwrap()[0];
        assert!(m.flat);
        assert!(m.grids[0].iter().all(|&v| v == 0.0));
        assert_eq!(m.text_attention.len(), 2);
    }

    #[test]
    fn target_out_of_range() {
        let r = record(4, 2, 1, |_, _, _| 0.1);
        assert!(matches!(
            fuse_attention_map(&r, &[6], 1, FusionMethod::Max),
            Err(AttentionError::Target { .. })
        ));
    }

    #[test]
    fn overlay_zero_and_delta() {
        let img = ImageGrid::from_cells(2, vec![0, 5, 6, 1]).unwrap();
        let mut map = FusedAttentionMap {
            target: 0,
            k: 1,
            method: FusionMethod::Max,
            grids: vec![Array2::zeros((2, 2))],
            text_attention: vec![],
            flat: true,
            raw_max: 0.0,
        };
        let ppm = render_overlay(&map, std::slice::from_ref(&img)).unwrap();
        let header = format!("P6\n{} {}\n255\n", 2 * CELL_PIXELS, 2 * CELL_PIXELS).len();
        let px = |buf: &[u8], r: usize, c: usize| {
            let i = header + 3 * (r * CELL_PIXELS * 2 * CELL_PIXELS + c * CELL_PIXELS);
            [buf[i], buf[i + 1], buf[i + 2]]
        };
        assert_eq!(px(&ppm, 0, 1), blend(palette(5), 0.0));
        map.grids[0][[1, 0]] = 1.0;
        let ppm = render_overlay(&map, std::slice::from_ref(&img)).unwrap();
        let maximal: Vec<(usize, usize)> = (0..2)
            .flat_map(|r| (0..2).map(move |c| (r, c)))
            .filter(|&(r, c)| px(&ppm, r, c)[0] == blend(palette(img.get(r, c)), 1.0)[0] && map.grids[0][[r, c]] == 1.0)
            .collect();
        assert_eq!(maximal, vec![(1, 0)]);
        let wrong = ImageGrid::filled(3, 0);
        assert!(matches!(render_overlay(&map, &[wrong]), Err(AttentionError::Dimension { .. })));
    }

    #[test]
    fn json_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let r = record(4, 2, 2, |i, q, k| ((i + 1) * (k + 3)) as f64 / (q as f64 + 7.0).powi(2));
        let m = &fuse_attention_map(&r, &[6], 3, FusionMethod::Mean).unwrap()[0];
        let (json, ppm) = export_heatmap(m, &[ImageGrid::filled(2, 0)], &dir.path().join("h")).unwrap();
        assert!(ppm.exists());
        let back = read_heatmap_grids(&json).unwrap();
        for (a, b) in back[0].iter().zip(m.grids[0].iter()) {
            assert!((a - b).abs() <= 1e-9);
        }
    }

    proptest! {
        #[test]
        fn permutation_invariant_and_monotone(vals in prop::collection::vec(0.0f64..1.0, 12), k in 1usize..=4, bump in 0.0f64..0.5) {
            let s = Array2::from_shape_vec((4, 3), vals).unwrap();
            let mut rev = s.clone();
            rev.invert_axis(ndarray::Axis(0));
            for method in [FusionMethod::Max, FusionMethod::Mean] {
                let a = topk_aggregate(s.view(), k, method).unwrap();
                prop_assert_eq!(&a, &topk_aggregate(rev.view(), k, method).unwrap());
                let mut up = s.clone();
                up[[2, 1]] += bump;
                let b = topk_aggregate(up.view(), k, method).unwrap();
                prop_assert!(b[1] >= a[1]);
                prop_assert!(a.iter().all(|&x| x <= 1.0));
            }
        }
    }
}
