//! Exact measures of excursion sets `{x > u}` on the pixel grid.
//!
//! Foreground pixels are 4-connected and the complement is 8-connected.
//! Everything outside the grid is treated as dry.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Field2D;

#[derive(Debug, Clone, PartialEq)]
pub struct ExcursionSet {
    pub height: usize,
    pub width: usize,
    pub mask: Vec<bool>,
    pub threshold: f64,
    pub pixel_size: f64,
}

impl ExcursionSet {
    pub fn from_mask(height: usize, width: usize, mask: Vec<bool>, pixel_size: f64) -> Self {
        assert_eq!(mask.len(), height * width, "mask length must be height * width");
        Self {
            height,
            width,
            mask,
            threshold: 0.5,
            pixel_size,
        }
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> bool {
        self.mask[r * self.width + c]
    }

    /// Out-of-range coordinates read as false.
    #[inline]
    fn at_signed(&self, r: isize, c: isize) -> bool {
        r >= 0
            && c >= 0
            && (r as usize) < self.height
            && (c as usize) < self.width
            && self.mask[r as usize * self.width + c as usize]
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }
}

/// Strict superlevel set `value > u`.
pub fn excursion(field: &Field2D, u: f64) -> ExcursionSet {
    ExcursionSet {
        height: field.height(),
        width: field.width(),
        mask: field.values().iter().map(|&v| v > u).collect(),
        threshold: u,
        pixel_size: field.pixel_size(),
    }
}

/// Area in km².
pub fn area(set: &ExcursionSet) -> f64 {
    set.count() as f64 * set.pixel_size * set.pixel_size
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub a: (f64, f64),
    pub b: (f64, f64),
}

impl Segment {
    pub fn length(&self) -> f64 {
        (self.a.0 - self.b.0).hypot(self.a.1 - self.b.1)
    }
}

/// Marching-squares iso-segments of a row-major grid sampled at pixel centres.
///
/// Coordinates are `(row, col)` in pixel units. Saddle cells connect the
/// corners on the high side when the cell mean is at least `level`.
pub fn contour_segments(values: &[f64], height: usize, width: usize, level: f64) -> Vec<Segment> {
    let at = |r: usize, c: usize| values[r * width + c];
    let mut segs = Vec::new();
    if height < 2 || width < 2 {
        return segs;
    }
    let lerp = |p: (f64, f64), q: (f64, f64), vp: f64, vq: f64| {
        let t = (level - vp) / (vq - vp);
        (p.0 + t * (q.0 - p.0), p.1 + t * (q.1 - p.1))
    };
    for r in 0..height - 1 {
        for c in 0..width - 1 {
            // corners clockwise from top-left
            let pts = [
                (r as f64, c as f64),
                (r as f64, c as f64 + 1.0),
                (r as f64 + 1.0, c as f64 + 1.0),
                (r as f64 + 1.0, c as f64),
            ];
            let v = [at(r, c), at(r, c + 1), at(r + 1, c + 1), at(r + 1, c)];
            let above = v.map(|x| x > level);
            let case = above
                .iter()
                .enumerate()
                .fold(0u8, |acc, (i, &b)| acc | ((b as u8) << i));
            if case == 0 || case == 15 {
                continue;
            }
            // edge k joins corner k and k+1
            let edge = |k: usize| {
                let j = (k + 1) % 4;
                lerp(pts[k], pts[j], v[k], v[j])
            };
            let mut push = |e1: usize, e2: usize| segs.push(Segment { a: edge(e1), b: edge(e2) });
            match case {
                // saddles: corners 0 and 2 high, or 1 and 3 high
                5 | 10 => {
                    let mean = v.iter().sum::<f64>() / 4.0;
                    let joined = mean >= level;
                    // isolate the corners on the side that stays disconnected
                    let isolate_even = (case == 10) == joined;
                    if isolate_even {
                        push(3, 0);
                        push(1, 2);
                    } else {
                        push(0, 1);
                        push(2, 3);
                    }
                }
                _ => {
                    let crossing: Vec<usize> = (0..4)
                        .filter(|&k| above[k] != above[(k + 1) % 4])
                        .collect();
                    debug_assert_eq!(crossing.len(), 2);
                    push(crossing[0], crossing[1]);
                }
            }
        }
    }
    segs
}

/// Perimeter in km of the excursion set, from the 0.5 iso-contour of its
/// indicator with a one-pixel dry frame around the domain.
pub fn perimeter_marching_squares(field: &Field2D, u: f64) -> f64 {
    perimeter_of_set(&excursion(field, u))
}

pub fn perimeter_of_set(set: &ExcursionSet) -> f64 {
    let (h, w) = (set.height + 2, set.width + 2);
    let mut padded = vec![0.0; h * w];
    for r in 0..set.height {
        for c in 0..set.width {
            if set.at(r, c) {
                padded[(r + 1) * w + c + 1] = 1.0;
            }
        }
    }
    let len: f64 = contour_segments(&padded, h, w, 0.5)
        .iter()
        .map(Segment::length)
        .sum();
    len * set.pixel_size
}

const N4: [(isize, isize); 4] = [(-1, 0), (1, 0), (0, -1), (0, 1)];
const N8: [(isize, isize); 8] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, -1),
    (0, 1),
    (1, -1),
    (1, 0),
    (1, 1),
];

/// Label components of cells where `member` holds. Returns per-cell labels
/// (`usize::MAX` for non-members) and the component count.
fn label(
    h: usize,
    w: usize,
    member: impl Fn(usize, usize) -> bool,
    neighbours: &[(isize, isize)],
) -> (Vec<usize>, usize) {
    let mut labels = vec![usize::MAX; h * w];
    let mut n = 0;
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if labels[start] != usize::MAX || !member(start / w, start % w) {
            continue;
        }
        labels[start] = n;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            let (r, c) = ((i / w) as isize, (i % w) as isize);
            for &(dr, dc) in neighbours {
                let (nr, nc) = (r + dr, c + dc);
                if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                    continue;
                }
                let j = nr as usize * w + nc as usize;
                if labels[j] == usize::MAX && member(nr as usize, nc as usize) {
                    labels[j] = n;
                    queue.push_back(j);
                }
            }
        }
        n += 1;
    }
    (labels, n)
}

/// Number of 4-connected components of the foreground.
pub fn connected_components_floodfill(set: &ExcursionSet) -> usize {
    label(set.height, set.width, |r, c| set.at(r, c), &N4).1
}

/// Number of bounded 8-connected components of the complement.
pub fn hole_count(set: &ExcursionSet) -> usize {
    // pad with one dry ring so the unbounded background is a single component
    let (h, w) = (set.height + 2, set.width + 2);
    let dry = |r: usize, c: usize| !set.at_signed(r as isize - 1, c as isize - 1);
    let (labels, n) = label(h, w, dry, &N8);
    // the corner of the padding is always dry and belongs to the background
    debug_assert_ne!(labels[0], usize::MAX);
    n - 1
}

/// Euler characteristic `V - E + F` of the cubical complex whose vertices are
/// foreground pixels, edges are 4-adjacent foreground pairs and faces are
/// fully-foreground 2x2 blocks. This is the complex whose topology matches
/// 4-connected foreground / 8-connected complement, so it equals
/// `connected_components_floodfill - hole_count`.
pub fn euler_characteristic_exact(set: &ExcursionSet) -> i64 {
    let (h, w) = (set.height as isize, set.width as isize);
    let mut v = 0i64;
    let mut e = 0i64;
    let mut f = 0i64;
    for r in 0..h {
        for c in 0..w {
            if !set.at_signed(r, c) {
                continue;
            }
            v += 1;
            if set.at_signed(r, c + 1) {
                e += 1;
            }
            if set.at_signed(r + 1, c) {
                e += 1;
            }
            if set.at_signed(r, c + 1) && set.at_signed(r + 1, c) && set.at_signed(r + 1, c + 1) {
                f += 1;
            }
        }
    }
    v - e + f
}

/// One row of the Steiner-formula check: dilated area measured on the raster
/// against `A + P r + chi * pi * r^2` built from the exact measures of the disk.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SteinerRow {
    pub r: f64,
    pub lhs_area: f64,
    pub rhs_area: f64,
}

/// Rasterize a disk of `disk_radius` (unit-square domain, `resolution`² pixels),
/// dilate it by each radius with an exact Euclidean distance transform, and
/// compare against the Steiner polynomial.
pub fn steiner_check(
    radius_samples: &[f64],
    disk_radius: f64,
    resolution: usize,
) -> Result<Vec<SteinerRow>> {
    if !(disk_radius > 0.0 && disk_radius < 0.5) {
        return Err(Error::InvalidArgument(format!(
            "disk radius must lie in (0, 0.5), got {disk_radius}"
        )));
    }
    if resolution < 4 {
        return Err(Error::InvalidArgument("resolution must be >= 4".into()));
    }
    let n = resolution;
    let px = 1.0 / n as f64;
    let mask: Vec<bool> = (0..n * n)
        .map(|i| {
            let y = ((i / n) as f64 + 0.5) * px - 0.5;
            let x = ((i % n) as f64 + 0.5) * px - 0.5;
            y.hypot(x) <= disk_radius
        })
        .collect();
    let set = ExcursionSet::from_mask(n, n, mask, px);
    let a_k = area(&set);
    let p_k = perimeter_of_set(&set);
    let chi = euler_characteristic_exact(&set) as f64;
    let dist2 = squared_edt(&set.mask, n, n);

    radius_samples
        .iter()
        .map(|&r| {
            if !(r >= 0.0 && disk_radius + r < 0.5) {
                return Err(Error::InvalidArgument(format!(
                    "dilation radius {r} is negative or leaves the domain"
                )));
            }
            let r_px2 = (r / px).powi(2);
            let inside = dist2.iter().filter(|&&d| d <= r_px2).count();
            Ok(SteinerRow {
                r,
                lhs_area: inside as f64 * px * px,
                rhs_area: a_k + p_k * r + chi * std::f64::consts::PI * r * r,
            })
        })
        .collect()
}

/// Squared Euclidean distance (pixel units) from every pixel centre to the
/// nearest `true` pixel centre. Separable lower-envelope transform.
pub fn squared_edt(mask: &[bool], height: usize, width: usize) -> Vec<f64> {
    let inf = 1e20;
    let mut grid: Vec<f64> = mask.iter().map(|&b| if b { 0.0 } else { inf }).collect();
    let mut buf = Vec::new();
    for r in 0..height {
        buf.clear();
        buf.extend_from_slice(&grid[r * width..(r + 1) * width]);
        let out = edt_1d(&buf);
        grid[r * width..(r + 1) * width].copy_from_slice(&out);
    }
    for c in 0..width {
        buf.clear();
        buf.extend((0..height).map(|r| grid[r * width + c]));
        let out = edt_1d(&buf);
        for (r, v) in out.into_iter().enumerate() {
            grid[r * width + c] = v;
        }
    }
    grid
}

fn edt_1d(f: &[f64]) -> Vec<f64> {
    let n = f.len();
    let mut d = vec![0.0; n];
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let meet = |q: usize, p: usize| {
        ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64))
    };
    for q in 1..n {
        let mut s = meet(q, v[k]);
        while s <= z[k] {
            k -= 1;
            s = meet(q, v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, out) in d.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let dq = q as f64 - v[k] as f64;
        *out = dq * dq + f[v[k]];
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Units;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mask(rows: &[&str]) -> ExcursionSet {
        let h = rows.len();
        let w = rows[0].len();
        let m = rows.iter().flat_map(|r| r.chars().map(|c| c == '#')).collect();
        ExcursionSet::from_mask(h, w, m, 1.0)
    }

    fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize, p: f64) -> ExcursionSet {
        let m = (0..h * w).map(|_| rng.random_bool(p)).collect();
        ExcursionSet::from_mask(h, w, m, 1.0)
    }

    /// Perimeter from a per-cell lookup on the number and layout of set corners.
    fn perimeter_lookup_oracle(set: &ExcursionSet) -> f64 {
        let half_diag = std::f64::consts::SQRT_2 / 2.0;
        let mut total = 0.0;
        for r in -1..set.height as isize {
            for c in -1..set.width as isize {
                let k = [
                    set.at_signed(r, c),
                    set.at_signed(r, c + 1),
                    set.at_signed(r + 1, c + 1),
                    set.at_signed(r + 1, c),
                ];
                let n = k.iter().filter(|&&b| b).count();
                total += match n {
                    1 | 3 => half_diag,
                    2 if k[0] == k[2] => 2.0 * half_diag,
                    2 => 1.0,
                    _ => 0.0,
                };
            }
        }
        total * set.pixel_size
    }

    /// Holes by flood-filling the complement from the border.
    fn holes_oracle(set: &ExcursionSet) -> usize {
        let (h, w) = (set.height, set.width);
        let mut outside = vec![false; h * w];
        let mut stack: Vec<(usize, usize)> = Vec::new();
        for r in 0..h {
            for c in 0..w {
                if (r == 0 || c == 0 || r == h - 1 || c == w - 1) && !set.at(r, c) {
                    stack.push((r, c));
                }
            }
        }
        while let Some((r, c)) = stack.pop() {
            if outside[r * w + c] {
                continue;
            }
            outside[r * w + c] = true;
            for (dr, dc) in N8 {
                let (nr, nc) = (r as isize + dr, c as isize + dc);
                if nr >= 0 && nc >= 0 && (nr as usize) < h && (nc as usize) < w {
                    let (nr, nc) = (nr as usize, nc as usize);
                    if !set.at(nr, nc) && !outside[nr * w + nc] {
                        stack.push((nr, nc));
                    }
                }
            }
        }
        let inner = ExcursionSet::from_mask(
            h,
            w,
            (0..h * w).map(|i| !set.mask[i] && !outside[i]).collect(),
            1.0,
        );
        label(h, w, |r, c| inner.at(r, c), &N8).1
    }

    #[test]
    fn strict_threshold() {
        let f = Field2D::zeros(3, 3, 1.0, Units::Physical).unwrap();
        assert_eq!(excursion(&f, 0.0).count(), 0);
        let g = f.map(|_| 2.0).unwrap();
        assert_eq!(excursion(&g, 1.9).count(), 9);
    }

    #[test]
    fn area_values() {
        let full = mask(&["####", "####", "####", "####"]);
        assert_eq!(area(&full), 16.0);
        let mut one = mask(&["#"]);
        one.pixel_size = 2.0;
        assert_eq!(area(&one), 4.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let mut m = random_mask(&mut rng, 9, 13, 0.4);
            m.pixel_size = 2.0;
            let pop: u32 = m.mask.iter().map(|&b| b as u32).sum();
            assert_eq!(area(&m), pop as f64 * 4.0);
        }
    }

    #[test]
    fn perimeter_hand_cases() {
        assert_eq!(perimeter_of_set(&mask(&["...", "...", "..."])), 0.0);
        let single = perimeter_of_set(&mask(&["...", ".#.", "..."]));
        assert!((single - 2.0 * std::f64::consts::SQRT_2).abs() < 1e-12);
        let block = perimeter_of_set(&mask(&["....", ".##.", ".##.", "...."]));
        assert!((block - (4.0 + 2.0 * std::f64::consts::SQRT_2)).abs() < 1e-12);
        // touching the frame still closes the contour
        let edge = perimeter_of_set(&mask(&["#"]));
        assert!((edge - single).abs() < 1e-12);
    }

    #[test]
    fn perimeter_matches_lookup_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let m = random_mask(&mut rng, 12, 10, 0.5);
            let a = perimeter_of_set(&m);
            assert!((a - perimeter_lookup_oracle(&m)).abs() < 1e-9);
            assert!(a >= 0.0);
        }
    }

    #[test]
    fn saddle_rule_follows_cell_mean() {
        // values 1 and 0 on the diagonal with a high mean connect the high corners
        let v = [0.9, 0.2, 0.2, 0.9];
        let segs = contour_segments(&v, 2, 2, 0.5);
        assert_eq!(segs.len(), 2);
        for s in &segs {
            // both segments cut off a low corner
            let mid = ((s.a.0 + s.b.0) / 2.0, (s.a.1 + s.b.1) / 2.0);
            let near_low = (mid.0 < 0.5 && mid.1 > 0.5) || (mid.0 > 0.5 && mid.1 < 0.5);
            assert!(near_low, "{s:?}");
        }
        let lowmean = [0.6, 0.0, 0.0, 0.6];
        let segs = contour_segments(&lowmean, 2, 2, 0.5);
        for s in &segs {
            let mid = ((s.a.0 + s.b.0) / 2.0, (s.a.1 + s.b.1) / 2.0);
            let near_high = (mid.0 < 0.5 && mid.1 < 0.5) || (mid.0 > 0.5 && mid.1 > 0.5);
            assert!(near_high, "{s:?}");
        }
    }

    #[test]
    fn components_and_holes() {
        assert_eq!(connected_components_floodfill(&mask(&["..", ".."])), 0);
        assert_eq!(connected_components_floodfill(&mask(&["#.", ".#"])), 2);
        let ring = mask(&["###", "#.#", "###"]);
        assert_eq!(connected_components_floodfill(&ring), 1);
        assert_eq!(hole_count(&ring), 1);
        assert_eq!(euler_characteristic_exact(&ring), 0);
        assert_eq!(hole_count(&mask(&["###", "###"])), 0);
        assert_eq!(euler_characteristic_exact(&mask(&["#"])), 1);
        // a diagonal gap does not close a 4-connected ring
        let leaky = mask(&[".##", "#.#", "##."]);
        assert_eq!(hole_count(&leaky), 0);
        assert_eq!(connected_components_floodfill(&leaky), 2);
        assert_eq!(euler_characteristic_exact(&leaky), 2);
    }

    #[test]
    fn euler_identity_exhaustive_3x3() {
        for bits in 0u32..512 {
            let m = ExcursionSet::from_mask(3, 3, (0..9).map(|i| bits >> i & 1 == 1).collect(), 1.0);
            let cc = connected_components_floodfill(&m) as i64;
            let h = hole_count(&m) as i64;
            assert_eq!(euler_characteristic_exact(&m), cc - h, "mask {bits:09b}");
        }
    }

    #[test]
    fn euler_identity_random_with_border_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..300 {
            let p = rng.random_range(0.2..0.8);
            let m = random_mask(&mut rng, 16, 16, p);
            let holes = holes_oracle(&m);
            assert_eq!(hole_count(&m), holes);
            assert_eq!(
                euler_characteristic_exact(&m),
                connected_components_floodfill(&m) as i64 - holes as i64
            );
        }
    }

    #[test]
    fn measures_invariant_under_grid_symmetries() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..30 {
            let f = Field2D::from_fn(11, 8, 2.0, Units::Physical, |_, _| rng.random_range(0.0..1.0))
                .unwrap();
            let base = excursion(&f, 0.45);
            let stats = |s: &ExcursionSet| {
                (
                    area(s),
                    (perimeter_of_set(s) * 1e9).round(),
                    connected_components_floodfill(s),
                    hole_count(s),
                    euler_characteristic_exact(s),
                )
            };
            let want = stats(&base);
            for g in [f.flip_horizontal(), f.flip_vertical(), f.rotate90()] {
                assert_eq!(stats(&excursion(&g, 0.45)), want);
            }
        }
    }

    #[test]
    fn area_monotone_in_threshold() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = Field2D::from_fn(16, 16, 2.0, Units::Physical, |_, _| rng.random_range(0.0..5.0))
            .unwrap();
        let mut last = f64::INFINITY;
        for k in 0..50 {
            let a = area(&excursion(&f, k as f64 * 0.1));
            assert!(a <= last);
            last = a;
        }
    }

    #[test]
    fn edt_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let m = random_mask(&mut rng, 9, 14, 0.1);
        let d = squared_edt(&m.mask, 9, 14);
        for r in 0..9 {
            for c in 0..14 {
                let brute = (0..9 * 14)
                    .filter(|&i| m.mask[i])
                    .map(|i| {
                        let (rr, cc) = ((i / 14) as f64, (i % 14) as f64);
                        (rr - r as f64).powi(2) + (cc - c as f64).powi(2)
                    })
                    .fold(1e20, f64::min);
                assert_eq!(d[r * 14 + c], brute);
            }
        }
    }

    #[test]
    fn steiner_zero_radius_is_exact() {
        let rows = steiner_check(&[0.0], 0.25, 64).unwrap();
        assert_eq!(rows[0].lhs_area, rows[0].rhs_area);
        assert!(steiner_check(&[0.3], 0.25, 64).is_err());
        assert!(steiner_check(&[0.1], 0.0, 64).is_err());
    }

    #[test]
    fn steiner_polynomial_tracks_dilation() {
        let rows = steiner_check(&[0.01, 0.03, 0.05], 0.25, 512).unwrap();
        for row in rows {
            let rel = (row.lhs_area - row.rhs_area).abs() / row.rhs_area;
            assert!(rel < 0.02, "{row:?} rel {rel}");
        }
    }
}
