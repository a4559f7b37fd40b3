//! Lesion instances and the nine shape descriptors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_MIN_AREA: usize = 5;
/// Floor applied to a vanishing minor axis or perimeter.
pub const DEGENERATE_EPS: f64 = 1e-6;

pub const FEATURE_NAMES: [&str; 9] = [
    "area",
    "perimeter",
    "circularity",
    "solidity",
    "extent",
    "eccentricity",
    "major_axis",
    "minor_axis",
    "equivalent_diameter",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Connectivity {
    Four,
    Eight,
}

impl Connectivity {
    fn offsets(self) -> &'static [(isize, isize)] {
        match self {
            Connectivity::Four => &[(-1, 0), (0, -1), (0, 1), (1, 0)],
            Connectivity::Eight => &[(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)],
        }
    }
}

/// One connected lesion region; pixels are `(row, col)` in scanline order.
#[derive(Debug, Clone, PartialEq)]
pub struct LesionInstance {
    pub pixels: Vec<(usize, usize)>,
    /// `(row0, col0, row1, col1)`, inclusive.
    pub bbox: (usize, usize, usize, usize),
}

impl LesionInstance {
    pub fn area(&self) -> usize {
        self.pixels.len()
    }
}

/// Maximal connected `+1` regions of at least `min_area` pixels, ordered by
/// the scanline position of their first pixel.
pub fn connected_components(
    mask: &[f32],
    height: usize,
    width: usize,
    connectivity: Connectivity,
    min_area: usize,
) -> Result<Vec<LesionInstance>> {
    if mask.len() != height * width {
        return Err(Error::Shape(format!("mask has {} values for {height}x{width}", mask.len())));
    }
    let mut label = vec![usize::MAX; mask.len()];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for start in 0..mask.len() {
        if mask[start] <= 0.0 || label[start] != usize::MAX {
            continue;
        }
        let id = out.len();
        label[start] = id;
        stack.push(start);
        let mut pixels = Vec::new();
        while let Some(i) = stack.pop() {
            let (r, c) = (i / width, i % width);
            pixels.push((r, c));
            for &(dr, dc) in connectivity.offsets() {
                let (nr, nc) = (r as isize + dr, c as isize + dc);
                if nr < 0 || nc < 0 || nr >= height as isize || nc >= width as isize {
                    continue;
                }
                let j = nr as usize * width + nc as usize;
                if mask[j] > 0.0 && label[j] == usize::MAX {
                    label[j] = id;
                    stack.push(j);
                }
            }
        }
        pixels.sort_unstable();
        let bbox = pixels.iter().fold((usize::MAX, usize::MAX, 0, 0), |b, &(r, c)| {
            (b.0.min(r), b.1.min(c), b.2.max(r), b.3.max(c))
        });
        out.push(LesionInstance { pixels, bbox });
    }
    out.retain(|inst| inst.area() >= min_area);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShapeFeatures {
    pub area: f64,
    pub perimeter: f64,
    pub circularity: f64,
    pub solidity: f64,
    pub extent: f64,
    pub eccentricity: f64,
    pub major_axis: f64,
    pub minor_axis: f64,
    pub equivalent_diameter: f64,
    /// Set when the minor axis or perimeter hit [`DEGENERATE_EPS`].
    pub degenerate: bool,
}

impl ShapeFeatures {
    /// Values in [`FEATURE_NAMES`] order.
    pub fn to_vec(&self) -> Vec<f64> {
        vec![
            self.area,
            self.perimeter,
            self.circularity,
            self.solidity,
            self.extent,
            self.eccentricity,
            self.major_axis,
            self.minor_axis,
            self.equivalent_diameter,
        ]
    }
}

/// Moore-neighbour directions, clockwise from west, as `(drow, dcol)`.
const MOORE: [(isize, isize); 8] = [(0, -1), (-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1)];

/// Length of the outer 8-connected boundary trace, with diagonal steps
/// counting √2. Stops by Jacob's criterion (start pixel re-entered with the
/// initial move).
pub fn boundary_length(inst: &LesionInstance) -> f64 {
    let (r0, c0, r1, c1) = inst.bbox;
    let (h, w) = (r1 - r0 + 3, c1 - c0 + 3);
    let mut grid = vec![false; h * w];
    for &(r, c) in &inst.pixels {
        grid[(r - r0 + 1) * w + (c - c0 + 1)] = true;
    }
    let at = |r: isize, c: isize| grid[r as usize * w + c as usize];
    let (sr, sc) = (inst.pixels[0].0 - r0 + 1, inst.pixels[0].1 - c0 + 1);
    let start = (sr as isize, sc as isize);
    let mut cur = start;
    // the west neighbour of the first scanline pixel is background
    let mut back = 0usize;
    let mut first_move: Option<usize> = None;
    let mut length = 0.0;
    loop {
        let found = (1..=8).map(|k| (back + k) % 8).find(|&d| at(cur.0 + MOORE[d].0, cur.1 + MOORE[d].1));
        let Some(d) = found else {
            return 0.0;
        };
        if cur == start {
            match first_move {
                Some(f) if f == d => break,
                None => first_move = Some(d),
                _ => {}
            }
        }
        let next = (cur.0 + MOORE[d].0, cur.1 + MOORE[d].1);
        let prev_d = (d + 7) % 8;
        let bpos = (cur.0 + MOORE[prev_d].0, cur.1 + MOORE[prev_d].1);
        let rel = (bpos.0 - next.0, bpos.1 - next.1);
        back = MOORE.iter().position(|&m| m == rel).expect("backtrack cell is adjacent");
        length += if d % 2 == 1 { std::f64::consts::SQRT_2 } else { 1.0 };
        cur = next;
    }
    length
}

fn cross(o: (i64, i64), a: (i64, i64), b: (i64, i64)) -> i64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

/// Convex hull (monotone chain) of the corner points of every pixel.
pub fn convex_hull_area(inst: &LesionInstance) -> f64 {
    let mut pts: Vec<(i64, i64)> = inst
        .pixels
        .iter()
        .flat_map(|&(r, c)| {
            let (r, c) = (r as i64, c as i64);
            [(r, c), (r + 1, c), (r, c + 1), (r + 1, c + 1)]
        })
        .collect();
    pts.sort_unstable();
    pts.dedup();
    let mut hull: Vec<(i64, i64)> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let base = hull.len();
        let iter: Box<dyn Iterator<Item = &(i64, i64)>> = if pass == 0 { Box::new(pts.iter()) } else { Box::new(pts.iter().rev()) };
        for &p in iter {
            while hull.len() >= base + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0 {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    let twice: i64 = (0..hull.len())
        .map(|i| {
            let (a, b) = (hull[i], hull[(i + 1) % hull.len()]);
            a.0 * b.1 - b.0 * a.1
        })
        .sum();
    twice.abs() as f64 / 2.0
}

pub fn shape_features(inst: &LesionInstance) -> Result<ShapeFeatures> {
    if inst.pixels.is_empty() {
        return Err(Error::Input("shape features of an empty instance".into()));
    }
    let n = inst.area() as f64;
    let (mr, mc) = inst
        .pixels
        .iter()
        .fold((0.0, 0.0), |(a, b), &(r, c)| (a + r as f64, b + c as f64));
    let (mr, mc) = (mr / n, mc / n);
    let (mut srr, mut scc, mut src) = (0.0, 0.0, 0.0);
    for &(r, c) in &inst.pixels {
        let (dr, dc) = (r as f64 - mr, c as f64 - mc);
        srr += dr * dr;
        scc += dc * dc;
        src += dr * dc;
    }
    let (srr, scc, src) = (srr / n, scc / n, src / n);
    let half_tr = (srr + scc) / 2.0;
    let disc = (((srr - scc) / 2.0).powi(2) + src * src).sqrt();
    let l1 = (half_tr + disc).max(0.0);
    let l2 = (half_tr - disc).max(0.0);

    let mut degenerate = false;
    let mut minor = 4.0 * l2.sqrt();
    if minor < DEGENERATE_EPS {
        minor = DEGENERATE_EPS;
        degenerate = true;
    }
    let major = (4.0 * l1.sqrt()).max(minor);
    let eccentricity = if l1 > 0.0 { (1.0 - l2 / l1).max(0.0).sqrt() } else { 0.0 };
    let mut perimeter = boundary_length(inst);
    if perimeter < DEGENERATE_EPS {
        perimeter = DEGENERATE_EPS;
        degenerate = true;
    }
    let (r0, c0, r1, c1) = inst.bbox;
    let bbox_area = ((r1 - r0 + 1) * (c1 - c0 + 1)) as f64;
    Ok(ShapeFeatures {
        area: n,
        perimeter,
        circularity: 4.0 * std::f64::consts::PI * n / (perimeter * perimeter),
        solidity: n / convex_hull_area(inst),
        extent: n / bbox_area,
        eccentricity,
        major_axis: major,
        minor_axis: minor,
        equivalent_diameter: (4.0 * n / std::f64::consts::PI).sqrt(),
        degenerate,
    })
}

/// Descriptors of every lesion instance in a mask.
pub fn mask_features(mask: &[f32], height: usize, width: usize, min_area: usize) -> Result<Vec<ShapeFeatures>> {
    connected_components(mask, height, width, Connectivity::Eight, min_area)?
        .iter()
        .map(shape_features)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn canvas(h: usize, w: usize, on: impl Fn(usize, usize) -> bool) -> Vec<f32> {
        (0..h * w).map(|i| if on(i / w, i % w) { 1.0 } else { -1.0 }).collect()
    }

    fn single(mask: &[f32], h: usize, w: usize) -> ShapeFeatures {
        let c = connected_components(mask, h, w, Connectivity::Eight, 1).unwrap();
        assert_eq!(c.len(), 1);
        shape_features(&c[0]).unwrap()
    }

    #[test]
    fn square_descriptors() {
        let m = canvas(16, 16, |r, c| (3..13).contains(&r) && (2..12).contains(&c));
        let f = single(&m, 16, 16);
        assert_eq!(f.area, 100.0);
        assert_eq!(f.extent, 1.0);
        assert_eq!(f.solidity, 1.0);
        assert!(f.eccentricity.abs() < 1e-12);
        assert!((f.equivalent_diameter - 11.283791670955125).abs() < 1e-9);
        assert_eq!(f.perimeter, 36.0);
        assert!(!f.degenerate);
    }

    #[test]
    fn rectangle_matches_moment_closed_form() {
        for (a, b) in [(3usize, 7usize), (9, 4), (1, 6), (5, 5)] {
            let m = canvas(12, 12, |r, c| (1..1 + a).contains(&r) && (2..2 + b).contains(&c));
            let f = single(&m, 12, 12);
            assert_eq!(f.area, (a * b) as f64);
            assert_eq!(f.extent, 1.0);
            assert_eq!(f.solidity, 1.0);
            let (hi, lo) = (a.max(b) as f64, a.min(b) as f64);
            let (l1, l2) = ((hi * hi - 1.0) / 12.0, (lo * lo - 1.0) / 12.0);
            assert!((f.eccentricity - (1.0 - l2 / l1).sqrt()).abs() < 1e-6 || l1 == 0.0);
            assert!((f.major_axis - 4.0 * l1.sqrt()).abs() < 1e-9);
            assert!(f.minor_axis <= f.major_axis);
            assert!((f.equivalent_diameter - (4.0 * (a * b) as f64 / std::f64::consts::PI).sqrt()).abs() < 1e-12);
            assert_eq!(f.degenerate, lo == 1.0);
        }
    }

    #[test]
    fn disk_descriptors() {
        let m = canvas(50, 50, |r, c| {
            let (dr, dc) = (r as f64 - 24.5, c as f64 - 24.5);
            dr * dr + dc * dc <= 400.0
        });
        let f = single(&m, 50, 50);
        assert!((0.9..=1.1).contains(&f.circularity), "circularity {}", f.circularity);
        assert!((f.equivalent_diameter - 40.0).abs() / 40.0 < 0.02);
        assert!(f.solidity <= 1.0 && f.solidity > 0.95);
        assert!(f.eccentricity < 0.05);
    }

    #[test]
    fn component_rules() {
        assert!(connected_components(&[-1.0; 9], 3, 3, Connectivity::Eight, 1).unwrap().is_empty());
        let diag = canvas(4, 4, |r, c| (r, c) == (1, 1) || (r, c) == (2, 2));
        assert_eq!(connected_components(&diag, 4, 4, Connectivity::Eight, 1).unwrap().len(), 1);
        assert_eq!(connected_components(&diag, 4, 4, Connectivity::Four, 1).unwrap().len(), 2);
        assert!(connected_components(&diag, 4, 4, Connectivity::Eight, DEFAULT_MIN_AREA).unwrap().is_empty());
    }

    #[test]
    fn single_pixel_is_flagged_degenerate() {
        let f = single(&canvas(3, 3, |r, c| r == 1 && c == 1), 3, 3);
        assert!(f.degenerate);
        assert_eq!(f.minor_axis, DEGENERATE_EPS);
        assert_eq!(f.area, 1.0);
    }

    #[test]
    fn boundary_traces_thin_and_concave_shapes() {
        // a one-pixel line is walked out and back
        let f = single(&canvas(3, 8, |r, c| r == 1 && (1..6).contains(&c)), 3, 8);
        assert_eq!(f.perimeter, 8.0);
        // L shape: the return trip cuts the inner corner diagonally
        let m = canvas(6, 6, |r, c| (1..5).contains(&r) && c == 1 || r == 4 && (1..5).contains(&c));
        let f = single(&m, 6, 6);
        assert!((f.perimeter - (10.0 + std::f64::consts::SQRT_2)).abs() < 1e-12);
        assert!(f.solidity < 1.0);
        // shape whose start pixel is entered twice (figure eight through one pixel)
        let m = canvas(5, 5, |r, c| matches!((r, c), (1, 1) | (1, 2) | (2, 2) | (3, 2) | (3, 3) | (2, 1) | (2, 3)));
        assert!(single(&m, 5, 5).perimeter > 0.0);
    }

    /// Union-find over all pixel pairs, no scan ordering tricks.
    fn oracle_components(mask: &[f32], h: usize, w: usize) -> Vec<Vec<(usize, usize)>> {
        let n = h * w;
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(p: &mut [usize], x: usize) -> usize {
            let mut r = x;
            while p[r] != r {
                r = p[r];
            }
            p[x] = r;
            r
        }
        for i in 0..n {
            for j in i + 1..n {
                let (ri, ci, rj, cj) = (i / w, i % w, j / w, j % w);
                if mask[i] > 0.0 && mask[j] > 0.0 && ri.abs_diff(rj) <= 1 && ci.abs_diff(cj) <= 1 {
                    let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
        let mut groups: std::collections::BTreeMap<usize, Vec<(usize, usize)>> = Default::default();
        for i in (0..n).filter(|&i| mask[i] > 0.0) {
            let r = find(&mut parent, i);
            groups.entry(r).or_default().push((i / w, i % w));
        }
        let mut g: Vec<_> = groups.into_values().filter(|v| v.len() >= DEFAULT_MIN_AREA).collect();
        g.sort();
        g
    }

    #[test]
    fn components_match_union_find_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..100 {
            let (h, w) = (rng.random_range(4..14), rng.random_range(4..14));
            let p = rng.random_range(0.2..0.6);
            let m: Vec<f32> = (0..h * w).map(|_| if rng.random_bool(p) { 1.0 } else { -1.0 }).collect();
            let got: Vec<_> = connected_components(&m, h, w, Connectivity::Eight, DEFAULT_MIN_AREA)
                .unwrap()
                .into_iter()
                .map(|c| c.pixels)
                .collect();
            assert_eq!(got, oracle_components(&m, h, w));
            for c in connected_components(&m, h, w, Connectivity::Eight, DEFAULT_MIN_AREA).unwrap() {
                let f = shape_features(&c).unwrap();
                assert!(f.solidity <= 1.0 + 1e-12 && f.extent <= 1.0 && f.minor_axis <= f.major_axis);
                assert!(f.perimeter > 0.0);
            }
        }
    }
}
