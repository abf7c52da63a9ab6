//! Conforming triangulations of axis-aligned rectangles.
//!
//! Vertices are numbered lexicographically (row by row in y, then x inside
//! a row) and every cell is split along its bottom-left to top-right
//! diagonal. Boundary edges carry exactly one [`BoundaryTag`]; corner
//! vertices therefore belong to two tagged edges.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Point2<T> {
    pub x: T,
    pub y: T,
}

impl<T: Real> Point2<T> {
    pub fn new(x: T, y: T) -> Self {
        Self { x, y }
    }

    pub fn midpoint(self, other: Self) -> Self {
        let half = T::lit(0.5);
        Self::new((self.x + other.x) * half, (self.y + other.y) * half)
    }

    pub fn distance(self, other: Self) -> T {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BoundaryTag {
    Left,
    Right,
    Top,
    Bottom,
}

impl BoundaryTag {
    pub const ALL: [BoundaryTag; 4] = [
        BoundaryTag::Left,
        BoundaryTag::Right,
        BoundaryTag::Top,
        BoundaryTag::Bottom,
    ];
}

impl fmt::Display for BoundaryTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            BoundaryTag::Left => "Left",
            BoundaryTag::Right => "Right",
            BoundaryTag::Top => "Top",
            BoundaryTag::Bottom => "Bottom",
        };
        f.write_str(s)
    }
}

impl FromStr for BoundaryTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "Left" => Ok(BoundaryTag::Left),
            "Right" => Ok(BoundaryTag::Right),
            "Top" => Ok(BoundaryTag::Top),
            "Bottom" => Ok(BoundaryTag::Bottom),
            other => Err(Error::Parse(format!("unknown boundary tag `{other}`"))),
        }
    }
}

/// Axis-aligned rectangle `[x0, x1] x [y0, y1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect<T> {
    pub x0: T,
    pub x1: T,
    pub y0: T,
    pub y1: T,
}

impl<T: Real> Rect<T> {
    pub fn new(x0: T, x1: T, y0: T, y1: T) -> Result<Self> {
        let all_finite = [x0, x1, y0, y1].iter().all(|v| v.is_finite());
        if !all_finite || x1 <= x0 || y1 <= y0 {
            return Err(Error::InvalidDomain(format!(
                "[{x0}, {x1}] x [{y0}, {y1}] has no positive area"
            )));
        }
        Ok(Self { x0, x1, y0, y1 })
    }

    pub fn unit_square() -> Self {
        Self {
            x0: T::zero(),
            x1: T::one(),
            y0: T::zero(),
            y1: T::one(),
        }
    }

    pub fn area(&self) -> T {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }
}

/// Immutable conforming triangulation.
#[derive(Debug, Clone, PartialEq)]
pub struct Mesh<T> {
    vertices: Vec<Point2<T>>,
    triangles: Vec<[usize; 3]>,
    boundary_edges: Vec<([usize; 2], BoundaryTag)>,
    domain: Rect<T>,
}

/// Coordinate tolerance used when classifying boundary vertices.
const BOUNDARY_EPS: f64 = 1e-14;

impl<T: Real> Mesh<T> {
    /// Structured `nx` by `ny` grid, each cell split along the same diagonal.
    pub fn uniform(nx: usize, ny: usize, domain: Rect<T>) -> Result<Self> {
        let domain = Rect::new(domain.x0, domain.x1, domain.y0, domain.y1)?;
        if nx == 0 || ny == 0 {
            return Err(Error::InvalidDomain(format!(
                "grid resolution must be positive, got {nx} x {ny}"
            )));
        }
        let coord = |lo: T, hi: T, i: usize, n: usize| {
            if i == n {
                hi
            } else {
                lo + (hi - lo) * (T::count(i) / T::count(n))
            }
        };
        let mut vertices = Vec::with_capacity((nx + 1) * (ny + 1));
        for j in 0..=ny {
            let y = coord(domain.y0, domain.y1, j, ny);
            for i in 0..=nx {
                vertices.push(Point2::new(coord(domain.x0, domain.x1, i, nx), y));
            }
        }
        let vid = |i: usize, j: usize| j * (nx + 1) + i;
        let mut triangles = Vec::with_capacity(2 * nx * ny);
        for j in 0..ny {
            for i in 0..nx {
                let (v00, v10, v01, v11) = (vid(i, j), vid(i + 1, j), vid(i, j + 1), vid(i + 1, j + 1));
                triangles.push([v00, v10, v11]);
                triangles.push([v00, v11, v01]);
            }
        }
        let mut boundary_edges = Vec::with_capacity(2 * (nx + ny));
        for i in 0..nx {
            boundary_edges.push(([vid(i, 0), vid(i + 1, 0)], BoundaryTag::Bottom));
        }
        for j in 0..ny {
            boundary_edges.push(([vid(nx, j), vid(nx, j + 1)], BoundaryTag::Right));
        }
        for i in 0..nx {
            boundary_edges.push(([vid(i + 1, ny), vid(i, ny)], BoundaryTag::Top));
        }
        for j in 0..ny {
            boundary_edges.push(([vid(0, j + 1), vid(0, j)], BoundaryTag::Left));
        }
        Ok(Self {
            vertices,
            triangles,
            boundary_edges,
            domain,
        })
    }

    /// Red refinement: every triangle is split into four through its edge midpoints.
    pub fn refine_uniform(&self) -> Self {
        let mut vertices = self.vertices.clone();
        let mut midpoints: HashMap<[usize; 2], usize> = HashMap::new();
        let mut midpoint = |a: usize, b: usize, vertices: &mut Vec<Point2<T>>| {
            let key = if a < b { [a, b] } else { [b, a] };
            *midpoints.entry(key).or_insert_with(|| {
                vertices.push(vertices[a].midpoint(vertices[b]));
                vertices.len() - 1
            })
        };
        let mut triangles = Vec::with_capacity(4 * self.triangles.len());
        for &[a, b, c] in &self.triangles {
            let ab = midpoint(a, b, &mut vertices);
            let bc = midpoint(b, c, &mut vertices);
            let ca = midpoint(c, a, &mut vertices);
            triangles.push([a, ab, ca]);
            triangles.push([ab, b, bc]);
            triangles.push([ca, bc, c]);
            triangles.push([ab, bc, ca]);
        }
        let mut boundary_edges = Vec::with_capacity(2 * self.boundary_edges.len());
        for &([a, b], tag) in &self.boundary_edges {
            let m = midpoint(a, b, &mut vertices);
            boundary_edges.push(([a, m], tag));
            boundary_edges.push(([m, b], tag));
        }
        Self {
            vertices,
            triangles,
            boundary_edges,
            domain: self.domain,
        }
    }

    pub fn vertices(&self) -> &[Point2<T>] {
        &self.vertices
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn boundary_edges(&self) -> &[([usize; 2], BoundaryTag)] {
        &self.boundary_edges
    }

    pub fn domain(&self) -> Rect<T> {
        self.domain
    }

    pub fn triangle_points(&self, k: usize) -> [Point2<T>; 3] {
        let [a, b, c] = self.triangles[k];
        [self.vertices[a], self.vertices[b], self.vertices[c]]
    }

    /// Signed area of triangle `k` (positive for counterclockwise orientation).
    pub fn signed_area(&self, k: usize) -> T {
        let [p0, p1, p2] = self.triangle_points(k);
        ((p1.x - p0.x) * (p2.y - p0.y) - (p2.x - p0.x) * (p1.y - p0.y)) * T::lit(0.5)
    }

    /// Largest element diameter, i.e. the longest triangle edge.
    pub fn mesh_size(&self) -> Result<T> {
        if self.triangles.is_empty() {
            return Err(Error::EmptyMesh);
        }
        let mut h = T::zero();
        for k in 0..self.triangles.len() {
            let [p0, p1, p2] = self.triangle_points(k);
            h = h.max(p0.distance(p1)).max(p1.distance(p2)).max(p2.distance(p0));
        }
        Ok(h)
    }

    /// All undirected edges with the number of triangles sharing each.
    /// Keys are `[min, max]` vertex pairs, iteration order is sorted.
    pub fn edge_multiplicity(&self) -> BTreeMap<[usize; 2], usize> {
        let mut edges = BTreeMap::new();
        for &[a, b, c] in &self.triangles {
            for (u, v) in [(a, b), (b, c), (c, a)] {
                *edges.entry([u.min(v), u.max(v)]).or_insert(0) += 1;
            }
        }
        edges
    }

    /// Tag implied by the coordinates of an edge's endpoints, if it lies on
    /// one side of the rectangle.
    pub fn classify_edge(&self, a: usize, b: usize) -> Option<BoundaryTag> {
        let (pa, pb) = (self.vertices[a], self.vertices[b]);
        let eps = T::lit(BOUNDARY_EPS);
        let on = |u: T, v: T, c: T| (u - c).abs() <= eps && (v - c).abs() <= eps;
        let d = self.domain;
        if on(pa.x, pb.x, d.x0) {
            Some(BoundaryTag::Left)
        } else if on(pa.x, pb.x, d.x1) {
            Some(BoundaryTag::Right)
        } else if on(pa.y, pb.y, d.y0) {
            Some(BoundaryTag::Bottom)
        } else if on(pa.y, pb.y, d.y1) {
            Some(BoundaryTag::Top)
        } else {
            None
        }
    }

    /// Plain-text dump: header `vertices <n> triangles <m>`, then `v x y`,
    /// `t i j k` and `b i j TAG` lines.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "vertices {} triangles {}",
            self.vertices.len(),
            self.triangles.len()
        );
        for p in &self.vertices {
            let _ = writeln!(out, "v {:e} {:e}", p.x.as_f64(), p.y.as_f64());
        }
        for [a, b, c] in &self.triangles {
            let _ = writeln!(out, "t {a} {b} {c}");
        }
        for ([a, b], tag) in &self.boundary_edges {
            let _ = writeln!(out, "b {a} {b} {tag}");
        }
        out
    }

    /// Parses the format written by [`Mesh::to_text`]. The domain is
    /// recovered as the bounding box of the vertices.
    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |line: usize, msg: &str| Error::Parse(format!("line {}: {msg}", line + 1));
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or_else(|| Error::Parse("empty input".into()))?;
        let head: Vec<&str> = header.split_whitespace().collect();
        let (nv, nt) = match head.as_slice() {
            ["vertices", n, "triangles", m] => (
                n.parse::<usize>().map_err(|_| bad(0, "bad vertex count"))?,
                m.parse::<usize>().map_err(|_| bad(0, "bad triangle count"))?,
            ),
            _ => return Err(bad(0, "expected `vertices <n> triangles <m>`")),
        };
        let mut vertices = Vec::with_capacity(nv);
        let mut triangles = Vec::with_capacity(nt);
        let mut boundary_edges = Vec::new();
        for (ln, line) in lines {
            let fields: Vec<&str> = line.split_whitespace().collect();
            let index = |s: &str| s.parse::<usize>().map_err(|_| bad(ln, "bad index"));
            match fields.as_slice() {
                ["v", x, y] => {
                    let x: f64 = x.parse().map_err(|_| bad(ln, "bad coordinate"))?;
                    let y: f64 = y.parse().map_err(|_| bad(ln, "bad coordinate"))?;
                    vertices.push(Point2::new(T::lit(x), T::lit(y)));
                }
                ["t", a, b, c] => triangles.push([index(a)?, index(b)?, index(c)?]),
                ["b", a, b, tag] => boundary_edges.push(([index(a)?, index(b)?], tag.parse()?)),
                _ => return Err(bad(ln, "unrecognized record")),
            }
        }
        if vertices.len() != nv || triangles.len() != nt {
            return Err(Error::Parse("record counts disagree with header".into()));
        }
        let out_of_range = triangles.iter().flatten().chain(boundary_edges.iter().flat_map(|(e, _)| e));
        if out_of_range.into_iter().any(|&i| i >= nv) {
            return Err(Error::Parse("vertex index out of range".into()));
        }
        let (mut x0, mut x1, mut y0, mut y1) = (T::infinity(), T::neg_infinity(), T::infinity(), T::neg_infinity());
        for p in &vertices {
            x0 = x0.min(p.x);
            x1 = x1.max(p.x);
            y0 = y0.min(p.y);
            y1 = y1.max(p.y);
        }
        Ok(Self {
            vertices,
            triangles,
            boundary_edges,
            domain: Rect::new(x0, x1, y0, y1)?,
        })
    }
}
