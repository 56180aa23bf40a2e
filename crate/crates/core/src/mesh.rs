//! Bilayer triangulations: one mesh per subdomain plus the matched interface.
//!
//! The lower layer is the dermis `D`, the upper one the epidermis `E`. Boundary
//! edges carry a [`BoundaryTag`]: `Gamma` is the exposed surface of `E`,
//! `Sigma` the interface shared by both layers and `Clamped` everything else.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};

/// Subdomain label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Side {
    D,
    E,
}

impl Side {
    pub const BOTH: [Side; 2] = [Side::D, Side::E];

    pub fn opposite(self) -> Side {
        match self {
            Side::D => Side::E,
            Side::E => Side::D,
        }
    }

    pub fn index(self) -> usize {
        match self {
            Side::D => 0,
            Side::E => 1,
        }
    }
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Side::D => "D",
            Side::E => "E",
        })
    }
}

impl FromStr for Side {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "D" | "d" => Ok(Side::D),
            "E" | "e" => Ok(Side::E),
            other => Err(Error::Argument(format!("unknown subdomain tag `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BoundaryTag {
    Gamma,
    Clamped,
    Sigma,
}

impl fmt::Display for BoundaryTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BoundaryTag::Gamma => "Gamma",
            BoundaryTag::Clamped => "Clamped",
            BoundaryTag::Sigma => "Sigma",
        })
    }
}

impl FromStr for BoundaryTag {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "gamma" => Ok(BoundaryTag::Gamma),
            "clamped" => Ok(BoundaryTag::Clamped),
            "sigma" => Ok(BoundaryTag::Sigma),
            other => Err(Error::Argument(format!("unknown boundary tag `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoundaryEdge {
    pub vertices: [usize; 2],
    pub tag: BoundaryTag,
    /// Owning triangle.
    pub triangle: usize,
}

/// Axis-aligned rectangle `[x0, x1] x [y0, y1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: f64,
    pub x1: f64,
    pub y0: f64,
    pub y1: f64,
}

impl Rect {
    pub fn new(x0: f64, x1: f64, y0: f64, y1: f64) -> Self {
        Rect { x0, x1, y0, y1 }
    }

    pub fn area(&self) -> f64 {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }

    pub fn diameter(&self) -> f64 {
        (self.x1 - self.x0).hypot(self.y1 - self.y0)
    }
}

/// Triangulation of a single subdomain.
#[derive(Clone, Debug)]
pub struct Mesh2D {
    vertices: Vec<[f64; 2]>,
    triangles: Vec<[usize; 3]>,
    subdomain: Vec<Side>,
    boundary_edges: Vec<BoundaryEdge>,
}

pub(crate) fn edge_key(a: usize, b: usize) -> (usize, usize) {
    if a < b {
        (a, b)
    } else {
        (b, a)
    }
}

fn signed_area(p: &[[f64; 2]; 3]) -> f64 {
    0.5 * ((p[1][0] - p[0][0]) * (p[2][1] - p[0][1]) - (p[2][0] - p[0][0]) * (p[1][1] - p[0][1]))
}

impl Mesh2D {
    /// Builds a mesh and checks the structural invariants: positive areas,
    /// boundary edges owned by exactly one triangle, interior edges shared by two,
    /// `Gamma` edges only on `E`.
    pub fn new(
        vertices: Vec<[f64; 2]>,
        triangles: Vec<[usize; 3]>,
        subdomain: Vec<Side>,
        boundary_edges: Vec<BoundaryEdge>,
    ) -> Result<Self> {
        if subdomain.len() != triangles.len() {
            bail!(Argument, "{} subdomain tags for {} triangles", subdomain.len(), triangles.len());
        }
        let mesh = Mesh2D { vertices, triangles, subdomain, boundary_edges };
        mesh.validate()?;
        Ok(mesh)
    }

    fn validate(&self) -> Result<()> {
        let nv = self.vertices.len();
        for (t, tri) in self.triangles.iter().enumerate() {
            if tri.iter().any(|&v| v >= nv) {
                bail!(Geometry, "triangle {t} references a missing vertex");
            }
            if self.signed_area(t) <= 0.0 {
                bail!(Geometry, "triangle {t} has non-positive signed area");
            }
        }
        let mut count: HashMap<(usize, usize), usize> = HashMap::new();
        for tri in &self.triangles {
            for k in 0..3 {
                *count.entry(edge_key(tri[k], tri[(k + 1) % 3])).or_default() += 1;
            }
        }
        if let Some((e, c)) = count.iter().find(|(_, &c)| c > 2) {
            bail!(Geometry, "edge {:?} is shared by {} triangles", e, c);
        }
        let mut tagged: HashMap<(usize, usize), usize> = HashMap::new();
        for (i, be) in self.boundary_edges.iter().enumerate() {
            let key = edge_key(be.vertices[0], be.vertices[1]);
            if count.get(&key) != Some(&1) {
                bail!(Geometry, "boundary edge {i} is not owned by exactly one triangle");
            }
            let tri = self
                .triangles
                .get(be.triangle)
                .ok_or_else(|| Error::Geometry(format!("boundary edge {i} references a missing triangle")))?;
            if !(tri.contains(&be.vertices[0]) && tri.contains(&be.vertices[1])) {
                bail!(Geometry, "boundary edge {i} does not belong to triangle {}", be.triangle);
            }
            if be.tag == BoundaryTag::Gamma && self.subdomain[be.triangle] != Side::E {
                bail!(Geometry, "Gamma edge {i} lies on the D subdomain");
            }
            if tagged.insert(key, i).is_some() {
                bail!(Geometry, "boundary edge {i} is tagged twice");
            }
        }
        let untagged = count.iter().filter(|(k, &c)| c == 1 && !tagged.contains_key(k)).count();
        if untagged > 0 {
            bail!(Geometry, "{untagged} exterior edges carry no boundary tag");
        }
        Ok(())
    }

    pub fn vertices(&self) -> &[[f64; 2]] {
        &self.vertices
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn subdomain_tags(&self) -> &[Side] {
        &self.subdomain
    }

    pub fn boundary_edges(&self) -> &[BoundaryEdge] {
        &self.boundary_edges
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn num_triangles(&self) -> usize {
        self.triangles.len()
    }

    /// Side of the first triangle; submeshes are single-sided.
    pub fn side(&self) -> Side {
        self.subdomain.first().copied().unwrap_or(Side::D)
    }

    pub fn coords(&self, t: usize) -> [[f64; 2]; 3] {
        let tri = self.triangles[t];
        [self.vertices[tri[0]], self.vertices[tri[1]], self.vertices[tri[2]]]
    }

    pub fn signed_area(&self, t: usize) -> f64 {
        signed_area(&self.coords(t))
    }

    pub fn area(&self, t: usize) -> f64 {
        self.signed_area(t).abs()
    }

    pub fn total_area(&self) -> f64 {
        (0..self.num_triangles()).map(|t| self.area(t)).sum()
    }

    /// Longest edge over all triangles.
    pub fn meshsize(&self) -> f64 {
        (0..self.num_triangles())
            .map(|t| {
                let p = self.coords(t);
                (0..3)
                    .map(|k| {
                        let a = p[k];
                        let b = p[(k + 1) % 3];
                        (a[0] - b[0]).hypot(a[1] - b[1])
                    })
                    .fold(0.0, f64::max)
            })
            .fold(0.0, f64::max)
    }

    /// Diameter of the vertex bounding box.
    pub fn diameter(&self) -> f64 {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for v in &self.vertices {
            for k in 0..2 {
                lo[k] = lo[k].min(v[k]);
                hi[k] = hi[k].max(v[k]);
            }
        }
        (hi[0] - lo[0]).hypot(hi[1] - lo[1])
    }

    pub fn edges_with_tag(&self, tag: BoundaryTag) -> impl Iterator<Item = (usize, &BoundaryEdge)> {
        self.boundary_edges.iter().enumerate().filter(move |(_, e)| e.tag == tag)
    }

    /// Vertices touching an edge with the given tag, sorted and deduplicated.
    pub fn vertices_with_tag(&self, tag: BoundaryTag) -> Vec<usize> {
        let mut out: Vec<usize> = self.edges_with_tag(tag).flat_map(|(_, e)| e.vertices).collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    /// Outward unit normal of a boundary edge.
    pub fn outward_normal(&self, edge: usize) -> Result<[f64; 2]> {
        let be = &self.boundary_edges[edge];
        let a = self.vertices[be.vertices[0]];
        let b = self.vertices[be.vertices[1]];
        let (tx, ty) = (b[0] - a[0], b[1] - a[1]);
        let len = tx.hypot(ty);
        if len <= 1e-14 * self.diameter().max(f64::MIN_POSITIVE) {
            bail!(Geometry, "boundary edge {edge} has zero length");
        }
        let mut n = [ty / len, -tx / len];
        let tri = self.triangles[be.triangle];
        let third = tri.iter().copied().find(|v| !be.vertices.contains(v)).unwrap_or(tri[0]);
        let c = self.vertices[third];
        if n[0] * (c[0] - a[0]) + n[1] * (c[1] - a[1]) > 0.0 {
            n = [-n[0], -n[1]];
        }
        Ok(n)
    }

    pub fn edge_length(&self, edge: usize) -> f64 {
        let be = &self.boundary_edges[edge];
        let a = self.vertices[be.vertices[0]];
        let b = self.vertices[be.vertices[1]];
        (b[0] - a[0]).hypot(b[1] - a[1])
    }
}

/// One matched pair of interface edges.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgePair {
    /// Index into the boundary edges of the `D` mesh.
    pub d_edge: usize,
    /// Index into the boundary edges of the `E` mesh.
    pub e_edge: usize,
    /// Interface node indices of the two endpoints (in `D` edge order).
    pub nodes: [usize; 2],
    /// Unit normal pointing from `D` into `E`.
    pub normal: [f64; 2],
}

/// A vertex shared by both sides of the interface.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NodePair {
    pub d_vertex: usize,
    pub e_vertex: usize,
    pub x: [f64; 2],
}

/// Matching between the `Sigma` edges of the two submeshes.
#[derive(Clone, Debug)]
pub struct InterfaceMap {
    pairs: Vec<EdgePair>,
    nodes: Vec<NodePair>,
}

impl InterfaceMap {
    /// Pairs every `Sigma` edge of `d` with the `Sigma` edge of `e` sharing its
    /// endpoints. Non-matching interfaces are rejected.
    pub fn match_meshes(d: &Mesh2D, e: &Mesh2D) -> Result<Self> {
        let tol = 1e-12 * d.diameter().max(e.diameter());
        let close = |a: [f64; 2], b: [f64; 2]| (a[0] - b[0]).abs() <= tol && (a[1] - b[1]).abs() <= tol;

        let d_edges: Vec<usize> = d.edges_with_tag(BoundaryTag::Sigma).map(|(i, _)| i).collect();
        let e_edges: Vec<usize> = e.edges_with_tag(BoundaryTag::Sigma).map(|(i, _)| i).collect();
        if d_edges.is_empty() {
            bail!(Geometry, "no interface edges");
        }
        if d_edges.len() != e_edges.len() {
            bail!(Geometry, "interface edge counts differ: {} on D, {} on E", d_edges.len(), e_edges.len());
        }

        let mut nodes: Vec<NodePair> = Vec::new();
        let mut node_of_d: HashMap<usize, usize> = HashMap::new();
        let mut intern = |dv: usize, ev: usize| -> usize {
            *node_of_d.entry(dv).or_insert_with(|| {
                nodes.push(NodePair { d_vertex: dv, e_vertex: ev, x: d.vertices[dv] });
                nodes.len() - 1
            })
        };

        let mut used = vec![false; e.boundary_edges.len()];
        let mut pairs = Vec::with_capacity(d_edges.len());
        for &de in &d_edges {
            let [a, b] = d.boundary_edges[de].vertices;
            let (pa, pb) = (d.vertices[a], d.vertices[b]);
            let mut found = None;
            for &ee in &e_edges {
                if used[ee] {
                    continue;
                }
                let [c, f] = e.boundary_edges[ee].vertices;
                let (pc, pf) = (e.vertices[c], e.vertices[f]);
                if close(pa, pc) && close(pb, pf) {
                    found = Some((ee, c, f));
                } else if close(pa, pf) && close(pb, pc) {
                    found = Some((ee, f, c));
                }
                if found.is_some() {
                    break;
                }
            }
            let Some((ee, ea, eb)) = found else {
                bail!(Geometry, "interface edge {de} of D has no matching edge on E");
            };
            used[ee] = true;
            let normal = d.outward_normal(de)?;
            let na = intern(a, ea);
            let nb = intern(b, eb);
            pairs.push(EdgePair { d_edge: de, e_edge: ee, nodes: [na, nb], normal });
        }
        Ok(InterfaceMap { pairs, nodes })
    }

    pub fn pairs(&self) -> &[EdgePair] {
        &self.pairs
    }

    pub fn nodes(&self) -> &[NodePair] {
        &self.nodes
    }

    pub fn num_pairs(&self) -> usize {
        self.pairs.len()
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Vertex index of interface node `k` on the given side.
    pub fn vertex(&self, side: Side, k: usize) -> usize {
        match side {
            Side::D => self.nodes[k].d_vertex,
            Side::E => self.nodes[k].e_vertex,
        }
    }

    pub fn edge(&self, side: Side, pair: usize) -> usize {
        match side {
            Side::D => self.pairs[pair].d_edge,
            Side::E => self.pairs[pair].e_edge,
        }
    }

    pub fn edge_length(&self, pair: usize) -> f64 {
        let [a, b] = self.pairs[pair].nodes;
        let (pa, pb) = (self.nodes[a].x, self.nodes[b].x);
        (pb[0] - pa[0]).hypot(pb[1] - pa[1])
    }
}

/// Unit normals of every interface pair, oriented from `D` into `E`.
pub fn interface_normals(map: &InterfaceMap, d: &Mesh2D) -> Result<Vec<[f64; 2]>> {
    if map.num_pairs() == 0 {
        bail!(Argument, "empty interface map");
    }
    map.pairs().iter().map(|p| d.outward_normal(p.d_edge)).collect()
}

fn structured(
    rect: Rect,
    nx: usize,
    ny: usize,
    side: Side,
    tag_of: impl Fn([f64; 2], [f64; 2]) -> BoundaryTag,
) -> Result<Mesh2D> {
    let idx = |i: usize, j: usize| j * (nx + 1) + i;
    let mut vertices = Vec::with_capacity((nx + 1) * (ny + 1));
    for j in 0..=ny {
        for i in 0..=nx {
            let x = rect.x0 + (rect.x1 - rect.x0) * i as f64 / nx as f64;
            let y = rect.y0 + (rect.y1 - rect.y0) * j as f64 / ny as f64;
            vertices.push([x, y]);
        }
    }
    let mut triangles = Vec::with_capacity(2 * nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let (a, b, c, d) = (idx(i, j), idx(i + 1, j), idx(i + 1, j + 1), idx(i, j + 1));
            // alternate the diagonal so the pattern is symmetric under reflection
            if (i + j).is_multiple_of(2) {
                triangles.push([a, b, c]);
                triangles.push([a, c, d]);
            } else {
                triangles.push([a, b, d]);
                triangles.push([b, c, d]);
            }
        }
    }
    let mut owner: HashMap<(usize, usize), usize> = HashMap::new();
    let mut count: HashMap<(usize, usize), usize> = HashMap::new();
    for (t, tri) in triangles.iter().enumerate() {
        for k in 0..3 {
            let key = edge_key(tri[k], tri[(k + 1) % 3]);
            owner.insert(key, t);
            *count.entry(key).or_default() += 1;
        }
    }
    let mut boundary_edges: Vec<BoundaryEdge> = count
        .iter()
        .filter(|(_, &c)| c == 1)
        .map(|(&(a, b), _)| BoundaryEdge {
            vertices: [a, b],
            tag: tag_of(vertices[a], vertices[b]),
            triangle: owner[&(a, b)],
        })
        .collect();
    boundary_edges.sort_by_key(|e| (e.vertices[0], e.vertices[1]));
    let subdomain = vec![side; triangles.len()];
    Mesh2D::new(vertices, triangles, subdomain, boundary_edges)
}

/// Structured triangulations of two abutting rectangles.
///
/// `rect_e` must share a full horizontal edge with `rect_d` (above or below it).
/// The shared edge is tagged `Sigma`, the opposite edge of `E` is `Gamma` and the
/// remaining exterior edges are `Clamped`.
pub fn build_bilayer(
    rect_d: Rect,
    rect_e: Rect,
    nx: usize,
    ny_d: usize,
    ny_e: usize,
) -> Result<(Mesh2D, Mesh2D, InterfaceMap)> {
    if nx == 0 || ny_d == 0 || ny_e == 0 {
        bail!(Argument, "element counts must be positive (nx={nx}, ny_d={ny_d}, ny_e={ny_e})");
    }
    for (name, r) in [("D", rect_d), ("E", rect_e)] {
        if !(r.x1 > r.x0 && r.y1 > r.y0) {
            bail!(Geometry, "rectangle {name} is empty or inverted");
        }
    }
    let diam = rect_d.diameter().max(rect_e.diameter());
    let tol = 1e-10 * diam;
    let near = |a: f64, b: f64| (a - b).abs() <= tol;
    if !(near(rect_d.x0, rect_e.x0) && near(rect_d.x1, rect_e.x1)) {
        bail!(Geometry, "rectangles do not share a full horizontal edge");
    }
    let (y_sigma, y_gamma) = if near(rect_e.y0, rect_d.y1) {
        (rect_d.y1, rect_e.y1)
    } else if near(rect_e.y1, rect_d.y0) {
        (rect_d.y0, rect_e.y0)
    } else {
        bail!(Geometry, "rectangles do not abut");
    };
    let horizontal_at = move |a: [f64; 2], b: [f64; 2], y: f64| (a[1] - y).abs() <= tol && (b[1] - y).abs() <= tol;

    let d = structured(rect_d, nx, ny_d, Side::D, |a, b| {
        if horizontal_at(a, b, y_sigma) {
            BoundaryTag::Sigma
        } else {
            BoundaryTag::Clamped
        }
    })?;
    let e = structured(rect_e, nx, ny_e, Side::E, |a, b| {
        if horizontal_at(a, b, y_sigma) {
            BoundaryTag::Sigma
        } else if horizontal_at(a, b, y_gamma) {
            BoundaryTag::Gamma
        } else {
            BoundaryTag::Clamped
        }
    })?;
    let map = InterfaceMap::match_meshes(&d, &e)?;
    Ok((d, e, map))
}

fn parse_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse { line, msg: msg.into() }
}

/// Reads a bilayer mesh in the plain-text exchange format.
///
/// ```text
/// VERTICES
/// x y
/// TRIANGLES
/// i j k D|E
/// BOUNDARY
/// i j Gamma|Clamped|Sigma
/// ```
///
/// Indices are 0-based. Interface edges between `D` and `E` triangles are
/// detected automatically and may be omitted from `BOUNDARY`.
pub fn import_bilayer(text: &str) -> Result<(Mesh2D, Mesh2D, InterfaceMap)> {
    #[derive(PartialEq)]
    enum Section {
        None,
        Vertices,
        Triangles,
        Boundary,
    }
    let mut section = Section::None;
    let mut vertices: Vec<[f64; 2]> = Vec::new();
    let mut triangles: Vec<([usize; 3], Side, usize)> = Vec::new();
    let mut boundary: Vec<([usize; 2], BoundaryTag, usize)> = Vec::new();

    for (lineno, raw) in text.lines().enumerate() {
        let line_no = lineno + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        match line.to_ascii_uppercase().as_str() {
            "VERTICES" => {
                section = Section::Vertices;
                continue;
            }
            "TRIANGLES" => {
                section = Section::Triangles;
                continue;
            }
            "BOUNDARY" => {
                section = Section::Boundary;
                continue;
            }
            _ => {}
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let index = |s: &str| s.parse::<usize>().map_err(|_| parse_err(line_no, format!("bad index `{s}`")));
        match section {
            Section::None => return Err(parse_err(line_no, "data before any section header")),
            Section::Vertices => {
                if fields.len() != 2 {
                    return Err(parse_err(line_no, "expected `x y`"));
                }
                let x = fields[0].parse::<f64>().map_err(|_| parse_err(line_no, "bad x coordinate"))?;
                let y = fields[1].parse::<f64>().map_err(|_| parse_err(line_no, "bad y coordinate"))?;
                vertices.push([x, y]);
            }
            Section::Triangles => {
                if fields.len() != 4 {
                    return Err(parse_err(line_no, "expected `i j k tag`"));
                }
                let tri = [index(fields[0])?, index(fields[1])?, index(fields[2])?];
                let side = fields[3].parse::<Side>().map_err(|e| parse_err(line_no, e.to_string()))?;
                triangles.push((tri, side, line_no));
            }
            Section::Boundary => {
                if fields.len() != 3 {
                    return Err(parse_err(line_no, "expected `i j tag`"));
                }
                let edge = [index(fields[0])?, index(fields[1])?];
                let tag = fields[2].parse::<BoundaryTag>().map_err(|e| parse_err(line_no, e.to_string()))?;
                boundary.push((edge, tag, line_no));
            }
        }
    }

    let nv = vertices.len();
    for (tri, _, line) in &mut triangles {
        if tri.iter().any(|&v| v >= nv) {
            return Err(parse_err(*line, "triangle references a missing vertex"));
        }
        let p = [vertices[tri[0]], vertices[tri[1]], vertices[tri[2]]];
        let a = signed_area(&p);
        if a == 0.0 {
            return Err(parse_err(*line, "degenerate triangle"));
        }
        if a < 0.0 {
            tri.swap(1, 2);
        }
    }

    // edge -> (triangle, side) incidences in the global mesh
    let mut incid: HashMap<(usize, usize), Vec<(usize, Side)>> = HashMap::new();
    for (t, (tri, side, _)) in triangles.iter().enumerate() {
        for k in 0..3 {
            incid.entry(edge_key(tri[k], tri[(k + 1) % 3])).or_default().push((t, *side));
        }
    }
    let mut tags: HashMap<(usize, usize), (BoundaryTag, usize)> = HashMap::new();
    for (edge, tag, line) in &boundary {
        if edge.iter().any(|&v| v >= nv) {
            return Err(parse_err(*line, "boundary edge references a missing vertex"));
        }
        tags.insert(edge_key(edge[0], edge[1]), (*tag, *line));
    }

    let mut out = Vec::with_capacity(2);
    for side in Side::BOTH {
        let mut local: HashMap<usize, usize> = HashMap::new();
        let mut verts = Vec::new();
        let mut tris = Vec::new();
        let mut global_of_local_tri = Vec::new();
        for (t, (tri, s, _)) in triangles.iter().enumerate() {
            if *s != side {
                continue;
            }
            let mut lt = [0; 3];
            for k in 0..3 {
                lt[k] = *local.entry(tri[k]).or_insert_with(|| {
                    verts.push(vertices[tri[k]]);
                    verts.len() - 1
                });
            }
            tris.push(lt);
            global_of_local_tri.push(t);
        }
        let local_tri: HashMap<usize, usize> = global_of_local_tri.iter().enumerate().map(|(l, &g)| (g, l)).collect();
        let mut edges = Vec::new();
        for (&(a, b), inc) in &incid {
            let mine: Vec<usize> = inc.iter().filter(|(_, s)| *s == side).map(|(t, _)| *t).collect();
            if mine.len() != 1 {
                continue;
            }
            let owner = local_tri[&mine[0]];
            let tag = if inc.len() == 2 {
                BoundaryTag::Sigma
            } else if inc.len() == 1 {
                match tags.get(&(a, b)) {
                    Some((BoundaryTag::Sigma, line)) => {
                        return Err(parse_err(*line, "Sigma tag on an exterior edge"));
                    }
                    Some((tag, _)) => *tag,
                    None => bail!(Geometry, "exterior edge ({a}, {b}) has no boundary tag"),
                }
            } else {
                bail!(Geometry, "edge ({a}, {b}) is shared by {} triangles", inc.len());
            };
            edges.push(BoundaryEdge { vertices: [local[&a], local[&b]], tag, triangle: owner });
        }
        edges.sort_by_key(|e| (e.vertices[0], e.vertices[1]));
        let n = tris.len();
        out.push(Mesh2D::new(verts, tris, vec![side; n], edges)?);
    }
    let e = out.pop().unwrap();
    let d = out.pop().unwrap();
    let map = InterfaceMap::match_meshes(&d, &e)?;
    Ok((d, e, map))
}

/// Writes both submeshes as one global mesh in the exchange format read by
/// [`import_bilayer`]. Interface vertices are emitted once.
pub fn export_bilayer(d: &Mesh2D, e: &Mesh2D, map: &InterfaceMap) -> String {
    use std::fmt::Write;
    let mut e_global = vec![usize::MAX; e.num_vertices()];
    for node in map.nodes() {
        e_global[node.e_vertex] = node.d_vertex;
    }
    let mut next = d.num_vertices();
    for g in e_global.iter_mut() {
        if *g == usize::MAX {
            *g = next;
            next += 1;
        }
    }
    let mut all = d.vertices().to_vec();
    all.resize(next, [0.0; 2]);
    for (l, &g) in e_global.iter().enumerate() {
        all[g] = e.vertices()[l];
    }
    let mut s = String::from("VERTICES\n");
    for v in &all {
        let _ = writeln!(s, "{:.17e} {:.17e}", v[0], v[1]);
    }
    s.push_str("TRIANGLES\n");
    for t in d.triangles() {
        let _ = writeln!(s, "{} {} {} D", t[0], t[1], t[2]);
    }
    for t in e.triangles() {
        let _ = writeln!(s, "{} {} {} E", e_global[t[0]], e_global[t[1]], e_global[t[2]]);
    }
    s.push_str("BOUNDARY\n");
    for be in d.boundary_edges().iter().filter(|b| b.tag != BoundaryTag::Sigma) {
        let _ = writeln!(s, "{} {} {}", be.vertices[0], be.vertices[1], be.tag);
    }
    for be in e.boundary_edges().iter().filter(|b| b.tag != BoundaryTag::Sigma) {
        let _ = writeln!(s, "{} {} {}", e_global[be.vertices[0]], e_global[be.vertices[1]], be.tag);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stacked(nx: usize, ny_d: usize, ny_e: usize) -> (Mesh2D, Mesh2D, InterfaceMap) {
        build_bilayer(Rect::new(0.0, 1.0, 0.0, 1.0), Rect::new(0.0, 1.0, 1.0, 1.4), nx, ny_d, ny_e).unwrap()
    }

    #[test]
    fn minimal_split() {
        let (d, e, map) = build_bilayer(Rect::new(0.0, 1.0, 0.0, 1.0), Rect::new(0.0, 1.0, 1.0, 2.0), 1, 1, 1).unwrap();
        assert_eq!(d.num_triangles(), 2);
        assert_eq!(e.num_triangles(), 2);
        assert_eq!(map.num_pairs(), 1);
    }

    #[test]
    fn areas_partition() {
        let (d, e, _) = stacked(4, 4, 4);
        assert!((d.total_area() - 1.0).abs() < 1e-12);
        assert!((e.total_area() - 0.4).abs() < 1e-12);
    }

    #[test]
    fn interface_edge_and_vertex_counts() {
        let (d, e, map) = stacked(8, 3, 2);
        assert_eq!(map.num_pairs(), 8);
        assert_eq!(map.num_nodes(), 9);
        for node in map.nodes() {
            assert_eq!(d.vertices()[node.d_vertex], e.vertices()[node.e_vertex]);
        }
    }

    #[test]
    fn tags_are_geometric() {
        let (d, e, _) = stacked(3, 2, 2);
        assert_eq!(d.edges_with_tag(BoundaryTag::Gamma).count(), 0);
        assert_eq!(e.edges_with_tag(BoundaryTag::Gamma).count(), 3);
        for (_, be) in e.edges_with_tag(BoundaryTag::Gamma) {
            assert!(be.vertices.iter().all(|&v| (e.vertices()[v][1] - 1.4).abs() < 1e-12));
        }
        assert_eq!(d.edges_with_tag(BoundaryTag::Clamped).count(), 3 + 2 * 2);
    }

    #[test]
    fn normals_point_from_d_to_e() {
        let (d, _, map) = stacked(5, 2, 2);
        for n in interface_normals(&map, &d).unwrap() {
            assert!((n[0]).abs() < 1e-14 && (n[1] - 1.0).abs() < 1e-14);
        }
        let (d, _, map) =
            build_bilayer(Rect::new(0.0, 1.0, 0.0, 1.0), Rect::new(0.0, 1.0, -0.5, 0.0), 4, 2, 2).unwrap();
        for n in interface_normals(&map, &d).unwrap() {
            assert!((n[0]).abs() < 1e-14 && (n[1] + 1.0).abs() < 1e-14);
            assert!((n[0].hypot(n[1]) - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn refinement_quadruples_triangles() {
        let (d1, e1, _) = stacked(3, 3, 2);
        let (d2, e2, _) = stacked(6, 6, 4);
        assert_eq!(d2.num_triangles(), 4 * d1.num_triangles());
        assert_eq!(e2.num_triangles(), 4 * e1.num_triangles());
    }

    #[test]
    fn argument_and_geometry_errors() {
        let r = Rect::new(0.0, 1.0, 0.0, 1.0);
        assert!(matches!(build_bilayer(r, Rect::new(0.0, 1.0, 1.0, 2.0), 0, 1, 1), Err(Error::Argument(_))));
        assert!(matches!(build_bilayer(r, Rect::new(0.0, 1.0, 1.5, 2.0), 2, 1, 1), Err(Error::Geometry(_))));
        assert!(matches!(build_bilayer(r, Rect::new(0.0, 0.5, 1.0, 2.0), 2, 1, 1), Err(Error::Geometry(_))));
    }

    #[test]
    fn mismatched_interface_rejected() {
        let (d, _, _) = stacked(4, 2, 2);
        let (_, e, _) = stacked(3, 2, 2);
        assert!(matches!(InterfaceMap::match_meshes(&d, &e), Err(Error::Geometry(_))));
    }

    #[test]
    fn import_roundtrip_preserves_structure() {
        let (d, e, map) = stacked(4, 3, 2);
        let text = export_bilayer(&d, &e, &map);
        let (d2, e2, map2) = import_bilayer(&text).unwrap();
        assert_eq!(d2.num_triangles(), d.num_triangles());
        assert_eq!(e2.num_triangles(), e.num_triangles());
        assert_eq!(map2.num_pairs(), map.num_pairs());
        assert!((d2.total_area() - 1.0).abs() < 1e-12);
        assert_eq!(e2.edges_with_tag(BoundaryTag::Gamma).count(), 4);
    }

    #[test]
    fn import_reports_line_numbers() {
        let text = "VERTICES\n0 0\n1 0\n0 1\nTRIANGLES\n0 1 9 D\n";
        match import_bilayer(text) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 6),
            other => panic!("unexpected {other:?}"),
        }
        let text = "VERTICES\n0 0\n1 zero\n";
        assert!(matches!(import_bilayer(text), Err(Error::Parse { line: 3, .. })));
    }

    #[test]
    fn import_reorients_clockwise_triangles() {
        let text = "VERTICES\n0 0\n1 0\n1 1\n0 1\n0 2\n1 2\nTRIANGLES\n0 2 1 D\n0 3 2 D\n3 5 2 E\n3 4 5 E\n\
                    BOUNDARY\n0 1 Clamped\n1 2 Clamped\n3 0 Clamped\n2 5 Clamped\n4 3 Clamped\n5 4 Gamma\n";
        let (d, e, map) = import_bilayer(text).unwrap();
        assert!((0..d.num_triangles()).all(|t| d.signed_area(t) > 0.0));
        assert!((e.total_area() - 1.0).abs() < 1e-14);
        assert_eq!(map.num_pairs(), 1);
    }
}
