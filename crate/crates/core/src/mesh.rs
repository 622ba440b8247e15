//! Tetrahedral meshes of the unit box partitioned into axis-aligned blocks,
//! with a marked accessible boundary patch `Σ`.

use std::collections::{HashMap, VecDeque};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::material::PriorData;

pub type Point = [f64; 3];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BoundaryMarker {
    Sigma,
    Other,
}

impl BoundaryMarker {
    fn code(self) -> u8 {
        match self {
            BoundaryMarker::Sigma => 1,
            BoundaryMarker::Other => 0,
        }
    }
}

/// Four vertex indices and a 1-based subdomain id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tet {
    pub v: [usize; 4],
    pub region: usize,
}

/// Outward-oriented boundary triangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundaryFace {
    pub v: [usize; 3],
    pub marker: BoundaryMarker,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionedMesh {
    pub vertices: Vec<Point>,
    pub tets: Vec<Tet>,
    pub boundary_faces: Vec<BoundaryFace>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BoxFace {
    XMin,
    XMax,
    YMin,
    YMax,
    ZMin,
    ZMax,
}

impl BoxFace {
    fn axis(self) -> usize {
        match self {
            BoxFace::XMin | BoxFace::XMax => 0,
            BoxFace::YMin | BoxFace::YMax => 1,
            BoxFace::ZMin | BoxFace::ZMax => 2,
        }
    }

    fn level(self) -> f64 {
        match self {
            BoxFace::XMin | BoxFace::YMin | BoxFace::ZMin => 0.0,
            _ => 1.0,
        }
    }

    /// The two in-plane axes, in increasing order.
    fn plane_axes(self) -> (usize, usize) {
        match self.axis() {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s.to_ascii_lowercase().as_str() {
            "xmin" | "left" => BoxFace::XMin,
            "xmax" | "right" => BoxFace::XMax,
            "ymin" | "front" => BoxFace::YMin,
            "ymax" | "back" => BoxFace::YMax,
            "zmin" | "bottom" => BoxFace::ZMin,
            "zmax" | "top" => BoxFace::ZMax,
            _ => return None,
        })
    }
}

/// Which boundary triangles form `Σ`: a face of the unit box, optionally cut
/// down to an in-plane rectangle `[u0, u1] x [v0, v1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SigmaSelector {
    pub face: BoxFace,
    pub window: Option<[f64; 4]>,
}

impl SigmaSelector {
    pub fn face(face: BoxFace) -> Self {
        Self { face, window: None }
    }

    fn selects(&self, pts: [&Point; 3]) -> bool {
        let ax = self.face.axis();
        let lvl = self.face.level();
        if pts.iter().any(|p| p[ax] != lvl) {
            return false;
        }
        match self.window {
            None => true,
            Some([u0, v0, u1, v1]) => {
                let (a, b) = self.face.plane_axes();
                let cu = (pts[0][a] + pts[1][a] + pts[2][a]) / 3.0;
                let cv = (pts[0][b] + pts[1][b] + pts[2][b]) / 3.0;
                u0 <= cu && cu <= u1 && v0 <= cv && cv <= v1
            }
        }
    }
}

/// Axis-aligned block of the unit box carrying subdomain `id` (1-based).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub min: Point,
    pub max: Point,
    pub id: usize,
}

impl Block {
    pub fn new(min: Point, max: Point, id: usize) -> Self {
        Self { min, max, id }
    }

    pub fn unit(id: usize) -> Self {
        Self::new([0.0; 3], [1.0; 3], id)
    }

    fn contains(&self, p: &Point) -> bool {
        (0..3).all(|a| self.min[a] < p[a] && p[a] < self.max[a])
    }
}

/// Two blocks split by the plane `z = level`; the upper one (touching the top
/// face) is subdomain 1.
pub fn two_layer_blocks(level: f64) -> Vec<Block> {
    vec![
        Block::new([0.0, 0.0, level], [1.0, 1.0, 1.0], 1),
        Block::new([0.0, 0.0, 0.0], [1.0, 1.0, level], 2),
    ]
}

/// The eight octants of the unit box, ids 1..=8 in lexicographic (x fastest)
/// order starting from the octant touching the top face at the origin corner.
pub fn checkerboard_blocks() -> Vec<Block> {
    let mut blocks = Vec::new();
    let mut id = 1;
    for kz in [1usize, 0] {
        for ky in 0..2 {
            for kx in 0..2 {
                let min = [kx as f64 * 0.5, ky as f64 * 0.5, kz as f64 * 0.5];
                let max = [min[0] + 0.5, min[1] + 0.5, min[2] + 0.5];
                blocks.push(Block::new(min, max, id));
                id += 1;
            }
        }
    }
    blocks
}

// Kuhn split: one tet per permutation of the axes, walking 000 -> 111.
const KUHN_PERMUTATIONS: [[usize; 3]; 6] = [
    [0, 1, 2],
    [0, 2, 1],
    [1, 0, 2],
    [1, 2, 0],
    [2, 0, 1],
    [2, 1, 0],
];

pub fn build_block_mesh(nx: usize, ny: usize, nz: usize, blocks: &[Block], sigma: SigmaSelector) -> Result<PartitionedMesh> {
    if nx == 0 || ny == 0 || nz == 0 {
        return Err(Error::Geometry("grid resolution must be positive".into()));
    }
    if blocks.is_empty() {
        return Err(Error::Geometry("no blocks given".into()));
    }
    let dims = [nx, ny, nz];
    for (bi, b) in blocks.iter().enumerate() {
        if b.id == 0 {
            return Err(Error::Geometry(format!("block {bi} has id 0 (ids are 1-based)")));
        }
        for a in 0..3 {
            if !(b.min[a] >= 0.0 && b.max[a] <= 1.0 && b.min[a] < b.max[a]) {
                return Err(Error::Geometry(format!("block {bi} is not a proper sub-box of the unit box")));
            }
            for x in [b.min[a], b.max[a]] {
                let s = x * dims[a] as f64;
                if (s - s.round()).abs() > 1e-9 {
                    return Err(Error::Geometry(format!(
                        "block {bi} boundary {x} not aligned with the {}-point grid on axis {a}",
                        dims[a] + 1
                    )));
                }
            }
        }
    }

    let vid = |i: usize, j: usize, k: usize| i + (nx + 1) * (j + (ny + 1) * k);
    let mut vertices = Vec::with_capacity((nx + 1) * (ny + 1) * (nz + 1));
    for k in 0..=nz {
        for j in 0..=ny {
            for i in 0..=nx {
                vertices.push([i as f64 / nx as f64, j as f64 / ny as f64, k as f64 / nz as f64]);
            }
        }
    }

    let mut tets = Vec::with_capacity(6 * nx * ny * nz);
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let center = [
                    (i as f64 + 0.5) / nx as f64,
                    (j as f64 + 0.5) / ny as f64,
                    (k as f64 + 0.5) / nz as f64,
                ];
                let mut owners = blocks.iter().filter(|b| b.contains(&center));
                let region = match (owners.next(), owners.next()) {
                    (Some(b), None) => b.id,
                    (None, _) => {
                        return Err(Error::Geometry(format!("blocks leave a gap at cell ({i},{j},{k})")))
                    }
                    (Some(_), Some(_)) => {
                        return Err(Error::Geometry(format!("blocks overlap at cell ({i},{j},{k})")))
                    }
                };
                for perm in KUHN_PERMUTATIONS {
                    let mut corner = [i, j, k];
                    let mut v = [vid(i, j, k), 0, 0, 0];
                    for (step, &axis) in perm.iter().enumerate() {
                        corner[axis] += 1;
                        v[step + 1] = vid(corner[0], corner[1], corner[2]);
                    }
                    if signed_volume(&vertices, &v) < 0.0 {
                        v.swap(2, 3);
                    }
                    tets.push(Tet { v, region });
                }
            }
        }
    }

    let mut mesh = PartitionedMesh { vertices, tets, boundary_faces: Vec::new() };
    mesh.boundary_faces = mesh
        .exterior_faces()
        .into_iter()
        .map(|(_, v)| {
            let pts = [&mesh.vertices[v[0]], &mesh.vertices[v[1]], &mesh.vertices[v[2]]];
            let marker = if sigma.selects(pts) { BoundaryMarker::Sigma } else { BoundaryMarker::Other };
            BoundaryFace { v, marker }
        })
        .collect();
    if !mesh.boundary_faces.iter().any(|f| f.marker == BoundaryMarker::Sigma) {
        return Err(Error::Geometry("SIGMA selector matches no boundary face".into()));
    }
    Ok(mesh)
}

pub fn signed_volume(vertices: &[Point], v: &[usize; 4]) -> f64 {
    let p0 = vertices[v[0]];
    let d = |a: usize| {
        let p = vertices[v[a]];
        [p[0] - p0[0], p[1] - p0[1], p[2] - p0[2]]
    };
    let (a, b, c) = (d(1), d(2), d(3));
    (a[0] * (b[1] * c[2] - b[2] * c[1]) - a[1] * (b[0] * c[2] - b[2] * c[0]) + a[2] * (b[0] * c[1] - b[1] * c[0])) / 6.0
}

fn sub(a: &Point, b: &Point) -> Point {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: &Point, b: &Point) -> Point {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn dot(a: &Point, b: &Point) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn norm(a: &Point) -> f64 {
    dot(a, a).sqrt()
}

// Local faces of a tet, each paired with the opposite vertex.
const TET_FACES: [([usize; 3], usize); 4] = [([1, 2, 3], 0), ([0, 3, 2], 1), ([0, 1, 3], 2), ([0, 2, 1], 3)];

fn face_key(v: [usize; 3]) -> [usize; 3] {
    let mut k = v;
    k.sort_unstable();
    k
}

impl PartitionedMesh {
    /// Largest subdomain id referenced by any tet.
    pub fn n_regions(&self) -> usize {
        self.tets.iter().map(|t| t.region).max().unwrap_or(0)
    }

    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn tet_volume(&self, t: usize) -> f64 {
        signed_volume(&self.vertices, &self.tets[t].v)
    }

    pub fn tet_centroid(&self, t: usize) -> Point {
        let mut c = [0.0; 3];
        for &v in &self.tets[t].v {
            for a in 0..3 {
                c[a] += 0.25 * self.vertices[v][a];
            }
        }
        c
    }

    /// Faces incident to exactly one tet, outward oriented, in tet order.
    /// Returned with the owning tet index.
    pub fn exterior_faces(&self) -> Vec<(usize, [usize; 3])> {
        let mut count: HashMap<[usize; 3], u32> = HashMap::with_capacity(4 * self.tets.len());
        for t in &self.tets {
            for (f, _) in TET_FACES {
                *count.entry(face_key([t.v[f[0]], t.v[f[1]], t.v[f[2]]])).or_insert(0) += 1;
            }
        }
        let mut out = Vec::new();
        for (ti, t) in self.tets.iter().enumerate() {
            for (f, opp) in TET_FACES {
                let tri = [t.v[f[0]], t.v[f[1]], t.v[f[2]]];
                if count[&face_key(tri)] == 1 {
                    out.push((ti, self.orient_outward(tri, t.v[opp])));
                }
            }
        }
        out
    }

    fn orient_outward(&self, tri: [usize; 3], opposite: usize) -> [usize; 3] {
        let [a, b, c] = tri.map(|i| self.vertices[i]);
        let n = cross(&sub(&b, &a), &sub(&c, &a));
        if dot(&n, &sub(&self.vertices[opposite], &a)) > 0.0 {
            [tri[0], tri[2], tri[1]]
        } else {
            tri
        }
    }

    /// `n A` for an oriented triangle (area-weighted normal).
    pub fn face_vector_area(&self, v: &[usize; 3]) -> Point {
        let [a, b, c] = v.map(|i| self.vertices[i]);
        let n = cross(&sub(&b, &a), &sub(&c, &a));
        [0.5 * n[0], 0.5 * n[1], 0.5 * n[2]]
    }

    pub fn sigma_faces(&self) -> impl Iterator<Item = &BoundaryFace> {
        self.boundary_faces.iter().filter(|f| f.marker == BoundaryMarker::Sigma)
    }

    pub fn is_boundary_vertex(&self) -> Vec<bool> {
        let mut on = vec![false; self.vertices.len()];
        for f in &self.boundary_faces {
            for &v in &f.v {
                on[v] = true;
            }
        }
        on
    }

    /// Vertices whose every incident boundary face lies in `Σ`: the nodes
    /// whose hat functions restrict to functions supported in `Σ`.
    pub fn sigma_interior_vertices(&self) -> Vec<usize> {
        let mut sigma = vec![false; self.vertices.len()];
        let mut other = vec![false; self.vertices.len()];
        for f in &self.boundary_faces {
            let flag = match f.marker {
                BoundaryMarker::Sigma => &mut sigma,
                BoundaryMarker::Other => &mut other,
            };
            for &v in &f.v {
                flag[v] = true;
            }
        }
        (0..self.vertices.len()).filter(|&v| sigma[v] && !other[v]).collect()
    }

    pub fn longest_edge(&self) -> f64 {
        let mut h: f64 = 0.0;
        for t in &self.tets {
            for a in 0..4 {
                for b in a + 1..4 {
                    h = h.max(norm(&sub(&self.vertices[t.v[a]], &self.vertices[t.v[b]])));
                }
            }
        }
        h
    }

    /// Stable identity of the mesh contents.
    pub fn content_hash(&self) -> String {
        hex(&Sha256::digest(self.to_emesh_string().as_bytes()))
    }

    /// Copy with subdomain ids renamed by `map[old - 1] = new`.
    pub fn relabeled(&self, map: &[usize]) -> PartitionedMesh {
        let mut m = self.clone();
        for t in &mut m.tets {
            t.region = map[t.region - 1];
        }
        m
    }

    pub fn to_emesh_string(&self) -> String {
        let mut s = String::with_capacity(64 * (self.vertices.len() + self.tets.len()));
        s.push_str("emesh 1\n");
        let _ = writeln!(s, "{} {} {}", self.vertices.len(), self.tets.len(), self.boundary_faces.len());
        // `{:?}` on f64 is the shortest representation that round-trips
        for p in &self.vertices {
            let _ = writeln!(s, "{:?} {:?} {:?}", p[0], p[1], p[2]);
        }
        for t in &self.tets {
            let _ = writeln!(s, "{} {} {} {} {}", t.v[0], t.v[1], t.v[2], t.v[3], t.region);
        }
        for f in &self.boundary_faces {
            let _ = writeln!(s, "{} {} {} {}", f.v[0], f.v[1], f.v[2], f.marker.code());
        }
        s
    }

    pub fn parse_emesh(text: &str) -> Result<PartitionedMesh> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
        let perr = |line: usize, msg: String| Error::Parse { line, msg };
        let mut next = |what: &str| -> Result<(usize, &str)> {
            lines.next().ok_or_else(|| perr(0, format!("unexpected end of file while reading {what}")))
        };
        let (ln, header) = next("header")?;
        if header != "emesh 1" {
            return Err(perr(ln, format!("expected header `emesh 1`, found `{header}`")));
        }
        let (ln, counts) = next("counts")?;
        let counts: Vec<usize> = parse_fields(counts, ln, 3)?;
        let (nv, nt, nf) = (counts[0], counts[1], counts[2]);

        let mut vertices = Vec::with_capacity(nv);
        for _ in 0..nv {
            let (ln, l) = next("vertices")?;
            let p: Vec<f64> = parse_fields(l, ln, 3)?;
            if p.iter().any(|x| !x.is_finite()) {
                return Err(perr(ln, "non-finite coordinate".into()));
            }
            vertices.push([p[0], p[1], p[2]]);
        }
        let mut tets = Vec::with_capacity(nt);
        for _ in 0..nt {
            let (ln, l) = next("tets")?;
            let f: Vec<usize> = parse_fields(l, ln, 5)?;
            if let Some(&bad) = f[..4].iter().find(|&&v| v >= nv) {
                return Err(perr(ln, format!("tet references vertex {bad} but only {nv} vertices exist")));
            }
            if f[4] == 0 {
                return Err(perr(ln, "region ids are 1-based".into()));
            }
            tets.push(Tet { v: [f[0], f[1], f[2], f[3]], region: f[4] });
        }
        let mut boundary_faces = Vec::with_capacity(nf);
        for _ in 0..nf {
            let (ln, l) = next("boundary faces")?;
            let f: Vec<usize> = parse_fields(l, ln, 4)?;
            if let Some(&bad) = f[..3].iter().find(|&&v| v >= nv) {
                return Err(perr(ln, format!("face references vertex {bad} but only {nv} vertices exist")));
            }
            let marker = match f[3] {
                1 => BoundaryMarker::Sigma,
                0 => BoundaryMarker::Other,
                m => return Err(perr(ln, format!("unknown boundary marker {m}"))),
            };
            boundary_faces.push(BoundaryFace { v: [f[0], f[1], f[2]], marker });
        }
        for (ln, l) in lines {
            if !l.is_empty() {
                return Err(perr(ln, "trailing content after declared entities".into()));
            }
        }

        let mesh = PartitionedMesh { vertices, tets, boundary_faces };
        let bad: Vec<String> = (0..mesh.tets.len())
            .filter(|&t| mesh.tet_volume(t) <= 0.0)
            .map(|t| format!("tet {t} has nonpositive signed volume {:.3e}", mesh.tet_volume(t)))
            .collect();
        if !bad.is_empty() {
            return Err(Error::Validation(bad));
        }
        Ok(mesh)
    }
}

fn parse_fields<T: std::str::FromStr>(line: &str, ln: usize, n: usize) -> Result<Vec<T>> {
    let parts: Vec<&str> = line.split_whitespace().collect();
    if parts.len() != n {
        return Err(Error::Parse { line: ln, msg: format!("expected {n} fields, found {}", parts.len()) });
    }
    parts
        .iter()
        .map(|p| p.parse::<T>().map_err(|_| Error::Parse { line: ln, msg: format!("cannot parse `{p}`") }))
        .collect()
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::with_capacity(2 * bytes.len()), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

pub fn save_mesh(m: &PartitionedMesh, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, m.to_emesh_string())?;
    Ok(())
}

pub fn load_mesh(path: impl AsRef<Path>) -> Result<PartitionedMesh> {
    PartitionedMesh::parse_emesh(&std::fs::read_to_string(path)?)
}

/// A connected coplanar set of faces shared by two subdomains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterfacePatch {
    pub regions: (usize, usize),
    pub normal: Point,
    pub faces: usize,
    pub area: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeshQuality {
    pub h_max: f64,
    pub shape_min: f64,
    pub volumes: Vec<f64>,
    pub total_volume: f64,
    /// Subdomain whose boundary carries `Σ` (1-based).
    pub sigma_region: usize,
    /// Length of the shortest chain of flat-interface neighbours from the
    /// `Σ` subdomain, indexed by subdomain (the `Σ` subdomain itself is 1).
    pub chain_lengths: Vec<usize>,
    pub flat_patches: Vec<InterfacePatch>,
}

fn inradius_circumradius_ratio(m: &PartitionedMesh, t: usize) -> f64 {
    let v = m.tets[t].v.map(|i| m.vertices[i]);
    let vol = signed_volume(&m.vertices, &m.tets[t].v).abs();
    let area: f64 = TET_FACES
        .iter()
        .map(|(f, _)| 0.5 * norm(&cross(&sub(&v[f[1]], &v[f[0]]), &sub(&v[f[2]], &v[f[0]]))))
        .sum();
    let r_in = 3.0 * vol / area;
    // circumcenter: solve 2 (p_i - p_0) . c = |p_i|^2 - |p_0|^2
    let a = [sub(&v[1], &v[0]), sub(&v[2], &v[0]), sub(&v[3], &v[0])];
    let rhs = [dot(&a[0], &a[0]) / 2.0, dot(&a[1], &a[1]) / 2.0, dot(&a[2], &a[2]) / 2.0];
    let det = dot(&a[0], &cross(&a[1], &a[2]));
    let c0 = cross(&a[1], &a[2]);
    let c1 = cross(&a[2], &a[0]);
    let c2 = cross(&a[0], &a[1]);
    let c = [
        (rhs[0] * c0[0] + rhs[1] * c1[0] + rhs[2] * c2[0]) / det,
        (rhs[0] * c0[1] + rhs[1] * c1[1] + rhs[2] * c2[1]) / det,
        (rhs[0] * c0[2] + rhs[1] * c1[2] + rhs[2] * c2[2]) / det,
    ];
    r_in / norm(&c)
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn new(n: usize) -> Self {
        Self((0..n).collect())
    }
    fn find(&mut self, x: usize) -> usize {
        let mut r = x;
        while self.0[r] != r {
            r = self.0[r];
        }
        let mut y = x;
        while self.0[y] != r {
            let nxt = self.0[y];
            self.0[y] = r;
            y = nxt;
        }
        r
    }
    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.0[ra.max(rb)] = ra.min(rb);
        }
    }
}

fn count_components(items: usize, edges: impl Iterator<Item = (usize, usize)>) -> usize {
    let mut uf = UnionFind::new(items);
    for (a, b) in edges {
        uf.union(a, b);
    }
    (0..items).filter(|&i| uf.find(i) == i).count()
}

/// Edge-adjacency between triangles of a face list.
fn triangle_edges(faces: &[[usize; 3]]) -> Vec<(usize, usize)> {
    let mut by_edge: HashMap<(usize, usize), Vec<usize>> = HashMap::new();
    for (i, f) in faces.iter().enumerate() {
        for e in 0..3 {
            let (a, b) = (f[e], f[(e + 1) % 3]);
            by_edge.entry((a.min(b), a.max(b))).or_default().push(i);
        }
    }
    let mut out = Vec::new();
    for list in by_edge.values() {
        for w in list.windows(2) {
            out.push((w[0], w[1]));
        }
    }
    out.sort_unstable();
    out
}

/// Check every structural requirement on a partitioned mesh; violations are
/// returned as data.
pub fn validate_partition(m: &PartitionedMesh, prior: &PriorData) -> std::result::Result<MeshQuality, Vec<String>> {
    let mut violations = Vec::new();
    let n = prior.n_sub;

    for (t, tet) in m.tets.iter().enumerate() {
        if m.tet_volume(t) <= 0.0 {
            violations.push(format!("tet {t} has nonpositive volume"));
        }
        if tet.region == 0 || tet.region > n {
            violations.push(format!("tet {t} has subdomain id {} outside 1..={n}", tet.region));
        }
    }
    let mut volumes = vec![0.0; n];
    for (t, tet) in m.tets.iter().enumerate() {
        if (1..=n).contains(&tet.region) {
            volumes[tet.region - 1] += m.tet_volume(t);
        }
    }
    let mut counts = vec![0usize; n];
    for tet in &m.tets {
        if (1..=n).contains(&tet.region) {
            counts[tet.region - 1] += 1;
        }
    }
    for (j, &c) in counts.iter().enumerate() {
        if c == 0 {
            violations.push(format!("empty subdomain {}", j + 1));
        }
    }

    // face -> incident tets
    let mut incident: HashMap<[usize; 3], Vec<usize>> = HashMap::with_capacity(4 * m.tets.len());
    for (ti, t) in m.tets.iter().enumerate() {
        for (f, _) in TET_FACES {
            incident.entry(face_key([t.v[f[0]], t.v[f[1]], t.v[f[2]]])).or_default().push(ti);
        }
    }
    let mut sorted_faces: Vec<(&[usize; 3], &Vec<usize>)> = incident.iter().collect();
    sorted_faces.sort_unstable_by_key(|(k, _)| **k);

    // subdomain face-connectivity
    let mut uf = UnionFind::new(m.tets.len());
    for (_, tets) in &sorted_faces {
        if tets.len() > 2 {
            violations.push(format!("face shared by {} tets", tets.len()));
        }
        if tets.len() == 2 && m.tets[tets[0]].region == m.tets[tets[1]].region {
            uf.union(tets[0], tets[1]);
        }
    }
    for j in 1..=n {
        let roots: std::collections::BTreeSet<usize> =
            (0..m.tets.len()).filter(|&t| m.tets[t].region == j).map(|t| uf.find(t)).collect();
        if roots.len() > 1 {
            violations.push(format!("subdomain {j} is not face-connected ({} pieces)", roots.len()));
        }
    }

    // boundary faces: each listed face is exterior, and the list covers the exterior
    let n_exterior = sorted_faces.iter().filter(|(_, t)| t.len() == 1).count();
    let mut listed = std::collections::HashSet::new();
    for (i, f) in m.boundary_faces.iter().enumerate() {
        let key = face_key(f.v);
        match incident.get(&key) {
            Some(t) if t.len() == 1 => {}
            Some(t) => violations.push(format!("boundary face {i} belongs to {} tets", t.len())),
            None => violations.push(format!("boundary face {i} is not a face of any tet")),
        }
        if !listed.insert(key) {
            violations.push(format!("boundary face {i} listed twice"));
        }
    }
    if listed.len() != n_exterior {
        violations.push(format!("{} exterior faces but {} boundary faces listed", n_exterior, listed.len()));
    }

    // Σ: nonempty, connected, inside a single subdomain
    let sigma: Vec<[usize; 3]> = m.sigma_faces().map(|f| f.v).collect();
    let mut sigma_region = 0;
    if sigma.is_empty() {
        violations.push("SIGMA patch is empty".into());
    } else {
        if count_components(sigma.len(), triangle_edges(&sigma).into_iter()) != 1 {
            violations.push("SIGMA patch is not connected".into());
        }
        let mut regions: Vec<usize> = sigma
            .iter()
            .filter_map(|f| incident.get(&face_key(*f)).and_then(|t| t.first()).map(|&t| m.tets[t].region))
            .collect();
        regions.sort_unstable();
        regions.dedup();
        match regions.as_slice() {
            [r] => sigma_region = *r,
            _ => violations.push(format!("SIGMA touches {} subdomains, expected exactly one", regions.len())),
        }
    }

    // flat interface patches between distinct subdomains
    let mut interface: HashMap<(usize, usize), Vec<[usize; 3]>> = HashMap::new();
    for (key, tets) in &sorted_faces {
        if tets.len() == 2 {
            let (a, b) = (m.tets[tets[0]].region, m.tets[tets[1]].region);
            if a != b {
                interface.entry((a.min(b), a.max(b))).or_default().push(**key);
            }
        }
    }
    let mut pairs: Vec<(usize, usize)> = interface.keys().copied().collect();
    pairs.sort_unstable();
    let mut flat_patches = Vec::new();
    let mut adjacency = vec![Vec::new(); n + 1];
    for pair in pairs {
        let faces = &interface[&pair];
        // group by supporting plane (unit normal up to sign, offset)
        let mut planes: Vec<(Point, f64, Vec<[usize; 3]>)> = Vec::new();
        for f in faces {
            let va = m.face_vector_area(f);
            let mut nrm = va.map(|x| x / norm(&va));
            let lead = nrm.iter().copied().find(|x| x.abs() > 1e-9).unwrap_or(1.0);
            if lead < 0.0 {
                nrm = nrm.map(|x| -x);
            }
            let off = dot(&nrm, &m.vertices[f[0]]);
            match planes
                .iter_mut()
                .find(|(pn, po, _)| norm(&sub(pn, &nrm)) < 1e-9 && (po - off).abs() < 1e-9)
            {
                Some(p) => p.2.push(*f),
                None => planes.push((nrm, off, vec![*f])),
            }
        }
        let mut has_flat = false;
        for (nrm, _, group) in planes {
            let edges = triangle_edges(&group);
            let mut uf = UnionFind::new(group.len());
            for (a, b) in edges {
                uf.union(a, b);
            }
            let mut comp: HashMap<usize, (usize, f64)> = HashMap::new();
            for (i, f) in group.iter().enumerate() {
                let e = comp.entry(uf.find(i)).or_insert((0, 0.0));
                e.0 += 1;
                e.1 += norm(&m.face_vector_area(f));
            }
            let mut comps: Vec<(usize, f64)> = comp.into_values().collect();
            comps.sort_by(|a, b| b.0.cmp(&a.0).then(b.1.total_cmp(&a.1)));
            if let Some(&(faces, area)) = comps.first() {
                if faces >= 2 {
                    has_flat = true;
                    flat_patches.push(InterfacePatch { regions: pair, normal: nrm, faces, area });
                }
            }
        }
        if has_flat && pair.1 <= n {
            adjacency[pair.0].push(pair.1);
            adjacency[pair.1].push(pair.0);
        } else if !has_flat {
            violations.push(format!("interface between subdomains {} and {} has no flat patch", pair.0, pair.1));
        }
    }

    let mut chain_lengths = vec![0usize; n];
    if (1..=n).contains(&sigma_region) {
        let mut queue = VecDeque::from([sigma_region]);
        chain_lengths[sigma_region - 1] = 1;
        while let Some(r) = queue.pop_front() {
            for &s in &adjacency[r] {
                if chain_lengths[s - 1] == 0 {
                    chain_lengths[s - 1] = chain_lengths[r - 1] + 1;
                    queue.push_back(s);
                }
            }
        }
        for (j, &c) in chain_lengths.iter().enumerate() {
            if c == 0 && counts[j] > 0 {
                violations.push(format!(
                    "subdomain {} is not reachable from the SIGMA subdomain {} through flat interfaces",
                    j + 1,
                    sigma_region
                ));
            }
        }
    }

    if !violations.is_empty() {
        return Err(violations);
    }
    let shape_min = (0..m.tets.len()).map(|t| inradius_circumradius_ratio(m, t)).fold(f64::INFINITY, f64::min);
    Ok(MeshQuality {
        h_max: m.longest_edge(),
        shape_min,
        total_volume: volumes.iter().sum(),
        volumes,
        sigma_region,
        chain_lengths,
        flat_patches,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn prior(n: usize) -> PriorData {
        PriorData::new(0.5, 1.0, 0.5, 1.0, 1.0, n).unwrap()
    }

    fn top() -> SigmaSelector {
        SigmaSelector::face(BoxFace::ZMax)
    }

    #[test]
    fn single_block_counts() {
        let m = build_block_mesh(2, 2, 2, &[Block::unit(1)], top()).unwrap();
        assert_eq!(m.tets.len(), 48);
        assert_eq!(m.vertices.len(), 27);
        assert_eq!(m.sigma_faces().count(), 8);
        // 6 box faces x 4 cells x 2 triangles
        assert_eq!(m.boundary_faces.len(), 48);
        assert_eq!(m.sigma_interior_vertices().len(), 1);
    }

    #[test]
    fn two_layers_assign_by_centroid() {
        let m = build_block_mesh(4, 4, 4, &two_layer_blocks(0.5), top()).unwrap();
        for t in 0..m.tets.len() {
            let z = m.tet_centroid(t)[2];
            assert_eq!(m.tets[t].region, if z > 0.5 { 1 } else { 2 });
        }
    }

    #[test]
    fn total_volume_is_one() {
        for n in [1, 3, 5, 8] {
            let m = build_block_mesh(n, n + 1, n + 2, &[Block::unit(1)], top()).unwrap();
            let vol: f64 = (0..m.tets.len()).map(|t| m.tet_volume(t)).sum();
            assert!((vol - 1.0).abs() < 1e-12, "n = {n}: {vol}");
            assert!((0..m.tets.len()).all(|t| m.tet_volume(t) > 0.0));
        }
    }

    #[test]
    fn boundary_closed_surface() {
        let m = build_block_mesh(3, 4, 5, &two_layer_blocks(0.6), top()).unwrap();
        let mut s = [0.0; 3];
        for f in &m.boundary_faces {
            let a = m.face_vector_area(&f.v);
            for k in 0..3 {
                s[k] += a[k];
            }
        }
        assert!(norm(&s) < 1e-12);
        // outward orientation: the top face normals point up
        for f in m.sigma_faces() {
            assert!(m.face_vector_area(&f.v)[2] > 0.0);
        }
    }

    #[test]
    fn block_errors() {
        let gap = [Block::new([0.0, 0.0, 0.5], [1.0, 1.0, 1.0], 1)];
        assert!(matches!(build_block_mesh(2, 2, 2, &gap, top()), Err(Error::Geometry(_))));
        let overlap = [Block::unit(1), Block::new([0.0, 0.0, 0.5], [1.0, 1.0, 1.0], 2)];
        assert!(matches!(build_block_mesh(2, 2, 2, &overlap, top()), Err(Error::Geometry(_))));
        let misaligned = two_layer_blocks(0.3);
        assert!(matches!(build_block_mesh(2, 2, 2, &misaligned, top()), Err(Error::Geometry(_))));
        let empty_sigma = SigmaSelector { face: BoxFace::ZMax, window: Some([2.0, 2.0, 3.0, 3.0]) };
        assert!(matches!(build_block_mesh(2, 2, 2, &[Block::unit(1)], empty_sigma), Err(Error::Geometry(_))));
    }

    #[test]
    fn sigma_window_restricts_patch() {
        let sel = SigmaSelector { face: BoxFace::ZMax, window: Some([0.25, 0.25, 0.75, 0.75]) };
        let m = build_block_mesh(4, 4, 4, &[Block::unit(1)], sel).unwrap();
        assert_eq!(m.sigma_faces().count(), 8);
        assert_eq!(m.sigma_interior_vertices().len(), 1);
        validate_partition(&m, &prior(1)).unwrap();
    }

    #[test]
    fn two_block_partition_valid() {
        let m = build_block_mesh(4, 4, 4, &two_layer_blocks(0.5), top()).unwrap();
        let q = validate_partition(&m, &prior(2)).unwrap();
        assert_eq!(q.sigma_region, 1);
        assert_eq!(q.chain_lengths, vec![1, 2]);
        assert!((q.total_volume - 1.0).abs() < 1e-12);
        assert!((q.volumes[0] - 0.5).abs() < 1e-12);
        assert!(q.h_max > 0.0 && q.shape_min > 0.0);
        assert_eq!(q.flat_patches.len(), 1);
        assert!((q.flat_patches[0].area - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_subdomain_reported() {
        let m = build_block_mesh(2, 2, 2, &[Block::unit(1)], top()).unwrap();
        let v = validate_partition(&m, &prior(2)).unwrap_err();
        assert!(v.iter().any(|s| s.contains("empty subdomain 2")), "{v:?}");
    }

    #[test]
    fn checkerboard_interfaces_are_flat() {
        let m = build_block_mesh(4, 4, 4, &checkerboard_blocks(), SigmaSelector {
            face: BoxFace::ZMax,
            window: Some([0.0, 0.0, 0.5, 0.5]),
        })
        .unwrap();
        let q = validate_partition(&m, &prior(8)).unwrap();
        // 12 face-adjacent octant pairs, each with one planar patch
        assert_eq!(q.flat_patches.len(), 12);
        for p in &q.flat_patches {
            assert!((p.area - 0.25).abs() < 1e-12);
            // axis-aligned normals
            assert_eq!(p.normal.iter().filter(|x| (x.abs() - 1.0).abs() < 1e-12).count(), 1);
        }
        assert_eq!(q.sigma_region, 1);
        let mut chain = q.chain_lengths.clone();
        chain.sort_unstable();
        assert_eq!(chain, vec![1, 2, 2, 2, 3, 3, 3, 4]);
    }

    #[test]
    fn sigma_over_two_subdomains_flagged() {
        let blocks = [
            Block::new([0.0, 0.0, 0.0], [0.5, 1.0, 1.0], 1),
            Block::new([0.5, 0.0, 0.0], [1.0, 1.0, 1.0], 2),
        ];
        let m = build_block_mesh(2, 2, 2, &blocks, top()).unwrap();
        let v = validate_partition(&m, &prior(2)).unwrap_err();
        assert!(v.iter().any(|s| s.contains("SIGMA touches 2")));
    }

    #[test]
    fn roundtrip_is_exact() {
        let blocks = [
            Block::new([0.0, 0.0, 0.0], [1.0, 1.0, 2.0 / 3.0], 2),
            Block::new([0.0, 0.0, 2.0 / 3.0], [1.0, 1.0, 1.0], 1),
        ];
        let m = build_block_mesh(3, 7, 3, &blocks, top()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.emesh");
        save_mesh(&m, &path).unwrap();
        let back = load_mesh(&path).unwrap();
        assert_eq!(back, m);
        for (a, b) in back.vertices.iter().zip(&m.vertices) {
            for k in 0..3 {
                assert_eq!(a[k].to_bits(), b[k].to_bits());
            }
        }
    }

    #[test]
    fn out_of_range_vertex_names_line() {
        let m = build_block_mesh(1, 1, 1, &[Block::unit(1)], top()).unwrap();
        let text = m.to_emesh_string();
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        // first tet line: header + counts + 8 vertices
        lines[10] = format!("0 1 2 {} 1", 8 + 5);
        match PartitionedMesh::parse_emesh(&lines.join("\n")) {
            Err(Error::Parse { line, msg }) => {
                assert_eq!(line, 11);
                assert!(msg.contains("13"));
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn negative_volume_rejected_on_load() {
        let mut m = build_block_mesh(1, 1, 1, &[Block::unit(1)], top()).unwrap();
        m.tets[0].v.swap(0, 1);
        assert!(matches!(PartitionedMesh::parse_emesh(&m.to_emesh_string()), Err(Error::Validation(_))));
    }

    #[test]
    fn malformed_header_and_fields() {
        assert!(matches!(PartitionedMesh::parse_emesh("mesh 2\n"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(PartitionedMesh::parse_emesh("emesh 1\n1 0\n"), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(
            PartitionedMesh::parse_emesh("emesh 1\n1 0 0\n0.0 x 1\n"),
            Err(Error::Parse { line: 3, .. })
        ));
    }
}
