//! Iso-surface extraction of a density field and ASCII PLY output.

use std::collections::{HashMap, HashSet};
use std::io::Write;

use glam::DVec3;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scene::BOX_HALF;
use crate::triplane::{decode, DecoderParams, TriPlane};

/// Reference sample count along the box diagonal that fixes the iso-level.
pub const ISO_REFERENCE_SAMPLES: f64 = 128.0;

/// Density at which one reference step reaches opacity one half:
/// `1 − exp(−σ* δ̄) = 0.5` with `δ̄ = box diagonal / 128`.
pub fn iso_level() -> f64 {
    let diagonal = 2.0 * BOX_HALF * 3f64.sqrt();
    std::f64::consts::LN_2 / (diagonal / ISO_REFERENCE_SAMPLES)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<DVec3>,
    /// Per-vertex RGB in `[0, 1]`; empty when the mesh carries no color.
    pub colors: Vec<[f64; 3]>,
    pub triangles: Vec<[u32; 3]>,
}

impl Mesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    /// Enclosed volume from the divergence theorem.
    pub fn volume(&self) -> f64 {
        let signed: f64 = self
            .triangles
            .iter()
            .map(|t| {
                let [a, b, c] = t.map(|i| self.vertices[i as usize]);
                a.dot(b.cross(c))
            })
            .sum();
        (signed / 6.0).abs()
    }

    /// `V − E + F` over the vertices referenced by triangles.
    pub fn euler_characteristic(&self) -> i64 {
        let mut edges = HashSet::new();
        let mut used = HashSet::new();
        for t in &self.triangles {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                edges.insert((a.min(b), a.max(b)));
                used.insert(a);
            }
        }
        used.len() as i64 - edges.len() as i64 + self.triangles.len() as i64
    }

    /// Every edge is shared by exactly two triangles.
    pub fn is_closed(&self) -> bool {
        let mut count = HashMap::new();
        for t in &self.triangles {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                *count.entry((a.min(b), a.max(b))).or_insert(0usize) += 1;
            }
        }
        count.values().all(|&c| c == 2)
    }

    pub fn write_ply(&self, out: &mut impl Write) -> std::io::Result<()> {
        writeln!(out, "ply\nformat ascii 1.0")?;
        writeln!(out, "element vertex {}", self.vertices.len())?;
        writeln!(out, "property float x\nproperty float y\nproperty float z")?;
        let colored = self.colors.len() == self.vertices.len() && !self.vertices.is_empty();
        if colored {
            writeln!(out, "property uchar red\nproperty uchar green\nproperty uchar blue")?;
        }
        writeln!(out, "element face {}", self.triangles.len())?;
        writeln!(out, "property list uchar int vertex_indices\nend_header")?;
        for (i, v) in self.vertices.iter().enumerate() {
            write!(out, "{} {} {}", v.x as f32, v.y as f32, v.z as f32)?;
            if colored {
                let [r, g, b] = self.colors[i].map(|c| (c.clamp(0.0, 1.0) * 255.0).round() as u8);
                write!(out, " {r} {g} {b}")?;
            }
            writeln!(out)?;
        }
        for t in &self.triangles {
            writeln!(out, "3 {} {} {}", t[0], t[1], t[2])?;
        }
        Ok(())
    }
}

/// Node position of grid index `i` on an axis with `nodes` samples across the box.
fn node_coord(i: f64, nodes: usize) -> f64 {
    -BOX_HALF + 2.0 * BOX_HALF * i / (nodes - 1) as f64
}

/// The six tetrahedra of a cube, all sharing the diagonal from corner 0 to
/// corner 7 (corner bits are `x | y << 1 | z << 2`). Every cube face is split
/// along the diagonal through its lowest corner, so neighbouring cubes agree.
const TETRAHEDRA: [[usize; 4]; 6] = [[0, 1, 3, 7], [0, 1, 5, 7], [0, 2, 3, 7], [0, 2, 6, 7], [0, 4, 5, 7], [0, 4, 6, 7]];

/// Marching-tetrahedra surface of `density = iso` over a `nodes³` grid
/// spanning the box. Grid cubes are cut into tetrahedra, which makes the
/// surface closed and free of the ambiguous cases of the cube tables. An
/// outer layer of nodes always reads as empty, so fields touching the box
/// still produce closed surfaces.
pub fn extract_isosurface<F>(nodes: usize, iso: f64, density: F) -> Result<Mesh>
where
    F: Fn(DVec3) -> f64 + Sync,
{
    if nodes < 2 {
        return Err(Error::OutOfRange { what: "mesh grid resolution", detail: format!("{nodes} < 2") });
    }
    let n = nodes + 2;
    let index = |i: usize, j: usize, k: usize| (k * n + j) * n + i;
    // field value, negative inside
    let values: Vec<f64> = (0..n * n * n)
        .into_par_iter()
        .map(|idx| {
            let (i, j, k) = (idx % n, (idx / n) % n, idx / (n * n));
            if [i, j, k].iter().any(|&c| c == 0 || c == n - 1) {
                // far outside, so crossings towards the padding sit on the box faces
                return 1e30;
            }
            let p = DVec3::new(node_coord((i - 1) as f64, nodes), node_coord((j - 1) as f64, nodes), node_coord((k - 1) as f64, nodes));
            iso - density(p)
        })
        .collect();
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { what: "density", location: format!("mesh grid node {i}") });
    }
    let position = |idx: usize| {
        let (i, j, k) = (idx % n, (idx / n) % n, idx / (n * n));
        DVec3::new(node_coord(i as f64 - 1.0, nodes), node_coord(j as f64 - 1.0, nodes), node_coord(k as f64 - 1.0, nodes))
    };

    let mut mesh = Mesh::default();
    let mut edge_vertex: HashMap<(usize, usize), u32> = HashMap::new();
    let mut vertex = |a: usize, b: usize, mesh: &mut Mesh| -> u32 {
        let key = (a.min(b), a.max(b));
        *edge_vertex.entry(key).or_insert_with(|| {
            let (va, vb) = (values[key.0], values[key.1]);
            let t = va / (va - vb);
            mesh.vertices.push(position(key.0).lerp(position(key.1), t));
            (mesh.vertices.len() - 1) as u32
        })
    };
    for k in 0..n - 1 {
        for j in 0..n - 1 {
            for i in 0..n - 1 {
                let corner = |c: usize| index(i + (c & 1), j + ((c >> 1) & 1), k + ((c >> 2) & 1));
                let corners: [usize; 8] = std::array::from_fn(corner);
                if corners.iter().all(|&c| values[c] >= 0.0) || corners.iter().all(|&c| values[c] < 0.0) {
                    continue;
                }
                for tet in TETRAHEDRA {
                    let ids = tet.map(|c| corners[c]);
                    let (inside, outside): (Vec<usize>, Vec<usize>) = ids.iter().partition(|&&c| values[c] < 0.0);
                    let polygon: Vec<u32> = match inside.len() {
                        1 => outside.iter().map(|&o| vertex(inside[0], o, &mut mesh)).collect(),
                        3 => inside.iter().map(|&i| vertex(i, outside[0], &mut mesh)).collect(),
                        2 => [(0, 0), (0, 1), (1, 1), (1, 0)].iter().map(|&(a, b)| vertex(inside[a], outside[b], &mut mesh)).collect(),
                        _ => continue,
                    };
                    let centroid = |s: &[usize]| s.iter().map(|&c| position(c)).sum::<DVec3>() / s.len() as f64;
                    let outward = centroid(&outside) - centroid(&inside);
                    for t in 1..polygon.len() - 1 {
                        let mut tri = [polygon[0], polygon[t], polygon[t + 1]];
                        let [a, b, c] = tri.map(|v| mesh.vertices[v as usize]);
                        if (b - a).cross(c - a).dot(outward) < 0.0 {
                            tri.swap(1, 2);
                        }
                        mesh.triangles.push(tri);
                    }
                }
            }
        }
    }
    Ok(mesh)
}

/// Surface of a decoded triplane at [`iso_level`], colored by the decoder.
pub fn export_mesh(tp: &TriPlane, dec: &DecoderParams, nodes: usize) -> Result<Mesh> {
    let mut mesh = extract_isosurface(nodes, iso_level(), |p| decode(dec, &tp.feature(p)).map(|(_, s)| s).unwrap_or(f64::NAN))?;
    mesh.colors = mesh
        .vertices
        .par_iter()
        .map(|&p| decode(dec, &tp.feature(p)).map(|(c, _)| c))
        .collect::<Result<Vec<_>>>()?;
    Ok(mesh)
}
