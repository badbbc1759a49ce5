//! Zero-level-set triangle mesh extraction and PLY I/O.
//!
//! Each grid cell spanned by 8 observed voxel centers is decomposed into six
//! tetrahedra sharing the main diagonal; the iso-surface inside a
//! tetrahedron is one or two triangles with vertices interpolated on sign-
//! changing edges. The decomposition agrees across neighboring cells, so the
//! result is watertight wherever the volume is observed. Shared vertices are
//! deduplicated by their grid edge.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::exec;
use crate::sdf::{SdfError, SdfVolume};

#[derive(Debug, Clone, Default)]
pub struct TriangleMesh {
    pub vertices: Vec<Vector3<f64>>,
    pub faces: Vec<[u32; 3]>,
}

impl TriangleMesh {
    pub fn is_empty(&self) -> bool {
        self.faces.is_empty()
    }

    pub fn triangle_area(&self, f: usize) -> f64 {
        let [a, b, c] = self.faces[f];
        let (a, b, c) = (
            self.vertices[a as usize],
            self.vertices[b as usize],
            self.vertices[c as usize],
        );
        0.5 * (b - a).cross(&(c - a)).norm()
    }

    pub fn surface_area(&self) -> f64 {
        (0..self.faces.len()).map(|f| self.triangle_area(f)).sum()
    }

    /// Area-weighted uniform surface samples with a fixed seed.
    pub fn sample_surface(&self, n: usize, seed: u64) -> Vec<Vector3<f64>> {
        if self.faces.is_empty() || n == 0 {
            return Vec::new();
        }
        let mut cumulative = Vec::with_capacity(self.faces.len());
        let mut total = 0.0;
        for f in 0..self.faces.len() {
            total += self.triangle_area(f);
            cumulative.push(total);
        }
        if total <= 0.0 {
            return Vec::new();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let target = rng.gen::<f64>() * total;
            let f = cumulative.partition_point(|c| *c < target).min(self.faces.len() - 1);
            let [a, b, c] = self.faces[f];
            let (a, b, c) = (
                self.vertices[a as usize],
                self.vertices[b as usize],
                self.vertices[c as usize],
            );
            // Square-root trick for uniform barycentric coordinates.
            let r1 = rng.gen::<f64>().sqrt();
            let r2 = rng.gen::<f64>();
            out.push(a * (1.0 - r1) + b * (r1 * (1.0 - r2)) + c * (r1 * r2));
        }
        out
    }
}

/// Six tetrahedra around the 0-7 cube diagonal. Cube corners are numbered by
/// bits (x, y, z); this split induces the same diagonal on faces shared by
/// adjacent cells.
const TETS: [[usize; 4]; 6] = [
    [0, 1, 3, 7],
    [0, 3, 2, 7],
    [0, 2, 6, 7],
    [0, 6, 4, 7],
    [0, 4, 5, 7],
    [0, 5, 1, 7],
];

/// Extract the `Ψ = 0` surface. Cells touching any unobserved voxel are
/// skipped; an all-positive (or all-negative) observed region yields an
/// empty mesh.
pub fn extract_mesh(vol: &SdfVolume) -> TriangleMesh {
    let [nx, ny, nz] = vol.dims();
    if nz < 2 {
        return TriangleMesh::default();
    }

    // Per-z-layer triangle soups keyed by global grid edges, merged in order.
    struct LocalTri {
        // Each vertex is a zero crossing on the segment between two voxel
        // centers, identified by their linear indices (lo < hi) for dedup.
        verts: [(u32, u32, [f64; 3]); 3],
    }

    let layers: Vec<Vec<LocalTri>> = exec::map_chunks(nz - 1, 1, |range| {
        let mut tris = Vec::new();
        for z in range {
            for y in 0..ny.saturating_sub(1) {
                'cell: for x in 0..nx - 1 {
                    let mut corner_idx = [0usize; 8];
                    let mut corner_val = [0.0f64; 8];
                    for c in 0..8 {
                        let (dx, dy, dz) = (c & 1, (c >> 1) & 1, (c >> 2) & 1);
                        let i = vol.linear_index(x + dx, y + dy, z + dz);
                        if vol.weights()[i] <= 0.0 {
                            continue 'cell;
                        }
                        corner_idx[c] = i;
                        corner_val[c] = vol.values()[i];
                    }
                    let corner_pos = |c: usize| -> Vector3<f64> {
                        let (dx, dy, dz) = (c & 1, (c >> 1) & 1, (c >> 2) & 1);
                        vol.voxel_center(x + dx, y + dy, z + dz)
                    };
                    for tet in &TETS {
                        polygonize_tet(
                            tet,
                            &corner_idx,
                            &corner_val,
                            &corner_pos,
                            &mut |a, b, c| tris.push(LocalTri { verts: [a, b, c] }),
                        );
                    }
                }
            }
        }
        tris
    });

    let mut mesh = TriangleMesh::default();
    let mut edge_vertex: HashMap<(u32, u32), u32> = HashMap::new();
    for layer in layers {
        for tri in layer {
            let mut face = [0u32; 3];
            for (slot, &(a, b, pos)) in tri.verts.iter().enumerate() {
                let key = (a, b);
                let idx = *edge_vertex.entry(key).or_insert_with(|| {
                    mesh.vertices.push(Vector3::new(pos[0], pos[1], pos[2]));
                    (mesh.vertices.len() - 1) as u32
                });
                face[slot] = idx;
            }
            mesh.faces.push(face);
        }
    }
    // Drop degenerate (zero-area) triangles, including repeated vertices.
    mesh.faces.retain(|f| {
        if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
            return false;
        }
        let (a, b, c) = (
            mesh.vertices[f[0] as usize],
            mesh.vertices[f[1] as usize],
            mesh.vertices[f[2] as usize],
        );
        (b - a).cross(&(c - a)).norm() > 1e-18
    });
    mesh
}

type EmitVertex = (u32, u32, [f64; 3]);

fn polygonize_tet(
    tet: &[usize; 4],
    corner_idx: &[usize; 8],
    corner_val: &[f64; 8],
    corner_pos: &impl Fn(usize) -> Vector3<f64>,
    emit: &mut impl FnMut(EmitVertex, EmitVertex, EmitVertex),
) {
    let inside: Vec<usize> = tet.iter().copied().filter(|&c| corner_val[c] < 0.0).collect();
    let outside: Vec<usize> = tet.iter().copied().filter(|&c| corner_val[c] >= 0.0).collect();
    if inside.is_empty() || outside.is_empty() {
        return;
    }
    let cross = |a: usize, b: usize| -> EmitVertex {
        let (va, vb) = (corner_val[a], corner_val[b]);
        let t = if (va - vb).abs() < 1e-300 {
            0.5
        } else {
            (va / (va - vb)).clamp(0.0, 1.0)
        };
        let p = corner_pos(a) * (1.0 - t) + corner_pos(b) * t;
        let (ia, ib) = (corner_idx[a] as u32, corner_idx[b] as u32);
        if ia < ib {
            (ia, ib, [p.x, p.y, p.z])
        } else {
            (ib, ia, [p.x, p.y, p.z])
        }
    };
    let oriented = |mut v0: EmitVertex,
                    mut v1: EmitVertex,
                    v2: EmitVertex,
                    toward_outside: Vector3<f64>,
                    anchor: Vector3<f64>,
                    emit: &mut dyn FnMut(EmitVertex, EmitVertex, EmitVertex)| {
        let p = |v: &EmitVertex| Vector3::new(v.2[0], v.2[1], v.2[2]);
        let n = (p(&v1) - p(&v0)).cross(&(p(&v2) - p(&v0)));
        if n.dot(&(toward_outside - anchor)) < 0.0 {
            std::mem::swap(&mut v0, &mut v1);
        }
        emit(v0, v1, v2);
    };
    match inside.len() {
        1 => {
            let a = inside[0];
            let (b, c, d) = (outside[0], outside[1], outside[2]);
            let out_centroid = (corner_pos(b) + corner_pos(c) + corner_pos(d)) / 3.0;
            oriented(
                cross(a, b),
                cross(a, c),
                cross(a, d),
                out_centroid,
                corner_pos(a),
                emit,
            );
        }
        3 => {
            let d = outside[0];
            let (a, b, c) = (inside[0], inside[1], inside[2]);
            let in_centroid = (corner_pos(a) + corner_pos(b) + corner_pos(c)) / 3.0;
            oriented(
                cross(a, d),
                cross(b, d),
                cross(c, d),
                corner_pos(d),
                in_centroid,
                emit,
            );
        }
        2 => {
            let (a, b) = (inside[0], inside[1]);
            let (c, d) = (outside[0], outside[1]);
            let pac = cross(a, c);
            let pad = cross(a, d);
            let pbc = cross(b, c);
            let pbd = cross(b, d);
            let out_centroid = (corner_pos(c) + corner_pos(d)) * 0.5;
            let in_centroid = (corner_pos(a) + corner_pos(b)) * 0.5;
            // Quad cycle p_ac -> p_ad -> p_bd -> p_bc split into two triangles.
            oriented(pac, pad, pbd, out_centroid, in_centroid, emit);
            oriented(pac, pbd, pbc, out_centroid, in_centroid, emit);
        }
        _ => unreachable!(),
    }
}

/// Write an ASCII PLY with vertex positions in meters.
pub fn write_ply(mesh: &TriangleMesh, mut w: impl Write) -> Result<(), SdfError> {
    writeln!(w, "ply")?;
    writeln!(w, "format ascii 1.0")?;
    writeln!(w, "element vertex {}", mesh.vertices.len())?;
    writeln!(w, "property float x")?;
    writeln!(w, "property float y")?;
    writeln!(w, "property float z")?;
    writeln!(w, "element face {}", mesh.faces.len())?;
    writeln!(w, "property list uchar int vertex_indices")?;
    writeln!(w, "end_header")?;
    for v in &mesh.vertices {
        writeln!(w, "{} {} {}", v.x as f32, v.y as f32, v.z as f32)?;
    }
    for f in &mesh.faces {
        writeln!(w, "3 {} {} {}", f[0], f[1], f[2])?;
    }
    Ok(())
}

/// Minimal ASCII PLY reader for meshes this crate writes.
pub fn read_ply(r: impl std::io::Read) -> Result<TriangleMesh, SdfError> {
    let reader = std::io::BufReader::new(r);
    let mut lines = reader.lines();
    let mut n_vertices = 0usize;
    let mut n_faces = 0usize;
    let mut saw_magic = false;
    loop {
        let line = lines
            .next()
            .ok_or_else(|| SdfError::BadCheckpoint("unexpected end of PLY header".into()))??;
        let line = line.trim().to_string();
        if !saw_magic {
            if line != "ply" {
                return Err(SdfError::BadCheckpoint("missing ply magic".into()));
            }
            saw_magic = true;
            continue;
        }
        if let Some(rest) = line.strip_prefix("element vertex ") {
            n_vertices = rest
                .parse()
                .map_err(|_| SdfError::BadCheckpoint("bad vertex count".into()))?;
        } else if let Some(rest) = line.strip_prefix("element face ") {
            n_faces = rest
                .parse()
                .map_err(|_| SdfError::BadCheckpoint("bad face count".into()))?;
        } else if line == "end_header" {
            break;
        }
    }
    let mut mesh = TriangleMesh::default();
    for _ in 0..n_vertices {
        let line = lines
            .next()
            .ok_or_else(|| SdfError::BadCheckpoint("truncated vertex list".into()))??;
        let mut it = line.split_whitespace();
        let mut coord = [0.0f64; 3];
        for c in &mut coord {
            *c = it
                .next()
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| SdfError::BadCheckpoint("bad vertex line".into()))?;
        }
        mesh.vertices.push(Vector3::new(coord[0], coord[1], coord[2]));
    }
    for _ in 0..n_faces {
        let line = lines
            .next()
            .ok_or_else(|| SdfError::BadCheckpoint("truncated face list".into()))??;
        let nums: Vec<u32> = line
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| SdfError::BadCheckpoint("bad face line".into())))
            .collect::<Result<_, _>>()?;
        if nums.len() != 4 || nums[0] != 3 {
            return Err(SdfError::BadCheckpoint("only triangle faces supported".into()));
        }
        if nums[1..].iter().any(|&i| i as usize >= mesh.vertices.len()) {
            return Err(SdfError::BadCheckpoint("face index out of range".into()));
        }
        mesh.faces.push([nums[1], nums[2], nums[3]]);
    }
    Ok(mesh)
}
