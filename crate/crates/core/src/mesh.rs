//! Conforming triangulations of axis-aligned rectangles.
//!
//! Meshes store their facets explicitly. Every facet has an owner, the
//! adjacent cell with the smallest index, and the owner's outward normal is
//! the global orientation used by the H(div) degrees of freedom.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MeshError {
    #[error("invalid mesh dimensions: {0}")]
    InvalidDimensions(String),
    #[error("cell {cell} has non-positive signed area {area:e}")]
    NonPositiveArea { cell: usize, area: f64 },
    #[error("cell {cell} references vertex {vertex} out of range")]
    VertexOutOfRange { cell: usize, vertex: usize },
    #[error("facet ({0}, {1}) is shared by more than two cells")]
    NonManifold(usize, usize),
    #[error("uniform refinement needs a structured mesh")]
    Unstructured,
    #[error("boundary facet {0} was tagged Interior")]
    UntaggedBoundary(usize),
}

/// Boundary classification of a facet.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoundaryTag {
    /// Displacement, normal flux and tracer concentration prescribed.
    Gamma,
    /// Normal stress, fluid pressure and zero tracer flux prescribed.
    Sigma,
    Interior,
}

/// Sides of an axis-aligned rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Bottom,
    Right,
    Top,
    Left,
}

impl Side {
    pub const ALL: [Side; 4] = [Side::Bottom, Side::Right, Side::Top, Side::Left];
}

/// Assigns every side of the rectangle to `Gamma` or `Sigma`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundaryPartition {
    pub bottom: BoundaryTag,
    pub right: BoundaryTag,
    pub top: BoundaryTag,
    pub left: BoundaryTag,
}

impl BoundaryPartition {
    pub fn uniform(tag: BoundaryTag) -> Self {
        Self { bottom: tag, right: tag, top: tag, left: tag }
    }

    pub fn all_gamma() -> Self {
        Self::uniform(BoundaryTag::Gamma)
    }

    pub fn all_sigma() -> Self {
        Self::uniform(BoundaryTag::Sigma)
    }

    pub fn tag(&self, side: Side) -> BoundaryTag {
        match side {
            Side::Bottom => self.bottom,
            Side::Right => self.right,
            Side::Top => self.top,
            Side::Left => self.left,
        }
    }

    fn validate(&self) -> Result<(), MeshError> {
        for side in Side::ALL {
            if self.tag(side) == BoundaryTag::Interior {
                return Err(MeshError::InvalidDimensions(format!(
                    "side {side:?} must be Gamma or Sigma"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Facet {
    /// Endpoints sorted so that `vertices[0] < vertices[1]`.
    pub vertices: [usize; 2],
    /// Owning cell and its local edge index.
    pub owner: (usize, usize),
    /// Second adjacent cell, absent on the boundary.
    pub neighbor: Option<(usize, usize)>,
    pub tag: BoundaryTag,
    pub side: Option<Side>,
}

impl Facet {
    pub fn is_boundary(&self) -> bool {
        self.neighbor.is_none()
    }
}

/// Parameters of a structured rectangle mesh, kept so it can be refined.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StructuredGrid {
    pub width: f64,
    pub height: f64,
    pub nx: usize,
    pub ny: usize,
    pub partition: BoundaryPartition,
}

#[derive(Debug, Clone)]
pub struct Mesh {
    vertices: Vec<[f64; 2]>,
    cells: Vec<[usize; 3]>,
    cell_facets: Vec<[usize; 3]>,
    facets: Vec<Facet>,
    grid: Option<StructuredGrid>,
}

/// Local edge `i` of a cell joins local vertices `i+1` and `i+2` (mod 3),
/// traversed counterclockwise.
pub const LOCAL_EDGES: [[usize; 2]; 3] = [[1, 2], [2, 0], [0, 1]];

impl Mesh {
    /// Unit square split into `n x n` squares, each cut along the
    /// bottom-left to top-right diagonal.
    pub fn unit_square(n: usize, partition: BoundaryPartition) -> Result<Self, MeshError> {
        Self::rectangle(1.0, 1.0, n, n, partition)
    }

    pub fn rectangle(
        width: f64,
        height: f64,
        nx: usize,
        ny: usize,
        partition: BoundaryPartition,
    ) -> Result<Self, MeshError> {
        if nx == 0 || ny == 0 {
            return Err(MeshError::InvalidDimensions(format!("nx = {nx}, ny = {ny}")));
        }
        if !(width > 0.0 && height > 0.0) || !width.is_finite() || !height.is_finite() {
            return Err(MeshError::InvalidDimensions(format!(
                "width = {width}, height = {height}"
            )));
        }
        partition.validate()?;

        let mut vertices = Vec::with_capacity((nx + 1) * (ny + 1));
        for j in 0..=ny {
            for i in 0..=nx {
                vertices.push([width * i as f64 / nx as f64, height * j as f64 / ny as f64]);
            }
        }
        let vid = |i: usize, j: usize| j * (nx + 1) + i;
        let mut cells = Vec::with_capacity(2 * nx * ny);
        for j in 0..ny {
            for i in 0..nx {
                let (v00, v10, v01, v11) = (vid(i, j), vid(i + 1, j), vid(i, j + 1), vid(i + 1, j + 1));
                cells.push([v00, v10, v11]);
                cells.push([v00, v11, v01]);
            }
        }

        let grid = StructuredGrid { width, height, nx, ny, partition };
        let side_of = |mid: [f64; 2]| -> Option<Side> {
            let tol = 1e-12 * width.max(height);
            if mid[1].abs() < tol {
                Some(Side::Bottom)
            } else if (mid[0] - width).abs() < tol {
                Some(Side::Right)
            } else if (mid[1] - height).abs() < tol {
                Some(Side::Top)
            } else if mid[0].abs() < tol {
                Some(Side::Left)
            } else {
                None
            }
        };
        let mut mesh = Self::assemble(vertices, cells, |mid| {
            let side = side_of(mid);
            (side.map_or(BoundaryTag::Interior, |s| partition.tag(s)), side)
        })?;
        mesh.grid = Some(grid);
        Ok(mesh)
    }

    /// Builds a mesh from raw connectivity. Boundary facets are classified
    /// by `tagger` evaluated at the facet midpoint.
    pub fn from_cells(
        vertices: Vec<[f64; 2]>,
        cells: Vec<[usize; 3]>,
        tagger: impl Fn([f64; 2]) -> BoundaryTag,
    ) -> Result<Self, MeshError> {
        Self::assemble(vertices, cells, |mid| (tagger(mid), None))
    }

    fn assemble(
        vertices: Vec<[f64; 2]>,
        cells: Vec<[usize; 3]>,
        classify: impl Fn([f64; 2]) -> (BoundaryTag, Option<Side>),
    ) -> Result<Self, MeshError> {
        for (c, cell) in cells.iter().enumerate() {
            for &v in cell {
                if v >= vertices.len() {
                    return Err(MeshError::VertexOutOfRange { cell: c, vertex: v });
                }
            }
            let area = signed_area(&vertices, cell);
            if !(area > 0.0) {
                return Err(MeshError::NonPositiveArea { cell: c, area });
            }
        }

        let mut lookup: HashMap<(usize, usize), usize> = HashMap::with_capacity(cells.len() * 2);
        let mut facets: Vec<Facet> = Vec::with_capacity(cells.len() * 2);
        let mut cell_facets = vec![[usize::MAX; 3]; cells.len()];
        for (c, cell) in cells.iter().enumerate() {
            for (e, [a, b]) in LOCAL_EDGES.iter().enumerate() {
                let (va, vb) = (cell[*a], cell[*b]);
                let key = (va.min(vb), va.max(vb));
                match lookup.get(&key) {
                    Some(&f) => {
                        if facets[f].neighbor.is_some() {
                            return Err(MeshError::NonManifold(key.0, key.1));
                        }
                        facets[f].neighbor = Some((c, e));
                        cell_facets[c][e] = f;
                    }
                    None => {
                        lookup.insert(key, facets.len());
                        cell_facets[c][e] = facets.len();
                        facets.push(Facet {
                            vertices: [key.0, key.1],
                            owner: (c, e),
                            neighbor: None,
                            tag: BoundaryTag::Interior,
                            side: None,
                        });
                    }
                }
            }
        }

        for (f, facet) in facets.iter_mut().enumerate() {
            if facet.neighbor.is_none() {
                let [a, b] = facet.vertices;
                let mid = [
                    0.5 * (vertices[a][0] + vertices[b][0]),
                    0.5 * (vertices[a][1] + vertices[b][1]),
                ];
                let (tag, side) = classify(mid);
                if tag == BoundaryTag::Interior {
                    return Err(MeshError::UntaggedBoundary(f));
                }
                facet.tag = tag;
                facet.side = side;
            }
        }

        Ok(Self { vertices, cells, cell_facets, facets, grid: None })
    }

    /// Splits every cell into four similar children. Only structured meshes
    /// can be refined, since their boundary tags are defined by side.
    pub fn refine_uniform(&self) -> Result<Self, MeshError> {
        let g = self.grid.ok_or(MeshError::Unstructured)?;
        Self::rectangle(g.width, g.height, 2 * g.nx, 2 * g.ny, g.partition)
    }

    pub fn vertices(&self) -> &[[f64; 2]] {
        &self.vertices
    }

    pub fn cells(&self) -> &[[usize; 3]] {
        &self.cells
    }

    pub fn facets(&self) -> &[Facet] {
        &self.facets
    }

    pub fn cell_facets(&self, cell: usize) -> [usize; 3] {
        self.cell_facets[cell]
    }

    pub fn grid(&self) -> Option<&StructuredGrid> {
        self.grid.as_ref()
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn num_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn num_facets(&self) -> usize {
        self.facets.len()
    }

    pub fn cell_coords(&self, cell: usize) -> [[f64; 2]; 3] {
        let c = self.cells[cell];
        [self.vertices[c[0]], self.vertices[c[1]], self.vertices[c[2]]]
    }

    pub fn cell_area(&self, cell: usize) -> f64 {
        signed_area(&self.vertices, &self.cells[cell])
    }

    pub fn cell_diameter(&self, cell: usize) -> f64 {
        let x = self.cell_coords(cell);
        (0..3)
            .map(|i| dist(x[i], x[(i + 1) % 3]))
            .fold(0.0, f64::max)
    }

    /// Mesh size `h`, the largest cell diameter.
    pub fn h(&self) -> f64 {
        (0..self.num_cells()).map(|c| self.cell_diameter(c)).fold(0.0, f64::max)
    }

    pub fn facet_length(&self, facet: usize) -> f64 {
        let [a, b] = self.facets[facet].vertices;
        dist(self.vertices[a], self.vertices[b])
    }

    pub fn facet_midpoint(&self, facet: usize) -> [f64; 2] {
        let [a, b] = self.facets[facet].vertices;
        let (pa, pb) = (self.vertices[a], self.vertices[b]);
        [0.5 * (pa[0] + pb[0]), 0.5 * (pa[1] + pb[1])]
    }

    /// Outward unit normal of the owner cell across `facet`.
    pub fn facet_normal(&self, facet: usize) -> [f64; 2] {
        let (cell, e) = self.facets[facet].owner;
        let x = self.cell_coords(cell);
        let [a, b] = LOCAL_EDGES[e];
        let d = [x[b][0] - x[a][0], x[b][1] - x[a][1]];
        let len = (d[0] * d[0] + d[1] * d[1]).sqrt();
        [d[1] / len, -d[0] / len]
    }

    pub fn boundary_facets(&self) -> impl Iterator<Item = usize> + '_ {
        self.facets
            .iter()
            .enumerate()
            .filter(|(_, f)| f.is_boundary())
            .map(|(i, _)| i)
    }

    /// Circumradius over inradius for one cell.
    pub fn shape_ratio(&self, cell: usize) -> f64 {
        let x = self.cell_coords(cell);
        let a = dist(x[1], x[2]);
        let b = dist(x[2], x[0]);
        let c = dist(x[0], x[1]);
        let area = self.cell_area(cell);
        let s = 0.5 * (a + b + c);
        let circum = a * b * c / (4.0 * area);
        let inr = area / s;
        circum / inr
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn signed_area(vertices: &[[f64; 2]], cell: &[usize; 3]) -> f64 {
    let (a, b, c) = (vertices[cell[0]], vertices[cell[1]], vertices[cell[2]]);
    0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]))
}
