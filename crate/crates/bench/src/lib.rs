//! Shared fixtures for the benchmarks.

use hei_core::fem::{assemble_mass, assemble_stiffness, generate_channel_permeability, rasterize, DEFAULT_LAYOUT};
use hei_core::multiscale::{build_decomposition, project_system};
use hei_core::{CoarseMesh, FineMesh, PermeabilityField, ProjectedSystem, SpaceDecomposition, SparseMatrix};

pub struct Fixture {
    pub mesh: FineMesh,
    pub coarse: CoarseMesh,
    pub kappa: PermeabilityField,
    pub mass: SparseMatrix,
    pub stiffness: SparseMatrix,
    pub dec: SpaceDecomposition,
    pub ps: ProjectedSystem,
}

/// Channel problem on an `n`×`n` grid with `nc`×`nc` coarse cells, contrast 1e4.
pub fn fixture(n: usize, nc: usize) -> Fixture {
    let mesh = FineMesh::new(n).expect("mesh");
    let coarse = CoarseMesh::new(&mesh, nc).expect("coarse mesh");
    let kappa = generate_channel_permeability(n, 1.0, 1e4, &rasterize(&DEFAULT_LAYOUT, n)).expect("field");
    let mass = assemble_mass(&mesh);
    let stiffness = assemble_stiffness(&mesh, &kappa).expect("stiffness");
    let dec = build_decomposition(&mesh, &coarse, &kappa, 3, 2, &mass).expect("decomposition");
    let ps = project_system(&dec, &mass, &stiffness).expect("projection");
    Fixture {
        mesh,
        coarse,
        kappa,
        mass,
        stiffness,
        dec,
        ps,
    }
}
