use hei_core::fem::{assemble_mass, assemble_stiffness, generate_channel_permeability, rasterize, spmm, to_dense, LocalSystem, DEFAULT_LAYOUT};
use hei_core::multiscale::{
    build_decomposition, explicit_stability_indicator, largest_generalized_eigenvalue, local_generalized_eigenproblem,
    m_orthonormalize, project_stiffness, project_system,
};
use hei_core::{CoarseMesh, FineMesh, PermeabilityField, SpaceDecomposition};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn channel_field(n: usize) -> PermeabilityField {
    generate_channel_permeability(n, 1.0, 1e3, &rasterize(&DEFAULT_LAYOUT, n)).unwrap()
}

fn decomposition(n: usize, nc: usize, kappa: &PermeabilityField, l1: usize, l2: usize) -> (FineMesh, SpaceDecomposition) {
    let mesh = FineMesh::new(n).unwrap();
    let coarse = CoarseMesh::new(&mesh, nc).unwrap();
    let dec = build_decomposition(&mesh, &coarse, kappa, l1, l2, &assemble_mass(&mesh)).unwrap();
    (mesh, dec)
}

#[test]
fn coarse_mesh_counts() {
    let fine = FineMesh::new(4).unwrap();
    assert_eq!(CoarseMesh::new(&fine, 2).unwrap().node_count(), 9);
    assert_eq!(CoarseMesh::new(&FineMesh::new(100).unwrap(), 10).unwrap().node_count(), 121);
    assert!(CoarseMesh::new(&fine, 3).is_err());
    assert!(CoarseMesh::new(&fine, 0).is_err());
}

#[test]
fn hats_form_a_partition_of_unity() {
    let fine = FineMesh::new(12).unwrap();
    let coarse = CoarseMesh::new(&fine, 3).unwrap();
    let sum = (0..coarse.node_count()).fold(DVector::zeros(fine.node_count()), |acc, k| acc + coarse.hat_vector(k));
    assert!(sum.iter().all(|v| (v - 1.0).abs() < 1e-14));
    // Interior hat covers a 2×2 block of coarse cells.
    let nb = &coarse.neighborhoods()[coarse.node_index(1, 1)];
    assert_eq!(nb.cells.len(), 64);
    assert_eq!(coarse.neighborhoods()[0].cells.len(), 16);
    assert_eq!(coarse.coarse_cell(2, 1).len(), 16);
}

#[test]
fn local_eigenproblem_with_unit_coefficient() {
    let mesh = FineMesh::new(6).unwrap();
    let cells: Vec<usize> = (0..mesh.cell_count()).collect();
    let ones = vec![1.0; mesh.cell_count()];
    let local = LocalSystem::assemble(&mesh, &cells, &ones, Some(&ones));
    let spec = local_generalized_eigenproblem(&local.stiffness, &local.mass).unwrap();
    assert!(spec.values[0].abs() < 1e-10);
    assert!(spec.values.windows(2).all(|w| w[0] <= w[1]));
    let first = spec.vectors.column(0);
    assert!(first.iter().all(|v| (v.abs() - 1.0).abs() < 1e-8), "first mode should be the unit constant");
    let gram = spec.vectors.transpose() * &local.mass * &spec.vectors;
    assert!((gram - DMatrix::identity(49, 49)).amax() < 1e-10);
    // Continuum value is π²; Q1 overestimates it from the same side.
    assert!(spec.values[1] > 9.8696 && spec.values[1] < 10.3);
}

#[test]
fn local_eigenproblem_rejects_bad_input() {
    let a = DMatrix::<f64>::identity(3, 3);
    assert!(local_generalized_eigenproblem(&a, &DMatrix::identity(2, 2)).is_err());
    let mut indefinite = DMatrix::<f64>::identity(3, 3);
    indefinite[(2, 2)] = -1.0;
    assert!(local_generalized_eigenproblem(&a, &indefinite).is_err());
}

#[test]
fn decomposition_is_m_orthonormal_and_full_rank() {
    let kappa = channel_field(16);
    let (mesh, dec) = decomposition(16, 4, &kappa, 2, 2);
    let mass = to_dense(&assemble_mass(&mesh));
    assert_eq!(dec.m1(), 2 * 25);
    assert_eq!(dec.m2(), 2 * 16);
    for b in [&dec.b1, &dec.b2] {
        let g = b.transpose() * &mass * b;
        assert!((g - DMatrix::identity(b.ncols(), b.ncols())).amax() < 1e-10);
    }
    let both = DMatrix::from_columns(&dec.b1.column_iter().chain(dec.b2.column_iter()).collect::<Vec<_>>());
    let sv = (both.transpose() * &mass * &both).symmetric_eigenvalues();
    assert!(sv.min() > 1e-8, "smallest Gram eigenvalue {}", sv.min());
}

#[test]
fn robust_columns_are_orthogonal_to_hats() {
    let kappa = channel_field(8);
    let (mesh, dec) = decomposition(8, 2, &kappa, 1, 2);
    let coarse = CoarseMesh::new(&mesh, 2).unwrap();
    let mass = to_dense(&assemble_mass(&mesh));
    for k in 0..coarse.node_count() {
        let mh = &mass * coarse.hat_vector(k);
        assert!((dec.b2.transpose() * mh).amax() < 1e-10);
    }
}

#[test]
fn unit_coefficient_single_mode_spans_the_hats() {
    let mesh = FineMesh::new(8).unwrap();
    let kappa = PermeabilityField::uniform(&mesh, 1.0).unwrap();
    let (_, dec) = decomposition(8, 2, &kappa, 1, 1);
    let coarse = CoarseMesh::new(&mesh, 2).unwrap();
    let mass = to_dense(&assemble_mass(&mesh));
    assert_eq!(dec.m1(), 9);
    for k in 0..9 {
        let hat = coarse.hat_vector(k);
        let coef = dec.b1.transpose() * &mass * &hat;
        let resid = &hat - &dec.b1 * coef;
        assert!(resid.amax() < 1e-8);
    }
}

#[test]
fn mode_counts_of_zero_are_rejected() {
    let mesh = FineMesh::new(4).unwrap();
    let coarse = CoarseMesh::new(&mesh, 2).unwrap();
    let kappa = PermeabilityField::uniform(&mesh, 1.0).unwrap();
    let mass = assemble_mass(&mesh);
    assert!(build_decomposition(&mesh, &coarse, &kappa, 0, 1, &mass).is_err());
    assert!(build_decomposition(&mesh, &coarse, &kappa, 1, 0, &mass).is_err());
    let short = PermeabilityField::new(vec![1.0; 3]).unwrap();
    assert!(build_decomposition(&mesh, &coarse, &short, 1, 1, &mass).is_err());
}

#[test]
fn gram_schmidt_drops_dependent_columns() {
    let mesh = FineMesh::new(3).unwrap();
    let mass = assemble_mass(&mesh);
    let a = DVector::from_fn(16, |i, _| i as f64);
    let b = DVector::from_element(16, 1.0);
    let cols = vec![a.clone(), b.clone(), &a * 2.0 - &b * 3.0, DVector::zeros(16)];
    let (q, dropped) = m_orthonormalize(&cols, &mass);
    assert_eq!((q.ncols(), dropped), (2, 2));
}

#[test]
fn projection_matches_dense_products() {
    let kappa = channel_field(8);
    let (mesh, dec) = decomposition(8, 2, &kappa, 2, 1);
    let (m, a) = (assemble_mass(&mesh), assemble_stiffness(&mesh, &kappa).unwrap());
    let ps = project_system(&dec, &m, &a).unwrap();
    let (md, ad) = (to_dense(&m), to_dense(&a));
    let scale = ad.amax();
    assert!((&ps.a11 - dec.b1.transpose() * &ad * &dec.b1).amax() < 1e-12 * scale);
    assert!((&ps.a12 - dec.b1.transpose() * &ad * &dec.b2).amax() < 1e-12 * scale);
    assert!((&ps.a22 - dec.b2.transpose() * &ad * &dec.b2).amax() < 1e-12 * scale);
    assert!((&ps.m12 - dec.b1.transpose() * &md * &dec.b2).amax() < 1e-12);
    assert!((&ps.m11 - DMatrix::identity(dec.m1(), dec.m1())).amax() < 1e-10);
    assert_eq!((ps.m1(), ps.m2()), (dec.m1(), dec.m2()));
    assert_eq!(spmm(&a, &dec.b1).nrows(), 81);

    let again = ps.with_stiffness(project_stiffness(&dec, &a).unwrap());
    assert_eq!(again, ps);
    assert!(project_stiffness(&dec, &assemble_mass(&FineMesh::new(4).unwrap())).is_err());
}

#[test]
fn swapping_exchanges_the_blocks() {
    let kappa = channel_field(8);
    let (mesh, dec) = decomposition(8, 2, &kappa, 2, 1);
    let (m, a) = (assemble_mass(&mesh), assemble_stiffness(&mesh, &kappa).unwrap());
    let ps = project_system(&dec, &m, &a).unwrap();
    let sw = project_system(&dec.swapped(), &m, &a).unwrap();
    assert!((&sw.a11 - &ps.a22).amax() < 1e-10);
    assert!((&sw.a12 - ps.a12.transpose()).amax() < 1e-10);
}

#[test]
fn stability_indicator_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let r = DMatrix::from_fn(6, 6, |_, _| rng.random_range(-1.0..1.0));
    let m = &r * r.transpose() + DMatrix::identity(6, 6);
    assert!((largest_generalized_eigenvalue(&m, &m).unwrap() - 1.0).abs() < 1e-6);
    assert!(largest_generalized_eigenvalue(&DMatrix::zeros(6, 6), &m).unwrap().abs() < 1e-12);
    let d = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 5.0, 2.0]));
    let ev = largest_generalized_eigenvalue(&d, &DMatrix::identity(3, 3)).unwrap();
    assert!((ev - 5.0).abs() < 1e-6);
    assert!(largest_generalized_eigenvalue(&d, &(-DMatrix::<f64>::identity(3, 3))).is_err());
}

#[test]
fn stability_indicator_matches_dense_eigenvalues() {
    let kappa = channel_field(8);
    let (mesh, dec) = decomposition(8, 2, &kappa, 2, 2);
    let ps = project_system(&dec, &assemble_mass(&mesh), &assemble_stiffness(&mesh, &kappa).unwrap()).unwrap();
    let power = explicit_stability_indicator(&ps).unwrap();
    // M₂₂ is the identity up to round-off, so the dense spectrum of A₂₂ is the oracle.
    let dense = ps.a22.clone().symmetric_eigenvalues().max();
    assert!((power - dense).abs() < 1e-5 * dense, "{power} vs {dense}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn random_coefficients_give_orthonormal_spaces(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let kappa = PermeabilityField::new((0..64).map(|_| 10f64.powf(rng.random_range(0.0..3.0))).collect()).unwrap();
        let (mesh, dec) = decomposition(8, 2, &kappa, 2, 2);
        let mass = to_dense(&assemble_mass(&mesh));
        let g = dec.b1.transpose() * &mass * &dec.b1;
        prop_assert!((g - DMatrix::identity(dec.m1(), dec.m1())).amax() < 1e-9);
        let g = dec.b2.transpose() * &mass * &dec.b2;
        prop_assert!((g - DMatrix::identity(dec.m2(), dec.m2())).amax() < 1e-9);
    }
}
