use std::sync::Arc;
use hdiv_core::amg::amg_setup;
use hdiv_core::coefficient::two_material;
use hdiv_core::krylov::{minres, BlockDiagPrecond, DiagonalScale, FnOp};
use hdiv_core::mesh::cartesian_mesh;
use hdiv_core::solvers::{assemble, ProblemData, SaddleBc, SaddleProblem, SolveOptions};

#[test]
fn experiment() {
    for (a, b) in [(1.0, 1.0), (1.0, 3.0), (1.0, 10.0), (1.0, 30.0), (0.1, 1.0), (3.0, 1.0)] {
    let mut its = Vec::new();
    for n in [2usize, 4, 8, 16] {
        let mut mesh = cartesian_mesh(2, &[n, n], &[[0.0, 1.0], [0.0, 1.0]]).unwrap();
        mesh.set_attributes_by(|c| if c[0] < 0.5 { 1 } else { 2 });
        let mesh = Arc::new(mesh);
        let alpha = hdiv_core::coefficient::Coefficient::Constant(a);
        let beta = hdiv_core::coefficient::Coefficient::Constant(b);
        let _ = two_material;
        let problem = SaddleProblem {
            mesh, degree: 2,
            data: ProblemData::GradDiv { alpha, beta },
            bc: SaddleBc::Natural,
            f: Some(Arc::new(|x: &[f64; 3]| {
                [(13.0 * x[0] + 1.0).sin() * (9.0 * x[1]).cos() + (31.0 * x[1]).sin(),
                 (17.5 * x[0] * x[1] + 0.3).sin() + (23.0 * x[0]).cos(), 0.0]
            })),
            g: None,
            options: SolveOptions::default(),
        };
        let asm = assemble(&problem).unwrap();
        let h = amg_setup(asm.schur_approx.clone(), asm.options.amg).unwrap();
        let pre = BlockDiagPrecond::new(
            DiagonalScale::inverse_of(&asm.restriction.reduce(&asm.m_diag), 2.0), &h);
        let op = FnOp { n: asm.n_saddle(), f: |x: &[f64], y: &mut [f64]| asm.transformed_apply(x, y).unwrap() };
        let (_, rep) = minres(&op, Some(&pre), &asm.rhs, 1e-12, 5000).unwrap();
        its.push(rep.iterations);
    }
    println!("alpha={a} beta={b}: {its:?} spread {:.2}", *its[..3].iter().max().unwrap() as f64 / *its[..3].iter().min().unwrap() as f64);
    }
}
