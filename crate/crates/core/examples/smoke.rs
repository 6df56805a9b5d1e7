use mvgrowth::em::{fit_from, initialize, FitOptions};
use mvgrowth::model::{ItemSpec, LoadingScheme, ModelSpec, ParameterSet};
use mvgrowth::sim::{simulate_dataset, SimConfig};
use nalgebra::{DMatrix, DVector};

fn main() {
    // generate from the q=1 truth
    let spec1 = ModelSpec::new(
        vec![ItemSpec::binomial("NE", vec![8, 12, 14], 1), ItemSpec::normal("AM", 3, 1)],
        1, LoadingScheme::TimeInvariant).unwrap();
    let psi = DMatrix::from_row_slice(4, 4, &[
        0.231, -0.107, 1.004, -0.363,
        -0.107, 0.093, -0.531, 0.413,
        1.004, -0.531, 4.980, -2.183,
        -0.363, 0.413, -2.183, 2.164]);
    let tp = ParameterSet {
        mu_beta: DVector::from_vec(vec![0.249, -0.443, 23.98, -0.113]),
        psi_beta: psi.clone(),
        loadings: vec![DMatrix::from_row_slice(1,1,&[0.524]), DMatrix::from_row_slice(1,1,&[2.581])],
        sigma2: vec![vec![], vec![10.080, 9.953, 14.568]],
        gamma: vec![DMatrix::zeros(3,0), DMatrix::zeros(3,0)],
    };
    let (data, _) = simulate_dataset(&SimConfig { n: 800, seed: 3, spec: spec1.clone(), params: tp.clone(), covariate_gen: None }).unwrap();

    // equivalent q=0 model: fold the factor into the intercept block
    let spec0 = ModelSpec::new(
        vec![ItemSpec::binomial("NE", vec![8, 12, 14], 1), ItemSpec::normal("AM", 3, 1)],
        0, LoadingScheme::TimeInvariant).unwrap();
    let mut folded = psi.clone();
    folded[(0,0)] += 0.524f64.powi(2);
    folded[(2,2)] += 2.581f64.powi(2);
    folded[(0,2)] += 0.524 * 2.581;
    folded[(2,0)] = folded[(0,2)];
    let tp0 = ParameterSet {
        mu_beta: tp.mu_beta.clone(),
        psi_beta: folded,
        loadings: vec![DMatrix::zeros(1,0), DMatrix::zeros(1,0)],
        sigma2: tp.sigma2.clone(),
        gamma: tp.gamma.clone(),
    };
    let mut opts = FitOptions::default();
    opts.compute_standard_errors = false;
    opts.param_tol = 1e-6; opts.loglik_tol = 1e-9; opts.max_iterations = 1500;
    for m in [5usize, 9] {
        let mut o = opts.clone();
        o.quad_order = m;
        let t0 = std::time::Instant::now();
        let r = fit_from(&data, &spec0, &o, tp0.clone()).unwrap();
        let p = &r.params;
        println!("q=0 m={m:2} conv={} iters={:4} ll={:.4} ({:?})", r.converged, r.iterations, r.loglik(), t0.elapsed());
        println!("   aNE*={:.4} p01={:.4} p11={:.4} aAM*={:.3} c*={:.3} s2=({:.3},{:.3},{:.3})",
            p.psi_beta[(0,0)], p.psi_beta[(0,1)], p.psi_beta[(1,1)],
            p.psi_beta[(2,2)], p.psi_beta[(0,2)],
            p.sigma2[1][0], p.sigma2[1][1], p.sigma2[1][2]);
        println!("   truth:  aNE=0.5056 p01=-0.107 p11=0.093 aAM=11.642 c=2.356 s2=(10.080,9.953,14.568)");
    }
    // moment-based init for reference
    let ini = initialize(&data, &spec0, &opts).unwrap();
    let mut o = opts.clone(); o.quad_order = 5; o.max_iterations = 1500;
    let r = fit_from(&data, &spec0, &o, ini).unwrap();
    println!("q=0 m=5 cold-start: conv={} iters={} ll={:.4}", r.converged, r.iterations, r.loglik());
}
